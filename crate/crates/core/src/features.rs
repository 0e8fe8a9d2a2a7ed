//! Engineered per-day feature columns: trailing window sums, ISO week and
//! loyalty snapshots.

use std::io::Write;

use chrono::Datelike;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metric::Metric;
use crate::panel::{CohortPanel, UserPanel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub windows: Vec<usize>,
    /// Metrics summed over each trailing window.
    pub rolling_metrics: Vec<Metric>,
    /// Metrics copied as-is from the day's row.
    pub snapshot_metrics: Vec<Metric>,
    pub week_of_year: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            windows: vec![3, 7, 15],
            rolling_metrics: vec![
                Metric::ConnectionTime,
                Metric::ActionCount,
                Metric::SessionCount,
                Metric::Progression,
            ],
            snapshot_metrics: vec![Metric::LoyaltyIndex, Metric::WeeklyLoyaltyIndex],
            week_of_year: true,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.windows.contains(&0) {
            return Err(invalid("rolling windows must be positive"));
        }
        if self.names().is_empty() {
            return Err(invalid("feature spec selects no columns"));
        }
        Ok(())
    }

    /// Column names, in the order [`user_features`] emits them.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in &self.rolling_metrics {
            for w in &self.windows {
                names.push(rolling_name(*m, *w));
            }
        }
        if self.week_of_year {
            names.push("week_of_year".to_string());
        }
        names.extend(self.snapshot_metrics.iter().map(|m| m.id().to_string()));
        names
    }

    /// Columns for a single snapshot on the last login day. The calendar week
    /// and the loyalty index are dropped: on that day the first mostly tells
    /// whether the user was still active at the panel end, and the second is
    /// `logins / (lifetime + 1)`, a function of the lifetime being predicted.
    pub fn static_snapshot(&self) -> FeatureSpec {
        FeatureSpec {
            week_of_year: false,
            snapshot_metrics: self
                .snapshot_metrics
                .iter()
                .copied()
                .filter(|m| *m != Metric::LoyaltyIndex)
                .collect(),
            ..self.clone()
        }
    }
}

pub fn rolling_name(metric: Metric, window: usize) -> String {
    format!("{}_sum_{}d", metric.id(), window)
}

/// Trailing sums over `(d - w, d]`; days before the start of the series count as zero.
pub fn rolling_sum(series: &[f64], w: usize) -> Vec<f64> {
    (0..series.len())
        .map(|d| series[(d + 1).saturating_sub(w)..=d].iter().sum())
        .collect()
}

/// Row-major day-by-feature matrix for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_features: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn n_days(&self) -> usize {
        self.values.len().checked_div(self.n_features).unwrap_or(0)
    }

    pub fn row(&self, day_index: usize) -> &[f64] {
        &self.values[day_index * self.n_features..(day_index + 1) * self.n_features]
    }
}

pub fn user_features(user: &UserPanel, spec: &FeatureSpec) -> FeatureMatrix {
    let n_days = user.days.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for m in &spec.rolling_metrics {
        let series = user.series(*m);
        for w in &spec.windows {
            columns.push(rolling_sum(&series, *w));
        }
    }
    if spec.week_of_year {
        columns.push(user.days.iter().map(|d| d.day.iso_week().week() as f64).collect());
    }
    for m in &spec.snapshot_metrics {
        columns.push(user.series(*m));
    }
    let n_features = columns.len();
    let mut values = Vec::with_capacity(n_days * n_features);
    for d in 0..n_days {
        values.extend(columns.iter().map(|c| c[d]));
    }
    FeatureMatrix { n_features, values }
}

/// Feature matrices for every user, in panel order.
pub fn rolling_features(panel: &CohortPanel, spec: &FeatureSpec) -> Result<Vec<FeatureMatrix>> {
    spec.validate()?;
    Ok(panel.users.par_iter().map(|u| user_features(u, spec)).collect())
}

/// Writes `user_id,day,<features...>` for every panel row.
pub fn write_features_csv<W: Write>(panel: &CohortPanel, spec: &FeatureSpec, out: W) -> Result<()> {
    let matrices = rolling_features(panel, spec)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["user_id".to_string(), "day".to_string()];
    header.extend(spec.names());
    w.write_record(&header)?;
    for (u, m) in panel.users.iter().zip(&matrices) {
        for (i, d) in u.days.iter().enumerate() {
            let mut rec = vec![u.user_id.clone(), d.day.to_string()];
            rec.extend(m.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
