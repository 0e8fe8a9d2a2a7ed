//! Empirical CDFs and the ECDF engagement indicator.
//!
//! The indicator of a user's metric on a day is `F(z)`, the fraction of a
//! reference set at or below the current value `z`. The reference set is the
//! user's own past (endo), the group's past (exo), or the group on the same
//! day (snp). For `days_since_last_login`, endo and exo references are
//! completed login-to-login gaps, and the query is the open gap.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metric::Metric;
use crate::panel::{day_number, CohortPanel, UserPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Endo,
    Exo,
    Snp,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Endo, Mode::Exo, Mode::Snp];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Endo => "endo",
            Mode::Exo => "exo",
            Mode::Snp => "snp",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "endo" => Ok(Mode::Endo),
            "exo" => Ok(Mode::Exo),
            "snp" | "snapshot" => Ok(Mode::Snp),
            _ => Err(invalid(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    sorted: Vec<f64>,
    pub cutoff: Option<f64>,
}

/// Builds an ECDF, discarding samples above `cutoff` and any NaNs.
pub fn build_ecdf(samples: &[f64], cutoff: Option<f64>) -> Result<Ecdf> {
    let mut sorted: Vec<f64> = samples
        .iter()
        .copied()
        .filter(|v| !v.is_nan() && cutoff.is_none_or(|c| *v <= c))
        .collect();
    if sorted.is_empty() {
        return Err(Error::EmptyInput("no ECDF samples left after the cutoff".into()));
    }
    sorted.sort_by(f64::total_cmp);
    Ok(Ecdf { sorted, cutoff })
}

impl Ecdf {
    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// `#{samples <= x} / N`.
    pub fn evaluate(&self, x: f64) -> f64 {
        self.sorted.partition_point(|v| *v <= x) as f64 / self.sorted.len() as f64
    }

    /// Distinct sample values with the ECDF at each.
    pub fn distribution(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, v) in self.sorted.iter().enumerate() {
            match out.last_mut() {
                Some(last) if last.0 == *v => last.1 = (i + 1) as f64 / n,
                _ => out.push((*v, (i + 1) as f64 / n)),
            }
        }
        out
    }

    /// Smallest integer `z` with `evaluate(z) >= q`.
    pub fn equivalent_churn_definition(&self, q: f64) -> Result<i64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(invalid(format!("quantile must lie in (0, 1), got {q}")));
        }
        let n = self.sorted.len();
        let m = (1..=n).find(|&m| m as f64 / n as f64 >= q).unwrap_or(n);
        Ok(self.sorted[m - 1].ceil() as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HighIsBad,
    LowIsBad,
}

impl Direction {
    /// Direction a metric's indicator points in when it signals disengagement.
    pub fn for_metric(metric: Metric) -> Direction {
        match metric {
            Metric::DaysSinceLastLogin => Direction::HighIsBad,
            _ => Direction::LowIsBad,
        }
    }
}

pub fn churn_risk_flag(value: f64, direction: Direction, q: f64) -> bool {
    match direction {
        Direction::HighIsBad => value > q,
        Direction::LowIsBad => value < 1.0 - q,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorConfig {
    /// Upper cutoff on exo/snp references of `days_since_last_login`.
    pub gap_cutoff_days: Option<f64>,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self { gap_cutoff_days: Some(200.0) }
    }
}

impl IndicatorConfig {
    fn cutoff(&self, metric: Metric, mode: Mode) -> Option<f64> {
        (metric == Metric::DaysSinceLastLogin && mode != Mode::Endo)
            .then_some(self.gap_cutoff_days)
            .flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfIndicator {
    pub user_id: String,
    pub day: NaiveDate,
    pub metric: Metric,
    pub mode: Mode,
    pub value: f64,
}

/// Completed gaps of a user whose closing login falls strictly before `day`.
pub fn gaps_before(user: &UserPanel, day: NaiveDate) -> Vec<f64> {
    let limit = day_number(day) - day_number(user.first_login);
    user.completed_gaps()
        .into_iter()
        .filter(|&(close, _)| (close as i64) < limit)
        .map(|(_, g)| g as f64)
        .collect()
}

fn values_before<'a>(user: &UserPanel, series: &'a [f64], day: NaiveDate) -> impl Iterator<Item = f64> + 'a {
    let limit = (day_number(day) - day_number(user.first_login)).clamp(0, series.len() as i64) as usize;
    series[..limit].iter().copied()
}

/// Raw (pre-cutoff) reference samples for one indicator.
pub fn reference_samples(panel: &CohortPanel, user: &UserPanel, day: NaiveDate, metric: Metric, mode: Mode) -> Vec<f64> {
    let gaps = metric == Metric::DaysSinceLastLogin;
    match mode {
        Mode::Endo if gaps => gaps_before(user, day),
        Mode::Endo => values_before(user, &user.series(metric), day).collect(),
        Mode::Exo => panel
            .group_users(&user.group)
            .flat_map(|u| {
                if gaps {
                    gaps_before(u, day)
                } else {
                    values_before(u, &u.series(metric), day).collect()
                }
            })
            .collect(),
        Mode::Snp => panel
            .group_users(&user.group)
            .filter_map(|u| u.day_index(day).map(|i| u.series(metric)[i]))
            .collect(),
    }
}

fn query_value(user: &UserPanel, day: NaiveDate, metric: Metric) -> Result<f64> {
    let idx = user
        .day_index(day)
        .ok_or_else(|| invalid(format!("user {} has no panel row on {day}", user.user_id)))?;
    Ok(user.series(metric)[idx])
}

fn reference_ecdf(samples: &[f64], cutoff: Option<f64>, mode: Mode, user: &UserPanel, day: NaiveDate) -> Result<Ecdf> {
    build_ecdf(samples, cutoff).map_err(|_| Error::InsufficientHistory {
        mode: mode.as_str(),
        user: user.user_id.clone(),
        day,
    })
}

/// The reference ECDF that `user`'s indicator on `day` is evaluated against.
pub fn indicator_reference(
    panel: &CohortPanel,
    user: &UserPanel,
    day: NaiveDate,
    metric: Metric,
    mode: Mode,
    cfg: &IndicatorConfig,
) -> Result<Ecdf> {
    let samples = reference_samples(panel, user, day, metric, mode);
    reference_ecdf(&samples, cfg.cutoff(metric, mode), mode, user, day)
}

pub fn indicator(
    panel: &CohortPanel,
    user_id: &str,
    day: NaiveDate,
    metric: Metric,
    mode: Mode,
    cfg: &IndicatorConfig,
) -> Result<EcdfIndicator> {
    let user = panel.try_user(user_id)?;
    let z = query_value(user, day, metric)?;
    let ecdf = indicator_reference(panel, user, day, metric, mode, cfg)?;
    Ok(EcdfIndicator {
        user_id: user.user_id.clone(),
        day,
        metric,
        mode,
        value: ecdf.evaluate(z),
    })
}

/// Indicators for every user with a panel row on `day`, sharing the group
/// references across users. Users without usable history yield an error entry.
pub fn indicators_on_day(
    panel: &CohortPanel,
    day: NaiveDate,
    metric: Metric,
    mode: Mode,
    cfg: &IndicatorConfig,
) -> Vec<(String, Result<EcdfIndicator>)> {
    let cutoff = cfg.cutoff(metric, mode);
    let shared: Vec<(String, Option<Ecdf>)> = match mode {
        Mode::Endo => Vec::new(),
        _ => panel
            .groups()
            .into_par_iter()
            .map(|g| {
                let rep = panel.group_users(&g).next().expect("group has users");
                let samples = reference_samples(panel, rep, day, metric, mode);
                let e = build_ecdf(&samples, cutoff).ok();
                (g, e)
            })
            .collect(),
    };
    panel
        .users
        .par_iter()
        .filter(|u| u.day_index(day).is_some())
        .map(|u| {
            let result = (|| {
                let z = query_value(u, day, metric)?;
                let ecdf = match mode {
                    Mode::Endo => reference_ecdf(&reference_samples(panel, u, day, metric, mode), cutoff, mode, u, day)?,
                    _ => shared
                        .iter()
                        .find(|(g, _)| *g == u.group)
                        .and_then(|(_, e)| e.clone())
                        .ok_or_else(|| Error::InsufficientHistory {
                            mode: mode.as_str(),
                            user: u.user_id.clone(),
                            day,
                        })?,
                };
                Ok(EcdfIndicator {
                    user_id: u.user_id.clone(),
                    day,
                    metric,
                    mode,
                    value: ecdf.evaluate(z),
                })
            })();
            (u.user_id.clone(), result)
        })
        .collect()
}

/// The ECDF a churn definition is read from: completed gaps for endo/exo,
/// `days_since_last_login` values on the day for snp.
pub fn gap_ecdf(panel: &CohortPanel, user: &UserPanel, day: NaiveDate, mode: Mode, cfg: &IndicatorConfig) -> Result<Ecdf> {
    let samples = reference_samples(panel, user, day, Metric::DaysSinceLastLogin, mode);
    reference_ecdf(&samples, cfg.cutoff(Metric::DaysSinceLastLogin, mode), mode, user, day)
}

/// Writes `value,F` rows.
pub fn write_distribution_csv<W: Write>(ecdf: &Ecdf, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["value", "ecdf"])?;
    for (v, f) in ecdf.distribution() {
        w.write_record([v.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
