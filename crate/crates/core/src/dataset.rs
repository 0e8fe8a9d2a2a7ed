//! Survival datasets derived from a panel: churn labels, static snapshots and
//! interval pseudo-observations with time-varying covariates.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{user_features, FeatureSpec};
use crate::panel::CohortPanel;
use crate::survival::SurvivalObservation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSubject {
    pub user_id: String,
    /// Index into `panel.users`.
    pub user_index: usize,
    pub obs: SurvivalObservation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub subjects: Vec<LabeledSubject>,
    pub warnings: Vec<String>,
}

impl Labeled {
    pub fn observations(&self) -> Vec<SurvivalObservation> {
        self.subjects.iter().map(|s| s.obs).collect()
    }
}

/// Duration = first to last login; churned iff the terminal gap exceeds `k`.
/// Zero-length lifetimes are dropped with a warning.
pub fn label_churn(panel: &CohortPanel, churn_k: u32) -> Result<Labeled> {
    if churn_k == 0 {
        return Err(invalid("churn horizon k must be at least 1"));
    }
    let mut subjects = Vec::new();
    let mut warnings = Vec::new();
    for (i, u) in panel.users.iter().enumerate() {
        let last = u.last_login_index();
        if last == 0 {
            warnings.push(format!("user {} has a zero-length lifetime and is dropped", u.user_id));
            continue;
        }
        let terminal_gap = (u.days.len() - 1 - last) as u32;
        subjects.push(LabeledSubject {
            user_id: u.user_id.clone(),
            user_index: i,
            obs: SurvivalObservation::new(0, last as u32, terminal_gap > churn_k),
        });
    }
    Ok(Labeled { subjects, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    Day,
    #[default]
    Week,
    Month,
}

impl Interval {
    pub fn days(self) -> u32 {
        match self {
            Interval::Day => 1,
            Interval::Week => 7,
            Interval::Month => 30,
        }
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interval::Day => "day",
            Interval::Week => "week",
            Interval::Month => "month",
        })
    }
}

impl FromStr for Interval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Interval::Day),
            "week" => Ok(Interval::Week),
            "month" => Ok(Interval::Month),
            _ => Err(invalid(format!("unknown interval `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    /// Index into the owning table's `subjects`.
    pub subject: u32,
    pub entry: u32,
    pub exit: u32,
    pub event: bool,
    pub features: Vec<f64>,
}

impl FeatureRow {
    pub fn obs(&self) -> SurvivalObservation {
        SurvivalObservation::new(self.entry, self.exit, self.event)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub subjects: Vec<String>,
    /// Grouped by subject, ordered by entry within a subject.
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if r.entry >= r.exit || r.features.len() != self.names.len() || r.subject as usize >= self.subjects.len() {
                return Err(invalid(format!("malformed feature row for subject {}", r.subject)));
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("non-finite feature for subject {}", r.subject)));
            }
        }
        Ok(())
    }

    /// Keeps only the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<FeatureTable> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|x| x == n)
                    .ok_or_else(|| invalid(format!("unknown feature `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureTable {
            names: names.to_vec(),
            subjects: self.subjects.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| FeatureRow {
                    features: idx.iter().map(|&i| r.features[i]).collect(),
                    ..r.clone()
                })
                .collect(),
        })
    }

    /// Rows of the given subjects, renumbered in the order given.
    pub fn subset(&self, subjects: &[u32]) -> FeatureTable {
        let mut by_subject: Vec<Vec<&FeatureRow>> = vec![Vec::new(); self.subjects.len()];
        for r in &self.rows {
            by_subject[r.subject as usize].push(r);
        }
        let mut rows = Vec::new();
        for (new_id, &s) in subjects.iter().enumerate() {
            rows.extend(by_subject[s as usize].iter().map(|r| FeatureRow { subject: new_id as u32, ..(*r).clone() }));
        }
        FeatureTable {
            names: self.names.clone(),
            subjects: subjects.iter().map(|&s| self.subjects[s as usize].clone()).collect(),
            rows,
        }
    }
}

/// Segments `[0, duration)` at multiples of `len`: `(entry, exit)` pairs.
pub fn segments(duration: u32, len: u32) -> Vec<(u32, u32)> {
    (0..duration)
        .step_by(len as usize)
        .map(|start| (start, (start + len).min(duration)))
        .collect()
}

/// One row per labeled user with features taken on the last login day, using
/// the [`FeatureSpec::static_snapshot`] columns.
pub fn static_rows(panel: &CohortPanel, labeled: &Labeled, spec: &FeatureSpec) -> Result<FeatureTable> {
    let spec = &spec.static_snapshot();
    spec.validate()?;
    let rows = labeled
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let m = user_features(&panel.users[s.user_index], spec);
            FeatureRow {
                subject: i as u32,
                entry: 0,
                exit: s.obs.exit,
                event: s.obs.event,
                features: m.row(s.obs.exit as usize).to_vec(),
            }
        })
        .collect();
    Ok(FeatureTable {
        names: spec.names(),
        subjects: labeled.subjects.iter().map(|s| s.user_id.clone()).collect(),
        rows,
    })
}

/// Pseudo-observations: each labeled lifetime cut at interval boundaries,
/// covariates taken on each segment's first day, the event on the last segment.
pub fn pseudo_observations(
    panel: &CohortPanel,
    labeled: &Labeled,
    spec: &FeatureSpec,
    interval: Interval,
) -> Result<FeatureTable> {
    spec.validate()?;
    let per_subject: Vec<Vec<FeatureRow>> = labeled
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let m = user_features(&panel.users[s.user_index], spec);
            let segs = segments(s.obs.exit, interval.days());
            let n = segs.len();
            segs.into_iter()
                .enumerate()
                .map(|(j, (entry, exit))| FeatureRow {
                    subject: i as u32,
                    entry,
                    exit,
                    event: s.obs.event && j + 1 == n,
                    features: m.row(entry as usize).to_vec(),
                })
                .collect()
        })
        .collect();
    Ok(FeatureTable {
        names: spec.names(),
        subjects: labeled.subjects.iter().map(|s| s.user_id.clone()).collect(),
        rows: per_subject.into_iter().flatten().collect(),
    })
}
