//! Returning-churners-and-missed-metrics (RCMM) churn definitions.
//!
//! A user churns at horizon `k` once a login gap exceeds `k` days. Users who
//! come back after being flagged are returning churners, and the activity
//! they accrue after the flag is "missed". The chosen definition is the
//! smallest `k` that keeps both kinds of error under their thresholds.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metric::Metric;
use crate::panel::{add_days, CohortPanel, UserPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnEpisode {
    pub last_login: NaiveDate,
    pub flag_day: NaiveDate,
    pub gap_days: u32,
    /// False for the terminal gap to the panel end.
    pub returned: bool,
}

/// Login gaps of one user in time order, terminal gap last, as
/// `(last login day index, gap days, returned)`.
fn user_gaps(user: &UserPanel) -> Vec<(usize, u32, bool)> {
    let logins = user.login_indices();
    let mut gaps: Vec<(usize, u32, bool)> = logins.windows(2).map(|w| (w[0], (w[1] - w[0]) as u32, true)).collect();
    let last = *logins.last().unwrap_or(&0);
    gaps.push((last, (user.days.len() - 1 - last) as u32, false));
    gaps
}

pub fn user_episodes(user: &UserPanel, k: u32) -> Vec<ChurnEpisode> {
    user_gaps(user)
        .into_iter()
        .filter(|&(_, gap, _)| gap > k)
        .map(|(idx, gap, returned)| {
            let last_login = add_days(user.first_login, idx as i64);
            ChurnEpisode {
                last_login,
                flag_day: add_days(last_login, k as i64),
                gap_days: gap,
                returned,
            }
        })
        .collect()
}

/// Churn episodes of every user at horizon `k`, in panel order.
pub fn churn_flags(panel: &CohortPanel, k: u32) -> Result<Vec<(String, Vec<ChurnEpisode>)>> {
    if k == 0 {
        return Err(invalid("churn horizon k must be at least 1"));
    }
    Ok(panel
        .users
        .iter()
        .map(|u| (u.user_id.clone(), user_episodes(u, k)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    Country,
    /// One pooled group named `all`.
    None,
}

impl FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "country" | "group" => Ok(GroupBy::Country),
            "none" | "all" => Ok(GroupBy::None),
            _ => Err(invalid(format!("unknown group-by `{s}`"))),
        }
    }
}

impl GroupBy {
    pub fn label(self, user: &UserPanel) -> &str {
        match self {
            GroupBy::Country => &user.group,
            GroupBy::None => "all",
        }
    }

    pub fn groups(self, panel: &CohortPanel) -> Vec<String> {
        match self {
            GroupBy::Country => panel.groups(),
            GroupBy::None => vec!["all".to_string()],
        }
    }
}

/// Denominator of the returning-churner fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturningBase {
    /// Users with at least one episode at the horizon.
    Flagged,
    /// Every user in the group.
    #[default]
    Cohort,
}

impl FromStr for ReturningBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flagged" => Ok(ReturningBase::Flagged),
            "cohort" => Ok(ReturningBase::Cohort),
            _ => Err(invalid(format!("unknown returning base `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcmmCurve {
    pub group: String,
    pub as_of: NaiveDate,
    pub n_users: usize,
    pub base: ReturningBase,
    pub k_grid: Vec<u32>,
    pub flagged: Vec<usize>,
    pub returning: Vec<usize>,
    pub returning_fraction: Vec<f64>,
    pub missed: Vec<MissedSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissedSeries {
    pub metric: Metric,
    pub fraction: Vec<f64>,
}

impl RcmmCurve {
    /// Checks grid order, value ranges and monotonicity in `k`.
    pub fn validate(&self) -> Result<()> {
        if self.k_grid.is_empty() || self.k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("k grid must be non-empty and strictly ascending"));
        }
        let series = std::iter::once(&self.returning_fraction).chain(self.missed.iter().map(|m| &m.fraction));
        for s in series {
            if s.len() != self.k_grid.len() || s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid("curve values must lie in [0, 1] and align with the grid"));
            }
            if s.windows(2).any(|w| w[1] > w[0]) {
                return Err(invalid(format!("curve for group {} is not non-increasing in k", self.group)));
            }
        }
        Ok(())
    }

    pub fn max_missed(&self, i: usize) -> f64 {
        self.missed.iter().map(|m| m.fraction[i]).fold(0.0, f64::max)
    }
}

pub fn default_missed_metrics() -> Vec<Metric> {
    vec![Metric::ConnectionTime, Metric::ActionCount, Metric::Progression]
}

pub fn default_k_grid() -> Vec<u32> {
    (1..=120).collect()
}

struct UserCurveParts {
    /// `(k_lo, k_hi, flag base index, returned)`: for `k_lo <= k < k_hi` the
    /// first episode starts at the base index.
    records: Vec<(u32, u32, usize, bool)>,
    /// Suffix sums per metric: `suffix[m][i]` = total from day index `i` on.
    suffix: Vec<Vec<f64>>,
}

fn user_parts(user: &UserPanel, metrics: &[Metric]) -> UserCurveParts {
    let mut records = Vec::new();
    let mut best = 0u32;
    for (idx, gap, returned) in user_gaps(user) {
        if gap > best {
            records.push((best, gap, idx, returned));
            best = gap;
        }
    }
    let suffix = metrics
        .iter()
        .map(|m| {
            let s = user.series(*m);
            let mut acc = vec![0.0; s.len() + 1];
            for i in (0..s.len()).rev() {
                acc[i] = acc[i + 1] + s[i];
            }
            acc
        })
        .collect();
    UserCurveParts { records, suffix }
}

/// RCMM curves per group.
pub fn rcmm_curve(
    panel: &CohortPanel,
    k_grid: &[u32],
    metrics: &[Metric],
    group_by: GroupBy,
    base: ReturningBase,
) -> Result<Vec<RcmmCurve>> {
    if k_grid.is_empty() || k_grid[0] == 0 || k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("k grid must be non-empty, positive and strictly ascending"));
    }
    let groups = group_by.groups(panel);
    groups
        .par_iter()
        .map(|g| {
            let users: Vec<&UserPanel> = panel.users.iter().filter(|u| group_by.label(u) == g).collect();
            Ok(group_curve(g, panel.panel_end, &users, k_grid, metrics, base))
        })
        .collect()
}

fn group_curve(
    group: &str,
    as_of: NaiveDate,
    users: &[&UserPanel],
    k_grid: &[u32],
    metrics: &[Metric],
    base: ReturningBase,
) -> RcmmCurve {
    let nk = k_grid.len();
    let mut flagged = vec![0usize; nk];
    let mut returning = vec![0usize; nk];
    let mut missed_total = vec![vec![0.0; nk]; metrics.len()];
    let mut totals = vec![0.0; metrics.len()];

    for u in users {
        let parts = user_parts(u, metrics);
        for (m, s) in parts.suffix.iter().enumerate() {
            totals[m] += s[0];
        }
        for (ki, &k) in k_grid.iter().enumerate() {
            let Some(&(_, _, idx, returned)) = parts.records.iter().find(|r| r.0 <= k && k < r.1) else {
                continue;
            };
            flagged[ki] += 1;
            returning[ki] += returned as usize;
            let after_flag = (idx + k as usize + 1).min(u.days.len());
            for (m, s) in parts.suffix.iter().enumerate() {
                missed_total[m][ki] += s[after_flag];
            }
        }
    }

    let returning_fraction = (0..nk)
        .map(|i| {
            let denom = match base {
                ReturningBase::Flagged => flagged[i],
                ReturningBase::Cohort => users.len(),
            };
            if denom == 0 {
                0.0
            } else {
                returning[i] as f64 / denom as f64
            }
        })
        .collect();
    let missed = metrics
        .iter()
        .enumerate()
        .map(|(m, metric)| MissedSeries {
            metric: *metric,
            fraction: missed_total[m]
                .iter()
                .map(|&v| if totals[m] > 0.0 { v / totals[m] } else { 0.0 })
                .collect(),
        })
        .collect();

    RcmmCurve {
        group: group.to_string(),
        as_of,
        n_users: users.len(),
        base,
        k_grid: k_grid.to_vec(),
        flagged,
        returning,
        returning_fraction,
        missed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnMethod {
    Rcmm,
    EcdfExo,
    EcdfSnp,
    EcdfEndo,
}

impl fmt::Display for ChurnMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChurnMethod::Rcmm => "rcmm",
            ChurnMethod::EcdfExo => "ecdf_exo",
            ChurnMethod::EcdfSnp => "ecdf_snp",
            ChurnMethod::EcdfEndo => "ecdf_endo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub returning_max: f64,
    pub missed_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnDefinition {
    pub k_days: u32,
    pub method: ChurnMethod,
    /// Present for RCMM definitions.
    pub thresholds: Option<Thresholds>,
    /// Present for ECDF definitions.
    pub quantile: Option<f64>,
    pub group: String,
    pub as_of: NaiveDate,
}

/// Smallest `k` on the curve's grid meeting both thresholds.
pub fn find_churn_definition(curve: &RcmmCurve, returning_max: f64, missed_max: f64) -> Result<ChurnDefinition> {
    for t in [returning_max, missed_max] {
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid(format!("thresholds must lie in (0, 1), got {t}")));
        }
    }
    curve.validate()?;
    let hit = (0..curve.k_grid.len())
        .find(|&i| curve.returning_fraction[i] <= returning_max && curve.max_missed(i) <= missed_max);
    match hit {
        Some(i) => Ok(ChurnDefinition {
            k_days: curve.k_grid[i],
            method: ChurnMethod::Rcmm,
            thresholds: Some(Thresholds { returning_max, missed_max }),
            quantile: None,
            group: curve.group.clone(),
            as_of: curve.as_of,
        }),
        None => {
            let last = curve.k_grid.len() - 1;
            Err(Error::NoDefinition {
                returning_max,
                missed_max,
                best_returning: curve.returning_fraction[last],
                best_missed: curve.max_missed(last),
            })
        }
    }
}

/// Writes `group,k,n_users,flagged,returning,returning_fraction,missed_<metric>...`.
pub fn write_curves_csv<W: Write>(curves: &[RcmmCurve], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let metrics: Vec<Metric> = curves
        .first()
        .map(|c| c.missed.iter().map(|m| m.metric).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = ["group", "k", "n_users", "flagged", "returning", "returning_fraction"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(metrics.iter().map(|m| format!("missed_{}", m.id())));
    w.write_record(&header)?;
    for c in curves {
        for (i, k) in c.k_grid.iter().enumerate() {
            let mut rec = vec![
                c.group.clone(),
                k.to_string(),
                c.n_users.to_string(),
                c.flagged[i].to_string(),
                c.returning[i].to_string(),
                c.returning_fraction[i].to_string(),
            ];
            rec.extend(c.missed.iter().map(|m| m.fraction[i].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
