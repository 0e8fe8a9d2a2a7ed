//! Harmonic-mean engagement scores over min-max scaled components.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecdf::Mode;
use crate::error::{invalid, Error, Result};
use crate::metric::Metric;
use crate::panel::{day_number, CohortPanel, UserPanel};

/// Scales `value` into [0, 1] against a reference range.
///
/// A degenerate range (`min == max == c`) maps to 1 when `value >= c` and
/// `value > 0`, else 0.
pub fn scale_to_range(value: f64, min: f64, max: f64) -> f64 {
    if max > min {
        ((value - min) / (max - min)).clamp(0.0, 1.0)
    } else if value >= max && value > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn minmax_scale(value: f64, reference: &[f64]) -> Result<f64> {
    let (min, max) = min_max(reference.iter().copied()).ok_or_else(|| Error::EmptyInput("empty scaling reference".into()))?;
    Ok(scale_to_range(value, min, max))
}

fn min_max(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Scaled value with no reference at all: positive activity counts as full engagement.
fn scale_without_reference(value: f64) -> f64 {
    if value > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `n / sum(1 / z)`, exactly 0 when any component is 0.
pub fn harmonic_score(scaled: &[f64]) -> Result<f64> {
    if scaled.is_empty() {
        return Err(Error::EmptyInput("no score components".into()));
    }
    if let Some(v) = scaled.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("scaled component {v} outside [0, 1]")));
    }
    if scaled.contains(&0.0) {
        return Ok(0.0);
    }
    let denom: f64 = scaled.iter().map(|v| 1.0 / v).sum();
    let (lo, hi) = min_max(scaled.iter().copied()).unwrap();
    // Keep rounding from pushing the mean outside the component range.
    Ok((scaled.len() as f64 / denom).clamp(lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub components: Vec<Metric>,
    pub mode: Mode,
}

impl Default for ScoreSpec {
    fn default() -> Self {
        Self {
            components: vec![
                Metric::WeeklyLoyaltyIndex,
                Metric::VideoViewCount,
                Metric::VideoWatchTime,
                Metric::ActionCount,
                Metric::Progression,
                Metric::ElearningConnectionTime,
            ],
            mode: Mode::Endo,
        }
    }
}

impl ScoreSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(invalid("score needs at least one component"));
        }
        let mut seen = self.components.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.components.len() {
            return Err(invalid("duplicate score components"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementScore {
    pub user_id: String,
    pub day: NaiveDate,
    pub value: f64,
    pub components: Vec<f64>,
}

/// Per-calendar-day (min, max) of one metric over a group, plus the running
/// range over all strictly earlier days.
struct GroupRanges {
    daily: BTreeMap<i64, (f64, f64)>,
    before: BTreeMap<i64, (f64, f64)>,
}

impl GroupRanges {
    fn build<'a>(users: impl Iterator<Item = &'a UserPanel>, metric: Metric) -> Self {
        let mut daily: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
        for u in users {
            let base = day_number(u.first_login);
            for (i, v) in u.series(metric).into_iter().enumerate() {
                daily
                    .entry(base + i as i64)
                    .and_modify(|(lo, hi)| {
                        *lo = lo.min(v);
                        *hi = hi.max(v);
                    })
                    .or_insert((v, v));
            }
        }
        let mut before = BTreeMap::new();
        let mut running: Option<(f64, f64)> = None;
        for (&d, &(lo, hi)) in &daily {
            if let Some(r) = running {
                before.insert(d, r);
            }
            running = Some(match running {
                None => (lo, hi),
                Some((a, b)) => (a.min(lo), b.max(hi)),
            });
        }
        Self { daily, before }
    }

    /// Range of all days strictly before `d`.
    fn history(&self, d: i64) -> Option<(f64, f64)> {
        if let Some(r) = self.before.get(&d) {
            return Some(*r);
        }
        // `d` is not a panel day of this group: fold everything earlier.
        min_max(self.daily.range(..d).flat_map(|(_, (lo, hi))| [*lo, *hi]))
    }
}

struct ScaleContext {
    /// One entry per component; `None` in endo mode.
    group: Vec<Option<GroupRanges>>,
}

impl ScaleContext {
    fn new(panel: &CohortPanel, group: &str, spec: &ScoreSpec) -> Self {
        let group = spec
            .components
            .iter()
            .map(|m| match spec.mode {
                Mode::Endo => None,
                _ => Some(GroupRanges::build(panel.group_users(group), *m)),
            })
            .collect();
        Self { group }
    }
}

fn user_scores(
    user: &UserPanel,
    spec: &ScoreSpec,
    ctx: &ScaleContext,
    range: Option<(NaiveDate, NaiveDate)>,
) -> Result<Vec<EngagementScore>> {
    let series: Vec<Vec<f64>> = spec.components.iter().map(|m| user.series(*m)).collect();
    let mut running: Vec<Option<(f64, f64)>> = vec![None; series.len()];
    let base = day_number(user.first_login);
    let mut out = Vec::new();
    for (i, row) in user.days.iter().enumerate() {
        let in_range = range.is_none_or(|(a, b)| row.day >= a && row.day <= b);
        if in_range {
            let mut scaled = Vec::with_capacity(series.len());
            for (c, s) in series.iter().enumerate() {
                let v = s[i];
                let reference = match spec.mode {
                    Mode::Endo => running[c],
                    Mode::Exo => ctx.group[c].as_ref().unwrap().history(base + i as i64),
                    Mode::Snp => ctx.group[c].as_ref().unwrap().daily.get(&(base + i as i64)).copied(),
                };
                scaled.push(match reference {
                    Some((lo, hi)) => scale_to_range(v, lo, hi),
                    None => scale_without_reference(v),
                });
            }
            out.push(EngagementScore {
                user_id: user.user_id.clone(),
                day: row.day,
                value: harmonic_score(&scaled)?,
                components: scaled,
            });
        }
        for (c, s) in series.iter().enumerate() {
            let v = s[i];
            running[c] = Some(match running[c] {
                None => (v, v),
                Some((lo, hi)) => (lo.min(v), hi.max(v)),
            });
        }
    }
    Ok(out)
}

/// Daily scores for one user, optionally restricted to an inclusive day range.
pub fn score_series(
    panel: &CohortPanel,
    spec: &ScoreSpec,
    user_id: &str,
    range: Option<(NaiveDate, NaiveDate)>,
) -> Result<Vec<EngagementScore>> {
    spec.validate()?;
    let user = panel.try_user(user_id)?;
    let ctx = ScaleContext::new(panel, &user.group, spec);
    user_scores(user, spec, &ctx, range)
}

/// Daily scores for every user, in panel order.
pub fn score_all(panel: &CohortPanel, spec: &ScoreSpec, range: Option<(NaiveDate, NaiveDate)>) -> Result<Vec<EngagementScore>> {
    spec.validate()?;
    let contexts: Vec<(String, ScaleContext)> = panel
        .groups()
        .into_par_iter()
        .map(|g| {
            let ctx = ScaleContext::new(panel, &g, spec);
            (g, ctx)
        })
        .collect();
    let per_user: Vec<Vec<EngagementScore>> = panel
        .users
        .par_iter()
        .map(|u| {
            let ctx = &contexts.iter().find(|(g, _)| *g == u.group).unwrap().1;
            user_scores(u, spec, ctx, range)
        })
        .collect::<Result<_>>()?;
    Ok(per_user.into_iter().flatten().collect())
}

/// Writes `user_id,day,score,<component>...`.
pub fn write_scores_csv<W: Write>(scores: &[EngagementScore], spec: &ScoreSpec, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["user_id".to_string(), "day".to_string(), "score".to_string()];
    header.extend(spec.components.iter().map(|m| m.id().to_string()));
    w.write_record(&header)?;
    for s in scores {
        let mut rec = vec![s.user_id.clone(), s.day.to_string(), s.value.to_string()];
        rec.extend(s.components.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_scale(5.0, &[0.0, 10.0]).unwrap(), 0.5);
        assert_eq!(minmax_scale(12.0, &[0.0, 10.0]).unwrap(), 1.0);
        assert_eq!(minmax_scale(-1.0, &[0.0, 10.0]).unwrap(), 0.0);
        assert!(minmax_scale(1.0, &[]).is_err());
    }

    #[test]
    fn degenerate_reference() {
        assert_eq!(minmax_scale(3.0, &[3.0, 3.0]).unwrap(), 1.0);
        assert_eq!(minmax_scale(4.0, &[3.0]).unwrap(), 1.0);
        assert_eq!(minmax_scale(2.0, &[3.0]).unwrap(), 0.0);
        assert_eq!(minmax_scale(0.0, &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn harmonic_examples() {
        assert_eq!(harmonic_score(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(harmonic_score(&[0.5, 1.0]).unwrap(), 2.0 / 3.0);
        assert_eq!(harmonic_score(&[0.3, 0.0, 0.9]).unwrap(), 0.0);
        assert!(harmonic_score(&[]).is_err());
        assert!(harmonic_score(&[1.5]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ScoreSpec::default().validate().is_ok());
        let dup = ScoreSpec { components: vec![Metric::ActionCount, Metric::ActionCount], mode: Mode::Exo };
        assert!(dup.validate().is_err());
    }
}
