//! Kaplan–Meier and Nelson–Aalen estimators with left-truncated risk sets,
//! plus IPCW Brier scores.
//!
//! Times are integer days. A subject is at risk at `t` when `entry < t <= exit`.
//! On ties, events are processed before censorings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SurvivalObservation {
    pub entry: u32,
    pub exit: u32,
    pub event: bool,
}

impl SurvivalObservation {
    pub fn new(entry: u32, exit: u32, event: bool) -> Self {
        Self { entry, exit, event }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entry >= self.exit {
            return Err(invalid(format!("entry {} must precede exit {}", self.entry, self.exit)));
        }
        Ok(())
    }
}

/// Right-continuous step function: `S(t)` is the value at the last knot `<= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    /// Ascending knots, starting at 0.
    pub times: Vec<u32>,
    pub survival: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

pub(crate) fn step_index(times: &[u32], t: u32) -> Option<usize> {
    times.partition_point(|&x| x <= t).checked_sub(1)
}

impl SurvivalCurve {
    pub fn constant(value: f64) -> Self {
        Self { times: vec![0], survival: vec![value], lower: None, upper: None }
    }

    pub fn at(&self, t: u32) -> f64 {
        step_index(&self.times, t).map_or(1.0, |i| self.survival[i])
    }

    /// `S(t-)`: the value just before `t`.
    pub fn before(&self, t: u32) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.at(t - 1)
        }
    }

    /// Smallest knot with `S <= 0.5`.
    pub fn median(&self) -> Option<u32> {
        self.times.iter().zip(&self.survival).find(|(_, s)| **s <= 0.5).map(|(t, _)| *t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 || self.survival.len() != n || self.times[0] != 0 {
            return Err(invalid("curve must start at t=0 with one value per knot"));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("curve knots must be strictly ascending"));
        }
        if self.survival.iter().any(|s| !(0.0..=1.0).contains(s)) || self.survival.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("survival must be non-increasing in [0, 1]"));
        }
        if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
            let ok = lo.len() == n
                && hi.len() == n
                && (0..n).all(|i| lo[i] <= self.survival[i] && self.survival[i] <= hi[i]);
            if !ok {
                return Err(invalid("confidence band must contain the estimate"));
            }
        }
        Ok(())
    }

    /// Writes `t,survival,lower,upper` (band columns empty when absent).
    pub fn write_csv<W: Write>(&self, group: Option<&str>, out: &mut csv::Writer<W>) -> Result<()> {
        for i in 0..self.times.len() {
            let band = |b: &Option<Vec<f64>>| b.as_ref().map_or(String::new(), |v| v[i].to_string());
            let mut rec = Vec::with_capacity(5);
            if let Some(g) = group {
                rec.push(g.to_string());
            }
            rec.extend([
                self.times[i].to_string(),
                self.survival[i].to_string(),
                band(&self.lower),
                band(&self.upper),
            ]);
            out.write_record(&rec)?;
        }
        Ok(())
    }
}

/// Per distinct event time: `(t, events d, at risk n)`.
pub(crate) fn risk_table(obs: &[SurvivalObservation]) -> Vec<(u32, usize, usize)> {
    let mut event_times: Vec<u32> = obs.iter().filter(|o| o.event).map(|o| o.exit).collect();
    event_times.sort_unstable();
    event_times.dedup();
    if event_times.is_empty() {
        return Vec::new();
    }
    let mut entries: Vec<u32> = obs.iter().map(|o| o.entry).collect();
    let mut exits: Vec<u32> = obs.iter().map(|o| o.exit).collect();
    let mut ev: Vec<u32> = obs.iter().filter(|o| o.event).map(|o| o.exit).collect();
    entries.sort_unstable();
    exits.sort_unstable();
    ev.sort_unstable();
    event_times
        .into_iter()
        .map(|t| {
            // entry < t and exit >= t
            let entered = entries.partition_point(|&e| e < t);
            let left = exits.partition_point(|&x| x < t);
            let d = ev.partition_point(|&x| x <= t) - ev.partition_point(|&x| x < t);
            (t, d, entered - left)
        })
        .collect()
}

fn check_obs(obs: &[SurvivalObservation]) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::EmptyInput("no survival observations".into()));
    }
    obs.iter().try_for_each(SurvivalObservation::validate)
}

/// Product-limit estimate with a log-transformed Greenwood 95% band.
pub fn kaplan_meier(obs: &[SurvivalObservation]) -> Result<SurvivalCurve> {
    check_obs(obs)?;
    Ok(km_from_table(&risk_table(obs), true))
}

/// Product-limit estimate without the band.
pub(crate) fn km_unchecked(obs: &[SurvivalObservation]) -> SurvivalCurve {
    km_from_table(&risk_table(obs), false)
}

fn km_from_table(table: &[(u32, usize, usize)], band: bool) -> SurvivalCurve {
    const Z: f64 = 1.959_963_984_540_054;
    let mut times = vec![0];
    let mut survival = vec![1.0];
    let mut lower = vec![1.0];
    let mut upper = vec![1.0];
    let mut s = 1.0;
    let mut var = 0.0;
    for &(t, d, n) in table {
        s *= (n - d) as f64 / n as f64;
        if n > d {
            var += d as f64 / (n as f64 * (n - d) as f64);
        }
        times.push(t);
        survival.push(s);
        if band {
            if s > 0.0 {
                let sigma = var.sqrt();
                lower.push(s * (-Z * sigma).exp());
                upper.push((s * (Z * sigma).exp()).min(1.0));
            } else {
                lower.push(0.0);
                upper.push(0.0);
            }
        }
    }
    SurvivalCurve {
        times,
        survival,
        lower: band.then_some(lower),
        upper: band.then_some(upper),
    }
}

/// Step function of cumulative hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeHazard {
    pub times: Vec<u32>,
    pub hazard: Vec<f64>,
}

impl CumulativeHazard {
    pub fn at(&self, t: u32) -> f64 {
        step_index(&self.times, t).map_or(0.0, |i| self.hazard[i])
    }

    /// `exp(-H(t))` on the same knots.
    pub fn survival(&self) -> SurvivalCurve {
        let mut times = vec![0];
        let mut survival = vec![1.0];
        for (t, h) in self.times.iter().zip(&self.hazard) {
            if *t == 0 {
                survival[0] = (-h).exp();
            } else {
                times.push(*t);
                survival.push((-h).exp());
            }
        }
        SurvivalCurve { times, survival, lower: None, upper: None }
    }
}

pub fn nelson_aalen(obs: &[SurvivalObservation]) -> Result<CumulativeHazard> {
    check_obs(obs)?;
    Ok(na_unchecked(obs))
}

pub(crate) fn na_unchecked(obs: &[SurvivalObservation]) -> CumulativeHazard {
    let mut h = 0.0;
    let mut times = Vec::new();
    let mut hazard = Vec::new();
    for (t, d, n) in risk_table(obs) {
        h += d as f64 / n as f64;
        times.push(t);
        hazard.push(h);
    }
    CumulativeHazard { times, hazard }
}

pub fn median_survival(curve: &SurvivalCurve) -> Option<u32> {
    curve.median()
}

/// Kaplan–Meier estimate of the censoring distribution `G`.
pub fn censoring_curve(obs: &[SurvivalObservation]) -> SurvivalCurve {
    let flipped: Vec<SurvivalObservation> = obs
        .iter()
        .map(|o| SurvivalObservation { event: !o.event, ..*o })
        .collect();
    km_unchecked(&flipped)
}

/// IPCW Brier score at each grid time. `predict(i, t)` is subject `i`'s
/// predicted survival at `t`.
///
/// Events at or before `t` are weighted by `1 / G(exit-)`, subjects still at
/// risk by `1 / G(t)`; censored-before-`t` subjects contribute nothing.
pub fn brier_curve_with<F>(obs: &[SurvivalObservation], grid: &[u32], predict: F) -> Result<Vec<f64>>
where
    F: Fn(usize, u32) -> f64,
{
    check_obs(obs)?;
    let g = censoring_curve(obs);
    let n = obs.len() as f64;
    grid.iter()
        .map(|&t| {
            let g_t = g.at(t);
            let mut total = 0.0;
            for (i, o) in obs.iter().enumerate() {
                if o.exit <= t && o.event {
                    let w = g.before(o.exit);
                    if w <= 0.0 {
                        return Err(Error::ZeroCensoringWeight(o.exit as i64));
                    }
                    total += predict(i, t).powi(2) / w;
                } else if o.exit > t {
                    if g_t <= 0.0 {
                        return Err(Error::ZeroCensoringWeight(t as i64));
                    }
                    total += (1.0 - predict(i, t)).powi(2) / g_t;
                }
            }
            Ok(total / n)
        })
        .collect()
}

pub fn brier_curve(predicted: &[SurvivalCurve], obs: &[SurvivalObservation], grid: &[u32]) -> Result<Vec<f64>> {
    if predicted.len() != obs.len() {
        return Err(invalid("one prediction per observation is required"));
    }
    brier_curve_with(obs, grid, |i, t| predicted[i].at(t))
}

pub fn brier_score(predicted: &[SurvivalCurve], obs: &[SurvivalObservation], t: u32) -> Result<f64> {
    Ok(brier_curve(predicted, obs, &[t])?[0])
}

/// Trapezoidal average of `bs` over `grid`, normalised by the grid span.
pub fn integrated_brier_score(grid: &[u32], bs: &[f64]) -> Result<f64> {
    if grid.is_empty() || grid.len() != bs.len() {
        return Err(invalid("Brier grid and values must be non-empty and aligned"));
    }
    if grid.len() == 1 {
        return Ok(bs[0]);
    }
    let mut area = 0.0;
    for i in 1..grid.len() {
        area += 0.5 * (bs[i] + bs[i - 1]) * (grid[i] - grid[i - 1]) as f64;
    }
    Ok(area / (grid[grid.len() - 1] - grid[0]) as f64)
}

/// Distinct exit days up to the 95th percentile of exits.
pub fn ibs_grid(obs: &[SurvivalObservation]) -> Result<Vec<u32>> {
    check_obs(obs)?;
    let mut exits: Vec<u32> = obs.iter().map(|o| o.exit).collect();
    exits.sort_unstable();
    let rank = ((0.95 * exits.len() as f64).ceil() as usize).clamp(1, exits.len());
    let t_max = exits[rank - 1];
    exits.dedup();
    exits.retain(|&t| t <= t_max);
    Ok(exits)
}

/// IBS of `predict` on `obs` over [`ibs_grid`].
pub fn ibs_with<F>(obs: &[SurvivalObservation], predict: F) -> Result<f64>
where
    F: Fn(usize, u32) -> f64,
{
    let grid = ibs_grid(obs)?;
    let bs = brier_curve_with(obs, &grid, predict)?;
    integrated_brier_score(&grid, &bs)
}
