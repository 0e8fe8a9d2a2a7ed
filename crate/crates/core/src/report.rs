//! Per-user report cards and churn-definition comparisons.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecdf::{churn_risk_flag, gap_ecdf, indicator, Direction, IndicatorConfig, Mode};
use crate::error::{invalid, Error, Result};
use crate::forest::ForestModel;
use crate::metric::Metric;
use crate::panel::{CohortPanel, UserPanel};
use crate::rcmm::{
    default_k_grid, default_missed_metrics, find_churn_definition, rcmm_curve, GroupBy, ReturningBase,
};
use crate::score::{score_series, ScoreSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// ECDF quantile for indicator flags and equivalent churn definitions.
    pub quantile: f64,
    pub returning_max: f64,
    pub missed_max: f64,
    pub missed_metrics: Vec<Metric>,
    pub base: ReturningBase,
    pub indicator: IndicatorConfig,
    pub score: ScoreSpec,
    /// Scores strictly below this set the low-score flag.
    pub low_score: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            quantile: 0.95,
            returning_max: 0.30,
            missed_max: 0.10,
            missed_metrics: default_missed_metrics(),
            base: ReturningBase::default(),
            indicator: IndicatorConfig::default(),
            score: ScoreSpec::default(),
            low_score: 0.1,
        }
    }
}

impl ReportConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(invalid(format!("quantile must lie in (0, 1), got {}", self.quantile)));
        }
        if !(0.0..=1.0).contains(&self.low_score) {
            return Err(invalid("low-score threshold must lie in [0, 1]"));
        }
        self.score.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChurnFlags {
    /// Days since last login exceed the group's RCMM horizon.
    pub rcmm: Option<bool>,
    pub endo: Option<bool>,
    pub exo: Option<bool>,
    pub snp: Option<bool>,
    pub low_score: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCard {
    pub user_id: String,
    pub as_of: NaiveDate,
    pub group: String,
    pub days_since_last_login: u32,
    pub ecdf_endo: Option<f64>,
    pub ecdf_exo: Option<f64>,
    pub ecdf_snp: Option<f64>,
    pub score: f64,
    /// Churn horizon implied by the user's own gap history.
    pub equivalent_churn_days: Option<i64>,
    pub survival_probability: Option<f64>,
    pub rcmm_k: Option<u32>,
    pub flags: ChurnFlags,
}

/// RCMM horizon per group; groups without a definition are absent.
pub fn rcmm_horizons(panel: &CohortPanel, cfg: &ReportConfig) -> Result<BTreeMap<String, u32>> {
    let curves = rcmm_curve(panel, &default_k_grid(), &cfg.missed_metrics, GroupBy::Country, cfg.base)?;
    let mut out = BTreeMap::new();
    for c in &curves {
        match find_churn_definition(c, cfg.returning_max, cfg.missed_max) {
            Ok(d) => {
                out.insert(c.group.clone(), d.k_days);
            }
            Err(Error::NoDefinition { .. }) => log::warn!("no RCMM definition for group {}", c.group),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn optional<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::InsufficientHistory { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn card(
    panel: &CohortPanel,
    user: &UserPanel,
    as_of: NaiveDate,
    model: Option<&ForestModel>,
    horizons: &BTreeMap<String, u32>,
    cfg: &ReportConfig,
) -> Result<ReportCard> {
    let idx = user
        .day_index(as_of)
        .ok_or_else(|| invalid(format!("user {} has no panel row on {as_of}", user.user_id)))?;
    let dsll = user.days[idx].days_since_last_login;
    let ind = |mode| {
        optional(indicator(panel, &user.user_id, as_of, Metric::DaysSinceLastLogin, mode, &cfg.indicator).map(|i| i.value))
    };
    let (endo, exo, snp) = (ind(Mode::Endo)?, ind(Mode::Exo)?, ind(Mode::Snp)?);
    let score = score_series(panel, &cfg.score, &user.user_id, Some((as_of, as_of)))?
        .pop()
        .ok_or_else(|| invalid(format!("no score for user {} on {as_of}", user.user_id)))?
        .value;
    let equivalent = optional(gap_ecdf(panel, user, as_of, Mode::Endo, &cfg.indicator))?
        .map(|e| e.equivalent_churn_definition(cfg.quantile))
        .transpose()?;
    let survival = model.map(|m| m.survival_at(user, as_of)).transpose()?;
    let rcmm_k = horizons.get(&user.group).copied();
    let flag = |v: Option<f64>| v.map(|v| churn_risk_flag(v, Direction::HighIsBad, cfg.quantile));
    Ok(ReportCard {
        user_id: user.user_id.clone(),
        as_of,
        group: user.group.clone(),
        days_since_last_login: dsll,
        ecdf_endo: endo,
        ecdf_exo: exo,
        ecdf_snp: snp,
        score,
        equivalent_churn_days: equivalent,
        survival_probability: survival,
        rcmm_k,
        flags: ChurnFlags {
            rcmm: rcmm_k.map(|k| dsll > k),
            endo: flag(endo),
            exo: flag(exo),
            snp: flag(snp),
            low_score: score < cfg.low_score,
        },
    })
}

/// One card per requested user, in the order given.
pub fn report(
    panel: &CohortPanel,
    model: Option<&ForestModel>,
    users: &[String],
    as_of: NaiveDate,
    cfg: &ReportConfig,
) -> Result<Vec<ReportCard>> {
    cfg.validate()?;
    if users.is_empty() {
        return Err(Error::EmptyInput("no users requested".into()));
    }
    let resolved: Vec<&UserPanel> = users.iter().map(|u| panel.try_user(u)).collect::<Result<_>>()?;
    let horizons = rcmm_horizons(panel, cfg)?;
    resolved
        .par_iter()
        .map(|u| card(panel, u, as_of, model, &horizons, cfg))
        .collect()
}

pub const CARD_HEADER: [&str; 17] = [
    "user_id",
    "as_of",
    "group",
    "days_since_last_login",
    "ecdf_endo",
    "ecdf_exo",
    "ecdf_snp",
    "score",
    "equivalent_churn_days",
    "survival_probability",
    "rcmm_k",
    "flag_rcmm",
    "flag_endo",
    "flag_exo",
    "flag_snp",
    "flag_low_score",
    "n_flags",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_cards_csv<W: std::io::Write>(cards: &[ReportCard], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CARD_HEADER)?;
    for c in cards {
        let f = &c.flags;
        let n = [f.rcmm, f.endo, f.exo, f.snp, Some(f.low_score)]
            .iter()
            .filter(|x| **x == Some(true))
            .count();
        w.write_record([
            c.user_id.clone(),
            c.as_of.to_string(),
            c.group.clone(),
            c.days_since_last_login.to_string(),
            opt(c.ecdf_endo),
            opt(c.ecdf_exo),
            opt(c.ecdf_snp),
            c.score.to_string(),
            opt(c.equivalent_churn_days),
            opt(c.survival_probability),
            opt(c.rcmm_k),
            opt(f.rcmm),
            opt(f.endo),
            opt(f.exo),
            opt(f.snp),
            f.low_score.to_string(),
            n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupHorizons {
    pub group: String,
    pub n_users: usize,
    pub rcmm: Option<u32>,
    pub exo: Option<i64>,
    pub snp: Option<i64>,
    /// Mean of the users' own equivalent definitions.
    pub endo_average: Option<f64>,
}

/// RCMM versus one ECDF mode. Rows are RCMM, columns the ECDF definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub both_churned: usize,
    pub rcmm_only: usize,
    pub ecdf_only: usize,
    pub neither: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.both_churned + self.rcmm_only + self.ecdf_only + self.neither
    }

    fn add(&mut self, rcmm: bool, ecdf: bool) {
        match (rcmm, ecdf) {
            (true, true) => self.both_churned += 1,
            (true, false) => self.rcmm_only += 1,
            (false, true) => self.ecdf_only += 1,
            (false, false) => self.neither += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserClassification {
    pub user_id: String,
    pub group: String,
    pub days_since_last_login: u32,
    pub rcmm: Option<bool>,
    pub exo: Option<bool>,
    pub snp: Option<bool>,
    pub endo: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub as_of: NaiveDate,
    pub quantile: f64,
    pub horizons: Vec<GroupHorizons>,
    /// Keyed by ECDF mode.
    pub confusion: BTreeMap<Mode, Confusion>,
    pub users: Vec<UserClassification>,
}

/// A user is churned under horizon `k` when days since last login on
/// `as_of` exceed `k`. Users without a row on `as_of` are skipped; users
/// lacking a definition in a comparison are left out of that matrix.
pub fn compare_churn_definitions(panel: &CohortPanel, as_of: NaiveDate, cfg: &ReportConfig) -> Result<Comparison> {
    cfg.validate()?;
    let rcmm = rcmm_horizons(panel, cfg)?;
    let groups = panel.groups();
    let group_k: BTreeMap<String, (Option<i64>, Option<i64>)> = groups
        .iter()
        .map(|g| {
            let rep = panel.group_users(g).next().expect("group has users");
            let k = |mode| -> Result<Option<i64>> {
                optional(gap_ecdf(panel, rep, as_of, mode, &cfg.indicator))?
                    .map(|e| e.equivalent_churn_definition(cfg.quantile))
                    .transpose()
            };
            Ok((g.clone(), (k(Mode::Exo)?, k(Mode::Snp)?)))
        })
        .collect::<Result<_>>()?;
    let users: Vec<(UserClassification, Option<i64>)> = panel
        .users
        .par_iter()
        .filter_map(|u| u.day_index(as_of).map(|i| (u, u.days[i].days_since_last_login)))
        .map(|(u, dsll)| {
            let endo_k = optional(gap_ecdf(panel, u, as_of, Mode::Endo, &cfg.indicator))?
                .map(|e| e.equivalent_churn_definition(cfg.quantile))
                .transpose()?;
            let (exo_k, snp_k) = group_k[&u.group];
            let churned = |k: Option<i64>| k.map(|k| dsll as i64 > k);
            Ok((
                UserClassification {
                    user_id: u.user_id.clone(),
                    group: u.group.clone(),
                    days_since_last_login: dsll,
                    rcmm: churned(rcmm.get(&u.group).map(|&k| k as i64)),
                    exo: churned(exo_k),
                    snp: churned(snp_k),
                    endo: churned(endo_k),
                },
                endo_k,
            ))
        })
        .collect::<Result<_>>()?;
    if users.is_empty() {
        return Err(Error::EmptyInput(format!("no users have a panel row on {as_of}")));
    }

    let mut confusion: BTreeMap<Mode, Confusion> = Mode::ALL.iter().map(|m| (*m, Confusion::default())).collect();
    for (u, _) in &users {
        let Some(r) = u.rcmm else { continue };
        for (mode, flag) in [(Mode::Endo, u.endo), (Mode::Exo, u.exo), (Mode::Snp, u.snp)] {
            if let Some(e) = flag {
                confusion.get_mut(&mode).unwrap().add(r, e);
            }
        }
    }
    let horizons = groups
        .iter()
        .map(|g| {
            let ks: Vec<i64> = users.iter().filter(|(u, _)| u.group == *g).filter_map(|(_, k)| *k).collect();
            GroupHorizons {
                group: g.clone(),
                n_users: users.iter().filter(|(u, _)| u.group == *g).count(),
                rcmm: rcmm.get(g).copied(),
                exo: group_k[g].0,
                snp: group_k[g].1,
                endo_average: (!ks.is_empty()).then(|| ks.iter().sum::<i64>() as f64 / ks.len() as f64),
            }
        })
        .collect();
    Ok(Comparison {
        as_of,
        quantile: cfg.quantile,
        horizons,
        confusion,
        users: users.into_iter().map(|(u, _)| u).collect(),
    })
}

/// Writes `group,n_users,rcmm,exo,snp,endo_average`.
pub fn write_horizons_csv<W: std::io::Write>(cmp: &Comparison, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["group", "n_users", "rcmm", "exo", "snp", "endo_average"])?;
    for h in &cmp.horizons {
        w.write_record([
            h.group.clone(),
            h.n_users.to_string(),
            opt(h.rcmm),
            opt(h.exo),
            opt(h.snp),
            opt(h.endo_average),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `mode,both_churned,rcmm_only,ecdf_only,neither`.
pub fn write_confusion_csv<W: std::io::Write>(cmp: &Comparison, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["mode", "both_churned", "rcmm_only", "ecdf_only", "neither"])?;
    for (mode, c) in &cmp.confusion {
        w.write_record([
            mode.as_str().to_string(),
            c.both_churned.to_string(),
            c.rcmm_only.to_string(),
            c.ecdf_only.to_string(),
            c.neither.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
