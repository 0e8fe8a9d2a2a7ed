//! Seeded synthetic cohorts with known ground truth.
//!
//! Each user draws a group, a behavioural class and a start day. Logins
//! follow geometric gaps (`1 + Geometric(p)` days). From day 1 on, a daily
//! churn check fires with probability `1 - exp(-rate * mult)`; when it fires
//! on day `t` the churn day is `t`, and a login already scheduled for `t`
//! still happens. For a constant multiplier, `P(churn day > t) = exp(-rate t)`.
//!
//! Regime-switch classes multiply the hazard by `factor` while the user's
//! trailing `window`-day action count (days `t - window .. t - 1`) is below
//! `threshold`. An optional decay lowers a user's activity from a random
//! switch day on, which drives the rolling counts down.
//!
//! Every user gets its own ChaCha stream, so cohorts are identical for any
//! worker count.

use std::collections::BTreeMap;

use chrono::{NaiveDate, NaiveTime};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSubject;
use crate::error::{invalid, Error, Result};
use crate::events::{EventKind, EventRecord};
use crate::features::{rolling_name, FeatureSpec};
use crate::forest;
use crate::metric::Metric;
use crate::panel::{add_days, CohortPanel, UserDayMetrics, UserPanel};
use crate::survival::{brier_curve_with, ibs_grid, integrated_brier_score, SurvivalObservation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChurnSpec {
    Exponential { rate: f64 },
    RegimeSwitch { rate: f64, factor: f64, window: u32, threshold: u32 },
    /// Deterministic churn on this day after the first login.
    AtDay { day: u32 },
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensitySpec {
    pub session_mean_s: f64,
    pub clicks_mean: f64,
    pub videos_mean: f64,
    pub video_watch_mean_s: f64,
    pub tests_mean: f64,
    pub action_cards_mean: f64,
    pub drug_list_mean: f64,
    /// Probability that a session is closed by an explicit `session_end`.
    pub explicit_end_prob: f64,
}

impl Default for IntensitySpec {
    fn default() -> Self {
        Self {
            session_mean_s: 900.0,
            clicks_mean: 6.0,
            videos_mean: 1.0,
            video_watch_mean_s: 240.0,
            tests_mean: 0.5,
            action_cards_mean: 1.0,
            drug_list_mean: 0.5,
            explicit_end_prob: 1.0,
        }
    }
}

impl IntensitySpec {
    fn scaled(&self, m: f64) -> IntensitySpec {
        IntensitySpec {
            session_mean_s: self.session_mean_s,
            clicks_mean: self.clicks_mean * m,
            videos_mean: self.videos_mean * m,
            video_watch_mean_s: self.video_watch_mean_s,
            tests_mean: self.tests_mean * m,
            action_cards_mean: self.action_cards_mean * m,
            drug_list_mean: self.drug_list_mean * m,
            explicit_end_prob: self.explicit_end_prob,
        }
    }
}

/// Activity decay from a per-user switch day drawn uniformly in `[day_min, day_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySpec {
    pub day_min: u32,
    pub day_max: u32,
    /// Multiplier on event-count means after the switch.
    pub intensity_factor: f64,
    /// Login-gap parameter after the switch.
    pub gap_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub weight: f64,
    pub gap_p: f64,
    pub churn: ChurnSpec,
    #[serde(default)]
    pub intensity: IntensitySpec,
    #[serde(default)]
    pub decay: Option<DecaySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub users: usize,
    pub start: NaiveDate,
    pub panel_days: u32,
    #[serde(default)]
    pub start_spread_days: u32,
    pub groups: Vec<GroupSpec>,
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub seed: u64,
}

fn weights_ok(w: impl Iterator<Item = f64>) -> bool {
    let w: Vec<f64> = w.collect();
    !w.is_empty() && w.iter().all(|v| *v >= 0.0 && v.is_finite()) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

impl CohortSpec {
    pub fn panel_end(&self) -> NaiveDate {
        add_days(self.start, self.panel_days as i64 - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::EmptyInput("cohort spec has zero users".into()));
        }
        if self.panel_days == 0 || self.start_spread_days >= self.panel_days {
            return Err(invalid("panel_days must be positive and exceed start_spread_days"));
        }
        if !weights_ok(self.groups.iter().map(|g| g.weight)) || !weights_ok(self.classes.iter().map(|c| c.weight)) {
            return Err(invalid("group and class weights must be non-negative and sum to 1"));
        }
        for c in &self.classes {
            let p_ok = |p: f64| p > 0.0 && p <= 1.0;
            if !p_ok(c.gap_p) || c.decay.as_ref().and_then(|d| d.gap_p).is_some_and(|p| !p_ok(p)) {
                return Err(invalid(format!("class {}: gap probabilities must lie in (0, 1]", c.name)));
            }
            let rate_ok = match c.churn {
                ChurnSpec::Exponential { rate } => rate >= 0.0,
                ChurnSpec::RegimeSwitch { rate, factor, .. } => rate >= 0.0 && factor >= 0.0,
                ChurnSpec::AtDay { day } => day >= 1,
                ChurnSpec::Never => true,
            };
            let i = &c.intensity;
            let means = [
                i.session_mean_s,
                i.clicks_mean,
                i.videos_mean,
                i.video_watch_mean_s,
                i.tests_mean,
                i.action_cards_mean,
                i.drug_list_mean,
            ];
            if !rate_ok || means.iter().any(|m| *m < 0.0 || !m.is_finite()) || !(0.0..=1.0).contains(&i.explicit_end_prob) {
                return Err(invalid(format!("class {}: invalid churn or intensity parameters", c.name)));
            }
            if let Some(d) = &c.decay {
                if d.day_min > d.day_max || d.intensity_factor < 0.0 {
                    return Err(invalid(format!("class {}: invalid decay", c.name)));
                }
            }
        }
        Ok(())
    }

    fn base(users: usize, seed: u64, classes: Vec<ClassSpec>) -> Self {
        Self {
            users,
            start: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            panel_days: 365,
            start_spread_days: 180,
            groups: vec![
                GroupSpec { label: "ET".into(), weight: 0.5 },
                GroupSpec { label: "IN".into(), weight: 0.5 },
            ],
            classes,
            seed,
        }
    }

    /// One class, exponential churn, no covariate signal.
    pub fn homogeneous(users: usize, rate: f64, seed: u64) -> Self {
        Self::base(
            users,
            seed,
            vec![ClassSpec {
                name: "all".into(),
                weight: 1.0,
                gap_p: 0.3,
                churn: ChurnSpec::Exponential { rate },
                intensity: IntensitySpec::default(),
                decay: None,
            }],
        )
    }

    /// Two equally likely classes whose churn hazards differ by `hazard_ratio`.
    /// The riskier class also logs in less often and does less per session.
    pub fn two_group(users: usize, hazard_ratio: f64, seed: u64) -> Self {
        let rate = 0.004;
        Self::base(
            users,
            seed,
            vec![
                ClassSpec {
                    name: "engaged".into(),
                    weight: 0.5,
                    gap_p: 0.5,
                    churn: ChurnSpec::Exponential { rate },
                    intensity: IntensitySpec::default(),
                    decay: None,
                },
                ClassSpec {
                    name: "casual".into(),
                    weight: 0.5,
                    gap_p: 0.15,
                    churn: ChurnSpec::Exponential { rate: rate * hazard_ratio },
                    intensity: IntensitySpec::default().scaled(0.3),
                    decay: None,
                },
            ],
        )
    }

    /// Two classes that differ only in tests passed per session (clicks make
    /// up the difference in total actions), with hazards `hazard_ratio` apart.
    /// The progression window sums are the only informative features.
    pub fn planted_signal(users: usize, hazard_ratio: f64, seed: u64) -> Self {
        let rate = 0.004;
        let learner = IntensitySpec { tests_mean: 3.0, clicks_mean: 6.0, ..IntensitySpec::default() };
        let browser = IntensitySpec { tests_mean: 0.0, clicks_mean: 9.0, ..IntensitySpec::default() };
        Self::base(
            users,
            seed,
            vec![
                ClassSpec {
                    name: "learner".into(),
                    weight: 0.5,
                    gap_p: 0.4,
                    churn: ChurnSpec::Exponential { rate },
                    intensity: learner,
                    decay: None,
                },
                ClassSpec {
                    name: "browser".into(),
                    weight: 0.5,
                    gap_p: 0.4,
                    churn: ChurnSpec::Exponential { rate: rate * hazard_ratio },
                    intensity: browser,
                    decay: None,
                },
            ],
        )
    }

    /// Time-varying hazard: activity decays from a random switch day and the
    /// hazard jumps while the weekly action count is low.
    pub fn regime_switch(users: usize, seed: u64) -> Self {
        Self::base(
            users,
            seed,
            vec![ClassSpec {
                name: "switching".into(),
                weight: 1.0,
                gap_p: 0.5,
                churn: ChurnSpec::RegimeSwitch { rate: 0.0005, factor: 200.0, window: 7, threshold: 4 },
                intensity: IntensitySpec::default(),
                decay: Some(DecaySpec { day_min: 20, day_max: 300, intensity_factor: 0.1, gap_p: Some(0.25) }),
            }],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub group: String,
    pub class: usize,
    pub first_login: NaiveDate,
    /// `None` when the user had not churned by the panel end.
    pub churn_day: Option<NaiveDate>,
    pub switch_day: Option<NaiveDate>,
    pub login_days: Vec<NaiveDate>,
    /// Expected panel rows; omitted from compact serializations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub daily: Vec<UserDayMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTruth {
    pub name: String,
    /// Rate of the analytic survival `exp(-rate t)`, when one exists.
    pub churn_rate: Option<f64>,
    /// Analytic mean login gap `1 + (1 - p) / p` before any decay.
    pub mean_gap: f64,
}

impl ClassTruth {
    pub fn survival(&self, t: u32) -> Option<f64> {
        self.churn_rate.map(|r| (-r * t as f64).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub panel_start: NaiveDate,
    pub panel_end: NaiveDate,
    pub classes: Vec<ClassTruth>,
    /// Default engineered features whose distribution depends on the class.
    pub signal_features: Vec<String>,
    pub users: Vec<UserTruth>,
}

impl GroundTruth {
    /// The panel `build_panel` must reproduce from the generated events.
    pub fn expected_panel(&self) -> CohortPanel {
        CohortPanel {
            panel_end: self.panel_end,
            users: self
                .users
                .iter()
                .map(|u| UserPanel {
                    user_id: u.user_id.clone(),
                    group: u.group.clone(),
                    first_login: u.first_login,
                    days: u.daily.clone(),
                })
                .collect(),
        }
    }

    /// Copy without the per-day rows.
    pub fn compact(&self) -> GroundTruth {
        GroundTruth {
            users: self.users.iter().map(|u| UserTruth { daily: Vec::new(), ..u.clone() }).collect(),
            ..self.clone()
        }
    }

    pub fn user(&self, user_id: &str) -> Option<&UserTruth> {
        self.users
            .binary_search_by(|u| u.user_id.as_str().cmp(user_id))
            .ok()
            .map(|i| &self.users[i])
    }
}

fn signal_features(spec: &CohortSpec) -> Vec<String> {
    let fs = FeatureSpec::default();
    let differs = |f: &dyn Fn(&ClassSpec) -> f64| {
        spec.classes.windows(2).any(|w| f(&w[0]) != f(&w[1])) || spec.classes.iter().any(|c| c.decay.is_some())
    };
    let rolling = |m: Metric| fs.windows.iter().map(move |w| rolling_name(m, *w)).collect::<Vec<_>>();
    let mut out = Vec::new();
    if differs(&|c| c.gap_p) {
        out.extend(rolling(Metric::SessionCount));
        out.push(Metric::LoyaltyIndex.id().to_string());
        out.push(Metric::WeeklyLoyaltyIndex.id().to_string());
    }
    if differs(&|c| {
        let i = &c.intensity;
        i.clicks_mean + 2.0 * i.videos_mean + i.tests_mean + i.action_cards_mean + i.drug_list_mean
    }) {
        out.extend(rolling(Metric::ActionCount));
    }
    if differs(&|c| c.gap_p * c.intensity.session_mean_s) {
        out.extend(rolling(Metric::ConnectionTime));
    }
    if differs(&|c| c.intensity.tests_mean) {
        out.extend(rolling(Metric::Progression));
    }
    out.sort();
    out.dedup();
    out
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u32
}

const DAY_S: i64 = 86_400;

fn epoch_of(day: NaiveDate) -> i64 {
    day.and_time(NaiveTime::MIN).and_utc().timestamp()
}

fn timestamp(t: i64) -> chrono::DateTime<chrono::Utc> {
    chrono::DateTime::from_timestamp(t, 0).expect("timestamp in range")
}

struct UserOutput {
    events: Vec<EventRecord>,
    truth: UserTruth,
}

/// Per-day accumulators for the expected panel.
#[derive(Default, Clone)]
struct TruthDay {
    connection: i64,
    actions: u32,
    elearning: u32,
    tests: u32,
    video_views: u32,
    watch: i64,
    logins: u32,
}

fn generate_user(spec: &CohortSpec, index: usize, groups: &WeightedIndex<f64>, classes: &WeightedIndex<f64>) -> UserOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let user_id = format!("u{index:06}");
    let group = spec.groups[groups.sample(&mut rng)].label.clone();
    let class_idx = classes.sample(&mut rng);
    let class = &spec.classes[class_idx];
    let offset = rng.random_range(0..=spec.start_spread_days);
    let first = add_days(spec.start, offset as i64);
    let panel_end = spec.panel_end();
    let last_index = (spec.panel_days - 1 - offset) as usize;
    let switch = class.decay.as_ref().map(|d| rng.random_range(d.day_min..=d.day_max) as usize);

    let mut truth_days = vec![TruthDay::default(); last_index + 1];
    let mut actions_by_login_day = vec![0u32; last_index + 1];
    let mut events = Vec::new();
    let mut login_days = Vec::new();
    let mut churn: Option<usize> = None;
    let mut next_login = 0usize;
    let user_arc: std::sync::Arc<str> = user_id.as_str().into();
    let country: std::sync::Arc<str> = group.as_str().into();
    let push = |events: &mut Vec<EventRecord>, t: i64, kind: EventKind, dur: Option<f64>| {
        events.push(EventRecord {
            user_id: user_arc.clone(),
            timestamp: timestamp(t),
            kind,
            duration_s: dur,
            country: country.clone(),
        });
    };

    for t in 0..=last_index {
        let switched = switch.is_some_and(|s| t >= s);
        if t >= 1 {
            let fires = match class.churn {
                ChurnSpec::Exponential { rate } => rng.random::<f64>() < -(-rate).exp_m1(),
                ChurnSpec::RegimeSwitch { rate, factor, window, threshold } => {
                    let lo = t.saturating_sub(window as usize);
                    let recent: u32 = actions_by_login_day[lo..t].iter().sum();
                    let mult = if recent < threshold { factor } else { 1.0 };
                    rng.random::<f64>() < -(-rate * mult).exp_m1()
                }
                ChurnSpec::AtDay { day } => t == day as usize,
                ChurnSpec::Never => false,
            };
            if fires {
                churn = Some(t);
            }
        }
        if t == next_login {
            let day = add_days(first, t as i64);
            login_days.push(day);
            let intensity = if switched {
                class.intensity.scaled(class.decay.as_ref().map_or(1.0, |d| d.intensity_factor))
            } else {
                class.intensity.clone()
            };
            let day_start = epoch_of(day);
            let login = day_start + rng.random_range(4 * 3600..DAY_S);
            let mut len = (Exp::new(1.0 / intensity.session_mean_s.max(1.0)).unwrap().sample(&mut rng).round() as i64)
                .clamp(1, 4 * 3600 - 1);
            if day == panel_end {
                len = len.min(day_start + DAY_S - 1 - login);
            }
            let end = login + len;
            push(&mut events, login, EventKind::Login, None);
            let explicit = rng.random::<f64>() < intensity.explicit_end_prob;
            let session_end = if explicit {
                push(&mut events, end, EventKind::SessionEnd, Some(len as f64));
                end
            } else {
                let limit = epoch_of(panel_end) + DAY_S;
                (login + 1800).min(limit)
            };
            let action = |events: &mut Vec<EventRecord>, rng: &mut ChaCha8Rng, kind: EventKind| {
                let at = rng.random_range(login..=end);
                push(events, at, kind, None);
                at
            };
            let mut n_actions = 0;
            for _ in 0..poisson(&mut rng, intensity.clicks_mean) {
                action(&mut events, &mut rng, EventKind::Click);
                n_actions += 1;
            }
            for _ in 0..poisson(&mut rng, intensity.videos_mean) {
                let s = action(&mut events, &mut rng, EventKind::VideoStart);
                let watch = rng.random_range(0..=end - s);
                push(&mut events, s + watch, EventKind::VideoStop, Some(watch as f64));
                n_actions += 2;
            }
            for (kind, mean) in [
                (EventKind::TestPassed, intensity.tests_mean),
                (EventKind::ActionCardView, intensity.action_cards_mean),
                (EventKind::DrugListView, intensity.drug_list_mean),
            ] {
                for _ in 0..poisson(&mut rng, mean) {
                    action(&mut events, &mut rng, kind);
                    n_actions += 1;
                }
            }
            actions_by_login_day[t] = n_actions;
            truth_days[t].logins += 1;
            // Connection time split at midnights.
            let mut s = login;
            while s < session_end {
                let boundary = (s.div_euclid(DAY_S) + 1) * DAY_S;
                let stop = session_end.min(boundary);
                let idx = ((s.div_euclid(DAY_S) * DAY_S - day_start) / DAY_S) as usize + t;
                if idx < truth_days.len() {
                    truth_days[idx].connection += stop - s;
                }
                s = stop;
            }
            let g = rng.random_range(0.0..1.0);
            let p = match &class.decay {
                Some(d) if switched => d.gap_p.unwrap_or(class.gap_p),
                _ => class.gap_p,
            };
            // Inverse-CDF draw keeps the stream position independent of p.
            next_login = t + geometric_from_uniform(g, p);
        }
        if churn.is_some() {
            break;
        }
    }

    // Same-second repeats would be collapsed on ingest.
    events.sort();
    events.dedup();
    let first_epoch = epoch_of(first);
    for e in &events {
        let idx = ((e.timestamp.timestamp() - first_epoch).div_euclid(DAY_S)) as usize;
        let d = &mut truth_days[idx];
        if e.kind.is_action() {
            d.actions += 1;
            d.elearning += e.kind.is_elearning() as u32;
        }
        match e.kind {
            EventKind::TestPassed => d.tests += 1,
            EventKind::VideoStart => d.video_views += 1,
            EventKind::VideoStop => d.watch += e.duration_s.unwrap_or(0.0) as i64,
            _ => {}
        }
    }

    let mut daily = Vec::with_capacity(truth_days.len());
    let mut logins = 0u32;
    let mut last_login = 0usize;
    for (i, d) in truth_days.iter().enumerate() {
        if d.logins > 0 {
            logins += 1;
            last_login = i;
        }
        daily.push(UserDayMetrics {
            day: add_days(first, i as i64),
            lifetime_days: i as u32,
            connection_time_s: d.connection as f64,
            action_count: d.actions,
            elearning_action_count: d.elearning,
            progression: d.tests,
            video_view_count: d.video_views,
            video_watch_time_s: d.watch as f64,
            loyalty_index: logins as f64 / (i + 1) as f64,
            days_since_last_login: (i - last_login) as u32,
            logged_in: d.logins > 0,
            session_count: d.logins,
        });
    }

    UserOutput {
        events,
        truth: UserTruth {
            user_id,
            group,
            class: class_idx,
            first_login: first,
            churn_day: churn.map(|t| add_days(first, t as i64)),
            switch_day: switch.filter(|s| *s <= last_index).map(|s| add_days(first, s as i64)),
            login_days,
            daily,
        },
    }
}

/// `1 + Geometric(p)` from a uniform draw by inversion.
fn geometric_from_uniform(u: f64, p: f64) -> usize {
    if p >= 1.0 {
        return 1;
    }
    // Number of failures before the first success: floor(ln(1-u) / ln(1-p)).
    1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize
}

/// Generates the event log (sorted by user, then time) and its ground truth.
pub fn generate(spec: &CohortSpec) -> Result<(Vec<EventRecord>, GroundTruth)> {
    spec.validate()?;
    let groups = WeightedIndex::new(spec.groups.iter().map(|g| g.weight)).map_err(|e| invalid(e.to_string()))?;
    let classes = WeightedIndex::new(spec.classes.iter().map(|c| c.weight)).map_err(|e| invalid(e.to_string()))?;
    let outputs: Vec<UserOutput> = (0..spec.users)
        .into_par_iter()
        .map(|i| generate_user(spec, i, &groups, &classes))
        .collect();
    let mut events = Vec::new();
    let mut users = Vec::with_capacity(outputs.len());
    for o in outputs {
        events.extend(o.events);
        users.push(o.truth);
    }
    if events.is_empty() {
        return Err(Error::EmptyInput("spec produced no events".into()));
    }
    let classes = spec
        .classes
        .iter()
        .map(|c| ClassTruth {
            name: c.name.clone(),
            churn_rate: match (&c.churn, &c.decay) {
                (ChurnSpec::Exponential { rate }, _) => Some(*rate),
                (ChurnSpec::Never, _) => Some(0.0),
                (ChurnSpec::RegimeSwitch { rate, factor, .. }, _) if *factor == 1.0 => Some(*rate),
                _ => None,
            },
            mean_gap: 1.0 + (1.0 - c.gap_p) / c.gap_p,
        })
        .collect();
    Ok((
        events,
        GroundTruth {
            panel_start: spec.start,
            panel_end: spec.panel_end(),
            classes,
            signal_features: signal_features(spec),
            users,
        },
    ))
}

/// IBS of the training-set Kaplan–Meier curve on held-out observations.
pub fn null_model_ibs(train: &[SurvivalObservation], test: &[SurvivalObservation]) -> Result<f64> {
    forest::null_ibs(train, test)
}

/// IBS of the per-class analytic survival curves on labeled subjects.
pub fn oracle_ibs(truth: &GroundTruth, subjects: &[LabeledSubject]) -> Result<f64> {
    let index: BTreeMap<&str, usize> = truth.users.iter().map(|u| (u.user_id.as_str(), u.class)).collect();
    let classes: Vec<&ClassTruth> = subjects
        .iter()
        .map(|s| {
            let c = index
                .get(s.user_id.as_str())
                .ok_or_else(|| Error::UnknownUser(s.user_id.clone()))?;
            let class = &truth.classes[*c];
            class
                .churn_rate
                .map(|_| class)
                .ok_or_else(|| invalid(format!("class {} has no analytic survival", class.name)))
        })
        .collect::<Result<_>>()?;
    let obs: Vec<SurvivalObservation> = subjects.iter().map(|s| s.obs).collect();
    let grid = ibs_grid(&obs)?;
    let bs = brier_curve_with(&obs, &grid, |i, t| classes[i].survival(t).unwrap())?;
    integrated_brier_score(&grid, &bs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_inversion() {
        assert_eq!(geometric_from_uniform(0.7, 1.0), 1);
        assert_eq!(geometric_from_uniform(0.0, 0.5), 1);
        assert_eq!(geometric_from_uniform(0.5, 0.5), 2);
        assert_eq!(geometric_from_uniform(0.74, 0.5), 2);
        assert_eq!(geometric_from_uniform(0.76, 0.5), 3);
    }

    #[test]
    fn invalid_specs() {
        let mut s = CohortSpec::homogeneous(10, 0.01, 1);
        s.users = 0;
        assert!(matches!(generate(&s), Err(Error::EmptyInput(_))));
        let mut s = CohortSpec::homogeneous(10, 0.01, 1);
        s.groups[0].weight = 0.9;
        assert!(s.validate().is_err());
        let mut s = CohortSpec::homogeneous(10, 0.01, 1);
        s.classes[0].gap_p = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn daily_logins_until_fixed_churn() {
        let mut s = CohortSpec::homogeneous(1, 0.0, 3);
        s.start_spread_days = 0;
        s.panel_days = 40;
        s.classes[0].gap_p = 1.0;
        s.classes[0].churn = ChurnSpec::AtDay { day: 9 };
        let (_, truth) = generate(&s).unwrap();
        let u = &truth.users[0];
        let expected: Vec<NaiveDate> = (0..10).map(|i| add_days(s.start, i)).collect();
        assert_eq!(u.login_days, expected);
        assert_eq!(u.churn_day, Some(add_days(s.start, 9)));
    }
}
