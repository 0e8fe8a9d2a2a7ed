use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use engagement::ecdf::{build_ecdf, churn_risk_flag, indicators_on_day, Direction, IndicatorConfig, Mode};
use engagement::events::{EventKind, EventRecord};
use engagement::metric::Metric;
use engagement::panel::{build_panel, CohortPanel, PanelConfig, UserPanel};
use engagement::score::{harmonic_score, minmax_scale, score_all, score_series, ScoreSpec};
use engagement::synth::{generate, CohortSpec};

fn synthetic_panel(users: usize, seed: u64) -> CohortPanel {
    let mut spec = CohortSpec::two_group(users, 4.0, seed);
    spec.panel_days = 90;
    spec.start_spread_days = 40;
    let (events, _) = generate(&spec).unwrap();
    build_panel(&events, spec.panel_end(), &PanelConfig::default()).unwrap().panel
}

fn by_date(u: &UserPanel, metric: Metric) -> BTreeMap<NaiveDate, f64> {
    u.days.iter().map(|r| r.day).zip(u.series(metric)).collect()
}

#[test]
fn ecdf_examples() {
    let e = build_ecdf(&(1..=10).map(f64::from).collect::<Vec<_>>(), None).unwrap();
    assert_eq!(e.evaluate(5.0), 0.5);
    assert_eq!(e.evaluate(0.5), 0.0);
    assert_eq!(e.evaluate(10.0), 1.0);
    assert_eq!(e.equivalent_churn_definition(0.9).unwrap(), 9);

    let single = build_ecdf(&[3.0], None).unwrap();
    assert_eq!((single.evaluate(2.0), single.evaluate(3.0), single.evaluate(4.0)), (0.0, 1.0, 1.0));

    let tied = build_ecdf(&[2.0, 2.0, 2.0], None).unwrap();
    assert_eq!(tied.evaluate(2.0), 1.0);
    assert_eq!(tied.distribution(), vec![(2.0, 1.0)]);

    let cut = build_ecdf(&[1.0, 5.0, 300.0], Some(200.0)).unwrap();
    assert_eq!(cut.len(), 2);
    assert!(build_ecdf(&[300.0], Some(200.0)).is_err());
    assert!(build_ecdf(&[], None).is_err());
}

#[test]
fn ecdf_counts_on_random_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<f64> = (0..10_000).map(|_| rng.random_range(0..500) as f64).collect();
    let e = build_ecdf(&samples, None).unwrap();
    for _ in 0..200 {
        let x = rng.random_range(-10.0..510.0);
        let count = samples.iter().filter(|s| **s <= x).count();
        assert_eq!(e.evaluate(x), count as f64 / samples.len() as f64);
    }
}

#[test]
fn equivalent_definition_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let samples: Vec<f64> = (0..n).map(|_| rng.random_range(1..90) as f64).collect();
        let e = build_ecdf(&samples, None).unwrap();
        let q = rng.random_range(0.01..0.99);
        let scan = (0..=100).find(|&z| e.evaluate(z as f64) >= q).unwrap();
        assert_eq!(e.equivalent_churn_definition(q).unwrap(), scan);
    }
    let e = build_ecdf(&[1.0], None).unwrap();
    assert!(e.equivalent_churn_definition(1.0).is_err());
    assert!(e.equivalent_churn_definition(0.0).is_err());
}

#[test]
fn risk_flags() {
    assert!(churn_risk_flag(0.95, Direction::HighIsBad, 0.9));
    assert!(!churn_risk_flag(0.9, Direction::HighIsBad, 0.9));
    assert!(churn_risk_flag(0.05, Direction::LowIsBad, 0.9));
    assert!(!churn_risk_flag(0.5, Direction::LowIsBad, 0.9));
    assert_eq!(Direction::for_metric(Metric::DaysSinceLastLogin), Direction::HighIsBad);
    assert_eq!(Direction::for_metric(Metric::Progression), Direction::LowIsBad);
}

#[test]
fn indicators_match_date_oracle() {
    let panel = synthetic_panel(60, 3);
    let cfg = IndicatorConfig::default();
    let series: Vec<BTreeMap<NaiveDate, f64>> = panel.users.iter().map(|u| by_date(u, Metric::Progression)).collect();
    let start = panel.users.iter().map(|u| u.first_login).min().unwrap();
    for offset in [0, 5, 30, 60, 89] {
        let day = start + Duration::days(offset);
        for mode in Mode::ALL {
            for (id, got) in indicators_on_day(&panel, day, Metric::Progression, mode, &cfg) {
                let (i, u) = panel.users.iter().enumerate().find(|(_, u)| u.user_id == id).unwrap();
                let z = series[i][&day];
                let refs: Vec<f64> = match mode {
                    Mode::Endo => series[i].range(..day).map(|(_, v)| *v).collect(),
                    Mode::Exo => panel
                        .users
                        .iter()
                        .zip(&series)
                        .filter(|(p, _)| p.group == u.group)
                        .flat_map(|(_, s)| s.range(..day).map(|(_, v)| *v))
                        .collect(),
                    Mode::Snp => panel
                        .users
                        .iter()
                        .zip(&series)
                        .filter(|(p, _)| p.group == u.group)
                        .filter_map(|(_, s)| s.get(&day).copied())
                        .collect(),
                };
                let want = (!refs.is_empty())
                    .then(|| refs.iter().filter(|r| **r <= z).count() as f64 / refs.len() as f64);
                assert_eq!(got.ok().map(|g| g.value), want, "{id} {day} {mode}");
            }
        }
    }
}

#[test]
fn minmax_examples() {
    let reference = [0.0, 10.0];
    assert_eq!(minmax_scale(5.0, &reference).unwrap(), 0.5);
    assert_eq!(minmax_scale(12.0, &reference).unwrap(), 1.0);
    assert_eq!(minmax_scale(-3.0, &reference).unwrap(), 0.0);
    assert_eq!(minmax_scale(4.0, &[4.0]).unwrap(), 1.0);
    assert_eq!(minmax_scale(0.0, &[0.0]).unwrap(), 0.0);
    assert!(minmax_scale(1.0, &[]).is_err());
}

#[test]
fn harmonic_examples() {
    assert!((harmonic_score(&[0.5, 1.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(harmonic_score(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
    assert_eq!(harmonic_score(&[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(harmonic_score(&[0.25]).unwrap(), 0.25);
    assert!(harmonic_score(&[]).is_err());
    assert!(harmonic_score(&[1.5]).is_err());
}

#[test]
fn inactive_day_scores_zero() {
    let t = |d: i64, s: i64| {
        Utc.from_utc_datetime(&NaiveDate::from_ymd_opt(2021, 1, 1).unwrap().and_hms_opt(9, 0, 0).unwrap())
            + Duration::days(d)
            + Duration::seconds(s)
    };
    let events = vec![
        EventRecord::new("a", t(0, 0), EventKind::Login, None, "ET"),
        EventRecord::new("a", t(0, 60), EventKind::TestPassed, None, "ET"),
        EventRecord::new("a", t(0, 600), EventKind::SessionEnd, Some(600.0), "ET"),
    ];
    let panel = build_panel(&events, NaiveDate::from_ymd_opt(2021, 1, 2).unwrap(), &PanelConfig::default())
        .unwrap()
        .panel;
    let spec = ScoreSpec { components: vec![Metric::Progression, Metric::ConnectionTime], mode: Mode::Endo };
    let scores = score_series(&panel, &spec, "a", None).unwrap();
    assert_eq!(scores.iter().map(|s| s.value).collect::<Vec<_>>(), vec![1.0, 0.0]);
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| Some(acc.map_or((v, v), |(lo, hi): (f64, f64)| (lo.min(v), hi.max(v)))))
}

fn oracle_scale(v: f64, r: Option<(f64, f64)>) -> f64 {
    match r {
        Some((lo, hi)) if hi > lo => ((v - lo) / (hi - lo)).clamp(0.0, 1.0),
        Some((_, hi)) => (v >= hi && v > 0.0) as u8 as f64,
        None => (v > 0.0) as u8 as f64,
    }
}

#[test]
fn scores_match_day_by_day_oracle() {
    let panel = synthetic_panel(40, 4);
    for mode in Mode::ALL {
        let spec = ScoreSpec { mode, ..ScoreSpec::default() };
        let scores = score_all(&panel, &spec, None).unwrap();
        assert_eq!(scores.len(), panel.users.iter().map(|u| u.days.len()).sum::<usize>());
        let tables: Vec<Vec<BTreeMap<NaiveDate, f64>>> = spec
            .components
            .iter()
            .map(|m| panel.users.iter().map(|u| by_date(u, *m)).collect())
            .collect();
        for s in &scores {
            let (i, u) = panel.users.iter().enumerate().find(|(_, u)| u.user_id == s.user_id).unwrap();
            let peers: Vec<usize> = (0..panel.users.len()).filter(|&j| panel.users[j].group == u.group).collect();
            let scaled: Vec<f64> = tables
                .iter()
                .map(|t| {
                    let v = t[i][&s.day];
                    let r = match mode {
                        Mode::Endo => range(t[i].range(..s.day).map(|(_, v)| *v)),
                        Mode::Exo => range(peers.iter().flat_map(|&j| t[j].range(..s.day).map(|(_, v)| *v))),
                        Mode::Snp => range(peers.iter().filter_map(|&j| t[j].get(&s.day).copied())),
                    };
                    oracle_scale(v, r)
                })
                .collect();
            assert_eq!(s.components, scaled, "{} {} {mode}", s.user_id, s.day);
            let want = if scaled.contains(&0.0) {
                0.0
            } else {
                scaled.len() as f64 / scaled.iter().map(|z| 1.0 / z).sum::<f64>()
            };
            assert!((s.value - want).abs() < 1e-12, "{} {} {mode}", s.user_id, s.day);
        }
    }
}

proptest! {
    #[test]
    fn harmonic_score_is_bounded(v in prop::collection::vec(0.0f64..=1.0, 1..12)) {
        let h = harmonic_score(&v).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(h >= lo && h <= hi);
    }

    #[test]
    fn minmax_lands_in_unit_interval(v in -100.0f64..100.0, r in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let s = minmax_scale(v, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn ecdf_is_monotone(samples in prop::collection::vec(0.0f64..100.0, 1..50), a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let e = build_ecdf(&samples, None).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(e.evaluate(lo) <= e.evaluate(hi));
    }
}
