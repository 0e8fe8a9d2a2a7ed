use chrono::{Duration, NaiveDate, TimeZone, Utc};
use proptest::prelude::*;

use engagement::dataset::{label_churn, pseudo_observations, segments, static_rows, Interval};
use engagement::events::{EventKind, EventRecord};
use engagement::features::{user_features, FeatureSpec};
use engagement::panel::{build_panel, CohortPanel, PanelConfig};
use engagement::synth::{generate, CohortSpec};

fn day(d: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + Duration::days(d - 1)
}

fn panel(users: &[(&str, &[i64])], end: i64) -> CohortPanel {
    let mut events = Vec::new();
    for (id, days) in users {
        for &d in *days {
            let t = Utc.from_utc_datetime(&day(d).and_hms_opt(8, 0, 0).unwrap());
            events.push(EventRecord::new(id, t, EventKind::Login, None, "ET"));
        }
    }
    build_panel(&events, day(end), &PanelConfig::default()).unwrap().panel
}

#[test]
fn churned_lifetime() {
    let l = label_churn(&panel(&[("a", &[1, 100])], 200), 30).unwrap();
    assert_eq!(l.subjects.len(), 1);
    assert_eq!((l.subjects[0].obs.exit, l.subjects[0].obs.event), (99, true));
}

#[test]
fn recent_login_is_censored() {
    let l = label_churn(&panel(&[("a", &[1, 100])], 110), 30).unwrap();
    assert_eq!((l.subjects[0].obs.exit, l.subjects[0].obs.event), (99, false));
}

#[test]
fn terminal_gap_equal_to_k_is_censored() {
    let l = label_churn(&panel(&[("a", &[1, 10])], 40), 30).unwrap();
    assert!(!l.subjects[0].obs.event);
    let l = label_churn(&panel(&[("a", &[1, 10])], 41), 30).unwrap();
    assert!(l.subjects[0].obs.event);
}

#[test]
fn single_login_is_dropped_with_warning() {
    let l = label_churn(&panel(&[("a", &[5]), ("b", &[1, 3])], 60), 30).unwrap();
    assert_eq!(l.subjects.len(), 1);
    assert_eq!(l.subjects[0].user_id, "b");
    assert_eq!(l.warnings.len(), 1);
    assert!(l.warnings[0].contains('a'));
}

#[test]
fn zero_horizon_is_rejected() {
    assert!(label_churn(&panel(&[("a", &[1, 3])], 5), 0).is_err());
}

fn brute_segments(duration: u32, len: u32) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=duration {
        if t % len == 0 || t == duration {
            out.push((start, t));
            start = t;
        }
    }
    out
}

proptest! {
    #[test]
    fn segments_match_brute_force(duration in 1u32..400, len in 1u32..40) {
        prop_assert_eq!(segments(duration, len), brute_segments(duration, len));
    }
}

#[test]
fn pseudo_rows_tile_each_lifetime() {
    let spec = CohortSpec::two_group(150, 4.0, 5);
    let (events, _) = generate(&spec).unwrap();
    let p = build_panel(&events, spec.panel_end(), &PanelConfig::default()).unwrap().panel;
    let labeled = label_churn(&p, 30).unwrap();
    let fs = FeatureSpec::default();
    for interval in [Interval::Day, Interval::Week, Interval::Month] {
        let table = pseudo_observations(&p, &labeled, &fs, interval).unwrap();
        table.validate().unwrap();
        assert_eq!(table.names, fs.names());
        for (i, s) in labeled.subjects.iter().enumerate() {
            let rows: Vec<_> = table.rows.iter().filter(|r| r.subject as usize == i).collect();
            let spans: Vec<(u32, u32)> = rows.iter().map(|r| (r.entry, r.exit)).collect();
            assert_eq!(spans, brute_segments(s.obs.exit, interval.days()));
            let events: Vec<bool> = rows.iter().map(|r| r.event).collect();
            let mut expected = vec![false; rows.len()];
            *expected.last_mut().unwrap() = s.obs.event;
            assert_eq!(events, expected);
            let m = user_features(&p.users[s.user_index], &fs);
            for r in rows {
                assert_eq!(r.features, m.row(r.entry as usize));
            }
        }
    }
}

#[test]
fn static_rows_use_the_last_login_day() {
    let spec = CohortSpec::two_group(100, 4.0, 6);
    let (events, _) = generate(&spec).unwrap();
    let p = build_panel(&events, spec.panel_end(), &PanelConfig::default()).unwrap().panel;
    let labeled = label_churn(&p, 30).unwrap();
    let fs = FeatureSpec::default();
    let table = static_rows(&p, &labeled, &fs).unwrap();
    let snapshot = fs.static_snapshot();
    assert_eq!(table.names, snapshot.names());
    assert!(table.names.len() < fs.names().len());
    for (r, s) in table.rows.iter().zip(&labeled.subjects) {
        assert_eq!((r.entry, r.exit, r.event), (0, s.obs.exit, s.obs.event));
        let m = user_features(&p.users[s.user_index], &snapshot);
        assert_eq!(r.features, m.row(s.obs.exit as usize));
    }
}
