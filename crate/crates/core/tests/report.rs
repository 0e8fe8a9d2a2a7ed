use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, TimeZone, Utc};

use engagement::ecdf::{gap_ecdf, indicator, Mode};
use engagement::events::{EventKind, EventRecord};
use engagement::forest::{fit_panel, Algorithm, Hyperparams, ModelSpec};
use engagement::metric::Metric;
use engagement::panel::{build_panel, CohortPanel, PanelConfig, UserPanel};
use engagement::rcmm::{default_k_grid, find_churn_definition, rcmm_curve, GroupBy};
use engagement::report::{
    compare_churn_definitions, report, write_cards_csv, write_confusion_csv, write_horizons_csv, Confusion,
    ReportConfig, CARD_HEADER,
};
use engagement::score::score_series;
use engagement::synth::{generate, CohortSpec};

fn panel_of(spec: &CohortSpec) -> CohortPanel {
    let (events, _) = generate(spec).unwrap();
    build_panel(&events, spec.panel_end(), &PanelConfig::default()).unwrap().panel
}

fn cohort() -> (CohortPanel, NaiveDate) {
    let spec = CohortSpec::two_group(300, 4.0, 12);
    let as_of = spec.panel_end() - Duration::days(20);
    (panel_of(&spec), as_of)
}

#[test]
fn cards_repeat_the_module_results() {
    let (panel, as_of) = cohort();
    let cfg = ReportConfig::default();
    let spec = ModelSpec { hyper: Hyperparams { ntree: 10, ..Hyperparams::default() }, ..ModelSpec::new(Algorithm::LtrcCif) };
    let model = fit_panel(&panel, &spec, 3).unwrap();
    let users: Vec<String> = panel.users.iter().filter(|u| u.day_index(as_of).is_some()).take(40).map(|u| u.user_id.clone()).collect();
    let cards = report(&panel, Some(&model), &users, as_of, &cfg).unwrap();
    assert_eq!(cards.iter().map(|c| c.user_id.clone()).collect::<Vec<_>>(), users);

    let curves = rcmm_curve(&panel, &default_k_grid(), &cfg.missed_metrics, GroupBy::Country, cfg.base).unwrap();
    let horizons: BTreeMap<String, u32> = curves
        .iter()
        .filter_map(|c| find_churn_definition(c, cfg.returning_max, cfg.missed_max).ok().map(|d| (c.group.clone(), d.k_days)))
        .collect();
    for card in &cards {
        let u = panel.user(&card.user_id).unwrap();
        let dsll = u.days[u.day_index(as_of).unwrap()].days_since_last_login;
        assert_eq!(card.days_since_last_login, dsll);
        let ind = |mode| indicator(&panel, &u.user_id, as_of, Metric::DaysSinceLastLogin, mode, &cfg.indicator).ok().map(|i| i.value);
        assert_eq!(card.ecdf_endo, ind(Mode::Endo));
        assert_eq!(card.ecdf_exo, ind(Mode::Exo));
        assert_eq!(card.ecdf_snp, ind(Mode::Snp));
        let score = score_series(&panel, &cfg.score, &u.user_id, None).unwrap();
        assert_eq!(card.score, score.iter().find(|s| s.day == as_of).unwrap().value);
        let eq = gap_ecdf(&panel, u, as_of, Mode::Endo, &cfg.indicator).ok().map(|e| e.equivalent_churn_definition(0.95).unwrap());
        assert_eq!(card.equivalent_churn_days, eq);
        assert_eq!(card.survival_probability, Some(model.survival_at(u, as_of).unwrap()));
        assert_eq!(card.rcmm_k, horizons.get(&u.group).copied());
        assert_eq!(card.flags.rcmm, card.rcmm_k.map(|k| dsll > k));
        assert_eq!(card.flags.endo, card.ecdf_endo.map(|v| v > 0.95));
        assert_eq!(card.flags.low_score, card.score < 0.1);
    }

    let mut csv = Vec::new();
    write_cards_csv(&cards, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CARD_HEADER.join(","));
    assert_eq!(text.lines().count(), cards.len() + 1);
}

#[test]
fn unknown_users_and_days_are_errors() {
    let (panel, as_of) = cohort();
    let cfg = ReportConfig::default();
    assert!(report(&panel, None, &["nobody".into()], as_of, &cfg).is_err());
    assert!(report(&panel, None, &[], as_of, &cfg).is_err());
    let u = panel.users[0].user_id.clone();
    assert!(report(&panel, None, &[u], panel.panel_end + Duration::days(5), &cfg).is_err());
}

fn login(user: &str, day: NaiveDate, tests: u32) -> Vec<EventRecord> {
    let t = Utc.from_utc_datetime(&day.and_hms_opt(9, 0, 0).unwrap());
    let mut out = vec![EventRecord::new(user, t, EventKind::Login, None, "ET")];
    for j in 0..tests {
        out.push(EventRecord::new(user, t + Duration::seconds(5 + j as i64), EventKind::TestPassed, None, "ET"));
    }
    out.push(EventRecord::new(user, t + Duration::seconds(300), EventKind::SessionEnd, Some(300.0), "ET"));
    out
}

/// Twenty users log in daily through the panel end, twenty stop after 50 days.
fn split_cohort() -> (CohortPanel, NaiveDate) {
    let start = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
    let end = start + Duration::days(149);
    let mut events = Vec::new();
    for i in 0..20 {
        for d in 0..150 {
            events.extend(login(&format!("a{i:02}"), start + Duration::days(d), 1));
        }
        for d in 0..50 {
            events.extend(login(&format!("b{i:02}"), start + Duration::days(d), 1));
        }
    }
    (build_panel(&events, end, &PanelConfig::default()).unwrap().panel, end)
}

#[test]
fn inactive_user_card() {
    let (panel, end) = split_cohort();
    let cards = report(&panel, None, &["b00".into()], end, &ReportConfig::default()).unwrap();
    let c = &cards[0];
    assert_eq!(c.days_since_last_login, 100);
    assert_eq!(c.score, 0.0);
    assert!(c.flags.low_score);
    assert_eq!(c.equivalent_churn_days, Some(1));
    assert_eq!(c.ecdf_endo, Some(1.0));
    assert_eq!(c.flags.endo, Some(true));
    assert_eq!(c.rcmm_k, Some(1));
    assert_eq!(c.flags.rcmm, Some(true));
    assert_eq!(c.survival_probability, None);
}

#[test]
fn matching_definitions_have_empty_off_diagonals() {
    let (panel, end) = split_cohort();
    let cmp = compare_churn_definitions(&panel, end, &ReportConfig::default()).unwrap();
    let h = &cmp.horizons[0];
    assert_eq!((h.rcmm, h.exo, h.snp, h.endo_average), (Some(1), Some(1), Some(100), Some(1.0)));
    let diagonal = Confusion { both_churned: 20, rcmm_only: 0, ecdf_only: 0, neither: 20 };
    assert_eq!(cmp.confusion[&Mode::Endo], diagonal);
    assert_eq!(cmp.confusion[&Mode::Exo], diagonal);
    assert_eq!(cmp.confusion[&Mode::Snp], Confusion { both_churned: 0, rcmm_only: 20, ecdf_only: 0, neither: 20 });
}

fn brute_gaps(u: &UserPanel, before: NaiveDate) -> Vec<f64> {
    let logins: Vec<NaiveDate> = u.days.iter().filter(|d| d.logged_in).map(|d| d.day).collect();
    logins.windows(2).filter(|w| w[1] < before).map(|w| (w[1] - w[0]).num_days() as f64).collect()
}

fn brute_k(samples: &[f64], q: f64) -> Option<i64> {
    if samples.is_empty() {
        return None;
    }
    (0..).find(|&z| samples.iter().filter(|s| **s <= z as f64).count() as f64 / samples.len() as f64 >= q)
}

#[test]
fn comparison_matches_a_brute_force_sweep() {
    let (panel, as_of) = cohort();
    let cfg = ReportConfig::default();
    let cmp = compare_churn_definitions(&panel, as_of, &cfg).unwrap();
    let horizons: BTreeMap<String, u32> = cmp.horizons.iter().filter_map(|h| h.rcmm.map(|k| (h.group.clone(), k))).collect();

    let mut want: BTreeMap<Mode, Confusion> = Mode::ALL.iter().map(|m| (*m, Confusion::default())).collect();
    let mut n = 0;
    for u in &panel.users {
        let Some(i) = u.day_index(as_of) else { continue };
        n += 1;
        let dsll = u.days[i].days_since_last_login as i64;
        let peers: Vec<&UserPanel> = panel.users.iter().filter(|p| p.group == u.group).collect();
        let exo: Vec<f64> = peers.iter().flat_map(|p| brute_gaps(p, as_of)).filter(|g| *g <= 200.0).collect();
        let snp: Vec<f64> = peers
            .iter()
            .filter_map(|p| p.day_index(as_of).map(|j| p.days[j].days_since_last_login as f64))
            .filter(|g| *g <= 200.0)
            .collect();
        let ks = [
            (Mode::Endo, brute_k(&brute_gaps(u, as_of), cfg.quantile)),
            (Mode::Exo, brute_k(&exo, cfg.quantile)),
            (Mode::Snp, brute_k(&snp, cfg.quantile)),
        ];
        let Some(&rk) = horizons.get(&u.group) else { continue };
        let r = dsll > rk as i64;
        for (mode, k) in ks {
            if let Some(k) = k {
                let e = dsll > k;
                let c = want.get_mut(&mode).unwrap();
                match (r, e) {
                    (true, true) => c.both_churned += 1,
                    (true, false) => c.rcmm_only += 1,
                    (false, true) => c.ecdf_only += 1,
                    (false, false) => c.neither += 1,
                }
            }
        }
    }
    assert_eq!(cmp.users.len(), n);
    assert_eq!(cmp.confusion, want);
    assert!(want[&Mode::Exo].total() > 0);

    let mut buf = Vec::new();
    write_horizons_csv(&cmp, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), cmp.horizons.len() + 1);
    let mut buf = Vec::new();
    write_confusion_csv(&cmp, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
}
