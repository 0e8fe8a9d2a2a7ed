use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use engagement::dataset::{label_churn, FeatureRow, FeatureTable};
use engagement::forest::{
    bootstrap_evaluate, evaluate_table, fit, fit_csf, fit_panel, heldout_ibs, read_model,
    round_fit_seed, round_split, select_top_features, write_model, Algorithm, EvalOptions, EvaluationReport,
    Hyperparams, ImportanceKind, ModelSpec, Node,
};
use engagement::panel::{build_panel, CohortPanel, PanelConfig};
use engagement::survival::{kaplan_meier, SurvivalObservation};
use engagement::synth::{generate, CohortSpec, GroundTruth};

fn panel_of(spec: &CohortSpec) -> (CohortPanel, GroundTruth) {
    let (events, truth) = generate(spec).unwrap();
    (build_panel(&events, spec.panel_end(), &PanelConfig::default()).unwrap().panel, truth)
}

/// Static table: `sep` splits short from long lifetimes, `noise` is uniform.
fn separable_table(n: usize, seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|i| {
            let long = i % 2 == 1;
            let exit = if long { rng.random_range(60..80) } else { rng.random_range(5..15) };
            FeatureRow {
                subject: i as u32,
                entry: 0,
                exit,
                event: true,
                features: vec![long as u8 as f64, rng.random_range(0.0..1.0)],
            }
        })
        .collect();
    FeatureTable {
        names: vec!["sep".into(), "noise".into()],
        subjects: (0..n).map(|i| format!("s{i}")).collect(),
        rows,
    }
}

fn row(features: Vec<f64>) -> FeatureRow {
    FeatureRow { subject: 0, entry: 0, exit: 1, event: false, features }
}

fn small_hyper(ntree: usize) -> Hyperparams {
    Hyperparams { ntree, ..Hyperparams::default() }
}

#[test]
fn separating_feature_is_chosen_at_every_root() {
    let table = separable_table(200, 1);
    let hyper = Hyperparams { mtry: Some(2), ..small_hyper(30) };
    let model = fit_csf(&table, &hyper, 5).unwrap();
    for tree in &model.trees {
        assert!(matches!(tree.nodes[0], Node::Split { feature: 0, .. }));
    }
    let short = model.predict_curve(&[row(vec![0.0, 0.5])], 100);
    let long = model.predict_curve(&[row(vec![1.0, 0.5])], 100);
    short.validate().unwrap();
    long.validate().unwrap();
    let (ms, ml) = (short.median().unwrap(), long.median().unwrap());
    assert!((5..15).contains(&ms) && (60..80).contains(&ml), "{ms} {ml}");
}

#[test]
fn root_only_trees_reproduce_training_km() {
    let table = separable_table(120, 2);
    let hyper = Hyperparams { alpha: 0.0, bootstrap: false, ..small_hyper(10) };
    for algorithm in [Algorithm::Csf, Algorithm::LtrcCif] {
        let model = fit(algorithm, &table, &hyper, 3).unwrap();
        assert!(model.trees.iter().all(|t| t.nodes.len() == 1));
        let obs: Vec<SurvivalObservation> = table.rows.iter().map(FeatureRow::obs).collect();
        let km = kaplan_meier(&obs).unwrap();
        let times: Vec<u32> = (0..100).collect();
        let pred = model.predict_subject(&[row(vec![0.0, 0.0])], &times);
        for (t, p) in times.iter().zip(pred) {
            assert!((p - km.at(*t)).abs() < 1e-12, "t={t}: {p} vs {}", km.at(*t));
        }
    }
}

#[test]
fn fitting_is_deterministic_and_row_order_free() {
    let spec = CohortSpec::two_group(300, 4.0, 3);
    let (panel, _) = panel_of(&spec);
    let labeled = label_churn(&panel, 31).unwrap();
    for algorithm in [Algorithm::Csf, Algorithm::LtrcCif, Algorithm::LtrcRrf] {
        let model_spec = ModelSpec::new(algorithm);
        let table = model_spec.data.table(&panel, &labeled, algorithm).unwrap();
        let hyper = small_hyper(20);
        let a = fit(algorithm, &table, &hyper, 11).unwrap();
        let b = fit(algorithm, &table, &hyper, 11).unwrap();
        assert_eq!(a, b);
        let mut shuffled = table.clone();
        shuffled.rows.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(fit(algorithm, &shuffled, &hyper, 11).unwrap(), a);
        assert_ne!(fit(algorithm, &table, &hyper, 12).unwrap(), a);
        let times: Vec<u32> = (0..=200).step_by(10).collect();
        for curve in a.predict_table(&table, &times) {
            assert!(curve.windows(2).all(|w| w[1] <= w[0]));
            assert!(curve.iter().all(|s| (0.0..=1.0).contains(s)));
            assert_eq!(curve[0], 1.0);
        }
    }
}

#[test]
fn model_file_round_trip() {
    let table = separable_table(100, 5);
    let mut model = fit_csf(&table, &small_hyper(5), 1).unwrap();
    model.data = Some(Default::default());
    let mut buf = Vec::new();
    write_model(&model, &mut buf).unwrap();
    assert_eq!(&buf[..8], b"ENGFRST\0");
    assert_eq!(read_model(buf.as_slice()).unwrap(), model);

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_model(bad.as_slice()).is_err());
    let mut future = buf.clone();
    future[8] = 99;
    assert!(read_model(future.as_slice()).is_err());
    assert!(read_model(&buf[..buf.len() - 3]).is_err());
    assert!(read_model(&buf[..4]).is_err());
}

#[test]
fn rrf_on_homogeneous_cohort_stays_near_one() {
    for seed in 0..5 {
        let (panel, _) = panel_of(&CohortSpec::homogeneous(2000, 0.004, seed));
        let spec = ModelSpec::new(Algorithm::LtrcRrf);
        let model = fit_panel(&panel, &spec, seed).unwrap();
        let labeled = label_churn(&panel, spec.data.churn_k).unwrap();
        let table = spec.data.table(&panel, &labeled, Algorithm::LtrcRrf).unwrap();
        for r in &table.rows {
            let risk = model.relative_risk(&r.features).unwrap();
            assert!((risk - 1.0).abs() <= 0.1, "seed {seed}: risk {risk}");
        }
    }
}

#[test]
fn rrf_recovers_group_hazard_ratio() {
    let (panel, truth) = panel_of(&CohortSpec::two_group(2000, 4.0, 7));
    let spec = ModelSpec::new(Algorithm::LtrcRrf);
    let model = fit_panel(&panel, &spec, 7).unwrap();
    let labeled = label_churn(&panel, spec.data.churn_k).unwrap();
    let table = spec.data.table(&panel, &labeled, Algorithm::LtrcRrf).unwrap();
    let (mut sums, mut counts) = ([0.0; 2], [0usize; 2]);
    for r in &table.rows {
        let class = truth.user(&table.subjects[r.subject as usize]).unwrap().class;
        sums[class] += model.relative_risk(&r.features).unwrap();
        counts[class] += 1;
    }
    let engaged = truth.classes.iter().position(|c| c.name == "engaged").unwrap();
    let casual = 1 - engaged;
    let ratio = (sums[casual] / counts[casual] as f64) / (sums[engaged] / counts[engaged] as f64);
    assert!((2.5..=6.0).contains(&ratio), "ratio {ratio}");
    assert_eq!(fit_panel(&panel, &spec, 7).unwrap(), model);
}

#[test]
fn one_round_equals_a_manual_split() {
    let (panel, _) = panel_of(&CohortSpec::two_group(400, 4.0, 8));
    let spec = ModelSpec { hyper: small_hyper(20), ..ModelSpec::new(Algorithm::LtrcCif) };
    let opts = EvalOptions { bootstrap: 1, split: 0.75, permutation_importance: false };
    let report = bootstrap_evaluate(&panel, &spec, &opts, 21).unwrap();

    let labeled = label_churn(&panel, spec.data.churn_k).unwrap();
    let table = spec.data.table(&panel, &labeled, spec.algorithm).unwrap();
    let obs = labeled.observations();
    let (train, test) = round_split(obs.len(), 0.75, 21, 0);
    assert_eq!(train.len() + test.len(), obs.len());
    let model = fit(spec.algorithm, &table.subset(&train), &spec.hyper, round_fit_seed(21, 0)).unwrap();
    let test_obs: Vec<SurvivalObservation> = test.iter().map(|&i| obs[i as usize]).collect();
    let (_, _, ibs) = heldout_ibs(&model, &table.subset(&test), &test_obs).unwrap();
    assert_eq!(report.rounds.len(), 1);
    assert_eq!(report.ibs_boot_avg, ibs);
    assert_eq!(report.importance_kind, ImportanceKind::SplitStatistic);
    assert_eq!(report.importances.iter().map(|(_, v)| *v).collect::<Vec<_>>(), model.split_importance);
    assert_eq!(evaluate_table(&table, &obs, &spec, &opts, 21).unwrap(), report);
}

#[test]
fn evaluation_rejects_bad_options() {
    let table = separable_table(40, 9);
    let obs: Vec<SurvivalObservation> = table.rows.iter().map(FeatureRow::obs).collect();
    let spec = ModelSpec::new(Algorithm::Csf);
    let bad = [
        EvalOptions { bootstrap: 0, ..EvalOptions::default() },
        EvalOptions { split: 1.0, ..EvalOptions::default() },
        EvalOptions { split: 0.0, ..EvalOptions::default() },
    ];
    for opts in bad {
        assert!(evaluate_table(&table, &obs, &spec, &opts, 1).is_err());
    }
    let censored: Vec<SurvivalObservation> = obs.iter().map(|o| SurvivalObservation { event: false, ..*o }).collect();
    let opts = EvalOptions { bootstrap: 2, ..EvalOptions::default() };
    assert!(evaluate_table(&table, &censored, &spec, &opts, 1).is_err());
}

fn report_with(importances: &[(&str, f64)]) -> EvaluationReport {
    EvaluationReport {
        algorithm: Algorithm::Csf,
        seed: 0,
        bootstrap_rounds: 1,
        split: 0.75,
        rounds: Vec::new(),
        skipped_rounds: Vec::new(),
        ibs_boot_avg: 0.0,
        null_ibs_avg: 0.0,
        importance_kind: ImportanceKind::Permutation,
        importances: importances.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
        warnings: Vec::new(),
    }
}

#[test]
fn top_feature_selection() {
    let report = report_with(&[("a", 0.5), ("b", 0.2), ("c", 0.2)]);
    assert_eq!(select_top_features(&report, 2).unwrap(), (vec!["a".to_string(), "b".to_string()], None));
    let (all, warning) = select_top_features(&report, 3).unwrap();
    assert_eq!(all, vec!["a", "b", "c"]);
    assert!(warning.is_none());
    let (all, warning) = select_top_features(&report, 9).unwrap();
    assert_eq!(all.len(), 3);
    assert!(warning.is_some());
    assert!(select_top_features(&report, 0).is_err());
}

#[test]
fn planted_features_rank_in_the_top_ten() {
    for seed in 0..5 {
        let (panel, truth) = panel_of(&CohortSpec::planted_signal(800, 4.0, seed));
        let spec = ModelSpec { hyper: small_hyper(50), ..ModelSpec::new(Algorithm::Csf) };
        let opts = EvalOptions { bootstrap: 2, ..EvalOptions::default() };
        let report = bootstrap_evaluate(&panel, &spec, &opts, seed).unwrap();
        assert_eq!(report.importance_kind, ImportanceKind::Permutation);
        let (top, _) = select_top_features(&report, 10).unwrap();
        assert_eq!(truth.signal_features.len(), 3);
        for f in &truth.signal_features {
            assert!(top.contains(f), "seed {seed}: {f} not in {top:?}");
        }
    }
}

#[test]
fn more_trees_barely_move_heldout_ibs() {
    let (panel, _) = panel_of(&CohortSpec::two_group(1000, 4.0, 2));
    let opts = EvalOptions { bootstrap: 1, permutation_importance: false, ..EvalOptions::default() };
    let ibs = |ntree| {
        let spec = ModelSpec { hyper: small_hyper(ntree), ..ModelSpec::new(Algorithm::Csf) };
        bootstrap_evaluate(&panel, &spec, &opts, 2).unwrap().ibs_boot_avg
    };
    let (a, b) = (ibs(50), ibs(200));
    assert!((a - b).abs() < 0.01, "{a} vs {b}");
}

#[test]
fn selected_features_restrict_the_table() {
    let (panel, _) = panel_of(&CohortSpec::two_group(200, 4.0, 4));
    let mut spec = ModelSpec { hyper: small_hyper(5), ..ModelSpec::new(Algorithm::LtrcCif) };
    spec.data.selected = Some(vec!["progression_sum_7d".into(), "session_count_sum_3d".into()]);
    let model = fit_panel(&panel, &spec, 1).unwrap();
    assert_eq!(model.feature_names, vec!["progression_sum_7d", "session_count_sum_3d"]);
    let u = &panel.users[0];
    let s = model.survival_at(u, u.last_day()).unwrap();
    assert!((0.0..=1.0).contains(&s));
    assert_eq!(model.survival_at(u, u.first_login).unwrap(), 1.0);
    spec.data.selected = Some(vec!["nope".into()]);
    assert!(fit_panel(&panel, &spec, 1).is_err());
}
