use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use engagement::ecdf::{churn_risk_flag, indicator_reference, indicators_on_day, write_distribution_csv, Direction, IndicatorConfig, Mode};
use engagement::events::{ingest_events, write_events_csv, write_events_jsonl, IngestOptions, IngestReport, InputFormat, Rejection};
use engagement::forest::{
    bootstrap_evaluate, fit_panel, read_model, select_top_features, write_model, Algorithm, EvalOptions, EvaluationReport,
    ForestModel, ModelSpec,
};
use engagement::metric::Metric;
use engagement::panel::{build_panel, write_sessions_csv, CohortPanel, PanelConfig};
use engagement::rcmm::{find_churn_definition, rcmm_curve, write_curves_csv, ChurnDefinition, GroupBy, ReturningBase};
use engagement::report::{compare_churn_definitions, report, write_cards_csv, write_confusion_csv, write_horizons_csv, ReportConfig};
use engagement::score::{score_all, write_scores_csv, EngagementScore, ScoreSpec};
use engagement::survival::{kaplan_meier, SurvivalCurve, SurvivalObservation};
use engagement::synth::{generate, CohortSpec};
use engagement::dataset::label_churn;
use engagement::Error;

use crate::output::{emit, emit_json, out_path, resolve};
use crate::{
    ChurnDefArgs, Cli, Cmd, CompareArgs, DefinitionArgs, EcdfArgs, EvalArgs, FitArgs, Format, Global, IngestArgs, KmArgs,
    ModelArgs, Outcome, PanelArgs, Preset, ReportArgs, ScoreArgs, SimulateArgs,
};

pub fn dispatch(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    match &cli.command {
        Cmd::Simulate(a) => simulate(g, a),
        Cmd::Ingest(a) => ingest(g, a),
        Cmd::Panel(a) => panel(g, a),
        Cmd::ChurnDef(a) => churn_def(g, a),
        Cmd::Ecdf(a) => ecdf(g, a),
        Cmd::Score(a) => score(g, a),
        Cmd::Km(a) => km(g, a),
        Cmd::SurvivalFit(a) => survival_fit(g, a),
        Cmd::SurvivalEval(a) => survival_eval(g, a),
        Cmd::Report(a) => report_cards(g, a),
        Cmd::Compare(a) => compare(g, a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn read_panel(path: &Path) -> Result<CohortPanel> {
    CohortPanel::read_csv(open(path)?).with_context(|| format!("reading panel {}", path.display()))
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn check_quantile(name: &str, q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        bail!("{name} must lie in (0, 1), got {q}");
    }
    Ok(())
}

fn event_format(flag: Option<Format>, path: &Path) -> InputFormat {
    match flag {
        Some(Format::Csv) => InputFormat::Csv,
        Some(Format::Json | Format::Jsonl) => InputFormat::Jsonl,
        None => match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "ndjson" | "json") => InputFormat::Jsonl,
            _ => InputFormat::Csv,
        },
    }
}

fn write_events(path: Option<&Path>, fmt: InputFormat, events: &[engagement::events::EventRecord]) -> Result<()> {
    emit(path, |w| {
        match fmt {
            InputFormat::Csv => write_events_csv(events, w)?,
            InputFormat::Jsonl => write_events_jsonl(events, w)?,
        }
        Ok(())
    })
}

fn read_events(path: &Path, fmt: InputFormat, opts: &IngestOptions) -> Result<IngestReport> {
    ingest_events(open(path)?, fmt, opts).with_context(|| format!("reading events {}", path.display()))
}

/// Writes rejections to `path` as CSV, or lists them on stderr.
fn report_rejections(rejections: &[Rejection], path: Option<&PathBuf>) -> Result<()> {
    match path {
        Some(p) => emit(Some(p), |w| {
            let mut c = csv_writer(w);
            c.write_record(["line", "reason"])?;
            for r in rejections {
                c.write_record([r.line.to_string(), r.reason.clone()])?;
            }
            c.flush()?;
            Ok(())
        })?,
        None => {
            for r in rejections {
                eprintln!("rejected line {}: {}", r.line, r.reason);
            }
        }
    }
    if !rejections.is_empty() {
        eprintln!("{} input line(s) rejected", rejections.len());
    }
    Ok(())
}

fn simulate(g: &Global, a: &SimulateArgs) -> Result<Outcome> {
    let seed = g.seed.unwrap_or(0);
    let mut spec: CohortSpec = match (&a.spec, a.preset) {
        (Some(p), None) => read_json(p)?,
        (None, Some(preset)) => {
            let users = a.users.unwrap_or(1000);
            match preset {
                Preset::Homogeneous => CohortSpec::homogeneous(users, a.rate, seed),
                Preset::TwoGroup => CohortSpec::two_group(users, a.hazard_ratio, seed),
                Preset::PlantedSignal => CohortSpec::planted_signal(users, a.hazard_ratio, seed),
                Preset::RegimeSwitch => CohortSpec::regime_switch(users, seed),
            }
        }
        _ => bail!("give exactly one of --spec and --preset"),
    };
    if let Some(u) = a.users {
        spec.users = u;
    }
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let (events, truth) = generate(&spec)?;
    let fmt = match resolve(g.format, out_path(&g.out), Format::Csv) {
        Format::Csv => InputFormat::Csv,
        Format::Json | Format::Jsonl => InputFormat::Jsonl,
    };
    write_events(out_path(&g.out), fmt, &events)?;
    if let Some(t) = &a.truth {
        let truth = if a.full_truth { truth } else { truth.compact() };
        emit_json(Some(t), &truth)?;
    }
    log::info!("generated {} events for {} users", events.len(), spec.users);
    Ok(Outcome::Clean)
}

fn parse_ts(s: &str) -> Result<DateTime<Utc>> {
    Ok(DateTime::parse_from_rfc3339(s).with_context(|| format!("bad timestamp `{s}`"))?.with_timezone(&Utc))
}

fn ingest(g: &Global, a: &IngestArgs) -> Result<Outcome> {
    let fmt = event_format(g.format, &a.events);
    let window = match (&a.window_start, &a.window_end) {
        (None, None) => None,
        (s, e) => Some((
            s.as_deref().map(parse_ts).transpose()?.unwrap_or(DateTime::<Utc>::MIN_UTC),
            e.as_deref().map(parse_ts).transpose()?.unwrap_or(DateTime::<Utc>::MAX_UTC),
        )),
    };
    let rep = read_events(&a.events, fmt, &IngestOptions { window })?;
    write_events(out_path(&g.out), fmt, &rep.records)?;
    report_rejections(&rep.rejections, a.rejections.as_ref())?;
    log::info!(
        "{} events kept, {} duplicates removed, {} rejected",
        rep.records.len(),
        rep.duplicates_removed,
        rep.rejections.len()
    );
    Ok(if rep.rejections.is_empty() { Outcome::Clean } else { Outcome::Partial })
}

fn panel(g: &Global, a: &PanelArgs) -> Result<Outcome> {
    let fmt = event_format(g.format, &a.events);
    let rep = read_events(&a.events, fmt, &IngestOptions::default())?;
    let end = match a.end {
        Some(d) => d,
        None => rep
            .records
            .iter()
            .map(|e| e.timestamp.date_naive())
            .max()
            .ok_or_else(|| anyhow!("no valid events in {}", a.events.display()))?,
    };
    let build = build_panel(&rep.records, end, &PanelConfig { session_timeout_s: a.session_timeout })?;
    for w in &build.warnings {
        log::warn!("{w}");
    }
    emit(out_path(&g.out), |w| Ok(build.panel.write_csv(w)?))?;
    if let Some(p) = &a.sessions {
        emit(Some(p), |w| Ok(write_sessions_csv(&build.sessions, w)?))?;
    }
    report_rejections(&rep.rejections, a.rejections.as_ref())?;
    if build.rejected > 0 {
        eprintln!("{} event(s) dropped while building the panel", build.rejected);
    }
    Ok(if rep.rejections.is_empty() && build.rejected == 0 { Outcome::Clean } else { Outcome::Partial })
}

#[derive(Serialize)]
struct Unresolved {
    group: String,
    best_returning: f64,
    best_missed: f64,
}

#[derive(Serialize)]
struct ChurnDefReport {
    as_of: NaiveDate,
    returning_max: f64,
    missed_max: f64,
    base: ReturningBase,
    group_by: GroupBy,
    metrics: Vec<Metric>,
    k_max: u32,
    definitions: Vec<ChurnDefinition>,
    unresolved: Vec<Unresolved>,
}

fn churn_def(g: &Global, a: &ChurnDefArgs) -> Result<Outcome> {
    let panel = read_panel(&a.panel)?;
    let metrics = Metric::parse_list(&a.metrics)?;
    if a.k_max == 0 {
        bail!("--k-max must be at least 1");
    }
    let grid: Vec<u32> = (1..=a.k_max).collect();
    let curves = rcmm_curve(&panel, &grid, &metrics, a.group_by, a.base)?;
    let mut definitions = Vec::new();
    let mut unresolved = Vec::new();
    for c in &curves {
        match find_churn_definition(c, a.returning_max, a.missed_max) {
            Ok(d) => definitions.push(d),
            Err(Error::NoDefinition { best_returning, best_missed, .. }) => {
                eprintln!(
                    "group {}: no k in 1..={} meets the thresholds (best returning {best_returning}, best missed {best_missed})",
                    c.group, a.k_max
                );
                unresolved.push(Unresolved { group: c.group.clone(), best_returning, best_missed });
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(p) = &a.curve {
        emit(Some(p), |w| Ok(write_curves_csv(&curves, w)?))?;
    }
    let rep = ChurnDefReport {
        as_of: panel.panel_end,
        returning_max: a.returning_max,
        missed_max: a.missed_max,
        base: a.base,
        group_by: a.group_by,
        metrics,
        k_max: a.k_max,
        definitions,
        unresolved,
    };
    match resolve(g.format, out_path(&g.out), Format::Json) {
        Format::Csv => emit(out_path(&g.out), |w| {
            let mut c = csv_writer(w);
            c.write_record(["group", "k_days", "returning_max", "missed_max", "as_of", "best_returning", "best_missed"])?;
            for d in &rep.definitions {
                c.write_record([
                    d.group.clone(),
                    d.k_days.to_string(),
                    rep.returning_max.to_string(),
                    rep.missed_max.to_string(),
                    rep.as_of.to_string(),
                    String::new(),
                    String::new(),
                ])?;
            }
            for u in &rep.unresolved {
                c.write_record([
                    u.group.clone(),
                    String::new(),
                    rep.returning_max.to_string(),
                    rep.missed_max.to_string(),
                    rep.as_of.to_string(),
                    u.best_returning.to_string(),
                    u.best_missed.to_string(),
                ])?;
            }
            c.flush()?;
            Ok(())
        })?,
        _ => emit_json(out_path(&g.out), &rep)?,
    }
    Ok(if rep.unresolved.is_empty() { Outcome::Clean } else { Outcome::Partial })
}

fn indicator_config(gap_cutoff: f64, no_gap_cutoff: bool) -> IndicatorConfig {
    IndicatorConfig { gap_cutoff_days: (!no_gap_cutoff).then_some(gap_cutoff) }
}

#[derive(Serialize)]
struct IndicatorRow {
    user_id: String,
    group: String,
    day: NaiveDate,
    metric: Metric,
    mode: Mode,
    value: Option<f64>,
    churn_risk: Option<bool>,
}

fn ecdf(g: &Global, a: &EcdfArgs) -> Result<Outcome> {
    let panel = read_panel(&a.panel)?;
    let metric: Metric = a.metric.parse()?;
    check_quantile("--q", a.q)?;
    let day = a.day.unwrap_or(panel.panel_end);
    let cfg = indicator_config(a.gap_cutoff, a.no_gap_cutoff);
    let direction = Direction::for_metric(metric);
    let results = indicators_on_day(&panel, day, metric, a.mode, &cfg);
    if results.is_empty() {
        log::warn!("no user has a panel row on {day}");
    }
    let rows: Vec<IndicatorRow> = results
        .into_iter()
        .map(|(user_id, r)| {
            let value = r.ok().map(|i| i.value);
            let group = panel.user(&user_id).map(|u| u.group.clone()).unwrap_or_default();
            IndicatorRow {
                user_id,
                group,
                day,
                metric,
                mode: a.mode,
                value,
                churn_risk: value.map(|v| churn_risk_flag(v, direction, a.q)),
            }
        })
        .collect();
    let undefined = rows.iter().filter(|r| r.value.is_none()).count();
    if undefined > 0 {
        log::info!("{undefined} user(s) lack the history for a {} indicator on {day}", a.mode);
    }
    match resolve(g.format, out_path(&g.out), Format::Csv) {
        Format::Csv => emit(out_path(&g.out), |w| {
            let mut c = csv_writer(w);
            c.write_record(["user_id", "group", "day", "metric", "mode", "value", "churn_risk"])?;
            for r in &rows {
                c.write_record([
                    r.user_id.clone(),
                    r.group.clone(),
                    r.day.to_string(),
                    r.metric.id().to_string(),
                    r.mode.to_string(),
                    opt(r.value),
                    opt(r.churn_risk),
                ])?;
            }
            c.flush()?;
            Ok(())
        })?,
        _ => emit_json(out_path(&g.out), &rows)?,
    }
    if let Some(p) = &a.distribution {
        let user = match &a.user {
            Some(id) => panel.try_user(id)?,
            None => panel
                .users
                .iter()
                .find(|u| u.day_index(day).is_some())
                .ok_or_else(|| anyhow!("no user has a panel row on {day}"))?,
        };
        let reference = indicator_reference(&panel, user, day, metric, a.mode, &cfg)?;
        emit(Some(p), |w| Ok(write_distribution_csv(&reference, w)?))?;
    }
    Ok(Outcome::Clean)
}

#[derive(Serialize)]
struct ScoreOutput<'a> {
    mode: Mode,
    components: &'a [Metric],
    scores: &'a [EngagementScore],
}

fn score(g: &Global, a: &ScoreArgs) -> Result<Outcome> {
    let panel = read_panel(&a.panel)?;
    let spec = ScoreSpec { components: Metric::parse_list(&a.components)?, mode: a.mode };
    let range = match (a.from, a.to) {
        (None, None) => None,
        (f, t) => Some((f.unwrap_or(NaiveDate::MIN), t.unwrap_or(NaiveDate::MAX))),
    };
    let scores = score_all(&panel, &spec, range)?;
    match resolve(g.format, out_path(&g.out), Format::Csv) {
        Format::Csv => emit(out_path(&g.out), |w| Ok(write_scores_csv(&scores, &spec, w)?))?,
        _ => emit_json(out_path(&g.out), &ScoreOutput { mode: spec.mode, components: &spec.components, scores: &scores })?,
    }
    Ok(Outcome::Clean)
}

#[derive(Serialize)]
struct KmGroup {
    group: String,
    n_subjects: usize,
    events: usize,
    median: Option<u32>,
    curve: SurvivalCurve,
}

fn km(g: &Global, a: &KmArgs) -> Result<Outcome> {
    let panel = read_panel(&a.panel)?;
    let labeled = label_churn(&panel, a.churn_k)?;
    for w in &labeled.warnings {
        log::info!("{w}");
    }
    let mut groups: BTreeMap<String, Vec<SurvivalObservation>> = BTreeMap::new();
    for s in &labeled.subjects {
        let label = a.group_by.label(&panel.users[s.user_index]).to_string();
        groups.entry(label).or_default().push(s.obs);
    }
    if groups.is_empty() {
        bail!("no user has a positive lifetime");
    }
    let curves: Vec<KmGroup> = groups
        .into_iter()
        .map(|(group, obs)| {
            let curve = kaplan_meier(&obs)?;
            Ok(KmGroup {
                n_subjects: obs.len(),
                events: obs.iter().filter(|o| o.event).count(),
                median: curve.median(),
                group,
                curve,
            })
        })
        .collect::<Result<_>>()?;
    for c in &curves {
        log::info!("group {}: {} subjects, {} events, median {:?}", c.group, c.n_subjects, c.events, c.median);
    }
    match resolve(g.format, out_path(&g.out), Format::Csv) {
        Format::Csv => emit(out_path(&g.out), |w| {
            let mut c = csv_writer(w);
            c.write_record(["group", "t", "survival", "lower", "upper"])?;
            for k in &curves {
                k.curve.write_csv(Some(&k.group), &mut c)?;
            }
            c.flush()?;
            Ok(())
        })?,
        _ => emit_json(out_path(&g.out), &curves)?,
    }
    Ok(Outcome::Clean)
}

/// Model specification from `--model-spec`, with flags applied on top.
fn model_spec(a: &ModelArgs) -> Result<ModelSpec> {
    let mut spec = match &a.model_spec {
        Some(p) => read_json(p)?,
        None => ModelSpec::new(a.model.unwrap_or(Algorithm::Csf)),
    };
    if let Some(m) = a.model {
        spec.algorithm = m;
    }
    if let Some(k) = a.churn_k {
        spec.data.churn_k = k;
    }
    if let Some(n) = a.ntree {
        spec.hyper.ntree = n;
    }
    if a.mtry.is_some() {
        spec.hyper.mtry = a.mtry;
    }
    if let Some(v) = a.alpha {
        spec.hyper.alpha = v;
    }
    if let Some(v) = a.min_node_size {
        spec.hyper.min_node_size = v;
    }
    if let Some(v) = a.min_leaf {
        spec.hyper.min_leaf = v;
    }
    if let Some(v) = a.interval {
        spec.data.interval = v;
    }
    if let Some(f) = &a.features {
        spec.data.selected = Some(split_list(f));
    }
    if let Some(p) = &a.select_from {
        let evaluated: EvaluationReport = read_json(p)?;
        if evaluated.algorithm != spec.algorithm {
            log::warn!("selecting features from a {} evaluation for a {} model", evaluated.algorithm, spec.algorithm);
        }
        let (names, warning) = select_top_features(&evaluated, a.select_top)?;
        if let Some(w) = warning {
            log::warn!("{w}");
        }
        spec.data.selected = Some(names);
    }
    spec.hyper.validate()?;
    spec.data.features.validate()?;
    Ok(spec)
}

fn survival_fit(g: &Global, a: &FitArgs) -> Result<Outcome> {
    let panel = read_panel(&a.model.panel)?;
    let spec = model_spec(&a.model)?;
    let model: ForestModel = fit_panel(&panel, &spec, g.seed.unwrap_or(0))?;
    emit(out_path(&g.out), |w| Ok(write_model(&model, w)?))?;
    log::info!("fitted {} trees on {} features", model.trees.len(), model.feature_names.len());
    Ok(Outcome::Clean)
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: EvaluationReport,
    model_spec: ModelSpec,
    top_features: Vec<String>,
    selection_warning: Option<String>,
}

fn survival_eval(g: &Global, a: &EvalArgs) -> Result<Outcome> {
    let panel = read_panel(&a.model.panel)?;
    let spec = model_spec(&a.model)?;
    let opts = EvalOptions { bootstrap: a.bootstrap, split: a.split, permutation_importance: !a.split_importance };
    let rep = bootstrap_evaluate(&panel, &spec, &opts, g.seed.unwrap_or(0))?;
    for w in &rep.warnings {
        log::warn!("{w}");
    }
    let (top_features, selection_warning) = select_top_features(&rep, a.top)?;
    let out = EvalOutput { report: rep, model_spec: spec, top_features, selection_warning };
    match resolve(g.format, out_path(&g.out), Format::Json) {
        Format::Csv => emit(out_path(&g.out), |w| {
            let mut c = csv_writer(w);
            c.write_record(["round", "n_train", "n_test", "test_events", "ibs", "null_ibs"])?;
            for r in &out.report.rounds {
                c.write_record([
                    r.round.to_string(),
                    r.n_train.to_string(),
                    r.n_test.to_string(),
                    r.test_events.to_string(),
                    r.ibs.to_string(),
                    r.null_ibs.to_string(),
                ])?;
            }
            c.flush()?;
            Ok(())
        })?,
        _ => emit_json(out_path(&g.out), &out)?,
    }
    Ok(Outcome::Clean)
}

fn report_config(d: &DefinitionArgs, score: ScoreSpec, low_score: f64) -> Result<ReportConfig> {
    check_quantile("--returning-max", d.returning_max)?;
    check_quantile("--missed-max", d.missed_max)?;
    Ok(ReportConfig {
        quantile: d.quantile,
        returning_max: d.returning_max,
        missed_max: d.missed_max,
        missed_metrics: Metric::parse_list(&d.metrics)?,
        base: d.base,
        indicator: indicator_config(d.gap_cutoff, d.no_gap_cutoff),
        score,
        low_score,
    })
}

fn report_cards(g: &Global, a: &ReportArgs) -> Result<Outcome> {
    let panel = read_panel(&a.def.panel)?;
    let score = ScoreSpec { components: Metric::parse_list(&a.components)?, mode: a.score_mode };
    let cfg = report_config(&a.def, score, a.low_score)?;
    let as_of = a.def.as_of.unwrap_or(panel.panel_end);
    let model = a
        .model
        .as_ref()
        .map(|p| read_model(open(p)?).with_context(|| format!("reading model {}", p.display())))
        .transpose()?;
    let users: Vec<String> = match &a.users {
        Some(list) => split_list(list),
        None => panel.users.iter().filter(|u| u.day_index(as_of).is_some()).map(|u| u.user_id.clone()).collect(),
    };
    let cards = report(&panel, model.as_ref(), &users, as_of, &cfg)?;
    match resolve(g.format, out_path(&g.out), Format::Json) {
        Format::Csv => emit(out_path(&g.out), |w| Ok(write_cards_csv(&cards, w)?))?,
        _ => emit_json(out_path(&g.out), &cards)?,
    }
    Ok(Outcome::Clean)
}

fn compare(g: &Global, a: &CompareArgs) -> Result<Outcome> {
    let panel = read_panel(&a.def.panel)?;
    let cfg = report_config(&a.def, ScoreSpec::default(), 0.1)?;
    let as_of = a.def.as_of.unwrap_or(panel.panel_end);
    let cmp = compare_churn_definitions(&panel, as_of, &cfg)?;
    match resolve(g.format, out_path(&g.out), Format::Json) {
        Format::Csv => emit(out_path(&g.out), |w| Ok(write_confusion_csv(&cmp, w)?))?,
        _ => emit_json(out_path(&g.out), &cmp)?,
    }
    if let Some(p) = &a.horizons {
        emit(Some(p), |w| Ok(write_horizons_csv(&cmp, w)?))?;
    }
    if let Some(p) = &a.users_out {
        emit(Some(p), |w| {
            let mut c = csv_writer(w);
            c.write_record(["user_id", "group", "days_since_last_login", "rcmm", "exo", "snp", "endo"])?;
            for u in &cmp.users {
                c.write_record([
                    u.user_id.clone(),
                    u.group.clone(),
                    u.days_since_last_login.to_string(),
                    opt(u.rcmm),
                    opt(u.exo),
                    opt(u.snp),
                    opt(u.endo),
                ])?;
            }
            c.flush()?;
            Ok(())
        })?;
    }
    Ok(Outcome::Clean)
}
