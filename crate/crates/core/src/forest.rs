//! Survival forests: conditional inference survival forests (CSF) on static
//! rows, and left-truncated right-censored variants on pseudo-observations
//! (LTRC-CIF with Kaplan–Meier leaves, LTRC-RRF with relative-risk leaves).
//!
//! All three share one tree engine. At each node a random subset of `mtry`
//! features is tested for association with log-rank scores using the
//! standardized linear statistic of the permutation distribution; the node
//! becomes a leaf when the Bonferroni-adjusted minimum p-value exceeds
//! `alpha`. The split point on the selected feature maximizes the two-sample
//! log-rank statistic (CIF) or the Poisson deviance reduction (RRF).
//!
//! Trees are grown in parallel, each from its own ChaCha stream of the master
//! seed, so a fit is reproducible for any worker count.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dataset::{label_churn, pseudo_observations, segments, static_rows, FeatureRow, FeatureTable, Interval, Labeled};
use crate::error::{invalid, Error, Result};
use crate::features::{user_features, FeatureSpec};
use crate::panel::{CohortPanel, UserPanel};
use crate::survival::{
    brier_curve_with, ibs_grid, integrated_brier_score, km_unchecked, na_unchecked, risk_table, CumulativeHazard,
    SurvivalCurve, SurvivalObservation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Csf,
    LtrcCif,
    LtrcRrf,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Csf => "csf",
            Algorithm::LtrcCif => "ltrc-cif",
            Algorithm::LtrcRrf => "ltrc-rrf",
        }
    }

    /// Whether the algorithm trains on interval pseudo-observations.
    pub fn uses_pseudo_rows(self) -> bool {
        self != Algorithm::Csf
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csf" => Ok(Algorithm::Csf),
            "ltrc-cif" | "ltrc_cif" => Ok(Algorithm::LtrcCif),
            "ltrc-rrf" | "ltrc_rrf" => Ok(Algorithm::LtrcRrf),
            _ => Err(invalid(format!("unknown model `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub ntree: usize,
    /// Features tested per node; `None` means `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    pub alpha: f64,
    /// Nodes with fewer rows are not split.
    pub min_node_size: usize,
    pub min_leaf: usize,
    pub max_split_candidates: usize,
    /// Monte Carlo permutations for nodes below `exact_below` rows.
    pub permutations: usize,
    pub exact_below: usize,
    /// Grow each tree on a random sample of subjects rather than all of them.
    pub bootstrap: bool,
    /// Draw the sample with replacement. Duplicated subjects make the
    /// permutation tests anti-conservative, so the default subsamples.
    pub replace: bool,
    /// Sample size as a fraction of the subjects.
    pub sample_fraction: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            ntree: 100,
            mtry: None,
            alpha: 0.05,
            min_node_size: 20,
            min_leaf: 7,
            max_split_candidates: 50,
            permutations: 999,
            exact_below: 30,
            bootstrap: true,
            replace: false,
            sample_fraction: 0.632,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.ntree == 0 || self.min_leaf == 0 || self.max_split_candidates == 0 {
            return Err(invalid("ntree, min_leaf and max_split_candidates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha must lie in [0, 1]"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(invalid("sample_fraction must lie in (0, 1]"));
        }
        if self.mtry == Some(0) {
            return Err(invalid("mtry must be positive"));
        }
        Ok(())
    }

    fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p.max(1))
    }
}

/// Kaplan–Meier leaf as per-event-time survival factors `1 - d/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmLeaf {
    pub times: Vec<u32>,
    pub factors: Vec<f64>,
}

impl KmLeaf {
    fn from_obs(obs: &[SurvivalObservation]) -> Self {
        let table = risk_table(obs);
        Self {
            times: table.iter().map(|r| r.0).collect(),
            factors: table.iter().map(|&(_, d, n)| (n - d) as f64 / n as f64).collect(),
        }
    }

    /// Kaplan–Meier curve of the leaf.
    pub fn curve(&self) -> SurvivalCurve {
        let mut times = vec![0];
        let mut survival = vec![1.0];
        let mut s = 1.0;
        for (t, f) in self.times.iter().zip(&self.factors) {
            s *= f;
            times.push(*t);
            survival.push(s);
        }
        SurvivalCurve { times, survival, lower: None, upper: None }
    }

    /// `prod_{entry < t_i <= u} f_i` for each non-decreasing `u` in `queries`, added to `acc`.
    fn accumulate_conditional(&self, entry: u32, queries: &[u32], acc: &mut [f64]) {
        let mut i = self.times.partition_point(|&t| t <= entry);
        let mut s = 1.0;
        for (q, a) in queries.iter().zip(acc.iter_mut()) {
            while i < self.times.len() && self.times[i] <= *q {
                s *= self.factors[i];
                i += 1;
            }
            *a += if *q <= entry { 1.0 } else { s };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leaf {
    Km(KmLeaf),
    /// Multiplier on the tree's baseline cumulative hazard.
    RelativeRisk { risk: f64, events: f64, expected: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        /// Split criterion at the chosen point.
        statistic: f64,
        /// Bonferroni-adjusted p-value of the variable selection test.
        p_value: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        n_rows: usize,
        leaf: Leaf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    /// Bootstrap-sample Nelson–Aalen baseline (relative-risk trees only).
    pub baseline: Option<CumulativeHazard>,
}

impl Tree {
    pub fn leaf_for(&self, x: &[f64]) -> &Leaf {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if x[*feature] <= *threshold { *left } else { *right } as usize;
                }
                Node::Leaf { leaf, .. } => return leaf,
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// How a model turns panels into training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub churn_k: u32,
    pub features: FeatureSpec,
    pub interval: Interval,
    /// Feature subset, in column order; `None` keeps every engineered feature.
    pub selected: Option<Vec<String>>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            churn_k: 31,
            features: FeatureSpec::default(),
            interval: Interval::Week,
            selected: None,
        }
    }
}

impl DataSpec {
    pub fn table(&self, panel: &CohortPanel, labeled: &Labeled, algorithm: Algorithm) -> Result<FeatureTable> {
        let table = if algorithm.uses_pseudo_rows() {
            pseudo_observations(panel, labeled, &self.features, self.interval)?
        } else {
            static_rows(panel, labeled, &self.features)?
        };
        match &self.selected {
            Some(names) => table.select(names),
            None => Ok(table),
        }
    }

    /// Rows describing one user's history over `[0, duration)` days since first login.
    pub fn user_rows(&self, user: &UserPanel, duration: u32, algorithm: Algorithm) -> Result<Vec<FeatureRow>> {
        let features = if algorithm.uses_pseudo_rows() {
            self.features.clone()
        } else {
            self.features.static_snapshot()
        };
        let m = user_features(user, &features);
        let names = features.names();
        let pick: Vec<usize> = match &self.selected {
            Some(sel) => sel
                .iter()
                .map(|n| names.iter().position(|x| x == n).ok_or_else(|| invalid(format!("unknown feature `{n}`"))))
                .collect::<Result<_>>()?,
            None => (0..names.len()).collect(),
        };
        let row = |entry: u32, exit: u32, at: usize| FeatureRow {
            subject: 0,
            entry,
            exit,
            event: false,
            features: pick.iter().map(|&j| m.row(at)[j]).collect(),
        };
        Ok(if algorithm.uses_pseudo_rows() {
            segments(duration, self.interval.days())
                .into_iter()
                .map(|(a, b)| row(a, b, a as usize))
                .collect()
        } else {
            vec![row(0, duration.max(1), duration as usize)]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub hyper: Hyperparams,
    #[serde(default)]
    pub data: DataSpec,
}

impl ModelSpec {
    pub fn new(algorithm: Algorithm) -> Self {
        Self { algorithm, hyper: Hyperparams::default(), data: DataSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub algorithm: Algorithm,
    pub hyper: Hyperparams,
    pub seed: u64,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
    /// Mean per-tree sum of split criteria, by feature.
    pub split_importance: Vec<f64>,
    pub data: Option<DataSpec>,
}

/// Training rows in canonical order with per-subject ranges.
struct TrainData<'a> {
    rows: Vec<&'a FeatureRow>,
    subject_rows: Vec<(usize, usize)>,
    p: usize,
}

impl<'a> TrainData<'a> {
    fn new(table: &'a FeatureTable) -> Result<Self> {
        table.validate()?;
        if table.rows.is_empty() {
            return Err(Error::EmptyInput("no training rows".into()));
        }
        let mut rows: Vec<&FeatureRow> = table.rows.iter().collect();
        rows.sort_by(|a, b| {
            (a.subject, a.entry, a.exit)
                .cmp(&(b.subject, b.entry, b.exit))
                .then(a.event.cmp(&b.event))
                .then_with(|| {
                    a.features
                        .iter()
                        .zip(&b.features)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        });
        let mut subject_rows = Vec::new();
        let mut start = 0;
        for i in 1..=rows.len() {
            if i == rows.len() || rows[i].subject != rows[start].subject {
                subject_rows.push((start, i));
                start = i;
            }
        }
        Ok(Self { rows, subject_rows, p: table.names.len() })
    }

    /// Row indices of the subjects drawn for one tree.
    fn sample(&self, rng: &mut ChaCha8Rng, hyper: &Hyperparams) -> Vec<u32> {
        if !hyper.bootstrap {
            return (0..self.rows.len() as u32).collect();
        }
        let n = self.subject_rows.len();
        let m = ((n as f64 * hyper.sample_fraction).round() as usize).clamp(1, n);
        let subjects: Vec<usize> = if hyper.replace {
            (0..m).map(|_| rng.random_range(0..n)).collect()
        } else {
            let mut s = rand::seq::index::sample(rng, n, m).into_vec();
            s.sort_unstable();
            s
        };
        let mut out = Vec::new();
        for s in subjects {
            let (a, b) = self.subject_rows[s];
            out.extend(a as u32..b as u32);
        }
        out
    }
}

fn tree_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent 64-bit seed for sub-task `index` of kind `tag`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.rotate_left(32));
    rng.set_stream(index);
    rng.random()
}

pub fn fit_csf(table: &FeatureTable, hyper: &Hyperparams, seed: u64) -> Result<ForestModel> {
    if table.rows.iter().any(|r| r.entry != 0) {
        return Err(invalid("CSF requires static rows with entry 0"));
    }
    fit_forest(Algorithm::Csf, table, hyper, seed)
}

pub fn fit_ltrc_cif(table: &FeatureTable, hyper: &Hyperparams, seed: u64) -> Result<ForestModel> {
    fit_forest(Algorithm::LtrcCif, table, hyper, seed)
}

pub fn fit_ltrc_rrf(table: &FeatureTable, hyper: &Hyperparams, seed: u64) -> Result<ForestModel> {
    fit_forest(Algorithm::LtrcRrf, table, hyper, seed)
}

pub fn fit(algorithm: Algorithm, table: &FeatureTable, hyper: &Hyperparams, seed: u64) -> Result<ForestModel> {
    match algorithm {
        Algorithm::Csf => fit_csf(table, hyper, seed),
        Algorithm::LtrcCif => fit_ltrc_cif(table, hyper, seed),
        Algorithm::LtrcRrf => fit_ltrc_rrf(table, hyper, seed),
    }
}

/// Labels the panel, builds the training table and fits.
pub fn fit_panel(panel: &CohortPanel, spec: &ModelSpec, seed: u64) -> Result<ForestModel> {
    let labeled = label_churn(panel, spec.data.churn_k)?;
    let table = spec.data.table(panel, &labeled, spec.algorithm)?;
    let mut model = fit(spec.algorithm, &table, &spec.hyper, seed)?;
    model.data = Some(spec.data.clone());
    Ok(model)
}

fn fit_forest(algorithm: Algorithm, table: &FeatureTable, hyper: &Hyperparams, seed: u64) -> Result<ForestModel> {
    hyper.validate()?;
    let data = TrainData::new(table)?;
    if data.subject_rows.len() < hyper.min_node_size.clamp(1, 2) {
        return Err(invalid("too few subjects to fit a forest"));
    }
    let grown: Vec<(Tree, Vec<f64>)> = (0..hyper.ntree)
        .into_par_iter()
        .map(|b| {
            let mut rng = tree_rng(seed, b as u64);
            let sample = data.sample(&mut rng, hyper);
            grow_tree(algorithm, &data, sample, hyper, &mut rng)
        })
        .collect();
    let mut split_importance = vec![0.0; data.p];
    let mut trees = Vec::with_capacity(grown.len());
    for (tree, imp) in grown {
        for (a, v) in split_importance.iter_mut().zip(imp) {
            *a += v;
        }
        trees.push(tree);
    }
    for v in &mut split_importance {
        *v /= hyper.ntree as f64;
    }
    if trees.iter().all(|t| t.nodes.len() == 1) {
        log::warn!("{algorithm}: every tree is a single root node (no feature passed the split test)");
    }
    Ok(ForestModel {
        algorithm,
        hyper: hyper.clone(),
        seed,
        feature_names: table.names.clone(),
        trees,
        split_importance,
        data: None,
    })
}

struct NodeTask {
    id: usize,
    rows: Vec<u32>,
}

fn grow_tree(
    algorithm: Algorithm,
    data: &TrainData,
    sample: Vec<u32>,
    hyper: &Hyperparams,
    rng: &mut ChaCha8Rng,
) -> (Tree, Vec<f64>) {
    let obs_of = |i: u32| data.rows[i as usize].obs();
    let (baseline, expected) = if algorithm == Algorithm::LtrcRrf {
        let obs: Vec<SurvivalObservation> = sample.iter().map(|&i| obs_of(i)).collect();
        let h0 = na_unchecked(&obs);
        let mut e = vec![0.0; data.rows.len()];
        for &i in &sample {
            let o = obs_of(i);
            e[i as usize] = h0.at(o.exit) - h0.at(o.entry);
        }
        (Some(h0), e)
    } else {
        (None, Vec::new())
    };

    let mut nodes: Vec<Option<Node>> = vec![None];
    let mut importance = vec![0.0; data.p];
    let mut stack = vec![NodeTask { id: 0, rows: sample }];
    let mtry = hyper.mtry_for(data.p);

    while let Some(NodeTask { id, rows }) = stack.pop() {
        let scores = match algorithm {
            Algorithm::LtrcRrf => rows.iter().map(|&i| data.rows[i as usize].event as u8 as f64 - expected[i as usize]).collect(),
            _ => logrank_scores(data, &rows),
        };
        let decision = choose_split(algorithm, data, &rows, &scores, &expected, hyper, mtry, rng);
        match decision {
            Some(split) => {
                importance[split.feature] += split.statistic;
                let (l, r): (Vec<u32>, Vec<u32>) =
                    rows.iter().partition(|&&i| data.rows[i as usize].features[split.feature] <= split.threshold);
                let left = nodes.len();
                nodes.push(None);
                nodes.push(None);
                nodes[id] = Some(Node::Split {
                    feature: split.feature,
                    threshold: split.threshold,
                    statistic: split.statistic,
                    p_value: split.p_value,
                    left: left as u32,
                    right: left as u32 + 1,
                });
                // Right pushed first so the left subtree is grown first.
                stack.push(NodeTask { id: left + 1, rows: r });
                stack.push(NodeTask { id: left, rows: l });
            }
            None => {
                let leaf = match algorithm {
                    Algorithm::LtrcRrf => {
                        let events: f64 = rows.iter().filter(|&&i| data.rows[i as usize].event).count() as f64;
                        let exp: f64 = rows.iter().map(|&i| expected[i as usize]).sum();
                        let risk = if exp > 0.0 { events / exp } else { 1.0 };
                        Leaf::RelativeRisk { risk, events, expected: exp }
                    }
                    _ => {
                        let obs: Vec<SurvivalObservation> = rows.iter().map(|&i| obs_of(i)).collect();
                        Leaf::Km(KmLeaf::from_obs(&obs))
                    }
                };
                nodes[id] = Some(Node::Leaf { n_rows: rows.len(), leaf });
            }
        }
    }
    let nodes = nodes.into_iter().map(|n| n.expect("every node is resolved")).collect();
    (Tree { nodes, baseline }, importance)
}

/// Log-rank scores `delta - (H(exit) - H(entry))` under the node's Nelson–Aalen estimate.
fn logrank_scores(data: &TrainData, rows: &[u32]) -> Vec<f64> {
    let obs: Vec<SurvivalObservation> = rows.iter().map(|&i| data.rows[i as usize].obs()).collect();
    let h = na_unchecked(&obs);
    obs.iter()
        .map(|o| o.event as u8 as f64 - (h.at(o.exit) - h.at(o.entry)))
        .collect()
}

struct Split {
    feature: usize,
    threshold: f64,
    statistic: f64,
    p_value: f64,
}

#[allow(clippy::too_many_arguments)]
fn choose_split(
    algorithm: Algorithm,
    data: &TrainData,
    rows: &[u32],
    scores: &[f64],
    expected: &[f64],
    hyper: &Hyperparams,
    mtry: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Split> {
    let n = rows.len();
    let has_event = rows.iter().any(|&i| data.rows[i as usize].event);
    if n < hyper.min_node_size || n < 2 * hyper.min_leaf || !has_event {
        return None;
    }
    let mut candidates: Vec<usize> = rand::seq::index::sample(rng, data.p, mtry).into_vec();
    candidates.sort_unstable();

    let mut best: Option<(f64, usize)> = None;
    for &j in &candidates {
        let x: Vec<f64> = rows.iter().map(|&i| data.rows[i as usize].features[j]).collect();
        let p = association_p_value(&x, scores, hyper, rng);
        if best.is_none_or(|(bp, _)| p < bp) {
            best = Some((p, j));
        }
    }
    let (p_min, feature) = best?;
    let adjusted = (p_min * mtry as f64).min(1.0);
    if adjusted > hyper.alpha {
        return None;
    }
    let x: Vec<f64> = rows.iter().map(|&i| data.rows[i as usize].features[feature]).collect();
    let (threshold, statistic) = match algorithm {
        Algorithm::LtrcRrf => {
            let events: Vec<f64> = rows.iter().map(|&i| data.rows[i as usize].event as u8 as f64).collect();
            let exp: Vec<f64> = rows.iter().map(|&i| expected[i as usize]).collect();
            best_poisson_split(&x, &events, &exp, hyper)?
        }
        _ => best_logrank_split(&x, scores, hyper)?,
    };
    Some(Split { feature, threshold, statistic, p_value: adjusted })
}

/// Two-sided p-value of the standardized linear statistic `sum x_i a_i`
/// under permutation of the scores.
fn association_p_value(x: &[f64], a: &[f64], hyper: &Hyperparams, rng: &mut ChaCha8Rng) -> f64 {
    let n = x.len() as f64;
    let sum_x: f64 = x.iter().sum();
    let mean_a = a.iter().sum::<f64>() / n;
    let var_a = a.iter().map(|v| (v - mean_a).powi(2)).sum::<f64>() / n;
    let mean_x = sum_x / n;
    let ss_x: f64 = x.iter().map(|v| (v - mean_x).powi(2)).sum();
    let variance = n / (n - 1.0) * var_a * ss_x;
    // Written negated so a NaN variance also counts as degenerate.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let degenerate = !(variance > 1e-12 * (1.0 + var_a * n));
    if degenerate || ss_x <= 0.0 {
        return 1.0;
    }
    let mu = sum_x * mean_a;
    let t: f64 = x.iter().zip(a).map(|(xi, ai)| xi * ai).sum();
    let dev = (t - mu).abs();
    if x.len() < hyper.exact_below && hyper.permutations > 0 {
        let mut perm = a.to_vec();
        let tol = dev * 1e-9;
        let mut hits = 0usize;
        for _ in 0..hyper.permutations {
            perm.shuffle(rng);
            let tp: f64 = x.iter().zip(&perm).map(|(xi, ai)| xi * ai).sum();
            if (tp - mu).abs() >= dev - tol {
                hits += 1;
            }
        }
        (hits + 1) as f64 / (hyper.permutations + 1) as f64
    } else {
        erfc(dev / variance.sqrt() / std::f64::consts::SQRT_2)
    }
}

/// Candidate thresholds: distinct values (or up to `k` quantiles), excluding the maximum.
fn candidate_thresholds(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut distinct: Vec<f64> = sorted.to_vec();
    distinct.dedup();
    let mut out: Vec<f64> = if distinct.len() <= k + 1 {
        distinct
    } else {
        (1..=k).map(|q| sorted[q * n / (k + 1)]).collect()
    };
    out.dedup();
    let max = sorted[n - 1];
    out.retain(|&c| c < max);
    out
}

fn sorted_order(x: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    order
}

/// Maximizes the two-sample log-rank statistic in score form:
/// `(S_L - n_L mean)^2 / Var` with the permutation variance of `S_L`.
fn best_logrank_split(x: &[f64], a: &[f64], hyper: &Hyperparams) -> Option<(f64, f64)> {
    let n = x.len();
    let order = sorted_order(x);
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let mut prefix = vec![0.0; n + 1];
    for (k, &i) in order.iter().enumerate() {
        prefix[k + 1] = prefix[k] + a[i];
    }
    let nf = n as f64;
    let mean = prefix[n] / nf;
    let ss: f64 = a.iter().map(|v| (v - mean).powi(2)).sum();
    if ss <= 0.0 {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for c in candidate_thresholds(&xs, hyper.max_split_candidates) {
        let nl = xs.partition_point(|&v| v <= c);
        let nr = n - nl;
        if nl < hyper.min_leaf || nr < hyper.min_leaf {
            continue;
        }
        let var = nl as f64 * nr as f64 / (nf * (nf - 1.0)) * ss;
        let stat = (prefix[nl] - nl as f64 * mean).powi(2) / var;
        if best.is_none_or(|(_, s)| stat > s) {
            best = Some((c, stat));
        }
    }
    best
}

fn poisson_loglik(d: f64, e: f64) -> f64 {
    if d > 0.0 {
        d * (d / e).ln()
    } else {
        0.0
    }
}

/// Maximizes the Poisson deviance reduction with offsets `log e`. Children
/// with zero expected events are not allowed.
fn best_poisson_split(x: &[f64], d: &[f64], e: &[f64], hyper: &Hyperparams) -> Option<(f64, f64)> {
    let n = x.len();
    let order = sorted_order(x);
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let mut pd = vec![0.0; n + 1];
    let mut pe = vec![0.0; n + 1];
    for (k, &i) in order.iter().enumerate() {
        pd[k + 1] = pd[k] + d[i];
        pe[k + 1] = pe[k] + e[i];
    }
    let (dt, et) = (pd[n], pe[n]);
    if et <= 0.0 {
        return None;
    }
    let parent = poisson_loglik(dt, et);
    let mut best: Option<(f64, f64)> = None;
    for c in candidate_thresholds(&xs, hyper.max_split_candidates) {
        let nl = xs.partition_point(|&v| v <= c);
        if nl < hyper.min_leaf || n - nl < hyper.min_leaf {
            continue;
        }
        let (dl, el) = (pd[nl], pe[nl]);
        let (dr, er) = (dt - dl, et - el);
        if el <= 0.0 || er <= 0.0 {
            continue;
        }
        let gain = 2.0 * (poisson_loglik(dl, el) + poisson_loglik(dr, er) - parent);
        if best.is_none_or(|(_, g)| gain > g) {
            best = Some((c, gain));
        }
    }
    best.filter(|(_, g)| *g > 0.0)
}

impl ForestModel {
    /// Survival of one subject at non-decreasing `times`. `rows` are the
    /// subject's consecutive intervals; the last one extends past its exit.
    pub fn predict_subject(&self, rows: &[FeatureRow], times: &[u32]) -> Vec<f64> {
        let mut rows: Vec<&FeatureRow> = rows.iter().collect();
        rows.sort_by_key(|r| r.entry);
        let last = rows.len().saturating_sub(1);
        let ntree = self.trees.len() as f64;
        match self.algorithm {
            Algorithm::LtrcRrf => {
                let mut acc = vec![0.0; times.len()];
                for tree in &self.trees {
                    let h0 = tree.baseline.as_ref().expect("relative-risk trees carry a baseline");
                    let mut cum = vec![0.0; times.len()];
                    for (j, r) in rows.iter().enumerate() {
                        let Leaf::RelativeRisk { risk, .. } = tree.leaf_for(&r.features) else {
                            unreachable!("relative-risk forest with a KM leaf")
                        };
                        let h_entry = h0.at(r.entry);
                        for (c, &t) in cum.iter_mut().zip(times) {
                            if t > r.entry {
                                let u = if j == last { t } else { t.min(r.exit) };
                                *c += risk * (h0.at(u) - h_entry);
                            }
                        }
                    }
                    for (a, c) in acc.iter_mut().zip(cum) {
                        *a += (-c).exp();
                    }
                }
                acc.into_iter().map(|v| v / ntree).collect()
            }
            _ => {
                let mut out = vec![1.0; times.len()];
                for (j, r) in rows.iter().enumerate() {
                    let queries: Vec<u32> = times
                        .iter()
                        .map(|&t| if j == last { t } else { t.min(r.exit) })
                        .collect();
                    let mut acc = vec![0.0; times.len()];
                    for tree in &self.trees {
                        let Leaf::Km(leaf) = tree.leaf_for(&r.features) else {
                            unreachable!("KM forest with a relative-risk leaf")
                        };
                        leaf.accumulate_conditional(r.entry, &queries, &mut acc);
                    }
                    for ((o, a), &t) in out.iter_mut().zip(acc).zip(times) {
                        if t > r.entry {
                            *o *= a / ntree;
                        }
                    }
                }
                out
            }
        }
    }

    /// Survival curve of one subject on days `0..=horizon`, compressed to its knots.
    pub fn predict_curve(&self, rows: &[FeatureRow], horizon: u32) -> SurvivalCurve {
        let times: Vec<u32> = (0..=horizon).collect();
        let s = self.predict_subject(rows, &times);
        let mut curve = SurvivalCurve { times: vec![0], survival: vec![s[0].min(1.0)], lower: None, upper: None };
        for (t, v) in times.iter().zip(&s).skip(1) {
            let v = v.min(*curve.survival.last().unwrap());
            if v < *curve.survival.last().unwrap() {
                curve.times.push(*t);
                curve.survival.push(v);
            }
        }
        curve
    }

    /// Predictions for every subject of a table at `times`, in subject order.
    pub fn predict_table(&self, table: &FeatureTable, times: &[u32]) -> Vec<Vec<f64>> {
        let mut by_subject: Vec<Vec<FeatureRow>> = vec![Vec::new(); table.subjects.len()];
        for r in &table.rows {
            by_subject[r.subject as usize].push(r.clone());
        }
        by_subject.par_iter().map(|rows| self.predict_subject(rows, times)).collect()
    }

    /// Ensemble relative risk of a covariate vector (relative-risk forests only).
    pub fn relative_risk(&self, x: &[f64]) -> Option<f64> {
        if self.algorithm != Algorithm::LtrcRrf {
            return None;
        }
        let total: f64 = self
            .trees
            .iter()
            .map(|t| match t.leaf_for(x) {
                Leaf::RelativeRisk { risk, .. } => *risk,
                Leaf::Km(_) => 1.0,
            })
            .sum();
        Some(total / self.trees.len() as f64)
    }

    /// Predicted survival of a panel user at their lifetime on the panel day `as_of`.
    pub fn survival_at(&self, user: &UserPanel, as_of: chrono::NaiveDate) -> Result<f64> {
        let data = self.data.as_ref().ok_or_else(|| invalid("model has no data spec"))?;
        let idx = user
            .day_index(as_of)
            .ok_or_else(|| invalid(format!("user {} has no panel row on {as_of}", user.user_id)))?;
        if idx == 0 {
            return Ok(1.0);
        }
        let rows = data.user_rows(user, idx as u32, self.algorithm)?;
        Ok(self.predict_subject(&rows, &[idx as u32])[0])
    }
}

const MAGIC: &[u8; 8] = b"ENGFRST\0";
const FORMAT_VERSION: u16 = 1;

pub fn write_model<W: Write>(model: &ForestModel, mut out: W) -> Result<()> {
    let payload = serde_json::to_vec(model)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(payload.len() as u64).to_le_bytes())?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<ForestModel> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::ModelFormat("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::ModelFormat("not a forest model file".into()));
    }
    let mut v = [0u8; 2];
    input.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut payload = vec![0u8; len];
    input
        .read_exact(&mut payload)
        .map_err(|_| Error::ModelFormat("truncated payload".into()))?;
    Ok(serde_json::from_slice(&payload)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub test_events: usize,
    pub ibs: f64,
    /// IBS of the training-set Kaplan–Meier curve on the same held-out users.
    pub null_ibs: f64,
    pub grid: Vec<u32>,
    pub brier: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    /// Held-out IBS increase after permuting a feature.
    Permutation,
    /// Sum of split criteria.
    SplitStatistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub bootstrap_rounds: usize,
    pub split: f64,
    pub rounds: Vec<RoundReport>,
    pub skipped_rounds: Vec<usize>,
    pub ibs_boot_avg: f64,
    pub null_ibs_avg: f64,
    pub importance_kind: ImportanceKind,
    pub importances: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bootstrap: usize,
    pub split: f64,
    pub permutation_importance: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { bootstrap: 25, split: 0.75, permutation_importance: true }
    }
}

const SPLIT_TAG: u64 = 0x5350_4c49;
const FIT_TAG: u64 = 0x4649_5421;
const PERM_TAG: u64 = 0x5045_524d;

/// User-level train/test split of `n` subjects for one round.
pub fn round_split(n: usize, split: f64, seed: u64, round: usize) -> (Vec<u32>, Vec<u32>) {
    let mut ids: Vec<u32> = (0..n as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_TAG, round as u64));
    ids.shuffle(&mut rng);
    let n_train = ((n as f64 * split).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = ids.split_off(n_train);
    (ids, test)
}

/// Seed used to fit the model of a round.
pub fn round_fit_seed(seed: u64, round: usize) -> u64 {
    derive_seed(seed, FIT_TAG, round as u64)
}

/// Held-out IBS of a fitted model on the given subjects of `table`.
pub fn heldout_ibs(model: &ForestModel, table: &FeatureTable, obs: &[SurvivalObservation]) -> Result<(Vec<u32>, Vec<f64>, f64)> {
    let grid = ibs_grid(obs)?;
    let preds = model.predict_table(table, &grid);
    let bs = brier_curve_with(obs, &grid, |i, t| preds[i][grid.partition_point(|&g| g < t)])?;
    let ibs = integrated_brier_score(&grid, &bs)?;
    Ok((grid, bs, ibs))
}

/// IBS of the training-set Kaplan–Meier curve applied to every held-out subject.
pub fn null_ibs(train: &[SurvivalObservation], test: &[SurvivalObservation]) -> Result<f64> {
    let km = km_unchecked(train);
    let grid = ibs_grid(test)?;
    let bs = brier_curve_with(test, &grid, |_, t| km.at(t))?;
    integrated_brier_score(&grid, &bs)
}

/// Repeated user-level train/test evaluation.
pub fn bootstrap_evaluate(panel: &CohortPanel, spec: &ModelSpec, opts: &EvalOptions, seed: u64) -> Result<EvaluationReport> {
    let labeled = label_churn(panel, spec.data.churn_k)?;
    let table = spec.data.table(panel, &labeled, spec.algorithm)?;
    evaluate_table(&table, &labeled.observations(), spec, opts, seed)
}

/// [`bootstrap_evaluate`] on a prepared table; `obs[i]` labels subject `i`.
pub fn evaluate_table(
    table: &FeatureTable,
    obs: &[SurvivalObservation],
    spec: &ModelSpec,
    opts: &EvalOptions,
    seed: u64,
) -> Result<EvaluationReport> {
    if opts.bootstrap == 0 {
        return Err(invalid("at least one bootstrap round is required"));
    }
    if !(opts.split > 0.0 && opts.split < 1.0) {
        return Err(invalid("split must lie in (0, 1)"));
    }
    if obs.len() != table.subjects.len() {
        return Err(invalid("one label per table subject is required"));
    }
    let p = table.names.len();
    let mut rounds = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    let mut importance = vec![0.0; p];
    for round in 0..opts.bootstrap {
        let (train_ids, test_ids) = round_split(obs.len(), opts.split, seed, round);
        let test_obs: Vec<SurvivalObservation> = test_ids.iter().map(|&i| obs[i as usize]).collect();
        let test_events = test_obs.iter().filter(|o| o.event).count();
        if test_events == 0 {
            warnings.push(format!("round {round} skipped: no held-out events"));
            log::warn!("round {round} skipped: no held-out events");
            skipped.push(round);
            continue;
        }
        let train_obs: Vec<SurvivalObservation> = train_ids.iter().map(|&i| obs[i as usize]).collect();
        let train = table.subset(&train_ids);
        let test = table.subset(&test_ids);
        let model = fit(spec.algorithm, &train, &spec.hyper, round_fit_seed(seed, round))?;
        let (grid, brier, ibs) = heldout_ibs(&model, &test, &test_obs)?;
        if opts.permutation_importance {
            for (j, imp) in importance.iter_mut().enumerate() {
                let mut permuted = test.clone();
                let mut column: Vec<f64> = permuted.rows.iter().map(|r| r.features[j]).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PERM_TAG, (round * p + j) as u64));
                column.shuffle(&mut rng);
                for (r, v) in permuted.rows.iter_mut().zip(column) {
                    r.features[j] = v;
                }
                *imp += heldout_ibs(&model, &permuted, &test_obs)?.2 - ibs;
            }
        } else {
            for (a, v) in importance.iter_mut().zip(&model.split_importance) {
                *a += v;
            }
        }
        rounds.push(RoundReport {
            round,
            n_train: train_ids.len(),
            n_test: test_ids.len(),
            test_events,
            ibs,
            null_ibs: null_ibs(&train_obs, &test_obs)?,
            grid,
            brier,
        });
    }
    if rounds.is_empty() {
        return Err(Error::NoUsableRounds);
    }
    let k = rounds.len() as f64;
    Ok(EvaluationReport {
        algorithm: spec.algorithm,
        seed,
        bootstrap_rounds: opts.bootstrap,
        split: opts.split,
        ibs_boot_avg: rounds.iter().map(|r| r.ibs).sum::<f64>() / k,
        null_ibs_avg: rounds.iter().map(|r| r.null_ibs).sum::<f64>() / k,
        rounds,
        skipped_rounds: skipped,
        importance_kind: if opts.permutation_importance {
            ImportanceKind::Permutation
        } else {
            ImportanceKind::SplitStatistic
        },
        importances: table.names.iter().cloned().zip(importance.into_iter().map(|v| v / k)).collect(),
        warnings,
    })
}

/// The `m` most important features, ties broken by name. Asking for more
/// features than exist returns all of them with a warning.
pub fn select_top_features(report: &EvaluationReport, m: usize) -> Result<(Vec<String>, Option<String>)> {
    if m == 0 {
        return Err(invalid("m must be at least 1"));
    }
    let mut ranked = report.importances.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let warning = (m > ranked.len()).then(|| format!("requested {m} features but only {} exist", ranked.len()));
    Ok((ranked.into_iter().take(m).map(|(n, _)| n).collect(), warning))
}
