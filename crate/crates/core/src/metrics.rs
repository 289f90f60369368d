//! Edge-detection metrics for attention-derived scores and decoding-quality metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{
    decode, DecodeTrace, Denoiser, DenoiserOutput, DependencySignal, SequenceState, StrategyConfig, Symbol,
};
use crate::depgraph::{aggregate_attention, symmetrize_scores, EdgeScoreMatrix, DEFAULT_TOP_LAYER_FRACTION};
use crate::error::{DapdError, Result};
use crate::oracle::{ground_truth_subgraph, induced_degrees};
use crate::toymdm::{is_valid_sequence, NUM_SYMBOLS, SEQ_LEN};

/// Rank-based (Mann-Whitney) AUC; tied scores count one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DapdError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DapdError::InvalidArgument("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DapdError::AucUndefined);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean edge score over mean non-edge score.
pub fn edge_ratio(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DapdError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mean = |want: bool| {
        let v: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .map(|(&s, _)| s)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let edge = mean(true).ok_or(DapdError::RatioUndefined("no edges"))?;
    let non = mean(false).ok_or(DapdError::RatioUndefined("no non-edges"))?;
    if non <= 0.0 {
        return Err(DapdError::RatioUndefined("non-edge mean is zero"));
    }
    Ok(edge / non)
}

/// Order violation rate: pairs with `d_i < d_j` but `proxy_i > proxy_j`, over all `C(n, 2)` pairs.
pub fn ovr(proxy: &[f64], true_deg: &[usize]) -> Result<f64> {
    if proxy.len() != true_deg.len() {
        return Err(DapdError::Shape(format!(
            "{} proxy degrees for {} true degrees",
            proxy.len(),
            true_deg.len()
        )));
    }
    let n = proxy.len();
    if n < 2 {
        return Err(DapdError::InvalidArgument("OVR needs at least two nodes".into()));
    }
    let mut violations = 0usize;
    for i in 0..n {
        for j in 0..n {
            if true_deg[i] < true_deg[j] && proxy[i] > proxy[j] {
                violations += 1;
            }
        }
    }
    Ok(violations as f64 / (n * (n - 1) / 2) as f64)
}

/// Independent per-item seed, so results do not depend on how work is split.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Maps `f` over `0..n` on up to `workers` threads; output is in index order.
pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

fn sample_symbol<R: Rng>(marginal: &[f64], rng: &mut R) -> Symbol {
    let mut u = rng.random::<f64>() * marginal.iter().sum::<f64>();
    let mut last = 0;
    for (s, &p) in marginal.iter().enumerate() {
        if p > 0.0 {
            last = s;
            if u < p {
                return s as Symbol;
            }
            u -= p;
        }
    }
    last as Symbol
}

/// Unmasks one uniformly chosen position per step, sampling its token from the
/// denoiser's marginal. `visit` sees each step's state and output before the commit.
/// Stops after `max_steps` forward passes or when the sequence is complete.
pub fn walk_random_order<D, R, V>(
    denoiser: &D,
    initial: &SequenceState,
    rng: &mut R,
    max_steps: usize,
    mut visit: V,
) -> Result<SequenceState>
where
    D: Denoiser + ?Sized,
    R: Rng,
    V: FnMut(usize, &SequenceState, &DenoiserOutput) -> Result<()>,
{
    let mut state = initial.clone();
    let mut step = 0;
    while !state.is_complete() && step < max_steps {
        step += 1;
        let out = denoiser.denoise(&state)?;
        out.validate(&state)?;
        visit(step, &state, &out)?;
        let k = rng.random_range(0..out.positions.len());
        let sym = sample_symbol(&out.marginals[k], rng);
        state.unmask(out.positions[k], sym)?;
    }
    Ok(state)
}

/// Draws one complete sequence by random-order ancestral sampling.
pub fn sample_random_order<D: Denoiser + ?Sized>(
    denoiser: &D,
    initial: &SequenceState,
    seed: u64,
) -> Result<Vec<Symbol>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = walk_random_order(denoiser, initial, &mut rng, usize::MAX, |_, _, _| Ok(()))?;
    Ok(state.completed().expect("walk runs to completion"))
}

/// Edge scores over the masked positions of one forward pass.
pub fn edge_scores_of(out: &DenoiserOutput, top_layer_fraction: f64) -> Result<EdgeScoreMatrix> {
    match &out.dependency {
        DependencySignal::Attention(stack) => {
            symmetrize_scores(&aggregate_attention(stack, top_layer_fraction)?, &out.positions)
        }
        DependencySignal::EdgeScores(m) => symmetrize_scores(m, &out.positions),
        DependencySignal::None => Err(DapdError::MalformedOutput(
            "denoiser provides no dependency signal".into(),
        )),
    }
}

/// Number of decoding steps scored per path. Later steps leave at most one pair.
pub const EVAL_STEPS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEvalConfig {
    pub paths: usize,
    pub seed: u64,
    pub top_layer_fraction: f64,
    pub workers: usize,
}

impl Default for GraphEvalConfig {
    fn default() -> Self {
        Self {
            paths: 100,
            seed: 0,
            top_layer_fraction: DEFAULT_TOP_LAYER_FRACTION,
            workers: 1,
        }
    }
}

/// Metrics of one step on one path. AUC and ratio are absent when only one edge class remains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub step: usize,
    pub auc: Option<f64>,
    pub ratio: Option<f64>,
    pub ovr: f64,
    pub edges: usize,
    pub non_edges: usize,
}

/// Scores one forward pass against the ground-truth graph on its masked set.
pub fn score_step(step: usize, out: &DenoiserOutput, top_layer_fraction: f64) -> Result<StepSample> {
    let scores = edge_scores_of(out, top_layer_fraction)?;
    let truth = ground_truth_subgraph(&out.positions)?;
    let (mut values, mut labels) = (Vec::new(), Vec::new());
    for (i, j, s) in scores.pairs() {
        values.push(s);
        labels.push(truth.is_adjacent(i, j));
    }
    let proxy: Vec<f64> = (0..scores.len())
        .map(|i| (0..scores.len()).filter(|&j| j != i).map(|j| scores.get(i, j)).sum())
        .collect();
    let edges = labels.iter().filter(|&&l| l).count();
    Ok(StepSample {
        step,
        auc: roc_auc(&values, &labels).ok(),
        ratio: edge_ratio(&values, &labels).ok(),
        ovr: ovr(&proxy, &induced_degrees(&out.positions))?,
        edges,
        non_edges: labels.len() - edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub auc: f64,
    pub ratio: f64,
    pub ovr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub auc: Option<f64>,
    pub auc_std: Option<f64>,
    pub auc_n: usize,
    pub ratio: Option<f64>,
    pub ratio_std: Option<f64>,
    pub ratio_n: usize,
    pub ovr: f64,
    pub ovr_std: f64,
    pub ovr_n: usize,
    pub mean_edges: f64,
    pub mean_non_edges: f64,
}

/// Per-step averages over paths, their mean over steps (`overall`) and the
/// mean over every scored (path, step) pair (`pooled`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEvalReport {
    pub paths: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub per_step: Vec<StepSummary>,
    pub overall: MetricTriple,
    pub pooled: MetricTriple,
    #[serde(skip)]
    samples: Vec<StepSample>,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    Some((m, var.sqrt()))
}

fn mean(v: &[f64]) -> f64 {
    mean_std(v).map_or(f64::NAN, |(m, _)| m)
}

impl GraphEvalReport {
    pub fn from_samples(paths: usize, seed: u64, seeds: Vec<u64>, samples: Vec<StepSample>) -> Self {
        let mut per_step = Vec::new();
        for step in 1..=EVAL_STEPS {
            let at: Vec<&StepSample> = samples.iter().filter(|s| s.step == step).collect();
            if at.is_empty() {
                continue;
            }
            let aucs: Vec<f64> = at.iter().filter_map(|s| s.auc).collect();
            let ratios: Vec<f64> = at.iter().filter_map(|s| s.ratio).collect();
            let ovrs: Vec<f64> = at.iter().map(|s| s.ovr).collect();
            let (ovr, ovr_std) = mean_std(&ovrs).expect("non-empty");
            per_step.push(StepSummary {
                step,
                auc: mean_std(&aucs).map(|x| x.0),
                auc_std: mean_std(&aucs).map(|x| x.1),
                auc_n: aucs.len(),
                ratio: mean_std(&ratios).map(|x| x.0),
                ratio_std: mean_std(&ratios).map(|x| x.1),
                ratio_n: ratios.len(),
                ovr,
                ovr_std,
                ovr_n: ovrs.len(),
                mean_edges: mean(&at.iter().map(|s| s.edges as f64).collect::<Vec<_>>()),
                mean_non_edges: mean(&at.iter().map(|s| s.non_edges as f64).collect::<Vec<_>>()),
            });
        }
        let overall = MetricTriple {
            auc: mean(&per_step.iter().filter_map(|s| s.auc).collect::<Vec<_>>()),
            ratio: mean(&per_step.iter().filter_map(|s| s.ratio).collect::<Vec<_>>()),
            ovr: mean(&per_step.iter().map(|s| s.ovr).collect::<Vec<_>>()),
        };
        let pooled = MetricTriple {
            auc: mean(&samples.iter().filter_map(|s| s.auc).collect::<Vec<_>>()),
            ratio: mean(&samples.iter().filter_map(|s| s.ratio).collect::<Vec<_>>()),
            ovr: mean(&samples.iter().map(|s| s.ovr).collect::<Vec<_>>()),
        };
        Self {
            paths,
            seed,
            seeds,
            per_step,
            overall,
            pooled,
            samples,
        }
    }

    /// Pools the paths of several runs (for example one per trained model).
    pub fn combine(reports: &[GraphEvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| DapdError::InvalidArgument("nothing to combine".into()))?;
        let paths = reports.iter().map(|r| r.paths).sum();
        let seeds = reports.iter().flat_map(|r| r.seeds.iter().copied()).collect();
        let samples = reports.iter().flat_map(|r| r.samples.iter().cloned()).collect();
        Ok(Self::from_samples(paths, first.seed, seeds, samples))
    }

    pub fn samples(&self) -> &[StepSample] {
        &self.samples
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per step, then `overall` and `pooled` rows.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::from(
            "step,auc,auc_std,auc_n,ratio,ratio_std,ratio_n,ovr,ovr_std,ovr_n,mean_edges,mean_non_edges\n",
        );
        for r in &self.per_step {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                opt(r.auc),
                opt(r.auc_std),
                r.auc_n,
                opt(r.ratio),
                opt(r.ratio_std),
                r.ratio_n,
                r.ovr,
                r.ovr_std,
                r.ovr_n,
                r.mean_edges,
                r.mean_non_edges
            )
            .unwrap();
        }
        for (name, m) in [("overall", self.overall), ("pooled", self.pooled)] {
            writeln!(s, "{name},{},,,{},,,{},,,,", m.auc, m.ratio, m.ovr).unwrap();
        }
        s
    }
}

/// Scores a denoiser's dependency signal against the ground-truth graph along
/// `paths` random-order decodes of the fully masked toy sequence, steps 1 to 7.
pub fn eval_graph_run<D: Denoiser + Sync + ?Sized>(
    denoiser: &D,
    cfg: &GraphEvalConfig,
    model_seeds: Vec<u64>,
) -> Result<GraphEvalReport> {
    if cfg.paths == 0 {
        return Err(DapdError::InvalidArgument("paths must be >= 1".into()));
    }
    let initial = SequenceState::masked(&[], SEQ_LEN);
    let per_path = par_map(cfg.paths, cfg.workers, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, p as u64));
        let mut samples = Vec::with_capacity(EVAL_STEPS);
        walk_random_order(denoiser, &initial, &mut rng, EVAL_STEPS, |step, _, out| {
            samples.push(score_step(step, out, cfg.top_layer_fraction)?);
            Ok(())
        })?;
        Ok(samples)
    })?;
    Ok(GraphEvalReport::from_samples(
        cfg.paths,
        cfg.seed,
        model_seeds,
        per_path.into_iter().flatten().collect(),
    ))
}

fn check_sequence(seq: &[Symbol]) -> Result<()> {
    if seq.len() != SEQ_LEN || seq.iter().any(|&s| s as usize >= NUM_SYMBOLS) {
        return Err(DapdError::InvalidArgument(format!("malformed toy sequence {seq:?}")));
    }
    Ok(())
}

/// Fraction of sequences satisfying all four constraints.
pub fn validity_rate<S: AsRef<[Symbol]>>(sequences: &[S]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(DapdError::InvalidArgument("no sequences".into()));
    }
    let mut valid = 0usize;
    for s in sequences {
        check_sequence(s.as_ref())?;
        valid += is_valid_sequence(s.as_ref()) as usize;
    }
    Ok(valid as f64 / sequences.len() as f64)
}

pub type Histogram = BTreeMap<Vec<Symbol>, u64>;

pub fn histogram<S: AsRef<[Symbol]>>(sequences: &[S]) -> Histogram {
    let mut h = Histogram::new();
    for s in sequences {
        *h.entry(s.as_ref().to_vec()).or_insert(0) += 1;
    }
    h
}

/// Total variation distance between an empirical histogram and the uniform
/// distribution over the 243 valid sequences.
pub fn tv_to_uniform(hist: &Histogram) -> f64 {
    let total: u64 = hist.values().sum();
    if total == 0 {
        return 1.0;
    }
    let p = 1.0 / 243.0;
    let mut sum = 0.0;
    let mut seen_valid = 0usize;
    for (seq, &c) in hist {
        let q = c as f64 / total as f64;
        if is_valid_sequence(seq) {
            seen_valid += 1;
            sum += (q - p).abs();
        } else {
            sum += q;
        }
    }
    sum += (243 - seen_valid) as f64 * p;
    sum / 2.0
}

/// A strategy to compare under a display label (for example `fullparallel`).
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub label: String,
    pub config: StrategyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub committer: String,
    pub samples: usize,
    pub mean_nfe: f64,
    pub validity: f64,
    pub tv: Option<f64>,
    pub mean_peak_segments: f64,
    /// Mean segment count after each step; shorter decodes hold their last value.
    pub mean_segments: Vec<f64>,
}

impl StrategySummary {
    pub fn from_traces(label: &str, config: &StrategyConfig, traces: &[DecodeTrace], with_tv: bool) -> Result<Self> {
        let finals: Vec<&[Symbol]> = traces.iter().map(|t| t.final_tokens.as_slice()).collect();
        let n = traces.len() as f64;
        let longest = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
        let mut mean_segments = vec![0.0; longest];
        for t in traces {
            let traj = t.segment_trajectory();
            for (k, slot) in mean_segments.iter_mut().enumerate() {
                *slot += *traj.get(k).or(traj.last()).unwrap_or(&0) as f64 / n;
            }
        }
        Ok(Self {
            strategy: label.to_string(),
            committer: format!("{:?}", config.committer).to_lowercase(),
            samples: traces.len(),
            mean_nfe: traces.iter().map(|t| t.nfe as f64).sum::<f64>() / n,
            validity: validity_rate(&finals)?,
            tv: with_tv.then(|| tv_to_uniform(&histogram(&finals))),
            mean_peak_segments: traces.iter().map(|t| t.peak_segments() as f64).sum::<f64>() / n,
            mean_segments,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub samples: usize,
    pub strategies: Vec<StrategySummary>,
}

impl CompareReport {
    pub fn strategy(&self, label: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per strategy; the trajectory is `;`-separated.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,committer,samples,mean_nfe,validity,tv,mean_peak_segments,mean_segments\n");
        for r in &self.strategies {
            let traj: Vec<String> = r.mean_segments.iter().map(|x| x.to_string()).collect();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.strategy,
                r.committer,
                r.samples,
                r.mean_nfe,
                r.validity,
                r.tv.map_or(String::new(), |x| x.to_string()),
                r.mean_peak_segments,
                traj.join(";")
            )
            .unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub samples: usize,
    pub seed: u64,
    pub workers: usize,
    pub with_tv: bool,
}

/// Decodes `samples` sequences per strategy from `initial`. Sample `i` uses the
/// same derived seed under every strategy.
pub fn compare_run<D: Denoiser + Sync + ?Sized>(
    denoiser: &D,
    runs: &[StrategyRun],
    initial: &SequenceState,
    cfg: &CompareConfig,
) -> Result<(CompareReport, Vec<Vec<DecodeTrace>>)> {
    if cfg.samples == 0 {
        return Err(DapdError::InvalidArgument("samples must be >= 1".into()));
    }
    let mut summaries = Vec::with_capacity(runs.len());
    let mut all = Vec::with_capacity(runs.len());
    for run in runs {
        let traces = par_map(cfg.samples, cfg.workers, |i| {
            let mut t = decode(denoiser, &run.config, initial, derive_seed(cfg.seed, i as u64))?.1;
            t.strategy = run.label.clone();
            Ok(t)
        })?;
        summaries.push(StrategySummary::from_traces(
            &run.label,
            &run.config,
            &traces,
            cfg.with_tv,
        )?);
        all.push(traces);
    }
    Ok((
        CompareReport {
            seed: cfg.seed,
            samples: cfg.samples,
            strategies: summaries,
        },
        all,
    ))
}
