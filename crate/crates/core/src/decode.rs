//! Iterative unmasking over any denoiser.
//!
//! Each step runs one forward pass, picks a set of masked positions with the
//! configured strategy, commits a token at every picked position, and records
//! the step. Strategies:
//!
//! - `sequential`: the single most confident position.
//! - `topk`: the `k` most confident positions.
//! - `conf_threshold`: every position whose confidence exceeds a threshold.
//! - `kl_stability`: confident positions whose marginal barely moved since the previous step.
//! - `dapd`: an independent set of the attention-induced dependency graph, scanned by
//!   confidence-weighted proxy degree; switches to `conf_threshold` once few masks remain.
//!
//! Every selector falls back to the single most confident position when its
//! filter comes up empty, so each step unmasks at least one token.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depgraph::{
    aggregate_attention, build_graph, segment_count, symmetrize_scores, tau_at, welsh_powell_select, AttentionStack,
    TauSchedule, DEFAULT_TOP_LAYER_FRACTION,
};
use crate::error::{DapdError, Result};
use crate::matrix::Matrix;

pub type Symbol = u32;

/// Partially masked sequence: a fixed prompt followed by a generation region.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceState {
    tokens: Vec<Option<Symbol>>,
    prompt_len: usize,
}

impl SequenceState {
    /// Prompt followed by `gen_len` masks.
    pub fn masked(prompt: &[Symbol], gen_len: usize) -> Self {
        let mut tokens: Vec<Option<Symbol>> = prompt.iter().map(|&s| Some(s)).collect();
        tokens.extend(std::iter::repeat_n(None, gen_len));
        Self {
            tokens,
            prompt_len: prompt.len(),
        }
    }

    pub fn from_tokens(tokens: Vec<Option<Symbol>>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(DapdError::InvalidArgument(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        if tokens[..prompt_len].iter().any(Option::is_none) {
            return Err(DapdError::InvalidArgument("prompt positions may not be masked".into()));
        }
        Ok(Self { tokens, prompt_len })
    }

    pub fn tokens(&self) -> &[Option<Symbol>] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn gen_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn gen_region(&self) -> std::ops::Range<usize> {
        self.prompt_len..self.tokens.len()
    }

    pub fn get(&self, i: usize) -> Option<Symbol> {
        self.tokens[i]
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i].is_none()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask_count() == 0
    }

    /// Commits `symbol` at a masked generation position. Unmasking is absorbing.
    pub fn unmask(&mut self, i: usize, symbol: Symbol) -> Result<()> {
        if i < self.prompt_len || i >= self.len() {
            return Err(DapdError::Internal(format!(
                "position {i} is outside the generation region"
            )));
        }
        if self.tokens[i].is_some() {
            return Err(DapdError::Internal(format!("position {i} is already unmasked")));
        }
        self.tokens[i] = Some(symbol);
        Ok(())
    }

    /// Fully unmasked token list, if no masks remain.
    pub fn completed(&self) -> Option<Vec<Symbol>> {
        self.tokens.iter().copied().collect()
    }

    /// Maximal runs of unmasked tokens inside `region`.
    pub fn segment_count(&self, region: std::ops::Range<usize>) -> Result<usize> {
        let unmasked: Vec<bool> = self.tokens.iter().map(Option::is_some).collect();
        segment_count(&unmasked, region)
    }
}

/// Signal from which the dependency graph is built.
#[derive(Debug, Clone, PartialEq)]
pub enum DependencySignal {
    /// Per-layer, per-head row-stochastic attention maps over the whole sequence.
    Attention(AttentionStack),
    /// Precomputed symmetric non-negative `L x L` pairwise scores.
    EdgeScores(Matrix),
    None,
}

/// One forward pass: marginals at the masked positions plus a dependency signal.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    /// Masked positions in ascending order; `marginals[k]` belongs to `positions[k]`.
    pub positions: Vec<usize>,
    pub marginals: Vec<Vec<f64>>,
    pub dependency: DependencySignal,
}

const MARGINAL_TOL: f64 = 1e-5;

impl DenoiserOutput {
    pub fn confidence(&self, k: usize) -> f64 {
        self.marginals[k].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn confidences(&self) -> Vec<f64> {
        (0..self.positions.len()).map(|k| self.confidence(k)).collect()
    }

    pub fn marginal_of(&self, position: usize) -> Option<&[f64]> {
        self.positions
            .iter()
            .position(|&p| p == position)
            .map(|k| self.marginals[k].as_slice())
    }

    /// Marginals must cover exactly the masked positions and each be a distribution.
    pub fn validate(&self, state: &SequenceState) -> Result<()> {
        let masked = state.masked_positions();
        if self.positions != masked {
            return Err(DapdError::MalformedOutput(format!(
                "marginals for positions {:?}, but masked positions are {masked:?}",
                self.positions
            )));
        }
        if self.marginals.len() != self.positions.len() {
            return Err(DapdError::MalformedOutput(format!(
                "{} marginals for {} positions",
                self.marginals.len(),
                self.positions.len()
            )));
        }
        for (p, m) in self.positions.iter().zip(&self.marginals) {
            let sum: f64 = m.iter().sum();
            if m.is_empty() || m.iter().any(|&x| x.is_nan() || x < 0.0) || (sum - 1.0).abs() > MARGINAL_TOL {
                return Err(DapdError::MalformedOutput(format!(
                    "marginal at position {p} is not a distribution (sum {sum})"
                )));
            }
        }
        match &self.dependency {
            DependencySignal::Attention(a) => {
                a.validate()?;
                if a.seq_len() != Some(state.len()) {
                    return Err(DapdError::MalformedOutput(format!(
                        "attention side {:?} does not match sequence length {}",
                        a.seq_len(),
                        state.len()
                    )));
                }
            }
            DependencySignal::EdgeScores(m) => {
                if m.rows() != state.len() || m.cols() != state.len() {
                    return Err(DapdError::MalformedOutput("edge score matrix has wrong shape".into()));
                }
            }
            DependencySignal::None => {}
        }
        Ok(())
    }
}

/// Anything that maps a partially masked state to marginals and a dependency signal.
pub trait Denoiser {
    fn denoise(&self, state: &SequenceState) -> Result<DenoiserOutput>;
}

impl<F> Denoiser for F
where
    F: Fn(&SequenceState) -> Result<DenoiserOutput>,
{
    fn denoise(&self, state: &SequenceState) -> Result<DenoiserOutput> {
        self(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Sequential,
    Topk,
    ConfThreshold,
    KlStability,
    Dapd,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Sequential,
        StrategyKind::Topk,
        StrategyKind::ConfThreshold,
        StrategyKind::KlStability,
        StrategyKind::Dapd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Sequential => "sequential",
            StrategyKind::Topk => "topk",
            StrategyKind::ConfThreshold => "conf_threshold",
            StrategyKind::KlStability => "kl_stability",
            StrategyKind::Dapd => "dapd",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = DapdError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                DapdError::InvalidArgument(format!(
                    "unknown strategy '{s}'; valid names: sequential, topk, conf_threshold, kl_stability, dapd, fullparallel"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Committer {
    Argmax,
    Sample,
}

impl FromStr for Committer {
    type Err = DapdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Committer::Argmax),
            "sample" => Ok(Committer::Sample),
            _ => Err(DapdError::InvalidArgument(format!(
                "unknown committer '{s}'; valid names: argmax, sample"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub k: usize,
    pub conf_thresh: f64,
    pub kl_thresh: f64,
    pub tau_schedule: TauSchedule,
    pub switch_mask_ratio: f64,
    pub top_layer_fraction: f64,
    pub committer: Committer,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Dapd,
            k: 2,
            conf_thresh: 0.9,
            kl_thresh: 0.001,
            tau_schedule: TauSchedule::default(),
            switch_mask_ratio: 0.5,
            top_layer_fraction: DEFAULT_TOP_LAYER_FRACTION,
            committer: Committer::Argmax,
        }
    }
}

impl StrategyConfig {
    pub fn of(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Resolves a strategy name on top of `base`. `fullparallel` is `topk` with `k = gen_len`.
    pub fn named(name: &str, base: &StrategyConfig, gen_len: usize) -> Result<Self> {
        if name == "fullparallel" {
            return Ok(Self {
                kind: StrategyKind::Topk,
                k: gen_len.max(1),
                ..base.clone()
            });
        }
        Ok(Self {
            kind: name.parse()?,
            ..base.clone()
        })
    }

    pub fn with_committer(mut self, committer: Committer) -> Self {
        self.committer = committer;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DapdError::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.conf_thresh) {
            return bad(format!("conf_thresh must be in [0, 1], got {}", self.conf_thresh));
        }
        if !(0.0..=1.0).contains(&self.kl_thresh) {
            return bad(format!("kl_thresh must be in [0, 1], got {}", self.kl_thresh));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.switch_mask_ratio > 0.0 && self.switch_mask_ratio <= 1.0) {
            return bad(format!(
                "switch_mask_ratio must be in (0, 1], got {}",
                self.switch_mask_ratio
            ));
        }
        if !(self.top_layer_fraction > 0.0 && self.top_layer_fraction <= 1.0) {
            return bad(format!(
                "top_layer_fraction must be in (0, 1], got {}",
                self.top_layer_fraction
            ));
        }
        TauSchedule::new(self.tau_schedule.tau_min, self.tau_schedule.tau_max)?;
        Ok(())
    }
}

/// Local index of the most confident entry; ties go to the lowest position.
fn argmax_confidence(out: &DenoiserOutput) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for k in 0..out.positions.len() {
        let c = out.confidence(k);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k)
}

fn fallback(out: &DenoiserOutput) -> Vec<usize> {
    argmax_confidence(out)
        .map(|k| vec![out.positions[k]])
        .unwrap_or_default()
}

pub fn select_sequential(out: &DenoiserOutput) -> Vec<usize> {
    fallback(out)
}

/// The `min(k, masked)` most confident positions, ascending.
pub fn select_topk(out: &DenoiserOutput, k: usize) -> Vec<usize> {
    let conf = out.confidences();
    let mut order: Vec<usize> = (0..out.positions.len()).collect();
    // Stable sort keeps lower positions first among equal confidences.
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    let mut picked: Vec<usize> = order.into_iter().take(k).map(|i| out.positions[i]).collect();
    picked.sort_unstable();
    picked
}

pub fn select_conf_threshold(out: &DenoiserOutput, thresh: f64) -> Vec<usize> {
    let picked: Vec<usize> = (0..out.positions.len())
        .filter(|&k| out.confidence(k) > thresh)
        .map(|k| out.positions[k])
        .collect();
    if picked.is_empty() {
        fallback(out)
    } else {
        picked
    }
}

const KL_EPS: f64 = 1e-10;

/// `KL(p || q)` after adding `1e-10` to every entry and renormalizing.
pub fn smoothed_kl(p: &[f64], q: &[f64]) -> f64 {
    let zp: f64 = p.iter().map(|x| x + KL_EPS).sum();
    let zq: f64 = q.iter().map(|x| x + KL_EPS).sum();
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let a = (a + KL_EPS) / zp;
            let b = (b + KL_EPS) / zq;
            a * (a / b).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn select_kl_stability(
    out: &DenoiserOutput,
    prev: Option<&DenoiserOutput>,
    conf_thresh: f64,
    kl_thresh: f64,
) -> Vec<usize> {
    let Some(prev) = prev else {
        return fallback(out);
    };
    let picked: Vec<usize> = (0..out.positions.len())
        .filter(|&k| {
            out.confidence(k) > conf_thresh
                && prev
                    .marginal_of(out.positions[k])
                    .is_some_and(|q| smoothed_kl(&out.marginals[k], q) < kl_thresh)
        })
        .map(|k| out.positions[k])
        .collect();
    if picked.is_empty() {
        fallback(out)
    } else {
        picked
    }
}

/// Outcome of one DAPD selection.
#[derive(Debug, Clone, PartialEq)]
pub struct DapdSelection {
    pub positions: Vec<usize>,
    /// Edge threshold used, or `None` in the confidence-threshold phase.
    pub tau: Option<f64>,
}

pub fn select_dapd(
    out: &DenoiserOutput,
    state: &SequenceState,
    cfg: &StrategyConfig,
    progress: f64,
) -> Result<DapdSelection> {
    let gen_len = state.gen_len().max(1);
    let mask_ratio = state.mask_count() as f64 / gen_len as f64;
    if mask_ratio < cfg.switch_mask_ratio {
        return Ok(DapdSelection {
            positions: select_conf_threshold(out, cfg.conf_thresh),
            tau: None,
        });
    }

    let scores = match &out.dependency {
        DependencySignal::Attention(stack) => {
            let agg = aggregate_attention(stack, cfg.top_layer_fraction)?;
            symmetrize_scores(&agg, &out.positions)?
        }
        DependencySignal::EdgeScores(m) => symmetrize_scores(m, &out.positions)?,
        DependencySignal::None => {
            return Err(DapdError::MalformedOutput(
                "dapd needs attention maps or edge scores from the denoiser".into(),
            ))
        }
    };
    let tau = tau_at(&cfg.tau_schedule, progress)?;
    let graph = build_graph(&scores, tau)?;
    let weights: Vec<f64> = graph
        .proxy_degree
        .iter()
        .zip(out.confidences())
        .map(|(d, c)| d * c)
        .collect();
    let set = welsh_powell_select(&graph, &weights)?;
    Ok(DapdSelection {
        positions: set.sorted(),
        tau: Some(tau),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub idx: usize,
    pub tau: Option<f64>,
    pub unmasked: Vec<usize>,
    pub tokens: Vec<Symbol>,
    pub confs: Vec<f64>,
    pub segments: usize,
}

/// Full record of one decode; serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub seed: u64,
    pub strategy: String,
    pub nfe: usize,
    pub steps: Vec<StepRecord>,
    #[serde(rename = "final")]
    pub final_tokens: Vec<Symbol>,
}

impl DecodeTrace {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| DapdError::Parse(format!("bad trace line: {e}")))
    }

    pub fn peak_segments(&self) -> usize {
        self.steps.iter().map(|s| s.segments).max().unwrap_or(0)
    }

    pub fn segment_trajectory(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.segments).collect()
    }
}

fn commit_token<R: Rng>(marginal: &[f64], committer: Committer, rng: &mut R) -> Symbol {
    match committer {
        Committer::Argmax => {
            let mut best = 0;
            for (s, &p) in marginal.iter().enumerate() {
                if p > marginal[best] {
                    best = s;
                }
            }
            best as Symbol
        }
        Committer::Sample => {
            let total: f64 = marginal.iter().sum();
            let mut u = rng.random::<f64>() * total;
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
    }
}

/// Runs the unmasking loop to completion.
pub fn decode<D: Denoiser + ?Sized>(
    denoiser: &D,
    strategy: &StrategyConfig,
    initial: &SequenceState,
    rng_seed: u64,
) -> Result<(SequenceState, DecodeTrace)> {
    strategy.validate()?;
    let initial_masked = initial.mask_count();
    if initial_masked == 0 {
        return Err(DapdError::NoMaskedPositions);
    }
    if initial.tokens()[..initial.prompt_len()].iter().any(Option::is_none) {
        return Err(DapdError::InvalidArgument("prompt positions may not be masked".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut state = initial.clone();
    let mut steps = Vec::new();
    let mut prev: Option<DenoiserOutput> = None;

    while !state.is_complete() {
        if steps.len() >= initial_masked {
            return Err(DapdError::Internal("decode did not make progress".into()));
        }
        let out = denoiser.denoise(&state)?;
        out.validate(&state)?;
        let progress = (initial_masked - state.mask_count()) as f64 / initial_masked as f64;

        let (selected, tau) = match strategy.kind {
            StrategyKind::Sequential => (select_sequential(&out), None),
            StrategyKind::Topk => (select_topk(&out, strategy.k), None),
            StrategyKind::ConfThreshold => (select_conf_threshold(&out, strategy.conf_thresh), None),
            StrategyKind::KlStability => (
                select_kl_stability(&out, prev.as_ref(), strategy.conf_thresh, strategy.kl_thresh),
                None,
            ),
            StrategyKind::Dapd => {
                let sel = select_dapd(&out, &state, strategy, progress)?;
                (sel.positions, sel.tau)
            }
        };
        if selected.is_empty() {
            return Err(DapdError::Internal("strategy selected no positions".into()));
        }

        let mut unmasked = selected;
        unmasked.sort_unstable();
        let mut tokens = Vec::with_capacity(unmasked.len());
        let mut confs = Vec::with_capacity(unmasked.len());
        for &p in &unmasked {
            let marginal = out
                .marginal_of(p)
                .ok_or_else(|| DapdError::Internal(format!("strategy selected unmasked position {p}")))?;
            let sym = commit_token(marginal, strategy.committer, &mut rng);
            state.unmask(p, sym)?;
            tokens.push(sym);
            confs.push(marginal.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let segments = state.segment_count(state.gen_region())?;
        steps.push(StepRecord {
            idx: steps.len() + 1,
            tau,
            unmasked,
            tokens,
            confs,
            segments,
        });
        prev = Some(out);
    }

    let final_tokens = state.completed().expect("loop exits only when complete");
    let trace = DecodeTrace {
        seed: rng_seed,
        strategy: strategy.kind.name().to_string(),
        nfe: steps.len(),
        steps,
        final_tokens,
    };
    Ok((state, trace))
}
