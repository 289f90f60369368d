//! Exact inference for the toy distribution by enumerating its 243-sequence support.
//!
//! Probabilities are kept as integer counts over the consistent support and only
//! turned into ratios at the interface.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use crate::decode::{Denoiser, DenoiserOutput, DependencySignal, SequenceState, Symbol};
use crate::depgraph::DependencyGraph;
use crate::error::{DapdError, Result};
use crate::matrix::Matrix;
use crate::toymdm::{constraint, position_of, ToyExample, NUM_SYMBOLS, NUM_X, NUM_Y, POSITION_LABELS, SEQ_LEN};

/// A partial observation of the toy sequence: `None` is masked.
pub type Observation = [Option<Symbol>; SEQ_LEN];

pub const FULLY_MASKED: Observation = [None; SEQ_LEN];

/// Ground-truth graph: the union of the triangles `{X_i, X_{i+1}, Y_i}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMRF {
    adjacency: [[bool; SEQ_LEN]; SEQ_LEN],
}

impl Default for GroundTruthMRF {
    fn default() -> Self {
        Self::new()
    }
}

impl GroundTruthMRF {
    pub fn new() -> Self {
        let mut adjacency = [[false; SEQ_LEN]; SEQ_LEN];
        for i in 1..=NUM_Y {
            let (a, b, y) = constraint(i);
            for (u, v) in [(a, b), (a, y), (b, y)] {
                adjacency[u][v] = true;
                adjacency[v][u] = true;
            }
        }
        Self { adjacency }
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..SEQ_LEN {
            for j in i + 1..SEQ_LEN {
                if self.adjacency[i][j] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn degrees(&self) -> [usize; SEQ_LEN] {
        let mut d = [0; SEQ_LEN];
        for (i, row) in self.adjacency.iter().enumerate() {
            d[i] = row.iter().filter(|&&e| e).count();
        }
        d
    }
}

/// Induced subgraph on `masked`; its proxy degrees are the induced true degrees.
pub fn ground_truth_subgraph(masked: &[usize]) -> Result<DependencyGraph> {
    let mrf = GroundTruthMRF::new();
    if let Some(&bad) = masked.iter().find(|&&p| p >= SEQ_LEN) {
        return Err(DapdError::InvalidArgument(format!(
            "position {bad} outside the toy sequence"
        )));
    }
    let n = masked.len();
    let mut adj = vec![false; n * n];
    for (a, &i) in masked.iter().enumerate() {
        for (b, &j) in masked.iter().enumerate() {
            adj[a * n + b] = mrf.is_edge(i, j);
        }
    }
    DependencyGraph::from_adjacency(masked.to_vec(), adj)
}

/// Induced true degree of each masked position.
pub fn induced_degrees(masked: &[usize]) -> Vec<usize> {
    let mrf = GroundTruthMRF::new();
    masked
        .iter()
        .map(|&i| masked.iter().filter(|&&j| mrf.is_edge(i, j)).count())
        .collect()
}

fn support() -> &'static [[Symbol; SEQ_LEN]] {
    static SUPPORT: OnceLock<Vec<[Symbol; SEQ_LEN]>> = OnceLock::new();
    SUPPORT.get_or_init(|| {
        let mut out = Vec::with_capacity(243);
        for code in 0..243u32 {
            let mut x = [0; NUM_X];
            let mut c = code;
            // X1 is the most significant digit, so the list is lexicographic.
            for slot in x.iter_mut().rev() {
                *slot = c % 3;
                c /= 3;
            }
            out.push(ToyExample::from_x(x).tokens);
        }
        out
    })
}

fn check_observation(observed: &[Option<Symbol>]) -> Result<()> {
    if observed.len() != SEQ_LEN {
        return Err(DapdError::Shape(format!(
            "observation has length {}, expected {SEQ_LEN}",
            observed.len()
        )));
    }
    if let Some(bad) = observed.iter().flatten().find(|&&s| s as usize >= NUM_SYMBOLS) {
        return Err(DapdError::InvalidArgument(format!(
            "symbol {bad} outside the toy alphabet"
        )));
    }
    Ok(())
}

fn agrees(seq: &[Symbol; SEQ_LEN], observed: &[Option<Symbol>]) -> bool {
    seq.iter().zip(observed).all(|(s, o)| o.is_none_or(|v| v == *s))
}

/// Every valid sequence that matches all observed positions, in lexicographic order.
pub fn enumerate_consistent(observed: &[Option<Symbol>]) -> Result<Vec<[Symbol; SEQ_LEN]>> {
    check_observation(observed)?;
    Ok(support().iter().filter(|s| agrees(s, observed)).copied().collect())
}

fn nonempty_support(observed: &[Option<Symbol>]) -> Result<Vec<[Symbol; SEQ_LEN]>> {
    let seqs = enumerate_consistent(observed)?;
    if seqs.is_empty() {
        return Err(DapdError::ZeroSupport(describe(observed)));
    }
    Ok(seqs)
}

fn describe(observed: &[Option<Symbol>]) -> String {
    let parts: Vec<String> = observed
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.map(|v| format!("{}={v}", POSITION_LABELS[i])))
        .collect();
    format!("no valid sequence matches {{{}}}", parts.join(","))
}

/// Exact conditional marginals at the masked positions as counts over the consistent support.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginalTable {
    pub positions: Vec<usize>,
    pub counts: Vec<[u64; NUM_SYMBOLS]>,
    pub total: u64,
}

impl MarginalTable {
    pub fn prob(&self, k: usize, v: usize) -> f64 {
        self.counts[k][v] as f64 / self.total as f64
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        (0..NUM_SYMBOLS).map(|v| self.prob(k, v)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.positions.len()).map(|k| self.row(k)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("position,p0,p1,p2\n");
        for (k, &p) in self.positions.iter().enumerate() {
            let r = self.row(k);
            writeln!(s, "{},{},{},{}", POSITION_LABELS[p], r[0], r[1], r[2]).unwrap();
        }
        s
    }
}

pub fn oracle_marginals(observed: &[Option<Symbol>]) -> Result<MarginalTable> {
    let seqs = nonempty_support(observed)?;
    let positions: Vec<usize> = (0..SEQ_LEN).filter(|&i| observed[i].is_none()).collect();
    let mut counts = vec![[0u64; NUM_SYMBOLS]; positions.len()];
    for s in &seqs {
        for (k, &p) in positions.iter().enumerate() {
            counts[k][s[p] as usize] += 1;
        }
    }
    Ok(MarginalTable {
        positions,
        counts,
        total: seqs.len() as u64,
    })
}

/// `I(X_i; X_j | every other masked position, observed)` in nats.
pub fn conditional_mi(observed: &[Option<Symbol>], i: usize, j: usize) -> Result<f64> {
    check_observation(observed)?;
    if i == j || i >= SEQ_LEN || j >= SEQ_LEN {
        return Err(DapdError::InvalidArgument(format!(
            "need two distinct positions, got {i} and {j}"
        )));
    }
    if observed[i].is_some() || observed[j].is_some() {
        return Err(DapdError::InvalidArgument("both positions must be masked".into()));
    }
    let seqs = nonempty_support(observed)?;
    let (lo, hi) = (i.min(j), i.max(j));

    // Group by the values of the other masked positions; each group is one conditioning event.
    let mut groups: HashMap<Vec<Symbol>, [[u64; NUM_SYMBOLS]; NUM_SYMBOLS]> = HashMap::new();
    for s in &seqs {
        let key: Vec<Symbol> = (0..SEQ_LEN)
            .filter(|&p| observed[p].is_none() && p != lo && p != hi)
            .map(|p| s[p])
            .collect();
        groups.entry(key).or_default()[s[lo] as usize][s[hi] as usize] += 1;
    }

    let total = seqs.len() as f64;
    let mut mi = 0.0;
    for joint in groups.values() {
        let n: u64 = joint.iter().flatten().sum();
        let nf = n as f64;
        for row in joint.iter() {
            let na: u64 = row.iter().sum();
            for (b, &nab) in row.iter().enumerate() {
                if nab == 0 {
                    continue;
                }
                let nb: u64 = (0..NUM_SYMBOLS).map(|r| joint[r][b]).sum();
                mi += (nab as f64 / total) * ((nab as f64 * nf) / (na as f64 * nb as f64)).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Pairwise conditional MI over the masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MiTable {
    pub positions: Vec<usize>,
    pub mi: Matrix,
}

impl MiTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("position");
        for &p in &self.positions {
            write!(s, ",{}", POSITION_LABELS[p]).unwrap();
        }
        s.push('\n');
        for (a, &p) in self.positions.iter().enumerate() {
            s.push_str(POSITION_LABELS[p]);
            for b in 0..self.positions.len() {
                write!(s, ",{}", self.mi.get(a, b)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn mi_table(observed: &[Option<Symbol>]) -> Result<MiTable> {
    nonempty_support(observed)?;
    let positions: Vec<usize> = (0..SEQ_LEN).filter(|&i| observed[i].is_none()).collect();
    let n = positions.len();
    let mut mi = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let v = conditional_mi(observed, positions[a], positions[b])?;
            mi.set(a, b, v);
            mi.set(b, a, v);
        }
    }
    Ok(MiTable { positions, mi })
}

/// Parses `X1=0,Y2=1` into an observation. An empty string observes nothing.
pub fn parse_observation(spec: &str) -> Result<Observation> {
    let mut obs = FULLY_MASKED;
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (label, value) = item
            .split_once('=')
            .ok_or_else(|| DapdError::Parse(format!("expected POS=VAL, got '{item}'")))?;
        let pos = position_of(label.trim())
            .ok_or_else(|| DapdError::Parse(format!("unknown position '{label}'; use X1..X5 or Y1..Y4")))?;
        let v: Symbol = value
            .trim()
            .parse()
            .map_err(|_| DapdError::Parse(format!("bad symbol '{value}' for {label}")))?;
        if v as usize >= NUM_SYMBOLS {
            return Err(DapdError::Parse(format!("symbol {v} for {label} is outside 0..=2")));
        }
        if obs[pos].is_some_and(|old| old != v) {
            return Err(DapdError::Parse(format!(
                "{label} observed twice with different values"
            )));
        }
        obs[pos] = Some(v);
    }
    Ok(obs)
}

/// Exact denoiser: true conditional marginals plus binary ground-truth edge scores
/// among the masked positions. Any threshold in `(0, 1)` recovers the true edge set.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleDenoiser;

impl Denoiser for OracleDenoiser {
    fn denoise(&self, state: &SequenceState) -> Result<DenoiserOutput> {
        if state.len() != SEQ_LEN || state.prompt_len() != 0 {
            return Err(DapdError::Shape(format!(
                "the oracle needs an unprompted length-{SEQ_LEN} state, got length {} with prompt {}",
                state.len(),
                state.prompt_len()
            )));
        }
        if state.mask_count() == 0 {
            return Err(DapdError::NoMaskedPositions);
        }
        let table = oracle_marginals(state.tokens())?;
        let mrf = GroundTruthMRF::new();
        let mut scores = Matrix::zeros(SEQ_LEN, SEQ_LEN);
        for &i in &table.positions {
            for &j in &table.positions {
                if mrf.is_edge(i, j) {
                    scores.set(i, j, 1.0);
                }
            }
        }
        Ok(DenoiserOutput {
            marginals: table.rows(),
            positions: table.positions,
            dependency: DependencySignal::EdgeScores(scores),
        })
    }
}
