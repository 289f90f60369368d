//! Attention-induced dependency graphs over masked positions.
//!
//! Each decoding step builds a fresh graph: attention maps are averaged over
//! the top layers, symmetrized into pairwise edge scores, thresholded into an
//! edge set, and then scanned in a degree-prioritized greedy order to pick an
//! independent set of positions that can be unmasked together.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{DapdError, Result};
use crate::matrix::Matrix;

/// Stack of attention maps: `layers[layer][head]` is an `L x L` row-stochastic matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionStack {
    pub layers: Vec<Vec<Matrix>>,
}

/// Fraction of the final layers used when aggregating attention.
pub const DEFAULT_TOP_LAYER_FRACTION: f64 = 0.25;

const ROW_SUM_TOL: f64 = 1e-5;

impl AttentionStack {
    pub fn new(layers: Vec<Vec<Matrix>>) -> Self {
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Side length `L` of the attention maps, if any are present.
    pub fn seq_len(&self) -> Option<usize> {
        self.layers.first().and_then(|heads| heads.first()).map(|m| m.rows())
    }

    /// Checks shapes and that every row sums to one.
    pub fn validate(&self) -> Result<()> {
        let l = self.seq_len().ok_or(DapdError::NoAttentionLayers)?;
        for (li, heads) in self.layers.iter().enumerate() {
            if heads.is_empty() {
                return Err(DapdError::Shape(format!("layer {li} has no heads")));
            }
            for (hi, m) in heads.iter().enumerate() {
                if m.rows() != l || m.cols() != l {
                    return Err(DapdError::Shape(format!(
                        "attention layer {li} head {hi} is {}x{}, expected {l}x{l}",
                        m.rows(),
                        m.cols()
                    )));
                }
                for r in 0..l {
                    let row = m.row(r);
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&a| a < 0.0) {
                        return Err(DapdError::NotRowStochastic {
                            layer: li,
                            head: hi,
                            row: r,
                            sum,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Number of final layers selected for a given fraction: `ceil(fraction * num_layers)`, at least one.
pub fn top_layer_count(num_layers: usize, fraction: f64) -> usize {
    // Tiny slack so that e.g. 0.25 * 8 is not pushed to 3 by rounding noise.
    let k = (fraction * num_layers as f64 - 1e-9).ceil() as usize;
    k.clamp(1, num_layers)
}

/// Elementwise mean over all heads of the top `ceil(fraction * num_layers)` layers.
pub fn aggregate_attention(attention: &AttentionStack, top_layer_fraction: f64) -> Result<Matrix> {
    if !(top_layer_fraction > 0.0 && top_layer_fraction <= 1.0) {
        return Err(DapdError::InvalidArgument(format!(
            "top_layer_fraction must be in (0, 1], got {top_layer_fraction}"
        )));
    }
    attention.validate()?;
    let num_layers = attention.num_layers();
    let l = attention.seq_len().ok_or(DapdError::NoAttentionLayers)?;
    let first = num_layers - top_layer_count(num_layers, top_layer_fraction);

    let mut agg = Matrix::zeros(l, l);
    let mut count = 0usize;
    for heads in &attention.layers[first..] {
        for m in heads {
            agg.add_assign(m);
            count += 1;
        }
    }
    agg.scale(1.0 / count as f64);
    Ok(agg)
}

/// Symmetric pairwise interaction scores restricted to the masked positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScoreMatrix {
    /// Absolute sequence indices of the masked positions, in ascending order of appearance.
    pub positions: Vec<usize>,
    pub scores: Matrix,
}

impl EdgeScoreMatrix {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores.get(i, j)
    }

    /// Upper-triangle pairs `(i, j, s_ij)` in local indices.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j, self.scores.get(i, j))))
    }
}

/// `s_ij = (a_ij + a_ji) / 2` over masked pairs, zero on the diagonal.
pub fn symmetrize_scores(agg: &Matrix, masked: &[usize]) -> Result<EdgeScoreMatrix> {
    let l = agg.rows();
    if agg.cols() != l {
        return Err(DapdError::Shape(format!(
            "aggregated attention must be square, got {}x{}",
            agg.rows(),
            agg.cols()
        )));
    }
    let mut seen = vec![false; l];
    for &p in masked {
        if p >= l {
            return Err(DapdError::InvalidArgument(format!(
                "masked index {p} outside sequence of length {l}"
            )));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(DapdError::InvalidArgument(format!("duplicate masked index {p}")));
        }
    }

    let n = masked.len();
    let mut scores = Matrix::zeros(n, n);
    for (i, &pi) in masked.iter().enumerate() {
        for (j, &pj) in masked.iter().enumerate().skip(i + 1) {
            let s = 0.5 * (agg.get(pi, pj) + agg.get(pj, pi));
            scores.set(i, j, s);
            scores.set(j, i, s);
        }
    }
    Ok(EdgeScoreMatrix {
        positions: masked.to_vec(),
        scores,
    })
}

/// Linear threshold schedule `tau_min -> tau_max` over decoding progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            tau_min: 0.01,
            tau_max: 0.05,
        }
    }
}

impl TauSchedule {
    pub fn new(tau_min: f64, tau_max: f64) -> Result<Self> {
        if !(tau_min >= 0.0 && tau_max >= tau_min && tau_max.is_finite()) {
            return Err(DapdError::InvalidArgument(format!(
                "tau schedule requires 0 <= tau_min <= tau_max, got [{tau_min}, {tau_max}]"
            )));
        }
        Ok(Self { tau_min, tau_max })
    }

    pub fn constant(tau: f64) -> Result<Self> {
        Self::new(tau, tau)
    }
}

/// Threshold at `progress` in `[0, 1]`.
pub fn tau_at(schedule: &TauSchedule, progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(DapdError::InvalidArgument(format!(
            "progress must be in [0, 1], got {progress}"
        )));
    }
    Ok(schedule.tau_min + (schedule.tau_max - schedule.tau_min) * progress)
}

/// Thresholded dependency graph over the masked positions of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    pub positions: Vec<usize>,
    adjacency: Vec<bool>,
    /// Sum of raw edge scores to every other masked position.
    pub proxy_degree: Vec<f64>,
    pub threshold: f64,
}

impl DependencyGraph {
    /// Builds a graph directly from a boolean adjacency (row-major `n x n`).
    /// Proxy degrees are set to the plain degree.
    pub fn from_adjacency(positions: Vec<usize>, adjacency: Vec<bool>) -> Result<Self> {
        let n = positions.len();
        if adjacency.len() != n * n {
            return Err(DapdError::Shape(format!(
                "adjacency has {} entries, expected {}",
                adjacency.len(),
                n * n
            )));
        }
        for i in 0..n {
            if adjacency[i * n + i] {
                return Err(DapdError::InvalidArgument(format!("self loop at node {i}")));
            }
            for j in 0..n {
                if adjacency[i * n + j] != adjacency[j * n + i] {
                    return Err(DapdError::InvalidArgument(format!(
                        "adjacency not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let proxy_degree = (0..n)
            .map(|i| adjacency[i * n..(i + 1) * n].iter().filter(|&&e| e).count() as f64)
            .collect();
        Ok(Self {
            positions,
            adjacency,
            proxy_degree,
            threshold: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.len() + j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.len();
        (0..n).filter(move |&j| self.adjacency[i * n + j])
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count() / 2
    }

    /// Local index of an absolute sequence position.
    pub fn local_index(&self, position: usize) -> Option<usize> {
        self.positions.iter().position(|&p| p == position)
    }
}

/// `(i, j)` is an edge iff `s_ij > tau`. Proxy degrees come from the raw scores.
pub fn build_graph(scores: &EdgeScoreMatrix, tau: f64) -> Result<DependencyGraph> {
    if tau.is_nan() || tau < 0.0 {
        return Err(DapdError::InvalidArgument(format!("tau must be >= 0, got {tau}")));
    }
    let n = scores.len();
    let mut adjacency = vec![false; n * n];
    let mut proxy_degree = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = scores.get(i, j);
            proxy_degree[i] += s;
            adjacency[i * n + j] = s > tau;
        }
    }
    Ok(DependencyGraph {
        positions: scores.positions.clone(),
        adjacency,
        proxy_degree,
        threshold: tau,
    })
}

/// Positions chosen for simultaneous unmasking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndependentSet {
    /// Absolute sequence indices in the order they were admitted.
    pub members: Vec<usize>,
}

impl IndependentSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.members.contains(&position)
    }

    /// Members in ascending position order.
    pub fn sorted(&self) -> Vec<usize> {
        let mut v = self.members.clone();
        v.sort_unstable();
        v
    }
}

/// Visiting order for the greedy scan: weight descending, ties by ascending position.
pub fn welsh_powell_order(positions: &[usize], weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(Ordering::Equal)
            .then(positions[a].cmp(&positions[b]))
    });
    order
}

/// Degree-prioritized greedy scan: admit each node that has no neighbor already admitted.
///
/// The result is a maximal independent set that always contains the top-weighted node.
pub fn welsh_powell_select(graph: &DependencyGraph, weights: &[f64]) -> Result<IndependentSet> {
    let n = graph.len();
    if n == 0 {
        return Err(DapdError::NoMaskedPositions);
    }
    if weights.len() != n {
        return Err(DapdError::Shape(format!(
            "{} weights for a graph with {n} nodes",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(DapdError::InvalidArgument(format!("non-finite weight {w}")));
    }

    let mut taken = vec![false; n];
    let mut blocked = vec![false; n];
    let mut members = Vec::new();
    for i in welsh_powell_order(&graph.positions, weights) {
        if blocked[i] {
            continue;
        }
        taken[i] = true;
        members.push(graph.positions[i]);
        for j in graph.neighbors(i) {
            blocked[j] = true;
        }
    }
    debug_assert!(taken.iter().any(|&t| t));
    Ok(IndependentSet { members })
}

/// Number of maximal runs of unmasked positions in `region`.
pub fn segment_count(unmasked: &[bool], region: std::ops::Range<usize>) -> Result<usize> {
    if region.end > unmasked.len() || region.start > region.end {
        return Err(DapdError::InvalidArgument(format!(
            "region {region:?} outside sequence of length {}",
            unmasked.len()
        )));
    }
    let mut count = 0;
    let mut prev = false;
    for &u in &unmasked[region] {
        if u && !prev {
            count += 1;
        }
        prev = u;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(m: Matrix) -> AttentionStack {
        AttentionStack::new(vec![vec![m]])
    }

    fn uniform(l: usize) -> Matrix {
        Matrix::filled(l, l, 1.0 / l as f64)
    }

    #[test]
    fn aggregate_two_layers_mean() {
        let mut a = Matrix::zeros(3, 3);
        let mut b = Matrix::zeros(3, 3);
        for r in 0..3 {
            a.set(r, r, 1.0);
            b.set(r, r, 1.0);
        }
        a.set(0, 0, 0.8);
        a.set(0, 1, 0.2);
        b.set(0, 0, 0.4);
        b.set(0, 1, 0.6);
        let stack = AttentionStack::new(vec![vec![a], vec![b]]);
        let agg = aggregate_attention(&stack, 1.0).unwrap();
        assert!((agg.get(0, 1) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn quarter_of_eight_layers_is_last_two() {
        assert_eq!(top_layer_count(8, 0.25), 2);
        // Layers tagged by their (1-indexed) position on the diagonal weight.
        let layers = (1..=8)
            .map(|k| {
                let w = k as f64 / 10.0;
                let mut m = Matrix::zeros(2, 2);
                m.set(0, 0, w);
                m.set(0, 1, 1.0 - w);
                m.set(1, 1, 1.0);
                vec![m]
            })
            .collect();
        let agg = aggregate_attention(&AttentionStack::new(layers), 0.25).unwrap();
        assert!((agg.get(0, 0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_layer_identity() {
        let mut m = uniform(4);
        m.set(1, 1, 0.5);
        m.set(1, 2, 0.0);
        let agg = aggregate_attention(&single(m.clone()), 0.25).unwrap();
        assert_eq!(agg, m);
    }

    #[test]
    fn aggregate_rejects_empty_and_non_stochastic() {
        assert!(matches!(
            aggregate_attention(&AttentionStack::default(), 0.25),
            Err(DapdError::NoAttentionLayers)
        ));
        let bad = Matrix::filled(2, 2, 0.3);
        assert!(matches!(
            aggregate_attention(&single(bad), 1.0),
            Err(DapdError::NotRowStochastic { .. })
        ));
        assert!(aggregate_attention(&single(uniform(2)), 0.0).is_err());
    }

    #[test]
    fn symmetrize_definition() {
        let mut agg = uniform(3);
        agg.set(0, 2, 0.2);
        agg.set(2, 0, 0.4);
        let s = symmetrize_scores(&agg, &[0, 2]).unwrap();
        assert!((s.get(0, 1) - 0.3).abs() < 1e-15);
        assert_eq!(s.get(0, 1), s.get(1, 0));
        assert_eq!(s.get(0, 0), 0.0);
    }

    #[test]
    fn symmetrize_fixed_point_and_singleton() {
        let mut agg = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                agg.set(i, j, (i + j) as f64 / 10.0);
            }
        }
        let s = symmetrize_scores(&agg, &[1, 3]).unwrap();
        assert_eq!(s.get(0, 1), agg.get(1, 3));

        let one = symmetrize_scores(&agg, &[3]).unwrap();
        assert_eq!(one.scores, Matrix::zeros(1, 1));

        assert!(symmetrize_scores(&agg, &[1, 1]).is_err());
        assert!(symmetrize_scores(&agg, &[4]).is_err());
    }

    #[test]
    fn tau_schedule_points() {
        let s = TauSchedule::new(0.01, 0.05).unwrap();
        assert!((tau_at(&s, 0.0).unwrap() - 0.01).abs() < 1e-15);
        assert!((tau_at(&s, 0.5).unwrap() - 0.03).abs() < 1e-15);
        let c = TauSchedule::constant(0.02).unwrap();
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(tau_at(&c, p).unwrap(), 0.02);
        }
        assert!(tau_at(&s, 1.5).is_err());
        assert!(tau_at(&s, -0.1).is_err());
        assert!(TauSchedule::new(0.05, 0.01).is_err());
        assert!(TauSchedule::new(-0.1, 0.01).is_err());
    }

    fn scores3() -> EdgeScoreMatrix {
        let mut m = Matrix::zeros(3, 3);
        for (i, j, s) in [(0, 1, 0.3), (0, 2, 0.05), (1, 2, 0.0)] {
            m.set(i, j, s);
            m.set(j, i, s);
        }
        EdgeScoreMatrix {
            positions: vec![0, 1, 2],
            scores: m,
        }
    }

    #[test]
    fn build_graph_three_nodes() {
        let g = build_graph(&scores3(), 0.1).unwrap();
        assert!(g.is_adjacent(0, 1) && g.is_adjacent(1, 0));
        assert!(!g.is_adjacent(0, 2) && !g.is_adjacent(1, 2));
        assert_eq!(g.edge_count(), 1);
        let want = [0.35, 0.30, 0.05];
        for (d, w) in g.proxy_degree.iter().zip(want) {
            assert!((d - w).abs() < 1e-12);
        }
        assert_eq!(g.threshold, 0.1);
    }

    #[test]
    fn build_graph_zero_scores_and_dominant_tau() {
        let zero = EdgeScoreMatrix {
            positions: vec![4, 5, 6],
            scores: Matrix::zeros(3, 3),
        };
        let g = build_graph(&zero, 0.0).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert!(g.proxy_degree.iter().all(|&d| d == 0.0));

        let g = build_graph(&scores3(), 0.3).unwrap();
        assert_eq!(g.edge_count(), 0, "s = tau is a non-edge");
        assert!(build_graph(&scores3(), -1.0).is_err());
    }

    #[test]
    fn welsh_powell_hand_trace() {
        let g = DependencyGraph::from_adjacency(
            vec![0, 1, 2],
            vec![false, true, false, true, false, false, false, false, false],
        )
        .unwrap();
        let s = welsh_powell_select(&g, &[0.45, 0.40, 0.0]).unwrap();
        assert_eq!(s.sorted(), vec![0, 2]);
    }

    #[test]
    fn welsh_powell_clique_and_edgeless() {
        let k = 5;
        let clique: Vec<bool> = (0..k * k).map(|x| x / k != x % k).collect();
        let g = DependencyGraph::from_adjacency((0..k).collect(), clique).unwrap();
        let s = welsh_powell_select(&g, &[0.1, 0.5, 0.9, 0.2, 0.3]).unwrap();
        assert_eq!(s.members, vec![2]);

        let g = DependencyGraph::from_adjacency((0..k).collect(), vec![false; k * k]).unwrap();
        let s = welsh_powell_select(&g, &[0.0; 5]).unwrap();
        assert_eq!(s.sorted(), (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn welsh_powell_errors() {
        let g = DependencyGraph::from_adjacency(vec![], vec![]).unwrap();
        assert!(matches!(
            welsh_powell_select(&g, &[]),
            Err(DapdError::NoMaskedPositions)
        ));
        let g = DependencyGraph::from_adjacency(vec![0, 1], vec![false; 4]).unwrap();
        assert!(welsh_powell_select(&g, &[1.0]).is_err());
        assert!(welsh_powell_select(&g, &[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ties_break_by_position() {
        let g = DependencyGraph::from_adjacency(vec![7, 3], vec![false, true, true, false]).unwrap();
        let s = welsh_powell_select(&g, &[1.0, 1.0]).unwrap();
        assert_eq!(s.members, vec![3]);
    }

    #[test]
    fn segments() {
        assert_eq!(segment_count(&[false; 5], 0..5).unwrap(), 0);
        assert_eq!(segment_count(&[true, true, false, false, true], 0..5).unwrap(), 2);
        assert_eq!(segment_count(&[true; 4], 0..4).unwrap(), 1);
        assert_eq!(segment_count(&[true, false, true], 1..3).unwrap(), 1);
        assert!(segment_count(&[true], 0..2).is_err());
    }
}
