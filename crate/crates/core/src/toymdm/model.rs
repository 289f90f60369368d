//! Bidirectional pre-LayerNorm transformer with hand-written backpropagation.
//!
//! All parameters live in one flat buffer addressed through [`ParamLayout`],
//! which keeps the optimizer and the checkpoint format trivial.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::real::{matmul, matmul_a_bt, matmul_at_b_acc, Real};
use super::{MASK_ID, NUM_SYMBOLS, SEQ_LEN, VOCAB_SIZE};
use crate::error::{DapdError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub learned_pos: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            num_heads: 4,
            model_dim: 32,
            vocab_size: VOCAB_SIZE,
            seq_len: SEQ_LEN,
            learned_pos: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DapdError::InvalidArgument(m));
        if self.num_layers < 2 {
            return bad(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.num_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size != VOCAB_SIZE || self.seq_len != SEQ_LEN {
            return bad(format!(
                "toy model requires vocab_size {VOCAB_SIZE} and seq_len {SEQ_LEN}, got {} and {}",
                self.vocab_size, self.seq_len
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.model_dim
    }
}

/// One named contiguous block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Section {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc1: usize,
    b_fc1: usize,
    w_fc2: usize,
    b_fc2: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub sections: Vec<Section>,
    tok_emb: usize,
    pos_emb: Option<usize>,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let h = cfg.hidden_dim();
        let mut sections = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let at = offset;
            offset += shape.iter().product::<usize>();
            sections.push(Section {
                name,
                offset: at,
                shape,
            });
            at
        };

        let tok_emb = push("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = cfg.learned_pos.then(|| push("pos_emb".into(), vec![cfg.seq_len, d]));
        let layers = (0..cfg.num_layers)
            .map(|l| LayerOffsets {
                ln1_g: push(format!("layer{l}.ln1.gamma"), vec![d]),
                ln1_b: push(format!("layer{l}.ln1.beta"), vec![d]),
                w_qkv: push(format!("layer{l}.attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: push(format!("layer{l}.attn.b_qkv"), vec![3 * d]),
                w_o: push(format!("layer{l}.attn.w_o"), vec![d, d]),
                b_o: push(format!("layer{l}.attn.b_o"), vec![d]),
                ln2_g: push(format!("layer{l}.ln2.gamma"), vec![d]),
                ln2_b: push(format!("layer{l}.ln2.beta"), vec![d]),
                w_fc1: push(format!("layer{l}.mlp.w_fc1"), vec![d, h]),
                b_fc1: push(format!("layer{l}.mlp.b_fc1"), vec![h]),
                w_fc2: push(format!("layer{l}.mlp.w_fc2"), vec![h, d]),
                b_fc2: push(format!("layer{l}.mlp.b_fc2"), vec![d]),
            })
            .collect();
        let lnf_g = push("lnf.gamma".into(), vec![d]);
        let lnf_b = push("lnf.beta".into(), vec![d]);
        let w_out = push("head.w".into(), vec![d, cfg.vocab_size]);
        let b_out = push("head.b".into(), vec![cfg.vocab_size]);

        Self {
            sections,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: offset,
        }
    }

    pub fn num_params(&self) -> usize {
        self.total
    }
}

/// Initial parameters: linear layers uniform in `+-1/sqrt(fan_in)`, token and
/// positional embeddings standard normal, LayerNorm gains one and shifts zero.
///
/// Positional embeddings must start on the same scale as token embeddings:
/// with a near-zero position code every masked slot looks identical after the
/// first LayerNorm and attention has nothing to key on.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, layout: &ParamLayout, rng: &mut R) -> Vec<f32> {
    let mut p = vec![0f32; layout.num_params()];
    for s in &layout.sections {
        let slot = &mut p[s.range()];
        let name = s.name.as_str();
        if name == "tok_emb" || name == "pos_emb" {
            let n = Normal::new(0.0f32, 1.0).unwrap();
            slot.iter_mut().for_each(|x| *x = n.sample(rng));
        } else if name.ends_with("gamma") {
            slot.fill(1.0);
        } else if name.ends_with("beta") {
            slot.fill(0.0);
        } else {
            let fan_in = fan_in_of(cfg, name);
            let bound = 1.0 / (fan_in as f32).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).unwrap();
            slot.iter_mut().for_each(|x| *x = u.sample(rng));
        }
    }
    p
}

fn fan_in_of(cfg: &ModelConfig, name: &str) -> usize {
    if name.contains("w_fc2") || name.contains("b_fc2") {
        cfg.hidden_dim()
    } else {
        cfg.model_dim
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
    out: Vec<F>,
}

#[derive(Debug, Clone, Default)]
struct LayerCache<F> {
    ln1: LnCache<F>,
    qkv: Vec<F>,
    att: Vec<F>,
    y: Vec<F>,
    ln2: LnCache<F>,
    u: Vec<F>,
    t: Vec<F>,
    a: Vec<F>,
}

/// Activations of one forward pass over a batch, retained for backprop.
#[derive(Debug, Clone)]
pub struct Activations<F> {
    batch: usize,
    tokens: Vec<usize>,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    /// Row-major `(batch * seq_len) x NUM_SYMBOLS` data-symbol probabilities.
    pub probs: Vec<F>,
}

impl<F: Real> Activations<F> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Attention probabilities of `layer` for sequence `b`, head `h`, as a row-major `L x L` slice.
    pub fn attention(&self, layer: usize, b: usize, h: usize, cfg: &ModelConfig) -> &[F] {
        let l = cfg.seq_len;
        let base = (b * cfg.num_heads + h) * l * l;
        &self.layers[layer].att[base..base + l * l]
    }

    pub fn prob(&self, row: usize, symbol: usize) -> F {
        self.probs[row * NUM_SYMBOLS + symbol]
    }
}

fn layer_norm<F: Real>(x: &[F], gamma: &[F], beta: &[F], d: usize) -> LnCache<F> {
    let n = x.len() / d;
    let mut c = LnCache {
        xhat: vec![F::zero(); x.len()],
        rstd: vec![F::zero(); n],
        out: vec![F::zero(); x.len()],
    };
    let df = F::lit(d as f64);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
        let rstd = F::one() / (var + F::lit(LN_EPS)).sqrt();
        c.rstd[r] = rstd;
        for i in 0..d {
            let xh = (row[i] - mean) * rstd;
            c.xhat[r * d + i] = xh;
            c.out[r * d + i] = xh * gamma[i] + beta[i];
        }
    }
    c
}

/// Returns `dx`; accumulates into `dgamma`, `dbeta`.
fn layer_norm_backward<F: Real>(
    dout: &[F],
    cache: &LnCache<F>,
    gamma: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
    d: usize,
) -> Vec<F> {
    let n = dout.len() / d;
    let mut dx = vec![F::zero(); dout.len()];
    let df = F::lit(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..n {
        let o = r * d;
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            let g = dout[o + i];
            let xh = cache.xhat[o + i];
            dgamma[i] += g * xh;
            dbeta[i] += g;
            dxhat[i] = g * gamma[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh;
        }
        mean_dxhat /= df;
        mean_dxhat_xhat /= df;
        let rstd = cache.rstd[r];
        for i in 0..d {
            dx[o + i] = rstd * (dxhat[i] - mean_dxhat - cache.xhat[o + i] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through `exp`, which is much cheaper than libm's `tanh` in `f32`.
fn tanh_fast<F: Real>(x: F) -> F {
    let e = (x + x).exp();
    F::one() - F::lit(2.0) / (e + F::one())
}

/// Inner `tanh` of the GELU approximation; cached for the backward pass.
fn gelu_tanh<F: Real>(u: F) -> F {
    tanh_fast(F::lit(GELU_C) * (u + F::lit(GELU_K) * u * u * u))
}

fn gelu<F: Real>(u: F, t: F) -> F {
    F::lit(0.5) * u * (F::one() + t)
}

fn gelu_grad<F: Real>(u: F, t: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(GELU_K);
    let half = F::lit(0.5);
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * u * u)
}

fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    let d = bias.len();
    for row in x.chunks_exact_mut(d) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

fn bias_grad<F: Real>(dy: &[F], db: &mut [F]) {
    let d = db.len();
    for row in dy.chunks_exact(d) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += *v;
        }
    }
}

/// Fixed sinusoidal position code, used when positions are not learned.
fn sinusoid<F: Real>(pos: usize, i: usize, d: usize) -> F {
    let pair = (i / 2) as f64;
    let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
    let angle = pos as f64 * freq;
    F::lit(if i.is_multiple_of(2) { angle.sin() } else { angle.cos() })
}

pub struct Transformer<'a, F> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a ParamLayout,
    pub params: &'a [F],
}

impl<'a, F: Real> Transformer<'a, F> {
    pub fn new(cfg: &'a ModelConfig, layout: &'a ParamLayout, params: &'a [F]) -> Result<Self> {
        if params.len() != layout.num_params() {
            return Err(DapdError::Shape(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.num_params()
            )));
        }
        Ok(Self { cfg, layout, params })
    }

    fn p(&self, offset: usize, len: usize) -> &[F] {
        &self.params[offset..offset + len]
    }

    /// Runs a batch of token id sequences (`batch * seq_len` ids, `MASK_ID` for masks).
    pub fn forward(&self, tokens: &[usize]) -> Activations<F> {
        let cfg = self.cfg;
        let (l, d, nh, dh, hd) = (
            cfg.seq_len,
            cfg.model_dim,
            cfg.num_heads,
            cfg.head_dim(),
            cfg.hidden_dim(),
        );
        assert_eq!(tokens.len() % l, 0, "token buffer not a whole number of sequences");
        let batch = tokens.len() / l;
        let n = batch * l;

        let mut x = vec![F::zero(); n * d];
        let tok = self.layout.tok_emb;
        for (r, &t) in tokens.iter().enumerate() {
            assert!(t < cfg.vocab_size, "token id {t} out of range");
            let pos = r % l;
            for i in 0..d {
                let pe = match self.layout.pos_emb {
                    Some(off) => self.params[off + pos * d + i],
                    None => sinusoid(pos, i, d),
                };
                x[r * d + i] = self.params[tok + t * d + i] + pe;
            }
        }

        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for lo in &self.layout.layers {
            let ln1 = layer_norm(&x, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), d);
            let mut qkv = vec![F::zero(); n * 3 * d];
            matmul(n, d, 3 * d, &ln1.out, self.p(lo.w_qkv, d * 3 * d), &mut qkv, false);
            add_bias(&mut qkv, self.p(lo.b_qkv, 3 * d));

            let mut att = vec![F::zero(); batch * nh * l * l];
            let mut y = vec![F::zero(); n * d];
            for b in 0..batch {
                for h in 0..nh {
                    let a = &mut att[(b * nh + h) * l * l..(b * nh + h + 1) * l * l];
                    for i in 0..l {
                        let qi = (b * l + i) * 3 * d + h * dh;
                        let q = &qkv[qi..qi + dh];
                        let row = &mut a[i * l..(i + 1) * l];
                        let mut mx = F::neg_infinity();
                        for (j, s) in row.iter_mut().enumerate() {
                            let kj = (b * l + j) * 3 * d + d + h * dh;
                            let k = &qkv[kj..kj + dh];
                            let dot = q.iter().zip(k).fold(F::zero(), |acc, (&x, &y)| acc + x * y) * scale;
                            *s = dot;
                            mx = mx.max(dot);
                        }
                        let mut z = F::zero();
                        for s in row.iter_mut() {
                            *s = (*s - mx).exp();
                            z += *s;
                        }
                        let inv = F::one() / z;
                        let yo = (b * l + i) * d + h * dh;
                        let yi = &mut y[yo..yo + dh];
                        for (j, s) in row.iter_mut().enumerate() {
                            *s *= inv;
                            let vj = (b * l + j) * 3 * d + 2 * d + h * dh;
                            for (acc, &vv) in yi.iter_mut().zip(&qkv[vj..vj + dh]) {
                                *acc += *s * vv;
                            }
                        }
                    }
                }
            }

            let mut x_mid = x.clone();
            matmul(n, d, d, &y, self.p(lo.w_o, d * d), &mut x_mid, true);
            add_bias(&mut x_mid, self.p(lo.b_o, d));

            let ln2 = layer_norm(&x_mid, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), d);
            let mut u = vec![F::zero(); n * hd];
            matmul(n, d, hd, &ln2.out, self.p(lo.w_fc1, d * hd), &mut u, false);
            add_bias(&mut u, self.p(lo.b_fc1, hd));
            let t: Vec<F> = u.iter().map(|&v| gelu_tanh(v)).collect();
            let a_act: Vec<F> = u.iter().zip(&t).map(|(&v, &tv)| gelu(v, tv)).collect();

            let mut x_out = x_mid.clone();
            matmul(n, hd, d, &a_act, self.p(lo.w_fc2, hd * d), &mut x_out, true);
            add_bias(&mut x_out, self.p(lo.b_fc2, d));

            x = x_out;
            layers.push(LayerCache {
                ln1,
                qkv,
                att,
                y,
                ln2,
                u,
                t,
                a: a_act,
            });
        }

        let lnf = layer_norm(&x, self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d), d);
        let v = cfg.vocab_size;
        let mut logits = vec![F::zero(); n * v];
        matmul(n, d, v, &lnf.out, self.p(self.layout.w_out, d * v), &mut logits, false);
        add_bias(&mut logits, self.p(self.layout.b_out, v));

        // The MASK logit is excluded: softmax over the data symbols only.
        let mut probs = vec![F::zero(); n * NUM_SYMBOLS];
        for r in 0..n {
            let row = &logits[r * v..r * v + NUM_SYMBOLS];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for s in 0..NUM_SYMBOLS {
                let e = (row[s] - mx).exp();
                probs[r * NUM_SYMBOLS + s] = e;
                z += e;
            }
            for s in 0..NUM_SYMBOLS {
                probs[r * NUM_SYMBOLS + s] /= z;
            }
        }

        Activations {
            batch,
            tokens: tokens.to_vec(),
            layers,
            lnf,
            probs,
        }
    }

    /// Weighted cross-entropy `sum_r w_r * -ln p_r(target_r) / batch` and its gradient.
    ///
    /// Rows with zero weight contribute nothing; `targets` must be data symbols.
    pub fn loss_and_grad(&self, tokens: &[usize], targets: &[usize], weights: &[F]) -> (F, Vec<F>) {
        let acts = self.forward(tokens);
        let loss = weighted_nll(&acts, targets, weights);
        let grad = self.backward(&acts, targets, weights);
        (loss, grad)
    }

    pub fn backward(&self, acts: &Activations<F>, targets: &[usize], weights: &[F]) -> Vec<F> {
        let cfg = self.cfg;
        let (l, d, nh, dh, hd, v) = (
            cfg.seq_len,
            cfg.model_dim,
            cfg.num_heads,
            cfg.head_dim(),
            cfg.hidden_dim(),
            cfg.vocab_size,
        );
        let batch = acts.batch;
        let n = batch * l;
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);

        let mut grad = vec![F::zero(); self.layout.num_params()];
        let inv_b = F::one() / F::lit(batch as f64);

        let mut dlogits = vec![F::zero(); n * v];
        for r in 0..n {
            let w = weights[r];
            if w == F::zero() {
                continue;
            }
            for s in 0..NUM_SYMBOLS {
                let y = if s == targets[r] { F::one() } else { F::zero() };
                dlogits[r * v + s] = w * inv_b * (acts.prob(r, s) - y);
            }
        }

        let lay = self.layout;
        {
            let (w_out, b_out) = (lay.w_out, lay.b_out);
            matmul_at_b_acc(n, d, v, &acts.lnf.out, &dlogits, &mut grad[w_out..w_out + d * v]);
            bias_grad(&dlogits, &mut grad[b_out..b_out + v]);
        }
        let mut dlnf = vec![F::zero(); n * d];
        matmul_a_bt(n, v, d, &dlogits, self.p(lay.w_out, d * v), &mut dlnf);
        let mut dx = {
            let (g, rest) = grad.split_at_mut(lay.lnf_b);
            layer_norm_backward(
                &dlnf,
                &acts.lnf,
                self.p(lay.lnf_g, d),
                &mut g[lay.lnf_g..lay.lnf_g + d],
                &mut rest[..d],
                d,
            )
        };

        let scale = F::one() / F::lit(dh as f64).sqrt();
        for (lo, c) in lay.layers.iter().zip(&acts.layers).rev() {
            // MLP: x_out = x_mid + gelu(ln2 @ W1 + b1) @ W2 + b2
            matmul_at_b_acc(n, hd, d, &c.a, &dx, &mut grad[lo.w_fc2..lo.w_fc2 + hd * d]);
            bias_grad(&dx, &mut grad[lo.b_fc2..lo.b_fc2 + d]);
            let mut du = vec![F::zero(); n * hd];
            matmul_a_bt(n, d, hd, &dx, self.p(lo.w_fc2, hd * d), &mut du);
            for ((g, &u), &t) in du.iter_mut().zip(&c.u).zip(&c.t) {
                *g *= gelu_grad(u, t);
            }
            matmul_at_b_acc(n, d, hd, &c.ln2.out, &du, &mut grad[lo.w_fc1..lo.w_fc1 + d * hd]);
            bias_grad(&du, &mut grad[lo.b_fc1..lo.b_fc1 + hd]);
            let mut dln2 = vec![F::zero(); n * d];
            matmul_a_bt(n, hd, d, &du, self.p(lo.w_fc1, d * hd), &mut dln2);
            let dmid = {
                let (g, rest) = grad.split_at_mut(lo.ln2_b);
                layer_norm_backward(
                    &dln2,
                    &c.ln2,
                    self.p(lo.ln2_g, d),
                    &mut g[lo.ln2_g..lo.ln2_g + d],
                    &mut rest[..d],
                    d,
                )
            };
            for (a, b) in dx.iter_mut().zip(&dmid) {
                *a += *b;
            }

            // Attention: x_mid = x_in + y @ Wo + bo
            matmul_at_b_acc(n, d, d, &c.y, &dx, &mut grad[lo.w_o..lo.w_o + d * d]);
            bias_grad(&dx, &mut grad[lo.b_o..lo.b_o + d]);
            let mut dy = vec![F::zero(); n * d];
            matmul_a_bt(n, d, d, &dx, self.p(lo.w_o, d * d), &mut dy);

            let mut dqkv = vec![F::zero(); n * 3 * d];
            let mut datt = vec![F::zero(); l];
            for b in 0..batch {
                for h in 0..nh {
                    let a = &c.att[(b * nh + h) * l * l..(b * nh + h + 1) * l * l];
                    for i in 0..l {
                        let dyi = (b * l + i) * d + h * dh;
                        let dyv = &dy[dyi..dyi + dh];
                        let arow = &a[i * l..(i + 1) * l];
                        let mut dot = F::zero();
                        for (j, &w) in arow.iter().enumerate() {
                            let vj = (b * l + j) * 3 * d + 2 * d + h * dh;
                            let s = dyv
                                .iter()
                                .zip(&c.qkv[vj..vj + dh])
                                .fold(F::zero(), |acc, (&g, &vv)| acc + g * vv);
                            for (dv, &g) in dqkv[vj..vj + dh].iter_mut().zip(dyv) {
                                *dv += w * g;
                            }
                            datt[j] = s;
                            dot += w * s;
                        }
                        let qi = (b * l + i) * 3 * d + h * dh;
                        for (j, &w) in arow.iter().enumerate() {
                            let ds = w * (datt[j] - dot) * scale;
                            let kj = (b * l + j) * 3 * d + d + h * dh;
                            for e in 0..dh {
                                let (qe, ke) = (c.qkv[qi + e], c.qkv[kj + e]);
                                dqkv[qi + e] += ds * ke;
                                dqkv[kj + e] += ds * qe;
                            }
                        }
                    }
                }
            }
            matmul_at_b_acc(
                n,
                d,
                3 * d,
                &c.ln1.out,
                &dqkv,
                &mut grad[lo.w_qkv..lo.w_qkv + d * 3 * d],
            );
            bias_grad(&dqkv, &mut grad[lo.b_qkv..lo.b_qkv + 3 * d]);
            let mut dln1 = vec![F::zero(); n * d];
            matmul_a_bt(n, 3 * d, d, &dqkv, self.p(lo.w_qkv, d * 3 * d), &mut dln1);
            let din = {
                let (g, rest) = grad.split_at_mut(lo.ln1_b);
                layer_norm_backward(
                    &dln1,
                    &c.ln1,
                    self.p(lo.ln1_g, d),
                    &mut g[lo.ln1_g..lo.ln1_g + d],
                    &mut rest[..d],
                    d,
                )
            };
            for (a, b) in dx.iter_mut().zip(&din) {
                *a += *b;
            }
        }

        for (r, &t) in acts.tokens.iter().enumerate() {
            let pos = r % l;
            for i in 0..d {
                let g = dx[r * d + i];
                grad[lay.tok_emb + t * d + i] += g;
                if let Some(off) = lay.pos_emb {
                    grad[off + pos * d + i] += g;
                }
            }
        }
        grad
    }
}

pub fn weighted_nll<F: Real>(acts: &Activations<F>, targets: &[usize], weights: &[F]) -> F {
    let mut total = F::zero();
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w != F::zero() {
            total -= w * acts.prob(r, t).ln();
        }
    }
    total / F::lit(acts.batch as f64)
}

/// Convenience: the id fed to the embedding for an optional symbol.
pub fn token_id(symbol: Option<u32>) -> usize {
    symbol.map_or(MASK_ID, |s| s as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymdm::train::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(learned_pos: bool) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            learned_pos,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let err = gradient_check(&small_cfg(true), 11, 1e-3).unwrap();
        assert!(err < 1e-4, "relative error {err}");
        let err = gradient_check(&small_cfg(false), 12, 1e-3).unwrap();
        assert!(err < 1e-4, "relative error {err} (sinusoidal positions)");
    }

    #[test]
    fn outputs_are_normalized() {
        let cfg = small_cfg(true);
        let layout = ParamLayout::new(&cfg);
        let params = init_params(&cfg, &layout, &mut ChaCha8Rng::seed_from_u64(1));
        let model = Transformer::new(&cfg, &layout, &params).unwrap();
        let tokens: Vec<usize> = (0..18).map(|i| [0, 1, 2, MASK_ID][i % 4]).collect();
        let acts = model.forward(&tokens);
        for row in acts.probs.chunks(NUM_SYMBOLS) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        for layer in 0..cfg.num_layers {
            for b in 0..2 {
                for h in 0..cfg.num_heads {
                    for row in acts.attention(layer, b, h, &cfg).chunks(SEQ_LEN) {
                        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn config_rules() {
        assert!(ModelConfig {
            num_layers: 1,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            model_dim: 30,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
