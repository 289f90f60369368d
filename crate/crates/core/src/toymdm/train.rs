//! Masked-diffusion training loop with AdamW.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainMeta, FORMAT_VERSION};
use super::model::{init_params, token_id, weighted_nll, ModelConfig, ParamLayout, Transformer};
use super::real::Real;
use super::{corrupt, corrupt_count, ToyExample, SEQ_LEN};
use crate::decode::SequenceState;
use crate::error::{DapdError, Result};

/// How the masking level of each training sequence is drawn.
///
/// Both estimate the same objective `E_t[(1/t) sum_masked -ln p(x0_i | x_t)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossEstimator {
    /// `t ~ U(0, 1]`, each position masked with probability `t`, weight `1/t`.
    ContinuousTime,
    /// Mask count `m ~ U{1..L}`, a uniform `m`-subset masked, weight `L/m`.
    /// Integrating `t` out of the continuous form gives exactly this, with bounded weights.
    MaskCount,
}

impl FromStr for LossEstimator {
    type Err = DapdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous_time" => Ok(Self::ContinuousTime),
            "mask_count" => Ok(Self::MaskCount),
            _ => Err(DapdError::InvalidArgument(format!(
                "unknown loss estimator '{s}'; valid names: continuous_time, mask_count"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub estimator: LossEstimator,
    /// Loss-log granularity: one CSV row per this many steps (window mean).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-3,
            batch_size: 64,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 1,
            estimator: LossEstimator::MaskCount,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DapdError::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DapdError::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(DapdError::InvalidArgument(
                "batch_size and log_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Token ids, targets and per-row loss weights for a batch of corrupted sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl MaskedBatch {
    pub fn push(&mut self, x0: &ToyExample, state: &SequenceState, weight: f64) {
        for (i, tok) in state.tokens().iter().enumerate() {
            self.tokens.push(token_id(*tok));
            self.targets.push(x0.tokens[i] as usize);
            self.weights.push(if tok.is_none() { weight } else { 0.0 });
        }
    }

    pub fn weights_as<F: Real>(&self) -> Vec<F> {
        self.weights.iter().map(|&w| F::lit(w)).collect()
    }
}

pub fn sample_masked_batch<R: Rng + ?Sized>(
    examples: &[ToyExample],
    estimator: LossEstimator,
    rng: &mut R,
) -> MaskedBatch {
    let mut batch = MaskedBatch {
        tokens: Vec::with_capacity(examples.len() * SEQ_LEN),
        targets: Vec::with_capacity(examples.len() * SEQ_LEN),
        weights: Vec::with_capacity(examples.len() * SEQ_LEN),
    };
    for x0 in examples {
        match estimator {
            LossEstimator::ContinuousTime => {
                let t = 1.0 - rng.random::<f64>();
                let state = corrupt(x0, t, rng).expect("t in (0, 1]");
                batch.push(x0, &state, 1.0 / t);
            }
            LossEstimator::MaskCount => {
                let m = rng.random_range(1..=SEQ_LEN);
                let state = corrupt_count(x0, m, rng);
                batch.push(x0, &state, SEQ_LEN as f64 / m as f64);
            }
        }
    }
    batch
}

/// Single-example masked-diffusion loss: `t ~ U(0, 1]`, corrupt, `(1/t) sum_masked -ln p`.
pub fn mdm_loss<F: Real, R: Rng + ?Sized>(model: &Transformer<'_, F>, x0: &ToyExample, rng: &mut R) -> F {
    let batch = sample_masked_batch(std::slice::from_ref(x0), LossEstimator::ContinuousTime, rng);
    let acts = model.forward(&batch.tokens);
    weighted_nll(&acts, &batch.targets, &batch.weights_as::<F>())
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.eps as f32,
            weight_decay: cfg.weight_decay as f32,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *p -= self.lr * self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, mean loss over the preceding window)` rows.
    pub log: Vec<(usize, f64)>,
    pub final_loss: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.log {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }
}

/// Trains a fresh model. Identical inputs give bit-identical checkpoints.
pub fn train(
    data: &[ToyExample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    train_with_progress(data, model_cfg, train_cfg, |_, _| {})
}

pub fn train_with_progress(
    data: &[ToyExample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<(Checkpoint, TrainReport)> {
    if data.is_empty() {
        return Err(DapdError::InvalidArgument("training data is empty".into()));
    }
    model_cfg.validate()?;
    train_cfg.validate()?;

    let layout = ParamLayout::new(model_cfg);
    let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut params = init_params(model_cfg, &layout, &mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(params.len(), train_cfg);

    let mut log = Vec::new();
    let mut window = 0.0;
    let mut window_n = 0usize;
    let mut last_window = f64::NAN;
    let mut picked = Vec::with_capacity(train_cfg.batch_size);
    for step in 1..=train_cfg.steps {
        picked.clear();
        picked.extend((0..train_cfg.batch_size).map(|_| data[rng.random_range(0..data.len())]));
        let batch = sample_masked_batch(&picked, train_cfg.estimator, &mut rng);

        let model = Transformer::new(model_cfg, &layout, &params)?;
        let (loss, grad) = model.loss_and_grad(&batch.tokens, &batch.targets, &batch.weights_as::<f32>());
        let loss = loss as f64;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(DapdError::Diverged { step, loss });
        }
        opt.step(&mut params, &grad);

        window += loss;
        window_n += 1;
        if step % train_cfg.log_every == 0 || step == train_cfg.steps {
            last_window = window / window_n as f64;
            log.push((step, last_window));
            on_log(step, last_window);
            window = 0.0;
            window_n = 0;
        }
    }

    let ckpt = Checkpoint::new(
        model_cfg.clone(),
        params,
        TrainMeta {
            steps: train_cfg.steps,
            final_loss: last_window,
            seed: train_cfg.seed,
            version: FORMAT_VERSION,
        },
    )?;
    Ok((
        ckpt,
        TrainReport {
            log,
            final_loss: last_window,
        },
    ))
}

/// Norm-wise relative error `|g - g_fd| / max(|g|, |g_fd|)` between the analytic
/// gradient of the weighted masked NLL and central differences with step `h`,
/// in `f64`, on a small batch with freshly initialized parameters.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, h: f64) -> Result<f64> {
    cfg.validate()?;
    let layout = ParamLayout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f64> = init_params(cfg, &layout, &mut rng).into_iter().map(f64::from).collect();
    let data = super::gen_dataset(4, seed)?;
    let batch = sample_masked_batch(&data, LossEstimator::MaskCount, &mut rng);
    let w = batch.weights_as::<f64>();

    let model = Transformer::new(cfg, &layout, &params)?;
    let (_, grad) = model.loss_and_grad(&batch.tokens, &batch.targets, &w);

    let loss_at = |p: &[f64]| -> Result<f64> {
        let m = Transformer::new(cfg, &layout, p)?;
        Ok(weighted_nll(&m.forward(&batch.tokens), &batch.targets, &w))
    };
    let mut p = params.clone();
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss_at(&p)?;
        p[i] = orig - h;
        let down = loss_at(&p)?;
        p[i] = orig;
        let num = (up - down) / (2.0 * h);
        diff += (grad[i] - num).powi(2);
        norm_a += grad[i].powi(2);
        norm_n += num.powi(2);
    }
    Ok(diff.sqrt() / f64::max(norm_a.sqrt(), norm_n.sqrt()))
}
