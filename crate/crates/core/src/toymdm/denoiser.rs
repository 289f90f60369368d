use super::checkpoint::Checkpoint;
use super::model::{token_id, Activations, Transformer};
use super::{NUM_SYMBOLS, SEQ_LEN};
use crate::decode::{Denoiser, DenoiserOutput, DependencySignal, SequenceState};
use crate::depgraph::AttentionStack;
use crate::error::{DapdError, Result};
use crate::matrix::Matrix;

/// A trained toy model exposed as a [`Denoiser`].
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    ckpt: Checkpoint,
}

impl ToyDenoiser {
    pub fn new(ckpt: Checkpoint) -> Self {
        Self { ckpt }
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    fn check_state(&self, state: &SequenceState) -> Result<()> {
        if state.len() != self.ckpt.config().seq_len || state.len() != SEQ_LEN {
            return Err(DapdError::Shape(format!(
                "state length {} does not match model sequence length {}",
                state.len(),
                self.ckpt.config().seq_len
            )));
        }
        if let Some(bad) = state.tokens().iter().flatten().find(|&&s| s as usize >= NUM_SYMBOLS) {
            return Err(DapdError::InvalidArgument(format!(
                "symbol {bad} outside the toy alphabet"
            )));
        }
        Ok(())
    }

    fn run(&self, states: &[&SequenceState]) -> Result<Activations<f32>> {
        for s in states {
            self.check_state(s)?;
        }
        let tokens: Vec<usize> = states
            .iter()
            .flat_map(|s| s.tokens().iter().map(|&t| token_id(t)))
            .collect();
        let model = Transformer::new(self.ckpt.config(), self.ckpt.layout(), self.ckpt.params())?;
        Ok(model.forward(&tokens))
    }

    fn output_at(&self, acts: &Activations<f32>, b: usize, state: &SequenceState) -> DenoiserOutput {
        let cfg = self.ckpt.config();
        let l = cfg.seq_len;
        let positions = state.masked_positions();
        let marginals = positions
            .iter()
            .map(|&p| {
                let row: Vec<f64> = (0..NUM_SYMBOLS).map(|s| acts.prob(b * l + p, s) as f64).collect();
                let z: f64 = row.iter().sum();
                row.into_iter().map(|x| x / z).collect()
            })
            .collect();
        let layers = (0..cfg.num_layers)
            .map(|layer| {
                (0..cfg.num_heads)
                    .map(|h| {
                        let a = acts.attention(layer, b, h, cfg);
                        let mut m = Matrix::zeros(l, l);
                        for i in 0..l {
                            let row = &a[i * l..(i + 1) * l];
                            let z: f64 = row.iter().map(|&x| x as f64).sum();
                            for (j, &x) in row.iter().enumerate() {
                                m.set(i, j, x as f64 / z);
                            }
                        }
                        m
                    })
                    .collect()
            })
            .collect();
        DenoiserOutput {
            positions,
            marginals,
            dependency: DependencySignal::Attention(AttentionStack::new(layers)),
        }
    }

    /// One forward pass for several states at once.
    pub fn denoise_batch(&self, states: &[&SequenceState]) -> Result<Vec<DenoiserOutput>> {
        let acts = self.run(states)?;
        Ok(states
            .iter()
            .enumerate()
            .map(|(b, s)| self.output_at(&acts, b, s))
            .collect())
    }
}

impl Denoiser for ToyDenoiser {
    fn denoise(&self, state: &SequenceState) -> Result<DenoiserOutput> {
        if state.mask_count() == 0 {
            return Err(DapdError::NoMaskedPositions);
        }
        let acts = self.run(&[state])?;
        Ok(self.output_at(&acts, 0, state))
    }
}
