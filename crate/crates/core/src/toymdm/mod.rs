//! Synthetic MRF testbed: a length-9 sequence `X1..X5, Y1..Y4` with
//! `Y_i = (X_i + X_{i+1}) mod 3`, and a small masked-denoising transformer
//! trained on it.

pub mod checkpoint;
pub mod denoiser;
pub mod model;
pub mod real;
pub mod train;

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::{SequenceState, Symbol};
use crate::error::{DapdError, Result};

pub use checkpoint::{Checkpoint, TrainMeta};
pub use denoiser::ToyDenoiser;
pub use model::ModelConfig;
pub use train::{train, LossEstimator, TrainConfig, TrainReport};

pub const SEQ_LEN: usize = 9;
pub const NUM_X: usize = 5;
pub const NUM_Y: usize = 4;
pub const NUM_SYMBOLS: usize = 3;
/// Embedding id of the mask symbol.
pub const MASK_ID: usize = 3;
pub const VOCAB_SIZE: usize = 4;

pub const POSITION_LABELS: [&str; SEQ_LEN] = ["X1", "X2", "X3", "X4", "X5", "Y1", "Y2", "Y3", "Y4"];

/// Sequence index of a label such as `"X3"` or `"Y1"`.
pub fn position_of(label: &str) -> Option<usize> {
    POSITION_LABELS.iter().position(|&l| l == label)
}

/// Index of `Y_i` (1-based `i`) and the `X` positions it sums.
pub fn constraint(i: usize) -> (usize, usize, usize) {
    (i - 1, i, NUM_X + i - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ToyExample {
    pub tokens: [Symbol; SEQ_LEN],
}

impl ToyExample {
    pub fn from_x(x: [Symbol; NUM_X]) -> Self {
        let mut tokens = [0; SEQ_LEN];
        tokens[..NUM_X].copy_from_slice(&x);
        for i in 0..NUM_Y {
            tokens[NUM_X + i] = (x[i] + x[i + 1]) % 3;
        }
        Self { tokens }
    }

    pub fn is_valid(&self) -> bool {
        is_valid_sequence(&self.tokens)
    }
}

/// All four `Y_i` constraints hold and every symbol is in `{0, 1, 2}`.
pub fn is_valid_sequence(tokens: &[Symbol]) -> bool {
    tokens.len() == SEQ_LEN
        && tokens.iter().all(|&t| (t as usize) < NUM_SYMBOLS)
        && (0..NUM_Y).all(|i| tokens[NUM_X + i] == (tokens[i] + tokens[i + 1]) % 3)
}

pub fn gen_dataset(n: usize, seed: u64) -> Result<Vec<ToyExample>> {
    if n == 0 {
        return Err(DapdError::InvalidArgument("dataset size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let mut x = [0; NUM_X];
            for v in &mut x {
                *v = rng.random_range(0..3);
            }
            ToyExample::from_x(x)
        })
        .collect())
}

/// Masks each position independently with probability `t`, redrawing until at least one is masked.
pub fn corrupt<R: Rng + ?Sized>(x0: &ToyExample, t: f64, rng: &mut R) -> Result<SequenceState> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(DapdError::InvalidArgument(format!("t must be in (0, 1], got {t}")));
    }
    loop {
        let tokens: Vec<Option<Symbol>> = x0
            .tokens
            .iter()
            .map(|&s| if rng.random::<f64>() < t { None } else { Some(s) })
            .collect();
        if tokens.iter().any(Option::is_none) {
            return SequenceState::from_tokens(tokens, 0);
        }
    }
}

/// Masks a uniformly random subset of exactly `m` positions.
pub fn corrupt_count<R: Rng + ?Sized>(x0: &ToyExample, m: usize, rng: &mut R) -> SequenceState {
    let mut tokens: Vec<Option<Symbol>> = x0.tokens.iter().map(|&s| Some(s)).collect();
    for i in sample(rng, SEQ_LEN, m.min(SEQ_LEN)) {
        tokens[i] = None;
    }
    SequenceState::from_tokens(tokens, 0).expect("no prompt")
}

pub fn write_dataset<W: Write>(mut w: W, data: &[ToyExample]) -> Result<()> {
    for ex in data {
        let line: Vec<String> = ex.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<ToyExample>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<Symbol> = line
            .split_whitespace()
            .map(|v| v.parse::<Symbol>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DapdError::Parse(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != SEQ_LEN || vals.iter().any(|&v| v as usize >= NUM_SYMBOLS) {
            return Err(DapdError::Parse(format!(
                "line {}: expected {SEQ_LEN} symbols in 0..{NUM_SYMBOLS}",
                lineno + 1
            )));
        }
        let mut tokens = [0; SEQ_LEN];
        tokens.copy_from_slice(&vals);
        out.push(ToyExample { tokens });
    }
    if out.is_empty() {
        return Err(DapdError::Parse("dataset is empty".into()));
    }
    Ok(out)
}
