//! C ABI over the `dapd` crate.
//!
//! Every fallible function returns a [`DapdStatus`]; on failure a message for the
//! calling thread is available from [`dapd_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Toy sequences are passed as
//! nine `int32_t` values where `-1` marks a masked position.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dapd::decode::{decode, Committer, DenoiserOutput, SequenceState, StrategyConfig, StrategyKind};
use dapd::depgraph::{build_graph, symmetrize_scores, welsh_powell_select, TauSchedule, DEFAULT_TOP_LAYER_FRACTION};
use dapd::oracle::OracleDenoiser;
use dapd::toymdm::{Checkpoint, ToyDenoiser, NUM_SYMBOLS, SEQ_LEN};
use dapd::{DapdError, Denoiser, DependencySignal, Matrix};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DapdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    ZeroSupport = 5,
    Internal = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DapdStrategyKind {
    Sequential = 0,
    Topk = 1,
    ConfThreshold = 2,
    KlStability = 3,
    Dapd = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DapdCommitter {
    Argmax = 0,
    Sample = 1,
}

/// Plain-data mirror of the decoding strategy settings.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DapdStrategyConfig {
    pub kind: DapdStrategyKind,
    pub k: usize,
    pub conf_thresh: f64,
    pub kl_thresh: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub switch_mask_ratio: f64,
    pub top_layer_fraction: f64,
    pub committer: DapdCommitter,
}

/// Opaque denoiser: either a loaded checkpoint or the exact oracle.
pub struct DapdDenoiser {
    inner: Inner,
}

enum Inner {
    Oracle,
    Model(Box<ToyDenoiser>),
}

impl DapdDenoiser {
    fn denoise(&self, state: &SequenceState) -> dapd::Result<DenoiserOutput> {
        match &self.inner {
            Inner::Oracle => OracleDenoiser.denoise(state),
            Inner::Model(m) => m.denoise(state),
        }
    }
}

impl Denoiser for DapdDenoiser {
    fn denoise(&self, state: &SequenceState) -> dapd::Result<DenoiserOutput> {
        DapdDenoiser::denoise(self, state)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &DapdError) -> DapdStatus {
    match err {
        DapdError::Io(_) => DapdStatus::Io,
        DapdError::Checkpoint(_) | DapdError::CheckpointVersion { .. } => DapdStatus::Checkpoint,
        DapdError::ZeroSupport(_) => DapdStatus::ZeroSupport,
        DapdError::Internal(_) | DapdError::Diverged { .. } => DapdStatus::Internal,
        _ => DapdStatus::InvalidArgument,
    }
}

struct Fail(DapdStatus, String);

impl From<DapdError> for Fail {
    fn from(e: DapdError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DapdStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for `dapd_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DapdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DapdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside dapd".into());
            DapdStatus::Panic
        }
    }
}

fn read_state(tokens: *const i32) -> Result<SequenceState, Fail> {
    if tokens.is_null() {
        return Err(null("tokens"));
    }
    // SAFETY: the caller provides nine readable values.
    let raw = unsafe { std::slice::from_raw_parts(tokens, SEQ_LEN) };
    let mut out = Vec::with_capacity(SEQ_LEN);
    for &t in raw {
        out.push(match t {
            -1 => None,
            0..=2 => Some(t as u32),
            _ => {
                return Err(Fail(
                    DapdStatus::InvalidArgument,
                    format!("token {t} is not -1, 0, 1 or 2"),
                ))
            }
        });
    }
    Ok(SequenceState::from_tokens(out, 0)?)
}

impl DapdStrategyConfig {
    fn to_config(self) -> Result<StrategyConfig, Fail> {
        let cfg = StrategyConfig {
            kind: match self.kind {
                DapdStrategyKind::Sequential => StrategyKind::Sequential,
                DapdStrategyKind::Topk => StrategyKind::Topk,
                DapdStrategyKind::ConfThreshold => StrategyKind::ConfThreshold,
                DapdStrategyKind::KlStability => StrategyKind::KlStability,
                DapdStrategyKind::Dapd => StrategyKind::Dapd,
            },
            k: self.k,
            conf_thresh: self.conf_thresh,
            kl_thresh: self.kl_thresh,
            tau_schedule: TauSchedule::new(self.tau_min, self.tau_max)?,
            switch_mask_ratio: self.switch_mask_ratio,
            top_layer_fraction: self.top_layer_fraction,
            committer: match self.committer {
                DapdCommitter::Argmax => Committer::Argmax,
                DapdCommitter::Sample => Committer::Sample,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn dapd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default settings for `kind`.
#[no_mangle]
pub extern "C" fn dapd_strategy_default(kind: DapdStrategyKind) -> DapdStrategyConfig {
    let d = StrategyConfig::default();
    DapdStrategyConfig {
        kind,
        k: d.k,
        conf_thresh: d.conf_thresh,
        kl_thresh: d.kl_thresh,
        tau_min: d.tau_schedule.tau_min,
        tau_max: d.tau_schedule.tau_max,
        switch_mask_ratio: d.switch_mask_ratio,
        top_layer_fraction: DEFAULT_TOP_LAYER_FRACTION,
        committer: DapdCommitter::Argmax,
    }
}

/// Creates the exact oracle denoiser.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn dapd_denoiser_oracle(out: *mut *mut DapdDenoiser) -> DapdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(DapdDenoiser { inner: Inner::Oracle }));
        Ok(())
    })
}

/// Loads a checkpoint file as a denoiser.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dapd_denoiser_load(path: *const c_char, out: *mut *mut DapdDenoiser) -> DapdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(DapdStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ckpt = Checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(DapdDenoiser {
            inner: Inner::Model(Box::new(ToyDenoiser::new(ckpt))),
        }));
        Ok(())
    })
}

/// Releases a denoiser. Null is ignored.
///
/// # Safety
/// `d` must come from a `dapd_denoiser_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dapd_denoiser_free(d: *mut DapdDenoiser) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Attention layers and heads of a model; both zero for the oracle.
///
/// # Safety
/// `d` must be a live handle; `layers` and `heads` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dapd_denoiser_shape(
    d: *const DapdDenoiser,
    layers: *mut usize,
    heads: *mut usize,
) -> DapdStatus {
    guard(|| {
        let d = d.as_ref().ok_or_else(|| null("denoiser"))?;
        if layers.is_null() || heads.is_null() {
            return Err(null("output"));
        }
        let (l, h) = match &d.inner {
            Inner::Oracle => (0, 0),
            Inner::Model(m) => (m.checkpoint().config().num_layers, m.checkpoint().config().num_heads),
        };
        *layers = l;
        *heads = h;
        Ok(())
    })
}

/// One forward pass. Writes `9 x 3` marginals (rows of observed positions are zero)
/// and, if `attention` is non-null, `layers * heads * 9 * 9` attention weights
/// (for the oracle: one `9 x 9` binary edge-score map).
///
/// # Safety
/// `tokens` must hold 9 values, `marginals` room for 27, `attention` room as described.
#[no_mangle]
pub unsafe extern "C" fn dapd_forward(
    d: *const DapdDenoiser,
    tokens: *const i32,
    marginals: *mut f64,
    attention: *mut f64,
) -> DapdStatus {
    guard(|| {
        let d = d.as_ref().ok_or_else(|| null("denoiser"))?;
        if marginals.is_null() {
            return Err(null("marginals"));
        }
        let state = read_state(tokens)?;
        let out = d.denoise(&state)?;
        let m = std::slice::from_raw_parts_mut(marginals, SEQ_LEN * NUM_SYMBOLS);
        m.fill(0.0);
        for (p, row) in out.positions.iter().zip(&out.marginals) {
            m[p * NUM_SYMBOLS..(p + 1) * NUM_SYMBOLS].copy_from_slice(row);
        }
        if !attention.is_null() {
            let maps: Vec<&Matrix> = match &out.dependency {
                DependencySignal::Attention(stack) => stack.layers.iter().flatten().collect(),
                DependencySignal::EdgeScores(s) => vec![s],
                DependencySignal::None => vec![],
            };
            let dst = std::slice::from_raw_parts_mut(attention, maps.len() * SEQ_LEN * SEQ_LEN);
            for (k, map) in maps.iter().enumerate() {
                dst[k * SEQ_LEN * SEQ_LEN..(k + 1) * SEQ_LEN * SEQ_LEN].copy_from_slice(map.as_slice());
            }
        }
        Ok(())
    })
}

/// Decodes a toy sequence to completion. `final_tokens` receives 9 symbols and
/// `nfe` the number of forward passes. If `trace_json` is non-null it receives the
/// trace as a JSON string to be released with `dapd_string_free`.
///
/// # Safety
/// All pointers must be valid; `initial` holds 9 values and `final_tokens` room for 9.
#[no_mangle]
pub unsafe extern "C" fn dapd_decode(
    d: *const DapdDenoiser,
    strategy: *const DapdStrategyConfig,
    initial: *const i32,
    seed: u64,
    final_tokens: *mut u32,
    nfe: *mut usize,
    trace_json: *mut *mut c_char,
) -> DapdStatus {
    guard(|| {
        let d = d.as_ref().ok_or_else(|| null("denoiser"))?;
        let cfg = strategy.as_ref().ok_or_else(|| null("strategy"))?.to_config()?;
        if final_tokens.is_null() || nfe.is_null() {
            return Err(null("output"));
        }
        let state = read_state(initial)?;
        let (_, trace) = decode(d, &cfg, &state, seed)?;
        std::slice::from_raw_parts_mut(final_tokens, SEQ_LEN).copy_from_slice(&trace.final_tokens);
        *nfe = trace.nfe;
        if !trace_json.is_null() {
            let json = CString::new(trace.to_json_line()).expect("JSON has no NUL");
            *trace_json = json.into_raw();
        }
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dapd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Greedy independent-set selection on an `n x n` score matrix: symmetrizes the
/// scores, keeps edges with score `> tau`, and scans nodes by descending weight
/// (ties by index). Writes the selected node indices in admission order.
///
/// # Safety
/// `scores` holds `n * n` values, `weights` `n` values, `members` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn dapd_welsh_powell_select(
    scores: *const f64,
    n: usize,
    tau: f64,
    weights: *const f64,
    members: *mut usize,
    count: *mut usize,
) -> DapdStatus {
    guard(|| {
        if scores.is_null() || weights.is_null() || members.is_null() || count.is_null() {
            return Err(null("argument"));
        }
        if tau.is_nan() || tau < 0.0 {
            return Err(Fail(DapdStatus::InvalidArgument, "tau must be >= 0".into()));
        }
        let m = Matrix::from_vec(n, n, std::slice::from_raw_parts(scores, n * n).to_vec());
        let positions: Vec<usize> = (0..n).collect();
        let graph = build_graph(&symmetrize_scores(&m, &positions)?, tau)?;
        let set = welsh_powell_select(&graph, std::slice::from_raw_parts(weights, n))?;
        std::slice::from_raw_parts_mut(members, set.members.len()).copy_from_slice(&set.members);
        *count = set.members.len();
        Ok(())
    })
}
