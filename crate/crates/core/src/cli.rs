use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dapd::decode::{decode, Committer, DenoiserOutput, SequenceState, StrategyConfig};
use dapd::depgraph::{TauSchedule, DEFAULT_TOP_LAYER_FRACTION};
use dapd::metrics::{compare_run, derive_seed, eval_graph_run, par_map, CompareConfig, GraphEvalConfig, StrategyRun};
use dapd::oracle::{ground_truth_subgraph, mi_table, oracle_marginals, parse_observation, OracleDenoiser};
use dapd::toymdm::{
    gen_dataset, read_dataset, train::train_with_progress, write_dataset, Checkpoint, LossEstimator, ModelConfig,
    ToyDenoiser, TrainConfig, POSITION_LABELS, SEQ_LEN,
};
use dapd::{DapdError, Denoiser};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_ZERO_SUPPORT: i32 = 5;

/// Dependency-aware parallel decoding on a synthetic MRF testbed.
#[derive(Debug, Parser)]
#[command(name = "dapd", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a toy dataset, one example of nine symbols per line.
    GenData(GenDataArgs),
    /// Train a masked denoiser on a dataset.
    Train(TrainArgs),
    /// Score attention-derived edges against the ground-truth graph.
    EvalGraph(EvalGraphArgs),
    /// Decode sequences and write their traces as JSON lines.
    Decode(DecodeArgs),
    /// Compare decoding strategies on one denoiser.
    Compare(CompareArgs),
    /// Dump exact marginals, conditional MI or the ground-truth graph.
    Oracle(OracleArgs),
}

/// Accepted by every subcommand: a `key=value` file whose keys are long flag names.
#[derive(Debug, Args)]
struct ConfigArg {
    /// Flat key=value file; command-line flags take precedence over it
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Number of examples
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Loss log (CSV step,loss); defaults to the checkpoint path with a .csv extension
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Use fixed sinusoidal position codes instead of learned ones
    #[arg(long)]
    sinusoidal: bool,
    #[arg(long, value_enum, default_value_t = EstimatorArg::MaskCount)]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimatorArg {
    /// Uniform mask count with weight L/m
    MaskCount,
    /// Mask rate t ~ U(0,1] with weight 1/t
    ContinuousTime,
}

#[derive(Debug, Args)]
struct EvalGraphArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOP_LAYER_FRACTION)]
    top_layer_fraction: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// JSON report path; a CSV with the same stem is written next to it
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// Model checkpoint
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    ckpt: Option<PathBuf>,
    /// Use the exact oracle denoiser instead of a model
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Args)]
struct StrategyArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.9)]
    conf_thresh: f64,
    #[arg(long, default_value_t = 0.001)]
    kl_thresh: f64,
    #[arg(long, default_value_t = 0.01)]
    tau_min: f64,
    #[arg(long, default_value_t = 0.05)]
    tau_max: f64,
    #[arg(long, default_value_t = 0.5)]
    switch_mask_ratio: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_LAYER_FRACTION)]
    top_layer_fraction: f64,
    #[arg(long, value_enum, default_value_t = CommitterArg::Argmax)]
    committer: CommitterArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CommitterArg {
    Argmax,
    Sample,
}

impl StrategyArgs {
    fn base(&self) -> Result<StrategyConfig> {
        let cfg = StrategyConfig {
            k: self.k,
            conf_thresh: self.conf_thresh,
            kl_thresh: self.kl_thresh,
            tau_schedule: TauSchedule::new(self.tau_min, self.tau_max)?,
            switch_mask_ratio: self.switch_mask_ratio,
            top_layer_fraction: self.top_layer_fraction,
            committer: match self.committer {
                CommitterArg::Argmax => Committer::Argmax,
                CommitterArg::Sample => Committer::Sample,
            },
            ..StrategyConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// sequential, topk, conf_threshold, kl_stability, dapd or fullparallel
    #[arg(long, default_value = "dapd")]
    strategy: String,
    #[command(flatten)]
    strategy_args: StrategyArgs,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed positions, e.g. X1=0,Y2=1
    #[arg(long, default_value = "")]
    observe: String,
    /// Trace output (JSON lines)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Comma-separated strategy names; fullparallel is topk with k = sequence length
    #[arg(long, default_value = "sequential,topk,conf_threshold,kl_stability,dapd")]
    strategies: String,
    #[command(flatten)]
    strategy_args: StrategyArgs,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// JSON report path; a CSV with the same stem is written next to it
    #[arg(long)]
    out: PathBuf,
    /// Optional trace output (JSON lines)
    #[arg(long)]
    traces: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OracleMode {
    Marginals,
    Mi,
    Graph,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, value_enum, default_value_t = OracleMode::Marginals)]
    mode: OracleMode,
    /// Observed positions, e.g. X1=0,Y2=1
    #[arg(long, default_value = "")]
    observe: String,
    /// CSV output
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

/// Either the oracle or a trained model.
enum Source {
    Oracle,
    Model(Box<ToyDenoiser>),
}

impl Denoiser for Source {
    fn denoise(&self, state: &SequenceState) -> dapd::Result<DenoiserOutput> {
        match self {
            Source::Oracle => OracleDenoiser.denoise(state),
            Source::Model(m) => m.denoise(state),
        }
    }
}

impl SourceArgs {
    fn load(&self) -> Result<Source> {
        match &self.ckpt {
            Some(path) if !self.oracle => Ok(Source::Model(Box::new(load_checkpoint(path)?))),
            _ => Ok(Source::Oracle),
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<ToyDenoiser> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ToyDenoiser::new(ckpt))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)
        .map_err(DapdError::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path)
        .map_err(DapdError::from)
        .with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn initial_state(observe: &str) -> Result<SequenceState> {
    let obs = parse_observation(observe)?;
    Ok(SequenceState::from_tokens(obs.to_vec(), 0)?)
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let data = gen_dataset(a.n, a.seed)?;
    let mut w = create(&a.out)?;
    write_dataset(&mut w, &data)?;
    w.flush().map_err(DapdError::from)?;
    let valid = data.iter().filter(|e| e.is_valid()).count();
    println!("wrote {} examples to {} ({valid} valid)", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let file = File::open(&a.data)
        .map_err(DapdError::from)
        .with_context(|| format!("opening {}", a.data.display()))?;
    let data = read_dataset(BufReader::new(file))?;
    let model_cfg = ModelConfig {
        num_layers: a.layers,
        num_heads: a.heads,
        model_dim: a.dim,
        learned_pos: !a.sinusoidal,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        seed: a.seed,
        estimator: match a.estimator {
            EstimatorArg::MaskCount => LossEstimator::MaskCount,
            EstimatorArg::ContinuousTime => LossEstimator::ContinuousTime,
        },
        log_every: a.log_every,
        ..TrainConfig::default()
    };
    let (ckpt, report) = train_with_progress(&data, &model_cfg, &train_cfg, |step, loss| {
        eprintln!("step {step} loss {loss:.4}");
    })?;
    ckpt.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let log = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_file(&log, &report.to_csv())?;
    println!(
        "trained {} steps, final loss {:.4}; checkpoint {}, log {}",
        a.steps,
        report.final_loss,
        a.out.display(),
        log.display()
    );
    Ok(())
}

fn cmd_eval_graph(a: &EvalGraphArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let cfg = GraphEvalConfig {
        paths: a.paths,
        seed: a.seed,
        top_layer_fraction: a.top_layer_fraction,
        workers: a.workers,
    };
    let seeds = vec![model.checkpoint().meta().seed];
    let report = eval_graph_run(&model, &cfg, seeds)?;
    write_file(&a.out, &report.to_json())?;
    write_file(&a.out.with_extension("csv"), &report.to_csv())?;
    println!(
        "auc {:.3} ratio {:.3} ovr {:.3} over {} paths; report {}",
        report.overall.auc,
        report.overall.ratio,
        report.overall.ovr,
        report.paths,
        a.out.display()
    );
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    if a.samples == 0 {
        bail!(DapdError::InvalidArgument("samples must be >= 1".into()));
    }
    let source = a.source.load()?;
    let initial = initial_state(&a.observe)?;
    let cfg = StrategyConfig::named(&a.strategy, &a.strategy_args.base()?, initial.gen_len())?;
    let traces = par_map(a.samples, 1, |i| {
        let mut t = decode(&source, &cfg, &initial, derive_seed(a.seed, i as u64))?.1;
        t.strategy = a.strategy.clone();
        Ok(t)
    })?;
    let mut w = create(&a.out)?;
    for t in &traces {
        writeln!(w, "{}", t.to_json_line()).map_err(DapdError::from)?;
    }
    w.flush().map_err(DapdError::from)?;
    let mean_nfe = traces.iter().map(|t| t.nfe as f64).sum::<f64>() / traces.len() as f64;
    println!(
        "{} decodes, mean nfe {mean_nfe:.3}; traces {}",
        traces.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let source = a.source.load()?;
    let base = a.strategy_args.base()?;
    let initial = SequenceState::masked(&[], SEQ_LEN);
    let runs = a
        .strategies
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            Ok(StrategyRun {
                label: name.to_string(),
                config: StrategyConfig::named(name, &base, initial.gen_len())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if runs.is_empty() {
        bail!(DapdError::InvalidArgument("no strategies given".into()));
    }
    let cfg = CompareConfig {
        samples: a.samples,
        seed: a.seed,
        workers: a.workers,
        with_tv: a.source.oracle && base.committer == Committer::Sample,
    };
    let (report, traces) = compare_run(&source, &runs, &initial, &cfg)?;
    write_file(&a.out, &report.to_json())?;
    write_file(&a.out.with_extension("csv"), &report.to_csv())?;
    if let Some(path) = &a.traces {
        let mut w = create(path)?;
        for t in traces.iter().flatten() {
            writeln!(w, "{}", t.to_json_line()).map_err(DapdError::from)?;
        }
        w.flush().map_err(DapdError::from)?;
    }
    for s in &report.strategies {
        println!(
            "{:<16} nfe {:>6.3}  validity {:.4}{}",
            s.strategy,
            s.mean_nfe,
            s.validity,
            s.tv.map_or(String::new(), |tv| format!("  tv {tv:.4}"))
        );
    }
    println!("report {}", a.out.display());
    Ok(())
}

fn cmd_oracle(a: &OracleArgs) -> Result<()> {
    let obs = parse_observation(&a.observe)?;
    let csv = match a.mode {
        OracleMode::Marginals => oracle_marginals(&obs)?.to_csv(),
        OracleMode::Mi => mi_table(&obs)?.to_csv(),
        OracleMode::Graph => {
            oracle_marginals(&obs)?;
            let masked: Vec<usize> = (0..SEQ_LEN).filter(|&i| obs[i].is_none()).collect();
            let g = ground_truth_subgraph(&masked)?;
            let mut s = String::from("position");
            for &p in &masked {
                s.push(',');
                s.push_str(POSITION_LABELS[p]);
            }
            s.push_str(",degree\n");
            for (i, &p) in masked.iter().enumerate() {
                s.push_str(POSITION_LABELS[p]);
                for j in 0..masked.len() {
                    s.push_str(if g.is_adjacent(i, j) { ",1" } else { ",0" });
                }
                s.push_str(&format!(",{}\n", g.proxy_degree[i]));
            }
            s
        }
    };
    write_file(&a.out, &csv)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Finds `--config FILE` (or `--config=FILE`) in raw arguments.
fn config_path(args: &[String]) -> Option<String> {
    args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    })
}

/// Turns `key=value` lines into flags. `#` starts a comment; `key=true` is a bare switch
/// and `key=false` is dropped.
fn config_flags(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", n + 1))?;
        let key = key.trim().replace('_', "-");
        if key == "config" {
            return Err(format!("config line {}: nested config files are not supported", n + 1));
        }
        match value.trim() {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

/// Config entries go right after the subcommand so later command-line flags override them.
fn merge_config(args: Vec<String>) -> std::result::Result<Vec<String>, (i32, String)> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| (EXIT_IO, format!("error: reading config {path}: {e}")))?;
    let flags = config_flags(&text).map_err(|e| (EXIT_USAGE, format!("error: {e}")))?;
    let sub = args
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map(|i| i + 2)
        .unwrap_or(args.len());
    let mut merged = args[..sub].to_vec();
    merged.extend(flags);
    merged.extend_from_slice(&args[sub..]);
    Ok(merged)
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<DapdError>() {
            return match e {
                DapdError::Io(_) => EXIT_IO,
                DapdError::Diverged { .. } => EXIT_DIVERGED,
                DapdError::Checkpoint(_) | DapdError::CheckpointVersion { .. } => EXIT_CHECKPOINT,
                DapdError::ZeroSupport(_) => EXIT_ZERO_SUPPORT,
                DapdError::Parse(_) | DapdError::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    let args = match merge_config(args) {
        Ok(a) => a,
        Err((code, msg)) => {
            eprintln!("{msg}");
            return code;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => {
            if a.n == 0 {
                Err(DapdError::InvalidArgument("--n must be >= 1".into()).into())
            } else {
                cmd_gen_data(a)
            }
        }
        Command::Train(a) => cmd_train(a),
        Command::EvalGraph(a) => cmd_eval_graph(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Oracle(a) => cmd_oracle(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
