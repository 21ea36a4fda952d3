//! Command-line interface: `train`, `compare`, `analyze` and `flops`.

pub mod analyze;
pub mod config;
pub mod runner;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{measure_preconditioner_flops, preconditioner_flops, AttentionMode, AttentionSpec};
use crate::error::{Error, Result};

pub use analyze::{analyze_attention, analyze_matrix, ensemble_stats, parse_matrix, Analysis, EnsembleStats};
pub use config::{ExperimentConfig, Overrides};
pub use runner::{compare, train, train_to, Comparison, Manifest, RunOutput};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const SCHEMAS: &str = "\
Output files (train, and each run under compare):
  summary.csv           step,avg_kappa,train_loss,eval_acc
                        avg_kappa: mean over heads per layer, then over layers,
                        of the head-output condition number; empty when the step
                        was not sampled. eval_acc is empty between evaluations.
  condition.csv         step,layer,head,kappa,mu_log,row_norm_min,row_norm_max,flag
                        one row per head per sampled step. mu_log is ln(mu).
                        kappa and mu_log read 'inf' when flag is rank_deficient.
  weight_condition.csv  step,layer,head,kappa,mu_log,flag
                        same, for the softmax weight matrix of each head.
  params.bin            final parameters, little-endian f64.
  manifest.json         resolved config, wall time, preconditioner FLOPs.
compare also writes kappa_curves.csv (step,variant,seed,avg_kappa) and report.txt.

Exit codes: 0 success, 1 internal error, 2 usage or I/O error, 3 numerical abort.
PRECOND_ATTN_THREADS caps the number of concurrent runs in compare.";

#[derive(Debug, Parser)]
#[command(name = "precond-attn", version, about = "Row-preconditioned attention experiments", after_help = SCHEMAS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its artifacts.
    Train(RunArgs),
    /// Train standard and preconditioned variants over several seeds.
    Compare(CompareArgs),
    /// Conditioning of a matrix before and after preconditioning.
    Analyze(AnalyzeArgs),
    /// Extra operations spent building preconditioners.
    Flops(FlopsArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config (or a run manifest); unset fields take defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// standard, precond-output or precond-weights.
    #[arg(long)]
    pub mode: Option<AttentionMode>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Disable the pre-norm before the feedforward block.
    #[arg(long)]
    pub no_norm: bool,
    /// Do not divide attention scores by sqrt(d_h).
    #[arg(long)]
    pub no_scale: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of consecutive seeds, starting at --seed.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Fixed accuracy target instead of the standard run's final accuracy.
    #[arg(long)]
    pub target: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AnalyzeArgs {
    /// Matrix file: "rows cols" then row-major entries.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["random", "q"])]
    pub matrix: Option<PathBuf>,
    /// Random row-scaled matrix of this shape, e.g. 8x4.
    #[arg(long, value_name = "RxC", conflicts_with = "q")]
    pub random: Option<String>,
    /// Query, key and value files; analyzes softmax(q k^T) v.
    #[arg(long, value_name = "PATH", requires_all = ["k", "v"])]
    pub q: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub k: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub v: Option<PathBuf>,
    /// Size of the random ensemble of the same shape (0 to skip).
    #[arg(long, default_value_t = 200)]
    pub ensemble: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long = "dim", value_name = "D")]
    pub model_dim: usize,
    #[arg(long)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => load_config_file(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.apply(&Overrides {
        seed: args.seed,
        mode: args.mode,
        steps: args.steps,
        out: args.out.clone(),
        no_norm: args.no_norm,
        no_scale: args.no_scale,
    });
    cfg.validate()?;
    Ok(cfg)
}

/// Accepts a bare config or a manifest carrying one under `config`.
pub fn load_config_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: serde_json::Error| Error::Input(format!("{}: {e}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    match value.get("config") {
        Some(inner) if value.get("wall_seconds").is_some() => {
            serde_json::from_value(inner.clone()).map_err(bad)
        }
        _ => serde_json::from_value(value).map_err(bad),
    }
}

pub fn cmd_train(args: &RunArgs) -> Result<String> {
    let cfg = load_config(args)?;
    let run = train_to(&cfg, &cfg.out)?;
    let s = run.summary(None);
    Ok(format!(
        "trained {} steps ({}), final accuracy {:.4}, preconditioner FLOPs {}, artifacts in {}\n",
        cfg.steps,
        cfg.mode,
        s.final_accuracy,
        s.total_flops,
        cfg.out.display()
    ))
}

pub fn cmd_compare(args: &CompareArgs) -> Result<String> {
    let mut cfg = load_config(&args.run)?;
    if let Some(n) = args.seeds {
        cfg.seeds = n;
    }
    if args.target.is_some() {
        cfg.target = args.target;
    }
    cfg.validate()?;
    Ok(compare(&cfg, Some(&cfg.out))?.report())
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Input(format!("shape {s:?} is not RxC"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    let c: usize = c.trim().parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<String> {
    let mut analysis = match (&args.matrix, &args.random, &args.q) {
        (Some(path), _, _) => analyze_matrix(&analyze::read_matrix(path)?)?,
        (_, Some(shape), _) => {
            let (r, c) = parse_shape(shape)?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            analyze_matrix(&analyze::random_row_scaled(r, c, &mut rng))?
        }
        (_, _, Some(q)) => {
            let read = |p: &Option<PathBuf>, name: &str| {
                p.as_deref()
                    .ok_or_else(|| Error::Input(format!("--{name} is required with --q")))
                    .and_then(analyze::read_matrix)
            };
            let q = analyze::read_matrix(q)?;
            analyze_attention(&q, &read(&args.k, "k")?, &read(&args.v, "v")?)?
        }
        _ => return Err(Error::Input("give --matrix, --random or --q/--k/--v".into())),
    };
    if args.ensemble > 0 {
        let (r, c) = analysis.shape;
        analysis.ensemble = Some(ensemble_stats(r, c, args.ensemble, args.seed)?);
    }
    Ok(analysis.to_string())
}

pub fn cmd_flops(args: &FlopsArgs) -> Result<String> {
    let spec = AttentionSpec {
        model_dim: args.model_dim,
        head_count: args.heads,
        seq_len: args.n,
        mode: AttentionMode::PrecondOutput,
        scale_scores: true,
    };
    spec.validate()?;
    if args.n == 0 {
        return Err(Error::Input("n must be positive".into()));
    }
    let f = preconditioner_flops(&spec);
    let measured = measure_preconditioner_flops(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let per_layer: u64 = measured.iter().map(|c| c.total()).sum();
    let counter_agrees = per_layer == f.per_layer && measured.iter().all(|c| c.total() == f.per_head);
    Ok(format!(
        "n={} D={} h={} layers={}\n\
         per head   {}\n\
         per layer  {}\n\
         per model  {}\n\
         counter    {} per layer ({})\n",
        args.n,
        args.model_dim,
        args.heads,
        args.layers,
        f.per_head,
        f.per_layer,
        f.per_layer * args.layers as u64,
        per_layer,
        if counter_agrees { "matches" } else { "MISMATCH" }
    ))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::Numerical { .. } => EXIT_NUMERICAL,
        Error::Input(_) | Error::Io { .. } => EXIT_USAGE,
        Error::Shape { .. } | Error::Contract(_) => 1,
    }
}

/// Runs a parsed command, printing its output; returns the exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Flops(a) => cmd_flops(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
