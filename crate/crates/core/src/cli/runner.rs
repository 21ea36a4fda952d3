use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::attention::{mode_flops_per_layer, AttentionMode, Probe};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::instrument::{
    average_protocol, sample_conditioning, write_condition_csv, write_summary_csv, write_weight_csv,
    ConditionRecord, RunSummary, SummaryRow,
};
use crate::linalg::Matrix;
use crate::tasks::TaskInstance;
use crate::transformer::{accuracy, adam_step, batch_loss, AdamState, ModelParams};

pub const THREADS_ENV: &str = "PRECOND_ATTN_THREADS";

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub rows: Vec<SummaryRow>,
    pub records: Vec<ConditionRecord>,
    pub params: ModelParams<Matrix>,
    pub total_flops: u64,
}

impl RunOutput {
    pub fn summary(&self, target: Option<f64>) -> RunSummary {
        RunSummary::from_rows(&self.rows, target, self.total_flops)
    }
}

/// steps × layers × per-layer preconditioner cost for one sequence.
pub fn total_flops(cfg: &ExperimentConfig) -> u64 {
    let spec = cfg.model().attention_spec(cfg.task.max_len());
    cfg.steps * cfg.layers as u64 * mode_flops_per_layer(&spec)
}

/// Trains one model. Conditioning samples use a separate constant-only
/// forward pass, so turning them off leaves the trajectory unchanged.
pub fn train(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let model = cfg.model();
    let mut params = ModelParams::init(&model, cfg.seed)?;
    let mut state = AdamState::new(&params.tensors(), params.decay_mask());
    let eval: Vec<TaskInstance> = cfg
        .task
        .stream(stream_seed(cfg.seed, EVAL_STREAM), cfg.eval_size)?
        .collect();
    let probe: Vec<&[usize]> = eval
        .iter()
        .take(cfg.probe_size)
        .map(|i| i.tokens.as_slice())
        .collect();
    let mut train = cfg.task.stream(
        stream_seed(cfg.seed, TRAIN_STREAM),
        cfg.steps as usize * cfg.batch_size,
    )?;

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for step in 1..=cfg.steps {
        let batch: Vec<TaskInstance> = train.by_ref().take(cfg.batch_size).collect();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let (loss, _) = batch_loss(&mut tape, &vars, &model, &batch, &mut Probe::default())?;
        let train_loss = tape.value(loss).get(0, 0);
        if !train_loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        tape.backward(loss)?;
        let grads: Vec<Matrix> = vars.tensors().into_iter().map(|&v| tape.grad(v)).collect();
        adam_step(&mut params.tensors_mut(), &grads, &mut state, &cfg.optimizer);

        let sample = cfg.instrument_every > 0 && step % cfg.instrument_every == 0;
        let evaluate = step % cfg.eval_every == 0 || step == cfg.steps;
        if !(sample || evaluate) {
            continue;
        }
        let avg_kappa = if sample {
            let step_records = sample_conditioning(&params, &model, &probe, step)?;
            let avg = average_protocol(&step_records).value;
            records.extend(step_records);
            avg
        } else {
            None
        };
        let eval_acc = if evaluate {
            Some(accuracy(&params, &model, &eval)?)
        } else {
            None
        };
        rows.push(SummaryRow {
            step,
            avg_kappa,
            train_loss,
            eval_acc,
        });
    }
    Ok(RunOutput {
        config: cfg.clone(),
        rows,
        records,
        params,
        total_flops: total_flops(cfg),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub wall_seconds: f64,
    pub total_preconditioner_flops: u64,
    pub parameter_count: usize,
    pub final_accuracy: f64,
}

const PARAMS_MAGIC: &[u8; 4] = b"PATN";

/// Little-endian blob: magic, tensor count, then per tensor rows, cols
/// (u32) and row-major f64 data, in [`ModelParams::tensors`] order.
pub fn write_params<W: Write>(mut w: W, params: &ModelParams<Matrix>) -> std::io::Result<()> {
    let tensors = params.tensors();
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a blob written by [`write_params`] back as a flat tensor list.
pub fn read_params<R: Read>(mut r: R) -> Result<Vec<Matrix>> {
    let bad = |e: std::io::Error| Error::Input(format!("parameter blob: {e}"));
    let mut u32_buf = [0u8; 4];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::Input("parameter blob: bad magic".into()));
    }
    r.read_exact(&mut u32_buf).map_err(bad)?;
    let count = u32::from_le_bytes(u32_buf);
    let mut out = Vec::new();
    for _ in 0..count {
        r.read_exact(&mut u32_buf).map_err(bad)?;
        let rows = u32::from_le_bytes(u32_buf) as usize;
        r.read_exact(&mut u32_buf).map_err(bad)?;
        let cols = u32::from_le_bytes(u32_buf) as usize;
        let mut data = vec![0.0; rows * cols];
        let mut f = [0u8; 8];
        for x in &mut data {
            r.read_exact(&mut f).map_err(bad)?;
            *x = f64::from_le_bytes(f);
        }
        out.push(Matrix::from_vec(rows, cols, data)?);
    }
    Ok(out)
}

fn write_file<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = File::create(path).map(BufWriter::new).map_err(io)?;
    body(&mut w).map_err(io)?;
    w.into_inner().map_err(|e| Error::io(path, e.error()))?.sync_all().map_err(io)
}

/// Writes summary.csv, condition.csv, weight_condition.csv, params.bin and
/// manifest.json into `dir`.
pub fn write_artifacts(dir: &Path, run: &RunOutput, wall_seconds: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("summary.csv"), |w| write_summary_csv(w, &run.rows))?;
    write_file(&dir.join("condition.csv"), |w| write_condition_csv(w, &run.records))?;
    write_file(&dir.join("weight_condition.csv"), |w| write_weight_csv(w, &run.records))?;
    write_file(&dir.join("params.bin"), |w| write_params(w, &run.params))?;

    let manifest = Manifest {
        config: run.config.clone(),
        wall_seconds,
        total_preconditioner_flops: run.total_flops,
        parameter_count: run.params.parameter_count(),
        final_accuracy: run.summary(None).final_accuracy,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Trains and writes artifacts into `dir`.
pub fn train_to(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let start = Instant::now();
    let run = train(cfg)?;
    write_artifacts(dir, &run, start.elapsed().as_secs_f64())?;
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct SeedComparison {
    pub seed: u64,
    pub target: f64,
    pub standard: RunSummary,
    pub preconditioned: RunSummary,
    /// Fraction of commonly logged steps where the preconditioned run's
    /// averaged κ is strictly lower. `None` without shared steps.
    pub kappa_win_fraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub variant: AttentionMode,
    pub seeds: Vec<SeedComparison>,
}

/// Median where `None` ranks above every value; the mean of the two middle
/// values for even counts.
pub fn median_steps(values: &[Option<u64>]) -> Option<f64> {
    let mut v: Vec<Option<u64>> = values.to_vec();
    v.sort_by_key(|x| x.unwrap_or(u64::MAX));
    let n = v.len();
    if n == 0 {
        return None;
    }
    if n % 2 == 1 {
        v[n / 2].map(|x| x as f64)
    } else {
        Some((v[n / 2 - 1]? as f64 + v[n / 2]? as f64) / 2.0)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some((v[n / 2 - 1] + v[n / 2]) / 2.0),
    }
}

fn kappa_win_fraction(standard: &RunSummary, precond: &RunSummary) -> Option<f64> {
    let mut shared = 0usize;
    let mut wins = 0usize;
    for &(step, k) in &precond.kappa_series {
        if let Some(&(_, ks)) = standard.kappa_series.iter().find(|(s, _)| *s == step) {
            shared += 1;
            if k < ks {
                wins += 1;
            }
        }
    }
    (shared > 0).then(|| wins as f64 / shared as f64)
}

/// `(none ≤ none)` holds; a preconditioned run that never reaches the
/// target loses to any standard run that does.
fn le_steps(a: Option<f64>, b: Option<f64>) -> bool {
    a.unwrap_or(f64::INFINITY) <= b.unwrap_or(f64::INFINITY)
}

impl Comparison {
    pub fn median_steps_standard(&self) -> Option<f64> {
        median_steps(&self.seeds.iter().map(|s| s.standard.steps_to_target).collect::<Vec<_>>())
    }

    pub fn median_steps_preconditioned(&self) -> Option<f64> {
        median_steps(
            &self
                .seeds
                .iter()
                .map(|s| s.preconditioned.steps_to_target)
                .collect::<Vec<_>>(),
        )
    }

    /// Median over seeds of [`SeedComparison::kappa_win_fraction`].
    pub fn median_kappa_win_fraction(&self) -> Option<f64> {
        let f: Vec<f64> = self.seeds.iter().filter_map(|s| s.kappa_win_fraction).collect();
        median(&f)
    }

    pub fn preconditioned_not_slower(&self) -> bool {
        le_steps(self.median_steps_preconditioned(), self.median_steps_standard())
    }

    pub fn report(&self) -> String {
        let fmt_steps = |s: Option<u64>| s.map_or_else(|| "never".to_string(), |s| s.to_string());
        let fmt_med = |s: Option<f64>| s.map_or_else(|| "never".to_string(), |s| format!("{s}"));
        let mut out = String::new();
        let _ = writeln!(out, "standard vs {} over {} seeds", self.variant, self.seeds.len());
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:>6} {:>8} {:>10} {:>10} {:>9} {:>9} {:>10}",
            "seed", "target", "std_steps", "pre_steps", "std_acc", "pre_acc", "kappa_win"
        );
        for s in &self.seeds {
            let _ = writeln!(
                out,
                "{:>6} {:>8.4} {:>10} {:>10} {:>9.4} {:>9.4} {:>10}",
                s.seed,
                s.target,
                fmt_steps(s.standard.steps_to_target),
                fmt_steps(s.preconditioned.steps_to_target),
                s.standard.final_accuracy,
                s.preconditioned.final_accuracy,
                s.kappa_win_fraction
                    .map_or_else(|| "n/a".to_string(), |f| format!("{f:.3}"))
            );
        }
        let _ = writeln!(out);
        let std_med = self.median_steps_standard();
        let pre_med = self.median_steps_preconditioned();
        let _ = writeln!(out, "median steps to target: standard {}, preconditioned {}", fmt_med(std_med), fmt_med(pre_med));
        if let (Some(a), Some(b)) = (std_med, pre_med) {
            if a > 0.0 {
                let _ = writeln!(out, "relative step reduction: {:.1}%", 100.0 * (a - b) / a);
            }
        }
        let _ = writeln!(
            out,
            "median fraction of logged steps with lower averaged kappa: {}",
            self.median_kappa_win_fraction()
                .map_or_else(|| "n/a".to_string(), |f| format!("{f:.3}"))
        );
        let _ = writeln!(out, "preconditioned not slower: {}", self.preconditioned_not_slower());
        out
    }
}

pub fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// Trains the standard variant and the preconditioned variant (the
/// configured mode, or output preconditioning when the configured mode is
/// standard) for `cfg.seeds` consecutive seeds. With `out`, every run
/// writes its artifacts to `out/<mode>/seed-<seed>/` and the comparison
/// writes `kappa_curves.csv` and `report.txt`.
pub fn compare(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Comparison> {
    cfg.validate()?;
    let variant = if cfg.mode.is_preconditioned() {
        cfg.mode
    } else {
        AttentionMode::PrecondOutput
    };
    let jobs: Vec<ExperimentConfig> = (0..cfg.seeds as u64)
        .flat_map(|i| {
            [AttentionMode::Standard, variant].map(|mode| ExperimentConfig {
                seed: cfg.seed + i,
                mode,
                ..cfg.clone()
            })
        })
        .collect();
    let run_one = |job: &ExperimentConfig| -> Result<RunOutput> {
        match out {
            Some(dir) => {
                let sub = dir.join(job.mode.as_str()).join(format!("seed-{}", job.seed));
                train_to(job, &sub)
            }
            None => train(job),
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let runs: Vec<RunOutput> = pool.install(|| jobs.par_iter().map(run_one).collect::<Result<_>>())?;

    let seeds = runs
        .chunks(2)
        .map(|pair| {
            let (std_run, pre_run) = (&pair[0], &pair[1]);
            let target = cfg
                .target
                .unwrap_or_else(|| std_run.summary(None).final_accuracy);
            let standard = std_run.summary(Some(target));
            let preconditioned = pre_run.summary(Some(target));
            SeedComparison {
                seed: std_run.config.seed,
                target,
                kappa_win_fraction: kappa_win_fraction(&standard, &preconditioned),
                standard,
                preconditioned,
            }
        })
        .collect();
    let comparison = Comparison { variant, seeds };
    if let Some(dir) = out {
        write_comparison(dir, &comparison)?;
    }
    Ok(comparison)
}

fn write_comparison(dir: &Path, c: &Comparison) -> Result<()> {
    let path = dir.join("kappa_curves.csv");
    let mut text = String::from("step,variant,seed,avg_kappa\n");
    for s in &c.seeds {
        for (mode, summary) in [(AttentionMode::Standard, &s.standard), (c.variant, &s.preconditioned)] {
            for (step, k) in &summary.kappa_series {
                let _ = writeln!(text, "{step},{mode},{},{k}", s.seed);
            }
        }
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("report.txt");
    fs::write(&path, c.report()).map_err(|e| Error::io(&path, e))
}
