//! Standard and preconditioned attention heads, and the analytic cost of
//! building their preconditioners.
//!
//! In the preconditioned modes the diagonal `C` is computed from the live
//! forward value and placed on the tape as a constant, so gradients flow
//! through the factor it multiplies but never through `C` itself.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{preconditioner_diagonal_counted, FlopCount, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Standard,
    /// `C · softmax(q kᵀ) v`, with `C` built from the head output.
    PrecondOutput,
    /// `(C · softmax(q kᵀ)) v`, with `C` built from the weight matrix.
    PrecondWeights,
}

impl AttentionMode {
    pub fn is_preconditioned(self) -> bool {
        !matches!(self, AttentionMode::Standard)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Standard => "standard",
            AttentionMode::PrecondOutput => "precond-output",
            AttentionMode::PrecondWeights => "precond-weights",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AttentionMode::Standard),
            "precond-output" => Ok(AttentionMode::PrecondOutput),
            "precond-weights" => Ok(AttentionMode::PrecondWeights),
            other => Err(Error::Input(format!(
                "unknown attention mode '{other}' (expected standard, precond-output or precond-weights)"
            ))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub model_dim: usize,
    pub head_count: usize,
    pub seq_len: usize,
    pub mode: AttentionMode,
    /// Divide scores by √d_h.
    pub scale_scores: bool,
}

impl AttentionSpec {
    pub fn new(
        model_dim: usize,
        head_count: usize,
        seq_len: usize,
        mode: AttentionMode,
        scale_scores: bool,
    ) -> Result<Self> {
        let spec = AttentionSpec {
            model_dim,
            head_count,
            seq_len,
            mode,
            scale_scores,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.head_count == 0 || self.seq_len == 0 {
            return Err(Error::Input(
                "model_dim, head_count and seq_len must be positive".into(),
            ));
        }
        if !self.model_dim.is_multiple_of(self.head_count) {
            return Err(Error::Input(format!(
                "model_dim {} is not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }

    pub fn score_scale(&self) -> f64 {
        if self.scale_scores {
            1.0 / (self.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub q: T,
    pub k: T,
    pub v: T,
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams {
            q: f(&self.q),
            k: f(&self.k),
            v: f(&self.v),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.q, &self.k, &self.v].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        [&mut self.q, &mut self.k, &mut self.v].into_iter()
    }
}

impl HeadParams<Matrix> {
    /// Xavier-uniform init of the three D×d_h projections.
    pub fn xavier(model_dim: usize, head_dim: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            q: xavier_uniform(model_dim, head_dim, rng),
            k: xavier_uniform(model_dim, head_dim, rng),
            v: xavier_uniform(model_dim, head_dim, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> HeadParams<Var> {
        self.map(|m| tape.leaf(m.clone()))
    }
}

pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

/// One captured head evaluation, detached from the tape.
#[derive(Debug, Clone)]
pub struct HeadCapture {
    pub layer: usize,
    pub head: usize,
    pub sequence: usize,
    /// The head output (after preconditioning when enabled).
    pub output: Matrix,
    /// softmax(q kᵀ), before any preconditioning.
    pub weights: Matrix,
}

/// Side channel threaded through a forward pass.
///
/// Inert by default. It can capture per-head values for instrumentation,
/// record every preconditioner built, count the operations spent building
/// them, or replay previously recorded preconditioners so that `C` stays
/// frozen while the inputs are perturbed.
#[derive(Debug, Default, Clone)]
pub struct Probe {
    pub capture_heads: bool,
    pub heads: Vec<HeadCapture>,
    pub record_preconditioners: bool,
    pub preconditioners: Vec<Matrix>,
    pub count_flops: bool,
    pub flops: Vec<FlopCount>,
    replay: Option<VecDeque<Matrix>>,
    pub(crate) layer: usize,
    pub(crate) sequence: usize,
}

impl Probe {
    pub fn capturing() -> Self {
        Probe {
            capture_heads: true,
            ..Probe::default()
        }
    }

    pub fn recording() -> Self {
        Probe {
            record_preconditioners: true,
            ..Probe::default()
        }
    }

    pub fn counting() -> Self {
        Probe {
            count_flops: true,
            ..Probe::default()
        }
    }

    /// Replays `preconditioners` in the order they were recorded.
    pub fn replaying(preconditioners: Vec<Matrix>) -> Self {
        Probe {
            replay: Some(preconditioners.into()),
            ..Probe::default()
        }
    }

    pub fn set_layer(&mut self, layer: usize) {
        self.layer = layer;
    }

    pub fn set_sequence(&mut self, sequence: usize) {
        self.sequence = sequence;
    }

    fn preconditioner_for(&mut self, target: &Matrix) -> Result<Matrix> {
        let c = match self.replay.as_mut() {
            Some(queue) => {
                let c = queue.pop_front().ok_or_else(|| {
                    Error::Contract("replay ran out of recorded preconditioners".into())
                })?;
                if c.shape() != (target.rows(), target.rows()) {
                    return Err(Error::shape(
                        "replayed preconditioner",
                        c.shape(),
                        target.shape(),
                    ));
                }
                c
            }
            None => {
                let mut count = FlopCount::default();
                let diag = preconditioner_diagonal_counted(target, &mut count);
                if self.count_flops {
                    self.flops.push(count);
                }
                Matrix::diag(&diag)
            }
        };
        if self.record_preconditioners {
            self.preconditioners.push(c.clone());
        }
        Ok(c)
    }
}

/// Attention over already-projected `q`, `k`, `v` (each n×d_h).
#[allow(clippy::too_many_arguments)]
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mode: AttentionMode,
    score_scale: f64,
    head: usize,
    probe: &mut Probe,
) -> Result<Var> {
    let kt = tape.transpose(k);
    let mut scores = tape.matmul(q, kt)?;
    if score_scale != 1.0 {
        scores = tape.scale(scores, score_scale);
    }
    let weights = tape.softmax_rows(scores);
    let out = match mode {
        AttentionMode::Standard => tape.matmul(weights, v)?,
        AttentionMode::PrecondOutput => {
            let a = tape.matmul(weights, v)?;
            let c = probe.preconditioner_for(tape.value(a))?;
            let c = tape.constant(c);
            tape.matmul(c, a)?
        }
        AttentionMode::PrecondWeights => {
            let c = probe.preconditioner_for(tape.value(weights))?;
            let c = tape.constant(c);
            let cw = tape.matmul(c, weights)?;
            tape.matmul(cw, v)?
        }
    };
    if probe.capture_heads {
        probe.heads.push(HeadCapture {
            layer: probe.layer,
            head,
            sequence: probe.sequence,
            output: tape.value(out).clone(),
            weights: tape.value(weights).clone(),
        });
    }
    Ok(out)
}

fn check_input(tape: &Tape, x: Var, p: &HeadParams<Var>) -> Result<()> {
    let xs = tape.value(x).shape();
    for w in p.iter() {
        let ws = tape.value(*w).shape();
        if ws.0 != xs.1 {
            return Err(Error::shape("attention projection", xs, ws));
        }
    }
    Ok(())
}

fn project(tape: &mut Tape, x: Var, p: &HeadParams<Var>) -> Result<(Var, Var, Var)> {
    check_input(tape, x, p)?;
    Ok((tape.matmul(x, p.q)?, tape.matmul(x, p.k)?, tape.matmul(x, p.v)?))
}

/// softmax((xQ)(xK)ᵀ · s) (xV).
pub fn standard_head(
    tape: &mut Tape,
    x: Var,
    p: &HeadParams<Var>,
    spec: &AttentionSpec,
    probe: &mut Probe,
) -> Result<Var> {
    let (q, k, v) = project(tape, x, p)?;
    attend(tape, q, k, v, AttentionMode::Standard, spec.score_scale(), 0, probe)
}

pub fn preconditioned_head(
    tape: &mut Tape,
    x: Var,
    p: &HeadParams<Var>,
    spec: &AttentionSpec,
    mode: AttentionMode,
    probe: &mut Probe,
) -> Result<Var> {
    if !mode.is_preconditioned() {
        return Err(Error::Contract(
            "preconditioned_head needs a preconditioned mode".into(),
        ));
    }
    let (q, k, v) = project(tape, x, p)?;
    attend(tape, q, k, v, mode, spec.score_scale(), 0, probe)
}

/// Column-concatenation of every head applied to one n×D sequence.
pub fn multi_head(
    tape: &mut Tape,
    x: Var,
    params: &[HeadParams<Var>],
    spec: &AttentionSpec,
    probe: &mut Probe,
) -> Result<Var> {
    let n = tape.value(x).rows();
    multi_head_batched(tape, x, &[n], params, spec, probe)
}

/// Multi-head attention over a row-stack of sequences with the given
/// lengths. Projections run once on the whole stack; attention itself
/// never mixes rows belonging to different sequences.
pub fn multi_head_batched(
    tape: &mut Tape,
    x: Var,
    seq_lens: &[usize],
    params: &[HeadParams<Var>],
    spec: &AttentionSpec,
    probe: &mut Probe,
) -> Result<Var> {
    if params.len() != spec.head_count {
        return Err(Error::Contract(format!(
            "expected {} heads, got {}",
            spec.head_count,
            params.len()
        )));
    }
    let total: usize = seq_lens.iter().sum();
    if total != tape.value(x).rows() {
        return Err(Error::shape(
            "multi_head_batched",
            tape.value(x).shape(),
            (total, spec.model_dim),
        ));
    }
    let projected = params
        .iter()
        .map(|p| project(tape, x, p))
        .collect::<Result<Vec<_>>>()?;

    let single = seq_lens.len() == 1;
    let mut sequences = Vec::with_capacity(seq_lens.len());
    let mut start = 0;
    for (s, &len) in seq_lens.iter().enumerate() {
        probe.set_sequence(s);
        let mut heads = Vec::with_capacity(params.len());
        for (h, &(q, k, v)) in projected.iter().enumerate() {
            let (q, k, v) = if single {
                (q, k, v)
            } else {
                (
                    tape.slice_rows(q, start, len)?,
                    tape.slice_rows(k, start, len)?,
                    tape.slice_rows(v, start, len)?,
                )
            };
            heads.push(attend(tape, q, k, v, spec.mode, spec.score_scale(), h, probe)?);
        }
        sequences.push(if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        });
        start += len;
    }
    if sequences.len() == 1 {
        Ok(sequences[0])
    } else {
        tape.concat_rows(&sequences)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreconditionerFlops {
    /// n · (2·D/h + 1)
    pub per_head: u64,
    /// n · (2·D + h)
    pub per_layer: u64,
}

/// Extra operations a preconditioned layer spends on building its `C`s:
/// per row, d_h squares, d_h − 1 additions, one square root and one
/// division.
pub fn preconditioner_flops(spec: &AttentionSpec) -> PreconditionerFlops {
    let n = spec.seq_len as u64;
    let d = spec.model_dim as u64;
    let h = spec.head_count as u64;
    PreconditionerFlops {
        per_head: n * (2 * (d / h) + 1),
        per_layer: n * (2 * d + h),
    }
}

/// Extra operations one layer spends on preconditioners for one sequence in
/// `spec.mode`: zero for standard attention, [`preconditioner_flops`] for
/// output preconditioning, and `h · n(2n + 1)` when the n×n weight matrix
/// is the target.
pub fn mode_flops_per_layer(spec: &AttentionSpec) -> u64 {
    let n = spec.seq_len as u64;
    match spec.mode {
        AttentionMode::Standard => 0,
        AttentionMode::PrecondOutput => preconditioner_flops(spec).per_layer,
        AttentionMode::PrecondWeights => spec.head_count as u64 * n * (2 * n + 1),
    }
}

/// Runs one preconditioned-output multi-head forward pass on random data
/// and returns the operation count of every preconditioner it built.
pub fn measure_preconditioner_flops(spec: &AttentionSpec, rng: &mut impl Rng) -> Result<Vec<FlopCount>> {
    let spec = AttentionSpec {
        mode: AttentionMode::PrecondOutput,
        ..*spec
    };
    spec.validate()?;
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::from_fn(spec.seq_len, spec.model_dim, |_, _| {
        rng.random_range(-1.0..1.0)
    }));
    let params: Vec<_> = (0..spec.head_count)
        .map(|_| HeadParams::xavier(spec.model_dim, spec.head_dim(), rng).register(&mut tape))
        .collect();
    let mut probe = Probe::counting();
    multi_head(&mut tape, x, &params, &spec, &mut probe)?;
    Ok(probe.flops)
}
