//! Small transformer assembled from the attention heads in
//! [`crate::attention`], with learned token and position embeddings.
//!
//! A layer computes `h = A(x) + x` followed by the residual feedforward
//! `h + W₂ gelu(W₁ norm(h) + b₁) + b₂`, where `norm` is an optional
//! pre-norm with learned gain and offset.

mod adam;

pub use adam::{adam_step, AdamHyper, AdamState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_batched, xavier_uniform, AttentionMode, AttentionSpec, HeadParams, Probe,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tasks::{TaskInstance, Target};

pub const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    /// Mean over positions, then one projection per sequence.
    Pooled,
    /// One projection per position.
    PerPosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub outputs: usize,
    pub max_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub mode: AttentionMode,
    pub scale_scores: bool,
    pub norm: bool,
    pub head: OutputHead,
}

impl ModelConfig {
    pub fn attention_spec(&self, seq_len: usize) -> AttentionSpec {
        AttentionSpec {
            model_dim: self.model_dim,
            head_count: self.heads,
            seq_len,
            mode: self.mode,
            scale_scores: self.scale_scores,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("outputs", self.outputs),
            ("max_len", self.max_len),
            ("layers", self.layers),
            ("ff_dim", self.ff_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Input(format!("{name} must be positive")));
        }
        self.attention_spec(self.max_len).validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: T,
    pub offset: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub norm: Option<NormParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embed: T,
    pub pos: T,
    pub layers: Vec<LayerParams<T>>,
    pub out: T,
}

impl<T> LayerParams<T> {
    fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        for h in &self.heads {
            h.iter().for_each(&mut *f);
        }
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
        if let Some(n) = &self.norm {
            f(&n.gain);
            f(&n.offset);
        }
    }

    fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        for h in &mut self.heads {
            h.iter_mut().for_each(&mut *f);
        }
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
        if let Some(n) = &mut self.norm {
            f(&mut n.gain);
            f(&mut n.offset);
        }
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            heads: self.heads.iter().map(|h| h.map(&mut *f)).collect(),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            norm: self.norm.as_ref().map(|n| NormParams {
                gain: f(&n.gain),
                offset: f(&n.offset),
            }),
        }
    }
}

impl<T> ModelParams<T> {
    /// Every tensor in a fixed order: embeddings, layers front to back,
    /// output projection.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.embed, &self.pos];
        for layer in &self.layers {
            layer.for_each(&mut |t| out.push(t));
        }
        out.push(&self.out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed, &mut self.pos];
        for layer in &mut self.layers {
            layer.for_each_mut(&mut |t| out.push(t));
        }
        out.push(&mut self.out);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        let embed = f(&self.embed);
        let pos = f(&self.pos);
        let layers = self.layers.iter().map(|l| l.map(&mut f)).collect();
        ModelParams {
            embed,
            pos,
            layers,
            out: f(&self.out),
        }
    }
}

impl ModelParams<Matrix> {
    /// Xavier-uniform projections, zero biases, unit gains, N(0, 0.02)
    /// embeddings. The readout starts at zero so initial predictions are
    /// uniform.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
        let gaussian =
            |rows, cols, rng: &mut ChaCha8Rng| Matrix::from_fn(rows, cols, |_, _| normal.sample(rng));
        let embed = gaussian(cfg.vocab, cfg.model_dim, &mut rng);
        let pos = gaussian(cfg.max_len, cfg.model_dim, &mut rng);
        let head_dim = cfg.model_dim / cfg.heads;
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                heads: (0..cfg.heads)
                    .map(|_| HeadParams::xavier(cfg.model_dim, head_dim, &mut rng))
                    .collect(),
                w1: xavier_uniform(cfg.model_dim, cfg.ff_dim, &mut rng),
                b1: Matrix::zeros(1, cfg.ff_dim),
                w2: xavier_uniform(cfg.ff_dim, cfg.model_dim, &mut rng),
                b2: Matrix::zeros(1, cfg.model_dim),
                norm: cfg.norm.then(|| NormParams {
                    gain: Matrix::filled(1, cfg.model_dim, 1.0),
                    offset: Matrix::zeros(1, cfg.model_dim),
                }),
            })
            .collect();
        let out = Matrix::zeros(cfg.model_dim, cfg.outputs);
        Ok(ModelParams {
            embed,
            pos,
            layers,
            out,
        })
    }

    pub fn register(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|m| tape.leaf(m.clone()))
    }

    /// Weight decay applies to matrices, not to 1×k biases and gains.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.tensors().iter().map(|t| t.rows() > 1).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.rows() * t.cols()).sum()
    }
}

/// One transformer layer applied to a row-stack of sequences.
pub fn layer_forward(
    tape: &mut Tape,
    x: Var,
    seq_lens: &[usize],
    p: &LayerParams<Var>,
    cfg: &ModelConfig,
    probe: &mut Probe,
) -> Result<Var> {
    let spec = cfg.attention_spec(seq_lens.iter().copied().max().unwrap_or(0));
    let attn = multi_head_batched(tape, x, seq_lens, &p.heads, &spec, probe)?;
    let h = tape.add(attn, x)?;
    feedforward(tape, h, p)
}

/// `h + W₂ gelu(W₁ norm(h) + b₁) + b₂`.
pub fn feedforward(tape: &mut Tape, h: Var, p: &LayerParams<Var>) -> Result<Var> {
    let z = match &p.norm {
        Some(n) => {
            let z = tape.layer_norm_rows(h);
            let z = tape.mul_row_broadcast(z, n.gain)?;
            tape.add_row_broadcast(z, n.offset)?
        }
        None => h,
    };
    let hidden = tape.matmul(z, p.w1)?;
    let hidden = tape.add_row_broadcast(hidden, p.b1)?;
    let hidden = tape.gelu(hidden);
    let f = tape.matmul(hidden, p.w2)?;
    let f = tape.add_row_broadcast(f, p.b2)?;
    tape.add(h, f)
}

/// Logits for a batch: one row per sequence for [`OutputHead::Pooled`],
/// one row per token (all sequences stacked) for
/// [`OutputHead::PerPosition`].
pub fn batch_forward(
    tape: &mut Tape,
    vars: &ModelParams<Var>,
    cfg: &ModelConfig,
    batch: &[&[usize]],
    probe: &mut Probe,
) -> Result<Var> {
    if batch.is_empty() || batch.iter().any(|s| s.is_empty()) {
        return Err(Error::Input("empty batch or sequence".into()));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut seq_lens = Vec::with_capacity(batch.len());
    for seq in batch {
        if seq.len() > cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                seq.len(),
                cfg.max_len
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::Input(format!(
                "token {bad} out of range for vocab {}",
                cfg.vocab
            )));
        }
        ids.extend_from_slice(seq);
        positions.extend(0..seq.len());
        seq_lens.push(seq.len());
    }
    let tok = tape.gather_rows(vars.embed, &ids)?;
    let pos = tape.gather_rows(vars.pos, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for (l, layer) in vars.layers.iter().enumerate() {
        probe.set_layer(l);
        x = layer_forward(tape, x, &seq_lens, layer, cfg, probe)?;
    }
    match cfg.head {
        OutputHead::PerPosition => tape.matmul(x, vars.out),
        OutputHead::Pooled => {
            let mut pooled = Vec::with_capacity(seq_lens.len());
            let mut start = 0;
            for &len in &seq_lens {
                let rows = if seq_lens.len() == 1 {
                    x
                } else {
                    tape.slice_rows(x, start, len)?
                };
                pooled.push(tape.mean_rows(rows));
                start += len;
            }
            let pooled = if pooled.len() == 1 {
                pooled[0]
            } else {
                tape.concat_rows(&pooled)?
            };
            tape.matmul(pooled, vars.out)
        }
    }
}

pub fn model_forward(
    tape: &mut Tape,
    vars: &ModelParams<Var>,
    cfg: &ModelConfig,
    tokens: &[usize],
    probe: &mut Probe,
) -> Result<Var> {
    batch_forward(tape, vars, cfg, &[tokens], probe)
}

fn targets_for(cfg: &ModelConfig, batch: &[TaskInstance]) -> Result<Vec<usize>> {
    let mut targets = Vec::new();
    for inst in batch {
        match (&inst.target, cfg.head) {
            (Target::Class(c), OutputHead::Pooled) => targets.push(*c),
            (Target::Sequence(s), OutputHead::PerPosition) if s.len() == inst.tokens.len() => {
                targets.extend_from_slice(s)
            }
            _ => {
                return Err(Error::Input(
                    "task targets do not match the model's output head".into(),
                ))
            }
        }
    }
    Ok(targets)
}

/// Mean cross-entropy over the batch, plus the logits node.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &ModelParams<Var>,
    cfg: &ModelConfig,
    batch: &[TaskInstance],
    probe: &mut Probe,
) -> Result<(Var, Var)> {
    let seqs: Vec<&[usize]> = batch.iter().map(|i| i.tokens.as_slice()).collect();
    let logits = batch_forward(tape, vars, cfg, &seqs, probe)?;
    let targets = targets_for(cfg, batch)?;
    let loss = tape.cross_entropy_loss(logits, &targets)?;
    Ok((loss, logits))
}

/// Fraction of correct argmax predictions (per sequence or per token).
pub fn accuracy(
    params: &ModelParams<Matrix>,
    cfg: &ModelConfig,
    batch: &[TaskInstance],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.map(|m| tape.constant(m.clone()));
    let seqs: Vec<&[usize]> = batch.iter().map(|i| i.tokens.as_slice()).collect();
    let logits = batch_forward(&mut tape, &vars, cfg, &seqs, &mut Probe::default())?;
    let targets = targets_for(cfg, batch)?;
    let logits = tape.value(logits);
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| argmax(logits.row(i)) == t)
        .count();
    Ok(correct as f64 / targets.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
