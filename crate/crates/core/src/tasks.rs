//! Seeded synthetic tasks: per-position copy, pooled majority vote, and a
//! miniature ListOps.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    Sequence(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub tokens: Vec<usize>,
    pub target: Target,
}

impl TaskInstance {
    /// `tokens<TAB>label`, both space separated.
    pub fn to_line(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        };
        let label = match &self.target {
            Target::Class(c) => c.to_string(),
            Target::Sequence(s) => join(s),
        };
        format!("{}\t{}", join(&self.tokens), label)
    }
}

pub fn write_instances<W: Write>(
    out: &mut W,
    instances: impl IntoIterator<Item = TaskInstance>,
) -> io::Result<()> {
    for inst in instances {
        writeln!(out, "{}", inst.to_line())?;
    }
    Ok(())
}

pub mod listops {
    //! Token ids: digits are 0–9, then the three openers and the closer.

    pub const MAX: usize = 10;
    pub const MIN: usize = 11;
    pub const MED: usize = 12;
    pub const CLOSE: usize = 13;
    pub const VOCAB: usize = 14;
    pub const CLASSES: usize = 10;
    pub const MAX_DEPTH: usize = 3;
    pub const MAX_ARGS: usize = 4;

    /// Longest token sequence a `depth`-deep expression can produce.
    pub fn max_len(depth: usize) -> usize {
        (0..depth).fold(1, |len, _| 2 + MAX_ARGS * len)
    }

    pub fn render(tokens: &[usize]) -> String {
        let mut out = String::new();
        for (i, &t) in tokens.iter().enumerate() {
            let piece = match t {
                MAX => "[MAX".to_string(),
                MIN => "[MIN".to_string(),
                MED => "[MED".to_string(),
                CLOSE => "]".to_string(),
                d => d.to_string(),
            };
            if i > 0 && t != CLOSE {
                out.push(' ');
            }
            out.push_str(&piece);
        }
        out
    }

    /// Inverse of [`render`]; `None` on an unknown word.
    pub fn tokenize(text: &str) -> Option<Vec<usize>> {
        text.replace(']', " ] ")
            .split_whitespace()
            .map(|w| match w {
                "[MAX" => Some(MAX),
                "[MIN" => Some(MIN),
                "[MED" => Some(MED),
                "]" => Some(CLOSE),
                d => d.parse::<usize>().ok().filter(|&d| d < 10),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Expr {
    Digit(usize),
    Op(usize, Vec<Expr>),
}

impl Expr {
    fn eval(&self) -> usize {
        match self {
            Expr::Digit(d) => *d,
            Expr::Op(op, args) => {
                let mut vals: Vec<usize> = args.iter().map(Expr::eval).collect();
                match *op {
                    listops::MAX => *vals.iter().max().unwrap(),
                    listops::MIN => *vals.iter().min().unwrap(),
                    _ => {
                        vals.sort_unstable();
                        vals[(vals.len() - 1) / 2]
                    }
                }
            }
        }
    }

    fn flatten(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Digit(d) => out.push(*d),
            Expr::Op(op, args) => {
                out.push(*op);
                args.iter().for_each(|a| a.flatten(out));
                out.push(listops::CLOSE);
            }
        }
    }
}

fn random_expr(rng: &mut ChaCha8Rng, depth: usize, top: bool) -> Expr {
    if depth == 0 || (!top && rng.random_bool(0.5)) {
        return Expr::Digit(rng.random_range(0..10));
    }
    let op = [listops::MAX, listops::MIN, listops::MED][rng.random_range(0..3)];
    let arity = rng.random_range(2..=listops::MAX_ARGS);
    Expr::Op(op, (0..arity).map(|_| random_expr(rng, depth - 1, false)).collect())
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Copy { n: usize, vocab: usize },
    Majority { n: usize, vocab: usize },
    ListOps { depth: usize },
}

/// A deterministic, finite stream of task instances.
#[derive(Debug, Clone)]
pub struct TaskStream {
    rng: ChaCha8Rng,
    kind: Kind,
    remaining: usize,
}

impl Iterator for TaskStream {
    type Item = TaskInstance;

    fn next(&mut self) -> Option<TaskInstance> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let rng = &mut self.rng;
        Some(match self.kind {
            Kind::Copy { n, vocab } => {
                let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
                TaskInstance {
                    target: Target::Sequence(tokens.clone()),
                    tokens,
                }
            }
            Kind::Majority { n, vocab } => {
                let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
                TaskInstance {
                    target: Target::Class(majority_label(&tokens, vocab)),
                    tokens,
                }
            }
            Kind::ListOps { depth } => {
                let expr = random_expr(rng, depth, true);
                let mut tokens = Vec::new();
                expr.flatten(&mut tokens);
                TaskInstance {
                    tokens,
                    target: Target::Class(expr.eval()),
                }
            }
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for TaskStream {}

/// Most frequent id; ties go to the smaller id.
fn majority_label(tokens: &[usize], vocab: usize) -> usize {
    let mut counts = vec![0usize; vocab];
    for &t in tokens {
        counts[t] += 1;
    }
    let best = *counts.iter().max().unwrap();
    counts.iter().position(|&c| c == best).unwrap()
}

fn stream(seed: u64, kind: Kind, count: usize) -> TaskStream {
    TaskStream {
        rng: ChaCha8Rng::seed_from_u64(seed),
        kind,
        remaining: count,
    }
}

/// Uniform random sequences whose target is the sequence itself.
pub fn gen_copy(seed: u64, n: usize, vocab: usize, count: usize) -> Result<TaskStream> {
    if n < 2 || vocab < 2 {
        return Err(Error::Input(format!(
            "copy task needs n >= 2 and vocab >= 2 (got n={n}, vocab={vocab})"
        )));
    }
    Ok(stream(seed, Kind::Copy { n, vocab }, count))
}

/// Uniform random sequences labelled with their most frequent token.
pub fn gen_majority(seed: u64, n: usize, vocab: usize, count: usize) -> Result<TaskStream> {
    if n.is_multiple_of(2) || vocab < 2 {
        return Err(Error::Input(format!(
            "majority task needs odd n and vocab >= 2 (got n={n}, vocab={vocab})"
        )));
    }
    Ok(stream(seed, Kind::Majority { n, vocab }, count))
}

/// Nested MAX/MIN/MED expressions over digits, labelled with their value.
/// MED of an even argument count takes the lower median.
pub fn gen_listops_mini(seed: u64, depth: usize, count: usize) -> Result<TaskStream> {
    if depth == 0 || depth > listops::MAX_DEPTH {
        return Err(Error::Input(format!(
            "listops depth must be in 1..={} (got {depth})",
            listops::MAX_DEPTH
        )));
    }
    Ok(stream(seed, Kind::ListOps { depth }, count))
}

/// Task selection as it appears in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum TaskSpec {
    Copy { n: usize, vocab: usize },
    Majority { n: usize, vocab: usize },
    Listops { depth: usize },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.stream(0, 0).map(|_| ())
    }

    pub fn stream(&self, seed: u64, count: usize) -> Result<TaskStream> {
        match *self {
            TaskSpec::Copy { n, vocab } => gen_copy(seed, n, vocab, count),
            TaskSpec::Majority { n, vocab } => gen_majority(seed, n, vocab, count),
            TaskSpec::Listops { depth } => gen_listops_mini(seed, depth, count),
        }
    }

    pub fn vocab(&self) -> usize {
        match *self {
            TaskSpec::Copy { vocab, .. } | TaskSpec::Majority { vocab, .. } => vocab,
            TaskSpec::Listops { .. } => listops::VOCAB,
        }
    }

    /// Width of the output layer.
    pub fn outputs(&self) -> usize {
        match *self {
            TaskSpec::Copy { vocab, .. } | TaskSpec::Majority { vocab, .. } => vocab,
            TaskSpec::Listops { .. } => listops::CLASSES,
        }
    }

    pub fn max_len(&self) -> usize {
        match *self {
            TaskSpec::Copy { n, .. } | TaskSpec::Majority { n, .. } => n,
            TaskSpec::Listops { depth } => listops::max_len(depth),
        }
    }

    pub fn per_position(&self) -> bool {
        matches!(self, TaskSpec::Copy { .. })
    }
}
