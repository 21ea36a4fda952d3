//! Finite-difference cases shared by the gradient tests and the
//! acceptance run.

use super::*;
use precond_attn::attention::{preconditioned_head, standard_head, AttentionMode, AttentionSpec, HeadParams, Probe};
use precond_attn::tasks::{TaskInstance, Target};
use precond_attn::transformer::{batch_loss, ModelConfig, ModelParams, OutputHead};

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// Scalar, nonlinear read-out of `y` through a fixed random projection, so
/// that ops whose plain sum is constant (softmax, layer norm) still get a
/// non-trivial gradient.
pub fn readout(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let cols = tape.value(y).cols();
    let r = tape.constant(uniform(cols, 3, -1.0, 1.0, &mut rng(seed)));
    let z = tape.matmul(y, r).unwrap();
    let z = tape.gelu(z);
    tape.sum_all(z)
}

pub fn inputs(shapes: &[(usize, usize)], seed: u64) -> Vec<Matrix> {
    let mut g = rng(seed);
    shapes.iter().map(|&(r, c)| uniform(r, c, -1.5, 1.5, &mut g)).collect()
}

fn case(
    name: &'static str,
    shapes: &[(usize, usize)],
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
) -> (&'static str, Vec<Matrix>, Build) {
    (name, inputs(shapes, seed), Box::new(f))
}

/// One case per differentiable tape op.
pub fn op_cases() -> Vec<(&'static str, Vec<Matrix>, Build)> {
    vec![
        case("add", &[(3, 4), (3, 4)], 1, |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            readout(t, y, 9)
        }),
        case("add_row_broadcast", &[(3, 4), (1, 4)], 2, |t, v| {
            let y = t.add_row_broadcast(v[0], v[1]).unwrap();
            readout(t, y, 9)
        }),
        case("mul_row_broadcast", &[(3, 4), (1, 4)], 3, |t, v| {
            let y = t.mul_row_broadcast(v[0], v[1]).unwrap();
            readout(t, y, 9)
        }),
        case("matmul", &[(3, 5), (5, 2)], 4, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            readout(t, y, 9)
        }),
        case("transpose", &[(3, 5)], 5, |t, v| {
            let y = t.transpose(v[0]);
            readout(t, y, 9)
        }),
        case("scale", &[(2, 3)], 6, |t, v| {
            let y = t.scale(v[0], -2.5);
            readout(t, y, 9)
        }),
        case("gelu", &[(4, 3)], 7, |t, v| {
            let y = t.gelu(v[0]);
            readout(t, y, 9)
        }),
        case("softmax_rows", &[(4, 5)], 10, |t, v| {
            let y = t.softmax_rows(v[0]);
            readout(t, y, 9)
        }),
        case("layer_norm_rows", &[(4, 5)], 11, |t, v| {
            let y = t.layer_norm_rows(v[0]);
            readout(t, y, 9)
        }),
        case("cross_entropy_loss", &[(4, 3)], 12, |t, v| {
            t.cross_entropy_loss(v[0], &[0, 2, 1, 2]).unwrap()
        }),
        case("concat_cols", &[(3, 2), (3, 1), (3, 3)], 20, |t, v| {
            let y = t.concat_cols(v).unwrap();
            readout(t, y, 9)
        }),
        case("concat_rows", &[(2, 3), (1, 3)], 21, |t, v| {
            let y = t.concat_rows(v).unwrap();
            readout(t, y, 9)
        }),
        case("slice_rows", &[(5, 3)], 22, |t, v| {
            let y = t.slice_rows(v[0], 1, 3).unwrap();
            readout(t, y, 9)
        }),
        case("mean_rows", &[(4, 3)], 23, |t, v| {
            let y = t.mean_rows(v[0]);
            readout(t, y, 9)
        }),
        case("sum_all", &[(4, 3)], 24, |t, v| {
            let y = t.gelu(v[0]);
            t.sum_all(y)
        }),
        case("gather_rows", &[(3, 4)], 25, |t, v| {
            let y = t.gather_rows(v[0], &[0, 2, 2, 1, 2]).unwrap();
            readout(t, y, 9)
        }),
    ]
}

/// True when every ancestor of a stop-gradient gets an all-zero gradient.
pub fn stop_gradient_blocks() -> bool {
    let m = inputs(&[(3, 3)], 40);
    let mut t = Tape::new();
    let x = t.leaf(m[0].clone());
    let y = t.softmax_rows(x);
    let sg = t.stop_gradient(y);
    let z = t.gelu(sg);
    let s = t.sum_all(z);
    t.backward(s).unwrap();
    t.grad(x).data().iter().all(|g| g.to_bits() == 0)
}

pub fn head_inputs(seed: u64) -> Vec<Matrix> {
    // x (n×D), then Q, K, V (D×d_h) with n = 4, D = 4, d_h = 2
    inputs(&[(4, 4), (4, 2), (4, 2), (4, 2)], seed)
}

pub fn head(t: &mut Tape, v: &[Var], mode: AttentionMode, probe: &mut Probe) -> Var {
    let p = HeadParams { q: v[1], k: v[2], v: v[3] };
    let s = AttentionSpec::new(4, 2, 4, mode, true).unwrap();
    match mode {
        AttentionMode::Standard => standard_head(t, v[0], &p, &s, probe).unwrap(),
        m => preconditioned_head(t, v[0], &p, &s, m, probe).unwrap(),
    }
}

/// Preconditioners recorded from the unperturbed pass over `m`.
pub fn record_preconditioners(m: &[Matrix], mode: AttentionMode) -> Vec<Matrix> {
    let mut rec = Probe::recording();
    let mut t = Tape::new();
    let v: Vec<Var> = m.iter().map(|x| t.leaf(x.clone())).collect();
    head(&mut t, &v, mode, &mut rec);
    rec.preconditioners
}

/// Worst relative error of a single head's gradients, with C frozen at its
/// unperturbed value for preconditioned modes.
pub fn head_gradient_error(mode: AttentionMode, seed: u64) -> f64 {
    let m = head_inputs(seed);
    let frozen = record_preconditioners(&m, mode);
    worst_gradient_error(&m, |t, v| {
        let y = head(t, v, mode, &mut Probe::replaying(frozen.clone()));
        readout(t, y, 8)
    })
}

pub fn tiny_config(mode: AttentionMode, norm: bool, head: OutputHead) -> ModelConfig {
    ModelConfig {
        vocab: 5,
        outputs: 3,
        max_len: 3,
        model_dim: 4,
        heads: 2,
        layers: 1,
        ff_dim: 6,
        mode,
        scale_scores: true,
        norm,
        head,
    }
}

fn unflatten(template: &ModelParams<Matrix>, vars: &[Var]) -> ModelParams<Var> {
    let mut it = vars.iter();
    template.map(|_| *it.next().expect("one var per tensor"))
}

pub fn pooled_batch() -> Vec<TaskInstance> {
    vec![
        TaskInstance { tokens: vec![1, 4, 2], target: Target::Class(2) },
        TaskInstance { tokens: vec![0, 3, 3], target: Target::Class(0) },
    ]
}

pub fn per_position_batch() -> Vec<TaskInstance> {
    vec![TaskInstance {
        tokens: vec![4, 1, 0],
        target: Target::Sequence(vec![2, 1, 0]),
    }]
}

/// Worst per-tensor relative error over every model parameter.
pub fn model_gradient_error(cfg: &ModelConfig, batch: &[TaskInstance]) -> f64 {
    let params = ModelParams::init(cfg, 17).unwrap();
    // Perturb away from the zero-bias, unit-gain, zero-readout init so every
    // tensor carries a generic gradient.
    let mut g = rng(99);
    let flat: Vec<Matrix> = params
        .tensors()
        .into_iter()
        .map(|m| m.add(&uniform(m.rows(), m.cols(), -0.3, 0.3, &mut g)).unwrap())
        .collect();

    let mut rec = Probe::recording();
    {
        let mut t = Tape::new();
        let vars: Vec<Var> = flat.iter().map(|m| t.leaf(m.clone())).collect();
        batch_loss(&mut t, &unflatten(&params, &vars), cfg, batch, &mut rec).unwrap();
    }
    let frozen = rec.preconditioners;
    assert_eq!(frozen.is_empty(), cfg.mode == AttentionMode::Standard);

    let pairs = gradient_pair(&flat, |t, v| {
        let vars = unflatten(&params, v);
        batch_loss(t, &vars, cfg, batch, &mut Probe::replaying(frozen.clone()))
            .unwrap()
            .0
    });
    pairs.iter().map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max)
}
