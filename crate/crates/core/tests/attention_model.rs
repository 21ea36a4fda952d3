mod common;

use common::*;
use precond_attn::attention::*;
use precond_attn::autodiff::{gelu, Tape, Var, LAYER_NORM_EPS};
use precond_attn::linalg::*;
use precond_attn::tasks::TaskSpec;
use precond_attn::transformer::*;

fn naive_softmax_rows(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = m.to_vec();
    for i in 0..rows {
        let row = &mut out[i * cols..(i + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// softmax(s · (xQ)(xK)ᵀ)(xV) with explicit loops.
fn naive_head(x: &Matrix, p: &HeadParams<Matrix>, s: f64) -> Vec<f64> {
    let n = x.rows();
    let d = p.q.cols();
    let q = naive_matmul(x, &p.q);
    let k = naive_matmul(x, &p.k);
    let v = naive_matmul(x, &p.v);
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..d {
                acc += q[i * d + t] * k[j * d + t];
            }
            scores[i * n + j] = acc * s;
        }
    }
    let w = naive_softmax_rows(&scores, n, n);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let mut acc = 0.0;
            for t in 0..n {
                acc += w[i * n + t] * v[t * d + j];
            }
            out[i * d + j] = acc;
        }
    }
    out
}

fn head_value(x: &Matrix, p: &HeadParams<Matrix>, spec: &AttentionSpec) -> Matrix {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let pv = p.map(|m| t.constant(m.clone()));
    let y = match spec.mode {
        AttentionMode::Standard => standard_head(&mut t, xv, &pv, spec, &mut Probe::default()),
        m => preconditioned_head(&mut t, xv, &pv, spec, m, &mut Probe::default()),
    }
    .unwrap();
    t.value(y).clone()
}

#[test]
fn standard_head_matches_naive_oracle_exactly() {
    let mut g = rng(1);
    let x = uniform(4, 4, -1.0, 1.0, &mut g);
    let p = HeadParams::xavier(4, 2, &mut g);
    for scale in [true, false] {
        let spec = AttentionSpec::new(4, 2, 4, AttentionMode::Standard, scale).unwrap();
        let got = head_value(&x, &p, &spec);
        let want = naive_head(&x, &p, spec.score_scale());
        assert!(got.data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn zero_scores_average_values() {
    let mut g = rng(2);
    let x = uniform(5, 4, -1.0, 1.0, &mut g);
    let mut p = HeadParams::xavier(4, 2, &mut g);
    p.q = Matrix::zeros(4, 2);
    p.k = Matrix::zeros(4, 2);
    let spec = AttentionSpec::new(4, 2, 5, AttentionMode::Standard, true).unwrap();
    let out = head_value(&x, &p, &spec);
    let xv = matmul(&x, &p.v).unwrap();
    for j in 0..2 {
        let mean = (0..5).map(|i| xv.get(i, j)).sum::<f64>() / 5.0;
        for i in 0..5 {
            assert!((out.get(i, j) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn single_token_passes_values_through() {
    let mut g = rng(3);
    let x = uniform(1, 4, -1.0, 1.0, &mut g);
    let p = HeadParams::xavier(4, 2, &mut g);
    let spec = AttentionSpec::new(4, 2, 1, AttentionMode::Standard, true).unwrap();
    assert_eq!(head_value(&x, &p, &spec), matmul(&x, &p.v).unwrap());
}

#[test]
fn precond_output_equals_preconditioner_times_standard() {
    let mut g = rng(4);
    for _ in 0..20 {
        let x = uniform(6, 4, -2.0, 2.0, &mut g);
        let p = HeadParams::xavier(4, 2, &mut g);
        let std_spec = AttentionSpec::new(4, 2, 6, AttentionMode::Standard, true).unwrap();
        let pre_spec = AttentionSpec { mode: AttentionMode::PrecondOutput, ..std_spec };
        let a = head_value(&x, &p, &std_spec);
        let expected = build_preconditioner(&a).matmul(&a).unwrap();
        assert_eq!(head_value(&x, &p, &pre_spec), expected);
    }
}

#[test]
fn precond_weights_hand_oracle() {
    let mut g = rng(5);
    let x = uniform(2, 2, -1.0, 1.0, &mut g);
    let p = HeadParams::xavier(2, 2, &mut g);
    let spec = AttentionSpec::new(2, 1, 2, AttentionMode::PrecondWeights, false).unwrap();
    let w = softmax_rows(&matmul(&matmul(&x, &p.q).unwrap(), &matmul(&x, &p.k).unwrap().transpose()).unwrap());
    let v = matmul(&x, &p.v).unwrap();
    let out = head_value(&x, &p, &spec);
    for i in 0..2 {
        let r = (w.get(i, 0).powi(2) + w.get(i, 1).powi(2)).sqrt();
        for j in 0..2 {
            let want = (w.get(i, 0) * v.get(0, j) + w.get(i, 1) * v.get(1, j)) / r;
            assert!((out.get(i, j) - want).abs() < 1e-14);
        }
    }
}

fn multi_value(x: &Matrix, params: &[HeadParams<Matrix>], spec: &AttentionSpec) -> Matrix {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let pv: Vec<_> = params.iter().map(|p| p.map(|m| t.constant(m.clone()))).collect();
    let y = multi_head(&mut t, xv, &pv, spec, &mut Probe::default()).unwrap();
    t.value(y).clone()
}

#[test]
fn multi_head_compositions() {
    let mut g = rng(6);
    let x = uniform(5, 4, -1.0, 1.0, &mut g);
    // h = 1 is the single head.
    let one = vec![HeadParams::xavier(4, 4, &mut g)];
    let spec1 = AttentionSpec::new(4, 1, 5, AttentionMode::Standard, true).unwrap();
    assert_eq!(multi_value(&x, &one, &spec1), head_value(&x, &one[0], &spec1));

    // h = 2 is the column concatenation of two single heads.
    let two = vec![HeadParams::xavier(4, 2, &mut g), HeadParams::xavier(4, 2, &mut g)];
    let spec2 = AttentionSpec::new(4, 2, 5, AttentionMode::Standard, true).unwrap();
    let joined = multi_value(&x, &two, &spec2);
    let a = head_value(&x, &two[0], &spec2);
    let b = head_value(&x, &two[1], &spec2);
    for i in 0..5 {
        assert_eq!(&joined.row(i)[..2], a.row(i));
        assert_eq!(&joined.row(i)[2..], b.row(i));
    }

    // Preconditioned: every head block has unit rows on its own.
    let pre = AttentionSpec { mode: AttentionMode::PrecondOutput, ..spec2 };
    let out = multi_value(&x, &two, &pre);
    for i in 0..5 {
        for block in [&out.row(i)[..2], &out.row(i)[2..]] {
            assert!((norm(block) - 1.0).abs() <= 1e-10);
        }
    }
}

#[test]
fn flop_counter_matches_formulas_on_grid() {
    let mut g = rng(7);
    for n in [1, 4, 16] {
        for d in [4, 8, 64] {
            for h in [1, 2, 4] {
                let spec = AttentionSpec::new(d, h, n, AttentionMode::PrecondOutput, true).unwrap();
                let f = preconditioner_flops(&spec);
                let counts = measure_preconditioner_flops(&spec, &mut g).unwrap();
                assert_eq!(counts.len(), h);
                assert!(counts.iter().all(|c| c.total() == f.per_head));
                assert_eq!(counts.iter().map(|c| c.total()).sum::<u64>(), f.per_layer);
                let (n, d, h) = (n as u64, d as u64, h as u64);
                assert_eq!(f.per_head, n * (2 * d / h + 1));
                assert_eq!(f.per_layer, n * (2 * d + h));
            }
        }
    }
}

/// Aggregate comparison over random heads: median κ of the preconditioned
/// output against the standard output.
#[test]
fn random_heads_median_kappa() {
    let mut g = rng(8);
    let mut standard = Vec::new();
    let mut precond = Vec::new();
    for _ in 0..200 {
        let x = uniform(8, 8, -1.0, 1.0, &mut g);
        let p = HeadParams::xavier(8, 4, &mut g);
        let spec = AttentionSpec::new(8, 2, 8, AttentionMode::Standard, true).unwrap();
        let a = head_value(&x, &p, &spec);
        let ca = head_value(&x, &p, &AttentionSpec { mode: AttentionMode::PrecondOutput, ..spec });
        if let (Some(ka), Some(kca)) = (condition_number(&a).unwrap().value(), condition_number(&ca).unwrap().value()) {
            standard.push(ka);
            precond.push(kca);
        }
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (ms, mp) = (med(&mut standard), med(&mut precond));
    println!("median kappa over {} random heads: standard {ms:.4}, preconditioned {mp:.4}", standard.len());
    assert!(mp <= ms);
}

fn cfg(mode: AttentionMode, norm: bool, model_dim: usize, heads: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab: 3,
        outputs: 2,
        max_len,
        model_dim,
        heads,
        layers: 1,
        ff_dim: 5,
        mode,
        scale_scores: true,
        norm,
        head: OutputHead::Pooled,
    }
}

fn layer_norm_row(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    v.iter().map(|x| (x - mean) / (var + LAYER_NORM_EPS).sqrt()).collect()
}

/// F(h) = h + W₂ gelu(W₁ norm(h) + b₁) + b₂ on one row.
fn feedforward_row(h: &[f64], l: &LayerParams<Matrix>) -> Vec<f64> {
    let z: Vec<f64> = match &l.norm {
        Some(n) => layer_norm_row(h)
            .iter()
            .enumerate()
            .map(|(j, x)| x * n.gain.get(0, j) + n.offset.get(0, j))
            .collect(),
        None => h.to_vec(),
    };
    let hidden: Vec<f64> = (0..l.w1.cols())
        .map(|j| gelu(z.iter().enumerate().map(|(i, x)| x * l.w1.get(i, j)).sum::<f64>() + l.b1.get(0, j)))
        .collect();
    (0..h.len())
        .map(|j| h[j] + hidden.iter().enumerate().map(|(i, x)| x * l.w2.get(i, j)).sum::<f64>() + l.b2.get(0, j))
        .collect()
}

fn perturbed(cfg: &ModelConfig, seed: u64) -> ModelParams<Matrix> {
    let params = ModelParams::init(cfg, seed).unwrap();
    let mut g = rng(seed + 100);
    params.map(|m| m.add(&uniform(m.rows(), m.cols(), -0.2, 0.2, &mut g)).unwrap())
}

#[test]
fn single_token_layer_matches_hand_composition() {
    let c = cfg(AttentionMode::Standard, true, 4, 2, 1);
    let params = perturbed(&c, 1);
    let mut g = rng(9);
    let x = uniform(1, 4, -1.0, 1.0, &mut g);
    let mut t = Tape::new();
    let vars = params.register(&mut t);
    let xv = t.constant(x.clone());
    let y = layer_forward(&mut t, xv, &[1], &vars.layers[0], &c, &mut Probe::default()).unwrap();
    // n = 1: each head returns x V.
    let l = &params.layers[0];
    let attn: Vec<f64> = l.heads.iter().flat_map(|h| matmul(&x, &h.v).unwrap().into_data()).collect();
    let h: Vec<f64> = attn.iter().zip(x.data()).map(|(a, b)| a + b).collect();
    let want = feedforward_row(&h, l);
    let got = t.value(y);
    for (j, w) in want.iter().enumerate() {
        assert!((got.get(0, j) - w).abs() < 1e-12, "{j}: {} vs {w}", got.get(0, j));
    }
}

#[test]
fn preconditioning_only_changes_the_attention_term() {
    let c = cfg(AttentionMode::PrecondOutput, true, 4, 2, 5);
    let params = perturbed(&c, 2);
    let x = uniform(5, 4, -1.0, 1.0, &mut rng(10));
    let mut t = Tape::new();
    let vars = params.register(&mut t);
    let xv = t.constant(x.clone());
    let y = layer_forward(&mut t, xv, &[5], &vars.layers[0], &c, &mut Probe::default()).unwrap();

    // Rebuild: standard heads, C applied by hand, then the same residual
    // and feedforward.
    let std_spec = c.attention_spec(5);
    let std_spec = AttentionSpec { mode: AttentionMode::Standard, ..std_spec };
    let mut t2 = Tape::new();
    let vars2 = params.register(&mut t2);
    let x2 = t2.constant(x.clone());
    let mut heads = Vec::new();
    for hp in &vars2.layers[0].heads {
        let a = standard_head(&mut t2, x2, hp, &std_spec, &mut Probe::default()).unwrap();
        let c_mat = build_preconditioner(t2.value(a));
        let cv = t2.constant(c_mat);
        heads.push(t2.matmul(cv, a).unwrap());
    }
    let attn = t2.concat_cols(&heads).unwrap();
    let h = t2.add(attn, x2).unwrap();
    let y2 = feedforward(&mut t2, h, &vars2.layers[0]).unwrap();
    assert_eq!(t.value(y), t2.value(y2));
}

#[test]
fn two_token_hand_trace() {
    // vocab 2, D = 2, one head, no norm, zero feedforward, hand-set tables.
    let c = ModelConfig {
        vocab: 2,
        outputs: 2,
        max_len: 2,
        model_dim: 2,
        heads: 1,
        layers: 1,
        ff_dim: 1,
        mode: AttentionMode::Standard,
        scale_scores: false,
        norm: false,
        head: OutputHead::Pooled,
    };
    let mut p = ModelParams::init(&c, 0).unwrap();
    p.embed = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    p.pos = Matrix::zeros(2, 2);
    let l = &mut p.layers[0];
    l.heads[0].q = Matrix::identity(2);
    l.heads[0].k = Matrix::identity(2);
    l.heads[0].v = Matrix::identity(2);
    l.w1 = Matrix::zeros(2, 1);
    l.w2 = Matrix::zeros(1, 2);
    p.out = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();

    // tokens [0, 1]: x = I, scores = I, weights rows = [e, 1]/(e+1) and
    // [1, e]/(e+1). h = weights + I. Pooled = column means = [0.5+0.5, 0.5+0.5]
    // since each weight column sums to 1.
    let e = std::f64::consts::E;
    let w = [[e / (e + 1.0), 1.0 / (e + 1.0)], [1.0 / (e + 1.0), e / (e + 1.0)]];
    let h = [[w[0][0] + 1.0, w[0][1]], [w[1][0], w[1][1] + 1.0]];
    let pooled = [(h[0][0] + h[1][0]) / 2.0, (h[0][1] + h[1][1]) / 2.0];
    let logits = [pooled[0] * 1.0 + pooled[1] * 2.0, -pooled[0] + pooled[1] * 0.5];

    let mut t = Tape::new();
    let vars = p.register(&mut t);
    let out = model_forward(&mut t, &vars, &c, &[0, 1], &mut Probe::default()).unwrap();
    let got = t.value(out);
    assert!((got.get(0, 0) - logits[0]).abs() < 1e-14);
    assert!((got.get(0, 1) - logits[1]).abs() < 1e-14);
    assert!((logits[0] - 3.0).abs() < 1e-14 && (logits[1] + 0.5).abs() < 1e-14);
}

#[test]
fn copy_task_initial_loss_is_uniform_baseline() {
    for vocab in [4, 8, 16] {
        let task = TaskSpec::Copy { n: 8, vocab };
        let c = ModelConfig {
            vocab,
            outputs: vocab,
            max_len: 8,
            model_dim: 32,
            heads: 4,
            layers: 2,
            ff_dim: 64,
            mode: AttentionMode::PrecondOutput,
            scale_scores: true,
            norm: true,
            head: OutputHead::PerPosition,
        };
        let params = ModelParams::init(&c, 3).unwrap();
        let batch: Vec<_> = task.stream(4, 64).unwrap().collect();
        let mut t = Tape::new();
        let vars = params.register(&mut t);
        let (loss, _) = batch_loss(&mut t, &vars, &c, &batch, &mut Probe::default()).unwrap();
        let loss = t.value(loss).get(0, 0);
        let base = (vocab as f64).ln();
        assert!((loss - base).abs() <= 0.05 * base, "vocab {vocab}: {loss} vs {base}");
    }
}

#[test]
fn out_of_range_token_is_an_input_error() {
    let c = cfg(AttentionMode::Standard, true, 4, 2, 3);
    let params = ModelParams::init(&c, 1).unwrap();
    let mut t = Tape::new();
    let vars: ModelParams<Var> = params.register(&mut t);
    let err = model_forward(&mut t, &vars, &c, &[0, 3], &mut Probe::default()).unwrap_err();
    assert!(matches!(err, precond_attn::Error::Input(_)));
}
