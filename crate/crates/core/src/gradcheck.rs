//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_batch, AugmentMode, AugmenterVars, GradRouting};
use crate::autodiff::{Tape, Unary, Var};
use crate::data::{generate_with, GenerateConfig, Jitter};
use crate::error::Result;
use crate::loss::{cross_entropy_total, nt_xent_rows};
use crate::nn::ModelBundle;
use crate::tensor::Tensor;
use crate::train::{build_step, trainable_params_mut, Algorithm, Sampler, StepOptions, Trainer, TrainConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor of [`max_rel_err`].
pub const REL_FLOOR: f64 = 1e-3;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every entry `i` of `x`.
pub fn central_difference(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_FLOOR)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn check_fn(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let numeric = central_difference(&inputs[k], DEFAULT_STEP, |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| t.param(if j == k { probe.clone() } else { x.clone() }))
                .collect();
            build(&mut t, &vs).map(|l| t.value(l).item()).unwrap_or(f64::NAN)
        });
        worst = worst.max(max_rel_err(grads.wrt(*v).data(), numeric.data()));
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
    let mut t = rand_tensor(rng, &[rows, d]);
    for r in t.data_mut().chunks_mut(d) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

// Fixed weights turn any output into a scalar with non-trivial gradients.
fn weighted_sum(t: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let wc = t.constant(w.clone());
    let h = t.hadamard(x, wc)?;
    Ok(t.sum(h))
}

const D: usize = 8;
const B: usize = 2;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<Tensor>, Build)> {
    let mut cases: Vec<(String, Vec<Tensor>, Build)> = Vec::new();
    let w34 = rand_tensor(rng, &[3, 4]);
    cases.push((
        "matmul".into(),
        vec![rand_tensor(rng, &[3, 5]), rand_tensor(rng, &[5, 4])],
        Box::new(move |t, v| {
            let p = t.matmul(v[0], v[1])?;
            weighted_sum(t, p, &w34)
        }),
    ));
    let w43 = rand_tensor(rng, &[4, 3]);
    cases.push((
        "transpose".into(),
        vec![rand_tensor(rng, &[3, 4])],
        Box::new(move |t, v| {
            let p = t.transpose(v[0])?;
            weighted_sum(t, p, &w43)
        }),
    ));
    for (name, op) in [("add", 0), ("sub", 1), ("hadamard", 2)] {
        let w = rand_tensor(rng, &[2, 3]);
        cases.push((
            name.into(),
            vec![rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 3])],
            Box::new(move |t, v| {
                let y = match op {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    _ => t.hadamard(v[0], v[1])?,
                };
                weighted_sum(t, y, &w)
            }),
        ));
    }
    let w = rand_tensor(rng, &[3, 4]);
    cases.push((
        "add_row".into(),
        vec![rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[4])],
        Box::new(move |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = rand_tensor(rng, &[5]);
    cases.push((
        "scale_add_scalar".into(),
        vec![rand_tensor(rng, &[5])],
        Box::new(move |t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.add_scalar(y, 0.3);
            let y = t.hadamard(y, y)?;
            weighted_sum(t, y, &w)
        }),
    ));
    for kind in [Unary::Sigmoid, Unary::Tanh, Unary::Relu, Unary::Exp, Unary::Log] {
        let w = rand_tensor(rng, &[6]);
        let x = if kind == Unary::Log {
            Tensor::vector((0..6).map(|_| rng.gen_range(0.3..2.0)).collect())
        } else {
            // keep relu inputs away from the kink
            Tensor::vector(
                (0..6)
                    .map(|_| {
                        let v: f64 = rng.gen_range(0.1..1.0);
                        if rng.gen::<bool>() { v } else { -v }
                    })
                    .collect(),
            )
        };
        cases.push((
            format!("{kind:?}").to_lowercase(),
            vec![x],
            Box::new(move |t, v| {
                let y = t.unary(kind, v[0])?;
                weighted_sum(t, y, &w)
            }),
        ));
    }
    let w = rand_tensor(rng, &[2, 5]);
    cases.push((
        "concat_slice".into(),
        vec![rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 2])],
        Box::new(move |t, v| {
            let c = t.concat_last(v[0], v[1])?;
            let s = t.slice_last(c, 1, 3)?;
            let c2 = t.concat_last(s, v[1])?;
            weighted_sum(t, c2, &w)
        }),
    ));
    let w = rand_tensor(rng, &[4, 3]);
    cases.push((
        "concat_rows_row_broadcast".into(),
        vec![rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[1, 3]), rand_tensor(rng, &[3])],
        Box::new(move |t, v| {
            let r = t.row(v[0], 1)?;
            let rr = t.reshape(r, &[1, 3])?;
            let c = t.concat_rows(&[v[0], v[1], rr])?;
            let b = t.broadcast_rows(v[2], 4)?;
            let y = t.hadamard(c, b)?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = rand_tensor(rng, &[3, 5]);
    cases.push((
        "softmax".into(),
        vec![rand_tensor(rng, &[3, 5])],
        Box::new(move |t, v| {
            let y = t.softmax_last(v[0])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = rand_tensor(rng, &[3]);
    cases.push((
        "logsumexp".into(),
        vec![rand_tensor(rng, &[3, 5])],
        Box::new(move |t, v| {
            let y = t.logsumexp_last(v[0])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = rand_tensor(rng, &[3, 4]);
    cases.push((
        "l2_normalize".into(),
        vec![rand_tensor(rng, &[3, 4])],
        Box::new(move |t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            weighted_sum(t, y, &w)
        }),
    ));
    cases.push((
        "dot_sum_mean".into(),
        vec![rand_tensor(rng, &[6]), rand_tensor(rng, &[6]), rand_tensor(rng, &[2, 3])],
        Box::new(|t, v| {
            let d = t.dot(v[0], v[1])?;
            let s = t.sum_last(v[2])?;
            let s = t.hadamard(s, s)?;
            let m = t.mean(s)?;
            t.add(d, m)
        }),
    ));
    let labels = vec![2, 0, 3];
    cases.push((
        "gather_cross_entropy".into(),
        vec![rand_tensor(rng, &[3, 4])],
        Box::new(move |t, v| cross_entropy_total(t, v[0], &labels)),
    ));
    let negs = unit_rows(rng, 5, D);
    cases.push((
        "nt_xent".into(),
        vec![unit_rows(rng, B, D), unit_rows(rng, B, D)],
        Box::new(move |t, v| {
            let q = t.l2_normalize_rows(v[0])?;
            let k = t.l2_normalize_rows(v[1])?;
            let rows = nt_xent_rows(t, q, k, &negs, 0.5, false)?;
            Ok(t.sum(rows))
        }),
    ));
    cases
}

fn micro_config() -> TrainConfig {
    TrainConfig {
        algorithm: Algorithm::Rcerm,
        batch_per_cell: B,
        embed_dim: D,
        hidden: vec![6],
        queue_sz: 4,
        tau: 0.5,
        lambda: 0.7,
        mu: 0.9,
        holdout: None,
        ..TrainConfig::default()
    }
}

/// Augmentation network on its own, gradients w.r.t. the queries and the
/// gate and attention weights.
fn augment_case(rng: &mut ChaCha8Rng, mode: AugmentMode) -> Result<f64> {
    let mc = micro_config().model_config(4, 2);
    let bundle = ModelBundle::init(&mc, rng.gen())?;
    let pool = unit_rows(rng, 3, D);
    let w = rand_tensor(rng, &[B, D]);
    let q0 = rand_tensor(rng, &[B, D]);
    let inputs = vec![
        q0,
        bundle.gate.weight.clone(),
        bundle.gate.bias.clone(),
        bundle.attn.phi1.weight.clone(),
        bundle.attn.phi2.weight.clone(),
        bundle.attn.phi3.bias.clone(),
    ];
    let build: Build = Box::new(move |t, v| {
        let mut b = bundle.clone();
        b.gate.weight = t.value(v[1]).clone();
        b.gate.bias = t.value(v[2]).clone();
        b.attn.phi1.weight = t.value(v[3]).clone();
        b.attn.phi2.weight = t.value(v[4]).clone();
        b.attn.phi3.bias = t.value(v[5]).clone();
        let mut vars = AugmenterVars::bind(&b, t, false)?;
        vars.gate.weight = v[1];
        vars.gate.weight_t = t.transpose(v[1])?;
        vars.gate.bias = v[2];
        vars.phi1.weight = v[3];
        vars.phi1.weight_t = t.transpose(v[3])?;
        vars.phi2.weight = v[4];
        vars.phi2.weight_t = t.transpose(v[4])?;
        vars.phi3.bias = v[5];
        let k = augment_batch(t, v[0], &pool, &vars, mode, GradRouting::GradThroughAugmenter)?;
        weighted_sum(t, k.k, &w)
    });
    check_fn(&inputs, &build)
}

/// Full update-step loss of a 2-class, 2-domain micro-model with warm
/// queues, against every trainable parameter.
fn step_case(seed: u64, algorithm: Algorithm) -> Result<f64> {
    let cfg = TrainConfig {
        algorithm,
        seed,
        ..micro_config()
    };
    let ds = generate_with(&GenerateConfig {
        seed,
        n_per_cell: 4,
        height: 4,
        width: 4,
        classes: 2,
        domains: 2,
        jitter: Jitter::default(),
    })?;
    let part = ds.partition(&[0, 1], None)?;
    let mut trainer = Trainer::new(cfg.clone(), ds.input_dim(), 2, 2)?;
    trainer.warm_up(&Sampler::new(&part, 2, seed, 2)?.next(&ds, B))?;
    let batch = Sampler::new(&part, 2, seed, 1)?.next(&ds, B);
    let opts = StepOptions::from(&cfg);

    let mut store = trainer.store.clone();
    let graph = build_step(&trainer.bundle, &mut store, &batch, &opts)?;
    let grads = graph.tape.backward(graph.total)?;
    let analytic: Vec<Tensor> = graph.params.iter().map(|v| grads.wrt(*v)).collect();

    let mut worst: f64 = 0.0;
    let mut bundle = trainer.bundle.clone();
    for (i, a) in analytic.iter().enumerate() {
        let base = trainable_params_mut(&mut bundle)[i].clone();
        let numeric = central_difference(&base, DEFAULT_STEP, |probe| {
            let mut b = trainer.bundle.clone();
            *trainable_params_mut(&mut b)[i] = probe.clone();
            let mut s = trainer.store.clone();
            build_step(&b, &mut s, &batch, &opts)
                .map(|g| g.report.l_total)
                .unwrap_or(f64::NAN)
        });
        worst = worst.max(max_rel_err(a.data(), numeric.data()));
    }
    Ok(worst)
}

/// Runs every check; each passes when its max relative error is at most
/// `tolerance`.
pub fn run_suite(tolerance: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: String, err: f64| {
        out.push(CheckResult {
            passed: err <= tolerance,
            name,
            max_rel_err: err,
        })
    };
    for (name, inputs, build) in primitive_cases(&mut rng) {
        push(name, check_fn(&inputs, &build)?);
    }
    push("augment_rcerm".into(), augment_case(&mut rng, AugmentMode::Rcerm)?);
    push("augment_rcermng".into(), augment_case(&mut rng, AugmentMode::Rcermng)?);
    push("step_rcerm".into(), step_case(seed, Algorithm::Rcerm)?);
    push("step_rcermng".into(), step_case(seed, Algorithm::Rcermng)?);
    push("step_erm".into(), step_case(seed, Algorithm::Erm)?);
    Ok(out)
}
