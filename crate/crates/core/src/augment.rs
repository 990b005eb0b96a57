//! Augmentation network: gated fusion of teacher representatives against the
//! query, attention over the fused representatives, and the residual
//! projection that yields the augmented positive.
//!
//! For a query `q` and pool rows `k_r`:
//!
//! ```text
//! z_r       = sigmoid(gate([q, k_r]))
//! refined_r = z_r * tanh(q) + (1 - z_r) * tanh(k_r)
//! w         = softmax_r(phi1(q) . phi1(refined_r))
//! p         = sum_r w_r * phi1(refined_r)
//! positive  = relu(q + phi3(relu(phi2([phi1(q), p]))))
//! ```
//!
//! Without gated fusion (`AugmentMode::Rcermng`) the pool rows are used
//! unchanged as `refined_r`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LinearVars, ModelBundle};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Rcerm,
    Rcermng,
}

/// How gradients of the contrastive term reach the augmentation network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradRouting {
    /// The augmented positive is cut from the tape; gate and attention
    /// parameters receive no contrastive gradient.
    DetachFull,
    /// The positive stays differentiable w.r.t. the query, gate and attention
    /// parameters. Teacher pool rows are constants either way.
    #[default]
    GradThroughAugmenter,
}

#[derive(Clone, Copy, Debug)]
pub struct AugmenterVars {
    pub gate: LinearVars,
    pub phi1: LinearVars,
    pub phi2: LinearVars,
    pub phi3: LinearVars,
}

impl AugmenterVars {
    pub fn bind(bundle: &ModelBundle, tape: &mut Tape, trainable: bool) -> Result<Self> {
        Ok(Self {
            gate: bundle.gate.bind(tape, trainable)?,
            phi1: bundle.attn.phi1.bind(tape, trainable)?,
            phi2: bundle.attn.phi2.bind(tape, trainable)?,
            phi3: bundle.attn.phi3.bind(tape, trainable)?,
        })
    }
}

/// Stacked augmented positives, one row per query, unit-norm.
#[derive(Clone, Copy, Debug)]
pub struct AugmentedPositive {
    pub k: Var,
    pub detached: bool,
}

fn expect_vec(tape: &Tape, v: Var, dim: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 1 || s[0] != dim {
        return Err(Error::dim(op, s, &[dim]));
    }
    Ok(())
}

fn expect_rows(tape: &Tape, v: Var, dim: usize, op: &'static str) -> Result<usize> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != dim {
        return Err(Error::dim(op, s, &[0, dim]));
    }
    Ok(s[0])
}

/// Gate vector `z = sigmoid(gate([q, k_raw]))` for single vectors.
pub fn gate_vector(tape: &mut Tape, q: Var, k_raw: Var, gate: &LinearVars) -> Result<Var> {
    let d = tape.shape(q).first().copied().unwrap_or(0);
    expect_vec(tape, k_raw, d, "gate_fuse")?;
    let joined = tape.concat_last(q, k_raw)?;
    let logits = gate.apply(tape, joined)?;
    Ok(tape.sigmoid(logits))
}

/// Refines one teacher representative against the query.
pub fn gate_fuse(tape: &mut Tape, q: Var, k_raw: Var, gate: &LinearVars) -> Result<Var> {
    let z = gate_vector(tape, q, k_raw, gate)?;
    let tq = tape.tanh(q);
    let tk = tape.tanh(k_raw);
    fuse(tape, z, tq, tk)
}

// z * a + (1 - z) * b
fn fuse(tape: &mut Tape, z: Var, a: Var, b: Var) -> Result<Var> {
    let neg = tape.scale(z, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let left = tape.hadamard(z, a)?;
    let right = tape.hadamard(one_minus, b)?;
    tape.add(left, right)
}

fn attention_from_projections(tape: &mut Tape, phi_q: Var, phi_refined: Var) -> Result<Var> {
    let d = tape.shape(phi_q)[0];
    let r = tape.shape(phi_refined)[0];
    let col = tape.reshape(phi_q, &[d, 1])?;
    let scores = tape.matmul(phi_refined, col)?;
    let scores = tape.reshape(scores, &[r])?;
    tape.softmax_last(scores)
}

fn combine(tape: &mut Tape, weights: Var, phi_refined: Var) -> Result<Var> {
    let r = tape.shape(weights)[0];
    let d = tape.shape(phi_refined)[1];
    let w = tape.reshape(weights, &[1, r])?;
    let p = tape.matmul(w, phi_refined)?;
    tape.reshape(p, &[d])
}

/// Softmax over representatives of `phi1(q) . phi1(refined_r)`.
pub fn attention_weights(
    tape: &mut Tape,
    q: Var,
    refined: Var,
    phi1: &LinearVars,
) -> Result<Var> {
    let d = tape.shape(q).first().copied().unwrap_or(0);
    expect_vec(tape, q, d, "attention_weights")?;
    let r = expect_rows(tape, refined, d, "attention_weights")?;
    if r == 0 {
        return Err(Error::EmptyPool("attention over zero representatives".into()));
    }
    let phi_q = phi1.apply(tape, q)?;
    let phi_refined = phi1.apply(tape, refined)?;
    attention_from_projections(tape, phi_q, phi_refined)
}

/// `p = sum_r w_r * phi1(refined_r)`.
pub fn positive_representative(
    tape: &mut Tape,
    weights: Var,
    refined: Var,
    phi1: &LinearVars,
) -> Result<Var> {
    let r = tape.shape(weights).first().copied().unwrap_or(0);
    let d = tape.shape(refined).get(1).copied().unwrap_or(0);
    expect_vec(tape, weights, r, "positive_representative")?;
    if expect_rows(tape, refined, d, "positive_representative")? != r {
        return Err(Error::dim(
            "positive_representative",
            tape.shape(weights),
            tape.shape(refined),
        ));
    }
    let total: f64 = tape.value(weights).data().iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "attention weights sum to {total}, expected 1"
        )));
    }
    let phi_refined = phi1.apply(tape, refined)?;
    combine(tape, weights, phi_refined)
}

/// `relu(q + phi3(relu(phi2([phi1(q), p]))))`, before normalization.
pub fn augment(
    tape: &mut Tape,
    q: Var,
    p: Var,
    vars: &AugmenterVars,
) -> Result<Var> {
    let d = tape.shape(q).first().copied().unwrap_or(0);
    expect_vec(tape, q, d, "augment")?;
    expect_vec(tape, p, d, "augment")?;
    let phi_q = vars.phi1.apply(tape, q)?;
    residual(tape, q, phi_q, p, vars)
}

fn residual(tape: &mut Tape, q: Var, phi_q: Var, p: Var, vars: &AugmenterVars) -> Result<Var> {
    let joined = tape.concat_last(phi_q, p)?;
    let h = vars.phi2.apply(tape, joined)?;
    let h = tape.relu(h);
    let h = vars.phi3.apply(tape, h)?;
    let s = tape.add(q, h)?;
    Ok(tape.relu(s))
}

/// Augmented positives for every row of `q_batch` (`[B, D]`, raw encoder
/// output) against a shared pool of teacher embeddings (`[R, D]`).
///
/// Per row this is `gate_fuse` on every pool row (or no fusion for
/// `Rcermng`), then `attention_weights`, `positive_representative` and
/// `augment`, followed by row normalization. The gate projection is split
/// into its query and key halves so the pool half is computed once per call.
pub fn augment_batch(
    tape: &mut Tape,
    q_batch: Var,
    pool: &Tensor,
    vars: &AugmenterVars,
    mode: AugmentMode,
    routing: GradRouting,
) -> Result<AugmentedPositive> {
    let d = tape.shape(q_batch).get(1).copied().unwrap_or(0);
    let b = expect_rows(tape, q_batch, d, "augment_batch")?;
    if pool.rank() != 2 || pool.shape()[1] != d {
        return Err(Error::dim("augment_batch", pool.shape(), &[0, d]));
    }
    let r = pool.shape()[0];
    if r == 0 {
        return Err(Error::EmptyPool("positive pool has no rows".into()));
    }
    let pool_c = tape.constant(pool.clone());
    let phi_q_all = vars.phi1.apply(tape, q_batch)?;

    // Shared per-call pieces of the gate.
    let gated = match mode {
        AugmentMode::Rcerm => {
            let w_q = tape.slice_last(vars.gate.weight, 0, d)?;
            let w_k = tape.slice_last(vars.gate.weight, d, d)?;
            let w_q_t = tape.transpose(w_q)?;
            let w_k_t = tape.transpose(w_k)?;
            let pool_proj = tape.matmul(pool_c, w_k_t)?;
            let q_proj = tape.matmul(q_batch, w_q_t)?;
            let q_proj = tape.add_row(q_proj, vars.gate.bias)?;
            let tanh_pool = tape.tanh(pool_c);
            let tanh_q = tape.tanh(q_batch);
            Some((pool_proj, q_proj, tanh_pool, tanh_q))
        }
        AugmentMode::Rcermng => None,
    };
    let shared_phi_pool = match mode {
        AugmentMode::Rcermng => Some(vars.phi1.apply(tape, pool_c)?),
        AugmentMode::Rcerm => None,
    };

    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let q = tape.row(q_batch, i)?;
        let phi_q = tape.row(phi_q_all, i)?;
        let phi_refined = match (gated, shared_phi_pool) {
            (Some((pool_proj, q_proj, tanh_pool, tanh_q)), _) => {
                let qp = tape.row(q_proj, i)?;
                let logits = tape.add_row(pool_proj, qp)?;
                let z = tape.sigmoid(logits);
                let tq = tape.row(tanh_q, i)?;
                let tq = tape.broadcast_rows(tq, r)?;
                let refined = fuse(tape, z, tq, tanh_pool)?;
                vars.phi1.apply(tape, refined)?
            }
            (None, Some(shared)) => shared,
            (None, None) => unreachable!(),
        };
        let w = attention_from_projections(tape, phi_q, phi_refined)?;
        let p = combine(tape, w, phi_refined)?;
        rows.push(residual(tape, q, phi_q, p, vars)?);
    }
    let mut k = tape.concat_rows(&rows)?;
    let detached = routing == GradRouting::DetachFull;
    if detached {
        k = tape.detach(k);
    }
    let k = tape.l2_normalize_rows(k)?;
    Ok(AugmentedPositive { k, detached })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LinearLayer, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::vector(v.to_vec()))
    }

    fn zero_gate(d: usize, tape: &mut Tape) -> LinearVars {
        LinearLayer::zeros(2 * d, d).bind(tape, false).unwrap()
    }

    fn saturated_gate(d: usize, tape: &mut Tape) -> LinearVars {
        let mut g = LinearLayer::zeros(2 * d, d);
        g.bias = Tensor::full(&[d], 1e3);
        g.bind(tape, false).unwrap()
    }

    fn bundle(d: usize, seed: u64) -> ModelBundle {
        ModelBundle::init(
            &ModelConfig {
                input_dim: 5,
                hidden: vec![6],
                embed_dim: d,
                classes: 2,
                mu: 0.9,
                lambda: 0.5,
                tau: 0.1,
            },
            seed,
        )
        .unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, r: usize, d: usize) -> Tensor {
        Tensor::new(vec![r, d], (0..r * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_gate_averages_tanh() {
        let mut t = Tape::new();
        let g = zero_gate(2, &mut t);
        let q = vec_var(&mut t, &[0.3, -0.7]);
        let k = vec_var(&mut t, &[1.2, 0.4]);
        let z = gate_vector(&mut t, q, k, &g).unwrap();
        assert_eq!(t.value(z).data(), &[0.5, 0.5]);
        let out = gate_fuse(&mut t, q, k, &g).unwrap();
        for (i, (a, b)) in [(0.3f64, 1.2f64), (-0.7, 0.4)].iter().enumerate() {
            let want = 0.5 * (a.tanh() + b.tanh());
            assert!((t.value(out).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_query_zero_gate_hand_value() {
        let mut t = Tape::new();
        let g = zero_gate(2, &mut t);
        let q = vec_var(&mut t, &[0.0, 0.0]);
        let k = vec_var(&mut t, &[1.0, -1.0]);
        let out = gate_fuse(&mut t, q, k, &g).unwrap();
        assert!((t.value(out).data()[0] - 0.380797).abs() < 1e-6);
        assert!((t.value(out).data()[1] + 0.380797).abs() < 1e-6);
    }

    #[test]
    fn saturated_gate_ignores_representative() {
        let mut t = Tape::new();
        let g = saturated_gate(3, &mut t);
        let q = vec_var(&mut t, &[0.2, -1.0, 2.0]);
        let k1 = vec_var(&mut t, &[5.0, 5.0, 5.0]);
        let k2 = vec_var(&mut t, &[-3.0, 0.1, 0.0]);
        let a = gate_fuse(&mut t, q, k1, &g).unwrap();
        let b = gate_fuse(&mut t, q, k2, &g).unwrap();
        let tq = t.tanh(q);
        assert_eq!(t.value(a), t.value(tq));
        assert_eq!(t.value(b), t.value(tq));
    }

    #[test]
    fn gate_dimension_mismatch() {
        let mut t = Tape::new();
        let g = zero_gate(2, &mut t);
        let q = vec_var(&mut t, &[0.0, 0.0]);
        let k = vec_var(&mut t, &[1.0, -1.0, 0.0]);
        assert!(matches!(gate_fuse(&mut t, q, k, &g), Err(Error::Dimension { .. })));
    }

    #[test]
    fn attention_examples() {
        let mut t = Tape::new();
        let id = LinearLayer::identity(2).bind(&mut t, false).unwrap();
        let q = vec_var(&mut t, &[1.0, 0.0]);
        let same = t.constant(Tensor::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap());
        let w = attention_weights(&mut t, q, same, &id).unwrap();
        assert_eq!(t.value(w).data(), &[0.5, 0.5]);

        let reps = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let w = attention_weights(&mut t, q, reps, &id).unwrap();
        assert!((t.value(w).data()[0] - 0.731059).abs() < 1e-6);
        assert!((t.value(w).data()[1] - 0.268941).abs() < 1e-6);

        let single = t.constant(Tensor::from_rows(&[vec![-2.0, 7.0]]).unwrap());
        let w = attention_weights(&mut t, q, single, &id).unwrap();
        assert_eq!(t.value(w).data(), &[1.0]);

        let empty = t.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(
            attention_weights(&mut t, q, empty, &id),
            Err(Error::EmptyPool(_))
        ));
    }

    #[test]
    fn positive_representative_examples() {
        let mut t = Tape::new();
        let id = LinearLayer::identity(2).bind(&mut t, false).unwrap();
        let reps = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let w = vec_var(&mut t, &[0.5, 0.5]);
        let p = positive_representative(&mut t, w, reps, &id).unwrap();
        assert_eq!(t.value(p).data(), &[0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = LinearLayer::kaiming(2, 2, &mut rng);
        let phi_v = phi.bind(&mut t, false).unwrap();
        let w = vec_var(&mut t, &[1.0, 0.0]);
        let p = positive_representative(&mut t, w, reps, &phi_v).unwrap();
        let r0 = t.row(reps, 0).unwrap();
        let want = phi_v.apply(&mut t, r0).unwrap();
        assert_eq!(t.value(p), t.value(want));

        let w3 = vec_var(&mut t, &[0.2, 0.3, 0.5]);
        assert!(positive_representative(&mut t, w3, reps, &id).is_err());
    }

    #[test]
    fn positive_representative_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (r, d) = (4, 3);
        let phi = LinearLayer::kaiming(d, d, &mut rng);
        let refined = random_rows(&mut rng, r, d);
        let raw: Vec<f64> = (0..r).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|v| v / total).collect();

        let mut t = Tape::new();
        let phi_v = phi.bind(&mut t, false).unwrap();
        let rv = t.constant(refined.clone());
        let wv = vec_var(&mut t, &weights);
        let p = positive_representative(&mut t, wv, rv, &phi_v).unwrap();

        let mut expect = vec![0.0; d];
        for (k, w) in weights.iter().enumerate() {
            for o in 0..d {
                let mut proj = phi.bias.data()[o];
                for i in 0..d {
                    proj += phi.weight.data()[o * d + i] * refined.row(k)[i];
                }
                expect[o] += w * proj;
            }
        }
        for o in 0..d {
            assert!((t.value(p).data()[o] - expect[o]).abs() <= 1e-12);
        }
    }

    #[test]
    fn augment_with_zero_residual_is_relu_q() {
        let mut t = Tape::new();
        let d = 3;
        let b = bundle(d, 1);
        let mut vars = AugmenterVars::bind(&b, &mut t, false).unwrap();
        vars.phi2 = LinearLayer::zeros(2 * d, d).bind(&mut t, false).unwrap();
        vars.phi3 = LinearLayer::zeros(d, d).bind(&mut t, false).unwrap();
        let q = vec_var(&mut t, &[0.5, -0.2, 1.5]);
        let p = vec_var(&mut t, &[9.0, 9.0, 9.0]);
        let out = augment(&mut t, q, p, &vars).unwrap();
        assert_eq!(t.value(out).data(), &[0.5, 0.0, 1.5]);

        let neg = vec_var(&mut t, &[-0.5, -0.2, -1.5]);
        let out = augment(&mut t, neg, p, &vars).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v == 0.0));
        let row = t.reshape(out, &[1, d]).unwrap();
        assert!(matches!(
            t.l2_normalize_rows(row),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn rcermng_with_identity_and_zero_residual_normalizes_relu_q() {
        let d = 3;
        let mut t = Tape::new();
        let b = bundle(d, 2);
        let mut vars = AugmenterVars::bind(&b, &mut t, false).unwrap();
        vars.phi1 = LinearLayer::identity(d).bind(&mut t, false).unwrap();
        vars.phi2 = LinearLayer::zeros(2 * d, d).bind(&mut t, false).unwrap();
        vars.phi3 = LinearLayer::zeros(d, d).bind(&mut t, false).unwrap();
        let qs = Tensor::from_rows(&[vec![0.3, -0.4, 0.4], vec![-1.0, 2.0, 2.0]]).unwrap();
        let q = t.constant(qs);
        let pool = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]]).unwrap();
        let k = augment_batch(&mut t, q, &pool, &vars, AugmentMode::Rcermng, GradRouting::DetachFull)
            .unwrap();
        let out = t.value(k.k).data();
        let expect = [0.6, 0.0, 0.8, 0.0, 1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()];
        for (a, e) in out.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_gate_single_row_pipeline_is_finite() {
        let d = 4;
        let mut t = Tape::new();
        let b = bundle(d, 3);
        let mut vars = AugmenterVars::bind(&b, &mut t, false).unwrap();
        vars.gate = saturated_gate(d, &mut t);
        let q = t.constant(Tensor::from_rows(&[vec![0.9, 0.2, 0.1, 0.5]]).unwrap());
        let pool = Tensor::from_rows(&[vec![0.5, 0.5, 0.5, 0.5]]).unwrap();
        let k = augment_batch(&mut t, q, &pool, &vars, AugmentMode::Rcerm, GradRouting::default())
            .unwrap();
        assert!(t.value(k.k).is_finite());
        let norm: f64 = t.value(k.k).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(t.value(k.k).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let d = 4;
        let b = bundle(d, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let qs = random_rows(&mut rng, 2, d);
        let pool = random_rows(&mut rng, 5, d);
        for mode in [AugmentMode::Rcerm, AugmentMode::Rcermng] {
            let run = |rows: Tensor| {
                let mut t = Tape::new();
                let vars = AugmenterVars::bind(&b, &mut t, true).unwrap();
                let q = t.constant(rows);
                let k = augment_batch(&mut t, q, &pool, &vars, mode, GradRouting::default()).unwrap();
                t.value(k.k).clone()
            };
            let both = run(qs.clone());
            for i in 0..2 {
                let single = run(Tensor::new(vec![1, d], qs.row(i).to_vec()).unwrap());
                assert_eq!(single.row(0), both.row(i));
            }
        }
    }

    #[test]
    fn batched_gate_matches_per_row_gate_fuse() {
        let d = 4;
        let b = bundle(d, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let qs = random_rows(&mut rng, 1, d);
        let pool = random_rows(&mut rng, 3, d);

        let mut t = Tape::new();
        let vars = AugmenterVars::bind(&b, &mut t, false).unwrap();
        let q = t.constant(qs.clone());
        let batched = augment_batch(&mut t, q, &pool, &vars, AugmentMode::Rcerm, GradRouting::DetachFull)
            .unwrap();

        let qv = t.row(q, 0).unwrap();
        let refined: Vec<Var> = (0..3)
            .map(|r| {
                let k = vec_var(&mut t, pool.row(r));
                gate_fuse(&mut t, qv, k, &vars.gate).unwrap()
            })
            .collect();
        let refined = t.concat_rows(&refined).unwrap();
        let w = attention_weights(&mut t, qv, refined, &vars.phi1).unwrap();
        let p = positive_representative(&mut t, w, refined, &vars.phi1).unwrap();
        let out = augment(&mut t, qv, p, &vars).unwrap();
        let out = t.reshape(out, &[1, d]).unwrap();
        let out = t.l2_normalize_rows(out).unwrap();
        for (a, e) in t.value(batched.k).data().iter().zip(t.value(out).data()) {
            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn empty_pool_is_an_error() {
        let d = 3;
        let b = bundle(d, 1);
        let mut t = Tape::new();
        let vars = AugmenterVars::bind(&b, &mut t, false).unwrap();
        let q = t.constant(Tensor::full(&[1, d], 0.5));
        let err = augment_batch(
            &mut t,
            q,
            &Tensor::zeros(&[0, d]),
            &vars,
            AugmentMode::Rcerm,
            GradRouting::default(),
        );
        assert!(matches!(err, Err(Error::EmptyPool(_))));
    }

    #[test]
    fn detach_full_blocks_augmenter_gradient() {
        let d = 3;
        let b = bundle(d, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let qs = random_rows(&mut rng, 2, d);
        let pool = random_rows(&mut rng, 4, d);
        for (routing, expect_grad) in [
            (GradRouting::DetachFull, false),
            (GradRouting::GradThroughAugmenter, true),
        ] {
            let mut t = Tape::new();
            let vars = AugmenterVars::bind(&b, &mut t, true).unwrap();
            let q = t.param(qs.clone());
            let k = augment_batch(&mut t, q, &pool, &vars, AugmentMode::Rcerm, routing).unwrap();
            assert_eq!(k.detached, !expect_grad);
            let l = t.sum(k.k);
            let g = t.backward(l).unwrap();
            assert_eq!(g.get(vars.gate.weight).is_some(), expect_grad);
            assert_eq!(g.get(vars.phi2.weight).is_some(), expect_grad);
        }
    }
}
