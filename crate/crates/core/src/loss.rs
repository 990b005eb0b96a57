//! Contrastive, cross-entropy and total objectives.
//!
//! The contrastive term is NT-Xent with a negatives-only denominator:
//!
//! ```text
//! l(q) = -(q . k) / tau + log sum_n exp((q . n) / tau)
//! ```
//!
//! Setting `include_positive` adds `exp((q . k) / tau)` to the denominator,
//! which recovers the usual InfoNCE form.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cl: f64,
    pub l_ce: f64,
    pub l_total: f64,
    pub skipped_cells: usize,
    pub tau: f64,
    pub lambda: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be > 0, got {tau}")))
    }
}

/// Per-row contrastive losses for unit-norm queries `q` and positives `k`
/// (both `[B, D]`) against shared negatives `[N, D]`. Returns `[B]`.
pub fn nt_xent_rows(
    tape: &mut Tape,
    q: Var,
    k: Var,
    negatives: &Tensor,
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    check_tau(tau)?;
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 2 || qs != ks {
        return Err(Error::dim("nt_xent", &qs, &ks));
    }
    if negatives.rank() != 2 || negatives.shape()[1] != qs[1] {
        return Err(Error::dim("nt_xent", &qs, negatives.shape()));
    }
    if negatives.shape()[0] == 0 {
        return Err(Error::EmptyPool("no negatives for contrastive loss".into()));
    }
    let inv_tau = 1.0 / tau;
    let prod = tape.hadamard(q, k)?;
    let s_pos = tape.sum_last(prod)?;
    let s_pos = tape.scale(s_pos, inv_tau);

    let neg = tape.constant(negatives.clone());
    let neg_t = tape.transpose(neg)?;
    let s_neg = tape.matmul(q, neg_t)?;
    let s_neg = tape.scale(s_neg, inv_tau);
    let logits = if include_positive {
        let col = tape.reshape(s_pos, &[qs[0], 1])?;
        tape.concat_last(col, s_neg)?
    } else {
        s_neg
    };
    let lse = tape.logsumexp_last(logits)?;
    tape.sub(lse, s_pos)
}

/// Contrastive loss of one query `[D]` with its positive `[D]`.
pub fn nt_xent(
    tape: &mut Tape,
    q: Var,
    k: Var,
    negatives: &Tensor,
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    let d = tape.shape(q).first().copied().unwrap_or(0);
    if tape.shape(q).len() != 1 || tape.shape(k) != [d] {
        return Err(Error::dim("nt_xent", tape.shape(q), tape.shape(k)));
    }
    let q2 = tape.reshape(q, &[1, d])?;
    let k2 = tape.reshape(k, &[1, d])?;
    let rows = nt_xent_rows(tape, q2, k2, negatives, tau, include_positive)?;
    tape.reshape(rows, &[])
}

/// Plain sum of every entry of every term; zero when nothing contributed.
pub fn contrastive_total(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &t in terms {
        let s = tape.sum(t);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy_total(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Contract("cross entropy of an empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::Index(format!(
            "label {bad} with {} classes",
            shape[1]
        )));
    }
    let lse = tape.logsumexp_last(logits)?;
    let picked = tape.gather_last(logits, labels)?;
    let nll = tape.sub(lse, picked)?;
    tape.mean(nll)
}

/// `l_ce + lambda * l_cl`. `lambda = 0` is accepted so the contrastive
/// term can be switched off for comparisons.
pub fn total_loss(tape: &mut Tape, l_ce: Var, l_cl: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = tape.scale(l_cl, lambda);
    tape.add(l_ce, weighted)
}
