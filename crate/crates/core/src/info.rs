//! Entropy and divergence terms of the clustering objective, both as plain
//! functions on probability matrices and as differentiable tape expressions.
//!
//! Logs are natural. Probabilities are floored at [`PROB_FLOOR`] before the
//! log, which makes `0 · log 0` evaluate to 0.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;

fn xlogx(p: f64) -> f64 {
    p * p.max(PROB_FLOOR).ln()
}

fn rows(probs: &Tensor<f64>) -> Result<(usize, usize)> {
    match probs.shape() {
        [b, k] => Ok((*b, *k)),
        s => Err(Error::InvalidArgument(format!(
            "expected a B×k probability matrix, got {s:?}"
        ))),
    }
}

/// Check that every row is a distribution (non-negative, sums to 1 within `tol`).
pub fn validate_row_stochastic(probs: &Tensor<f64>, tol: f64) -> Result<()> {
    let (b, k) = rows(probs)?;
    for r in 0..b {
        let row = &probs.data()[r * k..(r + 1) * k];
        if let Some(v) = row.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "row {r} holds invalid probability {v}"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "row {r} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Shannon entropy of one distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

/// Mean per-row entropy, i.e. `H(Y|X)` estimated over a batch.
pub fn conditional_entropy(probs: &Tensor<f64>) -> Result<f64> {
    validate_row_stochastic(probs, 1e-5)?;
    let (b, k) = rows(probs)?;
    Ok(probs.data().chunks(k).map(entropy).sum::<f64>() / b as f64)
}

/// Column mean of a probability matrix (the marginal `p̄`).
pub fn marginal(probs: &Tensor<f64>) -> Result<Vec<f64>> {
    let (b, k) = rows(probs)?;
    let mut m = vec![0.0; k];
    for row in probs.data().chunks(k) {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= b as f64);
    Ok(m)
}

/// `KL(p̄ ‖ uniform) = Σ p̄ log(k p̄)`.
pub fn kl_to_uniform(pbar: &[f64]) -> f64 {
    let k = pbar.len() as f64;
    pbar.iter().map(|&p| xlogx(p) + p * k.ln()).sum()
}

/// `max(KL(p̄ ‖ u) − δ, 0)` on the batch marginal.
pub fn marginal_kl_tolerant(probs: &Tensor<f64>, delta: f64) -> Result<f64> {
    validate_row_stochastic(probs, 1e-5)?;
    if delta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tolerance {delta} is negative"
        )));
    }
    Ok((kl_to_uniform(&marginal(probs)?) - delta).max(0.0))
}

/// Mean over rows of `Σ p log(p / q)` with `q` floored.
pub fn kl_divergence(p: &Tensor<f64>, q: &Tensor<f64>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape("kl_divergence", p.shape(), q.shape()));
    }
    let (b, k) = rows(p)?;
    let total: f64 = p
        .data()
        .chunks(k)
        .zip(q.data().chunks(k))
        .map(|(pr, qr)| {
            pr.iter()
                .zip(qr)
                .map(|(&a, &c)| xlogx(a) - a * c.max(PROB_FLOOR).ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / b as f64)
}

/// Tape form of [`conditional_entropy`] on a `B×k` probability node.
pub fn tape_conditional_entropy<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Var {
    let b = tape.shape(probs)[0];
    let lp = tape.log_clamped(probs, T::lit(PROB_FLOOR));
    let plp = tape.mul(probs, lp).expect("same shape");
    let s = tape.sum(plp);
    tape.scale(s, T::lit(-1.0 / b as f64))
}

/// Tape form of the tolerant marginal term. Returns `(clamped, unclamped)`.
pub fn tape_marginal_kl<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    delta: f64,
) -> Result<(Var, Var)> {
    let k = tape.shape(probs)[1];
    let pbar = tape.mean_rows(probs)?;
    let lp = tape.log_clamped(pbar, T::lit(PROB_FLOOR));
    let shifted = tape.add_scalar(lp, T::lit((k as f64).ln()));
    let terms = tape.mul(pbar, shifted)?;
    let kl = tape.sum(terms);
    let excess = tape.add_scalar(kl, T::lit(-delta));
    Ok((tape.relu(excess), kl))
}

/// Tape form of [`kl_divergence`] with a constant target `p`: the gradient
/// flows only through `q`.
pub fn tape_kl_to<T: Scalar>(tape: &mut Tape<T>, target: &Tensor<T>, q: Var) -> Result<Var> {
    if target.shape() != tape.shape(q) {
        return Err(Error::shape("kl target", target.shape(), tape.shape(q)));
    }
    let b = target.shape()[0];
    let floor = T::lit(PROB_FLOOR);
    let self_term: T = target.data().iter().map(|&p| p * p.max(floor).ln()).sum();
    let p = tape.constant(target.clone());
    let lq = tape.log_clamped(q, floor);
    let cross = tape.mul(p, lq)?;
    let s = tape.sum(cross);
    let neg = tape.scale(s, T::lit(-1.0 / b as f64));
    Ok(tape.add_scalar(neg, self_term / T::lit(b as f64)))
}
