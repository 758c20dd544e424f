//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments matching `params`. `beta2` and `eps` take the usual
    /// defaults of 0.999 and 1e-8.
    pub fn new(params: &[Tensor<T>], lr: f64, beta1: f64) -> Self {
        Self::with_betas(params, lr, beta1, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor<T>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One descent step: `p ← p − lr · m̂ / (√v̂ + eps)`. Callers maximizing an
/// objective pass the gradient of its negation.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter #{i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = b1t * *mv + one_b1 * gv;
            *vv = b2t * *vv + one_b2 * gv * gv;
            let mhat = *mv * inv_bc1;
            let vhat = *vv * inv_bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1], &[v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![scalar(1.5)];
        let mut st = AdamState::new(&p, 1e-4, 0.5);
        adam_step(&mut p, &[scalar(0.0)], &mut st).unwrap();
        assert_eq!(p[0].item(), 1.5);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + eps)
        let mut p = vec![scalar(1.0)];
        let mut st = AdamState::new(&p, 1e-4, 0.5);
        adam_step(&mut p, &[scalar(1.0)], &mut st).unwrap();
        let expected = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert!((p[0].item() - 0.9999).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut p = vec![scalar(1.0)];
        let mut st = AdamState::new(&p, 1e-4, 0.5);
        let mut last = 1.0;
        for _ in 0..2 {
            adam_step(&mut p, &[scalar(1.0)], &mut st).unwrap();
            assert!(p[0].item() < last);
            last = p[0].item();
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = vec![scalar(1.0)];
        let mut st = AdamState::new(&p, 1e-4, 0.5);
        assert!(matches!(
            adam_step(&mut p, &[scalar(f64::NAN)], &mut st),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(st.step_count(), 0);
    }
}
