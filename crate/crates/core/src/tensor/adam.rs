use ndarray::{Array2, Zip};

use super::TensorError;
use crate::scalar::Scalar;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Array2<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. Nothing is modified when a gradient is
/// non-finite or a shape disagrees.
pub fn adam_update<T: Scalar>(
    params: &mut [Array2<T>],
    grads: &[Array2<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::InvalidArgument(format!(
            "adam: {} parameter blocks, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (block, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || state.m[block].dim() != p.dim() {
            return Err(TensorError::shape("adam", p.dim(), g.dim()));
        }
        if let Some(index) = g.iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NonFiniteGradient { block, index });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Array2::from_elem((2, 3), 0.7f64)];
        let g = vec![Array2::zeros((2, 3))];
        let mut st = AdamState::new(&p);
        adam_update(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p[0], Array2::from_elem((2, 3), 0.7));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = AdamConfig {
            eps: 0.0,
            ..AdamConfig::default()
        };
        for g in [3.0f64, -0.01] {
            let mut p = vec![Array2::zeros((1, 1))];
            let mut st = AdamState::new(&p);
            adam_update(&mut p, &[Array2::from_elem((1, 1), g)], &mut st, &cfg).unwrap();
            assert!((p[0][[0, 0]] + cfg.lr * g.signum()).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        // With a constant gradient both bias-corrected moments equal g and g^2
        // exactly, so every step is lr * |g| / (|g| + eps).
        let cfg = AdamConfig::default();
        let g = 0.25f64;
        let mut p = vec![Array2::zeros((1, 1))];
        let mut st = AdamState::new(&p);
        let mut prev = 0.0;
        for _ in 0..2000 {
            adam_update(&mut p, &[Array2::from_elem((1, 1), g)], &mut st, &cfg).unwrap();
            let step = prev - p[0][[0, 0]];
            prev = p[0][[0, 0]];
            assert!((step - cfg.lr * g / (g + cfg.eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![Array2::zeros((1, 2))];
        let mut st = AdamState::new(&p);
        let g = vec![ndarray::array![[1.0f64, f64::NAN]]];
        let err = adam_update(&mut p, &g, &mut st, &AdamConfig::default()).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { block: 0, index: 1 });
        assert_eq!(st.t, 0);
    }
}
