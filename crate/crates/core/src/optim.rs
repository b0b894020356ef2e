//! Parameter containers and the SGD / AdamW update rules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    /// Total element count across all entries.
    pub fn total_dim(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenate all entries into one vector, in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.total_dim());
        for (_, t) in &self.entries {
            v.extend_from_slice(t.data());
        }
        v
    }

    /// Overwrite entry values from a flat vector (the inverse of
    /// [`ParamSet::flatten`]).
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_dim() {
            return Err(Error::DimMismatch {
                expected: self.total_dim(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// AdamW moment state.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> AdamState {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }
}

/// Plain gradient descent: params' = params - lr * grad.
pub fn sgd_step(params: &ParamSet, grads: &[f64], lr: f64) -> Result<ParamSet> {
    if grads.len() != params.total_dim() {
        return Err(Error::DimMismatch {
            expected: params.total_dim(),
            got: grads.len(),
        });
    }
    if lr <= 0.0 {
        return Err(Error::rejected("sgd_step learning rate must be > 0"));
    }
    let mut flat = params.flatten();
    for (p, g) in flat.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    let mut out = params.clone();
    out.unflatten(&flat)?;
    Ok(out)
}

/// One AdamW step with bias correction and decoupled weight decay.
///
/// Besides the updated parameters and state, returns the element-wise
/// preconditioner `1 / (sqrt(v_hat) + eps)` actually applied this step;
/// the adaptation algorithm rescales Jacobian rows with it when the model
/// optimizer is Adam/AdamW.
pub fn adam_step(
    params: &ParamSet,
    grads: &[f64],
    state: &AdamState,
    lr: f64,
) -> Result<(ParamSet, AdamState, Vec<f64>)> {
    let dim = params.total_dim();
    if grads.len() != dim || state.m.len() != dim || state.v.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: grads.len(),
        });
    }
    let mut next = state.clone();
    next.t = state.t + 1;
    let bc1 = 1.0 - state.beta1.powi(next.t as i32);
    let bc2 = 1.0 - state.beta2.powi(next.t as i32);
    let mut flat = params.flatten();
    let mut precond = vec![0.0; dim];
    for i in 0..dim {
        let g = grads[i];
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        let p = 1.0 / (v_hat.sqrt() + state.eps);
        precond[i] = p;
        flat[i] -= lr * (m_hat * p + state.weight_decay * flat[i]);
    }
    let mut out = params.clone();
    out.unflatten(&flat)?;
    Ok((out, next, precond))
}

/// AdamW step over a bare vector (used for the auxiliary parameters).
pub fn adam_step_flat(
    values: &[f64],
    grads: &[f64],
    state: &AdamState,
    lr: f64,
) -> Result<(Vec<f64>, AdamState)> {
    let mut ps = ParamSet::new();
    ps.push("flat", Tensor::new(&[values.len()], values.to_vec())?);
    let (out, next, _) = adam_step(&ps, grads, state, lr)?;
    Ok((out.flatten(), next))
}

/// Model optimizer selector with owned state.
#[derive(Clone, Debug)]
pub enum ModelOptimizer {
    Sgd { lr: f64 },
    AdamW { lr: f64, state: AdamState },
}

impl ModelOptimizer {
    pub fn sgd(lr: f64) -> ModelOptimizer {
        ModelOptimizer::Sgd { lr }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn adamw(
        dim: usize,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> ModelOptimizer {
        ModelOptimizer::AdamW {
            lr,
            state: AdamState::new(dim, beta1, beta2, eps, weight_decay),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            ModelOptimizer::Sgd { lr } => *lr,
            ModelOptimizer::AdamW { lr, .. } => *lr,
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, ModelOptimizer::AdamW { .. })
    }

    /// Apply one step in place; returns the preconditioner for adaptive
    /// optimizers, `None` for SGD.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[f64]) -> Result<Option<Vec<f64>>> {
        match self {
            ModelOptimizer::Sgd { lr } => {
                *params = sgd_step(params, grads, *lr)?;
                Ok(None)
            }
            ModelOptimizer::AdamW { lr, state } => {
                let (p, s, precond) = adam_step(params, grads, state, *lr)?;
                *params = p;
                *state = s;
                Ok(Some(precond))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::from_fn(&[2, 3], |i| i as f64));
        p.push("b", Tensor::from_fn(&[4], |i| -(i as f64)));
        let flat = p.flatten();
        assert_eq!(flat.len(), p.total_dim());
        let mut q = p.clone();
        q.unflatten(&flat).unwrap();
        assert_eq!(q.flatten(), flat);
        assert!(q.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn sgd_basics() {
        let p = scalar_params(1.0);
        let out = sgd_step(&p, &[2.0], 0.1).unwrap();
        assert_eq!(out.tensor(0).item(), 0.8);

        let same = sgd_step(&p, &[0.0], 0.1).unwrap();
        assert_eq!(same.tensor(0).item(), 1.0);

        // two steps with a fixed gradient equal one step at summed scale
        let g = 0.7;
        let two = sgd_step(&sgd_step(&p, &[g], 0.1).unwrap(), &[g], 0.1).unwrap();
        let one = sgd_step(&p, &[g], 0.2).unwrap();
        assert!((two.tensor(0).item() - one.tensor(0).item()).abs() < 1e-15);

        assert!(sgd_step(&p, &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = scalar_params(3.0);
        let s = AdamState::new(1, 0.5, 0.999, 1e-8, 0.0);
        let (out, ns, _) = adam_step(&p, &[0.0], &s, 1e-3).unwrap();
        assert_eq!(out.tensor(0).item(), 3.0);
        assert_eq!(ns.t, 1);
        assert_eq!(ns.m, vec![0.0]);
        assert_eq!(ns.v, vec![0.0]);
    }

    #[test]
    fn adam_first_step_analytic() {
        // theta=0, g=1, beta1=0.5, beta2=0.999, lr=1e-3:
        // m_hat = v_hat = 1, step = -lr / (1 + eps)
        let p = scalar_params(0.0);
        let s = AdamState::new(1, 0.5, 0.999, 1e-8, 0.0);
        let (out, _, precond) = adam_step(&p, &[1.0], &s, 1e-3).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((out.tensor(0).item() - expected).abs() < 1e-18);
        assert!((out.tensor(0).item() - (-9.999_999_9e-4)).abs() < 1e-11);
        assert!((precond[0] - 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(theta) = theta^2 strictly decreases for 10 steps from theta=1
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(1, 0.9, 0.999, 1e-8, 0.0);
        let mut last = 1.0f64;
        for _ in 0..10 {
            let th = p.tensor(0).item();
            let (np, ns, _) = adam_step(&p, &[2.0 * th], &s, 0.05).unwrap();
            p = np;
            s = ns;
            let f = p.tensor(0).item().powi(2);
            assert!(f < last, "{} !< {}", f, last);
            last = f;
        }
    }

    #[test]
    fn adam_with_zero_betas_is_sign_sgd() {
        // beta1 = beta2 = 0: step = -lr * g / (|g| + eps) ~ -lr * sign(g)
        for &g in &[3.0f64, -0.25, 1e-3] {
            let p = scalar_params(1.0);
            let s = AdamState::new(1, 0.0, 0.0, 1e-12, 0.0);
            let (out, _, _) = adam_step(&p, &[g], &s, 0.1).unwrap();
            let expected = 1.0 - 0.1 * g.signum();
            assert!((out.tensor(0).item() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_second_moment_nonnegative() {
        let mut p = scalar_params(0.3);
        let mut s = AdamState::new(1, 0.5, 0.999, 1e-8, 0.01);
        for i in 0..50 {
            let g = ((i as f64) * 0.77).sin();
            let (np, ns, _) = adam_step(&p, &[g], &s, 1e-2).unwrap();
            p = np;
            s = ns;
            assert!(s.v[0] >= 0.0);
        }
    }
}
