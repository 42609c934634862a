//! Named parameter storage and the Adam update.

use serde::{Deserialize, Serialize};

use super::graph::{AutodiffError, Graph, NodeId};
use super::tensor::Tensor;

/// Ordered, named parameter tensors. The order is canonical: it defines the
/// flat-vector layout used by the optimizer and the checkpoint format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Insert every parameter as a leaf of `g`, in canonical order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, t)| g.leaf(t.clone()))
            .collect()
    }

    /// Flat gradient vector for bound parameters, zeros where a parameter
    /// did not receive a gradient.
    pub fn collect_grads(&self, g: &Graph, bound: &[NodeId]) -> Vec<f64> {
        assert_eq!(bound.len(), self.entries.len());
        let mut out = Vec::with_capacity(self.flat_len());
        for (id, (_, t)) in bound.iter().zip(&self.entries) {
            match g.grad(*id) {
                Some(grad) => out.extend_from_slice(grad.data()),
                None => out.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
        out
    }

    /// Copy all parameters into one flat vector (canonical order).
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Restore from a flat vector produced by [`ParameterSet::snapshot`].
    pub fn restore(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.flat_len());
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Adam hyperparameters; the learning rate defaults to 1e-3 and the moment
/// decays and epsilon to the optimizer's standard values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Optimizer state: step count plus first and second moment accumulators
/// laid out like the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(flat_len: usize, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: vec![0.0; flat_len],
            v: vec![0.0; flat_len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam step. Rejects non-finite gradients without
/// touching parameters or state, so a failed step can be diagnosed from an
/// intact snapshot.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &[f64],
    state: &mut AdamState,
) -> Result<(), AutodiffError> {
    assert_eq!(grads.len(), state.m.len());
    assert_eq!(grads.len(), params.flat_len());
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        let mut offset = 0;
        for (name, t) in params.entries() {
            if pos < offset + t.len() {
                return Err(AutodiffError::NonFiniteGradient { name: name.to_string() });
            }
            offset += t.len();
        }
        unreachable!("position is within the flat length");
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bias1 = 1.0 - h.beta1.powi(t);
    let bias2 = 1.0 - h.beta2.powi(t);
    let mut offset = 0;
    for idx in 0..params.len() {
        let tensor = params.tensor_mut(idx);
        let data = tensor.data_mut();
        for (i, p) in data.iter_mut().enumerate() {
            let g = grads[offset + i];
            let m = &mut state.m[offset + i];
            let v = &mut state.v[offset + i];
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        offset += data.len();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut params = ParameterSet::new();
        params.push("w", Tensor::scalar(0.5));
        let mut state = AdamState::new(1, AdamHyper::default());
        adam_step(&mut params, &[1.0], &mut state).unwrap();
        // Bias correction makes the first step ~ -lr * sign(g).
        let delta = params.tensor(0).data()[0] - 0.5;
        assert!((delta + 1e-3).abs() < 1e-8, "delta {delta}");
    }

    #[test]
    fn zero_gradient_with_zero_moments_is_a_fixpoint() {
        let mut params = ParameterSet::new();
        params.push("w", Tensor::from_vec(1, 2, vec![1.0, -2.0]));
        let mut state = AdamState::new(2, AdamHyper::default());
        adam_step(&mut params, &[0.0, 0.0], &mut state).unwrap();
        assert_eq!(params.tensor(0).data(), &[1.0, -2.0]);
    }

    #[test]
    fn identical_streams_stay_identical() {
        let mut params = ParameterSet::new();
        params.push("a", Tensor::scalar(0.3));
        params.push("b", Tensor::scalar(0.3));
        let mut state = AdamState::new(2, AdamHyper::default());
        for step in 0..50 {
            let g = (step as f64 * 0.7).sin();
            adam_step(&mut params, &[g, g], &mut state).unwrap();
            assert_eq!(params.tensor(0).data()[0], params.tensor(1).data()[0]);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut params = ParameterSet::new();
        params.push("w", Tensor::scalar(0.5));
        params.push("u", Tensor::scalar(1.5));
        let mut state = AdamState::new(2, AdamHyper::default());
        let err = adam_step(&mut params, &[0.1, f64::NAN], &mut state).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::NonFiniteGradient { name: "u".into() }
        );
        assert_eq!(params.tensor(0).data()[0], 0.5);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let mut params = ParameterSet::new();
        params.push("a", Tensor::from_vec(2, 2, vec![1., 2., 3., 4.]));
        params.push("b", Tensor::from_vec(1, 3, vec![5., 6., 7.]));
        let snap = params.snapshot();
        assert_eq!(snap, vec![1., 2., 3., 4., 5., 6., 7.]);
        let mut other = params.clone();
        *other.tensor_mut(0).at_mut(0, 0) = 99.0;
        other.restore(&snap);
        assert_eq!(other, params);
    }
}
