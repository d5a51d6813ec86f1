//! Adam with decoupled weight decay.

use crate::autograd::Gradients;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Bias-corrected first and second moments of a parameter.
    pub fn corrected_moments(&self, id: ParamId, cfg: &TrainConfig) -> Option<(Vec<f64>, Vec<f64>)> {
        let m = self.first.get(id.0)?.as_ref()?;
        let v = self.second.get(id.0)?.as_ref()?;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        Some((m.iter().map(|x| x / c1).collect(), v.iter().map(|x| x / c2).collect()))
    }
}

/// One optimizer update. Parameters without a gradient are left alone.
/// Decay multiplies weights by `1 - lr·decay` before the Adam step and skips
/// biases and norm gains.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape(format!("gradient for {} has shape {:?}", params.entry(id).name, g.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.entry(id).name)));
            }
        }
    }
    state.first.resize(params.len(), None);
    state.second.resize(params.len(), None);
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for id in params.ids() {
        let Some(g) = grads.get(id) else { continue };
        let decay = params.entry(id).kind.decays() && cfg.weight_decay > 0.0;
        let n = g.len();
        let m = state.first[id.0].get_or_insert_with(|| vec![0.0; n]);
        let v = state.second[id.0].get_or_insert_with(|| vec![0.0; n]);
        let p = params.get_mut(id).data_mut();
        for i in 0..n {
            let gi = g.data()[i];
            if decay {
                p[i] *= 1.0 - cfg.learning_rate * cfg.weight_decay;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::params::{NamedTensor, ParamKind};
    use crate::tensor::Tensor;

    fn scalar_store(value: f64, kind: ParamKind) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(NamedTensor { name: "p".into(), kind, tensor: Tensor::vector(vec![value]) }).unwrap();
        s
    }

    /// Gradients of `c · p` for the single parameter.
    fn grads_of_linear(store: &ParamStore, c: f64) -> Gradients {
        let mut g = Graph::new(store);
        let p = g.param(ParamId(0));
        let y = g.scale(p, c);
        g.backward(y).unwrap()
    }

    fn cfg(lr: f64, decay: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, weight_decay: decay, ..TrainConfig::default() }
    }

    #[test]
    fn one_step_hand_computation() {
        let mut store = scalar_store(1.0, ParamKind::Weight);
        let grads = grads_of_linear(&store, 1.0);
        let mut state = AdamState::new();
        adam_step(&mut store, &grads, &mut state, &cfg(0.1, 0.0)).unwrap();
        // m̂ = 1, v̂ = 1, so the update is lr / (1 + eps)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.get(ParamId(0)).data()[0] - want).abs() < 1e-15);
        assert!((store.get(ParamId(0)).data()[0] - 0.9).abs() < 1e-8);
        let (m, v) = state.corrected_moments(ParamId(0), &cfg(0.1, 0.0)).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15);
        assert!((v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_moment_equals_gradient_after_one_step() {
        let mut store = scalar_store(0.3, ParamKind::Weight);
        let grads = grads_of_linear(&store, -2.5);
        let mut state = AdamState::new();
        let c = cfg(1e-3, 0.01);
        adam_step(&mut store, &grads, &mut state, &c).unwrap();
        let (m, _) = state.corrected_moments(ParamId(0), &c).unwrap();
        assert!((m[0] + 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut store = scalar_store(0.7, ParamKind::Weight);
        let grads = grads_of_linear(&store, 0.0);
        let mut state = AdamState::new();
        for _ in 0..3 {
            adam_step(&mut store, &grads, &mut state, &cfg(0.1, 0.0)).unwrap();
        }
        assert_eq!(store.get(ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn decay_applies_to_weights_only() {
        for (kind, want) in
            [(ParamKind::Weight, 0.7 * (1.0 - 0.1 * 0.5)), (ParamKind::Bias, 0.7), (ParamKind::Gain, 0.7)]
        {
            let mut store = scalar_store(0.7, kind);
            let grads = grads_of_linear(&store, 0.0);
            adam_step(&mut store, &grads, &mut AdamState::new(), &cfg(0.1, 0.5)).unwrap();
            assert_eq!(store.get(ParamId(0)).data()[0], want, "{kind:?}");
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = scalar_store(1.0, ParamKind::Weight);
        let grads = grads_of_linear(&store, f64::NAN);
        let err = adam_step(&mut store, &grads, &mut AdamState::new(), &cfg(0.1, 0.0)).unwrap_err();
        assert!(err.to_string().contains("gradient of p"), "{err}");
        assert_eq!(store.get(ParamId(0)).data()[0], 1.0);
    }
}
