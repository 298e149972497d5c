use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter. Pinned rows
/// and frozen parameters are left untouched, moments included.
///
/// Fails before changing anything if any trainable gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for p in store.iter().filter(|p| p.trainable) {
        if !p.gradient.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let cols = if p.value.ndim() == 2 { p.value.cols() } else { p.value.len().max(1) };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.gradient.data();
        let value = p.value.data_mut();
        for k in 0..value.len() {
            if !p.pinned_rows.is_empty() && p.pinned_rows.contains(&(k / cols)) {
                continue;
            }
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            value[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let factor = max_norm / norm;
        for p in store.iter_mut() {
            p.gradient.scale_assign(factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameter;
    use proptest::prelude::*;

    fn single(value: f64, grad: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let mut p = Parameter::new("w", Tensor::vector(vec![value]), trainable);
        p.gradient = Tensor::vector(vec![grad]);
        s.add(p).unwrap();
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = single(0.0, 1.0, true);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((s.iter().next().unwrap().value.item() - expected).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = single(0.7, 0.0, true);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 0.7);
    }

    #[test]
    fn frozen_and_pinned_untouched() {
        let mut s = single(0.3, 5.0, false);
        let mut table = Parameter::new("t", Tensor::full(&[3, 2], 1.0), true).with_pinned_rows(vec![0]);
        table.gradient = Tensor::full(&[3, 2], 1.0);
        s.add(table).unwrap();
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap();
        let ps: Vec<_> = s.iter().collect();
        assert_eq!(ps[0].value.item().to_bits(), 0.3f64.to_bits());
        assert_eq!(ps[1].value.row(0), &[1.0, 1.0]);
        assert!(ps[1].value.row(1).iter().all(|&x| x < 1.0));
        assert_eq!(st.m[1].row(0), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = single(0.0, f64::NAN, true);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert!(err.is_numeric());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_halves_and_keeps() {
        let mut s = single(0.0, 2.0, true);
        assert_eq!(clip_gradients(&mut s, 1.0), 2.0);
        assert_eq!(s.iter().next().unwrap().gradient.item(), 1.0);
        let mut s = single(0.0, 0.5, true);
        clip_gradients(&mut s, 1.0);
        assert_eq!(s.iter().next().unwrap().gradient.item(), 0.5);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(gs in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut s = ParamStore::new();
            for (i, g) in gs.iter().enumerate() {
                let mut p = Parameter::new(format!("p{i}"), Tensor::vector(vec![0.0]), true);
                p.gradient = Tensor::vector(vec![*g]);
                s.add(p).unwrap();
            }
            let oracle = gs.iter().map(|g| g * g).sum::<f64>().sqrt();
            let pre = clip_gradients(&mut s, 1.0);
            prop_assert!((pre - oracle).abs() < 1e-12);
            let post = s.iter().map(|p| p.gradient.item().powi(2)).sum::<f64>().sqrt();
            prop_assert!((post - oracle.min(1.0)).abs() < 1e-12);
        }
    }
}
