use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

/// Epochs without a new best validation loss before the learning rate halves.
pub const LR_PATIENCE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

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

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            hyper: AdamHyper {
                lr,
                ..AdamHyper::default()
            },
        }
    }

    pub fn lr(&self) -> f64 {
        self.hyper.lr
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParamStore, grads: &[Array2<f64>], state: &mut AdamState) -> Result<()> {
    params.check_shapes(grads)?;
    params.check_shapes(&state.m)?;
    params.check_shapes(&state.v)?;
    if !(state.hyper.lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    state.step += 1;
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

/// Halves the learning rate once `epochs_since_best` reaches [`LR_PATIENCE`],
/// resetting the counter. Returns whether the rate changed.
pub fn lr_schedule(state: &mut AdamState, epochs_since_best: &mut usize) -> bool {
    if *epochs_since_best >= LR_PATIENCE {
        state.hyper.lr *= 0.5;
        *epochs_since_best = 0;
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut p = ParamStore::new(0);
        p.insert(
            "p",
            Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap(),
        );
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[0.3, -0.2]);
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[Array2::zeros((1, 2))], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(&[0.0]);
        let mut s = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[Array2::ones((1, 1))], &mut s).unwrap();
        // m̂ = v̂ = 1, so Δ = lr / (1 + eps)
        let delta = -p.get("p").unwrap()[[0, 0]];
        assert!((delta - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((delta - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn identical_runs_match_bitwise() {
        let run = || {
            let mut p = store(&[0.1, 0.2, 0.3]);
            let mut s = AdamState::new(&p, 1e-2);
            for k in 0..50 {
                let g = Array2::from_shape_fn((1, 3), |(_, j)| ((k * 3 + j) as f64).sin());
                adam_step(&mut p, &[g], &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = store(&[0.0, 1.0]);
        let mut s = AdamState::new(&p, 1e-3);
        assert!(adam_step(&mut p, &[Array2::zeros((2, 1))], &mut s).is_err());
    }

    #[test]
    fn schedule_halves_after_patience() {
        let p = store(&[0.0]);
        let mut s = AdamState::new(&p, 1e-3);
        let mut since = 2;
        assert!(!lr_schedule(&mut s, &mut since));
        assert_eq!(s.lr(), 1e-3);
        since = 3;
        assert!(lr_schedule(&mut s, &mut since));
        assert_eq!(s.lr(), 5e-4);
        assert_eq!(since, 0);
        since = 3;
        lr_schedule(&mut s, &mut since);
        assert_eq!(s.lr(), 2.5e-4);
    }
}
