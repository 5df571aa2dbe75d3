use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "lr",
                format!("must be positive, got {}", self.lr),
            ));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(
                    format!("betas[{i}]"),
                    format!("must lie in [0, 1), got {b}"),
                ));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                "must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One update. Returns `false`, leaving everything untouched, when any
/// gradient entry is non-finite.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} parameter arrays, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "array {i}: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
    }
    if !grads.iter().all(Tensor::is_finite) {
        log::warn!(
            "skipping update at step {}: non-finite gradient",
            state.step + 1
        );
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w = *w * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_cases() {
        let mut p = vec![Tensor::vector(vec![1.5, -2.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut s, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.0]);
        adamw_step(&mut p, &g, &mut s, &cfg(0.1, 0.2)).unwrap();
        assert_eq!(p[0].data(), &[1.5 * (1.0 - 0.02), -2.0 * (1.0 - 0.02)]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² at t = 1, so the step is lr·g/(|g| + eps).
        let mut p = vec![Tensor::scalar(0.7)];
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &[Tensor::scalar(2.5)], &mut s, &cfg(1e-2, 0.0)).unwrap();
        let expected = 0.7 - 1e-2 * 2.5 / (2.5 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = vec![Tensor::scalar(0.7)];
        let mut s = AdamState::new(&p);
        let applied =
            adamw_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, &cfg(1e-2, 0.1)).unwrap();
        assert!(!applied);
        assert_eq!(p[0].item(), 0.7);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = AdamWConfig::default();
        c.betas = [0.9, 1.0];
        assert!(
            matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "betas[1]")
        );
    }
}
