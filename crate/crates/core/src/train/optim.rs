//! NAdam with the momentum-decay schedule of Dozat (2016), step-decay
//! learning rate.

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum_decay: f64,
}

impl Default for NAdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum_decay: 0.004,
        }
    }
}

impl NAdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.momentum_decay >= 0.0) {
            return Err(Error::config("eps must be > 0 and momentum_decay >= 0"));
        }
        Ok(())
    }

    fn mu(&self, t: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.momentum_decay))
    }
}

/// `lr0 * gamma^floor(epoch / step_size)`
pub fn step_lr(lr0: f64, gamma: f64, step_size: usize, epoch: usize) -> f64 {
    lr0 * gamma.powi((epoch / step_size) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NAdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Steps taken so far.
    pub step: u64,
    /// Running product of the momentum coefficients.
    pub mu_product: f64,
}

impl NAdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
            mu_product: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

/// One NAdam update of `params` in place.
///
/// A gradient that is zero everywhere decays the moments and advances the
/// step counter but leaves the parameters untouched.
pub fn nadam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut NAdamState,
    lr: f64,
    cfg: &NAdamConfig,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(format!(
            "nadam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape(format!(
                "nadam_step: tensor {i} has param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if !(lr > 0.0) {
        return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        log::warn!("non-finite gradient in tensor {i}; optimizer step {} skipped", state.step + 1);
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let all_zero = grads.iter().all(|g| g.data().iter().all(|&x| x == 0.0));

    let t = state.step + 1;
    let mu = cfg.mu(t);
    let mu_next = cfg.mu(t + 1);
    let mu_product = state.mu_product * mu;
    let bias_correction2 = 1.0 - cfg.beta2.powi(t as i32);
    let grad_coef = lr * (1.0 - mu) / (1.0 - mu_product);
    let mom_coef = lr * mu_next / (1.0 - mu_product * mu_next);

    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (m, v) = (m.data_mut(), v.data_mut());
        let p = p.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            if all_zero {
                continue;
            }
            let denom = (v[j] / bias_correction2).sqrt() + cfg.eps;
            p[j] -= grad_coef * gj / denom;
            p[j] -= mom_coef * m[j] / denom;
        }
    }
    state.step = t;
    state.mu_product = mu_product;
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_run(steps: usize, lr: f64) -> Vec<f64> {
        let mut w = vec![Tensor::scalar(1.0)];
        let mut state = NAdamState::new(&w);
        let mut out = Vec::new();
        for _ in 0..steps {
            let g = vec![w[0].clone()];
            nadam_step(&mut w, &g, &mut state, lr, &NAdamConfig::default()).unwrap();
            out.push(w[0].item());
        }
        out
    }

    #[test]
    fn single_step_matches_golden_value() {
        // Hand evaluation, t = 1, g = 1:
        //   mu1 = 0.9 (1 - 0.5 * 0.96^0.004), mu2 = 0.9 (1 - 0.5 * 0.96^0.008)
        //   m = 0.1, v = 0.001, denom = sqrt(0.001 / 0.001) + 1e-8
        //   w1 = 1 - 0.1 (1 - mu1) / (1 - mu1) / denom
        //          - 0.1 mu2 / (1 - mu1 mu2) * 0.1 / denom
        let mu1 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.004));
        let mu2 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.008));
        let denom = 1.0 + 1e-8;
        let hand = 1.0 - 0.1 / denom - 0.1 * mu2 / (1.0 - mu1 * mu2) * 0.1 / denom;
        let w = quadratic_run(1, 0.1);
        assert!((w[0] - hand).abs() < 1e-12, "{} vs {hand}", w[0]);
        // Reference value from an independent NAdam implementation run in
        // double precision throughout.
        assert!((w[0] - 0.894354823220913).abs() < 1e-12, "{}", w[0]);
    }

    #[test]
    fn second_step_matches_reference() {
        let w = quadratic_run(2, 0.1);
        assert!((w[1] - 0.8199730715315754).abs() < 1e-12, "{}", w[1]);
    }

    #[test]
    fn converges_on_quadratic() {
        let w = quadratic_run(200, 0.1);
        assert!(w[199].abs() < 1e-2, "{}", w[199]);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut w = vec![Tensor::new(&[2], vec![0.5, -0.25]).unwrap()];
        let mut state = NAdamState::new(&w);
        let cfg = NAdamConfig::default();
        nadam_step(&mut w, &[Tensor::new(&[2], vec![1.0, -2.0]).unwrap()], &mut state, 0.01, &cfg).unwrap();
        let before = w.clone();
        let m_before = state.m[0].clone();
        nadam_step(&mut w, &[Tensor::zeros(&[2])], &mut state, 0.01, &cfg).unwrap();
        assert_eq!(w, before);
        assert_eq!(state.step, 2);
        for (a, b) in state.m[0].data().iter().zip(m_before.data()) {
            assert_eq!(*a, 0.9 * b);
        }
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut w = vec![Tensor::scalar(1.0)];
        let mut state = NAdamState::new(&w);
        let bad = Tensor::scalar(0.0).map(|_| f64::NAN);
        let out = nadam_step(&mut w, &[bad], &mut state, 0.1, &NAdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(w[0].item(), 1.0);
        assert_eq!(state, NAdamState::new(&w));
    }

    #[test]
    fn step_lr_examples() {
        assert_eq!(step_lr(1e-4, 0.5, 10, 0), 1e-4);
        assert_eq!(step_lr(1e-4, 0.5, 10, 9), 1e-4);
        assert_eq!(step_lr(1e-4, 0.5, 10, 10), 5e-5);
        assert_eq!(step_lr(1e-4, 0.5, 10, 25), 2.5e-5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = vec![Tensor::scalar(1.0)];
        let mut state = NAdamState::new(&w);
        let g = vec![Tensor::zeros(&[2])];
        assert!(nadam_step(&mut w, &g, &mut state, 0.1, &NAdamConfig::default()).is_err());
    }
}
