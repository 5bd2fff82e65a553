use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Bias-corrected ADAM moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }
}

/// One ADAM update in place. Gradients are checked before anything is
/// modified, so a rejected step leaves parameters and moments untouched.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, state for {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Shape of the decay between the two endpoint learning rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Geometric,
    Linear,
    /// Half cosine from `start` down to `end`.
    Cosine,
}

/// Learning rate decaying from `start` (first epoch) to `end` (last epoch).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
    #[serde(default)]
    pub decay: Decay,
}

impl LrSchedule {
    pub fn new(start: f64, end: f64, epochs: usize) -> Result<Self> {
        Self::with_decay(start, end, epochs, Decay::Geometric)
    }

    pub fn with_decay(start: f64, end: f64, epochs: usize, decay: Decay) -> Result<Self> {
        let s = LrSchedule { start, end, epochs, decay };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.start.is_finite() && self.end > 0.0 && self.end.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rates must be positive and finite, got {} -> {}",
                self.start, self.end
            )));
        }
        if self.end > self.start {
            return Err(Error::invalid(format!(
                "learning rate must not increase ({} -> {})",
                self.start, self.end
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("schedule needs at least one epoch"));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs == 1 {
            return self.start;
        }
        let frac = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        match self.decay {
            Decay::Geometric => self.start * (self.end / self.start).powf(frac),
            Decay::Linear => self.start + (self.end - self.start) * frac,
            Decay::Cosine => self.end + 0.5 * (self.start - self.end) * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::full(&[1], 0.5)];
        let mut s = AdamState::new(&p);
        adam_step(&mut s, &mut p, &[Tensor::full(&[1], 1.0)], 0.001).unwrap();
        // m_hat = v_hat = 1 -> step = lr / (1 + eps)
        let expected = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = vec![Tensor::full(&[2], 1.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut s, &mut p, &[Tensor::full(&[2], 2.0)], 0.01).unwrap();
        let before = p.clone();
        let (m0, v0) = (s.first_moment(0).data()[0], s.second_moment(0).data()[0]);
        // from a fresh state a zero gradient is an exact no-op
        let mut q = p.clone();
        let mut zs = AdamState::new(&q);
        adam_step(&mut zs, &mut q, &[Tensor::zeros(&[2])], 0.01).unwrap();
        assert_eq!(q, before);
        adam_step(&mut s, &mut p, &[Tensor::zeros(&[2])], 0.01).unwrap();
        assert!((s.first_moment(0).data()[0] - 0.9 * m0).abs() < 1e-15);
        assert!((s.second_moment(0).data()[0] - 0.999 * v0).abs() < 1e-15);
        assert_eq!(s.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        let mut s = AdamState::new(&p);
        let g = vec![Tensor::zeros(&[1]), Tensor::full(&[1], f64::NAN)];
        let err = adam_step(&mut s, &mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("parameter 1"));
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-2, 1e-5, 100).unwrap();
        assert!((s.lr(0) - 1e-2).abs() < 1e-18);
        assert!((s.lr(99) - 1e-5).abs() < 1e-18);
        assert!(s.lr(50) < s.lr(49));
        assert!(LrSchedule::new(1e-5, 1e-2, 100).is_err());
        assert!(LrSchedule::new(0.0, 0.0, 100).is_err());
        assert!(LrSchedule::new(1e-2, 1e-5, 0).is_err());
        for decay in [Decay::Linear, Decay::Cosine] {
            let s = LrSchedule::with_decay(1e-2, 1e-5, 100, decay).unwrap();
            assert!((s.lr(0) - 1e-2).abs() < 1e-15);
            assert!((s.lr(99) - 1e-5).abs() < 1e-15);
            assert!((1..100).all(|e| s.lr(e) < s.lr(e - 1)));
        }
    }
}
