use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `decay` every `epoch_rounds` steps.
    Epoch { decay: f64, epoch_rounds: u64 },
    /// `lr * t0 / (t0 + t)`.
    Inverse { t0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters and optimizer state of one model replica.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub w: Vec<f64>,
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub adam: AdamParams,
    base_lr: f64,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptState {
    pub fn new(w: Vec<f64>, kind: OptimizerKind, lr: f64, schedule: LrSchedule) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {lr}"));
        }
        let n = w.len();
        Ok(Self {
            w,
            kind,
            schedule,
            adam: AdamParams::default(),
            base_lr: lr,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    fn check(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.w.len() {
            return Err(invalid!("gradient has {} elements, model {}", g.len(), self.w.len()));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Diverged(format!("non-finite gradient element {i} at step {}", self.t)));
        }
        Ok(())
    }

    /// `w <- w - lr g`.
    pub fn sgd_step(&mut self, g: &[f64]) -> Result<()> {
        self.check(g)?;
        let lr = self.lr;
        self.w.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
        self.advance();
        Ok(())
    }

    pub fn adam_step(&mut self, g: &[f64]) -> Result<()> {
        self.check(g)?;
        let AdamParams { beta1, beta2, eps } = self.adam;
        let t = (self.t + 1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((w, m), v), &g) in self.w.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(g) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        self.advance();
        Ok(())
    }

    pub fn step(&mut self, g: &[f64]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => self.sgd_step(g),
            OptimizerKind::Adam => self.adam_step(g),
        }
    }

    fn advance(&mut self) {
        self.t += 1;
        self.lr = match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Epoch { decay, epoch_rounds } => {
                if epoch_rounds > 0 && self.t % epoch_rounds == 0 {
                    self.lr * decay
                } else {
                    self.lr
                }
            }
            LrSchedule::Inverse { t0 } => self.base_lr * t0 / (t0 + self.t as f64),
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut s = OptState::new(vec![0.0, 0.0], OptimizerKind::Sgd, 0.01, LrSchedule::Constant).unwrap();
        s.sgd_step(&[1.0, 0.0]).unwrap();
        assert_eq!(s.w, vec![-0.01, 0.0]);
        s.sgd_step(&[0.0, 0.0]).unwrap();
        assert_eq!(s.w, vec![-0.01, 0.0]);
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        for c in [1e-3, 1.0, 1e4] {
            let mut s = OptState::new(vec![0.0; 2], OptimizerKind::Adam, 0.001, LrSchedule::Constant).unwrap();
            s.step(&[c, 0.0]).unwrap();
            assert_abs_diff_eq!(s.w[0], -0.001, epsilon = 1e-8);
            assert_eq!(s.w[1], 0.0);
        }
    }

    #[test]
    fn epoch_decay() {
        let sched = LrSchedule::Epoch {
            decay: 0.98,
            epoch_rounds: 3,
        };
        let mut s = OptState::new(vec![0.0], OptimizerKind::Sgd, 1.0, sched).unwrap();
        for _ in 0..3 {
            assert_eq!(s.lr(), 1.0);
            s.step(&[0.0]).unwrap();
        }
        assert_abs_diff_eq!(s.lr(), 0.98, epsilon = 1e-15);
        for _ in 0..3 {
            s.step(&[0.0]).unwrap();
        }
        assert_abs_diff_eq!(s.lr(), 0.98 * 0.98, epsilon = 1e-15);
    }

    #[test]
    fn inverse_schedule() {
        let mut s = OptState::new(vec![0.0], OptimizerKind::Sgd, 1.0, LrSchedule::Inverse { t0: 1.0 }).unwrap();
        s.step(&[0.0]).unwrap();
        assert_abs_diff_eq!(s.lr(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = OptState::new(vec![0.0], OptimizerKind::Sgd, 1.0, LrSchedule::Constant).unwrap();
        assert!(matches!(s.step(&[f64::NAN]), Err(Error::Diverged(_))));
        assert!(s.step(&[0.0, 1.0]).is_err());
        assert!(OptState::new(vec![0.0], OptimizerKind::Sgd, 0.0, LrSchedule::Constant).is_err());
    }
}
