//! AdamW with decoupled weight decay and a linear-warmup + cosine-decay
//! learning-rate schedule.

use crate::graph::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    /// Peak learning rate, reached at the end of warmup.
    pub base_lr: f64,
    /// Steps of linear ramp from 0.
    pub warmup_steps: usize,
    /// Step at which the cosine decay reaches zero.
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl OptimizerState {
    pub fn new(shapes: &[Vec<usize>], schedule: LrSchedule, weight_decay: f64) -> Self {
        Self {
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step_count: 0,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }

    /// Current learning rate (the one the next `step` call will use).
    pub fn current_lr(&self) -> f64 {
        self.schedule.at(self.step_count)
    }

    /// One decoupled-weight-decay update. Returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> f64 {
        assert_eq!(params.len(), self.first_moment.len(), "param count mismatch");
        assert_eq!(params.len(), grads.len(), "grad count mismatch");
        let lr = self.schedule.at(self.step_count);
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            debug_assert_eq!(p.shape(), g.shape());
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_starts_at_zero_and_peaks_at_warmup_end() {
        let s = LrSchedule {
            base_lr: 0.01,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert_eq!(s.at(0), 0.0);
        assert!((s.at(5) - 0.005).abs() < 1e-15);
        assert!((s.at(10) - 0.01).abs() < 1e-15);
        assert!(s.at(55) < 0.01);
        assert!(s.at(100) == 0.0);
    }

    #[test]
    fn zero_grads_zero_decay_leave_params_unchanged() {
        let shapes = vec![vec![2, 2]];
        let s = LrSchedule {
            base_lr: 0.01,
            warmup_steps: 0,
            total_steps: 10,
        };
        let mut opt = OptimizerState::new(&shapes, s, 0.0);
        let mut params = vec![Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 4.0])];
        let grads = vec![Tensor::zeros(&[2, 2])];
        let before = params[0].clone();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        opt.step(&mut refs, &grads);
        assert_eq!(params[0], before);
    }

    #[test]
    fn descends_a_quadratic() {
        let shapes = vec![vec![1]];
        let s = LrSchedule {
            base_lr: 0.05,
            warmup_steps: 5,
            total_steps: 400,
        };
        let mut opt = OptimizerState::new(&shapes, s, 0.0);
        let mut params = vec![Tensor::from_vec(&[1], vec![3.0])];
        for _ in 0..400 {
            let x = params[0].data()[0];
            let grads = vec![Tensor::from_vec(&[1], vec![2.0 * x])];
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            opt.step(&mut refs, &grads);
        }
        assert!(params[0].data()[0].abs() < 0.05);
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient() {
        let shapes = vec![vec![1]];
        let s = LrSchedule {
            base_lr: 0.1,
            warmup_steps: 0,
            total_steps: 1000,
        };
        let mut opt = OptimizerState::new(&shapes, s, 0.5);
        let mut params = vec![Tensor::from_vec(&[1], vec![2.0])];
        let grads = vec![Tensor::zeros(&[1])];
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        opt.step(&mut refs, &grads);
        assert!((params[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
