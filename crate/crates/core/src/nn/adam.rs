use serde::{Deserialize, Serialize};

use super::NetParams;

/// Piecewise-constant learning rate: `base * factor^k` after the k-th milestone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<u64>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base: lr,
            milestones: vec![],
            factor: 1.0,
        }
    }

    /// Decay by `factor` at the given fractions of `total` steps.
    pub fn step_decay(lr: f64, total: u64, fractions: &[f64], factor: f64) -> Self {
        Self {
            base: lr,
            milestones: fractions.iter().map(|f| (f * total as f64).round() as u64).collect(),
            factor,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        let passed = self.milestones.iter().filter(|m| step >= **m).count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Single-owner; one instance per network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    pub step: u64,
    m: NetParams,
    v: NetParams,
}

impl Adam {
    pub fn new(params: &NetParams, schedule: LrSchedule, config: AdamConfig) -> Self {
        Self {
            config,
            schedule,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.at(self.step)
    }

    pub fn step(&mut self, params: &mut NetParams, grads: &NetParams) {
        let lr = self.lr() as f32;
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32) as f32;
        let bc2 = 1.0 - c.beta2.powi(self.step as i32) as f32;
        let eps = c.eps as f32;
        let wd = (c.weight_decay as f32) * lr;
        let m_t = self.m.tensors_mut();
        let v_t = self.v.tensors_mut();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(m_t).zip(v_t) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps) + wd * p[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Architecture};
    use crate::rng::Rng;
    use ndarray::{Array1, Array2};

    fn scalar_params(x: f32) -> NetParams {
        NetParams {
            weights: vec![Array2::from_elem((1, 1), x)],
            biases: vec![Array1::zeros(1)],
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let arch = Architecture::mlp(3, &[4], 2, Activation::Tanh, Activation::Identity);
        let mut p = NetParams::init(&arch, &mut Rng::new(1));
        let before = p.clone();
        let mut opt = Adam::new(&p, LrSchedule::constant(1e-2), AdamConfig::default());
        let g = p.zeros_like();
        opt.step(&mut p, &g);
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn constant_grad_moves_monotonically() {
        let mut p = scalar_params(0.0);
        let mut g = p.zeros_like();
        g.weights[0][[0, 0]] = 0.7;
        let mut opt = Adam::new(&p, LrSchedule::constant(1e-2), AdamConfig::default());
        let mut last = 0.0;
        for _ in 0..100 {
            opt.step(&mut p, &g);
            let x = p.weights[0][[0, 0]];
            assert!(x < last);
            last = x;
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = (x - 3)^2 / 2 starting from 0.
        let target = 3.0f32;
        let mut p = scalar_params(0.0);
        let mut opt = Adam::new(&p, LrSchedule::constant(1e-2), AdamConfig::default());
        let mut reached = None;
        for i in 0..2000 {
            let mut g = p.zeros_like();
            g.weights[0][[0, 0]] = p.weights[0][[0, 0]] - target;
            opt.step(&mut p, &g);
            if reached.is_none() && (p.weights[0][[0, 0]] - target).abs() < 1e-3 {
                reached = Some(i);
            }
        }
        assert!(reached.is_some(), "final {}", p.weights[0][[0, 0]]);
        assert!((p.weights[0][[0, 0]] - target).abs() < 1e-3);
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule::step_decay(1e-3, 100, &[0.6, 0.8], 0.5);
        assert_eq!(s.at(0), 1e-3);
        assert_eq!(s.at(59), 1e-3);
        assert_eq!(s.at(60), 5e-4);
        assert_eq!(s.at(80), 2.5e-4);
    }
}
