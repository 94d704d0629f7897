use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::param::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer over a [`ParamSet`]'s grad slots. The L2 term
/// `weight_decay · value` is added to each gradient before the update.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    step: u64,
    /// Per-parameter Adam step counts and moment estimates.
    t: Vec<i32>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            weight_decay,
            step: 0,
            t: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        let all = alloc::vec![true; params.len()];
        self.step_active(params, &all);
    }

    /// Updates only the parameters flagged in `active`, leaving the rest
    /// (and their optimizer state) untouched.
    pub fn step_active(&mut self, params: &mut ParamSet, active: &[bool]) {
        self.step += 1;
        let (lr, wd) = (self.learning_rate, self.weight_decay);
        if self.m.len() != params.len() {
            self.t = alloc::vec![0; params.len()];
            self.m = params
                .iter()
                .map(|p| alloc::vec![0.0; p.value.len()])
                .collect();
            self.v = self.m.clone();
        }
        for (k, p) in params.iter_mut().enumerate() {
            if !active.get(k).copied().unwrap_or(false) {
                continue;
            }
            let grads = p.grad.data();
            let values = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in values.iter_mut().zip(grads) {
                        *w -= lr * (g + wd * *w);
                    }
                }
                OptimizerKind::Adam => {
                    self.t[k] += 1;
                    let c1 = 1.0 - ADAM_BETA1.powi(self.t[k]);
                    let c2 = 1.0 - ADAM_BETA2.powi(self.t[k]);
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (w, g)) in values.iter_mut().zip(grads).enumerate() {
                        let g = g + wd * *w;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
