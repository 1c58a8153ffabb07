//! Learning-rate schedule, SGD with momentum and Adam.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, ParamKey};
use crate::config::TrainConfig;
use crate::model::{BankSet, MultiExitModel};

/// Linear warmup from `warmup_start_lr` to `base_lr`, then cosine decay to
/// `final_lr` reached exactly at the last step of the run.
pub fn lr_at(global_step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    let (base, fin, start) = (config.base_lr, config.final_lr, config.warmup_start_lr);
    if global_step < warmup {
        return start + (base - start) * global_step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return if global_step == warmup { base } else { fin };
    }
    let progress = ((global_step - warmup) as f64 / span as f64).min(1.0);
    fin + 0.5 * (base - fin) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with heavy-ball momentum: `v = mu*v + (g + wd*p)`, `p -= lr*v`.
///
/// Banks are not decayed and are renormalized after each update. Parameters
/// without a gradient keep both value and velocity.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<ParamKey, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Drops the velocity of every bank.
    pub fn reset_banks(&mut self) {
        self.velocity.retain(|k, _| !matches!(k, ParamKey::Bank(_)));
    }

    pub fn step(
        &mut self,
        model: &mut MultiExitModel,
        banks: &mut BankSet,
        grads: &Gradients,
        lr: f64,
    ) {
        for (key, g) in grads.iter() {
            match *key {
                ParamKey::Weight(i) => {
                    let p = model.param_mut(i).data_mut();
                    let v = self
                        .velocity
                        .entry(*key)
                        .or_insert_with(|| vec![0.0; p.len()]);
                    update(p, v, g.data(), self.momentum, self.weight_decay, lr);
                }
                ParamKey::Bank(h) => {
                    let bank = banks.get_mut(h);
                    if bank.frozen {
                        continue;
                    }
                    let p = bank.prototypes_mut().data_mut();
                    let v = self
                        .velocity
                        .entry(*key)
                        .or_insert_with(|| vec![0.0; p.len()]);
                    update(p, v, g.data(), self.momentum, 0.0, lr);
                    bank.renormalize();
                }
            }
        }
    }
}

fn update(p: &mut [f64], v: &mut [f64], g: &[f64], mu: f64, wd: f64, lr: f64) {
    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

/// Adam over a fixed list of flat parameter buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
