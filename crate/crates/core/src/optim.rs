//! Adam and the warm-up + cosine-restart learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, Role, Visit};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    /// Learning rate during warm-up and the floor of every cosine cycle.
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub restart_period: usize,
    pub peak_decay: f64,
    pub total_epochs: usize,
    /// Epochs at which every block's integration weight is frozen.
    pub iwo_freeze_epochs: Vec<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-3,
            lr_min: 1e-6,
            warmup_epochs: 10,
            restart_period: 50,
            peak_decay: 0.97,
            total_epochs: 2000,
            iwo_freeze_epochs: vec![1000],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.warmup_epochs < self.restart_period && self.restart_period < self.total_epochs) {
            return bad(format!(
                "need warmup_epochs < restart_period < total_epochs, got {} / {} / {}",
                self.warmup_epochs, self.restart_period, self.total_epochs
            ));
        }
        if !(self.peak_decay > 0.0 && self.peak_decay <= 1.0) {
            return bad(format!("peak_decay must lie in (0, 1], got {}", self.peak_decay));
        }
        if !(self.lr_peak > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_peak) {
            return bad(format!("need 0 < lr_min <= lr_peak, got {} / {}", self.lr_min, self.lr_peak));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Argument(format!("epoch {epoch} outside 0..{}", cfg.total_epochs)));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.lr_min);
    }
    let e = epoch - cfg.warmup_epochs;
    let cycle = e / cfg.restart_period;
    let t = (e % cfg.restart_period) as f64 / cfg.restart_period as f64;
    let peak = cfg.lr_peak * cfg.peak_decay.powi(cycle as i32);
    Ok(cfg.lr_min + (peak - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u32,
}

/// Adam over the trainable tensors of a model, indexed in visiting order.
/// Step counts are kept per tensor so a single tensor can be restarted.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn step<T: Real, V: Visit<T> + ?Sized>(&mut self, model: &mut V, grads: &Grads<T>, lr: f64) -> Result<()> {
        if self.state.len() < grads.len() {
            self.state.resize_with(grads.len(), Moments::default);
        }
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        let mut err = None;
        let state = &mut self.state;
        model.visit("", &mut |name, _, data, role| {
            if role != Role::Trainable || err.is_some() {
                return;
            }
            let Some(g) = grads.get(idx) else {
                err = Some(format!("no gradient for {name}"));
                return;
            };
            if g.len() != data.len() {
                err = Some(format!("gradient for {name} has {} values, tensor {}", g.len(), data.len()));
                return;
            }
            let st = &mut state[idx];
            if st.m.len() != data.len() {
                st.m = vec![0.0; data.len()];
                st.v = vec![0.0; data.len()];
                st.steps = 0;
            }
            st.steps += 1;
            let c1 = 1.0 - b1.powi(st.steps as i32);
            let c2 = 1.0 - b2.powi(st.steps as i32);
            for (((p, gv), m), v) in data.iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                let gv = gv.wide();
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = T::of(p.wide() - update);
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(Error::Argument(e));
        }
        if idx != grads.len() {
            return Err(Error::Argument(format!("{} gradients for {idx} trainable tensors", grads.len())));
        }
        Ok(())
    }

    /// Forget moments (and step count) of the given trainable tensors.
    pub fn reset(&mut self, indices: &[usize]) {
        for &i in indices {
            if let Some(st) = self.state.get_mut(i) {
                *st = Moments::default();
            }
        }
    }
}
