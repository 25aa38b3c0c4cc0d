//! Local-variance-weighted L1 loss.
//!
//! Each pixel error `Δ = |o − l|` is weighted by `tanh(|Δ − μ| / (σ + ε))`,
//! with `μ`, `σ` taken over the H×W plane of its own (sample, channel).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LvwConfig {
    pub eps: f64,
    /// Treat the weight map as a constant in the backward pass.
    pub detach_weights: bool,
    /// Weight of an additional plain L1 term.
    pub l1_blend: f64,
}

impl Default for LvwConfig {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            detach_weights: true,
            l1_blend: 0.0,
        }
    }
}

impl LvwConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Argument(format!("loss eps must be > 0, got {}", self.eps)));
        }
        if !(self.l1_blend >= 0.0) {
            return Err(Error::Argument(format!("l1_blend must be >= 0, got {}", self.l1_blend)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub loss: f64,
    pub delta: Tensor4<f64>,
    /// Per (sample, channel), row-major over `n × c`.
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub weight: Tensor4<f64>,
}

fn check_pair<T: Real>(o: &Tensor4<T>, l: &Tensor4<T>) -> Result<()> {
    if o.shape() != l.shape() {
        return shape_err(format!("prediction {:?} vs target {:?}", o.shape(), l.shape()));
    }
    Ok(())
}

pub fn lvw_loss<T: Real>(o: &Tensor4<T>, l: &Tensor4<T>, cfg: &LvwConfig) -> Result<LossReport> {
    check_pair(o, l)?;
    let [n, c, _, _] = o.shape();
    let mut delta = Tensor4::<f64>::zeros(o.shape());
    for ((d, a), b) in delta.data_mut().iter_mut().zip(o.data()).zip(l.data()) {
        *d = (a.wide() - b.wide()).abs();
    }
    let mut weight = Tensor4::<f64>::zeros(o.shape());
    let mut mu = Vec::with_capacity(n * c);
    let mut sigma = Vec::with_capacity(n * c);
    let mut weighted = 0f64;
    let mut plain = 0f64;
    for s in 0..n {
        for ch in 0..c {
            let plane = delta.plane(s, ch);
            let m = plane.len() as f64;
            let first = plane[0];
            // Summation rounding would otherwise leave a tiny spread on constant planes.
            let mean = if plane.iter().all(|&d| d == first) {
                first
            } else {
                plane.iter().sum::<f64>() / m
            };
            let var = plane.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / m;
            let sd = var.sqrt();
            for (w, &d) in weight.plane_mut(s, ch).iter_mut().zip(plane) {
                *w = ((d - mean).abs() / (sd + cfg.eps)).tanh();
                weighted += *w * d;
                plain += d;
            }
            mu.push(mean);
            sigma.push(sd);
        }
    }
    let total = o.len() as f64;
    let mut loss = weighted / total;
    if cfg.l1_blend > 0.0 {
        loss += cfg.l1_blend * plain / total;
    }
    Ok(LossReport {
        loss,
        delta,
        mu,
        sigma,
        weight,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the loss with respect to the prediction `o`.
pub fn lvw_backward<T: Real>(report: &LossReport, o: &Tensor4<T>, l: &Tensor4<T>, cfg: &LvwConfig) -> Result<Tensor4<T>> {
    check_pair(o, l)?;
    if report.delta.shape() != o.shape() {
        return shape_err("loss report does not belong to this prediction".to_string());
    }
    let [n, c, _, _] = o.shape();
    let inv_n = 1.0 / o.len() as f64;
    let mut dd = Tensor4::<f64>::zeros(o.shape());
    for s in 0..n {
        for ch in 0..c {
            let w = report.weight.plane(s, ch);
            let out = dd.plane_mut(s, ch);
            if cfg.detach_weights {
                for (g, &wv) in out.iter_mut().zip(w) {
                    *g = wv;
                }
            } else {
                let delta = report.delta.plane(s, ch);
                let mean = report.mu[s * c + ch];
                let sd = report.sigma[s * c + ch];
                let denom = sd + cfg.eps;
                let m = delta.len() as f64;
                // A_p = Δ_p (1 − W_p²): sensitivity of W_p·Δ_p to its tanh argument.
                let mut mean_as = 0f64;
                let mut spread = 0f64;
                for (&d, &wv) in delta.iter().zip(w) {
                    let a = d * (1.0 - wv * wv);
                    mean_as += a * sign(d - mean);
                    spread += a * (d - mean).abs();
                }
                mean_as /= m;
                for ((g, &d), &wv) in out.iter_mut().zip(delta).zip(w) {
                    let a = d * (1.0 - wv * wv);
                    let mut v = wv + (a * sign(d - mean) - mean_as) / denom;
                    if sd > 0.0 {
                        v -= spread / (denom * denom) * (d - mean) / (m * sd);
                    }
                    *g = v;
                }
            }
        }
    }
    let mut grad = Tensor4::<T>::zeros(o.shape());
    for (((g, &d), a), b) in grad.data_mut().iter_mut().zip(dd.data()).zip(o.data()).zip(l.data()) {
        let sg = sign(a.wide() - b.wide());
        *g = T::of((d + cfg.l1_blend) * sg * inv_n);
    }
    Ok(grad)
}
