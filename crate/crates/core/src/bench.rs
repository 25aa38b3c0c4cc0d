//! Wall-clock latency of a forward pass.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::network::MobileIeNet;
use crate::real::Real;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    pub min_ms: f64,
    pub iters: usize,
}

#[derive(Default)]
struct Acc {
    total: f64,
    min: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, ms: f64) {
        self.min = if self.n == 0 { ms } else { self.min.min(ms) };
        self.total += ms;
        self.n += 1;
    }

    fn timing(&self) -> Timing {
        Timing {
            mean_ms: self.total / self.n as f64,
            min_ms: self.min,
            iters: self.n,
        }
    }
}

fn timed<T: Real>(net: &MobileIeNet<T>, x: &Tensor4<T>) -> Result<f64> {
    let t0 = Instant::now();
    std::hint::black_box(net.infer(x)?);
    Ok(t0.elapsed().as_secs_f64() * 1e3)
}

fn need_iters(iters: usize) -> Result<()> {
    if iters == 0 {
        return Err(Error::Argument("need at least one timed iteration".into()));
    }
    Ok(())
}

/// Runs `warmup` untimed passes, then times `iters` passes of `net.infer(x)`.
pub fn time_inference<T: Real>(net: &MobileIeNet<T>, x: &Tensor4<T>, warmup: usize, iters: usize) -> Result<Timing> {
    need_iters(iters)?;
    for _ in 0..warmup {
        std::hint::black_box(net.infer(x)?);
    }
    let mut acc = Acc::default();
    for _ in 0..iters {
        acc.push(timed(net, x)?);
    }
    Ok(acc.timing())
}

/// Times two networks on the same input with their passes interleaved, so
/// load changes on the host hit both alike.
pub fn compare_inference<T: Real>(
    a: &MobileIeNet<T>,
    b: &MobileIeNet<T>,
    x: &Tensor4<T>,
    warmup: usize,
    iters: usize,
) -> Result<(Timing, Timing)> {
    need_iters(iters)?;
    for _ in 0..warmup {
        std::hint::black_box(a.infer(x)?);
        std::hint::black_box(b.infer(x)?);
    }
    let (mut ta, mut tb) = (Acc::default(), Acc::default());
    for i in 0..iters {
        // Alternate which goes first to cancel cache and clock-ramp effects.
        if i % 2 == 0 {
            ta.push(timed(a, x)?);
            tb.push(timed(b, x)?);
        } else {
            tb.push(timed(b, x)?);
            ta.push(timed(a, x)?);
        }
    }
    Ok((ta.timing(), tb.timing()))
}
