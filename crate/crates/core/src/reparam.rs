//! Multi-branch re-parameterizable convolution (MBRConv).
//!
//! Training form: parallel convolutions of sizes up to `K`, each followed by
//! a batch-norm path and a raw path. All paths are concatenated and merged by
//! a 1×1 convolution whose weight is `W_pre + W_learn` (`W_pre` frozen, absent
//! until the first incremental stage). Every step is affine in eval mode, so
//! the block collapses into a single `K × K` convolution.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::{join, Grads, Role, Visit, VisitFn};
use crate::real::Real;
use crate::tensor::{conv2d, conv2d_input_grad, conv2d_param_grad, pad_kernel_center, param_grad_wide, Bias, Kernel, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running stats updated, no output clamp.
    Train,
    /// Running statistics.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    /// Set once running statistics hold real values (a train step or a load).
    pub tracked: bool,
}

impl<T: Real> BnParams<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            tracked: false,
        }
    }

    /// Eval-mode identity: `γ = 1, β = 0, μ = 0, σ² = 1 − eps`.
    pub fn identity(c: usize) -> Self {
        let mut bn = Self::new(c);
        bn.running_var = vec![T::of(1.0 - bn.eps); c];
        bn.tracked = true;
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return shape_err("batch-norm vectors disagree in length");
        }
        Ok(())
    }
}

impl<T: Real> Visit<T> for BnParams<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        let c = self.gamma.len();
        f(&join(prefix, "gamma"), &[c], &mut self.gamma, Role::Trainable);
        f(&join(prefix, "beta"), &[c], &mut self.beta, Role::Trainable);
        f(&join(prefix, "running_mean"), &[c], &mut self.running_mean, Role::Buffer);
        f(&join(prefix, "running_var"), &[c], &mut self.running_var, Role::Buffer);
    }
}

/// Per-channel normalized activations and inverse std, kept for backward.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<f64>,
}

/// Biased per-channel mean and variance over `(n, h, w)`.
fn channel_moments<T: Real>(y: &Tensor4<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = y.shape();
    let count = (n * h * w) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ch in 0..c {
        let mut sum = 0f64;
        for s in 0..n {
            sum += y.plane(s, ch).iter().map(|v| v.wide()).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0f64;
        for s in 0..n {
            sq += y.plane(s, ch).iter().map(|v| (v.wide() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

impl<T: Real> BnParams<T> {
    /// Fold one batch into the running statistics (unbiased variance).
    fn record(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.momentum;
        let count = count as f64;
        for ch in 0..mean.len() {
            let unbiased = if count > 1.0 { var[ch] * count / (count - 1.0) } else { var[ch] };
            self.running_mean[ch] = T::of((1.0 - m) * self.running_mean[ch].wide() + m * mean[ch]);
            self.running_var[ch] = T::of((1.0 - m) * self.running_var[ch].wide() + m * unbiased);
        }
        self.tracked = true;
    }
}

/// Batch norm with batch statistics; updates running stats.
pub fn bn_forward_train<T: Real>(bn: &mut BnParams<T>, y: &Tensor4<T>) -> Result<(Tensor4<T>, BnCache<T>)> {
    bn.check()?;
    if y.c() != bn.channels() {
        return shape_err(format!("batch norm over {} channels got {}", bn.channels(), y.c()));
    }
    let [n, c, h, w] = y.shape();
    let (mean, var) = channel_moments(y);
    let mut out = Tensor4::zeros(y.shape());
    let mut xhat = Tensor4::zeros(y.shape());
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    for ch in 0..c {
        let (g, b) = (bn.gamma[ch].wide(), bn.beta[ch].wide());
        for s in 0..n {
            let src = y.plane(s, ch);
            for (d, v) in xhat.plane_mut(s, ch).iter_mut().zip(src) {
                *d = T::of((v.wide() - mean[ch]) * inv_std[ch]);
            }
            for (d, v) in out.plane_mut(s, ch).iter_mut().zip(src) {
                *d = T::of(g * (v.wide() - mean[ch]) * inv_std[ch] + b);
            }
        }
    }
    bn.record(&mean, &var, n * h * w);
    Ok((out, BnCache { xhat, inv_std }))
}

/// Batch norm with running statistics.
pub fn bn_forward_eval<T: Real>(bn: &BnParams<T>, y: &Tensor4<T>) -> Result<Tensor4<T>> {
    bn.check()?;
    if !bn.tracked {
        return Err(Error::State("batch norm running statistics are uninitialized".into()));
    }
    if y.c() != bn.channels() {
        return shape_err(format!("batch norm over {} channels got {}", bn.channels(), y.c()));
    }
    let mut out = y.clone();
    for ch in 0..y.c() {
        let istd = 1.0 / (bn.running_var[ch].wide() + bn.eps).sqrt();
        let scale = bn.gamma[ch].wide() * istd;
        let shift = bn.beta[ch].wide() - bn.running_mean[ch].wide() * scale;
        for s in 0..y.n() {
            for v in out.plane_mut(s, ch) {
                *v = T::of(v.wide() * scale + shift);
            }
        }
    }
    Ok(out)
}

/// Backward of [`bn_forward_train`]: returns `(dy, dγ, dβ)`.
pub fn bn_backward<T: Real>(bn: &BnParams<T>, cache: &BnCache<T>, g: &Tensor4<T>) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = g.shape();
    let count = (n * h * w) as f64;
    let mut dy = Tensor4::zeros(g.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = 0f64;
        let mut sum_gx = 0f64;
        for s in 0..n {
            for (gv, xv) in g.plane(s, ch).iter().zip(cache.xhat.plane(s, ch)) {
                sum_g += gv.wide();
                sum_gx += gv.wide() * xv.wide();
            }
        }
        dgamma[ch] = T::of(sum_gx);
        dbeta[ch] = T::of(sum_g);
        let k = bn.gamma[ch].wide() * cache.inv_std[ch];
        let (mg, mgx) = (sum_g / count, sum_gx / count);
        for s in 0..n {
            let gp = g.plane(s, ch);
            let xp = cache.xhat.plane(s, ch);
            for ((d, gv), xv) in dy.plane_mut(s, ch).iter_mut().zip(gp).zip(xp) {
                *d = T::of(k * (gv.wide() - mg - xv.wide() * mgx));
            }
        }
    }
    (dy, dgamma, dbeta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBranch<T = f32> {
    pub kernel: Kernel<T>,
    pub bias: Bias<T>,
    pub bn: BnParams<T>,
}

impl<T: Real> ConvBranch<T> {
    pub fn size(&self) -> usize {
        self.kernel.size()
    }
    pub fn c_mid(&self) -> usize {
        self.kernel.c_out()
    }
}

/// Branch kernel sizes for a block of nominal size `size`.
pub fn branch_menu(size: usize) -> Vec<usize> {
    (1..=size).step_by(2).collect()
}

/// The 1×1 weight actually applied: `W_pre + W_learn`, or `W_learn` alone.
pub fn iwo_compose<T: Real>(w_pre: Option<&Kernel<T>>, w_learn: &Kernel<T>) -> Result<Kernel<T>> {
    match w_pre {
        None => Ok(w_learn.clone()),
        Some(pre) => {
            if !pre.same_shape(w_learn) {
                return shape_err(format!("IWO weights differ in shape: {:?} vs {:?}", pre.dims(), w_learn.dims()));
            }
            let mut out = pre.clone();
            for (o, l) in out.data_mut().iter_mut().zip(w_learn.data()) {
                *o = *o + *l;
            }
            Ok(out)
        }
    }
}

/// Training-form multi-branch block.
#[derive(Clone, Debug, PartialEq)]
pub struct MbrConv<T = f32> {
    size: usize,
    c_in: usize,
    c_out: usize,
    pub branches: Vec<ConvBranch<T>>,
    pub w_pre: Option<Kernel<T>>,
    pub w_learn: Kernel<T>,
    pub bias: Bias<T>,
}

/// Activations kept from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct MbrCache<T> {
    x: Tensor4<T>,
    /// Raw branch outputs, concatenated (one channel per branch mid channel).
    y: Tensor4<T>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// Integration weight with the batch-statistics BN folded in:
    /// `c_out × Σ c_mid`.
    merged: Kernel<T>,
}

impl<T: Real> MbrConv<T> {
    /// Block with the default branch menu and one mid channel per output
    /// channel in every branch.
    pub fn new<R: Rng + ?Sized>(size: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::with_branches(size, c_in, c_out, &branch_menu(size), c_out, rng)
    }

    pub fn with_branches<R: Rng + ?Sized>(
        size: usize,
        c_in: usize,
        c_out: usize,
        sizes: &[usize],
        c_mid: usize,
        rng: &mut R,
    ) -> Self {
        assert!(size % 2 == 1, "nominal kernel size must be odd");
        assert!(sizes.iter().all(|&k| k % 2 == 1 && k <= size), "branch sizes must be odd and <= {size}");
        let branches: Vec<ConvBranch<T>> = sizes
            .iter()
            .map(|&k| {
                let kernel = Kernel::kaiming_uniform(c_mid, c_in, k, rng);
                let bound = (1.0 / (c_in * k * k) as f64).sqrt();
                let bias = (0..c_mid).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
                ConvBranch {
                    kernel,
                    bias,
                    bn: BnParams::new(c_mid),
                }
            })
            .collect();
        let c_concat = 2 * c_mid * sizes.len();
        let w_learn = Kernel::kaiming_uniform(c_out, c_concat, 1, rng);
        let bound = (1.0 / c_concat as f64).sqrt();
        let bias = (0..c_out).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        Self {
            size,
            c_in,
            c_out,
            branches,
            w_pre: None,
            w_learn,
            bias,
        }
    }

    /// Assemble a block from explicit parts, validating every shape.
    pub fn from_parts(
        size: usize,
        branches: Vec<ConvBranch<T>>,
        w_pre: Option<Kernel<T>>,
        w_learn: Kernel<T>,
        bias: Bias<T>,
    ) -> Result<Self> {
        let first = branches.first().ok_or_else(|| Error::Argument("MBRConv needs at least one branch".into()))?;
        let c_in = first.kernel.c_in();
        let mut c_mid_total = 0;
        for b in &branches {
            if b.kernel.c_in() != c_in {
                return shape_err("branches disagree on input channels");
            }
            if b.size() > size {
                return Err(Error::Argument(format!("branch size {} exceeds block size {size}", b.size())));
            }
            if b.bias.len() != b.c_mid() || b.bn.channels() != b.c_mid() {
                return shape_err("branch bias/bn length does not match its kernel");
            }
            b.bn.check()?;
            c_mid_total += b.c_mid();
        }
        if w_learn.size() != 1 || w_learn.c_in() != 2 * c_mid_total {
            return shape_err(format!(
                "integration weight must be 1x1 over {} concat channels, got {:?}",
                2 * c_mid_total,
                w_learn.dims()
            ));
        }
        if let Some(pre) = &w_pre {
            if !pre.same_shape(&w_learn) {
                return shape_err("w_pre and w_learn differ in shape");
            }
        }
        if bias.len() != w_learn.c_out() {
            return shape_err("output bias length mismatch");
        }
        Ok(Self {
            size,
            c_in,
            c_out: w_learn.c_out(),
            branches,
            w_pre,
            w_learn,
            bias,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn c_concat(&self) -> usize {
        2 * self.branches.iter().map(|b| b.c_mid()).sum::<usize>()
    }

    /// `W_final = W_pre + W_learn`.
    pub fn effective_weight(&self) -> Kernel<T> {
        iwo_compose(self.w_pre.as_ref(), &self.w_learn).expect("w_pre/w_learn shapes are validated on construction")
    }

    pub fn is_tracked(&self) -> bool {
        self.branches.iter().all(|b| b.bn.tracked)
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c() != self.c_in {
            return shape_err(format!("MBRConv expects {} input channels, got {}", self.c_in, x.c()));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        match mode {
            Mode::Train => Ok(self.forward_train(x)?.0),
            Mode::Eval => self.forward_eval(x),
        }
    }

    /// Training-mode forward. Each branch's batch norm is an affine map of
    /// its raw output with batch statistics, so it is folded into the 1×1
    /// integration weight instead of being materialized.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, MbrCache<T>)> {
        self.check_input(x)?;
        let count = x.n() * x.h() * x.w();
        let mut ys = Vec::with_capacity(self.branches.len());
        let mut mean = Vec::new();
        let mut inv_std = Vec::new();
        for br in &mut self.branches {
            br.bn.check()?;
            let y = conv2d(x, &br.kernel, &br.bias, br.kernel.size() / 2)?;
            let (m, v) = channel_moments(&y);
            br.bn.record(&m, &v, count);
            inv_std.extend(v.iter().map(|v| 1.0 / (v + br.bn.eps).sqrt()));
            mean.extend(m);
            ys.push(y);
        }
        let y = Tensor4::concat_channels(&ys.iter().collect::<Vec<_>>())?;
        let w_final = self.effective_weight();
        let cc = w_final.c_in();
        let total_mid = cc / 2;
        let mut merged = vec![0f64; self.c_out * total_mid];
        let mut bias: Vec<f64> = self.bias.iter().map(|b| b.wide()).collect();
        for o in 0..self.c_out {
            let row = &w_final.data()[o * cc..(o + 1) * cc];
            let (mut off, mut j) = (0, 0);
            for br in &self.branches {
                let m = br.c_mid();
                for c in 0..m {
                    let k = br.bn.gamma[c].wide() * inv_std[j];
                    let w_bn = row[off + c].wide();
                    merged[o * total_mid + j] = row[off + m + c].wide() + w_bn * k;
                    bias[o] += w_bn * (br.bn.beta[c].wide() - k * mean[j]);
                    j += 1;
                }
                off += 2 * m;
            }
        }
        let merged = Kernel::from_vec(self.c_out, total_mid, 1, merged.into_iter().map(T::of).collect())?;
        let bias: Vec<T> = bias.into_iter().map(T::of).collect();
        let out = conv2d(&y, &merged, &bias, 0)?;
        Ok((
            out,
            MbrCache {
                x: x.clone(),
                y,
                mean,
                inv_std,
                merged,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut parts = Vec::with_capacity(2 * self.branches.len());
        for br in &self.branches {
            let y = conv2d(x, &br.kernel, &br.bias, br.kernel.size() / 2)?;
            parts.push(bn_forward_eval(&br.bn, &y)?);
            parts.push(y);
        }
        let concat = Tensor4::concat_channels(&parts.iter().collect::<Vec<_>>())?;
        conv2d(&concat, &self.effective_weight(), &self.bias, 0)
    }

    /// Gradients in visiting order (per branch: kernel, bias, γ, β; then
    /// `w_learn`, output bias). The input gradient is skipped when
    /// `want_input` is false.
    pub fn backward(&self, cache: &MbrCache<T>, g: &Tensor4<T>, want_input: bool) -> Result<(Option<Tensor4<T>>, Grads<T>)> {
        let w_final = self.effective_weight();
        let cc = w_final.c_in();
        let total_mid = cc / 2;
        let count = (g.n() * g.h() * g.w()) as f64;
        // cross[o][j] = Σ_p g_o(p)·y_j(p); sg[o] = Σ_p g_o(p).
        let (cross, sg) = param_grad_wide(&cache.y, g, 1)?;
        let mut dw = vec![T::zero(); self.c_out * cc];
        let mut dgamma = vec![0f64; total_mid];
        let mut dbeta = vec![0f64; total_mid];
        for o in 0..self.c_out {
            let row = &w_final.data()[o * cc..(o + 1) * cc];
            let (mut off, mut j) = (0, 0);
            for br in &self.branches {
                let m = br.c_mid();
                for c in 0..m {
                    let gx = cache.inv_std[j] * (cross[o * total_mid + j] - cache.mean[j] * sg[o]);
                    let (gamma, beta) = (br.bn.gamma[c].wide(), br.bn.beta[c].wide());
                    dw[o * cc + off + c] = T::of(gamma * gx + beta * sg[o]);
                    dw[o * cc + off + m + c] = T::of(cross[o * total_mid + j]);
                    let w_bn = row[off + c].wide();
                    dgamma[j] += w_bn * gx;
                    dbeta[j] += w_bn * sg[o];
                    j += 1;
                }
                off += 2 * m;
            }
        }
        // Batch-norm chain: dy = Mᵀg − k·(dβ + x̂·dγ)/N with k = γ/σ.
        let mut dy = conv2d_input_grad(g, &cache.merged)?;
        let mut j = 0;
        for br in &self.branches {
            for c in 0..br.c_mid() {
                let k = br.bn.gamma[c].wide() * cache.inv_std[j];
                let shift = k * dbeta[j] / count;
                let slope = k * dgamma[j] / count * cache.inv_std[j];
                let mu = cache.mean[j];
                for s in 0..dy.n() {
                    let yp = cache.y.plane(s, j);
                    for (d, yv) in dy.plane_mut(s, j).iter_mut().zip(yp) {
                        *d = T::of(d.wide() - shift - slope * (yv.wide() - mu));
                    }
                }
                j += 1;
            }
        }
        let mut gx: Option<Tensor4<T>> = None;
        let mut grads = Vec::with_capacity(4 * self.branches.len() + 2);
        let mut off = 0;
        for br in &self.branches {
            let m = br.c_mid();
            let gy = dy.channel_range(off, off + m);
            let stats = off..off + m;
            let (gk, gbias) = conv2d_param_grad(&cache.x, &gy, br.size())?;
            if want_input {
                let part = conv2d_input_grad(&gy, &br.kernel)?;
                match gx.as_mut() {
                    None => gx = Some(part),
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                            *a = *a + *b;
                        }
                    }
                }
            }
            grads.push(gk.data().to_vec());
            grads.push(gbias);
            grads.push(dgamma[stats.clone()].iter().map(|&v| T::of(v)).collect());
            grads.push(dbeta[stats].iter().map(|&v| T::of(v)).collect());
            off += m;
        }
        grads.push(dw);
        grads.push(sg.into_iter().map(T::of).collect());
        Ok((gx, grads))
    }

    /// Freeze the current integration weight as the prior and restart the
    /// learnable increment at zero. The block function is unchanged.
    pub fn freeze(&mut self) {
        self.w_pre = Some(self.effective_weight());
        self.w_learn = Kernel::zeros(self.c_out, self.c_concat(), 1);
    }

    /// Collapse into one `K × K` convolution using running statistics.
    pub fn fuse(&self) -> Result<FusedConv<T>> {
        fuse_mbrconv(self)
    }
}

impl<T: Real> Visit<T> for MbrConv<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        for (i, br) in self.branches.iter_mut().enumerate() {
            let p = join(prefix, &format!("branch{i}"));
            let dims = br.kernel.dims();
            f(&join(&p, "weight"), &dims, br.kernel.data_mut(), Role::Trainable);
            f(&join(&p, "bias"), &[dims[0]], &mut br.bias, Role::Trainable);
            br.bn.visit(&join(&p, "bn"), f);
        }
        let dims = self.w_learn.dims();
        f(&join(prefix, "w_learn"), &dims, self.w_learn.data_mut(), Role::Trainable);
        f(&join(prefix, "bias"), &[self.c_out], &mut self.bias, Role::Trainable);
        if let Some(pre) = self.w_pre.as_mut() {
            f(&join(prefix, "w_pre"), &dims, pre.data_mut(), Role::Frozen);
        }
    }
}

/// Functional form of [`MbrConv::freeze`].
pub fn iwo_freeze<T: Real>(block: &MbrConv<T>) -> MbrConv<T> {
    let mut out = block.clone();
    out.freeze();
    out
}

/// Inference-form convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T = f32> {
    pub kernel: Kernel<T>,
    pub bias: Bias<T>,
}

impl<T: Real> FusedConv<T> {
    pub fn new(kernel: Kernel<T>, bias: Bias<T>) -> Result<Self> {
        if bias.len() != kernel.c_out() {
            return shape_err("fused bias length mismatch");
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, size: usize) -> Self {
        Self {
            kernel: Kernel::zeros(c_out, c_in, size),
            bias: vec![T::zero(); c_out],
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d(x, &self.kernel, &self.bias, self.kernel.size() / 2)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

impl<T: Real> Visit<T> for FusedConv<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        let dims = self.kernel.dims();
        f(&join(prefix, "weight"), &dims, self.kernel.data_mut(), Role::Trainable);
        f(&join(prefix, "bias"), &[dims[0]], &mut self.bias, Role::Trainable);
    }
}

/// Absorb an eval-mode batch norm into the preceding convolution.
pub fn fold_bn<T: Real>(kernel: &Kernel<T>, bias: &[T], bn: &BnParams<T>) -> Result<(Kernel<T>, Bias<T>)> {
    bn.check()?;
    if bn.channels() != kernel.c_out() || bias.len() != kernel.c_out() {
        return shape_err("fold_bn: batch norm / bias length differs from kernel c_out");
    }
    let per_out = kernel.c_in() * kernel.size() * kernel.size();
    let mut k = kernel.clone();
    let mut b = Vec::with_capacity(bias.len());
    for o in 0..kernel.c_out() {
        let denom = bn.running_var[o].wide() + bn.eps;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::Numeric(format!("non-positive variance + eps ({denom}) on channel {o}")));
        }
        let scale = bn.gamma[o].wide() / denom.sqrt();
        for v in &mut k.data_mut()[o * per_out..(o + 1) * per_out] {
            *v = T::of(v.wide() * scale);
        }
        b.push(T::of(scale * (bias[o].wide() - bn.running_mean[o].wide()) + bn.beta[o].wide()));
    }
    Ok((k, b))
}

/// Merge same-size branch convolutions followed by a 1×1 convolution over
/// their channel concatenation into one convolution.
pub fn merge_concat_1x1<T: Real>(branches: &[(Kernel<T>, Bias<T>)], w_out: &Kernel<T>, b_out: &[T]) -> Result<FusedConv<T>> {
    let (first, _) = branches.first().ok_or_else(|| Error::Argument("merge of zero branches".into()))?;
    let (size, c_in) = (first.size(), first.c_in());
    if branches.iter().any(|(k, b)| k.size() != size || k.c_in() != c_in || b.len() != k.c_out()) {
        return shape_err("merge: branches must share size and input channels");
    }
    let c_mid: usize = branches.iter().map(|(k, _)| k.c_out()).sum();
    if w_out.size() != 1 || w_out.c_in() != c_mid {
        return shape_err(format!("merge: 1x1 weight has {} inputs, branches provide {c_mid}", w_out.c_in()));
    }
    if b_out.len() != w_out.c_out() {
        return shape_err("merge: output bias length mismatch");
    }
    let c_out = w_out.c_out();
    let taps = c_in * size * size;
    let mut kernel = vec![0f64; c_out * taps];
    let mut bias: Vec<f64> = b_out.iter().map(|v| v.wide()).collect();
    for o in 0..c_out {
        let mut j = 0;
        for (k, b) in branches {
            for m in 0..k.c_out() {
                let wj = w_out.at(o, j, 0, 0).wide();
                j += 1;
                if wj == 0.0 {
                    continue;
                }
                let src = &k.data()[m * taps..(m + 1) * taps];
                for (d, s) in kernel[o * taps..(o + 1) * taps].iter_mut().zip(src) {
                    *d += wj * s.wide();
                }
                bias[o] += wj * b[m].wide();
            }
        }
    }
    FusedConv::new(
        Kernel::from_vec(c_out, c_in, size, kernel.into_iter().map(T::of).collect())?,
        bias.into_iter().map(T::of).collect(),
    )
}

/// Collapse a training-form block into its equivalent single convolution.
/// All intermediate arithmetic runs in `f64`.
pub fn fuse_mbrconv<T: Real>(block: &MbrConv<T>) -> Result<FusedConv<T>> {
    if !block.is_tracked() {
        return Err(Error::State("cannot fuse: batch norm running statistics are uninitialized".into()));
    }
    let mut entries = Vec::with_capacity(2 * block.branches.len());
    for br in &block.branches {
        let kernel = br.kernel.cast::<f64>();
        let bias: Vec<f64> = br.bias.iter().map(|v| v.wide()).collect();
        let bn = BnParams::<f64> {
            gamma: br.bn.gamma.iter().map(|v| v.wide()).collect(),
            beta: br.bn.beta.iter().map(|v| v.wide()).collect(),
            running_mean: br.bn.running_mean.iter().map(|v| v.wide()).collect(),
            running_var: br.bn.running_var.iter().map(|v| v.wide()).collect(),
            eps: br.bn.eps,
            momentum: br.bn.momentum,
            tracked: true,
        };
        let (fk, fb) = fold_bn(&kernel, &bias, &bn)?;
        entries.push((pad_kernel_center(&fk, block.size)?, fb));
        entries.push((pad_kernel_center(&kernel, block.size)?, bias));
    }
    let w_pre = block.w_pre.as_ref().map(|k| k.cast::<f64>());
    let w = iwo_compose(w_pre.as_ref(), &block.w_learn.cast::<f64>())?;
    let b_out: Vec<f64> = block.bias.iter().map(|v| v.wide()).collect();
    let fused = merge_concat_1x1(&entries, &w, &b_out)?;
    Ok(FusedConv {
        kernel: fused.kernel.cast::<T>(),
        bias: fused.bias.iter().map(|&v| T::of(v)).collect(),
    })
}
