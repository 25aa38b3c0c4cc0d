//! Dense NCHW tensors, convolution kernels and the handful of operators the
//! network is built from.
//!
//! Reductions inside the convolutions accumulate in `f64` regardless of the
//! storage type and round once on store.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Activation map, row-major with `w` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "tensor dims must be >= 1, got {shape:?}");
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err(format!("zero-sized dimension in {shape:?}"));
        }
        if data.len() != shape.iter().product::<usize>() {
            return shape_err(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::of(rng.gen_range(lo..hi))).collect();
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.wide())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.wide() - b.wide()).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    /// Channel-wise concatenation of tensors with identical `n`, `h`, `w`.
    pub fn concat_channels(parts: &[&Tensor4<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let [n, _, h, w] = first.shape;
        if parts.iter().any(|p| p.n() != n || p.h() != h || p.w() != w) {
            return shape_err("concat inputs disagree on n/h/w");
        }
        let c: usize = parts.iter().map(|p| p.c()).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for s in 0..n {
            for p in parts {
                let hw = h * w;
                let start = s * p.c() * hw;
                data.extend_from_slice(&p.data[start..start + p.c() * hw]);
            }
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    /// Channels `[c0, c1)` as a new tensor.
    pub fn channel_range(&self, c0: usize, c1: usize) -> Self {
        assert!(c0 < c1 && c1 <= self.c());
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (c1 - c0) * hw);
        for s in 0..n {
            data.extend_from_slice(&self.data[(s * c + c0) * hw..(s * c + c1) * hw]);
        }
        Self { shape: [n, c1 - c0, h, w], data }
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        if items.iter().any(|t| t.c() != c || t.h() != h || t.w() != w) {
            return shape_err("stack inputs disagree on c/h/w");
        }
        let n = items.iter().map(|t| t.n()).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    /// The `i`-th sample as an `n = 1` tensor.
    pub fn sample(&self, i: usize) -> Self {
        let [_, c, h, w] = self.shape;
        let len = c * h * w;
        Self {
            shape: [1, c, h, w],
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Convolution weights laid out as `(c_out, c_in, size, size)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T = f32> {
    c_out: usize,
    c_in: usize,
    size: usize,
    data: Vec<T>,
}

impl<T: Real> Kernel<T> {
    pub fn zeros(c_out: usize, c_in: usize, size: usize) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        Self {
            c_out,
            c_in,
            size,
            data: vec![T::zero(); c_out * c_in * size * size],
        }
    }

    pub fn from_vec(c_out: usize, c_in: usize, size: usize, data: Vec<T>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Unsupported(format!("even kernel size {size}")));
        }
        if c_out == 0 || c_in == 0 {
            return shape_err("kernel with zero channels");
        }
        if data.len() != c_out * c_in * size * size {
            return shape_err(format!(
                "kernel data length {} != {c_out}x{c_in}x{size}x{size}",
                data.len()
            ));
        }
        Ok(Self { c_out, c_in, size, data })
    }

    /// 1×1 kernel with `k[o, i] = δ(o, i)`.
    pub fn identity_1x1(c: usize) -> Self {
        let mut k = Self::zeros(c, c, 1);
        for o in 0..c {
            k.data[o * c + o] = T::one();
        }
        k
    }

    /// Uniform initialization in `±sqrt(1 / fan_in)`.
    pub fn kaiming_uniform<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        size: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / (c_in * size * size) as f64).sqrt();
        let mut k = Self::zeros(c_out, c_in, size);
        for v in &mut k.data {
            *v = T::of(rng.gen_range(-bound..bound));
        }
        k
    }

    #[inline]
    pub fn c_out(&self) -> usize {
        self.c_out
    }
    #[inline]
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }
    pub fn dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.size, self.size]
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.data[((o * self.c_in + i) * self.size + ky) * self.size + kx]
    }

    #[inline]
    pub fn at_mut(&mut self, o: usize, i: usize, ky: usize, kx: usize) -> &mut T {
        &mut self.data[((o * self.c_in + i) * self.size + ky) * self.size + kx]
    }

    /// The `size × size` taps connecting input `i` to output `o`.
    #[inline]
    pub fn taps(&self, o: usize, i: usize) -> &[T] {
        let kk = self.size * self.size;
        let start = (o * self.c_in + i) * kk;
        &self.data[start..start + kk]
    }

    pub fn cast<U: Real>(&self) -> Kernel<U> {
        Kernel {
            c_out: self.c_out,
            c_in: self.c_in,
            size: self.size,
            data: self.data.iter().map(|v| U::of(v.wide())).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    /// Swap in/out roles and rotate every spatial kernel by 180°; convolving
    /// an output gradient with this kernel yields the input gradient.
    pub fn flip_transpose(&self) -> Self {
        let k = self.size;
        let mut out = Self::zeros(self.c_in, self.c_out, k);
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        *out.at_mut(i, o, k - 1 - ky, k - 1 - kx) = self.at(o, i, ky, kx);
                    }
                }
            }
        }
        out
    }
}

/// Bias vector; one entry per output channel.
pub type Bias<T = f32> = Vec<T>;

/// Target number of output pixels per im2col tile; keeps the patch matrix
/// cache resident for any image size.
const TILE_PIXELS: usize = 256;

fn tile_rows(h: usize, w: usize) -> usize {
    (TILE_PIXELS / w).clamp(1, h)
}

/// Same-padded, stride-1 convolution.
pub fn conv2d<T: Real>(x: &Tensor4<T>, k: &Kernel<T>, bias: &[T], pad: usize) -> Result<Tensor4<T>> {
    if k.size % 2 == 0 {
        return Err(Error::Unsupported(format!("even kernel size {}", k.size)));
    }
    if pad != (k.size - 1) / 2 {
        return Err(Error::Unsupported(format!(
            "only same padding is supported (size {}, pad {pad})",
            k.size
        )));
    }
    if x.c() != k.c_in {
        return shape_err(format!("conv2d: input has {} channels, kernel expects {}", x.c(), k.c_in));
    }
    if bias.len() != k.c_out {
        return shape_err(format!("conv2d: bias length {} != c_out {}", bias.len(), k.c_out));
    }
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let rows = k.c_in * k.size * k.size;
    let band = tile_rows(h, w);
    let weights: Vec<f64> = k.data.iter().map(|v| v.wide()).collect();
    let mut cols = vec![0f64; rows * band * w];
    let mut acc = vec![0f64; k.c_out * band * w];
    let mut out = Tensor4::zeros([n, k.c_out, h, w]);
    for s in 0..n {
        for y0 in (0..h).step_by(band) {
            let y1 = (y0 + band).min(h);
            let cw = (y1 - y0) * w;
            im2col(x, s, k.size, y0, y1, &mut cols[..rows * cw]);
            let acc = &mut acc[..k.c_out * cw];
            for (o, chunk) in acc.chunks_exact_mut(cw).enumerate() {
                chunk.fill(bias[o].wide());
            }
            // SAFETY: weights is (c_out × rows), cols is (rows × cw) and acc is
            // (c_out × cw), all row-major and fully allocated.
            unsafe {
                matrixmultiply::dgemm(
                    k.c_out,
                    rows,
                    cw,
                    1.0,
                    weights.as_ptr(),
                    rows as isize,
                    1,
                    cols.as_ptr(),
                    cw as isize,
                    1,
                    1.0,
                    acc.as_mut_ptr(),
                    cw as isize,
                    1,
                );
            }
            for (o, chunk) in acc.chunks_exact(cw).enumerate() {
                let start = (s * k.c_out + o) * hw + y0 * w;
                for (d, a) in out.data[start..start + cw].iter_mut().zip(chunk) {
                    *d = T::of(*a);
                }
            }
        }
    }
    Ok(out)
}

/// Unfold output rows `[y0, y1)` of sample `s` into a
/// `(c·size², (y1−y0)·w)` patch matrix, zero padded at the borders.
fn im2col<T: Real>(x: &Tensor4<T>, s: usize, size: usize, y0: usize, y1: usize, cols: &mut [f64]) {
    let [_, c, h, w] = x.shape();
    let cw = (y1 - y0) * w;
    let pad = (size / 2) as isize;
    let mut r = 0;
    for i in 0..c {
        let plane = x.plane(s, i);
        for ky in 0..size {
            let dy = ky as isize - pad;
            for kx in 0..size {
                let dx = kx as isize - pad;
                let row = &mut cols[r * cw..(r + 1) * cw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in y0..y1 {
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(0.0);
                    dst[x1..].fill(0.0);
                    let s0 = (x0 as isize + dx) as usize;
                    for (d, v) in dst[x0..x1].iter_mut().zip(&src[s0..s0 + (x1 - x0)]) {
                        *d = v.wide();
                    }
                }
                r += 1;
            }
        }
    }
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_input_grad<T: Real>(grad_out: &Tensor4<T>, k: &Kernel<T>) -> Result<Tensor4<T>> {
    let flipped = k.flip_transpose();
    conv2d(grad_out, &flipped, &vec![T::zero(); k.c_in], (k.size - 1) / 2)
}

/// Gradients of `conv2d` with respect to kernel and bias.
pub fn conv2d_param_grad<T: Real>(
    x: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    size: usize,
) -> Result<(Kernel<T>, Bias<T>)> {
    let (dk, db) = param_grad_wide(x, grad_out, size)?;
    let kernel = Kernel::from_vec(grad_out.c(), x.c(), size, dk.into_iter().map(T::of).collect())?;
    Ok((kernel, db.into_iter().map(T::of).collect()))
}

/// [`conv2d_param_grad`] with the sums left in 64-bit: `(dk, db)`, `dk`
/// laid out like the kernel.
pub(crate) fn param_grad_wide<T: Real>(x: &Tensor4<T>, grad_out: &Tensor4<T>, size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.n() != grad_out.n() || x.h() != grad_out.h() || x.w() != grad_out.w() {
        return shape_err("conv2d_param_grad: input and gradient disagree on n/h/w");
    }
    if size % 2 == 0 {
        return Err(Error::Unsupported(format!("even kernel size {size}")));
    }
    let [n, c_in, h, w] = x.shape();
    let hw = h * w;
    let c_out = grad_out.c();
    let rows = c_in * size * size;
    let band = tile_rows(h, w);
    let mut cols = vec![0f64; rows * band * w];
    let mut g = vec![0f64; c_out * band * w];
    let mut dk = vec![0f64; c_out * rows];
    let mut db = vec![0f64; c_out];
    for s in 0..n {
        for y0 in (0..h).step_by(band) {
            let y1 = (y0 + band).min(h);
            let cw = (y1 - y0) * w;
            im2col(x, s, size, y0, y1, &mut cols[..rows * cw]);
            let g = &mut g[..c_out * cw];
            for (o, chunk) in g.chunks_exact_mut(cw).enumerate() {
                let start = (s * c_out + o) * hw + y0 * w;
                let mut sum = 0.0;
                for (d, v) in chunk.iter_mut().zip(&grad_out.data[start..start + cw]) {
                    *d = v.wide();
                    sum += *d;
                }
                db[o] += sum;
            }
            // SAFETY: g is (c_out × cw) row-major; cols viewed with strides
            // (1, cw) is its (cw × rows) transpose; dk is (c_out × rows).
            unsafe {
                matrixmultiply::dgemm(
                    c_out,
                    cw,
                    rows,
                    1.0,
                    g.as_ptr(),
                    cw as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    cw as isize,
                    1.0,
                    dk.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
        }
    }
    Ok((dk, db))
}

/// Embed a kernel at the spatial center of a larger zero kernel.
pub fn pad_kernel_center<T: Real>(k: &Kernel<T>, target: usize) -> Result<Kernel<T>> {
    if target % 2 == 0 || target < k.size {
        return Err(Error::Argument(format!(
            "cannot center-pad a {}x{} kernel to {target}x{target}",
            k.size, k.size
        )));
    }
    if target == k.size {
        return Ok(k.clone());
    }
    let off = (target - k.size) / 2;
    let mut out = Kernel::zeros(k.c_out, k.c_in, target);
    for o in 0..k.c_out {
        for i in 0..k.c_in {
            for ky in 0..k.size {
                for kx in 0..k.size {
                    *out.at_mut(o, i, ky + off, kx + off) = k.at(o, i, ky, kx);
                }
            }
        }
    }
    Ok(out)
}

/// Sum in f64 over eight interleaved lanes (fixed order, so deterministic).
fn wide_sum<T: Real>(xs: &[T]) -> f64 {
    let mut lanes = [0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|v| v.wide()).sum();
    for c in chunks {
        for (l, v) in lanes.iter_mut().zip(c) {
            *l += v.wide();
        }
    }
    lanes.iter().sum::<f64>() + tail
}

fn plane_max<T: Real>(xs: &[T]) -> T {
    let mut lanes = [xs[0]; 8];
    let chunks = xs.chunks_exact(8);
    let mut m = chunks.remainder().iter().fold(xs[0], |a, &b| if b > a { b } else { a });
    for c in chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            if v > *l {
                *l = v;
            }
        }
    }
    for l in lanes {
        if l > m {
            m = l;
        }
    }
    m
}

pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Tensor4::zeros([n, c, 1, 1]);
    for s in 0..n {
        for ch in 0..c {
            out.set(s, ch, 0, 0, T::of(wide_sum(x.plane(s, ch)) * inv));
        }
    }
    out
}

pub fn global_max_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, _, _] = x.shape();
    let mut out = Tensor4::zeros([n, c, 1, 1]);
    for s in 0..n {
        for ch in 0..c {
            out.set(s, ch, 0, 0, plane_max(x.plane(s, ch)));
        }
    }
    out
}

/// Global max pool that also reports the flat in-plane position of each
/// maximum (first occurrence in scan order).
pub fn global_max_pool_indexed<T: Real>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<usize>) {
    let [n, c, _, _] = x.shape();
    let mut out = Tensor4::zeros([n, c, 1, 1]);
    let mut idx = Vec::with_capacity(n * c);
    for s in 0..n {
        for ch in 0..c {
            let plane = x.plane(s, ch);
            let mut best = 0;
            for (j, v) in plane.iter().enumerate() {
                if *v > plane[best] {
                    best = j;
                }
            }
            out.set(s, ch, 0, 0, plane[best]);
            idx.push(best);
        }
    }
    (out, idx)
}

pub fn prelu<T: Real>(x: &Tensor4<T>, slope: &[T]) -> Result<Tensor4<T>> {
    if slope.len() != x.c() {
        return shape_err(format!("prelu: {} slopes for {} channels", slope.len(), x.c()));
    }
    let mut out = x.clone();
    for s in 0..x.n() {
        for (ch, &a) in slope.iter().enumerate() {
            for v in out.plane_mut(s, ch) {
                if *v < T::zero() {
                    *v = a * *v;
                }
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    let v = v.wide();
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    T::of(s)
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh_map<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.tanh())
}

/// How `b` lines up against `a` in a binary elementwise op.
enum Broadcast {
    Same,
    /// `b` is `(1, c, 1, 1)`.
    Channel,
    /// `b` is `(n, c, 1, 1)`.
    SampleChannel,
}

fn broadcast_kind<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if b.h() == 1 && b.w() == 1 && b.c() == a.c() {
        if b.n() == 1 {
            return Ok(Broadcast::Channel);
        }
        if b.n() == a.n() {
            return Ok(Broadcast::SampleChannel);
        }
    }
    shape_err(format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()))
}

fn broadcast_op<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Result<Tensor4<T>> {
    match broadcast_kind(a, b)? {
        Broadcast::Same => Ok(a.zip_with(b, f)),
        kind => {
            let mut out = a.clone();
            for s in 0..a.n() {
                let bs = if matches!(kind, Broadcast::Channel) { 0 } else { s };
                for ch in 0..a.c() {
                    let bv = b.at(bs, ch, 0, 0);
                    for v in out.plane_mut(s, ch) {
                        *v = f(*v, bv);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Elementwise product; `b` may also be `(1|n, c, 1, 1)`.
pub fn mul<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    broadcast_op(a, b, |x, y| x * y)
}

/// Elementwise sum; `b` may also be `(1|n, c, 1, 1)`.
pub fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    broadcast_op(a, b, |x, y| x + y)
}

/// Depth-to-space: `out(n, c', h·r+dy, w·r+dx) = x(n, c'·r² + dy·r + dx, h, w)`.
pub fn pixel_shuffle<T: Real>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    if r == 0 || x.c() % (r * r) != 0 {
        return shape_err(format!("pixel_shuffle: {} channels not divisible by {r}^2", x.c()));
    }
    let [n, c, h, w] = x.shape();
    let co = c / (r * r);
    let mut out = Tensor4::zeros([n, co, h * r, w * r]);
    for s in 0..n {
        for oc in 0..co {
            for dy in 0..r {
                for dx in 0..r {
                    let src = x.plane(s, oc * r * r + dy * r + dx);
                    for y in 0..h {
                        for xx in 0..w {
                            out.set(s, oc, y * r + dy, xx * r + dx, src[y * w + xx]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`] (space-to-depth).
pub fn pixel_unshuffle<T: Real>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    if r == 0 || x.h() % r != 0 || x.w() % r != 0 {
        return shape_err(format!("pixel_unshuffle: {}x{} not divisible by {r}", x.h(), x.w()));
    }
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / r, w / r);
    let mut out = Tensor4::zeros([n, c * r * r, ho, wo]);
    for s in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = ch * r * r + dy * r + dx;
                    for y in 0..ho {
                        for xx in 0..wo {
                            out.set(s, oc, y, xx, x.at(s, ch, y * r + dy, xx * r + dx));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Textbook four-loop convolution with explicit zero padding.
    fn conv_oracle(x: &Tensor4<f64>, k: &Kernel<f64>, b: &[f64]) -> Tensor4<f64> {
        let [n, c_in, h, w] = x.shape();
        let p = (k.size() / 2) as isize;
        let mut out = Tensor4::zeros([n, k.c_out(), h, w]);
        for s in 0..n {
            for o in 0..k.c_out() {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = b[o];
                        for i in 0..c_in {
                            for ky in 0..k.size() {
                                for kx in 0..k.size() {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                        acc += k.at(o, i, ky, kx) * x.at(s, i, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        out.set(s, o, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_1x1_is_identity() {
        let x = Tensor4::<f32>::random_uniform([2, 3, 5, 4], -1.0, 1.0, &mut rng(1));
        let y = conv2d(&x, &Kernel::identity_1x1(3), &[0.0; 3], 0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = Tensor4::<f32>::random_uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng(2));
        let y = conv2d(&x, &Kernel::zeros(3, 2, 3), &[3.5; 3], 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut r = rng(3);
        let x = Tensor4::<f64>::random_uniform([1, 2, 5, 5], -1.0, 1.0, &mut r);
        let k = Kernel::<f64>::kaiming_uniform(3, 2, 3, &mut r);
        let b = vec![0.1, -0.2, 0.3];
        let got = conv2d(&x.cast::<f32>(), &k.cast::<f32>(), &[0.1, -0.2, 0.3], 1).unwrap();
        let want = conv_oracle(&x, &k, &b);
        assert!(got.cast::<f64>().max_abs_diff(&want) <= 1e-5);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        assert!(matches!(conv2d(&x, &Kernel::zeros(1, 3, 3), &[0.0], 1), Err(Error::Shape(_))));
        assert!(matches!(
            Kernel::<f32>::from_vec(1, 2, 2, vec![0.0; 8]),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(conv2d(&x, &Kernel::zeros(1, 2, 3), &[0.0], 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn pad_center_places_taps() {
        let k = Kernel::from_vec(1, 1, 1, vec![2.5f32]).unwrap();
        let p = pad_kernel_center(&k, 3).unwrap();
        let mut want = vec![0.0f32; 9];
        want[4] = 2.5;
        assert_eq!(p.data(), &want[..]);
        let k3 = Kernel::<f32>::kaiming_uniform(2, 2, 3, &mut rng(4));
        assert_eq!(pad_kernel_center(&k3, 3).unwrap(), k3);
        assert!(pad_kernel_center(&k3, 1).is_err());
        assert!(pad_kernel_center(&k3, 4).is_err());
    }

    #[test]
    fn padded_kernel_is_equivalent() {
        let mut r = rng(5);
        let x = Tensor4::<f32>::random_uniform([1, 3, 9, 7], 0.0, 1.0, &mut r);
        for size in [1, 3] {
            let k = Kernel::<f32>::kaiming_uniform(2, 3, size, &mut r);
            let b = [0.25, -0.5];
            let direct = conv2d(&x, &k, &b, size / 2).unwrap();
            let padded = conv2d(&x, &pad_kernel_center(&k, 5).unwrap(), &b, 2).unwrap();
            assert!(direct.max_abs_diff(&padded) <= 1e-6);
        }
    }

    #[test]
    fn pools() {
        let c = Tensor4::<f32>::full([1, 2, 3, 3], 0.7);
        assert!(global_avg_pool(&c).data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        assert!(global_max_pool(&c).data().iter().all(|&v| v == 0.7));
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![0.0f32, 9.0, 0.0, 0.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.25]);
        assert_eq!(global_max_pool(&x).data(), &[9.0]);

        let x = Tensor4::<f32>::random_uniform([2, 3, 7, 7], -1.0, 1.0, &mut rng(6));
        let avg = global_avg_pool(&x);
        let max = global_max_pool(&x);
        for s in 0..2 {
            for ch in 0..3 {
                let mut sum = 0f64;
                let mut m = f32::NEG_INFINITY;
                for y in 0..7 {
                    for xx in 0..7 {
                        sum += x.at(s, ch, y, xx) as f64;
                        m = m.max(x.at(s, ch, y, xx));
                    }
                }
                assert_eq!(avg.at(s, ch, 0, 0), (sum / 49.0) as f32);
                assert_eq!(max.at(s, ch, 0, 0), m);
            }
        }
    }

    #[test]
    fn prelu_cases() {
        let x = Tensor4::<f32>::random_uniform([1, 2, 3, 3], 0.0, 1.0, &mut rng(7));
        assert_eq!(prelu(&x, &[0.25, 0.5]).unwrap(), x);
        let y = Tensor4::<f32>::random_uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng(8));
        assert_eq!(prelu(&y, &[1.0, 1.0]).unwrap(), y);
        let z = Tensor4::from_vec([1, 1, 1, 1], vec![-2.0f32]).unwrap();
        assert_eq!(prelu(&z, &[0.25]).unwrap().data(), &[-0.5]);
        assert!(prelu(&z, &[0.25, 0.1]).is_err());
    }

    #[test]
    fn activations_and_broadcast() {
        let z = Tensor4::<f32>::zeros([1, 1, 1, 1]);
        assert_eq!(sigmoid(&z).data(), &[0.5]);
        assert_eq!(tanh_map(&z).data(), &[0.0]);
        let x = Tensor4::<f32>::random_uniform([2, 3, 4, 5], -3.0, 3.0, &mut rng(9));
        assert_eq!(mul(&x, &Tensor4::full([1, 3, 1, 1], 1.0)).unwrap(), x);

        let b = Tensor4::<f32>::random_uniform([1, 3, 1, 1], -1.0, 1.0, &mut rng(10));
        let mut expanded = Tensor4::zeros(x.shape());
        for s in 0..2 {
            for ch in 0..3 {
                for y in 0..4 {
                    for xx in 0..5 {
                        expanded.set(s, ch, y, xx, b.at(0, ch, 0, 0));
                    }
                }
            }
        }
        assert_eq!(mul(&x, &b).unwrap(), mul(&x, &expanded).unwrap());
        assert_eq!(add(&x, &b).unwrap(), add(&x, &expanded).unwrap());
        assert!(mul(&x, &Tensor4::zeros([1, 2, 1, 1])).is_err());
    }

    #[test]
    fn pixel_shuffle_cases() {
        let x = Tensor4::<f32>::random_uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng(11));
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        let abcd = Tensor4::from_vec([1, 4, 1, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&abcd, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&x, 2).is_err());

        let x = Tensor4::<f32>::random_uniform([2, 12, 4, 4], -1.0, 1.0, &mut rng(12));
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), [2, 3, 8, 8]);
        for s in 0..2 {
            for ch in 0..3 {
                for oy in 0..8 {
                    for ox in 0..8 {
                        let src = x.data()[((s * 12 + ch * 4 + (oy % 2) * 2 + ox % 2) * 4 + oy / 2) * 4 + ox / 2];
                        assert_eq!(y.at(s, ch, oy, ox), src);
                    }
                }
            }
        }
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let mut r = rng(13);
        let x = Tensor4::<f64>::random_uniform([2, 2, 5, 6], -1.0, 1.0, &mut r);
        let k = Kernel::<f64>::kaiming_uniform(3, 2, 3, &mut r);
        let b = vec![0.1, 0.0, -0.1];
        let g = Tensor4::<f64>::random_uniform([2, 3, 5, 6], -1.0, 1.0, &mut r);
        let loss = |x: &Tensor4<f64>, k: &Kernel<f64>, b: &[f64]| -> f64 {
            let y = conv2d(x, k, b, 1).unwrap();
            y.data().iter().zip(g.data()).map(|(a, c)| a * c).sum()
        };
        let gx = conv2d_input_grad(&g, &k).unwrap();
        let (gk, gb) = conv2d_param_grad(&x, &g, 3).unwrap();
        let h = 1e-6;
        for j in [0, 7, 33, 59] {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let fd = (loss(&xp, &k, &b) - loss(&xm, &k, &b)) / (2.0 * h);
            assert!((fd - gx.data()[j]).abs() < 1e-7);
        }
        for j in [0, 5, 20, 53] {
            let mut kp = k.clone();
            kp.data_mut()[j] += h;
            let mut km = k.clone();
            km.data_mut()[j] -= h;
            let fd = (loss(&x, &kp, &b) - loss(&x, &km, &b)) / (2.0 * h);
            assert!((fd - gk.data()[j]).abs() < 1e-7);
        }
        let total: f64 = (0..6 * 5).map(|p| g.data()[p + 30] + g.data()[p + 120]).sum();
        assert!((gb[1] - total).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conv_is_linear(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0, size in prop::sample::select(vec![1usize, 3, 5])) {
            let mut r = rng(seed);
            let x = Tensor4::<f32>::random_uniform([1, 2, 6, 6], -1.0, 1.0, &mut r);
            let y = Tensor4::<f32>::random_uniform([1, 2, 6, 6], -1.0, 1.0, &mut r);
            let k = Kernel::<f32>::kaiming_uniform(3, 2, size, &mut r);
            let zero = [0.0f32; 3];
            let (a, b) = (alpha as f32, beta as f32);
            let mix = Tensor4::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = conv2d(&mix, &k, &zero, size / 2).unwrap();
            let cx = conv2d(&x, &k, &zero, size / 2).unwrap();
            let cy = conv2d(&y, &k, &zero, size / 2).unwrap();
            let rhs = Tensor4::from_vec(cx.shape(), cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
        }

        #[test]
        fn conv_is_deterministic(seed in 0u64..1000) {
            let mut r = rng(seed);
            let x = Tensor4::<f32>::random_uniform([1, 3, 7, 5], -1.0, 1.0, &mut r);
            let k = Kernel::<f32>::kaiming_uniform(4, 3, 3, &mut r);
            let a = conv2d(&x, &k, &[0.0; 4], 1).unwrap();
            let b = conv2d(&x, &k, &[0.0; 4], 1).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn sigmoid_in_open_unit_interval(seed in 0u64..1000) {
            let x = Tensor4::<f32>::random_uniform([2, 2, 3, 3], -15.0, 15.0, &mut rng(seed));
            let y = sigmoid(&x);
            prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert_eq!(y.shape(), x.shape());
        }
    }
}
