//! Image quality metrics and weight-analysis helpers.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Kernel, Tensor4};

pub const PSNR_CAP: f64 = 100.0;

fn same_shape<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("metric operands {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.wide() - y.wide()).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// Peak 1.0; capped at [`PSNR_CAP`] when MSE < 1e-10.
pub fn psnr<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    let e = mse(a, b)?;
    if e < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

pub fn mae<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.wide() - y.wide()).abs()).sum();
    Ok(s / a.len() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Window used for an `h × w` plane: 11, or the largest odd size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Separable "valid" Gaussian filtering of one plane.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over all valid Gaussian windows, per channel, averaged over
/// channels and samples.
pub fn ssim<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    same_shape(a, b)?;
    let [n, c, h, w] = a.shape();
    let taps = gaussian_taps(ssim_window(h, w), SSIM_SIGMA);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for s in 0..n {
        for ch in 0..c {
            let x: Vec<f64> = a.plane(s, ch).iter().map(|v| v.wide()).collect();
            let y: Vec<f64> = b.plane(s, ch).iter().map(|v| v.wide()).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let (mx, _, _) = blur(&x, h, w, &taps);
            let (my, _, _) = blur(&y, h, w, &taps);
            let (sxx, _, _) = blur(&xx, h, w, &taps);
            let (syy, _, _) = blur(&yy, h, w, &taps);
            let (sxy, _, _) = blur(&xy, h, w, &taps);
            let mut acc = 0.0;
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
            total += acc / mx.len() as f64;
        }
    }
    Ok(total / (n * c) as f64)
}

/// Row-major `c_out × c_out` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|j| format!("{:.9e}", self.at(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `M[i][j] = KL(softmax(row_i) ‖ softmax(row_j))` over the rows of a 1×1 kernel.
pub fn kl_channel_matrix<T: Real>(w: &Kernel<T>) -> Result<Matrix> {
    if w.size() != 1 {
        return Err(Error::Argument(format!("KL matrix needs a 1x1 kernel, got {0}x{0}", w.size())));
    }
    let (co, ci) = (w.c_out(), w.c_in());
    let probs: Vec<Vec<f64>> = (0..co)
        .map(|o| softmax(&w.data()[o * ci..(o + 1) * ci].iter().map(|v| v.wide()).collect::<Vec<_>>()))
        .collect();
    let mut data = vec![0.0; co * co];
    for i in 0..co {
        for j in 0..co {
            if i != j {
                data[i * co + j] = probs[i].iter().zip(&probs[j]).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0);
            }
        }
    }
    Ok(Matrix { rows: co, cols: co, data })
}

/// `w_iwo − w_base`, elementwise.
pub fn kernel_delta<T: Real>(w_iwo: &Kernel<T>, w_base: &Kernel<T>) -> Result<Kernel<T>> {
    if !w_iwo.same_shape(w_base) {
        return shape_err(format!("kernel delta of {:?} and {:?}", w_iwo.dims(), w_base.dims()));
    }
    let data = w_iwo.data().iter().zip(w_base.data()).map(|(a, b)| *a - *b).collect();
    Kernel::from_vec(w_iwo.c_out(), w_iwo.c_in(), w_iwo.size(), data)
}

/// Per output channel, the input-channel kernels tiled left to right:
/// a `K × (c_in·K)` grid.
pub fn delta_grid<T: Real>(delta: &Kernel<T>, o: usize) -> (usize, usize, Vec<f64>) {
    let (k, ci) = (delta.size(), delta.c_in());
    let w = ci * k;
    let mut grid = vec![0.0; k * w];
    for i in 0..ci {
        for y in 0..k {
            for x in 0..k {
                grid[y * w + i * k + x] = delta.at(o, i, y, x).wide();
            }
        }
    }
    (k, w, grid)
}

pub fn grid_csv(h: usize, w: usize, grid: &[f64]) -> String {
    let mut s = String::new();
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                s.push(',');
            }
            let _ = write!(s, "{:.9e}", grid[y * w + x]);
        }
        s.push('\n');
    }
    s
}

/// Min–max scaled to 0..=255; a constant grid maps to 128.
pub fn grid_gray(grid: &[f64]) -> Vec<u8> {
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; grid.len()];
    }
    grid.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes `{stem}_o{NN}.csv` and `{stem}_o{NN}.pgm` for every output channel.
pub fn export_kernel_delta<T: Real>(delta: &Kernel<T>, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for o in 0..delta.c_out() {
        let (h, w, grid) = delta_grid(delta, o);
        let csv = dir.join(format!("{stem}_o{o:02}.csv"));
        crate::data::write_file(&csv, grid_csv(h, w, &grid).as_bytes())?;
        let pgm = dir.join(format!("{stem}_o{o:02}.pgm"));
        crate::data::save_gray(&pgm, w, h, &grid_gray(&grid))?;
        written.push(csv);
        written.push(pgm);
    }
    Ok(written)
}
