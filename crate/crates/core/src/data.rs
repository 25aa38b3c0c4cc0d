//! Image files, Bayer packing and synthetic degradations.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::network::Variant;
use crate::tensor::Tensor4;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        msg: msg.into(),
    })
}

struct Netpbm<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Netpbm<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return fmt_err(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| fmt_err(start, format!("{what} out of range")), Ok)
    }
}

/// Binary PPM (P6) or PGM (P5).
pub fn decode_netpbm(bytes: &[u8]) -> Result<Tensor4<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return fmt_err(0, "not a binary PPM/PGM"),
    };
    let mut p = Netpbm { bytes, pos: 2 };
    let w = p.number("width")?;
    let h = p.number("height")?;
    let maxval_at = p.pos;
    let maxval = p.number("maxval")?;
    if w == 0 || h == 0 {
        return fmt_err(maxval_at, "zero image dimension");
    }
    if maxval == 0 || maxval > 255 {
        return fmt_err(maxval_at, format!("unsupported maxval {maxval}"));
    }
    if !matches!(bytes.get(p.pos), Some(b' ' | b'\t' | b'\r' | b'\n')) {
        return fmt_err(p.pos, "expected a single whitespace before pixel data");
    }
    let start = p.pos + 1;
    let need = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format {
            offset: start,
            msg: "image too large".into(),
        })?;
    let avail = bytes.len() - start;
    if avail < need {
        return fmt_err(bytes.len(), format!("truncated pixel data: expected {need} bytes, found {avail}"));
    }
    let mut t = Tensor4::zeros([1, channels, h, w]);
    let scale = maxval as f32;
    for (i, &b) in bytes[start..start + need].iter().enumerate() {
        let (pix, ch) = (i / channels, i % channels);
        if b as usize > maxval {
            return fmt_err(start + i, format!("sample {b} exceeds maxval {maxval}"));
        }
        t.plane_mut(0, ch)[pix] = b as f32 / scale;
    }
    Ok(t)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor4<f32>> {
    let png_err = |e: png::DecodingError| Error::Format {
        offset: 0,
        msg: format!("png: {e}"),
    };
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return fmt_err(0, "png: unexpanded palette"),
    };
    let mut t = Tensor4::zeros([1, channels, h, w]);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for ch in 0..channels {
                t.set(0, ch, y, x, row[x * stride + ch] as f32 / 255.0);
            }
        }
    }
    Ok(t)
}

/// PNG, PPM (P6) or PGM (P5), sniffed from the content. Values in `[0, 1]`,
/// shape `(1, 3|1, h, w)`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor4<f32>> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else {
        decode_netpbm(bytes)
    }
}

pub fn load_image(path: &Path) -> Result<Tensor4<f32>> {
    decode_image(&read_file(path)?)
}

fn interleave(t: &Tensor4<f32>) -> Result<Vec<u8>> {
    if t.n() != 1 || !(t.c() == 1 || t.c() == 3) {
        return shape_err(format!("can only encode (1, 1|3, h, w) images, got {:?}", t.shape()));
    }
    let c = t.c();
    let mut out = vec![0; t.len()];
    for ch in 0..c {
        for (i, &v) in t.plane(0, ch).iter().enumerate() {
            out[i * c + ch] = quantize(v);
        }
    }
    Ok(out)
}

/// P6 for three channels, P5 for one. Values are clamped and quantized.
pub fn encode_netpbm(t: &Tensor4<f32>) -> Result<Vec<u8>> {
    let pixels = interleave(t)?;
    let magic = if t.c() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", t.w(), t.h()).into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn encode_png(t: &Tensor4<f32>) -> Result<Vec<u8>> {
    let pixels = interleave(t)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, t.w() as u32, t.h() as u32);
        enc.set_color(if t.c() == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Unsupported(format!("png encode: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::Unsupported(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Format chosen by extension: `.png` → PNG, anything else → PPM/PGM.
pub fn save_image(t: &Tensor4<f32>, path: &Path) -> Result<()> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(t)? } else { encode_netpbm(t)? };
    write_file(path, &bytes)
}

pub fn save_gray(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != w * h {
        return shape_err(format!("{} gray pixels for a {w}x{h} image", pixels.len()));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    write_file(path, &out)
}

/// RGGB mosaic of an RGB image: `(1, 3, h, w)` → `(1, 1, h, w)`.
pub fn mosaic_rggb(rgb: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    let [n, c, h, w] = rgb.shape();
    if n != 1 || c != 3 || h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("mosaic needs (1, 3, even, even), got {:?}", rgb.shape()));
    }
    let mut m = Tensor4::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let ch = match (y % 2, x % 2) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            };
            m.set(0, 0, y, x, rgb.at(0, ch, y, x));
        }
    }
    Ok(m)
}

/// `(1, 1, h, w)` RGGB mosaic → `(1, 4, h/2, w/2)` planes `[R, G(r), G(b), B]`.
pub fn pack_bayer(mosaic: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    let [n, c, h, w] = mosaic.shape();
    if n != 1 || c != 1 || h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("Bayer packing needs (1, 1, even, even), got {:?}", mosaic.shape()));
    }
    let mut p = Tensor4::zeros([1, 4, h / 2, w / 2]);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                p.set(0, k, y, x, mosaic.at(0, 0, 2 * y + dy, 2 * x + dx));
            }
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub degraded: Tensor4<f32>,
    pub ground_truth: Tensor4<f32>,
}

impl ImagePair {
    pub fn new(degraded: Tensor4<f32>, ground_truth: Tensor4<f32>, variant: Variant) -> Result<Self> {
        let [dn, dc, dh, dw] = degraded.shape();
        let [gn, gc, gh, gw] = ground_truth.shape();
        let r = variant.upscale();
        if dn != 1 || gn != 1 || dc != variant.in_channels() || gc != 3 || dh * r != gh || dw * r != gw {
            return shape_err(format!(
                "{variant:?} pair needs degraded (1, {}, h, w) and target (1, 3, h*{r}, w*{r}), got {:?} / {:?}",
                variant.in_channels(),
                degraded.shape(),
                ground_truth.shape()
            ));
        }
        Ok(Self { degraded, ground_truth })
    }
}

/// Knobs of the synthetic degradations; `None` draws from the default range.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DegradeParams {
    /// LLE gamma (default U[2, 5]).
    pub gamma: Option<f64>,
    /// Noise standard deviation (LLE 0.02, ISP 0.01, UIE none).
    pub noise: Option<f64>,
}

/// Haze colour added by the underwater degradation.
pub const UIE_HAZE_TINT: [f64; 3] = [0.1, 0.6, 0.5];

pub fn synth_degrade(clean: &Tensor4<f32>, task: Variant, seed: u64) -> Result<ImagePair> {
    synth_degrade_with(clean, task, seed, &DegradeParams::default())
}

pub fn synth_degrade_with(clean: &Tensor4<f32>, task: Variant, seed: u64, params: &DegradeParams) -> Result<ImagePair> {
    if clean.n() != 1 || clean.c() != 3 {
        return shape_err(format!("clean image must be (1, 3, h, w), got {:?}", clean.shape()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let add_noise = |t: &mut Tensor4<f32>, sigma: f64, rng: &mut ChaCha8Rng| {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for v in t.data_mut() {
                *v = ((*v as f64) + normal.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
    };
    let degraded = match task {
        Variant::Lle => {
            let gamma = params.gamma.unwrap_or_else(|| rng.gen_range(2.0..5.0));
            let mut d = clean.map(|v| ((v as f64).powf(gamma)) as f32);
            add_noise(&mut d, params.noise.unwrap_or(0.02), &mut rng);
            d
        }
        Variant::Uie => {
            let att = [rng.gen_range(0.3..0.5), rng.gen_range(0.8..1.0), rng.gen_range(0.7..0.9)];
            let haze: f64 = rng.gen_range(0.1..0.3);
            let mut d = clean.clone();
            for (ch, a) in att.iter().enumerate() {
                for v in d.plane_mut(0, ch) {
                    *v = ((*v as f64) * a * (1.0 - haze) + haze * UIE_HAZE_TINT[ch]).clamp(0.0, 1.0) as f32;
                }
            }
            add_noise(&mut d, params.noise.unwrap_or(0.0), &mut rng);
            d
        }
        Variant::Isp => {
            let mut d = pack_bayer(&mosaic_rggb(clean)?)?;
            add_noise(&mut d, params.noise.unwrap_or(0.01), &mut rng);
            d
        }
    };
    ImagePair::new(degraded, clean.clone(), task)
}

/// A smooth random scene: a two-colour gradient with Gaussian blobs,
/// rectangles and a faint stripe texture.
pub fn synth_clean(h: usize, w: usize, seed: u64) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.gen(), rng.gen(), rng.gen()] };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = vec![[0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 / w as f64 - 0.5) * ca + (y as f64 / h as f64 - 0.5) * sa + 0.5;
            let u = u.clamp(0.0, 1.0);
            for ch in 0..3 {
                img[y * w + x][ch] = c0[ch] * (1.0 - u) + c1[ch] * u;
            }
        }
    }
    for _ in 0..rng.gen_range(3..7) {
        let col = color(&mut rng);
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(0.08..0.3) * h.min(w) as f64;
        let alpha: f64 = rng.gen_range(0.4..0.9);
        for y in 0..h {
            for x in 0..w {
                let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (r * r);
                let a = alpha * (-d2 / 2.0).exp();
                for ch in 0..3 {
                    let p = &mut img[y * w + x][ch];
                    *p = *p * (1.0 - a) + col[ch] * a;
                }
            }
        }
    }
    for _ in 0..rng.gen_range(1..4) {
        let col = color(&mut rng);
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = ((y0 + rng.gen_range(1..=h / 2 + 1)).min(h), (x0 + rng.gen_range(1..=w / 2 + 1)).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                img[y * w + x] = col;
            }
        }
    }
    let freq: f64 = rng.gen_range(0.2..0.8);
    let amp: f64 = rng.gen_range(0.0..0.06);
    let mut t = Tensor4::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let stripe = amp * ((x as f64 * ca + y as f64 * sa) * freq).sin();
            for ch in 0..3 {
                t.set(0, ch, y, x, (img[y * w + x][ch] + stripe).clamp(0.0, 1.0) as f32);
            }
        }
    }
    t
}

/// Deterministic pairs: sample `i` uses clean seed and degradation seed
/// derived from `(seed, i)`.
pub fn synthetic_pairs(task: Variant, count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<ImagePair>> {
    (0..count)
        .map(|i| {
            let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            synth_degrade(&synth_clean(h, w, base), task, base ^ 0x5DEE_CE66_D1CE_4E5B)
        })
        .collect()
}

pub fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm"))
}

/// Image files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| Error::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_file() && is_image_path(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads a model input: RGB for LLE/UIE; for ISP a single-plane RGGB
/// mosaic, packed into four half-resolution planes.
pub fn load_input(path: &Path, variant: Variant) -> Result<Tensor4<f32>> {
    let img = load_image(path)?;
    match variant {
        Variant::Isp => pack_bayer(&img),
        _ if img.c() == 3 => Ok(img),
        _ => shape_err(format!("{}: expected an RGB image", path.display())),
    }
}

/// Pairs from `dir/input/*` and `dir/target/*`, matched by file stem.
pub fn load_pairs(dir: &Path, variant: Variant) -> Result<Vec<ImagePair>> {
    let inputs = list_images(&dir.join("input"))?;
    let targets = list_images(&dir.join("target"))?;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_os_string());
    let mut pairs = Vec::new();
    for inp in &inputs {
        let Some(tgt) = targets.iter().find(|t| stem(t) == stem(inp)) else {
            return Err(Error::Argument(format!("no target for {}", inp.display())));
        };
        pairs.push(ImagePair::new(load_input(inp, variant)?, load_image(tgt)?, variant)?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_ppm_is_zero() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([0u8; 12]);
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), [1, 3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ppm_round_trip_is_byte_identical() {
        let mut bytes = b"P6\n3 2\n255\n".to_vec();
        bytes.extend((0..18u8).map(|v| v.wrapping_mul(37)));
        let t = decode_image(&bytes).unwrap();
        assert_eq!(encode_netpbm(&t).unwrap(), bytes);
        let mut gray = b"P5\n4 1\n255\n".to_vec();
        gray.extend([0, 1, 128, 255]);
        assert_eq!(encode_netpbm(&decode_image(&gray).unwrap()).unwrap(), gray);
    }

    #[test]
    fn quantization_law() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend([128, 128, 128]);
        let t = decode_image(&bytes).unwrap();
        assert!((t.data()[0] - 0.501_960_8).abs() < 1e-6);
        assert_eq!(quantize(128.0 / 255.0), 128);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.1), 0);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6 # c\n1 # w\n1\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert!(decode_image(&bytes).is_ok());
        let mut trunc = b"P6\n2 2\n255\n".to_vec();
        trunc.extend([0; 5]);
        match decode_image(&trunc) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, trunc.len()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_image(b"P6\n2 x"), Err(Error::Format { offset: 5, .. })));
    }

    #[test]
    fn png_round_trip() {
        let t = synth_clean(5, 7, 3).map(|v| quantize(v) as f32 / 255.0);
        let back = decode_image(&encode_png(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn lle_identity_degradation() {
        let clean = synth_clean(8, 8, 1);
        let p = DegradeParams {
            gamma: Some(1.0),
            noise: Some(0.0),
        };
        let pair = synth_degrade_with(&clean, Variant::Lle, 5, &p).unwrap();
        assert_eq!(pair.degraded, clean);
    }

    #[test]
    fn lle_darkens() {
        let clean = synth_clean(16, 16, 2);
        let pair = synth_degrade(&clean, Variant::Lle, 9).unwrap();
        let mean = |t: &Tensor4<f32>| t.data().iter().sum::<f32>() / t.len() as f32;
        assert!(mean(&pair.degraded) < mean(&clean));
    }

    #[test]
    fn isp_pack_of_constant() {
        let clean = Tensor4::full([1, 3, 6, 8], 0.3f32);
        let packed = pack_bayer(&mosaic_rggb(&clean).unwrap()).unwrap();
        assert_eq!(packed.shape(), [1, 4, 3, 4]);
        assert!(packed.data().iter().all(|&v| v == 0.3));
        let pair = synth_degrade(&clean, Variant::Isp, 1).unwrap();
        assert_eq!(pair.degraded.shape(), [1, 4, 3, 4]);
        assert!(mosaic_rggb(&Tensor4::zeros([1, 3, 3, 4])).is_err());
    }

    #[test]
    fn bayer_layout() {
        let mut rgb = Tensor4::zeros([1, 3, 2, 2]);
        for ch in 0..3 {
            for v in rgb.plane_mut(0, ch) {
                *v = (ch + 1) as f32 / 10.0;
            }
        }
        let p = pack_bayer(&mosaic_rggb(&rgb).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.1, 0.2, 0.2, 0.3]);
    }

    #[test]
    fn degradations_are_deterministic_and_in_range() {
        let clean = synth_clean(12, 12, 4);
        for task in [Variant::Lle, Variant::Uie, Variant::Isp] {
            let a = synth_degrade(&clean, task, 42).unwrap();
            let b = synth_degrade(&clean, task, 42).unwrap();
            assert_eq!(a, b);
            assert!(a.degraded.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let uie = synth_degrade(&clean, Variant::Uie, 3).unwrap();
        let mean = |ch| uie.degraded.plane(0, ch).iter().sum::<f32>();
        assert!(mean(0) < mean(1));
        assert_eq!(synthetic_pairs(Variant::Lle, 3, 8, 8, 1).unwrap(), synthetic_pairs(Variant::Lle, 3, 8, 8, 1).unwrap());
    }
}
