//! Full enhancement network in training and fused form.
//!
//! Topology: `MBRConv5×5 → PReLU → (MBRConv3×3 → FST) ×2 → HDPA → MBRConv3×3`,
//! followed by a ×2 pixel shuffle for the ISP variant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{count, join, Grads, Role, Visit, VisitFn};
use crate::real::Real;
use crate::reparam::{FusedConv, MbrCache, MbrConv, Mode};
use crate::tensor::{
    global_avg_pool, global_max_pool, global_max_pool_indexed, mul, pixel_shuffle, pixel_unshuffle, prelu, sigmoid, Kernel, Tensor4,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Low-light enhancement, RGB → RGB.
    Lle,
    /// Underwater enhancement, RGB → RGB.
    Uie,
    /// Packed RGGB Bayer planes (half resolution) → RGB.
    Isp,
}

impl Variant {
    pub fn in_channels(self) -> usize {
        match self {
            Variant::Isp => 4,
            _ => 3,
        }
    }

    /// Channels produced by the head convolution (before any pixel shuffle).
    pub fn head_channels(self) -> usize {
        match self {
            Variant::Isp => 12,
            _ => 3,
        }
    }

    pub fn upscale(self) -> usize {
        match self {
            Variant::Isp => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lle" => Ok(Variant::Lle),
            "uie" => Ok(Variant::Uie),
            "isp" => Ok(Variant::Isp),
            other => Err(Error::Argument(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 12,
            variant: Variant::Lle,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Train,
    Fused,
}

/// Anything that maps a feature map through a (possibly multi-branch)
/// convolution at inference time.
pub trait ConvLayer<T: Real>: Visit<T> + Clone {
    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>>;
}

impl<T: Real> ConvLayer<T> for MbrConv<T> {
    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.forward_eval(x)
    }
}

impl<T: Real> ConvLayer<T> for FusedConv<T> {
    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.forward(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prelu<T = f32> {
    pub slope: Vec<T>,
}

impl<T: Real> Prelu<T> {
    pub fn new(c: usize) -> Self {
        Self {
            slope: vec![T::of(0.25); c],
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        prelu(x, &self.slope)
    }

    /// Returns `(dx, dslope)`.
    pub fn backward(&self, x: &Tensor4<T>, g: &Tensor4<T>) -> (Tensor4<T>, Vec<T>) {
        let mut dx = g.clone();
        let mut dslope = vec![0f64; self.slope.len()];
        for s in 0..x.n() {
            for (ch, &a) in self.slope.iter().enumerate() {
                let xp = x.plane(s, ch);
                for ((d, &xv), &gv) in dx.plane_mut(s, ch).iter_mut().zip(xp).zip(g.plane(s, ch)) {
                    if xv < T::zero() {
                        *d = a * gv;
                        dslope[ch] += gv.wide() * xv.wide();
                    }
                }
            }
        }
        (dx, dslope.into_iter().map(T::of).collect())
    }
}

/// Feature self-transform `scale · x⊙x + bias` (scalar scale, per-channel bias).
#[derive(Clone, Debug, PartialEq)]
pub struct FstParams<T = f32> {
    pub scale: T,
    pub bias: Vec<T>,
}

impl<T: Real> FstParams<T> {
    pub fn new(c: usize) -> Self {
        Self {
            scale: T::one(),
            bias: vec![T::zero(); c],
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        fst_forward(self, x)
    }

    /// Returns `(dx, dscale, dbias)`.
    pub fn backward(&self, x: &Tensor4<T>, g: &Tensor4<T>) -> (Tensor4<T>, T, Vec<T>) {
        let two_s = 2.0 * self.scale.wide();
        let mut dx = Tensor4::zeros(x.shape());
        let mut dscale = 0f64;
        let mut dbias = vec![0f64; x.c()];
        for s in 0..x.n() {
            for ch in 0..x.c() {
                let xp = x.plane(s, ch);
                let gp = g.plane(s, ch);
                for ((d, xv), gv) in dx.plane_mut(s, ch).iter_mut().zip(xp).zip(gp) {
                    let (xv, gv) = (xv.wide(), gv.wide());
                    *d = T::of(two_s * xv * gv);
                    dscale += gv * xv * xv;
                    dbias[ch] += gv;
                }
            }
        }
        (dx, T::of(dscale), dbias.into_iter().map(T::of).collect())
    }
}

pub fn fst_forward<T: Real>(p: &FstParams<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    if p.bias.len() != x.c() {
        return shape_err(format!("FST bias has {} channels, input {}", p.bias.len(), x.c()));
    }
    let s = p.scale;
    let mut out = x.clone();
    for n in 0..x.n() {
        for (ch, &b) in p.bias.iter().enumerate() {
            for v in out.plane_mut(n, ch) {
                *v = s * (*v * *v) + b;
            }
        }
    }
    Ok(out)
}

/// Hierarchical dual-path attention: a global (average-pooled) channel gate,
/// then a local (max-pooled) gate computed on the globally gated features;
/// their product gates the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Hdpa<L> {
    pub global: L,
    pub local: L,
}

impl<L> Hdpa<L> {
    pub fn forward<T: Real>(&self, f: &Tensor4<T>) -> Result<Tensor4<T>>
    where
        L: ConvLayer<T>,
    {
        Ok(self.forward_maps(f)?.0)
    }

    /// Output plus the two attention maps `(A_g, A_l)`.
    pub fn forward_maps<T: Real>(&self, f: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)>
    where
        L: ConvLayer<T>,
    {
        let a_g = sigmoid(&self.global.infer(&global_avg_pool(f))?);
        // max(a·f) = a·max(f) for a per-channel a ≥ 0, exactly: rounding is
        // monotone. Saves materializing the globally gated features.
        let q = mul(&global_max_pool(f), &a_g)?;
        let a_l = sigmoid(&self.local.infer(&q)?);
        let gate = mul(&a_g, &a_l)?;
        Ok((mul(f, &gate)?, a_g, a_l))
    }
}

pub fn hdpa_forward<T: Real, L: ConvLayer<T>>(p: &Hdpa<L>, f: &Tensor4<T>) -> Result<Tensor4<T>> {
    p.forward(f)
}

#[derive(Clone, Debug)]
struct HdpaCache<T> {
    f: Tensor4<T>,
    a_g: Tensor4<T>,
    a_l: Tensor4<T>,
    max_idx: Vec<usize>,
    global: MbrCache<T>,
    local: MbrCache<T>,
}

impl<T: Real> Hdpa<MbrConv<T>> {
    fn forward_train(&mut self, f: &Tensor4<T>) -> Result<(Tensor4<T>, HdpaCache<T>)> {
        let (zg, global) = self.global.forward_train(&global_avg_pool(f))?;
        let a_g = sigmoid(&zg);
        let wg = mul(f, &a_g)?;
        let (q, max_idx) = global_max_pool_indexed(&wg);
        let (zl, local) = self.local.forward_train(&q)?;
        let a_l = sigmoid(&zl);
        let out = mul(f, &mul(&a_g, &a_l)?)?;
        Ok((
            out,
            HdpaCache {
                f: f.clone(),
                a_g,
                a_l,
                max_idx,
                global,
                local,
            },
        ))
    }

    /// Returns `(df, grads(global), grads(local))`.
    fn backward(&self, c: &HdpaCache<T>, g: &Tensor4<T>) -> Result<(Tensor4<T>, Grads<T>, Grads<T>)> {
        let [n, ch, h, w] = c.f.shape();
        let hw = (h * w) as f64;
        let mut df = Tensor4::zeros(c.f.shape());
        let mut d_ag = Tensor4::<T>::zeros([n, ch, 1, 1]);
        let mut d_zl = Tensor4::<T>::zeros([n, ch, 1, 1]);
        for s in 0..n {
            for k in 0..ch {
                let ag = c.a_g.at(s, k, 0, 0).wide();
                let al = c.a_l.at(s, k, 0, 0).wide();
                let gate = ag * al;
                let fp = c.f.plane(s, k);
                let mut sum = 0f64;
                for ((d, fv), gv) in df.plane_mut(s, k).iter_mut().zip(fp).zip(g.plane(s, k)) {
                    sum += gv.wide() * fv.wide();
                    *d = T::of(gv.wide() * gate);
                }
                d_ag.set(s, k, 0, 0, T::of(sum * al));
                d_zl.set(s, k, 0, 0, T::of(sum * ag * al * (1.0 - al)));
            }
        }
        let (dq, local_grads) = self.local.backward(&c.local, &d_zl, true)?;
        let dq = dq.expect("input gradient requested");
        let mut d_zg = Tensor4::<T>::zeros([n, ch, 1, 1]);
        for s in 0..n {
            for k in 0..ch {
                let ag = c.a_g.at(s, k, 0, 0).wide();
                let dqv = dq.at(s, k, 0, 0).wide();
                let pos = c.max_idx[s * ch + k];
                // wg = f · a_g routes the max-pool gradient to one position.
                let fv = c.f.plane(s, k)[pos].wide();
                let plane = df.plane_mut(s, k);
                plane[pos] = T::of(plane[pos].wide() + dqv * ag);
                let dag = d_ag.at(s, k, 0, 0).wide() + dqv * fv;
                d_zg.set(s, k, 0, 0, T::of(dag * ag * (1.0 - ag)));
            }
        }
        let (dp, global_grads) = self.global.backward(&c.global, &d_zg, true)?;
        let dp = dp.expect("input gradient requested");
        for s in 0..n {
            for k in 0..ch {
                let share = dp.at(s, k, 0, 0).wide() / hw;
                for v in df.plane_mut(s, k) {
                    *v = T::of(v.wide() + share);
                }
            }
        }
        Ok((df, global_grads, local_grads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<L, T = f32> {
    pub conv: L,
    pub fst: FstParams<T>,
}

/// The network over a given convolution layer type: [`MbrConv`] for the
/// training form, [`FusedConv`] for the inference form.
#[derive(Clone, Debug, PartialEq)]
pub struct Net<L, T = f32> {
    pub config: ModelConfig,
    pub stem: L,
    pub stem_act: Prelu<T>,
    pub body: [Stage<L, T>; 2],
    pub attn: Hdpa<L>,
    pub head: L,
}

pub type TrainNet<T = f32> = Net<MbrConv<T>, T>;
pub type FusedNet<T = f32> = Net<FusedConv<T>, T>;

impl<T: Real, L: ConvLayer<T>> Net<L, T> {
    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let want = self.config.variant.in_channels();
        if x.c() != want {
            return shape_err(format!("{:?} model expects {want} input channels, got {}", self.config.variant, x.c()));
        }
        Ok(())
    }

    /// Eval-mode forward without the output clamp.
    /// Convolution layers with their parameter prefixes, in visiting order.
    pub fn layers(&self) -> Vec<(String, &L)> {
        vec![
            ("stem".to_string(), &self.stem),
            ("body0.conv".to_string(), &self.body[0].conv),
            ("body1.conv".to_string(), &self.body[1].conv),
            ("attn.global".to_string(), &self.attn.global),
            ("attn.local".to_string(), &self.attn.local),
            ("head".to_string(), &self.head),
        ]
    }

    pub fn infer_raw(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut h = self.stem_act.forward(&self.stem.infer(x)?)?;
        for stage in &self.body {
            h = stage.fst.forward(&stage.conv.infer(&h)?)?;
        }
        h = self.attn.forward(&h)?;
        let out = self.head.infer(&h)?;
        match self.config.variant.upscale() {
            1 => Ok(out),
            r => pixel_shuffle(&out, r),
        }
    }

    /// Inference: eval-mode forward, clamped to `[0, 1]`.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.infer_raw(x)?.clamp01())
    }
}

impl<T: Real, L: ConvLayer<T>> Visit<T> for Net<L, T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        let c = self.config.channels;
        self.stem.visit(&join(prefix, "stem"), f);
        f(&join(prefix, "stem_act.slope"), &[c], &mut self.stem_act.slope, Role::Trainable);
        for (i, stage) in self.body.iter_mut().enumerate() {
            let p = join(prefix, &format!("body{i}"));
            stage.conv.visit(&join(&p, "conv"), f);
            f(&join(&p, "fst.scale"), &[1], std::slice::from_mut(&mut stage.fst.scale), Role::Trainable);
            f(&join(&p, "fst.bias"), &[c], &mut stage.fst.bias, Role::Trainable);
        }
        self.attn.global.visit(&join(prefix, "attn.global"), f);
        self.attn.local.visit(&join(prefix, "attn.local"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

/// Activations kept by [`TrainNet::forward_train`].
#[derive(Clone, Debug)]
pub struct NetCache<T> {
    stem: MbrCache<T>,
    stem_out: Tensor4<T>,
    body: Vec<(MbrCache<T>, Tensor4<T>)>,
    attn: HdpaCache<T>,
    head: MbrCache<T>,
}

impl<T: Real> TrainNet<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        assert!(config.channels >= 1, "channel count must be >= 1");
        let c = config.channels;
        let v = config.variant;
        let stem = MbrConv::new(5, v.in_channels(), c, rng);
        let body = [0, 1].map(|_| Stage {
            conv: MbrConv::new(3, c, c, rng),
            fst: FstParams::new(c),
        });
        let attn = Hdpa {
            global: MbrConv::new(1, c, c, rng),
            local: MbrConv::new(1, c, c, rng),
        };
        let head = MbrConv::new(3, c, v.head_channels(), rng);
        Self {
            config,
            stem,
            stem_act: Prelu::new(c),
            body,
            attn,
            head,
        }
    }

    fn blocks_mut(&mut self) -> [&mut MbrConv<T>; 6] {
        let [b0, b1] = &mut self.body;
        [
            &mut self.stem,
            &mut b0.conv,
            &mut b1.conv,
            &mut self.attn.global,
            &mut self.attn.local,
            &mut self.head,
        ]
    }

    fn blocks(&self) -> [&MbrConv<T>; 6] {
        [
            &self.stem,
            &self.body[0].conv,
            &self.body[1].conv,
            &self.attn.global,
            &self.attn.local,
            &self.head,
        ]
    }

    pub fn is_tracked(&self) -> bool {
        self.blocks().iter().all(|b| b.is_tracked())
    }

    /// Mark running statistics as initialized (used when restoring them).
    pub(crate) fn set_tracked(&mut self) {
        for b in self.blocks_mut() {
            for br in &mut b.branches {
                br.bn.tracked = true;
            }
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.blocks().iter().all(|b| b.w_pre.is_some())
    }

    /// Incremental weight stage: freeze every block's integration weight.
    pub fn freeze_all(&mut self) {
        for b in self.blocks_mut() {
            b.freeze();
        }
    }

    /// Training-mode forward (batch statistics, no clamp).
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, NetCache<T>)> {
        self.check_input(x)?;
        let (stem_out, stem) = self.stem.forward_train(x)?;
        let mut h = self.stem_act.forward(&stem_out)?;
        let mut body = Vec::with_capacity(2);
        for stage in &mut self.body {
            let (y, cache) = stage.conv.forward_train(&h)?;
            h = stage.fst.forward(&y)?;
            body.push((cache, y));
        }
        let (a, attn) = self.attn.forward_train(&h)?;
        let (out, head) = self.head.forward_train(&a)?;
        let out = match self.config.variant.upscale() {
            1 => out,
            r => pixel_shuffle(&out, r)?,
        };
        Ok((
            out,
            NetCache {
                stem,
                stem_out,
                body,
                attn,
                head,
            },
        ))
    }

    /// Gradients of every trainable tensor, in visiting order.
    pub fn backward(&self, cache: &NetCache<T>, grad_out: &Tensor4<T>) -> Result<Grads<T>> {
        let g = match self.config.variant.upscale() {
            1 => grad_out.clone(),
            r => pixel_unshuffle(grad_out, r)?,
        };
        let (g, head_grads) = self.head.backward(&cache.head, &g, true)?;
        let (mut g, global_grads, local_grads) = self.attn.backward(&cache.attn, &g.expect("input gradient requested"))?;
        let mut body_grads: Vec<(Grads<T>, T, Vec<T>)> = Vec::with_capacity(2);
        for (stage, (conv_cache, conv_out)) in self.body.iter().zip(&cache.body).rev() {
            let (gy, dscale, dbias) = stage.fst.backward(conv_out, &g);
            let (gx, grads) = stage.conv.backward(conv_cache, &gy, true)?;
            g = gx.expect("input gradient requested");
            body_grads.push((grads, dscale, dbias));
        }
        body_grads.reverse();
        let (g, dslope) = self.stem_act.backward(&cache.stem_out, &g);
        let (_, stem_grads) = self.stem.backward(&cache.stem, &g, false)?;

        let mut out = stem_grads;
        out.push(dslope);
        for (grads, dscale, dbias) in body_grads {
            out.extend(grads);
            out.push(vec![dscale]);
            out.push(dbias);
        }
        out.extend(global_grads);
        out.extend(local_grads);
        out.extend(head_grads);
        Ok(out)
    }

    /// Collapse every multi-branch block into a single convolution.
    pub fn fuse(&self) -> Result<FusedNet<T>> {
        Ok(Net {
            config: self.config.clone(),
            stem: self.stem.fuse()?,
            stem_act: self.stem_act.clone(),
            body: [
                Stage {
                    conv: self.body[0].conv.fuse()?,
                    fst: self.body[0].fst.clone(),
                },
                Stage {
                    conv: self.body[1].conv.fuse()?,
                    fst: self.body[1].fst.clone(),
                },
            ],
            attn: Hdpa {
                global: self.attn.global.fuse()?,
                local: self.attn.local.fuse()?,
            },
            head: self.head.fuse()?,
        })
    }
}

impl<T: Real> FusedNet<T> {
    /// A fused network with every weight zero.
    pub fn zeros(config: ModelConfig) -> Self {
        let c = config.channels;
        let v = config.variant;
        Self {
            stem: FusedConv::zeros(c, v.in_channels(), 5),
            stem_act: Prelu::new(c),
            body: [0, 1].map(|_| Stage {
                conv: FusedConv::zeros(c, c, 3),
                fst: FstParams::new(c),
            }),
            attn: Hdpa {
                global: FusedConv::zeros(c, c, 1),
                local: FusedConv::zeros(c, c, 1),
            },
            head: FusedConv::zeros(v.head_channels(), c, 3),
            config,
        }
    }
}

/// Either form of the network.
#[derive(Clone, Debug, PartialEq)]
pub enum MobileIeNet<T = f32> {
    Train(TrainNet<T>),
    Fused(FusedNet<T>),
}

impl<T: Real> MobileIeNet<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        MobileIeNet::Train(TrainNet::new(config, rng))
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            MobileIeNet::Train(n) => &n.config,
            MobileIeNet::Fused(n) => &n.config,
        }
    }

    pub fn form(&self) -> Form {
        match self {
            MobileIeNet::Train(_) => Form::Train,
            MobileIeNet::Fused(_) => Form::Fused,
        }
    }

    /// Train mode: batch statistics, unclamped. Eval mode: running
    /// statistics (or fused weights), clamped to `[0, 1]`.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        match (self, mode) {
            (MobileIeNet::Train(n), Mode::Train) => Ok(n.forward_train(x)?.0),
            (MobileIeNet::Fused(_), Mode::Train) => {
                Err(Error::State("a fused network has no training mode".into()))
            }
            (net, Mode::Eval) => net.infer(x),
        }
    }

    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self {
            MobileIeNet::Train(n) => n.infer(x),
            MobileIeNet::Fused(n) => n.infer(x),
        }
    }

    /// Eval-mode forward without the final clamp.
    pub fn infer_raw(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self {
            MobileIeNet::Train(n) => n.infer_raw(x),
            MobileIeNet::Fused(n) => n.infer_raw(x),
        }
    }

    pub fn fuse(&self) -> Result<MobileIeNet<T>> {
        fuse_network(self)
    }

    pub fn param_count(&mut self) -> ParamAudit {
        match self {
            MobileIeNet::Train(n) => ParamAudit::of(n),
            MobileIeNet::Fused(n) => ParamAudit::of(n),
        }
    }
}

impl<T: Real> Visit<T> for MobileIeNet<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        match self {
            MobileIeNet::Train(n) => n.visit(prefix, f),
            MobileIeNet::Fused(n) => n.visit(prefix, f),
        }
    }
}

/// A convolution kernel picked out for analysis.
#[derive(Clone, Debug)]
pub struct NamedKernel<T> {
    pub name: String,
    pub kernel: Kernel<T>,
    /// 1×1 weight that mixes channels: the composed IWO weight of a
    /// training-form block, or any 1×1 layer of a fused network.
    pub integration: bool,
}

/// Every kernel of the network: branch kernels plus the composed 1×1
/// weight per block for the training form, the layer kernels when fused.
pub fn named_kernels<T: Real>(net: &MobileIeNet<T>) -> Vec<NamedKernel<T>> {
    let mut out = Vec::new();
    match net {
        MobileIeNet::Train(n) => {
            for (name, block) in n.layers() {
                for (i, b) in block.branches.iter().enumerate() {
                    out.push(NamedKernel {
                        name: format!("{name}.branch{i}"),
                        kernel: b.kernel.clone(),
                        integration: false,
                    });
                }
                out.push(NamedKernel {
                    name: format!("{name}.w_final"),
                    kernel: block.effective_weight(),
                    integration: true,
                });
            }
        }
        MobileIeNet::Fused(n) => {
            for (name, layer) in n.layers() {
                out.push(NamedKernel {
                    name,
                    kernel: layer.kernel.clone(),
                    integration: layer.kernel.size() == 1,
                });
            }
        }
    }
    out
}

pub fn fuse_network<T: Real>(net: &MobileIeNet<T>) -> Result<MobileIeNet<T>> {
    match net {
        MobileIeNet::Train(n) => Ok(MobileIeNet::Fused(n.fuse()?)),
        MobileIeNet::Fused(_) => Err(Error::State("network is already fused".into())),
    }
}

/// Model parameters per layer (running statistics excluded; a frozen IWO
/// prior counts).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    pub layers: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamAudit {
    pub fn of<T: Real, L: ConvLayer<T>>(net: &mut Net<L, T>) -> Self {
        let roles = [Role::Trainable, Role::Frozen];
        let c = net.config.channels;
        let mut layers = vec![
            ("stem".to_string(), count(&mut net.stem, &roles)),
            ("stem_act".to_string(), c),
        ];
        for (i, stage) in net.body.iter_mut().enumerate() {
            layers.push((format!("body{i}.conv"), count(&mut stage.conv, &roles)));
            layers.push((format!("body{i}.fst"), 1 + stage.fst.bias.len()));
        }
        layers.push(("attn.global".to_string(), count(&mut net.attn.global, &roles)));
        layers.push(("attn.local".to_string(), count(&mut net.attn.local, &roles)));
        layers.push(("head".to_string(), count(&mut net.head, &roles)));
        let total = layers.iter().map(|(_, n)| n).sum();
        Self { layers, total }
    }
}

/// Closed-form fused parameter count.
pub fn fused_param_formula(config: &ModelConfig) -> usize {
    let c = config.channels;
    let cin = config.variant.in_channels();
    let hc = config.variant.head_channels();
    let stem = 25 * cin * c + c;
    let act = c;
    let body = 2 * (9 * c * c + c);
    let fst = 2 * (1 + c);
    let attn = 2 * (c * c + c);
    let head = 9 * c * hc + hc;
    stem + act + body + fst + attn + head
}
