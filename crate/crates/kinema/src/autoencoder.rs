//! The 3D convolutional autoencoder and its latent space.
//!
//! All encoder/decoder convolutions use replicate ("repeat") padding on every
//! axis, keeping the mapping shift-equivariant away from clip edges — the
//! property long-video decoding relies on. Compression factors are `f_s`
//! spatially and `f_t` temporally; the latent space is standardized post hoc
//! with per-channel statistics instead of a KL or VQ term.

use ndarray::{Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use kinema_grad::conv::{Conv3dSpec, PadMode};
use kinema_grad::nn::{Conv3d, GroupNorm, Params};
use kinema_grad::{Tape, Tensor};

use crate::data::{sample_clip, VideoDataset, VideoTensor};
use crate::error::{Error, Result};
use crate::Arr;

/// An encoded video: shape `(h, w, l, c)` with `h = H/f_s`, `w = W/f_s`,
/// `l = L/f_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub codes: Array4<f64>,
}

impl LatentVideo {
    pub fn new(codes: Array4<f64>) -> Self {
        Self { codes }
    }

    /// `(h, w, l, c)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.codes.dim()
    }

    pub fn num_frames(&self) -> usize {
        self.codes.dim().2
    }

    /// Repack to the network layout `[c, l, h, w]`.
    pub fn to_net(&self) -> Arr {
        let (h, w, l, c) = self.codes.dim();
        let mut out = ArrayD::zeros(IxDyn(&[c, l, h, w]));
        for ((y, x, t, ch), &v) in self.codes.indexed_iter() {
            out[[ch, t, y, x]] = v;
        }
        out
    }

    /// Inverse of [`LatentVideo::to_net`]; `net` is `[c, l, h, w]`.
    pub fn from_net(net: &Arr) -> Result<Self> {
        let s = net.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("latent must be rank 4, got {s:?}")));
        }
        let (c, l, h, w) = (s[0], s[1], s[2], s[3]);
        let mut codes = Array4::zeros((h, w, l, c));
        for ((ch, t, y, x), &v) in net
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .indexed_iter()
        {
            codes[[y, x, t, ch]] = v;
        }
        Ok(Self { codes })
    }

    /// Temporal slice `[start, start + len)`.
    pub fn frames(&self, start: usize, len: usize) -> LatentVideo {
        LatentVideo::new(
            self.codes
                .slice(ndarray::s![.., .., start..start + len, ..])
                .to_owned(),
        )
    }
}

/// Pluggable perceptual loss. The default configuration carries none; the
/// variant exists so a learned metric can be attached without touching the
/// training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Perceptual {
    #[default]
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AEConfig {
    /// Spatial compression factor (power of two).
    pub f_s: usize,
    /// Temporal compression factor (power of two).
    pub f_t: usize,
    /// Latent channels.
    pub c: usize,
    /// Channels after the stem convolution.
    pub base_width: usize,
    /// Weight of the generator adversarial term in the encoder/decoder loss.
    pub adv_weight: f64,
    pub perceptual: Perceptual,
}

impl Default for AEConfig {
    fn default() -> Self {
        Self { f_s: 8, f_t: 4, c: 4, base_width: 16, adv_weight: 0.1, perceptual: Perceptual::Off }
    }
}

fn log2_exact(v: usize, what: &str) -> Result<usize> {
    if v == 0 || !v.is_power_of_two() {
        return Err(Error::config(format!("{what} must be a power of two, got {v}")));
    }
    Ok(v.trailing_zeros() as usize)
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        log2_exact(self.f_s, "f_s")?;
        log2_exact(self.f_t, "f_t")?;
        if self.c == 0 {
            return Err(Error::config("latent channels c must be >= 1"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width must be >= 1"));
        }
        if self.adv_weight < 0.0 {
            return Err(Error::config("adv_weight must be >= 0"));
        }
        Ok(())
    }

    pub fn spatial_downs(&self) -> usize {
        self.f_s.trailing_zeros() as usize
    }

    pub fn temporal_downs(&self) -> usize {
        self.f_t.trailing_zeros() as usize
    }

    /// Down steps: enough to realize the larger of the two factors. Step `i`
    /// halves space while `i <` spatial downs and time while `i <` temporal
    /// downs.
    pub fn n_down(&self) -> usize {
        self.spatial_downs().max(self.temporal_downs())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * (1 << level.min(2))
    }
}

/// Group count for a normalization layer: 8 when it divides the width, else
/// the largest power of two that does.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = 8;
    while g > 1 && !channels.is_multiple_of(g) {
        g /= 2;
    }
    g
}

const RP: fn(usize, usize, usize) -> Conv3dSpec = |st, sh, sw| Conv3dSpec {
    stride: (st, sh, sw),
    pad: PadMode::Repeat,
};

// ---- residual block (plain group norm; the AE has no timestep) ----

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3d,
    norm2: GroupNorm,
    conv2: Conv3d,
    skip: Option<Conv3d>,
}

impl ResBlock {
    fn init(ps: &mut Params, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let norm1 = GroupNorm::init(ps, &format!("{name}.norm1"), norm_groups(cin), cin);
        let conv1 = Conv3d::init(ps, rng, &format!("{name}.conv1"), cin, cout, (3, 3, 3), RP(1, 1, 1));
        let norm2 = GroupNorm::init(ps, &format!("{name}.norm2"), norm_groups(cout), cout);
        let conv2 =
            Conv3d::init_zero(ps, rng, &format!("{name}.conv2"), cout, cout, (3, 3, 3), RP(1, 1, 1));
        let skip = (cin != cout)
            .then(|| Conv3d::init(ps, rng, &format!("{name}.skip"), cin, cout, (1, 1, 1), RP(1, 1, 1)));
        Self { norm1, conv1, norm2, conv2, skip }
    }

    fn forward<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>) -> Tensor<'t> {
        let h = self.norm1.forward(tape, ps, x).silu();
        let h = self.conv1.forward(tape, ps, h);
        let h = self.norm2.forward(tape, ps, h).silu();
        let h = self.conv2.forward(tape, ps, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(tape, ps, x),
            None => x,
        };
        h.add(s)
    }

    /// Temporal kernel taps contributed by this block (each conv is k=3 on
    /// the time axis).
    fn temporal_taps(&self) -> usize {
        2
    }
}

// ---- autoencoder ----

#[derive(Debug)]
pub struct Autoencoder3d {
    pub cfg: AEConfig,
    enc_stem: Conv3d,
    enc_levels: Vec<(ResBlock, Conv3d)>,
    enc_mid: ResBlock,
    enc_norm: GroupNorm,
    enc_head: Conv3d,
    dec_stem: Conv3d,
    dec_mid: ResBlock,
    /// Per up level: (temporal factor, spatial factor, conv, block).
    dec_levels: Vec<(usize, usize, Conv3d, ResBlock)>,
    dec_norm: GroupNorm,
    dec_head: Conv3d,
}

impl Autoencoder3d {
    /// Build the model, registering parameters under `ae.*`. Loading a
    /// checkpointed store first keeps its values.
    pub fn init(ps: &mut Params, rng: &mut ChaCha8Rng, cfg: &AEConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_down();
        let enc_stem = Conv3d::init(ps, rng, "ae.enc.stem", 3, cfg.width(0), (3, 3, 3), RP(1, 1, 1));
        let mut enc_levels = Vec::new();
        for i in 0..n {
            let (wi, wo) = (cfg.width(i), cfg.width(i + 1));
            let st = if i < cfg.temporal_downs() { 2 } else { 1 };
            let ss = if i < cfg.spatial_downs() { 2 } else { 1 };
            let block = ResBlock::init(ps, rng, &format!("ae.enc.l{i}.res"), wi, wi);
            let down = Conv3d::init(ps, rng, &format!("ae.enc.l{i}.down"), wi, wo, (3, 3, 3), RP(st, ss, ss));
            enc_levels.push((block, down));
        }
        let wlast = cfg.width(n);
        let enc_mid = ResBlock::init(ps, rng, "ae.enc.mid", wlast, wlast);
        let enc_norm = GroupNorm::init(ps, "ae.enc.out_norm", norm_groups(wlast), wlast);
        let enc_head = Conv3d::init(ps, rng, "ae.enc.head", wlast, cfg.c, (3, 3, 3), RP(1, 1, 1));

        let dec_stem = Conv3d::init(ps, rng, "ae.dec.stem", cfg.c, wlast, (3, 3, 3), RP(1, 1, 1));
        let dec_mid = ResBlock::init(ps, rng, "ae.dec.mid", wlast, wlast);
        let mut dec_levels = Vec::new();
        for i in (0..n).rev() {
            let (wi, wo) = (cfg.width(i + 1), cfg.width(i));
            let ut = if i < cfg.temporal_downs() { 2 } else { 1 };
            let us = if i < cfg.spatial_downs() { 2 } else { 1 };
            let conv = Conv3d::init(ps, rng, &format!("ae.dec.l{i}.conv"), wi, wo, (3, 3, 3), RP(1, 1, 1));
            let block = ResBlock::init(ps, rng, &format!("ae.dec.l{i}.res"), wo, wo);
            dec_levels.push((ut, us, conv, block));
        }
        let dec_norm = GroupNorm::init(ps, "ae.dec.out_norm", norm_groups(cfg.width(0)), cfg.width(0));
        let dec_head = Conv3d::init(ps, rng, "ae.dec.head", cfg.width(0), 3, (3, 3, 3), RP(1, 1, 1));

        Ok(Self {
            cfg: cfg.clone(),
            enc_stem,
            enc_levels,
            enc_mid,
            enc_norm,
            enc_head,
            dec_stem,
            dec_mid,
            dec_levels,
            dec_norm,
            dec_head,
        })
    }

    /// Differentiable encoder: `[B, 3, L, H, W] -> [B, c, L/f_t, H/f_s, W/f_s]`.
    pub fn encode_t<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>) -> Tensor<'t> {
        let mut h = self.enc_stem.forward(tape, ps, x);
        for (block, down) in &self.enc_levels {
            h = block.forward(tape, ps, h);
            h = down.forward(tape, ps, h);
        }
        h = self.enc_mid.forward(tape, ps, h);
        h = self.enc_norm.forward(tape, ps, h).silu();
        self.enc_head.forward(tape, ps, h)
    }

    /// Differentiable decoder (unclamped): `[B, c, l, h, w] -> [B, 3, l*f_t, ...]`.
    pub fn decode_t<'t>(&self, tape: &'t Tape, ps: &Params, z: Tensor<'t>) -> Tensor<'t> {
        let mut h = self.dec_stem.forward(tape, ps, z);
        h = self.dec_mid.forward(tape, ps, h);
        for (ut, us, conv, block) in &self.dec_levels {
            h = h.upsample_nearest((*ut, *us, *us));
            h = conv.forward(tape, ps, h);
            h = block.forward(tape, ps, h);
        }
        h = self.dec_norm.forward(tape, ps, h).silu();
        self.dec_head.forward(tape, ps, h)
    }

    fn check_divisible(&self, h: usize, w: usize, l: usize) -> Result<()> {
        if !h.is_multiple_of(self.cfg.f_s) {
            return Err(Error::shape(format!(
                "video height {h} not divisible by spatial factor {}",
                self.cfg.f_s
            )));
        }
        if !w.is_multiple_of(self.cfg.f_s) {
            return Err(Error::shape(format!(
                "video width {w} not divisible by spatial factor {}",
                self.cfg.f_s
            )));
        }
        if !l.is_multiple_of(self.cfg.f_t) {
            return Err(Error::shape(format!(
                "video length {l} not divisible by temporal factor {}",
                self.cfg.f_t
            )));
        }
        Ok(())
    }

    /// Encode a video (inference).
    pub fn encode(&self, ps: &Params, video: &VideoTensor) -> Result<LatentVideo> {
        let (h, w, l) = video.dims();
        self.check_divisible(h, w, l)?;
        let tape = Tape::new();
        let x = tape.constant(batch_of_one(&video.to_net()));
        let z = self.encode_t(&tape, ps, x).value();
        LatentVideo::from_net(&unbatch(&z))
    }

    /// Decode a latent (inference); output clamped to `[-1, 1]`.
    pub fn decode(&self, ps: &Params, latent: &LatentVideo) -> Result<VideoTensor> {
        let (_, _, _, c) = latent.dims();
        if c != self.cfg.c {
            return Err(Error::shape(format!(
                "latent has {c} channels, decoder expects {}",
                self.cfg.c
            )));
        }
        let tape = Tape::new();
        let z = tape.constant(batch_of_one(&latent.to_net()));
        let x = self.decode_t(&tape, ps, z).value().mapv(|v| v.clamp(-1.0, 1.0));
        VideoTensor::from_net(&unbatch(&x))
    }

    /// Batched inference encode on net-layout input `[B, 3, L, H, W]`.
    pub fn encode_net(&self, ps: &Params, x: &Arr) -> Result<Arr> {
        let s = x.shape();
        if s.len() != 5 || s[1] != 3 {
            return Err(Error::shape(format!("expected [B, 3, L, H, W], got {s:?}")));
        }
        self.check_divisible(s[3], s[4], s[2])?;
        let tape = Tape::new();
        let xt = tape.constant(x.clone());
        Ok(self.encode_t(&tape, ps, xt).value())
    }

    /// Batched inference decode on `[B, c, l, h, w]`, clamped.
    pub fn decode_net(&self, ps: &Params, z: &Arr) -> Result<Arr> {
        let s = z.shape();
        if s.len() != 5 || s[1] != self.cfg.c {
            return Err(Error::shape(format!(
                "expected [B, {}, l, h, w], got {s:?}",
                self.cfg.c
            )));
        }
        let tape = Tape::new();
        let zt = tape.constant(z.clone());
        Ok(self.decode_t(&tape, ps, zt).value().mapv(|v| v.clamp(-1.0, 1.0)))
    }

    /// Radius, in latent frames, inside which an encoded frame can feel the
    /// clip boundary: the encoder's temporal receptive-field half-width,
    /// converted to latent frames (rounded up).
    pub fn encoder_temporal_halo(&self) -> usize {
        let mut radius = 0usize; // in input frames
        let mut acc = 1usize; // input frames per current feature frame
        radius += acc; // stem conv, k_t = 3
        for (i, (block, _)) in self.enc_levels.iter().enumerate() {
            radius += block.temporal_taps() * acc;
            radius += acc; // down conv tap
            if i < self.cfg.temporal_downs() {
                acc *= 2;
            }
        }
        radius += self.enc_mid.temporal_taps() * acc;
        radius += acc; // head conv
        radius.div_ceil(self.cfg.f_t)
    }

    /// Radius, in output pixel frames, inside which a decoded frame can feel
    /// a latent-window boundary.
    pub fn decoder_temporal_halo(&self) -> usize {
        let mut radius = 0usize; // in output frames
        let mut spacing = self.cfg.f_t; // output frames per current feature frame
        radius += spacing; // stem conv
        radius += self.dec_mid.temporal_taps() * spacing;
        for (ut, _, _, block) in &self.dec_levels {
            spacing /= ut;
            radius += spacing; // post-upsample conv
            radius += block.temporal_taps() * spacing;
        }
        radius += spacing; // head conv
        radius
    }
}

fn batch_of_one(x: &Arr) -> Arr {
    let mut shape = vec![1usize];
    shape.extend_from_slice(x.shape());
    x.clone().into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn unbatch(x: &Arr) -> Arr {
    let shape: Vec<usize> = x.shape()[1..].to_vec();
    x.clone().into_shape_with_order(IxDyn(&shape)).unwrap()
}

// ---- reconstruction + adversarial losses ----

/// Reconstruction terms: pixel MSE and the (optional) perceptual value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconLoss {
    pub mse: f64,
    pub perceptual: f64,
}

pub fn reconstruction_loss(x: &Arr, x_rec: &Arr, cfg: &AEConfig) -> Result<ReconLoss> {
    if x.shape() != x_rec.shape() {
        return Err(Error::shape(format!(
            "reconstruction_loss: {:?} vs {:?}",
            x.shape(),
            x_rec.shape()
        )));
    }
    let n = x.len() as f64;
    let mse = x_rec
        .iter()
        .zip(x.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let perceptual = match cfg.perceptual {
        Perceptual::Off => 0.0,
    };
    Ok(ReconLoss { mse, perceptual })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvMode {
    Generator,
    Discriminator,
}

/// Hinge adversarial losses over patch logits.
///
/// Discriminator: `mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))`;
/// generator: `-mean(D(fake))`. `real_logits` is ignored in generator mode.
pub fn adversarial_loss(real_logits: &Arr, fake_logits: &Arr, mode: AdvMode) -> f64 {
    match mode {
        AdvMode::Discriminator => {
            let r = real_logits.mapv(|v| (1.0 - v).max(0.0)).mean().unwrap_or(0.0);
            let f = fake_logits.mapv(|v| (1.0 + v).max(0.0)).mean().unwrap_or(0.0);
            r + f
        }
        AdvMode::Generator => -fake_logits.mean().unwrap_or(0.0),
    }
}

// ---- discriminator ----

/// 3D patch discriminator: three strided convolutions (two that halve time,
/// one space-only) and a 1-channel head. Emits a logit map, higher = more
/// real.
#[derive(Debug)]
pub struct Discriminator {
    pub base_width: usize,
    convs: Vec<Conv3d>,
    norms: Vec<Option<GroupNorm>>,
}

impl Discriminator {
    pub fn init(ps: &mut Params, rng: &mut ChaCha8Rng, base_width: usize) -> Self {
        let zp = |st: usize, ss: usize| Conv3dSpec { stride: (st, ss, ss), pad: PadMode::Zero };
        let w = base_width;
        let convs = vec![
            Conv3d::init(ps, rng, "disc.c0", 3, w, (3, 3, 3), zp(2, 2)),
            Conv3d::init(ps, rng, "disc.c1", w, 2 * w, (3, 3, 3), zp(2, 2)),
            Conv3d::init(ps, rng, "disc.c2", 2 * w, 4 * w, (3, 3, 3), zp(1, 2)),
            Conv3d::init(ps, rng, "disc.head", 4 * w, 1, (3, 3, 3), zp(1, 1)),
        ];
        let norms = vec![
            None,
            Some(GroupNorm::init(ps, "disc.n1", norm_groups(2 * w), 2 * w)),
            Some(GroupNorm::init(ps, "disc.n2", norm_groups(4 * w), 4 * w)),
            None,
        ];
        Self { base_width, convs, norms }
    }

    /// `[B, 3, L, H, W] -> [B, 1, L/4, H/8, W/8]` logits.
    pub fn forward<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>) -> Tensor<'t> {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, ps, h);
            if let Some(norm) = &self.norms[i] {
                h = norm.forward(tape, ps, h);
            }
            if i != last {
                h = h.leaky_relu(0.2);
            }
        }
        h
    }

    /// Inference logits for one video, as `(h', w', l', 1)`.
    pub fn discriminate(&self, ps: &Params, video: &VideoTensor) -> Result<Array4<f64>> {
        let tape = Tape::new();
        let x = tape.constant(batch_of_one(&video.to_net()));
        let logits = self.forward(&tape, ps, x).value();
        let s = logits.shape().to_vec(); // [1, 1, l', h', w']
        let (l, h, w) = (s[2], s[3], s[4]);
        let mut out = Array4::zeros((h, w, l, 1));
        let v = logits.into_dimensionality::<ndarray::Ix5>().unwrap();
        for t in 0..l {
            for y in 0..h {
                for x_ in 0..w {
                    out[[y, x_, t, 0]] = v[[0, 0, t, y, x_]];
                }
            }
        }
        Ok(out)
    }
}

// ---- latent statistics ----

/// Per-channel post-hoc latent statistics; normalization is
/// `(z - mean) / std` per channel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sample_count: u64,
}

impl LatentStats {
    /// The scale-factor variant: fixed `(mu, sigma) = (0, 1/lambda)`, so
    /// normalization multiplies by `lambda`.
    pub fn from_scale(lambda: f64, c: usize) -> Result<Self> {
        if lambda <= 0.0 {
            return Err(Error::config("scale factor must be positive"));
        }
        Ok(Self { mean: vec![0.0; c], std: vec![1.0 / lambda; c], sample_count: 0 })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.channels() {
            return Err(Error::shape(format!(
                "latent has {c} channels, stats have {}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Accumulate per-channel population statistics from net-layout latents
    /// `[c, l, h, w]` (or batched `[B, c, l, h, w]`).
    pub fn from_latents<I: IntoIterator<Item = Arr>>(latents: I, c: usize) -> Result<Self> {
        let mut count = 0u64;
        let mut sum = vec![0.0f64; c];
        let mut sumsq = vec![0.0f64; c];
        for z in latents {
            let s = z.shape().to_vec();
            let ch_axis = match s.len() {
                4 => 0,
                5 => 1,
                _ => {
                    return Err(Error::shape(format!(
                        "latent must be rank 4 or 5, got {s:?}"
                    )))
                }
            };
            if s[ch_axis] != c {
                return Err(Error::shape(format!(
                    "latent has {} channels, expected {c}",
                    s[ch_axis]
                )));
            }
            for (idx, &v) in z.indexed_iter() {
                sum[idx[ch_axis]] += v;
                sumsq[idx[ch_axis]] += v * v;
            }
            count += (z.len() / c) as u64;
        }
        if count < 2 {
            return Err(Error::config("latent statistics need at least 2 samples per channel"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        for (j, s) in std.iter().enumerate() {
            if *s < 1e-8 {
                return Err(Error::numerical(format!(
                    "degenerate latent: channel {j} has standard deviation {s:.3e}"
                )));
            }
        }
        Ok(Self { mean, std, sample_count: count })
    }

    /// Normalize a latent video: per-channel `(z - mu) / sigma`.
    pub fn normalize(&self, z: &LatentVideo) -> Result<LatentVideo> {
        let (_, _, _, c) = z.dims();
        self.check_channels(c)?;
        let mut codes = z.codes.clone();
        for ((_, _, _, ch), v) in codes.indexed_iter_mut() {
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        Ok(LatentVideo::new(codes))
    }

    pub fn denormalize(&self, z: &LatentVideo) -> Result<LatentVideo> {
        let (_, _, _, c) = z.dims();
        self.check_channels(c)?;
        let mut codes = z.codes.clone();
        for ((_, _, _, ch), v) in codes.indexed_iter_mut() {
            *v = *v * self.std[ch] + self.mean[ch];
        }
        Ok(LatentVideo::new(codes))
    }

    /// Normalize a net-layout latent `[B, c, l, h, w]` (or `[c, l, h, w]`).
    pub fn normalize_net(&self, z: &Arr) -> Result<Arr> {
        self.map_net(z, |v, m, s| (v - m) / s)
    }

    pub fn denormalize_net(&self, z: &Arr) -> Result<Arr> {
        self.map_net(z, |v, m, s| v * s + m)
    }

    fn map_net(&self, z: &Arr, f: impl Fn(f64, f64, f64) -> f64) -> Result<Arr> {
        let s = z.shape().to_vec();
        let ch_axis = match s.len() {
            4 => 0,
            5 => 1,
            _ => return Err(Error::shape(format!("latent must be rank 4 or 5, got {s:?}"))),
        };
        self.check_channels(s[ch_axis])?;
        let mut out = z.clone();
        for (idx, v) in out.indexed_iter_mut() {
            let ch = idx[ch_axis];
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        Ok(out)
    }
}

/// Encode `n_clips` sampled clips with the frozen encoder and compute the
/// per-channel population statistics of the latent space.
pub fn compute_latent_stats(
    dataset: &VideoDataset,
    ae: &Autoencoder3d,
    ps: &Params,
    n_clips: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LatentStats> {
    if n_clips < 2 {
        return Err(Error::config("latent statistics need n_clips >= 2"));
    }
    let mut latents = Vec::with_capacity(n_clips);
    for _ in 0..n_clips {
        let clip = sample_clip(dataset, rng)?;
        latents.push(ae.encode(ps, &clip)?.to_net());
    }
    LatentStats::from_latents(latents, ae.cfg.c)
}
