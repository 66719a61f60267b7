//! The latent-space noise-prediction network: a UNet over `[B, c+1, l, h, w]`
//! inputs (latent plus mask channel) built from space-only 1x3x3 convolutions,
//! spatial-only downsampling, timestep-adaptive group norms, and attention
//! that is either factorized (spatial then temporal) or joint over all
//! latent positions.
//!
//! Residual output projections, attention output projections, positional
//! tables, and the prediction head all start at zero, so a fresh network is
//! the zero function and every residual branch is initially the identity.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use kinema_grad::conv::{Conv3dSpec, PadMode};
use kinema_grad::nn::{AdaGroupNorm, Conv3d, Linear, MultiHeadAttention, Params};
use kinema_grad::{Tape, Tensor};

use crate::autoencoder::norm_groups;
use crate::diffusion::EpsModelTrain;
use crate::error::{Error, Result};
use crate::Arr;

/// How attention treats the temporal axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Separate spatial attention (per frame) and temporal attention (per
    /// spatial site, with a learned positional table over frames).
    #[default]
    Factorized,
    /// One attention over all `l * h * w` positions with a learned positional
    /// table over the full token grid.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent channels `c`; the network input adds one mask channel.
    pub latent_channels: usize,
    /// Temporal window the network is built for (positional table length).
    pub latent_frames: usize,
    /// Latent spatial size the network is built for. Factorized attention
    /// works at any spatial size; joint positional tables fix it.
    pub latent_hw: (usize, usize),
    pub base_width: usize,
    /// Per-level channel multipliers; level 0 is full resolution.
    pub ch_mults: Vec<usize>,
    /// Levels with attention.
    pub attn_levels: Vec<usize>,
    /// Subset of `attn_levels` that also get temporal attention (factorized
    /// mode only).
    pub temporal_attn_levels: Vec<usize>,
    pub heads: usize,
    /// Timestep embedding width (even).
    pub temb_dim: usize,
    pub attention_mode: AttentionMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_frames: 16,
            latent_hw: (8, 8),
            base_width: 32,
            ch_mults: vec![1, 2, 2],
            attn_levels: vec![1, 2],
            temporal_attn_levels: vec![1, 2],
            heads: 4,
            temb_dim: 64,
            attention_mode: AttentionMode::Factorized,
        }
    }
}

impl DenoiserConfig {
    pub fn in_channels(&self) -> usize {
        self.latent_channels + 1
    }

    pub fn levels(&self) -> usize {
        self.ch_mults.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.ch_mults[level]
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.latent_frames == 0 || self.base_width == 0 {
            return Err(Error::config("denoiser dims must be positive"));
        }
        if self.ch_mults.is_empty() || self.ch_mults.contains(&0) {
            return Err(Error::config("channel multipliers must be positive and non-empty"));
        }
        if self.temb_dim < 2 || !self.temb_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "timestep embedding width must be even and >= 2, got {}",
                self.temb_dim
            )));
        }
        if self.heads == 0 {
            return Err(Error::config("attention needs at least one head"));
        }
        let levels = self.levels();
        for &lv in self.attn_levels.iter().chain(&self.temporal_attn_levels) {
            if lv >= levels {
                return Err(Error::config(format!(
                    "attention level {lv} out of range for {levels} levels"
                )));
            }
        }
        for &lv in &self.temporal_attn_levels {
            if !self.attn_levels.contains(&lv) {
                return Err(Error::config(format!(
                    "temporal attention level {lv} must also be an attention level"
                )));
            }
        }
        for &lv in &self.attn_levels {
            if !self.width(lv).is_multiple_of(self.heads) {
                return Err(Error::config(format!(
                    "width {} at attention level {lv} is not divisible by {} heads",
                    self.width(lv),
                    self.heads
                )));
            }
        }
        let down = 1usize << (levels - 1);
        let (h, w) = self.latent_hw;
        if h == 0 || w == 0 || h % down != 0 || w % down != 0 {
            return Err(Error::config(format!(
                "latent spatial size {h}x{w} must be divisible by {down} for {levels} levels"
            )));
        }
        Ok(())
    }
}

/// Sinusoidal timestep features: `[sin(t * f_0) ... cos(t * f_0) ...]` with
/// `f_i = 10000^(-i / (dim/2 - 1))`, so `f_0 = 1` and the lowest frequency is
/// `1/10000`. Computed outside the tape; only the MLP on top is trained.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) / denom * 10000f64.ln()).exp();
        let x = t as f64 * freq;
        out[i] = x.sin();
        out[half + i] = x.cos();
    }
    out
}

/// Stacked embeddings for a batch of timesteps: `[B, dim]`.
pub fn timestep_embedding_batch(ts: &[usize], dim: usize) -> Arr {
    let mut out = ArrayD::zeros(IxDyn(&[ts.len(), dim]));
    for (b, &t) in ts.iter().enumerate() {
        for (i, v) in timestep_embedding(t, dim).into_iter().enumerate() {
            out[[b, i]] = v;
        }
    }
    out
}

const S1: Conv3dSpec = Conv3dSpec { stride: (1, 1, 1), pad: PadMode::Zero };
const DOWN2: Conv3dSpec = Conv3dSpec { stride: (1, 2, 2), pad: PadMode::Zero };
const SPACE_K: (usize, usize, usize) = (1, 3, 3);
const POINT_K: (usize, usize, usize) = (1, 1, 1);

/// Residual block with timestep-adaptive norms; the second conv starts at
/// zero so the block is initially the identity (plus the skip projection
/// when the width changes).
#[derive(Debug, Clone)]
struct ResBlockA {
    norm1: AdaGroupNorm,
    conv1: Conv3d,
    norm2: AdaGroupNorm,
    conv2: Conv3d,
    skip: Option<Conv3d>,
}

impl ResBlockA {
    fn init(
        ps: &mut Params,
        rng: &mut impl Rng,
        sites: &mut Vec<String>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
    ) -> Self {
        let norm1 = AdaGroupNorm::init(ps, rng, &format!("{name}.norm1"), norm_groups(cin), cin, emb_dim);
        sites.push(format!("{name}.norm1"));
        let conv1 = Conv3d::init(ps, rng, &format!("{name}.conv1"), cin, cout, SPACE_K, S1);
        let norm2 = AdaGroupNorm::init(ps, rng, &format!("{name}.norm2"), norm_groups(cout), cout, emb_dim);
        sites.push(format!("{name}.norm2"));
        let conv2 = Conv3d::init_zero(ps, rng, &format!("{name}.conv2"), cout, cout, SPACE_K, S1);
        let skip = (cin != cout)
            .then(|| Conv3d::init(ps, rng, &format!("{name}.skip"), cin, cout, POINT_K, S1));
        Self { norm1, conv1, norm2, conv2, skip }
    }

    fn forward<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>, emb: Tensor<'t>) -> Tensor<'t> {
        let mut r = self.conv1.forward(tape, ps, self.norm1.forward(tape, ps, x, emb).silu());
        r = self.conv2.forward(tape, ps, self.norm2.forward(tape, ps, r, emb).silu());
        let base = match &self.skip {
            Some(sk) => sk.forward(tape, ps, x),
            None => x,
        };
        base.add(r)
    }
}

/// Attention across spatial positions, applied independently per frame.
/// Permuting the input's frames permutes the output's frames identically.
#[derive(Debug, Clone)]
struct SpatialAttn {
    norm: AdaGroupNorm,
    attn: MultiHeadAttention,
}

impl SpatialAttn {
    fn init(
        ps: &mut Params,
        rng: &mut impl Rng,
        sites: &mut Vec<String>,
        name: &str,
        channels: usize,
        heads: usize,
        emb_dim: usize,
    ) -> Self {
        let norm = AdaGroupNorm::init(ps, rng, &format!("{name}.norm"), norm_groups(channels), channels, emb_dim);
        sites.push(format!("{name}.norm"));
        let attn = MultiHeadAttention::init(ps, rng, name, channels, heads);
        Self { norm, attn }
    }

    fn forward<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>, emb: Tensor<'t>) -> Tensor<'t> {
        let s = x.shape();
        let (b, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let n = self.norm.forward(tape, ps, x, emb);
        let tokens = n.permute(&[0, 2, 3, 4, 1]).reshape(&[b * t, h * w, c]);
        let y = self.attn.forward(tape, ps, tokens);
        let y = y.reshape(&[b, t, h, w, c]).permute(&[0, 4, 1, 2, 3]);
        x.add(y)
    }
}

/// Attention across frames, applied independently per spatial site, with a
/// zero-initialized learned positional table over the temporal window.
#[derive(Debug, Clone)]
struct TemporalAttn {
    norm: AdaGroupNorm,
    attn: MultiHeadAttention,
    pos_name: String,
    frames: usize,
}

impl TemporalAttn {
    #[allow(clippy::too_many_arguments)]
    fn init(
        ps: &mut Params,
        rng: &mut impl Rng,
        sites: &mut Vec<String>,
        name: &str,
        channels: usize,
        heads: usize,
        emb_dim: usize,
        frames: usize,
    ) -> Self {
        let norm = AdaGroupNorm::init(ps, rng, &format!("{name}.norm"), norm_groups(channels), channels, emb_dim);
        sites.push(format!("{name}.norm"));
        let attn = MultiHeadAttention::init(ps, rng, name, channels, heads);
        let pos_name = format!("{name}.pos");
        ps.entry(&pos_name, || ArrayD::zeros(IxDyn(&[frames, channels])));
        Self { norm, attn, pos_name, frames }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        ps: &Params,
        x: Tensor<'t>,
        emb: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let s = x.shape();
        let (b, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        if t != self.frames {
            return Err(Error::shape(format!(
                "temporal attention built for {} frames, input has {t}",
                self.frames
            )));
        }
        let n = self.norm.forward(tape, ps, x, emb);
        let pos = tape.param(ps, &self.pos_name);
        let tokens = n
            .permute(&[0, 3, 4, 2, 1])
            .reshape(&[b * h * w, t, c])
            .add_bcast0(pos);
        let y = self.attn.forward(tape, ps, tokens);
        let y = y.reshape(&[b, h, w, t, c]).permute(&[0, 4, 3, 1, 2]);
        Ok(x.add(y))
    }
}

/// One attention over the full `l * h * w` token grid with a positional
/// table covering every position. At a one-frame window with the same
/// attention weights and a zero table this coincides with [`SpatialAttn`].
#[derive(Debug, Clone)]
struct JointAttn {
    norm: AdaGroupNorm,
    attn: MultiHeadAttention,
    pos_name: String,
    grid: (usize, usize, usize),
}

impl JointAttn {
    #[allow(clippy::too_many_arguments)]
    fn init(
        ps: &mut Params,
        rng: &mut impl Rng,
        sites: &mut Vec<String>,
        name: &str,
        channels: usize,
        heads: usize,
        emb_dim: usize,
        grid: (usize, usize, usize),
    ) -> Self {
        let norm = AdaGroupNorm::init(ps, rng, &format!("{name}.norm"), norm_groups(channels), channels, emb_dim);
        sites.push(format!("{name}.norm"));
        let attn = MultiHeadAttention::init(ps, rng, name, channels, heads);
        let pos_name = format!("{name}.pos");
        let tokens = grid.0 * grid.1 * grid.2;
        ps.entry(&pos_name, || ArrayD::zeros(IxDyn(&[tokens, channels])));
        Self { norm, attn, pos_name, grid }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        ps: &Params,
        x: Tensor<'t>,
        emb: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let s = x.shape();
        let (b, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        if (t, h, w) != self.grid {
            return Err(Error::shape(format!(
                "joint attention built for grid {:?}, input is ({t}, {h}, {w})",
                self.grid
            )));
        }
        let n = self.norm.forward(tape, ps, x, emb);
        let pos = tape.param(ps, &self.pos_name);
        let tokens = n
            .permute(&[0, 2, 3, 4, 1])
            .reshape(&[b, t * h * w, c])
            .add_bcast0(pos);
        let y = self.attn.forward(tape, ps, tokens);
        let y = y.reshape(&[b, t, h, w, c]).permute(&[0, 4, 1, 2, 3]);
        Ok(x.add(y))
    }
}

#[derive(Debug, Clone)]
enum AttnSite {
    Factorized { spatial: SpatialAttn, temporal: Option<TemporalAttn> },
    Joint(JointAttn),
}

impl AttnSite {
    #[allow(clippy::too_many_arguments)]
    fn init(
        ps: &mut Params,
        rng: &mut impl Rng,
        sites: &mut Vec<String>,
        name: &str,
        cfg: &DenoiserConfig,
        channels: usize,
        grid: (usize, usize, usize),
        temporal: bool,
    ) -> Self {
        match cfg.attention_mode {
            AttentionMode::Factorized => {
                let spatial = SpatialAttn::init(
                    ps, rng, sites, &format!("{name}.sp"), channels, cfg.heads, cfg.temb_dim,
                );
                let temporal = temporal.then(|| {
                    TemporalAttn::init(
                        ps, rng, sites, &format!("{name}.tm"), channels, cfg.heads,
                        cfg.temb_dim, cfg.latent_frames,
                    )
                });
                AttnSite::Factorized { spatial, temporal }
            }
            AttentionMode::Joint => AttnSite::Joint(JointAttn::init(
                ps, rng, sites, &format!("{name}.jt"), channels, cfg.heads, cfg.temb_dim, grid,
            )),
        }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        ps: &Params,
        x: Tensor<'t>,
        emb: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        match self {
            AttnSite::Factorized { spatial, temporal } => {
                let mut h = spatial.forward(tape, ps, x, emb);
                if let Some(tm) = temporal {
                    h = tm.forward(tape, ps, h, emb)?;
                }
                Ok(h)
            }
            AttnSite::Joint(j) => j.forward(tape, ps, x, emb),
        }
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    /// Strided conv from the previous level's resolution (absent at level 0).
    reduce: Option<Conv3d>,
    res: ResBlockA,
    attn: Option<AttnSite>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    /// Takes the concatenation of the upward path and the skip.
    res: ResBlockA,
    attn: Option<AttnSite>,
    /// Conv applied after nearest upsampling toward the shallower level
    /// (absent at level 0).
    expand: Option<Conv3d>,
}

/// The noise-prediction UNet.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    temb1: Linear,
    temb2: Linear,
    stem: Conv3d,
    downs: Vec<DownLevel>,
    mid1: ResBlockA,
    mid_attn: Option<AttnSite>,
    mid2: ResBlockA,
    /// Deepest level first.
    ups: Vec<UpLevel>,
    head_norm: AdaGroupNorm,
    head: Conv3d,
    norm_sites: Vec<String>,
}

impl Denoiser {
    pub fn init(ps: &mut Params, rng: &mut impl Rng, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut sites = Vec::new();
        let d = cfg.temb_dim;
        let temb1 = Linear::init(ps, rng, "dn.temb.l1", d, d);
        let temb2 = Linear::init(ps, rng, "dn.temb.l2", d, d);
        let stem = Conv3d::init(ps, rng, "dn.stem", cfg.in_channels(), cfg.width(0), SPACE_K, S1);

        let grid_at = |lv: usize| {
            (
                cfg.latent_frames,
                cfg.latent_hw.0 >> lv,
                cfg.latent_hw.1 >> lv,
            )
        };
        let mut downs = Vec::new();
        for i in 0..cfg.levels() {
            let reduce = (i > 0).then(|| {
                Conv3d::init(
                    ps, rng, &format!("dn.down{i}.reduce"),
                    cfg.width(i - 1), cfg.width(i - 1), SPACE_K, DOWN2,
                )
            });
            let cin = if i == 0 { cfg.width(0) } else { cfg.width(i - 1) };
            let res = ResBlockA::init(
                ps, rng, &mut sites, &format!("dn.down{i}.res"), cin, cfg.width(i), d,
            );
            let attn = cfg.attn_levels.contains(&i).then(|| {
                AttnSite::init(
                    ps, rng, &mut sites, &format!("dn.down{i}"), cfg, cfg.width(i),
                    grid_at(i), cfg.temporal_attn_levels.contains(&i),
                )
            });
            downs.push(DownLevel { reduce, res, attn });
        }

        let deepest = cfg.levels() - 1;
        let wd = cfg.width(deepest);
        let mid1 = ResBlockA::init(ps, rng, &mut sites, "dn.mid.res1", wd, wd, d);
        let mid_attn = cfg.attn_levels.contains(&deepest).then(|| {
            AttnSite::init(
                ps, rng, &mut sites, "dn.mid", cfg, wd, grid_at(deepest),
                cfg.temporal_attn_levels.contains(&deepest),
            )
        });
        let mid2 = ResBlockA::init(ps, rng, &mut sites, "dn.mid.res2", wd, wd, d);

        let mut ups = Vec::new();
        for i in (0..cfg.levels()).rev() {
            let res = ResBlockA::init(
                ps, rng, &mut sites, &format!("dn.up{i}.res"), 2 * cfg.width(i), cfg.width(i), d,
            );
            let attn = cfg.attn_levels.contains(&i).then(|| {
                AttnSite::init(
                    ps, rng, &mut sites, &format!("dn.up{i}"), cfg, cfg.width(i),
                    grid_at(i), cfg.temporal_attn_levels.contains(&i),
                )
            });
            let expand = (i > 0).then(|| {
                Conv3d::init(
                    ps, rng, &format!("dn.up{i}.expand"),
                    cfg.width(i), cfg.width(i - 1), SPACE_K, S1,
                )
            });
            ups.push(UpLevel { res, attn, expand });
        }

        let head_norm = AdaGroupNorm::init(
            ps, rng, "dn.head.norm", norm_groups(cfg.width(0)), cfg.width(0), d,
        );
        sites.push("dn.head.norm".to_string());
        let head = Conv3d::init_zero(
            ps, rng, "dn.head.conv", cfg.width(0), cfg.latent_channels, SPACE_K, S1,
        );

        Ok(Self {
            cfg: cfg.clone(),
            temb1,
            temb2,
            stem,
            downs,
            mid1,
            mid_attn,
            mid2,
            ups,
            head_norm,
            head,
            norm_sites: sites,
        })
    }

    /// Names of every normalization site; each owns a `<site>.proj` linear
    /// mapping the timestep embedding to per-channel scale and shift, which
    /// is how timestep conditioning reaches the network (there are no plain
    /// learned norm affines anywhere).
    pub fn norm_sites(&self) -> &[String] {
        &self.norm_sites
    }

    fn check_input(&self, s: &[usize]) -> Result<()> {
        if s.len() != 5 {
            return Err(Error::shape(format!(
                "denoiser input must be [B, c+1, l, h, w], got {s:?}"
            )));
        }
        if s[1] != self.cfg.in_channels() {
            return Err(Error::shape(format!(
                "denoiser expects {} input channels (latent {} + mask), got {}",
                self.cfg.in_channels(),
                self.cfg.latent_channels,
                s[1]
            )));
        }
        let has_temporal = self.cfg.attention_mode == AttentionMode::Joint
            || !self.cfg.temporal_attn_levels.is_empty();
        if has_temporal && s[2] != self.cfg.latent_frames {
            return Err(Error::shape(format!(
                "network built for {} latent frames, input has {}",
                self.cfg.latent_frames, s[2]
            )));
        }
        let down = 1usize << (self.cfg.levels() - 1);
        if !s[3].is_multiple_of(down) || !s[4].is_multiple_of(down) {
            return Err(Error::shape(format!(
                "latent spatial size {}x{} is not divisible by the downsampling factor {down}",
                s[3], s[4]
            )));
        }
        if self.cfg.attention_mode == AttentionMode::Joint
            && (s[3], s[4]) != self.cfg.latent_hw
        {
            return Err(Error::shape(format!(
                "joint attention built for {:?}, input is {}x{}",
                self.cfg.latent_hw, s[3], s[4]
            )));
        }
        Ok(())
    }

    /// Differentiable forward pass: `net_in` is `[B, c+1, l, h, w]`, one
    /// timestep per batch element; returns the predicted noise
    /// `[B, c, l, h, w]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ps: &Params,
        net_in: &Arr,
        ts: &[usize],
    ) -> Result<Tensor<'t>> {
        let s = net_in.shape().to_vec();
        self.check_input(&s)?;
        if ts.len() != s[0] {
            return Err(Error::shape(format!(
                "batch size {} needs {} timesteps, got {}",
                s[0],
                s[0],
                ts.len()
            )));
        }

        let base = tape.constant(timestep_embedding_batch(ts, self.cfg.temb_dim));
        let emb = self
            .temb2
            .forward(tape, ps, self.temb1.forward(tape, ps, base).silu());

        let x = tape.constant(net_in.clone());
        let mut h = self.stem.forward(tape, ps, x);
        let mut skips = Vec::with_capacity(self.cfg.levels());
        for level in &self.downs {
            if let Some(reduce) = &level.reduce {
                h = reduce.forward(tape, ps, h);
            }
            h = level.res.forward(tape, ps, h, emb);
            if let Some(attn) = &level.attn {
                h = attn.forward(tape, ps, h, emb)?;
            }
            skips.push(h);
        }

        h = self.mid1.forward(tape, ps, h, emb);
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(tape, ps, h, emb)?;
        }
        h = self.mid2.forward(tape, ps, h, emb);

        for up in &self.ups {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::concat(1, &[h, skip]);
            h = up.res.forward(tape, ps, h, emb);
            if let Some(attn) = &up.attn {
                h = attn.forward(tape, ps, h, emb)?;
            }
            if let Some(expand) = &up.expand {
                h = expand.forward(tape, ps, h.upsample_nearest((1, 2, 2)));
            }
        }

        let out = self
            .head
            .forward(tape, ps, self.head_norm.forward(tape, ps, h, emb).silu());
        Ok(out)
    }

    /// Inference forward: same as [`Self::forward`] but off-tape, one shared
    /// timestep, returning a plain array.
    pub fn eps_with_input(&self, ps: &Params, net_in: &Arr, t: usize) -> Result<Arr> {
        let ts = vec![t; net_in.shape()[0]];
        let tape = Tape::new();
        let out = self.forward(&tape, ps, net_in, &ts)?;
        Ok(out.value())
    }
}

impl EpsModelTrain for Denoiser {
    fn eps_train<'t>(
        &self,
        tape: &'t Tape,
        ps: &Params,
        net_in: &Arr,
        ts: &[usize],
    ) -> Result<Tensor<'t>> {
        self.forward(tape, ps, net_in, ts)
    }
}
