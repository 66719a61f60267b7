//! Long-video generation: guidance, conditioned window sampling,
//! autoregressive extension past the training window, and coarse-to-fine
//! generation (sparse anchor frames filled in by an interpolation model).
//!
//! Everything here works on single-example network-layout latents
//! `[c, l, h, w]`; the pipeline converts to pixel space at the end by
//! decoding non-overlapped latent windows.

use ndarray::{ArrayD, Axis, IxDyn};

use kinema_grad::nn::Params;

use crate::autoencoder::{Autoencoder3d, LatentStats, LatentVideo};
use crate::conditioning::{
    apply_condition_net, build_mask, perturb_condition, BinaryClip, ConditionMode, ConditionSpec,
};
use crate::data::VideoTensor;
use crate::denoiser::Denoiser;
use crate::diffusion::{sample, EpsModel, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_id};
use crate::Arr;

/// Guidance combination `(1 + w) * eps_c - w * eps_u`. `w = 0` returns the
/// conditional prediction unchanged.
pub fn guided_eps(eps_c: &Arr, eps_u: &Arr, w: f64) -> Arr {
    if w == 0.0 {
        return eps_c.clone();
    }
    eps_c * (1.0 + w) - eps_u * w
}

/// Binds a denoiser to a fixed mask and conditional source: each call builds
/// the mask-concatenated, frame-substituted network input from the current
/// `z_t`.
pub struct Conditioned<'a> {
    pub net: &'a Denoiser,
    pub ps: &'a Params,
    pub mask: BinaryClip,
    /// `[B, c, l, h, w]`, already perturbed if perturbation is in effect.
    pub source: Arr,
}

impl EpsModel for Conditioned<'_> {
    fn eps(&self, z_t: &Arr, t: usize) -> Result<Arr> {
        let net_in = apply_condition_net(z_t, &self.source, &self.mask)?;
        self.net.eps_with_input(self.ps, &net_in, t)
    }
}

/// Classifier-free-style guidance over two predictors. With `w = 0` the
/// unconditional branch is never evaluated, so the conditional path is
/// bit-identical to running `cond` alone.
pub struct Guided<'a> {
    pub cond: &'a dyn EpsModel,
    pub uncond: &'a dyn EpsModel,
    pub w: f64,
}

impl EpsModel for Guided<'_> {
    fn eps(&self, z_t: &Arr, t: usize) -> Result<Arr> {
        let eps_c = self.cond.eps(z_t, t)?;
        if self.w == 0.0 {
            return Ok(eps_c);
        }
        let eps_u = self.uncond.eps(z_t, t)?;
        Ok(guided_eps(&eps_c, &eps_u, self.w))
    }
}

/// One orchestration log entry: which window was generated, under what mask,
/// at what conditioning perturbation level, from which rng stream.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Generation phase ("extend", "anchor", "interp", ...).
    pub phase: String,
    pub step: u64,
    /// Human-readable mask mode, e.g. `predict(k=8)`.
    pub mode: String,
    /// Effective (clamped) perturbation level applied to conditional frames.
    pub perturb_s: usize,
    pub rng_stream: String,
    /// Frames this step contributed to the output.
    pub emitted: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Orchestration {
    pub records: Vec<StepRecord>,
}

impl Orchestration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log_lines(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{} step {}: mode={} perturb_s={} rng={} emitted={}",
                    r.phase, r.step, r.mode, r.perturb_s, r.rng_stream, r.emitted
                )
            })
            .collect()
    }
}

fn describe_mode(mode: &ConditionMode) -> String {
    match mode {
        ConditionMode::Unconditional => "unconditional".to_string(),
        ConditionMode::Predict { k } => format!("predict(k={k})"),
        ConditionMode::Interpolate { stride } => format!("interpolate(stride={stride})"),
    }
}

/// Everything needed to sample one latent window from a trained denoiser.
pub struct WindowSampler<'a> {
    pub net: &'a Denoiser,
    pub ps: &'a Params,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
    /// Perturbation level applied to conditional frames at sampling time.
    pub noise_level: usize,
    /// Cap on perturbation levels.
    pub s_max: usize,
}

impl WindowSampler<'_> {
    fn window_len(&self) -> usize {
        self.net.cfg.latent_frames
    }

    /// Generate one `[c, l, h, w]` window. `source` holds clean conditional
    /// content at masked frames (ignored elsewhere); its shape fixes the
    /// window shape. The rng stream is derived from the sampler seed, the
    /// phase label, and the step index, and consumed in a fixed order:
    /// conditioning perturbation, then initial noise, then sampler noise.
    pub fn generate_window(
        &self,
        mode: ConditionMode,
        source: &Arr,
        phase: &str,
        step: u64,
    ) -> Result<(Arr, StepRecord)> {
        let s = source.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("window source must be [c, l, h, w], got {s:?}")));
        }
        let l = s[1];
        if l != self.window_len() {
            return Err(Error::shape(format!(
                "window length {l} does not match the network's {} latent frames",
                self.window_len()
            )));
        }
        let spec = ConditionSpec { mode, perturb_s: self.noise_level, s_max: self.s_max };
        let mask = build_mask(&spec, l)?;
        let mut rng = stream(self.sampler.seed, phase, step);

        let perturbed = if mask.is_unconditional() {
            source.clone()
        } else {
            perturb_condition(source, spec.perturb_s, spec.s_max, self.schedule, &mut rng)?
        };
        let batched = perturbed.insert_axis(Axis(0));

        let cond = Conditioned { net: self.net, ps: self.ps, mask, source: batched };
        let zeros = ArrayD::zeros(IxDyn(&[1, s[0], l, s[2], s[3]]));
        let uncond = Conditioned {
            net: self.net,
            ps: self.ps,
            mask: BinaryClip::zeros(l),
            source: zeros,
        };
        let guided = Guided { cond: &cond, uncond: &uncond, w: self.sampler.guidance_w };

        let z = sample(&guided, &[1, s[0], l, s[2], s[3]], &self.sampler, self.schedule, &mut rng)?;
        let record = StepRecord {
            phase: phase.to_string(),
            step,
            mode: describe_mode(&mode),
            perturb_s: spec.effective_perturb_s(),
            rng_stream: stream_id(self.sampler.seed, phase, step),
            emitted: 0,
        };
        Ok((z.index_axis(Axis(0), 0).to_owned(), record))
    }
}

/// Shape of an autoregressive extension run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtensionPlan {
    /// Model window length `l`.
    pub window: usize,
    /// Conditioning context `k` carried between windows.
    pub context: usize,
    /// Target total frames.
    pub total: usize,
    /// Extension steps after the initial window.
    pub steps: usize,
}

/// Plan an extension from `window` frames to `total`: each step re-conditions
/// on the last `context` frames and contributes at most `window - context`
/// new ones, so `steps = ceil((total - window) / (window - context))`; the
/// final step is truncated to land on `total` exactly.
pub fn plan_extension(total: usize, window: usize, context: usize) -> Result<ExtensionPlan> {
    if context == 0 || context >= window {
        return Err(Error::config(format!(
            "extension needs 0 < context < window, got context {context}, window {window}"
        )));
    }
    if total < window {
        return Err(Error::config(format!(
            "extension target {total} is shorter than one window {window}"
        )));
    }
    let fresh = window - context;
    let steps = (total - window).div_ceil(fresh);
    Ok(ExtensionPlan { window, context, total, steps })
}

/// Extend `initial` (`[c, l, h, w]`) to `plan.total` frames by repeatedly
/// predicting a window from its last `context` frames. Only the `l - k` new
/// frames of each window are appended; conditioning frames are never
/// re-emitted. `step_offset` shifts the log/rng step indices so a caller can
/// chain phases.
pub fn autoregressive_extend(
    ws: &WindowSampler<'_>,
    initial: &Arr,
    plan: &ExtensionPlan,
    phase: &str,
    step_offset: u64,
    orchestration: &mut Orchestration,
) -> Result<Arr> {
    let s = initial.shape().to_vec();
    if s.len() != 4 || s[1] != plan.window {
        return Err(Error::shape(format!(
            "initial clip must be [c, {}, h, w], got {s:?}",
            plan.window
        )));
    }
    if plan.window != ws.window_len() {
        return Err(Error::shape(format!(
            "plan window {} does not match the network's {}",
            plan.window,
            ws.window_len()
        )));
    }
    let (c, l, h, w) = (s[0], s[1], s[2], s[3]);
    let k = plan.context;
    let mut out = initial.clone();
    for step in 0..plan.steps {
        let have = out.shape()[1];
        let mut source = ArrayD::zeros(IxDyn(&[c, l, h, w]));
        source
            .slice_mut(ndarray::s![.., ..k, .., ..])
            .assign(&out.slice(ndarray::s![.., have - k.., .., ..]));
        let (window, mut record) = ws.generate_window(
            ConditionMode::Predict { k },
            &source,
            phase,
            step_offset + step as u64,
        )?;
        let take = (l - k).min(plan.total - have);
        let fresh = window.slice(ndarray::s![.., k..k + take, .., ..]).to_owned().into_dyn();
        out = ndarray::concatenate(Axis(1), &[out.view(), fresh.view()])
            .map_err(|e| Error::shape(format!("extension stitch failed: {e}")))?;
        record.emitted = take;
        orchestration.records.push(record);
    }
    debug_assert_eq!(out.shape()[1], plan.total);
    Ok(out)
}

/// Shape of a coarse-to-fine generation run: a sparse chain of anchor frames
/// at a temporal stride, then interpolation windows that fill the gaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierarchyPlan {
    /// Dense frames between consecutive anchors (the sparse temporal stride).
    pub stride: usize,
    /// Number of anchor frames.
    pub anchors: usize,
    /// Final dense length `(anchors - 1) * stride + 1`.
    pub dense_total: usize,
    /// Window/context of the sparse (anchor) model chain.
    pub sparse_window: usize,
    pub sparse_context: usize,
    /// Interpolation model window `m * stride + 1`.
    pub interp_window: usize,
    /// Gaps covered per interpolation window.
    pub gaps_per_window: usize,
}

pub fn plan_hierarchy(
    dense_total: usize,
    stride: usize,
    sparse_window: usize,
    sparse_context: usize,
    interp_window: usize,
) -> Result<HierarchyPlan> {
    if stride < 2 {
        return Err(Error::config(format!("hierarchy stride must be >= 2, got {stride}")));
    }
    if dense_total <= stride || !(dense_total - 1).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "dense length {dense_total} must be 1 mod {stride} and span at least one gap"
        )));
    }
    let anchors = (dense_total - 1) / stride + 1;
    if sparse_context == 0 || sparse_context >= sparse_window {
        return Err(Error::config(format!(
            "hierarchy needs 0 < sparse_context < sparse_window, got {sparse_context}, {sparse_window}"
        )));
    }
    if anchors < sparse_window {
        return Err(Error::config(format!(
            "{anchors} anchors cannot seed a sparse window of {sparse_window}"
        )));
    }
    if interp_window < stride + 1 || !(interp_window - 1).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "interpolation window {interp_window} must be m * stride + 1 for stride {stride}"
        )));
    }
    let gaps_per_window = (interp_window - 1) / stride;
    if anchors - 1 < gaps_per_window {
        return Err(Error::config(format!(
            "interpolation window spans {gaps_per_window} gaps but the sequence only has {}",
            anchors - 1
        )));
    }
    Ok(HierarchyPlan {
        stride,
        anchors,
        dense_total,
        sparse_window,
        sparse_context,
        interp_window,
        gaps_per_window,
    })
}

/// Generate `plan.dense_total` latent frames coarse-to-fine: an unconditional
/// sparse window extended autoregressively to all anchors, then interpolation
/// windows over consecutive anchor groups. Anchor frames are copied into the
/// dense output verbatim; interpolation fills only the in-between frames.
pub fn hierarchical_generate(
    sparse: &WindowSampler<'_>,
    interp: &WindowSampler<'_>,
    plan: &HierarchyPlan,
    latent_hw: (usize, usize),
    latent_channels: usize,
) -> Result<(Arr, Orchestration)> {
    let mut orch = Orchestration::new();
    let (c, h, w) = (latent_channels, latent_hw.0, latent_hw.1);
    if sparse.window_len() != plan.sparse_window {
        return Err(Error::shape(format!(
            "sparse model window {} does not match plan {}",
            sparse.window_len(),
            plan.sparse_window
        )));
    }
    if interp.window_len() != plan.interp_window {
        return Err(Error::shape(format!(
            "interpolation model window {} does not match plan {}",
            interp.window_len(),
            plan.interp_window
        )));
    }

    // Sparse anchor chain.
    let seed_source = ArrayD::zeros(IxDyn(&[c, plan.sparse_window, h, w]));
    let (first, mut rec) =
        sparse.generate_window(ConditionMode::Unconditional, &seed_source, "anchor", 0)?;
    rec.emitted = plan.sparse_window.min(plan.anchors);
    orch.records.push(rec);
    let anchors = if plan.anchors > plan.sparse_window {
        let ext = plan_extension(plan.anchors, plan.sparse_window, plan.sparse_context)?;
        autoregressive_extend(sparse, &first, &ext, "anchor", 1, &mut orch)?
    } else {
        first
    };

    // Lay anchors into the dense timeline verbatim.
    let mut dense = ArrayD::zeros(IxDyn(&[c, plan.dense_total, h, w]));
    for a in 0..plan.anchors {
        dense
            .slice_mut(ndarray::s![.., a * plan.stride, .., ..])
            .assign(&anchors.slice(ndarray::s![.., a, .., ..]));
    }

    // Interpolation passes; the final window is end-aligned when the gap
    // count is not divisible, and already-filled frames are kept.
    let mut filled = vec![false; plan.dense_total];
    for a in 0..plan.anchors {
        filled[a * plan.stride] = true;
    }
    let m = plan.gaps_per_window;
    let total_gaps = plan.anchors - 1;
    let windows = total_gaps.div_ceil(m);
    for wi in 0..windows {
        let a0 = (wi * m).min(total_gaps - m);
        let mut source = ArrayD::zeros(IxDyn(&[c, plan.interp_window, h, w]));
        for j in 0..=m {
            source
                .slice_mut(ndarray::s![.., j * plan.stride, .., ..])
                .assign(&anchors.slice(ndarray::s![.., a0 + j, .., ..]));
        }
        let (window, mut rec) = interp.generate_window(
            ConditionMode::Interpolate { stride: plan.stride },
            &source,
            "interp",
            wi as u64,
        )?;
        let mut emitted = 0;
        for p in 0..plan.interp_window {
            if p % plan.stride == 0 {
                continue;
            }
            let g = a0 * plan.stride + p;
            if !filled[g] {
                dense
                    .slice_mut(ndarray::s![.., g, .., ..])
                    .assign(&window.slice(ndarray::s![.., p, .., ..]));
                filled[g] = true;
                emitted += 1;
            }
        }
        rec.emitted = emitted;
        orch.records.push(rec);
    }
    if let Some(hole) = filled.iter().position(|&f| !f) {
        return Err(Error::numerical(format!(
            "hierarchical generation left frame {hole} unfilled"
        )));
    }
    Ok((dense, orch))
}

/// Decode a long normalized latent `[c, l, h, w]` to pixels in non-overlapped
/// windows of `window` latent frames, bounding decoder memory.
pub fn decode_windows(
    ae: &Autoencoder3d,
    ps: &Params,
    stats: &LatentStats,
    z: &Arr,
    window: usize,
) -> Result<VideoTensor> {
    let s = z.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("latent must be [c, l, h, w], got {s:?}")));
    }
    if window == 0 {
        return Err(Error::config("decode window must be >= 1"));
    }
    let l = s[1];
    let mut chunks: Vec<ndarray::Array4<f64>> = Vec::new();
    let mut start = 0;
    while start < l {
        let len = window.min(l - start);
        let piece = z.slice(ndarray::s![.., start..start + len, .., ..]).to_owned();
        let latent = LatentVideo::from_net(&piece.into_dyn())?;
        let video = ae.decode(ps, &stats.denormalize(&latent)?)?;
        chunks.push(video.pixels);
        start += len;
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let pixels = ndarray::concatenate(Axis(2), &views)
        .map_err(|e| Error::shape(format!("window decode stitch failed: {e}")))?;
    Ok(VideoTensor::new(pixels))
}
