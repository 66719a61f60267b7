//! Frame-level conditioning: binary masks, ground-truth substitution into the
//! network input, conditional latent perturbation, and the training-mode
//! distribution for joint unconditional/conditional training.
//!
//! A mask is one bit per latent frame, broadcast spatially and concatenated
//! to the latent as an extra input channel. Conditioning flows only through
//! this input construction — sampled latents are never overwritten between
//! reverse steps.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::Arr;

/// Per-frame condition indicator: 1 = frame is given, 0 = frame is generated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryClip {
    bits: Vec<u8>,
}

impl BinaryClip {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::config("binary clip entries must be 0 or 1"));
        }
        Ok(Self { bits })
    }

    pub fn zeros(l: usize) -> Self {
        Self { bits: vec![0; l] }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_unconditional(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Broadcast to the spatial map form `(h, w, l, 1)`.
    pub fn materialize(&self, h: usize, w: usize) -> Array4<f64> {
        let mut m = Array4::zeros((h, w, self.bits.len(), 1));
        for (t, &b) in self.bits.iter().enumerate() {
            m.slice_mut(ndarray::s![.., .., t, ..]).fill(b as f64);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ConditionMode {
    Unconditional,
    /// The first `k` frames are given.
    Predict { k: usize },
    /// Frames on the sparse grid `0, stride, 2*stride, ...` are given; both
    /// endpoints are conditional, so `(l - 1)` must be divisible by `stride`.
    Interpolate { stride: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub mode: ConditionMode,
    /// Noise timestep applied to conditional frames (0 = none). Clamped to
    /// `s_max` before use.
    pub perturb_s: usize,
    pub s_max: usize,
}

impl ConditionSpec {
    pub fn unconditional() -> Self {
        Self { mode: ConditionMode::Unconditional, perturb_s: 0, s_max: 0 }
    }

    pub fn predict(k: usize, perturb_s: usize, s_max: usize) -> Self {
        Self { mode: ConditionMode::Predict { k }, perturb_s, s_max }
    }

    pub fn interpolate(stride: usize, perturb_s: usize, s_max: usize) -> Self {
        Self { mode: ConditionMode::Interpolate { stride }, perturb_s, s_max }
    }

    /// The perturbation level actually applied to conditioning frames:
    /// `min(perturb_s, s_max)` — or 0 when the mode carries no conditioning,
    /// so logs never report a perturbation that touched nothing.
    pub fn effective_perturb_s(&self) -> usize {
        match self.mode {
            ConditionMode::Unconditional => 0,
            _ => self.perturb_s.min(self.s_max),
        }
    }
}

/// Materialize the mask for a clip of `l` latent frames.
pub fn build_mask(spec: &ConditionSpec, l: usize) -> Result<BinaryClip> {
    if l == 0 {
        return Err(Error::config("mask needs l >= 1"));
    }
    match spec.mode {
        ConditionMode::Unconditional => Ok(BinaryClip::zeros(l)),
        ConditionMode::Predict { k } => {
            if k >= l {
                return Err(Error::config(format!(
                    "predict mode needs k < l, got k={k}, l={l}"
                )));
            }
            let mut bits = vec![0u8; l];
            for b in bits.iter_mut().take(k) {
                *b = 1;
            }
            BinaryClip::new(bits)
        }
        ConditionMode::Interpolate { stride } => {
            if stride < 2 {
                return Err(Error::config(format!(
                    "interpolate mode needs stride >= 2, got {stride}"
                )));
            }
            if !(l - 1).is_multiple_of(stride) {
                return Err(Error::config(format!(
                    "interpolate mode needs the last frame on the sparse grid: (l-1) = {} not divisible by stride {stride}",
                    l - 1
                )));
            }
            let mut bits = vec![0u8; l];
            for (i, b) in bits.iter_mut().enumerate() {
                if i % stride == 0 {
                    *b = 1;
                }
            }
            BinaryClip::new(bits)
        }
    }
}

/// Frame-wise source selection without the mask channel: at frames where the
/// mask is 1 take `source`, elsewhere `z_t`. Inputs are `[c, l, h, w]`.
pub fn substitute_frames(z_t: &Arr, source: &Arr, mask: &BinaryClip) -> Result<Arr> {
    if z_t.shape() != source.shape() {
        return Err(Error::shape(format!(
            "substitute_frames: z_t {:?} vs source {:?}",
            z_t.shape(),
            source.shape()
        )));
    }
    let s = z_t.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("latent must be [c, l, h, w], got {s:?}")));
    }
    if s[1] != mask.len() {
        return Err(Error::shape(format!(
            "mask covers {} frames, latent has {}",
            mask.len(),
            s[1]
        )));
    }
    let mut out = z_t.clone();
    for (t, &bit) in mask.bits().iter().enumerate() {
        if bit == 1 {
            out.slice_mut(ndarray::s![.., t, .., ..])
                .assign(&source.slice(ndarray::s![.., t, .., ..]));
        }
    }
    Ok(out)
}

/// Build the network input for one example: substituted latent plus the mask
/// as channel `c+1`. `[c, l, h, w] -> [c+1, l, h, w]`.
pub fn apply_condition(z_t: &Arr, source: &Arr, mask: &BinaryClip) -> Result<Arr> {
    let mixed = substitute_frames(z_t, source, mask)?;
    let s = mixed.shape().to_vec();
    let (c, l, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = ArrayD::zeros(IxDyn(&[c + 1, l, h, w]));
    out.slice_mut(ndarray::s![..c, .., .., ..]).assign(&mixed);
    for (t, &bit) in mask.bits().iter().enumerate() {
        out.slice_mut(ndarray::s![c, t, .., ..]).fill(bit as f64);
    }
    Ok(out)
}

/// Batched [`apply_condition`] with one mask shared across the batch:
/// `[B, c, l, h, w] -> [B, c+1, l, h, w]`.
pub fn apply_condition_net(z_t: &Arr, source: &Arr, mask: &BinaryClip) -> Result<Arr> {
    if z_t.shape() != source.shape() {
        return Err(Error::shape(format!(
            "apply_condition_net: z_t {:?} vs source {:?}",
            z_t.shape(),
            source.shape()
        )));
    }
    let s = z_t.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("latent must be [B, c, l, h, w], got {s:?}")));
    }
    let (bsz, c, l, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = ArrayD::zeros(IxDyn(&[bsz, c + 1, l, h, w]));
    for b in 0..bsz {
        let zb = z_t.index_axis(ndarray::Axis(0), b).to_owned();
        let sb = source.index_axis(ndarray::Axis(0), b).to_owned();
        let one = apply_condition(&zb, &sb, mask)?;
        out.index_axis_mut(ndarray::Axis(0), b).assign(&one);
    }
    Ok(out)
}

/// Noise the conditional source to timestep `min(s, s_max)`; `s = 0` is the
/// identity. Clamping is silent apart from a debug log line.
pub fn perturb_condition(
    z0_cond: &Arr,
    s: usize,
    s_max: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Arr> {
    let s_eff = s.min(s_max);
    if s_eff != s {
        log::debug!("perturbation level {s} clamped to s_max {s_max}");
    }
    if s_eff == 0 {
        return Ok(z0_cond.clone());
    }
    let eps = crate::diffusion::randn(rng, z0_cond.shape());
    q_sample(z0_cond, s_eff, &eps, schedule)
}

// ---- training-mode distribution ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Unconditional,
    Prediction,
    Interpolation,
}

/// How training modes are drawn for one model role.
#[derive(Debug, Clone)]
pub struct ModePolicy {
    pub role: Role,
    /// Probability of an unconditional (all-zero mask) example.
    pub uncond_p: f64,
    /// Candidate values of `k` for prediction mode, drawn uniformly.
    pub k_choices: Vec<usize>,
    /// Sparse stride for interpolation mode.
    pub stride: usize,
    pub s_max: usize,
}

impl ModePolicy {
    /// Default policy for a role at clip length `l`: unconditional trains
    /// only zero masks; prediction mixes (0.5, 0.5) with `k` uniform over
    /// `1..=l/2`; interpolation mixes (0.1, 0.9) at the given stride.
    pub fn for_role(role: Role, l: usize, stride: usize, s_max: usize) -> Result<Self> {
        let policy = match role {
            Role::Unconditional => Self {
                role,
                uncond_p: 1.0,
                k_choices: vec![],
                stride: 2,
                s_max,
            },
            Role::Prediction => {
                if l < 2 {
                    return Err(Error::config(format!(
                        "prediction policy needs l >= 2 so at least one frame can be given; got l {l}"
                    )));
                }
                let k_hi = (l / 2).max(1);
                Self {
                    role,
                    uncond_p: 0.5,
                    k_choices: (1..=k_hi.min(l - 1)).collect(),
                    stride: 2,
                    s_max,
                }
            }
            Role::Interpolation => {
                if stride < 2 || !(l - 1).is_multiple_of(stride) {
                    return Err(Error::config(format!(
                        "interpolation policy needs stride >= 2 dividing l-1; got stride {stride}, l {l}"
                    )));
                }
                Self { role, uncond_p: 0.1, k_choices: vec![], stride, s_max }
            }
        };
        Ok(policy)
    }
}

/// Draw one training condition: mode first, then the mode's parameter, then
/// the perturbation level (uniform over `0..=s_max`).
pub fn sample_training_mode(policy: &ModePolicy, rng: &mut ChaCha8Rng) -> ConditionSpec {
    let uncond = policy.uncond_p >= 1.0 || rng.gen_range(0.0..1.0) < policy.uncond_p;
    let mode = if uncond {
        ConditionMode::Unconditional
    } else {
        match policy.role {
            Role::Unconditional => ConditionMode::Unconditional,
            Role::Prediction => {
                let k = policy.k_choices[rng.gen_range(0..policy.k_choices.len())];
                ConditionMode::Predict { k }
            }
            Role::Interpolation => ConditionMode::Interpolate { stride: policy.stride },
        }
    };
    let perturb_s = rng.gen_range(0..=policy.s_max);
    ConditionSpec { mode, perturb_s, s_max: policy.s_max }
}
