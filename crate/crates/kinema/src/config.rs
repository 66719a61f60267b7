//! Declarative run configuration: one TOML document with nested sections
//! covering data, autoencoder, schedule, denoiser, training, conditioning,
//! sampling, and evaluation. Every cross-module consistency rule is checked
//! by [`RunConfig::validate`] before any compute starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::AEConfig;
use crate::conditioning::Role;
use crate::data::{DatasetSpec, Source};
use crate::denoiser::{AttentionMode, DenoiserConfig};
use crate::diffusion::{make_schedule, NoiseSchedule, SamplerConfig, ScheduleParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out_dir: PathBuf::from("runs/out") }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    #[serde(flatten)]
    pub spec: DatasetSpec,
    /// Frame-folder root; required when `source = "frame-folder"`.
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            spec: DatasetSpec {
                source: Source::SyntheticShapes,
                clip_length: 32,
                frame_stride: 1,
                resolution: (64, 64),
                seed: 0,
                num_videos: 32,
                video_frames: 64,
            },
            path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    /// Generator-only steps before the adversarial term engages.
    pub disc_warmup: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Clips used for post-hoc latent statistics.
    pub stats_clips: usize,
}

impl Default for AeTrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 1,
            lr: 1e-4,
            disc_lr: 1e-4,
            disc_warmup: 50,
            checkpoint_every: 100,
            log_every: 25,
            stats_clips: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserSection {
    pub base_width: usize,
    pub ch_mults: Vec<usize>,
    pub attn_levels: Vec<usize>,
    pub temporal_attn_levels: Vec<usize>,
    pub heads: usize,
    pub temb_dim: usize,
    pub attention_mode: AttentionMode,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            base_width: 32,
            ch_mults: vec![1, 2],
            attn_levels: vec![1],
            temporal_attn_levels: vec![1],
            heads: 4,
            temb_dim: 64,
            attention_mode: AttentionMode::Factorized,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DmTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Sample from the EMA weights instead of the raw ones.
    pub use_ema: bool,
    /// Latent window `l` for the unconditional and prediction models.
    pub latent_window: usize,
    /// Latent-frame stride used when windowing training clips; > 1 trains
    /// the unconditional/prediction models on a sparse (anchor) grid. The
    /// interpolation model always trains dense.
    pub temporal_subsample: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for DmTrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 1,
            lr: 2e-4,
            ema_decay: 0.999,
            use_ema: true,
            latent_window: 8,
            temporal_subsample: 1,
            checkpoint_every: 100,
            log_every: 25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningSection {
    /// Cap on conditional perturbation levels.
    pub s_max: usize,
    /// Perturbation level applied to conditioning frames at sampling time
    /// (clamped to `s_max`).
    pub noise_level: usize,
    /// Context frames `k` carried between windows during extension.
    pub context: usize,
    /// Anchor spacing of the hierarchy (latent frames per gap).
    pub interp_stride: usize,
    /// Interpolation model window; must be `m * interp_stride + 1`.
    pub interp_window: usize,
}

impl Default for ConditioningSection {
    fn default() -> Self {
        Self { s_max: 250, noise_level: 200, context: 4, interp_stride: 2, interp_window: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub clip_len: usize,
    /// Reference clips per metric point.
    pub n_real: usize,
    /// Generated samples per metric point.
    pub n_fake: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { clip_len: 16, n_real: 256, n_fake: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub ae: AEConfig,
    pub ae_train: AeTrainSection,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserSection,
    pub dm_train: DmTrainSection,
    pub conditioning: ConditioningSection,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Latent spatial size implied by the data resolution and the spatial
    /// compression factor.
    pub fn latent_hw(&self) -> (usize, usize) {
        let (h, w) = self.data.spec.resolution;
        (h / self.ae.f_s, w / self.ae.f_s)
    }

    /// Latent frames produced by encoding one training clip.
    pub fn latent_len_per_clip(&self) -> usize {
        self.data.spec.clip_length / self.ae.f_t
    }

    /// Model window for a role: the interpolation model has its own window.
    pub fn latent_window(&self, role: Role) -> usize {
        match role {
            Role::Interpolation => self.conditioning.interp_window,
            _ => self.dm_train.latent_window,
        }
    }

    /// Latent-frame stride used when cutting training windows for a role.
    pub fn window_stride(&self, role: Role) -> usize {
        match role {
            Role::Interpolation => 1,
            _ => self.dm_train.temporal_subsample,
        }
    }

    pub fn denoiser_config(&self, role: Role) -> DenoiserConfig {
        let d = &self.denoiser;
        DenoiserConfig {
            latent_channels: self.ae.c,
            latent_frames: self.latent_window(role),
            latent_hw: self.latent_hw(),
            base_width: d.base_width,
            ch_mults: d.ch_mults.clone(),
            attn_levels: d.attn_levels.clone(),
            temporal_attn_levels: d.temporal_attn_levels.clone(),
            heads: d.heads,
            temb_dim: d.temb_dim,
            attention_mode: d.attention_mode,
        }
    }

    pub fn make_noise_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        if self.data.spec.source == Source::FrameFolder && self.data.path.is_none() {
            return Err(Error::config("frame-folder data source needs data.path"));
        }
        self.ae.validate()?;

        let (h, w) = self.data.spec.resolution;
        if h % self.ae.f_s != 0 || w % self.ae.f_s != 0 {
            return Err(Error::config(format!(
                "resolution {h}x{w} is not divisible by the spatial factor {}",
                self.ae.f_s
            )));
        }
        if !self.data.spec.clip_length.is_multiple_of(self.ae.f_t) {
            return Err(Error::config(format!(
                "clip_length {} is not divisible by the temporal factor {}",
                self.data.spec.clip_length, self.ae.f_t
            )));
        }

        let schedule = make_schedule(self.schedule)?;
        if self.conditioning.s_max > schedule.t_max() {
            return Err(Error::config(format!(
                "conditioning s_max {} exceeds the schedule length {}",
                self.conditioning.s_max,
                schedule.t_max()
            )));
        }

        let l = self.dm_train.latent_window;
        if l < 2 {
            return Err(Error::config(format!("latent_window must be >= 2, got {l}")));
        }
        if self.conditioning.context == 0 || self.conditioning.context >= l {
            return Err(Error::config(format!(
                "extension context must be in 1..{l}, got {}",
                self.conditioning.context
            )));
        }
        let stride = self.conditioning.interp_stride;
        let l_int = self.conditioning.interp_window;
        if stride < 2 {
            return Err(Error::config(format!(
                "interp_stride must be >= 2, got {stride}"
            )));
        }
        if l_int < stride + 1 || !(l_int - 1).is_multiple_of(stride) {
            return Err(Error::config(format!(
                "interp_window {l_int} must be m * {stride} + 1"
            )));
        }

        if self.dm_train.temporal_subsample == 0 {
            return Err(Error::config("temporal_subsample must be >= 1"));
        }
        let latent_len = self.latent_len_per_clip();
        let span = (l - 1) * self.dm_train.temporal_subsample + 1;
        if span > latent_len {
            return Err(Error::config(format!(
                "window span {span} latent frames (window {l}, subsample {}) exceeds \
                 the {latent_len} latent frames per clip",
                self.dm_train.temporal_subsample
            )));
        }
        if l_int > latent_len {
            return Err(Error::config(format!(
                "interp_window {l_int} exceeds the {latent_len} latent frames per clip"
            )));
        }

        if !(0.0..1.0).contains(&self.dm_train.ema_decay) {
            return Err(Error::config(format!(
                "ema_decay must be in [0, 1), got {}",
                self.dm_train.ema_decay
            )));
        }
        if self.ae_train.steps == 0 || self.dm_train.steps == 0 {
            return Err(Error::config("step budgets must be >= 1"));
        }
        if self.ae_train.batch_size == 0 || self.dm_train.batch_size == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if self.ae_train.stats_clips < 2 {
            return Err(Error::config("stats_clips must be >= 2"));
        }

        for role in [Role::Unconditional, Role::Prediction, Role::Interpolation] {
            self.denoiser_config(role).validate()?;
        }
        self.sampler.validate(&schedule)?;

        if self.eval.clip_len == 0 || !self.eval.clip_len.is_multiple_of(self.ae.f_t) {
            return Err(Error::config(format!(
                "eval clip_len {} must be a positive multiple of the temporal factor {}",
                self.eval.clip_len, self.ae.f_t
            )));
        }
        if self.eval.n_real < 2 || self.eval.n_fake < 2 {
            return Err(Error::config("eval needs at least 2 real and 2 generated videos"));
        }
        Ok(())
    }
}

/// Claim a fresh run directory: created if missing, rejected if it already
/// holds anything — a run never silently overwrites another.
pub fn claim_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied {
            return Err(Error::config(format!(
                "run directory {} is not empty; refusing to overwrite",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}
