//! The diffusion process on normalized latents: variance schedules, the
//! closed-form forward process, posterior-mean parameterization, stochastic
//! (ancestral) and DDIM sampling, and the noise-prediction training loss.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use kinema_grad::nn::Params;
use kinema_grad::{Tape, Tensor};

use crate::conditioning::{build_mask, substitute_frames, ConditionSpec};
use crate::error::{Error, Result};
use crate::Arr;

/// Standard-normal array, sampled element-wise in row-major order.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// How the reverse-process variance is chosen from the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// Variance beta_t (the standard ancestral choice; default).
    #[default]
    Beta,
    /// Variance beta_t^2 (a literal alternative reading; produces nearly
    /// deterministic reverse steps).
    BetaSquared,
}

/// Serializable schedule description, stored in checkpoints so sampling is
/// reproducible from a checkpoint alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { t_max: 1000, beta_start: 1e-4, beta_end: 0.02, sigma_mode: SigmaMode::Beta }
    }
}

/// Variance schedule tables. Timesteps are 1-indexed (`t in 1..=t_max`);
/// `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear schedule: beta interpolated inclusively from `beta_start` to
/// `beta_end` over `t_max` steps.
pub fn make_linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    make_schedule(ScheduleParams { t_max, beta_start, beta_end, sigma_mode: SigmaMode::Beta })
}

pub fn make_schedule(params: ScheduleParams) -> Result<NoiseSchedule> {
    let ScheduleParams { t_max, beta_start, beta_end, .. } = params;
    if t_max < 1 {
        return Err(Error::config("schedule needs t_max >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "schedule bounds must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { params, beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    /// Build a schedule from explicit per-step betas. Unlike the linear
    /// constructor this does not require monotonicity, so callers can pin
    /// exact `(alpha, alpha_bar)` values.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("schedule needs at least one beta"));
        }
        if beta.iter().any(|b| !(0.0..1.0).contains(b) || *b <= 0.0) {
            return Err(Error::config("every beta must lie in (0, 1)".to_string()));
        }
        let params = ScheduleParams {
            t_max: beta.len(),
            beta_start: beta[0],
            beta_end: *beta.last().unwrap(),
            sigma_mode: SigmaMode::Beta,
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { params, beta, alpha, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.params.t_max
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(Error::config(format!(
                "timestep {t} out of schedule range 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Closed-form forward process:
/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample(z0: &Arr, t: usize, eps: &Arr, schedule: &NoiseSchedule) -> Result<Arr> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "q_sample: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Posterior-mean parameterization from the predicted noise:
/// `mu = (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn predict_mu(z_t: &Arr, t: usize, eps_hat: &Arr, schedule: &NoiseSchedule) -> Result<Arr> {
    schedule.check_t(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::shape(format!(
            "predict_mu: z_t {:?} vs eps_hat {:?}",
            z_t.shape(),
            eps_hat.shape()
        )));
    }
    let coeff = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok((z_t - &(eps_hat * coeff)) / schedule.alpha(t).sqrt())
}

/// One ancestral reverse step. At `t = 1` no noise is added, so the final
/// step is the posterior mean exactly.
pub fn ddpm_step(
    z_t: &Arr,
    t: usize,
    eps_hat: &Arr,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Arr> {
    let mu = predict_mu(z_t, t, eps_hat, schedule)?;
    if t == 1 {
        return Ok(mu);
    }
    let var = match schedule.params.sigma_mode {
        SigmaMode::Beta => schedule.beta(t),
        SigmaMode::BetaSquared => schedule.beta(t) * schedule.beta(t),
    };
    let xi = randn(rng, mu.shape());
    Ok(mu + xi * var.sqrt())
}

/// One DDIM step from `t` down to `t_prev` (`t_prev = 0` lands on the data
/// estimate). `eta = 0` is fully deterministic.
pub fn ddim_step(
    z_t: &Arr,
    t: usize,
    t_prev: usize,
    eps_hat: &Arr,
    eta: f64,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Arr> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::config(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("eta must be in [0, 1], got {eta}")));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let z0_hat = (z_t - &(eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt();
    let dir_coeff = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let mut z = z0_hat * ab_p.sqrt() + eps_hat * dir_coeff;
    if sigma > 0.0 {
        z = z + randn(rng, z_t.shape()) * sigma;
    }
    Ok(z)
}

/// The DDIM timestep subsequence: `steps` values evenly spaced over
/// `1..=t_max`, strictly increasing, always ending at `t_max`.
pub fn ddim_times(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_max {
        return Err(Error::config(format!(
            "ddim steps must be in 1..={t_max}, got {steps}"
        )));
    }
    let mut times: Vec<usize> = (1..=steps)
        .map(|j| ((j as f64 * t_max as f64) / steps as f64).round() as usize)
        .map(|t| t.clamp(1, t_max))
        .collect();
    times.dedup();
    debug_assert!(times.windows(2).all(|w| w[0] < w[1]));
    debug_assert_eq!(*times.last().unwrap(), t_max);
    Ok(times)
}

// ---- model interfaces ----

/// Inference-side noise predictor over plain latents `[B, c, l, h, w]`.
/// Conditioning (mask channel, ground-truth substitution, guidance) is bound
/// inside the implementor.
pub trait EpsModel {
    fn eps(&self, z_t: &Arr, t: usize) -> Result<Arr>;
}

/// Training-side noise predictor: differentiable forward over the already
/// mask-concatenated input `[B, c+1, l, h, w]`, with one timestep per batch
/// element.
pub trait EpsModelTrain {
    fn eps_train<'t>(
        &self,
        tape: &'t Tape,
        ps: &Params,
        net_in: &Arr,
        ts: &[usize],
    ) -> Result<Tensor<'t>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Reverse steps; must equal `t_max` for the ancestral sampler.
    pub steps: usize,
    /// DDIM stochasticity in `[0, 1]`.
    pub eta: f64,
    /// Guidance weight; 0 disables the unconditional branch entirely.
    pub guidance_w: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: SamplerKind::Ddpm, steps: 1000, eta: 0.0, guidance_w: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps < 1 || self.steps > schedule.t_max() {
            return Err(Error::config(format!(
                "sampler steps must be in 1..={}, got {}",
                schedule.t_max(),
                self.steps
            )));
        }
        if self.kind == SamplerKind::Ddpm && self.steps != schedule.t_max() {
            return Err(Error::config(format!(
                "the ancestral sampler runs the full schedule; set steps = {} or use ddim",
                schedule.t_max()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

fn check_finite(a: &Arr, what: &str, t: usize) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("{what} produced a non-finite value at t={t}")));
    }
    Ok(())
}

/// Run the reverse process from pure noise down to `z_0` (normalized latent
/// space). The caller provides the rng stream; fixed seeds give bit-identical
/// outputs (for `eta = 0` DDIM the trajectory is deterministic given `z_T`).
pub fn sample(
    model: &dyn EpsModel,
    shape: &[usize],
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Arr> {
    cfg.validate(schedule)?;
    let mut z = randn(rng, shape);
    match cfg.kind {
        SamplerKind::Ddpm => {
            for t in (1..=schedule.t_max()).rev() {
                let eps_hat = model.eps(&z, t)?;
                check_finite(&eps_hat, "noise prediction", t)?;
                z = ddpm_step(&z, t, &eps_hat, schedule, rng)?;
            }
        }
        SamplerKind::Ddim => {
            let times = ddim_times(schedule.t_max(), cfg.steps)?;
            for j in (0..times.len()).rev() {
                let t = times[j];
                let t_prev = if j == 0 { 0 } else { times[j - 1] };
                let eps_hat = model.eps(&z, t)?;
                check_finite(&eps_hat, "noise prediction", t)?;
                z = ddim_step(&z, t, t_prev, &eps_hat, cfg.eta, schedule, rng)?;
            }
        }
    }
    Ok(z)
}

// ---- training loss ----

/// What one loss evaluation drew, for the training log.
#[derive(Debug, Clone)]
pub struct TrainingDraw {
    pub ts: Vec<usize>,
}

/// Noise-prediction loss with explicit randomness, the deterministic core of
/// [`training_loss`]: per-example timestep `ts[b]`, noise target `eps`, and
/// the noise `cond_eps` used to perturb conditional frames.
///
/// Per example: diffuse `z0` to `z_t`, build the conditional source by
/// noising `z0` to the spec's (clamped) perturbation level, substitute it at
/// masked frames of the network input, concatenate the mask channel, and
/// return the mean squared error between the model's prediction and `eps`
/// over all elements.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_given<'t, M: EpsModelTrain>(
    model: &M,
    tape: &'t Tape,
    ps: &Params,
    z0: &Arr,
    specs: &[ConditionSpec],
    schedule: &NoiseSchedule,
    ts: &[usize],
    eps: &Arr,
    cond_eps: &Arr,
) -> Result<Tensor<'t>> {
    let s = z0.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("training latent must be [B, c, l, h, w], got {s:?}")));
    }
    if eps.shape() != z0.shape() || cond_eps.shape() != z0.shape() {
        return Err(Error::shape("noise arrays must match the latent shape".to_string()));
    }
    let (bsz, c, l, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    if specs.len() != bsz || ts.len() != bsz {
        return Err(Error::shape(format!(
            "batch size {bsz} needs {bsz} condition specs and timesteps, got {} and {}",
            specs.len(),
            ts.len()
        )));
    }

    let mut net_in = ArrayD::zeros(IxDyn(&[bsz, c + 1, l, h, w]));
    for b in 0..bsz {
        let z0_b = z0.index_axis(ndarray::Axis(0), b).to_owned();
        let eps_b = eps.index_axis(ndarray::Axis(0), b).to_owned();
        let z_t = q_sample(&z0_b, ts[b], &eps_b, schedule)?;
        let spec = &specs[b];
        let mask = build_mask(spec, l)?;
        let source = if spec.effective_perturb_s() == 0 {
            z0_b.clone()
        } else {
            let ce = cond_eps.index_axis(ndarray::Axis(0), b).to_owned();
            q_sample(&z0_b, spec.effective_perturb_s(), &ce, schedule)?
        };
        let mixed = substitute_frames(&z_t, &source, &mask)?;
        let mut lane = net_in.index_axis_mut(ndarray::Axis(0), b);
        lane.slice_mut(ndarray::s![..c, .., .., ..])
            .assign(&mixed.view().into_dimensionality::<ndarray::Ix4>().unwrap());
        for (t_idx, &bit) in mask.bits().iter().enumerate() {
            lane.slice_mut(ndarray::s![c, t_idx, .., ..]).fill(bit as f64);
        }
    }

    let eps_hat = model.eps_train(tape, ps, &net_in, ts)?;
    if eps_hat.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("model output contains NaN/Inf".to_string()));
    }
    let target = tape.constant(eps.clone());
    Ok(eps_hat.sub(target).square().mean_all())
}

/// Draw `(t, eps, cond_eps)` and evaluate the loss. Timesteps are uniform in
/// `1..=t_max` per example.
pub fn training_loss<'t, M: EpsModelTrain>(
    model: &M,
    tape: &'t Tape,
    ps: &Params,
    z0: &Arr,
    specs: &[ConditionSpec],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<'t>, TrainingDraw)> {
    let bsz = z0.shape()[0];
    let ts: Vec<usize> = (0..bsz).map(|_| rng.gen_range(1..=schedule.t_max())).collect();
    let eps = randn(rng, z0.shape());
    let cond_eps = randn(rng, z0.shape());
    let loss = training_loss_given(model, tape, ps, z0, specs, schedule, &ts, &eps, &cond_eps)?;
    Ok((loss, TrainingDraw { ts }))
}
