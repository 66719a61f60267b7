//! Training loops, sampling commands, and evaluation: the glue binding the
//! dataset, autoencoder, diffusion model, conditioning, long-video
//! orchestration, and metrics into reproducible runs.
//!
//! Reproducibility contract: every random decision draws from a stream
//! derived from (run seed, purpose label, step index), so a (config, seed)
//! pair replays bit-identically on one platform, and resuming from a
//! checkpoint continues the same sequence.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;

use kinema_grad::io as grad_io;
use kinema_grad::nn::Params;
use kinema_grad::optim::{Adam, AdamConfig, Ema};
use kinema_grad::Tape;

use crate::autoencoder::{
    compute_latent_stats, Autoencoder3d, Discriminator, LatentStats,
};
use crate::checkpoint::{
    check_config_match, config_value, load_checkpoint, read_manifest, save_checkpoint,
    CheckpointManifest,
};
use crate::conditioning::{sample_training_mode, ConditionMode, ConditionSpec, ModePolicy, Role};
use crate::config::{claim_run_dir, RunConfig};
use crate::data::{
    load_video_dir, make_moving_shapes, sample_clip, unit_to_pixel, Source, VideoDataset,
    VideoTensor,
};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::training_loss;
use crate::error::{Error, Result};
use crate::eval::{degradation_curve, encoder_features, plot_curve};
use crate::longvideo::{
    autoregressive_extend, decode_windows, hierarchical_generate, plan_extension,
    plan_hierarchy, Orchestration, WindowSampler,
};
use crate::rawclip::write_raw_clip;
use crate::rng::stream;
use crate::Arr;

pub const EMA_FILE: &str = "ema.bin";
pub const DISC_FILE: &str = "disc.bin";

pub fn role_name(role: Role) -> &'static str {
    match role {
        Role::Unconditional => "unconditional",
        Role::Prediction => "prediction",
        Role::Interpolation => "interpolation",
    }
}

pub fn build_dataset(cfg: &RunConfig) -> Result<VideoDataset> {
    match cfg.data.spec.source {
        Source::SyntheticShapes => make_moving_shapes(cfg.data.spec.clone()),
        Source::FrameFolder => {
            let path = cfg
                .data
                .path
                .as_ref()
                .ok_or_else(|| Error::config("frame-folder data source needs data.path"))?;
            load_video_dir(path, cfg.data.spec.clone())
        }
    }
}

/// Stack sampled clips into `[B, 3, L, H, W]`.
fn batch_clips(
    dataset: &VideoDataset,
    rng: &mut rand_chacha::ChaCha8Rng,
    batch: usize,
) -> Result<Arr> {
    let mut views = Vec::with_capacity(batch);
    for _ in 0..batch {
        views.push(sample_clip(dataset, rng)?.to_net().insert_axis(Axis(0)));
    }
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    ndarray::concatenate(Axis(0), &refs)
        .map_err(|e| Error::shape(format!("clip batch stack failed: {e}")))
}

fn keep_tail(tail: &mut Vec<f64>, v: f64) {
    tail.push(v);
    if tail.len() > 50 {
        tail.remove(0);
    }
}

/// Check loaded parameters against a freshly built module: same names, same
/// shapes, nothing missing or extra.
fn check_params_complete(loaded: &Params, fresh: &Params, what: &str) -> Result<()> {
    for (name, arr) in fresh.iter() {
        match loaded.get(name) {
            None => {
                return Err(Error::config(format!(
                    "{what} checkpoint is missing parameter `{name}`"
                )))
            }
            Some(l) if l.shape() != arr.shape() => {
                return Err(Error::config(format!(
                    "{what} checkpoint parameter `{name}` has shape {:?}, expected {:?}",
                    l.shape(),
                    arr.shape()
                )))
            }
            _ => {}
        }
    }
    if loaded.len() != fresh.len() {
        return Err(Error::config(format!(
            "{what} checkpoint holds {} parameters, the configuration builds {}",
            loaded.len(),
            fresh.len()
        )));
    }
    Ok(())
}

// ---- autoencoder training ----

#[derive(Debug)]
pub struct AeOutcome {
    pub checkpoint: PathBuf,
    /// Reconstruction MSE per step.
    pub mse_trace: Vec<f64>,
}

pub fn train_autoencoder(cfg: &RunConfig, resume: Option<&Path>) -> Result<AeOutcome> {
    cfg.validate()?;
    let dataset = build_dataset(cfg)?;
    let out_root = cfg.run.out_dir.join("ae");
    if resume.is_none() {
        claim_run_dir(&out_root)?;
    }

    let mut ps = Params::new();
    let ae = Autoencoder3d::init(&mut ps, &mut stream(cfg.run.seed, "ae-init", 0), &cfg.ae)?;
    let mut ps_d = Params::new();
    let disc = Discriminator::init(
        &mut ps_d,
        &mut stream(cfg.run.seed, "disc-init", 0),
        cfg.ae.base_width,
    );

    let mut start_step: u64 = 0;
    let mut last_good: Option<PathBuf> = None;
    if let Some(dir) = resume {
        let (manifest, loaded) = load_checkpoint(dir)?;
        if manifest.kind != "autoencoder" {
            return Err(Error::config(format!(
                "expected an autoencoder checkpoint, found `{}`",
                manifest.kind
            )));
        }
        check_config_match(&manifest, &config_value(&cfg.ae)?, "autoencoder")?;
        check_params_complete(&loaded, &ps, "autoencoder")?;
        ps = loaded;
        let disc_path = dir.join(DISC_FILE);
        if disc_path.exists() {
            let bytes = fs::read(&disc_path)?;
            let loaded_d = grad_io::read_params(&mut bytes.as_slice())?;
            check_params_complete(&loaded_d, &ps_d, "discriminator")?;
            ps_d = loaded_d;
        }
        start_step = manifest.step;
        last_good = Some(dir.to_path_buf());
        log::info!("resuming autoencoder training at step {}", start_step + 1);
    }

    let mut opt_g = Adam::new(AdamConfig { lr: cfg.ae_train.lr, ..Default::default() });
    let mut opt_d = Adam::new(AdamConfig { lr: cfg.ae_train.disc_lr, ..Default::default() });
    let t0 = Instant::now();
    let mut loss_tail = Vec::new();
    let mut mse_trace = Vec::new();
    let total = cfg.ae_train.steps as u64;

    for step in start_step..total {
        let mut rng = stream(cfg.run.seed, "ae-data", step);
        let x = batch_clips(&dataset, &mut rng, cfg.ae_train.batch_size)?;
        let adv_on = cfg.ae.adv_weight > 0.0 && step >= cfg.ae_train.disc_warmup as u64;

        let tape = Tape::new();
        let xt = tape.constant(x.clone());
        let z = ae.encode_t(&tape, &ps, xt);
        let xr = ae.decode_t(&tape, &ps, z);
        let recon = xr.sub(xt).square().mean_all();
        let loss = if adv_on {
            let fake = disc.forward(&tape, &ps_d, xr);
            recon.add(fake.mean_all().neg().mul_scalar(cfg.ae.adv_weight))
        } else {
            recon
        };
        let loss_v = loss.scalar();
        let recon_v = recon.scalar();
        if !loss_v.is_finite() {
            return Err(Error::numerical(format!(
                "autoencoder loss is non-finite at step {}; last good checkpoint: {}",
                step + 1,
                last_good.map_or("none".to_string(), |p| p.display().to_string())
            )));
        }
        let xr_value = xr.value();
        let grads = tape.backward(loss);
        opt_g.step(&mut ps, &grads);
        mse_trace.push(recon_v);
        keep_tail(&mut loss_tail, loss_v);

        if adv_on {
            let tape_d = Tape::new();
            let real = disc.forward(&tape_d, &ps_d, tape_d.constant(x.clone()));
            let fake = disc.forward(&tape_d, &ps_d, tape_d.constant(xr_value));
            let d_loss = real
                .neg()
                .add_scalar(1.0)
                .relu()
                .mean_all()
                .add(fake.add_scalar(1.0).relu().mean_all());
            if !d_loss.scalar().is_finite() {
                return Err(Error::numerical(format!(
                    "discriminator loss is non-finite at step {}",
                    step + 1
                )));
            }
            let gd = tape_d.backward(d_loss);
            opt_d.step(&mut ps_d, &gd);
        }

        if (step + 1) % cfg.ae_train.log_every as u64 == 0 {
            log::info!("ae step {}/{total}: mse {recon_v:.6} loss {loss_v:.6}", step + 1);
        }

        let done = step + 1 == total;
        if done || (step + 1) % cfg.ae_train.checkpoint_every as u64 == 0 {
            let stats = if done {
                Some(compute_latent_stats(
                    &dataset,
                    &ae,
                    &ps,
                    cfg.ae_train.stats_clips,
                    &mut stream(cfg.run.seed, "ae-stats", 0),
                )?)
            } else {
                None
            };
            let dir = out_root.join(format!("step-{:06}", step + 1));
            let manifest = CheckpointManifest {
                kind: "autoencoder".to_string(),
                step: step + 1,
                wall_seconds: t0.elapsed().as_secs_f64(),
                loss_tail: loss_tail.clone(),
                config: config_value(&cfg.ae)?,
                latent_stats: stats,
                schedule: None,
                weights_sha256: String::new(),
            };
            save_checkpoint(&dir, &manifest, &ps)?;
            let mut disc_bytes = Vec::new();
            grad_io::write_params(&mut disc_bytes, &ps_d)?;
            fs::write(dir.join(DISC_FILE), disc_bytes)?;
            last_good = Some(dir);
        }
    }
    Ok(AeOutcome { checkpoint: last_good.expect("final step always checkpoints"), mse_trace })
}

// ---- diffusion training ----

fn dm_config_value(cfg: &RunConfig, role: Role) -> Result<serde_json::Value> {
    let dcfg = cfg.denoiser_config(role);
    config_value(&serde_json::json!({
        "role": role_name(role),
        "denoiser": dcfg,
        "schedule": cfg.schedule,
        "s_max": cfg.conditioning.s_max,
    }))
}

fn load_autoencoder(cfg: &RunConfig, dir: &Path) -> Result<(Autoencoder3d, Params, LatentStats)> {
    let (manifest, loaded) = load_checkpoint(dir)?;
    if manifest.kind != "autoencoder" {
        return Err(Error::config(format!(
            "expected an autoencoder checkpoint at {}, found `{}`",
            dir.display(),
            manifest.kind
        )));
    }
    check_config_match(&manifest, &config_value(&cfg.ae)?, "autoencoder")?;
    let stats = manifest.latent_stats.ok_or_else(|| {
        Error::config(format!(
            "autoencoder checkpoint {} has no latent statistics (training incomplete?)",
            dir.display()
        ))
    })?;
    let mut fresh = Params::new();
    let ae = Autoencoder3d::init(&mut fresh, &mut stream(0, "bind", 0), &cfg.ae)?;
    check_params_complete(&loaded, &fresh, "autoencoder")?;
    Ok((ae, loaded, stats))
}

#[derive(Debug)]
pub struct DmOutcome {
    pub checkpoint: PathBuf,
    pub loss_trace: Vec<f64>,
    /// (unconditional, conditional) training examples seen.
    pub mode_counts: (u64, u64),
}

/// Cut a window of `l` latent frames at stride `sub` from a normalized
/// latent `[c, l_lat, h, w]`, starting at `p0`.
fn cut_window(net: &Arr, p0: usize, l: usize, sub: usize) -> Arr {
    let s = net.shape();
    let mut out = ArrayD::zeros(IxDyn(&[s[0], l, s[2], s[3]]));
    for j in 0..l {
        out.slice_mut(ndarray::s![.., j, .., ..])
            .assign(&net.slice(ndarray::s![.., p0 + j * sub, .., ..]));
    }
    out
}

pub fn train_diffusion(
    cfg: &RunConfig,
    role: Role,
    ae_dir: &Path,
    init_from: Option<&Path>,
    resume: Option<&Path>,
) -> Result<DmOutcome> {
    cfg.validate()?;
    let (ae, ae_ps, stats) = load_autoencoder(cfg, ae_dir)?;
    let dataset = build_dataset(cfg)?;
    let dcfg = cfg.denoiser_config(role);
    let name = role_name(role);
    let out_root = cfg.run.out_dir.join(format!("dm-{name}"));
    if resume.is_none() {
        claim_run_dir(&out_root)?;
    }

    let mut ps = Params::new();
    let denoiser = Denoiser::init(&mut ps, &mut stream(cfg.run.seed, "dm-init", 0), &dcfg)?;
    let expected_config = dm_config_value(cfg, role)?;

    let mut start_step: u64 = 0;
    let mut last_good: Option<PathBuf> = None;
    let mut ema = Ema::new(cfg.dm_train.ema_decay, &ps);
    if let Some(dir) = resume {
        let (manifest, loaded) = load_checkpoint(dir)?;
        if manifest.kind != format!("diffusion:{name}") {
            return Err(Error::config(format!(
                "expected a diffusion:{name} checkpoint, found `{}`",
                manifest.kind
            )));
        }
        check_config_match(&manifest, &expected_config, "diffusion")?;
        check_params_complete(&loaded, &ps, "diffusion")?;
        ps = loaded;
        start_step = manifest.step;
        let ema_path = dir.join(EMA_FILE);
        ema = if ema_path.exists() {
            let bytes = fs::read(&ema_path)?;
            let shadow = grad_io::read_params(&mut bytes.as_slice())?;
            check_params_complete(&shadow, &ps, "EMA")?;
            Ema::from_shadow(cfg.dm_train.ema_decay, shadow)
        } else {
            Ema::new(cfg.dm_train.ema_decay, &ps)
        };
        last_good = Some(dir.to_path_buf());
        log::info!("resuming diffusion:{name} training at step {}", start_step + 1);
    } else if let Some(dir) = init_from {
        let (manifest, loaded) = load_checkpoint(dir)?;
        if !manifest.kind.starts_with("diffusion:") {
            return Err(Error::config(format!(
                "init-from checkpoint must be a diffusion model, found `{}`",
                manifest.kind
            )));
        }
        let mut adopted = 0usize;
        let mut skipped = 0usize;
        for (pname, arr) in loaded.iter() {
            match ps.get(pname) {
                Some(cur) if cur.shape() == arr.shape() => {
                    ps.insert(pname.to_string(), arr.clone());
                    adopted += 1;
                }
                _ => skipped += 1,
            }
        }
        log::info!(
            "initialized diffusion:{name} from {}: {adopted} parameters adopted, {skipped} skipped",
            dir.display()
        );
        ema = Ema::new(cfg.dm_train.ema_decay, &ps);
    }

    let schedule = cfg.make_noise_schedule()?;
    let policy = ModePolicy::for_role(
        role,
        dcfg.latent_frames,
        cfg.conditioning.interp_stride,
        cfg.conditioning.s_max,
    )?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.dm_train.lr, ..Default::default() });

    let sub = cfg.window_stride(role);
    let l = dcfg.latent_frames;
    let latent_len = cfg.latent_len_per_clip();
    let span = (l - 1) * sub + 1;
    let (c, _lh) = (cfg.ae.c, cfg.latent_hw());

    let t0 = Instant::now();
    let mut loss_tail = Vec::new();
    let mut loss_trace = Vec::new();
    let mut mode_lines = Vec::new();
    let mut uncond_seen = 0u64;
    let mut cond_seen = 0u64;
    let total = cfg.dm_train.steps as u64;
    let data_label = format!("dm-{name}-data");
    let mode_label = format!("dm-{name}-mode");
    let loss_label = format!("dm-{name}-loss");

    for step in start_step..total {
        let mut rng_data = stream(cfg.run.seed, &data_label, step);
        let mut rng_mode = stream(cfg.run.seed, &mode_label, step);
        let mut rng_loss = stream(cfg.run.seed, &loss_label, step);

        let batch = cfg.dm_train.batch_size;
        let (lh, lw) = cfg.latent_hw();
        let mut z0 = ArrayD::zeros(IxDyn(&[batch, c, l, lh, lw]));
        let mut specs: Vec<ConditionSpec> = Vec::with_capacity(batch);
        for b in 0..batch {
            let clip = sample_clip(&dataset, &mut rng_data)?;
            let latent = stats.normalize(&ae.encode(&ae_ps, &clip)?)?;
            let net = latent.to_net();
            let max_start = latent_len - span;
            let p0 = if max_start == 0 { 0 } else { rng_data.gen_range(0..=max_start) };
            z0.index_axis_mut(Axis(0), b).assign(&cut_window(&net, p0, l, sub));
            let spec = sample_training_mode(&policy, &mut rng_mode);
            if spec.mode == ConditionMode::Unconditional {
                uncond_seen += 1;
            } else {
                cond_seen += 1;
            }
            mode_lines.push(format!(
                "step {} example {b}: {:?} perturb_s {}",
                step + 1,
                spec.mode,
                spec.effective_perturb_s()
            ));
            specs.push(spec);
        }

        let tape = Tape::new();
        let (loss, draw) =
            training_loss(&denoiser, &tape, &ps, &z0, &specs, &schedule, &mut rng_loss)?;
        let lv = loss.scalar();
        if !lv.is_finite() {
            return Err(Error::numerical(format!(
                "diffusion loss is non-finite at step {}; last good checkpoint: {}",
                step + 1,
                last_good.map_or("none".to_string(), |p| p.display().to_string())
            )));
        }
        let grads = tape.backward(loss);
        opt.step(&mut ps, &grads);
        ema.update(&ps);
        loss_trace.push(lv);
        keep_tail(&mut loss_tail, lv);

        if (step + 1) % cfg.dm_train.log_every as u64 == 0 {
            log::info!(
                "dm-{name} step {}/{total}: loss {lv:.6} (t draws {:?})",
                step + 1,
                draw.ts
            );
        }

        let done = step + 1 == total;
        if done || (step + 1) % cfg.dm_train.checkpoint_every as u64 == 0 {
            let dir = out_root.join(format!("step-{:06}", step + 1));
            let manifest = CheckpointManifest {
                kind: format!("diffusion:{name}"),
                step: step + 1,
                wall_seconds: t0.elapsed().as_secs_f64(),
                loss_tail: loss_tail.clone(),
                config: expected_config.clone(),
                latent_stats: None,
                schedule: Some(cfg.schedule),
                weights_sha256: String::new(),
            };
            save_checkpoint(&dir, &manifest, &ps)?;
            let mut ema_bytes = Vec::new();
            grad_io::write_params(&mut ema_bytes, ema.shadow())?;
            fs::write(dir.join(EMA_FILE), ema_bytes)?;
            fs::write(out_root.join("modes.log"), mode_lines.join("\n") + "\n")?;
            last_good = Some(dir);
        }
    }
    Ok(DmOutcome {
        checkpoint: last_good.expect("final step always checkpoints"),
        loss_trace,
        mode_counts: (uncond_seen, cond_seen),
    })
}

// ---- sampling commands ----

/// Load a diffusion checkpoint for sampling (EMA weights when configured and
/// present), verifying kind, config, schedule, and parameter completeness.
pub fn load_diffusion(
    cfg: &RunConfig,
    dir: &Path,
    role: Role,
) -> Result<(Denoiser, Params, DenoiserConfig)> {
    let (manifest, raw) = load_checkpoint(dir)?;
    let name = role_name(role);
    if manifest.kind != format!("diffusion:{name}") {
        return Err(Error::config(format!(
            "expected a diffusion:{name} checkpoint at {}, found `{}`",
            dir.display(),
            manifest.kind
        )));
    }
    check_config_match(&manifest, &dm_config_value(cfg, role)?, "diffusion")?;
    match manifest.schedule {
        Some(s) if s == cfg.schedule => {}
        other => {
            return Err(Error::config(format!(
                "checkpoint schedule {other:?} does not match the configured {:?}",
                cfg.schedule
            )))
        }
    }
    let dcfg = cfg.denoiser_config(role);
    let mut fresh = Params::new();
    let denoiser = Denoiser::init(&mut fresh, &mut stream(0, "bind", 0), &dcfg)?;
    let ema_path = dir.join(EMA_FILE);
    let ps = if cfg.dm_train.use_ema && ema_path.exists() {
        let bytes = fs::read(&ema_path)?;
        grad_io::read_params(&mut bytes.as_slice())?
    } else {
        raw
    };
    check_params_complete(&ps, &fresh, "diffusion")?;
    Ok((denoiser, ps, dcfg))
}

/// Write decoded frames, the raw clip, and the orchestration log.
fn write_video_outputs(out: &Path, video: &VideoTensor, orch: &Orchestration) -> Result<()> {
    claim_run_dir(out)?;
    let (h, w, l) = video.dims();
    for t in 0..l {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = image::Rgb([
                    unit_to_pixel(video.pixels[[y, x, t, 0]]),
                    unit_to_pixel(video.pixels[[y, x, t, 1]]),
                    unit_to_pixel(video.pixels[[y, x, t, 2]]),
                ]);
                img.put_pixel(x as u32, y as u32, px);
            }
        }
        let path = out.join(format!("frame-{t:06}.png"));
        img.save(&path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("frame write failed: {e}"))))?;
    }
    write_raw_clip(&out.join("clip.raw"), video)?;
    let mut log_text = orch.log_lines().join("\n");
    log_text.push('\n');
    fs::write(out.join("orchestration.log"), log_text)?;
    Ok(())
}

fn latent_target(cfg: &RunConfig, frames: usize) -> Result<usize> {
    if frames == 0 || !frames.is_multiple_of(cfg.ae.f_t) {
        return Err(Error::config(format!(
            "requested {frames} frames is not a positive multiple of the temporal factor {}",
            cfg.ae.f_t
        )));
    }
    Ok(frames / cfg.ae.f_t)
}

fn window_sampler<'a>(
    cfg: &RunConfig,
    net: &'a Denoiser,
    ps: &'a Params,
    schedule: &'a crate::diffusion::NoiseSchedule,
) -> WindowSampler<'a> {
    WindowSampler {
        net,
        ps,
        schedule,
        sampler: cfg.sampler,
        noise_level: cfg.conditioning.noise_level,
        s_max: cfg.conditioning.s_max,
    }
}

/// One unconditional window: `latent_window * f_t` pixel frames.
pub fn sample_command(
    cfg: &RunConfig,
    ae_dir: &Path,
    dm_dir: &Path,
    frames: usize,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    let (ae, ae_ps, stats) = load_autoencoder(cfg, ae_dir)?;
    let (net, ps, dcfg) = load_diffusion(cfg, dm_dir, Role::Unconditional)?;
    let expect = dcfg.latent_frames * cfg.ae.f_t;
    if frames != expect {
        return Err(Error::config(format!(
            "sample emits one window of {expect} frames; request {expect} or use extend"
        )));
    }
    let schedule = cfg.make_noise_schedule()?;
    let ws = window_sampler(cfg, &net, &ps, &schedule);
    let (lh, lw) = cfg.latent_hw();
    let source = ArrayD::zeros(IxDyn(&[cfg.ae.c, dcfg.latent_frames, lh, lw]));
    let (z, mut record) =
        ws.generate_window(ConditionMode::Unconditional, &source, "sample", 0)?;
    record.emitted = dcfg.latent_frames;
    let mut orch = Orchestration::new();
    orch.records.push(record);
    let video = decode_windows(&ae, &ae_ps, &stats, &z, dcfg.latent_frames)?;
    write_video_outputs(out, &video, &orch)
}

/// Autoregressive extension to `frames` pixel frames.
pub fn extend_command(
    cfg: &RunConfig,
    ae_dir: &Path,
    dm_dir: &Path,
    frames: usize,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    let (ae, ae_ps, stats) = load_autoencoder(cfg, ae_dir)?;
    let (net, ps, dcfg) = load_diffusion(cfg, dm_dir, Role::Prediction)?;
    let l_total = latent_target(cfg, frames)?;
    let plan = plan_extension(l_total, dcfg.latent_frames, cfg.conditioning.context)?;
    let schedule = cfg.make_noise_schedule()?;
    let ws = window_sampler(cfg, &net, &ps, &schedule);
    let (lh, lw) = cfg.latent_hw();
    let source = ArrayD::zeros(IxDyn(&[cfg.ae.c, dcfg.latent_frames, lh, lw]));

    let mut orch = Orchestration::new();
    let (first, mut record) =
        ws.generate_window(ConditionMode::Unconditional, &source, "extend", 0)?;
    record.emitted = dcfg.latent_frames.min(l_total);
    orch.records.push(record);
    let z = if l_total > dcfg.latent_frames {
        autoregressive_extend(&ws, &first, &plan, "extend", 1, &mut orch)?
    } else {
        first
    };
    let video = decode_windows(&ae, &ae_ps, &stats, &z, dcfg.latent_frames)?;
    write_video_outputs(out, &video, &orch)
}

/// Coarse-to-fine generation to `frames` pixel frames: sparse anchors from
/// the prediction model, gaps filled by the interpolation model. The dense
/// anchor grid may overshoot the request by a few frames; the result is
/// truncated before decoding.
pub fn hierarchical_command(
    cfg: &RunConfig,
    ae_dir: &Path,
    dm_sparse_dir: &Path,
    dm_interp_dir: &Path,
    frames: usize,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    let (ae, ae_ps, stats) = load_autoencoder(cfg, ae_dir)?;
    let (sparse_net, sparse_ps, sparse_cfg) = load_diffusion(cfg, dm_sparse_dir, Role::Prediction)?;
    let (interp_net, interp_ps, interp_cfg) = load_diffusion(cfg, dm_interp_dir, Role::Interpolation)?;
    let stride = cfg.conditioning.interp_stride;
    if cfg.dm_train.temporal_subsample != stride {
        log::warn!(
            "sparse model was trained at latent stride {} but the hierarchy uses {stride}",
            cfg.dm_train.temporal_subsample
        );
    }
    let l_target = latent_target(cfg, frames)?;
    let dense_total = if (l_target - 1) % stride == 0 {
        l_target
    } else {
        l_target + stride - (l_target - 1) % stride
    };
    let plan = plan_hierarchy(
        dense_total,
        stride,
        sparse_cfg.latent_frames,
        cfg.conditioning.context,
        interp_cfg.latent_frames,
    )?;
    let schedule = cfg.make_noise_schedule()?;
    let sparse_ws = window_sampler(cfg, &sparse_net, &sparse_ps, &schedule);
    let interp_ws = window_sampler(cfg, &interp_net, &interp_ps, &schedule);
    let (dense, orch) = hierarchical_generate(
        &sparse_ws,
        &interp_ws,
        &plan,
        cfg.latent_hw(),
        cfg.ae.c,
    )?;
    let z = dense.slice(ndarray::s![.., ..l_target, .., ..]).to_owned().into_dyn();
    let video = decode_windows(&ae, &ae_ps, &stats, &z, sparse_cfg.latent_frames.max(2))?;
    write_video_outputs(out, &video, &orch)
}

// ---- evaluation ----

pub fn eval_command(
    cfg: &RunConfig,
    ae_dir: &Path,
    generated_dir: &Path,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    let (ae, ae_ps, _stats) = load_autoencoder(cfg, ae_dir)?;

    let mut raw_paths: Vec<PathBuf> = fs::read_dir(generated_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "raw"))
        .collect();
    raw_paths.sort();
    if raw_paths.is_empty() {
        return Err(Error::ingest(format!(
            "no .raw clips found in {}",
            generated_dir.display()
        )));
    }
    let mut generated = Vec::with_capacity(raw_paths.len());
    for p in &raw_paths {
        generated.push(crate::rawclip::read_raw_clip(p)?);
    }

    let dataset = build_dataset(cfg)?;
    let clip_len = cfg.eval.clip_len;
    if cfg.data.spec.clip_length < clip_len {
        return Err(Error::config(format!(
            "eval clip_len {clip_len} exceeds the dataset clip length {}",
            cfg.data.spec.clip_length
        )));
    }
    let mut rng = stream(cfg.run.seed, "eval-ref", 0);
    let mut reference = Vec::with_capacity(cfg.eval.n_real);
    for _ in 0..cfg.eval.n_real {
        reference.push(sample_clip(&dataset, &mut rng)?.frames(0, clip_len));
    }

    let series = degradation_curve(&generated, &reference, clip_len, |clip| {
        encoder_features(&ae, &ae_ps, clip)
    })?;

    claim_run_dir(out)?;
    fs::write(out.join("curve.txt"), series.table())?;
    let records = serde_json::to_string_pretty(&series)
        .map_err(|e| Error::ingest(format!("records serialization failed: {e}")))?;
    fs::write(out.join("records.json"), records)?;
    plot_curve(&series, &out.join("curve.png"))?;
    log::info!(
        "eval: {} points over {} generated videos ({:?})",
        series.values.len(),
        series.n_samples,
        series.metric
    );
    Ok(())
}

/// Human-readable checkpoint summary for `inspect-checkpoint`.
pub fn describe_checkpoint(dir: &Path) -> Result<String> {
    let m = read_manifest(dir)?;
    let mut out = String::new();
    out.push_str(&format!("kind:          {}\n", m.kind));
    out.push_str(&format!("step:          {}\n", m.step));
    out.push_str(&format!("wall seconds:  {:.1}\n", m.wall_seconds));
    out.push_str(&format!("weights sha:   {}\n", m.weights_sha256));
    if let Some(last) = m.loss_tail.last() {
        out.push_str(&format!("last loss:     {last:.6}\n"));
    }
    if let Some(stats) = &m.latent_stats {
        out.push_str(&format!(
            "latent stats:  {} channels over {} samples\n",
            stats.mean.len(),
            stats.sample_count
        ));
    }
    if let Some(s) = &m.schedule {
        out.push_str(&format!(
            "schedule:      t_max {} beta [{}, {}]\n",
            s.t_max, s.beta_start, s.beta_end
        ));
    }
    out.push_str(&format!("config:        {}\n", m.config));
    Ok(out)
}
