//! Temporary calibration pilots. Not part of the shipped suite: these runs
//! print the measurements used to freeze budgets and tolerances for the
//! acceptance tests, then this file is deleted.

use std::time::Instant;

use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use kinema::autoencoder::{compute_latent_stats, AEConfig, Autoencoder3d, Perceptual};
use kinema::checkpoint::WEIGHTS_FILE;
use kinema::conditioning::{sample_training_mode, ConditionSpec, ModePolicy, Role};
use kinema::config::{AeTrainSection, RunConfig};
use kinema::data::{make_moving_shapes, DatasetSpec, Source, VideoTensor};
use kinema::denoiser::timestep_embedding_batch;
use kinema::diffusion::{
    make_linear_schedule, randn, sample, training_loss, EpsModel, EpsModelTrain, NoiseSchedule,
    SamplerConfig, SamplerKind,
};
use kinema::eval::{degradation_curve, encoder_features, psnr};
use kinema::rng::stream;
use kinema::{Arr, Result};
use kinema_grad::io::read_params;
use kinema_grad::optim::{Adam, AdamConfig};
use kinema_grad::{Params, Tape, Tensor};

// ---- pilot A: toy 2-D mixture round trip ------------------------------

const M1: [f64; 2] = [2.0, 0.0];
const M2: [f64; 2] = [0.0, -2.0];
const COMP_STD: f64 = 0.2;

fn draw_mixture(rng: &mut ChaCha8Rng, n: usize) -> Arr {
    let mut out = ArrayD::zeros(IxDyn(&[n, 2, 1, 1, 1]));
    for b in 0..n {
        let mean = if rng.gen::<f64>() < 0.5 { M1 } else { M2 };
        let noise = randn(rng, &[2]);
        for d in 0..2 {
            out[[b, d, 0, 0, 0]] = mean[d] + COMP_STD * noise[[d]];
        }
    }
    out
}

struct ToyNet {
    l1: kinema_grad::nn::Linear,
    l2: kinema_grad::nn::Linear,
    l3: kinema_grad::nn::Linear,
    temb_dim: usize,
}

impl ToyNet {
    fn init(ps: &mut Params, rng: &mut ChaCha8Rng, hidden: usize, temb_dim: usize) -> Self {
        let l1 = kinema_grad::nn::Linear::init(ps, rng, "toy.l1", 3 + temb_dim, hidden);
        let l2 = kinema_grad::nn::Linear::init(ps, rng, "toy.l2", hidden, hidden);
        let l3 = kinema_grad::nn::Linear::init(ps, rng, "toy.l3", hidden, 2);
        Self { l1, l2, l3, temb_dim }
    }
}

impl EpsModelTrain for ToyNet {
    fn eps_train<'t>(
        &self,
        tape: &'t Tape,
        ps: &Params,
        net_in: &Arr,
        ts: &[usize],
    ) -> Result<Tensor<'t>> {
        let b = net_in.shape()[0];
        let x = tape.constant(net_in.clone()).reshape(&[b, 3]);
        let temb = tape.constant(timestep_embedding_batch(ts, self.temb_dim));
        let mut h = Tensor::concat(1, &[x, temb]);
        h = self.l1.forward(tape, ps, h).relu();
        h = self.l2.forward(tape, ps, h).relu();
        Ok(self.l3.forward(tape, ps, h).reshape(&[b, 2, 1, 1, 1]))
    }
}

struct ToyEps<'a> {
    net: &'a ToyNet,
    ps: &'a Params,
}

impl EpsModel for ToyEps<'_> {
    fn eps(&self, z_t: &Arr, t: usize) -> Result<Arr> {
        let b = z_t.shape()[0];
        let zeros = ArrayD::zeros(IxDyn(&[b, 1, 1, 1, 1]));
        let net_in = ndarray::concatenate(Axis(1), &[z_t.view(), zeros.view()]).unwrap();
        let tape = Tape::new();
        Ok(self.net.eps_train(&tape, self.ps, &net_in, &vec![t; b])?.value())
    }
}

fn moments(samples: &Arr) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = samples.shape()[0] as f64;
    let mut m = [0.0; 2];
    for b in 0..samples.shape()[0] {
        for d in 0..2 {
            m[d] += samples[[b, d, 0, 0, 0]] / n;
        }
    }
    let mut cov = [[0.0; 2]; 2];
    for b in 0..samples.shape()[0] {
        let x = [samples[[b, 0, 0, 0, 0]] - m[0], samples[[b, 1, 0, 0, 0]] - m[1]];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] += x[i] * x[j] / n;
            }
        }
    }
    (m, cov)
}

fn mixture_errors(samples: &Arr) -> (f64, f64) {
    let target_m = [1.0, -1.0];
    let target_cov = [[1.04, 1.00], [1.00, 1.04]];
    let (m, cov) = moments(samples);
    let dm = ((m[0] - target_m[0]).powi(2) + (m[1] - target_m[1]).powi(2)).sqrt();
    let m_norm = (target_m[0].powi(2) + target_m[1].powi(2)).sqrt();
    let mut dc = 0.0;
    let mut c_norm = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            dc += (cov[i][j] - target_cov[i][j]).powi(2);
            c_norm += target_cov[i][j].powi(2);
        }
    }
    (dm / m_norm, dc.sqrt() / c_norm.sqrt())
}

#[test]
fn pilot_toy_mixture() {
    let t0 = Instant::now();
    let schedule = make_linear_schedule(200, 1e-3, 0.1).unwrap();
    let mut ps = Params::new();
    let net = ToyNet::init(&mut ps, &mut stream(77, "toy-init", 0), 96, 48);
    let mut adam = Adam::new(AdamConfig { lr: 2e-3, ..Default::default() });
    let mut data_rng = stream(77, "toy-data", 0);
    let mut loss_rng = stream(77, "toy-loss", 0);
    let specs = vec![ConditionSpec::unconditional(); 256];
    let sampler = SamplerConfig {
        kind: SamplerKind::Ddpm,
        steps: 200,
        eta: 0.0,
        guidance_w: 0.0,
        seed: 0,
    };
    for step in 1..=10_000usize {
        if step == 3000 {
            adam = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
        } else if step == 6000 {
            adam = Adam::new(AdamConfig { lr: 3e-4, ..Default::default() });
        }
        let z0 = draw_mixture(&mut data_rng, 256);
        let tape = Tape::new();
        let (loss, _) =
            training_loss(&net, &tape, &ps, &z0, &specs, &schedule, &mut loss_rng).unwrap();
        let grads = tape.backward(loss);
        adam.step(&mut ps, &grads);
        if [2000, 4000, 6000, 8000, 10_000].contains(&step) {
            let model = ToyEps { net: &net, ps: &ps };
            let seeds: &[u64] = if step == 10_000 { &[1, 2, 3] } else { &[1] };
            for &sd in seeds {
                let mut srng = stream(77, "toy-sample", step as u64 * 10 + sd);
                let z =
                    sample(&model, &[4096, 2, 1, 1, 1], &sampler, &schedule, &mut srng).unwrap();
                let (em, ec) = mixture_errors(&z);
                println!(
                    "toy step {step} seed {sd}: mean_rel {em:.4} cov_rel {ec:.4} ({:.1}s)",
                    t0.elapsed().as_secs_f64()
                );
            }
        }
    }
}

// ---- pilot B: AE overfit PSNR curve ------------------------------------

fn overfit_config(out: &std::path::Path, n_videos: usize, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.seed = 5;
    cfg.run.out_dir = out.to_path_buf();
    cfg.data.spec = DatasetSpec {
        source: Source::SyntheticShapes,
        clip_length: 8,
        frame_stride: 1,
        resolution: (16, 16),
        seed: 21,
        num_videos: n_videos,
        video_frames: 8,
    };
    cfg.ae = AEConfig {
        f_s: 4,
        f_t: 2,
        c: 4,
        base_width: 8,
        adv_weight: 0.0,
        perceptual: Perceptual::Off,
    };
    cfg.ae_train = AeTrainSection {
        steps,
        batch_size: 1,
        lr: 1e-3,
        disc_lr: 1e-3,
        disc_warmup: 1,
        checkpoint_every: 100,
        log_every: 100,
        stats_clips: 2,
    };
    cfg.dm_train.latent_window = 4;
    cfg.conditioning.context = 2;
    cfg.conditioning.interp_stride = 2;
    cfg.conditioning.interp_window = 3;
    cfg.conditioning.s_max = 8;
    cfg.conditioning.noise_level = 6;
    cfg.eval.clip_len = 2;
    cfg
}

fn overfit_psnr(cfg: &RunConfig, step: usize) -> f64 {
    let dir = cfg.run.out_dir.join("ae").join(format!("step-{step:06}"));
    let bytes = std::fs::read(dir.join(WEIGHTS_FILE)).unwrap();
    let ps = read_params(&mut bytes.as_slice()).unwrap();
    let mut scratch = Params::new();
    let ae = Autoencoder3d::init(&mut scratch, &mut stream(0, "bind", 0), &cfg.ae).unwrap();
    let dataset = make_moving_shapes(cfg.data.spec.clone()).unwrap();
    let mut total = 0.0;
    let mut worst = f64::INFINITY;
    for i in 0..dataset.len() {
        let clip = dataset.video(i).unwrap();
        let rec = ae.decode(&ps, &ae.encode(&ps, &clip).unwrap()).unwrap();
        let v = psnr(&clip, &rec).unwrap();
        total += v;
        worst = worst.min(v);
    }
    println!("  step {step}: mean {:.2} dB, min {worst:.2} dB", total / dataset.len() as f64);
    total / dataset.len() as f64
}

#[test]
fn pilot_ae_overfit_single() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = overfit_config(tmp.path(), 1, 600);
    let t0 = Instant::now();
    kinema::pipeline::train_autoencoder(&cfg, None).unwrap();
    println!("single-clip: 600 steps in {:.1}s", t0.elapsed().as_secs_f64());
    for step in (100..=600).step_by(100) {
        overfit_psnr(&cfg, step);
    }
}

#[test]
fn pilot_ae_overfit_eight() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = overfit_config(tmp.path(), 8, 3000);
    cfg.ae_train.batch_size = 2;
    cfg.ae_train.lr = 2e-3;
    cfg.ae_train.checkpoint_every = 500;
    let t0 = Instant::now();
    kinema::pipeline::train_autoencoder(&cfg, None).unwrap();
    println!("8-clip stage 1: 3000 steps in {:.1}s", t0.elapsed().as_secs_f64());
    for step in (1000..=3000).step_by(1000) {
        overfit_psnr(&cfg, step);
    }
    let last = tmp.path().join("ae").join("step-003000");
    cfg.ae_train.steps = 5000;
    cfg.ae_train.lr = 5e-4;
    kinema::pipeline::train_autoencoder(&cfg, Some(&last)).unwrap();
    println!("8-clip stage 2 done at {:.1}s", t0.elapsed().as_secs_f64());
    for step in (3500..=5000).step_by(500) {
        overfit_psnr(&cfg, step);
    }
}

// ---- pilot C: latent-stats margins --------------------------------------

#[test]
fn pilot_stats_margins() {
    let spec = DatasetSpec {
        source: Source::SyntheticShapes,
        clip_length: 8,
        frame_stride: 1,
        resolution: (16, 16),
        seed: 33,
        num_videos: 64,
        video_frames: 40,
    };
    let dataset = make_moving_shapes(spec).unwrap();
    let acfg = AEConfig {
        f_s: 4,
        f_t: 2,
        c: 4,
        base_width: 4,
        adv_weight: 0.0,
        perceptual: Perceptual::Off,
    };
    let mut ps = Params::new();
    let ae = Autoencoder3d::init(&mut ps, &mut stream(9, "ae-init", 0), &acfg).unwrap();
    let t0 = Instant::now();
    let stats =
        compute_latent_stats(&dataset, &ae, &ps, 1024, &mut stream(9, "stats", 0)).unwrap();
    println!("stats over 1024 clips in {:.1}s", t0.elapsed().as_secs_f64());

    for (label, index) in [("same-corpus", 0u64), ("fresh", 1u64)] {
        let mut rng = stream(9, "stats", index);
        let mut sum = vec![0.0; 4];
        let mut sumsq = vec![0.0; 4];
        let mut count = 0u64;
        for _ in 0..1024 {
            let clip = kinema::data::sample_clip(&dataset, &mut rng).unwrap();
            let z = stats.normalize_net(&ae.encode(&ps, &clip).unwrap().to_net()).unwrap();
            for (idx, &v) in z.indexed_iter() {
                sum[idx[0]] += v;
                sumsq[idx[0]] += v * v;
            }
            count += (z.len() / 4) as u64;
        }
        let n = count as f64;
        let worst_mean = (0..4).map(|c| (sum[c] / n).abs()).fold(0.0, f64::max);
        let worst_std = (0..4)
            .map(|c| ((sumsq[c] / n - (sum[c] / n).powi(2)).sqrt() - 1.0).abs())
            .fold(0.0, f64::max);
        println!("{label}: worst |mean| {worst_mean:.2e}, worst |std-1| {worst_std:.2e}");
    }
}

// ---- pilot D: corruption-curve monotonicity ------------------------------

#[test]
fn pilot_corruption_curve() {
    let spec = DatasetSpec {
        source: Source::SyntheticShapes,
        clip_length: 16,
        frame_stride: 1,
        resolution: (16, 16),
        seed: 41,
        num_videos: 8,
        video_frames: 16,
    };
    let dataset = make_moving_shapes(spec).unwrap();
    let acfg = AEConfig {
        f_s: 4,
        f_t: 2,
        c: 4,
        base_width: 4,
        adv_weight: 0.0,
        perceptual: Perceptual::Off,
    };
    let mut ps = Params::new();
    let ae = Autoencoder3d::init(&mut ps, &mut stream(10, "ae-init", 0), &acfg).unwrap();
    let refs: Vec<VideoTensor> = (0..8).map(|i| dataset.video(i).unwrap()).collect();

    for lambda_step in [0.05, 0.15, 0.25] {
        let mut noise_rng = stream(10, "corrupt", (lambda_step * 100.0) as u64);
        let gens: Vec<VideoTensor> = refs
            .iter()
            .map(|r| {
                let mut px = Array4::zeros((16, 16, 64, 3));
                for k in 0..4usize {
                    let lam = lambda_step * k as f64;
                    let noise = randn(&mut noise_rng, &[16, 16, 16, 3]);
                    let mut win = px.slice_mut(ndarray::s![.., .., k * 16..(k + 1) * 16, ..]);
                    for (idx, v) in win.indexed_iter_mut() {
                        let (h, w, l, ch) = idx;
                        *v = (1.0 - lam) * r.pixels[[h, w, l, ch]]
                            + lam * noise[[h, w, l, ch]].clamp(-1.0, 1.0);
                    }
                }
                VideoTensor::new(px)
            })
            .collect();
        let series =
            degradation_curve(&gens, &refs, 16, |c| encoder_features(&ae, &ps, c)).unwrap();
        let gaps: Vec<f64> = series.values.windows(2).map(|w| w[1] - w[0]).collect();
        println!(
            "lambda_step {lambda_step}: metric {:?} values {:?} gaps {gaps:?}",
            series.metric, series.values
        );
    }
}

// ---- pilot E: mode-frequency margins for the fixed stream ----------------

#[test]
fn pilot_mode_frequencies() {
    for (role, l, stride, p_uncond, tol) in [
        (Role::Prediction, 8, 2, 0.5, 0.005),
        (Role::Interpolation, 7, 2, 0.1, 0.003),
    ] {
        let policy = ModePolicy::for_role(role, l, stride, 20).unwrap();
        let mut rng = stream(123, "mode-freq", 0);
        let mut uncond = 0usize;
        let n = 100_000;
        for _ in 0..n {
            let spec = sample_training_mode(&policy, &mut rng);
            if matches!(spec.mode, kinema::conditioning::ConditionMode::Unconditional) {
                uncond += 1;
            }
        }
        let f = uncond as f64 / n as f64;
        println!(
            "{role:?}: uncond fraction {f:.5}, |err| {:.5} (tol {tol})",
            (f - p_uncond).abs()
        );
    }
}

// keep the compiler quiet about unused schedule helper types
#[allow(dead_code)]
fn _schedule_check(_s: &NoiseSchedule) {}
