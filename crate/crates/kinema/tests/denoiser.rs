//! Noise-prediction UNet contracts: timestep features, adaptive
//! normalization, zero-initialized identity, frame locality of the
//! factorized architecture, attention-mode equivalences, and gradient
//! integrity.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use kinema::denoiser::{
    timestep_embedding, timestep_embedding_batch, AttentionMode, Denoiser, DenoiserConfig,
};
use kinema::diffusion::randn;
use kinema::rng::stream;
use kinema_grad::nn::AdaGroupNorm;
use kinema_grad::{Params, Tape};

fn small_cfg() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 2,
        latent_frames: 5,
        latent_hw: (8, 8),
        base_width: 4,
        ch_mults: vec![1, 2],
        attn_levels: vec![1],
        temporal_attn_levels: vec![1],
        heads: 2,
        temb_dim: 8,
        attention_mode: AttentionMode::Factorized,
    }
}

/// Adds shared deterministic noise to every parameter so residual branches,
/// attention projections, and the prediction head all become active (many
/// are zero-initialized and would otherwise be invisible to functional
/// tests).
fn randomize(ps: &mut Params, seed: u64, scale: f64) {
    let mut rng = stream(seed, "param-noise", 0);
    for (_, v) in ps.iter_mut() {
        for x in v.iter_mut() {
            *x += scale * rng.gen_range(-1.0..1.0);
        }
    }
}

// ---- timestep features ----

#[test]
fn timestep_embedding_matches_trig_oracle() {
    // t = 0: sines vanish, cosines are one
    let e0 = timestep_embedding(0, 8);
    assert_eq!(&e0[..4], &[0.0; 4]);
    assert_eq!(&e0[4..], &[1.0; 4]);

    // frequencies follow f_i = 10000^(-i / (half - 1))
    let dim = 8;
    let e = timestep_embedding(7, dim);
    for i in 0..4 {
        let freq = 10000f64.powf(-(i as f64) / 3.0);
        assert!((e[i] - (7.0 * freq).sin()).abs() < 1e-12, "sin {i}");
        assert!((e[4 + i] - (7.0 * freq).cos()).abs() < 1e-12, "cos {i}");
    }

    // dim = 2 degenerates to a single unit frequency
    let e2 = timestep_embedding(3, 2);
    assert!((e2[0] - 3f64.sin()).abs() < 1e-12);
    assert!((e2[1] - 3f64.cos()).abs() < 1e-12);

    // batch form stacks rows
    let batch = timestep_embedding_batch(&[0, 7], dim);
    assert_eq!(batch.shape(), &[2, dim]);
    for i in 0..dim {
        assert_eq!(batch[[0, i]], e0[i]);
        assert_eq!(batch[[1, i]], e[i]);
    }
}

// ---- adaptive group normalization ----

#[test]
fn fresh_ada_norm_is_plain_group_norm() {
    let mut ps = Params::new();
    let agn = AdaGroupNorm::init(&mut ps, &mut stream(1, "agn", 0), "t.norm", 2, 4, 6);
    let x = randn(&mut stream(1, "agn", 1), &[2, 4, 3, 2, 2]);
    let emb = randn(&mut stream(1, "agn", 2), &[2, 6]);

    let tape = Tape::new();
    let y = agn
        .forward(&tape, &ps, tape.constant(x.clone()), tape.constant(emb.clone()))
        .value();

    // brute-force group norm: groups of 2 channels, population variance,
    // eps inside the square root
    let eps = 1e-5;
    let glen = 2 * 3 * 2 * 2;
    for b in 0..2 {
        for g in 0..2 {
            let mut vals = Vec::with_capacity(glen);
            for c in (2 * g)..(2 * g + 2) {
                for t in 0..3 {
                    for h in 0..2 {
                        for w in 0..2 {
                            vals.push(x[[b, c, t, h, w]]);
                        }
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / glen as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let mut k = 0;
            for c in (2 * g)..(2 * g + 2) {
                for t in 0..3 {
                    for h in 0..2 {
                        for w in 0..2 {
                            let want = (vals[k] - mean) * inv;
                            let got = y[[b, c, t, h, w]];
                            assert!((got - want).abs() < 1e-12, "({b},{c},{t},{h},{w})");
                            k += 1;
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn ada_norm_applies_projected_scale_and_shift() {
    let mut ps = Params::new();
    let agn = AdaGroupNorm::init(&mut ps, &mut stream(2, "agn", 0), "t.norm", 2, 4, 6);
    let x = randn(&mut stream(2, "agn", 1), &[2, 4, 3, 2, 2]);
    let emb = randn(&mut stream(2, "agn", 2), &[2, 6]);

    let tape = Tape::new();
    let plain = agn
        .forward(&tape, &ps, tape.constant(x.clone()), tape.constant(emb.clone()))
        .value();

    // give the projection real weights, recompute, and verify
    // y = gn(x) * (1 + s) + t with [s | t] = emb @ W + b done by hand
    randomize(&mut ps, 3, 0.3);
    let tape2 = Tape::new();
    let adapted = agn
        .forward(&tape2, &ps, tape2.constant(x.clone()), tape2.constant(emb.clone()))
        .value();

    let w = ps.get("t.norm.proj.w").unwrap();
    let bias = ps.get("t.norm.proj.b").unwrap();
    for b in 0..2 {
        let mut st = vec![0.0; 8];
        for (j, slot) in st.iter_mut().enumerate() {
            let mut acc = bias[[j]];
            for i in 0..6 {
                acc += emb[[b, i]] * w[[i, j]];
            }
            *slot = acc;
        }
        for c in 0..4 {
            for t in 0..3 {
                for h in 0..2 {
                    for wx in 0..2 {
                        let want = plain[[b, c, t, h, wx]] * (1.0 + st[c]) + st[4 + c];
                        let got = adapted[[b, c, t, h, wx]];
                        assert!((got - want).abs() < 1e-12, "({b},{c},{t},{h},{wx})");
                    }
                }
            }
        }
    }
}

#[test]
fn fresh_ada_norm_output_has_unit_group_statistics() {
    let mut ps = Params::new();
    let agn = AdaGroupNorm::init(&mut ps, &mut stream(4, "agn", 0), "t.norm", 2, 4, 6);
    let x = randn(&mut stream(4, "agn", 1), &[1, 4, 4, 4, 4]).mapv(|v| 3.0 * v + 1.0);
    let emb = randn(&mut stream(4, "agn", 2), &[1, 6]);
    let tape = Tape::new();
    let y = agn.forward(&tape, &ps, tape.constant(x), tape.constant(emb)).value();
    let glen = (2 * 4 * 4 * 4) as f64;
    for g in 0..2 {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for c in (2 * g)..(2 * g + 2) {
            for t in 0..4 {
                for h in 0..4 {
                    for w in 0..4 {
                        let v = y[[0, c, t, h, w]];
                        sum += v;
                        sumsq += v * v;
                    }
                }
            }
        }
        let mean = sum / glen;
        let var = sumsq / glen - mean * mean;
        assert!(mean.abs() < 1e-12, "group {g} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "group {g} var {var}");
    }
}

// ---- identity at initialization ----

/// Every residual branch ends in a zero conv/linear and the head conv is
/// zero too, so a fresh network predicts exactly zero noise everywhere.
#[test]
fn fresh_denoiser_predicts_exactly_zero() {
    let cfg = small_cfg();
    let mut ps = Params::new();
    let dn = Denoiser::init(&mut ps, &mut stream(5, "dn-init", 0), &cfg).unwrap();
    let x = randn(&mut stream(5, "x", 0), &[2, 3, 5, 8, 8]);
    let out = dn.eps_with_input(&ps, &x, 3).unwrap();
    assert_eq!(out.shape(), &[2, 2, 5, 8, 8]);
    assert!(out.iter().all(|&v| v == 0.0), "fresh prediction must be exactly zero");
}

// ---- input and config validation ----

#[test]
fn input_validation() {
    let cfg = small_cfg();
    let mut ps = Params::new();
    let dn = Denoiser::init(&mut ps, &mut stream(6, "dn-init", 0), &cfg).unwrap();

    // wrong rank
    assert!(dn.eps_with_input(&ps, &ArrayD::zeros(IxDyn(&[3, 5, 8, 8])), 1).is_err());
    // wrong channel count (must be latent + mask)
    assert!(dn.eps_with_input(&ps, &ArrayD::zeros(IxDyn(&[1, 2, 5, 8, 8])), 1).is_err());
    // temporal attention pins the frame count
    assert!(dn.eps_with_input(&ps, &ArrayD::zeros(IxDyn(&[1, 3, 4, 8, 8])), 1).is_err());
    // spatial size must split across levels
    assert!(dn.eps_with_input(&ps, &ArrayD::zeros(IxDyn(&[1, 3, 5, 7, 8])), 1).is_err());
    // one timestep per batch element
    let tape = Tape::new();
    assert!(dn.forward(&tape, &ps, &ArrayD::zeros(IxDyn(&[2, 3, 5, 8, 8])), &[1]).is_err());

    // without temporal attention the frame count is free
    let free = DenoiserConfig { temporal_attn_levels: vec![], ..small_cfg() };
    let mut ps2 = Params::new();
    let dn2 = Denoiser::init(&mut ps2, &mut stream(6, "dn-init", 1), &free).unwrap();
    for l in [1usize, 3, 9] {
        assert!(dn2.eps_with_input(&ps2, &ArrayD::zeros(IxDyn(&[1, 3, l, 8, 8])), 1).is_ok());
    }

    // joint attention pins the spatial grid exactly
    let joint = DenoiserConfig {
        attention_mode: AttentionMode::Joint,
        temporal_attn_levels: vec![],
        ..small_cfg()
    };
    let mut ps3 = Params::new();
    let dn3 = Denoiser::init(&mut ps3, &mut stream(6, "dn-init", 2), &joint).unwrap();
    assert!(dn3.eps_with_input(&ps3, &ArrayD::zeros(IxDyn(&[1, 3, 5, 8, 8])), 1).is_ok());
    assert!(dn3.eps_with_input(&ps3, &ArrayD::zeros(IxDyn(&[1, 3, 5, 16, 16])), 1).is_err());
}

#[test]
fn config_validation() {
    assert!(small_cfg().validate().is_ok());
    let bad = |f: fn(&mut DenoiserConfig)| {
        let mut c = small_cfg();
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(|c| c.latent_channels = 0));
    assert!(bad(|c| c.ch_mults = vec![]));
    assert!(bad(|c| c.ch_mults = vec![1, 0]));
    assert!(bad(|c| c.temb_dim = 7));
    assert!(bad(|c| c.temb_dim = 0));
    assert!(bad(|c| c.heads = 0));
    assert!(bad(|c| c.heads = 3)); // widths 4 and 8 don't split into 3
    assert!(bad(|c| c.attn_levels = vec![2])); // only 2 levels exist
    assert!(bad(|c| c.temporal_attn_levels = vec![0])); // not an attention level
    assert!(bad(|c| c.latent_hw = (7, 8))); // 7 not divisible by 2
    assert!(bad(|c| c.latent_hw = (0, 8)));
}

// ---- frame locality ----

/// With spatial-only attention every operation is frame-local or
/// frame-permutation-invariant (normalization statistics do not depend on
/// frame order), so permuting input frames permutes the prediction the same
/// way.
#[test]
fn frame_permutation_equivariance_without_temporal_attention() {
    let cfg = DenoiserConfig { temporal_attn_levels: vec![], ..small_cfg() };
    let mut ps = Params::new();
    let dn = Denoiser::init(&mut ps, &mut stream(7, "dn-init", 0), &cfg).unwrap();
    randomize(&mut ps, 8, 0.05);

    let x = randn(&mut stream(7, "x", 0), &[1, 3, 5, 8, 8]);
    let perm = [3usize, 0, 4, 1, 2];
    let mut xp = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        xp.slice_mut(ndarray::s![.., .., dst, .., ..])
            .assign(&x.slice(ndarray::s![.., .., src, .., ..]));
    }

    let y = dn.eps_with_input(&ps, &x, 4).unwrap();
    let yp = dn.eps_with_input(&ps, &xp, 4).unwrap();
    assert!(y.iter().any(|&v| v.abs() > 1e-3), "randomized net should not be zero");
    for (dst, &src) in perm.iter().enumerate() {
        let want = y.slice(ndarray::s![.., .., src, .., ..]);
        let got = yp.slice(ndarray::s![.., .., dst, .., ..]);
        for (a, b) in want.iter().zip(got.iter()) {
            assert!((a - b).abs() < 1e-10, "frame {dst}: {a} vs {b}");
        }
    }
}

/// With temporal attention enabled the frames interact through a learned
/// positional table, so the same permutation no longer commutes with the
/// network.
#[test]
fn temporal_attention_breaks_frame_permutation() {
    let cfg = small_cfg();
    let mut ps = Params::new();
    let dn = Denoiser::init(&mut ps, &mut stream(9, "dn-init", 0), &cfg).unwrap();
    randomize(&mut ps, 10, 0.05);

    let x = randn(&mut stream(9, "x", 0), &[1, 3, 5, 8, 8]);
    let perm = [3usize, 0, 4, 1, 2];
    let mut xp = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        xp.slice_mut(ndarray::s![.., .., dst, .., ..])
            .assign(&x.slice(ndarray::s![.., .., src, .., ..]));
    }
    let y = dn.eps_with_input(&ps, &x, 4).unwrap();
    let yp = dn.eps_with_input(&ps, &xp, 4).unwrap();
    let mut worst = 0.0f64;
    for (dst, &src) in perm.iter().enumerate() {
        let want = y.slice(ndarray::s![.., .., src, .., ..]);
        let got = yp.slice(ndarray::s![.., .., dst, .., ..]);
        for (a, b) in want.iter().zip(got.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst > 1e-6, "temporal attention had no frame-order effect ({worst})");
}

// ---- attention-mode equivalence ----

/// On a one-frame window, joint attention with a zero positional table is
/// spatial attention. Both networks draw identical initial weights (the
/// initializers consume the stream in the same order), and the test applies
/// identical noise to corresponding parameters; the joint positional table
/// has no factorized counterpart and stays zero.
#[test]
fn joint_attention_matches_spatial_on_one_frame() {
    let base = DenoiserConfig {
        latent_frames: 1,
        temporal_attn_levels: vec![],
        ..small_cfg()
    };
    let joint_cfg =
        DenoiserConfig { attention_mode: AttentionMode::Joint, ..base.clone() };

    let mut ps_f = Params::new();
    let dn_f = Denoiser::init(&mut ps_f, &mut stream(11, "dn-init", 0), &base).unwrap();
    let mut ps_j = Params::new();
    let dn_j = Denoiser::init(&mut ps_j, &mut stream(11, "dn-init", 0), &joint_cfg).unwrap();

    let factor_names: Vec<String> = ps_f.names().map(String::from).collect();
    let mut rng_f = stream(12, "shared-noise", 0);
    for name in &factor_names {
        let v = ps_f.get_mut(name).unwrap();
        for x in v.iter_mut() {
            *x += 0.05 * rng_f.gen_range(-1.0..1.0);
        }
    }
    let mut rng_j = stream(12, "shared-noise", 0);
    for name in &factor_names {
        let jname = name.replace(".sp.", ".jt.");
        let v = ps_j.get_mut(&jname).unwrap_or_else(|| panic!("missing {jname}"));
        for x in v.iter_mut() {
            *x += 0.05 * rng_j.gen_range(-1.0..1.0);
        }
    }

    let x = randn(&mut stream(11, "x", 0), &[2, 3, 1, 8, 8]);
    let yf = dn_f.eps_with_input(&ps_f, &x, 6).unwrap();
    let yj = dn_j.eps_with_input(&ps_j, &x, 6).unwrap();
    assert!(yf.iter().any(|&v| v.abs() > 1e-3));
    for (a, b) in yf.iter().zip(yj.iter()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

/// The only parameters joint mode adds over spatial-only factorized mode are
/// its positional tables, one token row per grid position.
#[test]
fn joint_parameter_count_adds_exactly_the_positional_tables() {
    let base = DenoiserConfig {
        latent_frames: 1,
        temporal_attn_levels: vec![],
        ..small_cfg()
    };
    let joint_cfg =
        DenoiserConfig { attention_mode: AttentionMode::Joint, ..base.clone() };
    let mut ps_f = Params::new();
    Denoiser::init(&mut ps_f, &mut stream(13, "dn-init", 0), &base).unwrap();
    let mut ps_j = Params::new();
    Denoiser::init(&mut ps_j, &mut stream(13, "dn-init", 0), &joint_cfg).unwrap();

    // attention lives at level 1 (grid 4x4, one frame) in the down path, the
    // middle, and the up path: three tables of l*h*w rows by width(1) cols
    let table = 1 * 4 * 4 * base.width(1);
    assert_eq!(ps_j.num_scalars(), ps_f.num_scalars() + 3 * table);
}

#[test]
fn temporal_attention_parameter_cost_is_accounted() {
    let with = small_cfg();
    let without = DenoiserConfig { temporal_attn_levels: vec![], ..small_cfg() };
    let mut ps_w = Params::new();
    Denoiser::init(&mut ps_w, &mut stream(14, "dn-init", 0), &with).unwrap();
    let mut ps_o = Params::new();
    Denoiser::init(&mut ps_o, &mut stream(14, "dn-init", 0), &without).unwrap();

    // per temporal site at width c with embedding d and l frames:
    // norm proj (d*2c + 2c), qkv (c*3c + 3c), out (c*c + c), table (l*c)
    let (c, d, l) = (with.width(1), with.temb_dim, with.latent_frames);
    let per_site = (d * 2 * c + 2 * c) + (c * 3 * c + 3 * c) + (c * c + c) + l * c;
    assert_eq!(ps_w.num_scalars(), ps_o.num_scalars() + 3 * per_site);
}

// ---- conditioning sites ----

/// Timestep conditioning reaches the network exclusively through the
/// adaptive norms: the advertised sites correspond one-to-one with the
/// `.proj` linears in the store, each mapping the embedding to a scale and
/// shift per channel.
#[test]
fn norm_sites_enumerate_every_conditioning_projection() {
    let cfg = small_cfg();
    let mut ps = Params::new();
    let dn = Denoiser::init(&mut ps, &mut stream(15, "dn-init", 0), &cfg).unwrap();

    let mut from_store: Vec<String> = ps
        .names()
        .filter_map(|n| n.strip_suffix(".proj.w").map(String::from))
        .collect();
    from_store.sort();
    let mut advertised: Vec<String> = dn.norm_sites().to_vec();
    advertised.sort();
    assert_eq!(advertised, from_store);

    for site in dn.norm_sites() {
        let w = ps.get(&format!("{site}.proj.w")).unwrap();
        assert_eq!(w.shape()[0], cfg.temb_dim, "{site}");
        assert!(w.shape()[1] % 2 == 0, "{site} must emit scale and shift pairs");
        assert!(ps.get(&format!("{site}.proj.b")).is_some());
    }
}

// ---- gradient integrity ----

/// Backward pass against central finite differences, one probed coordinate
/// per parameter tensor, through convs, both attentions, adaptive norms,
/// and the timestep MLP.
#[test]
fn gradcheck_against_finite_differences() {
    let cfg = DenoiserConfig {
        latent_channels: 2,
        latent_frames: 3,
        latent_hw: (4, 4),
        base_width: 4,
        ch_mults: vec![1, 2],
        attn_levels: vec![1],
        temporal_attn_levels: vec![1],
        heads: 2,
        temb_dim: 8,
        attention_mode: AttentionMode::Factorized,
    };
    let mut ps = Params::new();
    let dn = Denoiser::init(&mut ps, &mut stream(16, "dn-init", 0), &cfg).unwrap();
    randomize(&mut ps, 17, 0.05);
    let x = randn(&mut stream(16, "x", 0), &[2, 3, 3, 4, 4]);
    let ts = [1usize, 7];

    let loss_of = |ps: &Params| {
        let tape = Tape::new();
        let out = dn.forward(&tape, ps, &x, &ts).unwrap();
        out.square().mean_all().scalar()
    };

    let tape = Tape::new();
    let out = dn.forward(&tape, &ps, &x, &ts).unwrap();
    let loss = out.square().mean_all();
    let grads = tape.backward(loss);

    let names: Vec<String> = ps.names().map(String::from).collect();
    for name in &names {
        let g = grads
            .by_name(name)
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .clone();
        let len = ps.get(name).unwrap().len();
        let flat = len / 2;
        let h = 1e-6;
        let orig = ps.get(name).unwrap().as_slice().unwrap()[flat];
        ps.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] = orig + h;
        let up = loss_of(&ps);
        ps.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] = orig - h;
        let down = loss_of(&ps);
        ps.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = g.as_slice().unwrap()[flat];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
        assert!(
            (an - fd).abs() < 1e-7 || rel < 1e-3,
            "{name}[{flat}]: analytic {an} vs fd {fd}"
        );
    }
}

// ---- numerical robustness ----

#[test]
fn extreme_inputs_stay_finite() {
    let cfg = small_cfg();
    let mut ps = Params::new();
    let dn = Denoiser::init(&mut ps, &mut stream(18, "dn-init", 0), &cfg).unwrap();
    randomize(&mut ps, 19, 0.05);
    for v in [-6.0, 6.0] {
        let x = ArrayD::from_elem(IxDyn(&[1, 3, 5, 8, 8]), v);
        for t in [1usize, 1000] {
            let out = dn.eps_with_input(&ps, &x, t).unwrap();
            assert!(out.iter().all(|u| u.is_finite()), "v = {v}, t = {t}");
        }
    }
}
