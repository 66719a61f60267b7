//! Conditioning contracts: mask construction, frame substitution, conditional
//! perturbation, and training-mode draws.

use ndarray::{ArrayD, IxDyn};

use kinema::conditioning::{
    apply_condition, build_mask, perturb_condition, sample_training_mode, substitute_frames,
    BinaryClip, ConditionMode, ConditionSpec, ModePolicy, Role,
};
use kinema::diffusion::make_linear_schedule;
use kinema::rng::stream;

fn randn_like(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    kinema::diffusion::randn(rng, shape)
}

// ---- build_mask ----

#[test]
fn mask_predict_k2_l4() {
    let spec = ConditionSpec::predict(2, 0, 100);
    let mask = build_mask(&spec, 4).unwrap();
    assert_eq!(mask.bits(), &[1, 1, 0, 0]);
}

#[test]
fn mask_unconditional_all_zero() {
    for l in 1..=8 {
        let spec = ConditionSpec::unconditional();
        let mask = build_mask(&spec, l).unwrap();
        assert!(mask.bits().iter().all(|&b| b == 0), "l={l}");
        assert!(mask.is_unconditional());
    }
}

#[test]
fn mask_interpolate_stride3_l7() {
    let spec = ConditionSpec::interpolate(3, 0, 100);
    let mask = build_mask(&spec, 7).unwrap();
    assert_eq!(mask.bits(), &[1, 0, 0, 1, 0, 0, 1]);
}

/// Exhaustive check of every valid (k, l) with l <= 8 against an independent
/// statement of the rule: frame i is conditional iff i < k.
#[test]
fn mask_predict_exhaustive() {
    for l in 1..=8usize {
        for k in 1..l {
            let mask = build_mask(&ConditionSpec::predict(k, 0, 10), l).unwrap();
            let expect: Vec<u8> = (0..l).map(|i| u8::from(i < k)).collect();
            assert_eq!(mask.bits(), &expect[..], "k={k} l={l}");
        }
    }
}

/// Exhaustive check of every valid (stride, l) with l <= 8: frame i is
/// conditional iff i is a multiple of the stride; both endpoints are anchors.
#[test]
fn mask_interpolate_exhaustive() {
    for l in 3..=8usize {
        for stride in 2..l {
            if (l - 1) % stride != 0 {
                continue;
            }
            let mask = build_mask(&ConditionSpec::interpolate(stride, 0, 10), l).unwrap();
            let expect: Vec<u8> = (0..l).map(|i| u8::from(i % stride == 0)).collect();
            assert_eq!(mask.bits(), &expect[..], "stride={stride} l={l}");
            assert_eq!(mask.bits()[0], 1);
            assert_eq!(mask.bits()[l - 1], 1);
        }
    }
}

#[test]
fn mask_rejects_bad_specs() {
    // k >= l
    assert!(build_mask(&ConditionSpec::predict(4, 0, 10), 4).is_err());
    assert!(build_mask(&ConditionSpec::predict(5, 0, 10), 4).is_err());
    // last frame off the sparse grid
    assert!(build_mask(&ConditionSpec::interpolate(3, 0, 10), 6).is_err());
    // stride < 2
    assert!(build_mask(&ConditionSpec::interpolate(1, 0, 10), 5).is_err());
    // l = 0
    assert!(build_mask(&ConditionSpec::unconditional(), 0).is_err());
}

#[test]
fn binary_clip_materializes_frame_constant_maps() {
    let clip = BinaryClip::new(vec![1, 0, 1]).unwrap();
    let maps = clip.materialize(4, 5);
    assert_eq!(maps.shape(), &[4, 5, 3, 1]);
    for y in 0..4 {
        for x in 0..5 {
            assert_eq!(maps[[y, x, 0, 0]], 1.0);
            assert_eq!(maps[[y, x, 1, 0]], 0.0);
            assert_eq!(maps[[y, x, 2, 0]], 1.0);
        }
    }
    assert!(BinaryClip::new(vec![0, 2]).is_err());
}

// ---- apply_condition / substitute_frames ----

#[test]
fn apply_condition_zero_mask_keeps_noisy_latent() {
    let mut rng = stream(11, "test", 0);
    let z_t = randn_like(&mut rng, &[3, 4, 2, 2]);
    let src = randn_like(&mut rng, &[3, 4, 2, 2]);
    let mask = BinaryClip::new(vec![0, 0, 0, 0]).unwrap();
    let out = apply_condition(&z_t, &src, &mask).unwrap();
    assert_eq!(out.shape(), &[4, 4, 2, 2]);
    for (idx, v) in z_t.indexed_iter() {
        assert_eq!(out[idx.clone()], *v);
    }
    // mask channel is all zeros
    for t in 0..4 {
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out[[3, t, y, x]], 0.0);
            }
        }
    }
}

#[test]
fn apply_condition_ones_mask_substitutes_everywhere() {
    let mut rng = stream(12, "test", 0);
    let z_t = randn_like(&mut rng, &[3, 4, 2, 2]);
    let src = randn_like(&mut rng, &[3, 4, 2, 2]);
    let mask = BinaryClip::new(vec![1, 1, 1, 1]).unwrap();
    let out = apply_condition(&z_t, &src, &mask).unwrap();
    for (idx, v) in src.indexed_iter() {
        assert_eq!(out[idx.clone()], *v);
    }
    for t in 0..4 {
        assert_eq!(out[[3, t, 0, 0]], 1.0);
    }
}

/// Mixed mask [1, 0]: frame 0 comes wholly from the source, frame 1 wholly
/// from z_t, verified element by element against a selection oracle.
#[test]
fn apply_condition_mixed_mask_elementwise() {
    let mut rng = stream(13, "test", 0);
    let z_t = randn_like(&mut rng, &[2, 2, 3, 3]);
    let src = randn_like(&mut rng, &[2, 2, 3, 3]);
    let mask = BinaryClip::new(vec![1, 0]).unwrap();
    let out = apply_condition(&z_t, &src, &mask).unwrap();
    for c in 0..2 {
        for t in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let expect =
                        if mask.bits()[t] == 1 { src[[c, t, y, x]] } else { z_t[[c, t, y, x]] };
                    assert_eq!(out[[c, t, y, x]], expect);
                }
            }
        }
    }
    // channel c+1 equals the mask bit at every position
    for t in 0..2 {
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out[[2, t, y, x]], f64::from(mask.bits()[t]));
            }
        }
    }
}

/// No frame ever mixes sources: for every conditioning mode and frame, the
/// latent channels come entirely from one side of the substitution.
#[test]
fn substitution_never_mixes_within_a_frame() {
    let mut rng = stream(14, "test", 0);
    let z_t = randn_like(&mut rng, &[3, 7, 2, 2]);
    let src = randn_like(&mut rng, &[3, 7, 2, 2]);
    for spec in [
        ConditionSpec::unconditional(),
        ConditionSpec::predict(3, 0, 10),
        ConditionSpec::interpolate(3, 0, 10),
    ] {
        let mask = build_mask(&spec, 7).unwrap();
        let mixed = substitute_frames(&z_t, &src, &mask).unwrap();
        for t in 0..7 {
            let want = if mask.bits()[t] == 1 { &src } else { &z_t };
            for c in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        assert_eq!(mixed[[c, t, y, x]], want[[c, t, y, x]]);
                    }
                }
            }
        }
    }
}

#[test]
fn substitution_rejects_shape_mismatch() {
    let z_t = ArrayD::zeros(IxDyn(&[3, 4, 2, 2]));
    let src = ArrayD::zeros(IxDyn(&[3, 5, 2, 2]));
    let mask = BinaryClip::new(vec![0, 0, 0, 0]).unwrap();
    assert!(substitute_frames(&z_t, &src, &mask).is_err());
    let short_mask = BinaryClip::new(vec![0, 0]).unwrap();
    let src_ok = ArrayD::zeros(IxDyn(&[3, 4, 2, 2]));
    assert!(substitute_frames(&z_t, &src_ok, &short_mask).is_err());
}

// ---- perturb_condition ----

#[test]
fn perturbation_s0_is_identity() {
    let schedule = make_linear_schedule(100, 1e-4, 0.02).unwrap();
    let mut rng = stream(15, "test", 0);
    let z0 = randn_like(&mut rng, &[2, 3, 2, 2]);
    let out = perturb_condition(&z0, 0, 50, &schedule, &mut rng).unwrap();
    assert_eq!(out, z0);
}

/// Requesting s beyond s_max uses alpha_bar(s_max): with the same rng stream
/// the clamped call is bit-identical to the call at s_max.
#[test]
fn perturbation_clamps_at_s_max() {
    let schedule = make_linear_schedule(100, 1e-4, 0.02).unwrap();
    let z0 = randn_like(&mut stream(16, "test", 0), &[2, 3, 2, 2]);
    let a = perturb_condition(&z0, 90, 40, &schedule, &mut stream(16, "noise", 1)).unwrap();
    let b = perturb_condition(&z0, 40, 40, &schedule, &mut stream(16, "noise", 1)).unwrap();
    assert_eq!(a, b);
}

/// Monte-Carlo moments: perturbing a constant z0 at level s gives mean
/// sqrt(alpha_bar_s) * z0 and variance 1 - alpha_bar_s, within 3 standard
/// errors over 1e5 scalar draws.
#[test]
fn perturbation_moments_match_schedule() {
    let schedule = make_linear_schedule(100, 1e-3, 0.05).unwrap();
    let s = 60;
    let ab = schedule.alpha_bar(s);
    let z0_val = 1.5;
    let n = 100_000usize;
    let z0 = ArrayD::from_elem(IxDyn(&[n]), z0_val);
    let mut rng = stream(17, "mc", 0);
    let out = perturb_condition(&z0, s, 100, &schedule, &mut rng).unwrap();
    let mean = out.iter().sum::<f64>() / n as f64;
    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let want_mean = ab.sqrt() * z0_val;
    let want_var = 1.0 - ab;
    let se_mean = (want_var / n as f64).sqrt();
    let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
    assert!(
        (mean - want_mean).abs() < 3.0 * se_mean,
        "mean {mean} vs {want_mean} (3se {})",
        3.0 * se_mean
    );
    assert!(
        (var - want_var).abs() < 3.0 * se_var,
        "var {var} vs {want_var} (3se {})",
        3.0 * se_var
    );
}

// ---- sample_training_mode ----

#[test]
fn prediction_role_frequencies() {
    let policy = ModePolicy::for_role(Role::Prediction, 8, 2, 100).unwrap();
    let mut rng = stream(18, "modes", 0);
    let n = 100_000usize;
    let mut uncond = 0usize;
    for _ in 0..n {
        let spec = sample_training_mode(&policy, &mut rng);
        if spec.mode == ConditionMode::Unconditional {
            uncond += 1;
        } else {
            match spec.mode {
                ConditionMode::Predict { k } => assert!((1..=4).contains(&k), "k={k}"),
                other => panic!("prediction role drew {other:?}"),
            }
        }
        assert!(spec.perturb_s <= 100);
    }
    let frac = uncond as f64 / n as f64;
    assert!((frac - 0.5).abs() < 0.005, "unconditional fraction {frac}");
}

#[test]
fn interpolation_role_frequencies() {
    let policy = ModePolicy::for_role(Role::Interpolation, 7, 3, 100).unwrap();
    let mut rng = stream(19, "modes", 0);
    let n = 100_000usize;
    let mut uncond = 0usize;
    for _ in 0..n {
        let spec = sample_training_mode(&policy, &mut rng);
        if spec.mode == ConditionMode::Unconditional {
            uncond += 1;
        } else {
            assert_eq!(spec.mode, ConditionMode::Interpolate { stride: 3 });
        }
    }
    let frac = uncond as f64 / n as f64;
    assert!((frac - 0.1).abs() < 0.003, "unconditional fraction {frac}");
}

#[test]
fn unconditional_role_draws_only_unconditional() {
    let policy = ModePolicy::for_role(Role::Unconditional, 8, 2, 100).unwrap();
    let mut rng = stream(20, "modes", 0);
    for _ in 0..1000 {
        let spec = sample_training_mode(&policy, &mut rng);
        assert_eq!(spec.mode, ConditionMode::Unconditional);
    }
}

/// k is drawn uniformly from {1..l/2}: every value appears, none outside.
#[test]
fn prediction_k_support() {
    let policy = ModePolicy::for_role(Role::Prediction, 8, 2, 100).unwrap();
    let mut rng = stream(21, "modes", 0);
    let mut seen = [false; 5];
    for _ in 0..10_000 {
        if let ConditionMode::Predict { k } = sample_training_mode(&policy, &mut rng).mode {
            assert!((1..=4).contains(&k));
            seen[k] = true;
        }
    }
    assert!(seen[1] && seen[2] && seen[3] && seen[4]);
}

/// perturb_s is uniform over {0..=s_max}: support check plus a coarse
/// mean check (uniform mean = s_max / 2).
#[test]
fn perturb_s_draw_support() {
    let policy = ModePolicy::for_role(Role::Prediction, 8, 2, 50).unwrap();
    let mut rng = stream(22, "modes", 0);
    let n = 50_000usize;
    let mut sum = 0u64;
    let mut saw_zero = false;
    let mut saw_max = false;
    for _ in 0..n {
        let s = sample_training_mode(&policy, &mut rng).perturb_s;
        assert!(s <= 50);
        saw_zero |= s == 0;
        saw_max |= s == 50;
        sum += s as u64;
    }
    assert!(saw_zero && saw_max);
    let mean = sum as f64 / n as f64;
    assert!((mean - 25.0).abs() < 0.5, "perturb_s mean {mean}");
}

#[test]
fn effective_perturbation_respects_clamp() {
    let spec = ConditionSpec::predict(2, 80, 50);
    assert_eq!(spec.effective_perturb_s(), 50);
    let spec = ConditionSpec::predict(2, 30, 50);
    assert_eq!(spec.effective_perturb_s(), 30);
}

#[test]
fn mode_policy_validates_roles() {
    // interpolation stride must fit the window
    assert!(ModePolicy::for_role(Role::Interpolation, 6, 3, 10).is_err());
    assert!(ModePolicy::for_role(Role::Interpolation, 7, 3, 10).is_ok());
    // prediction window must allow at least one conditional frame
    assert!(ModePolicy::for_role(Role::Prediction, 1, 2, 10).is_err());
}
