//! Parameter store and the small layer vocabulary the models are built from.
//!
//! Layers are plain structs holding their parameter names and hyperparameters;
//! the values live in a [`Params`] store keyed by name. `init` registers a
//! parameter only if the name is absent, so building a model over a store
//! deserialized from a checkpoint keeps the loaded values.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::Conv3dSpec;
use crate::tape::{Tape, Tensor};

/// Named parameter store with deterministic iteration order (insertion order).
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: IndexMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.map.insert(name.into(), value);
    }

    /// Insert only if absent (used by layer constructors).
    pub fn entry(&mut self, name: impl Into<String>, make: impl FnOnce() -> ArrayD<f64>) {
        self.map.entry(name.into()).or_insert_with(make);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }
}

/// Samples a zero-mean normal with the given standard deviation.
pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    if std == 0.0 {
        return ArrayD::zeros(IxDyn(shape));
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He initialization for fan-in `fan` (suits ReLU-family activations).
pub fn he_std(fan: usize) -> f64 {
    (2.0 / fan as f64).sqrt()
}

/// Xavier initialization for `fan_in`/`fan_out` (suits linear/attention maps).
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

// ---- linear ----

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-initialized weight `[in, out]`, zero bias.
    pub fn init(ps: &mut Params, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let std = xavier_std(in_dim, out_dim);
        Self::init_with_std(ps, rng, name, in_dim, out_dim, std)
    }

    /// Zero-initialized weight and bias — output-projection convention for
    /// residual branches, so a fresh block is the identity.
    pub fn init_zero(ps: &mut Params, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::init_with_std(ps, rng, name, in_dim, out_dim, 0.0)
    }

    pub fn init_with_std(
        ps: &mut Params,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        ps.entry(format!("{name}.w"), || normal_init(rng, &[in_dim, out_dim], std));
        ps.entry(format!("{name}.b"), || ArrayD::zeros(IxDyn(&[out_dim])));
        Self { name: name.to_string(), in_dim, out_dim }
    }

    /// `x`: `[N, in]` -> `[N, out]`.
    pub fn forward<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>) -> Tensor<'t> {
        let w = tape.param(ps, &format!("{}.w", self.name));
        let b = tape.param(ps, &format!("{}.b", self.name));
        x.matmul(w).add_bcast0(b)
    }
}

// ---- conv ----

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize, usize),
    pub spec: Conv3dSpec,
}

impl Conv3d {
    pub fn init(
        ps: &mut Params,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        spec: Conv3dSpec,
    ) -> Self {
        let fan = cin * kernel.0 * kernel.1 * kernel.2;
        ps.entry(format!("{name}.w"), || {
            normal_init(rng, &[cout, cin, kernel.0, kernel.1, kernel.2], he_std(fan))
        });
        ps.entry(format!("{name}.b"), || ArrayD::zeros(IxDyn(&[cout])));
        Self { name: name.to_string(), cin, cout, kernel, spec }
    }

    /// Zero-initialized variant for residual output projections and final
    /// prediction heads.
    pub fn init_zero(
        ps: &mut Params,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        spec: Conv3dSpec,
    ) -> Self {
        let _ = rng;
        ps.entry(format!("{name}.w"), || {
            ArrayD::zeros(IxDyn(&[cout, cin, kernel.0, kernel.1, kernel.2]))
        });
        ps.entry(format!("{name}.b"), || ArrayD::zeros(IxDyn(&[cout])));
        Self { name: name.to_string(), cin, cout, kernel, spec }
    }

    /// `x`: `[B, cin, T, H, W]` -> `[B, cout, T', H', W']`.
    pub fn forward<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>) -> Tensor<'t> {
        let w = tape.param(ps, &format!("{}.w", self.name));
        let b = tape.param(ps, &format!("{}.b", self.name));
        x.conv3d(w, b, self.spec)
    }
}

// ---- normalization ----

/// Group normalization with learned per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub name: String,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn init(ps: &mut Params, name: &str, groups: usize, channels: usize) -> Self {
        ps.entry(format!("{name}.g"), || ArrayD::ones(IxDyn(&[channels])));
        ps.entry(format!("{name}.b"), || ArrayD::zeros(IxDyn(&[channels])));
        Self { name: name.to_string(), groups, channels, eps: 1e-5 }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>) -> Tensor<'t> {
        let g = tape.param(ps, &format!("{}.g", self.name));
        let b = tape.param(ps, &format!("{}.b", self.name));
        x.group_norm(self.groups, self.eps).affine_channel(g, b)
    }
}

/// Group normalization whose affine is predicted per sample from an embedding:
/// `y = gn(x) * (1 + s) + t`, with `[s | t]` the output of a zero-initialized
/// linear map of the embedding. Fresh layers therefore start as plain
/// normalization.
#[derive(Debug, Clone)]
pub struct AdaGroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub proj: Linear,
}

impl AdaGroupNorm {
    pub fn init(
        ps: &mut Params,
        rng: &mut impl Rng,
        name: &str,
        groups: usize,
        channels: usize,
        emb_dim: usize,
    ) -> Self {
        let proj = Linear::init_zero(ps, rng, &format!("{name}.proj"), emb_dim, 2 * channels);
        Self { groups, channels, eps: 1e-5, proj }
    }

    /// `x`: `[B, C, ...]`, `emb`: `[B, emb_dim]`.
    pub fn forward<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>, emb: Tensor<'t>) -> Tensor<'t> {
        let st = self.proj.forward(tape, ps, emb);
        let s = st.slice_ax(1, 0, self.channels).add_scalar(1.0);
        let t = st.slice_ax(1, self.channels, self.channels);
        x.group_norm(self.groups, self.eps).scale_shift(s, t)
    }
}

// ---- attention ----

/// Multi-head self-attention over token sequences `[G, N, C]`, where `G`
/// indexes independent groups (e.g. one row per spatial site for temporal
/// attention) and `N` is the sequence length.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub channels: usize,
    pub heads: usize,
    pub qkv: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn init(ps: &mut Params, rng: &mut impl Rng, name: &str, channels: usize, heads: usize) -> Self {
        assert!(channels.is_multiple_of(heads), "attention channels must split into heads");
        let qkv = Linear::init(ps, rng, &format!("{name}.qkv"), channels, 3 * channels);
        let out = Linear::init_zero(ps, rng, &format!("{name}.out"), channels, channels);
        Self { channels, heads, qkv, out }
    }

    /// `x`: `[G, N, C]` -> `[G, N, C]` (residual not included).
    pub fn forward<'t>(&self, tape: &'t Tape, ps: &Params, x: Tensor<'t>) -> Tensor<'t> {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "attention input must be [G, N, C]");
        let (g, n, c) = (shape[0], shape[1], shape[2]);
        assert_eq!(c, self.channels, "attention channel mismatch");
        let h = self.heads;
        let dh = c / h;

        let qkv = self.qkv.forward(tape, ps, x.reshape(&[g * n, c]));
        let split = |t: Tensor<'t>| {
            // [G*N, C] -> [G, N, h, dh] -> [G, h, N, dh] -> [G*h, N, dh]
            t.reshape(&[g, n, h, dh]).permute(&[0, 2, 1, 3]).reshape(&[g * h, n, dh])
        };
        let q = split(qkv.slice_ax(1, 0, c));
        let k = split(qkv.slice_ax(1, c, c));
        let v = split(qkv.slice_ax(1, 2 * c, c));

        let scores = q
            .bmm(k.permute(&[0, 2, 1]))
            .mul_scalar(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax_last();
        let mixed = attn
            .bmm(v)
            .reshape(&[g, h, n, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[g * n, c]);
        self.out.forward(tape, ps, mixed).reshape(&[g, n, c])
    }
}
