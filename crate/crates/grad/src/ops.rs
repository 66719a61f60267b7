//! Differentiable ops: elementwise math, reductions, shape moves, matmul,
//! softmax, and the channel-affine helpers used by normalization layers.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::tape::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// Tape ops are deliberately plain methods (`x.add(y).relu()`), not operator
// overloads: every call records a backward closure, and keeping that explicit
// makes gradient flow visible at call sites.
#[allow(clippy::should_implement_trait)]
impl<'t> Tensor<'t> {
    // ---- elementwise binary ----

    pub fn add(self, other: Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.id, other.id);
        let v = {
            let inner = self.value();
            let o = other.value();
            assert_eq!(inner.shape(), o.shape(), "add: shape mismatch");
            inner + &o
        };
        self.tape.push(
            v,
            self.requires_grad() || other.requires_grad(),
            Some(Box::new(move |_vals, g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        )
    }

    pub fn sub(self, other: Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.id, other.id);
        let v = {
            let x = self.value();
            let y = other.value();
            assert_eq!(x.shape(), y.shape(), "sub: shape mismatch");
            x - &y
        };
        self.tape.push(
            v,
            self.requires_grad() || other.requires_grad(),
            Some(Box::new(move |_vals, g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(self, other: Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.id, other.id);
        let v = {
            let x = self.value();
            let y = other.value();
            assert_eq!(x.shape(), y.shape(), "mul: shape mismatch");
            x * &y
        };
        self.tape.push(
            v,
            self.requires_grad() || other.requires_grad(),
            Some(Box::new(move |vals, g, sink| {
                sink.add(a, g * &vals[b]);
                sink.add(b, g * &vals[a]);
            })),
        )
    }

    // ---- scalar ----

    pub fn add_scalar(self, c: f64) -> Tensor<'t> {
        let a = self.id;
        let v = self.value() + c;
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |_vals, g, sink| sink.add(a, g.clone()))),
        )
    }

    pub fn mul_scalar(self, c: f64) -> Tensor<'t> {
        let a = self.id;
        let v = self.value() * c;
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |_vals, g, sink| sink.add(a, g * c))),
        )
    }

    pub fn neg(self) -> Tensor<'t> {
        self.mul_scalar(-1.0)
    }

    // ---- activations ----

    pub fn relu(self) -> Tensor<'t> {
        let a = self.id;
        let v = self.value().mapv(|x| x.max(0.0));
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |vals, g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vals[a], |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                sink.add(a, dx);
            })),
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Tensor<'t> {
        let a = self.id;
        let v = self.value().mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |vals, g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vals[a], |d, &x| {
                    if x < 0.0 {
                        *d *= slope
                    }
                });
                sink.add(a, dx);
            })),
        )
    }

    pub fn silu(self) -> Tensor<'t> {
        let a = self.id;
        let v = self.value().mapv(|x| x * sigmoid(x));
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |vals, g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vals[a], |d, &x| {
                    let s = sigmoid(x);
                    *d *= s * (1.0 + x * (1.0 - s));
                });
                sink.add(a, dx);
            })),
        )
    }

    pub fn tanh_act(self) -> Tensor<'t> {
        let a = self.id;
        let v = self.value().mapv(f64::tanh);
        let y = v.clone();
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |_vals, g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &t| *d *= 1.0 - t * t);
                sink.add(a, dx);
            })),
        )
    }

    pub fn square(self) -> Tensor<'t> {
        self.mul(self)
    }

    // ---- reductions ----

    pub fn sum_all(self) -> Tensor<'t> {
        let a = self.id;
        let s = self.value().sum();
        self.tape.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            self.requires_grad(),
            Some(Box::new(move |vals, g, sink| {
                let gs = g.iter().copied().next().unwrap();
                sink.add(a, ArrayD::from_elem(vals[a].raw_dim(), gs));
            })),
        )
    }

    pub fn mean_all(self) -> Tensor<'t> {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    // ---- shape moves ----

    pub fn reshape(self, shape: &[usize]) -> Tensor<'t> {
        let a = self.id;
        let old: Vec<usize> = self.shape();
        let v = self
            .value()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |_vals, g, sink| {
                let gr = g
                    .clone()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape backward");
                sink.add(a, gr);
            })),
        )
    }

    pub fn permute(self, perm: &[usize]) -> Tensor<'t> {
        let a = self.id;
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let v = self
            .value()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |_vals, g, sink| {
                let gr = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                sink.add(a, gr);
            })),
        )
    }

    pub fn slice_ax(self, axis: usize, start: usize, len: usize) -> Tensor<'t> {
        let a = self.id;
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |vals, g, sink| {
                let mut dx = ArrayD::zeros(vals[a].raw_dim());
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                sink.add(a, dx);
            })),
        )
    }

    /// Concatenate along `axis`. All parts must live on the same tape.
    pub fn concat(axis: usize, parts: &[Tensor<'t>]) -> Tensor<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<ArrayD<f64>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(
            out,
            rg,
            Some(Box::new(move |_vals, g, sink| {
                let mut off = 0;
                for (&id, &len) in ids.iter().zip(&lens) {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(off..off + len))
                        .to_owned();
                    sink.add(id, piece);
                    off += len;
                }
            })),
        )
    }

    /// Add `e` (shape = self.shape()[1..]) broadcast over axis 0.
    pub fn add_bcast0(self, e: Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.id, e.id);
        let x = self.value();
        let ev = e.value();
        assert_eq!(&x.shape()[1..], ev.shape(), "add_bcast0: shape mismatch");
        let mut v = x;
        for mut row in v.outer_iter_mut() {
            row += &ev;
        }
        self.tape.push(
            v,
            self.requires_grad() || e.requires_grad(),
            Some(Box::new(move |_vals, g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.sum_axis(Axis(0)));
            })),
        )
    }

    // ---- channel affine helpers ----

    /// `y[b, c, ...] = x[b, c, ...] * gamma[c] + beta[c]`
    pub fn affine_channel(self, gamma: Tensor<'t>, beta: Tensor<'t>) -> Tensor<'t> {
        let (a, gi, bi) = (self.id, gamma.id, beta.id);
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let c = x.shape()[1];
        assert_eq!(gv.len(), c, "affine_channel: gamma length");
        assert_eq!(bv.len(), c, "affine_channel: beta length");
        let v = channel_affine_apply(&x, |_b, ch| (gv[[ch]], bv[[ch]]));
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.tape.push(
            v,
            rg,
            Some(Box::new(move |vals, g, sink| {
                let x = &vals[a];
                let gv = &vals[gi];
                let c = x.shape()[1];
                let dx = channel_affine_apply_g(g, |_b, ch| gv[[ch]]);
                let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
                let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
                channel_reduce(g, x, |_b, ch, gsum, gxsum| {
                    dgamma[[ch]] += gxsum;
                    dbeta[[ch]] += gsum;
                });
                sink.add(a, dx);
                sink.add(gi, dgamma);
                sink.add(bi, dbeta);
            })),
        )
    }

    /// `y[b, c, ...] = x[b, c, ...] * s[b, c] + t[b, c]` — per-sample channel
    /// affine, used by adaptive group normalization.
    pub fn scale_shift(self, s: Tensor<'t>, t: Tensor<'t>) -> Tensor<'t> {
        let (a, si, ti) = (self.id, s.id, t.id);
        let x = self.value();
        let sv = s.value();
        let tv = t.value();
        assert_eq!(sv.shape(), &x.shape()[..2], "scale_shift: s shape");
        assert_eq!(tv.shape(), &x.shape()[..2], "scale_shift: t shape");
        let v = channel_affine_apply(&x, |b, ch| (sv[[b, ch]], tv[[b, ch]]));
        let rg = self.requires_grad() || s.requires_grad() || t.requires_grad();
        self.tape.push(
            v,
            rg,
            Some(Box::new(move |vals, g, sink| {
                let x = &vals[a];
                let sv = &vals[si];
                let (bsz, c) = (x.shape()[0], x.shape()[1]);
                let dx = channel_affine_apply_g(g, |b, ch| sv[[b, ch]]);
                let mut ds = ArrayD::zeros(IxDyn(&[bsz, c]));
                let mut dt = ArrayD::zeros(IxDyn(&[bsz, c]));
                channel_reduce(g, x, |b, ch, gsum, gxsum| {
                    ds[[b, ch]] = gxsum;
                    dt[[b, ch]] = gsum;
                });
                sink.add(a, dx);
                sink.add(si, ds);
                sink.add(ti, dt);
            })),
        )
    }

    // ---- matmul ----

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(self, other: Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.id, other.id);
        let x = to2(&self.value());
        let y = to2(&other.value());
        let mut out = Array2::<f64>::zeros((x.nrows(), y.ncols()));
        general_mat_mul(1.0, &x, &y, 0.0, &mut out);
        self.tape.push(
            out.into_dyn(),
            self.requires_grad() || other.requires_grad(),
            Some(Box::new(move |vals, g, sink| {
                let x = to2(&vals[a]);
                let y = to2(&vals[b]);
                let g2 = to2(g);
                let mut dx = Array2::<f64>::zeros(x.raw_dim());
                general_mat_mul(1.0, &g2, &y.t().to_owned(), 0.0, &mut dx);
                let mut dy = Array2::<f64>::zeros(y.raw_dim());
                general_mat_mul(1.0, &x.t().to_owned(), &g2, 0.0, &mut dy);
                sink.add(a, dx.into_dyn());
                sink.add(b, dy.into_dyn());
            })),
        )
    }

    /// Batched matmul: `[g, m, k] x [g, k, n] -> [g, m, n]`
    pub fn bmm(self, other: Tensor<'t>) -> Tensor<'t> {
        let (a, b) = (self.id, other.id);
        let x = self.value().into_dimensionality::<Ix3>().expect("bmm lhs 3d");
        let y = other.value().into_dimensionality::<Ix3>().expect("bmm rhs 3d");
        assert_eq!(x.shape()[0], y.shape()[0], "bmm: batch mismatch");
        assert_eq!(x.shape()[2], y.shape()[1], "bmm: inner dim mismatch");
        let (gb, m, n) = (x.shape()[0], x.shape()[1], y.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((gb, m, n));
        for i in 0..gb {
            let (xi, yi) = (x.index_axis(Axis(0), i), y.index_axis(Axis(0), i));
            let mut oi = out.index_axis_mut(Axis(0), i);
            general_mat_mul(
                1.0,
                &xi.as_standard_layout().view(),
                &yi.as_standard_layout().view(),
                0.0,
                &mut oi,
            );
        }
        self.tape.push(
            out.into_dyn(),
            self.requires_grad() || other.requires_grad(),
            Some(Box::new(move |vals, g, sink| {
                let x = vals[a].view().into_dimensionality::<Ix3>().unwrap();
                let y = vals[b].view().into_dimensionality::<Ix3>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros(x.raw_dim());
                let mut dy = ndarray::Array3::<f64>::zeros(y.raw_dim());
                for i in 0..x.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i).as_standard_layout().to_owned();
                    let xi = x.index_axis(Axis(0), i).as_standard_layout().to_owned();
                    let yi = y.index_axis(Axis(0), i).as_standard_layout().to_owned();
                    general_mat_mul(1.0, &gi, &yi.t().to_owned(), 0.0, &mut dx.index_axis_mut(Axis(0), i));
                    general_mat_mul(1.0, &xi.t().to_owned(), &gi, 0.0, &mut dy.index_axis_mut(Axis(0), i));
                }
                sink.add(a, dx.into_dyn());
                sink.add(b, dy.into_dyn());
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Tensor<'t> {
        let a = self.id;
        let mut v = self.value();
        let n = *v.shape().last().expect("softmax on 0-d");
        let rows = v.len() / n;
        {
            let mut flat = v.view_mut().into_shape_with_order((rows, n)).unwrap();
            for mut row in flat.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - m).exp());
                let s: f64 = row.sum();
                row.mapv_inplace(|x| x / s);
            }
        }
        let y = v.clone();
        self.tape.push(
            v,
            self.requires_grad(),
            Some(Box::new(move |_vals, g, sink| {
                let mut dx = g.clone();
                let n = *dx.shape().last().unwrap();
                let rows = dx.len() / n;
                let mut dflat = dx.view_mut().into_shape_with_order((rows, n)).unwrap();
                let yflat = y.view().into_shape_with_order((rows, n)).unwrap();
                for (mut dr, yr) in dflat.rows_mut().into_iter().zip(yflat.rows()) {
                    let dot: f64 = dr.iter().zip(yr.iter()).map(|(d, y)| d * y).sum();
                    for (d, &yv) in dr.iter_mut().zip(yr.iter()) {
                        *d = yv * (*d - dot);
                    }
                }
                sink.add(a, dx);
            })),
        )
    }

    pub(crate) fn requires_grad(&self) -> bool {
        self.tape.node_requires_grad(self.id)
    }
}

fn to2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d array")
        .as_standard_layout()
        .to_owned()
}

/// y[b, c, rest] = x[b, c, rest] * f(b, c).0 + f(b, c).1
fn channel_affine_apply(
    x: &ArrayD<f64>,
    f: impl Fn(usize, usize) -> (f64, f64),
) -> ArrayD<f64> {
    let (bsz, c) = (x.shape()[0], x.shape()[1]);
    let rest: usize = x.shape()[2..].iter().product();
    let shape = x.raw_dim();
    let flat = x.view().into_shape_with_order((bsz, c, rest)).unwrap();
    let mut out = flat.to_owned();
    for b in 0..bsz {
        for ch in 0..c {
            let (s, t) = f(b, ch);
            let mut lane = out.slice_mut(ndarray::s![b, ch, ..]);
            lane.mapv_inplace(|v| v * s + t);
        }
    }
    out.into_shape_with_order(shape).unwrap().into_dyn()
}

/// dx[b, c, rest] = g[b, c, rest] * scale(b, c)
fn channel_affine_apply_g(g: &ArrayD<f64>, scale: impl Fn(usize, usize) -> f64) -> ArrayD<f64> {
    let (bsz, c) = (g.shape()[0], g.shape()[1]);
    let rest: usize = g.shape()[2..].iter().product();
    let shape = g.raw_dim();
    let flat = g.view().into_shape_with_order((bsz, c, rest)).unwrap();
    let mut out = flat.to_owned();
    for b in 0..bsz {
        for ch in 0..c {
            let s = scale(b, ch);
            out.slice_mut(ndarray::s![b, ch, ..]).mapv_inplace(|v| v * s);
        }
    }
    out.into_shape_with_order(shape).unwrap().into_dyn()
}

/// Per (b, c): hand `sum(g)` and `sum(g * x)` over the trailing dims to `emit`.
fn channel_reduce(
    g: &ArrayD<f64>,
    x: &ArrayD<f64>,
    mut emit: impl FnMut(usize, usize, f64, f64),
) {
    let (bsz, c) = (x.shape()[0], x.shape()[1]);
    let rest: usize = x.shape()[2..].iter().product();
    let gf = g.view().into_shape_with_order((bsz, c, rest)).unwrap();
    let xf = x.view().into_shape_with_order((bsz, c, rest)).unwrap();
    for b in 0..bsz {
        for ch in 0..c {
            let gl = gf.slice(ndarray::s![b, ch, ..]);
            let xl = xf.slice(ndarray::s![b, ch, ..]);
            let gsum: f64 = gl.sum();
            let gxsum: f64 = gl.iter().zip(xl.iter()).map(|(a, b)| a * b).sum();
            emit(b, ch, gsum, gxsum);
        }
    }
}


impl<'t> Tensor<'t> {
    /// Group normalization without affine parameters.
    ///
    /// `self` is `[B, C, ...]`; channels are split into `groups` contiguous
    /// groups and each `(sample, group)` slab is normalized to zero mean and
    /// unit variance (population variance, `eps`-stabilized). Pair with
    /// [`Tensor::affine_channel`] or [`Tensor::scale_shift`] for the learned
    /// or adaptive affine stage.
    pub fn group_norm(self, groups: usize, eps: f64) -> Tensor<'t> {
        let a = self.id;
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(shape.len() >= 2, "group_norm input must be [B, C, ...]");
        let (bsz, c) = (shape[0], shape[1]);
        assert!(c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        let rest: usize = shape[2..].iter().product();
        let glen = (c / groups) * rest;

        let xs = x.as_standard_layout().to_owned();
        let xf = xs.view().into_shape_with_order((bsz, groups, glen)).unwrap();
        let mut y = xf.to_owned();
        let mut invstd = vec![0.0f64; bsz * groups];
        for b in 0..bsz {
            for gi in 0..groups {
                let mut lane = y.slice_mut(ndarray::s![b, gi, ..]);
                let mean = lane.sum() / glen as f64;
                let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                let is = 1.0 / (var + eps).sqrt();
                invstd[b * groups + gi] = is;
                lane.mapv_inplace(|v| (v - mean) * is);
            }
        }
        let yv = y.clone();
        let out = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        let bshape = shape.clone();
        self.tape.push(
            out,
            self.requires_grad(),
            Some(Box::new(move |_vals, g, sink| {
                let gf = g.view().into_shape_with_order((bsz, groups, glen)).unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((bsz, groups, glen));
                for b in 0..bsz {
                    for gi in 0..groups {
                        let gl = gf.slice(ndarray::s![b, gi, ..]);
                        let yl = yv.slice(ndarray::s![b, gi, ..]);
                        let gmean = gl.sum() / glen as f64;
                        let gymean =
                            gl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum::<f64>() / glen as f64;
                        let is = invstd[b * groups + gi];
                        let mut dl = dx.slice_mut(ndarray::s![b, gi, ..]);
                        for ((d, &gv), &yvv) in dl.iter_mut().zip(gl.iter()).zip(yl.iter()) {
                            *d = is * (gv - gmean - yvv * gymean);
                        }
                    }
                }
                sink.add(a, dx.into_shape_with_order(IxDyn(&bshape)).unwrap());
            })),
        )
    }
}
