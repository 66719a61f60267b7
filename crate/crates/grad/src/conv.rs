//! 3D convolution (zero or replicate padding), implemented as im2col + gemm,
//! and nearest-neighbor upsampling. Layout is `[B, C, T, H, W]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Ix5, IxDyn};

use crate::tape::Tensor;

/// Padding applied on all three spatial-temporal axes, always "same"-sized
/// (`(k - 1) / 2` per side, odd kernels).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range taps read zero.
    Zero,
    /// Out-of-range taps read the nearest edge value (replicate / repeat
    /// padding). Keeps the operator shift-equivariant away from clip edges.
    Repeat,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv3dSpec {
    pub stride: (usize, usize, usize),
    pub pad: PadMode,
}

/// Output length along one axis for a same-padded strided conv.
pub fn conv_out_len(n: usize, k: usize, stride: usize) -> usize {
    let p = (k - 1) / 2;
    (n + 2 * p - k) / stride + 1
}

/// Flat gather map for one sample: `map[p * kvol + q]` is the flat index into
/// the `[Cin, T, H, W]` sample, or -1 for a zero-pad tap. Shared by forward
/// and backward so the two always agree on padding semantics.
fn build_gather_map(
    cin: usize,
    (t, h, w): (usize, usize, usize),
    (kt, kh, kw): (usize, usize, usize),
    spec: Conv3dSpec,
) -> (Vec<i64>, (usize, usize, usize)) {
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = ((kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let to = conv_out_len(t, kt, st);
    let ho = conv_out_len(h, kh, sh);
    let wo = conv_out_len(w, kw, sw);
    let kvol = cin * kt * kh * kw;
    let mut map = vec![0i64; to * ho * wo * kvol];

    let resolve = |idx: i64, n: usize| -> i64 {
        if idx >= 0 && (idx as usize) < n {
            idx
        } else {
            match spec.pad {
                PadMode::Zero => -1,
                PadMode::Repeat => idx.clamp(0, n as i64 - 1),
            }
        }
    };

    let mut m = 0usize;
    for ot in 0..to {
        for oh in 0..ho {
            for ow in 0..wo {
                for ci in 0..cin {
                    for it in 0..kt {
                        let ti = resolve(ot as i64 * st as i64 + it as i64 - pt as i64, t);
                        for ih in 0..kh {
                            let hi = resolve(oh as i64 * sh as i64 + ih as i64 - ph as i64, h);
                            for iw in 0..kw {
                                let wi =
                                    resolve(ow as i64 * sw as i64 + iw as i64 - pw as i64, w);
                                map[m] = if ti < 0 || hi < 0 || wi < 0 {
                                    -1
                                } else {
                                    (((ci * t + ti as usize) * h + hi as usize) * w
                                        + wi as usize) as i64
                                };
                                m += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (map, (to, ho, wo))
}

fn gather(sample: &[f64], map: &[i64], kvol: usize) -> Array2<f64> {
    let p = map.len() / kvol;
    let mut col = Array2::<f64>::zeros((p, kvol));
    let slice = col.as_slice_mut().unwrap();
    for (dst, &src) in slice.iter_mut().zip(map.iter()) {
        *dst = if src < 0 { 0.0 } else { sample[src as usize] };
    }
    col
}

impl<'t> Tensor<'t> {
    /// Same-padded strided 3D convolution.
    ///
    /// `self`: `[B, Cin, T, H, W]`, `weight`: `[Cout, Cin, kt, kh, kw]`,
    /// `bias`: `[Cout]`.
    pub fn conv3d(self, weight: Tensor<'t>, bias: Tensor<'t>, spec: Conv3dSpec) -> Tensor<'t> {
        let (xi, wi, bi) = (self.id, weight.id, bias.id);
        let x = self.value().into_dimensionality::<Ix5>().expect("conv3d input 5d");
        let wv = weight.value().into_dimensionality::<Ix5>().expect("conv3d weight 5d");
        let (bsz, cin, t, h, w) = {
            let s = x.shape();
            (s[0], s[1], s[2], s[3], s[4])
        };
        let (cout, wcin, kt, kh, kw) = {
            let s = wv.shape();
            (s[0], s[1], s[2], s[3], s[4])
        };
        assert_eq!(cin, wcin, "conv3d: channel mismatch");
        assert!(kt % 2 == 1 && kh % 2 == 1 && kw % 2 == 1, "conv3d: odd kernels only");

        let (map, (to, ho, wo)) = build_gather_map(cin, (t, h, w), (kt, kh, kw), spec);
        let kvol = cin * kt * kh * kw;
        let p = to * ho * wo;

        let w2 = wv
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((cout, kvol))
            .unwrap();
        let bvec = bias.value();
        assert_eq!(bvec.len(), cout, "conv3d: bias length");

        let xs = x.as_standard_layout().to_owned();
        let xflat = xs.as_slice().unwrap();
        let sample_len = cin * t * h * w;
        let mut out = ndarray::Array5::<f64>::zeros((bsz, cout, to, ho, wo));
        {
            let oflat = out.as_slice_mut().unwrap();
            let mut prod = Array2::<f64>::zeros((p, cout));
            for b in 0..bsz {
                let col = gather(&xflat[b * sample_len..(b + 1) * sample_len], &map, kvol);
                general_mat_mul(1.0, &col, &w2.t().to_owned(), 0.0, &mut prod);
                // [P, Cout] -> [Cout, P] with bias
                let obase = b * cout * p;
                let pslice = prod.as_slice().unwrap();
                for pi in 0..p {
                    let row = &pslice[pi * cout..(pi + 1) * cout];
                    for (co, &v) in row.iter().enumerate() {
                        oflat[obase + co * p + pi] = v + bvec[[co]];
                    }
                }
            }
        }

        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        self.tape.push(
            out.into_dyn(),
            rg,
            Some(Box::new(move |vals, g, sink| {
                let x = &vals[xi];
                let wv = &vals[wi];
                let g5 = g.view().into_dimensionality::<Ix5>().unwrap();
                let w2 = wv
                    .view()
                    .into_shape_with_order((cout, kvol))
                    .unwrap()
                    .to_owned();
                let xs = x.as_standard_layout().to_owned();
                let xflat = xs.as_slice().unwrap();

                let mut dx = vec![0.0f64; bsz * sample_len];
                let mut dwall = Array2::<f64>::zeros((cout, kvol));
                let mut db = vec![0.0f64; cout];
                let gs = g5.as_standard_layout().to_owned();
                let gflat = gs.as_slice().unwrap();

                let mut gmat = Array2::<f64>::zeros((p, cout));
                let mut dcol = Array2::<f64>::zeros((p, kvol));
                for b in 0..bsz {
                    // gout sample [Cout, P] -> [P, Cout]
                    {
                        let gm = gmat.as_slice_mut().unwrap();
                        let gbase = b * cout * p;
                        for co in 0..cout {
                            let lane = &gflat[gbase + co * p..gbase + (co + 1) * p];
                            let mut acc = 0.0;
                            for (pi, &gv) in lane.iter().enumerate() {
                                gm[pi * cout + co] = gv;
                                acc += gv;
                            }
                            db[co] += acc;
                        }
                    }
                    let col = gather(&xflat[b * sample_len..(b + 1) * sample_len], &map, kvol);
                    general_mat_mul(1.0, &gmat.t().to_owned(), &col, 1.0, &mut dwall);
                    general_mat_mul(1.0, &gmat, &w2, 0.0, &mut dcol);
                    let dxs = &mut dx[b * sample_len..(b + 1) * sample_len];
                    let dc = dcol.as_slice().unwrap();
                    for (q, &src) in map.iter().enumerate() {
                        if src >= 0 {
                            dxs[src as usize] += dc[q];
                        }
                    }
                }

                sink.add(
                    xi,
                    ArrayD::from_shape_vec(IxDyn(&[bsz, cin, t, h, w]), dx).unwrap(),
                );
                sink.add(
                    wi,
                    dwall
                        .into_shape_with_order(IxDyn(&[cout, cin, kt, kh, kw]))
                        .unwrap(),
                );
                sink.add(bi, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());
            })),
        )
    }

    /// Nearest-neighbor upsampling by integer factors along (T, H, W).
    pub fn upsample_nearest(self, factors: (usize, usize, usize)) -> Tensor<'t> {
        let a = self.id;
        let (ft, fh, fw) = factors;
        let x = self.value().into_dimensionality::<Ix5>().expect("upsample input 5d");
        let (bsz, c, t, h, w) = {
            let s = x.shape();
            (s[0], s[1], s[2], s[3], s[4])
        };
        let mut out = ndarray::Array5::<f64>::zeros((bsz, c, t * ft, h * fh, w * fw));
        for b in 0..bsz {
            for ci in 0..c {
                for ot in 0..t * ft {
                    for oh in 0..h * fh {
                        for ow in 0..w * fw {
                            out[[b, ci, ot, oh, ow]] = x[[b, ci, ot / ft, oh / fh, ow / fw]];
                        }
                    }
                }
            }
        }
        self.tape.push(
            out.into_dyn(),
            self.requires_grad(),
            Some(Box::new(move |_vals, g, sink| {
                let g5 = g.view().into_dimensionality::<Ix5>().unwrap();
                let mut dx = ndarray::Array5::<f64>::zeros((bsz, c, t, h, w));
                for b in 0..bsz {
                    for ci in 0..c {
                        for ot in 0..t * ft {
                            for oh in 0..h * fh {
                                for ow in 0..w * fw {
                                    dx[[b, ci, ot / ft, oh / fh, ow / fw]] +=
                                        g5[[b, ci, ot, oh, ow]];
                                }
                            }
                        }
                    }
                }
                sink.add(a, dx.into_dyn());
            })),
        )
    }
}
