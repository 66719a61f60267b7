//! Evaluation: PSNR for reconstructions, encoder-feature Fréchet and kernel
//! distances between video sets, and per-clip degradation curves over long
//! videos.
//!
//! The feature extractor is the project's own trained 3D encoder with
//! spatial-temporal mean pooling — distances are comparable across runs of
//! this system, not against numbers from external feature networks.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use kinema_grad::nn::Params;

use crate::autoencoder::Autoencoder3d;
use crate::data::VideoTensor;
use crate::error::{Error, Result};

/// Peak signal-to-noise ratio in dB for signals in `[-1, 1]` (peak-to-peak
/// 2): `10 * log10(4 / mse)`. Identical inputs report `+inf`.
pub fn psnr(x: &VideoTensor, y: &VideoTensor) -> Result<f64> {
    if x.pixels.dim() != y.pixels.dim() {
        return Err(Error::shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            x.pixels.dim(),
            y.pixels.dim()
        )));
    }
    let n = x.pixels.len() as f64;
    let mse = x
        .pixels
        .iter()
        .zip(y.pixels.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (4.0 / mse).log10())
}

/// The default feature map: encode a clip and mean-pool the latent over
/// space and time, giving a `c`-dimensional vector.
pub fn encoder_features(
    ae: &Autoencoder3d,
    ps: &Params,
    clip: &VideoTensor,
) -> Result<Vec<f64>> {
    let latent = ae.encode(ps, clip)?;
    let (h, w, l, c) = latent.dims();
    let scale = 1.0 / (h * w * l) as f64;
    let mut out = vec![0.0; c];
    for ((_, _, _, ch), &v) in latent.codes.indexed_iter() {
        out[ch] += v * scale;
    }
    Ok(out)
}

/// Stack per-clip features into an `n_videos x d` matrix. Non-finite
/// features are an error naming the offending clip.
pub fn clip_features<F>(videos: &[VideoTensor], feature_fn: F) -> Result<Array2<f64>>
where
    F: Fn(&VideoTensor) -> Result<Vec<f64>>,
{
    if videos.is_empty() {
        return Err(Error::config("feature extraction needs at least one video"));
    }
    let first = feature_fn(&videos[0])?;
    let d = first.len();
    let mut m = Array2::zeros((videos.len(), d));
    for (i, clip) in videos.iter().enumerate() {
        let f = if i == 0 { first.clone() } else { feature_fn(clip)? };
        if f.len() != d {
            return Err(Error::shape(format!(
                "clip {i} produced {} features, expected {d}",
                f.len()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("clip {i} produced non-finite features")));
        }
        for (j, v) in f.into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

fn mean_rows(f: &Array2<f64>) -> Vec<f64> {
    let (n, d) = f.dim();
    let mut mu = vec![0.0; d];
    for row in f.rows() {
        for (j, v) in row.iter().enumerate() {
            mu[j] += v / n as f64;
        }
    }
    mu
}

/// Sample covariance (rows are observations), with `ridge` added to the
/// diagonal.
fn covariance(f: &Array2<f64>, mu: &[f64], ridge: f64) -> nalgebra::DMatrix<f64> {
    let (n, d) = f.dim();
    let mut cov = nalgebra::DMatrix::zeros(d, d);
    for row in f.rows() {
        for a in 0..d {
            let da = row[a] - mu[a];
            for b in 0..d {
                cov[(a, b)] += da * (row[b] - mu[b]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for a in 0..d {
        cov[(a, a)] += ridge;
    }
    cov
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues slightly
/// negative from roundoff are clamped; materially negative ones are an
/// error.
fn sym_sqrt(m: &nalgebra::DMatrix<f64>, what: &str) -> Result<nalgebra::DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.amax().max(1.0);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-8 * scale {
            return Err(Error::numerical(format!(
                "{what} is not positive semidefinite (eigenvalue {v:.3e}, scale {scale:.3e})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let v = eig.eigenvectors;
    Ok(&v * nalgebra::DMatrix::from_diagonal(&vals) * v.transpose())
}

const COV_RIDGE: f64 = 1e-6;

/// Fréchet distance between Gaussian fits of two feature sets:
/// `||mu_r - mu_f||^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2})`, with a 1e-6
/// ridge on both covariances and the matrix square root computed by
/// eigendecomposition. Needs at least `d + 1` rows on each side.
pub fn frechet_distance(f_real: &Array2<f64>, f_fake: &Array2<f64>) -> Result<f64> {
    let (nr, d) = f_real.dim();
    let (nf, df) = f_fake.dim();
    if d != df {
        return Err(Error::shape(format!("feature widths differ: {d} vs {df}")));
    }
    if nr < d + 1 || nf < d + 1 {
        return Err(Error::config(format!(
            "covariance needs at least {} rows per side, got {nr} and {nf}",
            d + 1
        )));
    }
    let mu_r = mean_rows(f_real);
    let mu_f = mean_rows(f_fake);
    let cov_r = covariance(f_real, &mu_r, COV_RIDGE);
    let cov_f = covariance(f_fake, &mu_f, COV_RIDGE);

    let root_r = sym_sqrt(&cov_r, "real covariance")?;
    let prod = &root_r * &cov_f * &root_r;
    let cross = sym_sqrt(&prod, "covariance product")?;

    let mean_term: f64 = mu_r
        .iter()
        .zip(&mu_f)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let fd = mean_term + cov_r.trace() + cov_f.trace() - 2.0 * cross.trace();
    Ok(fd.max(0.0))
}

fn poly_kernel(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>, d: usize) -> f64 {
    let dot: f64 = x.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    let base = dot / d as f64 + 1.0;
    base * base * base
}

/// Unbiased squared maximum mean discrepancy with the polynomial kernel
/// `(x . y / d + 1)^3`. Symmetric in its arguments; can be slightly negative
/// for identical sets (unbiasedness).
pub fn kernel_distance(f_real: &Array2<f64>, f_fake: &Array2<f64>) -> Result<f64> {
    let (m, d) = f_real.dim();
    let (n, df) = f_fake.dim();
    if d != df {
        return Err(Error::shape(format!("feature widths differ: {d} vs {df}")));
    }
    if m < 2 || n < 2 {
        return Err(Error::config("kernel distance needs at least 2 rows per side"));
    }
    let mut xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += poly_kernel(f_real.row(i), f_real.row(j), d);
            }
        }
    }
    xx /= (m * (m - 1)) as f64;
    let mut yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += poly_kernel(f_fake.row(i), f_fake.row(j), d);
            }
        }
    }
    yy /= (n * (n - 1)) as f64;
    let mut xy = 0.0;
    for i in 0..m {
        for j in 0..n {
            xy += poly_kernel(f_real.row(i), f_fake.row(j), d);
        }
    }
    xy *= 2.0 / (m * n) as f64;
    Ok(xx + yy - xy)
}

/// Which distance a [`MetricSeries`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeriesMetric {
    Frechet,
    Kernel,
}

/// Per-clip distance curve over a set of long videos: one value per
/// consecutive non-overlapped clip position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSeries {
    pub clip_len: usize,
    /// Generated videos per point.
    pub n_samples: usize,
    pub metric: SeriesMetric,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn clip_indices(&self) -> impl Iterator<Item = usize> {
        0..self.values.len()
    }

    /// Plain-text table, one `clip_index value` row per point.
    pub fn table(&self) -> String {
        let mut out = String::from("clip_index\tvalue\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{i}\t{v:.6}\n"));
        }
        out
    }
}

/// Distance between each non-overlapped `clip_len`-frame clip position of
/// the generated videos and the reference clips. Uses the Fréchet distance
/// when both sides have enough rows for a `d`-dimensional covariance,
/// otherwise falls back to the kernel distance for the whole curve with a
/// warning.
pub fn degradation_curve<F>(
    generated: &[VideoTensor],
    reference: &[VideoTensor],
    clip_len: usize,
    feature_fn: F,
) -> Result<MetricSeries>
where
    F: Fn(&VideoTensor) -> Result<Vec<f64>>,
{
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::config("degradation curve needs non-empty video sets"));
    }
    if clip_len == 0 {
        return Err(Error::config("clip_len must be >= 1"));
    }
    let total = generated[0].num_frames();
    if total == 0 || !total.is_multiple_of(clip_len) {
        return Err(Error::shape(format!(
            "video length {total} is not a multiple of clip_len {clip_len}"
        )));
    }
    for (i, v) in generated.iter().enumerate() {
        if v.num_frames() != total {
            return Err(Error::shape(format!(
                "generated video {i} has {} frames, expected {total}",
                v.num_frames()
            )));
        }
    }
    for (i, v) in reference.iter().enumerate() {
        if v.num_frames() < clip_len {
            return Err(Error::shape(format!(
                "reference video {i} is shorter than one clip ({} < {clip_len})",
                v.num_frames()
            )));
        }
    }

    let ref_clips: Vec<VideoTensor> =
        reference.iter().map(|v| v.frames(0, clip_len)).collect();
    let ref_feats = clip_features(&ref_clips, &feature_fn)?;
    let d = ref_feats.dim().1;

    let use_frechet = generated.len() > d && reference.len() > d;
    if !use_frechet {
        log::warn!(
            "only {} generated / {} reference videos for {d}-dim features; \
             reporting the kernel distance instead of the Fréchet distance",
            generated.len(),
            reference.len()
        );
    }

    let n_clips = total / clip_len;
    let mut values = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let clips: Vec<VideoTensor> = generated
            .iter()
            .map(|v| v.frames(i * clip_len, clip_len))
            .collect();
        let feats = clip_features(&clips, &feature_fn)?;
        let v = if use_frechet {
            frechet_distance(&ref_feats, &feats)?
        } else {
            kernel_distance(&ref_feats, &feats)?
        };
        if !v.is_finite() {
            return Err(Error::numerical(format!("non-finite distance at clip {i}")));
        }
        values.push(v);
    }
    Ok(MetricSeries {
        clip_len,
        n_samples: generated.len(),
        metric: if use_frechet { SeriesMetric::Frechet } else { SeriesMetric::Kernel },
        values,
    })
}

/// Render the curve as a simple PNG line plot.
pub fn plot_curve(series: &MetricSeries, path: &std::path::Path) -> Result<()> {
    let (width, height, margin) = (640u32, 400u32, 40i64);
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let axis = image::Rgb([60, 60, 60]);
    let line = image::Rgb([30, 90, 180]);

    let put = |img: &mut image::RgbImage, x: i64, y: i64, c: image::Rgb<u8>| {
        if x >= 0 && y >= 0 && (x as u32) < width && (y as u32) < height {
            img.put_pixel(x as u32, y as u32, c);
        }
    };
    let (w, h) = (width as i64, height as i64);
    for x in margin..w - margin {
        put(&mut img, x, h - margin, axis);
    }
    for y in margin..h - margin {
        put(&mut img, margin, y, axis);
    }

    let n = series.values.len();
    let vmax = series.values.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    let vmin = series.values.iter().cloned().fold(f64::MAX, f64::min).min(0.0);
    let span = (vmax - vmin).max(1e-12);
    let to_xy = |i: usize, v: f64| {
        let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let fy = (v - vmin) / span;
        let x = margin + (fx * (w - 2 * margin) as f64) as i64;
        let y = (h - margin) - (fy * (h - 2 * margin) as f64) as i64;
        (x, y)
    };
    for i in 0..n {
        let (x0, y0) = to_xy(i, series.values[i]);
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                put(&mut img, x0 + dx, y0 + dy, line);
            }
        }
        if i + 1 < n {
            let (x1, y1) = to_xy(i + 1, series.values[i + 1]);
            let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let x = x0 + ((x1 - x0) as f64 * t) as i64;
                let y = y0 + ((y1 - y0) as f64 * t) as i64;
                put(&mut img, x, y, line);
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("plot write failed: {e}"))))?;
    Ok(())
}
