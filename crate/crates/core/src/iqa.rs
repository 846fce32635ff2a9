//! Full-reference similarity metrics and feature-distribution distances.
//!
//! Per-image metrics take the declared data range of the stack rather than the
//! observed range of each image, so that scores are comparable along a stack.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Image2D, ImageStack};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const HAARPSI_C: f64 = 30.0;
pub const HAARPSI_ALPHA: f64 = 4.2;
pub const DEFAULT_WD_BINS: usize = 256;

fn check_dims(a: &Image2D, b: &Image2D) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::dims(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::invalid(format!("data range {data_range} must be positive")));
    }
    Ok(())
}

pub fn mse(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_dims(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data.len() as f64)
}

/// `+inf` when the images are identical.
pub fn psnr(a: &Image2D, b: &Image2D, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Normalized cross-correlation with population standard deviations; `None`
/// when either image is constant.
pub fn ncc(a: &Image2D, b: &Image2D) -> Result<Option<f64>> {
    check_dims(a, b)?;
    let n = a.data.len() as f64;
    let ma = a.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

/// Normalized 1D Gaussian taps of the SSIM window (the 2D window is their
/// outer product).
pub fn ssim_window_1d() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering with the SSIM window.
fn filter_valid(data: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let g = ssim_window_1d();
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[x + ow * y] = g.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (k, &gk) in g.iter().enumerate() {
            let src = &rows[(y + k) * ow..(y + k + 1) * ow];
            for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += gk * v;
            }
        }
    }
    (out, ow, oh)
}

/// Mean SSIM and mean contrast-structure term over the valid region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParts {
    pub ssim: f64,
    pub cs: f64,
}

pub fn ssim_parts(a: &Image2D, b: &Image2D, data_range: f64) -> Result<SsimParts> {
    check_dims(a, b)?;
    check_range(data_range)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let x: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, ow, oh) = filter_valid(&x, w, h);
    let (my, _, _) = filter_valid(&y, w, h);
    let (sxx, _, _) = filter_valid(&xx, w, h);
    let (syy, _, _) = filter_valid(&yy, w, h);
    let (sxy, _, _) = filter_valid(&xy, w, h);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (mut acc_s, mut acc_cs) = (0.0, 0.0);
    for i in 0..ow * oh {
        let (ma, mb) = (mx[i], my[i]);
        let va = sxx[i] - ma * ma;
        let vb = syy[i] - mb * mb;
        let cov = sxy[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        acc_s += l * cs;
        acc_cs += cs;
    }
    let n = (ow * oh) as f64;
    Ok(SsimParts {
        ssim: acc_s / n,
        cs: acc_cs / n,
    })
}

pub fn ssim(a: &Image2D, b: &Image2D, data_range: f64) -> Result<f64> {
    Ok(ssim_parts(a, b, data_range)?.ssim)
}

/// 2x2 mean pooling; a trailing odd row or column is dropped.
pub fn downsample2(img: &Image2D) -> Image2D {
    let (w, h) = (img.width / 2, img.height / 2);
    Image2D::from_fn(w, h, |x, y| {
        let (x0, y0) = (2 * x, 2 * y);
        let s = img.get(x0, y0) as f64
            + img.get(x0 + 1, y0) as f64
            + img.get(x0, y0 + 1) as f64
            + img.get(x0 + 1, y0 + 1) as f64;
        (s / 4.0) as f32
    })
}

pub fn ms_ssim_min_dim() -> usize {
    SSIM_WINDOW << (MS_SSIM_WEIGHTS.len() - 1)
}

/// Five-scale SSIM: contrast-structure at every scale, luminance at the
/// coarsest only. Negative contrast-structure means are clamped to zero
/// before exponentiation.
pub fn ms_ssim(a: &Image2D, b: &Image2D, data_range: f64) -> Result<f64> {
    check_dims(a, b)?;
    let min = ms_ssim_min_dim();
    if a.width < min || a.height < min {
        return Err(Error::invalid(format!(
            "image {}x{} too small for {} scales (needs {min})",
            a.width,
            a.height,
            MS_SSIM_WEIGHTS.len()
        )));
    }
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut score = 1.0;
    let last = MS_SSIM_WEIGHTS.len() - 1;
    for (s, &w) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let p = ssim_parts(&x, &y, data_range)?;
        let term = if s == last { p.ssim } else { p.cs };
        score *= term.max(0.0).powf(w);
        if s != last {
            x = downsample2(&x);
            y = downsample2(&y);
        }
    }
    Ok(score)
}

/// 2D correlation with zero fill whose output is aligned like
/// `scipy.signal.convolve2d(img, rot180(k), mode="same")`.
fn correlate_same(data: &[f64], w: usize, h: usize, k: &[f64], kw: usize, kh: usize) -> Vec<f64> {
    let (ox, oy) = ((kw / 2) as isize, (kh / 2) as isize);
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for j in 0..kh as isize {
                let yy = y - oy + j;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for i in 0..kw as isize {
                    let xx = x - ox + i;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += data[(xx + yy * w as isize) as usize] * k[(i + j * kw as isize) as usize];
                }
            }
            out[(x + y * w as isize) as usize] = acc;
        }
    }
    out
}

/// Haar coefficients at `scale` (1-based) for both orientations.
fn haar_pair(data: &[f64], w: usize, h: usize, scale: u32) -> [Vec<f64>; 2] {
    let n = 1usize << scale;
    let amp = 2f64.powi(-(scale as i32));
    // first half of the rows negative: differences along y
    let ky: Vec<f64> = (0..n * n)
        .map(|i| if i / n < n / 2 { -amp } else { amp })
        .collect();
    let kx: Vec<f64> = (0..n * n)
        .map(|i| if i % n < n / 2 { -amp } else { amp })
        .collect();
    [correlate_same(data, w, h, &ky, n, n), correlate_same(data, w, h, &kx, n, n)]
}

fn haar_subsample(data: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let avg = correlate_same(data, w, h, &[0.25; 4], 2, 2);
    let (sw, sh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Vec::with_capacity(sw * sh);
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            out.push(avg[x + y * w]);
        }
    }
    (out, sw, sh)
}

fn logistic(v: f64, alpha: f64) -> f64 {
    1.0 / (1.0 + (-alpha * v).exp())
}

fn logit(v: f64, alpha: f64) -> f64 {
    (v / (1.0 - v)).ln() / alpha
}

/// Haar wavelet-based perceptual similarity on grayscale images (with the
/// reference implementation's 2x2 pre-subsampling). Intensities are mapped
/// to `[0, 255]` through `data_range` first.
pub fn haarpsi(a: &Image2D, b: &Image2D, data_range: f64) -> Result<f64> {
    check_dims(a, b)?;
    check_range(data_range)?;
    if a.width < 8 || a.height < 8 {
        return Err(Error::invalid(format!(
            "image {}x{} too small for HaarPSI (needs 8x8)",
            a.width, a.height
        )));
    }
    let k = 255.0 / data_range;
    let x: Vec<f64> = a.data.iter().map(|&v| v as f64 * k).collect();
    let y: Vec<f64> = b.data.iter().map(|&v| v as f64 * k).collect();
    let (x, w, h) = haar_subsample(&x, a.width, a.height);
    let (y, _, _) = haar_subsample(&y, a.width, a.height);
    let cx: Vec<[Vec<f64>; 2]> = (1..=3).map(|s| haar_pair(&x, w, h, s)).collect();
    let cy: Vec<[Vec<f64>; 2]> = (1..=3).map(|s| haar_pair(&y, w, h, s)).collect();
    let c = HAARPSI_C;
    let (mut num, mut den, mut plain) = (0.0, 0.0, 0.0);
    for o in 0..2 {
        for i in 0..w * h {
            let weight = cx[2][o][i].abs().max(cy[2][o][i].abs());
            let mut sim = 0.0;
            for s in 0..2 {
                let (p, q) = (cx[s][o][i].abs(), cy[s][o][i].abs());
                sim += (2.0 * p * q + c) / (p * p + q * q + c);
            }
            let l = logistic(sim / 2.0, HAARPSI_ALPHA);
            num += l * weight;
            den += weight;
            plain += l;
        }
    }
    // no level-3 structure in either image: fall back to the unweighted mean
    let mean = if den > 0.0 { num / den } else { plain / (2 * w * h) as f64 };
    Ok(logit(mean, HAARPSI_ALPHA).powi(2))
}

/// 1D Wasserstein distance between intensity histograms over a shared range
/// `[lo, hi]` with `bins` centred bins of width `(hi - lo) / (bins - 1)`.
pub fn wd_intensity(a: &Image2D, b: &Image2D, range: (f32, f32), bins: usize) -> Result<f64> {
    let (lo, hi) = (range.0 as f64, range.1 as f64);
    if bins < 2 || !(hi > lo) {
        return Err(Error::invalid(format!("need >= 2 bins over a non-empty range, got {bins} over [{lo}, {hi}]")));
    }
    let width = (hi - lo) / (bins - 1) as f64;
    let hist = |img: &Image2D| {
        let mut h = vec![0u64; bins];
        for &v in &img.data {
            let k = ((v as f64 - lo) / width).round().clamp(0.0, (bins - 1) as f64);
            h[k as usize] += 1;
        }
        h
    };
    if a.data.is_empty() || b.data.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    Ok(crate::cc::cdf_l1(&hist(a), &hist(b)) * width)
}

/// Row-major feature matrix, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    rows: usize,
    dim: usize,
}

impl Features {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::dims(format!("{} values for {rows}x{dim} features", data.len())));
        }
        Ok(Features { rows, dim, data })
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.dim, self.data.iter().map(|&v| v as f64))
    }

    /// Reads `<stem>.json` (`{"rows", "dim"}`) and the little-endian f32
    /// payload `<stem>.raw`; `path` may name either file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let json = path.as_ref().with_extension("json");
        let raw = path.as_ref().with_extension("raw");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let head: FeatureHeader = serde_json::from_str(&text)?;
        let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        let expected = head.rows * head.dim * 4;
        if bytes.len() != expected {
            return Err(Error::PayloadSize {
                expected,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Features::new(head.rows, head.dim, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = path.as_ref().with_extension("json");
        let raw = path.as_ref().with_extension("raw");
        let head = serde_json::to_string(&FeatureHeader {
            rows: self.rows,
            dim: self.dim,
        })?;
        std::fs::write(&json, head).map_err(|e| Error::io(&json, e))?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
    }
}

fn check_features(a: &Features, b: &Features) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::dims(format!("feature dims {} vs {}", a.dim, b.dim)));
    }
    if a.rows < 2 || b.rows < 2 {
        return Err(Error::invalid("need at least 2 feature rows per set"));
    }
    Ok(())
}

fn mean_cov(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows() as f64;
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

/// Trace of the principal square root of `a * b` for symmetric PSD `a`, `b`,
/// via the eigenvalues of the symmetric `a^(1/2) b a^(1/2)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ea = SymmetricEigen::new(a.clone());
    let root = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sa = &ea.eigenvectors * DMatrix::from_diagonal(&root) * ea.eigenvectors.transpose();
    let mut m = &sa * b * &sa;
    m = (&m + m.transpose()) * 0.5;
    let ev = SymmetricEigen::new(m).eigenvalues;
    let scale = ev.iter().fold(0f64, |s, v| s.max(v.abs()));
    let mut clamped = 0;
    let total = ev
        .iter()
        .map(|&v| {
            if v < 0.0 {
                if v < -1e-10 * scale {
                    clamped += 1;
                }
                0.0
            } else {
                v.sqrt()
            }
        })
        .sum();
    if clamped > 0 {
        log::warn!("frechet: clamped {clamped} negative eigenvalue(s) of the covariance product");
    }
    total
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &Features, b: &Features) -> Result<f64> {
    check_features(a, b)?;
    let (ma, ca) = mean_cov(&a.matrix());
    let (mb, cb) = mean_cov(&b.matrix());
    let d2 = (&ma - &mb).norm_squared();
    let tr = ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
    Ok(d2 + tr)
}

/// Unbiased squared MMD with the polynomial kernel `(x.y / dim + 1)^degree`.
/// May be slightly negative.
pub fn kid(a: &Features, b: &Features, degree: i32) -> Result<f64> {
    check_features(a, b)?;
    if degree < 1 {
        return Err(Error::invalid(format!("kernel degree {degree} must be >= 1")));
    }
    let (x, y) = (a.matrix(), b.matrix());
    let d = a.dim as f64;
    let kern = |g: DMatrix<f64>| g.map(|v| (v / d + 1.0).powi(degree));
    let kxx = kern(&x * x.transpose());
    let kyy = kern(&y * y.transpose());
    let kxy = kern(&x * y.transpose());
    let (m, n) = (a.rows as f64, b.rows as f64);
    let off = |k: &DMatrix<f64>| k.sum() - k.trace();
    Ok(off(&kxx) / (m * (m - 1.0)) + off(&kyy) / (n * (n - 1.0)) - 2.0 * kxy.sum() / (m * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Mse,
    Psnr,
    Ncc,
    Ssim,
    MsSsim,
    Haarpsi,
    Wd,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Mse,
        Metric::Psnr,
        Metric::Ncc,
        Metric::Ssim,
        Metric::MsSsim,
        Metric::Haarpsi,
        Metric::Wd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Psnr => "psnr",
            Metric::Ncc => "ncc",
            Metric::Ssim => "ssim",
            Metric::MsSsim => "ms-ssim",
            Metric::Haarpsi => "haarpsi",
            Metric::Wd => "wd",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Mse | Metric::Wd)
    }

    /// Per-image value; `None` where the metric is undefined (NCC on a
    /// constant image).
    pub fn evaluate(self, a: &Image2D, b: &Image2D, range: (f32, f32)) -> Result<Option<f64>> {
        let dr = (range.1 - range.0) as f64;
        Ok(Some(match self {
            Metric::Mse => mse(a, b)?,
            Metric::Psnr => psnr(a, b, dr)?,
            Metric::Ncc => return ncc(a, b),
            Metric::Ssim => ssim(a, b, dr)?,
            Metric::MsSsim => ms_ssim(a, b, dr)?,
            Metric::Haarpsi => haarpsi(a, b, dr)?,
            Metric::Wd => wd_intensity(a, b, range, DEFAULT_WD_BINS)?,
        }))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    PerImageMean,
    PerStack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub region: String,
    pub model: String,
    pub resolution: String,
    pub metric: String,
    /// `None` together with `unbounded` for PSNR on identical data.
    pub value: Option<f64>,
    pub unbounded: bool,
    pub aggregation: Aggregation,
}

/// Mean of the per-slice scores of `generated` against `reference`, using the
/// reference stack's declared range.
#[derive(Debug, Clone, PartialEq)]
pub struct StackScore {
    pub value: Option<f64>,
    pub unbounded: bool,
    /// Slices left out of the mean (infinite or undefined).
    pub excluded: usize,
    pub per_slice: Vec<Option<f64>>,
}

pub fn stack_score(metric: Metric, generated: &ImageStack, reference: &ImageStack) -> Result<StackScore> {
    if generated.dims != reference.dims {
        return Err(Error::dims(format!("{:?} vs {:?}", generated.dims, reference.dims)));
    }
    let range = reference.intensity_range;
    let per_slice: Vec<Option<f64>> = (0..reference.dims[2])
        .into_par_iter()
        .map(|z| metric.evaluate(&generated.slice(z), &reference.slice(z), range))
        .collect::<Result<_>>()?;
    let usable: Vec<f64> = per_slice.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let excluded = per_slice.len() - usable.len();
    if excluded > 0 {
        log::info!("{metric}: {excluded} of {} slice(s) excluded from the mean", per_slice.len());
    }
    if usable.is_empty() {
        let all_inf = !per_slice.is_empty() && per_slice.iter().all(|v| v.is_some_and(f64::is_infinite));
        if all_inf {
            return Ok(StackScore {
                value: None,
                unbounded: true,
                excluded,
                per_slice,
            });
        }
        return Err(Error::invalid(format!("{metric}: no usable slices")));
    }
    Ok(StackScore {
        value: Some(usable.iter().sum::<f64>() / usable.len() as f64),
        unbounded: false,
        excluded,
        per_slice,
    })
}
