//! Multiscale Hessian enhancement of tubular structures using Jerman's
//! regularized vesselness, in 2D (per slice) and 3D.
//!
//! At each scale the image is smoothed with a sampled Gaussian (truncated at
//! 4 sigma, reflect boundary) and the Hessian is taken by central second
//! differences of the smoothed field, multiplied by sigma^2. Scales are given
//! as vessel FWHM in pixels and converted with `sigma = FWHM / (2 sqrt(2 ln 2))`.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Image2D, ImageStack};

/// `1 / (2 sqrt(2 ln 2))`
pub const FWHM_TO_SIGMA: f64 = 0.424_660_900_144_009_5;

pub const MIN_SIGMA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub min_fwhm: f64,
    pub max_fwhm: f64,
    pub step: f64,
}

impl Default for ScaleRange {
    fn default() -> Self {
        ScaleRange {
            min_fwhm: 2.0,
            max_fwhm: 24.0,
            step: 0.5,
        }
    }
}

impl ScaleRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_fwhm > 0.0 && self.min_fwhm <= self.max_fwhm && self.step > 0.0) {
            return Err(Error::invalid(format!("invalid scale range {self:?}")));
        }
        Ok(())
    }

    /// FWHM values `min, min + step, ...` up to and including `max`.
    pub fn fwhms(&self) -> Vec<f64> {
        let n = ((self.max_fwhm - self.min_fwhm) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| self.min_fwhm + k as f64 * self.step)
            .collect()
    }
}

/// Parses `MIN:STEP:MAX`.
impl FromStr for ScaleRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("scale range `{s}`: {e}")))?;
        let [min_fwhm, step, max_fwhm] = parts[..] else {
            return Err(Error::invalid(format!("scale range `{s}` is not MIN:STEP:MAX")));
        };
        let r = ScaleRange {
            min_fwhm,
            max_fwhm,
            step,
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselnessParams {
    pub scales: ScaleRange,
    pub tau: f64,
    pub bright_on_dark: bool,
}

impl Default for VesselnessParams {
    fn default() -> Self {
        VesselnessParams {
            scales: ScaleRange::default(),
            tau: 0.5,
            bright_on_dark: true,
        }
    }
}

impl VesselnessParams {
    pub fn validate(&self) -> Result<()> {
        self.scales.validate()?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid(format!("tau {} outside (0, 1]", self.tau)));
        }
        Ok(())
    }
}

pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm * FWHM_TO_SIGMA
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn kernel_radius(sigma: f64) -> usize {
    (4.0 * sigma + 0.5).floor() as usize
}

/// Sampled, normalized Gaussian truncated at 4 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = kernel_radius(sigma) as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| (v / s) as f32).collect()
}

fn check_sigma(sigma: f64, dims: [usize; 3]) -> Result<()> {
    if !(sigma > MIN_SIGMA) {
        return Err(Error::invalid(format!("sigma {sigma} must exceed {MIN_SIGMA} px")));
    }
    let r = kernel_radius(sigma);
    for &n in dims.iter().filter(|&&n| n > 1) {
        if r > n {
            return Err(Error::invalid(format!(
                "kernel half-width {r} exceeds image extent {n} (sigma {sigma})"
            )));
        }
    }
    Ok(())
}

/// In-place separable Gaussian blur of a 3D array (axes of extent 1 are skipped).
pub fn gaussian_blur(data: &mut [f32], dims: [usize; 3], sigma: f64) {
    gaussian_blur_axes(data, dims, [sigma; 3]);
}

/// Separable Gaussian blur with one sigma per axis; axes with sigma <= 0 or extent 1 are skipped.
pub fn gaussian_blur_axes(data: &mut [f32], dims: [usize; 3], sigmas: [f64; 3]) {
    let src = data.to_vec();
    let mut tmp = vec![0f32; data.len()];
    blur_into(&src, data, &mut tmp, dims, sigmas);
}

/// Blurs `src` into `dst`, using `tmp` as scratch; all three have the same length.
fn blur_into(src: &[f32], dst: &mut [f32], tmp: &mut [f32], dims: [usize; 3], sigmas: [f64; 3]) {
    let active: Vec<usize> = (0..3).filter(|&a| dims[a] > 1 && sigmas[a] > 0.0).collect();
    if active.is_empty() {
        dst.copy_from_slice(src);
        return;
    }
    let axpy = select_axpy();
    let k = active.len();
    // ping-pong so that the last pass lands in dst
    for (j, &axis) in active.iter().enumerate() {
        let kernel = gaussian_kernel(sigmas[axis]);
        let to_dst = (k - j) % 2 == 1;
        match (j, to_dst) {
            (0, true) => blur_axis(src, dst, dims, axis, &kernel, axpy),
            (0, false) => blur_axis(src, tmp, dims, axis, &kernel, axpy),
            (_, true) => blur_axis(tmp, dst, dims, axis, &kernel, axpy),
            (_, false) => blur_axis(dst, tmp, dims, axis, &kernel, axpy),
        }
    }
}

/// `out += a * (x + y)`, the kernel being symmetric.
type Axpy = fn(&mut [f32], f32, &[f32], &[f32]);

#[inline(always)]
fn axpy_body(out: &mut [f32], a: f32, x: &[f32], y: &[f32]) {
    let n = out.len();
    let (x, y) = (&x[..n], &y[..n]);
    for i in 0..n {
        out[i] += a * (x[i] + y[i]);
    }
}

fn axpy_scalar(out: &mut [f32], a: f32, x: &[f32], y: &[f32]) {
    axpy_body(out, a, x, y)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2_inner(out: &mut [f32], a: f32, x: &[f32], y: &[f32]) {
    axpy_body(out, a, x, y)
}

#[cfg(target_arch = "x86_64")]
fn axpy_avx2(out: &mut [f32], a: f32, x: &[f32], y: &[f32]) {
    // SAFETY: only selected after runtime detection of AVX2
    unsafe { axpy_avx2_inner(out, a, x, y) }
}

/// Wider vectors where available; no fused multiply-add, so results do not
/// depend on the CPU.
fn select_axpy() -> Axpy {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            return axpy_avx2;
        }
    }
    axpy_scalar
}

/// Far Gaussian tails decay into the subnormal range, where arithmetic is
/// two orders of magnitude slower on common CPUs.
#[inline]
fn flush_subnormal(v: &mut [f32]) {
    for x in v {
        if x.abs() < f32::MIN_POSITIVE {
            *x = 0.0;
        }
    }
}

fn blur_axis(src: &[f32], dst: &mut [f32], dims: [usize; 3], axis: usize, kernel: &[f32], axpy: Axpy) {
    let [nx, ny, nz] = dims;
    let r = (kernel.len() / 2) as isize;
    let plane = nx * ny;
    match axis {
        0 => {
            dst.par_chunks_mut(nx)
                .zip(src.par_chunks(nx))
                .for_each_init(
                    || Vec::with_capacity(nx + 2 * r as usize),
                    |pad, (out, row)| {
                        pad.clear();
                        pad.extend((-r..nx as isize + r).map(|i| row[reflect(i, nx)]));
                        let ru = r as usize;
                        for (o, &v) in out.iter_mut().zip(&pad[ru..ru + nx]) {
                            *o = kernel[ru] * v;
                        }
                        for k in 0..ru {
                            axpy(out, kernel[k], &pad[k..k + nx], &pad[2 * ru - k..2 * ru - k + nx]);
                        }
                        flush_subnormal(out);
                    },
                );
        }
        1 => {
            dst.par_chunks_mut(plane)
                .zip(src.par_chunks(plane))
                .for_each(|(out, inp)| {
                    for y in 0..ny {
                        let orow = &mut out[y * nx..(y + 1) * nx];
                        for (o, &v) in orow.iter_mut().zip(&inp[y * nx..(y + 1) * nx]) {
                            *o = kernel[r as usize] * v;
                        }
                        for k in 0..r {
                            let lo = reflect(y as isize + k - r, ny);
                            let hi = reflect(y as isize + r - k, ny);
                            axpy(orow, kernel[k as usize], &inp[lo * nx..(lo + 1) * nx], &inp[hi * nx..(hi + 1) * nx]);
                        }
                        flush_subnormal(orow);
                    }
                });
        }
        _ => {
            dst.par_chunks_mut(plane).enumerate().for_each(|(z, out)| {
                for (o, &v) in out.iter_mut().zip(&src[z * plane..(z + 1) * plane]) {
                    *o = kernel[r as usize] * v;
                }
                for k in 0..r {
                    let lo = reflect(z as isize + k - r, nz);
                    let hi = reflect(z as isize + r - k, nz);
                    axpy(out, kernel[k as usize], &src[lo * plane..(lo + 1) * plane], &src[hi * plane..(hi + 1) * plane]);
                }
                flush_subnormal(out);
            });
        }
    }
}

/// Scale-normalized 2D Hessian fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Hessian2 {
    pub xx: Vec<f32>,
    pub xy: Vec<f32>,
    pub yy: Vec<f32>,
}

/// Scale-normalized 3D Hessian fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Hessian3 {
    pub xx: Vec<f32>,
    pub yy: Vec<f32>,
    pub zz: Vec<f32>,
    pub xy: Vec<f32>,
    pub xz: Vec<f32>,
    pub yz: Vec<f32>,
}

/// Neighbour offsets (reflected) of a voxel along each axis.
#[derive(Clone, Copy)]
struct Stencil {
    i: usize,
    xm: usize,
    xp: usize,
    ym: usize,
    yp: usize,
    zm: usize,
    zp: usize,
}

impl Stencil {
    #[inline]
    fn new(x: usize, y: usize, z: usize, dims: [usize; 3]) -> Self {
        let [nx, ny, nz] = dims;
        let plane = nx * ny;
        let i = x + nx * y + plane * z;
        let xm = if x == 0 { 0 } else { 1 };
        let xp = if x + 1 == nx { 0 } else { 1 };
        let ym = if y == 0 { 0 } else { nx };
        let yp = if y + 1 == ny { 0 } else { nx };
        let zm = if z == 0 { 0 } else { plane };
        let zp = if z + 1 == nz { 0 } else { plane };
        Stencil {
            i,
            xm,
            xp,
            ym,
            yp,
            zm,
            zp,
        }
    }

    #[inline]
    fn hessian2(&self, f: &[f32]) -> [f32; 3] {
        let c = f[self.i];
        let xx = f[self.i + self.xp] - 2.0 * c + f[self.i - self.xm];
        let yy = f[self.i + self.yp] - 2.0 * c + f[self.i - self.ym];
        let xy = 0.25
            * (f[self.i + self.xp + self.yp] - f[self.i + self.xp - self.ym]
                - f[self.i - self.xm + self.yp]
                + f[self.i - self.xm - self.ym]);
        [xx, xy, yy]
    }

    /// `[xx, yy, zz, xy, xz, yz]`
    #[inline]
    fn hessian3(&self, f: &[f32]) -> [f32; 6] {
        let i = self.i;
        let c = f[i];
        let xx = f[i + self.xp] - 2.0 * c + f[i - self.xm];
        let yy = f[i + self.yp] - 2.0 * c + f[i - self.ym];
        let zz = f[i + self.zp] - 2.0 * c + f[i - self.zm];
        let xy = 0.25
            * (f[i + self.xp + self.yp] - f[i + self.xp - self.ym] - f[i - self.xm + self.yp]
                + f[i - self.xm - self.ym]);
        let xz = 0.25
            * (f[i + self.xp + self.zp] - f[i + self.xp - self.zm] - f[i - self.xm + self.zp]
                + f[i - self.xm - self.zm]);
        let yz = 0.25
            * (f[i + self.yp + self.zp] - f[i + self.yp - self.zm] - f[i - self.ym + self.zp]
                + f[i - self.ym - self.zm]);
        [xx, yy, zz, xy, xz, yz]
    }
}

pub fn hessian_at_scale_2d(img: &Image2D, sigma: f64) -> Result<Hessian2> {
    let dims = [img.width, img.height, 1];
    check_sigma(sigma, dims)?;
    let mut smooth = img.data.clone();
    gaussian_blur(&mut smooth, dims, sigma);
    let norm = (sigma * sigma) as f32;
    let n = img.data.len();
    let mut h = Hessian2 {
        xx: vec![0.0; n],
        xy: vec![0.0; n],
        yy: vec![0.0; n],
    };
    for y in 0..img.height {
        for x in 0..img.width {
            let s = Stencil::new(x, y, 0, dims);
            let [xx, xy, yy] = s.hessian2(&smooth);
            h.xx[s.i] = xx * norm;
            h.xy[s.i] = xy * norm;
            h.yy[s.i] = yy * norm;
        }
    }
    Ok(h)
}

pub fn hessian_at_scale_3d(stack: &ImageStack, sigma: f64) -> Result<Hessian3> {
    let dims = stack.dims;
    check_sigma(sigma, dims)?;
    let mut smooth = stack.voxels.clone();
    gaussian_blur(&mut smooth, dims, sigma);
    let norm = (sigma * sigma) as f32;
    let n = smooth.len();
    let mut h = Hessian3 {
        xx: vec![0.0; n],
        yy: vec![0.0; n],
        zz: vec![0.0; n],
        xy: vec![0.0; n],
        xz: vec![0.0; n],
        yz: vec![0.0; n],
    };
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let s = Stencil::new(x, y, z, dims);
                let c = s.hessian3(&smooth);
                h.xx[s.i] = c[0] * norm;
                h.yy[s.i] = c[1] * norm;
                h.zz[s.i] = c[2] * norm;
                h.xy[s.i] = c[3] * norm;
                h.xz[s.i] = c[4] * norm;
                h.yz[s.i] = c[5] * norm;
            }
        }
    }
    Ok(h)
}

/// Eigenvalues of `[[xx, xy], [xy, yy]]`, sorted by ascending magnitude.
pub fn eigenvalues_sym2(xx: f64, xy: f64, yy: f64) -> [f64; 2] {
    let half_tr = 0.5 * (xx + yy);
    let d = (0.25 * (xx - yy) * (xx - yy) + xy * xy).sqrt();
    let (a, b) = (half_tr + d, half_tr - d);
    if a.abs() <= b.abs() {
        [a, b]
    } else {
        [b, a]
    }
}

/// Eigenvalues of a symmetric 3x3 matrix by the trigonometric closed form,
/// sorted by ascending magnitude. `m = [xx, yy, zz, xy, xz, yz]`.
pub fn eigenvalues_sym3(m: [f64; 6]) -> [f64; 3] {
    let [a11, a22, a33, a12, a13, a23] = m;
    let p1 = a12 * a12 + a13 * a13 + a23 * a23;
    let mut e = if p1 == 0.0 {
        [a11, a22, a33]
    } else {
        let q = (a11 + a22 + a33) / 3.0;
        let (b11, b22, b33) = (a11 - q, a22 - q, a33 - q);
        let p2 = b11 * b11 + b22 * b22 + b33 * b33 + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let det = b11 * (b22 * b33 - a23 * a23) - a12 * (a12 * b33 - a23 * a13)
            + a13 * (a12 * a23 - b22 * a13);
        let r = (det / (2.0 * p * p * p)).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    };
    e.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    e
}

/// Number of positive eigenvalues of a symmetric 3x3 matrix, from the sign
/// changes of its characteristic polynomial (exact for real-rooted polynomials).
#[inline(always)]
fn positive_eigen_count(m: [f32; 6]) -> u8 {
    let [a, b, c, d, e, f] = m.map(|v| v as f64);
    let tr = a + b + c;
    let minors = a * b + a * c + b * c - d * d - e * e - f * f;
    let det = a * (b * c - f * f) - d * (d * c - f * e) + e * (d * f - b * e);
    // lambda^3 - tr lambda^2 + minors lambda - det
    // zero coefficients are skipped; written branch-free so rows vectorize
    let mut changes = 0u8;
    let mut last_pos = true;
    for c in [-tr, minors, -det] {
        let nonzero = c != 0.0;
        let pos = c > 0.0;
        changes += u8::from(nonzero & (pos != last_pos));
        last_pos = if nonzero { pos } else { last_pos };
    }
    changes
}

/// Jerman's regularized vesselness for one voxel. `l2`, `l3` are the two
/// largest-magnitude eigenvalues after the polarity flip; `cap` is
/// `tau * max(l3)` over the image at this scale.
#[inline]
pub fn jerman_response(l2: f64, l3: f64, cap: f64) -> f64 {
    if l2 <= 0.0 || l3 <= 0.0 {
        return 0.0;
    }
    let rho = if l3 > cap { l3 } else { cap };
    if rho <= 0.0 {
        return 0.0;
    }
    if l2 >= rho / 2.0 {
        return 1.0;
    }
    let k = 3.0 / (l2 + rho);
    (l2 * l2 * (rho - l2) * k * k * k).clamp(0.0, 1.0)
}

/// Output of a multiscale run: the max-over-scales response and the FWHM
/// that produced it (0 where the response is 0).
#[derive(Debug, Clone, PartialEq)]
pub struct VesselnessResult {
    pub dims: [usize; 3],
    pub response: Vec<f32>,
    pub scale: Vec<f32>,
}

/// One scale of the filter: response and the flipped `l2` used to break ties
/// between scales with equal (typically saturated) response.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleResponse {
    pub fwhm: f64,
    pub response: Vec<f32>,
    pub strength: Vec<f32>,
}

#[inline]
fn in_interior(x: usize, y: usize, z: usize, dims: [usize; 3], band: usize) -> bool {
    let ok = |c: usize, n: usize| n == 1 || (c >= band && c + band < n);
    ok(x, dims[0]) && ok(y, dims[1]) && ok(z, dims[2])
}

fn interior_band(sigma: f64, dims: [usize; 3]) -> usize {
    let band = (2.0 * sigma).ceil() as usize;
    // keep some interior on tiny images
    let min_extent = dims.iter().copied().filter(|&n| n > 1).min().unwrap_or(1);
    band.min(min_extent.saturating_sub(1) / 2)
}

/// Single-scale 2D response with the maximum taken per image.
pub fn scale_response_2d(img: &Image2D, fwhm: f64, params: &VesselnessParams) -> Result<ScaleResponse> {
    let sigma = fwhm_to_sigma(fwhm);
    let h = hessian_at_scale_2d(img, sigma)?;
    let sign = if params.bright_on_dark { -1.0 } else { 1.0 };
    let n = img.data.len();
    let mut lam = vec![0f32; n];
    for i in 0..n {
        let [_, l] = eigenvalues_sym2(h.xx[i] as f64, h.xy[i] as f64, h.yy[i] as f64);
        lam[i] = (sign * l) as f32;
    }
    let dims = [img.width, img.height, 1];
    let band = interior_band(sigma, dims);
    let mut peak = 0f32;
    for y in 0..img.height {
        for x in 0..img.width {
            if in_interior(x, y, 0, dims, band) {
                peak = peak.max(lam[x + img.width * y]);
            }
        }
    }
    let cap = params.tau * peak as f64;
    let response = if peak > 0.0 {
        lam.iter()
            .map(|&l| jerman_response(l as f64, l as f64, cap) as f32)
            .collect()
    } else {
        vec![0.0; n]
    };
    Ok(ScaleResponse {
        fwhm,
        response,
        strength: lam,
    })
}

/// Buffers reused across the scales of a 3D run.
struct Workspace3 {
    smooth: Vec<f32>,
    prev: Vec<f32>,
    tmp: Vec<f32>,
    /// Per z-plane, the voxels with at least two positive eigenvalues.
    eig: Vec<Vec<Eig>>,
    /// Frobenius norm of interior voxels with one positive eigenvalue, else 0.
    deferred: Vec<f32>,
}

impl Workspace3 {
    fn new(n: usize) -> Self {
        Workspace3 {
            smooth: vec![0.0; n],
            prev: Vec::new(),
            tmp: vec![0.0; n],
            eig: Vec::new(),
            deferred: vec![0.0; n],
        }
    }
}

/// Flipped `l2 <= l3` of a voxel that can respond.
#[derive(Clone, Copy)]
struct Eig {
    index: usize,
    l2: f32,
    l3: f32,
}

/// A row of the smoothed field and its eight neighbouring rows in the y/z
/// plane, clamped at the borders.
struct Rows<'a> {
    c: &'a [f32],
    ym: &'a [f32],
    yp: &'a [f32],
    zm: &'a [f32],
    zp: &'a [f32],
    ymzm: &'a [f32],
    ymzp: &'a [f32],
    ypzm: &'a [f32],
    ypzp: &'a [f32],
}

/// Per-row scratch: Hessian components, positive-eigenvalue counts and
/// Frobenius norms.
struct RowScratch {
    h: [Vec<f32>; 6],
    count: Vec<u8>,
    frob: Vec<f32>,
}

impl RowScratch {
    fn new(nx: usize) -> Self {
        RowScratch {
            h: std::array::from_fn(|_| vec![0f32; nx]),
            count: vec![0; nx],
            frob: vec![0f32; nx],
        }
    }
}

type HessianRow = fn(&Rows, f32, &mut RowScratch);

/// Scaled, sign-flipped Hessians `[xx, yy, zz, xy, xz, yz]` of a row with
/// their positive-eigenvalue counts and Frobenius norms; laid out so the
/// row interior vectorizes.
#[inline(always)]
fn hessian_row_body(r: &Rows, scale: f32, scratch: &mut RowScratch) {
    hessian_row_fill(r, scale, &mut scratch.h);
    let [a, b, c, d, e, f] = &scratch.h;
    let nx = r.c.len();
    let (a, b, c, d, e, f) = (&a[..nx], &b[..nx], &c[..nx], &d[..nx], &e[..nx], &f[..nx]);
    let (count, frob) = (&mut scratch.count[..nx], &mut scratch.frob[..nx]);
    for x in 0..nx {
        let m = [a[x], b[x], c[x], d[x], e[x], f[x]];
        count[x] = positive_eigen_count(m);
        frob[x] = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2] + 2.0 * (m[3] * m[3] + m[4] * m[4] + m[5] * m[5])).sqrt();
    }
}

#[inline(always)]
fn hessian_row_fill(r: &Rows, scale: f32, h: &mut [Vec<f32>; 6]) {
    let nx = r.c.len();
    let cat = |x: usize| {
        let xm = x.saturating_sub(1);
        let xp = (x + 1).min(nx - 1);
        let c = r.c[x];
        let xx = r.c[xp] - 2.0 * c + r.c[xm];
        let yy = r.yp[x] - 2.0 * c + r.ym[x];
        let zz = r.zp[x] - 2.0 * c + r.zm[x];
        let xy = 0.25 * (r.yp[xp] - r.ym[xp] - r.yp[xm] + r.ym[xm]);
        let xz = 0.25 * (r.zp[xp] - r.zm[xp] - r.zp[xm] + r.zm[xm]);
        let yz = 0.25 * (r.ypzp[x] - r.ypzm[x] - r.ymzp[x] + r.ymzm[x]);
        [xx * scale, yy * scale, zz * scale, xy * scale, xz * scale, yz * scale]
    };
    let edges = if nx > 1 { [0, nx - 1] } else { [0, 0] };
    for x in edges {
        let v = cat(x);
        for (a, hv) in h.iter_mut().zip(v) {
            a[x] = hv;
        }
    }
    if nx < 3 {
        return;
    }
    let m = nx - 2;
    let (c0, c1, c2) = (&r.c[..m], &r.c[1..m + 1], &r.c[2..]);
    let (ym0, ym1, ym2) = (&r.ym[..m], &r.ym[1..m + 1], &r.ym[2..]);
    let (yp0, yp1, yp2) = (&r.yp[..m], &r.yp[1..m + 1], &r.yp[2..]);
    let (zm0, zm1, zm2) = (&r.zm[..m], &r.zm[1..m + 1], &r.zm[2..]);
    let (zp0, zp1, zp2) = (&r.zp[..m], &r.zp[1..m + 1], &r.zp[2..]);
    let (a, b, c, d) = (&r.ymzm[1..m + 1], &r.ymzp[1..m + 1], &r.ypzm[1..m + 1], &r.ypzp[1..m + 1]);
    let [hxx, hyy, hzz, hxy, hxz, hyz] = h;
    let (hxx, hyy, hzz) = (&mut hxx[1..m + 1], &mut hyy[1..m + 1], &mut hzz[1..m + 1]);
    let (hxy, hxz, hyz) = (&mut hxy[1..m + 1], &mut hxz[1..m + 1], &mut hyz[1..m + 1]);
    for k in 0..m {
        let cc = c1[k];
        hxx[k] = (c2[k] - 2.0 * cc + c0[k]) * scale;
        hyy[k] = (yp1[k] - 2.0 * cc + ym1[k]) * scale;
        hzz[k] = (zp1[k] - 2.0 * cc + zm1[k]) * scale;
        hxy[k] = 0.25 * (yp2[k] - ym2[k] - yp0[k] + ym0[k]) * scale;
        hxz[k] = 0.25 * (zp2[k] - zm2[k] - zp0[k] + zm0[k]) * scale;
        hyz[k] = 0.25 * (d[k] - c[k] - b[k] + a[k]) * scale;
    }
}

fn hessian_row_scalar(r: &Rows, scale: f32, h: &mut RowScratch) {
    hessian_row_body(r, scale, h)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn hessian_row_avx2_inner(r: &Rows, scale: f32, h: &mut RowScratch) {
    hessian_row_body(r, scale, h)
}

#[cfg(target_arch = "x86_64")]
fn hessian_row_avx2(r: &Rows, scale: f32, h: &mut RowScratch) {
    // SAFETY: only selected after runtime detection of AVX2
    unsafe { hessian_row_avx2_inner(r, scale, h) }
}

fn select_hessian_row() -> HessianRow {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            return hessian_row_avx2;
        }
    }
    hessian_row_scalar
}

/// Collects the voxels of `ws.smooth` with at least two positive eigenvalues
/// after the flip and returns the interior maximum of `l3`.
fn eigen_pass_3d(dims: [usize; 3], sigma: f64, bright_on_dark: bool, ws: &mut Workspace3) -> f32 {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let sign: f32 = if bright_on_dark { -1.0 } else { 1.0 };
    let scale = sign * (sigma * sigma) as f32;
    let band = interior_band(sigma, dims);
    let smooth = &ws.smooth;
    ws.eig.resize_with(nz, Vec::new);
    let inside = |c: usize, n: usize| n == 1 || (c >= band && c + band < n);
    let (x_lo, x_hi) = if nx == 1 { (0, 1) } else { (band, nx.saturating_sub(band)) };

    // Pass 1: voxels with a single positive eigenvalue cannot respond and
    // are deferred; they only matter for the per-scale maximum.
    let row_fn = select_hessian_row();
    let peak = ws
        .eig
        .par_iter_mut()
        .zip(ws.deferred.par_chunks_mut(plane))
        .enumerate()
        .map_init(
            || RowScratch::new(nx),
            |rs, (z, (eig, defp))| {
                eig.clear();
                let mut peak = 0f32;
                let zm = z.saturating_sub(1);
                let zp = (z + 1).min(nz - 1);
                let zin = inside(z, nz);
                for y in 0..ny {
                    let ym = y.saturating_sub(1);
                    let yp = (y + 1).min(ny - 1);
                    let row = |yy: usize, zz: usize| &smooth[nx * (yy + ny * zz)..nx * (yy + ny * zz) + nx];
                    let rows = Rows {
                        c: row(y, z),
                        ym: row(ym, z),
                        yp: row(yp, z),
                        zm: row(y, zm),
                        zp: row(y, zp),
                        ymzm: row(ym, zm),
                        ymzp: row(ym, zp),
                        ypzm: row(yp, zm),
                        ypzp: row(yp, zp),
                    };
                    row_fn(&rows, scale, rs);
                    let yin = zin && inside(y, ny);
                    let base = nx * y;
                    let drow = &mut defp[base..base + nx];
                    drow.fill(0.0);
                    if yin {
                        for x in x_lo..x_hi {
                            drow[x] = if rs.count[x] == 1 { rs.frob[x] } else { 0.0 };
                        }
                    }
                    for x in 0..nx {
                        if rs.count[x] < 2 {
                            continue;
                        }
                        let m: [f32; 6] = std::array::from_fn(|k| rs.h[k][x]);
                        let e = eigenvalues_sym3(m.map(|v| v as f64));
                        let (l2, l3) = (e[1] as f32, e[2] as f32);
                        eig.push(Eig {
                            index: z * plane + base + x,
                            l2,
                            l3,
                        });
                        if yin && x >= x_lo && x < x_hi {
                            peak = peak.max(l3);
                        }
                    }
                }
                peak
            },
        )
        .reduce(|| 0f32, f32::max);

    // Pass 2: a deferred voxel can only raise the maximum if its Frobenius
    // norm (an upper bound on |lambda|) exceeds it.
    let deferred_peak = ws
        .deferred
        .par_chunks(plane)
        .enumerate()
        .map(|(z, defp)| {
            let mut local = 0f32;
            for (j, &frob) in defp.iter().enumerate() {
                if frob <= peak.max(local) {
                    continue;
                }
                let st = Stencil::new(j % nx, j / nx, z, dims);
                let h = st.hessian3(smooth).map(|v| scale * v);
                let e = eigenvalues_sym3(h.map(|v| v as f64));
                local = local.max(e[2] as f32);
            }
            local
        })
        .reduce(|| 0f32, f32::max);
    peak.max(deferred_peak)
}

/// Single-scale 3D response with the maximum of `l3` taken over the volume
/// interior.
pub fn scale_response_3d(stack: &ImageStack, fwhm: f64, params: &VesselnessParams) -> Result<ScaleResponse> {
    let sigma = fwhm_to_sigma(fwhm);
    check_sigma(sigma, stack.dims)?;
    let mut ws = Workspace3::new(stack.len());
    blur_into(&stack.voxels, &mut ws.smooth, &mut ws.tmp, stack.dims, [sigma; 3]);
    let peak = eigen_pass_3d(stack.dims, sigma, params.bright_on_dark, &mut ws);
    let cap = params.tau * peak as f64;
    let mut response = vec![0f32; stack.len()];
    let mut strength = vec![0f32; stack.len()];
    for e in ws.eig.iter().flatten() {
        strength[e.index] = e.l2;
        if peak > 0.0 {
            response[e.index] = jerman_response(e.l2 as f64, e.l3 as f64, cap) as f32;
        }
    }
    Ok(ScaleResponse {
        fwhm,
        response,
        strength,
    })
}

fn reduce_scales(
    dims: [usize; 3],
    n: usize,
    fwhms: &[f64],
    mut per_scale: impl FnMut(f64) -> Result<ScaleResponse>,
) -> Result<VesselnessResult> {
    let mut response = vec![0f32; n];
    let mut scale = vec![0f32; n];
    let mut strength = vec![f32::NEG_INFINITY; n];
    for &f in fwhms {
        let s = per_scale(f)?;
        response
            .par_iter_mut()
            .zip(scale.par_iter_mut())
            .zip(strength.par_iter_mut())
            .zip(s.response.par_iter().zip(s.strength.par_iter()))
            .for_each(|(((r, sc), st), (&v, &l))| {
                if v > 0.0 && (v > *r || (v == *r && l > *st)) {
                    *r = v;
                    *sc = f as f32;
                    *st = l;
                }
            });
    }
    Ok(VesselnessResult {
        dims,
        response,
        scale,
    })
}

/// 2D multiscale filter; the volume maximum is taken per image.
pub fn jerman_vesselness_2d(img: &Image2D, params: &VesselnessParams) -> Result<VesselnessResult> {
    params.validate()?;
    reduce_scales(
        [img.width, img.height, 1],
        img.data.len(),
        &params.scales.fwhms(),
        |f| scale_response_2d(img, f, params),
    )
}

/// 3D multiscale filter. Expects isotropic voxels.
///
/// Reduces the per-scale responses of [`scale_response_3d`] without
/// materializing them. Scales are visited in ascending order and each
/// smoothed field is obtained from the previous one with a Gaussian of
/// variance `sigma_k^2 - sigma_(k-1)^2`.
pub fn jerman_vesselness_3d(stack: &ImageStack, params: &VesselnessParams) -> Result<VesselnessResult> {
    params.validate()?;
    let fwhms = params.scales.fwhms();
    for &f in &fwhms {
        check_sigma(fwhm_to_sigma(f), stack.dims)?;
    }
    let n = stack.len();
    let plane = stack.dims[0] * stack.dims[1];
    let mut ws = Workspace3::new(n);
    let mut response = vec![0f32; n];
    let mut scale = vec![0f32; n];
    let mut strength = vec![f32::NEG_INFINITY; n];
    let mut prev_sigma = 0.0;
    ws.prev = vec![0.0; n];
    for f in fwhms {
        let sigma = fwhm_to_sigma(f);
        if prev_sigma == 0.0 {
            blur_into(&stack.voxels, &mut ws.smooth, &mut ws.tmp, stack.dims, [sigma; 3]);
        } else {
            std::mem::swap(&mut ws.smooth, &mut ws.prev);
            let step = (sigma * sigma - prev_sigma * prev_sigma).sqrt();
            blur_into(&ws.prev, &mut ws.smooth, &mut ws.tmp, stack.dims, [step; 3]);
        }
        prev_sigma = sigma;
        let peak = eigen_pass_3d(stack.dims, sigma, params.bright_on_dark, &mut ws);
        if peak <= 0.0 {
            continue;
        }
        let cap = params.tau * peak as f64;
        // each plane's voxels lie in a disjoint slab
        let slabs = response
            .par_chunks_mut(plane)
            .zip(scale.par_chunks_mut(plane))
            .zip(strength.par_chunks_mut(plane));
        slabs.zip(ws.eig.par_iter()).enumerate().for_each(|(z, (((r, sc), st), eig))| {
            for e in eig {
                let j = e.index - z * plane;
                let v = jerman_response(e.l2 as f64, e.l3 as f64, cap) as f32;
                if v > 0.0 && (v > r[j] || (v == r[j] && e.l2 > st[j])) {
                    r[j] = v;
                    sc[j] = f as f32;
                    st[j] = e.l2;
                }
            }
        });
    }
    Ok(VesselnessResult {
        dims: stack.dims,
        response,
        scale,
    })
}

/// Applies the 2D filter to each slice of a stack independently.
pub fn jerman_vesselness_slices(stack: &ImageStack, params: &VesselnessParams) -> Result<VesselnessResult> {
    params.validate()?;
    let per_slice: Vec<VesselnessResult> = stack
        .slices()
        .par_iter()
        .map(|s| jerman_vesselness_2d(s, params))
        .collect::<Result<_>>()?;
    let mut response = Vec::with_capacity(stack.len());
    let mut scale = Vec::with_capacity(stack.len());
    for r in per_slice {
        response.extend(r.response);
        scale.extend(r.scale);
    }
    Ok(VesselnessResult {
        dims: stack.dims,
        response,
        scale,
    })
}

impl VesselnessResult {
    pub fn to_stack(&self, spacing: [f64; 3]) -> ImageStack {
        ImageStack::new(self.dims, spacing, self.response.clone())
            .expect("response geometry is valid")
            .with_range((0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_residual(m: [f64; 6], l: f64) -> f64 {
        let [a, b, c, d, e, f] = m;
        let tr = a + b + c;
        let minors = a * b + a * c + b * c - d * d - e * e - f * f;
        let det = a * (b * c - f * f) - d * (d * c - f * e) + e * (d * f - b * e);
        let p = l * l * l - tr * l * l + minors * l - det;
        let scale = 1.0 + l.abs().powi(3) + tr.abs() * l * l + minors.abs() * l.abs() + det.abs();
        p.abs() / scale
    }

    /// Cyclic Jacobi rotations, used only as an oracle.
    fn jacobi_eigenvalues(m: [f64; 6]) -> [f64; 3] {
        let [a11, a22, a33, a12, a13, a23] = m;
        let mut a = [[a11, a12, a13], [a12, a22, a23], [a13, a23, a33]];
        for _ in 0..100 {
            let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
            if off < 1e-30 {
                break;
            }
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut r = [[0.0; 3]; 3];
                for (i, row) in r.iter_mut().enumerate() {
                    row[i] = 1.0;
                }
                r[p][p] = c;
                r[q][q] = c;
                r[p][q] = s;
                r[q][p] = -s;
                // a = r^T a r
                let mut tmp = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        tmp[i][j] = (0..3).map(|k| a[i][k] * r[k][j]).sum();
                    }
                }
                for i in 0..3 {
                    for j in 0..3 {
                        a[i][j] = (0..3).map(|k| r[k][i] * tmp[k][j]).sum();
                    }
                }
            }
        }
        let mut e = [a[0][0], a[1][1], a[2][2]];
        e.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
        e
    }

    #[test]
    fn diagonal_and_zero_eigenvalues() {
        assert_eq!(eigenvalues_sym2(1.0, 0.0, -3.0), [1.0, -3.0]);
        assert_eq!(eigenvalues_sym3([0.0; 6]), [0.0; 3]);
        assert_eq!(eigenvalues_sym3([2.0, -5.0, 1.0, 0.0, 0.0, 0.0]), [1.0, 2.0, -5.0]);
    }

    #[test]
    fn closed_form_matches_jacobi() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let m: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
            let fast = eigenvalues_sym3(m);
            let slow = jacobi_eigenvalues(m);
            for k in 0..3 {
                assert!((fast[k] - slow[k]).abs() < 1e-6, "{m:?}: {fast:?} vs {slow:?}");
                assert!(rel_residual(m, fast[k]) < 1e-5);
            }
        }
    }

    #[test]
    fn repeated_eigenvalues() {
        // 2 I + rank-one
        let e = eigenvalues_sym3([3.0, 3.0, 3.0, 1.0, 1.0, 1.0]);
        let want = [2.0, 2.0, 5.0];
        for k in 0..3 {
            assert!((e[k] - want[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn descartes_count_agrees_with_eigenvalues() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let m: [f32; 6] = std::array::from_fn(|_| rng.gen_range(-4.0..4.0));
            let e = eigenvalues_sym3(m.map(|v| v as f64));
            let want = e.iter().filter(|&&v| v > 1e-9).count() as u8;
            assert_eq!(positive_eigen_count(m), want, "{m:?} {e:?}");
        }
    }

    #[test]
    fn constant_image_has_zero_hessian() {
        let img = Image2D::filled(40, 40, 17.0);
        let h = hessian_at_scale_2d(&img, 2.0).unwrap();
        assert!(h.xx.iter().chain(&h.xy).chain(&h.yy).all(|&v| v == 0.0));
        let stack = ImageStack::new([20, 20, 20], [1.0; 3], vec![5.0; 8000]).unwrap();
        let h = hessian_at_scale_3d(&stack, 1.5).unwrap();
        assert!(h.zz.iter().chain(&h.xz).all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_second_derivative() {
        let sigma = 1.0;
        let img = Image2D::from_fn(64, 16, |x, _| {
            let x = x as f32 - 32.0;
            x * x
        });
        let h = hessian_at_scale_2d(&img, sigma).unwrap();
        for x in 10..54 {
            let v = h.xx[x + 64 * 8];
            assert!((v - 2.0 * (sigma * sigma) as f32).abs() < 1e-2, "{x}: {v}");
        }
    }

    #[test]
    fn blob_cross_derivative_is_antisymmetric_under_reflection() {
        let n = 41;
        let c = 20.0;
        let img = Image2D::from_fn(n, n, |x, y| {
            let r2 = (x as f32 - c).powi(2) + (y as f32 - c).powi(2);
            (-r2 / 30.0).exp()
        });
        let h = hessian_at_scale_2d(&img, 1.5).unwrap();
        for y in 0..n {
            for x in 0..n {
                let a = h.xy[x + n * y];
                // reflection x -> 2c - x flips the sign of d/dx
                let b = h.xy[(n - 1 - x) + n * y];
                assert!((a + b).abs() < 1e-6);
                // swapping axes leaves xy unchanged
                assert!((a - h.xy[y + n * x]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sigma_and_kernel_checks() {
        let img = Image2D::filled(8, 8, 0.0);
        assert!(hessian_at_scale_2d(&img, 0.2).is_err());
        assert!(hessian_at_scale_2d(&img, 5.0).is_err());
    }

    #[test]
    fn response_formula_branches() {
        assert_eq!(jerman_response(-1.0, 2.0, 0.5), 0.0);
        assert_eq!(jerman_response(1.0, 2.0, 0.5), 1.0);
        // l2 < rho/2: l2^2 (rho - l2) (3 / (l2 + rho))^3
        let v = jerman_response(0.5, 2.0, 0.5);
        let want = 0.25 * 1.5 * (3.0f64 / 2.5).powi(3);
        assert!((v - want).abs() < 1e-12);
        // weak l3 is lifted to the cap
        let v = jerman_response(0.1, 0.2, 1.0);
        let want = 0.01 * 0.9 * (3.0f64 / 1.1).powi(3);
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn scale_range_parsing() {
        let r: ScaleRange = "2:0.5:24".parse().unwrap();
        assert_eq!(r, ScaleRange::default());
        assert_eq!(r.fwhms().len(), 45);
        assert_eq!(*r.fwhms().last().unwrap(), 24.0);
        assert!("2:0.5".parse::<ScaleRange>().is_err());
        assert!("4:0.5:2".parse::<ScaleRange>().is_err());
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }
}
