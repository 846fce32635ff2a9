//! Rigid X-Y registration of upsampled low-resolution slices onto the
//! high-resolution reference by maximizing mutual information.
//!
//! The optimizer is an exhaustive coarse-to-fine grid search over a
//! block-averaged pyramid (4x, 2x, 1x). Candidates are scored on the full
//! fixed frame, with out-of-bounds samples of the warped moving image set
//! to zero, so every candidate is scored on the same pixel set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Image2D;

pub const DEFAULT_MI_BINS: usize = 64;

/// Rotation (degrees, counter-clockwise in pixel axes) about `center`,
/// followed by a translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
    pub center: [f64; 2],
}

impl RigidTransform2D {
    pub fn identity(center: [f64; 2]) -> Self {
        RigidTransform2D {
            theta: 0.0,
            tx: 0.0,
            ty: 0.0,
            center,
        }
    }

    /// Transform about the geometric center of a `width` x `height` image.
    pub fn centered(width: usize, height: usize, theta: f64, tx: f64, ty: f64) -> Self {
        RigidTransform2D {
            theta,
            tx,
            ty,
            center: image_center(width, height),
        }
    }

    /// Forward map of a source point.
    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.to_radians().sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (
            c * dx - s * dy + self.center[0] + self.tx,
            s * dx + c * dy + self.center[1] + self.ty,
        )
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.theta).to_radians().sin_cos();
        RigidTransform2D {
            theta: -self.theta,
            tx: -(c * self.tx - s * self.ty),
            ty: -(s * self.tx + c * self.ty),
            center: self.center,
        }
    }
}

pub fn image_center(width: usize, height: usize) -> [f64; 2] {
    [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0]
}

/// Bounds of the registration search: translation in pixels, rotation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchWindow {
    pub max_translation: f64,
    pub max_rotation: f64,
}

impl Default for SearchWindow {
    fn default() -> Self {
        SearchWindow {
            max_translation: 16.0,
            max_rotation: 2.0,
        }
    }
}

fn bin_index(v: f32, lo: f32, scale: f64, bins: usize) -> usize {
    (((v - lo) as f64 * scale) as usize).min(bins - 1)
}

/// Mutual information (nats) of the joint histogram of two equally sized images.
///
/// Each image is binned with `bins` equal-width bins over its own observed
/// range. A constant image has zero mutual information with anything.
pub fn mutual_information(a: &Image2D, b: &Image2D, bins: usize) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::dims(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if bins < 2 {
        return Err(Error::invalid("mutual information needs at least 2 bins"));
    }
    Ok(mi_values(&a.data, &b.data, bins))
}

fn mi_values(a: &[f32], b: &[f32], bins: usize) -> f64 {
    let range = |v: &[f32]| {
        v.iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    if a.is_empty() || ahi <= alo || bhi <= blo {
        return 0.0;
    }
    let sa = bins as f64 / (ahi - alo) as f64;
    let sb = bins as f64 / (bhi - blo) as f64;
    let mut joint = vec![0u64; bins * bins];
    for (&va, &vb) in a.iter().zip(b) {
        let i = bin_index(va, alo, sa, bins);
        let j = bin_index(vb, blo, sb, bins);
        joint[i * bins + j] += 1;
    }
    let n = a.len() as f64;
    let mut pa = vec![0f64; bins];
    let mut pb = vec![0f64; bins];
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j] as f64;
            pa[i] += c;
            pb[j] += c;
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let c = c as f64;
                // p(u,v) ln(p(u,v) / p(u) p(v)) with counts
                mi += c / n * (c * n / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}

/// Backward warp with bilinear sampling. Returns the warped image and a
/// validity mask; samples falling outside the source are zero and invalid.
pub fn apply_transform(img: &Image2D, t: &RigidTransform2D) -> (Image2D, Vec<bool>) {
    let inv = t.inverse();
    let (w, h) = (img.width, img.height);
    let mut out = vec![0f32; w * h];
    let mut valid = vec![false; w * h];
    out.par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, vrow))| {
            for x in 0..w {
                let (sx, sy) = inv.forward(x as f64, y as f64);
                if let Some(v) = bilinear(img, sx, sy) {
                    row[x] = v;
                    vrow[x] = true;
                }
            }
        });
    (
        Image2D {
            width: w,
            height: h,
            data: out,
        },
        valid,
    )
}

fn bilinear(img: &Image2D, x: f64, y: f64) -> Option<f32> {
    const EPS: f64 = 1e-9;
    let (w, h) = (img.width as f64, img.height as f64);
    if !(x >= -EPS && y >= -EPS && x <= w - 1.0 + EPS && y <= h - 1.0 + EPS) {
        return None;
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let v00 = img.get(x0, y0) as f64;
    if fx == 0.0 && fy == 0.0 {
        return Some(v00 as f32);
    }
    let v10 = img.get(x1, y0) as f64;
    let v01 = img.get(x0, y1) as f64;
    let v11 = img.get(x1, y1) as f64;
    let top = v00 + fx * (v10 - v00);
    let bot = v01 + fx * (v11 - v01);
    Some((top + fy * (bot - top)) as f32)
}

fn decimate(img: &Image2D, d: usize) -> Image2D {
    if d == 1 {
        return img.clone();
    }
    let (w, h) = (img.width / d, img.height / d);
    let norm = 1.0 / (d * d) as f64;
    Image2D::from_fn(w, h, |x, y| {
        let mut s = 0f64;
        for yy in y * d..(y + 1) * d {
            for xx in x * d..(x + 1) * d {
                s += img.get(xx, yy) as f64;
            }
        }
        (s * norm) as f32
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    tx: f64,
    ty: f64,
    theta: f64,
}

impl Candidate {
    fn tie_key(&self) -> (f64, f64, f64, f64, f64) {
        (
            self.tx.abs() + self.ty.abs(),
            self.theta.abs(),
            self.tx,
            self.ty,
            self.theta,
        )
    }
}

/// Symmetric grid `center + k * step` clipped to `[-limit, limit]`, where
/// `k` runs over `-reach..=reach`.
fn grid(center: f64, step: f64, reach: i64, limit: f64) -> Vec<f64> {
    (-reach..=reach)
        .map(|k| center + k as f64 * step)
        .filter(|v| v.abs() <= limit + 1e-9)
        .collect()
}

/// Finds the rigid transform that maps `moving` onto `fixed`.
pub fn register_rigid(
    moving: &Image2D,
    fixed: &Image2D,
    search: SearchWindow,
) -> Result<RigidTransform2D> {
    register_rigid_with_bins(moving, fixed, search, DEFAULT_MI_BINS)
}

pub fn register_rigid_with_bins(
    moving: &Image2D,
    fixed: &Image2D,
    search: SearchWindow,
    bins: usize,
) -> Result<RigidTransform2D> {
    if !moving.same_dims(fixed) {
        return Err(Error::dims("moving and fixed images differ in size"));
    }
    if !(search.max_translation >= 0.0 && search.max_rotation >= 0.0) {
        return Err(Error::invalid("empty search window"));
    }
    if bins < 2 {
        return Err(Error::invalid("mutual information needs at least 2 bins"));
    }
    let (w, h) = (fixed.width, fixed.height);
    let levels: Vec<(usize, f64)> = [(4usize, 1.0f64), (2, 0.5), (1, 0.25)]
        .into_iter()
        .filter(|&(d, _)| d == 1 || (w / d >= 16 && h / d >= 16))
        .collect();

    let mut best: Option<Candidate> = None;
    let mut prev_step = (0.0, 0.0);
    for &(d, rot_step) in &levels {
        let t_step = d as f64;
        let (tx_c, ty_c, th_c, t_reach, r_reach) = match best {
            None => {
                let t_reach = (search.max_translation / t_step).floor() as i64;
                let r_reach = (search.max_rotation / rot_step).floor() as i64;
                (0.0, 0.0, 0.0, t_reach, r_reach)
            }
            Some(b) => {
                let t_reach = (prev_step.0 / t_step).ceil() as i64;
                let r_reach = (2.0 * prev_step.1 / rot_step).ceil() as i64;
                (b.tx, b.ty, b.theta, t_reach, r_reach)
            }
        };
        let txs = grid(tx_c, t_step, t_reach, search.max_translation);
        let tys = grid(ty_c, t_step, t_reach, search.max_translation);
        let ths = grid(th_c, rot_step, r_reach, search.max_rotation);
        let mut cands = Vec::with_capacity(txs.len() * tys.len() * ths.len());
        for &tx in &txs {
            for &ty in &tys {
                for &theta in &ths {
                    cands.push(Candidate { tx, ty, theta });
                }
            }
        }
        let fixed_d = decimate(fixed, d);
        let moving_d = decimate(moving, d);
        let center = image_center(fixed_d.width, fixed_d.height);
        let scores: Vec<f64> = cands
            .par_iter()
            .map(|c| {
                let t = RigidTransform2D {
                    theta: c.theta,
                    tx: c.tx / d as f64,
                    ty: c.ty / d as f64,
                    center,
                };
                let (warped, _) = apply_transform(&moving_d, &t);
                mi_values(&warped.data, &fixed_d.data, bins)
            })
            .collect();
        let mut level_best: Option<(f64, Candidate)> = None;
        for (&score, &c) in scores.iter().zip(&cands) {
            level_best = match level_best {
                None => Some((score, c)),
                Some((bs, bc)) => {
                    if score > bs || (score == bs && c.tie_key() < bc.tie_key()) {
                        Some((score, c))
                    } else {
                        Some((bs, bc))
                    }
                }
            };
        }
        best = level_best.map(|(_, c)| c);
        prev_step = (t_step, rot_step);
    }
    let b = best.expect("search grid always contains the identity");
    Ok(RigidTransform2D::centered(w, h, b.theta, b.tx, b.ty))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entropy(img: &Image2D, bins: usize) -> f64 {
        let (lo, hi) = img.min_max();
        let mut h = vec![0f64; bins];
        for &v in &img.data {
            let i = (((v - lo) as f64 / (hi - lo) as f64 * bins as f64) as usize).min(bins - 1);
            h[i] += 1.0;
        }
        let n = img.data.len() as f64;
        h.iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / n) * (c / n).ln())
            .sum()
    }

    fn texture(w: usize, h: usize) -> Image2D {
        Image2D::from_fn(w, h, |x, y| {
            let (x, y) = (x as f32, y as f32);
            (x * 0.31).sin() * 40.0 + (y * 0.17 + x * 0.05).cos() * 60.0 + 100.0
        })
    }

    #[test]
    fn self_information_is_entropy() {
        let img = texture(40, 30);
        let mi = mutual_information(&img, &img, 16).unwrap();
        assert!((mi - entropy(&img, 16)).abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_zero_mi() {
        let img = texture(20, 20);
        let c = Image2D::filled(20, 20, 3.0);
        assert_eq!(mutual_information(&img, &c, 64).unwrap(), 0.0);
        assert_eq!(mutual_information(&c, &img, 64).unwrap(), 0.0);
    }

    #[test]
    fn mi_rejects_bad_input() {
        let a = Image2D::filled(4, 4, 0.0);
        let b = Image2D::filled(4, 5, 0.0);
        assert!(mutual_information(&a, &b, 8).is_err());
        assert!(mutual_information(&a, &a, 1).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = texture(17, 13);
        let (out, valid) = apply_transform(&img, &RigidTransform2D::centered(17, 13, 0.0, 0.0, 0.0));
        assert_eq!(out, img);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn unit_translation_shifts_ramp() {
        let ramp = Image2D::from_fn(8, 4, |x, _| x as f32);
        let (out, valid) = apply_transform(&ramp, &RigidTransform2D::centered(8, 4, 0.0, 1.0, 0.0));
        for y in 0..4 {
            assert!(!valid[y * 8]);
            assert_eq!(out.get(0, y), 0.0);
            for x in 1..8 {
                assert!(valid[y * 8 + x]);
                assert!((out.get(x, y) - (x as f32 - 1.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn half_turn_of_centered_disk() {
        let n = 31;
        let c = 15.0;
        let disk = Image2D::from_fn(n, n, |x, y| {
            let r = ((x as f32 - c).powi(2) + (y as f32 - c).powi(2)).sqrt();
            if r <= 9.0 {
                1.0
            } else {
                0.0
            }
        });
        let (out, valid) = apply_transform(&disk, &RigidTransform2D::centered(n, n, 180.0, 0.0, 0.0));
        assert!(valid.iter().all(|&v| v));
        for (a, b) in out.data.iter().zip(&disk.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = RigidTransform2D::centered(64, 48, 1.7, 3.25, -2.5);
        let (x, y) = t.forward(10.0, 20.0);
        let (bx, by) = t.inverse().forward(x, y);
        assert!((bx - 10.0).abs() < 1e-12 && (by - 20.0).abs() < 1e-12);
    }

    #[test]
    fn empty_window_rejected() {
        let img = texture(32, 32);
        let bad = SearchWindow {
            max_translation: -1.0,
            max_rotation: 1.0,
        };
        assert!(register_rigid(&img, &img, bad).is_err());
    }

    #[test]
    fn self_registration_is_identity() {
        let img = texture(96, 80);
        let t = register_rigid(&img, &img, SearchWindow::default()).unwrap();
        assert_eq!((t.theta, t.tx, t.ty), (0.0, 0.0, 0.0));
    }
}
