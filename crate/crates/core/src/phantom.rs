//! Synthetic tubule/branch networks with exact ground-truth graphs,
//! PSF rendering and resolution degradation.
//!
//! Tubules are capsules (cylinders with hemispherical caps) running roughly
//! along X with free ends inside the volume. Branches are thinner straight
//! capsules joining the axes of neighbouring tubules, so each branch adds
//! two degree-3 junctions and splits both tubules it touches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skelgraph::GraphMetrics;
use crate::vesselness::{gaussian_blur_axes, FWHM_TO_SIGMA};
use crate::volume::{upsample_nn, BinaryVolume, Image2D, ImageStack, HR_SPACING_NM};

pub const TUBULE_RADIUS_UM: (f64, f64) = (0.5, 1.5);
pub const BRANCH_RADIUS_UM: (f64, f64) = (0.15, 0.35);
/// Lateral and axial PSF FWHM in nanometres.
pub const DEFAULT_PSF_NM: [f64; 2] = [200.0, 600.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_tubules: usize,
    pub n_branches: usize,
    pub tubule_radius_um: (f64, f64),
    pub branch_radius_um: (f64, f64),
    /// Largest lateral drift of a tubule between its two ends.
    pub tilt_um: f64,
    pub tubule_intensity: f32,
    pub branch_intensity: f32,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [256, 256, 64],
            spacing: HR_SPACING_NM,
            n_tubules: 4,
            n_branches: 6,
            tubule_radius_um: TUBULE_RADIUS_UM,
            branch_radius_um: BRANCH_RADIUS_UM,
            tilt_um: 1.0,
            tubule_intensity: 180.0,
            branch_intensity: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tubule {
    /// Axis end points in micrometres.
    pub axis: [[f64; 3]; 2],
    pub radius_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Indices of the two tubules joined.
    pub tubules: (usize, usize),
    /// Anchor points on the two tubule axes, micrometres.
    pub axis: [[f64; 3]; 2],
    pub radius_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    pub tubules: Vec<Tubule>,
    pub branches: Vec<Branch>,
    /// Branch anchors, each a degree-3 junction.
    pub junctions: Vec<[f64; 3]>,
    pub tubule_intensity: f32,
    pub branch_intensity: f32,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

/// Squared distance from `p` to segment `ab`.
fn seg_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let l2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if l2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = lerp(a, b, t);
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
}

/// Smallest distance between two segments, by dense sampling of the first.
fn seg_seg_dist(a: [[f64; 3]; 2], b: [[f64; 3]; 2]) -> f64 {
    (0..=200)
        .map(|i| seg_dist2(lerp(a[0], a[1], i as f64 / 200.0), b[0], b[1]))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

impl PhantomSpec {
    /// Anchor positions along each tubule as axis parameters in `[0, 1]`, sorted.
    pub fn anchor_params(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.tubules.len()];
        for b in &self.branches {
            for (end, &k) in [b.tubules.0, b.tubules.1].iter().enumerate() {
                let t = &self.tubules[k];
                let len = dist(t.axis[0], t.axis[1]);
                out[k].push(dist(t.axis[0], b.axis[end]) / len);
            }
        }
        for v in &mut out {
            v.sort_by(f64::total_cmp);
        }
        out
    }

    /// Segment lengths (um) of the ground-truth graph: tubule pieces between
    /// consecutive anchors, then one entry per branch.
    pub fn segment_lengths(&self) -> (Vec<f64>, Vec<f64>) {
        let mut tubule = Vec::new();
        for (t, anchors) in self.tubules.iter().zip(self.anchor_params()) {
            let len = dist(t.axis[0], t.axis[1]);
            let mut prev = 0.0;
            for a in anchors.into_iter().chain([1.0]) {
                tubule.push((a - prev) * len);
                prev = a;
            }
        }
        let branch = self.branches.iter().map(|b| dist(b.axis[0], b.axis[1])).collect();
        (tubule, branch)
    }

    /// Graph metrics of the network by construction.
    pub fn ground_truth(&self) -> GraphMetrics {
        let (tubule, branch) = self.segment_lengths();
        let lt: f64 = tubule.iter().sum();
        let lb: f64 = branch.iter().sum();
        GraphMetrics {
            n_edges_all: tubule.len() + branch.len(),
            n_edges_tubule: tubule.len(),
            n_edges_branch: branch.len(),
            n_edges_unclassified: 0,
            n_nodes_degree_1: 2 * self.tubules.len(),
            n_nodes_degree_3: self.junctions.len(),
            n_nodes_degree_4: 0,
            n_nodes_degree_5: 0,
            n_nodes_degree_other: 0,
            total_length_all: lt + lb,
            total_length_tubule: lt,
            total_length_branch: lb,
        }
    }
}

fn check_range(name: &str, r: (f64, f64), allowed: (f64, f64)) -> Result<()> {
    if !(r.0 > 0.0 && r.0 <= r.1 && r.0 >= allowed.0 - 1e-12 && r.1 <= allowed.1 + 1e-12) {
        return Err(Error::invalid(format!(
            "{name} radius range {r:?} must lie within {allowed:?} um"
        )));
    }
    Ok(())
}

/// Deterministic network for `seed`; errors when the requested counts do not
/// fit the volume with the required clearances.
pub fn generate_network(params: &PhantomParams, seed: u64) -> Result<PhantomSpec> {
    check_range("tubule", params.tubule_radius_um, TUBULE_RADIUS_UM)?;
    check_range("branch", params.branch_radius_um, BRANCH_RADIUS_UM)?;
    if params.n_tubules == 0 {
        return Err(Error::invalid("at least one tubule is required"));
    }
    if params.n_branches > 0 && params.n_tubules < 2 {
        return Err(Error::Infeasible("branches need at least two tubules".into()));
    }
    let ext: Vec<f64> = (0..3)
        .map(|k| (params.dims[k].max(1) - 1) as f64 * params.spacing[k] / 1000.0)
        .collect();
    let (lx, ly, lz) = (ext[0], ext[1], ext[2]);
    let voxel = params.spacing.iter().copied().fold(0.0, f64::max) / 1000.0;
    let rmax = params.tubule_radius_um.1;
    let clearance = 2.0 * params.branch_radius_um.1 + 2.0 * voxel;
    let lane = ly / params.n_tubules as f64;
    if lane < 2.0 * rmax + clearance + params.tilt_um {
        return Err(Error::Infeasible(format!(
            "{} tubules of radius up to {rmax} um do not fit in {ly:.2} um",
            params.n_tubules
        )));
    }
    if lz < 2.0 * (rmax + voxel) {
        return Err(Error::Infeasible(format!(
            "depth {lz:.2} um is too small for tubule radius {rmax} um"
        )));
    }
    let end_gap = rmax + 2.0;
    if lx < 2.0 * (rmax + voxel) + 2.0 * end_gap {
        return Err(Error::Infeasible(format!("length {lx:.2} um is too short")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tubules = Vec::with_capacity(params.n_tubules);
    for k in 0..params.n_tubules {
        let r = rng.gen_range(params.tubule_radius_um.0..=params.tubule_radius_um.1);
        let slack = (lane - 2.0 * rmax - clearance - params.tilt_um) / 2.0;
        let y0 = (k as f64 + 0.5) * lane + rng.gen_range(-slack..=slack) - params.tilt_um / 2.0;
        let y1 = y0 + rng.gen_range(0.0..=params.tilt_um);
        let zs = (lz / 2.0 - r - voxel).max(0.0).min(params.tilt_um);
        let z0 = lz / 2.0 + rng.gen_range(-zs..=zs) / 2.0;
        let z1 = lz / 2.0 + rng.gen_range(-zs..=zs) / 2.0;
        let m = r + voxel;
        let x0 = m + rng.gen_range(0.0..=0.05 * lx);
        let x1 = lx - m - rng.gen_range(0.0..=0.05 * lx);
        tubules.push(Tubule { axis: [[x0, y0, z0], [x1, y1, z1]], radius_um: r });
    }
    for k in 1..tubules.len() {
        let d = seg_seg_dist(tubules[k - 1].axis, tubules[k].axis);
        if d < tubules[k - 1].radius_um + tubules[k].radius_um + clearance {
            return Err(Error::Infeasible(format!("tubules {} and {k} overlap", k - 1)));
        }
    }

    let point_at_x = |t: &Tubule, x: f64| -> [f64; 3] {
        let s = (x - t.axis[0][0]) / (t.axis[1][0] - t.axis[0][0]);
        lerp(t.axis[0], t.axis[1], s)
    };
    let mut anchors_x: Vec<Vec<f64>> = vec![Vec::new(); tubules.len()];
    let mut branches: Vec<Branch> = Vec::with_capacity(params.n_branches);
    for i in 0..params.n_branches {
        let mut placed = false;
        for _ in 0..2000 {
            let k = rng.gen_range(0..tubules.len() - 1);
            let (ta, tb) = (&tubules[k], &tubules[k + 1]);
            let lo = ta.axis[0][0].max(tb.axis[0][0]) + end_gap;
            let hi = ta.axis[1][0].min(tb.axis[1][0]) - end_gap;
            if hi <= lo {
                continue;
            }
            let xa = rng.gen_range(lo..hi);
            let span = (tb.axis[0][1] - ta.axis[0][1]).abs() * 0.4;
            let xb = (xa + rng.gen_range(-span..=span)).clamp(lo, hi);
            let sep = |t: &Tubule| 2.0 * t.radius_um + 2.0;
            let clear = |xs: &[f64], x: f64, t: &Tubule| xs.iter().all(|&o| (o - x).abs() >= sep(t));
            if !clear(&anchors_x[k], xa, ta) || !clear(&anchors_x[k + 1], xb, tb) {
                continue;
            }
            let crosses = branches.iter().any(|b| {
                b.tubules.0 == k && (b.axis[0][0] - xa) * (b.axis[1][0] - xb) <= 0.0
            });
            if crosses {
                continue;
            }
            let r = rng.gen_range(params.branch_radius_um.0..=params.branch_radius_um.1);
            anchors_x[k].push(xa);
            anchors_x[k + 1].push(xb);
            branches.push(Branch {
                tubules: (k, k + 1),
                axis: [point_at_x(ta, xa), point_at_x(tb, xb)],
                radius_um: r,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place branch {} of {} with the required clearances",
                i + 1,
                params.n_branches
            )));
        }
    }
    let junctions = branches.iter().flat_map(|b| b.axis).collect();
    Ok(PhantomSpec {
        dims: params.dims,
        spacing: params.spacing,
        seed,
        tubules,
        branches,
        junctions,
        tubule_intensity: params.tubule_intensity,
        branch_intensity: params.branch_intensity,
    })
}

fn paint_capsule(out: &mut [f32], spec: &PhantomSpec, axis: [[f64; 3]; 2], r: f64, value: f32) {
    let [nx, ny, nz] = spec.dims;
    let um = |k: usize| spec.spacing[k] / 1000.0;
    let range = |k: usize, n: usize| {
        let lo = (axis[0][k].min(axis[1][k]) - r) / um(k);
        let hi = (axis[0][k].max(axis[1][k]) + r) / um(k);
        (lo.floor().max(0.0) as usize, (hi.ceil().max(0.0) as usize).min(n - 1))
    };
    let (x0, x1) = range(0, nx);
    let (y0, y1) = range(1, ny);
    let (z0, z1) = range(2, nz);
    let r2 = r * r;
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = [x as f64 * um(0), y as f64 * um(1), z as f64 * um(2)];
                if seg_dist2(p, axis[0], axis[1]) <= r2 {
                    let i = x + nx * (y + ny * z);
                    out[i] = out[i].max(value);
                }
            }
        }
    }
}

/// Two-level rasterization: tubule intensity inside tubules, branch
/// intensity inside branches, zero elsewhere.
pub fn rasterize(spec: &PhantomSpec) -> ImageStack {
    let n = spec.dims.iter().product();
    let mut v = vec![0f32; n];
    for b in &spec.branches {
        paint_capsule(&mut v, spec, b.axis, b.radius_um, spec.branch_intensity);
    }
    for t in &spec.tubules {
        paint_capsule(&mut v, spec, t.axis, t.radius_um, spec.tubule_intensity);
    }
    ImageStack {
        dims: spec.dims,
        spacing: spec.spacing,
        intensity_range: (0.0, 255.0),
        voxels: v,
    }
}

/// Foreground mask of the noise-free, unblurred render.
pub fn render_binary(spec: &PhantomSpec) -> BinaryVolume {
    let s = rasterize(spec);
    BinaryVolume {
        dims: s.dims,
        spacing: s.spacing,
        bits: s.voxels.iter().map(|&v| v > 0.0).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Lateral and axial PSF FWHM (nm); `None` renders without blur.
    pub psf_fwhm_nm: Option<[f64; 2]>,
    /// Peak signal over noise standard deviation; `None` is noise-free.
    pub snr: Option<f64>,
    pub noise_seed: u64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams { psf_fwhm_nm: Some(DEFAULT_PSF_NM), snr: None, noise_seed: 0 }
    }
}

/// Adds zero-mean noise whose variance grows with the signal, one RNG
/// stream per slice.
fn add_noise(stack: &mut ImageStack, peak: f32, snr: f64, seed: u64) {
    let plane = stack.dims[0] * stack.dims[1];
    let sd = peak as f64 / snr;
    stack.voxels.par_chunks_mut(plane).enumerate().for_each(|(z, slice)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(z as u64 + 1);
        for v in slice {
            let scale = (0.5 + 0.5 * (*v as f64 / peak as f64).max(0.0)).sqrt();
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + n * sd * scale).clamp(0.0, 255.0) as f32;
        }
    });
}

pub fn render(spec: &PhantomSpec, params: &RenderParams) -> Result<ImageStack> {
    let mut s = rasterize(spec);
    if let Some([lat, ax]) = params.psf_fwhm_nm {
        if lat < spec.spacing[0].max(spec.spacing[1]) || (spec.dims[2] > 1 && ax < spec.spacing[2]) {
            return Err(Error::invalid(format!(
                "PSF FWHM ({lat}, {ax}) nm is below the voxel size {:?}",
                spec.spacing
            )));
        }
        let sig = [
            lat / spec.spacing[0] * FWHM_TO_SIGMA,
            lat / spec.spacing[1] * FWHM_TO_SIGMA,
            ax / spec.spacing[2] * FWHM_TO_SIGMA,
        ];
        gaussian_blur_axes(&mut s.voxels, s.dims, sig);
    }
    if let Some(snr) = params.snr {
        if !(snr > 0.0) {
            return Err(Error::invalid(format!("SNR must be positive, got {snr}")));
        }
        if snr.is_finite() {
            add_noise(&mut s, spec.tubule_intensity, snr, params.noise_seed);
        }
    }
    Ok(s)
}

/// Lateral block-average by `factor`, then nearest-neighbour upsampling
/// back to the original grid.
pub fn degrade(stack: &ImageStack, factor: usize) -> Result<ImageStack> {
    degrade_with_noise(stack, factor, None)
}

/// [`degrade`] with optional noise `(snr, seed)` added at the coarse resolution.
pub fn degrade_with_noise(stack: &ImageStack, factor: usize, noise: Option<(f64, u64)>) -> Result<ImageStack> {
    let [nx, ny, nz] = stack.dims;
    if factor == 0 || nx % factor != 0 || ny % factor != 0 {
        return Err(Error::invalid(format!(
            "dims {nx}x{ny} are not divisible by factor {factor}"
        )));
    }
    if factor == 1 && noise.is_none() {
        return Ok(stack.clone());
    }
    let (sw, sh) = (nx / factor, ny / factor);
    let mut coarse = ImageStack::zeros([sw, sh, nz], stack.spacing);
    let norm = (factor * factor) as f64;
    for z in 0..nz {
        for y in 0..sh {
            for x in 0..sw {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += stack.get(x * factor + dx, y * factor + dy, z) as f64;
                    }
                }
                coarse.voxels[x + sw * (y + sh * z)] = (acc / norm) as f32;
            }
        }
    }
    if let Some((snr, seed)) = noise {
        if !(snr > 0.0) {
            return Err(Error::invalid(format!("SNR must be positive, got {snr}")));
        }
        let peak = stack.voxels.iter().copied().fold(0.0f32, f32::max).max(1.0);
        add_noise(&mut coarse, peak, snr, seed);
    }
    let slices = coarse
        .slices()
        .iter()
        .map(|s| upsample_nn(s, nx, ny))
        .collect::<Result<Vec<Image2D>>>()?;
    Ok(ImageStack::from_slices(&slices, stack.spacing)?.with_range(stack.intensity_range))
}
