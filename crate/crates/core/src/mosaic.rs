//! Sliding-window patch decomposition, overlap-averaged restitching, and
//! per-patch background homogenization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Image2D;

/// Fraction of the darkest pixels of a patch treated as its background.
pub const BACKGROUND_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    /// Top-left corners, row-major.
    pub origins: Vec<(usize, usize)>,
    pub source_dims: (usize, usize),
}

/// A square patch; stored in f64 so that constant offsets can be applied
/// without disturbing pixel differences.
pub type Patch = Vec<f64>;

fn axis_origins(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + size < len {
        out.push(o);
        o += stride;
    }
    out.push(len - size);
    out.dedup();
    out
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_size: usize, overlap: f64) -> Result<Self> {
        if patch_size == 0 || patch_size > width || patch_size > height {
            return Err(Error::invalid(format!(
                "patch size {patch_size} does not fit in {width}x{height}"
            )));
        }
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::invalid(format!("overlap {overlap} outside [0, 1)")));
        }
        let stride = (patch_size as f64 * (1.0 - overlap)).round() as usize;
        if stride == 0 {
            return Err(Error::invalid("overlap leaves a zero stride"));
        }
        let xs = axis_origins(width, patch_size, stride);
        let ys = axis_origins(height, patch_size, stride);
        let origins = ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
            .collect();
        Ok(PatchGrid {
            patch_size,
            stride,
            origins,
            source_dims: (width, height),
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

pub fn extract_patches(
    img: &Image2D,
    patch_size: usize,
    overlap: f64,
) -> Result<(PatchGrid, Vec<Patch>)> {
    let grid = PatchGrid::new(img.width, img.height, patch_size, overlap)?;
    let patches = grid
        .origins
        .iter()
        .map(|&(ox, oy)| {
            let mut p = Vec::with_capacity(patch_size * patch_size);
            for y in oy..oy + patch_size {
                let row = &img.data[y * img.width + ox..y * img.width + ox + patch_size];
                p.extend(row.iter().map(|&v| v as f64));
            }
            p
        })
        .collect();
    Ok((grid, patches))
}

/// Reassembles patches, averaging every pixel over the patches covering it.
pub fn stitch(grid: &PatchGrid, patches: &[Patch]) -> Result<Image2D> {
    if patches.len() != grid.origins.len() {
        return Err(Error::dims(format!(
            "{} patches for a grid of {}",
            patches.len(),
            grid.origins.len()
        )));
    }
    let ps = grid.patch_size;
    if let Some(i) = patches.iter().position(|p| p.len() != ps * ps) {
        return Err(Error::dims(format!("patch {i} is not {ps}x{ps}")));
    }
    let (w, h) = grid.source_dims;
    let mut sum = vec![0f64; w * h];
    let mut count = vec![0u32; w * h];
    for (&(ox, oy), p) in grid.origins.iter().zip(patches) {
        for py in 0..ps {
            let row = (oy + py) * w + ox;
            for px in 0..ps {
                sum[row + px] += p[py * ps + px];
                count[row + px] += 1;
            }
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect();
    Image2D::new(w, h, data)
}

/// Which per-patch reference is pulled down to the mosaic baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HomogenizeMode {
    /// Offset = background average minus baseline.
    #[default]
    BackgroundMean,
    /// Offset = patch minimum minus baseline.
    PatchMinimum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizeLog {
    pub mode: HomogenizeMode,
    pub baseline: f64,
    pub backgrounds: Vec<f64>,
    pub offsets: Vec<f64>,
}

/// Mean of the lowest `max(1, floor(0.1 N))` pixels.
pub fn background_level(patch: &[f64]) -> f64 {
    let mut sorted = patch.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = ((BACKGROUND_FRACTION * sorted.len() as f64).floor() as usize).max(1);
    sorted[..n].iter().sum::<f64>() / n as f64
}

/// Exponent `e` such that `v` is an integer multiple of `2^e`.
fn granularity_exp(v: f64) -> Option<i32> {
    if v == 0.0 || !v.is_finite() {
        return None;
    }
    let bits = v.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, e0) = if exp_field == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_field - 1075)
    };
    Some(e0 + mant.trailing_zeros() as i32)
}

fn top_exp(v: f64) -> i32 {
    v.abs().log2().floor() as i32
}

/// Rounds `offset` onto the finest dyadic grid on which subtracting it is
/// still exact for every pixel. Falls back to the raw offset when the span
/// of magnitudes exceeds the f64 mantissa.
fn exact_offset(patch: &[f64], offset: f64) -> f64 {
    let Some(qp) = patch.iter().filter_map(|&v| granularity_exp(v)).min() else {
        return offset;
    };
    let bound = patch.iter().fold(0f64, |m, &v| m.max(v.abs())) + offset.abs();
    if bound == 0.0 || !bound.is_finite() {
        return offset;
    }
    let qo = top_exp(bound) + 2 - 53;
    let quantum = 2f64.powi(qo);
    let steps = (offset / quantum).round();
    if !steps.is_finite() || quantum == 0.0 {
        return offset;
    }
    let q = qp.min(qo);
    let snapped = steps * quantum;
    let peak = patch
        .iter()
        .map(|&v| v.abs().max((v - snapped).abs()))
        .fold(0f64, f64::max);
    if peak == 0.0 || top_exp(peak) + 1 - q <= 53 {
        snapped
    } else {
        log::warn!("patch dynamic range too wide for an exact offset; differences may round");
        offset
    }
}

/// Shifts every patch whose background is above the darkest patch
/// background by a single constant, leaving within-patch contrast intact.
pub fn homogenize_background(
    patches: &[Patch],
    mode: HomogenizeMode,
) -> Result<(Vec<Patch>, HomogenizeLog)> {
    if patches.is_empty() || patches.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid("homogenization needs non-empty patches"));
    }
    let backgrounds: Vec<f64> = patches.par_iter().map(|p| background_level(p)).collect();
    let baseline = backgrounds.iter().copied().fold(f64::INFINITY, f64::min);
    let (out, offsets): (Vec<Patch>, Vec<f64>) = patches
        .par_iter()
        .zip(&backgrounds)
        .map(|(p, &b)| {
            if b <= baseline {
                return (p.clone(), 0.0);
            }
            let raw = match mode {
                HomogenizeMode::BackgroundMean => b - baseline,
                HomogenizeMode::PatchMinimum => {
                    p.iter().copied().fold(f64::INFINITY, f64::min) - baseline
                }
            };
            let offset = exact_offset(p, raw);
            (p.iter().map(|&v| v - offset).collect(), offset)
        })
        .unzip();
    Ok((
        out,
        HomogenizeLog {
            mode,
            baseline,
            backgrounds,
            offsets,
        },
    ))
}
