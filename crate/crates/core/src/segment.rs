//! Binarization of vesselness responses: multi-Otsu threshold search,
//! hysteresis flood fill, and the standard 2D/3D binarization pipeline.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vesselness::{jerman_vesselness_3d, jerman_vesselness_slices, VesselnessParams};
use crate::volume::{resample_z, BinaryVolume, ImageStack};

/// Hysteresis thresholds in vesselness-response units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HysteresisThresholds {
    pub low: f64,
    pub high: f64,
}

impl HysteresisThresholds {
    pub const DEFAULT: HysteresisThresholds = HysteresisThresholds { low: 0.1, high: 0.3 };
    pub const CYCLEGAN: HysteresisThresholds = HysteresisThresholds { low: 0.3, high: 0.5 };

    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low >= 0.0 && low < high) {
            return Err(Error::invalid(format!(
                "hysteresis needs 0 <= low < high, got ({low}, {high})"
            )));
        }
        Ok(HysteresisThresholds { low, high })
    }
}

impl Default for HysteresisThresholds {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Histogram with `bins` equal-width bins over the observed range, plus bin centers.
pub fn histogram(values: &[f32], bins: usize) -> Result<(Vec<u64>, Vec<f64>)> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if values.is_empty() || !(hi > lo) {
        return Err(Error::invalid("multi-Otsu needs non-constant input"));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = (((v as f64 - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let centers = (0..bins).map(|i| lo + (i as f64 + 0.5) * width).collect();
    Ok((counts, centers))
}

/// Multi-Otsu thresholds by exhaustive search over bin boundaries.
///
/// Class `j` spans the bins after threshold `j-1` up to and including
/// threshold `j`; thresholds are reported as bin centers. Among equally
/// good solutions the lexicographically smallest wins.
pub fn multi_otsu(values: &[f32], classes: usize, bins: usize) -> Result<Vec<f64>> {
    if !(2..=4).contains(&classes) {
        return Err(Error::invalid(format!("classes must be 2, 3 or 4, got {classes}")));
    }
    if bins < classes {
        return Err(Error::invalid("fewer bins than classes"));
    }
    let (counts, centers) = histogram(values, bins)?;
    let idx = multi_otsu_indices(&counts, &centers, classes);
    Ok(idx.into_iter().map(|i| centers[i]).collect())
}

/// Threshold bin indices maximizing `sum_j w_j mu_j^2` (equivalent to the
/// between-class variance for a fixed total mean).
pub fn multi_otsu_indices(counts: &[u64], centers: &[f64], classes: usize) -> Vec<usize> {
    let bins = counts.len();
    let mut p = vec![0f64; bins + 1];
    let mut s = vec![0f64; bins + 1];
    for i in 0..bins {
        p[i + 1] = p[i] + counts[i] as f64;
        s[i + 1] = s[i] + counts[i] as f64 * centers[i];
    }
    // class covering bins a..=b
    let term = |a: usize, b: usize| {
        let w = p[b + 1] - p[a];
        if w > 0.0 {
            let m = s[b + 1] - s[a];
            m * m / w
        } else {
            0.0
        }
    };
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = vec![0; classes - 1];
    match classes {
        2 => {
            for t in 0..bins - 1 {
                let v = term(0, t) + term(t + 1, bins - 1);
                if v > best {
                    best = v;
                    best_idx = vec![t];
                }
            }
        }
        3 => {
            for t1 in 0..bins - 2 {
                let a = term(0, t1);
                for t2 in t1 + 1..bins - 1 {
                    let v = a + term(t1 + 1, t2) + term(t2 + 1, bins - 1);
                    if v > best {
                        best = v;
                        best_idx = vec![t1, t2];
                    }
                }
            }
        }
        _ => {
            for t1 in 0..bins - 3 {
                let a = term(0, t1);
                for t2 in t1 + 1..bins - 2 {
                    let b = a + term(t1 + 1, t2);
                    for t3 in t2 + 1..bins - 1 {
                        let v = b + term(t2 + 1, t3) + term(t3 + 1, bins - 1);
                        if v > best {
                            best = v;
                            best_idx = vec![t1, t2, t3];
                        }
                    }
                }
            }
        }
    }
    best_idx
}

fn neighbour_offsets(dims: [usize; 3]) -> Vec<[isize; 3]> {
    let zr: &[isize] = if dims[2] > 1 { &[-1, 0, 1] } else { &[0] };
    let mut out = Vec::new();
    for &dz in zr {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Keeps voxels `>= low` that are connected (26 in 3D, 8 in 2D) to a
/// voxel `>= high`.
pub fn hysteresis(values: &[f32], dims: [usize; 3], t: HysteresisThresholds) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let offsets = neighbour_offsets(dims);
    let mut out = vec![false; values.len()];
    let mut queue = VecDeque::new();
    for (i, &v) in values.iter().enumerate() {
        if v as f64 >= t.high {
            out[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let x = (i % nx) as isize;
        let y = ((i / nx) % ny) as isize;
        let z = (i / (nx * ny)) as isize;
        for o in &offsets {
            let (xx, yy, zz) = (x + o[0], y + o[1], z + o[2]);
            if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                continue;
            }
            let j = xx as usize + nx * (yy as usize + ny * zz as usize);
            if !out[j] && values[j] as f64 >= t.low {
                out[j] = true;
                queue.push_back(j);
            }
        }
    }
    out
}

pub fn hysteresis_volume(stack: &ImageStack, t: HysteresisThresholds) -> BinaryVolume {
    BinaryVolume {
        dims: stack.dims,
        spacing: stack.spacing,
        bits: hysteresis(&stack.voxels, stack.dims, t),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimensionality {
    /// Each slice filtered and thresholded independently (connected-component branch).
    Two,
    /// Isotropic volume after Z resampling (graph branch).
    Three,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ThresholdMode {
    /// Multi-Otsu (3 classes) thresholds of the response, halved.
    Auto,
    Fixed { low: f64, high: f64 },
    /// Higher fixed thresholds for CycleGAN outputs, whose features are enlarged and brightened.
    Cyclegan,
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Fixed {
            low: HysteresisThresholds::DEFAULT.low,
            high: HysteresisThresholds::DEFAULT.high,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinarizeParams {
    pub vesselness: VesselnessParams,
    pub dim: Dimensionality,
    pub thresholds: ThresholdMode,
    /// Z resampling factor applied before 3D analysis.
    pub z_factor: f64,
}

impl Default for BinarizeParams {
    fn default() -> Self {
        BinarizeParams {
            vesselness: VesselnessParams::default(),
            dim: Dimensionality::Three,
            thresholds: ThresholdMode::default(),
            z_factor: 3.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarizeOutput {
    pub volume: BinaryVolume,
    /// One entry per thresholded unit: the volume in 3D, each slice in 2D.
    /// `None` where auto mode found a constant response.
    pub thresholds: Vec<Option<HysteresisThresholds>>,
}

/// Halved 3-class multi-Otsu thresholds of a response, or `None` if it is constant.
pub fn auto_thresholds(response: &[f32]) -> Result<Option<HysteresisThresholds>> {
    match multi_otsu(response, 3, 256) {
        Ok(t) => Ok(Some(HysteresisThresholds::new(t[0] / 2.0, t[1] / 2.0)?)),
        Err(_) => Ok(None),
    }
}

fn resolve(mode: ThresholdMode, response: &[f32]) -> Result<Option<HysteresisThresholds>> {
    match mode {
        ThresholdMode::Auto => auto_thresholds(response),
        ThresholdMode::Fixed { low, high } => HysteresisThresholds::new(low, high).map(Some),
        ThresholdMode::Cyclegan => Ok(Some(HysteresisThresholds::CYCLEGAN)),
    }
}

/// Vesselness followed by hysteresis thresholding. The 3D path resamples Z
/// by `z_factor` first, so the output geometry is that of the resampled stack.
pub fn binarize_pipeline(stack: &ImageStack, params: &BinarizeParams) -> Result<BinarizeOutput> {
    params.vesselness.validate()?;
    match params.dim {
        Dimensionality::Three => {
            let iso = if params.z_factor == 1.0 || stack.dims[2] < 2 {
                stack.clone()
            } else {
                resample_z(stack, params.z_factor)?
            };
            let v = jerman_vesselness_3d(&iso, &params.vesselness)?;
            let t = resolve(params.thresholds, &v.response)?;
            let bits = match t {
                Some(t) => hysteresis(&v.response, iso.dims, t),
                None => vec![false; v.response.len()],
            };
            Ok(BinarizeOutput {
                volume: BinaryVolume::new(iso.dims, iso.spacing, bits)?,
                thresholds: vec![t],
            })
        }
        Dimensionality::Two => {
            let v = jerman_vesselness_slices(stack, &params.vesselness)?;
            let plane = stack.dims[0] * stack.dims[1];
            let slice_dims = [stack.dims[0], stack.dims[1], 1];
            let per_slice: Vec<(Vec<bool>, Option<HysteresisThresholds>)> = v
                .response
                .par_chunks(plane)
                .map(|r| {
                    let t = resolve(params.thresholds, r)?;
                    let bits = match t {
                        Some(t) => hysteresis(r, slice_dims, t),
                        None => vec![false; r.len()],
                    };
                    Ok((bits, t))
                })
                .collect::<Result<_>>()?;
            let mut bits = Vec::with_capacity(stack.len());
            let mut thresholds = Vec::with_capacity(stack.dims[2]);
            for (b, t) in per_slice {
                bits.extend(b);
                thresholds.push(t);
            }
            Ok(BinarizeOutput {
                volume: BinaryVolume::new(stack.dims, stack.spacing, bits)?,
                thresholds,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bimodal_two_class() {
        let mut v = vec![0.0f32; 1000];
        v.extend(vec![200.0f32; 1000]);
        let t = multi_otsu(&v, 2, 256).unwrap();
        assert!(t[0] > 0.0 && t[0] < 200.0);
    }

    #[test]
    fn trimodal_three_class() {
        let mut v = Vec::new();
        for level in [0.0f32, 100.0, 200.0] {
            v.extend(std::iter::repeat(level).take(500));
        }
        let t = multi_otsu(&v, 3, 256).unwrap();
        assert!(t[0] > 0.0 && t[0] < 100.0, "{t:?}");
        assert!(t[1] > 100.0 && t[1] < 200.0, "{t:?}");
    }

    #[test]
    fn shuffle_invariant() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut v: Vec<f32> = (0..3000).map(|_| rng.gen::<f32>().powi(3)).collect();
        let a = multi_otsu(&v, 3, 256).unwrap();
        v.shuffle(&mut rng);
        assert_eq!(a, multi_otsu(&v, 3, 256).unwrap());
    }

    #[test]
    fn constant_input_rejected() {
        assert!(multi_otsu(&[1.0; 10], 3, 256).is_err());
        assert!(multi_otsu(&[1.0, 2.0], 5, 256).is_err());
    }

    #[test]
    fn ridge_flood_fill() {
        let ridge = [0.05f32, 0.2, 0.4, 0.2, 0.05];
        let out = hysteresis(&ridge, [5, 1, 1], HysteresisThresholds::DEFAULT);
        assert_eq!(out, vec![false, true, true, true, false]);
    }

    #[test]
    fn no_seed_no_foreground() {
        let v = vec![0.25f32; 27];
        assert!(hysteresis(&v, [3, 3, 3], HysteresisThresholds::DEFAULT)
            .iter()
            .all(|&b| !b));
    }

    #[test]
    fn only_seeded_component_survives() {
        // two blobs separated by a zero column; only the left one reaches 0.3
        #[rustfmt::skip]
        let v = [
            0.2, 0.35, 0.0, 0.2, 0.2,
            0.2, 0.2,  0.0, 0.2, 0.25,
        ];
        let out = hysteresis(&v, [5, 2, 1], HysteresisThresholds::DEFAULT);
        assert_eq!(
            out,
            vec![true, true, false, false, false, true, true, false, false, false]
        );
    }

    #[test]
    fn diagonal_links_count() {
        // 8-connectivity in 2D joins diagonal neighbours
        #[rustfmt::skip]
        let v = [
            0.5, 0.0, 0.0,
            0.0, 0.2, 0.0,
            0.0, 0.0, 0.2,
        ];
        let out = hysteresis(&v, [3, 3, 1], HysteresisThresholds::DEFAULT);
        assert_eq!(out.iter().filter(|&&b| b).count(), 3);
    }

    #[test]
    fn threshold_validation() {
        assert!(HysteresisThresholds::new(0.3, 0.1).is_err());
        assert!(HysteresisThresholds::new(0.3, 0.3).is_err());
        assert!(HysteresisThresholds::new(-0.1, 0.3).is_err());
    }

    #[test]
    fn zero_stack_is_empty() {
        let s = ImageStack::zeros([24, 24, 4], [100.0, 100.0, 350.0]);
        for dim in [Dimensionality::Two, Dimensionality::Three] {
            for thresholds in [ThresholdMode::Auto, ThresholdMode::default()] {
                let params = BinarizeParams {
                    dim,
                    thresholds,
                    vesselness: VesselnessParams {
                        scales: crate::vesselness::ScaleRange {
                            min_fwhm: 2.0,
                            max_fwhm: 4.0,
                            step: 1.0,
                        },
                        ..Default::default()
                    },
                    ..Default::default()
                };
                let out = binarize_pipeline(&s, &params).unwrap();
                assert_eq!(out.volume.count(), 0);
            }
        }
    }
}
