//! 2D connected components, the five-case matching taxonomy, and area
//! distribution distances.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_AREA: usize = 16;
pub const DEFAULT_AREA_BIN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(0, -1), (-1, 0), (1, 0), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (0, -1),
                (1, -1),
                (-1, 0),
                (1, 0),
                (-1, 1),
                (0, 1),
                (1, 1),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    pub area: usize,
    /// Inclusive `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
    /// Start of this component's pixels in [`LabelMap::pixels`].
    pub offset: usize,
}

/// Labels with 0 as background and dense ids `1..=K` in raster order of
/// each component's first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
    /// Pixel indices grouped by component.
    pub pixels: Vec<usize>,
}

impl LabelMap {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn component_pixels(&self, id: u32) -> &[usize] {
        let c = &self.components[id as usize - 1];
        &self.pixels[c.offset..c.offset + c.area]
    }

    pub fn areas(&self) -> Vec<usize> {
        self.components.iter().map(|c| c.area).collect()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    fn from_groups(width: usize, height: usize, groups: Vec<Vec<usize>>) -> LabelMap {
        let mut labels = vec![0u32; width * height];
        let mut components = Vec::with_capacity(groups.len());
        let mut pixels = Vec::with_capacity(groups.iter().map(Vec::len).sum());
        for (k, g) in groups.into_iter().enumerate() {
            let id = k as u32 + 1;
            let mut bbox = [usize::MAX, usize::MAX, 0, 0];
            for &p in &g {
                labels[p] = id;
                let (x, y) = (p % width, p / width);
                bbox[0] = bbox[0].min(x);
                bbox[1] = bbox[1].min(y);
                bbox[2] = bbox[2].max(x);
                bbox[3] = bbox[3].max(y);
            }
            components.push(Component { id, area: g.len(), bbox, offset: pixels.len() });
            pixels.extend(g);
        }
        LabelMap { width, height, labels, components, pixels }
    }
}

pub fn label_components(
    binary: &[bool],
    width: usize,
    height: usize,
    connectivity: Connectivity,
) -> Result<LabelMap> {
    if binary.len() != width * height {
        return Err(Error::dims(format!(
            "{} pixels for a {width}x{height} image",
            binary.len()
        )));
    }
    let offsets = connectivity.offsets();
    let mut seen = vec![false; binary.len()];
    let mut groups = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..binary.len() {
        if !binary[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut group = Vec::new();
        while let Some(p) = queue.pop_front() {
            group.push(p);
            let (x, y) = ((p % width) as isize, (p / width) as isize);
            for &(dx, dy) in offsets {
                let (xx, yy) = (x + dx, y + dy);
                if xx < 0 || yy < 0 || xx >= width as isize || yy >= height as isize {
                    continue;
                }
                let q = xx as usize + width * yy as usize;
                if binary[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        group.sort_unstable();
        groups.push(group);
    }
    Ok(LabelMap::from_groups(width, height, groups))
}

/// Drops components smaller than `min_area` and renumbers the rest.
pub fn filter_small(lm: &LabelMap, min_area: usize) -> LabelMap {
    let groups = lm
        .components
        .iter()
        .filter(|c| c.area >= min_area)
        .map(|c| lm.pixels[c.offset..c.offset + c.area].to_vec())
        .collect();
    LabelMap::from_groups(lm.width, lm.height, groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtCase {
    Missing,
    Matching,
    Split,
    /// Overlaps exactly one generated component, which is itself merged.
    MergeParticipant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenCase {
    FalsePositive,
    Matching,
    Merged,
    /// Overlaps exactly one GT component, which is itself split.
    SplitParticipant,
}

/// Outcome of matching generated components against GT components.
///
/// Each GT component falls in exactly one [`GtCase`] and each generated
/// component in exactly one [`GenCase`], so
/// `gt_count = missing + matching + split + merge_participants` and
/// `gen_count = false_positives + matching + merged + split_participants`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcTaxonomy {
    pub matching: usize,
    pub missing: usize,
    pub false_positives: usize,
    pub merged: usize,
    pub split: usize,
    pub merge_participants: usize,
    pub split_participants: usize,
    pub gt_count: usize,
    pub gen_count: usize,
    /// Indexed by GT id - 1.
    pub gt_cases: Vec<GtCase>,
    /// Indexed by generated id - 1.
    pub gen_cases: Vec<GenCase>,
}

impl CcTaxonomy {
    fn pct(&self, n: usize) -> Option<f64> {
        (self.gt_count > 0).then(|| 100.0 * n as f64 / self.gt_count as f64)
    }

    /// Percent of GT components; `None` when the GT has no components.
    pub fn matching_pct(&self) -> Option<f64> {
        self.pct(self.matching)
    }

    pub fn missing_pct(&self) -> Option<f64> {
        self.pct(self.missing)
    }

    pub fn merged_pct(&self) -> Option<f64> {
        self.pct(self.merged)
    }

    pub fn split_pct(&self) -> Option<f64> {
        self.pct(self.split)
    }
}

/// Sorted, deduplicated (gen id, gt id) pairs sharing at least one pixel.
pub fn overlap_pairs(gen: &LabelMap, gt: &LabelMap) -> Result<Vec<(u32, u32)>> {
    if gen.width != gt.width || gen.height != gt.height {
        return Err(Error::dims(format!(
            "generated {}x{} vs GT {}x{}",
            gen.width, gen.height, gt.width, gt.height
        )));
    }
    let mut pairs: Vec<(u32, u32)> = gen
        .labels
        .iter()
        .zip(&gt.labels)
        .filter(|(&g, &t)| g != 0 && t != 0)
        .map(|(&g, &t)| (g, t))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    Ok(pairs)
}

pub fn classify_components(gen: &LabelMap, gt: &LabelMap) -> Result<CcTaxonomy> {
    let pairs = overlap_pairs(gen, gt)?;
    let (ng, nt) = (gen.len(), gt.len());
    let mut gen_deg = vec![0usize; ng];
    let mut gt_deg = vec![0usize; nt];
    // the single partner, meaningful only when the degree is 1
    let mut gen_partner = vec![0usize; ng];
    let mut gt_partner = vec![0usize; nt];
    for &(g, t) in &pairs {
        let (g, t) = (g as usize - 1, t as usize - 1);
        gen_deg[g] += 1;
        gt_deg[t] += 1;
        gen_partner[g] = t;
        gt_partner[t] = g;
    }
    let gt_cases: Vec<GtCase> = (0..nt)
        .map(|t| match gt_deg[t] {
            0 => GtCase::Missing,
            1 if gen_deg[gt_partner[t]] == 1 => GtCase::Matching,
            1 => GtCase::MergeParticipant,
            _ => GtCase::Split,
        })
        .collect();
    let gen_cases: Vec<GenCase> = (0..ng)
        .map(|g| match gen_deg[g] {
            0 => GenCase::FalsePositive,
            1 if gt_deg[gen_partner[g]] == 1 => GenCase::Matching,
            1 => GenCase::SplitParticipant,
            _ => GenCase::Merged,
        })
        .collect();
    let count_gt = |c: GtCase| gt_cases.iter().filter(|&&x| x == c).count();
    let count_gen = |c: GenCase| gen_cases.iter().filter(|&&x| x == c).count();
    Ok(CcTaxonomy {
        matching: count_gt(GtCase::Matching),
        missing: count_gt(GtCase::Missing),
        false_positives: count_gen(GenCase::FalsePositive),
        merged: count_gen(GenCase::Merged),
        split: count_gt(GtCase::Split),
        merge_participants: count_gt(GtCase::MergeParticipant),
        split_participants: count_gen(GenCase::SplitParticipant),
        gt_count: nt,
        gen_count: ng,
        gt_cases,
        gen_cases,
    })
}

/// Component-area histogram with half-open bins `[k*w, (k+1)*w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaHistogram {
    pub bin_width: usize,
    pub counts: Vec<u64>,
    /// `counts` divided by their sum; empty when there are no components.
    pub normalized: Vec<f64>,
}

impl AreaHistogram {
    pub fn from_areas(areas: &[usize], bin_width: usize) -> Result<Self> {
        if bin_width == 0 {
            return Err(Error::invalid("bin width must be positive"));
        }
        let nbins = areas.iter().map(|&a| a / bin_width + 1).max().unwrap_or(0);
        let mut counts = vec![0u64; nbins];
        for &a in areas {
            counts[a / bin_width] += 1;
        }
        let total = areas.len() as f64;
        let normalized = counts.iter().map(|&c| c as f64 / total).collect();
        Ok(AreaHistogram { bin_width, counts, normalized })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn area_histogram(lm: &LabelMap, bin_width: usize) -> Result<AreaHistogram> {
    AreaHistogram::from_areas(&lm.areas(), bin_width)
}

/// W1 between two histograms as the L1 distance of their CDFs times the bin width.
pub fn wasserstein_1d(h1: &AreaHistogram, h2: &AreaHistogram) -> Result<f64> {
    if h1.bin_width != h2.bin_width {
        return Err(Error::invalid("histograms use different bin widths"));
    }
    if h1.total() == 0 || h2.total() == 0 {
        return Err(Error::invalid("Wasserstein distance of an empty histogram"));
    }
    Ok(cdf_l1(&h1.counts, &h2.counts) * h1.bin_width as f64)
}

/// `sum_k |CDF_a(k) - CDF_b(k)|` of two non-negative mass vectors, each normalized.
pub(crate) fn cdf_l1(a: &[u64], b: &[u64]) -> f64 {
    let (ta, tb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let n = a.len().max(b.len());
    let (mut ca, mut cb, mut acc) = (0u64, 0u64, 0.0);
    for k in 0..n {
        ca += a.get(k).copied().unwrap_or(0);
        cb += b.get(k).copied().unwrap_or(0);
        acc += (ca as f64 / ta - cb as f64 / tb).abs();
    }
    acc
}

/// Per-image comparison as reported by `cc-compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcComparison {
    pub taxonomy: CcTaxonomy,
    /// `None` when either side has no components.
    pub wd_area: Option<f64>,
}

/// Labels both images with 8-connectivity, removes small components, then
/// classifies and compares area distributions.
pub fn compare_binary(
    gen: &[bool],
    gt: &[bool],
    width: usize,
    height: usize,
    min_area: usize,
    bin_width: usize,
) -> Result<CcComparison> {
    let g = filter_small(&label_components(gen, width, height, Connectivity::Eight)?, min_area);
    let t = filter_small(&label_components(gt, width, height, Connectivity::Eight)?, min_area);
    let taxonomy = classify_components(&g, &t)?;
    let hg = area_histogram(&g, bin_width)?;
    let ht = area_histogram(&t, bin_width)?;
    let wd_area = wasserstein_1d(&hg, &ht).ok();
    Ok(CcComparison { taxonomy, wd_area })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(rows: &[&str]) -> (Vec<bool>, usize, usize) {
        let w = rows[0].len();
        let bits = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
        (bits, w, rows.len())
    }

    fn lm(rows: &[&str]) -> LabelMap {
        let (b, w, h) = img(rows);
        label_components(&b, w, h, Connectivity::Eight).unwrap()
    }

    #[test]
    fn empty_and_full() {
        assert!(lm(&["...", "..."]).is_empty());
        let full = lm(&["###", "###"]);
        assert_eq!(full.len(), 1);
        assert_eq!(full.components[0].area, 6);
        assert_eq!(full.components[0].bbox, [0, 0, 2, 1]);
    }

    #[test]
    fn diagonal_connectivity() {
        let (b, w, h) = img(&["#.", ".#"]);
        assert_eq!(label_components(&b, w, h, Connectivity::Eight).unwrap().len(), 1);
        assert_eq!(label_components(&b, w, h, Connectivity::Four).unwrap().len(), 2);
    }

    #[test]
    fn raster_order_ids() {
        let m = lm(&["..#", "#..", "#.#"]);
        assert_eq!(m.labels, vec![0, 0, 1, 2, 0, 0, 2, 0, 3]);
        assert_eq!(m.component_pixels(2), &[3, 6]);
    }

    #[test]
    fn filter_small_rule() {
        let mut rows = vec!["...................."; 6];
        rows[1] = ".###############....";
        assert_eq!(filter_small(&lm(&rows), 16).len(), 0);
        assert_eq!(filter_small(&lm(&rows), 15).len(), 1);
        let m = lm(&["#.#", "...", "#.."]);
        assert_eq!(filter_small(&m, 0), m);
    }

    #[test]
    fn merge_case() {
        let gt = lm(&["#.#"]);
        let gen = lm(&["###"]);
        let t = classify_components(&gen, &gt).unwrap();
        assert_eq!((t.merged, t.split, t.matching, t.missing, t.false_positives), (1, 0, 0, 0, 0));
        assert_eq!(t.merge_participants, 2);
    }

    #[test]
    fn split_and_false_positive() {
        let gt = lm(&["###..."]);
        let gen = lm(&["#.#..#"]);
        let t = classify_components(&gen, &gt).unwrap();
        assert_eq!((t.split, t.false_positives, t.matching, t.merged, t.missing), (1, 1, 0, 0, 0));
        assert_eq!(t.split_participants, 2);
    }

    #[test]
    fn identity_is_all_matching() {
        let m = lm(&["#..#", "....", "##.#"]);
        let t = classify_components(&m, &m).unwrap();
        assert_eq!(t.matching, 4);
        assert_eq!(t.matching_pct(), Some(100.0));
        assert_eq!(t.missing_pct(), Some(0.0));
    }

    #[test]
    fn dims_checked() {
        assert!(classify_components(&lm(&["#."]), &lm(&["#"])).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = AreaHistogram::from_areas(&[50, 150, 150], 100).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(AreaHistogram::from_areas(&[99], 100).unwrap().counts, vec![1]);
        assert_eq!(AreaHistogram::from_areas(&[100], 100).unwrap().counts, vec![0, 1]);
        assert!(AreaHistogram::from_areas(&[], 100).unwrap().counts.is_empty());
    }

    #[test]
    fn wasserstein_point_masses() {
        let a = AreaHistogram::from_areas(&[10], 100).unwrap();
        let b = AreaHistogram::from_areas(&[310], 100).unwrap();
        assert_eq!(wasserstein_1d(&a, &b).unwrap(), 300.0);
        assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0);
        let empty = AreaHistogram::from_areas(&[], 100).unwrap();
        assert!(wasserstein_1d(&a, &empty).is_err());
    }
}
