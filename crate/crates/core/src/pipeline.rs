//! End-to-end assessment: registration, optional background homogenization,
//! image quality metrics, 2D component matching, 3D graph ratios and rank
//! statistics, written as a CSV/JSON report bundle with a manifest.
//!
//! Stages run one after another; inside a stage every (region, model) unit
//! runs in parallel. Expensive stage outputs are cached on disk under a
//! SHA-256 key of their inputs and parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cc::{classify_components, filter_small, label_components, AreaHistogram, Connectivity};
use crate::error::{Error, Result};
use crate::iqa::{stack_score, Metric};
use crate::mosaic::{extract_patches, homogenize_background, stitch, HomogenizeMode};
use crate::register::{apply_transform, register_rigid_with_bins, RigidTransform2D, SearchWindow, DEFAULT_MI_BINS};
use crate::segment::{binarize_pipeline, BinarizeParams, Dimensionality, ThresholdMode};
use crate::skelgraph::{analyze, metric_ratios, GraphMetrics, GraphParams, DEFAULT_TUBULE_MIN_DIAMETER_UM};
use crate::stats::{analyze_rows, mean_ci, render_table, GroupResult, Significance, ScoreRow};
use crate::vesselness::VesselnessParams;
use crate::volume::{load_stack, stack_exists, upsample_nn, BinaryVolume, Image2D, ImageStack};

pub const SCHEMA_VERSION: u32 = 1;

pub const SCORES_CSV: &str = "scores.csv";
pub const REPORT_JSON: &str = "report.json";
pub const STATS_TXT: &str = "stats.txt";
pub const MANIFEST_JSON: &str = "manifest.json";
/// Wall-clock stage times. Not part of the deterministic bundle.
pub const TIMINGS_JSON: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedInput {
    pub model: String,
    pub resolution: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionInput {
    pub name: String,
    pub gt: PathBuf,
    pub generated: Vec<GeneratedInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    pub enabled: bool,
    pub search: SearchWindow,
    pub bins: usize,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        RegisterConfig {
            enabled: true,
            search: SearchWindow::default(),
            bins: DEFAULT_MI_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizeConfig {
    pub enabled: bool,
    pub patch_size: usize,
    pub overlap: f64,
    pub mode: HomogenizeMode,
    /// Models to correct; empty means every generated stack.
    pub models: Vec<String>,
}

impl Default for HomogenizeConfig {
    fn default() -> Self {
        HomogenizeConfig {
            enabled: false,
            patch_size: 128,
            overlap: 0.25,
            mode: HomogenizeMode::default(),
            models: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcConfig {
    pub min_area: usize,
    pub area_bin: usize,
}

impl Default for CcConfig {
    fn default() -> Self {
        CcConfig { min_area: 16, area_bin: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub prune_length: f64,
    pub prune_radius_factor: f64,
    pub smoothing_window: usize,
    pub tubule_min_diameter_um: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let p = GraphParams::default();
        GraphConfig {
            prune_length: p.prune_length,
            prune_radius_factor: p.prune_radius_factor,
            smoothing_window: p.smoothing_window,
            tubule_min_diameter_um: DEFAULT_TUBULE_MIN_DIAMETER_UM,
        }
    }
}

impl GraphConfig {
    pub fn params(&self) -> GraphParams {
        GraphParams {
            prune_length: self.prune_length,
            prune_radius_factor: self.prune_radius_factor,
            smoothing_window: self.smoothing_window,
        }
    }
}

fn default_z_factor() -> f64 {
    3.5
}

fn default_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub regions: Vec<RegionInput>,
    #[serde(default)]
    pub register: RegisterConfig,
    #[serde(default)]
    pub homogenize: HomogenizeConfig,
    #[serde(default)]
    pub vesselness: VesselnessParams,
    /// Used for ground truth and for every model without an override.
    #[serde(default)]
    pub thresholds: ThresholdMode,
    /// Per-model threshold mode, e.g. `{"cyclegan": {"mode": "cyclegan"}}`.
    #[serde(default)]
    pub model_thresholds: BTreeMap<String, ThresholdMode>,
    #[serde(default = "default_z_factor")]
    pub z_factor: f64,
    #[serde(default)]
    pub cc: CcConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
}

impl PipelineConfig {
    /// A config with every tunable at its default.
    pub fn new(output_dir: impl Into<PathBuf>, regions: Vec<RegionInput>) -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            output_dir: output_dir.into(),
            cache_dir: None,
            regions,
            register: RegisterConfig::default(),
            homogenize: HomogenizeConfig::default(),
            vesselness: VesselnessParams::default(),
            thresholds: ThresholdMode::default(),
            model_thresholds: BTreeMap::new(),
            z_factor: default_z_factor(),
            cc: CcConfig::default(),
            graph: GraphConfig::default(),
            metrics: default_metrics(),
        }
    }

    /// Reads a JSON config; relative paths are taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        if let Some(c) = cfg.cache_dir.as_mut() {
            fix(c);
        }
        for r in &mut cfg.regions {
            fix(&mut r.gt);
            for g in &mut r.generated {
                fix(&mut g.path);
            }
        }
        Ok(cfg)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn thresholds_for(&self, model: &str) -> ThresholdMode {
        self.model_thresholds.get(model).copied().unwrap_or(self.thresholds)
    }

    fn homogenizes(&self, model: &str) -> bool {
        self.homogenize.enabled
            && (self.homogenize.models.is_empty() || self.homogenize.models.iter().any(|m| m == model))
    }

    /// Checks parameters and that every referenced stack exists. Runs before
    /// any stack is read.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.regions.is_empty() {
            return Err(Error::invalid("no regions configured"));
        }
        let mut names = BTreeSet::new();
        for r in &self.regions {
            if !names.insert(&r.name) {
                return Err(Error::invalid(format!("duplicate region `{}`", r.name)));
            }
            let mut keys = BTreeSet::new();
            for g in &r.generated {
                if !keys.insert((&g.model, &g.resolution)) {
                    return Err(Error::invalid(format!(
                        "region `{}` lists model `{}` at `{}` twice",
                        r.name, g.model, g.resolution
                    )));
                }
            }
        }
        self.vesselness.validate()?;
        let modes = std::iter::once(&self.thresholds).chain(self.model_thresholds.values());
        for m in modes {
            if let ThresholdMode::Fixed { low, high } = *m {
                crate::segment::HysteresisThresholds::new(low, high)?;
            }
        }
        if !(self.z_factor > 0.0 && self.z_factor.is_finite()) {
            return Err(Error::invalid(format!("z_factor must be > 0, got {}", self.z_factor)));
        }
        if self.cc.area_bin == 0 {
            return Err(Error::invalid("cc.area_bin must be positive"));
        }
        if self.register.bins < 2 {
            return Err(Error::invalid("register.bins must be >= 2"));
        }
        if self.homogenize.enabled {
            if self.homogenize.patch_size == 0 || !(0.0..1.0).contains(&self.homogenize.overlap) {
                return Err(Error::invalid("homogenize needs patch_size > 0 and overlap in [0, 1)"));
            }
        }
        let mut missing = Vec::new();
        for r in &self.regions {
            std::iter::once(&r.gt)
                .chain(r.generated.iter().map(|g| &g.path))
                .filter(|p| !stack_exists(p))
                .for_each(|p| missing.push(p.display().to_string()));
        }
        if !missing.is_empty() {
            return Err(Error::invalid(format!("missing input stack(s): {}", missing.join(", "))));
        }
        Ok(())
    }
}

/// Content hash of a stack: geometry, declared range and voxel values.
pub fn stack_hash(stack: &ImageStack) -> String {
    let mut h = Sha256::new();
    for d in stack.dims {
        h.update((d as u64).to_le_bytes());
    }
    for s in stack.spacing {
        h.update(s.to_le_bytes());
    }
    h.update(stack.intensity_range.0.to_le_bytes());
    h.update(stack.intensity_range.1.to_le_bytes());
    for chunk in stack.voxels.chunks(1 << 16) {
        let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

fn key_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// On-disk store of stage outputs keyed by content hash.
struct Cache {
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Cache {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Cache {
            dir,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    fn bytes(
        &self,
        stage: &str,
        key: &str,
        compute: impl FnOnce() -> Result<Vec<u8>>,
    ) -> Result<Vec<u8>> {
        let path = self.dir.join(format!("{stage}-{key}.bin"));
        if let Ok(b) = fs::read(&path) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(b);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let b = compute()?;
        let tmp = self.dir.join(format!("{stage}-{key}.tmp{}", std::process::id()));
        fs::write(&tmp, &b).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(b)
    }

    fn json<T: Serialize + DeserializeOwned>(
        &self,
        stage: &str,
        key: &str,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let mut fresh = None;
        let b = self.bytes(stage, key, || {
            let v = compute()?;
            let b = serde_json::to_vec(&v)?;
            fresh = Some(v);
            Ok(b)
        })?;
        match fresh {
            Some(v) => Ok(v),
            None => Ok(serde_json::from_slice(&b)?),
        }
    }

    fn binary(
        &self,
        stage: &str,
        key: &str,
        compute: impl FnOnce() -> Result<BinaryVolume>,
    ) -> Result<BinaryVolume> {
        let mut fresh = None;
        let b = self.bytes(stage, key, || {
            let v = compute()?;
            let b = encode_binary(&v);
            fresh = Some(v);
            Ok(b)
        })?;
        match fresh {
            Some(v) => Ok(v),
            None => decode_binary(&b),
        }
    }
}

fn encode_binary(v: &BinaryVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + v.bits.len() / 8 + 1);
    for d in v.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for chunk in v.bits.chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i)));
    }
    out
}

fn decode_binary(b: &[u8]) -> Result<BinaryVolume> {
    let bad = || Error::invalid("corrupt cached binary volume");
    if b.len() < 48 {
        return Err(bad());
    }
    let word = |i: usize| <[u8; 8]>::try_from(&b[i * 8..i * 8 + 8]).unwrap();
    let dims = [0, 1, 2].map(|i| u64::from_le_bytes(word(i)) as usize);
    let spacing = [3, 4, 5].map(|i| f64::from_le_bytes(word(i)));
    let n = dims[0] * dims[1] * dims[2];
    let packed = &b[48..];
    if packed.len() != n.div_ceil(8) {
        return Err(bad());
    }
    let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    BinaryVolume::new(dims, spacing, bits)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Graph metrics of one stack, as listed in the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub region: String,
    /// `None` for the ground truth.
    pub model: Option<String>,
    pub resolution: Option<String>,
    pub metrics: GraphMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub rows: Vec<ScoreRow>,
    pub groups: Vec<GroupResult>,
    pub graphs: Vec<GraphSummary>,
    pub timings: Vec<StageTiming>,
    pub cache_hits: usize,
    pub cache_misses: usize,
    /// Files of the deterministic bundle, relative to the output directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    region: usize,
    gen: usize,
}

struct Prepared {
    stack: ImageStack,
    hash: String,
}

/// CC metric names, in report order.
pub const CC_METRICS: [&str; 6] = [
    "cc_pct_matching",
    "cc_pct_missing",
    "cc_pct_merged",
    "cc_pct_split",
    "cc_false_positives",
    "wd_area",
];

fn row(cfg: &PipelineConfig, u: Unit, metric: &str, value: Option<f64>, ci: Option<(f64, f64)>) -> ScoreRow {
    let r = &cfg.regions[u.region];
    let g = &r.generated[u.gen];
    ScoreRow {
        region: r.name.clone(),
        model: g.model.clone(),
        resolution: g.resolution.clone(),
        metric: metric.to_string(),
        value,
        ci_lo: ci.map(|c| c.0),
        ci_hi: ci.map(|c| c.1),
    }
}

/// Brings a generated stack onto the ground-truth grid: nearest-neighbour
/// lateral upsampling when it is smaller, then one rigid X-Y transform
/// estimated on the Z-mean projections and applied to every slice.
fn align(
    gen: &ImageStack,
    gt: &ImageStack,
    gt_hash: &str,
    cfg: &RegisterConfig,
    cache: &Cache,
) -> Result<ImageStack> {
    if gen.dims[2] != gt.dims[2] {
        return Err(Error::dims(format!(
            "generated depth {} differs from ground truth depth {}",
            gen.dims[2], gt.dims[2]
        )));
    }
    let (w, h) = (gt.dims[0], gt.dims[1]);
    let gen = if gen.dims[0] == w && gen.dims[1] == h {
        gen.clone()
    } else {
        let slices = gen
            .slices()
            .iter()
            .map(|s| upsample_nn(s, w, h))
            .collect::<Result<Vec<_>>>()?;
        ImageStack::from_slices(&slices, gt.spacing)?.with_range(gen.intensity_range)
    };
    if !cfg.enabled {
        return Ok(gen);
    }
    let key = key_of(&[&stack_hash(&gen), gt_hash, &json(cfg)]);
    let t: RigidTransform2D = cache.json("register", &key, || {
        register_rigid_with_bins(&z_mean(&gen), &z_mean(gt), cfg.search, cfg.bins)
    })?;
    let slices: Vec<Image2D> = gen.slices().par_iter().map(|s| apply_transform(s, &t).0).collect();
    Ok(ImageStack::from_slices(&slices, gt.spacing)?.with_range(gen.intensity_range))
}

fn z_mean(stack: &ImageStack) -> Image2D {
    let plane = stack.dims[0] * stack.dims[1];
    let mut acc = vec![0f64; plane];
    for chunk in stack.voxels.chunks(plane) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v as f64;
        }
    }
    let n = stack.dims[2] as f64;
    Image2D::new(stack.dims[0], stack.dims[1], acc.iter().map(|&a| (a / n) as f32).collect())
        .expect("plane-sized buffer")
}

fn homogenize_stack(stack: &ImageStack, cfg: &HomogenizeConfig) -> Result<ImageStack> {
    let slices = stack
        .slices()
        .par_iter()
        .map(|s| {
            let (grid, patches) = extract_patches(s, cfg.patch_size, cfg.overlap)?;
            let (patches, _) = homogenize_background(&patches, cfg.mode)?;
            stitch(&grid, &patches)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageStack::from_slices(&slices, stack.spacing)?.with_range(stack.intensity_range))
}

fn binarize_cached(
    cache: &Cache,
    stack: &ImageStack,
    hash: &str,
    cfg: &PipelineConfig,
    dim: Dimensionality,
    mode: ThresholdMode,
) -> Result<(BinaryVolume, String)> {
    let params = BinarizeParams {
        vesselness: cfg.vesselness,
        dim,
        thresholds: mode,
        z_factor: cfg.z_factor,
    };
    let stage = match dim {
        Dimensionality::Two => "binarize-2d",
        Dimensionality::Three => "binarize-3d",
    };
    let key = key_of(&[hash, &json(&params)]);
    let v = cache.binary(stage, &key, || Ok(binarize_pipeline(stack, &params)?.volume))?;
    Ok((v, key))
}

/// Pooled component taxonomy over all slices plus the area-distribution distance.
fn cc_compare(gen: &BinaryVolume, gt: &BinaryVolume, cfg: &CcConfig) -> Result<Vec<Option<f64>>> {
    if gen.dims != gt.dims {
        return Err(Error::dims(format!("{:?} vs {:?}", gen.dims, gt.dims)));
    }
    let [w, h, d] = gt.dims;
    let per_slice = (0..d)
        .into_par_iter()
        .map(|z| {
            let g = filter_small(&label_components(&gen.slice(z), w, h, Connectivity::Eight)?, cfg.min_area);
            let t = filter_small(&label_components(&gt.slice(z), w, h, Connectivity::Eight)?, cfg.min_area);
            Ok((classify_components(&g, &t)?, g.areas(), t.areas()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut matching, mut missing, mut merged, mut split, mut fp, mut gt_count) = (0, 0, 0, 0, 0, 0);
    let (mut gen_areas, mut gt_areas) = (Vec::new(), Vec::new());
    for (t, ga, ta) in per_slice {
        matching += t.matching;
        missing += t.missing;
        merged += t.merged;
        split += t.split;
        fp += t.false_positives;
        gt_count += t.gt_count;
        gen_areas.extend(ga);
        gt_areas.extend(ta);
    }
    let pct = |n: usize| (gt_count > 0).then(|| 100.0 * n as f64 / gt_count as f64);
    let hg = AreaHistogram::from_areas(&gen_areas, cfg.area_bin)?;
    let ht = AreaHistogram::from_areas(&gt_areas, cfg.area_bin)?;
    let wd = crate::cc::wasserstein_1d(&hg, &ht).ok();
    Ok(vec![pct(matching), pct(missing), pct(merged), pct(split), Some(fp as f64), wd])
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    cache: Cache,
    timings: Vec<StageTiming>,
    rows: Vec<ScoreRow>,
    graphs: Vec<GraphSummary>,
}

impl Runner<'_> {
    fn timed<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        log::info!("stage {name}");
        let r = stage(name, f(self));
        self.timings.push(StageTiming {
            stage: name.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        r
    }

    fn run(&mut self) -> Result<Vec<GroupResult>> {
        let cfg = self.cfg;
        let units: Vec<Unit> = cfg
            .regions
            .iter()
            .enumerate()
            .flat_map(|(region, r)| (0..r.generated.len()).map(move |gen| Unit { region, gen }))
            .collect();

        let (gts, raw) = self.timed("load", |_| {
            let gts: Vec<Prepared> = cfg
                .regions
                .par_iter()
                .map(|r| {
                    let stack = load_stack(&r.gt)?;
                    Ok(Prepared { hash: stack_hash(&stack), stack })
                })
                .collect::<Result<_>>()?;
            let raw: Vec<ImageStack> = units
                .par_iter()
                .map(|u| load_stack(&cfg.regions[u.region].generated[u.gen].path))
                .collect::<Result<_>>()?;
            Ok((gts, raw))
        })?;

        let aligned: Vec<ImageStack> = self.timed("register", |s| {
            units
                .par_iter()
                .zip(&raw)
                .map(|(u, g)| {
                    let gt = &gts[u.region];
                    align(g, &gt.stack, &gt.hash, &cfg.register, &s.cache)
                })
                .collect()
        })?;
        drop(raw);

        let gens: Vec<Prepared> = self.timed("homogenize", |_| {
            units
                .par_iter()
                .zip(aligned)
                .map(|(u, stack)| {
                    let model = &cfg.regions[u.region].generated[u.gen].model;
                    let stack = if cfg.homogenizes(model) {
                        homogenize_stack(&stack, &cfg.homogenize)?
                    } else {
                        stack
                    };
                    Ok(Prepared { hash: stack_hash(&stack), stack })
                })
                .collect()
        })?;

        let iqa_rows = self.timed("iqa", |_| {
            let per_unit = units
                .par_iter()
                .zip(&gens)
                .map(|(&u, g)| {
                    cfg.metrics
                        .iter()
                        .map(|&m| {
                            let s = stack_score(m, &g.stack, &gts[u.region].stack)?;
                            let usable: Vec<f64> =
                                s.per_slice.iter().flatten().copied().filter(|v| v.is_finite()).collect();
                            let ci = mean_ci(&usable).ok().map(|c| (c.lo, c.hi));
                            Ok(row(cfg, u, m.name(), s.value, if s.value.is_some() { ci } else { None }))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(per_unit.into_iter().flatten().collect::<Vec<_>>())
        })?;
        self.rows.extend(iqa_rows);

        let (gt2, gen2) = self.timed("binarize-2d", |s| {
            let gt2 = gts
                .par_iter()
                .map(|g| Ok(binarize_cached(&s.cache, &g.stack, &g.hash, cfg, Dimensionality::Two, cfg.thresholds)?.0))
                .collect::<Result<Vec<_>>>()?;
            let gen2 = units
                .par_iter()
                .zip(&gens)
                .map(|(u, g)| {
                    let mode = cfg.thresholds_for(&cfg.regions[u.region].generated[u.gen].model);
                    Ok(binarize_cached(&s.cache, &g.stack, &g.hash, cfg, Dimensionality::Two, mode)?.0)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((gt2, gen2))
        })?;

        let cc_rows = self.timed("cc-compare", |_| {
            let per_unit = units
                .par_iter()
                .zip(&gen2)
                .map(|(&u, g)| {
                    let values = cc_compare(g, &gt2[u.region], &cfg.cc)?;
                    Ok(CC_METRICS.iter().zip(values).map(|(m, v)| row(cfg, u, m, v, None)).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(per_unit.into_iter().flatten().collect::<Vec<_>>())
        })?;
        self.rows.extend(cc_rows);
        drop((gt2, gen2));

        let (gt3, gen3) = self.timed("binarize-3d", |s| {
            let gt3 = gts
                .par_iter()
                .map(|g| binarize_cached(&s.cache, &g.stack, &g.hash, cfg, Dimensionality::Three, cfg.thresholds))
                .collect::<Result<Vec<_>>>()?;
            let gen3 = units
                .par_iter()
                .zip(&gens)
                .map(|(u, g)| {
                    let mode = cfg.thresholds_for(&cfg.regions[u.region].generated[u.gen].model);
                    binarize_cached(&s.cache, &g.stack, &g.hash, cfg, Dimensionality::Three, mode)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((gt3, gen3))
        })?;
        drop(gens);

        let (gt_graph, gen_graph) = self.timed("graph", |s| {
            let params = cfg.graph.params();
            let graph_json = json(&cfg.graph);
            let metrics = |(bin, key): &(BinaryVolume, String)| -> Result<GraphMetrics> {
                let k = key_of(&[key, &graph_json]);
                s.cache.json("graph", &k, || Ok(analyze(bin, &params, cfg.graph.tubule_min_diameter_um).1))
            };
            let gt_graph = gt3.par_iter().map(metrics).collect::<Result<Vec<_>>>()?;
            let gen_graph = gen3.par_iter().map(metrics).collect::<Result<Vec<_>>>()?;
            Ok((gt_graph, gen_graph))
        })?;
        drop((gt3, gen3));

        let ratio_rows = self.timed("ratios", |_| {
            Ok(units
                .iter()
                .zip(&gen_graph)
                .flat_map(|(&u, g)| {
                    metric_ratios(g, &gt_graph[u.region])
                        .into_iter()
                        .map(move |(name, v)| row(cfg, u, &format!("graph_ratio_{name}"), v, None))
                })
                .collect::<Vec<_>>())
        })?;
        self.rows.extend(ratio_rows);
        for (r, m) in cfg.regions.iter().zip(&gt_graph) {
            self.graphs.push(GraphSummary {
                region: r.name.clone(),
                model: None,
                resolution: None,
                metrics: *m,
            });
        }
        for (u, m) in units.iter().zip(&gen_graph) {
            let g = &cfg.regions[u.region].generated[u.gen];
            self.graphs.push(GraphSummary {
                region: cfg.regions[u.region].name.clone(),
                model: Some(g.model.clone()),
                resolution: Some(g.resolution.clone()),
                metrics: *m,
            });
        }

        self.timed("stats", |s| analyze_rows(&s.rows))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_stage: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    parameters: &'a PipelineConfig,
    files: &'a [String],
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
}

/// Runs every stage and writes the report bundle to `cfg.output_dir`.
///
/// On failure the rows computed so far are still written and the manifest
/// carries `"status": "FAILED"` with the failing stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut runner = Runner {
        cfg,
        cache: Cache::new(cfg.cache_path())?,
        timings: Vec::new(),
        rows: Vec::new(),
        graphs: Vec::new(),
    };
    let result = runner.run();
    let (groups, failure) = match result {
        Ok(g) => (g, None),
        Err(e) => (Vec::new(), Some(e)),
    };
    let mut files = Vec::new();
    if !runner.rows.is_empty() {
        files = stage("report", write_report(out, &runner.rows, &groups, &runner.graphs))?;
    }
    files.push(MANIFEST_JSON.to_string());
    let manifest = Manifest {
        tool: "porenet",
        version: env!("CARGO_PKG_VERSION"),
        status: if failure.is_some() { "FAILED" } else { "OK" },
        failed_stage: failure.as_ref().and_then(|e| match e {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }),
        error: failure.as_ref().map(|e| e.to_string()),
        parameters: cfg,
        files: &files,
    };
    write_file(out, MANIFEST_JSON, &serde_json::to_vec_pretty(&manifest)?)?;
    write_file(out, TIMINGS_JSON, &serde_json::to_vec_pretty(&runner.timings)?)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(PipelineRun {
        rows: runner.rows,
        groups,
        graphs: runner.graphs,
        timings: runner.timings,
        cache_hits: runner.cache.hits.load(Ordering::Relaxed),
        cache_misses: runner.cache.misses.load(Ordering::Relaxed),
        files,
    })
}

#[derive(Serialize)]
struct GroupReport<'a> {
    #[serde(flatten)]
    group: &'a GroupResult,
    /// `significance[i][j]` for models i and j; "-" on the diagonal.
    significance: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct Report<'a> {
    schema_version: u32,
    records: &'a [ScoreRow],
    groups: Vec<GroupReport<'a>>,
    #[serde(skip_serializing_if = "<[GraphSummary]>::is_empty")]
    graphs: &'a [GraphSummary],
}

pub fn significance_matrix(g: &GroupResult) -> Vec<Vec<String>> {
    let k = g.models.len();
    let mut m = vec![vec![Significance::Ns.to_string(); k]; k];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = "-".to_string();
    }
    for p in &g.pairs {
        m[p.i][p.j] = p.significance.to_string();
        m[p.j][p.i] = p.significance.to_string();
    }
    m
}

pub fn scores_csv(rows: &[ScoreRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

fn write_report(dir: &Path, rows: &[ScoreRow], groups: &[GroupResult], graphs: &[GraphSummary]) -> Result<Vec<String>> {
    let report = Report {
        schema_version: SCHEMA_VERSION,
        records: rows,
        groups: groups
            .iter()
            .map(|g| GroupReport {
                group: g,
                significance: significance_matrix(g),
            })
            .collect(),
        graphs,
    };
    write_file(dir, SCORES_CSV, &scores_csv(rows)?)?;
    write_file(dir, REPORT_JSON, &serde_json::to_vec_pretty(&report)?)?;
    write_file(dir, STATS_TXT, render_table(groups).as_bytes())?;
    Ok(vec![SCORES_CSV.into(), REPORT_JSON.into(), STATS_TXT.into()])
}

/// Writes `scores.csv`, `report.json` (records plus Friedman/Nemenyi
/// results and significance matrices) and `stats.txt` for a set of records.
/// Returns the written file names.
pub fn emit_report(rows: &[ScoreRow], dir: impl AsRef<Path>) -> Result<Vec<String>> {
    if rows.is_empty() {
        return Err(Error::invalid("no records to report"));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let groups = analyze_rows(rows)?;
    write_report(dir, rows, &groups, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_codec_roundtrip() {
        let bits: Vec<bool> = (0..3 * 5 * 2).map(|i| i % 3 == 0 || i % 7 == 1).collect();
        let v = BinaryVolume::new([3, 5, 2], [100.0, 100.0, 300.0], bits).unwrap();
        assert_eq!(decode_binary(&encode_binary(&v)).unwrap(), v);
        assert!(decode_binary(&encode_binary(&v)[..50]).is_err());
    }

    #[test]
    fn key_depends_on_every_part() {
        assert_ne!(key_of(&["ab", "c"]), key_of(&["a", "bc"]));
        assert_eq!(key_of(&["x"]), key_of(&["x"]));
    }

    #[test]
    fn unknown_config_fields_rejected() {
        let text = r#"{"schema_version": 1, "output_dir": "o", "regions": [], "bogus": 1}"#;
        assert!(serde_json::from_str::<PipelineConfig>(text).is_err());
        let text = r#"{"schema_version": 1, "output_dir": "o", "regions": [], "cc": {"min_area": 4}}"#;
        let cfg: PipelineConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.cc, CcConfig { min_area: 4, area_bin: 100 });
        assert_eq!(cfg.z_factor, 3.5);
        assert_eq!(cfg.metrics.len(), 7);
    }
}
