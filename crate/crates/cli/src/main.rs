use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use porenet::cc::compare_binary;
use porenet::iqa::{frechet_distance, kid, stack_score, Features, Metric};
use porenet::mosaic::{extract_patches, homogenize_background, stitch, HomogenizeMode, PatchGrid};
use porenet::phantom::{degrade_with_noise, generate_network, render, render_binary, PhantomParams, RenderParams};
use porenet::pipeline::{emit_report, run_pipeline, PipelineConfig};
use porenet::register::{apply_transform, register_rigid_with_bins, SearchWindow};
use porenet::segment::{binarize_pipeline, BinarizeParams, Dimensionality, ThresholdMode};
use porenet::skelgraph::{analyze, metric_ratios, GraphParams};
use porenet::stats::{analyze_rows, render_table, ScoreRow};
use porenet::vesselness::{jerman_vesselness_3d, jerman_vesselness_slices, ScaleRange, VesselnessParams};
use porenet::volume::{load_stack, save_stack, resample_z};
use porenet::{BinaryVolume, Dtype, Image2D, ImageStack};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "PORENET_THREADS";

#[derive(Parser)]
#[command(name = "porenet", version, about = "Assessment of generated confocal stacks of tubular porosity networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rigid X-Y registration of one slice onto another by mutual information.
    Register(RegisterArgs),
    /// Reassemble a stack of patches into an image, averaging overlaps.
    Stitch(StitchArgs),
    /// Patch-wise background homogenization of every slice.
    Homogenize(HomogenizeArgs),
    /// Multiscale Jerman vesselness response.
    Vesselness(VesselnessArgs),
    /// Vesselness followed by hysteresis thresholding.
    Binarize(BinarizeArgs),
    /// Connected-component taxonomy of a generated binary stack against GT.
    CcCompare(CcArgs),
    /// Skeleton graph metrics of a binary volume, optionally as ratios to GT.
    Graph(GraphArgs),
    /// Image quality metrics of stacks, or Frechet/KID distances of feature sets.
    Iqa(IqaArgs),
    /// Friedman and Nemenyi tests on a scores CSV.
    Stats(StatsArgs),
    /// Synthetic tubule/branch phantom with known graph.
    Phantom(PhantomArgs),
    /// Full assessment from a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct RegisterArgs {
    /// Stack to align.
    #[arg(long)]
    moving: PathBuf,
    /// Reference stack.
    #[arg(long)]
    fixed: PathBuf,
    /// Slice used for both images; defaults to the middle slice.
    #[arg(long)]
    slice: Option<usize>,
    #[arg(long, default_value_t = 16.0)]
    max_translation: f64,
    /// Degrees.
    #[arg(long, default_value_t = 2.0)]
    max_rotation: f64,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// Write the moving stack with the transform applied to every slice.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StitchArgs {
    /// Stack whose slices are the patches, in grid order.
    #[arg(long)]
    patches: PathBuf,
    /// Grid JSON as written by `homogenize --grid-out`.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    BackgroundMean,
    PatchMinimum,
}

#[derive(Args)]
struct HomogenizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 128)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.25)]
    overlap: f64,
    #[arg(long, value_enum, default_value = "background-mean")]
    mode: ModeArg,
    /// JSON log of per-slice, per-patch offsets.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the homogenized patches of the first slice and their grid.
    #[arg(long, requires = "grid_out")]
    patches_out: Option<PathBuf>,
    #[arg(long)]
    grid_out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct VesselArgs {
    /// FWHM scales as min:step:max, in pixels.
    #[arg(long, default_value = "2:0.5:24")]
    scales: String,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Look for dark tubes on a bright background.
    #[arg(long)]
    dark: bool,
    /// 2 = per slice, 3 = volume after Z resampling.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(2..=3))]
    dim: u8,
    #[arg(long, default_value_t = 3.5)]
    z_factor: f64,
}

impl VesselArgs {
    fn params(&self) -> Result<VesselnessParams> {
        let parts: Vec<f64> = self
            .scales
            .split(':')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("bad --scales `{}`", self.scales))?;
        let [min_fwhm, step, max_fwhm] = parts[..] else {
            bail!("--scales must be min:step:max");
        };
        let p = VesselnessParams {
            scales: ScaleRange { min_fwhm, max_fwhm, step },
            tau: self.tau,
            bright_on_dark: !self.dark,
        };
        p.validate()?;
        Ok(p)
    }

    fn dim(&self) -> Dimensionality {
        if self.dim == 2 {
            Dimensionality::Two
        } else {
            Dimensionality::Three
        }
    }
}

#[derive(Args)]
struct VesselnessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write the per-voxel selected FWHM.
    #[arg(long)]
    scale_output: Option<PathBuf>,
    #[command(flatten)]
    vessel: VesselArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    Auto,
    Fixed,
    Cyclegan,
}

#[derive(Args)]
struct BinarizeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Binary u8 stack (0 / 255).
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "fixed")]
    thresholds: ThresholdArg,
    /// Low hysteresis threshold for `--thresholds fixed`.
    #[arg(long, default_value_t = 0.1)]
    low: f64,
    #[arg(long, default_value_t = 0.3)]
    high: f64,
    #[command(flatten)]
    vessel: VesselArgs,
}

#[derive(Args)]
struct CcArgs {
    /// Generated binary stack (nonzero = foreground).
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 16)]
    min_area: usize,
    /// Component-area histogram bin width, in pixels.
    #[arg(long, default_value_t = 100)]
    bin_width: usize,
}

#[derive(Args)]
struct GraphArgs {
    /// Binary volume (nonzero = foreground).
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth binary volume; adds generated/GT ratios.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    tubule_min_diameter_um: f64,
    #[arg(long, default_value_t = GraphParams::default().prune_length)]
    prune_length: f64,
    #[arg(long, default_value_t = GraphParams::default().prune_radius_factor)]
    prune_radius_factor: f64,
    #[arg(long, default_value_t = GraphParams::default().smoothing_window)]
    smoothing_window: usize,
    /// Write the full graph (nodes, edges, polylines) as JSON.
    #[arg(long)]
    graph_out: Option<PathBuf>,
}

#[derive(Args)]
struct IqaArgs {
    #[arg(long, requires = "reference")]
    generated: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Comma-separated subset of mse,psnr,ncc,ssim,ms-ssim,haarpsi,wd.
    #[arg(long, value_delimiter = ',', default_value = "mse,psnr,ncc,ssim,ms-ssim,haarpsi,wd")]
    metrics: Vec<String>,
    /// Feature matrices (`.json` + `.raw`) for Frechet and KID.
    #[arg(long, requires = "features_b", conflicts_with = "generated")]
    features_a: Option<PathBuf>,
    #[arg(long)]
    features_b: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    kid_degree: i32,
}

#[derive(Args)]
struct StatsArgs {
    /// CSV with columns region,model,resolution,metric,value[,ci_lo,ci_hi].
    #[arg(long)]
    input: PathBuf,
    /// Write scores.csv, report.json and stats.txt here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Width,height,depth in voxels.
    #[arg(long, value_delimiter = ',', default_value = "256,256,64")]
    dims: Vec<usize>,
    /// Voxel size x,y,z in nm.
    #[arg(long, value_delimiter = ',', default_value = "100,100,300")]
    spacing: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    tubules: usize,
    #[arg(long, default_value_t = 6)]
    branches: usize,
    /// Tubule radius range lo,hi in um.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1.5")]
    tubule_radius: Vec<f64>,
    /// Branch radius range lo,hi in um.
    #[arg(long, value_delimiter = ',', default_value = "0.15,0.35")]
    branch_radius: Vec<f64>,
    /// Render without the PSF blur.
    #[arg(long)]
    no_psf: bool,
    #[arg(long)]
    snr: Option<f64>,
    /// Lateral block-average then nearest-neighbour upsampling by this factor.
    #[arg(long)]
    degrade: Option<usize>,
    /// Also write the binary ground-truth volume.
    #[arg(long)]
    binary_output: Option<PathBuf>,
    /// Also write the network specification and its expected graph metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

fn to_binary(stack: &ImageStack) -> BinaryVolume {
    BinaryVolume::new(stack.dims, stack.spacing, stack.voxels.iter().map(|&v| v > 0.0).collect())
        .expect("same geometry")
}

fn save_binary(v: &BinaryVolume, path: &Path) -> Result<()> {
    let mut s = v.to_stack();
    s.voxels.iter_mut().for_each(|x| *x *= 255.0);
    save_stack(&s, path, Dtype::U8)?;
    Ok(())
}

fn print(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn mid_or(stack: &ImageStack, z: Option<usize>) -> Result<Image2D> {
    let z = z.unwrap_or(stack.dims[2] / 2);
    if z >= stack.dims[2] {
        bail!("slice {z} out of range (depth {})", stack.dims[2]);
    }
    Ok(stack.slice(z))
}

fn cmd_register(a: RegisterArgs) -> Result<()> {
    let moving = load_stack(&a.moving)?;
    let fixed = load_stack(&a.fixed)?;
    let search = SearchWindow { max_translation: a.max_translation, max_rotation: a.max_rotation };
    let t = register_rigid_with_bins(&mid_or(&moving, a.slice)?, &mid_or(&fixed, a.slice)?, search, a.bins)?;
    if let Some(out) = a.output {
        let slices: Vec<Image2D> = moving.slices().iter().map(|s| apply_transform(s, &t).0).collect();
        let s = ImageStack::from_slices(&slices, moving.spacing)?.with_range(moving.intensity_range);
        save_stack(&s, out, Dtype::F32)?;
    }
    print(&json!({"theta": t.theta, "tx": t.tx, "ty": t.ty}))
}

fn cmd_stitch(a: StitchArgs) -> Result<()> {
    let grid: PatchGrid = serde_json::from_str(&std::fs::read_to_string(&a.grid)?)?;
    let stack = load_stack(&a.patches)?;
    let patches: Vec<Vec<f64>> = stack.slices().iter().map(|s| s.data.iter().map(|&v| v as f64).collect()).collect();
    let img = stitch(&grid, &patches)?;
    let out = ImageStack::from_slices(&[img], stack.spacing)?;
    save_stack(&out, a.output, Dtype::F32)?;
    Ok(())
}

fn cmd_homogenize(a: HomogenizeArgs) -> Result<()> {
    let stack = load_stack(&a.input)?;
    let mode = match a.mode {
        ModeArg::BackgroundMean => HomogenizeMode::BackgroundMean,
        ModeArg::PatchMinimum => HomogenizeMode::PatchMinimum,
    };
    let mut logs = Vec::new();
    let mut slices = Vec::new();
    for (z, s) in stack.slices().iter().enumerate() {
        let (grid, patches) = extract_patches(s, a.patch_size, a.overlap)?;
        let (patches, log) = homogenize_background(&patches, mode)?;
        if z == 0 {
            if let (Some(p), Some(g)) = (&a.patches_out, &a.grid_out) {
                let imgs = patches
                    .iter()
                    .map(|p| Image2D::new(a.patch_size, a.patch_size, p.iter().map(|&v| v as f32).collect()))
                    .collect::<porenet::Result<Vec<_>>>()?;
                save_stack(&ImageStack::from_slices(&imgs, stack.spacing)?, p, Dtype::F32)?;
                std::fs::write(g, serde_json::to_string_pretty(&grid)?)?;
            }
        }
        slices.push(stitch(&grid, &patches)?);
        logs.push(log);
    }
    let out = ImageStack::from_slices(&slices, stack.spacing)?.with_range(stack.intensity_range);
    save_stack(&out, a.output, Dtype::F32)?;
    if let Some(p) = a.log {
        std::fs::write(p, serde_json::to_string_pretty(&logs)?)?;
    }
    Ok(())
}

fn cmd_vesselness(a: VesselnessArgs) -> Result<()> {
    let stack = load_stack(&a.input)?;
    let params = a.vessel.params()?;
    let (r, spacing) = match a.vessel.dim() {
        Dimensionality::Two => (jerman_vesselness_slices(&stack, &params)?, stack.spacing),
        Dimensionality::Three => {
            let iso = if a.vessel.z_factor == 1.0 { stack } else { resample_z(&stack, a.vessel.z_factor)? };
            (jerman_vesselness_3d(&iso, &params)?, iso.spacing)
        }
    };
    save_stack(&r.to_stack(spacing), &a.output, Dtype::F32)?;
    if let Some(p) = a.scale_output {
        save_stack(&ImageStack::new(r.dims, spacing, r.scale.clone())?, p, Dtype::F32)?;
    }
    Ok(())
}

fn cmd_binarize(a: BinarizeArgs) -> Result<()> {
    let stack = load_stack(&a.input)?;
    let thresholds = match a.thresholds {
        ThresholdArg::Auto => ThresholdMode::Auto,
        ThresholdArg::Fixed => ThresholdMode::Fixed { low: a.low, high: a.high },
        ThresholdArg::Cyclegan => ThresholdMode::Cyclegan,
    };
    let params = BinarizeParams {
        vesselness: a.vessel.params()?,
        dim: a.vessel.dim(),
        thresholds,
        z_factor: a.vessel.z_factor,
    };
    let out = binarize_pipeline(&stack, &params)?;
    save_binary(&out.volume, &a.output)?;
    print(&json!({
        "foreground_voxels": out.volume.count(),
        "dims": out.volume.dims,
        "thresholds": out.thresholds,
    }))
}

fn cmd_cc(a: CcArgs) -> Result<()> {
    let gen = to_binary(&load_stack(&a.generated)?);
    let gt = to_binary(&load_stack(&a.gt)?);
    if gen.dims != gt.dims {
        bail!("generated {:?} and GT {:?} differ in size", gen.dims, gt.dims);
    }
    let [w, h, d] = gt.dims;
    let mut slices = Vec::with_capacity(d);
    for z in 0..d {
        let c = compare_binary(&gen.slice(z), &gt.slice(z), w, h, a.min_area, a.bin_width)?;
        slices.push(json!({
            "slice": z,
            "matching": c.taxonomy.matching,
            "missing": c.taxonomy.missing,
            "false_positives": c.taxonomy.false_positives,
            "merged": c.taxonomy.merged,
            "split": c.taxonomy.split,
            "gt_count": c.taxonomy.gt_count,
            "gen_count": c.taxonomy.gen_count,
            "matching_pct": c.taxonomy.matching_pct(),
            "missing_pct": c.taxonomy.missing_pct(),
            "merged_pct": c.taxonomy.merged_pct(),
            "split_pct": c.taxonomy.split_pct(),
            "wd_area": c.wd_area,
        }));
    }
    print(&json!({ "slices": slices }))
}

fn cmd_graph(a: GraphArgs) -> Result<()> {
    let params = GraphParams {
        prune_length: a.prune_length,
        prune_radius_factor: a.prune_radius_factor,
        smoothing_window: a.smoothing_window,
    };
    let bin = to_binary(&load_stack(&a.input)?);
    let [sx, sy, sz] = bin.spacing;
    if sx.max(sy).max(sz) > 1.5 * sx.min(sy).min(sz) {
        log::warn!("voxels are anisotropic ({sx}, {sy}, {sz}) nm; resample Z first (binarize --dim 3 does)");
    }
    let (graph, metrics) = analyze(&bin, &params, a.tubule_min_diameter_um);
    if let Some(p) = a.graph_out {
        std::fs::write(p, serde_json::to_string(&graph)?)?;
    }
    let mut out = json!({ "metrics": metrics, "handshake": graph.handshake_holds() });
    if let Some(gt) = a.gt {
        let (_, gt_metrics) = analyze(&to_binary(&load_stack(gt)?), &params, a.tubule_min_diameter_um);
        let ratios: serde_json::Map<String, serde_json::Value> =
            metric_ratios(&metrics, &gt_metrics).into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        out["gt_metrics"] = json!(gt_metrics);
        out["ratios"] = serde_json::Value::Object(ratios);
    }
    print(&out)
}

fn cmd_iqa(a: IqaArgs) -> Result<()> {
    if let (Some(fa), Some(fb)) = (&a.features_a, &a.features_b) {
        let (fa, fb) = (Features::load(fa)?, Features::load(fb)?);
        return print(&json!({
            "frechet": frechet_distance(&fa, &fb)?,
            "kid": kid(&fa, &fb, a.kid_degree)?,
        }));
    }
    let (Some(g), Some(r)) = (&a.generated, &a.reference) else {
        bail!("give --generated and --reference, or --features-a and --features-b");
    };
    let (g, r) = (load_stack(g)?, load_stack(r)?);
    let mut out = serde_json::Map::new();
    for name in &a.metrics {
        let m: Metric = name.parse()?;
        let s = stack_score(m, &g, &r)?;
        out.insert(
            m.name().to_string(),
            json!({ "value": s.value, "unbounded": s.unbounded, "excluded_slices": s.excluded }),
        );
    }
    print(&serde_json::Value::Object(out))
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(&a.input)?;
    let rows: Vec<ScoreRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    match a.output {
        Some(dir) => {
            emit_report(&rows, &dir)?;
            print!("{}", std::fs::read_to_string(dir.join(porenet::pipeline::STATS_TXT))?);
        }
        None => print!("{}", render_table(&analyze_rows(&rows)?)),
    }
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    if a.dims.len() != 3 || a.spacing.len() != 3 {
        bail!("--dims and --spacing take three comma-separated values");
    }
    if a.tubule_radius.len() != 2 || a.branch_radius.len() != 2 {
        bail!("--tubule-radius and --branch-radius take two comma-separated values");
    }
    let params = PhantomParams {
        dims: [a.dims[0], a.dims[1], a.dims[2]],
        spacing: [a.spacing[0], a.spacing[1], a.spacing[2]],
        n_tubules: a.tubules,
        n_branches: a.branches,
        tubule_radius_um: (a.tubule_radius[0], a.tubule_radius[1]),
        branch_radius_um: (a.branch_radius[0], a.branch_radius[1]),
        ..Default::default()
    };
    let spec = generate_network(&params, a.seed)?;
    let render_params = RenderParams {
        psf_fwhm_nm: if a.no_psf { None } else { RenderParams::default().psf_fwhm_nm },
        snr: None,
        noise_seed: a.seed,
    };
    let clean = render(&spec, &render_params)?;
    let noise = a.snr.map(|s| (s, a.seed));
    let stack = match a.degrade {
        Some(f) => degrade_with_noise(&clean, f, noise)?,
        None if noise.is_some() => degrade_with_noise(&clean, 1, noise)?,
        None => clean,
    };
    save_stack(&stack, &a.output, Dtype::F32)?;
    if let Some(p) = a.binary_output {
        save_binary(&render_binary(&spec), &p)?;
    }
    if let Some(p) = a.truth {
        let truth = json!({ "spec": spec, "expected_metrics": spec.ground_truth() });
        std::fs::write(p, serde_json::to_string_pretty(&truth)?)?;
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config)?;
    let run = run_pipeline(&cfg)?;
    println!("{}", render_table(&run.groups));
    for t in &run.timings {
        log::info!("{:<12} {:>8.2} s", t.stage, t.seconds);
    }
    println!(
        "{} rows written to {} ({} cache hits, {} misses)",
        run.rows.len(),
        cfg.output_dir.display(),
        run.cache_hits,
        run.cache_misses
    );
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Stitch(a) => cmd_stitch(a),
        Command::Homogenize(a) => cmd_homogenize(a),
        Command::Vesselness(a) => cmd_vesselness(a),
        Command::Binarize(a) => cmd_binarize(a),
        Command::CcCompare(a) => cmd_cc(a),
        Command::Graph(a) => cmd_graph(a),
        Command::Iqa(a) => cmd_iqa(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already carry their causes in the message
            if e.downcast_ref::<porenet::Error>().is_some() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
