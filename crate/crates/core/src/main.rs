use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use surfsplat::distance::DistanceKind;
use surfsplat::eval::{evaluate_mesh, image_metrics_report, IcpOptions};
use surfsplat::io::camera::load_camera;
use surfsplat::io::checkpoint::{load_checkpoint, save_checkpoint, METRICS_FILE};
use surfsplat::io::image::save_image;
use surfsplat::io::obj::{export_mesh, import_mesh};
use surfsplat::io::ply::{export_splats, PlyPrecision};
use surfsplat::io::scene::{load_scene, LoadedScene};
use surfsplat::io::synth::{generate_synthetic_scene, SyntheticSceneSpec};
use surfsplat::math::Vec3;
use surfsplat::morphable::evaluate_surface;
use surfsplat::parallel::ExecPolicy;
use surfsplat::render::render;
use surfsplat::train::{metrics_to_json_lines, train, SurfaceMode, TrainConfig};

#[derive(Parser)]
#[command(name = "surfsplat", version, about = "Gaussian splatting tied to a morphable surface")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Train splats and surface on a scene; writes a checkpoint and metrics log.
    Train(TrainArgs),
    /// Render a checkpoint from a camera file.
    Render(RenderArgs),
    /// Image metrics of a checkpoint against a scene's views.
    EvalImages(EvalImagesArgs),
    /// ICP-aligned mesh distances of a checkpoint's surface against a reference mesh.
    EvalMesh(EvalMeshArgs),
    /// Write a checkpoint's surface as OBJ.
    ExportMesh(ExportMeshArgs),
    /// Write a checkpoint's splats as 3DGS PLY.
    ExportSplats(ExportSplatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML spec; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    texture_seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    num_views: Option<usize>,
    #[arg(long)]
    ring_radius: Option<f64>,
    #[arg(long)]
    splat_count: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Fixed,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    SplatToSurface,
    PointToSurface,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene manifest.
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML config file, applied over the scene's config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    sh_degree: Option<usize>,
    #[arg(long, value_enum)]
    surface_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    distance_kind: Option<DistanceArg>,
    #[arg(long)]
    view_space_densify: Option<bool>,
    #[arg(long)]
    world_space_densify: Option<bool>,
    #[arg(long)]
    s2s_draws: Option<usize>,
    #[arg(long)]
    lambda_ssim: Option<f64>,
    #[arg(long)]
    lambda_s2s: Option<f64>,
    #[arg(long)]
    random_background: Option<bool>,
    #[arg(long)]
    log_interval: Option<usize>,
    #[arg(long, value_enum)]
    exec: Option<ExecArg>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Background as `r,g,b` in [0, 1].
    #[arg(long, default_value = "0,0,0")]
    background: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalImagesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Evaluate the held-out views instead of the training views.
    #[arg(long)]
    heldout: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalMeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Reference mesh; defaults to the scene's ground truth.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Multiplies reported distances, e.g. to convert to millimetres.
    #[arg(long, default_value_t = 1.0)]
    unit_scale: f64,
    #[arg(long)]
    estimate_scale: bool,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportMeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportSplatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write doubles instead of the usual 32-bit floats.
    #[arg(long)]
    double: bool,
    #[arg(long)]
    seed: Option<u64>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SyntheticSceneSpec = match &args.spec {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticSceneSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.texture_seed {
        spec.texture_seed = v;
    }
    if let Some(v) = args.resolution {
        spec.resolution = v;
    }
    if let Some(v) = args.num_views {
        spec.num_views = v;
    }
    if let Some(v) = args.ring_radius {
        spec.ring_radius = v;
    }
    if let Some(v) = args.splat_count {
        spec.splat_count = v;
    }
    let scene = generate_synthetic_scene(&spec, &args.out)?;
    write_text(&args.out.join("spec.toml"), &toml::to_string(&spec)?)?;
    println!("wrote {} training and {} held-out views to {}", scene.views.len(), scene.heldout.len(), args.out.display());
    Ok(())
}

fn train_config(scene: &LoadedScene, args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = scene.config.clone();
    if let Some(p) = &args.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let mut merged = toml::Table::try_from(&config)?;
        merge_tables(&mut merged, text.parse::<toml::Table>().with_context(|| format!("parsing {}", p.display()))?);
        config = merged.try_into().with_context(|| format!("applying {}", p.display()))?;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.sh_degree {
        config.sh_degree = v;
    }
    if let Some(v) = args.surface_mode {
        config.surface_mode = match v {
            ModeArg::None => SurfaceMode::None,
            ModeArg::Fixed => SurfaceMode::Fixed,
            ModeArg::Joint => SurfaceMode::Joint,
        };
    }
    if let Some(v) = args.distance_kind {
        config.distance_kind = match v {
            DistanceArg::SplatToSurface => DistanceKind::SplatToSurface,
            DistanceArg::PointToSurface => DistanceKind::PointToSurface,
        };
    }
    if let Some(v) = args.view_space_densify {
        config.view_space_densify = v;
    }
    if let Some(v) = args.world_space_densify {
        config.world_space_densify = v;
    }
    if let Some(v) = args.s2s_draws {
        config.s2s_draws = v;
    }
    if let Some(v) = args.lambda_ssim {
        config.loss.lambda_ssim = v;
    }
    if let Some(v) = args.lambda_s2s {
        config.loss.lambda_s2s = v;
    }
    if let Some(v) = args.random_background {
        config.random_background = v;
    }
    if let Some(v) = args.log_interval {
        config.log_interval = v;
    }
    if let Some(v) = args.exec {
        config.exec = match v {
            ExecArg::Sequential => ExecPolicy::Sequential,
            ExecArg::Parallel => ExecPolicy::Parallel,
        };
    }
    config.validate()?;
    Ok(config)
}

fn merge_tables(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let config = train_config(&scene, &args)?;
    info!("training {} iterations on {} views", config.iterations, scene.views.len());
    let result = train(&scene.views, &scene.model, &config)?;
    save_checkpoint(&args.out, &result.cloud, &result.params, &config)?;
    write_text(&args.out.join(METRICS_FILE), &metrics_to_json_lines(&result.log))?;
    println!("{} splats written to {}", result.cloud.len(), args.out.display());
    Ok(())
}

fn parse_background(text: &str) -> Result<Vec3> {
    let parts: Vec<f64> = text.split(',').map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>()
        .with_context(|| format!("background {text:?} is not r,g,b"))?;
    if parts.len() != 3 || parts.iter().any(|v| !(0.0..=1.0).contains(v)) {
        bail!("background {text:?} must be three values in [0, 1]");
    }
    Ok(Vec3::new(parts[0], parts[1], parts[2]))
}

fn render_cmd(args: RenderArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let camera = load_camera(&args.camera)?;
    let image = render(&ckpt.cloud, &camera, &parse_background(&args.background)?);
    save_image(&args.out, &image.rgb)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn eval_images(args: EvalImagesArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&args.scene)?;
    let views = if args.heldout { &scene.heldout } else { &scene.views };
    if views.is_empty() {
        bail!("scene has no {} views", if args.heldout { "held-out" } else { "training" });
    }
    let black = Vec3::zeros();
    let rendered: Vec<_> = views.iter().map(|v| render(&ckpt.cloud, &v.camera, &black).rgb).collect();
    let names: Vec<_> = views.iter().map(|v| v.name.clone()).collect();
    let targets: Vec<_> = views.iter().map(|v| v.image.clone()).collect();
    let masks: Vec<_> = views.iter().map(|v| v.mask.clone()).collect();
    let report = image_metrics_report(&names, &rendered, &targets, &masks)?;
    print!("{}", report.to_table());
    if let Some(p) = &args.json {
        write_text(p, &report.to_json())?;
    }
    Ok(())
}

fn eval_mesh(args: EvalMeshArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&args.scene)?;
    let reference = match (&args.reference, &scene.manifest.ground_truth) {
        (Some(p), _) => p.clone(),
        (None, Some(gt)) => scene.resolve(&gt.mesh),
        (None, None) => bail!("scene has no ground-truth mesh; pass --reference"),
    };
    let gt = import_mesh(&reference)?;
    let predicted = evaluate_surface(&scene.model, &ckpt.params)?;
    let options = IcpOptions { estimate_scale: args.estimate_scale, ..Default::default() };
    let eval = evaluate_mesh(&predicted, &gt, args.samples, args.seed, &options)?;
    let stats = eval.stats.scaled(args.unit_scale);
    println!("icp rms       {:.6e}", eval.alignment.final_rms() * args.unit_scale);
    println!("mean          {:.6e}", stats.mean);
    println!("mean squared  {:.6e}", stats.mean_squared);
    println!("median        {:.6e}", stats.median);
    println!("m90           {:.6e}", stats.m90);
    println!("max           {:.6e}", stats.max);
    if let Some(p) = &args.json {
        let value = serde_json::json!({
            "alignment": eval.alignment,
            "mean": stats.mean,
            "mean_squared": stats.mean_squared,
            "median": stats.median,
            "m90": stats.m90,
            "max": stats.max,
            "samples": args.samples,
        });
        write_text(p, &serde_json::to_string_pretty(&value)?)?;
    }
    Ok(())
}

fn export_mesh_cmd(args: ExportMeshArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&args.scene)?;
    export_mesh(&evaluate_surface(&scene.model, &ckpt.params)?, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn export_splats_cmd(args: ExportSplatsArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let precision = if args.double { PlyPrecision::Double } else { PlyPrecision::Single };
    export_splats(&ckpt.cloud, &args.out, precision)?;
    println!("wrote {} splats to {}", ckpt.cloud.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::EvalImages(a) => eval_images(a),
        Command::EvalMesh(a) => eval_mesh(a),
        Command::ExportMesh(a) => export_mesh_cmd(a),
        Command::ExportSplats(a) => export_splats_cmd(a),
    }
}
