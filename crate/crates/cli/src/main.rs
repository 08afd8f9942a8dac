use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde_json::json;

use gradiseg::config::TrainConfig;
use gradiseg::dataset::{load_dataset, Split};
use gradiseg::format::{load_scene, save_scene};
use gradiseg::image::{write_pgm, write_ppm};
use gradiseg::metrics::evaluate;
use gradiseg::render::{render_image, segment};
use gradiseg::scene::{assign_groups_with_confidence, extract_group, recolor_group, remove_group};
use gradiseg::synth::{generate, write_generated, SceneSpec};
use gradiseg::trainer::train;

/// The bundled three-object desk scene.
const DEFAULT_SPEC: &str = include_str!("../specs/desk.json");

#[derive(Parser, Debug)]
#[command(name = "gradiseg", version, about = "Gaussian splatting with identity encodings for 3D segmentation")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-view dataset and its ground-truth scene.
    Gen {
        /// Scene spec (JSON); the bundled desk scene when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a scene on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat TOML config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one dataset view of a scene to PPM.
    Render(ViewArgs),
    /// Classify the rendered identity map of one view and write a PGM mask.
    Segment(ViewArgs),
    /// Score a scene against a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Views to score: test, train or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Boundary band in pixels; 2 % of the image diagonal when omitted.
        #[arg(long)]
        band: Option<usize>,
    },
    /// Remove, recolor or extract one group of a scene.
    Edit(EditArgs),
}

#[derive(Args, Debug)]
struct ViewArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Dataset providing the cameras.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    view: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("op").required(true).args(["remove", "recolor", "extract"])))]
struct EditArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    remove: Option<i32>,
    /// GID:R,G,B with components in [0, 1].
    #[arg(long)]
    recolor: Option<String>,
    #[arg(long)]
    extract: Option<i32>,
    /// Reassign groups first, leaving Gaussians whose top class
    /// probability is below this unassigned.
    #[arg(long)]
    min_confidence: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

const DEFAULT_SEED: u64 = 42;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Ok(threads) = std::env::var("GRADISEG_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: GRADISEG_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for bad input, 1 for failures inside a run.
fn exit_code(err: &anyhow::Error) -> u8 {
    use gradiseg::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::NonFiniteGradient(_) | E::Diverged { .. }) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<Usage>().is_some() => 2,
        None => 1,
    }
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn write_run_json(dir: &Path, value: serde_json::Value) -> anyhow::Result<()> {
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Gen { spec, out } => {
            let mut spec = match &spec {
                Some(path) => SceneSpec::load(path)?,
                None => SceneSpec::from_json(DEFAULT_SPEC)?,
            };
            if cli.seed.is_some() {
                spec.seed = seed;
            }
            let generated = generate(&spec)?;
            write_generated(&out, &generated)?;
            write_run_json(&out, json!({ "command": "gen", "seed": spec.seed, "spec": spec }))?;
            log::info!("wrote {} views to {}", generated.views.len(), out.display());
        }
        Command::Train { data, config, out } => {
            let mut cfg = match &config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            if cli.seed.is_some() || config.is_none() {
                cfg.seed = seed;
            }
            let cfg = cfg.resolved();
            cfg.validate()?;
            let dataset = load_dataset(&data)?;
            write_run_json(
                &out,
                json!({ "command": "train", "seed": cfg.seed, "data": data, "config": cfg }),
            )?;
            let result = train(&dataset, &cfg, Some(&out))?;
            log::info!(
                "trained {} gaussians; final held-out psnr {:.2} dB",
                result.cloud.len(),
                result.metrics.last().map_or(f64::NAN, |m| m.psnr_heldout)
            );
        }
        Command::Render(args) => {
            let (cloud, _) = load_scene(&args.scene)?;
            let dataset = load_dataset(&args.data)?;
            let view = dataset.view(args.view)?;
            let image = render_image(&cloud, &view.camera, dataset.manifest.background)?;
            write_ppm(&args.out, &image)?;
            write_run_json(parent(&args.out), json!({ "command": "render", "seed": seed, "scene": args.scene, "view": args.view }))?;
        }
        Command::Segment(args) => {
            let (cloud, head) = load_scene(&args.scene)?;
            let dataset = load_dataset(&args.data)?;
            let view = dataset.view(args.view)?;
            let mask = segment(&cloud, &head, &view.camera)?;
            write_pgm(&args.out, &mask)?;
            write_run_json(parent(&args.out), json!({ "command": "segment", "seed": seed, "scene": args.scene, "view": args.view }))?;
        }
        Command::Eval {
            scene,
            data,
            out,
            split,
            band,
        } => {
            let (cloud, head) = load_scene(&scene)?;
            let dataset = load_dataset(&data)?;
            let views = match split.as_str() {
                "test" => dataset.split(Split::Test),
                "train" => dataset.split(Split::Train),
                "all" => dataset.views.iter().collect(),
                other => return Err(usage(format!("unknown split {other:?}; expected test, train or all"))),
            };
            if band == Some(0) {
                return Err(usage("--band must be at least 1"));
            }
            let report = evaluate(&cloud, &head, &views, dataset.manifest.background, band)?;
            fs::write(&out, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", out.display()))?;
            write_run_json(parent(&out), json!({ "command": "eval", "seed": seed, "scene": scene, "data": data, "split": split }))?;
            log::info!("mIoU {:.4}  mBIoU {:.4}  PSNR {:.2} dB", report.miou, report.mbiou, report.psnr_mean);
        }
        Command::Edit(args) => {
            let (mut cloud, head) = load_scene(&args.scene)?;
            if let Some(p) = args.min_confidence {
                if !(0.0..=1.0).contains(&p) {
                    return Err(usage("--min-confidence must lie in [0, 1]"));
                }
                assign_groups_with_confidence(&mut cloud, &head, Some(p));
            }
            let edited = if let Some(gid) = args.remove {
                remove_group(&cloud, gid)
            } else if let Some(gid) = args.extract {
                extract_group(&cloud, gid)
            } else if let Some(spec) = &args.recolor {
                let (gid, rgb) = parse_recolor(spec)?;
                recolor_group(&cloud, gid, rgb)?
            } else {
                bail!(usage("one of --remove, --recolor, --extract is required"));
            };
            save_scene(&edited, &head, &args.out)?;
            write_run_json(
                parent(&args.out),
                json!({ "command": "edit", "seed": seed, "scene": args.scene, "remove": args.remove,
                        "extract": args.extract, "recolor": args.recolor, "min_confidence": args.min_confidence }),
            )?;
            log::info!("{} -> {} gaussians", cloud.len(), edited.len());
        }
    }
    Ok(())
}

fn parse_recolor(spec: &str) -> anyhow::Result<(i32, [f64; 3])> {
    let err = || usage(format!("--recolor expects GID:R,G,B, got {spec:?}"));
    let (gid, rgb) = spec.split_once(':').ok_or_else(err)?;
    let gid: i32 = gid.trim().parse().map_err(|_| err())?;
    let parts: Vec<f64> = rgb
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| err())?;
    let rgb: [f64; 3] = parts.try_into().map_err(|_| err())?;
    if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(usage("--recolor components must lie in [0, 1]"));
    }
    Ok((gid, rgb))
}
