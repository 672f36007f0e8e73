use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use dynfusion::eval::{ate_rmse, rpe_rmse};
use dynfusion::image::Image;
use dynfusion::io::{read_trajectory, write_depth_png, write_gray8_png, write_indexed_png, write_trajectory, TumSequence};
use dynfusion::pipeline::{FrameReport, PipelineConfig, Slam};
use dynfusion::synth::SceneScript;

#[derive(Parser)]
#[command(name = "dynfusion", version, about = "Dense RGB-D SLAM in dynamic scenes with per-object volumes")]
struct Cli {
    /// Print the full default configuration and exit.
    #[arg(long)]
    print_default_config: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a dataset directory.
    Run(RunArgs),
    /// Compare an estimated trajectory with ground truth.
    Eval {
        estimate: PathBuf,
        groundtruth: PathBuf,
    },
    /// Render a scene script to the dataset layout.
    Synth {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Fixed-order reductions (always on; recorded in the manifest).
    #[arg(long)]
    deterministic: bool,
    /// Write association weight images per frame.
    #[arg(long)]
    dump_association: bool,
    /// Write rendered id and depth images per frame.
    #[arg(long)]
    dump_render: bool,
}

#[derive(Serialize)]
struct TimingSummary {
    frames: usize,
    mean_ms: f64,
    median_ms: f64,
    p90_ms: f64,
    max_ms: f64,
}

fn summarize(mut ms: Vec<f64>) -> Option<TimingSummary> {
    if ms.is_empty() {
        return None;
    }
    ms.sort_by(f64::total_cmp);
    let pick = |q: f64| ms[((q * ms.len() as f64).ceil() as usize).clamp(1, ms.len()) - 1];
    Some(TimingSummary {
        frames: ms.len(),
        mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
        median_ms: pick(0.5),
        p90_ms: pick(0.9),
        max_ms: ms[ms.len() - 1],
    })
}

#[derive(Serialize)]
struct Manifest {
    tool: String,
    version: String,
    dataset: PathBuf,
    output: PathBuf,
    started_unix: u64,
    threads: usize,
    deterministic: bool,
    config: PipelineConfig,
    status: String,
    frames: usize,
    frame_ms: Vec<f64>,
    detection_frames: Option<TimingSummary>,
    tracking_frames: Option<TimingSummary>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            PipelineConfig::from_toml(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

fn dump_frame(slam: &Slam, report: &FrameReport, out: &Path, assoc: bool, render: bool) -> Result<()> {
    let stem = format!("{:06}", report.index);
    if assoc {
        if let Some(field) = slam.last_association() {
            for &id in field.model_ids() {
                let w = field.weights_or_zero(id);
                let img: Image<u8> = w.map(|q| (q.clamp(0.0, 1.0) * 255.0).round() as u8);
                write_gray8_png(&out.join("association").join(format!("{stem}_model{id}.png")), &img)?;
            }
        }
    }
    if render {
        let r = slam.render_scene();
        let ids: Image<u8> = r.model_id.map(|m| m.map_or(0, |id| (id + 1).min(255) as u8));
        write_indexed_png(&out.join("render").join(format!("{stem}_ids.png")), &ids)?;
        write_depth_png(&out.join("render").join(format!("{stem}_depth.png")), &r.depth, 1000.0)?;
    }
    Ok(())
}

fn cmd_run(args: &RunArgs, threads: usize) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    config.deterministic |= args.deterministic;
    let seq = TumSequence::open(&args.dataset).with_context(|| format!("opening dataset {}", args.dataset.display()))?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        dataset: args.dataset.clone(),
        output: args.out.clone(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        threads,
        deterministic: config.deterministic,
        config: config.clone(),
        status: "running".into(),
        frames: seq.len(),
        frame_ms: Vec::new(),
        detection_frames: None,
        tracking_frames: None,
    };
    let manifest_path = args.out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    let mut slam = Slam::new(config, seq.intrinsics)?;
    let reports_path = args.out.join("frames.jsonl");
    let mut reports = BufWriter::new(File::create(&reports_path).with_context(|| format!("creating {}", reports_path.display()))?);
    let registry_path = args.out.join("objects.jsonl");
    let mut registry = BufWriter::new(File::create(&registry_path).with_context(|| format!("creating {}", registry_path.display()))?);
    let (mut det_ms, mut trk_ms) = (Vec::new(), Vec::new());
    for frame in seq.frames() {
        let frame = frame?;
        let t = Instant::now();
        let report = slam.process_frame(&frame)?;
        let elapsed = t.elapsed().as_secs_f64() * 1e3;
        manifest.frame_ms.push(elapsed);
        if report.is_detection_frame() {
            det_ms.push(elapsed);
        } else {
            trk_ms.push(elapsed);
        }
        serde_json::to_writer(&mut reports, &report)?;
        writeln!(reports)?;
        #[derive(Serialize)]
        struct Line<'a> {
            index: usize,
            timestamp: f64,
            objects: &'a [dynfusion::pipeline::RegistryEntry],
        }
        serde_json::to_writer(&mut registry, &Line { index: report.index, timestamp: report.timestamp, objects: &slam.registry() })?;
        writeln!(registry)?;
        if args.dump_association || args.dump_render {
            dump_frame(&slam, &report, &args.out, args.dump_association, args.dump_render)?;
        }
        if report.index % 30 == 0 {
            info!(
                "frame {}/{}: {:.0} ms, {} object(s)",
                report.index + 1,
                seq.len(),
                elapsed,
                report.live_objects.len()
            );
        }
    }
    reports.flush()?;
    registry.flush()?;

    write_trajectory(&args.out.join("camera.txt"), slam.camera_track())?;
    for (id, track) in slam.object_tracks() {
        write_trajectory(&args.out.join("objects").join(format!("object_{id}.txt")), track)?;
    }
    let labels: Vec<_> = slam
        .object_tracks()
        .keys()
        .map(|id| serde_json::json!({"id": id, "label": slam.object_label(*id)}))
        .collect();
    write_json(&args.out.join("objects").join("labels.json"), &labels)?;

    manifest.status = "complete".into();
    manifest.detection_frames = summarize(det_ms);
    manifest.tracking_frames = summarize(trk_ms);
    write_json(&manifest_path, &manifest)?;
    info!("wrote results to {}", args.out.display());
    Ok(())
}

fn cmd_eval(est: &Path, gt: &Path) -> Result<()> {
    let e = read_trajectory(est)?;
    let g = read_trajectory(gt)?;
    let ate = ate_rmse(&e, &g)?;
    println!("ATE-RMSE: {:.2} cm", ate * 100.0);
    match rpe_rmse(&e, &g, 1.0) {
        Ok(rpe) => println!("RPE-RMSE: {:.2} cm/s", rpe * 100.0),
        Err(err) => {
            warn!("relative pose error unavailable: {err}");
            println!("RPE-RMSE: n/a");
        }
    }
    Ok(())
}

fn cmd_synth(scene: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(scene).with_context(|| format!("reading scene {}", scene.display()))?;
    let script = SceneScript::from_toml(&text).map_err(|e| anyhow::anyhow!("scene {}: {e}", scene.display()))?;
    script.materialize(out)?;
    info!("wrote {} frames to {}", script.frame_count, out.display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = real_main(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main(cli: Cli) -> Result<()> {
    if cli.print_default_config {
        print!("{}", PipelineConfig::default().to_toml());
        return Ok(());
    }
    let threads = cli.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring worker threads")?;
    let threads = rayon::current_num_threads();
    match cli.command {
        Some(Command::Run(args)) => cmd_run(&args, threads),
        Some(Command::Eval { estimate, groundtruth }) => cmd_eval(&estimate, &groundtruth),
        Some(Command::Synth { scene, out }) => cmd_synth(&scene, &out),
        None => bail!("no command given (try --help)"),
    }
}
