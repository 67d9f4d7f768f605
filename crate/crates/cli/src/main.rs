//! `seedslam` command line: simulate ranges, run SLAM on detection files,
//! evaluate runs against ground truth, and export maps.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use manifest::RunManifest;
use seedslam::backend::{read_landmark_csv, read_trajectory_csv, write_landmark_csv, write_trajectory_csv};
use seedslam::detections::{load_detection_sequence, write_detection_sequence};
use seedslam::eval::{mean_fraction_mapped, write_aggregate_csv, RunReport};
use seedslam::postprocess::{read_ply, write_ply};
use seedslam::sim::{simulate, GroundTruth, SimConfig};
use seedslam::{run_slam, Error, PipelineConfig, PipelineOptions, PointCloud3D, Result};

const DETECTIONS: &str = "detections.jsonl";
const GROUND_TRUTH: &str = "ground_truth.json";
const TRAJECTORY: &str = "trajectory.csv";
const LANDMARKS: &str = "landmarks.csv";
const MAP: &str = "map.ply";
const REPORT: &str = "report.json";
const MANIFEST: &str = "manifest.json";
/// Map points within this distance of a seed count as a hit.
const MATCH_RADIUS_M: f64 = 0.005;

#[derive(Parser)]
#[command(name = "seedslam", version, about = "Object-level stereo SLAM for row-crop scenes")]
struct Cli {
    /// Log more (repeat for debug output). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic range: detections plus ground truth.
    Simulate(SimulateArgs),
    /// Run the SLAM pipeline on a detection file.
    Slam(SlamArgs),
    /// Score one or more run directories against ground truth.
    Eval(EvalArgs),
    /// Convert a landmark CSV into an ASCII PLY point cloud.
    ExportPly(ExportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulator config (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `rng_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SlamArgs {
    /// Detection sequence (JSON Lines).
    detections: PathBuf,
    /// Pipeline config (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Simulator ground truth; enables the error metrics in the report.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Batch-optimize every k-th frame instead of every frame.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    optimize_stride: u64,
    /// Overrides `post.variance_threshold_m2`.
    #[arg(long)]
    variance_threshold: Option<f64>,
    /// Recorded in the manifest; the pipeline itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-frame stereo and temporal assignment CSVs.
    #[arg(long)]
    dump_assignments: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directories written by `slam`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Ground truth for a single run; otherwise the path recorded in each
    /// run's manifest is used when present.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Aggregate CSV, one row per run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Landmark CSV written by `slam`.
    landmarks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Slam(a) => cmd_slam(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportPly(a) => cmd_export_ply(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = match &a.config {
        Some(p) => SimConfig::load(p)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.rng_seed = seed;
    }
    create_dir(&a.out)?;
    let (frames, gt) = simulate(&cfg)?;
    let (det, truth) = (a.out.join(DETECTIONS), a.out.join(GROUND_TRUTH));
    write_detection_sequence(&det, &frames)?;
    gt.write_json(&truth)?;

    let mut m = RunManifest::new("simulate", to_value(&cfg));
    if let Some(p) = a.config {
        m.inputs.insert("config".into(), p);
    }
    m.outputs.insert("detections".into(), det);
    m.outputs.insert("ground_truth".into(), truth);
    m.seeds.insert("rng_seed".into(), cfg.rng_seed);
    m.timings_s.insert("simulate".into(), start.elapsed().as_secs_f64());
    m.write_atomic(&a.out.join(MANIFEST))?;
    log::info!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn cmd_slam(a: SlamArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(t) = a.variance_threshold {
        cfg.post.variance_threshold_m2 = t;
        cfg.validate()?;
    }
    let ground_truth = a.ground_truth.as_deref().map(GroundTruth::read_json).transpose()?;
    let clock = Instant::now();
    let frames = load_detection_sequence(&a.detections, &cfg.rig)?;
    let load_s = clock.elapsed().as_secs_f64();
    create_dir(&a.out)?;

    let opts = PipelineOptions {
        optimize_stride: a.optimize_stride as usize,
    };
    let mut out = run_slam(&frames, &cfg, &opts)?;
    if let Some(msg) = &out.failure_message {
        log::warn!("tracking stopped early: {msg}");
    }
    if let Some(gt) = &ground_truth {
        out.report.attach_ground_truth(&out.trajectory, &out.map, gt, MATCH_RADIUS_M)?;
    }

    let clock = Instant::now();
    let paths: BTreeMap<String, PathBuf> = [
        ("trajectory", TRAJECTORY),
        ("landmarks", LANDMARKS),
        ("map", MAP),
        ("report", REPORT),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), a.out.join(f)))
    .collect();
    write_trajectory_csv(&paths["trajectory"], &out.trajectory)?;
    write_landmark_csv(&paths["landmarks"], &out.landmarks)?;
    write_ply(&paths["map"], &out.map)?;
    out.report.write_json(&paths["report"])?;
    let mut outputs = paths;
    if a.dump_assignments {
        let dir = a.out.join("assignments");
        create_dir(&dir)?;
        for ((frame, stereo), temporal) in out
            .trajectory
            .frames
            .iter()
            .zip(&out.stereo_assignments)
            .zip(&out.temporal_assignments)
        {
            stereo.write_csv(&dir.join(format!("stereo_{frame:05}.csv")))?;
            if *frame != out.trajectory.frames[0] {
                temporal.write_csv(&dir.join(format!("temporal_{frame:05}.csv")))?;
            }
        }
        outputs.insert("assignments".into(), dir);
    }

    let mut m = RunManifest::new("slam", to_value(&cfg));
    m.inputs.insert("detections".into(), a.detections);
    if let Some(p) = a.config {
        m.inputs.insert("config".into(), p);
    }
    if let Some(p) = a.ground_truth {
        m.inputs.insert("ground_truth".into(), p);
    }
    m.outputs = outputs;
    m.seeds.insert("seed".into(), a.seed);
    m.seeds.insert("optimize_stride".into(), a.optimize_stride);
    let t = out.timings;
    m.timings_s.extend([
        ("load".to_string(), load_s),
        ("association".to_string(), t.association_s),
        ("tracking".to_string(), t.tracking_s),
        ("optimization".to_string(), t.optimization_s),
        ("postprocess".to_string(), t.postprocess_s),
        ("write".to_string(), clock.elapsed().as_secs_f64()),
    ]);
    m.write_atomic(&a.out.join(MANIFEST))?;
    println!(
        "{} frames tracked, {} landmarks, {} map points, failure: {}",
        out.trajectory.len(),
        out.landmarks.len(),
        out.map.len(),
        out.report.failure_reason
    );
    Ok(())
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Io {
            path: p,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("run artifact {name} missing")),
        })
    }
}

/// Ground-truth path recorded by `slam` in the run manifest.
fn manifest_ground_truth(dir: &Path) -> Option<PathBuf> {
    let text = std::fs::read_to_string(dir.join(MANIFEST)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v["inputs"]["ground_truth"].as_str().map(PathBuf::from)
}

fn evaluate_run(dir: &Path, gt_path: Option<&Path>) -> Result<RunReport> {
    let trajectory = read_trajectory_csv(&require(dir, TRAJECTORY)?)?;
    let map: PointCloud3D = read_ply(&require(dir, MAP)?)?;
    let mut report = RunReport::read_json(&require(dir, REPORT)?)?;
    match gt_path {
        Some(p) => {
            let gt = GroundTruth::read_json(p)?;
            report.attach_ground_truth(&trajectory, &map, &gt, MATCH_RADIUS_M)?;
        }
        None => {
            log::warn!("{}: no ground truth, error metrics omitted", dir.display());
            report.range_length_m = None;
            report.fraction_mapped = None;
            report.ate_rmse_m = None;
            report.landmark_precision = None;
            report.landmark_recall = None;
            report.max_distance_mapped_m = seedslam::eval::estimated_arc_length(&trajectory);
        }
    }
    report.n_map_points = map.len();
    Ok(report)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.ground_truth.is_some() && a.runs.len() > 1 {
        return Err(Error::Validation(
            "--ground-truth applies to a single run; multiple runs use their manifests".into(),
        ));
    }
    let mut rows = Vec::new();
    for dir in &a.runs {
        let gt = a.ground_truth.clone().or_else(|| manifest_ground_truth(dir));
        let report = evaluate_run(dir, gt.as_deref())?;
        report.write_json(&dir.join("eval.json"))?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push((name, report));
    }
    write_aggregate_csv(&a.out, &rows)?;
    let reports: Vec<RunReport> = rows.into_iter().map(|r| r.1).collect();
    match mean_fraction_mapped(&reports) {
        Some(f) => println!("{} runs, mean fraction mapped {f:.3}", reports.len()),
        None => println!("{} runs, no ground truth", reports.len()),
    }
    Ok(())
}

fn cmd_export_ply(a: ExportArgs) -> Result<()> {
    let rows = read_landmark_csv(&a.landmarks)?;
    let cloud = PointCloud3D::world(rows.iter().map(|r| r.position).collect());
    write_ply(&a.out, &cloud)?;
    println!("{} points written to {}", cloud.len(), a.out.display());
    Ok(())
}
