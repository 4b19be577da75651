//! `crowdcast`: simulate crowds, synthesise density maps, estimate flow,
//! train and run the forecaster, and score predictions.
//!
//! Exit codes: 0 on success, 1 when an input or a check fails, 2 on a usage
//! error. Logs go to standard error.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crowdcast::flow::{baseline_flow_density, estimate_flow, warp_density, FlowParams};
use crowdcast::forecaster::{self, load_model, save_model, DatasetConfig, Model, ModelConfig, TrainConfig};
use crowdcast::grid::{read_flow_auto, write_flow, write_grid};
use crowdcast::metrics::evaluate_maps;
use crowdcast::simulator::{self, Scene, TrajectoryLog};
use crowdcast::synth::{density_file_name, sample_heads, synth_density, KernelConfig};
use crowdcast::{gradcheck, GridFormat};
use serde::Deserialize;

use manifest::{base_dir, read_density, read_frame, WindowManifest};

#[derive(Parser)]
#[command(name = "crowdcast", version, about = "Crowd density forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pedestrian simulator and write a trajectory CSV (t,id,x,y)
    Simulate(SimulateArgs),
    /// Synthesise one density map per sampling interval from a trajectory
    Synth(SynthArgs),
    /// Simulate a scene and write rendered frames, density maps, warps and window manifests
    Dataset(DatasetArgs),
    /// Estimate dense optical flow between two frames
    Flow(FlowArgs),
    /// Forward-warp a density map along a flow field
    Warp(WarpArgs),
    /// Train a forecaster on the window manifests in a directory
    Train(TrainArgs),
    /// Predict the next density map for one window manifest
    Predict(PredictArgs),
    /// Score predicted density maps against ground truth with patch-wise errors
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene JSON file
    #[arg(long)]
    scene: PathBuf,
    /// Random seed for arrivals and desired speeds
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulated time in seconds
    #[arg(long)]
    duration: f64,
    /// Output trajectory CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KernelArgs {
    /// Spread factor: sigma = beta * mean distance to the k nearest heads
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    /// Nearest neighbours averaged for the spread
    #[arg(long, default_value_t = 3)]
    knn: usize,
    /// Kernel support radius in units of sigma
    #[arg(long, default_value_t = 4.0)]
    truncation: f64,
    /// Spread in pixels for heads with fewer than knn neighbours
    #[arg(long, default_value_t = 4.0)]
    sigma_fallback: f64,
    /// Keep the truncated kernel unnormalised (mass near borders is lost)
    #[arg(long)]
    no_renormalize: bool,
}

impl KernelArgs {
    fn config(&self) -> KernelConfig {
        KernelConfig {
            beta: self.beta,
            knn: self.knn,
            truncation: self.truncation,
            sigma_fallback: self.sigma_fallback,
            renormalize: !self.no_renormalize,
        }
    }
}

#[derive(Args)]
struct FormatArgs {
    /// Write grids in the binary format instead of text
    #[arg(long)]
    binary: bool,
}

impl FormatArgs {
    fn format(&self) -> GridFormat {
        if self.binary {
            GridFormat::Binary
        } else {
            GridFormat::Text
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Scene JSON file (homography and image size)
    #[arg(long)]
    scene: PathBuf,
    /// Trajectory CSV written by `simulate`
    #[arg(long)]
    traj: PathBuf,
    /// Sampling interval in seconds; a multiple of the simulator step
    #[arg(long)]
    dt: f64,
    /// Output directory for d_<ms>.dgrid files and index.csv
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    format: FormatArgs,
}

#[derive(Args)]
struct DatasetArgs {
    /// Scene JSON file
    #[arg(long)]
    scene: PathBuf,
    /// Simulation seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset config JSON (frames, interval, duration, warmup, stride, kernel, render, flow); defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    format: FormatArgs,
}

#[derive(Args)]
struct FlowParamArgs {
    /// Smoothness weight
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    /// Solver iterations per pyramid level
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    /// Pyramid levels
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Gaussian pre-smoothing of the frames in pixels
    #[arg(long, default_value_t = 1.0)]
    presmooth: f64,
}

impl FlowParamArgs {
    fn params(&self) -> FlowParams {
        FlowParams {
            alpha: self.alpha,
            iterations: self.iterations,
            levels: self.levels,
            presmooth: self.presmooth,
        }
    }
}

#[derive(Args)]
struct FlowArgs {
    /// Earlier frame (DGRID)
    #[arg(long)]
    prev: PathBuf,
    /// Later frame (DGRID)
    #[arg(long)]
    next: PathBuf,
    /// Output flow field (DFLOW)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: FlowParamArgs,
    #[command(flatten)]
    format: FormatArgs,
}

#[derive(Args)]
struct WarpArgs {
    /// Density map to warp (DGRID)
    #[arg(long)]
    density: PathBuf,
    /// Flow field (DFLOW)
    #[arg(long)]
    flow: PathBuf,
    /// Output density map (DGRID)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    format: FormatArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON: {"model": {...}, "train": {...}}; missing fields take defaults
    #[arg(long)]
    config: PathBuf,
    /// Directory of window manifests (*.json), each with a target
    #[arg(long)]
    data: PathBuf,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Also write the loss curve (step,loss,lr) to this CSV
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Model file written by `train`
    #[arg(long)]
    model: PathBuf,
    /// Window manifest JSON
    #[arg(long)]
    window: PathBuf,
    /// Output density map (DGRID)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: FlowParamArgs,
    #[command(flatten)]
    format: FormatArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Glob of predicted density maps; sorted by path
    #[arg(long)]
    pred: String,
    /// Glob of ground-truth density maps, paired with predictions in sorted order
    #[arg(long)]
    gt: String,
    /// Patch counts per map, comma separated (each a square of a power of two)
    #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
    k: Vec<usize>,
    /// Output report JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random inputs and weights
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Synth(a) => synth(&a),
        Command::Dataset(a) => dataset(&a),
        Command::Flow(a) => flow(&a),
        Command::Warp(a) => warp(&a),
        Command::Train(a) => train(&a),
        Command::Predict(a) => predict(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Gradcheck(a) => run_gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain joined by ": ", skipping causes a message already ends with.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let scene = Scene::read(&a.scene)?;
    let log = simulator::run(&scene, a.seed, a.duration)?;
    write_file(&a.out, log.to_csv())?;
    println!("agents: {}", log.agent_ids().len());
    println!("records: {}", log.records.len());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let scene = Scene::read(&a.scene)?;
    let text = fs::read_to_string(&a.traj).with_context(|| format!("reading {}", a.traj.display()))?;
    let log = TrajectoryLog::from_csv(&text, Some(scene.config.dt))?;
    let cfg = a.kernel.config();
    cfg.validate()?;
    let samples = sample_heads(&log, &scene, a.dt)?;
    create_dir(&a.out_dir)?;
    let mut index = String::from("timestamp_ms,count,path\n");
    for (t, heads) in &samples {
        let d = synth_density(heads, scene.image.height, scene.image.width, &cfg)?;
        let name = density_file_name(*t);
        write_grid(d.grid(), a.out_dir.join(&name), a.format.format())?;
        index.push_str(&format!("{},{},{}\n", (t * 1000.0).round() as u64, heads.len(), name));
    }
    write_file(&a.out_dir.join("index.csv"), index)?;
    eprintln!("wrote {} density maps to {}", samples.len(), a.out_dir.display());
    Ok(())
}

fn dataset(a: &DatasetArgs) -> Result<()> {
    let scene = Scene::read(&a.scene)?;
    let cfg: DatasetConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => DatasetConfig::default(),
    };
    if cfg.frames < 2 || cfg.stride == 0 {
        bail!("dataset needs frames >= 2 and stride >= 1");
    }
    cfg.flow.validate()?;
    let series = forecaster::simulated_series(&scene, a.seed, &cfg)?;
    create_dir(&a.out_dir)?;
    let format = a.format.format();
    let ms = |t: f64| (t * 1000.0).round() as u64;
    let mut frame_names = Vec::new();
    let mut density_names = Vec::new();
    for ((t, f), d) in series.times.iter().zip(&series.frames).zip(&series.densities) {
        let (fname, dname) = (PathBuf::from(format!("f_{}.dgrid", ms(*t))), PathBuf::from(density_file_name(*t)));
        write_grid(f.grid(), a.out_dir.join(&fname), format)?;
        write_grid(d.grid(), a.out_dir.join(&dname), format)?;
        frame_names.push(fname);
        density_names.push(dname);
    }
    let n = cfg.frames;
    let starts = forecaster::window_starts(series.frames.len(), &cfg);
    for (w, &i) in starts.iter().enumerate() {
        let last = i + n - 1;
        let wname = PathBuf::from(format!("w_{}.dgrid", ms(series.times[last])));
        let path = a.out_dir.join(&wname);
        if !path.exists() {
            let (f, d) = (&series.frames, &series.densities);
            let warped = baseline_flow_density(&f[last - 1], &f[last], &d[last], &cfg.flow)?;
            write_grid(warped.grid(), &path, format)?;
        }
        let m = WindowManifest {
            frames: frame_names[i..i + n].to_vec(),
            densities: density_names[i..i + n].to_vec(),
            warped: Some(wname),
            target: Some(density_names[i + n].clone()),
        };
        write_file(&a.out_dir.join(format!("window_{w:04}.json")), m.to_json())?;
    }
    eprintln!("wrote {} samples and {} windows to {}", series.times.len(), starts.len(), a.out_dir.display());
    Ok(())
}

fn flow(a: &FlowArgs) -> Result<()> {
    let f1 = read_frame(&a.prev)?;
    let f2 = read_frame(&a.next)?;
    let field = estimate_flow(&f1, &f2, &a.params.params())?;
    write_flow(&field, &a.out, a.format.format())?;
    Ok(())
}

fn warp(a: &WarpArgs) -> Result<()> {
    let d = read_density(&a.density)?;
    let field = read_flow_auto(&a.flow).with_context(|| format!("reading flow {}", a.flow.display()))?;
    let out = warp_density(&d, &field)?;
    write_grid(out.grid(), &a.out, a.format.format())?;
    Ok(())
}

fn sorted_paths(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut paths = glob::glob(pattern)
        .with_context(|| format!("bad glob {pattern:?}"))?
        .collect::<Result<Vec<_>, _>>()?;
    paths.sort();
    Ok(paths)
}

fn train(a: &TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg: TrainFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    cfg.train.validate()?;
    let mut model = Model::new(cfg.model)?;
    let flow = FlowParams::default();
    let manifests = sorted_paths(&a.data.join("*.json").to_string_lossy())?;
    let mut data = Vec::with_capacity(manifests.len());
    for path in &manifests {
        let window = WindowManifest::read(path)?.load(&base_dir(path), Some(&flow))?;
        if window.target.is_none() {
            bail!("manifest {} has no target", path.display());
        }
        window.validate(model.config()).with_context(|| format!("manifest {}", path.display()))?;
        data.push(window);
    }
    eprintln!("training on {} windows for {} steps", data.len(), cfg.train.steps);
    let records = forecaster::train(&mut model, &data, &cfg.train, |r| {
        if r.step % 100 == 0 {
            eprintln!("step {} loss {:.6e} lr {:.3e}", r.step, r.loss, r.lr);
        }
    })?;
    save_model(&model, &a.out)?;
    if let Some(p) = &a.loss_csv {
        write_file(p, forecaster::loss_curve_csv(&records))?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let m = WindowManifest::read(&a.window)?;
    let flow = a.params.params();
    let use_flow = model.config().use_flow_residual.then_some(&flow);
    let window = m.load(&base_dir(&a.window), use_flow)?;
    window.validate(model.config())?;
    let d = model.predict(&window)?;
    write_grid(d.grid(), &a.out, a.format.format())?;
    eprintln!("predicted count {:.3}", d.count());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let preds = sorted_paths(&a.pred)?;
    let gts = sorted_paths(&a.gt)?;
    if preds.is_empty() || preds.len() != gts.len() {
        bail!("{} predictions and {} ground-truth maps matched; need equal non-zero counts", preds.len(), gts.len());
    }
    let preds = preds.iter().map(|p| read_density(p)).collect::<Result<Vec<_>>>()?;
    let gts = gts.iter().map(|p| read_density(p)).collect::<Result<Vec<_>>>()?;
    let report = evaluate_maps(&preds, &gts, &a.k)?;
    write_file(&a.out, report.to_json() + "\n")?;
    for s in &report.results {
        eprintln!("K={:<4} P-MAE {:.6} P-MSE {:.6}", s.k, s.pmae, s.pmse);
    }
    Ok(())
}

/// Acceptance thresholds for the finite-difference suite.
const GRAD_PASS_RATE: f64 = 0.99;
const GRAD_MAX_REL_ERR: f64 = 1e-3;

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let reports = gradcheck::run_suite(a.seed)?;
    let (mut checked, mut passed, mut worst) = (0, 0, 0.0f64);
    for r in &reports {
        println!("{:<28} {:>6}/{:<6} max rel err {:.2e}", r.name, r.passed, r.checked, r.max_rel_err);
        checked += r.checked;
        passed += r.passed;
        worst = worst.max(r.max_rel_err);
    }
    let rate = if checked == 0 { 1.0 } else { passed as f64 / checked as f64 };
    println!("total {passed}/{checked} ({:.2}%), max rel err {worst:.2e}", 100.0 * rate);
    if rate < GRAD_PASS_RATE || !(worst < GRAD_MAX_REL_ERR) {
        bail!("gradient check failed");
    }
    Ok(())
}
