//! The `tinynav` command-line tool.
//!
//! Exit codes: 0 on success, 1 when flags or input files are invalid, 2 when
//! a runtime step fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tinynav_core::eval::{eval_report, gradcam, left_mass_fraction};
use tinynav_core::model::Head;
use tinynav_core::pipeline::{build_windows, shuffle_split, Rotation, DEFAULT_SPLIT};
use tinynav_core::protocol::{bin_4x4, StreamDecoder};
use tinynav_core::quant::{calibrate, fidelity_report, paired_outputs, QuantModel};
use tinynav_core::sim::{run_closed_loop, ExpertPolicy, ModelPolicy, NoiseConfig, Policy, RunConfig};
use tinynav_core::train::{evaluate, train_with_progress, TrainConfig};
use tinynav_core::FloatModel;

use crate::bench::{bench, Engine};
use crate::error::Error;
use crate::formats;
use crate::service::{serve, Session};
use crate::world::resolve_world;

#[derive(Debug, Parser)]
#[command(name = "tinynav", version, about = "Depth-camera navigation: decode, train, quantize, evaluate, simulate.")]
pub struct Cli {
    /// Print a JSON report instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode a raw sensor capture into a .tnd frame dump.
    Decode(DecodeArgs),
    /// Build a windowed, split .tnds dataset from a directory of .tnrec recordings.
    Dataset(DatasetArgs),
    /// Train the float model on a .tnds dataset.
    Train(TrainArgs),
    /// Calibrate an INT8 model on the training side of a dataset.
    Quantize(QuantizeArgs),
    /// Correlation and distribution report on the held-out split.
    Eval(EvalArgs),
    /// Grad-CAM map for one dataset window, as PGM plus JSON.
    Gradcam(GradcamArgs),
    /// Single-inference latency.
    Bench(BenchArgs),
    /// Simulator runs and the teleop service.
    #[command(subcommand)]
    Sim(SimCommand),
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Raw capture: concatenated wire bytes.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reduce 100x100 frames to 25x25.
    #[arg(long)]
    pub bin4x4: bool,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Directory holding .tnrec files.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "TINYNAV_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Add a mirrored copy of every training window.
    #[arg(long)]
    pub flip: bool,
    /// Clockwise rotation applied to every frame.
    #[arg(long, default_value_t = 0, value_parser = parse_rotation)]
    pub rotation: u32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub ds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: usize,
    #[arg(long, env = "TINYNAV_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Write the per-epoch training report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub ds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "float")]
    pub float: PathBuf,
    #[arg(long)]
    pub quant: Option<PathBuf>,
    #[arg(long)]
    pub ds: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HeadArg {
    Steering,
    Throttle,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Head {
        match h {
            HeadArg::Steering => Head::Steering,
            HeadArg::Throttle => Head::Throttle,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub ds: PathBuf,
    /// Window position in the dataset file.
    #[arg(long)]
    pub index: usize,
    #[arg(long, value_enum)]
    pub head: HeadArg,
    /// PGM output; the raw map goes next to it as JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EngineArg {
    Float,
    Int8,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Engine {
        match e {
            EngineArg::Float => Engine::Float,
            EngineArg::Int8 => Engine::Int8,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// .tnwt for the float engine, .tnqt for int8.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub engine: EngineArg,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
}

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Closed-loop run of a policy in a world.
    Run(SimRunArgs),
    /// Websocket teleop service.
    Serve(SimServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Expert,
    Float,
    Int8,
}

#[derive(Debug, Args)]
pub struct SimRunArgs {
    /// World JSON file, or a bundled world name (oval, maze, deadend).
    #[arg(long)]
    pub world: String,
    #[arg(long, value_enum)]
    pub policy: PolicyArg,
    /// Weights for the float or int8 policy.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 60.0)]
    pub seconds: f64,
    /// Save the drive as a .tnrec recording.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long = "laps-target")]
    pub laps_target: Option<u32>,
    #[arg(long, env = "TINYNAV_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Pixel noise plus held steering offsets, as used for dataset drives.
    #[arg(long)]
    pub noise: bool,
}

#[derive(Debug, Args)]
pub struct SimServeArgs {
    #[arg(long)]
    pub world: String,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, env = "TINYNAV_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Preload float weights for autopilot_float.
    #[arg(long)]
    pub float: Option<PathBuf>,
    /// Preload an int8 model for autopilot_int8.
    #[arg(long)]
    pub quant: Option<PathBuf>,
}

fn parse_rotation(s: &str) -> Result<u32, String> {
    let deg: u32 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    Rotation::from_degrees(deg).map(|_| deg).map_err(|_| "rotation must be 0, 90, 180 or 270".to_string())
}

/// A failed invocation: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: if e.is_input_error() { 1 } else { 2 }, message: e.to_string() }
    }
}

impl From<tinynav_core::Error> for Failure {
    fn from(e: tinynav_core::Error) -> Self {
        Error::from(e).into()
    }
}

/// Text for people, JSON for `--json`.
pub struct Report {
    pub text: String,
    pub json: Value,
}

type Outcome = Result<Report, Failure>;

/// Parses `args` and runs the subcommand; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    let json = cli.json;
    match execute(cli.command, json, err) {
        Ok(report) => {
            if json {
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&report.json).expect("report serializes"));
            } else {
                let _ = write!(out, "{}", report.text);
            }
            0
        }
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn execute(command: Command, json: bool, err: &mut dyn Write) -> Outcome {
    match command {
        Command::Decode(a) => decode(a),
        Command::Dataset(a) => dataset(a),
        Command::Train(a) => train(a, json, err),
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Gradcam(a) => gradcam_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Sim(SimCommand::Run(a)) => sim_run(a),
        Command::Sim(SimCommand::Serve(a)) => sim_serve(a, err),
    }
}

fn require_file(path: &Path, flag: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::invalid(format!("{flag} {}: no such file", path.display())))
    }
}

fn decode(a: DecodeArgs) -> Outcome {
    require_file(&a.input, "--in")?;
    let bytes = std::fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let mut decoder = StreamDecoder::new();
    let mut frames = Vec::new();
    for chunk in bytes.chunks(4096) {
        decoder.feed_into(chunk, &mut frames);
    }
    let stats = decoder.stats();
    if a.bin4x4 {
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.rows != 100 || f.cols != 100) {
            return Err(Failure::invalid(format!("--bin4x4: frame {i} is {}x{}, not 100x100", f.rows, f.cols)));
        }
        frames = frames.iter().map(bin_4x4).collect::<Result<_, _>>()?;
    }
    formats::save_tnd(&a.out, &frames).map_err(runtime)?;
    Ok(Report {
        text: format!(
            "decoded {} frames ({} checksum failures, {} malformed, {} resyncs, {} bytes discarded) -> {}\n",
            frames.len(),
            stats.checksum_failures,
            stats.malformed,
            stats.resyncs,
            stats.bytes_discarded,
            a.out.display()
        ),
        json: json!({ "frames": frames.len(), "stats": stats, "out": a.out }),
    })
}

/// Output-side failures are runtime errors even when the path is missing.
fn runtime(e: Error) -> Failure {
    Failure { code: 2, message: e.to_string() }
}

fn dataset(a: DatasetArgs) -> Outcome {
    if !a.input.is_dir() {
        return Err(Failure::invalid(format!("--in {}: not a directory", a.input.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.input)
        .map_err(|e| Error::io(&a.input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tnrec"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::invalid(format!("--in {}: no .tnrec recordings", a.input.display())));
    }
    let rotation = Rotation::from_degrees(a.rotation)?;
    let mut windows = Vec::new();
    for (id, path) in paths.iter().enumerate() {
        let rec = formats::load_recording(path)?;
        let w = build_windows(&rec, id as u32, rotation)
            .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
        windows.extend(w);
    }
    let base = windows.len();
    let split = shuffle_split(windows, a.seed, DEFAULT_SPLIT, a.flip).map_err(|e| Failure::invalid(e.to_string()))?;
    let all = formats::split_file_order(&split);
    formats::save_dataset(&a.out, &all).map_err(runtime)?;
    Ok(Report {
        text: format!(
            "{} recordings, {base} windows -> train {} test {} ({} written) -> {}\n",
            paths.len(),
            split.train.len(),
            split.test.len(),
            all.len(),
            a.out.display()
        ),
        json: json!({
            "recordings": paths.len(),
            "windows": base,
            "train": split.train.len(),
            "test": split.test.len(),
            "written": all.len(),
            "out": a.out,
        }),
    })
}

fn load_split(path: &Path, seed: u64) -> Result<tinynav_core::pipeline::SplitDataset, Failure> {
    require_file(path, "--ds")?;
    let windows = formats::load_dataset(path)?;
    formats::split_from_file(windows, seed).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn train(a: TrainArgs, json: bool, err: &mut dyn Write) -> Outcome {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| Failure::invalid(e.to_string()))?;
    let split = load_split(&a.ds, a.seed)?;
    if split.train.is_empty() {
        return Err(Failure::invalid(format!("--ds {}: no training windows", a.ds.display())));
    }
    let start = Instant::now();
    let (model, mut report) = train_with_progress(&FloatModel::init(a.seed), &split, &cfg, |e, r| {
        if !json {
            let _ = writeln!(
                err,
                "epoch {:>3}  train {:.5}  val {:.5}  ({:.1}s)",
                e + 1,
                r.train_loss[e],
                r.val_loss[e],
                start.elapsed().as_secs_f64()
            );
        }
    })
    .map_err(|e| Failure { code: 2, message: e.to_string() })?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    formats::save_weights(&a.out, &model).map_err(runtime)?;
    if let Some(path) = &a.report {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, text).map_err(|e| runtime(Error::io(path, e)))?;
    }
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    Ok(Report {
        text: format!(
            "trained {} epochs on {} windows in {:.1}s: val loss {:.5} (steering mse {:.5}, throttle mse {:.5}) -> {}\n",
            a.epochs,
            split.train.len(),
            report.wall_time_s,
            last(&report.val_loss),
            last(&report.val_steering_mse),
            last(&report.val_throttle_mse),
            a.out.display()
        ),
        json: json!({ "report": report, "out": a.out }),
    })
}

fn load_float(path: &Path, flag: &str) -> Result<FloatModel, Failure> {
    require_file(path, flag)?;
    Ok(formats::load_weights(path)?)
}

fn load_int8(path: &Path, flag: &str) -> Result<QuantModel, Failure> {
    require_file(path, flag)?;
    Ok(formats::load_quant(path)?)
}

fn quantize(a: QuantizeArgs) -> Outcome {
    let model = load_float(&a.weights, "--weights")?;
    let split = load_split(&a.ds, 0)?;
    let qm = calibrate(&model, &split.train)?;
    formats::save_quant(&a.out, &qm).map_err(runtime)?;
    let fidelity = fidelity_report(&model, &qm, &split.test).ok();
    let text = match &fidelity {
        Some(f) => format!(
            "calibrated on {} windows; test fidelity steering {} throttle {} max deviation {:.4} -> {}\n",
            split.train.len(),
            num(f.steering_correlation, 5),
            num(f.throttle_correlation, 5),
            f.max_deviation(),
            a.out.display()
        ),
        None => format!("calibrated on {} windows -> {}\n", split.train.len(), a.out.display()),
    };
    Ok(Report { text, json: json!({ "calibration_windows": split.train.len(), "fidelity": fidelity, "out": a.out }) })
}

fn num(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.digits$}"))
}

fn eval(a: EvalArgs) -> Outcome {
    let model = load_float(&a.float, "--float")?;
    let quant = a.quant.as_deref().map(|p| load_int8(p, "--quant")).transpose()?;
    let split = load_split(&a.ds, 0)?;
    let truth: Vec<_> = split.test.iter().map(|w| w.label).collect();
    let float_eval = evaluate(&model, &split.test)?;
    let float_report = eval_report(&float_eval.predictions, &truth)?;
    let mut text = format!("{} held-out windows\n", truth.len());
    let head_line = |name: &str, h: &tinynav_core::eval::HeadReport| {
        format!(
            "  {name:<9} pearson {}  spearman {}  overlap {:.4}\n",
            num(h.pearson_r, 4),
            num(h.spearman_rho, 4),
            h.distribution.overlap
        )
    };
    text += "float\n";
    text += &head_line("steering", &float_report.steering);
    text += &head_line("throttle", &float_report.throttle);
    let mut doc = json!({ "samples": truth.len(), "float": float_report });
    if let Some(qm) = &quant {
        let (fo, qo) = paired_outputs(&model, qm, &split.test)?;
        let fidelity = tinynav_core::quant::fidelity_from_outputs(&fo, &qo)?;
        let int8_report = eval_report(&qo, &truth)?;
        text += "int8\n";
        text += &head_line("steering", &int8_report.steering);
        text += &head_line("throttle", &int8_report.throttle);
        text += &format!(
            "fidelity  steering {}  throttle {}  max deviation {:.4}\n",
            num(fidelity.steering_correlation, 5),
            num(fidelity.throttle_correlation, 5),
            fidelity.max_deviation()
        );
        doc["int8"] = json!(int8_report);
        doc["fidelity"] = json!(fidelity);
    }
    let body = serde_json::to_string_pretty(&doc).expect("report serializes");
    std::fs::write(&a.report, body).map_err(|e| runtime(Error::io(&a.report, e)))?;
    Ok(Report { text, json: doc })
}

fn gradcam_cmd(a: GradcamArgs) -> Outcome {
    let model = load_float(&a.weights, "--weights")?;
    require_file(&a.ds, "--ds")?;
    let windows = formats::load_dataset(&a.ds)?;
    let window = windows
        .get(a.index)
        .ok_or_else(|| Failure::invalid(format!("--index {} out of range ({} windows)", a.index, windows.len())))?;
    let map = gradcam(&model, &window.to_tensor(), a.head.into())?;
    std::fs::write(&a.out, formats::encode_pgm(map.side, &map.upsampled)).map_err(|e| runtime(Error::io(&a.out, e)))?;
    let json_path = a.out.with_extension("json");
    let doc = json!({ "index": a.index, "label": window.label, "map": map });
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc).expect("map serializes"))
        .map_err(|e| runtime(Error::io(&json_path, e)))?;
    let left = left_mass_fraction(&map, map.side / 2);
    Ok(Report {
        text: format!(
            "grad-cam window {} -> {} and {}; left-half mass {}\n",
            a.index,
            a.out.display(),
            json_path.display(),
            left.map_or("n/a".to_string(), |f| format!("{f:.3}"))
        ),
        json: json!({ "index": a.index, "out": a.out, "json": json_path, "left_mass": left }),
    })
}

fn bench_cmd(a: BenchArgs) -> Outcome {
    if a.iters < crate::bench::MIN_ITERATIONS {
        return Err(Failure::invalid(format!("--iters must be at least {}", crate::bench::MIN_ITERATIONS)));
    }
    let report = match a.engine {
        EngineArg::Float => bench(&load_float(&a.model, "--model")?, Engine::Float, a.iters)?,
        EngineArg::Int8 => bench(&load_int8(&a.model, "--model")?, Engine::Int8, a.iters)?,
    };
    Ok(Report {
        text: format!(
            "{:?}: median {:.1} us, p95 {:.1} us, max {:.1} us, {:.0} inferences/s\n",
            report.engine, report.median_us, report.p95_us, report.max_us, report.fps_sustainable
        ),
        json: json!(report),
    })
}

fn sim_run(a: SimRunArgs) -> Outcome {
    let world = resolve_world(&a.world)?;
    if !(a.seconds > 0.0 && a.seconds.is_finite()) {
        return Err(Failure::invalid("--seconds must be positive"));
    }
    let mut policy: Box<dyn Policy> = match a.policy {
        PolicyArg::Expert => Box::new(ExpertPolicy::default()),
        PolicyArg::Float | PolicyArg::Int8 => {
            let path = a.model.as_deref().ok_or_else(|| Failure::invalid("--model is required for model policies"))?;
            match a.policy {
                PolicyArg::Float => Box::new(ModelPolicy::new(load_float(path, "--model")?)),
                _ => Box::new(ModelPolicy::new(load_int8(path, "--model")?)),
            }
        }
    };
    let cfg = RunConfig {
        seconds: a.seconds,
        laps_target: a.laps_target,
        seed: a.seed,
        noise: if a.noise { NoiseConfig::DATASET } else { NoiseConfig::NONE },
        ..RunConfig::default()
    };
    let result = run_closed_loop(&world, &mut policy, &cfg).map_err(|e| Failure::invalid(e.to_string()))?;
    if let Some(path) = &a.record {
        formats::save_recording(path, &result.to_recording()).map_err(runtime)?;
    }
    Ok(Report {
        text: format!(
            "{}: {} laps, {} collisions, {:.2} m in {:.1} s\n",
            world.name,
            result.laps,
            result.collisions,
            result.distance,
            result.seconds()
        ),
        json: json!({
            "world": world.name,
            "laps": result.laps,
            "collisions": result.collisions,
            "distance_m": result.distance,
            "ticks": result.ticks,
            "seconds": result.seconds(),
            "record": a.record,
        }),
    })
}

fn sim_serve(a: SimServeArgs, err: &mut dyn Write) -> Outcome {
    let world = resolve_world(&a.world)?;
    let mut session = Session::new(world, a.seed)?;
    if let Some(p) = &a.float {
        session.set_float_model(load_float(p, "--float")?);
    }
    if let Some(p) = &a.quant {
        session.set_quant_model(load_int8(p, "--quant")?);
    }
    let handle = serve(session, &format!("{}:{}", a.bind, a.port)).map_err(runtime)?;
    let _ = writeln!(err, "listening on ws://{}", handle.local_addr());
    handle.join();
    Ok(Report { text: String::new(), json: json!({}) })
}
