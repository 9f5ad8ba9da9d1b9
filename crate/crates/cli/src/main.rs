#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use blinklink::events::io::{read_events, write_events};
use blinklink::modem::encode;
use blinklink::pipeline::sweep::{
    bench, linear_fit, speed_accuracy, write_accuracy_grid, write_bench_csv, BenchConfig, ReportConfig, LEAD_IN_US,
    TAIL_US,
};
use blinklink::pipeline::{run, KvConfig, PipelineConfig, TrackerKind};
use blinklink::simulate::{read_truth_csv, simulate, EventSource, LedModel, Trajectory, TrajectoryKind};

/// Bad flags, config or parameters: exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl fmt::Display) -> anyhow::Error {
    Usage(msg.to_string()).into()
}

#[derive(Parser)]
#[command(
    name = "blinklink",
    version,
    about = "Event-camera optical modem: simulate, encode, track and decode"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic event stream for a text message.
    Simulate(SimulateArgs),
    /// Write the LED on/off schedule for a text message.
    Encode(EncodeArgs),
    /// Track and decode a recorded event stream.
    Run(RunArgs),
    /// Tracker step time against carrier frequency.
    Bench(BenchArgs),
    /// Word accuracy against pixel speed and carrier frequency.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `section.key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajArg {
    Stationary,
    Linear,
    Circular,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EventFormat {
    Csv,
    Evb,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackerArg {
    Gaukf,
    Ekf,
}

impl From<TrackerArg> for TrackerKind {
    fn from(t: TrackerArg) -> Self {
        match t {
            TrackerArg::Gaukf => TrackerKind::GaUkf,
            TrackerArg::Ekf => TrackerKind::Ekf,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Message text, or `@path` to read it from a file.
    #[arg(long)]
    text: String,
    #[arg(long, value_enum)]
    traj: Option<TrajArg>,
    #[arg(long)]
    diameter_px: Option<f64>,
    /// Rim speed for circular paths, px/s.
    #[arg(long)]
    speed_px_s: Option<f64>,
    #[arg(long)]
    carrier_hz: Option<f64>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    events_per_edge: Option<f64>,
    #[arg(long)]
    motion_rate: Option<f64>,
    #[arg(long, value_enum)]
    format: Option<EventFormat>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    text: String,
    #[arg(long)]
    carrier_hz: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Event file (`.csv` or `.evb`).
    #[arg(long)]
    events: PathBuf,
    #[arg(long, value_enum)]
    tracker: Option<TrackerArg>,
    /// Expected message, for accuracy scoring.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Ground truth from `simulate`, for position error.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    carrier_hz: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    theta_hi: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    theta_lo: Option<f64>,
    #[arg(long)]
    auto_threshold: bool,
    /// Pace ingestion at wall-clock speed.
    #[arg(long)]
    realtime: bool,
    /// Decode on a second thread.
    #[arg(long)]
    concurrent: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    repeats: Option<usize>,
    /// Transmission length per workload.
    #[arg(long)]
    duration_ms: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    repeats: Option<usize>,
    /// Words per test message.
    #[arg(long)]
    words: Option<usize>,
}

/// Every setting a command may need, after config file and flags.
struct Settings {
    pipeline: PipelineConfig,
    sim: SimSettings,
}

struct SimSettings {
    traj: String,
    diameter_px: f64,
    speed_px_s: f64,
    center: [f64; 2],
    start: [f64; 2],
    velocity: [f64; 2],
    lead_in_us: u64,
    tail_us: u64,
    format: String,
    seed: u64,
    repeats: usize,
    bench_duration_ms: u64,
    report_words: usize,
    led: LedModel,
}

impl SimSettings {
    fn apply(&mut self, kv: &mut KvConfig) -> Result<(), blinklink::pipeline::ConfigError> {
        kv.take_into("sim.traj", &mut self.traj)?;
        kv.take_into("sim.diameter_px", &mut self.diameter_px)?;
        kv.take_into("sim.speed_px_s", &mut self.speed_px_s)?;
        kv.take_into("sim.center_x", &mut self.center[0])?;
        kv.take_into("sim.center_y", &mut self.center[1])?;
        kv.take_into("sim.start_x", &mut self.start[0])?;
        kv.take_into("sim.start_y", &mut self.start[1])?;
        kv.take_into("sim.vx", &mut self.velocity[0])?;
        kv.take_into("sim.vy", &mut self.velocity[1])?;
        kv.take_into("sim.lead_in_us", &mut self.lead_in_us)?;
        kv.take_into("sim.tail_us", &mut self.tail_us)?;
        kv.take_into("sim.format", &mut self.format)?;
        kv.take_into("sim.seed", &mut self.seed)?;
        kv.take_into("sweep.repeats", &mut self.repeats)?;
        kv.take_into("sweep.bench_duration_ms", &mut self.bench_duration_ms)?;
        kv.take_into("sweep.report_words", &mut self.report_words)?;
        let led = &mut self.led;
        kv.take_into("led.lambda1", &mut led.lambda1)?;
        kv.take_into("led.lambda2", &mut led.lambda2)?;
        kv.take_into("led.theta", &mut led.theta)?;
        kv.take_into(
            "led.orientation_follows_velocity",
            &mut led.orientation_follows_velocity,
        )?;
        kv.take_into("led.events_per_edge", &mut led.events_per_edge)?;
        kv.take_into("led.motion_event_rate", &mut led.motion_event_rate)?;
        kv.take_into("led.noise_rate", &mut led.noise_rate)?;
        kv.take_into("led.edge_latency_us", &mut led.edge_latency_us)?;
        kv.take_into("led.motion_sweep_s", &mut led.motion_sweep_s)?;
        Ok(())
    }
}

fn load_settings(common: &Common) -> Result<Settings> {
    let mut kv = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            KvConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => KvConfig::default(),
    };
    let mut pipeline = PipelineConfig::new(5000.0);
    pipeline.apply(&mut kv).map_err(usage)?;
    let sensor = pipeline.sensor;
    let mut sim = SimSettings {
        traj: "circular".into(),
        diameter_px: 610.0,
        speed_px_s: 3000.0,
        center: [sensor.width as f64 / 2.0, sensor.height as f64 / 2.0],
        start: [sensor.width as f64 / 2.0, sensor.height as f64 / 2.0],
        velocity: [0.0, 0.0],
        lead_in_us: LEAD_IN_US,
        tail_us: TAIL_US,
        format: "csv".into(),
        seed: 7,
        repeats: 3,
        bench_duration_ms: 400,
        report_words: 60,
        led: LedModel::default(),
    };
    sim.apply(&mut kv).map_err(usage)?;
    kv.finish().map_err(usage)?;
    if let Some(seed) = common.seed {
        sim.seed = seed;
    }
    Ok(Settings { pipeline, sim })
}

fn read_text(arg: &str) -> Result<Vec<u8>> {
    match arg.strip_prefix('@') {
        Some(path) => fs::read(path).with_context(|| format!("reading text from {path}")),
        None => Ok(arg.as_bytes().to_vec()),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut s = load_settings(&args.common)?;
    let sim = &mut s.sim;
    if let Some(t) = args.traj {
        sim.traj = match t {
            TrajArg::Stationary => "stationary",
            TrajArg::Linear => "linear",
            TrajArg::Circular => "circular",
        }
        .into();
    }
    if let Some(v) = args.diameter_px {
        sim.diameter_px = v;
    }
    if let Some(v) = args.speed_px_s {
        sim.speed_px_s = v;
    }
    if let Some(v) = args.noise_rate {
        sim.led.noise_rate = v;
    }
    if let Some(v) = args.events_per_edge {
        sim.led.events_per_edge = v;
    }
    if let Some(v) = args.motion_rate {
        sim.led.motion_event_rate = v;
    }
    if let Some(f) = args.format {
        sim.format = if f == EventFormat::Evb { "evb" } else { "csv" }.into();
    }
    let carrier = args.carrier_hz.unwrap_or(s.pipeline.decoder.carrier_hz);
    let text = read_text(&args.text)?;

    let schedule = encode(&text, carrier).map_err(usage)?.shifted(sim.lead_in_us);
    let duration = schedule.end_us + sim.tail_us;
    let sensor = s.pipeline.sensor;
    let kind = match sim.traj.as_str() {
        "stationary" => TrajectoryKind::Stationary { pos: sim.center },
        "linear" => TrajectoryKind::Linear {
            start: sim.start,
            velocity: sim.velocity,
        },
        "circular" => {
            if !(sim.diameter_px > 0.0) {
                return Err(usage("diameter must be positive"));
            }
            TrajectoryKind::Circular {
                center: sim.center,
                diameter: sim.diameter_px,
                angular_rate: 2.0 * sim.speed_px_s / sim.diameter_px,
                phase: 0.0,
            }
        }
        other => return Err(usage(format!("unknown trajectory `{other}`"))),
    };
    let ext = match sim.format.as_str() {
        "csv" => "csv",
        "evb" => "evb",
        other => return Err(usage(format!("unknown event format `{other}`"))),
    };
    let traj = Trajectory::new(kind, sensor, duration).map_err(usage)?;
    let out = simulate(&traj, &sim.led, &schedule, sim.seed).map_err(usage)?;

    ensure_dir(&args.common.out_dir)?;
    let events_path = args.common.out_dir.join(format!("events.{ext}"));
    write_events(&events_path, &out.events).with_context(|| format!("writing {}", events_path.display()))?;
    let mut w = create(&args.common.out_dir, "truth.csv")?;
    out.truth.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&args.common.out_dir, "schedule.csv")?;
    schedule.write_csv(&mut w)?;
    w.flush()?;
    println!(
        "{} events ({} edge, {} motion, {} noise) over {:.1} ms -> {}",
        out.events.len(),
        out.count(EventSource::Edge),
        out.count(EventSource::Motion),
        out.count(EventSource::Noise),
        duration as f64 / 1000.0,
        events_path.display()
    );
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let s = load_settings(&args.common)?;
    let carrier = args.carrier_hz.unwrap_or(s.pipeline.decoder.carrier_hz);
    let text = read_text(&args.text)?;
    let schedule = encode(&text, carrier).map_err(usage)?;
    ensure_dir(&args.common.out_dir)?;
    let mut w = create(&args.common.out_dir, "schedule.csv")?;
    schedule.write_csv(&mut w)?;
    w.flush()?;
    println!(
        "{} bytes, {} edges, {:.3} ms at {} Hz",
        text.len(),
        schedule.edges.len(),
        schedule.end_us as f64 / 1000.0,
        carrier
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let s = load_settings(&args.common)?;
    let mut cfg = s.pipeline;
    if let Some(t) = args.tracker {
        cfg.tracker = t.into();
    }
    if let Some(f) = args.carrier_hz {
        cfg.decoder.carrier_hz = f;
    }
    if let Some(v) = args.theta_hi {
        cfg.decoder.theta_hi = v;
    }
    if let Some(v) = args.theta_lo {
        cfg.decoder.theta_lo = v;
    }
    cfg.decoder.auto_threshold |= args.auto_threshold;
    cfg.realtime |= args.realtime;
    cfg.concurrent |= args.concurrent;
    cfg.validate().map_err(usage)?;

    let events = read_events(&args.events).with_context(|| format!("reading {}", args.events.display()))?;
    let reference = match &args.reference {
        Some(p) => Some(fs::read(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let truth = match &args.truth {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Some(read_truth_csv(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?)
        }
        None => None,
    };
    let report = run(&events, &cfg, truth.as_deref(), reference.as_deref())?;

    let dir = &args.common.out_dir;
    ensure_dir(dir)?;
    fs::write(dir.join("decoded.bin"), &report.decoded.bytes).context("writing decoded.bin")?;
    let mut w = create(dir, "timing.csv")?;
    report.write_timing_csv(&mut w)?;
    w.flush()?;
    let mut w = create(dir, "trace.csv")?;
    report.write_trace_csv(&mut w)?;
    w.flush()?;
    let mut w = create(dir, "words.csv")?;
    report.write_words_csv(&mut w)?;
    w.flush()?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let s = load_settings(&args.common)?;
    let cfg = BenchConfig {
        repeats: args.repeats.unwrap_or(s.sim.repeats),
        duration_us: args.duration_ms.unwrap_or(s.sim.bench_duration_ms) * 1000,
        seed: s.sim.seed,
        speed_px_s: s.sim.speed_px_s,
        led: s.sim.led,
        base: s.pipeline,
        ..BenchConfig::default()
    };
    cfg.led.validate().map_err(usage)?;
    let rows = bench(&cfg)?;
    ensure_dir(&args.common.out_dir)?;
    let mut w = create(&args.common.out_dir, "bench.csv")?;
    write_bench_csv(&mut w, &rows)?;
    w.flush()?;
    let mut stdout = std::io::stdout().lock();
    write_bench_csv(&mut stdout, &rows)?;
    let ekf: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.tracker == TrackerKind::Ekf)
        .map(|r| (r.events_per_packet, r.timing.mean_us))
        .collect();
    if ekf.len() >= 2 {
        let (slope, _, r2) = linear_fit(&ekf);
        writeln!(stdout, "ekf: {:.3} us per event, R^2 {r2:.4}", slope)?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let s = load_settings(&args.common)?;
    let cfg = ReportConfig {
        repeats: args.repeats.unwrap_or(s.sim.repeats),
        n_words: args.words.unwrap_or(s.sim.report_words),
        seed: s.sim.seed,
        led: s.sim.led,
        base: s.pipeline,
        ..ReportConfig::default()
    };
    cfg.led.validate().map_err(usage)?;
    let cells = speed_accuracy(&cfg)?;
    ensure_dir(&args.common.out_dir)?;
    let mut w = create(&args.common.out_dir, "speed_accuracy.csv")?;
    write_accuracy_grid(&mut w, &cells)?;
    w.flush()?;
    let mut stdout = std::io::stdout().lock();
    write_accuracy_grid(&mut stdout, &cells)?;
    for c in &cells {
        writeln!(
            stdout,
            "{:>6} px/s {:>6} Hz: words {:.3}, characters {:.3}",
            c.speed_px_s, c.carrier_hz, c.word, c.character
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
