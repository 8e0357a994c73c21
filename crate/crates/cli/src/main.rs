//! `pulseox`: simulate, estimate, serve, monitor, bench and calibrate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad configuration,
//! 64 usage error.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pulseox_core::bench::{
    average_measurement_error, emit_traces, run_standard_bench, BenchReport, SessionResult,
};
use pulseox_core::config::{KvConfig, Settings};
use pulseox_core::estimator::{process_stream, read_readings_csv, write_readings_csv};
use pulseox_core::optics::oracle_calibration;
use pulseox_core::synth::{ground_truth, SampleStream, Synthesizer};
use pulseox_core::wire::{self, Pacing, ServeOptions, TcpServer, WireError};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "pulseox", version, about = "Pulse-oximetry simulation and estimation pipeline")]
struct Cli {
    /// Plain-text `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set estimator.window_s=6` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a raw dual-wavelength sample CSV (t_s,red,ir,ambient).
    Simulate(SimulateArgs),
    /// Turn a sample CSV into 1 Hz readings (t_s,spo2,hr,pi,valid,flags).
    Estimate(EstimateArgs),
    /// Stream readings as `t,spo2,hr` lines over TCP or stdout.
    Serve(ServeArgs),
    /// Receive reading lines and log them as CSV (t_s,spo2,hr,rx_s).
    Monitor(MonitorArgs),
    /// Accuracy sessions against the simulator ground truth.
    Bench(BenchArgs),
    /// Fit calibration constants to the Beer-Lambert model.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// Arterial oxygen saturation, percent [50, 100].
    #[arg(long, value_name = "PERCENT")]
    sao2: Option<f64>,
    /// Heart rate, beats per minute [30, 240].
    #[arg(long, value_name = "BPM")]
    hr: Option<f64>,
    /// Perfusion index, IR AC/DC ratio (dimensionless, 0 to 0.2).
    #[arg(long, value_name = "RATIO")]
    pi: Option<f64>,
    /// Stream length, seconds.
    #[arg(long, value_name = "SECONDS")]
    duration: Option<f64>,
    /// Sample rate, Hz (at least 25).
    #[arg(long, value_name = "HZ")]
    fs: Option<f64>,
    /// Ambient light offset added to both channels, ADC counts.
    #[arg(long, value_name = "COUNTS")]
    ambient: Option<f64>,
    /// Supply ripple amplitude as a fraction of LED gain (0.1 = ±10 %).
    #[arg(long, value_name = "FRACTION")]
    supply_amplitude: Option<f64>,
    /// Supply ripple frequency, Hz.
    #[arg(long, value_name = "HZ")]
    supply_freq: Option<f64>,
}

impl ProfileArgs {
    fn apply(&self, kv: &mut KvConfig) {
        let pairs = [
            ("profile.sao2_percent", self.sao2),
            ("profile.heart_rate_bpm", self.hr),
            ("profile.perfusion_index", self.pi),
            ("synth.duration_s", self.duration),
            ("synth.fs_hz", self.fs),
            ("artifact.ambient_offset_counts", self.ambient),
            ("artifact.supply_amplitude", self.supply_amplitude),
            ("artifact.supply_freq_hz", self.supply_freq),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                kv.set(key, v.to_string());
            }
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    /// Dither seed (required; streams are reproducible per seed).
    #[arg(long)]
    seed: u64,
    /// Sample CSV destination; stdout when omitted.
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Also write the per-second ground truth (t_s,sao2_percent,hr_bpm).
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Sample CSV to read (`-` for stdin).
    #[arg(short, long, value_name = "FILE")]
    input: PathBuf,
    /// Readings CSV destination; stdout when omitted.
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Sample rate in Hz when the CSV has a single row.
    #[arg(long, value_name = "HZ")]
    fs: Option<f64>,
    /// Skip subtracting the ambient channel.
    #[arg(long)]
    no_ambient_subtraction: bool,
}

#[derive(Debug, Args)]
struct LinkArgs {
    /// Emulated serial rate in baud (9600, 19200, 38400, 57600, 115200).
    #[arg(long, default_value_t = wire::DEFAULT_BAUD)]
    baud: u32,
    /// Use stdin/stdout instead of TCP.
    #[arg(long)]
    pipe: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Readings CSV produced by `estimate`.
    #[arg(short, long, value_name = "FILE")]
    input: PathBuf,
    #[command(flatten)]
    link: LinkArgs,
    /// TCP listen address.
    #[arg(long, default_value = "127.0.0.1:7070", value_name = "HOST:PORT")]
    listen: String,
    /// Send lines as fast as the baud rate allows instead of in real time.
    #[arg(long)]
    fast: bool,
    /// Real-time pacing interval between lines, seconds.
    #[arg(long, default_value_t = 1.0, value_name = "SECONDS")]
    interval: f64,
    /// Exit after this many TCP sessions have completed.
    #[arg(long, value_name = "N")]
    max_sessions: Option<usize>,
}

#[derive(Debug, Args)]
struct MonitorArgs {
    #[command(flatten)]
    link: LinkArgs,
    /// Server address to connect to.
    #[arg(long, default_value = "127.0.0.1:7070", value_name = "HOST:PORT")]
    connect: String,
    /// CSV sink; stdout when omitted.
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Dither seed shared by all sessions (required).
    #[arg(long)]
    seed: u64,
    /// Valid readings per session.
    #[arg(long, default_value_t = 20, value_name = "N")]
    readings: usize,
    /// Score an existing readings CSV against the configured SaO₂ (percent)
    /// instead of running the standard sessions.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Directory for per-session trace CSVs (t_s,true_spo2,measured_spo2).
    #[arg(long, value_name = "DIR")]
    traces: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Arterial oxygen saturation used as truth with `--input`, percent.
    #[arg(long, value_name = "PERCENT")]
    sao2: Option<f64>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Polynomial degree of SpO₂ (percent) in R.
    #[arg(long, default_value_t = 2)]
    degree: usize,
    /// Constants file destination; stdout when omitted.
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
}

/// Marks errors caused by configuration rather than runtime conditions.
#[derive(Debug)]
struct BadConfig(anyhow::Error);

impl std::fmt::Display for BadConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for BadConfig {}

fn bad_config(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(BadConfig(e.into()))
}

fn base_config(cli: &Cli) -> Result<KvConfig> {
    let mut kv = match &cli.config {
        Some(path) => KvConfig::load(path)
            .with_context(|| format!("config file {}", path.display()))
            .map_err(bad_config)?,
        None => KvConfig::new(),
    };
    for o in &cli.overrides {
        kv.apply_override(o).map_err(bad_config)?;
    }
    Ok(kv)
}

fn settings(kv: &KvConfig) -> Result<Settings> {
    Settings::from_kv(kv).map_err(bad_config)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn input(path: &Path) -> Result<Box<dyn Read>> {
    if path == Path::new("-") {
        return Ok(Box::new(io::stdin().lock()));
    }
    Ok(Box::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn simulate(kv: &mut KvConfig, args: &SimulateArgs) -> Result<()> {
    args.profile.apply(kv);
    let s = settings(kv)?;
    let stream = Synthesizer::with_table(s.table).synthesize(
        &s.profile,
        &s.schedule,
        s.fs_hz,
        s.duration_s,
        args.seed,
    )?;
    stream.write_csv(output(&args.output)?)?;
    if let Some(path) = &args.truth {
        let mut w = output(&Some(path.clone()))?;
        writeln!(w, "t_s,sao2_percent,hr_bpm")?;
        for r in ground_truth(&s.profile, s.duration_s) {
            writeln!(w, "{},{},{}", r.t_s, r.sao2_percent, r.hr_bpm)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn estimate(kv: &mut KvConfig, args: &EstimateArgs) -> Result<()> {
    if args.no_ambient_subtraction {
        kv.set("estimator.ambient_subtraction", "false");
    }
    let s = settings(kv)?;
    let reader = BufReader::new(input(&args.input)?);
    let stream = SampleStream::read_csv(reader, args.fs)
        .with_context(|| format!("reading samples from {}", args.input.display()))?;
    let readings = process_stream(&stream, &s.estimator)?;
    write_readings_csv(&readings, output(&args.output)?)?;
    let valid = readings.iter().filter(|r| r.valid).count();
    eprintln!("{} readings, {valid} valid", readings.len());
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    wire::check_baud(args.link.baud).map_err(bad_config)?;
    if !(args.interval.is_finite() && args.interval > 0.0) {
        return Err(bad_config(anyhow!("--interval must be a positive number of seconds")));
    }
    let file = File::open(&args.input)
        .with_context(|| format!("cannot open {}", args.input.display()))?;
    let readings = read_readings_csv(BufReader::new(file))?;
    let opts = ServeOptions {
        baud: args.link.baud,
        pacing: if args.fast {
            Pacing::AsFastAsPossible
        } else {
            Pacing::RealTime {
                interval: Duration::from_secs_f64(args.interval),
            }
        },
    };
    if args.link.pipe {
        let stats = wire::serve_session(&readings, io::stdout().lock(), &opts)?;
        eprintln!("sent {} lines, {} bytes", stats.lines, stats.bytes);
        return Ok(());
    }
    let server = TcpServer::bind(args.listen.as_str(), readings, opts)?;
    eprintln!("listening on {}", server.local_addr()?);
    for (i, r) in server.run(args.max_sessions).into_iter().enumerate() {
        match r {
            Ok(s) => eprintln!("session {i}: {} lines, {} bytes", s.lines, s.bytes),
            Err(e) => eprintln!("session {i} ended early: {e}"),
        }
    }
    Ok(())
}

fn monitor(args: &MonitorArgs) -> Result<()> {
    wire::check_baud(args.link.baud).map_err(bad_config)?;
    let sink = output(&args.output)?;
    let warn = |raw: &[u8], reason: &str| {
        eprintln!("warning: {reason}: {:?}", String::from_utf8_lossy(raw));
    };
    let report = if args.link.pipe {
        wire::monitor(io::stdin().lock(), sink, args.link.baud, warn)?
    } else {
        let stream = wire::connect(&args.connect)?;
        wire::monitor(stream, sink, args.link.baud, warn)?
    };
    eprintln!(
        "{} readings, {} warnings",
        report.readings.len(),
        report.warnings.len()
    );
    Ok(())
}

fn bench(kv: &mut KvConfig, args: &BenchArgs) -> Result<()> {
    if let Some(v) = args.sao2 {
        kv.set("profile.sao2_percent", v.to_string());
    }
    let s = settings(kv)?;
    let (report, sessions) = match &args.input {
        Some(path) => {
            let file =
                File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
            let readings = read_readings_csv(BufReader::new(file))?;
            let truth = s.profile.sao2_percent;
            let pairs: Vec<(f64, f64)> = readings
                .iter()
                .filter(|r| r.valid)
                .take(args.readings)
                .map(|r| (truth, r.spo2_percent))
                .collect();
            if pairs.len() < args.readings {
                bail!("only {} of {} readings valid", pairs.len(), args.readings);
            }
            let (signed, absolute) = average_measurement_error(&pairs)?;
            let session = SessionResult {
                label: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "input".into()),
                pairs,
                signed_mean_rel_error: signed,
                mean_abs_rel_error: absolute,
                trace: Vec::new(),
                config_hash: pulseox_core::bench::config_hash(&s, args.seed),
            };
            let mut report = BenchReport::default();
            report.push(&session);
            (report, Vec::new())
        }
        None => run_standard_bench(&s, args.seed, args.readings)?,
    };
    print!("{}", report.render_table());
    if let Some(path) = &args.report {
        report.write_csv(output(&Some(path.clone()))?)?;
    }
    if let Some(dir) = &args.traces {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for session in &sessions {
            let path = dir.join(format!("{}.csv", session.label));
            emit_traces(session, output(&Some(path))?)?;
        }
    }
    Ok(())
}

fn calibrate(kv: &KvConfig, args: &CalibrateArgs) -> Result<()> {
    let s = settings(kv)?;
    let curve = oracle_calibration(&s.table, args.degree).map_err(bad_config)?;
    let mut w = output(&args.output)?;
    w.write_all(curve.to_text().as_bytes())?;
    w.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut kv = base_config(cli)?;
    match &cli.command {
        Command::Simulate(a) => simulate(&mut kv, a),
        Command::Estimate(a) => estimate(&mut kv, a),
        Command::Serve(a) => {
            settings(&kv)?;
            serve(a)
        }
        Command::Monitor(a) => {
            settings(&kv)?;
            monitor(a)
        }
        Command::Bench(a) => bench(&mut kv, a),
        Command::Calibrate(a) => calibrate(&kv, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<BadConfig>()
            || matches!(e.downcast_ref::<WireError>(), Some(WireError::UnsupportedBaud(_)))
    });
    if config {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let kind = if code == EXIT_CONFIG { "config" } else { "runtime" };
            eprintln!("pulseox: {kind} error: {err:#}");
            ExitCode::from(code)
        }
    }
}
