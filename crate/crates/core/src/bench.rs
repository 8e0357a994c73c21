//! Session-level accuracy evaluation against simulator ground truth.
//!
//! A session synthesizes a stream, estimates readings, pairs each reading
//! with the reference second it closes, and reports the mean relative
//! error both signed and absolute. The absolute mean is the headline.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::thread;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::Settings;
use crate::estimator::{process_stream, EstimateError, ReadingFlags};
use crate::synth::{
    ground_truth, ArtifactSchedule, MotionEvent, PhysioProfile, SupplyGain, SynthError,
    Synthesizer,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no pairs to average")]
    Empty,
    #[error("reference value {0} is not positive")]
    NonPositiveTruth(f64),
    #[error("session needs at least one reading")]
    ZeroReadings,
    #[error("only {got} of {needed} readings valid (flags seen: {flags})")]
    InsufficientValid {
        needed: usize,
        got: usize,
        flags: ReadingFlags,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

/// Mean of `(true − measured)/true` and of its absolute value, as fractions.
pub fn average_measurement_error(pairs: &[(f64, f64)]) -> Result<(f64, f64), BenchError> {
    if pairs.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut signed = 0.0;
    let mut absolute = 0.0;
    for &(truth, measured) in pairs {
        if truth.is_nan() || truth <= 0.0 {
            return Err(BenchError::NonPositiveTruth(truth));
        }
        let e = (truth - measured) / truth;
        signed += e;
        absolute += e.abs();
    }
    let n = pairs.len() as f64;
    Ok((signed / n, absolute / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub t_s: f64,
    pub true_spo2: f64,
    /// `None` for readings the estimator marked invalid.
    pub measured_spo2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub label: String,
    /// `(true, measured)` SpO₂ for the first `n` valid readings.
    pub pairs: Vec<(f64, f64)>,
    pub signed_mean_rel_error: f64,
    pub mean_abs_rel_error: f64,
    /// Every reading of the run, valid or not.
    pub trace: Vec<TracePoint>,
    pub config_hash: String,
}

impl SessionResult {
    /// Mean |measured − true| in percentage points over valid trace points.
    pub fn mean_abs_diff_pp(&self) -> f64 {
        let diffs: Vec<f64> = self
            .trace
            .iter()
            .filter_map(|p| p.measured_spo2.map(|m| (m - p.true_spo2).abs()))
            .collect();
        if diffs.is_empty() {
            f64::NAN
        } else {
            diffs.iter().sum::<f64>() / diffs.len() as f64
        }
    }

    /// Share of all trace seconds whose valid reading is within `tol_pp`.
    pub fn fraction_within(&self, tol_pp: f64) -> f64 {
        if self.trace.is_empty() {
            return 0.0;
        }
        let hits = self
            .trace
            .iter()
            .filter(|p| p.measured_spo2.is_some_and(|m| (m - p.true_spo2).abs() <= tol_pp))
            .count();
        hits as f64 / self.trace.len() as f64
    }
}

/// SHA-256 over the rendered settings and seed.
pub fn config_hash(settings: &Settings, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(settings.to_kv().render().as_bytes());
    h.update(format!("seed = {seed}\n").as_bytes());
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Index of the reference second a reading closing at `t_end_s` belongs to.
fn truth_index(t_end_s: f64) -> usize {
    (t_end_s.ceil() as usize).saturating_sub(1)
}

pub fn run_session(
    label: &str,
    settings: &Settings,
    seed: u64,
    n_readings: usize,
) -> Result<SessionResult, BenchError> {
    if n_readings == 0 {
        return Err(BenchError::ZeroReadings);
    }
    let stream = Synthesizer::with_table(settings.table).synthesize(
        &settings.profile,
        &settings.schedule,
        settings.fs_hz,
        settings.duration_s,
        seed,
    )?;
    let readings = process_stream(&stream, &settings.estimator)?;
    let truth = ground_truth(&settings.profile, settings.duration_s);

    let mut trace = Vec::with_capacity(readings.len());
    let mut pairs = Vec::new();
    let mut seen = ReadingFlags::empty();
    for r in &readings {
        let Some(reference) = truth.get(truth_index(r.t_s)).or(truth.last()) else {
            continue;
        };
        seen |= r.flags;
        let measured = r.valid.then_some(r.spo2_percent);
        trace.push(TracePoint {
            t_s: r.t_s,
            true_spo2: reference.sao2_percent,
            measured_spo2: measured,
        });
        if let Some(m) = measured {
            if pairs.len() < n_readings {
                pairs.push((reference.sao2_percent, m));
            }
        }
    }
    if pairs.len() < n_readings {
        return Err(BenchError::InsufficientValid {
            needed: n_readings,
            got: pairs.len(),
            flags: seen,
        });
    }
    let (signed, absolute) = average_measurement_error(&pairs)?;
    Ok(SessionResult {
        label: label.to_string(),
        pairs,
        signed_mean_rel_error: signed,
        mean_abs_rel_error: absolute,
        trace,
        config_hash: config_hash(settings, seed),
    })
}

/// Paired per-second CSV with summary lines as `#` comments.
pub fn emit_traces<W: Write>(session: &SessionResult, mut w: W) -> io::Result<()> {
    writeln!(w, "# session={}", session.label)?;
    writeln!(w, "# mean_abs_diff_pp={:.4}", session.mean_abs_diff_pp())?;
    writeln!(w, "# within_1pp_fraction={:.4}", session.fraction_within(1.0))?;
    writeln!(w, "# config_hash={}", session.config_hash)?;
    writeln!(w, "t_s,true_spo2,measured_spo2")?;
    for p in &session.trace {
        let m = p.measured_spo2.map(|m| m.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{m}", p.t_s, p.true_spo2)?;
    }
    w.flush()
}

/// Stand-in subject profiles used by the standard bench.
pub fn named_profiles() -> Vec<(&'static str, PhysioProfile)> {
    vec![
        ("A", PhysioProfile::new(97.0, 72.0)),
        ("H", PhysioProfile::new(98.0, 65.0)),
    ]
}

/// Supply ripple of ±10 % at 0.1 Hz.
pub fn supply_ripple() -> SupplyGain {
    SupplyGain {
        amplitude_fraction: 0.1,
        freq_hz: 0.1,
    }
}

/// Artifact scenarios run for each profile: label, schedule and whether
/// ambient subtraction stays on.
pub fn scenarios(dc_level_counts: f64) -> Vec<(&'static str, ArtifactSchedule, bool)> {
    let ambient = ArtifactSchedule {
        ambient_offset_counts: 0.2 * dc_level_counts,
        ..ArtifactSchedule::default()
    };
    vec![
        ("clean", ArtifactSchedule::clean(), true),
        (
            "supply",
            ArtifactSchedule {
                supply_gain: supply_ripple(),
                ..ArtifactSchedule::default()
            },
            true,
        ),
        ("ambient", ambient.clone(), true),
        ("ambient-nosub", ambient, false),
        (
            "motion",
            ArtifactSchedule {
                motion_events: [8.0, 25.0, 42.0]
                    .into_iter()
                    .map(|start_s| MotionEvent {
                        start_s,
                        duration_s: 3.0,
                        amplitude_fraction: 0.15,
                    })
                    .collect(),
                ..ArtifactSchedule::default()
            },
            true,
        ),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub n: usize,
    pub signed_mean_rel_error: f64,
    pub mean_abs_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<ReportRow>,
}

impl BenchReport {
    pub fn push(&mut self, s: &SessionResult) {
        self.rows.push(ReportRow {
            label: s.label.clone(),
            n: s.pairs.len(),
            signed_mean_rel_error: s.signed_mean_rel_error,
            mean_abs_rel_error: s.mean_abs_rel_error,
        });
    }

    /// Aligned text table with errors in percent.
    pub fn render_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<width$}  {:>3}  {:>12}  {:>12}\n",
            "session", "n", "abs_err_%", "signed_err_%"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>3}  {:>12.4}  {:>12.4}",
                r.label,
                r.n,
                100.0 * r.mean_abs_rel_error,
                100.0 * r.signed_mean_rel_error
            );
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "session,n,mean_abs_rel_error,signed_mean_rel_error")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                r.label, r.n, r.mean_abs_rel_error, r.signed_mean_rel_error
            )?;
        }
        w.flush()
    }
}

/// Runs every scenario for every named profile in parallel, starting from
/// `base` (whose profile and schedule are replaced). Sessions are labelled
/// `<profile>-<scenario>` and returned in a fixed order.
pub fn run_standard_bench(
    base: &Settings,
    seed: u64,
    n_readings: usize,
) -> Result<(BenchReport, Vec<SessionResult>), BenchError> {
    let mut jobs = Vec::new();
    for (name, profile) in named_profiles() {
        let profile = PhysioProfile {
            perfusion_index: base.profile.perfusion_index,
            dc_level_counts: base.profile.dc_level_counts,
            ..profile
        };
        for (scenario, schedule, subtract) in scenarios(profile.dc_level_counts) {
            let mut s = base.clone();
            s.profile = profile;
            s.schedule = schedule;
            s.estimator.ambient_subtraction = subtract;
            jobs.push((format!("{name}-{scenario}"), s));
        }
    }
    let results: Vec<Result<SessionResult, BenchError>> = thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(label, s)| scope.spawn(move || run_session(label, s, seed, n_readings)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("session thread panicked"))
            .collect()
    });
    let sessions = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut report = BenchReport::default();
    for s in &sessions {
        report.push(s);
    }
    Ok((report, sessions))
}
