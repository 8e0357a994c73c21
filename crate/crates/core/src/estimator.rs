//! SpO₂ and heart-rate estimation from raw dual-wavelength streams.
//!
//! Per channel the DC level is the mean of a moving average whose first
//! null sits at `dc_cutoff_hz`, and the AC level is the peak-to-peak of the
//! band-passed signal. The band-pass is a zero-phase 4th-order Butterworth
//! high-pass/low-pass pair. [`process_stream`] filters each whole channel
//! once and slices the result per window, so slow common-mode drifts (LED
//! supply) are removed in steady state rather than through short-window
//! edge transients. [`ac_extract`] applies the same filter to a lone window
//! and ignores half a second at each edge.
//!
//! Readings are emitted on a 1 s hop; reading `k` covers
//! `[k, k + window_s)` seconds and is stamped at the window end.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use bitflags::bitflags;
use thiserror::Error;

use crate::filter::{mean, moving_average, peak_to_peak, Cascade};
use crate::optics::{invert_calibration, CalibrationCurve};
use crate::synth::SampleStream;

const FILTER_ORDER: usize = 4;
const EDGE_TRIM_S: f64 = 0.5;
const PAD_S: f64 = 4.0;
const HR_RANGE_BPM: (f64, f64) = (30.0, 240.0);
/// Estimates this close outside the HR range are clamped onto it.
const HR_RANGE_MARGIN_BPM: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("window has zero DC level")]
    ZeroDc,
    #[error("window needs {needed} samples, got {got}")]
    WindowTooShort { needed: usize, got: usize },
    #[error("invalid window: {0}")]
    InvalidWindow(&'static str),
    #[error("zero-length stream: no samples to estimate from")]
    EmptyStream,
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub window_s: f64,
    pub dc_cutoff_hz: f64,
    pub ac_band_hz: (f64, f64),
    pub min_peak_distance_s: f64,
    pub peak_prominence_fraction: f64,
    pub calibration: CalibrationCurve,
    pub ambient_subtraction: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window_s: 4.0,
            dc_cutoff_hz: 0.5,
            ac_band_hz: (0.5, 4.0),
            min_peak_distance_s: 0.2,
            peak_prominence_fraction: 0.3,
            calibration: CalibrationCurve::default(),
            ambient_subtraction: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimateError> {
        let bad = |m: String| Err(EstimateError::InvalidConfig(m));
        let (lo, hi) = self.ac_band_hz;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return bad(format!("band [{lo}, {hi}] Hz needs 0 < lo < hi"));
        }
        if !(self.window_s.is_finite() && self.window_s >= 2.0 / lo) {
            return bad(format!(
                "window {} s must cover two periods of {lo} Hz",
                self.window_s
            ));
        }
        if !(self.dc_cutoff_hz.is_finite() && self.dc_cutoff_hz > 0.0) {
            return bad(format!("dc cutoff {} Hz", self.dc_cutoff_hz));
        }
        if !(self.min_peak_distance_s > 0.0 && self.min_peak_distance_s < 60.0 / 240.0) {
            return bad(format!(
                "min peak distance {} s must lie in (0, 0.25)",
                self.min_peak_distance_s
            ));
        }
        if !(self.peak_prominence_fraction > 0.0 && self.peak_prominence_fraction < 1.0) {
            return bad(format!(
                "prominence fraction {} must lie in (0, 1)",
                self.peak_prominence_fraction
            ));
        }
        self.calibration
            .validate()
            .map_err(|e| EstimateError::InvalidConfig(e.to_string()))
    }

    fn window_len(&self, fs: f64) -> usize {
        (self.window_s * fs).round() as usize
    }

    fn bandpass(&self, fs: f64) -> Cascade {
        Cascade::butter_bandpass(FILTER_ORDER, self.ac_band_hz.0, self.ac_band_hz.1, fs)
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct ReadingFlags: u8 {
        const LOW_PERFUSION = 1 << 0;
        const EXTRAPOLATED_CALIBRATION = 1 << 1;
        const SATURATED_ADC = 1 << 2;
    }
}

impl ReadingFlags {
    const NAMES: [(ReadingFlags, &'static str); 3] = [
        (ReadingFlags::LOW_PERFUSION, "low_perfusion"),
        (ReadingFlags::EXTRAPOLATED_CALIBRATION, "extrapolated_calibration"),
        (ReadingFlags::SATURATED_ADC, "saturated_adc"),
    ];

    pub fn from_label(name: &str) -> Option<Self> {
        Self::NAMES.iter().find(|(_, n)| *n == name).map(|(f, _)| *f)
    }
}

impl fmt::Display for ReadingFlags {
    /// `|`-separated names, empty when no flag is set.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Self::NAMES
            .iter()
            .filter(|(flag, _)| self.contains(*flag))
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join("|"))
    }
}

/// One 1 Hz output record. `spo2_percent` is 0 when no ratio could be formed.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub t_s: f64,
    pub spo2_percent: f64,
    pub hr_bpm: Option<f64>,
    pub perfusion_index: f64,
    pub valid: bool,
    pub flags: ReadingFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spo2Class {
    Normal,
    Borderline,
    Hypoxia,
}

/// 95 % and above is normal, below 92 % is hypoxia, the gap is borderline.
pub fn classify(spo2_percent: f64) -> Spo2Class {
    if spo2_percent >= 95.0 {
        Spo2Class::Normal
    } else if spo2_percent < 92.0 {
        Spo2Class::Hypoxia
    } else {
        Spo2Class::Borderline
    }
}

fn check_window(window: &[f64], fs: f64, cfg: &EstimatorConfig) -> Result<(), EstimateError> {
    let needed = cfg.window_len(fs);
    if window.len() < needed || window.is_empty() {
        return Err(EstimateError::WindowTooShort {
            needed,
            got: window.len(),
        });
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(EstimateError::InvalidWindow("non-finite sample"));
    }
    Ok(())
}

fn dc_of(window: &[f64], fs: f64, cutoff_hz: f64) -> Result<f64, EstimateError> {
    let len = ((fs / cutoff_hz).round() as usize).clamp(1, window.len());
    let dc = mean(&moving_average(window, len));
    if dc > 0.0 {
        Ok(dc)
    } else {
        Err(EstimateError::ZeroDc)
    }
}

/// Mean of the moving-average (low-pass) component of a window.
pub fn dc_extract(window: &[f64], fs: f64, cfg: &EstimatorConfig) -> Result<f64, EstimateError> {
    check_window(window, fs, cfg)?;
    dc_of(window, fs, cfg.dc_cutoff_hz)
}

/// Band-passes a mean-removed channel with zero phase.
fn bandpassed(channel: &[f64], fs: f64, cfg: &EstimatorConfig) -> Vec<f64> {
    let m = mean(channel);
    let centered: Vec<f64> = channel.iter().map(|v| v - m).collect();
    cfg.bandpass(fs)
        .filtfilt(&centered, (PAD_S * fs).round() as usize)
}

fn trimmed(x: &[f64], fs: f64) -> &[f64] {
    let k = (EDGE_TRIM_S * fs).round() as usize;
    if x.len() > 4 * k {
        &x[k..x.len() - k]
    } else {
        x
    }
}

/// Peak-to-peak amplitude of the band-passed window, in input units.
pub fn ac_extract(window: &[f64], fs: f64, cfg: &EstimatorConfig) -> Result<f64, EstimateError> {
    check_window(window, fs, cfg)?;
    dc_of(window, fs, cfg.dc_cutoff_hz)?;
    Ok(peak_to_peak(trimmed(&bandpassed(window, fs, cfg), fs)))
}

/// Ratio of ratios `(AC_red/DC_red) / (AC_ir/DC_ir)`.
pub fn compute_r(ac_red: f64, dc_red: f64, ac_ir: f64, dc_ir: f64) -> Result<f64, EstimateError> {
    if !(dc_red > 0.0 && dc_ir > 0.0) {
        return Err(EstimateError::ZeroDc);
    }
    if ac_ir.is_nan() || ac_ir <= 0.0 {
        return Err(EstimateError::InvalidWindow("zero infrared AC"));
    }
    if ac_red.is_nan() || ac_red < 0.0 {
        return Err(EstimateError::InvalidWindow("negative red AC"));
    }
    let r = (ac_red / dc_red) / (ac_ir / dc_ir);
    if r.is_finite() && r > 0.0 {
        Ok(r)
    } else {
        Err(EstimateError::InvalidWindow("ratio not finite and positive"))
    }
}

/// Local maxima whose prominence is at least `prominence_fraction` of the
/// signal's peak-to-peak span, thinned so no two are closer than
/// `min_distance` samples. Thinning keeps the more prominent peak; equal
/// prominences favor the earlier index. Returned in ascending order.
pub fn find_peaks(x: &[f64], min_distance: f64, prominence_fraction: f64) -> Vec<usize> {
    let n = x.len();
    let span = peak_to_peak(x);
    if n < 3 || span.is_nan() || span <= 0.0 {
        return Vec::new();
    }
    let mut candidates = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if x[i] > x[i - 1] {
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] {
                candidates.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }

    let mut scored: Vec<(f64, usize)> = candidates
        .into_iter()
        .map(|p| {
            let h = x[p];
            let left = x[..p]
                .iter()
                .rev()
                .take_while(|&&v| v <= h)
                .fold(h, |m, &v| m.min(v));
            let right = x[p + 1..]
                .iter()
                .take_while(|&&v| v <= h)
                .fold(h, |m, &v| m.min(v));
            (h - left.max(right), p)
        })
        .filter(|(prom, _)| *prom >= prominence_fraction * span)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut kept: Vec<usize> = Vec::new();
    for (_, p) in scored {
        if kept.iter().all(|&q| (p.abs_diff(q) as f64) >= min_distance) {
            kept.push(p);
        }
    }
    kept.sort_unstable();
    kept
}

/// Sub-sample peak position by parabolic interpolation.
fn refine_peak(x: &[f64], p: usize) -> f64 {
    if p == 0 || p + 1 >= x.len() {
        return p as f64;
    }
    let (a, b, c) = (x[p - 1], x[p], x[p + 1]);
    let curvature = a - 2.0 * b + c;
    if curvature == 0.0 {
        p as f64
    } else {
        p as f64 + 0.5 * (a - c) / curvature
    }
}

/// Heart rate from a band-passed IR window; `None` with fewer than two
/// peaks or a rate outside 30–240 bpm. Jitter just past either bound is
/// clamped rather than rejected.
pub fn estimate_hr(ir_bandpassed: &[f64], fs: f64, cfg: &EstimatorConfig) -> Option<f64> {
    if (ir_bandpassed.len() as f64) < 4.0 * fs {
        return None;
    }
    let peaks = find_peaks(
        ir_bandpassed,
        cfg.min_peak_distance_s * fs,
        cfg.peak_prominence_fraction,
    );
    if peaks.len() < 2 {
        return None;
    }
    let first = refine_peak(ir_bandpassed, peaks[0]);
    let last = refine_peak(ir_bandpassed, peaks[peaks.len() - 1]);
    let interval_s = (last - first) / (peaks.len() - 1) as f64 / fs;
    let hr = 60.0 / interval_s;
    let (lo, hi) = HR_RANGE_BPM;
    (hr >= lo - HR_RANGE_MARGIN_BPM && hr <= hi + HR_RANGE_MARGIN_BPM).then(|| hr.clamp(lo, hi))
}

/// Intermediate per-window quantities behind one [`Reading`].
#[derive(Debug, Clone, PartialEq)]
pub struct WindowAnalysis {
    pub start: usize,
    pub end: usize,
    pub t_end_s: f64,
    pub dc_red: Result<f64, EstimateError>,
    pub dc_ir: Result<f64, EstimateError>,
    pub ac_red: f64,
    pub ac_ir: f64,
    pub ratio: Result<f64, EstimateError>,
    pub hr_bpm: Option<f64>,
    pub saturated: bool,
}

impl WindowAnalysis {
    fn to_reading(&self, cfg: &EstimatorConfig) -> Reading {
        let mut flags = ReadingFlags::empty();
        if self.saturated {
            flags |= ReadingFlags::SATURATED_ADC;
        }
        let perfusion_index = match self.dc_ir {
            Ok(dc) => self.ac_ir / dc,
            Err(_) => 0.0,
        };
        let spo2 = match self.ratio {
            Ok(r) => {
                let cal = invert_calibration(&cfg.calibration, r);
                if cal.extrapolated {
                    flags |= ReadingFlags::EXTRAPOLATED_CALIBRATION;
                }
                Some(cal.percent)
            }
            Err(_) => {
                flags |= ReadingFlags::LOW_PERFUSION;
                None
            }
        };
        if self.hr_bpm.is_none() {
            flags |= ReadingFlags::LOW_PERFUSION;
        }
        let valid = spo2.is_some() && self.hr_bpm.is_some() && !self.saturated;
        Reading {
            t_s: self.t_end_s,
            spo2_percent: spo2.unwrap_or(0.0),
            hr_bpm: self.hr_bpm,
            perfusion_index,
            valid,
            flags,
        }
    }
}

/// Runs the per-window analysis on a whole stream.
pub fn analyze_stream(
    stream: &SampleStream,
    cfg: &EstimatorConfig,
) -> Result<Vec<WindowAnalysis>, EstimateError> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(EstimateError::EmptyStream);
    }
    let fs = stream.fs_hz;
    let (mut red, mut ir) = (stream.red(), stream.ir());
    if cfg.ambient_subtraction {
        for (i, s) in stream.samples.iter().enumerate() {
            let amb = f64::from(s.ambient);
            red[i] -= amb;
            ir[i] -= amb;
        }
    }
    let t0 = stream.samples[0].t_s;
    let w = cfg.window_len(fs);
    let n = stream.len();
    if n < w {
        let saturated = stream.samples.iter().any(|s| s.is_saturated());
        return Ok(vec![WindowAnalysis {
            start: 0,
            end: n,
            t_end_s: t0 + n as f64 / fs,
            dc_red: Err(EstimateError::WindowTooShort { needed: w, got: n }),
            dc_ir: Err(EstimateError::WindowTooShort { needed: w, got: n }),
            ac_red: 0.0,
            ac_ir: 0.0,
            ratio: Err(EstimateError::WindowTooShort { needed: w, got: n }),
            hr_bpm: None,
            saturated,
        }]);
    }

    let bp_red = bandpassed(&red, fs, cfg);
    let bp_ir = bandpassed(&ir, fs, cfg);
    let mut out = Vec::new();
    for k in 0.. {
        let start = (k as f64 * fs).round() as usize;
        let end = start + w;
        if end > n {
            break;
        }
        let dc_red = dc_of(&red[start..end], fs, cfg.dc_cutoff_hz);
        let dc_ir = dc_of(&ir[start..end], fs, cfg.dc_cutoff_hz);
        let ac_red = peak_to_peak(&bp_red[start..end]);
        let ac_ir = peak_to_peak(&bp_ir[start..end]);
        let ratio = match (&dc_red, &dc_ir) {
            (Ok(dr), Ok(di)) => compute_r(ac_red, *dr, ac_ir, *di),
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        };
        out.push(WindowAnalysis {
            start,
            end,
            t_end_s: t0 + end as f64 / fs,
            dc_red,
            dc_ir,
            ac_red,
            ac_ir,
            ratio,
            hr_bpm: estimate_hr(&bp_ir[start..end], fs, cfg),
            saturated: stream.samples[start..end].iter().any(|s| s.is_saturated()),
        });
    }
    Ok(out)
}

/// 1 Hz readings for a stream. Invalid windows yield `valid = false`
/// readings; only an empty stream or a bad config is an error.
pub fn process_stream(
    stream: &SampleStream,
    cfg: &EstimatorConfig,
) -> Result<Vec<Reading>, EstimateError> {
    Ok(analyze_stream(stream, cfg)?
        .iter()
        .map(|w| w.to_reading(cfg))
        .collect())
}

#[derive(Debug, Error)]
pub enum ReadingCsvError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const READING_CSV_HEADER: &str = "t_s,spo2,hr,pi,valid,flags";

/// Full-precision readings CSV; absent heart rate is an empty field.
pub fn write_readings_csv<W: Write>(readings: &[Reading], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{READING_CSV_HEADER}")?;
    for r in readings {
        let hr = r.hr_bpm.map(|h| h.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.t_s, r.spo2_percent, hr, r.perfusion_index, r.valid, r.flags
        )?;
    }
    w.flush()
}

pub fn read_readings_csv<R: BufRead>(reader: R) -> Result<Vec<Reading>, ReadingCsvError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        let line_no = idx + 1;
        if idx == 0 {
            if line != READING_CSV_HEADER {
                return Err(ReadingCsvError::Parse {
                    line: 1,
                    message: format!("expected header `{READING_CSV_HEADER}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ReadingCsvError::Parse {
            line: line_no,
            message,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, got {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| err(format!("bad number `{s}`")))
        };
        let hr = if f[2].is_empty() { None } else { Some(num(f[2])?) };
        let valid = match f[4] {
            "true" => true,
            "false" => false,
            other => return Err(err(format!("bad validity `{other}`"))),
        };
        let mut flags = ReadingFlags::empty();
        let names: BTreeSet<&str> = f[5].split('|').filter(|s| !s.is_empty()).collect();
        for name in names {
            flags |= ReadingFlags::from_label(name).ok_or_else(|| err(format!("unknown flag `{name}`")))?;
        }
        out.push(Reading {
            t_s: num(f[0])?,
            spo2_percent: num(f[1])?,
            hr_bpm: hr,
            perfusion_index: num(f[3])?,
            valid,
            flags,
        });
    }
    Ok(out)
}
