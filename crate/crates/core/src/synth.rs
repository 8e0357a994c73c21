//! Deterministic dual-wavelength PPG generator.
//!
//! Each sample is produced by the Beer-Lambert model in [`crate::optics`]:
//! arterial blood at the profile's saturation occupies a baseline path plus
//! a pulsatile path term that follows a raised-cosine beat (systole one
//! third of the period, diastole two thirds). Artifacts are then applied in
//! a fixed order:
//!
//! 1. supply gain `1 + a·sin(2πft)`, multiplied into both channels,
//! 2. motion, an additive raised-cosine baseline excursion on both channels,
//! 3. ambient light, an additive offset on both channels,
//! 4. dithered quantization to a 16-bit ADC with round-half-even.
//!
//! Dither comes from [`Lcg64`], so a `(profile, schedule, fs, duration, seed)`
//! tuple always yields the same stream, on any platform.

use std::f64::consts::{LN_10, PI};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::optics::{self, BloodState, Channel, ExtinctionTable, OpticsError};

pub const ADC_MAX: u16 = u16::MAX;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid artifact schedule: {0}")]
    InvalidSchedule(String),
    #[error("sample rate {0} Hz is below the 25 Hz minimum")]
    SampleRate(f64),
    #[error("duration must be positive and finite, got {0} s")]
    Duration(f64),
    #[error(transparent)]
    Optics(#[from] OpticsError),
}

#[derive(Debug, Error)]
pub enum StreamCsvError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("zero-length stream: no samples")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ground-truth physiology driving the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysioProfile {
    pub sao2_percent: f64,
    pub heart_rate_bpm: f64,
    /// IR-channel AC/DC modulation depth.
    pub perfusion_index: f64,
    /// Nominal IR DC level in ADC counts.
    pub dc_level_counts: f64,
}

impl Default for PhysioProfile {
    fn default() -> Self {
        Self {
            sao2_percent: 97.0,
            heart_rate_bpm: 72.0,
            perfusion_index: 0.02,
            dc_level_counts: 30_000.0,
        }
    }
}

impl PhysioProfile {
    pub fn new(sao2_percent: f64, heart_rate_bpm: f64) -> Self {
        Self {
            sao2_percent,
            heart_rate_bpm,
            ..Self::default()
        }
    }

    /// A perfusion index of exactly zero is accepted and yields a flat signal.
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidProfile(m));
        if !(50.0..=100.0).contains(&self.sao2_percent) {
            return bad(format!("sao2 {} % outside [50, 100]", self.sao2_percent));
        }
        if !(30.0..=240.0).contains(&self.heart_rate_bpm) {
            return bad(format!(
                "heart rate {} bpm outside [30, 240]",
                self.heart_rate_bpm
            ));
        }
        if !(0.0..=0.2).contains(&self.perfusion_index) {
            return bad(format!(
                "perfusion index {} outside [0, 0.2]",
                self.perfusion_index
            ));
        }
        if !(self.dc_level_counts > 0.0 && self.dc_level_counts <= f64::from(ADC_MAX)) {
            return bad(format!(
                "dc level {} counts outside the ADC range",
                self.dc_level_counts
            ));
        }
        Ok(())
    }
}

/// Slow common-mode LED brightness modulation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SupplyGain {
    pub amplitude_fraction: f64,
    pub freq_hz: f64,
}

impl SupplyGain {
    pub fn at(&self, t: f64) -> f64 {
        1.0 + self.amplitude_fraction * (2.0 * PI * self.freq_hz * t).sin()
    }
}

/// One motion episode: a raised-cosine baseline excursion whose peak is
/// `amplitude_fraction` of each channel's DC level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionEvent {
    pub start_s: f64,
    pub duration_s: f64,
    pub amplitude_fraction: f64,
}

impl MotionEvent {
    pub fn shape_at(&self, t: f64) -> f64 {
        let x = t - self.start_s;
        if x < 0.0 || x >= self.duration_s {
            0.0
        } else {
            0.5 * (1.0 - (2.0 * PI * x / self.duration_s).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArtifactSchedule {
    pub supply_gain: SupplyGain,
    pub ambient_offset_counts: f64,
    pub motion_events: Vec<MotionEvent>,
}

impl ArtifactSchedule {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSchedule(m));
        let g = &self.supply_gain;
        if !(0.0..=0.2).contains(&g.amplitude_fraction) {
            return bad(format!(
                "supply amplitude {} outside [0, 0.2]",
                g.amplitude_fraction
            ));
        }
        if !(g.freq_hz.is_finite() && g.freq_hz >= 0.0) {
            return bad(format!("supply frequency {} Hz", g.freq_hz));
        }
        if !(self.ambient_offset_counts.is_finite() && self.ambient_offset_counts >= 0.0) {
            return bad(format!("ambient offset {}", self.ambient_offset_counts));
        }
        let mut events = self.motion_events.clone();
        events.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let mut prev_end = f64::NEG_INFINITY;
        for e in &events {
            if !(e.start_s.is_finite() && e.duration_s.is_finite() && e.amplitude_fraction.is_finite())
            {
                return bad(format!("non-finite motion event {e:?}"));
            }
            if e.start_s < 0.0 || e.duration_s <= 0.0 {
                return bad(format!("motion event {e:?} needs start >= 0 and duration > 0"));
            }
            if e.start_s < prev_end {
                return bad(format!("motion event at {} s overlaps its predecessor", e.start_s));
            }
            prev_end = e.start_s + e.duration_s;
        }
        Ok(())
    }

    fn motion_at(&self, t: f64) -> f64 {
        self.motion_events
            .iter()
            .map(|e| e.amplitude_fraction * e.shape_at(t))
            .sum()
    }
}

/// One virtual ADC frame: red, infrared and the dark (ambient) phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSample {
    pub t_s: f64,
    pub red: u16,
    pub ir: u16,
    pub ambient: u16,
}

impl DualSample {
    /// A channel sitting on either ADC rail.
    pub fn is_saturated(&self) -> bool {
        [self.red, self.ir].iter().any(|&c| c == 0 || c == ADC_MAX)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStream {
    pub fs_hz: f64,
    pub samples: Vec<DualSample>,
}

impl SampleStream {
    pub fn new(fs_hz: f64, samples: Vec<DualSample>) -> Self {
        Self { fs_hz, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs_hz
    }

    pub fn red(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.red)).collect()
    }

    pub fn ir(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.ir)).collect()
    }

    pub fn ambient(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.ambient)).collect()
    }

    /// `t_s,red,ir,ambient` with six-decimal timestamps.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_s,red,ir,ambient")?;
        for s in &self.samples {
            writeln!(w, "{:.6},{},{},{}", s.t_s, s.red, s.ir, s.ambient)?;
        }
        w.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }

    /// Parses a sample CSV. The rate is inferred from the timestamps
    /// (rounded to 1 mHz) unless `fs_hint` is given.
    pub fn read_csv<R: BufRead>(reader: R, fs_hint: Option<f64>) -> Result<Self, StreamCsvError> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            None => return Err(StreamCsvError::Empty),
            Some(h) => h?,
        };
        if header.trim() != "t_s,red,ir,ambient" {
            return Err(StreamCsvError::Parse {
                line: 1,
                message: format!("expected header `t_s,red,ir,ambient`, got `{}`", header.trim()),
            });
        }
        let mut samples: Vec<DualSample> = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let line_no = idx + 2;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| StreamCsvError::Parse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", fields.len())));
            }
            let t: f64 = fields[0]
                .parse()
                .map_err(|_| err(format!("bad time `{}`", fields[0])))?;
            let count = |s: &str| {
                s.parse::<u16>()
                    .map_err(|_| err(format!("bad ADC count `{s}`")))
            };
            if let Some(prev) = samples.last() {
                if t <= prev.t_s {
                    return Err(err(format!("time {t} not strictly increasing")));
                }
            }
            samples.push(DualSample {
                t_s: t,
                red: count(fields[1])?,
                ir: count(fields[2])?,
                ambient: count(fields[3])?,
            });
        }
        if samples.is_empty() {
            return Err(StreamCsvError::Empty);
        }
        let fs = match fs_hint {
            Some(fs) => fs,
            None if samples.len() >= 2 => {
                let span = samples[samples.len() - 1].t_s - samples[0].t_s;
                ((samples.len() - 1) as f64 / span * 1000.0).round() / 1000.0
            }
            None => 100.0,
        };
        Ok(Self::new(fs, samples))
    }
}

/// Knuth's MMIX 64-bit linear congruential generator.
///
/// `state ← state · 6364136223846793005 + 1442695040888963407 (mod 2⁶⁴)`;
/// a uniform draw in `[0, 1)` is the top 53 bits of the new state times 2⁻⁵³.
#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub const MULTIPLIER: u64 = 6_364_136_223_846_793_005;
    pub const INCREMENT: u64 = 1_442_695_040_888_963_407;

    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self
            .state
            .wrapping_mul(Self::MULTIPLIER)
            .wrapping_add(Self::INCREMENT);
        self.state
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform dither in `[-0.5, 0.5)`.
    pub fn dither(&mut self) -> f64 {
        self.next_f64() - 0.5
    }
}

/// Round-half-even to the ADC grid, clamped to the rails.
pub fn quantize(value: f64) -> u16 {
    value.round_ties_even().clamp(0.0, f64::from(ADC_MAX)) as u16
}

/// Normalized beat shape in `[0, 1]` at cycle phase `phase ∈ [0, 1)`.
/// Zero at the start of systole, one at its end; the fall takes twice as long.
pub fn beat_shape(phase: f64) -> f64 {
    const SYSTOLE: f64 = 1.0 / 3.0;
    if phase < SYSTOLE {
        0.5 * (1.0 - (PI * phase / SYSTOLE).cos())
    } else {
        0.5 * (1.0 + (PI * (phase - SYSTOLE) / (1.0 - SYSTOLE)).cos())
    }
}

/// Optical parameters of the simulated finger.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesizer {
    pub table: ExtinctionTable,
    /// Total hemoglobin in the table's concentration unit.
    pub total_hemoglobin: f64,
    /// Arterial path length at end-diastole.
    pub baseline_path_cm: f64,
}

impl Default for Synthesizer {
    fn default() -> Self {
        Self {
            table: ExtinctionTable::default(),
            total_hemoglobin: 0.0023,
            baseline_path_cm: 0.05,
        }
    }
}

impl Synthesizer {
    pub fn with_table(table: ExtinctionTable) -> Self {
        Self {
            table,
            ..Self::default()
        }
    }

    /// Pre-quantization intensities `(red, ir)` for every sample, including
    /// supply gain, motion and ambient. Exposed for analog-level checks.
    pub fn analog(
        &self,
        profile: &PhysioProfile,
        schedule: &ArtifactSchedule,
        fs_hz: f64,
        duration_s: f64,
    ) -> Result<Vec<(f64, f64)>, SynthError> {
        profile.validate()?;
        schedule.validate()?;
        if !(fs_hz.is_finite() && fs_hz >= 25.0) {
            return Err(SynthError::SampleRate(fs_hz));
        }
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(SynthError::Duration(duration_s));
        }
        let n = (duration_s * fs_hz).round() as usize;
        let sao2 = profile.sao2_percent / 100.0;
        let path0 = self.baseline_path_cm;
        let base = BloodState::from_saturation(self.total_hemoglobin, sao2, path0)?;
        let a_red0 = base.absorbance(&self.table, Channel::Red)?;
        let a_ir0 = base.absorbance(&self.table, Channel::Infrared)?;
        // Attenuation per unit path on the IR channel.
        let mu_ir = a_ir0 / path0;
        let swing = profile.perfusion_index / (LN_10 * mu_ir);
        // Common incident intensity placing the end-diastolic IR level at dc.
        let i0 = profile.dc_level_counts * 10f64.powf(a_ir0);
        let dc_red = optics::transmitted_intensity(i0, a_red0)?;
        let dc_ir = profile.dc_level_counts;
        let beat_hz = profile.heart_rate_bpm / 60.0;

        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 / fs_hz;
            // Half-period offset keeps intensity maxima off the stream edges.
            let phase = (t * beat_hz + 0.5).fract();
            let path = path0 + swing * beat_shape(phase);
            let blood = BloodState::from_saturation(self.total_hemoglobin, sao2, path)?;
            let gain = schedule.supply_gain.at(t);
            let motion = schedule.motion_at(t);
            let channel = |ch: Channel, dc: f64| -> Result<f64, SynthError> {
                let a = blood.absorbance(&self.table, ch)?;
                let i = optics::transmitted_intensity(i0, a)?;
                Ok(i * gain + motion * dc + schedule.ambient_offset_counts)
            };
            out.push((channel(Channel::Red, dc_red)?, channel(Channel::Infrared, dc_ir)?));
        }
        Ok(out)
    }

    pub fn synthesize(
        &self,
        profile: &PhysioProfile,
        schedule: &ArtifactSchedule,
        fs_hz: f64,
        duration_s: f64,
        seed: u64,
    ) -> Result<SampleStream, SynthError> {
        let analog = self.analog(profile, schedule, fs_hz, duration_s)?;
        let mut rng = Lcg64::new(seed);
        let samples = analog
            .into_iter()
            .enumerate()
            .map(|(i, (red, ir))| {
                let red = quantize(red + rng.dither());
                let ir = quantize(ir + rng.dither());
                let ambient = quantize(schedule.ambient_offset_counts + rng.dither());
                DualSample {
                    t_s: i as f64 / fs_hz,
                    red,
                    ir,
                    ambient,
                }
            })
            .collect();
        Ok(SampleStream::new(fs_hz, samples))
    }
}

/// Synthesizes a stream with the default optical model.
pub fn synthesize(
    profile: &PhysioProfile,
    schedule: &ArtifactSchedule,
    fs_hz: f64,
    duration_s: f64,
    seed: u64,
) -> Result<SampleStream, SynthError> {
    Synthesizer::default().synthesize(profile, schedule, fs_hz, duration_s, seed)
}

/// Reference value for one second of a session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRecord {
    pub t_s: f64,
    pub sao2_percent: f64,
    pub hr_bpm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSegment {
    pub profile: PhysioProfile,
    pub duration_s: f64,
}

/// Per-second reference series for a constant profile.
pub fn ground_truth(profile: &PhysioProfile, duration_s: f64) -> Vec<TruthRecord> {
    ground_truth_piecewise(&[ProfileSegment {
        profile: *profile,
        duration_s,
    }])
}

/// Per-second reference series; record `k` holds the profile active at `t = k` s.
pub fn ground_truth_piecewise(segments: &[ProfileSegment]) -> Vec<TruthRecord> {
    let total: f64 = segments.iter().map(|s| s.duration_s.max(0.0)).sum();
    let seconds = total.ceil() as usize;
    let mut out = Vec::with_capacity(seconds);
    for k in 0..seconds {
        let t = k as f64;
        let mut end = 0.0;
        let active = segments
            .iter()
            .find(|s| {
                end += s.duration_s.max(0.0);
                t < end
            })
            .or(segments.last());
        if let Some(seg) = active {
            out.push(TruthRecord {
                t_s: t,
                sao2_percent: seg.profile.sao2_percent,
                hr_bpm: seg.profile.heart_rate_bpm,
            });
        }
    }
    out
}
