//! Plain-text `key = value` configuration shared by every module.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored.
//! Numbers use ordinary decimal notation. Keys are namespaced with a dot
//! (`profile.sao2_percent`, `estimator.window_s`, ...). Unknown keys are
//! rejected by [`Settings::from_kv`] so typos never go unnoticed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::estimator::EstimatorConfig;
use crate::optics::{CalibrationCurve, ExtinctionTable};
use crate::synth::{ArtifactSchedule, MotionEvent, PhysioProfile, SupplyGain};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered key/value store backing every config file in the project.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: idx + 1,
                    message: "empty key".into(),
                });
            }
            if cfg
                .entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(ConfigError::DuplicateKey(key.to_string()));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Inserts or replaces a value (used for command-line overrides).
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, entry: &str) -> Result<(), ConfigError> {
        let (key, value) = entry.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            message: format!("override `{entry}` is not `key=value`"),
        })?;
        self.set(key.trim(), value.trim());
        Ok(())
    }

    /// Copies every entry of `other` over this config.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| ConfigError::InvalidValue {
                key: key.to_string(),
                value: raw.to_string(),
                reason: e.to_string(),
            }),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        let v = self.get_parsed::<f64>(key)?;
        match v {
            Some(x) if !x.is_finite() => Err(ConfigError::InvalidValue {
                key: key.to_string(),
                value: x.to_string(),
                reason: "must be finite".into(),
            }),
            other => Ok(other),
        }
    }

    pub fn require_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get_f64(key)?
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some("true" | "on" | "yes" | "1") => Ok(Some(true)),
            Some("false" | "off" | "no" | "0") => Ok(Some(false)),
            Some(other) => Err(ConfigError::InvalidValue {
                key: key.to_string(),
                value: other.to_string(),
                reason: "expected true/false".into(),
            }),
        }
    }

    /// Fails on the first key not listed in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }

    /// Canonical rendering: sorted keys, `key = value`, LF line endings.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

pub(crate) fn invalid(key: &str, value: impl fmt::Display, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

pub const PROFILE_KEYS: &[&str] = &[
    "profile.sao2_percent",
    "profile.heart_rate_bpm",
    "profile.perfusion_index",
    "profile.dc_level_counts",
];

pub const ARTIFACT_KEYS: &[&str] = &[
    "artifact.supply_amplitude",
    "artifact.supply_freq_hz",
    "artifact.ambient_offset_counts",
    "artifact.motion",
];

pub const SYNTH_KEYS: &[&str] = &["synth.fs_hz", "synth.duration_s"];

pub const ESTIMATOR_KEYS: &[&str] = &[
    "estimator.window_s",
    "estimator.dc_cutoff_hz",
    "estimator.ac_band_lo_hz",
    "estimator.ac_band_hi_hz",
    "estimator.min_peak_distance_s",
    "estimator.peak_prominence_fraction",
    "estimator.ambient_subtraction",
];

/// Every key accepted by [`Settings::from_kv`].
pub fn known_keys() -> Vec<&'static str> {
    PROFILE_KEYS
        .iter()
        .chain(ARTIFACT_KEYS)
        .chain(SYNTH_KEYS)
        .chain(ESTIMATOR_KEYS)
        .chain(ExtinctionTable::KEYS)
        .chain(CalibrationCurve::KEYS)
        .copied()
        .collect()
}

/// Fully resolved settings for one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub profile: PhysioProfile,
    pub schedule: ArtifactSchedule,
    pub fs_hz: f64,
    pub duration_s: f64,
    pub table: ExtinctionTable,
    pub estimator: EstimatorConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            profile: PhysioProfile::default(),
            schedule: ArtifactSchedule::default(),
            fs_hz: 100.0,
            duration_s: 60.0,
            table: ExtinctionTable::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

impl Settings {
    /// Starts from defaults and applies every key present in `kv`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        kv.reject_unknown(&known_keys())?;
        let mut s = Settings::default();

        let p = &mut s.profile;
        if let Some(v) = kv.get_f64("profile.sao2_percent")? {
            p.sao2_percent = v;
        }
        if let Some(v) = kv.get_f64("profile.heart_rate_bpm")? {
            p.heart_rate_bpm = v;
        }
        if let Some(v) = kv.get_f64("profile.perfusion_index")? {
            p.perfusion_index = v;
        }
        if let Some(v) = kv.get_f64("profile.dc_level_counts")? {
            p.dc_level_counts = v;
        }
        p.validate()
            .map_err(|e| invalid("profile", format!("{p:?}"), e.to_string()))?;

        let sch = &mut s.schedule;
        let amp = kv.get_f64("artifact.supply_amplitude")?;
        let freq = kv.get_f64("artifact.supply_freq_hz")?;
        if amp.is_some() || freq.is_some() {
            sch.supply_gain = SupplyGain {
                amplitude_fraction: amp.unwrap_or(sch.supply_gain.amplitude_fraction),
                freq_hz: freq.unwrap_or(sch.supply_gain.freq_hz),
            };
        }
        if let Some(v) = kv.get_f64("artifact.ambient_offset_counts")? {
            sch.ambient_offset_counts = v;
        }
        if let Some(raw) = kv.get("artifact.motion") {
            sch.motion_events = parse_motion_events(raw)?;
        }
        sch.validate()
            .map_err(|e| invalid("artifact", format!("{sch:?}"), e.to_string()))?;

        if let Some(v) = kv.get_f64("synth.fs_hz")? {
            s.fs_hz = v;
        }
        if let Some(v) = kv.get_f64("synth.duration_s")? {
            s.duration_s = v;
        }
        if !(s.fs_hz.is_finite() && s.fs_hz >= 25.0) {
            return Err(invalid("synth.fs_hz", s.fs_hz.to_string(), "must be at least 25 Hz"));
        }
        if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
            return Err(invalid("synth.duration_s", s.duration_s.to_string(), "must be positive"));
        }

        s.table = ExtinctionTable::from_kv(kv)?;

        let e = &mut s.estimator;
        if let Some(v) = kv.get_f64("estimator.window_s")? {
            e.window_s = v;
        }
        if let Some(v) = kv.get_f64("estimator.dc_cutoff_hz")? {
            e.dc_cutoff_hz = v;
        }
        if let Some(v) = kv.get_f64("estimator.ac_band_lo_hz")? {
            e.ac_band_hz.0 = v;
        }
        if let Some(v) = kv.get_f64("estimator.ac_band_hi_hz")? {
            e.ac_band_hz.1 = v;
        }
        if let Some(v) = kv.get_f64("estimator.min_peak_distance_s")? {
            e.min_peak_distance_s = v;
        }
        if let Some(v) = kv.get_f64("estimator.peak_prominence_fraction")? {
            e.peak_prominence_fraction = v;
        }
        if let Some(v) = kv.get_bool("estimator.ambient_subtraction")? {
            e.ambient_subtraction = v;
        }
        if CalibrationCurve::KEYS.iter().any(|k| kv.contains(k)) {
            e.calibration = CalibrationCurve::from_kv(kv)?;
        }
        e.validate()
            .map_err(|err| invalid("estimator", format!("{e:?}"), err.to_string()))?;

        Ok(s)
    }

    /// Canonical key/value form of these settings; the basis of config hashes.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        let p = &self.profile;
        kv.set("profile.sao2_percent", p.sao2_percent.to_string());
        kv.set("profile.heart_rate_bpm", p.heart_rate_bpm.to_string());
        kv.set("profile.perfusion_index", p.perfusion_index.to_string());
        kv.set("profile.dc_level_counts", p.dc_level_counts.to_string());
        let sch = &self.schedule;
        kv.set(
            "artifact.supply_amplitude",
            sch.supply_gain.amplitude_fraction.to_string(),
        );
        kv.set("artifact.supply_freq_hz", sch.supply_gain.freq_hz.to_string());
        kv.set(
            "artifact.ambient_offset_counts",
            sch.ambient_offset_counts.to_string(),
        );
        kv.set("artifact.motion", format_motion_events(&sch.motion_events));
        kv.set("synth.fs_hz", self.fs_hz.to_string());
        kv.set("synth.duration_s", self.duration_s.to_string());
        kv.merge(&self.table.to_kv());
        let e = &self.estimator;
        kv.set("estimator.window_s", e.window_s.to_string());
        kv.set("estimator.dc_cutoff_hz", e.dc_cutoff_hz.to_string());
        kv.set("estimator.ac_band_lo_hz", e.ac_band_hz.0.to_string());
        kv.set("estimator.ac_band_hi_hz", e.ac_band_hz.1.to_string());
        kv.set("estimator.min_peak_distance_s", e.min_peak_distance_s.to_string());
        kv.set(
            "estimator.peak_prominence_fraction",
            e.peak_prominence_fraction.to_string(),
        );
        kv.set("estimator.ambient_subtraction", e.ambient_subtraction.to_string());
        kv.merge(&e.calibration.to_kv());
        kv
    }
}

/// Motion events are written `start_s:duration_s:amplitude_fraction`,
/// separated by `;`. An empty value means no events.
pub fn parse_motion_events(raw: &str) -> Result<Vec<MotionEvent>, ConfigError> {
    let mut events = Vec::new();
    for part in raw.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let fields: Vec<&str> = part.split(':').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(invalid(
                "artifact.motion",
                part,
                "expected start_s:duration_s:amplitude_fraction",
            ));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| invalid("artifact.motion", part, "non-numeric field"))
        };
        events.push(MotionEvent {
            start_s: num(fields[0])?,
            duration_s: num(fields[1])?,
            amplitude_fraction: num(fields[2])?,
        });
    }
    Ok(events)
}

pub fn format_motion_events(events: &[MotionEvent]) -> String {
    events
        .iter()
        .map(|e| format!("{}:{}:{}", e.start_s, e.duration_s, e.amplitude_fraction))
        .collect::<Vec<_>>()
        .join(";")
}
