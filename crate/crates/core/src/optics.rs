//! Beer-Lambert forward model and the analytic SpO₂ ↔ R relationship.
//!
//! Absorbance is decadic: `A = ε·c·L`, transmitted intensity `I = I₀·10^(−A)`.
//! For small arterial path pulsations the pulsatile absorbance at each
//! wavelength is `ΔA = (ε_Hb·c_Hb + ε_HbO₂·c_HbO₂)·ΔL`; the path change is
//! common to both wavelengths and cancels in the red/infrared ratio, which
//! leaves [`theoretical_r`] as a function of saturation alone.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};

#[derive(Debug, Error, PartialEq)]
pub enum OpticsError {
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("{name} = {value} is out of domain: {reason}")]
    OutOfDomain {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("total hemoglobin concentration is zero")]
    ZeroConcentration,
    #[error("invalid extinction table: {0}")]
    InvalidTable(&'static str),
    #[error("calibration degree must be 1 or 2, got {0}")]
    UnsupportedDegree(usize),
    #[error("fit needs at least {needed} distinct R values, got {got}")]
    RankDeficient { needed: usize, got: usize },
    #[error("fitted curve is not strictly decreasing over R in [{r_lo}, {r_hi}]")]
    NotDecreasing { r_lo: f64, r_hi: f64 },
}

fn finite(name: &'static str, value: f64) -> Result<f64, OpticsError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(OpticsError::NonFinite { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Red,
    Infrared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavelengthChannel {
    pub label: Channel,
    pub wavelength_nm: f64,
}

impl WavelengthChannel {
    pub const RED: Self = Self {
        label: Channel::Red,
        wavelength_nm: 660.0,
    };
    pub const INFRARED: Self = Self {
        label: Channel::Infrared,
        wavelength_nm: 940.0,
    };

    /// Water absorption is negligible below 1000 nm; above 600 nm keeps
    /// both hemoglobin species in their tabulated two-band regime.
    pub fn new(label: Channel, wavelength_nm: f64) -> Result<Self, OpticsError> {
        let wavelength_nm = finite("wavelength_nm", wavelength_nm)?;
        if !(wavelength_nm > 600.0 && wavelength_nm < 1000.0) {
            return Err(OpticsError::OutOfDomain {
                name: "wavelength_nm",
                value: wavelength_nm,
                reason: "must lie in (600, 1000) nm",
            });
        }
        Ok(Self {
            label,
            wavelength_nm,
        })
    }

    pub fn validate_pair(red: &Self, infrared: &Self) -> Result<(), OpticsError> {
        if red.label != Channel::Red || infrared.label != Channel::Infrared {
            return Err(OpticsError::InvalidTable("channel labels swapped"));
        }
        if red.wavelength_nm >= infrared.wavelength_nm {
            return Err(OpticsError::InvalidTable(
                "red wavelength must be shorter than infrared",
            ));
        }
        Ok(())
    }
}

/// Molar extinction coefficients of one wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extinction {
    pub eps_hb: f64,
    pub eps_hbo2: f64,
}

impl Extinction {
    /// Extinction of a mixture with oxygen saturation `sao2` (fraction).
    pub fn mixed(&self, sao2: f64) -> f64 {
        self.eps_hb + (self.eps_hbo2 - self.eps_hb) * sao2
    }
}

/// Extinction coefficients at the red and infrared working wavelengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtinctionTable {
    pub red: Extinction,
    pub infrared: Extinction,
}

impl Default for ExtinctionTable {
    /// Standard tabulated hemoglobin values at 660 nm and 940 nm.
    fn default() -> Self {
        Self {
            red: Extinction {
                eps_hb: 3226.56,
                eps_hbo2: 319.6,
            },
            infrared: Extinction {
                eps_hb: 693.44,
                eps_hbo2: 1214.0,
            },
        }
    }
}

impl ExtinctionTable {
    pub const KEYS: &'static [&'static str] = &[
        "optics.eps_hb_red",
        "optics.eps_hbo2_red",
        "optics.eps_hb_ir",
        "optics.eps_hbo2_ir",
    ];

    pub fn new(red: Extinction, infrared: Extinction) -> Result<Self, OpticsError> {
        let t = Self { red, infrared };
        t.validate()?;
        Ok(t)
    }

    /// Deoxy dominates in the red, oxy dominates in the infrared, all positive.
    pub fn validate(&self) -> Result<(), OpticsError> {
        let all = [
            self.red.eps_hb,
            self.red.eps_hbo2,
            self.infrared.eps_hb,
            self.infrared.eps_hbo2,
        ];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(OpticsError::InvalidTable("coefficients must be finite and > 0"));
        }
        if self.red.eps_hb <= self.red.eps_hbo2 {
            return Err(OpticsError::InvalidTable("need eps_hb(red) > eps_hbo2(red)"));
        }
        if self.infrared.eps_hbo2 <= self.infrared.eps_hb {
            return Err(OpticsError::InvalidTable(
                "need eps_hbo2(infrared) > eps_hb(infrared)",
            ));
        }
        Ok(())
    }

    pub fn channel(&self, channel: Channel) -> &Extinction {
        match channel {
            Channel::Red => &self.red,
            Channel::Infrared => &self.infrared,
        }
    }

    /// Reads the four `optics.*` keys on top of the default table.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let mut t = Self::default();
        if let Some(v) = kv.get_f64("optics.eps_hb_red")? {
            t.red.eps_hb = v;
        }
        if let Some(v) = kv.get_f64("optics.eps_hbo2_red")? {
            t.red.eps_hbo2 = v;
        }
        if let Some(v) = kv.get_f64("optics.eps_hb_ir")? {
            t.infrared.eps_hb = v;
        }
        if let Some(v) = kv.get_f64("optics.eps_hbo2_ir")? {
            t.infrared.eps_hbo2 = v;
        }
        t.validate()
            .map_err(|e| crate::config::invalid("optics", format!("{t:?}"), e.to_string()))?;
        Ok(t)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("optics.eps_hb_red", self.red.eps_hb.to_string());
        kv.set("optics.eps_hbo2_red", self.red.eps_hbo2.to_string());
        kv.set("optics.eps_hb_ir", self.infrared.eps_hb.to_string());
        kv.set("optics.eps_hbo2_ir", self.infrared.eps_hbo2.to_string());
        kv
    }
}

/// Concentrations (in the extinction table's concentration unit) and path length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloodState {
    pub c_hb: f64,
    pub c_hbo2: f64,
    pub path_length_cm: f64,
}

impl BloodState {
    pub fn new(c_hb: f64, c_hbo2: f64, path_length_cm: f64) -> Result<Self, OpticsError> {
        let state = Self {
            c_hb,
            c_hbo2,
            path_length_cm,
        };
        state.validate()?;
        Ok(state)
    }

    /// Builds a state from total hemoglobin and a saturation fraction.
    pub fn from_saturation(
        total: f64,
        sao2: f64,
        path_length_cm: f64,
    ) -> Result<Self, OpticsError> {
        if !(0.0..=1.0).contains(&sao2) {
            return Err(OpticsError::OutOfDomain {
                name: "sao2",
                value: sao2,
                reason: "must lie in [0, 1]",
            });
        }
        Self::new(total * (1.0 - sao2), total * sao2, path_length_cm)
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        finite("c_hb", self.c_hb)?;
        finite("c_hbo2", self.c_hbo2)?;
        finite("path_length_cm", self.path_length_cm)?;
        if self.c_hb < 0.0 || self.c_hbo2 < 0.0 {
            return Err(OpticsError::OutOfDomain {
                name: "concentration",
                value: self.c_hb.min(self.c_hbo2),
                reason: "must be >= 0",
            });
        }
        if self.path_length_cm <= 0.0 {
            return Err(OpticsError::OutOfDomain {
                name: "path_length_cm",
                value: self.path_length_cm,
                reason: "must be > 0",
            });
        }
        if self.c_hb + self.c_hbo2 <= 0.0 {
            return Err(OpticsError::ZeroConcentration);
        }
        Ok(())
    }

    /// Total decadic absorbance of both hemoglobin species at one wavelength.
    pub fn absorbance(&self, table: &ExtinctionTable, channel: Channel) -> Result<f64, OpticsError> {
        let eps = table.channel(channel);
        Ok(absorbance(eps.eps_hb, self.c_hb, self.path_length_cm)?
            + absorbance(eps.eps_hbo2, self.c_hbo2, self.path_length_cm)?)
    }
}

/// Decadic absorbance `ε·c·L`.
pub fn absorbance(eps: f64, conc: f64, path: f64) -> Result<f64, OpticsError> {
    let eps = finite("eps", eps)?;
    let conc = finite("conc", conc)?;
    let path = finite("path", path)?;
    if eps <= 0.0 {
        return Err(OpticsError::OutOfDomain {
            name: "eps",
            value: eps,
            reason: "must be > 0",
        });
    }
    if conc < 0.0 {
        return Err(OpticsError::OutOfDomain {
            name: "conc",
            value: conc,
            reason: "must be >= 0",
        });
    }
    if path <= 0.0 {
        return Err(OpticsError::OutOfDomain {
            name: "path",
            value: path,
            reason: "must be > 0",
        });
    }
    Ok(eps * conc * path)
}

/// `I₀·10^(−A)`.
pub fn transmitted_intensity(i0: f64, total_absorbance: f64) -> Result<f64, OpticsError> {
    let i0 = finite("i0", i0)?;
    let a = finite("total_absorbance", total_absorbance)?;
    if i0 <= 0.0 {
        return Err(OpticsError::OutOfDomain {
            name: "i0",
            value: i0,
            reason: "must be > 0",
        });
    }
    if a < 0.0 {
        return Err(OpticsError::OutOfDomain {
            name: "total_absorbance",
            value: a,
            reason: "must be >= 0",
        });
    }
    Ok(i0 * 10f64.powf(-a))
}

/// Functional saturation HbO₂ / (Hb + HbO₂).
pub fn sao2_fraction(state: &BloodState) -> Result<f64, OpticsError> {
    state.validate()?;
    Ok(state.c_hbo2 / (state.c_hb + state.c_hbo2))
}

/// Red-over-infrared ratio of pulsatile absorbances at saturation `sao2`.
pub fn theoretical_r(sao2: f64, table: &ExtinctionTable) -> Result<f64, OpticsError> {
    let s = finite("sao2", sao2)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(OpticsError::OutOfDomain {
            name: "sao2",
            value: s,
            reason: "must lie in [0, 1]",
        });
    }
    table.validate()?;
    let den = table.infrared.mixed(s);
    if den <= 0.0 {
        return Err(OpticsError::OutOfDomain {
            name: "infrared extinction",
            value: den,
            reason: "must be > 0",
        });
    }
    Ok(table.red.mixed(s) / den)
}

/// Polynomial map from R to SpO₂ percent, valid over `r_range`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    /// Ascending powers: `spo2 = c0 + c1·R (+ c2·R²)`.
    pub coefficients: Vec<f64>,
    pub r_range: (f64, f64),
    /// Fit residuals in percentage points.
    pub residual_rms: f64,
    pub residual_max: f64,
}

/// SpO₂ looked up from a calibration curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedSpo2 {
    pub percent: f64,
    pub extrapolated: bool,
}

const DEFAULT_CALIBRATION: &str = include_str!("../data/default_calibration.cfg");

impl Default for CalibrationCurve {
    /// The shipped degree-2 fit to [`theoretical_r`] over 70–100 %.
    fn default() -> Self {
        Self::from_text(DEFAULT_CALIBRATION).expect("shipped calibration file is valid")
    }
}

impl CalibrationCurve {
    pub const KEYS: &'static [&'static str] = &[
        "calibration.degree",
        "calibration.c0",
        "calibration.c1",
        "calibration.c2",
        "calibration.r_lo",
        "calibration.r_hi",
        "calibration.residual_rms_pp",
        "calibration.residual_max_pp",
    ];

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Raw polynomial value, no clamping.
    pub fn polynomial(&self, r: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * r + c)
    }

    fn slope(&self, r: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| k as f64 * c * r.powi(k as i32 - 1))
            .sum()
    }

    /// Curve value with tangent-line continuation outside `r_range`, so the
    /// mapping stays decreasing for any R.
    pub fn evaluate(&self, r: f64) -> f64 {
        let (lo, hi) = self.r_range;
        if r < lo {
            self.polynomial(lo) + self.slope(lo) * (r - lo)
        } else if r > hi {
            self.polynomial(hi) + self.slope(hi) * (r - hi)
        } else {
            self.polynomial(r)
        }
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        if !(2..=3).contains(&self.coefficients.len()) {
            return Err(OpticsError::UnsupportedDegree(
                self.coefficients.len().saturating_sub(1),
            ));
        }
        for c in &self.coefficients {
            finite("coefficient", *c)?;
        }
        let (lo, hi) = self.r_range;
        finite("r_lo", lo)?;
        finite("r_hi", hi)?;
        if lo >= hi || self.slope(lo) >= 0.0 || self.slope(hi) >= 0.0 {
            return Err(OpticsError::NotDecreasing { r_lo: lo, r_hi: hi });
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let degree = kv
            .get_parsed::<usize>("calibration.degree")?
            .ok_or_else(|| ConfigError::MissingKey("calibration.degree".into()))?;
        if !(1..=2).contains(&degree) {
            return Err(crate::config::invalid(
                "calibration.degree",
                degree,
                "must be 1 or 2",
            ));
        }
        let mut coefficients = Vec::with_capacity(degree + 1);
        for k in 0..=degree {
            coefficients.push(kv.require_f64(&format!("calibration.c{k}"))?);
        }
        if degree == 1 && kv.contains("calibration.c2") {
            return Err(crate::config::invalid(
                "calibration.c2",
                kv.get("calibration.c2").unwrap_or_default(),
                "degree-1 curve has no c2",
            ));
        }
        let curve = Self {
            coefficients,
            r_range: (
                kv.require_f64("calibration.r_lo")?,
                kv.require_f64("calibration.r_hi")?,
            ),
            residual_rms: kv.get_f64("calibration.residual_rms_pp")?.unwrap_or(0.0),
            residual_max: kv.get_f64("calibration.residual_max_pp")?.unwrap_or(0.0),
        };
        curve
            .validate()
            .map_err(|e| crate::config::invalid("calibration", format!("{curve:?}"), e.to_string()))?;
        Ok(curve)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("calibration.degree", self.degree().to_string());
        for (k, c) in self.coefficients.iter().enumerate() {
            kv.set(format!("calibration.c{k}"), c.to_string());
        }
        kv.set("calibration.r_lo", self.r_range.0.to_string());
        kv.set("calibration.r_hi", self.r_range.1.to_string());
        kv.set("calibration.residual_rms_pp", self.residual_rms.to_string());
        kv.set("calibration.residual_max_pp", self.residual_max.to_string());
        kv
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        Self::from_kv(&KvConfig::parse(text)?)
    }

    /// Constants-file form, as written by `pulseox calibrate`.
    pub fn to_text(&self) -> String {
        format!(
            "# SpO2 calibration: spo2_percent = c0 + c1*R{}\n\
             # R = (AC_red/DC_red)/(AC_ir/DC_ir); residuals in percentage points\n{}",
            if self.degree() == 2 { " + c2*R^2" } else { "" },
            self.to_kv().render()
        )
    }
}

/// Least-squares polynomial fit of `(R, spo2_percent)` samples.
pub fn fit_calibration(
    samples: &[(f64, f64)],
    degree: usize,
) -> Result<CalibrationCurve, OpticsError> {
    if !(1..=2).contains(&degree) {
        return Err(OpticsError::UnsupportedDegree(degree));
    }
    for &(r, s) in samples {
        finite("R", r)?;
        finite("sao2_percent", s)?;
        if !(0.0..=100.0).contains(&s) {
            return Err(OpticsError::OutOfDomain {
                name: "sao2_percent",
                value: s,
                reason: "must lie in [0, 100]",
            });
        }
    }
    let mut distinct: Vec<f64> = samples.iter().map(|s| s.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let needed = degree + 1;
    if distinct.len() < needed {
        return Err(OpticsError::RankDeficient {
            needed,
            got: distinct.len(),
        });
    }

    let design = DMatrix::from_fn(samples.len(), needed, |i, j| samples[i].0.powi(j as i32));
    let target = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= smax * 1e-12 {
        return Err(OpticsError::RankDeficient {
            needed,
            got: distinct.len(),
        });
    }
    let solution = svd
        .solve(&target, smax * 1e-14)
        .map_err(|_| OpticsError::RankDeficient {
            needed,
            got: distinct.len(),
        })?;

    let coefficients: Vec<f64> = solution.iter().copied().collect();
    let r_range = (distinct[0], distinct[distinct.len() - 1]);
    let mut curve = CalibrationCurve {
        coefficients,
        r_range,
        residual_rms: 0.0,
        residual_max: 0.0,
    };
    curve.validate()?;

    let residuals: Vec<f64> = samples
        .iter()
        .map(|&(r, s)| curve.polynomial(r) - s)
        .collect();
    curve.residual_rms =
        (residuals.iter().map(|e| e * e).sum::<f64>() / residuals.len() as f64).sqrt();
    curve.residual_max = residuals.iter().fold(0.0, |m, e| m.max(e.abs()));
    Ok(curve)
}

/// Maps a measured R to SpO₂ percent, clamped to `[0, 100]`.
pub fn invert_calibration(curve: &CalibrationCurve, r: f64) -> CalibratedSpo2 {
    if r.is_nan() {
        return CalibratedSpo2 {
            percent: 0.0,
            extrapolated: true,
        };
    }
    let (lo, hi) = curve.r_range;
    CalibratedSpo2 {
        percent: curve.evaluate(r).clamp(0.0, 100.0),
        extrapolated: r < lo || r > hi,
    }
}

/// Samples of the analytic curve at integer saturations `lo..=hi` percent.
pub fn oracle_samples(
    table: &ExtinctionTable,
    lo_percent: u32,
    hi_percent: u32,
) -> Result<Vec<(f64, f64)>, OpticsError> {
    (lo_percent..=hi_percent)
        .map(|p| Ok((theoretical_r(f64::from(p) / 100.0, table)?, f64::from(p))))
        .collect()
}

/// Calibration fitted to [`theoretical_r`] over 70–100 % saturation.
pub fn oracle_calibration(
    table: &ExtinctionTable,
    degree: usize,
) -> Result<CalibrationCurve, OpticsError> {
    fit_calibration(&oracle_samples(table, 70, 100)?, degree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn absorbance_examples() {
        assert_eq!(absorbance(100.0, 0.0, 1.0).unwrap(), 0.0);
        let a = absorbance(3226.56, 0.001, 1.0).unwrap();
        assert_relative_eq!(a, 3.22656, max_relative = 1e-12);
        let one = absorbance(700.0, 0.002, 0.3).unwrap();
        let two = absorbance(700.0, 0.002, 0.6).unwrap();
        assert_relative_eq!(two, 2.0 * one, max_relative = 1e-15);
    }

    #[test]
    fn absorbance_rejects_bad_inputs() {
        assert!(absorbance(f64::NAN, 1.0, 1.0).is_err());
        assert!(absorbance(1.0, -0.1, 1.0).is_err());
        assert!(absorbance(1.0, 0.1, 0.0).is_err());
        assert!(absorbance(-1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn transmitted_intensity_examples() {
        assert_eq!(transmitted_intensity(1.0, 0.0).unwrap(), 1.0);
        assert_relative_eq!(transmitted_intensity(1.0, 1.0).unwrap(), 0.1, max_relative = 1e-15);
        // 10^-0.5 via an independent route: 1/sqrt(10).
        let got = transmitted_intensity(2.5, 0.5).unwrap();
        assert_relative_eq!(got, 2.5 / 10f64.sqrt(), max_relative = 1e-12);
        assert!(transmitted_intensity(0.0, 1.0).is_err());
        assert!(transmitted_intensity(1.0, -1.0).is_err());
    }

    #[test]
    fn saturation_fraction_examples() {
        let full = BloodState::new(0.0, 0.4, 1.0).unwrap();
        assert_eq!(sao2_fraction(&full).unwrap(), 1.0);
        let half = BloodState::new(0.2, 0.2, 1.0).unwrap();
        assert_eq!(sao2_fraction(&half).unwrap(), 0.5);
        for k in [1e-3, 1.0, 17.0] {
            let s = BloodState::new(0.03 * k, 0.97 * k, 1.0).unwrap();
            assert_relative_eq!(sao2_fraction(&s).unwrap(), 0.97, max_relative = 1e-14);
        }
        assert_eq!(
            BloodState::new(0.0, 0.0, 1.0).unwrap_err(),
            OpticsError::ZeroConcentration
        );
    }

    #[test]
    fn mixture_absorbance_is_additive() {
        let t = ExtinctionTable::default();
        let state = BloodState::new(0.0007, 0.0016, 0.05).unwrap();
        for ch in [Channel::Red, Channel::Infrared] {
            let eps = t.channel(ch);
            let separate = eps.eps_hb * 0.0007 * 0.05 + eps.eps_hbo2 * 0.0016 * 0.05;
            let mixed = state.absorbance(&t, ch).unwrap();
            assert!((mixed - separate).abs() <= 1e-12);
        }
    }

    #[test]
    fn theoretical_r_endpoints() {
        let t = ExtinctionTable::default();
        assert_relative_eq!(theoretical_r(1.0, &t).unwrap(), 319.6 / 1214.0, max_relative = 1e-14);
        assert_relative_eq!(theoretical_r(1.0, &t).unwrap(), 0.26326, max_relative = 1e-5);
        assert_relative_eq!(
            theoretical_r(0.0, &t).unwrap(),
            3226.56 / 693.44,
            max_relative = 1e-14
        );
        assert_relative_eq!(theoretical_r(0.0, &t).unwrap(), 4.65297, max_relative = 1e-5);
        assert!(theoretical_r(1.1, &t).is_err());
    }

    #[test]
    fn default_table_matches_qualitative_spectra() {
        ExtinctionTable::default().validate().unwrap();
        let bad = ExtinctionTable {
            red: Extinction {
                eps_hb: 100.0,
                eps_hbo2: 200.0,
            },
            ..ExtinctionTable::default()
        };
        assert!(bad.validate().is_err());
        WavelengthChannel::validate_pair(&WavelengthChannel::RED, &WavelengthChannel::INFRARED)
            .unwrap();
        assert!(WavelengthChannel::new(Channel::Infrared, 1064.0).is_err());
        assert!(
            WavelengthChannel::validate_pair(&WavelengthChannel::INFRARED, &WavelengthChannel::RED)
                .is_err()
        );
    }

    #[test]
    fn exact_line_is_recovered() {
        let (a, b) = (110.0, 25.0);
        let samples: Vec<_> = (0..12)
            .map(|i| {
                let r = 0.4 + 0.05 * f64::from(i);
                (r, a - b * r)
            })
            .collect();
        let c = fit_calibration(&samples, 1).unwrap();
        assert_relative_eq!(c.coefficients[0], a, max_relative = 1e-9);
        assert_relative_eq!(c.coefficients[1], -b, max_relative = 1e-9);

        let two = fit_calibration(&[(0.5, 97.5), (1.0, 85.0)], 1).unwrap();
        assert_relative_eq!(two.coefficients[0], a, max_relative = 1e-9);
        assert_relative_eq!(two.coefficients[1], -b, max_relative = 1e-9);
        assert!(two.residual_max < 1e-9);
    }

    #[test]
    fn rank_deficient_and_increasing_fits_fail() {
        assert!(matches!(
            fit_calibration(&[(0.5, 90.0), (0.5, 91.0), (0.5, 92.0)], 1),
            Err(OpticsError::RankDeficient { .. })
        ));
        assert!(matches!(
            fit_calibration(&[(0.5, 90.0), (0.6, 91.0)], 2),
            Err(OpticsError::RankDeficient { .. })
        ));
        assert!(matches!(
            fit_calibration(&[(0.5, 90.0), (0.6, 95.0)], 1),
            Err(OpticsError::NotDecreasing { .. })
        ));
        assert!(fit_calibration(&[(0.5, 90.0), (0.6, 120.0)], 1).is_err());
        assert!(matches!(
            fit_calibration(&[(0.5, 90.0), (0.6, 85.0)], 3),
            Err(OpticsError::UnsupportedDegree(3))
        ));
    }

    #[test]
    fn quadratic_fit_to_oracle_residual() {
        // Measured during development: max residual 0.0257 pp (linear fit: 0.67 pp).
        let t = ExtinctionTable::default();
        let c = oracle_calibration(&t, 2).unwrap();
        assert!(c.residual_max <= 1.0);
        assert!(c.residual_max < 0.03, "residual {}", c.residual_max);
        let lin = oracle_calibration(&t, 1).unwrap();
        assert!(lin.residual_max < 1.0 && lin.residual_max > c.residual_max);
    }

    #[test]
    fn shipped_calibration_matches_regenerated_fit() {
        let fresh = oracle_calibration(&ExtinctionTable::default(), 2).unwrap();
        assert_eq!(fresh.to_text(), DEFAULT_CALIBRATION);
        assert_eq!(CalibrationCurve::default(), fresh);
    }

    #[test]
    fn invert_round_trips_oracle() {
        let t = ExtinctionTable::default();
        let c = CalibrationCurve::default();
        let got = invert_calibration(&c, theoretical_r(0.97, &t).unwrap());
        assert!((got.percent - 97.0).abs() <= c.residual_max + 1e-12);
        assert!(!got.extrapolated);
        for p in 70..=100 {
            let r = theoretical_r(f64::from(p) / 100.0, &t).unwrap();
            assert!((invert_calibration(&c, r).percent - f64::from(p)).abs() <= 1.0);
        }
    }

    #[test]
    fn invert_clamps_and_flags() {
        let c = CalibrationCurve::default();
        let far = invert_calibration(&c, 1e6);
        assert_eq!(far.percent, 0.0);
        assert!(far.extrapolated);
        let top = invert_calibration(&c, c.r_range.0);
        assert_relative_eq!(top.percent, c.polynomial(c.r_range.0));
        assert!((top.percent - 100.0).abs() <= c.residual_max);
        assert_eq!(invert_calibration(&c, -5.0).percent, 100.0);
        assert!(invert_calibration(&c, f64::NAN).extrapolated);
    }

    #[test]
    fn calibration_text_round_trip() {
        let c = CalibrationCurve::default();
        assert_eq!(CalibrationCurve::from_text(&c.to_text()).unwrap(), c);
        let line = fit_calibration(&[(0.5, 97.5), (1.0, 85.0)], 1).unwrap();
        assert_eq!(CalibrationCurve::from_text(&line.to_text()).unwrap(), line);
    }

    proptest! {
        #[test]
        fn theoretical_r_strictly_decreasing(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let t = ExtinctionTable::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(theoretical_r(lo, &t).unwrap() > theoretical_r(hi, &t).unwrap());
        }

        #[test]
        fn transmission_monotone_and_multiplicative(
            i0 in 0.1f64..1e5, a in 0.0f64..5.0, da in 1e-6f64..1.0, k in 0.1f64..10.0
        ) {
            let base = transmitted_intensity(i0, a).unwrap();
            prop_assert!(transmitted_intensity(i0, a + da).unwrap() < base);
            prop_assert!(base <= i0);
            let scaled = transmitted_intensity(k * i0, a).unwrap();
            prop_assert!((scaled - k * base).abs() <= 1e-12 * scaled.abs().max(1.0));
        }

        #[test]
        fn saturation_scale_invariant(hb in 0.0f64..1.0, o2 in 1e-6f64..1.0, k in 1e-3f64..1e3) {
            let a = sao2_fraction(&BloodState::new(hb, o2, 1.0).unwrap()).unwrap();
            let b = sao2_fraction(&BloodState::new(hb * k, o2 * k, 1.0).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
