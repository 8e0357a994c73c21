//! Butterworth biquad cascades, zero-phase filtering and moving averages.

use std::f64::consts::PI;

/// Second-order section, direct form II transposed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    // Bilinear transform with frequency prewarping (RBJ cookbook forms).
    fn design(fc: f64, fs: f64, q: f64, highpass: bool) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = if highpass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn lowpass(fc: f64, fs: f64, q: f64) -> Self {
        Self::design(fc, fs, q, false)
    }

    pub fn highpass(fc: f64, fs: f64, q: f64) -> Self {
        Self::design(fc, fs, q, true)
    }

    /// Filters in place starting from the steady state for a constant
    /// input equal to `data[0]`, so a flat input passes without transient.
    fn run(&self, data: &mut [f64]) {
        let Some(&x0) = data.first() else { return };
        let y0 = x0 * self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1]);
        let mut z1 = y0 - self.b[0] * x0;
        let mut z2 = self.b[2] * x0 - self.a[1] * y0;
        for x in data.iter_mut() {
            let y = self.b[0] * *x + z1;
            z1 = self.b[1] * *x - self.a[0] * y + z2;
            z2 = self.b[2] * *x - self.a[1] * y;
            *x = y;
        }
    }

    /// Magnitude response at `f` Hz for sample rate `fs`.
    pub fn gain(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (
            self.b[0] + self.b[1] * c1 + self.b[2] * c2,
            self.b[1] * s1 + self.b[2] * s2,
        );
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, self.a[0] * s1 + self.a[1] * s2);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// Q factors of the biquads making up an even-order Butterworth filter.
fn butterworth_qs(order: usize) -> impl Iterator<Item = f64> {
    let pairs = order / 2;
    (0..pairs).map(move |k| 1.0 / (2.0 * (PI * (2 * k + 1) as f64 / (4 * pairs) as f64).cos()))
}

/// Cascade of biquad sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    sections: Vec<Biquad>,
}

impl Cascade {
    /// Even-order Butterworth low-pass.
    pub fn butter_lowpass(order: usize, fc: f64, fs: f64) -> Self {
        Self {
            sections: butterworth_qs(order).map(|q| Biquad::lowpass(fc, fs, q)).collect(),
        }
    }

    /// Even-order Butterworth high-pass.
    pub fn butter_highpass(order: usize, fc: f64, fs: f64) -> Self {
        Self {
            sections: butterworth_qs(order).map(|q| Biquad::highpass(fc, fs, q)).collect(),
        }
    }

    /// High-pass at `lo` followed by low-pass at `hi`, each of `order`.
    pub fn butter_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Self {
        let mut c = Self::butter_highpass(order, lo, fs);
        c.sections
            .extend(Self::butter_lowpass(order, hi, fs).sections);
        c
    }

    pub fn apply_in_place(&self, data: &mut [f64]) {
        for s in &self.sections {
            s.run(data);
        }
    }

    /// Single-pass magnitude response.
    pub fn gain(&self, f: f64, fs: f64) -> f64 {
        self.sections.iter().map(|s| s.gain(f, fs)).product()
    }

    /// Forward-backward filtering with odd-reflection padding of `pad`
    /// samples at each end. Magnitude response is `gain²`, phase is zero.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let mut buf = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        buf.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        buf.extend_from_slice(x);
        buf.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
        self.apply_in_place(&mut buf);
        buf.reverse();
        self.apply_in_place(&mut buf);
        buf.reverse();
        buf.drain(..pad);
        buf.truncate(n);
        buf
    }
}

/// Centered boxcar average over `len` samples, "valid" region only.
/// Returns an empty vector when `len` exceeds the input.
pub fn moving_average(x: &[f64], len: usize) -> Vec<f64> {
    if len == 0 || len > x.len() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(x.len() - len + 1);
    let mut acc: f64 = x[..len].iter().sum();
    out.push(acc / len as f64);
    for i in len..x.len() {
        acc += x[i] - x[i - len];
        out.push(acc / len as f64);
    }
    out
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Max minus min; zero for an empty slice.
pub fn peak_to_peak(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    hi - lo
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn butterworth_gain_at_cutoff_is_half_power() {
        let lp = Cascade::butter_lowpass(4, 4.0, 100.0);
        assert!((lp.gain(4.0, 100.0) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((lp.gain(0.0, 100.0) - 1.0).abs() < 1e-12);
        let hp = Cascade::butter_highpass(4, 0.5, 100.0);
        assert!((hp.gain(0.5, 100.0) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(hp.gain(0.0, 100.0) < 1e-9);
    }

    #[test]
    fn butterworth_magnitude_matches_analytic_shape() {
        // Prewarped analog prototype: |H|² = 1 / (1 + (Ω/Ωc)^(2n)).
        let fs = 100.0;
        let warp = |f: f64| (PI * f / fs).tan();
        let lp = Cascade::butter_lowpass(4, 4.0, fs);
        for f in [1.0, 2.0, 6.0, 10.0, 20.0] {
            let ratio = warp(f) / warp(4.0);
            let analytic = 1.0 / (1.0 + ratio.powi(8)).sqrt();
            assert!((lp.gain(f, fs) - analytic).abs() < 1e-9, "f = {f}");
        }
    }

    #[test]
    fn filtfilt_preserves_length_and_constants() {
        let c = Cascade::butter_lowpass(4, 0.5, 100.0);
        let y = c.filtfilt(&[3.0; 500], 300);
        assert_eq!(y.len(), 500);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-9));
        assert!(c.filtfilt(&[], 10).is_empty());
        assert_eq!(c.filtfilt(&[1.0], 10).len(), 1);
    }

    #[test]
    fn moving_average_valid_region() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let m = moving_average(&x, 4);
        assert_eq!(m.len(), 7);
        assert_eq!(m[0], 1.5);
        assert_eq!(m[6], 7.5);
        assert!(moving_average(&x, 11).is_empty());
    }
}
