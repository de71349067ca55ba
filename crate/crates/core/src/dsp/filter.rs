//! Butterworth IIR design (bilinear transform, second-order sections) and
//! forward-backward zero-phase filtering.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section, normalized so that `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        let num = self.b[0] + self.b[1] * z_inv + self.b[2] * z2;
        let den = self.a[0] + self.a[1] * z_inv + self.a[2] * z2;
        num / den
    }

    /// Transposed direct form II state for a constant input of 1.
    fn step_state(&self) -> [f64; 2] {
        let gain = (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2]);
        let z2 = self.b[2] - self.a[2] * gain;
        let z1 = gain - self.b[0];
        [z1, z2]
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    fn run(&self, x: &mut [f64], mut state: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + state[0];
            state[0] = b1 * xin - a1 * y + state[1];
            state[1] = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Lowpass,
    Highpass,
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
    pub sample_rate: f64,
}

impl Sos {
    pub fn butter_lowpass(order: usize, cutoff: f64, sample_rate: f64) -> Result<Self> {
        design(order, cutoff, sample_rate, Kind::Lowpass)
    }

    pub fn butter_highpass(order: usize, cutoff: f64, sample_rate: f64) -> Result<Self> {
        design(order, cutoff, sample_rate, Kind::Highpass)
    }

    /// Band-pass as a high-pass at `low` cascaded with a low-pass at `high`,
    /// each of the given order.
    pub fn butter_bandpass(order: usize, low: f64, high: f64, sample_rate: f64) -> Result<Self> {
        if !(low > 0.0 && low < high) {
            return Err(Error::InvalidParameter(format!(
                "band edges must satisfy 0 < low < high, got [{low}, {high}]"
            )));
        }
        let mut hp = design(order, low, sample_rate, Kind::Highpass)?;
        let lp = design(order, high, sample_rate, Kind::Lowpass)?;
        hp.sections.extend(lp.sections);
        Ok(hp)
    }

    /// Complex frequency response of one forward pass at `freq` Hz.
    pub fn response(&self, freq: f64) -> Complex64 {
        let w = 2.0 * PI * freq / self.sample_rate;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Magnitude response of the forward-backward cascade, `|H(f)|^2`.
    pub fn zero_phase_gain(&self, freq: f64) -> f64 {
        self.response(freq).norm_sqr()
    }

    /// Single causal pass with steady-state initial conditions scaled by `x[0]`.
    pub fn filter(&self, x: &mut [f64]) {
        if x.is_empty() {
            return;
        }
        let mut level = x[0];
        for s in &self.sections {
            let zi = s.step_state();
            s.run(x, [zi[0] * level, zi[1] * level]);
            level *= s.dc_gain();
        }
    }

    /// Forward-backward filtering with odd-reflection padding of `pad` samples
    /// (clamped to `len - 1`).
    pub fn filtfilt(&self, x: &mut [f64], pad: usize) {
        let n = x.len();
        if n == 0 {
            return;
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let first = x[0];
        let last = x[n - 1];
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

        self.filter(&mut ext);
        ext.reverse();
        self.filter(&mut ext);
        ext.reverse();
        x.copy_from_slice(&ext[pad..pad + n]);
    }
}

fn design(order: usize, cutoff: f64, sample_rate: f64, kind: Kind) -> Result<Sos> {
    if order == 0 {
        return Err(Error::InvalidParameter("filter order must be >= 1".into()));
    }
    let nyquist = sample_rate / 2.0;
    if !(cutoff > 0.0 && cutoff < nyquist) {
        return Err(Error::InvalidParameter(format!(
            "cutoff {cutoff} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    let fs2 = 2.0 * sample_rate;
    let warped = fs2 * (PI * cutoff / sample_rate).tan();

    // Analog Butterworth poles lie on a circle of radius `warped`; for the
    // high-pass (s -> warped^2 / s) the pole set maps onto itself.
    let bilinear = |s: Complex64| (fs2 + s) / (fs2 - s);
    let numerator = |kind: Kind, second_order: bool| match (kind, second_order) {
        (Kind::Lowpass, true) => [1.0, 2.0, 1.0],
        (Kind::Highpass, true) => [1.0, -2.0, 1.0],
        (Kind::Lowpass, false) => [1.0, 1.0, 0.0],
        (Kind::Highpass, false) => [1.0, -1.0, 0.0],
    };
    // Each section is normalized to unit gain at DC (low-pass) or Nyquist (high-pass).
    let reference = match kind {
        Kind::Lowpass => Complex64::new(1.0, 0.0),
        Kind::Highpass => Complex64::new(-1.0, 0.0),
    };

    let mut sections = Vec::new();
    for k in 0..order / 2 {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let pole = Complex64::from_polar(warped, theta);
        let zp = bilinear(pole);
        let a = [1.0, -2.0 * zp.re, zp.norm_sqr()];
        let mut s = Biquad {
            b: numerator(kind, true),
            a,
        };
        normalize(&mut s, reference);
        sections.push(s);
    }
    if order % 2 == 1 {
        let zp = bilinear(Complex64::new(-warped, 0.0));
        let mut s = Biquad {
            b: numerator(kind, false),
            a: [1.0, -zp.re, 0.0],
        };
        normalize(&mut s, reference);
        sections.push(s);
    }
    Ok(Sos {
        sections,
        sample_rate,
    })
}

fn normalize(s: &mut Biquad, z_inv: Complex64) {
    let g = s.response(z_inv).norm();
    for b in &mut s.b {
        *b /= g;
    }
}
