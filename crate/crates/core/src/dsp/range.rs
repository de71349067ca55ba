use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::{BeatMatrix, RangeTimeMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Rectangular,
    #[default]
    Hann,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Rectangular => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
                .collect(),
        }
    }
}

/// Windowed fast-time FFT of every chirp, keeping the one-sided bins `0 .. N/2`.
pub fn range_transform(beat: &BeatMatrix, window: WindowKind) -> Result<RangeTimeMatrix> {
    let half = beat.config.samples_per_chirp / 2;
    range_transform_bins(beat, window, 0, half)
}

/// As [`range_transform`], but only materializes bins `first_bin .. first_bin + n_bins`.
pub fn range_transform_bins(
    beat: &BeatMatrix,
    window: WindowKind,
    first_bin: usize,
    n_bins: usize,
) -> Result<RangeTimeMatrix> {
    beat.validate()?;
    let n = beat.config.samples_per_chirp;
    if !n.is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "samples per chirp must be a power of two, got {n}"
        )));
    }
    if first_bin + n_bins > n / 2 {
        return Err(Error::InvalidParameter(format!(
            "range bins {first_bin}..{} exceed the one-sided spectrum of {} bins",
            first_bin + n_bins,
            n / 2
        )));
    }

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let win = window.coefficients(n);
    let n_chirps = beat.n_chirps;
    let mut data = vec![Complex64::new(0.0, 0.0); n_bins * n_chirps];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    for t in 0..n_chirps {
        for ((b, s), w) in buf.iter_mut().zip(beat.chirp(t)).zip(&win) {
            *b = Complex64::new(s.re as f64 * w, s.im as f64 * w);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for r in 0..n_bins {
            data[r * n_chirps + t] = buf[first_bin + r];
        }
    }

    Ok(RangeTimeMatrix {
        data,
        n_range_bins: n_bins,
        n_chirps,
        first_bin,
        bin_spacing: beat.config.range_resolution(),
        slow_time_rate: beat.config.frame_rate,
    })
}
