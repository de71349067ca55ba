use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::filter::Sos;
use super::range::WindowKind;
use crate::error::{Error, Result};
use crate::session::RangeTimeMatrix;

pub const FILTER_ORDER: usize = 4;
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrogramKind {
    Movement,
    Breathing,
    Doppler,
}

/// Real-valued (range, frame) grid, row-major by range bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Vec<f32>,
    pub n_range_bins: usize,
    pub n_frames: usize,
    pub frame_rate: f64,
    pub bin_spacing: f64,
    pub first_bin: usize,
    pub kind: SpectrogramKind,
}

impl Spectrogram {
    pub fn get(&self, r: usize, t: usize) -> f32 {
        self.data[r * self.n_frames + t]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.n_frames..(r + 1) * self.n_frames]
    }
}

fn padding_for(cutoff: f64, rate: f64, n: usize) -> usize {
    ((3.0 * rate / cutoff).ceil() as usize).min(n.saturating_sub(1))
}

fn filter_each_bin(r: &RangeTimeMatrix, sos: &Sos, pad: usize) -> RangeTimeMatrix {
    let mut out = r.clone();
    let n = r.n_chirps;
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for b in 0..r.n_range_bins {
        let series = out.bin_mut(b);
        for (i, z) in series.iter().enumerate() {
            re[i] = z.re;
            im[i] = z.im;
        }
        sos.filtfilt(&mut re, pad);
        sos.filtfilt(&mut im, pad);
        for (i, z) in series.iter_mut().enumerate() {
            *z = Complex64::new(re[i], im[i]);
        }
    }
    out
}

/// Zero-phase Butterworth high-pass along slow time, per range bin.
pub fn highpass_slow_time(r: &RangeTimeMatrix, cutoff: f64) -> Result<RangeTimeMatrix> {
    let nyquist = r.slow_time_rate / 2.0;
    if !(cutoff > 0.0 && cutoff < nyquist) {
        return Err(Error::InvalidParameter(format!(
            "high-pass cutoff {cutoff} Hz must lie below Nyquist {nyquist} Hz"
        )));
    }
    let sos = Sos::butter_highpass(FILTER_ORDER, cutoff, r.slow_time_rate)?;
    Ok(filter_each_bin(r, &sos, padding_for(cutoff, r.slow_time_rate, r.n_chirps)))
}

/// Zero-phase Butterworth band-pass along slow time, per range bin.
pub fn bandpass_slow_time(r: &RangeTimeMatrix, low: f64, high: f64) -> Result<RangeTimeMatrix> {
    let nyquist = r.slow_time_rate / 2.0;
    if !(low > 0.0 && low < high && high < nyquist) {
        return Err(Error::InvalidParameter(format!(
            "band edges [{low}, {high}] Hz invalid for Nyquist {nyquist} Hz"
        )));
    }
    let sos = Sos::butter_bandpass(FILTER_ORDER, low, high, r.slow_time_rate)?;
    Ok(filter_each_bin(r, &sos, padding_for(low, r.slow_time_rate, r.n_chirps)))
}

/// Frame grid shared by the power and Doppler spectrograms: frame `k` is
/// centered at `k * hop_s` seconds.
fn frame_count(r: &RangeTimeMatrix, hop_s: f64) -> usize {
    (r.duration_s() / hop_s + 1e-9).floor() as usize
}

/// Mean squared magnitude over a window centered on each frame. Windows are
/// truncated at the recording edges.
pub fn power_spectrogram(
    filtered: &RangeTimeMatrix,
    window_s: f64,
    hop_s: f64,
    kind: SpectrogramKind,
) -> Result<Spectrogram> {
    let rate = filtered.slow_time_rate;
    if !(hop_s > 0.0 && window_s >= hop_s) {
        return Err(Error::InvalidParameter(format!(
            "power window {window_s} s must be >= hop {hop_s} s > 0"
        )));
    }
    let w = (window_s * rate).round() as usize;
    if w < 2 {
        return Err(Error::InvalidParameter(format!("power window spans {w} < 2 samples")));
    }
    let n = filtered.n_chirps;
    if w > n {
        return Err(Error::InvalidParameter(format!(
            "power window of {w} samples exceeds recording of {n} samples"
        )));
    }
    let n_frames = frame_count(filtered, hop_s);
    let mut data = vec![0f32; filtered.n_range_bins * n_frames];
    let mut prefix = vec![0.0f64; n + 1];
    for b in 0..filtered.n_range_bins {
        for (i, z) in filtered.bin(b).iter().enumerate() {
            prefix[i + 1] = prefix[i] + z.norm_sqr();
        }
        for k in 0..n_frames {
            let center = (k as f64 * hop_s * rate).round() as i64;
            let lo = (center - (w / 2) as i64).max(0) as usize;
            let hi = ((center - (w / 2) as i64 + w as i64).max(0) as usize).min(n);
            let v = if hi > lo {
                ((prefix[hi] - prefix[lo]) / (hi - lo) as f64).max(0.0)
            } else {
                0.0
            };
            data[b * n_frames + k] = v as f32;
        }
    }
    Ok(Spectrogram {
        data,
        n_range_bins: filtered.n_range_bins,
        n_frames,
        frame_rate: 1.0 / hop_s,
        bin_spacing: filtered.bin_spacing,
        first_bin: filtered.first_bin,
        kind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DopplerParams {
    pub window_s: f64,
    pub hop_s: f64,
    /// Windows whose mean power is below this value emit 0.
    pub gate: f64,
    pub band_low: f64,
    pub band_high: f64,
}

impl Default for DopplerParams {
    fn default() -> Self {
        Self {
            window_s: 16.0,
            hop_s: 1.0,
            gate: 1e-9,
            band_low: 0.1,
            band_high: 5.0,
        }
    }
}

/// Dominant Doppler frequency per (bin, frame): the |f| of the largest-magnitude
/// Hann-windowed STFT coefficient with `band_low <= |f| <= band_high`.
pub fn doppler_principal(bandpassed: &RangeTimeMatrix, params: &DopplerParams) -> Result<Spectrogram> {
    let rate = bandpassed.slow_time_rate;
    let w = (params.window_s * rate).round() as usize;
    if w < 32 {
        return Err(Error::InvalidParameter(format!(
            "Doppler window spans {w} samples, need at least 32"
        )));
    }
    if !(params.hop_s > 0.0) {
        return Err(Error::InvalidParameter("Doppler hop must be > 0".into()));
    }
    let nfft = w.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let win = WindowKind::Hann.coefficients(w);
    let df = rate / nfft as f64;

    // Candidate FFT bins ordered by |f| then sign, so the first maximum wins ties
    // at the lower frequency.
    let mut candidates: Vec<(usize, f64)> = (0..nfft)
        .map(|k| {
            let f = if k < nfft / 2 { k as f64 * df } else { (k as f64 - nfft as f64) * df };
            (k, f)
        })
        .filter(|(_, f)| {
            let a = f.abs();
            a >= params.band_low - 1e-12 && a <= params.band_high + 1e-12
        })
        .collect();
    candidates.sort_by(|a, b| {
        a.1.abs()
            .total_cmp(&b.1.abs())
            .then(b.1.total_cmp(&a.1))
    });

    let n = bandpassed.n_chirps;
    let n_frames = frame_count(bandpassed, params.hop_s);
    let mut data = vec![0f32; bandpassed.n_range_bins * n_frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    for b in 0..bandpassed.n_range_bins {
        let series = bandpassed.bin(b);
        for k in 0..n_frames {
            let center = (k as f64 * params.hop_s * rate).round() as i64;
            let mut lo = center - (w / 2) as i64;
            if w <= n {
                lo = lo.clamp(0, (n - w) as i64);
            }
            let mut power = 0.0;
            let mut count = 0usize;
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (j, wj) in win.iter().enumerate() {
                let idx = lo + j as i64;
                if idx >= 0 && (idx as usize) < n {
                    let z = series[idx as usize];
                    power += z.norm_sqr();
                    count += 1;
                    buf[j] = z * wj;
                }
            }
            let power = if count > 0 { power / count as f64 } else { 0.0 };
            if power < params.gate || count == 0 {
                continue;
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            let mut best = (0.0f64, f64::MIN);
            for &(kk, f) in &candidates {
                let m = buf[kk].norm_sqr();
                if m > best.1 {
                    best = (f.abs(), m);
                }
            }
            data[b * n_frames + k] = best.0 as f32;
        }
    }

    Ok(Spectrogram {
        data,
        n_range_bins: bandpassed.n_range_bins,
        n_frames,
        frame_rate: 1.0 / params.hop_s,
        bin_spacing: bandpassed.bin_spacing,
        first_bin: bandpassed.first_bin,
        kind: SpectrogramKind::Doppler,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Per-channel z-score.
    Standardize,
    /// Natural log on the two power channels, then per-channel z-score.
    #[default]
    LogStandardize,
    /// Power channels as the natural-log ratio to the strongest range bin's
    /// normal level, its [`BASELINE_QUANTILE`] over the session; Doppler
    /// z-scored. A given fractional drop in breathing power then reads the
    /// same in every subject, whatever the range and reflectivity.
    LogBaseline,
}

/// Quantile of a bin's log power taken as its normal-breathing level. High
/// enough to stay on normal breathing when events fill half the night.
pub const BASELINE_QUANTILE: f64 = 0.9;

/// Affine record of a channel transform: `y = (f(x) - mean) * scale`, where
/// `f(x) = ln(x + log_offset)` when `log_offset` is set and identity otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTransform {
    pub log_offset: Option<f64>,
    pub mean: f64,
    pub scale: f64,
}

impl ChannelTransform {
    pub const IDENTITY: Self = Self {
        log_offset: None,
        mean: 0.0,
        scale: 1.0,
    };
}

/// Three stacked channels `(x_M, x_B, x_D)` of shape `(3, n_range_bins, n_frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeChannelSpectrogram {
    pub data: Vec<f32>,
    pub n_range_bins: usize,
    pub n_frames: usize,
    pub frame_rate: f64,
    pub bin_spacing: f64,
    pub first_bin: usize,
    pub normalization: [ChannelTransform; 3],
}

impl ThreeChannelSpectrogram {
    pub const KINDS: [SpectrogramKind; 3] = [
        SpectrogramKind::Movement,
        SpectrogramKind::Breathing,
        SpectrogramKind::Doppler,
    ];

    pub fn shape(&self) -> (usize, usize, usize) {
        (3, self.n_range_bins, self.n_frames)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.n_range_bins * self.n_frames;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, r: usize, t: usize) -> f32 {
        self.data[(c * self.n_range_bins + r) * self.n_frames + t]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 / self.frame_rate
    }

    /// Frames `start .. start + len`, clamped to the available range.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let start = start.min(self.n_frames);
        let end = (start + len).min(self.n_frames);
        let n = end - start;
        let mut data = Vec::with_capacity(3 * self.n_range_bins * n);
        for c in 0..3 {
            for r in 0..self.n_range_bins {
                let row = (c * self.n_range_bins + r) * self.n_frames;
                data.extend_from_slice(&self.data[row + start..row + end]);
            }
        }
        Self {
            data,
            n_frames: n,
            ..self.clone()
        }
    }

    /// Appends `other` along time. Geometry must match.
    pub fn concat_time(&self, other: &Self) -> Result<Self> {
        if self.n_range_bins != other.n_range_bins || self.frame_rate != other.frame_rate {
            return Err(Error::DimensionMismatch("cannot append spectrograms of different geometry".into()));
        }
        let n = self.n_frames + other.n_frames;
        let mut data = Vec::with_capacity(3 * self.n_range_bins * n);
        for c in 0..3 {
            for r in 0..self.n_range_bins {
                let a = (c * self.n_range_bins + r) * self.n_frames;
                let b = (c * other.n_range_bins + r) * other.n_frames;
                data.extend_from_slice(&self.data[a..a + self.n_frames]);
                data.extend_from_slice(&other.data[b..b + other.n_frames]);
            }
        }
        Ok(Self {
            data,
            n_frames: n,
            ..self.clone()
        })
    }
}

/// Natural log with an offset of 1e-6 of the channel mean, so zero power stays
/// finite. Returns the offset.
fn log_in_place(values: &mut [f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let off = (mean * 1e-6).max(1e-30);
    for v in values.iter_mut() {
        *v = (v.max(0.0) + off).ln();
    }
    off
}

fn standardize(values: &mut [f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var < VARIANCE_FLOOR { 0.0 } else { 1.0 / var.sqrt() };
    for v in values.iter_mut() {
        *v = (*v - mean) * scale;
    }
    (mean, scale)
}

/// Stacks `(x_M, x_B, x_D)` into one three-channel grid, optionally normalizing
/// each channel over the whole session.
pub fn concat_channels(
    xm: &Spectrogram,
    xb: &Spectrogram,
    xd: &Spectrogram,
    normalize: Normalization,
) -> Result<ThreeChannelSpectrogram> {
    for s in [xb, xd] {
        if s.n_range_bins != xm.n_range_bins || s.n_frames != xm.n_frames || s.frame_rate != xm.frame_rate {
            return Err(Error::DimensionMismatch(format!(
                "channel shapes differ: ({}, {}, {} Hz) vs ({}, {}, {} Hz)",
                xm.n_range_bins, xm.n_frames, xm.frame_rate, s.n_range_bins, s.n_frames, s.frame_rate
            )));
        }
    }
    let mut data = Vec::with_capacity(3 * xm.data.len());
    let mut records = [ChannelTransform::IDENTITY; 3];
    for (c, s) in [xm, xb, xd].into_iter().enumerate() {
        let mut values: Vec<f64> = s.data.iter().map(|&v| v as f64).collect();
        match normalize {
            Normalization::None => {}
            Normalization::Standardize => {
                let (mean, scale) = standardize(&mut values);
                records[c] = ChannelTransform {
                    mean,
                    scale,
                    ..ChannelTransform::IDENTITY
                };
            }
            Normalization::LogStandardize => {
                let log_offset = (c < 2).then(|| log_in_place(&mut values));
                let (mean, scale) = standardize(&mut values);
                records[c] = ChannelTransform {
                    log_offset,
                    mean,
                    scale,
                    ..ChannelTransform::IDENTITY
                };
            }
            Normalization::LogBaseline if c < 2 => {
                let log_offset = Some(log_in_place(&mut values));
                let mean = values
                    .chunks(s.n_frames.max(1))
                    .map(|row| {
                        let mut sorted = row.to_vec();
                        sorted.sort_by(f64::total_cmp);
                        sorted[((sorted.len() - 1) as f64 * BASELINE_QUANTILE).round() as usize]
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                let mean = if mean.is_finite() { mean } else { 0.0 };
                values.iter_mut().for_each(|v| *v -= mean);
                records[c] = ChannelTransform {
                    log_offset,
                    mean,
                    ..ChannelTransform::IDENTITY
                };
            }
            Normalization::LogBaseline => {
                let (mean, scale) = standardize(&mut values);
                records[c] = ChannelTransform {
                    mean,
                    scale,
                    ..ChannelTransform::IDENTITY
                };
            }
        }
        data.extend(values.into_iter().map(|v| v as f32));
    }
    Ok(ThreeChannelSpectrogram {
        data,
        n_range_bins: xm.n_range_bins,
        n_frames: xm.n_frames,
        frame_rate: xm.frame_rate,
        bin_spacing: xm.bin_spacing,
        first_bin: xm.first_bin,
        normalization: records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpecHeader {
    channels: usize,
    n_range_bins: usize,
    n_frames: usize,
    frame_rate_hz: f64,
    bin_spacing_m: f64,
    first_bin: usize,
    kinds: Vec<SpectrogramKind>,
    normalization: Option<Vec<ChannelTransform>>,
}

fn write_spec_file(path: &Path, header: &SpecHeader, payload: &[f32]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header).expect("header serializes");
    bytes.push(b'\n');
    bytes.reserve(payload.len() * 4);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_spec_file(path: &Path) -> Result<(SpecHeader, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::malformed(".spec", "missing header line"))?;
    let header: SpecHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::malformed(".spec header", e))?;
    let payload = &bytes[split + 1..];
    let expected = header.channels * header.n_range_bins * header.n_frames;
    if payload.len() != 4 * expected || header.kinds.len() != header.channels {
        return Err(Error::DimensionMismatch(format!(
            "{}: payload of {} bytes does not match {} x {} x {} f32",
            path.display(),
            payload.len(),
            header.channels,
            header.n_range_bins,
            header.n_frames
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data))
}

impl Spectrogram {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SpecHeader {
            channels: 1,
            n_range_bins: self.n_range_bins,
            n_frames: self.n_frames,
            frame_rate_hz: self.frame_rate,
            bin_spacing_m: self.bin_spacing,
            first_bin: self.first_bin,
            kinds: vec![self.kind],
            normalization: None,
        };
        write_spec_file(path, &header, &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, data) = read_spec_file(path)?;
        if h.channels != 1 {
            return Err(Error::DimensionMismatch(format!("expected 1 channel, found {}", h.channels)));
        }
        Ok(Self {
            data,
            n_range_bins: h.n_range_bins,
            n_frames: h.n_frames,
            frame_rate: h.frame_rate_hz,
            bin_spacing: h.bin_spacing_m,
            first_bin: h.first_bin,
            kind: h.kinds[0],
        })
    }
}

impl ThreeChannelSpectrogram {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SpecHeader {
            channels: 3,
            n_range_bins: self.n_range_bins,
            n_frames: self.n_frames,
            frame_rate_hz: self.frame_rate,
            bin_spacing_m: self.bin_spacing,
            first_bin: self.first_bin,
            kinds: Self::KINDS.to_vec(),
            normalization: Some(self.normalization.to_vec()),
        };
        write_spec_file(path, &header, &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, data) = read_spec_file(path)?;
        if h.channels != 3 || h.kinds != Self::KINDS {
            return Err(Error::DimensionMismatch(format!(
                "{}: expected channels (movement, breathing, doppler)",
                path.display()
            )));
        }
        let norm = h.normalization.unwrap_or_else(|| vec![ChannelTransform::IDENTITY; 3]);
        let normalization: [ChannelTransform; 3] = norm
            .try_into()
            .map_err(|_| Error::malformed(".spec header", "normalization must list 3 channels"))?;
        Ok(Self {
            data,
            n_range_bins: h.n_range_bins,
            n_frames: h.n_frames,
            frame_rate: h.frame_rate_hz,
            bin_spacing: h.bin_spacing_m,
            first_bin: h.first_bin,
            normalization,
        })
    }
}
