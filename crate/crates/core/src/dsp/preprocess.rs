use serde::{Deserialize, Serialize};

use super::range::{range_transform_bins, WindowKind};
use super::spectrogram::{
    bandpass_slow_time, concat_channels, doppler_principal, highpass_slow_time, power_spectrogram,
    DopplerParams, Normalization, SpectrogramKind, ThreeChannelSpectrogram,
};
use crate::error::{Error, Result};
use crate::session::{BeatMatrix, SleepSession};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    pub window: WindowKind,
    /// First range bin kept (inclusive).
    pub crop_first_bin: usize,
    pub crop_bins: usize,
    pub highpass_hz: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub power_window_s: f64,
    pub hop_s: f64,
    pub doppler: DopplerParams,
    pub normalization: Normalization,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            window: WindowKind::Hann,
            crop_first_bin: 4,
            crop_bins: 32,
            highpass_hz: 5.0,
            band_low_hz: 0.1,
            band_high_hz: 5.0,
            power_window_s: 4.0,
            hop_s: 1.0,
            doppler: DopplerParams::default(),
            normalization: Normalization::LogStandardize,
        }
    }
}

/// Beat signal to the three-channel detector input.
///
/// The range axis is cropped before slow-time filtering; every later stage
/// works per bin, so the result equals cropping at the end.
pub fn preprocess_beat(beat: &BeatMatrix, params: &PreprocessParams) -> Result<ThreeChannelSpectrogram> {
    let range = range_transform_bins(beat, params.window, params.crop_first_bin, params.crop_bins)?;

    let moving = highpass_slow_time(&range, params.highpass_hz)?;
    let xm = power_spectrogram(&moving, params.power_window_s, params.hop_s, SpectrogramKind::Movement)?;
    drop(moving);

    let breathing = bandpass_slow_time(&range, params.band_low_hz, params.band_high_hz)?;
    drop(range);
    let xb = power_spectrogram(&breathing, params.power_window_s, params.hop_s, SpectrogramKind::Breathing)?;
    let doppler = DopplerParams {
        hop_s: params.hop_s,
        band_low: params.band_low_hz,
        band_high: params.band_high_hz,
        ..params.doppler
    };
    let xd = doppler_principal(&breathing, &doppler)?;

    concat_channels(&xm, &xb, &xd, params.normalization)
}

pub fn preprocess_session(session: &SleepSession, params: &PreprocessParams) -> Result<ThreeChannelSpectrogram> {
    let beat = session
        .beat
        .as_ref()
        .ok_or_else(|| Error::NoRadarData(session.id.clone()))?;
    preprocess_beat(beat, params)
}
