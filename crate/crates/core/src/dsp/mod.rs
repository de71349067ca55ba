//! Radar pre-processing: range FFT, slow-time filtering and the movement,
//! breathing and Doppler spectrograms fed to the detector.

pub mod filter;
pub mod preprocess;
pub mod range;
pub mod spectrogram;

pub use filter::Sos;
pub use preprocess::{preprocess_beat, preprocess_session, PreprocessParams};
pub use range::{range_transform, range_transform_bins, WindowKind};
pub use spectrogram::{
    bandpass_slow_time, BASELINE_QUANTILE, concat_channels, doppler_principal, highpass_slow_time, power_spectrogram,
    ChannelTransform, DopplerParams, Normalization, Spectrogram, SpectrogramKind, ThreeChannelSpectrogram,
};
