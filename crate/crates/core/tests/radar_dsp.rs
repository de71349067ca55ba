use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rosa_core::dsp::{
    bandpass_slow_time, concat_channels, doppler_principal, highpass_slow_time, power_spectrogram, DopplerParams,
    Normalization, Sos, Spectrogram, SpectrogramKind,
};
use rosa_core::session::RangeTimeMatrix;

const RATE: f64 = 50.0;

fn matrix(bins: Vec<Vec<Complex64>>) -> RangeTimeMatrix {
    let n_chirps = bins[0].len();
    RangeTimeMatrix {
        n_range_bins: bins.len(),
        n_chirps,
        data: bins.into_iter().flatten().collect(),
        first_bin: 0,
        bin_spacing: 0.05,
        slow_time_rate: RATE,
    }
}

fn real_tone(freq: f64, seconds: f64) -> Vec<Complex64> {
    let n = (seconds * RATE) as usize;
    (0..n)
        .map(|i| Complex64::new((2.0 * PI * freq * i as f64 / RATE).sin(), 0.0))
        .collect()
}

/// RMS over the middle half of a series, away from filter edge transients.
fn mid_rms(x: &[Complex64]) -> f64 {
    let n = x.len();
    let mid = &x[n / 4..3 * n / 4];
    (mid.iter().map(|z| z.norm_sqr()).sum::<f64>() / mid.len() as f64).sqrt()
}

fn measured_gain(filtered: &RangeTimeMatrix, input: &RangeTimeMatrix) -> f64 {
    mid_rms(filtered.bin(0)) / mid_rms(input.bin(0))
}

fn db(g: f64) -> f64 {
    20.0 * g.log10()
}

#[test]
fn highpass_rejects_dc() {
    let input = matrix(vec![vec![Complex64::new(3.0, -4.0); 3000]]);
    let out = highpass_slow_time(&input, 5.0).unwrap();
    let worst = out.bin(0)[200..2800].iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(worst <= 1e-6 * 5.0, "residual {worst}");
}

#[test]
fn highpass_passband_and_stopband_match_design() {
    let sos = Sos::butter_highpass(4, 5.0, RATE).unwrap();
    // Analytic zero-phase gain is |H|^2.
    let g10 = sos.zero_phase_gain(10.0);
    let g03 = sos.zero_phase_gain(0.3);
    assert!((g10 - 1.0).abs() < 0.05, "analytic 10 Hz gain {g10}");
    assert!(db(g03) < -20.0, "analytic 0.3 Hz gain {} dB", db(g03));

    let input = matrix(vec![real_tone(10.0, 60.0)]);
    let measured = measured_gain(&highpass_slow_time(&input, 5.0).unwrap(), &input);
    assert!((measured - 1.0).abs() < 0.05);
    assert!((measured - g10).abs() < 0.01);

    let input = matrix(vec![real_tone(0.3, 120.0)]);
    let measured = measured_gain(&highpass_slow_time(&input, 5.0).unwrap(), &input);
    assert!(db(measured) < -20.0, "measured 0.3 Hz gain {} dB", db(measured));
}

#[test]
fn bandpass_passes_breathing_and_rejects_dc_and_movement() {
    let sos = Sos::butter_bandpass(4, 0.1, 5.0, RATE).unwrap();
    let g025 = sos.zero_phase_gain(0.25);
    assert!((g025 - 1.0).abs() < 0.05, "analytic 0.25 Hz gain {g025}");
    assert!(db(sos.zero_phase_gain(0.0).max(1e-300)) < -40.0);
    assert!(db(sos.zero_phase_gain(10.0)) < -20.0);

    let input = matrix(vec![real_tone(0.25, 240.0)]);
    let measured = measured_gain(&bandpass_slow_time(&input, 0.1, 5.0).unwrap(), &input);
    assert!((measured - 1.0).abs() < 0.05, "measured 0.25 Hz gain {measured}");
    assert!((measured - g025).abs() < 0.01);

    let input = matrix(vec![vec![Complex64::new(1.0, 1.0); 12000]]);
    let out = bandpass_slow_time(&input, 0.1, 5.0).unwrap();
    assert!(db(measured_gain(&out, &input)) < -40.0);

    let input = matrix(vec![real_tone(10.0, 60.0)]);
    let out = bandpass_slow_time(&input, 0.1, 5.0).unwrap();
    assert!(db(measured_gain(&out, &input)) < -20.0);
}

#[test]
fn invalid_filter_parameters() {
    let input = matrix(vec![real_tone(1.0, 10.0)]);
    assert!(highpass_slow_time(&input, 25.0).is_err());
    assert!(bandpass_slow_time(&input, 0.0, 5.0).is_err());
    assert!(bandpass_slow_time(&input, 5.0, 1.0).is_err());
    assert!(bandpass_slow_time(&input, 0.1, 30.0).is_err());
}

/// Energy-weighted mean sample index.
fn centroid(x: &[Complex64]) -> f64 {
    let e: f64 = x.iter().map(|z| z.norm_sqr()).sum();
    x.iter().enumerate().map(|(i, z)| i as f64 * z.norm_sqr()).sum::<f64>() / e
}

#[test]
fn filters_are_zero_phase() {
    // Gaussian-windowed 1 Hz and 8 Hz bursts centered at 30 s.
    let n = 3000;
    let pulse = |f: f64| -> Vec<Complex64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / RATE - 30.0;
                Complex64::new((-(t * t) / 8.0).exp() * (2.0 * PI * f * t).cos(), 0.0)
            })
            .collect()
    };
    let input = matrix(vec![pulse(1.0)]);
    let out = bandpass_slow_time(&input, 0.1, 5.0).unwrap();
    assert!((centroid(out.bin(0)) - centroid(input.bin(0))).abs() < RATE);

    let input = matrix(vec![pulse(8.0)]);
    let out = highpass_slow_time(&input, 5.0).unwrap();
    assert!((centroid(out.bin(0)) - centroid(input.bin(0))).abs() < RATE);
}

#[test]
fn power_of_zero_is_zero() {
    let input = matrix(vec![vec![Complex64::new(0.0, 0.0); 600]; 3]);
    let s = power_spectrogram(&input, 4.0, 1.0, SpectrogramKind::Breathing).unwrap();
    assert_eq!((s.n_range_bins, s.n_frames), (3, 12));
    assert!(s.data.iter().all(|&v| v == 0.0));
}

#[test]
fn power_of_unit_tone_is_one() {
    let n = 3000;
    let tone: Vec<Complex64> = (0..n)
        .map(|i| Complex64::from_polar(1.0, 2.0 * PI * 0.7 * i as f64 / RATE))
        .collect();
    let input = matrix(vec![vec![Complex64::new(0.0, 0.0); n], tone.clone()]);
    let s = power_spectrogram(&input, 4.0, 1.0, SpectrogramKind::Breathing).unwrap();
    assert_eq!(s.n_frames, 60);
    for k in 0..s.n_frames {
        // Oracle: direct mean square over the (edge-truncated) window.
        let lo = (k as i64 * 50 - 100).max(0) as usize;
        let hi = ((k as i64 * 50 + 100) as usize).min(n);
        let oracle = tone[lo..hi].iter().map(|z| z.norm_sqr()).sum::<f64>() / (hi - lo) as f64;
        assert!((s.get(1, k) as f64 - oracle).abs() < 1e-6);
        assert!((s.get(1, k) as f64 - 1.0).abs() < 1e-6);
        assert_eq!(s.get(0, k), 0.0);
    }
}

#[test]
fn movement_burst_peaks_at_its_frame() {
    let n = 200 * 50;
    let mut bins = vec![vec![Complex64::new(0.0, 0.0); n]; 32];
    for (i, z) in bins[20].iter_mut().enumerate() {
        let t = i as f64 / RATE;
        *z = Complex64::new(1.0, 0.0) * 0.01;
        if (t - 100.0).abs() < 0.5 {
            *z += Complex64::from_polar(5.0, 2.0 * PI * 11.0 * t);
        }
    }
    let moving = highpass_slow_time(&matrix(bins), 5.0).unwrap();
    let xm = power_spectrogram(&moving, 4.0, 1.0, SpectrogramKind::Movement).unwrap();
    let row = xm.row(20);
    let max = row.iter().cloned().fold(f32::MIN, f32::max);
    assert_eq!(row[100], max);
}

fn doppler_oracle(series: &[Complex64], lo: usize, w: usize) -> f64 {
    // Brute-force DFT of the Hann-windowed window at the same frequency grid.
    let nfft = w.next_power_of_two();
    let df = RATE / nfft as f64;
    let mut best = (0.0, f64::MIN);
    let mut freqs: Vec<f64> = (0..nfft)
        .map(|k| if k < nfft / 2 { k as f64 * df } else { (k as f64 - nfft as f64) * df })
        .filter(|f| f.abs() >= 0.1 && f.abs() <= 5.0)
        .collect();
    freqs.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(b.total_cmp(a)));
    for f in freqs {
        let c: Complex64 = (0..w)
            .map(|j| {
                let hann = 0.5 * (1.0 - (2.0 * PI * j as f64 / w as f64).cos());
                series[lo + j] * hann * Complex64::from_polar(1.0, -2.0 * PI * f * j as f64 / RATE)
            })
            .sum();
        if c.norm_sqr() > best.1 {
            best = (f.abs(), c.norm_sqr());
        }
    }
    best.0
}

#[test]
fn doppler_tracks_breathing_frequency() {
    let mut bins = vec![vec![Complex64::new(0.0, 0.0); 6000]; 16];
    bins[12] = real_tone(0.25, 120.0);
    let input = matrix(bins);
    let xd = doppler_principal(&input, &DopplerParams::default()).unwrap();
    let width = RATE / 1024.0;
    for k in [8, 30, 60, 100] {
        let v = xd.get(12, k) as f64;
        assert!((v - 0.25).abs() <= width, "frame {k}: {v}");
        let lo = (k * 50).saturating_sub(400).min(6000 - 800);
        assert!((v - doppler_oracle(input.bin(12), lo, 800)).abs() < 1e-6);
    }
    // Bins without signal are gated.
    assert!(xd.row(3).iter().all(|&v| v == 0.0));
}

#[test]
fn doppler_of_silence_is_gated() {
    let input = matrix(vec![vec![Complex64::new(0.0, 0.0); 2000]; 4]);
    let xd = doppler_principal(&input, &DopplerParams::default()).unwrap();
    assert!(xd.data.iter().all(|&v| v == 0.0));
}

#[test]
fn doppler_follows_frequency_step() {
    let n = 600 * 50;
    let mut phase = 0.0;
    let series: Vec<Complex64> = (0..n)
        .map(|i| {
            let f = if i < 300 * 50 { 0.2 } else { 0.4 };
            phase += 2.0 * PI * f / RATE;
            Complex64::new(phase.sin(), 0.0)
        })
        .collect();
    let input = matrix(vec![series.clone()]);
    let xd = doppler_principal(&input, &DopplerParams::default()).unwrap();
    let width = RATE / 1024.0;
    for k in 20..=291 {
        assert!((xd.get(0, k) as f64 - 0.2).abs() <= width, "frame {k}");
    }
    for k in 309..580 {
        assert!((xd.get(0, k) as f64 - 0.4).abs() <= width, "frame {k}");
    }
    // Windows straddling the step mix both tones; they still match the
    // brute-force STFT argmax and stay inside the two-tone span.
    for k in 292..=308 {
        let v = xd.get(0, k) as f64;
        assert!((0.2 - width..=0.4 + width).contains(&v), "frame {k}: {v}");
        assert!((v - doppler_oracle(&series, k * 50 - 400, 800)).abs() < 1e-6);
    }
}

fn spec(kind: SpectrogramKind, frames: usize, fill: impl Fn(usize) -> f32) -> Spectrogram {
    Spectrogram {
        data: (0..4 * frames).map(fill).collect(),
        n_range_bins: 4,
        n_frames: frames,
        frame_rate: 1.0,
        bin_spacing: 0.05,
        first_bin: 4,
        kind,
    }
}

#[test]
fn concat_shape_and_degenerate_channels() {
    let xm = spec(SpectrogramKind::Movement, 10, |i| i as f32);
    let xb = spec(SpectrogramKind::Breathing, 10, |_| 2.5);
    let xd = spec(SpectrogramKind::Doppler, 10, |i| (i % 3) as f32 * 0.1);
    let raw = concat_channels(&xm, &xb, &xd, Normalization::None).unwrap();
    assert_eq!(raw.shape(), (3, 4, 10));
    assert_eq!(raw.channel(1), xb.data.as_slice());

    let z = concat_channels(&xm, &xb, &xd, Normalization::Standardize).unwrap();
    assert!(z.channel(1).iter().all(|&v| v == 0.0));
    let m = z.channel(0);
    let mean: f64 = m.iter().map(|&v| v as f64).sum::<f64>() / m.len() as f64;
    let var: f64 = m.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m.len() as f64;
    assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);

    let z = concat_channels(&xm, &xb, &xd, Normalization::LogStandardize).unwrap();
    assert!(z.channel(1).iter().all(|&v| v == 0.0));
    assert!(z.normalization[0].log_offset.is_some() && z.normalization[2].log_offset.is_none());

    let short = spec(SpectrogramKind::Doppler, 9, |_| 0.0);
    assert!(concat_channels(&xm, &xb, &short, Normalization::None).is_err());
}

#[test]
fn log_baseline_references_the_strongest_bin() {
    // Bin r holds 1..=10 scaled by 10^r; bin 3 is the strongest.
    let xm = spec(SpectrogramKind::Movement, 10, |i| (1 + i % 10) as f32);
    let xb = spec(SpectrogramKind::Breathing, 10, |i| (1 + i % 10) as f32 * 10f32.powi((i / 10) as i32));
    let xd = spec(SpectrogramKind::Doppler, 10, |i| (i % 3) as f32 * 0.1);
    let z = concat_channels(&xm, &xb, &xd, Normalization::LogBaseline).unwrap();
    let tr = z.normalization[1];
    assert!(tr.log_offset.is_some() && tr.scale == 1.0);
    let row = |r: usize| &z.channel(1)[r * 10..(r + 1) * 10];
    // Ninth of ten sorted values is the 0.9 quantile.
    assert!(row(3)[8].abs() < 1e-6);
    assert!((row(3)[0] as f64 - (1.0f64 / 9.0).ln()).abs() < 1e-4);
    // The log offset, 1e-6 of the channel mean, shifts small values slightly.
    assert!((row(0)[8] as f64 - 1e-3f64.ln()).abs() < 2e-3);
    assert!(z.normalization[2].log_offset.is_none());
    let d = z.channel(2);
    let mean: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    assert!(mean.abs() < 1e-6);
}

#[test]
fn spec_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let xm = spec(SpectrogramKind::Movement, 7, |i| i as f32 * 0.5);
    let xb = spec(SpectrogramKind::Breathing, 7, |i| (i * i) as f32);
    let xd = spec(SpectrogramKind::Doppler, 7, |_| 0.3);
    for norm in [Normalization::LogStandardize, Normalization::LogBaseline] {
        let three = concat_channels(&xm, &xb, &xd, norm).unwrap();
        let path = dir.path().join("s.spec");
        three.save(&path).unwrap();
        assert_eq!(rosa_core::dsp::ThreeChannelSpectrogram::load(&path).unwrap(), three);
    }

    let path = dir.path().join("xb.spec");
    xb.save(&path).unwrap();
    assert_eq!(Spectrogram::load(&path).unwrap(), xb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn log_baseline_ignores_overall_gain(seed in 0u64..1000, gain in 0.01f32..100.0) {
        let noise = |i: usize| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 100.0 + 0.5;
        let xm = spec(SpectrogramKind::Movement, 30, noise);
        let xd = spec(SpectrogramKind::Doppler, 30, |_| 0.2);
        let xb = spec(SpectrogramKind::Breathing, 30, noise);
        let scaled = spec(SpectrogramKind::Breathing, 30, |i| noise(i) * gain);
        let a = concat_channels(&xm, &xb, &xd, Normalization::LogBaseline).unwrap();
        let b = concat_channels(&xm, &scaled, &xd, Normalization::LogBaseline).unwrap();
        for (x, y) in a.channel(1).iter().zip(b.channel(1)) {
            prop_assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn power_nonnegative_and_doppler_in_band(seed in 0u64..1000, amp in 0.0f64..10.0) {
        let n = 1200;
        let series: Vec<Complex64> = (0..n)
            .map(|i| {
                let x = ((i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed) >> 11) as f64
                    / (1u64 << 53) as f64;
                Complex64::new(amp * (x - 0.5), amp * (2.0 * PI * x).sin())
            })
            .collect();
        let input = matrix(vec![series]);
        let filtered = bandpass_slow_time(&input, 0.1, 5.0).unwrap();
        let p = power_spectrogram(&filtered, 4.0, 1.0, SpectrogramKind::Breathing).unwrap();
        prop_assert!(p.data.iter().all(|&v| v >= 0.0));
        let d = doppler_principal(&filtered, &DopplerParams::default()).unwrap();
        prop_assert!(d.data.iter().all(|&v| v == 0.0 || (0.1 - 1e-6..=5.0 + 1e-6).contains(&(v as f64))));
    }
}
