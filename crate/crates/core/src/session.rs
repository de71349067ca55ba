//! Session data model and the on-disk session container.
//!
//! A session directory holds:
//!
//! * `manifest.json` with identity, duration, radar configuration and file names,
//! * `beat.c64` with the raw beat signal (optional),
//! * `spo2.csv` with the oximeter trace,
//! * `events.jsonl` with ground-truth annotations.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Shortest event accepted for annotations and final detections, in seconds.
pub const MIN_EVENT_DURATION_S: f64 = 10.0;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BEAT_FILE: &str = "beat.c64";
pub const SPO2_FILE: &str = "spo2.csv";
pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    #[serde(rename = "start_frequency_hz")]
    pub start_frequency: f64,
    #[serde(rename = "sweep_bandwidth_hz")]
    pub sweep_bandwidth: f64,
    /// Chirps per second, i.e. the slow-time sampling rate.
    #[serde(rename = "frame_rate_hz")]
    pub frame_rate: f64,
    pub samples_per_chirp: usize,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            start_frequency: 60e9,
            sweep_bandwidth: 3e9,
            frame_rate: 50.0,
            samples_per_chirp: 256,
        }
    }
}

impl RadarConfig {
    /// Range bin spacing c / (2 B) in meters.
    pub fn range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.sweep_bandwidth)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.start_frequency
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("start_frequency", self.start_frequency),
            ("sweep_bandwidth", self.sweep_bandwidth),
            ("frame_rate", self.frame_rate),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invariant(format!("radar {name} must be > 0, got {v}")));
            }
        }
        if self.samples_per_chirp == 0 {
            return Err(Error::Invariant("radar samples_per_chirp must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventCategory {
    CA,
    OA,
    MA,
    H,
}

impl EventCategory {
    pub const ALL: [EventCategory; 4] = [Self::CA, Self::OA, Self::MA, Self::H];

    pub fn index(self) -> usize {
        match self {
            Self::CA => 0,
            Self::OA => 1,
            Self::MA => 2,
            Self::H => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_apnea(self) -> bool {
        !matches!(self, Self::H)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CA => "CA",
            Self::OA => "OA",
            Self::MA => "MA",
            Self::H => "H",
        }
    }
}

impl std::fmt::Display for EventCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Anything occupying an interval on the session time axis (seconds or frames).
pub trait TimeSpan {
    fn t_start(&self) -> f64;
    fn t_end(&self) -> f64;

    fn length(&self) -> f64 {
        self.t_end() - self.t_start()
    }
}

/// A bare `[start, end)` interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }
}

impl TimeSpan for Interval {
    fn t_start(&self) -> f64 {
        self.start
    }
    fn t_end(&self) -> f64 {
        self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    #[serde(rename = "type")]
    pub category: EventCategory,
    #[serde(rename = "t_start_s")]
    pub t_start: f64,
    #[serde(rename = "t_end_s")]
    pub t_end: f64,
}

impl EventAnnotation {
    pub fn new(category: EventCategory, t_start: f64, t_end: f64) -> Result<Self> {
        let ev = Self {
            category,
            t_start,
            t_end,
        };
        ev.validate()?;
        Ok(ev)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_start.is_finite() && self.t_end.is_finite()) {
            return Err(Error::Invariant("event bounds must be finite".into()));
        }
        if self.t_end <= self.t_start {
            return Err(Error::Invariant(format!(
                "event t_end ({}) must exceed t_start ({})",
                self.t_end, self.t_start
            )));
        }
        if self.t_end - self.t_start < MIN_EVENT_DURATION_S {
            return Err(Error::Invariant(format!(
                "event [{}, {}] shorter than {MIN_EVENT_DURATION_S} s",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

impl TimeSpan for EventAnnotation {
    fn t_start(&self) -> f64 {
        self.t_start
    }
    fn t_end(&self) -> f64 {
        self.t_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedSegment {
    #[serde(rename = "type")]
    pub category: EventCategory,
    pub score: f64,
    #[serde(rename = "t_start_s")]
    pub t_start: f64,
    #[serde(rename = "t_end_s")]
    pub t_end: f64,
}

impl DetectedSegment {
    pub fn new(category: EventCategory, score: f64, t_start: f64, t_end: f64) -> Result<Self> {
        let d = Self {
            category,
            score,
            t_start,
            t_end,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_start.is_finite() && self.t_end.is_finite()) || self.t_end <= self.t_start {
            return Err(Error::Invariant(format!(
                "detection bounds [{}, {}] invalid",
                self.t_start, self.t_end
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Invariant(format!("detection score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

impl TimeSpan for DetectedSegment {
    fn t_start(&self) -> f64 {
        self.t_start
    }
    fn t_end(&self) -> f64 {
        self.t_end
    }
}

/// Pulse-oximeter saturation trace, uniformly sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct SpO2Trace {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl SpO2Trace {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        let t = Self {
            samples,
            sample_rate,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::Invariant(format!("SpO2 sample rate {} must be > 0", self.sample_rate)));
        }
        if let Some((i, v)) = self
            .samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=100.0).contains(*v))
        {
            return Err(Error::Invariant(format!("SpO2 sample {i} = {v} outside [0, 100]")));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

/// Raw beat signal, row-major `[chirp][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatMatrix {
    pub data: Vec<Complex32>,
    pub n_chirps: usize,
    pub config: RadarConfig,
}

impl BeatMatrix {
    pub fn new(data: Vec<Complex32>, n_chirps: usize, config: RadarConfig) -> Result<Self> {
        let m = Self {
            data,
            n_chirps,
            config,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(n_chirps: usize, config: RadarConfig) -> Self {
        Self {
            data: vec![Complex32::new(0.0, 0.0); n_chirps * config.samples_per_chirp],
            n_chirps,
            config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.n_chirps == 0 {
            return Err(Error::Invariant("beat matrix needs at least one chirp".into()));
        }
        let expected = self.n_chirps * self.config.samples_per_chirp;
        if self.data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "beat matrix holds {} samples, expected {} x {} = {expected}",
                self.data.len(),
                self.n_chirps,
                self.config.samples_per_chirp
            )));
        }
        Ok(())
    }

    pub fn chirp(&self, t: usize) -> &[Complex32] {
        let n = self.config.samples_per_chirp;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_chirps as f64 / self.config.frame_rate
    }
}

/// Range bins by slow time. Stored bin-major so each bin's slow-time series is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeTimeMatrix {
    pub data: Vec<num_complex::Complex64>,
    pub n_range_bins: usize,
    pub n_chirps: usize,
    /// Index of row 0 in the full one-sided range axis (non-zero after cropping).
    pub first_bin: usize,
    pub bin_spacing: f64,
    pub slow_time_rate: f64,
}

impl RangeTimeMatrix {
    pub fn bin(&self, r: usize) -> &[num_complex::Complex64] {
        &self.data[r * self.n_chirps..(r + 1) * self.n_chirps]
    }

    pub fn bin_mut(&mut self, r: usize) -> &mut [num_complex::Complex64] {
        &mut self.data[r * self.n_chirps..(r + 1) * self.n_chirps]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_chirps as f64 / self.slow_time_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SleepSession {
    pub id: String,
    pub duration_s: f64,
    pub radar: RadarConfig,
    pub beat: Option<BeatMatrix>,
    pub spo2: SpO2Trace,
    pub events: Vec<EventAnnotation>,
    /// Total sleep time in hours.
    pub tst_h: f64,
}

impl SleepSession {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Invariant("session id must not be empty".into()));
        }
        if !(self.tst_h.is_finite() && self.tst_h > 0.0) {
            return Err(Error::Invariant(format!("TST {} h must be > 0", self.tst_h)));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::Invariant(format!("duration {} s must be > 0", self.duration_s)));
        }
        self.radar.validate()?;
        self.spo2.validate()?;
        if let Some(beat) = &self.beat {
            beat.validate()?;
            if beat.config != self.radar {
                return Err(Error::Invariant("beat radar config differs from session radar config".into()));
            }
        }
        for ev in &self.events {
            ev.validate()?;
            if ev.t_start < 0.0 || ev.t_end > self.duration_s {
                return Err(Error::Invariant(format!(
                    "event [{}, {}] outside session [0, {}]",
                    ev.t_start, ev.t_end, self.duration_s
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub beat: Option<String>,
    pub spo2: String,
    pub events: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    pub duration_s: f64,
    pub radar: RadarConfig,
    pub tst_h: f64,
    pub spo2_rate_hz: f64,
    pub files: ManifestFiles,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_session(session: &SleepSession, dir: &Path) -> Result<()> {
    session.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest = Manifest {
        id: session.id.clone(),
        duration_s: session.duration_s,
        radar: session.radar,
        tst_h: session.tst_h,
        spo2_rate_hz: session.spo2.sample_rate,
        files: ManifestFiles {
            beat: session.beat.as_ref().map(|_| BEAT_FILE.to_string()),
            spo2: SPO2_FILE.into(),
            events: EVENTS_FILE.into(),
        },
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &json)?;

    let beat_path = dir.join(BEAT_FILE);
    match &session.beat {
        Some(beat) => write_file(&beat_path, &encode_c64(&beat.data))?,
        None => {
            if beat_path.exists() {
                fs::remove_file(&beat_path).map_err(|e| Error::io(&beat_path, e))?;
            }
        }
    }

    write_spo2_csv(&dir.join(SPO2_FILE), &session.spo2)?;
    write_jsonl(&dir.join(EVENTS_FILE), &session.events)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::malformed("manifest.json", e))?;
    manifest.radar.validate()?;
    Ok(manifest)
}

pub fn load_session(dir: &Path) -> Result<SleepSession> {
    load_session_with(dir, true)
}

/// Loads a session, optionally skipping the (large) beat file.
pub fn load_session_with(dir: &Path, with_beat: bool) -> Result<SleepSession> {
    let manifest = load_manifest(dir)?;

    let beat = match (&manifest.files.beat, with_beat) {
        (Some(name), true) => {
            let path = dir.join(name);
            if path.is_file() {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let n = manifest.radar.samples_per_chirp;
                if bytes.len() % (8 * n) != 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "{}: {} bytes is not a multiple of 8 x {n}",
                        path.display(),
                        bytes.len()
                    )));
                }
                let n_chirps = bytes.len() / (8 * n);
                let expected = (manifest.duration_s * manifest.radar.frame_rate).round() as usize;
                if n_chirps != expected {
                    return Err(Error::DimensionMismatch(format!(
                        "{}: {n_chirps} chirps but manifest declares {expected}",
                        path.display()
                    )));
                }
                Some(BeatMatrix::new(decode_c64(&bytes), n_chirps, manifest.radar)?)
            } else {
                None
            }
        }
        _ => None,
    };

    let spo2 = read_spo2_csv(&dir.join(&manifest.files.spo2), manifest.spo2_rate_hz)?;
    let events: Vec<EventAnnotation> = read_jsonl(&dir.join(&manifest.files.events))?;

    let session = SleepSession {
        id: manifest.id,
        duration_s: manifest.duration_s,
        radar: manifest.radar,
        beat,
        spo2,
        events,
        tst_h: manifest.tst_h,
    };
    session.validate()?;
    Ok(session)
}

pub fn encode_c64(data: &[Complex32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 8);
    for z in data {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

pub fn decode_c64(bytes: &[u8]) -> Vec<Complex32> {
    bytes
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect()
}

pub fn write_spo2_csv(path: &Path, trace: &SpO2Trace) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "t_s,spo2_pct").map_err(io)?;
    for (i, v) in trace.samples.iter().enumerate() {
        writeln!(w, "{},{}", i as f64 / trace.sample_rate, v).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_spo2_csv(path: &Path, sample_rate: f64) -> Result<SpO2Trace> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 {
            if line.trim() != "t_s,spo2_pct" {
                return Err(Error::malformed("spo2.csv", format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let value = line
            .split(',')
            .nth(1)
            .ok_or_else(|| Error::malformed("spo2.csv", format!("line {}: missing column", lineno + 1)))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|e| Error::malformed("spo2.csv", format!("line {}: {e}", lineno + 1)))?;
        samples.push(v);
    }
    SpO2Trace::new(samples, sample_rate)
}

/// Writes one JSON object per line. An empty slice produces an empty file.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("record serializes");
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::malformed(
                    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                    format!("line {}: {e}", i + 1),
                )
            })
        })
        .collect()
}

pub fn write_detections(path: &Path, detections: &[DetectedSegment]) -> Result<()> {
    for d in detections {
        d.validate()?;
    }
    write_jsonl(path, detections)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectedSegment>> {
    let dets: Vec<DetectedSegment> = read_jsonl(path)?;
    for d in &dets {
        d.validate()?;
    }
    Ok(dets)
}
