//! Seeded synthetic sleep sessions: FMCW beat signal with respiration,
//! apnea and movement physics, a coupled oximetry model, and ground truth.
//!
//! Each subject draws from its own ChaCha8 streams keyed by
//! `(seed, subject index, purpose)`, so any subset of subjects can be
//! regenerated in any order with identical results, and skipping the beat
//! signal does not perturb the oximetry or the schedule.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::{
    save_session, BeatMatrix, EventAnnotation, EventCategory, Interval, RadarConfig, SleepSession, SpO2Trace,
    TimeSpan, MIN_EVENT_DURATION_S,
};

pub const TRACE_FILE: &str = "trace.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityGroup {
    pub name: String,
    /// Mean AHI in events per hour.
    pub mean: f64,
    /// Half-width of the AHI range around the mean.
    pub spread: f64,
}

impl SeverityGroup {
    fn new(name: &str, mean: f64, spread: f64) -> Self {
        Self {
            name: name.into(),
            mean,
            spread,
        }
    }

    pub fn ahi_range(&self) -> (f64, f64) {
        ((self.mean - self.spread).max(0.0), self.mean + self.spread)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix {
    pub ca: f64,
    pub oa: f64,
    pub ma: f64,
    pub h: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        Self {
            ca: 0.25,
            oa: 0.35,
            ma: 0.1,
            h: 0.3,
        }
    }
}

impl CategoryMix {
    fn weights(&self) -> [f64; 4] {
        [self.ca, self.oa, self.ma, self.h]
    }

    fn sample(&self, rng: &mut impl Rng) -> EventCategory {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, w) in EventCategory::ALL.into_iter().zip(self.weights()) {
            acc += w;
            if u < acc {
                return c;
            }
        }
        EventCategory::H
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarModel {
    pub config: RadarConfig,
    /// Subject distance range, meters.
    pub range_m: (f64, f64),
    /// Breathing rate range, Hz.
    pub breathing_rate_hz: (f64, f64),
    /// Peak chest displacement during normal breathing, meters.
    pub displacement_m: f64,
    /// Relative slow variation of the breathing amplitude.
    pub amplitude_variation: f64,
    pub apnea_factor: f64,
    pub hypopnea_factor: f64,
    /// Duration of the amplitude ramp at event boundaries, seconds.
    pub ramp_s: f64,
    /// Per-sample signal-to-noise ratio, dB. `None` disables noise.
    pub snr_db: Option<f64>,
    /// Phase random-walk step during movement, radians per chirp.
    pub artifact_phase_step: f64,
}

impl Default for RadarModel {
    fn default() -> Self {
        Self {
            config: RadarConfig::default(),
            range_m: (0.6, 1.4),
            breathing_rate_hz: (0.2, 0.4),
            displacement_m: 2e-4,
            amplitude_variation: 0.1,
            apnea_factor: 0.05,
            hypopnea_factor: 0.5,
            ramp_s: 2.0,
            snr_db: Some(10.0),
            artifact_phase_step: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpO2Model {
    pub sample_rate_hz: f64,
    pub baseline_pct: f64,
    pub noise_sigma: f64,
    /// Lag from event onset to desaturation onset, seconds. It has to stay
    /// well below the 60 s feature window for the fusion step to see the drop.
    pub delay_s: f64,
    /// Depth = min(base + slope * (duration - 10), max).
    pub depth_base: f64,
    pub depth_slope: f64,
    pub depth_max: f64,
    pub hypopnea_depth_factor: f64,
    pub recovery_tau_s: f64,
    /// Fraction of central apneas without any desaturation.
    pub ca_without_desaturation: f64,
}

impl Default for SpO2Model {
    fn default() -> Self {
        Self {
            sample_rate_hz: 1.0,
            baseline_pct: 97.0,
            noise_sigma: 0.15,
            delay_s: 25.0,
            depth_base: 3.0,
            depth_slope: 0.1,
            depth_max: 10.0,
            hypopnea_depth_factor: 0.6,
            recovery_tau_s: 15.0,
            ca_without_desaturation: 0.2,
        }
    }
}

impl SpO2Model {
    pub fn depth(&self, category: EventCategory, duration_s: f64) -> f64 {
        let d = (self.depth_base + self.depth_slope * (duration_s - MIN_EVENT_DURATION_S)).min(self.depth_max);
        if category.is_apnea() {
            d
        } else {
            d * self.hypopnea_depth_factor
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub duration_s: f64,
    /// Subjects are assigned to groups round-robin.
    pub groups: Vec<SeverityGroup>,
    pub category_mix: CategoryMix,
    pub event_duration_s: (f64, f64),
    pub min_gap_s: f64,
    /// Events and artifacts keep this distance from both ends of the night.
    pub edge_margin_s: f64,
    pub artifact_rate_per_h: f64,
    pub artifact_duration_s: (f64, f64),
    /// Probability that a movement is followed by a stretch of shallow
    /// breathing with no desaturation, e.g. after a posture change.
    pub dropout_probability: f64,
    pub dropout_duration_s: (f64, f64),
    pub radar: RadarModel,
    pub spo2: SpO2Model,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 24,
            duration_s: 3600.0,
            groups: vec![
                SeverityGroup::new("healthy", 2.3, 2.0),
                SeverityGroup::new("mild", 8.1, 3.0),
                SeverityGroup::new("moderate", 21.9, 6.0),
                SeverityGroup::new("severe", 57.2, 5.0),
            ],
            category_mix: CategoryMix::default(),
            event_duration_s: (10.0, 60.0),
            min_gap_s: 20.0,
            edge_margin_s: 30.0,
            artifact_rate_per_h: 2.0,
            artifact_duration_s: (3.0, 10.0),
            dropout_probability: 0.0,
            dropout_duration_s: (10.0, 40.0),
            radar: RadarModel::default(),
            spo2: SpO2Model::default(),
            seed: 42,
        }
    }
}

impl CohortConfig {
    /// Frequent movement, most of it followed by shallow breathing without
    /// desaturation: radar-only false positives that oximetry can veto.
    pub fn artifact_heavy() -> Self {
        Self {
            artifact_rate_per_h: 8.0,
            dropout_probability: 0.6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.category_mix.weights();
        if w.iter().any(|p| !(*p >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter("category mix must be non-negative and sum to 1".into()));
        }
        if self.groups.is_empty() && self.n_subjects > 0 {
            return Err(Error::InvalidParameter("at least one severity group is required".into()));
        }
        if self.groups.iter().any(|g| !(g.mean >= 0.0) || !(g.spread >= 0.0)) {
            return Err(Error::InvalidParameter("group AHI means and spreads must be >= 0".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::InvalidParameter("duration must be > 0".into()));
        }
        let (lo, hi) = self.event_duration_s;
        if !(lo >= MIN_EVENT_DURATION_S && hi >= lo) {
            return Err(Error::InvalidParameter(format!("event durations must lie in [10 s, ..], got [{lo}, {hi}]")));
        }
        if !(self.spo2.delay_s >= 0.0) || !(self.spo2.sample_rate_hz > 0.0) {
            return Err(Error::InvalidParameter("SpO2 delay must be >= 0 and rate > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_probability)
            || !(0.0..=1.0).contains(&self.spo2.ca_without_desaturation)
        {
            return Err(Error::InvalidParameter("probabilities must lie in [0, 1]".into()));
        }
        self.radar.config.validate()
    }

    pub fn tst_h(&self) -> f64 {
        self.duration_s / 3600.0
    }

    pub fn group_of(&self, index: usize) -> usize {
        index % self.groups.len()
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Subject = 0,
    Schedule = 1,
    Artifacts = 2,
    Beat = 3,
    SpO2 = 4,
}

fn stream_rng(seed: u64, index: usize, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 * 8 + purpose as u64);
    rng
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Sorted, non-overlapping events for one night; `round(ahi * hours)` of them.
pub fn generate_event_schedule(config: &CohortConfig, subject_ahi: f64, rng: &mut impl Rng) -> Result<Vec<EventAnnotation>> {
    if !(subject_ahi >= 0.0) {
        return Err(Error::InvalidParameter(format!("AHI must be >= 0, got {subject_ahi}")));
    }
    let n = (subject_ahi * config.tst_h()).round() as usize;
    schedule_n_events(config, n, rng)
}

fn schedule_n_events(config: &CohortConfig, n: usize, rng: &mut impl Rng) -> Result<Vec<EventAnnotation>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let usable = config.duration_s - 2.0 * config.edge_margin_s - (n - 1) as f64 * config.min_gap_s;
    let (dmin, _) = config.event_duration_s;
    if usable < n as f64 * dmin {
        return Err(Error::InfeasibleSchedule(format!(
            "{n} events of >= {dmin} s with {} s gaps do not fit in {} s",
            config.min_gap_s, config.duration_s
        )));
    }
    for _ in 0..1000 {
        let durations: Vec<f64> = (0..n).map(|_| uniform(rng, config.event_duration_s)).collect();
        let slack = usable - durations.iter().sum::<f64>();
        if slack < 0.0 {
            continue;
        }
        let mut offsets: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * slack).collect();
        offsets.sort_by(f64::total_cmp);
        let mut events = Vec::with_capacity(n);
        let mut cursor = config.edge_margin_s;
        for (i, d) in durations.iter().enumerate() {
            let start = cursor + offsets[i];
            let category = config.category_mix.sample(rng);
            events.push(EventAnnotation::new(category, start, start + d)?);
            cursor += d + config.min_gap_s;
        }
        return Ok(events);
    }
    Err(Error::InfeasibleSchedule(format!("could not draw durations for {n} events")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub category: EventCategory,
    pub t_start_s: f64,
    pub t_end_s: f64,
    /// Breathing amplitude relative to normal during the event.
    pub amplitude_factor: f64,
    /// Desaturation depth in points; 0 when the event causes none.
    pub desaturation_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub subject_index: usize,
    pub seed: u64,
    pub group: String,
    pub ahi_range: (f64, f64),
    pub true_ahi: f64,
    pub subject_range_m: f64,
    pub breathing_rate_hz: f64,
    pub displacement_m: f64,
    pub events: Vec<EventTrace>,
    pub artifacts: Vec<Interval>,
    /// Shallow-breathing stretches that are not scored events.
    pub dropouts: Vec<Interval>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSession {
    pub session: SleepSession,
    pub trace: GenerationTrace,
}

fn overlaps(a: (f64, f64), b: (f64, f64), guard: f64) -> bool {
    a.0 < b.1 + guard && b.0 < a.1 + guard
}

/// Movement bursts and the shallow-breathing stretches that may follow them,
/// kept clear of scored events.
fn place_artifacts(
    config: &CohortConfig,
    events: &[EventAnnotation],
    rng: &mut impl Rng,
) -> (Vec<Interval>, Vec<Interval>) {
    let n = (config.artifact_rate_per_h * config.tst_h()).round() as usize;
    let mut artifacts: Vec<Interval> = Vec::new();
    let mut dropouts: Vec<Interval> = Vec::new();
    let mut taken: Vec<(f64, f64)> = events.iter().map(|e| (e.t_start, e.t_end)).collect();
    for _ in 0..n {
        let len = uniform(rng, config.artifact_duration_s);
        let dropout = (rng.random::<f64>() < config.dropout_probability)
            .then(|| uniform(rng, config.dropout_duration_s));
        let total = len + dropout.unwrap_or(0.0);
        let hi = config.duration_s - config.edge_margin_s - total;
        if hi <= config.edge_margin_s {
            continue;
        }
        for _ in 0..200 {
            let start = rng.random_range(config.edge_margin_s..hi);
            let span = (start, start + total);
            if taken.iter().any(|t| overlaps(span, *t, config.min_gap_s)) {
                continue;
            }
            taken.push(span);
            artifacts.push(Interval::new(start, start + len));
            if let Some(d) = dropout {
                dropouts.push(Interval::new(start + len, start + len + d));
            }
            break;
        }
    }
    artifacts.sort_by(|a, b| a.start.total_cmp(&b.start));
    dropouts.sort_by(|a, b| a.start.total_cmp(&b.start));
    (artifacts, dropouts)
}

/// Breathing amplitude factor at time `t`: 1 outside events, the event's
/// factor inside, with linear ramps of `ramp` seconds at both edges.
fn amplitude_factor(t: f64, spans: &[(f64, f64, f64)], ramp: f64) -> f64 {
    let mut f: f64 = 1.0;
    for &(a, b, level) in spans {
        if t < a - ramp || t > b + ramp {
            continue;
        }
        let w = if t < a {
            (t - (a - ramp)) / ramp
        } else if t > b {
            ((b + ramp) - t) / ramp
        } else {
            1.0
        };
        let w = w.clamp(0.0, 1.0);
        f = f.min(1.0 + (level - 1.0) * w);
    }
    f
}

/// Beat signal of a single static subject whose chest displacement
/// phase-modulates the return.
pub fn synthesize_beat(
    duration_s: f64,
    trace: &GenerationTrace,
    model: &RadarModel,
    rng: &mut impl Rng,
) -> Result<BeatMatrix> {
    let cfg = model.config.clone();
    let n_chirps = (duration_s * cfg.frame_rate).round() as usize;
    let n = cfg.samples_per_chirp;
    let bin = trace.subject_range_m / cfg.range_resolution();
    let tone: Vec<Complex64> = (0..n)
        .map(|m| Complex64::from_polar(1.0, 2.0 * PI * bin * m as f64 / n as f64))
        .collect();
    let k = 4.0 * PI / cfg.wavelength();
    let noise_sd = model.snr_db.map(|snr| (10f64.powf(-snr / 10.0) / 2.0).sqrt());

    let spans: Vec<(f64, f64, f64)> = trace
        .events
        .iter()
        .map(|e| (e.t_start_s, e.t_end_s, e.amplitude_factor))
        .chain(trace.dropouts.iter().map(|d| (d.start, d.end, model.apnea_factor)))
        .collect();
    let var_period = rng.random_range(60.0..180.0);
    let var_phase = rng.random_range(0.0..2.0 * PI);
    let phase0 = rng.random_range(0.0..2.0 * PI);

    let mut data = Vec::with_capacity(n * n_chirps);
    let mut walk = 0.0;
    let mut artifact = 0usize;
    for c in 0..n_chirps {
        let t = c as f64 / cfg.frame_rate;
        let envelope = 1.0 + model.amplitude_variation * (2.0 * PI * t / var_period + var_phase).sin();
        let a = trace.displacement_m * envelope * amplitude_factor(t, &spans, model.ramp_s);
        let displacement = a * (2.0 * PI * trace.breathing_rate_hz * t).sin();

        while artifact < trace.artifacts.len() && trace.artifacts[artifact].end < t {
            artifact += 1;
        }
        if trace.artifacts.get(artifact).is_some_and(|iv| iv.start <= t) {
            walk += model.artifact_phase_step * rng.sample::<f64, _>(StandardNormal);
        }
        let rot = Complex64::from_polar(1.0, phase0 + k * displacement + walk);
        for z in &tone {
            let mut s = z * rot;
            if let Some(sd) = noise_sd {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                s += Complex64::new(re * sd, im * sd);
            }
            data.push(Complex32::new(s.re as f32, s.im as f32));
        }
    }
    BeatMatrix::new(data, n_chirps, cfg)
}

/// Oximetry trace: baseline, noise, and one delayed desaturation per event
/// with a nonzero depth. Overlapping desaturations combine by their deeper
/// deficit.
pub fn synthesize_spo2(duration_s: f64, events: &[EventTrace], model: &SpO2Model, rng: &mut impl Rng) -> Result<SpO2Trace> {
    let fs = model.sample_rate_hz;
    let n = (duration_s * fs).round() as usize;
    let mut deficit = vec![0.0f64; n];
    for e in events.iter().filter(|e| e.desaturation_depth > 0.0) {
        let onset = e.t_start_s + model.delay_s;
        let fall = e.t_end_s - e.t_start_s;
        let tau_fall = fall / 3.0;
        let norm = 1.0 - (-fall / tau_fall).exp();
        let first = (onset * fs).ceil() as usize;
        for (i, slot) in deficit.iter_mut().enumerate().skip(first) {
            let dt = i as f64 / fs - onset;
            let v = if dt <= fall {
                e.desaturation_depth * (1.0 - (-dt / tau_fall).exp()) / norm
            } else {
                e.desaturation_depth * (-(dt - fall) / model.recovery_tau_s).exp()
            };
            if v < 1e-6 && dt > fall {
                break;
            }
            *slot = slot.max(v);
        }
    }
    let samples = deficit
        .iter()
        .map(|d| {
            let noise: f64 = if model.noise_sigma > 0.0 {
                model.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            (model.baseline_pct - d + noise).clamp(0.0, 100.0)
        })
        .collect();
    SpO2Trace::new(samples, fs)
}

/// One subject, optionally without the (large) beat signal.
pub fn generate_subject(config: &CohortConfig, index: usize, with_beat: bool) -> Result<SyntheticSession> {
    config.validate()?;
    let group = &config.groups[config.group_of(index)];
    let (lo, hi) = group.ahi_range();
    let h = config.tst_h();

    let mut rng = stream_rng(config.seed, index, Stream::Subject);
    let min_count = (lo * h).ceil() as usize;
    let max_count = ((hi * h).floor() as usize).max(min_count);
    let count = rng.random_range(min_count..=max_count);
    let subject_range_m = uniform(&mut rng, config.radar.range_m);
    let breathing_rate_hz = uniform(&mut rng, config.radar.breathing_rate_hz);

    let mut rng = stream_rng(config.seed, index, Stream::Schedule);
    let schedule = schedule_n_events(config, count, &mut rng)?;
    let events: Vec<EventTrace> = schedule
        .iter()
        .map(|e| {
            let no_od = e.category == EventCategory::CA && rng.random::<f64>() < config.spo2.ca_without_desaturation;
            EventTrace {
                category: e.category,
                t_start_s: e.t_start,
                t_end_s: e.t_end,
                amplitude_factor: if e.category.is_apnea() {
                    config.radar.apnea_factor
                } else {
                    config.radar.hypopnea_factor
                },
                desaturation_depth: if no_od {
                    0.0
                } else {
                    config.spo2.depth(e.category, e.length())
                },
            }
        })
        .collect();

    let mut rng = stream_rng(config.seed, index, Stream::Artifacts);
    let (artifacts, dropouts) = place_artifacts(config, &schedule, &mut rng);

    let trace = GenerationTrace {
        subject_index: index,
        seed: config.seed,
        group: group.name.clone(),
        ahi_range: (lo, hi),
        true_ahi: count as f64 / h,
        subject_range_m,
        breathing_rate_hz,
        displacement_m: config.radar.displacement_m,
        events,
        artifacts,
        dropouts,
    };

    let beat = if with_beat {
        let mut rng = stream_rng(config.seed, index, Stream::Beat);
        Some(synthesize_beat(config.duration_s, &trace, &config.radar, &mut rng)?)
    } else {
        None
    };
    let mut rng = stream_rng(config.seed, index, Stream::SpO2);
    let spo2 = synthesize_spo2(config.duration_s, &trace.events, &config.spo2, &mut rng)?;

    let session = SleepSession {
        id: subject_id(index),
        duration_s: config.duration_s,
        radar: config.radar.config.clone(),
        beat,
        spo2,
        events: schedule,
        tst_h: h,
    };
    session.validate()?;
    Ok(SyntheticSession { session, trace })
}

pub fn subject_id(index: usize) -> String {
    format!("subject_{index:03}")
}

pub fn save_trace(trace: &GenerationTrace, dir: &Path) -> Result<()> {
    let path = dir.join(TRACE_FILE);
    let text = serde_json::to_string_pretty(trace).map_err(|e| Error::malformed("trace", e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_trace(dir: &Path) -> Result<GenerationTrace> {
    let path = dir.join(TRACE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed("trace", e.to_string()))
}

/// Writes every subject to `out/subject_NNN/` and returns the directories.
pub fn generate_cohort(config: &CohortConfig, out: &Path, with_beat: bool) -> Result<Vec<PathBuf>> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut dirs = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let s = generate_subject(config, i, with_beat)?;
        let dir = out.join(&s.session.id);
        save_session(&s.session, &dir)?;
        save_trace(&s.trace, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

