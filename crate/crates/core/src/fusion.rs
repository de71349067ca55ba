//! Oximetry-based rescoring of radar detections and the threshold grid search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{estimate_ahi, icc, IccForm};
use crate::oximetry::{max_drawdown, median3, rise_after, scan_desaturations};
use crate::session::{DetectedSegment, SpO2Trace};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpO2Features {
    /// Drop of the first qualifying desaturation, in percentage points.
    pub p_d: f64,
    /// Rise from that desaturation's nadir.
    pub p_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    pub alpha: f64,
    pub beta: f64,
    pub t1: f64,
    pub t2: f64,
    /// Feature window after a detection's start, seconds.
    pub delta_t: f64,
    /// Minimum drop, in points, for a desaturation to qualify.
    pub od_threshold: f64,
    /// Recovery that separates consecutive desaturations.
    pub hysteresis: f64,
    /// How far past the nadir the rise is searched, seconds.
    pub rise_search_s: f64,
    pub median_smoothing: bool,
    /// Fused score needed for a detection to count towards the AHI.
    pub decision_threshold: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.6,
            t1: 4.0,
            t2: 2.0,
            delta_t: 60.0,
            od_threshold: 3.0,
            hysteresis: 1.0,
            rise_search_s: 60.0,
            median_smoothing: true,
            decision_threshold: 0.5,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) || !unit(self.beta) {
            return Err(Error::InvalidParameter(format!(
                "alpha and beta must lie in [0, 1], got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(self.t2 < self.t1) {
            return Err(Error::InvalidParameter(format!("need t2 < t1, got t1={} t2={}", self.t1, self.t2)));
        }
        if !(self.delta_t > 0.0) || !(self.rise_search_s >= 0.0) || !(self.hysteresis > 0.0) {
            return Err(Error::InvalidParameter("window lengths and hysteresis must be positive".into()));
        }
        if !unit(self.decision_threshold) {
            return Err(Error::InvalidParameter("decision threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Features plus a flag raised when the window fell outside the trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureOutcome {
    pub features: SpO2Features,
    pub empty_window: bool,
}

fn prepared(trace: &SpO2Trace, params: &FusionParams) -> Vec<f64> {
    if params.median_smoothing {
        median3(&trace.samples)
    } else {
        trace.samples.clone()
    }
}

fn features_on(x: &[f64], fs: f64, t_start: f64, params: &FusionParams) -> FeatureOutcome {
    let first = (t_start.max(0.0) * fs).round() as usize;
    if first >= x.len() {
        return FeatureOutcome {
            features: SpO2Features::default(),
            empty_window: true,
        };
    }
    let last = (((t_start.max(0.0) + params.delta_t) * fs).round() as usize).min(x.len() - 1);
    let window = &x[first..=last];
    let search = (params.rise_search_s * fs).round() as usize;

    let qualifying = scan_desaturations(window, params.hysteresis)
        .into_iter()
        .find(|d| d.drop >= params.od_threshold - 1e-9);
    let (p_d, nadir) = match qualifying {
        Some(d) => (d.drop, d.nadir_index),
        None => {
            let (drop, _, nadir) = max_drawdown(window);
            (drop, nadir)
        }
    };
    let p_r = if p_d > 0.0 {
        rise_after(x, first + nadir, search, params.hysteresis)
    } else {
        0.0
    };
    FeatureOutcome {
        features: SpO2Features { p_d, p_r },
        empty_window: false,
    }
}

/// Desaturation features in `[t_start, t_start + delta_t]`.
pub fn extract_od_features(trace: &SpO2Trace, t_start: f64, params: &FusionParams) -> FeatureOutcome {
    features_on(&prepared(trace, params), trace.sample_rate, t_start, params)
}

/// Raises scores backed by a clear desaturation and lowers those without one.
pub fn fuse_score(p: f64, f: SpO2Features, params: &FusionParams) -> f64 {
    if f.p_d >= params.t1 || f.p_r >= params.t1 {
        params.alpha * p + (1.0 - params.alpha)
    } else if f.p_d < params.t2 && f.p_r < params.t2 {
        params.beta * p
    } else {
        p
    }
}

/// Features for every detection, in order.
pub fn session_features(detections: &[DetectedSegment], trace: &SpO2Trace, params: &FusionParams) -> Vec<SpO2Features> {
    let x = prepared(trace, params);
    detections
        .iter()
        .map(|d| features_on(&x, trace.sample_rate, d.t_start, params).features)
        .collect()
}

/// Every detection with its score replaced by the fused score. Nothing is
/// dropped here; counting applies `decision_threshold`.
pub fn fuse_session(
    detections: &[DetectedSegment],
    trace: &SpO2Trace,
    params: &FusionParams,
) -> Result<Vec<DetectedSegment>> {
    params.validate()?;
    let features = session_features(detections, trace, params);
    Ok(detections
        .iter()
        .zip(features)
        .map(|(d, f)| DetectedSegment {
            score: fuse_score(d.score, f, params),
            ..d.clone()
        })
        .collect())
}

/// One subject's inputs to the threshold search.
#[derive(Debug, Clone)]
pub struct GridSubject {
    pub true_ahi: f64,
    pub tst_h: f64,
    pub detections: Vec<DetectedSegment>,
    pub trace: SpO2Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub t1: f64,
    pub t2: f64,
    pub icc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub params: FusionParams,
    pub icc: f64,
    pub evaluated: Vec<GridPoint>,
}

/// Default search ranges: T1 in [2, 8] and T2 in [0.5, 4], both in steps of 0.5.
pub fn default_grids() -> (Vec<f64>, Vec<f64>) {
    let t1 = (0..=12).map(|i| 2.0 + 0.5 * i as f64).collect();
    let t2 = (1..=8).map(|i| 0.5 * i as f64).collect();
    (t1, t2)
}

/// Exhaustive search for the `(t1, t2)` pair maximizing the ICC between true
/// and fused-estimate AHI. Ties go to the smallest `t1`, then smallest `t2`.
pub fn grid_search_thresholds(
    subjects: &[GridSubject],
    t1_grid: &[f64],
    t2_grid: &[f64],
    base: &FusionParams,
    form: IccForm,
) -> Result<GridSearchResult> {
    if subjects.len() < 2 {
        return Err(Error::InvalidParameter("grid search needs at least two subjects".into()));
    }
    if t1_grid.iter().chain(t2_grid).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("grids must be finite".into()));
    }
    let mut t1s = t1_grid.to_vec();
    let mut t2s = t2_grid.to_vec();
    t1s.sort_by(f64::total_cmp);
    t1s.dedup();
    t2s.sort_by(f64::total_cmp);
    t2s.dedup();

    let features: Vec<Vec<SpO2Features>> = subjects
        .iter()
        .map(|s| session_features(&s.detections, &s.trace, base))
        .collect();

    let mut evaluated = Vec::new();
    let mut best: Option<(f64, FusionParams)> = None;
    for &t1 in &t1s {
        for &t2 in &t2s {
            if t2 >= t1 {
                continue;
            }
            let params = FusionParams { t1, t2, ..*base };
            params.validate()?;
            let mut pairs = Vec::with_capacity(subjects.len());
            for (s, f) in subjects.iter().zip(&features) {
                let fused: Vec<DetectedSegment> = s
                    .detections
                    .iter()
                    .zip(f)
                    .map(|(d, f)| DetectedSegment {
                        score: fuse_score(d.score, *f, &params),
                        ..d.clone()
                    })
                    .collect();
                pairs.push((s.true_ahi, estimate_ahi(&fused, s.tst_h, params.decision_threshold)?));
            }
            let value = icc(&pairs, form);
            evaluated.push(GridPoint { t1, t2, icc: value });
            if let Some(v) = value {
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, params));
                }
            }
        }
    }
    if evaluated.is_empty() {
        return Err(Error::InvalidParameter("no feasible (t1, t2) pair with t2 < t1".into()));
    }
    let (icc, params) = best.ok_or_else(|| Error::Undefined("ICC undefined for every grid pair".into()))?;
    Ok(GridSearchResult { params, icc, evaluated })
}
