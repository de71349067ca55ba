//! Evaluation mathematics: segment IoU, AP, AHI, ICC, ODI3, diagnostic
//! agreement at AHI cut-offs and Bland-Altman statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oximetry::{median3, scan_desaturations};
use crate::session::{DetectedSegment, EventAnnotation, EventCategory, SpO2Trace, TimeSpan};

pub const DIAGNOSTIC_THRESHOLDS: [f64; 3] = [5.0, 15.0, 30.0];

/// Intersection over union of two intervals; 0 when either is empty.
pub fn iou_1d<A: TimeSpan + ?Sized, B: TimeSpan + ?Sized>(a: &A, b: &B) -> f64 {
    let inter = (a.t_end().min(b.t_end()) - a.t_start().max(b.t_start())).max(0.0);
    let union = a.length().max(0.0) + b.length().max(0.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    #[default]
    ClassAgnostic,
    /// Mean of per-class APs over the classes present in the ground truth.
    ClassAware,
}

/// AP of one session's detections.
pub fn average_precision(
    detections: &[DetectedSegment],
    ground_truth: &[EventAnnotation],
    iou_threshold: f64,
    mode: ApMode,
) -> Option<f64> {
    pooled_average_precision(&[(detections, ground_truth)], iou_threshold, mode)
}

/// AP with every session's detections pooled into a single ranked list.
/// Detections only match ground truth of their own session. Returns `None`
/// when there is no ground truth at all.
pub fn pooled_average_precision(
    sessions: &[(&[DetectedSegment], &[EventAnnotation])],
    iou_threshold: f64,
    mode: ApMode,
) -> Option<f64> {
    match mode {
        ApMode::ClassAgnostic => ap_for(sessions, iou_threshold, None),
        ApMode::ClassAware => {
            let present: Vec<EventCategory> = EventCategory::ALL
                .into_iter()
                .filter(|c| sessions.iter().any(|(_, g)| g.iter().any(|e| e.category == *c)))
                .collect();
            if present.is_empty() {
                return None;
            }
            let sum: f64 = present
                .iter()
                .map(|c| ap_for(sessions, iou_threshold, Some(*c)).unwrap_or(0.0))
                .sum();
            Some(sum / present.len() as f64)
        }
    }
}

fn ap_for(
    sessions: &[(&[DetectedSegment], &[EventAnnotation])],
    iou_threshold: f64,
    class: Option<EventCategory>,
) -> Option<f64> {
    let keep = |c: EventCategory| class.is_none_or(|k| k == c);
    let gts: Vec<Vec<&EventAnnotation>> = sessions
        .iter()
        .map(|(_, g)| g.iter().filter(|e| keep(e.category)).collect())
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &DetectedSegment)> = sessions
        .iter()
        .enumerate()
        .flat_map(|(s, (d, _))| d.iter().filter(|x| keep(x.category)).map(move |x| (s, x)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then(a.1.t_start.total_cmp(&b.1.t_start))
            .then(a.0.cmp(&b.0))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(ranked.len());
    let mut recalls = Vec::with_capacity(ranked.len());
    for (k, (s, det)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[*s].iter().enumerate() {
            if matched[*s][g] {
                continue;
            }
            let iou = iou_1d(*det, *gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= iou_threshold {
                matched[*s][g] = true;
                tp += 1;
            }
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    Some(all_point_area(&recalls, &precisions))
}

/// Area under the monotone (right-to-left maximum) precision envelope.
fn all_point_area(recalls: &[f64], precisions: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recalls.len() + 2);
    let mut mpre = Vec::with_capacity(recalls.len() + 2);
    mrec.push(0.0);
    mpre.push(0.0);
    mrec.extend_from_slice(recalls);
    mpre.extend_from_slice(precisions);
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

/// Apnea-hypopnea index: all four event categories per hour of sleep.
pub fn compute_ahi<T>(events: &[T], tst_h: f64) -> Result<f64> {
    if !(tst_h > 0.0) {
        return Err(Error::InvalidParameter(format!("TST must be > 0 h, got {tst_h}")));
    }
    Ok(events.len() as f64 / tst_h)
}

/// Events per hour counted from detections whose score reaches `threshold`.
pub fn estimate_ahi(detections: &[DetectedSegment], tst_h: f64, threshold: f64) -> Result<f64> {
    let counted: Vec<_> = detections.iter().filter(|d| d.score >= threshold).collect();
    compute_ahi(&counted, tst_h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum IccForm {
    /// ICC(1,1): one-way random effects.
    #[serde(rename = "ICC(1,1)")]
    OneWayRandom,
    /// ICC(2,1): two-way random effects, absolute agreement, single rater.
    #[default]
    #[serde(rename = "ICC(2,1)")]
    TwoWayRandomAbsolute,
    /// ICC(3,1): two-way mixed effects, consistency, single rater.
    #[serde(rename = "ICC(3,1)")]
    TwoWayMixedConsistency,
}

/// Two-way ANOVA mean squares for an `n x k` ratings table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnovaTable {
    pub n: usize,
    pub k: usize,
    pub ms_rows: f64,
    pub ms_cols: f64,
    pub ms_error: f64,
    pub ms_within: f64,
}

pub fn two_way_anova(pairs: &[(f64, f64)]) -> AnovaTable {
    let n = pairs.len();
    let k = 2usize;
    let nf = n as f64;
    let kf = k as f64;
    let grand = pairs.iter().map(|(a, b)| a + b).sum::<f64>() / (nf * kf);
    let ss_total: f64 = pairs
        .iter()
        .map(|(a, b)| (a - grand).powi(2) + (b - grand).powi(2))
        .sum();
    let ss_rows: f64 = kf * pairs.iter().map(|(a, b)| ((a + b) / kf - grand).powi(2)).sum::<f64>();
    let col_a = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let col_b = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let ss_cols = nf * ((col_a - grand).powi(2) + (col_b - grand).powi(2));
    let ss_error = (ss_total - ss_rows - ss_cols).max(0.0);
    let ss_within = (ss_total - ss_rows).max(0.0);
    AnovaTable {
        n,
        k,
        ms_rows: ss_rows / (nf - 1.0),
        ms_cols: ss_cols / (kf - 1.0),
        ms_error: ss_error / ((nf - 1.0) * (kf - 1.0)),
        ms_within: ss_within / (nf * (kf - 1.0)),
    }
}

/// Intraclass correlation of two raters over `pairs`. `None` when there are
/// fewer than two subjects or no between-subject variance.
pub fn icc(pairs: &[(f64, f64)], form: IccForm) -> Option<f64> {
    if pairs.len() < 2 || pairs.iter().any(|(a, b)| !(a.is_finite() && b.is_finite())) {
        return None;
    }
    let t = two_way_anova(pairs);
    if t.ms_rows <= 0.0 {
        return None;
    }
    let k = t.k as f64;
    let n = t.n as f64;
    let (num, den) = match form {
        IccForm::OneWayRandom => (t.ms_rows - t.ms_within, t.ms_rows + (k - 1.0) * t.ms_within),
        IccForm::TwoWayRandomAbsolute => (
            t.ms_rows - t.ms_error,
            t.ms_rows + (k - 1.0) * t.ms_error + (k / n) * (t.ms_cols - t.ms_error),
        ),
        IccForm::TwoWayMixedConsistency => (t.ms_rows - t.ms_error, t.ms_rows + (k - 1.0) * t.ms_error),
    };
    (den > 0.0).then(|| num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdiParams {
    pub drop_threshold: f64,
    /// Recovery from the nadir that ends a desaturation.
    pub recovery: f64,
    pub median_smoothing: bool,
}

impl Default for OdiParams {
    fn default() -> Self {
        Self {
            drop_threshold: 3.0,
            recovery: 1.0,
            median_smoothing: true,
        }
    }
}

/// Desaturations of at least `drop_threshold` points per hour of sleep.
pub fn odi(trace: &SpO2Trace, tst_h: f64, params: &OdiParams) -> Result<f64> {
    if !(tst_h > 0.0) {
        return Err(Error::InvalidParameter(format!("TST must be > 0 h, got {tst_h}")));
    }
    let x = if params.median_smoothing {
        median3(&trace.samples)
    } else {
        trace.samples.clone()
    };
    let count = scan_desaturations(&x, params.recovery)
        .iter()
        .filter(|d| d.drop >= params.drop_threshold - 1e-9)
        .count();
    Ok(count as f64 / tst_h)
}

/// ODI3 with default parameters.
pub fn odi3(trace: &SpO2Trace, tst_h: f64) -> Result<f64> {
    odi(trace, tst_h, &OdiParams::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticMetrics {
    pub threshold: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: f64,
    pub kappa: Option<f64>,
}

/// Binarizes true and estimated AHI at `threshold` (positive when >=).
pub fn diagnostic_metrics(pairs: &[(f64, f64)], threshold: f64) -> Result<DiagnosticMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("diagnostic metrics need at least one subject".into()));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for &(truth, est) in pairs {
        match (truth >= threshold, est >= threshold) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
        }
    }
    Ok(confusion_metrics(threshold, tp, tn, fp, fn_))
}

pub fn confusion_metrics(threshold: f64, tp: usize, tn: usize, fp: usize, fn_: usize) -> DiagnosticMetrics {
    let n = (tp + tn + fp + fn_) as f64;
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    let p_o = (tp + tn) as f64 / n;
    let p_e = ((tp + fn_) as f64 * (tp + fp) as f64 + (tn + fp) as f64 * (tn + fn_) as f64) / (n * n);
    DiagnosticMetrics {
        threshold,
        tp,
        tn,
        fp,
        fn_,
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp),
        accuracy: p_o,
        kappa: (p_e < 1.0).then(|| (p_o - p_e) / (1.0 - p_e)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub loa_lower: f64,
    pub loa_upper: f64,
}

/// Differences `estimate - truth`; limits are `bias ± 1.96 sd` with the sample sd.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(Error::InvalidParameter("Bland-Altman needs at least two pairs".into()));
    }
    let d: Vec<f64> = pairs.iter().map(|(truth, est)| est - truth).collect();
    let n = d.len() as f64;
    let bias = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(BlandAltman {
        bias,
        sd,
        loa_lower: bias - 1.96 * sd,
        loa_upper: bias + 1.96 * sd,
    })
}

/// One subject's inputs to a cohort evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectOutcome {
    pub id: String,
    pub tst_h: f64,
    pub ground_truth: Vec<EventAnnotation>,
    /// Segment detections, if the method produces them.
    pub detections: Option<Vec<DetectedSegment>>,
    pub estimated_ahi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAgreement {
    pub id: String,
    pub true_ahi: f64,
    pub estimated_ahi: f64,
    pub ap50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub method: String,
    pub icc_form: IccForm,
    pub icc: Option<f64>,
    /// Pooled class-agnostic AP at IoU 0.5.
    pub ap50: Option<f64>,
    pub ap50_class_aware: Option<f64>,
    pub decision_threshold: Option<f64>,
    pub subjects: Vec<SubjectAgreement>,
    pub diagnostics: Vec<DiagnosticMetrics>,
    pub bland_altman: Option<BlandAltman>,
}

impl AgreementReport {
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.subjects.iter().map(|s| (s.true_ahi, s.estimated_ahi)).collect()
    }
}

pub fn evaluate_cohort(
    method: &str,
    subjects: &[SubjectOutcome],
    icc_form: IccForm,
    decision_threshold: Option<f64>,
) -> Result<AgreementReport> {
    let mut rows = Vec::with_capacity(subjects.len());
    for s in subjects {
        let true_ahi = compute_ahi(&s.ground_truth, s.tst_h)?;
        let ap50 = s
            .detections
            .as_ref()
            .and_then(|d| average_precision(d, &s.ground_truth, 0.5, ApMode::ClassAgnostic));
        rows.push(SubjectAgreement {
            id: s.id.clone(),
            true_ahi,
            estimated_ahi: s.estimated_ahi,
            ap50,
        });
    }
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.true_ahi, r.estimated_ahi)).collect();

    let has_detections = subjects.iter().all(|s| s.detections.is_some()) && !subjects.is_empty();
    let pooled: Vec<(&[DetectedSegment], &[EventAnnotation])> = if has_detections {
        subjects
            .iter()
            .map(|s| (s.detections.as_deref().unwrap_or(&[]), s.ground_truth.as_slice()))
            .collect()
    } else {
        Vec::new()
    };
    let (ap50, ap50_class_aware) = if has_detections {
        (
            pooled_average_precision(&pooled, 0.5, ApMode::ClassAgnostic),
            pooled_average_precision(&pooled, 0.5, ApMode::ClassAware),
        )
    } else {
        (None, None)
    };

    let diagnostics = if pairs.is_empty() {
        Vec::new()
    } else {
        DIAGNOSTIC_THRESHOLDS
            .iter()
            .map(|&t| diagnostic_metrics(&pairs, t))
            .collect::<Result<_>>()?
    };

    Ok(AgreementReport {
        method: method.to_string(),
        icc_form,
        icc: icc(&pairs, icc_form),
        ap50,
        ap50_class_aware,
        decision_threshold,
        subjects: rows,
        diagnostics,
        bland_altman: bland_altman(&pairs).ok(),
    })
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "/".into())
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "/".into())
}

/// Results grid with one row per (method, AHI cut-off).
pub fn table_csv(reports: &[AgreementReport]) -> String {
    let mut out = String::from(
        "method,ap50_pct,icc,threshold_events_per_h,sensitivity_pct,specificity_pct,accuracy_pct,kappa\n",
    );
    for r in reports {
        for d in &r.diagnostics {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method,
                pct(r.ap50),
                num(r.icc),
                d.threshold,
                pct(d.sensitivity),
                pct(d.specificity),
                pct(Some(d.accuracy)),
                num(d.kappa),
            ));
        }
    }
    out
}

/// Per-subject `(true, estimate, mean, difference)` rows for agreement plots.
pub fn agreement_csv(report: &AgreementReport) -> String {
    let mut out = String::from("id,true_ahi,estimated_ahi,mean,difference\n");
    for s in &report.subjects {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.id,
            s.true_ahi,
            s.estimated_ahi,
            (s.true_ahi + s.estimated_ahi) / 2.0,
            s.estimated_ahi - s.true_ahi
        ));
    }
    out
}
