//! Subject-wise cross-validation of the detector, in-fold fusion threshold
//! search and the three-method comparison (ODI3, radar only, fused).

use serde::{Deserialize, Serialize};

use rosa_core::dsp::{preprocess_beat, PreprocessParams, ThreeChannelSpectrogram};
use rosa_core::fusion::{default_grids, fuse_session, grid_search_thresholds, FusionParams, GridSearchResult, GridSubject};
use rosa_core::metrics::{
    compute_ahi, estimate_ahi, evaluate_cohort, odi3, AgreementReport, IccForm, SubjectOutcome, DIAGNOSTIC_THRESHOLDS,
};
use rosa_core::session::{DetectedSegment, EventAnnotation, SpO2Trace};
use rosa_core::sim::{generate_subject, CohortConfig};
use rosa_detector::train::{train, EpochLog, TrainConfig, TrainOutcome, TrainingSample};
use rosa_detector::{ArchConfig, DetectOptions, Model};

use crate::error::{CliError, Result};

/// One preprocessed subject held in memory.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: String,
    pub tst_h: f64,
    pub spec: ThreeChannelSpectrogram,
    pub spo2: SpO2Trace,
    pub events: Vec<EventAnnotation>,
}

impl SubjectData {
    pub fn true_ahi(&self) -> f64 {
        compute_ahi(&self.events, self.tst_h).unwrap_or(f64::NAN)
    }

    pub fn severity(&self) -> usize {
        severity_class(self.true_ahi())
    }
}

/// Number of diagnostic cut-offs (5, 15, 30 events/h) at or below `ahi`.
pub fn severity_class(ahi: f64) -> usize {
    DIAGNOSTIC_THRESHOLDS.iter().filter(|&&t| ahi >= t).count()
}

/// Simulates each subject, preprocesses its beat signal and drops it, so at
/// most one beat matrix is alive at a time.
pub fn simulate_preprocessed(
    config: &CohortConfig,
    params: &PreprocessParams,
    mut progress: impl FnMut(&str),
) -> Result<Vec<SubjectData>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let s = generate_subject(config, i, true)?;
        let beat = s.session.beat.as_ref().expect("generated with beat");
        let spec = preprocess_beat(beat, params)?;
        progress(&format!("simulated {}", s.session.id));
        out.push(SubjectData {
            id: s.session.id,
            tst_h: s.session.tst_h,
            spec,
            spo2: s.session.spo2,
            events: s.session.events,
        });
    }
    Ok(out)
}

/// Fold index per subject. Subjects are ordered by (group, position) and
/// dealt round-robin, so each fold receives every group in near-equal share.
pub fn stratified_folds(groups: &[usize], k: usize) -> Result<Vec<usize>> {
    if k < 2 || k > groups.len() {
        return Err(CliError::Usage(format!("{k} folds for {} subjects", groups.len())));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| (groups[i], i));
    let mut fold = vec![0; groups.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub folds: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub fusion: FusionParams,
    pub t1_grid: Vec<f64>,
    pub t2_grid: Vec<f64>,
    pub icc_form: IccForm,
    pub score_floor: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let (t1_grid, t2_grid) = default_grids();
        Self {
            folds: 4,
            arch: ArchConfig::small(),
            // A lighter background weight trades precision for recall on
            // shallow hypopneas, which oximetry then confirms or vetoes.
            train: TrainConfig {
                epochs: 20,
                base_lr: 0.005,
                background_weight: 0.3,
                ..TrainConfig::default()
            },
            fusion: FusionParams::default(),
            t1_grid,
            t2_grid,
            icc_form: IccForm::default(),
            score_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub logs: Vec<EpochLog>,
    pub fusion: FusionParams,
    pub grid_icc: f64,
}

/// Held-out results for one subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRun {
    pub id: String,
    pub fold: usize,
    pub tst_h: f64,
    pub events: Vec<EventAnnotation>,
    pub radar: Vec<DetectedSegment>,
    pub fused: Vec<DetectedSegment>,
    pub odi3: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOutcome {
    pub folds: Vec<FoldSummary>,
    pub subjects: Vec<SubjectRun>,
}

pub fn training_samples(data: &[SubjectData], idx: &[usize]) -> Vec<TrainingSample> {
    idx.iter()
        .map(|&i| TrainingSample::new(&data[i].spec, data[i].events.clone()))
        .collect()
}

/// Threshold search over the training subjects' own detections.
pub fn fit_fusion(
    data: &[SubjectData],
    idx: &[usize],
    detections: &[Vec<DetectedSegment>],
    cfg: &ExperimentConfig,
) -> Result<GridSearchResult> {
    let subjects: Vec<GridSubject> = idx
        .iter()
        .zip(detections)
        .map(|(&i, d)| GridSubject {
            true_ahi: data[i].true_ahi(),
            tst_h: data[i].tst_h,
            detections: d.clone(),
            trace: data[i].spo2.clone(),
        })
        .collect();
    Ok(grid_search_thresholds(&subjects, &cfg.t1_grid, &cfg.t2_grid, &cfg.fusion, cfg.icc_form)?)
}

/// Fold per subject, stratified by AHI severity class.
pub fn assign_folds(data: &[SubjectData], k: usize) -> Result<Vec<usize>> {
    let groups: Vec<usize> = data.iter().map(SubjectData::severity).collect();
    stratified_folds(&groups, k)
}

pub fn split(assignment: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..assignment.len()).partition(|&i| assignment[i] != fold)
}

/// Trains the model of one fold on every subject outside it. Each fold uses
/// its own seed, `train.seed + fold`.
pub fn train_fold(
    data: &[SubjectData],
    assignment: &[usize],
    fold: usize,
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&str),
) -> Result<TrainOutcome> {
    let (train_idx, _) = split(assignment, fold);
    let fold_cfg = TrainConfig {
        seed: cfg.train.seed.wrapping_add(fold as u64),
        ..cfg.train.clone()
    };
    Ok(train(&training_samples(data, &train_idx), &cfg.arch, &fold_cfg, |log| {
        let l = &log.loss;
        progress(&format!(
            "fold {fold} epoch {} loss {:.4} (spn {:.4} + {:.4}, head {:.4} + {:.4})",
            log.epoch, l.total, l.spn_cls, l.spn_reg, l.head_cls, l.head_reg
        ))
    })?)
}

pub fn detect_all(model: &Model, data: &[SubjectData], idx: &[usize], opts: &DetectOptions) -> Result<Vec<Vec<DetectedSegment>>> {
    idx.iter().map(|&i| Ok(model.detect(&data[i].spec, opts)?)).collect()
}

pub fn detect_options(cfg: &ExperimentConfig) -> DetectOptions {
    DetectOptions {
        score_floor: cfg.score_floor,
    }
}

/// Trains one model per fold, fits fusion thresholds on the fold's training
/// subjects and scores its held-out subjects.
pub fn cross_validate(data: &[SubjectData], cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<CvOutcome> {
    let assignment = assign_folds(data, cfg.folds)?;
    let opts = detect_options(cfg);
    let mut runs: Vec<Option<SubjectRun>> = vec![None; data.len()];
    let mut folds = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let (train_idx, test_idx) = split(&assignment, fold);
        let outcome = train_fold(data, &assignment, fold, cfg, &mut progress)?;
        let model = outcome.model;

        let train_dets = detect_all(&model, data, &train_idx, &opts)?;
        let fit = fit_fusion(data, &train_idx, &train_dets, cfg)?;
        progress(&format!(
            "fold {fold}: T1 {} T2 {} (training ICC {:.4})",
            fit.params.t1, fit.params.t2, fit.icc
        ));

        for &i in &test_idx {
            runs[i] = Some(score_subject(&model, &data[i], fold, &fit.params, &opts)?);
        }
        folds.push(FoldSummary {
            fold,
            test_ids: test_idx.iter().map(|&i| data[i].id.clone()).collect(),
            logs: outcome.logs,
            fusion: fit.params,
            grid_icc: fit.icc,
        });
    }
    Ok(CvOutcome {
        folds,
        subjects: runs.into_iter().map(|r| r.expect("every subject is held out once")).collect(),
    })
}

pub fn score_subject(model: &Model, s: &SubjectData, fold: usize, fusion: &FusionParams, opts: &DetectOptions) -> Result<SubjectRun> {
    let radar = model.detect(&s.spec, opts)?;
    let fused = fuse_session(&radar, &s.spo2, fusion)?;
    Ok(SubjectRun {
        id: s.id.clone(),
        fold,
        tst_h: s.tst_h,
        events: s.events.clone(),
        radar,
        fused,
        odi3: odi3(&s.spo2, s.tst_h)?,
    })
}

pub const METHODS: [&str; 3] = ["odi3", "radar", "fused"];

/// Report for one method over held-out subjects.
pub fn method_report(runs: &[SubjectRun], method: &str, form: IccForm, decision_threshold: f64) -> Result<AgreementReport> {
    let outcomes = runs
        .iter()
        .map(|r| {
            let (detections, estimated_ahi) = match method {
                "odi3" => (None, r.odi3),
                "radar" => (Some(r.radar.clone()), estimate_ahi(&r.radar, r.tst_h, decision_threshold)?),
                "fused" => (Some(r.fused.clone()), estimate_ahi(&r.fused, r.tst_h, decision_threshold)?),
                other => return Err(CliError::Usage(format!("unknown method {other:?}"))),
            };
            Ok(SubjectOutcome {
                id: r.id.clone(),
                tst_h: r.tst_h,
                ground_truth: r.events.clone(),
                detections,
                estimated_ahi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let threshold = (method != "odi3").then_some(decision_threshold);
    Ok(evaluate_cohort(method, &outcomes, form, threshold)?)
}

pub fn method_reports(runs: &[SubjectRun], methods: &[&str], form: IccForm, decision_threshold: f64) -> Result<Vec<AgreementReport>> {
    methods
        .iter()
        .map(|m| method_report(runs, m, form, decision_threshold))
        .collect()
}
