//! Pipeline stages. Each stage reads and writes plain files so partial
//! pipelines can be resumed or inspected.
//!
//! Layout used by the stages:
//!
//! ```text
//! data/<id>/            session container (+ trace.json from simulate)
//! specs/<id>.spec       three-channel detector input
//! models/folds.json     subject-to-fold assignment
//! models/experiment.json
//! models/fold_<k>/model.bin, train_log.csv
//! detections/<id>.jsonl radar detections from the subject's held-out model
//! fusion/fold_<k>.json  grid-search result per fold (+ folds.json copy)
//! fused/<id>.jsonl      detections with fused scores
//! report/report.json, report.csv, scatter.csv, bland_altman.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rosa_core::dsp::{preprocess_session, PreprocessParams, ThreeChannelSpectrogram};
use rosa_core::fusion::{fuse_session, FusionParams, GridSearchResult};
use rosa_core::metrics::{estimate_ahi, evaluate_cohort, odi3, table_csv, AgreementReport, IccForm, SubjectOutcome};
use rosa_core::session::{load_session_with, read_detections, write_detections, DetectedSegment, MANIFEST_FILE};
use rosa_core::sim::{generate_cohort, CohortConfig};
use rosa_detector::io::{load_model, save_model};
use rosa_detector::train::write_train_log;
use rosa_detector::Model;

use crate::error::{CliError, Result};
use crate::experiment::{
    assign_folds, detect_all, detect_options, fit_fusion, split, train_fold, ExperimentConfig, SubjectData, METHODS,
};
use crate::plot;

pub const FOLDS_FILE: &str = "folds.json";
pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const MODEL_FILE: &str = "model.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const COHORT_FILE: &str = "cohort.json";
pub const SPEC_EXT: &str = "spec";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    fs::write(path, text).map_err(CliError::io(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn fold_dir(models: &Path, fold: usize) -> PathBuf {
    models.join(format!("fold_{fold}"))
}

/// Session directories under `data`, sorted by name.
pub fn list_sessions(data: &Path) -> Result<Vec<PathBuf>> {
    if !data.is_dir() {
        return Err(CliError::Data(format!("data directory not found: {}", data.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .map_err(CliError::io(data))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn session_id(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn spec_path(specs: &Path, id: &str) -> PathBuf {
    specs.join(format!("{id}.{SPEC_EXT}"))
}

fn jsonl_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.jsonl"))
}

/// Generates a cohort. Without a config file the default cohort is used.
pub fn simulate(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    subjects: Option<usize>,
    duration_s: Option<f64>,
    with_beat: bool,
) -> Result<Vec<PathBuf>> {
    let mut cfg: CohortConfig = match config {
        Some(p) => read_json(p)?,
        None => CohortConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = subjects {
        cfg.n_subjects = n;
    }
    if let Some(d) = duration_s {
        cfg.duration_s = d;
    }
    cfg.validate()?;
    create_dir(out)?;
    write_json(&out.join(COHORT_FILE), &cfg)?;
    Ok(generate_cohort(&cfg, out, with_beat)?)
}

/// Turns every session's beat signal into a `.spec` file.
pub fn preprocess(data: &Path, params: Option<&Path>, out: &Path, mut progress: impl FnMut(&str)) -> Result<usize> {
    let params: PreprocessParams = match params {
        Some(p) => read_json(p)?,
        None => PreprocessParams::default(),
    };
    let sessions = list_sessions(data)?;
    create_dir(out)?;
    for dir in &sessions {
        let session = load_session_with(dir, true)?;
        let spec = preprocess_session(&session, &params)?;
        spec.save(&spec_path(out, &session.id))?;
        progress(&format!("preprocessed {}", session.id));
    }
    Ok(sessions.len())
}

/// Sessions (without beat data) joined with their spectrograms.
pub fn load_subjects(data: &Path, specs: &Path) -> Result<Vec<SubjectData>> {
    list_sessions(data)?
        .iter()
        .map(|dir| {
            let s = load_session_with(dir, false)?;
            let path = spec_path(specs, &s.id);
            if !path.is_file() {
                return Err(CliError::Data(format!("spectrogram not found: {}", path.display())));
            }
            Ok(SubjectData {
                spec: ThreeChannelSpectrogram::load(&path)?,
                id: s.id,
                tst_h: s.tst_h,
                spo2: s.spo2,
                events: s.events,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub id: String,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldsFile {
    pub folds: usize,
    pub subjects: Vec<FoldEntry>,
}

impl FoldsFile {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.subjects.iter().find(|e| e.id == id).map(|e| e.fold)
    }

    /// Assignment aligned with `data`; every subject must be listed.
    pub fn assignment(&self, data: &[SubjectData]) -> Result<Vec<usize>> {
        data.iter()
            .map(|d| {
                self.fold_of(&d.id)
                    .ok_or_else(|| CliError::Data(format!("subject {} is not listed in {FOLDS_FILE}", d.id)))
            })
            .collect()
    }
}

pub fn load_experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn require_file(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Data(format!("{what} not found: {}", path.display())))
    }
}

pub fn load_fold_model(models: &Path, fold: usize) -> Result<Model> {
    let path = require_file(fold_dir(models, fold).join(MODEL_FILE), "model")?;
    Ok(load_model(&path)?)
}

pub fn load_folds(models: &Path) -> Result<FoldsFile> {
    read_json(&require_file(models.join(FOLDS_FILE), "model")?)
}

/// Trains one detector per fold and writes the fold assignment, the
/// effective configuration, the models and their training logs.
pub fn train(
    data: &Path,
    specs: &Path,
    out: &Path,
    cfg: &ExperimentConfig,
    only_fold: Option<usize>,
    mut progress: impl FnMut(&str),
) -> Result<FoldsFile> {
    let subjects = load_subjects(data, specs)?;
    let assignment = assign_folds(&subjects, cfg.folds)?;
    let folds = FoldsFile {
        folds: cfg.folds,
        subjects: subjects
            .iter()
            .zip(&assignment)
            .map(|(s, &fold)| FoldEntry { id: s.id.clone(), fold })
            .collect(),
    };
    create_dir(out)?;
    write_json(&out.join(FOLDS_FILE), &folds)?;
    write_json(&out.join(EXPERIMENT_FILE), cfg)?;
    for fold in 0..cfg.folds {
        if only_fold.is_some_and(|f| f != fold) {
            continue;
        }
        let outcome = train_fold(&subjects, &assignment, fold, cfg, &mut progress)?;
        let dir = fold_dir(out, fold);
        save_model(&outcome.model, &dir.join(MODEL_FILE))?;
        write_train_log(&dir.join(TRAIN_LOG_FILE), &outcome.logs)?;
    }
    Ok(folds)
}

/// Runs each subject's held-out fold model, or `model` for every subject.
pub fn detect(specs: &Path, models: &Path, model: Option<&Path>, out: &Path, score_floor: Option<f64>) -> Result<usize> {
    let single = match model {
        Some(p) => Some(load_model(&require_file(p.to_path_buf(), "model")?)?),
        None => None,
    };
    let (folds, cfg) = if single.is_some() {
        (None, ExperimentConfig::default())
    } else {
        let folds = load_folds(models)?;
        let cfg_path = models.join(EXPERIMENT_FILE);
        let cfg = if cfg_path.is_file() { read_json(&cfg_path)? } else { ExperimentConfig::default() };
        (Some(folds), cfg)
    };
    let opts = rosa_detector::DetectOptions {
        score_floor: score_floor.unwrap_or(cfg.score_floor),
    };
    if !specs.is_dir() {
        return Err(CliError::Data(format!("spectrogram directory not found: {}", specs.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(specs)
        .map_err(CliError::io(specs))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == SPEC_EXT))
        .collect();
    paths.sort();
    create_dir(out)?;
    let mut cache: BTreeMap<usize, Model> = BTreeMap::new();
    for path in &paths {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let spec = ThreeChannelSpectrogram::load(path)?;
        let dets = match (&single, &folds) {
            (Some(m), _) => m.detect(&spec, &opts)?,
            (None, Some(f)) => {
                let fold = f
                    .fold_of(&id)
                    .ok_or_else(|| CliError::Data(format!("subject {id} is not listed in {FOLDS_FILE}")))?;
                if !cache.contains_key(&fold) {
                    cache.insert(fold, load_fold_model(models, fold)?);
                }
                cache[&fold].detect(&spec, &opts)?
            }
            (None, None) => unreachable!("either a model or a fold file is loaded"),
        };
        write_detections(&jsonl_path(out, &id), &dets)?;
    }
    Ok(paths.len())
}

/// Fits (T1, T2) for each fold on the fold's training subjects, using the
/// fold's own model.
pub fn gridsearch(data: &Path, specs: &Path, models: &Path, out: &Path, cfg: Option<&ExperimentConfig>) -> Result<Vec<GridSearchResult>> {
    let folds = load_folds(models)?;
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => {
            let p = models.join(EXPERIMENT_FILE);
            if p.is_file() { read_json(&p)? } else { ExperimentConfig::default() }
        }
    };
    let subjects = load_subjects(data, specs)?;
    let assignment = folds.assignment(&subjects)?;
    let opts = detect_options(&cfg);
    create_dir(out)?;
    write_json(&out.join(FOLDS_FILE), &folds)?;
    let mut results = Vec::with_capacity(folds.folds);
    for fold in 0..folds.folds {
        let model = load_fold_model(models, fold)?;
        let (train_idx, _) = split(&assignment, fold);
        let dets = detect_all(&model, &subjects, &train_idx, &opts)?;
        let fit = fit_fusion(&subjects, &train_idx, &dets, &cfg)?;
        write_json(&out.join(format!("fold_{fold}.json")), &fit)?;
        results.push(fit);
    }
    Ok(results)
}

/// Where fusion parameters come from.
#[derive(Debug, Clone, Default)]
pub struct FusionSource {
    /// A FusionParams JSON file, or a grid-search output directory with one
    /// result per fold.
    pub path: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
}

impl FusionSource {
    fn apply(&self, mut p: FusionParams) -> FusionParams {
        p.alpha = self.alpha.unwrap_or(p.alpha);
        p.beta = self.beta.unwrap_or(p.beta);
        p.t1 = self.t1.unwrap_or(p.t1);
        p.t2 = self.t2.unwrap_or(p.t2);
        p
    }
}

/// Rescales every detection file in `detections` with the subject's SpO2
/// trace.
pub fn fuse(data: &Path, detections: &Path, out: &Path, source: &FusionSource) -> Result<usize> {
    enum Params {
        Single(FusionParams),
        PerFold(FoldsFile, Vec<FusionParams>),
    }
    let params = match &source.path {
        Some(p) if p.is_dir() => {
            let folds: FoldsFile = read_json(&require_file(p.join(FOLDS_FILE), "fold assignment")?)?;
            let fits = (0..folds.folds)
                .map(|k| {
                    let fit: GridSearchResult = read_json(&require_file(p.join(format!("fold_{k}.json")), "grid-search result")?)?;
                    Ok(source.apply(fit.params))
                })
                .collect::<Result<Vec<_>>>()?;
            Params::PerFold(folds, fits)
        }
        Some(p) => Params::Single(source.apply(read_json(p)?)),
        None => Params::Single(source.apply(FusionParams::default())),
    };
    let sessions = list_sessions(data)?;
    create_dir(out)?;
    for dir in &sessions {
        let s = load_session_with(dir, false)?;
        let p = match &params {
            Params::Single(p) => *p,
            Params::PerFold(folds, fits) => {
                let fold = folds
                    .fold_of(&s.id)
                    .ok_or_else(|| CliError::Data(format!("subject {} is not listed in {FOLDS_FILE}", s.id)))?;
                fits[fold]
            }
        };
        let dets = read_detections(&require_file(jsonl_path(detections, &s.id), "detections")?)?;
        let fused = fuse_session(&dets, &s.spo2, &p)?;
        write_detections(&jsonl_path(out, &s.id), &fused)?;
    }
    Ok(sessions.len())
}

pub struct EvaluateInputs<'a> {
    pub data: &'a Path,
    pub radar: Option<&'a Path>,
    pub fused: Option<&'a Path>,
    pub methods: &'a [String],
    pub icc_form: IccForm,
    pub decision_threshold: f64,
}

fn method_outcomes(inputs: &EvaluateInputs, method: &str) -> Result<Vec<SubjectOutcome>> {
    let dir = match method {
        "odi3" => None,
        "radar" => Some(inputs.radar.ok_or_else(|| CliError::Usage("method radar needs --radar".into()))?),
        "fused" => Some(inputs.fused.ok_or_else(|| CliError::Usage("method fused needs --fused".into()))?),
        other => {
            return Err(CliError::Usage(format!(
                "unknown method {other:?}; expected a subset of {}",
                METHODS.join(",")
            )))
        }
    };
    list_sessions(inputs.data)?
        .iter()
        .map(|d| {
            let s = load_session_with(d, false)?;
            let (detections, estimated_ahi) = match dir {
                None => (None, odi3(&s.spo2, s.tst_h)?),
                Some(dir) => {
                    let dets: Vec<DetectedSegment> = read_detections(&require_file(jsonl_path(dir, &s.id), "detections")?)?;
                    let ahi = estimate_ahi(&dets, s.tst_h, inputs.decision_threshold)?;
                    (Some(dets), ahi)
                }
            };
            Ok(SubjectOutcome {
                id: s.id,
                tst_h: s.tst_h,
                ground_truth: s.events,
                detections,
                estimated_ahi,
            })
        })
        .collect()
}

/// One report per method, written as `report.json`, the results table
/// `report.csv`, and per-subject `scatter.csv` and `bland_altman.csv`.
pub fn evaluate(inputs: &EvaluateInputs, out: &Path) -> Result<Vec<AgreementReport>> {
    if inputs.methods.is_empty() {
        return Err(CliError::Usage("no methods given".into()));
    }
    let reports = inputs
        .methods
        .iter()
        .map(|m| {
            let outcomes = method_outcomes(inputs, m)?;
            let threshold = (m != "odi3").then_some(inputs.decision_threshold);
            Ok(evaluate_cohort(m, &outcomes, inputs.icc_form, threshold)?)
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    write_json(&out.join("report.json"), &reports)?;
    write_text(&out.join("report.csv"), &table_csv(&reports))?;
    let mut scatter = String::from("method,id,true_ahi,estimated_ahi\n");
    let mut ba = String::from("method,id,mean,difference\n");
    for r in &reports {
        for s in &r.subjects {
            scatter.push_str(&format!("{},{},{},{}\n", r.method, s.id, s.true_ahi, s.estimated_ahi));
            ba.push_str(&format!(
                "{},{},{},{}\n",
                r.method,
                s.id,
                (s.true_ahi + s.estimated_ahi) / 2.0,
                s.estimated_ahi - s.true_ahi
            ));
        }
    }
    write_text(&out.join("scatter.csv"), &scatter)?;
    write_text(&out.join("bland_altman.csv"), &ba)?;
    Ok(reports)
}

/// `(true, estimate)` pairs of one method from a `scatter.csv`.
pub fn read_scatter_csv(path: &Path, method: Option<&str>) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        head.iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column {name}", path.display())))
    };
    let (t, e) = (col("true_ahi")?, col("estimated_ahi")?);
    let m = head.iter().position(|h| *h == "method");
    let mut pairs = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if let (Some(want), Some(m)) = (method, m) {
            if cells.get(m) != Some(&want) {
                continue;
            }
        }
        let parse = |i: usize| -> Result<f64> {
            cells
                .get(i)
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| CliError::Data(format!("{}: bad value on line {}", path.display(), n + 2)))
        };
        pairs.push((parse(t)?, parse(e)?));
    }
    Ok(pairs)
}

pub struct PlotInputs<'a> {
    pub kind: &'a str,
    pub spec: Option<&'a Path>,
    pub session: Option<&'a Path>,
    pub detections: Option<&'a Path>,
    pub input: Option<&'a Path>,
    pub method: Option<&'a str>,
}

fn needed<'a>(v: Option<&'a Path>, flag: &str, kind: &str) -> Result<&'a Path> {
    v.ok_or_else(|| CliError::Usage(format!("plot {kind} needs --{flag}")))
}

pub fn render_plot(p: &PlotInputs) -> Result<String> {
    plot::check_kind(p.kind)?;
    match p.kind {
        "spectrogram" => {
            let path = needed(p.spec, "spec", p.kind)?;
            let spec = ThreeChannelSpectrogram::load(path)?;
            let events = match p.session {
                Some(d) => load_session_with(d, false)?.events,
                None => Vec::new(),
            };
            Ok(plot::spectrogram_svg(&spec, &events, &session_id(path)))
        }
        "timeline" => {
            let dir = needed(p.session, "session", p.kind)?;
            let s = load_session_with(dir, false)?;
            let dets = match p.detections {
                Some(path) => read_detections(path)?,
                None => Vec::new(),
            };
            Ok(plot::timeline_svg(s.duration_s, &s.events, &dets, &s.id))
        }
        kind => {
            let pairs = read_scatter_csv(needed(p.input, "input", kind)?, p.method)?;
            let title = p.method.unwrap_or("AHI");
            if kind == "scatter" {
                Ok(plot::scatter_svg(&pairs, title))
            } else {
                plot::bland_altman_svg(&pairs, title)
            }
        }
    }
}
