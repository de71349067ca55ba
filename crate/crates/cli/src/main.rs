use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use rosa_cli::commands::{self, EvaluateInputs, FusionSource, PlotInputs};
use rosa_cli::{CliError, Result};
use rosa_core::metrics::IccForm;

/// Radar and oximetry sleep apnea pipeline: simulate, preprocess, train,
/// detect, fuse and evaluate.
///
/// Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "rosa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort of session directories.
    Simulate {
        /// Cohort configuration JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of subjects.
        #[arg(long)]
        subjects: Option<usize>,
        /// Override the night length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Skip the radar beat signal (oximetry and annotations only).
        #[arg(long)]
        no_beat: bool,
    },
    /// Convert each session's beat signal to a three-channel spectrogram.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        /// Preprocessing parameters JSON.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one detector per subject-wise fold.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration JSON (architecture, training, folds).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train a single fold only.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Detect events with each subject's held-out fold model.
    Detect {
        #[arg(long)]
        specs: PathBuf,
        /// Training output directory.
        #[arg(long, default_value = "models")]
        models: PathBuf,
        /// Use this model for every subject instead of the fold models.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        score_floor: Option<f64>,
    },
    /// Search fusion thresholds per fold on the fold's training subjects.
    Gridsearch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rescore radar detections with SpO2 desaturation features.
    Fuse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fusion parameters JSON, or a gridsearch output directory.
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        t1: Option<f64>,
        #[arg(long)]
        t2: Option<f64>,
    },
    /// Compare methods against the annotations.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of odi3,radar,fused.
        #[arg(long, value_delimiter = ',', default_value = "odi3,radar,fused")]
        methods: Vec<String>,
        #[arg(long)]
        radar: Option<PathBuf>,
        #[arg(long)]
        fused: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// ICC form: ICC(1,1), ICC(2,1) or ICC(3,1).
        #[arg(long, default_value = "ICC(2,1)")]
        icc_form: String,
        /// Score a detection needs to count towards the AHI.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Render an SVG figure.
    Plot {
        /// spectrogram, timeline, scatter or bland_altman.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        session: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        /// scatter.csv from evaluate.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
    },
}

fn parse_icc_form(s: &str) -> Result<IccForm> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown ICC form {s:?}")))
}

fn progress(start: Instant) -> impl FnMut(&str) {
    move |msg| eprintln!("[{:>7.1}s] {msg}", start.elapsed().as_secs_f64())
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            subjects,
            duration,
            no_beat,
        } => {
            let dirs = commands::simulate(config.as_deref(), &out, seed, subjects, duration, !no_beat)?;
            eprintln!("wrote {} sessions to {}", dirs.len(), out.display());
        }
        Command::Preprocess { data, params, out } => {
            let n = commands::preprocess(&data, params.as_deref(), &out, progress(start))?;
            eprintln!("wrote {n} spectrograms to {}", out.display());
        }
        Command::Train {
            data,
            specs,
            out,
            config,
            seed,
            folds,
            epochs,
            fold,
        } => {
            let mut cfg = commands::load_experiment(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(k) = folds {
                cfg.folds = k;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if fold.is_some_and(|f| f >= cfg.folds) {
                return Err(CliError::Usage(format!("fold {} out of range for {} folds", fold.unwrap_or(0), cfg.folds)));
            }
            commands::train(&data, &specs, &out, &cfg, fold, progress(start))?;
        }
        Command::Detect {
            specs,
            models,
            model,
            out,
            score_floor,
        } => {
            let n = commands::detect(&specs, &models, model.as_deref(), &out, score_floor)?;
            eprintln!("wrote detections for {n} subjects to {}", out.display());
        }
        Command::Gridsearch {
            data,
            specs,
            models,
            out,
            config,
        } => {
            let cfg = config.as_deref().map(|p| commands::load_experiment(Some(p))).transpose()?;
            for (k, fit) in commands::gridsearch(&data, &specs, &models, &out, cfg.as_ref())?.iter().enumerate() {
                eprintln!("fold {k}: T1 {} T2 {} (ICC {:.4})", fit.params.t1, fit.params.t2, fit.icc);
            }
        }
        Command::Fuse {
            data,
            detections,
            out,
            fusion,
            alpha,
            beta,
            t1,
            t2,
        } => {
            let source = FusionSource {
                path: fusion,
                alpha,
                beta,
                t1,
                t2,
            };
            let n = commands::fuse(&data, &detections, &out, &source)?;
            eprintln!("fused detections for {n} subjects into {}", out.display());
        }
        Command::Evaluate {
            data,
            methods,
            radar,
            fused,
            out,
            icc_form,
            threshold,
        } => {
            let inputs = EvaluateInputs {
                data: &data,
                radar: radar.as_deref(),
                fused: fused.as_deref(),
                methods: &methods,
                icc_form: parse_icc_form(&icc_form)?,
                decision_threshold: threshold,
            };
            for r in commands::evaluate(&inputs, &out)? {
                let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "/".into());
                println!("{:<6} ICC {} AP50 {}", r.method, fmt(r.icc), fmt(r.ap50));
            }
        }
        Command::Plot {
            kind,
            out,
            spec,
            session,
            detections,
            input,
            method,
        } => {
            let svg = commands::render_plot(&PlotInputs {
                kind: &kind,
                spec: spec.as_deref(),
                session: session.as_deref(),
                detections: detections.as_deref(),
                input: input.as_deref(),
                method: method.as_deref(),
            })?;
            commands::write_text(Path::new(&out), &svg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
