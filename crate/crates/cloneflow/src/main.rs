//! Command-line front end: corpus generation, model training, detection,
//! and report evaluation as reproducible runs.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data errors (files
//! that are missing, malformed, or inconsistent with each other), 3 for
//! internal errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cloneflow::corpus;
use cloneflow::flow::{FlowConfig, FlowError, FlowModel};
use cloneflow::pipeline::{DetectionConfig, Evaluation, PipelineError, Pooling};
use cloneflow::report::{
    load_model, load_report, load_truth, save_json_pretty, save_model, save_report, save_truth,
    GenerateManifestFile, GroundTruthFile, ModelFile, ReportFile, RunManifest,
};
use cloneflow::seed;
use cloneflow::stats::{ConfusionCounts, Metrics};
use cloneflow::trace::{read_trace_file, write_trace_file, TraceDataset};

#[derive(Parser)]
#[command(name = "cloneflow", version, about = "Trace-driven semantic clone detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the builtin benchmark corpus as trace files plus ground truth.
    Generate {
        /// Output directory for trace files, ground truth, and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Trigger events per executable variant.
        #[arg(long, default_value_t = 300)]
        invocations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit one density model per trace file.
    Train {
        /// Directory containing .trace files.
        #[arg(long)]
        traces: PathBuf,
        /// Output directory for .model.json files.
        #[arg(long)]
        models: PathBuf,
        /// Coupling layers in each flow.
        #[arg(long, default_value_t = 4)]
        layers: usize,
        /// Hidden width of the coupling networks.
        #[arg(long, default_value_t = 16)]
        hidden_width: usize,
        /// Bound on the log-scale output of a coupling layer.
        #[arg(long, default_value_t = 3.0)]
        s_max: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.01)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run clone detection over trained models and their traces.
    Detect {
        /// Directory containing .model.json files.
        #[arg(long)]
        models: PathBuf,
        /// Directory containing the matching .trace files.
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_enum, default_value_t = EvaluationArg::Skip)]
        evaluation: EvaluationArg,
        /// False-positive rate of the dynamic stage.
        #[arg(long, default_value_t = 0.100)]
        d_fpr: f64,
        /// False-positive rate of the model stage.
        #[arg(long, default_value_t = 0.001)]
        m_fpr: f64,
        #[arg(long, value_enum, default_value_t = PoolingArg::Soft)]
        pooling: PoolingArg,
        /// Reference sample size per link direction.
        #[arg(long, default_value_t = 50)]
        particles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional ground-truth file; adds a metrics block to the report.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Report file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an existing report against a ground-truth file.
    Evaluate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvaluationArg {
    Skip,
    Exhaustive,
}

impl From<EvaluationArg> for Evaluation {
    fn from(arg: EvaluationArg) -> Evaluation {
        match arg {
            EvaluationArg::Skip => Evaluation::Skip,
            EvaluationArg::Exhaustive => Evaluation::Exhaustive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PoolingArg {
    Soft,
    Hard,
}

impl From<PoolingArg> for Pooling {
    fn from(arg: PoolingArg) -> Pooling {
        match arg {
            PoolingArg::Soft => Pooling::Soft,
            PoolingArg::Hard => Pooling::Hard,
        }
    }
}

enum AppError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Internal(m) => m,
        }
    }
}

impl From<cloneflow::report::ReportError> for AppError {
    fn from(e: cloneflow::report::ReportError) -> AppError {
        use cloneflow::report::ReportError;
        match e {
            ReportError::Write { .. } => AppError::Internal(e.to_string()),
            ReportError::Read { .. } | ReportError::Parse { .. } => AppError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for AppError {
    fn from(e: PipelineError) -> AppError {
        match e {
            PipelineError::InvalidConfig(_) => AppError::Usage(e.to_string()),
            PipelineError::MissingTrace(_)
            | PipelineError::InconsistentInputs(_)
            | PipelineError::Space(_) => AppError::Data(e.to_string()),
            PipelineError::Stats(_) | PipelineError::Encoding(_) | PipelineError::Flow(_) => {
                AppError::Internal(e.to_string())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; only real usage
            // mistakes exit nonzero.
            let is_usage = e.use_stderr();
            let _ = e.print();
            return if is_usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), AppError> {
    match command {
        Command::Generate { out, invocations, seed } => cmd_generate(&out, invocations, seed),
        Command::Train {
            traces,
            models,
            layers,
            hidden_width,
            s_max,
            epochs,
            batch_size,
            learning_rate,
            seed,
        } => {
            let config =
                FlowConfig { layers, hidden_width, s_max, epochs, batch_size, learning_rate };
            cmd_train(&traces, &models, &config, seed)
        }
        Command::Detect {
            models,
            traces,
            evaluation,
            d_fpr,
            m_fpr,
            pooling,
            particles,
            seed,
            truth,
            out,
        } => {
            let config = DetectionConfig {
                evaluation: evaluation.into(),
                d_fpr,
                m_fpr,
                pooling: pooling.into(),
                particles,
                seed,
                cond: Default::default(),
            };
            cmd_detect(&models, &traces, &config, truth.as_deref(), &out)
        }
        Command::Evaluate { report, truth } => cmd_evaluate(&report, &truth),
    }
}

fn cmd_generate(out: &Path, invocations: usize, seed: u64) -> Result<(), AppError> {
    if invocations == 0 {
        return Err(AppError::Usage("--invocations must be at least 1".to_string()));
    }
    let spec = corpus::builtin();
    let datasets = corpus::generate_traces(&spec, invocations, seed)
        .map_err(|e| AppError::Internal(e.to_string()))?;
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::Internal(format!("cannot create {}: {e}", out.display())))?;

    let mut trace_files = Vec::with_capacity(datasets.len());
    for dataset in &datasets {
        let name = format!("{}.trace", dataset.schema.id);
        write_trace_file(dataset, &out.join(&name))
            .map_err(|e| AppError::Internal(format!("{name}: {e}")))?;
        trace_files.push(name);
    }
    trace_files.sort();

    let manifest = RunManifest::new(
        "generate",
        serde_json::json!({ "invocations": invocations }),
        vec![],
        vec![out.display().to_string()],
        seed,
    );
    let truth_name = "ground_truth.json".to_string();
    let truth_file = GroundTruthFile {
        manifest: Some(manifest.clone()),
        classes: corpus::ground_truth(&spec).classes,
    };
    save_truth(&out.join(&truth_name), &truth_file)?;

    let index = GenerateManifestFile {
        manifest,
        trace_files: trace_files.clone(),
        ground_truth_file: truth_name,
    };
    save_json_pretty(&out.join("manifest.json"), &index)?;

    println!("wrote {} trace files and ground truth to {}", trace_files.len(), out.display());
    Ok(())
}

fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, AppError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| AppError::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AppError::Data(format!("no *{suffix} files in {}", dir.display())));
    }
    Ok(paths)
}

fn load_traces(dir: &Path) -> Result<Vec<TraceDataset>, AppError> {
    files_with_suffix(dir, ".trace")?
        .iter()
        .map(|path| {
            read_trace_file(path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn cmd_train(traces: &Path, models: &Path, config: &FlowConfig, seed: u64) -> Result<(), AppError> {
    config.validate().map_err(|e| AppError::Usage(e.to_string()))?;
    let datasets = load_traces(traces)?;
    std::fs::create_dir_all(models)
        .map_err(|e| AppError::Internal(format!("cannot create {}: {e}", models.display())))?;

    let manifest = RunManifest::new(
        "train",
        serde_json::to_value(config).expect("config serializes"),
        vec![traces.display().to_string()],
        vec![models.display().to_string()],
        seed,
    );
    for dataset in &datasets {
        let id = dataset.schema.id.clone();
        let model_seed = seed::derive(seed, &["train", &id]);
        let model = FlowModel::fit(dataset, config, model_seed).map_err(|e| match e {
            FlowError::TooFewRows(_)
            | FlowError::NoObservedElements(_)
            | FlowError::Encoding(_) => AppError::Data(format!("{id}: {e}")),
            other => AppError::Internal(format!("{id}: {other}")),
        })?;
        println!("{id}: final nll {:.4}", model.train_log.final_nll);
        let file = ModelFile { manifest: manifest.clone(), model };
        save_model(&models.join(format!("{id}.model.json")), &file)?;
    }
    println!("trained {} models into {}", datasets.len(), models.display());
    Ok(())
}

fn cmd_detect(
    models_dir: &Path,
    traces_dir: &Path,
    config: &DetectionConfig,
    truth_path: Option<&Path>,
    out: &Path,
) -> Result<(), AppError> {
    config.validate()?;
    let datasets = load_traces(traces_dir)?;
    let models: Vec<FlowModel> = files_with_suffix(models_dir, ".model.json")?
        .iter()
        .map(|path| load_model(path).map(|f| f.model))
        .collect::<Result<_, _>>()?;
    let truth_file = truth_path.map(load_truth).transpose()?;
    let truth = truth_file.as_ref().map(|f| f.truth());

    let report = cloneflow::pipeline::run_detection(&datasets, &models, config, truth.as_ref())?;

    let mut inputs = vec![models_dir.display().to_string(), traces_dir.display().to_string()];
    if let Some(path) = truth_path {
        inputs.push(path.display().to_string());
    }
    let manifest = RunManifest::new(
        "detect",
        serde_json::to_value(config).expect("config serializes"),
        inputs,
        vec![out.display().to_string()],
        config.seed,
    );

    println!(
        "{} candidates: {} accepted, {} clone classes",
        report.candidates.len(),
        report.survivors.candidates_accepted,
        report.clone_classes.len()
    );
    if let Some(summary) = &report.truth {
        println!(
            "precision {:.3}  recall {:.3}  f1 {:.3}  mcc {:.3}",
            summary.metrics.precision,
            summary.metrics.recall,
            summary.metrics.f1,
            summary.metrics.mcc
        );
    }
    save_report(out, &ReportFile { manifest, report })?;
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_evaluate(report_path: &Path, truth_path: &Path) -> Result<(), AppError> {
    let report = load_report(report_path)?;
    let truth = load_truth(truth_path)?.truth();

    let ids: BTreeSet<&str> = report
        .report
        .candidates
        .iter()
        .flat_map(|c| [c.pair.a.as_str(), c.pair.b.as_str()])
        .collect();
    let unlabeled: Vec<&str> =
        ids.iter().copied().filter(|id| truth.label_of(id).is_none()).collect();
    if !unlabeled.is_empty() {
        return Err(AppError::Data(format!(
            "ground truth is missing labels for: {}",
            unlabeled.join(", ")
        )));
    }

    let mut confusion = ConfusionCounts::default();
    for candidate in &report.report.candidates {
        confusion
            .record(candidate.decision, truth.same_class(&candidate.pair.a, &candidate.pair.b));
    }
    let metrics = Metrics::from_counts(confusion);

    println!("true positives: {}", confusion.true_positives);
    println!("false positives: {}", confusion.false_positives);
    println!("true negatives: {}", confusion.true_negatives);
    println!("false negatives: {}", confusion.false_negatives);
    println!("precision: {:.3}", metrics.precision);
    println!("recall: {:.3}", metrics.recall);
    println!("f1: {:.3}", metrics.f1);
    println!("mcc: {:.3}", metrics.mcc);
    Ok(())
}
