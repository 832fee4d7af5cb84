//! Run manifests and the on-disk formats for models, reports, and ground
//! truth.
//!
//! Every artifact written by the command-line front end carries a
//! [`RunManifest`] recording the subcommand, the fully resolved
//! configuration, the input and output paths exactly as given, the seed,
//! and the tool version, so any file can be traced back to the invocation
//! that produced it. Serialization is deterministic: maps are ordered and
//! float formatting is canonical, so equal runs produce byte-equal files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GroundTruth;
use crate::flow::FlowModel;
use crate::pipeline::CloneReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Provenance block embedded in every generated artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Fully resolved configuration of the run, as structured data.
    pub config: serde_json::Value,
    /// Input paths exactly as passed on the command line.
    pub inputs: Vec<String>,
    /// Output paths exactly as passed on the command line.
    pub outputs: Vec<String>,
    pub seed: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        config: serde_json::Value,
        inputs: Vec<String>,
        outputs: Vec<String>,
        seed: u64,
    ) -> RunManifest {
        RunManifest {
            subcommand: subcommand.to_string(),
            config,
            inputs,
            outputs,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// A trained model plus the manifest of the run that trained it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub manifest: RunManifest,
    pub model: FlowModel,
}

/// A detection report plus its manifest. The report's own fields sit at
/// the top level of the file next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub manifest: RunManifest,
    #[serde(flatten)]
    pub report: CloneReport,
}

/// Ground-truth classes, optionally carrying the manifest of the run that
/// wrote them. Files from other tools that contain only `classes` parse
/// fine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
    pub classes: BTreeMap<String, Vec<String>>,
}

impl GroundTruthFile {
    pub fn truth(&self) -> GroundTruth {
        GroundTruth { classes: self.classes.clone() }
    }
}

impl From<GroundTruth> for GroundTruthFile {
    fn from(truth: GroundTruth) -> GroundTruthFile {
        GroundTruthFile { manifest: None, classes: truth.classes }
    }
}

/// Index of the files a `generate` run wrote, stored alongside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateManifestFile {
    pub manifest: RunManifest,
    /// Trace file names in the output directory, sorted.
    pub trace_files: Vec<String>,
    pub ground_truth_file: String,
}

fn read_error(path: &Path, source: std::io::Error) -> ReportError {
    ReportError::Read { path: path.display().to_string(), source }
}

fn write_error(path: &Path, source: std::io::Error) -> ReportError {
    ReportError::Write { path: path.display().to_string(), source }
}

fn parse_error(path: &Path, source: serde_json::Error) -> ReportError {
    ReportError::Parse { path: path.display().to_string(), source }
}

/// Reads and parses one JSON artifact.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| read_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e))
}

/// Writes one JSON artifact, pretty-printed with a trailing newline.
pub fn save_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| write_error(path, e))
}

/// Writes one JSON artifact in compact form with a trailing newline.
pub fn save_json_compact<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut text = serde_json::to_string(value).expect("artifact serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| write_error(path, e))
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<(), ReportError> {
    save_json_compact(path, file)
}

pub fn load_model(path: &Path) -> Result<ModelFile, ReportError> {
    load_json(path)
}

pub fn save_report(path: &Path, file: &ReportFile) -> Result<(), ReportError> {
    save_json_pretty(path, file)
}

pub fn load_report(path: &Path) -> Result<ReportFile, ReportError> {
    load_json(path)
}

pub fn save_truth(path: &Path, file: &GroundTruthFile) -> Result<(), ReportError> {
    save_json_pretty(path, file)
}

pub fn load_truth(path: &Path) -> Result<GroundTruthFile, ReportError> {
    load_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::flow::{FlowConfig, FlowModel};
    use crate::pipeline::{run_detection, DetectionConfig};

    fn manifest() -> RunManifest {
        RunManifest::new(
            "detect",
            serde_json::json!({"particles": 50}),
            vec!["traces".into()],
            vec!["report.json".into()],
            7,
        )
    }

    #[test]
    fn manifest_records_tool_version() {
        assert_eq!(manifest().version, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn model_file_round_trips() {
        let spec = corpus::builtin();
        let datasets = corpus::generate_traces(&spec, 60, 1).unwrap();
        let dataset = datasets.iter().find(|d| d.schema.id == "ident.ident_plain").unwrap();
        let config = FlowConfig { epochs: 10, ..FlowConfig::default() };
        let model = FlowModel::fit(dataset, &config, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model.json");
        let file = ModelFile { manifest: manifest(), model };
        save_model(&path, &file).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(file, back);
    }

    #[test]
    fn report_file_round_trips_and_flattens() {
        let spec = corpus::builtin();
        let datasets = corpus::generate_traces(&spec, 80, 2).unwrap();
        let pair: Vec<_> =
            datasets.iter().filter(|d| d.schema.id.starts_with("half.")).cloned().collect();
        let config = FlowConfig { epochs: 10, ..FlowConfig::default() };
        let models: Vec<FlowModel> =
            pair.iter().map(|d| FlowModel::fit(d, &config, 4).unwrap()).collect();
        let detection = DetectionConfig { seed: 5, ..DetectionConfig::default() };
        let report = run_detection(&pair, &models, &detection, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let file = ReportFile { manifest: manifest(), report };
        save_report(&path, &file).unwrap();
        let back = load_report(&path).unwrap();
        assert_eq!(file, back);

        // The report's fields live at the top level, beside the manifest.
        let raw: serde_json::Value = load_json(&path).unwrap();
        assert!(raw.get("manifest").is_some());
        assert!(raw.get("candidates").is_some());
        assert!(raw.get("timing").is_some());
    }

    #[test]
    fn truth_file_round_trips_with_and_without_manifest() {
        let truth = corpus::ground_truth(&corpus::builtin());
        let dir = tempfile::tempdir().unwrap();

        let bare = dir.path().join("truth.json");
        save_truth(&bare, &GroundTruthFile::from(truth.clone())).unwrap();
        let back = load_truth(&bare).unwrap();
        assert_eq!(back.truth(), truth);
        assert!(back.manifest.is_none());

        let stamped = dir.path().join("truth_stamped.json");
        let file = GroundTruthFile { manifest: Some(manifest()), classes: truth.classes.clone() };
        save_truth(&stamped, &file).unwrap();
        let back = load_truth(&stamped).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn missing_file_reports_its_path() {
        let err = load_truth(Path::new("/nonexistent/truth.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/truth.json"), "{msg}");
    }

    #[test]
    fn equal_values_serialize_byte_equal() {
        let truth = corpus::ground_truth(&corpus::builtin());
        let a = serde_json::to_string_pretty(&GroundTruthFile::from(truth.clone())).unwrap();
        let b = serde_json::to_string_pretty(&GroundTruthFile::from(truth)).unwrap();
        assert_eq!(a, b);
    }
}
