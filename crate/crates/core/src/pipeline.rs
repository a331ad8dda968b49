//! End-to-end orchestration: ingest, classify, detect, localize, and the
//! corpus runner that feeds the evaluation scorers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::correction::{correct_all, CorrectionContext, CorrectionSession, VersionTrigger};
use crate::detection::{self, AnalysisConfig, AnalysisReport, DetectionError};
use crate::evaluation::{
    score_categorization, score_detection, score_fix_rate, score_localization, true_positive_pairs,
    Averaging, Corpus, MetricsReport, Predictions, SeverityPredictions,
};
use crate::extraction::extract_data;
use crate::gateway::{Gateway, ModelRole};
use crate::ingestion::{self, IngestConfig, IngestError, VisualizationArtifact};
use crate::localization::{self, attach_annotations};
use crate::taxonomy::Catalog;
use crate::Warning;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub ingest: IngestConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// Classifies (when needed), detects and localizes. Chart-type and
/// localization failures degrade to warnings; detection failure is fatal.
pub fn analyze_artifact(
    artifact: &mut VisualizationArtifact,
    catalog: &Catalog,
    gateway: &Gateway,
    config: &AnalysisConfig,
) -> Result<AnalysisReport, DetectionError> {
    let mut extra = Vec::new();
    let mut timings = BTreeMap::new();
    if artifact.chart_type.is_none() {
        let start = Instant::now();
        match ingestion::detect_chart_type(artifact, gateway) {
            Ok((kind, warning)) => {
                artifact.chart_type = Some(kind);
                extra.extend(warning);
            }
            Err(e) => extra.push(Warning::new(
                "ingestion",
                format!("chart type unavailable: {e}"),
            )),
        }
        timings.insert("chart-type".to_string(), start.elapsed().as_millis() as u64);
    }

    let mut report = detection::analyze(artifact, catalog, gateway, config)?;
    report.chart_type = artifact.chart_type;

    let start = Instant::now();
    match localization::localize(artifact, &report.merged_findings, gateway) {
        Ok((annotations, warnings)) => {
            attach_annotations(&mut report.merged_findings, &annotations);
            for findings in report.per_model_findings.values_mut() {
                attach_annotations(findings, &annotations);
            }
            report.annotations = annotations;
            report.warnings.extend(warnings);
        }
        Err(e) => report.warnings.push(Warning::new(
            "localization",
            format!("localization skipped: {e}"),
        )),
    }
    timings.insert("localize".to_string(), start.elapsed().as_millis() as u64);

    report.warnings.splice(0..0, extra);
    report.timings.extend(timings);
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub artifact: VisualizationArtifact,
    pub report: AnalysisReport,
}

pub fn run_pipeline(
    bytes: &[u8],
    catalog: &Catalog,
    gateway: &Gateway,
    config: &PipelineConfig,
) -> Result<PipelineRun, PipelineError> {
    let mut artifact = ingestion::ingest(bytes, &config.ingest)?;
    let report = analyze_artifact(&mut artifact, catalog, gateway, &config.analysis)?;
    Ok(PipelineRun { artifact, report })
}

/// Per-artifact trace of a corpus run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactOutcome {
    pub artifact_id: String,
    pub report: AnalysisReport,
    /// `(resolved, detected)` when a correction ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fix: Option<(u64, u64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRun {
    pub metrics: MetricsReport,
    pub outcomes: Vec<ArtifactOutcome>,
    pub warnings: Vec<Warning>,
}

/// Runs the pipeline over every corpus image, in manifest order, and scores
/// the results. With a correction context each misleading prediction is
/// also corrected and verified to obtain the fix rate.
pub fn evaluate_corpus(
    corpus: &Corpus,
    base_dir: &Path,
    catalog: &Catalog,
    gateway: &Gateway,
    config: &PipelineConfig,
    correction: Option<&CorrectionContext<'_>>,
    averaging: Averaging,
) -> Result<CorpusRun, PipelineError> {
    let mut predictions = Predictions::new();
    let mut severities = SeverityPredictions::new();
    let mut annotations = BTreeMap::new();
    let mut fixes = Vec::new();
    let mut outcomes = Vec::new();
    let mut warnings = Vec::new();

    for label in &corpus.labels {
        let path = base_dir.join(&label.image);
        let bytes = fs::read(&path).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let run = run_pipeline(&bytes, catalog, gateway, config)?;
        let report = run.report;
        predictions.insert(label.artifact_id.clone(), report.merged_issue_refs());
        severities.insert(
            label.artifact_id.clone(),
            report
                .merged_findings
                .iter()
                .map(|f| (f.issue_ref.clone(), f.severity))
                .collect(),
        );
        annotations.insert(label.artifact_id.clone(), report.annotations.clone());

        let mut fix = None;
        if let (Some(ctx), false) = (correction, report.merged_findings.is_empty()) {
            match correct_one(&run.artifact, &report, ctx) {
                Ok(counts) => {
                    fixes.push(counts);
                    fix = Some(counts);
                }
                Err(message) => warnings.push(Warning::new(
                    "evaluation",
                    format!("{}: no fix-rate sample: {message}", label.artifact_id),
                )),
            }
        }
        outcomes.push(ArtifactOutcome {
            artifact_id: label.artifact_id.clone(),
            report,
            fix,
        });
    }

    let detection = score_detection(&predictions, corpus, catalog)
        .expect("predictions are keyed by corpus artifacts");
    let metrics = MetricsReport {
        averaging,
        artifacts: corpus.labels.len(),
        detection,
        categorization: score_categorization(&true_positive_pairs(&severities, corpus)),
        localization: score_localization(&annotations, corpus),
        fix_rate: score_fix_rate(&fixes),
    };
    Ok(CorpusRun {
        metrics,
        outcomes,
        warnings,
    })
}

/// Fix-rate sample from the code generator's chain.
fn correct_one(
    artifact: &VisualizationArtifact,
    report: &AnalysisReport,
    ctx: &CorrectionContext<'_>,
) -> Result<(u64, u64), String> {
    let extraction = extract_data(&artifact.payload(), ctx.gateway).map_err(|e| e.to_string())?;
    let mut session = CorrectionSession::new(&artifact.artifact_id);
    session.extracted_data = Some(extraction.table);
    correct_all(
        &mut session,
        artifact,
        &report.merged_findings,
        ctx,
        VersionTrigger::Initial,
    )
    .map_err(|e| e.to_string())?;
    let provider = ctx
        .gateway
        .route(ModelRole::CodeGenerator)
        .map_err(|e| e.to_string())?;
    let resolved = session
        .resolved_for(&provider)
        .ok_or_else(|| format!("{provider} produced no verified version"))?;
    Ok((resolved.len() as u64, report.merged_findings.len() as u64))
}
