use std::path::PathBuf;
use std::sync::Arc;

use chartlint_core::blob::MemoryBlobStore;
use chartlint_core::correction::{
    correct_all, CorrectionContext, CorrectionSession, PipelineReanalyzer, RepairConfig,
    RuntimeProfile, StubExecutor, VersionTrigger,
};
use chartlint_core::evaluation::{emit_report, Averaging, Corpus};
use chartlint_core::extraction::extract_data;
use chartlint_core::gateway::{Gateway, GatewayConfig};
use chartlint_core::ingestion::ChartType;
use chartlint_core::pipeline::{evaluate_corpus, run_pipeline, PipelineConfig};
use chartlint_core::scripted::ScenarioFile;
use chartlint_core::taxonomy::{Catalog, LearnedIssue, Severity};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn scripted_gateway() -> Gateway {
    let (_, model) = ScenarioFile::load(&fixtures().join("scenarios.json")).unwrap();
    Gateway::recording(
        GatewayConfig::dual_default(),
        Arc::new(model).into_transport(),
    )
}

fn chart(name: &str) -> Vec<u8> {
    std::fs::read(fixtures().join("charts").join(name)).unwrap()
}

#[test]
fn truncated_bar_end_to_end() {
    let gw = scripted_gateway();
    let catalog = Catalog::load_default().unwrap();
    let run = run_pipeline(
        &chart("truncated_bar.png"),
        &catalog,
        &gw,
        &PipelineConfig::default(),
    )
    .unwrap();
    let report = &run.report;
    assert_eq!(report.chart_type, Some(ChartType::Bar));
    let refs: Vec<&str> = report
        .merged_findings
        .iter()
        .map(|f| f.issue_ref.as_str())
        .collect();
    assert_eq!(refs, ["truncated-axis", "missing-title"]);
    assert_eq!(report.merged_findings[0].severity, Severity::Major);
    let sources: Vec<&str> = report.merged_findings[0]
        .source_models
        .iter()
        .map(String::as_str)
        .collect();
    assert_eq!(sources, ["claude", "gpt"]);
    assert_eq!(
        report.unknown_issue_names["claude"],
        ["Exaggerated Bar Gaps"]
    );
    assert_eq!(report.annotations.len(), 2);
    assert!(report
        .merged_findings
        .iter()
        .all(|f| f.annotation_ref.as_deref() == Some(&format!("ann-{}", f.issue_ref)[..])));
}

#[test]
fn recorded_run_replays_identically() {
    let gw = scripted_gateway();
    let catalog = Catalog::load_default().unwrap();
    let bytes = chart("dual_axis_line.png");
    let live = run_pipeline(&bytes, &catalog, &gw, &PipelineConfig::default()).unwrap();
    let replay = Gateway::replay(GatewayConfig::dual_default(), gw.recorded_fixtures());
    let again = run_pipeline(&bytes, &catalog, &replay, &PipelineConfig::default()).unwrap();
    assert_eq!(live.report.merged_findings, again.report.merged_findings);
    assert_eq!(live.report.annotations, again.report.annotations);
    assert!(replay.transcript().iter().all(|c| c.error.is_none()));
}

#[test]
fn correction_repairs_and_verifies() {
    let gw = scripted_gateway();
    let catalog = Catalog::load_default().unwrap();
    let run = run_pipeline(
        &chart("dual_axis_line.png"),
        &catalog,
        &gw,
        &PipelineConfig::default(),
    )
    .unwrap();
    let store = MemoryBlobStore::new();
    let reanalyzer = PipelineReanalyzer {
        gateway: &gw,
        catalog: &catalog,
        ingest: Default::default(),
        analysis: Default::default(),
    };
    let ctx = CorrectionContext {
        gateway: &gw,
        executor: &StubExecutor,
        store: &store,
        reanalyzer: &reanalyzer,
        profile: RuntimeProfile::default_python(),
        repair: RepairConfig::default(),
        inline_threshold: 1 << 20,
    };
    let mut session = CorrectionSession::new(&run.artifact.artifact_id);
    session.extracted_data = Some(extract_data(&run.artifact.payload(), &gw).unwrap().table);
    correct_all(
        &mut session,
        &run.artifact,
        &run.report.merged_findings,
        &ctx,
        VersionTrigger::Initial,
    )
    .unwrap();
    let gpt = session.latest("gpt").unwrap();
    let claude = session.latest("claude").unwrap();
    assert_eq!(gpt.repair_attempts, 2);
    assert_eq!(claude.repair_attempts, 1);
    let resolved = gpt.resolved_issue_refs.as_ref().unwrap();
    assert!(!resolved.contains("misrepresentation-of-findings"));
    assert!(resolved.contains("dual-axis"));
    assert!(gpt.rendered_image.as_ref().unwrap().inline_base64.is_some());
}

#[test]
fn learned_issue_reaches_detection() {
    let gw = scripted_gateway();
    let catalog = Catalog::load_default().unwrap();
    let bytes = chart("many_segment_pie.png");
    let before = run_pipeline(&bytes, &catalog, &gw, &PipelineConfig::default()).unwrap();
    assert!(!before
        .report
        .merged_findings
        .iter()
        .any(|f| f.name == "Unlabeled Percentages"));

    let flag = LearnedIssue::pending(
        "Unlabeled Percentages",
        "Slices have no share labels.",
        "s1",
    );
    let taught = catalog.approve_learned(&flag).unwrap();
    assert_eq!(taught.version, catalog.version + 1);
    let after = run_pipeline(&bytes, &taught, &gw, &PipelineConfig::default()).unwrap();
    let learned = after
        .report
        .merged_findings
        .iter()
        .find(|f| f.issue_ref == "learned-unlabeled-percentages")
        .expect("learned issue detected");
    assert_eq!(learned.severity, Severity::Major);
    assert!(gw
        .transcript()
        .iter()
        .rfind(|c| c.purpose == "detect")
        .unwrap()
        .prompt
        .contains("Unlabeled Percentages"));
}

#[test]
fn corpus_evaluation_with_fix_rate() {
    let gw = scripted_gateway();
    let catalog = Catalog::load_default().unwrap();
    let manifest = fixtures().join("corpus/manifest.jsonl");
    let corpus = Corpus::load_manifest(&manifest).unwrap();
    let store = MemoryBlobStore::new();
    let reanalyzer = PipelineReanalyzer {
        gateway: &gw,
        catalog: &catalog,
        ingest: Default::default(),
        analysis: Default::default(),
    };
    let ctx = CorrectionContext {
        gateway: &gw,
        executor: &StubExecutor,
        store: &store,
        reanalyzer: &reanalyzer,
        profile: RuntimeProfile::default_python(),
        repair: RepairConfig::default(),
        inline_threshold: 1 << 20,
    };
    let run = evaluate_corpus(
        &corpus,
        manifest.parent().unwrap(),
        &catalog,
        &gw,
        &PipelineConfig::default(),
        Some(&ctx),
        Averaging::Micro,
    )
    .unwrap();
    let d = &run.metrics.detection.overall.counts;
    // Gold: 7 issues. Predicted: 2 + 4 + 3 + 1 = 10; 7 of them true.
    assert_eq!((d.tp, d.fp, d.fn_), (7, 3, 0));
    // Every merged finding on the three misleading charts was corrected;
    // only one survives re-analysis.
    assert_eq!(run.metrics.fix_rate.total, 10);
    assert_eq!(run.metrics.fix_rate.resolved, 9);
    let (json, table) = emit_report(&run.metrics);
    assert!(json.contains("\"overall\""));
    assert!(table.contains("Pie/Donut Charts"));
}
