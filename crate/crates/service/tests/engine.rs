mod common;

use std::sync::Arc;

use chartlint::audit::AuditStage;
use chartlint::engine::ImageStatus;
use chartlint::error::ErrorCode;
use chartlint_core::correction::VersionTrigger;
use common::{chart, scripted_engine};

#[test]
fn out_of_order_calls_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let engine = scripted_engine(dir.path());
    let id = engine
        .create_session(&chart("truncated_bar.png"))
        .unwrap()
        .session_id;

    assert_eq!(engine.report(&id).unwrap_err().code, ErrorCode::Conflict);
    assert_eq!(engine.correct(&id).unwrap_err().code, ErrorCode::Conflict);
    assert_eq!(
        engine.chat(&id, "bigger title", None).unwrap_err().code,
        ErrorCode::Conflict
    );

    engine.analyze(&id).unwrap();
    assert_eq!(
        engine.chat(&id, "bigger title", None).unwrap_err().code,
        ErrorCode::Conflict
    );
    assert_eq!(
        engine
            .chat(&id, "bigger title", Some("nobody"))
            .unwrap_err()
            .code,
        ErrorCode::ValidationError
    );
    assert_eq!(
        engine.analyze("s-missing").unwrap_err().code,
        ErrorCode::NotFound
    );
    assert_eq!(
        engine.approve("f-missing").unwrap_err().code,
        ErrorCode::NotFound
    );
    assert_eq!(
        engine.create_session(b"not an image").unwrap_err().code,
        ErrorCode::ValidationError
    );
}

#[test]
fn one_audit_event_per_state_change() {
    let dir = tempfile::tempdir().unwrap();
    let engine = scripted_engine(dir.path());
    let id = engine
        .create_session(&chart("dual_axis_line.png"))
        .unwrap()
        .session_id;
    engine.analyze(&id).unwrap();
    engine.report(&id).unwrap();
    engine
        .upload_dataset(&id, "Year,Sales\n2020,150\n2021,170\n")
        .unwrap();
    engine.correct(&id).unwrap();
    engine.versions(&id).unwrap();
    engine.chat(&id, "Use one axis.", Some("claude")).unwrap();
    let flag = engine
        .flag(&id, "Seasonal Confound", "Both series follow temperature.")
        .unwrap();
    engine.session(&id).unwrap();
    engine.approve(&flag.flag_id).unwrap();

    let events = engine.audit_events().unwrap();
    let stages: Vec<AuditStage> = events.iter().map(|e| e.stage).collect();
    assert_eq!(
        stages,
        [
            AuditStage::Ingest,
            AuditStage::Detect,
            AuditStage::Extract,
            AuditStage::Correct,
            AuditStage::Refine,
            AuditStage::Flag,
            AuditStage::Approve
        ]
    );
    assert!(events.iter().all(|e| e.session_id == id));
    assert!(events.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
}

#[test]
fn dataset_reupload_creates_new_versions() {
    let dir = tempfile::tempdir().unwrap();
    let engine = scripted_engine(dir.path());
    let id = engine
        .create_session(&chart("truncated_bar.png"))
        .unwrap()
        .session_id;
    engine.analyze(&id).unwrap();
    let first = engine.correct(&id).unwrap();
    assert!(first
        .versions
        .iter()
        .all(|v| v.version.trigger == VersionTrigger::Initial));
    engine
        .upload_dataset(
            &id,
            "Region,Revenue\nNorth,52\nSouth,55\nEast,53\nWest,58\n",
        )
        .unwrap();
    let second = engine.correct(&id).unwrap();
    assert_eq!(second.versions.len(), 2);
    for v in &second.versions {
        assert_eq!(v.version.version_no, 2);
        assert_eq!(v.version.trigger, VersionTrigger::DatasetReupload);
    }
    let last_codegen = engine
        .gateway()
        .transcript()
        .into_iter()
        .rfind(|c| c.purpose == "codegen")
        .unwrap();
    assert!(
        last_codegen
            .prompt
            .contains("supplied by the user:\n\nRegion,Revenue"),
        "{}",
        last_codegen.prompt
    );
}

#[test]
fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (id, report, versions, catalog_version) = {
        let engine = scripted_engine(dir.path());
        let id = engine
            .create_session(&chart("many_segment_pie.png"))
            .unwrap()
            .session_id;
        let report = engine.analyze(&id).unwrap();
        engine.correct(&id).unwrap();
        let flag = engine
            .flag(&id, "Unlabeled Percentages", "No share labels.")
            .unwrap();
        let approved = engine.approve(&flag.flag_id).unwrap();
        let versions = engine.versions(&id).unwrap();
        (id, report, versions, approved.catalog_version)
    };

    let engine = scripted_engine(dir.path());
    assert_eq!(engine.catalog().version, catalog_version);
    assert!(engine
        .catalog()
        .check_name_free("Unlabeled Percentages")
        .is_err());
    let restored = engine.report(&id).unwrap();
    assert_eq!(restored.merged_findings.len(), report.merged_findings.len());
    assert_eq!(restored.annotations, report.annotations);
    assert_eq!(engine.versions(&id).unwrap(), versions);
    assert_eq!(engine.flags().unwrap().len(), 1);
    assert_eq!(engine.audit_events().unwrap().len(), 5);
}

#[test]
fn concurrent_sessions_stay_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Arc::new(scripted_engine(dir.path()));
    let charts = [
        "truncated_bar.png",
        "dual_axis_line.png",
        "many_segment_pie.png",
        "clean_bar.png",
    ];
    let handles: Vec<_> = charts
        .iter()
        .map(|name| {
            let engine = engine.clone();
            let bytes = chart(name);
            std::thread::spawn(move || {
                let id = engine.create_session(&bytes).unwrap().session_id;
                let report = engine.analyze(&id).unwrap();
                engine.correct(&id).unwrap();
                (id, report.merged_findings.len())
            })
        })
        .collect();
    let results: Vec<(String, usize)> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let counts: Vec<usize> = results.iter().map(|r| r.1).collect();
    assert_eq!(counts, [2, 4, 3, 1]);
    let events = engine.audit_events().unwrap();
    assert_eq!(events.len(), 12);
    for (id, _) in &results {
        assert_eq!(events.iter().filter(|e| &e.session_id == id).count(), 3);
        assert!(engine.session(id).unwrap().corrected);
    }
}

#[test]
fn missing_render_blob_is_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let engine = scripted_engine(dir.path());
    let id = engine
        .create_session(&chart("truncated_bar.png"))
        .unwrap()
        .session_id;
    engine.analyze(&id).unwrap();
    let corrected = engine.correct(&id).unwrap();
    assert!(corrected
        .versions
        .iter()
        .all(|v| v.image_status == ImageStatus::Available));
    let key = corrected.versions[0]
        .version
        .rendered_image
        .as_ref()
        .unwrap()
        .blob
        .key
        .clone();
    std::fs::remove_file(engine.store().root().join("blobs").join(&key)).unwrap();

    let versions = engine.versions(&id).unwrap();
    let statuses: Vec<ImageStatus> = versions
        .versions
        .values()
        .flatten()
        .map(|v| v.image_status)
        .collect();
    assert!(statuses.contains(&ImageStatus::Missing));
    assert_eq!(engine.blob(&key).unwrap_err().code, ErrorCode::NotFound);
}

#[test]
fn flag_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let engine = scripted_engine(dir.path());
    let id = engine
        .create_session(&chart("clean_bar.png"))
        .unwrap()
        .session_id;
    assert_eq!(
        engine.flag(&id, "Truncated Axis", "dup").unwrap_err().code,
        ErrorCode::Conflict
    );
    let before = engine.catalog().version;
    let a = engine
        .flag(&id, "Cropped Legend", "Legend cut off.")
        .unwrap();
    let b = engine.flag(&id, "Odd Font", "Hard to read.").unwrap();
    engine.approve(&a.flag_id).unwrap();
    assert_eq!(
        engine.approve(&a.flag_id).unwrap_err().code,
        ErrorCode::Conflict
    );
    engine.reject(&b.flag_id).unwrap();
    assert_eq!(
        engine.approve(&b.flag_id).unwrap_err().code,
        ErrorCode::Conflict
    );
    assert_eq!(engine.catalog().version, before + 1);
    assert_eq!(engine.session(&id).unwrap().flags.len(), 2);
}
