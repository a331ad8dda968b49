mod common;

use std::ffi::OsString;
use std::path::Path;

use chartlint::cli::run_with;
use chartlint::error::ErrorCode;
use chartlint_core::evaluation::{emit_report, MetricsReport};
use common::{fixtures, scripted_transport};

fn run(args: &[&str]) -> (i32, String) {
    let argv: Vec<OsString> = std::iter::once("chartlint")
        .chain(args.iter().copied())
        .map(OsString::from)
        .collect();
    let mut out = Vec::new();
    let code = run_with(argv, None, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["bogus"]).0, 2);
    assert_eq!(run(&[]).0, 2);
    assert_eq!(run(&["vlat", "items.jsonl", "--mode", "sideways"]).0, 2);
    let chart = path(&fixtures().join("charts/clean_bar.png"));
    assert_eq!(run(&["--record", "analyze", &chart]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn error_codes_map_to_exit_status() {
    let pack = path(&fixtures().join("replay"));
    let (code, _) = run(&["--fixtures", &pack, "analyze", "/definitely/missing.png"]);
    assert_eq!(code, ErrorCode::ValidationError.exit_code());

    let empty = tempfile::tempdir().unwrap();
    let chart = path(&fixtures().join("charts/clean_bar.png"));
    let (code, _) = run(&["--fixtures", &path(empty.path()), "analyze", &chart]);
    assert_eq!(code, ErrorCode::UpstreamModelError.exit_code());
}

#[test]
fn analyze_groups_by_severity() {
    let pack = path(&fixtures().join("replay"));
    let chart = path(&fixtures().join("charts/truncated_bar.png"));
    let (code, text) = run(&["--fixtures", &pack, "analyze", &chart]);
    assert_eq!(code, 0, "{text}");
    let major = text.find("MAJOR").unwrap();
    let minor = text.find("MINOR").unwrap();
    let truncated = text.find("Truncated Axis").unwrap();
    let title = text.find("Missing Title").unwrap();
    assert!(
        major < truncated && truncated < minor && minor < title,
        "{text}"
    );
    assert!(text.contains("unrecognized from claude: Exaggerated Bar Gaps"));
}

#[test]
fn evaluate_json_matches_the_report_emitter() {
    let pack = path(&fixtures().join("replay"));
    let manifest = path(&fixtures().join("corpus/manifest.jsonl"));
    let dir = tempfile::tempdir().unwrap();
    let json_out = dir.path().join("metrics.json");
    let (code, table) = run(&[
        "--fixtures",
        &pack,
        "evaluate",
        &manifest,
        "--with-correction",
        "--json-out",
        &path(&json_out),
    ]);
    assert_eq!(code, 0);
    let json = std::fs::read_to_string(&json_out).unwrap();
    let metrics: MetricsReport = serde_json::from_str(&json).unwrap();
    let (again_json, again_table) = emit_report(&metrics);
    assert_eq!(json, again_json);
    assert_eq!(table, again_table);
    assert_eq!(metrics.fix_rate.resolved, 9);
    assert_eq!(metrics.fix_rate.total, 10);
}

#[test]
fn vlat_modes_replay() {
    let pack = path(&fixtures().join("replay"));
    let items = path(&fixtures().join("vlat/items.jsonl"));
    let (code, guided) = run(&[
        "--fixtures",
        &pack,
        "--json",
        "vlat",
        &items,
        "--mode",
        "guided3step",
    ]);
    assert_eq!(code, 0);
    let guided: serde_json::Value = serde_json::from_str(&guided).unwrap();
    assert_eq!(guided["score"]["raw_score"], 6);
    let (code, direct) = run(&[
        "--fixtures",
        &pack,
        "--json",
        "vlat",
        &items,
        "--mode",
        "direct",
        "--scoring",
        "raw",
    ]);
    assert_eq!(code, 0);
    let direct: serde_json::Value = serde_json::from_str(&direct).unwrap();
    assert_eq!(direct["score"]["raw_score"], 3);
    assert_eq!(direct["score"]["scheme"], "raw");
}

#[test]
fn record_then_replay() {
    let pack = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let chart = path(&fixtures().join("charts/dual_axis_line.png"));
    let argv = |extra: &[&str]| -> Vec<OsString> {
        [
            "chartlint",
            "--fixtures",
            &path(pack.path()),
            "--executor",
            "stub",
        ]
        .iter()
        .chain(extra)
        .map(OsString::from)
        .collect()
    };
    let mut recorded = Vec::new();
    let code = run_with(
        argv(&["--record", "--json", "correct", &chart]),
        Some(scripted_transport()),
        &mut recorded,
    );
    assert_eq!(code, 0);
    assert!(std::fs::read_dir(pack.path()).unwrap().count() > 0);

    let mut replayed = Vec::new();
    let code = run_with(
        argv(&["--json", "correct", &chart, "--out", &path(out.path())]),
        None,
        &mut replayed,
    );
    assert_eq!(code, 0);
    let a: serde_json::Value = serde_json::from_slice(&recorded).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&replayed).unwrap();
    assert_eq!(
        a["report"]["merged_findings"],
        b["report"]["merged_findings"]
    );
    for name in [
        "claude-v1.png",
        "gpt-v1.png",
        "report.json",
        "versions.json",
    ] {
        assert!(out.path().join(name).is_file(), "{name}");
    }
}
