//! Regenerates `fixtures/replay/` from the scripted scenarios.
//!
//! Every command the tests replay is run here once in record mode against
//! the deterministic scripted provider:
//!
//!     cargo run -p chartlint --example author_fixtures

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chartlint::engine::{Engine, EngineConfig};
use chartlint_core::correction::StubExecutor;
use chartlint_core::gateway::{FixtureSet, Gateway, GatewayConfig, Transport};
use chartlint_core::scripted::ScenarioFile;

fn run(transport: &Arc<dyn Transport>, pack: &Path, args: &[&str]) {
    let mut argv: Vec<OsString> = vec![
        "chartlint".into(),
        "--record".into(),
        "--fixtures".into(),
        pack.into(),
        "--executor".into(),
        "stub".into(),
    ];
    argv.extend(args.iter().map(OsString::from));
    let mut out = Vec::new();
    let code = chartlint::cli::run_with(argv, Some(transport.clone()), &mut out);
    assert_eq!(code, 0, "{args:?} failed");
    println!("recorded: {}", args.join(" "));
}

/// The HTTP lifecycle the service tests walk through.
fn record_lifecycle(transport: &Arc<dyn Transport>, fixtures: &Path, pack: &Path) {
    let gateway = Arc::new(Gateway::recording(
        GatewayConfig::dual_default(),
        transport.clone(),
    ));
    let data = tempfile::tempdir().unwrap();
    let engine = Engine::open(
        data.path(),
        gateway.clone(),
        Arc::new(StubExecutor),
        EngineConfig::default(),
    )
    .unwrap();
    let bytes = std::fs::read(fixtures.join("charts/many_segment_pie.png")).unwrap();
    let id = engine.create_session(&bytes).unwrap().session_id;
    engine.analyze(&id).unwrap();
    engine.correct(&id).unwrap();
    engine
        .chat(&id, "Use a horizontal bar chart sorted by share.", None)
        .unwrap();
    let flag = engine
        .flag(
            &id,
            "Unlabeled Percentages",
            "Slices carry no share labels.",
        )
        .unwrap();
    engine.approve(&flag.flag_id).unwrap();
    engine.analyze(&id).unwrap();

    let mut merged = FixtureSet::load_dir(pack).unwrap();
    merged.extend(gateway.recorded_fixtures()).unwrap();
    merged.save_dir(pack).unwrap();
    println!("recorded: session lifecycle");
}

fn main() {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let fixtures = fixtures.canonicalize().unwrap();
    let pack = fixtures.join("replay");
    if pack.exists() {
        std::fs::remove_dir_all(&pack).unwrap();
    }
    std::fs::create_dir_all(&pack).unwrap();

    let (_, model) = ScenarioFile::load(&fixtures.join("scenarios.json")).unwrap();
    let transport = Arc::new(model).into_transport();

    let chart = |name: &str| fixtures.join("charts").join(name).display().to_string();
    for name in [
        "truncated_bar.png",
        "dual_axis_line.png",
        "many_segment_pie.png",
        "clean_bar.png",
    ] {
        run(&transport, &pack, &["correct", &chart(name)]);
    }
    let manifest = fixtures.join("corpus/manifest.jsonl").display().to_string();
    run(
        &transport,
        &pack,
        &["evaluate", &manifest, "--with-correction"],
    );
    let items = fixtures.join("vlat/items.jsonl").display().to_string();
    run(
        &transport,
        &pack,
        &["vlat", &items, "--mode", "guided3step"],
    );
    run(&transport, &pack, &["vlat", &items, "--mode", "direct"]);
    record_lifecycle(&transport, &fixtures, &pack);

    let count = FixtureSet::load_dir(&pack).unwrap().len();
    println!("{count} fixtures in {}", pack.display());
}
