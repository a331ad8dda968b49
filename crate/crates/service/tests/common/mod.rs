#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chartlint::engine::{Engine, EngineConfig};
use chartlint_core::correction::StubExecutor;
use chartlint_core::gateway::{FixtureSet, Gateway, GatewayConfig, Transport};
use chartlint_core::scripted::ScenarioFile;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn chart(name: &str) -> Vec<u8> {
    std::fs::read(fixtures().join("charts").join(name)).unwrap()
}

pub fn scripted_transport() -> Arc<dyn Transport> {
    let (_, model) = ScenarioFile::load(&fixtures().join("scenarios.json")).unwrap();
    Arc::new(model).into_transport()
}

/// Engine over the scripted provider in record mode.
pub fn scripted_engine(dir: &Path) -> Engine {
    let gateway = Gateway::recording(GatewayConfig::dual_default(), scripted_transport());
    Engine::open(
        dir,
        Arc::new(gateway),
        Arc::new(StubExecutor),
        EngineConfig::default(),
    )
    .unwrap()
}

/// Engine over the shipped replay pack.
pub fn replay_engine(dir: &Path) -> Engine {
    let pack = FixtureSet::load_dir(&fixtures().join("replay")).unwrap();
    let gateway = Gateway::replay(GatewayConfig::dual_default(), pack);
    Engine::open(
        dir,
        Arc::new(gateway),
        Arc::new(StubExecutor),
        EngineConfig::default(),
    )
    .unwrap()
}
