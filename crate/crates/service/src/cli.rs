//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 usage, otherwise [`ErrorCode::exit_code`].

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chartlint_core::correction::{Executor, ProcessExecutor, StubExecutor};
use chartlint_core::detection::AnalysisReport;
use chartlint_core::evaluation::{emit_report, Averaging};
use chartlint_core::extraction::{
    load_vlat_items, run_vlat_harness, CorrectionForGuessing, HarnessMode, RawCount, ScoringScheme,
};
use chartlint_core::gateway::{FixtureSet, Gateway, GatewayConfig, HttpTransport, Transport};
use chartlint_core::taxonomy::Severity;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::engine::{Engine, EngineConfig};
use crate::error::{ApiError, ErrorCode};
use crate::http::{self, ServeConfig};

#[derive(Debug, Parser)]
#[command(
    name = "chartlint",
    version,
    about = "Detect, explain, localize and correct misleading charts"
)]
pub struct Cli {
    /// Replay fixture directory. With --record, recorded calls are merged into it.
    #[arg(long, global = true, env = "CHARTLINT_FIXTURES")]
    pub fixtures: Option<PathBuf>,
    /// Call the providers and record every response into --fixtures.
    #[arg(long, global = true)]
    pub record: bool,
    /// Sessions, blobs, audit log and learned issues. Defaults to a temporary directory.
    #[arg(long, global = true, env = "CHARTLINT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = ExecutorKind::Auto)]
    pub executor: ExecutorKind,
    /// Sandbox runner command line (whitespace separated).
    #[arg(
        long,
        global = true,
        env = "CHARTLINT_RUNNER",
        default_value = "python3 -m chartlint_runner"
    )]
    pub runner: String,
    /// Print JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecutorKind {
    /// `stub` under replay, `process` otherwise.
    Auto,
    Stub,
    Process,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scoring {
    Corrected,
    Raw,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect, explain and localize issues in one chart image.
    Analyze { image: PathBuf },
    /// Analyze, then generate and verify one corrected chart per provider.
    Correct {
        image: PathBuf,
        /// Where to write `{provider}-v{n}.png`, `report.json` and `versions.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV dataset used instead of the extracted table.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score the pipeline against a JSON-lines gold manifest.
    Evaluate {
        manifest: PathBuf,
        #[arg(long)]
        with_correction: bool,
        /// Macro-average strata instead of pooling counts.
        #[arg(long = "macro")]
        macro_avg: bool,
        /// Also write the JSON report to this file.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Run the multiple-choice literacy harness.
    Vlat {
        items: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Scoring::Corrected)]
        scoring: Scoring,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "CHARTLINT_BIND", default_value = "127.0.0.1:8080")]
        bind: String,
        /// Required in the x-api-key header when set.
        #[arg(long, env = "CHARTLINT_API_KEY", hide_env_values = true)]
        api_key: Option<String>,
        /// Seconds before a live call is handed off to a pollable job.
        #[arg(long, default_value_t = 10)]
        async_after: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Extract the table, sort it, then answer from the table.
    Guided3step,
    /// Answer from the image in one call.
    Direct,
}

impl From<Mode> for HarnessMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Guided3step => HarnessMode::Guided3step,
            Mode::Direct => HarnessMode::Direct,
        }
    }
}

fn build_gateway(cli: &Cli, transport: Option<Arc<dyn Transport>>) -> Result<Gateway, ApiError> {
    let config = GatewayConfig::dual_default();
    let transport = || -> Arc<dyn Transport> {
        transport.clone().unwrap_or_else(|| {
            Arc::new(HttpTransport::new(Duration::from_secs(
                config.request_timeout_s,
            )))
        })
    };
    match (&cli.fixtures, cli.record) {
        (Some(_), true) => Ok(Gateway::recording(config.clone(), transport())),
        (Some(dir), false) => {
            let fixtures = FixtureSet::load_dir(dir)
                .map_err(|e| ApiError::validation(format!("fixtures: {e}")))?;
            Ok(Gateway::replay(config, fixtures))
        }
        (None, _) => Ok(Gateway::live(config.clone(), transport())),
    }
}

fn build_executor(cli: &Cli, replay: bool) -> Result<Arc<dyn Executor>, ApiError> {
    let kind = match cli.executor {
        ExecutorKind::Auto if replay => ExecutorKind::Stub,
        ExecutorKind::Auto => ExecutorKind::Process,
        k => k,
    };
    if kind == ExecutorKind::Stub {
        return Ok(Arc::new(StubExecutor));
    }
    let mut parts = cli.runner.split_whitespace().map(str::to_string);
    let program = parts
        .next()
        .ok_or_else(|| ApiError::validation("--runner is empty"))?;
    Ok(Arc::new(ProcessExecutor::new(program, parts.collect())))
}

/// Merges this run's recordings into the fixture directory.
fn save_recordings(gateway: &Gateway, dir: &Path) -> Result<usize, ApiError> {
    let recorded = gateway.recorded_fixtures();
    let count = recorded.len();
    let mut merged = if dir.is_dir() {
        FixtureSet::load_dir(dir).map_err(|e| ApiError::storage(format!("fixtures: {e}")))?
    } else {
        FixtureSet::new()
    };
    merged.extend(recorded).map_err(|e| {
        ApiError::conflict(format!("recorded fixture disagrees with the pack: {e}"))
    })?;
    merged
        .save_dir(dir)
        .map_err(|e| ApiError::storage(format!("fixtures: {e}")))?;
    Ok(count)
}

fn read(path: &Path) -> Result<Vec<u8>, ApiError> {
    fs::read(path).map_err(|e| ApiError::validation(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    fs::write(path, bytes).map_err(|e| ApiError::storage(format!("{}: {e}", path.display())))
}

fn io_err(e: std::io::Error) -> ApiError {
    ApiError::storage(format!("stdout: {e}"))
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Human-readable report, findings grouped by severity.
pub fn render_report(report: &AnalysisReport) -> String {
    let mut s = format!("artifact {}", report.artifact_id);
    if let Some(kind) = report.chart_type {
        s += &format!(
            " ({})",
            serde_json::to_value(kind).unwrap().as_str().unwrap_or("?")
        );
    }
    s += &format!("\ncatalog version {}\n", report.catalog_version);
    if report.merged_findings.is_empty() {
        s += "\nno issues found\n";
    }
    for severity in Severity::ALL {
        let group: Vec<_> = report
            .merged_findings
            .iter()
            .filter(|f| f.severity == severity)
            .collect();
        if group.is_empty() {
            continue;
        }
        s += &format!("\n{}\n", format!("{severity:?}").to_uppercase());
        for f in group {
            let sources: Vec<&str> = f.source_models.iter().map(String::as_str).collect();
            s += &format!("  - {} [{}] ({})", f.name, f.issue_ref, sources.join(", "));
            if f.resolved {
                s += " resolved";
            }
            s += "\n";
            if !f.explanation.is_empty() {
                s += &format!("      {}\n", f.explanation);
            }
            if !f.recommendation.is_empty() {
                s += &format!("      fix: {}\n", f.recommendation);
            }
            if let Some(a) = report
                .annotations
                .iter()
                .find(|a| a.issue_ref == f.issue_ref)
            {
                s += &format!(
                    "      at {:.1}% from top, {:.1}% from left\n",
                    a.top_gap, a.left_gap
                );
            }
        }
    }
    for (provider, names) in &report.unknown_issue_names {
        if !names.is_empty() {
            s += &format!("\nunrecognized from {provider}: {}\n", names.join(", "));
        }
    }
    if !report.warnings.is_empty() {
        s += "\nwarnings\n";
        for w in &report.warnings {
            s += &format!("  {}: {}\n", w.stage, w.message);
        }
    }
    s
}

fn run_command(cli: &Cli, gateway: Arc<Gateway>, out: &mut dyn Write) -> Result<(), ApiError> {
    let replay = gateway.is_replay();
    let executor = build_executor(cli, replay)?;
    let scratch;
    let data_dir = match &cli.data_dir {
        Some(d) => d.clone(),
        None => {
            scratch = tempfile::tempdir().map_err(|e| ApiError::storage(e.to_string()))?;
            scratch.path().to_path_buf()
        }
    };
    let engine = || {
        Engine::open(
            &data_dir,
            gateway.clone(),
            executor.clone(),
            EngineConfig::default(),
        )
    };

    match &cli.command {
        Command::Analyze { image } => {
            let engine = engine()?;
            let session = engine.create_session(&read(image)?)?;
            let report = engine.analyze(&session.session_id)?;
            let text = if cli.json {
                pretty(&report)
            } else {
                render_report(&report)
            };
            out.write_all(text.as_bytes()).map_err(io_err)?;
        }
        Command::Correct {
            image,
            out: out_dir,
            data,
        } => {
            let engine = engine()?;
            let session = engine.create_session(&read(image)?)?;
            let id = &session.session_id;
            let report = engine.analyze(id)?;
            if let Some(path) = data {
                let text = String::from_utf8(read(path)?)
                    .map_err(|_| ApiError::validation(format!("{}: not UTF-8", path.display())))?;
                engine.upload_dataset(id, &text)?;
            }
            let corrected = engine.correct(id)?;
            let versions = engine.versions(id)?;
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir).map_err(|e| ApiError::storage(e.to_string()))?;
                for v in &corrected.versions {
                    if let Some(img) = &v.version.rendered_image {
                        let name =
                            format!("{}-v{}.png", v.version.provider_id, v.version.version_no);
                        write(&dir.join(name), &engine.blob(&img.blob.key)?)?;
                    }
                }
                write(
                    &dir.join("report.json"),
                    pretty(&engine.report(id)?).as_bytes(),
                )?;
                write(&dir.join("versions.json"), pretty(&versions).as_bytes())?;
            }
            let text = if cli.json {
                pretty(&json!({ "report": engine.report(id)?, "correction": corrected }))
            } else {
                let mut s = render_report(&report);
                s += "\ncorrections\n";
                for v in &corrected.versions {
                    let version = &v.version;
                    let resolved = version
                        .resolved_issue_refs
                        .as_ref()
                        .map(|r| {
                            format!(
                                "{}/{} resolved",
                                r.len(),
                                version.addressed_issue_refs.len()
                            )
                        })
                        .unwrap_or_else(|| "not verified".into());
                    s += &format!(
                        "  {} v{}: {}, {} repair attempt(s), {resolved}\n",
                        version.provider_id,
                        version.version_no,
                        if version.render_succeeded {
                            "rendered"
                        } else {
                            "render failed"
                        },
                        version.repair_attempts
                    );
                }
                for w in &corrected.warnings {
                    s += &format!("  warning {}: {}\n", w.stage, w.message);
                }
                s
            };
            out.write_all(text.as_bytes()).map_err(io_err)?;
        }
        Command::Evaluate {
            manifest,
            with_correction,
            macro_avg,
            json_out,
        } => {
            let engine = engine()?;
            let averaging = if *macro_avg {
                Averaging::Macro
            } else {
                Averaging::Micro
            };
            let run = engine.evaluate(manifest, *with_correction, averaging)?;
            let (json, table) = emit_report(&run.metrics);
            if let Some(path) = json_out {
                write(path, json.as_bytes())?;
            }
            let text = if cli.json { json } else { table };
            out.write_all(text.as_bytes()).map_err(io_err)?;
            for w in &run.warnings {
                eprintln!("warning {}: {}", w.stage, w.message);
            }
        }
        Command::Vlat {
            items,
            mode,
            scoring,
        } => {
            let list = load_vlat_items(items).map_err(|e| ApiError::validation(e.to_string()))?;
            let scheme: &dyn ScoringScheme = match scoring {
                Scoring::Corrected => &CorrectionForGuessing,
                Scoring::Raw => &RawCount,
            };
            let base = items.parent().unwrap_or(Path::new("."));
            let run =
                run_vlat_harness(&list, base, &gateway, (*mode).into(), scheme).map_err(|e| {
                    ApiError {
                        code: match e.error {
                            chartlint_core::extraction::ExtractionError::Gateway(_) => {
                                ErrorCode::UpstreamModelError
                            }
                            _ => ErrorCode::ValidationError,
                        },
                        message: e.to_string(),
                    }
                })?;
            let text = if cli.json {
                pretty(&run)
            } else {
                let mut s = String::new();
                for item in &run.items {
                    s += &format!(
                        "{:<12} {} {}\n",
                        item.item_id,
                        if item.correct { "correct" } else { "wrong  " },
                        item.answer_text
                    );
                }
                s += &format!(
                    "\nraw {}/{}  score {:.2} ({})\n",
                    run.score.raw_score,
                    run.score.total_items,
                    run.score.corrected_score,
                    run.score.scheme
                );
                s
            };
            out.write_all(text.as_bytes()).map_err(io_err)?;
        }
        Command::Serve {
            bind,
            api_key,
            async_after,
        } => {
            let engine = Arc::new(engine()?);
            let config = ServeConfig {
                api_key: api_key.clone(),
                async_after: Duration::from_secs(*async_after),
                ..ServeConfig::default()
            };
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| ApiError::storage(e.to_string()))?;
            runtime
                .block_on(http::serve(http::router(engine, config), bind))
                .map_err(|e| ApiError::storage(format!("serve {bind}: {e}")))?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// `transport` replaces the HTTP transport for live and record modes.
pub fn run_with(
    args: Vec<OsString>,
    transport: Option<Arc<dyn Transport>>,
    out: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.record && cli.fixtures.is_none() {
        eprintln!("error: --record needs --fixtures <dir> to write into");
        return 2;
    }
    let result = build_gateway(&cli, transport).and_then(|gateway| {
        let gateway = Arc::new(gateway);
        let outcome = run_command(&cli, gateway.clone(), out);
        if cli.record {
            let dir = cli.fixtures.as_deref().expect("checked above");
            let saved = save_recordings(&gateway, dir)?;
            tracing::info!("recorded {saved} fixtures into {}", dir.display());
        }
        outcome
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            e.code.exit_code()
        }
    }
}

pub fn main() -> i32 {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    run_with(std::env::args_os().collect(), None, &mut std::io::stdout())
}
