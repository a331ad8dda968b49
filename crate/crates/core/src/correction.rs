//! Corrected chart generation.
//!
//! A code-generating model writes a plotting script from the chart data and
//! the merged issue list. The script runs in a sandbox behind the
//! [`Executor`] trait; failures go back to the model with the structured
//! error until the script renders or the repair budget runs out. Each
//! successful render becomes a [`CorrectionVersion`] in a per-provider,
//! append-only chain, and is re-analyzed to decide which issues it fixed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use base64::Engine as _;
use chrono::{DateTime, Utc};
use image::{ImageFormat, Rgb, RgbImage};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wait_timeout::ChildExt;

use crate::blob::{BlobRef, BlobStore, StorageError};
use crate::detection::{self, AnalysisConfig, AnalysisReport, DetectedIssue};
use crate::extraction::{DataTable, Provenance};
use crate::gateway::{Author, Gateway, GatewayError, ModelRequest, ModelRole};
use crate::ingestion::{self, IngestConfig, VisualizationArtifact};
use crate::taxonomy::Catalog;
use crate::Warning;

pub const DEFAULT_MAX_REPAIR_ITERS: u32 = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorrectionError {
    #[error("model output contains no fenced code block")]
    EmptyScript,
    #[error("no data available for correction")]
    EmptyData,
    #[error("no issues to correct")]
    NoIssues,
    #[error("script still failing after {attempts} attempts: {last_error}")]
    RepairExhausted { attempts: u32, last_error: String },
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error("session has no correction versions")]
    EmptySession,
    #[error("every provider failed to produce a correction: {}", .0.join("; "))]
    AllProvidersFailed(Vec<String>),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Named set of libraries preinstalled in a sandbox runtime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeProfile {
    pub tag: String,
    pub libraries: BTreeSet<String>,
}

/// Python standard-library modules scripts may import without declaring.
const STDLIB: &[&str] = &[
    "abc",
    "base64",
    "collections",
    "csv",
    "datetime",
    "decimal",
    "functools",
    "io",
    "itertools",
    "json",
    "math",
    "operator",
    "os",
    "random",
    "re",
    "statistics",
    "string",
    "sys",
    "textwrap",
    "typing",
    "warnings",
];

impl RuntimeProfile {
    pub fn default_python() -> Self {
        RuntimeProfile {
            tag: "python-viz".into(),
            libraries: ["matplotlib", "seaborn", "numpy", "pandas"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn library_list(&self) -> String {
        self.libraries
            .iter()
            .cloned()
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotScript {
    pub source_text: String,
    pub target_runtime_tag: String,
    /// Third-party top-level modules the script imports.
    pub declared_libs: Vec<String>,
}

fn imported_modules(source: &str) -> BTreeSet<String> {
    let mut modules = BTreeSet::new();
    for line in source.lines() {
        let line = line.trim();
        let top = |spec: &str| {
            spec.trim()
                .split(['.', ' '])
                .next()
                .unwrap_or("")
                .to_string()
        };
        if let Some(rest) = line.strip_prefix("import ") {
            for part in rest.split(',') {
                let m = top(part);
                if !m.is_empty() {
                    modules.insert(m);
                }
            }
        } else if let Some(rest) = line.strip_prefix("from ") {
            if let Some((module, _)) = rest.split_once(" import ") {
                if !module.starts_with('.') {
                    modules.insert(top(module));
                }
            }
        }
    }
    modules
}

impl PlotScript {
    pub fn new(source_text: impl Into<String>, profile: &RuntimeProfile) -> Self {
        let source_text = source_text.into();
        let declared_libs = imported_modules(&source_text)
            .into_iter()
            .filter(|m| !STDLIB.contains(&m.as_str()))
            .collect();
        PlotScript {
            source_text,
            target_runtime_tag: profile.tag.clone(),
            declared_libs,
        }
    }

    /// Libraries the script needs that the profile does not provide.
    pub fn missing_libs(&self, profile: &RuntimeProfile) -> Vec<String> {
        self.declared_libs
            .iter()
            .filter(|l| !profile.libraries.contains(*l))
            .cloned()
            .collect()
    }
}

/// Body of the first fenced code block, if any.
pub fn extract_code_block(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    let code = body[..end].trim_end();
    (!code.trim().is_empty()).then(|| format!("{code}\n"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub script: String,
    pub runtime_profile: String,
    pub timeout_s: u64,
    pub memory_cap_mb: u64,
    pub output_format: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Success,
    ScriptError,
    Timeout,
    ResourceExceeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecutionStatus,
    #[serde(skip)]
    pub image: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traceback_excerpt: Option<String>,
}

impl ExecutionResult {
    pub fn success(image: Vec<u8>) -> Self {
        ExecutionResult {
            status: ExecutionStatus::Success,
            image: Some(image),
            error_kind: None,
            error_message: None,
            traceback_excerpt: None,
        }
    }

    pub fn script_error(kind: &str, message: &str) -> Self {
        ExecutionResult {
            status: ExecutionStatus::ScriptError,
            image: None,
            error_kind: Some(kind.to_string()),
            error_message: Some(message.to_string()),
            traceback_excerpt: None,
        }
    }

    pub fn failure(status: ExecutionStatus, message: &str) -> Self {
        ExecutionResult {
            status,
            image: None,
            error_kind: None,
            error_message: Some(message.to_string()),
            traceback_excerpt: None,
        }
    }

    /// One-line description fed back to the model and into errors.
    pub fn summary(&self) -> String {
        match self.status {
            ExecutionStatus::Success => "success".into(),
            ExecutionStatus::ScriptError => format!(
                "{}: {}",
                self.error_kind.as_deref().unwrap_or("Error"),
                self.error_message.as_deref().unwrap_or("")
            ),
            ExecutionStatus::Timeout => format!(
                "Timeout: {}",
                self.error_message
                    .as_deref()
                    .unwrap_or("execution timed out")
            ),
            ExecutionStatus::ResourceExceeded => format!(
                "ResourceExceeded: {}",
                self.error_message
                    .as_deref()
                    .unwrap_or("resource limit hit")
            ),
        }
    }
}

/// Runs plotting scripts. `Err` means the sandbox itself is unusable;
/// script failures are `Ok` results with a non-success status.
pub trait Executor: Send + Sync {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResult, CorrectionError>;
}

/// In-process executor for tests and replay runs. Renders a deterministic
/// PNG derived from the script hash. A line `# stub: fail <Kind>: <message>`
/// makes it report a script error, `# stub: timeout` a timeout.
#[derive(Debug, Clone, Default)]
pub struct StubExecutor;

impl StubExecutor {
    pub fn render(script: &str) -> Vec<u8> {
        let digest = Sha256::digest(script.as_bytes());
        let (w, h) = (320u32, 240u32);
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let bars = 3 + (digest[0] % 4) as u32;
        let slot = w / (bars + 1);
        for b in 0..bars {
            let height = 40 + (digest[1 + b as usize] as u32 % 160);
            let color = Rgb([digest[8 + b as usize], digest[16 + b as usize], 160]);
            let x0 = slot / 2 + b * slot;
            for x in x0..(x0 + slot * 2 / 3).min(w) {
                for y in (h - 20 - height)..(h - 20) {
                    img.put_pixel(x, y, color);
                }
            }
        }
        for x in 10..w - 10 {
            img.put_pixel(x, h - 20, Rgb([0, 0, 0]));
        }
        let mut out = Cursor::new(Vec::new());
        image::DynamicImage::ImageRgb8(img)
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory png encode");
        out.into_inner()
    }
}

impl Executor for StubExecutor {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResult, CorrectionError> {
        for line in request.script.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# stub: fail ") {
                let (kind, message) = rest.split_once(':').unwrap_or((rest, ""));
                return Ok(ExecutionResult::script_error(kind.trim(), message.trim()));
            }
            if line == "# stub: timeout" {
                return Ok(ExecutionResult::failure(
                    ExecutionStatus::Timeout,
                    &format!("exceeded {} s", request.timeout_s),
                ));
            }
        }
        Ok(ExecutionResult::success(StubExecutor::render(
            &request.script,
        )))
    }
}

/// Returns canned results in order; reports the sandbox as unavailable once
/// the queue is empty.
#[derive(Debug, Default)]
pub struct ScriptedExecutor {
    results: Mutex<VecDeque<ExecutionResult>>,
    seen: Mutex<Vec<ExecutionRequest>>,
}

impl ScriptedExecutor {
    pub fn new(results: Vec<ExecutionResult>) -> Self {
        ScriptedExecutor {
            results: Mutex::new(results.into()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ExecutionRequest> {
        self.seen.lock().clone()
    }
}

impl Executor for ScriptedExecutor {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResult, CorrectionError> {
        self.seen.lock().push(request.clone());
        self.results
            .lock()
            .pop_front()
            .ok_or_else(|| CorrectionError::SandboxUnavailable("scripted results exhausted".into()))
    }
}

/// Sandbox runner as a child process. One JSON request goes to stdin, one
/// JSON result comes back on stdout; a rendered image is reported as a path
/// that must lie inside the per-run work directory.
#[derive(Debug, Clone)]
pub struct ProcessExecutor {
    pub program: PathBuf,
    pub args: Vec<String>,
    /// Extra wall-clock allowance on top of the request timeout before the
    /// child is killed.
    pub grace: Duration,
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    #[serde(flatten)]
    request: &'a ExecutionRequest,
    work_dir: &'a Path,
}

#[derive(Debug, Deserialize)]
struct WireResult {
    status: ExecutionStatus,
    #[serde(default)]
    image_path: Option<PathBuf>,
    #[serde(default)]
    error_kind: Option<String>,
    #[serde(default)]
    error_message: Option<String>,
    #[serde(default)]
    traceback_excerpt: Option<String>,
}

impl ProcessExecutor {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        ProcessExecutor {
            program: program.into(),
            args,
            grace: Duration::from_secs(1),
        }
    }

    fn unavailable(e: impl std::fmt::Display) -> CorrectionError {
        CorrectionError::SandboxUnavailable(e.to_string())
    }
}

impl Executor for ProcessExecutor {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResult, CorrectionError> {
        let work = tempfile::tempdir().map_err(Self::unavailable)?;
        let payload = serde_json::to_vec(&WireRequest {
            request,
            work_dir: work.path(),
        })
        .map_err(Self::unavailable)?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .current_dir(work.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(Self::unavailable)?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        // A runner that exits early closes the pipe; its result still counts.
        let _ = stdin.write_all(&payload);
        drop(stdin);

        let limit = Duration::from_secs(request.timeout_s) + self.grace;
        let status = child.wait_timeout(limit).map_err(Self::unavailable)?;
        if status.is_none() {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(ExecutionResult::failure(
                ExecutionStatus::Timeout,
                &format!("runner exceeded {} s", request.timeout_s),
            ));
        }
        let output = reader
            .join()
            .map_err(|_| Self::unavailable("stdout reader panicked"))?
            .map_err(Self::unavailable)?;
        let text = String::from_utf8_lossy(&output);
        let line = text
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .unwrap_or("");
        let wire: WireResult = serde_json::from_str(line)
            .map_err(|e| Self::unavailable(format!("malformed runner output: {e}")))?;
        let mut result = ExecutionResult {
            status: wire.status,
            image: None,
            error_kind: wire.error_kind,
            error_message: wire.error_message,
            traceback_excerpt: wire.traceback_excerpt,
        };
        if result.status == ExecutionStatus::Success {
            let path = wire
                .image_path
                .ok_or_else(|| Self::unavailable("success without image_path"))?;
            let path = if path.is_absolute() {
                path
            } else {
                work.path().join(path)
            };
            let root = work.path().canonicalize().map_err(Self::unavailable)?;
            let resolved = path.canonicalize().map_err(Self::unavailable)?;
            if !resolved.starts_with(&root) {
                return Err(Self::unavailable("image path escapes the work directory"));
            }
            result.image = Some(std::fs::read(resolved).map_err(Self::unavailable)?);
        }
        Ok(result)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairConfig {
    pub max_iters: u32,
    pub timeout_s: u64,
    pub memory_cap_mb: u64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        RepairConfig {
            max_iters: DEFAULT_MAX_REPAIR_ITERS,
            timeout_s: 30,
            memory_cap_mb: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome {
    pub script: PlotScript,
    pub result: ExecutionResult,
    /// Number of executions, including the successful one.
    pub attempts: u32,
    pub warnings: Vec<Warning>,
}

fn code_prompt_tail(profile: &RuntimeProfile) -> String {
    format!(
        "Use Python with only these libraries: {}. Save the figure as 'output.png' in the \
working directory. Reply with a single fenced python code block.",
        profile.library_list()
    )
}

/// Executes `script`, feeding each failure back to the code generator until
/// it renders or `max_iters` executions have been spent.
pub fn repair_loop(
    script: PlotScript,
    executor: &dyn Executor,
    gateway: &Gateway,
    provider_id: &str,
    profile: &RuntimeProfile,
    config: &RepairConfig,
) -> Result<RepairOutcome, CorrectionError> {
    let max_iters = config.max_iters.max(1);
    let mut script = script;
    let mut warnings = Vec::new();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let missing = script.missing_libs(profile);
        let result = if missing.is_empty() {
            executor.execute(&ExecutionRequest {
                script: script.source_text.clone(),
                runtime_profile: profile.tag.clone(),
                timeout_s: config.timeout_s,
                memory_cap_mb: config.memory_cap_mb,
                output_format: "png".into(),
            })?
        } else {
            ExecutionResult::script_error(
                "ImportError",
                &format!(
                    "libraries not available in runtime '{}': {}",
                    profile.tag,
                    missing.join(", ")
                ),
            )
        };
        if result.status == ExecutionStatus::Success {
            return Ok(RepairOutcome {
                script,
                result,
                attempts,
                warnings,
            });
        }
        if attempts >= max_iters {
            return Err(CorrectionError::RepairExhausted {
                attempts,
                last_error: result.summary(),
            });
        }
        let mut prompt = format!(
            "This plotting code failed.\n\nError: {}\n",
            result.summary()
        );
        if let Some(tb) = &result.traceback_excerpt {
            prompt.push_str(&format!("Traceback:\n{tb}\n"));
        }
        prompt.push_str(&format!(
            "\n```python\n{}```\n\nFix the code. {}",
            script.source_text,
            code_prompt_tail(profile)
        ));
        let request = ModelRequest::new(ModelRole::CodeGenerator, "repair").user(prompt);
        let response = gateway.complete_with(provider_id, &request)?;
        match extract_code_block(&response.text) {
            Some(code) => script = PlotScript::new(code, profile),
            None => warnings.push(Warning::new(
                "correction",
                format!("{provider_id}: repair response had no code block; retrying the previous script"),
            )),
        }
    }
}

fn describe_issues(issues: &[DetectedIssue]) -> String {
    issues
        .iter()
        .map(|i| {
            format!(
                "- {} ({}): {} Recommendation: {}",
                i.name, i.severity, i.explanation, i.recommendation
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Prompts the code generator for a corrected plotting script.
pub fn generate_correction(
    artifact: &VisualizationArtifact,
    data: &DataTable,
    issues: &[DetectedIssue],
    provider_id: &str,
    gateway: &Gateway,
    profile: &RuntimeProfile,
) -> Result<PlotScript, CorrectionError> {
    if data.rows.is_empty() {
        return Err(CorrectionError::EmptyData);
    }
    let source = match data.provenance {
        Provenance::UserUploaded => "supplied by the user",
        Provenance::ModelExtracted => "extracted from the chart",
    };
    let prompt = format!(
        "You are correcting a misleading chart.\n\
(1) The data below was {source}:\n\n{}\n\
(2) Generate visualization code that recreates the chart with these issues fixed:\n{}\n\n\
If the chart type itself is a problem, replace it with standard visualization types like bar \
charts, line charts, and scatterplots. For example, a pie chart with many segments becomes a \
sorted bar chart, and a dual-axis chart becomes single-axis line charts.\n\
(3) Apply styling that matches the original chart (colors, fonts, labels) wherever that does \
not reintroduce an issue.\n\n{}",
        data.to_csv(),
        describe_issues(issues),
        code_prompt_tail(profile)
    );
    let request = ModelRequest::new(ModelRole::CodeGenerator, "codegen")
        .user(prompt)
        .image(artifact.payload());
    let response = gateway.complete_with(provider_id, &request)?;
    let code = extract_code_block(&response.text).ok_or(CorrectionError::EmptyScript)?;
    Ok(PlotScript::new(code, profile))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedImage {
    pub blob: BlobRef,
    /// Base64 PNG, present only when the image fits the inline threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline_base64: Option<String>,
}

/// Stores a rendered PNG and decides inline encoding by size alone.
pub fn finalize_render(
    image: &[u8],
    store: &dyn BlobStore,
    inline_threshold: u64,
) -> Result<RenderedImage, StorageError> {
    let blob = store.put(image, "image/png")?;
    let inline_base64 = (image.len() as u64 <= inline_threshold)
        .then(|| base64::engine::general_purpose::STANDARD.encode(image));
    Ok(RenderedImage {
        blob,
        inline_base64,
    })
}

/// Re-runs detection on a corrected render.
pub trait Reanalyzer: Send + Sync {
    fn reanalyze(&self, image_png: &[u8]) -> Result<AnalysisReport, String>;
}

/// Reanalyzer backed by the normal detection pipeline.
pub struct PipelineReanalyzer<'a> {
    pub gateway: &'a Gateway,
    pub catalog: &'a Catalog,
    pub ingest: IngestConfig,
    pub analysis: AnalysisConfig,
}

impl Reanalyzer for PipelineReanalyzer<'_> {
    fn reanalyze(&self, image_png: &[u8]) -> Result<AnalysisReport, String> {
        let artifact = ingestion::ingest(image_png, &self.ingest).map_err(|e| e.to_string())?;
        detection::analyze(&artifact, self.catalog, self.gateway, &self.analysis)
            .map_err(|e| e.to_string())
    }
}

/// Issue ids from `original` that the re-analysis no longer reports.
pub fn verify_resolution(
    image_png: &[u8],
    original: &[DetectedIssue],
    reanalyzer: &dyn Reanalyzer,
) -> Result<BTreeSet<String>, String> {
    let report = reanalyzer.reanalyze(image_png)?;
    let still = report.merged_issue_refs();
    Ok(original
        .iter()
        .map(|i| i.issue_ref.clone())
        .filter(|id| !still.contains(id))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionTrigger {
    Initial,
    ChatRefinement,
    DatasetReupload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionVersion {
    pub version_no: u32,
    pub provider_id: String,
    pub script: PlotScript,
    /// Set when the render succeeded and was stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendered_image: Option<RenderedImage>,
    pub render_succeeded: bool,
    pub addressed_issue_refs: BTreeSet<String>,
    /// Issues the re-analysis no longer finds; `None` when verification
    /// could not run.
    #[serde(default)]
    pub resolved_issue_refs: Option<BTreeSet<String>>,
    pub repair_attempts: u32,
    pub trigger: VersionTrigger,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub author: Author,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSession {
    pub artifact_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_data: Option<DataTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uploaded_data: Option<DataTable>,
    /// Append-only version chains keyed by provider.
    pub versions: BTreeMap<String, Vec<CorrectionVersion>>,
    pub chat_history: Vec<ChatTurn>,
}

impl CorrectionSession {
    pub fn new(artifact_id: &str) -> Self {
        CorrectionSession {
            artifact_id: artifact_id.to_string(),
            extracted_data: None,
            uploaded_data: None,
            versions: BTreeMap::new(),
            chat_history: Vec::new(),
        }
    }

    /// Uploaded data wins over extracted data.
    pub fn effective_data(&self) -> Option<&DataTable> {
        self.uploaded_data.as_ref().or(self.extracted_data.as_ref())
    }

    pub fn latest(&self, provider_id: &str) -> Option<&CorrectionVersion> {
        self.versions.get(provider_id).and_then(|v| v.last())
    }

    pub fn version(&self, provider_id: &str, version_no: u32) -> Option<&CorrectionVersion> {
        self.versions
            .get(provider_id)?
            .get(version_no.checked_sub(1)? as usize)
    }

    pub fn version_count(&self) -> usize {
        self.versions.values().map(Vec::len).sum()
    }

    /// Appends with the next version number for that provider.
    pub fn push_version(&mut self, mut version: CorrectionVersion) -> u32 {
        let chain = self
            .versions
            .entry(version.provider_id.clone())
            .or_default();
        version.version_no = chain.len() as u32 + 1;
        let no = version.version_no;
        chain.push(version);
        no
    }

    /// Most recent verified resolution set from `provider_id`'s chain.
    pub fn resolved_for(&self, provider_id: &str) -> Option<&BTreeSet<String>> {
        self.versions
            .get(provider_id)?
            .iter()
            .rev()
            .find_map(|v| v.resolved_issue_refs.as_ref())
    }
}

/// Shared dependencies of a correction run.
pub struct CorrectionContext<'a> {
    pub gateway: &'a Gateway,
    pub executor: &'a dyn Executor,
    pub store: &'a dyn BlobStore,
    pub reanalyzer: &'a dyn Reanalyzer,
    pub profile: RuntimeProfile,
    pub repair: RepairConfig,
    pub inline_threshold: u64,
}

fn build_version(
    ctx: &CorrectionContext<'_>,
    provider_id: &str,
    outcome: RepairOutcome,
    issues: &[DetectedIssue],
    trigger: VersionTrigger,
) -> CorrectionVersion {
    let mut warnings = outcome.warnings;
    let image = outcome.result.image.unwrap_or_default();
    let rendered_image = match finalize_render(&image, ctx.store, ctx.inline_threshold) {
        Ok(r) => Some(r),
        Err(e) => {
            warnings.push(Warning::new(
                "correction",
                format!("{provider_id}: rendered image not stored: {e}"),
            ));
            None
        }
    };
    let resolved_issue_refs = match verify_resolution(&image, issues, ctx.reanalyzer) {
        Ok(set) => Some(set),
        Err(e) => {
            warnings.push(Warning::new(
                "correction",
                format!("{provider_id}: resolution check failed, flags unchanged: {e}"),
            ));
            None
        }
    };
    CorrectionVersion {
        version_no: 0,
        provider_id: provider_id.to_string(),
        script: outcome.script,
        rendered_image,
        render_succeeded: true,
        addressed_issue_refs: issues.iter().map(|i| i.issue_ref.clone()).collect(),
        resolved_issue_refs,
        repair_attempts: outcome.attempts,
        trigger,
        created_at: Utc::now(),
        warnings,
    }
}

/// Generates one corrected version per configured provider from the same
/// issue list. Generation and repair run concurrently; resolution checks
/// run afterwards in provider order so replayed runs stay deterministic.
pub fn correct_all(
    session: &mut CorrectionSession,
    artifact: &VisualizationArtifact,
    issues: &[DetectedIssue],
    ctx: &CorrectionContext<'_>,
    trigger: VersionTrigger,
) -> Result<Vec<Warning>, CorrectionError> {
    if issues.is_empty() {
        return Err(CorrectionError::NoIssues);
    }
    let data = session
        .effective_data()
        .ok_or(CorrectionError::EmptyData)?
        .clone();
    let providers: Vec<String> = ctx
        .gateway
        .config()
        .providers
        .iter()
        .map(|p| p.id.clone())
        .collect();
    let outcomes: Vec<(String, Result<RepairOutcome, CorrectionError>)> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = providers
                .iter()
                .map(|provider| {
                    let data = &data;
                    let h = scope.spawn(move || {
                        let script = generate_correction(
                            artifact,
                            data,
                            issues,
                            provider,
                            ctx.gateway,
                            &ctx.profile,
                        )?;
                        repair_loop(
                            script,
                            ctx.executor,
                            ctx.gateway,
                            provider,
                            &ctx.profile,
                            &ctx.repair,
                        )
                    });
                    (provider.clone(), h)
                })
                .collect();
            handles
                .into_iter()
                .map(|(p, h)| (p, h.join().expect("correction thread panicked")))
                .collect()
        });
    let mut warnings = Vec::new();
    let mut failures = Vec::new();
    for (provider, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                let version = build_version(ctx, &provider, o, issues, trigger);
                warnings.extend(version.warnings.iter().cloned());
                session.push_version(version);
            }
            Err(e) => {
                warnings.push(Warning::new(
                    "correction",
                    format!("{provider}: correction failed: {e}"),
                ));
                failures.push(format!("{provider}: {e}"));
            }
        }
    }
    if failures.len() == providers.len() {
        return Err(CorrectionError::AllProvidersFailed(failures));
    }
    Ok(warnings)
}

/// Applies a chat request to the latest version of one provider's chain.
/// On failure the chat history records the failure and no version is added.
pub fn refine(
    session: &mut CorrectionSession,
    provider_id: &str,
    message: &str,
    issues: &[DetectedIssue],
    ctx: &CorrectionContext<'_>,
) -> Result<u32, CorrectionError> {
    let latest = session
        .latest(provider_id)
        .ok_or(CorrectionError::EmptySession)?
        .clone();
    session.chat_history.push(ChatTurn {
        author: Author::User,
        text: message.to_string(),
        provider_id: Some(provider_id.to_string()),
    });
    let mut prompt = format!(
        "Here is the current plotting code:\n\n```python\n{}```\n\nUser request: {message}\n\n",
        latest.script.source_text
    );
    if !issues.is_empty() {
        prompt.push_str(&format!(
            "Apply the request without reintroducing these issues:\n{}\n\n",
            issues
                .iter()
                .map(|i| format!("- {}", i.name))
                .collect::<Vec<_>>()
                .join("\n")
        ));
    }
    prompt.push_str(&code_prompt_tail(&ctx.profile));
    let request = ModelRequest::new(ModelRole::CodeGenerator, "refine").user(prompt);
    let result = ctx
        .gateway
        .complete_with(provider_id, &request)
        .map_err(CorrectionError::from)
        .and_then(|r| extract_code_block(&r.text).ok_or(CorrectionError::EmptyScript))
        .and_then(|code| {
            repair_loop(
                PlotScript::new(code, &ctx.profile),
                ctx.executor,
                ctx.gateway,
                provider_id,
                &ctx.profile,
                &ctx.repair,
            )
        });
    match result {
        Ok(outcome) => {
            let version = build_version(
                ctx,
                provider_id,
                outcome,
                issues,
                VersionTrigger::ChatRefinement,
            );
            let no = session.push_version(version);
            session.chat_history.push(ChatTurn {
                author: Author::Assistant,
                text: format!("Updated the chart (version {no})."),
                provider_id: Some(provider_id.to_string()),
            });
            Ok(no)
        }
        Err(e) => {
            session.chat_history.push(ChatTurn {
                author: Author::Assistant,
                text: format!("I could not apply that change: {e}"),
                provider_id: Some(provider_id.to_string()),
            });
            Err(e)
        }
    }
}

/// Applies a provider's latest verified resolution set to the merged issues.
pub fn apply_resolution(issues: &mut [DetectedIssue], resolved: &BTreeSet<String>) {
    for issue in issues {
        issue.resolved = resolved.contains(&issue.issue_ref);
    }
}
