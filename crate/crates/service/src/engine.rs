//! Session lifecycle over the core pipeline.
//!
//! Each session moves through ingest, analyze, correct and refine; calls
//! out of that order are `Conflict`. Mutations of one session are
//! serialized by a per-session lock, catalog approvals by the shared
//! catalog's writer, and every state-changing call emits one audit event.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use chartlint_core::blob::{BlobStore, StorageError};
use chartlint_core::correction::{
    apply_resolution, correct_all, refine, ChatTurn, CorrectionContext, CorrectionSession,
    CorrectionVersion, Executor, PipelineReanalyzer, RepairConfig, RuntimeProfile, VersionTrigger,
};
use chartlint_core::detection::AnalysisReport;
use chartlint_core::evaluation::{Averaging, Corpus};
use chartlint_core::extraction::{extract_data, DataTable};
use chartlint_core::gateway::{Gateway, ModelRole};
use chartlint_core::ingestion::{self, VisualizationArtifact};
use chartlint_core::pipeline::{
    analyze_artifact, evaluate_corpus, CorpusRun, PipelineConfig, PipelineError,
};
use chartlint_core::taxonomy::{
    Catalog, LearnedIssue, LearnedJournal, LearnedStatus, SharedCatalog,
};
use chartlint_core::Warning;
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{AuditEvent, AuditLog, AuditStage};
use crate::error::ApiError;
use crate::store::{FlagRecord, FsStore, SessionRecord};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub repair: RepairConfig,
    pub profile: RuntimeProfile,
    /// Rendered images up to this size are also returned inline.
    pub inline_threshold: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            pipeline: PipelineConfig::default(),
            repair: RepairConfig::default(),
            profile: RuntimeProfile::default_python(),
            inline_threshold: 4 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    Available,
    Missing,
    NotRendered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionView {
    #[serde(flatten)]
    pub version: CorrectionVersion,
    pub image_status: ImageStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionsView {
    pub session_id: String,
    pub versions: BTreeMap<String, Vec<VersionView>>,
    pub chat_history: Vec<ChatTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectResponse {
    pub session_id: String,
    pub versions: Vec<VersionView>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub artifact: VisualizationArtifact,
    pub analyzed: bool,
    pub corrected: bool,
    pub flags: Vec<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogInfo {
    pub version: u64,
    pub builtin_count: usize,
    pub learned: Vec<LearnedIssue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalResponse {
    pub flag: FlagRecord,
    pub catalog_version: u64,
}

fn random_id(prefix: &str) -> String {
    let n: u64 = rand::rng().random();
    format!("{prefix}-{n:016x}")
}

struct StoreAdapter<'a>(&'a FsStore);

impl BlobStore for StoreAdapter<'_> {
    fn put(
        &self,
        bytes: &[u8],
        content_type: &str,
    ) -> Result<chartlint_core::blob::BlobRef, StorageError> {
        self.0.blobs().put(bytes, content_type)
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StorageError> {
        self.0.blobs().get(key)
    }
}

pub struct Engine {
    store: FsStore,
    audit: AuditLog,
    catalog: SharedCatalog,
    gateway: Arc<Gateway>,
    executor: Arc<dyn Executor>,
    config: EngineConfig,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Engine {
    /// Opens (or creates) the store under `data_dir` and replays learned
    /// issues journaled there onto the default catalog.
    pub fn open(
        data_dir: &Path,
        gateway: Arc<Gateway>,
        executor: Arc<dyn Executor>,
        config: EngineConfig,
    ) -> Result<Engine, ApiError> {
        let store = FsStore::open(data_dir)?;
        let journal = LearnedJournal::new(store.learned_journal_path());
        let base = Catalog::load_default().map_err(|e| ApiError::storage(e.to_string()))?;
        let catalog = journal.replay(base)?;
        let audit = AuditLog::open(store.audit_path())?;
        Ok(Engine {
            store,
            audit,
            catalog: SharedCatalog::new(catalog, Some(journal)),
            gateway,
            executor,
            config,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn store(&self) -> &FsStore {
        &self.store
    }

    pub fn catalog(&self) -> Arc<Catalog> {
        self.catalog.snapshot()
    }

    pub fn audit_events(&self) -> Result<Vec<AuditEvent>, ApiError> {
        self.audit.events()
    }

    fn session_lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().entry(id.to_string()).or_default().clone()
    }

    fn load(&self, id: &str) -> Result<SessionRecord, ApiError> {
        self.store
            .load_session(id)?
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }

    pub fn create_session(&self, bytes: &[u8]) -> Result<SessionView, ApiError> {
        let artifact = ingestion::ingest(bytes, &self.config.pipeline.ingest)?;
        let original_blob = self
            .store
            .blobs()
            .put(&artifact.original_bytes, "application/octet-stream")?;
        let normalized_blob = self
            .store
            .blobs()
            .put(&artifact.normalized_bytes, "image/png")?;
        let record = SessionRecord {
            session_id: random_id("s"),
            artifact,
            original_blob,
            normalized_blob,
            report: None,
            correction: None,
            flags: Vec::new(),
            created_at: Utc::now(),
        };
        self.store.save_session(&record)?;
        self.audit.record(
            &record.session_id,
            AuditStage::Ingest,
            format!(
                "{} {}x{}",
                record.artifact.artifact_id,
                record.artifact.normalized_width_px,
                record.artifact.normalized_height_px
            ),
        );
        Ok(view(&record))
    }

    pub fn session(&self, id: &str) -> Result<SessionView, ApiError> {
        Ok(view(&self.load(id)?))
    }

    /// Runs detection and localization; re-running replaces the report.
    pub fn analyze(&self, id: &str) -> Result<AnalysisReport, ApiError> {
        let lock = self.session_lock(id);
        let _guard = lock.lock();
        let mut record = self.load(id)?;
        let catalog = self.catalog.snapshot();
        let report = analyze_artifact(
            &mut record.artifact,
            &catalog,
            &self.gateway,
            &self.config.pipeline.analysis,
        )?;
        record.report = Some(report.clone());
        self.store.save_session(&record)?;
        self.audit.record(
            id,
            AuditStage::Detect,
            format!(
                "catalog v{}: {} merged findings, {} annotations",
                report.catalog_version,
                report.merged_findings.len(),
                report.annotations.len()
            ),
        );
        Ok(report)
    }

    pub fn report(&self, id: &str) -> Result<AnalysisReport, ApiError> {
        self.load(id)?
            .report
            .ok_or_else(|| ApiError::conflict("analysis pending: call analyze first"))
    }

    /// Stores user-supplied data; later corrections prefer it.
    pub fn upload_dataset(&self, id: &str, text: &str) -> Result<DataTable, ApiError> {
        let lock = self.session_lock(id);
        let _guard = lock.lock();
        let mut record = self.load(id)?;
        let (table, _) =
            DataTable::from_csv(text).map_err(|e| ApiError::validation(e.to_string()))?;
        record
            .correction
            .get_or_insert_with(|| CorrectionSession::new(&record.artifact.artifact_id))
            .uploaded_data = Some(table.clone());
        self.store.save_session(&record)?;
        self.audit.record(
            id,
            AuditStage::Extract,
            format!(
                "uploaded dataset: {} columns, {} rows",
                table.columns.len(),
                table.rows.len()
            ),
        );
        Ok(table)
    }

    fn context<'a>(
        &'a self,
        store: &'a StoreAdapter<'a>,
        reanalyzer: &'a PipelineReanalyzer<'a>,
    ) -> CorrectionContext<'a> {
        CorrectionContext {
            gateway: &self.gateway,
            executor: self.executor.as_ref(),
            store,
            reanalyzer,
            profile: self.config.profile.clone(),
            repair: self.config.repair.clone(),
            inline_threshold: self.config.inline_threshold,
        }
    }

    /// Scores the pipeline over a labelled corpus. Not a session operation,
    /// so nothing is audited.
    pub fn evaluate(
        &self,
        manifest: &Path,
        with_correction: bool,
        averaging: Averaging,
    ) -> Result<CorpusRun, ApiError> {
        let corpus =
            Corpus::load_manifest(manifest).map_err(|e| ApiError::validation(e.to_string()))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let catalog = self.catalog.snapshot();
        let store = StoreAdapter(&self.store);
        let reanalyzer = PipelineReanalyzer {
            gateway: &self.gateway,
            catalog: &catalog,
            ingest: self.config.pipeline.ingest.clone(),
            analysis: self.config.pipeline.analysis.clone(),
        };
        let ctx = self.context(&store, &reanalyzer);
        evaluate_corpus(
            &corpus,
            base,
            &catalog,
            &self.gateway,
            &self.config.pipeline,
            with_correction.then_some(&ctx),
            averaging,
        )
        .map_err(|e| match e {
            PipelineError::Ingest(e) => e.into(),
            PipelineError::Detection(e) => e.into(),
            PipelineError::Io { .. } => ApiError::validation(e.to_string()),
        })
    }

    fn apply_resolutions(&self, record: &mut SessionRecord) {
        let (Some(report), Some(session)) = (record.report.as_mut(), record.correction.as_ref())
        else {
            return;
        };
        for (provider, findings) in report.per_model_findings.iter_mut() {
            if let Some(set) = session.resolved_for(provider) {
                apply_resolution(findings, set);
            }
        }
        if let Some(set) = self
            .gateway
            .route(ModelRole::CodeGenerator)
            .ok()
            .and_then(|p| session.resolved_for(&p))
        {
            apply_resolution(&mut report.merged_findings, set);
        }
    }

    /// One corrected version per provider. Data comes from an upload when
    /// present, otherwise from extraction.
    pub fn correct(&self, id: &str) -> Result<CorrectResponse, ApiError> {
        let lock = self.session_lock(id);
        let _guard = lock.lock();
        let mut record = self.load(id)?;
        let Some(report) = record.report.clone() else {
            return Err(ApiError::conflict("correct requires a completed analysis"));
        };
        let mut session = record
            .correction
            .take()
            .unwrap_or_else(|| CorrectionSession::new(&record.artifact.artifact_id));
        let trigger = match (session.version_count(), session.uploaded_data.is_some()) {
            (0, _) => VersionTrigger::Initial,
            (_, true) => VersionTrigger::DatasetReupload,
            (_, false) => VersionTrigger::Initial,
        };
        let mut warnings = Vec::new();
        if session.effective_data().is_none() {
            let extraction = extract_data(&record.artifact.payload(), &self.gateway)?;
            warnings.extend(extraction.warnings);
            session.extracted_data = Some(extraction.table);
        }
        let catalog = self.catalog.snapshot();
        let store = StoreAdapter(&self.store);
        let reanalyzer = PipelineReanalyzer {
            gateway: &self.gateway,
            catalog: &catalog,
            ingest: self.config.pipeline.ingest.clone(),
            analysis: self.config.pipeline.analysis.clone(),
        };
        let ctx = self.context(&store, &reanalyzer);
        let before: BTreeMap<String, usize> = session
            .versions
            .iter()
            .map(|(p, v)| (p.clone(), v.len()))
            .collect();
        let result = correct_all(
            &mut session,
            &record.artifact,
            &report.merged_findings,
            &ctx,
            trigger,
        );
        let new_versions: Vec<CorrectionVersion> = session
            .versions
            .iter()
            .flat_map(|(p, chain)| chain.iter().skip(before.get(p).copied().unwrap_or(0)))
            .cloned()
            .collect();
        record.correction = Some(session);
        let outcome = result.map_err(ApiError::from);
        if let Ok(w) = &outcome {
            warnings.extend(w.iter().cloned());
            self.apply_resolutions(&mut record);
        }
        self.store.save_session(&record)?;
        self.audit.record(
            id,
            AuditStage::Correct,
            match &outcome {
                Ok(_) => format!("{} new version(s)", new_versions.len()),
                Err(e) => format!("failed: {e}"),
            },
        );
        outcome?;
        Ok(CorrectResponse {
            session_id: id.to_string(),
            versions: new_versions
                .into_iter()
                .map(|v| self.version_view(v))
                .collect(),
            warnings,
        })
    }

    /// Chat refinement of one provider's latest version (default: the code
    /// generator's provider).
    pub fn chat(
        &self,
        id: &str,
        message: &str,
        provider: Option<&str>,
    ) -> Result<VersionView, ApiError> {
        if message.trim().is_empty() {
            return Err(ApiError::validation("chat message is empty"));
        }
        let lock = self.session_lock(id);
        let _guard = lock.lock();
        let mut record = self.load(id)?;
        let Some(report) = record.report.clone() else {
            return Err(ApiError::conflict("chat requires a completed analysis"));
        };
        let provider = match provider {
            Some(p) if self.gateway.config().provider(p).is_some() => p.to_string(),
            Some(p) => return Err(ApiError::validation(format!("unknown provider '{p}'"))),
            None => self.gateway.route(ModelRole::CodeGenerator)?,
        };
        let Some(mut session) = record
            .correction
            .take()
            .filter(|s| s.latest(&provider).is_some())
        else {
            return Err(ApiError::conflict(format!(
                "chat requires a corrected version from {provider}"
            )));
        };
        let catalog = self.catalog.snapshot();
        let store = StoreAdapter(&self.store);
        let reanalyzer = PipelineReanalyzer {
            gateway: &self.gateway,
            catalog: &catalog,
            ingest: self.config.pipeline.ingest.clone(),
            analysis: self.config.pipeline.analysis.clone(),
        };
        let ctx = self.context(&store, &reanalyzer);
        let result = refine(
            &mut session,
            &provider,
            message,
            &report.merged_findings,
            &ctx,
        );
        let version = result
            .as_ref()
            .ok()
            .and_then(|no| session.version(&provider, *no).cloned());
        record.correction = Some(session);
        if result.is_ok() {
            self.apply_resolutions(&mut record);
        }
        self.store.save_session(&record)?;
        self.audit.record(
            id,
            AuditStage::Refine,
            match &result {
                Ok(no) => format!("{provider} version {no}"),
                Err(e) => format!("{provider} refinement failed: {e}"),
            },
        );
        result?;
        Ok(self.version_view(version.expect("refine returned a pushed version")))
    }

    fn version_view(&self, version: CorrectionVersion) -> VersionView {
        let image_status = match &version.rendered_image {
            None => ImageStatus::NotRendered,
            Some(img) => match self.store.blobs().get(&img.blob.key) {
                Ok(Some(_)) => ImageStatus::Available,
                _ => ImageStatus::Missing,
            },
        };
        VersionView {
            version,
            image_status,
        }
    }

    pub fn versions(&self, id: &str) -> Result<VersionsView, ApiError> {
        let record = self.load(id)?;
        let session = record
            .correction
            .unwrap_or_else(|| CorrectionSession::new(&record.artifact.artifact_id));
        Ok(VersionsView {
            session_id: id.to_string(),
            versions: session
                .versions
                .into_iter()
                .map(|(p, chain)| (p, chain.into_iter().map(|v| self.version_view(v)).collect()))
                .collect(),
            chat_history: session.chat_history,
        })
    }

    /// Records a user-identified issue as a pending flag.
    pub fn flag(&self, id: &str, name: &str, explanation: &str) -> Result<FlagRecord, ApiError> {
        if name.trim().is_empty() {
            return Err(ApiError::validation("flag name is empty"));
        }
        let lock = self.session_lock(id);
        let _guard = lock.lock();
        let mut record = self.load(id)?;
        self.catalog.snapshot().check_name_free(name)?;
        let flag = FlagRecord {
            flag_id: random_id("f"),
            session_id: id.to_string(),
            issue: LearnedIssue::pending(name, explanation, id),
            catalog_version: None,
        };
        self.store.save_flag(&flag)?;
        record.flags.push(flag.flag_id.clone());
        self.store.save_session(&record)?;
        self.audit.record(
            id,
            AuditStage::Flag,
            format!("{}: {}", flag.flag_id, flag.issue.name),
        );
        Ok(flag)
    }

    pub fn flags(&self) -> Result<Vec<FlagRecord>, ApiError> {
        self.store.list_flags()
    }

    fn decided_flag(&self, flag_id: &str) -> Result<FlagRecord, ApiError> {
        let flag = self
            .store
            .load_flag(flag_id)?
            .ok_or_else(|| ApiError::not_found(format!("flag {flag_id}")))?;
        if flag.issue.status != LearnedStatus::Pending {
            return Err(ApiError::conflict(format!(
                "AlreadyDecided: flag {flag_id} is {:?}",
                flag.issue.status
            )));
        }
        Ok(flag)
    }

    /// Accepts a flag into the catalog; the version goes up by one.
    pub fn approve(&self, flag_id: &str) -> Result<ApprovalResponse, ApiError> {
        let mut flag = self.decided_flag(flag_id)?;
        let catalog = self.catalog.approve(&flag.issue)?;
        flag.issue.status = LearnedStatus::Approved;
        flag.catalog_version = Some(catalog.version);
        self.store.save_flag(&flag)?;
        self.audit.record(
            &flag.session_id,
            AuditStage::Approve,
            format!("approved {}: catalog v{}", flag.issue.name, catalog.version),
        );
        Ok(ApprovalResponse {
            flag,
            catalog_version: catalog.version,
        })
    }

    pub fn reject(&self, flag_id: &str) -> Result<FlagRecord, ApiError> {
        let mut flag = self.decided_flag(flag_id)?;
        flag.issue.status = LearnedStatus::Rejected;
        self.store.save_flag(&flag)?;
        self.audit.record(
            &flag.session_id,
            AuditStage::Approve,
            format!("rejected {}", flag.issue.name),
        );
        Ok(flag)
    }

    pub fn catalog_info(&self) -> CatalogInfo {
        let catalog = self.catalog.snapshot();
        CatalogInfo {
            version: catalog.version,
            builtin_count: catalog.builtin.len(),
            learned: catalog.learned.clone(),
        }
    }

    pub fn blob(&self, key: &str) -> Result<Vec<u8>, ApiError> {
        if !key.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(ApiError::not_found(format!("blob {key}")));
        }
        self.store
            .blobs()
            .get(key)?
            .ok_or_else(|| ApiError::not_found(format!("blob {key}")))
    }
}

fn view(record: &SessionRecord) -> SessionView {
    SessionView {
        session_id: record.session_id.clone(),
        artifact: record.artifact.clone(),
        analyzed: record.report.is_some(),
        corrected: record
            .correction
            .as_ref()
            .is_some_and(|c| c.version_count() > 0),
        flags: record.flags.clone(),
        created_at: record.created_at,
    }
}
