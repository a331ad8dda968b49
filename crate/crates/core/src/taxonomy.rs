//! Issue taxonomy and user-taught knowledge base.
//!
//! The catalog holds the 74 builtin misleading-visualization issues plus any
//! learned issues users have flagged and approved. It is read on every
//! detection call (as a prompt fragment) and when canonicalizing model output
//! back into stable issue ids.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

/// Number of builtin taxonomy entries every catalog must carry.
pub const BUILTIN_ISSUE_COUNT: usize = 74;

/// The catalog shipped with the crate.
pub const DEFAULT_CATALOG: &str = include_str!("../catalog/default.toml");

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("malformed catalog: {0}")]
    MalformedCatalog(String),
    #[error("catalog must contain exactly {expected} builtin issues, found {found}")]
    CardinalityError { expected: usize, found: usize },
    #[error("duplicate catalog entry: {0}")]
    DuplicateEntry(String),
    #[error("learned issue name '{0}' collides with an existing catalog entry")]
    NameCollision(String),
    #[error("learned issue '{0}' has already been decided")]
    AlreadyDecided(String),
    #[error("learned-issue journal: {0}")]
    Journal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IssueClass {
    Structural,
    Contextual,
}

/// Severity tier. Ordering is `Potential < Minor < Major`, so `max` picks the
/// more severe tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Potential,
    Minor,
    Major,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Major, Severity::Minor, Severity::Potential];

    /// Lattice join used when two sources disagree.
    pub fn merge(self, other: Severity) -> Severity {
        self.max(other)
    }

    pub fn label(self) -> &'static str {
        match self {
            Severity::Major => "Major",
            Severity::Minor => "Minor",
            Severity::Potential => "Potential",
        }
    }

    /// Parses a tier from free text ("major issue", "MINOR", "potential concern").
    pub fn parse_loose(text: &str) -> Option<Severity> {
        let lower = text.to_ascii_lowercase();
        let mut best: Option<(usize, Severity)> = None;
        for (word, tier) in [
            ("major", Severity::Major),
            ("minor", Severity::Minor),
            ("potential", Severity::Potential),
        ] {
            if let Some(pos) = lower.find(word) {
                if best.is_none_or(|(p, _)| pos < p) {
                    best = Some((pos, tier));
                }
            }
        }
        best.map(|(_, tier)| tier)
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueDefinition {
    pub id: String,
    pub name: String,
    #[serde(rename = "class")]
    pub issue_class: IssueClass,
    #[serde(rename = "severity")]
    pub default_severity: Severity,
    pub description: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnedStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedIssue {
    pub id: String,
    pub name: String,
    pub exemplar_explanation: String,
    pub source_session: String,
    pub status: LearnedStatus,
    pub created_at: DateTime<Utc>,
}

impl LearnedIssue {
    /// A fresh pending flag. The id is derived from the name so the same
    /// issue flagged twice maps to the same catalog slot.
    pub fn pending(name: &str, explanation: &str, source_session: &str) -> Self {
        LearnedIssue {
            id: format!("learned-{}", slugify(name)),
            name: name.trim().to_string(),
            exemplar_explanation: explanation.trim().to_string(),
            source_session: source_session.to_string(),
            status: LearnedStatus::Pending,
            created_at: Utc::now(),
        }
    }
}

/// Result of resolving a surface name against the catalog.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resolved<'a> {
    Builtin(&'a IssueDefinition),
    Learned(&'a LearnedIssue),
}

impl<'a> Resolved<'a> {
    pub fn id(&self) -> &'a str {
        match self {
            Resolved::Builtin(d) => &d.id,
            Resolved::Learned(l) => &l.id,
        }
    }

    pub fn name(&self) -> &'a str {
        match self {
            Resolved::Builtin(d) => &d.name,
            Resolved::Learned(l) => &l.name,
        }
    }

    pub fn issue_class(&self) -> Option<IssueClass> {
        match self {
            Resolved::Builtin(d) => Some(d.issue_class),
            Resolved::Learned(_) => None,
        }
    }

    /// Learned issues carry no default tier.
    pub fn default_severity(&self) -> Option<Severity> {
        match self {
            Resolved::Builtin(d) => Some(d.default_severity),
            Resolved::Learned(_) => None,
        }
    }

    pub fn description(&self) -> &'a str {
        match self {
            Resolved::Builtin(d) => &d.description,
            Resolved::Learned(l) => &l.exemplar_explanation,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CatalogDocument {
    #[serde(rename = "issue", default)]
    issues: Vec<IssueDefinition>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u64,
    pub builtin: Vec<IssueDefinition>,
    #[serde(default)]
    pub learned: Vec<LearnedIssue>,
    #[serde(skip)]
    index: HashMap<String, Slot>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Builtin(usize),
    Learned(usize),
}

/// Lowercase and drop every non-alphanumeric character.
pub fn normalize_name(text: &str) -> String {
    text.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// `"Simpson's Paradox"` -> `"simpsons-paradox"`.
pub fn slugify(name: &str) -> String {
    let mut slug = String::new();
    let mut pending_dash = false;
    for c in name.chars() {
        if c == '\'' || c == '\u{2019}' {
            continue;
        }
        if c.is_alphanumeric() {
            if pending_dash && !slug.is_empty() {
                slug.push('-');
            }
            pending_dash = false;
            slug.extend(c.to_lowercase());
        } else {
            pending_dash = true;
        }
    }
    slug
}

impl Catalog {
    pub fn load_default() -> Result<Catalog, CatalogError> {
        Catalog::load(DEFAULT_CATALOG)
    }

    pub fn load_file(path: &Path) -> Result<Catalog, CatalogError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CatalogError::MalformedCatalog(format!("{}: {e}", path.display())))?;
        Catalog::load(&text)
    }

    /// Parses and validates a catalog document.
    pub fn load(source: &str) -> Result<Catalog, CatalogError> {
        let doc: CatalogDocument =
            toml::from_str(source).map_err(|e| CatalogError::MalformedCatalog(e.to_string()))?;
        if doc.issues.len() != BUILTIN_ISSUE_COUNT {
            return Err(CatalogError::CardinalityError {
                expected: BUILTIN_ISSUE_COUNT,
                found: doc.issues.len(),
            });
        }
        let mut catalog = Catalog {
            version: 1,
            builtin: doc.issues,
            learned: Vec::new(),
            index: HashMap::new(),
        };
        catalog.rebuild_index()?;
        Ok(catalog)
    }

    fn rebuild_index(&mut self) -> Result<(), CatalogError> {
        let mut index = HashMap::new();
        let mut ids = std::collections::HashSet::new();
        for (i, def) in self.builtin.iter().enumerate() {
            if def.id.trim().is_empty() || def.name.trim().is_empty() {
                return Err(CatalogError::MalformedCatalog(format!(
                    "entry {i} has an empty id or name"
                )));
            }
            if !ids.insert(def.id.clone()) {
                return Err(CatalogError::DuplicateEntry(def.id.clone()));
            }
            for surface in std::iter::once(&def.name).chain(def.aliases.iter()) {
                let key = normalize_name(surface);
                if key.is_empty() {
                    return Err(CatalogError::MalformedCatalog(format!(
                        "'{surface}' normalizes to nothing"
                    )));
                }
                match index.get(&key) {
                    Some(Slot::Builtin(j)) if *j == i => {}
                    Some(_) => return Err(CatalogError::DuplicateEntry(surface.clone())),
                    None => {
                        index.insert(key, Slot::Builtin(i));
                    }
                }
            }
        }
        for (i, learned) in self.learned.iter().enumerate() {
            if learned.status != LearnedStatus::Approved {
                continue;
            }
            if !ids.insert(learned.id.clone()) {
                return Err(CatalogError::DuplicateEntry(learned.id.clone()));
            }
            let key = normalize_name(&learned.name);
            if index.insert(key, Slot::Learned(i)).is_some() {
                return Err(CatalogError::NameCollision(learned.name.clone()));
            }
        }
        self.index = index;
        Ok(())
    }

    /// Case-, whitespace- and punctuation-insensitive lookup over names and
    /// aliases of builtin issues and approved learned issues.
    pub fn lookup(&self, surface_name: &str) -> Option<Resolved<'_>> {
        let key = normalize_name(surface_name);
        match self.index.get(&key)? {
            Slot::Builtin(i) => Some(Resolved::Builtin(&self.builtin[*i])),
            Slot::Learned(i) => Some(Resolved::Learned(&self.learned[*i])),
        }
    }

    /// Resolves a canonical issue id (not a surface name).
    pub fn by_id(&self, id: &str) -> Option<Resolved<'_>> {
        if let Some(def) = self.builtin.iter().find(|d| d.id == id) {
            return Some(Resolved::Builtin(def));
        }
        self.learned
            .iter()
            .find(|l| l.id == id && l.status == LearnedStatus::Approved)
            .map(Resolved::Learned)
    }

    pub fn approved_learned(&self) -> impl Iterator<Item = &LearnedIssue> {
        self.learned
            .iter()
            .filter(|l| l.status == LearnedStatus::Approved)
    }

    /// Accepts a pending learned issue into the catalog, bumping the version.
    pub fn approve_learned(&self, issue: &LearnedIssue) -> Result<Catalog, CatalogError> {
        if issue.status != LearnedStatus::Pending || self.learned.iter().any(|l| l.id == issue.id) {
            return Err(CatalogError::AlreadyDecided(issue.id.clone()));
        }
        let key = normalize_name(&issue.name);
        if key.is_empty() || self.index.contains_key(&key) {
            return Err(CatalogError::NameCollision(issue.name.clone()));
        }
        let mut next = self.clone();
        let mut approved = issue.clone();
        approved.status = LearnedStatus::Approved;
        next.learned.push(approved);
        next.version += 1;
        next.rebuild_index()?;
        Ok(next)
    }

    /// Checks whether a name would collide without approving anything.
    pub fn check_name_free(&self, name: &str) -> Result<(), CatalogError> {
        let key = normalize_name(name);
        if key.is_empty() || self.index.contains_key(&key) {
            Err(CatalogError::NameCollision(name.to_string()))
        } else {
            Ok(())
        }
    }

    /// Deterministic catalog listing: one line per builtin issue ordered by
    /// id, then one line per approved learned issue ordered by id.
    pub fn prompt_fragment(&self) -> String {
        let mut builtin: Vec<&IssueDefinition> = self.builtin.iter().collect();
        builtin.sort_by(|a, b| a.id.cmp(&b.id));
        let mut learned: Vec<&LearnedIssue> = self.approved_learned().collect();
        learned.sort_by(|a, b| a.id.cmp(&b.id));

        let mut out = String::new();
        for def in builtin {
            out.push_str(&format!("- {}: {}\n", def.name, one_line(&def.description)));
        }
        for l in learned {
            out.push_str(&format!(
                "- {} (user-taught): {}\n",
                l.name,
                one_line(&l.exemplar_explanation)
            ));
        }
        out
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Free-function form used by callers that hold a catalog by reference.
pub fn catalog_prompt_fragment(catalog: &Catalog) -> String {
    catalog.prompt_fragment()
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalRecord {
    catalog_version: u64,
    issue: LearnedIssue,
}

/// Append-only JSON-lines journal of approved learned issues.
#[derive(Debug, Clone)]
pub struct LearnedJournal {
    path: PathBuf,
}

impl LearnedJournal {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        LearnedJournal { path: path.into() }
    }

    pub fn append(&self, catalog_version: u64, issue: &LearnedIssue) -> Result<(), CatalogError> {
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent).map_err(|e| CatalogError::Journal(e.to_string()))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| CatalogError::Journal(e.to_string()))?;
        let record = JournalRecord {
            catalog_version,
            issue: issue.clone(),
        };
        let line =
            serde_json::to_string(&record).map_err(|e| CatalogError::Journal(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| CatalogError::Journal(e.to_string()))?;
        file.sync_data()
            .map_err(|e| CatalogError::Journal(e.to_string()))
    }

    /// Re-applies journaled approvals on top of a freshly loaded catalog.
    pub fn replay(&self, mut catalog: Catalog) -> Result<Catalog, CatalogError> {
        let file = match fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(catalog),
            Err(e) => return Err(CatalogError::Journal(e.to_string())),
        };
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| CatalogError::Journal(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: JournalRecord =
                serde_json::from_str(&line).map_err(|e| CatalogError::Journal(e.to_string()))?;
            let mut pending = record.issue;
            pending.status = LearnedStatus::Pending;
            catalog = catalog.approve_learned(&pending)?;
            if catalog.version != record.catalog_version {
                return Err(CatalogError::Journal(format!(
                    "journal expects version {} but replay reached {}",
                    record.catalog_version, catalog.version
                )));
            }
        }
        Ok(catalog)
    }
}

/// Shared catalog handle: many readers see a consistent snapshot, approvals
/// go through one writer.
#[derive(Debug, Clone)]
pub struct SharedCatalog {
    current: Arc<RwLock<Arc<Catalog>>>,
    writer: Arc<Mutex<Option<LearnedJournal>>>,
}

impl SharedCatalog {
    pub fn new(catalog: Catalog, journal: Option<LearnedJournal>) -> Self {
        SharedCatalog {
            current: Arc::new(RwLock::new(Arc::new(catalog))),
            writer: Arc::new(Mutex::new(journal)),
        }
    }

    pub fn snapshot(&self) -> Arc<Catalog> {
        self.current.read().clone()
    }

    pub fn approve(&self, issue: &LearnedIssue) -> Result<Arc<Catalog>, CatalogError> {
        let journal = self.writer.lock();
        let next = Arc::new(self.snapshot().approve_learned(issue)?);
        if let Some(journal) = journal.as_ref() {
            let approved = next
                .learned
                .last()
                .expect("approval appends a learned issue");
            journal.append(next.version, approved)?;
        }
        *self.current.write() = next.clone();
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default() -> Catalog {
        Catalog::load_default().unwrap()
    }

    fn doc_without_last_entry() -> String {
        let idx = DEFAULT_CATALOG.rfind("[[issue]]").unwrap();
        DEFAULT_CATALOG[..idx].to_string()
    }

    #[test]
    fn default_catalog_has_74_builtin_and_no_learned() {
        let c = default();
        assert_eq!(c.builtin.len(), 74);
        assert!(c.learned.is_empty());
        assert_eq!(c.version, 1);
    }

    #[test]
    fn shipped_ids_are_slugs_of_names() {
        for def in &default().builtin {
            assert_eq!(def.id, slugify(&def.name), "{}", def.name);
        }
    }

    #[test]
    fn seventy_three_entries_is_a_cardinality_error() {
        let err = Catalog::load(&doc_without_last_entry()).unwrap_err();
        assert!(matches!(
            err,
            CatalogError::CardinalityError {
                expected: 74,
                found: 73
            }
        ));
    }

    #[test]
    fn case_variant_names_are_duplicates() {
        let mut doc = doc_without_last_entry();
        doc.push_str(
            "[[issue]]\nid = \"truncated-axis-2\"\nname = \"truncated axis\"\nclass = \"structural\"\nseverity = \"major\"\ndescription = \"dup\"\n",
        );
        assert!(matches!(
            Catalog::load(&doc).unwrap_err(),
            CatalogError::DuplicateEntry(_)
        ));
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(
            Catalog::load("[[issue]\nnot toml").unwrap_err(),
            CatalogError::MalformedCatalog(_)
        ));
    }

    #[test]
    fn lookup_table_three_and_alias_normalization() {
        let c = default();
        let hit = c.lookup("Truncated Axis").unwrap();
        assert_eq!(hit.issue_class(), Some(IssueClass::Structural));
        assert_eq!(c.lookup("  dual-axis ").unwrap().name(), "Dual Axis");
        assert!(c.lookup("Totally Novel Misleader").is_none());
        // Every top-level row resolves with its class.
        for (name, class) in [
            ("Truncated Axis", IssueClass::Structural),
            ("3D Effects", IssueClass::Structural),
            ("Dual Axis", IssueClass::Structural),
            ("Missing Title", IssueClass::Structural),
            ("Missing Axis Labels", IssueClass::Structural),
            ("Inappropriate Color Use", IssueClass::Structural),
            ("Inconsistent Scale", IssueClass::Structural),
            ("Selective Data Presentation", IssueClass::Contextual),
            ("Data Manipulation", IssueClass::Contextual),
            ("Misrepresentation of Findings", IssueClass::Contextual),
        ] {
            assert_eq!(c.lookup(name).unwrap().issue_class(), Some(class), "{name}");
        }
    }

    #[test]
    fn tier_exemplars_have_their_defaults() {
        let c = default();
        let sev = |n: &str| c.lookup(n).unwrap().default_severity().unwrap();
        assert_eq!(sev("truncated axes"), Severity::Major);
        assert_eq!(sev("misleading color encodings"), Severity::Major);
        assert_eq!(sev("fabricated data"), Severity::Major);
        assert_eq!(sev("missing titles"), Severity::Minor);
        assert_eq!(sev("inconsistent label formatting"), Severity::Minor);
        assert_eq!(sev("specialized encoding choices"), Severity::Potential);
        assert_eq!(sev("technical terminology"), Severity::Potential);
        assert_eq!(sev("Dual Axis"), Severity::Potential);
    }

    #[test]
    fn every_alias_resolves_to_its_own_entry() {
        let c = default();
        for def in &c.builtin {
            for alias in &def.aliases {
                assert_eq!(c.lookup(alias).unwrap().id(), def.id, "{alias}");
            }
        }
    }

    #[test]
    fn approving_adds_line_and_bumps_version() {
        let c = default();
        let flag = LearnedIssue::pending(
            "Misrepresentation",
            "Figures compared between elements that are not comparable.",
            "s1",
        );
        let next = c.approve_learned(&flag).unwrap();
        assert_eq!(next.version, c.version + 1);
        let fragment = next.prompt_fragment();
        assert_eq!(fragment.lines().count(), 75);
        assert!(fragment
            .lines()
            .last()
            .unwrap()
            .starts_with("- Misrepresentation"));
        assert_eq!(
            next.lookup("misrepresentation").unwrap().id(),
            "learned-misrepresentation"
        );
    }

    #[test]
    fn learned_name_collision_and_double_decision() {
        let c = default();
        let clash = LearnedIssue::pending("Truncated Axis", "x", "s1");
        assert!(matches!(
            c.approve_learned(&clash).unwrap_err(),
            CatalogError::NameCollision(_)
        ));
        let flag = LearnedIssue::pending("Novel Thing", "x", "s1");
        let next = c.approve_learned(&flag).unwrap();
        assert!(matches!(
            next.approve_learned(&flag).unwrap_err(),
            CatalogError::AlreadyDecided(_)
        ));
        let mut approved = flag.clone();
        approved.status = LearnedStatus::Approved;
        assert!(matches!(
            c.approve_learned(&approved).unwrap_err(),
            CatalogError::AlreadyDecided(_)
        ));
    }

    #[test]
    fn pending_learned_issues_are_not_in_prompts() {
        let mut c = default();
        c.learned.push(LearnedIssue::pending("Sneaky", "x", "s"));
        c.rebuild_index().unwrap();
        assert_eq!(c.prompt_fragment().lines().count(), 74);
        assert!(c.lookup("Sneaky").is_none());
    }

    #[test]
    fn fragment_is_byte_stable_and_sorted_by_id() {
        let c = default();
        assert_eq!(c.prompt_fragment(), c.prompt_fragment());
        let mut ids: Vec<&str> = c.builtin.iter().map(|d| d.id.as_str()).collect();
        ids.sort();
        let first = c.by_id(ids[0]).unwrap().name();
        assert!(c.prompt_fragment().starts_with(&format!("- {first}:")));
    }

    #[test]
    fn journal_replay_restores_approvals() {
        let dir = tempfile::tempdir().unwrap();
        let journal = LearnedJournal::new(dir.path().join("learned.jsonl"));
        let shared = SharedCatalog::new(default(), Some(journal.clone()));
        shared
            .approve(&LearnedIssue::pending("Novel Misleader", "x", "s"))
            .unwrap();
        shared
            .approve(&LearnedIssue::pending("Another One", "y", "s"))
            .unwrap();
        let restored = journal.replay(default()).unwrap();
        assert_eq!(restored.version, 3);
        assert_eq!(
            restored.prompt_fragment(),
            shared.snapshot().prompt_fragment()
        );
    }

    #[test]
    fn severity_parse_loose_takes_first_tier_word() {
        assert_eq!(Severity::parse_loose("MAJOR issue"), Some(Severity::Major));
        assert_eq!(
            Severity::parse_loose("minor, not major"),
            Some(Severity::Minor)
        );
        assert_eq!(Severity::parse_loose("unclear"), None);
    }
}
