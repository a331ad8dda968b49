//! Misleading-feature detection against both model backends.
//!
//! Each detector role gets the same chain-of-thought prompt carrying the
//! catalog fragment and answers with a bare list of issue names. Names are
//! canonicalized against the catalog, then a single batched prompt per model
//! assigns severity tiers, explanations and recommendations. Per-model
//! findings are kept side by side and merged into one view.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, GatewayError, ModelRequest, ModelRole};
use crate::ingestion::{ChartType, VisualizationArtifact};
use crate::localization::Annotation;
use crate::taxonomy::{normalize_name, Catalog, Severity};
use crate::Warning;

pub const NO_ISSUES_SENTINEL: &str = "No issues detected";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectionError {
    #[error("detector response is not a list of issue names")]
    UnparseableList,
    #[error("no issues to explain")]
    EmptyIssueRefs,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("every detector failed: {}", .0.join("; "))]
    AllDetectorsFailed(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedIssue {
    pub issue_ref: String,
    pub name: String,
    pub severity: Severity,
    pub explanation: String,
    pub recommendation: String,
    pub source_models: BTreeSet<String>,
    #[serde(default)]
    pub resolved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub artifact_id: String,
    pub catalog_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chart_type: Option<ChartType>,
    pub per_model_findings: BTreeMap<String, Vec<DetectedIssue>>,
    pub merged_findings: Vec<DetectedIssue>,
    /// Names a model reported that the catalog does not know, per provider.
    #[serde(default)]
    pub unknown_issue_names: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    pub warnings: Vec<Warning>,
    /// Stage durations in milliseconds.
    #[serde(default)]
    pub timings: BTreeMap<String, u64>,
}

impl AnalysisReport {
    pub fn merged_issue_refs(&self) -> BTreeSet<String> {
        self.merged_findings
            .iter()
            .map(|f| f.issue_ref.clone())
            .collect()
    }
}

/// The chain-of-thought detection prompt.
pub fn detection_prompt(catalog: &Catalog) -> String {
    format!(
        "You are auditing a data visualization for misleading design. Work through these steps:\n\
(1) Identify the chart type and its elements: axes, labels, legend, marks and title.\n\
(2) Check the axes and scales: baselines, ranges, dual axes and scale consistency.\n\
(3) Check the visual encodings: color, area, 3D effects and whether the chart type fits the data.\n\
(4) Check the context: title, labels, units, sources and whether the data shown supports the message.\n\
(5) List the detected issues.\n\n\
Known issue types:\n{}\n\n\
Return only the names of the identified issues, one per line, using the names above where they apply. \
If nothing is misleading, reply exactly: {NO_ISSUES_SENTINEL}",
        catalog.prompt_fragment()
    )
}

fn strip_list_marker(line: &str) -> (bool, &str) {
    let t = line.trim();
    for bullet in ["- ", "* ", "• ", "– "] {
        if let Some(rest) = t.strip_prefix(bullet) {
            return (true, rest.trim());
        }
    }
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 && digits < 4 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return (true, r.trim());
        }
    }
    if let Some(r) = t.strip_prefix('(') {
        let digits = r.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            if let Some(r) = r[digits..].strip_prefix(") ") {
                return (true, r.trim());
            }
        }
    }
    (false, t)
}

fn clean_name(item: &str) -> String {
    let item = item.replace("**", "").replace('`', "");
    let item = item.trim();
    // "Truncated Axis: y starts at 50" or "Truncated Axis - ..." keep the head.
    let head = item
        .split_once(": ")
        .map(|(h, _)| h)
        .or_else(|| item.split_once(" - ").map(|(h, _)| h))
        .or_else(|| item.split_once(" \u{2014} ").map(|(h, _)| h))
        .unwrap_or(item);
    head.trim()
        .trim_end_matches(['.', ',', ';', ':'])
        .trim()
        .to_string()
}

fn looks_like_prose(line: &str) -> bool {
    let words = line.split_whitespace().count();
    line.ends_with(':') || words > 8 || (words > 4 && line.ends_with('.'))
}

/// Parses a detector response into raw issue names. Returns `None` when
/// the response contains nothing recognizable as a list.
pub fn parse_issue_list(text: &str) -> Option<(Vec<String>, Vec<Warning>)> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .collect();
    let sentinel = normalize_name(NO_ISSUES_SENTINEL);
    if lines.iter().any(|l| normalize_name(l) == sentinel) || normalize_name(text) == sentinel {
        return Some((Vec::new(), Vec::new()));
    }
    let marked: Vec<(bool, &str)> = lines.iter().map(|l| strip_list_marker(l)).collect();
    let any_marked = marked.iter().any(|(m, _)| *m);
    let mut names = Vec::new();
    let mut skipped = 0;
    for (is_marked, body) in marked {
        if body.starts_with('#') {
            skipped += 1;
            continue;
        }
        let keep = if any_marked {
            is_marked
        } else {
            !looks_like_prose(body)
        };
        if !keep {
            skipped += 1;
            continue;
        }
        let name = clean_name(body);
        if !name.is_empty() && !names.contains(&name) {
            names.push(name);
        }
    }
    if names.is_empty() {
        return None;
    }
    let mut warnings = Vec::new();
    if skipped > 0 {
        warnings.push(Warning::new(
            "detection",
            format!("ignored {skipped} non-list line(s) in detector output"),
        ));
    }
    Some((names, warnings))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDetection {
    pub provider_id: String,
    pub names: Vec<String>,
    pub warnings: Vec<Warning>,
}

/// Runs the detection prompt for one role (optionally pinned to a provider).
pub fn detect_issues(
    artifact: &VisualizationArtifact,
    catalog: &Catalog,
    role: ModelRole,
    provider: Option<&str>,
    gateway: &Gateway,
) -> Result<RawDetection, DetectionError> {
    let provider_id = match provider {
        Some(p) => p.to_string(),
        None => gateway.route(role)?,
    };
    let request = ModelRequest::new(role, "detect")
        .user(detection_prompt(catalog))
        .image(artifact.payload());
    let first = gateway.complete_with(&provider_id, &request)?;
    if let Some((names, warnings)) = parse_issue_list(&first.text) {
        return Ok(RawDetection {
            provider_id,
            names,
            warnings,
        });
    }
    let retry = request.assistant(first.text).user(format!(
        "Reply with only the issue names, one per line, or exactly \"{NO_ISSUES_SENTINEL}\"."
    ));
    let second = gateway.complete_with(&provider_id, &retry)?;
    let (names, mut warnings) =
        parse_issue_list(&second.text).ok_or(DetectionError::UnparseableList)?;
    warnings.insert(
        0,
        Warning::new(
            "detection",
            format!("{provider_id}: issue list recovered after a reprompt"),
        ),
    );
    Ok(RawDetection {
        provider_id,
        names,
        warnings,
    })
}

/// Resolves raw names to catalog ids, deduplicating; unknown names are
/// returned separately in first-seen order.
pub fn canonicalize(raw: &[String], catalog: &Catalog) -> (Vec<String>, Vec<String>) {
    let mut refs = Vec::new();
    let mut unknown: Vec<String> = Vec::new();
    let mut seen_unknown = HashSet::new();
    for name in raw {
        match catalog.lookup(name) {
            Some(resolved) => {
                let id = resolved.id().to_string();
                if !refs.contains(&id) {
                    refs.push(id);
                }
            }
            None => {
                if seen_unknown.insert(normalize_name(name)) {
                    unknown.push(name.trim().to_string());
                }
            }
        }
    }
    (refs, unknown)
}

#[derive(Debug, Default, Clone)]
struct Block {
    name: String,
    severity: Option<String>,
    explanation: String,
    recommendation: String,
}

fn parse_blocks(text: &str) -> Vec<Block> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut field: Option<&'static str> = None;
    for raw in text.lines() {
        let line = raw.trim().replace("**", "");
        let line = line.trim_start_matches(['-', '*', '#', ' ']).trim();
        if line.is_empty() {
            continue;
        }
        let lower = line.to_lowercase();
        let take = |key: &str| -> Option<String> {
            lower
                .strip_prefix(key)
                .and_then(|r| r.trim_start().strip_prefix(':'))
                .map(|_| line[line.find(':').unwrap() + 1..].trim().to_string())
        };
        if let Some(v) = take("issue") {
            blocks.push(Block {
                name: v,
                ..Default::default()
            });
            field = None;
        } else if let Some(block) = blocks.last_mut() {
            if let Some(v) = take("severity").or_else(|| take("tier")) {
                block.severity = Some(v);
                field = None;
            } else if let Some(v) = take("explanation") {
                block.explanation = v;
                field = Some("explanation");
            } else if let Some(v) = take("recommendation") {
                block.recommendation = v;
                field = Some("recommendation");
            } else {
                let target = match field {
                    Some("explanation") => &mut block.explanation,
                    Some("recommendation") => &mut block.recommendation,
                    _ => continue,
                };
                if !target.is_empty() {
                    target.push(' ');
                }
                target.push_str(line);
            }
        }
    }
    if !blocks.is_empty() {
        return blocks;
    }
    // One-line form: "Name: Tier, explanation. Recommendation: ..."
    for raw in text.lines() {
        let line = raw.trim().replace("**", "");
        let (_, body) = strip_list_marker(&line);
        let Some((name, rest)) = body.split_once(':') else {
            continue;
        };
        let rest = rest.trim();
        let (head, tail) = rest
            .split_once([',', ';', '.'])
            .map(|(h, t)| (h.trim(), t.trim()))
            .unwrap_or((rest, ""));
        let severity = Severity::parse_loose(head).map(|_| head.to_string());
        let body = if severity.is_some() { tail } else { rest };
        let (explanation, recommendation) = match body.to_lowercase().find("recommendation:") {
            Some(pos) => (
                body[..pos].trim().to_string(),
                body[pos + "recommendation:".len()..].trim().to_string(),
            ),
            None => (body.to_string(), String::new()),
        };
        blocks.push(Block {
            name: name.trim().to_string(),
            severity,
            explanation,
            recommendation,
        });
    }
    blocks
}

fn explain_prompt(names: &[&str]) -> String {
    let list: Vec<String> = names.iter().map(|n| format!("- {n}")).collect();
    format!(
        "For each issue below, as it appears in this chart, give its severity tier \
(Major, Minor or Potential), an explanation grounded in this visualization, and a \
recommendation for fixing it. Use this format for every issue:\n\n\
Issue: <name>\nSeverity: <tier>\nExplanation: <text>\nRecommendation: <text>\n\n\
Issues:\n{}",
        list.join("\n")
    )
}

/// One batched prompt for all issues, with one reprompt for any left
/// unexplained. Gaps that remain are filled from the catalog with warnings.
pub fn categorize_and_explain(
    artifact: &VisualizationArtifact,
    issue_refs: &[String],
    catalog: &Catalog,
    role: ModelRole,
    provider_id: &str,
    gateway: &Gateway,
) -> Result<(Vec<DetectedIssue>, Vec<Warning>), DetectionError> {
    if issue_refs.is_empty() {
        return Err(DetectionError::EmptyIssueRefs);
    }
    let entries: Vec<_> = issue_refs
        .iter()
        .filter_map(|id| catalog.by_id(id))
        .collect();
    let names: Vec<&str> = entries.iter().map(|r| r.name()).collect();
    let request = ModelRequest::new(role, "explain")
        .user(explain_prompt(&names))
        .image(artifact.payload());
    let response = gateway.complete_with(provider_id, &request)?;

    let mut found: BTreeMap<String, Block> = BTreeMap::new();
    let absorb = |text: &str, found: &mut BTreeMap<String, Block>| {
        for block in parse_blocks(text) {
            if let Some(resolved) = catalog.lookup(&block.name) {
                let id = resolved.id().to_string();
                if issue_refs.contains(&id) {
                    let entry = found.entry(id).or_default();
                    if entry.severity.is_none() {
                        entry.severity = block.severity;
                    }
                    if entry.explanation.is_empty() {
                        entry.explanation = block.explanation;
                    }
                    if entry.recommendation.is_empty() {
                        entry.recommendation = block.recommendation;
                    }
                }
            }
        }
    };
    absorb(&response.text, &mut found);

    let incomplete = |found: &BTreeMap<String, Block>| -> Vec<String> {
        issue_refs
            .iter()
            .filter(|id| {
                found
                    .get(*id)
                    .is_none_or(|b| b.explanation.is_empty() || b.recommendation.is_empty())
            })
            .cloned()
            .collect()
    };
    let missing = incomplete(&found);
    if !missing.is_empty() {
        let missing_names: Vec<&str> = missing
            .iter()
            .filter_map(|id| catalog.by_id(id).map(|r| r.name()))
            .collect();
        let retry = request
            .assistant(response.text)
            .user(format!(
                "Some issues are missing an explanation or recommendation. Answer again in the same format for only these issues:\n{}",
                missing_names.iter().map(|n| format!("- {n}")).collect::<Vec<_>>().join("\n")
            ));
        let second = gateway.complete_with(provider_id, &retry)?;
        absorb(&second.text, &mut found);
    }

    let mut warnings = Vec::new();
    let mut issues = Vec::new();
    for resolved in entries {
        let id = resolved.id().to_string();
        let block = found.remove(&id).unwrap_or_default();
        let severity = match block.severity.as_deref().and_then(Severity::parse_loose) {
            Some(s) => s,
            None => {
                let fallback = resolved.default_severity().unwrap_or(Severity::Potential);
                warnings.push(Warning::new(
                    "detection",
                    format!(
                        "{provider_id}: no severity for '{}', using default {fallback}",
                        resolved.name()
                    ),
                ));
                fallback
            }
        };
        let mut explanation = block.explanation;
        let mut recommendation = block.recommendation;
        if explanation.is_empty() || recommendation.is_empty() {
            warnings.push(Warning::new(
                "detection",
                format!(
                    "{provider_id}: partial explanation for '{}', filled from the catalog",
                    resolved.name()
                ),
            ));
            if explanation.is_empty() {
                explanation = resolved.description().to_string();
            }
            if recommendation.is_empty() {
                recommendation = format!("Revise the chart to remove: {}", resolved.name());
            }
        }
        issues.push(DetectedIssue {
            issue_ref: id,
            name: resolved.name().to_string(),
            severity,
            explanation,
            recommendation,
            source_models: BTreeSet::from([provider_id.to_string()]),
            resolved: false,
            annotation_ref: None,
        });
    }
    Ok((issues, warnings))
}

/// Deterministic order for finding lists: most severe first, then by id.
pub fn sort_findings(findings: &mut [DetectedIssue]) {
    findings.sort_by(|a, b| {
        b.severity
            .cmp(&a.severity)
            .then_with(|| a.issue_ref.cmp(&b.issue_ref))
    });
}

/// Union keyed by issue id. Severity is the max across sources; the
/// explanation follows the most severe source, ties going to `primary`.
pub fn merge_findings(
    per_model: &BTreeMap<String, Vec<DetectedIssue>>,
    primary: &str,
) -> Vec<DetectedIssue> {
    let mut providers: Vec<&String> = per_model.keys().collect();
    // Primary first so that it wins ties under the strict comparison below.
    providers.sort_by_key(|p| (p.as_str() != primary, p.as_str()));
    let mut merged: BTreeMap<String, DetectedIssue> = BTreeMap::new();
    for provider in providers {
        for finding in &per_model[provider] {
            match merged.get_mut(&finding.issue_ref) {
                None => {
                    merged.insert(finding.issue_ref.clone(), finding.clone());
                }
                Some(existing) => {
                    if finding.severity > existing.severity {
                        existing.severity = finding.severity;
                        existing.explanation = finding.explanation.clone();
                        existing.recommendation = finding.recommendation.clone();
                    }
                    existing
                        .source_models
                        .extend(finding.source_models.iter().cloned());
                }
            }
        }
    }
    let mut out: Vec<DetectedIssue> = merged.into_values().collect();
    for f in &mut out {
        f.resolved = false;
        f.annotation_ref = None;
    }
    sort_findings(&mut out);
    out
}

/// Two-list form of [`merge_findings`].
pub fn merge_dual(
    a: (&str, &[DetectedIssue]),
    b: (&str, &[DetectedIssue]),
    primary: &str,
) -> Vec<DetectedIssue> {
    let mut per_model = BTreeMap::new();
    per_model.insert(a.0.to_string(), a.1.to_vec());
    per_model
        .entry(b.0.to_string())
        .or_insert_with(Vec::new)
        .extend_from_slice(b.1);
    merge_findings(&per_model, primary)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Provider whose explanation wins severity ties in the merged view.
    /// Defaults to the contextual detector's provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_detector: Option<String>,
}

struct DetectorOutcome {
    provider_id: String,
    findings: Vec<DetectedIssue>,
    unknown: Vec<String>,
    warnings: Vec<Warning>,
    elapsed_ms: u64,
}

fn run_detector(
    artifact: &VisualizationArtifact,
    catalog: &Catalog,
    role: ModelRole,
    provider_id: &str,
    gateway: &Gateway,
) -> Result<DetectorOutcome, DetectionError> {
    let start = Instant::now();
    let raw = detect_issues(artifact, catalog, role, Some(provider_id), gateway)?;
    let (refs, unknown) = canonicalize(&raw.names, catalog);
    let mut warnings = raw.warnings;
    if !unknown.is_empty() {
        warnings.push(Warning::new(
            "detection",
            format!(
                "{provider_id}: unrecognized issue names: {}",
                unknown.join(", ")
            ),
        ));
    }
    let mut findings = Vec::new();
    if !refs.is_empty() {
        let (issues, w) =
            categorize_and_explain(artifact, &refs, catalog, role, provider_id, gateway)?;
        findings = issues;
        warnings.extend(w);
    }
    sort_findings(&mut findings);
    Ok(DetectorOutcome {
        provider_id: provider_id.to_string(),
        findings,
        unknown,
        warnings,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

/// Runs both detector roles concurrently and merges their findings. Fails
/// only when every detector fails.
pub fn analyze(
    artifact: &VisualizationArtifact,
    catalog: &Catalog,
    gateway: &Gateway,
    config: &AnalysisConfig,
) -> Result<AnalysisReport, DetectionError> {
    let mut warnings = artifact.warnings.clone();
    let mut detectors: Vec<(ModelRole, String)> = Vec::new();
    let mut errors = Vec::new();
    for role in [ModelRole::StructuralDetector, ModelRole::ContextualDetector] {
        match gateway.route(role) {
            Ok(p) if detectors.iter().any(|(_, q)| *q == p) => {}
            Ok(p) => detectors.push((role, p)),
            Err(e) => {
                warnings.push(Warning::new("detection", e.to_string()));
                errors.push(e.to_string());
            }
        }
    }
    let outcomes: Vec<(String, Result<DetectorOutcome, DetectionError>)> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = detectors
                .iter()
                .map(|(role, provider)| {
                    let handle = scope
                        .spawn(move || run_detector(artifact, catalog, *role, provider, gateway));
                    (provider.clone(), handle)
                })
                .collect();
            handles
                .into_iter()
                .map(|(p, h)| (p, h.join().expect("detector thread panicked")))
                .collect()
        });

    let mut per_model = BTreeMap::new();
    let mut unknown_issue_names = BTreeMap::new();
    let mut timings = BTreeMap::new();
    for (provider, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                warnings.extend(o.warnings);
                timings.insert(format!("detect:{}", o.provider_id), o.elapsed_ms);
                if !o.unknown.is_empty() {
                    unknown_issue_names.insert(o.provider_id.clone(), o.unknown);
                }
                per_model.insert(o.provider_id, o.findings);
            }
            Err(e) => {
                warnings.push(Warning::new(
                    "detection",
                    format!("detector {provider} failed: {e}"),
                ));
                errors.push(format!("{provider}: {e}"));
            }
        }
    }
    if per_model.is_empty() {
        return Err(DetectionError::AllDetectorsFailed(errors));
    }
    let primary = config
        .primary_detector
        .clone()
        .or_else(|| gateway.route(ModelRole::ContextualDetector).ok())
        .unwrap_or_default();
    let merged_findings = merge_findings(&per_model, &primary);
    Ok(AnalysisReport {
        artifact_id: artifact.artifact_id.clone(),
        catalog_version: catalog.version,
        chart_type: artifact.chart_type,
        per_model_findings: per_model,
        merged_findings,
        unknown_issue_names,
        annotations: Vec::new(),
        warnings,
        timings,
    })
}
