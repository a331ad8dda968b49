//! Scoring against gold-labeled corpora.
//!
//! Detection counts are pooled (micro-averaged) at the issue level. A
//! metric whose denominator is empty is reported as absent (`None`), with
//! one exception: precision with no predictions but missed gold issues is 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ingestion::ChartType;
use crate::localization::{hit_test, Annotation, PercentRect};
use crate::taxonomy::{Catalog, IssueClass, Severity};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("prediction for unknown artifact '{0}'")]
    UnknownArtifact(String),
    #[error("invalid gold label for '{0}': {1}")]
    InvalidLabel(String, String),
    #[error("corpus io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementClass {
    Axis,
    Text,
    Color,
    DataMark,
}

impl ElementClass {
    pub const ALL: [ElementClass; 4] = [
        ElementClass::Axis,
        ElementClass::Text,
        ElementClass::Color,
        ElementClass::DataMark,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ElementClass::Axis => "axis",
            ElementClass::Text => "text",
            ElementClass::Color => "color",
            ElementClass::DataMark => "data-mark",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldIssue {
    pub issue_ref: String,
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_class: Option<ElementClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<PercentRect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub artifact_id: String,
    /// Image path relative to the manifest.
    pub image: String,
    pub chart_type: ChartType,
    #[serde(default)]
    pub gold_issues: Vec<GoldIssue>,
    pub is_misleading: bool,
}

impl GoldLabel {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.is_misleading == self.gold_issues.is_empty() {
            return Err(EvalError::InvalidLabel(
                self.artifact_id.clone(),
                "is_misleading must equal gold_issues being non-empty".into(),
            ));
        }
        let ids: BTreeSet<&str> = self
            .gold_issues
            .iter()
            .map(|g| g.issue_ref.as_str())
            .collect();
        if ids.len() != self.gold_issues.len() {
            return Err(EvalError::InvalidLabel(
                self.artifact_id.clone(),
                "duplicate gold issue".into(),
            ));
        }
        Ok(())
    }

    pub fn gold(&self, issue_ref: &str) -> Option<&GoldIssue> {
        self.gold_issues.iter().find(|g| g.issue_ref == issue_ref)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub labels: Vec<GoldLabel>,
}

impl Corpus {
    pub fn new(labels: Vec<GoldLabel>) -> Result<Corpus, EvalError> {
        let mut seen = BTreeSet::new();
        for l in &labels {
            l.validate()?;
            if !seen.insert(l.artifact_id.clone()) {
                return Err(EvalError::InvalidLabel(
                    l.artifact_id.clone(),
                    "duplicate artifact".into(),
                ));
            }
        }
        Ok(Corpus { labels })
    }

    /// Loads a JSON-lines manifest, one gold label per line.
    pub fn load_manifest(path: &Path) -> Result<Corpus, EvalError> {
        let text = fs::read_to_string(path)
            .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            labels.push(
                serde_json::from_str(line).map_err(|e| {
                    EvalError::InvalidLabel(format!("line {}", n + 1), e.to_string())
                })?,
            );
        }
        Corpus::new(labels)
    }

    pub fn get(&self, artifact_id: &str) -> Option<&GoldLabel> {
        self.labels.iter().find(|l| l.artifact_id == artifact_id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> Option<f64> {
        match self.tp + self.fp {
            0 if self.fn_ > 0 => Some(0.0),
            0 => None,
            d => Some(self.tp as f64 / d as f64),
        }
    }

    pub fn recall(&self) -> Option<f64> {
        match self.tp + self.fn_ {
            0 => None,
            d => Some(self.tp as f64 / d as f64),
        }
    }

    pub fn metrics(&self) -> Prf {
        let precision = self.precision();
        let recall = self.recall();
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Row grouping used for chart-type tables. Map, heatmap and area charts
/// fold into `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartStratum {
    Bar,
    Line,
    PieDonut,
    Scatter,
    Other,
}

impl ChartStratum {
    pub const ORDER: [ChartStratum; 5] = [
        ChartStratum::Bar,
        ChartStratum::Line,
        ChartStratum::PieDonut,
        ChartStratum::Scatter,
        ChartStratum::Other,
    ];

    pub fn of(chart_type: ChartType) -> ChartStratum {
        match chart_type {
            ChartType::Bar => ChartStratum::Bar,
            ChartType::Line => ChartStratum::Line,
            ChartType::PieDonut => ChartStratum::PieDonut,
            ChartType::Scatter => ChartStratum::Scatter,
            ChartType::Map | ChartType::Heatmap | ChartType::Area | ChartType::Other => {
                ChartStratum::Other
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ChartStratum::Bar => "Bar Charts",
            ChartStratum::Line => "Line Charts",
            ChartStratum::PieDonut => "Pie/Donut Charts",
            ChartStratum::Scatter => "Scatterplots",
            ChartStratum::Other => "Other Chart Types",
        }
    }
}

/// Issue categories reported individually; everything else is grouped by
/// class.
pub const REPORTED_CATEGORIES: [&str; 10] = [
    "truncated-axis",
    "3d-effects",
    "dual-axis",
    "missing-title",
    "missing-axis-labels",
    "inappropriate-color-use",
    "inconsistent-scale",
    "selective-data-presentation",
    "data-manipulation",
    "misrepresentation-of-findings",
];

pub const OTHER_STRUCTURAL: &str = "other structural";
pub const OTHER_CONTEXTUAL: &str = "other contextual";

/// Category row for an issue id. Learned and unknown ids count as contextual.
pub fn issue_category(issue_ref: &str, catalog: &Catalog) -> String {
    if REPORTED_CATEGORIES.contains(&issue_ref) {
        return issue_ref.to_string();
    }
    match catalog.by_id(issue_ref).and_then(|r| r.issue_class()) {
        Some(IssueClass::Structural) => OTHER_STRUCTURAL.into(),
        _ => OTHER_CONTEXTUAL.into(),
    }
}

fn category_order() -> Vec<String> {
    REPORTED_CATEGORIES
        .iter()
        .map(|s| s.to_string())
        .chain([OTHER_STRUCTURAL.to_string(), OTHER_CONTEXTUAL.to_string()])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub stratum: String,
    pub counts: ConfusionCounts,
    pub metrics: Prf,
}

impl StratumRow {
    fn new(stratum: &str, counts: ConfusionCounts) -> Self {
        StratumRow {
            stratum: stratum.to_string(),
            counts,
            metrics: counts.metrics(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub overall: StratumRow,
    pub by_chart_type: Vec<StratumRow>,
    pub by_issue_category: Vec<StratumRow>,
    /// Mean of per-artifact F1 over artifacts where it is defined.
    pub macro_f1: Option<f64>,
}

/// Predicted issue sets per artifact. Gold artifacts missing from the map
/// count as predicting nothing.
pub type Predictions = BTreeMap<String, BTreeSet<String>>;

pub fn score_detection(
    predictions: &Predictions,
    corpus: &Corpus,
    catalog: &Catalog,
) -> Result<DetectionScore, EvalError> {
    for id in predictions.keys() {
        if corpus.get(id).is_none() {
            return Err(EvalError::UnknownArtifact(id.clone()));
        }
    }
    let empty = BTreeSet::new();
    let mut overall = ConfusionCounts::default();
    let mut by_chart: BTreeMap<ChartStratum, ConfusionCounts> = BTreeMap::new();
    let mut by_category: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    let mut per_artifact_f1 = Vec::new();
    for label in &corpus.labels {
        let predicted = predictions.get(&label.artifact_id).unwrap_or(&empty);
        let gold: BTreeSet<String> = label
            .gold_issues
            .iter()
            .map(|g| g.issue_ref.clone())
            .collect();
        let mut counts = ConfusionCounts::default();
        for id in predicted.union(&gold) {
            let cell = match (predicted.contains(id), gold.contains(id)) {
                (true, true) => ConfusionCounts {
                    tp: 1,
                    ..Default::default()
                },
                (true, false) => ConfusionCounts {
                    fp: 1,
                    ..Default::default()
                },
                _ => ConfusionCounts {
                    fn_: 1,
                    ..Default::default()
                },
            };
            counts.add(cell);
            by_category
                .entry(issue_category(id, catalog))
                .or_default()
                .add(cell);
        }
        overall.add(counts);
        by_chart
            .entry(ChartStratum::of(label.chart_type))
            .or_default()
            .add(counts);
        if let Some(f1) = counts.metrics().f1 {
            per_artifact_f1.push(f1);
        }
    }
    Ok(DetectionScore {
        overall: StratumRow::new("overall", overall),
        by_chart_type: ChartStratum::ORDER
            .iter()
            .map(|s| StratumRow::new(s.label(), by_chart.get(s).copied().unwrap_or_default()))
            .collect(),
        by_issue_category: category_order()
            .iter()
            .map(|c| StratumRow::new(c, by_category.get(c).copied().unwrap_or_default()))
            .collect(),
        macro_f1: (!per_artifact_f1.is_empty())
            .then(|| per_artifact_f1.iter().sum::<f64>() / per_artifact_f1.len() as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub stratum: String,
    pub correct: u64,
    pub total: u64,
    pub accuracy: Option<f64>,
}

impl AccuracyRow {
    fn new(stratum: &str, correct: u64, total: u64) -> Self {
        AccuracyRow {
            stratum: stratum.to_string(),
            correct,
            total,
            accuracy: (total > 0).then(|| correct as f64 / total as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizationScore {
    pub overall: AccuracyRow,
    /// Major, Minor, Potential in that order.
    pub by_tier: Vec<AccuracyRow>,
}

/// Accuracy over `(predicted, gold)` tier pairs, stratified by gold tier.
pub fn score_categorization(pairs: &[(Severity, Severity)]) -> CategorizationScore {
    let mut by_tier = Vec::new();
    for tier in Severity::ALL {
        let in_tier: Vec<_> = pairs.iter().filter(|(_, g)| *g == tier).collect();
        let correct = in_tier.iter().filter(|(p, g)| p == g).count() as u64;
        by_tier.push(AccuracyRow::new(
            tier.label(),
            correct,
            in_tier.len() as u64,
        ));
    }
    let correct = pairs.iter().filter(|(p, g)| p == g).count() as u64;
    CategorizationScore {
        overall: AccuracyRow::new("overall", correct, pairs.len() as u64),
        by_tier,
    }
}

/// Predicted severities per artifact and issue.
pub type SeverityPredictions = BTreeMap<String, BTreeMap<String, Severity>>;

/// Tier pairs for true-positive issues only.
pub fn true_positive_pairs(
    predictions: &SeverityPredictions,
    corpus: &Corpus,
) -> Vec<(Severity, Severity)> {
    let mut pairs = Vec::new();
    for label in &corpus.labels {
        let Some(pred) = predictions.get(&label.artifact_id) else {
            continue;
        };
        for gold in &label.gold_issues {
            if let Some(p) = pred.get(&gold.issue_ref) {
                pairs.push((*p, gold.severity));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationScore {
    pub overall: AccuracyRow,
    pub by_element_class: Vec<AccuracyRow>,
    pub warnings: Vec<String>,
}

/// Precision of annotations against gold regions. Annotations for issues
/// without a gold region are skipped.
pub fn score_localization(
    annotations: &BTreeMap<String, Vec<Annotation>>,
    corpus: &Corpus,
) -> LocalizationScore {
    let mut hits: BTreeMap<Option<ElementClass>, (u64, u64)> = BTreeMap::new();
    let mut skipped = 0;
    for (artifact, list) in annotations {
        let Some(label) = corpus.get(artifact) else {
            skipped += list.len();
            continue;
        };
        for a in list {
            let Some((gold, region)) = label
                .gold(&a.issue_ref)
                .and_then(|g| g.region.as_ref().map(|r| (g, r)))
            else {
                skipped += 1;
                continue;
            };
            let slot = hits.entry(gold.element_class).or_default();
            slot.1 += 1;
            if hit_test(a, region) {
                slot.0 += 1;
            }
        }
    }
    let (h, t) = hits
        .values()
        .fold((0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let mut warnings = Vec::new();
    if t == 0 {
        warnings.push("no scorable annotations; localization precision absent".to_string());
    }
    if skipped > 0 {
        warnings.push(format!(
            "{skipped} annotation(s) without a gold region skipped"
        ));
    }
    LocalizationScore {
        overall: AccuracyRow::new("overall", h, t),
        by_element_class: ElementClass::ALL
            .iter()
            .map(|c| {
                let (h, t) = hits.get(&Some(*c)).copied().unwrap_or_default();
                AccuracyRow::new(c.label(), h, t)
            })
            .collect(),
        warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixRate {
    pub resolved: u64,
    pub total: u64,
    pub rate: Option<f64>,
}

/// Pooled fix rate over `(resolved, detected)` counts per session.
pub fn score_fix_rate(sessions: &[(u64, u64)]) -> FixRate {
    let resolved: u64 = sessions.iter().map(|s| s.0).sum();
    let total: u64 = sessions.iter().map(|s| s.1).sum();
    FixRate {
        resolved,
        total,
        rate: (total > 0).then(|| resolved as f64 / total as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub averaging: Averaging,
    pub artifacts: usize,
    pub detection: DetectionScore,
    pub categorization: CategorizationScore,
    pub localization: LocalizationScore,
    pub fix_rate: FixRate,
}

pub const REPORT_FOOTER: &str = "Counts are pooled over issues (micro average). \
Precision with no predictions is 0 when gold issues were missed; any other empty \
denominator is reported as n/a.";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into())
}

/// Renders the report as pretty JSON plus a plain-text table. Both are
/// deterministic for equal inputs.
pub fn emit_report(report: &MetricsReport) -> (String, String) {
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    let mut t = String::new();
    let _ = writeln!(t, "Detection performance ({} artifacts)", report.artifacts);
    let _ = writeln!(
        t,
        "{:<32} {:>9} {:>9} {:>9} {:>5} {:>5} {:>5}",
        "stratum", "precision", "recall", "f1", "tp", "fp", "fn"
    );
    let row = |t: &mut String, r: &StratumRow| {
        let _ = writeln!(
            t,
            "{:<32} {:>9} {:>9} {:>9} {:>5} {:>5} {:>5}",
            r.stratum,
            fmt_opt(r.metrics.precision),
            fmt_opt(r.metrics.recall),
            fmt_opt(r.metrics.f1),
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_
        );
    };
    row(&mut t, &report.detection.overall);
    for r in &report.detection.by_chart_type {
        row(&mut t, r);
    }
    if report.averaging == Averaging::Macro {
        let _ = writeln!(
            t,
            "{:<32} {:>9} {:>9} {:>9}",
            "macro average (per artifact)",
            "",
            "",
            fmt_opt(report.detection.macro_f1)
        );
    }
    let _ = writeln!(t, "\nDetection by issue category");
    for r in &report.detection.by_issue_category {
        row(&mut t, r);
    }
    let acc = |t: &mut String, r: &AccuracyRow| {
        let _ = writeln!(
            t,
            "{:<32} {:>9} {:>5} {:>5}",
            r.stratum,
            fmt_opt(r.accuracy),
            r.correct,
            r.total
        );
    };
    let _ = writeln!(t, "\nIssue categorization by severity");
    let _ = writeln!(t, "{:<32} {:>9} {:>5} {:>5}", "tier", "accuracy", "ok", "n");
    for r in &report.categorization.by_tier {
        acc(&mut t, r);
    }
    acc(&mut t, &report.categorization.overall);
    let _ = writeln!(t, "\nLocalization precision");
    for r in &report.localization.by_element_class {
        acc(&mut t, r);
    }
    acc(&mut t, &report.localization.overall);
    let _ = writeln!(
        t,
        "\nFix rate: {} ({} of {} issues)",
        fmt_opt(report.fix_rate.rate),
        report.fix_rate.resolved,
        report.fix_rate.total
    );
    let _ = writeln!(t, "\n{REPORT_FOOTER}");
    (json, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(id: &str, chart: ChartType, issues: &[(&str, Severity)]) -> GoldLabel {
        GoldLabel {
            artifact_id: id.into(),
            image: format!("{id}.png"),
            chart_type: chart,
            gold_issues: issues
                .iter()
                .map(|(i, s)| GoldIssue {
                    issue_ref: i.to_string(),
                    severity: *s,
                    element_class: None,
                    region: None,
                })
                .collect(),
            is_misleading: !issues.is_empty(),
        }
    }

    fn close(a: Option<f64>, b: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() < 5e-4)
    }

    #[test]
    fn prf_examples() {
        let m = ConfusionCounts {
            tp: 47,
            fp: 3,
            fn_: 1,
        }
        .metrics();
        assert!(close(m.precision, 0.94));
        assert!(close(m.recall, 0.979));
        assert!(close(m.f1, 0.959));
        let m = ConfusionCounts {
            tp: 5,
            fp: 0,
            fn_: 0,
        }
        .metrics();
        assert_eq!(
            (m.precision, m.recall, m.f1),
            (Some(1.0), Some(1.0), Some(1.0))
        );
        let m = ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 4,
        }
        .metrics();
        assert_eq!(
            (m.precision, m.recall, m.f1),
            (Some(0.0), Some(0.0), Some(0.0))
        );
        let m = ConfusionCounts::default().metrics();
        assert_eq!((m.precision, m.recall, m.f1), (None, None, None));
    }

    #[test]
    fn unknown_artifact() {
        let catalog = Catalog::load_default().unwrap();
        let corpus = Corpus::new(vec![label("a", ChartType::Bar, &[])]).unwrap();
        let mut preds = Predictions::new();
        preds.insert("zzz".into(), BTreeSet::new());
        assert_eq!(
            score_detection(&preds, &corpus, &catalog).unwrap_err(),
            EvalError::UnknownArtifact("zzz".into())
        );
    }

    #[test]
    fn invalid_label_rejected() {
        let mut l = label("a", ChartType::Bar, &[]);
        l.is_misleading = true;
        assert!(Corpus::new(vec![l]).is_err());
    }

    #[test]
    fn categorization_examples() {
        let mut pairs = vec![(Severity::Major, Severity::Major); 94];
        pairs.extend(vec![(Severity::Minor, Severity::Major); 6]);
        let s = score_categorization(&pairs);
        assert!(close(s.by_tier[0].accuracy, 0.94));
        assert_eq!(s.by_tier[1].accuracy, None);

        let mut pairs = vec![(Severity::Minor, Severity::Minor); 7];
        pairs.push((Severity::Potential, Severity::Major));
        assert!(close(score_categorization(&pairs).overall.accuracy, 0.875));
    }

    #[test]
    fn fix_rate_examples() {
        assert!(close(score_fix_rate(&[(33, 40)]).rate, 0.825));
        assert_eq!(score_fix_rate(&[(0, 5)]).rate, Some(0.0));
        assert!(close(score_fix_rate(&[(5, 8), (3, 4)]).rate, 8.0 / 12.0));
        assert_eq!(score_fix_rate(&[]).rate, None);
    }

    #[test]
    fn localization_examples() {
        let gold_rect = PercentRect {
            top: 0.0,
            left: 0.0,
            width: 50.0,
            height: 50.0,
        };
        let mut l = label(
            "a",
            ChartType::Bar,
            &[
                ("x", Severity::Major),
                ("y", Severity::Minor),
                ("z", Severity::Minor),
            ],
        );
        for (i, g) in l.gold_issues.iter_mut().enumerate() {
            g.region = Some(gold_rect);
            g.element_class = Some(ElementClass::ALL[i % 2]);
        }
        let corpus = Corpus::new(vec![l]).unwrap();
        let mut ann = BTreeMap::new();
        ann.insert(
            "a".to_string(),
            vec![
                Annotation::point("x", 10.0, 10.0),
                Annotation::point("y", 20.0, 20.0),
                Annotation::point("z", 90.0, 90.0),
            ],
        );
        let s = score_localization(&ann, &corpus);
        assert!(close(s.overall.accuracy, 2.0 / 3.0));
        let empty = score_localization(&BTreeMap::new(), &corpus);
        assert_eq!(empty.overall.accuracy, None);
        assert!(!empty.warnings.is_empty());
    }

    fn sample_report() -> MetricsReport {
        let catalog = Catalog::load_default().unwrap();
        let corpus = Corpus::new(vec![
            label("a", ChartType::Bar, &[("truncated-axis", Severity::Major)]),
            label(
                "b",
                ChartType::Heatmap,
                &[("missing-units", Severity::Potential)],
            ),
            label("c", ChartType::Line, &[]),
        ])
        .unwrap();
        let mut preds = Predictions::new();
        preds.insert("a".into(), BTreeSet::from(["truncated-axis".to_string()]));
        preds.insert("c".into(), BTreeSet::from(["dual-axis".to_string()]));
        MetricsReport {
            averaging: Averaging::Micro,
            artifacts: 3,
            detection: score_detection(&preds, &corpus, &catalog).unwrap(),
            categorization: score_categorization(&[(Severity::Major, Severity::Major)]),
            localization: score_localization(&BTreeMap::new(), &corpus),
            fix_rate: score_fix_rate(&[(1, 2)]),
        }
    }

    #[test]
    fn report_structure_and_determinism() {
        let r = sample_report();
        let order: Vec<&str> = r
            .detection
            .by_chart_type
            .iter()
            .map(|x| x.stratum.as_str())
            .collect();
        assert_eq!(
            order,
            [
                "Bar Charts",
                "Line Charts",
                "Pie/Donut Charts",
                "Scatterplots",
                "Other Chart Types"
            ]
        );
        assert_eq!(r.detection.by_chart_type[2].metrics.f1, None);
        let (j1, t1) = emit_report(&r);
        let (j2, t2) = emit_report(&r);
        assert_eq!((j1, &t1), (j2, &t2));
        assert!(t1.contains("n/a"));
        assert!(t1.find("Bar Charts").unwrap() < t1.find("Other Chart Types").unwrap());
        let cat = &r.detection.by_issue_category;
        assert_eq!(cat.len(), 12);
        assert_eq!(cat[11].stratum, OTHER_CONTEXTUAL);
    }

    fn arb_corpus() -> impl Strategy<Value = (Corpus, Predictions)> {
        let ids = [
            "truncated-axis",
            "dual-axis",
            "missing-units",
            "chart-junk",
            "learned-x",
            "3d-effects",
        ];
        prop::collection::vec(
            (
                0usize..8,
                prop::collection::btree_set(0usize..6, 0..4),
                prop::collection::btree_set(0usize..6, 0..4),
            ),
            1..20,
        )
        .prop_map(move |arts| {
            let mut labels = Vec::new();
            let mut preds = Predictions::new();
            for (n, (chart, gold, pred)) in arts.into_iter().enumerate() {
                let issues: Vec<(&str, Severity)> =
                    gold.iter().map(|g| (ids[*g], Severity::Minor)).collect();
                labels.push(label(&format!("art{n}"), ChartType::ALL[chart], &issues));
                preds.insert(
                    format!("art{n}"),
                    pred.iter().map(|p| ids[*p].to_string()).collect(),
                );
            }
            (Corpus::new(labels).unwrap(), preds)
        })
    }

    proptest! {
        #[test]
        fn f1_is_harmonic_mean(tp in 0u64..200, fp in 0u64..200, fn_ in 0u64..200) {
            let m = ConfusionCounts { tp, fp, fn_ }.metrics();
            for v in [m.precision, m.recall, m.f1].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let (Some(p), Some(r), Some(f)) = (m.precision, m.recall, m.f1) {
                if p > 0.0 && r > 0.0 {
                    prop_assert!((f - 2.0 / (1.0 / p + 1.0 / r)).abs() < 1e-12);
                    prop_assert!(f <= p.max(r) + 1e-12 && f >= p.min(r) - 1e-12);
                }
            }
        }

        #[test]
        fn strata_sum_to_overall((corpus, preds) in arb_corpus()) {
            let catalog = Catalog::load_default().unwrap();
            let s = score_detection(&preds, &corpus, &catalog).unwrap();
            let mut by_chart = ConfusionCounts::default();
            for r in &s.by_chart_type { by_chart.add(r.counts); }
            let mut by_cat = ConfusionCounts::default();
            for r in &s.by_issue_category { by_cat.add(r.counts); }
            prop_assert_eq!(by_chart, s.overall.counts);
            prop_assert_eq!(by_cat, s.overall.counts);
        }

        #[test]
        fn detection_ignores_artifact_order((corpus, preds) in arb_corpus()) {
            let catalog = Catalog::load_default().unwrap();
            let a = score_detection(&preds, &corpus, &catalog).unwrap();
            let mut labels = corpus.labels.clone();
            labels.reverse();
            let b = score_detection(&preds, &Corpus::new(labels).unwrap(), &catalog).unwrap();
            prop_assert_eq!(a.overall, b.overall);
            prop_assert_eq!(a.by_issue_category, b.by_issue_category);
        }

        #[test]
        fn false_positives_do_not_move_categorization(extra in prop::collection::btree_set("[a-z]{3}", 0..5)) {
            let corpus = Corpus::new(vec![label("a", ChartType::Bar, &[("truncated-axis", Severity::Major), ("dual-axis", Severity::Minor)])]).unwrap();
            let mut preds = SeverityPredictions::new();
            let mut m = BTreeMap::new();
            m.insert("truncated-axis".to_string(), Severity::Major);
            m.insert("dual-axis".to_string(), Severity::Major);
            preds.insert("a".to_string(), m.clone());
            let base = score_categorization(&true_positive_pairs(&preds, &corpus));
            for e in extra { m.insert(format!("fp-{e}"), Severity::Potential); }
            preds.insert("a".to_string(), m);
            let with_fp = score_categorization(&true_positive_pairs(&preds, &corpus));
            prop_assert_eq!(base, with_fp);
        }
    }
}
