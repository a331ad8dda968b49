//! Model-mediated data recovery and the VLAT benchmark harness.
//!
//! The guided pipeline runs three prompts per chart: extract a table from
//! the image, sort it, then answer a question from the sorted table alone.
//! The model's sort is checked against [`sort_data`] and the local result
//! is what feeds the answer step.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, GatewayError, ImagePayload, ModelRequest, ModelRole};
use crate::ingestion::{self, IngestConfig, IngestError};
use crate::Warning;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractionError {
    #[error("model output contains no parseable table")]
    UnparseableTable,
    #[error("table has no data rows")]
    EmptyTable,
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("{answers} answers for {items} items")]
    LengthMismatch { answers: usize, items: usize },
    #[error("invalid item {0}")]
    InvalidItem(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Categorical,
    Numeric,
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ModelExtracted,
    UserUploaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataTable {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<String>>,
    pub provenance: Provenance,
}

/// Parses a numeric cell, tolerating thousands separators, percent signs
/// and a leading currency symbol.
pub fn numeric_value(cell: &str) -> Option<f64> {
    let trimmed = cell.trim();
    let stripped: String = trimmed
        .trim_start_matches(['$', '€', '£', '¥'])
        .trim_end_matches('%')
        .chars()
        .filter(|c| *c != ',' && *c != '_' && !c.is_whitespace())
        .collect();
    if stripped.is_empty() {
        return None;
    }
    stripped.parse::<f64>().ok().filter(|v| v.is_finite())
}

const MONTHS: [&str; 12] = [
    "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
];

/// Sort key for temporal cells: ISO dates compare as text, month names by
/// calendar order, plain years numerically.
fn temporal_key(cell: &str) -> Option<(f64, String)> {
    let t = cell.trim().to_lowercase();
    if let Some(idx) = MONTHS.iter().position(|m| t.starts_with(m)) {
        let year = t
            .split(|c: char| !c.is_ascii_digit())
            .find(|s| s.len() == 4)
            .and_then(|s| s.parse::<f64>().ok())
            .unwrap_or(0.0);
        return Some((year * 12.0 + idx as f64, t));
    }
    let bytes = t.as_bytes();
    if bytes.len() >= 4 && bytes[..4].iter().all(u8::is_ascii_digit) {
        let rest = &t[4..];
        if rest.is_empty()
            || rest.starts_with('-')
            || rest.starts_with('/')
            || rest.starts_with(" q")
            || rest.starts_with("-q")
        {
            let year: f64 = t[..4].parse().ok()?;
            return Some((year * 12.0, t));
        }
    }
    None
}

fn split_unit(header: &str) -> (String, Option<String>) {
    let h = header.trim();
    if let (Some(open), true) = (h.rfind('('), h.ends_with(')')) {
        let name = h[..open].trim();
        let unit = h[open + 1..h.len() - 1].trim();
        if !name.is_empty() && !unit.is_empty() {
            return (name.to_string(), Some(unit.to_string()));
        }
    }
    (h.to_string(), None)
}

fn infer_kind(name: &str, cells: &[&str]) -> ColumnKind {
    let lower = name.to_lowercase();
    let temporal_header = ["date", "year", "month", "time", "quarter", "period"]
        .iter()
        .any(|k| lower.contains(k));
    let non_empty: Vec<&&str> = cells.iter().filter(|c| !c.trim().is_empty()).collect();
    if non_empty.is_empty() {
        return ColumnKind::Categorical;
    }
    let temporal = non_empty
        .iter()
        .filter(|c| temporal_key(c).is_some())
        .count();
    if temporal_header && temporal * 2 > non_empty.len() {
        return ColumnKind::Temporal;
    }
    let numeric = non_empty
        .iter()
        .filter(|c| numeric_value(c).is_some())
        .count();
    if numeric * 2 > non_empty.len() {
        ColumnKind::Numeric
    } else if temporal == non_empty.len() && non_empty.iter().any(|c| numeric_value(c).is_none()) {
        ColumnKind::Temporal
    } else {
        ColumnKind::Categorical
    }
}

fn cell_ok(kind: ColumnKind, cell: &str) -> bool {
    match kind {
        ColumnKind::Numeric => numeric_value(cell).is_some(),
        ColumnKind::Temporal => temporal_key(cell).is_some(),
        ColumnKind::Categorical => true,
    }
}

impl DataTable {
    /// Builds a table from a header and raw rows, dropping rows with the
    /// wrong arity or cells that do not fit their column kind.
    pub fn from_records(
        header: Vec<String>,
        records: Vec<Vec<String>>,
        provenance: Provenance,
    ) -> Result<(DataTable, Vec<Warning>), ExtractionError> {
        if header.is_empty() {
            return Err(ExtractionError::UnparseableTable);
        }
        let mut warnings = Vec::new();
        let arity = header.len();
        let mut rows = Vec::new();
        for (i, record) in records.into_iter().enumerate() {
            if record.len() != arity {
                warnings.push(Warning::new(
                    "extraction",
                    format!(
                        "dropped row {}: {} cells, expected {arity}",
                        i + 1,
                        record.len()
                    ),
                ));
            } else {
                rows.push(record);
            }
        }
        let mut columns = Vec::new();
        for (c, raw) in header.iter().enumerate() {
            let (name, unit) = split_unit(raw);
            let cells: Vec<&str> = rows.iter().map(|r| r[c].as_str()).collect();
            let kind = infer_kind(&name, &cells);
            columns.push(Column { name, kind, unit });
        }
        let before = rows.len();
        rows.retain(|row| {
            columns
                .iter()
                .zip(row)
                .all(|(col, cell)| cell_ok(col.kind, cell))
        });
        if rows.len() < before {
            warnings.push(Warning::new(
                "extraction",
                format!("dropped {} row(s) with invalid cells", before - rows.len()),
            ));
        }
        if rows.is_empty() {
            return Err(ExtractionError::EmptyTable);
        }
        Ok((
            DataTable {
                columns,
                rows,
                provenance,
            },
            warnings,
        ))
    }

    /// Parses a delimited table out of model output. Pipe tables win over
    /// comma-separated lines; markdown separator rows and code fences are
    /// skipped.
    pub fn parse_model_output(text: &str) -> Result<(DataTable, Vec<Warning>), ExtractionError> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with("```"))
            .collect();
        let delimiter = if lines.iter().any(|l| l.matches('|').count() >= 1) {
            '|'
        } else {
            ','
        };
        let table_lines: Vec<&str> = lines
            .into_iter()
            .filter(|l| l.contains(delimiter))
            .filter(|l| {
                !l.chars()
                    .all(|c| matches!(c, '|' | '-' | ':' | ' ' | '+' | '='))
            })
            .collect();
        if table_lines.is_empty() {
            return Err(ExtractionError::UnparseableTable);
        }
        let split = |line: &str| -> Vec<String> {
            let inner = if delimiter == '|' {
                line.trim_start_matches('|').trim_end_matches('|')
            } else {
                line
            };
            inner
                .split(delimiter)
                .map(|c| c.trim().to_string())
                .collect()
        };
        let header = split(table_lines[0]);
        if header.len() < 2 || header.iter().any(|h| h.is_empty()) {
            return Err(ExtractionError::UnparseableTable);
        }
        let records = table_lines[1..].iter().map(|l| split(l)).collect();
        DataTable::from_records(header, records, Provenance::ModelExtracted)
    }

    /// Parses an uploaded comma-separated dataset (header row required).
    pub fn from_csv(text: &str) -> Result<(DataTable, Vec<Warning>), ExtractionError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|_| ExtractionError::UnparseableTable)?
            .iter()
            .map(str::to_string)
            .collect();
        if header.iter().all(|h| h.is_empty()) {
            return Err(ExtractionError::UnparseableTable);
        }
        let mut records = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|_| ExtractionError::UnparseableTable)?;
            records.push(record.iter().map(str::to_string).collect());
        }
        DataTable::from_records(header, records, Provenance::UserUploaded)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        let wanted = name.trim().to_lowercase();
        self.columns
            .iter()
            .position(|c| c.name.to_lowercase() == wanted)
    }

    fn header_cells(&self) -> Vec<String> {
        self.columns
            .iter()
            .map(|c| match &c.unit {
                Some(u) => format!("{} ({u})", c.name),
                None => c.name.clone(),
            })
            .collect()
    }

    /// Pipe-delimited rendering used inside prompts.
    pub fn to_pipe_table(&self) -> String {
        let mut out = format!("| {} |\n", self.header_cells().join(" | "));
        out.push_str(&format!(
            "|{}|\n",
            vec!["---"; self.columns.len()].join("|")
        ));
        for row in &self.rows {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(self.header_cells())
            .expect("in-memory csv write");
        for row in &self.rows {
            writer.write_record(row).expect("in-memory csv write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory csv flush"))
            .expect("csv output is utf-8")
    }

    pub fn first_numeric_column(&self) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.kind == ColumnKind::Numeric)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortSpec {
    pub column: String,
    pub descending: bool,
}

fn compare_cells(kind: ColumnKind, a: &str, b: &str) -> Ordering {
    match kind {
        ColumnKind::Numeric => match (numeric_value(a), numeric_value(b)) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            _ => a.cmp(b),
        },
        ColumnKind::Temporal => match (temporal_key(a), temporal_key(b)) {
            (Some(x), Some(y)) => x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)),
            _ => a.cmp(b),
        },
        ColumnKind::Categorical => a.to_lowercase().cmp(&b.to_lowercase()),
    }
}

/// Stable sort on one column.
pub fn sort_data(table: &DataTable, spec: &SortSpec) -> Result<DataTable, ExtractionError> {
    let idx = table
        .column_index(&spec.column)
        .ok_or_else(|| ExtractionError::UnknownColumn(spec.column.clone()))?;
    let kind = table.columns[idx].kind;
    let mut sorted = table.clone();
    sorted.rows.sort_by(|a, b| {
        let ord = compare_cells(kind, &a[idx], &b[idx]);
        if spec.descending {
            ord.reverse()
        } else {
            ord
        }
    });
    Ok(sorted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub table: DataTable,
    pub warnings: Vec<Warning>,
}

const EXTRACT_PROMPT: &str = "Extract the data shown in this chart as a pipe-delimited table. \
The first row must be the header, with units in parentheses where the chart shows them. \
Output only the table.";

/// Prompts the extractor for a table, with one repair reprompt.
pub fn extract_data(
    image: &ImagePayload,
    gateway: &Gateway,
) -> Result<Extraction, ExtractionError> {
    let request = ModelRequest::new(ModelRole::Extractor, "extract")
        .user(EXTRACT_PROMPT)
        .image(image.clone());
    let first = gateway.complete(&request)?;
    match DataTable::parse_model_output(&first.text) {
        Ok((table, warnings)) => return Ok(Extraction { table, warnings }),
        Err(ExtractionError::EmptyTable) => return Err(ExtractionError::EmptyTable),
        Err(_) => {}
    }
    let retry = request.assistant(first.text).user(
        "That was not a table. Reply with only a pipe-delimited table: one header row, then one row per data point.",
    );
    let second = gateway.complete(&retry)?;
    let (table, mut warnings) = DataTable::parse_model_output(&second.text)?;
    warnings.insert(
        0,
        Warning::new("extraction", "table recovered after a repair reprompt"),
    );
    Ok(Extraction { table, warnings })
}

/// Asks the model to sort the table (guided step two) and verifies the
/// answer against the local sort. The verified local result is returned.
pub fn model_sort(
    table: &DataTable,
    spec: &SortSpec,
    gateway: &Gateway,
) -> Result<(DataTable, Vec<Warning>), ExtractionError> {
    let expected = sort_data(table, spec)?;
    let direction = if spec.descending {
        "descending"
    } else {
        "ascending"
    };
    let request = ModelRequest::new(ModelRole::Extractor, "sort").user(format!(
        "Sort this table by the column \"{}\" in {direction} order. Output only the sorted pipe-delimited table.\n\n{}",
        spec.column,
        table.to_pipe_table()
    ));
    let response = gateway.complete(&request)?;
    let mut warnings = Vec::new();
    match DataTable::parse_model_output(&response.text) {
        Ok((model_table, _)) if model_table.rows == expected.rows => {}
        Ok(_) => warnings.push(Warning::new(
            "extraction",
            "model sort disagrees with the local sort; using the local order",
        )),
        Err(_) => warnings.push(Warning::new(
            "extraction",
            "model sort output unparseable; using the local order",
        )),
    }
    Ok((expected, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub chosen_index: Option<usize>,
    /// True when the response selects no option (abstention or noise).
    pub unanswered: bool,
}

fn option_letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

fn render_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}) {o}", option_letter(i)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Maps a response to an option: a leading option letter first, then the
/// longest option text contained in the response.
pub fn parse_choice(response: &str, options: &[String]) -> Option<usize> {
    let trimmed = response.trim();
    let lower = trimmed.to_lowercase();
    let body = ["answer:", "answer is", "the answer is", "option"]
        .iter()
        .find_map(|p| lower.strip_prefix(p))
        .unwrap_or(&lower)
        .trim_start_matches([' ', '(', '*']);
    let mut chars = body.chars();
    if let Some(first) = chars.next() {
        let next = chars.next();
        if first.is_ascii_alphabetic() && next.is_none_or(|c| !c.is_ascii_alphanumeric()) {
            let idx = (first.to_ascii_uppercase() as u8 - b'A') as usize;
            if idx < options.len() {
                return Some(idx);
            }
        }
    }
    options
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.trim().is_empty() && lower.contains(&o.trim().to_lowercase()))
        .max_by_key(|(_, o)| o.len())
        .map(|(i, _)| i)
}

/// Answers a multiple-choice question from the table alone (no image).
pub fn answer_question(
    table: &DataTable,
    question: &str,
    options: &[String],
    gateway: &Gateway,
) -> Result<Answer, ExtractionError> {
    if table.rows.is_empty() {
        return Err(ExtractionError::EmptyTable);
    }
    let request = ModelRequest::new(ModelRole::Extractor, "answer").user(format!(
        "Using only this data table:\n\n{}\nQuestion: {question}\nOptions:\n{}\n\nReply with the letter of the correct option.",
        table.to_pipe_table(),
        render_options(options)
    ));
    let response = gateway.complete(&request)?;
    Ok(answer_from(response.text, options))
}

fn answer_from(text: String, options: &[String]) -> Answer {
    let chosen_index = parse_choice(&text, options);
    Answer {
        unanswered: chosen_index.is_none(),
        text: match chosen_index {
            Some(i) => options[i].clone(),
            None => text,
        },
        chosen_index,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlatItem {
    pub item_id: String,
    /// Image path, relative to the manifest directory.
    pub image: String,
    pub question: String,
    pub options: Vec<String>,
    pub correct_index: usize,
}

impl VlatItem {
    pub fn option_count(&self) -> usize {
        self.options.len()
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.options.len() < 2 || self.correct_index >= self.options.len() {
            return Err(ExtractionError::InvalidItem(self.item_id.clone()));
        }
        Ok(())
    }
}

/// Loads a JSON-lines item manifest.
pub fn load_vlat_items(path: &Path) -> Result<Vec<VlatItem>, ExtractionError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ExtractionError::Io(format!("{}: {e}", path.display())))?;
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: VlatItem = serde_json::from_str(line)
            .map_err(|e| ExtractionError::InvalidItem(format!("line {}: {e}", n + 1)))?;
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlatScore {
    pub raw_score: u32,
    pub corrected_score: f64,
    pub total_items: u32,
    pub scheme: String,
}

/// A VLAT scoring scheme. Reported scores always name their scheme.
pub trait ScoringScheme: Send + Sync {
    fn name(&self) -> &str;
    fn corrected(&self, answers: &[Option<usize>], items: &[VlatItem]) -> f64;
}

/// One point per correct answer, `-1/(k-1)` per wrong one, nothing for
/// omissions, floored at zero over the run.
#[derive(Debug, Clone, Copy, Default)]
pub struct CorrectionForGuessing;

impl ScoringScheme for CorrectionForGuessing {
    fn name(&self) -> &str {
        "correction-for-guessing"
    }

    fn corrected(&self, answers: &[Option<usize>], items: &[VlatItem]) -> f64 {
        let total: f64 = answers
            .iter()
            .zip(items)
            .map(|(a, item)| match a {
                Some(i) if *i == item.correct_index => 1.0,
                Some(_) => -1.0 / (item.option_count().max(2) - 1) as f64,
                None => 0.0,
            })
            .sum();
        total.max(0.0)
    }
}

/// Corrected score equals the raw count.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawCount;

impl ScoringScheme for RawCount {
    fn name(&self) -> &str {
        "raw"
    }

    fn corrected(&self, answers: &[Option<usize>], items: &[VlatItem]) -> f64 {
        answers
            .iter()
            .zip(items)
            .filter(|(a, item)| **a == Some(item.correct_index))
            .count() as f64
    }
}

pub fn score_vlat(
    answers: &[Option<usize>],
    items: &[VlatItem],
    scheme: &dyn ScoringScheme,
) -> Result<VlatScore, ExtractionError> {
    if answers.len() != items.len() {
        return Err(ExtractionError::LengthMismatch {
            answers: answers.len(),
            items: items.len(),
        });
    }
    let raw = answers
        .iter()
        .zip(items)
        .filter(|(a, item)| **a == Some(item.correct_index))
        .count() as u32;
    Ok(VlatScore {
        raw_score: raw,
        corrected_score: scheme.corrected(answers, items).min(raw as f64),
        total_items: items.len() as u32,
        scheme: scheme.name().to_string(),
    })
}

/// Published reference points for a 53-item run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceScore {
    pub label: &'static str,
    pub mean_raw: f64,
    pub vlat_score: f64,
}

pub const HUMAN_BASELINE: ReferenceScore = ReferenceScore {
    label: "human participants",
    mean_raw: 33.74,
    vlat_score: 28.82,
};

pub const CLAUDE_GUIDED_REFERENCE: ReferenceScore = ReferenceScore {
    label: "claude-class, guided 3-step",
    mean_raw: 51.00,
    vlat_score: 50.17,
};

pub const FULL_VLAT_ITEMS: u32 = 53;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarnessMode {
    Guided3step,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemLog {
    pub item_id: String,
    pub chosen_index: Option<usize>,
    pub correct: bool,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_table: Option<String>,
    #[serde(default)]
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessRun {
    pub mode: HarnessMode,
    pub score: VlatScore,
    pub items: Vec<ItemLog>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("harness aborted at item {failed_item}: {error}")]
pub struct HarnessAborted {
    pub failed_item: String,
    pub error: ExtractionError,
    /// Log of the items completed before the failure.
    pub completed: Vec<ItemLog>,
}

fn run_item(
    item: &VlatItem,
    base_dir: &Path,
    gateway: &Gateway,
    mode: HarnessMode,
    ingest: &IngestConfig,
) -> Result<ItemLog, ExtractionError> {
    let path: PathBuf = base_dir.join(&item.image);
    let bytes =
        fs::read(&path).map_err(|e| ExtractionError::Io(format!("{}: {e}", path.display())))?;
    let artifact = ingestion::ingest(&bytes, ingest)?;
    let image = artifact.payload();
    match mode {
        HarnessMode::Guided3step => {
            let extraction = extract_data(&image, gateway)?;
            let mut warnings = extraction.warnings;
            let table = match extraction.table.first_numeric_column() {
                Some(col) => {
                    let spec = SortSpec {
                        column: extraction.table.columns[col].name.clone(),
                        descending: true,
                    };
                    let (sorted, w) = model_sort(&extraction.table, &spec, gateway)?;
                    warnings.extend(w);
                    sorted
                }
                None => extraction.table,
            };
            let answer = answer_question(&table, &item.question, &item.options, gateway)?;
            Ok(ItemLog {
                item_id: item.item_id.clone(),
                correct: answer.chosen_index == Some(item.correct_index),
                chosen_index: answer.chosen_index,
                answer_text: answer.text,
                extracted_table: Some(table.to_pipe_table()),
                warnings,
            })
        }
        HarnessMode::Direct => {
            let request = ModelRequest::new(ModelRole::Extractor, "answer-direct")
                .user(format!(
                    "Question: {}\nOptions:\n{}\n\nReply with the letter of the correct option.",
                    item.question,
                    render_options(&item.options)
                ))
                .image(image);
            let response = gateway.complete(&request)?;
            let answer = answer_from(response.text, &item.options);
            Ok(ItemLog {
                item_id: item.item_id.clone(),
                correct: answer.chosen_index == Some(item.correct_index),
                chosen_index: answer.chosen_index,
                answer_text: answer.text,
                extracted_table: None,
                warnings: Vec::new(),
            })
        }
    }
}

/// Runs every item in order and scores the run.
pub fn run_vlat_harness(
    items: &[VlatItem],
    base_dir: &Path,
    gateway: &Gateway,
    mode: HarnessMode,
    scheme: &dyn ScoringScheme,
) -> Result<HarnessRun, HarnessAborted> {
    let ingest = IngestConfig::default();
    let mut logs = Vec::new();
    for item in items {
        match run_item(item, base_dir, gateway, mode, &ingest) {
            Ok(log) => logs.push(log),
            Err(error) => {
                return Err(HarnessAborted {
                    failed_item: item.item_id.clone(),
                    error,
                    completed: logs,
                })
            }
        }
    }
    let answers: Vec<Option<usize>> = logs.iter().map(|l| l.chosen_index).collect();
    let score = score_vlat(&answers, items, scheme).expect("one log per item");
    Ok(HarnessRun {
        mode,
        score,
        items: logs,
    })
}
