//! A rule-based stand-in for a multimodal provider.
//!
//! Charts are registered with the findings, data table and answers each
//! provider should give. Requests are matched on the normalized image hash
//! and the request purpose. Corrected renders produced under the stub
//! executor are tracked so re-analysis reports only the residual issues.
//! Used to author replay fixtures and to drive tests without credentials.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, LazyLock};

use parking_lot::Mutex;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::blob::sha256_hex;
use crate::correction::{extract_code_block, StubExecutor};
use crate::detection::NO_ISSUES_SENTINEL;
use crate::extraction::{sort_data, DataTable, SortSpec};
use crate::gateway::{
    FnTransport, ImagePayload, ModelRequest, ProviderConfig, Transport, TransportError,
};
use crate::ingestion::{normalize_image, IngestConfig};
use crate::taxonomy::{normalize_name, Severity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedIssue {
    pub name: String,
    pub severity: Severity,
    pub explanation: String,
    pub recommendation: String,
    /// `[top_gap, left_gap, width, height]` in percent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAnswer {
    pub question: String,
    /// Option letter given when answering from the extracted table.
    pub guided: String,
    /// Option letter given when answering from the image directly.
    pub direct: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartScenario {
    pub label: String,
    /// Image path, relative to the scenario file.
    pub image: String,
    pub chart_type: String,
    /// Issues reported per provider id.
    pub findings: BTreeMap<String, Vec<ScriptedIssue>>,
    /// Reported by every provider once the catalog listing names them.
    #[serde(default)]
    pub latent: Vec<ScriptedIssue>,
    /// Pipe-delimited data table returned for extraction.
    pub table: String,
    /// Issue names still reported on the corrected chart.
    #[serde(default)]
    pub residual: Vec<String>,
    /// Providers whose first generated script fails once before repair.
    #[serde(default)]
    pub flaky_codegen: Vec<String>,
    #[serde(default)]
    pub answers: Vec<ScriptedAnswer>,
}

impl ChartScenario {
    fn all_issues(&self) -> impl Iterator<Item = &ScriptedIssue> {
        self.findings.values().flatten().chain(self.latent.iter())
    }

    fn issue(&self, name: &str) -> Option<&ScriptedIssue> {
        let key = normalize_name(name);
        self.all_issues().find(|i| normalize_name(&i.name) == key)
    }
}

#[derive(Clone)]
enum Known {
    Original(Arc<ChartScenario>),
    Render(Arc<ChartScenario>),
}

#[derive(Default)]
pub struct ScriptedModel {
    images: Mutex<HashMap<String, Known>>,
    ingest: IngestConfig,
}

static SORT_REQUEST: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"by the column "(?P<col>[^"]+)" in (?P<dir>ascending|descending) order"#)
        .expect("static regex")
});

fn hash_normalized(bytes: &[u8], config: &IngestConfig) -> Option<String> {
    normalize_image(bytes, config)
        .ok()
        .map(|n| sha256_hex(&n.bytes))
}

fn image_hash(payload: &ImagePayload) -> Option<String> {
    match payload {
        ImagePayload::Inline { data, .. } => Some(sha256_hex(data)),
        ImagePayload::Stored(blob) => Some(blob.key.clone()),
    }
}

/// Names listed as `- Name` lines in a prompt.
fn listed_names(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- "))
        .map(|l| {
            l.split(" (")
                .next()
                .unwrap_or(l)
                .split(':')
                .next()
                .unwrap_or(l)
                .trim()
                .to_string()
        })
        .collect()
}

fn explain_blocks<'a>(issues: impl Iterator<Item = &'a ScriptedIssue>) -> String {
    issues
        .map(|i| {
            format!(
                "Issue: {}\nSeverity: {}\nExplanation: {}\nRecommendation: {}\n",
                i.name, i.severity, i.explanation, i.recommendation
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_table_rows(table: &str) -> (Vec<String>, Vec<f64>) {
    let Ok((t, _)) = DataTable::parse_model_output(table) else {
        return (Vec::new(), Vec::new());
    };
    let value_col = t
        .first_numeric_column()
        .unwrap_or(1.min(t.columns.len().saturating_sub(1)));
    let label_col = if value_col == 0 {
        1.min(t.columns.len() - 1)
    } else {
        0
    };
    t.rows
        .iter()
        .map(|r| {
            (
                r[label_col].clone(),
                crate::extraction::numeric_value(&r[value_col]).unwrap_or(0.0),
            )
        })
        .unzip()
}

fn plotting_script(scenario: &ChartScenario, provider: &str, note: &str) -> String {
    let (labels, values) = parse_table_rows(&scenario.table);
    let mut pairs: Vec<(String, f64)> = labels.into_iter().zip(values).collect();
    if scenario.chart_type.contains("pie") {
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
    }
    let labels: Vec<String> = pairs.iter().map(|(l, _)| format!("{l:?}")).collect();
    let values: Vec<String> = pairs.iter().map(|(_, v)| format!("{v}")).collect();
    let plot = if scenario.chart_type.contains("line") {
        "ax.plot(labels, values, marker='o')"
    } else {
        "ax.bar(labels, values)"
    };
    format!(
        "import matplotlib\n\
matplotlib.use('Agg')\n\
import matplotlib.pyplot as plt\n\
\n\
# corrected {label} ({provider}){note}\n\
labels = [{labels}]\n\
values = [{values}]\n\
fig, ax = plt.subplots(figsize=(6, 4))\n\
{plot}\n\
ax.set_ylim(bottom=0)\n\
ax.set_title('{title}')\n\
ax.set_xlabel('Category')\n\
ax.set_ylabel('Value')\n\
fig.tight_layout()\n\
fig.savefig('output.png', dpi=80)\n",
        label = scenario.label,
        labels = labels.join(", "),
        values = values.join(", "),
        title = scenario.label.replace('\'', ""),
    )
}

impl ScriptedModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a chart under the hash of its normalized bytes.
    pub fn add_chart(&self, image_bytes: &[u8], scenario: ChartScenario) {
        if let Some(hash) = hash_normalized(image_bytes, &self.ingest) {
            self.images
                .lock()
                .insert(hash, Known::Original(Arc::new(scenario)));
        }
    }

    pub fn into_transport(self: Arc<Self>) -> Arc<dyn Transport> {
        Arc::new(FnTransport(move |p: &ProviderConfig, r: &ModelRequest| {
            self.respond(&p.id, r)
        }))
    }

    fn lookup(&self, request: &ModelRequest) -> Option<Known> {
        let hash = image_hash(request.images.first()?)?;
        self.images.lock().get(&hash).cloned()
    }

    fn code_response(&self, scenario: &Arc<ChartScenario>, script: String) -> String {
        let response = format!("```python\n{script}```\n");
        let executed = extract_code_block(&response).unwrap_or_default();
        if let Some(hash) = hash_normalized(&StubExecutor::render(&executed), &self.ingest) {
            self.images
                .lock()
                .insert(hash, Known::Render(scenario.clone()));
        }
        response
    }

    fn scenario_for_code(&self, prompt: &str) -> Option<Arc<ChartScenario>> {
        let images = self.images.lock();
        images.values().find_map(|k| match k {
            Known::Original(s) if prompt.contains(&format!("# corrected {} (", s.label)) => {
                Some(s.clone())
            }
            _ => None,
        })
    }

    pub fn respond(
        &self,
        provider: &str,
        request: &ModelRequest,
    ) -> Result<String, TransportError> {
        let prompt = request.prompt_text();
        let known = self.lookup(request);
        let text = match (request.purpose.as_str(), known) {
            ("chart-type", Some(Known::Original(s))) => s.chart_type.clone(),
            ("chart-type", Some(Known::Render(s))) => if s.chart_type.contains("line") {
                "line"
            } else {
                "bar"
            }
            .to_string(),
            ("chart-type", None) => "other".into(),
            ("detect", Some(Known::Original(s))) => {
                let mut names: Vec<String> = s
                    .findings
                    .get(provider)
                    .into_iter()
                    .flatten()
                    .map(|i| i.name.clone())
                    .collect();
                for latent in &s.latent {
                    if prompt.contains(&format!("- {} (user-taught)", latent.name)) {
                        names.push(latent.name.clone());
                    }
                }
                if names.is_empty() {
                    NO_ISSUES_SENTINEL.into()
                } else {
                    names
                        .iter()
                        .map(|n| format!("- {n}"))
                        .collect::<Vec<_>>()
                        .join("\n")
                }
            }
            ("detect", Some(Known::Render(s))) if !s.residual.is_empty() => s
                .residual
                .iter()
                .map(|n| format!("- {n}"))
                .collect::<Vec<_>>()
                .join("\n"),
            ("detect", _) => NO_ISSUES_SENTINEL.into(),
            ("explain", Some(Known::Original(s) | Known::Render(s))) => {
                let names = listed_names(&prompt);
                explain_blocks(names.iter().filter_map(|n| s.issue(n)))
            }
            ("localize", Some(Known::Original(s))) => {
                let items: Vec<serde_json::Value> = listed_names(&prompt)
                    .iter()
                    .filter_map(|n| s.issue(n))
                    .filter_map(|i| {
                        let [top, left, w, h] = i.region?;
                        Some(serde_json::json!({
                            "issue": i.name, "top_gap": top, "left_gap": left, "width": w, "height": h
                        }))
                    })
                    .collect();
                serde_json::to_string(&items).expect("json array")
            }
            ("extract", Some(Known::Original(s) | Known::Render(s))) => s.table.clone(),
            ("codegen", Some(Known::Original(s))) => {
                let mut script = plotting_script(&s, provider, "");
                if s.flaky_codegen.iter().any(|p| p == provider) {
                    script.push_str("# stub: fail NameError: name 'ax2' is not defined\n");
                }
                self.code_response(&s, script)
            }
            ("repair" | "refine", _) => match self.scenario_for_code(&prompt) {
                Some(s) => {
                    let note = if request.purpose == "refine" {
                        let wish = prompt
                            .lines()
                            .find_map(|l| l.strip_prefix("User request: "))
                            .unwrap_or("")
                            .replace('\n', " ");
                        format!("\n# refined: {wish}")
                    } else {
                        "\n# repaired".to_string()
                    };
                    self.code_response(&s, plotting_script(&s, provider, &note))
                }
                None => "I cannot help with that code.".into(),
            },
            ("sort", _) => sort_reply(&prompt),
            ("answer", _) => self.answer(&prompt, false),
            ("answer-direct", _) => self.answer(&prompt, true),
            (purpose, _) => {
                return Err(TransportError::Rejected(format!(
                    "scripted model has no rule for purpose '{purpose}'"
                )))
            }
        };
        Ok(text)
    }

    fn answer(&self, prompt: &str, direct: bool) -> String {
        let question = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Question: "))
            .unwrap_or("")
            .trim();
        let images = self.images.lock();
        images
            .values()
            .filter_map(|k| match k {
                Known::Original(s) => Some(s),
                Known::Render(_) => None,
            })
            .flat_map(|s| s.answers.iter())
            .find(|a| a.question == question)
            .map(|a| {
                if direct {
                    a.direct.clone()
                } else {
                    a.guided.clone()
                }
            })
            .unwrap_or_else(|| "I am not sure.".into())
    }
}

fn sort_reply(prompt: &str) -> String {
    let Some(caps) = SORT_REQUEST.captures(prompt) else {
        return String::new();
    };
    let table_text: String = prompt
        .lines()
        .filter(|l| l.trim_start().starts_with('|'))
        .collect::<Vec<_>>()
        .join("\n");
    let spec = SortSpec {
        column: caps["col"].to_string(),
        descending: &caps["dir"] == "descending",
    };
    DataTable::parse_model_output(&table_text)
        .ok()
        .and_then(|(t, _)| sort_data(&t, &spec).ok())
        .map(|t| t.to_pipe_table())
        .unwrap_or_default()
}

/// Scenario list stored next to the chart images.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub charts: Vec<ChartScenario>,
}

impl ScenarioFile {
    /// Loads the scenario list and registers every chart on a new model.
    pub fn load(path: &std::path::Path) -> Result<(ScenarioFile, ScriptedModel), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let file: ScenarioFile =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(std::path::Path::new("."));
        let model = ScriptedModel::new();
        for chart in &file.charts {
            let image_path = base.join(&chart.image);
            let bytes =
                std::fs::read(&image_path).map_err(|e| format!("{}: {e}", image_path.display()))?;
            model.add_chart(&bytes, chart.clone());
        }
        Ok((file, model))
    }
}
