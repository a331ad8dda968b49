//! Percentage-space overlay coordinates for detected issues.
//!
//! An annotation is anchored by `top_gap`/`left_gap`, the distance from the
//! top and left edges as a percentage of the chart. With an extent the
//! anchor is the rectangle's top-left corner; without one it is a point
//! that renders as a default-size highlight centered on it.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detection::DetectedIssue;
use crate::gateway::{Gateway, GatewayError, ModelRequest, ModelRole};
use crate::ingestion::VisualizationArtifact;
use crate::taxonomy::normalize_name;
use crate::Warning;

/// Highlight size used for point annotations, in percent of each side.
pub const DEFAULT_EXTENT_PCT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LocalizationError {
    #[error("localizer response has no usable coordinates")]
    UnparseableCoordinates,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub width_pct: f64,
    pub height_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: String,
    pub issue_ref: String,
    pub top_gap: f64,
    pub left_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Extent>,
    pub label: String,
}

impl Annotation {
    pub fn point(issue_ref: &str, top_gap: f64, left_gap: f64) -> Self {
        Annotation {
            annotation_id: format!("ann-{issue_ref}"),
            issue_ref: issue_ref.to_string(),
            top_gap,
            left_gap,
            extent: None,
            label: issue_ref.to_string(),
        }
    }

    /// Point used for hit testing: the rectangle center, or the anchor.
    pub fn center(&self) -> (f64, f64) {
        match self.extent {
            Some(e) => (
                self.left_gap + e.width_pct / 2.0,
                self.top_gap + e.height_pct / 2.0,
            ),
            None => (self.left_gap, self.top_gap),
        }
    }

    /// Checks the range invariants.
    pub fn is_valid(&self) -> bool {
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        in_range(self.top_gap)
            && in_range(self.left_gap)
            && self.extent.is_none_or(|e| {
                e.width_pct > 0.0
                    && e.height_pct > 0.0
                    && self.left_gap + e.width_pct <= 100.0 + 1e-9
                    && self.top_gap + e.height_pct <= 100.0 + 1e-9
            })
    }
}

/// Rectangle in percentage space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentRect {
    pub top: f64,
    pub left: f64,
    pub width: f64,
    pub height: f64,
}

impl PercentRect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.left
            && x <= self.left + self.width
            && y >= self.top
            && y <= self.top + self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: i64,
    pub y: i64,
    pub width: i64,
    pub height: i64,
}

fn scale(pct: f64, dim: u32) -> i64 {
    (pct / 100.0 * dim as f64).round() as i64
}

/// The annotation anchor in pixels.
pub fn to_pixel_point(annotation: &Annotation, width: u32, height: u32) -> (i64, i64) {
    (
        scale(annotation.left_gap, width),
        scale(annotation.top_gap, height),
    )
}

/// Pixel rectangle for a rendered size. Point annotations get the default
/// extent centered on the anchor, cut to the chart bounds.
pub fn to_pixel_rect(annotation: &Annotation, width: u32, height: u32) -> PixelRect {
    let rect = match annotation.extent {
        Some(e) => PercentRect {
            top: annotation.top_gap,
            left: annotation.left_gap,
            width: e.width_pct,
            height: e.height_pct,
        },
        None => {
            let half = DEFAULT_EXTENT_PCT / 2.0;
            let left = (annotation.left_gap - half).max(0.0);
            let top = (annotation.top_gap - half).max(0.0);
            let right = (annotation.left_gap + half).min(100.0);
            let bottom = (annotation.top_gap + half).min(100.0);
            PercentRect {
                top,
                left,
                width: right - left,
                height: bottom - top,
            }
        }
    };
    PixelRect {
        x: scale(rect.left, width),
        y: scale(rect.top, height),
        width: scale(rect.width, width),
        height: scale(rect.height, height),
    }
}

/// Center containment, inclusive of the gold rectangle's edges.
pub fn hit_test(annotation: &Annotation, gold: &PercentRect) -> bool {
    let (x, y) = annotation.center();
    gold.contains(x, y)
}

#[derive(Debug, Clone, PartialEq)]
struct RawCoordinate {
    issue: String,
    top_gap: f64,
    left_gap: f64,
    width: Option<f64>,
    height: Option<f64>,
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().trim_end_matches('%').trim().parse().ok(),
        _ => None,
    }
}

fn parse_json(text: &str) -> Option<Vec<RawCoordinate>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end <= start {
        return None;
    }
    let items: Vec<Value> = serde_json::from_str(&text[start..=end]).ok()?;
    let mut out = Vec::new();
    for item in items {
        let issue = item
            .get("issue")
            .or_else(|| item.get("name"))
            .and_then(Value::as_str)?;
        let (Some(top), Some(left)) = (
            item.get("top_gap").and_then(number),
            item.get("left_gap").and_then(number),
        ) else {
            continue;
        };
        out.push(RawCoordinate {
            issue: issue.to_string(),
            top_gap: top,
            left_gap: left,
            width: item.get("width").and_then(number),
            height: item.get("height").and_then(number),
        });
    }
    Some(out)
}

static LINE_FORMAT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^[\s*\-]*(?P<issue>[^:→]+?)\s*(?:→|->|:)\s*top_gap\s*[:=]?\s*(?P<top>-?\d+(?:\.\d+)?)\s*%?\s*[,;]?\s*left_gap\s*[:=]?\s*(?P<left>-?\d+(?:\.\d+)?)\s*%?(?:\s*[,;]?\s*width\s*[:=]?\s*(?P<w>-?\d+(?:\.\d+)?)\s*%?\s*[,;]?\s*height\s*[:=]?\s*(?P<h>-?\d+(?:\.\d+)?))?",
    )
    .expect("static regex")
});

fn parse_lines(text: &str) -> Vec<RawCoordinate> {
    text.lines()
        .filter_map(|line| {
            let caps = LINE_FORMAT.captures(line.trim())?;
            Some(RawCoordinate {
                issue: caps["issue"].trim().to_string(),
                top_gap: caps["top"].parse().ok()?,
                left_gap: caps["left"].parse().ok()?,
                width: caps.name("w").and_then(|m| m.as_str().parse().ok()),
                height: caps.name("h").and_then(|m| m.as_str().parse().ok()),
            })
        })
        .collect()
}

fn parse_coordinates(text: &str) -> Option<Vec<RawCoordinate>> {
    if let Some(coords) = parse_json(text) {
        return Some(coords);
    }
    let coords = parse_lines(text);
    (!coords.is_empty()).then_some(coords)
}

/// Turns a raw coordinate into a valid annotation, clamping with warnings.
fn validate(
    raw: &RawCoordinate,
    issue: &DetectedIssue,
    warnings: &mut Vec<Warning>,
) -> Option<Annotation> {
    if !raw.top_gap.is_finite() || !raw.left_gap.is_finite() {
        return None;
    }
    let mut clamp = |v: f64, what: &str| -> f64 {
        let c = v.clamp(0.0, 100.0);
        if c != v {
            warnings.push(Warning::new(
                "localization",
                format!("{}: {what} {v} clamped to {c}", issue.issue_ref),
            ));
        }
        c
    };
    let top_gap = clamp(raw.top_gap, "top_gap");
    let left_gap = clamp(raw.left_gap, "left_gap");
    let extent = match (raw.width, raw.height) {
        (Some(w), Some(h)) if w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0 => {
            let width_pct = w.min(100.0 - left_gap);
            let height_pct = h.min(100.0 - top_gap);
            if width_pct < w || height_pct < h {
                warnings.push(Warning::new(
                    "localization",
                    format!("{}: extent shrunk to fit the chart", issue.issue_ref),
                ));
            }
            (width_pct > 0.0 && height_pct > 0.0).then_some(Extent {
                width_pct,
                height_pct,
            })
        }
        (None, None) => None,
        _ => {
            warnings.push(Warning::new(
                "localization",
                format!("{}: invalid extent ignored", issue.issue_ref),
            ));
            None
        }
    };
    Some(Annotation {
        annotation_id: format!("ann-{}", issue.issue_ref),
        issue_ref: issue.issue_ref.clone(),
        top_gap,
        left_gap,
        extent,
        label: issue.name.clone(),
    })
}

fn localize_prompt(issues: &[DetectedIssue]) -> String {
    let list: Vec<String> = issues.iter().map(|i| format!("- {}", i.name)).collect();
    format!(
        "The following issues were detected in this chart:\n{}\n\n\
For each issue, locate the chart region it concerns. Give top_gap and left_gap as the \
distance from the top and left edges in percent of the image (0 to 100), and optionally \
width and height of the region in percent. For issues spread across the chart, pick the \
most representative element. Reply with only a JSON array such as:\n\
[{{\"issue\": \"Missing Title\", \"top_gap\": 2, \"left_gap\": 35, \"width\": 30, \"height\": 8}}]\n\
Omit issues you cannot place.",
        list.join("\n")
    )
}

/// One localizer call for all merged issues, with one reprompt. Issues the
/// model does not place get no annotation.
pub fn localize(
    artifact: &VisualizationArtifact,
    issues: &[DetectedIssue],
    gateway: &Gateway,
) -> Result<(Vec<Annotation>, Vec<Warning>), LocalizationError> {
    if issues.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let request = ModelRequest::new(ModelRole::Localizer, "localize")
        .user(localize_prompt(issues))
        .image(artifact.payload());
    let first = gateway.complete(&request)?;
    let coords = match parse_coordinates(&first.text) {
        Some(c) => c,
        None => {
            let retry = request
                .assistant(first.text)
                .user("Reply with only the JSON array of coordinates.");
            let second = gateway.complete(&retry)?;
            parse_coordinates(&second.text).ok_or(LocalizationError::UnparseableCoordinates)?
        }
    };
    let mut warnings = Vec::new();
    let mut annotations: Vec<Annotation> = Vec::new();
    for raw in &coords {
        let key = normalize_name(&raw.issue);
        let Some(issue) = issues
            .iter()
            .find(|i| normalize_name(&i.name) == key || normalize_name(&i.issue_ref) == key)
        else {
            warnings.push(Warning::new(
                "localization",
                format!("coordinates for unknown issue '{}' ignored", raw.issue),
            ));
            continue;
        };
        if annotations.iter().any(|a| a.issue_ref == issue.issue_ref) {
            continue;
        }
        if let Some(a) = validate(raw, issue, &mut warnings) {
            annotations.push(a);
        }
    }
    Ok((annotations, warnings))
}

/// Sets `annotation_ref` on each finding that has an annotation.
pub fn attach_annotations(findings: &mut [DetectedIssue], annotations: &[Annotation]) {
    for finding in findings {
        finding.annotation_ref = annotations
            .iter()
            .find(|a| a.issue_ref == finding.issue_ref)
            .map(|a| a.annotation_id.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Severity;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn issue(id: &str, name: &str) -> DetectedIssue {
        DetectedIssue {
            issue_ref: id.into(),
            name: name.into(),
            severity: Severity::Minor,
            explanation: "e".into(),
            recommendation: "r".into(),
            source_models: BTreeSet::new(),
            resolved: false,
            annotation_ref: None,
        }
    }

    #[test]
    fn pixel_examples() {
        let a = Annotation::point("x", 50.0, 50.0);
        assert_eq!(to_pixel_point(&a, 1000, 800), (500, 400));
        let r = to_pixel_rect(&a, 1000, 800);
        assert_eq!(
            r,
            PixelRect {
                x: 450,
                y: 360,
                width: 100,
                height: 80
            }
        );

        let mut b = Annotation::point("missing-title", 2.0, 35.0);
        b.extent = Some(Extent {
            width_pct: 30.0,
            height_pct: 8.0,
        });
        assert_eq!(
            to_pixel_rect(&b, 2000, 1000),
            PixelRect {
                x: 700,
                y: 20,
                width: 600,
                height: 80
            }
        );
        assert_eq!(
            to_pixel_rect(&b, 4000, 2000),
            PixelRect {
                x: 1400,
                y: 40,
                width: 1200,
                height: 160
            }
        );
    }

    #[test]
    fn default_extent_is_cut_at_edges() {
        let a = Annotation::point("x", 2.0, 98.0);
        let r = to_pixel_rect(&a, 1000, 1000);
        assert_eq!(
            r,
            PixelRect {
                x: 930,
                y: 0,
                width: 70,
                height: 70
            }
        );
    }

    #[test]
    fn hit_examples() {
        let gold = PercentRect {
            top: 0.0,
            left: 0.0,
            width: 50.0,
            height: 50.0,
        };
        assert!(hit_test(&Annotation::point("x", 10.0, 10.0), &gold));
        assert!(!hit_test(&Annotation::point("x", 90.0, 90.0), &gold));
        let mut rect = Annotation::point("x", 30.0, 30.0);
        rect.extent = Some(Extent {
            width_pct: 30.0,
            height_pct: 30.0,
        });
        assert!(hit_test(&rect, &gold));
    }

    #[test]
    fn parses_json_and_lines() {
        let coords = parse_coordinates(
            "Sure:\n```json\n[{\"issue\": \"Missing Title\", \"top_gap\": 2, \"left_gap\": \"35%\"}]\n```",
        )
        .unwrap();
        assert_eq!(coords[0].left_gap, 35.0);
        let coords = parse_coordinates("Missing Title → top_gap 2, left_gap 35\n- Truncated Axis: top_gap 50, left_gap 5, width 8, height 80").unwrap();
        assert_eq!(coords.len(), 2);
        assert_eq!(coords[0].issue, "Missing Title");
        assert_eq!(coords[1].width, Some(8.0));
        assert!(parse_coordinates("I can't say").is_none());
    }

    #[test]
    fn clamps_with_warning() {
        let raw = RawCoordinate {
            issue: "Missing Title".into(),
            top_gap: 140.0,
            left_gap: 35.0,
            width: Some(80.0),
            height: Some(10.0),
        };
        let mut w = Vec::new();
        let a = validate(&raw, &issue("missing-title", "Missing Title"), &mut w).unwrap();
        assert_eq!(a.top_gap, 100.0);
        assert!(a.extent.is_none());
        assert!(a.is_valid());
        assert!(!w.is_empty());
    }

    fn arb_raw() -> impl Strategy<Value = RawCoordinate> {
        (
            -50.0f64..200.0,
            -50.0f64..200.0,
            prop::option::of(-10.0f64..150.0),
            prop::option::of(-10.0f64..150.0),
        )
            .prop_map(|(top_gap, left_gap, width, height)| RawCoordinate {
                issue: "x".into(),
                top_gap,
                left_gap,
                width,
                height,
            })
    }

    proptest! {
        #[test]
        fn validation_is_total(raw in arb_raw()) {
            let mut w = Vec::new();
            let a = validate(&raw, &issue("x", "x"), &mut w).unwrap();
            prop_assert!(a.is_valid());
        }

        #[test]
        fn pixel_rect_scale_equivariant(raw in arb_raw(), w in 10u32..3000, h in 10u32..3000, s in 1u32..5) {
            let mut warnings = Vec::new();
            let a = validate(&raw, &issue("x", "x"), &mut warnings).unwrap();
            let r1 = to_pixel_rect(&a, w, h);
            let rs = to_pixel_rect(&a, w * s, h * s);
            let s = s as i64;
            let tol = (s + 1) / 2 + 1;
            prop_assert!((rs.x - s * r1.x).abs() <= tol);
            prop_assert!((rs.y - s * r1.y).abs() <= tol);
            prop_assert!((rs.width - s * r1.width).abs() <= tol);
            prop_assert!((rs.height - s * r1.height).abs() <= tol);
        }

        #[test]
        fn hit_test_agrees_with_pixel_space(
            top in 0.0f64..100.0,
            left in 0.0f64..100.0,
            g in (0.0f64..50.0, 0.0f64..50.0, 1.0f64..50.0, 1.0f64..50.0),
            w in 1u32..5000,
            h in 1u32..5000,
        ) {
            let gold = PercentRect { top: g.0, left: g.1, width: g.2, height: g.3 };
            let a = Annotation::point("x", top, left);
            let (sx, sy) = (w as f64 / 100.0, h as f64 / 100.0);
            let (px, py) = (a.left_gap * sx, a.top_gap * sy);
            let inside = px >= gold.left * sx
                && px <= (gold.left + gold.width) * sx
                && py >= gold.top * sy
                && py <= (gold.top + gold.height) * sy;
            prop_assert_eq!(hit_test(&a, &gold), inside);
        }
    }
}
