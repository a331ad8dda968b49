//! Image upload normalization and chart-type classification.

use std::fmt;
use std::io::Cursor;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::blob::sha256_hex;
use crate::gateway::{Gateway, GatewayError, ImagePayload, ModelRequest, ModelRole};
use crate::Warning;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IngestError {
    #[error("unsupported image format (PNG or JPEG required)")]
    UnsupportedFormat,
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("image has a zero dimension")]
    ZeroDimension,
    #[error("upload of {size} bytes exceeds the {limit}-byte cap")]
    TooLarge { size: u64, limit: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImageFormatKind {
    Png,
    Jpeg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMetadata {
    pub width_px: u32,
    pub height_px: u32,
    pub format: ImageFormatKind,
    pub byte_size: u64,
    pub content_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartType {
    Bar,
    Line,
    PieDonut,
    Scatter,
    Map,
    Heatmap,
    Area,
    Other,
}

impl ChartType {
    pub const ALL: [ChartType; 8] = [
        ChartType::Bar,
        ChartType::Line,
        ChartType::PieDonut,
        ChartType::Scatter,
        ChartType::Map,
        ChartType::Heatmap,
        ChartType::Area,
        ChartType::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ChartType::Bar => "bar",
            ChartType::Line => "line",
            ChartType::PieDonut => "pie/donut",
            ChartType::Scatter => "scatter",
            ChartType::Map => "map",
            ChartType::Heatmap => "heatmap",
            ChartType::Area => "area",
            ChartType::Other => "other",
        }
    }
}

impl fmt::Display for ChartType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub max_dimension: u32,
    pub max_upload_bytes: u64,
    /// Inputs whose larger side is below this get a low-resolution warning.
    pub low_resolution_px: u32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            max_dimension: 2048,
            max_upload_bytes: 20 * 1024 * 1024,
            low_resolution_px: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub bytes: Vec<u8>,
    pub width_px: u32,
    pub height_px: u32,
    pub metadata: ImageMetadata,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualizationArtifact {
    pub artifact_id: String,
    #[serde(skip)]
    pub original_bytes: Vec<u8>,
    #[serde(skip)]
    pub normalized_bytes: Vec<u8>,
    pub normalized_width_px: u32,
    pub normalized_height_px: u32,
    pub metadata: ImageMetadata,
    /// `None` until classified.
    pub chart_type: Option<ChartType>,
    #[serde(default)]
    pub warnings: Vec<Warning>,
}

impl VisualizationArtifact {
    pub fn payload(&self) -> ImagePayload {
        ImagePayload::png(self.normalized_bytes.clone())
    }
}

/// Largest-side clamp that keeps the aspect ratio.
pub fn clamp_dimensions(width: u32, height: u32, max_dimension: u32) -> (u32, u32) {
    let longest = width.max(height);
    if longest <= max_dimension {
        return (width, height);
    }
    let scale = max_dimension as f64 / longest as f64;
    let w = ((width as f64 * scale).round() as u32).clamp(1, max_dimension);
    let h = ((height as f64 * scale).round() as u32).clamp(1, max_dimension);
    (w, h)
}

fn has_animation_chunk(bytes: &[u8]) -> bool {
    // APNG announces itself with an acTL chunk ahead of the first IDAT.
    let idat = bytes
        .windows(4)
        .position(|w| w == b"IDAT")
        .unwrap_or(bytes.len());
    bytes[..idat].windows(4).any(|w| w == b"acTL")
}

/// Decodes, converts to 8-bit RGB, clamps the size and re-encodes as PNG.
/// Re-encoding drops all ancillary metadata of the original file.
pub fn normalize_image(bytes: &[u8], config: &IngestConfig) -> Result<Normalized, IngestError> {
    if bytes.len() as u64 > config.max_upload_bytes {
        return Err(IngestError::TooLarge {
            size: bytes.len() as u64,
            limit: config.max_upload_bytes,
        });
    }
    let format = match image::guess_format(bytes) {
        Ok(ImageFormat::Png) => ImageFormatKind::Png,
        Ok(ImageFormat::Jpeg) => ImageFormatKind::Jpeg,
        _ => return Err(IngestError::UnsupportedFormat),
    };
    let (width, height) = image::ImageReader::with_format(
        Cursor::new(bytes),
        match format {
            ImageFormatKind::Png => ImageFormat::Png,
            ImageFormatKind::Jpeg => ImageFormat::Jpeg,
        },
    )
    .into_dimensions()
    .map_err(|e| IngestError::CorruptImage(e.to_string()))?;
    if width == 0 || height == 0 {
        return Err(IngestError::ZeroDimension);
    }
    let decoded = image::load_from_memory(bytes).map_err(|e| match e {
        image::ImageError::Unsupported(_) => IngestError::UnsupportedFormat,
        other => IngestError::CorruptImage(other.to_string()),
    })?;

    let mut warnings = Vec::new();
    if format == ImageFormatKind::Png && has_animation_chunk(bytes) {
        warnings.push(Warning::new(
            "ingestion",
            "animated image: only the first frame is analyzed",
        ));
    }
    if width.max(height) < config.low_resolution_px {
        warnings.push(Warning::new(
            "ingestion",
            format!("low resolution input ({width}x{height}); detection quality may degrade"),
        ));
    }

    let rgb = decoded.to_rgb8();
    let (w, h) = clamp_dimensions(width, height, config.max_dimension);
    let rgb = if (w, h) == (width, height) {
        rgb
    } else {
        image::imageops::resize(&rgb, w, h, image::imageops::FilterType::Triangle)
    };
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(rgb)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| IngestError::CorruptImage(e.to_string()))?;

    Ok(Normalized {
        bytes: out.into_inner(),
        width_px: w,
        height_px: h,
        metadata: ImageMetadata {
            width_px: width,
            height_px: height,
            format,
            byte_size: bytes.len() as u64,
            content_hash: sha256_hex(bytes),
        },
        warnings,
    })
}

/// Normalizes an upload into an unclassified artifact. The id derives from
/// the content hash, so identical uploads share an id.
pub fn ingest(bytes: &[u8], config: &IngestConfig) -> Result<VisualizationArtifact, IngestError> {
    let normalized = normalize_image(bytes, config)?;
    Ok(VisualizationArtifact {
        artifact_id: format!("art-{}", &normalized.metadata.content_hash[..16]),
        original_bytes: bytes.to_vec(),
        normalized_bytes: normalized.bytes,
        normalized_width_px: normalized.width_px,
        normalized_height_px: normalized.height_px,
        metadata: normalized.metadata,
        chart_type: None,
        warnings: normalized.warnings,
    })
}

const CHART_TYPE_PROMPT: &str = "What type of chart is shown in this image? \
Answer with exactly one of: bar, line, pie/donut, scatter, map, heatmap, area, other.";

/// Maps a free-text answer to a chart type. The earliest keyword in the text
/// wins; `None` means the answer names no known type.
pub fn parse_chart_type(answer: &str) -> Option<ChartType> {
    let lower = answer.to_lowercase();
    let tokens: Vec<&str> = lower
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();
    for (i, raw) in tokens.iter().enumerate() {
        let token = raw.strip_suffix('s').filter(|t| t.len() > 2).unwrap_or(raw);
        let next = tokens.get(i + 1).copied().unwrap_or("");
        let found = match token {
            "heatmap" => Some(ChartType::Heatmap),
            "heat" if next.starts_with("map") => Some(ChartType::Heatmap),
            "pie" | "donut" | "doughnut" | "piechart" => Some(ChartType::PieDonut),
            "scatter" | "scatterplot" => Some(ChartType::Scatter),
            "area" => Some(ChartType::Area),
            "bar" | "barchart" | "column" | "histogram" => Some(ChartType::Bar),
            "line" | "linechart" => Some(ChartType::Line),
            "map" | "choropleth" => Some(ChartType::Map),
            "other" => Some(ChartType::Other),
            _ => None,
        };
        if found.is_some() {
            return found;
        }
    }
    None
}

/// Asks the extractor model for the chart type, reprompting once on an
/// unusable answer and falling back to `Other` with a warning.
pub fn detect_chart_type(
    artifact: &VisualizationArtifact,
    gateway: &Gateway,
) -> Result<(ChartType, Option<Warning>), GatewayError> {
    let request = ModelRequest::new(ModelRole::Extractor, "chart-type")
        .user(CHART_TYPE_PROMPT)
        .image(artifact.payload())
        .max_output(64);
    let first = gateway.complete(&request)?;
    if let Some(kind) = parse_chart_type(&first.text) {
        return Ok((kind, None));
    }
    let retry = request
        .assistant(first.text)
        .user("Reply with a single word from the list: bar, line, pie/donut, scatter, map, heatmap, area, other.");
    let second = gateway.complete(&retry)?;
    match parse_chart_type(&second.text) {
        Some(kind) => Ok((kind, None)),
        None => Ok((
            ChartType::Other,
            Some(Warning::new(
                "ingestion",
                format!("chart type answer unparseable: '{}'", second.text.trim()),
            )),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use proptest::prelude::*;

    fn png(w: u32, h: u32) -> Vec<u8> {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(img)
            .write_to(&mut out, ImageFormat::Png)
            .unwrap();
        out.into_inner()
    }

    fn jpeg(w: u32, h: u32) -> Vec<u8> {
        let img = RgbImage::from_fn(w, h, |x, _| Rgb([(x % 256) as u8, 100, 200]));
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(img)
            .write_to(&mut out, ImageFormat::Jpeg)
            .unwrap();
        out.into_inner()
    }

    #[test]
    fn large_png_is_clamped() {
        let n = normalize_image(&png(4096, 2048), &IngestConfig::default()).unwrap();
        assert_eq!((n.width_px, n.height_px), (2048, 1024));
        assert_eq!((n.metadata.width_px, n.metadata.height_px), (4096, 2048));
        let decoded = image::load_from_memory(&n.bytes).unwrap();
        assert!(matches!(decoded, DynamicImage::ImageRgb8(_)));
    }

    #[test]
    fn small_jpeg_keeps_dimensions() {
        let bytes = jpeg(800, 600);
        let n = normalize_image(&bytes, &IngestConfig::default()).unwrap();
        assert_eq!((n.width_px, n.height_px), (800, 600));
        assert_eq!(n.metadata.format, ImageFormatKind::Jpeg);
        assert_eq!(image::guess_format(&n.bytes).unwrap(), ImageFormat::Png);
        assert!(n.warnings.is_empty());
    }

    #[test]
    fn rejects_non_images() {
        assert_eq!(
            normalize_image(b"just some text", &IngestConfig::default()),
            Err(IngestError::UnsupportedFormat)
        );
        let mut truncated = png(20, 20);
        truncated.truncate(40);
        assert!(matches!(
            normalize_image(&truncated, &IngestConfig::default()),
            Err(IngestError::CorruptImage(_))
        ));
        let config = IngestConfig {
            max_upload_bytes: 10,
            ..Default::default()
        };
        assert!(matches!(
            normalize_image(&png(20, 20), &config),
            Err(IngestError::TooLarge { .. })
        ));
    }

    #[test]
    fn low_resolution_warning() {
        let n = normalize_image(&png(300, 200), &IngestConfig::default()).unwrap();
        assert_eq!(n.warnings.len(), 1);
        assert!(n.warnings[0].message.contains("low resolution"));
    }

    #[test]
    fn normalization_is_idempotent() {
        let config = IngestConfig::default();
        let once = normalize_image(&png(3000, 1000), &config).unwrap();
        let twice = normalize_image(&once.bytes, &config).unwrap();
        assert_eq!(once.bytes, twice.bytes);
        assert_eq!(
            (once.width_px, once.height_px),
            (twice.width_px, twice.height_px)
        );
    }

    #[test]
    fn artifact_id_is_stable() {
        let bytes = png(600, 400);
        let a = ingest(&bytes, &IngestConfig::default()).unwrap();
        let b = ingest(&bytes, &IngestConfig::default()).unwrap();
        assert_eq!(a.artifact_id, b.artifact_id);
        assert_eq!(a.metadata.content_hash, sha256_hex(&bytes));
    }

    #[test]
    fn chart_type_keywords() {
        assert_eq!(parse_chart_type("bar chart"), Some(ChartType::Bar));
        assert_eq!(parse_chart_type("A donut."), Some(ChartType::PieDonut));
        assert_eq!(parse_chart_type("Heat map"), Some(ChartType::Heatmap));
        assert_eq!(parse_chart_type("heatmap"), Some(ChartType::Heatmap));
        assert_eq!(
            parse_chart_type("choropleth map of states"),
            Some(ChartType::Map)
        );
        assert_eq!(parse_chart_type("Scatterplot"), Some(ChartType::Scatter));
        assert_eq!(
            parse_chart_type("stacked area chart"),
            Some(ChartType::Area)
        );
        assert_eq!(parse_chart_type("Line charts"), Some(ChartType::Line));
        assert_eq!(parse_chart_type("I cannot tell"), None);
    }

    proptest! {
        #[test]
        fn clamp_preserves_ratio(w in 1u32..10_000, h in 1u32..10_000) {
            let (nw, nh) = clamp_dimensions(w, h, 2048);
            prop_assert!(nw.max(nh) <= 2048);
            if w.max(h) <= 2048 {
                prop_assert_eq!((nw, nh), (w, h));
            } else if nw.min(nh) > 100 {
                // integer pixels bound the ratio error by 0.5 / short side
                let before = w as f64 / h as f64;
                let after = nw as f64 / nh as f64;
                prop_assert!(((after - before) / before).abs() < 0.005);
            }
        }

        #[test]
        fn chart_type_parse_is_total(s in "\\PC{0,40}") {
            let _ = parse_chart_type(&s);
        }
    }
}
