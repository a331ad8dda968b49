//! Detection, explanation, localization and correction of misleading charts.

use serde::{Deserialize, Serialize};

pub mod blob;
pub mod correction;
pub mod detection;
pub mod evaluation;
pub mod extraction;
pub mod gateway;
pub mod ingestion;
pub mod localization;
pub mod pipeline;
pub mod scripted;
pub mod taxonomy;

/// Non-fatal event raised somewhere in the pipeline and carried on reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub stage: String,
    pub message: String,
}

impl Warning {
    pub fn new(stage: &str, message: impl Into<String>) -> Self {
        Warning {
            stage: stage.to_string(),
            message: message.into(),
        }
    }
}
