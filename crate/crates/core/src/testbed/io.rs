//! Model and dataset persistence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderPair, IdentityRecord, TestbedConfig, TrainReport};
use crate::error::{Result, UmidError};

pub const MODEL_FORMAT: &str = "umid-testbed-model";
pub const MODEL_VERSION: u32 = 1;

/// On-disk model: every encoder parameter plus the dims and config hash.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub text_feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub config_hash: String,
    pub config: TestbedConfig,
    pub final_loss: f64,
    /// Identifier of the run that produced this file, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub encoder: EncoderPair,
}

impl ModelFile {
    pub fn new(encoder: EncoderPair, config: TestbedConfig, report: &TrainReport) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            input_dim: config.identity_latent_dim,
            text_feature_dim: config.text_feature_dim,
            hidden_dim: config.hidden_dim,
            embed_dim: config.embed_dim,
            config_hash: config.hash(),
            config,
            final_loss: report.final_loss,
            run_id: None,
            encoder,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(UmidError::Format(format!(
                "unsupported model file {} v{} (expected {MODEL_FORMAT} v{MODEL_VERSION})",
                m.format, m.version
            )));
        }
        Ok(m)
    }
}

pub fn write_dataset(path: &Path, records: &[IdentityRecord]) -> Result<()> {
    crate::io::write_jsonl(path, records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<IdentityRecord>> {
    crate::io::read_jsonl(path)
}
