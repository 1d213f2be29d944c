use std::path::Path;

use dse_core::corpus::synth::SynthConfig;
use dse_core::encoder::EncoderConfig;
use dse_core::lexical::Bm25Params;
use dse_core::training::TrainingConfig;
use serde::Deserialize;

use crate::failure::Failure;

/// Contents of `--config`. Every section is optional.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub bm25: Bm25Params,
    pub synth: SynthConfig,
    pub alpha: f64,
    pub pool_k: usize,
    pub k: usize,
    pub mine_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            encoder: EncoderConfig::default(),
            training: TrainingConfig::default(),
            bm25: Bm25Params::default(),
            synth: SynthConfig::default(),
            alpha: 0.5,
            pool_k: 100,
            k: 100,
            mine_k: 50,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, Failure> {
        let mut cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Malformed(format!("{}: {e}", p.display())))?
            }
        };
        if let Some(s) = seed.or(cfg.seed) {
            cfg.seed = Some(s);
            cfg.encoder.seed = s;
            cfg.training.seed = s;
            cfg.synth.seed = s;
        }
        Ok(cfg)
    }
}
