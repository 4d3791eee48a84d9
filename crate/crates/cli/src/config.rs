//! The optional TOML run configuration. Every value can be overridden by
//! the matching command-line flag.

use std::path::Path;

use nodulekit::eval::ApInterpolation;
use nodulekit::manifest::DopplerParams;
use nodulekit::synth::{PerturbConfig, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub workers: Option<usize>,
    pub ingest: IngestSection,
    pub doppler: DopplerSection,
    pub split: SplitSection,
    pub eval: EvalSection,
    pub synth: SynthConfig,
    pub perturb: PerturbConfig,
    /// Training hyperparameters, copied into manifests untouched.
    pub passthrough: Option<toml::Table>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub hash_patient_ids: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DopplerSection {
    pub chroma_threshold: u8,
    pub min_fraction: f64,
}

impl Default for DopplerSection {
    fn default() -> Self {
        let d = DopplerParams::default();
        Self {
            chroma_threshold: d.chroma_threshold,
            min_fraction: d.min_fraction,
        }
    }
}

impl DopplerSection {
    pub fn params(&self) -> DopplerParams {
        DopplerParams {
            chroma_threshold: self.chroma_threshold,
            min_fraction: self.min_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.15, 0.05],
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: f64,
    pub score_floor: f64,
    pub interpolation: ApInterpolation,
    pub model_tag: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_floor: 0.0,
            interpolation: ApInterpolation::Point101,
            model_tag: "model".into(),
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config: {e}")).at(path))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(e.to_string()).at(path))
}

impl FileConfig {
    pub fn passthrough_json(&self) -> Option<serde_json::Value> {
        self.passthrough
            .as_ref()
            .map(|t| serde_json::to_value(t).expect("toml table converts to json"))
    }
}

pub fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected three comma-separated ratios, got {s:?}"));
    };
    let num = |v: &str| v.parse::<f64>().map_err(|_| format!("bad ratio {v:?}"));
    Ok([num(a)?, num(b)?, num(c)?])
}
