use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{EquivalenceConfig, Method, PTrueFrame, SamplingParams};
use crate::datasets::{DatasetFormat, LoadOptions};
use crate::model::{HeadNormPolicy, LayerSelection};
use crate::prompts::{PromptTemplate, ScoredSpan};
use crate::{Error, Result};

/// Everything that determines a run. Serialized as TOML on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    #[serde(default)]
    pub layers: LayerSelection,
    #[serde(default)]
    pub head_norm_policy: HeadNormPolicy,
    #[serde(default)]
    pub scored_span: ScoredSpan,
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance: Option<BalanceConfig>,
    /// `none`, `open_ended`, `binary`, `certainty` or `custom:<instruction>`.
    pub templates: Vec<String>,
    pub methods: Vec<Method>,
    #[serde(default = "default_reject")]
    pub reject_fractions: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_reject() -> Vec<f64> {
    vec![0.1, 0.2, 0.3]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub format: DatasetFormat,
    /// Keep only the first `limit` examples (after balancing).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default = "default_history")]
    pub history_turns: usize,
}

fn default_history() -> usize {
    LoadOptions::default().history_turns
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    /// Target answerable : unanswerable ratio.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// P(True) demonstrations.
    pub k: usize,
    /// Token budget for generated answers.
    pub max_tokens: usize,
    pub n_samples: usize,
    /// Solved examples placed ahead of each semantic-entropy prompt.
    pub se_shots: usize,
    pub temperature: f64,
    pub equivalence: EquivalenceConfig,
    pub p_true_frame: PTrueFrame,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            k: 10,
            max_tokens: 16,
            n_samples: 10,
            se_shots: 0,
            temperature: 1.0,
            equivalence: EquivalenceConfig::default(),
            p_true_frame: PTrueFrame::default(),
        }
    }
}

impl BaselineConfig {
    pub fn sampling(&self, seed: u64) -> SamplingParams {
        SamplingParams { n_samples: self.n_samples, temperature: self.temperature, max_tokens: self.max_tokens, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Held-out training sizes for the logistic calibrator.
    pub sizes: Vec<usize>,
    pub bins: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { sizes: vec![10, 100], bins: 10 }
    }
}

impl RunConfig {
    /// Minimal config for `model` on `dataset`; other fields take defaults.
    pub fn new(model: impl Into<String>, dataset: DatasetConfig, templates: Vec<String>, methods: Vec<Method>) -> Self {
        Self {
            model: model.into(),
            layers: LayerSelection::All,
            head_norm_policy: HeadNormPolicy::default(),
            scored_span: ScoredSpan::default(),
            dataset,
            balance: None,
            templates,
            methods,
            reject_fractions: default_reject(),
            seed: 0,
            baselines: BaselineConfig::default(),
            calibration: CalibrationConfig::default(),
            out: default_out(),
        }
    }

    /// Reads a TOML config. A relative dataset path is taken relative to
    /// the config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if config.dataset.path.is_relative() {
            if let Some(dir) = path.parent() {
                config.dataset.path = dir.join(&config.dataset.path);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn parsed_templates(&self) -> Result<Vec<PromptTemplate>> {
        self.templates.iter().map(|t| t.parse()).collect()
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { history_turns: self.dataset.history_turns }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::Config(msg));
        if self.methods.is_empty() {
            return invalid("methods must not be empty".into());
        }
        if self.templates.is_empty() {
            return invalid("templates must not be empty".into());
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return invalid("methods contain duplicates".into());
        }
        if self.templates.iter().collect::<BTreeSet<_>>().len() != self.templates.len() {
            return invalid("templates contain duplicates".into());
        }
        for t in self.parsed_templates()? {
            t.validate()?;
        }
        if let Some(f) = self.reject_fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return invalid(format!("reject fraction {f} not in [0, 1)"));
        }
        if let Some(b) = &self.balance {
            if !(b.ratio > 0.0 && b.ratio.is_finite()) {
                return invalid(format!("balance ratio {} must be positive", b.ratio));
            }
        }
        if self.dataset.limit == Some(0) {
            return invalid("dataset limit must be positive".into());
        }
        if self.calibration.bins == 0 || self.calibration.sizes.contains(&0) {
            return invalid("calibration bins and sizes must be positive".into());
        }
        if self.methods.contains(&Method::SemanticEntropy) && self.baselines.n_samples < 2 {
            return invalid("semantic_entropy needs n_samples >= 2".into());
        }
        if self.baselines.max_tokens == 0 {
            return invalid("max_tokens must be positive".into());
        }
        if !(self.baselines.temperature > 0.0 && self.baselines.temperature.is_finite()) {
            return invalid(format!("temperature {} must be positive", self.baselines.temperature));
        }
        self.baselines.equivalence.build()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of every field except `out`.
    pub fn config_hash(&self) -> String {
        let mut copy = self.clone();
        copy.out = PathBuf::new();
        let bytes = serde_json::to_vec(&copy).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
