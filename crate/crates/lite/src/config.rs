//! The single JSON experiment config: model geometry, dataset spec, training
//! hyperparameters, selector shape, proxy, budget policy, and the sweep grid.
//! Every field has a desk-scale default, so `{}` is a valid config file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::policy::{validate_p_ratio, BudgetPolicy};
use crate::selector::SelectorConfig;
use crate::train::TrainHyperparams;

/// The confidence proxy: a tiny transformer over spatially downsampled clips.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProxyConfig {
    /// Spatial downsample factor applied to clips before the proxy.
    pub downsample: usize,
    pub model: ModelConfig,
}

impl ProxyConfig {
    pub fn desk() -> Self {
        ProxyConfig {
            downsample: 4,
            model: ModelConfig {
                frames: 8,
                height: 8,
                width: 8,
                tube_t: 2,
                tube_h: 4,
                tube_w: 4,
                embed_dim: 32,
                heads: 2,
                blocks: 2,
                classes: 8,
                mlp_ratio: 2,
                ..ModelConfig::desk()
            },
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.downsample == 0 {
            return Err(Error::config("proxy.downsample must be positive"));
        }
        if model.height % self.downsample != 0 || model.width % self.downsample != 0 {
            return Err(Error::config(format!(
                "proxy.downsample {} does not divide the {}x{} frame",
                self.downsample, model.height, model.width
            )));
        }
        self.model.validate().map_err(prefix_path("proxy.model"))?;
        if self.model.frames != model.frames
            || self.model.height != model.height / self.downsample
            || self.model.width != model.width / self.downsample
        {
            return Err(Error::config(format!(
                "proxy.model expects {}x{}x{} clips but downsampling gives {}x{}x{}",
                self.model.frames,
                self.model.height,
                self.model.width,
                model.frames,
                model.height / self.downsample,
                model.width / self.downsample
            )));
        }
        if self.model.classes != model.classes {
            return Err(Error::config(
                "proxy.model.classes must match model.classes",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepConfig {
    pub policies: Vec<String>,
    pub p_ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            policies: ["oracle-true", "oracle-pred", "selector", "random", "attention", "motion"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            p_ratios: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

pub const POLICY_NAMES: [&str; 6] = [
    "oracle-true",
    "oracle-pred",
    "selector",
    "random",
    "attention",
    "motion",
];

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::config("sweep.policies must not be empty"));
        }
        for p in &self.policies {
            if !POLICY_NAMES.contains(&p.as_str()) {
                return Err(Error::config(format!(
                    "sweep.policies: unknown policy {p:?}; valid: {POLICY_NAMES:?}"
                )));
            }
        }
        if self.p_ratios.is_empty() {
            return Err(Error::config("sweep.p_ratios must not be empty"));
        }
        for &r in &self.p_ratios {
            validate_p_ratio(r).map_err(prefix_path("sweep.p_ratios"))?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("sweep.seeds must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub selector: SelectorConfig,
    pub proxy: ProxyConfig,
    pub backbone_train: TrainHyperparams,
    pub selector_train: TrainHyperparams,
    pub proxy_train: TrainHyperparams,
    pub budget: BudgetPolicy,
    pub sweep: SweepConfig,
    /// Base ratio used for the adaptive-budget report.
    pub adaptive_base_rho: f64,
    /// Reduced ratio used by the per-class decay report.
    pub decay_rho: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        ExperimentConfig {
            selector: SelectorConfig::for_model(&model),
            model,
            dataset: DatasetSpec::desk(),
            proxy: ProxyConfig::desk(),
            backbone_train: TrainHyperparams::default(),
            selector_train: TrainHyperparams {
                epochs: 30,
                ..TrainHyperparams::default()
            },
            proxy_train: TrainHyperparams::default(),
            budget: BudgetPolicy::default(),
            sweep: SweepConfig::default(),
            adaptive_base_rho: 0.9,
            decay_rho: 0.3,
        }
    }
}

fn prefix_path(path: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(msg) => Error::Config(format!("{path}: {msg}")),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(prefix_path("model"))?;
        self.dataset.validate().map_err(prefix_path("dataset"))?;
        if self.dataset.frames != self.model.frames
            || self.dataset.height != self.model.height
            || self.dataset.width != self.model.width
        {
            return Err(Error::config(format!(
                "dataset: clip geometry {}x{}x{} does not match model {}x{}x{}",
                self.dataset.frames,
                self.dataset.height,
                self.dataset.width,
                self.model.frames,
                self.model.height,
                self.model.width
            )));
        }
        self.selector.validate().map_err(prefix_path("selector"))?;
        if self.selector.embed_dim != self.model.embed_dim {
            return Err(Error::config(format!(
                "selector.embed_dim {} must match model.embed_dim {}",
                self.selector.embed_dim, self.model.embed_dim
            )));
        }
        self.proxy.validate(&self.model)?;
        self.budget.validate().map_err(prefix_path("budget"))?;
        self.sweep.validate()?;
        validate_p_ratio(self.adaptive_base_rho).map_err(prefix_path("adaptive_base_rho"))?;
        validate_p_ratio(self.decay_rho).map_err(prefix_path("decay_rho"))?;
        Ok(())
    }

    /// Load and validate a config file. Unknown fields and type errors are
    /// reported with the JSON path serde provides (line/column plus field).
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let cfg: ExperimentConfig = serde::Deserialize::deserialize(&mut de)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
