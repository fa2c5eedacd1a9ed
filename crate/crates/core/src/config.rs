//! The JSON run configuration shared by every command.

use crate::data::{generate_synthetic, load_embeddings, proportional_counts, read_factor_truth, split_by_identity, Dataset, SplitSpec, SyntheticSpec};
use crate::error::{FraError, Result};
use crate::eval::ProtocolConfig;
use crate::model::ModelConfig;
use crate::objective::DEFAULT_MARGIN;
use crate::train::OptimConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Files,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    pub embeddings: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    /// Optional factor-truth sidecar; enables the oracle agreement metric.
    pub factor_truth: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// `(train, val, test)` identity counts; `None` uses the 99/11/30 proportions.
    pub counts: Option<(usize, usize, usize)>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 0,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub margin: f64,
    pub split: SplitConfig,
    /// Autoencoder-only warm-up run before joint training.
    pub pretrain: PretrainConfig,
    pub eval: ProtocolConfig,
    /// Seeds model initialization and training.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            margin: DEFAULT_MARGIN,
            split: SplitConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: ProtocolConfig::default(),
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

fn prefixed(field: &str, r: Result<()>, errs: &mut Vec<String>) {
    if let Err(e) = r {
        let msg = match e {
            FraError::Config(m) => m,
            other => other.to_string(),
        };
        if msg.starts_with(field) {
            errs.push(msg);
        } else {
            errs.push(format!("{field}: {msg}"));
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FraError::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| FraError::config(format!("config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one master seed to data generation, splitting, training and evaluation.
    pub fn set_all_seeds(&mut self, seed: u64) {
        self.seed = seed;
        self.data.synthetic.seed = seed;
        self.split.seed = seed;
        self.eval.seed = seed;
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        match self.data.source {
            DataSource::Synthetic => prefixed("data.synthetic", self.data.synthetic.validate(), &mut errs),
            DataSource::Files => {
                if self.data.embeddings.is_none() {
                    errs.push("data.embeddings: required when data.source is \"files\"".into());
                }
                if self.data.landmarks.is_none() {
                    errs.push("data.landmarks: required when data.source is \"files\"".into());
                }
            }
        }
        prefixed("model", self.model.validate(), &mut errs);
        if self.data.source == DataSource::Synthetic && self.data.synthetic.dim != self.model.combiner.face_dim {
            errs.push(format!(
                "model.combiner.face_dim: {} does not match data.synthetic.dim {}",
                self.model.combiner.face_dim, self.data.synthetic.dim
            ));
        }
        prefixed("optim", self.optim.validate(), &mut errs);
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            errs.push(format!("margin: must be a finite number ≥ 0, got {}", self.margin));
        }
        if let Some((tr, _, te)) = self.split.counts {
            if tr == 0 || te == 0 {
                errs.push("split.counts: train and test counts must be ≥ 1".into());
            }
        }
        let p = &self.pretrain;
        if p.steps > 0 {
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                errs.push(format!("pretrain.lr: must be positive, got {}", p.lr));
            }
            if !(0.0..1.0).contains(&p.momentum) {
                errs.push(format!("pretrain.momentum: must lie in [0, 1), got {}", p.momentum));
            }
            if p.batch_size == 0 {
                errs.push("pretrain.batch_size: must be ≥ 1".into());
            }
        }
        let e = &self.eval;
        if !(e.holdout_fraction > 0.0 && e.holdout_fraction < 1.0) {
            errs.push(format!("eval.holdout_fraction: must lie in (0, 1), got {}", e.holdout_fraction));
        }
        if !(e.probe.l2_penalty > 0.0 && e.probe.l2_penalty.is_finite()) {
            errs.push(format!("eval.probe.l2_penalty: must be positive, got {}", e.probe.l2_penalty));
        }
        if e.probe.max_steps == 0 {
            errs.push("eval.probe.max_steps: must be ≥ 1".into());
        }
        if self.out.as_os_str().is_empty() {
            errs.push("out: must name a directory".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(FraError::config(errs.join("; ")))
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::Synthetic => generate_synthetic(&self.data.synthetic),
            DataSource::Files => {
                let (Some(e), Some(l)) = (&self.data.embeddings, &self.data.landmarks) else {
                    return Err(FraError::config("data.embeddings and data.landmarks are required"));
                };
                let ds = load_embeddings(e, l)?;
                match &self.data.factor_truth {
                    Some(t) => ds.with_factor_truth(read_factor_truth(t)?),
                    None => Ok(ds),
                }
            }
        }
    }

    pub fn split(&self, dataset: &Dataset) -> Result<SplitSpec> {
        let counts = self
            .split
            .counts
            .unwrap_or_else(|| proportional_counts(dataset.identities().len()));
        split_by_identity(dataset, counts, self.split.seed)
    }
}
