//! Run configuration: one JSON document describing the synthetic corpus,
//! the training schedule, and every model policy toggle. Commands echo a
//! resolved copy with all defaults filled in, so a run's exact settings are
//! always on disk next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{LossVariant, SCORE_CLIP};
use crate::data_io::SynthSpec;
use crate::error::{DcgnError, Result};
use crate::graph::GraphNorm;
use crate::model::{ModelArch, ModelKind};
use crate::tensor::Activation;
use crate::training::TrainConfig;

/// Model policy toggles. Several fields are fixed decisions, present so the
/// resolved config states them explicitly: they are validated rather than
/// consumed, and a config requesting a different value fails loudly instead
/// of silently drifting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub activation: Activation,
    pub affinity_clamp_negative: bool,
    pub graph_norm: GraphNorm,
    pub loss: LossVariant,
    /// Frames per shot slice seen by the shot convolution (longer shots are
    /// truncated, shorter ones zero-padded).
    pub shot_k_max: usize,
    /// Fixed "scalar": the attention bias is one value shared across window
    /// positions (softmax shift-invariance makes a per-position bias
    /// redundant).
    pub attention_bias: String,
    /// Fixed false: the head uses exactly E experts per class.
    pub moe_dummy_expert: bool,
    /// Fixed 1e-6: probability clip bound inside the losses.
    pub score_clip: f64,
    /// Fixed "natural": log base in the auto-segmentation penalty.
    pub kts_log: String,
    /// Fixed "global": GAP pools every example's top-N list into one
    /// ranking with the recall denominator counting all positives.
    pub gap_variant: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Dcgn,
            activation: Activation::Sigmoid,
            affinity_clamp_negative: true,
            graph_norm: GraphNorm::Symmetric,
            loss: LossVariant::Binary,
            shot_k_max: 4,
            attention_bias: "scalar".to_string(),
            moe_dummy_expert: false,
            score_clip: SCORE_CLIP,
            kts_log: "natural".to_string(),
            gap_variant: "global".to_string(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shot_k_max == 0 {
            return Err(DcgnError::Config("shot_k_max must be positive".into()));
        }
        if self.attention_bias != "scalar" {
            return Err(DcgnError::Config(format!(
                "attention_bias is fixed to \"scalar\", got {:?}",
                self.attention_bias
            )));
        }
        if self.moe_dummy_expert {
            return Err(DcgnError::Config(
                "moe_dummy_expert is fixed to false".into(),
            ));
        }
        if self.score_clip != SCORE_CLIP {
            return Err(DcgnError::Config(format!(
                "score_clip is fixed to {SCORE_CLIP}, got {}",
                self.score_clip
            )));
        }
        if self.kts_log != "natural" {
            return Err(DcgnError::Config(format!(
                "kts_log is fixed to \"natural\", got {:?}",
                self.kts_log
            )));
        }
        if self.gap_variant != "global" {
            return Err(DcgnError::Config(format!(
                "gap_variant is fixed to \"global\", got {:?}",
                self.gap_variant
            )));
        }
        Ok(())
    }
}

/// The whole experiment in one document. `synth` is required — it pins the
/// class count and feature width the other sections depend on — while
/// `train` and `model` default field by field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.model.validate()
    }

    /// Concrete architecture for data of the given feature width.
    pub fn arch(&self, input_dim: usize) -> ModelArch {
        ModelArch {
            kind: self.model.kind,
            input_dim,
            num_classes: self.synth.num_classes,
            num_layers: self.train.layers,
            k: self.train.k,
            filter_size: self.train.filter_size,
            moe_mixtures: self.train.moe_mixtures,
            shots_m: self.train.shots_m,
            shot_k_max: self.model.shot_k_max,
            pooling: self.train.pooling,
            activation: self.model.activation,
            affinity_clamp_negative: self.model.affinity_clamp_negative,
            graph_norm: self.model.graph_norm,
            loss: self.model.loss,
        }
    }

    /// Snapshot with every default filled in, plus the concrete architecture
    /// once one exists.
    pub fn resolved(&self, arch: Option<ModelArch>) -> ResolvedConfig {
        ResolvedConfig {
            synth: self.synth.clone(),
            train: self.train.clone(),
            model: self.model.clone(),
            arch,
        }
    }
}

/// What lands in `resolved_config.json`: the full config plus, for training
/// runs, the architecture the checkpoint parameters belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ModelArch>,
}

impl ResolvedConfig {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            synth: self.synth.clone(),
            train: self.train.clone(),
            model: self.model.clone(),
        }
    }
}

/// Parse and validate a config file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| DcgnError::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| DcgnError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Write the resolved snapshot into `dir` and return its path.
pub fn write_resolved_config(
    dir: &Path,
    cfg: &RunConfig,
    arch: Option<ModelArch>,
) -> Result<PathBuf> {
    let path = dir.join("resolved_config.json");
    let doc = serde_json::to_string_pretty(&cfg.resolved(arch)).expect("config serializes");
    fs::write(&path, doc + "\n").map_err(|e| DcgnError::io(&path, e))?;
    Ok(path)
}

/// Read back a resolved snapshot (e.g. the one written next to a
/// checkpoint).
pub fn load_resolved_config(path: &Path) -> Result<ResolvedConfig> {
    let text = fs::read_to_string(path).map_err(|e| DcgnError::io(path, e))?;
    let cfg: ResolvedConfig = serde_json::from_str(&text)
        .map_err(|e| DcgnError::Config(format!("{}: {e}", path.display())))?;
    cfg.run_config().validate()?;
    Ok(cfg)
}
