//! Run configuration: one TOML document binding stage geometry, chaining
//! flags, loss weights, optimizer settings, and synthetic-data parameters
//! for a single experiment. Unknown keys are hard errors so a typo in an
//! ablation flag fails loudly instead of silently running the wrong thing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::NormalizeKind;
use crate::data::MAX_CLASSES;
use crate::model::{Mode, ModelConfig};
use crate::objective::LossConfig;
use crate::roi::{default_stages, StageSpec};
use crate::{Error, Result};

/// Complete settings for one run. `stages` is the only required key; every
/// other field and section falls back to the documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Cascade stage geometry in order. Required: every run must state its
    /// cascade explicitly.
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; a CLI `--out` flag takes precedence when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub data: DataSection,
}

fn default_mode() -> Mode {
    Mode::ChainedCascade
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_fg_classes: usize,
    /// Channel width of each stage's pooled feature vector o_t.
    pub c1: usize,
    pub backbone_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_fg_classes: 8, c1: 64, backbone_channels: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub normalize: NormalizeKind,
    /// Inference rejection thresholds r_1..r_T; omitted means all zero
    /// (no rejection), the right setting for training and calibration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
}

impl Default for ChainSection {
    fn default() -> Self {
        Self { normalize: NormalizeKind::Softmax, thresholds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Per-stage weights λ_1..λ_T; omitted means λ_T = 1, λ_t = 0.02/T.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    /// Training thresholds r_1..r_{T−1} for loss masking; omitted means
    /// 0.95 everywhere.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// RoIs sampled per step, all from the same image.
    pub batch_rois: usize,
    /// Fractions of `steps` at which lr is multiplied by 0.1.
    pub lr_milestones: Vec<f64>,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 0.0005,
            steps: 1500,
            batch_rois: 8,
            lr_milestones: vec![0.6, 0.85],
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_train_images: usize,
    pub n_test_images: usize,
    pub image_size: usize,
    pub proposals_per_image: usize,
    /// Positive proposals jitter the ground truth by up to this fraction
    /// of box size.
    pub jitter: f64,
    pub neg_fraction: f64,
    /// Each image draws between one and this many objects.
    pub max_objects: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_train_images: 500,
            n_test_images: 200,
            image_size: 96,
            proposals_per_image: 64,
            jitter: 0.25,
            neg_fraction: 0.5,
            max_objects: 3,
        }
    }
}

impl RunConfig {
    /// The full default configuration: four-stage geometry with pooled
    /// sizes (14, 22, 16, 14) and context ratios (0, 0.5, 0.8, 1.7).
    pub fn with_default_stages() -> Self {
        Self {
            stages: default_stages(),
            mode: default_mode(),
            seed: 0,
            out_dir: None,
            model: ModelSection::default(),
            chain: ChainSection::default(),
            loss: LossSection::default(),
            optimizer: OptimizerSection::default(),
            data: DataSection::default(),
        }
    }

    /// Parse and validate a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stage count after applying the mode (the single-stage baseline
    /// keeps only the first stage).
    pub fn effective_n_stages(&self) -> usize {
        match self.mode {
            Mode::SingleStageBaseline => 1,
            _ => self.stages.len(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_fg_classes: self.model.n_fg_classes,
            c1: self.model.c1,
            backbone_channels: self.model.backbone_channels,
            stages: self.stages.clone(),
            mode: self.mode,
            normalize: self.chain.normalize,
        }
    }

    /// Loss settings for the effective stage count, with config overrides
    /// applied on top of the defaults.
    pub fn loss_config(&self) -> LossConfig {
        let mut cfg =
            LossConfig::with_defaults(self.effective_n_stages(), self.model.n_fg_classes);
        if self.mode == Mode::ConventionalCascade {
            // Down-weighting early stages balances the accumulated objective
            // of the chained modes; a conventional cascade's stages are
            // independent classifiers, and each trains at full weight.
            cfg.lambda = vec![1.0; cfg.lambda.len()];
        }
        if let Some(lambda) = &self.loss.lambda {
            cfg.lambda = lambda.clone();
        }
        if let Some(tt) = &self.loss.train_thresholds {
            cfg.train_thresholds = tt.clone();
        }
        cfg
    }

    /// Inference rejection thresholds: the configured vector, or zeros.
    pub fn thresholds(&self) -> Vec<f64> {
        self.chain
            .thresholds
            .clone()
            .unwrap_or_else(|| vec![0.0; self.effective_n_stages()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("stages must list at least one stage"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.pooled_size == 0 {
                return Err(Error::config(format!("stages[{i}].pooled_size must be positive")));
            }
            if s.context_c < 0.0 {
                return Err(Error::config(format!("stages[{i}].context_c must be nonnegative")));
            }
        }
        if !(2..=MAX_CLASSES).contains(&self.model.n_fg_classes) {
            return Err(Error::config(format!(
                "model.n_fg_classes must be in 2..={MAX_CLASSES}, got {}",
                self.model.n_fg_classes
            )));
        }
        if self.model.c1 == 0 || self.model.backbone_channels == 0 {
            return Err(Error::config("model.c1 and model.backbone_channels must be positive"));
        }
        let t = self.effective_n_stages();
        if let Some(r) = &self.chain.thresholds {
            if r.len() != t {
                return Err(Error::config(format!(
                    "chain.thresholds needs {t} entries for this mode, got {}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("chain.thresholds entries must lie in [0, 1]"));
            }
        }
        if let Some(lambda) = &self.loss.lambda {
            if lambda.len() != t {
                return Err(Error::config(format!(
                    "loss.lambda needs {t} entries for this mode, got {}",
                    lambda.len()
                )));
            }
            if lambda.iter().any(|v| *v <= 0.0) {
                return Err(Error::config("loss.lambda entries must be positive"));
            }
        }
        if let Some(tt) = &self.loss.train_thresholds {
            if tt.len() != t - 1 {
                return Err(Error::config(format!(
                    "loss.train_thresholds needs {} entries for {t} stages, got {}",
                    t - 1,
                    tt.len()
                )));
            }
            if tt.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("loss.train_thresholds entries must lie in [0, 1]"));
            }
        }
        let o = &self.optimizer;
        if o.lr < 0.0 || o.weight_decay < 0.0 {
            return Err(Error::config("optimizer.lr and weight_decay must be nonnegative"));
        }
        if o.steps == 0 || o.batch_rois == 0 {
            return Err(Error::config("optimizer.steps and batch_rois must be positive"));
        }
        if o.lr_milestones.windows(2).any(|w| w[0] >= w[1])
            || o.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m) || *m == 0.0)
        {
            return Err(Error::config(
                "optimizer.lr_milestones must be strictly increasing fractions in (0, 1]",
            ));
        }
        let d = &self.data;
        if d.n_train_images == 0 || d.n_test_images == 0 {
            return Err(Error::config("data.n_train_images and n_test_images must be positive"));
        }
        if d.image_size < 32 {
            return Err(Error::config("data.image_size must be at least 32"));
        }
        if d.proposals_per_image == 0 {
            return Err(Error::config("data.proposals_per_image must be positive"));
        }
        if !(0.0..1.0).contains(&d.jitter) {
            return Err(Error::config("data.jitter must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&d.neg_fraction) {
            return Err(Error::config("data.neg_fraction must lie in [0, 1]"));
        }
        if d.max_objects == 0 {
            return Err(Error::config("data.max_objects must be positive"));
        }
        Ok(())
    }
}
