//! Full detector assembly: shared backbone, per-stage RoI heads, chain
//! parameters, and the class-conditional box-regression head, plus the
//! ablation mode switch that enables/disables the two chaining mechanisms.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chain::{
    cascade_infer_with, forward_all_stages, ChainFlags, ChainParams, ChainTrace, NormalizeKind,
    StageForward,
};
use crate::objective::bbox_decode;
use crate::params::ParamSet;
use crate::roi::{pad_box, roi_pool, BBox, Backbone, StageHead, StageSpec, BACKBONE_STRIDE};
use crate::tensor::{no_grad, ops, Tensor};

/// The four ablation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One stage, no chaining: a plain softmax RoI classifier.
    SingleStageBaseline,
    /// Features chain, but each stage scores on its own: no score
    /// accumulation, so stage t's probabilities read b_t ⊙ raw_t alone.
    ConventionalCascade,
    /// Score accumulation on, feature chaining off: stage t scores
    /// a_t ⊙ o_t (its own window only), but partial sums accumulate.
    ChainedCascadeNoFeatureChain,
    /// Both feature chaining and score chaining (the full method).
    ChainedCascade,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::SingleStageBaseline,
        Mode::ConventionalCascade,
        Mode::ChainedCascadeNoFeatureChain,
        Mode::ChainedCascade,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SingleStageBaseline => "single_stage_baseline",
            Mode::ConventionalCascade => "conventional_cascade",
            Mode::ChainedCascadeNoFeatureChain => "chained_cascade_no_feature_chain",
            Mode::ChainedCascade => "chained_cascade",
        }
    }

    pub fn flags(&self, normalize: NormalizeKind) -> ChainFlags {
        let (feature_chain, score_chain) = match self {
            Mode::SingleStageBaseline => (true, true), // vacuous at T = 1
            Mode::ConventionalCascade => (true, false),
            Mode::ChainedCascadeNoFeatureChain => (false, true),
            Mode::ChainedCascade => (true, true),
        };
        ChainFlags { feature_chain, score_chain, normalize }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let valid: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown mode {s:?}; valid modes: {}", valid.join(", "))
            })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_fg_classes: usize,
    /// Channel width of every o_t.
    pub c1: usize,
    /// Channel width of the backbone feature map.
    pub backbone_channels: usize,
    pub stages: Vec<StageSpec>,
    pub mode: Mode,
    pub normalize: NormalizeKind,
}

impl ModelConfig {
    /// Stage specs actually instantiated: the single-stage baseline keeps
    /// only the first stage's geometry.
    pub fn effective_stages(&self) -> Vec<StageSpec> {
        match self.mode {
            Mode::SingleStageBaseline => vec![self.stages[0]],
            _ => self.stages.clone(),
        }
    }
}

/// Differentiable outputs for one RoI during training.
pub struct RoiForward {
    pub stages: Vec<StageForward>,
    /// Per-class box offsets, length 4K (foreground classes only).
    pub box_pred: Tensor,
}

impl RoiForward {
    /// Per-stage probability tensors, in stage order.
    pub fn probs(&self) -> Vec<Tensor> {
        self.stages.iter().map(|s| s.probs.clone()).collect()
    }
}

/// One accepted detection from cascade inference.
#[derive(Debug, Clone)]
pub struct RoiDetection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// The assembled detector.
pub struct Model {
    pub params: ParamSet,
    pub backbone: Backbone,
    pub heads: Vec<StageHead>,
    pub chain: ChainParams,
    bbox_w: Tensor,
    bbox_b: Tensor,
    pub n_fg_classes: usize,
    pub flags: ChainFlags,
}

impl Model {
    /// Deterministic construction: the seed fixes every initial parameter.
    /// Registration order (backbone, heads, chain, box head) defines the
    /// checkpoint layout.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        assert!(cfg.n_fg_classes >= 1);
        assert!(!cfg.stages.is_empty(), "model needs at least one stage");
        let stages = cfg.effective_stages();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let backbone = Backbone::new(&mut params, &mut rng, cfg.backbone_channels);
        let heads =
            StageHead::build_all(&mut params, &mut rng, &stages, cfg.backbone_channels, cfg.c1);
        let chain = ChainParams::new(&mut params, &mut rng, stages.len(), cfg.c1, cfg.n_fg_classes);

        let n_offsets = 4 * cfg.n_fg_classes;
        let dist = Normal::new(0.0, 0.001).unwrap();
        let bbox_w = params.register(
            "bbox.w",
            Tensor::with_grad(
                (0..n_offsets * cfg.c1).map(|_| dist.sample(&mut rng)).collect(),
                &[n_offsets, cfg.c1],
            ),
            true,
        );
        let bbox_b =
            params.register("bbox.b", Tensor::with_grad(vec![0.0; n_offsets], &[n_offsets]), false);

        Self {
            params,
            backbone,
            heads,
            chain,
            bbox_w,
            bbox_b,
            n_fg_classes: cfg.n_fg_classes,
            flags: cfg.mode.flags(cfg.normalize),
        }
    }

    pub fn n_stages(&self) -> usize {
        self.heads.len()
    }

    /// Backbone feature map for one image [3, H, W].
    pub fn featmap(&self, image: &Tensor) -> Tensor {
        self.backbone.forward(image)
    }

    fn image_bounds(featmap: &Tensor) -> (f64, f64) {
        (
            (featmap.shape()[2] * BACKBONE_STRIDE) as f64,
            (featmap.shape()[1] * BACKBONE_STRIDE) as f64,
        )
    }

    /// Stage-t feature vector o_t for one RoI: contextual padding, RoI
    /// pooling at the stage's resolution, conv head, global pooling.
    pub fn stage_o(&self, featmap: &Tensor, roi: &BBox, t: usize) -> Tensor {
        let head = &self.heads[t];
        let (img_w, img_h) = Self::image_bounds(featmap);
        let padded = pad_box(roi, head.spec.context_c, img_w, img_h);
        let pooled = roi_pool(featmap, &padded, head.spec.pooled_size, BACKBONE_STRIDE);
        head.forward(&pooled)
    }

    /// Training-path forward for one RoI: every stage evaluated, no gating,
    /// differentiable end to end. Box offsets are read from the final
    /// chained feature vector.
    pub fn forward_roi(&self, featmap: &Tensor, roi: &BBox) -> RoiForward {
        let o: Vec<Tensor> =
            (0..self.n_stages()).map(|t| self.stage_o(featmap, roi, t)).collect();
        let stages = forward_all_stages(&o, &self.chain, &self.flags);
        let f_last = &stages.last().expect("at least one stage").f;
        let box_pred = ops::linear(f_last, &self.bbox_w, &self.bbox_b);
        RoiForward { stages, box_pred }
    }

    /// The 4-offset slice of `box_pred` for one foreground class.
    pub fn class_box_pred(&self, forward: &RoiForward, label: usize) -> Tensor {
        assert!(label >= 1 && label <= self.n_fg_classes, "label {label} is not foreground");
        ops::slice(&forward.box_pred, (label - 1) * 4, 4)
    }

    /// Inference for one RoI: stages are computed lazily, so a rejection
    /// skips all later heads. A surviving RoI yields one candidate
    /// detection per foreground class — scored by that class's final
    /// probability, with the class's own regressed box — and per-class NMS
    /// plus score ranking downstream decide which candidates matter.
    pub fn infer_roi(&self, featmap: &Tensor, roi: &BBox) -> (ChainTrace, Vec<RoiDetection>) {
        no_grad(|| {
            let trace = cascade_infer_with(
                self.n_stages(),
                |t| self.stage_o(featmap, roi, t),
                &self.chain,
                &self.flags,
            );
            if trace.rejected {
                return (trace, Vec::new());
            }
            let probs = trace.final_probs();

            let f_last = trace.stages.last().unwrap().f.clone();
            let f_tensor = Tensor::new(f_last.clone(), &[f_last.len()]);
            let all_offsets = ops::linear(&f_tensor, &self.bbox_w, &self.bbox_b);
            let o = all_offsets.to_vec();
            let detections = (1..=self.n_fg_classes)
                .map(|class| {
                    let offsets = [
                        o[(class - 1) * 4],
                        o[(class - 1) * 4 + 1],
                        o[(class - 1) * 4 + 2],
                        o[(class - 1) * 4 + 3],
                    ];
                    RoiDetection { class, score: probs[class], bbox: bbox_decode(roi, offsets) }
                })
                .collect();
            (trace, detections)
        })
    }
}
