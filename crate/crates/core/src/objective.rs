//! The joint training objective: a rejection-masked multi-stage
//! classification loss plus smooth-L1 box regression on RCNN-style offsets.
//!
//! A sample stops contributing classification gradient at stage t as soon as
//! some earlier stage already assigns its true class a probability above the
//! training threshold — the per-stage mask u is a prefix product of those
//! indicators, so it is non-increasing. Masked terms are omitted from the
//! graph entirely, which makes their parameter gradients exactly zero rather
//! than numerically zero.

use serde::{Deserialize, Serialize};

use crate::roi::BBox;
use crate::tensor::{ops, Tensor};

/// Stage weights and training thresholds for the classification loss.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Per-stage loss weights λ_1..λ_T.
    pub lambda: Vec<f64>,
    /// Training thresholds r_1..r_{T−1}: stage i confidently classifying a
    /// sample (p_{i,k*} ≥ r_i) drops it from all later stage losses.
    pub train_thresholds: Vec<f64>,
    /// Foreground class count K; class indices run 0 (background) ..= K.
    pub n_fg_classes: usize,
}

impl LossConfig {
    /// Default weighting: λ_T = 1, λ_t = 0.02/T for t < T, and a high
    /// training threshold so only near-certain samples drop out.
    pub fn with_defaults(n_stages: usize, n_fg_classes: usize) -> Self {
        assert!(n_stages >= 1);
        let mut lambda = vec![0.02 / n_stages as f64; n_stages];
        lambda[n_stages - 1] = 1.0;
        Self { lambda, train_thresholds: vec![0.95; n_stages - 1], n_fg_classes }
    }

    pub fn n_stages(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.lambda.is_empty() {
            return Err(crate::Error::config("loss.lambda must have at least one stage"));
        }
        if self.train_thresholds.len() != self.lambda.len() - 1 {
            return Err(crate::Error::config(format!(
                "loss needs {} train thresholds for {} stages, got {}",
                self.lambda.len() - 1,
                self.lambda.len(),
                self.train_thresholds.len()
            )));
        }
        Ok(())
    }
}

/// Ground-truth assignment for one RoI: class label and, for foreground,
/// the regression offsets toward its matched ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    /// 0 = background, 1..=K = foreground class.
    pub label: usize,
    /// Defined only for foreground labels.
    pub offsets: Option<[f64; 4]>,
}

impl BoxTarget {
    pub fn background() -> Self {
        Self { label: 0, offsets: None }
    }

    pub fn foreground(label: usize, offsets: [f64; 4]) -> Self {
        assert!(label > 0, "foreground label must be positive");
        Self { label, offsets: Some(offsets) }
    }

    pub fn is_foreground(&self) -> bool {
        self.label > 0
    }
}

/// Per-stage binary loss weights u_1..u_T for one sample: u_1 = 1 and
/// u_t = Π_{i<t} [p_{i,k*} < r_i]. Once a stage classifies the sample
/// confidently, all later stages ignore it.
pub fn train_mask(probs_true_class: &[f64], train_thresholds: &[f64]) -> Vec<f64> {
    let t_count = probs_true_class.len();
    assert_eq!(train_thresholds.len(), t_count - 1, "need T−1 thresholds for T stages");
    let mut u = Vec::with_capacity(t_count);
    let mut alive = 1.0;
    u.push(1.0);
    for i in 0..t_count - 1 {
        if probs_true_class[i] >= train_thresholds[i] {
            alive = 0.0;
        }
        u.push(alive);
    }
    u
}

/// Masked multi-stage classification loss: −Σ_t λ_t u_t log p_{t,k*}.
/// Masked stages are skipped entirely so they leave no trace in the graph.
pub fn cls_loss(probs: &[Tensor], label: usize, cfg: &LossConfig) -> (Tensor, Vec<f64>) {
    assert_eq!(probs.len(), cfg.n_stages());
    let p_true: Vec<f64> = probs.iter().map(|p| p.data()[label]).collect();
    let u = train_mask(&p_true, &cfg.train_thresholds);

    let mut total: Option<Tensor> = None;
    for (t, p_t) in probs.iter().enumerate() {
        if u[t] == 0.0 {
            continue;
        }
        let nll = ops::mul_scalar(
            &ops::slice(&ops::log(p_t), label, 1),
            -cfg.lambda[t],
        );
        total = Some(match total {
            Some(acc) => ops::add(&acc, &nll),
            None => nll,
        });
    }
    // u_1 = 1 always, so there is at least one term.
    (total.expect("stage 1 is never masked"), u)
}

/// RCNN box-offset encoding of a ground-truth box against a proposal:
/// tx = (gx−px)/pw, ty = (gy−py)/ph, tw = ln(gw/pw), th = ln(gh/ph).
pub fn bbox_encode(proposal: &BBox, gt: &BBox) -> [f64; 4] {
    [
        (gt.cx - proposal.cx) / proposal.w,
        (gt.cy - proposal.cy) / proposal.h,
        (gt.w / proposal.w).ln(),
        (gt.h / proposal.h).ln(),
    ]
}

/// Exact inverse of [`bbox_encode`].
pub fn bbox_decode(proposal: &BBox, offsets: [f64; 4]) -> BBox {
    BBox::new(
        proposal.cx + offsets[0] * proposal.w,
        proposal.cy + offsets[1] * proposal.h,
        proposal.w * offsets[2].exp(),
        proposal.h * offsets[3].exp(),
    )
}

/// Smooth-L1 penalty summed over coordinates: 0.5 d² for |d| < 1,
/// |d| − 0.5 otherwise, with d = pred − target.
pub fn smooth_l1(pred: &Tensor, target: &[f64]) -> Tensor {
    assert_eq!(pred.numel(), target.len());
    let diffs: Vec<f64> = pred.data().iter().zip(target).map(|(p, t)| p - t).collect();
    let value: f64 = diffs
        .iter()
        .map(|d| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 })
        .sum();
    let pc = pred.clone();
    Tensor::from_op(vec![value], vec![1], vec![pred.clone()], Box::new(move |g| {
        let gx: Vec<f64> = diffs
            .iter()
            .map(|d| g[0] * if d.abs() < 1.0 { *d } else { d.signum() })
            .collect();
        pc.accumulate_grad(&gx);
    }))
}

/// Box-regression loss for one sample: zero for background, smooth-L1 on
/// the predicted offsets of the true class otherwise. Regression is
/// unmasked — it applies to every foreground sample regardless of u.
pub fn loc_loss(box_pred: Option<&Tensor>, target: &BoxTarget) -> Option<Tensor> {
    if !target.is_foreground() {
        return None;
    }
    let pred = box_pred.expect("foreground sample needs a box prediction");
    let offsets = target.offsets.expect("foreground target carries offsets");
    Some(smooth_l1(pred, &offsets))
}

/// Everything the loss needs from the forward pass of one RoI.
pub struct SampleTerms<'a> {
    /// Per-stage normalized probability vectors (length K+1 each).
    pub probs: &'a [Tensor],
    pub target: BoxTarget,
    /// Predicted offsets for the true class (length 4); required iff the
    /// target is foreground.
    pub box_pred: Option<&'a Tensor>,
}

/// Per-step decomposition of the loss, one JSON object per training step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub step: usize,
    /// Mean per-stage classification contribution (already λ-weighted).
    pub cls_per_stage: Vec<f64>,
    /// How many samples were still unmasked at each stage.
    pub mask_counts: Vec<usize>,
    pub loc: f64,
    pub total: f64,
}

/// Batch loss: mean over samples of (masked classification + box
/// regression), plus the per-stage decomposition for logging.
pub fn total_loss(samples: &[SampleTerms], cfg: &LossConfig) -> (Tensor, LossReport) {
    assert!(!samples.is_empty(), "loss needs at least one sample");
    let t_count = cfg.n_stages();
    let mut acc: Option<Tensor> = None;
    let mut cls_per_stage = vec![0.0; t_count];
    let mut mask_counts = vec![0usize; t_count];
    let mut loc_value = 0.0;

    for sample in samples {
        let (cls, u) = cls_loss(sample.probs, sample.target.label, cfg);
        for (t, u_t) in u.iter().enumerate() {
            if *u_t > 0.0 {
                mask_counts[t] += 1;
                cls_per_stage[t] +=
                    -cfg.lambda[t] * sample.probs[t].data()[sample.target.label].max(crate::tensor::ops::LOG_CLAMP).ln();
            }
        }
        acc = Some(match acc {
            Some(a) => ops::add(&a, &cls),
            None => cls,
        });
        if let Some(loc) = loc_loss(sample.box_pred, &sample.target) {
            loc_value += loc.item();
            let a = acc.take().unwrap();
            acc = Some(ops::add(&a, &loc));
        }
    }

    let n = samples.len() as f64;
    let mean = ops::mul_scalar(&acc.unwrap(), 1.0 / n);
    let report = LossReport {
        step: 0,
        cls_per_stage: cls_per_stage.iter().map(|v| v / n).collect(),
        mask_counts,
        loc: loc_value / n,
        total: mean.item(),
    };
    (mean, report)
}
