//! Detection evaluation: per-class greedy NMS, VOC-style average precision
//! with all-point interpolation, rejection-threshold calibration from
//! traces, and the full evaluation pass producing per-stage score and
//! rejection statistics.

use serde::{Deserialize, Serialize};

use crate::chain::TraceRecord;
use crate::data::{gen_proposals, SynthScene};
use crate::model::Model;
use crate::roi::BBox;
use crate::tensor::no_grad;

/// One scored detection.
#[derive(Debug, Clone)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    /// Foreground class 1..=K.
    pub class: usize,
    pub score: f64,
}

/// One ground-truth object, flattened across images.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
}

/// Greedy per-image, per-class non-maximum suppression: repeatedly keep the
/// highest-scored remaining detection and drop others of the same class and
/// image overlapping it above `iou_threshold`. Ties break on input order.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut keep_flags = vec![false; dets.len()];
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep_flags[i] = true;
        for &j in &order[rank + 1..] {
            if !suppressed[j]
                && dets[j].image == dets[i].image
                && dets[j].class == dets[i].class
                && dets[j].bbox.iou(&dets[i].bbox) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    let mut idx = 0;
    dets.retain(|_| {
        let keep = keep_flags[idx];
        idx += 1;
        keep
    });
    dets
}

/// Per-class average precision at a fixed IoU threshold, VOC protocol:
/// detections are matched in descending score order, each ground truth at
/// most once; AP is the area under the monotone precision envelope over
/// all recall points. Returns one AP per class 1..=K.
pub fn map_eval(
    detections: &[Detection],
    gt: &[GroundTruth],
    iou_threshold: f64,
    n_fg_classes: usize,
) -> Vec<f64> {
    (1..=n_fg_classes)
        .map(|class| {
            let class_gt: Vec<&GroundTruth> = gt.iter().filter(|g| g.class == class).collect();
            let mut dets: Vec<&Detection> =
                detections.iter().filter(|d| d.class == class).collect();
            dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            if class_gt.is_empty() || dets.is_empty() {
                return 0.0;
            }

            let mut matched = vec![false; class_gt.len()];
            let mut tp = Vec::with_capacity(dets.len());
            for det in &dets {
                let best = class_gt
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| g.image == det.image)
                    .map(|(gi, g)| (gi, det.bbox.iou(&g.bbox)))
                    .fold((usize::MAX, f64::NEG_INFINITY), |acc, cur| {
                        if cur.1 > acc.1 {
                            cur
                        } else {
                            acc
                        }
                    });
                if best.1 >= iou_threshold && !matched[best.0] {
                    matched[best.0] = true;
                    tp.push(true);
                } else {
                    tp.push(false);
                }
            }

            // Precision/recall curve and its all-point interpolated area.
            let n_gt = class_gt.len() as f64;
            let mut tp_cum = 0.0;
            let (mut precisions, mut recalls) = (Vec::new(), Vec::new());
            for (i, is_tp) in tp.iter().enumerate() {
                if *is_tp {
                    tp_cum += 1.0;
                }
                precisions.push(tp_cum / (i + 1) as f64);
                recalls.push(tp_cum / n_gt);
            }
            // Monotone envelope from the right.
            for i in (0..precisions.len().saturating_sub(1)).rev() {
                precisions[i] = precisions[i].max(precisions[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (p, r) in precisions.iter().zip(&recalls) {
                if *r > prev_recall {
                    ap += (r - prev_recall) * p;
                    prev_recall = *r;
                }
            }
            ap
        })
        .collect()
}

/// Set rejection thresholds from traces of negatives collected with all
/// thresholds at zero. `neg_stage_probs` holds each negative's per-stage
/// max foreground probability; r_t is chosen as the quantile that rejects
/// the target fraction of negatives still surviving at stage t.
pub fn calibrate_thresholds(neg_stage_probs: &[Vec<f64>], target_reject: &[f64]) -> Vec<f64> {
    let t_count = target_reject.len();
    let mut thresholds = vec![0.0; t_count];
    let mut survivors: Vec<&Vec<f64>> = neg_stage_probs.iter().collect();
    for t in 0..t_count {
        if survivors.is_empty() || target_reject[t] <= 0.0 {
            thresholds[t] = 0.0;
            continue;
        }
        let mut probs: Vec<f64> = survivors
            .iter()
            .map(|stage_probs| {
                assert!(
                    stage_probs.len() > t,
                    "calibration traces must cover all {t_count} stages; run them with zero thresholds"
                );
                stage_probs[t]
            })
            .collect();
        probs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = (target_reject[t] * probs.len() as f64).round() as usize;
        thresholds[t] = if k == 0 {
            0.0
        } else {
            // Rejection takes every score ≤ r, so a run of tied scores is
            // all-or-nothing; pick the side whose realized count lands
            // closer to the target (ties favor rejecting fewer).
            let v = probs[k.min(probs.len()) - 1];
            let n_with = probs.partition_point(|p| *p <= v);
            let n_without = probs.partition_point(|p| *p < v);
            if n_with.abs_diff(k) < n_without.abs_diff(k) {
                v
            } else if n_without == 0 {
                0.0
            } else {
                probs[n_without - 1]
            }
        };
        let r_t = thresholds[t];
        survivors.retain(|stage_probs| stage_probs[t] > r_t);
    }
    thresholds
}

/// Per-stage statistics over an evaluation set. Scores are max foreground
/// probabilities among RoIs that actually reached the stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageStats {
    /// Fraction of negatives reaching this stage that it rejected.
    pub neg_rejection_rate: f64,
    /// Fraction of positives reaching this stage that it rejected.
    pub pos_rejection_rate: f64,
    pub mean_pos_score: f64,
    pub mean_neg_score: f64,
    pub var_pos_score: f64,
    pub var_neg_score: f64,
}

/// The evaluation artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub mode: String,
    pub seed: u64,
    /// AP for classes 1..=K at the configured IoU.
    pub per_class_ap: Vec<f64>,
    pub map: f64,
    pub stages: Vec<StageStats>,
    pub mean_stages_evaluated: f64,
    pub mean_stages_negative: f64,
    pub mean_stages_positive: f64,
    /// Fraction of positive RoIs rejected before the final stage.
    pub positives_rejected_before_final: f64,
    pub n_rois: usize,
    pub n_detections: usize,
}

/// Proposal generation and matching settings for evaluation.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub proposals_per_image: usize,
    pub jitter: f64,
    pub neg_fraction: f64,
    /// Base seed for per-image proposal draws.
    pub seed: u64,
    pub nms_iou: f64,
    pub map_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            proposals_per_image: 64,
            jitter: 0.25,
            neg_fraction: 0.5,
            seed: 0,
            nms_iou: 0.3,
            map_iou: 0.5,
        }
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Run cascade inference over every proposal of every scene, gather
/// detections through NMS into mAP, and fill the per-stage statistics.
/// Also returns the per-RoI trace records for logging and calibration.
pub fn evaluate(
    model: &Model,
    scenes: &[SynthScene],
    cfg: &EvalConfig,
) -> (EvalReport, Vec<TraceRecord>) {
    let t_count = model.n_stages();
    let mut detections: Vec<Detection> = Vec::new();
    let mut gt: Vec<GroundTruth> = Vec::new();
    let mut records: Vec<TraceRecord> = Vec::new();

    // Per-RoI bookkeeping: (is_positive, stages_evaluated, rejected,
    // per-stage max fg prob).
    let mut roi_rows: Vec<(bool, usize, bool, Vec<f64>)> = Vec::new();

    for (image_idx, scene) in scenes.iter().enumerate() {
        for (bbox, class) in &scene.objects {
            gt.push(GroundTruth { image: image_idx, bbox: *bbox, class: *class });
        }
        let featmap = no_grad(|| model.featmap(&scene.image));
        let proposals = gen_proposals(
            scene,
            cfg.proposals_per_image,
            cfg.jitter,
            cfg.neg_fraction,
            cfg.seed.wrapping_add(image_idx as u64),
        );
        for (roi, target) in &proposals {
            let (trace, dets) = model.infer_roi(&featmap, roi);
            for d in dets {
                detections.push(Detection {
                    image: image_idx,
                    bbox: d.bbox,
                    class: d.class,
                    score: d.score,
                });
            }
            roi_rows.push((
                target.is_foreground(),
                trace.final_stage_reached,
                trace.rejected,
                trace.max_fg_probs(),
            ));
            records.push(trace.to_record());
        }
    }

    let detections = nms(detections, cfg.nms_iou);
    let per_class_ap = map_eval(&detections, &gt, cfg.map_iou, model.n_fg_classes);
    let map = per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64;

    let mut stages = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let reached = |is_pos: bool| {
            roi_rows.iter().filter(move |(p, stages_eval, _, _)| *p == is_pos && *stages_eval > t)
        };
        let rejected_here = |is_pos: bool| {
            roi_rows
                .iter()
                .filter(move |(p, stages_eval, rej, _)| {
                    *p == is_pos && *rej && *stages_eval == t + 1
                })
                .count()
        };
        let pos_scores: Vec<f64> = reached(true).map(|(_, _, _, probs)| probs[t]).collect();
        let neg_scores: Vec<f64> = reached(false).map(|(_, _, _, probs)| probs[t]).collect();
        let (mean_pos_score, var_pos_score) = mean_var(&pos_scores);
        let (mean_neg_score, var_neg_score) = mean_var(&neg_scores);
        let rate = |rejected: usize, reached_n: usize| {
            if reached_n == 0 {
                0.0
            } else {
                rejected as f64 / reached_n as f64
            }
        };
        stages.push(StageStats {
            neg_rejection_rate: rate(rejected_here(false), neg_scores.len()),
            pos_rejection_rate: rate(rejected_here(true), pos_scores.len()),
            mean_pos_score,
            mean_neg_score,
            var_pos_score,
            var_neg_score,
        });
    }

    let mean_over = |rows: Vec<usize>| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().sum::<usize>() as f64 / rows.len() as f64
        }
    };
    let all_stages: Vec<usize> = roi_rows.iter().map(|r| r.1).collect();
    let neg_stages: Vec<usize> =
        roi_rows.iter().filter(|r| !r.0).map(|r| r.1).collect();
    let pos_stages: Vec<usize> = roi_rows.iter().filter(|r| r.0).map(|r| r.1).collect();
    let n_pos = pos_stages.len();
    let pos_rejected_early = roi_rows
        .iter()
        .filter(|(p, stages_eval, rej, _)| *p && *rej && *stages_eval < t_count)
        .count();

    let report = EvalReport {
        mode: String::new(),
        seed: 0,
        per_class_ap,
        map,
        stages,
        mean_stages_evaluated: mean_over(all_stages),
        mean_stages_negative: mean_over(neg_stages),
        mean_stages_positive: mean_over(pos_stages),
        positives_rejected_before_final: if n_pos == 0 {
            0.0
        } else {
            pos_rejected_early as f64 / n_pos as f64
        },
        n_rois: roi_rows.len(),
        n_detections: detections.len(),
    };
    (report, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image: usize, class: usize, score: f64, cx: f64, cy: f64) -> Detection {
        Detection { image, class, score, bbox: BBox::new(cx, cy, 10.0, 10.0) }
    }

    fn gt(image: usize, class: usize, cx: f64, cy: f64) -> GroundTruth {
        GroundTruth { image, class, bbox: BBox::new(cx, cy, 10.0, 10.0) }
    }

    #[test]
    fn nms_drops_overlapping_lower_scores() {
        let dets = vec![
            det(0, 1, 0.9, 20.0, 20.0),
            det(0, 1, 0.8, 21.0, 20.0), // heavy overlap with the first
            det(0, 1, 0.7, 50.0, 50.0), // far away: kept
        ];
        let kept = nms(dets, 0.3);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);
    }

    #[test]
    fn nms_is_per_class_and_per_image() {
        let dets = vec![
            det(0, 1, 0.9, 20.0, 20.0),
            det(0, 2, 0.8, 20.0, 20.0), // same spot, other class: kept
            det(1, 1, 0.7, 20.0, 20.0), // same spot, other image: kept
        ];
        assert_eq!(nms(dets, 0.3).len(), 3);
    }

    #[test]
    fn empty_detections_give_zero_ap() {
        let aps = map_eval(&[], &[gt(0, 1, 20.0, 20.0)], 0.5, 1);
        assert_eq!(aps, vec![0.0]);
    }

    #[test]
    fn perfect_detections_give_unit_ap() {
        let gts = vec![gt(0, 1, 20.0, 20.0), gt(1, 1, 30.0, 30.0)];
        let dets = vec![det(0, 1, 0.9, 20.0, 20.0), det(1, 1, 0.8, 30.0, 30.0)];
        let aps = map_eval(&dets, &gts, 0.5, 1);
        assert_eq!(aps, vec![1.0]);
    }

    #[test]
    fn duplicate_detection_on_one_gt_is_a_false_positive() {
        let gts = vec![gt(0, 1, 20.0, 20.0)];
        let dets = vec![det(0, 1, 0.9, 20.0, 20.0), det(0, 1, 0.8, 20.0, 20.0)];
        let aps = map_eval(&dets, &gts, 0.5, 1);
        // First matches (precision 1 at recall 1), duplicate is FP after
        // full recall: AP stays 1.
        assert_eq!(aps, vec![1.0]);
    }

    #[test]
    fn ap_matches_hand_computed_staircase() {
        // 3 gt, 5 detections in score order: TP, FP, TP, FP, TP.
        // Precisions at TP ranks: 1/1, 2/3, 3/5; recalls 1/3, 2/3, 1.
        // All-point AP = (1 + 2/3 + 3/5) / 3 = 34/45.
        let gts = vec![gt(0, 1, 20.0, 20.0), gt(0, 1, 50.0, 50.0), gt(0, 1, 80.0, 80.0)];
        let dets = vec![
            det(0, 1, 0.9, 20.0, 20.0),   // TP
            det(0, 1, 0.8, 200.0, 200.0), // FP
            det(0, 1, 0.7, 50.0, 50.0),   // TP
            det(0, 1, 0.6, 300.0, 300.0), // FP
            det(0, 1, 0.5, 80.0, 80.0),   // TP
        ];
        let aps = map_eval(&dets, &gts, 0.5, 1);
        assert!((aps[0] - 34.0 / 45.0).abs() < 1e-12, "{}", aps[0]);
    }

    #[test]
    fn matching_prefers_higher_scores() {
        // One gt, two dets on it: the higher-scored one must take the match
        // even if listed second.
        let gts = vec![gt(0, 1, 20.0, 20.0)];
        let dets = vec![det(0, 1, 0.3, 20.0, 20.0), det(0, 1, 0.9, 20.5, 20.0)];
        let aps = map_eval(&dets, &gts, 0.5, 1);
        // 0.9 det matches (TP at rank 1): precision 1 at recall 1 → AP 1.
        assert_eq!(aps, vec![1.0]);
    }

    #[test]
    fn calibration_zero_targets_disable_rejection() {
        let probs = vec![vec![0.5, 0.5], vec![0.2, 0.9]];
        assert_eq!(calibrate_thresholds(&probs, &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn calibration_rejects_exactly_the_target_tail() {
        // Stage-1 max-fg probs 0.05, 0.15, ..., 0.95; target 0.3 must set
        // r so exactly the lowest three are rejected.
        let probs: Vec<Vec<f64>> = (0..10).map(|i| vec![0.05 + 0.1 * i as f64]).collect();
        let r = calibrate_thresholds(&probs, &[0.3]);
        assert!((r[0] - 0.25).abs() < 1e-12);
        let rejected = probs.iter().filter(|p| p[0] <= r[0]).count();
        assert_eq!(rejected, 3);
    }

    #[test]
    fn calibration_chains_survivors_across_stages() {
        // Two stages; stage 1 rejects the lowest half, stage 2 thresholds
        // are computed among the survivors only.
        let probs: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![0.1 + 0.1 * i as f64, 0.1 * (8 - i) as f64])
            .collect();
        let r = calibrate_thresholds(&probs, &[0.5, 0.5]);
        let stage1_survivors: Vec<&Vec<f64>> =
            probs.iter().filter(|p| p[0] > r[0]).collect();
        assert_eq!(stage1_survivors.len(), 4);
        let stage2_rejected =
            stage1_survivors.iter().filter(|p| p[1] <= r[1]).count();
        assert_eq!(stage2_rejected, 2);
    }

    #[test]
    fn calibration_with_empty_survivor_set_yields_zero() {
        let probs = vec![vec![0.5, 0.9]];
        // Target 1.0 at stage 1 rejects everyone; stage 2 has no survivors.
        let r = calibrate_thresholds(&probs, &[1.0, 0.5]);
        assert_eq!(r[1], 0.0);
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = EvalReport {
            mode: "chained_cascade".into(),
            seed: 3,
            per_class_ap: vec![0.5, 0.75],
            map: 0.625,
            stages: vec![StageStats {
                neg_rejection_rate: 0.3,
                pos_rejection_rate: 0.01,
                mean_pos_score: 0.8,
                mean_neg_score: 0.2,
                var_pos_score: 0.01,
                var_neg_score: 0.02,
            }],
            mean_stages_evaluated: 2.5,
            mean_stages_negative: 2.1,
            mean_stages_positive: 3.9,
            positives_rejected_before_final: 0.01,
            n_rois: 128,
            n_detections: 40,
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
