//! The training loop: deterministic SGD over synthetic scenes, visiting
//! images round-robin with a fixed RoI sampling stream, a milestone lr
//! schedule, per-step loss reports, and checkpointing. Also the
//! threshold-calibration pass that turns traces on a held-out split into
//! rejection thresholds.
//!
//! All randomness derives from the run seed through fixed salts, one per
//! stream, so train/test/calibration data never share draws and every
//! artifact is bit-reproducible.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{gen_proposals, synth_dataset, SynthScene};
use crate::eval::{calibrate_thresholds, EvalConfig};
use crate::model::Model;
use crate::objective::{total_loss, BoxTarget, LossReport, SampleTerms};
use crate::roi::BBox;
use crate::{Error, Result};

// Seed salts separating the run's independent random streams.
const TEST_SCENES_SALT: u64 = 1_000_000_007;
const CALIB_SCENES_SALT: u64 = 500_009;
const TRAIN_PROPOSAL_SALT: u64 = 7_919;
const EVAL_PROPOSAL_SALT: u64 = 104_729;
const CALIB_PROPOSAL_SALT: u64 = 224_737;
const ROI_SAMPLER_SALT: u64 = 15_485_863;

/// Images in the calibration split (an independent draw, distinct from
/// both the training and test sets).
const CALIB_IMAGES: usize = 50;

/// The training image set for a run.
pub fn train_scenes(cfg: &RunConfig) -> Vec<SynthScene> {
    synth_dataset(
        cfg.seed,
        cfg.data.n_train_images,
        cfg.model.n_fg_classes,
        cfg.data.image_size,
        cfg.data.max_objects,
    )
}

/// The held-out test set.
pub fn test_scenes(cfg: &RunConfig) -> Vec<SynthScene> {
    synth_dataset(
        cfg.seed.wrapping_add(TEST_SCENES_SALT),
        cfg.data.n_test_images,
        cfg.model.n_fg_classes,
        cfg.data.image_size,
        cfg.data.max_objects,
    )
}

/// The calibration split used to set rejection thresholds.
pub fn calibration_scenes(cfg: &RunConfig) -> Vec<SynthScene> {
    synth_dataset(
        cfg.seed.wrapping_add(CALIB_SCENES_SALT),
        CALIB_IMAGES,
        cfg.model.n_fg_classes,
        cfg.data.image_size,
        cfg.data.max_objects,
    )
}

/// Evaluation settings derived from the run config (test-set proposals,
/// NMS at IoU 0.3, AP matching at IoU 0.5).
pub fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        proposals_per_image: cfg.data.proposals_per_image,
        jitter: cfg.data.jitter,
        neg_fraction: cfg.data.neg_fraction,
        seed: cfg.seed.wrapping_add(EVAL_PROPOSAL_SALT),
        nms_iou: 0.3,
        map_iou: 0.5,
    }
}

/// Learning rate at a 0-based step: the base rate times 0.1 for every
/// milestone fraction already passed.
pub fn lr_at(cfg: &RunConfig, step: usize) -> f64 {
    let mut lr = cfg.optimizer.lr;
    for m in &cfg.optimizer.lr_milestones {
        if step >= (m * cfg.optimizer.steps as f64) as usize {
            lr *= 0.1;
        }
    }
    lr
}

/// One RoI's forward results held alive for the batch loss.
struct Prepared {
    probs: Vec<crate::Tensor>,
    target: BoxTarget,
    box_pred: Option<crate::Tensor>,
    roi: BBox,
}

fn batch_abort(step: usize, image_idx: usize, prepared: &[Prepared], report: &LossReport) -> Error {
    let mut dump = format!(
        "loss at step {step} (image {image_idx}): total={} loc={}; batch:",
        report.total, report.loc
    );
    for p in prepared {
        let last = p.probs.last().expect("at least one stage");
        dump.push_str(&format!(
            "\n  roi cx={:.2} cy={:.2} w={:.2} h={:.2} label={} p_final={:.6}",
            p.roi.cx,
            p.roi.cy,
            p.roi.w,
            p.roi.h,
            p.target.label,
            last.data()[p.target.label]
        ));
    }
    Error::NonFinite { context: dump }
}

/// Train a fresh model, invoking `on_step` after every parameter update
/// (for log streaming and periodic checkpoints). Returns the trained
/// model and the per-step loss reports.
pub fn train_with(
    cfg: &RunConfig,
    mut on_step: impl FnMut(&Model, &LossReport) -> Result<()>,
) -> Result<(Model, Vec<LossReport>)> {
    cfg.validate()?;
    let scenes = train_scenes(cfg);
    let proposals: Vec<Vec<(BBox, BoxTarget)>> = scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            gen_proposals(
                scene,
                cfg.data.proposals_per_image,
                cfg.data.jitter,
                cfg.data.neg_fraction,
                cfg.seed.wrapping_add(TRAIN_PROPOSAL_SALT).wrapping_add(i as u64),
            )
        })
        .collect();

    let model = Model::new(&cfg.model_config(), cfg.seed);
    let loss_cfg = cfg.loss_config();
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ROI_SAMPLER_SALT));
    let mut logs: Vec<LossReport> = Vec::with_capacity(cfg.optimizer.steps);

    for step in 0..cfg.optimizer.steps {
        let image_idx = step % scenes.len();
        let featmap = model.featmap(&scenes[image_idx].image);
        let pool = &proposals[image_idx];
        let prepared: Vec<Prepared> = (0..cfg.optimizer.batch_rois)
            .map(|_| {
                let (roi, target) = &pool[sampler.gen_range(0..pool.len())];
                let fwd = model.forward_roi(&featmap, roi);
                let box_pred = target
                    .is_foreground()
                    .then(|| model.class_box_pred(&fwd, target.label));
                Prepared { probs: fwd.probs(), target: *target, box_pred, roi: *roi }
            })
            .collect();
        let samples: Vec<SampleTerms> = prepared
            .iter()
            .map(|p| SampleTerms {
                probs: &p.probs,
                target: p.target,
                box_pred: p.box_pred.as_ref(),
            })
            .collect();

        let (loss, mut report) = total_loss(&samples, &loss_cfg);
        if !report.total.is_finite() {
            return Err(batch_abort(step, image_idx, &prepared, &report));
        }
        model.params.zero_grad();
        loss.backward();
        model.params.sgd_step(lr_at(cfg, step), cfg.optimizer.weight_decay);
        if let Some(name) = model.params.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("parameter {name} after update at step {step}"),
            });
        }

        report.step = step;
        if step % 100 == 0 || step + 1 == cfg.optimizer.steps {
            log::info!(
                "step {step}/{}: total {:.4} loc {:.4} lr {}",
                cfg.optimizer.steps,
                report.total,
                report.loc,
                lr_at(cfg, step)
            );
        }
        on_step(&model, &report)?;
        logs.push(report);
    }
    Ok((model, logs))
}

/// Train without callbacks.
pub fn train(cfg: &RunConfig) -> Result<(Model, Vec<LossReport>)> {
    train_with(cfg, |_, _| Ok(()))
}

/// Refuse to clobber existing artifacts unless overwriting was requested.
pub fn ensure_fresh(paths: &[&Path], overwrite: bool) -> Result<()> {
    if !overwrite {
        for p in paths {
            if p.exists() {
                return Err(Error::OutputExists { path: p.to_path_buf() });
            }
        }
    }
    Ok(())
}

/// Train and persist the run: the resolved config, a JSON-lines loss log,
/// periodic checkpoints, and the final checkpoint. Returns the model, the
/// logs, and the final checkpoint path.
pub fn train_to_dir(
    cfg: &RunConfig,
    out_dir: &Path,
    overwrite: bool,
) -> Result<(Model, Vec<LossReport>, PathBuf)> {
    cfg.validate()?;
    let log_path = out_dir.join("train_log.jsonl");
    let ckpt_path = out_dir.join("checkpoint.bin");
    let config_path = out_dir.join("config.toml");
    ensure_fresh(&[&log_path, &ckpt_path, &config_path], overwrite)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fs::write(&config_path, cfg.to_toml_string()).map_err(|e| Error::io(&config_path, e))?;

    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);
    let every = cfg.optimizer.checkpoint_every;
    let steps = cfg.optimizer.steps;
    let (model, logs) = train_with(cfg, |model, report| {
        serde_json::to_writer(&mut log, report)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        let done = report.step + 1;
        if every > 0 && done % every == 0 && done < steps {
            model.params.save(&out_dir.join(format!("checkpoint_step{done:05}.bin")))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    model.params.save(&ckpt_path)?;
    Ok((model, logs, ckpt_path))
}

/// Thresholds produced by calibration, with the evidence: the targets
/// asked for and the rejection rates realized when the recorded traces
/// are replayed through the calibrated gates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CalibrationReport {
    pub target_rates: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Per-stage fraction of surviving negatives rejected on replay.
    pub realized_rates: Vec<f64>,
    /// Negatives entering each stage on replay.
    pub entering: Vec<usize>,
}

/// Calibrate rejection thresholds on the calibration split: run the
/// cascade with no rejection, collect per-stage max-foreground scores of
/// negatives, and pick each stage's threshold as the quantile meeting the
/// target rate among negatives surviving the earlier gates.
pub fn calibrate_run(
    model: &Model,
    cfg: &RunConfig,
    target_rates: &[f64],
) -> Result<CalibrationReport> {
    if target_rates.len() != model.n_stages() {
        return Err(Error::config(format!(
            "calibration needs {} target rates (one per stage), got {}",
            model.n_stages(),
            target_rates.len()
        )));
    }
    assert!(
        model.chain.thresholds.iter().all(|r| *r == 0.0),
        "calibration traces must be collected with zero thresholds"
    );

    let scenes = calibration_scenes(cfg);
    let mut neg_probs: Vec<Vec<f64>> = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let featmap = crate::tensor::no_grad(|| model.featmap(&scene.image));
        let proposals = gen_proposals(
            scene,
            cfg.data.proposals_per_image,
            cfg.data.jitter,
            cfg.data.neg_fraction,
            cfg.seed.wrapping_add(CALIB_PROPOSAL_SALT).wrapping_add(i as u64),
        );
        for (roi, target) in &proposals {
            if target.is_foreground() {
                continue;
            }
            let (trace, _) = model.infer_roi(&featmap, roi);
            neg_probs.push(trace.max_fg_probs());
        }
    }

    let thresholds = calibrate_thresholds(&neg_probs, target_rates);

    // Replay the recorded scores through the calibrated gates.
    let t_count = target_rates.len();
    let mut entering = vec![0usize; t_count];
    let mut rejected = vec![0usize; t_count];
    for probs in &neg_probs {
        for t in 0..t_count {
            entering[t] += 1;
            if probs[t] <= thresholds[t] {
                rejected[t] += 1;
                break;
            }
        }
    }
    let realized_rates = (0..t_count)
        .map(|t| if entering[t] == 0 { 0.0 } else { rejected[t] as f64 / entering[t] as f64 })
        .collect();
    Ok(CalibrationReport {
        target_rates: target_rates.to_vec(),
        thresholds,
        realized_rates,
        entering,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    /// A deliberately tiny config so loop tests stay fast.
    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::with_default_stages();
        for s in &mut cfg.stages {
            s.pooled_size = s.pooled_size.min(7);
        }
        cfg.model.c1 = 8;
        cfg.model.backbone_channels = 4;
        cfg.model.n_fg_classes = 3;
        cfg.data.n_train_images = 4;
        cfg.data.n_test_images = 2;
        cfg.data.image_size = 32;
        cfg.data.proposals_per_image = 8;
        cfg.optimizer.steps = 10;
        cfg.optimizer.batch_rois = 2;
        cfg.optimizer.checkpoint_every = 0;
        cfg
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut cfg = tiny_config();
        cfg.optimizer.lr = 0.0;
        cfg.optimizer.weight_decay = 0.0;
        cfg.optimizer.steps = 3;
        let before = Model::new(&cfg.model_config(), cfg.seed).params.snapshot();
        let (model, _) = train(&cfg).unwrap();
        assert_eq!(model.params.snapshot(), before);
    }

    #[test]
    fn lr_schedule_decays_at_milestones() {
        let mut cfg = tiny_config();
        cfg.optimizer.lr = 0.01;
        cfg.optimizer.steps = 100;
        cfg.optimizer.lr_milestones = vec![0.6, 0.85];
        assert_eq!(lr_at(&cfg, 0), 0.01);
        assert_eq!(lr_at(&cfg, 59), 0.01);
        assert!((lr_at(&cfg, 60) - 0.001).abs() < 1e-15);
        assert!((lr_at(&cfg, 85) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let (m1, logs1) = train(&cfg).unwrap();
        let (m2, logs2) = train(&cfg).unwrap();
        assert_eq!(m1.params.snapshot(), m2.params.snapshot());
        assert_eq!(logs1, logs2);
    }

    #[test]
    fn loss_trends_down_over_training() {
        // 200 steps on a small set; compare 5-step smoothed loss at the
        // start and end of the curve.
        let mut cfg = tiny_config();
        cfg.optimizer.steps = 200;
        cfg.optimizer.batch_rois = 4;
        let (_, logs) = train(&cfg).unwrap();
        let smooth = |w: &[LossReport]| w.iter().map(|r| r.total).sum::<f64>() / w.len() as f64;
        let first = smooth(&logs[..5]);
        let last = smooth(&logs[logs.len() - 5..]);
        assert!(
            last < first,
            "smoothed loss should fall: first {first:.4}, last {last:.4}"
        );
    }

    #[test]
    fn single_positive_roi_overfits() {
        // One image, one positive proposal, no negatives: the final stage
        // must become near-certain of the true class.
        let mut cfg = tiny_config();
        cfg.data.n_train_images = 1;
        cfg.data.proposals_per_image = 1;
        cfg.data.neg_fraction = 0.0;
        cfg.data.jitter = 0.0;
        cfg.optimizer.steps = 500;
        cfg.optimizer.batch_rois = 1;
        cfg.optimizer.lr_milestones = vec![];
        // Disable loss masking so the final stage keeps training even
        // after earlier stages become confident.
        cfg.loss.train_thresholds = Some(vec![1.0; 3]);
        let (model, _) = train(&cfg).unwrap();

        let scenes = train_scenes(&cfg);
        let proposals = gen_proposals(
            &scenes[0],
            1,
            0.0,
            0.0,
            cfg.seed.wrapping_add(TRAIN_PROPOSAL_SALT),
        );
        let (roi, target) = &proposals[0];
        let featmap = model.featmap(&scenes[0].image);
        let fwd = model.forward_roi(&featmap, roi);
        let p = fwd.probs().last().unwrap().data()[target.label];
        assert!(p > 0.99, "final-stage true-class probability {p:.4}");
    }

    #[test]
    fn train_to_dir_writes_logs_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.optimizer.steps = 6;
        cfg.optimizer.checkpoint_every = 3;
        let (model, logs, ckpt) = train_to_dir(&cfg, dir.path(), false).unwrap();
        assert!(ckpt.exists());
        assert!(dir.path().join("checkpoint_step00003.bin").exists());
        assert!(dir.path().join("config.toml").exists());

        let text = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let parsed: Vec<LossReport> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, logs);

        // A fresh model restores the checkpoint bit-exactly.
        let restored = Model::new(&cfg.model_config(), cfg.seed);
        restored.params.load(&ckpt).unwrap();
        assert_eq!(restored.params.snapshot(), model.params.snapshot());

        // Refuses to overwrite without the flag.
        assert!(matches!(
            train_to_dir(&cfg, dir.path(), false),
            Err(Error::OutputExists { .. })
        ));
    }

    #[test]
    fn calibration_meets_targets_on_replay() {
        let mut cfg = tiny_config();
        cfg.optimizer.steps = 30;
        let (model, _) = train(&cfg).unwrap();
        let targets = vec![0.3; 4];
        let report = calibrate_run(&model, &cfg, &targets).unwrap();
        assert_eq!(report.thresholds.len(), 4);
        for t in 0..4 {
            if report.entering[t] == 0 {
                continue;
            }
            let tolerance = 1.0 / report.entering[t] as f64;
            assert!(
                (report.realized_rates[t] - 0.3).abs() <= tolerance + 1e-12,
                "stage {t}: realized {} vs target 0.3 over {} entering",
                report.realized_rates[t],
                report.entering[t]
            );
        }
    }

    #[test]
    fn calibration_rejects_wrong_rate_count() {
        let cfg = tiny_config();
        let model = Model::new(&cfg.model_config(), cfg.seed);
        assert!(calibrate_run(&model, &cfg, &[0.3]).is_err());
    }

    #[test]
    fn single_stage_mode_trains() {
        let mut cfg = tiny_config();
        cfg.mode = Mode::SingleStageBaseline;
        cfg.optimizer.steps = 5;
        let (model, logs) = train(&cfg).unwrap();
        assert_eq!(model.n_stages(), 1);
        assert_eq!(logs[0].cls_per_stage.len(), 1);
    }
}
