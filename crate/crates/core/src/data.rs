//! Synthetic detection benchmark: procedurally drawn shape scenes with
//! exactly balanced class counts, plus proposal generation by ground-truth
//! jittering and random negatives, and a binary on-disk cache.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{bbox_encode, BoxTarget};
use crate::roi::BBox;
use crate::tensor::Tensor;

/// One generated image with its ground-truth objects.
pub struct SynthScene {
    /// [3, S, S] pixel tensor, values in [0, 1].
    pub image: Tensor,
    /// Ground-truth boxes with foreground class labels 1..=K.
    pub objects: Vec<(BBox, usize)>,
    pub seed: u64,
}

const SHAPES: usize = 2; // diamond, cross — filled fractions 0.50 vs 0.56,
                         // close enough that raw pixel mass does not give a
                         // shape away; telling them apart needs layout.
const COLORS: [[f64; 3]; 4] = [
    [0.90, 0.15, 0.15], // red
    [0.15, 0.30, 0.90], // blue
    [0.15, 0.80, 0.30], // green
    [0.95, 0.85, 0.10], // yellow
];

/// Maximum class count the shape × color grid supports.
pub const MAX_CLASSES: usize = SHAPES * COLORS.len();

/// True if normalized box coordinates (u, v) ∈ [−1, 1]² fall inside the
/// class's shape silhouette.
fn shape_mask(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u.abs() + v.abs() <= 1.0,           // diamond
        _ => u.abs() <= 0.34 || v.abs() <= 0.34, // cross
    }
}

fn draw_object(pixels: &mut [f64], size: usize, b: &BBox, class: usize, rng: &mut impl Rng) {
    let color = COLORS[(class - 1) % COLORS.len()];
    let shape = (class - 1) / COLORS.len();
    let (x0, y0) = (b.x0().floor().max(0.0) as usize, b.y0().floor().max(0.0) as usize);
    let (x1, y1) = (
        (b.x1().ceil() as usize).min(size),
        (b.y1().ceil() as usize).min(size),
    );
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - b.cx) / (b.w / 2.0);
            let v = (y as f64 + 0.5 - b.cy) / (b.h / 2.0);
            if u.abs() <= 1.0 && v.abs() <= 1.0 && shape_mask(shape, u, v) {
                for ch in 0..3 {
                    let noisy = color[ch] + rng.gen_range(-0.03..0.03);
                    pixels[ch * size * size + y * size + x] = noisy.clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Generate a deterministic dataset. Classes are assigned round-robin over
/// a global object counter, so per-class counts differ by at most one.
pub fn synth_dataset(
    seed: u64,
    n_images: usize,
    n_fg_classes: usize,
    image_size: usize,
    max_objects: usize,
) -> Vec<SynthScene> {
    assert!(n_fg_classes >= 2, "need at least two foreground classes");
    assert!(n_fg_classes <= MAX_CLASSES, "at most {MAX_CLASSES} distinguishable classes");
    assert!(image_size >= 32);
    assert!(max_objects >= 1, "each image needs at least one object");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_counter = 0usize;
    let mut scenes = Vec::with_capacity(n_images);
    for image_idx in 0..n_images {
        let s = image_size as f64;
        let mut pixels: Vec<f64> = (0..3 * image_size * image_size)
            .map(|_| 0.5 + rng.gen_range(-0.05..0.05))
            .collect();

        let n_objects = rng.gen_range(1..=max_objects);
        let mut objects: Vec<(BBox, usize)> = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let mut placed = None;
            for _attempt in 0..50 {
                let side = rng.gen_range(14.0..26.0);
                let aspect = rng.gen_range(0.8..1.25);
                let (w, h) = (side * aspect, side / aspect);
                if w >= s - 2.0 || h >= s - 2.0 {
                    continue;
                }
                let cx = rng.gen_range(w / 2.0 + 1.0..s - w / 2.0 - 1.0);
                let cy = rng.gen_range(h / 2.0 + 1.0..s - h / 2.0 - 1.0);
                let candidate = BBox::new(cx, cy, w, h);
                if objects.iter().all(|(other, _)| candidate.iou(other) < 0.2) {
                    placed = Some(candidate);
                    break;
                }
            }
            if let Some(b) = placed {
                let class = class_counter % n_fg_classes + 1;
                class_counter += 1;
                draw_object(&mut pixels, image_size, &b, class, &mut rng);
                objects.push((b, class));
            }
        }
        scenes.push(SynthScene {
            image: Tensor::new(pixels, &[3, image_size, image_size]),
            objects,
            seed: seed.wrapping_add(image_idx as u64),
        });
    }
    scenes
}

/// Jittered-ground-truth positives and random negatives for one scene.
/// Positives are gt boxes perturbed by up to `jitter` × size and labeled by
/// the IoU ≥ 0.5 rule against their best-overlapping ground truth (draws
/// are retried until the rule holds); negatives are random boxes with
/// IoU < 0.3 against every ground truth.
pub fn gen_proposals(
    scene: &SynthScene,
    n_per_image: usize,
    jitter: f64,
    neg_fraction: f64,
    seed: u64,
) -> Vec<(BBox, BoxTarget)> {
    assert!(!scene.objects.is_empty(), "scene must contain at least one object");
    assert!((0.0..=1.0).contains(&neg_fraction));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = (scene.image.shape()[2] * 1) as f64; // square images
    let n_neg = (n_per_image as f64 * neg_fraction).round() as usize;
    let n_pos = n_per_image - n_neg;
    let mut out = Vec::with_capacity(n_per_image);

    // Best-IoU ground truth for a candidate box.
    let best_gt = |b: &BBox| -> (f64, &(BBox, usize)) {
        scene
            .objects
            .iter()
            .map(|obj| (b.iou(&obj.0), obj))
            .fold((f64::NEG_INFINITY, &scene.objects[0]), |acc, cur| {
                if cur.0 > acc.0 {
                    cur
                } else {
                    acc
                }
            })
    };

    for i in 0..n_pos {
        let (gt_box, _) = scene.objects[i % scene.objects.len()];
        let mut accepted = gt_box; // fallback: the gt box itself
        for _attempt in 0..50 {
            let dx = rng.gen_range(-jitter..=jitter) * gt_box.w;
            let dy = rng.gen_range(-jitter..=jitter) * gt_box.h;
            let sw = 1.0 + rng.gen_range(-jitter..=jitter);
            let sh = 1.0 + rng.gen_range(-jitter..=jitter);
            let cand = BBox::new(gt_box.cx + dx, gt_box.cy + dy, gt_box.w * sw, gt_box.h * sh);
            let inside =
                cand.x0() >= 0.0 && cand.y0() >= 0.0 && cand.x1() <= size && cand.y1() <= size;
            if inside && best_gt(&cand).0 >= 0.5 {
                accepted = cand;
                break;
            }
        }
        let (_iou, (matched_box, class)) = best_gt(&accepted);
        out.push((
            accepted,
            BoxTarget::foreground(*class, bbox_encode(&accepted, matched_box)),
        ));
    }

    for _ in 0..n_neg {
        for _attempt in 0..1000 {
            let side: f64 = rng.gen_range(10.0..30.0);
            let aspect: f64 = rng.gen_range(0.7..1.4);
            let (w, h) = ((side * aspect).min(size - 2.0), (side / aspect).min(size - 2.0));
            let cx = rng.gen_range(w / 2.0..size - w / 2.0);
            let cy = rng.gen_range(h / 2.0..size - h / 2.0);
            let cand = BBox::new(cx, cy, w, h);
            if scene.objects.iter().all(|(gt, _)| cand.iou(gt) < 0.3) {
                out.push((cand, BoxTarget::background()));
                break;
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct IndexObject {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    image_size: usize,
    seed: u64,
    objects: Vec<IndexObject>,
}

/// Cache a dataset as one binary tensor per image plus a JSON index.
pub fn save_dataset(dir: &Path, scenes: &[SynthScene]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let file = format!("img_{i:05}.bin");
        let path = dir.join(&file);
        let mut buf = Vec::with_capacity(scene.image.numel() * 8);
        for v in scene.image.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        index.push(IndexEntry {
            file,
            image_size: scene.image.shape()[2],
            seed: scene.seed,
            objects: scene
                .objects
                .iter()
                .map(|(b, class)| IndexObject { cx: b.cx, cy: b.cy, w: b.w, h: b.h, class: *class })
                .collect(),
        });
    }
    let index_path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index)?;
    std::fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

/// Load a dataset cached by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<SynthScene>> {
    let index_path = dir.join("index.json");
    let json = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&json)?;
    let mut scenes = Vec::with_capacity(index.len());
    for entry in index {
        let path = dir.join(&entry.file);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        if bytes.len() != 3 * entry.image_size * entry.image_size * 8 {
            return Err(Error::checkpoint(format!(
                "{} has {} bytes, expected a [3, {s}, {s}] f64 tensor",
                path.display(),
                bytes.len(),
                s = entry.image_size
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        scenes.push(SynthScene {
            image: Tensor::new(data, &[3, entry.image_size, entry.image_size]),
            objects: entry
                .objects
                .iter()
                .map(|o| (BBox::new(o.cx, o.cy, o.w, o.h), o.class))
                .collect(),
            seed: entry.seed,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_pixels() {
        let a = synth_dataset(42, 5, 4, 64, 3);
        let b = synth_dataset(42, 5, 4, 64, 3);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(
                sa.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                sb.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(sa.objects.len(), sb.objects.len());
        }
    }

    #[test]
    fn zero_images_gives_empty_dataset() {
        assert!(synth_dataset(1, 0, 4, 64, 3).is_empty());
    }

    #[test]
    fn class_counts_are_balanced() {
        let scenes = synth_dataset(7, 500, 8, 64, 3);
        let mut counts = vec![0usize; 8];
        for scene in &scenes {
            for (_, class) in &scene.objects {
                counts[class - 1] += 1;
            }
        }
        let mean = counts.iter().sum::<usize>() as f64 / 8.0;
        for (class, count) in counts.iter().enumerate() {
            let ratio = *count as f64 / mean;
            assert!(
                (0.9..=1.1).contains(&ratio),
                "class {} count {count} vs mean {mean}",
                class + 1
            );
        }
    }

    #[test]
    fn objects_lie_fully_inside_the_image() {
        for scene in synth_dataset(3, 50, 8, 64, 3) {
            for (b, class) in &scene.objects {
                assert!(*class >= 1 && *class <= 8);
                assert!(b.x0() >= 0.0 && b.y0() >= 0.0 && b.x1() <= 64.0 && b.y1() <= 64.0);
            }
        }
    }

    #[test]
    fn objects_are_visible_in_the_pixels() {
        // The drawn object must differ from the gray background inside its
        // box (check the center pixel of each object).
        for scene in synth_dataset(9, 20, 8, 64, 3) {
            let data = scene.image.data();
            for (b, _) in &scene.objects {
                let (x, y) = (b.cx as usize, b.cy as usize);
                let r = data[y * 64 + x];
                let g = data[64 * 64 + y * 64 + x];
                let b_ = data[2 * 64 * 64 + y * 64 + x];
                let off_gray = (r - 0.5).abs() + (g - 0.5).abs() + (b_ - 0.5).abs();
                assert!(off_gray > 0.3, "object center looks like background");
            }
        }
    }

    #[test]
    fn zero_jitter_returns_exact_gt() {
        let scene = &synth_dataset(5, 1, 4, 64, 3)[0];
        let proposals = gen_proposals(scene, 10, 0.0, 0.0, 99);
        assert_eq!(proposals.len(), 10);
        for (b, target) in &proposals {
            assert!(target.is_foreground());
            assert_eq!(target.offsets.unwrap(), [0.0; 4]);
            let hit = scene.objects.iter().any(|(gt, _)| gt == b);
            assert!(hit, "proposal must equal one of the gt boxes");
        }
    }

    #[test]
    fn full_negative_fraction_gives_only_background() {
        let scene = &synth_dataset(6, 1, 4, 64, 3)[0];
        let proposals = gen_proposals(scene, 16, 0.2, 1.0, 7);
        assert!(proposals.iter().all(|(_, t)| !t.is_foreground()));
    }

    #[test]
    fn labels_agree_with_exhaustive_iou_oracle() {
        for (i, scene) in synth_dataset(11, 20, 8, 64, 3).iter().enumerate() {
            let proposals = gen_proposals(scene, 64, 0.15, 0.5, 1000 + i as u64);
            for (b, target) in &proposals {
                let best = scene
                    .objects
                    .iter()
                    .map(|(gt, class)| (b.iou(gt), *class))
                    .fold((f64::NEG_INFINITY, 0), |acc, cur| if cur.0 > acc.0 { cur } else { acc });
                if target.is_foreground() {
                    assert!(best.0 >= 0.5, "foreground proposal with best IoU {}", best.0);
                    assert_eq!(target.label, best.1);
                } else {
                    assert!(best.0 < 0.3, "background proposal with IoU {}", best.0);
                }
            }
        }
    }

    #[test]
    fn proposals_are_deterministic_in_seed() {
        let scene = &synth_dataset(2, 1, 4, 64, 3)[0];
        let a = gen_proposals(scene, 32, 0.15, 0.5, 5);
        let b = gen_proposals(scene, 32, 0.15, 0.5, 5);
        assert_eq!(a.len(), b.len());
        for ((ba, ta), (bb, tb)) in a.iter().zip(&b) {
            assert_eq!(ba, bb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn dataset_cache_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = synth_dataset(21, 4, 4, 64, 3);
        save_dataset(dir.path(), &scenes).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(
                a.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(a.objects, b.objects);
            assert_eq!(a.seed, b.seed);
        }
    }
}
