//! RoI geometry and per-stage feature extraction: contextual box padding,
//! max RoI pooling at stage-specific resolutions, a small conv backbone, and
//! the per-stage conv heads whose globally pooled outputs feed the chain.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::{ops, Tensor};

/// Axis-aligned box in pixel coordinates, stored center + size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        assert!(w > 0.0 && h > 0.0, "box must have positive extent, got {w}x{h}");
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection-over-union overlap with another box.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let iy = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Geometry of one cascade stage: pooling resolution and context ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Spatial side of the pooled feature map for this stage.
    pub pooled_size: usize,
    /// Context padding ratio c: the RoI is grown to (1+c)·W × (1+c)·H.
    pub context_c: f64,
}

/// The default four-stage geometry: progressively more context at each
/// stage, with stage-specific pooling resolutions.
pub fn default_stages() -> Vec<StageSpec> {
    vec![
        StageSpec { pooled_size: 14, context_c: 0.0 },
        StageSpec { pooled_size: 22, context_c: 0.5 },
        StageSpec { pooled_size: 16, context_c: 0.8 },
        StageSpec { pooled_size: 14, context_c: 1.7 },
    ]
}

/// Grow a box about its center to (1+c)·W × (1+c)·H, then clamp each edge
/// independently to the image bounds. Clamping only moves edges inward, so
/// the center may shift for boxes near the border.
pub fn pad_box(b: &BBox, c: f64, image_w: f64, image_h: f64) -> BBox {
    assert!(c >= 0.0, "context ratio must be nonnegative, got {c}");
    assert!(image_w > 0.0 && image_h > 0.0);
    let w = (1.0 + c) * b.w;
    let h = (1.0 + c) * b.h;
    let x0 = (b.cx - w / 2.0).max(0.0);
    let y0 = (b.cy - h / 2.0).max(0.0);
    let x1 = (b.cx + w / 2.0).min(image_w);
    let y1 = (b.cy + h / 2.0).min(image_h);
    assert!(
        x1 > x0 && y1 > y0,
        "padded box lies outside the image: box {b:?}, c {c}, image {image_w}x{image_h}"
    );
    BBox::from_corners(x0, y0, x1, y1)
}

/// Max RoI pooling. The box (image coordinates) is projected onto the
/// feature map by the stride: columns floor(x0/stride) .. ceil(x1/stride),
/// clamped to the map. The projected region is partitioned into
/// `out_size × out_size` bins by the floor/ceil rule
/// (bin j spans floor(j·R/n) .. ceil((j+1)·R/n)); each output cell is the
/// max of its bin. A region degenerate along an axis falls back to the
/// single cell nearest the box center. Gradients route to argmax cells.
pub fn roi_pool(featmap: &Tensor, b: &BBox, out_size: usize, stride: usize) -> Tensor {
    assert_eq!(featmap.shape().len(), 3, "roi_pool: feature map must be [c, h, w]");
    assert!(out_size >= 1 && stride >= 1);
    let (c, hf, wf) = (featmap.shape()[0], featmap.shape()[1], featmap.shape()[2]);

    // Projected cell range along one axis, or the nearest single cell when
    // the clamped projection is empty.
    let project = |lo: f64, hi: f64, center: f64, extent: usize| -> (usize, usize) {
        let s = stride as f64;
        let a = (lo / s).floor().max(0.0) as usize;
        let b = ((hi / s).ceil() as i64).clamp(0, extent as i64) as usize;
        if b > a && a < extent {
            (a, b)
        } else {
            let cell = ((center / s).floor() as i64).clamp(0, extent as i64 - 1) as usize;
            (cell, cell + 1)
        }
    };
    let (cx0, cx1) = project(b.x0(), b.x1(), b.cx, wf);
    let (cy0, cy1) = project(b.y0(), b.y1(), b.cy, hf);
    let (rw, rh) = (cx1 - cx0, cy1 - cy0);

    // Inclusive-exclusive bin bounds over a region of `r` cells.
    let bin = |j: usize, r: usize| -> (usize, usize) {
        let lo = j * r / out_size;
        let hi = ((j + 1) * r + out_size - 1) / out_size; // ceil
        (lo, hi.max(lo + 1).min(r.max(1)))
    };

    let n_out = c * out_size * out_size;
    let mut out = vec![0.0; n_out];
    let mut argmax = vec![0usize; n_out];
    {
        let fv = featmap.data();
        for ci in 0..c {
            for by in 0..out_size {
                let (ylo, yhi) = bin(by, rh);
                for bx in 0..out_size {
                    let (xlo, xhi) = bin(bx, rw);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for y in ylo..yhi {
                        for x in xlo..xhi {
                            let idx = (ci * hf + cy0 + y) * wf + cx0 + x;
                            if fv[idx] > best {
                                best = fv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * out_size + by) * out_size + bx;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }

    let fc = featmap.clone();
    let n_in = c * hf * wf;
    Tensor::from_op(
        out,
        vec![c, out_size, out_size],
        vec![featmap.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; n_in];
            for (gi, idx) in g.iter().zip(&argmax) {
                gx[*idx] += gi;
            }
            fc.accumulate_grad(&gx);
        }),
    )
}

/// Draw conv weights from N(0, sqrt(2 / fan_in)).
fn conv_init(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    (0..c_out * c_in * k * k).map(|_| dist.sample(rng)).collect()
}

/// One conv layer's registered parameters.
struct ConvLayer {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn new(
        params: &mut ParamSet,
        name: &str,
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let w = params.register(
            &format!("{name}.w"),
            Tensor::with_grad(conv_init(rng, c_out, c_in, kernel), &[c_out, c_in, kernel, kernel]),
            true,
        );
        let b = params.register(
            &format!("{name}.b"),
            Tensor::with_grad(vec![0.0; c_out], &[c_out]),
            false,
        );
        Self { w, b, stride, pad: kernel / 2 }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        ops::relu(&ops::conv2d(x, &self.w, &self.b, self.stride, self.pad))
    }
}

/// Shared image trunk: four 3×3 conv+relu layers with an accumulated
/// downsampling factor of 8 (strides 2, 2, 2, 1).
pub struct Backbone {
    layers: Vec<ConvLayer>,
}

/// Downsampling factor between image pixels and backbone feature cells.
pub const BACKBONE_STRIDE: usize = 8;

impl Backbone {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, channels: usize) -> Self {
        // (c_in, c_out, kernel, stride)
        let widths = [
            (3, channels, 3, 2),
            (channels, channels, 3, 2),
            (channels, channels, 3, 2),
            (channels, channels, 3, 1),
        ];
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, k, s))| {
                ConvLayer::new(params, &format!("backbone.conv{}", i + 1), rng, ci, co, k, s)
            })
            .collect();
        Self { layers }
    }

    /// Image [3, H, W] -> feature map [channels, H/8, W/8].
    pub fn forward(&self, image: &Tensor) -> Tensor {
        let mut x = image.clone();
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        x
    }
}

/// Per-stage head: one 3×3 conv+relu over the pooled map, then global
/// average pooling down to a length-`c1` vector o_t. All stage heads are
/// initialized from a single shared draw and diverge during training.
pub struct StageHead {
    pub spec: StageSpec,
    w: Tensor,
    b: Tensor,
}

impl StageHead {
    /// Build one head per stage spec, cloning a single initial draw into
    /// every stage's parameters.
    pub fn build_all(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        specs: &[StageSpec],
        c_in: usize,
        c1: usize,
    ) -> Vec<StageHead> {
        let shared_w = conv_init(rng, c1, c_in, 3);
        specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let t = i + 1;
                let w = params.register(
                    &format!("stage{t}.head.w"),
                    Tensor::with_grad(shared_w.clone(), &[c1, c_in, 3, 3]),
                    true,
                );
                let b = params.register(
                    &format!("stage{t}.head.b"),
                    Tensor::with_grad(vec![0.0; c1], &[c1]),
                    false,
                );
                StageHead { spec: *spec, w, b }
            })
            .collect()
    }

    /// Pooled map [c_in, s, s] -> o_t [c1].
    pub fn forward(&self, pooled: &Tensor) -> Tensor {
        assert_eq!(
            pooled.shape()[1],
            self.spec.pooled_size,
            "pooled input {:?} does not match stage pooled_size {}",
            pooled.shape(),
            self.spec.pooled_size
        );
        let conv = ops::relu(&ops::conv2d(pooled, &self.w, &self.b, 1, 1));
        ops::global_avg_pool(&conv)
    }
}
