//! Chaining across cascade stages: feature chaining (each stage adds a
//! scaled new feature vector to the running sum), classifier chaining
//! (stage decisions use the accumulated partial sum of scaled scores),
//! score normalization, the rejection gate, and the cascade inference loop.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::{ops, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Canonical background class index. Foreground classes are 1..=K.
pub const BACKGROUND: usize = 0;

/// How partial sums are turned into probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeKind {
    /// Standard exponential softmax (the default).
    #[default]
    Softmax,
    /// Plain ratio p̃_k / Σ_j p̃_j. Only meaningful when the partial sums
    /// are positive; kept as an ablation variant.
    Ratio,
}

/// Which chaining mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainFlags {
    /// Accumulate features: f_t = a_t ⊙ o_t + f_{t−1}. Off means f_t = o_t.
    pub feature_chain: bool,
    /// Accumulate scores: p̃_t = Σ_{i≤t} b_i ⊙ raw_i. Off means
    /// p̃_t = b_t ⊙ raw_t.
    pub score_chain: bool,
    pub normalize: NormalizeKind,
}

impl Default for ChainFlags {
    fn default() -> Self {
        Self { feature_chain: true, score_chain: true, normalize: NormalizeKind::Softmax }
    }
}

/// One stage's affine classifier c_t: C1 -> K+1.
pub struct Classifier {
    pub w: Tensor,
    pub b: Tensor,
}

/// All chain-level parameters: per-stage feature scales a_2..a_T, score
/// scales b_1..b_T, the stage classifiers, and the rejection thresholds.
pub struct ChainParams {
    /// Feature scale vectors for stages 2..T (length C1 each). Stage 1 has
    /// none: f_1 = o_1.
    pub a: Vec<Tensor>,
    /// Score scale vectors for stages 1..T (length K+1 each).
    pub b: Vec<Tensor>,
    pub classifiers: Vec<Classifier>,
    /// Rejection thresholds r_t ∈ [0, 1], applied to normalized
    /// probabilities. Zero disables rejection at that stage.
    pub thresholds: Vec<f64>,
}

impl ChainParams {
    /// Register chain parameters for `n_stages` stages. All scale vectors
    /// start at exactly 1; classifier weights start near zero; thresholds
    /// start at 0 (no rejection) until calibrated.
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        n_stages: usize,
        c1: usize,
        n_fg_classes: usize,
    ) -> Self {
        assert!(n_stages >= 1);
        let n_cls = n_fg_classes + 1;
        let dist = Normal::new(0.0, 0.01).unwrap();
        let a = (2..=n_stages)
            .map(|t| {
                params.register(
                    &format!("chain.a{t}"),
                    Tensor::with_grad(vec![1.0; c1], &[c1]),
                    false,
                )
            })
            .collect();
        let b = (1..=n_stages)
            .map(|t| {
                params.register(
                    &format!("chain.b{t}"),
                    Tensor::with_grad(vec![1.0; n_cls], &[n_cls]),
                    false,
                )
            })
            .collect();
        let classifiers = (1..=n_stages)
            .map(|t| Classifier {
                w: params.register(
                    &format!("stage{t}.cls.w"),
                    Tensor::with_grad(
                        (0..n_cls * c1).map(|_| dist.sample(rng)).collect(),
                        &[n_cls, c1],
                    ),
                    true,
                ),
                b: params.register(
                    &format!("stage{t}.cls.b"),
                    Tensor::with_grad(vec![0.0; n_cls], &[n_cls]),
                    false,
                ),
            })
            .collect();
        Self { a, b, classifiers, thresholds: vec![0.0; n_stages] }
    }

    pub fn n_stages(&self) -> usize {
        self.classifiers.len()
    }
}

/// Chained features: f_1 = o_1, f_t = a_t ⊙ o_t + f_{t−1} for t ≥ 2.
pub fn chain_features(o: &[Tensor], a: &[Tensor]) -> Vec<Tensor> {
    assert!(!o.is_empty());
    assert_eq!(a.len(), o.len() - 1, "need one scale vector per stage after the first");
    let mut f = Vec::with_capacity(o.len());
    f.push(o[0].clone());
    for (t, o_t) in o.iter().enumerate().skip(1) {
        let scaled = ops::elementwise_scale(&a[t - 1], o_t);
        f.push(ops::add(&scaled, &f[t - 1]));
    }
    f
}

/// Raw (unnormalized) stage scores c_t(f_t).
pub fn stage_scores(f_t: &Tensor, classifier: &Classifier) -> Tensor {
    ops::linear(f_t, &classifier.w, &classifier.b)
}

/// Partial sums p̃_t = Σ_{i=1..t} b_i ⊙ raw_i, returned for every t.
pub fn chain_scores(raw: &[Tensor], b: &[Tensor]) -> Vec<Tensor> {
    assert_eq!(raw.len(), b.len());
    let mut out: Vec<Tensor> = Vec::with_capacity(raw.len());
    for (t, (raw_t, b_t)) in raw.iter().zip(b).enumerate() {
        let scaled = ops::elementwise_scale(b_t, raw_t);
        out.push(if t == 0 { scaled } else { ops::add(&scaled, &out[t - 1]) });
    }
    out
}

/// Normalize a partial-sum vector to probabilities.
pub fn normalize_scores(partial: &Tensor, kind: NormalizeKind) -> Tensor {
    match kind {
        NormalizeKind::Softmax => ops::softmax(partial),
        NormalizeKind::Ratio => ratio_normalize(partial),
    }
}

/// The ratio form p_k = p̃_k / Σ_j p̃_j, differentiable. Callers must
/// ensure a positive denominator for the output to be a distribution.
fn ratio_normalize(x: &Tensor) -> Tensor {
    assert_eq!(x.shape().len(), 1);
    let xv = x.to_vec();
    let total: f64 = xv.iter().sum();
    let y: Vec<f64> = xv.iter().map(|v| v / total).collect();
    let shape = x.shape().to_vec();
    let xc = x.clone();
    let y_saved = y.clone();
    Tensor::from_op(y, shape, vec![x.clone()], Box::new(move |g| {
        let dot: f64 = g.iter().zip(&y_saved).map(|(gi, yi)| gi * yi).sum();
        let gx: Vec<f64> = g.iter().map(|gi| (gi - dot) / total).collect();
        xc.accumulate_grad(&gx);
    }))
}

/// Rejection gate: pass iff some foreground probability exceeds r.
pub fn gate(probs: &[f64], r: f64, background_index: usize) -> bool {
    probs
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != background_index)
        .map(|(_, p)| *p)
        .fold(f64::NEG_INFINITY, f64::max)
        > r
}

/// Everything one stage computes, kept as graph tensors so the training
/// loss can differentiate through it.
pub struct StageForward {
    pub o: Tensor,
    pub f: Tensor,
    pub raw: Tensor,
    pub partial: Tensor,
    pub probs: Tensor,
}

/// Advance the chain by one stage. `prev` is None for stage 1.
fn step_stage(
    t: usize,
    o_t: &Tensor,
    prev: Option<&StageForward>,
    params: &ChainParams,
    flags: &ChainFlags,
) -> StageForward {
    let f = match (flags.feature_chain, prev) {
        (true, Some(p)) => ops::add(&ops::elementwise_scale(&params.a[t - 1], o_t), &p.f),
        _ => o_t.clone(),
    };
    let raw = stage_scores(&f, &params.classifiers[t]);
    let scaled = ops::elementwise_scale(&params.b[t], &raw);
    let partial = match (flags.score_chain, prev) {
        (true, Some(p)) => ops::add(&scaled, &p.partial),
        _ => scaled,
    };
    let probs = normalize_scores(&partial, flags.normalize);
    StageForward { o: o_t.clone(), f, raw, partial, probs }
}

/// Run every stage unconditionally (training path — no gating, fully
/// differentiable).
pub fn forward_all_stages(o: &[Tensor], params: &ChainParams, flags: &ChainFlags) -> Vec<StageForward> {
    assert_eq!(o.len(), params.n_stages());
    let mut stages: Vec<StageForward> = Vec::with_capacity(o.len());
    for (t, o_t) in o.iter().enumerate() {
        let step = step_stage(t, o_t, stages.last(), params, flags);
        stages.push(step);
    }
    stages
}

/// Record of one evaluated stage in an inference trace.
#[derive(Debug, Clone)]
pub struct StageTrace {
    pub o: Vec<f64>,
    pub f: Vec<f64>,
    pub raw: Vec<f64>,
    pub partial: Vec<f64>,
    pub probs: Vec<f64>,
    pub passed: bool,
}

/// Inference trace: stages actually evaluated (stages after a reject are
/// absent), plus the verdict.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub stages: Vec<StageTrace>,
    /// 1-based index of the last evaluated stage.
    pub final_stage_reached: usize,
    /// True when some stage's gate rejected the sample as background.
    pub rejected: bool,
}

impl ChainTrace {
    /// Probabilities of the last evaluated stage.
    pub fn final_probs(&self) -> &[f64] {
        &self.stages.last().expect("trace has at least one stage").probs
    }

    /// Max foreground probability at each evaluated stage.
    pub fn max_fg_probs(&self) -> Vec<f64> {
        self.stages
            .iter()
            .map(|s| {
                s.probs
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != BACKGROUND)
                    .map(|(_, p)| *p)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// The compact serializable form written to trace logs.
    pub fn to_record(&self) -> TraceRecord {
        TraceRecord {
            stage_reached: self.final_stage_reached,
            max_fg_probs: self.max_fg_probs(),
            verdict: if self.rejected { "background".into() } else { "detection".into() },
        }
    }
}

/// One JSON-lines record per RoI emitted by the evaluator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage_reached: usize,
    pub max_fg_probs: Vec<f64>,
    pub verdict: String,
}

/// Cascade inference with per-stage features produced on demand, so a
/// rejection at stage t really skips the head computation of stages t+1..T.
/// `next_o` receives the 0-based stage index.
pub fn cascade_infer_with(
    n_stages: usize,
    mut next_o: impl FnMut(usize) -> Tensor,
    params: &ChainParams,
    flags: &ChainFlags,
) -> ChainTrace {
    assert_eq!(n_stages, params.n_stages());
    let mut stages: Vec<StageTrace> = Vec::with_capacity(n_stages);
    let mut prev: Option<StageForward> = None;
    let mut rejected = false;
    for t in 0..n_stages {
        let o_t = next_o(t);
        let step = step_stage(t, &o_t, prev.as_ref(), params, flags);
        let probs = step.probs.to_vec();
        let total: f64 = probs.iter().sum();
        debug_assert!((total - 1.0).abs() <= 1e-9, "stage {t} probabilities sum to {total}");
        let passed = gate(&probs, params.thresholds[t], BACKGROUND);
        stages.push(StageTrace {
            o: step.o.to_vec(),
            f: step.f.to_vec(),
            raw: step.raw.to_vec(),
            partial: step.partial.to_vec(),
            probs,
            passed,
        });
        if !passed {
            rejected = true;
            break;
        }
        prev = Some(step);
    }
    let final_stage_reached = stages.len();
    ChainTrace { stages, final_stage_reached, rejected }
}

/// Cascade inference over precomputed per-stage features.
pub fn cascade_infer(o: &[Tensor], params: &ChainParams, flags: &ChainFlags) -> ChainTrace {
    cascade_infer_with(o.len(), |t| o[t].clone(), params, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vecs(vals: &[&[f64]]) -> Vec<Tensor> {
        vals.iter().map(|v| Tensor::new(v.to_vec(), &[v.len()])).collect()
    }

    fn test_params(n_stages: usize, c1: usize, k: usize, seed: u64) -> (ParamSet, ChainParams) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = ChainParams::new(&mut set, &mut rng, n_stages, c1, k);
        (set, chain)
    }

    #[test]
    fn chain_features_zero_scale_keeps_previous() {
        let o = vecs(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let a = vecs(&[&[0.0, 0.0]]);
        let f = chain_features(&o, &a);
        assert_eq!(f[1].to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn chain_features_unit_scale_sums() {
        let o = vecs(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let a = vecs(&[&[1.0, 1.0]]);
        let f = chain_features(&o, &a);
        assert_eq!(f[0].to_vec(), vec![1.0, 2.0]);
        assert_eq!(f[1].to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn chain_features_matches_direct_summation_oracle() {
        // f_T must equal Σ_t a_t ⊙ o_t with a_1 := 1, for random inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let c1 = 5;
            let o: Vec<Tensor> = (0..4)
                .map(|_| {
                    Tensor::new((0..c1).map(|_| rng.gen_range(-2.0..2.0)).collect(), &[c1])
                })
                .collect();
            let a: Vec<Tensor> = (0..3)
                .map(|_| {
                    Tensor::new((0..c1).map(|_| rng.gen_range(-2.0..2.0)).collect(), &[c1])
                })
                .collect();
            let f = chain_features(&o, &a);

            let mut expect = o[0].to_vec();
            for t in 1..4 {
                let (av, ov) = (a[t - 1].to_vec(), o[t].to_vec());
                for i in 0..c1 {
                    expect[i] += av[i] * ov[i];
                }
            }
            let got = f[3].to_vec();
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_chaining_is_local_in_stage_index() {
        // Perturbing o_j changes f_t only for t >= j.
        let base = vecs(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        let a = vecs(&[&[0.5, 0.5], &[0.25, 0.25]]);
        let f0: Vec<Vec<f64>> = chain_features(&base, &a).iter().map(|t| t.to_vec()).collect();

        let mut perturbed = base.clone();
        perturbed[1] = Tensor::new(vec![9.0, 9.0], &[2]);
        let f1: Vec<Vec<f64>> = chain_features(&perturbed, &a).iter().map(|t| t.to_vec()).collect();

        assert_eq!(f0[0], f1[0]); // stage before the perturbation: unchanged
        assert_ne!(f0[1], f1[1]);
        assert_ne!(f0[2], f1[2]);
    }

    #[test]
    fn stage_scores_zero_classifier() {
        let f = Tensor::new(vec![1.0, -2.0, 3.0], &[3]);
        let cls = Classifier {
            w: Tensor::new(vec![0.0; 6], &[2, 3]),
            b: Tensor::new(vec![0.0; 2], &[2]),
        };
        assert_eq!(stage_scores(&f, &cls).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn stage_scores_identity_classifier() {
        let f = Tensor::new(vec![0.3, -0.7], &[2]);
        let cls = Classifier {
            w: Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]),
            b: Tensor::new(vec![0.0, 0.0], &[2]),
        };
        assert_eq!(stage_scores(&f, &cls).to_vec(), vec![0.3, -0.7]);
    }

    #[test]
    fn stage_scores_matches_naive_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (m, n) = (4, 6);
            let fv: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bv: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cls = Classifier {
                w: Tensor::new(wv.clone(), &[m, n]),
                b: Tensor::new(bv.clone(), &[m]),
            };
            let got = stage_scores(&Tensor::new(fv.clone(), &[n]), &cls).to_vec();
            for i in 0..m {
                let expect: f64 =
                    (0..n).map(|j| wv[i * n + j] * fv[j]).sum::<f64>() + bv[i];
                assert!((got[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_scores_single_stage_is_raw() {
        let raw = vecs(&[&[0.2, 0.1]]);
        let b = vecs(&[&[1.0, 1.0]]);
        assert_eq!(chain_scores(&raw, &b)[0].to_vec(), vec![0.2, 0.1]);
    }

    #[test]
    fn chain_scores_two_stage_sum() {
        let raw = vecs(&[&[0.2, 0.1], &[0.3, -0.1]]);
        let b = vecs(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let partial = chain_scores(&raw, &b);
        let got = partial[1].to_vec();
        assert!((got[0] - 0.5).abs() < 1e-15 && got[1].abs() < 1e-15);
    }

    #[test]
    fn chain_scores_matches_fold_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let k1 = 3;
            let raw: Vec<Tensor> = (0..4)
                .map(|_| Tensor::new((0..k1).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[k1]))
                .collect();
            let b: Vec<Tensor> = (0..4)
                .map(|_| Tensor::new((0..k1).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[k1]))
                .collect();
            let partial = chain_scores(&raw, &b);

            let mut acc = vec![0.0; k1];
            for t in 0..4 {
                let (bv, rv) = (b[t].to_vec(), raw[t].to_vec());
                for i in 0..k1 {
                    acc[i] += bv[i] * rv[i];
                }
                let got = partial[t].to_vec();
                for i in 0..k1 {
                    assert!((got[i] - acc[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ratio_normalization_divides_by_sum() {
        let x = Tensor::new(vec![1.0, 3.0], &[2]);
        let p = normalize_scores(&x, NormalizeKind::Ratio).to_vec();
        assert_eq!(p, vec![0.25, 0.75]);
    }

    #[test]
    fn ratio_normalization_gradient() {
        let x = Tensor::with_grad(vec![1.0, 3.0, 2.0], &[3]);
        let report = GradCheck::default().check(&[("x", &x)], || {
            let p = normalize_scores(&x, NormalizeKind::Ratio);
            ops::sum(&ops::elementwise_scale(&p, &p))
        });
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn gate_threshold_decisions() {
        let p = [0.1, 0.7, 0.2];
        assert!(gate(&p, 0.5, BACKGROUND));
        assert!(!gate(&p, 0.8, BACKGROUND));
        assert!(gate(&p, 0.0, BACKGROUND)); // any positive foreground passes r = 0
    }

    #[test]
    fn gate_ignores_background_entry() {
        // Huge background prob must not cause a pass.
        let p = [0.99, 0.005, 0.005];
        assert!(!gate(&p, 0.01, BACKGROUND));
    }

    #[test]
    fn gate_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let r1 = rng.gen_range(0.0..1.0);
            let r2 = rng.gen_range(r1..1.0);
            // pass at the higher threshold implies pass at the lower one
            if gate(&p, r2, BACKGROUND) {
                assert!(gate(&p, r1, BACKGROUND));
            }
        }
    }

    #[test]
    fn cascade_reaches_final_stage_without_thresholds() {
        let (_set, mut chain) = test_params(3, 4, 2, 1);
        chain.thresholds = vec![0.0; 3];
        let o = vecs(&[&[0.5, 0.2, 0.1, 0.3][..]; 3]);
        let trace = cascade_infer(&o, &chain, &ChainFlags::default());
        assert_eq!(trace.final_stage_reached, 3);
        assert!(!trace.rejected);
        assert_eq!(trace.stages.len(), 3);
        let total: f64 = trace.final_probs().iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cascade_rejects_everything_at_threshold_one() {
        let (_set, mut chain) = test_params(3, 4, 2, 2);
        chain.thresholds = vec![1.0, 0.0, 0.0];
        let o = vecs(&[&[0.5, 0.2, 0.1, 0.3][..]; 3]);
        let mut evaluated = vec![false; 3];
        let trace = cascade_infer_with(
            3,
            |t| {
                evaluated[t] = true;
                o[t].clone()
            },
            &chain,
            &ChainFlags::default(),
        );
        assert!(trace.rejected);
        assert_eq!(trace.final_stage_reached, 1);
        assert_eq!(trace.stages.len(), 1); // stages after the reject are absent
        assert_eq!(evaluated, vec![true, false, false]); // later stages never computed
    }

    #[test]
    fn chained_scores_with_unit_scales_equal_softmax_of_summed_raw() {
        let (_set, chain) = test_params(4, 6, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let o: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[6]))
            .collect();
        // Disable feature chaining so raw_t depends on o_t alone; a, b are 1.
        let flags = ChainFlags { feature_chain: false, ..Default::default() };
        let trace = cascade_infer(&o, &chain, &flags);

        let mut summed = vec![0.0; 4];
        for t in 0..4 {
            let raw = stage_scores(&o[t], &chain.classifiers[t]).to_vec();
            for (s, r) in summed.iter_mut().zip(&raw) {
                *s += r;
            }
        }
        let oracle = ops::softmax(&Tensor::new(summed, &[4])).to_vec();
        for (got, want) in trace.final_probs().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conventional_stage_two_ignores_stage_one_scores() {
        let (_set, chain) = test_params(2, 4, 2, 5);
        let o1 = vecs(&[&[0.9, -0.3, 0.2, 0.5], &[0.1, 0.8, -0.6, 0.4]]);
        let mut o2 = o1.clone();
        o2[0] = Tensor::new(vec![-2.0, 1.5, 0.7, -0.9], &[4]); // perturb stage 1 only

        let conventional =
            ChainFlags { feature_chain: false, score_chain: false, ..Default::default() };
        let chained = ChainFlags { feature_chain: false, score_chain: true, ..Default::default() };

        let conv_a = cascade_infer(&o1, &chain, &conventional).stages[1].probs.clone();
        let conv_b = cascade_infer(&o2, &chain, &conventional).stages[1].probs.clone();
        assert_eq!(conv_a, conv_b);

        let chain_a = cascade_infer(&o1, &chain, &chained).stages[1].probs.clone();
        let chain_b = cascade_infer(&o2, &chain, &chained).stages[1].probs.clone();
        assert_ne!(chain_a, chain_b);
    }

    #[test]
    fn single_stage_chain_is_plain_softmax_bitwise() {
        let (_set, chain) = test_params(1, 5, 3, 8);
        let o = vecs(&[&[0.4, -0.2, 0.9, 0.0, -1.1]]);
        let trace = cascade_infer(&o, &chain, &ChainFlags::default());

        let raw = stage_scores(&o[0], &chain.classifiers[0]);
        let plain = ops::softmax(&raw).to_vec();
        let got = trace.final_probs();
        assert_eq!(
            got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            plain.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gradients_flow_through_all_chain_parameters() {
        let (set, chain) = test_params(3, 4, 2, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let o: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::with_grad((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[4])
            })
            .collect();

        let tracked: Vec<(&str, &Tensor)> = set
            .iter()
            .map(|p| (p.name.as_str(), &p.tensor))
            .chain(o.iter().enumerate().map(|(i, t)| {
                (["o1", "o2", "o3"][i], t)
            }))
            .collect();

        let report = GradCheck::default().check(&tracked, || {
            let stages = forward_all_stages(&o, &chain, &ChainFlags::default());
            // Negative log-likelihood of class 1 at the last stage plus a
            // small term on stage 2 so every b_t matters.
            let nll_last =
                ops::mul_scalar(&ops::slice(&ops::log(&stages[2].probs), 1, 1), -1.0);
            let nll_mid =
                ops::mul_scalar(&ops::slice(&ops::log(&stages[1].probs), 2, 1), -0.1);
            ops::add(&nll_last, &nll_mid)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn trace_record_roundtrips_through_json() {
        let (_set, chain) = test_params(2, 4, 2, 6);
        let o = vecs(&[&[0.5, 0.2, 0.1, 0.3][..]; 2]);
        let record = cascade_infer(&o, &chain, &ChainFlags::default()).to_record();
        let json = serde_json::to_string(&record).unwrap();
        let back: TraceRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.stage_reached, record.stage_reached);
        assert_eq!(back.max_fg_probs, record.max_fg_probs);
        assert_eq!(back.verdict, record.verdict);
    }
}
