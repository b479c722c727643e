//! Finite-difference gradient verification.
//!
//! The harness rebuilds the computation through a user closure, compares the
//! analytic gradient from the tape against a central difference, and reports
//! the worst relative error. Relative error for a coordinate is
//! `|a - n| / max(|a|, |n|, floor)` so that near-zero gradients are judged
//! on an absolute scale instead of blowing up the ratio.

use crate::tensor::{no_grad, Tensor};

/// One checked coordinate that exceeded no threshold yet still gets
/// reported as the worst offender.
#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstCoord>,
}

impl FiniteDiffReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Configuration for a finite-difference sweep.
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor in the relative-error formula.
    pub rel_floor: f64,
    /// Max coordinates sampled per tensor (evenly spaced); 0 means all.
    pub max_indices: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, rel_floor: 1e-4, max_indices: 0 }
    }
}

impl GradCheck {
    /// Compare analytic and numeric gradients of `f` with respect to every
    /// listed tensor. `f` must rebuild the graph from the tensors' current
    /// values and return a scalar.
    pub fn check(
        &self,
        params: &[(&str, &Tensor)],
        mut f: impl FnMut() -> Tensor,
    ) -> FiniteDiffReport {
        // Analytic pass.
        for (_, t) in params {
            t.zero_grad();
        }
        let loss = f();
        loss.backward();
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|(name, t)| {
                t.grad().unwrap_or_else(|| {
                    panic!("{name} received no gradient; is it connected to the loss?")
                })
            })
            .collect();

        // Numeric pass.
        let mut report = FiniteDiffReport { checked: 0, max_rel_err: 0.0, worst: None };
        for ((name, t), grads) in params.iter().zip(&analytic) {
            let n = t.numel();
            let indices = self.pick_indices(n);
            for idx in indices {
                let original = t.data()[idx];

                let mut bumped = t.data().to_vec();
                bumped[idx] = original + self.step;
                t.set_data(bumped);
                let f_plus = no_grad(&mut f).item();

                let mut bumped = t.data().to_vec();
                bumped[idx] = original - self.step;
                t.set_data(bumped);
                let f_minus = no_grad(&mut f).item();

                let mut restore = t.data().to_vec();
                restore[idx] = original;
                t.set_data(restore);

                let numeric = (f_plus - f_minus) / (2.0 * self.step);
                let a = grads[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.rel_floor);
                report.checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some(WorstCoord {
                        param: name.to_string(),
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_err: rel,
                    });
                }
            }
        }
        report
    }

    fn pick_indices(&self, n: usize) -> Vec<usize> {
        if self.max_indices == 0 || n <= self.max_indices {
            (0..n).collect()
        } else {
            // Evenly spaced sample including the first coordinate.
            (0..self.max_indices).map(|i| i * n / self.max_indices).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    const TOL: f64 = 1e-6;

    /// Closed-form oracle for the harness itself: d/dw sum(w ⊙ w) = 2w.
    #[test]
    fn harness_agrees_with_closed_form_quadratic() {
        let w = Tensor::with_grad(vec![0.3, -1.1, 2.0], &[3]);
        let report = GradCheck::default()
            .check(&[("w", &w)], || ops::sum(&ops::elementwise_scale(&w, &w)));
        assert!(report.passes(TOL), "{report:?}");
        // And the analytic side really is 2w.
        let g = w.grad().unwrap();
        for (gi, wi) in g.iter().zip(w.to_vec()) {
            assert!((gi - 2.0 * wi).abs() < 1e-12);
        }
    }

    /// The harness must catch a deliberately wrong gradient.
    #[test]
    fn harness_detects_wrong_gradient() {
        let w = Tensor::with_grad(vec![1.0, 2.0], &[2]);
        let report = GradCheck::default().check(&[("w", &w)], || {
            let data: Vec<f64> = w.data().iter().map(|v| v * v).collect();
            let wc = w.clone();
            let bad = Tensor::from_op(data, vec![2], vec![w.clone()], Box::new(move |g| {
                // wrong: claims d(w^2)/dw = 3w
                let gx: Vec<f64> =
                    g.iter().zip(wc.data().iter()).map(|(gi, wi)| gi * 3.0 * wi).collect();
                wc.accumulate_grad(&gx);
            }));
            ops::sum(&bad)
        });
        assert!(!report.passes(TOL));
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::with_grad(vec![0.7, -0.9, 1.3, -0.2], &[4]);
        let report = GradCheck::default().check(&[("x", &x)], || ops::sum(&ops::relu(&x)));
        assert!(report.passes(TOL), "{report:?}");
    }

    #[test]
    fn add_and_scale() {
        let a = Tensor::with_grad(vec![0.5, -0.3], &[2]);
        let b = Tensor::with_grad(vec![1.5, 0.2], &[2]);
        let report = GradCheck::default().check(&[("a", &a), ("b", &b)], || {
            ops::sum(&ops::elementwise_scale(&ops::add(&a, &b), &b))
        });
        assert!(report.passes(TOL), "{report:?}");
    }

    #[test]
    fn linear_params_and_input() {
        let x = Tensor::with_grad(vec![0.4, -0.6, 1.0], &[3]);
        let w = Tensor::with_grad(vec![0.1, 0.2, -0.3, 0.5, -0.7, 0.9], &[2, 3]);
        let b = Tensor::with_grad(vec![0.05, -0.15], &[2]);
        let report = GradCheck::default()
            .check(&[("x", &x), ("w", &w), ("b", &b)], || {
                let y = ops::linear(&x, &w, &b);
                ops::sum(&ops::elementwise_scale(&y, &y))
            });
        assert!(report.passes(TOL), "{report:?}");
    }

    #[test]
    fn conv2d_stride_one() {
        let x = Tensor::with_grad(
            (0..18).map(|i| (i as f64 * 0.711).sin()).collect::<Vec<_>>(),
            &[2, 3, 3],
        );
        let w = Tensor::with_grad(
            (0..36).map(|i| (i as f64 * 0.37).cos() * 0.2).collect::<Vec<_>>(),
            &[2, 2, 3, 3],
        );
        let b = Tensor::with_grad(vec![0.1, -0.2], &[2]);
        let report = GradCheck::default().check(&[("x", &x), ("w", &w), ("b", &b)], || {
            let y = ops::conv2d(&x, &w, &b, 1, 1);
            ops::sum(&ops::elementwise_scale(&y, &y))
        });
        assert!(report.passes(TOL), "{report:?}");
    }

    #[test]
    fn conv2d_stride_two() {
        let x = Tensor::with_grad(
            (0..50).map(|i| (i as f64 * 0.17).sin()).collect::<Vec<_>>(),
            &[2, 5, 5],
        );
        let w = Tensor::with_grad(
            (0..54).map(|i| (i as f64 * 0.29).cos() * 0.3).collect::<Vec<_>>(),
            &[3, 2, 3, 3],
        );
        let b = Tensor::with_grad(vec![0.0, 0.1, -0.1], &[3]);
        let report = GradCheck::default().check(&[("x", &x), ("w", &w), ("b", &b)], || {
            let y = ops::conv2d(&x, &w, &b, 2, 1);
            ops::sum(&ops::elementwise_scale(&y, &y))
        });
        assert!(report.passes(TOL), "{report:?}");
    }

    #[test]
    fn max_pool_distinct_values() {
        // Values spaced far apart so the 1e-5 bump cannot flip an argmax.
        let x = Tensor::with_grad(
            (0..16).map(|i| (i as f64 * 7.3) % 11.0).collect::<Vec<_>>(),
            &[1, 4, 4],
        );
        let report = GradCheck::default().check(&[("x", &x)], || {
            let y = ops::max_pool(&x, 2, 2);
            ops::sum(&ops::elementwise_scale(&y, &y))
        });
        assert!(report.passes(TOL), "{report:?}");
    }

    #[test]
    fn global_avg_pool_grad() {
        let x = Tensor::with_grad(
            (0..12).map(|i| i as f64 * 0.25 - 1.0).collect::<Vec<_>>(),
            &[2, 2, 3],
        );
        let report = GradCheck::default().check(&[("x", &x)], || {
            let y = ops::global_avg_pool(&x);
            ops::sum(&ops::elementwise_scale(&y, &y))
        });
        assert!(report.passes(TOL), "{report:?}");
    }

    #[test]
    fn softmax_log_slice_chain() {
        let x = Tensor::with_grad(vec![0.2, -0.5, 1.1, 0.05], &[4]);
        let report = GradCheck::default().check(&[("x", &x)], || {
            let p = ops::softmax(&x);
            let lp = ops::log(&p);
            ops::mul_scalar(&ops::slice(&lp, 2, 1), -1.0)
        });
        assert!(report.passes(TOL), "{report:?}");
    }

    #[test]
    fn sampled_indices_cover_large_tensor() {
        let w = Tensor::with_grad((0..100).map(|i| i as f64 * 0.01).collect::<Vec<_>>(), &[100]);
        let check = GradCheck { max_indices: 10, ..Default::default() };
        let report = check.check(&[("w", &w)], || ops::sum(&ops::elementwise_scale(&w, &w)));
        assert_eq!(report.checked, 10);
        assert!(report.passes(TOL));
    }
}
