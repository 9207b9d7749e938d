//! Central finite-difference gradient checking.
//!
//! `finite_difference_check` is the ground-truth oracle for every backward
//! rule in this crate: it rebuilds the graph at perturbed parameter values
//! and compares `(f(x+h) - f(x-h)) / 2h` against the tape's analytic grads.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};

/// One scalar parameter's analytic/numeric comparison.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
    /// Set when the check aborted (e.g. non-finite loss) rather than failed
    /// on tolerance.
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    fn aborted(diagnostic: String) -> Self {
        GradCheckReport {
            max_abs_error: f64::INFINITY,
            max_rel_error: f64::INFINITY,
            entries: Vec::new(),
            passed: false,
            diagnostic: Some(diagnostic),
        }
    }

    /// Worst entries first, for failure messages.
    pub fn worst(&self, n: usize) -> Vec<&GradCheckEntry> {
        let mut sorted: Vec<&GradCheckEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        sorted.truncate(n);
        sorted
    }
}

/// A named parameter tensor handed to the checker.
#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedParam {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        NamedParam { name: name.into(), shape, values }
    }
}

/// Check the analytic gradient of a scalar-valued graph against central
/// finite differences.
///
/// `build` receives a fresh tape and one leaf per entry of `params`, in
/// order, and must return the scalar loss node. Relative error uses
/// `max(|analytic|, |numeric|, 1e-8)` in the denominator.
pub fn finite_difference_check<F>(
    build: F,
    params: &[NamedParam],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if h <= 0.0 {
        return Err(Error::contract(format!("finite_difference_check: h must be positive, got {h}")));
    }

    let eval = |values: &[Vec<f64>], requires_grad: bool| -> Result<(Tape, TensorId)> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(params.len());
        for (p, v) in params.iter().zip(values) {
            ids.push(tape.leaf(v.clone(), p.shape.clone(), requires_grad)?);
        }
        let loss = build(&mut tape, &ids)?;
        Ok((tape, loss))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.values.clone()).collect();

    // Analytic pass.
    let (mut tape, loss) = eval(&base, true)?;
    let loss_value = tape.item(loss)?;
    if !loss_value.is_finite() {
        return Ok(GradCheckReport::aborted(format!(
            "loss is not finite at the base point: {loss_value}"
        )));
    }
    tape.backward(loss)?;
    let mut ids = Vec::new();
    {
        // Re-derive the leaf ids: they are the first `params.len()` nodes.
        for i in 0..params.len() {
            ids.push(TensorId(i));
        }
    }
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let mut entries = Vec::new();
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;

    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.values.len() {
            let mut plus = base.clone();
            plus[pi][ei] += h;
            let (tape_p, loss_p) = eval(&plus, false)?;
            let fp = tape_p.item(loss_p)?;

            let mut minus = base.clone();
            minus[pi][ei] -= h;
            let (tape_m, loss_m) = eval(&minus, false)?;
            let fm = tape_m.item(loss_m)?;

            if !fp.is_finite() || !fm.is_finite() {
                return Ok(GradCheckReport::aborted(format!(
                    "loss is not finite near {}[{ei}]: f(+h)={fp}, f(-h)={fm}",
                    p.name
                )));
            }

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].get(ei).copied().unwrap_or(0.0);
            let abs_err = (a - numeric).abs();
            let rel = abs_err / a.abs().max(numeric.abs()).max(1e-8);
            max_abs = max_abs.max(abs_err);
            max_rel = max_rel.max(rel);
            entries.push(GradCheckEntry {
                name: format!("{}[{ei}]", p.name),
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }

    Ok(GradCheckReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        entries,
        passed: max_rel <= tol,
        diagnostic: None,
    })
}

/// Standard step size and tolerance used throughout the test suites.
pub const GRADCHECK_H: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn quadratic_passes_with_tight_error() {
        let params = vec![NamedParam::new("x", vec![1], vec![3.0])];
        let report = finite_difference_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                tape.sum(sq)
            },
            &params,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!((report.entries[0].analytic - 6.0).abs() < 1e-12);
        assert!((report.entries[0].numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_passes() {
        let params = vec![NamedParam::new("x", vec![2], vec![1.0, -1.0])];
        let report = finite_difference_check(
            |tape, _ids| {
                let c = tape.constant(vec![4.0], vec![1])?;
                tape.sum(c)
            },
            &params,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed);
        for e in &report.entries {
            assert_eq!(e.analytic, 0.0);
            assert!(e.numeric.abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_on_random_logits_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let vals = random_values(&mut rng, 4, -2.0, 2.0);
        let params = vec![NamedParam::new("logits", vec![4], vals)];
        let report = finite_difference_check(
            |tape, ids| tape.cross_entropy(ids[0], 2),
            &params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "worst: {:?}", report.worst(3));
    }

    #[test]
    fn exp_sum_matches_fd_at_h_1e5() {
        let params = vec![NamedParam::new("x", vec![2], vec![0.0, 1.0])];
        let report = finite_difference_check(
            |tape, ids| {
                let e = tape.exp(ids[0])?;
                tape.sum(e)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst(2));
        assert!((report.entries[1].analytic - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let params = vec![NamedParam::new("x", vec![1], vec![0.0])];
        let report = finite_difference_check(
            |tape, ids| {
                let l = tape.log(ids[0])?; // ln(0) = -inf
                tape.sum(l)
            },
            &params,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.diagnostic.is_some());
    }

    #[test]
    fn rejects_non_positive_step() {
        let params = vec![NamedParam::new("x", vec![1], vec![1.0])];
        let err = finite_difference_check(|tape, ids| tape.sum(ids[0]), &params, 0.0, 1e-3);
        assert!(err.is_err());
    }

    /// Every primitive's backward rule, checked on 20 random seeds each.
    #[test]
    fn all_primitives_pass_gradcheck_on_20_seeds() {
        type Builder = fn(&mut Tape, &[TensorId]) -> crate::error::Result<TensorId>;
        // (name, param shapes, value range, builder)
        let cases: Vec<(&str, Vec<Vec<usize>>, (f64, f64), Builder)> = vec![
            ("add", vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0), |t, ids| {
                let s = t.add(ids[0], ids[1])?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("add_row", vec![vec![3, 4], vec![4]], (-2.0, 2.0), |t, ids| {
                let s = t.add_row(ids[0], ids[1])?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("add_at", vec![vec![5], vec![1]], (-2.0, 2.0), |t, ids| {
                let s = t.add_at(ids[0], ids[1], 3)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("multiply", vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0), |t, ids| {
                let p = t.mul(ids[0], ids[1])?;
                t.sum(p)
            }),
            ("scale", vec![vec![4]], (-2.0, 2.0), |t, ids| {
                let s = t.scale(ids[0], -1.7)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("matmul", vec![vec![2, 3], vec![3, 4]], (-1.0, 1.0), |t, ids| {
                let p = t.matmul(ids[0], ids[1])?;
                let sq = t.mul(p, p)?;
                t.sum(sq)
            }),
            ("transpose", vec![vec![2, 3]], (-2.0, 2.0), |t, ids| {
                let tr = t.transpose(ids[0])?;
                let sq = t.mul(tr, tr)?;
                t.sum(sq)
            }),
            ("exp", vec![vec![4]], (-1.5, 1.5), |t, ids| {
                let e = t.exp(ids[0])?;
                t.sum(e)
            }),
            ("log", vec![vec![4]], (0.3, 3.0), |t, ids| {
                let l = t.log(ids[0])?;
                t.sum(l)
            }),
            ("relu", vec![vec![6]], (-2.0, 2.0), |t, ids| {
                let r = t.relu(ids[0])?;
                let sq = t.mul(r, r)?;
                t.sum(sq)
            }),
            ("tanh", vec![vec![5]], (-2.0, 2.0), |t, ids| {
                let y = t.tanh(ids[0])?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
            ("softmax", vec![vec![3, 4]], (-2.0, 2.0), |t, ids| {
                let s = t.softmax(ids[0])?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("log_softmax", vec![vec![3, 4]], (-2.0, 2.0), |t, ids| {
                let s = t.log_softmax(ids[0])?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], (-2.0, 2.0), |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
            ("sum", vec![vec![2, 3]], (-2.0, 2.0), |t, ids| t.sum(ids[0])),
            ("mean", vec![vec![2, 3]], (-2.0, 2.0), |t, ids| {
                let m = t.mean(ids[0])?;
                let sq = t.mul(m, m)?;
                t.sum(sq)
            }),
            ("mean_rows", vec![vec![3, 4]], (-2.0, 2.0), |t, ids| {
                let m = t.mean_rows(ids[0])?;
                let sq = t.mul(m, m)?;
                t.sum(sq)
            }),
            ("l2_norm", vec![vec![5]], (0.5, 2.0), |t, ids| t.l2_norm(ids[0])),
            ("mse", vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0), |t, ids| {
                t.mse(ids[0], ids[1])
            }),
            ("cross_entropy", vec![vec![5]], (-2.0, 2.0), |t, ids| {
                t.cross_entropy(ids[0], 1)
            }),
            ("cross_entropy_rows", vec![vec![3, 4]], (-2.0, 2.0), |t, ids| {
                t.cross_entropy_rows(ids[0], &[0, 3, 1])
            }),
            ("gather_rows", vec![vec![4, 3]], (-2.0, 2.0), |t, ids| {
                let gthr = t.gather_rows(ids[0], &[0, 2, 2, 1])?;
                let sq = t.mul(gthr, gthr)?;
                t.sum(sq)
            }),
            ("slice_flat", vec![vec![10]], (-2.0, 2.0), |t, ids| {
                let s = t.slice_flat(ids[0], 3, vec![2, 3])?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("slice_cols", vec![vec![3, 5]], (-2.0, 2.0), |t, ids| {
                let s = t.slice_cols(ids[0], 1, 3)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("concat_rows", vec![vec![2, 3], vec![1, 3]], (-2.0, 2.0), |t, ids| {
                let cr = t.concat_rows(&[ids[0], ids[1]])?;
                let sq = t.mul(cr, cr)?;
                t.sum(sq)
            }),
            ("concat_cols", vec![vec![2, 2], vec![2, 3]], (-2.0, 2.0), |t, ids| {
                let cc = t.concat_cols(&[ids[0], ids[1]])?;
                let sq = t.mul(cc, cc)?;
                t.sum(sq)
            }),
            ("rel_bias_matrix", vec![vec![2, 5]], (-2.0, 2.0), |t, ids| {
                let m0 = t.rel_bias_matrix(ids[0], 0, 4)?;
                let m1 = t.rel_bias_matrix(ids[0], 1, 4)?;
                let s = t.add(m0, m1)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("repeat_rows", vec![vec![3, 2]], (-2.0, 2.0), |t, ids| {
                let r = t.repeat_rows(ids[0], &[2, 1, 3])?;
                let sq = t.mul(r, r)?;
                t.sum(sq)
            }),
            ("reshape", vec![vec![2, 3]], (-2.0, 2.0), |t, ids| {
                let r = t.reshape(ids[0], vec![3, 2])?;
                let sq = t.mul(r, r)?;
                t.sum(sq)
            }),
        ];

        for (name, shapes, (lo, hi), builder) in cases {
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let params: Vec<NamedParam> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let n: usize = s.iter().product();
                        NamedParam::new(
                            format!("{name}.p{i}"),
                            s.clone(),
                            random_values(&mut rng, n, lo, hi),
                        )
                    })
                    .collect();
                let report =
                    finite_difference_check(builder, &params, GRADCHECK_H, GRADCHECK_TOL).unwrap();
                assert!(
                    report.passed,
                    "{name} seed {seed} failed: max_rel={} worst={:?}",
                    report.max_rel_error,
                    report.worst(3)
                );
            }
        }
    }

    /// The reversal layer reports `-lambda` times the true derivative, so the
    /// finite-difference oracle for it is `analytic == -lambda * numeric`.
    #[test]
    fn grad_reverse_matches_scaled_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let lambda = rng.random_range(0.0..2.0);
            let vals = random_values(&mut rng, 5, -1.5, 1.5);
            let params = vec![NamedParam::new("x", vec![5], vals)];
            let report = finite_difference_check(
                |tape, ids| {
                    let r = tape.grad_reverse(ids[0], lambda)?;
                    let t = tape.tanh(r)?;
                    let sq = tape.mul(t, t)?;
                    tape.sum(sq)
                },
                &params,
                GRADCHECK_H,
                GRADCHECK_TOL,
            )
            .unwrap();
            for e in &report.entries {
                let scaled = -lambda * e.numeric;
                let denom = e.analytic.abs().max(scaled.abs()).max(1e-8);
                assert!(
                    (e.analytic - scaled).abs() / denom <= GRADCHECK_TOL,
                    "seed {seed} {}: analytic {} vs -lambda*numeric {}",
                    e.name,
                    e.analytic,
                    scaled
                );
            }
        }
    }

    #[test]
    fn grad_through_grl_equals_minus_lambda_times_plain_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &lambda in &[0.0, 0.25, 1.0, 2.5] {
            let vals = random_values(&mut rng, 6, -1.0, 1.0);
            let grad_with = |use_grl: bool| {
                let mut tape = Tape::new();
                let x = tape.leaf(vals.clone(), vec![2, 3], true).unwrap();
                let y = if use_grl {
                    tape.grad_reverse(x, lambda).unwrap()
                } else {
                    x
                };
                let t = tape.tanh(y).unwrap();
                let sq = tape.mul(t, t).unwrap();
                let l = tape.sum(sq).unwrap();
                tape.backward(l).unwrap();
                tape.grad(x).unwrap().to_vec()
            };
            let with = grad_with(true);
            let without = grad_with(false);
            for (w, wo) in with.iter().zip(&without) {
                assert!((w - (-lambda) * wo).abs() < 1e-12);
            }
        }
    }
}
