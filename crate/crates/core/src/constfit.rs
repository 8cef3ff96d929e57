//! Levenberg-Marquardt fitting of the constant placeholders in a sampled
//! expression against a dataset.
//!
//! The Jacobian is numerically differentiated (central differences, step
//! `1e-6 * max(1, |c|)`). Damping starts at 1e-3, multiplies by 10 on a
//! rejected step and divides by 10 on an accepted one; iteration stops after
//! 100 rounds or when the relative RSS improvement drops below 1e-10.
//!
//! Rows whose residual is non-finite at the starting point are excluded
//! from the optimization; if any row is still non-finite at the optimum the
//! fit is marked failed (worst case) so the reward stage scores it zero
//! rather than rewarding a fit that only works on part of the domain.

use crate::expr::ExpressionTree;
use crate::Mat;

/// Outcome of one constant-fitting run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub constants: Vec<f64>,
    /// Root mean squared error over all rows divided by the std of `y`
    /// (std replaced by 1 when the targets are constant); +inf when failed.
    pub nrmse: f64,
    /// Accepted-or-rejected LM rounds performed.
    pub iterations: usize,
    /// Stopped because the relative RSS improvement fell below tolerance.
    pub converged: bool,
    /// Non-finite residuals at initialization or at the optimum.
    pub failed: bool,
    /// RSS after initialization and after each accepted step.
    pub rss_trace: Vec<f64>,
}

const MAX_ITERATIONS: usize = 100;
const RSS_REL_TOL: f64 = 1e-10;
const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e12;

/// Population standard deviation, with the constant-target degenerate case
/// mapped to 1 so such datasets remain fittable.
pub fn target_std(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 {
        std
    } else {
        1.0
    }
}

/// NRMSE of a bound tree over the full dataset; +inf when any row is
/// non-finite.
pub fn nrmse_of(tree: &ExpressionTree, x: &Mat, y: &[f64]) -> f64 {
    let preds = tree.evaluate(x);
    let mut rss = 0.0;
    for (p, t) in preds.iter().zip(y.iter()) {
        if !p.is_finite() {
            return f64::INFINITY;
        }
        let r = p - t;
        rss += r * r;
    }
    let rms = (rss / y.len() as f64).sqrt();
    rms / target_std(y)
}

/// Fits the tree's constants starting from all-ones.
pub fn fit_constants(tree: &ExpressionTree, x: &Mat, y: &[f64]) -> FitResult {
    let init = vec![1.0; tree.constants().len()];
    fit_constants_from(tree, x, y, &init)
}

/// Fits from an explicit starting vector (the config switch for seeded
/// uniform restarts feeds this).
pub fn fit_constants_from(
    tree: &ExpressionTree,
    x: &Mat,
    y: &[f64],
    init: &[f64],
) -> FitResult {
    let p = tree.constants().len();
    assert_eq!(init.len(), p);
    assert_eq!(x.rows(), y.len());
    let n = y.len();
    let mut work = tree.clone();

    if p == 0 {
        let nrmse = nrmse_of(&work, x, y);
        return FitResult {
            constants: Vec::new(),
            nrmse,
            iterations: 0,
            converged: true,
            failed: !nrmse.is_finite(),
            rss_trace: Vec::new(),
        };
    }

    let mut c = init.to_vec();
    work.set_constants(c.clone());

    // Active rows: finite residual at the starting point.
    let preds = work.evaluate(x);
    let active: Vec<usize> = (0..n).filter(|&i| preds[i].is_finite()).collect();
    if active.is_empty() {
        return FitResult {
            constants: c,
            nrmse: f64::INFINITY,
            iterations: 0,
            converged: false,
            failed: true,
            rss_trace: Vec::new(),
        };
    }

    let residuals = |tree: &mut ExpressionTree, c: &[f64]| -> Option<Vec<f64>> {
        tree.set_constants(c.to_vec());
        let preds = tree.evaluate(x);
        let mut r = Vec::with_capacity(active.len());
        for &i in &active {
            let v = preds[i] - y[i];
            if !v.is_finite() {
                return None;
            }
            r.push(v);
        }
        Some(r)
    };

    let rss_of = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    let mut r = residuals(&mut work, &c).expect("active rows are finite at init");
    let mut rss = rss_of(&r);
    let mut rss_trace = vec![rss];
    let mut lambda = LAMBDA_INIT;
    let mut iterations = 0;
    let mut converged = false;

    'outer: while iterations < MAX_ITERATIONS {
        iterations += 1;
        // Central-difference Jacobian over the active rows; rows that go
        // non-finite at a probe point contribute zero.
        let mut jac = Mat::zeros(active.len(), p);
        for j in 0..p {
            let h = 1e-6 * c[j].abs().max(1.0);
            let mut cp = c.clone();
            cp[j] += h;
            let up = residuals(&mut work, &cp);
            cp[j] = c[j] - h;
            let down = residuals(&mut work, &cp);
            if let (Some(up), Some(down)) = (up, down) {
                for (i, (u, d)) in up.iter().zip(down.iter()).enumerate() {
                    jac.set(i, j, (u - d) / (2.0 * h));
                }
            }
        }
        // Normal equations with Marquardt scaling.
        let mut a = vec![0.0; p * p];
        let mut g = vec![0.0; p];
        for i in 0..active.len() {
            let row = jac.row(i);
            for j in 0..p {
                g[j] += row[j] * r[i];
                for k in j..p {
                    a[j * p + k] += row[j] * row[k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                a[j * p + k] = a[k * p + j];
            }
        }

        loop {
            let mut damped = a.clone();
            for j in 0..p {
                let d = a[j * p + j].max(1e-12);
                damped[j * p + j] = a[j * p + j] + lambda * d;
            }
            let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
            let delta = match solve(&damped, &rhs, p) {
                Some(d) => d,
                None => {
                    lambda *= 10.0;
                    if lambda > LAMBDA_MAX {
                        break 'outer;
                    }
                    continue;
                }
            };
            let trial: Vec<f64> = c.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let trial_rss = residuals(&mut work, &trial).map(|tr| rss_of(&tr));
            match trial_rss {
                Some(new_rss) if new_rss < rss => {
                    debug_assert!(new_rss <= rss, "accepted step increased RSS");
                    let rel = (rss - new_rss) / rss.max(f64::MIN_POSITIVE);
                    c = trial;
                    r = residuals(&mut work, &c).expect("accepted step stays finite");
                    rss = new_rss;
                    rss_trace.push(rss);
                    lambda = (lambda / 10.0).max(1e-12);
                    if rel < RSS_REL_TOL {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > LAMBDA_MAX {
                        break 'outer;
                    }
                }
            }
        }
        if rss == 0.0 {
            converged = true;
            break;
        }
    }

    work.set_constants(c.clone());
    let nrmse = nrmse_of(&work, x, y);
    let failed = !nrmse.is_finite();
    FitResult {
        constants: c,
        nrmse: if failed { f64::INFINITY } else { nrmse },
        iterations,
        converged,
        failed,
        rss_trace,
    }
}

/// Gaussian elimination with partial pivoting for the tiny normal systems.
fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if m[row * n + col].abs() > m[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if m[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
        }
        let inv = 1.0 / m[col * n + col];
        for row in (col + 1)..n {
            let f = m[row * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut out = vec![0.0; n];
    for col in (0..n).rev() {
        let mut v = rhs[col];
        for k in (col + 1)..n {
            v -= m[col * n + k] * out[k];
        }
        out[col] = v / m[col * n + col];
        if !out[col].is_finite() {
            return None;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expression, TokenLibrary};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lib1() -> TokenLibrary {
        TokenLibrary::new(1)
    }

    #[test]
    fn linear_coefficient_closed_form() {
        // c*x1 on {(1,3),(2,6)}: least squares c = sum(xy)/sum(x^2) = 3.
        let lib = lib1();
        let tree = parse_expression("c*x1", &lib).unwrap();
        let x = Mat::from_vec(2, 1, vec![1.0, 2.0]);
        let y = [3.0, 6.0];
        let fit = fit_constants(&tree, &x, &y);
        assert!(!fit.failed);
        assert!((fit.constants[0] - 3.0).abs() < 1e-6, "c = {}", fit.constants[0]);
        assert!(fit.nrmse < 1e-6);
    }

    #[test]
    fn constant_target_fits_mean() {
        // Lone constant against y = 5: the mean minimizes RSS; sigma_y = 0
        // falls back to 1 so the NRMSE stays defined.
        let lib = lib1();
        let tree = parse_expression("c", &lib).unwrap();
        let x = Mat::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let y = [5.0; 4];
        let fit = fit_constants(&tree, &x, &y);
        assert!((fit.constants[0] - 5.0).abs() < 1e-6);
        assert!(fit.nrmse < 1e-6);
    }

    #[test]
    fn no_constants_returns_immediately() {
        let lib = lib1();
        let tree = parse_expression("x1", &lib).unwrap();
        let x = Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let y = [1.0, 2.0, 3.5];
        let fit = fit_constants(&tree, &x, &y);
        assert_eq!(fit.iterations, 0);
        assert!(fit.constants.is_empty());
        assert!(fit.nrmse > 0.0 && fit.nrmse.is_finite());
    }

    #[test]
    fn all_nonfinite_rows_fail() {
        let lib = lib1();
        let tree = parse_expression("c*log(x1)", &lib).unwrap();
        let x = Mat::from_vec(3, 1, vec![-1.0, -2.0, -3.0]);
        let y = [0.0, 1.0, 2.0];
        let fit = fit_constants(&tree, &x, &y);
        assert!(fit.failed);
        assert!(fit.nrmse.is_infinite());
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn linear_in_constants_recovery() {
        // 50 random noiseless c1*x + c2 instances, 1e-6 relative recovery;
        // RSS trace monotone on every instance.
        let lib = lib1();
        let tree = parse_expression("c*x1+c", &lib).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..50 {
            let c1: f64 = rng.random_range(-5.0..5.0);
            let c2: f64 = rng.random_range(-5.0..5.0);
            let n = 40;
            let x = Mat::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
            let y: Vec<f64> = (0..n).map(|i| c1 * x.get(i, 0) + c2).collect();
            let fit = fit_constants(&tree, &x, &y);
            assert!(!fit.failed, "trial {trial} failed");
            // BFS slot order puts the root's right child (the intercept)
            // before the slope inside the product.
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
            assert!(
                rel(fit.constants[0], c2) < 1e-6 && rel(fit.constants[1], c1) < 1e-6,
                "trial {trial}: got {:?}, want intercept {c2}, slope {c1}",
                fit.constants
            );
            for w in fit.rss_trace.windows(2) {
                assert!(w[1] <= w[0], "trial {trial}: RSS increased {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn nonlinear_constants() {
        // c1*sin(x1) + c2*x1^2 with known coefficients.
        let lib = lib1();
        let tree = parse_expression("c*sin(x1)+c*x1^2", &lib).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let x = Mat::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let y: Vec<f64> = (0..n).map(|i| 3.0 * x.get(i, 0).sin() + 0.5 * x.get(i, 0).powi(2)).collect();
        let fit = fit_constants(&tree, &x, &y);
        assert!((fit.constants[0] - 3.0).abs() < 1e-5);
        assert!((fit.constants[1] - 0.5).abs() < 1e-5);
        assert!(fit.nrmse < 1e-6);
    }

    #[test]
    fn deterministic() {
        let lib = lib1();
        let tree = parse_expression("c*exp(c*x1)", &lib).unwrap();
        let x = Mat::from_fn(20, 1, |i, _| i as f64 * 0.1);
        let y: Vec<f64> = (0..20).map(|i| 2.0 * (0.3 * i as f64 * 0.1).exp()).collect();
        let a = fit_constants(&tree, &x, &y);
        let b = fit_constants(&tree, &x, &y);
        assert_eq!(a, b);
    }

    #[test]
    fn partial_domain_failure_is_flagged() {
        // log(c*x1) with mixed-sign inputs: some rows are non-finite at the
        // start and stay so at the optimum, so the fit must be failed.
        let lib = lib1();
        let tree = parse_expression("log(c*x1)", &lib).unwrap();
        let x = Mat::from_vec(4, 1, vec![-1.0, 1.0, 2.0, 3.0]);
        let y = [0.0, 0.0, 0.7, 1.1];
        let fit = fit_constants(&tree, &x, &y);
        assert!(fit.failed);
        assert!(fit.nrmse.is_infinite());
    }
}
