//! Dual solver for epsilon-insensitive support vector regression.
//!
//! The dual is written over `2n` box-constrained variables
//! `beta = [alpha; alpha_star]` with labels `+1` for the first half and `-1`
//! for the second:
//!
//! ```text
//! min  1/2 beta' Q beta + p' beta
//! s.t. y' beta = 0,  0 <= beta_t <= C
//! Q_ts = y_t y_s K(i_t, i_s),  p_t = eps - y_i (t < n),  p_t = eps + y_i (t >= n)
//! ```
//!
//! Each iteration updates a maximal-violating pair chosen with second-order
//! information and stops once the KKT gap `m(beta) - M(beta)` drops below
//! the tolerance. The regression function is
//! `f(x) = sum_i (alpha_i - alpha_star_i) K(x_i, x) - rho`.

const TAU: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct SvrSolution {
    /// `alpha_i - alpha_star_i` per training point.
    pub coef: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final maximal KKT violation.
    #[cfg_attr(not(test), allow(dead_code))]
    pub gap: f64,
}

/// Solve the dual given a row-major Gram matrix `k` over `y.len()` points.
pub(crate) fn solve(
    k: &[f64],
    y: &[f64],
    c: f64,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> SvrSolution {
    let n = y.len();
    let l = 2 * n;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let idx = |t: usize| if t < n { t } else { t - n };
    let diag = |t: usize| k[idx(t) * n + idx(t)];

    let mut alpha = vec![0.0; l];
    let mut grad: Vec<f64> = (0..l)
        .map(|t| if t < n { eps - y[t] } else { eps + y[t - n] })
        .collect();

    let mut iterations = 0;
    let mut converged = false;
    let mut gap: f64;

    loop {
        // first index: maximal violation among variables that can move up
        let mut gmax = f64::NEG_INFINITY;
        let mut first = None;
        for t in 0..l {
            if sign(t) > 0.0 {
                if alpha[t] < c && -grad[t] >= gmax {
                    gmax = -grad[t];
                    first = Some(t);
                }
            } else if alpha[t] > 0.0 && grad[t] >= gmax {
                gmax = grad[t];
                first = Some(t);
            }
        }
        let Some(i) = first else {
            converged = true;
            gap = 0.0;
            break;
        };
        let yi = sign(i);
        let row_i = &k[idx(i) * n..idx(i) * n + n];

        // second index: largest objective decrease
        let mut gmax2 = f64::NEG_INFINITY;
        let mut second = None;
        let mut best_decrease = f64::INFINITY;
        for t in 0..l {
            let kit = row_i[idx(t)];
            if sign(t) > 0.0 {
                if alpha[t] > 0.0 {
                    let grad_diff = gmax + grad[t];
                    if grad[t] >= gmax2 {
                        gmax2 = grad[t];
                    }
                    if grad_diff > 0.0 {
                        let quad = diag(i) + diag(t) - 2.0 * kit;
                        let quad = if quad > 0.0 { quad } else { TAU };
                        let dec = -grad_diff * grad_diff / quad;
                        if dec <= best_decrease {
                            best_decrease = dec;
                            second = Some(t);
                        }
                    }
                }
            } else if alpha[t] < c {
                let grad_diff = gmax - grad[t];
                if -grad[t] >= gmax2 {
                    gmax2 = -grad[t];
                }
                if grad_diff > 0.0 {
                    let quad = diag(i) + diag(t) - 2.0 * kit;
                    let quad = if quad > 0.0 { quad } else { TAU };
                    let dec = -grad_diff * grad_diff / quad;
                    if dec <= best_decrease {
                        best_decrease = dec;
                        second = Some(t);
                    }
                }
            }
        }
        gap = gmax + gmax2;
        let Some(j) = second else {
            converged = true;
            break;
        };
        if gap < tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let yj = sign(j);
        let q_ij = yi * yj * row_i[idx(j)];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if yi != yj {
            let quad = diag(i) + diag(j) + 2.0 * q_ij;
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = diag(i) + diag(j) - 2.0 * q_ij;
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let di = yi * (alpha[i] - old_i);
        let dj = yj * (alpha[j] - old_j);
        let row_j = &k[idx(j) * n..idx(j) * n + n];
        for s in 0..n {
            let v = di * row_i[s] + dj * row_j[s];
            grad[s] += v;
            grad[s + n] -= v;
        }
    }

    let rho = compute_rho(&alpha, &grad, c, n);
    let coef = (0..n).map(|i| alpha[i] - alpha[i + n]).collect();
    SvrSolution {
        coef,
        rho,
        iterations,
        converged,
        gap,
    }
}

fn compute_rho(alpha: &[f64], grad: &[f64], c: f64, n: usize) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..2 * n {
        let y = if t < n { 1.0 } else { -1.0 };
        let yg = y * grad[t];
        if alpha[t] >= c {
            if y < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    if free > 0 {
        free_sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::Kernel;

    fn fit_1d(x: &[f64], y: &[f64], kernel: Kernel, c: f64, eps: f64) -> (Vec<f64>, SvrSolution) {
        let pts: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let k = kernel.gram(&pts);
        let sol = solve(&k, y, c, eps, 1e-3, 100_000);
        let n = y.len();
        let f = (0..n)
            .map(|i| (0..n).map(|s| sol.coef[s] * k[i * n + s]).sum::<f64>() - sol.rho)
            .collect();
        (f, sol)
    }

    #[test]
    fn constant_labels_need_no_support_vectors() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let (f, sol) = fit_1d(&x, &[0.3; 8], Kernel::Rbf { gamma: 1.0 }, 10.0, 0.01);
        assert!(sol.coef.iter().all(|&a| a == 0.0));
        assert!(f.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn per_point_kkt_conditions_hold() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let y: Vec<f64> = x.iter().map(|v| (6.0 * v).sin() * 0.4 + 0.5).collect();
        let (c, eps, tol) = (5.0, 0.05, 1e-3);
        let (f, sol) = fit_1d(&x, &y, Kernel::Rbf { gamma: 2.0 }, c, eps);
        assert!(sol.converged);
        assert!(sol.gap < tol);
        for i in 0..y.len() {
            let r = y[i] - f[i];
            let a = sol.coef[i];
            assert!(a.abs() <= c + 1e-12);
            if a == 0.0 {
                assert!(r.abs() <= eps + tol, "i={i} r={r}");
            } else if a.abs() < c {
                assert!((r - eps * a.signum()).abs() <= tol, "i={i} r={r} a={a}");
            } else {
                assert!(r * a.signum() >= eps - tol, "i={i} r={r} a={a}");
            }
        }
    }

    #[test]
    fn dual_weights_sum_to_zero() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (v * 0.7).cos()).collect();
        let (_, sol) = fit_1d(&x, &y, Kernel::Rbf { gamma: 0.3 }, 2.0, 0.1);
        assert!(sol.coef.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn iteration_cap_stops_early() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let pts: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let k = Kernel::Rbf { gamma: 5.0 }.gram(&pts);
        let sol = solve(&k, &y, 100.0, 0.001, 1e-6, 3);
        assert_eq!(sol.iterations, 3);
        assert!(!sol.converged);
    }
    #[test]
    fn duplicating_a_non_support_point_changes_nothing() {
        let kernel = Kernel::Rbf { gamma: 3.0 };
        let x: Vec<f64> = (0..25).map(|i| i as f64 / 24.0).collect();
        let y: Vec<f64> = x.iter().map(|v| (4.0 * v).sin() * 0.3 + 0.5).collect();
        let (c, eps) = (10.0, 0.05);
        let (f, sol) = fit_1d(&x, &y, kernel, c, eps);
        let inside = (0..25)
            .filter(|&i| sol.coef[i] == 0.0)
            .min_by(|&a, &b| (f[a] - y[a]).abs().partial_cmp(&(f[b] - y[b]).abs()).unwrap())
            .expect("some point lies inside the tube");

        let mut x2 = x.clone();
        let mut y2 = y.clone();
        x2.push(x[inside]);
        y2.push(y[inside]);
        let (_, sol2) = fit_1d(&x2, &y2, kernel, c, eps);
        let predict = |xs: &[f64], s: &SvrSolution, p: f64| {
            xs.iter().zip(&s.coef).map(|(&xi, a)| a * kernel.apply(&[xi], &[p])).sum::<f64>() - s.rho
        };
        for k in 0..50 {
            let p = k as f64 / 49.0;
            let d = (predict(&x, &sol, p) - predict(&x2, &sol2, p)).abs();
            assert!(d < 5e-3, "probe {p}: {d}");
        }
    }
}
