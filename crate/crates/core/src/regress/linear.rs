//! Penalised least squares on standardised features.
//!
//! Both solvers work from the centred Gram matrix `X'X` and `X'y`, so their
//! per-sweep cost does not depend on the number of samples.

use super::linalg::{cholesky, cholesky_solve};
use crate::error::Result;

/// Sufficient statistics of a centred least-squares problem.
pub(crate) struct Moments {
    pub n: usize,
    pub p: usize,
    /// `X'X`, row-major `p x p`.
    pub gram: Vec<f64>,
    pub xty: Vec<f64>,
    pub yty: f64,
}

impl Moments {
    /// `x` must already be column-centred; `y` is centred here.
    pub fn new(x: &[Vec<f64>], y: &[f64], y_mean: f64) -> Moments {
        let n = x.len();
        let p = x.first().map_or(0, Vec::len);
        let mut gram = vec![0.0; p * p];
        let mut xty = vec![0.0; p];
        let mut yty = 0.0;
        for (row, &yi) in x.iter().zip(y) {
            let yc = yi - y_mean;
            yty += yc * yc;
            for a in 0..p {
                xty[a] += row[a] * yc;
                for b in 0..=a {
                    gram[a * p + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[b * p + a] = gram[a * p + b];
            }
        }
        Moments {
            n,
            p,
            gram,
            xty,
            yty,
        }
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// `1/(2n) |y - Xw|^2 + alpha * (l1 |w|_1 + (1 - l1)/2 |w|^2)`.
pub(crate) fn elasticnet_objective(m: &Moments, w: &[f64], alpha: f64, l1_ratio: f64) -> f64 {
    let p = m.p;
    let mut quad = 0.0;
    for a in 0..p {
        for b in 0..p {
            quad += w[a] * m.gram[a * p + b] * w[b];
        }
    }
    let lin: f64 = w.iter().zip(&m.xty).map(|(a, b)| a * b).sum();
    let rss = (m.yty - 2.0 * lin + quad).max(0.0);
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let l2: f64 = w.iter().map(|v| v * v).sum();
    rss / (2.0 * m.n as f64) + alpha * (l1_ratio * l1 + 0.5 * (1.0 - l1_ratio) * l2)
}

pub(crate) struct ElasticNetFit {
    pub weights: Vec<f64>,
    pub sweeps: usize,
    /// Objective after each sweep.
    #[cfg_attr(not(test), allow(dead_code))]
    pub objective: Vec<f64>,
}

/// Cyclic coordinate descent; stops when the largest coordinate change is
/// below `tol` times the largest weight, or after `max_sweeps`.
pub(crate) fn elasticnet(m: &Moments, alpha: f64, l1_ratio: f64, tol: f64, max_sweeps: usize) -> ElasticNetFit {
    let (n, p) = (m.n as f64, m.p);
    let l1_pen = alpha * l1_ratio;
    let l2_pen = alpha * (1.0 - l1_ratio);
    let mut w = vec![0.0; p];
    let mut objective = Vec::new();
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_step = 0.0f64;
        let mut max_w = 0.0f64;
        for j in 0..p {
            let gjj = m.gram[j * p + j];
            let denom = gjj / n + l2_pen;
            if denom <= 0.0 {
                // constant column, contributes nothing
                w[j] = 0.0;
                continue;
            }
            let cross: f64 = (0..p).filter(|&k| k != j).map(|k| m.gram[j * p + k] * w[k]).sum();
            let rho = (m.xty[j] - cross) / n;
            let new = soft_threshold(rho, l1_pen) / denom;
            max_step = max_step.max((new - w[j]).abs());
            w[j] = new;
            max_w = max_w.max(new.abs());
        }
        objective.push(elasticnet_objective(m, &w, alpha, l1_ratio));
        if max_w == 0.0 || max_step <= tol * max_w {
            break;
        }
    }
    ElasticNetFit {
        weights: w,
        sweeps,
        objective,
    }
}

/// Minimiser of `|y - Xw|^2 + alpha |w|^2`. Columns with zero variance, or
/// (when `alpha` is zero) columns that are linear combinations of earlier
/// ones, get zero weight.
pub(crate) fn ridge(m: &Moments, alpha: f64) -> Result<Vec<f64>> {
    let p = m.p;
    let mut active: Vec<usize> = Vec::new();
    for j in (0..p).filter(|&j| m.gram[j * p + j] > 0.0) {
        let mut trial = active.clone();
        trial.push(j);
        let (a, _) = system(m, &trial, alpha);
        let q = trial.len();
        if let Ok(l) = cholesky(&a, q) {
            // relative pivot size: tiny means j is (nearly) dependent
            let piv = l[(q - 1) * q + q - 1];
            if piv * piv > 1e-10 * (m.gram[j * p + j] + alpha) {
                active = trial;
            }
        }
    }
    let q = active.len();
    let (a, b) = system(m, &active, alpha);
    let l = cholesky(&a, q)?;
    let sol = cholesky_solve(&l, q, &b);
    let mut w = vec![0.0; p];
    for (r, &j) in active.iter().enumerate() {
        w[j] = sol[r];
    }
    Ok(w)
}

fn system(m: &Moments, cols: &[usize], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let (p, q) = (m.p, cols.len());
    let mut a = vec![0.0; q * q];
    let mut b = vec![0.0; q];
    for (r, &i) in cols.iter().enumerate() {
        b[r] = m.xty[i];
        for (s, &j) in cols.iter().enumerate() {
            a[r * q + s] = m.gram[i * p + j];
        }
        a[r * q + r] += alpha;
    }
    (a, b)
}
