//! Regressors for the interaction threshold.
//!
//! Four families share one fitted-model representation: epsilon-SVR with a
//! choice of kernel, exact Gaussian-process mean prediction, ElasticNet and
//! ridge. Features are standardised with statistics of the training data
//! before any family sees them.

mod cv;
mod kernel;
mod linalg;
mod linear;
mod svr;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{SigmaDataset, NUM_FEATURES};

pub use cv::{cross_validate, CvReport};
pub use kernel::Kernel;

/// Version tag written into serialised models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Default width of the SVR insensitive tube.
pub const DEFAULT_SVR_EPSILON: f64 = 0.01;

/// Default KKT tolerance of the SVR solver.
pub const DEFAULT_SVR_TOL: f64 = 1e-3;

const SVR_MAX_ITER: usize = 200_000;
const ELASTICNET_MAX_SWEEPS: usize = 100_000;

/// Design matrix and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Samples {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::data(format!("{} rows but {} targets", x.len(), y.len())));
        }
        if x.is_empty() {
            return Err(Error::data("no training samples"));
        }
        let p = x[0].len();
        if p == 0 || x.iter().any(|r| r.len() != p) {
            return Err(Error::data("rows must share a non-zero feature count"));
        }
        if x.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::data("samples contain non-finite values"));
        }
        Ok(Samples { x, y })
    }

    pub fn from_dataset(d: &SigmaDataset) -> Result<Self> {
        Samples::new(
            d.tuples.iter().map(|t| t.features().to_vec()).collect(),
            d.tuples.iter().map(|t| t.sigma_label).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x[0].len()
    }

    /// At most `cap` rows drawn without replacement, original order kept.
    pub fn subsample(&self, cap: usize, seed: u64) -> Samples {
        if cap >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.len(), cap).into_vec();
        picked.sort_unstable();
        Samples {
            x: picked.iter().map(|&i| self.x[i].clone()).collect(),
            y: picked.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Zero-variance features keep scale 1 and map to 0.
    pub fn fit(x: &[Vec<f64>]) -> Standardizer {
        let n = x.len() as f64;
        let p = x[0].len();
        let mean: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..p)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Svr,
    GaussianProcess,
    ElasticNet,
    Ridge,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Svr, Family::GaussianProcess, Family::ElasticNet, Family::Ridge];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Svr => "svr",
            Family::GaussianProcess => "gaussian_process",
            Family::ElasticNet => "elastic_net",
            Family::Ridge => "ridge",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "svr" => Ok(Family::Svr),
            "gp" | "gaussianprocess" => Ok(Family::GaussianProcess),
            "elasticnet" | "enet" => Ok(Family::ElasticNet),
            "ridge" => Ok(Family::Ridge),
            _ => Err(Error::param(format!("unknown regressor family {s:?}"))),
        }
    }
}

fn default_svr_tol() -> f64 {
    DEFAULT_SVR_TOL
}

/// A regressor family together with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RegressorSpec {
    Svr {
        kernel: Kernel,
        c: f64,
        epsilon: f64,
        #[serde(default = "default_svr_tol")]
        tol: f64,
    },
    GaussianProcess {
        kernel: Kernel,
        alpha: f64,
        normalize_y: bool,
    },
    ElasticNet {
        alpha: f64,
        l1_ratio: f64,
        tol: f64,
    },
    Ridge {
        alpha: f64,
    },
}

impl RegressorSpec {
    pub fn family(&self) -> Family {
        match self {
            RegressorSpec::Svr { .. } => Family::Svr,
            RegressorSpec::GaussianProcess { .. } => Family::GaussianProcess,
            RegressorSpec::ElasticNet { .. } => Family::ElasticNet,
            RegressorSpec::Ridge { .. } => Family::Ridge,
        }
    }

    pub fn svr(kernel: Kernel, c: f64) -> Self {
        RegressorSpec::Svr {
            kernel,
            c,
            epsilon: DEFAULT_SVR_EPSILON,
            tol: DEFAULT_SVR_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::param(msg)) };
        match *self {
            RegressorSpec::Svr { kernel, c, epsilon, tol } => {
                kernel.validate()?;
                check(c > 0.0 && c.is_finite(), format!("SVR C must be > 0, got {c}"))?;
                check(epsilon >= 0.0 && epsilon.is_finite(), format!("SVR epsilon must be >= 0, got {epsilon}"))?;
                check(tol > 0.0, format!("SVR tol must be > 0, got {tol}"))
            }
            RegressorSpec::GaussianProcess { kernel, alpha, .. } => {
                kernel.validate()?;
                check(alpha > 0.0 && alpha.is_finite(), format!("GP alpha must be > 0, got {alpha}"))
            }
            RegressorSpec::ElasticNet { alpha, l1_ratio, tol } => {
                check(alpha >= 0.0 && alpha.is_finite(), format!("ElasticNet alpha must be >= 0, got {alpha}"))?;
                check((0.0..=1.0).contains(&l1_ratio), format!("l1_ratio must be in [0, 1], got {l1_ratio}"))?;
                check(tol > 0.0, format!("ElasticNet tol must be > 0, got {tol}"))
            }
            RegressorSpec::Ridge { alpha } => {
                check(alpha >= 0.0 && alpha.is_finite(), format!("ridge alpha must be >= 0, got {alpha}"))
            }
        }
    }
}

/// Learned parameters, in standardised feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    /// `target_shift + target_scale * (bias + sum_i weights_i K(points_i, x))`.
    ///
    /// SVR stores its support vectors and `alpha - alpha*`; the Gaussian
    /// process stores every training input and `(K + alpha I)^-1 y`.
    KernelExpansion {
        kernel: Kernel,
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
        bias: f64,
        target_shift: f64,
        target_scale: f64,
    },
    /// `intercept + weights . x`.
    Linear { weights: Vec<f64>, intercept: f64 },
}

/// Fit diagnostics kept alongside the model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub iterations: usize,
    pub converged: bool,
    pub training_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub spec: RegressorSpec,
    pub num_features: usize,
    pub standardizer: Standardizer,
    /// Output range; predictions are clamped into it when present.
    pub clamp: Option<(f64, f64)>,
    pub params: ModelParams,
    pub info: FitInfo,
}

impl FittedModel {
    pub fn family(&self) -> Family {
        self.spec.family()
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = Some((lo, hi));
        self
    }

    /// Prediction before clamping.
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.num_features {
            return Err(Error::param(format!(
                "expected {} features, got {}",
                self.num_features,
                x.len()
            )));
        }
        let z = self.standardizer.transform(x);
        Ok(match &self.params {
            ModelParams::KernelExpansion {
                kernel,
                points,
                weights,
                bias,
                target_shift,
                target_scale,
            } => {
                let s: f64 = points.iter().zip(weights).map(|(p, w)| w * kernel.apply(p, &z)).sum();
                target_shift + target_scale * (bias + s)
            }
            ModelParams::Linear { weights, intercept } => intercept + kernel::dot(weights, &z),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let raw = self.predict_raw(x)?;
        Ok(match self.clamp {
            Some((lo, hi)) => raw.clamp(lo, hi),
            None => raw,
        })
    }

    pub fn predict_all(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        x.iter().map(|r| self.predict(r)).collect()
    }

    /// Weights and intercept of a linear model in the original feature units.
    pub fn linear_coefficients(&self) -> Option<(Vec<f64>, f64)> {
        let ModelParams::Linear { weights, intercept } = &self.params else {
            return None;
        };
        let st = &self.standardizer;
        let w: Vec<f64> = weights.iter().zip(&st.scale).map(|(w, s)| w / s).collect();
        let b = intercept - w.iter().zip(&st.mean).map(|(w, m)| w * m).sum::<f64>();
        Some((w, b))
    }
}

fn standardized(samples: &Samples) -> (Standardizer, Vec<Vec<f64>>) {
    let st = Standardizer::fit(&samples.x);
    let z = samples.x.iter().map(|r| st.transform(r)).collect();
    (st, z)
}

fn wrong_family(spec: &RegressorSpec, want: Family) -> Error {
    Error::param(format!("expected a {want} spec, got {}", spec.family()))
}

/// Fit any family.
pub fn fit(samples: &Samples, spec: &RegressorSpec) -> Result<FittedModel> {
    match spec.family() {
        Family::Svr => fit_svr(samples, spec),
        Family::GaussianProcess => fit_gp(samples, spec),
        Family::ElasticNet => fit_elasticnet(samples, spec),
        Family::Ridge => fit_ridge(samples, spec),
    }
}

/// Fit a threshold model: features from the tuples, output clamped to `[0, 1]`.
pub fn fit_sigma_model(d: &SigmaDataset, spec: &RegressorSpec, max_samples: Option<usize>, seed: u64) -> Result<FittedModel> {
    if d.is_empty() {
        return Err(Error::data("cannot fit on an empty dataset"));
    }
    let mut samples = Samples::from_dataset(d)?;
    if let Some(cap) = max_samples {
        samples = samples.subsample(cap, seed);
    }
    debug_assert_eq!(samples.num_features(), NUM_FEATURES);
    Ok(fit(&samples, spec)?.with_clamp(0.0, 1.0))
}

/// Epsilon-SVR trained in the dual.
pub fn fit_svr(samples: &Samples, spec: &RegressorSpec) -> Result<FittedModel> {
    let RegressorSpec::Svr { kernel, c, epsilon, tol } = *spec else {
        return Err(wrong_family(spec, Family::Svr));
    };
    spec.validate()?;
    let (st, z) = standardized(samples);
    let gram = kernel.gram(&z);
    let sol = svr::solve(&gram, &samples.y, c, epsilon, tol, SVR_MAX_ITER);
    let (points, weights): (Vec<_>, Vec<_>) = z
        .into_iter()
        .zip(sol.coef)
        .filter(|(_, a)| *a != 0.0)
        .unzip();
    Ok(FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        num_features: samples.num_features(),
        standardizer: st,
        clamp: None,
        params: ModelParams::KernelExpansion {
            kernel,
            points,
            weights,
            bias: -sol.rho,
            target_shift: 0.0,
            target_scale: 1.0,
        },
        info: FitInfo {
            iterations: sol.iterations,
            converged: sol.converged,
            training_samples: samples.len(),
        },
    })
}

/// Gaussian-process posterior mean via a Cholesky solve of `K + alpha I`.
pub fn fit_gp(samples: &Samples, spec: &RegressorSpec) -> Result<FittedModel> {
    let RegressorSpec::GaussianProcess { kernel, alpha, normalize_y } = *spec else {
        return Err(wrong_family(spec, Family::GaussianProcess));
    };
    spec.validate()?;
    let (st, z) = standardized(samples);
    let n = samples.len();
    let (shift, scale) = if normalize_y {
        let m = samples.y.iter().sum::<f64>() / n as f64;
        let sd = (samples.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        (m, if sd > 1e-12 { sd } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let targets: Vec<f64> = samples.y.iter().map(|v| (v - shift) / scale).collect();
    let mut a = kernel.gram(&z);
    for i in 0..n {
        a[i * n + i] += alpha;
    }
    let l = linalg::cholesky(&a, n).map_err(|e| {
        Error::numerical(format!("Gaussian-process fit failed ({e}); try a larger alpha than {alpha:e}"))
    })?;
    let weights = linalg::cholesky_solve(&l, n, &targets);
    Ok(FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        num_features: samples.num_features(),
        standardizer: st,
        clamp: None,
        params: ModelParams::KernelExpansion {
            kernel,
            points: z,
            weights,
            bias: 0.0,
            target_shift: shift,
            target_scale: scale,
        },
        info: FitInfo {
            iterations: 1,
            converged: true,
            training_samples: n,
        },
    })
}

fn centred_moments(samples: &Samples) -> (Standardizer, linear::Moments, f64) {
    let (st, z) = standardized(samples);
    let y_mean = samples.y.iter().sum::<f64>() / samples.len() as f64;
    let m = linear::Moments::new(&z, &samples.y, y_mean);
    (st, m, y_mean)
}

fn linear_model(spec: &RegressorSpec, samples: &Samples, st: Standardizer, weights: Vec<f64>, intercept: f64, info: FitInfo) -> FittedModel {
    FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        num_features: samples.num_features(),
        standardizer: st,
        clamp: None,
        params: ModelParams::Linear { weights, intercept },
        info,
    }
}

/// ElasticNet by cyclic coordinate descent.
pub fn fit_elasticnet(samples: &Samples, spec: &RegressorSpec) -> Result<FittedModel> {
    let RegressorSpec::ElasticNet { alpha, l1_ratio, tol } = *spec else {
        return Err(wrong_family(spec, Family::ElasticNet));
    };
    spec.validate()?;
    let (st, m, y_mean) = centred_moments(samples);
    let fit = linear::elasticnet(&m, alpha, l1_ratio, tol, ELASTICNET_MAX_SWEEPS);
    let info = FitInfo {
        iterations: fit.sweeps,
        converged: fit.sweeps < ELASTICNET_MAX_SWEEPS,
        training_samples: samples.len(),
    };
    Ok(linear_model(spec, samples, st, fit.weights, y_mean, info))
}

/// Ridge regression in closed form.
pub fn fit_ridge(samples: &Samples, spec: &RegressorSpec) -> Result<FittedModel> {
    let RegressorSpec::Ridge { alpha } = *spec else {
        return Err(wrong_family(spec, Family::Ridge));
    };
    spec.validate()?;
    let (st, m, y_mean) = centred_moments(samples);
    let w = linear::ridge(&m, alpha)?;
    let info = FitInfo {
        iterations: 1,
        converged: true,
        training_samples: samples.len(),
    };
    Ok(linear_model(spec, samples, st, w, y_mean, info))
}

/// Mean squared error.
pub fn mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::param(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::param("mse of an empty sample"));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l) * (p - l))
        .sum::<f64>()
        / predictions.len() as f64)
}

/// MSE of a threshold model on every tuple of `d`.
pub fn dataset_mse(model: &FittedModel, d: &SigmaDataset) -> Result<f64> {
    let preds = d
        .tuples
        .iter()
        .map(|t| model.predict(&t.features()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = d.tuples.iter().map(|t| t.sigma_label).collect();
    mse(&preds, &labels)
}
