use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dataset_mse, fit_sigma_model, RegressorSpec};
use crate::error::{Error, Result};
use crate::labeling::SigmaDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub iterations: usize,
    pub mean_mse: f64,
    /// Iteration-major: `fold_mses[it * folds + f]`.
    pub fold_mses: Vec<f64>,
}

/// Repeated k-fold cross-validation with folds grouped by ego.
///
/// Each iteration reshuffles the egos with its own seeded stream and deals
/// them round-robin into `folds` groups. When `max_train` is set, each
/// training fold is subsampled to at most that many tuples; held-out folds
/// are always scored in full.
pub fn cross_validate(
    d: &SigmaDataset,
    spec: &RegressorSpec,
    folds: usize,
    iterations: usize,
    seed: u64,
    max_train: Option<usize>,
) -> Result<CvReport> {
    if folds < 2 {
        return Err(Error::param(format!("need at least 2 folds, got {folds}")));
    }
    if iterations == 0 {
        return Err(Error::param("need at least one iteration"));
    }
    spec.validate()?;
    let egos = d.ego_ids();
    if egos.len() < folds {
        return Err(Error::data(format!(
            "{} ego(s) cannot fill {folds} folds",
            egos.len()
        )));
    }

    let jobs: Vec<(usize, Vec<String>, Vec<String>)> = (0..iterations)
        .flat_map(|it| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(it as u64);
            let mut order = egos.clone();
            order.shuffle(&mut rng);
            (0..folds)
                .map(|f| {
                    let (held, kept): (Vec<_>, Vec<_>) = order
                        .iter()
                        .enumerate()
                        .partition(|(i, _)| i % folds == f);
                    let held = held.into_iter().map(|(_, e)| e.clone()).collect();
                    let kept = kept.into_iter().map(|(_, e)| e.clone()).collect();
                    (it * folds + f, kept, held)
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let fold_mses = jobs
        .par_iter()
        .map(|(job, kept, held)| {
            let train = d.select_egos(kept);
            let test = d.select_egos(held);
            let model = fit_sigma_model(&train, spec, max_train, seed ^ (*job as u64))?;
            dataset_mse(&model, &test)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_mse = fold_mses.iter().sum::<f64>() / fold_mses.len() as f64;
    Ok(CvReport {
        folds,
        iterations,
        mean_mse,
        fold_mses,
    })
}
