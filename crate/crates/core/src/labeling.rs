//! Threshold labels from observed transitions.
//!
//! For a fixed `mu`, the predicted next score of an ego after meeting one
//! alter is a two-valued step function of `sigma`: it equals the pulled value
//! for `sigma >= |delta|` and the unchanged value below. A label therefore
//! records which branch explains the observed next score better, plus one
//! representative threshold from that branch's feasible interval.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{EgoNetwork, ValueDimension};
use crate::error::{Error, Result};

/// Default margin added above `|delta|` for interaction-branch labels.
pub const DEFAULT_DELTA: f64 = 0.01;

/// Number of regression features per tuple.
pub const NUM_FEATURES: usize = 4;

/// One regression instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaTuple {
    pub ego_id: String,
    pub alter_id: String,
    pub dimension: ValueDimension,
    /// Segment of the "before" observation; the "after" one is `segment + 1`.
    pub segment: u32,
    pub v_i_t: f64,
    pub v_j_t: f64,
    pub v_i_next: f64,
    pub mu: f64,
    pub sigma_label: f64,
}

impl SigmaTuple {
    /// Feature vector `[v_i_t, v_j_t, v_i_next, mu]`.
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [self.v_i_t, self.v_j_t, self.v_i_next, self.mu]
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub mu: f64,
    pub delta: f64,
    pub networks_used: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SigmaDataset {
    pub tuples: Vec<SigmaTuple>,
    pub provenance: Provenance,
}

impl SigmaDataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Distinct ego ids in order of first appearance.
    pub fn ego_ids(&self) -> Vec<String> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for t in &self.tuples {
            if seen.insert(t.ego_id.as_str(), ()).is_none() {
                out.push(t.ego_id.clone());
            }
        }
        out
    }

    /// Sub-dataset holding only tuples whose ego is in `egos`.
    pub fn select_egos(&self, egos: &[String]) -> SigmaDataset {
        let keep: std::collections::HashSet<&str> = egos.iter().map(String::as_str).collect();
        SigmaDataset {
            tuples: self
                .tuples
                .iter()
                .filter(|t| keep.contains(t.ego_id.as_str()))
                .cloned()
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Threshold label for one observed transition.
///
/// Compares the squared error of the "interacted" and "did not interact"
/// predictions; ties go to the interaction branch. Interaction labels are
/// `min(|delta| + margin, 1)`, non-interaction labels `|delta| / 2`.
pub fn label_sigma(v_i_t: f64, v_j_t: f64, v_i_next: f64, mu: f64, margin: f64) -> f64 {
    let diff = v_j_t - v_i_t;
    let gap = diff.abs();
    let e_on = (v_i_t + mu * diff - v_i_next).powi(2);
    let e_off = (v_i_t - v_i_next).powi(2);
    if e_on <= e_off {
        (gap + margin).min(1.0)
    } else {
        gap / 2.0
    }
}

/// Grid-search counterpart of [`label_sigma`].
///
/// Evaluates the prediction error for every threshold on a uniform grid over
/// `[0, 1]` and takes the set of minimisers, which is always a run of grid
/// points. A run starting at zero (the gate must stay shut) is summarised by
/// its median; any other run by its lower end, the smallest threshold that
/// lets the pair interact.
pub fn label_sigma_oracle(
    v_i_t: f64,
    v_j_t: f64,
    v_i_next: f64,
    mu: f64,
    resolution: f64,
) -> Result<f64> {
    if !(1e-3..=1.0).contains(&resolution) {
        return Err(Error::param(format!(
            "grid resolution must be in [1e-3, 1], got {resolution}"
        )));
    }
    let steps = (1.0 / resolution).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let errors: Vec<f64> = grid
        .iter()
        .map(|&s| {
            let predicted = if (v_j_t - v_i_t).abs() <= s {
                v_i_t + mu * (v_j_t - v_i_t)
            } else {
                v_i_t
            };
            (predicted - v_i_next).powi(2)
        })
        .collect();
    let best = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    let argmin: Vec<f64> = grid
        .iter()
        .zip(&errors)
        .filter(|(_, &e)| e == best)
        .map(|(&s, _)| s)
        .collect();
    if argmin[0] == 0.0 {
        let m = argmin.len();
        Ok(if m % 2 == 1 {
            argmin[m / 2]
        } else {
            (argmin[m / 2 - 1] + argmin[m / 2]) / 2.0
        })
    } else {
        Ok(argmin[0])
    }
}

/// One tuple per (ego, alter, dimension, consecutive-segment transition).
///
/// Networks are visited in ego-id order; within a network tuples are ordered
/// by segment, then alter order, then dimension. Networks with fewer than two
/// segments are skipped and reported in the provenance warnings.
pub fn build_dataset(networks: &[EgoNetwork], mu: f64, margin: f64) -> Result<SigmaDataset> {
    if !(mu > 0.0 && mu <= 0.5) {
        return Err(Error::param(format!("mu must be in (0, 0.5], got {mu}")));
    }
    if !(margin > 0.0) {
        return Err(Error::param(format!("margin must be > 0, got {margin}")));
    }
    let mut order: Vec<&EgoNetwork> = networks.iter().collect();
    order.sort_by(|a, b| a.ego_id().cmp(b.ego_id()));

    let mut provenance = Provenance {
        mu,
        delta: margin,
        ..Provenance::default()
    };
    if networks.is_empty() {
        provenance.warnings.push("no networks supplied".to_string());
    }
    let mut tuples = Vec::new();
    for net in order {
        if net.num_segments() < 2 {
            provenance.warnings.push(format!(
                "ego {}: {} segment(s), at least 2 needed; skipped",
                net.ego_id(),
                net.num_segments()
            ));
            continue;
        }
        provenance.networks_used += 1;
        let ego = net.trajectory(0);
        for s in 0..net.num_segments() - 1 {
            for (k, alter_id) in net.alter_ids().iter().enumerate() {
                let alter = &net.trajectory(k + 1)[s];
                for dim in ValueDimension::ALL {
                    let (v_i_t, v_j_t, v_i_next) =
                        (ego[s].get(dim), alter.get(dim), ego[s + 1].get(dim));
                    tuples.push(SigmaTuple {
                        ego_id: net.ego_id().to_string(),
                        alter_id: alter_id.clone(),
                        dimension: dim,
                        segment: net.first_segment() + s as u32,
                        v_i_t,
                        v_j_t,
                        v_i_next,
                        mu,
                        sigma_label: label_sigma(v_i_t, v_j_t, v_i_next, mu, margin),
                    });
                }
            }
        }
    }
    Ok(SigmaDataset { tuples, provenance })
}

/// Split proportions, in the order train / test / validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            test: 0.2,
            validation: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, test: f64, validation: f64) -> Result<Self> {
        let f = SplitFractions {
            train,
            test,
            validation,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.test, self.validation];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::param(format!("split fractions must lie in [0, 1]: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("split fractions must sum to 1: {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: SigmaDataset,
    pub validation: SigmaDataset,
    pub test: SigmaDataset,
}

/// Partition egos into train / validation / test, never splitting an ego.
///
/// Ego counts follow the largest-remainder rounding of the fractions. Every
/// split with a positive fraction must receive at least one ego.
pub fn split_dataset(d: &SigmaDataset, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    fractions.validate()?;
    let mut egos = d.ego_ids();
    let n = egos.len();
    let wanted = [fractions.train, fractions.validation, fractions.test];
    let counts = largest_remainder(n, &wanted);
    for (name, (&c, &f)) in ["train", "validation", "test"].iter().zip(counts.iter().zip(&wanted)) {
        if f > 0.0 && c == 0 {
            return Err(Error::data(format!(
                "dataset has {n} ego(s); too few to give the {name} split at least one"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    egos.shuffle(&mut rng);
    let (train, rest) = egos.split_at(counts[0]);
    let (validation, test) = rest.split_at(counts[1]);
    Ok(Splits {
        train: d.select_egos(train),
        validation: d.select_egos(validation),
        test: d.select_egos(test),
    })
}

fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}
