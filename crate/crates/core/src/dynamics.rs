//! Bounded-confidence dynamics on star-shaped ego networks.
//!
//! The pairwise rule moves a score a fraction `mu` toward a peer's score when
//! the two differ by at most `sigma`, and leaves it untouched otherwise. The
//! gate is closed at the boundary: a difference of exactly `sigma` interacts.
//! Every value dimension evolves independently.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{BcmParams, EgoNetwork, ValueDimension, ValueProfile};
use crate::error::{Error, Result};

/// Who moves during an encounter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionMode {
    /// Only the ego updates.
    #[default]
    EgoOnly,
    /// Both parties move toward each other with the same `mu`.
    Symmetric,
}

/// How an ego meets its alters within one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupScheme {
    /// The ego meets every alter once, in alter order.
    #[default]
    Sequential,
    /// The ego moves once toward the mean of all alters inside the threshold.
    MeanField,
}

impl FromStr for InteractionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ego-only" | "egoonly" | "ego" => Ok(InteractionMode::EgoOnly),
            "symmetric" => Ok(InteractionMode::Symmetric),
            _ => Err(Error::param(format!("unknown interaction mode {s:?}"))),
        }
    }
}

impl FromStr for GroupScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sequential" => Ok(GroupScheme::Sequential),
            "meanfield" | "mean-field" => Ok(GroupScheme::MeanField),
            _ => Err(Error::param(format!("unknown group scheme {s:?}"))),
        }
    }
}

impl fmt::Display for InteractionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InteractionMode::EgoOnly => "ego-only",
            InteractionMode::Symmetric => "symmetric",
        })
    }
}

impl fmt::Display for GroupScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupScheme::Sequential => "sequential",
            GroupScheme::MeanField => "meanfield",
        })
    }
}

/// Gate check for one (ego, alter) pair on one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encounter {
    /// User indices within the network, ego = 0.
    pub pair: (usize, usize),
    pub dimension: ValueDimension,
    pub interacted: bool,
}

/// State of a group after one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Ego first, then alters.
    pub snapshot: Vec<ValueProfile>,
    pub encounters: Vec<Encounter>,
}

#[inline]
fn gate(v_i: f64, v_j: f64, sigma: f64) -> bool {
    (v_j - v_i).abs() <= sigma
}

/// Move `v_i` a fraction `mu` toward `v_j`, kept within the segment between them.
#[inline]
fn pull(v_i: f64, v_j: f64, mu: f64) -> f64 {
    let moved = v_i + mu * (v_j - v_i);
    moved.clamp(v_i.min(v_j), v_i.max(v_j))
}

/// One bounded-confidence update of `v_i` after meeting `v_j`.
///
/// Returns `v_i` bit-for-bit when `|v_j - v_i| > sigma`.
pub fn bcm_pair_update(v_i: f64, v_j: f64, params: &BcmParams) -> Result<f64> {
    for (name, v) in [("v_i", v_i), ("v_j", v_j)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::param(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    Ok(pair_update(v_i, v_j, params.mu(), params.sigma()))
}

#[inline]
pub(crate) fn pair_update(v_i: f64, v_j: f64, mu: f64, sigma: f64) -> f64 {
    if gate(v_i, v_j, sigma) {
        pull(v_i, v_j, mu)
    } else {
        v_i
    }
}

/// Advance a group (ego at index 0) by one step in place.
pub fn step_users(
    users: &mut [ValueProfile],
    params: &BcmParams,
    mode: InteractionMode,
    scheme: GroupScheme,
) -> Vec<Encounter> {
    let (mu, sigma) = (params.mu(), params.sigma());
    let n = users.len();
    let mut encounters = Vec::with_capacity(n.saturating_sub(1) * ValueDimension::COUNT);
    for dim in ValueDimension::ALL {
        let d = dim.index();
        match scheme {
            GroupScheme::Sequential => {
                for k in 1..n {
                    let (e, a) = (users[0].scores[d], users[k].scores[d]);
                    let interacted = gate(e, a, sigma);
                    if interacted {
                        users[0].scores[d] = pull(e, a, mu);
                        if mode == InteractionMode::Symmetric {
                            users[k].scores[d] = pull(a, e, mu);
                        }
                    }
                    encounters.push(Encounter {
                        pair: (0, k),
                        dimension: dim,
                        interacted,
                    });
                }
            }
            GroupScheme::MeanField => {
                let e = users[0].scores[d];
                let mut sum = 0.0;
                let mut count = 0usize;
                for k in 1..n {
                    let a = users[k].scores[d];
                    let interacted = gate(e, a, sigma);
                    if interacted {
                        sum += a;
                        count += 1;
                    }
                    encounters.push(Encounter {
                        pair: (0, k),
                        dimension: dim,
                        interacted,
                    });
                }
                if count == 0 {
                    continue;
                }
                let mean = sum / count as f64;
                users[0].scores[d] = pull(e, mean, mu);
                if mode == InteractionMode::Symmetric {
                    // each qualifying alter gives back its share of the ego's move
                    let share = mu / count as f64;
                    for k in 1..n {
                        let a = users[k].scores[d];
                        if gate(e, a, sigma) {
                            users[k].scores[d] = pull(a, e, share);
                        }
                    }
                }
            }
        }
    }
    encounters
}

/// Updated ego profile after one step starting from `segment`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStep {
    pub ego: ValueProfile,
    pub trace: StepTrace,
}

/// Apply one step of group influence to the state observed at `segment`.
pub fn group_step(
    net: &EgoNetwork,
    segment: u32,
    params: &BcmParams,
    mode: InteractionMode,
    scheme: GroupScheme,
) -> Result<GroupStep> {
    let mut users = net.snapshot(segment).ok_or_else(|| {
        Error::param(format!(
            "segment {segment} is outside {}..={} for ego {}",
            net.first_segment(),
            net.last_segment(),
            net.ego_id()
        ))
    })?;
    let encounters = step_users(&mut users, params, mode, scheme);
    Ok(GroupStep {
        ego: users[0],
        trace: StepTrace {
            step: 1,
            snapshot: users,
            encounters,
        },
    })
}

/// Run `steps` steps from the network's first segment.
///
/// The result holds `steps + 1` traces; the first is the initial state.
pub fn simulate(
    net: &EgoNetwork,
    params: &BcmParams,
    mode: InteractionMode,
    scheme: GroupScheme,
    steps: usize,
) -> Vec<StepTrace> {
    let initial = net
        .snapshot(net.first_segment())
        .expect("first segment is always present");
    simulate_users(initial, params, mode, scheme, steps)
}

/// [`simulate`] on a bare group state, ego at index 0.
pub fn simulate_users(
    mut users: Vec<ValueProfile>,
    params: &BcmParams,
    mode: InteractionMode,
    scheme: GroupScheme,
    steps: usize,
) -> Vec<StepTrace> {
    let mut traces = Vec::with_capacity(steps + 1);
    traces.push(StepTrace {
        step: 0,
        snapshot: users.clone(),
        encounters: Vec::new(),
    });
    for step in 1..=steps {
        let encounters = step_users(&mut users, params, mode, scheme);
        traces.push(StepTrace {
            step,
            snapshot: users.clone(),
            encounters,
        });
    }
    traces
}

/// Largest max-min score gap across users, over all dimensions.
pub fn spread(snapshot: &[ValueProfile]) -> f64 {
    ValueDimension::ALL
        .iter()
        .map(|&dim| {
            let (lo, hi) = snapshot.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.get(dim)), hi.max(p.get(dim)))
            });
            if snapshot.is_empty() { 0.0 } else { hi - lo }
        })
        .fold(0.0, f64::max)
}

/// Whether the last snapshot has reached consensus, with its spread.
pub fn converged(traces: &[StepTrace], tolerance: f64) -> Result<(bool, f64)> {
    if !(tolerance > 0.0) {
        return Err(Error::param(format!("tolerance must be > 0, got {tolerance}")));
    }
    let last = traces
        .last()
        .ok_or_else(|| Error::param("cannot assess convergence of an empty trace list"))?;
    let s = spread(&last.snapshot);
    Ok((s < tolerance, s))
}
