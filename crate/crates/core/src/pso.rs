//! Particle swarm optimisation over box-constrained, conditional spaces.
//!
//! Positions are stored as one `f64` per dimension; categorical dimensions
//! hold the index of the chosen option and carry no velocity. Random draws
//! come from a stream keyed by `(generation, particle)`, so fitness values
//! can be computed in parallel without changing the trajectory.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::SigmaDataset;
use crate::regress::{dataset_mse, fit_sigma_model, Family, Kernel, RegressorSpec, DEFAULT_SVR_EPSILON, DEFAULT_SVR_TOL};

/// Inertia weight used unless configured otherwise.
pub const DEFAULT_INERTIA: f64 = 0.7298;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimensionKind {
    Continuous { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Categorical { choices: Vec<String> },
}

/// A dimension is active only while `dimension` holds `choice`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub dimension: String,
    pub choice: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    #[serde(flatten)]
    pub kind: DimensionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_when: Option<Activation>,
}

impl Dimension {
    pub fn continuous(name: &str, lo: f64, hi: f64) -> Self {
        Dimension {
            name: name.into(),
            kind: DimensionKind::Continuous { lo, hi },
            active_when: None,
        }
    }

    pub fn integer(name: &str, lo: i64, hi: i64) -> Self {
        Dimension {
            name: name.into(),
            kind: DimensionKind::Integer { lo, hi },
            active_when: None,
        }
    }

    pub fn categorical(name: &str, choices: &[&str]) -> Self {
        Dimension {
            name: name.into(),
            kind: DimensionKind::Categorical {
                choices: choices.iter().map(|c| c.to_string()).collect(),
            },
            active_when: None,
        }
    }

    pub fn when(mut self, dimension: &str, choice: &str) -> Self {
        self.active_when = Some(Activation {
            dimension: dimension.into(),
            choice: choice.into(),
        });
        self
    }

    /// Numeric bounds of the stored coordinate.
    fn bounds(&self) -> (f64, f64) {
        match &self.kind {
            DimensionKind::Continuous { lo, hi } => (*lo, *hi),
            DimensionKind::Integer { lo, hi } => (*lo as f64, *hi as f64),
            DimensionKind::Categorical { choices } => (0.0, (choices.len() - 1) as f64),
        }
    }

    fn is_categorical(&self) -> bool {
        matches!(self.kind, DimensionKind::Categorical { .. })
    }
}

/// Decoded value of one active dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Real(f64),
    Int(i64),
    Choice(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Real(v) => write!(f, "{v}"),
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Choice(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dimensions: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self> {
        let s = SearchSpace { dimensions };
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SearchSpace = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.dimensions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dimensions.is_empty()
    }

    /// Bounds must be ordered (a single point is allowed), names unique,
    /// and activation rules must point at existing categorical options
    /// without forming a cycle.
    pub fn validate(&self) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(Error::param("search space has no dimensions"));
        }
        let mut by_name = HashMap::new();
        for (i, d) in self.dimensions.iter().enumerate() {
            if by_name.insert(d.name.as_str(), i).is_some() {
                return Err(Error::param(format!("duplicate dimension '{}'", d.name)));
            }
            match &d.kind {
                DimensionKind::Continuous { lo, hi } => {
                    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                        return Err(Error::param(format!("dimension '{}': invalid bounds [{lo}, {hi}]", d.name)));
                    }
                }
                DimensionKind::Integer { lo, hi } => {
                    if lo > hi {
                        return Err(Error::param(format!("dimension '{}': invalid bounds [{lo}, {hi}]", d.name)));
                    }
                }
                DimensionKind::Categorical { choices } => {
                    if choices.is_empty() {
                        return Err(Error::param(format!("dimension '{}' has no choices", d.name)));
                    }
                    let distinct: HashSet<_> = choices.iter().collect();
                    if distinct.len() != choices.len() {
                        return Err(Error::param(format!("dimension '{}' repeats a choice", d.name)));
                    }
                }
            }
        }
        for d in &self.dimensions {
            let Some(rule) = &d.active_when else { continue };
            let Some(&parent) = by_name.get(rule.dimension.as_str()) else {
                return Err(Error::param(format!(
                    "dimension '{}' depends on unknown dimension '{}'",
                    d.name, rule.dimension
                )));
            };
            let DimensionKind::Categorical { choices } = &self.dimensions[parent].kind else {
                return Err(Error::param(format!(
                    "dimension '{}' depends on non-categorical '{}'",
                    d.name, rule.dimension
                )));
            };
            if !choices.contains(&rule.choice) {
                return Err(Error::param(format!(
                    "dimension '{}' depends on missing choice '{}' of '{}'",
                    d.name, rule.choice, rule.dimension
                )));
            }
        }
        for start in 0..self.dimensions.len() {
            let mut seen = HashSet::from([start]);
            let mut cur = start;
            while let Some(rule) = &self.dimensions[cur].active_when {
                cur = by_name[rule.dimension.as_str()];
                if !seen.insert(cur) {
                    return Err(Error::param(format!(
                        "activation rules of '{}' form a cycle",
                        self.dimensions[start].name
                    )));
                }
            }
        }
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.dimensions.iter().position(|d| d.name == name)
    }

    /// Whether dimension `i` is active at `position`, following the chain
    /// of activation rules.
    pub fn is_active(&self, i: usize, position: &[f64]) -> bool {
        let mut cur = i;
        while let Some(rule) = &self.dimensions[cur].active_when {
            let Some(parent) = self.index_of(&rule.dimension) else {
                return false;
            };
            let DimensionKind::Categorical { choices } = &self.dimensions[parent].kind else {
                return false;
            };
            if choices.get(position[parent] as usize) != Some(&rule.choice) {
                return false;
            }
            cur = parent;
        }
        true
    }

    /// Active dimensions and their values, in declaration order.
    pub fn decode(&self, position: &[f64]) -> Vec<(String, ParamValue)> {
        self.dimensions
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_active(*i, position))
            .map(|(i, d)| {
                let v = match &d.kind {
                    DimensionKind::Continuous { .. } => ParamValue::Real(position[i]),
                    DimensionKind::Integer { .. } => ParamValue::Int(position[i].round() as i64),
                    DimensionKind::Categorical { choices } => {
                        ParamValue::Choice(choices[position[i] as usize].clone())
                    }
                };
                (d.name.clone(), v)
            })
            .collect()
    }

    pub fn contains(&self, position: &[f64]) -> bool {
        position.len() == self.len()
            && self.dimensions.iter().zip(position).all(|(d, &x)| {
                let (lo, hi) = d.bounds();
                x >= lo && x <= hi && (matches!(d.kind, DimensionKind::Continuous { .. }) || x.fract() == 0.0)
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsoConfig {
    pub num_particles: usize,
    pub num_generations: usize,
    pub phi1: f64,
    pub phi2: f64,
    /// Velocity cap as a fraction of each dimension's range; `None` leaves
    /// velocities unbounded.
    pub max_speed: Option<f64>,
    pub inertia: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            num_particles: 10,
            num_generations: 15,
            phi1: 1.5,
            phi2: 2.0,
            max_speed: None,
            inertia: DEFAULT_INERTIA,
            seed: 0,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_particles == 0 {
            return Err(Error::param("num_particles must be at least 1"));
        }
        if !(self.phi1 >= 0.0 && self.phi2 >= 0.0 && self.phi1.is_finite() && self.phi2.is_finite()) {
            return Err(Error::param(format!(
                "phi1 and phi2 must be finite and >= 0, got {} and {}",
                self.phi1, self.phi2
            )));
        }
        if !(self.inertia > 0.0 && self.inertia <= 1.0) {
            return Err(Error::param(format!("inertia must be in (0, 1], got {}", self.inertia)));
        }
        if let Some(s) = self.max_speed {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::param(format!("max_speed must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub position: Vec<f64>,
    /// Zero for categorical dimensions.
    pub velocity: Vec<f64>,
    /// Fitness at `position`; infinite before the first evaluation.
    pub fitness: f64,
    pub best_position: Vec<f64>,
    pub best_fitness: f64,
}

/// Particles plus the global best after the last completed generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Swarm {
    pub particles: Vec<ParticleState>,
    pub best_position: Vec<f64>,
    pub best_fitness: f64,
    /// Completed generations; 0 after initial evaluation.
    pub generation: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub generation: usize,
    pub best_fitness: f64,
    pub best_position: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoOutcome {
    pub best_position: Vec<f64>,
    pub best_fitness: f64,
    /// Best fitness of the initial sample.
    pub initial_best_fitness: f64,
    /// One entry per generation.
    pub history: Vec<HistoryEntry>,
    pub diagnostics: Vec<String>,
}

fn stream_rng(seed: u64, generation: usize, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((generation as u64) << 32) | particle as u64);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Unevaluated particles, uniform in the box.
pub fn sample_initial(space: &SearchSpace, config: &PsoConfig) -> Result<Vec<ParticleState>> {
    space.validate()?;
    config.validate()?;
    Ok((0..config.num_particles)
        .map(|p| {
            let mut rng = stream_rng(config.seed, 0, p);
            let mut position = Vec::with_capacity(space.len());
            let mut velocity = Vec::with_capacity(space.len());
            for d in &space.dimensions {
                let (lo, hi) = d.bounds();
                match d.kind {
                    DimensionKind::Categorical { ref choices } => {
                        position.push(rng.random_range(0..choices.len()) as f64);
                        velocity.push(0.0);
                    }
                    DimensionKind::Integer { lo, hi } => {
                        position.push(rng.random_range(lo..=hi) as f64);
                        let half = (hi - lo) as f64 / 2.0;
                        velocity.push(uniform(&mut rng, -half, half));
                    }
                    DimensionKind::Continuous { .. } => {
                        position.push(uniform(&mut rng, lo, hi));
                        let half = (hi - lo) / 2.0;
                        velocity.push(uniform(&mut rng, -half, half));
                    }
                }
            }
            ParticleState {
                best_position: position.clone(),
                position,
                velocity,
                fitness: f64::INFINITY,
                best_fitness: f64::INFINITY,
            }
        })
        .collect())
}

/// Evaluate every particle and fold the results into the personal and
/// global bests, in particle order.
fn absorb<F>(swarm: &mut Swarm, fitness: &F)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let values: Vec<f64> = swarm.particles.par_iter().map(|p| fitness(&p.position)).collect();
    for (i, (p, f)) in swarm.particles.iter_mut().zip(values).enumerate() {
        p.fitness = f;
        if !f.is_finite() {
            swarm
                .diagnostics
                .push(format!("generation {} particle {i}: non-finite fitness {f}", swarm.generation));
            continue;
        }
        if f < p.best_fitness {
            p.best_fitness = f;
            p.best_position = p.position.clone();
        }
        if f < swarm.best_fitness {
            swarm.best_fitness = f;
            swarm.best_position = p.position.clone();
        }
    }
}

/// Sample and evaluate the initial swarm.
pub fn initialize<F>(space: &SearchSpace, config: &PsoConfig, fitness: &F) -> Result<Swarm>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let particles = sample_initial(space, config)?;
    let mut swarm = Swarm {
        best_position: particles[0].position.clone(),
        best_fitness: f64::INFINITY,
        particles,
        generation: 0,
        diagnostics: Vec::new(),
    };
    absorb(&mut swarm, fitness);
    Ok(swarm)
}

/// One synchronous generation: move every particle against the bests of
/// the previous generation, then evaluate and update the bests.
pub fn step<F>(swarm: &mut Swarm, space: &SearchSpace, config: &PsoConfig, fitness: &F)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    swarm.generation += 1;
    let g = swarm.generation;
    let gbest = swarm.best_position.clone();
    for (pi, p) in swarm.particles.iter_mut().enumerate() {
        let mut rng = stream_rng(config.seed, g, pi);
        for (k, d) in space.dimensions.iter().enumerate() {
            if d.is_categorical() {
                let u: f64 = rng.random();
                let total = config.inertia + config.phi1 + config.phi2;
                let t = u * total;
                if t >= config.inertia + config.phi1 {
                    p.position[k] = gbest[k];
                } else if t >= config.inertia {
                    p.position[k] = p.best_position[k];
                }
                continue;
            }
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let x = p.position[k];
            let mut v = config.inertia * p.velocity[k]
                + config.phi1 * r1 * (p.best_position[k] - x)
                + config.phi2 * r2 * (gbest[k] - x);
            let (lo, hi) = d.bounds();
            if let Some(frac) = config.max_speed {
                let cap = frac * (hi - lo);
                v = v.clamp(-cap, cap);
            }
            let mut nx = x + v;
            if nx <= lo {
                nx = lo;
                v = 0.0;
            } else if nx >= hi {
                nx = hi;
                v = 0.0;
            }
            if matches!(d.kind, DimensionKind::Integer { .. }) {
                nx = nx.round().clamp(lo, hi);
            }
            p.position[k] = nx;
            p.velocity[k] = v;
        }
    }
    absorb(swarm, fitness);
}

/// Run `num_generations` steps from a fresh sample.
pub fn optimize<F>(space: &SearchSpace, config: &PsoConfig, fitness: F) -> Result<PsoOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut swarm = initialize(space, config, &fitness)?;
    let initial_best_fitness = swarm.best_fitness;
    let mut history = Vec::with_capacity(config.num_generations);
    for _ in 0..config.num_generations {
        step(&mut swarm, space, config, &fitness);
        history.push(HistoryEntry {
            generation: swarm.generation,
            best_fitness: swarm.best_fitness,
            best_position: swarm.best_position.clone(),
        });
    }
    Ok(PsoOutcome {
        best_position: swarm.best_position,
        best_fitness: swarm.best_fitness,
        initial_best_fitness,
        history,
        diagnostics: swarm.diagnostics,
    })
}

/// `generation,best_fitness` rows.
pub fn write_history_csv<W: Write>(history: &[HistoryEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["generation", "best_fitness"])?;
    for h in history {
        w.write_record([h.generation.to_string(), h.best_fitness.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Search space used when none is configured for `family`.
pub fn default_space(family: Family) -> SearchSpace {
    let dims = match family {
        Family::Svr => vec![
            Dimension::categorical("kernel", &["rbf", "linear", "poly"]),
            Dimension::continuous("gamma", 1e-6, 50.0).when("kernel", "rbf"),
            Dimension::continuous("c_rbf", 1.0, 100.0).when("kernel", "rbf"),
            Dimension::continuous("c_linear", 1.0, 100.0).when("kernel", "linear"),
            Dimension::integer("degree", 2, 5).when("kernel", "poly"),
            Dimension::continuous("c_poly", 1000.0, 20000.0).when("kernel", "poly"),
            Dimension::continuous("coef0", 0.0, 1.0).when("kernel", "poly"),
        ],
        Family::GaussianProcess => vec![
            Dimension::categorical("normalize_y", &["true", "false"]),
            Dimension::continuous("alpha", 1e-10, 1e-2),
            Dimension::continuous("gamma", 1e-6, 50.0),
        ],
        Family::ElasticNet => vec![
            Dimension::continuous("alpha", 0.0, 1.0),
            Dimension::continuous("l1_ratio", 0.0, 1.0),
            Dimension::continuous("tol", 1e-4, 0.01),
        ],
        Family::Ridge => vec![Dimension::continuous("alpha", 0.0, 10.0)],
    };
    SearchSpace { dimensions: dims }
}

fn real(values: &HashMap<String, ParamValue>, name: &str) -> Option<f64> {
    match values.get(name)? {
        ParamValue::Real(v) => Some(*v),
        ParamValue::Int(v) => Some(*v as f64),
        ParamValue::Choice(s) => s.parse().ok(),
    }
}

fn choice<'a>(values: &'a HashMap<String, ParamValue>, name: &str) -> Option<&'a str> {
    match values.get(name)? {
        ParamValue::Choice(s) => Some(s),
        _ => None,
    }
}

fn need(v: Option<f64>, name: &str) -> Result<f64> {
    v.ok_or_else(|| Error::param(format!("search space lacks an active '{name}' dimension")))
}

/// Turn a position into a regressor spec.
///
/// Recognised names: SVR `kernel`, `gamma`, `c` or `c_<kernel>`, `degree`,
/// `coef0`, `epsilon`; GP `kernel` (default rbf), `gamma`, `degree`,
/// `coef0`, `alpha`, `normalize_y`; ElasticNet `alpha`, `l1_ratio`, `tol`;
/// ridge `alpha`. Inactive dimensions are ignored.
pub fn decode_spec(family: Family, space: &SearchSpace, position: &[f64]) -> Result<RegressorSpec> {
    let values: HashMap<String, ParamValue> = space.decode(position).into_iter().collect();
    let kernel = |default: &str| -> Result<Kernel> {
        let name = choice(&values, "kernel").unwrap_or(default);
        match name {
            "rbf" => Ok(Kernel::Rbf { gamma: need(real(&values, "gamma"), "gamma")? }),
            "linear" => Ok(Kernel::Linear),
            "poly" | "polynomial" => Ok(Kernel::Polynomial {
                degree: need(real(&values, "degree"), "degree")?.round() as u32,
                coef0: real(&values, "coef0").unwrap_or(0.0),
            }),
            other => Err(Error::param(format!("unknown kernel '{other}'"))),
        }
    };
    let spec = match family {
        Family::Svr => {
            let k = kernel("rbf")?;
            let kname = choice(&values, "kernel").unwrap_or("rbf");
            let c = need(real(&values, &format!("c_{kname}")).or_else(|| real(&values, "c")), "c")?;
            RegressorSpec::Svr {
                kernel: k,
                c,
                epsilon: real(&values, "epsilon").unwrap_or(DEFAULT_SVR_EPSILON),
                tol: DEFAULT_SVR_TOL,
            }
        }
        Family::GaussianProcess => RegressorSpec::GaussianProcess {
            kernel: kernel("rbf")?,
            alpha: need(real(&values, "alpha"), "alpha")?,
            normalize_y: choice(&values, "normalize_y").is_some_and(|s| s == "true"),
        },
        Family::ElasticNet => RegressorSpec::ElasticNet {
            alpha: need(real(&values, "alpha"), "alpha")?,
            l1_ratio: need(real(&values, "l1_ratio"), "l1_ratio")?,
            tol: real(&values, "tol").unwrap_or(1e-4),
        },
        Family::Ridge => RegressorSpec::Ridge {
            alpha: need(real(&values, "alpha"), "alpha")?,
        },
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub spec: RegressorSpec,
    pub validation_mse: f64,
    pub search: PsoOutcome,
}

/// Minimise validation MSE of `family` over `space`.
///
/// Each fitness evaluation fits on `train` (subsampled to `max_train`
/// tuples when set) and scores every tuple of `validation`. Fits that fail
/// count as non-finite fitness.
pub fn tune_regressor(
    train: &SigmaDataset,
    validation: &SigmaDataset,
    family: Family,
    space: &SearchSpace,
    config: &PsoConfig,
    max_train: Option<usize>,
) -> Result<TuneOutcome> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::data("tuning needs non-empty training and validation splits"));
    }
    space.validate()?;
    let fitness = |pos: &[f64]| -> f64 {
        decode_spec(family, space, pos)
            .and_then(|spec| fit_sigma_model(train, &spec, max_train, config.seed))
            .and_then(|m| dataset_mse(&m, validation))
            .unwrap_or(f64::NAN)
    };
    let search = optimize(space, config, fitness)?;
    if !search.best_fitness.is_finite() {
        return Err(Error::numerical(format!(
            "every {family} fit failed during tuning ({} diagnostics)",
            search.diagnostics.len()
        )));
    }
    Ok(TuneOutcome {
        spec: decode_spec(family, space, &search.best_position)?,
        validation_mse: search.best_fitness,
        search,
    })
}
