//! Reading and writing trajectories, datasets, models and plot tables, plus
//! a synthetic trajectory generator with known thresholds.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{BcmParams, EgoNetwork, ValueDimension, ValueProfile, DEFAULT_MU, MAX_ALTERS};
use crate::dynamics::{simulate_users, GroupScheme, InteractionMode, StepTrace};
use crate::error::{Error, Result};
use crate::labeling::{Provenance, SigmaDataset, SigmaTuple};
use crate::pso::{HistoryEntry, ParamValue, SearchSpace};
use crate::regress::{FittedModel, MODEL_FORMAT_VERSION};

/// Version written into every file this module produces.
pub const FORMAT_VERSION: u32 = 1;

const TRAJECTORY_TAG: &str = "# valueshift trajectories v1";
const DATASET_TAG: &str = "# valueshift dataset v1";

pub const TRAJECTORY_HEADER: [&str; 5] = ["ego_id", "user_id", "segment", "dimension", "score"];
pub const DATASET_HEADER: [&str; 9] = [
    "ego_id", "alter_id", "dimension", "segment", "v_i_t", "v_j_t", "v_i_next", "mu", "sigma_label",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Csv,
    Json,
}

impl TrajectoryFormat {
    /// Guess from the file extension; anything but `.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => TrajectoryFormat::Json,
            _ => TrajectoryFormat::Csv,
        }
    }
}

/// One observed score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub ego_id: String,
    pub user_id: String,
    pub segment: u32,
    pub dimension: ValueDimension,
    pub score: f64,
}

/// A network whose users may miss whole segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseNetwork {
    pub ego_id: String,
    pub alter_ids: Vec<String>,
    pub first_segment: u32,
    /// `profiles[user][segment - first_segment]`, ego first.
    pub profiles: Vec<Vec<Option<ValueProfile>>>,
}

impl SparseNetwork {
    pub fn has_gaps(&self) -> bool {
        self.profiles.iter().flatten().any(Option::is_none)
    }

    fn user_name(&self, u: usize) -> &str {
        if u == 0 {
            &self.ego_id
        } else {
            &self.alter_ids[u - 1]
        }
    }

    /// The dense network; fails on the first missing segment.
    pub fn into_dense(self) -> Result<EgoNetwork> {
        let mut dense = Vec::with_capacity(self.profiles.len());
        for (u, traj) in self.profiles.iter().enumerate() {
            let mut t = Vec::with_capacity(traj.len());
            for (s, p) in traj.iter().enumerate() {
                match p {
                    Some(p) => t.push(*p),
                    None => {
                        return Err(Error::data(format!(
                            "ego {}: user {} has no scores for segment {} (gap; enable interpolation to fill it)",
                            self.ego_id,
                            self.user_name(u),
                            self.first_segment as usize + s
                        )))
                    }
                }
            }
            dense.push(t);
        }
        EgoNetwork::new(self.ego_id, self.alter_ids, self.first_segment, dense)
    }
}

/// Fill interior gaps by linear interpolation per dimension.
///
/// A gap that touches either end of the segment range cannot be filled.
pub fn interpolate_gaps(net: &SparseNetwork) -> Result<EgoNetwork> {
    let mut filled = net.clone();
    for (u, traj) in filled.profiles.iter_mut().enumerate() {
        let len = traj.len();
        let mut s = 0;
        while s < len {
            if traj[s].is_some() {
                s += 1;
                continue;
            }
            let start = s;
            while s < len && traj[s].is_none() {
                s += 1;
            }
            if start == 0 || s == len {
                return Err(Error::data(format!(
                    "ego {}: user {} has a gap at the trajectory boundary (segments {}..={})",
                    net.ego_id,
                    net.user_name(u),
                    net.first_segment as usize + start,
                    net.first_segment as usize + s - 1
                )));
            }
            let (a, b) = (traj[start - 1].unwrap(), traj[s].unwrap());
            let span = (s - start + 1) as f64;
            for (k, slot) in traj[start..s].iter_mut().enumerate() {
                let w = (k + 1) as f64 / span;
                let mut p = a;
                for d in 0..ValueDimension::COUNT {
                    p.scores[d] = a.scores[d] + w * (b.scores[d] - a.scores[d]);
                }
                *slot = Some(p);
            }
        }
    }
    filled.into_dense()
}

/// Assemble networks from records, in order of first appearance.
///
/// `line_of(i)` names the source location of record `i` in messages.
fn assemble(records: &[TrajectoryRecord], line_of: &dyn Fn(usize) -> String) -> Result<Vec<SparseNetwork>> {
    struct Building {
        ego_id: String,
        users: Vec<String>,
        scores: HashMap<(usize, u32), [Option<f64>; ValueDimension::COUNT]>,
    }
    let mut egos: Vec<Building> = Vec::new();
    let mut ego_index: HashMap<String, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
            return Err(Error::data(format!("{}: field 'score' = {} is out of [0,1]", line_of(i), r.score)));
        }
        if r.ego_id.is_empty() || r.user_id.is_empty() {
            return Err(Error::data(format!("{}: empty ego_id or user_id", line_of(i))));
        }
        let e = *ego_index.entry(r.ego_id.clone()).or_insert_with(|| {
            egos.push(Building {
                ego_id: r.ego_id.clone(),
                users: vec![r.ego_id.clone()],
                scores: HashMap::new(),
            });
            egos.len() - 1
        });
        let b = &mut egos[e];
        let u = match b.users.iter().position(|x| *x == r.user_id) {
            Some(u) => u,
            None => {
                b.users.push(r.user_id.clone());
                b.users.len() - 1
            }
        };
        let slot = &mut b.scores.entry((u, r.segment)).or_insert([None; ValueDimension::COUNT])[r.dimension.index()];
        if slot.is_some() {
            return Err(Error::data(format!(
                "{}: duplicate record for ego {} user {} segment {} dimension {}",
                line_of(i),
                r.ego_id,
                r.user_id,
                r.segment,
                r.dimension
            )));
        }
        *slot = Some(r.score);
    }

    let mut out = Vec::with_capacity(egos.len());
    for b in egos {
        if b.users.len() < 2 || b.users.len() > MAX_ALTERS + 1 {
            return Err(Error::data(format!(
                "ego {}: expected 1..={MAX_ALTERS} alters, got {}",
                b.ego_id,
                b.users.len() - 1
            )));
        }
        if !b.scores.keys().any(|(u, _)| *u == 0) {
            return Err(Error::data(format!("ego {}: no records for the ego itself", b.ego_id)));
        }
        let first = b.scores.keys().map(|k| k.1).min().unwrap();
        let last = b.scores.keys().map(|k| k.1).max().unwrap();
        let mut profiles = vec![vec![None; (last - first + 1) as usize]; b.users.len()];
        for (&(u, seg), dims) in &b.scores {
            let mut scores = [0.0; ValueDimension::COUNT];
            for (d, v) in dims.iter().enumerate() {
                match v {
                    Some(v) => scores[d] = *v,
                    None => {
                        return Err(Error::data(format!(
                            "ego {}: user {} segment {seg} lacks dimension {}",
                            b.ego_id,
                            b.users[u],
                            ValueDimension::ALL[d]
                        )))
                    }
                }
            }
            profiles[u][(seg - first) as usize] = Some(ValueProfile { scores });
        }
        out.push(SparseNetwork {
            ego_id: b.ego_id,
            alter_ids: b.users[1..].to_vec(),
            first_segment: first,
            profiles,
        });
    }
    Ok(out)
}

fn densify(nets: Vec<SparseNetwork>, interpolate: bool) -> Result<Vec<EgoNetwork>> {
    nets.into_iter()
        .map(|n| if interpolate { interpolate_gaps(&n) } else { n.into_dense() })
        .collect()
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn check_header(found: &csv::StringRecord, expected: &[&str], what: &str) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(Error::data(format!(
            "{what} header must be '{}', found '{}'",
            expected.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn field<T: FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::data(format!("row at line {line}: field '{name}' has invalid value {raw:?}")))
}

/// Parse trajectory CSV text into sparse networks.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<SparseNetwork>> {
    let mut rdr = csv_reader(text);
    check_header(rdr.headers()?, &TRAJECTORY_HEADER, "trajectory")?;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != TRAJECTORY_HEADER.len() {
            return Err(Error::data(format!("row at line {line}: expected 5 fields, got {}", row.len())));
        }
        let dimension = ValueDimension::from_str(&row[3])
            .map_err(|_| Error::data(format!("row at line {line}: field 'dimension' has unknown value {:?}", &row[3])))?;
        records.push(TrajectoryRecord {
            ego_id: row[0].to_string(),
            user_id: row[1].to_string(),
            segment: field(&row, 2, "segment", line)?,
            dimension,
            score: field(&row, 4, "score", line)?,
        });
        lines.push(line);
    }
    assemble(&records, &|i| format!("row at line {}", lines[i]))
}

/// Trajectory CSV for dense networks, ego first then alters, by segment and dimension.
pub fn trajectory_csv(networks: &[EgoNetwork]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAJECTORY_HEADER)?;
    for net in networks {
        for (u, user) in net.user_ids().enumerate() {
            for (s, p) in net.trajectory(u).iter().enumerate() {
                let seg = (net.first_segment() as usize + s).to_string();
                for dim in ValueDimension::ALL {
                    w.write_record([net.ego_id(), user, &seg, dim.as_str(), &p.get(dim).to_string()])?;
                }
            }
        }
    }
    finish_csv(w, TRAJECTORY_TAG)
}

fn finish_csv(w: csv::Writer<Vec<u8>>, tag: &str) -> Result<String> {
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let body = String::from_utf8(body).map_err(|e| Error::data(e.to_string()))?;
    Ok(format!("{tag}\n{body}"))
}

/// JSON form of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkJson {
    pub ego_id: String,
    pub alters: Vec<String>,
    #[serde(default)]
    pub first_segment: u32,
    pub segments: u32,
    /// user -> segment -> dimension -> score.
    pub profiles: BTreeMap<String, BTreeMap<u32, BTreeMap<String, f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworksDocument {
    pub format_version: u32,
    pub networks: Vec<NetworkJson>,
}

impl NetworkJson {
    pub fn from_network(net: &EgoNetwork) -> Self {
        let mut profiles = BTreeMap::new();
        for (u, user) in net.user_ids().enumerate() {
            let segs = net
                .trajectory(u)
                .iter()
                .enumerate()
                .map(|(s, p)| {
                    let dims = ValueDimension::ALL
                        .iter()
                        .map(|d| (d.as_str().to_string(), p.get(*d)))
                        .collect();
                    (net.first_segment() + s as u32, dims)
                })
                .collect();
            profiles.insert(user.to_string(), segs);
        }
        NetworkJson {
            ego_id: net.ego_id().to_string(),
            alters: net.alter_ids().to_vec(),
            first_segment: net.first_segment(),
            segments: net.num_segments() as u32,
            profiles,
        }
    }

    fn to_sparse(&self) -> Result<SparseNetwork> {
        let ctx = |msg: String| Error::data(format!("network {}: {msg}", self.ego_id));
        let mut users = vec![self.ego_id.clone()];
        users.extend(self.alters.iter().cloned());
        for name in self.profiles.keys() {
            if !users.contains(name) {
                return Err(ctx(format!("profiles for unlisted user {name:?}")));
            }
        }
        let mut records = Vec::new();
        for user in &users {
            let Some(segs) = self.profiles.get(user) else { continue };
            for (&seg, dims) in segs {
                if seg < self.first_segment || seg >= self.first_segment + self.segments {
                    return Err(ctx(format!("user {user} segment {seg} outside the declared range")));
                }
                for (dim, &score) in dims {
                    records.push(TrajectoryRecord {
                        ego_id: self.ego_id.clone(),
                        user_id: user.clone(),
                        segment: seg,
                        dimension: dim.parse().map_err(|e: Error| ctx(e.to_string()))?,
                        score,
                    });
                }
            }
        }
        let names: Vec<String> = records
            .iter()
            .map(|r| format!("network {} user {} segment {} {}", r.ego_id, r.user_id, r.segment, r.dimension))
            .collect();
        let mut nets = assemble(&records, &|i| names[i].clone())?;
        let mut net = nets.pop().ok_or_else(|| ctx("no profiles".into()))?;
        // honour declared alter order and segment range
        let mut profiles = vec![vec![None; self.segments as usize]; users.len()];
        for (u, traj) in net.profiles.iter().enumerate() {
            let name = if u == 0 { &net.ego_id } else { &net.alter_ids[u - 1] };
            let target = users.iter().position(|x| x == name).unwrap();
            for (s, p) in traj.iter().enumerate() {
                profiles[target][(net.first_segment - self.first_segment) as usize + s] = *p;
            }
        }
        net.alter_ids = self.alters.clone();
        net.first_segment = self.first_segment;
        net.profiles = profiles;
        Ok(net)
    }
}

pub fn parse_networks_json(text: &str) -> Result<Vec<SparseNetwork>> {
    let doc: NetworksDocument = serde_json::from_str(text)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::data(format!("unsupported network format version {}", doc.format_version)));
    }
    doc.networks.iter().map(NetworkJson::to_sparse).collect()
}

pub fn networks_json(networks: &[EgoNetwork]) -> Result<String> {
    let doc = NetworksDocument {
        format_version: FORMAT_VERSION,
        networks: networks.iter().map(NetworkJson::from_network).collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Load and validate networks; gaps are an error unless `interpolate` is set.
pub fn load_trajectories(path: &Path, format: TrajectoryFormat, interpolate: bool) -> Result<Vec<EgoNetwork>> {
    let text = fs::read_to_string(path)?;
    let sparse = match format {
        TrajectoryFormat::Csv => parse_trajectory_csv(&text)?,
        TrajectoryFormat::Json => parse_networks_json(&text)?,
    };
    densify(sparse, interpolate)
}

pub fn save_trajectories(path: &Path, format: TrajectoryFormat, networks: &[EgoNetwork]) -> Result<()> {
    let text = match format {
        TrajectoryFormat::Csv => trajectory_csv(networks)?,
        TrajectoryFormat::Json => networks_json(networks)?,
    };
    fs::write(path, text)?;
    Ok(())
}

/// How each synthetic network draws its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaDistribution {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl SigmaDistribution {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            SigmaDistribution::Fixed { value } => (value, value),
            SigmaDistribution::Uniform { lo, hi } => (lo, hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_networks: usize,
    pub alters_per_network: usize,
    pub num_segments: usize,
    pub true_mu: f64,
    pub sigma: SigmaDistribution,
    pub noise_sd: f64,
    pub mode: InteractionMode,
    pub scheme: GroupScheme,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_networks: 275,
            alters_per_network: MAX_ALTERS,
            num_segments: 20,
            true_mu: DEFAULT_MU,
            sigma: SigmaDistribution::Uniform { lo: 0.1, hi: 0.9 },
            noise_sd: 0.0,
            mode: InteractionMode::EgoOnly,
            scheme: GroupScheme::Sequential,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_networks == 0 {
            return Err(Error::param("num_networks must be at least 1"));
        }
        if !(1..=MAX_ALTERS).contains(&self.alters_per_network) {
            return Err(Error::param(format!(
                "alters_per_network must be in 1..={MAX_ALTERS}, got {}",
                self.alters_per_network
            )));
        }
        if self.num_segments == 0 {
            return Err(Error::param("num_segments must be at least 1"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::param(format!("noise sd must be >= 0, got {}", self.noise_sd)));
        }
        let (lo, hi) = self.sigma.bounds();
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::param(format!("sigma range [{lo}, {hi}] must lie within [0, 1]")));
        }
        BcmParams::new(self.true_mu, lo)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub ego_id: String,
    pub true_mu: f64,
    pub true_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub networks: Vec<EgoNetwork>,
    pub truth: Vec<GroundTruth>,
    /// Noise-free trajectories behind `networks`.
    pub latent: Vec<EgoNetwork>,
}

/// Simulate networks with known thresholds.
///
/// Initial profiles are uniform on `[0, 1]`; each later segment is one step
/// of the dynamics. Observation noise is added to a copy of the latent
/// trajectories and clamped to `[0, 1]`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let width = spec.num_networks.saturating_sub(1).to_string().len().max(3);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::param(e.to_string()))?;
    let mut corpus = SyntheticCorpus {
        networks: Vec::with_capacity(spec.num_networks),
        truth: Vec::with_capacity(spec.num_networks),
        latent: Vec::with_capacity(spec.num_networks),
    };
    for n in 0..spec.num_networks {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(n as u64);
        let sigma = match spec.sigma {
            SigmaDistribution::Fixed { value } => value,
            SigmaDistribution::Uniform { lo, hi } if lo < hi => rng.random_range(lo..=hi),
            SigmaDistribution::Uniform { lo, .. } => lo,
        };
        let params = BcmParams::new(spec.true_mu, sigma)?;
        let users: Vec<ValueProfile> = (0..=spec.alters_per_network)
            .map(|_| ValueProfile {
                scores: std::array::from_fn(|_| rng.random::<f64>()),
            })
            .collect();
        let traces = simulate_users(users, &params, spec.mode, spec.scheme, spec.num_segments - 1);
        let ego_id = format!("ego{n:0width$}");
        let alter_ids: Vec<String> = (1..=spec.alters_per_network).map(|k| format!("{ego_id}-a{k}")).collect();
        let latent = transpose(&traces);
        let observed: Vec<Vec<ValueProfile>> = latent
            .iter()
            .map(|traj| {
                traj.iter()
                    .map(|p| {
                        let mut q = *p;
                        if spec.noise_sd > 0.0 {
                            for s in q.scores.iter_mut() {
                                *s = (*s + noise.sample(&mut rng)).clamp(0.0, 1.0);
                            }
                        }
                        q
                    })
                    .collect()
            })
            .collect();
        corpus.latent.push(EgoNetwork::new(ego_id.clone(), alter_ids.clone(), 0, latent)?);
        corpus.networks.push(EgoNetwork::new(ego_id.clone(), alter_ids, 0, observed)?);
        corpus.truth.push(GroundTruth {
            ego_id,
            true_mu: spec.true_mu,
            true_sigma: sigma,
        });
    }
    Ok(corpus)
}

/// `traces[step].snapshot[user]` to `[user][step]`.
fn transpose(traces: &[StepTrace]) -> Vec<Vec<ValueProfile>> {
    let users = traces[0].snapshot.len();
    (0..users).map(|u| traces.iter().map(|t| t.snapshot[u]).collect()).collect()
}

pub fn ground_truth_csv(truth: &[GroundTruth]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in truth {
        w.serialize(t)?;
    }
    if truth.is_empty() {
        w.write_record(["ego_id", "true_mu", "true_sigma"])?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(body).map_err(|e| Error::data(e.to_string()))
}

pub fn parse_ground_truth_csv(text: &str) -> Result<Vec<GroundTruth>> {
    let mut rdr = csv_reader(text);
    check_header(rdr.headers()?, &["ego_id", "true_mu", "true_sigma"], "ground-truth")?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<GroundTruth>, _>>()?)
}

/// Dataset CSV; provenance rides along as a JSON comment line.
pub fn dataset_csv(d: &SigmaDataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DATASET_HEADER)?;
    for t in &d.tuples {
        w.write_record([
            t.ego_id.clone(),
            t.alter_id.clone(),
            t.dimension.as_str().to_string(),
            t.segment.to_string(),
            t.v_i_t.to_string(),
            t.v_j_t.to_string(),
            t.v_i_next.to_string(),
            t.mu.to_string(),
            t.sigma_label.to_string(),
        ])?;
    }
    let tag = format!("{DATASET_TAG}\n# provenance {}", serde_json::to_string(&d.provenance)?);
    finish_csv(w, &tag)
}

pub fn parse_dataset_csv(text: &str) -> Result<SigmaDataset> {
    let mut provenance = Provenance::default();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(json) = line.strip_prefix("# provenance ") {
            provenance = serde_json::from_str(json)?;
        }
    }
    let mut rdr = csv_reader(text);
    check_header(rdr.headers()?, &DATASET_HEADER, "dataset")?;
    let mut tuples = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != DATASET_HEADER.len() {
            return Err(Error::data(format!("row at line {line}: expected 9 fields, got {}", row.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = field(&row, i, DATASET_HEADER[i], line)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::data(format!("row at line {line}: field '{}' is not finite", DATASET_HEADER[i])))
            }
        };
        tuples.push(SigmaTuple {
            ego_id: row[0].to_string(),
            alter_id: row[1].to_string(),
            dimension: ValueDimension::from_str(&row[2])
                .map_err(|_| Error::data(format!("row at line {line}: field 'dimension' has unknown value {:?}", &row[2])))?,
            segment: field(&row, 3, "segment", line)?,
            v_i_t: num(4)?,
            v_j_t: num(5)?,
            v_i_next: num(6)?,
            mu: num(7)?,
            sigma_label: num(8)?,
        });
    }
    Ok(SigmaDataset { tuples, provenance })
}

pub fn model_json(model: &FittedModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(model)? + "\n")
}

pub fn parse_model_json(text: &str) -> Result<FittedModel> {
    let m: FittedModel = serde_json::from_str(text)?;
    if m.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::data(format!("unsupported model format version {}", m.format_version)));
    }
    Ok(m)
}

/// Per-step snapshots: `ego_id,step,user_id,dimension,score`.
pub fn trace_csv(net: &EgoNetwork, traces: &[StepTrace]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["ego_id", "step", "user_id", "dimension", "score"])?;
    let users: Vec<&str> = net.user_ids().collect();
    for t in traces {
        for (u, p) in t.snapshot.iter().enumerate() {
            for dim in ValueDimension::ALL {
                w.write_record([net.ego_id(), &t.step.to_string(), users[u], dim.as_str(), &p.get(dim).to_string()])?;
            }
        }
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(body).map_err(|e| Error::data(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    HyperparamVariation,
    ModelLoss,
    ActualVsPredicted,
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyperparam-variation" => Ok(PlotKind::HyperparamVariation),
            "model-loss" => Ok(PlotKind::ModelLoss),
            "actual-vs-predicted" => Ok(PlotKind::ActualVsPredicted),
            _ => Err(Error::param(format!("unknown plot kind {s:?}"))),
        }
    }
}

/// Inputs for [`emit_plot_data`].
#[derive(Debug, Clone)]
pub enum PlotInput<'a> {
    /// Best position per generation; columns `generation,best_fitness`
    /// then one column per dimension, blank where inactive.
    HyperparamVariation {
        space: &'a SearchSpace,
        history: &'a [HistoryEntry],
    },
    /// Columns `family,mse`.
    ModelLoss { losses: &'a [(String, f64)] },
    /// Columns `index,actual,predicted`.
    ActualVsPredicted { actual: &'a [f64], predicted: &'a [f64] },
}

impl PlotInput<'_> {
    pub fn kind(&self) -> PlotKind {
        match self {
            PlotInput::HyperparamVariation { .. } => PlotKind::HyperparamVariation,
            PlotInput::ModelLoss { .. } => PlotKind::ModelLoss,
            PlotInput::ActualVsPredicted { .. } => PlotKind::ActualVsPredicted,
        }
    }
}

pub fn emit_plot_data(input: &PlotInput<'_>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    match input {
        PlotInput::HyperparamVariation { space, history } => {
            if history.is_empty() {
                return Err(Error::data("no optimisation history to plot"));
            }
            let mut header = vec!["generation".to_string(), "best_fitness".to_string()];
            header.extend(space.dimensions.iter().map(|d| d.name.clone()));
            w.write_record(&header)?;
            for h in history.iter() {
                let active: HashMap<String, ParamValue> = space.decode(&h.best_position).into_iter().collect();
                let mut row = vec![h.generation.to_string(), h.best_fitness.to_string()];
                row.extend(
                    space
                        .dimensions
                        .iter()
                        .map(|d| active.get(&d.name).map(ToString::to_string).unwrap_or_default()),
                );
                w.write_record(&row)?;
            }
        }
        PlotInput::ModelLoss { losses } => {
            if losses.is_empty() {
                return Err(Error::data("no model losses to plot"));
            }
            w.write_record(["family", "mse"])?;
            for (f, m) in losses.iter() {
                w.write_record([f.clone(), m.to_string()])?;
            }
        }
        PlotInput::ActualVsPredicted { actual, predicted } => {
            if actual.is_empty() {
                return Err(Error::data("no predictions to plot"));
            }
            if actual.len() != predicted.len() {
                return Err(Error::data(format!(
                    "{} actual values but {} predictions",
                    actual.len(),
                    predicted.len()
                )));
            }
            w.write_record(["index", "actual", "predicted"])?;
            for (i, (a, p)) in actual.iter().zip(predicted.iter()).enumerate() {
                w.write_record([i.to_string(), a.to_string(), p.to_string()])?;
            }
        }
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(body).map_err(|e| Error::data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::build_dataset;
    use crate::pso::{default_space, optimize, PsoConfig};
    use crate::regress::Family;
    use proptest::prelude::*;

    const SMALL: &str = "\
# valueshift trajectories v1
ego_id,user_id,segment,dimension,score
e,e,0,openness_to_change,0.1
e,e,0,self_transcendence,0.2
e,e,0,self_enhancement,0.3
e,e,0,conservation,0.4
e,e,0,hedonism,0.5
";

    fn rows(ego: &str, user: &str, seg: u32, v: f64) -> String {
        ValueDimension::ALL
            .iter()
            .map(|d| format!("{ego},{user},{seg},{d},{v}\n"))
            .collect()
    }

    fn doc(body: &str) -> String {
        format!("ego_id,user_id,segment,dimension,score\n{body}")
    }

    #[test]
    fn happy_path_one_ego_two_alters_three_segments() {
        let mut body = String::new();
        for s in 0..3 {
            for (u, v) in [("e", 0.2), ("a", 0.5), ("b", 0.9)] {
                body += &rows("e", u, s, v + s as f64 * 0.01);
            }
        }
        let nets = densify(parse_trajectory_csv(&doc(&body)).unwrap(), false).unwrap();
        assert_eq!(nets.len(), 1);
        assert_eq!(nets[0].alter_ids(), ["a", "b"]);
        assert_eq!(nets[0].num_segments(), 3);
        assert_eq!(nets[0].profile(2, 1).unwrap().get(ValueDimension::Hedonism), 0.91);
    }

    #[test]
    fn out_of_range_score_names_the_row() {
        let body = rows("e", "e", 0, 0.2) + &rows("e", "a", 0, 0.3).replace("hedonism,0.3", "hedonism,1.5");
        let err = parse_trajectory_csv(&doc(&body)).unwrap_err().to_string();
        assert!(err.contains("line 11") && err.contains("score"), "{err}");
    }

    #[test]
    fn duplicate_row_is_rejected() {
        let body = rows("e", "e", 0, 0.2) + &rows("e", "a", 0, 0.3) + "e,a,0,hedonism,0.3\n";
        let err = parse_trajectory_csv(&doc(&body)).unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains("line 12"), "{err}");
    }

    #[test]
    fn structural_errors() {
        // missing dimension
        assert!(parse_trajectory_csv(SMALL.trim_end().rsplit_once('\n').unwrap().0).is_err());
        // ego without alters
        assert!(parse_trajectory_csv(SMALL).is_err());
        // bad header
        assert!(parse_trajectory_csv("ego,user,seg,dim,score\n").is_err());
        // unknown dimension
        let body = rows("e", "e", 0, 0.2).replace("hedonism", "joy");
        assert!(parse_trajectory_csv(&doc(&body)).unwrap_err().to_string().contains("dimension"));
        // six alters
        let mut body = rows("e", "e", 0, 0.1);
        for k in 0..6 {
            body += &rows("e", &format!("a{k}"), 0, 0.1);
        }
        assert!(parse_trajectory_csv(&doc(&body)).is_err());
    }

    #[test]
    fn gaps_need_interpolation() {
        let mut body = String::new();
        for s in [0, 2] {
            body += &rows("e", "e", s, 0.2 + 0.1 * s as f64);
            body += &rows("e", "a", s, 0.5);
        }
        body += &rows("e", "a", 1, 0.5);
        let sparse = parse_trajectory_csv(&doc(&body)).unwrap();
        assert!(sparse[0].has_gaps());
        let err = densify(sparse.clone(), false).unwrap_err().to_string();
        assert!(err.contains("gap"), "{err}");
        let net = interpolate_gaps(&sparse[0]).unwrap();
        assert!((net.profile(0, 1).unwrap().get(ValueDimension::Conservation) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn two_segment_gap_is_filled_linearly() {
        let p = |v| Some(ValueProfile::uniform(v).unwrap());
        let net = SparseNetwork {
            ego_id: "e".into(),
            alter_ids: vec!["a".into()],
            first_segment: 4,
            profiles: vec![vec![p(0.0), None, None, p(0.3)], vec![p(0.5); 4]],
        };
        let dense = interpolate_gaps(&net).unwrap();
        assert!((dense.trajectory(0)[1].scores[0] - 0.1).abs() < 1e-15);
        assert!((dense.trajectory(0)[2].scores[0] - 0.2).abs() < 1e-15);
        assert_eq!(dense.first_segment(), 4);
    }

    #[test]
    fn boundary_gap_is_an_error() {
        let p = |v| Some(ValueProfile::uniform(v).unwrap());
        let net = SparseNetwork {
            ego_id: "e".into(),
            alter_ids: vec!["a".into()],
            first_segment: 0,
            profiles: vec![vec![p(0.1), p(0.2), p(0.3)], vec![None, p(0.5), p(0.5)]],
        };
        assert!(interpolate_gaps(&net).unwrap_err().to_string().contains("boundary"));
        let no_gap = SparseNetwork {
            profiles: vec![vec![p(0.1), p(0.2)], vec![p(0.4), p(0.5)]],
            ..net
        };
        assert_eq!(interpolate_gaps(&no_gap).unwrap(), no_gap.clone().into_dense().unwrap());
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let spec = SynthSpec {
            num_networks: 4,
            num_segments: 5,
            noise_sd: 0.05,
            seed: 3,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(trajectory_csv(&a.networks).unwrap(), trajectory_csv(&b.networks).unwrap());
        assert_eq!(ground_truth_csv(&a.truth).unwrap(), ground_truth_csv(&b.truth).unwrap());
        assert!(a.truth.iter().all(|t| (0.1..=0.9).contains(&t.true_sigma)));
        assert_ne!(a.networks, a.latent);
        let single = generate_synthetic(&SynthSpec { num_segments: 1, ..spec }).unwrap();
        assert!(single.networks.iter().all(|n| n.num_segments() == 1));
    }

    #[test]
    fn noiseless_single_alter_labels_invert_exactly() {
        let spec = SynthSpec {
            num_networks: 30,
            alters_per_network: 1,
            num_segments: 6,
            seed: 9,
            ..Default::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let d = build_dataset(&corpus.networks, spec.true_mu, 0.01).unwrap();
        let mut interacting = 0;
        for t in &d.tuples {
            let delta = (t.v_j_t - t.v_i_t).abs();
            if t.v_i_next != t.v_i_t {
                interacting += 1;
                assert_eq!(t.sigma_label, (delta + 0.01).min(1.0));
                let p = BcmParams::new(t.mu, t.sigma_label).unwrap();
                assert_eq!(crate::dynamics::bcm_pair_update(t.v_i_t, t.v_j_t, &p).unwrap(), t.v_i_next);
            }
        }
        assert!(interacting > 0);
    }

    #[test]
    fn ground_truth_round_trip() {
        let truth = vec![
            GroundTruth { ego_id: "x".into(), true_mu: 0.4, true_sigma: 0.123456789012345 },
            GroundTruth { ego_id: "y".into(), true_mu: 0.3, true_sigma: 0.9 },
        ];
        let text = ground_truth_csv(&truth).unwrap();
        assert!(text.starts_with("ego_id,true_mu,true_sigma\n"));
        assert_eq!(parse_ground_truth_csv(&text).unwrap(), truth);
    }

    #[test]
    fn plot_tables() {
        let losses: Vec<(String, f64)> = ["svr", "gp", "elasticnet", "ridge", "extra"]
            .iter()
            .map(|f| (f.to_string(), 0.1))
            .collect();
        let t = emit_plot_data(&PlotInput::ModelLoss { losses: &losses }).unwrap();
        assert_eq!(t.lines().count(), 6);

        let v = [0.1, 0.2, 0.3];
        let t = emit_plot_data(&PlotInput::ActualVsPredicted { actual: &v, predicted: &v }).unwrap();
        for line in t.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[1], cols[2]);
        }
        assert!(emit_plot_data(&PlotInput::ActualVsPredicted { actual: &[], predicted: &[] }).is_err());
        assert!(emit_plot_data(&PlotInput::ModelLoss { losses: &[] }).is_err());

        let space = default_space(Family::Svr);
        let out = optimize(&space, &PsoConfig::default(), |x: &[f64]| x[0] + x[2] / 100.0).unwrap();
        let t = emit_plot_data(&PlotInput::HyperparamVariation { space: &space, history: &out.history }).unwrap();
        assert_eq!(t.lines().count(), 16);
        assert!(t.starts_with("generation,best_fitness,kernel,gamma,c_rbf"));
        assert_eq!(PlotKind::from_str("model-loss").unwrap(), PlotKind::ModelLoss);
    }

    fn arb_networks() -> impl Strategy<Value = Vec<EgoNetwork>> {
        let score = (0u32..=1000).prop_map(|k| k as f64 / 1000.0 + 1e-7 * (k % 3) as f64).prop_map(|v| v.min(1.0));
        let net = (1usize..=5, 1usize..5, 0u32..4, proptest::collection::vec(score, 6 * 4 * 5)).prop_map(
            |(alters, segs, first, pool)| {
                let traj = (0..=alters)
                    .map(|u| {
                        (0..segs)
                            .map(|s| ValueProfile {
                                scores: std::array::from_fn(|d| pool[(u * 4 + s) * 5 + d]),
                            })
                            .collect()
                    })
                    .collect();
                (alters, first, traj)
            },
        );
        proptest::collection::vec(net, 1..4).prop_map(|nets| {
            nets.into_iter()
                .enumerate()
                .map(|(i, (alters, first, traj))| {
                    let ids = (0..alters).map(|k| format!("u{i}_{k}")).collect();
                    EgoNetwork::new(format!("ego{i}"), ids, first, traj).unwrap()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn trajectories_round_trip(nets in arb_networks()) {
            let csv_back = densify(parse_trajectory_csv(&trajectory_csv(&nets).unwrap()).unwrap(), false).unwrap();
            prop_assert_eq!(&csv_back, &nets);
            let json_back = densify(parse_networks_json(&networks_json(&nets).unwrap()).unwrap(), false).unwrap();
            prop_assert_eq!(&json_back, &nets);
        }

        #[test]
        fn dataset_round_trips(nets in arb_networks(), delta in 0.001f64..0.1) {
            let d = build_dataset(&nets, 0.4, delta).unwrap();
            let back = parse_dataset_csv(&dataset_csv(&d).unwrap()).unwrap();
            prop_assert_eq!(back, d);
        }
    }

    #[test]
    fn model_round_trip() {
        use crate::regress::{fit, Kernel, RegressorSpec, Samples};
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0, (i * 7 % 5) as f64 / 4.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| (3.0 * r[0]).sin() + 0.1 * r[1]).collect();
        let s = Samples::new(x.clone(), y).unwrap();
        for spec in [
            RegressorSpec::svr(Kernel::Rbf { gamma: 0.7 }, 10.0),
            RegressorSpec::GaussianProcess { kernel: Kernel::Rbf { gamma: 0.3 }, alpha: 1e-6, normalize_y: true },
            RegressorSpec::Ridge { alpha: 0.3 },
        ] {
            let m = fit(&s, &spec).unwrap().with_clamp(0.0, 1.0);
            let back = parse_model_json(&model_json(&m).unwrap()).unwrap();
            assert_eq!(back, m);
            for r in &x {
                assert_eq!(back.predict(r).unwrap(), m.predict(r).unwrap());
            }
        }
    }
}
