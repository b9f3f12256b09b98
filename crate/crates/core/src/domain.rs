//! Shared domain types: value dimensions and profiles, ego networks,
//! half-year segments and bounded-confidence parameters.
//!
//! All scores live on the closed unit interval. Constructors validate their
//! invariants, so a value of any of these types can be assumed well formed.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Months, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default convergence factor.
pub const DEFAULT_MU: f64 = 0.4;

/// Inner-circle size: the most alters an ego network may carry.
pub const MAX_ALTERS: usize = 5;

/// Months covered by one segment.
pub const SEGMENT_MONTHS: u32 = 6;

/// The five higher-level value dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDimension {
    OpennessToChange,
    SelfTranscendence,
    SelfEnhancement,
    Conservation,
    Hedonism,
}

impl ValueDimension {
    pub const COUNT: usize = 5;

    /// All dimensions in canonical order.
    pub const ALL: [ValueDimension; 5] = [
        ValueDimension::OpennessToChange,
        ValueDimension::SelfTranscendence,
        ValueDimension::SelfEnhancement,
        ValueDimension::Conservation,
        ValueDimension::Hedonism,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ValueDimension::OpennessToChange => "openness_to_change",
            ValueDimension::SelfTranscendence => "self_transcendence",
            ValueDimension::SelfEnhancement => "self_enhancement",
            ValueDimension::Conservation => "conservation",
            ValueDimension::Hedonism => "hedonism",
        }
    }
}

impl fmt::Display for ValueDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValueDimension {
    type Err = Error;

    /// Accepts snake_case, kebab-case, CamelCase and spaced spellings.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "opennesstochange" => Ok(ValueDimension::OpennessToChange),
            "selftranscendence" => Ok(ValueDimension::SelfTranscendence),
            "selfenhancement" => Ok(ValueDimension::SelfEnhancement),
            "conservation" => Ok(ValueDimension::Conservation),
            "hedonism" => Ok(ValueDimension::Hedonism),
            _ => Err(Error::data(format!("unknown value dimension {s:?}"))),
        }
    }
}

/// A broken profile invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileViolation {
    NotFinite { dimension: ValueDimension },
    OutOfRange { dimension: ValueDimension, score: f64 },
}

impl fmt::Display for ProfileViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileViolation::NotFinite { dimension } => {
                write!(f, "{dimension}: score is not finite")
            }
            ProfileViolation::OutOfRange { dimension, score } => {
                write!(f, "{dimension}: score out of [0,1] ({score})")
            }
        }
    }
}

/// Scores for the five value dimensions, indexed by [`ValueDimension::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueProfile {
    pub scores: [f64; ValueDimension::COUNT],
}

impl ValueProfile {
    pub fn new(scores: [f64; ValueDimension::COUNT]) -> Result<Self> {
        let p = ValueProfile { scores };
        validate_profile(&p).map_err(|v| {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            Error::data(msgs.join("; "))
        })?;
        Ok(p)
    }

    pub fn uniform(score: f64) -> Result<Self> {
        Self::new([score; ValueDimension::COUNT])
    }

    pub fn get(&self, dim: ValueDimension) -> f64 {
        self.scores[dim.index()]
    }

    pub fn set(&mut self, dim: ValueDimension, score: f64) {
        self.scores[dim.index()] = score;
    }
}

/// Checks every profile invariant, collecting all violations.
pub fn validate_profile(p: &ValueProfile) -> std::result::Result<(), Vec<ProfileViolation>> {
    let violations: Vec<ProfileViolation> = ValueDimension::ALL
        .iter()
        .filter_map(|&dimension| {
            let score = p.get(dimension);
            if !score.is_finite() {
                Some(ProfileViolation::NotFinite { dimension })
            } else if !(0.0..=1.0).contains(&score) {
                Some(ProfileViolation::OutOfRange { dimension, score })
            } else {
                None
            }
        })
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Convergence factor and interaction threshold of the bounded-confidence update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcmParams {
    mu: f64,
    sigma: f64,
}

impl BcmParams {
    /// `mu` must lie in (0, 0.5] and `sigma` in [0, 1].
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(mu > 0.0 && mu <= 0.5) {
            return Err(Error::param(format!("mu must be in (0, 0.5], got {mu}")));
        }
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::param(format!("sigma must be in [0, 1], got {sigma}")));
        }
        Ok(BcmParams { mu, sigma })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// One ego, up to five alters, and a value trajectory per user over a shared
/// contiguous range of segments.
///
/// User index 0 is the ego; alters follow in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoNetwork {
    ego_id: String,
    alter_ids: Vec<String>,
    first_segment: u32,
    trajectories: Vec<Vec<ValueProfile>>,
}

impl EgoNetwork {
    /// `trajectories[0]` belongs to the ego, `trajectories[k]` to `alter_ids[k - 1]`.
    pub fn new(
        ego_id: impl Into<String>,
        alter_ids: Vec<String>,
        first_segment: u32,
        trajectories: Vec<Vec<ValueProfile>>,
    ) -> Result<Self> {
        let ego_id = ego_id.into();
        if alter_ids.is_empty() || alter_ids.len() > MAX_ALTERS {
            return Err(Error::data(format!(
                "ego {ego_id}: expected 1..={MAX_ALTERS} alters, got {}",
                alter_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        seen.insert(ego_id.as_str());
        for a in &alter_ids {
            if !seen.insert(a.as_str()) {
                return Err(Error::data(format!(
                    "ego {ego_id}: alter {a:?} duplicates the ego or another alter"
                )));
            }
        }
        if trajectories.len() != alter_ids.len() + 1 {
            return Err(Error::data(format!(
                "ego {ego_id}: {} trajectories for {} users",
                trajectories.len(),
                alter_ids.len() + 1
            )));
        }
        let len = trajectories[0].len();
        if len == 0 {
            return Err(Error::data(format!("ego {ego_id}: empty trajectory")));
        }
        for (u, t) in trajectories.iter().enumerate() {
            if t.len() != len {
                return Err(Error::data(format!(
                    "ego {ego_id}: user #{u} covers {} segments, ego covers {len}",
                    t.len()
                )));
            }
            for (s, p) in t.iter().enumerate() {
                if let Err(v) = validate_profile(p) {
                    return Err(Error::data(format!(
                        "ego {ego_id}: user #{u} segment {}: {}",
                        first_segment as usize + s,
                        v[0]
                    )));
                }
            }
        }
        Ok(EgoNetwork {
            ego_id,
            alter_ids,
            first_segment,
            trajectories,
        })
    }

    pub fn ego_id(&self) -> &str {
        &self.ego_id
    }

    pub fn alter_ids(&self) -> &[String] {
        &self.alter_ids
    }

    pub fn num_alters(&self) -> usize {
        self.alter_ids.len()
    }

    /// Ego followed by alters.
    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.ego_id.as_str()).chain(self.alter_ids.iter().map(String::as_str))
    }

    pub fn first_segment(&self) -> u32 {
        self.first_segment
    }

    pub fn num_segments(&self) -> usize {
        self.trajectories[0].len()
    }

    /// Last covered segment index (inclusive).
    pub fn last_segment(&self) -> u32 {
        self.first_segment + self.num_segments() as u32 - 1
    }

    pub fn contains_segment(&self, segment: u32) -> bool {
        segment >= self.first_segment && segment <= self.last_segment()
    }

    pub fn trajectory(&self, user: usize) -> &[ValueProfile] {
        &self.trajectories[user]
    }

    pub fn trajectories(&self) -> &[Vec<ValueProfile>] {
        &self.trajectories
    }

    /// Profile of user `user` (0 = ego) at absolute segment index `segment`.
    pub fn profile(&self, user: usize, segment: u32) -> Option<&ValueProfile> {
        if !self.contains_segment(segment) {
            return None;
        }
        self.trajectories
            .get(user)
            .map(|t| &t[(segment - self.first_segment) as usize])
    }

    /// Profiles of every user at `segment`, ego first.
    pub fn snapshot(&self, segment: u32) -> Option<Vec<ValueProfile>> {
        (0..self.trajectories.len())
            .map(|u| self.profile(u, segment).copied())
            .collect()
    }

    /// Copy of the network restricted to segments `first..=last`.
    pub fn truncated(&self, last: u32) -> Result<EgoNetwork> {
        if last < self.first_segment {
            return Err(Error::data(format!(
                "ego {}: cannot truncate before the first segment",
                self.ego_id
            )));
        }
        let keep = ((last.min(self.last_segment()) - self.first_segment) + 1) as usize;
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| t[..keep].to_vec())
            .collect();
        EgoNetwork::new(
            self.ego_id.clone(),
            self.alter_ids.clone(),
            self.first_segment,
            trajectories,
        )
    }
}

/// A half-year window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub index: u32,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Segment {
    pub fn new(index: u32, epoch: NaiveDate) -> Result<Self> {
        let add = |m: u32| {
            epoch
                .checked_add_months(Months::new(m))
                .ok_or_else(|| Error::param(format!("segment {index} overflows the calendar")))
        };
        Ok(Segment {
            index,
            start: add(SEGMENT_MONTHS * index)?,
            end: add(SEGMENT_MONTHS * (index + 1))?,
        })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.start && date < self.end
    }
}

/// Dataset epoch: first observed activity truncated to the start of its month.
pub fn epoch_for(first_activity: NaiveDate) -> NaiveDate {
    first_activity.with_day(1).expect("day 1 exists in every month")
}

/// Index of the half-year segment containing `date`, counted from `epoch`.
pub fn segment_index_for(date: NaiveDate, epoch: NaiveDate) -> Result<u32> {
    if date < epoch {
        return Err(Error::data(format!("date precedes epoch ({date} < {epoch})")));
    }
    let mut months = (date.year() - epoch.year()) * 12 + date.month() as i32 - epoch.month() as i32;
    if date.day() < epoch.day() {
        months -= 1;
    }
    Ok(months as u32 / SEGMENT_MONTHS)
}
