//! Data sources, their assignment to nodes, and feed collection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::sha256;
use crate::error::{ConfigError, NoData};
use crate::types::{DataSourceId, NodeId, Price, SimTime};

/// How a faulty source picks its report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceStrategy {
    /// Truth plus a fixed offset.
    Offset { offset: i64 },
    /// Truth plus uniform noise on `[-half_width, half_width]`.
    Random { half_width: u64 },
    /// A constant, regardless of the truth.
    Fixed { value: Price },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceBehavior {
    Honest { noise_half_width: u64 },
    Byzantine { strategy: SourceStrategy },
    Crashed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSourceSpec {
    pub id: DataSourceId,
    pub behavior: SourceBehavior,
    #[serde(default = "one")]
    pub weight: u32,
    /// Probability that an honest source answers within `T_ds`.
    #[serde(default = "always")]
    pub availability: f64,
}

fn one() -> u32 {
    1
}

fn always() -> f64 {
    1.0
}

impl DataSourceSpec {
    pub fn honest(id: u16, noise_half_width: u64) -> Self {
        DataSourceSpec {
            id: DataSourceId(id),
            behavior: SourceBehavior::Honest { noise_half_width },
            weight: 1,
            availability: 1.0,
        }
    }

    pub fn byzantine(id: u16, strategy: SourceStrategy) -> Self {
        DataSourceSpec {
            id: DataSourceId(id),
            behavior: SourceBehavior::Byzantine { strategy },
            weight: 1,
            availability: 1.0,
        }
    }

    pub fn crashed(id: u16) -> Self {
        DataSourceSpec {
            id: DataSourceId(id),
            behavior: SourceBehavior::Crashed,
            weight: 1,
            availability: 1.0,
        }
    }

    pub fn is_byzantine(&self) -> bool {
        matches!(self.behavior, SourceBehavior::Byzantine { .. })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.weight == 0 {
            return Err(ConfigError::new(format!("source {} has weight 0", self.id)));
        }
        if !(0.0..=1.0).contains(&self.availability) {
            return Err(ConfigError::new(format!(
                "source {} availability {} outside [0, 1]",
                self.id, self.availability
            )));
        }
        Ok(())
    }

    /// The value this source reports for `truth`, or `None` if it stays silent.
    pub fn respond(&self, truth: Price, rng: &mut impl Rng) -> Option<Price> {
        match &self.behavior {
            SourceBehavior::Crashed => None,
            SourceBehavior::Honest { noise_half_width } => {
                if self.availability < 1.0 && !rng.gen_bool(self.availability) {
                    return None;
                }
                Some(truth.saturating_offset(noise(*noise_half_width, rng)))
            }
            SourceBehavior::Byzantine { strategy } => Some(match strategy {
                SourceStrategy::Offset { offset } => truth.saturating_offset(*offset),
                SourceStrategy::Random { half_width } => truth.saturating_offset(noise(*half_width, rng)),
                SourceStrategy::Fixed { value } => *value,
            }),
        }
    }
}

fn noise(half_width: u64, rng: &mut impl Rng) -> i64 {
    if half_width == 0 {
        return 0;
    }
    let w = i64::try_from(half_width).unwrap_or(i64::MAX);
    rng.gen_range(-w..=w)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedVariant {
    /// Ask `2f_d+1` sources, keep whatever arrives before `T_ds`.
    #[default]
    Timer,
    /// Ask `3f_d+1` sources, return once `2f_d+1` have answered.
    Async,
}

impl FeedVariant {
    /// Total source weight each node must be assigned.
    pub fn required_weight(self, f_d: usize) -> usize {
        match self {
            FeedVariant::Timer => 2 * f_d + 1,
            FeedVariant::Async => 3 * f_d + 1,
        }
    }
}

/// Sources assigned to each node.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment(pub BTreeMap<NodeId, Vec<DataSourceId>>);

impl Assignment {
    pub fn get(&self, node: NodeId) -> &[DataSourceId] {
        self.0.get(&node).map_or(&[], Vec::as_slice)
    }
}

/// Draws each node's sources uniformly at random.
///
/// Each node gets its own stream keyed by `(seed, node)`, standing in for a
/// VRF output. With unit weights the draw is a uniform `k`-subset; with
/// larger weights sources are taken in shuffled order while they still fit,
/// retrying until the total is exact.
pub fn assign_sources(
    nodes: &[NodeId],
    sources: &[DataSourceSpec],
    f_d: usize,
    variant: FeedVariant,
    seed: u64,
) -> Result<Assignment, ConfigError> {
    for s in sources {
        s.validate()?;
    }
    let need = variant.required_weight(f_d);
    let weights: Vec<usize> = sources.iter().map(|s| s.weight as usize).collect();
    if !subset_sum_reachable(&weights, need) {
        return Err(ConfigError::new(format!(
            "no subset of {} sources has total weight {need}",
            sources.len()
        )));
    }
    let unit = weights.iter().all(|&w| w == 1);
    let mut out = BTreeMap::new();
    for &node in nodes {
        let mut rng = node_rng(seed, node);
        let picked: Vec<usize> = if unit {
            rand::seq::index::sample(&mut rng, sources.len(), need).into_vec()
        } else {
            weighted_draw(&weights, need, &mut rng)
        };
        let mut ids: Vec<DataSourceId> = picked.into_iter().map(|i| sources[i].id).collect();
        ids.sort();
        out.insert(node, ids);
    }
    Ok(Assignment(out))
}

fn node_rng(seed: u64, node: NodeId) -> ChaCha8Rng {
    let mut material = b"dora-assign".to_vec();
    material.extend_from_slice(&seed.to_be_bytes());
    material.extend_from_slice(&node.0.to_be_bytes());
    ChaCha8Rng::from_seed(sha256(&material).0)
}

fn subset_sum_reachable(weights: &[usize], target: usize) -> bool {
    let mut reach = vec![false; target + 1];
    reach[0] = true;
    for &w in weights {
        for t in (w..=target).rev() {
            reach[t] |= reach[t - w];
        }
    }
    reach[target]
}

fn weighted_draw(weights: &[usize], need: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Any feasible subset is reached when the shuffle lists it first, so
    // this terminates with probability one; the bound is a backstop.
    for _ in 0..100_000 {
        order.shuffle(rng);
        let mut left = need;
        let mut picked = Vec::new();
        for &i in &order {
            if weights[i] <= left {
                left -= weights[i];
                picked.push(i);
            }
        }
        if left == 0 {
            return picked;
        }
    }
    unreachable!("feasible weighted draw not found")
}

/// One source answer as seen by the node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SourceResponse {
    pub source: DataSourceId,
    pub weight: u32,
    pub value: Price,
    /// Offset from the feed request.
    pub at: SimTime,
    pub byzantine: bool,
}

/// Inputs for one node's feed collection.
pub struct FeedRequest<'a> {
    pub sources: Vec<&'a DataSourceSpec>,
    pub variant: FeedVariant,
    pub f_d: usize,
    pub t_ds: SimTime,
    pub truth: Price,
    /// Honest response latency range, as offsets below `t_ds`.
    pub latency: (SimTime, SimTime),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FeedOutcome {
    /// Received values, each repeated by its source weight.
    pub obs: Vec<Price>,
    /// Offset at which the feed returned; `None` if the async variant never
    /// gathered enough weight.
    pub completed_at: Option<SimTime>,
    /// Responses that made it into `obs`, in arrival order.
    pub responses: Vec<SourceResponse>,
    pub byzantine_weight: u64,
    /// Set when `|obs| <= 2 * byzantine_weight`, where the median guarantee
    /// no longer holds.
    pub diagnostic: Option<String>,
}

/// Simulates `GetDataFeed` for one node.
pub fn get_data_feed(req: &FeedRequest<'_>, rng: &mut impl Rng) -> FeedOutcome {
    let (lo, hi) = req.latency;
    let hi = hi.min(req.t_ds.saturating_sub(1)).max(lo);
    let mut arrivals: Vec<SourceResponse> = Vec::new();
    for spec in &req.sources {
        // Draw latency even for silent sources so one source's behaviour
        // does not shift the others' randomness.
        let at = rng.gen_range(lo..=hi);
        if let Some(value) = spec.respond(req.truth, rng) {
            let at = if spec.is_byzantine() { lo } else { at };
            arrivals.push(SourceResponse {
                source: spec.id,
                weight: spec.weight,
                value,
                at,
                byzantine: spec.is_byzantine(),
            });
        }
    }
    arrivals.sort_by_key(|r| (r.at, r.source));

    let (responses, completed_at) = match req.variant {
        FeedVariant::Timer => {
            arrivals.retain(|r| r.at < req.t_ds);
            (arrivals, Some(req.t_ds))
        }
        FeedVariant::Async => {
            let quorum = (2 * req.f_d + 1) as u64;
            let mut total = 0u64;
            let mut cut = None;
            for (i, r) in arrivals.iter().enumerate() {
                total += u64::from(r.weight);
                if total >= quorum {
                    cut = Some((i + 1, r.at));
                    break;
                }
            }
            match cut {
                Some((n, at)) => {
                    arrivals.truncate(n);
                    (arrivals, Some(at))
                }
                None => (arrivals, None),
            }
        }
    };

    let mut obs = Vec::new();
    let mut byzantine_weight = 0u64;
    for r in &responses {
        obs.extend(std::iter::repeat_n(r.value, r.weight as usize));
        if r.byzantine {
            byzantine_weight += u64::from(r.weight);
        }
    }
    let diagnostic = (obs.len() as u64 <= 2 * byzantine_weight).then(|| {
        format!(
            "{} observations with byzantine weight {byzantine_weight}: median not guaranteed within honest bounds",
            obs.len()
        )
    });
    FeedOutcome {
        obs,
        completed_at,
        responses,
        byzantine_weight,
        diagnostic,
    }
}

/// Lower median: the element at index `(n-1)/2` of the sorted values.
pub fn robust_median(obs: &[Price]) -> Result<Price, NoData> {
    if obs.is_empty() {
        return Err(NoData);
    }
    let mut v = obs.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable(k);
    Ok(*m)
}
