//! Scenario files.
//!
//! Times are whole milliseconds, prices and distances are micro-units.
//! Every section except `[population]` has defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adversary::ByzantineStrategy;
use crate::datasource::{DataSourceSpec, FeedVariant, SourceBehavior, SourceStrategy};
use crate::error::ConfigError;
use crate::protocol::{ClanConfig, ProtocolConfig, TribeConfig};
use crate::types::{AgreementDistance, NodeId, Price, SimTime};

pub const US_PER_MS: u64 = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub population: PopulationConfig,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub sources: SourcesConfig,
    #[serde(default)]
    pub trajectory: Trajectory,
    #[serde(default)]
    pub faults: FaultsConfig,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    #[serde(default)]
    pub limits: Limits,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Node ids: the tribe is `0..tribe`, the clan its first `clan` members and
/// the aggregators its last `aggregators` members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub tribe: u16,
    pub clan: u16,
    pub aggregators: u16,
    pub f_c: Option<usize>,
    pub f_t: Option<usize>,
    /// Per-node clock offset applied to feed start.
    #[serde(default)]
    pub clock_offset_ms: BTreeMap<u16, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub agreement_distance: u64,
    pub variant: FeedVariant,
    pub t_ds_ms: u64,
    pub t_fallback_ms: u64,
    pub rounds: u64,
    pub variables: u32,
    pub round_interval_ms: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            agreement_distance: 0,
            variant: FeedVariant::Timer,
            t_ds_ms: 30_000,
            t_fallback_ms: 2_000,
            rounds: 1,
            variables: 1,
            round_interval_ms: 60_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSource {
    pub id: u16,
    pub strategy: SourceStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourcesConfig {
    pub count: u16,
    pub f_d: usize,
    /// Honest noise half-width.
    pub noise: u64,
    pub availability: f64,
    /// Per-source weights; empty means all 1.
    pub weights: Vec<u32>,
    pub byzantine: Vec<ByzantineSource>,
    pub crashed: Vec<u16>,
    pub latency_ms: [u64; 2],
}

impl Default for SourcesConfig {
    fn default() -> Self {
        SourcesConfig {
            count: 7,
            f_d: 1,
            noise: 0,
            availability: 1.0,
            weights: Vec::new(),
            byzantine: Vec::new(),
            crashed: Vec::new(),
            latency_ms: [5, 500],
        }
    }
}

impl SourcesConfig {
    pub fn specs(&self) -> Result<Vec<DataSourceSpec>, ConfigError> {
        if !self.weights.is_empty() && self.weights.len() != self.count as usize {
            return Err(ConfigError::new("sources.weights must list one weight per source"));
        }
        let mut specs: Vec<DataSourceSpec> = (0..self.count)
            .map(|i| {
                let mut s = DataSourceSpec::honest(i, self.noise);
                s.availability = self.availability;
                if let Some(w) = self.weights.get(i as usize) {
                    s.weight = *w;
                }
                s
            })
            .collect();
        for b in &self.byzantine {
            let s = specs
                .get_mut(b.id as usize)
                .ok_or_else(|| ConfigError::new(format!("byzantine source {} out of range", b.id)))?;
            s.behavior = SourceBehavior::Byzantine {
                strategy: b.strategy.clone(),
            };
        }
        for &c in &self.crashed {
            let s = specs
                .get_mut(c as usize)
                .ok_or_else(|| ConfigError::new(format!("crashed source {c} out of range")))?;
            s.behavior = SourceBehavior::Crashed;
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }
}

/// A window of elevated volatility: the truth shifts by `offset` and honest
/// noise is multiplied by `noise_multiplier`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spike {
    pub start_ms: u64,
    pub end_ms: u64,
    #[serde(default)]
    pub offset: i64,
    #[serde(default = "unit")]
    pub noise_multiplier: u64,
}

fn unit() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trajectory {
    pub base: i64,
    /// Drift per second of simulated time.
    pub drift_per_s: i64,
    /// Added to the truth for each variable index.
    pub variable_spacing: i64,
    pub spikes: Vec<Spike>,
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory {
            base: 20_000_000_000,
            drift_per_s: 0,
            variable_spacing: 0,
            spikes: Vec::new(),
        }
    }
}

impl Trajectory {
    pub fn truth(&self, variable: u32, at: SimTime) -> Price {
        let secs = (at / 1_000_000) as i64;
        let mut v = self
            .base
            .saturating_add(self.drift_per_s.saturating_mul(secs))
            .saturating_add(self.variable_spacing.saturating_mul(i64::from(variable)));
        for s in self.active(at) {
            v = v.saturating_add(s.offset);
        }
        Price::from_micros(v)
    }

    pub fn noise_multiplier(&self, at: SimTime) -> u64 {
        self.active(at).map(|s| s.noise_multiplier).product()
    }

    fn active(&self, at: SimTime) -> impl Iterator<Item = &Spike> {
        let ms = at / US_PER_MS;
        self.spikes.iter().filter(move |s| s.start_ms <= ms && ms < s.end_ms)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    #[default]
    Placed,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultsConfig {
    pub mode: FaultMode,
    /// Corrupted node ids (placed mode).
    pub nodes: Vec<u16>,
    /// Number of corrupted tribe nodes (random mode).
    pub count: usize,
    pub node_strategy: ByzantineStrategy,
    /// Behaviour of corrupted aggregators; defaults to `node_strategy`.
    pub aggregator_strategy: Option<ByzantineStrategy>,
}

impl Default for FaultsConfig {
    fn default() -> Self {
        FaultsConfig {
            mode: FaultMode::Placed,
            nodes: Vec::new(),
            count: 0,
            node_strategy: ByzantineStrategy::Silent,
            aggregator_strategy: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayClass {
    Value,
    FallbackValue,
    Proposal,
    Vote,
    FallbackVote,
    SmrPost,
    SmrDeliver,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    Fixed { ms: u64 },
    Uniform { lo_ms: u64, hi_ms: u64 },
}

impl DelayModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            DelayModel::Uniform { lo_ms, hi_ms } if lo_ms > hi_ms => {
                Err(ConfigError::new(format!("delay range {lo_ms}..{hi_ms} is empty")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeOverride {
    pub from: Option<u16>,
    pub to: Option<u16>,
    pub class: Option<DelayClass>,
    pub delay: DelayModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    /// Upper bound on every delay.
    pub cap_ms: u64,
    pub value: DelayModel,
    pub fallback_value: DelayModel,
    pub proposal: DelayModel,
    pub vote: DelayModel,
    pub fallback_vote: DelayModel,
    pub smr_post: DelayModel,
    pub smr_deliver: DelayModel,
    /// Delay for anything a corrupted node sends.
    pub byzantine_send: Option<DelayModel>,
    /// First match wins; `None` fields match anything.
    pub overrides: Vec<EdgeOverride>,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        let net = DelayModel::Uniform { lo_ms: 5, hi_ms: 200 };
        AdversaryConfig {
            cap_ms: 600_000,
            value: net,
            fallback_value: net,
            proposal: net,
            vote: net,
            fallback_vote: net,
            smr_post: DelayModel::Uniform { lo_ms: 100, hi_ms: 1_000 },
            smr_deliver: DelayModel::Uniform { lo_ms: 100, hi_ms: 1_000 },
            byzantine_send: None,
            overrides: Vec::new(),
        }
    }
}

impl AdversaryConfig {
    pub fn model(&self, class: DelayClass) -> DelayModel {
        match class {
            DelayClass::Value => self.value,
            DelayClass::FallbackValue => self.fallback_value,
            DelayClass::Proposal => self.proposal,
            DelayClass::Vote => self.vote,
            DelayClass::FallbackVote => self.fallback_vote,
            DelayClass::SmrPost => self.smr_post,
            DelayClass::SmrDeliver => self.smr_deliver,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    pub max_events: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_events: 20_000_000 }
    }
}

/// Who is who in one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Roles {
    pub tribe: BTreeSet<NodeId>,
    pub clan: BTreeSet<NodeId>,
    pub aggregators: BTreeSet<NodeId>,
    pub byzantine: BTreeSet<NodeId>,
    pub f_c: usize,
    pub f_t: usize,
}

impl Roles {
    pub fn is_byzantine(&self, n: NodeId) -> bool {
        self.byzantine.contains(&n)
    }

    pub fn honest_aggregators(&self) -> usize {
        self.aggregators.difference(&self.byzantine).count()
    }

    pub fn byzantine_in_clan(&self) -> usize {
        self.clan.intersection(&self.byzantine).count()
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(s).map_err(|e| ConfigError::new(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Population arithmetic and parameter ranges.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.population;
        if p.tribe == 0 || p.clan == 0 {
            return Err(ConfigError::new("tribe and clan must be nonempty"));
        }
        if p.clan > p.tribe || p.aggregators > p.tribe {
            return Err(ConfigError::new("clan and aggregators must fit in the tribe"));
        }
        self.protocol_config()?.validate()?;
        let specs = self.sources.specs()?;
        let total: usize = specs.iter().map(|s| s.weight as usize).sum();
        let need = self.protocol.variant.required_weight(self.sources.f_d);
        if total < need {
            return Err(ConfigError::new(format!(
                "source weight {total} below the {need} each node needs"
            )));
        }
        if self.protocol.t_ds_ms == 0 || self.protocol.variables == 0 {
            return Err(ConfigError::new("t_ds_ms and variables must be positive"));
        }
        let a = &self.adversary;
        for c in [
            DelayClass::Value,
            DelayClass::FallbackValue,
            DelayClass::Proposal,
            DelayClass::Vote,
            DelayClass::FallbackVote,
            DelayClass::SmrPost,
            DelayClass::SmrDeliver,
        ] {
            a.model(c).validate()?;
        }
        for o in &a.overrides {
            o.delay.validate()?;
        }
        if let Some(m) = &a.byzantine_send {
            m.validate()?;
        }
        if self.faults.mode == FaultMode::Placed {
            if let Some(bad) = self.faults.nodes.iter().find(|n| **n >= p.tribe) {
                return Err(ConfigError::new(format!("faulty node {bad} outside the tribe")));
            }
        } else if self.faults.count > p.tribe as usize {
            return Err(ConfigError::new("more faulty nodes than tribe members"));
        }
        Ok(())
    }

    pub fn protocol_config(&self) -> Result<ProtocolConfig, ConfigError> {
        let p = &self.population;
        let tribe: BTreeSet<NodeId> = (0..p.tribe).map(NodeId).collect();
        let clan: BTreeSet<NodeId> = (0..p.clan).map(NodeId).collect();
        let aggregators: BTreeSet<NodeId> = (p.tribe - p.aggregators.min(p.tribe)..p.tribe).map(NodeId).collect();
        let cfg = ProtocolConfig {
            clan: ClanConfig {
                f_c: p.f_c.unwrap_or_else(|| ClanConfig::default_f_c(clan.len())),
                clan,
                aggregators,
                d: AgreementDistance::from_micros(self.protocol.agreement_distance),
                t_fallback: self.protocol.t_fallback_ms * US_PER_MS,
                t_ds: self.protocol.t_ds_ms * US_PER_MS,
                f_d: self.sources.f_d,
            },
            tribe: TribeConfig {
                f_t: p.f_t.unwrap_or_else(|| TribeConfig::default_f_t(tribe.len())),
                tribe,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Roles for one seed; random corruption is drawn from the seed.
    pub fn roles(&self, seed: u64) -> Result<Roles, ConfigError> {
        let cfg = self.protocol_config()?;
        let byzantine: BTreeSet<NodeId> = match self.faults.mode {
            FaultMode::Placed => self.faults.nodes.iter().copied().map(NodeId).collect(),
            FaultMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6661_756c_7473);
                sample(&mut rng, self.population.tribe as usize, self.faults.count)
                    .into_iter()
                    .map(|i| NodeId(i as u16))
                    .collect()
            }
        };
        Ok(Roles {
            tribe: cfg.tribe.tribe,
            clan: cfg.clan.clan,
            aggregators: cfg.clan.aggregators,
            byzantine,
            f_c: cfg.clan.f_c,
            f_t: cfg.tribe.f_t,
        })
    }

    pub fn aggregator_strategy(&self) -> ByzantineStrategy {
        self.faults
            .aggregator_strategy
            .clone()
            .unwrap_or_else(|| self.faults.node_strategy.clone())
    }
}
