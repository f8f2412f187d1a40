use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::adversary::ByzantineStrategy;
use super::config::{FaultMode, ScenarioConfig};
use super::run_scenario;
use crate::error::ConfigError;
use crate::protocol::Via;

/// A scenario parameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Agreement distance in micro-units.
    D,
    /// Honest source noise half-width in micro-units.
    Noise,
    Aggregators,
    Tribe,
    Clan,
    TFallbackMs,
    /// Number of randomly corrupted tribe nodes.
    Byzantine,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::D => "d",
            SweepAxis::Noise => "noise",
            SweepAxis::Aggregators => "n_a",
            SweepAxis::Tribe => "n_t",
            SweepAxis::Clan => "n_c",
            SweepAxis::TFallbackMs => "t_fallback_ms",
            SweepAxis::Byzantine => "byzantine",
        }
    }

    /// Applies `value` to a copy of `template`.
    pub fn apply(self, template: &ScenarioConfig, value: u64) -> Result<ScenarioConfig, ConfigError> {
        let mut cfg = template.clone();
        let small = || u16::try_from(value).map_err(|_| ConfigError::new(format!("{value} is out of range")));
        match self {
            SweepAxis::D => cfg.protocol.agreement_distance = value,
            SweepAxis::Noise => cfg.sources.noise = value,
            SweepAxis::Aggregators => cfg.population.aggregators = small()?,
            SweepAxis::Tribe => cfg.population.tribe = small()?,
            SweepAxis::Clan => cfg.population.clan = small()?,
            SweepAxis::TFallbackMs => cfg.protocol.t_fallback_ms = value,
            SweepAxis::Byzantine => {
                cfg.faults.mode = FaultMode::Random;
                cfg.faults.count = value as usize;
                if cfg.faults.node_strategy == ByzantineStrategy::Silent && value > 0 {
                    cfg.faults.node_strategy = ByzantineStrategy::ClusterPoison;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "d" => SweepAxis::D,
            "noise" => SweepAxis::Noise,
            "n_a" | "aggregators" => SweepAxis::Aggregators,
            "n_t" | "tribe" => SweepAxis::Tribe,
            "n_c" | "clan" => SweepAxis::Clan,
            "t_fallback_ms" => SweepAxis::TFallbackMs,
            "byzantine" => SweepAxis::Byzantine,
            other => return Err(ConfigError::new(format!("unknown sweep axis {other:?}"))),
        })
    }
}

/// One `(value, seed)` cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: u64,
    pub seed: u64,
    pub instances: usize,
    pub via_cluster: usize,
    pub via_fallback: usize,
    pub max_error: Option<u64>,
    pub mean_error: Option<f64>,
    pub messages: u64,
    pub bytes: u64,
    pub invariant_violations: usize,
    pub unconcluded: usize,
    pub exit_code: i32,
}

/// Runs every `(value, seed)` pair in parallel. Rows come back in input order.
pub fn sweep(
    template: &ScenarioConfig,
    axis: SweepAxis,
    values: &[u64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, ConfigError> {
    let configs = values
        .iter()
        .map(|&v| axis.apply(template, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>, _>>()?;
    let cells: Vec<(u64, &ScenarioConfig, u64)> = configs
        .iter()
        .flat_map(|(v, c)| seeds.iter().map(move |&s| (*v, c, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(value, cfg, seed)| {
            let r = run_scenario(cfg, seed)?;
            let errors: Vec<u64> = r.decisions.iter().filter_map(|d| d.error).collect();
            Ok(SweepRow {
                axis: axis.name(),
                value,
                seed,
                instances: r.decisions.len(),
                via_cluster: r.count_via(Via::Cluster),
                via_fallback: r.count_via(Via::Fallback),
                max_error: r.max_error(),
                mean_error: (!errors.is_empty())
                    .then(|| errors.iter().map(|&e| e as f64).sum::<f64>() / errors.len() as f64),
                messages: r.counters.total_messages(),
                bytes: r.counters.total_bytes(),
                invariant_violations: r.invariant_violations(),
                unconcluded: r.unconcluded,
                exit_code: r.exit_code(),
            })
        })
        .collect()
}

pub fn rows_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "axis,value,seed,instances,via_cluster,via_fallback,max_error,mean_error,messages,bytes,invariant_violations,unconcluded,exit_code\n",
    );
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.seed,
            r.instances,
            r.via_cluster,
            r.via_fallback,
            opt(r.max_error.map(|e| e.to_string())),
            opt(r.mean_error.map(|e| format!("{e:.1}"))),
            r.messages,
            r.bytes,
            r.invariant_violations,
            r.unconcluded,
            r.exit_code
        );
    }
    out
}
