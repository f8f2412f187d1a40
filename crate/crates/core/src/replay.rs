//! Exchange-tick replay: windowing, per-node medians and cluster-formation
//! sweeps over the agreement distance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasource::robust_median;
use crate::error::{ConfigError, IngestError};
use crate::protocol::find_cluster_values;
use crate::types::{AgreementDistance, DataSourceId, NodeId, Price};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tick {
    pub source: DataSourceId,
    pub timestamp_ms: u64,
    pub price: Price,
}

#[derive(Deserialize)]
struct RawTick {
    source: String,
    timestamp_ms: String,
    price: String,
}

const HEADER: [&str; 3] = ["source", "timestamp_ms", "price"];

/// Reads `source,timestamp_ms,price` rows, sorted by `(timestamp, source)`.
pub fn ingest_csv(path: &Path) -> Result<Vec<Tick>, IngestError> {
    ingest_reader(std::fs::File::open(path)?)
}

pub fn ingest_reader(r: impl Read) -> Result<Vec<Tick>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers().map_err(|_| IngestError::Header)?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(IngestError::Header);
    }
    let mut ticks = Vec::new();
    for (i, row) in rdr.deserialize::<RawTick>().enumerate() {
        // header is line 1
        let line = i as u64 + 2;
        let bad = |reason: String| IngestError::Row { line, reason };
        let raw = row.map_err(|e| bad(e.to_string()))?;
        let source = raw.source.parse::<u16>().map_err(|e| bad(format!("source: {e}")))?;
        let timestamp_ms = raw
            .timestamp_ms
            .parse::<u64>()
            .map_err(|e| bad(format!("timestamp_ms: {e}")))?;
        let price = Price::from_decimal_str(&raw.price).map_err(|e| bad(e.to_string()))?;
        ticks.push(Tick {
            source: DataSourceId(source),
            timestamp_ms,
            price,
        });
    }
    ticks.sort_by_key(|t| (t.timestamp_ms, t.source));
    Ok(ticks)
}

pub fn write_ticks_csv(ticks: &[Tick], w: impl Write) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(HEADER).map_err(csv_io)?;
    for t in ticks {
        wtr.write_record([t.source.0.to_string(), t.timestamp_ms.to_string(), t.price.to_string()])
            .map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> IngestError {
    IngestError::Io(std::io::Error::other(e))
}

/// Each node's assigned exchanges.
pub type NodeSources = BTreeMap<NodeId, Vec<DataSourceId>>;

/// Uniform `per_node`-subsets of `0..sources` for nodes `0..nodes`.
pub fn random_assignment(nodes: u16, sources: u16, per_node: usize, seed: u64) -> Result<NodeSources, ConfigError> {
    if per_node == 0 || per_node > sources as usize {
        return Err(ConfigError::new(format!("cannot assign {per_node} of {sources} sources")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..nodes)
        .map(|n| {
            let mut s: Vec<DataSourceId> = index::sample(&mut rng, sources as usize, per_node)
                .into_iter()
                .map(|i| DataSourceId(i as u16))
                .collect();
            s.sort();
            (NodeId(n), s)
        })
        .collect())
}

/// One time window seen by every node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WindowRound {
    pub start_ms: u64,
    pub medians: BTreeMap<NodeId, Price>,
    /// Nodes none of whose sources ticked.
    pub abstained: Vec<NodeId>,
    /// Sources with no tick in the window.
    pub silent: BTreeSet<DataSourceId>,
}

/// Medians for one window: the latest tick of each assigned source counts.
/// `ticks` must all fall inside the window.
pub fn window_round(ticks: &[Tick], start_ms: u64, all_sources: &[DataSourceId], assignment: &NodeSources) -> WindowRound {
    let mut latest: BTreeMap<DataSourceId, (u64, Price)> = BTreeMap::new();
    for t in ticks {
        let e = latest.entry(t.source).or_insert((t.timestamp_ms, t.price));
        if t.timestamp_ms >= e.0 {
            *e = (t.timestamp_ms, t.price);
        }
    }
    let mut medians = BTreeMap::new();
    let mut abstained = Vec::new();
    for (&n, srcs) in assignment {
        let obs: Vec<Price> = srcs.iter().filter_map(|s| latest.get(s).map(|x| x.1)).collect();
        match robust_median(&obs) {
            Ok(m) => {
                medians.insert(n, m);
            }
            Err(_) => abstained.push(n),
        }
    }
    WindowRound {
        start_ms,
        medians,
        abstained,
        silent: all_sources.iter().copied().filter(|s| !latest.contains_key(s)).collect(),
    }
}

/// Splits sorted ticks into epoch-aligned windows of `width_s` seconds,
/// from the first tick's window to the last one's, empty windows included.
pub fn windows(ticks: &[Tick], width_s: u64, all_sources: &[DataSourceId], assignment: &NodeSources) -> Vec<WindowRound> {
    let width = width_s.max(1) * 1_000;
    let (Some(first), Some(last)) = (ticks.first(), ticks.last()) else { return Vec::new() };
    let mut out = Vec::new();
    let mut i = 0;
    for w in first.timestamp_ms / width..=last.timestamp_ms / width {
        let end = (w + 1) * width;
        let j = i + ticks[i..].partition_point(|t| t.timestamp_ms < end);
        out.push(window_round(&ticks[i..j], w * width, all_sources, assignment));
        i = j;
    }
    out
}

/// Percentage of windows in which each source produced nothing.
pub fn null_percentages(rounds: &[WindowRound], all_sources: &[DataSourceId]) -> BTreeMap<DataSourceId, f64> {
    all_sources
        .iter()
        .map(|s| {
            let silent = rounds.iter().filter(|r| r.silent.contains(s)).count();
            (*s, 100.0 * silent as f64 / rounds.len().max(1) as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FormationRow {
    pub d_microunits: u64,
    pub d_pct: String,
    pub windows: usize,
    pub clusters_formed: usize,
    pub fraction: f64,
}

/// A percentage grid `lo:hi:step` (decimal strings, exact) turned into
/// micro-unit distances against `refprice`. Returns `(pct, d)` pairs.
pub fn d_grid(spec: &str, refprice: Price) -> Result<Vec<(Price, u64)>, ConfigError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(ConfigError::new(format!("grid {spec:?} is not lo:hi:step")));
    };
    let parse = |s: &str| Price::from_decimal_str(s).map_err(|e| ConfigError::new(e.to_string()));
    let (lo, hi, step) = (parse(lo)?, parse(hi)?, parse(step)?);
    if step.micros() <= 0 || lo > hi || lo.micros() < 0 {
        return Err(ConfigError::new(format!("grid {spec:?} is empty or descending")));
    }
    let mut out = Vec::new();
    let mut p = lo.micros();
    while p <= hi.micros() {
        out.push((Price::from_micros(p), pct_to_micros(Price::from_micros(p), refprice)));
        p += step.micros();
    }
    Ok(out)
}

/// `refprice * pct / 100`, truncated to whole micro-units.
pub fn pct_to_micros(pct: Price, refprice: Price) -> u64 {
    let v = i128::from(refprice.micros()) * i128::from(pct.micros()) / (100 * 1_000_000);
    u64::try_from(v.max(0)).unwrap_or(u64::MAX)
}

/// Whether `required` of the medians fit within `d` of each other.
pub fn cluster_forms(medians: &BTreeMap<NodeId, Price>, required: usize, d: u64) -> bool {
    find_cluster_values(medians, required, AgreementDistance::from_micros(d)).is_some()
}

/// Fraction of windows with a qualifying cluster, per distance.
pub fn cluster_formation_sweep(
    rounds: &[BTreeMap<NodeId, Price>],
    required: usize,
    grid: &[(Price, u64)],
) -> Vec<FormationRow> {
    grid.iter()
        .map(|&(pct, d)| {
            let formed = rounds.iter().filter(|m| cluster_forms(m, required, d)).count();
            FormationRow {
                d_microunits: d,
                d_pct: pct.to_string(),
                windows: rounds.len(),
                clusters_formed: formed,
                fraction: if rounds.is_empty() { 0.0 } else { formed as f64 / rounds.len() as f64 },
            }
        })
        .collect()
}

pub fn formation_csv(rows: &[FormationRow]) -> String {
    let mut out = String::from("d_microunits,d_pct,windows,clusters_formed,fraction\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6}",
            r.d_microunits, r.d_pct, r.windows, r.clusters_formed, r.fraction
        );
    }
    out
}

/// Parameters of a replay run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayConfig {
    pub window_s: u64,
    pub nodes: u16,
    pub per_node: usize,
    pub required: usize,
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            window_s: 30,
            nodes: 7,
            per_node: 5,
            required: 4,
            seed: 0,
        }
    }
}

pub struct ReplayOutput {
    pub rounds: Vec<WindowRound>,
    pub null_pct: BTreeMap<DataSourceId, f64>,
    pub curve: Vec<FormationRow>,
}

/// Windowing, assignment and the formation sweep in one call. The source
/// set is every source id seen in `ticks`.
pub fn replay(ticks: &[Tick], cfg: &ReplayConfig, grid: &[(Price, u64)]) -> Result<ReplayOutput, ConfigError> {
    let sources: Vec<DataSourceId> = ticks.iter().map(|t| t.source).collect::<BTreeSet<_>>().into_iter().collect();
    if cfg.required == 0 || cfg.required > cfg.nodes as usize {
        return Err(ConfigError::new("required cluster size must be in 1..=nodes"));
    }
    let n_sources = sources.iter().map(|s| s.0 + 1).max().unwrap_or(0);
    let assignment = if sources.is_empty() {
        NodeSources::new()
    } else {
        random_assignment(cfg.nodes, n_sources, cfg.per_node.min(n_sources as usize), cfg.seed)?
    };
    let rounds = windows(ticks, cfg.window_s, &sources, &assignment);
    let medians: Vec<BTreeMap<NodeId, Price>> = rounds.iter().map(|r| r.medians.clone()).collect();
    Ok(ReplayOutput {
        null_pct: null_percentages(&rounds, &sources),
        curve: cluster_formation_sweep(&medians, cfg.required, grid),
        rounds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    /// Uniform noise half-width around the true price.
    #[serde(default)]
    pub noise: u64,
    /// Chance that the source ticks at all in a window.
    #[serde(default = "always")]
    pub availability: f64,
}

fn always() -> f64 {
    1.0
}

/// A stretch of turmoil: the price moves by `move_total` across the segment
/// and every source's noise is multiplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpike {
    pub start_s: u64,
    pub end_s: u64,
    #[serde(default)]
    pub move_total: i64,
    #[serde(default = "unit")]
    pub noise_multiplier: u64,
}

fn unit() -> u64 {
    1
}

/// Synthetic tick generator settings, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub start_ms: u64,
    pub duration_s: u64,
    #[serde(default = "default_window")]
    pub window_s: u64,
    #[serde(default = "default_ticks")]
    pub ticks_per_window: u32,
    pub base_price: Price,
    #[serde(default)]
    pub drift_per_s: i64,
    pub sources: Vec<SynthSource>,
    #[serde(default)]
    pub spikes: Vec<SynthSpike>,
}

fn default_window() -> u64 {
    30
}

fn default_ticks() -> u32 {
    3
}

impl SynthSpec {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let spec: SynthSpec = toml::from_str(s).map_err(|e| ConfigError::new(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window_s == 0 || self.duration_s == 0 || self.sources.is_empty() {
            return Err(ConfigError::new("window_s, duration_s and sources must be nonzero"));
        }
        if self.sources.iter().any(|s| !(0.0..=1.0).contains(&s.availability)) {
            return Err(ConfigError::new("availability must be within [0, 1]"));
        }
        if self.spikes.iter().any(|s| s.end_s <= s.start_s) {
            return Err(ConfigError::new("spike end must follow its start"));
        }
        Ok(())
    }

    /// True price `elapsed_ms` after the start.
    pub fn truth(&self, elapsed_ms: u64) -> Price {
        let secs = elapsed_ms as i128 / 1_000;
        let mut v = i128::from(self.base_price.micros()) + i128::from(self.drift_per_s) * secs;
        for s in &self.spikes {
            let (a, b) = (u128::from(s.start_s) * 1_000, u128::from(s.end_s) * 1_000);
            let t = u128::from(elapsed_ms).clamp(a, b);
            v += i128::from(s.move_total) * (t - a) as i128 / (b - a) as i128;
        }
        Price::from_micros(v.clamp(i128::from(i64::MIN), i128::from(i64::MAX)) as i64)
    }

    pub fn noise_multiplier(&self, elapsed_ms: u64) -> u64 {
        self.spikes
            .iter()
            .filter(|s| s.start_s * 1_000 <= elapsed_ms && elapsed_ms < s.end_s * 1_000)
            .map(|s| s.noise_multiplier)
            .product()
    }

    /// Whether the window starting `elapsed_ms` after the start overlaps a spike.
    pub fn in_spike(&self, elapsed_ms: u64) -> bool {
        let end = elapsed_ms + self.window_s * 1_000;
        self.spikes
            .iter()
            .any(|s| s.start_s * 1_000 < end && elapsed_ms < s.end_s * 1_000)
    }
}

/// Deterministic synthetic ticks. Each source is up or down for a whole
/// window; when up it ticks `ticks_per_window` times at random instants.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Vec<Tick> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = spec.window_s * 1_000;
    let mut ticks = Vec::new();
    for w in 0..spec.duration_s.div_ceil(spec.window_s) {
        for (i, src) in spec.sources.iter().enumerate() {
            if !rng.gen_bool(src.availability) {
                continue;
            }
            for _ in 0..spec.ticks_per_window {
                let elapsed = w * width + rng.gen_range(0..width);
                let half = src.noise.saturating_mul(spec.noise_multiplier(elapsed));
                let half = i64::try_from(half).unwrap_or(i64::MAX);
                let noise = if half == 0 { 0 } else { rng.gen_range(-half..=half) };
                ticks.push(Tick {
                    source: DataSourceId(i as u16),
                    timestamp_ms: spec.start_ms + elapsed,
                    price: spec.truth(elapsed).saturating_offset(noise),
                });
            }
        }
    }
    ticks.sort_by_key(|t| (t.timestamp_ms, t.source));
    ticks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: i64) -> Price {
        Price::from_micros(x)
    }

    #[test]
    fn header_only_is_empty() {
        assert!(ingest_reader("source,timestamp_ms,price\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn prices_scale_exactly_and_rows_sort() {
        let t = ingest_reader("source,timestamp_ms,price\n1,2000,19605.50\n0,1000,1\n".as_bytes()).unwrap();
        assert_eq!(t[0].timestamp_ms, 1000);
        assert_eq!(t[1].price, p(19_605_500_000));
    }

    #[test]
    fn bad_rows_carry_line_numbers() {
        let e = ingest_reader("source,timestamp_ms,price\n0,1,1\n0,x,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, IngestError::Row { line: 3, .. }), "{e}");
        assert!(matches!(ingest_reader("a,b,c\n".as_bytes()), Err(IngestError::Header)));
    }

    #[test]
    fn latest_tick_per_source_wins() {
        let a: NodeSources = BTreeMap::from([(NodeId(0), vec![DataSourceId(0), DataSourceId(1), DataSourceId(2)])]);
        let t = |s, ts, v| Tick {
            source: DataSourceId(s),
            timestamp_ms: ts,
            price: p(v),
        };
        let srcs = [DataSourceId(0), DataSourceId(1), DataSourceId(2), DataSourceId(3)];
        let r = window_round(&[t(0, 1, 100), t(0, 5, 10), t(1, 2, 20), t(2, 3, 30)], 0, &srcs, &a);
        assert_eq!(r.medians[&NodeId(0)], p(20));
        assert_eq!(r.silent, BTreeSet::from([DataSourceId(3)]));
        let r = window_round(&[t(3, 1, 5)], 0, &srcs, &a);
        assert_eq!(r.abstained, vec![NodeId(0)]);
    }

    #[test]
    fn grid_is_exact() {
        let g = d_grid("0.02:0.05:0.01", p(19_605_500_000)).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g[0].1, 3_921_100);
        assert!(d_grid("0.5:0.1:0.1", p(1)).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::from_toml_str(
            "duration_s = 600\nbase_price = 100000000\n[[sources]]\nnoise = 5\n[[sources]]\navailability = 0.5\n",
        )
        .unwrap();
        assert_eq!(synth_generate(&spec, 7), synth_generate(&spec, 7));
        assert_ne!(synth_generate(&spec, 7), synth_generate(&spec, 8));
    }
}
