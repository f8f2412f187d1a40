use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use dora_core::analysis::{
    any_clan_fail_prob, clan_majority_fail_prob, family_all_byzantine_prob, mc_any_clan_fail, mc_clan_majority_fail,
    mc_family_all_byzantine, McEstimate, Probability,
};
use dora_core::netsim::report::{EXIT_CONFIG, EXIT_INVARIANT, EXIT_LIVENESS, EXIT_OK};
use dora_core::netsim::sweep::{rows_csv, sweep, SweepAxis};
use dora_core::netsim::{run_with_audit, ScenarioConfig};
use dora_core::replay::{d_grid, formation_csv, ingest_csv, replay, synth_generate, write_ticks_csv, ReplayConfig, SynthSpec};
use dora_core::types::Price;

#[derive(Parser)]
#[command(name = "dora", version, about = "Oracle agreement simulator and calculators")]
struct Cli {
    /// Worker threads for multi-seed work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file for each of its seeds.
    Simulate(SimulateArgs),
    /// Vary one scenario parameter and tabulate outcomes.
    Sweep(SweepArgs),
    /// Committee-sampling failure probabilities.
    #[command(subcommand)]
    Probability(ProbCmd),
    /// Cluster formation against agreement distance over recorded ticks.
    Replay(ReplayArgs),
    /// Generate synthetic exchange ticks.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Overrides {
    /// Seeds to run instead of the file's list (comma list or a..b).
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    rounds: Option<u64>,
    /// Agreement distance in micro-units.
    #[arg(long)]
    d: Option<u64>,
    /// Honest source noise half-width in micro-units.
    #[arg(long)]
    noise: Option<u64>,
    #[arg(long)]
    t_fallback_ms: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ScenarioConfig) -> Result<()> {
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_list(s)?;
        }
        if let Some(r) = self.rounds {
            cfg.protocol.rounds = r;
        }
        if let Some(d) = self.d {
            cfg.protocol.agreement_distance = d;
        }
        if let Some(n) = self.noise {
            cfg.sources.noise = n;
        }
        if let Some(t) = self.t_fallback_ms {
            cfg.protocol.t_fallback_ms = t;
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Args)]
struct SimulateArgs {
    config: PathBuf,
    /// Output directory; one subdirectory per seed.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    /// d, noise, n_a, n_t, n_c, t_fallback_ms or byzantine.
    #[arg(long)]
    axis: String,
    /// Comma list or a..b[:step].
    #[arg(long)]
    values: String,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum ProbCmd {
    /// Chance that every aggregator in the family is corrupt.
    Family {
        #[arg(long)]
        tribe: u64,
        #[arg(long)]
        byz: u64,
        /// Family sizes: comma list or a..b[:step].
        #[arg(long)]
        sizes: String,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Chance that one clan has a corrupt majority.
    Clan {
        #[arg(long)]
        tribe: u64,
        #[arg(long)]
        byz: u64,
        /// Clan sizes: comma list or a..b[:step].
        #[arg(long)]
        clan: String,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Chance that any of several disjoint clans has a corrupt majority.
    Clans {
        /// Tribe sizes: comma list or a..b[:step].
        #[arg(long)]
        tribe: String,
        /// Corrupt share in percent, rounded down per tribe size.
        #[arg(long, default_value_t = 33)]
        byz_pct: u64,
        #[arg(long, default_value_t = 5)]
        clans: u64,
        /// Clan size; defaults to a fifth of the tribe.
        #[arg(long)]
        clan: Option<u64>,
        #[command(flatten)]
        mc: McArgs,
    },
}

#[derive(Args)]
struct McArgs {
    /// Monte Carlo draws per row; 0 skips the estimate.
    #[arg(long, default_value_t = 100_000)]
    draws: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    csv: PathBuf,
    /// Window width in seconds.
    #[arg(long, default_value_t = 30)]
    window: u64,
    /// Nodes that must agree.
    #[arg(long, default_value_t = 4)]
    required: usize,
    /// Percentages of the reference price, lo:hi:step.
    #[arg(long, default_value = "0.02:0.55:0.01")]
    dgrid: String,
    /// Reference price for the percentage grid.
    #[arg(long)]
    refprice: String,
    #[arg(long, default_value_t = 7)]
    nodes: u16,
    /// Exchanges assigned to each node.
    #[arg(long, default_value_t = 5)]
    per_node: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `a..b` (inclusive), `a..b:step` or `a,b,c`.
fn parse_list(s: &str) -> Result<Vec<u64>> {
    if let Some((lo, rest)) = s.split_once("..") {
        let (hi, step) = rest.split_once(':').unwrap_or((rest, "1"));
        let (lo, hi, step): (u64, u64, u64) = (lo.trim().parse()?, hi.trim().parse()?, step.trim().parse()?);
        if step == 0 {
            bail!("step must be positive in {s:?}");
        }
        return Ok((lo..=hi).step_by(step as usize).collect());
    }
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse::<u64>().with_context(|| format!("bad number {x:?}")))
        .collect()
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path, o: &Overrides) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path)?;
    o.apply(&mut cfg)?;
    Ok(cfg)
}

fn simulate(a: &SimulateArgs) -> Result<i32> {
    let cfg = load(&a.config, &a.overrides)?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&s| run_with_audit(&cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    let name = if cfg.name.is_empty() { "scenario" } else { cfg.name.as_str() };
    let mut code = EXIT_OK;
    for (report, audit) in &runs {
        let dir = a.out.join(format!("{name}-seed{}", report.seed));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("decisions.jsonl"), report.decisions_jsonl())?;
        fs::write(dir.join("metrics.csv"), report.metrics_csv())?;
        fs::write(dir.join("smr_audit.jsonl"), audit)?;
        fs::write(dir.join("report.json"), report.to_json())?;
        let max_err = report.max_error().map_or("-".to_string(), |e| e.to_string());
        println!(
            "seed {}: {} instances, cluster {}, fallback {}, max error {}, messages {}, violations {}, unconcluded {}, exit {}",
            report.seed,
            report.decisions.len(),
            report.count_via(dora_core::protocol::Via::Cluster),
            report.count_via(dora_core::protocol::Via::Fallback),
            max_err,
            report.counters.total_messages(),
            report.invariant_violations(),
            report.unconcluded,
            report.exit_code()
        );
        code = match (code, report.exit_code()) {
            (EXIT_INVARIANT, _) | (_, EXIT_INVARIANT) => EXIT_INVARIANT,
            (EXIT_LIVENESS, _) | (_, EXIT_LIVENESS) => EXIT_LIVENESS,
            _ => EXIT_OK,
        };
    }
    Ok(code)
}

fn run_sweep(a: &SweepArgs) -> Result<i32> {
    let cfg = load(&a.config, &a.overrides)?;
    let axis: SweepAxis = a.axis.parse()?;
    let rows = sweep(&cfg, axis, &parse_list(&a.values)?, &cfg.seeds)?;
    emit(a.out.as_deref(), &rows_csv(&rows))?;
    Ok(EXIT_OK)
}

fn prob_csv(axis: &str, rows: Vec<(u64, Probability, Option<McEstimate>)>) -> String {
    let mut out = format!("{axis},exact,probability,mc_estimate,mc_stderr\n");
    for (x, p, mc) in rows {
        let (e, s) = mc.map_or((String::new(), String::new()), |m| (format!("{:.6e}", m.estimate), format!("{:.3e}", m.stderr)));
        let _ = writeln!(out, "{x},{},{:.6e},{e},{s}", p.ratio_string(), p.value());
    }
    out
}

fn probability(cmd: &ProbCmd) -> Result<i32> {
    let mc = |m: &McArgs, f: &(dyn Fn(u64, u64) -> McEstimate + Sync)| (m.draws > 0).then(|| f(m.draws, m.seed));
    let csv = match cmd {
        ProbCmd::Family { tribe, byz, sizes, mc: m } => {
            let rows = parse_list(sizes)?
                .into_par_iter()
                .map(|n_a| {
                    let p = family_all_byzantine_prob(*tribe, *byz, n_a)?;
                    Ok((n_a, p, mc(m, &|d, s| mc_family_all_byzantine(*tribe, *byz, n_a, d, s))))
                })
                .collect::<Result<Vec<_>>>()?;
            prob_csv("n_a", rows)
        }
        ProbCmd::Clan { tribe, byz, clan, mc: m } => {
            let rows = parse_list(clan)?
                .into_par_iter()
                .map(|n_c| {
                    let p = clan_majority_fail_prob(*tribe, *byz, n_c)?;
                    Ok((n_c, p, mc(m, &|d, s| mc_clan_majority_fail(*tribe, *byz, n_c, d, s))))
                })
                .collect::<Result<Vec<_>>>()?;
            prob_csv("n_c", rows)
        }
        ProbCmd::Clans {
            tribe,
            byz_pct,
            clans,
            clan,
            mc: m,
        } => {
            let rows = parse_list(tribe)?
                .into_par_iter()
                .map(|n_t| {
                    let b = n_t * byz_pct / 100;
                    let n_c = clan.unwrap_or(n_t / 5);
                    let p = any_clan_fail_prob(n_t, b, n_c, *clans)?;
                    Ok((n_t, p, mc(m, &|d, s| mc_any_clan_fail(n_t, b, n_c, *clans, d, s))))
                })
                .collect::<Result<Vec<_>>>()?;
            prob_csv("n_t", rows)
        }
    };
    print!("{csv}");
    Ok(EXIT_OK)
}

fn run_replay(a: &ReplayArgs) -> Result<i32> {
    let refprice = Price::from_decimal_str(&a.refprice)?;
    let grid = d_grid(&a.dgrid, refprice)?;
    let ticks = ingest_csv(&a.csv).with_context(|| format!("reading {}", a.csv.display()))?;
    let cfg = ReplayConfig {
        window_s: a.window,
        nodes: a.nodes,
        per_node: a.per_node,
        required: a.required,
        seed: a.seed,
    };
    let out = replay(&ticks, &cfg, &grid)?;
    for (s, pct) in &out.null_pct {
        eprintln!("source {s}: no value in {pct:.2}% of windows");
    }
    emit(a.out.as_deref(), &formation_csv(&out.curve))?;
    Ok(EXIT_OK)
}

fn synth(a: &SynthArgs) -> Result<i32> {
    let spec = SynthSpec::load(&a.spec)?;
    let ticks = synth_generate(&spec, a.seed);
    let mut buf = Vec::new();
    write_ticks_csv(&ticks, &mut buf)?;
    emit(a.out.as_deref(), &String::from_utf8(buf)?)?;
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    }
    let result = match &cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Sweep(a) => run_sweep(a),
        Cmd::Probability(p) => probability(p),
        Cmd::Replay(a) => run_replay(a),
        Cmd::Synth(a) => synth(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
    }
}
