use std::path::Path;

use proptest::prelude::*;

use dora_core::analysis::{family_all_byzantine_prob, deviation_report};
use dora_core::netsim::adversary::ByzantineStrategy;
use dora_core::netsim::config::{DelayModel, FaultMode};
use dora_core::netsim::report::{EXIT_LIVENESS, EXIT_OK};
use dora_core::netsim::sweep::{rows_csv, sweep, SweepAxis};
use dora_core::netsim::{run_scenario, ScenarioConfig};
use dora_core::protocol::Via;
use dora_core::types::Price;

fn scenario(name: &str) -> ScenarioConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"));
    ScenarioConfig::load(&p).unwrap()
}

fn small(n_t: u16, n_c: u16, n_a: u16) -> ScenarioConfig {
    let mut c = ScenarioConfig::from_toml_str(&format!(
        "[population]\ntribe = {n_t}\nclan = {n_c}\naggregators = {n_a}\n"
    ))
    .unwrap();
    c.protocol.agreement_distance = 5_000_000;
    c
}

#[test]
fn noiseless_honest_clan_concludes_on_the_truth() {
    let mut c = small(4, 3, 1);
    c.sources.noise = 0;
    let r = run_scenario(&c, 3).unwrap();
    assert_eq!(r.exit_code(), EXIT_OK);
    let d = &r.decisions[0];
    assert_eq!(d.via, Some(Via::Cluster));
    assert_eq!(d.s, Some(Price::from_micros(c.trajectory.base)));
    assert_eq!(d.error, Some(0));
}

#[test]
fn optimistic_scenario_concludes_every_round_through_the_clan() {
    let c = scenario("optimistic");
    for &s in &c.seeds {
        let r = run_scenario(&c, s).unwrap();
        assert_eq!(r.count_via(Via::Cluster), c.protocol.rounds as usize);
        assert_eq!(r.exit_code(), EXIT_OK);
    }
}

#[test]
fn fallback_forcing_scenario_always_falls_back() {
    let c = scenario("fallback_forcing");
    for &s in &c.seeds {
        let r = run_scenario(&c, s).unwrap();
        assert_eq!(r.count_via(Via::Fallback), c.protocol.rounds as usize);
        assert!(r.decisions.iter().all(|d| d.fallback_triggered && d.validity_ok));
        assert!(r.counters.fallback.values().map(|k| k.messages).sum::<u64>() > 0);
    }
}

#[test]
fn cluster_poison_stays_within_bounds_but_shows_deviation() {
    let c = scenario("cluster_poison");
    let d = c.protocol.agreement_distance;
    let r = run_scenario(&c, c.seeds[0]).unwrap();
    let rows = deviation_report(&r, d);
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|x| !x.bound_violated && !x.widened_violated && !x.fallback_violated));
    assert!(rows.iter().any(|x| x.exceeds_spread));
}

#[test]
fn all_silent_aggregators_stall_the_round() {
    let mut c = small(7, 3, 2);
    c.faults.nodes = vec![5, 6];
    c.faults.node_strategy = ByzantineStrategy::Silent;
    let r = run_scenario(&c, 1).unwrap();
    assert!(!r.preconditions.honest_aggregator);
    assert_eq!(r.smr_entries, 0);
    assert!(r.unconcluded > 0);
    assert_eq!(r.exit_code(), EXIT_LIVENESS);
}

#[test]
fn withheld_posts_are_covered_by_the_honest_aggregator() {
    let mut c = small(7, 3, 2);
    c.faults.nodes = vec![6];
    c.faults.node_strategy = ByzantineStrategy::WithholdPost;
    let r = run_scenario(&c, 2).unwrap();
    assert_eq!(r.exit_code(), EXIT_OK);
}

#[test]
fn equivocation_produces_two_proposals_and_one_outcome() {
    let mut c = small(7, 3, 2);
    c.faults.nodes = vec![2, 6];
    c.faults.node_strategy = ByzantineStrategy::Equivocate;
    c.sources.noise = 1_000_000;
    let r = run_scenario(&c, 5).unwrap();
    assert_eq!(r.agreement_violations, 0);
    assert_eq!(r.unconcluded, 0);
    // honest clan members vote on every distinct valid proposal
    assert!(r.counters.kind(false, dora_core::netsim::report::MsgKind::VProp).messages >= 3 * 2);
}

#[test]
fn same_seed_same_report() {
    let c = scenario("cluster_poison");
    let a = run_scenario(&c, 4).unwrap().to_json();
    let b = run_scenario(&c, 4).unwrap().to_json();
    assert_eq!(a, b);
    assert_ne!(a, run_scenario(&c, 5).unwrap().to_json());
}

#[test]
fn zero_rounds_send_nothing() {
    let mut c = small(4, 3, 1);
    c.protocol.rounds = 0;
    let r = run_scenario(&c, 0).unwrap();
    assert_eq!(r.counters.total_bytes(), 0);
    assert!(r.decisions.is_empty());
}

#[test]
fn event_budget_is_reported() {
    let mut c = small(4, 3, 1);
    c.limits.max_events = 5;
    let r = run_scenario(&c, 0).unwrap();
    assert!(r.budget_exhausted);
    assert_eq!(r.exit_code(), EXIT_LIVENESS);
}

#[test]
fn sweep_over_d_is_monotone_in_cluster_commits() {
    let mut c = small(7, 3, 2);
    let w = 2_000_000;
    c.sources.noise = w;
    c.protocol.rounds = 4;
    let seeds: Vec<u64> = (0..6).collect();
    let rows = sweep(&c, SweepAxis::D, &[0, w, 2 * w, 4 * w], &seeds).unwrap();
    let per_value: Vec<usize> = [0, w, 2 * w, 4 * w]
        .iter()
        .map(|v| rows.iter().filter(|r| r.value == *v).map(|r| r.via_cluster).sum())
        .collect();
    assert!(per_value.windows(2).all(|p| p[0] <= p[1]), "{per_value:?}");
    assert!(rows_csv(&rows).starts_with("axis,value,seed,"));
}

#[test]
fn sweep_edge_cases() {
    let c = small(4, 3, 1);
    assert!(sweep(&c, SweepAxis::D, &[1, 2], &[]).unwrap().is_empty());
    assert!("latency".parse::<SweepAxis>().is_err());
    assert!(sweep(&c, SweepAxis::Clan, &[9], &[0]).is_err());
}

#[test]
fn family_size_sweep_tracks_the_hypergeometric() {
    let mut c = small(30, 7, 1);
    c.faults.mode = FaultMode::Random;
    c.faults.count = 9;
    c.faults.node_strategy = ByzantineStrategy::Silent;
    let seeds: Vec<u64> = (0..300).collect();
    let mut prev = 0.0;
    for n_a in [1u16, 3, 6] {
        let mut cfg = c.clone();
        cfg.population.aggregators = n_a;
        let ok = seeds
            .iter()
            .filter(|&&s| cfg.roles(s).unwrap().honest_aggregators() > 0)
            .count() as f64
            / seeds.len() as f64;
        let want = 1.0 - family_all_byzantine_prob(30, 9, n_a.into()).unwrap().value();
        let sigma = (want * (1.0 - want) / seeds.len() as f64).sqrt();
        assert!((ok - want).abs() <= 3.0 * sigma + 1e-9, "n_a {n_a}: {ok} vs {want}");
        assert!(ok >= prev);
        prev = ok;
    }
}

#[test]
fn fallback_runs_scale_with_the_tribe() {
    let bytes = |n_t: u16| {
        let mut c = small(n_t, 3, 2);
        c.adversary.value = DelayModel::Fixed { ms: 120_000 };
        c.protocol.round_interval_ms = 200_000;
        let r = run_scenario(&c, 1).unwrap();
        r.counters.fallback.values().map(|k| k.bytes).sum::<u64>() as f64
    };
    let (a, b) = (bytes(7), bytes(14));
    // doubling the tribe should roughly quadruple fallback traffic
    assert!(b / a > 2.5, "{a} -> {b}");
}

fn arb_strategy() -> impl Strategy<Value = ByzantineStrategy> {
    (0usize..8).prop_map(|i| ByzantineStrategy::catalog(5_000_000)[i].clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn invariants_hold_for_random_worlds(
        n_c in prop::sample::select(vec![3u16, 5]),
        n_a in 1u16..4,
        byz_clan in 0usize..3,
        strategy in arb_strategy(),
        noise in 0u64..8_000_000,
        d in 0u64..10_000_000,
        slow in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let n_t = 10u16;
        let mut c = small(n_t, n_c, n_a);
        c.protocol.agreement_distance = d;
        c.sources.noise = noise;
        c.protocol.rounds = 2;
        c.protocol.round_interval_ms = 200_000;
        let f_c = ((n_c - 1) / 2) as usize;
        c.faults.nodes = (0..byz_clan.min(f_c) as u16).collect();
        c.faults.nodes.push(n_t - 1);
        c.faults.node_strategy = strategy;
        if slow {
            c.adversary.value = DelayModel::Uniform { lo_ms: 1_000, hi_ms: 4_000 };
        }
        let r = run_scenario(&c, seed).unwrap();
        prop_assert_eq!(r.causality_violations, 0);
        prop_assert_eq!(r.honest_sends, r.honest_deliveries);
        prop_assert_eq!(r.agreement_violations, 0);
        prop_assert_eq!(r.validity_violations, 0);
        prop_assert_eq!(r.error_bound_violations, 0);
        if n_a > 1 {
            prop_assert_eq!(r.unconcluded, 0);
        }
    }
}
