use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dora")).args(args).output().unwrap()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn family_table_has_one_row_per_size() {
    let o = dora(&["probability", "family", "--tribe", "100", "--byz", "33", "--sizes", "1..30", "--draws", "0"]);
    assert!(o.status.success());
    let s = stdout(&o);
    let lines: Vec<_> = s.lines().collect();
    assert_eq!(lines.len(), 31);
    assert!(lines[1].starts_with("1,33/100,3.300000e-1,"), "{}", lines[1]);
}

#[test]
fn clan_probability_is_exact() {
    let o = dora(&["probability", "clan", "--tribe", "10", "--byz", "3", "--clan", "3", "--draws", "0"]);
    assert!(o.status.success());
    // 3·C(3,2)·C(7,1) + C(3,3) = 22 of C(10,3) = 120
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("3,11/60,"));
}

#[test]
fn missing_flags_exit_two() {
    assert_eq!(dora(&["probability", "clan", "--tribe", "10"]).status.code(), Some(2));
    assert_eq!(dora(&["simulate"]).status.code(), Some(2));
}

#[test]
fn optimistic_simulation_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("optimistic.toml");
    let o = dora(&["simulate", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    for f in ["decisions.jsonl", "metrics.csv", "smr_audit.jsonl", "report.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let decisions = std::fs::read_to_string(run.join("decisions.jsonl")).unwrap();
    assert_eq!(decisions.lines().count(), 3);
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[population]\ntribe = 4\nclan = 9\n").unwrap();
    assert_eq!(dora(&["simulate", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn silent_aggregators_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("silent.toml");
    std::fs::write(
        &p,
        "seeds = [1]\n[population]\ntribe = 7\nclan = 3\naggregators = 2\n[faults]\nnodes = [5, 6]\nnode_strategy = { kind = \"silent\" }\n",
    )
    .unwrap();
    let o = dora(&["simulate", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_is_seeded() {
    let spec = scenario("volatile.synth.toml");
    let a = dora(&["synth", "--spec", spec.to_str().unwrap(), "--seed", "7"]);
    let b = dora(&["synth", "--spec", spec.to_str().unwrap(), "--seed", "7"]);
    let c = dora(&["synth", "--spec", spec.to_str().unwrap(), "--seed", "8"]);
    assert!(a.status.success());
    assert!(stdout(&a).starts_with("source,timestamp_ms,price\n"));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn replay_of_identical_exchanges_always_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ticks.csv");
    let mut body = String::from("source,timestamp_ms,price\n");
    for w in 0..4u64 {
        for s in 0..7 {
            body.push_str(&format!("{s},{},100.5\n", w * 30_000 + 1_000));
        }
    }
    std::fs::write(&csv, body).unwrap();
    let o = dora(&["replay", "--csv", csv.to_str().unwrap(), "--refprice", "100", "--dgrid", "0.02:0.04:0.01"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        stdout(&o),
        "d_microunits,d_pct,windows,clusters_formed,fraction\n\
         20000,0.020000,4,4,1.000000\n\
         30000,0.030000,4,4,1.000000\n\
         40000,0.040000,4,4,1.000000\n"
    );
}

#[test]
fn sweep_emits_one_row_per_value_and_seed() {
    let cfg = scenario("optimistic.toml");
    let o = dora(&["sweep", cfg.to_str().unwrap(), "--axis", "d", "--values", "0,5000000", "--seeds", "1,2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.starts_with("axis,value,seed,"));
    assert_eq!(s.lines().count(), 5);
    assert_eq!(dora(&["sweep", cfg.to_str().unwrap(), "--axis", "latency", "--values", "1"]).status.code(), Some(2));
}
