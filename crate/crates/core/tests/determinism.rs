use std::fs;

use fedwba::artifacts::run_to_dir;
use fedwba::config::RunConfig;
use fedwba::federation::{run_experiment, AggregationMode};
use fedwba::par::with_workers;
use fedwba::Exec;

fn toy(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.federation.num_clients = 5;
    c.federation.sample_size = 3;
    c.federation.rounds = 3;
    c.federation.particles = 4;
    c.federation.seed = seed;
    c.data.classes = 5;
    c.data.per_class = 20;
    c.data.dim = 6;
    c.data.labels_per_client = 2;
    c.model.hidden_dim = 7;
    c.svgd.iterations = 4;
    c
}

fn artifact_bytes(cfg: &RunConfig, exec: Exec, workers: usize) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    with_workers(workers, || run_to_dir(cfg, dir.path(), exec)).unwrap();
    let mut files = vec!["rounds.csv".to_string(), "config.toml".into(), "partition.json".into(), "ensembles/global.fwba".into()];
    files.extend((0..cfg.federation.num_clients).map(|k| format!("ensembles/client_{k:03}.fwba")));
    files.extend((0..cfg.federation.num_clients).map(|k| format!("reliability/client_{k:03}.csv")));
    files
        .into_iter()
        .map(|f| {
            let b = fs::read(dir.path().join(&f)).unwrap();
            (f, b)
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let a = artifact_bytes(&toy(11), Exec::Parallel, 0);
    let b = artifact_bytes(&toy(11), Exec::Parallel, 0);
    assert_eq!(a, b);
}

#[test]
fn worker_count_and_exec_mode_do_not_change_results() {
    let base = artifact_bytes(&toy(5), Exec::Sequential, 1);
    for workers in [1, 2, 4] {
        assert_eq!(artifact_bytes(&toy(5), Exec::Parallel, workers), base, "workers={workers}");
    }
}

#[test]
fn different_seeds_differ() {
    let a = artifact_bytes(&toy(1), Exec::Parallel, 0);
    let b = artifact_bytes(&toy(2), Exec::Parallel, 0);
    assert_ne!(a[0].1, b[0].1);
}

#[test]
fn config_snapshot_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy(21);
    cfg.federation.mode = AggregationMode::ParamAvg;
    run_to_dir(&cfg, &dir.path().join("first"), Exec::Parallel).unwrap();
    let snap = RunConfig::load(&dir.path().join("first/config.toml")).unwrap();
    run_to_dir(&snap, &dir.path().join("second"), Exec::Parallel).unwrap();
    for f in ["rounds.csv", "ensembles/global.fwba"] {
        assert_eq!(
            fs::read(dir.path().join("first").join(f)).unwrap(),
            fs::read(dir.path().join("second").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn round_reports_are_reproducible_in_memory() {
    let run = || {
        let cfg = toy(8);
        let data = cfg.load_dataset().unwrap();
        let shape = cfg.shape_for(&data).unwrap();
        let shards = cfg.partition(&data).unwrap();
        let out = run_experiment(&cfg.federation_config(), shape, shards, Exec::Parallel, |_, _, _| Ok(())).unwrap();
        out.reports
            .iter()
            .map(|r| (r.scheduled_clients.clone(), r.per_client_accuracy.clone(), r.mean_w2_client_to_global.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
