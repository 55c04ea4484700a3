use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"
[federation]
num_clients = 3
sample_size = 2
rounds = 2
particles = 3

[svgd]
iterations = 3

[data]
classes = 4
per_class = 15
dim = 4
labels_per_client = 2

[model]
hidden_dim = 5
"#;

fn fedwba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedwba"))
        .args(args)
        .env_remove("FEDWBA_OUT")
        .output()
        .expect("spawn fedwba")
}

fn write_toy(dir: &Path) -> String {
    let p = dir.join("toy.toml");
    fs::write(&p, TOY).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_2_and_names_path() {
    let o = fedwba(&["run", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/cfg.toml"), "{}", stderr(&o));
}

#[test]
fn invalid_field_exits_2_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[federation]\nnum_clients = 2\nsample_size = 5\n").unwrap();
    let o = fedwba(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("federation.sample_size"), "{}", stderr(&o));
}

#[test]
fn run_writes_parseable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy(dir.path());
    let out = dir.path().join("out");
    let o = fedwba(&["run", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.json", "config.toml", "partition.json", "rounds.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"], 2);
    assert!(summary["final_mean_acc"].is_f64());
    assert!(summary["comm_bytes_total"].is_u64());
    assert!(out.join("ensembles/global.fwba").exists());
    assert!(out.join("ensembles/client_002.fwba").exists());
}

#[test]
fn same_seed_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = fedwba(&["run", &cfg, "--seed", "7", "--out-dir", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["rounds.csv", "ensembles/global.fwba", "ensembles/client_000.fwba", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn out_dir_flag_beats_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy(dir.path());
    let env_dir = dir.path().join("env");
    let flag_dir = dir.path().join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_fedwba"))
        .args(["run", &cfg])
        .env("FEDWBA_OUT", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_dir.join("rounds.csv").exists());
    let o = Command::new(env!("CARGO_BIN_EXE_fedwba"))
        .args(["run", &cfg, "--out-dir", flag_dir.to_str().unwrap()])
        .env("FEDWBA_OUT", dir.path().join("unused"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(flag_dir.join("rounds.csv").exists());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn print_defaults_emits_toml() {
    let o = fedwba(&["--print-defaults"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[federation]") && text.contains("step_eta = 0.01"), "{text}");
}

#[test]
fn unknown_axis_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy(dir.path());
    let o = fedwba(&["ablate", "temperature", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown axis"), "{}", stderr(&o));
}

#[test]
fn ablate_particles_reports_comm_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy(dir.path());
    let out = dir.path().join("abl");
    let o = fedwba(&["ablate", "particles", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation_particles.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mut per_round = Vec::new();
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        per_round.push(f[col("comm_bytes_per_round")].parse::<u64>().unwrap());
        assert_eq!(f[col("axis")], "particles");
    }
    assert!(per_round[0] < per_round[1] && per_round[1] < per_round[2], "{per_round:?}");
}

#[test]
fn validate_fails_with_corrupted_step() {
    let o = fedwba(&["validate", "--kl-eta", "10"]);
    assert_eq!(o.status.code(), Some(1));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("[FAIL] kl-monotonicity"), "{out}");
    assert!(stderr(&o).contains("kl-monotonicity"), "{}", stderr(&o));
}

#[test]
fn validate_passes_by_default() {
    let o = fedwba(&["validate"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{out}\n{}", stderr(&o));
    assert_eq!(out.matches("[PASS]").count(), 3, "{out}");
}
