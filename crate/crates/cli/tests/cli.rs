//! End-to-end tests of the `fedmm` binary: artifacts, flag precedence,
//! determinism and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
blocks = 2
nodes_per_block = 10
d_img = 6
d_txt = 5
latent_dim = 3
[federation]
clients = 2
rounds = 3
[model]
d = 8
heads = 2
epochs = 1
"#;

fn fedmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmm")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_three_rows_and_records_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = fedmm(&["run", "--config", &cfg, "--mode", "fedavg", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("round,client_frac,omega_min,omega_max,loss_task,loss_rec,loss_align,loss_route,metric_1,metric_2,wall_ms\n"));
    assert_eq!(fs::read_to_string(out.join("rounds.jsonl")).unwrap().lines().count(), 3);
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"mode\": \"fedavg\""), "{summary}");
    assert!(summary.contains("\"best\"") && summary.contains("\"last\""));
}

#[test]
fn identical_runs_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut files = Vec::new();
    for (i, workers) in ["1", "1", "4", "4"].iter().enumerate() {
        let out = dir.path().join(format!("r{i}"));
        let o = fedmm(&["run", "--config", &cfg, "--seed", "5", "--workers", workers, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push((fs::read(out.join("metrics.csv")).unwrap(), fs::read(out.join("rounds.jsonl")).unwrap()));
    }
    assert!(files.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn seed_flag_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("seed = 1\n{SMALL}"));
    let run = |extra: &[&str], name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["run", "--config", cfg.as_str(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert!(fedmm(&args).status.success());
        fs::read_to_string(out.join("summary.json")).unwrap()
    };
    assert!(run(&[], "a").contains("\"seed\": 1"));
    assert!(run(&["--seed", "9"], "b").contains("\"seed\": 9"));
}

#[test]
fn validation_errors_exit_with_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[missingness]\nrate = 1.5\n");
    let o = fedmm(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missingness.rate"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "[model]\nwidth = 3\n");
    let o = fedmm(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("width"));

    assert_eq!(fedmm(&["run", "--mode", "median"]).status.code(), Some(1));
    assert_eq!(fedmm(&["run", "--task", "gc"]).status.code(), Some(1));
    assert_eq!(fedmm(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(fedmm(&["theory-check", "--trials", "10"]).status.code(), Some(1));
}

#[test]
fn run_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("unlabeled.json");
    let mut g = fedmm::graphdata::generate_sbm_multimodal(
        &fedmm::graphdata::SbmConfig { blocks: 2, nodes_per_block: 6, p_in: 0.5, p_out: 0.1, d_img: 3, d_txt: 3, latent_dim: 2, noise: 0.5 },
        0,
    )
    .unwrap();
    g.labels = None;
    fedmm::graphdata::save_graph(&g, &graph).unwrap();
    let cfg = write_config(dir.path(), &format!("[data]\ngraph_file = {:?}\n[federation]\nclients = 2\nrounds = 1\n", graph.to_str().unwrap()));
    let o = fedmm(&["run", "--config", &cfg, "--task", "nc", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_a_loadable_graph() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = fedmm(&["gen-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = fedmm::graphdata::load_graph(dir.path().join("graph.json")).unwrap();
    assert_eq!(g.num_nodes, 20);
}

#[test]
fn verification_subcommands_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = fedmm(&["metrics-oracle", "--out", out]);
    assert!(o.status.success());
    let report = fs::read_to_string(dir.path().join("metrics-oracle.json")).unwrap();
    assert!(report.contains("\"agreed\": 100") && report.contains("\"passed\": true"), "{report}");

    let o = fedmm(&["theory-check", "--configs", "20", "--trials", "1000"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"holds_fraction\""));

    let o = fedmm(&["gradcheck", "--seeds", "1", "--sample", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"max_rel_error\""));
}
