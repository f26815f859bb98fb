use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const GRID: &str = r#"
name = "grid"
seeds = [0, 1, 2]
output_dir = "out"

[environment]
kind = "gridworld"
width = 4
height = 2
hazards = [[1, 0], [2, 0]]
goal = [3, 0]
gamma = 0.9
cost_limit = 1.0

[trainer]
total_iters = 40
init_logit_scale = 0.5
"#;

fn pcrpo(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcrpo"))
        .args(args)
        .current_dir(root)
        .env_remove("PCRPO_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace(config: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("grid.toml");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn csv_column(path: &Path, column: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let out = pcrpo(&["train", "does-not-exist.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does-not-exist.toml"), "{}", stderr(&out));
}

#[test]
fn malformed_config_and_unknown_keys_exit_2() {
    let (dir, path) = workspace(&GRID.replace("gamma = 0.9", "gamma = 0.9\ncolour = 3"));
    let out = pcrpo(&["train", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let (dir, path) = workspace(GRID);
    let out = pcrpo(&["train", path.to_str().unwrap(), "--set", "trainer.eta=-1"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = pcrpo(&["train", path.to_str().unwrap(), "--set", "slack=nonsense"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn three_seed_run_writes_logs_and_aggregate() {
    let (dir, path) = workspace(GRID);
    let out = pcrpo(&["train", path.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("out");
    let logs: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("seed_") && n.ends_with(".csv"))
        .collect();
    assert_eq!(logs.len(), 3, "{logs:?}");
    for s in 0..3 {
        assert_eq!(csv_column(&run.join(format!("seed_{s}.csv")), "iter").len(), 40);
        assert!(run.join(format!("seed_{s}_policy.json")).exists());
    }
    assert_eq!(csv_column(&run.join("aggregate.csv"), "v_r_mean").len(), 40);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_mode_flag_is_echoed_in_summary() {
    let (dir, path) = workspace(&GRID.replace("seeds = [0, 1, 2]", "seeds = [7]"));
    let out = pcrpo(
        &["train", path.to_str().unwrap(), "--eval-mode", "td", "--set", "trainer.k_td=2000", "--out", "td"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("td/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["trainer"]["eval_mode"], "td");
    assert_eq!(summary["config"]["trainer"]["k_td"], 2000);

    let out = pcrpo(&["train", path.to_str().unwrap(), "--eval-mode", "exact", "--out", "ex"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ex/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["trainer"]["eval_mode"], "exact");
}

#[test]
fn reruns_are_byte_identical_across_job_counts() {
    let (dir, path) = workspace(GRID);
    let p = path.to_str().unwrap();
    assert!(pcrpo(&["train", p, "--out", "a", "--jobs", "1"], dir.path()).status.success());
    assert!(pcrpo(&["train", p, "--out", "b", "--jobs", "3"], dir.path()).status.success());
    for name in ["seed_0.csv", "seed_1.csv", "seed_2.csv", "aggregate.csv", "seed_2_policy.json"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
}

#[test]
fn output_root_env_anchors_relative_dirs() {
    let (dir, path) = workspace(&GRID.replace("seeds = [0, 1, 2]", "seeds = [0]"));
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_pcrpo"))
        .args(["train", path.to_str().unwrap()])
        .current_dir(dir.path())
        .env("PCRPO_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(root.join("out/seed_0.csv").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn slack_sweep_writes_one_dir_per_variant_and_comparison() {
    let (dir, _) = workspace(&GRID.replace("total_iters = 40", "total_iters = 300"));
    fs::write(
        dir.path().join("sweep.toml"),
        "base = \"grid.toml\"\naxis = \"slack\"\nvalues = [\"2SR\", \"3SR-G\", \"4S-F\", \"4S-G\"]\noutput_dir = \"sw\"\n",
    )
    .unwrap();
    let out = pcrpo(&["sweep", "sweep.toml"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let sw = dir.path().join("sw");
    for v in ["2SR", "3SR-G", "4S-F", "4S-G"] {
        assert!(sw.join(format!("slack={v}")).join("aggregate.csv").exists(), "{v}");
    }
    let comparison = sw.join("comparison.csv");
    assert_eq!(csv_column(&comparison, "status"), vec!["ok"; 4]);

    // The decaying band ends closer to the limit than the fixed band.
    let values = csv_column(&comparison, "value");
    let costs: Vec<f64> = csv_column(&comparison, "final_cost_mean").iter().map(|c| c.parse().unwrap()).collect();
    let cost = |v: &str| costs[values.iter().position(|x| x == v).unwrap()];
    assert!((cost("4S-G") - 1.0).abs() < (cost("4S-F") - 1.0).abs(), "4S-G {} vs 4S-F {}", cost("4S-G"), cost("4S-F"));
}

#[test]
fn sweep_over_unknown_axis_exits_2() {
    let (dir, _) = workspace(GRID);
    fs::write(dir.path().join("sweep.toml"), "base = \"grid.toml\"\naxis = \"trainer.warp\"\nvalues = [1, 2]\n")
        .unwrap();
    let out = pcrpo(&["sweep", "sweep.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("trainer.warp"), "{}", stderr(&out));
}

#[test]
fn verification_suites_exit_0() {
    let dir = TempDir::new().unwrap();
    let out = pcrpo(&["verify-gradients", "--samples", "500", "--dims", "2,8"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS") && !text.contains("FAIL"), "{text}");

    let out = pcrpo(&["verify-theorems", "--instances", "20"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let out = pcrpo(&["verify-gradients", "--samples", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_writes_loadable_spec_and_q_table() {
    let (dir, path) = workspace(GRID);
    let out = pcrpo(
        &["export", path.to_str().unwrap(), "--spec-out", "spec.json", "--q-out", "q.csv", "--channel", "cost0"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let spec = pcrpo_core::CmdpSpec::from_json(&fs::read_to_string(dir.path().join("spec.json")).unwrap()).unwrap();
    assert_eq!((spec.n_states, spec.n_actions), (8, 4));
    assert_eq!(csv_column(&dir.path().join("q.csv"), "qhat").len(), 32);

    // A spec_file environment round-trips through the exported document.
    let cfg = "seeds = [0]\n[environment]\nkind = \"spec_file\"\npath = \"spec.json\"\n[trainer]\ntotal_iters = 5\n";
    fs::write(dir.path().join("from_spec.toml"), cfg).unwrap();
    let out = pcrpo(&["train", "from_spec.toml", "--out", "fs"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let out = pcrpo(&["export", path.to_str().unwrap(), "--q-out", "q.csv", "--channel", "cost9"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
