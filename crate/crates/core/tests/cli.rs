//! End-to-end tests of the `mlglm` binary: exit codes, config strictness,
//! output shapes, and seed/thread behavior.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tmp_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlglm"))
        .args(args)
        .output()
        .unwrap()
}

const SLM_GAUSSIAN: &str = r#"
seed = 1

[network]
prior = { gaussian = { mean = 0.0, variance = 1.0 } }

[[network.layers]]
alpha = 2.0
activation = { awgn = { variance = 0.1 } }
"#;

#[test]
fn predict_matches_quadratic_oracle_in_stdout() {
    let dir = tmp_dir("cli_predict");
    let cfg = write_config(&dir, "slm.toml", SLM_GAUSSIAN);
    let out = run(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    let eta_line = stdout
        .lines()
        .find(|l| l.starts_with("eta"))
        .expect("eta line");
    let eta: f64 = eta_line.split('=').nth(1).unwrap().trim().parse().unwrap();
    // Positive root of 2 eta^2 + 0.8 eta - 0.2 = 0.
    let oracle = (-0.8 + (0.64f64 + 1.6).sqrt()) / 4.0;
    assert!(
        (eta - oracle).abs() < 1e-8,
        "printed eta {eta} vs oracle {oracle}"
    );
    assert!(stdout.contains("converged  = true"));
}

#[test]
fn predict_zero_information_network_reports_prior_power() {
    let dir = tmp_dir("cli_zero_info");
    let cfg = write_config(
        &dir,
        "zero.toml",
        r#"
[network]
prior = { discrete = { atoms = [[-1.0, 0.5], [1.0, 0.5]] } }

[[network.layers]]
alpha = 1.0
activation = { discrete_map = { levels = [1.0], thresholds = [] } }
"#,
    );
    let out = run(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mse_line = stdout
        .lines()
        .find(|l| l.starts_with("avg_mse"))
        .expect("avg_mse line");
    let mse: f64 = mse_line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!((mse - 1.0).abs() < 1e-8, "avg_mse {mse}");
}

#[test]
fn predict_writes_csv_when_requested() {
    let dir = tmp_dir("cli_predict_csv");
    let cfg = write_config(&dir, "slm.toml", SLM_GAUSSIAN);
    let out_path = dir.join("state.csv");
    let out = run(&[
        "predict",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "layer,alpha,t_x,d,q,d_tilde,eta,avg_mse,iterations,converged"
    );
    assert_eq!(lines.count(), 1);
}

#[test]
fn malformed_config_exits_2_and_names_the_key() {
    let dir = tmp_dir("cli_malformed");
    let cfg = write_config(
        &dir,
        "bad.toml",
        &format!("{SLM_GAUSSIAN}\n[solver]\nbanana = 3\n"),
    );
    let out = run(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("banana"), "diagnostic was: {stderr}");

    // Missing file is also a config error.
    let out = run(&[
        "predict",
        "--config",
        dir.join("nope.toml").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_convergence_exits_3_with_report() {
    let dir = tmp_dir("cli_noconv");
    let cfg = write_config(
        &dir,
        "hard.toml",
        &format!("{SLM_GAUSSIAN}\n[solver]\nmax_iter = 1\ntol = 1e-15\n"),
    );
    let out = run(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("converged  = false"));
}

const VALIDATE_BINARY: &str = r#"
seed = 5

[network]
prior = { discrete = { atoms = [[-1.0, 0.5], [1.0, 0.5]] } }

[[network.layers]]
alpha = 2.0
activation = { awgn = { variance = 0.2 } }

[simulate]
dims = [8, 16]
n_trials = 60
oracle = "brute_force"
"#;

#[test]
fn validate_feasible_config_passes() {
    let dir = tmp_dir("cli_validate");
    let cfg = write_config(&dir, "val.toml", VALIDATE_BINARY);
    let out_path = dir.join("moments.csv");
    let out = run(&[
        "validate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(out.status.code(), Some(0), "stdout: {stdout}");
    // Default moment set is four rows.
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "i,j,empirical,std_error,predicted,z_score"
    );
    assert_eq!(csv.lines().count(), 5);
    assert!(stdout.contains("eta"));
}

#[test]
fn validate_infeasible_dims_exit_4_with_budget() {
    let dir = tmp_dir("cli_infeasible");
    let cfg = write_config(
        &dir,
        "big.toml",
        &VALIDATE_BINARY.replace("dims = [8, 16]", "dims = [24, 48]"),
    );
    let out = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(
        stderr.contains("2^24") || stderr.contains("16777216"),
        "budget arithmetic missing: {stderr}"
    );
    assert!(stderr.contains("1048576"), "budget missing: {stderr}");
}

#[test]
fn simulate_zero_trials_emits_header_only() {
    let dir = tmp_dir("cli_sim_zero");
    let cfg = write_config(
        &dir,
        "zero_trials.toml",
        &VALIDATE_BINARY.replace("n_trials = 60", "n_trials = 0"),
    );
    let out_path = dir.join("trials.csv");
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(csv, "trial,mse,m11,m02,m20,m22\n");
}

#[test]
fn simulate_seed_and_thread_behavior() {
    let dir = tmp_dir("cli_sim_seed");
    let cfg = write_config(&dir, "sim.toml", VALIDATE_BINARY);
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    let c = dir.join("c.csv");
    let d = dir.join("d.csv");
    for (path, extra) in [
        (&a, vec![]),
        (&b, vec!["--seed", "9"]),
        (&c, vec!["--threads", "1"]),
        (&d, vec!["--threads", "4"]),
    ] {
        let mut args = vec![
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            path.to_str().unwrap(),
        ];
        args.extend(extra);
        let out = run(&args);
        assert_eq!(out.status.code(), Some(0));
    }
    let (a, b, c, d) = (
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        std::fs::read(&c).unwrap(),
        std::fs::read(&d).unwrap(),
    );
    assert_ne!(a, b, "seed override must change the batch");
    assert_eq!(a, c, "default threads is 1");
    assert_eq!(c, d, "thread count must not change the bytes");
}

#[test]
fn sweep_emits_one_row_per_value_with_ser() {
    let dir = tmp_dir("cli_sweep");
    let cfg = write_config(
        &dir,
        "sweep.toml",
        r#"
[network]
prior = { discrete = { atoms = [[-1.0, 0.5], [1.0, 0.5]] } }

[[network.layers]]
alpha = 2.0
activation = { awgn = { variance = 1.0 } }

[sweep]
axis = "noise_variance"
values = [1.0, 0.5, 0.1]
"#,
    );
    let out_path = dir.join("sweep.csv");
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,eta,avg_mse,ser,iterations,converged");
    assert_eq!(lines.len(), 4);
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert!(!fields[3].is_empty(), "ser column empty for binary prior");
        assert_eq!(fields[5], "true");
    }
    // Rerunning sweeps is byte-stable too.
    let out2_path = dir.join("sweep2.csv");
    let out2 = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out2_path.to_str().unwrap(),
    ]);
    assert_eq!(out2.status.code(), Some(0));
    assert_eq!(
        std::fs::read(&out_path).unwrap(),
        std::fs::read(&out2_path).unwrap()
    );
}

#[test]
fn sweep_requires_its_section() {
    let dir = tmp_dir("cli_sweep_missing");
    let cfg = write_config(&dir, "nosweep.toml", SLM_GAUSSIAN);
    let out = run(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grid_order_override_is_validated() {
    let dir = tmp_dir("cli_grid_order");
    let cfg = write_config(&dir, "slm.toml", SLM_GAUSSIAN);
    let ok = run(&[
        "predict",
        "--config",
        cfg.to_str().unwrap(),
        "--grid-order",
        "128",
    ]);
    assert_eq!(ok.status.code(), Some(0));
    let bad = run(&[
        "predict",
        "--config",
        cfg.to_str().unwrap(),
        "--grid-order",
        "1",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let stderr = String::from_utf8(bad.stderr).unwrap();
    assert!(stderr.contains("2..=512"), "diagnostic: {stderr}");
}

#[test]
fn simulate_supports_the_lmmse_oracle() {
    let dir = tmp_dir("cli_lmmse");
    let cfg = write_config(
        &dir,
        "lmmse.toml",
        r#"
seed = 3

[network]
prior = { gaussian = { mean = 0.0, variance = 1.0 } }

[[network.layers]]
alpha = 1.5
activation = { awgn = { variance = 0.1 } }

[simulate]
dims = [16, 24]
n_trials = 8
oracle = "lmmse"
"#,
    );
    let out_path = dir.join("lmmse.csv");
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(csv.lines().count(), 9);

    // The LMMSE oracle refuses non-Gaussian configurations.
    let bad_cfg = write_config(
        &dir,
        "lmmse_bad.toml",
        &VALIDATE_BINARY.replace("oracle = \"brute_force\"", "oracle = \"lmmse\""),
    );
    let out = run(&["simulate", "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
