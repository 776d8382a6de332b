//! Black-box tests of the `spdet` binary: flag surface, output schemas,
//! exit-code contract, and the statistical sanity of small end-to-end runs.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn spdet() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spdet"));
    cmd.env_remove("SPDET_OUT_DIR");
    cmd
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("spdet-cli-{name}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout_of(output: &Output) -> String {
    assert!(
        output.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout.clone()).unwrap()
}

fn csv_rows(path: &PathBuf, header: &str) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(header), "csv header mismatch in {}", path.display());
    lines
        .map(|line| line.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn version_names_library_and_schema() {
    let output = spdet().arg("--version").output().unwrap();
    assert_eq!(stdout_of(&output).trim(), "spdet 0.1.0 (spec-schema 1.0)");
}

#[test]
fn simulate_single_user_noiseless_decodes_exactly() {
    let out = tmp_dir("sim-exact").join("trace.csv");
    let output = spdet()
        .args(["simulate", "--n", "4", "--k", "1", "--sigma0", "0", "--sigma", "0.1"])
        .args(["--mode", "sp", "--seed", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let text = stdout_of(&output);
    assert!(text.contains("ber 0\n"), "stdout was: {text}");
    assert!(text.contains("converged true"), "stdout was: {text}");
    let rows = csv_rows(&out, "t,q0,q1,delta,gamma,xi,overlap,ber,residual");
    assert!(rows.len() >= 2, "trace needs the start record plus at least one sweep");
    assert_eq!(rows[0][0], "0");
    assert_eq!(rows[0][8], "inf", "the pre-update record has no residual yet");
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i.to_string(), "sweep index column must count up from 0");
        assert_eq!(row.len(), 9);
    }
}

#[test]
fn simulate_matched_filter_records_start_and_decision() {
    let out = tmp_dir("sim-mf").join("trace.csv");
    let output = spdet()
        .args(["simulate", "--n", "4", "--k", "1", "--sigma0", "0", "--sigma", "0.1"])
        .args(["--mode", "mf", "--seed", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let text = stdout_of(&output);
    assert!(text.contains("ber 0\n"), "stdout was: {text}");
    assert!(text.contains("converged true"), "stdout was: {text}");
    let rows = csv_rows(&out, "t,q0,q1,delta,gamma,xi,overlap,ber,residual");
    assert_eq!(rows.len(), 2, "the one-shot filter records exactly start and decision");
}

#[test]
fn simulate_reports_nonconvergence_without_failing() {
    let out = tmp_dir("sim-trunc").join("trace.csv");
    let output = spdet()
        .args(["simulate", "--n", "50", "--k", "25", "--sigma0", "1.0", "--sigma", "1.0"])
        .args(["--max-iter", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let text = stdout_of(&output);
    assert!(text.contains("converged false"), "stdout was: {text}");
}

#[test]
fn default_outputs_land_in_spdet_out_dir() {
    let dir = tmp_dir("out-env");
    let output = spdet()
        .args(["simulate", "--n", "8", "--k", "2", "--sigma0", "0.5", "--sigma", "0.5"])
        .env("SPDET_OUT_DIR", &dir)
        .output()
        .unwrap();
    stdout_of(&output);
    assert!(dir.join("trace.csv").is_file(), "expected trace.csv under SPDET_OUT_DIR");
}

#[test]
fn unwritable_out_path_exits_one() {
    let output = spdet()
        .args(["simulate", "--n", "4", "--k", "1", "--sigma0", "0.5", "--sigma", "0.5"])
        .args(["--out", "/dev/null/trace.csv"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).starts_with("error:"));
}

#[test]
fn usage_errors_exit_two() {
    let missing_value = spdet().args(["simulate", "--n"]).output().unwrap();
    assert_eq!(missing_value.status.code(), Some(2));
    let unknown_command = spdet().arg("frobnicate").output().unwrap();
    assert_eq!(unknown_command.status.code(), Some(2));
}

#[test]
fn oracle_compare_over_capacity_exits_two() {
    let output = spdet()
        .args(["oracle-compare", "--k", "21", "--trials", "1", "--n", "30"])
        .args(["--sigma0", "0.5", "--sigma", "0.5"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).starts_with("error:"));
}

#[test]
fn ber_sweep_matched_grid_degrades_with_noise() {
    let dir = tmp_dir("sweep-mono");
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        r#"{"n": [200], "beta": [0.5], "sigma0": [0.4, 0.8, 1.2], "sigma": "matched",
            "x": [0.5], "mode": ["sp"], "seeds": 20, "seed_base": 4242}"#,
    )
    .unwrap();
    let out = dir.join("sweep.csv");
    let output = spdet().arg("ber-sweep").arg(&spec).arg("--out").arg(&out).output().unwrap();
    stdout_of(&output);
    let rows = csv_rows(
        &out,
        "n,k,beta,sigma0,sigma,x,mode,seeds,ber_mean,ber_se,iters_mean,conv_rate",
    );
    assert_eq!(rows.len(), 3);
    let mut points = Vec::new();
    for row in &rows {
        assert_eq!(row[1], "100", "beta 0.5 at n 200 resolves to 100 users");
        assert_eq!(row[3], row[4], "matched noise copies sigma0 into sigma");
        let ber: f64 = row[8].parse().unwrap();
        let se: f64 = row[9].parse().unwrap();
        points.push((ber, se));
    }
    for pair in points.windows(2) {
        let (lo, lo_se) = pair[0];
        let (hi, hi_se) = pair[1];
        assert!(
            lo <= hi + 2.0 * (lo_se + hi_se),
            "BER fell as matched noise rose: {lo} then {hi}"
        );
    }
    assert!(points[2].0 > points[0].0, "BER must rise over a 3x noise increase");
}

#[test]
fn ber_sweep_rejects_unknown_spec_fields() {
    let dir = tmp_dir("sweep-deny");
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        r#"{"n": [8], "k": [2], "sigma0": [0.5], "sigma": [0.5], "x": [0.5],
            "mode": ["sp"], "seeds": 1, "sigma_grid": [1.0]}"#,
    )
    .unwrap();
    let output = spdet().arg("ber-sweep").arg(&spec).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8_lossy(&output.stderr).to_string();
    assert!(err.contains("unknown field"), "stderr was: {err}");
    assert!(err.contains("spec.json"), "diagnostics must name the file: {err}");
}

#[test]
fn oracle_compare_near_noiseless_recovers_every_bit() {
    let dir = tmp_dir("oracle-clean");
    let out = dir.join("oracle.csv");
    let output = spdet()
        .args(["oracle-compare", "--k", "8", "--trials", "10", "--n", "16"])
        .args(["--sigma0", "0.01", "--sigma", "0.01", "--seed", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let text = stdout_of(&output);
    assert!(text.contains("trials 10"), "stdout was: {text}");
    for name in ["mpm_ber", "sp_ber", "bp_ber"] {
        assert!(
            text.contains(&format!("{name} 0 se 0")),
            "{name} should vanish at near-zero noise; stdout was: {text}"
        );
    }
    let rows = csv_rows(&out, "trial,seed,mpm_ber,sp_ber,bp_ber,mf_ber,sp_mad,bp_mad");
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i.to_string());
        assert_eq!(row[2], "0");
        assert_eq!(row[3], "0");
        assert_eq!(row[4], "0");
    }
}

#[test]
fn oracle_compare_single_user_detectors_coincide() {
    let dir = tmp_dir("oracle-k1");
    let out = dir.join("oracle.csv");
    let output = spdet()
        .args(["oracle-compare", "--k", "1", "--trials", "20", "--n", "8"])
        .args(["--sigma0", "0.8", "--sigma", "0.8", "--seed", "5", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    stdout_of(&output);
    let rows = csv_rows(&out, "trial,seed,mpm_ber,sp_ber,bp_ber,mf_ber,sp_mad,bp_mad");
    assert_eq!(rows.len(), 20);
    for row in &rows {
        // One user means no interference: every detector reduces to the sign
        // of the same matched-filter statistic.
        assert_eq!(row[2], row[3], "sp decision diverged from the oracle");
        assert_eq!(row[2], row[4], "bp decision diverged from the oracle");
        assert_eq!(row[2], row[5], "mf decision diverged from the oracle");
    }
}

#[test]
fn stability_zero_epsilon_is_inconclusive() {
    let dir = tmp_dir("stab-eps0");
    let out = dir.join("stability.csv");
    let output = spdet()
        .args(["stability", "--beta", "0.5", "--n", "60", "--sigma-grid", "0.5"])
        .args(["--mode", "bp", "--epsilon", "0", "--seeds", "2", "--seed", "11", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let text = stdout_of(&output);
    assert!(text.contains("sigma 0.5 verdict inconclusive"), "stdout was: {text}");
    let rows = csv_rows(&out, "sigma,mode,x,lambda_hat,verdict,epsilon,seed");
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(row[1], "bp");
        assert_eq!(row[3], "NaN", "identical replicas leave no slope to fit");
        assert_eq!(row[4], "inconclusive");
        assert_eq!(row[5], "0");
    }
}

#[test]
fn stability_quiet_assumed_noise_converges() {
    let dir = tmp_dir("stab-quiet");
    let out = dir.join("stability.csv");
    let output = spdet()
        .args(["stability", "--beta", "0.5", "--n", "100", "--sigma-grid", "10"])
        .args(["--mode", "bp", "--seeds", "1", "--seed", "7", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let text = stdout_of(&output);
    assert!(text.contains("sigma 10 verdict converging"), "stdout was: {text}");
}

#[test]
fn stability_rejects_the_matched_filter() {
    let output = spdet()
        .args(["stability", "--beta", "0.5", "--n", "60", "--sigma-grid", "0.5"])
        .args(["--mode", "mf"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}
