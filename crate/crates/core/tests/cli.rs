//! End-to-end tests of the `sparsedec` binary: the documented workflows,
//! rerun determinism, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsedec"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str], dir: &Path) -> i32 {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

#[test]
fn matrix_workflow_round_trips_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let gen_args = [
        "gen", "matrices", "--d", "3", "--J-size", "4", "--N", "30", "--sigma", "0", "--seed",
        "5", "--out", "inst.json",
    ];
    run_ok(&gen_args, dir.path());
    run_ok(
        &["sparsify", "--input", "inst.json", "--init", "grid", "--h", "0.25", "--method", "rgd"],
        dir.path(),
    );

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("inst.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["mode"], "matrices");
    assert_eq!(report["d"], 3);
    let chi = report["chi_by_eta"].as_array().unwrap();
    let tightest = chi
        .iter()
        .find(|e| e["eta"].as_f64().unwrap() == 1e-9)
        .expect("default thresholds include 1e-9");
    assert_eq!(tightest["chi"], 0, "report: {report}");
    // The data file names its manifest, and the manifest lists the outputs.
    assert_eq!(report["manifest"], "inst.report.manifest.json");
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("inst.report.manifest.json")).unwrap(),
    )
    .unwrap();
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|p| p.as_str().unwrap().contains("inst.report.json")));
    assert!(outputs.iter().any(|p| p.as_str().unwrap().contains("inst.report.traj.csv")));
    assert!(manifest["timings_ms"].get("pipeline").is_some());

    // Rerunning both commands reproduces the data files byte for byte.
    let before_inst = std::fs::read(dir.path().join("inst.json")).unwrap();
    let before_report = std::fs::read(dir.path().join("inst.report.json")).unwrap();
    let before_traj = std::fs::read(dir.path().join("inst.report.traj.csv")).unwrap();
    run_ok(&gen_args, dir.path());
    run_ok(
        &["sparsify", "--input", "inst.json", "--init", "grid", "--h", "0.25", "--method", "rgd"],
        dir.path(),
    );
    assert_eq!(before_inst, std::fs::read(dir.path().join("inst.json")).unwrap());
    assert_eq!(
        before_report,
        std::fs::read(dir.path().join("inst.report.json")).unwrap()
    );
    assert_eq!(
        before_traj,
        std::fs::read(dir.path().join("inst.report.traj.csv")).unwrap()
    );

    // Aggregation: one run, every default threshold at χ = 0.
    let out = run_ok(&["report", "inst.report.json"], dir.path());
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "d,init,method,h,noisy,eta,n,chi0,chi1,chi2,chi_ge3,failure_ratio,mean_loss_gap"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4, "one row per default threshold: {csv}");
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], "3");
        assert_eq!(cols[6], "1", "one run aggregated");
        assert_eq!(cols[7], "1", "χ=0 bucket");
        assert!(cols[11].starts_with("0.0"), "failure ratio zero: {row}");
        assert!(!cols[12].is_empty(), "matrix runs carry a loss gap: {row}");
    }
    // The dimension filter drops non-matching runs.
    let filtered = run_ok(&["report", "inst.report.json", "--table", "dim3"], dir.path());
    assert_eq!(String::from_utf8(filtered.stdout).unwrap(), csv);
    assert_eq!(exit_code(&["report", "inst.report.json", "--table", "dim7"], dir.path()), 2);
}

#[test]
fn function_workflow_recovers_the_generated_structure() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &["gen", "function", "--d", "3", "--seed", "1", "--out", "fn.json"],
        dir.path(),
    );
    let inst: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fn.json")).unwrap())
            .unwrap();
    assert_eq!(inst["kind"], "function-instance");
    assert_eq!(inst["d"], 3);
    assert_eq!(inst["index_base"], 1);
    assert_eq!(inst["gradients"]["N"], 300, "default sampling is 100·d");
    assert_eq!(inst["truth_profile"].as_array().unwrap().len(), 1);

    run_ok(
        &["sparsify", "--input", "fn.json", "--eta", "1e-9,1e-4", "--out", "fn.rep.json"],
        dir.path(),
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fn.rep.json")).unwrap())
            .unwrap();
    assert_eq!(report["mode"], "function");
    assert_eq!(report["d1"], 3);
    assert_eq!(report["profile"], serde_json::json!([3]));
    for entry in report["chi_by_eta"].as_array().unwrap() {
        assert_eq!(entry["chi"], 0, "report: {report}");
    }
    assert_eq!(report["chi_by_eta"].as_array().unwrap().len(), 2);
    // Singular values and block records are populated in function mode.
    assert_eq!(report["singular_values"].as_array().unwrap().len(), 3);
    assert!(!report["per_block"].as_array().unwrap().is_empty());
    assert!(dir.path().join("fn.rep.block0.traj.csv").exists());
}

#[test]
fn builtin_and_anova_emit_term_norm_csv() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &["gen", "builtin", "--which", "f1", "--rotate", "--seed", "11", "--n-points", "80",
          "--out", "b1.json"],
        dir.path(),
    );
    let inst: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b1.json")).unwrap())
            .unwrap();
    assert_eq!(inst["d"], 7);
    assert_eq!(inst["source"]["type"], "builtin");
    assert_eq!(inst["source"]["rotation_seed"], 11);
    // On-disk patterns are 1-based: the first benchmark couples (1,4),
    // (1,7), (2,5) with curvature on coordinates 1, 2, 7.
    assert_eq!(
        inst["truth_pattern"]["off_diag"],
        serde_json::json!([[1, 4], [1, 7], [2, 5]])
    );
    assert_eq!(inst["truth_pattern"]["diag"], serde_json::json!([1, 2, 7]));

    let anova_args = [
        "anova", "--input", "b1.json", "--max-order", "1", "--p", "inf,1", "--n-samples", "60",
        "--quad-samples", "30", "--seed", "4", "--out", "terms.csv",
    ];
    run_ok(&anova_args, dir.path());
    let csv = std::fs::read_to_string(dir.path().join("terms.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "subset,p,estimate,bound,n_samples,seed");
    assert_eq!(lines.len(), 1 + 7 * 2, "7 singletons × 2 norms: {csv}");
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 6, "row: {row}");
        let estimate: f64 = cols[2].parse().unwrap();
        let bound: f64 = cols[3].parse().unwrap();
        assert!(
            estimate <= bound,
            "estimates respect their derivative bounds: {row}"
        );
        assert_eq!(cols[4], "60");
        assert_eq!(cols[5], "4");
    }
    // Determinism of the CSV across reruns.
    run_ok(&anova_args, dir.path());
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("terms.csv")).unwrap());
    // Direct builtin analysis works without an instance file.
    run_ok(
        &["anova", "--builtin", "f2", "--max-order", "1", "--n-samples", "20", "--quad-samples",
          "10", "--out", "direct.csv"],
        dir.path(),
    );
    assert_eq!(exit_code(&["anova", "--max-order", "1", "--out", "x.csv"], dir.path()), 2);
}

#[test]
fn exit_codes_follow_the_documented_contract() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(exit_code(&["--help"], dir.path()), 0);
    assert_eq!(exit_code(&["bogus"], dir.path()), 2);
    assert_eq!(exit_code(&["gen", "matrices", "--d", "4"], dir.path()), 2);
    assert_eq!(
        exit_code(&["sparsify", "--input", "missing.json"], dir.path()),
        2
    );
    std::fs::write(dir.path().join("bad.json"), "{\"kind\": \"mystery\"}").unwrap();
    assert_eq!(
        exit_code(&["sparsify", "--input", "bad.json"], dir.path()),
        2
    );
    assert_eq!(
        exit_code(
            &["gen", "matrices", "--d", "4", "--J-size", "99", "--out", "x.json"],
            dir.path()
        ),
        2
    );

    // A mid-pipeline failure (the span basis keeps no directions at an
    // absurd threshold) exits 3 and names the stage.
    run_ok(
        &["gen", "matrices", "--d", "3", "--N", "6", "--seed", "2", "--out", "inst.json"],
        dir.path(),
    );
    let out = bin()
        .args(["sparsify", "--input", "inst.json", "--span-tau-rel", "2"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("span reduction stage"),
        "stage name surfaced: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
