use std::path::Path;
use std::process::{Command, Output};

fn aacluster(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aacluster"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("AACLUSTER_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn solve_writes_outputs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = ["solve", "--preset", "blobs4", "--autonomy", "honor", "--honor", "0.9", "--seed", "3"];
    let first = aacluster(&args, &a);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(code(&aacluster(&args, &b)), 0);
    for f in ["trace.csv", "solution.json", "config.json"] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs");
    }
    assert!(read(&a, "trace.csv").starts_with("beta,free_energy,distortion,delta_y_norm,path,transition_flag\n"));
    let sol: serde_json::Value = serde_json::from_str(&read(&a, "solution.json")).unwrap();
    assert_eq!(sol["centers"].as_array().unwrap().len(), 4);
    assert_eq!(sol["assignments"].as_array().unwrap().len(), 200);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = aacluster(&["solve", "--autonomy", "uniform", "--seed", "1", "--k", "3"], &a);
    assert_eq!(code(&first), 0);
    let cfg = a.join("config.json");
    let second = aacluster(&["solve", "--config", cfg.to_str().unwrap()], &b);
    assert_eq!(code(&second), 0, "{}", String::from_utf8_lossy(&second.stderr));
    assert_eq!(read(&a, "trace.csv"), read(&b, "trace.csv"));
    assert_eq!(read(&a, "config.json"), read(&b, "config.json"));
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&aacluster(&["solve", "--autonomy", "parametric", "--kappa", "1.5"], &out)), 2);
    assert_eq!(code(&aacluster(&["solve", "--bogus"], &out)), 2);
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"anneal": {"k": 4, "not_a_key": 1}}"#).unwrap();
    assert_eq!(code(&aacluster(&["solve", "--config", cfg.to_str().unwrap()], &out)), 2);
}

#[test]
fn phase_scan_rejects_position_dependent_autonomy() {
    let tmp = tempfile::tempdir().unwrap();
    let o = aacluster(
        &["phase-scan", "--autonomy", "parametric", "--kappa", "0.2", "--gamma", "0.5", "--zeta", "1", "--T", "1"],
        &tmp.path().join("o"),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn phase_scan_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = aacluster(&["phase-scan", "--autonomy", "honor", "--honor", "0.95"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(&out, "phase.csv").starts_with("beta,lambda_max,beta_cr_estimate,min_hessian_eig,distinct_centers\n"));
    let transitions = read(&out, "transitions.csv");
    assert!(transitions.starts_with("beta,index,end_index,distinct_before,distinct_after,delta_y_norm\n"));
    assert!(transitions.lines().count() >= 2);
}

#[test]
fn learn_tabular_reports_q_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = aacluster(
        &["learn", "--method", "tabular", "--autonomy", "honor", "--honor", "0.9", "--report-error"],
        &out,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(&out, "trace.csv").lines().next().unwrap().ends_with(",q_error"));
    assert!(out.join("solution.json").exists());
}

#[test]
fn benchmark_grid_rows_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    assert_eq!(
        code(&aacluster(&["benchmark", "--grid", empty.to_str().unwrap()], &tmp.path().join("e"))),
        2
    );

    let grid = tmp.path().join("grid.json");
    std::fs::write(&grid, r#"[[0.0, 0.5, 1, 100], {"kappa": 0.2, "gamma": 0.5, "zeta": 1, "T": 100}]"#).unwrap();
    let out = tmp.path().join("g");
    let o = aacluster(
        &["benchmark", "--grid", grid.to_str().unwrap(), "--methods", "ground_truth,ignored", "--jobs", "2"],
        &out,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = read(&out, "table.csv");
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "kappa,gamma,zeta,T,aden_gap,ignored_gap");
    assert_eq!(lines.len(), 3);
    let gaps: serde_json::Value = serde_json::from_str(&read(&out, "gaps.json")).unwrap();
    assert!(gaps.is_array() || gaps.is_object());
}

#[test]
fn output_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_aacluster"))
        .args(["solve", "--autonomy", "identity"])
        .env("AACLUSTER_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("trace.csv").exists());
}
