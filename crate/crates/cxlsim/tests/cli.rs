use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cxlsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxlsim"))
        .current_dir(dir)
        .env_remove("CXLSIM_CONFIG_PATH")
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).into_owned();
    assert_eq!(s.lines().count(), 1, "{s}");
    s
}

#[test]
fn gpu_dram_run_normalizes_to_one() {
    let d = tempfile::tempdir().unwrap();
    let o = cxlsim(d.path(), &["run", "--mode", "GPU_DRAM", "--workload", "vadd", "--ops", "2000"]);
    assert!(o.status.success());
    assert_eq!(json(d.path().join("out/report.json"))["normalized_time"], 1.0);
}

#[test]
fn ds_run_on_bfs_reports_suspensions() {
    let d = tempfile::tempdir().unwrap();
    let o = cxlsim(d.path(), &["run", "--mode", "CXL_DS", "--workload", "bfs", "--ops", "20000", "--series"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(d.path().join("out/report.json"));
    let windows = r["ports"][0]["ds"]["suspension_windows"].as_array().unwrap();
    assert!(!windows.is_empty());
    assert!(d.path().join("out/report.ds_buffer.csv").is_file());
}

#[test]
fn bad_config_exits_with_schema_code() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.toml"), "schema_version = 1\nmode = \"WARP\"\n").unwrap();
    let o = cxlsim(d.path(), &["run", "--config", "bad.toml", "--workload", "seq"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr_line(&o).starts_with("error[schema]:"));
    let o = cxlsim(d.path(), &["validate-config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn unsupported_schema_version_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml")).unwrap();
    fs::write(d.path().join("v2.toml"), text.replace("schema_version = 1", "schema_version = 2")).unwrap();
    let o = cxlsim(d.path(), &["validate-config", "v2.toml"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr_line(&o).contains("schema_version 2"));
}

#[test]
fn distinct_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let o = cxlsim(d.path(), &["run", "--trace", "missing.trace"]);
    assert_eq!(o.status.code(), Some(3));
    fs::write(d.path().join("t.trace"), "0 L 0x41 64\n").unwrap();
    let o = cxlsim(d.path(), &["run", "--mode", "CXL", "--trace", "t.trace"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr_line(&o).starts_with("error[trace]:"));
    let o = cxlsim(d.path(), &["run", "--workload", "seq", "--trace", "t.trace"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_needs_two_modes() {
    let d = tempfile::tempdir().unwrap();
    let o = cxlsim(d.path(), &["compare", "--modes", "CXL", "--workload", "seq"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error[usage]:"));
}

#[test]
fn compare_uvm_is_slower_on_seq_loads() {
    let d = tempfile::tempdir().unwrap();
    let o = cxlsim(d.path(), &["compare", "--modes", "UVM,CXL", "--workload", "seq", "--ops", "5000"]);
    assert!(o.status.success());
    let c = json(d.path().join("out/comparison.json"));
    let t = |i: usize| c["rows"][i]["exec_time_ns"].as_u64().unwrap();
    assert!(t(0) > t(1));
    assert!(d.path().join("out/reports/UVM.json").is_file());
}

#[test]
fn compare_ds_has_lowest_store_tail() {
    let d = tempfile::tempdir().unwrap();
    let args = [
        "compare", "--modes", "CXL,CXL_SR,CXL_DS", "--workload", "rand", "--load-ratio", "0.1",
        "--compute-ratio", "0.9", "--compute-ns", "100", "--ops", "100000",
    ];
    let o = cxlsim(d.path(), &args);
    assert!(o.status.success());
    let c = json(d.path().join("out/comparison.json"));
    let p99: Vec<u64> = (0..3).map(|i| c["rows"][i]["store_p99_ns"].as_u64().unwrap()).collect();
    assert!(p99[2] < p99[0] && p99[2] < p99[1], "{p99:?}");
}

#[test]
fn gen_trace_feeds_run_and_outputs_repeat() {
    let d = tempfile::tempdir().unwrap();
    let o = cxlsim(d.path(), &["gen-trace", "--workload", "stencil", "--ops", "3000", "--seed", "4", "--out", "s.trace"]);
    assert!(o.status.success());
    let mut reports = Vec::new();
    for out in ["a", "b"] {
        let o = cxlsim(d.path(), &["run", "--mode", "CXL_SR", "--trace", "s.trace", "--series", "--out", out]);
        assert!(o.status.success());
        reports.push(fs::read(d.path().join(out).join("report.json")).unwrap());
        reports.push(fs::read(d.path().join(out).join("report.load_latency.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[2]);
    assert_eq!(reports[1], reports[3]);
}

#[test]
fn config_search_path_is_used() {
    let d = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml")).unwrap();
    fs::write(d.path().join("cxlsim.toml"), text.replace("mode = \"CXL_SR\"", "mode = \"CXL\"")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cxlsim"))
        .current_dir(d.path())
        .env("CXLSIM_CONFIG_PATH", d.path())
        .args(["run", "--workload", "seq", "--ops", "1000"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("CXL "));
}

#[test]
fn sweep_writes_grid() {
    let d = tempfile::tempdir().unwrap();
    let o = cxlsim(
        d.path(),
        &["sweep", "--modes", "GPU_DRAM,CXL@dram,CXL_SR", "--workloads", "vadd,bfs", "--ops", "2000"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(d.path().join("out/sweep.json"));
    let rows = s["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[4]["workload"], "bfs");
    assert_eq!(rows[4]["label"], "CXL@dram");
    assert!(d.path().join("out/reports/bfs/CXL_SR.json").is_file());
}
