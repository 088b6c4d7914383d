//! Report documents and CSV series.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cxlsim_core::engine::SimResult;
use cxlsim_core::metrics::{Comparison, Series};

use crate::{CliError, Result};

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn pairs_csv(header: &str, rows: &[(u64, u64)]) -> String {
    let mut s = format!("{header}\n");
    for (a, b) in rows {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

fn indexed_csv(header: &str, per: &[Vec<(u64, u32)>]) -> String {
    let mut s = format!("{header}\n");
    for (i, rows) in per.iter().enumerate() {
        for (t, v) in rows {
            let _ = writeln!(s, "{i},{t},{v}");
        }
    }
    s
}

/// Writes the series of one run as CSV files prefixed by `stem`.
pub fn write_series(dir: &Path, stem: &str, series: &Series) -> Result<Vec<PathBuf>> {
    let mut out = vec![
        write(
            dir.join(format!("{stem}.load_latency.csv")),
            &pairs_csv("completed_ns,latency_ns", &series.load_latency),
        )?,
        write(
            dir.join(format!("{stem}.store_latency.csv")),
            &pairs_csv("completed_ns,latency_ns", &series.store_latency),
        )?,
        write(
            dir.join(format!("{stem}.ingress.csv")),
            &indexed_csv("endpoint,time_ns,occupied", &series.ingress_occupancy),
        )?,
    ];
    if !series.ds_buffer.is_empty() {
        out.push(write(
            dir.join(format!("{stem}.ds_buffer.csv")),
            &indexed_csv("port,time_ns,entries", &series.ds_buffer),
        )?);
    }
    Ok(out)
}

/// `<stem>.json` plus, when asked, the CSV series.
pub fn write_run(dir: &Path, stem: &str, res: &SimResult, series: bool) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut out = vec![write(dir.join(format!("{stem}.json")), &to_json(&res.report))?];
    if series {
        out.extend(write_series(dir, stem, &res.series)?);
    }
    Ok(out)
}

pub fn comparison_table(c: &Comparison) -> String {
    let mut s = format!(
        "{:<12} {:<9} {:>14} {:>9} {:>8} {:>10} {:>10} {:>10} {:>10}\n",
        "label", "mode", "exec_ns", "norm", "hit", "ld_p50", "ld_p99", "st_p50", "st_p99"
    );
    for r in &c.rows {
        let _ = writeln!(
            s,
            "{:<12} {:<9} {:>14} {:>9.3} {:>7.1}% {:>10} {:>10} {:>10} {:>10}",
            r.label,
            r.mode.name(),
            r.exec_time_ns,
            r.normalized_time,
            r.hit_rate * 100.0,
            r.load_p50_ns,
            r.load_p99_ns,
            r.store_p50_ns,
            r.store_p99_ns
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use cxlsim_core::endpoint::MediaKind;
    use cxlsim_core::engine::run;
    use cxlsim_core::scenario::{Mode, ScenarioConfig};
    use cxlsim_core::traces::{generate, Pattern, WorkloadSpec};

    #[test]
    fn run_files_and_csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let trace = generate(&WorkloadSpec::new(Pattern::Seq, 0.1, 0.5, 1 << 20, 500, 1));
        let res = run(&ScenarioConfig::new(Mode::CxlDs, MediaKind::Znand), &trace).unwrap();
        let files = write_run(dir.path(), "ds", &res, true).unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            ["ds.json", "ds.load_latency.csv", "ds.store_latency.csv", "ds.ingress.csv", "ds.ds_buffer.csv"]
        );
        let csv = fs::read_to_string(&files[2]).unwrap();
        assert!(csv.starts_with("completed_ns,latency_ns\n"));
        assert_eq!(csv.lines().count() as u64, 1 + res.report.store_latency.count);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(json["schema_version"], 1);
    }
}
