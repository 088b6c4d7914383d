//! Workload × scenario grids, run in parallel and merged in grid order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cxlsim_core::endpoint::MediaKind;
use cxlsim_core::engine::{reference_config, run, SimResult};
use cxlsim_core::metrics::REPORT_SCHEMA_VERSION;
use cxlsim_core::scenario::{Mode, ScenarioConfig};
use cxlsim_core::traces::TraceOp;

use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub workload: String,
    pub label: String,
    pub mode: Mode,
    pub media: Option<MediaKind>,
    pub exec_time_ns: u64,
    /// Over GPU_DRAM on the same workload.
    pub normalized_time: f64,
    pub hit_rate: f64,
    pub load_p99_ns: u64,
    pub store_p99_ns: u64,
    pub gc_count: usize,
    pub suspension_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDoc {
    pub schema_version: u32,
    pub rows: Vec<SweepRow>,
}

pub struct SweepRun {
    pub workload: String,
    pub label: String,
    pub result: SimResult,
}

/// Runs every scenario on every workload. Each workload also gets one
/// GPU_DRAM reference run, derived from the first scenario.
pub fn run_sweep(workloads: &[(String, Vec<TraceOp>)], scenarios: &[(String, ScenarioConfig)]) -> Result<(SweepDoc, Vec<SweepRun>)> {
    let Some((_, first)) = scenarios.first() else {
        return Ok((
            SweepDoc {
                schema_version: REPORT_SCHEMA_VERSION,
                rows: Vec::new(),
            },
            Vec::new(),
        ));
    };
    let reference = reference_config(first);
    // Slot 0 of each workload is its reference.
    let jobs: Vec<(usize, Option<usize>)> = (0..workloads.len())
        .flat_map(|w| std::iter::once((w, None)).chain((0..scenarios.len()).map(move |s| (w, Some(s)))))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(w, s)| {
            let cfg = s.map_or(&reference, |s| &scenarios[s].1);
            run(cfg, &workloads[w].1)
        })
        .collect();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut ref_time = 0;
    for (&(w, s), res) in jobs.iter().zip(results) {
        let mut res = res?;
        let Some(s) = s else {
            ref_time = res.report.exec_time_ns;
            continue;
        };
        let (label, cfg) = &scenarios[s];
        let r = &mut res.report;
        let norm = r.exec_time_ns as f64 / ref_time.max(1) as f64;
        r.normalized_time = Some(norm);
        rows.push(SweepRow {
            workload: workloads[w].0.clone(),
            label: label.clone(),
            mode: cfg.mode,
            media: cfg.mode.is_cxl().then(|| cfg.endpoints.first().map(|e| e.media)).flatten(),
            exec_time_ns: r.exec_time_ns,
            normalized_time: norm,
            hit_rate: r.hit_rate(),
            load_p99_ns: r.load_latency.p99_ns,
            store_p99_ns: r.store_latency.p99_ns,
            gc_count: r.gc_count(),
            suspension_count: r.suspension_count(),
        });
        runs.push(SweepRun {
            workload: workloads[w].0.clone(),
            label: label.clone(),
            result: res,
        });
    }
    Ok((
        SweepDoc {
            schema_version: REPORT_SCHEMA_VERSION,
            rows,
        },
        runs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cxlsim_core::traces::{generate, Pattern, WorkloadSpec};

    fn grid() -> (Vec<(String, Vec<TraceOp>)>, Vec<(String, ScenarioConfig)>) {
        let w = [Pattern::Seq, Pattern::Rand]
            .into_iter()
            .map(|p| (format!("{p:?}"), generate(&WorkloadSpec::new(p, 0.1, 0.8, 1 << 20, 800, 3))))
            .collect();
        let s = [Mode::GpuDram, Mode::Cxl, Mode::CxlSr]
            .into_iter()
            .map(|m| (m.name().to_string(), ScenarioConfig::new(m, MediaKind::Znand)))
            .collect();
        (w, s)
    }

    #[test]
    fn rows_follow_grid_order_and_normalize() {
        let (w, s) = grid();
        let (doc, runs) = run_sweep(&w, &s).unwrap();
        assert_eq!(doc.rows.len(), 6);
        assert_eq!(runs.len(), 6);
        let keys: Vec<(&str, &str)> = doc.rows.iter().map(|r| (r.workload.as_str(), r.label.as_str())).collect();
        assert_eq!(keys[..3], [("Seq", "GPU_DRAM"), ("Seq", "CXL"), ("Seq", "CXL_SR")]);
        assert_eq!(doc.rows[0].normalized_time, 1.0);
        assert_eq!(doc.rows[3].normalized_time, 1.0);
    }

    #[test]
    fn parallel_sweep_is_repeatable() {
        let (w, s) = grid();
        let a = run_sweep(&w, &s).unwrap().0;
        let b = run_sweep(&w, &s).unwrap().0;
        assert_eq!(crate::output::to_json(&a), crate::output::to_json(&b));
    }
}
