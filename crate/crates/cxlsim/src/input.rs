//! Trace sources: a trace file or a generated workload.

use std::fs;
use std::path::{Path, PathBuf};

use cxlsim_core::traces::{concat, named_workload, parse_trace, Pattern, TraceOp, WorkloadSpec};

use crate::{CliError, Result};

/// How to build a workload when no trace file is given.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadArgs {
    /// A named workload, a bare pattern (`seq`, `around`, `rand`) or a
    /// TOML file holding one `WorkloadSpec`.
    pub name: String,
    pub footprint: u64,
    pub ops: u64,
    pub compute_ratio: Option<f64>,
    pub load_ratio: Option<f64>,
    pub compute_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceSource {
    File(PathBuf),
    Workload(WorkloadArgs),
}

fn parse_pattern(s: &str) -> Option<Pattern> {
    match s {
        "seq" => Some(Pattern::Seq),
        "around" => Some(Pattern::Around),
        "rand" => Some(Pattern::Rand),
        _ => None,
    }
}

impl WorkloadArgs {
    pub fn specs(&self, seed: u64) -> Result<Vec<WorkloadSpec>> {
        let mut specs = if self.name.ends_with(".toml") {
            let path = Path::new(&self.name);
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let spec: WorkloadSpec = toml::from_str(&text).map_err(|e| CliError::Schema {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
            vec![spec]
        } else if let Some(p) = parse_pattern(&self.name) {
            vec![WorkloadSpec::new(p, 0.1, 1.0, self.footprint, self.ops, seed)]
        } else {
            named_workload(&self.name, self.footprint, self.ops, seed)?
        };
        for s in &mut specs {
            if let Some(c) = self.compute_ratio {
                s.compute_ratio = c;
            }
            if let Some(l) = self.load_ratio {
                s.load_ratio = l;
            }
            if let Some(ns) = self.compute_ns {
                s.compute_ns = ns;
            }
            s.validate()?;
        }
        Ok(specs)
    }
}

impl TraceSource {
    pub fn load(&self, seed: u64) -> Result<Vec<TraceOp>> {
        match self {
            TraceSource::File(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                parse_trace(&text).map_err(|source| CliError::Trace {
                    path: path.clone(),
                    source,
                })
            }
            TraceSource::Workload(w) => Ok(concat(&w.specs(seed)?)),
        }
    }

    /// Short name for output files and table rows.
    pub fn label(&self) -> String {
        match self {
            TraceSource::File(p) => p.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned()),
            TraceSource::Workload(w) => Path::new(&w.name)
                .file_stem()
                .map_or(w.name.clone(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cxlsim_core::traces::{format_trace, measured_ratios};

    fn args(name: &str) -> WorkloadArgs {
        WorkloadArgs {
            name: name.into(),
            footprint: 1 << 20,
            ops: 2000,
            compute_ratio: None,
            load_ratio: None,
            compute_ns: None,
        }
    }

    #[test]
    fn bare_pattern_is_load_only() {
        let ops = TraceSource::Workload(args("seq")).load(1).unwrap();
        assert_eq!(ops.len(), 2000);
        assert_eq!(measured_ratios(&ops).1, 1.0);
    }

    #[test]
    fn overrides_apply_to_every_segment() {
        let mut a = args("gnn");
        a.load_ratio = Some(0.0);
        let specs = a.specs(3).unwrap();
        assert_eq!(specs.len(), 3);
        assert!(specs.iter().all(|s| s.load_ratio == 0.0));
    }

    #[test]
    fn unknown_workload_exits_5() {
        let err = TraceSource::Workload(args("nope")).load(0).unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn trace_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ops = TraceSource::Workload(args("rand")).load(4).unwrap();
        let path = dir.path().join("r.trace");
        fs::write(&path, format_trace(&ops)).unwrap();
        let src = TraceSource::File(path);
        assert_eq!(src.load(0).unwrap(), ops);
        assert_eq!(src.label(), "r");
    }

    #[test]
    fn missing_trace_exits_3() {
        let err = TraceSource::File("/nonexistent/t.trace".into()).load(0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn workload_toml_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.toml");
        let spec = WorkloadSpec::new(Pattern::Around, 0.5, 0.5, 1 << 16, 300, 2);
        fs::write(&path, toml::to_string(&spec).unwrap()).unwrap();
        let got = args(path.to_str().unwrap()).specs(0).unwrap();
        assert_eq!(got, vec![spec]);
    }
}
