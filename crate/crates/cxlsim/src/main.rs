use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cxlsim::config;
use cxlsim::input::{TraceSource, WorkloadArgs};
use cxlsim::output::{comparison_table, ensure_dir, to_json, write_run};
use cxlsim::sweep::run_sweep;
use cxlsim::{CliError, Result};
use cxlsim_core::endpoint::MediaKind;
use cxlsim_core::engine::{compare, run_normalized};
use cxlsim_core::scenario::{Mode, ScenarioConfig};
use cxlsim_core::srqueue::SrPolicy;
use cxlsim_core::traces::format_trace;

#[derive(Parser)]
#[command(name = "cxlsim", version, about = "CXL GPU memory expansion simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its report.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Overrides the config's mode.
        #[arg(long)]
        mode: Option<String>,
        /// off, naive, dynamic, fixed_max or windowed.
        #[arg(long)]
        policy: Option<String>,
        /// Also write latency and occupancy series as CSV.
        #[arg(long)]
        series: bool,
    },
    /// Run several modes on one trace and tabulate them against GPU_DRAM.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Comma-separated, at least two. `MODE@media` swaps the endpoint
        /// media, e.g. `CXL@dram,CXL@znand`.
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<String>,
    },
    /// Run a modes × workloads grid in parallel.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<String>,
        /// Named workloads or patterns.
        #[arg(long, value_delimiter = ',', required = true)]
        workloads: Vec<String>,
    },
    /// Write a generated workload as a trace file.
    GenTrace {
        #[arg(long)]
        workload: String,
        #[command(flatten)]
        shape: Shape,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace file to write; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check scenario files.
    ValidateConfig {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario TOML. Without it the directories in $CXLSIM_CONFIG_PATH are
    /// searched for cxlsim.toml, then built-in defaults apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces every endpoint with this media's defaults.
    #[arg(long)]
    media: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    shape: Shape,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Named workload, pattern (seq, around, rand) or workload TOML.
    #[arg(long)]
    workload: Option<String>,
}

#[derive(Args, Clone)]
struct Shape {
    #[arg(long, default_value_t = 16 << 20)]
    footprint: u64,
    #[arg(long, default_value_t = 100_000)]
    ops: u64,
    #[arg(long)]
    compute_ratio: Option<f64>,
    #[arg(long)]
    load_ratio: Option<f64>,
    #[arg(long)]
    compute_ns: Option<u64>,
}

impl Shape {
    fn workload(&self, name: &str) -> WorkloadArgs {
        WorkloadArgs {
            name: name.to_string(),
            footprint: self.footprint,
            ops: self.ops,
            compute_ratio: self.compute_ratio,
            load_ratio: self.load_ratio,
            compute_ns: self.compute_ns,
        }
    }
}

impl Source {
    fn resolve(&self, shape: &Shape) -> TraceSource {
        match (&self.trace, &self.workload) {
            (Some(p), _) => TraceSource::File(p.clone()),
            (None, Some(w)) => TraceSource::Workload(shape.workload(w)),
            (None, None) => unreachable!("clap requires one source"),
        }
    }
}

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

fn parse_mode(s: &str) -> Result<Mode> {
    Mode::parse(s).ok_or_else(|| usage(format!("unknown mode `{s}`")))
}

fn parse_media(s: &str) -> Result<MediaKind> {
    config::parse_media(s).ok_or_else(|| usage(format!("unknown media `{s}`")))
}

fn parse_policy(s: &str) -> Result<SrPolicy> {
    Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "off" => SrPolicy::Off,
        "naive" => SrPolicy::Naive,
        "dynamic" => SrPolicy::Dynamic,
        "fixed_max" => SrPolicy::FixedMax,
        "windowed" => SrPolicy::Windowed,
        _ => return Err(usage(format!("unknown policy `{s}`"))),
    })
}

/// Config after `--config`/search path, `--media` and `--seed`.
fn base_config(c: &Common) -> Result<ScenarioConfig> {
    let mut cfg = config::resolve(c.config.as_deref())?;
    if let Some(m) = &c.media {
        cfg = config::with_media(&cfg, parse_media(m)?);
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// `MODE` or `MODE@media` against `base`.
fn scenario(base: &ScenarioConfig, token: &str) -> Result<(String, ScenarioConfig)> {
    let (mode, media) = match token.split_once('@') {
        Some((m, d)) => (m, Some(d)),
        None => (token, None),
    };
    let mut cfg = config::with_mode(base, parse_mode(mode)?);
    if let Some(d) = media {
        cfg = config::with_media(&cfg, parse_media(d)?);
    }
    cfg.validate()?;
    Ok((token.to_string(), cfg))
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn write_doc(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run {
            common,
            source,
            mode,
            policy,
            series,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(m) = mode {
                cfg = config::with_mode(&cfg, parse_mode(&m)?);
            }
            if let Some(p) = policy {
                cfg.sr_policy = Some(parse_policy(&p)?);
            }
            cfg.validate()?;
            let trace = source.resolve(&common.shape).load(cfg.seed)?;
            let res = run_normalized(&cfg, &trace)?;
            let r = &res.report;
            println!(
                "{} exec_ns={} norm={:.3} hit={:.4} load_p99={} store_p99={} gc={} suspensions={}",
                cfg.mode,
                r.exec_time_ns,
                r.normalized_time.unwrap_or(1.0),
                r.hit_rate(),
                r.load_latency.p99_ns,
                r.store_latency.p99_ns,
                r.gc_count(),
                r.suspension_count()
            );
            print_written(&write_run(&common.out, "report", &res, series)?);
        }
        Cmd::Compare { common, source, modes } => {
            if modes.len() < 2 {
                return Err(usage("compare needs at least two modes".into()));
            }
            let base = base_config(&common)?;
            let scenarios = modes.iter().map(|m| scenario(&base, m)).collect::<Result<Vec<_>>>()?;
            let trace = source.resolve(&common.shape).load(base.seed)?;
            let (table, results) = compare(&scenarios, &trace)?;
            print!("{}", comparison_table(&table));
            let mut written = vec![write_doc(&common.out, "comparison.json", &to_json(&table))?];
            for ((label, _), res) in scenarios.iter().zip(&results) {
                written.extend(write_run(&common.out.join("reports"), label, res, false)?);
            }
            print_written(&written);
        }
        Cmd::Sweep {
            common,
            modes,
            workloads,
        } => {
            let base = base_config(&common)?;
            let scenarios = modes.iter().map(|m| scenario(&base, m)).collect::<Result<Vec<_>>>()?;
            let traces = workloads
                .iter()
                .map(|w| {
                    let src = TraceSource::Workload(common.shape.workload(w));
                    Ok((src.label(), src.load(base.seed)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let (doc, runs) = run_sweep(&traces, &scenarios)?;
            for r in &doc.rows {
                println!(
                    "{:<10} {:<12} norm={:>9.3} hit={:>6.2}% st_p99={}",
                    r.workload,
                    r.label,
                    r.normalized_time,
                    r.hit_rate * 100.0,
                    r.store_p99_ns
                );
            }
            let mut written = vec![write_doc(&common.out, "sweep.json", &to_json(&doc))?];
            for run in &runs {
                let dir = common.out.join("reports").join(&run.workload);
                written.extend(write_run(&dir, &run.label, &run.result, false)?);
            }
            print_written(&written);
        }
        Cmd::GenTrace {
            workload,
            shape,
            seed,
            out,
        } => {
            let ops = TraceSource::Workload(shape.workload(&workload)).load(seed)?;
            let text = format_trace(&ops);
            match out {
                Some(p) => {
                    fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
                    println!("wrote {} ({} ops)", p.display(), ops.len());
                }
                None => print!("{text}"),
            }
        }
        Cmd::ValidateConfig { paths } => {
            for p in paths {
                let cfg = config::load_config(&p)?;
                println!("ok {} mode={} endpoints={}", p.display(), cfg.mode, cfg.endpoints.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
