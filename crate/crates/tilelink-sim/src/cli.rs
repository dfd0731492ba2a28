//! Command-line front end: config files, flag overrides, and exit codes.
//!
//! Exit codes: 0 success, 1 output mismatch or race violation, 2 deadlock,
//! 3 configuration error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{KernelConfig, ResourceBinding, TileOrder, TransferMode};
use crate::error::{Result, SimError};
use crate::kernels::{reference_outputs, run_kernel, verify_run, RunMode, RunOptions};
use crate::measure::{measure_kernel, MeasureOptions};
use crate::runtime::{World, WorldOptions};
use crate::trace::write_jsonl;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_DEADLOCK: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Verification tolerance on the worst relative error.
const VERIFY_TOL: f32 = 1e-4;

#[derive(Parser)]
#[command(name = "tilelink-sim", about = "Multi-rank tile-overlap simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Run a kernel and compare against the sequential reference.
    Verify(CommonArgs),
    /// Time compute-only, comm-only, and overlapped runs; report the ratio.
    Bench(CommonArgs),
    /// Run a kernel and emit its event trace as JSONL.
    Trace(CommonArgs),
    /// Verify every combination of a sweep config's axes.
    Sweep(CommonArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// JSON run config (sweep config for `sweep`).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's repeat count.
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Write the event trace (JSONL) here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write the overlap report (JSON) here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Track per-element publish states and fail on undisciplined reads.
    #[arg(long)]
    pub race_check: bool,
    /// Injected latency per communication tile, in microseconds.
    #[arg(long)]
    pub inject_comm_delay_us: Option<u64>,
    /// Deadlock timeout override, in milliseconds.
    #[arg(long)]
    pub timeout_ms: Option<u64>,
}

fn default_repeats() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: KernelConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
    #[serde(default)]
    pub report_path: Option<PathBuf>,
    #[serde(default)]
    pub race_check: bool,
    #[serde(default)]
    pub inject_comm_delay_us: Option<u64>,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
    /// Fault injection: drop the first communication notify on rank 0.
    #[serde(default)]
    pub sabotage_drop_notify: bool,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let f = File::open(path)?;
        serde_json::from_reader(BufReader::new(f))
            .map_err(|e| SimError::config(format!("{}: {e}", path.display())))
    }

    /// Fold command-line overrides into the file config.
    pub fn apply_overrides(&mut self, args: &CommonArgs) {
        if let Some(r) = args.repeat {
            self.repeats = r;
        }
        if let Some(p) = &args.trace {
            self.trace_path = Some(p.clone());
        }
        if let Some(p) = &args.report {
            self.report_path = Some(p.clone());
        }
        if args.race_check {
            self.race_check = true;
        }
        if let Some(us) = args.inject_comm_delay_us {
            self.inject_comm_delay_us = Some(us);
        }
        if let Some(ms) = args.timeout_ms {
            self.timeout_ms = Some(ms);
        }
    }

    pub fn comm_delay(&self) -> Option<Duration> {
        self.inject_comm_delay_us.map(Duration::from_micros)
    }

    pub fn timeout(&self) -> Option<Duration> {
        self.timeout_ms.map(Duration::from_millis)
    }
}

/// Axes default to the base kernel's single value when omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub kernel: KernelConfig,
    #[serde(default)]
    pub world_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub orders: Option<Vec<TileOrder>>,
    #[serde(default)]
    pub modes: Option<Vec<TransferMode>>,
    #[serde(default)]
    pub bindings: Option<Vec<ResourceBinding>>,
    #[serde(default)]
    pub comm_tile_rows: Option<Vec<usize>>,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

impl SweepConfig {
    pub fn from_file(path: &Path) -> Result<SweepConfig> {
        let f = File::open(path)?;
        serde_json::from_reader(BufReader::new(f))
            .map_err(|e| SimError::config(format!("{}: {e}", path.display())))
    }

    /// Cartesian product of the populated axes.
    pub fn combinations(&self) -> Vec<KernelConfig> {
        let worlds = self
            .world_sizes
            .clone()
            .unwrap_or_else(|| vec![self.kernel.world_size]);
        let orders = self.orders.clone().unwrap_or_else(|| vec![self.kernel.order]);
        let modes = self.modes.clone().unwrap_or_else(|| vec![self.kernel.mode]);
        let bindings = self
            .bindings
            .clone()
            .unwrap_or_else(|| vec![self.kernel.binding]);
        let tiles = self
            .comm_tile_rows
            .clone()
            .unwrap_or_else(|| vec![self.kernel.comm_tile_rows]);
        let mut out = Vec::new();
        for &w in &worlds {
            for &o in &orders {
                for &m in &modes {
                    for &b in &bindings {
                        for &t in &tiles {
                            let mut cfg = self.kernel.clone();
                            cfg.world_size = w;
                            cfg.order = o;
                            cfg.mode = m;
                            cfg.binding = b;
                            cfg.comm_tile_rows = t;
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn exit_code_for(err: &SimError) -> i32 {
    match err {
        SimError::Deadlock { .. } => EXIT_DEADLOCK,
        SimError::Race(_) => EXIT_MISMATCH,
        SimError::Config(_) | SimError::Mapping(_) | SimError::Shape(_) | SimError::Io(_) => {
            EXIT_CONFIG
        }
    }
}

fn write_trace(path: &Path, events: &[crate::trace::TraceEvent]) -> Result<()> {
    let f = File::create(path)?;
    write_jsonl(BufWriter::new(f), events)
}

fn run_once(rc: &RunConfig) -> Result<crate::kernels::KernelRun> {
    let world = World::init_with(
        rc.kernel.world_size,
        rc.kernel.channels_per_rank,
        WorldOptions {
            timeout: rc.timeout(),
            race_check: rc.race_check,
        },
    )?;
    run_kernel(
        &world,
        &rc.kernel,
        &RunOptions {
            mode: RunMode::Full,
            comm_delay: rc.comm_delay(),
            sabotage_drop_notify: rc.sabotage_drop_notify,
        },
    )
}

fn cmd_verify(rc: &RunConfig) -> Result<i32> {
    let run = run_once(rc)?;
    if let Some(p) = &rc.trace_path {
        write_trace(p, &run.trace)?;
    }
    let want = reference_outputs(&rc.kernel)?;
    let err = verify_run(&run, &want);
    if err <= VERIFY_TOL {
        println!("verify {}: ok (max_rel_err={err:.2e})", rc.kernel.kind.name());
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "verify {}: MISMATCH (max_rel_err={err:.2e} > {VERIFY_TOL:.0e})",
            rc.kernel.kind.name()
        );
        Ok(EXIT_MISMATCH)
    }
}

fn cmd_bench(rc: &RunConfig) -> Result<i32> {
    let report = measure_kernel(
        &rc.kernel,
        &MeasureOptions {
            repeats: rc.repeats,
            comm_delay: rc.comm_delay(),
            timeout: rc.timeout(),
        },
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| SimError::config(format!("report serialization: {e}")))?;
    match &rc.report_path {
        Some(p) => {
            let mut f = File::create(p)?;
            writeln!(f, "{json}")?;
            println!(
                "bench {}: ratio={:.3} (report written to {})",
                rc.kernel.kind.name(),
                report.ratio,
                p.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(EXIT_OK)
}

fn cmd_trace(rc: &RunConfig) -> Result<i32> {
    let run = run_once(rc)?;
    match &rc.trace_path {
        Some(p) => {
            write_trace(p, &run.trace)?;
            println!(
                "trace {}: {} events written to {}",
                rc.kernel.kind.name(),
                run.trace.len(),
                p.display()
            );
        }
        None => {
            let stdout = std::io::stdout();
            write_jsonl(stdout.lock(), &run.trace)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(sc: &SweepConfig, args: &CommonArgs) -> Result<i32> {
    let mut worst = EXIT_OK;
    for cfg in sc.combinations() {
        let rc = RunConfig {
            kernel: cfg,
            repeats: 1,
            trace_path: None,
            report_path: None,
            race_check: args.race_check,
            inject_comm_delay_us: args.inject_comm_delay_us,
            timeout_ms: args.timeout_ms.or(sc.timeout_ms),
            sabotage_drop_notify: false,
        };
        let label = format!(
            "{} world={} order={} mode={} binding={} comm_tile_rows={}",
            rc.kernel.kind.name(),
            rc.kernel.world_size,
            serde_json::to_string(&rc.kernel.order).unwrap_or_default(),
            serde_json::to_string(&rc.kernel.mode).unwrap_or_default(),
            serde_json::to_string(&rc.kernel.binding).unwrap_or_default(),
            rc.kernel.comm_tile_rows,
        );
        match cmd_verify(&rc) {
            Ok(EXIT_OK) => {}
            Ok(code) => {
                eprintln!("sweep {label}: mismatch");
                worst = worst.max(code);
            }
            Err(e) => {
                eprintln!("sweep {label}: {e}");
                worst = worst.max(exit_code_for(&e));
            }
        }
    }
    Ok(worst)
}

/// Top-level driver; returns the process exit code.
pub fn run_cli(cli: Cli) -> i32 {
    let result = match &cli.cmd {
        Cmd::Verify(args) | Cmd::Bench(args) | Cmd::Trace(args) => {
            match RunConfig::from_file(&args.config) {
                Ok(mut rc) => {
                    rc.apply_overrides(args);
                    match &cli.cmd {
                        Cmd::Verify(_) => cmd_verify(&rc),
                        Cmd::Bench(_) => cmd_bench(&rc),
                        Cmd::Trace(_) => cmd_trace(&rc),
                        Cmd::Sweep(_) => unreachable!(),
                    }
                }
                Err(e) => Err(e),
            }
        }
        Cmd::Sweep(args) => match SweepConfig::from_file(&args.config) {
            Ok(sc) => cmd_sweep(&sc, args),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
