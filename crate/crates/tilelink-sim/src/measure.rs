//! Overlap measurement: the three-run protocol.
//!
//! A kernel is timed compute-only, communication-only, and fully overlapped
//! (median of N repeats, each in a fresh world). The overlap ratio
//! `(comp_only + comm_only - overlap) / comm_only` is the fraction of
//! communication time the overlapped schedule hides: 1 means fully hidden,
//! 0 means fully serialized.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::KernelConfig;
use crate::error::Result;
use crate::kernels::{run_kernel, RunMode, RunOptions};
use crate::runtime::{World, WorldOptions};
use crate::trace::overlap_ratio;

#[derive(Debug, Clone, Copy)]
pub struct MeasureOptions {
    /// Repeats per mode; the median is reported.
    pub repeats: usize,
    pub comm_delay: Option<Duration>,
    pub timeout: Option<Duration>,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        MeasureOptions {
            repeats: 3,
            comm_delay: None,
            timeout: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapReport {
    pub comp_only_s: f64,
    pub comm_only_s: f64,
    pub overlap_s: f64,
    pub ratio: f64,
    pub config: KernelConfig,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    xs[xs.len() / 2]
}

fn timed(cfg: &KernelConfig, opts: &MeasureOptions, mode: RunMode) -> Result<f64> {
    let world = World::init_with(
        cfg.world_size,
        cfg.channels_per_rank,
        WorldOptions {
            timeout: opts.timeout,
            race_check: false,
        },
    )?;
    let run_opts = RunOptions {
        mode,
        comm_delay: opts.comm_delay,
        sabotage_drop_notify: false,
    };
    let t0 = Instant::now();
    run_kernel(&world, cfg, &run_opts)?;
    Ok(t0.elapsed().as_secs_f64())
}

/// Time the three modes and compute the overlap ratio.
pub fn measure_kernel(cfg: &KernelConfig, opts: &MeasureOptions) -> Result<OverlapReport> {
    let repeats = opts.repeats.max(1);
    let mut by_mode = [Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..repeats {
        by_mode[0].push(timed(cfg, opts, RunMode::CompOnly)?);
        by_mode[1].push(timed(cfg, opts, RunMode::CommOnly)?);
        by_mode[2].push(timed(cfg, opts, RunMode::Full)?);
    }
    let [comp, comm, full] = by_mode;
    let comp_only_s = median(comp);
    let comm_only_s = median(comm);
    let overlap_s = median(full);
    let ratio = overlap_ratio(comp_only_s, comm_only_s, overlap_s)?;
    Ok(OverlapReport {
        comp_only_s,
        comm_only_s,
        overlap_s,
        ratio,
        config: cfg.clone(),
    })
}
