//! Overlapped kernels and their phase-separated sequential references.
//!
//! Every kernel follows the same shape: allocate symmetric buffers, begin an
//! epoch, register expected signal counts from the active tile mapping, then
//! run per-rank communication and compute workers inside one thread scope.
//! The same kernel can be run fully overlapped, communication-only, or
//! compute-only; the latter two feed the overlap-ratio measurement.

pub mod ag;
pub mod ag_gemm;
pub mod attention;
pub mod gemm_rs;
pub mod inputs;
pub mod math;
pub mod moe;
pub mod ring;

use std::thread::ScopedJoinHandle;
use std::time::Duration;

use crate::config::{KernelConfig, KernelKind};
use crate::error::{Result, SimError};
use crate::runtime::World;
use crate::trace::TraceEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunMode {
    /// Communication and compute overlapped through tile signals.
    #[default]
    Full,
    /// Transfers and waits only; compute is stubbed out.
    CommOnly,
    /// Compute on pre-gathered data; no transfers, no waits.
    CompOnly,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub mode: RunMode,
    /// Injected latency per communication tile (per copy request when the
    /// engine moves the data).
    pub comm_delay: Option<Duration>,
    /// Fault injection: rank 0's first communication tile never notifies.
    pub sabotage_drop_notify: bool,
}

/// Outputs (one buffer per rank) and the merged event trace of one run.
#[derive(Debug)]
pub struct KernelRun {
    pub outputs: Vec<Vec<f32>>,
    pub trace: Vec<TraceEvent>,
}

/// Join a batch of worker handles, merging traces and aggregating failures so
/// a deadlock diagnostic names every blocked unit.
pub(crate) fn join_workers(
    handles: Vec<ScopedJoinHandle<'_, Result<Vec<TraceEvent>>>>,
) -> Result<Vec<TraceEvent>> {
    let mut trace = Vec::new();
    let mut errors = Vec::new();
    for h in handles {
        match h.join() {
            Ok(Ok(mut t)) => trace.append(&mut t),
            Ok(Err(e)) => errors.push(e),
            Err(_) => errors.push(SimError::config("worker panicked")),
        }
    }
    if errors.is_empty() {
        trace.sort_by_key(|e| e.t_ns);
        Ok(trace)
    } else {
        Err(SimError::merge(errors))
    }
}

fn check_world(world: &World, cfg: &KernelConfig) -> Result<()> {
    if world.world_size() != cfg.world_size || world.channels_per_rank() != cfg.channels_per_rank {
        return Err(SimError::config(format!(
            "world is {}x{} channels but config wants {}x{}",
            world.world_size(),
            world.channels_per_rank(),
            cfg.world_size,
            cfg.channels_per_rank
        )));
    }
    Ok(())
}

/// Run one kernel with inputs generated from `cfg.seed`.
pub fn run_kernel(world: &World, cfg: &KernelConfig, opts: &RunOptions) -> Result<KernelRun> {
    cfg.validate()?;
    check_world(world, cfg)?;
    match cfg.kind {
        KernelKind::AgGemm => ag_gemm::run(world, cfg, opts),
        KernelKind::GemmRingRs => gemm_rs::run(world, cfg, opts),
        KernelKind::AgMoe => moe::run(world, cfg, opts),
        KernelKind::AgKvAttention => attention::run(world, cfg, opts),
    }
}

/// Sequential phase-separated reference for the same seed-generated inputs.
pub fn reference_outputs(cfg: &KernelConfig) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    match cfg.kind {
        KernelKind::AgGemm => ag_gemm::reference(cfg),
        KernelKind::GemmRingRs => gemm_rs::reference(cfg),
        KernelKind::AgMoe => moe::reference(cfg),
        KernelKind::AgKvAttention => attention::reference(cfg),
    }
}

/// Worst per-rank relative error of a run against reference outputs.
pub fn verify_run(run: &KernelRun, reference: &[Vec<f32>]) -> f32 {
    run.outputs
        .iter()
        .zip(reference)
        .map(|(got, want)| math::max_rel_err(got, want))
        .fold(0.0f32, f32::max)
}
