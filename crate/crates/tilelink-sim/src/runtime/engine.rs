//! Host-driven copy engine modeling DMA.
//!
//! One engine per rank, FIFO: requests complete in issue order on a dedicated
//! copy thread. Each completion may fire exactly one signal (with release
//! semantics, after the copied bytes are in place).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::thread::{Scope, ScopedJoinHandle};
use std::time::Duration;

use crate::error::{Result, SimError};
use crate::trace::{EventKind, TraceEvent, Unit};

use super::heap::SymmetricTensor;
use super::signals::{EpochSignals, Region};
use super::World;

/// One side of a copy: a contiguous element range on one rank's buffer.
#[derive(Debug, Clone)]
pub struct CopySlice {
    pub tensor: SymmetricTensor,
    pub rank: usize,
    pub lo: usize,
    pub len: usize,
}

impl CopySlice {
    pub fn new(tensor: &SymmetricTensor, rank: usize, lo: usize, len: usize) -> Self {
        CopySlice {
            tensor: tensor.clone(),
            rank,
            lo,
            len,
        }
    }

    /// Element range covering rows `[row_lo, row_hi)`.
    pub fn rows(tensor: &SymmetricTensor, rank: usize, row_lo: usize, row_hi: usize) -> Self {
        let w = tensor.row_width();
        CopySlice::new(tensor, rank, row_lo * w, (row_hi - row_lo) * w)
    }
}

/// Signal fired after a copy lands.
#[derive(Debug, Clone, Copy)]
pub enum Completion {
    None,
    Signal {
        rank: usize,
        region: Region,
        channel: usize,
    },
}

#[derive(Debug)]
pub struct CopyRequest {
    pub src: CopySlice,
    pub dst: CopySlice,
    pub completion: Completion,
    /// Tile the copy moves, for tracing only.
    pub tile: Option<usize>,
}

/// Issuing-side handle: enqueue requests and observe completions.
#[derive(Clone)]
pub struct EngineHandle {
    tx: Sender<CopyRequest>,
    issued: Arc<AtomicU64>,
    completed: Arc<AtomicU64>,
    rank: usize,
}

impl EngineHandle {
    pub fn enqueue(&self, req: CopyRequest) -> Result<()> {
        if req.src.len != req.dst.len {
            return Err(SimError::shape(format!(
                "copy range size mismatch: src {} vs dst {}",
                req.src.len, req.dst.len
            )));
        }
        self.issued.fetch_add(1, Ordering::Release);
        self.tx
            .send(req)
            .map_err(|_| SimError::config(format!("copy engine on rank {} is gone", self.rank)))
    }

    pub fn issued(&self) -> u64 {
        self.issued.load(Ordering::Acquire)
    }

    pub fn completed(&self) -> u64 {
        self.completed.load(Ordering::Acquire)
    }

    /// Block until every request issued so far has completed.
    pub fn drain(&self, timeout: Duration) -> Result<()> {
        let target = self.issued();
        let deadline = std::time::Instant::now() + timeout;
        while self.completed() < target {
            std::thread::yield_now();
            if std::time::Instant::now() >= deadline {
                return Err(SimError::config(format!(
                    "copy engine on rank {} stalled: {}/{} requests complete",
                    self.rank,
                    self.completed(),
                    target
                )));
            }
        }
        Ok(())
    }
}

/// Spawn one rank's copy engine inside a thread scope. The engine exits when
/// every [`EngineHandle`] clone has been dropped; its join handle yields the
/// engine's trace events.
pub fn spawn_copy_engine<'scope, 'env>(
    scope: &'scope Scope<'scope, 'env>,
    world: &'env World,
    signals: Arc<EpochSignals>,
    rank: usize,
    latency: Duration,
) -> (
    EngineHandle,
    ScopedJoinHandle<'scope, Result<Vec<TraceEvent>>>,
) {
    let (tx, rx) = channel::<CopyRequest>();
    let issued = Arc::new(AtomicU64::new(0));
    let completed = Arc::new(AtomicU64::new(0));
    let handle = EngineHandle {
        tx,
        issued,
        completed: completed.clone(),
        rank,
    };
    let join = scope.spawn(move || {
        let mut trace = Vec::new();
        while let Ok(req) = rx.recv() {
            trace.push(TraceEvent {
                rank,
                unit: Unit::Copy,
                kind: EventKind::CopyStart,
                tile: req.tile,
                channel: None,
                t_ns: world.now_ns(),
            });
            if !latency.is_zero() {
                std::thread::sleep(latency);
            }
            SymmetricTensor::copy_range(
                &req.src.tensor,
                req.src.rank,
                req.src.lo,
                &req.dst.tensor,
                req.dst.rank,
                req.dst.lo,
                req.src.len,
            )?;
            req.dst
                .tensor
                .publish_range(req.dst.rank, req.dst.lo, req.dst.lo + req.dst.len)?;
            if let Completion::Signal {
                rank: target,
                region,
                channel,
            } = req.completion
            {
                signals.notify(target, region, channel)?;
                trace.push(TraceEvent {
                    rank,
                    unit: Unit::Copy,
                    kind: EventKind::Notify,
                    tile: req.tile,
                    channel: Some(flat_channel(&signals, region, channel)),
                    t_ns: world.now_ns(),
                });
            }
            completed.fetch_add(1, Ordering::Release);
            trace.push(TraceEvent {
                rank,
                unit: Unit::Copy,
                kind: EventKind::CopyEnd,
                tile: req.tile,
                channel: None,
                t_ns: world.now_ns(),
            });
        }
        Ok(trace)
    });
    (handle, join)
}

/// Flat per-board channel index: `[producer-consumer | peer | host]`.
pub(super) fn flat_channel(signals: &EpochSignals, region: Region, idx: usize) -> usize {
    match region {
        Region::ProducerConsumer => idx,
        Region::Peer => signals.layout.producer_consumer + idx,
        Region::Host => signals.layout.producer_consumer + signals.layout.peer + idx,
    }
}
