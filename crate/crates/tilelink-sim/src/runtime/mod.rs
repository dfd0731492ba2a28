//! The simulated multi-rank machine.
//!
//! A [`World`] owns the symmetric heap and hands out one fresh set of signal
//! boards per kernel invocation (epoch). Each rank runs up to three execution
//! contexts (host control, compute unit, copy unit) that share the heap;
//! correctness of heap access is guaranteed only by the signal discipline.

mod ctx;
mod engine;
mod heap;
mod signals;

pub use ctx::{NotifyTargets, RankCtx, Stage};
pub use engine::{spawn_copy_engine, Completion, CopyRequest, CopySlice, EngineHandle};
pub use heap::{state, DType, SymmetricTensor};
pub use signals::{ChannelLayout, EpochSignals, Region};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Result, SimError};

pub const TIMEOUT_ENV: &str = "TILELINK_SIM_TIMEOUT_MS";
const DEFAULT_TIMEOUT_MS: u64 = 10_000;

/// p2p or broadcast delivery for notify and data primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotifyMode {
    P2p,
    Broadcast,
}

#[derive(Debug, Clone)]
pub struct WorldOptions {
    /// Deadlock timeout; defaults to 10 s, overridable via `TILELINK_SIM_TIMEOUT_MS`.
    pub timeout: Option<Duration>,
    /// Track per-element publish states and flag undisciplined reads.
    pub race_check: bool,
}

impl Default for WorldOptions {
    fn default() -> Self {
        WorldOptions {
            timeout: None,
            race_check: false,
        }
    }
}

#[derive(Debug)]
pub struct World {
    world_size: usize,
    channels_per_rank: usize,
    timeout: Duration,
    race_check: bool,
    start: Instant,
    epoch: AtomicU64,
    tensors: Mutex<Vec<SymmetricTensor>>,
    current: Mutex<Option<Arc<EpochSignals>>>,
}

impl World {
    /// Bring up a world of `world_size` ranks with `channels_per_rank` barrier
    /// channels each. Boards start zeroed at epoch 0.
    pub fn init(world_size: usize, channels_per_rank: usize) -> Result<World> {
        World::init_with(world_size, channels_per_rank, WorldOptions::default())
    }

    pub fn init_with(
        world_size: usize,
        channels_per_rank: usize,
        options: WorldOptions,
    ) -> Result<World> {
        if world_size == 0 || channels_per_rank == 0 {
            return Err(SimError::config(format!(
                "world_size and channels_per_rank must be positive, got {world_size} and {channels_per_rank}"
            )));
        }
        let timeout = options.timeout.unwrap_or_else(|| {
            std::env::var(TIMEOUT_ENV)
                .ok()
                .and_then(|v| v.parse::<u64>().ok())
                .map(Duration::from_millis)
                .unwrap_or(Duration::from_millis(DEFAULT_TIMEOUT_MS))
        });
        Ok(World {
            world_size,
            channels_per_rank,
            timeout,
            race_check: options.race_check,
            start: Instant::now(),
            epoch: AtomicU64::new(0),
            tensors: Mutex::new(Vec::new()),
            current: Mutex::new(None),
        })
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn channels_per_rank(&self) -> usize {
        self.channels_per_rank
    }

    /// Global producer-consumer channels per stage: one per (rank, local channel).
    pub fn global_channels(&self) -> usize {
        self.world_size * self.channels_per_rank
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn race_check(&self) -> bool {
        self.race_check
    }

    pub fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::Acquire)
    }

    /// Allocate a symmetric tensor: every rank gets a zero-initialized buffer
    /// of the given shape, registered in the same order on all ranks.
    pub fn alloc_symmetric(&self, shape: &[usize], dtype: DType) -> Result<SymmetricTensor> {
        let mut reg = self.tensors.lock().unwrap();
        let t = SymmetricTensor::allocate(reg.len(), self.world_size, shape, dtype, self.race_check)?;
        reg.push(t.clone());
        Ok(t)
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.lock().unwrap().len()
    }

    /// Start a kernel invocation: bump the epoch and build fresh boards.
    /// Peer and host channels default to an expected count of 1; the
    /// producer-consumer region's expected counts must be registered from the
    /// active mapping before workers start.
    pub fn begin_epoch(&self, layout: ChannelLayout) -> Result<Arc<EpochSignals>> {
        let epoch = self.epoch.fetch_add(1, Ordering::AcqRel) + 1;
        let signals = Arc::new(EpochSignals::new(self.world_size, epoch, layout));
        for idx in 0..layout.peer {
            signals.set_expected_all(Region::Peer, idx, 1)?;
        }
        for idx in 0..layout.host {
            signals.set_expected_all(Region::Host, idx, 1)?;
        }
        *self.current.lock().unwrap() = Some(signals.clone());
        Ok(signals)
    }

    pub fn current_epoch_signals(&self) -> Option<Arc<EpochSignals>> {
        self.current.lock().unwrap().clone()
    }
}
