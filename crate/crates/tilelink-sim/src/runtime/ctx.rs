//! Per-worker execution context and the device/host signal primitives.

use std::sync::Arc;
use std::time::Duration;

use crate::error::{Result, SimError};
use crate::mapping::{TileId, TileMap};
use crate::trace::{EventKind, TraceEvent, Unit};

use super::engine::{flat_channel, EngineHandle};
use super::signals::{EpochSignals, Region};
use super::{NotifyMode, World};

/// A producer-consumer stage: a tile mapping plus the base offset of its
/// channels inside the board's producer-consumer region. Multi-stage kernels
/// give each stage its own slice of channels.
#[derive(Clone, Copy)]
pub struct Stage<'a> {
    pub map: &'a dyn TileMap,
    pub base: usize,
}

impl<'a> Stage<'a> {
    pub fn new(map: &'a dyn TileMap) -> Self {
        Stage { map, base: 0 }
    }

    pub fn with_base(map: &'a dyn TileMap, base: usize) -> Self {
        Stage { map, base }
    }

    pub fn channel(&self, t: TileId) -> Result<usize> {
        Ok(self.base + self.map.channel(t)?)
    }

    /// Register the expected arrival count per channel on every board:
    /// the number of tiles that signal each channel times `signals_per_tile`.
    pub fn register_expected(&self, signals: &EpochSignals, signals_per_tile: u64) -> Result<()> {
        for (ch, tiles) in self.map.tiles_per_channel().iter().enumerate() {
            signals.set_expected_all(
                Region::ProducerConsumer,
                self.base + ch,
                tiles * signals_per_tile,
            )?;
        }
        Ok(())
    }
}

/// Where a producer notify lands.
#[derive(Debug, Clone, Copy)]
pub enum NotifyTargets {
    /// Every rank's board (including the notifier's own).
    Broadcast,
    /// The rank the mapping resolves for the tile (its offset in the global
    /// tensor view).
    Mapped,
    /// An explicit rank; used by pull-mode local barriers.
    Rank(usize),
}

impl NotifyTargets {
    pub fn from_mode(mode: NotifyMode) -> Self {
        match mode {
            NotifyMode::P2p => NotifyTargets::Mapped,
            NotifyMode::Broadcast => NotifyTargets::Broadcast,
        }
    }
}

/// One execution context (host, compute, or copy unit) of one rank.
///
/// Owns its trace buffer; merge after join. All signal operations are safe to
/// invoke from any context concurrently.
pub struct RankCtx<'w> {
    pub(crate) world: &'w World,
    pub(crate) signals: Arc<EpochSignals>,
    pub(crate) rank: usize,
    pub(crate) unit: Unit,
    pub(crate) timeout: Duration,
    pub(crate) trace: Vec<TraceEvent>,
    pub(crate) engine: Option<EngineHandle>,
}

impl<'w> RankCtx<'w> {
    pub fn new(world: &'w World, signals: Arc<EpochSignals>, rank: usize, unit: Unit) -> Self {
        RankCtx {
            world,
            signals,
            rank,
            unit,
            timeout: world.timeout(),
            trace: Vec::new(),
            engine: None,
        }
    }

    pub fn with_engine(mut self, engine: EngineHandle) -> Self {
        self.engine = Some(engine);
        self
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world(&self) -> &'w World {
        self.world
    }

    pub fn engine(&self) -> Option<&EngineHandle> {
        self.engine.as_ref()
    }

    pub fn into_trace(self) -> Vec<TraceEvent> {
        self.trace
    }

    pub(crate) fn event(&mut self, kind: EventKind, tile: Option<usize>, channel: Option<usize>) {
        self.trace.push(TraceEvent {
            rank: self.rank,
            unit: self.unit,
            kind,
            tile,
            channel,
            t_ns: self.world.now_ns(),
        });
    }

    pub fn tile_start(&mut self, tile: usize) {
        self.event(EventKind::TileStart, Some(tile), None);
    }

    pub fn tile_end(&mut self, tile: usize) {
        self.event(EventKind::TileEnd, Some(tile), None);
    }

    fn notify_on(&mut self, rank: usize, region: Region, idx: usize, tile: Option<usize>) -> Result<()> {
        self.signals.notify(rank, region, idx)?;
        let flat = flat_channel(&self.signals, region, idx);
        self.event(EventKind::Notify, tile, Some(flat));
        Ok(())
    }

    fn wait_on(&mut self, region: Region, idx: usize, required: u64, tile: Option<usize>) -> Result<()> {
        let flat = flat_channel(&self.signals, region, idx);
        self.event(EventKind::WaitStart, tile, Some(flat));
        self.signals
            .wait_at_least(self.rank, region, idx, required, self.timeout, self.unit.name())?;
        self.event(EventKind::WaitEnd, tile, Some(flat));
        Ok(())
    }

    /// Mark a producer tile done and notify its consumers. Release semantics:
    /// all writes this context performed before the call are visible to any
    /// waiter that observes the arrival.
    pub fn producer_tile_notify(
        &mut self,
        stage: &Stage<'_>,
        t: TileId,
        targets: NotifyTargets,
    ) -> Result<()> {
        let ch = stage.channel(t)?;
        match targets {
            NotifyTargets::Broadcast => {
                for rank in 0..self.signals.world_size() {
                    self.notify_on(rank, Region::ProducerConsumer, ch, Some(t.0))?;
                }
            }
            NotifyTargets::Mapped => {
                let rank = stage.map.owner(t)?;
                self.notify_on(rank, Region::ProducerConsumer, ch, Some(t.0))?;
            }
            NotifyTargets::Rank(rank) => {
                self.notify_on(rank, Region::ProducerConsumer, ch, Some(t.0))?;
            }
        }
        Ok(())
    }

    /// Row-granular producer notify: signal each channel covering rows
    /// `[lo, hi)` once. Used when the producer's tile grid differs from the
    /// stage's communication grid.
    pub fn producer_rows_notify(
        &mut self,
        stage: &Stage<'_>,
        lo: usize,
        hi: usize,
        targets: NotifyTargets,
    ) -> Result<()> {
        for ch in stage.map.covering_channels(lo, hi)? {
            let idx = stage.base + ch;
            match targets {
                NotifyTargets::Broadcast => {
                    for rank in 0..self.signals.world_size() {
                        self.notify_on(rank, Region::ProducerConsumer, idx, None)?;
                    }
                }
                NotifyTargets::Mapped => {
                    return Err(SimError::config(
                        "row-granular notify has no mapped owner; use Broadcast or Rank",
                    ));
                }
                NotifyTargets::Rank(rank) => {
                    self.notify_on(rank, Region::ProducerConsumer, idx, None)?;
                }
            }
        }
        Ok(())
    }

    /// Block until every producer tile feeding rows `[lo, hi)` of `stage` has
    /// arrived on this rank's board. Acquire semantics on return.
    pub fn consumer_rows_wait(&mut self, stage: &Stage<'_>, lo: usize, hi: usize) -> Result<()> {
        for ch in stage.map.covering_channels(lo, hi)? {
            let idx = stage.base + ch;
            let required = self.signals.expected(self.rank, Region::ProducerConsumer, idx)?;
            if self.signals.count(self.rank, Region::ProducerConsumer, idx)? >= required {
                continue;
            }
            self.wait_on(Region::ProducerConsumer, idx, required, None)?;
        }
        Ok(())
    }

    /// Consumer-tile form: wait for the producer rows that consumer tile `t`
    /// (of `consumer`) depends on.
    pub fn consumer_tile_wait(
        &mut self,
        produced: &Stage<'_>,
        consumer: &dyn TileMap,
        t: TileId,
    ) -> Result<()> {
        let (lo, hi) = consumer.row_range(t)?;
        self.consumer_rows_wait(produced, lo, hi)
    }

    /// Mark the current tile done for a peer rank. Peer channels are keyed by
    /// (tile, target rank): tile `t` on the target's board.
    pub fn peer_tile_notify(&mut self, t: TileId, rank: usize) -> Result<()> {
        if rank >= self.signals.world_size() {
            return Err(SimError::config(format!(
                "peer rank {rank} out of range ({})",
                self.signals.world_size()
            )));
        }
        self.notify_on(rank, Region::Peer, t.0, Some(t.0))
    }

    /// Block until the peer tile from `peer_rank` arrives on this board.
    pub fn peer_tile_wait(&mut self, t: TileId, peer_rank: usize) -> Result<()> {
        if peer_rank >= self.signals.world_size() {
            return Err(SimError::config(format!(
                "peer rank {peer_rank} out of range ({})",
                self.signals.world_size()
            )));
        }
        let required = self.signals.expected(self.rank, Region::Peer, t.0)?;
        self.wait_on(Region::Peer, t.0, required, Some(t.0))
    }

    /// Host-side: tell another rank that data at `t` is ready. If this rank
    /// issued copy-engine requests, the notify is ordered after their
    /// completion, so a remote `rank_wait` observes the copied bytes.
    pub fn rank_notify(&mut self, t: TileId, rank: usize) -> Result<()> {
        if rank >= self.signals.world_size() {
            return Err(SimError::config(format!(
                "rank {rank} out of range ({})",
                self.signals.world_size()
            )));
        }
        if let Some(engine) = &self.engine {
            engine.drain(self.timeout)?;
        }
        self.notify_on(rank, Region::Host, self.rank, Some(t.0))
    }

    /// Host-side: block until `src_rank`'s host notify arrives.
    pub fn rank_wait(&mut self, src_rank: usize) -> Result<()> {
        if src_rank >= self.signals.world_size() {
            return Err(SimError::config(format!(
                "rank {src_rank} out of range ({})",
                self.signals.world_size()
            )));
        }
        let required = self.signals.expected(self.rank, Region::Host, src_rank)?;
        self.wait_on(Region::Host, src_rank, required, None)
    }
}
