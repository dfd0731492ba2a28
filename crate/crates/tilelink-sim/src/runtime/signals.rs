//! Per-rank barrier channels with release/acquire semantics.
//!
//! Each rank owns a board of arrival counters, split into three disjoint index
//! regions so that producer-consumer, peer, and host signaling can never
//! alias: `[producer-consumer | peer | host]`. Counters only ever increase
//! within an epoch; a fresh board is built at every kernel launch, so signals
//! from a previous epoch cannot satisfy waits in the next one.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use crate::error::{BlockedUnit, SimError};

/// Channel index region on a board.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    ProducerConsumer,
    Peer,
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub producer_consumer: usize,
    pub peer: usize,
    pub host: usize,
}

#[derive(Debug)]
struct Channel {
    count: AtomicU64,
    expected: AtomicU64,
}

impl Channel {
    fn new() -> Self {
        Channel {
            count: AtomicU64::new(0),
            expected: AtomicU64::new(0),
        }
    }
}

#[derive(Debug)]
struct Board {
    producer_consumer: Vec<Channel>,
    peer: Vec<Channel>,
    host: Vec<Channel>,
}

/// All boards for one kernel invocation (epoch).
#[derive(Debug)]
pub struct EpochSignals {
    pub epoch: u64,
    pub layout: ChannelLayout,
    boards: Vec<Board>,
}

impl EpochSignals {
    pub fn new(world_size: usize, epoch: u64, layout: ChannelLayout) -> Self {
        let boards = (0..world_size)
            .map(|_| Board {
                producer_consumer: (0..layout.producer_consumer).map(|_| Channel::new()).collect(),
                peer: (0..layout.peer).map(|_| Channel::new()).collect(),
                host: (0..layout.host).map(|_| Channel::new()).collect(),
            })
            .collect();
        EpochSignals {
            epoch,
            layout,
            boards,
        }
    }

    pub fn world_size(&self) -> usize {
        self.boards.len()
    }

    fn channel(&self, rank: usize, region: Region, idx: usize) -> Result<&Channel, SimError> {
        let board = self.boards.get(rank).ok_or_else(|| {
            SimError::config(format!("rank {rank} out of range ({})", self.boards.len()))
        })?;
        let slots = match region {
            Region::ProducerConsumer => &board.producer_consumer,
            Region::Peer => &board.peer,
            Region::Host => &board.host,
        };
        slots.get(idx).ok_or_else(|| {
            SimError::config(format!(
                "channel {idx} out of range for {region:?} region ({} slots)",
                slots.len()
            ))
        })
    }

    /// Increment an arrival counter with release semantics: every write the
    /// notifier performed before this call is visible to a waiter that
    /// observes the new count.
    pub fn notify(&self, rank: usize, region: Region, idx: usize) -> Result<u64, SimError> {
        Ok(self.channel(rank, region, idx)?.count.fetch_add(1, Ordering::Release) + 1)
    }

    pub fn count(&self, rank: usize, region: Region, idx: usize) -> Result<u64, SimError> {
        Ok(self.channel(rank, region, idx)?.count.load(Ordering::Acquire))
    }

    /// Register the arrival count a waiter on this channel should block for.
    /// Called at kernel launch, before any worker starts.
    pub fn set_expected(&self, rank: usize, region: Region, idx: usize, expected: u64) -> Result<(), SimError> {
        self.channel(rank, region, idx)?
            .expected
            .store(expected, Ordering::Release);
        Ok(())
    }

    /// Register the same expected count on every rank's board.
    pub fn set_expected_all(&self, region: Region, idx: usize, expected: u64) -> Result<(), SimError> {
        for rank in 0..self.boards.len() {
            self.set_expected(rank, region, idx, expected)?;
        }
        Ok(())
    }

    pub fn expected(&self, rank: usize, region: Region, idx: usize) -> Result<u64, SimError> {
        Ok(self.channel(rank, region, idx)?.expected.load(Ordering::Acquire))
    }

    /// Block until the counter reaches the registered expected count.
    pub fn wait_expected(
        &self,
        rank: usize,
        region: Region,
        idx: usize,
        timeout: Duration,
        unit: &'static str,
    ) -> Result<(), SimError> {
        let required = self.expected(rank, region, idx)?;
        self.wait_at_least(rank, region, idx, required, timeout, unit)
    }

    /// Block until the counter reaches `required`, with acquire semantics on
    /// success. Bounded spin, then yield; a wait that outlives `timeout`
    /// reports the blocked unit instead of hanging.
    pub fn wait_at_least(
        &self,
        rank: usize,
        region: Region,
        idx: usize,
        required: u64,
        timeout: Duration,
        unit: &'static str,
    ) -> Result<(), SimError> {
        let ch = self.channel(rank, region, idx)?;
        if ch.count.load(Ordering::Acquire) >= required {
            return Ok(());
        }
        let deadline = Instant::now() + timeout;
        let mut spins = 0u32;
        loop {
            let observed = ch.count.load(Ordering::Acquire);
            if observed >= required {
                return Ok(());
            }
            spins += 1;
            if spins < 128 {
                std::hint::spin_loop();
            } else {
                std::thread::yield_now();
                if Instant::now() >= deadline {
                    return Err(SimError::Deadlock {
                        blocked: vec![BlockedUnit {
                            rank,
                            unit,
                            region,
                            channel: idx,
                            observed,
                            required,
                            epoch: self.epoch,
                        }],
                    });
                }
            }
        }
    }
}
