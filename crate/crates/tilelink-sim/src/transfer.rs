//! Data primitives: core-driven tile push/pull across the symmetric heap and
//! the host-driven copy-engine entry point.
//!
//! Push/pull move whole mapped tiles (all columns of the tile's row span);
//! completion of a push precedes any subsequent notify by the same caller, so
//! the release/acquire contract of the signal primitives extends to the data.

use crate::error::{Result, SimError};
use crate::mapping::TileId;
use crate::runtime::{Completion, CopyRequest, CopySlice, RankCtx, Stage};
use crate::trace::Unit;

/// Destination of a push.
#[derive(Debug, Clone, Copy)]
pub enum PushTargets {
    /// Every rank's buffer, including the pusher's own.
    Broadcast,
    /// The rank the mapping resolves for the tile.
    Mapped,
    Rank(usize),
}

/// How source rows are laid out relative to the mapping's global row space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrcLayout {
    /// The tensor holds the full global row space on every rank.
    Global,
    /// Each rank holds only its own row shard; global rows are translated to
    /// shard-local rows through the tile's owner.
    Sharded,
}

impl RankCtx<'_> {
    /// Write a tile of data into remote symmetric buffers at the tile's
    /// mapped range.
    pub fn tile_push_data(
        &mut self,
        dst: &crate::runtime::SymmetricTensor,
        stage: &Stage<'_>,
        t: TileId,
        data: &[f32],
        targets: PushTargets,
    ) -> Result<()> {
        let (lo, hi) = stage.map.row_range(t)?;
        let width = dst.row_width();
        let expect = (hi - lo) * width;
        if data.len() != expect {
            return Err(SimError::shape(format!(
                "push tile {}: got {} elements, mapping expects {expect} ({} rows x {width})",
                t.0,
                data.len(),
                hi - lo
            )));
        }
        let ranks: Vec<usize> = match targets {
            PushTargets::Broadcast => (0..dst.world_size()).collect(),
            PushTargets::Mapped => vec![stage.map.owner(t)?],
            PushTargets::Rank(r) => vec![r],
        };
        for rank in ranks {
            dst.write_range_f32(rank, lo * width, data)?;
            dst.publish_range(rank, lo * width, lo * width + data.len())?;
        }
        Ok(())
    }

    /// Read a tile of data from remote symmetric buffers. The caller must
    /// hold the signal covering the tile; with the race checker on, a read of
    /// a non-published range fails.
    pub fn tile_pull_data(
        &mut self,
        src: &crate::runtime::SymmetricTensor,
        stage: &Stage<'_>,
        t: TileId,
        layout: SrcLayout,
        broadcast: bool,
    ) -> Result<Vec<f32>> {
        let (lo, hi) = stage.map.row_range(t)?;
        let width = src.row_width();
        if broadcast {
            if layout != SrcLayout::Sharded {
                return Err(SimError::config(
                    "broadcast pull requires a sharded source tensor",
                ));
            }
            // Concatenate every rank's copy of the tile's shard-local rows,
            // ascending rank order.
            let owner = stage.map.owner(t)?;
            let (l_lo, l_hi) = self.shard_local(src, owner, lo, hi)?;
            let mut out = Vec::with_capacity((l_hi - l_lo) * width * src.world_size());
            for rank in 0..src.world_size() {
                out.extend(src.read_range_checked(rank, l_lo * width, l_hi * width)?);
            }
            Ok(out)
        } else {
            let owner = stage.map.owner(t)?;
            let (l_lo, l_hi) = match layout {
                SrcLayout::Global => (lo, hi),
                SrcLayout::Sharded => self.shard_local(src, owner, lo, hi)?,
            };
            src.read_range_checked(owner, l_lo * width, l_hi * width)
        }
    }

    fn shard_local(
        &self,
        src: &crate::runtime::SymmetricTensor,
        owner: usize,
        lo: usize,
        hi: usize,
    ) -> Result<(usize, usize)> {
        let shard_rows = src.rows();
        let base = owner * shard_rows;
        if lo < base || hi > base + shard_rows {
            return Err(SimError::shape(format!(
                "rows [{lo},{hi}) escape rank {owner}'s shard [{base},{})",
                base + shard_rows
            )));
        }
        Ok((lo - base, hi - base))
    }

    /// Enqueue a copy on this rank's copy engine. Host context only; the data
    /// direction follows the order of the source and destination slices (a
    /// remote source is a pull, a remote destination a push).
    pub fn rank_copy_data(
        &mut self,
        src: CopySlice,
        dst: CopySlice,
        completion: Completion,
        tile: Option<usize>,
    ) -> Result<()> {
        if self.unit != Unit::Host {
            return Err(SimError::config(format!(
                "rank_copy_data must be issued from a host context, not {}",
                self.unit.name()
            )));
        }
        if src.len != dst.len {
            return Err(SimError::shape(format!(
                "copy range size mismatch: src {} vs dst {}",
                src.len, dst.len
            )));
        }
        let engine = self.engine.as_ref().ok_or_else(|| {
            SimError::config(format!("rank {} has no copy engine bound", self.rank))
        })?;
        engine.enqueue(CopyRequest {
            src,
            dst,
            completion,
            tile,
        })
    }
}
