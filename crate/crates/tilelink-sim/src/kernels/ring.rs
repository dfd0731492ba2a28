//! Ring reduce-scatter over a tiled row space.
//!
//! At step `s` (1-based), rank `r` forwards the running sum of shard
//! `(r + s) % world` to rank `r - 1`, having received the upstream sum for
//! that shard from rank `r + 1` at the previous step. After `world - 1`
//! steps each rank adds its own partial to the chain and keeps its shard.
//! Every (rank, tile) pair receives exactly once, so peer channels are keyed
//! by tile id with an expected count of one.

use std::time::Duration;

use crate::config::ResourceBinding;
use crate::error::Result;
use crate::mapping::{StaticMapping, TileMap};
use crate::runtime::{Completion, CopySlice, RankCtx, Region, Stage, SymmetricTensor};

pub(crate) struct RingRsParams<'a> {
    /// Stage whose signals gate the local partial rows a tile consumes.
    pub producer: Stage<'a>,
    /// Tile grid over the reduced row space; rank blocks are the scatter shards.
    pub comm: &'a StaticMapping,
    /// `[rows, width]` per-rank local partial sums.
    pub partial: &'a SymmetricTensor,
    /// `[rows, width]` receive staging; each row is written by exactly one peer.
    pub ring_buf: &'a SymmetricTensor,
    /// `[rows, width]` send staging for engine-driven forwarding.
    pub send_buf: &'a SymmetricTensor,
    pub binding: ResourceBinding,
    pub delay: Option<Duration>,
    /// Drop the first peer notify issued by rank 0.
    pub sabotage: bool,
}

fn tile_on_engine(binding: ResourceBinding, tile: usize) -> bool {
    match binding {
        ResourceBinding::Core => false,
        ResourceBinding::CopyEngine => true,
        ResourceBinding::Hybrid => tile % 2 == 0,
    }
}

/// Run one rank's reduce-scatter; `out` receives the rank's reduced shard
/// (rows `[r * rows_per_rank, ...)` of the global row space).
pub(crate) fn ring_reduce_scatter(
    ctx: &mut RankCtx<'_>,
    p: &RingRsParams<'_>,
    out: &mut [f32],
) -> Result<()> {
    let r = ctx.rank();
    let world = p.comm.world_size;
    let width = p.partial.row_width();
    let next = (r + 1) % world;
    let prev = (r + world - 1) % world;
    let mut may_drop = p.sabotage && r == 0;

    for s in 1..world {
        let shard = (r + s) % world;
        for t in p.comm.tiles_of_rank(shard) {
            let drop_this = std::mem::take(&mut may_drop);
            let (lo, hi) = p.comm.row_range(t)?;
            ctx.tile_start(t.0);
            ctx.consumer_rows_wait(&p.producer, lo, hi)?;
            let mut acc = p.partial.read_range_checked(r, lo * width, hi * width)?;
            if s >= 2 {
                ctx.peer_tile_wait(t, next)?;
                let inc = p.ring_buf.read_range_checked(r, lo * width, hi * width)?;
                for (a, b) in acc.iter_mut().zip(&inc) {
                    *a += b;
                }
            }
            if tile_on_engine(p.binding, t.0) {
                p.send_buf.write_range_f32(r, lo * width, &acc)?;
                p.send_buf.publish_range(r, lo * width, hi * width)?;
                let completion = if drop_this {
                    Completion::None
                } else {
                    Completion::Signal {
                        rank: prev,
                        region: Region::Peer,
                        channel: t.0,
                    }
                };
                ctx.rank_copy_data(
                    CopySlice::rows(p.send_buf, r, lo, hi),
                    CopySlice::rows(p.ring_buf, prev, lo, hi),
                    completion,
                    Some(t.0),
                )?;
            } else {
                if let Some(d) = p.delay {
                    std::thread::sleep(d);
                }
                p.ring_buf.write_range_f32(prev, lo * width, &acc)?;
                p.ring_buf.publish_range(prev, lo * width, hi * width)?;
                if !drop_this {
                    ctx.peer_tile_notify(t, prev)?;
                }
            }
            ctx.tile_end(t.0);
        }
    }

    // Close the chain: add this rank's own partial and keep the shard.
    let base = r * p.comm.rows_per_rank;
    for t in p.comm.tiles_of_rank(r) {
        let (lo, hi) = p.comm.row_range(t)?;
        ctx.tile_start(t.0);
        ctx.consumer_rows_wait(&p.producer, lo, hi)?;
        let mut acc = p.partial.read_range_checked(r, lo * width, hi * width)?;
        if world > 1 {
            ctx.peer_tile_wait(t, next)?;
            let inc = p.ring_buf.read_range_checked(r, lo * width, hi * width)?;
            for (a, b) in acc.iter_mut().zip(&inc) {
                *a += b;
            }
        }
        out[(lo - base) * width..(hi - base) * width].copy_from_slice(&acc);
        ctx.tile_end(t.0);
    }
    Ok(())
}

/// Reference reduce-scatter shard: ascending-rank sum of `partials`, rows of
/// rank `r`'s block.
pub(crate) fn reference_shard(
    partials: &[Vec<f32>],
    rows: usize,
    width: usize,
    world: usize,
    r: usize,
) -> Vec<f32> {
    let rows_per_rank = rows.div_ceil(world);
    let lo = (r * rows_per_rank).min(rows);
    let hi = ((r + 1) * rows_per_rank).min(rows);
    let mut out = vec![0.0f32; (hi - lo) * width];
    for p in partials {
        for (o, v) in out.iter_mut().zip(&p[lo * width..hi * width]) {
            *o += v;
        }
    }
    out
}
