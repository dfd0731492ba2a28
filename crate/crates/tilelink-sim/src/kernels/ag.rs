//! Shared all-gather communication worker.
//!
//! Moves a row-sharded tensor into every rank's full-size buffer tile by
//! tile, signaling the mapped producer-consumer channel per tile. The same
//! worker serves push and pull transfer modes and all three resource
//! bindings; multiple workers per rank split the tile list round-robin.

use std::time::Duration;

use crate::config::{tile_schedule, ResourceBinding, TileOrder, TransferMode};
use crate::error::Result;
use crate::mapping::TileMap;
use crate::runtime::{
    Completion, CopySlice, NotifyTargets, RankCtx, Region, Stage, SymmetricTensor,
};
use crate::transfer::{PushTargets, SrcLayout};

pub(crate) struct AgParams<'a> {
    pub map: &'a crate::mapping::StaticMapping,
    pub stage: Stage<'a>,
    /// `[rows_per_rank, width]` per-rank shard, published before the epoch.
    pub shard: &'a SymmetricTensor,
    /// `[rows, width]` destination on every rank.
    pub gathered: &'a SymmetricTensor,
    pub mode: TransferMode,
    pub binding: ResourceBinding,
    pub order: TileOrder,
    /// Injected per-tile latency for core-path transfers; engine-path latency
    /// is configured on the engine itself.
    pub delay: Option<Duration>,
    /// Drop the first notify issued by rank 0's worker 0.
    pub sabotage: bool,
}

fn tile_on_engine(binding: ResourceBinding, tile: usize) -> bool {
    match binding {
        ResourceBinding::Core => false,
        ResourceBinding::CopyEngine => true,
        ResourceBinding::Hybrid => tile % 2 == 0,
    }
}

pub(crate) fn ag_comm_worker(
    ctx: &mut RankCtx<'_>,
    p: &AgParams<'_>,
    worker_idx: usize,
    num_workers: usize,
) -> Result<()> {
    let r = ctx.rank();
    let world = p.map.world_size;
    let width = p.gathered.row_width();
    let mut may_drop = p.sabotage && r == 0 && worker_idx == 0;

    match p.mode {
        TransferMode::Push => {
            for (i, t) in p.map.tiles_of_rank(r).into_iter().enumerate() {
                if i % num_workers != worker_idx {
                    continue;
                }
                let drop_this = std::mem::take(&mut may_drop);
                let (lo, hi) = p.map.row_range(t)?;
                let base = r * p.map.rows_per_rank;
                ctx.tile_start(t.0);
                if tile_on_engine(p.binding, t.0) {
                    let ch = p.stage.channel(t)?;
                    for dst in 0..world {
                        let completion = if drop_this {
                            Completion::None
                        } else {
                            Completion::Signal {
                                rank: dst,
                                region: Region::ProducerConsumer,
                                channel: ch,
                            }
                        };
                        ctx.rank_copy_data(
                            CopySlice::rows(p.shard, r, lo - base, hi - base),
                            CopySlice::rows(p.gathered, dst, lo, hi),
                            completion,
                            Some(t.0),
                        )?;
                    }
                } else {
                    if let Some(d) = p.delay {
                        std::thread::sleep(d);
                    }
                    let data =
                        p.shard
                            .read_range_checked(r, (lo - base) * width, (hi - base) * width)?;
                    ctx.tile_push_data(p.gathered, &p.stage, t, &data, PushTargets::Broadcast)?;
                    if !drop_this {
                        ctx.producer_tile_notify(&p.stage, t, NotifyTargets::Broadcast)?;
                    }
                }
                ctx.tile_end(t.0);
            }
        }
        TransferMode::Pull => {
            for src in tile_schedule(p.order, r, world) {
                for (i, t) in p.map.tiles_of_rank(src).into_iter().enumerate() {
                    if i % num_workers != worker_idx {
                        continue;
                    }
                    let drop_this = std::mem::take(&mut may_drop);
                    let (lo, hi) = p.map.row_range(t)?;
                    let base = src * p.map.rows_per_rank;
                    ctx.tile_start(t.0);
                    if tile_on_engine(p.binding, t.0) {
                        let completion = if drop_this {
                            Completion::None
                        } else {
                            Completion::Signal {
                                rank: r,
                                region: Region::ProducerConsumer,
                                channel: p.stage.channel(t)?,
                            }
                        };
                        ctx.rank_copy_data(
                            CopySlice::rows(p.shard, src, lo - base, hi - base),
                            CopySlice::rows(p.gathered, r, lo, hi),
                            completion,
                            Some(t.0),
                        )?;
                    } else {
                        if let Some(d) = p.delay {
                            std::thread::sleep(d);
                        }
                        let data =
                            ctx.tile_pull_data(p.shard, &p.stage, t, SrcLayout::Sharded, false)?;
                        p.gathered.write_range_f32(r, lo * width, &data)?;
                        p.gathered.publish_range(r, lo * width, hi * width)?;
                        if !drop_this {
                            ctx.producer_tile_notify(&p.stage, t, NotifyTargets::Rank(r))?;
                        }
                    }
                    ctx.tile_end(t.0);
                }
            }
        }
    }
    Ok(())
}
