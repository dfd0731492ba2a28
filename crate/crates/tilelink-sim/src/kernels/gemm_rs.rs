//! GEMM + ring reduce-scatter: each rank multiplies its depth shard of `A`
//! against its depth shard of `B`, and the ring reduces partial sums across
//! ranks while later row blocks are still being computed.
//!
//! `A` is `[m, k]` per rank (`k` is the per-rank depth shard) and `B` is
//! `[k, n]` per rank; the reduced `[m, n]` sum is scattered so rank `r` keeps
//! its row block.

use std::sync::Mutex;

use crate::config::{KernelConfig, ResourceBinding, TileOrder};
use crate::error::Result;
use crate::kernels::ring::{reference_shard, ring_reduce_scatter, RingRsParams};
use crate::kernels::{inputs, join_workers, math, KernelRun, RunMode, RunOptions};
use crate::mapping::{StaticMapping, TileMap};
use crate::runtime::{
    spawn_copy_engine, ChannelLayout, DType, NotifyTargets, RankCtx, Region, Stage, World,
};
use crate::trace::Unit;

pub struct Inputs {
    /// Per-rank `A` depth shard, `m x k`.
    pub a: Vec<Vec<f32>>,
    /// Per-rank `B` depth shard, `k x n`.
    pub b: Vec<Vec<f32>>,
}

pub fn gen_inputs(cfg: &KernelConfig) -> Inputs {
    Inputs {
        a: (0..cfg.world_size)
            .map(|r| inputs::int_matrix(cfg.seed, 0x1100 + r as u64, cfg.m * cfg.k))
            .collect(),
        b: (0..cfg.world_size)
            .map(|r| inputs::int_matrix(cfg.seed, 0x2100 + r as u64, cfg.k * cfg.n))
            .collect(),
    }
}

pub fn reference(cfg: &KernelConfig) -> Result<Vec<Vec<f32>>> {
    let ins = gen_inputs(cfg);
    let partials: Vec<Vec<f32>> = (0..cfg.world_size)
        .map(|r| math::matmul(&ins.a[r], &ins.b[r], cfg.m, cfg.k, cfg.n))
        .collect();
    Ok((0..cfg.world_size)
        .map(|r| reference_shard(&partials, cfg.m, cfg.n, cfg.world_size, r))
        .collect())
}

/// Row blocks of the producer GEMM, in the order rank `r` computes them:
/// ring order follows the reduce-scatter's consumption (shard `r+1` first),
/// all-to-all starts with the local shard and walks the rest ascending.
fn producer_blocks(cfg: &KernelConfig, map: &StaticMapping, r: usize) -> Vec<(usize, usize)> {
    let world = cfg.world_size;
    let shard_order: Vec<usize> = match cfg.order {
        TileOrder::Ring => (1..=world).map(|s| (r + s) % world).collect(),
        TileOrder::All2All => std::iter::once(r)
            .chain((0..world).filter(|&d| d != r))
            .collect(),
    };
    let mut pos = vec![0usize; world];
    for (i, &d) in shard_order.iter().enumerate() {
        pos[d] = i;
    }
    let mut blocks: Vec<(usize, usize)> = (0..cfg.m)
        .step_by(cfg.comp_tile_rows)
        .map(|lo| (lo, (lo + cfg.comp_tile_rows).min(cfg.m)))
        .collect();
    blocks.sort_by_key(|&(lo, _)| (pos[(lo / map.rows_per_rank).min(world - 1)], lo));
    blocks
}

pub fn run(world: &World, cfg: &KernelConfig, opts: &RunOptions) -> Result<KernelRun> {
    let ins = gen_inputs(cfg);
    run_with_inputs(world, cfg, opts, &ins)
}

pub fn run_with_inputs(
    world: &World,
    cfg: &KernelConfig,
    opts: &RunOptions,
    ins: &Inputs,
) -> Result<KernelRun> {
    let r_world = cfg.world_size;
    let map = StaticMapping::new(
        cfg.m,
        r_world,
        cfg.channels_per_rank,
        cfg.comm_tile_rows,
        cfg.n,
    )?;
    let partial = world.alloc_symmetric(&[cfg.m, cfg.n], DType::F32)?;
    let ring_buf = world.alloc_symmetric(&[cfg.m, cfg.n], DType::F32)?;
    let send_buf = world.alloc_symmetric(&[cfg.m, cfg.n], DType::F32)?;

    let layout = ChannelLayout {
        producer_consumer: r_world * cfg.channels_per_rank,
        peer: map.num_tiles(),
        host: r_world,
    };
    let signals = world.begin_epoch(layout)?;
    // Expected arrivals per channel: one per producer row block overlapping
    // the channel's rows. Identical on every rank (same block grid).
    if opts.mode != RunMode::CompOnly {
        let mut expected = vec![0u64; map.num_channels()];
        for lo in (0..cfg.m).step_by(cfg.comp_tile_rows) {
            let hi = (lo + cfg.comp_tile_rows).min(cfg.m);
            for ch in map.covering_channels(lo, hi)? {
                expected[ch] += 1;
            }
        }
        for (ch, &e) in expected.iter().enumerate() {
            signals.set_expected_all(Region::ProducerConsumer, ch, e)?;
        }
    }

    let use_engine = cfg.binding != ResourceBinding::Core && opts.mode != RunMode::CompOnly;
    let run_rs = opts.mode != RunMode::CompOnly;
    let outputs: Vec<Mutex<Vec<f32>>> = (0..r_world).map(|_| Mutex::new(Vec::new())).collect();

    let trace = std::thread::scope(|s| -> Result<Vec<crate::trace::TraceEvent>> {
        let mut engines = Vec::new();
        let mut engine_joins = Vec::new();
        if use_engine {
            for r in 0..r_world {
                let (h, j) = spawn_copy_engine(
                    s,
                    world,
                    signals.clone(),
                    r,
                    opts.comm_delay.unwrap_or_default(),
                );
                engines.push(h);
                engine_joins.push(j);
            }
        }
        let mut handles = Vec::new();
        for r in 0..r_world {
            // Producer GEMM.
            {
                let signals = signals.clone();
                let map = &map;
                let partial = &partial;
                let ins = &ins;
                handles.push(s.spawn(move || {
                    let mut ctx = RankCtx::new(world, signals, r, Unit::Compute);
                    let stage = Stage::new(map);
                    for (bi, (lo, hi)) in producer_blocks(cfg, map, r).into_iter().enumerate() {
                        ctx.tile_start(bi);
                        let rows = hi - lo;
                        let mut block = vec![0.0f32; rows * cfg.n];
                        if opts.mode != RunMode::CommOnly {
                            for jlo in (0..cfg.n).step_by(cfg.comp_tile_cols) {
                                let jhi = (jlo + cfg.comp_tile_cols).min(cfg.n);
                                for i in 0..rows {
                                    for kk in 0..cfg.k {
                                        let av = ins.a[r][(lo + i) * cfg.k + kk];
                                        if av == 0.0 {
                                            continue;
                                        }
                                        for j in jlo..jhi {
                                            block[i * cfg.n + j] += av * ins.b[r][kk * cfg.n + j];
                                        }
                                    }
                                }
                            }
                        }
                        partial.write_range_f32(r, lo * cfg.n, &block)?;
                        partial.publish_range(r, lo * cfg.n, hi * cfg.n)?;
                        if opts.mode != RunMode::CompOnly {
                            ctx.producer_rows_notify(&stage, lo, hi, NotifyTargets::Rank(r))?;
                        }
                        ctx.tile_end(bi);
                    }
                    Ok(ctx.into_trace())
                }));
            }
            // Reduce-scatter consumer.
            if run_rs {
                let signals = signals.clone();
                let engine = engines.get(r).cloned();
                let map = &map;
                let partial = &partial;
                let ring_buf = &ring_buf;
                let send_buf = &send_buf;
                let outputs = &outputs;
                handles.push(s.spawn(move || {
                    let unit = if use_engine { Unit::Host } else { Unit::Compute };
                    let mut ctx = RankCtx::new(world, signals, r, unit);
                    if let Some(e) = engine {
                        ctx = ctx.with_engine(e);
                    }
                    let lo = (r * map.rows_per_rank).min(cfg.m);
                    let hi = ((r + 1) * map.rows_per_rank).min(cfg.m);
                    let mut out = vec![0.0f32; (hi - lo) * cfg.n];
                    let p = RingRsParams {
                        producer: Stage::new(map),
                        comm: map,
                        partial,
                        ring_buf,
                        send_buf,
                        binding: cfg.binding,
                        delay: if cfg.binding == ResourceBinding::Core {
                            opts.comm_delay
                        } else {
                            None
                        },
                        sabotage: opts.sabotage_drop_notify,
                    };
                    ring_reduce_scatter(&mut ctx, &p, &mut out)?;
                    *outputs[r].lock().unwrap() = out;
                    Ok(ctx.into_trace())
                }));
            }
        }
        drop(engines);
        let mut trace = join_workers(handles)?;
        for j in engine_joins {
            match j.join() {
                Ok(Ok(mut t)) => trace.append(&mut t),
                Ok(Err(e)) => return Err(e),
                Err(_) => return Err(crate::error::SimError::config("copy engine panicked")),
            }
        }
        Ok(trace)
    })?;

    let outputs = if run_rs {
        outputs
            .into_iter()
            .map(|m| m.into_inner().unwrap())
            .collect()
    } else {
        // Compute-only: each rank keeps its unreduced partial shard.
        (0..r_world)
            .map(|r| {
                let lo = (r * map.rows_per_rank).min(cfg.m);
                let hi = ((r + 1) * map.rows_per_rank).min(cfg.m);
                partial.read_range_f32(r, lo * cfg.n, hi * cfg.n)
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(KernelRun { outputs, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{KernelKind, TransferMode};
    use crate::kernels::{reference_outputs, run_kernel, verify_run};
    use crate::runtime::World;

    fn cfg(world: usize) -> KernelConfig {
        KernelConfig {
            kind: KernelKind::GemmRingRs,
            world_size: world,
            channels_per_rank: 2,
            m: 64,
            n: 16,
            k: 8,
            tokens: 0,
            hidden: 0,
            intermediate: 0,
            experts: 0,
            topk: 0,
            heads: 0,
            head_dim: 0,
            seq: 0,
            comm_tile_rows: 8,
            comp_tile_rows: 16,
            comp_tile_cols: 16,
            order: TileOrder::Ring,
            binding: ResourceBinding::Core,
            mode: TransferMode::Push,
            comm_workers: 1,
            seed: 5,
        }
    }

    #[test]
    fn single_rank_is_local_gemm() {
        let c = cfg(1);
        let world = World::init(1, c.channels_per_rank).unwrap();
        let run = run_kernel(&world, &c, &RunOptions::default()).unwrap();
        let want = reference_outputs(&c).unwrap();
        assert_eq!(run.outputs[0], want[0]);
    }

    #[test]
    fn four_ranks_sum_matches_reference() {
        let c = cfg(4);
        let world = World::init(4, c.channels_per_rank).unwrap();
        let run = run_kernel(&world, &c, &RunOptions::default()).unwrap();
        let want = reference_outputs(&c).unwrap();
        assert!(verify_run(&run, &want) < 1e-5);
    }

    #[test]
    fn all_ones_yields_k_times_world() {
        // With A and B all ones each partial element is k, and the ring sum
        // over ranks gives exactly k * world_size.
        let c = cfg(4);
        let world = World::init(4, c.channels_per_rank).unwrap();
        let ones = Inputs {
            a: (0..4).map(|_| vec![1.0; c.m * c.k]).collect(),
            b: (0..4).map(|_| vec![1.0; c.k * c.n]).collect(),
        };
        let run = run_with_inputs(&world, &c, &RunOptions::default(), &ones).unwrap();
        let want = (c.k * 4) as f32;
        for r in 0..4 {
            assert!(run.outputs[r].iter().all(|&v| v == want), "rank {r}");
        }
    }

    #[test]
    fn copy_engine_ring_matches() {
        let mut c = cfg(4);
        c.binding = ResourceBinding::CopyEngine;
        let world = World::init(4, c.channels_per_rank).unwrap();
        let run = run_kernel(&world, &c, &RunOptions::default()).unwrap();
        let want = reference_outputs(&c).unwrap();
        assert!(verify_run(&run, &want) < 1e-5);
    }
}
