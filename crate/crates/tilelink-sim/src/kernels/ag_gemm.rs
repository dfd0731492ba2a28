//! All-gather + GEMM: gather the row-sharded activation `A` while the GEMM
//! consumes already-arrived row blocks against the local weight shard `B`.
//!
//! `A` is `[m, k]` sharded by rows across ranks; each rank holds its own
//! `[k, n]` weight `B` and produces the full `[m, n]` product for its output
//! shard of the column space.

use std::sync::Mutex;

use crate::config::{tile_schedule, KernelConfig, ResourceBinding};
use crate::error::Result;
use crate::kernels::ag::{ag_comm_worker, AgParams};
use crate::kernels::{inputs, join_workers, KernelRun, RunMode, RunOptions};
use crate::mapping::StaticMapping;
use crate::runtime::{spawn_copy_engine, ChannelLayout, DType, RankCtx, Stage, World};
use crate::trace::Unit;

pub struct Inputs {
    /// Per-rank `A` row shards, `shard_rows(r) x k`.
    pub a_shards: Vec<Vec<f32>>,
    /// Per-rank `B`, `k x n`.
    pub b: Vec<Vec<f32>>,
}

pub fn shard_rows(m: usize, world: usize, r: usize) -> usize {
    let rpr = m.div_ceil(world);
    m.saturating_sub(r * rpr).min(rpr)
}

pub fn gen_inputs(cfg: &KernelConfig) -> Inputs {
    let world = cfg.world_size;
    Inputs {
        a_shards: (0..world)
            .map(|r| {
                inputs::int_matrix(cfg.seed, 0x1000 + r as u64, shard_rows(cfg.m, world, r) * cfg.k)
            })
            .collect(),
        b: (0..world)
            .map(|r| inputs::int_matrix(cfg.seed, 0x2000 + r as u64, cfg.k * cfg.n))
            .collect(),
    }
}

fn gather_global(ins: &Inputs) -> Vec<f32> {
    ins.a_shards.concat()
}

pub fn reference(cfg: &KernelConfig) -> Result<Vec<Vec<f32>>> {
    let ins = gen_inputs(cfg);
    let a = gather_global(&ins);
    Ok((0..cfg.world_size)
        .map(|r| crate::kernels::math::matmul(&a, &ins.b[r], cfg.m, cfg.k, cfg.n))
        .collect())
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
        cfg.k,
    )?;
    let shard = world.alloc_symmetric(&[map.rows_per_rank, cfg.k], DType::F32)?;
    let gathered = world.alloc_symmetric(&[cfg.m, cfg.k], DType::F32)?;
    for r in 0..r_world {
        shard.write_range_f32(r, 0, &ins.a_shards[r])?;
    }
    shard.publish_all()?;

    let layout = ChannelLayout {
        producer_consumer: r_world * cfg.channels_per_rank,
        peer: 0,
        host: r_world,
    };
    let signals = world.begin_epoch(layout)?;
    let stage = Stage::new(&map);
    if opts.mode == RunMode::CompOnly {
        let global = gather_global(ins);
        for r in 0..r_world {
            gathered.write_range_f32(r, 0, &global)?;
        }
        gathered.publish_all()?;
        // Expected counts stay zero: every consumer wait is immediate.
    } else {
        stage.register_expected(&signals, 1)?;
    }

    let use_engine = cfg.binding != ResourceBinding::Core && opts.mode != RunMode::CompOnly;
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
            if opts.mode != RunMode::CompOnly {
                for wi in 0..cfg.comm_workers {
                    let signals = signals.clone();
                    let engine = engines.get(r).cloned();
                    let map = &map;
                    let shard = &shard;
                    let gathered = &gathered;
                    handles.push(s.spawn(move || {
                        let unit = if use_engine { Unit::Host } else { Unit::Compute };
                        let mut ctx = RankCtx::new(world, signals, r, unit);
                        if let Some(e) = engine {
                            ctx = ctx.with_engine(e);
                        }
                        let p = AgParams {
                            map,
                            stage: Stage::new(map),
                            shard,
                            gathered,
                            mode: cfg.mode,
                            binding: cfg.binding,
                            order: cfg.order,
                            delay: if cfg.binding == ResourceBinding::Core {
                                opts.comm_delay
                            } else {
                                None
                            },
                            sabotage: opts.sabotage_drop_notify,
                        };
                        ag_comm_worker(&mut ctx, &p, wi, cfg.comm_workers)?;
                        Ok(ctx.into_trace())
                    }));
                }
            }
            {
                let signals = signals.clone();
                let map = &map;
                let gathered = &gathered;
                let outputs = &outputs;
                let ins = &ins;
                handles.push(s.spawn(move || {
                    let mut ctx = RankCtx::new(world, signals, r, Unit::Compute);
                    let stage = Stage::new(map);
                    let mut out = vec![0.0f32; cfg.m * cfg.n];
                    let schedule = tile_schedule(cfg.order, r, r_world);
                    let mut pos = vec![0usize; r_world];
                    for (i, &src) in schedule.iter().enumerate() {
                        pos[src] = i;
                    }
                    let mut blocks: Vec<(usize, usize)> = (0..cfg.m)
                        .step_by(cfg.comp_tile_rows)
                        .map(|lo| (lo, (lo + cfg.comp_tile_rows).min(cfg.m)))
                        .collect();
                    blocks.sort_by_key(|&(lo, _)| {
                        (pos[(lo / map.rows_per_rank).min(r_world - 1)], lo)
                    });
                    let ncol = cfg.n.div_ceil(cfg.comp_tile_cols);
                    for (bi, &(lo, hi)) in blocks.iter().enumerate() {
                        ctx.consumer_rows_wait(&stage, lo, hi)?;
                        for jb in 0..ncol {
                            let tile = bi * ncol + jb;
                            ctx.tile_start(tile);
                            if opts.mode != RunMode::CommOnly {
                                let jlo = jb * cfg.comp_tile_cols;
                                let jhi = (jlo + cfg.comp_tile_cols).min(cfg.n);
                                let a =
                                    gathered.read_range_checked(r, lo * cfg.k, hi * cfg.k)?;
                                let b = &ins.b[r];
                                for i in 0..hi - lo {
                                    for kk in 0..cfg.k {
                                        let av = a[i * cfg.k + kk];
                                        if av == 0.0 {
                                            continue;
                                        }
                                        for j in jlo..jhi {
                                            out[(lo + i) * cfg.n + j] += av * b[kk * cfg.n + j];
                                        }
                                    }
                                }
                            }
                            ctx.tile_end(tile);
                        }
                    }
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

    Ok(KernelRun {
        outputs: outputs
            .into_iter()
            .map(|m| m.into_inner().unwrap())
            .collect(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TransferMode;
    use crate::kernels::{reference_outputs, run_kernel, verify_run};
    use crate::runtime::World;

    fn cfg(world: usize) -> KernelConfig {
        KernelConfig {
            kind: crate::config::KernelKind::AgGemm,
            world_size: world,
            channels_per_rank: 2,
            m: 64,
            n: 24,
            k: 16,
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
            comp_tile_cols: 12,
            order: crate::config::TileOrder::Ring,
            binding: ResourceBinding::Core,
            mode: TransferMode::Push,
            comm_workers: 1,
            seed: 11,
        }
    }

    #[test]
    fn single_rank_matches_local_gemm() {
        let c = cfg(1);
        let world = World::init(1, c.channels_per_rank).unwrap();
        let run = run_kernel(&world, &c, &RunOptions::default()).unwrap();
        let want = reference_outputs(&c).unwrap();
        assert_eq!(run.outputs[0], want[0]);
    }

    #[test]
    fn two_ranks_exact_integer_match() {
        let c = cfg(2);
        let world = World::init(2, c.channels_per_rank).unwrap();
        let run = run_kernel(&world, &c, &RunOptions::default()).unwrap();
        let want = reference_outputs(&c).unwrap();
        // Integer inputs keep every partial product exact in f32.
        for r in 0..2 {
            assert_eq!(run.outputs[r], want[r], "rank {r}");
        }
    }

    #[test]
    fn pull_mode_and_mismatched_tile_sizes() {
        let mut c = cfg(4);
        c.mode = TransferMode::Pull;
        c.comm_tile_rows = 4;
        c.comp_tile_rows = 8;
        let world = World::init(4, c.channels_per_rank).unwrap();
        let run = run_kernel(&world, &c, &RunOptions::default()).unwrap();
        let want = reference_outputs(&c).unwrap();
        assert!(verify_run(&run, &want) < 1e-5);
    }

    #[test]
    fn copy_engine_binding_matches() {
        let mut c = cfg(2);
        c.binding = ResourceBinding::CopyEngine;
        let world = World::init(2, c.channels_per_rank).unwrap();
        let run = run_kernel(&world, &c, &RunOptions::default()).unwrap();
        let want = reference_outputs(&c).unwrap();
        assert!(verify_run(&run, &want) < 1e-5);
    }
}
