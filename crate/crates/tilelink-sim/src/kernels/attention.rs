//! All-gather KV + attention: gather the sequence-sharded K and V while a
//! streaming (online-softmax) attention consumes arrived key/value blocks.
//!
//! Each rank holds the full query set and a `seq / world_size` row shard of K
//! and V, laid out `[seq, heads * head_dim]`. Both tensors signal the same
//! stage, so every communication tile carries two expected arrivals.

use std::sync::Mutex;

use crate::config::{tile_schedule, KernelConfig, ResourceBinding};
use crate::error::Result;
use crate::kernels::ag::{ag_comm_worker, AgParams};
use crate::kernels::{inputs, join_workers, KernelRun, RunMode, RunOptions};
use crate::mapping::{StaticMapping, TileId};
use crate::runtime::{spawn_copy_engine, ChannelLayout, DType, RankCtx, Stage, World};
use crate::trace::Unit;

pub struct Inputs {
    /// Per-rank queries, `heads x seq x head_dim`.
    pub q: Vec<Vec<f32>>,
    /// Per-rank K shard, `(seq / world) x (heads * head_dim)`.
    pub k_shards: Vec<Vec<f32>>,
    /// Per-rank V shard, same layout as K.
    pub v_shards: Vec<Vec<f32>>,
}

pub fn gen_inputs(cfg: &KernelConfig) -> Inputs {
    let world = cfg.world_size;
    let width = cfg.heads * cfg.head_dim;
    let spr = cfg.seq / world;
    Inputs {
        q: (0..world)
            .map(|r| inputs::int_matrix(cfg.seed, 0x6000 + r as u64, cfg.heads * cfg.seq * cfg.head_dim))
            .collect(),
        k_shards: (0..world)
            .map(|r| inputs::int_matrix(cfg.seed, 0x7000 + r as u64, spr * width))
            .collect(),
        v_shards: (0..world)
            .map(|r| inputs::int_matrix(cfg.seed, 0x8000 + r as u64, spr * width))
            .collect(),
    }
}

pub fn reference(cfg: &KernelConfig) -> Result<Vec<Vec<f32>>> {
    let ins = gen_inputs(cfg);
    Ok(reference_with_inputs(cfg, &ins))
}

pub fn reference_with_inputs(cfg: &KernelConfig, ins: &Inputs) -> Vec<Vec<f32>> {
    let (heads, d, seq) = (cfg.heads, cfg.head_dim, cfg.seq);
    let width = heads * d;
    let k_full = ins.k_shards.concat();
    let v_full = ins.v_shards.concat();
    let scale = 1.0 / (d as f32).sqrt();
    (0..cfg.world_size)
        .map(|r| {
            let q = &ins.q[r];
            let mut out = vec![0.0f32; heads * seq * d];
            for h in 0..heads {
                for i in 0..seq {
                    let qrow = &q[h * seq * d + i * d..h * seq * d + (i + 1) * d];
                    let scores: Vec<f32> = (0..seq)
                        .map(|j| {
                            let krow = &k_full[j * width + h * d..j * width + (h + 1) * d];
                            scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let weights: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
                    let denom: f32 = weights.iter().sum();
                    let orow = &mut out[h * seq * d + i * d..h * seq * d + (i + 1) * d];
                    for (j, w) in weights.iter().enumerate() {
                        let vrow = &v_full[j * width + h * d..j * width + (h + 1) * d];
                        for dd in 0..d {
                            orow[dd] += w / denom * vrow[dd];
                        }
                    }
                }
            }
            out
        })
        .collect()
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
    let width = cfg.heads * cfg.head_dim;
    let spr = cfg.seq / r_world;
    let map = StaticMapping::new(
        cfg.seq,
        r_world,
        cfg.channels_per_rank,
        cfg.comm_tile_rows,
        width,
    )?;
    let k_shard = world.alloc_symmetric(&[spr, width], DType::F32)?;
    let v_shard = world.alloc_symmetric(&[spr, width], DType::F32)?;
    let k_full = world.alloc_symmetric(&[cfg.seq, width], DType::F32)?;
    let v_full = world.alloc_symmetric(&[cfg.seq, width], DType::F32)?;
    for r in 0..r_world {
        k_shard.write_range_f32(r, 0, &ins.k_shards[r])?;
        v_shard.write_range_f32(r, 0, &ins.v_shards[r])?;
    }
    k_shard.publish_all()?;
    v_shard.publish_all()?;

    let layout = ChannelLayout {
        producer_consumer: r_world * cfg.channels_per_rank,
        peer: 0,
        host: r_world,
    };
    let signals = world.begin_epoch(layout)?;
    let stage = Stage::new(&map);
    if opts.mode == RunMode::CompOnly {
        let kf = ins.k_shards.concat();
        let vf = ins.v_shards.concat();
        for r in 0..r_world {
            k_full.write_range_f32(r, 0, &kf)?;
            v_full.write_range_f32(r, 0, &vf)?;
        }
        k_full.publish_all()?;
        v_full.publish_all()?;
    } else {
        // K and V each signal every tile once.
        stage.register_expected(&signals, 2)?;
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
                    let k_shard = &k_shard;
                    let v_shard = &v_shard;
                    let k_full = &k_full;
                    let v_full = &v_full;
                    handles.push(s.spawn(move || {
                        let unit = if use_engine { Unit::Host } else { Unit::Compute };
                        let mut ctx = RankCtx::new(world, signals, r, unit);
                        if let Some(e) = engine {
                            ctx = ctx.with_engine(e);
                        }
                        let core_delay = if cfg.binding == ResourceBinding::Core {
                            opts.comm_delay
                        } else {
                            None
                        };
                        let pk = AgParams {
                            map,
                            stage: Stage::new(map),
                            shard: k_shard,
                            gathered: k_full,
                            mode: cfg.mode,
                            binding: cfg.binding,
                            order: cfg.order,
                            delay: core_delay,
                            sabotage: opts.sabotage_drop_notify,
                        };
                        ag_comm_worker(&mut ctx, &pk, wi, cfg.comm_workers)?;
                        let pv = AgParams {
                            map,
                            stage: Stage::new(map),
                            shard: v_shard,
                            gathered: v_full,
                            mode: cfg.mode,
                            binding: cfg.binding,
                            order: cfg.order,
                            delay: core_delay,
                            sabotage: false,
                        };
                        ag_comm_worker(&mut ctx, &pv, wi, cfg.comm_workers)?;
                        // Host-level completion barrier when the engine moved
                        // the data: every peer learns this rank's shard is
                        // fully resident everywhere.
                        if use_engine && wi == 0 && r_world > 1 {
                            for dst in (0..r_world).filter(|&d| d != r) {
                                ctx.rank_notify(TileId(0), dst)?;
                            }
                            for src in (0..r_world).filter(|&d| d != r) {
                                ctx.rank_wait(src)?;
                            }
                        }
                        Ok(ctx.into_trace())
                    }));
                }
            }
            {
                let signals = signals.clone();
                let map = &map;
                let k_full = &k_full;
                let v_full = &v_full;
                let outputs = &outputs;
                let ins = &ins;
                handles.push(s.spawn(move || {
                    let mut ctx = RankCtx::new(world, signals, r, Unit::Compute);
                    let stage = Stage::new(map);
                    let (heads, d, seq) = (cfg.heads, cfg.head_dim, cfg.seq);
                    let scale = 1.0 / (d as f32).sqrt();
                    let schedule = tile_schedule(cfg.order, r, r_world);
                    let blocks: Vec<(usize, usize)> = schedule
                        .iter()
                        .flat_map(|&src| {
                            (src * spr..(src + 1) * spr)
                                .step_by(cfg.comp_tile_rows)
                                .map(move |lo| (lo, (lo + cfg.comp_tile_rows).min((src + 1) * spr)))
                        })
                        .collect();
                    if opts.mode == RunMode::CommOnly {
                        for &(lo, hi) in &blocks {
                            ctx.consumer_rows_wait(&stage, lo, hi)?;
                        }
                        *outputs[r].lock().unwrap() = vec![0.0; heads * seq * d];
                        return Ok(ctx.into_trace());
                    }
                    let q = &ins.q[r];
                    let mut out = vec![0.0f32; heads * seq * d];
                    for h in 0..heads {
                        let mut m = vec![f32::NEG_INFINITY; seq];
                        let mut l = vec![0.0f32; seq];
                        let mut acc = vec![0.0f32; seq * d];
                        for (bi, &(lo, hi)) in blocks.iter().enumerate() {
                            if h == 0 {
                                ctx.consumer_rows_wait(&stage, lo, hi)?;
                            }
                            ctx.tile_start(h * blocks.len() + bi);
                            let kblk = k_full.read_range_checked(r, lo * width, hi * width)?;
                            let vblk = v_full.read_range_checked(r, lo * width, hi * width)?;
                            for i in 0..seq {
                                let qrow = &q[h * seq * d + i * d..h * seq * d + (i + 1) * d];
                                for j in 0..hi - lo {
                                    let krow = &kblk[j * width + h * d..j * width + (h + 1) * d];
                                    let s: f32 = scale
                                        * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>();
                                    let m_new = m[i].max(s);
                                    if m_new > m[i] {
                                        let c = (m[i] - m_new).exp();
                                        l[i] *= c;
                                        for dd in 0..d {
                                            acc[i * d + dd] *= c;
                                        }
                                        m[i] = m_new;
                                    }
                                    let w = (s - m[i]).exp();
                                    l[i] += w;
                                    let vrow = &vblk[j * width + h * d..j * width + (h + 1) * d];
                                    for dd in 0..d {
                                        acc[i * d + dd] += w * vrow[dd];
                                    }
                                }
                            }
                            ctx.tile_end(h * blocks.len() + bi);
                        }
                        for i in 0..seq {
                            for dd in 0..d {
                                out[h * seq * d + i * d + dd] = acc[i * d + dd] / l[i];
                            }
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
