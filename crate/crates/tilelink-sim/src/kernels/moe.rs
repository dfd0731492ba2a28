//! MoE layer in two overlapped halves.
//!
//! First half: all-gather the token shards while a grouped GEMM consumes
//! arrived tokens through the dynamic (routed) tile mapping, producing the
//! expert-major grouped activations. Second half: a three-stage chain in one
//! epoch — per-row grouped GEMM against the down-projection, top-k scatter
//! with 1/k averaging back to token order, and a ring reduce-scatter that
//! sums the per-rank partials and returns each rank its token shard.
//!
//! Intermediate size is sharded across ranks, so every rank runs all grouped
//! rows against its own expert weight shards; the reduce-scatter closes the
//! sum over ranks.

use std::sync::Mutex;

use crate::config::{KernelConfig, ResourceBinding, TileOrder};
use crate::error::Result;
use crate::kernels::ag::{ag_comm_worker, AgParams};
use crate::kernels::ring::{reference_shard, ring_reduce_scatter, RingRsParams};
use crate::kernels::{inputs, join_workers, KernelRun, RunMode, RunOptions};
use crate::mapping::{build_dynamic_mapping, DynamicMapping, RoutingTable, StaticMapping, TileId, TileMap};
use crate::runtime::{
    spawn_copy_engine, ChannelLayout, DType, NotifyTargets, RankCtx, Stage, World,
};
use crate::trace::Unit;

pub struct Inputs {
    /// Per-rank token shard, `(tokens / world) x hidden`.
    pub tokens: Vec<Vec<f32>>,
    /// Per-rank up-projection shard, `experts x hidden x intermediate`.
    pub w1: Vec<Vec<f32>>,
    /// Per-rank down-projection shard, `experts x intermediate x hidden`.
    pub w2: Vec<Vec<f32>>,
    pub routing: RoutingTable,
}

pub fn gen_inputs(cfg: &KernelConfig) -> Result<Inputs> {
    let world = cfg.world_size;
    let spr = cfg.tokens / world;
    let (h, i, e) = (cfg.hidden, cfg.intermediate, cfg.experts);
    Ok(Inputs {
        tokens: (0..world)
            .map(|r| inputs::int_matrix(cfg.seed, 0x3000 + r as u64, spr * h))
            .collect(),
        w1: (0..world)
            .map(|r| inputs::int_matrix(cfg.seed, 0x4000 + r as u64, e * h * i))
            .collect(),
        w2: (0..world)
            .map(|r| inputs::int_matrix(cfg.seed, 0x5000 + r as u64, e * i * h))
            .collect(),
        routing: inputs::routing_from_seed(cfg.seed, cfg.tokens, e, cfg.topk, spr)?,
    })
}

pub fn reference(cfg: &KernelConfig) -> Result<Vec<Vec<f32>>> {
    let ins = gen_inputs(cfg)?;
    reference_with_inputs(cfg, &ins)
}

pub fn reference_with_inputs(cfg: &KernelConfig, ins: &Inputs) -> Result<Vec<Vec<f32>>> {
    let world = cfg.world_size;
    let (h, i) = (cfg.hidden, cfg.intermediate);
    let all_tokens = ins.tokens.concat();
    let inv_k = 1.0 / cfg.topk as f32;
    // Per-rank token partials: (1/k) sum over a token's experts of
    // (token . W1_r[e]) . W2_r[e].
    let partials: Vec<Vec<f32>> = (0..world)
        .map(|r| {
            let mut part = vec![0.0f32; cfg.tokens * h];
            for (tok, ids) in ins.routing.expert_ids.iter().enumerate() {
                let trow = &all_tokens[tok * h..(tok + 1) * h];
                for &e in ids {
                    let w1 = &ins.w1[r][e * h * i..(e + 1) * h * i];
                    let w2 = &ins.w2[r][e * i * h..(e + 1) * i * h];
                    let hidden_mid = crate::kernels::math::matmul(trow, w1, 1, h, i);
                    let back = crate::kernels::math::matmul(&hidden_mid, w2, 1, i, h);
                    for (o, v) in part[tok * h..(tok + 1) * h].iter_mut().zip(&back) {
                        *o += inv_k * v;
                    }
                }
            }
            part
        })
        .collect();
    Ok((0..world)
        .map(|r| reference_shard(&partials, cfg.tokens, h, world, r))
        .collect())
}

pub fn run(world: &World, cfg: &KernelConfig, opts: &RunOptions) -> Result<KernelRun> {
    let ins = gen_inputs(cfg)?;
    let dyn_map = build_dynamic_mapping(
        &ins.routing,
        cfg.comp_tile_rows,
        cfg.world_size,
        cfg.channels_per_rank,
    )?;
    let (grouped, mut trace) = first_half(world, cfg, opts, &ins, &dyn_map)?;
    let (outputs, mut trace2) = second_half(world, cfg, opts, &ins, &grouped, &dyn_map)?;
    trace.append(&mut trace2);
    Ok(KernelRun { outputs, trace })
}

/// All-gather + grouped GEMM. Returns each rank's grouped activations,
/// `routed_rows x intermediate`, in grouped (expert-major) row order.
pub fn first_half(
    world: &World,
    cfg: &KernelConfig,
    opts: &RunOptions,
    ins: &Inputs,
    dyn_map: &DynamicMapping,
) -> Result<(Vec<Vec<f32>>, Vec<crate::trace::TraceEvent>)> {
    let r_world = cfg.world_size;
    let (hd, id) = (cfg.hidden, cfg.intermediate);
    let map = StaticMapping::new(
        cfg.tokens,
        r_world,
        cfg.channels_per_rank,
        cfg.comm_tile_rows,
        hd,
    )?;
    let shard = world.alloc_symmetric(&[map.rows_per_rank, hd], DType::F32)?;
    let gathered = world.alloc_symmetric(&[cfg.tokens, hd], DType::F32)?;
    for r in 0..r_world {
        shard.write_range_f32(r, 0, &ins.tokens[r])?;
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
        let all = ins.tokens.concat();
        for r in 0..r_world {
            gathered.write_range_f32(r, 0, &all)?;
        }
        gathered.publish_all()?;
    } else {
        stage.register_expected(&signals, 1)?;
    }

    let use_engine = cfg.binding != ResourceBinding::Core && opts.mode != RunMode::CompOnly;
    let grouped: Vec<Mutex<Vec<f32>>> = (0..r_world).map(|_| Mutex::new(Vec::new())).collect();

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
                let grouped = &grouped;
                let ins = &ins;
                handles.push(s.spawn(move || {
                    let mut ctx = RankCtx::new(world, signals, r, Unit::Compute);
                    let ag_stage = Stage::new(map);
                    let rows = dyn_map.grouped_rows();
                    let mut out = vec![0.0f32; rows.len() * id];
                    for t in 0..dyn_map.num_tiles() {
                        let (lo, hi) = dyn_map.row_range(TileId(t))?;
                        // Gate on the arrival of every source token the tile
                        // reads; channels dedup through the skip-if-satisfied
                        // wait.
                        for g in lo..hi {
                            let tok = rows[g].token;
                            ctx.consumer_rows_wait(&ag_stage, tok, tok + 1)?;
                        }
                        ctx.tile_start(t);
                        if opts.mode != RunMode::CommOnly {
                            for g in lo..hi {
                                let tok = rows[g].token;
                                let e = rows[g].expert;
                                let trow =
                                    gathered.read_range_checked(r, tok * hd, (tok + 1) * hd)?;
                                let w1 = &ins.w1[r][e * hd * id..(e + 1) * hd * id];
                                let orow = &mut out[g * id..(g + 1) * id];
                                for kk in 0..hd {
                                    let av = trow[kk];
                                    if av == 0.0 {
                                        continue;
                                    }
                                    for j in 0..id {
                                        orow[j] += av * w1[kk * id + j];
                                    }
                                }
                            }
                        }
                        ctx.tile_end(t);
                    }
                    *grouped[r].lock().unwrap() = out;
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

    Ok((
        grouped
            .into_iter()
            .map(|m| m.into_inner().unwrap())
            .collect(),
        trace,
    ))
}

/// Grouped down-projection, top-k scatter/average, and ring reduce-scatter,
/// chained through staged channels in a single epoch.
pub fn second_half(
    world: &World,
    cfg: &KernelConfig,
    opts: &RunOptions,
    ins: &Inputs,
    grouped: &[Vec<f32>],
    dyn_map: &DynamicMapping,
) -> Result<(Vec<Vec<f32>>, Vec<crate::trace::TraceEvent>)> {
    let r_world = cfg.world_size;
    let (hd, id) = (cfg.hidden, cfg.intermediate);
    let routed = ins.routing.routed_rows();
    let token_map = StaticMapping::new(
        cfg.tokens,
        r_world,
        cfg.channels_per_rank,
        cfg.comm_tile_rows,
        hd,
    )?;
    let stage_width = r_world * cfg.channels_per_rank;

    let y_part = world.alloc_symmetric(&[routed, hd], DType::F32)?;
    let token_partial = world.alloc_symmetric(&[cfg.tokens, hd], DType::F32)?;
    let ring_buf = world.alloc_symmetric(&[cfg.tokens, hd], DType::F32)?;
    let send_buf = world.alloc_symmetric(&[cfg.tokens, hd], DType::F32)?;

    let layout = ChannelLayout {
        producer_consumer: 2 * stage_width,
        peer: token_map.num_tiles(),
        host: r_world,
    };
    let signals = world.begin_epoch(layout)?;
    // Stage gating stays on in every mode: A -> B is a compute-compute
    // dependency, not communication.
    Stage::new(dyn_map).register_expected(&signals, 1)?;
    Stage::with_base(&token_map, stage_width).register_expected(&signals, 1)?;

    // Token -> grouped rows, for the scatter stage.
    let mut rows_of_token: Vec<Vec<usize>> = vec![Vec::new(); cfg.tokens];
    for (g, row) in dyn_map.grouped_rows().iter().enumerate() {
        rows_of_token[row.token].push(g);
    }
    let rows_of_token = &rows_of_token;

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
            // Stage A: grouped rows x W2 shard -> per-rank token-space partial
            // in grouped order.
            {
                let signals = signals.clone();
                let y_part = &y_part;
                let ins = &ins;
                handles.push(s.spawn(move || {
                    let mut ctx = RankCtx::new(world, signals, r, Unit::Compute);
                    let stage_a = Stage::new(dyn_map);
                    let rows = dyn_map.grouped_rows();
                    for t in 0..dyn_map.num_tiles() {
                        let (lo, hi) = dyn_map.row_range(TileId(t))?;
                        ctx.tile_start(t);
                        if opts.mode != RunMode::CommOnly {
                            for g in lo..hi {
                                let e = rows[g].expert;
                                let grow = &grouped[r][g * id..(g + 1) * id];
                                let w2 = &ins.w2[r][e * id * hd..(e + 1) * id * hd];
                                let mut yrow = vec![0.0f32; hd];
                                for kk in 0..id {
                                    let av = grow[kk];
                                    if av == 0.0 {
                                        continue;
                                    }
                                    for j in 0..hd {
                                        yrow[j] += av * w2[kk * hd + j];
                                    }
                                }
                                y_part.write_range_f32(r, g * hd, &yrow)?;
                            }
                        }
                        y_part.publish_range(r, lo * hd, hi * hd)?;
                        ctx.producer_tile_notify(&stage_a, TileId(t), NotifyTargets::Rank(r))?;
                        ctx.tile_end(t);
                    }
                    Ok(ctx.into_trace())
                }));
            }
            // Stage B: scatter grouped partials back to token order with 1/k
            // weighting, feeding the reduce-scatter's token tiles.
            {
                let signals = signals.clone();
                let y_part = &y_part;
                let token_partial = &token_partial;
                let token_map = &token_map;
                handles.push(s.spawn(move || {
                    let mut ctx = RankCtx::new(world, signals, r, Unit::Compute);
                    let stage_a = Stage::new(dyn_map);
                    let stage_b = Stage::with_base(token_map, stage_width);
                    let inv_k = 1.0 / cfg.topk as f32;
                    // Token tiles in the order the ring consumes shards.
                    let shard_order: Vec<usize> = match cfg.order {
                        TileOrder::Ring => (1..=r_world).map(|sd| (r + sd) % r_world).collect(),
                        TileOrder::All2All => std::iter::once(r)
                            .chain((0..r_world).filter(|&d| d != r))
                            .collect(),
                    };
                    for d in shard_order {
                        for t in token_map.tiles_of_rank(d) {
                            let (lo, hi) = token_map.row_range(t)?;
                            for tok in lo..hi {
                                for &g in &rows_of_token[tok] {
                                    ctx.consumer_rows_wait(&stage_a, g, g + 1)?;
                                }
                            }
                            ctx.tile_start(t.0);
                            if opts.mode != RunMode::CommOnly {
                                for tok in lo..hi {
                                    let mut orow = vec![0.0f32; hd];
                                    for &g in &rows_of_token[tok] {
                                        let yrow =
                                            y_part.read_range_checked(r, g * hd, (g + 1) * hd)?;
                                        for (o, v) in orow.iter_mut().zip(&yrow) {
                                            *o += inv_k * v;
                                        }
                                    }
                                    token_partial.write_range_f32(r, tok * hd, &orow)?;
                                }
                            }
                            token_partial.publish_range(r, lo * hd, hi * hd)?;
                            ctx.producer_tile_notify(&stage_b, t, NotifyTargets::Rank(r))?;
                            ctx.tile_end(t.0);
                        }
                    }
                    Ok(ctx.into_trace())
                }));
            }
            // Stage C: ring reduce-scatter over token tiles.
            if run_rs {
                let signals = signals.clone();
                let engine = engines.get(r).cloned();
                let token_partial = &token_partial;
                let ring_buf = &ring_buf;
                let send_buf = &send_buf;
                let token_map = &token_map;
                let outputs = &outputs;
                handles.push(s.spawn(move || {
                    let unit = if use_engine { Unit::Host } else { Unit::Compute };
                    let mut ctx = RankCtx::new(world, signals, r, unit);
                    if let Some(e) = engine {
                        ctx = ctx.with_engine(e);
                    }
                    let lo = (r * token_map.rows_per_rank).min(cfg.tokens);
                    let hi = ((r + 1) * token_map.rows_per_rank).min(cfg.tokens);
                    let mut out = vec![0.0f32; (hi - lo) * hd];
                    let p = RingRsParams {
                        producer: Stage::with_base(token_map, stage_width),
                        comm: token_map,
                        partial: token_partial,
                        ring_buf,
                        send_buf,
                        binding: cfg.binding,
                        delay: if cfg.binding == ResourceBinding::Core {
                            opts.comm_delay
                        } else {
                            None
                        },
                        sabotage: false,
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
        (0..r_world)
            .map(|r| {
                let lo = (r * token_map.rows_per_rank).min(cfg.tokens);
                let hi = ((r + 1) * token_map.rows_per_rank).min(cfg.tokens);
                token_partial.read_range_f32(r, lo * hd, hi * hd)
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok((outputs, trace))
}
