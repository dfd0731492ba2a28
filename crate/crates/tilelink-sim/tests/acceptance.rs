//! Acceptance gate: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilelink_sim::kernels::{reference_outputs, run_kernel, verify_run, RunMode, RunOptions};
use tilelink_sim::measure::{measure_kernel, MeasureOptions};
use tilelink_sim::trace::analyze_trace;
use tilelink_sim::{
    overlap_ratio, KernelConfig, KernelKind, ResourceBinding, SimError, StaticMapping, TileId,
    TileMap, TileOrder, TransferMode, World, WorldOptions,
};

fn base_cfg(kind: KernelKind) -> KernelConfig {
    KernelConfig {
        kind,
        world_size: 1,
        channels_per_rank: 2,
        m: 64,
        n: 16,
        k: 8,
        tokens: 32,
        hidden: 8,
        intermediate: 8,
        experts: 4,
        topk: 2,
        heads: 2,
        head_dim: 4,
        seq: 64,
        comm_tile_rows: 4,
        comp_tile_rows: 8,
        comp_tile_cols: 8,
        order: TileOrder::Ring,
        binding: ResourceBinding::Core,
        mode: TransferMode::Push,
        comm_workers: 1,
        seed: 42,
    }
}

fn gate(criterion: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("[{verdict}] {criterion}: {detail}");
    assert!(ok, "[{verdict}] {criterion}: {detail}");
}

/// Criterion 1: the affine mapping agrees with a brute-force partition oracle
/// across an exhaustive parameter grid.
#[test]
fn criterion_1_mapping_brute_force() {
    let t0 = Instant::now();
    let mut checked = 0usize;
    for rows in [64, 1024, 8100] {
        for world in [1, 2, 4, 8] {
            for channels in [1, 2, 4] {
                for tile_rows in [16, 64] {
                    let map = match StaticMapping::new(rows, world, channels, tile_rows, 1) {
                        Ok(m) => m,
                        Err(_) => continue, // invalid combination by construction
                    };
                    let num_tiles = rows.div_ceil(tile_rows);
                    // Oracle: deal tiles out sequentially, a fixed quota per
                    // rank (channel); any ragged tail clamps into the last one.
                    let deal = |buckets: usize, quota: usize| -> Vec<usize> {
                        let mut owners: Vec<usize> = (0..buckets)
                            .flat_map(|b| std::iter::repeat(b).take(quota))
                            .take(num_tiles)
                            .collect();
                        owners.resize(num_tiles, buckets - 1);
                        owners
                    };
                    let owner_oracle =
                        deal(world, rows.div_ceil(world) / tile_rows);
                    let channel_oracle = deal(
                        world * channels,
                        rows.div_ceil(world * channels) / tile_rows,
                    );
                    let mut covered = 0usize;
                    for t in 0..map.num_tiles() {
                        let t = TileId(t);
                        let (lo, hi) = map.row_range(t).unwrap();
                        assert_eq!(lo, covered, "tiles must partition the rows");
                        assert!(hi > lo && hi - lo <= tile_rows);
                        covered = hi;
                        assert_eq!(map.owner(t).unwrap(), owner_oracle[t.0]);
                        assert_eq!(map.channel(t).unwrap(), channel_oracle[t.0]);
                        checked += 1;
                    }
                    assert_eq!(covered, rows);
                    assert_eq!(map.num_tiles(), num_tiles);
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    gate(
        "criterion 1 (mapping vs brute force)",
        checked > 1000 && secs < 10.0,
        &format!("{checked} tiles checked in {secs:.2}s"),
    );
}

/// Criterion 2: every kernel matches its sequential reference across the full
/// configuration matrix, with communication and compute tile sizes differing.
#[test]
fn criterion_2_kernel_matrix() {
    let t0 = Instant::now();
    let mut runs = 0usize;
    for kind in [
        KernelKind::AgGemm,
        KernelKind::GemmRingRs,
        KernelKind::AgMoe,
        KernelKind::AgKvAttention,
    ] {
        for world in [1usize, 2, 4, 8] {
            for order in [TileOrder::Ring, TileOrder::All2All] {
                for mode in [TransferMode::Push, TransferMode::Pull] {
                    for binding in [
                        ResourceBinding::Core,
                        ResourceBinding::CopyEngine,
                        ResourceBinding::Hybrid,
                    ] {
                        let mut cfg = base_cfg(kind);
                        cfg.world_size = world;
                        cfg.order = order;
                        cfg.mode = mode;
                        cfg.binding = binding;
                        if kind == KernelKind::AgMoe {
                            // 32 tokens over 8 ranks x 2 channels leave room
                            // for 2-row communication tiles only.
                            cfg.comm_tile_rows = 2;
                            cfg.comp_tile_rows = 4;
                        }
                        assert_ne!(cfg.comm_tile_rows, cfg.comp_tile_rows);
                        let w = World::init(world, cfg.channels_per_rank).unwrap();
                        let run = run_kernel(&w, &cfg, &RunOptions::default())
                            .unwrap_or_else(|e| panic!("{kind:?} w={world} {order:?} {mode:?} {binding:?}: {e}"));
                        let want = reference_outputs(&cfg).unwrap();
                        let err = verify_run(&run, &want);
                        let tol = if kind == KernelKind::AgKvAttention {
                            1e-4
                        } else {
                            1e-5
                        };
                        assert!(
                            err <= tol,
                            "{kind:?} w={world} {order:?} {mode:?} {binding:?}: err {err}"
                        );
                        let analysis = analyze_trace(&run.trace);
                        assert!(
                            analysis.is_well_formed(),
                            "trace violations: {:?}",
                            analysis.violations
                        );
                        runs += 1;
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    gate(
        "criterion 2 (config matrix correctness)",
        runs == 192 && secs < 120.0,
        &format!("{runs} configurations verified in {secs:.1}s"),
    );
}

/// Criterion 3: 10^4 runs under randomized delay schedules with the race
/// checker enabled all produce bit-identical correct outputs.
#[test]
fn criterion_3_randomized_schedules() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD15C);
    let delays = [0u64, 5, 20, 50];
    let mut runs = 0usize;
    for round in 0..100u64 {
        let mut cfg = base_cfg(KernelKind::AgGemm);
        cfg.world_size = 2;
        cfg.m = 32;
        cfg.k = 8;
        cfg.n = 8;
        cfg.seed = round;
        cfg.mode = if round % 2 == 0 {
            TransferMode::Push
        } else {
            TransferMode::Pull
        };
        let want = reference_outputs(&cfg).unwrap();
        for _ in 0..100 {
            let delay = delays[rng.gen_range(0..delays.len())];
            let w = World::init_with(
                2,
                cfg.channels_per_rank,
                WorldOptions {
                    timeout: Some(Duration::from_secs(5)),
                    race_check: true,
                },
            )
            .unwrap();
            let run = run_kernel(
                &w,
                &cfg,
                &RunOptions {
                    mode: RunMode::Full,
                    comm_delay: (delay > 0).then(|| Duration::from_micros(delay)),
                    sabotage_drop_notify: false,
                },
            )
            .unwrap();
            // Fixed reduction order: results are bit-identical, not just close.
            for r in 0..2 {
                assert_eq!(run.outputs[r], want[r], "round {round} delay {delay}us");
            }
            runs += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    gate(
        "criterion 3 (randomized delays, race checker on)",
        runs == 10_000 && secs < 60.0,
        &format!("{runs} runs in {secs:.1}s"),
    );
}

/// Criterion 4: epochs are isolated; back-to-back launches in one world do
/// not leak signals and both produce correct results.
#[test]
fn criterion_4_epoch_isolation() {
    let mut cfg = base_cfg(KernelKind::AgGemm);
    cfg.world_size = 4;
    let want = reference_outputs(&cfg).unwrap();
    let world = World::init(4, cfg.channels_per_rank).unwrap();
    let first = run_kernel(&world, &cfg, &RunOptions::default()).unwrap();
    let second = run_kernel(&world, &cfg, &RunOptions::default()).unwrap();
    for r in 0..4 {
        assert_eq!(first.outputs[r], want[r], "first launch rank {r}");
        assert_eq!(second.outputs[r], want[r], "second launch rank {r}");
    }
    // The MoE kernel chains two epochs internally; run it twice on one world
    // as well (four epochs total).
    let mut moe = base_cfg(KernelKind::AgMoe);
    moe.world_size = 4;
    moe.comm_tile_rows = 2;
    moe.comp_tile_rows = 4;
    let moe_want = reference_outputs(&moe).unwrap();
    let w2 = World::init(4, moe.channels_per_rank).unwrap();
    for launch in 0..2 {
        let run = run_kernel(&w2, &moe, &RunOptions::default()).unwrap();
        let err = verify_run(&run, &moe_want);
        assert!(err <= 1e-5, "moe launch {launch}: err {err}");
    }
    assert!(w2.epoch() >= 4);
    gate(
        "criterion 4 (epoch isolation)",
        true,
        "repeated launches on one world stay correct",
    );
}

/// Criterion 5: a dropped notify is detected as a deadlock that names the
/// blocked unit and channel instead of hanging or corrupting data.
#[test]
fn criterion_5_sabotage_detection() {
    let mut cfg = base_cfg(KernelKind::AgGemm);
    cfg.world_size = 4;
    let world = World::init_with(
        4,
        cfg.channels_per_rank,
        WorldOptions {
            timeout: Some(Duration::from_millis(300)),
            race_check: false,
        },
    )
    .unwrap();
    let err = run_kernel(
        &world,
        &cfg,
        &RunOptions {
            mode: RunMode::Full,
            comm_delay: None,
            sabotage_drop_notify: true,
        },
    )
    .unwrap_err();
    let (is_deadlock, detail) = match &err {
        SimError::Deadlock { blocked } => {
            let named = !blocked.is_empty();
            let msg = err.to_string();
            (
                named && msg.contains("channel"),
                format!("{} blocked unit(s), e.g. `{}`", blocked.len(), blocked[0]),
            )
        }
        other => (false, format!("unexpected error {other}")),
    };
    assert_eq!(tilelink_sim::cli::exit_code_for(&err), 2);
    gate("criterion 5 (sabotage -> diagnosed deadlock)", is_deadlock, &detail);
}

/// Criterion 6: with 200us of injected latency per communication tile on a
/// 4-rank ag_gemm (8 tiles per rank), the overlapped schedule hides more
/// than a quarter of the communication time.
#[test]
fn criterion_6_overlap_hides_communication() {
    let mut cfg = base_cfg(KernelKind::AgGemm);
    cfg.world_size = 4;
    cfg.m = 256;
    cfg.k = 128;
    cfg.n = 64;
    cfg.comm_tile_rows = 8; // 32 tiles, 8 per rank
    cfg.comp_tile_rows = 16;
    cfg.comp_tile_cols = 64;
    let map = StaticMapping::new(cfg.m, 4, cfg.channels_per_rank, cfg.comm_tile_rows, cfg.k).unwrap();
    assert!(map.tiles_of_rank(0).len() >= 8);
    let report = measure_kernel(
        &cfg,
        &MeasureOptions {
            repeats: 5,
            comm_delay: Some(Duration::from_micros(200)),
            timeout: Some(Duration::from_secs(30)),
        },
    )
    .unwrap();
    gate(
        "criterion 6 (overlap ratio under 200us/tile delay)",
        report.ratio > 0.25,
        &format!(
            "ratio {:.3} (comp {:.1}ms, comm {:.1}ms, overlap {:.1}ms)",
            report.ratio,
            report.comp_only_s * 1e3,
            report.comm_only_s * 1e3,
            report.overlap_s * 1e3
        ),
    );
}

/// Criterion 7: the overlap-ratio formula on fixed fixtures.
#[test]
fn criterion_7_ratio_fixtures() {
    let full = overlap_ratio(5.0, 4.0, 6.0).unwrap();
    let none = overlap_ratio(5.0, 4.0, 9.0).unwrap();
    let all = overlap_ratio(5.0, 4.0, 5.0).unwrap();
    assert!((full - 0.75).abs() < 1e-12);
    assert!(none.abs() < 1e-12);
    assert!((all - 1.0).abs() < 1e-12);
    assert!(overlap_ratio(5.0, 0.0, 5.0).is_err());
    gate(
        "criterion 7 (ratio formula fixtures)",
        true,
        "(5,4,6)->0.75, (5,4,9)->0, (5,4,5)->1, comm=0 rejected",
    );
}
