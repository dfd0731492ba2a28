//! Kernel and run configuration: the decoupled design space as data.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    AgGemm,
    GemmRingRs,
    AgMoe,
    AgKvAttention,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::AgGemm => "ag_gemm",
            KernelKind::GemmRingRs => "gemm_ring_rs",
            KernelKind::AgMoe => "ag_moe",
            KernelKind::AgKvAttention => "ag_kv_attention",
        }
    }
}

/// Permutation of source ranks in which shards are transferred/consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TileOrder {
    #[serde(rename = "ring")]
    Ring,
    #[serde(rename = "all2all")]
    All2All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Push,
    Pull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceBinding {
    /// Communication runs on compute cores (worker threads).
    Core,
    /// Communication runs on the per-rank copy engine.
    CopyEngine,
    /// Data movement on the engine, reductions/notifies on cores; tiles
    /// alternate where the kernel has no natural split.
    Hybrid,
}

/// The permutation of source ranks rank `r` walks: ring order descends from
/// `r`; all-to-all starts at `r` and then takes the others ascending.
pub fn tile_schedule(order: TileOrder, rank: usize, world_size: usize) -> Vec<usize> {
    assert!(rank < world_size);
    match order {
        TileOrder::Ring => (0..world_size)
            .map(|i| (rank + world_size - i) % world_size)
            .collect(),
        TileOrder::All2All => std::iter::once(rank)
            .chain((0..world_size).filter(|&s| s != rank))
            .collect(),
    }
}

fn one() -> usize {
    1
}

fn default_tile() -> usize {
    16
}

/// Problem sizes plus the per-component tiling, ordering, binding, and
/// transfer-mode choices for one kernel run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    #[serde(default = "one")]
    pub world_size: usize,
    #[serde(default = "one")]
    pub channels_per_rank: usize,

    /// GEMM extents. For `gemm_ring_rs`, `k` is the per-rank shard depth.
    #[serde(default)]
    pub m: usize,
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub k: usize,

    /// MoE extents: global token count, hidden size, per-rank intermediate
    /// size, expert count, and top-k.
    #[serde(default)]
    pub tokens: usize,
    #[serde(default)]
    pub hidden: usize,
    #[serde(default)]
    pub intermediate: usize,
    #[serde(default)]
    pub experts: usize,
    #[serde(default)]
    pub topk: usize,

    /// Attention extents.
    #[serde(default)]
    pub heads: usize,
    #[serde(default)]
    pub head_dim: usize,
    #[serde(default)]
    pub seq: usize,

    /// Communication tile rows; may differ from the compute tile.
    #[serde(default = "default_tile")]
    pub comm_tile_rows: usize,
    #[serde(default = "default_tile")]
    pub comp_tile_rows: usize,
    #[serde(default = "default_tile")]
    pub comp_tile_cols: usize,

    #[serde(default = "default_order")]
    pub order: TileOrder,
    #[serde(default = "default_binding")]
    pub binding: ResourceBinding,
    #[serde(default = "default_mode")]
    pub mode: TransferMode,

    /// Worker threads granted to the communication component per rank (the
    /// "SMs for communication" analog).
    #[serde(default = "one")]
    pub comm_workers: usize,

    #[serde(default)]
    pub seed: u64,
}

fn default_order() -> TileOrder {
    TileOrder::Ring
}

fn default_binding() -> ResourceBinding {
    ResourceBinding::Core
}

fn default_mode() -> TransferMode {
    TransferMode::Push
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.world_size == 0 || self.channels_per_rank == 0 || self.comm_workers == 0 {
            return Err(SimError::config(
                "world_size, channels_per_rank, and comm_workers must be positive",
            ));
        }
        if self.comm_tile_rows == 0 || self.comp_tile_rows == 0 || self.comp_tile_cols == 0 {
            return Err(SimError::config("tile sizes must be positive"));
        }
        match self.kind {
            KernelKind::AgGemm | KernelKind::GemmRingRs => {
                if self.m == 0 || self.n == 0 || self.k == 0 {
                    return Err(SimError::config(format!(
                        "{} requires m, n, k > 0",
                        self.kind.name()
                    )));
                }
                if self.m / self.comm_tile_rows == 0 {
                    return Err(SimError::config("no communication tiles: m < comm_tile_rows"));
                }
            }
            KernelKind::AgMoe => {
                if self.tokens == 0
                    || self.hidden == 0
                    || self.intermediate == 0
                    || self.experts == 0
                    || self.topk == 0
                {
                    return Err(SimError::config(
                        "ag_moe requires tokens, hidden, intermediate, experts, topk > 0",
                    ));
                }
                if self.topk > self.experts {
                    return Err(SimError::config("topk exceeds expert count"));
                }
                if self.tokens % self.world_size != 0 {
                    return Err(SimError::config("tokens must shard evenly across ranks"));
                }
            }
            KernelKind::AgKvAttention => {
                if self.heads == 0 || self.head_dim == 0 || self.seq == 0 {
                    return Err(SimError::config(
                        "ag_kv_attention requires heads, head_dim, seq > 0",
                    ));
                }
                if self.seq % self.world_size != 0 {
                    return Err(SimError::config(
                        "attention requires seq divisible by world_size",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Rows the communication mapping covers for this kernel.
    pub fn comm_rows(&self) -> usize {
        match self.kind {
            KernelKind::AgGemm | KernelKind::GemmRingRs => self.m,
            KernelKind::AgMoe => self.tokens,
            KernelKind::AgKvAttention => self.seq,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_are_permutations_starting_at_rank() {
        assert_eq!(tile_schedule(TileOrder::Ring, 1, 4), vec![1, 0, 3, 2]);
        assert_eq!(tile_schedule(TileOrder::All2All, 2, 4), vec![2, 0, 1, 3]);
        assert_eq!(tile_schedule(TileOrder::Ring, 0, 1), vec![0]);
        assert_eq!(tile_schedule(TileOrder::All2All, 0, 1), vec![0]);
        for order in [TileOrder::Ring, TileOrder::All2All] {
            for world in 1..6 {
                for rank in 0..world {
                    let s = tile_schedule(order, rank, world);
                    assert_eq!(s[0], rank);
                    let mut sorted = s.clone();
                    sorted.sort_unstable();
                    assert_eq!(sorted, (0..world).collect::<Vec<_>>());
                }
            }
        }
    }

    #[test]
    fn enum_spellings() {
        assert_eq!(serde_json::to_string(&TileOrder::All2All).unwrap(), "\"all2all\"");
        assert_eq!(
            serde_json::to_string(&ResourceBinding::CopyEngine).unwrap(),
            "\"copy_engine\""
        );
        assert_eq!(serde_json::to_string(&TransferMode::Pull).unwrap(), "\"pull\"");
        assert_eq!(
            serde_json::to_string(&KernelKind::GemmRingRs).unwrap(),
            "\"gemm_ring_rs\""
        );
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<KernelConfig>(
            r#"{"kind":"ag_gemm","m":8,"n":8,"k":8,"bogus":1}"#,
        );
        assert!(err.is_err());
    }
}
