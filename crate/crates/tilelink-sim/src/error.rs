//! Error types shared across the simulator.

use thiserror::Error;

use crate::runtime::Region;

/// A single execution context blocked past the deadlock timeout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedUnit {
    pub rank: usize,
    pub unit: &'static str,
    pub region: Region,
    pub channel: usize,
    pub observed: u64,
    pub required: u64,
    pub epoch: u64,
}

impl std::fmt::Display for BlockedUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rank {} {} blocked on {:?} channel {} (epoch {}): observed {}, waiting for {}",
            self.rank, self.unit, self.region, self.channel, self.epoch, self.observed, self.required
        )
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Mapping(#[from] MappingError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("deadlock detected:\n{}", .blocked.iter().map(|b| format!("  {b}")).collect::<Vec<_>>().join("\n"))]
    Deadlock { blocked: Vec<BlockedUnit> },

    #[error("race violation: {0}")]
    Race(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub fn config(msg: impl Into<String>) -> Self {
        SimError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        SimError::Shape(msg.into())
    }

    pub fn is_deadlock(&self) -> bool {
        matches!(self, SimError::Deadlock { .. })
    }

    /// Merge a batch of per-unit failures into one error. Deadlocks are
    /// aggregated so the diagnostic names every blocked unit.
    pub fn merge(errors: Vec<SimError>) -> SimError {
        let mut blocked = Vec::new();
        let mut other = None;
        for e in errors {
            match e {
                SimError::Deadlock { blocked: mut b } => blocked.append(&mut b),
                e => {
                    if other.is_none() {
                        other = Some(e);
                    }
                }
            }
        }
        if !blocked.is_empty() {
            SimError::Deadlock { blocked }
        } else {
            other.unwrap_or_else(|| SimError::config("worker failed without error detail"))
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MappingError {
    #[error("tile {tile} out of grid ({num_tiles} tiles)")]
    TileOutOfGrid { tile: usize, num_tiles: usize },

    #[error("invalid mapping config: {0}")]
    InvalidConfig(String),

    #[error("mapping not materialized for tile {tile}")]
    NotMaterialized { tile: usize },

    #[error("expert id {expert} out of range for token {token} ({num_experts} experts)")]
    ExpertOutOfRange {
        token: usize,
        expert: usize,
        num_experts: usize,
    },

    #[error("invalid routing: {0}")]
    InvalidRouting(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
