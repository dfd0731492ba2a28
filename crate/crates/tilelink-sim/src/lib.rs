//! Multi-rank runtime and correctness simulator for tile-centric
//! compute/communication overlap.
//!
//! Ranks are threads, the symmetric heap is per-rank shared buffers, and
//! fine-grained tile signaling (producer-consumer, peer, and host channels)
//! orders cross-rank access. Overlapped kernels built from these primitives
//! are checked against phase-separated sequential references, and a trace /
//! metrics layer measures how much communication the overlap hides.

pub mod cli;
pub mod config;
pub mod error;
pub mod kernels;
pub mod mapping;
pub mod measure;
pub mod runtime;
pub mod trace;
pub mod transfer;

pub use config::{
    tile_schedule, KernelConfig, KernelKind, ResourceBinding, TileOrder, TransferMode,
};
pub use error::{MappingError, Result, SimError};
pub use kernels::{reference_outputs, run_kernel, KernelRun, RunMode, RunOptions};
pub use mapping::{
    build_dynamic_mapping, DynamicMapping, RoutingTable, StaticMapping, TileId, TileMap,
};
pub use measure::{measure_kernel, OverlapReport};
pub use runtime::{World, WorldOptions};
pub use trace::{analyze_trace, overlap_ratio, TraceEvent};
