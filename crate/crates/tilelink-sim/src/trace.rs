//! Event tracing, wait-time accounting, and the overlap-ratio computation.
//!
//! Every worker appends to its own event buffer while running; buffers are
//! merged once the kernel joins. Channel indices in events are flat per-board
//! indices: `[producer-consumer | peer | host]` regions concatenated.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Execution context kind within one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Host,
    Compute,
    Copy,
}

impl Unit {
    pub fn name(&self) -> &'static str {
        match self {
            Unit::Host => "host",
            Unit::Compute => "compute",
            Unit::Copy => "copy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TileStart,
    TileEnd,
    WaitStart,
    WaitEnd,
    Notify,
    CopyStart,
    CopyEnd,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceEvent {
    pub rank: usize,
    pub unit: Unit,
    pub kind: EventKind,
    pub tile: Option<usize>,
    pub channel: Option<usize>,
    pub t_ns: u64,
}

/// Busy/wait accounting for one (rank, unit) pair.
#[derive(Debug, Clone, Default, Serialize)]
pub struct UnitStats {
    pub busy_ns: u64,
    pub wait_ns: u64,
    pub tiles: usize,
    pub copies: usize,
    pub notifies: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TraceAnalysis {
    /// Keyed by (rank, unit name).
    pub per_unit: Vec<((usize, String), UnitStats)>,
    pub total_busy_ns: u64,
    pub total_wait_ns: u64,
    /// Span from first to last event; a cheap critical-path upper bound.
    pub span_ns: u64,
    pub violations: Vec<String>,
}

impl TraceAnalysis {
    pub fn is_well_formed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Aggregate busy time, wait time, and ordering diagnostics from a merged
/// event stream. Verifies per-unit timestamp monotonicity, wait pairing, and
/// copy-engine FIFO completion order; problems are reported as diagnostics,
/// not panics.
pub fn analyze_trace(events: &[TraceEvent]) -> TraceAnalysis {
    use std::collections::HashMap;

    let mut analysis = TraceAnalysis::default();
    if events.is_empty() {
        return analysis;
    }

    let mut per_unit: HashMap<(usize, Unit), UnitStats> = HashMap::new();
    let mut last_ts: HashMap<(usize, Unit), u64> = HashMap::new();
    // Several workers may share one (rank, unit) key, so open waits and tile
    // spans are stacks; a tile end pairs with the innermost start of the same
    // tile id when one exists.
    let mut open_wait: HashMap<(usize, Unit), Vec<u64>> = HashMap::new();
    let mut open_span: HashMap<(usize, Unit), Vec<(Option<usize>, u64)>> = HashMap::new();
    // Copy-engine FIFO: starts and ends must pair in issue order.
    let mut copy_started: HashMap<usize, Vec<Option<usize>>> = HashMap::new();

    let mut t_min = u64::MAX;
    let mut t_max = 0u64;

    for ev in events {
        let key = (ev.rank, ev.unit);
        t_min = t_min.min(ev.t_ns);
        t_max = t_max.max(ev.t_ns);
        if let Some(&prev) = last_ts.get(&key) {
            if ev.t_ns < prev {
                analysis.violations.push(format!(
                    "rank {} {}: timestamp {} before {}",
                    ev.rank,
                    ev.unit.name(),
                    ev.t_ns,
                    prev
                ));
            }
        }
        last_ts.insert(key, ev.t_ns);
        let stats = per_unit.entry(key).or_default();
        match ev.kind {
            EventKind::WaitStart => {
                open_wait.entry(key).or_default().push(ev.t_ns);
            }
            EventKind::WaitEnd => match open_wait.entry(key).or_default().pop() {
                Some(t0) => stats.wait_ns += ev.t_ns - t0,
                None => analysis
                    .violations
                    .push(format!("rank {} {}: wait_end without wait_start", ev.rank, ev.unit.name())),
            },
            EventKind::TileStart => {
                open_span.entry(key).or_default().push((ev.tile, ev.t_ns));
            }
            EventKind::TileEnd => {
                let stack = open_span.entry(key).or_default();
                let idx = stack
                    .iter()
                    .rposition(|(t, _)| *t == ev.tile)
                    .or(stack.len().checked_sub(1));
                match idx {
                    Some(i) => {
                        let (_, t0) = stack.remove(i);
                        stats.busy_ns += ev.t_ns - t0;
                        stats.tiles += 1;
                    }
                    None => analysis.violations.push(format!(
                        "rank {} {}: tile_end without tile_start",
                        ev.rank,
                        ev.unit.name()
                    )),
                }
            }
            EventKind::CopyStart => {
                copy_started.entry(ev.rank).or_default().push(ev.tile);
                open_span.entry(key).or_default().push((ev.tile, ev.t_ns));
            }
            EventKind::CopyEnd => {
                match open_span.entry(key).or_default().pop() {
                    Some((_, t0)) => {
                        stats.busy_ns += ev.t_ns - t0;
                        stats.copies += 1;
                    }
                    None => analysis.violations.push(format!(
                        "rank {} {}: copy_end without copy_start",
                        ev.rank,
                        ev.unit.name()
                    )),
                }
                let queue = copy_started.entry(ev.rank).or_default();
                if queue.is_empty() {
                    analysis
                        .violations
                        .push(format!("rank {}: copy completion with empty queue", ev.rank));
                } else {
                    let head = queue.remove(0);
                    if head != ev.tile {
                        analysis.violations.push(format!(
                            "rank {}: copy FIFO violated, completed {:?} while {:?} was first",
                            ev.rank, ev.tile, head
                        ));
                    }
                }
            }
            EventKind::Notify => {
                stats.notifies += 1;
                if ev.channel.is_none() {
                    analysis
                        .violations
                        .push(format!("rank {}: notify without channel", ev.rank));
                }
            }
        }
    }

    for ((rank, unit), stack) in open_wait {
        if !stack.is_empty() {
            analysis
                .violations
                .push(format!("rank {rank} {}: wait_start never ended", unit.name()));
        }
    }

    analysis.total_busy_ns = per_unit.values().map(|s| s.busy_ns).sum();
    analysis.total_wait_ns = per_unit.values().map(|s| s.wait_ns).sum();
    analysis.span_ns = t_max.saturating_sub(t_min);
    let mut per_unit: Vec<_> = per_unit
        .into_iter()
        .map(|((rank, unit), stats)| ((rank, unit.name().to_string()), stats))
        .collect();
    per_unit.sort_by(|a, b| a.0.cmp(&b.0));
    analysis.per_unit = per_unit;
    analysis
}

/// Cross-check every notify event against the channel space of the active
/// mapping: a notify must name a channel below `num_channels` (peer and host
/// regions start at `peer_base`). Returns mismatch diagnostics.
pub fn check_notify_channels(
    events: &[TraceEvent],
    num_pc_channels: usize,
    board_channels: usize,
) -> Vec<String> {
    let mut out = Vec::new();
    for ev in events {
        if ev.kind != EventKind::Notify {
            continue;
        }
        match ev.channel {
            Some(ch) if ch < board_channels => {}
            Some(ch) => out.push(format!(
                "notify on channel {ch} outside board ({board_channels} channels, {num_pc_channels} producer-consumer)"
            )),
            None => out.push("notify without channel".to_string()),
        }
    }
    out
}

/// The fraction of communication time hidden by overlapping:
/// `(comp_only + comm_only - overlap) / comm_only`.
pub fn overlap_ratio(comp_only_s: f64, comm_only_s: f64, overlap_s: f64) -> Result<f64> {
    if !(comm_only_s > 0.0) {
        return Err(SimError::config(format!(
            "comm_only time must be positive, got {comm_only_s}"
        )));
    }
    Ok((comp_only_s + comm_only_s - overlap_s) / comm_only_s)
}

pub fn write_jsonl<W: Write>(mut w: W, events: &[TraceEvent]) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut w, ev).map_err(|e| SimError::config(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SimError::config(e.to_string()))?);
    }
    Ok(out)
}
