//! Symmetric heap: identically shaped per-rank buffers addressable across ranks.
//!
//! Elements are stored as atomics so that cross-rank access never tears at
//! element granularity; ordering between ranks comes from the signal
//! discipline (relaxed data accesses published by a release notify, consumed
//! by an acquire wait), not from the stores themselves.

use std::sync::atomic::{AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use crate::error::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Race-checker tile states, tracked per element when the checker is on.
pub mod state {
    pub const UNWRITTEN: u8 = 0;
    pub const WRITTEN: u8 = 1;
    pub const PUBLISHED: u8 = 2;
    pub const CONSUMED: u8 = 3;
}

#[derive(Debug)]
enum Store {
    F32(Vec<AtomicU32>),
    F64(Vec<AtomicU64>),
}

#[derive(Debug)]
struct RankBuf {
    store: Store,
    states: Option<Vec<AtomicU8>>,
}

#[derive(Debug)]
struct Inner {
    id: usize,
    shape: Vec<usize>,
    dtype: DType,
    bufs: Vec<RankBuf>,
}

/// Handle to a symmetric allocation: one buffer of identical shape per rank.
/// Cheap to clone; clones alias the same storage.
#[derive(Debug, Clone)]
pub struct SymmetricTensor {
    inner: Arc<Inner>,
}

impl SymmetricTensor {
    pub(crate) fn allocate(
        id: usize,
        world_size: usize,
        shape: &[usize],
        dtype: DType,
        track_states: bool,
    ) -> Result<Self, SimError> {
        if shape.is_empty() {
            return Err(SimError::shape("tensor shape must be non-empty"));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(SimError::shape(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let bufs = (0..world_size)
            .map(|_| RankBuf {
                store: match dtype {
                    DType::F32 => Store::F32((0..numel).map(|_| AtomicU32::new(0)).collect()),
                    DType::F64 => Store::F64((0..numel).map(|_| AtomicU64::new(0)).collect()),
                },
                states: track_states
                    .then(|| (0..numel).map(|_| AtomicU8::new(state::UNWRITTEN)).collect()),
            })
            .collect();
        Ok(SymmetricTensor {
            inner: Arc::new(Inner {
                id,
                shape: shape.to_vec(),
                dtype,
                bufs,
            }),
        })
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    /// Elements per leading-dimension row.
    pub fn row_width(&self) -> usize {
        self.numel() / self.rows()
    }

    pub fn world_size(&self) -> usize {
        self.inner.bufs.len()
    }

    fn buf(&self, rank: usize) -> Result<&RankBuf, SimError> {
        self.inner.bufs.get(rank).ok_or_else(|| {
            SimError::config(format!(
                "rank {rank} out of range for tensor {}",
                self.inner.id
            ))
        })
    }

    fn check_idx(&self, idx: usize) -> Result<(), SimError> {
        if idx >= self.numel() {
            return Err(SimError::shape(format!(
                "index {idx} out of range for tensor {} ({} elements)",
                self.inner.id,
                self.numel()
            )));
        }
        Ok(())
    }

    pub fn read_f32(&self, rank: usize, idx: usize) -> Result<f32, SimError> {
        self.check_idx(idx)?;
        match &self.buf(rank)?.store {
            Store::F32(v) => Ok(f32::from_bits(v[idx].load(Ordering::Relaxed))),
            Store::F64(_) => Err(SimError::shape("f32 access to f64 tensor")),
        }
    }

    pub fn write_f32(&self, rank: usize, idx: usize, value: f32) -> Result<(), SimError> {
        self.check_idx(idx)?;
        let buf = self.buf(rank)?;
        match &buf.store {
            Store::F32(v) => v[idx].store(value.to_bits(), Ordering::Relaxed),
            Store::F64(_) => return Err(SimError::shape("f32 access to f64 tensor")),
        }
        if let Some(states) = &buf.states {
            if states[idx].load(Ordering::Relaxed) < state::PUBLISHED {
                states[idx].store(state::WRITTEN, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    pub fn read_f64(&self, rank: usize, idx: usize) -> Result<f64, SimError> {
        self.check_idx(idx)?;
        match &self.buf(rank)?.store {
            Store::F64(v) => Ok(f64::from_bits(v[idx].load(Ordering::Relaxed))),
            Store::F32(_) => Err(SimError::shape("f64 access to f32 tensor")),
        }
    }

    pub fn write_f64(&self, rank: usize, idx: usize, value: f64) -> Result<(), SimError> {
        self.check_idx(idx)?;
        let buf = self.buf(rank)?;
        match &buf.store {
            Store::F64(v) => v[idx].store(value.to_bits(), Ordering::Relaxed),
            Store::F32(_) => return Err(SimError::shape("f64 access to f32 tensor")),
        }
        if let Some(states) = &buf.states {
            if states[idx].load(Ordering::Relaxed) < state::PUBLISHED {
                states[idx].store(state::WRITTEN, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    /// Copy of elements `[lo, hi)` from one rank's buffer.
    pub fn read_range_f32(&self, rank: usize, lo: usize, hi: usize) -> Result<Vec<f32>, SimError> {
        (lo..hi).map(|i| self.read_f32(rank, i)).collect()
    }

    /// Like [`read_range_f32`](Self::read_range_f32), but flags any element the
    /// race checker has not seen published.
    pub fn read_range_checked(
        &self,
        rank: usize,
        lo: usize,
        hi: usize,
    ) -> Result<Vec<f32>, SimError> {
        let buf = self.buf(rank)?;
        if let Some(states) = &buf.states {
            for idx in lo..hi {
                self.check_idx(idx)?;
                let s = states[idx].load(Ordering::Relaxed);
                if s < state::PUBLISHED {
                    return Err(SimError::Race(format!(
                        "read of non-published element {idx} (state {s}) on rank {rank}, tensor {}",
                        self.inner.id
                    )));
                }
                states[idx].store(state::CONSUMED, Ordering::Relaxed);
            }
        }
        self.read_range_f32(rank, lo, hi)
    }

    pub fn write_range_f32(&self, rank: usize, lo: usize, data: &[f32]) -> Result<(), SimError> {
        for (i, &v) in data.iter().enumerate() {
            self.write_f32(rank, lo + i, v)?;
        }
        Ok(())
    }

    /// Transition elements `[lo, hi)` to the published state. Call before (or
    /// at) the release notify that makes the data visible.
    pub fn publish_range(&self, rank: usize, lo: usize, hi: usize) -> Result<(), SimError> {
        let buf = self.buf(rank)?;
        if let Some(states) = &buf.states {
            for idx in lo..hi {
                self.check_idx(idx)?;
                states[idx].store(state::PUBLISHED, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    pub fn publish_all(&self) -> Result<(), SimError> {
        for rank in 0..self.world_size() {
            self.publish_range(rank, 0, self.numel())?;
        }
        Ok(())
    }

    pub fn element_state(&self, rank: usize, idx: usize) -> Result<Option<u8>, SimError> {
        self.check_idx(idx)?;
        Ok(self
            .buf(rank)?
            .states
            .as_ref()
            .map(|s| s[idx].load(Ordering::Relaxed)))
    }

    /// Raw word copy between (possibly different) tensors of the same dtype.
    pub fn copy_range(
        src: &SymmetricTensor,
        src_rank: usize,
        src_lo: usize,
        dst: &SymmetricTensor,
        dst_rank: usize,
        dst_lo: usize,
        len: usize,
    ) -> Result<(), SimError> {
        if src.dtype() != dst.dtype() {
            return Err(SimError::shape("dtype mismatch in copy"));
        }
        if src_lo + len > src.numel() || dst_lo + len > dst.numel() {
            return Err(SimError::shape(format!(
                "copy of {len} elements out of range (src {}+{src_lo}, dst {}+{dst_lo})",
                src.numel(),
                dst.numel()
            )));
        }
        let same_buffer = Arc::ptr_eq(&src.inner, &dst.inner) && src_rank == dst_rank;
        if same_buffer {
            let s = src_lo..src_lo + len;
            let d = dst_lo..dst_lo + len;
            if s.start < d.end && d.start < s.end && src_lo != dst_lo {
                return Err(SimError::shape(format!(
                    "overlapping copy ranges [{},{}) and [{},{}) on one buffer",
                    s.start, s.end, d.start, d.end
                )));
            }
        }
        match src.dtype() {
            DType::F32 => {
                for i in 0..len {
                    let v = src.read_f32(src_rank, src_lo + i)?;
                    dst.write_f32(dst_rank, dst_lo + i, v)?;
                }
            }
            DType::F64 => {
                for i in 0..len {
                    let v = src.read_f64(src_rank, src_lo + i)?;
                    dst.write_f64(dst_rank, dst_lo + i, v)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroed_on_allocation() {
        let t = SymmetricTensor::allocate(0, 2, &[4, 4], DType::F32, false).unwrap();
        for rank in 0..2 {
            for i in 0..16 {
                assert_eq!(t.read_f32(rank, i).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(SymmetricTensor::allocate(0, 2, &[0, 4], DType::F32, false).is_err());
        assert!(SymmetricTensor::allocate(0, 2, &[], DType::F32, false).is_err());
    }

    #[test]
    fn per_rank_buffers_are_independent() {
        let t = SymmetricTensor::allocate(1, 2, &[2], DType::F32, false).unwrap();
        t.write_f32(0, 0, 5.0).unwrap();
        assert_eq!(t.read_f32(0, 0).unwrap(), 5.0);
        assert_eq!(t.read_f32(1, 0).unwrap(), 0.0);
    }

    #[test]
    fn f64_roundtrip_and_dtype_guard() {
        let t = SymmetricTensor::allocate(2, 1, &[2], DType::F64, false).unwrap();
        t.write_f64(0, 1, -1.25).unwrap();
        assert_eq!(t.read_f64(0, 1).unwrap(), -1.25);
        assert!(t.read_f32(0, 1).is_err());
    }

    #[test]
    fn checked_read_flags_unpublished() {
        let t = SymmetricTensor::allocate(3, 1, &[4], DType::F32, true).unwrap();
        t.write_f32(0, 0, 1.0).unwrap();
        assert!(matches!(
            t.read_range_checked(0, 0, 1),
            Err(SimError::Race(_))
        ));
        t.publish_range(0, 0, 1).unwrap();
        assert_eq!(t.read_range_checked(0, 0, 1).unwrap(), vec![1.0]);
        assert_eq!(t.element_state(0, 0).unwrap(), Some(state::CONSUMED));
    }

    #[test]
    fn overlapping_copy_rejected() {
        let t = SymmetricTensor::allocate(4, 1, &[8], DType::F32, false).unwrap();
        let err = SymmetricTensor::copy_range(&t, 0, 0, &t, 0, 2, 4).unwrap_err();
        assert!(matches!(err, SimError::Shape(_)));
        // Disjoint ranges on the same buffer behave like memmove.
        t.write_f32(0, 0, 9.0).unwrap();
        SymmetricTensor::copy_range(&t, 0, 0, &t, 0, 4, 2).unwrap();
        assert_eq!(t.read_f32(0, 4).unwrap(), 9.0);
    }
}
