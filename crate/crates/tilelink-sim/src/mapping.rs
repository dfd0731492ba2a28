//! Tile-to-(shape, rank, channel) mappings.
//!
//! Every transferred or computed tile is identified by a [`TileId`] within its
//! component's tile grid. The mapping layer answers three questions about a
//! tile: which rows of the global tensor it covers, which rank owns it, and
//! which barrier channel signals it. For fixed sharding the answers are affine
//! in the tile id ([`StaticMapping`]); for routed workloads such as MoE they
//! are lookup tables materialized at runtime ([`DynamicMapping`]).

use crate::error::MappingError;

pub type RankId = usize;
pub type ChannelId = usize;

/// Index into a kernel component's tile grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileId(pub usize);

/// Per-dimension half-open intervals of element indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRange {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl ShapeRange {
    pub fn rows(lo: usize, hi: usize) -> Self {
        assert!(lo < hi, "empty shape range [{lo}, {hi})");
        ShapeRange {
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    /// The first-dimension interval, which is the only one the row-sharded
    /// layouts in this crate use.
    pub fn row_span(&self) -> (usize, usize) {
        (self.lo[0], self.hi[0])
    }

    pub fn num_elements(&self) -> usize {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| h - l)
            .product()
    }
}

/// Common view over static and dynamic tile mappings.
///
/// Row spans are over the mapped row space: the global tensor rows for static
/// mappings, the grouped (routed) row space for dynamic ones.
pub trait TileMap: Sync {
    fn num_tiles(&self) -> usize;
    /// Nominal rows per tile; every tile except possibly the last covers
    /// exactly this many rows.
    fn tile_rows(&self) -> usize;
    /// Total rows in the mapped space.
    fn total_rows(&self) -> usize;
    fn row_range(&self, t: TileId) -> Result<(usize, usize), MappingError>;
    fn owner(&self, t: TileId) -> Result<RankId, MappingError>;
    fn channel(&self, t: TileId) -> Result<ChannelId, MappingError>;
    /// Number of global channels addressed by this mapping.
    fn num_channels(&self) -> usize;

    /// Tiles whose row ranges intersect `[lo, hi)`.
    fn tiles_overlapping(&self, lo: usize, hi: usize) -> std::ops::Range<usize> {
        if lo >= hi || self.num_tiles() == 0 {
            return 0..0;
        }
        let tr = self.tile_rows();
        let first = lo / tr;
        let last = ((hi - 1) / tr).min(self.num_tiles() - 1);
        first.min(self.num_tiles())..last + 1
    }

    /// Distinct channels of the tiles overlapping `[lo, hi)`, in first-seen order.
    fn covering_channels(&self, lo: usize, hi: usize) -> Result<Vec<ChannelId>, MappingError> {
        let mut out = Vec::new();
        for t in self.tiles_overlapping(lo, hi) {
            let ch = self.channel(TileId(t))?;
            if !out.contains(&ch) {
                out.push(ch);
            }
        }
        Ok(out)
    }

    /// How many tiles signal each channel; used to register expected arrival
    /// counts at kernel launch.
    fn tiles_per_channel(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_channels()];
        for t in 0..self.num_tiles() {
            if let Ok(ch) = self.channel(TileId(t)) {
                counts[ch] += 1;
            }
        }
        counts
    }
}

/// Affine tile mapping for row-sharded tensors.
///
/// Rows are split into `world_size` contiguous rank blocks, each rank block
/// into `channels_per_rank` channel blocks, and each channel block into tiles
/// of `tile_rows` rows. The final tile of a ragged extent is clamped; a tile
/// never spans a channel boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticMapping {
    pub rows: usize,
    pub world_size: usize,
    pub channels_per_rank: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub rows_per_rank: usize,
    pub rows_per_channel: usize,
}

impl StaticMapping {
    pub fn new(
        rows: usize,
        world_size: usize,
        channels_per_rank: usize,
        tile_rows: usize,
        tile_cols: usize,
    ) -> Result<Self, MappingError> {
        if rows == 0 || world_size == 0 || channels_per_rank == 0 || tile_rows == 0 {
            return Err(MappingError::InvalidConfig(format!(
                "extents must be positive: rows={rows} world={world_size} \
                 channels={channels_per_rank} tile_rows={tile_rows}"
            )));
        }
        let rows_per_rank = rows.div_ceil(world_size);
        let rows_per_channel = rows.div_ceil(world_size * channels_per_rank);
        if tile_rows > rows_per_channel {
            return Err(MappingError::InvalidConfig(format!(
                "tile_rows {tile_rows} exceeds rows_per_channel {rows_per_channel}; \
                 a tile must not span channel boundaries"
            )));
        }
        if rows_per_rank / tile_rows == 0 {
            return Err(MappingError::InvalidConfig(format!(
                "tile_rows {tile_rows} exceeds rows_per_rank {rows_per_rank}"
            )));
        }
        Ok(StaticMapping {
            rows,
            world_size,
            channels_per_rank,
            tile_rows,
            tile_cols,
            rows_per_rank,
            rows_per_channel,
        })
    }

    fn check_in_grid(&self, t: TileId) -> Result<(), MappingError> {
        if t.0 * self.tile_rows >= self.rows {
            return Err(MappingError::TileOutOfGrid {
                tile: t.0,
                num_tiles: self.num_tiles(),
            });
        }
        Ok(())
    }

    pub fn shape_range(&self, t: TileId) -> Result<ShapeRange, MappingError> {
        let (lo, hi) = self.row_range(t)?;
        Ok(ShapeRange::rows(lo, hi))
    }

    pub fn src_rank(&self, t: TileId) -> Result<RankId, MappingError> {
        self.owner(t)
    }

    /// Channel that a given row signals on; rows outside any complete tile of
    /// the last channel clamp into it.
    pub fn channel_of_row(&self, row: usize) -> Result<ChannelId, MappingError> {
        self.channel(TileId(row / self.tile_rows))
    }

    pub fn tiles_of_rank(&self, rank: RankId) -> Vec<TileId> {
        (0..self.num_tiles())
            .map(TileId)
            .filter(|t| self.owner(*t) == Ok(rank))
            .collect()
    }
}

impl TileMap for StaticMapping {
    fn num_tiles(&self) -> usize {
        self.rows.div_ceil(self.tile_rows)
    }

    fn tile_rows(&self) -> usize {
        self.tile_rows
    }

    fn total_rows(&self) -> usize {
        self.rows
    }

    fn row_range(&self, t: TileId) -> Result<(usize, usize), MappingError> {
        self.check_in_grid(t)?;
        let lo = t.0 * self.tile_rows;
        let hi = (lo + self.tile_rows).min(self.rows);
        Ok((lo, hi))
    }

    fn owner(&self, t: TileId) -> Result<RankId, MappingError> {
        self.check_in_grid(t)?;
        let tiles_per_rank = self.rows_per_rank / self.tile_rows;
        // Ragged tails clamp into the last rank block.
        Ok((t.0 / tiles_per_rank).min(self.world_size - 1))
    }

    fn channel(&self, t: TileId) -> Result<ChannelId, MappingError> {
        self.check_in_grid(t)?;
        let tiles_per_channel = self.rows_per_channel / self.tile_rows;
        let global = self.world_size * self.channels_per_rank;
        Ok((t.0 / tiles_per_channel).min(global - 1))
    }

    fn num_channels(&self) -> usize {
        self.world_size * self.channels_per_rank
    }
}

/// Per-token top-k expert assignment, replicated on every rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTable {
    /// For each global token, its k expert ids.
    pub expert_ids: Vec<Vec<usize>>,
    pub num_experts: usize,
    pub topk: usize,
    /// Tokens are sharded contiguously: token `g` lives on rank `g / tokens_per_rank`.
    pub tokens_per_rank: usize,
}

impl RoutingTable {
    pub fn new(
        expert_ids: Vec<Vec<usize>>,
        num_experts: usize,
        topk: usize,
        tokens_per_rank: usize,
    ) -> Result<Self, MappingError> {
        if num_experts == 0 || topk == 0 || topk > num_experts {
            return Err(MappingError::InvalidRouting(format!(
                "need 1 <= topk <= num_experts, got topk={topk} experts={num_experts}"
            )));
        }
        if tokens_per_rank == 0 {
            return Err(MappingError::InvalidRouting(
                "tokens_per_rank must be positive".into(),
            ));
        }
        for (token, ids) in expert_ids.iter().enumerate() {
            if ids.len() != topk {
                return Err(MappingError::InvalidRouting(format!(
                    "token {token} has {} expert ids, expected {topk}",
                    ids.len()
                )));
            }
            for (i, &e) in ids.iter().enumerate() {
                if e >= num_experts {
                    return Err(MappingError::ExpertOutOfRange {
                        token,
                        expert: e,
                        num_experts,
                    });
                }
                if ids[..i].contains(&e) {
                    return Err(MappingError::InvalidRouting(format!(
                        "token {token} lists expert {e} twice"
                    )));
                }
            }
        }
        Ok(RoutingTable {
            expert_ids,
            num_experts,
            topk,
            tokens_per_rank,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.expert_ids.len()
    }

    /// Total routed rows: every token contributes one row per selected expert.
    pub fn routed_rows(&self) -> usize {
        self.num_tokens() * self.topk
    }

    pub fn src_rank(&self, token: usize) -> RankId {
        token / self.tokens_per_rank
    }
}

/// One row of the grouped (expert-major) layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupedRow {
    pub token: usize,
    /// Position of this row's expert in the token's top-k list.
    pub slot: usize,
    pub expert: usize,
    pub src_rank: RankId,
}

const UNFILLED: u32 = u32::MAX;

/// Runtime lookup-table mapping for routed workloads.
///
/// Built by [`build_dynamic_mapping`]; immutable afterwards and safe to read
/// concurrently. Unfilled entries hold a sentinel and fail loudly on lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DynamicMapping {
    world_size: usize,
    channels_per_rank: usize,
    nominal_tile_rows: usize,
    row_lo: Vec<u32>,
    row_hi: Vec<u32>,
    owner_rank: Vec<u32>,
    owner_channel: Vec<u32>,
    filled: Vec<bool>,
    /// Grouped-row -> source-token layout, in row order.
    rows: Vec<GroupedRow>,
}

impl DynamicMapping {
    /// An all-unfilled table of `num_tiles` entries; used by tests and by
    /// dynamic logics that fill entries one by one.
    pub fn unfilled(
        num_tiles: usize,
        world_size: usize,
        channels_per_rank: usize,
        nominal_tile_rows: usize,
    ) -> Self {
        DynamicMapping {
            world_size,
            channels_per_rank,
            nominal_tile_rows: nominal_tile_rows.max(1),
            row_lo: vec![UNFILLED; num_tiles],
            row_hi: vec![UNFILLED; num_tiles],
            owner_rank: vec![UNFILLED; num_tiles],
            owner_channel: vec![UNFILLED; num_tiles],
            filled: vec![false; num_tiles],
            rows: Vec::new(),
        }
    }

    pub fn fill(
        &mut self,
        t: TileId,
        row_lo: usize,
        row_hi: usize,
        rank: RankId,
        channel: ChannelId,
    ) -> Result<(), MappingError> {
        if t.0 >= self.filled.len() {
            return Err(MappingError::TileOutOfGrid {
                tile: t.0,
                num_tiles: self.filled.len(),
            });
        }
        if row_lo >= row_hi {
            return Err(MappingError::InvalidConfig(format!(
                "empty row span [{row_lo}, {row_hi}) for tile {}",
                t.0
            )));
        }
        if rank >= self.world_size || channel >= self.num_channels() {
            return Err(MappingError::InvalidConfig(format!(
                "tile {}: rank {rank} or channel {channel} out of range",
                t.0
            )));
        }
        self.row_lo[t.0] = row_lo as u32;
        self.row_hi[t.0] = row_hi as u32;
        self.owner_rank[t.0] = rank as u32;
        self.owner_channel[t.0] = channel as u32;
        self.filled[t.0] = true;
        Ok(())
    }

    /// Resolve a tile to (shape range, rank, channel).
    pub fn lookup(&self, t: TileId) -> Result<(ShapeRange, RankId, ChannelId), MappingError> {
        let (lo, hi) = self.row_range(t)?;
        Ok((
            ShapeRange::rows(lo, hi),
            self.owner(t)?,
            self.channel(t)?,
        ))
    }

    pub fn grouped_rows(&self) -> &[GroupedRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.filled.is_empty()
    }

    fn check_filled(&self, t: TileId) -> Result<(), MappingError> {
        if t.0 >= self.filled.len() {
            return Err(MappingError::TileOutOfGrid {
                tile: t.0,
                num_tiles: self.filled.len(),
            });
        }
        if !self.filled[t.0] {
            return Err(MappingError::NotMaterialized { tile: t.0 });
        }
        Ok(())
    }
}

impl TileMap for DynamicMapping {
    fn num_tiles(&self) -> usize {
        self.filled.len()
    }

    fn tile_rows(&self) -> usize {
        self.nominal_tile_rows
    }

    fn total_rows(&self) -> usize {
        self.rows.len()
    }

    fn row_range(&self, t: TileId) -> Result<(usize, usize), MappingError> {
        self.check_filled(t)?;
        Ok((self.row_lo[t.0] as usize, self.row_hi[t.0] as usize))
    }

    fn owner(&self, t: TileId) -> Result<RankId, MappingError> {
        self.check_filled(t)?;
        Ok(self.owner_rank[t.0] as usize)
    }

    fn channel(&self, t: TileId) -> Result<ChannelId, MappingError> {
        self.check_filled(t)?;
        Ok(self.owner_channel[t.0] as usize)
    }

    fn num_channels(&self) -> usize {
        self.world_size * self.channels_per_rank
    }
}

/// Group routed tokens by expert and cut the grouped sequence into tiles.
///
/// Grouping is stable: ascending expert id, then source rank, then original
/// token index. Each tile's owner is the rank contributing the majority of its
/// source tokens (ties to the lowest rank); channels are assigned round-robin
/// among each owner rank's local channels. The result is a pure function of
/// its inputs.
pub fn build_dynamic_mapping(
    routing: &RoutingTable,
    tile_rows: usize,
    world_size: usize,
    channels_per_rank: usize,
) -> Result<DynamicMapping, MappingError> {
    if tile_rows == 0 || world_size == 0 || channels_per_rank == 0 {
        return Err(MappingError::InvalidConfig(format!(
            "tile_rows={tile_rows} world={world_size} channels={channels_per_rank} \
             must be positive"
        )));
    }
    let tokens = routing.num_tokens();
    if tokens == 0 {
        return Ok(DynamicMapping::unfilled(
            0,
            world_size,
            channels_per_rank,
            tile_rows,
        ));
    }
    if tokens != routing.tokens_per_rank * world_size {
        return Err(MappingError::InvalidRouting(format!(
            "{tokens} tokens do not shard as {} per rank over {world_size} ranks",
            routing.tokens_per_rank
        )));
    }

    let mut rows: Vec<GroupedRow> = Vec::with_capacity(routing.routed_rows());
    for (token, ids) in routing.expert_ids.iter().enumerate() {
        for (slot, &expert) in ids.iter().enumerate() {
            rows.push(GroupedRow {
                token,
                slot,
                expert,
                src_rank: routing.src_rank(token),
            });
        }
    }
    rows.sort_by_key(|r| (r.expert, r.src_rank, r.token));

    let num_tiles = rows.len().div_ceil(tile_rows);
    let mut map = DynamicMapping::unfilled(num_tiles, world_size, channels_per_rank, tile_rows);
    let mut next_channel = vec![0usize; world_size];
    for t in 0..num_tiles {
        let lo = t * tile_rows;
        let hi = (lo + tile_rows).min(rows.len());
        let mut votes = vec![0usize; world_size];
        for r in &rows[lo..hi] {
            votes[r.src_rank] += 1;
        }
        let owner = votes
            .iter()
            .enumerate()
            .max_by_key(|(rank, v)| (**v, world_size - rank))
            .map(|(rank, _)| rank)
            .unwrap();
        let channel = owner * channels_per_rank + next_channel[owner] % channels_per_rank;
        next_channel[owner] += 1;
        map.fill(TileId(t), lo, hi, owner, channel)?;
    }
    map.rows = rows;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mlp1() -> StaticMapping {
        // 8192-row sharding over 8 ranks with 4 channels each.
        StaticMapping::new(8192, 8, 4, 128, 128).unwrap()
    }

    #[test]
    fn shape_range_first_tile() {
        let m = StaticMapping::new(8192, 1, 1, 128, 128).unwrap();
        assert_eq!(m.shape_range(TileId(0)).unwrap(), ShapeRange::rows(0, 128));
    }

    #[test]
    fn shape_range_mid_tile() {
        let m = mlp1();
        assert_eq!(
            m.shape_range(TileId(9)).unwrap(),
            ShapeRange::rows(1152, 1280)
        );
    }

    #[test]
    fn shape_range_clamped_last_tile() {
        let m = StaticMapping::new(8100, 1, 1, 128, 128).unwrap();
        assert_eq!(
            m.shape_range(TileId(63)).unwrap(),
            ShapeRange::rows(8064, 8100)
        );
        // Brute-force: the ranges partition every row index exactly once.
        let mut seen = vec![0usize; 8100];
        for t in 0..m.num_tiles() {
            let (lo, hi) = m.row_range(TileId(t)).unwrap();
            for row in seen.iter_mut().take(hi).skip(lo) {
                *row += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn shape_range_out_of_grid() {
        let m = mlp1();
        assert!(matches!(
            m.shape_range(TileId(64)),
            Err(MappingError::TileOutOfGrid { .. })
        ));
    }

    #[test]
    fn src_rank_examples() {
        let m = mlp1();
        assert_eq!(m.src_rank(TileId(0)).unwrap(), 0);
        assert_eq!(m.src_rank(TileId(9)).unwrap(), 1);
        assert_eq!(m.src_rank(TileId(63)).unwrap(), 7);
        // All 64 tiles map onto ranks 0..8 in contiguous blocks of 8.
        for t in 0..64 {
            assert_eq!(m.src_rank(TileId(t)).unwrap(), t / 8);
        }
    }

    #[test]
    fn src_rank_rejects_oversized_tiles() {
        // tile_rows > rows_per_rank leaves the rank formula undefined.
        assert!(StaticMapping::new(64, 8, 1, 16, 16).is_err());
    }

    #[test]
    fn channel_examples() {
        let m = mlp1();
        assert_eq!(m.channel(TileId(0)).unwrap(), 0);
        assert_eq!(m.channel(TileId(9)).unwrap(), 4);
        assert_eq!(m.channel(TileId(63)).unwrap(), 31);
        // Channels 0..32 each receive exactly 2 tiles.
        let counts = m.tiles_per_channel();
        assert_eq!(counts.len(), 32);
        assert!(counts.iter().all(|&c| c == 2));
    }

    #[test]
    fn covering_channels_spans_tiles() {
        let m = mlp1();
        // Rows [0, 512) span channels 0 and 1 (256 rows per channel).
        assert_eq!(m.covering_channels(0, 512).unwrap(), vec![0, 1]);
        assert_eq!(m.covering_channels(128, 256).unwrap(), vec![0]);
    }

    fn brute_force_check(m: &StaticMapping) {
        // Row-level oracle: assign every row independently and require that
        // the tile-level mappings agree.
        let mut covered = vec![0usize; m.rows];
        for t in 0..m.num_tiles() {
            let t = TileId(t);
            let (lo, hi) = m.row_range(t).unwrap();
            let rank = m.owner(t).unwrap();
            let ch = m.channel(t).unwrap();
            for row in lo..hi {
                covered[row] += 1;
                assert_eq!(
                    rank,
                    (row / m.rows_per_rank).min(m.world_size - 1),
                    "rank block mismatch at row {row}"
                );
                assert_eq!(
                    ch,
                    (row / m.rows_per_channel).min(m.num_channels() - 1),
                    "channel block mismatch at row {row}"
                );
            }
        }
        assert!(covered.iter().all(|&c| c == 1), "not a partition");
    }

    #[test]
    fn static_partition_and_blocks() {
        for &rows in &[64usize, 512, 8192] {
            for &world in &[1usize, 2, 4, 8] {
                for &channels in &[1usize, 2, 4] {
                    for &tm in &[16usize, 128] {
                        if let Ok(m) = StaticMapping::new(rows, world, channels, tm, tm) {
                            brute_force_check(&m);
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn static_monotone_and_consistent(
            rows in 1usize..2048,
            world in 1usize..9,
            channels in 1usize..5,
            tm_pow in 0u32..8,
        ) {
            let tm = 1usize << tm_pow;
            let Ok(m) = StaticMapping::new(rows, world, channels, tm, tm) else {
                return Ok(());
            };
            let mut prev_rank = 0;
            let mut prev_ch = 0;
            for t in 0..m.num_tiles() {
                let t = TileId(t);
                let rank = m.owner(t).unwrap();
                let ch = m.channel(t).unwrap();
                prop_assert!(rank >= prev_rank, "src_rank not monotone");
                prop_assert!(ch >= prev_ch, "channel not monotone");
                prev_rank = rank;
                prev_ch = ch;
                // Consistency: the tile's rows lie within its owner's block
                // whenever tiles divide the rank block evenly.
                if m.rows_per_rank % tm == 0 {
                    let (lo, hi) = m.row_range(t).unwrap();
                    let block_lo = rank * m.rows_per_rank;
                    let block_hi = ((rank + 1) * m.rows_per_rank).min(rows.max(block_lo + 1));
                    prop_assert!(lo >= block_lo && hi <= block_hi.max(hi.min(rows)),
                        "tile rows [{lo},{hi}) escape rank {rank} block");
                }
            }
        }
    }

    fn routing(ids: &[&[usize]], experts: usize, topk: usize, per_rank: usize) -> RoutingTable {
        RoutingTable::new(
            ids.iter().map(|v| v.to_vec()).collect(),
            experts,
            topk,
            per_rank,
        )
        .unwrap()
    }

    #[test]
    fn dynamic_build_four_token_example() {
        // Tokens 0..4 on 2 ranks, experts [0,1,0,1]: grouped order is
        // expert 0 -> tokens {0,2}, expert 1 -> tokens {1,3}.
        let r = routing(&[&[0], &[1], &[0], &[1]], 2, 1, 2);
        let map = build_dynamic_mapping(&r, 2, 2, 1).unwrap();
        assert_eq!(map.num_tiles(), 2);
        let (range0, _, _) = map.lookup(TileId(0)).unwrap();
        assert_eq!(range0, ShapeRange::rows(0, 2));
        let tokens0: Vec<usize> = map.grouped_rows()[0..2].iter().map(|r| r.token).collect();
        assert_eq!(tokens0, vec![0, 2]);
        let (range1, rank1, _) = map.lookup(TileId(1)).unwrap();
        assert_eq!(range1, ShapeRange::rows(2, 4));
        let tokens1: Vec<usize> = map.grouped_rows()[2..4].iter().map(|r| r.token).collect();
        assert_eq!(tokens1, vec![1, 3]);
        // Tile 1 holds tokens 1 (rank 0) and 3 (rank 1): tie breaks low.
        assert_eq!(rank1, 0);
    }

    #[test]
    fn dynamic_single_token() {
        let r = routing(&[&[0]], 1, 1, 1);
        let map = build_dynamic_mapping(&r, 4, 1, 1).unwrap();
        assert_eq!(map.num_tiles(), 1);
        let (range, rank, ch) = map.lookup(TileId(0)).unwrap();
        assert_eq!(range, ShapeRange::rows(0, 1));
        assert_eq!(rank, 0);
        assert_eq!(ch, 0);
    }

    #[test]
    fn dynamic_topk_duplicates_rows() {
        let ids: Vec<Vec<usize>> = (0..6).map(|i| vec![i % 2, (i + 1) % 2]).collect();
        let r = RoutingTable::new(ids, 2, 2, 3).unwrap();
        let map = build_dynamic_mapping(&r, 4, 2, 1).unwrap();
        assert_eq!(map.grouped_rows().len(), 12);
        assert_eq!(r.routed_rows(), 12);
    }

    #[test]
    fn dynamic_lookup_unfilled_errors() {
        let map = DynamicMapping::unfilled(3, 2, 1, 4);
        assert!(matches!(
            map.lookup(TileId(1)),
            Err(MappingError::NotMaterialized { tile: 1 })
        ));
    }

    #[test]
    fn dynamic_empty_routing_is_valid() {
        let r = RoutingTable::new(Vec::new(), 2, 1, 4).unwrap();
        let map = build_dynamic_mapping(&r, 4, 2, 1).unwrap();
        assert!(map.is_empty());
    }

    #[test]
    fn routing_rejects_bad_expert() {
        assert!(matches!(
            RoutingTable::new(vec![vec![3]], 2, 1, 1),
            Err(MappingError::ExpertOutOfRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn dynamic_partition_and_determinism(
            tokens_per_rank in 1usize..9,
            world in 1usize..5,
            experts in 1usize..6,
            tile_rows in 1usize..7,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let topk = rng.gen_range(1..=experts);
            let ids: Vec<Vec<usize>> = (0..tokens_per_rank * world)
                .map(|_| {
                    let mut pool: Vec<usize> = (0..experts).collect();
                    let mut picks = Vec::new();
                    for _ in 0..topk {
                        picks.push(pool.remove(rng.gen_range(0..pool.len())));
                    }
                    picks
                })
                .collect();
            let r = RoutingTable::new(ids, experts, topk, tokens_per_rank).unwrap();
            let map = build_dynamic_mapping(&r, tile_rows, world, 2).unwrap();
            // Union of filled spans covers [0, S*k) exactly once, in order.
            let mut next = 0usize;
            for t in 0..map.num_tiles() {
                let (lo, hi) = map.row_range(TileId(t)).unwrap();
                prop_assert_eq!(lo, next);
                prop_assert!(hi > lo);
                next = hi;
            }
            prop_assert_eq!(next, r.routed_rows());
            // Pure function of inputs.
            let again = build_dynamic_mapping(&r, tile_rows, world, 2).unwrap();
            prop_assert_eq!(map, again);
        }
    }
}
