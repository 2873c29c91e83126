//! Query/memory block partitions, generation orders and causal masks.
//!
//! Positions index the flattened raster sequence of a grid of
//! `height × width` pixels with `channels` positions per pixel (3 when every
//! colour channel is its own position, 1 when a position is a whole pixel).

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};

/// How the positions of an image are grouped into attention blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Every position attends to every (earlier) position.
    Full,
    /// Raster-order blocks of `l_q` positions with `l_m` trailing history.
    Local1d { l_q: usize, l_m: usize },
    /// `h_q × w_q` pixel rectangles extended `h_m` rows up and `w_m` columns
    /// left and right.
    Local2d { h_q: usize, w_q: usize, h_m: usize, w_m: usize },
}

impl Scheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Scheme::Full => Ok(()),
            Scheme::Local1d { l_q, .. } if l_q == 0 => Err(Error::Config("l_q must be >= 1".into())),
            Scheme::Local2d { h_q, w_q, .. } if h_q == 0 || w_q == 0 => {
                Err(Error::Config("h_q and w_q must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Pixel grid the positions live on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    /// Positions per pixel.
    pub channels: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// `(row, col, channel)` of a raster position.
    pub fn coords(&self, p: usize) -> (usize, usize, usize) {
        let pix = p / self.channels;
        (pix / self.width, pix % self.width, p % self.channels)
    }

    pub fn position(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    /// Positions recomputed by this block, in generation order.
    pub query: Vec<usize>,
    /// Positions the queries may read; always a superset of `query`.
    pub memory: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub n_positions: usize,
    pub blocks: Vec<Block>,
    /// `gen_order[r]` is the position generated at rank `r`.
    pub gen_order: Vec<usize>,
    /// Padded query length shared by every block.
    pub pad_to: usize,
}

/// Attention permissions for one block: `allowed[i * cols + j]` says whether
/// query slot `i` may read memory slot `j`. `start[i]` is the always-available
/// start slot, enabled for every real query row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
    pub start: Vec<bool>,
}

impl CausalMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn all_true(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
            start: vec![true; rows],
        }
    }
}

impl BlockPlan {
    pub fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0; self.n_positions];
        for (r, &p) in self.gen_order.iter().enumerate() {
            rank[p] = r;
        }
        rank
    }

    /// Longest memory list over all blocks.
    pub fn max_memory(&self) -> usize {
        self.blocks.iter().map(|b| b.memory.len()).max().unwrap_or(0)
    }
}

pub fn plan_full(n: usize) -> Result<BlockPlan> {
    if n == 0 {
        return Err(Error::InvalidArgument("plan needs at least one position".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    Ok(BlockPlan {
        n_positions: n,
        blocks: vec![Block {
            query: all.clone(),
            memory: all.clone(),
        }],
        gen_order: all,
        pad_to: n,
    })
}

pub fn plan_1d(grid: Grid, l_q: usize, l_m: usize) -> Result<BlockPlan> {
    Scheme::Local1d { l_q, l_m }.validate()?;
    let n = grid.positions();
    if n == 0 {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    let blocks = (0..n.div_ceil(l_q))
        .map(|k| {
            let start = k * l_q;
            let end = ((k + 1) * l_q).min(n);
            Block {
                query: (start..end).collect(),
                memory: (start.saturating_sub(l_m)..end).collect(),
            }
        })
        .collect();
    Ok(BlockPlan {
        n_positions: n,
        blocks,
        gen_order: (0..n).collect(),
        pad_to: l_q,
    })
}

pub fn plan_2d(grid: Grid, h_q: usize, w_q: usize, h_m: usize, w_m: usize) -> Result<BlockPlan> {
    Scheme::Local2d { h_q, w_q, h_m, w_m }.validate()?;
    let (h, w, ch) = (grid.height, grid.width, grid.channels);
    if grid.positions() == 0 {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    let expand = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| -> Vec<usize> {
        let mut out = Vec::with_capacity(rows.len() * cols.len() * ch);
        for r in rows {
            for c in cols.clone() {
                for k in 0..ch {
                    out.push(grid.position(r, c, k));
                }
            }
        }
        out
    };
    let mut blocks = Vec::new();
    for br in 0..h.div_ceil(h_q) {
        for bc in 0..w.div_ceil(w_q) {
            let (r0, r1) = (br * h_q, ((br + 1) * h_q).min(h));
            let (c0, c1) = (bc * w_q, ((bc + 1) * w_q).min(w));
            blocks.push(Block {
                query: expand(r0..r1, c0..c1),
                memory: expand(r0.saturating_sub(h_m)..r1, c0.saturating_sub(w_m)..(c1 + w_m).min(w)),
            });
        }
    }
    let gen_order = blocks.iter().flat_map(|b| b.query.iter().copied()).collect();
    Ok(BlockPlan {
        n_positions: grid.positions(),
        blocks,
        gen_order,
        pad_to: h_q * w_q * ch,
    })
}

/// Plan for `scheme` over `grid`.
pub fn plan(scheme: Scheme, grid: Grid) -> Result<BlockPlan> {
    match scheme {
        Scheme::Full => plan_full(grid.positions()),
        Scheme::Local1d { l_q, l_m } => plan_1d(grid, l_q, l_m),
        Scheme::Local2d { h_q, w_q, h_m, w_m } => plan_2d(grid, h_q, w_q, h_m, w_m),
    }
}

/// Mask for one block: memory slot `j` is readable by query slot `i` iff it
/// was generated strictly earlier (or at the same rank, when
/// `self_inclusive`). Padding rows read nothing.
pub fn build_mask(plan: &BlockPlan, block_index: usize, self_inclusive: bool) -> Result<CausalMask> {
    let block = plan.blocks.get(block_index).ok_or(Error::IndexOutOfRange {
        what: "block",
        index: block_index,
        limit: plan.blocks.len(),
    })?;
    let rank = plan.ranks();
    let rows = plan.pad_to;
    let cols = block.memory.len();
    let mut allowed = vec![false; rows * cols];
    let mut start = vec![false; rows];
    for (i, &q) in block.query.iter().enumerate() {
        start[i] = true;
        for (j, &m) in block.memory.iter().enumerate() {
            allowed[i * cols + j] = rank[m] < rank[q] || (self_inclusive && m == q);
        }
    }
    Ok(CausalMask { rows, cols, allowed, start })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlanViolation {
    NotAPermutation,
    QueryOverlap { position: usize },
    QueryUncovered { position: usize },
    MemoryMissesQuery { block: usize, position: usize },
    BlockNotContiguous { block: usize },
    QueryTooLong { block: usize },
    OutOfRange { position: usize },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NotAPermutation => write!(f, "generation order is not a permutation"),
            Self::QueryOverlap { position } => write!(f, "position {position} is in two query blocks"),
            Self::QueryUncovered { position } => write!(f, "position {position} is in no query block"),
            Self::MemoryMissesQuery { block, position } => {
                write!(f, "block {block} memory lacks its query position {position}")
            }
            Self::BlockNotContiguous { block } => write!(f, "block {block} is not contiguous in generation order"),
            Self::QueryTooLong { block } => write!(f, "block {block} exceeds the padded query length"),
            Self::OutOfRange { position } => write!(f, "position {position} out of range"),
        }
    }
}

/// Checks the partition, superset and ordering invariants of a plan and
/// reports the first violation found.
pub fn validate_plan(plan: &BlockPlan) -> std::result::Result<(), PlanViolation> {
    let n = plan.n_positions;
    let mut seen = vec![false; n];
    if plan.gen_order.len() != n {
        return Err(PlanViolation::NotAPermutation);
    }
    for &p in &plan.gen_order {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(PlanViolation::NotAPermutation);
        }
    }
    let rank = plan.ranks();
    let mut covered = vec![false; n];
    for (bi, b) in plan.blocks.iter().enumerate() {
        if b.query.len() > plan.pad_to {
            return Err(PlanViolation::QueryTooLong { block: bi });
        }
        for &p in b.query.iter().chain(&b.memory) {
            if p >= n {
                return Err(PlanViolation::OutOfRange { position: p });
            }
        }
        for &q in &b.query {
            if std::mem::replace(&mut covered[q], true) {
                return Err(PlanViolation::QueryOverlap { position: q });
            }
        }
        let mem: HashSet<usize> = b.memory.iter().copied().collect();
        if let Some(&q) = b.query.iter().find(|q| !mem.contains(q)) {
            return Err(PlanViolation::MemoryMissesQuery { block: bi, position: q });
        }
        let ranks: Vec<usize> = b.query.iter().map(|&q| rank[q]).collect();
        if let (Some(&lo), Some(&hi)) = (ranks.iter().min(), ranks.iter().max()) {
            if hi - lo + 1 != ranks.len() {
                return Err(PlanViolation::BlockNotContiguous { block: bi });
            }
        }
    }
    if let Some(p) = covered.iter().position(|c| !c) {
        return Err(PlanViolation::QueryUncovered { position: p });
    }
    Ok(())
}

/// Multiply-adds for the query-key product over all blocks:
/// `Σ padded_l_q · l_mem · d`.
pub fn attention_cost(plan: &BlockPlan, d: usize) -> u64 {
    plan.blocks
        .iter()
        .map(|b| (plan.pad_to * b.memory.len() * d) as u64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn grid(h: usize, w: usize) -> Grid {
        Grid::new(h, w, 3)
    }

    #[test]
    fn full_plan() {
        let p = plan_full(192).unwrap();
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.blocks[0].query.len(), 192);
        assert_eq!(plan_full(1).unwrap().blocks[0].memory, vec![0]);
        let m = CausalMask::all_true(192, 192);
        assert!(m.allowed.iter().all(|&a| a) && m.allowed.len() == 192 * 192);
        assert!(plan_full(0).is_err());
    }

    #[test]
    fn one_d_blocks_on_2x2() {
        let p = plan_1d(grid(2, 2), 4, 4).unwrap();
        let got: Vec<(Vec<usize>, Vec<usize>)> = p.blocks.iter().map(|b| (b.query.clone(), b.memory.clone())).collect();
        assert_eq!(
            got,
            vec![
                ((0..4).collect(), (0..4).collect()),
                ((4..8).collect(), (0..8).collect()),
                ((8..12).collect(), (4..12).collect()),
            ]
        );
    }

    #[test]
    fn one_d_reference_sizes() {
        let p = plan_1d(grid(32, 32), 256, 256).unwrap();
        assert_eq!(p.n_positions, 3072);
        assert_eq!(p.blocks.len(), 12);
        assert!(p.blocks[1..].iter().all(|b| b.memory.len() == 512));
    }

    #[test]
    fn one_d_short_final_block() {
        let p = plan_1d(grid(1, 3), 4, 2).unwrap();
        assert_eq!(p.blocks.last().unwrap().query, vec![8]);
        let m = build_mask(&p, 2, false).unwrap();
        assert_eq!(m.rows, 4);
        assert!(!m.start[1] && !m.start[3]);
        assert!((0..m.cols).all(|j| !m.get(2, j)));
    }

    #[test]
    fn two_d_tiling() {
        let p = plan_2d(grid(8, 8), 2, 4, 2, 2).unwrap();
        assert_eq!(p.blocks.len(), 8);
        assert!(p.blocks.iter().all(|b| b.query.len() == 24));
        // top-left: clipping removes the extension above and to the left,
        // leaving only the right-hand columns
        let b0 = &p.blocks[0];
        let rows: HashSet<usize> = b0.memory.iter().map(|&m| grid(8, 8).coords(m).0).collect();
        assert_eq!(rows, [0, 1].into_iter().collect());
        let p0 = plan_2d(grid(8, 8), 2, 4, 2, 0).unwrap();
        assert_eq!(p0.blocks[0].memory, p0.blocks[0].query);
    }

    #[test]
    fn two_d_interior_memory_size_matches_brute_force() {
        let g = grid(16, 16);
        let (h_q, w_q, h_m, w_m) = (2, 3, 2, 2);
        let p = plan_2d(g, h_q, w_q, h_m, w_m).unwrap();
        let bw = 16usize.div_ceil(w_q);
        for (bi, b) in p.blocks.iter().enumerate() {
            let (br, bc) = (bi / bw, bi % bw);
            let (r0, c0) = (br * h_q, bc * w_q);
            // brute force: every pixel within the extended rectangle
            let mut expect = HashSet::new();
            for r in 0..16usize {
                for c in 0..16usize {
                    let in_rows = r + h_m >= r0 && r < r0 + h_q;
                    let in_cols = c + w_m >= c0 && c < c0 + w_q + w_m;
                    if in_rows && in_cols {
                        for k in 0..3 {
                            expect.insert(g.position(r, c, k));
                        }
                    }
                }
            }
            let got: HashSet<usize> = b.memory.iter().copied().collect();
            assert_eq!(got, expect, "block {bi}");
            let interior = r0 >= h_m && c0 >= w_m && c0 + w_q + w_m <= 16 && r0 + h_q <= 16;
            if interior {
                assert_eq!(b.memory.len() / 3, (h_q + h_m) * (w_q + 2 * w_m));
            }
        }
    }

    #[test]
    fn two_d_never_reaches_below() {
        let g = grid(9, 7);
        let p = plan_2d(g, 2, 3, 3, 2).unwrap();
        for b in &p.blocks {
            let max_q_row = b.query.iter().map(|&q| g.coords(q).0).max().unwrap();
            assert!(b.memory.iter().all(|&m| g.coords(m).0 <= max_q_row));
        }
    }

    #[test]
    fn first_position_only_sees_start() {
        let p = plan_1d(grid(2, 2), 4, 0).unwrap();
        let m = build_mask(&p, 0, false).unwrap();
        assert!(m.start[0] && (0..m.cols).all(|j| !m.get(0, j)));
        // last in-block position with l_m = 0 reads all earlier in-block positions
        assert!((0..3).all(|j| m.get(3, j)) && !m.get(3, 3));
        assert!(build_mask(&p, 3, false).is_err());
    }

    #[test]
    fn masks_match_brute_force_predicate() {
        let mut rng = Rng::new(17);
        for _ in 0..10 {
            let (h, w) = (1 + rng.below(6) as usize, 1 + rng.below(6) as usize);
            let g = grid(h, w);
            let plans = [
                plan_1d(g, 1 + rng.below(10) as usize, rng.below(10) as usize).unwrap(),
                plan_2d(g, 1 + rng.below(3) as usize, 1 + rng.below(3) as usize, rng.below(3) as usize, rng.below(3) as usize)
                    .unwrap(),
            ];
            for p in &plans {
                validate_plan(p).unwrap();
                let rank = p.ranks();
                for (bi, b) in p.blocks.iter().enumerate() {
                    let m = build_mask(p, bi, false).unwrap();
                    for (i, &q) in b.query.iter().enumerate() {
                        for (j, &mm) in b.memory.iter().enumerate() {
                            assert_eq!(m.get(i, j), rank[mm] < rank[q]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn self_inclusive_adds_diagonal() {
        let p = plan_1d(grid(1, 2), 6, 0).unwrap();
        let m = build_mask(&p, 0, true).unwrap();
        assert!((0..6).all(|i| m.get(i, i)));
    }

    #[test]
    fn validate_catches_corruption() {
        let mut p = plan_1d(grid(2, 2), 4, 4).unwrap();
        assert_eq!(validate_plan(&p), Ok(()));
        p.blocks[1].query[0] = 3;
        assert!(matches!(validate_plan(&p), Err(PlanViolation::QueryOverlap { position: 3 })));
        let mut p = plan_2d(grid(4, 4), 2, 2, 1, 1).unwrap();
        let q = p.blocks[2].query[0];
        p.blocks[2].memory.retain(|&m| m != q);
        assert!(matches!(validate_plan(&p), Err(PlanViolation::MemoryMissesQuery { block: 2, .. })));
        let mut p = plan_1d(grid(2, 2), 4, 4).unwrap();
        p.gen_order.swap(0, 11);
        assert!(matches!(validate_plan(&p), Err(PlanViolation::BlockNotContiguous { .. })));
    }

    #[test]
    fn cost_formulas() {
        let full = plan_full(48).unwrap();
        assert_eq!(attention_cost(&full, 8), 48 * 48 * 8);
        // 768 and 1536 positions: 16x16 and 16x32 grids
        let a = attention_cost(&plan_1d(grid(16, 16), 64, 64).unwrap(), 16) as f64;
        let b = attention_cost(&plan_1d(grid(16, 32), 64, 64).unwrap(), 16) as f64;
        let ratio = b / a;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
        let small = attention_cost(&plan_1d(grid(16, 16), 64, 64).unwrap(), 1);
        let big = attention_cost(&plan_1d(grid(16, 16), 64, 192).unwrap(), 1);
        assert!(big > small);
    }
}
