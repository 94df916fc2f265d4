use std::collections::VecDeque;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockState {
    Free,
    Active,
    Full,
    /// Valid pages are being migrated out.
    Victim,
    Erasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMeta {
    pub pe_cycles: u32,
    /// Copyback hops of every page in the block (`c`).
    pub copyback_counter: u32,
    pub valid: u32,
    pub write_ptr: u32,
    pub state: BlockState,
}

impl BlockMeta {
    pub fn fresh(pe_cycles: u32) -> Self {
        Self { pe_cycles, copyback_counter: 0, valid: 0, write_ptr: 0, state: BlockState::Free }
    }
}

/// Block metadata and free pool of one plane. Free blocks are handed out in
/// the order they were released.
#[derive(Debug, Clone)]
pub struct PlaneBlocks {
    pub meta: Vec<BlockMeta>,
    pub free: VecDeque<u32>,
}

impl PlaneBlocks {
    pub fn new(blocks: u32, initial_pe: u32) -> Self {
        Self { meta: vec![BlockMeta::fresh(initial_pe); blocks as usize], free: (0..blocks).collect() }
    }

    pub fn with_wear(pe: impl IntoIterator<Item = u32>) -> Self {
        let meta: Vec<BlockMeta> = pe.into_iter().map(BlockMeta::fresh).collect();
        let free = (0..meta.len() as u32).collect();
        Self { meta, free }
    }

    /// Completes an erase: one more P/E cycle, counter cleared, back to the pool.
    pub fn erase(&mut self, block: u32) {
        let m = &mut self.meta[block as usize];
        debug_assert_eq!(m.valid, 0, "erasing block with valid pages");
        *m = BlockMeta::fresh(m.pe_cycles + 1);
        self.free.push_back(block);
    }

    /// Greedy victim: the full block with the fewest valid pages, lowest
    /// index on ties. Fully valid blocks are never chosen.
    pub fn select_victim(&self, pages_per_block: u32) -> Option<u32> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.state == BlockState::Full && m.valid < pages_per_block)
            .min_by_key(|&(i, m)| (m.valid, i))
            .map(|(i, _)| i as u32)
    }

    /// Full block with the lowest P/E count.
    pub fn coldest_full(&self) -> Option<u32> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.state == BlockState::Full)
            .min_by_key(|&(i, m)| (m.pe_cycles, i))
            .map(|(i, _)| i as u32)
    }

    pub fn pe_gap(&self) -> u32 {
        let (lo, hi) = self
            .meta
            .iter()
            .fold((u32::MAX, 0), |(lo, hi), m| (lo.min(m.pe_cycles), hi.max(m.pe_cycles)));
        hi.saturating_sub(lo)
    }
}
