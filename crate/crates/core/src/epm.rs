//! Error propagation management.
//!
//! Copyback hops are counted per block, not per page: every page in a block
//! with counter `c` has been copybacked exactly `c` times since its last ECC
//! pass. A copyback out of a counter-`c` block therefore has to land in a
//! counter-`c+1` block, so each plane keeps one migration active block per
//! counter value `0..=M`, plus a separate counter-0 block for host writes.

use serde::Serialize;

use crate::error::SimError;
use crate::ftl::block::{BlockState, PlaneBlocks};
use crate::geometry::Geometry;
use crate::reliability::CtTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrationMode {
    Rcopyback,
    Offchip,
}

impl MigrationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MigrationMode::Rcopyback => "rcopyback",
            MigrationMode::Offchip => "offchip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationDecision {
    pub mode: MigrationMode,
    pub destination_slot: u32,
}

impl MigrationDecision {
    pub const OFFCHIP: MigrationDecision = MigrationDecision { mode: MigrationMode::Offchip, destination_slot: 0 };
}

/// Copyback limits for one run: the table and the per-run cap `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpmPolicy {
    pub max_threshold: u32,
    pub ct: CtTable,
}

impl EpmPolicy {
    pub fn new(max_threshold: u32, ct: CtTable) -> Self {
        Self { max_threshold, ct }
    }

    /// `min(M, CT(pe))`.
    pub fn effective_threshold(&self, pe_cycles: u32) -> u32 {
        self.max_threshold.min(self.ct.lookup(pe_cycles))
    }

    /// Rcopyback is granted only while the source counter is below the
    /// source block's effective threshold; everything else goes off-chip into
    /// slot 0, which is where the ECC pass happens.
    pub fn decide_destination(&self, src_counter: u32, src_pe: u32, hint: MigrationMode) -> MigrationDecision {
        if hint == MigrationMode::Rcopyback && src_counter < self.effective_threshold(src_pe) {
            MigrationDecision { mode: MigrationMode::Rcopyback, destination_slot: src_counter + 1 }
        } else {
            MigrationDecision::OFFCHIP
        }
    }

    /// A block may serve slot `slot` only if its own wear still allows that
    /// many hops, so pages never sit in a block whose threshold they exceed.
    pub fn slot_eligible(&self, pe_cycles: u32, slot: u32) -> bool {
        slot == 0 || self.effective_threshold(pe_cycles) >= slot
    }
}

/// Which active block a page is appended to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Host,
    Migration(u32),
}

impl Stream {
    pub fn counter(self) -> u32 {
        match self {
            Stream::Host => 0,
            Stream::Migration(slot) => slot,
        }
    }
}

/// Active blocks of one plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveBlockSet {
    pub host: Option<u32>,
    /// `slots[i]` holds only pages with `i` copyback hops.
    pub slots: Vec<Option<u32>>,
}

impl ActiveBlockSet {
    pub fn new(max_threshold: u32) -> Self {
        Self { host: None, slots: vec![None; max_threshold as usize + 1] }
    }

    pub fn get(&self, stream: Stream) -> Option<u32> {
        match stream {
            Stream::Host => self.host,
            Stream::Migration(i) => self.slots.get(i as usize).copied().flatten(),
        }
    }

    fn set(&mut self, stream: Stream, block: Option<u32>) {
        match stream {
            Stream::Host => self.host = block,
            Stream::Migration(i) => self.slots[i as usize] = block,
        }
    }

    pub fn migration_slots_filled(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Takes a free block for `stream` and stamps its counter. The block that
    /// used to serve the stream, if any, is marked full. Returns `Ok(None)`
    /// when free blocks exist but none is eligible for the slot.
    pub fn allocate_active(
        &mut self,
        plane: u32,
        stream: Stream,
        blocks: &mut PlaneBlocks,
        policy: &EpmPolicy,
    ) -> Result<Option<u32>, SimError> {
        if blocks.free.is_empty() {
            return Err(SimError::Capacity {
                plane,
                purpose: match stream {
                    Stream::Host => "host writes",
                    Stream::Migration(_) => "migration",
                },
            });
        }
        let slot = stream.counter();
        let Some(pos) = blocks.free.iter().position(|&b| policy.slot_eligible(blocks.meta[b as usize].pe_cycles, slot))
        else {
            return Ok(None);
        };
        let block = blocks.free.remove(pos).expect("position in range");
        if let Some(prev) = self.get(stream) {
            let m = &mut blocks.meta[prev as usize];
            if m.state == BlockState::Active {
                m.state = BlockState::Full;
            }
        }
        let m = &mut blocks.meta[block as usize];
        debug_assert_eq!(m.state, BlockState::Free);
        m.state = BlockState::Active;
        m.copyback_counter = slot;
        m.write_ptr = 0;
        m.valid = 0;
        self.set(stream, Some(block));
        Ok(Some(block))
    }

    /// Detaches the stream's block, e.g. after it filled up.
    pub fn retire(&mut self, stream: Stream) {
        self.set(stream, None);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryFootprint {
    pub pages: u64,
    pub blocks: u64,
    pub bits_per_counter: u32,
    pub per_page_bytes: u64,
    pub per_block_bytes: u64,
}

impl MemoryFootprint {
    pub fn describe(&self) -> String {
        format!(
            "per-page: {} pages x {} bits / 8 = {} bytes; per-block: {} blocks x {} bits / 8 = {} bytes",
            self.pages, self.bits_per_counter, self.per_page_bytes, self.blocks, self.bits_per_counter, self.per_block_bytes
        )
    }
}

/// Counter memory for per-page versus per-block hop counting.
pub fn memory_footprint(g: &Geometry, bits_per_counter: u32) -> MemoryFootprint {
    let bytes = |n: u64| (n * u64::from(bits_per_counter)).div_ceil(8);
    let (pages, blocks) = (g.total_pages(), g.total_blocks());
    MemoryFootprint { pages, blocks, bits_per_counter, per_page_bytes: bytes(pages), per_block_bytes: bytes(blocks) }
}
