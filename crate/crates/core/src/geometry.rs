//! SSD geometry, physical page addressing and NAND timing.
//!
//! Time is carried as integer microseconds everywhere in the simulator so
//! that event logs can be compared exactly.

use serde::{Deserialize, Serialize};

use crate::error::{AddressError, ConfigError};

/// Simulated time in microseconds.
pub type Micros = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub channels: u32,
    pub chips_per_channel: u32,
    pub planes_per_chip: u32,
    pub blocks_per_plane: u32,
    pub pages_per_block: u32,
    /// Bytes per page.
    pub page_size: u64,
}

impl Default for Geometry {
    /// 8 channels x 8 chips x 1 plane x 1024 blocks x 64 pages x 16 KiB = 64 GiB.
    fn default() -> Self {
        Self {
            channels: 8,
            chips_per_channel: 8,
            planes_per_chip: 1,
            blocks_per_plane: 1024,
            pages_per_block: 64,
            page_size: 16 * 1024,
        }
    }
}

impl Geometry {
    /// Checks every field and returns the raw capacity in bytes.
    pub fn validate(&self) -> Result<u64, ConfigError> {
        let fields: [(&'static str, u64); 5] = [
            ("channels", self.channels.into()),
            ("chips_per_channel", self.chips_per_channel.into()),
            ("planes_per_chip", self.planes_per_chip.into()),
            ("blocks_per_plane", self.blocks_per_plane.into()),
            ("pages_per_block", self.pages_per_block.into()),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.page_size == 0 {
            return Err(ConfigError::Zero("page_size"));
        }
        if !self.page_size.is_power_of_two() {
            return Err(ConfigError::Invalid {
                field: "page_size",
                reason: format!("{} is not a power of two", self.page_size),
            });
        }
        fields
            .iter()
            .map(|&(_, v)| v)
            .chain(std::iter::once(self.page_size))
            .try_fold(1u64, |acc, v| acc.checked_mul(v))
            .ok_or(ConfigError::Overflow("geometry capacity"))
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.total_pages() * self.page_size
    }

    pub fn chips(&self) -> u32 {
        self.channels * self.chips_per_channel
    }

    pub fn planes(&self) -> u32 {
        self.chips() * self.planes_per_chip
    }

    pub fn total_blocks(&self) -> u64 {
        u64::from(self.planes()) * u64::from(self.blocks_per_plane)
    }

    pub fn total_pages(&self) -> u64 {
        self.total_blocks() * u64::from(self.pages_per_block)
    }

    pub fn check(&self, addr: PhysAddr) -> Result<(), AddressError> {
        let bounds = [
            ("channel", addr.channel, self.channels),
            ("chip", addr.chip, self.chips_per_channel),
            ("plane", addr.plane, self.planes_per_chip),
            ("block", addr.block, self.blocks_per_plane),
            ("page", addr.page, self.pages_per_block),
        ];
        for (field, index, bound) in bounds {
            if index >= bound {
                return Err(AddressError::OutOfRange { field, index: index.into(), bound: bound.into() });
            }
        }
        Ok(())
    }

    /// Flat physical page number. Pages of a block are contiguous, blocks of a
    /// plane are contiguous, and so on up to the channel.
    pub fn encode(&self, addr: PhysAddr) -> u64 {
        let plane = u64::from(self.plane_index(addr));
        (plane * u64::from(self.blocks_per_plane) + u64::from(addr.block)) * u64::from(self.pages_per_block)
            + u64::from(addr.page)
    }

    pub fn decode(&self, ppn: u64) -> Result<PhysAddr, AddressError> {
        if ppn >= self.total_pages() {
            return Err(AddressError::OutOfRange { field: "ppn", index: ppn, bound: self.total_pages() });
        }
        let page = (ppn % u64::from(self.pages_per_block)) as u32;
        let block_flat = ppn / u64::from(self.pages_per_block);
        let block = (block_flat % u64::from(self.blocks_per_plane)) as u32;
        let plane_flat = (block_flat / u64::from(self.blocks_per_plane)) as u32;
        let plane = plane_flat % self.planes_per_chip;
        let chip_flat = plane_flat / self.planes_per_chip;
        Ok(PhysAddr {
            channel: chip_flat / self.chips_per_channel,
            chip: chip_flat % self.chips_per_channel,
            plane,
            block,
            page,
        })
    }

    /// Flat chip index: `channel * chips_per_channel + chip`.
    pub fn chip_index(&self, addr: PhysAddr) -> u32 {
        addr.channel * self.chips_per_channel + addr.chip
    }

    pub fn plane_index(&self, addr: PhysAddr) -> u32 {
        self.chip_index(addr) * self.planes_per_chip + addr.plane
    }

    /// Address of page 0 of `block` in the flat plane `plane`.
    pub fn block_addr(&self, plane: u32, block: u32) -> PhysAddr {
        let chip_flat = plane / self.planes_per_chip;
        PhysAddr {
            channel: chip_flat / self.chips_per_channel,
            chip: chip_flat % self.chips_per_channel,
            plane: plane % self.planes_per_chip,
            block,
            page: 0,
        }
    }
}

/// NAND operation latencies.
///
/// Only `t_prog` = 640 us comes from a measured device; the read, DMA and
/// erase defaults are representative 1x-nm MLC values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    pub t_read: Micros,
    pub t_prog: Micros,
    pub t_erase: Micros,
    /// Register to DRAM transfer of one page (ECC decode folded in).
    pub t_dma_out: Micros,
    /// DRAM to register transfer of one page (ECC encode folded in).
    pub t_dma_in: Micros,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self { t_read: 60, t_prog: 640, t_erase: 3500, t_dma_out: 40, t_dma_in: 40 }
    }
}

impl TimingParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("t_read", self.t_read),
            ("t_prog", self.t_prog),
            ("t_erase", self.t_erase),
            ("t_dma_out", self.t_dma_out),
            ("t_dma_in", self.t_dma_in),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ConfigError::Zero(name)),
            None => Ok(()),
        }
    }

    /// Contention-free off-chip copy: read, DMA out, DMA in, program.
    pub fn offchip_copy_latency(&self) -> Micros {
        self.t_read + self.t_dma_out + self.t_dma_in + self.t_prog
    }

    /// Contention-free copyback: the page never leaves the plane register.
    pub fn copyback_latency(&self) -> Micros {
        self.t_read + self.t_prog
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhysAddr {
    pub channel: u32,
    pub chip: u32,
    pub plane: u32,
    pub block: u32,
    pub page: u32,
}

impl PhysAddr {
    pub const fn new(channel: u32, chip: u32, plane: u32, block: u32, page: u32) -> Self {
        Self { channel, chip, plane, block, page }
    }

    fn same_plane(&self, other: &PhysAddr) -> bool {
        self.channel == other.channel && self.chip == other.chip && self.plane == other.plane
    }
}

/// Copyback moves data through the per-plane page register, so source and
/// destination must share channel, chip and plane.
pub fn copyback_compatible(g: &Geometry, src: PhysAddr, dst: PhysAddr) -> Result<bool, AddressError> {
    g.check(src)?;
    g.check(dst)?;
    Ok(src.same_plane(&dst))
}
