use thiserror::Error;

use crate::geometry::Micros;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("configuration field `{0}` must be nonzero")]
    Zero(&'static str),
    #[error("configuration field `{field}` is invalid: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("{0} overflows 64 bits")]
    Overflow(&'static str),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("{field} index {index} out of range (bound {bound})")]
    OutOfRange { field: &'static str, index: u64, bound: u64 },
    #[error("copyback from {src} to {dst} crosses a plane boundary")]
    NotCopybackCompatible { src: String, dst: String },
    #[error("logical page {lpn} beyond logical capacity of {capacity} pages")]
    Logical { lpn: u64, capacity: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("request {index} (lba {lba}, {length} bytes) exceeds logical capacity of {capacity} bytes")]
    OutOfBounds { index: usize, lba: u64, length: u64, capacity: u64 },
    #[error("trace I/O: {0}")]
    Io(String),
}

/// Faults that abort a simulation run.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Address(#[from] AddressError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("data loss at t={time}us: lpn {lpn} at ppn {ppn} is unreadable ({history})")]
    DataLoss { time: Micros, lpn: u64, ppn: u64, history: String },
    #[error("plane {plane}: no free block for {purpose} (capacity fault)")]
    Capacity { plane: u32, purpose: &'static str },
    #[error("integrity violation at t={time}us: lpn {lpn} returned tag {got}, expected {expected}")]
    Integrity { time: Micros, lpn: u64, got: u64, expected: u64 },
    #[error("mapping inconsistency: {0}")]
    Mapping(String),
    #[error("simulation stalled at t={time}us with {pending} host requests outstanding")]
    Stalled { time: Micros, pending: usize },
    #[error("report I/O: {0}")]
    Io(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}
