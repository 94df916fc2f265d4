//! Discrete-event simulation of a NAND flash SSD with restricted copyback.

pub mod config;
pub mod dmms;
pub mod engine;
pub mod epm;
pub mod error;
pub mod ftl;
pub mod geometry;
pub mod metrics;
pub mod reliability;
pub mod workload;
