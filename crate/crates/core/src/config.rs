//! Run configuration, loaded from TOML. Every field has a default, so an
//! empty file is a valid configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dmms::ModeConfig;
use crate::error::ConfigError;
use crate::geometry::{Geometry, Micros, TimingParams};
use crate::reliability::{CtTable, ErrorModel, DEFAULT_RETENTION_MONTHS, MAX_THRESHOLD};
use crate::workload::{SyntheticProfile, WorkloadMix};

/// FTL flavour under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// Page-mapping FTL that always migrates off-chip.
    Baseline,
    /// rcopyback-aware FTL with the mode selector.
    Rcftl(u32),
    /// rcopyback-aware FTL that uses rcopyback whenever allowed.
    RcftlGreedy(u32),
}

impl Variant {
    pub fn max_threshold(self) -> u32 {
        match self {
            Variant::Baseline => 0,
            Variant::Rcftl(m) | Variant::RcftlGreedy(m) => m,
        }
    }

    pub fn is_baseline(self) -> bool {
        self == Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => write!(f, "baseline"),
            Variant::Rcftl(m) => write!(f, "rcftl{m}"),
            Variant::RcftlGreedy(m) => write!(f, "rcftl{m}-greedy"),
        }
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    /// `baseline`, `rcftlN`, or `rcftlN-greedy` (also `rcftlN--`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Invalid {
            field: "variant",
            reason: format!("`{s}` is not baseline, rcftlN or rcftlN-greedy"),
        };
        let lower = s.trim().to_ascii_lowercase();
        if lower == "baseline" {
            return Ok(Variant::Baseline);
        }
        let rest = lower.strip_prefix("rcftl").ok_or_else(bad)?;
        let (digits, greedy) = match rest.strip_suffix("-greedy").or_else(|| rest.strip_suffix("--")) {
            Some(d) => (d, true),
            None => (rest, false),
        };
        let m: u32 = digits.parse().map_err(|_| bad())?;
        if m == 0 || m > MAX_THRESHOLD {
            return Err(ConfigError::Invalid {
                field: "variant",
                reason: format!("copyback threshold {m} outside 1..={MAX_THRESHOLD} (3-bit counter)"),
            });
        }
        Ok(if greedy { Variant::RcftlGreedy(m) } else { Variant::Rcftl(m) })
    }
}

impl TryFrom<String> for Variant {
    type Error = ConfigError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub dram_ports: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { dram_ports: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtlConfig {
    /// Logical capacity as a fraction of physical capacity.
    pub logical_ratio: f64,
    pub write_buffer_bytes: u64,
    /// Host page programs allowed in flight per plane.
    pub host_inflight_per_plane: u32,
    /// Free blocks per plane that host writes may not take.
    pub host_reserve: u32,
    /// Map the whole logical space before the workload starts (no NAND time).
    pub precondition: bool,
    /// Initial P/E cycles of each block, uniform in `[min, max]`.
    pub initial_pe_min: u32,
    pub initial_pe_max: u32,
}

impl Default for FtlConfig {
    fn default() -> Self {
        Self {
            logical_ratio: 0.875,
            write_buffer_bytes: 10 << 20,
            host_inflight_per_plane: 1,
            host_reserve: 2,
            precondition: true,
            initial_pe_min: 0,
            initial_pe_max: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcConfig {
    /// Foreground GC starts when a plane has fewer free blocks than this.
    pub fg_watermark: u32,
    /// Background GC tops planes up to this many free blocks while idle.
    pub bg_watermark: u32,
    pub bg_idle_threshold_us: Micros,
}

impl Default for GcConfig {
    fn default() -> Self {
        Self { fg_watermark: 4, bg_watermark: 8, bg_idle_threshold_us: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WearLevelingConfig {
    pub enabled: bool,
    /// Act when max(pe) - min(pe) in a plane exceeds this.
    pub pe_gap: u32,
    /// Check a plane every this many erases in it.
    pub check_interval: u32,
}

impl Default for WearLevelingConfig {
    fn default() -> Self {
        Self { enabled: true, pe_gap: 256, check_interval: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReliabilityConfig {
    pub retention_months: f64,
    /// Derive the threshold table from the error model instead of using the
    /// built-in table. Always done for retention other than 12 months.
    pub derive_table: bool,
    pub error_model: ErrorModel,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self { retention_months: DEFAULT_RETENTION_MONTHS, derive_table: false, error_model: ErrorModel::default() }
    }
}

impl ReliabilityConfig {
    pub fn ct_table(&self) -> CtTable {
        if self.derive_table || self.retention_months != DEFAULT_RETENTION_MONTHS {
            self.error_model.derive_ct(self.retention_months)
        } else {
            CtTable::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Synthetic,
    AppendRandom,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub kind: WorkloadKind,
    pub requests: usize,
    /// `high`, `mid`, `low`, `saturate` or `custom`; custom uses `profile`.
    pub profile_name: String,
    pub profile: SyntheticProfile,
    /// `oltp`, `ntrx`, `fileserver`, `varmail` or `write-only`.
    pub mix: String,
    pub overwrite_ratio: f64,
    pub trace: Option<PathBuf>,
    /// Outstanding requests for generated workloads. Inter-arrival gaps
    /// become think time after a completion. 0 replays timestamps as-is;
    /// traces are always replayed by timestamp.
    pub queue_depth: u32,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::Synthetic,
            requests: 100_000,
            profile_name: "high".into(),
            profile: SyntheticProfile::default(),
            mix: "ntrx".into(),
            overwrite_ratio: 0.5,
            trace: None,
            queue_depth: 1,
        }
    }
}

impl WorkloadConfig {
    /// Closed-loop depth, or `None` for timestamp replay.
    pub fn closed_loop_depth(&self) -> Option<u32> {
        match self.kind {
            WorkloadKind::Trace => None,
            _ if self.queue_depth == 0 => None,
            _ => Some(self.queue_depth),
        }
    }

    /// The named profile with the custom profile's shape parameters.
    pub fn resolved_profile(&self, seed: u64) -> Result<SyntheticProfile, ConfigError> {
        let mut p = if self.profile_name == "custom" {
            self.profile.clone()
        } else {
            let named = SyntheticProfile::named(&self.profile_name).ok_or_else(|| ConfigError::Invalid {
                field: "workload.profile_name",
                reason: format!("unknown profile `{}`", self.profile_name),
            })?;
            SyntheticProfile { name: named.name, burst_fraction: named.burst_fraction, ..self.profile.clone() }
        };
        p.seed = seed;
        Ok(p)
    }

    pub fn resolved_mix(&self) -> Result<WorkloadMix, ConfigError> {
        WorkloadMix::named(&self.mix).ok_or_else(|| ConfigError::Invalid {
            field: "workload.mix",
            reason: format!("unknown mix `{}`", self.mix),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub event_log: bool,
    pub decision_log: bool,
    /// Sim-time interval between state snapshots; 0 disables them.
    pub snapshot_interval_us: Micros,
    /// Leading fraction of requests excluded from steady-state metrics.
    pub warmup_fraction: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            event_log: false,
            decision_log: true,
            snapshot_interval_us: 100_000,
            warmup_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Track per-page copyback hops and check them against the table.
    pub shadow_oracle: bool,
    /// Compare every read with the last written content tag.
    pub integrity: bool,
    /// Full mapping consistency check every N erases; 0 disables.
    pub mapping_check_interval: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { shadow_oracle: true, integrity: true, mapping_check_interval: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub geometry: Geometry,
    pub timing: TimingParams,
    pub engine: EngineConfig,
    pub ftl: FtlConfig,
    pub gc: GcConfig,
    pub wear_leveling: WearLevelingConfig,
    pub reliability: ReliabilityConfig,
    pub dmms: ModeConfig,
    pub workload: WorkloadConfig,
    pub output: OutputConfig,
    pub audit: AuditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            variant: Variant::Rcftl(4),
            geometry: Geometry::default(),
            timing: TimingParams::default(),
            engine: EngineConfig::default(),
            ftl: FtlConfig::default(),
            gc: GcConfig::default(),
            wear_leveling: WearLevelingConfig::default(),
            reliability: ReliabilityConfig::default(),
            dmms: ModeConfig::default(),
            workload: WorkloadConfig::default(),
            output: OutputConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn logical_pages(&self) -> u64 {
        (self.geometry.total_pages() as f64 * self.ftl.logical_ratio).floor() as u64
    }

    pub fn logical_bytes(&self) -> u64 {
        self.logical_pages() * self.geometry.page_size
    }

    pub fn buffer_pages(&self) -> u64 {
        self.ftl.write_buffer_bytes / self.geometry.page_size
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.geometry.validate()?;
        self.timing.validate()?;
        self.dmms.validate()?;
        let invalid = |field, reason: String| Err(ConfigError::Invalid { field, reason });
        if self.engine.dram_ports == 0 {
            return Err(ConfigError::Zero("engine.dram_ports"));
        }
        if !(self.ftl.logical_ratio > 0.0 && self.ftl.logical_ratio < 1.0) {
            return invalid("ftl.logical_ratio", format!("{} not in (0, 1)", self.ftl.logical_ratio));
        }
        if self.buffer_pages() == 0 {
            return invalid("ftl.write_buffer_bytes", "smaller than one page".into());
        }
        if self.ftl.host_inflight_per_plane == 0 {
            return Err(ConfigError::Zero("ftl.host_inflight_per_plane"));
        }
        if self.ftl.initial_pe_min > self.ftl.initial_pe_max {
            return invalid("ftl.initial_pe_min", "greater than initial_pe_max".into());
        }
        if self.gc.fg_watermark == 0 {
            return Err(ConfigError::Zero("gc.fg_watermark"));
        }
        if self.gc.fg_watermark <= self.ftl.host_reserve {
            return invalid("gc.fg_watermark", format!("must exceed ftl.host_reserve ({})", self.ftl.host_reserve));
        }
        if self.wear_leveling.enabled && self.wear_leveling.check_interval == 0 {
            return Err(ConfigError::Zero("wear_leveling.check_interval"));
        }
        if !(self.output.warmup_fraction >= 0.0 && self.output.warmup_fraction < 1.0) {
            return invalid("output.warmup_fraction", format!("{} not in [0, 1)", self.output.warmup_fraction));
        }
        if self.reliability.retention_months.is_nan() || self.reliability.retention_months < 0.0 {
            return invalid("reliability.retention_months", "negative".into());
        }
        // Blocks a plane needs beyond its share of logical data: one host
        // block, M+1 migration blocks and the GC reserve.
        let g = &self.geometry;
        let m = self.variant.max_threshold();
        let overhead = u64::from(m + 2 + self.gc.fg_watermark);
        let usable = (u64::from(g.blocks_per_plane).saturating_sub(overhead)) * u64::from(g.pages_per_block);
        let needed = self.logical_pages().div_ceil(u64::from(g.planes()));
        if needed >= usable {
            return invalid(
                "geometry.blocks_per_plane",
                format!(
                    "{} blocks per plane leave no over-provisioning for {} logical pages per plane plus {} reserved blocks",
                    g.blocks_per_plane, needed, overhead
                ),
            );
        }
        if !matches!(m, 0 | 2..=4) {
            log::warn!("variant {} is outside the rcftl2..rcftl4 range; treating it as an extension", self.variant);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for name in ["baseline", "rcftl2", "rcftl3", "rcftl4", "rcftl2-greedy"] {
            let v: Variant = name.parse().unwrap();
            assert_eq!(v.to_string(), name);
        }
        assert_eq!("rcftl2--".parse::<Variant>().unwrap(), Variant::RcftlGreedy(2));
        assert!("rcftl8".parse::<Variant>().is_err());
        assert!("rcftl".parse::<Variant>().is_err());
        assert!("ftl".parse::<Variant>().is_err());
    }

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig { variant: Variant::RcftlGreedy(3), seed: 42, ..RunConfig::default() };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
            variant = "baseline"
            [geometry]
            blocks_per_plane = 256
            [gc]
            fg_watermark = 5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::Baseline);
        assert_eq!(cfg.geometry.blocks_per_plane, 256);
        assert_eq!(cfg.gc.fg_watermark, 5);
        assert_eq!(cfg.gc.bg_idle_threshold_us, 1000);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(matches!(RunConfig::from_toml("[gc]\nfoo = 1\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = RunConfig { gc: GcConfig { fg_watermark: 2, ..GcConfig::default() }, ..RunConfig::default() };
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { field: "gc.fg_watermark", .. })));
        let cfg = RunConfig { ftl: FtlConfig { logical_ratio: 0.995, ..FtlConfig::default() }, ..RunConfig::default() };
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { field: "geometry.blocks_per_plane", .. })));
    }

    #[test]
    fn default_derived_sizes() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.buffer_pages(), 640);
        assert_eq!(cfg.logical_pages(), 4 * 1024 * 1024 * 7 / 8);
        assert_eq!(cfg.reliability.ct_table(), CtTable::default());
    }
}
