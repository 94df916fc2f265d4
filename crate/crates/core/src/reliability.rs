//! Copyback threshold table and the error-accumulation model behind it.
//!
//! Error levels are normalized so the ECC correction capacity is exactly 1.0.
//! A page written through ECC starts at `base_ber(pe, retention)`; every
//! copyback adds `delta_per_copyback(pe)` because the data bypasses ECC. The
//! default model is calibrated per P/E bucket so that at 12-month retention
//! the largest hop count that keeps a page correctable is 4, 3 and 2 for the
//! buckets ending at 1000, 2000 and 3000 cycles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// JEDEC client-class retention requirement at 30 C.
pub const DEFAULT_RETENTION_MONTHS: f64 = 12.0;

/// Thresholds never exceed what a 3-bit block counter can hold.
pub const MAX_THRESHOLD: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtBucket {
    pub pe_lo: u32,
    pub pe_hi: u32,
    pub threshold: u32,
}

/// Maximum number of consecutive copybacks per P/E bucket, for one retention
/// requirement. P/E counts past the last bucket forbid copyback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtTable {
    pub retention_months: f64,
    pub buckets: Vec<CtBucket>,
}

impl Default for CtTable {
    fn default() -> Self {
        Self {
            retention_months: DEFAULT_RETENTION_MONTHS,
            buckets: vec![
                CtBucket { pe_lo: 0, pe_hi: 1000, threshold: 4 },
                CtBucket { pe_lo: 1001, pe_hi: 2000, threshold: 3 },
                CtBucket { pe_lo: 2001, pe_hi: 3000, threshold: 2 },
            ],
        }
    }
}

impl CtTable {
    pub fn lookup(&self, pe: u32) -> u32 {
        self.buckets.iter().find(|b| pe >= b.pe_lo && pe <= b.pe_hi).map_or(0, |b| b.threshold)
    }

    pub fn max_threshold(&self) -> u32 {
        self.buckets.iter().map(|b| b.threshold).max().unwrap_or(0)
    }

    /// `pe_lo,pe_hi,threshold` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pe_lo,pe_hi,threshold\n");
        for b in &self.buckets {
            let _ = writeln!(out, "{},{},{}", b.pe_lo, b.pe_hi, b.threshold);
        }
        out
    }
}

/// Reliability of one page since its last ECC-corrected write.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PageReliabilityState {
    pub copyback_hops_since_ecc: u32,
    pub accumulated_error: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("page unreadable after {hops} copyback hops (error level {error:.3} > capacity {capacity})")]
pub struct UnreadablePage {
    pub hops: u32,
    pub error: f64,
    pub capacity: f64,
}

/// Piecewise-linear error model.
///
/// `base_ber(pe, t) = intercept + per_kilocycle * pe/1000
///                    + retention_per_year * (t/12) * (1 + pe/1000)`
///
/// `delta_per_copyback` is constant inside each P/E bucket and nondecreasing
/// across buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModel {
    /// Inclusive upper P/E bound of each bucket; the first bucket starts at 0.
    pub pe_bounds: Vec<u32>,
    /// One increment per bucket plus one for P/E beyond the last bound.
    pub deltas: Vec<f64>,
    pub base_intercept: f64,
    pub base_per_kilocycle: f64,
    pub retention_per_year: f64,
    pub ecc_capacity: f64,
    pub max_threshold: u32,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self {
            pe_bounds: vec![1000, 2000, 3000],
            deltas: vec![0.19, 0.22, 0.30, 0.45],
            base_intercept: 0.10,
            base_per_kilocycle: 0.05,
            retention_per_year: 0.02,
            ecc_capacity: 1.0,
            max_threshold: MAX_THRESHOLD,
        }
    }
}

impl ErrorModel {
    pub fn base_ber(&self, pe: u32, retention_months: f64) -> f64 {
        let kc = f64::from(pe) / 1000.0;
        self.base_intercept + self.base_per_kilocycle * kc + self.retention_per_year * (retention_months / 12.0) * (1.0 + kc)
    }

    pub fn delta_per_copyback(&self, pe: u32) -> f64 {
        let bucket = self.pe_bounds.iter().position(|&hi| pe <= hi).unwrap_or(self.pe_bounds.len());
        self.deltas.get(bucket).or(self.deltas.last()).copied().unwrap_or(0.0)
    }

    /// A page just written through ECC into a block with `pe` cycles.
    pub fn fresh(&self, pe: u32, retention_months: f64) -> PageReliabilityState {
        PageReliabilityState { copyback_hops_since_ecc: 0, accumulated_error: self.base_ber(pe, retention_months) }
    }

    /// State of a page that has been copybacked `hops` times within blocks
    /// of `pe` cycles.
    pub fn state_at(&self, pe: u32, retention_months: f64, hops: u32) -> PageReliabilityState {
        PageReliabilityState {
            copyback_hops_since_ecc: hops,
            accumulated_error: self.base_ber(pe, retention_months) + f64::from(hops) * self.delta_per_copyback(pe),
        }
    }

    pub fn apply_copyback(&self, s: PageReliabilityState, pe: u32) -> PageReliabilityState {
        PageReliabilityState {
            copyback_hops_since_ecc: s.copyback_hops_since_ecc + 1,
            accumulated_error: s.accumulated_error + self.delta_per_copyback(pe),
        }
    }

    /// Off-chip migration: ECC corrects the page, which is rewritten into a
    /// block with `dest_pe` cycles.
    pub fn apply_ecc_pass(
        &self,
        s: PageReliabilityState,
        dest_pe: u32,
        retention_months: f64,
    ) -> Result<PageReliabilityState, UnreadablePage> {
        if !self.is_readable(s) {
            return Err(UnreadablePage {
                hops: s.copyback_hops_since_ecc,
                error: s.accumulated_error,
                capacity: self.ecc_capacity,
            });
        }
        Ok(self.fresh(dest_pe, retention_months))
    }

    pub fn is_readable(&self, s: PageReliabilityState) -> bool {
        s.accumulated_error <= self.ecc_capacity
    }

    /// Largest hop count that stays within ECC capacity at `pe`.
    pub fn max_safe_hops(&self, pe: u32, retention_months: f64) -> u32 {
        let base = self.base_ber(pe, retention_months);
        let delta = self.delta_per_copyback(pe);
        if base > self.ecc_capacity {
            return 0;
        }
        if delta <= 0.0 {
            return self.max_threshold;
        }
        let fits = |n: u32| base + f64::from(n) * delta <= self.ecc_capacity;
        let mut n = ((self.ecc_capacity - base) / delta).floor().min(f64::from(self.max_threshold)) as u32;
        while n < self.max_threshold && fits(n + 1) {
            n += 1;
        }
        while n > 0 && !fits(n) {
            n -= 1;
        }
        n
    }

    /// Threshold table for one retention requirement. Each bucket is rated at
    /// its highest P/E count, where the model is least forgiving.
    pub fn derive_ct(&self, retention_months: f64) -> CtTable {
        let mut lo = 0;
        let buckets = self
            .pe_bounds
            .iter()
            .map(|&hi| {
                let b = CtBucket { pe_lo: lo, pe_hi: hi, threshold: self.max_safe_hops(hi, retention_months) };
                lo = hi + 1;
                b
            })
            .collect();
        CtTable { retention_months, buckets }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOUNDARIES: [u32; 6] = [1, 1000, 1001, 2000, 2001, 3000];

    /// Applies copybacks to a fresh page until it becomes unreadable.
    fn hops_until_unreadable(m: &ErrorModel, pe: u32) -> u32 {
        let mut s = m.fresh(pe, DEFAULT_RETENTION_MONTHS);
        let mut applications = 0;
        while m.is_readable(s) {
            s = m.apply_copyback(s, pe);
            applications += 1;
            assert!(applications < 100);
        }
        applications
    }

    #[test]
    fn lookup_examples() {
        let ct = CtTable::default();
        assert_eq!(ct.lookup(500), 4);
        assert_eq!(ct.lookup(2500), 2);
        assert_eq!(ct.lookup(3001), 0);
        assert_eq!(ct.lookup(0), 4);
        assert_eq!(ct.lookup(1001), 3);
    }

    #[test]
    fn default_model_reproduces_table() {
        let derived = ErrorModel::default().derive_ct(DEFAULT_RETENTION_MONTHS);
        assert_eq!(derived, CtTable::default());
    }

    #[test]
    fn brute_force_matches_lookup_at_boundaries() {
        let m = ErrorModel::default();
        let ct = CtTable::default();
        for pe in BOUNDARIES {
            assert_eq!(hops_until_unreadable(&m, pe), ct.lookup(pe) + 1, "pe={pe}");
        }
    }

    #[test]
    fn apply_copyback_examples() {
        let m = ErrorModel::default();
        let s = m.fresh(3000, DEFAULT_RETENTION_MONTHS);
        let one = m.apply_copyback(s, 3000);
        assert_eq!(one.copyback_hops_since_ecc, 1);
        let two = m.apply_copyback(one, 3000);
        assert!(m.is_readable(two));
        assert!(two.accumulated_error <= 1.0);
        let three = m.apply_copyback(two, 3000);
        assert!(three.accumulated_error > 1.0);
        assert!(!m.is_readable(three));
    }

    #[test]
    fn ecc_pass_resets_or_faults() {
        let m = ErrorModel::default();
        let s = m.state_at(500, 12.0, 3);
        let reset = m.apply_ecc_pass(s, 800, 12.0).unwrap();
        assert_eq!(reset.copyback_hops_since_ecc, 0);
        assert_eq!(reset.accumulated_error, m.base_ber(800, 12.0));
        let fresh = m.fresh(10, 12.0);
        assert_eq!(m.apply_ecc_pass(fresh, 10, 12.0).unwrap().copyback_hops_since_ecc, 0);
        let lost = m.state_at(3000, 12.0, 3);
        assert!(m.apply_ecc_pass(lost, 0, 12.0).is_err());
    }

    #[test]
    fn readability_examples() {
        let m = ErrorModel::default();
        assert!(m.is_readable(m.fresh(0, 12.0)));
        assert!(m.is_readable(m.state_at(3000, 12.0, 2)));
        assert!(!m.is_readable(m.state_at(3000, 12.0, 3)));
    }

    #[test]
    fn zero_delta_caps_threshold() {
        let m = ErrorModel { deltas: vec![0.0; 4], ..ErrorModel::default() };
        assert!(m.derive_ct(12.0).buckets.iter().all(|b| b.threshold == MAX_THRESHOLD));
    }

    #[test]
    fn longer_retention_never_raises_thresholds() {
        let m = ErrorModel::default();
        let months = [0.0, 1.0, 3.0, 6.0, 12.0, 24.0, 36.0, 60.0, 120.0];
        for pair in months.windows(2) {
            let (short, long) = (m.derive_ct(pair[0]), m.derive_ct(pair[1]));
            for (a, b) in short.buckets.iter().zip(&long.buckets) {
                assert!(b.threshold <= a.threshold);
            }
        }
        // The trend is visible: 3-year retention lowers at least one bucket.
        assert_ne!(m.derive_ct(36.0).buckets, m.derive_ct(12.0).buckets);
    }

    #[test]
    fn thresholds_nonincreasing_in_pe() {
        let ct = ErrorModel::default().derive_ct(12.0);
        assert!(ct.buckets.windows(2).all(|w| w[1].threshold <= w[0].threshold));
    }

    #[test]
    fn calibration_inequality_holds_everywhere_in_bucket() {
        let m = ErrorModel::default();
        let ct = CtTable::default();
        for pe in 0..=3000 {
            let n = f64::from(ct.lookup(pe));
            let (base, d) = (m.base_ber(pe, 12.0), m.delta_per_copyback(pe));
            assert!(base + n * d <= 1.0 && 1.0 < base + (n + 1.0) * d, "pe={pe}");
        }
    }

    #[test]
    fn csv_rendering() {
        assert_eq!(CtTable::default().to_csv(), "pe_lo,pe_hi,threshold\n0,1000,4\n1001,2000,3\n2001,3000,2\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ecc_after_allowed_hops_stays_readable(pe in 0u32..=3000, k in 0u32..8) {
                let m = ErrorModel::default();
                let ct = CtTable::default();
                prop_assume!(k <= ct.lookup(pe));
                let mut s = m.fresh(pe, 12.0);
                for _ in 0..k {
                    s = m.apply_copyback(s, pe);
                }
                prop_assert!(m.is_readable(s));
                let r = m.apply_ecc_pass(s, pe, 12.0).unwrap();
                prop_assert!(m.is_readable(r));
            }
        }
    }
}
