use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::pipeline::{slot_of, CALENDAR_SLOTS};
use crate::protocol::DiscardReason;

const REASONS: usize = DiscardReason::ALL.len();

/// Monotonic packet counters, shareable between workers.
#[derive(Debug, Default)]
pub struct PipelineCounters {
    packets_in: AtomicU64,
    packets_out: AtomicU64,
    discards: [AtomicU64; REASONS],
}

impl PipelineCounters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts one processed packet.
    pub fn record<T>(&self, outcome: &Result<T, DiscardReason>) {
        self.packets_in.fetch_add(1, Ordering::Relaxed);
        match outcome {
            Ok(_) => {
                self.packets_out.fetch_add(1, Ordering::Relaxed);
            }
            Err(reason) => {
                self.discards[reason.index()].fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let mut discards = BTreeMap::new();
        for reason in DiscardReason::ALL {
            discards.insert(reason, self.discards[reason.index()].load(Ordering::Relaxed));
        }
        CounterSnapshot {
            packets_in: self.packets_in.load(Ordering::Relaxed),
            packets_out: self.packets_out.load(Ordering::Relaxed),
            discards,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub packets_in: u64,
    pub packets_out: u64,
    pub discards: BTreeMap<DiscardReason, u64>,
}

impl CounterSnapshot {
    pub fn discarded(&self, reason: DiscardReason) -> u64 {
        self.discards.get(&reason).copied().unwrap_or(0)
    }

    pub fn total_discards(&self) -> u64 {
        self.discards.values().sum()
    }

    /// `packets_in == packets_out + Σ discards`.
    pub fn is_conserved(&self) -> bool {
        self.packets_in == self.packets_out + self.total_discards()
    }

    pub fn merge(&mut self, other: &CounterSnapshot) {
        self.packets_in += other.packets_in;
        self.packets_out += other.packets_out;
        for (r, n) in &other.discards {
            *self.discards.entry(*r).or_default() += n;
        }
    }
}

/// Forwarded packets per calendar slot.
///
/// Weighted balancing assumes the low 9 bits of event numbers are uniform.
/// This histogram lets an operator check that. It counts packets, not
/// events, so events of very different sizes widen the spread; no threshold
/// is applied here.
#[derive(Debug)]
pub struct SlotUsage {
    slots: Box<[AtomicU64]>,
}

impl Default for SlotUsage {
    fn default() -> Self {
        SlotUsage {
            slots: (0..CALENDAR_SLOTS).map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl SlotUsage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, event_number: u64) {
        self.slots[slot_of(event_number)].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> SlotUsageReport {
        SlotUsageReport::from_counts(self.slots.iter().map(|c| c.load(Ordering::Relaxed)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotUsageReport {
    pub total: u64,
    pub used_slots: usize,
    /// Busiest slot relative to the mean; 1.0 is perfectly even.
    pub max_over_mean: f64,
    /// Pearson statistic against a uniform spread, 511 degrees of freedom.
    pub chi_square: f64,
    pub counts: Vec<u64>,
}

impl SlotUsageReport {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let mean = total as f64 / counts.len() as f64;
        let (max_over_mean, chi_square) = if total == 0 {
            (0.0, 0.0)
        } else {
            let max = counts.iter().copied().max().unwrap_or(0) as f64;
            let chi = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
            (max / mean, chi)
        };
        SlotUsageReport {
            total,
            used_slots: counts.iter().filter(|&&c| c > 0).count(),
            max_over_mean,
            chi_square,
            counts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_usage_flags_skew() {
        let even = SlotUsage::new();
        for ev in 0..4 * 512 {
            even.record(ev);
        }
        let r = even.snapshot();
        assert_eq!((r.total, r.used_slots, r.max_over_mean, r.chi_square), (2048, 512, 1.0, 0.0));

        let skewed = SlotUsage::new();
        for ev in (0..4 * 512).map(|e| e * 2) {
            skewed.record(ev);
        }
        let r = skewed.snapshot();
        assert_eq!(r.used_slots, 256);
        assert_eq!(r.max_over_mean, 2.0);
        // 256 slots at 2m and 256 at 0: each contributes m.
        assert_eq!(r.chi_square, 2048.0);
    }

    #[test]
    fn conservation_holds() {
        let c = PipelineCounters::new();
        c.record::<()>(&Ok(()));
        c.record::<()>(&Ok(()));
        c.record::<()>(&Err(DiscardReason::BadMagic));
        let s = c.snapshot();
        assert_eq!(s.packets_in, 3);
        assert_eq!(s.packets_out, 2);
        assert_eq!(s.discarded(DiscardReason::BadMagic), 1);
        assert_eq!(s.discarded(DiscardReason::NoEpoch), 0);
        assert!(s.is_conserved());

        let mut merged = s.clone();
        merged.merge(&s);
        assert_eq!(merged.packets_in, 6);
        assert_eq!(merged.discarded(DiscardReason::BadMagic), 2);
    }

    #[test]
    fn json_uses_reason_names() {
        let c = PipelineCounters::new();
        c.record::<()>(&Err(DiscardReason::L3Reject));
        let json = serde_json::to_value(c.snapshot()).unwrap();
        assert_eq!(json["discards"]["L3Reject"], 1);
    }
}
