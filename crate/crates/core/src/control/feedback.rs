//! Weight recomputation from compute-node fill levels.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ControlError, MemberSpec};
use crate::pipeline::MemberId;

/// A compute node's report of how full its input queue is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub member: MemberId,
    /// 0.0 = idle, 1.0 = saturated.
    pub fill_level: f64,
    /// Monotonic time of the report, on the control plane's clock.
    #[serde(with = "millis")]
    pub timestamp: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackParams {
    /// Floor on the target weight; no schedulable member drops to zero.
    pub epsilon: f64,
    /// Smoothing factor: 1.0 ignores the prior weight entirely.
    pub alpha: f64,
    /// Reports older than this are ignored.
    #[serde(with = "millis")]
    pub staleness: Duration,
}

impl Default for FeedbackParams {
    fn default() -> Self {
        FeedbackParams {
            epsilon: 0.01,
            alpha: 0.5,
            staleness: Duration::from_secs(5),
        }
    }
}

impl FeedbackReport {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(0.0..=1.0).contains(&self.fill_level) {
            return Err(ControlError::InvalidFillLevel(self.fill_level));
        }
        Ok(())
    }
}

/// New weight per member:
/// `max(eps, alpha * max(eps, 1 - fill) + (1 - alpha) * prior)`.
///
/// Only the newest non-stale report per member counts; members without one
/// keep their prior weight. Output follows the order of `current`.
pub fn recompute_weights(
    reports: &[FeedbackReport],
    current: &[MemberSpec],
    params: &FeedbackParams,
    now: Duration,
) -> Result<Vec<(MemberId, f64)>, ControlError> {
    let known: BTreeMap<MemberId, f64> = current.iter().map(|m| (m.member, m.weight)).collect();
    let mut latest: BTreeMap<MemberId, &FeedbackReport> = BTreeMap::new();
    for r in reports {
        if !known.contains_key(&r.member) {
            return Err(ControlError::UnknownMember(r.member));
        }
        r.validate()?;
        if now.saturating_sub(r.timestamp) > params.staleness {
            continue;
        }
        let newer = latest
            .get(&r.member)
            .is_none_or(|prev| r.timestamp >= prev.timestamp);
        if newer {
            latest.insert(r.member, r);
        }
    }

    let eps = params.epsilon;
    let alpha = params.alpha.clamp(0.0, 1.0);
    Ok(current
        .iter()
        .map(|m| {
            let w = match latest.get(&m.member) {
                Some(r) => {
                    let target = (1.0 - r.fill_level).max(eps);
                    (alpha * target + (1.0 - alpha) * m.weight).max(eps)
                }
                None => m.weight,
            };
            (m.member, w)
        })
        .collect())
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}
