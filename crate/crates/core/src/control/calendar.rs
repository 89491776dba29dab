//! Weighted calendar construction.

use std::collections::HashSet;

use super::ControlError;
use crate::pipeline::{Calendar, MemberId, CALENDAR_SLOTS};

/// Slot counts by largest-remainder apportionment of 512 slots, with every
/// member guaranteed at least one slot. Ties go to the earlier member.
pub fn apportion(members: &[(MemberId, f64)]) -> Result<Vec<usize>, ControlError> {
    if members.is_empty() {
        return Err(ControlError::EmptyMemberSet);
    }
    if members.len() > CALENDAR_SLOTS {
        return Err(ControlError::TooManyMembers(members.len()));
    }
    let mut seen = HashSet::new();
    for (m, w) in members {
        if !w.is_finite() || *w <= 0.0 {
            return Err(ControlError::InvalidWeight {
                member: *m,
                weight: *w,
            });
        }
        if !seen.insert(*m) {
            return Err(ControlError::DuplicateMember(*m));
        }
    }

    let total: f64 = members.iter().map(|(_, w)| w).sum();
    let quotas: Vec<f64> = members
        .iter()
        .map(|(_, w)| CALENDAR_SLOTS as f64 * w / total)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();

    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(CALENDAR_SLOTS.saturating_sub(assigned)) {
        counts[i] += 1;
    }

    // Floor of one slot: take from whoever sits furthest above its quota.
    while let Some(starved) = counts.iter().position(|c| *c == 0) {
        let donor = (0..counts.len())
            .filter(|&i| counts[i] > 1)
            .max_by(|&a, &b| {
                let sa = counts[a] as f64 - quotas[a];
                let sb = counts[b] as f64 - quotas[b];
                sa.total_cmp(&sb).then(b.cmp(&a))
            })
            .expect("at most 512 members, so some member holds two slots");
        counts[donor] -= 1;
        counts[starved] = 1;
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), CALENDAR_SLOTS);
    Ok(counts)
}

/// Builds a complete calendar whose per-member slot counts follow
/// [`apportion`], spreading each member's slots evenly through the calendar
/// (smooth weighted round-robin) rather than in contiguous runs.
pub fn build_calendar(members: &[(MemberId, f64)]) -> Result<Calendar, ControlError> {
    let counts = apportion(members)?;
    let mut credit = vec![0i64; counts.len()];
    let mut cal = Calendar::empty();
    for slot in 0..CALENDAR_SLOTS {
        for (c, n) in credit.iter_mut().zip(&counts) {
            *c += *n as i64;
        }
        // max_by_key returns the last maximum; reverse so the first wins
        let pick = (0..counts.len())
            .rev()
            .max_by_key(|&i| credit[i])
            .expect("nonempty");
        credit[pick] -= CALENDAR_SLOTS as i64;
        cal.set(slot, Some(members[pick].0));
    }
    Ok(cal)
}
