//! Table transforms for bringing an instance up, moving it to a new epoch,
//! and retiring old epochs.
//!
//! Every function here is pure: it takes the live snapshot and returns new
//! ones. Publishing them is the caller's job.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::prefixes::range_to_prefixes;
use super::{ControlError, MemberSpec};
use crate::pipeline::{
    Calendar, EpochId, EventRange, InstanceEpochs, InstanceId, MemberId, PipelineTables, Prefix,
};

/// Everything needed to activate one new epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub instance: InstanceId,
    pub epoch: EpochId,
    /// First event number served by the new calendar.
    pub boundary_event: u64,
    pub members: Vec<MemberSpec>,
    pub calendar: Calendar,
}

/// The four snapshots of an activation, in publication order.
///
/// Only the last changes how any event number maps.
#[derive(Debug, Clone)]
pub struct ActivationSteps {
    pub members_installed: PipelineTables,
    pub calendar_installed: PipelineTables,
    pub range_pinned: PipelineTables,
    pub wildcard_moved: PipelineTables,
}

impl ActivationSteps {
    pub fn in_order(&self) -> [&PipelineTables; 4] {
        [
            &self.members_installed,
            &self.calendar_installed,
            &self.range_pinned,
            &self.wildcard_moved,
        ]
    }

    pub fn into_final(self) -> PipelineTables {
        self.wildcard_moved
    }
}

fn check_members(
    live: &PipelineTables,
    instance: InstanceId,
    members: &[MemberSpec],
    calendar: &Calendar,
) -> Result<(), ControlError> {
    let mut seen = BTreeSet::new();
    for spec in members {
        if !seen.insert(spec.member) {
            return Err(ControlError::DuplicateMember(spec.member));
        }
        let rewrite = spec.to_rewrite();
        rewrite.validate()?;
        if let Some(existing) = live.member(instance, spec.member) {
            if *existing != rewrite {
                return Err(ControlError::RewriteConflict(spec.member));
            }
        }
    }
    for m in calendar.members() {
        if !seen.contains(&m) {
            return Err(ControlError::UnknownMember(m));
        }
    }
    Ok(())
}

/// Installs member rewrites, calendar and a wildcard assignment for the
/// first epoch of an instance.
pub fn initialize_instance(
    live: &PipelineTables,
    instance: InstanceId,
    epoch: EpochId,
    members: &[MemberSpec],
    calendar: Calendar,
) -> Result<PipelineTables, ControlError> {
    if live.instance(instance).is_some() {
        return Err(ControlError::AlreadyInitialized(instance));
    }
    if !calendar.is_complete() {
        return Err(ControlError::IncompleteCalendar(calendar.empty_slots()));
    }
    check_members(live, instance, members, &calendar)?;

    let mut next = live.clone();
    for spec in members {
        next.insert_member(instance, spec.to_rewrite());
    }
    next.insert_calendar(instance, epoch, calendar);
    next.set_instance(instance, Some(InstanceEpochs::new(epoch)));
    next.validate()?;
    Ok(next)
}

/// Builds the staged snapshots that move `plan.instance` onto `plan.epoch`
/// at `plan.boundary_event`.
///
/// Stages, each cloned from the previous: insert member rewrites; insert
/// the calendar; pin `[current start, boundary)` to the current epoch with
/// explicit prefixes; repoint the wildcard at the new epoch. Every event
/// number below the boundary keeps its mapping in all four snapshots.
pub fn activate_epoch_steps(
    plan: &EpochPlan,
    live: &PipelineTables,
) -> Result<ActivationSteps, ControlError> {
    let instance = plan.instance;
    let state = live
        .instance(instance)
        .ok_or(ControlError::NotInitialized(instance))?;
    if state.is_used(plan.epoch) || live.calendar(instance, plan.epoch).is_some() {
        return Err(ControlError::EpochReuse(plan.epoch));
    }
    if !plan.calendar.is_complete() {
        return Err(ControlError::IncompleteCalendar(plan.calendar.empty_slots()));
    }
    if plan.boundary_event <= state.current_start() {
        return Err(ControlError::BoundaryNotFuture {
            boundary: plan.boundary_event,
            current_start: state.current_start(),
        });
    }
    check_members(live, instance, &plan.members, &plan.calendar)?;

    let old_epoch = state.current();
    let old_start = state.current_start();
    let pins = range_to_prefixes(old_start, u128::from(plan.boundary_event))?;

    let mut members_installed = live.clone();
    for spec in &plan.members {
        members_installed.insert_member(instance, spec.to_rewrite());
    }
    members_installed.validate()?;

    let mut calendar_installed = members_installed.clone();
    calendar_installed.insert_calendar(instance, plan.epoch, plan.calendar.clone());

    let mut range_pinned = calendar_installed.clone();
    {
        let st = range_pinned.instance_mut(instance).expect("checked above");
        for p in &pins {
            st.assignment.insert(*p, old_epoch);
        }
        st.retired.insert(
            old_epoch,
            EventRange {
                start: old_start,
                end: plan.boundary_event,
            },
        );
    }

    let mut wildcard_moved = range_pinned.clone();
    {
        let st = wildcard_moved.instance_mut(instance).expect("checked above");
        st.assignment.insert(Prefix::WILDCARD, plan.epoch);
        st.current = plan.epoch;
        st.current_start = plan.boundary_event;
        st.used.insert(plan.epoch);
    }
    wildcard_moved.validate()?;

    Ok(ActivationSteps {
        members_installed,
        calendar_installed,
        range_pinned,
        wildcard_moved,
    })
}

/// Final snapshot of [`activate_epoch_steps`].
pub fn activate_epoch(plan: &EpochPlan, live: &PipelineTables) -> Result<PipelineTables, ControlError> {
    activate_epoch_steps(plan, live).map(ActivationSteps::into_final)
}

/// Removes a retired epoch: its pinned prefixes, its calendar, then any
/// member rewrite no remaining calendar of the instance references.
pub fn cleanup_epoch(
    instance: InstanceId,
    old_epoch: EpochId,
    live: &PipelineTables,
) -> Result<PipelineTables, ControlError> {
    let state = live
        .instance(instance)
        .ok_or(ControlError::NotInitialized(instance))?;
    if state.current() == old_epoch {
        return Err(ControlError::EpochStillCurrent(old_epoch));
    }
    if !state.retired().contains_key(&old_epoch) {
        return Err(ControlError::UnknownEpoch(old_epoch));
    }

    let mut next = live.clone();
    {
        let st = next.instance_mut(instance).expect("checked above");
        let stale: Vec<Prefix> = st
            .assignment
            .entries()
            .into_iter()
            .filter(|(_, e)| *e == old_epoch)
            .map(|(p, _)| p)
            .collect();
        for p in &stale {
            st.assignment.remove(p);
        }
        st.retired.remove(&old_epoch);
    }
    next.remove_calendar(instance, old_epoch);

    let referenced: BTreeSet<MemberId> = next
        .calendars(instance)
        .values()
        .flat_map(|c| c.members())
        .collect();
    let orphans: Vec<MemberId> = next
        .members(instance)
        .keys()
        .filter(|m| !referenced.contains(m))
        .copied()
        .collect();
    for m in orphans {
        next.remove_member(instance, m);
    }
    next.validate()?;
    Ok(next)
}
