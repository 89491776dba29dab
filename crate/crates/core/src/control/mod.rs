//! Control plane: the single writer of pipeline tables.
//!
//! All mutations run through [`ControlPlane`], which derives each new
//! snapshot from the live one and publishes it atomically. Reachable
//! calendars and member rewrites are never edited in place; changes take
//! effect by activating a new epoch at a future event number.

mod calendar;
mod epoch;
mod feedback;
mod prefixes;

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, Ipv6Addr};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calendar::{apportion, build_calendar};
pub use epoch::{
    activate_epoch, activate_epoch_steps, cleanup_epoch, initialize_instance, ActivationSteps,
    EpochPlan,
};
pub use feedback::{recompute_weights, FeedbackParams, FeedbackReport};
pub use prefixes::{range_to_prefixes, EVENT_SPACE_END};

use crate::pipeline::{
    Calendar, EpochId, InstanceId, IntegrityError, LbIdentity, MacAddr, MemberId,
    MemberRewrite, PipelineMode, PipelineTables, RewriteError, SnapshotCell,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("member set is empty")]
    EmptyMemberSet,
    #[error("{0} members exceed the 512 calendar slots")]
    TooManyMembers(usize),
    #[error("member {member} has invalid weight {weight}")]
    InvalidWeight { member: MemberId, weight: f64 },
    #[error("member {0} listed twice")]
    DuplicateMember(MemberId),
    #[error("empty event range [{start}, {end})")]
    EmptyRange { start: u64, end: u128 },
    #[error("{0} has already been used on this instance")]
    EpochReuse(EpochId),
    #[error("calendar has {0} empty slots")]
    IncompleteCalendar(usize),
    #[error("boundary {boundary} is not after the current epoch start {current_start}")]
    BoundaryNotFuture { boundary: u64, current_start: u64 },
    #[error("{0} is the current epoch")]
    EpochStillCurrent(EpochId),
    #[error("{0} is not a retired epoch of this instance")]
    UnknownEpoch(EpochId),
    #[error("unknown member {0}")]
    UnknownMember(MemberId),
    #[error("member {0} is referenced by a reachable calendar with a different rewrite")]
    RewriteConflict(MemberId),
    #[error("{0} has not been initialized")]
    NotInitialized(InstanceId),
    #[error("{0} is already initialized")]
    AlreadyInitialized(InstanceId),
    #[error("{epoch} still quiescing for {remaining:?}")]
    QuiesceNotElapsed { epoch: EpochId, remaining: Duration },
    #[error("fill level {0} outside [0, 1]")]
    InvalidFillLevel(f64),
    #[error(transparent)]
    InvalidMember(#[from] RewriteError),
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
}

impl ControlError {
    /// Stable identifier for API responses.
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::EmptyMemberSet => "EmptyMemberSet",
            ControlError::TooManyMembers(_) => "TooManyMembers",
            ControlError::InvalidWeight { .. } => "InvalidWeight",
            ControlError::DuplicateMember(_) => "DuplicateMember",
            ControlError::EmptyRange { .. } => "EmptyRange",
            ControlError::EpochReuse(_) => "EpochReuse",
            ControlError::IncompleteCalendar(_) => "IncompleteCalendar",
            ControlError::BoundaryNotFuture { .. } => "BoundaryNotFuture",
            ControlError::EpochStillCurrent(_) => "EpochStillCurrent",
            ControlError::UnknownEpoch(_) => "UnknownEpoch",
            ControlError::UnknownMember(_) => "UnknownMember",
            ControlError::RewriteConflict(_) => "RewriteConflict",
            ControlError::NotInitialized(_) => "NotInitialized",
            ControlError::AlreadyInitialized(_) => "AlreadyInitialized",
            ControlError::QuiesceNotElapsed { .. } => "QuiesceNotElapsed",
            ControlError::InvalidFillLevel(_) => "InvalidFillLevel",
            ControlError::InvalidMember(_) => "InvalidMember",
            ControlError::Integrity(_) => "Integrity",
        }
    }
}

/// A compute node as the operator describes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub member: MemberId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipv4: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipv6: Option<Ipv6Addr>,
    #[serde(default)]
    pub next_hop_mac: MacAddr,
    pub udp_base_port: u16,
    #[serde(default)]
    pub entropy_bits: u8,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl MemberSpec {
    pub fn ipv4(member: MemberId, ip: Ipv4Addr, udp_base_port: u16) -> Self {
        MemberSpec {
            member,
            ipv4: Some(ip),
            ipv6: None,
            next_hop_mac: MacAddr::default(),
            udp_base_port,
            entropy_bits: 0,
            weight: 1.0,
        }
    }

    pub fn to_rewrite(&self) -> MemberRewrite {
        MemberRewrite {
            member: self.member,
            next_hop_mac: self.next_hop_mac,
            ipv4: self.ipv4,
            ipv6: self.ipv6,
            udp_base_port: self.udp_base_port,
            entropy_bits: self.entropy_bits,
        }
    }

    fn weighted(members: &[MemberSpec]) -> Vec<(MemberId, f64)> {
        members.iter().map(|m| (m.member, m.weight)).collect()
    }
}

/// What an activation did, for logs and API responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub instance: InstanceId,
    pub previous_epoch: EpochId,
    pub epoch: EpochId,
    pub boundary_event: u64,
    pub pinned_prefixes: usize,
    pub slot_counts: BTreeMap<MemberId, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Retirement {
    at: Duration,
}

/// Single-writer owner of the pipeline configuration.
///
/// Time is passed in explicitly as a monotonic offset so the same code runs
/// against wall-clock time in the daemon and simulated time in scenarios.
#[derive(Debug)]
pub struct ControlPlane {
    tables: Arc<PipelineTables>,
    cell: Option<Arc<SnapshotCell>>,
    specs: BTreeMap<(InstanceId, MemberId), MemberSpec>,
    feedback: BTreeMap<(InstanceId, MemberId), FeedbackReport>,
    retired: BTreeMap<(InstanceId, EpochId), Retirement>,
    pub feedback_params: FeedbackParams,
    pub quiesce: Duration,
    publications: u64,
}

impl ControlPlane {
    pub fn new(mode: PipelineMode) -> Self {
        Self::from_tables(PipelineTables::new(mode))
    }

    pub fn from_tables(tables: PipelineTables) -> Self {
        ControlPlane {
            tables: Arc::new(tables),
            cell: None,
            specs: BTreeMap::new(),
            feedback: BTreeMap::new(),
            retired: BTreeMap::new(),
            feedback_params: FeedbackParams::default(),
            quiesce: Duration::from_secs(1),
            publications: 0,
        }
    }

    /// Rebuilds a control plane from persisted tables. Member weights are
    /// recovered from the current calendars' slot counts.
    pub fn restore(tables: PipelineTables) -> Result<Self, ControlError> {
        tables.validate()?;
        let mut cp = Self::from_tables(tables);
        for instance in cp.tables.configured_instances().collect::<Vec<_>>() {
            let state = cp.tables.instance(instance).expect("configured");
            let Some(cal) = cp.tables.calendar(instance, state.current()) else {
                continue;
            };
            for (id, rewrite) in cp.tables.members(instance) {
                let weight = cal.count(id) as f64;
                if weight > 0.0 {
                    cp.specs.insert(
                        (instance, id),
                        MemberSpec {
                            member: id,
                            ipv4: rewrite.ipv4,
                            ipv6: rewrite.ipv6,
                            next_hop_mac: rewrite.next_hop_mac,
                            udp_base_port: rewrite.udp_base_port,
                            entropy_bits: rewrite.entropy_bits,
                            weight,
                        },
                    );
                }
            }
        }
        Ok(cp)
    }

    /// Publishes every future snapshot into `cell` as well.
    pub fn attach(&mut self, cell: Arc<SnapshotCell>) {
        cell.publish(self.tables.clone());
        self.cell = Some(cell);
    }

    pub fn tables(&self) -> &Arc<PipelineTables> {
        &self.tables
    }

    /// Number of snapshots published so far.
    pub fn publications(&self) -> u64 {
        self.publications
    }

    fn publish(&mut self, tables: PipelineTables) {
        let tables = Arc::new(tables);
        if let Some(cell) = &self.cell {
            cell.publish(tables.clone());
        }
        self.tables = tables;
        self.publications += 1;
    }

    pub fn set_mode(&mut self, mode: PipelineMode) {
        let mut next = PipelineTables::clone(&self.tables);
        next.mode = mode;
        self.publish(next);
    }

    pub fn set_service_port(&mut self, port: u16) {
        let mut next = PipelineTables::clone(&self.tables);
        next.service_port = port;
        self.publish(next);
    }

    pub fn install_identity(&mut self, instance: InstanceId, id: &LbIdentity) {
        let mut next = PipelineTables::clone(&self.tables);
        next.install_identity(instance, id);
        self.publish(next);
    }

    pub fn install_l3(
        &mut self,
        dst: std::net::IpAddr,
        entry: crate::pipeline::L3Entry,
    ) {
        let mut next = PipelineTables::clone(&self.tables);
        next.install_l3(None, dst, entry);
        self.publish(next);
    }

    /// Brings an instance up with one epoch mapping every event number to a
    /// calendar built from the member weights.
    pub fn initialize_instance(
        &mut self,
        instance: InstanceId,
        members: &[MemberSpec],
    ) -> Result<EpochId, ControlError> {
        let calendar = build_calendar(&MemberSpec::weighted(members))?;
        let epoch = EpochId(1);
        let next = initialize_instance(&self.tables, instance, epoch, members, calendar)?;
        for m in members {
            self.specs.insert((instance, m.member), m.clone());
        }
        self.publish(next);
        Ok(epoch)
    }

    /// Next free epoch ID for an instance.
    pub fn next_epoch_id(&self, instance: InstanceId) -> Result<EpochId, ControlError> {
        let state = self
            .tables
            .instance(instance)
            .ok_or(ControlError::NotInitialized(instance))?;
        Ok(EpochId(state.highest_used().0 + 1))
    }

    /// Plan with a fresh epoch ID and a calendar built from the weights.
    pub fn plan_epoch(
        &self,
        instance: InstanceId,
        boundary_event: u64,
        members: Vec<MemberSpec>,
    ) -> Result<EpochPlan, ControlError> {
        let calendar = build_calendar(&MemberSpec::weighted(&members))?;
        Ok(EpochPlan {
            instance,
            epoch: self.next_epoch_id(instance)?,
            boundary_event,
            members,
            calendar,
        })
    }

    /// Runs an activation and publishes each stage in order.
    pub fn activate(&mut self, plan: &EpochPlan, now: Duration) -> Result<ActivationSummary, ControlError> {
        self.activate_with(plan, now, |_, _| {})
    }

    /// As [`ControlPlane::activate`], calling `between` after each stage is
    /// published. Scenario runs use it to interleave traffic with the
    /// staged publication.
    pub fn activate_with<F>(
        &mut self,
        plan: &EpochPlan,
        now: Duration,
        mut between: F,
    ) -> Result<ActivationSummary, ControlError>
    where
        F: FnMut(usize, &Arc<PipelineTables>),
    {
        let previous = self
            .tables
            .instance(plan.instance)
            .ok_or(ControlError::NotInitialized(plan.instance))?
            .current();
        let before = self.tables.footprint().prefixes;
        let steps = activate_epoch_steps(plan, &self.tables)?;
        let ActivationSteps {
            members_installed,
            calendar_installed,
            range_pinned,
            wildcard_moved,
        } = steps;
        for (i, snap) in [members_installed, calendar_installed, range_pinned, wildcard_moved]
            .into_iter()
            .enumerate()
        {
            self.publish(snap);
            between(i, &self.tables);
        }
        for m in &plan.members {
            self.specs.insert((plan.instance, m.member), m.clone());
        }
        self.specs.retain(|(i, id), _| {
            *i != plan.instance || plan.calendar.count(*id) > 0
        });
        self.retired.insert((plan.instance, previous), Retirement { at: now });
        Ok(ActivationSummary {
            instance: plan.instance,
            previous_epoch: previous,
            epoch: plan.epoch,
            boundary_event: plan.boundary_event,
            pinned_prefixes: self.tables.footprint().prefixes - before,
            slot_counts: plan
                .calendar
                .members()
                .into_iter()
                .map(|m| (m, plan.calendar.count(m)))
                .collect(),
        })
    }

    /// Retires an epoch once the quiesce delay has passed since it stopped
    /// receiving new events.
    pub fn cleanup(&mut self, instance: InstanceId, epoch: EpochId, now: Duration) -> Result<(), ControlError> {
        if let Some(r) = self.retired.get(&(instance, epoch)) {
            let ready = r.at + self.quiesce;
            if now < ready {
                return Err(ControlError::QuiesceNotElapsed {
                    epoch,
                    remaining: ready - now,
                });
            }
        }
        let next = cleanup_epoch(instance, epoch, &self.tables)?;
        self.retired.remove(&(instance, epoch));
        self.publish(next);
        Ok(())
    }

    /// Retired epochs whose quiesce delay has elapsed.
    pub fn cleanup_due(&self, now: Duration) -> Vec<(InstanceId, EpochId)> {
        self.retired
            .iter()
            .filter(|(_, r)| r.at + self.quiesce <= now)
            .map(|(k, _)| *k)
            .collect()
    }

    /// Current member specs (with weights) for an instance.
    pub fn members(&self, instance: InstanceId) -> Vec<MemberSpec> {
        self.specs
            .iter()
            .filter(|((i, _), _)| *i == instance)
            .map(|(_, s)| s.clone())
            .collect()
    }

    pub fn submit_feedback(&mut self, instance: InstanceId, report: FeedbackReport) -> Result<(), ControlError> {
        if !self.specs.contains_key(&(instance, report.member)) {
            return Err(ControlError::UnknownMember(report.member));
        }
        report.validate()?;
        self.feedback.insert((instance, report.member), report);
        Ok(())
    }

    /// Weights the next epoch would get from the feedback received so far.
    pub fn proposed_weights(&self, instance: InstanceId, now: Duration) -> Result<Vec<(MemberId, f64)>, ControlError> {
        let reports: Vec<FeedbackReport> = self
            .feedback
            .iter()
            .filter(|((i, _), _)| *i == instance)
            .map(|(_, r)| *r)
            .collect();
        recompute_weights(&reports, &self.members(instance), &self.feedback_params, now)
    }

    /// Activates a new epoch with the same members and feedback-derived
    /// weights.
    pub fn rebalance(&mut self, instance: InstanceId, boundary_event: u64, now: Duration) -> Result<ActivationSummary, ControlError> {
        let weights: BTreeMap<MemberId, f64> = self.proposed_weights(instance, now)?.into_iter().collect();
        let members: Vec<MemberSpec> = self
            .members(instance)
            .into_iter()
            .map(|mut m| {
                m.weight = weights[&m.member];
                m
            })
            .collect();
        let plan = self.plan_epoch(instance, boundary_event, members)?;
        self.activate(&plan, now)
    }
}

/// Builds an [`EpochPlan`] whose calendar may be omitted (built from the
/// member weights) and whose epoch ID may be omitted (next free ID).
///
/// This is the shape accepted from configuration files and the control API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlanRequest {
    #[serde(default = "default_instance")]
    pub instance: InstanceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<EpochId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_event: Option<u64>,
    pub members: Vec<MemberSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calendar: Option<Vec<Option<MemberId>>>,
}

fn default_instance() -> InstanceId {
    InstanceId::ZERO
}

impl EpochPlanRequest {
    /// Resolves against the control plane; `default_boundary` is used when
    /// the request names none.
    pub fn resolve(self, cp: &ControlPlane, default_boundary: u64) -> Result<EpochPlan, ControlError> {
        let calendar = match self.calendar {
            Some(slots) => Calendar::from_slots(slots)
                .map_err(|e| ControlError::IncompleteCalendar(crate::pipeline::CALENDAR_SLOTS.saturating_sub(e.0)))?,
            None => build_calendar(&MemberSpec::weighted(&self.members))?,
        };
        Ok(EpochPlan {
            instance: self.instance,
            epoch: match self.epoch {
                Some(e) => e,
                None => cp.next_epoch_id(self.instance)?,
            },
            boundary_event: self.boundary_event.unwrap_or(default_boundary),
            members: self.members,
            calendar,
        })
    }
}
