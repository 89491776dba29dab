//! The table snapshot consulted for every packet.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lpm::{Prefix, PrefixError, PrefixTrie};
use super::types::{
    ipv6_solicited_node, AddrFamily, Calendar, EpochId, InstanceId, MacAddr, MemberId,
    MemberRewrite, RewriteError, MAX_INSTANCES,
};
use crate::protocol::{DEFAULT_LB_VERSION, LB_SERVICE_PORT};

/// How much of the packet the pipeline can see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Full frame: the layer-2 filter runs and output carries link rewrites.
    Frame,
    /// UDP socket: the layer-2 filter is skipped, and the layer-3 filter
    /// keys on the local address that received the datagram.
    #[default]
    Socket,
}

/// Addresses the balancer answers to for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LbIdentity {
    #[serde(default)]
    pub mac: MacAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipv4: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipv6: Option<Ipv6Addr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct L3Entry {
    /// Source address used for packets generated on behalf of this entry.
    pub lb_src: IpAddr,
    pub instance: InstanceId,
}

/// Half-open event-number range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRange {
    pub start: u64,
    pub end: u64,
}

impl EventRange {
    pub fn contains(&self, event: u64) -> bool {
        self.start <= event && event < self.end
    }
}

/// Calendar Epoch Assignment table for one instance, plus the bookkeeping
/// needed to extend it.
#[derive(Debug, Clone)]
pub struct InstanceEpochs {
    pub(crate) current: EpochId,
    pub(crate) current_start: u64,
    pub(crate) retired: BTreeMap<EpochId, EventRange>,
    pub(crate) used: BTreeSet<EpochId>,
    pub(crate) assignment: PrefixTrie<EpochId>,
}

impl InstanceEpochs {
    pub(crate) fn new(epoch: EpochId) -> Self {
        let mut assignment = PrefixTrie::new();
        assignment.insert(Prefix::WILDCARD, epoch);
        InstanceEpochs {
            current: epoch,
            current_start: 0,
            retired: BTreeMap::new(),
            used: BTreeSet::from([epoch]),
            assignment,
        }
    }

    /// Epoch the wildcard entry points at.
    pub fn current(&self) -> EpochId {
        self.current
    }

    /// First event number of the current epoch.
    pub fn current_start(&self) -> u64 {
        self.current_start
    }

    /// Earlier epochs whose ranges are still pinned by explicit prefixes.
    pub fn retired(&self) -> &BTreeMap<EpochId, EventRange> {
        &self.retired
    }

    pub fn is_used(&self, epoch: EpochId) -> bool {
        self.used.contains(&epoch)
    }

    pub fn highest_used(&self) -> EpochId {
        *self.used.last().expect("at least the initial epoch")
    }

    pub fn lookup(&self, event_number: u64) -> Option<EpochId> {
        self.assignment.lookup(event_number).map(|(_, e)| e)
    }

    pub fn prefixes(&self) -> Vec<(Prefix, EpochId)> {
        self.assignment.entries()
    }

    /// Epochs reachable from the assignment table.
    pub fn reachable(&self) -> BTreeSet<EpochId> {
        self.assignment.entries().into_iter().map(|(_, e)| e).collect()
    }
}

impl PartialEq for InstanceEpochs {
    fn eq(&self, other: &Self) -> bool {
        self.current == other.current
            && self.current_start == other.current_start
            && self.retired == other.retired
            && self.used == other.used
            && self.assignment.entries() == other.assignment.entries()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IntegrityError {
    #[error("{0}: no wildcard entry in the epoch assignment table")]
    NotTotal(InstanceId),
    #[error("{0}: {1} is reachable but has no calendar")]
    MissingCalendar(InstanceId, EpochId),
    #[error("{0}: calendar for {1} has {2} empty slots")]
    IncompleteCalendar(InstanceId, EpochId, usize),
    #[error("{instance}: {member} in {epoch} has no {family:?} rewrite")]
    MissingRewrite {
        instance: InstanceId,
        epoch: EpochId,
        member: MemberId,
        family: AddrFamily,
    },
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Prefix(#[from] PrefixError),
    #[error("duplicate entry in table document: {0}")]
    Duplicate(String),
}

/// Immutable snapshot of every match-action table.
///
/// Readers share it behind an `Arc`; the control plane clones, edits, and
/// republishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TablesDoc", into = "TablesDoc")]
pub struct PipelineTables {
    pub mode: PipelineMode,
    pub service_port: u16,
    pub expected_version: u8,
    l2: HashMap<(Option<u16>, MacAddr), MacAddr>,
    l3: HashMap<(Option<u16>, IpAddr), L3Entry>,
    instances: [Option<InstanceEpochs>; MAX_INSTANCES],
    calendars: HashMap<(InstanceId, EpochId), Arc<Calendar>>,
    members: HashMap<(InstanceId, MemberId), MemberRewrite>,
}

impl Default for PipelineTables {
    fn default() -> Self {
        Self::new(PipelineMode::Socket)
    }
}

impl PipelineTables {
    pub fn new(mode: PipelineMode) -> Self {
        PipelineTables {
            mode,
            service_port: LB_SERVICE_PORT,
            expected_version: DEFAULT_LB_VERSION,
            l2: HashMap::new(),
            l3: HashMap::new(),
            instances: Default::default(),
            calendars: HashMap::new(),
            members: HashMap::new(),
        }
    }

    // ---- layer 2 / layer 3 filters -------------------------------------

    /// Accepts frames for `dst` on `port` (`None` = any port).
    pub fn install_l2(&mut self, port: Option<u16>, dst: MacAddr, lb_src: MacAddr) {
        self.l2.insert((port, dst), lb_src);
    }

    pub fn install_l3(&mut self, port: Option<u16>, dst: IpAddr, entry: L3Entry) {
        self.l3.insert((port, dst), entry);
    }

    /// Installs the filter entries that make the balancer a host on its
    /// networks: broadcast, unicast and solicited-node MACs, and the unicast
    /// and solicited-node IPs, all on the wildcard input port.
    pub fn install_identity(&mut self, instance: InstanceId, id: &LbIdentity) {
        self.install_l2(None, MacAddr::BROADCAST, id.mac);
        self.install_l2(None, id.mac, id.mac);
        if let Some(v4) = id.ipv4 {
            let entry = L3Entry {
                lb_src: IpAddr::V4(v4),
                instance,
            };
            self.install_l3(None, IpAddr::V4(v4), entry);
        }
        if let Some(v6) = id.ipv6 {
            self.install_l2(None, MacAddr::ipv6_solicited_node(v6), id.mac);
            let entry = L3Entry {
                lb_src: IpAddr::V6(v6),
                instance,
            };
            self.install_l3(None, IpAddr::V6(v6), entry);
            self.install_l3(None, IpAddr::V6(ipv6_solicited_node(v6)), entry);
        }
    }

    pub fn l2_lookup(&self, port: u16, dst: MacAddr) -> Option<MacAddr> {
        self.l2
            .get(&(Some(port), dst))
            .or_else(|| self.l2.get(&(None, dst)))
            .copied()
    }

    pub fn l3_lookup(&self, port: Option<u16>, dst: IpAddr) -> Option<L3Entry> {
        port.and_then(|p| self.l3.get(&(Some(p), dst)))
            .or_else(|| self.l3.get(&(None, dst)))
            .copied()
    }

    /// Address families for which some L3 entry selects `instance`.
    pub fn accepted_families(&self, instance: InstanceId) -> BTreeSet<AddrFamily> {
        self.l3
            .iter()
            .filter(|(_, e)| e.instance == instance)
            .map(|((_, ip), _)| AddrFamily::of(ip))
            .collect()
    }

    // ---- epochs, calendars, members ------------------------------------

    pub fn instance(&self, instance: InstanceId) -> Option<&InstanceEpochs> {
        self.instances[instance.index()].as_ref()
    }

    pub(crate) fn instance_mut(&mut self, instance: InstanceId) -> Option<&mut InstanceEpochs> {
        self.instances[instance.index()].as_mut()
    }

    pub(crate) fn set_instance(&mut self, instance: InstanceId, state: Option<InstanceEpochs>) {
        self.instances[instance.index()] = state;
    }

    pub fn configured_instances(&self) -> impl Iterator<Item = InstanceId> + '_ {
        InstanceId::all().filter(|i| self.instance(*i).is_some())
    }

    /// Calendar Epoch Assignment lookup.
    pub fn lookup_epoch(&self, instance: InstanceId, event_number: u64) -> Option<EpochId> {
        self.instance(instance)?.lookup(event_number)
    }

    pub fn calendar(&self, instance: InstanceId, epoch: EpochId) -> Option<&Calendar> {
        self.calendars.get(&(instance, epoch)).map(Arc::as_ref)
    }

    pub fn calendars(&self, instance: InstanceId) -> BTreeMap<EpochId, &Calendar> {
        self.calendars
            .iter()
            .filter(|((i, _), _)| *i == instance)
            .map(|((_, e), c)| (*e, c.as_ref()))
            .collect()
    }

    pub(crate) fn insert_calendar(&mut self, instance: InstanceId, epoch: EpochId, cal: Calendar) {
        self.calendars.insert((instance, epoch), Arc::new(cal));
    }

    pub(crate) fn remove_calendar(&mut self, instance: InstanceId, epoch: EpochId) {
        self.calendars.remove(&(instance, epoch));
    }

    pub fn member(&self, instance: InstanceId, member: MemberId) -> Option<&MemberRewrite> {
        self.members.get(&(instance, member))
    }

    pub fn members(&self, instance: InstanceId) -> BTreeMap<MemberId, &MemberRewrite> {
        self.members
            .iter()
            .filter(|((i, _), _)| *i == instance)
            .map(|((_, m), r)| (*m, r))
            .collect()
    }

    pub(crate) fn insert_member(&mut self, instance: InstanceId, rewrite: MemberRewrite) {
        self.members.insert((instance, rewrite.member), rewrite);
    }

    pub(crate) fn remove_member(&mut self, instance: InstanceId, member: MemberId) {
        self.members.remove(&(instance, member));
    }

    /// Entry counts per table: (l2, l3, prefixes, calendars, members).
    pub fn footprint(&self) -> TableFootprint {
        TableFootprint {
            l2: self.l2.len(),
            l3: self.l3.len(),
            prefixes: self.instances.iter().flatten().map(|s| s.assignment.len()).sum(),
            calendars: self.calendars.len(),
            members: self.members.len(),
        }
    }

    /// Checks totality and referential integrity for every configured
    /// instance.
    pub fn validate(&self) -> Result<(), IntegrityError> {
        for m in self.members.values() {
            m.validate()?;
        }
        for instance in self.configured_instances() {
            let state = self.instance(instance).expect("configured");
            if state.assignment.get(&Prefix::WILDCARD).is_none() {
                return Err(IntegrityError::NotTotal(instance));
            }
            let families = self.accepted_families(instance);
            for epoch in state.reachable() {
                let cal = self
                    .calendar(instance, epoch)
                    .ok_or(IntegrityError::MissingCalendar(instance, epoch))?;
                if !cal.is_complete() {
                    return Err(IntegrityError::IncompleteCalendar(
                        instance,
                        epoch,
                        cal.empty_slots(),
                    ));
                }
                for member in cal.members() {
                    for family in &families {
                        let ok = self
                            .member(instance, member)
                            .is_some_and(|r| r.has_family(*family));
                        if !ok {
                            return Err(IntegrityError::MissingRewrite {
                                instance,
                                epoch,
                                member,
                                family: *family,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableFootprint {
    pub l2: usize,
    pub l3: usize,
    pub prefixes: usize,
    pub calendars: usize,
    pub members: usize,
}

// ---- persisted form ----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TablesDoc {
    mode: PipelineMode,
    service_port: u16,
    expected_version: u8,
    #[serde(default)]
    l2: Vec<L2Doc>,
    #[serde(default)]
    l3: Vec<L3Doc>,
    #[serde(default)]
    instances: Vec<InstanceDoc>,
    #[serde(default)]
    calendars: Vec<CalendarDoc>,
    #[serde(default)]
    members: Vec<MemberDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct L2Doc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    port: Option<u16>,
    dst: MacAddr,
    lb_src: MacAddr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct L3Doc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    port: Option<u16>,
    dst: IpAddr,
    lb_src: IpAddr,
    instance: InstanceId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RetiredDoc {
    epoch: EpochId,
    start: u64,
    end: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrefixDoc {
    prefix: Prefix,
    epoch: EpochId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceDoc {
    instance: InstanceId,
    current: EpochId,
    current_start: u64,
    #[serde(default)]
    retired: Vec<RetiredDoc>,
    used: Vec<EpochId>,
    prefixes: Vec<PrefixDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CalendarDoc {
    instance: InstanceId,
    epoch: EpochId,
    slots: Calendar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MemberDoc {
    instance: InstanceId,
    #[serde(flatten)]
    rewrite: MemberRewrite,
}

impl From<PipelineTables> for TablesDoc {
    fn from(t: PipelineTables) -> Self {
        let mut l2: Vec<L2Doc> = t
            .l2
            .iter()
            .map(|((port, dst), lb_src)| L2Doc {
                port: *port,
                dst: *dst,
                lb_src: *lb_src,
            })
            .collect();
        l2.sort_by_key(|d| (d.port, d.dst));
        let mut l3: Vec<L3Doc> = t
            .l3
            .iter()
            .map(|((port, dst), e)| L3Doc {
                port: *port,
                dst: *dst,
                lb_src: e.lb_src,
                instance: e.instance,
            })
            .collect();
        l3.sort_by_key(|d| (d.port, d.dst));
        let instances = InstanceId::all()
            .filter_map(|i| t.instance(i).map(|s| (i, s)))
            .map(|(instance, s)| InstanceDoc {
                instance,
                current: s.current,
                current_start: s.current_start,
                retired: s
                    .retired
                    .iter()
                    .map(|(e, r)| RetiredDoc {
                        epoch: *e,
                        start: r.start,
                        end: r.end,
                    })
                    .collect(),
                used: s.used.iter().copied().collect(),
                prefixes: s
                    .prefixes()
                    .into_iter()
                    .map(|(prefix, epoch)| PrefixDoc { prefix, epoch })
                    .collect(),
            })
            .collect();
        let mut calendars: Vec<CalendarDoc> = t
            .calendars
            .iter()
            .map(|((instance, epoch), c)| CalendarDoc {
                instance: *instance,
                epoch: *epoch,
                slots: Calendar::clone(c),
            })
            .collect();
        calendars.sort_by_key(|c| (c.instance, c.epoch));
        let mut members: Vec<MemberDoc> = t
            .members
            .iter()
            .map(|((instance, _), r)| MemberDoc {
                instance: *instance,
                rewrite: r.clone(),
            })
            .collect();
        members.sort_by_key(|m| (m.instance, m.rewrite.member));
        TablesDoc {
            mode: t.mode,
            service_port: t.service_port,
            expected_version: t.expected_version,
            l2,
            l3,
            instances,
            calendars,
            members,
        }
    }
}

impl TryFrom<TablesDoc> for PipelineTables {
    type Error = IntegrityError;

    fn try_from(doc: TablesDoc) -> Result<Self, Self::Error> {
        let mut t = PipelineTables::new(doc.mode);
        t.service_port = doc.service_port;
        t.expected_version = doc.expected_version;
        for e in doc.l2 {
            if t.l2.insert((e.port, e.dst), e.lb_src).is_some() {
                return Err(IntegrityError::Duplicate(format!("l2 {}", e.dst)));
            }
        }
        for e in doc.l3 {
            let entry = L3Entry {
                lb_src: e.lb_src,
                instance: e.instance,
            };
            if t.l3.insert((e.port, e.dst), entry).is_some() {
                return Err(IntegrityError::Duplicate(format!("l3 {}", e.dst)));
            }
        }
        for d in doc.instances {
            if t.instance(d.instance).is_some() {
                return Err(IntegrityError::Duplicate(d.instance.to_string()));
            }
            let mut assignment = PrefixTrie::new();
            for p in d.prefixes {
                if assignment.insert(p.prefix, p.epoch).is_some() {
                    return Err(IntegrityError::Duplicate(format!("prefix {}", p.prefix)));
                }
            }
            let state = InstanceEpochs {
                current: d.current,
                current_start: d.current_start,
                retired: d
                    .retired
                    .into_iter()
                    .map(|r| {
                        (
                            r.epoch,
                            EventRange {
                                start: r.start,
                                end: r.end,
                            },
                        )
                    })
                    .collect(),
                used: d.used.into_iter().collect(),
                assignment,
            };
            t.set_instance(d.instance, Some(state));
        }
        for c in doc.calendars {
            if t.calendar(c.instance, c.epoch).is_some() {
                return Err(IntegrityError::Duplicate(format!("calendar {}", c.epoch)));
            }
            t.insert_calendar(c.instance, c.epoch, c.slots);
        }
        for m in doc.members {
            if t.member(m.instance, m.rewrite.member).is_some() {
                return Err(IntegrityError::Duplicate(format!("member {}", m.rewrite.member)));
            }
            t.insert_member(m.instance, m.rewrite);
        }
        t.validate()?;
        Ok(t)
    }
}
