use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of virtual load-balancer contexts sharing one device.
pub const MAX_INSTANCES: usize = 4;

/// Slots in every calendar; the low 9 bits of the event number index them.
pub const CALENDAR_SLOTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct InstanceId(u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("instance id {0} out of range (0..{MAX_INSTANCES})")]
pub struct InstanceOutOfRange(pub u8);

impl InstanceId {
    pub const ZERO: InstanceId = InstanceId(0);

    pub fn new(id: u8) -> Result<Self, InstanceOutOfRange> {
        if usize::from(id) < MAX_INSTANCES {
            Ok(InstanceId(id))
        } else {
            Err(InstanceOutOfRange(id))
        }
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn all() -> impl Iterator<Item = InstanceId> {
        (0..MAX_INSTANCES as u8).map(InstanceId)
    }
}

impl TryFrom<u8> for InstanceId {
    type Error = InstanceOutOfRange;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        InstanceId::new(v)
    }
}

impl From<InstanceId> for u8 {
    fn from(v: InstanceId) -> u8 {
        v.0
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lb{}", self.0)
    }
}

/// Calendar epoch identifier, scoped to an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EpochId(pub u32);

impl fmt::Display for EpochId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch-{}", self.0)
    }
}

/// Load-balance member identifier, scoped to an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemberId(pub u16);

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Ethernet link address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const BROADCAST: MacAddr = MacAddr([0xff; 6]);

    /// 33:33:ff:xx:yy:zz for the low 24 bits of an IPv6 unicast address.
    pub fn ipv6_solicited_node(ip: Ipv6Addr) -> MacAddr {
        let o = ip.octets();
        MacAddr([0x33, 0x33, 0xff, o[13], o[14], o[15]])
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid MAC address {0:?}")]
pub struct MacParseError(String);

impl FromStr for MacAddr {
    type Err = MacParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for octet in out.iter_mut() {
            let part = parts.next().ok_or_else(|| MacParseError(s.to_owned()))?;
            if part.len() != 2 {
                return Err(MacParseError(s.to_owned()));
            }
            *octet = u8::from_str_radix(part, 16).map_err(|_| MacParseError(s.to_owned()))?;
        }
        if parts.next().is_some() {
            return Err(MacParseError(s.to_owned()));
        }
        Ok(MacAddr(out))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// IPv6 solicited-node multicast address ff02::1:ffxx:yyzz.
pub fn ipv6_solicited_node(ip: Ipv6Addr) -> Ipv6Addr {
    let o = ip.octets();
    Ipv6Addr::new(
        0xff02,
        0,
        0,
        0,
        0,
        1,
        0xff00 | u16::from(o[13]),
        u16::from_be_bytes([o[14], o[15]]),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AddrFamily {
    V4,
    V6,
}

impl AddrFamily {
    pub fn of(ip: &IpAddr) -> AddrFamily {
        match ip {
            IpAddr::V4(_) => AddrFamily::V4,
            IpAddr::V6(_) => AddrFamily::V6,
        }
    }

    pub fn ethertype(self) -> u16 {
        match self {
            AddrFamily::V4 => 0x0800,
            AddrFamily::V6 => 0x86dd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("member {0} has neither an IPv4 nor an IPv6 address")]
    NoAddress(MemberId),
    #[error("member {0}: entropy bit mask width {1} exceeds 16")]
    WidthOutOfRange(MemberId, u8),
    #[error("member {member}: port range {base}+2^{width} overflows u16")]
    PortRangeOverflow { member: MemberId, base: u16, width: u8 },
}

/// Forwarding record for one member: where its traffic is sent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemberRewrite {
    pub member: MemberId,
    #[serde(default)]
    pub next_hop_mac: MacAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipv4: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipv6: Option<Ipv6Addr>,
    pub udp_base_port: u16,
    #[serde(default)]
    pub entropy_bits: u8,
}

impl MemberRewrite {
    pub fn validate(&self) -> Result<(), RewriteError> {
        if self.ipv4.is_none() && self.ipv6.is_none() {
            return Err(RewriteError::NoAddress(self.member));
        }
        if self.entropy_bits > 16 {
            return Err(RewriteError::WidthOutOfRange(self.member, self.entropy_bits));
        }
        let last = u32::from(self.udp_base_port) + (1u32 << self.entropy_bits) - 1;
        if last > u32::from(u16::MAX) {
            return Err(RewriteError::PortRangeOverflow {
                member: self.member,
                base: self.udp_base_port,
                width: self.entropy_bits,
            });
        }
        Ok(())
    }

    pub fn address(&self, family: AddrFamily) -> Option<IpAddr> {
        match family {
            AddrFamily::V4 => self.ipv4.map(IpAddr::V4),
            AddrFamily::V6 => self.ipv6.map(IpAddr::V6),
        }
    }

    pub fn has_family(&self, family: AddrFamily) -> bool {
        self.address(family).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("calendar has {0} slots, expected {CALENDAR_SLOTS}")]
pub struct CalendarLenError(pub usize);

/// The 512-slot map from event-number residue to member.
///
/// Empty slots are representable so that the data plane can defend against
/// them; the control plane never publishes an incomplete calendar.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Option<MemberId>>", into = "Vec<Option<MemberId>>")]
pub struct Calendar {
    slots: Box<[Option<MemberId>; CALENDAR_SLOTS]>,
}

impl Calendar {
    pub fn empty() -> Self {
        Calendar {
            slots: Box::new([None; CALENDAR_SLOTS]),
        }
    }

    pub fn uniform(member: MemberId) -> Self {
        Calendar {
            slots: Box::new([Some(member); CALENDAR_SLOTS]),
        }
    }

    pub fn from_members(members: &[MemberId]) -> Result<Self, CalendarLenError> {
        Self::from_slots(members.iter().copied().map(Some).collect())
    }

    pub fn from_slots(slots: Vec<Option<MemberId>>) -> Result<Self, CalendarLenError> {
        let len = slots.len();
        let boxed: Box<[Option<MemberId>; CALENDAR_SLOTS]> = slots
            .into_boxed_slice()
            .try_into()
            .map_err(|_| CalendarLenError(len))?;
        Ok(Calendar { slots: boxed })
    }

    pub fn slot(&self, idx: usize) -> Option<MemberId> {
        self.slots[idx]
    }

    pub fn set(&mut self, idx: usize, member: Option<MemberId>) {
        self.slots[idx] = member;
    }

    pub fn slots(&self) -> &[Option<MemberId>; CALENDAR_SLOTS] {
        &self.slots
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    pub fn empty_slots(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    /// Distinct members, ascending.
    pub fn members(&self) -> Vec<MemberId> {
        let mut m: Vec<MemberId> = self.slots.iter().flatten().copied().collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn count(&self, member: MemberId) -> usize {
        self.slots.iter().filter(|s| **s == Some(member)).count()
    }
}

impl TryFrom<Vec<Option<MemberId>>> for Calendar {
    type Error = CalendarLenError;
    fn try_from(v: Vec<Option<MemberId>>) -> Result<Self, Self::Error> {
        Calendar::from_slots(v)
    }
}

impl From<Calendar> for Vec<Option<MemberId>> {
    fn from(c: Calendar) -> Self {
        c.slots.to_vec()
    }
}

impl fmt::Debug for Calendar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let members = self.members();
        let mut d = f.debug_map();
        for m in members {
            d.entry(&m, &self.count(m));
        }
        if self.empty_slots() > 0 {
            d.entry(&"empty", &self.empty_slots());
        }
        d.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_range() {
        assert!(InstanceId::new(3).is_ok());
        assert_eq!(InstanceId::new(4), Err(InstanceOutOfRange(4)));
        assert_eq!(InstanceId::all().count(), 4);
    }

    #[test]
    fn mac_parse_and_print() {
        let mac: MacAddr = "02:00:5e:10:00:01".parse().unwrap();
        assert_eq!(mac.0, [0x02, 0x00, 0x5e, 0x10, 0x00, 0x01]);
        assert_eq!(mac.to_string(), "02:00:5e:10:00:01");
        assert!("02:00:5e:10:00".parse::<MacAddr>().is_err());
        assert!("02:00:5e:10:00:01:02".parse::<MacAddr>().is_err());
        assert!("zz:00:5e:10:00:01".parse::<MacAddr>().is_err());
    }

    #[test]
    fn solicited_node_addresses() {
        let ip: Ipv6Addr = "2001:db8::12:3456".parse().unwrap();
        assert_eq!(
            ipv6_solicited_node(ip),
            "ff02::1:ff12:3456".parse::<Ipv6Addr>().unwrap()
        );
        assert_eq!(
            MacAddr::ipv6_solicited_node(ip),
            MacAddr([0x33, 0x33, 0xff, 0x12, 0x34, 0x56])
        );
    }

    #[test]
    fn rewrite_validation() {
        let mut r = MemberRewrite {
            member: MemberId(1),
            next_hop_mac: MacAddr::default(),
            ipv4: Some(Ipv4Addr::new(10, 0, 0, 1)),
            ipv6: None,
            udp_base_port: 65528,
            entropy_bits: 3,
        };
        assert!(r.validate().is_ok());
        r.entropy_bits = 4;
        assert!(matches!(
            r.validate(),
            Err(RewriteError::PortRangeOverflow { .. })
        ));
        r.udp_base_port = 0;
        r.entropy_bits = 16;
        assert!(r.validate().is_ok());
        r.entropy_bits = 17;
        assert!(matches!(r.validate(), Err(RewriteError::WidthOutOfRange(..))));
        r.entropy_bits = 0;
        r.ipv4 = None;
        assert_eq!(r.validate(), Err(RewriteError::NoAddress(MemberId(1))));
    }

    #[test]
    fn calendar_length_checked() {
        assert_eq!(
            Calendar::from_slots(vec![Some(MemberId(0)); 511]).unwrap_err(),
            CalendarLenError(511)
        );
        let c = Calendar::from_slots(vec![Some(MemberId(0)); 512]).unwrap();
        assert!(c.is_complete());
        assert_eq!(c.count(MemberId(0)), 512);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<Calendar>(&json).unwrap(), c);
    }
}
