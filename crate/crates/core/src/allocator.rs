//! Hierarchical buddy allocation of IP prefixes with hold-down timers.
//!
//! A pool owns one root prefix. Allocating a prefix of length `n` takes the
//! lowest-addressed free block that is at least as large and halves it until
//! it is exactly `/n`. Freed blocks stay `reserved` until their hold-down
//! timer runs out, after which [`Pool::expire`] frees them and merges free
//! buddies back into their parent.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::{NodeId, Timestamp};

pub const DEFAULT_HOLDDOWN_SECS: i64 = 30 * 24 * 3600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    V4,
    V6,
}

impl Family {
    pub const fn bits(self) -> u8 {
        match self {
            Family::V4 => 32,
            Family::V6 => 128,
        }
    }
}

/// An IP network: address plus prefix length, host bits zero.
///
/// Ordering is by family, then address, then length, so a parent sorts
/// directly before its lower child.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IpPrefix {
    family: Family,
    addr: u128,
    len: u8,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PrefixError {
    #[error("`{0}` is not of the form address/length")]
    Syntax(String),
    #[error("prefix length {len} exceeds {max}")]
    Length { len: u8, max: u8 },
    #[error("`{0}` has host bits set")]
    HostBits(String),
}

impl IpPrefix {
    pub fn new(addr: IpAddr, len: u8) -> Result<Self, PrefixError> {
        let (family, raw) = match addr {
            IpAddr::V4(a) => (Family::V4, u32::from(a) as u128),
            IpAddr::V6(a) => (Family::V6, u128::from(a)),
        };
        if len > family.bits() {
            return Err(PrefixError::Length { len, max: family.bits() });
        }
        let p = Self { family, addr: raw, len };
        if raw & !p.mask() != 0 {
            return Err(PrefixError::HostBits(format!("{addr}/{len}")));
        }
        Ok(p)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// Prefix length in bits.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    /// Raw address as an integer (IPv4 addresses occupy the low 32 bits).
    pub fn bits(&self) -> u128 {
        self.addr
    }

    fn host_bits(&self) -> u32 {
        (self.family.bits() - self.len) as u32
    }

    fn mask(&self) -> u128 {
        let all = if self.family == Family::V4 { u32::MAX as u128 } else { u128::MAX };
        let host = self.host_bits();
        if host >= 128 {
            0
        } else {
            all & !((1u128 << host) - 1)
        }
    }

    /// Number of addresses covered; saturates for `::/0`.
    pub fn size(&self) -> u128 {
        1u128.checked_shl(self.host_bits()).unwrap_or(u128::MAX)
    }

    /// Inclusive last address.
    pub fn last(&self) -> u128 {
        self.addr + (self.size() - 1)
    }

    pub fn contains(&self, other: &IpPrefix) -> bool {
        self.family == other.family
            && other.len >= self.len
            && other.addr & self.mask() == self.addr
    }

    pub fn overlaps(&self, other: &IpPrefix) -> bool {
        self.contains(other) || other.contains(self)
    }

    fn children(&self) -> (IpPrefix, IpPrefix) {
        let len = self.len + 1;
        let half = 1u128 << (self.family.bits() - len);
        (
            IpPrefix { len, ..*self },
            IpPrefix { addr: self.addr + half, len, ..*self },
        )
    }

    fn parent(&self) -> Option<IpPrefix> {
        (self.len > 0).then(|| {
            let mut p = IpPrefix { len: self.len - 1, ..*self };
            p.addr &= p.mask();
            p
        })
    }

    fn buddy(&self) -> Option<IpPrefix> {
        (self.len > 0).then(|| IpPrefix { addr: self.addr ^ (1u128 << self.host_bits()), ..*self })
    }

    pub fn network(&self) -> IpAddr {
        match self.family {
            Family::V4 => IpAddr::V4(Ipv4Addr::from(self.addr as u32)),
            Family::V6 => IpAddr::V6(Ipv6Addr::from(self.addr)),
        }
    }
}

impl fmt::Display for IpPrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network(), self.len)
    }
}

impl FromStr for IpPrefix {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s.split_once('/').ok_or_else(|| PrefixError::Syntax(s.to_string()))?;
        let addr: IpAddr = addr.parse().map_err(|_| PrefixError::Syntax(s.to_string()))?;
        let len: u8 = len.parse().map_err(|_| PrefixError::Syntax(s.to_string()))?;
        IpPrefix::new(addr, len)
    }
}

impl Serialize for IpPrefix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IpPrefix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum BlockStatus {
    Free,
    Split,
    Allocated,
    Reserved { freed_at: Timestamp },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub pool: String,
    pub prefix: IpPrefix,
    pub owner: NodeId,
    pub created_at: Timestamp,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("no free block of /{0} or larger")]
    PoolExhausted(u8),
    #[error("prefix length /{requested} is outside /{min}../{max}")]
    InvalidLength { requested: u8, min: u8, max: u8 },
    #[error("{0} is not a live allocation")]
    UnknownAllocation(IpPrefix),
    #[error("{0} was already freed")]
    DoubleFree(IpPrefix),
    #[error("pool `{0}` already exists")]
    DuplicatePool(String),
    #[error("pool `{0}` does not exist")]
    UnknownPool(String),
    #[error("hold-down duration must not be negative")]
    NegativeHolddown,
}

/// One prefix pool and its block tree.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Pool {
    pub id: String,
    pub root: IpPrefix,
    pub holddown_secs: i64,
    /// Every block in the tree, interior (`split`) blocks included.
    blocks: BTreeMap<IpPrefix, BlockStatus>,
    allocations: BTreeMap<IpPrefix, Allocation>,
}

impl Pool {
    pub fn new(id: impl Into<String>, root: IpPrefix, holddown_secs: i64) -> Result<Self, PoolError> {
        if holddown_secs < 0 {
            return Err(PoolError::NegativeHolddown);
        }
        Ok(Self {
            id: id.into(),
            root,
            holddown_secs,
            blocks: BTreeMap::from([(root, BlockStatus::Free)]),
            allocations: BTreeMap::new(),
        })
    }

    pub fn allocate(&mut self, prefix_len: u8, owner: NodeId, now: Timestamp) -> Result<Allocation, PoolError> {
        let max = self.root.family().bits();
        if prefix_len < self.root.len() || prefix_len > max {
            return Err(PoolError::InvalidLength { requested: prefix_len, min: self.root.len(), max });
        }
        let mut block = self
            .blocks
            .iter()
            .find(|(p, s)| **s == BlockStatus::Free && p.len() <= prefix_len)
            .map(|(p, _)| *p)
            .ok_or(PoolError::PoolExhausted(prefix_len))?;
        while block.len() < prefix_len {
            let (lo, hi) = block.children();
            self.blocks.insert(block, BlockStatus::Split);
            self.blocks.insert(lo, BlockStatus::Free);
            self.blocks.insert(hi, BlockStatus::Free);
            block = lo;
        }
        self.blocks.insert(block, BlockStatus::Allocated);
        let alloc = Allocation { pool: self.id.clone(), prefix: block, owner, created_at: now };
        self.allocations.insert(block, alloc.clone());
        Ok(alloc)
    }

    /// Releases an allocation into hold-down.
    pub fn free(&mut self, prefix: IpPrefix, now: Timestamp) -> Result<(), PoolError> {
        if self.allocations.remove(&prefix).is_none() {
            return Err(match self.blocks.get(&prefix) {
                Some(BlockStatus::Reserved { .. }) => PoolError::DoubleFree(prefix),
                _ => PoolError::UnknownAllocation(prefix),
            });
        }
        self.blocks.insert(prefix, BlockStatus::Reserved { freed_at: now });
        Ok(())
    }

    /// Frees every reservation whose hold-down has elapsed by `now` and
    /// merges free buddies. Returns how many reservations were released.
    pub fn expire(&mut self, now: Timestamp) -> usize {
        let due: Vec<IpPrefix> = self
            .blocks
            .iter()
            .filter_map(|(p, s)| match s {
                BlockStatus::Reserved { freed_at } if freed_at + self.holddown_secs <= now => Some(*p),
                _ => None,
            })
            .collect();
        for p in &due {
            self.blocks.insert(*p, BlockStatus::Free);
            self.coalesce(*p);
        }
        due.len()
    }

    fn coalesce(&mut self, mut block: IpPrefix) {
        while block != self.root {
            let (Some(buddy), Some(parent)) = (block.buddy(), block.parent()) else { return };
            if self.blocks.get(&block) != Some(&BlockStatus::Free)
                || self.blocks.get(&buddy) != Some(&BlockStatus::Free)
            {
                return;
            }
            self.blocks.remove(&block);
            self.blocks.remove(&buddy);
            self.blocks.insert(parent, BlockStatus::Free);
            block = parent;
        }
    }

    pub fn allocations(&self) -> impl Iterator<Item = &Allocation> {
        self.allocations.values()
    }

    pub fn allocation(&self, prefix: &IpPrefix) -> Option<&Allocation> {
        self.allocations.get(prefix)
    }

    /// All blocks in address order, interior blocks included.
    pub fn blocks(&self) -> impl Iterator<Item = (IpPrefix, BlockStatus)> + '_ {
        self.blocks.iter().map(|(p, s)| (*p, *s))
    }

    /// Leaf blocks (everything except `split`).
    pub fn leaves(&self) -> impl Iterator<Item = (IpPrefix, BlockStatus)> + '_ {
        self.blocks().filter(|(_, s)| *s != BlockStatus::Split)
    }
}

/// A set of independently locked pools.
#[derive(Default)]
pub struct PoolSet {
    pools: RwLock<BTreeMap<String, Arc<Mutex<Pool>>>>,
}

impl PoolSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, pool: Pool) -> Result<(), PoolError> {
        let mut pools = self.pools.write();
        if pools.contains_key(&pool.id) {
            return Err(PoolError::DuplicatePool(pool.id));
        }
        pools.insert(pool.id.clone(), Arc::new(Mutex::new(pool)));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Pool>>, PoolError> {
        self.pools.read().get(id).cloned().ok_or_else(|| PoolError::UnknownPool(id.to_string()))
    }

    /// Consistent per-pool copies, ordered by pool id.
    pub fn snapshot(&self) -> Vec<Pool> {
        self.pools.read().values().map(|p| p.lock().clone()).collect()
    }

    pub fn expire_all(&self, now: Timestamp) -> usize {
        self.pools.read().values().map(|p| p.lock().expire(now)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pfx(s: &str) -> IpPrefix {
        s.parse().unwrap()
    }

    fn owner() -> NodeId {
        NodeId::nil()
    }

    #[test]
    fn parse_and_display() {
        assert_eq!(pfx("10.0.0.0/16").to_string(), "10.0.0.0/16");
        assert_eq!(pfx("2001:db8::/32").to_string(), "2001:db8::/32");
        assert!(matches!("10.0.0.1/16".parse::<IpPrefix>(), Err(PrefixError::HostBits(_))));
        assert!(matches!("10.0.0.0/33".parse::<IpPrefix>(), Err(PrefixError::Length { .. })));
        assert!(matches!("10.0.0.0".parse::<IpPrefix>(), Err(PrefixError::Syntax(_))));
    }

    #[test]
    fn buddy_and_parent() {
        let p = pfx("10.0.1.0/24");
        assert_eq!(p.buddy().unwrap(), pfx("10.0.0.0/24"));
        assert_eq!(p.parent().unwrap(), pfx("10.0.0.0/23"));
        assert_eq!(pfx("0.0.0.0/0").size(), 1 << 32);
        assert!(pfx("10.0.0.0/16").contains(&p));
        assert!(!p.overlaps(&pfx("10.0.2.0/24")));
    }

    #[test]
    fn whole_pool() {
        let mut pool = Pool::new("p", pfx("10.0.0.0/16"), 60).unwrap();
        assert_eq!(pool.allocate(16, owner(), 0).unwrap().prefix, pfx("10.0.0.0/16"));
        assert_eq!(pool.allocate(24, owner(), 0).unwrap_err(), PoolError::PoolExhausted(24));
    }

    #[test]
    fn lowest_address_first() {
        let mut pool = Pool::new("p", pfx("10.0.0.0/16"), 60).unwrap();
        assert_eq!(pool.allocate(24, owner(), 0).unwrap().prefix, pfx("10.0.0.0/24"));
        assert_eq!(pool.allocate(24, owner(), 0).unwrap().prefix, pfx("10.0.1.0/24"));
    }

    #[test]
    fn length_bounds() {
        let mut pool = Pool::new("p", pfx("10.0.0.0/30"), 60).unwrap();
        assert_eq!(
            pool.allocate(29, owner(), 0).unwrap_err(),
            PoolError::InvalidLength { requested: 29, min: 30, max: 32 }
        );
        assert!(pool.allocate(33, owner(), 0).is_err());
        assert!(pool.allocate(32, owner(), 0).is_ok());
    }

    #[test]
    fn holddown_blocks_reuse() {
        let mut pool = Pool::new("p", pfx("10.0.0.0/23"), 100).unwrap();
        let a = pool.allocate(24, owner(), 0).unwrap();
        pool.free(a.prefix, 10).unwrap();
        let b = pool.allocate(24, owner(), 20).unwrap();
        assert_ne!(b.prefix, a.prefix);
        assert_eq!(pool.allocate(24, owner(), 30).unwrap_err(), PoolError::PoolExhausted(24));
        assert_eq!(pool.expire(109), 0);
        assert_eq!(pool.expire(110), 1);
        assert_eq!(pool.allocate(24, owner(), 111).unwrap().prefix, a.prefix);
    }

    #[test]
    fn double_and_unknown_free() {
        let mut pool = Pool::new("p", pfx("10.0.0.0/24"), 100).unwrap();
        let a = pool.allocate(25, owner(), 0).unwrap();
        pool.free(a.prefix, 1).unwrap();
        assert_eq!(pool.free(a.prefix, 2).unwrap_err(), PoolError::DoubleFree(a.prefix));
        let other = pfx("10.0.0.128/25");
        assert_eq!(pool.free(other, 2).unwrap_err(), PoolError::UnknownAllocation(other));
    }

    #[test]
    fn expired_buddies_merge() {
        let mut pool = Pool::new("p", pfx("10.0.0.0/24"), 5).unwrap();
        let a = pool.allocate(25, owner(), 0).unwrap();
        let b = pool.allocate(25, owner(), 0).unwrap();
        pool.free(a.prefix, 0).unwrap();
        pool.free(b.prefix, 0).unwrap();
        assert_eq!(pool.expire(5), 2);
        let leaves: Vec<_> = pool.leaves().collect();
        assert_eq!(leaves, vec![(pfx("10.0.0.0/24"), BlockStatus::Free)]);
    }

    #[test]
    fn expire_without_reservations_is_noop() {
        let mut pool = Pool::new("p", pfx("10.0.0.0/24"), 5).unwrap();
        pool.allocate(26, owner(), 0).unwrap();
        let before: Vec<_> = pool.blocks().collect();
        assert_eq!(pool.expire(1_000), 0);
        assert_eq!(pool.blocks().collect::<Vec<_>>(), before);
    }

    #[test]
    fn ipv6_pool() {
        let mut pool = Pool::new("v6", pfx("2001:db8::/48"), 5).unwrap();
        assert_eq!(pool.allocate(64, owner(), 0).unwrap().prefix, pfx("2001:db8::/64"));
        assert_eq!(pool.allocate(64, owner(), 0).unwrap().prefix, pfx("2001:db8:0:1::/64"));
    }

    #[test]
    fn pool_json_round_trip() {
        let mut pool = Pool::new("p", pfx("10.0.0.0/24"), 5).unwrap();
        let a = pool.allocate(26, owner(), 0).unwrap();
        pool.free(a.prefix, 3).unwrap();
        let json = serde_json::to_string(&pool).unwrap();
        let back: Pool = serde_json::from_str(&json).unwrap();
        assert_eq!(back.blocks().collect::<Vec<_>>(), pool.blocks().collect::<Vec<_>>());
        assert!(json.contains("\"10.0.0.0/26\""));
    }

    #[test]
    fn pool_set_rejects_duplicates() {
        let set = PoolSet::new();
        set.insert(Pool::new("p", pfx("10.0.0.0/24"), 5).unwrap()).unwrap();
        assert_eq!(
            set.insert(Pool::new("p", pfx("10.1.0.0/24"), 5).unwrap()).unwrap_err(),
            PoolError::DuplicatePool("p".into())
        );
        assert!(matches!(set.get("nope"), Err(PoolError::UnknownPool(_))));
    }
}
