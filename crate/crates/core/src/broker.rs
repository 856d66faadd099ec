//! Per-device information broker: the capacity-bounded local store, predicate
//! retrieval, and lifetime expiry.
//!
//! Storage is measured in abstract units (the item's `size`), not bytes.
//! Expiry is lazy at retrieval plus a periodic sweep that reclaims capacity.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ids::{DeviceId, ItemId};
use crate::simkernel::SimTime;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Lifetime {
    Finite(u64),
    Infinite,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Importance {
    Low,
    Normal,
    High,
}

/// A published piece of information. The payload is opaque; `size` alone
/// drives capacity accounting.
#[derive(Clone, PartialEq, Debug)]
pub struct InfoItem {
    pub id: ItemId,
    pub type_tag: String,
    pub size: u64,
    pub created_at: SimTime,
    pub lifetime: Lifetime,
    pub replication_degree: u32,
    pub importance: Importance,
    pub origin_device: DeviceId,
    pub payload: Vec<u8>,
}

impl InfoItem {
    /// An item is expired strictly after `created_at + lifetime`.
    pub fn expired(&self, now: SimTime) -> bool {
        match self.lifetime {
            Lifetime::Infinite => false,
            Lifetime::Finite(ticks) => now.ticks() > self.created_at.ticks() + ticks,
        }
    }

    /// Copy with payload dropped, for registries and census replies that only
    /// need the meta-data.
    pub fn meta_only(&self) -> InfoItem {
        let mut m = self.clone();
        m.payload = Vec::new();
        m
    }
}

/// Retrieval filter: tag membership and/or explicit item ids. A present field
/// must match; an absent field matches everything, so the empty predicate
/// matches all items.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Predicate {
    pub tags: Option<BTreeSet<String>>,
    pub ids: Option<BTreeSet<ItemId>>,
}

impl Predicate {
    pub fn match_all() -> Self {
        Predicate::default()
    }

    pub fn for_tag(tag: &str) -> Self {
        Predicate {
            tags: Some([tag.to_string()].into_iter().collect()),
            ids: None,
        }
    }

    pub fn matches(&self, item: &InfoItem) -> bool {
        if let Some(tags) = &self.tags {
            if !tags.contains(&item.type_tag) {
                return false;
            }
        }
        if let Some(ids) = &self.ids {
            if !ids.contains(&item.id) {
                return false;
            }
        }
        true
    }
}

#[derive(Error, Debug, Clone, Copy, PartialEq, Eq)]
#[error("insufficient capacity: free {free}, item size {needed}")]
pub struct StoreRejected {
    pub free: u64,
    pub needed: u64,
}

#[derive(Clone, PartialEq, Debug)]
pub struct StoredItem {
    pub item: InfoItem,
    /// True iff the item was assigned by an IMM with replication degree > 1;
    /// such hosts know they manage replicated information.
    pub replica: bool,
}

/// Capacity-bounded item store. The sum of stored sizes never exceeds the
/// capacity.
pub struct LocalStore {
    capacity: u64,
    items: BTreeMap<ItemId, StoredItem>,
    used: u64,
}

impl LocalStore {
    pub fn new(capacity: u64) -> Self {
        LocalStore {
            capacity,
            items: BTreeMap::new(),
            used: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn free_capacity(&self) -> u64 {
        self.capacity - self.used
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// Store an item, replacing any existing copy with the same id (the
    /// replaced copy's size is released first).
    pub fn store(&mut self, item: InfoItem, replica: bool) -> Result<(), StoreRejected> {
        let released = self.items.get(&item.id).map(|s| s.item.size).unwrap_or(0);
        let free = self.capacity - (self.used - released);
        if item.size > free {
            return Err(StoreRejected {
                free: self.free_capacity(),
                needed: item.size,
            });
        }
        self.used = self.used - released + item.size;
        self.items.insert(item.id, StoredItem { item, replica });
        debug_assert!(self.used <= self.capacity);
        Ok(())
    }

    pub fn remove(&mut self, id: ItemId) -> Option<StoredItem> {
        let removed = self.items.remove(&id);
        if let Some(s) = &removed {
            self.used -= s.item.size;
        }
        removed
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.items.contains_key(&id)
    }

    pub fn get(&self, id: ItemId) -> Option<&StoredItem> {
        self.items.get(&id)
    }

    /// Stored, unexpired items satisfying the predicate, in item-id order.
    pub fn retrieve(&self, predicate: &Predicate, now: SimTime) -> Vec<&InfoItem> {
        self.items
            .values()
            .filter(|s| !s.item.expired(now) && predicate.matches(&s.item))
            .map(|s| &s.item)
            .collect()
    }

    /// Remove expired items, reclaiming their capacity.
    pub fn sweep_expired(&mut self, now: SimTime) -> Vec<StoredItem> {
        let expired: Vec<ItemId> = self
            .items
            .values()
            .filter(|s| s.item.expired(now))
            .map(|s| s.item.id)
            .collect();
        expired
            .into_iter()
            .filter_map(|id| self.remove(id))
            .collect()
    }

    /// Ids of held replica-flagged items, for sign-off messages.
    pub fn replica_item_ids(&self) -> Vec<ItemId> {
        self.items
            .values()
            .filter(|s| s.replica)
            .map(|s| s.item.id)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredItem> {
        self.items.values()
    }

    /// Drain every stored item, leaving the store empty.
    pub fn drain_all(&mut self) -> Vec<StoredItem> {
        self.used = 0;
        std::mem::take(&mut self.items).into_values().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(id: u32, tag: &str, size: u64, created: u64, lifetime: Lifetime) -> InfoItem {
        InfoItem {
            id: ItemId(id),
            type_tag: tag.to_string(),
            size,
            created_at: SimTime(created),
            lifetime,
            replication_degree: 1,
            importance: Importance::Normal,
            origin_device: DeviceId(0),
            payload: Vec::new(),
        }
    }

    #[test]
    fn store_exact_fit_accepted() {
        let mut s = LocalStore::new(10);
        s.store(item(1, "a", 10, 0, Lifetime::Infinite), false).unwrap();
        assert_eq!(s.free_capacity(), 0);
    }

    #[test]
    fn store_over_capacity_rejected() {
        let mut s = LocalStore::new(10);
        s.store(item(1, "a", 5, 0, Lifetime::Infinite), false).unwrap();
        let err = s.store(item(2, "a", 6, 0, Lifetime::Infinite), false).unwrap_err();
        assert_eq!(err, StoreRejected { free: 5, needed: 6 });
        assert_eq!(s.free_capacity(), 5);
    }

    #[test]
    fn store_same_id_twice_replaces() {
        let mut s = LocalStore::new(10);
        s.store(item(1, "a", 4, 0, Lifetime::Infinite), false).unwrap();
        s.store(item(1, "b", 6, 0, Lifetime::Infinite), true).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.free_capacity(), 4);
        assert_eq!(s.get(ItemId(1)).unwrap().item.type_tag, "b");
        assert!(s.get(ItemId(1)).unwrap().replica);
    }

    #[test]
    fn retrieve_from_empty_store() {
        let s = LocalStore::new(10);
        assert!(s.retrieve(&Predicate::match_all(), SimTime(0)).is_empty());
    }

    #[test]
    fn retrieval_excludes_expired_items() {
        let mut s = LocalStore::new(10);
        s.store(item(1, "a", 2, 0, Lifetime::Finite(10)), false).unwrap();
        // Alive through created_at + lifetime, expired strictly after.
        assert_eq!(s.retrieve(&Predicate::match_all(), SimTime(10)).len(), 1);
        assert!(s.retrieve(&Predicate::match_all(), SimTime(11)).is_empty());
    }

    // Brute-force filter oracle over a mixed-tag population.
    #[test]
    fn retrieve_matches_linear_scan_oracle() {
        let mut s = LocalStore::new(1000);
        let tags = ["news", "auction", "forum", "game"];
        let mut all = Vec::new();
        for i in 0..20u32 {
            let lifetime = if i % 5 == 0 {
                Lifetime::Finite(i as u64)
            } else {
                Lifetime::Infinite
            };
            let it = item(i, tags[i as usize % tags.len()], 3, 0, lifetime);
            all.push(it.clone());
            s.store(it, false).unwrap();
        }
        let now = SimTime(7);
        let pred = Predicate::for_tag("news");
        let got: Vec<ItemId> = s.retrieve(&pred, now).iter().map(|i| i.id).collect();
        let expect: Vec<ItemId> = all
            .iter()
            .filter(|i| !i.expired(now) && pred.matches(i))
            .map(|i| i.id)
            .collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn predicate_combines_tag_and_id_filters() {
        let a = item(1, "news", 1, 0, Lifetime::Infinite);
        let b = item(2, "news", 1, 0, Lifetime::Infinite);
        let pred = Predicate {
            tags: Some(["news".to_string()].into_iter().collect()),
            ids: Some([ItemId(1)].into_iter().collect()),
        };
        assert!(pred.matches(&a));
        assert!(!pred.matches(&b));
        assert!(Predicate::match_all().matches(&b));
    }

    #[test]
    fn free_capacity_tracks_store_and_sweep() {
        let mut s = LocalStore::new(100);
        assert_eq!(s.free_capacity(), 100);
        s.store(item(1, "a", 30, 0, Lifetime::Finite(5)), false).unwrap();
        assert_eq!(s.free_capacity(), 70);
        // Not yet expired at the boundary.
        assert!(s.sweep_expired(SimTime(5)).is_empty());
        let removed = s.sweep_expired(SimTime(6));
        assert_eq!(removed.len(), 1);
        assert_eq!(s.free_capacity(), 100);
    }

    #[test]
    fn replica_ids_lists_only_flagged_items() {
        let mut s = LocalStore::new(100);
        s.store(item(1, "a", 1, 0, Lifetime::Infinite), true).unwrap();
        s.store(item(2, "a", 1, 0, Lifetime::Infinite), false).unwrap();
        s.store(item(3, "a", 1, 0, Lifetime::Infinite), true).unwrap();
        assert_eq!(s.replica_item_ids(), vec![ItemId(1), ItemId(3)]);
    }

    proptest! {
        // Capacity is never exceeded under arbitrary store/remove/sweep
        // interleavings.
        #[test]
        fn capacity_never_exceeded(ops in proptest::collection::vec((0u32..12, 1u64..8, 0u8..3), 1..60)) {
            let mut s = LocalStore::new(20);
            for (id, size, op) in ops {
                match op {
                    0 => {
                        let _ = s.store(item(id, "t", size, 0, Lifetime::Finite(size)), false);
                    }
                    1 => {
                        s.remove(ItemId(id));
                    }
                    _ => {
                        s.sweep_expired(SimTime(size));
                    }
                }
                let used: u64 = s.iter().map(|x| x.item.size).sum();
                prop_assert!(used <= 20);
                prop_assert_eq!(s.free_capacity(), 20 - used);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sign-off emission (protocol side of the broker)

use crate::engine::Simulation;
use crate::ids::MarketId;
use crate::trace::{Record, SignOffReason};
use crate::transport::{Addressee, FloodScope, Payload};

impl Simulation {
    /// Final notification before leaving a market or powering down, listing
    /// the replica items this device held. Crashes never reach this path;
    /// that absence is what defines a disaster.
    pub(crate) fn emit_sign_off(&mut self, d: DeviceId, market: MarketId, reason: SignOffReason) {
        let replicas = self.devices[d.index()].store.replica_item_ids();
        self.rec(Record::SignOffSent {
            device: d,
            market,
            replicas: replicas.clone(),
            reason,
        });
        let payload = Payload::SignOff {
            market,
            device: d,
            replicas,
            reason,
        };
        match reason {
            // Leaving by movement: the device is already at or past the
            // boundary, so the message travels back toward the center.
            SignOffReason::Leave => {
                self.geo_send_to_market(d, market, payload);
            }
            // Shutting down inside the market: one last region flood; relays
            // keep it alive after the sender powers off.
            SignOffReason::Shutdown => {
                self.flood_from(
                    d,
                    FloodScope::Region(market),
                    self.cfg.flood_ttl,
                    Addressee::Imm(market),
                    payload,
                );
            }
        }
    }
}
