//! Information-market state: market geometry, device roles, the IMM's tables,
//! leader election, and the capacity-greedy assignment policy.
//!
//! Protocol behavior (join/leave, probes, census recovery, replication
//! maintenance, center-seeking handoff) is implemented on [`Simulation`] in
//! this module; the types here are the data model those handlers maintain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::broker::InfoItem;
use crate::ids::{DeviceId, ItemId, MarketId, QueryId};
use crate::query::Residency;
use crate::simkernel::SimTime;
use crate::world::Position;

/// A geographic market region. The core is the central zone the IMM tries to
/// occupy.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct MarketSpec {
    pub id: MarketId,
    pub center: Position,
    pub radius: f64,
    pub core_radius: f64,
}

impl MarketSpec {
    pub fn contains(&self, p: Position) -> bool {
        p.dist(self.center) <= self.radius
    }

    pub fn in_core(&self, p: Position) -> bool {
        p.dist(self.center) <= self.core_radius
    }
}

/// Identity of one IMM incarnation. Higher epoch wins an election; equal
/// epochs resolve to the lower device id.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ImmKey {
    pub epoch: u64,
    pub device: DeviceId,
}

impl ImmKey {
    pub fn beats(&self, other: &ImmKey) -> bool {
        self.epoch > other.epoch || (self.epoch == other.epoch && self.device < other.device)
    }
}

impl fmt::Display for ImmKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@e{}", self.device, self.epoch)
    }
}

/// The surviving candidate among simultaneous IMM incarnations.
pub fn election_winner(candidates: impl IntoIterator<Item = ImmKey>) -> Option<ImmKey> {
    candidates
        .into_iter()
        .fold(None, |best: Option<ImmKey>, c| match best {
            Some(b) if b.beats(&c) => Some(b),
            _ => Some(c),
        })
}

/// Market role of a device. `Imm` takes precedence over `Active` when the IMM
/// happens to host assigned items itself; among non-IMM members, a device is
/// active iff it holds at least one IMM-assigned item.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    Outside,
    Passive,
    Active,
    Imm,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Outside => "outside",
            Role::Passive => "passive",
            Role::Active => "active",
            Role::Imm => "imm",
        };
        f.write_str(s)
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct ReplicaEntry {
    pub degree: u32,
    pub hosts: BTreeSet<DeviceId>,
}

/// Why a store command is in flight; drives what happens on ack, nack, or
/// silence.
#[derive(Clone, PartialEq, Debug)]
pub enum StoreOrigin {
    /// Placing a copy of a freshly published item.
    Publish { publish_token: u64 },
    /// Re-establishing replication degree from a surviving copy.
    Repair,
    /// Re-hosting a copy returned by a departing device.
    Return,
}

/// One outstanding store command: the IMM retries elsewhere when the host
/// rejects or stays silent past the deadline.
#[derive(Clone, PartialEq, Debug)]
pub struct PendingStore {
    pub item: InfoItem,
    pub replica: bool,
    pub host: DeviceId,
    pub deadline: SimTime,
    pub tried: BTreeSet<DeviceId>,
    pub origin: StoreOrigin,
}

/// Progress of one publish through assignment: the publisher is acked once the
/// first copy is durably stored, nacked if every placement fails.
#[derive(Clone, PartialEq, Debug)]
pub struct PublishProgress {
    pub item: InfoItem,
    pub publisher: DeviceId,
    pub outstanding: u32,
    pub any_stored: bool,
    pub acked: bool,
}

/// Everything the IMM knows. Travels wholesale in handoff and election state
/// transfers. The known-markets directory lives on the hosting device and
/// moves with the role.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct ImmState {
    pub epoch: u64,
    /// device -> last reported free capacity
    pub capacity_table: BTreeMap<DeviceId, u64>,
    /// item -> hosts confirmed by store acks
    pub assignment_map: BTreeMap<ItemId, BTreeSet<DeviceId>>,
    /// item meta-data (payload stripped) for matching, repair and recovery
    pub item_meta: BTreeMap<ItemId, InfoItem>,
    /// type tag -> number of items of that tag on this market
    pub type_index: BTreeMap<String, u32>,
    /// replicated items (degree > 1) and their current hosts
    pub replica_registry: BTreeMap<ItemId, ReplicaEntry>,
    /// long-lived remote queries resident at this market
    pub resident: BTreeMap<QueryId, Residency>,
    pub pending_stores: BTreeMap<u64, PendingStore>,
    pub pending_publishes: BTreeMap<u64, PublishProgress>,
    /// returned copies that found no capacity yet
    pub return_buffer: Vec<(InfoItem, bool)>,
    /// while set, state is being rebuilt by census and market work is queued
    pub census_until: Option<SimTime>,
    pub inbox: Vec<(DeviceId, crate::transport::Payload)>,
    pub hb_round: u64,
    pub hb_awaiting: BTreeMap<DeviceId, u64>,
}

impl ImmState {
    pub fn new(epoch: u64) -> Self {
        ImmState {
            epoch,
            ..Default::default()
        }
    }

    /// Recount the type index from the assignment map; the incremental updates
    /// must always agree with this.
    pub fn recount_type_index(&self) -> BTreeMap<String, u32> {
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for item in self.assignment_map.keys() {
            if let Some(meta) = self.item_meta.get(item) {
                *counts.entry(meta.type_tag.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn deficits(&self) -> Vec<(ItemId, u32)> {
        self.replica_registry
            .iter()
            .filter(|(_, e)| (e.hosts.len() as u32) < e.degree)
            .map(|(id, e)| (*id, e.degree - e.hosts.len() as u32))
            .collect()
    }
}

/// Greedy capacity-aware host selection: pick `count` distinct devices with
/// the greatest reported free capacity that can fit `size`, excluding
/// `exclude`; ties break to the lower device id. May return fewer than
/// `count`.
pub fn choose_hosts(
    capacity_table: &BTreeMap<DeviceId, u64>,
    exclude: &BTreeSet<DeviceId>,
    size: u64,
    count: u32,
) -> Vec<DeviceId> {
    let mut fitting: Vec<(u64, DeviceId)> = capacity_table
        .iter()
        .filter(|(d, free)| !exclude.contains(d) && **free >= size)
        .map(|(d, free)| (*free, *d))
        .collect();
    // Greatest free capacity first, then lowest id.
    fitting.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    fitting
        .into_iter()
        .take(count as usize)
        .map(|(_, d)| d)
        .collect()
}

/// Random-policy baseline used by the load-balancing comparison: a uniformly
/// random fitting device, ignoring free-capacity ranking.
pub fn choose_hosts_random(
    capacity_table: &BTreeMap<DeviceId, u64>,
    exclude: &BTreeSet<DeviceId>,
    size: u64,
    count: u32,
    rng: &mut impl rand::Rng,
) -> Vec<DeviceId> {
    use rand::seq::SliceRandom;
    let mut fitting: Vec<DeviceId> = capacity_table
        .iter()
        .filter(|(d, free)| !exclude.contains(d) && **free >= size)
        .map(|(d, _)| *d)
        .collect();
    fitting.shuffle(rng);
    fitting.truncate(count as usize);
    fitting
}


// ---------------------------------------------------------------------------
// Protocol implementation

use crate::engine::{Event, ImmInstance, ProbeWait, Simulation, TimerKind};
use crate::trace::{ImmCreateReason, ImmEndReason, Record, SignOffReason};
use crate::transport::{Addressee, FloodScope, Payload};

impl Simulation {
    fn imm_mut(&mut self, d: DeviceId, market: MarketId) -> Option<&mut ImmState> {
        match &mut self.devices[d.index()].imm {
            Some(inst) if inst.market == market => Some(&mut inst.st),
            _ => None,
        }
    }

    fn imm_ref(&self, d: DeviceId, market: MarketId) -> Option<&ImmState> {
        match &self.devices[d.index()].imm {
            Some(inst) if inst.market == market => Some(&inst.st),
            _ => None,
        }
    }

    fn imm_key_of(&self, d: DeviceId, market: MarketId) -> Option<ImmKey> {
        self.imm_ref(d, market).map(|st| ImmKey {
            epoch: st.epoch,
            device: d,
        })
    }

    /// Adopt a newer IMM identity into the device's cache. Returns true if the
    /// cache changed.
    fn cache_update(&mut self, d: DeviceId, market: MarketId, key: ImmKey) -> bool {
        let cache = &mut self.devices[d.index()].imm_cache;
        match cache.get(&market) {
            Some(cur) if !key.beats(cur) && *cur != key => false,
            Some(cur) if *cur == key => false,
            _ => {
                cache.insert(market, key);
                true
            }
        }
    }

    /// Ask the market's IMM for something. Joins flood a probe and wait; any
    /// queued payload is forwarded once an IMM identity is learned, or handled
    /// locally after this device becomes the IMM itself (first arrival or
    /// disaster recovery).
    pub(crate) fn need_imm(
        &mut self,
        d: DeviceId,
        market: MarketId,
        payload: Option<Payload>,
        join: bool,
    ) {
        if self.devices[d.index()].imm_market() == Some(market) {
            if let Some(p) = payload {
                self.imm_payload(d, market, p);
            }
            return;
        }
        if let Some(w) = self.devices[d.index()]
            .waits
            .iter_mut()
            .find(|w| w.market == market)
        {
            w.join |= join;
            if let Some(p) = payload {
                w.queued.push(p);
            }
            return;
        }
        let token = self.fresh_token();
        self.devices[d.index()].waits.push(ProbeWait {
            token,
            market,
            join,
            queued: payload.into_iter().collect(),
        });
        self.flood_from(
            d,
            FloodScope::Region(market),
            self.cfg.flood_ttl,
            Addressee::Imm(market),
            Payload::ImmProbe { market, origin: d },
        );
        self.kernel.schedule_in(
            self.cfg.t_probe,
            Event::Timer(TimerKind::ProbeDeadline { device: d, token }),
        );
    }

    /// No probe reply within T_probe: the device instantiates the IMM itself.
    pub(crate) fn on_probe_deadline(&mut self, d: DeviceId, token: u64) {
        let Some(pos) = self.devices[d.index()]
            .waits
            .iter()
            .position(|w| w.token == token)
        else {
            return;
        };
        let w = self.devices[d.index()].waits.remove(pos);
        if !self.devices[d.index()].online {
            return;
        }
        let here = self.world.position(d);
        if !self.markets[w.market.index()].contains(here) {
            for p in w.queued {
                self.geo_send_to_market(d, w.market, p);
            }
            return;
        }
        self.become_imm(d, w.market);
        for p in w.queued {
            self.imm_payload(d, w.market, p);
        }
    }

    /// Create a fresh IMM incarnation on `d` and start the census that
    /// rebuilds (or initializes) its tables from the market's devices.
    fn become_imm(&mut self, d: DeviceId, market: MarketId) {
        let epoch = self.devices[d.index()]
            .imm_cache
            .get(&market)
            .map(|k| k.epoch)
            .unwrap_or(0)
            + 1;
        let key = ImmKey { epoch, device: d };
        let free = self.free_capacity_of(d);
        let mut st = ImmState::new(epoch);
        st.capacity_table.insert(d, free);
        st.census_until = Some(self.now().plus(self.cfg.census_window()));
        // The recoverer's own holdings seed the rebuilt tables; everyone
        // else's arrive through census replies.
        for stored in self.devices[d.index()].store.iter() {
            let id = stored.item.id;
            st.assignment_map.entry(id).or_default().insert(d);
            st.item_meta.entry(id).or_insert_with(|| stored.item.meta_only());
            if stored.replica {
                let e = st
                    .replica_registry
                    .entry(id)
                    .or_insert_with(|| ReplicaEntry {
                        degree: stored.item.replication_degree,
                        hosts: BTreeSet::new(),
                    });
                e.hosts.insert(d);
            }
        }
        st.type_index = st.recount_type_index();
        self.devices[d.index()].member_of = Some(market);
        self.devices[d.index()].imm = Some(ImmInstance { market, st });
        self.devices[d.index()].imm_cache.insert(market, key);
        self.rec(Record::ImmCreated {
            market,
            device: d,
            epoch,
            reason: ImmCreateReason::ProbeTimeout,
        });
        self.refresh_role(d);
        self.flood_from(
            d,
            FloodScope::Region(market),
            self.cfg.flood_ttl,
            Addressee::All,
            Payload::CensusRequest { market, imm: key },
        );
        self.kernel.schedule_in(
            self.cfg.census_window(),
            Event::Timer(TimerKind::CensusDone { device: d, market, epoch }),
        );
        self.kernel.schedule_in(
            self.cfg.t_center,
            Event::Timer(TimerKind::CenterSeek { device: d, market, epoch }),
        );
        if self.cfg.strategy == crate::scenario::ReplicationStrategy::Periodic {
            self.kernel.schedule_in(
                self.cfg.t_heartbeat,
                Event::Timer(TimerKind::HeartbeatRound { device: d, market, epoch }),
            );
        }
    }

    pub(crate) fn on_census_done(&mut self, d: DeviceId, market: MarketId, epoch: u64) {
        if self.imm_key_of(d, market).map(|k| k.epoch) != Some(epoch) {
            return;
        }
        let inbox = {
            let st = self.imm_mut(d, market).expect("guarded");
            st.census_until = None;
            std::mem::take(&mut st.inbox)
        };
        for (_, p) in inbox {
            self.handle_imm_now(d, market, p);
        }
        self.imm_retry_buffer(d, market);
    }

    /// Probes are answered by the live IMM only.
    pub(crate) fn on_imm_probe(&mut self, at: DeviceId, market: MarketId, origin: DeviceId) {
        if origin == at {
            return;
        }
        let Some(key) = self.imm_key_of(at, market) else {
            return;
        };
        self.market_send(
            at,
            market,
            origin,
            Payload::ProbeReply { market, origin, imm: key },
        );
    }

    /// Learning of an IMM identity: refresh the cache, complete any waiting
    /// joins/payload sends, and react when two live IMMs discover each other
    /// (the election).
    pub(crate) fn imm_learned_peer(&mut self, at: DeviceId, market: MarketId, key: ImmKey) {
        let previously_cached = self.devices[at.index()].imm_cache.get(&market).copied();
        self.cache_update(at, market, key);
        self.resolve_waits(at, market);
        let Some(my_key) = self.imm_key_of(at, market) else {
            // Not an IMM here. A device that observes two different
            // incarnations bridges partitioned groups: tell the stale one
            // about its successor so it deactivates and hands over state.
            if let Some(old) = previously_cached {
                if old != key && old.device != key.device {
                    let inside =
                        self.markets[market.index()].contains(self.world.position(at));
                    if inside {
                        let (winner, loser) = if key.beats(&old) { (key, old) } else { (old, key) };
                        self.market_send(
                            at,
                            market,
                            loser.device,
                            Payload::ImmAnnounce { market, imm: winner },
                        );
                    }
                }
            }
            return;
        };
        if my_key == key {
            return;
        }
        if key.beats(&my_key) {
            // Lose the election: hand all state to the winner and deactivate.
            self.rec(Record::ElectionResolved {
                market,
                winner: key.device,
                winner_epoch: key.epoch,
                loser: at,
                loser_epoch: my_key.epoch,
            });
            self.rec(Record::ImmDeactivated {
                market,
                device: at,
                epoch: my_key.epoch,
                reason: ImmEndReason::Election,
            });
            let inst = self.devices[at.index()].imm.take().expect("live imm");
            self.devices[at.index()].imm_cache.insert(market, key);
            self.refresh_role(at);
            let free = self.free_capacity_of(at);
            self.market_send(
                at,
                market,
                key.device,
                Payload::ImmStateTransfer {
                    market,
                    from: my_key,
                    state: Box::new(inst.st),
                },
            );
            self.market_send(
                at,
                market,
                key.device,
                Payload::CapacityReport { market, device: at, free },
            );
        } else {
            // Win: make sure the weaker instance hears about us directly.
            self.market_send(
                at,
                market,
                key.device,
                Payload::ImmAnnounce { market, imm: my_key },
            );
        }
    }

    /// Complete pending joins and flush queued payloads once an IMM for the
    /// market is known.
    fn resolve_waits(&mut self, at: DeviceId, market: MarketId) {
        let Some(key) = self.devices[at.index()].imm_cache.get(&market).copied() else {
            return;
        };
        let waits: Vec<ProbeWait> = {
            let dev = &mut self.devices[at.index()];
            let (matching, keep): (Vec<_>, Vec<_>) =
                dev.waits.drain(..).partition(|w| w.market == market);
            dev.waits = keep;
            matching
        };
        if waits.is_empty() {
            return;
        }
        for w in waits {
            if w.join && self.devices[at.index()].member_of.is_none() {
                self.devices[at.index()].member_of = Some(market);
                self.refresh_role(at);
                let free = self.free_capacity_of(at);
                self.market_send(
                    at,
                    market,
                    key.device,
                    Payload::CapacityReport { market, device: at, free },
                );
            }
            for p in w.queued {
                self.market_send(at, market, key.device, p);
            }
        }
    }

    pub(crate) fn on_census_request(&mut self, at: DeviceId, market: MarketId, key: ImmKey) {
        if key.device == at {
            return;
        }
        self.imm_learned_peer(at, market, key);
        if self.devices[at.index()].imm.is_some() {
            return; // a (still) live rival does not report as a member
        }
        let inside = self.markets[market.index()].contains(self.world.position(at));
        if !inside {
            return;
        }
        let free = self.free_capacity_of(at);
        let holdings: Vec<(crate::broker::InfoItem, bool)> = self.devices[at.index()]
            .store
            .iter()
            .map(|s| (s.item.meta_only(), s.replica))
            .collect();
        self.market_send(
            at,
            market,
            key.device,
            Payload::CensusReply { market, device: at, free, holdings },
        );
    }

    /// Route a payload meant for the market's IMM. During a census rebuild,
    /// market work is queued; stale targets forward along the cache.
    pub(crate) fn imm_payload(&mut self, at: DeviceId, market: MarketId, payload: Payload) {
        let is_live = self.devices[at.index()].imm_market() == Some(market);
        if is_live {
            let defer = {
                let st = self.imm_ref(at, market).expect("live");
                st.census_until.is_some() && deferrable(&payload)
            };
            if defer {
                self.imm_mut(at, market).expect("live").inbox.push((at, payload));
                return;
            }
            self.handle_imm_now(at, market, payload);
            return;
        }
        let inside = self.markets[market.index()].contains(self.world.position(at));
        if !inside {
            self.geo_send_to_market(at, market, payload);
            return;
        }
        match self.devices[at.index()].imm_cache.get(&market).copied() {
            Some(key) if key.device != at => self.market_send(at, market, key.device, payload),
            _ => self.need_imm(at, market, Some(payload), false),
        }
    }

    pub(crate) fn handle_imm_now(&mut self, at: DeviceId, market: MarketId, payload: Payload) {
        match payload {
            Payload::CapacityReport { device, free, .. } => {
                if let Some(st) = self.imm_mut(at, market) {
                    st.capacity_table.insert(device, free);
                }
                self.imm_retry_buffer(at, market);
            }
            Payload::StoreAck { token, item, replica, host, free, .. } => {
                self.on_store_ack_imm(at, market, token, item, replica, host, free)
            }
            Payload::StoreNack { token, host, free, .. } => {
                self.on_store_nack_imm(at, market, token, host, free)
            }
            Payload::SignOff { device, replicas, reason, .. } => {
                self.on_sign_off_imm(at, market, device, replicas, reason)
            }
            Payload::CensusReply { device, free, holdings, .. } => {
                self.on_census_reply_imm(at, market, device, free, holdings)
            }
            Payload::HeartbeatAck { device, free, round, .. } => {
                if let Some(st) = self.imm_mut(at, market) {
                    if st.hb_awaiting.get(&device) == Some(&round) {
                        st.hb_awaiting.remove(&device);
                    }
                    st.capacity_table.insert(device, free);
                }
            }
            Payload::ItemFetchReply { query, items, .. } => {
                self.on_item_fetch_reply_imm(at, market, query, items)
            }
            Payload::ImmStateTransfer { state, .. } => {
                self.on_state_transfer_imm(at, market, *state)
            }
            Payload::PublishItem { publisher, item, token, .. } => {
                self.on_publish_item_imm(at, market, publisher, item, token)
            }
            Payload::ItemReturn { leaver, items, .. } => {
                self.on_item_return_imm(at, market, leaver, items)
            }
            Payload::AsyncQuery { q } => self.on_async_query_imm(at, market, q),
            other => {
                debug_assert!(false, "unexpected imm payload {:?}", other.kind());
            }
        }
    }

    // ------------------------------------------------------------------
    // Store placement with ack tracking and retry

    /// Send one store command to an explicitly chosen host.
    fn dispatch_store_to(
        &mut self,
        d: DeviceId,
        market: MarketId,
        item: crate::broker::InfoItem,
        replica: bool,
        host: DeviceId,
        origin: StoreOrigin,
        tried: BTreeSet<DeviceId>,
    ) {
        let key = self.imm_key_of(d, market).expect("imm dispatches stores");
        let token = self.fresh_token();
        let deadline = self.now().plus(self.cfg.ack_window());
        {
            let st = self.imm_mut(d, market).expect("live");
            if let Some(free) = st.capacity_table.get_mut(&host) {
                *free = free.saturating_sub(item.size);
            }
            let mut tried = tried;
            tried.insert(host);
            st.pending_stores.insert(
                token,
                PendingStore {
                    item: item.clone(),
                    replica,
                    host,
                    deadline,
                    tried,
                    origin,
                },
            );
        }
        let epoch = key.epoch;
        self.kernel.schedule(
            deadline,
            Event::Timer(TimerKind::StoreCheck { device: d, market, epoch, token }),
        )
        .expect("deadline in future");
        self.copy_created(item.id);
        self.market_send(
            d,
            market,
            host,
            Payload::StoreCmd { market, item, replica, ack_to: key, token },
        );
    }

    /// Pick a host by greatest free capacity and dispatch; false when no
    /// candidate fits.
    fn dispatch_store(
        &mut self,
        d: DeviceId,
        market: MarketId,
        item: crate::broker::InfoItem,
        replica: bool,
        origin: StoreOrigin,
        exclude: &BTreeSet<DeviceId>,
        tried: BTreeSet<DeviceId>,
    ) -> bool {
        let candidate = {
            let st = self.imm_ref(d, market).expect("live");
            let mut all_excluded = exclude.clone();
            all_excluded.extend(tried.iter().copied());
            choose_hosts(&st.capacity_table, &all_excluded, item.size, 1)
                .first()
                .copied()
        };
        match candidate {
            Some(host) => {
                self.dispatch_store_to(d, market, item, replica, host, origin, tried);
                true
            }
            None => false,
        }
    }

    fn current_hosts(&self, d: DeviceId, market: MarketId, item: ItemId) -> BTreeSet<DeviceId> {
        self.imm_ref(d, market)
            .and_then(|st| st.assignment_map.get(&item).cloned())
            .unwrap_or_default()
    }

    pub(crate) fn on_store_ack_imm(
        &mut self,
        at: DeviceId,
        market: MarketId,
        token: u64,
        item: ItemId,
        replica: bool,
        host: DeviceId,
        free: u64,
    ) {
        let pending = {
            let Some(st) = self.imm_mut(at, market) else { return };
            st.capacity_table.insert(host, free);
            st.assignment_map.entry(item).or_default().insert(host);
            st.pending_stores.remove(&token)
        };
        if replica {
            let (degree, hosts) = {
                let st = self.imm_mut(at, market).expect("live");
                let degree = st
                    .item_meta
                    .get(&item)
                    .map(|m| m.replication_degree)
                    .unwrap_or(2);
                let entry = st
                    .replica_registry
                    .entry(item)
                    .or_insert_with(|| ReplicaEntry { degree, hosts: BTreeSet::new() });
                entry.hosts.insert(host);
                (entry.degree, entry.hosts.iter().copied().collect::<Vec<_>>())
            };
            self.rec(Record::RegistryUpdate { market, by: at, item, degree, hosts });
        }
        {
            let st = self.imm_mut(at, market).expect("live");
            st.type_index = st.recount_type_index();
        }
        let Some(p) = pending else { return };
        if let StoreOrigin::Publish { publish_token } = p.origin {
            let (first_store, publisher) = {
                let st = self.imm_mut(at, market).expect("live");
                match st.pending_publishes.get_mut(&publish_token) {
                    Some(prog) => {
                        prog.outstanding = prog.outstanding.saturating_sub(1);
                        let first = !prog.any_stored;
                        prog.any_stored = true;
                        let publisher = prog.publisher;
                        let ack_now = !prog.acked;
                        prog.acked = true;
                        (first && ack_now, publisher)
                    }
                    None => (false, host),
                }
            };
            if first_store {
                self.send_publisher_response(
                    at,
                    publisher,
                    Payload::PublishAck { publisher, item, token: publish_token },
                );
                self.imm_offer_to_residents(at, market, &p.item);
            }
            self.finish_publish_if_done(at, market, publish_token);
        }
    }

    pub(crate) fn on_store_nack_imm(
        &mut self,
        at: DeviceId,
        market: MarketId,
        token: u64,
        host: DeviceId,
        free: u64,
    ) {
        let pending = {
            let Some(st) = self.imm_mut(at, market) else { return };
            st.capacity_table.insert(host, free);
            st.pending_stores.remove(&token)
        };
        if let Some(p) = pending {
            self.retry_pending(at, market, p);
        }
    }

    /// Store command unanswered: treat the host as gone, retry elsewhere.
    pub(crate) fn on_store_check(&mut self, d: DeviceId, market: MarketId, epoch: u64, token: u64) {
        if self.imm_key_of(d, market).map(|k| k.epoch) != Some(epoch) {
            return;
        }
        let pending = {
            let st = self.imm_mut(d, market).expect("guarded");
            match st.pending_stores.remove(&token) {
                Some(p) => {
                    st.capacity_table.remove(&p.host);
                    Some(p)
                }
                None => None,
            }
        };
        if let Some(p) = pending {
            self.retry_pending(d, market, p);
        }
    }

    fn retry_pending(&mut self, d: DeviceId, market: MarketId, p: PendingStore) {
        match p.origin {
            StoreOrigin::Publish { publish_token } => {
                let exclude = self.current_hosts(d, market, p.item.id);
                let placed = self.dispatch_store(
                    d,
                    market,
                    p.item.clone(),
                    p.replica,
                    StoreOrigin::Publish { publish_token },
                    &exclude,
                    p.tried,
                );
                if !placed {
                    let refused = {
                        let st = self.imm_mut(d, market).expect("live");
                        if let Some(prog) = st.pending_publishes.get_mut(&publish_token) {
                            prog.outstanding = prog.outstanding.saturating_sub(1);
                        }
                        false
                    };
                    let _ = refused;
                    self.finish_publish_if_done(d, market, publish_token);
                }
            }
            StoreOrigin::Repair => {
                let placed = self.start_repair(d, market, p.item.id, &p.tried);
                if !placed {
                    self.rec(Record::RepairDeferred { market, item: p.item.id });
                }
            }
            StoreOrigin::Return => {
                let exclude = self.current_hosts(d, market, p.item.id);
                let placed = self.dispatch_store(
                    d,
                    market,
                    p.item.clone(),
                    p.replica,
                    StoreOrigin::Return,
                    &exclude,
                    p.tried,
                );
                if !placed {
                    self.copy_created(p.item.id);
                    let st = self.imm_mut(d, market).expect("live");
                    st.return_buffer.push((p.item, p.replica));
                }
            }
        }
    }

    fn finish_publish_if_done(&mut self, d: DeviceId, market: MarketId, publish_token: u64) {
        let done = {
            let Some(st) = self.imm_mut(d, market) else { return };
            match st.pending_publishes.get(&publish_token) {
                Some(prog) if prog.outstanding == 0 => st.pending_publishes.remove(&publish_token),
                _ => None,
            }
        };
        if let Some(prog) = done {
            if !prog.any_stored {
                self.written_off.insert(prog.item.id);
                self.rec(Record::PublishRefused {
                    item: prog.item.id,
                    reason: "no_capacity",
                });
                self.send_publisher_response(
                    d,
                    prog.publisher,
                    Payload::PublishNack {
                        publisher: prog.publisher,
                        item: prog.item.id,
                        token: publish_token,
                        reason: "no_capacity",
                    },
                );
            }
        }
    }

    /// Route an ack or nack back toward the publisher's predicted position.
    pub(crate) fn send_publisher_response(&mut self, d: DeviceId, publisher: DeviceId, payload: Payload) {
        if publisher == d {
            let id = self.fresh_msg_id();
            self.handle_payload(d, d, id, payload);
            return;
        }
        let here = self.world.position(d);
        let rough = self.world.predict_position(publisher, self.now()).0;
        let eta = self.travel_estimate(here, rough);
        let point = self.world.predict_position(publisher, self.now().plus(eta)).0;
        let radius = self.world.radio_range();
        self.geo_send(d, crate::transport::GeoTarget { point, radius }, payload);
    }

    /// Hop-count based travel time estimate for rendezvous planning.
    pub(crate) fn travel_estimate(&self, from: crate::world::Position, to: crate::world::Position) -> u64 {
        let hops = (from.dist(to) / self.world.radio_range()).ceil() as u64;
        hops * self.cfg.hop_latency
    }

    // ------------------------------------------------------------------
    // Sign-off, returns, census replies

    pub(crate) fn on_sign_off_imm(
        &mut self,
        at: DeviceId,
        market: MarketId,
        leaver: DeviceId,
        replicas: Vec<ItemId>,
        _reason: SignOffReason,
    ) {
        let registry_touched: Vec<(ItemId, u32, Vec<DeviceId>)> = {
            let Some(st) = self.imm_mut(at, market) else { return };
            st.capacity_table.remove(&leaver);
            st.hb_awaiting.remove(&leaver);
            for hosts in st.assignment_map.values_mut() {
                hosts.remove(&leaver);
            }
            let mut touched = Vec::new();
            for (item, entry) in st.replica_registry.iter_mut() {
                if entry.hosts.remove(&leaver) {
                    touched.push((*item, entry.degree, entry.hosts.iter().copied().collect()));
                }
            }
            touched
        };
        for (item, degree, hosts) in &registry_touched {
            self.rec(Record::RegistryUpdate {
                market,
                by: at,
                item: *item,
                degree: *degree,
                hosts: hosts.clone(),
            });
        }
        if self.cfg.strategy == crate::scenario::ReplicationStrategy::SignOff {
            for item in replicas {
                let has_deficit = {
                    let st = self.imm_ref(at, market).expect("live");
                    st.replica_registry
                        .get(&item)
                        .map(|e| (e.hosts.len() as u32) < e.degree && !e.hosts.is_empty())
                        .unwrap_or(false)
                };
                let already_pending = self.pending_items(at, market).contains(&item);
                if has_deficit && !already_pending {
                    if !self.start_repair(at, market, item, &BTreeSet::new()) {
                        self.rec(Record::RepairDeferred { market, item });
                    }
                }
            }
        }
    }

    fn pending_items(&self, d: DeviceId, market: MarketId) -> BTreeSet<ItemId> {
        self.imm_ref(d, market)
            .map(|st| st.pending_stores.values().map(|p| p.item.id).collect())
            .unwrap_or_default()
    }

    pub(crate) fn on_item_return_imm(
        &mut self,
        at: DeviceId,
        market: MarketId,
        leaver: DeviceId,
        items: Vec<(crate::broker::InfoItem, bool)>,
    ) {
        let now = self.now();
        {
            let Some(st) = self.imm_mut(at, market) else {
                // Not the IMM anymore: the payload was re-routed by imm_payload.
                return;
            };
            st.capacity_table.remove(&leaver);
        }
        for (item, _was_replica) in items {
            let id = item.id;
            self.copy_destroyed(id, None); // return bundle consumed
            let registry_state = {
                let st = self.imm_mut(at, market).expect("live");
                if let Some(hosts) = st.assignment_map.get_mut(&id) {
                    hosts.remove(&leaver);
                }
                if let Some(e) = st.replica_registry.get_mut(&id) {
                    e.hosts.remove(&leaver);
                    Some((e.degree, e.hosts.iter().copied().collect::<Vec<_>>()))
                } else {
                    None
                }
            };
            if let Some((degree, hosts)) = &registry_state {
                self.rec(Record::RegistryUpdate {
                    market,
                    by: at,
                    item: id,
                    degree: *degree,
                    hosts: hosts.clone(),
                });
            }
            if item.expired(now) {
                self.rec(Record::ItemDiscarded { item: id, reason: "expired" });
                continue;
            }
            {
                let st = self.imm_mut(at, market).expect("live");
                st.item_meta.entry(id).or_insert_with(|| item.meta_only());
                st.assignment_map.entry(id).or_default();
                st.type_index = st.recount_type_index();
            }
            let needed = {
                let st = self.imm_ref(at, market).expect("live");
                if item.replication_degree > 1 {
                    st.replica_registry
                        .get(&id)
                        .map(|e| (e.hosts.len() as u32) < e.degree)
                        .unwrap_or(true)
                } else {
                    st.assignment_map.get(&id).map(|h| h.is_empty()).unwrap_or(true)
                }
            };
            if !needed {
                self.rec(Record::ItemDiscarded { item: id, reason: "surplus" });
                continue;
            }
            let mut exclude = self.current_hosts(at, market, id);
            exclude.insert(leaver);
            let replica = item.replication_degree > 1;
            if !self.dispatch_store(
                at,
                market,
                item.clone(),
                replica,
                StoreOrigin::Return,
                &exclude,
                BTreeSet::new(),
            ) {
                self.copy_created(id);
                self.rec(Record::RepairDeferred { market, item: id });
                let st = self.imm_mut(at, market).expect("live");
                st.return_buffer.push((item, replica));
            }
        }
    }

    pub(crate) fn on_census_reply_imm(
        &mut self,
        at: DeviceId,
        market: MarketId,
        device: DeviceId,
        free: u64,
        holdings: Vec<(crate::broker::InfoItem, bool)>,
    ) {
        let registry_touched: Vec<(ItemId, u32, Vec<DeviceId>)> = {
            let Some(st) = self.imm_mut(at, market) else { return };
            st.capacity_table.insert(device, free);
            let mut touched = Vec::new();
            for (meta, replica) in holdings {
                let id = meta.id;
                let degree = meta.replication_degree;
                st.assignment_map.entry(id).or_default().insert(device);
                st.item_meta.entry(id).or_insert(meta);
                if replica {
                    let e = st
                        .replica_registry
                        .entry(id)
                        .or_insert_with(|| ReplicaEntry { degree, hosts: BTreeSet::new() });
                    if e.hosts.insert(device) {
                        touched.push((id, e.degree, e.hosts.iter().copied().collect()));
                    }
                }
            }
            st.type_index = st.recount_type_index();
            touched
        };
        for (item, degree, hosts) in registry_touched {
            self.rec(Record::RegistryUpdate { market, by: at, item, degree, hosts });
        }
    }

    // ------------------------------------------------------------------
    // Replication maintenance

    /// Re-establish one missing copy from a surviving host. Returns false when
    /// no survivor or no candidate host exists.
    fn start_repair(
        &mut self,
        d: DeviceId,
        market: MarketId,
        item: ItemId,
        extra_tried: &BTreeSet<DeviceId>,
    ) -> bool {
        let plan = {
            let Some(st) = self.imm_ref(d, market) else { return false };
            let Some(entry) = st.replica_registry.get(&item) else { return false };
            let Some(meta) = st.item_meta.get(&item) else { return false };
            let Some(via) = entry.hosts.iter().next().copied() else { return false };
            let mut exclude: BTreeSet<DeviceId> = entry.hosts.clone();
            exclude.extend(extra_tried.iter().copied());
            let new_host = choose_hosts(&st.capacity_table, &exclude, meta.size, 1)
                .first()
                .copied();
            new_host.map(|h| (via, h, meta.size))
        };
        let Some((via, new_host, size)) = plan else { return false };
        let key = self.imm_key_of(d, market).expect("live");
        let token = self.fresh_token();
        // Repair spans three legs (command, copy, ack): allow twice the
        // ordinary window before retrying.
        let deadline = self.now().plus(2 * self.cfg.ack_window());
        {
            let st = self.imm_mut(d, market).expect("live");
            if let Some(free) = st.capacity_table.get_mut(&new_host) {
                *free = free.saturating_sub(size);
            }
            let meta = st.item_meta.get(&item).cloned().expect("checked");
            let mut tried = extra_tried.clone();
            tried.insert(new_host);
            st.pending_stores.insert(
                token,
                PendingStore {
                    item: meta,
                    replica: true,
                    host: new_host,
                    deadline,
                    tried,
                    origin: StoreOrigin::Repair,
                },
            );
        }
        self.kernel
            .schedule(
                deadline,
                Event::Timer(TimerKind::StoreCheck {
                    device: d,
                    market,
                    epoch: key.epoch,
                    token,
                }),
            )
            .expect("future");
        self.rec(Record::RepairStarted { market, by: d, item, via, to: new_host });
        self.market_send(
            d,
            market,
            via,
            Payload::RepairCmd { market, item, new_host, ack_to: key, token },
        );
        true
    }

    /// Survivor side of a repair: clone the stored copy to the new host.
    pub(crate) fn on_repair_cmd(
        &mut self,
        at: DeviceId,
        market: MarketId,
        item: ItemId,
        new_host: DeviceId,
        ack_to: ImmKey,
        token: u64,
    ) {
        self.cache_update(at, market, ack_to);
        let copy = {
            let dev = &self.devices[at.index()];
            dev.store
                .get(item)
                .filter(|s| !s.item.expired(self.now()))
                .map(|s| s.item.clone())
        };
        let Some(copy) = copy else {
            return; // silence; the IMM retries with another survivor
        };
        self.copy_created(item);
        self.market_send(
            at,
            market,
            new_host,
            Payload::StoreCmd {
                market,
                item: copy,
                replica: true,
                ack_to,
                token,
            },
        );
    }

    pub(crate) fn on_heartbeat_round(&mut self, d: DeviceId, market: MarketId, epoch: u64) {
        if self.imm_key_of(d, market).map(|k| k.epoch) != Some(epoch) {
            return;
        }
        self.kernel.schedule_in(
            self.cfg.t_heartbeat,
            Event::Timer(TimerKind::HeartbeatRound { device: d, market, epoch }),
        );
        let census_pending = self.imm_ref(d, market).expect("guarded").census_until.is_some();
        if census_pending {
            return;
        }
        let key = self.imm_key_of(d, market).expect("guarded");
        let (round, hosts) = {
            let st = self.imm_mut(d, market).expect("guarded");
            st.hb_round += 1;
            let round = st.hb_round;
            let hosts: BTreeSet<DeviceId> = st
                .replica_registry
                .values()
                .flat_map(|e| e.hosts.iter().copied())
                .filter(|h| *h != d)
                .collect();
            st.hb_awaiting = hosts.iter().map(|h| (*h, round)).collect();
            (round, hosts)
        };
        if hosts.is_empty() {
            return;
        }
        for h in hosts {
            self.market_send(
                d,
                market,
                h,
                Payload::HeartbeatPing { market, imm: key, round },
            );
        }
        self.kernel.schedule_in(
            self.cfg.ack_window(),
            Event::Timer(TimerKind::HeartbeatCheck { device: d, market, epoch, round }),
        );
    }

    pub(crate) fn on_heartbeat_ping(&mut self, at: DeviceId, market: MarketId, key: ImmKey, round: u64) {
        self.imm_learned_peer(at, market, key);
        let free = self.free_capacity_of(at);
        self.market_send(
            at,
            market,
            key.device,
            Payload::HeartbeatAck { market, device: at, free, round },
        );
    }

    /// Hosts that did not ack the round are dead: purge them and repair every
    /// deficit that still has a surviving copy.
    pub(crate) fn on_heartbeat_check(
        &mut self,
        d: DeviceId,
        market: MarketId,
        epoch: u64,
        round: u64,
    ) {
        if self.imm_key_of(d, market).map(|k| k.epoch) != Some(epoch) {
            return;
        }
        let (dead, registry_touched) = {
            let st = self.imm_mut(d, market).expect("guarded");
            let dead: Vec<DeviceId> = st
                .hb_awaiting
                .iter()
                .filter(|(_, r)| **r == round)
                .map(|(h, _)| *h)
                .collect();
            let mut touched = Vec::new();
            for x in &dead {
                st.hb_awaiting.remove(x);
                st.capacity_table.remove(x);
                for hosts in st.assignment_map.values_mut() {
                    hosts.remove(x);
                }
                for (item, e) in st.replica_registry.iter_mut() {
                    if e.hosts.remove(x) {
                        touched.push((*item, e.degree, e.hosts.iter().copied().collect::<Vec<_>>()));
                    }
                }
            }
            (dead, touched)
        };
        for (item, degree, hosts) in &registry_touched {
            self.rec(Record::RegistryUpdate {
                market,
                by: d,
                item: *item,
                degree: *degree,
                hosts: hosts.clone(),
            });
        }
        let _ = dead;
        // Repair every deficit with at least one survivor.
        let deficits: Vec<ItemId> = self
            .imm_ref(d, market)
            .map(|st| {
                st.replica_registry
                    .iter()
                    .filter(|(_, e)| (e.hosts.len() as u32) < e.degree && !e.hosts.is_empty())
                    .map(|(i, _)| *i)
                    .collect()
            })
            .unwrap_or_default();
        let pending = self.pending_items(d, market);
        for item in deficits {
            if pending.contains(&item) {
                continue;
            }
            if !self.start_repair(d, market, item, &BTreeSet::new()) {
                self.rec(Record::RepairDeferred { market, item });
            }
        }
    }

    // ------------------------------------------------------------------
    // Center seek and handoff

    pub(crate) fn on_center_seek(&mut self, d: DeviceId, market: MarketId, epoch: u64) {
        if self.imm_key_of(d, market).map(|k| k.epoch) != Some(epoch) {
            return;
        }
        self.kernel.schedule_in(
            self.cfg.t_center,
            Event::Timer(TimerKind::CenterSeek { device: d, market, epoch }),
        );
        if self.imm_ref(d, market).expect("guarded").census_until.is_some() {
            return;
        }
        let spec = self.markets[market.index()];
        let here = self.world.position(d);
        let horizon = self.now().plus(self.cfg.predict_horizon);
        let predicted = self.world.predict_position(d, horizon).0;
        let leaving = !spec.contains(predicted);
        let off_center = !spec.in_core(here);
        if !leaving && !off_center {
            return;
        }
        if let Some(next) = self.pick_center_candidate(d, market) {
            // Off-center alone only justifies a handoff that improves on the
            // current position; a predicted exit justifies any candidate.
            let improves = self.world.position(next).dist(spec.center) < here.dist(spec.center);
            if leaving || improves {
                self.imm_handoff_to(d, market, next);
            }
        }
    }

    /// The in-market member nearest the center with free capacity reported.
    fn pick_center_candidate(&self, d: DeviceId, market: MarketId) -> Option<DeviceId> {
        let st = self.imm_ref(d, market)?;
        let spec = self.markets[market.index()];
        let mut best: Option<(f64, DeviceId)> = None;
        for (&cand, &free) in &st.capacity_table {
            if cand == d || free == 0 {
                continue;
            }
            let dev = &self.devices[cand.index()];
            if !dev.online || dev.member_of != Some(market) {
                continue;
            }
            let pos = self.world.position(cand);
            if !spec.contains(pos) {
                continue;
            }
            let dist = pos.dist(spec.center);
            if best.map_or(true, |(bd, bid)| dist < bd || (dist == bd && cand < bid)) {
                best = Some((dist, cand));
            }
        }
        best.map(|(_, c)| c)
    }

    fn imm_handoff_to(&mut self, d: DeviceId, market: MarketId, to: DeviceId) {
        let inst = self.devices[d.index()].imm.take().expect("live imm");
        let old_epoch = inst.st.epoch;
        let new_epoch = old_epoch + 1;
        let state_items = inst.st.assignment_map.len() as u64;
        self.rec(Record::ImmHandoffSent {
            market,
            from: d,
            to,
            epoch: new_epoch,
            state_items,
        });
        self.rec(Record::ImmDeactivated {
            market,
            device: d,
            epoch: old_epoch,
            reason: ImmEndReason::Handoff,
        });
        self.devices[d.index()]
            .imm_cache
            .insert(market, ImmKey { epoch: new_epoch, device: to });
        self.refresh_role(d);
        self.market_send(
            d,
            market,
            to,
            Payload::ImmHandoff {
                market,
                epoch: new_epoch,
                state: Box::new(inst.st),
            },
        );
    }

    /// An IMM leaving the market (or shutting down) hands the role to a member
    /// in radio range; without one the state dies and disaster recovery will
    /// rebuild it later.
    pub(crate) fn imm_exit_handoff(&mut self, d: DeviceId, market: MarketId) {
        if self.imm_ref(d, market).is_none() {
            return;
        }
        let spec = self.markets[market.index()];
        let candidate = {
            let st = self.imm_ref(d, market).expect("checked");
            let mut best: Option<(f64, DeviceId)> = None;
            for (&cand, _) in &st.capacity_table {
                if cand == d {
                    continue;
                }
                let dev = &self.devices[cand.index()];
                if !dev.online || dev.member_of != Some(market) {
                    continue;
                }
                let pos = self.world.position(cand);
                if !spec.contains(pos) || !self.world.are_neighbors(d, cand) {
                    continue;
                }
                let dist = pos.dist(spec.center);
                if best.map_or(true, |(bd, bid)| dist < bd || (dist == bd && cand < bid)) {
                    best = Some((dist, cand));
                }
            }
            best.map(|(_, c)| c)
        };
        match candidate {
            Some(next) => self.imm_handoff_to(d, market, next),
            None => {
                let inst = self.devices[d.index()].imm.take().expect("checked");
                self.rec(Record::ImmDeactivated {
                    market,
                    device: d,
                    epoch: inst.st.epoch,
                    reason: ImmEndReason::Exit,
                });
                self.refresh_role(d);
            }
        }
    }

    pub(crate) fn on_imm_handoff(&mut self, at: DeviceId, market: MarketId, epoch: u64, state: ImmState) {
        self.cache_update(at, market, ImmKey { epoch, device: at });
        if !self.markets[market.index()].contains(self.world.position(at)) {
            self.rec(Record::ImmDeactivated {
                market,
                device: at,
                epoch,
                reason: ImmEndReason::Exit,
            });
            return;
        }
        if self.devices[at.index()].imm_market() == Some(market) {
            // Raced with a self-created instance: merge, keep the higher epoch.
            let bump = {
                let st = self.imm_mut(at, market).expect("live");
                epoch > st.epoch
            };
            self.merge_imm_states(at, market, state);
            if bump {
                let st = self.imm_mut(at, market).expect("live");
                st.epoch = epoch;
            }
            let key = self.imm_key_of(at, market).expect("live");
            self.cache_update(at, market, key);
            return;
        }
        let mut st = state;
        st.epoch = epoch;
        let free = self.free_capacity_of(at);
        st.capacity_table.insert(at, free);
        self.devices[at.index()].member_of = Some(market);
        self.devices[at.index()].imm = Some(ImmInstance { market, st });
        self.rec(Record::ImmCreated {
            market,
            device: at,
            epoch,
            reason: ImmCreateReason::Handoff,
        });
        self.refresh_role(at);
        let key = ImmKey { epoch, device: at };
        self.flood_from(
            at,
            FloodScope::Region(market),
            self.cfg.flood_ttl,
            Addressee::All,
            Payload::ImmAnnounce { market, imm: key },
        );
        self.reschedule_imm_timers(at, market);
        let census_done = self.imm_ref(at, market).expect("live").census_until.is_none();
        if census_done {
            let inbox = {
                let st = self.imm_mut(at, market).expect("live");
                std::mem::take(&mut st.inbox)
            };
            for (_, p) in inbox {
                self.handle_imm_now(at, market, p);
            }
        }
    }

    pub(crate) fn on_state_transfer_imm(&mut self, at: DeviceId, market: MarketId, state: ImmState) {
        self.merge_imm_states(at, market, state);
        if let Some(key) = self.imm_key_of(at, market) {
            self.flood_from(
                at,
                FloodScope::Region(market),
                self.cfg.flood_ttl,
                Addressee::All,
                Payload::ImmAnnounce { market, imm: key },
            );
        }
    }

    /// Fold a transferred or handed-off state into the live instance. Replica
    /// overshoot from merged host sets is trimmed with drop commands.
    fn merge_imm_states(&mut self, at: DeviceId, market: MarketId, incoming: ImmState) {
        let mut drops: BTreeMap<DeviceId, Vec<ItemId>> = BTreeMap::new();
        let mut adopted_pendings: Vec<(u64, SimTime)> = Vec::new();
        let mut adopted_residencies: Vec<(crate::ids::QueryId, SimTime)> = Vec::new();
        let mut inbox_ready = Vec::new();
        {
            let Some(st) = self.imm_mut(at, market) else { return };
            for (dev, free) in incoming.capacity_table {
                st.capacity_table.entry(dev).or_insert(free);
            }
            for (item, meta) in incoming.item_meta {
                st.item_meta.entry(item).or_insert(meta);
            }
            for (item, hosts) in incoming.assignment_map {
                st.assignment_map.entry(item).or_default().extend(hosts);
            }
            for (item, entry) in incoming.replica_registry {
                let e = st
                    .replica_registry
                    .entry(item)
                    .or_insert_with(|| ReplicaEntry {
                        degree: entry.degree,
                        hosts: BTreeSet::new(),
                    });
                e.degree = e.degree.max(entry.degree);
                e.hosts.extend(entry.hosts);
            }
            // Trim overshoot: keep the lowest-id hosts up to the degree.
            for (item, e) in st.replica_registry.iter_mut() {
                while e.hosts.len() as u32 > e.degree {
                    let excess = *e.hosts.iter().next_back().expect("non-empty");
                    e.hosts.remove(&excess);
                    if let Some(hosts) = st.assignment_map.get_mut(item) {
                        hosts.remove(&excess);
                    }
                    drops.entry(excess).or_default().push(*item);
                }
            }
            for (token, p) in incoming.pending_stores {
                adopted_pendings.push((token, p.deadline));
                st.pending_stores.insert(token, p);
            }
            for (token, prog) in incoming.pending_publishes {
                st.pending_publishes.entry(token).or_insert(prog);
            }
            for (qid, r) in incoming.resident {
                adopted_residencies.push((qid, r.expires));
                st.resident.entry(qid).or_insert(r);
            }
            st.return_buffer.extend(incoming.return_buffer);
            if st.census_until.is_none() {
                inbox_ready = incoming.inbox;
            } else {
                st.inbox.extend(incoming.inbox);
            }
            st.type_index = st.recount_type_index();
        }
        let epoch = self.imm_ref(at, market).expect("live").epoch;
        let now = self.now();
        for (token, deadline) in adopted_pendings {
            let when = deadline.max(now);
            self.kernel
                .schedule(when, Event::Timer(TimerKind::StoreCheck { device: at, market, epoch, token }))
                .expect("future");
        }
        for (query, expires) in adopted_residencies {
            let when = expires.max(now);
            self.kernel
                .schedule(
                    when,
                    Event::Timer(TimerKind::ResidencyExpiry { device: at, market, epoch, query }),
                )
                .expect("future");
        }
        for (host, items) in drops {
            self.market_send(at, market, host, Payload::DropCmd { market, items });
        }
        for (_, p) in inbox_ready {
            self.handle_imm_now(at, market, p);
        }
    }

    fn reschedule_imm_timers(&mut self, at: DeviceId, market: MarketId) {
        let Some(st) = self.imm_ref(at, market) else { return };
        let epoch = st.epoch;
        let now = self.now();
        let census = st.census_until;
        let pendings: Vec<(u64, SimTime)> =
            st.pending_stores.iter().map(|(t, p)| (*t, p.deadline)).collect();
        let residencies: Vec<(crate::ids::QueryId, SimTime)> =
            st.resident.iter().map(|(q, r)| (*q, r.expires)).collect();
        self.kernel.schedule_in(
            self.cfg.t_center,
            Event::Timer(TimerKind::CenterSeek { device: at, market, epoch }),
        );
        if self.cfg.strategy == crate::scenario::ReplicationStrategy::Periodic {
            self.kernel.schedule_in(
                self.cfg.t_heartbeat,
                Event::Timer(TimerKind::HeartbeatRound { device: at, market, epoch }),
            );
        }
        if let Some(t) = census {
            self.kernel
                .schedule(t.max(now), Event::Timer(TimerKind::CensusDone { device: at, market, epoch }))
                .expect("future");
        }
        for (token, deadline) in pendings {
            self.kernel
                .schedule(
                    deadline.max(now),
                    Event::Timer(TimerKind::StoreCheck { device: at, market, epoch, token }),
                )
                .expect("future");
        }
        for (query, expires) in residencies {
            self.kernel
                .schedule(
                    expires.max(now),
                    Event::Timer(TimerKind::ResidencyExpiry { device: at, market, epoch, query }),
                )
                .expect("future");
        }
    }

    // ------------------------------------------------------------------
    // Host-side commands

    pub(crate) fn on_store_cmd(
        &mut self,
        at: DeviceId,
        market: MarketId,
        item: crate::broker::InfoItem,
        replica: bool,
        ack_to: ImmKey,
        token: u64,
    ) {
        self.cache_update(at, market, ack_to);
        let member = self.devices[at.index()].member_of == Some(market)
            || self.devices[at.index()].imm_market() == Some(market);
        if !member {
            let free = self.free_capacity_of(at);
            self.copy_destroyed(item.id, None);
            self.market_send(
                at,
                market,
                ack_to.device,
                Payload::StoreNack { market, token, host: at, free },
            );
            return;
        }
        let replaced = self.devices[at.index()].store.contains(item.id);
        let result = self.devices[at.index()].store.store(item.clone(), replica);
        match result {
            Ok(()) => {
                if replaced {
                    self.copy_destroyed(item.id, None);
                }
                self.rec(Record::ItemStored {
                    device: at,
                    item: item.id,
                    replica,
                    size: item.size,
                });
                self.refresh_role(at);
                let free = self.free_capacity_of(at);
                self.market_send(
                    at,
                    market,
                    ack_to.device,
                    Payload::StoreAck {
                        market,
                        token,
                        item: item.id,
                        replica,
                        host: at,
                        free,
                    },
                );
            }
            Err(_) => {
                self.copy_destroyed(item.id, None);
                let free = self.free_capacity_of(at);
                self.market_send(
                    at,
                    market,
                    ack_to.device,
                    Payload::StoreNack { market, token, host: at, free },
                );
            }
        }
    }

    pub(crate) fn on_drop_cmd(&mut self, at: DeviceId, _market: MarketId, items: Vec<ItemId>) {
        for item in items {
            if self.devices[at.index()].store.remove(item).is_some() {
                self.rec(Record::ItemRemoved {
                    device: at,
                    item,
                    reason: crate::trace::RemoveReason::DropCmd,
                });
                self.copy_destroyed(item, None);
            }
        }
        self.refresh_role(at);
    }

    // ------------------------------------------------------------------
    // Expiry bookkeeping on the IMM

    pub(crate) fn imm_expiry_purge(&mut self, d: DeviceId) {
        let Some(market) = self.devices[d.index()].imm_market() else {
            return;
        };
        let now = self.now();
        {
            let st = self.imm_mut(d, market).expect("live");
            let expired: Vec<ItemId> = st
                .item_meta
                .iter()
                .filter(|(_, m)| m.expired(now))
                .map(|(i, _)| *i)
                .collect();
            for item in expired {
                st.item_meta.remove(&item);
                st.assignment_map.remove(&item);
                st.replica_registry.remove(&item);
            }
            st.type_index = st.recount_type_index();
        }
        self.imm_retry_buffer(d, market);
    }

    /// Try to place buffered returned copies once capacity may have appeared.
    fn imm_retry_buffer(&mut self, d: DeviceId, market: MarketId) {
        if self.imm_ref(d, market).map(|st| st.return_buffer.is_empty()).unwrap_or(true) {
            return;
        }
        let buffer = {
            let st = self.imm_mut(d, market).expect("live");
            std::mem::take(&mut st.return_buffer)
        };
        let now = self.now();
        for (item, replica) in buffer {
            let id = item.id;
            if item.expired(now) {
                self.rec(Record::ItemDiscarded { item: id, reason: "expired" });
                self.copy_destroyed(id, None);
                continue;
            }
            let exclude = self.current_hosts(d, market, id);
            if self.dispatch_store(
                d,
                market,
                item.clone(),
                replica,
                StoreOrigin::Return,
                &exclude,
                BTreeSet::new(),
            ) {
                // The buffered copy became the dispatched command's copy.
                self.copy_destroyed(id, None);
            } else {
                let st = self.imm_mut(d, market).expect("live");
                st.return_buffer.push((item, replica));
            }
        }
    }
}

fn deferrable(p: &Payload) -> bool {
    matches!(
        p,
        Payload::PublishItem { .. }
            | Payload::ItemReturn { .. }
            | Payload::SignOff { .. }
            | Payload::AsyncQuery { .. }
    )
}

// pub(crate) access for sibling protocol modules
impl Simulation {
    pub(crate) fn imm_state_mut(&mut self, d: DeviceId, market: MarketId) -> Option<&mut ImmState> {
        self.imm_mut(d, market)
    }

    pub(crate) fn imm_state_ref(&self, d: DeviceId, market: MarketId) -> Option<&ImmState> {
        self.imm_ref(d, market)
    }

    pub(crate) fn imm_key_of_pub(&self, d: DeviceId, market: MarketId) -> Option<ImmKey> {
        self.imm_key_of(d, market)
    }
}

impl Simulation {
    pub(crate) fn dispatch_store_to_pub(
        &mut self,
        d: DeviceId,
        market: MarketId,
        item: crate::broker::InfoItem,
        replica: bool,
        host: DeviceId,
        origin: StoreOrigin,
    ) {
        self.dispatch_store_to(d, market, item, replica, host, origin, BTreeSet::new());
    }
}
