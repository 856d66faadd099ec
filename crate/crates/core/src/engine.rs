//! The simulation engine: per-device protocol state, the event loop, mobility
//! driven market crossings, fault injection, and the item-copy ledger behind
//! the loss accounting.
//!
//! One `Simulation` is one single-threaded event loop; independent instances
//! share nothing, so callers may run many in parallel.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::broker::{InfoItem, LocalStore};
use crate::ids::{DeviceId, ItemId, MarketId, MsgId, QueryId};
use crate::market::{ImmKey, ImmState, MarketSpec, Role};
use crate::query::{MarketKnowledge, SyncLocalQuery};
use crate::scenario::{self, ProtocolConfig, Scenario, ScenarioError, WorkloadEvent};
use crate::simkernel::{Kernel, RngHub, RngStream, SimTime};
use crate::trace::{
    DropReason, ImmEndReason, LossCause, Record, RemoveReason, SignOffReason, TraceLog,
};
use crate::transport::{Message, Payload, Route};
use crate::world::{Position, Snapshot, World};

#[derive(Clone, Debug)]
pub enum Event {
    /// Global mobility step plus boundary-crossing and carry maintenance.
    Tick,
    Deliver { to: DeviceId, msg: Message },
    Timer(TimerKind),
    Workload(usize),
}

#[derive(Clone, Debug)]
pub enum TimerKind {
    ProbeDeadline { device: DeviceId, token: u64 },
    CensusDone { device: DeviceId, market: MarketId, epoch: u64 },
    CenterSeek { device: DeviceId, market: MarketId, epoch: u64 },
    HeartbeatRound { device: DeviceId, market: MarketId, epoch: u64 },
    HeartbeatCheck { device: DeviceId, market: MarketId, epoch: u64, round: u64 },
    StoreCheck { device: DeviceId, market: MarketId, epoch: u64, token: u64 },
    ExpirySweep,
    SyncDeadline { device: DeviceId, query: QueryId },
    SyncFinalize { device: DeviceId, query: QueryId },
    ResidencyExpiry { device: DeviceId, market: MarketId, epoch: u64, query: QueryId },
    ChunkWait { device: DeviceId, token: u64 },
    InitiatorProbeDeadline { device: DeviceId, token: u64 },
    FlightCheck { msg: MsgId },
}

/// A geo message held in carry mode, re-evaluated on neighbor changes or every
/// carry period.
#[derive(Clone, Debug)]
pub(crate) struct Carried {
    pub msg: Message,
    pub next_eval: SimTime,
    pub nb_hash: u64,
}

/// Outstanding IMM probe: queued payloads are forwarded once the IMM answers,
/// or handled locally after the probing device becomes the IMM itself.
#[derive(Clone, Debug)]
pub(crate) struct ProbeWait {
    pub token: u64,
    pub market: MarketId,
    pub join: bool,
    pub queued: Vec<Payload>,
}

#[derive(Clone, Debug)]
pub(crate) struct SyncPending {
    pub deadline: SimTime,
    pub merged: BTreeMap<ItemId, InfoItem>,
}

/// Initiator-side collection state of an async query.
#[derive(Clone, Debug, Default)]
pub struct AsyncRecv {
    pub items: BTreeMap<ItemId, InfoItem>,
    pub chunks_seen: BTreeSet<u32>,
    pub final_seen: bool,
}

/// A result chunk held while probing the rendezvous area for the initiator.
#[derive(Clone, Debug)]
pub(crate) struct ChunkProbe {
    pub token: u64,
    pub msg: Message,
}

/// A result chunk parked until the itinerary says the initiator is due.
#[derive(Clone, Debug)]
pub(crate) struct WaitingChunk {
    pub token: u64,
    pub msg: Message,
}

/// An open custodial flood: items whose only copy rides in a flood that could
/// die without an explicit drop event.
#[derive(Clone, Debug)]
pub(crate) struct CustodialFlight {
    pub origin: DeviceId,
    pub items: Vec<ItemId>,
    /// Publish/return payloads are re-injected toward their market when the
    /// flood evaporates; store commands are retried by the IMM instead.
    pub reinject: Option<(MarketId, Payload)>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Provenance {
    Config,
    Response,
}

pub(crate) struct ImmInstance {
    pub market: MarketId,
    pub st: ImmState,
}

pub(crate) struct Device {
    pub id: DeviceId,
    pub store: LocalStore,
    pub online: bool,
    pub crashed: bool,
    pub member_of: Option<MarketId>,
    pub imm: Option<ImmInstance>,
    /// Newest IMM identity seen per market (epoch-monotone).
    pub imm_cache: BTreeMap<MarketId, ImmKey>,
    /// Known-markets directory.
    pub knowledge: BTreeMap<MarketId, MarketKnowledge>,
    pub provenance: BTreeMap<MarketId, Provenance>,
    /// Flood duplicate suppression.
    pub seen: HashSet<MsgId>,
    pub carried: Vec<Carried>,
    pub waits: Vec<ProbeWait>,
    pub sync_pending: BTreeMap<QueryId, SyncPending>,
    pub sync_results: BTreeMap<QueryId, Vec<InfoItem>>,
    pub async_recv: BTreeMap<QueryId, AsyncRecv>,
    pub chunk_probes: Vec<ChunkProbe>,
    pub waiting_chunks: Vec<WaitingChunk>,
    pub role: Role,
}

impl Device {
    fn new(id: DeviceId, capacity: u64) -> Self {
        Device {
            id,
            store: LocalStore::new(capacity),
            online: true,
            crashed: false,
            member_of: None,
            imm: None,
            imm_cache: BTreeMap::new(),
            knowledge: BTreeMap::new(),
            provenance: BTreeMap::new(),
            seen: HashSet::new(),
            carried: Vec::new(),
            waits: Vec::new(),
            sync_pending: BTreeMap::new(),
            sync_results: BTreeMap::new(),
            async_recv: BTreeMap::new(),
            chunk_probes: Vec::new(),
            waiting_chunks: Vec::new(),
            role: Role::Outside,
        }
    }

    pub(crate) fn imm_market(&self) -> Option<MarketId> {
        self.imm.as_ref().map(|i| i.market)
    }
}

/// Counts of everything still pending; all-zero means the protocol is idle
/// apart from periodic timers and resident queries.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct Activity {
    pub in_flight_msgs: u64,
    pub carried_msgs: u64,
    pub probe_waits: u64,
    pub pending_stores: u64,
    pub imm_inbox: u64,
    pub chunk_probes: u64,
    pub waiting_chunks: u64,
    pub resident_queries: u64,
}

pub struct Simulation {
    pub(crate) kernel: Kernel<Event>,
    pub(crate) rng: RngHub,
    pub(crate) world: World,
    pub(crate) cfg: ProtocolConfig,
    pub(crate) horizon: SimTime,
    pub(crate) markets: Vec<MarketSpec>,
    pub(crate) devices: Vec<Device>,
    pub(crate) trace: TraceLog,
    workload: Vec<(SimTime, WorkloadEvent)>,
    pub(crate) next_msg: u64,
    pub(crate) next_token: u64,
    pub(crate) in_flight: u64,
    pub(crate) custodial_flights: BTreeMap<MsgId, CustodialFlight>,
    /// Live copies per item: device stores + custodial messages + IMM buffers.
    copies: BTreeMap<ItemId, i64>,
    pub(crate) acked: BTreeSet<ItemId>,
    lost: BTreeSet<ItemId>,
    /// Items whose publish ended in an explicit refusal; their copy teardown
    /// is not a loss.
    pub(crate) written_off: BTreeSet<ItemId>,
}

impl Simulation {
    pub fn from_scenario(sc: &Scenario, seed_override: Option<u64>) -> Result<Self, ScenarioError> {
        let resolved = scenario::resolve(sc)?;
        let seed = seed_override.unwrap_or(sc.seed);
        let mut world = World::new(
            crate::world::Bounds {
                width: sc.world_width,
                height: sc.world_height,
            },
            sc.radio_range,
        );
        let mut devices = Vec::new();
        for (i, rd) in resolved.devices.iter().enumerate() {
            let id = world.add_device(rd.position, rd.mobility.clone());
            debug_assert_eq!(id, DeviceId(i as u32));
            let mut dev = Device::new(id, rd.capacity);
            for m in &rd.knows {
                let spec = resolved.markets[m.index()];
                dev.knowledge.insert(
                    *m,
                    MarketKnowledge {
                        market: *m,
                        center: spec.center,
                        radius: spec.radius,
                        core_radius: spec.core_radius,
                        types: BTreeMap::new(),
                        as_of: SimTime::ZERO,
                    },
                );
                dev.provenance.insert(*m, Provenance::Config);
            }
            devices.push(dev);
        }
        let trace = TraceLog::new(
            resolved.device_names,
            resolved.market_names,
            resolved.item_names,
        );
        let mut sim = Simulation {
            kernel: Kernel::new(),
            rng: RngHub::new(seed),
            world,
            cfg: sc.params.clone(),
            horizon: SimTime(sc.horizon),
            markets: resolved.markets,
            devices,
            trace,
            workload: resolved.workload,
            next_msg: 0,
            next_token: 0,
            in_flight: 0,
            custodial_flights: BTreeMap::new(),
            copies: BTreeMap::new(),
            acked: BTreeSet::new(),
            lost: BTreeSet::new(),
            written_off: BTreeSet::new(),
        };
        sim.kernel.schedule_in(1, Event::Tick);
        sim.kernel
            .schedule_in(sim.cfg.expiry_sweep, Event::Timer(TimerKind::ExpirySweep));
        for (i, (at, _)) in sim.workload.iter().enumerate() {
            sim.kernel
                .schedule(*at, Event::Workload(i))
                .expect("workload in the future");
        }
        // Devices starting inside a market join at t=0.
        for i in 0..sim.devices.len() {
            let d = DeviceId(i as u32);
            let pos = sim.world.position(d);
            if let Some(m) = sim.market_at(pos) {
                sim.enter_market(d, m);
            }
        }
        Ok(sim)
    }

    // ------------------------------------------------------------------
    // Run control

    pub fn run(&mut self) {
        let horizon = self.horizon;
        self.run_until(horizon);
    }

    /// Fire all events with time <= t, then advance the clock to t.
    pub fn run_until(&mut self, t: SimTime) {
        while let Some((_, ev)) = self.kernel.pop_due(t) {
            self.dispatch(ev);
        }
        self.kernel
            .advance_clock(t)
            .expect("run_until target behind clock");
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Tick => self.do_tick(),
            Event::Deliver { to, msg } => {
                self.in_flight -= 1;
                self.deliver(to, msg);
            }
            Event::Timer(t) => self.handle_timer(t),
            Event::Workload(i) => self.run_workload(i),
        }
    }

    fn deliver(&mut self, to: DeviceId, msg: Message) {
        if !self.devices[to.index()].online {
            self.drop_msg(to, &msg, DropReason::OfflineReceiver);
            return;
        }
        self.rec(Record::MsgDeliver {
            msg: msg.id,
            kind: msg.payload.kind(),
            at: to,
            from: msg.src,
            hops: msg.hops,
        });
        match msg.route {
            Route::Unicast { .. } => {
                let payload = msg.payload.clone();
                self.handle_payload(to, msg.src, msg.id, payload);
            }
            Route::Flood { .. } => self.flood_receive(to, msg),
            Route::Geo { .. } => self.geo_step(to, msg),
            Route::Chain { .. } => self.chain_receive(to, msg),
        }
    }

    fn do_tick(&mut self) {
        let now = self.kernel.now();
        self.world.step_mobility(now, 1, self.rng.stream(RngStream::Mobility));
        for i in 0..self.devices.len() {
            let d = DeviceId(i as u32);
            if !self.devices[i].online {
                continue;
            }
            let pos = self.world.position(d);
            if let Some(m) = self.devices[i].member_of {
                if !self.markets[m.index()].contains(pos) {
                    self.leave_market(d, m);
                }
            }
            // Probe waits for markets the device wandered out of: dissolve
            // them and send queued payloads back toward the market.
            let stale: Vec<ProbeWait> = {
                let dev = &mut self.devices[i];
                let markets = &self.markets;
                let (stale, keep): (Vec<_>, Vec<_>) = dev
                    .waits
                    .drain(..)
                    .partition(|w| !markets[w.market.index()].contains(pos));
                dev.waits = keep;
                stale
            };
            for w in stale {
                for p in w.queued {
                    self.geo_send_to_market(d, w.market, p);
                }
            }
            if self.devices[i].member_of.is_none() {
                if let Some(m) = self.market_at(pos) {
                    let probing = self.devices[i].waits.iter().any(|w| w.market == m);
                    if !probing {
                        self.enter_market(d, m);
                    }
                }
            }
        }
        for i in 0..self.devices.len() {
            if self.devices[i].online {
                self.carry_tick(DeviceId(i as u32));
            }
        }
        self.kernel.schedule_in(1, Event::Tick);
    }

    fn handle_timer(&mut self, t: TimerKind) {
        match t {
            TimerKind::ProbeDeadline { device, token } => self.on_probe_deadline(device, token),
            TimerKind::CensusDone { device, market, epoch } => {
                self.on_census_done(device, market, epoch)
            }
            TimerKind::CenterSeek { device, market, epoch } => {
                self.on_center_seek(device, market, epoch)
            }
            TimerKind::HeartbeatRound { device, market, epoch } => {
                self.on_heartbeat_round(device, market, epoch)
            }
            TimerKind::HeartbeatCheck { device, market, epoch, round } => {
                self.on_heartbeat_check(device, market, epoch, round)
            }
            TimerKind::StoreCheck { device, market, epoch, token } => {
                self.on_store_check(device, market, epoch, token)
            }
            TimerKind::ExpirySweep => self.on_expiry_sweep(),
            TimerKind::SyncDeadline { device, query } => self.on_sync_deadline(device, query),
            TimerKind::SyncFinalize { device, query } => self.on_sync_finalize(device, query),
            TimerKind::ResidencyExpiry { device, market, epoch, query } => {
                self.on_residency_expiry(device, market, epoch, query)
            }
            TimerKind::ChunkWait { device, token } => self.on_chunk_wait(device, token),
            TimerKind::InitiatorProbeDeadline { device, token } => {
                self.on_initiator_probe_deadline(device, token)
            }
            TimerKind::FlightCheck { msg } => {
                if let Some(flight) = self.custodial_flights.remove(&msg) {
                    match flight.reinject {
                        // The addressed flood died en route; the origin still
                        // owns the custody and sends the payload back toward
                        // the market.
                        Some((market, payload)) if self.devices[flight.origin.index()].online => {
                            self.rec(Record::MsgDrop {
                                msg,
                                kind: payload.kind(),
                                at: flight.origin,
                                reason: DropReason::Evaporated,
                                items: flight.items,
                            });
                            self.geo_send_to_market(flight.origin, market, payload);
                        }
                        _ => {
                            for item in flight.items {
                                self.copy_destroyed(item, Some(LossCause::Evaporated));
                            }
                        }
                    }
                }
            }
        }
    }

    fn run_workload(&mut self, idx: usize) {
        let (_, ev) = self.workload[idx].clone();
        match ev {
            WorkloadEvent::Publish {
                device,
                item,
                type_tag,
                size,
                lifetime,
                degree,
                importance,
                policy,
            } => {
                if !self.devices[device.index()].online {
                    return;
                }
                let info = InfoItem {
                    id: item,
                    type_tag,
                    size,
                    created_at: self.now(),
                    lifetime,
                    replication_degree: degree,
                    importance,
                    origin_device: device,
                    payload: Vec::new(),
                };
                self.workload_publish(device, info, policy);
            }
            WorkloadEvent::SyncQuery { device, query, predicate, hops, timeout } => {
                if !self.devices[device.index()].online {
                    return;
                }
                self.run_sync_local(
                    device,
                    SyncLocalQuery {
                        id: query,
                        predicate,
                        hop_limit: hops,
                        timeout,
                    },
                );
            }
            WorkloadEvent::AsyncQuery { device, query, predicate, market, expect, active_for } => {
                if !self.devices[device.index()].online {
                    return;
                }
                self.launch_async_remote(device, query, predicate, market, expect, active_for);
            }
            WorkloadEvent::Crash { device } => self.crash_device(device),
            WorkloadEvent::Shutdown { device } => self.shutdown_device(device),
        }
    }

    // ------------------------------------------------------------------
    // Market crossings

    pub(crate) fn market_at(&self, pos: Position) -> Option<MarketId> {
        self.markets.iter().find(|m| m.contains(pos)).map(|m| m.id)
    }

    fn enter_market(&mut self, d: DeviceId, m: MarketId) {
        self.rec(Record::MarketEnter { device: d, market: m });
        self.need_imm(d, m, None, true);
    }

    fn leave_market(&mut self, d: DeviceId, m: MarketId) {
        self.rec(Record::MarketLeave { device: d, market: m });
        // A departing IMM hands its state to a member in radio range, or the
        // state dies with its departure and disaster recovery rebuilds it.
        if self.devices[d.index()].imm_market() == Some(m) {
            self.imm_exit_handoff(d, m);
        }
        self.emit_sign_off(d, m, SignOffReason::Leave);
        // Active devices transfer all assigned items back toward the market.
        if !self.devices[d.index()].store.is_empty() {
            let drained = self.devices[d.index()].store.drain_all();
            let mut items = Vec::new();
            for s in drained {
                self.rec(Record::ItemRemoved {
                    device: d,
                    item: s.item.id,
                    reason: RemoveReason::Transfer,
                });
                items.push((s.item, s.replica));
            }
            self.geo_send_to_market(d, m, Payload::ItemReturn { market: m, leaver: d, items });
        }
        self.devices[d.index()].member_of = None;
        self.refresh_role(d);
    }

    // ------------------------------------------------------------------
    // Faults

    pub(crate) fn crash_device(&mut self, d: DeviceId) {
        if !self.devices[d.index()].online {
            return;
        }
        let stored: Vec<ItemId> = self.devices[d.index()].store.iter().map(|s| s.item.id).collect();
        let carried_count = (self.devices[d.index()].carried.len()
            + self.devices[d.index()].chunk_probes.len()
            + self.devices[d.index()].waiting_chunks.len()) as u64;
        self.rec(Record::Crashed {
            device: d,
            stored: stored.clone(),
            carried_msgs: carried_count,
        });
        if let Some(inst) = &self.devices[d.index()].imm {
            let (market, epoch) = (inst.market, inst.st.epoch);
            self.rec(Record::ImmDeactivated {
                market,
                device: d,
                epoch,
                reason: ImmEndReason::Crash,
            });
        }
        self.devices[d.index()].online = false;
        self.devices[d.index()].crashed = true;
        self.devices[d.index()].member_of = None;
        self.devices[d.index()].imm = None;
        self.world.set_offline(d);

        for s in self.devices[d.index()].store.drain_all() {
            self.rec(Record::ItemRemoved {
                device: d,
                item: s.item.id,
                reason: RemoveReason::Crash,
            });
            self.copy_destroyed(s.item.id, Some(LossCause::CrashHolder));
        }
        for c in std::mem::take(&mut self.devices[d.index()].carried) {
            self.drop_msg(d, &c.msg, DropReason::HolderCrashed);
        }
        for p in std::mem::take(&mut self.devices[d.index()].chunk_probes) {
            self.drop_msg(d, &p.msg, DropReason::HolderCrashed);
        }
        for wc in std::mem::take(&mut self.devices[d.index()].waiting_chunks) {
            self.drop_msg(d, &wc.msg, DropReason::HolderCrashed);
        }
        for w in std::mem::take(&mut self.devices[d.index()].waits) {
            for p in w.queued {
                self.drop_payload(d, &p, DropReason::HolderCrashed);
            }
        }
        self.devices[d.index()].sync_pending.clear();
        self.refresh_role(d);
    }

    pub(crate) fn shutdown_device(&mut self, d: DeviceId) {
        if !self.devices[d.index()].online {
            return;
        }
        self.rec(Record::ShutdownDone { device: d });
        if let Some(m) = self.devices[d.index()].imm_market() {
            self.imm_exit_handoff(d, m);
        }
        if let Some(m) = self.devices[d.index()].member_of {
            self.emit_sign_off(d, m, SignOffReason::Shutdown);
        }
        // Hand carried messages to any neighbor before powering off; without
        // one, the message is stranded.
        let carried = std::mem::take(&mut self.devices[d.index()].carried);
        for c in carried {
            self.strand_or_handoff(d, c.msg);
        }
        for p in std::mem::take(&mut self.devices[d.index()].chunk_probes) {
            self.strand_or_handoff(d, p.msg);
        }
        for wc in std::mem::take(&mut self.devices[d.index()].waiting_chunks) {
            self.strand_or_handoff(d, wc.msg);
        }
        for w in std::mem::take(&mut self.devices[d.index()].waits) {
            for p in w.queued {
                self.drop_payload(d, &p, DropReason::Stranded);
            }
        }
        for s in self.devices[d.index()].store.drain_all() {
            self.rec(Record::ItemRemoved {
                device: d,
                item: s.item.id,
                reason: RemoveReason::Shutdown,
            });
            self.copy_destroyed(s.item.id, Some(LossCause::Shutdown));
        }
        self.devices[d.index()].online = false;
        self.devices[d.index()].member_of = None;
        self.devices[d.index()].sync_pending.clear();
        self.world.set_offline(d);
        self.refresh_role(d);
    }

    /// Give a held geo message to the neighbor nearest its target, or strand
    /// it.
    fn strand_or_handoff(&mut self, d: DeviceId, msg: Message) {
        let Route::Geo { target, .. } = msg.route else {
            self.drop_msg(d, &msg, DropReason::Stranded);
            return;
        };
        let mut best: Option<(f64, DeviceId)> = None;
        for n in self.world.neighbors(d) {
            let dist = self.world.position(n).dist(target.point);
            if best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, n));
            }
        }
        match best {
            Some((_, n)) => self.transmit(d, &msg, &[n]),
            None => self.drop_msg(d, &msg, DropReason::Stranded),
        }
    }

    // ------------------------------------------------------------------
    // Expiry

    fn on_expiry_sweep(&mut self) {
        let now = self.now();
        for i in 0..self.devices.len() {
            let d = DeviceId(i as u32);
            if !self.devices[i].online {
                continue;
            }
            let swept = self.devices[i].store.sweep_expired(now);
            for s in swept {
                self.rec(Record::ItemRemoved {
                    device: d,
                    item: s.item.id,
                    reason: RemoveReason::Expired,
                });
                self.copy_destroyed(s.item.id, None);
            }
            if self.devices[i].imm.is_some() {
                self.imm_expiry_purge(d);
            }
            self.refresh_role(d);
        }
        self.kernel.schedule_in(
            self.cfg.expiry_sweep,
            Event::Timer(TimerKind::ExpirySweep),
        );
    }

    // ------------------------------------------------------------------
    // Roles and the copy ledger

    pub(crate) fn compute_role(&self, d: DeviceId) -> Role {
        let dev = &self.devices[d.index()];
        if !dev.online {
            return Role::Outside;
        }
        if dev.imm.is_some() {
            return Role::Imm;
        }
        match dev.member_of {
            None => Role::Outside,
            Some(_) => {
                if dev.store.is_empty() {
                    Role::Passive
                } else {
                    Role::Active
                }
            }
        }
    }

    pub(crate) fn refresh_role(&mut self, d: DeviceId) {
        let new = self.compute_role(d);
        let dev = &mut self.devices[d.index()];
        if new != dev.role {
            let from = dev.role;
            let market = dev.member_of;
            dev.role = new;
            self.rec(Record::RoleChange {
                device: d,
                market,
                from,
                to: new,
            });
        }
    }

    pub(crate) fn copy_created(&mut self, item: ItemId) {
        *self.copies.entry(item).or_insert(0) += 1;
    }

    /// Destroy one copy. A loss cause marks paths where information is really
    /// gone (crash, stranding, evaporation); `None` covers benign consumption
    /// (moves, expiry, surplus discards, refusals).
    pub(crate) fn copy_destroyed(&mut self, item: ItemId, cause: Option<LossCause>) {
        let c = self.copies.entry(item).or_insert(0);
        *c -= 1;
        if *c <= 0 {
            if let Some(cause) = cause {
                if self.written_off.contains(&item) {
                    return;
                }
                if self.lost.insert(item) {
                    self.rec(Record::ItemLost {
                        item,
                        acked: self.acked.contains(&item),
                        cause,
                    });
                }
            }
        }
    }

    pub(crate) fn drop_payload(&mut self, at: DeviceId, payload: &Payload, reason: DropReason) {
        let id = self.fresh_msg_id();
        let items = payload.custody();
        self.rec(Record::MsgDrop {
            msg: id,
            kind: payload.kind(),
            at,
            reason,
            items: items.clone(),
        });
        let cause = match reason {
            DropReason::HolderCrashed => LossCause::CrashHolder,
            _ => LossCause::Stranded,
        };
        for item in items {
            self.copy_destroyed(item, Some(cause));
        }
        if let Payload::ResultChunk { chunk } = payload {
            self.rec(Record::ChunkUndelivered {
                query: chunk.query,
                seq: chunk.seq,
                reason: "holder_lost",
            });
        }
    }

    // ------------------------------------------------------------------
    // Small shared helpers

    pub(crate) fn now(&self) -> SimTime {
        self.kernel.now()
    }

    pub(crate) fn rec(&mut self, record: Record) {
        self.trace.push(self.kernel.now(), record);
    }

    pub(crate) fn fresh_token(&mut self) -> u64 {
        let t = self.next_token;
        self.next_token += 1;
        t
    }

    pub(crate) fn free_capacity_of(&self, d: DeviceId) -> u64 {
        self.devices[d.index()].store.free_capacity()
    }

    // ------------------------------------------------------------------
    // Introspection (tests, CLI, audits)

    pub fn horizon(&self) -> SimTime {
        self.horizon
    }

    pub fn current_time(&self) -> SimTime {
        self.kernel.now()
    }

    pub fn cfg(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn device_id(&self, name: &str) -> Option<DeviceId> {
        self.trace
            .device_names
            .iter()
            .position(|n| n == name)
            .map(|i| DeviceId(i as u32))
    }

    pub fn market_id(&self, name: &str) -> Option<MarketId> {
        self.trace
            .market_names
            .iter()
            .position(|n| n == name)
            .map(|i| MarketId(i as u32))
    }

    pub fn item_id(&self, name: &str) -> Option<ItemId> {
        self.trace
            .item_names
            .iter()
            .position(|n| n == name)
            .map(|i| ItemId(i as u32))
    }

    pub fn market_spec(&self, m: MarketId) -> MarketSpec {
        self.markets[m.index()]
    }

    pub fn device_role(&self, d: DeviceId) -> Role {
        self.compute_role(d)
    }

    pub fn device_position(&self, d: DeviceId) -> Position {
        self.world.position(d)
    }

    pub fn device_store(&self, d: DeviceId) -> &LocalStore {
        &self.devices[d.index()].store
    }

    pub fn device_knowledge(&self, d: DeviceId) -> &BTreeMap<MarketId, MarketKnowledge> {
        &self.devices[d.index()].knowledge
    }

    pub fn device_knowledge_provenance(&self, d: DeviceId) -> &BTreeMap<MarketId, Provenance> {
        &self.devices[d.index()].provenance
    }

    pub fn is_online(&self, d: DeviceId) -> bool {
        self.devices[d.index()].online
    }

    /// Devices currently holding a live IMM instance for the market.
    pub fn live_imms(&self, m: MarketId) -> Vec<(DeviceId, u64)> {
        self.devices
            .iter()
            .filter_map(|dev| match &dev.imm {
                Some(inst) if inst.market == m => Some((dev.id, inst.st.epoch)),
                _ => None,
            })
            .collect()
    }

    pub fn imm_state(&self, m: MarketId) -> Option<(DeviceId, &ImmState)> {
        self.devices.iter().find_map(|dev| match &dev.imm {
            Some(inst) if inst.market == m => Some((dev.id, &inst.st)),
            _ => None,
        })
    }

    pub fn sync_result(&self, q: QueryId) -> Option<&Vec<InfoItem>> {
        self.devices.iter().find_map(|d| d.sync_results.get(&q))
    }

    pub fn async_received(&self, q: QueryId) -> Option<&AsyncRecv> {
        self.devices.iter().find_map(|d| d.async_recv.get(&q))
    }

    pub fn snapshot(&self) -> Snapshot {
        self.world.snapshot()
    }

    pub fn copies_alive(&self, item: ItemId) -> i64 {
        self.copies.get(&item).copied().unwrap_or(0).max(0)
    }

    pub fn acked_items(&self) -> &BTreeSet<ItemId> {
        &self.acked
    }

    /// Result chunks currently held somewhere mid-delivery (carried, probing
    /// for the initiator, or parked until a waypoint time).
    pub fn chunks_in_custody(&self) -> u64 {
        let is_chunk = |msg: &crate::transport::Message| {
            matches!(msg.payload, Payload::ResultChunk { .. })
        };
        let mut n = 0;
        for dev in &self.devices {
            n += dev.carried.iter().filter(|c| is_chunk(&c.msg)).count() as u64;
            n += dev.chunk_probes.iter().filter(|p| is_chunk(&p.msg)).count() as u64;
            n += dev.waiting_chunks.iter().filter(|w| is_chunk(&w.msg)).count() as u64;
        }
        n
    }

    pub fn activity(&self) -> Activity {
        let mut a = Activity {
            in_flight_msgs: self.in_flight,
            ..Activity::default()
        };
        for dev in &self.devices {
            a.carried_msgs += dev.carried.len() as u64;
            a.probe_waits += dev.waits.len() as u64;
            a.chunk_probes += dev.chunk_probes.len() as u64;
            a.waiting_chunks += dev.waiting_chunks.len() as u64;
            if let Some(inst) = &dev.imm {
                a.pending_stores += inst.st.pending_stores.len() as u64;
                a.imm_inbox += inst.st.inbox.len() as u64;
                a.resident_queries += inst.st.resident.len() as u64;
            }
        }
        a
    }

    /// No in-flight messages, carried payloads, probe waits, or pending store
    /// work anywhere. Resident queries are allowed.
    pub fn is_settled(&self) -> bool {
        let a = self.activity();
        a.in_flight_msgs == 0
            && a.carried_msgs == 0
            && a.probe_waits == 0
            && a.pending_stores == 0
            && a.imm_inbox == 0
            && a.chunk_probes == 0
            && a.waiting_chunks == 0
    }
}

// ---------------------------------------------------------------------------
// Payload dispatch

impl Simulation {
    pub(crate) fn handle_payload(&mut self, at: DeviceId, _src: DeviceId, msg_id: MsgId, payload: Payload) {
        self.close_flight(msg_id);
        match payload {
            Payload::ImmProbe { market, origin } => self.on_imm_probe(at, market, origin),
            Payload::ProbeReply { market, imm, .. } => self.imm_learned_peer(at, market, imm),
            Payload::ImmAnnounce { market, imm } => self.imm_learned_peer(at, market, imm),
            Payload::CensusRequest { market, imm } => self.on_census_request(at, market, imm),
            Payload::StoreCmd { market, item, replica, ack_to, token } => {
                self.on_store_cmd(at, market, item, replica, ack_to, token)
            }
            Payload::DropCmd { market, items } => self.on_drop_cmd(at, market, items),
            Payload::RepairCmd { market, item, new_host, ack_to, token } => {
                self.on_repair_cmd(at, market, item, new_host, ack_to, token)
            }
            Payload::HeartbeatPing { market, imm, round } => {
                self.on_heartbeat_ping(at, market, imm, round)
            }
            Payload::ImmHandoff { market, epoch, state } => {
                self.on_imm_handoff(at, market, epoch, *state)
            }
            Payload::PublishAck { item, .. } => self.on_publish_ack(at, item),
            Payload::PublishNack { .. } => { /* refusal already traced at the market */ }
            Payload::SyncProbe { query, origin, predicate, path } => {
                self.on_sync_probe(at, query, origin, predicate, path)
            }
            Payload::SyncReply { query, items } => self.on_sync_reply(at, query, items),
            Payload::ItemFetch { market, query, items, ack_to } => {
                self.on_item_fetch(at, market, query, items, ack_to)
            }
            Payload::ResultChunk { chunk } => {
                // Chain deliveries end at the initiator by construction.
                if chunk.initiator == at {
                    self.receive_chunk(at, chunk);
                }
            }
            Payload::InitiatorProbe { token, initiator, holder, path } => {
                self.on_initiator_probe(at, token, initiator, holder, path)
            }
            Payload::InitiatorProbeReply { token, chunk_path } => {
                self.on_initiator_probe_reply(at, token, chunk_path)
            }
            // Everything bound for the market's IMM.
            p @ (Payload::CapacityReport { .. }
            | Payload::StoreAck { .. }
            | Payload::StoreNack { .. }
            | Payload::SignOff { .. }
            | Payload::CensusReply { .. }
            | Payload::HeartbeatAck { .. }
            | Payload::ItemFetchReply { .. }
            | Payload::ImmStateTransfer { .. }
            | Payload::PublishItem { .. }
            | Payload::ItemReturn { .. }
            | Payload::AsyncQuery { .. }) => {
                let market = payload_market(&p).expect("imm payloads carry a market");
                self.imm_payload(at, market, p);
            }
        }
    }

    /// A geo-routed message reached its target area; what happens next depends
    /// on the payload.
    pub(crate) fn geo_arrived(&mut self, holder: DeviceId, msg: Message) {
        match msg.payload {
            Payload::PublishItem { market, .. }
            | Payload::ItemReturn { market, .. }
            | Payload::SignOff { market, .. } => {
                self.need_imm(holder, market, Some(msg.payload), false);
            }
            Payload::AsyncQuery { ref q } => {
                let market = q.target_market;
                self.need_imm(holder, market, Some(msg.payload), false);
            }
            Payload::ResultChunk { .. } => self.chunk_arrived(holder, msg),
            Payload::PublishAck { publisher, .. } | Payload::PublishNack { publisher, .. } => {
                if holder == publisher {
                    let id = msg.id;
                    self.handle_payload(holder, holder, id, msg.payload);
                } else {
                    self.flood_from(
                        holder,
                        crate::transport::FloodScope::Neighborhood,
                        2,
                        crate::transport::Addressee::Device(publisher),
                        msg.payload,
                    );
                }
            }
            other => {
                debug_assert!(false, "unexpected geo payload {}", other.kind());
            }
        }
    }
}

fn payload_market(p: &Payload) -> Option<MarketId> {
    match p {
        Payload::CapacityReport { market, .. }
        | Payload::StoreAck { market, .. }
        | Payload::StoreNack { market, .. }
        | Payload::SignOff { market, .. }
        | Payload::CensusReply { market, .. }
        | Payload::HeartbeatAck { market, .. }
        | Payload::ItemFetchReply { market, .. }
        | Payload::ImmStateTransfer { market, .. }
        | Payload::PublishItem { market, .. }
        | Payload::ItemReturn { market, .. } => Some(*market),
        Payload::AsyncQuery { q } => Some(q.target_market),
        _ => None,
    }
}
