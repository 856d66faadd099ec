//! Message movement: 1-hop unicast, duplicate-suppressed flooding (region
//! bounded or hop bounded), reverse-path chains, geographic greedy forwarding,
//! and carry-and-forward when no radio hop makes progress.
//!
//! Links are unit-disk and evaluated at send time; a delivery scheduled onto a
//! live link always arrives `hop_latency` ticks later (the receiver may have
//! crashed by then). Flood duplicates share the originator's message id, which
//! is what suppression keys on.

use crate::broker::InfoItem;
use crate::engine::{Carried, Event, Simulation, TimerKind};
use crate::ids::{DeviceId, ItemId, MarketId, MsgId, QueryId};
use crate::market::{ImmKey, ImmState};
use crate::query::{AsyncSmartQuery, ResultChunk};
use crate::trace::{DropReason, Record, SendTarget, SignOffReason};
use crate::world::Position;

/// Delivery succeeds once the message reaches any device within `radius` of
/// `point`.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct GeoTarget {
    pub point: Position,
    pub radius: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FloodScope {
    /// Only devices inside the market region relay or process.
    Region(MarketId),
    /// Hop-bounded neighborhood flood with no region restriction.
    Neighborhood,
}

/// Who handles the payload of a flood; everyone else in scope only relays.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Addressee {
    Imm(MarketId),
    Device(DeviceId),
    All,
}

#[derive(Clone, PartialEq, Debug)]
pub enum Route {
    Unicast { dst: DeviceId },
    Flood { scope: FloodScope, ttl: u32, addressee: Addressee },
    Geo {
        target: GeoTarget,
        /// The holder the message just came from. Excluded from forwarding
        /// candidates for one hop, so a predictive carry handoff cannot be
        /// bounced straight back by the greedy rule.
        prev: Option<DeviceId>,
    },
    /// Fixed relay path; the payload is handled at the last element.
    Chain { path: Vec<DeviceId>, next: usize },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DeliveryOutcome {
    Scheduled,
    Unreachable,
}

#[derive(Clone, PartialEq, Debug)]
pub enum Payload {
    // market management
    ImmProbe { market: MarketId, origin: DeviceId },
    ProbeReply { market: MarketId, origin: DeviceId, imm: ImmKey },
    ImmAnnounce { market: MarketId, imm: ImmKey },
    CapacityReport { market: MarketId, device: DeviceId, free: u64 },
    StoreCmd {
        market: MarketId,
        item: InfoItem,
        replica: bool,
        ack_to: ImmKey,
        token: u64,
    },
    StoreAck {
        market: MarketId,
        token: u64,
        item: ItemId,
        replica: bool,
        host: DeviceId,
        free: u64,
    },
    StoreNack { market: MarketId, token: u64, host: DeviceId, free: u64 },
    DropCmd { market: MarketId, items: Vec<ItemId> },
    SignOff {
        market: MarketId,
        device: DeviceId,
        replicas: Vec<ItemId>,
        reason: SignOffReason,
    },
    CensusRequest { market: MarketId, imm: ImmKey },
    CensusReply {
        market: MarketId,
        device: DeviceId,
        free: u64,
        holdings: Vec<(InfoItem, bool)>,
    },
    HeartbeatPing { market: MarketId, imm: ImmKey, round: u64 },
    HeartbeatAck { market: MarketId, device: DeviceId, free: u64, round: u64 },
    RepairCmd {
        market: MarketId,
        item: ItemId,
        new_host: DeviceId,
        ack_to: ImmKey,
        token: u64,
    },
    ImmHandoff { market: MarketId, epoch: u64, state: Box<ImmState> },
    ImmStateTransfer { market: MarketId, from: ImmKey, state: Box<ImmState> },
    ItemReturn {
        market: MarketId,
        leaver: DeviceId,
        items: Vec<(InfoItem, bool)>,
    },
    // publishing
    PublishItem {
        market: MarketId,
        publisher: DeviceId,
        item: InfoItem,
        token: u64,
    },
    PublishAck { publisher: DeviceId, item: ItemId, token: u64 },
    PublishNack {
        publisher: DeviceId,
        item: ItemId,
        token: u64,
        reason: &'static str,
    },
    // queries
    SyncProbe {
        query: QueryId,
        origin: DeviceId,
        predicate: crate::broker::Predicate,
        path: Vec<DeviceId>,
    },
    SyncReply { query: QueryId, items: Vec<InfoItem> },
    AsyncQuery { q: AsyncSmartQuery },
    ItemFetch {
        market: MarketId,
        query: QueryId,
        items: Vec<ItemId>,
        ack_to: ImmKey,
    },
    ItemFetchReply { market: MarketId, query: QueryId, items: Vec<InfoItem> },
    ResultChunk { chunk: ResultChunk },
    InitiatorProbe {
        token: u64,
        initiator: DeviceId,
        holder: DeviceId,
        path: Vec<DeviceId>,
    },
    InitiatorProbeReply { token: u64, chunk_path: Vec<DeviceId> },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::ImmProbe { .. } => "imm_probe",
            Payload::ProbeReply { .. } => "probe_reply",
            Payload::ImmAnnounce { .. } => "imm_announce",
            Payload::CapacityReport { .. } => "capacity_report",
            Payload::StoreCmd { .. } => "store_cmd",
            Payload::StoreAck { .. } => "store_ack",
            Payload::StoreNack { .. } => "store_nack",
            Payload::DropCmd { .. } => "drop_cmd",
            Payload::SignOff { .. } => "sign_off",
            Payload::CensusRequest { .. } => "census_request",
            Payload::CensusReply { .. } => "census_reply",
            Payload::HeartbeatPing { .. } => "heartbeat_ping",
            Payload::HeartbeatAck { .. } => "heartbeat_ack",
            Payload::RepairCmd { .. } => "repair_cmd",
            Payload::ImmHandoff { .. } => "imm_handoff",
            Payload::ImmStateTransfer { .. } => "imm_state_transfer",
            Payload::ItemReturn { .. } => "item_return",
            Payload::PublishItem { .. } => "publish_item",
            Payload::PublishAck { .. } => "publish_ack",
            Payload::PublishNack { .. } => "publish_nack",
            Payload::SyncProbe { .. } => "sync_probe",
            Payload::SyncReply { .. } => "sync_reply",
            Payload::AsyncQuery { .. } => "async_query",
            Payload::ItemFetch { .. } => "item_fetch",
            Payload::ItemFetchReply { .. } => "item_fetch_reply",
            Payload::ResultChunk { .. } => "result_chunk",
            Payload::InitiatorProbe { .. } => "initiator_probe",
            Payload::InitiatorProbeReply { .. } => "initiator_probe_reply",
        }
    }

    /// Item copies whose custody travels with this message. Result chunks are
    /// reads, not custody moves.
    pub fn custody(&self) -> Vec<ItemId> {
        match self {
            Payload::PublishItem { item, .. } | Payload::StoreCmd { item, .. } => vec![item.id],
            Payload::ItemReturn { items, .. } => items.iter().map(|(i, _)| i.id).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct Message {
    pub id: MsgId,
    pub src: DeviceId,
    pub hops: u32,
    pub route: Route,
    pub payload: Payload,
}

fn neighbor_hash(ids: &[DeviceId]) -> u64 {
    // FNV-1a over the sorted id list; stable across runs.
    let mut h: u64 = 0xcbf29ce484222325;
    for d in ids {
        h ^= d.0 as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Simulation {
    /// One radio transmission from `from` to the given recipients; deliveries
    /// fire after the per-hop latency with an incremented hop count.
    pub(crate) fn transmit(&mut self, from: DeviceId, msg: &Message, recipients: &[DeviceId]) {
        if recipients.is_empty() {
            return;
        }
        let target = if recipients.len() == 1 {
            SendTarget::Device(recipients[0])
        } else {
            SendTarget::Broadcast(recipients.len() as u32)
        };
        self.rec(Record::MsgSend {
            msg: msg.id,
            kind: msg.payload.kind(),
            from,
            to: target,
            hops: msg.hops,
            items: msg.payload.custody(),
        });
        let latency = self.cfg.hop_latency;
        for &to in recipients {
            let mut delivered = msg.clone();
            delivered.hops += 1;
            delivered.src = from;
            self.in_flight += 1;
            self.kernel
                .schedule_in(latency, Event::Deliver { to, msg: delivered });
        }
    }

    /// 1-hop unicast with the link evaluated at send time.
    pub(crate) fn unicast(&mut self, from: DeviceId, dst: DeviceId, msg: &Message) -> DeliveryOutcome {
        if !self.world.are_neighbors(from, dst) {
            return DeliveryOutcome::Unreachable;
        }
        self.transmit(from, msg, &[dst]);
        DeliveryOutcome::Scheduled
    }

    pub(crate) fn fresh_msg_id(&mut self) -> MsgId {
        let id = MsgId(self.next_msg);
        self.next_msg += 1;
        id
    }

    /// Start a flood at `origin`: the origin processes the payload itself when
    /// addressed, then broadcasts to its current neighbors.
    pub(crate) fn flood_from(
        &mut self,
        origin: DeviceId,
        scope: FloodScope,
        ttl: u32,
        addressee: Addressee,
        payload: Payload,
    ) -> MsgId {
        let id = self.fresh_msg_id();
        let msg = Message {
            id,
            src: origin,
            hops: 0,
            route: Route::Flood { scope, ttl, addressee },
            payload,
        };
        self.register_flight(origin, &msg);
        self.devices[origin.index()].seen.insert(id);
        self.rec(Record::MsgProcess { msg: id, at: origin });
        if self.flood_addressed_to(origin, &msg) {
            self.handle_payload(origin, origin, id, msg.payload.clone());
        }
        if ttl > 0 {
            let nbrs = self.world.neighbors(origin);
            self.transmit(origin, &msg, &nbrs);
        }
        id
    }

    fn flood_addressed_to(&self, d: DeviceId, msg: &Message) -> bool {
        let Route::Flood { addressee, .. } = &msg.route else {
            return false;
        };
        match addressee {
            Addressee::All => true,
            Addressee::Device(dev) => *dev == d,
            Addressee::Imm(m) => self.devices[d.index()].imm_market() == Some(*m),
        }
    }

    /// Flood reception: duplicate suppression, region scoping, payload
    /// handling for the addressee, and re-broadcast while hops remain.
    pub(crate) fn flood_receive(&mut self, at: DeviceId, msg: Message) {
        let Route::Flood { scope, ttl, .. } = msg.route else {
            unreachable!("flood_receive on non-flood route")
        };
        if let FloodScope::Region(m) = scope {
            let inside = self.markets[m.index()].contains(self.world.position(at));
            if !inside {
                self.rec(Record::MsgDrop {
                    msg: msg.id,
                    kind: msg.payload.kind(),
                    at,
                    reason: DropReason::OutsideRegion,
                    items: Vec::new(),
                });
                return;
            }
        }
        if self.devices[at.index()].seen.contains(&msg.id) {
            self.rec(Record::MsgDrop {
                msg: msg.id,
                kind: msg.payload.kind(),
                at,
                reason: DropReason::Duplicate,
                items: Vec::new(),
            });
            return;
        }
        self.devices[at.index()].seen.insert(msg.id);
        self.rec(Record::MsgProcess { msg: msg.id, at });

        if self.flood_addressed_to(at, &msg) {
            self.handle_payload(at, msg.src, msg.id, msg.payload.clone());
        }

        if msg.hops < ttl {
            // Probe-style floods record the relay path for reverse routing.
            let mut relayed = msg.clone();
            match &mut relayed.payload {
                Payload::SyncProbe { path, .. } | Payload::InitiatorProbe { path, .. } => {
                    path.push(at);
                }
                _ => {}
            }
            let nbrs = self.world.neighbors(at);
            self.transmit(at, &relayed, &nbrs);
        }
    }

    /// Send a payload along a fixed path; the payload is handled at the final
    /// element.
    pub(crate) fn chain_send(&mut self, from: DeviceId, path: Vec<DeviceId>, payload: Payload) {
        if path.is_empty() {
            // Degenerate chain: handle locally.
            let id = self.fresh_msg_id();
            self.handle_payload(from, from, id, payload);
            return;
        }
        let id = self.fresh_msg_id();
        let msg = Message {
            id,
            src: from,
            hops: 0,
            route: Route::Chain { path, next: 0 },
            payload,
        };
        self.chain_forward(from, msg);
    }

    fn chain_forward(&mut self, from: DeviceId, msg: Message) {
        let Route::Chain { path, next } = &msg.route else {
            unreachable!()
        };
        let hop = path[*next];
        if self.unicast(from, hop, &msg) == DeliveryOutcome::Unreachable {
            self.drop_msg(from, &msg, DropReason::ChainBroken);
        }
    }

    pub(crate) fn chain_receive(&mut self, at: DeviceId, mut msg: Message) {
        let Route::Chain { path, next } = &mut msg.route else {
            unreachable!()
        };
        debug_assert_eq!(path[*next], at);
        if *next + 1 == path.len() {
            self.handle_payload(at, msg.src, msg.id, msg.payload);
        } else {
            *next += 1;
            self.chain_forward(at, msg);
        }
    }

    /// Launch a geographically routed message from `src`.
    pub(crate) fn geo_send(&mut self, src: DeviceId, target: GeoTarget, payload: Payload) -> MsgId {
        let id = self.fresh_msg_id();
        let msg = Message {
            id,
            src,
            hops: 0,
            route: Route::Geo { target, prev: None },
            payload,
        };
        self.geo_step(src, msg);
        id
    }

    /// Geo message bound for a market's IMM: routed toward the center,
    /// delivered once any device inside the region holds it.
    pub(crate) fn geo_send_to_market(&mut self, src: DeviceId, market: MarketId, payload: Payload) -> MsgId {
        let spec = self.markets[market.index()];
        self.geo_send(
            src,
            GeoTarget {
                point: spec.center,
                radius: spec.radius,
            },
            payload,
        )
    }

    /// One greedy step: deliver when inside the target radius, otherwise
    /// forward to the strictly closest-to-target neighbor that improves on the
    /// holder, otherwise switch to carry mode.
    pub(crate) fn geo_step(&mut self, holder: DeviceId, msg: Message) {
        let Route::Geo { target, prev } = msg.route else {
            unreachable!("geo_step on non-geo route")
        };
        let hpos = self.world.position(holder);
        if hpos.dist(target.point) <= target.radius {
            self.geo_arrived(holder, msg);
            return;
        }
        let holder_d = hpos.dist(target.point);
        let mut best: Option<(f64, DeviceId)> = None;
        for n in self.world.neighbors(holder) {
            if Some(n) == prev {
                continue;
            }
            let d = self.world.position(n).dist(target.point);
            if d < holder_d && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, n));
            }
        }
        match best {
            Some((_, n)) => {
                self.geo_transmit(holder, msg, n);
            }
            None => {
                let nbrs = self.world.neighbors(holder);
                let nb_hash = neighbor_hash(&nbrs);
                let next_eval = self.now().plus(self.cfg.t_carry);
                self.devices[holder.index()].carried.push(Carried {
                    msg,
                    next_eval,
                    nb_hash,
                });
            }
        }
    }

    /// Forward a geo message one hop, stamping the departing holder.
    fn geo_transmit(&mut self, holder: DeviceId, mut msg: Message, to: DeviceId) {
        if let Route::Geo { prev, .. } = &mut msg.route {
            *prev = Some(holder);
        }
        self.transmit(holder, &msg, &[to]);
    }

    /// Per-tick carry maintenance for one device: re-evaluate each carried
    /// message when the neighbor set changed or its timer elapsed.
    pub(crate) fn carry_tick(&mut self, holder: DeviceId) {
        if self.devices[holder.index()].carried.is_empty() {
            return;
        }
        let nbrs = self.world.neighbors(holder);
        let hash = neighbor_hash(&nbrs);
        let now = self.now();
        let carried = std::mem::take(&mut self.devices[holder.index()].carried);
        for mut c in carried {
            if now < c.next_eval && hash == c.nb_hash {
                self.devices[holder.index()].carried.push(c);
                continue;
            }
            c.nb_hash = hash;
            c.next_eval = now.plus(self.cfg.t_carry);
            if let Some(keep) = self.carry_evaluate(holder, c, &nbrs) {
                self.devices[holder.index()].carried.push(keep);
            }
        }
    }

    /// Returns the carried entry back when the holder keeps the message.
    fn carry_evaluate(
        &mut self,
        holder: DeviceId,
        c: Carried,
        nbrs: &[DeviceId],
    ) -> Option<Carried> {
        let Route::Geo { target, prev } = c.msg.route else {
            unreachable!()
        };
        let hpos = self.world.position(holder);
        if hpos.dist(target.point) <= target.radius {
            self.geo_arrived(holder, c.msg);
            return None;
        }
        // A radio hop that makes strict progress beats carrying.
        let holder_d = hpos.dist(target.point);
        let mut best_fwd: Option<(f64, DeviceId)> = None;
        for &n in nbrs {
            if Some(n) == prev {
                continue;
            }
            let d = self.world.position(n).dist(target.point);
            if d < holder_d && best_fwd.map_or(true, |(bd, _)| d < bd) {
                best_fwd = Some((d, n));
            }
        }
        if let Some((_, n)) = best_fwd {
            self.geo_transmit(holder, c.msg, n);
            return None;
        }
        // carry_select: hand off to the device whose predicted position comes
        // closest to the target, if strictly better than ours by the margin.
        let horizon = self.now().plus(self.cfg.predict_horizon);
        let own_score = self
            .world
            .predict_position(holder, horizon)
            .0
            .dist(target.point);
        let mut best: Option<(f64, DeviceId)> = None;
        for &n in nbrs {
            if Some(n) == prev {
                continue;
            }
            let score = self.world.predict_position(n, horizon).0.dist(target.point);
            if best.map_or(true, |(bs, _)| score < bs) {
                best = Some((score, n));
            }
        }
        if let Some((score, n)) = best {
            if score + self.cfg.carry_epsilon < own_score {
                self.geo_transmit(holder, c.msg, n);
                return None;
            }
        }
        Some(c)
    }

    /// Intra-market delivery to a known device: direct handling for self,
    /// unicast to a neighbor, otherwise a region flood addressed to it.
    pub(crate) fn market_send(&mut self, from: DeviceId, market: MarketId, to: DeviceId, payload: Payload) {
        if from == to {
            let id = self.fresh_msg_id();
            self.handle_payload(to, from, id, payload);
            return;
        }
        if self.world.are_neighbors(from, to) {
            let id = self.fresh_msg_id();
            let msg = Message {
                id,
                src: from,
                hops: 0,
                route: Route::Unicast { dst: to },
                payload,
            };
            self.register_flight(from, &msg);
            self.transmit(from, &msg, &[to]);
            return;
        }
        self.flood_from(
            from,
            FloodScope::Region(market),
            self.cfg.flood_ttl,
            Addressee::Device(to),
            payload,
        );
    }

    /// Track custodial messages that could evaporate without an explicit drop
    /// event (flood-routed store commands, unicast copies). Publish and return
    /// payloads remember enough to be re-injected toward their market.
    pub(crate) fn register_flight(&mut self, origin: DeviceId, msg: &Message) {
        let items = msg.payload.custody();
        if items.is_empty() {
            return;
        }
        let reinject = match &msg.payload {
            Payload::PublishItem { market, .. } | Payload::ItemReturn { market, .. } => {
                Some((*market, msg.payload.clone()))
            }
            _ => None,
        };
        self.custodial_flights.insert(
            msg.id,
            crate::engine::CustodialFlight { origin, items, reinject },
        );
        let check_at = self.cfg.ack_window() + self.cfg.hop_latency + 1;
        self.kernel
            .schedule_in(check_at, Event::Timer(TimerKind::FlightCheck { msg: msg.id }));
    }

    /// Close an open custodial flight once its payload reached a handler.
    pub(crate) fn close_flight(&mut self, msg: MsgId) {
        self.custodial_flights.remove(&msg);
    }

    pub(crate) fn drop_msg(&mut self, at: DeviceId, msg: &Message, reason: DropReason) {
        let items = msg.payload.custody();
        self.rec(Record::MsgDrop {
            msg: msg.id,
            kind: msg.payload.kind(),
            at,
            reason,
            items: items.clone(),
        });
        // Flood custody is governed by flight checks; point-to-point custody
        // dies with the drop (and its flight, if any, dies with it).
        if !matches!(msg.route, Route::Flood { .. }) {
            self.close_flight(msg.id);
            let cause = match reason {
                DropReason::OfflineReceiver => Some(crate::trace::LossCause::CrashReceiver),
                DropReason::HolderCrashed => Some(crate::trace::LossCause::CrashHolder),
                DropReason::Stranded => Some(crate::trace::LossCause::Stranded),
                _ => Some(crate::trace::LossCause::Stranded),
            };
            for item in items {
                self.copy_destroyed(item, cause);
            }
        }
        if let Payload::ResultChunk { chunk } = &msg.payload {
            let reason = match reason {
                DropReason::HolderCrashed | DropReason::OfflineReceiver => "crash",
                _ => "stranded",
            };
            self.rec(Record::ChunkUndelivered {
                query: chunk.query,
                seq: chunk.seq,
                reason,
            });
        }
    }
}
