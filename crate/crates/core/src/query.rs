//! The two query types: synchronous local collection with a timeout, and
//! asynchronous smart remote queries that travel to a market, stay resident
//! there, and send results back in chunks to a moving initiator.
//!
//! Responses also carry market knowledge (known markets plus a type-index
//! summary), which is how devices discover markets beyond their configuration.

use std::collections::{BTreeMap, BTreeSet};

use crate::broker::{InfoItem, Predicate};
use crate::ids::{DeviceId, ItemId, MarketId, QueryId};
use crate::simkernel::SimTime;
use crate::world::{Itinerary, Position};

/// Hop-bounded neighborhood query answered within a timeout. `hop_limit` 0
/// means local store only.
#[derive(Clone, PartialEq, Debug)]
pub struct SyncLocalQuery {
    pub id: QueryId,
    pub predicate: Predicate,
    pub hop_limit: u32,
    pub timeout: u64,
}

/// Long-lived query resident at a market. The initiator's itinerary is
/// mandatory meta-data: it determines when and where result chunks are sent.
#[derive(Clone, PartialEq, Debug)]
pub struct AsyncSmartQuery {
    pub id: QueryId,
    pub predicate: Predicate,
    pub initiator: DeviceId,
    pub itinerary: Itinerary,
    /// Optional early-termination threshold: residency ends once this many
    /// results have been sent.
    pub expected_results: Option<u32>,
    pub active_for: u64,
    pub target_market: MarketId,
}

/// What a market knows about itself or another market: the region plus a
/// type-index summary stamped with when it was taken.
#[derive(Clone, PartialEq, Debug)]
pub struct MarketKnowledge {
    pub market: MarketId,
    pub center: Position,
    pub radius: f64,
    pub core_radius: f64,
    pub types: BTreeMap<String, u32>,
    pub as_of: SimTime,
}

/// Meta-data attached to every result chunk.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct ResponseMeta {
    pub markets: Vec<MarketKnowledge>,
}

/// Delivery leg of a chunk: the rendezvous point it is heading to, the time
/// the initiator is expected there, and the itinerary cursor for retries.
#[derive(Clone, PartialEq, Debug)]
pub struct ChunkLeg {
    pub rendezvous: Position,
    pub due: SimTime,
    /// Set once the holder has already waited for `due` at this leg.
    pub waited: bool,
}

#[derive(Clone, PartialEq, Debug)]
pub struct ResultChunk {
    pub query: QueryId,
    pub seq: u32,
    pub items: Vec<InfoItem>,
    pub is_final: bool,
    pub meta: ResponseMeta,
    pub initiator: DeviceId,
    pub itinerary: Itinerary,
    pub leg: ChunkLeg,
}

/// A query resident at the IMM, between registration and expiry (or early
/// satisfaction).
#[derive(Clone, PartialEq, Debug)]
pub struct Residency {
    pub q: AsyncSmartQuery,
    pub expires: SimTime,
    /// Items already sent out, for dedup across fetches and live publishes.
    pub emitted: BTreeSet<ItemId>,
    /// Fetched copies waiting for the next chunk boundary.
    pub pending: Vec<InfoItem>,
    /// Items requested from hosts, reply outstanding.
    pub awaiting: BTreeSet<ItemId>,
    pub next_seq: u32,
    pub sent_results: u32,
}

impl Residency {
    pub fn budget_left(&self) -> Option<u32> {
        self.q
            .expected_results
            .map(|k| k.saturating_sub(self.sent_results))
    }
}

/// Union two market-knowledge sets into `directory`: unknown markets are
/// added, known ones refresh only when the incoming summary is newer. Returns
/// the ids that were added or refreshed.
pub fn merge_market_knowledge(
    directory: &mut BTreeMap<MarketId, MarketKnowledge>,
    incoming: &ResponseMeta,
) -> Vec<MarketId> {
    let mut changed = Vec::new();
    for know in &incoming.markets {
        match directory.get(&know.market) {
            Some(existing) if existing.as_of >= know.as_of => {}
            _ => {
                directory.insert(know.market, know.clone());
                changed.push(know.market);
            }
        }
    }
    changed
}


// ---------------------------------------------------------------------------
// Protocol implementation

use crate::engine::{
    AsyncRecv, ChunkProbe, Event, Provenance, Simulation, SyncPending, TimerKind, WaitingChunk,
};
use crate::market::ImmKey;
use crate::trace::{DropReason, Record};
use crate::transport::{Addressee, FloodScope, GeoTarget, Message, Payload, Route};
use crate::world::{ItinerarySource as Src, Waypoint};

impl Simulation {
    // ------------------------------------------------------------------
    // Synchronous local queries

    /// Collect from the local broker immediately; with a hop limit, flood a
    /// probe and merge replies until the timeout. The query completes at
    /// exactly launch + timeout; replies delivered at the deadline tick still
    /// count (the finalize step runs after them).
    pub(crate) fn run_sync_local(&mut self, d: DeviceId, q: SyncLocalQuery) {
        self.rec(Record::QueryLaunched {
            query: q.id,
            device: d,
            kind: "sync",
            market: None,
        });
        let now = self.now();
        let local: Vec<InfoItem> = self.devices[d.index()]
            .store
            .retrieve(&q.predicate, now)
            .into_iter()
            .cloned()
            .collect();
        if q.hop_limit == 0 {
            let ids: Vec<ItemId> = local.iter().map(|i| i.id).collect();
            self.devices[d.index()].sync_results.insert(q.id, local);
            self.rec(Record::SyncCompleted { query: q.id, device: d, items: ids });
            return;
        }
        let merged: BTreeMap<ItemId, InfoItem> = local.into_iter().map(|i| (i.id, i)).collect();
        let deadline = now.plus(q.timeout);
        let query = q.id;
        let predicate = q.predicate;
        let hop_limit = q.hop_limit;
        self.devices[d.index()]
            .sync_pending
            .insert(query, SyncPending { deadline, merged });
        self.flood_from(
            d,
            FloodScope::Neighborhood,
            hop_limit,
            Addressee::All,
            Payload::SyncProbe {
                query,
                origin: d,
                predicate,
                path: vec![d],
            },
        );
        self.kernel.schedule(
            deadline,
            Event::Timer(TimerKind::SyncDeadline { device: d, query }),
        )
        .expect("future");
    }

    /// A probed device answers with its matching items along the reverse of
    /// the flood path. Devices with nothing to contribute stay silent.
    pub(crate) fn on_sync_probe(
        &mut self,
        at: DeviceId,
        query: QueryId,
        origin: DeviceId,
        predicate: crate::broker::Predicate,
        path: Vec<DeviceId>,
    ) {
        if at == origin {
            return;
        }
        let now = self.now();
        let items: Vec<InfoItem> = self.devices[at.index()]
            .store
            .retrieve(&predicate, now)
            .into_iter()
            .cloned()
            .collect();
        if items.is_empty() {
            return;
        }
        let reverse: Vec<DeviceId> = path.into_iter().rev().collect();
        self.chain_send(at, reverse, Payload::SyncReply { query, items });
    }

    pub(crate) fn on_sync_reply(&mut self, at: DeviceId, query: QueryId, items: Vec<InfoItem>) {
        let now = self.now();
        let late = match self.devices[at.index()].sync_pending.get_mut(&query) {
            Some(p) if now <= p.deadline => {
                for item in items {
                    p.merged.insert(item.id, item);
                }
                false
            }
            Some(_) => true,
            None => true,
        };
        if late {
            let id = self.fresh_msg_id();
            self.rec(Record::MsgDrop {
                msg: id,
                kind: "sync_reply",
                at,
                reason: DropReason::Late,
                items: Vec::new(),
            });
        }
    }

    pub(crate) fn on_sync_deadline(&mut self, d: DeviceId, query: QueryId) {
        if !self.devices[d.index()].sync_pending.contains_key(&query) {
            return;
        }
        // Same-tick reschedule: replies delivered at the deadline tick were
        // scheduled earlier and therefore run before this finalize event.
        self.kernel
            .schedule(
                self.now(),
                Event::Timer(TimerKind::SyncFinalize { device: d, query }),
            )
            .expect("same tick");
    }

    pub(crate) fn on_sync_finalize(&mut self, d: DeviceId, query: QueryId) {
        let Some(p) = self.devices[d.index()].sync_pending.remove(&query) else {
            return;
        };
        let results: Vec<InfoItem> = p.merged.into_values().collect();
        let ids: Vec<ItemId> = results.iter().map(|i| i.id).collect();
        self.devices[d.index()].sync_results.insert(query, results);
        self.rec(Record::SyncCompleted { query, device: d, items: ids });
    }

    // ------------------------------------------------------------------
    // Asynchronous smart remote queries

    pub(crate) fn launch_async_remote(
        &mut self,
        d: DeviceId,
        query: QueryId,
        predicate: crate::broker::Predicate,
        market: MarketId,
        expect: Option<u32>,
        active_for: u64,
    ) {
        self.rec(Record::QueryLaunched {
            query,
            device: d,
            kind: "async",
            market: Some(market),
        });
        if !self.devices[d.index()].knowledge.contains_key(&market) {
            self.rec(Record::QueryRefused {
                query,
                device: d,
                reason: "unknown_market",
            });
            return;
        }
        let itinerary = self.itinerary_for(d);
        let q = AsyncSmartQuery {
            id: query,
            predicate,
            initiator: d,
            itinerary,
            expected_results: expect,
            active_for,
            target_market: market,
        };
        self.devices[d.index()].async_recv.insert(query, AsyncRecv::default());
        self.geo_send_to_market(d, market, Payload::AsyncQuery { q });
    }

    /// Mandatory query meta-data: the declared itinerary when the device has
    /// one, otherwise an inferred straight line from the movement history.
    pub(crate) fn itinerary_for(&self, d: DeviceId) -> Itinerary {
        if let Some(declared) = self.world.declared_itinerary(d) {
            return declared;
        }
        let now = self.now();
        let here = self.world.position(d);
        let ahead = self.now().plus(self.cfg.predict_horizon);
        let predicted = self.world.predict_position(d, ahead).0;
        let mut wps = vec![Waypoint { at: now, pos: here }];
        if predicted != here {
            wps.push(Waypoint { at: ahead, pos: predicted });
        }
        Itinerary::new(wps, Src::Inferred).expect("strictly increasing times")
    }

    /// Register a query at the market: snapshot the match set, pull copies
    /// from hosts, and start emitting chunks.
    pub(crate) fn on_async_query_imm(&mut self, at: DeviceId, market: MarketId, q: AsyncSmartQuery) {
        let Some(key) = self.imm_key_of_pub(at, market) else { return };
        let now = self.now();
        let expires = now.plus(q.active_for);
        let query = q.id;
        self.rec(Record::QueryRegistered { market, by: at, query, expires });

        let matched: Vec<ItemId> = {
            let st = self.imm_state_ref(at, market).expect("live");
            st.item_meta
                .iter()
                .filter(|(_, m)| !m.expired(now) && q.predicate.matches(m))
                .map(|(i, _)| *i)
                .collect()
        };
        self.rec(Record::QueryMatch { market, query, items: matched.clone() });

        let residency = Residency {
            q,
            expires,
            emitted: BTreeSet::new(),
            pending: Vec::new(),
            awaiting: matched.iter().copied().collect(),
            next_seq: 0,
            sent_results: 0,
        };
        {
            let st = self.imm_state_mut(at, market).expect("live");
            st.resident.insert(query, residency);
        }
        let epoch = key.epoch;
        self.kernel
            .schedule(
                expires,
                Event::Timer(TimerKind::ResidencyExpiry { device: at, market, epoch, query }),
            )
            .expect("future");

        // Pull copies: one host per item, batched per host; self-hosted items
        // are answered from the local store.
        let mut by_host: BTreeMap<DeviceId, Vec<ItemId>> = BTreeMap::new();
        {
            let st = self.imm_state_ref(at, market).expect("live");
            for item in &matched {
                let host = st
                    .assignment_map
                    .get(item)
                    .and_then(|hosts| hosts.iter().next().copied());
                if let Some(h) = host {
                    by_host.entry(h).or_default().push(*item);
                } else {
                    // No settled host (copy in transit); it cannot be fetched now.
                }
            }
        }
        for (host, items) in by_host {
            if host == at {
                let found: Vec<InfoItem> = items
                    .iter()
                    .filter_map(|i| self.devices[at.index()].store.get(*i))
                    .filter(|s| !s.item.expired(now))
                    .map(|s| s.item.clone())
                    .collect();
                self.on_item_fetch_reply_imm(at, market, query, found);
            } else {
                self.market_send(
                    at,
                    market,
                    host,
                    Payload::ItemFetch { market, query, items, ack_to: key },
                );
            }
        }
        // Degenerate budget: nothing will ever be sent.
        self.emission_loop(at, market, query);
    }

    pub(crate) fn on_item_fetch(
        &mut self,
        at: DeviceId,
        market: MarketId,
        query: QueryId,
        items: Vec<ItemId>,
        ack_to: ImmKey,
    ) {
        let now = self.now();
        let found: Vec<InfoItem> = items
            .iter()
            .filter_map(|i| self.devices[at.index()].store.get(*i))
            .filter(|s| !s.item.expired(now))
            .map(|s| s.item.clone())
            .collect();
        if found.is_empty() {
            return;
        }
        self.market_send(
            at,
            market,
            ack_to.device,
            Payload::ItemFetchReply { market, query, items: found },
        );
    }

    pub(crate) fn on_item_fetch_reply_imm(
        &mut self,
        at: DeviceId,
        market: MarketId,
        query: QueryId,
        items: Vec<InfoItem>,
    ) {
        let now = self.now();
        {
            let Some(st) = self.imm_state_mut(at, market) else { return };
            let Some(r) = st.resident.get_mut(&query) else { return };
            for item in items {
                r.awaiting.remove(&item.id);
                if !r.emitted.contains(&item.id) && !item.expired(now) {
                    r.pending.push(item);
                }
            }
        }
        self.emission_loop(at, market, query);
    }

    /// A freshly stored publish may match resident queries.
    pub(crate) fn imm_offer_to_residents(&mut self, at: DeviceId, market: MarketId, item: &InfoItem) {
        let queries: Vec<QueryId> = {
            let Some(st) = self.imm_state_ref(at, market) else { return };
            st.resident
                .iter()
                .filter(|(_, r)| r.q.predicate.matches(item) && !r.emitted.contains(&item.id))
                .map(|(q, _)| *q)
                .collect()
        };
        for query in queries {
            self.rec(Record::QueryMatch { market, query, items: vec![item.id] });
            {
                let st = self.imm_state_mut(at, market).expect("live");
                let r = st.resident.get_mut(&query).expect("listed");
                r.pending.push(item.clone());
            }
            self.emission_loop(at, market, query);
        }
    }

    /// Emit full chunks while possible; the expected-result budget trims the
    /// final chunk to the exact count and finishes the residency.
    fn emission_loop(&mut self, at: DeviceId, market: MarketId, query: QueryId) {
        loop {
            let plan = {
                let Some(st) = self.imm_state_ref(at, market) else { return };
                let Some(r) = st.resident.get(&query) else { return };
                let pending = r.pending.len() as u32;
                match r.budget_left() {
                    Some(0) => Some((0, true)),
                    Some(b) if b <= pending => Some((b.min(self.cfg.chunk_size), b <= self.cfg.chunk_size)),
                    _ if pending >= self.cfg.chunk_size => Some((self.cfg.chunk_size, false)),
                    _ => None,
                }
            };
            let Some((take, is_final)) = plan else { return };
            self.emit_chunk(at, market, query, take as usize, is_final);
            if is_final {
                self.finish_residency(at, market, query, "satisfied");
                return;
            }
        }
    }

    fn emit_chunk(
        &mut self,
        at: DeviceId,
        market: MarketId,
        query: QueryId,
        take: usize,
        is_final: bool,
    ) {
        let (items, seq, initiator, itinerary) = {
            let st = self.imm_state_mut(at, market).expect("live");
            let r = st.resident.get_mut(&query).expect("resident");
            let take = take.min(r.pending.len());
            let items: Vec<InfoItem> = r.pending.drain(..take).collect();
            let seq = r.next_seq;
            r.next_seq += 1;
            r.sent_results += items.len() as u32;
            for i in &items {
                r.emitted.insert(i.id);
            }
            (items, seq, r.q.initiator, r.q.itinerary.clone())
        };
        self.rec(Record::ChunkEmitted {
            query,
            seq,
            items: items.iter().map(|i| i.id).collect(),
            is_final,
        });
        let meta = self.build_response_meta(at, market);
        let now = self.now();
        let here = self.world.position(at);
        // Rendezvous, iterated once: estimate travel to the current predicted
        // position, then re-evaluate the itinerary at arrival time.
        let rough = itinerary.position_at(now);
        let eta = self.travel_estimate(here, rough);
        let due = now.plus(eta);
        let rendezvous = itinerary.position_at(due);
        let chunk = ResultChunk {
            query,
            seq,
            items,
            is_final,
            meta,
            initiator,
            itinerary,
            leg: ChunkLeg { rendezvous, due, waited: false },
        };
        let radius = self.world.radio_range();
        self.geo_send(
            at,
            GeoTarget { point: rendezvous, radius },
            Payload::ResultChunk { chunk },
        );
    }

    pub(crate) fn on_residency_expiry(
        &mut self,
        d: DeviceId,
        market: MarketId,
        epoch: u64,
        query: QueryId,
    ) {
        if self.imm_key_of_pub(d, market).map(|k| k.epoch) != Some(epoch) {
            return;
        }
        if self.imm_state_ref(d, market).and_then(|st| st.resident.get(&query)).is_none() {
            return;
        }
        // Flush the remainder; the last piece carries the final flag, and an
        // empty final chunk closes a residency that found nothing.
        loop {
            let left = {
                let st = self.imm_state_ref(d, market).expect("live");
                st.resident.get(&query).map(|r| r.pending.len()).unwrap_or(0)
            };
            let take = left.min(self.cfg.chunk_size as usize);
            let is_final = left <= self.cfg.chunk_size as usize;
            self.emit_chunk(d, market, query, take, is_final);
            if is_final {
                break;
            }
        }
        self.finish_residency(d, market, query, "expired");
    }

    fn finish_residency(&mut self, d: DeviceId, market: MarketId, query: QueryId, reason: &'static str) {
        let st = self.imm_state_mut(d, market).expect("live");
        st.resident.remove(&query);
        self.rec(Record::QueryFinished { market, query, reason });
    }

    pub(crate) fn build_response_meta(&self, d: DeviceId, market: MarketId) -> ResponseMeta {
        let mut markets: BTreeMap<MarketId, MarketKnowledge> =
            self.devices[d.index()].knowledge.clone();
        let spec = self.market_spec(market);
        let types = self
            .imm_state_ref(d, market)
            .map(|st| st.type_index.clone())
            .unwrap_or_default();
        markets.insert(
            market,
            MarketKnowledge {
                market,
                center: spec.center,
                radius: spec.radius,
                core_radius: spec.core_radius,
                types,
                as_of: self.now(),
            },
        );
        ResponseMeta {
            markets: markets.into_values().collect(),
        }
    }

    // ------------------------------------------------------------------
    // Chunk delivery to a moving initiator

    /// A chunk reached its rendezvous area: probe 2 hops for the initiator.
    pub(crate) fn chunk_arrived(&mut self, holder: DeviceId, msg: Message) {
        let Payload::ResultChunk { chunk } = &msg.payload else {
            unreachable!()
        };
        if holder == chunk.initiator {
            let Payload::ResultChunk { chunk } = msg.payload else {
                unreachable!()
            };
            self.receive_chunk(holder, chunk);
            return;
        }
        let token = self.fresh_token();
        let initiator = chunk.initiator;
        self.devices[holder.index()].chunk_probes.push(ChunkProbe { token, msg });
        self.flood_from(
            holder,
            FloodScope::Neighborhood,
            2,
            Addressee::Device(initiator),
            Payload::InitiatorProbe {
                token,
                initiator,
                holder,
                path: vec![holder],
            },
        );
        self.kernel.schedule_in(
            self.cfg.initiator_probe_wait(),
            Event::Timer(TimerKind::InitiatorProbeDeadline { device: holder, token }),
        );
    }

    /// The initiator answers a probe with the relay path the chunk should use.
    pub(crate) fn on_initiator_probe(
        &mut self,
        at: DeviceId,
        token: u64,
        initiator: DeviceId,
        _holder: DeviceId,
        path: Vec<DeviceId>,
    ) {
        debug_assert_eq!(at, initiator);
        // path = [holder, relays...]; the chunk travels relays -> initiator.
        let mut chunk_path: Vec<DeviceId> = path[1..].to_vec();
        chunk_path.push(initiator);
        let reply_path: Vec<DeviceId> = path.into_iter().rev().collect();
        self.chain_send(
            at,
            reply_path,
            Payload::InitiatorProbeReply { token, chunk_path },
        );
    }

    pub(crate) fn on_initiator_probe_reply(
        &mut self,
        at: DeviceId,
        token: u64,
        chunk_path: Vec<DeviceId>,
    ) {
        let Some(pos) = self.devices[at.index()]
            .chunk_probes
            .iter()
            .position(|p| p.token == token)
        else {
            return;
        };
        let probe = self.devices[at.index()].chunk_probes.remove(pos);
        self.chain_send(at, chunk_path, probe.msg.payload);
    }

    /// Probe unanswered: wait for the rendezvous time once, then advance to
    /// the itinerary's next waypoint, and give up after the last one.
    pub(crate) fn on_initiator_probe_deadline(&mut self, d: DeviceId, token: u64) {
        let Some(pos) = self.devices[d.index()]
            .chunk_probes
            .iter()
            .position(|p| p.token == token)
        else {
            return;
        };
        let probe = self.devices[d.index()].chunk_probes.remove(pos);
        let mut msg = probe.msg;
        let now = self.now();
        let (due, waited) = {
            let Payload::ResultChunk { chunk } = &msg.payload else {
                unreachable!()
            };
            (chunk.leg.due, chunk.leg.waited)
        };
        if !waited && due > now {
            if let Payload::ResultChunk { chunk } = &mut msg.payload {
                chunk.leg.waited = true;
            }
            let token = self.fresh_token();
            self.devices[d.index()].waiting_chunks.push(WaitingChunk { token, msg });
            self.kernel
                .schedule(due, Event::Timer(TimerKind::ChunkWait { device: d, token }))
                .expect("future");
            return;
        }
        self.advance_chunk_leg(d, msg);
    }

    pub(crate) fn on_chunk_wait(&mut self, d: DeviceId, token: u64) {
        let Some(pos) = self.devices[d.index()]
            .waiting_chunks
            .iter()
            .position(|w| w.token == token)
        else {
            return;
        };
        let w = self.devices[d.index()].waiting_chunks.remove(pos);
        // Probe again now that the initiator is due here.
        self.chunk_arrived(d, w.msg);
    }

    fn advance_chunk_leg(&mut self, d: DeviceId, mut msg: Message) {
        let now = self.now();
        let next = {
            let Payload::ResultChunk { chunk } = &msg.payload else {
                unreachable!()
            };
            chunk.itinerary.next_after(now)
        };
        match next {
            Some((_, wp)) => {
                let radius = self.world.radio_range();
                if let Payload::ResultChunk { chunk } = &mut msg.payload {
                    chunk.leg = ChunkLeg {
                        rendezvous: wp.pos,
                        due: wp.at,
                        waited: false,
                    };
                }
                msg.route = Route::Geo {
                    target: GeoTarget { point: wp.pos, radius },
                    prev: None,
                };
                self.geo_step(d, msg);
            }
            None => {
                let Payload::ResultChunk { chunk } = &msg.payload else {
                    unreachable!()
                };
                self.rec(Record::ChunkUndelivered {
                    query: chunk.query,
                    seq: chunk.seq,
                    reason: "itinerary_exhausted",
                });
            }
        }
    }

    /// Initiator-side merge: dedup by (query, chunk seq), then absorb the
    /// response meta-data into the known-markets directory.
    pub(crate) fn receive_chunk(&mut self, at: DeviceId, chunk: ResultChunk) {
        let fresh = {
            let rcv = self.devices[at.index()]
                .async_recv
                .entry(chunk.query)
                .or_default();
            rcv.chunks_seen.insert(chunk.seq)
        };
        if !fresh {
            return;
        }
        {
            let rcv = self.devices[at.index()]
                .async_recv
                .get_mut(&chunk.query)
                .expect("present");
            for item in &chunk.items {
                rcv.items.insert(item.id, item.clone());
            }
            if chunk.is_final {
                rcv.final_seen = true;
            }
        }
        self.rec(Record::ChunkDelivered {
            query: chunk.query,
            seq: chunk.seq,
            device: at,
        });
        let changed = merge_market_knowledge(&mut self.devices[at.index()].knowledge, &chunk.meta);
        for m in changed {
            self.devices[at.index()]
                .provenance
                .entry(m)
                .or_insert(Provenance::Response);
            let as_of = self.devices[at.index()].knowledge[&m].as_of;
            self.rec(Record::DirectoryMerged { device: at, market: m, as_of });
        }
    }
}
