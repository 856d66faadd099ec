//! Trace-driven audits: the testable forms of the protocol invariants. Each
//! audit is a pure function of the trace and reports every violation it finds.

use std::collections::{BTreeMap, BTreeSet};

use crate::ids::{DeviceId, ItemId, MarketId, MsgId, QueryId};
use crate::trace::{LossCause, Record, TraceLog};

/// No device processes the same flood message id twice.
pub fn flood_duplicate_processing(trace: &TraceLog) -> Vec<String> {
    let mut seen: BTreeSet<(MsgId, DeviceId)> = BTreeSet::new();
    let mut violations = Vec::new();
    for rec in trace.records() {
        if let Record::MsgProcess { msg, at } = &rec.record {
            if !seen.insert((*msg, *at)) {
                violations.push(format!(
                    "t={} device {} processed {} twice",
                    rec.time,
                    trace.device(*at),
                    msg
                ));
            }
        }
    }
    violations
}

/// Devices a flood message id was processed at (its reach set).
pub fn flood_reach(trace: &TraceLog, msg: MsgId) -> BTreeSet<DeviceId> {
    trace
        .records()
        .iter()
        .filter_map(|r| match &r.record {
            Record::MsgProcess { msg: m, at } if *m == msg => Some(*at),
            _ => None,
        })
        .collect()
}

/// IMM epochs per market strictly increase over the run, except that
/// simultaneous creations may share an epoch (the race the election resolves).
/// Valid as long as a market never empties completely, which wipes all epoch
/// knowledge.
pub fn epochs_strictly_increase(trace: &TraceLog) -> Vec<String> {
    let mut last: BTreeMap<MarketId, (u64, crate::simkernel::SimTime)> = BTreeMap::new();
    let mut violations = Vec::new();
    for rec in trace.records() {
        if let Record::ImmCreated { market, epoch, device, .. } = &rec.record {
            if let Some((prev, prev_time)) = last.get(market) {
                let concurrent_peer = epoch == prev && rec.time == *prev_time;
                if *epoch < *prev || (*epoch == *prev && !concurrent_peer) {
                    violations.push(format!(
                        "t={} market {} epoch {} (device {}) not above {}",
                        rec.time,
                        trace.market(*market),
                        epoch,
                        trace.device(*device),
                        prev
                    ));
                }
            }
            if last.get(market).map(|(p, _)| epoch > p).unwrap_or(true) {
                last.insert(*market, (*epoch, rec.time));
            }
        }
    }
    violations
}

/// Deactivated IMM incarnations never act again: every IMM action must come
/// from the device currently holding the newest created-and-not-deactivated
/// incarnation of its market.
pub fn deactivated_imms_never_act(trace: &TraceLog) -> Vec<String> {
    let mut live: BTreeMap<MarketId, BTreeSet<DeviceId>> = BTreeMap::new();
    let mut violations = Vec::new();
    for rec in trace.records() {
        match &rec.record {
            Record::ImmCreated { market, device, .. } => {
                live.entry(*market).or_default().insert(*device);
            }
            Record::ImmDeactivated { market, device, .. } => {
                live.entry(*market).or_default().remove(device);
            }
            Record::ItemAssigned { market, by, .. }
            | Record::RegistryUpdate { market, by, .. }
            | Record::RepairStarted { market, by, .. }
            | Record::QueryRegistered { market, by, .. } => {
                let ok = live.get(market).map(|s| s.contains(by)).unwrap_or(false);
                if !ok {
                    violations.push(format!(
                        "t={} {} acted for market {} while not a live imm",
                        rec.time,
                        trace.device(*by),
                        trace.market(*market)
                    ));
                }
            }
            Record::ImmHandoffSent { market, from, .. } => {
                // The handoff record precedes the deactivation record.
                let ok = live.get(market).map(|s| s.contains(from)).unwrap_or(false);
                if !ok {
                    violations.push(format!(
                        "t={} {} handed off market {} while not a live imm",
                        rec.time,
                        trace.device(*from),
                        trace.market(*market)
                    ));
                }
            }
            _ => {}
        }
    }
    violations
}

/// Items lost through anything other than a crash. Graceful movement must
/// never lose information; shutdowns may only lose unreplicated copies (which
/// the caller can allow or not).
pub fn non_crash_losses(trace: &TraceLog, allow_shutdown: bool) -> Vec<String> {
    let mut violations = Vec::new();
    for rec in trace.records() {
        if let Record::ItemLost { item, acked, cause } = &rec.record {
            let fine = cause.is_crash() || (allow_shutdown && *cause == LossCause::Shutdown);
            if !fine {
                violations.push(format!(
                    "t={} item {} (acked={}) lost via {}",
                    rec.time,
                    trace.item(*item),
                    acked,
                    cause.as_str()
                ));
            }
        }
    }
    violations
}

/// All losses recorded in the trace.
pub fn losses(trace: &TraceLog) -> Vec<(ItemId, bool, LossCause)> {
    trace
        .records()
        .iter()
        .filter_map(|r| match &r.record {
            Record::ItemLost { item, acked, cause } => Some((*item, *acked, *cause)),
            _ => None,
        })
        .collect()
}

/// Per-query chunk accounting: emitted, delivered, undelivered.
pub struct ChunkAccount {
    pub emitted: BTreeSet<(QueryId, u32)>,
    pub delivered: BTreeSet<(QueryId, u32)>,
    pub undelivered: BTreeSet<(QueryId, u32)>,
}

pub fn chunk_account(trace: &TraceLog) -> ChunkAccount {
    let mut acc = ChunkAccount {
        emitted: BTreeSet::new(),
        delivered: BTreeSet::new(),
        undelivered: BTreeSet::new(),
    };
    for rec in trace.records() {
        match &rec.record {
            Record::ChunkEmitted { query, seq, .. } => {
                acc.emitted.insert((*query, *seq));
            }
            Record::ChunkDelivered { query, seq, .. } => {
                acc.delivered.insert((*query, *seq));
            }
            Record::ChunkUndelivered { query, seq, .. } => {
                acc.undelivered.insert((*query, *seq));
            }
            _ => {}
        }
    }
    acc
}

/// Market-side match sets per async query (union of all match records).
pub fn query_match_sets(trace: &TraceLog) -> BTreeMap<QueryId, BTreeSet<ItemId>> {
    let mut sets: BTreeMap<QueryId, BTreeSet<ItemId>> = BTreeMap::new();
    for rec in trace.records() {
        if let Record::QueryMatch { query, items, .. } = &rec.record {
            sets.entry(*query).or_default().extend(items.iter().copied());
        }
    }
    sets
}

/// Items delivered to initiators per async query, from chunk emission and
/// delivery records.
pub fn query_delivered_sets(trace: &TraceLog) -> BTreeMap<QueryId, BTreeSet<ItemId>> {
    let mut emitted: BTreeMap<(QueryId, u32), Vec<ItemId>> = BTreeMap::new();
    for rec in trace.records() {
        if let Record::ChunkEmitted { query, seq, items, .. } = &rec.record {
            emitted.insert((*query, *seq), items.clone());
        }
    }
    let mut delivered: BTreeMap<QueryId, BTreeSet<ItemId>> = BTreeMap::new();
    for rec in trace.records() {
        if let Record::ChunkDelivered { query, seq, .. } = &rec.record {
            if let Some(items) = emitted.get(&(*query, *seq)) {
                delivered.entry(*query).or_default().extend(items.iter().copied());
            }
        }
    }
    delivered
}

/// Every directory entry a device ever merged must be traceable to a response
/// in the trace (config-seeded entries never produce merge records).
pub fn directory_merges(trace: &TraceLog) -> Vec<(DeviceId, MarketId)> {
    trace
        .records()
        .iter()
        .filter_map(|r| match &r.record {
            Record::DirectoryMerged { device, market, .. } => Some((*device, *market)),
            _ => None,
        })
        .collect()
}
