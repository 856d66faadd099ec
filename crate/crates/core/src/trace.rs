//! Structured run trace: one record per protocol state transition, message
//! send/delivery/drop, role change, assignment, repair, and loss.
//!
//! Records are strictly ordered by (time, seq) and render to a stable
//! tab-separated line format, so traces of equal (scenario, seed) runs are
//! byte-identical. Metrics and audits are pure functions of this trace.

use std::fmt::Write as _;

use crate::ids::{DeviceId, ItemId, MarketId, MsgId, QueryId};
use crate::market::Role;
use crate::simkernel::SimTime;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DropReason {
    Duplicate,
    OutsideRegion,
    OfflineReceiver,
    ChainBroken,
    Late,
    StaleImm,
    HolderCrashed,
    Stranded,
    Evaporated,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Duplicate => "duplicate",
            DropReason::OutsideRegion => "outside_region",
            DropReason::OfflineReceiver => "offline_receiver",
            DropReason::ChainBroken => "chain_broken",
            DropReason::Late => "late",
            DropReason::StaleImm => "stale_imm",
            DropReason::HolderCrashed => "holder_crashed",
            DropReason::Stranded => "stranded",
            DropReason::Evaporated => "evaporated",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LossCause {
    CrashHolder,
    CrashReceiver,
    Evaporated,
    Stranded,
    Shutdown,
}

impl LossCause {
    pub fn as_str(self) -> &'static str {
        match self {
            LossCause::CrashHolder => "crash_holder",
            LossCause::CrashReceiver => "crash_receiver",
            LossCause::Evaporated => "evaporated",
            LossCause::Stranded => "stranded",
            LossCause::Shutdown => "shutdown",
        }
    }

    /// Losses through crashes, as opposed to graceful paths.
    pub fn is_crash(self) -> bool {
        matches!(self, LossCause::CrashHolder | LossCause::CrashReceiver)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RemoveReason {
    Transfer,
    Expired,
    DropCmd,
    Crash,
    Shutdown,
}

impl RemoveReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RemoveReason::Transfer => "transfer",
            RemoveReason::Expired => "expired",
            RemoveReason::DropCmd => "drop_cmd",
            RemoveReason::Crash => "crash",
            RemoveReason::Shutdown => "shutdown",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SignOffReason {
    Leave,
    Shutdown,
}

impl SignOffReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SignOffReason::Leave => "leave",
            SignOffReason::Shutdown => "shutdown",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ImmCreateReason {
    ProbeTimeout,
    Handoff,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ImmEndReason {
    Election,
    Handoff,
    Exit,
    Crash,
    Shutdown,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SendTarget {
    Device(DeviceId),
    Broadcast(u32),
    Geo,
}

/// One trace record. Fields named `by` identify the acting IMM device so that
/// audits can verify deactivated IMMs never act again.
#[derive(Clone, PartialEq, Debug)]
pub enum Record {
    MsgSend {
        msg: MsgId,
        kind: &'static str,
        from: DeviceId,
        to: SendTarget,
        hops: u32,
        items: Vec<ItemId>,
    },
    MsgDeliver {
        msg: MsgId,
        kind: &'static str,
        at: DeviceId,
        from: DeviceId,
        hops: u32,
    },
    /// First-time processing of a flood message at a device.
    MsgProcess { msg: MsgId, at: DeviceId },
    MsgDrop {
        msg: MsgId,
        kind: &'static str,
        at: DeviceId,
        reason: DropReason,
        items: Vec<ItemId>,
    },
    RoleChange {
        device: DeviceId,
        market: Option<MarketId>,
        from: Role,
        to: Role,
    },
    MarketEnter { device: DeviceId, market: MarketId },
    MarketLeave { device: DeviceId, market: MarketId },
    ImmCreated {
        market: MarketId,
        device: DeviceId,
        epoch: u64,
        reason: ImmCreateReason,
    },
    ImmDeactivated {
        market: MarketId,
        device: DeviceId,
        epoch: u64,
        reason: ImmEndReason,
    },
    ElectionResolved {
        market: MarketId,
        winner: DeviceId,
        winner_epoch: u64,
        loser: DeviceId,
        loser_epoch: u64,
    },
    ImmHandoffSent {
        market: MarketId,
        from: DeviceId,
        to: DeviceId,
        epoch: u64,
        state_items: u64,
    },
    PublishRequested {
        device: DeviceId,
        item: ItemId,
        market: Option<MarketId>,
        degree: u32,
        size: u64,
        tag: String,
    },
    PublishAcked { device: DeviceId, item: ItemId },
    PublishRefused { item: ItemId, reason: &'static str },
    ItemAssigned {
        market: MarketId,
        by: DeviceId,
        item: ItemId,
        hosts: Vec<DeviceId>,
        degree: u32,
        degraded: bool,
    },
    ItemStored {
        device: DeviceId,
        item: ItemId,
        replica: bool,
        size: u64,
    },
    ItemRemoved {
        device: DeviceId,
        item: ItemId,
        reason: RemoveReason,
    },
    /// A copy discarded without a device store change (surplus returns,
    /// expired copies in transit).
    ItemDiscarded { item: ItemId, reason: &'static str },
    ItemLost {
        item: ItemId,
        acked: bool,
        cause: LossCause,
    },
    RegistryUpdate {
        market: MarketId,
        by: DeviceId,
        item: ItemId,
        degree: u32,
        hosts: Vec<DeviceId>,
    },
    RepairStarted {
        market: MarketId,
        by: DeviceId,
        item: ItemId,
        via: DeviceId,
        to: DeviceId,
    },
    RepairDeferred { market: MarketId, item: ItemId },
    SignOffSent {
        device: DeviceId,
        market: MarketId,
        replicas: Vec<ItemId>,
        reason: SignOffReason,
    },
    Crashed {
        device: DeviceId,
        stored: Vec<ItemId>,
        carried_msgs: u64,
    },
    ShutdownDone { device: DeviceId },
    QueryLaunched {
        query: QueryId,
        device: DeviceId,
        kind: &'static str,
        market: Option<MarketId>,
    },
    QueryRefused {
        query: QueryId,
        device: DeviceId,
        reason: &'static str,
    },
    SyncCompleted {
        query: QueryId,
        device: DeviceId,
        items: Vec<ItemId>,
    },
    QueryRegistered {
        market: MarketId,
        by: DeviceId,
        query: QueryId,
        expires: SimTime,
    },
    /// Items added to the market-side match set of a resident query.
    QueryMatch {
        market: MarketId,
        query: QueryId,
        items: Vec<ItemId>,
    },
    QueryFinished {
        market: MarketId,
        query: QueryId,
        reason: &'static str,
    },
    ChunkEmitted {
        query: QueryId,
        seq: u32,
        items: Vec<ItemId>,
        is_final: bool,
    },
    ChunkDelivered {
        query: QueryId,
        seq: u32,
        device: DeviceId,
    },
    ChunkUndelivered {
        query: QueryId,
        seq: u32,
        reason: &'static str,
    },
    DirectoryMerged {
        device: DeviceId,
        market: MarketId,
        as_of: SimTime,
    },
}

#[derive(Clone, PartialEq, Debug)]
pub struct TraceRecord {
    pub time: SimTime,
    pub seq: u64,
    pub record: Record,
}

/// In-memory trace plus the name tables used to render it.
pub struct TraceLog {
    pub device_names: Vec<String>,
    pub market_names: Vec<String>,
    pub item_names: Vec<String>,
    records: Vec<TraceRecord>,
    next_seq: u64,
}

impl TraceLog {
    pub fn new(device_names: Vec<String>, market_names: Vec<String>, item_names: Vec<String>) -> Self {
        TraceLog {
            device_names,
            market_names,
            item_names,
            records: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn push(&mut self, time: SimTime, record: Record) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.records.push(TraceRecord { time, seq, record });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn device(&self, d: DeviceId) -> &str {
        &self.device_names[d.index()]
    }

    pub fn market(&self, m: MarketId) -> &str {
        &self.market_names[m.index()]
    }

    pub fn item(&self, i: ItemId) -> &str {
        &self.item_names[i.index()]
    }

    /// Render the whole trace in the stable line format.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            self.render_record(rec, &mut out);
            out.push('\n');
        }
        out
    }

    fn devs(&self, ids: &[DeviceId]) -> String {
        ids.iter()
            .map(|d| self.device(*d).to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    fn items(&self, ids: &[ItemId]) -> String {
        ids.iter()
            .map(|i| self.item(*i).to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    fn render_record(&self, rec: &TraceRecord, out: &mut String) {
        let _ = write!(out, "{}\t{}\t", rec.time, rec.seq);
        let w = out;
        match &rec.record {
            Record::MsgSend { msg, kind, from, to, hops, items } => {
                let to = match to {
                    SendTarget::Device(d) => self.device(*d).to_string(),
                    SendTarget::Broadcast(n) => format!("bcast:{n}"),
                    SendTarget::Geo => "geo".to_string(),
                };
                let _ = write!(w, "msg_send\tmsg={msg} kind={kind} from={} to={to} hops={hops}", self.device(*from));
                if !items.is_empty() {
                    let _ = write!(w, " items={}", self.items(items));
                }
            }
            Record::MsgDeliver { msg, kind, at, from, hops } => {
                let _ = write!(w, "msg_deliver\tmsg={msg} kind={kind} at={} from={} hops={hops}", self.device(*at), self.device(*from));
            }
            Record::MsgProcess { msg, at } => {
                let _ = write!(w, "msg_process\tmsg={msg} at={}", self.device(*at));
            }
            Record::MsgDrop { msg, kind, at, reason, items } => {
                let _ = write!(w, "msg_drop\tmsg={msg} kind={kind} at={} reason={}", self.device(*at), reason.as_str());
                if !items.is_empty() {
                    let _ = write!(w, " items={}", self.items(items));
                }
            }
            Record::RoleChange { device, market, from, to } => {
                let m = market.map(|m| self.market(m).to_string()).unwrap_or_else(|| "-".into());
                let _ = write!(w, "role_change\tdevice={} market={m} from={from} to={to}", self.device(*device));
            }
            Record::MarketEnter { device, market } => {
                let _ = write!(w, "market_enter\tdevice={} market={}", self.device(*device), self.market(*market));
            }
            Record::MarketLeave { device, market } => {
                let _ = write!(w, "market_leave\tdevice={} market={}", self.device(*device), self.market(*market));
            }
            Record::ImmCreated { market, device, epoch, reason } => {
                let r = match reason {
                    ImmCreateReason::ProbeTimeout => "probe_timeout",
                    ImmCreateReason::Handoff => "handoff",
                };
                let _ = write!(w, "imm_created\tmarket={} device={} epoch={epoch} reason={r}", self.market(*market), self.device(*device));
            }
            Record::ImmDeactivated { market, device, epoch, reason } => {
                let r = match reason {
                    ImmEndReason::Election => "election",
                    ImmEndReason::Handoff => "handoff",
                    ImmEndReason::Exit => "exit",
                    ImmEndReason::Crash => "crash",
                    ImmEndReason::Shutdown => "shutdown",
                };
                let _ = write!(w, "imm_deactivated\tmarket={} device={} epoch={epoch} reason={r}", self.market(*market), self.device(*device));
            }
            Record::ElectionResolved { market, winner, winner_epoch, loser, loser_epoch } => {
                let _ = write!(w, "election\tmarket={} winner={}@{winner_epoch} loser={}@{loser_epoch}", self.market(*market), self.device(*winner), self.device(*loser));
            }
            Record::ImmHandoffSent { market, from, to, epoch, state_items } => {
                let _ = write!(w, "imm_handoff\tmarket={} from={} to={} epoch={epoch} state_items={state_items}", self.market(*market), self.device(*from), self.device(*to));
            }
            Record::PublishRequested { device, item, market, degree, size, tag } => {
                let m = market.map(|m| self.market(m).to_string()).unwrap_or_else(|| "-".into());
                let _ = write!(w, "publish_req\tdevice={} item={} market={m} degree={degree} size={size} tag={tag}", self.device(*device), self.item(*item));
            }
            Record::PublishAcked { device, item } => {
                let _ = write!(w, "publish_ack\tdevice={} item={}", self.device(*device), self.item(*item));
            }
            Record::PublishRefused { item, reason } => {
                let _ = write!(w, "publish_refused\titem={} reason={reason}", self.item(*item));
            }
            Record::ItemAssigned { market, by, item, hosts, degree, degraded } => {
                let _ = write!(w, "item_assigned\tmarket={} by={} item={} hosts={} degree={degree} degraded={degraded}", self.market(*market), self.device(*by), self.item(*item), self.devs(hosts));
            }
            Record::ItemStored { device, item, replica, size } => {
                let _ = write!(w, "item_stored\tdevice={} item={} replica={replica} size={size}", self.device(*device), self.item(*item));
            }
            Record::ItemRemoved { device, item, reason } => {
                let _ = write!(w, "item_removed\tdevice={} item={} reason={}", self.device(*device), self.item(*item), reason.as_str());
            }
            Record::ItemDiscarded { item, reason } => {
                let _ = write!(w, "item_discarded\titem={} reason={reason}", self.item(*item));
            }
            Record::ItemLost { item, acked, cause } => {
                let _ = write!(w, "item_lost\titem={} acked={acked} cause={}", self.item(*item), cause.as_str());
            }
            Record::RegistryUpdate { market, by, item, degree, hosts } => {
                let _ = write!(w, "registry\tmarket={} by={} item={} degree={degree} hosts={}", self.market(*market), self.device(*by), self.item(*item), self.devs(hosts));
            }
            Record::RepairStarted { market, by, item, via, to } => {
                let _ = write!(w, "repair_start\tmarket={} by={} item={} via={} to={}", self.market(*market), self.device(*by), self.item(*item), self.device(*via), self.device(*to));
            }
            Record::RepairDeferred { market, item } => {
                let _ = write!(w, "repair_deferred\tmarket={} item={}", self.market(*market), self.item(*item));
            }
            Record::SignOffSent { device, market, replicas, reason } => {
                let _ = write!(w, "sign_off\tdevice={} market={} reason={} replicas={}", self.device(*device), self.market(*market), reason.as_str(), self.items(replicas));
            }
            Record::Crashed { device, stored, carried_msgs } => {
                let _ = write!(w, "crash\tdevice={} stored={} carried_msgs={carried_msgs}", self.device(*device), self.items(stored));
            }
            Record::ShutdownDone { device } => {
                let _ = write!(w, "shutdown\tdevice={}", self.device(*device));
            }
            Record::QueryLaunched { query, device, kind, market } => {
                let m = market.map(|m| self.market(m).to_string()).unwrap_or_else(|| "-".into());
                let _ = write!(w, "query_launch\tquery={query} device={} kind={kind} market={m}", self.device(*device));
            }
            Record::QueryRefused { query, device, reason } => {
                let _ = write!(w, "query_refused\tquery={query} device={} reason={reason}", self.device(*device));
            }
            Record::SyncCompleted { query, device, items } => {
                let _ = write!(w, "sync_done\tquery={query} device={} items={}", self.device(*device), self.items(items));
            }
            Record::QueryRegistered { market, by, query, expires } => {
                let _ = write!(w, "query_registered\tmarket={} by={} query={query} expires={expires}", self.market(*market), self.device(*by));
            }
            Record::QueryMatch { market, query, items } => {
                let _ = write!(w, "query_match\tmarket={} query={query} items={}", self.market(*market), self.items(items));
            }
            Record::QueryFinished { market, query, reason } => {
                let _ = write!(w, "query_finished\tmarket={} query={query} reason={reason}", self.market(*market));
            }
            Record::ChunkEmitted { query, seq, items, is_final } => {
                let _ = write!(w, "chunk_emitted\tquery={query} seq={seq} final={is_final} items={}", self.items(items));
            }
            Record::ChunkDelivered { query, seq, device } => {
                let _ = write!(w, "chunk_delivered\tquery={query} seq={seq} device={}", self.device(*device));
            }
            Record::ChunkUndelivered { query, seq, reason } => {
                let _ = write!(w, "chunk_undelivered\tquery={query} seq={seq} reason={reason}");
            }
            Record::DirectoryMerged { device, market, as_of } => {
                let _ = write!(w, "directory_merged\tdevice={} market={} as_of={as_of}", self.device(*device), self.market(*market));
            }
        }
    }
}
