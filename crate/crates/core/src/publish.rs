//! Publishing: context-aware market selection and the transfer of new items
//! to the chosen market's IMM.

use std::collections::BTreeMap;

use crate::broker::InfoItem;
use crate::ids::MarketId;
use crate::query::MarketKnowledge;
use crate::world::Position;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SelectionPolicy {
    /// Market whose type summary counts the most items of the item's tag;
    /// ties go to the nearer market, then the lower market id.
    BestFitType,
    /// Market with the nearest center; ties go to the lower market id.
    NearestMarket,
}

#[derive(Clone, PartialEq, Debug)]
pub struct PublishRequest {
    pub item: InfoItem,
    pub policy: SelectionPolicy,
}

/// Pick a target market from the device's known-markets directory. Returns
/// None when the directory is empty.
pub fn select_market(
    directory: &BTreeMap<MarketId, MarketKnowledge>,
    policy: SelectionPolicy,
    from: Position,
    type_tag: &str,
) -> Option<MarketId> {
    let score = |know: &MarketKnowledge| -> (u32, f64, MarketId) {
        let count = know.types.get(type_tag).copied().unwrap_or(0);
        (count, from.dist(know.center), know.market)
    };
    let mut best: Option<(u32, f64, MarketId)> = None;
    for know in directory.values() {
        let s = score(know);
        let better = match (&best, policy) {
            (None, _) => true,
            (Some(b), SelectionPolicy::BestFitType) => {
                s.0 > b.0 || (s.0 == b.0 && (s.1 < b.1 || (s.1 == b.1 && s.2 < b.2)))
            }
            (Some(b), SelectionPolicy::NearestMarket) => s.1 < b.1 || (s.1 == b.1 && s.2 < b.2),
        };
        if better {
            best = Some(s);
        }
    }
    best.map(|(_, _, id)| id)
}


// ---------------------------------------------------------------------------
// Protocol implementation

use crate::engine::Simulation;
use crate::ids::{DeviceId, ItemId};
use crate::market::StoreOrigin;
use crate::trace::Record;
use crate::transport::Payload;
use std::collections::BTreeSet;

impl Simulation {
    /// Application-side publish: pick a market from the directory and send the
    /// item toward its center with the same forwarding as remote queries.
    pub(crate) fn workload_publish(&mut self, d: DeviceId, item: InfoItem, policy: SelectionPolicy) {
        let market = select_market(
            &self.devices[d.index()].knowledge,
            policy,
            self.world.position(d),
            &item.type_tag,
        );
        self.rec(Record::PublishRequested {
            device: d,
            item: item.id,
            market,
            degree: item.replication_degree,
            size: item.size,
            tag: item.type_tag.clone(),
        });
        let Some(market) = market else {
            self.rec(Record::PublishRefused {
                item: item.id,
                reason: "no_known_market",
            });
            return;
        };
        self.written_off.remove(&item.id);
        self.copy_created(item.id);
        let token = self.fresh_token();
        self.geo_send_to_market(
            d,
            market,
            Payload::PublishItem { market, publisher: d, item, token },
        );
    }

    /// The IMM receives a published item: capacity-greedy assignment to
    /// `replication_degree` distinct hosts, degraded when fewer fit, refused
    /// when none does. Re-publishing an already hosted id is acknowledged
    /// without inserting again.
    pub(crate) fn on_publish_item_imm(
        &mut self,
        at: DeviceId,
        market: MarketId,
        publisher: DeviceId,
        item: InfoItem,
        token: u64,
    ) {
        self.copy_destroyed(item.id, None); // the carried copy is consumed here
        let now = self.now();
        if item.expired(now) {
            self.written_off.insert(item.id);
            self.rec(Record::PublishRefused { item: item.id, reason: "expired" });
            self.send_publisher_response(
                at,
                publisher,
                Payload::PublishNack { publisher, item: item.id, token, reason: "expired" },
            );
            return;
        }
        let already_hosted = self
            .imm_state_ref(at, market)
            .and_then(|st| st.assignment_map.get(&item.id))
            .map(|hosts| !hosts.is_empty())
            .unwrap_or(false);
        if already_hosted {
            self.send_publisher_response(
                at,
                publisher,
                Payload::PublishAck { publisher, item: item.id, token },
            );
            return;
        }
        let degree = item.replication_degree;
        let plan = {
            let st = self.imm_state_ref(at, market).expect("live imm");
            crate::market::choose_hosts(&st.capacity_table, &BTreeSet::new(), item.size, degree)
        };
        if plan.is_empty() {
            self.written_off.insert(item.id);
            self.rec(Record::PublishRefused { item: item.id, reason: "no_capacity" });
            self.send_publisher_response(
                at,
                publisher,
                Payload::PublishNack { publisher, item: item.id, token, reason: "no_capacity" },
            );
            return;
        }
        let degraded = (plan.len() as u32) < degree;
        let replica = degree > 1;
        {
            let st = self.imm_state_mut(at, market).expect("live imm");
            st.item_meta.insert(item.id, item.meta_only());
            st.assignment_map.entry(item.id).or_default();
            if replica {
                st.replica_registry
                    .entry(item.id)
                    .or_insert_with(|| crate::market::ReplicaEntry {
                        degree,
                        hosts: BTreeSet::new(),
                    });
            }
            st.type_index = st.recount_type_index();
            st.pending_publishes.insert(
                token,
                crate::market::PublishProgress {
                    item: item.clone(),
                    publisher,
                    outstanding: plan.len() as u32,
                    any_stored: false,
                    acked: false,
                },
            );
        }
        self.rec(Record::ItemAssigned {
            market,
            by: at,
            item: item.id,
            hosts: plan.clone(),
            degree,
            degraded,
        });
        for host in plan {
            self.dispatch_store_to_pub(
                at,
                market,
                item.clone(),
                replica,
                host,
                StoreOrigin::Publish { publish_token: token },
            );
        }
    }

    pub(crate) fn on_publish_ack(&mut self, at: DeviceId, item: ItemId) {
        self.acked.insert(item);
        self.rec(Record::PublishAcked { device: at, item });
    }
}
