//! Metrics computed purely from the trace: item survival, replica deficit
//! durations, query recall/precision, chunk delivery, message costs, and IMM
//! churn. The same numbers are recomputable offline from a trace file's
//! source records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::audit;
use crate::ids::{ItemId, QueryId};
use crate::simkernel::SimTime;
use crate::trace::{Record, TraceLog};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MsgStats {
    pub sends: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub total_hops: u64,
    pub max_hops: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryStats {
    pub query: u32,
    pub matched: u64,
    pub delivered_matched: u64,
    pub delivered_total: u64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub horizon: u64,
    pub published: u64,
    pub acked: u64,
    pub refused: u64,
    pub lost_acked: u64,
    pub lost_unacked: u64,
    /// Fraction of acked items never lost by the horizon (1.0 when nothing
    /// was acked).
    pub survival_rate: f64,
    /// Total ticks any replicated item spent below its degree, summed over
    /// items, plus the worst single stretch.
    pub deficit_total_ticks: u64,
    pub deficit_max_single: u64,
    pub items_with_final_deficit: u64,
    pub sync_queries: u64,
    pub sync_results_total: u64,
    pub async_queries: u64,
    pub chunks_emitted: u64,
    pub chunks_delivered: u64,
    pub chunks_undelivered: u64,
    pub chunks_unaccounted: u64,
    pub mean_recall: f64,
    pub mean_precision: f64,
    pub per_query: Vec<QueryStats>,
    pub imm_created: u64,
    pub imm_handoffs: u64,
    pub imm_elections: u64,
    pub msgs: BTreeMap<&'static str, MsgStats>,
    /// (time, fraction of so-far-acked items still alive)
    pub survival_series: Vec<(u64, f64)>,
    /// (time, delivered-matched / matched over all async queries)
    pub recall_series: Vec<(u64, f64)>,
}

/// Physical copy timeline of replicated items, reconstructed from store /
/// remove records. A deficit is copies < degree, counted only after the item
/// first reached its full degree (the initial fill is not a maintenance
/// failure).
struct DeficitTracker {
    degree: BTreeMap<ItemId, u32>,
    copies: BTreeMap<ItemId, i64>,
    established: BTreeSet<ItemId>,
    below_since: BTreeMap<ItemId, SimTime>,
    total: u64,
    max_single: u64,
}

impl DeficitTracker {
    fn new() -> Self {
        DeficitTracker {
            degree: BTreeMap::new(),
            copies: BTreeMap::new(),
            established: BTreeSet::new(),
            below_since: BTreeMap::new(),
            total: 0,
            max_single: 0,
        }
    }

    fn observe(&mut self, item: ItemId, delta: i64, now: SimTime) {
        let c = self.copies.entry(item).or_insert(0);
        *c += delta;
        let copies = *c;
        let Some(&degree) = self.degree.get(&item) else { return };
        if copies >= degree as i64 {
            self.established.insert(item);
        }
        if !self.established.contains(&item) {
            return;
        }
        let below = copies < degree as i64;
        match (below, self.below_since.get(&item).copied()) {
            (true, None) => {
                self.below_since.insert(item, now);
            }
            (false, Some(since)) => {
                let span = now.ticks() - since.ticks();
                self.total += span;
                self.max_single = self.max_single.max(span);
                self.below_since.remove(&item);
            }
            _ => {}
        }
    }

    fn finish(&mut self, horizon: SimTime) -> u64 {
        let open: Vec<(ItemId, SimTime)> =
            self.below_since.iter().map(|(i, t)| (*i, *t)).collect();
        for (_, since) in &open {
            let span = horizon.ticks() - since.ticks();
            self.total += span;
            self.max_single = self.max_single.max(span);
        }
        open.len() as u64
    }
}

pub fn compute(trace: &TraceLog, horizon: SimTime) -> Metrics {
    let mut m = Metrics {
        horizon: horizon.ticks(),
        ..Metrics::default()
    };

    let mut deficits = DeficitTracker::new();
    let mut acked_items: BTreeSet<ItemId> = BTreeSet::new();
    let mut lost_items: BTreeSet<ItemId> = BTreeSet::new();
    // Timeline points for the survival series.
    let mut survival_points: Vec<(u64, u64, u64)> = Vec::new(); // (t, acked, lost_acked)
    let mut lost_acked_so_far = 0u64;

    for rec in trace.records() {
        let t = rec.time;
        match &rec.record {
            Record::PublishRequested { item, degree, .. } => {
                m.published += 1;
                if *degree > 1 {
                    deficits.degree.entry(*item).or_insert(*degree);
                }
            }
            Record::PublishAcked { item, .. } => {
                if acked_items.insert(*item) {
                    m.acked += 1;
                    survival_points.push((t.ticks(), m.acked, lost_acked_so_far));
                }
            }
            Record::PublishRefused { .. } => m.refused += 1,
            Record::ItemStored { item, .. } => deficits.observe(*item, 1, t),
            Record::ItemRemoved { item, .. } => deficits.observe(*item, -1, t),
            Record::ItemLost { item, acked, .. } => {
                if lost_items.insert(*item) {
                    if *acked {
                        m.lost_acked += 1;
                        lost_acked_so_far += 1;
                        survival_points.push((t.ticks(), m.acked, lost_acked_so_far));
                    } else {
                        m.lost_unacked += 1;
                    }
                }
            }
            Record::QueryLaunched { kind, .. } => {
                if *kind == "sync" {
                    m.sync_queries += 1;
                } else {
                    m.async_queries += 1;
                }
            }
            Record::SyncCompleted { items, .. } => {
                m.sync_results_total += items.len() as u64;
            }
            Record::ImmCreated { .. } => m.imm_created += 1,
            Record::ImmHandoffSent { .. } => m.imm_handoffs += 1,
            Record::ElectionResolved { .. } => m.imm_elections += 1,
            Record::MsgSend { kind, .. } => {
                m.msgs.entry(kind).or_default().sends += 1;
            }
            Record::MsgDeliver { kind, hops, .. } => {
                let e = m.msgs.entry(kind).or_default();
                e.delivered += 1;
                e.total_hops += *hops as u64;
                e.max_hops = e.max_hops.max(*hops);
            }
            Record::MsgDrop { kind, .. } => {
                m.msgs.entry(kind).or_default().dropped += 1;
            }
            _ => {}
        }
    }

    m.items_with_final_deficit = deficits.finish(horizon);
    m.deficit_total_ticks = deficits.total;
    m.deficit_max_single = deficits.max_single;
    m.survival_rate = if m.acked == 0 {
        1.0
    } else {
        (m.acked - m.lost_acked) as f64 / m.acked as f64
    };

    // Chunk accounting.
    let acc = audit::chunk_account(trace);
    m.chunks_emitted = acc.emitted.len() as u64;
    m.chunks_delivered = acc.delivered.len() as u64;
    m.chunks_undelivered = acc.undelivered.len() as u64;
    m.chunks_unaccounted = m
        .chunks_emitted
        .saturating_sub(m.chunks_delivered + m.chunks_undelivered);

    // Per-query recall / precision against the market-side match sets.
    let matches = audit::query_match_sets(trace);
    let delivered = audit::query_delivered_sets(trace);
    let empty = BTreeSet::new();
    let mut recall_sum = 0.0;
    let mut precision_sum = 0.0;
    let queries: BTreeSet<QueryId> = matches.keys().copied().collect();
    for q in &queries {
        let matched = matches.get(q).unwrap_or(&empty);
        let del = delivered.get(q).unwrap_or(&empty);
        let inter = matched.intersection(del).count() as u64;
        let recall = if matched.is_empty() {
            1.0
        } else {
            inter as f64 / matched.len() as f64
        };
        let precision = if del.is_empty() {
            1.0
        } else {
            inter as f64 / del.len() as f64
        };
        recall_sum += recall;
        precision_sum += precision;
        m.per_query.push(QueryStats {
            query: q.0,
            matched: matched.len() as u64,
            delivered_matched: inter,
            delivered_total: del.len() as u64,
            recall,
            precision,
        });
    }
    let nq = m.per_query.len() as f64;
    m.mean_recall = if nq == 0.0 { 1.0 } else { recall_sum / nq };
    m.mean_precision = if nq == 0.0 { 1.0 } else { precision_sum / nq };

    // Survival over time: step series from the ack/loss points.
    let mut series = Vec::new();
    series.push((0, 1.0));
    for (t, acked, lost) in survival_points {
        let v = if acked == 0 {
            1.0
        } else {
            (acked - lost) as f64 / acked as f64
        };
        series.push((t, v));
    }
    series.push((horizon.ticks(), m.survival_rate));
    series.dedup();
    m.survival_series = series;

    // Recall over time from chunk delivery records.
    let mut emitted_items: BTreeMap<(QueryId, u32), Vec<ItemId>> = BTreeMap::new();
    let total_matched: u64 = matches.values().map(|s| s.len() as u64).sum();
    let mut got: BTreeSet<(QueryId, ItemId)> = BTreeSet::new();
    let mut recall_series = vec![(0, 0.0)];
    for rec in trace.records() {
        match &rec.record {
            Record::ChunkEmitted { query, seq, items, .. } => {
                emitted_items.insert((*query, *seq), items.clone());
            }
            Record::ChunkDelivered { query, seq, .. } => {
                if let Some(items) = emitted_items.get(&(*query, *seq)) {
                    for i in items {
                        if matches.get(query).map(|s| s.contains(i)).unwrap_or(false) {
                            got.insert((*query, *i));
                        }
                    }
                    let v = if total_matched == 0 {
                        1.0
                    } else {
                        got.len() as f64 / total_matched as f64
                    };
                    recall_series.push((rec.time.ticks(), v));
                }
            }
            _ => {}
        }
    }
    let last = recall_series.last().map(|(_, v)| *v).unwrap_or(0.0);
    recall_series.push((horizon.ticks(), last));
    recall_series.dedup();
    m.recall_series = recall_series;

    m
}

/// Stable text rendering: `summary k v` lines then `series <name> <t> <v>`
/// lines, parseable by the plot command.
pub fn render(m: &Metrics) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "# ads metrics v1");
    let _ = writeln!(w, "summary horizon {}", m.horizon);
    let _ = writeln!(w, "summary items_published {}", m.published);
    let _ = writeln!(w, "summary items_acked {}", m.acked);
    let _ = writeln!(w, "summary items_refused {}", m.refused);
    let _ = writeln!(w, "summary items_lost_acked {}", m.lost_acked);
    let _ = writeln!(w, "summary items_lost_unacked {}", m.lost_unacked);
    let _ = writeln!(w, "summary survival_rate {:.6}", m.survival_rate);
    let _ = writeln!(w, "summary deficit_total_ticks {}", m.deficit_total_ticks);
    let _ = writeln!(w, "summary deficit_max_single {}", m.deficit_max_single);
    let _ = writeln!(w, "summary items_with_final_deficit {}", m.items_with_final_deficit);
    let _ = writeln!(w, "summary sync_queries {}", m.sync_queries);
    let _ = writeln!(w, "summary sync_results_total {}", m.sync_results_total);
    let _ = writeln!(w, "summary async_queries {}", m.async_queries);
    let _ = writeln!(w, "summary chunks_emitted {}", m.chunks_emitted);
    let _ = writeln!(w, "summary chunks_delivered {}", m.chunks_delivered);
    let _ = writeln!(w, "summary chunks_undelivered {}", m.chunks_undelivered);
    let _ = writeln!(w, "summary chunks_unaccounted {}", m.chunks_unaccounted);
    let _ = writeln!(w, "summary mean_recall {:.6}", m.mean_recall);
    let _ = writeln!(w, "summary mean_precision {:.6}", m.mean_precision);
    let _ = writeln!(w, "summary imm_created {}", m.imm_created);
    let _ = writeln!(w, "summary imm_handoffs {}", m.imm_handoffs);
    let _ = writeln!(w, "summary imm_elections {}", m.imm_elections);
    for q in &m.per_query {
        let _ = writeln!(
            w,
            "query q{} matched {} delivered_matched {} delivered_total {} recall {:.6} precision {:.6}",
            q.query, q.matched, q.delivered_matched, q.delivered_total, q.recall, q.precision
        );
    }
    for (kind, s) in &m.msgs {
        let _ = writeln!(
            w,
            "msg {kind} sends {} delivered {} dropped {} total_hops {} max_hops {}",
            s.sends, s.delivered, s.dropped, s.total_hops, s.max_hops
        );
    }
    for (t, v) in &m.survival_series {
        let _ = writeln!(w, "series survival {t} {v:.6}");
    }
    for (t, v) in &m.recall_series {
        let _ = writeln!(w, "series recall {t} {v:.6}");
    }
    out
}

/// Parse the `series` lines back out of a rendered metrics file.
pub fn parse_series(text: &str) -> BTreeMap<String, Vec<(u64, f64)>> {
    let mut series: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for line in text.lines() {
        let mut tok = line.split_whitespace();
        if tok.next() != Some("series") {
            continue;
        }
        let (Some(name), Some(t), Some(v)) = (tok.next(), tok.next(), tok.next()) else {
            continue;
        };
        if let (Ok(t), Ok(v)) = (t.parse::<u64>(), v.parse::<f64>()) {
            series.entry(name.to_string()).or_default().push((t, v));
        }
    }
    series
}
