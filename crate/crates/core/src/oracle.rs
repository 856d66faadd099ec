//! Brute-force reference computations used by tests and the acceptance suite.
//! These are independent of the protocol implementations they check: plain
//! BFS over the unit-disk graph of a frozen topology snapshot.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::ids::DeviceId;
use crate::market::MarketSpec;
use crate::world::Snapshot;

fn linked(snap: &Snapshot, a: usize, b: usize) -> bool {
    a != b
        && snap.online[a]
        && snap.online[b]
        && snap.positions[a].dist(snap.positions[b]) <= snap.radio_range
}

fn participates(snap: &Snapshot, i: usize, region: Option<&MarketSpec>) -> bool {
    snap.online[i]
        && region
            .map(|m| m.contains(snap.positions[i]))
            .unwrap_or(true)
}

/// BFS hop distances from `origin`, optionally restricted to devices inside a
/// market region, optionally truncated at a hop limit. The origin is included
/// at distance 0 (when it participates).
pub fn hop_distances(
    snap: &Snapshot,
    origin: DeviceId,
    region: Option<&MarketSpec>,
    hop_limit: Option<u32>,
) -> BTreeMap<DeviceId, u32> {
    let mut dist: BTreeMap<DeviceId, u32> = BTreeMap::new();
    if !participates(snap, origin.index(), region) {
        return dist;
    }
    dist.insert(origin, 0);
    let mut queue = VecDeque::new();
    queue.push_back(origin);
    while let Some(cur) = queue.pop_front() {
        let d = dist[&cur];
        if let Some(limit) = hop_limit {
            if d >= limit {
                continue;
            }
        }
        for i in 0..snap.positions.len() {
            let cand = DeviceId(i as u32);
            if dist.contains_key(&cand) {
                continue;
            }
            if linked(snap, cur.index(), i) && participates(snap, i, region) {
                dist.insert(cand, d + 1);
                queue.push_back(cand);
            }
        }
    }
    dist
}

/// Reachable set under the same rules as [`hop_distances`].
pub fn reachable(
    snap: &Snapshot,
    origin: DeviceId,
    region: Option<&MarketSpec>,
    hop_limit: Option<u32>,
) -> BTreeSet<DeviceId> {
    hop_distances(snap, origin, region, hop_limit)
        .into_keys()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::MarketId;
    use crate::world::Position;

    fn snap(points: &[(f64, f64)], r: f64) -> Snapshot {
        Snapshot {
            radio_range: r,
            positions: points.iter().map(|(x, y)| Position::new(*x, *y)).collect(),
            online: vec![true; points.len()],
        }
    }

    #[test]
    fn single_node_reaches_itself() {
        let s = snap(&[(0.0, 0.0)], 50.0);
        let got = reachable(&s, DeviceId(0), None, None);
        assert_eq!(got, [DeviceId(0)].into_iter().collect());
    }

    #[test]
    fn chain_with_hop_limit() {
        // Three nodes spaced 0.9R: hop limit 1 reaches the first two.
        let s = snap(&[(0.0, 0.0), (45.0, 0.0), (90.0, 0.0)], 50.0);
        let got = reachable(&s, DeviceId(0), None, Some(1));
        assert_eq!(got, [DeviceId(0), DeviceId(1)].into_iter().collect());
        let all = reachable(&s, DeviceId(0), None, Some(2));
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn region_restriction_blocks_outside_relays() {
        // b is inside the region but only reachable through out-of-region c.
        let region = MarketSpec {
            id: MarketId(0),
            center: Position::new(0.0, 0.0),
            radius: 50.0,
            core_radius: 12.5,
        };
        let s = snap(&[(-45.0, 0.0), (45.0, 0.0), (0.0, 52.0)], 70.0);
        assert!(region.contains(s.positions[0]) && region.contains(s.positions[1]));
        assert!(!region.contains(s.positions[2]));
        let restricted = reachable(&s, DeviceId(0), Some(&region), None);
        assert_eq!(restricted, [DeviceId(0)].into_iter().collect());
        let unrestricted = reachable(&s, DeviceId(0), None, None);
        assert_eq!(unrestricted.len(), 3);
    }

    #[test]
    fn offline_nodes_do_not_relay() {
        let mut s = snap(&[(0.0, 0.0), (45.0, 0.0), (90.0, 0.0)], 50.0);
        s.online[1] = false;
        let got = reachable(&s, DeviceId(0), None, None);
        assert_eq!(got, [DeviceId(0)].into_iter().collect());
    }
}
