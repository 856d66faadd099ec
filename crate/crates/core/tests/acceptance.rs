//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use ads_core::audit;
use ads_core::broker::{Importance, Lifetime};
use ads_core::ids::{DeviceId, ItemId, QueryId};
use ads_core::market::Role;
use ads_core::metrics;
use ads_core::oracle;
use ads_core::publish::SelectionPolicy;
use ads_core::scenario::{
    DeviceDecl, KnowsDecl, MarketDecl, MobilityDecl, ReplicationStrategy, Scenario, WorkloadAction,
};
use ads_core::simkernel::SimTime;
use ads_core::trace::Record;
use ads_core::Simulation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{device_at, device_cap, publish, MARKET_CENTER, MARKET_RADIUS};

fn verdict(n: u32, name: &str, violations: &[String]) {
    if violations.is_empty() {
        println!("acceptance {n} ({name}): PASS");
    } else {
        println!("acceptance {n} ({name}): FAIL");
        for v in violations.iter().take(20) {
            println!("  - {v}");
        }
        panic!("criterion {n} failed with {} violations", violations.len());
    }
}

fn base(horizon: u64) -> Scenario {
    let mut sc = Scenario::default();
    sc.horizon = horizon;
    sc.markets.push(MarketDecl {
        name: "plaza".into(),
        center: MARKET_CENTER,
        radius: MARKET_RADIUS,
        core_radius: None,
    });
    sc
}

/// Connected components of in-market online devices in the final snapshot.
fn market_components(sim: &Simulation) -> Vec<Vec<DeviceId>> {
    let snap = sim.snapshot();
    let spec = sim.market_spec(sim.market_id("plaza").unwrap());
    let members: Vec<DeviceId> = (0..snap.positions.len() as u32)
        .map(DeviceId)
        .filter(|d| snap.online[d.index()] && spec.contains(snap.positions[d.index()]))
        .collect();
    let mut seen: BTreeSet<DeviceId> = BTreeSet::new();
    let mut comps = Vec::new();
    for &start in &members {
        if seen.contains(&start) {
            continue;
        }
        let comp = oracle::reachable(&snap, start, Some(&spec), None);
        seen.extend(comp.iter().copied());
        comps.push(comp.into_iter().collect());
    }
    comps
}

// ---------------------------------------------------------------------------
// 1. IMM uniqueness & election

#[test]
fn acceptance_1_imm_uniqueness_and_election() {
    let mut violations = Vec::new();
    let mut meta_rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    for case in 0..100u64 {
        let n = meta_rng.gen_range(5..=50usize);
        let mut sc = base(400);
        sc.seed = 1000 + case;
        // Joins several hops from the IMM need the probe window to cover the
        // intra-market round trip.
        sc.params.t_probe = sc.params.ack_window() + 4;
        let (cx, cy) = MARKET_CENTER;
        // Connected seed cluster present at t=0 (simultaneous creation race),
        // plus a gate corridor to the eastern boundary so later arrivals are
        // always answered when they cross.
        let mut placed: Vec<(f64, f64)> = vec![(cx, cy)];
        sc.devices.push(device_at("seed0", cx, cy));
        for (i, gx) in [45.0, 90.0, 133.0].iter().enumerate() {
            sc.devices.push(device_at(&format!("gate{i}"), cx + gx, cy));
            placed.push((cx + gx, cy));
        }
        let seeds = meta_rng.gen_range(0..=(n.saturating_sub(4)).min(6));
        for i in 0..seeds {
            let (px, py) = placed[meta_rng.gen_range(0..placed.len())];
            let angle = meta_rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = meta_rng.gen_range(5.0..38.0f64);
            let mut x = px + dist * angle.cos();
            let mut y = py + dist * angle.sin();
            // Keep inside the market interior.
            let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            if r > 110.0 {
                x = cx + (x - cx) * 110.0 / r;
                y = cy + (y - cy) * 110.0 / r;
            }
            sc.devices.push(device_at(&format!("s{i}"), x, y));
            placed.push((x, y));
        }
        // Scripted arrivals walk in through the gate, several sharing the
        // same arrival time, then settle at connected interior positions.
        let mut t_arrive = 20u64;
        for i in (4 + seeds)..n {
            let (px, py) = placed[meta_rng.gen_range(0..placed.len())];
            let angle = meta_rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = meta_rng.gen_range(5.0..38.0f64);
            let mut x = px + dist * angle.cos();
            let mut y = py + dist * angle.sin();
            let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            if r > 110.0 {
                x = cx + (x - cx) * 110.0 / r;
                y = cy + (y - cy) * 110.0 / r;
            }
            let start = (cx + 280.0, cy + meta_rng.gen_range(-20.0..20.0));
            sc.devices.push(common::scripted(
                &format!("a{i}"),
                start,
                &[
                    (t_arrive, cx + 140.0, cy),
                    (t_arrive + 40, x, y),
                    (400, x, y),
                ],
            ));
            placed.push((x, y));
            if i % 3 == 0 {
                t_arrive += meta_rng.gen_range(5..25);
            }
        }
        let mut sim = Simulation::from_scenario(&sc, None).unwrap();
        sim.run();

        if !sim.is_settled() {
            violations.push(format!("case {case}: protocol did not settle"));
            continue;
        }
        // Exactly one live IMM per connected component of the market.
        for comp in market_components(&sim) {
            let imms: Vec<DeviceId> = comp
                .iter()
                .copied()
                .filter(|d| sim.device_role(*d) == Role::Imm)
                .collect();
            if imms.len() != 1 {
                violations.push(format!(
                    "case {case}: component of {} devices has {} IMMs",
                    comp.len(),
                    imms.len()
                ));
            }
        }
        violations.extend(
            audit::epochs_strictly_increase(sim.trace())
                .into_iter()
                .map(|v| format!("case {case}: {v}")),
        );
        violations.extend(
            audit::deactivated_imms_never_act(sim.trace())
                .into_iter()
                .map(|v| format!("case {case}: {v}")),
        );
        violations.extend(
            audit::flood_duplicate_processing(sim.trace())
                .into_iter()
                .map(|v| format!("case {case}: {v}")),
        );
    }
    verdict(1, "imm uniqueness & election", &violations);
}

// ---------------------------------------------------------------------------
// 2. Graceful-mobility no-loss

/// Stationary backbone covering the market from center to boundary in every
/// direction, so departing devices always find an in-market neighbor.
fn covering_backbone(sc: &mut Scenario, capacity: u64) {
    let (cx, cy) = MARKET_CENTER;
    sc.devices.push(device_cap("hub", cx, cy, capacity));
    for (ring, radius, count) in [(0, 45.0, 7), (1, 90.0, 13), (2, 130.0, 19)] {
        for i in 0..count {
            let angle = i as f64 / count as f64 * std::f64::consts::TAU;
            sc.devices.push(device_cap(
                &format!("ring{ring}_{i}"),
                cx + radius * angle.cos(),
                cy + radius * angle.sin(),
                capacity,
            ));
        }
    }
}

#[test]
fn acceptance_2_graceful_mobility_no_loss() {
    let mut violations = Vec::new();
    let mut meta_rng = ChaCha8Rng::seed_from_u64(0xB0B);
    for case in 0..15u64 {
        let horizon = 800;
        let mut sc = base(horizon);
        sc.seed = 2000 + case;
        sc.params.t_probe = sc.params.ack_window() + 4;
        covering_backbone(&mut sc, 100);
        let (cx, cy) = MARKET_CENTER;
        // Movers wander in and out on declared routes and settle by t=560.
        let movers = meta_rng.gen_range(3..8usize);
        for i in 0..movers {
            let mut wps = Vec::new();
            let mut t = 0u64;
            let legs = meta_rng.gen_range(2..5u64);
            for _ in 0..legs {
                t += meta_rng.gen_range(60..120);
                let angle = meta_rng.gen_range(0.0..std::f64::consts::TAU);
                // Alternate between in-market and outside targets.
                let rr = if wps.len() % 2 == 0 {
                    meta_rng.gen_range(200.0..320.0f64)
                } else {
                    meta_rng.gen_range(10.0..100.0f64)
                };
                wps.push((
                    t.min(540),
                    (cx + rr * angle.cos()).clamp(5.0, 995.0),
                    (cy + rr * angle.sin()).clamp(5.0, 995.0),
                ));
            }
            // Settle inside the market.
            let angle = meta_rng.gen_range(0.0..std::f64::consts::TAU);
            let rr = meta_rng.gen_range(10.0..100.0f64);
            wps.push((560, cx + rr * angle.cos(), cy + rr * angle.sin()));
            let start_angle = meta_rng.gen_range(0.0..std::f64::consts::TAU);
            let mut d = common::scripted(
                &format!("mv{i}"),
                (
                    (cx + 250.0 * start_angle.cos()).clamp(5.0, 995.0),
                    (cy + 250.0 * start_angle.sin()).clamp(5.0, 995.0),
                ),
                &wps,
            );
            d.capacity = 60;
            sc.devices.push(d);
        }
        // Publishes early, from backbone and movers alike.
        let items = meta_rng.gen_range(8..20usize);
        for i in 0..items {
            let dev = if meta_rng.gen_bool(0.5) {
                format!("ring1_{}", meta_rng.gen_range(0..13))
            } else {
                format!("mv{}", meta_rng.gen_range(0..movers))
            };
            let degree = if meta_rng.gen_bool(0.4) { 2 } else { 1 };
            sc.workload.push(publish(
                10 + i as u64 * 5,
                &dev,
                &format!("it{i}"),
                "news",
                meta_rng.gen_range(1..4),
                degree,
            ));
        }
        // Resident query from the hub at the end collects everything.
        sc.workload.push((
            680,
            WorkloadAction::AsyncQuery {
                device: "hub".into(),
                market: "plaza".into(),
                tags: None,
                items: None,
                expect: None,
                active_for: 60,
            },
        ));
        let mut sim = Simulation::from_scenario(&sc, None).unwrap();
        sim.run();

        let bad = audit::non_crash_losses(sim.trace(), false);
        violations.extend(bad.into_iter().map(|v| format!("case {case}: {v}")));

        let q = QueryId(0);
        let received: BTreeSet<ItemId> = sim
            .async_received(q)
            .map(|r| r.items.keys().copied().collect())
            .unwrap_or_default();
        for item in sim.acked_items() {
            if !received.contains(item) {
                violations.push(format!(
                    "case {case}: acked item {item} not retrievable at horizon"
                ));
            }
        }
        violations.extend(
            audit::flood_duplicate_processing(sim.trace())
                .into_iter()
                .map(|v| format!("case {case}: {v}")),
        );
    }
    verdict(2, "graceful mobility no-loss", &violations);
}

// ---------------------------------------------------------------------------
// 3. Strategy contrast

struct StrategyRun {
    sim: Simulation,
    crash_items: Vec<ItemId>,
    /// Copies of each sign-off item just before the second fault wave.
    signoff_copies_mid: Vec<(ItemId, i64)>,
    wave1: u64,
    wave2: u64,
}

/// Paired scenario: degree-2 items on disjoint host pairs; wave 1 kills one
/// host per item (half by crash, half by graceful shutdown); wave 2 crashes
/// the second original host of every crash-wave item.
fn strategy_scenario(seed: u64, items: usize, strategy: ReplicationStrategy) -> StrategyRun {
    let n = 2 * items + 2; // imm + pairs + one spare repair target
    let mut sc = base(500);
    sc.seed = seed;
    sc.params.strategy = strategy;
    let (cx, cy) = MARKET_CENTER;
    // d0: too small to ever host; wins the election as the lowest id.
    sc.devices.push(device_cap("imm", cx, cy, 5));
    for i in 1..n {
        let angle = i as f64 / n as f64 * std::f64::consts::TAU;
        // Tight cluster: pairwise connected. Capacity for several items so
        // survivors can absorb repairs from both fault waves.
        sc.devices.push(device_cap(
            &format!("d{i}"),
            cx + 20.0 * angle.cos(),
            cy + 20.0 * angle.sin(),
            45,
        ));
    }
    for i in 0..items {
        sc.workload.push((
            10 + i as u64,
            WorkloadAction::Publish {
                device: "imm".into(),
                item: format!("it{i}"),
                type_tag: "news".into(),
                size: 10,
                lifetime: Lifetime::Infinite,
                degree: 2,
                importance: Importance::High,
                policy: SelectionPolicy::NearestMarket,
            },
        ));
    }
    // Discovery run: assignments are deterministic and independent of the
    // maintenance strategy, so read the host pairs from a probe execution.
    let mut probe = Simulation::from_scenario(&sc, None).unwrap();
    probe.run_until(SimTime(100));
    let m = probe.market_id("plaza").unwrap();
    let (_, st) = probe.imm_state(m).expect("imm");
    let mut crash_items = Vec::new();
    let mut signoff_items = Vec::new();
    let wave1 = 150u64;
    let bound = sc.params.t_heartbeat + 4 * sc.params.hop_latency * sc.params.flood_ttl as u64;
    let wave2 = wave1 + bound + 40;
    let mut wave1_actions = Vec::new();
    let mut wave2_actions = Vec::new();
    for i in 0..items {
        let item = probe.item_id(&format!("it{i}")).unwrap();
        let hosts: Vec<DeviceId> = st.assignment_map[&item].iter().copied().collect();
        assert_eq!(hosts.len(), 2, "setup: disjoint pair per item");
        let (first, second) = (hosts[0], hosts[1]);
        let first_name = probe.trace().device_names[first.index()].clone();
        let second_name = probe.trace().device_names[second.index()].clone();
        if i % 2 == 0 {
            crash_items.push(item);
            wave1_actions.push(WorkloadAction::Crash { device: first_name });
            wave2_actions.push(WorkloadAction::Crash { device: second_name });
        } else {
            signoff_items.push(item);
            wave1_actions.push(WorkloadAction::Shutdown { device: first_name });
        }
    }
    for a in wave1_actions {
        sc.workload.push((wave1, a));
    }
    for a in wave2_actions {
        sc.workload.push((wave2, a));
    }
    let mut sim = Simulation::from_scenario(&sc, None).unwrap();
    sim.run_until(SimTime(wave2 - 1));
    let signoff_copies_mid = signoff_items
        .iter()
        .map(|i| (*i, sim.copies_alive(*i)))
        .collect();
    sim.run();
    StrategyRun { sim, crash_items, signoff_copies_mid, wave1, wave2 }
}

#[test]
fn acceptance_3_strategy_contrast() {
    let mut violations = Vec::new();
    for case in 0..8u64 {
        let items = 2 + (case as usize % 4) * 2;
        let seed = 3000 + case;
        let s1 = strategy_scenario(seed, items, ReplicationStrategy::SignOff);
        let s2 = strategy_scenario(seed, items, ReplicationStrategy::Periodic);
        let bound = s1.sim.cfg().t_heartbeat
            + 4 * s1.sim.cfg().hop_latency * s1.sim.cfg().flood_ttl as u64;

        // Strategy 1: crashed hosts leave a standing deficit (here: total
        // loss after the second crash); sign-off leavers are fully repaired.
        for item in &s1.crash_items {
            if s1.sim.copies_alive(*item) >= 2 {
                violations.push(format!(
                    "case {case}: strategy 1 should keep a deficit for crashed item {item}"
                ));
            }
        }
        // Sign-off leavers are repaired within the leave's causal chain: the
        // degree is whole again before the (unrelated) second fault wave.
        for (item, copies) in &s1.signoff_copies_mid {
            if *copies != 2 {
                violations.push(format!(
                    "case {case}: strategy 1 sign-off item {item} at {copies} copies before wave 2"
                ));
            }
        }
        // Strategy 2 restores every degree within the heartbeat bound.
        for (item, copies) in &s2.signoff_copies_mid {
            if *copies != 2 {
                violations.push(format!(
                    "case {case}: strategy 2 sign-off item {item} at {copies} copies before wave 2"
                ));
            }
        }
        for (items_of, wave) in [(&s2.crash_items, s2.wave1), (&s2.crash_items, s2.wave2)] {
            for item in items_of.iter() {
                if s2.sim.copies_alive(*item) != 2 {
                    violations.push(format!(
                        "case {case}: strategy 2 final copies of {item} = {}",
                        s2.sim.copies_alive(*item)
                    ));
                    continue;
                }
                let restored = s2
                    .sim
                    .trace()
                    .records()
                    .iter()
                    .find(|r| {
                        r.time.ticks() > wave
                            && matches!(&r.record, Record::ItemStored { item: i, .. } if i == item)
                    })
                    .map(|r| r.time.ticks());
                match restored {
                    Some(t) if t <= wave + bound => {}
                    other => violations.push(format!(
                        "case {case}: item {item} not restored within bound after t={wave}: {other:?}"
                    )),
                }
            }
        }
        // Survival: strategy 2 >= strategy 1 on every paired run.
        let m1 = metrics::compute(s1.sim.trace(), s1.sim.horizon());
        let m2 = metrics::compute(s2.sim.trace(), s2.sim.horizon());
        if m2.survival_rate < m1.survival_rate {
            violations.push(format!(
                "case {case}: survival s2 {} < s1 {}",
                m2.survival_rate, m1.survival_rate
            ));
        }
        // The double-crash genuinely separates the strategies.
        if m1.survival_rate >= 1.0 {
            violations.push(format!(
                "case {case}: strategy 1 lost nothing; the pairing is vacuous"
            ));
        }
        if m2.survival_rate < 1.0 {
            violations.push(format!(
                "case {case}: strategy 2 lost items: {}",
                m2.survival_rate
            ));
        }
    }
    verdict(3, "strategy contrast", &violations);
}

// ---------------------------------------------------------------------------
// 4. Sync-local query exactness

#[test]
fn acceptance_4_sync_query_exactness() {
    let mut violations = Vec::new();
    let mut meta_rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let tags = ["news", "auction", "forum", "game"];
    let mut total_cases = 0;
    for topo in 0..50u64 {
        // One big market covering the whole cluster, so stores get populated;
        // devices stay stationary: the topology is frozen.
        let mut sc = Scenario::default();
        sc.seed = 4000 + topo;
        sc.horizon = 950;
        sc.markets.push(MarketDecl {
            name: "wide".into(),
            center: (500.0, 500.0),
            radius: 300.0,
            core_radius: None,
        });
        let n = meta_rng.gen_range(8..22usize);
        for i in 0..n {
            let angle = meta_rng.gen_range(0.0..std::f64::consts::TAU);
            let rr = meta_rng.gen_range(0.0..140.0f64);
            sc.devices.push(device_cap(
                &format!("n{i}"),
                500.0 + rr * angle.cos(),
                500.0 + rr * angle.sin(),
                60,
            ));
        }
        let items = meta_rng.gen_range(4..12usize);
        for i in 0..items {
            sc.workload.push(publish(
                5 + i as u64 * 3,
                &format!("n{}", meta_rng.gen_range(0..n)),
                &format!("t{topo}_{i}"),
                tags[meta_rng.gen_range(0..tags.len())],
                meta_rng.gen_range(1..4),
                if meta_rng.gen_bool(0.3) { 2 } else { 1 },
            ));
        }
        // 20 queries in non-overlapping windows after everything settled.
        let mut specs = Vec::new();
        for k in 0..20u64 {
            let device = format!("n{}", meta_rng.gen_range(0..n));
            let tag_count = meta_rng.gen_range(1..=2usize);
            let mut tag_set: Vec<String> = Vec::new();
            for _ in 0..tag_count {
                tag_set.push(tags[meta_rng.gen_range(0..tags.len())].to_string());
            }
            let hops = meta_rng.gen_range(0..4u32);
            let timeout = meta_rng.gen_range(1..13u64);
            let at = 300 + k * 30;
            sc.workload.push((
                at,
                WorkloadAction::SyncQuery {
                    device: device.clone(),
                    tags: Some(tag_set.clone()),
                    items: None,
                    hops,
                    timeout,
                },
            ));
            specs.push((QueryId(k as u32), device, tag_set, hops, timeout, at));
        }
        let mut sim = Simulation::from_scenario(&sc, None).unwrap();
        sim.run();

        let snap = sim.snapshot();
        for (q, device, tag_set, hops, timeout, at) in specs {
            total_cases += 1;
            let origin = sim.device_id(&device).unwrap();
            let predicate = ads_core::broker::Predicate {
                tags: Some(tag_set.iter().cloned().collect()),
                ids: None,
            };
            // Oracle: devices within the hop limit whose round trip fits the
            // timeout, on the frozen topology, against the actual stores.
            let dist = oracle::hop_distances(&snap, origin, None, Some(hops));
            let hop_latency = sim.cfg().hop_latency;
            let mut expect: BTreeSet<ItemId> = BTreeSet::new();
            for (d, h) in &dist {
                if *h > 0 && 2 * (*h as u64) * hop_latency > timeout {
                    continue;
                }
                for it in sim.device_store(*d).retrieve(&predicate, SimTime(at)) {
                    expect.insert(it.id);
                }
            }
            let got: BTreeSet<ItemId> = sim
                .sync_result(q)
                .map(|r| r.iter().map(|i| i.id).collect())
                .unwrap_or_default();
            if got != expect {
                violations.push(format!(
                    "topo {topo} query {q}: got {got:?}, expected {expect:?} (hops {hops}, timeout {timeout})"
                ));
            }
        }
        violations.extend(
            audit::flood_duplicate_processing(sim.trace())
                .into_iter()
                .map(|v| format!("topo {topo}: {v}")),
        );
    }
    assert_eq!(total_cases, 1000);
    verdict(4, "sync-local query exactness (1000 cases)", &violations);
}

// ---------------------------------------------------------------------------
// 5. Async query soundness / completeness

#[test]
fn acceptance_5_async_soundness_completeness() {
    let mut violations = Vec::new();
    let mut meta_rng = ChaCha8Rng::seed_from_u64(0xCAFE);

    // (a) Connected, crash-free, honest itineraries: recall and precision 1.0.
    for case in 0..10u64 {
        let mut sc = base(500);
        sc.seed = 5000 + case;
        sc.devices.push(device_cap("a", 500.0, 500.0, 10));
        sc.devices.push(device_cap("b", 530.0, 500.0, 200));
        sc.devices.push(device_cap("c", 500.0, 530.0, 200));
        // Relay corridor to two initiators outside.
        for (i, y) in [455.0, 410.0, 365.0, 320.0].iter().enumerate() {
            sc.devices.push(device_at(&format!("r{i}"), 500.0, *y));
        }
        sc.devices.push(device_at("init0", 500.0, 292.0));
        // Honest slow walker along the covered corridor.
        sc.devices.push(common::scripted(
            "init1",
            (500.0, 300.0),
            &[(150, 500.0, 330.0), (500, 500.0, 330.0)],
        ));
        let items = meta_rng.gen_range(3..9usize);
        for i in 0..items {
            let tag = if i % 2 == 0 { "news" } else { "blog" };
            sc.workload.push(publish(10 + i as u64 * 4, "a", &format!("x{i}"), tag, 2, 1));
        }
        for (q, dev) in [("news", "init0"), ("blog", "init1")] {
            sc.workload.push((
                100,
                WorkloadAction::AsyncQuery {
                    device: dev.into(),
                    market: "plaza".into(),
                    tags: Some(vec![q.into()]),
                    items: None,
                    expect: None,
                    active_for: 80,
                },
            ));
        }
        let mut sim = Simulation::from_scenario(&sc, None).unwrap();
        sim.run();
        let m = metrics::compute(sim.trace(), sim.horizon());
        for q in &m.per_query {
            if q.recall < 1.0 || q.precision < 1.0 {
                violations.push(format!(
                    "case {case} q{}: recall {} precision {}",
                    q.query, q.recall, q.precision
                ));
            }
        }
        if m.chunks_delivered + m.chunks_undelivered != m.chunks_emitted
            || m.chunks_unaccounted != 0
        {
            violations.push(format!(
                "case {case}: chunk accounting {} + {} != {}",
                m.chunks_delivered, m.chunks_undelivered, m.chunks_emitted
            ));
        }
    }

    // (b) Induced partition: the initiator's cluster is beyond radio reach of
    // the market; a courier with a declared shuttle route carries the query
    // over and the result chunks back.
    for case in 0..5u64 {
        let mut sc = base(600);
        sc.seed = 5100 + case;
        sc.devices.push(device_cap("a", 500.0, 500.0, 10));
        sc.devices.push(device_cap("b", 530.0, 500.0, 200));
        let mut init = device_at("init", 50.0, 50.0);
        init.knows = KnowsDecl::List(vec!["plaza".into()]);
        sc.devices.push(init);
        sc.devices.push(common::scripted(
            "courier",
            (60.0, 60.0),
            &[(200, 480.0, 480.0), (400, 60.0, 60.0), (600, 60.0, 60.0)],
        ));
        for i in 0..4 {
            sc.workload.push(publish(10 + i, "a", &format!("x{i}"), "news", 2, 1));
        }
        // Launched while the courier is still in radio range of the
        // initiator's cluster.
        sc.workload.push((
            5,
            WorkloadAction::AsyncQuery {
                device: "init".into(),
                market: "plaza".into(),
                tags: Some(vec!["news".into()]),
                items: None,
                expect: None,
                active_for: 20,
            },
        ));
        let mut sim = Simulation::from_scenario(&sc, None).unwrap();
        sim.run();
        let m = metrics::compute(sim.trace(), sim.horizon());
        for q in &m.per_query {
            if q.precision < 1.0 {
                violations.push(format!("partition case {case}: precision {}", q.precision));
            }
        }
        // Every emitted chunk is delivered, undelivered, or still in custody
        // somewhere; none vanish.
        let carried = sim.chunks_in_custody();
        if m.chunks_delivered + m.chunks_undelivered + carried != m.chunks_emitted {
            violations.push(format!(
                "partition case {case}: accounting {}+{}+{} != {}",
                m.chunks_delivered, m.chunks_undelivered, carried, m.chunks_emitted
            ));
        }
        // The query crossed the partition via the courier.
        let registered = sim
            .trace()
            .records()
            .iter()
            .any(|r| matches!(r.record, Record::QueryRegistered { .. }));
        if !registered {
            violations.push(format!(
                "partition case {case}: query never reached the market"
            ));
        }
        // The carry-and-forward return leg works: chunks do get delivered.
        if m.chunks_delivered == 0 {
            violations.push(format!(
                "partition case {case}: no chunk crossed back over the partition"
            ));
        }
    }
    verdict(5, "async soundness/completeness", &violations);
}

// ---------------------------------------------------------------------------
// 6. Flooding suppression & reach exactness

#[test]
fn acceptance_6_flood_suppression_and_reach() {
    let mut violations = Vec::new();
    let mut meta_rng = ChaCha8Rng::seed_from_u64(0xF100D);
    for case in 0..200u64 {
        let mut sc = base(25);
        sc.seed = 6000 + case;
        let n = meta_rng.gen_range(5..40usize);
        let (cx, cy) = MARKET_CENTER;
        for i in 0..n {
            // Mix of in-market and outside devices, all stationary.
            let rr = meta_rng.gen_range(0.0..260.0f64);
            let angle = meta_rng.gen_range(0.0..std::f64::consts::TAU);
            sc.devices.push(device_at(
                &format!("n{i}"),
                (cx + rr * angle.cos()).clamp(0.0, 1000.0),
                (cy + rr * angle.sin()).clamp(0.0, 1000.0),
            ));
        }
        let mut sim = Simulation::from_scenario(&sc, None).unwrap();
        sim.run();

        violations.extend(
            audit::flood_duplicate_processing(sim.trace())
                .into_iter()
                .map(|v| format!("case {case}: {v}")),
        );

        // The t=0 join probes are region floods on a static topology: each
        // must reach exactly the region-restricted BFS set within the ttl.
        let spec = sim.market_spec(sim.market_id("plaza").unwrap());
        let snap = sim.snapshot();
        let ttl = sim.cfg().flood_ttl;
        let probes: Vec<(DeviceId, ads_core::ids::MsgId)> = sim
            .trace()
            .records()
            .iter()
            .filter(|r| r.time == SimTime(0))
            .filter_map(|r| match &r.record {
                Record::MsgProcess { msg, at } => Some((*at, *msg)),
                _ => None,
            })
            .collect();
        let mut seen_origin = BTreeSet::new();
        for (origin, msg) in probes {
            if !seen_origin.insert(origin) {
                continue; // only the first record per origin is its own probe
            }
            let reach = audit::flood_reach(sim.trace(), msg);
            let expect = oracle::reachable(&snap, origin, Some(&spec), Some(ttl));
            if reach != expect {
                violations.push(format!(
                    "case {case}: flood from {origin} reached {reach:?}, oracle {expect:?}"
                ));
            }
        }
    }
    verdict(6, "flood suppression & BFS reach", &violations);
}

// ---------------------------------------------------------------------------
// 7. IMM disaster recovery

#[test]
fn acceptance_7_imm_recovery_rebuilds_state() {
    let mut violations = Vec::new();
    let mut meta_rng = ChaCha8Rng::seed_from_u64(0x7EC0);
    for case in 0..10u64 {
        let mut sc = base(500);
        sc.seed = 7000 + case;
        let (cx, cy) = MARKET_CENTER;
        let n = meta_rng.gen_range(6..14usize);
        for i in 0..n {
            let angle = i as f64 / n as f64 * std::f64::consts::TAU;
            sc.devices.push(device_cap(
                &format!("d{i}"),
                cx + 20.0 * angle.cos(),
                cy + 20.0 * angle.sin(),
                meta_rng.gen_range(40..90),
            ));
        }
        let items = meta_rng.gen_range(3..10usize);
        for i in 0..items {
            sc.workload.push(publish(
                10 + i as u64 * 2,
                &format!("d{}", meta_rng.gen_range(0..n)),
                &format!("x{i}"),
                if i % 2 == 0 { "news" } else { "blog" },
                meta_rng.gen_range(1..5),
                if meta_rng.gen_bool(0.5) { 2 } else { 1 },
            ));
        }
        let crash_t = 200u64;
        // d0 wins the first election (lowest id); crash it and trigger
        // recovery by a later publish.
        sc.workload.push((crash_t, WorkloadAction::Crash { device: "d0".into() }));
        sc.workload.push(publish(
            crash_t + 20,
            &format!("d{}", 1 + meta_rng.gen_range(0..n - 1)),
            "post_crash",
            "news",
            1,
            1,
        ));
        let mut sim = Simulation::from_scenario(&sc, None).unwrap();
        let m = {
            sim.run_until(SimTime(crash_t - 1));
            let market = sim.market_id("plaza").unwrap();
            let (imm_dev, st) = sim.imm_state(market).expect("imm before crash");
            if imm_dev != DeviceId(0) {
                violations.push(format!("case {case}: expected d0 as IMM"));
            }
            let golden_assign = st.assignment_map.clone();
            let golden_registry = st.replica_registry.clone();
            sim.run_until(SimTime(500));
            (market, golden_assign, golden_registry)
        };
        let (market, golden_assign, golden_registry) = m;
        let crashed = DeviceId(0);
        let Some((new_imm, st)) = sim.imm_state(market) else {
            violations.push(format!("case {case}: no IMM after recovery"));
            continue;
        };
        if new_imm == crashed {
            violations.push(format!("case {case}: crashed device still IMM"));
        }
        // Rebuilt assignment map == pre-crash map minus the crashed device's
        // holdings (plus the post-crash publish).
        let post = sim.item_id("post_crash").unwrap();
        let mut expect = golden_assign.clone();
        for hosts in expect.values_mut() {
            hosts.remove(&crashed);
        }
        expect.retain(|_, hosts| !hosts.is_empty());
        let mut rebuilt = st.assignment_map.clone();
        rebuilt.remove(&post);
        rebuilt.retain(|_, hosts| !hosts.is_empty());
        if rebuilt != expect {
            violations.push(format!(
                "case {case}: rebuilt map {rebuilt:?} != expected {expect:?}"
            ));
        }
        // Registry hosts likewise, and both agree with actual stores.
        for (item, entry) in &st.replica_registry {
            if let Some(golden) = golden_registry.get(item) {
                let mut want: BTreeSet<DeviceId> = golden.hosts.clone();
                want.remove(&crashed);
                if entry.hosts != want {
                    violations.push(format!(
                        "case {case}: registry of {item}: {:?} != {want:?}",
                        entry.hosts
                    ));
                }
            }
            for h in &entry.hosts {
                if !sim.device_store(*h).contains(*item) {
                    violations.push(format!(
                        "case {case}: registry lists {h} for {item} but the store disagrees"
                    ));
                }
            }
        }
    }
    verdict(7, "imm disaster recovery", &violations);
}

// ---------------------------------------------------------------------------
// 8. Load balancing sanity bound

#[test]
fn acceptance_8_greedy_beats_random_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10AD);
    let mut greedy_wins = 0;
    let runs = 100;
    for _ in 0..runs {
        // Around 100 items across around 10 devices, the scale at which a
        // capacity-greedy rule reliably evens utilization out.
        let devices = rng.gen_range(8..13usize);
        let caps: Vec<u64> = (0..devices).map(|_| rng.gen_range(50..200u64)).collect();
        let items: Vec<u64> = (0..devices * rng.gen_range(9..13usize))
            .map(|_| rng.gen_range(1..10u64))
            .collect();

        let max_util = |free: &BTreeMap<DeviceId, u64>| -> f64 {
            free.iter()
                .map(|(d, f)| {
                    let cap = caps[d.index()] as f64;
                    (cap - *f as f64) / cap
                })
                .fold(0.0, f64::max)
        };

        let mut greedy_free: BTreeMap<DeviceId, u64> = caps
            .iter()
            .enumerate()
            .map(|(i, c)| (DeviceId(i as u32), *c))
            .collect();
        let mut random_free = greedy_free.clone();
        let empty = BTreeSet::new();
        let mut item_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        for size in &items {
            if let Some(h) =
                ads_core::market::choose_hosts(&greedy_free, &empty, *size, 1).first()
            {
                *greedy_free.get_mut(h).unwrap() -= size;
            }
            if let Some(h) =
                ads_core::market::choose_hosts_random(&random_free, &empty, *size, 1, &mut item_rng)
                    .first()
            {
                *random_free.get_mut(h).unwrap() -= size;
            }
        }
        if max_util(&greedy_free) <= max_util(&random_free) + 1e-9 {
            greedy_wins += 1;
        }
    }
    let violations = if greedy_wins * 100 >= runs * 95 {
        vec![]
    } else {
        vec![format!("greedy beat random on only {greedy_wins}/{runs} workloads")]
    };
    verdict(8, "load balancing sanity bound", &violations);
}

// ---------------------------------------------------------------------------
// 9. Determinism

#[test]
fn acceptance_9_bit_identical_traces() {
    // A scenario that exercises every subsystem: mobility, elections,
    // publishes, both query types, crashes, and a shutdown.
    let mut sc = base(700);
    sc.seed = 424242;
    covering_backbone(&mut sc, 80);
    let mut rover = DeviceDecl::new("rover");
    rover.position = (200.0, 200.0);
    rover.mobility = MobilityDecl::RandomWaypoint { speed: (1.0, 4.0), pause: (0, 10) };
    sc.devices.push(rover);
    sc.devices.push(common::scripted(
        "walker",
        (500.0, 250.0),
        &[(120, 500.0, 450.0), (300, 500.0, 250.0), (700, 500.0, 250.0)],
    ));
    for i in 0..6 {
        sc.workload.push(publish(
            20 + i * 7,
            "ring1_0",
            &format!("x{i}"),
            if i % 2 == 0 { "news" } else { "blog" },
            2,
            if i % 3 == 0 { 2 } else { 1 },
        ));
    }
    sc.workload.push((
        250,
        WorkloadAction::SyncQuery {
            device: "hub".into(),
            tags: Some(vec!["news".into()]),
            items: None,
            hops: 2,
            timeout: 8,
        },
    ));
    sc.workload.push((
        300,
        WorkloadAction::AsyncQuery {
            device: "ring2_5".into(),
            market: "plaza".into(),
            tags: Some(vec!["blog".into()]),
            items: None,
            expect: None,
            active_for: 60,
        },
    ));
    sc.workload.push((350, WorkloadAction::Crash { device: "ring2_0".into() }));
    sc.workload.push((400, WorkloadAction::Shutdown { device: "ring1_3".into() }));

    let run_once = || {
        let mut sim = Simulation::from_scenario(&sc, None).unwrap();
        sim.run();
        let trace = sim.trace().render();
        let m = metrics::render(&metrics::compute(sim.trace(), sim.horizon()));
        (trace, m)
    };
    let (t1, m1) = run_once();
    let (t2, m2) = run_once();
    let mut violations = Vec::new();
    if t1 != t2 {
        violations.push("traces differ between identical runs".to_string());
    }
    if m1 != m2 {
        violations.push("metrics differ between identical runs".to_string());
    }
    if t1.is_empty() {
        violations.push("trace unexpectedly empty".to_string());
    }
    // A different seed genuinely changes the run (the rover's path).
    let mut sc2 = sc.clone();
    sc2.seed = 424243;
    let mut sim = Simulation::from_scenario(&sc2, None).unwrap();
    sim.run();
    if sim.trace().render() == t1 {
        violations.push("different seed produced an identical trace".to_string());
    }
    verdict(9, "bit-identical traces", &violations);
}
