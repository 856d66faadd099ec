//! The harder mobility corners: multi-stage carry handoff chains with
//! diverting couriers, degraded assignment, concurrent disaster recovery, and
//! a market that empties completely.

mod common;

use ads_core::ids::DeviceId;
use ads_core::metrics;
use ads_core::scenario::WorkloadAction;
use ads_core::trace::Record;
use common::*;

/// An active device leaves with its items, hands them to a courier heading
/// for the market, the courier diverts and re-hands them to a third device,
/// which finally delivers them back to the IMM. Custody stays unbroken.
#[test]
fn leave_handoff_chain_with_diverting_courier() {
    let mut sc = base_scenario();
    sc.horizon = 700;
    sc.params.t_probe = 20;
    // The market population: a center pair plus a relay chain to the south
    // boundary so returning couriers can reach the IMM.
    sc.devices.push(device_cap("hub", 500.0, 500.0, 20));
    sc.devices.push(device_cap("aide", 500.0, 455.0, 20));
    sc.devices.push(device_cap("rim", 500.0, 410.0, 20));
    // A: hosts the item (largest capacity), then walks out the south side and
    // stops beyond everyone's reach.
    let mut a = scripted(
        "a",
        (500.0, 370.0),
        &[(100, 500.0, 345.0), (115, 500.0, 320.0), (700, 500.0, 320.0)],
    );
    a.capacity = 200;
    sc.devices.push(a);
    // B: approaches A heading toward the market, then diverts east without
    // ever entering.
    sc.devices.push(scripted(
        "b",
        (500.0, 260.0),
        &[(160, 500.0, 345.0), (400, 900.0, 345.0), (700, 900.0, 345.0)],
    ));
    // C: waits along B's diversion path, then walks into the market.
    sc.devices.push(scripted(
        "c",
        (560.0, 345.0),
        &[(200, 560.0, 345.0), (300, 520.0, 430.0), (700, 520.0, 430.0)],
    ));
    sc.workload.push(publish(30, "hub", "parcel", "news", 5, 1));
    let sim = run(&sc);

    let item = sim.item_id("parcel").unwrap();
    let a_id = sim.device_id("a").unwrap();
    let m = sim.market_id("plaza").unwrap();
    // Setup held: the item was first stored on A.
    let first_host = sim
        .trace()
        .records()
        .iter()
        .find_map(|r| match &r.record {
            Record::ItemStored { device, item: i, .. } if *i == item => Some(*device),
            _ => None,
        })
        .unwrap();
    assert_eq!(first_host, a_id, "setup: the leaver hosted the item");

    // The return bundle traveled A -> B -> C (each a real transmission).
    let hops: Vec<(DeviceId, DeviceId)> = sim
        .trace()
        .records()
        .iter()
        .filter_map(|r| match &r.record {
            Record::MsgDeliver { kind, at, from, .. } if *kind == "item_return" => {
                Some((*from, *at))
            }
            _ => None,
        })
        .collect();
    let b_id = sim.device_id("b").unwrap();
    let c_id = sim.device_id("c").unwrap();
    assert_with_trace(
        hops.contains(&(a_id, b_id)) && hops.contains(&(b_id, c_id)),
        &format!("expected the A->B->C custody chain, saw {hops:?}"),
        &sim,
    );
    // The item ended up hosted inside the market again, exactly once.
    let (_, st) = sim.imm_state(m).unwrap();
    let hosts = st.assignment_map.get(&item).cloned().unwrap_or_default();
    assert_with_trace(
        hosts.len() == 1 && !hosts.contains(&a_id),
        &format!("item re-hosted in the market, hosts {hosts:?}"),
        &sim,
    );
    assert_eq!(sim.copies_alive(item), 1, "one custodian at every instant");
    let bad = ads_core::audit::non_crash_losses(sim.trace(), false);
    assert_with_trace(bad.is_empty(), &bad.join("\n"), &sim);
}

#[test]
fn degraded_assignment_records_deficit_and_still_acks() {
    let mut sc = base_scenario();
    // Only two devices can fit the item; degree 3 requested.
    sc.devices.push(device_cap("a", 500.0, 500.0, 30));
    sc.devices.push(device_cap("b", 530.0, 500.0, 30));
    sc.devices.push(device_cap("tiny", 500.0, 530.0, 2));
    sc.workload.push(publish(20, "a", "big", "news", 10, 3));
    sc.horizon = 150;
    let sim = run(&sc);
    let item = sim.item_id("big").unwrap();
    let degraded = sim
        .trace()
        .records()
        .iter()
        .find_map(|r| match &r.record {
            Record::ItemAssigned { item: i, hosts, degraded, .. } if *i == item => {
                Some((hosts.len(), *degraded))
            }
            _ => None,
        })
        .expect("assignment happened");
    assert_eq!(degraded, (2, true));
    assert!(sim.acked_items().contains(&item), "stored copies get acked");
    assert_eq!(sim.copies_alive(item), 2);
    // The registry shows the standing deficit for maintenance to retry.
    let m = sim.market_id("plaza").unwrap();
    let (_, st) = sim.imm_state(m).unwrap();
    let entry = &st.replica_registry[&item];
    assert_eq!((entry.degree, entry.hosts.len()), (3, 2));
}

/// The whole market crashes away; the next arrival starts from a fresh epoch
/// with empty state.
#[test]
fn empty_market_restarts_with_fresh_epoch() {
    let mut sc = base_scenario();
    sc.devices.push(device_at("only", 500.0, 500.0));
    sc.devices.push(scripted(
        "late",
        (500.0, 200.0),
        &[(100, 500.0, 480.0), (300, 500.0, 480.0)],
    ));
    sc.workload.push((50, WorkloadAction::Crash { device: "only".into() }));
    sc.horizon = 300;
    let sim = run(&sc);
    let m = sim.market_id("plaza").unwrap();
    let late = sim.device_id("late").unwrap();
    let (imm_dev, st) = sim.imm_state(m).expect("late arrival rebuilt the market");
    assert_eq!(imm_dev, late);
    // No knowledge survived the wipe: the epoch restarts at 1, state empty.
    assert_eq!(st.epoch, 1);
    assert!(st.assignment_map.is_empty());
    assert_eq!(st.capacity_table.len(), 1);
}

/// Two devices publish simultaneously right after the IMM crash: both trigger
/// recovery, the election keeps one, and no item is double-assigned.
#[test]
fn concurrent_recovery_publishers_never_double_assign() {
    let mut sc = base_scenario();
    let (cx, cy) = MARKET_CENTER;
    for i in 0..6 {
        let angle = i as f64 / 6.0 * std::f64::consts::TAU;
        sc.devices.push(device_cap(
            &format!("d{i}"),
            cx + 20.0 * angle.cos(),
            cy + 20.0 * angle.sin(),
            50,
        ));
    }
    sc.workload.push(publish(20, "d1", "old", "news", 5, 2));
    sc.workload.push((100, WorkloadAction::Crash { device: "d0".into() }));
    // Same tick, two publishers, no IMM anywhere.
    sc.workload.push(publish(120, "d2", "p1", "news", 5, 1));
    sc.workload.push(publish(120, "d3", "p2", "news", 5, 1));
    sc.horizon = 400;
    let sim = run(&sc);
    let m = sim.market_id("plaza").unwrap();
    assert_with_trace(
        sim.live_imms(m).len() == 1,
        &format!("one IMM after concurrent recovery, got {:?}", sim.live_imms(m)),
        &sim,
    );
    let (_, st) = sim.imm_state(m).unwrap();
    for name in ["p1", "p2", "old"] {
        let item = sim.item_id(name).unwrap();
        let hosts = st.assignment_map.get(&item).cloned().unwrap_or_default();
        let expected = if name == "old" { 2 } else { 1 };
        assert_with_trace(
            hosts.len() == expected,
            &format!("{name} hosted exactly {expected}x, hosts {hosts:?}"),
            &sim,
        );
        // Registry agrees with physical stores.
        for h in &hosts {
            assert!(sim.device_store(*h).contains(item));
        }
        assert_eq!(sim.copies_alive(item), expected as i64);
    }
    let violations = ads_core::audit::deactivated_imms_never_act(sim.trace());
    assert_with_trace(violations.is_empty(), &violations.join("\n"), &sim);
}

#[test]
fn zero_workload_scenario_yields_mobility_only_trace_and_neutral_metrics() {
    let mut sc = base_scenario();
    sc.horizon = 100;
    // One wanderer far from the market: no protocol activity at all.
    let mut d = ads_core::scenario::DeviceDecl::new("w");
    d.position = (100.0, 100.0);
    d.mobility = ads_core::scenario::MobilityDecl::RandomWaypoint {
        speed: (1.0, 3.0),
        pause: (0, 5),
    };
    sc.devices.push(d);
    let sim = run(&sc);
    let m = metrics::compute(sim.trace(), sim.horizon());
    assert_eq!((m.published, m.acked, m.sync_queries, m.async_queries), (0, 0, 0, 0));
    assert_eq!(m.survival_rate, 1.0);
    assert_eq!(m.chunks_emitted, 0);
    assert!(sim.trace().records().is_empty(), "nothing to record");
}
