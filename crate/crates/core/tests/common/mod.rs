//! Shared scenario builders for the integration and acceptance suites.

#![allow(dead_code)]

use ads_core::scenario::{DeviceDecl, MarketDecl, MobilityDecl, Scenario, WorkloadAction};
use ads_core::Simulation;

pub const MARKET_CENTER: (f64, f64) = (500.0, 500.0);
pub const MARKET_RADIUS: f64 = 150.0;

/// A 1000x1000 world with one market at the center and radio range 50.
pub fn base_scenario() -> Scenario {
    let mut sc = Scenario::default();
    sc.horizon = 600;
    sc.markets.push(MarketDecl {
        name: "plaza".into(),
        center: MARKET_CENTER,
        radius: MARKET_RADIUS,
        core_radius: None,
    });
    sc
}

pub fn device_at(name: &str, x: f64, y: f64) -> DeviceDecl {
    let mut d = DeviceDecl::new(name);
    d.position = (x, y);
    d
}

pub fn device_cap(name: &str, x: f64, y: f64, capacity: u64) -> DeviceDecl {
    let mut d = device_at(name, x, y);
    d.capacity = capacity;
    d
}

pub fn scripted(name: &str, start: (f64, f64), waypoints: &[(u64, f64, f64)]) -> DeviceDecl {
    let mut d = DeviceDecl::new(name);
    d.position = start;
    d.mobility = MobilityDecl::Waypoints(waypoints.to_vec());
    d
}

/// A ring of stationary devices inside the market, spaced within radio range
/// of their neighbors, covering center to boundary. Returns their names.
pub fn backbone(sc: &mut Scenario, count: usize) -> Vec<String> {
    let mut names = Vec::new();
    let (cx, cy) = MARKET_CENTER;
    for i in 0..count {
        let name = format!("bb{i}");
        // Spiral from center outwards, spacing well under the radio range.
        let angle = i as f64 * 0.9;
        let r = (i as f64 / count as f64) * (MARKET_RADIUS - 20.0);
        let d = device_at(&name, cx + r * angle.cos(), cy + r * angle.sin());
        sc.devices.push(d);
        names.push(name);
    }
    names
}

pub fn publish(
    at: u64,
    device: &str,
    item: &str,
    tag: &str,
    size: u64,
    degree: u32,
) -> (u64, WorkloadAction) {
    (
        at,
        WorkloadAction::Publish {
            device: device.into(),
            item: item.into(),
            type_tag: tag.into(),
            size,
            lifetime: ads_core::broker::Lifetime::Infinite,
            degree,
            importance: if degree > 1 {
                ads_core::broker::Importance::High
            } else {
                ads_core::broker::Importance::Normal
            },
            policy: ads_core::publish::SelectionPolicy::NearestMarket,
        },
    )
}

pub fn sim(sc: &Scenario) -> Simulation {
    Simulation::from_scenario(sc, None).expect("valid scenario")
}

pub fn run(sc: &Scenario) -> Simulation {
    let mut s = sim(sc);
    s.run();
    s
}

/// Panic with the trace appended, for debuggable assertion failures.
pub fn assert_with_trace(cond: bool, msg: &str, sim: &Simulation) {
    if !cond {
        panic!("{msg}\n--- trace ---\n{}", sim.trace().render());
    }
}
