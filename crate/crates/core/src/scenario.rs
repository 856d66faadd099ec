//! Scenario files: a line-oriented, sectioned key-value format describing the
//! world, protocol constants, markets, devices, and the timed workload.
//!
//! The format is diff-friendly: one fact per line, stable ordering, `#`
//! comments. [`write`] emits a canonical form that [`parse`] reads back to an
//! identical `Scenario`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::broker::{Importance, Lifetime, Predicate};
use crate::ids::{DeviceId, ItemId, MarketId, QueryId};
use crate::market::MarketSpec;
use crate::publish::SelectionPolicy;
use crate::simkernel::SimTime;
use crate::world::{Itinerary, ItinerarySource, MobilityModel, Position, Waypoint};

/// Which maintenance strategy keeps replica counts at their target.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReplicationStrategy {
    /// Repair replicas when a sign-off message reports a departing host.
    /// Cannot repair after crashes.
    SignOff,
    /// Ping replica hosts every heartbeat period and repair missing ones.
    Periodic,
}

/// Protocol constants, all scenario-tunable.
#[derive(Clone, PartialEq, Debug)]
pub struct ProtocolConfig {
    /// Per-hop radio latency in ticks; links are evaluated at send time.
    pub hop_latency: u64,
    /// Hop budget for region and neighborhood floods.
    pub flood_ttl: u32,
    /// How long to wait for an IMM probe reply before self-instantiating.
    pub t_probe: u64,
    /// Period of the IMM's center-seek check.
    pub t_center: u64,
    /// Period of the replica heartbeat (strategy: periodic).
    pub t_heartbeat: u64,
    /// Carry re-evaluation period when the neighbor set is unchanged.
    pub t_carry: u64,
    /// Minimum predicted-distance improvement (meters) before a carried
    /// message is handed to another device.
    pub carry_epsilon: f64,
    /// Look-ahead horizon for movement prediction.
    pub predict_horizon: u64,
    /// Items per result chunk.
    pub chunk_size: u32,
    /// Period of the storage expiry sweep.
    pub expiry_sweep: u64,
    pub strategy: ReplicationStrategy,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            hop_latency: 1,
            flood_ttl: 8,
            t_probe: 5,
            t_center: 10,
            t_heartbeat: 30,
            t_carry: 5,
            carry_epsilon: 10.0,
            predict_horizon: 60,
            chunk_size: 4,
            expiry_sweep: 60,
            strategy: ReplicationStrategy::SignOff,
        }
    }
}

impl ProtocolConfig {
    /// Round-trip bound for an intra-market exchange; used as the ack wait for
    /// store commands, heartbeats, and the census.
    pub fn ack_window(&self) -> u64 {
        2 * self.hop_latency * self.flood_ttl as u64
    }

    pub fn census_window(&self) -> u64 {
        self.ack_window() + 1
    }

    /// Wait for an initiator-probe reply during chunk delivery (2-hop flood
    /// round trip).
    pub fn initiator_probe_wait(&self) -> u64 {
        4 * self.hop_latency + 1
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct MarketDecl {
    pub name: String,
    pub center: (f64, f64),
    pub radius: f64,
    /// Defaults to radius / 4.
    pub core_radius: Option<f64>,
}

#[derive(Clone, PartialEq, Debug)]
pub enum MobilityDecl {
    Stationary,
    RandomWaypoint { speed: (f64, f64), pause: (u64, u64) },
    Waypoints(Vec<(u64, f64, f64)>),
}

#[derive(Clone, PartialEq, Debug)]
pub enum KnowsDecl {
    All,
    Nothing,
    List(Vec<String>),
}

#[derive(Clone, PartialEq, Debug)]
pub struct DeviceDecl {
    pub name: String,
    pub capacity: u64,
    pub position: (f64, f64),
    pub mobility: MobilityDecl,
    pub knows: KnowsDecl,
}

impl DeviceDecl {
    pub fn new(name: &str) -> Self {
        DeviceDecl {
            name: name.to_string(),
            capacity: 100,
            position: (0.0, 0.0),
            mobility: MobilityDecl::Stationary,
            knows: KnowsDecl::All,
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub enum WorkloadAction {
    Publish {
        device: String,
        item: String,
        type_tag: String,
        size: u64,
        lifetime: Lifetime,
        degree: u32,
        importance: Importance,
        policy: SelectionPolicy,
    },
    SyncQuery {
        device: String,
        tags: Option<Vec<String>>,
        items: Option<Vec<String>>,
        hops: u32,
        timeout: u64,
    },
    AsyncQuery {
        device: String,
        market: String,
        tags: Option<Vec<String>>,
        items: Option<Vec<String>>,
        expect: Option<u32>,
        active_for: u64,
    },
    Crash {
        device: String,
    },
    Shutdown {
        device: String,
    },
}

#[derive(Clone, PartialEq, Debug)]
pub struct Scenario {
    pub seed: u64,
    pub horizon: u64,
    pub world_width: f64,
    pub world_height: f64,
    pub radio_range: f64,
    pub params: ProtocolConfig,
    pub markets: Vec<MarketDecl>,
    pub devices: Vec<DeviceDecl>,
    pub workload: Vec<(u64, WorkloadAction)>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 1,
            horizon: 1000,
            world_width: 1000.0,
            world_height: 1000.0,
            radio_range: 50.0,
            params: ProtocolConfig::default(),
            markets: Vec::new(),
            devices: Vec::new(),
            workload: Vec::new(),
        }
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Semantic(Vec<String>),
}

// ---------------------------------------------------------------------------
// Resolution: names -> dense ids, decls -> runtime structures

/// Workload with names resolved, ready for the engine.
#[derive(Clone, PartialEq, Debug)]
pub enum WorkloadEvent {
    Publish {
        device: DeviceId,
        item: ItemId,
        type_tag: String,
        size: u64,
        lifetime: Lifetime,
        degree: u32,
        importance: Importance,
        policy: SelectionPolicy,
    },
    SyncQuery {
        device: DeviceId,
        query: QueryId,
        predicate: Predicate,
        hops: u32,
        timeout: u64,
    },
    AsyncQuery {
        device: DeviceId,
        query: QueryId,
        predicate: Predicate,
        market: MarketId,
        expect: Option<u32>,
        active_for: u64,
    },
    Crash {
        device: DeviceId,
    },
    Shutdown {
        device: DeviceId,
    },
}

pub(crate) struct ResolvedDevice {
    pub capacity: u64,
    pub position: Position,
    pub mobility: MobilityModel,
    pub knows: Vec<MarketId>,
}

pub(crate) struct Resolved {
    pub device_names: Vec<String>,
    pub market_names: Vec<String>,
    pub item_names: Vec<String>,
    pub markets: Vec<MarketSpec>,
    pub devices: Vec<ResolvedDevice>,
    pub workload: Vec<(SimTime, WorkloadEvent)>,
}

pub(crate) fn resolve(sc: &Scenario) -> Result<Resolved, ScenarioError> {
    let mut errs: Vec<String> = Vec::new();

    if sc.horizon == 0 {
        errs.push("horizon must be >= 1".into());
    }
    if sc.world_width <= 0.0 || sc.world_height <= 0.0 {
        errs.push("world dimensions must be positive".into());
    }
    if sc.radio_range <= 0.0 {
        errs.push("radio_range must be positive".into());
    }
    let p = &sc.params;
    for (name, v) in [
        ("hop_latency", p.hop_latency),
        ("t_probe", p.t_probe),
        ("t_center", p.t_center),
        ("t_heartbeat", p.t_heartbeat),
        ("t_carry", p.t_carry),
        ("predict_horizon", p.predict_horizon),
        ("expiry_sweep", p.expiry_sweep),
    ] {
        if v == 0 {
            errs.push(format!("{name} must be >= 1"));
        }
    }
    if p.flood_ttl == 0 {
        errs.push("flood_ttl must be >= 1".into());
    }
    if p.chunk_size == 0 {
        errs.push("chunk_size must be >= 1".into());
    }
    if p.carry_epsilon < 0.0 {
        errs.push("carry_epsilon must be >= 0".into());
    }

    let in_world = |x: f64, y: f64| x >= 0.0 && x <= sc.world_width && y >= 0.0 && y <= sc.world_height;

    let mut market_ids: BTreeMap<&str, MarketId> = BTreeMap::new();
    let mut markets = Vec::new();
    for (i, m) in sc.markets.iter().enumerate() {
        if market_ids.insert(&m.name, MarketId(i as u32)).is_some() {
            errs.push(format!("duplicate market name '{}'", m.name));
        }
        if m.radius <= 0.0 {
            errs.push(format!("market '{}': radius must be positive", m.name));
        }
        let core = m.core_radius.unwrap_or(m.radius / 4.0);
        if core <= 0.0 || core >= m.radius {
            errs.push(format!(
                "market '{}': core_radius must satisfy 0 < core < radius",
                m.name
            ));
        }
        if !in_world(m.center.0, m.center.1) {
            errs.push(format!("market '{}': center outside world bounds", m.name));
        }
        markets.push(MarketSpec {
            id: MarketId(i as u32),
            center: Position::new(m.center.0, m.center.1),
            radius: m.radius,
            core_radius: core,
        });
    }

    let mut device_ids: BTreeMap<&str, DeviceId> = BTreeMap::new();
    let mut devices = Vec::new();
    for (i, d) in sc.devices.iter().enumerate() {
        if device_ids.insert(&d.name, DeviceId(i as u32)).is_some() {
            errs.push(format!("duplicate device name '{}'", d.name));
        }
        if !in_world(d.position.0, d.position.1) {
            errs.push(format!("device '{}': position outside world bounds", d.name));
        }
        let mobility = match &d.mobility {
            MobilityDecl::Stationary => MobilityModel::Stationary,
            MobilityDecl::RandomWaypoint { speed, pause } => {
                if speed.0 <= 0.0 || speed.1 < speed.0 {
                    errs.push(format!(
                        "device '{}': random_waypoint speed range must satisfy 0 < lo <= hi",
                        d.name
                    ));
                }
                if pause.1 < pause.0 {
                    errs.push(format!(
                        "device '{}': random_waypoint pause range must satisfy lo <= hi",
                        d.name
                    ));
                }
                MobilityModel::RandomWaypoint {
                    speed: *speed,
                    pause: *pause,
                }
            }
            MobilityDecl::Waypoints(wps) => {
                for (t, x, y) in wps {
                    if *t == 0 {
                        errs.push(format!("device '{}': waypoint time must be > 0", d.name));
                    }
                    if !in_world(*x, *y) {
                        errs.push(format!(
                            "device '{}': waypoint ({x}, {y}) outside world bounds",
                            d.name
                        ));
                    }
                }
                let waypoints: Vec<Waypoint> = wps
                    .iter()
                    .map(|(t, x, y)| Waypoint {
                        at: SimTime(*t),
                        pos: Position::new(*x, *y),
                    })
                    .collect();
                match Itinerary::new(waypoints, ItinerarySource::Declared) {
                    Ok(it) => MobilityModel::Scripted(it),
                    Err(e) => {
                        errs.push(format!("device '{}': {e}", d.name));
                        MobilityModel::Stationary
                    }
                }
            }
        };
        devices.push((d, mobility));
    }

    let mut resolved_devices = Vec::new();
    for (d, mobility) in devices {
        let knows = match &d.knows {
            KnowsDecl::All => markets.iter().map(|m| m.id).collect(),
            KnowsDecl::Nothing => Vec::new(),
            KnowsDecl::List(names) => names
                .iter()
                .filter_map(|n| {
                    let id = market_ids.get(n.as_str()).copied();
                    if id.is_none() {
                        errs.push(format!("device '{}': unknown market '{}' in knows", d.name, n));
                    }
                    id
                })
                .collect(),
        };
        resolved_devices.push(ResolvedDevice {
            capacity: d.capacity,
            position: Position::new(d.position.0, d.position.1),
            mobility,
            knows,
        });
    }

    // Intern item names in first-occurrence order across the workload.
    let mut interner = ItemInterner::default();

    let mut workload = Vec::new();
    let mut next_query = 0u32;
    for (at, action) in &sc.workload {
        let dev = |name: &str, errs: &mut Vec<String>| -> Option<DeviceId> {
            let id = device_ids.get(name).copied();
            if id.is_none() {
                errs.push(format!("workload at {at}: unknown device '{name}'"));
            }
            id
        };
        match action {
            WorkloadAction::Publish {
                device,
                item,
                type_tag,
                size,
                lifetime,
                degree,
                importance,
                policy,
            } => {
                let Some(device) = dev(device, &mut errs) else { continue };
                if *size == 0 {
                    errs.push(format!("workload at {at}: item size must be >= 1"));
                }
                if *degree == 0 {
                    errs.push(format!("workload at {at}: replication degree must be >= 1"));
                }
                if *importance == Importance::High && *degree < 2 {
                    errs.push(format!(
                        "workload at {at}: high-importance items need replication degree >= 2"
                    ));
                }
                let item = interner.intern(item);
                workload.push((
                    SimTime(*at),
                    WorkloadEvent::Publish {
                        device,
                        item,
                        type_tag: type_tag.clone(),
                        size: *size,
                        lifetime: *lifetime,
                        degree: *degree,
                        importance: *importance,
                        policy: *policy,
                    },
                ));
            }
            WorkloadAction::SyncQuery {
                device,
                tags,
                items,
                hops,
                timeout,
            } => {
                let Some(device) = dev(device, &mut errs) else { continue };
                if *hops > 0 && *timeout == 0 {
                    errs.push(format!(
                        "workload at {at}: sync query with hops > 0 needs timeout > 0"
                    ));
                }
                let predicate = build_predicate(tags, items, &mut interner);
                let query = QueryId(next_query);
                next_query += 1;
                workload.push((
                    SimTime(*at),
                    WorkloadEvent::SyncQuery {
                        device,
                        query,
                        predicate,
                        hops: *hops,
                        timeout: *timeout,
                    },
                ));
            }
            WorkloadAction::AsyncQuery {
                device,
                market,
                tags,
                items,
                expect,
                active_for,
            } => {
                let Some(device) = dev(device, &mut errs) else { continue };
                let market = match market_ids.get(market.as_str()) {
                    Some(m) => *m,
                    None => {
                        errs.push(format!("workload at {at}: unknown market '{market}'"));
                        continue;
                    }
                };
                if *active_for == 0 {
                    errs.push(format!("workload at {at}: active_for must be >= 1"));
                }
                let predicate = build_predicate(tags, items, &mut interner);
                let query = QueryId(next_query);
                next_query += 1;
                workload.push((
                    SimTime(*at),
                    WorkloadEvent::AsyncQuery {
                        device,
                        query,
                        predicate,
                        market,
                        expect: *expect,
                        active_for: *active_for,
                    },
                ));
            }
            WorkloadAction::Crash { device } => {
                let Some(device) = dev(device, &mut errs) else { continue };
                workload.push((SimTime(*at), WorkloadEvent::Crash { device }));
            }
            WorkloadAction::Shutdown { device } => {
                let Some(device) = dev(device, &mut errs) else { continue };
                workload.push((SimTime(*at), WorkloadEvent::Shutdown { device }));
            }
        }
    }

    if !errs.is_empty() {
        return Err(ScenarioError::Semantic(errs));
    }

    Ok(Resolved {
        device_names: sc.devices.iter().map(|d| d.name.clone()).collect(),
        market_names: sc.markets.iter().map(|m| m.name.clone()).collect(),
        item_names: interner.names,
        markets,
        devices: resolved_devices,
        workload,
    })
}

#[derive(Default)]
struct ItemInterner {
    ids: BTreeMap<String, ItemId>,
    names: Vec<String>,
}

impl ItemInterner {
    fn intern(&mut self, name: &str) -> ItemId {
        if let Some(id) = self.ids.get(name) {
            return *id;
        }
        let id = ItemId(self.names.len() as u32);
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }
}

fn build_predicate(
    tags: &Option<Vec<String>>,
    items: &Option<Vec<String>>,
    interner: &mut ItemInterner,
) -> Predicate {
    let tag_set: Option<BTreeSet<String>> = tags.as_ref().map(|t| t.iter().cloned().collect());
    let id_set: Option<BTreeSet<ItemId>> =
        items.as_ref().map(|names| names.iter().map(|n| interner.intern(n)).collect());
    Predicate {
        tags: tag_set,
        ids: id_set,
    }
}

/// Validate without building a simulation.
pub fn validate(sc: &Scenario) -> Result<(), ScenarioError> {
    resolve(sc).map(|_| ())
}

// ---------------------------------------------------------------------------
// Text format

pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(e.to_string()))?;
    let sc = parse(&text)?;
    validate(&sc)?;
    Ok(sc)
}

pub fn save(sc: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    std::fs::write(path, write(sc)).map_err(|e| ScenarioError::Io(e.to_string()))
}

enum Section {
    Top,
    Sim,
    Params,
    Market(usize),
    Device(usize),
    Workload,
}

pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
    let mut sc = Scenario::default();
    let mut section = Section::Top;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ScenarioError::Parse { line: lineno, msg };

        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated section header".into()))?
                .trim();
            section = match header {
                "sim" => Section::Sim,
                "params" => Section::Params,
                "workload" => Section::Workload,
                _ => {
                    if let Some(name) = header.strip_prefix("market ") {
                        sc.markets.push(MarketDecl {
                            name: name.trim().to_string(),
                            center: (0.0, 0.0),
                            radius: 100.0,
                            core_radius: None,
                        });
                        Section::Market(sc.markets.len() - 1)
                    } else if let Some(name) = header.strip_prefix("device ") {
                        sc.devices.push(DeviceDecl::new(name.trim()));
                        Section::Device(sc.devices.len() - 1)
                    } else {
                        return Err(err(format!("unknown section '[{header}]'")));
                    }
                }
            };
            continue;
        }

        let tokens: Vec<&str> = line.split_whitespace().collect();
        let key = tokens[0];
        match section {
            Section::Top => {
                if key == "version" {
                    if tokens.get(1) != Some(&"1") {
                        return Err(err("unsupported version".into()));
                    }
                } else {
                    return Err(err(format!("unexpected '{key}' outside any section")));
                }
            }
            Section::Sim => match key {
                "seed" => sc.seed = parse_num(&tokens, 1, lineno)?,
                "horizon" => sc.horizon = parse_num(&tokens, 1, lineno)?,
                "world" => {
                    sc.world_width = parse_num(&tokens, 1, lineno)?;
                    sc.world_height = parse_num(&tokens, 2, lineno)?;
                }
                "radio_range" => sc.radio_range = parse_num(&tokens, 1, lineno)?,
                _ => return Err(err(format!("unknown [sim] key '{key}'"))),
            },
            Section::Params => {
                let p = &mut sc.params;
                match key {
                    "hop_latency" => p.hop_latency = parse_num(&tokens, 1, lineno)?,
                    "flood_ttl" => p.flood_ttl = parse_num(&tokens, 1, lineno)?,
                    "t_probe" => p.t_probe = parse_num(&tokens, 1, lineno)?,
                    "t_center" => p.t_center = parse_num(&tokens, 1, lineno)?,
                    "t_heartbeat" => p.t_heartbeat = parse_num(&tokens, 1, lineno)?,
                    "t_carry" => p.t_carry = parse_num(&tokens, 1, lineno)?,
                    "carry_epsilon" => p.carry_epsilon = parse_num(&tokens, 1, lineno)?,
                    "predict_horizon" => p.predict_horizon = parse_num(&tokens, 1, lineno)?,
                    "chunk_size" => p.chunk_size = parse_num(&tokens, 1, lineno)?,
                    "expiry_sweep" => p.expiry_sweep = parse_num(&tokens, 1, lineno)?,
                    "strategy" => {
                        p.strategy = match tokens.get(1) {
                            Some(&"signoff") => ReplicationStrategy::SignOff,
                            Some(&"periodic") => ReplicationStrategy::Periodic,
                            other => {
                                return Err(err(format!(
                                    "strategy must be signoff|periodic, got {other:?}"
                                )))
                            }
                        }
                    }
                    _ => return Err(err(format!("unknown [params] key '{key}'"))),
                }
            }
            Section::Market(i) => {
                let m = &mut sc.markets[i];
                match key {
                    "center" => {
                        m.center = (parse_num(&tokens, 1, lineno)?, parse_num(&tokens, 2, lineno)?)
                    }
                    "radius" => m.radius = parse_num(&tokens, 1, lineno)?,
                    "core_radius" => m.core_radius = Some(parse_num(&tokens, 1, lineno)?),
                    _ => return Err(err(format!("unknown market key '{key}'"))),
                }
            }
            Section::Device(i) => {
                let d = &mut sc.devices[i];
                match key {
                    "capacity" => d.capacity = parse_num(&tokens, 1, lineno)?,
                    "position" => {
                        d.position =
                            (parse_num(&tokens, 1, lineno)?, parse_num(&tokens, 2, lineno)?)
                    }
                    "mobility" => d.mobility = parse_mobility(&tokens[1..], lineno)?,
                    "knows" => {
                        d.knows = match tokens.get(1) {
                            Some(&"all") => KnowsDecl::All,
                            Some(&"none") => KnowsDecl::Nothing,
                            Some(list) => {
                                KnowsDecl::List(list.split(',').map(|s| s.to_string()).collect())
                            }
                            None => return Err(err("knows needs a value".into())),
                        }
                    }
                    _ => return Err(err(format!("unknown device key '{key}'"))),
                }
            }
            Section::Workload => {
                if key != "at" {
                    return Err(err("workload lines start with 'at <time>'".into()));
                }
                let at: u64 = parse_num(&tokens, 1, lineno)?;
                let action = parse_workload(&tokens[2..], lineno)?;
                sc.workload.push((at, action));
            }
        }
    }

    Ok(sc)
}

fn parse_num<T: std::str::FromStr>(
    tokens: &[&str],
    idx: usize,
    line: usize,
) -> Result<T, ScenarioError> {
    let tok = tokens.get(idx).ok_or(ScenarioError::Parse {
        line,
        msg: format!("missing value for '{}'", tokens[0]),
    })?;
    tok.parse().map_err(|_| ScenarioError::Parse {
        line,
        msg: format!("invalid number '{tok}'"),
    })
}

fn parse_mobility(tokens: &[&str], line: usize) -> Result<MobilityDecl, ScenarioError> {
    let err = |msg: String| ScenarioError::Parse { line, msg };
    match tokens.first() {
        Some(&"stationary") => Ok(MobilityDecl::Stationary),
        Some(&"random_waypoint") => {
            if tokens.len() != 5 {
                return Err(err(
                    "random_waypoint needs: speed_lo speed_hi pause_lo pause_hi".into(),
                ));
            }
            let f = |i: usize| -> Result<f64, ScenarioError> {
                tokens[i]
                    .parse()
                    .map_err(|_| err(format!("invalid number '{}'", tokens[i])))
            };
            let u = |i: usize| -> Result<u64, ScenarioError> {
                tokens[i]
                    .parse()
                    .map_err(|_| err(format!("invalid number '{}'", tokens[i])))
            };
            Ok(MobilityDecl::RandomWaypoint {
                speed: (f(1)?, f(2)?),
                pause: (u(3)?, u(4)?),
            })
        }
        Some(&"waypoints") => {
            let mut wps = Vec::new();
            for tok in &tokens[1..] {
                let (t, xy) = tok
                    .split_once(':')
                    .ok_or_else(|| err(format!("waypoint '{tok}' must be t:x,y")))?;
                let (x, y) = xy
                    .split_once(',')
                    .ok_or_else(|| err(format!("waypoint '{tok}' must be t:x,y")))?;
                let parse = |s: &str| -> Result<f64, ScenarioError> {
                    s.parse().map_err(|_| err(format!("invalid number '{s}'")))
                };
                let tt: u64 = t.parse().map_err(|_| err(format!("invalid time '{t}'")))?;
                wps.push((tt, parse(x)?, parse(y)?));
            }
            if wps.is_empty() {
                return Err(err("waypoints needs at least one t:x,y entry".into()));
            }
            Ok(MobilityDecl::Waypoints(wps))
        }
        other => Err(err(format!(
            "mobility must be stationary|random_waypoint|waypoints, got {other:?}"
        ))),
    }
}

fn parse_workload(tokens: &[&str], line: usize) -> Result<WorkloadAction, ScenarioError> {
    let err = |msg: String| ScenarioError::Parse { line, msg };
    let verb = tokens
        .first()
        .ok_or_else(|| err("missing workload verb".into()))?;
    let device = tokens
        .get(1)
        .ok_or_else(|| err(format!("'{verb}' needs a device name")))?
        .to_string();

    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    for tok in &tokens[2..] {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got '{tok}'")))?;
        kv.insert(k, v);
    }
    let get_num = |kv: &BTreeMap<&str, &str>, k: &str| -> Result<Option<u64>, ScenarioError> {
        kv.get(k)
            .map(|v| v.parse().map_err(|_| err(format!("invalid number '{v}' for {k}"))))
            .transpose()
    };
    let get_list = |kv: &BTreeMap<&str, &str>, k: &str| -> Option<Vec<String>> {
        kv.get(k)
            .map(|v| v.split(',').map(|s| s.to_string()).collect())
    };

    match *verb {
        "publish" => {
            let item = kv
                .get("item")
                .ok_or_else(|| err("publish needs item=<name>".into()))?
                .to_string();
            let type_tag = kv
                .get("type")
                .ok_or_else(|| err("publish needs type=<tag>".into()))?
                .to_string();
            let size = get_num(&kv, "size")?.ok_or_else(|| err("publish needs size=<n>".into()))?;
            let degree = get_num(&kv, "degree")?.unwrap_or(1) as u32;
            let lifetime = match kv.get("lifetime") {
                None => Lifetime::Infinite,
                Some(&"inf") => Lifetime::Infinite,
                Some(v) => Lifetime::Finite(
                    v.parse()
                        .map_err(|_| err(format!("invalid lifetime '{v}'")))?,
                ),
            };
            let importance = match kv.get("importance") {
                None => Importance::Normal,
                Some(&"low") => Importance::Low,
                Some(&"normal") => Importance::Normal,
                Some(&"high") => Importance::High,
                Some(v) => return Err(err(format!("invalid importance '{v}'"))),
            };
            let policy = match kv.get("policy") {
                None => SelectionPolicy::NearestMarket,
                Some(&"nearest") => SelectionPolicy::NearestMarket,
                Some(&"best_fit") => SelectionPolicy::BestFitType,
                Some(v) => return Err(err(format!("invalid policy '{v}'"))),
            };
            Ok(WorkloadAction::Publish {
                device,
                item,
                type_tag,
                size,
                lifetime,
                degree,
                importance,
                policy,
            })
        }
        "query_sync" => Ok(WorkloadAction::SyncQuery {
            device,
            tags: get_list(&kv, "tags"),
            items: get_list(&kv, "items"),
            hops: get_num(&kv, "hops")?.unwrap_or(0) as u32,
            timeout: get_num(&kv, "timeout")?.unwrap_or(0),
        }),
        "query_async" => Ok(WorkloadAction::AsyncQuery {
            device,
            market: kv
                .get("market")
                .ok_or_else(|| err("query_async needs market=<name>".into()))?
                .to_string(),
            tags: get_list(&kv, "tags"),
            items: get_list(&kv, "items"),
            expect: get_num(&kv, "expect")?.map(|v| v as u32),
            active_for: get_num(&kv, "active_for")?
                .ok_or_else(|| err("query_async needs active_for=<ticks>".into()))?,
        }),
        "crash" => Ok(WorkloadAction::Crash { device }),
        "shutdown" => Ok(WorkloadAction::Shutdown { device }),
        other => Err(err(format!("unknown workload verb '{other}'"))),
    }
}

/// Canonical text form; `parse(write(sc)) == sc`.
pub fn write(sc: &Scenario) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "version 1");
    let _ = writeln!(w);
    let _ = writeln!(w, "[sim]");
    let _ = writeln!(w, "seed {}", sc.seed);
    let _ = writeln!(w, "horizon {}", sc.horizon);
    let _ = writeln!(w, "world {} {}", sc.world_width, sc.world_height);
    let _ = writeln!(w, "radio_range {}", sc.radio_range);
    let _ = writeln!(w);
    let p = &sc.params;
    let _ = writeln!(w, "[params]");
    let _ = writeln!(w, "hop_latency {}", p.hop_latency);
    let _ = writeln!(w, "flood_ttl {}", p.flood_ttl);
    let _ = writeln!(w, "t_probe {}", p.t_probe);
    let _ = writeln!(w, "t_center {}", p.t_center);
    let _ = writeln!(w, "t_heartbeat {}", p.t_heartbeat);
    let _ = writeln!(w, "t_carry {}", p.t_carry);
    let _ = writeln!(w, "carry_epsilon {}", p.carry_epsilon);
    let _ = writeln!(w, "predict_horizon {}", p.predict_horizon);
    let _ = writeln!(w, "chunk_size {}", p.chunk_size);
    let _ = writeln!(w, "expiry_sweep {}", p.expiry_sweep);
    let _ = writeln!(
        w,
        "strategy {}",
        match p.strategy {
            ReplicationStrategy::SignOff => "signoff",
            ReplicationStrategy::Periodic => "periodic",
        }
    );
    for m in &sc.markets {
        let _ = writeln!(w);
        let _ = writeln!(w, "[market {}]", m.name);
        let _ = writeln!(w, "center {} {}", m.center.0, m.center.1);
        let _ = writeln!(w, "radius {}", m.radius);
        if let Some(core) = m.core_radius {
            let _ = writeln!(w, "core_radius {core}");
        }
    }
    for d in &sc.devices {
        let _ = writeln!(w);
        let _ = writeln!(w, "[device {}]", d.name);
        let _ = writeln!(w, "capacity {}", d.capacity);
        let _ = writeln!(w, "position {} {}", d.position.0, d.position.1);
        match &d.mobility {
            MobilityDecl::Stationary => {
                let _ = writeln!(w, "mobility stationary");
            }
            MobilityDecl::RandomWaypoint { speed, pause } => {
                let _ = writeln!(
                    w,
                    "mobility random_waypoint {} {} {} {}",
                    speed.0, speed.1, pause.0, pause.1
                );
            }
            MobilityDecl::Waypoints(wps) => {
                let pieces: Vec<String> = wps
                    .iter()
                    .map(|(t, x, y)| format!("{t}:{x},{y}"))
                    .collect();
                let _ = writeln!(w, "mobility waypoints {}", pieces.join(" "));
            }
        }
        match &d.knows {
            KnowsDecl::All => {
                let _ = writeln!(w, "knows all");
            }
            KnowsDecl::Nothing => {
                let _ = writeln!(w, "knows none");
            }
            KnowsDecl::List(names) => {
                let _ = writeln!(w, "knows {}", names.join(","));
            }
        }
    }
    if !sc.workload.is_empty() {
        let _ = writeln!(w);
        let _ = writeln!(w, "[workload]");
        for (at, action) in &sc.workload {
            let _ = writeln!(w, "at {} {}", at, workload_line(action));
        }
    }
    out
}

fn workload_line(action: &WorkloadAction) -> String {
    match action {
        WorkloadAction::Publish {
            device,
            item,
            type_tag,
            size,
            lifetime,
            degree,
            importance,
            policy,
        } => {
            let lt = match lifetime {
                Lifetime::Infinite => "inf".to_string(),
                Lifetime::Finite(t) => t.to_string(),
            };
            let imp = match importance {
                Importance::Low => "low",
                Importance::Normal => "normal",
                Importance::High => "high",
            };
            let pol = match policy {
                SelectionPolicy::NearestMarket => "nearest",
                SelectionPolicy::BestFitType => "best_fit",
            };
            format!(
                "publish {device} item={item} type={type_tag} size={size} degree={degree} lifetime={lt} importance={imp} policy={pol}"
            )
        }
        WorkloadAction::SyncQuery {
            device,
            tags,
            items,
            hops,
            timeout,
        } => {
            let mut s = format!("query_sync {device} hops={hops} timeout={timeout}");
            if let Some(tags) = tags {
                s.push_str(&format!(" tags={}", tags.join(",")));
            }
            if let Some(items) = items {
                s.push_str(&format!(" items={}", items.join(",")));
            }
            s
        }
        WorkloadAction::AsyncQuery {
            device,
            market,
            tags,
            items,
            expect,
            active_for,
        } => {
            let mut s = format!("query_async {device} market={market} active_for={active_for}");
            if let Some(tags) = tags {
                s.push_str(&format!(" tags={}", tags.join(",")));
            }
            if let Some(items) = items {
                s.push_str(&format!(" items={}", items.join(",")));
            }
            if let Some(k) = expect {
                s.push_str(&format!(" expect={k}"));
            }
            s
        }
        WorkloadAction::Crash { device } => format!("crash {device}"),
        WorkloadAction::Shutdown { device } => format!("shutdown {device}"),
    }
}
