//! Geometry and mobility: device positions in a bounded plane, movement
//! models, unit-disk connectivity, and the movement prediction that smart
//! forwarding relies on.
//!
//! The radio model is a closed unit disk: two online devices are neighbors iff
//! their distance is <= the radio range. The neighbor relation is therefore
//! symmetric and irreflexive by construction, and the connectivity graph at any
//! instant is a pure function of positions.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ids::DeviceId;
use crate::simkernel::SimTime;

#[derive(Clone, Copy, PartialEq, Debug, Default)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn dist(self, other: Position) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(self, other: Position) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Rectangular world [0, width] x [0, height].
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Bounds {
    pub width: f64,
    pub height: f64,
}

impl Bounds {
    pub fn clamp(&self, p: Position) -> Position {
        Position {
            x: p.x.clamp(0.0, self.width),
            y: p.y.clamp(0.0, self.height),
        }
    }

    pub fn contains(&self, p: Position) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }
}

/// Where an itinerary came from. Declared itineraries (user calendar) are
/// trusted exactly; inferred ones are extrapolations from observed movement.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ItinerarySource {
    Declared,
    Inferred,
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Waypoint {
    pub at: SimTime,
    pub pos: Position,
}

/// A time-stamped route: the device is at `waypoints[i].pos` at
/// `waypoints[i].at` and moves linearly in between. Before the first waypoint
/// it sits at the first position, after the last it stays at the last.
#[derive(Clone, PartialEq, Debug)]
pub struct Itinerary {
    pub waypoints: Vec<Waypoint>,
    pub source: ItinerarySource,
}

impl Itinerary {
    /// Waypoint times must be strictly increasing.
    pub fn new(waypoints: Vec<Waypoint>, source: ItinerarySource) -> Result<Self, String> {
        if waypoints.is_empty() {
            return Err("itinerary needs at least one waypoint".into());
        }
        for w in waypoints.windows(2) {
            if w[1].at <= w[0].at {
                return Err(format!(
                    "waypoint times not strictly increasing: {} then {}",
                    w[0].at, w[1].at
                ));
            }
        }
        Ok(Itinerary { waypoints, source })
    }

    pub fn position_at(&self, t: SimTime) -> Position {
        let wps = &self.waypoints;
        if t <= wps[0].at {
            return wps[0].pos;
        }
        for w in wps.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t <= b.at {
                let span = (b.at.ticks() - a.at.ticks()) as f64;
                let frac = (t.ticks() - a.at.ticks()) as f64 / span;
                return Position {
                    x: a.pos.x + (b.pos.x - a.pos.x) * frac,
                    y: a.pos.y + (b.pos.y - a.pos.y) * frac,
                };
            }
        }
        wps[wps.len() - 1].pos
    }

    pub fn last(&self) -> Waypoint {
        self.waypoints[self.waypoints.len() - 1]
    }

    /// First waypoint strictly after `t`, with its index.
    pub fn next_after(&self, t: SimTime) -> Option<(usize, Waypoint)> {
        self.waypoints
            .iter()
            .enumerate()
            .find(|(_, w)| w.at > t)
            .map(|(i, w)| (i, *w))
    }
}

#[derive(Clone, PartialEq, Debug)]
pub enum MobilityModel {
    Stationary,
    RandomWaypoint {
        speed: (f64, f64),
        pause: (u64, u64),
    },
    /// Follows a declared itinerary exactly, reaching each waypoint at its
    /// declared time. The trajectory starts from the device's initial position
    /// at t=0.
    Scripted(Itinerary),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Confidence {
    Declared,
    Inferred,
}

#[derive(Clone, Debug)]
enum RwPhase {
    Pick,
    Pause { until: SimTime },
    Travel { target: Position, speed: f64 },
}

const HISTORY_LEN: usize = 3;

struct DevMotion {
    pos: Position,
    online: bool,
    model: MobilityModel,
    /// For scripted devices: full trajectory knots including the t=0 start.
    knots: Option<Itinerary>,
    rw: RwPhase,
    history: VecDeque<(SimTime, Position)>,
}

/// All device geometry for one simulation instance.
pub struct World {
    bounds: Bounds,
    radio_range: f64,
    devs: Vec<DevMotion>,
}

impl World {
    pub fn new(bounds: Bounds, radio_range: f64) -> Self {
        World {
            bounds,
            radio_range,
            devs: Vec::new(),
        }
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn radio_range(&self) -> f64 {
        self.radio_range
    }

    pub fn device_count(&self) -> usize {
        self.devs.len()
    }

    pub fn add_device(&mut self, pos: Position, model: MobilityModel) -> DeviceId {
        let id = DeviceId(self.devs.len() as u32);
        let pos = self.bounds.clamp(pos);
        let knots = match &model {
            MobilityModel::Scripted(itin) => {
                let mut knots = Vec::with_capacity(itin.waypoints.len() + 1);
                if itin.waypoints[0].at > SimTime::ZERO {
                    knots.push(Waypoint {
                        at: SimTime::ZERO,
                        pos,
                    });
                }
                knots.extend(itin.waypoints.iter().copied());
                Some(Itinerary {
                    waypoints: knots,
                    source: ItinerarySource::Declared,
                })
            }
            _ => None,
        };
        let mut history = VecDeque::with_capacity(HISTORY_LEN);
        history.push_back((SimTime::ZERO, pos));
        self.devs.push(DevMotion {
            pos,
            online: true,
            model,
            knots,
            rw: RwPhase::Pick,
            history,
        });
        id
    }

    pub fn position(&self, d: DeviceId) -> Position {
        self.dev(d).pos
    }

    pub fn is_online(&self, d: DeviceId) -> bool {
        self.dev(d).online
    }

    /// Radio off and position frozen from now on.
    pub fn set_offline(&mut self, d: DeviceId) {
        self.devs[d.index()].online = false;
    }

    fn dev(&self, d: DeviceId) -> &DevMotion {
        self.devs
            .get(d.index())
            .unwrap_or_else(|| panic!("unknown device id {d}"))
    }

    /// Advance every online device by `dt` ticks so that positions reflect the
    /// new time `now`. Random-waypoint devices draw targets, speeds and pauses
    /// from `rng` in device-id order.
    pub fn step_mobility(&mut self, now: SimTime, dt: u64, rng: &mut ChaCha8Rng) {
        assert!(dt >= 1, "step_mobility needs dt >= 1");
        let bounds = self.bounds;
        for dev in self.devs.iter_mut() {
            if !dev.online {
                continue;
            }
            match &dev.model {
                MobilityModel::Stationary => {}
                MobilityModel::Scripted(_) => {
                    let knots = dev.knots.as_ref().expect("scripted device has knots");
                    dev.pos = bounds.clamp(knots.position_at(now));
                }
                MobilityModel::RandomWaypoint { speed, pause } => {
                    let (speed_range, pause_range) = (*speed, *pause);
                    // Budget for this step; arrival mid-step consumes the rest.
                    loop {
                        match dev.rw.clone() {
                            RwPhase::Pick => {
                                let target = Position {
                                    x: rng.gen_range(0.0..=bounds.width),
                                    y: rng.gen_range(0.0..=bounds.height),
                                };
                                let sp = if speed_range.0 >= speed_range.1 {
                                    speed_range.0
                                } else {
                                    rng.gen_range(speed_range.0..speed_range.1)
                                };
                                dev.rw = RwPhase::Travel {
                                    target,
                                    speed: sp.max(f64::MIN_POSITIVE),
                                };
                            }
                            RwPhase::Pause { until } => {
                                if now >= until {
                                    dev.rw = RwPhase::Pick;
                                    continue;
                                }
                                break;
                            }
                            RwPhase::Travel { target, speed } => {
                                let step = speed * dt as f64;
                                let d = dev.pos.dist(target);
                                if d <= step {
                                    dev.pos = target;
                                    let p = if pause_range.0 >= pause_range.1 {
                                        pause_range.0
                                    } else {
                                        rng.gen_range(pause_range.0..=pause_range.1)
                                    };
                                    dev.rw = if p == 0 {
                                        RwPhase::Pick
                                    } else {
                                        RwPhase::Pause { until: now.plus(p) }
                                    };
                                } else {
                                    let frac = step / d;
                                    dev.pos = bounds.clamp(Position {
                                        x: dev.pos.x + (target.x - dev.pos.x) * frac,
                                        y: dev.pos.y + (target.y - dev.pos.y) * frac,
                                    });
                                }
                                break;
                            }
                        }
                    }
                }
            }
            if dev.history.len() == HISTORY_LEN {
                dev.history.pop_front();
            }
            dev.history.push_back((now, dev.pos));
        }
    }

    /// All other online devices within radio range (closed disk: distance ==
    /// range counts). An offline device has no neighbors. Panics on an unknown
    /// device id.
    pub fn neighbors(&self, d: DeviceId) -> Vec<DeviceId> {
        let me = self.dev(d);
        if !me.online {
            return Vec::new();
        }
        let r_sq = self.radio_range * self.radio_range;
        self.devs
            .iter()
            .enumerate()
            .filter(|(i, o)| *i != d.index() && o.online && me.pos.dist_sq(o.pos) <= r_sq)
            .map(|(i, _)| DeviceId(i as u32))
            .collect()
    }

    pub fn are_neighbors(&self, a: DeviceId, b: DeviceId) -> bool {
        if a == b {
            return false;
        }
        let da = self.dev(a);
        let db = self.dev(b);
        da.online
            && db.online
            && da.pos.dist_sq(db.pos) <= self.radio_range * self.radio_range
    }

    /// Predicted position of `d` at a future time `at`. Scripted devices are
    /// evaluated on their declared trajectory (exact); everything else is a
    /// linear extrapolation over the recent position history, falling back to
    /// the current position when fewer than two observations exist.
    pub fn predict_position(&self, d: DeviceId, at: SimTime) -> (Position, Confidence) {
        let dev = self.dev(d);
        if let Some(knots) = &dev.knots {
            return (
                self.bounds.clamp(knots.position_at(at)),
                Confidence::Declared,
            );
        }
        let hist: Vec<(SimTime, Position)> = dev.history.iter().copied().collect();
        (
            self.bounds.clamp(extrapolate(&hist, at, dev.pos)),
            Confidence::Inferred,
        )
    }

    /// The declared trajectory of a scripted device (including the t=0 start
    /// knot), None for other mobility models.
    pub fn declared_itinerary(&self, d: DeviceId) -> Option<Itinerary> {
        self.dev(d).knots.clone()
    }

    /// Full snapshot for oracles and audits.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            radio_range: self.radio_range,
            positions: self.devs.iter().map(|d| d.pos).collect(),
            online: self.devs.iter().map(|d| d.online).collect(),
        }
    }
}

/// Frozen topology: positions and liveness at one instant.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub radio_range: f64,
    pub positions: Vec<Position>,
    pub online: Vec<bool>,
}

/// Secant extrapolation over the observed history window.
pub(crate) fn extrapolate(hist: &[(SimTime, Position)], at: SimTime, current: Position) -> Position {
    if hist.len() < 2 {
        return current;
    }
    let (t0, p0) = hist[0];
    let (t1, p1) = hist[hist.len() - 1];
    if t1 <= t0 {
        return current;
    }
    let span = (t1.ticks() - t0.ticks()) as f64;
    let ahead = at.ticks() as f64 - t1.ticks() as f64;
    let vx = (p1.x - p0.x) / span;
    let vy = (p1.y - p0.y) / span;
    Position {
        x: p1.x + vx * ahead,
        y: p1.y + vy * ahead,
    }
}
