//! Fixed-step single-lane traffic simulation.
//!
//! A [`Lane`] holds its vehicles ordered from the most downstream one
//! backwards. Model-driven vehicles use the laws in [`crate::models`];
//! replayed vehicles follow a recorded trajectory and ignore everything
//! around them. Signals and closures appear as stationary virtual leaders.

mod harness;
mod io;
mod scenario;

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use io::{read_log_dir, CsvLogSink, DETECTORS_FILE, EVENTS_FILE, META_FILE, RECORDS_FILE};
pub use harness::{build_calibration_harness, simulate_pair, Harness, HarnessLane, HarnessRun, LaneOutcome};
pub use scenario::{
    run_scenario, run_scenario_into, signal_controller, Closure, DetectorZone, FleetEntry, FleetMode, LogMeta,
    ScenarioConfig, ScenarioKind, SignalPhase, SignalPlan, DETECTOR_SPEED_FLOOR, OBSTACLE_ID_BASE, SCENARIO_SPEED_LIMIT,
};

use crate::error::Error;
use crate::models::{decide, DecelVisibility, DriverState, FollowerContext, ParameterSet, EMERGENCY_DECEL};
use crate::trajectory::Trajectory;

/// Distance a follower is put behind its leader's rear after a collision (m).
pub const COLLISION_SETBACK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub vehicle_id: u64,
    pub t: f64,
    pub position: f64,
    pub v: f64,
    pub a: f64,
    pub lane_id: u32,
    pub gap_to_leader: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Collision,
    EmergencyStop,
    InsertionBlocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    /// For blocked insertions, the vehicle occupying the entry.
    pub vehicle_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub zone_id: usize,
    pub window_start: f64,
    pub window_length: f64,
    pub count: usize,
    /// Harmonic mean of traversal speeds (m/s).
    pub mean_speed: f64,
    /// veh/km.
    pub density: f64,
}

/// Receives simulation output as it is produced.
pub trait LogSink {
    fn record(&mut self, r: &VehicleRecord);
    fn event(&mut self, e: &Event);
    fn detector(&mut self, d: &DetectorRecord);
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationLog {
    pub meta: Option<LogMeta>,
    pub records: Vec<VehicleRecord>,
    pub events: Vec<Event>,
    pub detector_records: Vec<DetectorRecord>,
}

impl SimulationLog {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

impl LogSink for SimulationLog {
    fn record(&mut self, r: &VehicleRecord) {
        self.records.push(*r);
    }
    fn event(&mut self, e: &Event) {
        self.events.push(*e);
    }
    fn detector(&mut self, d: &DetectorRecord) {
        self.detector_records.push(*d);
    }
}

#[derive(Debug, Clone)]
pub enum Driver {
    Model { params: ParameterSet, state: DriverState },
    /// Position is the trajectory's driven distance.
    Replay(Arc<Trajectory>),
}

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: u64,
    pub length: f64,
    /// Front bumper position along the lane (m).
    pub x: f64,
    pub v: f64,
    pub a: f64,
    pub driver: Driver,
    emergency: bool,
}

impl Vehicle {
    pub fn model(id: u64, params: ParameterSet, length: f64, x: f64, v: f64) -> Self {
        Vehicle {
            id,
            length,
            x,
            v,
            a: 0.0,
            driver: Driver::Model {
                params,
                state: DriverState::default(),
            },
            emergency: false,
        }
    }

    pub fn replay(id: u64, traj: Arc<Trajectory>, t: f64) -> Self {
        let (x, v) = replay_leader(&traj, t);
        Vehicle {
            id,
            length: traj.vehicle_length,
            x,
            v,
            a: 0.0,
            driver: Driver::Replay(traj),
            emergency: false,
        }
    }

    pub fn params(&self) -> Option<&ParameterSet> {
        match &self.driver {
            Driver::Model { params, .. } => Some(params),
            Driver::Replay(_) => None,
        }
    }
}

/// Recorded position (driven distance) and speed at `t`, held constant
/// before the first and after the last sample.
pub fn replay_leader(traj: &Trajectory, t: f64) -> (f64, f64) {
    let s = traj.at(t);
    (s.driven_distance, s.v)
}

/// Stationary virtual leader: a red signal or a closed road section.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub id: u64,
    pub position: f64,
    /// Vehicles that were too close to stop when the obstacle appeared.
    pub committed: Vec<u64>,
}

/// Context shared by every vehicle of a lane during one step.
#[derive(Debug, Clone)]
pub struct StepEnv<'a> {
    pub lane_id: u32,
    pub speed_limit: f64,
    pub obstacles: &'a [Obstacle],
    pub visibility: DecelVisibility,
}

/// Front-bumper positions before and after a step, unwrapped on rings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Movement {
    pub vehicle_id: u64,
    pub from: f64,
    pub to: f64,
    pub v: f64,
}

#[derive(Debug, Clone)]
pub struct Lane {
    pub vehicles: VecDeque<Vehicle>,
    pub length: f64,
    pub ring: bool,
}

struct LeaderView {
    gap: f64,
    v: f64,
    id: u64,
    b: Option<f64>,
}

impl Lane {
    pub fn open(length: f64) -> Self {
        Lane {
            vehicles: VecDeque::new(),
            length,
            ring: false,
        }
    }

    pub fn ring(length: f64) -> Self {
        Lane {
            vehicles: VecDeque::new(),
            length,
            ring: true,
        }
    }

    fn leader_index(&self, i: usize) -> Option<usize> {
        if i > 0 {
            Some(i - 1)
        } else if self.ring && !self.vehicles.is_empty() {
            Some(self.vehicles.len() - 1)
        } else {
            None
        }
    }

    /// Bumper-to-bumper gap from vehicle `i` to the vehicle ahead.
    pub fn gap_ahead(&self, i: usize) -> Option<f64> {
        let j = self.leader_index(i)?;
        let (f, l) = (&self.vehicles[i], &self.vehicles[j]);
        let mut lead_x = l.x;
        if j >= i {
            lead_x += self.length;
        }
        Some(lead_x - l.length - f.x)
    }

    fn obstacle_distance(&self, x: f64, position: f64) -> f64 {
        let d = position - x;
        if self.ring {
            d.rem_euclid(self.length)
        } else {
            d
        }
    }

    /// The vehicle ahead and the nearest obstacle this vehicle has to stop
    /// for; both constrain it, even when the obstacle lies beyond the leader.
    fn leader_views(&self, i: usize, env: &StepEnv) -> Vec<LeaderView> {
        let me = &self.vehicles[i];
        let mut views: Vec<LeaderView> = self
            .leader_index(i)
            .map(|j| {
                let l = &self.vehicles[j];
                LeaderView {
                    gap: self.gap_ahead(i).unwrap_or(f64::INFINITY),
                    v: l.v,
                    id: l.id,
                    b: l.params().map(ParameterSet::decel),
                }
            })
            .into_iter()
            .collect();
        let obstacle = env
            .obstacles
            .iter()
            .filter(|o| !o.committed.contains(&me.id))
            .map(|o| (self.obstacle_distance(me.x, o.position), o.id))
            .filter(|(d, _)| *d > 0.0)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((gap, id)) = obstacle {
            views.push(LeaderView { gap, v: 0.0, id, b: None });
        }
        views
    }

    /// Vehicles that cannot stop for an obstacle appearing now while braking
    /// at `fraction` of their desired deceleration.
    pub fn committed_to_pass(&self, position: f64, fraction: f64) -> Vec<u64> {
        self.vehicles
            .iter()
            .filter(|veh| {
                let d = self.obstacle_distance(veh.x, position);
                let b = veh.params().map_or(f64::INFINITY, ParameterSet::decel);
                d > 0.0 && veh.v * veh.v / (2.0 * d) > fraction * b
            })
            .map(|veh| veh.id)
            .collect()
    }
}

/// Advances one lane by `dt` from time `t`.
///
/// Accelerations are decided for all vehicles first, then speeds and
/// positions are updated semi-implicitly (`v' = max(0, v + a dt)`,
/// `x' = x + v' dt`). A follower whose gap ends up at or below zero is logged
/// once, moved to just behind its leader and given the leader's speed.
pub fn step_lane(
    lane: &mut Lane,
    env: &StepEnv,
    t: f64,
    dt: f64,
    events: &mut Vec<Event>,
    mut eta: impl FnMut() -> f64,
) -> Vec<Movement> {
    let n = lane.vehicles.len();
    let mut commands = Vec::with_capacity(n);
    for i in 0..n {
        let veh = &lane.vehicles[i];
        let Driver::Model { params, state } = &veh.driver else {
            commands.push(None);
            continue;
        };
        let draw = match params {
            ParameterSet::Krauss(p) if p.epsilon > 0.0 => eta(),
            _ => 0.0,
        };
        let views = lane.leader_views(i, env);
        let contexts: Vec<(FollowerContext, Option<f64>)> = if views.is_empty() {
            vec![(FollowerContext::free(veh.v, env.speed_limit, t), None)]
        } else {
            views
                .iter()
                .map(|l| {
                    let ctx = FollowerContext {
                        v: veh.v,
                        gap: l.gap,
                        v_leader: l.v,
                        v_limit: env.speed_limit,
                        t,
                        leader_id: Some(l.id),
                    };
                    (ctx, l.b)
                })
                .collect()
        };
        // The most restrictive constraint wins.
        let mut cmd: Option<(f64, Option<DriverState>, bool)> = None;
        for (ctx, leader_b) in &contexts {
            let c = match decide(ctx, state, params, dt, env.visibility, *leader_b, draw) {
                Ok((a, next)) => (a, Some(next), true),
                // Already overlapping: the collision has been logged, brake hard.
                Err(Error::CollisionState { .. }) => (-EMERGENCY_DECEL, None, false),
                Err(_) => (0.0, None, false),
            };
            if cmd.as_ref().is_none_or(|best| c.0 < best.0 || (c.0 == best.0 && !c.2)) {
                cmd = Some(c);
            }
        }
        let cmd = cmd.expect("at least one context");
        commands.push(Some(cmd));
    }

    let mut moves = Vec::with_capacity(n);
    for (veh, cmd) in lane.vehicles.iter_mut().zip(commands) {
        let from = veh.x;
        match (&mut veh.driver, cmd) {
            (Driver::Model { state, .. }, Some((a, next, may_flag))) => {
                let at_floor = a <= -EMERGENCY_DECEL;
                if at_floor && may_flag && !veh.emergency {
                    events.push(Event {
                        t: t + dt,
                        kind: EventKind::EmergencyStop,
                        vehicle_id: veh.id,
                    });
                }
                veh.emergency = at_floor;
                if let Some(next) = next {
                    *state = next;
                }
                veh.a = a;
                veh.v = (veh.v + a * dt).max(0.0);
                veh.x += veh.v * dt;
            }
            (Driver::Replay(traj), _) => {
                let (x, v) = replay_leader(traj, t + dt);
                veh.a = (v - veh.v) / dt;
                veh.x = x;
                veh.v = v;
            }
            (Driver::Model { .. }, None) => unreachable!("model vehicles always get a command"),
        }
        moves.push((veh.id, from));
    }

    for i in 0..n {
        if !matches!(lane.vehicles[i].driver, Driver::Model { .. }) {
            continue;
        }
        let Some(j) = lane.leader_index(i) else { continue };
        if j == i {
            continue;
        }
        let Some(gap) = lane.gap_ahead(i) else { continue };
        if gap <= 0.0 {
            let (lead_v, lead_rear) = {
                let l = &lane.vehicles[j];
                let wrap = if j >= i { lane.length } else { 0.0 };
                (l.v, l.x + wrap - l.length)
            };
            let f = &mut lane.vehicles[i];
            events.push(Event {
                t: t + dt,
                kind: EventKind::Collision,
                vehicle_id: f.id,
            });
            f.x = lead_rear - COLLISION_SETBACK;
            f.v = lead_v;
        }
    }

    let out = lane
        .vehicles
        .iter()
        .zip(moves)
        .map(|(veh, (id, from))| Movement {
            vehicle_id: id,
            from,
            to: veh.x,
            v: veh.v,
        })
        .collect();

    if lane.ring {
        while lane.vehicles.front().is_some_and(|v| v.x >= lane.length) {
            let mut veh = lane.vehicles.pop_front().expect("checked non-empty");
            veh.x -= lane.length;
            lane.vehicles.push_back(veh);
        }
    }
    out
}

#[cfg(test)]
mod tests;
