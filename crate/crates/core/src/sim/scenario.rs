//! Scenario configuration and the full-run loop: insertion, signals,
//! closures, exits, recording and detector aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{step_lane, DetectorRecord, Event, EventKind, Lane, LogSink, Obstacle, SimulationLog, StepEnv, Vehicle, VehicleRecord};
use crate::error::{config, Error, Result};
use crate::models::{leader_deceleration_visibility, ParameterSet};

/// Vehicle ids at or above this value belong to virtual obstacles.
pub const OBSTACLE_ID_BASE: u64 = u64::MAX - 1024;
/// Floor applied to the detector mean speed when deriving density (m/s).
pub const DETECTOR_SPEED_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    CalibrationHarness,
    Queue,
    Ring,
    Stopgo,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::CalibrationHarness => "calibration_harness",
            ScenarioKind::Queue => "queue",
            ScenarioKind::Ring => "ring",
            ScenarioKind::Stopgo => "stopgo",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "queue" => Ok(ScenarioKind::Queue),
            "ring" => Ok(ScenarioKind::Ring),
            "stopgo" => Ok(ScenarioKind::Stopgo),
            "calibration_harness" => Ok(ScenarioKind::CalibrationHarness),
            other => config(format!("unknown scenario '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub cycle: f64,
    pub green: f64,
    pub offset: f64,
    /// Stop-line position along the lane (m).
    pub stop_line: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalPhase {
    Green,
    Red,
}

/// Each cycle starts with its green phase at `offset`.
pub fn signal_controller(plan: &SignalPlan, t: f64) -> SignalPhase {
    let in_cycle = (t - plan.offset).rem_euclid(plan.cycle);
    if in_cycle < plan.green {
        SignalPhase::Green
    } else {
        SignalPhase::Red
    }
}

impl SignalPlan {
    /// Start times of the green phases inside `[0, duration)`.
    pub fn green_starts(&self, duration: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = ((0.0 - self.offset) / self.cycle).ceil() as i64;
        loop {
            let t = self.offset + k as f64 * self.cycle;
            if t >= duration {
                break out;
            }
            out.push(t);
            k += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Closure {
    pub start: f64,
    pub duration: f64,
    pub position: f64,
}

impl Closure {
    pub fn active(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorZone {
    pub start: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetEntry {
    pub params: ParameterSet,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetMode {
    RoundRobin,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub dt: f64,
    pub duration: f64,
    pub lane_length: f64,
    pub ring: bool,
    pub speed_limit: f64,
    /// `None` disables insertion.
    pub insertion_interval: Option<f64>,
    pub insertion_position: f64,
    pub closure_schedule: Vec<Closure>,
    pub signal_plan: Option<SignalPlan>,
    pub detector_zones: Vec<DetectorZone>,
    pub detector_window: f64,
    pub fleet: Vec<FleetEntry>,
    pub fleet_mode: FleetMode,
    pub vehicle_length: f64,
    pub record_interval: f64,
    /// Vehicles needing more than this fraction of their comfortable
    /// deceleration to stop for a newly appearing obstacle drive through it.
    pub commit_fraction: f64,
    pub leader_decel_visible: bool,
}

/// Legal limit used by all scenarios (50 km/h).
pub const SCENARIO_SPEED_LIMIT: f64 = 50.0 / 3.6;

impl ScenarioConfig {
    fn base(kind: ScenarioKind, fleet: Vec<FleetEntry>) -> Self {
        ScenarioConfig {
            kind,
            dt: crate::models::DEFAULT_DT,
            duration: 0.0,
            lane_length: 0.0,
            ring: false,
            speed_limit: SCENARIO_SPEED_LIMIT,
            insertion_interval: None,
            insertion_position: 0.0,
            closure_schedule: Vec::new(),
            signal_plan: None,
            detector_zones: Vec::new(),
            detector_window: 60.0,
            fleet,
            fleet_mode: FleetMode::Weighted,
            vehicle_length: 5.0,
            record_interval: 0.2,
            commit_fraction: 0.5,
            leader_decel_visible: false,
        }
    }

    /// Signalized approach: 300 m to the stop line, 200 m beyond it,
    /// 60.5 s cycle with half of it green, 2600 s.
    pub fn queue(fleet: Vec<FleetEntry>) -> Self {
        ScenarioConfig {
            duration: 2600.0,
            lane_length: 500.0,
            insertion_interval: Some(2.0),
            signal_plan: Some(SignalPlan {
                cycle: 60.5,
                green: 30.25,
                offset: 0.0,
                stop_line: 300.0,
            }),
            ..Self::base(ScenarioKind::Queue, fleet)
        }
    }

    /// 3.4 km loop, insertion every 5 s, a short section closed every 250 s
    /// for 25 s, three 50 m measurement zones, 4200 s.
    pub fn ring(fleet: Vec<FleetEntry>) -> Self {
        let duration = 4200.0;
        let closure_schedule = (1..)
            .map(|k| k as f64 * 250.0)
            .take_while(|&t| t < duration)
            .map(|start| Closure {
                start,
                duration: 25.0,
                position: 3300.0,
            })
            .collect();
        ScenarioConfig {
            duration,
            lane_length: 3400.0,
            ring: true,
            insertion_interval: Some(5.0),
            closure_schedule,
            detector_zones: [600.0, 1700.0, 2800.0]
                .iter()
                .map(|&start| DetectorZone { start, length: 50.0 })
                .collect(),
            record_interval: 1.0,
            ..Self::base(ScenarioKind::Ring, fleet)
        }
    }

    /// 5 km straight road closed after 3.5 km for one minute, 1500 s.
    pub fn stopgo(fleet: Vec<FleetEntry>) -> Self {
        ScenarioConfig {
            duration: 1500.0,
            lane_length: 5000.0,
            insertion_interval: Some(2.0),
            closure_schedule: vec![Closure {
                start: 600.0,
                duration: 60.0,
                position: 3500.0,
            }],
            ..Self::base(ScenarioKind::Stopgo, fleet)
        }
    }

    pub fn for_kind(kind: ScenarioKind, fleet: Vec<FleetEntry>) -> Result<Self> {
        match kind {
            ScenarioKind::Queue => Ok(Self::queue(fleet)),
            ScenarioKind::Ring => Ok(Self::ring(fleet)),
            ScenarioKind::Stopgo => Ok(Self::stopgo(fleet)),
            ScenarioKind::CalibrationHarness => {
                config("the calibration harness is built from pairs, not from scenario defaults")
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                config(format!("{what} must be positive, got {v}"))
            }
        };
        pos(self.dt, "dt")?;
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return config("duration must be non-negative");
        }
        pos(self.lane_length, "lane length")?;
        pos(self.speed_limit, "speed limit")?;
        pos(self.vehicle_length, "vehicle length")?;
        pos(self.record_interval, "record interval")?;
        pos(self.detector_window, "detector window")?;
        if let Some(i) = self.insertion_interval {
            pos(i, "insertion interval")?;
            if self.fleet.is_empty() {
                return config("insertion needs a non-empty fleet");
            }
        }
        if self.fleet.iter().any(|f| !(f.weight.is_finite() && f.weight >= 0.0)) {
            return config("fleet weights must be finite and non-negative");
        }
        if !self.fleet.is_empty() && self.fleet.iter().all(|f| f.weight == 0.0) {
            return config("fleet weights sum to zero");
        }
        for f in &self.fleet {
            f.params.validate(self.dt)?;
        }
        let within = |x: f64| (0.0..=self.lane_length).contains(&x);
        for c in &self.closure_schedule {
            if !within(c.position) || !(c.duration > 0.0) {
                return config(format!("closure at {} m is outside the lane or empty", c.position));
            }
        }
        for z in &self.detector_zones {
            if !(within(z.start) && z.length > 0.0 && within(z.start + z.length)) {
                return config(format!("detector zone at {} m does not fit the lane", z.start));
            }
        }
        if let Some(p) = &self.signal_plan {
            pos(p.cycle, "signal cycle")?;
            if !(0.0..=p.cycle).contains(&p.green) || !within(p.stop_line) {
                return config("signal plan needs 0 <= green <= cycle and a stop line on the lane");
            }
        }
        if !within(self.insertion_position) {
            return config("insertion position outside the lane");
        }
        Ok(())
    }

    pub fn meta(&self, seed: u64) -> LogMeta {
        LogMeta {
            kind: self.kind,
            seed,
            dt: self.dt,
            duration: self.duration,
            lane_length: self.lane_length,
            ring: self.ring,
            speed_limit: self.speed_limit,
            signal_plan: self.signal_plan,
            closures: self.closure_schedule.clone(),
            detector_zones: self.detector_zones.clone(),
            detector_window: self.detector_window,
            record_interval: self.record_interval,
        }
    }
}

/// Scenario facts needed to analyze a log without its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub dt: f64,
    pub duration: f64,
    pub lane_length: f64,
    pub ring: bool,
    pub speed_limit: f64,
    pub signal_plan: Option<SignalPlan>,
    pub closures: Vec<Closure>,
    pub detector_zones: Vec<DetectorZone>,
    pub detector_window: f64,
    pub record_interval: f64,
}

pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<SimulationLog> {
    let mut log = SimulationLog {
        meta: Some(cfg.meta(seed)),
        ..Default::default()
    };
    run_scenario_into(cfg, seed, &mut log)?;
    Ok(log)
}

fn steps(span: f64, dt: f64) -> usize {
    ((span / dt) + 1e-9).floor() as usize
}

#[derive(Default)]
struct WindowAcc {
    count: usize,
    inv_speed: f64,
}

struct Detectors<'a> {
    zones: &'a [DetectorZone],
    window: f64,
    ring: Option<f64>,
    entries: HashMap<(usize, u64), f64>,
    pending: BTreeMap<usize, Vec<WindowAcc>>,
    next_window: usize,
}

impl Detectors<'_> {
    fn crossing(&self, from: f64, to: f64, thr: f64) -> Option<f64> {
        if to <= from {
            return None;
        }
        let hit = |x: f64| (from < x && x <= to).then(|| (x - from) / (to - from));
        hit(thr).or_else(|| self.ring.and_then(|l| hit(thr + l)))
    }

    fn observe(&mut self, id: u64, from: f64, to: f64, t: f64, dt: f64) {
        for (z, zone) in self.zones.iter().enumerate() {
            if let Some(f) = self.crossing(from, to, zone.start) {
                self.entries.insert((z, id), t + f * dt);
            }
            if let Some(f) = self.crossing(from, to, zone.start + zone.length) {
                let t_exit = t + f * dt;
                if let Some(t_in) = self.entries.remove(&(z, id)) {
                    if t_exit > t_in {
                        let w = (t_exit / self.window).floor() as usize;
                        let accs = self
                            .pending
                            .entry(w)
                            .or_insert_with(|| (0..self.zones.len()).map(|_| WindowAcc::default()).collect());
                        accs[z].count += 1;
                        accs[z].inv_speed += (t_exit - t_in) / zone.length;
                    }
                }
            }
        }
    }

    fn forget(&mut self, id: u64) {
        for z in 0..self.zones.len() {
            self.entries.remove(&(z, id));
        }
    }

    fn flush_until(&mut self, now: f64, sink: &mut dyn LogSink) {
        while ((self.next_window + 1) as f64) * self.window <= now + 1e-9 {
            let w = self.next_window;
            let accs = self.pending.remove(&w).unwrap_or_default();
            for z in 0..self.zones.len() {
                let (count, inv) = accs.get(z).map_or((0, 0.0), |a| (a.count, a.inv_speed));
                let mean_speed = if count > 0 { count as f64 / inv } else { 0.0 };
                let density = if count > 0 {
                    count as f64 / (mean_speed.max(DETECTOR_SPEED_FLOOR) * self.window) * 1000.0
                } else {
                    0.0
                };
                sink.detector(&DetectorRecord {
                    zone_id: z,
                    window_start: w as f64 * self.window,
                    window_length: self.window,
                    count,
                    mean_speed,
                    density,
                });
            }
            self.next_window += 1;
        }
    }
}

/// Gap an entering vehicle needs in front of it: standstill gap, time
/// headway and a braking term for a slower vehicle ahead.
fn required_entry_gap(p: &ParameterSet, v: f64, v_ahead: f64) -> f64 {
    let brake = (v * (v - v_ahead)).max(0.0) / (2.0 * (p.accel() * p.decel()).sqrt());
    p.min_gap() + v * p.headway() + brake
}

/// Runs a scenario, streaming records, events and detector windows into
/// `sink`. The same `(cfg, seed)` always produces the same output.
pub fn run_scenario_into(cfg: &ScenarioConfig, seed: u64, sink: &mut dyn LogSink) -> Result<()> {
    cfg.validate()?;
    if cfg.kind == ScenarioKind::CalibrationHarness {
        return config("calibration harness runs go through the harness builder");
    }
    let dt = cfg.dt;
    let mut lane = if cfg.ring { Lane::ring(cfg.lane_length) } else { Lane::open(cfg.lane_length) };
    let mut fleet_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dawdle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let total_weight: f64 = cfg.fleet.iter().map(|f| f.weight).sum();
    let mut round_robin = 0usize;

    let n_steps = steps(cfg.duration, dt);
    let record_every = steps(cfg.record_interval, dt).max(1);
    let insert_every = cfg.insertion_interval.map(|i| steps(i, dt).max(1));
    let visibility = leader_deceleration_visibility(cfg.leader_decel_visible);

    // Obstacle sources: the signal first, then closures in schedule order.
    let n_sources = cfg.signal_plan.iter().count() + cfg.closure_schedule.len();
    let mut active: Vec<Option<Obstacle>> = vec![None; n_sources];
    let mut detectors = Detectors {
        zones: &cfg.detector_zones,
        window: cfg.detector_window,
        ring: cfg.ring.then_some(cfg.lane_length),
        entries: HashMap::new(),
        pending: BTreeMap::new(),
        next_window: 0,
    };
    let mut next_id = 1u64;
    let mut events: Vec<Event> = Vec::new();

    for k in 0..n_steps {
        let t = k as f64 * dt;

        let mut src = 0;
        let mut update = |on: bool, position: f64, lane: &Lane, src: usize| {
            if !on {
                active[src] = None;
            } else if active[src].is_none() {
                active[src] = Some(Obstacle {
                    id: OBSTACLE_ID_BASE + src as u64,
                    position,
                    committed: lane.committed_to_pass(position, cfg.commit_fraction),
                });
            }
        };
        if let Some(plan) = &cfg.signal_plan {
            update(signal_controller(plan, t) == SignalPhase::Red, plan.stop_line, &lane, src);
            src += 1;
        }
        for c in &cfg.closure_schedule {
            update(c.active(t), c.position, &lane, src);
            src += 1;
        }
        let obstacles: Vec<Obstacle> = active.iter().flatten().cloned().collect();

        if insert_every.is_some_and(|e| k % e == 0) {
            let entry = match cfg.fleet_mode {
                FleetMode::RoundRobin => {
                    let e = &cfg.fleet[round_robin % cfg.fleet.len()];
                    round_robin += 1;
                    e
                }
                FleetMode::Weighted => {
                    let mut u = fleet_rng.random::<f64>() * total_weight;
                    let mut pick = cfg.fleet.len() - 1;
                    for (i, f) in cfg.fleet.iter().enumerate() {
                        if u < f.weight {
                            pick = i;
                            break;
                        }
                        u -= f.weight;
                    }
                    &cfg.fleet[pick]
                }
            };
            match try_insert(&lane, &entry.params, &obstacles, cfg) {
                Ok(v) => {
                    lane.vehicles.push_back(Vehicle::model(
                        next_id,
                        entry.params.clone(),
                        cfg.vehicle_length,
                        cfg.insertion_position,
                        v,
                    ));
                    next_id += 1;
                }
                Err(blocker) => events.push(Event {
                    t,
                    kind: EventKind::InsertionBlocked,
                    vehicle_id: blocker,
                }),
            }
        }

        if k % record_every == 0 {
            for (i, veh) in lane.vehicles.iter().enumerate() {
                sink.record(&VehicleRecord {
                    vehicle_id: veh.id,
                    t,
                    position: veh.x,
                    v: veh.v,
                    a: veh.a,
                    lane_id: 0,
                    gap_to_leader: lane.gap_ahead(i),
                });
            }
        }

        let env = StepEnv {
            lane_id: 0,
            speed_limit: cfg.speed_limit,
            obstacles: &obstacles,
            visibility,
        };
        let moves = step_lane(&mut lane, &env, t, dt, &mut events, || dawdle_rng.random::<f64>());
        for e in events.drain(..) {
            sink.event(&e);
        }
        for m in moves {
            detectors.observe(m.vehicle_id, m.from, m.to, t, dt);
        }
        if !cfg.ring {
            while lane.vehicles.front().is_some_and(|v| v.x > cfg.lane_length) {
                let gone = lane.vehicles.pop_front().expect("checked non-empty");
                detectors.forget(gone.id);
            }
        }
        detectors.flush_until((k + 1) as f64 * dt, sink);
    }
    Ok(())
}

/// Entry speed when there is room, otherwise the id of the vehicle (or
/// obstacle) in the way.
fn try_insert(lane: &Lane, p: &ParameterSet, obstacles: &[Obstacle], cfg: &ScenarioConfig) -> std::result::Result<f64, u64> {
    let v = p.desired_speed(cfg.speed_limit);
    let x = cfg.insertion_position;
    if let Some(ahead) = lane.vehicles.back() {
        let gap = ahead.x - ahead.length - x;
        if gap < required_entry_gap(p, v, ahead.v) {
            return Err(ahead.id);
        }
    }
    for o in obstacles {
        let d = o.position - x;
        if d > 0.0 && d < required_entry_gap(p, v, 0.0) {
            return Err(o.id);
        }
    }
    if lane.ring {
        if let Some(behind) = lane.vehicles.front() {
            let gap = x - cfg.vehicle_length + lane.length - behind.x;
            let need = behind.params().map_or(0.0, |bp| bp.min_gap() + behind.v * bp.headway());
            if gap < need {
                return Err(behind.id);
            }
        }
    }
    Ok(v)
}
