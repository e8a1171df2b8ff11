//! Calibration harness: one independent lane per candidate, each with a
//! replayed leader and a model-driven follower.

use std::sync::Arc;

use rayon::prelude::*;

use super::{step_lane, Event, EventKind, Lane, Obstacle, StepEnv, Vehicle, VehicleRecord};
use crate::error::{config, Result};
use crate::models::{DecelVisibility, ParameterSet};
use crate::trajectory::{LeaderFollowerPair, Trajectory};

#[derive(Debug, Clone)]
pub struct HarnessLane {
    pub pair: usize,
    pub params: ParameterSet,
}

#[derive(Debug, Clone)]
pub struct Harness {
    pub dt: f64,
    pub speed_limit: f64,
    pub visibility: DecelVisibility,
    pub pairs: Vec<Arc<LeaderFollowerPair>>,
    leaders: Vec<Arc<Trajectory>>,
    pub lanes: Vec<HarnessLane>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LaneOutcome {
    /// Simulated spacing on the pair's grid, starting at the recorded one.
    pub spacing: Vec<f64>,
    pub collided: bool,
    /// Parameters were rejected before the run.
    pub fault: bool,
    pub events: Vec<Event>,
    pub records: Vec<VehicleRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HarnessRun {
    pub outcomes: Vec<LaneOutcome>,
}

/// Lays out the lanes. With a single pair every candidate drives behind the
/// same leader; otherwise pairs and candidates are matched one to one.
pub fn build_calibration_harness(
    pairs: &[LeaderFollowerPair],
    candidates: &[ParameterSet],
    speed_limit: f64,
) -> Result<Harness> {
    if candidates.is_empty() || pairs.is_empty() {
        return config("calibration harness needs at least one lane");
    }
    if pairs.len() != 1 && pairs.len() != candidates.len() {
        return config(format!(
            "{} pairs cannot be matched with {} candidates",
            pairs.len(),
            candidates.len()
        ));
    }
    let dt = pairs[0].dt;
    if pairs.iter().any(|p| (p.dt - dt).abs() > 1e-12 || p.len() < 2) {
        return config("harness pairs must share one grid step and hold at least two samples");
    }
    let lanes = candidates
        .iter()
        .enumerate()
        .map(|(k, params)| HarnessLane {
            pair: if pairs.len() == 1 { 0 } else { k },
            params: params.clone(),
        })
        .collect();
    Ok(Harness {
        dt,
        speed_limit,
        visibility: DecelVisibility::default(),
        leaders: pairs.iter().map(|p| Arc::new(p.leader.clone())).collect(),
        pairs: pairs.iter().cloned().map(Arc::new).collect(),
        lanes,
    })
}

impl Harness {
    pub fn with_visibility(mut self, visibility: DecelVisibility) -> Self {
        self.visibility = visibility;
        self
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    /// Runs every lane; lanes never interact, so they are simulated in
    /// parallel and the result is independent of the worker count.
    pub fn run(&self, keep_records: bool) -> HarnessRun {
        let outcomes = self
            .lanes
            .par_iter()
            .enumerate()
            .map(|(k, lane)| {
                let pair = &self.pairs[lane.pair];
                let leader = self.leaders[lane.pair].clone();
                let mut out = simulate_pair(pair, leader, &lane.params, self.speed_limit, self.visibility, keep_records);
                for r in &mut out.records {
                    r.lane_id = k as u32;
                }
                out
            })
            .collect();
        HarnessRun { outcomes }
    }
}

/// Simulates one lane: the leader replays its recording, the follower
/// starts from its recorded position and speed at the pair's start time.
pub fn simulate_pair(
    pair: &LeaderFollowerPair,
    leader: Arc<Trajectory>,
    params: &ParameterSet,
    speed_limit: f64,
    visibility: DecelVisibility,
    keep_records: bool,
) -> LaneOutcome {
    let n = pair.len();
    let dt = pair.dt;
    if params.validate(dt).is_err() {
        return LaneOutcome {
            spacing: vec![f64::NAN; n],
            fault: true,
            ..Default::default()
        };
    }
    let f0 = &pair.follower.samples[0];
    let mut lane = Lane::open(f64::INFINITY);
    lane.vehicles.push_back(Vehicle::replay(pair.leader.vehicle_id, leader, pair.t_start));
    lane.vehicles.push_back(Vehicle::model(
        pair.follower.vehicle_id,
        params.clone(),
        pair.follower.vehicle_length,
        f0.driven_distance,
        f0.v,
    ));
    let env = StepEnv {
        lane_id: 0,
        speed_limit,
        obstacles: &[] as &[Obstacle],
        visibility,
    };
    let mut out = LaneOutcome {
        spacing: Vec::with_capacity(n),
        ..Default::default()
    };
    let record = |lane: &Lane, t: f64, out: &mut LaneOutcome| {
        let gap = lane.gap_ahead(1).expect("follower has a leader");
        out.spacing.push(gap);
        if keep_records {
            for (i, v) in lane.vehicles.iter().enumerate() {
                out.records.push(VehicleRecord {
                    vehicle_id: v.id,
                    t,
                    position: v.x,
                    v: v.v,
                    a: v.a,
                    lane_id: 0,
                    gap_to_leader: if i == 0 { None } else { Some(gap) },
                });
            }
        }
    };
    record(&lane, pair.t_start, &mut out);
    for k in 0..n - 1 {
        let t = pair.t_start + k as f64 * dt;
        step_lane(&mut lane, &env, t, dt, &mut out.events, || 0.0);
        record(&lane, pair.t_start + (k + 1) as f64 * dt, &mut out);
    }
    out.collided = out.events.iter().any(|e| e.kind == EventKind::Collision);
    out
}
