//! Synthetic drive-off pairs with known follower parameters.
//!
//! The leader is a free-road IDM vehicle pulling away from a stop line after
//! a short wait; the follower is simulated behind the replayed leader with
//! parameters drawn from a plausible sub-box of the calibration bounds.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{ModelSpec, ParamSpace, DEFAULT_SPEED_LIMIT};
use crate::error::{config, Result};
use crate::models::{idm_acceleration, DecelVisibility, FollowerContext, IdmParams, ParameterSet, DEFAULT_DT};
use crate::sim::simulate_pair;
use crate::trajectory::{LeaderFollowerPair, Sample, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    /// Length of each recording (s).
    pub window: f64,
    pub dt: f64,
    pub v_limit: f64,
    pub seed: u64,
    /// Follower model; only the calibrated subset of it is randomized.
    pub truth: ModelSpec,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_pairs: 20,
            window: 25.0,
            dt: DEFAULT_DT,
            v_limit: DEFAULT_SPEED_LIMIT,
            seed: 1,
            truth: ModelSpec::Eidm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub pair: LeaderFollowerPair,
    pub truth: ParameterSet,
}

/// Range a ground-truth value is drawn from, narrower than the search bounds.
fn truth_range(name: &str) -> Option<(f64, f64)> {
    Some(match name {
        "a_max" => (1.5, 3.5),
        n if n.starts_with("a_sched_") => (1.2, 3.5),
        "T" | "tau" => (0.8, 1.8),
        "F_v" => (0.9, 1.15),
        "delta" => (2.0, 6.0),
        "t_reac" => (0.2, 0.8),
        "t_start" => (0.2, 1.5),
        "M_bg" => (0.3, 0.9),
        "t_amax" => (0.5, 3.0),
        "b" => (2.0, 4.5),
        "t_AP" => (0.04, 0.5),
        _ => return None,
    })
}

/// Free-road IDM drive-off: standstill for `wait` seconds, then
/// acceleration towards the speed limit.
pub fn drive_off_leader(id: u64, length: f64, wait: f64, a_max: f64, start: f64, cfg: &SyntheticConfig) -> Trajectory {
    let p = IdmParams {
        a_max,
        ..IdmParams::default_for(cfg.dt)
    };
    let n = (cfg.window / cfg.dt + 1e-9).floor() as usize + 1;
    let (mut x, mut v) = (start, 0.0);
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * cfg.dt;
        samples.push(Sample {
            t,
            x,
            y: 0.0,
            driven_distance: x,
            v,
            lane_id: 1,
            leader_id: None,
        });
        if t + 1e-9 >= wait {
            let a = idm_acceleration(&FollowerContext::free(v, cfg.v_limit, t), &p).unwrap_or(0.0);
            v = (v + a * cfg.dt).max(0.0);
            x += v * cfg.dt;
        }
    }
    Trajectory {
        vehicle_id: id,
        vehicle_length: length,
        samples,
    }
}

/// Draws ground-truth parameters for the calibrated subset of `spec`.
pub fn sample_truth(spec: &ModelSpec, dt: f64, rng: &mut ChaCha8Rng) -> Result<ParameterSet> {
    let space = ParamSpace::for_model(spec, dt)?;
    let x: Vec<f64> = space
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let (lo, hi) = truth_range(n).unwrap_or((space.lower[i], space.upper[i]));
            lo + rng.random::<f64>() * (hi - lo)
        })
        .collect();
    Ok(space.decode(&space.clamp(&x)))
}

/// One pair: leader replayed, follower simulated with `truth`.
pub fn synthetic_pair(index: usize, truth: ParameterSet, rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Result<SyntheticPair> {
    let leader_len = 4.2 + rng.random::<f64>() * 1.0;
    let follower_len = 4.2 + rng.random::<f64>() * 1.0;
    let gap0 = 2.0 + rng.random::<f64>() * 0.2;
    let wait = 0.5 + rng.random::<f64>() * 1.5;
    let a_lead = 1.5 + rng.random::<f64>() * 1.5;
    let leader_id = 2 * index as u64 + 1;
    let follower_id = leader_id + 1;

    let leader = drive_off_leader(leader_id, leader_len, wait, a_lead, follower_len + gap0 + leader_len, cfg);
    let parked = Trajectory {
        vehicle_id: follower_id,
        vehicle_length: follower_len,
        samples: leader
            .samples
            .iter()
            .map(|s| Sample {
                t: s.t,
                x: follower_len,
                y: 0.0,
                driven_distance: follower_len,
                v: 0.0,
                lane_id: 1,
                leader_id: Some(leader_id),
            })
            .collect(),
    };
    let id = format!("synthetic-{index:03}");
    let draft = LeaderFollowerPair::from_aligned(id.clone(), leader.clone(), parked, cfg.dt)?;
    let run = simulate_pair(
        &draft,
        Arc::new(leader.clone()),
        &truth,
        cfg.v_limit,
        DecelVisibility::default(),
        true,
    );
    if run.collided || run.fault {
        return config(format!("ground truth for pair {index} is not collision-free"));
    }
    let samples = run
        .records
        .iter()
        .filter(|r| r.vehicle_id == follower_id)
        .map(|r| Sample {
            t: r.t,
            x: r.position,
            y: 0.0,
            driven_distance: r.position,
            v: r.v,
            lane_id: 1,
            leader_id: Some(leader_id),
        })
        .collect();
    let follower = Trajectory {
        vehicle_id: follower_id,
        vehicle_length: follower_len,
        samples,
    };
    let mut pair = LeaderFollowerPair::from_aligned(id, leader, follower, cfg.dt)?;
    pair.lane_id = 1;
    pair.is_free_leader = true;
    Ok(SyntheticPair { pair, truth })
}

/// `cfg.n_pairs` pairs with independently drawn truths; deterministic per seed.
pub fn synthetic_corpus(cfg: &SyntheticConfig) -> Result<Vec<SyntheticPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_pairs)
        .map(|i| {
            let truth = sample_truth(&cfg.truth, cfg.dt, &mut rng)?;
            synthetic_pair(i, truth, &mut rng, cfg)
        })
        .collect()
}
