use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::models::{desired_gap, EidmParams, IdmParams, KraussParams, ModelKind, DEFAULT_DT};
use crate::trajectory::{LeaderFollowerPair, Sample};

const DT: f64 = DEFAULT_DT;
const LIMIT: f64 = 50.0 / 3.6;

fn env(obstacles: &[Obstacle]) -> StepEnv<'_> {
    StepEnv {
        lane_id: 0,
        speed_limit: LIMIT,
        obstacles,
        visibility: DecelVisibility::default(),
    }
}

fn idm() -> ParameterSet {
    ParameterSet::Idm(IdmParams::default_for(DT))
}

fn traj(id: u64, pts: &[(f64, f64, f64)]) -> Trajectory {
    Trajectory {
        vehicle_id: id,
        vehicle_length: 4.5,
        samples: pts
            .iter()
            .map(|&(t, d, v)| Sample {
                t,
                x: d,
                y: 0.0,
                driven_distance: d,
                v,
                lane_id: 1,
                leader_id: None,
            })
            .collect(),
    }
}

#[test]
fn free_vehicle_first_step() {
    let mut lane = Lane::open(1000.0);
    lane.vehicles.push_back(Vehicle::model(1, idm(), 5.0, 0.0, 0.0));
    let mut ev = Vec::new();
    step_lane(&mut lane, &env(&[]), 0.0, DT, &mut ev, || 0.0);
    let v = &lane.vehicles[0];
    assert!((v.v - 2.6 * DT).abs() < 1e-12);
    assert!((v.x - 2.6 * DT * DT).abs() < 1e-12);
    assert!(ev.is_empty());
}

#[test]
fn equilibrium_pair_keeps_speeds() {
    let p = IdmParams::default_for(DT);
    let v = 10.0;
    let v0 = p.desired_speed(LIMIT);
    let s_eq = desired_gap(v, 0.0, &p) / (1.0 - (v / v0).powf(p.delta)).sqrt();
    let mut lane = Lane::open(f64::INFINITY);
    lane.vehicles.push_back(Vehicle::model(1, idm(), 5.0, 100.0, v));
    lane.vehicles.push_back(Vehicle::model(2, idm(), 5.0, 100.0 - 5.0 - s_eq, v));
    // The leader is free and accelerates; hold it on its recorded line.
    let mut lead = traj(1, &[(0.0, 100.0, v), (1.0, 100.0 + v, v)]);
    lead.vehicle_length = 5.0;
    let lead = Arc::new(lead);
    lane.vehicles[0] = Vehicle::replay(1, lead, 0.0);
    let mut ev = Vec::new();
    step_lane(&mut lane, &env(&[]), 0.0, DT, &mut ev, || 0.0);
    assert!((lane.vehicles[1].v - v).abs() < 1e-9);
    assert!((lane.vehicles[0].v - v).abs() < 1e-9);
}

#[test]
fn forced_overlap_gives_one_collision() {
    let mut lane = Lane::open(f64::INFINITY);
    lane.vehicles.push_back(Vehicle::model(1, idm(), 5.0, 50.0, 5.0));
    lane.vehicles.push_back(Vehicle::model(2, idm(), 5.0, 45.1, 5.0));
    assert!((lane.gap_ahead(1).unwrap() + 0.1).abs() < 1e-9);
    let mut ev = Vec::new();
    step_lane(&mut lane, &env(&[]), 0.0, DT, &mut ev, || 0.0);
    let collisions: Vec<_> = ev.iter().filter(|e| e.kind == EventKind::Collision).collect();
    assert_eq!(collisions.len(), 1);
    assert_eq!(collisions[0].vehicle_id, 2);
    let (l, f) = (&lane.vehicles[0], &lane.vehicles[1]);
    assert!((l.x - l.length - f.x - COLLISION_SETBACK).abs() < 1e-9);
    assert_eq!(f.v, l.v);
    // Hard braking caused by an existing overlap is not an emergency stop.
    assert!(ev.iter().all(|e| e.kind != EventKind::EmergencyStop));
}

#[test]
fn replay_interpolates_and_holds() {
    let t = traj(1, &[(0.0, 10.0, 1.0), (1.0, 12.0, 3.0)]);
    assert_eq!(replay_leader(&t, 0.0), (10.0, 1.0));
    assert_eq!(replay_leader(&t, 1.0), (12.0, 3.0));
    assert_eq!(replay_leader(&t, 0.5), (11.0, 2.0));
    assert_eq!(replay_leader(&t, -3.0), (10.0, 1.0));
    assert_eq!(replay_leader(&t, 9.0), (12.0, 3.0));
}

proptest! {
    #[test]
    fn replay_is_monotone(steps in prop::collection::vec(0.0f64..3.0, 2..40), probes in prop::collection::vec(0.0f64..1.0, 2..50)) {
        let mut d = 0.0;
        let pts: Vec<(f64, f64, f64)> = steps.iter().enumerate().map(|(i, s)| { d += s; (i as f64 * 0.1, d, 1.0) }).collect();
        let tr = traj(1, &pts);
        let span = tr.t_last();
        let mut ts: Vec<f64> = probes.iter().map(|p| p * span).collect();
        ts.sort_by(f64::total_cmp);
        let xs: Vec<f64> = ts.iter().map(|&t| replay_leader(&tr, t).0).collect();
        prop_assert!(xs.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }
}

#[test]
fn signal_phases() {
    let plan = SignalPlan {
        cycle: 60.5,
        green: 30.25,
        offset: 0.0,
        stop_line: 300.0,
    };
    assert_eq!(signal_controller(&plan, 0.0), SignalPhase::Green);
    assert_eq!(signal_controller(&plan, 60.5 - 1e-6), SignalPhase::Red);
    assert_eq!(signal_controller(&plan, 30.0), SignalPhase::Green);
    assert_eq!(signal_controller(&plan, 31.0), SignalPhase::Red);
    assert_eq!(plan.green_starts(2600.0).len(), 43);
    let cfg = ScenarioConfig::queue(vec![]);
    assert_eq!(cfg.signal_plan.unwrap().green_starts(cfg.duration).len(), 43);
}

fn synthetic_pair() -> LeaderFollowerPair {
    let n = 200;
    let lead: Vec<(f64, f64, f64)> = (0..n)
        .map(|k| {
            let t = k as f64 * DT;
            let tau = (t - 1.0).max(0.0);
            (t, 12.0 + 0.75 * tau * tau, 1.5 * tau)
        })
        .collect();
    let fol: Vec<(f64, f64, f64)> = lead.iter().map(|&(t, _, _)| (t, 5.0, 0.0)).collect();
    LeaderFollowerPair::from_aligned("p", traj(1, &lead), traj(2, &fol), DT).unwrap()
}

#[test]
fn harness_lanes_are_independent() {
    let pair = synthetic_pair();
    let base = ModelKind::Eidm.default_params(DT);
    let cands: Vec<ParameterSet> = (0..200)
        .map(|k| {
            let mut p = base.clone();
            p.set("T", 0.5 + k as f64 * 0.01).unwrap();
            p
        })
        .collect();
    let h = build_calibration_harness(std::slice::from_ref(&pair), &cands, LIMIT).unwrap();
    assert_eq!(h.len(), 200);
    let a = h.run(true);
    assert_eq!(a.outcomes.len(), 200);
    assert!(a.outcomes.iter().all(|o| o.spacing.len() == pair.len()));

    let mut perturbed = cands.clone();
    perturbed[17].set("a_max", 0.9).unwrap();
    let b = build_calibration_harness(std::slice::from_ref(&pair), &perturbed, LIMIT).unwrap().run(true);
    for k in 0..200 {
        if k == 17 {
            assert_ne!(a.outcomes[k], b.outcomes[k]);
        } else {
            assert_eq!(a.outcomes[k], b.outcomes[k]);
        }
    }
    assert!(build_calibration_harness(std::slice::from_ref(&pair), &[], LIMIT).is_err());
}

#[test]
fn harness_spacing_matches_records() {
    let pair = synthetic_pair();
    let run = build_calibration_harness(std::slice::from_ref(&pair), &[idm()], LIMIT).unwrap().run(true);
    let o = &run.outcomes[0];
    assert!((o.spacing[0] - pair.spacing[0]).abs() < 1e-12);
    let gaps: Vec<f64> = o.records.iter().filter_map(|r| r.gap_to_leader).collect();
    assert_eq!(gaps, o.spacing);
}

#[test]
fn longer_leader_shifts_spacing() {
    let pair = synthetic_pair();
    let mut longer = pair.clone();
    longer.leader.vehicle_length += 1.0;
    let fol = Arc::new(pair.follower.clone());
    // Follower replayed too: the simulated spacing is the recorded one.
    let glued = |p: &LeaderFollowerPair| {
        let mut lane = Lane::open(f64::INFINITY);
        lane.vehicles.push_back(Vehicle::replay(1, Arc::new(p.leader.clone()), p.t_start));
        lane.vehicles.push_back(Vehicle::replay(2, fol.clone(), p.t_start));
        let mut out = vec![lane.gap_ahead(1).unwrap()];
        let mut ev = Vec::new();
        for k in 0..p.len() - 1 {
            step_lane(&mut lane, &env(&[]), p.t_start + k as f64 * DT, DT, &mut ev, || 0.0);
            out.push(lane.gap_ahead(1).unwrap());
        }
        out
    };
    let a = glued(&pair);
    let b = glued(&longer);
    for ((x, y), gt) in a.iter().zip(&b).zip(&pair.spacing) {
        assert!((x - gt).abs() < 1e-9);
        assert!((y - (x - 1.0)).abs() < 1e-9);
    }
}

fn fleet(p: ParameterSet) -> Vec<FleetEntry> {
    vec![FleetEntry { params: p, weight: 1.0 }]
}

#[test]
fn ring_without_insertions_only_has_detector_windows() {
    let mut cfg = ScenarioConfig::ring(fleet(idm()));
    cfg.insertion_interval = None;
    cfg.duration = 600.0;
    let log = run_scenario(&cfg, 1).unwrap();
    assert!(log.records.is_empty() && log.events.is_empty());
    assert_eq!(log.detector_records.len(), 3 * 10);
    assert!(log.detector_records.iter().all(|d| d.count == 0));
}

#[test]
fn zero_duration_is_empty() {
    let mut cfg = ScenarioConfig::queue(fleet(idm()));
    cfg.duration = 0.0;
    let log = run_scenario(&cfg, 1).unwrap();
    assert!(log.records.is_empty() && log.events.is_empty() && log.detector_records.is_empty());
}

#[test]
fn runs_are_deterministic() {
    let mut cfg = ScenarioConfig::ring(vec![
        FleetEntry { params: idm(), weight: 1.0 },
        FleetEntry {
            params: ModelKind::Eidm.default_params(DT),
            weight: 2.0,
        },
    ]);
    cfg.duration = 400.0;
    let a = run_scenario(&cfg, 7).unwrap();
    assert_eq!(a, run_scenario(&cfg, 7).unwrap());
    assert!(!a.records.is_empty());
}

#[test]
fn queue_run_conserves_and_does_not_teleport() {
    let mut cfg = ScenarioConfig::queue(fleet(idm()));
    cfg.duration = 400.0;
    cfg.record_interval = DT;
    let log = run_scenario(&cfg, 3).unwrap();
    assert_eq!(log.count(EventKind::Collision), 0);
    let mut per: std::collections::BTreeMap<u64, Vec<&VehicleRecord>> = Default::default();
    for r in &log.records {
        per.entry(r.vehicle_id).or_default().push(r);
    }
    let bound = (LIMIT * 1.0 + 2.6 * DT) * DT + 1e-9;
    for recs in per.values() {
        for w in recs.windows(2) {
            assert!((w[1].t - w[0].t - DT).abs() < 1e-9, "vehicle vanished and came back");
            assert!((w[1].position - w[0].position).abs() <= bound);
            assert!(w[1].position >= w[0].position);
            assert!(w[1].v >= 0.0);
        }
        let residence = recs.last().unwrap().t - recs[0].t;
        assert!(((residence / DT).round() as usize + 1).abs_diff(recs.len()) <= 1);
    }
    // Vehicles leave only at the end of the lane.
    let last_t = log.records.last().unwrap().t;
    for recs in per.values() {
        let end = recs.last().unwrap();
        if end.t < last_t - 1e-9 {
            assert!(end.position > cfg.lane_length - LIMIT * DT - 1e-9);
        }
    }
}

#[test]
fn red_signal_holds_traffic_and_green_releases_after_startup_delay() {
    let mut cfg = ScenarioConfig::queue(fleet(ModelKind::Eidm.default_params(DT)));
    cfg.duration = 130.0;
    cfg.record_interval = DT;
    let log = run_scenario(&cfg, 1).unwrap();
    let plan = cfg.signal_plan.unwrap();
    let queued_at_green: Vec<&VehicleRecord> = log
        .records
        .iter()
        .filter(|r| (r.t - plan.cycle).abs() <= 0.5 * DT && r.v < 0.1 && r.position < plan.stop_line)
        .collect();
    assert!(!queued_at_green.is_empty());
    let first = queued_at_green.iter().max_by(|a, b| a.position.total_cmp(&b.position)).unwrap();
    let t_start = match ModelKind::Eidm.default_params(DT) {
        ParameterSet::Eidm(EidmParams { t_start, .. }) => t_start,
        _ => unreachable!(),
    };
    let moved = log
        .records
        .iter()
        .find(|r| r.vehicle_id == first.vehicle_id && r.t > plan.cycle && r.v > 0.0)
        .unwrap();
    assert!(moved.t >= plan.cycle + t_start - 1e-9, "{}", moved.t);
    // Nobody crosses the stop line during red except committed vehicles
    // right at its onset.
    for r in &log.records {
        if signal_controller(&plan, r.t) == SignalPhase::Red && r.t - plan.green > 5.0 && r.t < plan.cycle {
            let crossed = log.records.iter().any(|q| {
                q.vehicle_id == r.vehicle_id && (q.t - r.t - DT).abs() < 1e-9 && r.position < plan.stop_line && q.position >= plan.stop_line
            });
            assert!(!crossed);
        }
    }
}

#[test]
fn krauss_tau_flag() {
    let p = KraussParams { tau: 0.02, ..KraussParams::default_for(DT) };
    assert!(!p.headway_safe(DT));
}

#[test]
fn config_validation() {
    let mut cfg = ScenarioConfig::ring(fleet(idm()));
    cfg.detector_zones.push(DetectorZone { start: 3390.0, length: 50.0 });
    assert!(run_scenario(&cfg, 0).is_err());
    let mut cfg = ScenarioConfig::stopgo(fleet(idm()));
    cfg.dt = 0.0;
    assert!(run_scenario(&cfg, 0).is_err());
    assert!("bogus".parse::<ScenarioKind>().is_err());
    assert_eq!("ring".parse::<ScenarioKind>().unwrap(), ScenarioKind::Ring);
}

#[test]
fn log_dir_round_trip() {
    let mut cfg = ScenarioConfig::ring(fleet(idm()));
    cfg.duration = 200.0;
    let dir = tempfile::tempdir().unwrap();
    let mut sink = CsvLogSink::create(dir.path(), &cfg.meta(4)).unwrap();
    run_scenario_into(&cfg, 4, &mut sink).unwrap();
    sink.finish().unwrap();
    let back = read_log_dir(dir.path()).unwrap();
    assert_eq!(back, run_scenario(&cfg, 4).unwrap());
}

#[test]
fn follower_of_passing_vehicle_stops_for_obstacle() {
    let mut lane = Lane::open(1000.0);
    let eidm = ModelKind::Eidm.default_params(DT);
    lane.vehicles.push_back(Vehicle::model(1, eidm.clone(), 5.0, 296.0, 12.0));
    lane.vehicles.push_back(Vehicle::model(2, eidm, 5.0, 261.0, 12.0));
    let obstacles = [Obstacle {
        id: OBSTACLE_ID_BASE,
        position: 300.0,
        committed: lane.committed_to_pass(300.0, 0.5),
    }];
    assert_eq!(obstacles[0].committed, vec![1]);
    let mut ev = Vec::new();
    for k in 0..500 {
        step_lane(&mut lane, &env(&obstacles), k as f64 * DT, DT, &mut ev, || 0.0);
        assert!(lane.vehicles[1].a > -4.5, "braking harder than b at step {k}");
    }
    assert!(ev.is_empty());
    let f = &lane.vehicles[1];
    assert!(f.x < 300.0 && f.v < 0.01);
    assert!(lane.vehicles[0].x > 400.0);
}
