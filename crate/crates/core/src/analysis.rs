//! Macroscopic post-processing of simulation logs.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{DetectorRecord, DETECTOR_SPEED_FLOOR, EventKind, SignalPlan, SimulationLog, VehicleRecord};

/// Speed below which a vehicle belongs to a jam (m/s).
pub const CONGESTION_SPEED: f64 = 2.0;
/// Largest spacing between consecutive slow vehicles of one jam (m).
pub const JAM_CLUSTER_GAP: f64 = 100.0;
pub const MIN_FRONT_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdPoint {
    pub zone_id: usize,
    pub window_start: f64,
    /// veh/km
    pub density: f64,
    /// veh/h
    pub flow: f64,
    /// km/h
    pub mean_speed: f64,
}

/// One point per non-empty detector window.
pub fn fundamental_diagram(records: &[DetectorRecord]) -> Vec<FdPoint> {
    records
        .iter()
        .filter(|r| r.count > 0)
        .map(|r| {
            let flow = r.count as f64 * 3600.0 / r.window_length;
            let kmh = r.mean_speed * 3.6;
            FdPoint {
                zone_id: r.zone_id,
                window_start: r.window_start,
                density: flow / (r.mean_speed.max(DETECTOR_SPEED_FLOOR) * 3.6),
                flow,
                mean_speed: kmh,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityDrop {
    pub q_free_max: f64,
    pub q_discharge: Option<f64>,
    pub drop: Option<f64>,
    pub congested_windows: usize,
    /// False when no congested window exists and the drop is undefined.
    pub valid: bool,
}

/// Compares the highest free-flow throughput with the mean throughput of
/// congested windows (mean speed below half the limit).
///
/// With `breakdown = Some(t)` the free-flow maximum is taken over windows
/// starting before `t` and congested windows after it; with `None` the
/// windows are split by regime alone, which suits runs with repeated
/// disturbances where the demand is still ramping up before the first one.
pub fn capacity_drop(points: &[FdPoint], speed_limit: f64, breakdown: Option<f64>) -> CapacityDrop {
    let threshold_kmh = 0.5 * speed_limit * 3.6;
    let free = points.iter().filter(|p| match breakdown {
        Some(t) => p.window_start < t,
        None => p.mean_speed >= threshold_kmh,
    });
    let q_free_max = free.map(|p| p.flow).fold(0.0, f64::max);
    let congested: Vec<f64> = points
        .iter()
        .filter(|p| p.mean_speed < threshold_kmh && breakdown.is_none_or(|t| p.window_start >= t))
        .map(|p| p.flow)
        .collect();
    if congested.is_empty() || q_free_max <= 0.0 {
        return CapacityDrop {
            q_free_max,
            q_discharge: None,
            drop: None,
            congested_windows: congested.len(),
            valid: false,
        };
    }
    let q = congested.iter().sum::<f64>() / congested.len() as f64;
    CapacityDrop {
        q_free_max,
        q_discharge: Some(q),
        drop: Some(1.0 - q / q_free_max),
        congested_windows: congested.len(),
        valid: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveEstimate {
    /// Magnitude of the upstream front speed (m/s).
    pub speed: f64,
    /// Fitted slope of position over time (m/s, negative when upstream).
    pub slope: f64,
    pub r2: f64,
    pub front: Vec<(f64, f64)>,
}

/// Groups records by time stamp, preserving log order.
fn snapshots(records: &[VehicleRecord]) -> Vec<(f64, Vec<&VehicleRecord>)> {
    let mut out: Vec<(f64, Vec<&VehicleRecord>)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((t, v)) if *t == r.t => v.push(r),
            _ => out.push((r.t, vec![r])),
        }
    }
    out
}

/// Rearmost member of the most downstream jam at every time from `t_from`
/// on; times without slow vehicles are skipped.
pub fn congestion_front(records: &[VehicleRecord], v_c: f64, t_from: f64) -> Vec<(f64, f64)> {
    let mut front = Vec::new();
    for (t, snap) in snapshots(records) {
        if t < t_from {
            continue;
        }
        let mut slow: Vec<f64> = snap.iter().filter(|r| r.v < v_c).map(|r| r.position).collect();
        if slow.is_empty() {
            continue;
        }
        slow.sort_by(|a, b| b.total_cmp(a));
        let mut rear = slow[0];
        for &x in &slow[1..] {
            if rear - x > JAM_CLUSTER_GAP {
                break;
            }
            rear = x;
        }
        front.push((t, rear));
    }
    front
}

/// Least-squares slope and coefficient of determination.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mx = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let stx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mx)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.1 - mx).powi(2)).sum();
    let slope = if stt > 0.0 { stx / stt } else { 0.0 };
    let ss_res: f64 = pts.iter().map(|p| (p.1 - mx - slope * (p.0 - mt)).powi(2)).sum();
    let r2 = if sxx > 0.0 { 1.0 - ss_res / sxx } else { 1.0 };
    (slope, r2)
}

/// Upstream speed of the congestion front after `t_from` (the reopening).
pub fn wave_speed(records: &[VehicleRecord], v_c: f64, t_from: f64) -> Result<WaveEstimate> {
    let front = congestion_front(records, v_c, t_from);
    if front.len() < MIN_FRONT_SAMPLES {
        return Err(Error::Evaluation(format!(
            "only {} congestion-front samples, need {MIN_FRONT_SAMPLES}",
            front.len()
        )));
    }
    let (slope, r2) = linear_fit(&front);
    Ok(WaveEstimate {
        speed: slope.abs(),
        slope,
        r2,
        front,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub cycle: usize,
    pub position: usize,
    pub vehicle_id: u64,
    pub t: f64,
    /// Time since the previous crossing; since green onset for position 1.
    pub headway: f64,
    pub speed: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    pub crossings: Vec<Crossing>,
    /// Per queue position: (time since green onset, mean acceleration).
    pub accel_curves: BTreeMap<usize, Vec<(f64, f64)>>,
}

impl QueueStats {
    /// Time after green onset at which the mean acceleration of `position`
    /// peaks.
    pub fn peak_accel_time(&self, position: usize) -> Option<f64> {
        self.accel_curves
            .get(&position)?
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|p| p.0)
    }
}

fn by_vehicle(records: &[VehicleRecord]) -> BTreeMap<u64, Vec<&VehicleRecord>> {
    let mut m: BTreeMap<u64, Vec<&VehicleRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.vehicle_id).or_default().push(r);
    }
    m
}

struct LineCrossing {
    id: u64,
    t: f64,
    v: f64,
    a: f64,
    stopped_before: Vec<f64>,
}

fn stop_line_crossings(records: &[VehicleRecord], x_s: f64) -> Vec<LineCrossing> {
    let mut out = Vec::new();
    for (id, recs) in by_vehicle(records) {
        for w in recs.windows(2) {
            let (p, q) = (w[0], w[1]);
            if p.position < x_s && x_s <= q.position {
                let f = (x_s - p.position) / (q.position - p.position);
                let lerp = |a: f64, b: f64| a + f * (b - a);
                let stopped_before = recs
                    .iter()
                    .take_while(|r| r.t <= p.t)
                    .filter(|r| r.v < QUEUED_SPEED)
                    .map(|r| r.t)
                    .collect();
                out.push(LineCrossing {
                    id,
                    t: lerp(p.t, q.t),
                    v: lerp(p.v, q.v),
                    a: lerp(p.a, q.a),
                    stopped_before,
                });
                break;
            }
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.id.cmp(&b.id)));
    out
}

/// A vehicle counts as queued when it was slower than this (m/s) during the
/// red phase before its crossing.
pub const QUEUED_SPEED: f64 = 0.5;

/// Crossing headway, speed and acceleration of queued vehicles per queue
/// position and cycle, plus mean acceleration curves from green onset.
pub fn queue_discharge_stats(records: &[VehicleRecord], plan: &SignalPlan, duration: f64) -> QueueStats {
    let greens = plan.green_starts(duration);
    let crossings = stop_line_crossings(records, plan.stop_line);
    let mut out = Vec::new();
    let mut members: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (c, &g) in greens.iter().enumerate() {
        let red_start = g - (plan.cycle - plan.green);
        let mut prev = g;
        let mut pos = 0;
        for x in crossings.iter().filter(|x| x.t >= g && x.t < g + plan.green) {
            if !x.stopped_before.iter().any(|&t| t >= red_start) {
                continue;
            }
            pos += 1;
            out.push(Crossing {
                cycle: c,
                position: pos,
                vehicle_id: x.id,
                t: x.t,
                headway: x.t - prev,
                speed: x.v,
                accel: x.a,
            });
            members.insert((c, pos), x.id);
            prev = x.t;
        }
    }

    let vehicles = by_vehicle(records);
    let mut sums: BTreeMap<usize, BTreeMap<i64, (f64, usize)>> = BTreeMap::new();
    for ((c, pos), id) in &members {
        let g = greens[*c];
        for r in vehicles.get(id).into_iter().flatten() {
            let tau = r.t - g;
            if !(0.0..plan.green).contains(&tau) {
                continue;
            }
            let key = (tau * 1000.0).round() as i64;
            let e = sums.entry(*pos).or_default().entry(key).or_insert((0.0, 0));
            e.0 += r.a;
            e.1 += 1;
        }
    }
    let accel_curves = sums
        .into_iter()
        .map(|(pos, m)| (pos, m.into_iter().map(|(k, (s, n))| (k as f64 / 1000.0, s / n as f64)).collect()))
        .collect();
    QueueStats {
        crossings: out,
        accel_curves,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub collisions: usize,
    pub emergency_stops: usize,
    pub insertions_blocked: usize,
    pub cycles: usize,
    /// Mean number of vehicles crossing the stop line per cycle.
    pub vehicles_per_cycle: Option<f64>,
}

/// Event counts and, with a signal plan, mean stop-line throughput over the
/// cycles whose green phase ends within the run.
pub fn scenario_metrics(log: &SimulationLog, plan: Option<&SignalPlan>, duration: f64) -> ScenarioMetrics {
    let mut m = ScenarioMetrics {
        collisions: log.count(EventKind::Collision),
        emergency_stops: log.count(EventKind::EmergencyStop),
        insertions_blocked: log.count(EventKind::InsertionBlocked),
        cycles: 0,
        vehicles_per_cycle: None,
    };
    let Some(plan) = plan else { return m };
    let greens: Vec<f64> = plan
        .green_starts(duration)
        .into_iter()
        .filter(|g| g + plan.green <= duration + 1e-9)
        .collect();
    if greens.is_empty() {
        return m;
    }
    let crossings = stop_line_crossings(&log.records, plan.stop_line);
    let total: usize = greens
        .iter()
        .map(|&g| crossings.iter().filter(|x| x.t >= g && x.t < g + plan.cycle).count())
        .sum();
    m.cycles = greens.len();
    m.vehicles_per_cycle = Some(total as f64 / greens.len() as f64);
    m
}

pub fn write_fd_points<W: Write>(w: W, points: &[FdPoint]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["zone_id", "window_start", "density", "flow", "mean_speed"])?;
    for p in points {
        c.write_record([
            p.zone_id.to_string(),
            p.window_start.to_string(),
            p.density.to_string(),
            p.flow.to_string(),
            p.mean_speed.to_string(),
        ])?;
    }
    c.flush()?;
    Ok(())
}

pub fn write_wave<W: Write>(w: W, front: &[(f64, f64)]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["t", "front_x"])?;
    for (t, x) in front {
        c.write_record([t.to_string(), x.to_string()])?;
    }
    c.flush()?;
    Ok(())
}

pub fn write_queue_stats<W: Write>(w: W, stats: &QueueStats) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["cycle", "position", "headway", "speed", "accel"])?;
    for x in &stats.crossings {
        c.write_record([
            x.cycle.to_string(),
            x.position.to_string(),
            x.headway.to_string(),
            x.speed.to_string(),
            x.accel.to_string(),
        ])?;
    }
    c.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Event;

    fn det(count: usize, mean_speed: f64) -> DetectorRecord {
        DetectorRecord {
            zone_id: 0,
            window_start: 0.0,
            window_length: 60.0,
            count,
            mean_speed,
            density: 0.0,
        }
    }

    fn rec(id: u64, t: f64, x: f64, v: f64) -> VehicleRecord {
        VehicleRecord {
            vehicle_id: id,
            t,
            position: x,
            v,
            a: 0.0,
            lane_id: 0,
            gap_to_leader: None,
        }
    }

    #[test]
    fn fd_arithmetic() {
        let p = fundamental_diagram(&[det(10, 50.0 / 3.6), det(0, 0.0)]);
        assert_eq!(p.len(), 1);
        assert!((p[0].flow - 600.0).abs() < 1e-9);
        assert!((p[0].density - 12.0).abs() < 1e-9);
        assert!((p[0].mean_speed - 50.0).abs() < 1e-9);
    }

    fn fd(flow: f64, kmh: f64, t: f64) -> FdPoint {
        FdPoint {
            zone_id: 0,
            window_start: t,
            density: flow / kmh,
            flow,
            mean_speed: kmh,
        }
    }

    #[test]
    fn capacity_drop_arithmetic() {
        let limit = 50.0 / 3.6;
        let pts = [fd(1500.0, 45.0, 0.0), fd(1800.0, 40.0, 60.0), fd(1500.0, 10.0, 120.0), fd(1700.0, 12.0, 180.0)];
        for b in [None, Some(100.0)] {
            let c = capacity_drop(&pts, limit, b);
            assert!(c.valid);
            assert!((c.drop.unwrap() - (1.0 - 1600.0 / 1800.0)).abs() < 1e-12);
            assert!((c.drop.unwrap() - 0.111).abs() < 1e-3);
        }
        let flat = [fd(1200.0, 45.0, 0.0), fd(1200.0, 10.0, 60.0)];
        assert_eq!(capacity_drop(&flat, limit, None).drop, Some(0.0));
        let none = capacity_drop(&[fd(1200.0, 45.0, 0.0)], limit, None);
        assert!(!none.valid && none.drop.is_none());
    }

    /// Jam whose tail moves upstream at exactly 5 m/s.
    fn moving_jam(speed: f64) -> Vec<VehicleRecord> {
        let mut out = Vec::new();
        for k in 0..100 {
            let t = 100.0 + k as f64 * 0.5;
            let tail = 3000.0 - speed * (t - 100.0);
            // Free vehicles downstream, a jam of slow ones, more free ones upstream.
            out.push(rec(1, t, 3400.0, 12.0));
            for j in 0..5 {
                out.push(rec(10 + j, t, tail + 7.0 * (4 - j) as f64, 0.0));
            }
            out.push(rec(20, t, tail - 400.0, 13.0));
        }
        out
    }

    #[test]
    fn wave_speed_recovers_constructed_front() {
        let w = wave_speed(&moving_jam(5.0), CONGESTION_SPEED, 0.0).unwrap();
        assert!((w.speed - 5.0).abs() < 0.01);
        assert!(w.slope < 0.0);
        assert!(w.r2 > 0.999);
        assert!(w.front.windows(2).all(|p| p[1].1 < p[0].1));
        let s = wave_speed(&moving_jam(0.0), CONGESTION_SPEED, 0.0).unwrap();
        assert_eq!(s.speed, 0.0);
        assert!(wave_speed(&moving_jam(5.0)[..30], CONGESTION_SPEED, 0.0).is_err());
    }

    fn plan() -> SignalPlan {
        SignalPlan {
            cycle: 60.0,
            green: 30.0,
            offset: 0.0,
            stop_line: 100.0,
        }
    }

    /// Vehicles wait during the red phase from 30 s and cross after 60 s.
    fn queue_log(n: usize) -> Vec<VehicleRecord> {
        let mut out = Vec::new();
        for k in 0..=900 {
            let t = k as f64 * 0.1;
            for q in 0..n {
                let go = 61.0 + 2.0 * q as f64;
                let x0 = 99.0 - 7.0 * q as f64;
                let x = if t < go { x0 } else { x0 + 0.5 * 2.0 * (t - go).powi(2) };
                let v = if t < go { 0.0 } else { 2.0 * (t - go) };
                let mut r = rec(q as u64 + 1, t, x, v);
                r.a = if t < go { 0.0 } else { 2.0 };
                out.push(r);
            }
        }
        out
    }

    #[test]
    fn queue_positions_and_headways() {
        let s = queue_discharge_stats(&queue_log(1), &plan(), 90.0);
        assert_eq!(s.crossings.len(), 1);
        assert_eq!(s.crossings[0].position, 1);
        assert_eq!(s.crossings[0].cycle, 1);

        let s = queue_discharge_stats(&queue_log(4), &plan(), 90.0);
        assert_eq!(s.crossings.iter().map(|c| c.position).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(s.crossings.iter().all(|c| c.headway > 0.0));
        for k in 1..4 {
            let sum: f64 = s.crossings[1..=k].iter().map(|c| c.headway).sum();
            assert!((sum - (s.crossings[k].t - s.crossings[0].t)).abs() < 1e-9);
        }
        assert!((s.crossings[0].accel - 2.0).abs() < 1e-9);
        assert!(s.peak_accel_time(1).is_some());
    }

    #[test]
    fn metrics_counts() {
        let mut log = SimulationLog {
            records: queue_log(3),
            ..Default::default()
        };
        let m = scenario_metrics(&log, Some(&plan()), 90.0);
        assert_eq!((m.collisions, m.emergency_stops), (0, 0));
        assert_eq!(m.cycles, 2);
        assert_eq!(m.vehicles_per_cycle, Some(1.5));
        for i in 0..3 {
            log.events.push(Event {
                t: i as f64,
                kind: EventKind::Collision,
                vehicle_id: 1,
            });
        }
        assert_eq!(scenario_metrics(&log, None, 90.0).collisions, 3);
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_fd_points(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "zone_id,window_start,density,flow,mean_speed\n");
        let mut buf = Vec::new();
        write_wave(&mut buf, &[(1.0, 2.5)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,front_x\n1,2.5\n");
    }
}
