//! Trajectory ingest, resampling and leader–follower candidate selection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::ParamSpace;
use crate::error::{config, Error, Result};
use crate::models::{ParameterSet, DEFAULT_MIN_GAP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub driven_distance: f64,
    pub v: f64,
    pub lane_id: i64,
    pub leader_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub vehicle_id: u64,
    pub vehicle_length: f64,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn t_first(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.t)
    }

    pub fn t_last(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.driven_distance).collect()
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.v).collect()
    }

    /// Interpolated sample at `t`; first/last sample held outside the record.
    pub fn at(&self, t: f64) -> Sample {
        let s = &self.samples;
        let i = s.partition_point(|p| p.t <= t);
        if i == 0 {
            return Sample { t, ..s[0] };
        }
        if i == s.len() {
            return Sample { t, ..s[i - 1] };
        }
        let (a, b) = (&s[i - 1], &s[i]);
        let f = (t - a.t) / (b.t - a.t);
        let lerp = |p: f64, q: f64| p + (q - p) * f;
        Sample {
            t,
            x: lerp(a.x, b.x),
            y: lerp(a.y, b.y),
            driven_distance: lerp(a.driven_distance, b.driven_distance),
            v: lerp(a.v, b.v),
            lane_id: a.lane_id,
            leader_id: a.leader_id,
        }
    }

    fn modal_lane(&self) -> i64 {
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.lane_id).or_default() += 1;
        }
        counts
            .into_iter()
            .max_by_key(|&(lane, n)| (n, std::cmp::Reverse(lane)))
            .map_or(0, |(lane, _)| lane)
    }
}

/// Column names of the input CSV. The defaults are the native header; other
/// datasets can be read by renaming columns here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub track_id: String,
    pub frame: String,
    pub t: String,
    pub x: String,
    pub y: String,
    pub speed: String,
    pub lane_id: String,
    pub length: String,
    pub leader_id: String,
    /// Optional column with a precomputed driven distance.
    pub driven_distance: Option<String>,
}

impl Default for DatasetSchema {
    fn default() -> Self {
        DatasetSchema {
            track_id: "track_id".into(),
            frame: "frame".into(),
            t: "t".into(),
            x: "x".into(),
            y: "y".into(),
            speed: "speed".into(),
            lane_id: "lane_id".into(),
            length: "length".into(),
            leader_id: "leader_id".into(),
            driven_distance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRejection {
    pub track_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadedDataset {
    pub tracks: Vec<Trajectory>,
    pub rejected: Vec<TrackRejection>,
}

struct Columns {
    track: usize,
    t: usize,
    x: usize,
    y: usize,
    speed: usize,
    lane: usize,
    length: usize,
    leader: usize,
    distance: Option<usize>,
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<LoadedDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<LoadedDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    find(&schema.frame)?;
    let cols = Columns {
        track: find(&schema.track_id)?,
        t: find(&schema.t)?,
        x: find(&schema.x)?,
        y: find(&schema.y)?,
        speed: find(&schema.speed)?,
        lane: find(&schema.lane_id)?,
        length: find(&schema.length)?,
        leader: find(&schema.leader_id)?,
        distance: schema.driven_distance.as_deref().map(find).transpose()?,
    };

    let mut order: Vec<u64> = Vec::new();
    let mut rows: HashMap<u64, Vec<std::result::Result<(Sample, f64), String>>> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let track: u64 = record
            .get(cols.track)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Schema("unparsable track_id".into()))?;
        let entry = rows.entry(track).or_insert_with(|| {
            order.push(track);
            Vec::new()
        });
        entry.push(parse_row(&record, &cols));
    }

    let mut out = LoadedDataset::default();
    for id in order {
        match build_track(id, rows.remove(&id).unwrap_or_default(), cols.distance.is_some()) {
            Ok(traj) => out.tracks.push(traj),
            Err(reason) => out.rejected.push(TrackRejection { track_id: id, reason }),
        }
    }
    Ok(out)
}

fn parse_row(rec: &csv::StringRecord, c: &Columns) -> std::result::Result<(Sample, f64), String> {
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        let v: f64 = rec
            .get(i)
            .unwrap_or("")
            .parse()
            .map_err(|_| format!("unparsable {name}"))?;
        if v.is_nan() {
            Err("NaN field".to_string())
        } else {
            Ok(v)
        }
    };
    let leader = rec.get(c.leader).unwrap_or("");
    let leader_id = if leader.is_empty() {
        None
    } else {
        Some(leader.parse().map_err(|_| "unparsable leader_id".to_string())?)
    };
    let lane_id = rec
        .get(c.lane)
        .unwrap_or("")
        .parse()
        .map_err(|_| "unparsable lane_id".to_string())?;
    let sample = Sample {
        t: num(c.t, "t")?,
        x: num(c.x, "x")?,
        y: num(c.y, "y")?,
        driven_distance: match c.distance {
            Some(i) => num(i, "driven_distance")?,
            None => 0.0,
        },
        v: num(c.speed, "speed")?,
        lane_id,
        leader_id,
    };
    Ok((sample, num(c.length, "length")?))
}

fn build_track(
    id: u64,
    rows: Vec<std::result::Result<(Sample, f64), String>>,
    has_distance: bool,
) -> std::result::Result<Trajectory, String> {
    let rows: Vec<(Sample, f64)> = rows.into_iter().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err("empty track".into());
    }
    let vehicle_length = rows[0].1;
    let mut samples: Vec<Sample> = rows.into_iter().map(|r| r.0).collect();
    samples.sort_by(|a, b| a.t.total_cmp(&b.t));
    if samples.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err("non-monotonic time".into());
    }
    if samples.iter().any(|s| s.v < 0.0) {
        return Err("negative speed".into());
    }
    if has_distance {
        if samples.windows(2).any(|w| w[1].driven_distance < w[0].driven_distance) {
            return Err("decreasing driven distance".into());
        }
    } else {
        let mut acc = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for s in samples.iter_mut() {
            if let Some((px, py)) = prev {
                acc += (s.x - px).hypot(s.y - py);
            }
            s.driven_distance = acc;
            prev = Some((s.x, s.y));
        }
    }
    Ok(Trajectory {
        vehicle_id: id,
        vehicle_length,
        samples,
    })
}

/// Uniform grid starting at the first sample, linear interpolation.
pub fn resample(traj: &Trajectory, dt: f64) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return config("resampling step must be > 0");
    }
    if traj.samples.len() < 2 {
        return config(format!("track {} has fewer than 2 samples", traj.vehicle_id));
    }
    let t0 = traj.t_first();
    let n = ((traj.t_last() - t0) / dt + 1e-9).floor() as usize;
    Ok(resample_grid(traj, t0, dt, n + 1))
}

fn resample_grid(traj: &Trajectory, t0: f64, dt: f64, n: usize) -> Trajectory {
    Trajectory {
        vehicle_id: traj.vehicle_id,
        vehicle_length: traj.vehicle_length,
        samples: (0..n).map(|k| traj.at(t0 + k as f64 * dt)).collect(),
    }
}

/// Stop line as a point and the direction of travel across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopLine {
    pub x: f64,
    pub y: f64,
    pub dir_x: f64,
    pub dir_y: f64,
}

impl StopLine {
    /// Stop line perpendicular to the x axis, traffic moving towards +x.
    pub fn at_x(x: f64) -> Self {
        StopLine {
            x,
            y: 0.0,
            dir_x: 1.0,
            dir_y: 0.0,
        }
    }

    fn signed_distance(&self, s: &Sample) -> f64 {
        let norm = self.dir_x.hypot(self.dir_y);
        ((s.x - self.x) * self.dir_x + (s.y - self.y) * self.dir_y) / norm
    }

    fn crossings(&self, traj: &Trajectory) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for w in traj.samples.windows(2) {
            let (a, b) = (self.signed_distance(&w[0]), self.signed_distance(&w[1]));
            if (a < 0.0) != (b < 0.0) {
                let f = a / (a - b);
                let t = w[0].t + f * (w[1].t - w[0].t);
                let d = w[0].driven_distance + f * (w[1].driven_distance - w[0].driven_distance);
                out.push((t, d));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Lanes to keep; `None` keeps every lane.
    pub lanes: Option<Vec<i64>>,
    pub stop_lines: BTreeMap<i64, StopLine>,
    pub dt: f64,
    pub stop_speed: f64,
    pub stop_duration: f64,
    /// Largest plausible displacement between consecutive samples (m).
    pub jump_threshold: f64,
    /// Sampling gaps above this multiple of the median interval count as lost tracking.
    pub gap_factor: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            lanes: None,
            stop_lines: BTreeMap::new(),
            dt: 0.04,
            stop_speed: 0.1,
            stop_duration: 0.5,
            jump_threshold: 5.0,
            gap_factor: 2.0,
        }
    }
}

/// Matched leader and follower on a common time grid. Driven distances of
/// both are measured from the stop line, so
/// `spacing = leader.driven_distance - follower.driven_distance - leader.vehicle_length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderFollowerPair {
    pub id: String,
    pub lane_id: i64,
    pub leader: Trajectory,
    pub follower: Trajectory,
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub spacing: Vec<f64>,
    pub is_free_leader: bool,
}

impl LeaderFollowerPair {
    /// Builds a pair from two trajectories already sampled on the same grid.
    pub fn from_aligned(id: impl Into<String>, leader: Trajectory, follower: Trajectory, dt: f64) -> Result<Self> {
        if leader.samples.len() != follower.samples.len() || leader.samples.len() < 2 {
            return config("leader and follower must share a grid of at least two samples");
        }
        if leader
            .samples
            .iter()
            .zip(&follower.samples)
            .any(|(a, b)| (a.t - b.t).abs() > 1e-9)
        {
            return config("leader and follower sample times differ");
        }
        let spacing = leader
            .samples
            .iter()
            .zip(&follower.samples)
            .map(|(l, f)| l.driven_distance - f.driven_distance - leader.vehicle_length)
            .collect();
        Ok(LeaderFollowerPair {
            id: id.into(),
            lane_id: follower.samples[0].lane_id,
            t_start: leader.t_first(),
            t_end: leader.t_last(),
            dt,
            spacing,
            is_free_leader: false,
            leader,
            follower,
        })
    }

    pub fn len(&self) -> usize {
        self.spacing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spacing.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRejection {
    pub leader_id: Option<u64>,
    pub follower_id: u64,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Selection {
    pub pairs: Vec<LeaderFollowerPair>,
    pub rejected: Vec<PairRejection>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

fn tracking_ok(traj: &Trajectory, cfg: &SelectionConfig) -> bool {
    let intervals: Vec<f64> = traj.samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    let Some(med) = median(intervals.clone()) else {
        return false;
    };
    let gaps_ok = intervals.iter().all(|&d| d <= cfg.gap_factor * med + 1e-9);
    let jumps_ok = traj
        .samples
        .windows(2)
        .all(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y) <= cfg.jump_threshold);
    gaps_ok && jumps_ok
}

fn has_full_stop(samples: &[Sample], cfg: &SelectionConfig) -> bool {
    let mut since: Option<f64> = None;
    for s in samples {
        if s.v < cfg.stop_speed {
            let start = *since.get_or_insert(s.t);
            if s.t - start >= cfg.stop_duration - 1e-9 {
                return true;
            }
        } else {
            since = None;
        }
    }
    false
}

fn within(traj: &Trajectory, t0: f64, t1: f64) -> impl Iterator<Item = &Sample> {
    traj.samples.iter().filter(move |s| s.t >= t0 - 1e-9 && s.t <= t1 + 1e-9)
}

fn modal_leader(traj: &Trajectory) -> Option<u64> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for id in traj.samples.iter().filter_map(|s| s.leader_id) {
        *counts.entry(id).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(id, n)| (n, std::cmp::Reverse(id)))
        .map(|(id, _)| id)
}

/// Applies the six selection criteria to every leader–follower candidate.
/// Output pairs are ordered by lane, then by the follower's stop-line crossing time.
pub fn select_candidates(tracks: &[Trajectory], cfg: &SelectionConfig) -> Selection {
    let by_id: HashMap<u64, &Trajectory> = tracks.iter().map(|t| (t.vehicle_id, t)).collect();
    let mut keyed: Vec<((i64, f64, u64), LeaderFollowerPair)> = Vec::new();
    let mut rejected = Vec::new();

    for follower in tracks {
        let reject = |leader_id: Option<u64>, reasons: Vec<String>| PairRejection {
            leader_id,
            follower_id: follower.vehicle_id,
            reasons,
        };
        let Some(leader_id) = modal_leader(follower) else {
            // First-row vehicles have no leader; they enter as the leader of the pair behind them.
            continue;
        };
        let Some(&leader) = by_id.get(&leader_id) else {
            rejected.push(reject(Some(leader_id), vec!["leader not tracked".into()]));
            continue;
        };
        match evaluate_pair(leader, follower, cfg) {
            Ok((key, pair)) => keyed.push((key, pair)),
            Err(reasons) => rejected.push(reject(Some(leader_id), reasons)),
        }
    }

    keyed.sort_by(|a, b| {
        a.0 .0
            .cmp(&b.0 .0)
            .then(a.0 .1.total_cmp(&b.0 .1))
            .then(a.0 .2.cmp(&b.0 .2))
    });
    Selection {
        pairs: keyed.into_iter().map(|(_, p)| p).collect(),
        rejected,
    }
}

type PairKey = (i64, f64, u64);

fn evaluate_pair(
    leader: &Trajectory,
    follower: &Trajectory,
    cfg: &SelectionConfig,
) -> std::result::Result<(PairKey, LeaderFollowerPair), Vec<String>> {
    let mut reasons = Vec::new();
    let leader_id = leader.vehicle_id;
    let led: Vec<&Sample> = follower
        .samples
        .iter()
        .filter(|s| s.leader_id == Some(leader_id))
        .collect();
    let t0 = led[0].t.max(leader.t_first());
    let t1 = led[led.len() - 1].t.min(leader.t_last());
    if t1 - t0 < cfg.dt {
        return Err(vec!["no overlap".into()]);
    }

    let lane = follower.modal_lane();
    if let Some(lanes) = &cfg.lanes {
        if !lanes.contains(&lane) || !lanes.contains(&leader.modal_lane()) {
            reasons.push("lane filter".into());
        }
    }
    if !tracking_ok(leader, cfg) || !tracking_ok(follower, cfg) {
        reasons.push("tracking error".into());
    }

    let crossings = cfg.stop_lines.get(&lane).map(|line| (line.crossings(leader), line.crossings(follower)));
    match &crossings {
        None => reasons.push("no stop line for lane".into()),
        Some((cl, cf)) if cl.len() != 1 || cf.len() != 1 => reasons.push("stop line crossings".into()),
        _ => {}
    }

    let window: Vec<Sample> = within(follower, t0, t1).copied().collect();
    if !has_full_stop(&window, cfg) {
        reasons.push("no full stop".into());
    }
    let lane_change = |t: &Trajectory| {
        let mut it = within(t, t0, t1).map(|s| s.lane_id);
        let first = it.next();
        it.any(|l| Some(l) != first)
    };
    if lane_change(follower) || lane_change(leader) {
        reasons.push("lane change".into());
    }

    let Some((cl, cf)) = crossings.filter(|(cl, cf)| cl.len() == 1 && cf.len() == 1) else {
        return Err(reasons);
    };
    let n = ((t1 - t0) / cfg.dt + 1e-9).floor() as usize + 1;
    let rebase = |t: &Trajectory, origin: f64| {
        let mut r = resample_grid(t, t0, cfg.dt, n);
        for s in r.samples.iter_mut() {
            s.driven_distance -= origin;
        }
        r
    };
    let l = rebase(leader, cl[0].1);
    let f = rebase(follower, cf[0].1);
    let id = format!("lane{lane}_l{leader_id}_f{}", follower.vehicle_id);
    let mut pair = match LeaderFollowerPair::from_aligned(id, l, f, cfg.dt) {
        Ok(p) => p,
        Err(e) => {
            reasons.push(e.to_string());
            return Err(reasons);
        }
    };
    if pair.spacing.iter().any(|&s| s < 0.0) {
        reasons.push("negative spacing".into());
    }
    if !reasons.is_empty() {
        return Err(reasons);
    }
    pair.lane_id = lane;
    pair.is_free_leader = within(leader, t0, t1).all(|s| s.leader_id.is_none());
    Ok(((lane, cf[0].0, follower.vehicle_id), pair))
}

/// Heuristic starting point for the optimizer, clamped into the space's bounds.
pub fn estimate_initial_params(pair: &LeaderFollowerPair, space: &ParamSpace, v_limit: f64) -> ParameterSet {
    let mut x = space.mid();
    let speeds = pair.follower.speeds();
    let vmax = speeds.iter().cloned().fold(0.0, f64::max);
    if vmax < 0.1 {
        return space.decode(&x);
    }

    let dt = pair.dt;
    let accels: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / dt).filter(|&a| a > 0.0).collect();
    let a_est = percentile(accels, 0.95);

    let headways: Vec<f64> = pair
        .spacing
        .iter()
        .zip(&speeds)
        .filter(|&(_, &v)| v > 5.0)
        .map(|(&g, &v)| (g - DEFAULT_MIN_GAP).max(0.0) / v)
        .collect();
    let t_est = median(headways);
    let fv_est = vmax / v_limit;
    let lag = drive_off_lag(pair);

    for (i, name) in space.names.iter().enumerate() {
        let est = match name.as_str() {
            "a_max" => a_est,
            n if n.starts_with("a_sched_") => a_est,
            "T" | "tau" => t_est,
            "F_v" => Some(fv_est),
            "t_start" => lag,
            _ => None,
        };
        if let Some(v) = est {
            x[i] = v;
        }
    }
    space.decode(&space.clamp(&x))
}

fn percentile(mut xs: Vec<f64>, q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let idx = ((xs.len() - 1) as f64 * q).round() as usize;
    Some(xs[idx])
}

/// Time between the leader and the follower leaving standstill.
fn drive_off_lag(pair: &LeaderFollowerPair) -> Option<f64> {
    let start = |t: &Trajectory| {
        let mut stopped = false;
        for s in &t.samples {
            if s.v < 0.1 {
                stopped = true;
            } else if stopped {
                return Some(s.t);
            }
        }
        None
    };
    Some((start(&pair.follower)? - start(&pair.leader)?).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "track_id,frame,t,x,y,speed,lane_id,length,leader_id\n";

    fn read(body: &str) -> LoadedDataset {
        read_dataset(format!("{HEADER}{body}").as_bytes(), &DatasetSchema::default()).unwrap()
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let d = read("");
        assert!(d.tracks.is_empty() && d.rejected.is_empty());
    }

    #[test]
    fn driven_distance_from_positions() {
        let d = read("1,0,0.0,10.0,5.0,1.0,1,4.5,\n1,1,1.0,11.0,5.0,1.0,1,4.5,\n");
        assert_eq!(d.tracks[0].distances(), vec![0.0, 1.0]);
        assert_eq!(d.tracks[0].vehicle_length, 4.5);
        assert_eq!(d.tracks[0].samples[0].leader_id, None);
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let d = read("1,0,0.0,0,0,1,1,4.5,\n1,1,0.0,1,0,1,1,4.5,\n2,0,0.0,0,0,1,1,4.5,1\n2,1,0.1,0,0,1,1,4.5,1\n");
        assert_eq!(d.rejected, vec![TrackRejection { track_id: 1, reason: "non-monotonic time".into() }]);
        assert_eq!(d.tracks.len(), 1);
        assert_eq!(d.tracks[0].samples[0].leader_id, Some(1));
    }

    #[test]
    fn nan_field_rejected_per_track() {
        let d = read("1,0,0.0,NaN,0,1,1,4.5,\n2,0,0.0,0,0,1,1,4.5,\n");
        assert_eq!(d.rejected[0].reason, "NaN field");
        assert_eq!(d.tracks.len(), 1);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let r = read_dataset("track_id,frame,t,x,y\n".as_bytes(), &DatasetSchema::default());
        assert!(matches!(r, Err(Error::Schema(_))));
    }

    #[test]
    fn renamed_columns() {
        let schema = DatasetSchema { t: "time".into(), ..DatasetSchema::default() };
        let csv = "track_id,frame,time,x,y,speed,lane_id,length,leader_id\n5,0,0,0,0,0,2,4,\n5,1,1,2,0,0,2,4,\n";
        let d = read_dataset(csv.as_bytes(), &schema).unwrap();
        assert_eq!(d.tracks[0].distances(), vec![0.0, 2.0]);
    }

    fn line(ts: &[f64], xs: &[f64]) -> Trajectory {
        Trajectory {
            vehicle_id: 1,
            vehicle_length: 4.0,
            samples: ts
                .iter()
                .zip(xs)
                .map(|(&t, &x)| Sample { t, x, y: 0.0, driven_distance: x, v: 1.0, lane_id: 1, leader_id: None })
                .collect(),
        }
    }

    #[test]
    fn resample_uniform_is_identity() {
        let ts: Vec<f64> = (0..6).map(|k| k as f64 * 0.04).collect();
        let xs: Vec<f64> = ts.iter().map(|t| t * t).collect();
        let tr = line(&ts, &xs);
        assert_eq!(resample(&tr, 0.04).unwrap(), tr);
    }

    #[test]
    fn resample_blends_linearly() {
        let tr = line(&[0.0, 0.1, 0.2], &[0.0, 1.0, 3.0]);
        let r = resample(&tr, 0.04).unwrap();
        assert_eq!(r.samples.len(), 6);
        assert!((r.samples[1].driven_distance - 0.4).abs() < 1e-12);
        assert!((r.samples[3].driven_distance - (1.0 + 2.0 * 0.2)).abs() < 1e-9);
        assert_eq!(r.samples[0].driven_distance, 0.0);
        assert_eq!(r.samples[5].driven_distance, 3.0);
    }

    #[test]
    fn resample_needs_two_samples() {
        assert!(resample(&line(&[0.0], &[0.0]), 0.04).is_err());
    }

    proptest::proptest! {
        #[test]
        fn resample_idempotent(steps in proptest::collection::vec(0.01..0.3f64, 2..40), dt in 0.02..0.2f64) {
            let mut t = 0.0;
            let mut ts = Vec::new();
            for s in &steps { ts.push(t); t += s; }
            let xs: Vec<f64> = ts.iter().map(|t| 3.0 * t).collect();
            let once = resample(&line(&ts, &xs), dt).unwrap();
            if once.samples.len() >= 2 {
                let twice = resample(&once, dt).unwrap();
                proptest::prop_assert_eq!(once, twice);
            }
        }
    }

    /// Queue discharge fixture along +x with the stop line at x = 100.
    /// The leader stops at x = 95, the follower 2.5 m behind its rear.
    fn queue_tracks() -> Vec<Trajectory> {
        let dt = 0.1;
        let kin = |id: u64, leader: Option<u64>, x0: f64, start: f64| {
            let mut samples = Vec::new();
            for k in 0..=300 {
                let t = k as f64 * dt;
                let tau = (t - start).max(0.0);
                let (x, v) = if tau < 8.0 { (x0 + 0.75 * tau * tau, 1.5 * tau) } else { (x0 + 48.0 + 12.0 * (tau - 8.0), 12.0) };
                samples.push(Sample { t, x, y: 0.0, driven_distance: 0.0, v, lane_id: 1, leader_id: leader });
            }
            let mut tr = Trajectory { vehicle_id: id, vehicle_length: 4.5, samples };
            let mut acc = 0.0;
            for i in 0..tr.samples.len() {
                if i > 0 { acc += tr.samples[i].x - tr.samples[i - 1].x; }
                tr.samples[i].driven_distance = acc;
            }
            tr
        };
        vec![kin(1, None, 95.0, 2.0), kin(2, Some(1), 88.0, 3.0), kin(3, Some(2), 81.0, 4.0)]
    }

    fn cfg() -> SelectionConfig {
        let mut c = SelectionConfig { dt: 0.1, ..SelectionConfig::default() };
        c.stop_lines.insert(1, StopLine::at_x(100.0));
        c
    }

    #[test]
    fn selection_accepts_clean_queue() {
        let sel = select_candidates(&queue_tracks(), &cfg());
        assert_eq!(sel.rejected, vec![]);
        assert_eq!(sel.pairs.len(), 2);
        assert!(sel.pairs[0].is_free_leader);
        assert!(!sel.pairs[1].is_free_leader);
        let p = &sel.pairs[0];
        assert!((p.spacing[0] - 2.5).abs() < 1e-9);
        assert!(p.spacing.iter().all(|&s| s >= 0.0));
        assert_eq!(p.follower.vehicle_id, 2);
    }

    #[test]
    fn selection_rejects_lane_change() {
        let mut tracks = queue_tracks();
        for s in tracks[1].samples.iter_mut().skip(150) {
            s.lane_id = 2;
        }
        let sel = select_candidates(&tracks, &cfg());
        let r = sel.rejected.iter().find(|r| r.follower_id == 2).unwrap();
        assert!(r.reasons.contains(&"lane change".to_string()), "{r:?}");
    }

    #[test]
    fn selection_rejects_non_stopping() {
        let mut tracks = queue_tracks();
        for s in tracks[2].samples.iter_mut() {
            s.v = s.v.max(0.5);
        }
        let sel = select_candidates(&tracks, &cfg());
        let r = sel.rejected.iter().find(|r| r.follower_id == 3).unwrap();
        assert!(r.reasons.contains(&"no full stop".to_string()));
    }

    #[test]
    fn selection_rejects_negative_spacing() {
        let mut tracks = queue_tracks();
        // One sample 0.3 m into the leader.
        tracks[1].samples[10].x += 2.8;
        tracks[1].samples[10].driven_distance += 2.8;
        let sel = select_candidates(&tracks, &SelectionConfig { jump_threshold: 5.0, ..cfg() });
        let r = sel.rejected.iter().find(|r| r.follower_id == 2).unwrap();
        assert_eq!(r.reasons, vec!["negative spacing".to_string()]);
    }

    #[test]
    fn selection_rejects_tracking_jump_and_lane_filter() {
        let mut tracks = queue_tracks();
        tracks[2].samples[40].x += 8.0;
        let mut c = cfg();
        c.lanes = Some(vec![1]);
        let sel = select_candidates(&tracks, &c);
        assert!(sel.rejected.iter().any(|r| r.follower_id == 3 && r.reasons.contains(&"tracking error".to_string())));
        c.lanes = Some(vec![7]);
        let sel = select_candidates(&queue_tracks(), &c);
        assert!(sel.pairs.is_empty());
        assert!(sel.rejected.iter().all(|r| r.reasons.contains(&"lane filter".to_string())));
    }

    #[test]
    fn selection_is_idempotent() {
        let tracks = queue_tracks();
        let once = select_candidates(&tracks, &cfg());
        let mut kept: Vec<Trajectory> = Vec::new();
        for p in &once.pairs {
            for id in [p.leader.vehicle_id, p.follower.vehicle_id] {
                if !kept.iter().any(|t| t.vehicle_id == id) {
                    kept.push(tracks.iter().find(|t| t.vehicle_id == id).unwrap().clone());
                }
            }
        }
        let twice = select_candidates(&kept, &cfg());
        assert_eq!(once.pairs, twice.pairs);
    }
}
