use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cfcal::analysis::{
    capacity_drop, fundamental_diagram, queue_discharge_stats, scenario_metrics, wave_speed, write_fd_points,
    write_queue_stats, write_wave,
};
use cfcal::calibration::{
    calibrate_pair, evaluate_population, summarize, AlgoConfig, BatchObjective, CalibrationResult, DeConfig,
    EvalSettings, FnObjective, GaConfig, ModelSpec, ParamSpace, ParameterBounds, DEFAULT_SPEED_LIMIT,
};
use cfcal::models::{ModelKind, ParameterSet};
use cfcal::sensitivity::{
    ishigami, ishigami_total_indices, oat_sensitivity, rank_parameters, round_down_pow2, sobol_total_order,
    SensitivityReport,
};
use cfcal::sim::{
    read_log_dir, run_scenario_into, CsvLogSink, FleetEntry, FleetMode, LogMeta, ScenarioConfig, ScenarioKind,
    SimulationLog,
};
use cfcal::trajectory::{
    estimate_initial_params, read_dataset, select_candidates, LeaderFollowerPair, LoadedDataset, SelectionConfig,
    StopLine,
};

use crate::manifest::{digests, RunManifest};
use crate::{
    defaults, usage, Algo, AnalyzeArgs, CalibrateArgs, Cli, Command, Method, Report, SelectArgs, SensitivityArgs,
    SimulateArgs,
};

pub const PAIRS_FILE: &str = "pairs.json";
pub const REJECTIONS_FILE: &str = "rejections.json";
pub const RESULTS_FILE: &str = "results.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// What a command hands back for its manifest.
struct Done {
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
    details: serde_json::Value,
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let (out, snapshot, done) = match &cli.command {
        Command::Select(a) => (&a.out, serde_json::to_value(a)?, select(a)?),
        Command::Calibrate(a) => (&a.out, serde_json::to_value(a)?, calibrate(a)?),
        Command::Simulate(a) => (&a.out, serde_json::to_value(a)?, simulate(a)?),
        Command::Analyze(a) => (&a.out, serde_json::to_value(a)?, analyze(a)?),
        Command::Sensitivity(a) => (&a.out, serde_json::to_value(a)?, sensitivity(a)?),
    };
    let mut inputs = done.inputs;
    if let Some(c) = &cli.config {
        inputs.push(c.clone());
    }
    RunManifest {
        schema_version: crate::manifest::MANIFEST_SCHEMA,
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        subcommand: cli.command.name().to_string(),
        config: snapshot,
        inputs: digests(&inputs)?,
        seed: done.seed,
        jobs: rayon::current_num_threads(),
        wall_time: start.elapsed().as_secs_f64(),
        details: done.details,
    }
    .write(out)
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return usage(format!("input file {} does not exist", path.display()));
    }
    Ok(())
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create output directory {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn parse_stop_line(s: &str) -> Result<(i64, StopLine)> {
    let Some((lane, rest)) = s.split_once(':') else {
        return usage(format!("stop line '{s}' is not LANE:X or LANE:X,Y,DIR_X,DIR_Y"));
    };
    let lane: i64 = lane.trim().parse().map_err(|_| crate::UsageError(format!("bad lane id in '{s}'")))?;
    let nums: Vec<f64> = rest
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| crate::UsageError(format!("bad number in stop line '{s}'")))?;
    let line = match nums.as_slice() {
        [x] => StopLine::at_x(*x),
        [x, y, dx, dy] if dx.hypot(*dy) > 0.0 => StopLine {
            x: *x,
            y: *y,
            dir_x: *dx,
            dir_y: *dy,
        },
        _ => return usage(format!("stop line '{s}' is not LANE:X or LANE:X,Y,DIR_X,DIR_Y")),
    };
    Ok((lane, line))
}

#[derive(Serialize)]
struct RejectionReport<'a> {
    tracks_loaded: usize,
    pairs_selected: usize,
    tracks_rejected: usize,
    pairs_rejected: usize,
    reason_counts: BTreeMap<String, usize>,
    tracks: &'a [cfcal::trajectory::TrackRejection],
    pairs: &'a [cfcal::trajectory::PairRejection],
}

fn select(a: &SelectArgs) -> Result<Done> {
    require_file(&a.input)?;
    let bytes = fs::read(&a.input)?;
    let data = if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        LoadedDataset::default()
    } else {
        read_dataset(bytes.as_slice(), &Default::default())?
    };
    let mut cfg = SelectionConfig {
        lanes: a.lanes.clone(),
        dt: a.dt,
        ..Default::default()
    };
    for s in &a.stop_line {
        let (lane, line) = parse_stop_line(s)?;
        cfg.stop_lines.insert(lane, line);
    }
    if let Some(v) = a.stop_speed {
        cfg.stop_speed = v;
    }
    if let Some(v) = a.stop_duration {
        cfg.stop_duration = v;
    }
    if let Some(v) = a.jump_threshold {
        cfg.jump_threshold = v;
    }
    if !(cfg.dt > 0.0) {
        return usage("--dt must be positive");
    }
    let sel = select_candidates(&data.tracks, &cfg);
    let mut reason_counts = BTreeMap::new();
    for r in &data.rejected {
        *reason_counts.entry(r.reason.clone()).or_insert(0) += 1;
    }
    for r in &sel.rejected {
        for reason in &r.reasons {
            *reason_counts.entry(reason.clone()).or_insert(0) += 1;
        }
    }
    out_dir(&a.out)?;
    write_json(&a.out.join(PAIRS_FILE), &sel.pairs)?;
    write_json(
        &a.out.join(REJECTIONS_FILE),
        &RejectionReport {
            tracks_loaded: data.tracks.len(),
            pairs_selected: sel.pairs.len(),
            tracks_rejected: data.rejected.len(),
            pairs_rejected: sel.rejected.len(),
            reason_counts,
            tracks: &data.rejected,
            pairs: &sel.rejected,
        },
    )?;
    eprintln!("selected {} pairs, rejected {}", sel.pairs.len(), sel.rejected.len());
    Ok(Done {
        inputs: vec![a.input.clone()],
        seed: None,
        details: serde_json::Value::Null,
    })
}

fn read_pairs(path: &Path, dt: f64) -> Result<Vec<LeaderFollowerPair>> {
    let pairs: Vec<LeaderFollowerPair> = read_json(path)?;
    if let Some(p) = pairs.iter().find(|p| (p.dt - dt).abs() > 1e-9) {
        return usage(format!("pair {} is sampled at {} s but --dt is {} s", p.id, p.dt, dt));
    }
    Ok(pairs)
}

fn algo_config(a: &CalibrateArgs) -> AlgoConfig {
    match a.algo {
        Algo::De => AlgoConfig::De(DeConfig {
            pop: a.pop.unwrap_or(defaults::DE_POP),
            iters: a.iters,
            seed: a.seed,
            ..DeConfig::default()
        }),
        Algo::Ga => AlgoConfig::Ga(GaConfig {
            pop: a.pop.unwrap_or(defaults::GA_POP),
            iters: a.iters,
            seed: a.seed,
            ..GaConfig::default()
        }),
    }
}

fn calibrate(a: &CalibrateArgs) -> Result<Done> {
    let spec = ModelSpec::parse(&a.model, &a.schedule_breakpoints)?;
    let space = ParamSpace::for_model(&spec, a.dt)?;
    let pairs = read_pairs(&a.pairs, a.dt)?;
    let algo = algo_config(a);
    // Fail on bad optimizer settings even when there is nothing to calibrate.
    cfcal::calibration::optimize(
        &FnObjective(|_: &[f64]| 0.0),
        &space.bounds(),
        None,
        &match algo {
            AlgoConfig::De(c) => AlgoConfig::De(DeConfig { iters: 0, ..c }),
            AlgoConfig::Ga(c) => AlgoConfig::Ga(GaConfig { iters: 0, ..c }),
        },
    )?;
    let settings = EvalSettings {
        v_limit: DEFAULT_SPEED_LIMIT,
        leader_decel_visible: a.leader_decel_visible,
    };
    let results: Vec<CalibrationResult> = pairs
        .par_iter()
        .map(|p| calibrate_pair(p, &space, &algo, &settings))
        .collect::<cfcal::Result<_>>()?;
    out_dir(&a.out)?;
    write_json(&a.out.join(RESULTS_FILE), &results)?;
    write_json(&a.out.join(SUMMARY_FILE), &summarize(&results))?;
    let timings: BTreeMap<&str, serde_json::Value> = results
        .iter()
        .map(|r| {
            (
                r.pair_id.as_str(),
                serde_json::json!({ "wall_time": r.wall_time, "evaluations": r.evaluations }),
            )
        })
        .collect();
    eprintln!("calibrated {} pairs with {}", results.len(), spec);
    Ok(Done {
        inputs: vec![a.pairs.clone()],
        seed: Some(a.seed),
        details: serde_json::json!({ "model": spec.to_string(), "pairs": timings }),
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FleetFile {
    Results(Vec<CalibrationResult>),
    Params(Vec<ParameterSet>),
}

fn fleet(a: &SimulateArgs) -> Result<(Vec<FleetEntry>, Vec<PathBuf>)> {
    let Some(path) = &a.params else {
        let kind: ModelKind = a.model.parse()?;
        return Ok((
            vec![FleetEntry {
                params: kind.default_params(a.dt),
                weight: 1.0,
            }],
            vec![],
        ));
    };
    let params: Vec<ParameterSet> = match read_json::<FleetFile>(path)? {
        FleetFile::Results(r) => r.into_iter().filter(|r| r.gof.is_finite()).map(|r| r.best_params).collect(),
        FleetFile::Params(p) => p,
    };
    if params.is_empty() {
        return usage(format!("{} holds no usable parameter sets", path.display()));
    }
    Ok((
        params.into_iter().map(|params| FleetEntry { params, weight: 1.0 }).collect(),
        vec![path.clone()],
    ))
}

fn simulate(a: &SimulateArgs) -> Result<Done> {
    let kind: ScenarioKind = a.scenario.parse()?;
    let (fleet, inputs) = fleet(a)?;
    let mut cfg = ScenarioConfig::for_kind(kind, fleet)?;
    cfg.dt = a.dt;
    if let Some(d) = a.duration {
        cfg.duration = d;
    }
    if a.round_robin {
        cfg.fleet_mode = FleetMode::RoundRobin;
    }
    cfg.validate()?;
    out_dir(&a.out)?;
    let mut sink = CsvLogSink::create(&a.out, &cfg.meta(a.seed))?;
    run_scenario_into(&cfg, a.seed, &mut sink)?;
    sink.finish()?;
    eprintln!("{} scenario finished after {} s", kind, cfg.duration);
    Ok(Done {
        inputs,
        seed: Some(a.seed),
        details: serde_json::Value::Null,
    })
}

fn log_inputs(dir: &Path) -> Vec<PathBuf> {
    use cfcal::sim::{DETECTORS_FILE, EVENTS_FILE, META_FILE, RECORDS_FILE};
    [RECORDS_FILE, EVENTS_FILE, DETECTORS_FILE, META_FILE]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.is_file())
        .collect()
}

fn need_meta(log: &SimulationLog) -> Result<&LogMeta> {
    match &log.meta {
        Some(m) => Ok(m),
        None => usage("this report needs the log's meta.json"),
    }
}

fn analyze(a: &AnalyzeArgs) -> Result<Done> {
    if !a.log.is_dir() {
        return usage(format!("log directory {} does not exist", a.log.display()));
    }
    let log = read_log_dir(&a.log)?;
    out_dir(&a.out)?;
    match a.report {
        Report::Fd => {
            let points = fundamental_diagram(&log.detector_records);
            write_fd_points(File::create(a.out.join("fd_points.csv"))?, &points)?;
            let limit = log.meta.as_ref().map(|m| m.speed_limit).unwrap_or(DEFAULT_SPEED_LIMIT);
            write_json(&a.out.join("capacity_drop.json"), &capacity_drop(&points, limit, None))?;
        }
        Report::Wave => {
            let t_from = log
                .meta
                .as_ref()
                .and_then(|m| m.closures.iter().map(|c| c.start + c.duration).reduce(f64::max))
                .unwrap_or(0.0);
            let est = wave_speed(&log.records, a.v_c, t_from)?;
            write_wave(File::create(a.out.join("wave.csv"))?, &est.front)?;
            write_json(
                &a.out.join("wave.json"),
                &serde_json::json!({
                    "speed": est.speed,
                    "slope": est.slope,
                    "r2": est.r2,
                    "samples": est.front.len(),
                    "t_from": t_from,
                }),
            )?;
        }
        Report::Queue => {
            let meta = need_meta(&log)?;
            let Some(plan) = &meta.signal_plan else {
                return usage("queue report needs a log with a signal plan");
            };
            let stats = queue_discharge_stats(&log.records, plan, meta.duration);
            write_queue_stats(File::create(a.out.join("queue_stats.csv"))?, &stats)?;
        }
        Report::Metrics => {
            let plan = log.meta.as_ref().and_then(|m| m.signal_plan.as_ref());
            let duration = log.meta.as_ref().map(|m| m.duration).unwrap_or(0.0);
            write_json(&a.out.join("metrics.json"), &scenario_metrics(&log, plan, duration))?;
        }
    }
    Ok(Done {
        inputs: log_inputs(&a.log),
        seed: log.meta.as_ref().map(|m| m.seed),
        details: serde_json::Value::Null,
    })
}

/// Mean GoF over all pairs for every candidate.
struct CorpusObjective<'a> {
    pairs: &'a [LeaderFollowerPair],
    space: &'a ParamSpace,
    settings: EvalSettings,
}

impl BatchObjective for CorpusObjective<'_> {
    fn evaluate(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        let cands: Vec<ParameterSet> = xs.iter().map(|x| self.space.decode(x)).collect();
        let mut sum = vec![0.0; xs.len()];
        for p in self.pairs {
            for (s, g) in sum.iter_mut().zip(evaluate_population(p, &cands, &self.settings)) {
                *s += g;
            }
        }
        sum.into_iter().map(|s| s / self.pairs.len() as f64).collect()
    }
}

fn sobol_samples(a: &SensitivityArgs, fallback: usize) -> Result<usize> {
    let asked = a.samples.unwrap_or(fallback);
    let n = round_down_pow2(asked);
    if n < 2 {
        return usage(format!("--samples {asked} is too small for Sobol indices"));
    }
    if n != asked {
        eprintln!("warning: --samples {asked} is not a power of two, using {n}");
    }
    Ok(n)
}

fn sensitivity(a: &SensitivityArgs) -> Result<Done> {
    if a.ishigami_self_test {
        return ishigami_self_test(a);
    }
    let pairs_path = a.pairs.as_ref().expect("clap requires --pairs");
    let spec = ModelSpec::parse(&a.model, &a.schedule_breakpoints)?;
    let space = ParamSpace::screening(&spec, a.dt)?;
    let pairs = read_pairs(pairs_path, a.dt)?;
    if pairs.is_empty() {
        return usage(format!("{} holds no pairs", pairs_path.display()));
    }
    let obj = CorpusObjective {
        pairs: &pairs,
        space: &space,
        settings: EvalSettings::default(),
    };
    let bounds = space.bounds();
    let report = SensitivityReport::new(&bounds, Some(spec.to_string()), a.seed);
    let report = match a.method {
        Method::Oat => {
            let baseline = space.clamp(&space.encode(&estimate_initial_params(&pairs[0], &space, DEFAULT_SPEED_LIMIT)));
            let idx = oat_sensitivity(&obj, &bounds, &baseline, a.grid)?;
            report.with_oat(&idx, a.grid)
        }
        Method::Sobol => {
            let n = sobol_samples(a, defaults::SOBOL_SAMPLES)?;
            let r = sobol_total_order(&obj, &bounds, n, a.seed)?;
            report.with_sobol(&r, n)
        }
    };
    write_report(a, &report)?;
    let flagged = rank_parameters(&report, a.threshold);
    eprintln!("influential parameters: {}", flagged.join(", "));
    Ok(Done {
        inputs: vec![pairs_path.clone()],
        seed: Some(a.seed),
        details: serde_json::json!({ "influential": flagged }),
    })
}

fn write_report(a: &SensitivityArgs, report: &SensitivityReport) -> Result<()> {
    out_dir(&a.out)?;
    write_json(&a.out.join("sensitivity.json"), report)?;
    fs::write(a.out.join("sensitivity.csv"), report.to_csv())?;
    Ok(())
}

fn ishigami_self_test(a: &SensitivityArgs) -> Result<Done> {
    const A: f64 = 7.0;
    const B: f64 = 0.1;
    let pi = std::f64::consts::PI;
    let bounds = ParameterBounds::new(
        vec!["x1".into(), "x2".into(), "x3".into()],
        vec![-pi; 3],
        vec![pi; 3],
    )?;
    let n = sobol_samples(a, defaults::ISHIGAMI_SAMPLES)?;
    let r = sobol_total_order(&FnObjective(|x: &[f64]| ishigami(x, A, B)), &bounds, n, a.seed)?;
    let report = SensitivityReport::new(&bounds, Some("ishigami".into()), a.seed).with_sobol(&r, n);
    write_report(a, &report)?;
    let exact = ishigami_total_indices(A, B);
    let worst = r.s_total.iter().zip(exact).map(|(s, e)| (s - e).abs()).fold(0.0, f64::max);
    eprintln!("ishigami: estimated {:?}, analytic {:?}, max error {worst:.4}", r.s_total, exact);
    if worst > defaults::ISHIGAMI_TOLERANCE {
        anyhow::bail!("Ishigami self-test failed: max error {worst:.4} exceeds {}", defaults::ISHIGAMI_TOLERANCE);
    }
    Ok(Done {
        inputs: vec![],
        seed: Some(a.seed),
        details: serde_json::json!({ "analytic": exact, "max_error": worst }),
    })
}
