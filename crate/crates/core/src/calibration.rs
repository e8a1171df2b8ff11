//! Goodness-of-fit construction and the population optimizers.
//!
//! Candidates are encoded as plain vectors over a [`ParamSpace`]; a
//! [`BatchObjective`] scores a whole generation at once. For calibration the
//! batch is one harness run with a lane per candidate.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::models::{leader_deceleration_visibility, AmaxSchedule, ModelKind, ParameterSet};
use crate::sim::{build_calibration_harness, HarnessRun};
use crate::trajectory::{estimate_initial_params, LeaderFollowerPair};

/// Legal speed limit of the recorded approach (50 km/h).
pub const DEFAULT_SPEED_LIMIT: f64 = 50.0 / 3.6;

/// Model variant to calibrate. `EidmSched` replaces the constant maximum
/// acceleration with one value per schedule speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Krauss,
    Idm,
    Iidm,
    Eidm,
    EidmSched { speeds: Vec<f64> },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Krauss => ModelKind::Krauss,
            ModelSpec::Idm => ModelKind::Idm,
            ModelSpec::Iidm => ModelKind::Iidm,
            ModelSpec::Eidm | ModelSpec::EidmSched { .. } => ModelKind::Eidm,
        }
    }

    /// Parses a `--model` value; `speeds` is only used by `eidm_sched`.
    pub fn parse(name: &str, speeds: &[f64]) -> Result<Self> {
        Ok(match name {
            "eidm_sched" => {
                if speeds.len() < 2 {
                    return config("eidm_sched needs at least two schedule breakpoints");
                }
                AmaxSchedule::flat(speeds, 1.0)?;
                ModelSpec::EidmSched {
                    speeds: speeds.to_vec(),
                }
            }
            other => match ModelKind::from_str(other)? {
                ModelKind::Krauss => ModelSpec::Krauss,
                ModelKind::Idm => ModelSpec::Idm,
                ModelKind::Iidm => ModelSpec::Iidm,
                ModelKind::Eidm => ModelSpec::Eidm,
            },
        })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::EidmSched { speeds } => {
                write!(f, "EIDM")?;
                for s in speeds {
                    write!(f, "_{s}")?;
                }
                Ok(())
            }
            other => write!(f, "{}", other.kind().as_str().to_uppercase()),
        }
    }
}

/// Default search interval for a named parameter.
pub fn default_bounds(name: &str, dt: f64) -> Option<(f64, f64)> {
    Some(match name {
        "a_max" => (0.3, 4.0),
        n if n.starts_with("a_sched_") => (0.3, 4.0),
        "b" => (0.5, 5.0),
        "T" | "tau" => (0.1, 3.0),
        "F_v" => (0.7, 1.4),
        "delta" => (1.0, 10.0),
        "t_AP" => (dt, 2.0),
        "t_reac" => (0.0, 1.5),
        "t_start" => (0.0, 2.5),
        "M_bg" => (0.0, 1.0),
        "t_amax" => (0.1, 8.0),
        "s0" => (0.5, 5.0),
        "epsilon" => (0.0, 1.0),
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBounds {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParameterBounds {
    pub fn new(names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = ParameterBounds { names, lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// Unnamed box, for generic objectives.
    pub fn unnamed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let names = (0..lower.len()).map(|i| format!("x{i}")).collect();
        Self::new(names, lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() {
            return config("bounds must have at least one dimension");
        }
        if self.lower.len() != self.upper.len() || self.names.len() != self.lower.len() {
            return config("bounds have mismatched lengths");
        }
        for ((n, lo), hi) in self.names.iter().zip(&self.lower).zip(&self.upper) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return config(format!("invalid bounds for {n}: [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| lo <= v && v <= hi)
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((v, lo), hi)| if v.is_nan() { 0.5 * (lo + hi) } else { v.clamp(*lo, *hi) })
            .collect()
    }

    pub fn mid(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    /// Folds an out-of-range coordinate back by mirroring at the violated bound.
    pub fn reflect(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = reflect_into(*v, *lo, *hi);
        }
    }
}

fn reflect_into(v: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&v) {
        return v;
    }
    if !v.is_finite() {
        return 0.5 * (lo + hi);
    }
    let w = hi - lo;
    let y = (v - lo).rem_euclid(2.0 * w);
    let y = if y > w { 2.0 * w - y } else { y };
    (lo + y).clamp(lo, hi)
}

/// Maps vectors to parameter sets: named coordinates overwrite a template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub template: ParameterSet,
}

impl ParamSpace {
    /// The calibrated subset of each model with default bounds.
    pub fn for_model(spec: &ModelSpec, dt: f64) -> Result<Self> {
        let names: Vec<String> = match spec {
            ModelSpec::Krauss => vec!["a_max", "tau", "F_v", "b", "t_AP"],
            ModelSpec::Idm | ModelSpec::Iidm => vec!["a_max", "T", "F_v", "b", "t_AP", "delta"],
            ModelSpec::Eidm => vec!["a_max", "T", "F_v", "delta", "t_reac", "t_start", "M_bg", "t_amax"],
            ModelSpec::EidmSched { .. } => vec!["T", "F_v", "delta", "t_reac", "t_start", "M_bg", "t_amax"],
        }
        .into_iter()
        .map(String::from)
        .collect();
        Self::with_names(spec, dt, names)
    }

    /// Wider space used for screening: every continuous parameter except the
    /// action step and the dawdle factor.
    pub fn screening(spec: &ModelSpec, dt: f64) -> Result<Self> {
        let names: Vec<String> = match spec {
            ModelSpec::Krauss => vec!["a_max", "b", "tau", "F_v"],
            ModelSpec::Idm | ModelSpec::Iidm => vec!["a_max", "b", "T", "delta", "F_v"],
            ModelSpec::Eidm => vec!["a_max", "b", "T", "delta", "F_v", "t_reac", "t_start", "M_bg", "t_amax"],
            ModelSpec::EidmSched { .. } => vec!["b", "T", "delta", "F_v", "t_reac", "t_start", "M_bg", "t_amax"],
        }
        .into_iter()
        .map(String::from)
        .collect();
        Self::with_names(spec, dt, names)
    }

    /// Space over the given parameter names (schedule values are appended
    /// automatically for `EidmSched`).
    pub fn with_names(spec: &ModelSpec, dt: f64, mut names: Vec<String>) -> Result<Self> {
        let mut template = spec.kind().default_params(dt);
        if let ModelSpec::EidmSched { speeds } = spec {
            names.retain(|n| n != "a_max" && !n.starts_with("a_sched_"));
            names.extend((0..speeds.len()).map(|i| format!("a_sched_{i}")));
            template.set_schedule(Some(AmaxSchedule::flat(speeds, template.accel())?))?;
        }
        let mut lower = Vec::with_capacity(names.len());
        let mut upper = Vec::with_capacity(names.len());
        for n in &names {
            let is_sched = n.starts_with("a_sched_");
            if !is_sched && template.get(n).is_none() {
                return config(format!("model {spec} has no parameter '{n}'"));
            }
            let (lo, hi) = default_bounds(n, dt).ok_or_else(|| Error::Config(format!("no bounds for '{n}'")))?;
            lower.push(lo);
            upper.push(hi);
        }
        let space = ParamSpace {
            spec: spec.clone(),
            names,
            lower,
            upper,
            template,
        };
        space.bounds().validate()?;
        Ok(space)
    }

    /// Overrides one parameter's interval.
    pub fn set_bounds(&mut self, name: &str, lo: f64, hi: f64) -> Result<()> {
        let Some(i) = self.names.iter().position(|n| n == name) else {
            return config(format!("'{name}' is not part of the search space"));
        };
        self.lower[i] = lo;
        self.upper[i] = hi;
        self.bounds().validate()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn bounds(&self) -> ParameterBounds {
        ParameterBounds {
            names: self.names.clone(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        }
    }

    pub fn mid(&self) -> Vec<f64> {
        self.bounds().mid()
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        self.bounds().clamp(x)
    }

    pub fn decode(&self, x: &[f64]) -> ParameterSet {
        let mut p = self.template.clone();
        let mut sched = Vec::new();
        for (n, &v) in self.names.iter().zip(x) {
            if n.starts_with("a_sched_") {
                sched.push(v);
            } else {
                p.set(n, v).expect("space names are valid for the template");
            }
        }
        if let ModelSpec::EidmSched { speeds } = &self.spec {
            let bps: Vec<(f64, f64)> = speeds.iter().cloned().zip(sched.iter().cloned()).collect();
            if let Ok(s) = AmaxSchedule::new(bps) {
                p.set("a_max", sched[0]).expect("eidm has a_max");
                p.set_schedule(Some(s)).expect("eidm accepts a schedule");
            }
        }
        p
    }

    pub fn encode(&self, p: &ParameterSet) -> Vec<f64> {
        let sched = p.schedule();
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| match n.strip_prefix("a_sched_") {
                Some(k) => {
                    let k: usize = k.parse().unwrap_or(0);
                    sched
                        .and_then(|s| s.breakpoints().get(k).map(|b| b.1))
                        .unwrap_or_else(|| p.accel())
                }
                None => p.get(n).unwrap_or(0.5 * (self.lower[i] + self.upper[i])),
            })
            .collect()
    }
}

/// Scores a batch of encoded candidates; lower is better.
pub trait BatchObjective: Sync {
    fn evaluate(&self, xs: &[Vec<f64>]) -> Vec<f64>;
}

/// Adapts a pointwise function; the batch is scored in parallel.
pub struct FnObjective<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> BatchObjective for FnObjective<F> {
    fn evaluate(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.par_iter().map(|x| (self.0)(x)).collect()
    }
}

pub fn rmse(gt: &[f64], sim: &[f64]) -> Result<f64> {
    if gt.len() != sim.len() || gt.is_empty() {
        return Err(Error::Evaluation(format!(
            "series lengths differ or are empty: {} vs {}",
            gt.len(),
            sim.len()
        )));
    }
    let ss: f64 = gt.iter().zip(sim).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok((ss / gt.len() as f64).sqrt())
}

/// Simulated bumper-to-bumper spacing of a harness lane, one value per
/// ground-truth grid point.
pub fn spacing_mop(run: &HarnessRun, lane: usize) -> Result<Vec<f64>> {
    run.outcomes
        .get(lane)
        .map(|o| o.spacing.clone())
        .ok_or_else(|| Error::Evaluation(format!("harness has no lane {lane}")))
}

/// Settings of the simulated approach used for scoring candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub v_limit: f64,
    pub leader_decel_visible: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            v_limit: DEFAULT_SPEED_LIMIT,
            leader_decel_visible: false,
        }
    }
}

/// Spacing RMSE for every candidate from one harness run with a lane per
/// candidate. Collisions and faults score `+inf`.
pub fn evaluate_population(pair: &LeaderFollowerPair, candidates: &[ParameterSet], settings: &EvalSettings) -> Vec<f64> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let harness = match build_calibration_harness(std::slice::from_ref(pair), candidates, settings.v_limit) {
        Ok(h) => h.with_visibility(leader_deceleration_visibility(settings.leader_decel_visible)),
        Err(_) => return vec![f64::INFINITY; candidates.len()],
    };
    let run = harness.run(false);
    run.outcomes
        .iter()
        .map(|o| {
            if o.collided || o.fault {
                return f64::INFINITY;
            }
            match rmse(&pair.spacing, &o.spacing) {
                Ok(v) if v.is_finite() => v,
                _ => f64::INFINITY,
            }
        })
        .collect()
}

/// Calibration objective of one pair over a parameter space.
pub struct PairObjective<'a> {
    pub pair: &'a LeaderFollowerPair,
    pub space: &'a ParamSpace,
    pub settings: EvalSettings,
}

impl BatchObjective for PairObjective<'_> {
    fn evaluate(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        let candidates: Vec<ParameterSet> = xs.iter().map(|x| self.space.decode(x)).collect();
        evaluate_population(self.pair, &candidates, &self.settings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub pop: usize,
    pub iters: usize,
    pub f: f64,
    pub cr: f64,
    pub seed: u64,
    #[serde(default)]
    pub strategy: DeStrategy,
    /// When set, F is redrawn uniformly from this range every generation.
    #[serde(default)]
    pub dither: Option<(f64, f64)>,
}

/// Base vector of the DE mutant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeStrategy {
    /// `x_r1 + F (x_r2 - x_r3)`
    Rand1,
    /// `x_best + F (x_r1 - x_r2)`
    Best1,
    /// `x_i + F (x_best - x_i) + F (x_r1 - x_r2)`
    #[default]
    CurrentToBest1,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            pop: 200,
            iters: 50,
            f: 0.5,
            cr: 0.9,
            seed: 0,
            strategy: DeStrategy::default(),
            dither: Some((0.3, 0.7)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub pop: usize,
    pub iters: usize,
    pub tournament: usize,
    pub alpha: f64,
    /// Per-gene mutation probability; `None` means `1/dim`.
    pub mutation_rate: Option<f64>,
    /// Mutation standard deviation as a fraction of each parameter's range.
    pub mutation_scale: f64,
    pub elitism: usize,
    pub seed: u64,
}


impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            pop: 500,
            iters: 50,
            tournament: 3,
            alpha: 0.5,
            mutation_rate: None,
            mutation_scale: 0.02,
            elitism: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum AlgoConfig {
    De(DeConfig),
    Ga(GaConfig),
}

impl AlgoConfig {
    pub fn seed(&self) -> u64 {
        match self {
            AlgoConfig::De(c) => c.seed,
            AlgoConfig::Ga(c) => c.seed,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlgoConfig::De(_) => "de",
            AlgoConfig::Ga(_) => "ga",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    /// Best value after initialization, then after every iteration.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

fn sanitize(f: Vec<f64>) -> Vec<f64> {
    f.into_iter().map(|v| if v.is_nan() { f64::INFINITY } else { v }).collect()
}

fn argmin(f: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in f.iter().enumerate() {
        if *v < f[best] {
            best = i;
        }
    }
    best
}

fn initial_population(bounds: &ParameterBounds, pop: usize, seed_point: Option<&[f64]>, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut xs: Vec<Vec<f64>> = (0..pop)
        .map(|_| {
            bounds
                .lower
                .iter()
                .zip(&bounds.upper)
                .map(|(lo, hi)| lo + rng.random::<f64>() * (hi - lo))
                .collect()
        })
        .collect();
    if let Some(s) = seed_point {
        xs[0] = bounds.clamp(s);
    }
    xs
}

/// DE/rand/1/bin with reflection at the bounds and greedy replacement.
/// Member 0 starts at `seed_point` when given.
pub fn differential_evolution(
    obj: &dyn BatchObjective,
    bounds: &ParameterBounds,
    seed_point: Option<&[f64]>,
    cfg: &DeConfig,
) -> Result<OptimResult> {
    bounds.validate()?;
    if cfg.pop < 4 {
        return config(format!("population too small: DE needs at least 4 members, got {}", cfg.pop));
    }
    if !(cfg.f > 0.0 && (0.0..=1.0).contains(&cfg.cr)) {
        return config("DE needs F > 0 and CR in [0, 1]");
    }
    if cfg.dither.is_some_and(|(lo, hi)| !(lo > 0.0 && lo <= hi)) {
        return config("DE dither range must satisfy 0 < lo <= hi");
    }
    let dim = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop = initial_population(bounds, cfg.pop, seed_point, &mut rng);
    let mut fit = sanitize(obj.evaluate(&pop));
    let mut evaluations = pop.len();
    let mut trace = vec![fit[argmin(&fit)]];

    for _ in 0..cfg.iters {
        let best = argmin(&fit);
        let f = match cfg.dither {
            Some((lo, hi)) => rng.random_range(lo..=hi),
            None => cfg.f,
        };
        let trials: Vec<Vec<f64>> = (0..cfg.pop)
            .map(|i| {
                let mut pick = |exclude: &[usize]| loop {
                    let r = rng.random_range(0..cfg.pop);
                    if !exclude.contains(&r) {
                        break r;
                    }
                };
                let r1 = pick(&[i]);
                let r2 = pick(&[i, r1]);
                let r3 = pick(&[i, r1, r2]);
                let jrand = rng.random_range(0..dim);
                let mut trial: Vec<f64> = (0..dim)
                    .map(|j| {
                        if j == jrand || rng.random::<f64>() < cfg.cr {
                            match cfg.strategy {
                                DeStrategy::Rand1 => pop[r1][j] + f * (pop[r2][j] - pop[r3][j]),
                                DeStrategy::Best1 => pop[best][j] + f * (pop[r1][j] - pop[r2][j]),
                                DeStrategy::CurrentToBest1 => {
                                    pop[i][j] + f * (pop[best][j] - pop[i][j]) + f * (pop[r1][j] - pop[r2][j])
                                }
                            }
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect();
                bounds.reflect(&mut trial);
                trial
            })
            .collect();
        let tf = sanitize(obj.evaluate(&trials));
        evaluations += trials.len();
        for (i, (x, f)) in trials.into_iter().zip(tf).enumerate() {
            if f <= fit[i] {
                pop[i] = x;
                fit[i] = f;
            }
        }
        trace.push(fit[argmin(&fit)]);
    }
    let best = argmin(&fit);
    Ok(OptimResult {
        best_x: pop[best].clone(),
        best_f: fit[best],
        trace,
        evaluations,
    })
}

/// Produces the next GA generation: elites carried over unchanged, the rest
/// bred by tournament selection, blend crossover and Gaussian mutation.
pub fn ga_generation(
    pop: &[Vec<f64>],
    fit: &[f64],
    bounds: &ParameterBounds,
    cfg: &GaConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let dim = bounds.dim();
    let rate = cfg.mutation_rate.unwrap_or(1.0 / dim as f64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));

    let mut next: Vec<Vec<f64>> = order.iter().take(cfg.elitism.min(pop.len())).map(|&i| pop[i].clone()).collect();
    let tournament = |rng: &mut ChaCha8Rng| {
        let mut best = rng.random_range(0..pop.len());
        for _ in 1..cfg.tournament.max(1) {
            let c = rng.random_range(0..pop.len());
            if fit[c] < fit[best] || (fit[c] == fit[best] && c < best) {
                best = c;
            }
        }
        best
    };
    while next.len() < pop.len() {
        let (p1, p2) = (tournament(rng), tournament(rng));
        let mut child: Vec<f64> = (0..dim)
            .map(|j| {
                let (a, b) = (pop[p1][j], pop[p2][j]);
                let (lo, hi) = (a.min(b), a.max(b));
                let d = hi - lo;
                let u: f64 = rng.random();
                lo - cfg.alpha * d + u * (1.0 + 2.0 * cfg.alpha) * d
            })
            .collect();
        for (j, g) in child.iter_mut().enumerate() {
            if rng.random::<f64>() < rate {
                let sd = cfg.mutation_scale * (bounds.upper[j] - bounds.lower[j]);
                *g += sd * normal.sample(rng);
            }
        }
        bounds.reflect(&mut child);
        next.push(child);
    }
    next
}

/// Real-coded genetic algorithm with elitism. Elites are not re-evaluated.
pub fn genetic_algorithm(
    obj: &dyn BatchObjective,
    bounds: &ParameterBounds,
    seed_point: Option<&[f64]>,
    cfg: &GaConfig,
) -> Result<OptimResult> {
    bounds.validate()?;
    if cfg.pop < 2 {
        return config(format!("population too small: GA needs at least 2 members, got {}", cfg.pop));
    }
    if cfg.tournament == 0 || cfg.alpha < 0.0 || cfg.mutation_scale < 0.0 {
        return config("GA needs tournament size >= 1 and non-negative alpha and mutation scale");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop = initial_population(bounds, cfg.pop, seed_point, &mut rng);
    let mut fit = sanitize(obj.evaluate(&pop));
    let mut evaluations = pop.len();
    let mut trace = vec![fit[argmin(&fit)]];
    let elites = cfg.elitism.min(cfg.pop);

    for _ in 0..cfg.iters {
        let next = ga_generation(&pop, &fit, bounds, cfg, &mut rng);
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
        let mut next_fit: Vec<f64> = order.iter().take(elites).map(|&i| fit[i]).collect();
        let bred = &next[elites..];
        next_fit.extend(sanitize(obj.evaluate(bred)));
        evaluations += bred.len();
        pop = next;
        fit = next_fit;
        trace.push(fit[argmin(&fit)]);
    }
    let best = argmin(&fit);
    Ok(OptimResult {
        best_x: pop[best].clone(),
        best_f: fit[best],
        trace,
        evaluations,
    })
}

pub fn optimize(obj: &dyn BatchObjective, bounds: &ParameterBounds, seed_point: Option<&[f64]>, algo: &AlgoConfig) -> Result<OptimResult> {
    match algo {
        AlgoConfig::De(c) => differential_evolution(obj, bounds, seed_point, c),
        AlgoConfig::Ga(c) => genetic_algorithm(obj, bounds, seed_point, c),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub pair_id: String,
    pub model: ModelSpec,
    pub algo: AlgoConfig,
    pub dt: f64,
    pub bounds: ParameterBounds,
    pub best_params: ParameterSet,
    /// Spacing RMSE of `best_params` (m).
    pub gof: f64,
    pub trace: Vec<f64>,
    pub evaluations: usize,
    pub seed: u64,
    /// Not serialized so that results are byte-reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Seeds the optimizer with the pair's heuristic estimate and searches the
/// model's calibrated subset.
pub fn calibrate_pair(
    pair: &LeaderFollowerPair,
    space: &ParamSpace,
    algo: &AlgoConfig,
    settings: &EvalSettings,
) -> Result<CalibrationResult> {
    let start = Instant::now();
    let estimate = estimate_initial_params(pair, space, settings.v_limit);
    let seed_x = space.encode(&estimate);
    let obj = PairObjective {
        pair,
        space,
        settings: *settings,
    };
    let bounds = space.bounds();
    let res = optimize(&obj, &bounds, Some(&seed_x), algo)?;
    Ok(CalibrationResult {
        pair_id: pair.id.clone(),
        model: space.spec.clone(),
        algo: *algo,
        dt: pair.dt,
        bounds,
        best_params: space.decode(&res.best_x),
        gof: res.best_f,
        trace: res.trace,
        evaluations: res.evaluations,
        seed: algo.seed(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub count: usize,
    pub finite: usize,
    pub mean_rmse: f64,
    pub median_rmse: f64,
    pub min_rmse: f64,
    pub max_rmse: f64,
}

pub fn summarize(results: &[CalibrationResult]) -> CalibrationSummary {
    let mut g: Vec<f64> = results.iter().map(|r| r.gof).filter(|v| v.is_finite()).collect();
    g.sort_by(f64::total_cmp);
    let n = g.len();
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => g[n / 2],
        _ => 0.5 * (g[n / 2 - 1] + g[n / 2]),
    };
    CalibrationSummary {
        count: results.len(),
        finite: n,
        mean_rmse: if n == 0 { f64::NAN } else { g.iter().sum::<f64>() / n as f64 },
        median_rmse: median,
        min_rmse: g.first().copied().unwrap_or(f64::NAN),
        max_rmse: g.last().copied().unwrap_or(f64::NAN),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub de: DeConfig,
    /// GA run for `ga.iters` iterations; its trace is also read at
    /// `matched_iters`.
    pub ga: GaConfig,
    pub matched_iters: usize,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            de: DeConfig::default(),
            ga: GaConfig {
                iters: 300,
                ..GaConfig::default()
            },
            matched_iters: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub pair_id: String,
    pub de: f64,
    pub ga_matched: f64,
    pub ga_extended: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub entries: Vec<ComparisonEntry>,
    pub total: usize,
    /// Pairs where DE is strictly better than GA at the matched budget.
    pub de_wins_matched: usize,
    /// Pairs where the extended GA is strictly better than DE.
    pub ga_wins_extended: usize,
    /// Mean of `(de - ga_extended) / de` over pairs with finite positive DE.
    pub mean_relative_gap: f64,
}

pub fn compare_optimizers(
    pairs: &[LeaderFollowerPair],
    space: &ParamSpace,
    cfg: &ComparisonConfig,
    settings: &EvalSettings,
) -> Result<ComparisonReport> {
    if pairs.len() < 2 {
        return config("optimizer comparison needs at least two pairs");
    }
    if cfg.matched_iters > cfg.ga.iters {
        return config("matched GA budget exceeds the extended one");
    }
    let mut entries = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let de = calibrate_pair(pair, space, &AlgoConfig::De(cfg.de), settings)?;
        let ga = calibrate_pair(pair, space, &AlgoConfig::Ga(cfg.ga), settings)?;
        entries.push(ComparisonEntry {
            pair_id: pair.id.clone(),
            de: de.gof,
            ga_matched: ga.trace[cfg.matched_iters],
            ga_extended: ga.gof,
        });
    }
    let gaps: Vec<f64> = entries
        .iter()
        .filter(|e| e.de.is_finite() && e.de > 0.0 && e.ga_extended.is_finite())
        .map(|e| (e.de - e.ga_extended) / e.de)
        .collect();
    Ok(ComparisonReport {
        total: entries.len(),
        de_wins_matched: entries.iter().filter(|e| e.de < e.ga_matched).count(),
        ga_wins_extended: entries.iter().filter(|e| e.ga_extended < e.de).count(),
        mean_relative_gap: if gaps.is_empty() { 0.0 } else { gaps.iter().sum::<f64>() / gaps.len() as f64 },
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_bounds(d: usize) -> ParameterBounds {
        ParameterBounds::unnamed(vec![-5.0; d], vec![5.0; d]).unwrap()
    }

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        let r = rmse(&[0.0, 0.0, 0.0], &[0.0, 3.0, 4.0]).unwrap();
        assert!((r - (25.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 2.88675).abs() < 1e-5);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn de_solves_sphere() {
        let r = differential_evolution(&FnObjective(sphere), &sphere_bounds(3), None, &DeConfig::default()).unwrap();
        assert!(r.best_f < 1e-6, "{}", r.best_f);
        assert_eq!(r.trace.len(), 51);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.evaluations, 200 * 51);
    }

    #[test]
    fn de_seeded_optimum_gives_zero_trace_start() {
        let r = differential_evolution(
            &FnObjective(sphere),
            &sphere_bounds(3),
            Some(&[0.0, 0.0, 0.0]),
            &DeConfig { iters: 2, ..DeConfig::default() },
        )
        .unwrap();
        assert_eq!(r.trace[0], 0.0);
    }

    #[test]
    fn de_rejects_tiny_population() {
        let e = differential_evolution(&FnObjective(sphere), &sphere_bounds(2), None, &DeConfig { pop: 3, ..DeConfig::default() })
            .unwrap_err();
        assert!(e.to_string().contains("population too small"));
    }

    #[test]
    fn de_rejects_bad_dither() {
        let cfg = DeConfig { dither: Some((0.7, 0.3)), ..DeConfig::default() };
        assert!(matches!(differential_evolution(&FnObjective(sphere), &sphere_bounds(2), None, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn every_de_strategy_solves_sphere() {
        for strategy in [DeStrategy::Rand1, DeStrategy::Best1, DeStrategy::CurrentToBest1] {
            let cfg = DeConfig { strategy, dither: None, f: 0.8, iters: 100, ..DeConfig::default() };
            let r = differential_evolution(&FnObjective(sphere), &sphere_bounds(3), None, &cfg).unwrap();
            assert!(r.best_f < 1e-4, "{strategy:?}: {}", r.best_f);
        }
    }

    #[test]
    fn invalid_bounds_are_config_errors() {
        assert!(ParameterBounds::unnamed(vec![1.0], vec![1.0]).is_err());
        assert!(ParameterBounds::unnamed(vec![], vec![]).is_err());
        let b = ParameterBounds {
            names: vec!["x".into()],
            lower: vec![2.0],
            upper: vec![1.0],
        };
        let r = differential_evolution(&FnObjective(sphere), &b, None, &DeConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    struct Recorder<'a> {
        bounds: &'a ParameterBounds,
        seen: std::sync::Mutex<usize>,
    }

    impl BatchObjective for Recorder<'_> {
        fn evaluate(&self, xs: &[Vec<f64>]) -> Vec<f64> {
            for x in xs {
                assert!(self.bounds.contains(x), "{x:?}");
            }
            *self.seen.lock().unwrap() += xs.len();
            xs.iter().map(|x| sphere(x) + 1.0).collect()
        }
    }

    #[test]
    fn optimizers_stay_within_bounds() {
        let b = ParameterBounds::unnamed(vec![0.0, -1.0, 10.0], vec![0.001, 1.0, 1000.0]).unwrap();
        let rec = Recorder {
            bounds: &b,
            seen: Default::default(),
        };
        differential_evolution(&rec, &b, Some(&[5.0, 5.0, 5.0]), &DeConfig { pop: 100, iters: 500, ..Default::default() }).unwrap();
        let de_seen = *rec.seen.lock().unwrap();
        assert!(de_seen >= 50_000);
        genetic_algorithm(&rec, &b, None, &GaConfig { pop: 100, iters: 500, mutation_scale: 3.0, ..Default::default() }).unwrap();
        assert!(*rec.seen.lock().unwrap() >= de_seen + 100 * 500 - 500);
    }

    #[test]
    fn reflection_lands_inside() {
        for v in [-3.7, -1.0, 0.0, 0.5, 1.0, 1.2, 7.9, 1e9, -1e9] {
            let r = reflect_into(v, 0.0, 1.0);
            assert!((0.0..=1.0).contains(&r), "{v} -> {r}");
        }
        assert!((reflect_into(1.2, 0.0, 1.0) - 0.8).abs() < 1e-12);
        assert!((reflect_into(-0.3, 0.0, 1.0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ga_solves_sphere_with_monotone_trace() {
        let r = genetic_algorithm(
            &FnObjective(sphere),
            &sphere_bounds(3),
            None,
            &GaConfig { iters: 200, ..GaConfig::default() },
        )
        .unwrap();
        assert!(r.best_f < 1e-4, "{}", r.best_f);
        for seed in 0..5 {
            let r = genetic_algorithm(
                &FnObjective(|x: &[f64]| x.iter().map(|v| v.abs().sqrt()).sum()),
                &sphere_bounds(4),
                None,
                &GaConfig { pop: 40, iters: 60, seed, ..GaConfig::default() },
            )
            .unwrap();
            assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn ga_clones_without_mutation_are_a_fixed_point() {
        let b = sphere_bounds(3);
        let pop = vec![vec![1.0, -2.0, 0.5]; 20];
        let fit = vec![3.0; 20];
        let cfg = GaConfig {
            pop: 20,
            mutation_rate: Some(0.0),
            ..GaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(ga_generation(&pop, &fit, &b, &cfg, &mut rng), pop);
    }

    #[test]
    fn optimizers_are_deterministic_per_seed() {
        let b = sphere_bounds(3);
        let cfg = DeConfig { pop: 30, iters: 20, seed: 9, ..Default::default() };
        let a = differential_evolution(&FnObjective(sphere), &b, None, &cfg).unwrap();
        let c = differential_evolution(&FnObjective(sphere), &b, None, &cfg).unwrap();
        assert_eq!(a, c);
        let g = GaConfig { pop: 30, iters: 20, seed: 9, ..Default::default() };
        assert_eq!(
            genetic_algorithm(&FnObjective(sphere), &b, None, &g).unwrap(),
            genetic_algorithm(&FnObjective(sphere), &b, None, &g).unwrap()
        );
    }

    #[test]
    fn spaces_round_trip() {
        for spec in [
            ModelSpec::Krauss,
            ModelSpec::Idm,
            ModelSpec::Iidm,
            ModelSpec::Eidm,
            ModelSpec::EidmSched { speeds: vec![5.0, 12.0] },
        ] {
            let s = ParamSpace::for_model(&spec, 0.04).unwrap();
            let mid = s.mid();
            let p = s.decode(&mid);
            p.validate(0.04).unwrap();
            assert_eq!(s.encode(&p), mid, "{spec}");
        }
        let s = ParamSpace::for_model(&ModelSpec::EidmSched { speeds: vec![5.0, 12.0] }, 0.04).unwrap();
        assert_eq!(s.names.last().unwrap(), "a_sched_1");
        assert!(!s.names.contains(&"a_max".to_string()));
        let p = s.decode(&[1.0, 1.0, 4.0, 0.3, 0.5, 0.5, 1.0, 1.5, 3.0]);
        assert_eq!(p.schedule().unwrap().breakpoints(), &[(5.0, 1.5), (12.0, 3.0)]);
    }

    #[test]
    fn model_spec_parsing_and_labels() {
        assert_eq!(ModelSpec::parse("eidm", &[]).unwrap(), ModelSpec::Eidm);
        assert_eq!(ModelSpec::parse("eidm_sched", &[5.0, 12.0]).unwrap().to_string(), "EIDM_5_12");
        assert_eq!(ModelSpec::parse("eidm_sched", &[4.0, 9.0, 14.0]).unwrap().to_string(), "EIDM_4_9_14");
        assert!(ModelSpec::parse("eidm_sched", &[5.0]).is_err());
        assert!(ModelSpec::parse("eidm_sched", &[12.0, 5.0]).is_err());
        assert!(ModelSpec::parse("gipps", &[]).is_err());
        assert_eq!(ModelSpec::Krauss.to_string(), "KRAUSS");
    }
}
