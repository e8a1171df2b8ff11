//! Parameter types for the supported car-following laws and their JSON form.
//!
//! A parameter set serializes as
//! `{"model": "eidm", "params": {"a_max": 2.6, ...}, "amax_schedule": [[5.0, 2.1], [12.0, 1.3]]}`.
//! Missing parameters take the model defaults, unknown names are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Fixed minimum standstill gap (m). Not part of any calibrated subset.
pub const DEFAULT_MIN_GAP: f64 = 2.0;

/// Simulation step the defaults are tuned for (s).
pub const DEFAULT_DT: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Krauss,
    Idm,
    Iidm,
    Eidm,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Krauss => "krauss",
            ModelKind::Idm => "idm",
            ModelKind::Iidm => "iidm",
            ModelKind::Eidm => "eidm",
        }
    }

    /// Defaults modelled on common simulator settings, with every stochastic
    /// term switched off and the action step equal to `dt`.
    pub fn default_params(&self, dt: f64) -> ParameterSet {
        match self {
            ModelKind::Krauss => ParameterSet::Krauss(KraussParams::default_for(dt)),
            ModelKind::Idm => ParameterSet::Idm(IdmParams::default_for(dt)),
            ModelKind::Iidm => ParameterSet::Iidm(IdmParams::default_for(dt)),
            ModelKind::Eidm => ParameterSet::Eidm(EidmParams::default_for(dt)),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "krauss" => Ok(ModelKind::Krauss),
            "idm" => Ok(ModelKind::Idm),
            "iidm" => Ok(ModelKind::Iidm),
            "eidm" => Ok(ModelKind::Eidm),
            other => config(format!("unknown model kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmParams {
    pub a_max: f64,
    pub b: f64,
    /// Desired time headway `T` (s).
    pub t_headway: f64,
    pub delta: f64,
    /// Speed factor applied to the legal limit.
    pub f_v: f64,
    pub s0: f64,
    /// Action step length (s).
    pub t_ap: f64,
}

impl IdmParams {
    pub fn default_for(dt: f64) -> Self {
        IdmParams {
            a_max: 2.6,
            b: 4.5,
            t_headway: 1.0,
            delta: 4.0,
            f_v: 1.0,
            s0: DEFAULT_MIN_GAP,
            t_ap: dt,
        }
    }

    pub fn desired_speed(&self, v_limit: f64) -> f64 {
        self.f_v * v_limit
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        check(self.a_max > 0.0, "a_max must be > 0")?;
        check(self.b > 0.0, "b must be > 0")?;
        check(self.t_headway >= 0.0, "T must be >= 0")?;
        check(self.delta > 0.0, "delta must be > 0")?;
        check(self.f_v > 0.0, "F_v must be > 0")?;
        check(self.s0 >= 0.0, "s0 must be >= 0")?;
        check(self.t_ap >= dt - 1e-9, "t_AP must be >= dt")
    }
}

/// Speed-dependent maximum acceleration: constant below the first and above
/// the last breakpoint, linear in between.
#[derive(Debug, Clone, PartialEq)]
pub struct AmaxSchedule {
    breakpoints: Vec<(f64, f64)>,
}

impl AmaxSchedule {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return config("a_max schedule needs at least one breakpoint");
        }
        if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return config("a_max schedule speeds must be strictly increasing");
        }
        if breakpoints.iter().any(|&(v, a)| !(a > 0.0) || !v.is_finite()) {
            return config("a_max schedule accelerations must be > 0");
        }
        Ok(AmaxSchedule { breakpoints })
    }

    /// Schedule whose accelerations are all `a` at the given speeds.
    pub fn flat(speeds: &[f64], a: f64) -> Result<Self> {
        Self::new(speeds.iter().map(|&v| (v, a)).collect())
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.breakpoints.iter().map(|b| b.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EidmParams {
    pub base: IdmParams,
    pub t_reac: f64,
    pub t_start: f64,
    /// Start-up begin factor, fraction of the acceleration available at drive-off.
    pub m_bg: f64,
    pub t_amax: f64,
    pub amax_schedule: Option<AmaxSchedule>,
}

impl EidmParams {
    pub fn default_for(dt: f64) -> Self {
        EidmParams {
            base: IdmParams::default_for(dt),
            t_reac: 0.5,
            t_start: 0.5,
            m_bg: 0.7,
            t_amax: 1.2,
            amax_schedule: None,
        }
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        self.base.validate(dt)?;
        check(self.t_reac >= 0.0, "t_reac must be >= 0")?;
        check(self.t_start >= 0.0, "t_start must be >= 0")?;
        check((0.0..=1.0).contains(&self.m_bg), "M_bg must lie in [0, 1]")?;
        check(self.t_amax >= 0.0, "t_amax must be >= 0")?;
        if let Some(s) = &self.amax_schedule {
            AmaxSchedule::new(s.breakpoints.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KraussParams {
    pub a_max: f64,
    pub b: f64,
    /// Driver headway / reaction time (s).
    pub tau: f64,
    pub f_v: f64,
    pub t_ap: f64,
    /// Dawdle factor; zero keeps the update deterministic.
    pub epsilon: f64,
}

impl KraussParams {
    pub fn default_for(dt: f64) -> Self {
        KraussParams {
            a_max: 2.6,
            b: 4.5,
            tau: 1.0,
            f_v: 1.0,
            t_ap: dt,
            epsilon: 0.0,
        }
    }

    pub fn desired_speed(&self, v_limit: f64) -> f64 {
        self.f_v * v_limit
    }

    /// Checks every invariant except `tau >= dt`, which is reported by
    /// [`KraussParams::headway_safe`] so that unsafe settings stay simulable.
    pub fn validate(&self, dt: f64) -> Result<()> {
        check(self.a_max > 0.0, "a_max must be > 0")?;
        check(self.b > 0.0, "b must be > 0")?;
        check(self.tau > 0.0, "tau must be > 0")?;
        check(self.f_v > 0.0, "F_v must be > 0")?;
        check(self.t_ap >= dt - 1e-9, "t_AP must be >= dt")?;
        check((0.0..=1.0).contains(&self.epsilon), "epsilon must lie in [0, 1]")
    }

    pub fn headway_safe(&self, dt: f64) -> bool {
        self.tau >= dt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParameterSet {
    Krauss(KraussParams),
    Idm(IdmParams),
    Iidm(IdmParams),
    Eidm(EidmParams),
}

impl ParameterSet {
    pub fn kind(&self) -> ModelKind {
        match self {
            ParameterSet::Krauss(_) => ModelKind::Krauss,
            ParameterSet::Idm(_) => ModelKind::Idm,
            ParameterSet::Iidm(_) => ModelKind::Iidm,
            ParameterSet::Eidm(_) => ModelKind::Eidm,
        }
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        match self {
            ParameterSet::Krauss(p) => p.validate(dt),
            ParameterSet::Idm(p) | ParameterSet::Iidm(p) => p.validate(dt),
            ParameterSet::Eidm(p) => p.validate(dt),
        }
    }

    pub fn t_ap(&self) -> f64 {
        match self {
            ParameterSet::Krauss(p) => p.t_ap,
            ParameterSet::Idm(p) | ParameterSet::Iidm(p) => p.t_ap,
            ParameterSet::Eidm(p) => p.base.t_ap,
        }
    }

    pub fn decel(&self) -> f64 {
        match self {
            ParameterSet::Krauss(p) => p.b,
            ParameterSet::Idm(p) | ParameterSet::Iidm(p) => p.b,
            ParameterSet::Eidm(p) => p.base.b,
        }
    }

    /// Acceleration at standstill (first schedule value for scheduled EIDM).
    pub fn accel(&self) -> f64 {
        match self {
            ParameterSet::Krauss(p) => p.a_max,
            ParameterSet::Idm(p) | ParameterSet::Iidm(p) => p.a_max,
            ParameterSet::Eidm(p) => match &p.amax_schedule {
                Some(s) => s.breakpoints[0].1,
                None => p.base.a_max,
            },
        }
    }

    pub fn headway(&self) -> f64 {
        match self {
            ParameterSet::Krauss(p) => p.tau,
            ParameterSet::Idm(p) | ParameterSet::Iidm(p) => p.t_headway,
            ParameterSet::Eidm(p) => p.base.t_headway,
        }
    }

    /// Standstill gap used for insertion checks. Krauss has none of its own.
    pub fn min_gap(&self) -> f64 {
        match self {
            ParameterSet::Krauss(_) => DEFAULT_MIN_GAP,
            ParameterSet::Idm(p) | ParameterSet::Iidm(p) => p.s0,
            ParameterSet::Eidm(p) => p.base.s0,
        }
    }

    pub fn desired_speed(&self, v_limit: f64) -> f64 {
        match self {
            ParameterSet::Krauss(p) => p.desired_speed(v_limit),
            ParameterSet::Idm(p) | ParameterSet::Iidm(p) => p.desired_speed(v_limit),
            ParameterSet::Eidm(p) => p.base.desired_speed(v_limit),
        }
    }

    /// Names of the scalar parameters this model carries, in canonical order.
    pub fn names(&self) -> &'static [&'static str] {
        match self.kind() {
            ModelKind::Krauss => &["a_max", "b", "tau", "F_v", "t_AP", "epsilon"],
            ModelKind::Idm | ModelKind::Iidm => &["a_max", "b", "T", "delta", "F_v", "s0", "t_AP"],
            ModelKind::Eidm => &[
                "a_max", "b", "T", "delta", "F_v", "s0", "t_AP", "t_reac", "t_start", "M_bg",
                "t_amax",
            ],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match self {
            ParameterSet::Krauss(p) => match name {
                "a_max" => Some(p.a_max),
                "b" => Some(p.b),
                "tau" => Some(p.tau),
                "F_v" => Some(p.f_v),
                "t_AP" => Some(p.t_ap),
                "epsilon" => Some(p.epsilon),
                _ => None,
            },
            ParameterSet::Idm(p) | ParameterSet::Iidm(p) => idm_get(p, name),
            ParameterSet::Eidm(p) => match name {
                "t_reac" => Some(p.t_reac),
                "t_start" => Some(p.t_start),
                "M_bg" => Some(p.m_bg),
                "t_amax" => Some(p.t_amax),
                _ => idm_get(&p.base, name),
            },
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match self {
            ParameterSet::Krauss(p) => match name {
                "a_max" => Some(&mut p.a_max),
                "b" => Some(&mut p.b),
                "tau" => Some(&mut p.tau),
                "F_v" => Some(&mut p.f_v),
                "t_AP" => Some(&mut p.t_ap),
                "epsilon" => Some(&mut p.epsilon),
                _ => None,
            },
            ParameterSet::Idm(p) | ParameterSet::Iidm(p) => idm_slot(p, name),
            ParameterSet::Eidm(p) => match name {
                "t_reac" => Some(&mut p.t_reac),
                "t_start" => Some(&mut p.t_start),
                "M_bg" => Some(&mut p.m_bg),
                "t_amax" => Some(&mut p.t_amax),
                _ => idm_slot(&mut p.base, name),
            },
        };
        match slot {
            Some(s) => {
                *s = value;
                Ok(())
            }
            None => config(format!("model {} has no parameter '{name}'", self.kind())),
        }
    }

    pub fn schedule(&self) -> Option<&AmaxSchedule> {
        match self {
            ParameterSet::Eidm(p) => p.amax_schedule.as_ref(),
            _ => None,
        }
    }

    pub fn set_schedule(&mut self, schedule: Option<AmaxSchedule>) -> Result<()> {
        match self {
            ParameterSet::Eidm(p) => {
                p.amax_schedule = schedule;
                Ok(())
            }
            _ if schedule.is_none() => Ok(()),
            _ => config("only the eidm model supports an a_max schedule"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("parameter sets always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn idm_get(p: &IdmParams, name: &str) -> Option<f64> {
    match name {
        "a_max" => Some(p.a_max),
        "b" => Some(p.b),
        "T" => Some(p.t_headway),
        "delta" => Some(p.delta),
        "F_v" => Some(p.f_v),
        "s0" => Some(p.s0),
        "t_AP" => Some(p.t_ap),
        _ => None,
    }
}

fn idm_slot<'a>(p: &'a mut IdmParams, name: &str) -> Option<&'a mut f64> {
    match name {
        "a_max" => Some(&mut p.a_max),
        "b" => Some(&mut p.b),
        "T" => Some(&mut p.t_headway),
        "delta" => Some(&mut p.delta),
        "F_v" => Some(&mut p.f_v),
        "s0" => Some(&mut p.s0),
        "t_AP" => Some(&mut p.t_ap),
        _ => None,
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        config(msg)
    }
}

#[derive(Serialize, Deserialize)]
struct ParameterDoc {
    model: ModelKind,
    params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    amax_schedule: Option<Vec<[f64; 2]>>,
}

impl Serialize for ParameterSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let params = self
            .names()
            .iter()
            .map(|&n| (n.to_string(), self.get(n).unwrap_or(f64::NAN)))
            .collect();
        let amax_schedule = self
            .schedule()
            .map(|s| s.breakpoints().iter().map(|&(v, a)| [v, a]).collect());
        ParameterDoc {
            model: self.kind(),
            params,
            amax_schedule,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParameterSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = ParameterDoc::deserialize(deserializer)?;
        let mut set = doc.model.default_params(DEFAULT_DT);
        for (name, value) in &doc.params {
            set.set(name, *value).map_err(D::Error::custom)?;
        }
        if let Some(bps) = doc.amax_schedule {
            let sched = AmaxSchedule::new(bps.into_iter().map(|[v, a]| (v, a)).collect())
                .map_err(D::Error::custom)?;
            set.set_schedule(Some(sched)).map_err(D::Error::custom)?;
        }
        Ok(set)
    }
}
