//! Car-following laws.
//!
//! Every function here is pure: driver memory travels in and out as a
//! [`DriverState`] value. Accelerations are floored at `-EMERGENCY_DECEL`;
//! a returned value equal to that floor means the law asked for more.

mod params;

pub use params::{
    AmaxSchedule, EidmParams, IdmParams, KraussParams, ModelKind, ParameterSet, DEFAULT_DT,
    DEFAULT_MIN_GAP,
};

use crate::error::{config, Error, Result};

/// Deceleration floor (m/s²). Commands hitting it count as emergency stops.
pub const EMERGENCY_DECEL: f64 = 9.0;
/// Below this speed (m/s) a vehicle counts as stopped.
pub const STOP_SPEED: f64 = 0.1;
/// Gap opening (m) beyond the standstill gap that triggers a drive-off.
pub const STARTUP_GAP_MARGIN: f64 = 0.25;
/// Leader speed (m/s) that triggers a drive-off.
pub const STARTUP_LEADER_SPEED: f64 = 0.1;

const TIME_EPS: f64 = 1e-9;
const MIN_PERCEIVED_GAP: f64 = 1e-3;

/// What the follower sees at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowerContext {
    pub v: f64,
    /// Bumper-to-bumper gap to the leader; `f64::INFINITY` on a free road.
    pub gap: f64,
    pub v_leader: f64,
    pub v_limit: f64,
    pub t: f64,
    /// Identity of the object ahead. A change forces an EIDM perception refresh.
    pub leader_id: Option<u64>,
}

impl FollowerContext {
    pub fn free(v: f64, v_limit: f64, t: f64) -> Self {
        FollowerContext {
            v,
            gap: f64::INFINITY,
            v_leader: 0.0,
            v_limit,
            t,
            leader_id: None,
        }
    }

    pub fn following(v: f64, gap: f64, v_leader: f64, v_limit: f64, t: f64) -> Self {
        FollowerContext {
            v,
            gap,
            v_leader,
            v_limit,
            t,
            leader_id: None,
        }
    }

    pub fn is_free(&self) -> bool {
        self.gap.is_infinite()
    }
}

/// Per-driver memory carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverState {
    pub stopped_since: Option<f64>,
    /// Time since the drive-off trigger; `None` outside a start-up sequence.
    pub startup_elapsed: Option<f64>,
    pub gap_at_stop: f64,
    pub perceived_gap: f64,
    pub perceived_dv: f64,
    pub perceived_leader_speed: f64,
    pub perceived_leader: Option<u64>,
    pub last_perception_time: f64,
    /// Distance the driver has covered since the last perception (m).
    pub own_travel: f64,
    pub last_update_time: f64,
    pub last_action_time: f64,
    pub held_acceleration: f64,
}

impl Default for DriverState {
    fn default() -> Self {
        DriverState {
            stopped_since: None,
            startup_elapsed: None,
            gap_at_stop: 0.0,
            perceived_gap: f64::INFINITY,
            perceived_dv: 0.0,
            perceived_leader_speed: 0.0,
            perceived_leader: None,
            last_perception_time: f64::NEG_INFINITY,
            own_travel: 0.0,
            last_update_time: f64::NEG_INFINITY,
            last_action_time: f64::NEG_INFINITY,
            held_acceleration: 0.0,
        }
    }
}

/// Whether Krauss followers know the braking capability of the vehicle ahead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecelVisibility {
    pub leader_known: bool,
}

impl DecelVisibility {
    pub fn decel_for(&self, own_b: f64, leader_b: Option<f64>) -> f64 {
        match (self.leader_known, leader_b) {
            (true, Some(b)) => b,
            _ => own_b,
        }
    }
}

pub fn leader_deceleration_visibility(enabled: bool) -> DecelVisibility {
    DecelVisibility {
        leader_known: enabled,
    }
}

pub fn amax_lookup(v: f64, sched: &AmaxSchedule) -> Result<f64> {
    let bps = sched.breakpoints();
    let (first, last) = match (bps.first(), bps.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return config("empty a_max schedule"),
    };
    if v <= first.0 {
        return Ok(first.1);
    }
    if v >= last.0 {
        return Ok(last.1);
    }
    let i = bps.partition_point(|&(vi, _)| vi <= v);
    let (v0, a0) = bps[i - 1];
    let (v1, a1) = bps[i];
    if v == v0 {
        return Ok(a0);
    }
    Ok(a0 + (a1 - a0) * (v - v0) / (v1 - v0))
}

/// Dynamic desired gap `s*`.
pub fn desired_gap(v: f64, dv: f64, p: &IdmParams) -> f64 {
    p.s0 + (v * p.t_headway + v * dv / (2.0 * (p.a_max * p.b).sqrt())).max(0.0)
}

fn floor_decel(a: f64) -> f64 {
    a.max(-EMERGENCY_DECEL)
}

fn require_gap(ctx: &FollowerContext) -> Result<()> {
    if ctx.gap <= 0.0 || ctx.gap.is_nan() {
        Err(Error::CollisionState { gap: ctx.gap })
    } else {
        Ok(())
    }
}

pub fn idm_acceleration(ctx: &FollowerContext, p: &IdmParams) -> Result<f64> {
    require_gap(ctx)?;
    let v0 = p.desired_speed(ctx.v_limit);
    let interaction = if ctx.is_free() {
        0.0
    } else {
        let s_star = desired_gap(ctx.v, ctx.v - ctx.v_leader, p);
        (s_star / ctx.gap).powi(2)
    };
    let a = p.a_max * (1.0 - (ctx.v / v0).powf(p.delta) - interaction);
    Ok(floor_decel(a))
}

/// Improved IDM, with separate regimes below and above the desired speed.
pub fn iidm_acceleration(ctx: &FollowerContext, p: &IdmParams) -> Result<f64> {
    require_gap(ctx)?;
    Ok(floor_decel(iidm_raw(ctx, p)))
}

fn iidm_raw(ctx: &FollowerContext, p: &IdmParams) -> f64 {
    let v0 = p.desired_speed(ctx.v_limit);
    let z = if ctx.is_free() {
        0.0
    } else {
        desired_gap(ctx.v, ctx.v - ctx.v_leader, p) / ctx.gap
    };
    if ctx.v <= v0 {
        let a_free = p.a_max * (1.0 - (ctx.v / v0).powf(p.delta));
        if z >= 1.0 {
            p.a_max * (1.0 - z * z)
        } else if a_free <= 0.0 {
            a_free
        } else {
            a_free * (1.0 - z.powf(2.0 * p.a_max / a_free))
        }
    } else {
        let a_free = -p.b * (1.0 - (v0 / ctx.v).powf(p.a_max * p.delta / p.b));
        if z >= 1.0 {
            a_free + p.a_max * (1.0 - z * z)
        } else {
            a_free
        }
    }
}

/// Extended IDM: speed-dependent `a_max`, perception refreshed every
/// `t_reac`, a start-up delay and an acceleration ramp after drive-off.
pub fn eidm_acceleration(
    ctx: &FollowerContext,
    state: &DriverState,
    p: &EidmParams,
    dt: f64,
) -> Result<(f64, DriverState)> {
    require_gap(ctx)?;
    let mut s = state.clone();

    let mut base = p.base;
    if let Some(sched) = &p.amax_schedule {
        base.a_max = amax_lookup(ctx.v, sched)?;
    }
    // A situation that already needs more than comfortable braking is
    // noticed at once, whatever the reaction time.
    let critical = !ctx.is_free() && iidm_raw(ctx, &base) < -base.b;
    let refresh = !s.last_perception_time.is_finite()
        || ctx.t - s.last_perception_time >= p.t_reac - TIME_EPS
        || ctx.leader_id != s.perceived_leader
        || critical;
    if s.last_update_time.is_finite() {
        s.own_travel += ctx.v * (ctx.t - s.last_update_time).max(0.0);
    }
    s.last_update_time = ctx.t;
    if refresh {
        s.perceived_gap = ctx.gap;
        s.perceived_dv = ctx.v - ctx.v_leader;
        s.perceived_leader_speed = ctx.v_leader;
        s.perceived_leader = ctx.leader_id;
        s.last_perception_time = ctx.t;
        s.own_travel = 0.0;
    }
    // Between refreshes the driver knows how far they moved and assumes the
    // leader kept its last perceived speed.
    let age = ctx.t - s.last_perception_time;
    let gap = if s.perceived_gap.is_infinite() {
        f64::INFINITY
    } else {
        (s.perceived_gap + s.perceived_leader_speed * age - s.own_travel).max(MIN_PERCEIVED_GAP)
    };
    let v_leader = s.perceived_leader_speed;
    let perceived = FollowerContext {
        gap,
        v_leader,
        ..*ctx
    };
    let a = iidm_raw(&perceived, &base);

    let stopped = ctx.v < STOP_SPEED;
    if let Some(e) = s.startup_elapsed.as_mut() {
        *e += dt;
    } else if stopped {
        if s.stopped_since.is_none() {
            s.stopped_since = Some(ctx.t);
            s.gap_at_stop = gap;
        }
        let opened = gap > s.gap_at_stop.max(base.s0) + STARTUP_GAP_MARGIN;
        // The leader pulling away is seen directly, not through the held percept.
        if gap.is_infinite() || opened || ctx.v_leader > STARTUP_LEADER_SPEED {
            s.startup_elapsed = Some(0.0);
        } else {
            // Waiting at standstill: braking allowed, creeping is not.
            let hold = a.min(-ctx.v / dt);
            return Ok((floor_decel(hold), s));
        }
    } else {
        s.stopped_since = None;
    }

    let Some(elapsed) = s.startup_elapsed else {
        return Ok((floor_decel(a), s));
    };
    if elapsed < p.t_start {
        return Ok((0.0, s));
    }
    let tau = elapsed - p.t_start;
    let out = if a > 0.0 { a * startup_ramp(tau, p) } else { a };
    if tau >= p.t_amax {
        s.startup_elapsed = None;
        s.stopped_since = None;
    }
    Ok((floor_decel(out), s))
}

/// Fraction of the acceleration available `tau` seconds after the start-up delay.
pub fn startup_ramp(tau: f64, p: &EidmParams) -> f64 {
    if p.t_amax <= 0.0 {
        return 1.0;
    }
    p.m_bg + (1.0 - p.m_bg) * (tau / p.t_amax).clamp(0.0, 1.0)
}

/// Krauss safe speed; infinite on a free road, never negative.
pub fn krauss_safe_speed(ctx: &FollowerContext, p: &KraussParams) -> f64 {
    if ctx.is_free() {
        return f64::INFINITY;
    }
    let v_l = ctx.v_leader;
    let v_safe = v_l + (ctx.gap - v_l * p.tau) / ((v_l + ctx.v) / (2.0 * p.b) + p.tau);
    v_safe.max(0.0)
}

/// One Krauss speed update. `eta` is the dawdling draw in `[0, 1]`; it has no
/// effect when `epsilon` is zero.
pub fn krauss_step(ctx: &FollowerContext, p: &KraussParams, dt: f64, eta: f64) -> f64 {
    let v_des = p
        .desired_speed(ctx.v_limit)
        .min(ctx.v + p.a_max * dt)
        .min(krauss_safe_speed(ctx, p));
    (v_des - p.epsilon * p.a_max * eta * dt).max(0.0)
}

/// Acceleration command for any model, honoring the action step: between
/// action points the last command is held. `leader_b` is the deceleration of
/// the vehicle ahead, used by Krauss when `vis` allows it.
pub fn decide(
    ctx: &FollowerContext,
    state: &DriverState,
    params: &ParameterSet,
    dt: f64,
    vis: DecelVisibility,
    leader_b: Option<f64>,
    eta: f64,
) -> Result<(f64, DriverState)> {
    let action = !state.last_action_time.is_finite()
        || ctx.t - state.last_action_time >= params.t_ap() - TIME_EPS;

    let (a, mut next) = match params {
        ParameterSet::Eidm(p) => eidm_acceleration(ctx, state, p, dt)?,
        _ if !action => return Ok((state.held_acceleration, state.clone())),
        ParameterSet::Idm(p) => (idm_acceleration(ctx, p)?, state.clone()),
        ParameterSet::Iidm(p) => (iidm_acceleration(ctx, p)?, state.clone()),
        ParameterSet::Krauss(p) => {
            require_gap(ctx)?;
            let mut p = *p;
            p.b = vis.decel_for(p.b, leader_b);
            let v_next = krauss_step(ctx, &p, dt, eta);
            (floor_decel((v_next - ctx.v) / dt), state.clone())
        }
    };
    if action {
        next.last_action_time = ctx.t;
        next.held_acceleration = a;
        Ok((a, next))
    } else {
        Ok((state.held_acceleration, next))
    }
}
