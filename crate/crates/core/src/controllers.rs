//! Goal-satisfaction controllers (absolute and relative targets), the
//! safety supervisor, MPC highway tracking, and the platoon follower law.
//!
//! The goal controllers run in three phases: pure pursuit while outside the
//! backward reachable set of the target, gradient-extracted bang-bang control
//! once inside (lock-in), and zero control on arrival in the target box.

use crate::highways::Highway;
use crate::reachability::{BackwardReachableSet, DynamicsKind, Mode as BrsMode, Player, ReachError};
use crate::vehicles::{relative_state, SafetyCheckSet, VehicleState, World};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("required reachable set {0} is not available")]
    BrsMissing(&'static str),
    #[error("reachable set mismatch: {0}")]
    WrongBrs(String),
    #[error("slot index {0} is not a follower slot (need index >= 2)")]
    BadSlot(usize),
    #[error("vehicle {0} is not in the world")]
    UnknownVehicle(usize),
    #[error("horizon {horizon} is not a positive multiple of dt {dt}")]
    InfeasibleHorizon { horizon: f64, dt: f64 },
    #[error(transparent)]
    Reach(#[from] ReachError),
}

/// Shared controller inputs: reachable-set handles, horizons, and gains.
#[derive(Debug, Clone, Copy)]
pub struct ControllerContext<'a> {
    /// Goal set for merging onto a highway (absolute dynamics, goal mode),
    /// solved in the target-centered position frame for the highway's
    /// cruise velocity.
    pub v_h: Option<&'a BackwardReachableSet>,
    /// Goal set for joining a platoon slot (relative dynamics with the
    /// reference vehicle coasting, goal mode).
    pub v_p: Option<&'a BackwardReachableSet>,
    /// Safety set (relative dynamics, game mode).
    pub v_s: Option<&'a BackwardReachableSet>,
    /// Goal-controller horizon T in seconds.
    pub goal_horizon: f64,
    /// Safety-check horizon t_d in seconds.
    pub safety_horizon: f64,
    /// Pairwise separation distance d in meters (half-width of the unsafe
    /// box on each relative-position axis).
    pub safety_distance: f64,
    /// Safety-value level at which a pair engages the evasive controller.
    /// Engaging exactly at zero is too late in discrete time: the value can
    /// fall by (relative speed)·dt between samples, and the interpolated
    /// level set itself wobbles by a fraction of a grid cell, so a small
    /// positive margin is needed to keep the physical box untouched.
    pub safety_engage: f64,
    /// Hysteresis margin for disengaging the safety controller. An engaged
    /// pair stays engaged until the value climbs above this level (above
    /// `safety_engage`); releasing at the engagement level lets the nominal
    /// controller drive straight back to the boundary and the two controls
    /// chatter against each other along it.
    pub safety_release: f64,
    pub k_p: f64,
    pub k_v: f64,
    /// Closing speed commanded during the pursuit phase, m/s.
    pub pursuit_speed: f64,
    pub u_max: f64,
    pub v_max: f64,
    /// Position half-width of the goal boxes L_H and L_P, meters.
    pub goal_pos_radius: f64,
    /// Velocity half-width of the goal boxes, m/s.
    pub goal_vel_radius: f64,
}

/// Phase of a goal-satisfaction controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Outside the reachable set: close in on the target point.
    Pursuit,
    /// Inside the reachable set: follow the extracted optimal control.
    LockedIn,
    /// Inside the target box itself.
    Arrived,
}

const PURSUIT_GAIN: f64 = 1.0; // 1/s

/// Nominal slot offset of follower `index` relative to the leader:
/// `r = -(index - 1) * d_sep * d_hat`.
pub fn nominal_offset(index: usize, d_sep: f64, d_hat: [f64; 2]) -> [f64; 2] {
    let k = (index - 1) as f64;
    [-k * d_sep * d_hat[0], -k * d_sep * d_hat[1]]
}

fn pursuit_control(
    x: &VehicleState,
    target_p: [f64; 2],
    base_v: [f64; 2],
    ctx: &ControllerContext,
) -> [f64; 2] {
    let los = [target_p[0] - x.p[0], target_p[1] - x.p[1]];
    let n = (los[0] * los[0] + los[1] * los[1]).sqrt();
    let dir = if n > 1e-9 {
        [los[0] / n, los[1] / n]
    } else {
        [0.0, 0.0]
    };
    let mut u = [0.0; 2];
    for k in 0..2 {
        let v_des = base_v[k] + ctx.pursuit_speed * dir[k];
        u[k] = (PURSUIT_GAIN * (v_des - x.v[k])).clamp(-ctx.u_max, ctx.u_max);
    }
    u
}

fn expect_brs<'a>(
    brs: Option<&'a BackwardReachableSet>,
    name: &'static str,
    kind: DynamicsKind,
    mode: BrsMode,
    horizon: f64,
) -> Result<&'a BackwardReachableSet, ControllerError> {
    let brs = brs.ok_or(ControllerError::BrsMissing(name))?;
    if brs.dynamics.kind != kind || brs.mode != mode {
        return Err(ControllerError::WrongBrs(format!(
            "{name} must solve {kind} dynamics in {mode} mode, got {} in {}",
            brs.dynamics.kind, brs.mode
        )));
    }
    if (brs.horizon - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(ControllerError::WrongBrs(format!(
            "{name} horizon {} does not match the configured horizon {horizon}",
            brs.horizon
        )));
    }
    Ok(brs)
}

/// Controller for reaching the highway-entry state `target` (position on the
/// highway, velocity `v_hw · d̂`). The reachable set is queried in the
/// target-centered position frame `(p - p̄, v)`, so one set serves every
/// entry point of a highway with the same cruise velocity.
pub fn merge_to_highway(
    x: &VehicleState,
    target: &VehicleState,
    ctx: &ControllerContext,
) -> Result<([f64; 2], Phase), ControllerError> {
    let brs = expect_brs(
        ctx.v_h,
        "V_H",
        DynamicsKind::Single4D,
        BrsMode::Goal,
        ctx.goal_horizon,
    )?;
    if (x.p[0] - target.p[0]).abs() <= ctx.goal_pos_radius
        && (x.p[1] - target.p[1]).abs() <= ctx.goal_pos_radius
        && (x.v[0] - target.v[0]).abs() <= ctx.goal_vel_radius
        && (x.v[1] - target.v[1]).abs() <= ctx.goal_vel_radius
    {
        return Ok(([0.0, 0.0], Phase::Arrived));
    }
    let xi = [
        x.p[0] - target.p[0],
        x.v[0],
        x.p[1] - target.p[1],
        x.v[1],
    ];
    if brs.contains_state(&xi) && brs.value_at(-ctx.goal_horizon, &xi)? <= 0.0 {
        let u = brs.optimal_control(-ctx.goal_horizon, &xi, Player::One)?;
        Ok((u, Phase::LockedIn))
    } else {
        // Aim one acceleration distance short of the gate rather than at the
        // gate itself: entry needs cruise speed along the highway, and a
        // pursuit pointed straight at the gate arrives with the wrong
        // velocity and circles it forever. From the run-up point the state
        // lies well inside the reachable set and the locked-in branch
        // finishes the entry.
        let speed = (target.v[0] * target.v[0] + target.v[1] * target.v[1]).sqrt();
        let aim = if speed > 1e-9 {
            let run_up = speed * speed / (2.0 * ctx.u_max) + ctx.goal_pos_radius;
            [
                target.p[0] - target.v[0] / speed * run_up,
                target.p[1] - target.v[1] / speed * run_up,
            ]
        } else {
            target.p
        };
        Ok((pursuit_control(x, aim, [0.0, 0.0], ctx), Phase::Pursuit))
    }
}

/// Controller for joining a platoon at follower slot `index`: steer the
/// relative state toward the nominal offset behind the leader with zero
/// relative velocity.
pub fn join_platoon(
    x: &VehicleState,
    leader: &VehicleState,
    index: usize,
    d_sep: f64,
    d_hat: [f64; 2],
    ctx: &ControllerContext,
) -> Result<([f64; 2], Phase), ControllerError> {
    if index < 2 {
        return Err(ControllerError::BadSlot(index));
    }
    let brs = expect_brs(
        ctx.v_p,
        "V_P",
        DynamicsKind::Relative4D,
        BrsMode::Goal,
        ctx.goal_horizon,
    )?;
    let r = nominal_offset(index, d_sep, d_hat);
    let rel = relative_state(x, leader);
    let xi = [rel[0] - r[0], rel[1] - r[1], rel[2], rel[3]];
    if xi[0].abs() <= ctx.goal_pos_radius
        && xi[1].abs() <= ctx.goal_pos_radius
        && xi[2].abs() <= ctx.goal_vel_radius
        && xi[3].abs() <= ctx.goal_vel_radius
    {
        return Ok(([0.0, 0.0], Phase::Arrived));
    }
    if brs.contains_state(&xi) && brs.value_at(-ctx.goal_horizon, &xi)? <= 0.0 {
        let u = brs.optimal_control(-ctx.goal_horizon, &xi, Player::One)?;
        Ok((u, Phase::LockedIn))
    } else {
        let slot = [leader.p[0] + r[0], leader.p[1] + r[1]];
        Ok((pursuit_control(x, slot, leader.v, ctx), Phase::Pursuit))
    }
}

/// Wrap a nominal control with the pairwise safety check: if the relative
/// state with any neighbor in `Q(i)` has `V_S(-t_d, ·) ≤ 0`, return the
/// evading optimal control against the most threatening neighbor plus the
/// list of engaged neighbors; otherwise pass the nominal control through
/// unchanged. Neighbors outside the safety grid are out of engagement range
/// and treated as safe.
///
/// `held` lists the neighbors this vehicle was engaged with on the previous
/// step. A held pair stays engaged until its value rises above
/// `ctx.safety_release`, so a single encounter produces one sustained
/// evasive maneuver rather than rapid alternation with the nominal control
/// at the boundary of the unsafe set.
pub fn safety_supervisor(
    id: usize,
    world: &World,
    qset: &SafetyCheckSet,
    ctx: &ControllerContext,
    nominal: [f64; 2],
    held: &[usize],
) -> Result<([f64; 2], Vec<usize>), ControllerError> {
    let brs = expect_brs(
        ctx.v_s,
        "V_S",
        DynamicsKind::Relative4D,
        BrsMode::Game,
        ctx.safety_horizon,
    )?;
    let me = world
        .vehicle(id)
        .ok_or(ControllerError::UnknownVehicle(id))?;
    let mut breaches = Vec::new();
    let mut worst: Option<(f64, [f64; 4])> = None;
    for &j in qset.for_vehicle(id) {
        let Some(other) = world.vehicle(j) else {
            continue;
        };
        let rel = relative_state(&me.state, &other.state);
        if !brs.contains_state(&rel) {
            continue;
        }
        let v = brs.value_at(-ctx.safety_horizon, &rel)?;
        let engaged = v <= ctx.safety_engage || (held.contains(&j) && v <= ctx.safety_release);
        if engaged {
            breaches.push(j);
            if worst.map_or(true, |(w, _)| v < w) {
                worst = Some((v, rel));
            }
        }
    }
    match worst {
        Some((_, rel)) => {
            let d = ctx.safety_distance;
            let u = if rel[0].abs() <= d && rel[1].abs() <= d {
                // Already inside the unsafe box. The game value is frozen
                // at (or below) the target surface here, and near a corner
                // of the box its gradient alternates between the two face
                // normals, so gradient-following chatters and slides along
                // the corner without ever separating. Flee instead: push
                // the relative position outward on both axes at full
                // authority until the position leaves the box.
                let away = |p: f64| if p >= 0.0 { 1.0 } else { -1.0 };
                [ctx.u_max * away(rel[0]), ctx.u_max * away(rel[1])]
            } else {
                brs.optimal_control(-ctx.safety_horizon, &rel, Player::One)?
            };
            Ok((u, breaches))
        }
        None => Ok((nominal, breaches)),
    }
}

/// Linear feedback law holding follower `index` at its nominal slot:
/// `u = k_p (p_P1 + r - p) + k_v (v_P1 - v) + u_P1`, clamped to `u_max`.
#[allow(clippy::too_many_arguments)]
pub fn follower_control(
    leader_p: [f64; 2],
    leader_v: [f64; 2],
    leader_u: [f64; 2],
    own: &VehicleState,
    index: usize,
    d_sep: f64,
    d_hat: [f64; 2],
    k_p: f64,
    k_v: f64,
    u_max: f64,
) -> [f64; 2] {
    let r = nominal_offset(index, d_sep, d_hat);
    let mut u = [0.0; 2];
    for k in 0..2 {
        u[k] = (k_p * (leader_p[k] + r[k] - own.p[k]) + k_v * (leader_v[k] - own.v[k])
            + leader_u[k])
            .clamp(-u_max, u_max);
    }
    u
}

/// Result of one MPC solve: the feasible control sequence (first element is
/// applied per MPC convention), the path-parameter schedule, and the
/// achieved objective.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub controls: Vec<[f64; 2]>,
    pub s: Vec<f64>,
    pub objective: f64,
}

/// The path parameter advancing at highway speed from `s0`, clamped to 1.
pub fn natural_progression(s0: f64, h: &Highway, dt: f64, n: usize) -> Vec<f64> {
    let len = h.length();
    (1..=n)
        .map(|k| (s0 + k as f64 * dt * h.speed / len).min(1.0))
        .collect()
}

/// Roll the double integrator forward under `u`, clamping each applied
/// control to the acceleration box and to whatever keeps `|v| ≤ v_max`.
/// Returns positions, velocities (index 0 = initial state), and the
/// feasible controls actually applied.
fn rollout(
    x0: &VehicleState,
    u: &[[f64; 2]],
    dt: f64,
    u_max: f64,
    v_max: f64,
) -> (Vec<[f64; 2]>, Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let n = u.len();
    let mut p = Vec::with_capacity(n + 1);
    let mut v = Vec::with_capacity(n + 1);
    let mut eff = Vec::with_capacity(n);
    p.push(x0.p);
    v.push(x0.v);
    for uk in u {
        let (pk, vk) = (p[p.len() - 1], v[v.len() - 1]);
        let mut a = [0.0; 2];
        let mut pn = [0.0; 2];
        let mut vn = [0.0; 2];
        for k in 0..2 {
            a[k] = uk[k]
                .clamp(-u_max, u_max)
                .clamp((-v_max - vk[k]) / dt, (v_max - vk[k]) / dt);
            pn[k] = pk[k] + vk[k] * dt + 0.5 * a[k] * dt * dt;
            vn[k] = (vk[k] + a[k] * dt).clamp(-v_max, v_max);
        }
        eff.push(a);
        p.push(pn);
        v.push(vn);
    }
    (p, v, eff)
}

fn norm2(a: [f64; 2]) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

/// Tracking objective `Σ dt (‖p(k) - p̄(s_k)‖ + ‖v(k) - v̄‖ + (1 - s_k))`
/// of a control sequence and path-parameter schedule, evaluated on the
/// feasible rollout from `x0`.
pub fn tracking_objective(
    x0: &VehicleState,
    h: &Highway,
    controls: &[[f64; 2]],
    s: &[f64],
    dt: f64,
    u_max: f64,
    v_max: f64,
) -> f64 {
    let (p, v, _) = rollout(x0, controls, dt, u_max, v_max);
    objective_of(h, &p, &v, s, dt)
}

fn objective_of(h: &Highway, p: &[[f64; 2]], v: &[[f64; 2]], s: &[f64], dt: f64) -> f64 {
    let d = h.direction();
    let v_bar = [h.speed * d[0], h.speed * d[1]];
    let mut j = 0.0;
    for (k, &sk) in s.iter().enumerate() {
        let (pt, _) = h.state(sk).expect("s kept in [0,1] by projection");
        let pk = p[k + 1];
        let vk = v[k + 1];
        j += dt * (norm2([pk[0] - pt[0], pk[1] - pt[1]]) + norm2([vk[0] - v_bar[0], vk[1] - v_bar[1]]) + (1.0 - sk));
    }
    j
}

/// Pool-adjacent-violators projection onto nondecreasing sequences.
fn isotonic(mut s: Vec<f64>) -> Vec<f64> {
    let n = s.len();
    let mut w = vec![1.0f64; n];
    let mut m = 0usize; // blocks in use
    for i in 0..n {
        s[m] = s[i];
        w[m] = 1.0;
        m += 1;
        while m > 1 && s[m - 2] > s[m - 1] {
            let merged = (w[m - 2] * s[m - 2] + w[m - 1] * s[m - 1]) / (w[m - 2] + w[m - 1]);
            w[m - 2] += w[m - 1];
            s[m - 2] = merged;
            m -= 1;
        }
    }
    // Expand blocks back to length n.
    let mut out = Vec::with_capacity(n);
    for b in 0..m {
        for _ in 0..w[b] as usize {
            out.push(s[b]);
        }
    }
    out
}

fn project_s(mut s: Vec<f64>, s0: f64) -> Vec<f64> {
    s = isotonic(s);
    for v in &mut s {
        *v = v.clamp(s0, 1.0);
    }
    s
}

/// Direct-transcription MPC for traveling along a highway: minimize the
/// tracking objective over controls and a monotone path parameter with
/// projected subgradient descent, accepting only improving steps (so the
/// result never costs more than the zero-control start).
#[allow(clippy::too_many_arguments)]
pub fn mpc_track_highway(
    x: &VehicleState,
    h: &Highway,
    s0: f64,
    horizon: f64,
    dt: f64,
    u_max: f64,
    v_max: f64,
    iters: usize,
) -> Result<MpcSolution, ControllerError> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(ControllerError::InfeasibleHorizon { horizon, dt });
    }
    let steps = horizon / dt;
    let n = steps.round() as usize;
    if n == 0 || (steps - n as f64).abs() > 1e-6 * steps.max(1.0) {
        return Err(ControllerError::InfeasibleHorizon { horizon, dt });
    }
    let s0 = s0.clamp(0.0, 1.0);
    let length = norm2([h.end[0] - h.start[0], h.end[1] - h.start[1]]).max(1e-9);
    let dir = h.direction();
    let v_bar = [h.speed * dir[0], h.speed * dir[1]];

    let mut u = vec![[0.0f64; 2]; n];
    let mut s = natural_progression(s0, h, dt, n);
    let (mut p, mut v, mut eff) = rollout(x, &u, dt, u_max, v_max);
    let mut best = objective_of(h, &p, &v, &s, dt);

    let mut alpha = 0.25;
    for _ in 0..iters {
        // Subgradients of the objective at the current feasible rollout.
        let mut gp = vec![[0.0f64; 2]; n + 1];
        let mut gv = vec![[0.0f64; 2]; n + 1];
        let mut gs = vec![0.0f64; n];
        for k in 1..=n {
            let (pt, _) = h.state(s[k - 1]).expect("projected");
            let ep = [p[k][0] - pt[0], p[k][1] - pt[1]];
            let ev = [v[k][0] - v_bar[0], v[k][1] - v_bar[1]];
            let np = norm2(ep);
            let nv = norm2(ev);
            // The s-subgradient is taken per meter of arc length and the
            // step maps back to the unit parameter, i.e. two factors of the
            // highway length. Differentiating in raw s would scale this
            // entry by the squared length and drown the control step in the
            // shared backtracking line search.
            if np > 1e-12 {
                gp[k] = [dt * ep[0] / np, dt * ep[1] / np];
                gs[k - 1] =
                    dt * (-(ep[0] * dir[0] + ep[1] * dir[1]) / np - 1.0 / length) / length;
            } else {
                gs[k - 1] = -dt / (length * length);
            }
            if nv > 1e-12 {
                gv[k] = [dt * ev[0] / nv, dt * ev[1] / nv];
            }
        }
        // Adjoint sweep through the linear dynamics.
        let mut lp = [0.0f64; 2];
        let mut lv = [0.0f64; 2];
        let mut gu = vec![[0.0f64; 2]; n];
        for k in (0..n).rev() {
            for c in 0..2 {
                lp[c] += gp[k + 1][c];
                lv[c] += gv[k + 1][c];
                gu[k][c] = lp[c] * 0.5 * dt * dt + lv[c] * dt;
                lv[c] += lp[c] * dt;
            }
        }
        // Backtracking projected step, accepted only on improvement.
        let mut beta = alpha;
        let mut accepted = false;
        for _ in 0..25 {
            let cand_u: Vec<[f64; 2]> = u
                .iter()
                .zip(&gu)
                .map(|(uk, gk)| {
                    [
                        (uk[0] - beta * gk[0]).clamp(-u_max, u_max),
                        (uk[1] - beta * gk[1]).clamp(-u_max, u_max),
                    ]
                })
                .collect();
            let cand_s = project_s(
                s.iter().zip(&gs).map(|(sk, gk)| sk - beta * gk).collect(),
                s0,
            );
            let (cp, cv, ceff) = rollout(x, &cand_u, dt, u_max, v_max);
            let cost = objective_of(h, &cp, &cv, &cand_s, dt);
            if cost < best - 1e-12 {
                u = cand_u;
                s = cand_s;
                p = cp;
                v = cv;
                eff = ceff;
                best = cost;
                alpha = beta * 1.5;
                accepted = true;
                break;
            }
            beta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(MpcSolution {
        controls: eff,
        s,
        objective: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reachability::{
        implicit_surface, solve_hji, AxisSpec, DynamicsSpec, ScalarFieldND, TargetSpec,
    };
    use crate::vehicles::{safety_check_set, Mode, Vehicle};

    fn ctx_with<'a>(
        v_h: Option<&'a BackwardReachableSet>,
        v_p: Option<&'a BackwardReachableSet>,
        v_s: Option<&'a BackwardReachableSet>,
    ) -> ControllerContext<'a> {
        ControllerContext {
            v_h,
            v_p,
            v_s,
            goal_horizon: 4.0,
            safety_horizon: 1.0,
            safety_distance: 5.0,
            safety_engage: 1.0,
            safety_release: 2.0,
            k_p: 1.0,
            k_v: 2.0,
            pursuit_speed: 8.0,
            u_max: 3.0,
            v_max: 20.0,
            goal_pos_radius: 5.0,
            goal_vel_radius: 1.5,
        }
    }

    /// Two-slice set (t = 0 and t = -horizon) whose value is a fixed linear
    /// function, giving exact interpolated values and gradients.
    fn linear_set(
        kind: DynamicsKind,
        mode: BrsMode,
        coeffs: &[f64],
        offset: f64,
        horizon: f64,
    ) -> BackwardReachableSet {
        let axes = vec![AxisSpec::new(-100.0, 100.0, 3); coeffs.len()];
        let c = coeffs.to_vec();
        let f = move |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() + offset;
        let mut s0 = ScalarFieldND::from_fn(axes.clone(), &f).unwrap();
        s0.time = Some(0.0);
        let mut s1 = ScalarFieldND::from_fn(axes, &f).unwrap();
        s1.time = Some(-horizon);
        let d = DynamicsSpec::new(kind, 3.0, 0.0, 20.0).unwrap();
        BackwardReachableSet::from_slices(d, mode, vec![s0, s1]).unwrap()
    }

    #[test]
    fn follower_law_equilibrium_and_position_term() {
        let own = VehicleState::new([5.0, 0.0], [10.0, 0.0]);
        let u = follower_control(
            [10.0, 0.0],
            [10.0, 0.0],
            [0.0, 0.0],
            &own,
            2,
            5.0,
            [1.0, 0.0],
            1.0,
            1.0,
            3.0,
        );
        assert_eq!(u, [0.0, 0.0]);
        let own = VehicleState::new([4.0, 0.0], [10.0, 0.0]);
        let u = follower_control(
            [10.0, 0.0],
            [10.0, 0.0],
            [0.0, 0.0],
            &own,
            2,
            5.0,
            [1.0, 0.0],
            1.0,
            1.0,
            3.0,
        );
        assert_eq!(u, [1.0, 0.0]);
    }

    #[test]
    fn nominal_offsets_point_backwards_along_the_highway() {
        assert_eq!(nominal_offset(3, 5.0, [0.0, 1.0]), [0.0, -10.0]);
        assert_eq!(nominal_offset(3, 10.0, [1.0, 0.0]), [-20.0, 0.0]);
        assert_eq!(nominal_offset(2, 10.0, [1.0, 0.0]), [-10.0, 0.0]);
    }

    #[test]
    fn merge_reports_arrival_inside_the_target_box() {
        let brs = linear_set(DynamicsKind::Single4D, BrsMode::Goal, &[0.0; 4], 1.0, 4.0);
        let ctx = ctx_with(Some(&brs), None, None);
        let target = VehicleState::new([50.0, 0.0], [10.0, 0.0]);
        let x = VehicleState::new([52.0, 1.0], [9.0, 0.5]);
        let (u, phase) = merge_to_highway(&x, &target, &ctx).unwrap();
        assert_eq!(phase, Phase::Arrived);
        assert_eq!(u, [0.0, 0.0]);
    }

    #[test]
    fn merge_pursues_when_value_is_positive() {
        // Constant positive value: never locked in.
        let brs = linear_set(DynamicsKind::Single4D, BrsMode::Goal, &[0.0; 4], 1.0, 4.0);
        let ctx = ctx_with(Some(&brs), None, None);
        let target = VehicleState::new([60.0, 0.0], [10.0, 0.0]);
        let x = VehicleState::new([0.0, 0.0], [0.0, 0.0]);
        let (u, phase) = merge_to_highway(&x, &target, &ctx).unwrap();
        assert_eq!(phase, Phase::Pursuit);
        // Target due +x at rest: accelerate toward it, clamped.
        assert_eq!(u, [3.0, 0.0]);
    }

    #[test]
    fn merge_locks_in_where_value_is_nonpositive() {
        // V = p_xr - 10: nonpositive left of 10 m; gradient has no velocity
        // component, so the extracted control is zero.
        let brs = linear_set(
            DynamicsKind::Single4D,
            BrsMode::Goal,
            &[1.0, 0.0, 0.0, 0.0],
            -10.0,
            4.0,
        );
        let ctx = ctx_with(Some(&brs), None, None);
        let target = VehicleState::new([0.0, 0.0], [10.0, 0.0]);
        let x = VehicleState::new([-20.0, 30.0], [0.0, 0.0]);
        let (_, phase) = merge_to_highway(&x, &target, &ctx).unwrap();
        assert_eq!(phase, Phase::LockedIn);
    }

    #[test]
    fn merge_requires_matching_set() {
        let brs = linear_set(DynamicsKind::Relative4D, BrsMode::Goal, &[0.0; 4], 1.0, 4.0);
        let ctx = ctx_with(Some(&brs), None, None);
        let target = VehicleState::new([0.0, 0.0], [10.0, 0.0]);
        let x = VehicleState::new([1.0, 1.0], [0.0, 0.0]);
        assert!(matches!(
            merge_to_highway(&x, &target, &ctx),
            Err(ControllerError::WrongBrs(_))
        ));
        let none = ctx_with(None, None, None);
        assert!(matches!(
            merge_to_highway(&x, &target, &none),
            Err(ControllerError::BrsMissing("V_H"))
        ));
    }

    #[test]
    fn join_slot_arrival_and_pursuit_direction() {
        let brs = linear_set(DynamicsKind::Relative4D, BrsMode::Goal, &[0.0; 4], 1.0, 4.0);
        let ctx = ctx_with(None, Some(&brs), None);
        let leader = VehicleState::new([100.0, 0.0], [10.0, 0.0]);
        // Exactly at slot 3 (offset (-20, 0)) matching velocity: arrived.
        let x = VehicleState::new([80.0, 0.0], [10.0, 0.0]);
        let (u, phase) = join_platoon(&x, &leader, 3, 10.0, [1.0, 0.0], &ctx).unwrap();
        assert_eq!(phase, Phase::Arrived);
        assert_eq!(u, [0.0, 0.0]);
        // Far below the slot: pursuit accelerates upward (+y) and the
        // x-control tracks the leader's speed.
        let x = VehicleState::new([80.0, -60.0], [10.0, 0.0]);
        let (u, phase) = join_platoon(&x, &leader, 3, 10.0, [1.0, 0.0], &ctx).unwrap();
        assert_eq!(phase, Phase::Pursuit);
        assert!(u[1] > 0.0);
        assert!(matches!(
            join_platoon(&x, &leader, 1, 10.0, [1.0, 0.0], &ctx),
            Err(ControllerError::BadSlot(1))
        ));
    }

    fn safety_set() -> BackwardReachableSet {
        let d = DynamicsSpec::new(DynamicsKind::Relative4D, 3.0, 3.0, 20.0).unwrap();
        let axes = vec![
            AxisSpec::new(-20.0, 20.0, 15),
            AxisSpec::new(-20.0, 20.0, 15),
            AxisSpec::new(-8.0, 8.0, 15),
            AxisSpec::new(-8.0, 8.0, 15),
        ];
        let l = implicit_surface(
            &TargetSpec::Safety {
                d: 5.0,
                v_max: 20.0,
            },
            &axes,
        )
        .unwrap();
        solve_hji(&d, BrsMode::Game, &l, 1.0, 1.0).unwrap()
    }

    fn two_vehicle_world(p1: [f64; 2], v1: [f64; 2]) -> World {
        World {
            vehicles: vec![
                Vehicle {
                    id: 0,
                    state: VehicleState::new([0.0, 0.0], [0.0, 0.0]),
                    mode: Mode::Free,
                },
                Vehicle {
                    id: 1,
                    state: VehicleState::new(p1, v1),
                    mode: Mode::Free,
                },
            ],
            platoons: vec![],
            intruders: vec![],
        }
    }

    #[test]
    fn supervisor_passes_nominal_through_bitwise_when_safe() {
        let v_s = safety_set();
        let ctx = ctx_with(None, None, Some(&v_s));
        // 15 m apart in x only, no relative motion: x-gap alone keeps the
        // pair outside the collision set regardless of horizon.
        let world = two_vehicle_world([15.0, 0.0], [0.0, 0.0]);
        let q = safety_check_set(&world, 2.0);
        let nominal = [0.123456789, -0.987654321];
        let (u, breaches) = safety_supervisor(0, &world, &q, &ctx, nominal, &[]).unwrap();
        assert!(breaches.is_empty());
        assert_eq!(u, nominal);
    }

    #[test]
    fn supervisor_engages_when_a_chaser_closes_in() {
        let v_s = safety_set();
        let ctx = ctx_with(None, None, Some(&v_s));
        // Neighbor 7 m behind closing at 5 m/s: still outside the collision
        // box, but drift carries the pair inside it within the horizon.
        let world = two_vehicle_world([-7.0, 0.0], [5.0, 0.0]);
        let q = safety_check_set(&world, 2.0);
        let (u, breaches) = safety_supervisor(0, &world, &q, &ctx, [0.0, 0.0], &[]).unwrap();
        assert_eq!(breaches, vec![1]);
        // Bang-bang evasion: each component is -u_max, 0, or +u_max, and the
        // x-component must run from the chaser.
        for c in u {
            assert!(c == 3.0 || c == -3.0 || c == 0.0, "u = {u:?}");
        }
        assert_eq!(u[0], 3.0, "u = {u:?}");
    }

    #[test]
    fn supervisor_ignores_neighbors_outside_the_grid() {
        let v_s = safety_set();
        let ctx = ctx_with(None, None, Some(&v_s));
        let world = two_vehicle_world([300.0, 0.0], [0.0, 0.0]);
        let q = safety_check_set(&world, 2.0);
        let (u, breaches) = safety_supervisor(0, &world, &q, &ctx, [1.0, 1.0], &[]).unwrap();
        assert!(breaches.is_empty());
        assert_eq!(u, [1.0, 1.0]);
    }

    fn test_highway() -> Highway {
        Highway::new([0.0, 0.0], [400.0, 0.0], 10.0).unwrap()
    }

    #[test]
    fn mpc_on_highway_start_keeps_controls_at_zero() {
        let h = test_highway();
        let s0 = 0.1;
        let (p0, v0) = h.state(s0).unwrap();
        let x = VehicleState::new(p0, v0);
        let sol = mpc_track_highway(&x, &h, s0, 1.0, 0.05, 3.0, 20.0, 100).unwrap();
        let max_u = sol
            .controls
            .iter()
            .flat_map(|u| u.iter())
            .fold(0.0f64, |m, &c| m.max(c.abs()));
        assert!(max_u <= 1e-3, "max |u| = {max_u}");
    }

    #[test]
    fn mpc_first_control_counters_a_lateral_offset() {
        let h = test_highway();
        let s0 = 0.1;
        let (p0, v0) = h.state(s0).unwrap();
        let x = VehicleState::new([p0[0], p0[1] + 1.0], v0);
        let sol = mpc_track_highway(&x, &h, s0, 1.0, 0.05, 3.0, 20.0, 100).unwrap();
        assert!(
            sol.controls[0][1] < 0.0,
            "first control {:?} should push back toward the highway",
            sol.controls[0]
        );
    }

    #[test]
    fn mpc_never_underperforms_the_zero_control_start() {
        let h = test_highway();
        let s0 = 0.2;
        let (p0, v0) = h.state(s0).unwrap();
        for (dx, dy, dvx) in [(5.0, -3.0, 2.0), (-4.0, 6.0, -1.5), (0.0, 10.0, 0.0)] {
            let x = VehicleState::new([p0[0] + dx, p0[1] + dy], [v0[0] + dvx, v0[1]]);
            let n = 20;
            let baseline = tracking_objective(
                &x,
                &h,
                &vec![[0.0, 0.0]; n],
                &natural_progression(s0, &h, 0.05, n),
                0.05,
                3.0,
                20.0,
            );
            let sol = mpc_track_highway(&x, &h, s0, 1.0, 0.05, 3.0, 20.0, 100).unwrap();
            assert!(sol.objective <= baseline + 1e-9);
            // Feasibility of the returned sequence.
            for u in &sol.controls {
                assert!(u[0].abs() <= 3.0 + 1e-12 && u[1].abs() <= 3.0 + 1e-12);
            }
            for w in sol.s.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "s must be monotone");
            }
        }
    }

    #[test]
    fn mpc_rollout_respects_the_speed_limit() {
        let h = test_highway();
        let x = VehicleState::new([0.0, 0.0], [19.5, 0.0]);
        let sol = mpc_track_highway(&x, &h, 0.0, 1.0, 0.05, 3.0, 20.0, 50).unwrap();
        let (_, v, _) = rollout(&x, &sol.controls, 0.05, 3.0, 20.0);
        for vk in v {
            assert!(vk[0].abs() <= 20.0 + 1e-9 && vk[1].abs() <= 20.0 + 1e-9);
        }
    }

    #[test]
    fn mpc_rejects_non_divisible_horizons() {
        let h = test_highway();
        let x = VehicleState::new([0.0, 0.0], [0.0, 0.0]);
        assert!(matches!(
            mpc_track_highway(&x, &h, 0.0, 1.0, 0.3, 3.0, 20.0, 10),
            Err(ControllerError::InfeasibleHorizon { .. })
        ));
        assert!(matches!(
            mpc_track_highway(&x, &h, 0.0, 0.0, 0.05, 3.0, 20.0, 10),
            Err(ControllerError::InfeasibleHorizon { .. })
        ));
    }

    #[test]
    fn isotonic_projection_restores_monotonicity() {
        let s = project_s(vec![0.3, 0.2, 0.5, 0.4, 0.45], 0.0);
        for w in s.windows(2) {
            assert!(w[1] >= w[0]);
        }
        // Pooled values average the violating prefix.
        assert!((s[0] - 0.25).abs() < 1e-12 && (s[1] - 0.25).abs() < 1e-12);
        // Clamping to [s0, 1] applies after pooling.
        let s = project_s(vec![0.1, 0.9, 2.0], 0.5);
        assert_eq!(s[0], 0.5);
        assert_eq!(s[2], 1.0);
    }
}
