//! Deterministic multi-vehicle scenario engine: scenario configuration,
//! the closed-loop stepper (mode controllers wrapped by the safety
//! supervisor, exact double-integrator dynamics, the platoon mode machine),
//! separation auditing, and reproducible file outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{
    follower_control, join_platoon, merge_to_highway, mpc_track_highway, safety_supervisor,
    ControllerContext, ControllerError, Phase,
};
use crate::highways::{Highway, HighwayError};
use crate::reachability::{
    implicit_surface, solve_hji, AxisSpec, BackwardReachableSet, DynamicsKind, DynamicsSpec,
    Mode as BrsMode, ReachError, TargetSpec,
};
use crate::vehicles::{
    request_transition, safety_check_set, step_dynamics, Event, Mode, Platoon, SafetyCheckSet,
    Vehicle, VehicleError, VehicleState, World,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error(transparent)]
    Highway(#[from] HighwayError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Physical and controller parameters shared by every vehicle in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Acceleration bound per axis, m/s².
    pub u_max: f64,
    /// Speed bound per axis, m/s.
    pub v_max: f64,
    /// Separation half-width: a conflict is |Δx| ≤ d and |Δy| ≤ d, meters.
    pub d: f64,
    /// Nominal in-platoon spacing, meters.
    pub d_sep: f64,
    /// Safety horizon and faulty-vehicle descent time, seconds.
    pub t_d: f64,
    /// Highway cruise speed, m/s.
    pub v_hw: f64,
    /// Simulation step, seconds.
    pub dt: f64,
    /// Follower position gain, 1/s².
    pub k_p: f64,
    /// Follower velocity gain, 1/s.
    pub k_v: f64,
    /// Closing speed of the pursuit phase, m/s.
    pub pursuit_speed: f64,
    /// Goal-controller horizon T, seconds.
    pub goal_horizon: f64,
    /// Position half-width of the merge/join goal boxes, meters.
    pub goal_pos_radius: f64,
    /// Velocity half-width of the merge/join goal boxes, m/s.
    pub goal_vel_radius: f64,
    /// MPC lookahead, in simulation steps.
    pub mpc_horizon_steps: usize,
    /// Subgradient iterations per MPC solve.
    pub mpc_iters: usize,
    /// Safety-value level at which a pairwise evasive maneuver engages.
    pub safety_engage: f64,
    /// Safety-value level at which an engaged evasive maneuver hands back
    /// to the nominal controller (hysteresis; must exceed `safety_engage`).
    pub safety_release: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            u_max: 3.0,
            v_max: 20.0,
            d: 5.0,
            d_sep: 10.0,
            t_d: 2.0,
            v_hw: 10.0,
            dt: 0.05,
            k_p: 1.0,
            k_v: 2.0,
            pursuit_speed: 8.0,
            goal_horizon: 8.0,
            goal_pos_radius: 5.0,
            goal_vel_radius: 1.5,
            mpc_horizon_steps: 80,
            mpc_iters: 40,
            safety_engage: 1.0,
            safety_release: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighwayCfg {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub speed: f64,
}

fn default_mode() -> Mode {
    Mode::Free
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleCfg {
    pub id: usize,
    pub p: [f64; 2],
    pub v: [f64; 2],
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

/// A platoon that exists when the scenario starts. `members` are vehicle ids
/// in file order; their modes must already agree with their slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonCfg {
    pub id: usize,
    pub highway: usize,
    pub members: Vec<usize>,
    /// Spacing override; the scenario default `d_sep` applies when absent.
    #[serde(default)]
    pub d_sep: Option<f64>,
}

/// Scripted command delivered to one vehicle at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub t: f64,
    pub vehicle: usize,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    /// Fly to the highway point at parameter `entry_s` and found a platoon.
    MergeToHighway { highway: usize, entry_s: f64 },
    /// Reserve the next slot of `platoon` and fly to it. Issued to a leader
    /// this hands the file to the next follower first; issued to a follower
    /// it leaves the current file first. Deferred while the platoon does
    /// not exist yet.
    JoinPlatoon { platoon: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    /// Total simulated time, seconds.
    pub duration: f64,
    #[serde(default)]
    pub params: SimParams,
    pub highways: Vec<HighwayCfg>,
    pub vehicles: Vec<VehicleCfg>,
    #[serde(default)]
    pub platoons: Vec<PlatoonCfg>,
    /// Vehicle ids that fly their initial velocity open-loop and ignore all
    /// directives and supervision.
    #[serde(default)]
    pub intruders: Vec<usize>,
    #[serde(default)]
    pub plan: Vec<Directive>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    ModeChange { from: Mode, to: Mode },
    SafetyBreachStart { with: usize },
    SafetyBreachEnd { with: usize },
    SlotReserved { platoon: usize, index: usize },
    ArrivedAtTarget,
    FaultDescent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub t: f64,
    pub vehicle: usize,
    pub kind: EventKind,
}

/// Append-only, deterministic event journal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
}

fn mode_desc(mode: &Mode) -> String {
    match mode {
        Mode::Free => "free".into(),
        Mode::Leader { highway, platoon } => format!("leader(h{highway},p{platoon})"),
        Mode::Follower { platoon, index } => format!("follower(p{platoon},i{index})"),
        Mode::Faulty { .. } => "faulty".into(),
    }
}

impl EventLog {
    fn push(&mut self, t: f64, vehicle: usize, kind: EventKind) {
        self.records.push(EventRecord { t, vehicle, kind });
    }

    /// One stable text line per record.
    pub fn lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let desc = match &r.kind {
                EventKind::ModeChange { from, to } => {
                    format!("ModeChange {}->{}", mode_desc(from), mode_desc(to))
                }
                EventKind::SafetyBreachStart { with } => format!("SafetyBreachStart with={with}"),
                EventKind::SafetyBreachEnd { with } => format!("SafetyBreachEnd with={with}"),
                EventKind::SlotReserved { platoon, index } => {
                    format!("SlotReserved platoon={platoon} index={index}")
                }
                EventKind::ArrivedAtTarget => "ArrivedAtTarget".into(),
                EventKind::FaultDescent => "FaultDescent".into(),
            };
            let _ = writeln!(out, "t={:.6} vehicle={} {}", r.t, r.vehicle, desc);
        }
        out
    }
}

/// One vehicle sample: pre-step state and the control applied over the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub vehicle: usize,
    pub mode: &'static str,
    pub p: [f64; 2],
    pub v: [f64; 2],
    pub u: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairReport {
    pub a: usize,
    pub b: usize,
    /// Minimum over time of max(|Δx|, |Δy|).
    pub min_gap: f64,
    pub t_min: f64,
    /// Number of sampled instants with |Δx| ≤ d and |Δy| ≤ d.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    pub d: f64,
    pub pairs: Vec<PairReport>,
    pub total_violations: usize,
}

impl SeparationReport {
    pub fn lines(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "d={:.6}", self.d);
        let _ = writeln!(out, "total_violations={}", self.total_violations);
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "pair a={} b={} min_gap={:.6} t_min={:.6} violations={}",
                p.a, p.b, p.min_gap, p.t_min, p.violations
            );
        }
        out
    }
}

/// Audit pairwise separation over a trajectory log: a violation is a sampled
/// instant where both |Δx| ≤ d and |Δy| ≤ d.
pub fn check_separation(rows: &[TrajectoryRecord], d: f64) -> SeparationReport {
    let mut pairs: Vec<PairReport> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let t = rows[i].t;
        let mut j = i;
        while j < rows.len() && rows[j].t == t {
            j += 1;
        }
        for a in i..j {
            for b in (a + 1)..j {
                let (ra, rb) = (&rows[a], &rows[b]);
                let dx = (ra.p[0] - rb.p[0]).abs();
                let dy = (ra.p[1] - rb.p[1]).abs();
                let gap = dx.max(dy);
                let violating = dx <= d && dy <= d;
                let (lo, hi) = if ra.vehicle <= rb.vehicle {
                    (ra.vehicle, rb.vehicle)
                } else {
                    (rb.vehicle, ra.vehicle)
                };
                match pairs.iter_mut().find(|p| p.a == lo && p.b == hi) {
                    Some(p) => {
                        if gap < p.min_gap {
                            p.min_gap = gap;
                            p.t_min = t;
                        }
                        if violating {
                            p.violations += 1;
                        }
                    }
                    None => pairs.push(PairReport {
                        a: lo,
                        b: hi,
                        min_gap: gap,
                        t_min: t,
                        violations: usize::from(violating),
                    }),
                }
            }
        }
        i = j;
    }
    pairs.sort_by_key(|p| (p.a, p.b));
    let total_violations = pairs.iter().map(|p| p.violations).sum();
    SeparationReport {
        d,
        pairs,
        total_violations,
    }
}

/// Reachable sets shared by every controller in a scenario run.
#[derive(Debug, Clone)]
pub struct BrsBundle {
    /// Highway-entry goal set; only needed when the plan contains merges.
    pub v_h: Option<BackwardReachableSet>,
    /// Platoon-slot goal set (relative state).
    pub v_p: BackwardReachableSet,
    /// Pairwise safety game set (relative state).
    pub v_s: BackwardReachableSet,
}

/// Grid envelopes and resolution for the bundled reachable-set solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrsGridConfig {
    /// Nodes per axis.
    pub nodes: usize,
    /// Half-widths of the merge-set grid: position offset / velocity.
    pub vh_pos: f64,
    pub vh_vel: f64,
    /// Half-widths of the join-set grid: relative position / velocity.
    pub vp_pos: f64,
    pub vp_vel: f64,
    /// Half-widths of the safety-set grid.
    pub vs_pos: f64,
    pub vs_vel: f64,
    /// Number of stored time slices per goal horizon.
    pub store_divisions: usize,
}

impl Default for BrsGridConfig {
    fn default() -> Self {
        Self {
            nodes: 41,
            vh_pos: 75.0,
            vh_vel: 20.0,
            vp_pos: 60.0,
            vp_vel: 12.0,
            vs_pos: 40.0,
            vs_vel: 16.0,
            store_divisions: 16,
        }
    }
}

/// Solve the scenario's reachable sets. `cruise_velocity` is the highway
/// velocity merges target; pass `None` when the plan contains no merges and
/// the merge set is skipped.
pub fn compute_brs_bundle(
    params: &SimParams,
    grids: &BrsGridConfig,
    cruise_velocity: Option<[f64; 2]>,
) -> Result<BrsBundle, ReachError> {
    let n = grids.nodes;
    let t = params.goal_horizon;
    let store = t / grids.store_divisions as f64;
    let rp = params.goal_pos_radius;
    let rv = params.goal_vel_radius;

    let rel = DynamicsSpec::new(DynamicsKind::Relative4D, params.u_max, 0.0, params.v_max)?;
    let axes_p = vec![
        AxisSpec::new(-grids.vp_pos, grids.vp_pos, n),
        AxisSpec::new(-grids.vp_pos, grids.vp_pos, n),
        AxisSpec::new(-grids.vp_vel, grids.vp_vel, n),
        AxisSpec::new(-grids.vp_vel, grids.vp_vel, n),
    ];
    let l_p = implicit_surface(
        &TargetSpec::Box {
            center: vec![0.0; 4],
            radii: vec![rp, rp, rv, rv],
        },
        &axes_p,
    )?;
    let v_p = solve_hji(&rel, BrsMode::Goal, &l_p, t, store)?;

    let game = DynamicsSpec::new(
        DynamicsKind::Relative4D,
        params.u_max,
        params.u_max,
        params.v_max,
    )?;
    let axes_s = vec![
        AxisSpec::new(-grids.vs_pos, grids.vs_pos, n),
        AxisSpec::new(-grids.vs_pos, grids.vs_pos, n),
        AxisSpec::new(-grids.vs_vel, grids.vs_vel, n),
        AxisSpec::new(-grids.vs_vel, grids.vs_vel, n),
    ];
    let l_s = implicit_surface(
        &TargetSpec::Safety {
            d: params.d,
            v_max: params.v_max,
        },
        &axes_s,
    )?;
    let v_s = solve_hji(&game, BrsMode::Game, &l_s, params.t_d, params.t_d)?;

    let v_h = match cruise_velocity {
        Some(c) => {
            let single =
                DynamicsSpec::new(DynamicsKind::Single4D, params.u_max, 0.0, params.v_max)?;
            let axes_h = vec![
                AxisSpec::new(-grids.vh_pos, grids.vh_pos, n),
                AxisSpec::new(-grids.vh_vel, grids.vh_vel, n),
                AxisSpec::new(-grids.vh_pos, grids.vh_pos, n),
                AxisSpec::new(-grids.vh_vel, grids.vh_vel, n),
            ];
            let l_h = implicit_surface(
                &TargetSpec::Box {
                    center: vec![0.0, c[0], 0.0, c[1]],
                    radii: vec![rp, rv, rp, rv],
                },
                &axes_h,
            )?;
            Some(solve_hji(&single, BrsMode::Goal, &l_h, t, store)?)
        }
        None => None,
    };

    Ok(BrsBundle { v_h, v_p, v_s })
}

/// Everything a scenario run produces, in memory.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub rows: Vec<TrajectoryRecord>,
    pub events: EventLog,
    pub separation: SeparationReport,
    pub world: World,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Task {
    Merge {
        highway: usize,
        target: VehicleState,
    },
    Join {
        platoon: usize,
        index: usize,
    },
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    brs: &'a BrsBundle,
    highways: Vec<Highway>,
    world: World,
    tasks: Vec<Option<Task>>,
    removed: Vec<bool>,
    directive_done: Vec<bool>,
    active_breaches: Vec<Vec<usize>>,
    next_platoon_id: usize,
    events: EventLog,
    rows: Vec<TrajectoryRecord>,
}

fn validate(cfg: &ScenarioConfig) -> Result<(), SimError> {
    let bad = |msg: String| Err(SimError::ConfigInvalid(msg));
    let p = &cfg.params;
    if !(cfg.duration > 0.0) || !cfg.duration.is_finite() {
        return bad(format!("duration must be positive, got {}", cfg.duration));
    }
    if !(p.dt > 0.0)
        || !(p.u_max > 0.0)
        || !(p.v_max > 0.0)
        || !(p.d > 0.0)
        || !(p.t_d > 0.0)
        || !(p.v_hw > 0.0)
        || !(p.goal_horizon > 0.0)
        || p.mpc_horizon_steps == 0
    {
        return bad("all physical parameters must be positive".into());
    }
    if p.d_sep <= p.d {
        return bad(format!(
            "platoon spacing d_sep={} must exceed the separation bound d={}",
            p.d_sep, p.d
        ));
    }
    for (k, v) in cfg.vehicles.iter().enumerate() {
        if !VehicleState::new(v.p, v.v).is_finite() {
            return bad(format!("vehicle {} has a non-finite state", v.id));
        }
        if v.v[0].abs() > p.v_max || v.v[1].abs() > p.v_max {
            return bad(format!("vehicle {} starts above the speed bound", v.id));
        }
        if cfg.vehicles[..k].iter().any(|o| o.id == v.id) {
            return bad(format!("duplicate vehicle id {}", v.id));
        }
        if matches!(v.mode, Mode::Faulty { .. }) {
            return bad(format!("vehicle {} may not start faulty", v.id));
        }
    }
    let vehicle_exists = |id: usize| cfg.vehicles.iter().any(|v| v.id == id);
    for (k, pl) in cfg.platoons.iter().enumerate() {
        if cfg.platoons[..k].iter().any(|o| o.id == pl.id) {
            return bad(format!("duplicate platoon id {}", pl.id));
        }
        if pl.highway >= cfg.highways.len() {
            return bad(format!("platoon {} references a missing highway", pl.id));
        }
        if pl.members.is_empty() {
            return bad(format!("platoon {} has no members", pl.id));
        }
        if let Some(ds) = pl.d_sep {
            if ds <= p.d {
                return bad(format!("platoon {} spacing must exceed d", pl.id));
            }
        }
        for (pos, &m) in pl.members.iter().enumerate() {
            if !vehicle_exists(m) {
                return bad(format!("platoon {} lists unknown vehicle {}", pl.id, m));
            }
            let mode = cfg.vehicles.iter().find(|v| v.id == m).unwrap().mode;
            let expected = if pos == 0 {
                Mode::Leader {
                    highway: pl.highway,
                    platoon: pl.id,
                }
            } else {
                Mode::Follower {
                    platoon: pl.id,
                    index: pos + 1,
                }
            };
            if mode != expected {
                return bad(format!(
                    "vehicle {m} must start as {} to hold slot {} of platoon {}",
                    mode_desc(&expected),
                    pos + 1,
                    pl.id
                ));
            }
        }
    }
    for &i in &cfg.intruders {
        if !vehicle_exists(i) {
            return bad(format!("unknown intruder id {i}"));
        }
        let mode = cfg.vehicles.iter().find(|v| v.id == i).unwrap().mode;
        if mode != Mode::Free {
            return bad(format!("intruder {i} must start free"));
        }
    }
    for d in &cfg.plan {
        if !vehicle_exists(d.vehicle) {
            return bad(format!("directive targets unknown vehicle {}", d.vehicle));
        }
        if cfg.intruders.contains(&d.vehicle) {
            return bad(format!("directive targets intruder {}", d.vehicle));
        }
        if let Action::MergeToHighway { highway, entry_s } = d.action {
            if highway >= cfg.highways.len() {
                return bad(format!("directive references missing highway {highway}"));
            }
            if !(0.0..=1.0).contains(&entry_s) {
                return bad(format!("entry_s must lie in [0, 1], got {entry_s}"));
            }
        }
    }
    Ok(())
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig, brs: &'a BrsBundle) -> Result<Self, SimError> {
        validate(cfg)?;
        let mut highways = Vec::with_capacity(cfg.highways.len());
        for h in &cfg.highways {
            highways.push(Highway::new(h.start, h.end, h.speed)?);
        }
        let vehicles: Vec<Vehicle> = cfg
            .vehicles
            .iter()
            .map(|v| Vehicle {
                id: v.id,
                state: VehicleState::new(v.p, v.v),
                mode: v.mode,
            })
            .collect();
        let platoons: Vec<Platoon> = cfg
            .platoons
            .iter()
            .map(|p| Platoon {
                id: p.id,
                highway: p.highway,
                members: p.members.clone(),
                reserved: Vec::new(),
                d_sep: p.d_sep.unwrap_or(cfg.params.d_sep),
            })
            .collect();
        let next_platoon_id = platoons.iter().map(|p| p.id + 1).max().unwrap_or(0);
        let n = vehicles.len();
        Ok(Self {
            cfg,
            brs,
            highways,
            world: World {
                vehicles,
                platoons,
                intruders: cfg.intruders.clone(),
            },
            tasks: vec![None; n],
            removed: vec![false; n],
            directive_done: vec![false; cfg.plan.len()],
            active_breaches: vec![Vec::new(); n],
            next_platoon_id,
            events: EventLog::default(),
            rows: Vec::new(),
        })
    }

    fn idx(&self, id: usize) -> Result<usize, SimError> {
        self.world
            .vehicles
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| SimError::ConfigInvalid(format!("unknown vehicle id {id}")))
    }

    fn ctx(&self) -> ControllerContext<'_> {
        let p = &self.cfg.params;
        ControllerContext {
            v_h: self.brs.v_h.as_ref(),
            v_p: Some(&self.brs.v_p),
            v_s: Some(&self.brs.v_s),
            goal_horizon: p.goal_horizon,
            safety_horizon: p.t_d,
            safety_distance: p.d,
            safety_engage: p.safety_engage,
            safety_release: p.safety_release,
            k_p: p.k_p,
            k_v: p.k_v,
            pursuit_speed: p.pursuit_speed,
            u_max: p.u_max,
            v_max: p.v_max,
            goal_pos_radius: p.goal_pos_radius,
            goal_vel_radius: p.goal_vel_radius,
        }
    }

    fn set_mode(&mut self, vi: usize, to: Mode, t: f64) {
        let from = self.world.vehicles[vi].mode;
        if from != to {
            self.world.vehicles[vi].mode = to;
            self.events
                .push(t, self.world.vehicles[vi].id, EventKind::ModeChange { from, to });
        }
    }

    /// Remove `vi` from whatever platoon holds it; vehicles behind the
    /// vacated slot shift forward one index (the second slot takes over the
    /// file when the leader itself departed). Dissolves the platoon when
    /// nothing remains in or inbound to it.
    fn detach(&mut self, vi: usize, t: f64) -> Result<(), SimError> {
        let vid = self.world.vehicles[vi].id;
        let Some(pi) = self
            .world
            .platoons
            .iter()
            .position(|p| p.members.contains(&vid))
        else {
            return Ok(());
        };
        let pos = self.world.platoons[pi]
            .members
            .iter()
            .position(|&m| m == vid)
            .unwrap();
        self.world.platoons[pi].members.remove(pos);
        let highway = self.world.platoons[pi].highway;
        let behind: Vec<usize> = self.world.platoons[pi].members[pos..].to_vec();
        for m in behind {
            let mi = self.idx(m)?;
            let from = self.world.vehicles[mi].mode;
            let to = request_transition(from, Event::LeaderLeft { highway })?;
            self.set_mode(mi, to, t);
        }
        if self.world.platoons[pi].members.is_empty() && self.world.platoons[pi].reserved.is_empty()
        {
            self.world.platoons.remove(pi);
        }
        Ok(())
    }

    fn reserve_and_task(&mut self, vi: usize, platoon_id: usize, t: f64) -> Result<(), SimError> {
        let vid = self.world.vehicles[vi].id;
        let p = self
            .world
            .platoons
            .iter_mut()
            .find(|p| p.id == platoon_id)
            .ok_or_else(|| SimError::ConfigInvalid(format!("unknown platoon {platoon_id}")))?;
        let index = p.next_slot();
        p.reserved.push((vid, index));
        self.events
            .push(t, vid, EventKind::SlotReserved { platoon: platoon_id, index });
        self.tasks[vi] = Some(Task::Join {
            platoon: platoon_id,
            index,
        });
        Ok(())
    }

    fn process_directives(&mut self, t: f64) -> Result<(), SimError> {
        for di in 0..self.cfg.plan.len() {
            if self.directive_done[di] || self.cfg.plan[di].t > t + 1e-9 {
                continue;
            }
            let d = self.cfg.plan[di];
            let vi = self.idx(d.vehicle)?;
            if self.removed[vi] {
                self.directive_done[di] = true;
                continue;
            }
            match d.action {
                Action::MergeToHighway { highway, entry_s } => {
                    if self.world.vehicles[vi].mode != Mode::Free {
                        return Err(SimError::ConfigInvalid(format!(
                            "vehicle {} must be free to merge",
                            d.vehicle
                        )));
                    }
                    let (p, v) = self.highways[highway].state(entry_s)?;
                    self.tasks[vi] = Some(Task::Merge {
                        highway,
                        target: VehicleState::new(p, v),
                    });
                    self.directive_done[di] = true;
                }
                Action::JoinPlatoon { platoon } => {
                    if self.world.platoon(platoon).is_none() {
                        continue; // target not formed yet; retry next step
                    }
                    match self.world.vehicles[vi].mode {
                        Mode::Free => {}
                        Mode::Leader { highway, .. } => {
                            // Hand the file to the next follower, then travel
                            // as a singleton platoon until the join lands.
                            self.detach(vi, t)?;
                            let new_id = self.next_platoon_id;
                            self.next_platoon_id += 1;
                            self.world.platoons.push(Platoon {
                                id: new_id,
                                highway,
                                members: vec![d.vehicle],
                                reserved: Vec::new(),
                                d_sep: self.cfg.params.d_sep,
                            });
                            self.set_mode(
                                vi,
                                Mode::Leader {
                                    highway,
                                    platoon: new_id,
                                },
                                t,
                            );
                        }
                        mode @ Mode::Follower { .. } => {
                            let to = request_transition(mode, Event::LeaveHighway)?;
                            self.detach(vi, t)?;
                            self.set_mode(vi, to, t);
                        }
                        Mode::Faulty { .. } => {
                            return Err(SimError::ConfigInvalid(format!(
                                "faulty vehicle {} cannot join a platoon",
                                d.vehicle
                            )));
                        }
                    }
                    self.reserve_and_task(vi, platoon, t)?;
                    self.directive_done[di] = true;
                }
            }
        }
        Ok(())
    }

    /// Active = still at the altitude level: not removed and, if faulty,
    /// still inside the descent window.
    fn active(&self, vi: usize) -> bool {
        if self.removed[vi] {
            return false;
        }
        match self.world.vehicles[vi].mode {
            Mode::Faulty { clock } => clock < self.cfg.params.t_d,
            _ => true,
        }
    }

    /// The per-step check sets: the standard construction, with vehicles in
    /// transit between files (an active merge or join task) widened to check
    /// every other active vehicle, as free vehicles do.
    fn build_qset(&self) -> SafetyCheckSet {
        let base = safety_check_set(&self.world, self.cfg.params.t_d);
        let mut entries: Vec<(usize, Vec<usize>)> = Vec::new();
        for (vi, v) in self.world.vehicles.iter().enumerate() {
            if !self.active(vi) {
                continue;
            }
            let q = if self.tasks[vi].is_some() {
                self.world
                    .vehicles
                    .iter()
                    .enumerate()
                    .filter(|&(oi, o)| oi != vi && self.active(oi) && o.id != v.id)
                    .map(|(_, o)| o.id)
                    .collect()
            } else {
                base.for_vehicle(v.id).to_vec()
            };
            entries.push((v.id, q));
        }
        SafetyCheckSet::from_entries(entries)
    }

    fn join_geometry(&self, platoon_id: usize) -> Result<(VehicleState, [f64; 2], f64), SimError> {
        let p = self
            .world
            .platoon(platoon_id)
            .ok_or_else(|| SimError::ConfigInvalid(format!("platoon {platoon_id} vanished")))?;
        let leader_id = *p.members.first().ok_or_else(|| {
            SimError::ConfigInvalid(format!("platoon {platoon_id} has no leader to join"))
        })?;
        let leader = self
            .world
            .vehicle(leader_id)
            .expect("members reference existing vehicles")
            .state;
        Ok((leader, self.highways[p.highway].direction(), p.d_sep))
    }

    /// Compute every vehicle's applied control: nominal control by mode and
    /// task, then the safety supervisor. Leaders and free vehicles go first
    /// so followers can feed forward their leader's final control.
    #[allow(clippy::type_complexity)]
    fn controls(
        &self,
        qset: &SafetyCheckSet,
    ) -> Result<(Vec<[f64; 2]>, Vec<Option<Phase>>, Vec<Vec<usize>>), SimError> {
        let n = self.world.vehicles.len();
        let p = &self.cfg.params;
        let ctx = self.ctx();
        let mut applied = vec![[0.0f64; 2]; n];
        let mut phases: Vec<Option<Phase>> = vec![None; n];
        let mut breaches: Vec<Vec<usize>> = vec![Vec::new(); n];

        for vi in 0..n {
            if self.removed[vi] {
                continue;
            }
            let vehicle = self.world.vehicles[vi];
            if self.world.intruders.contains(&vehicle.id) {
                continue; // scripted: zero control, no supervision
            }
            let nominal = match vehicle.mode {
                Mode::Follower { .. } => continue,
                Mode::Faulty { .. } => continue, // descending: zero planar control
                Mode::Free | Mode::Leader { .. } => match self.tasks[vi] {
                    Some(Task::Merge { ref target, .. }) => {
                        let (u, phase) = merge_to_highway(&vehicle.state, target, &ctx)?;
                        phases[vi] = Some(phase);
                        u
                    }
                    Some(Task::Join { platoon, index }) => {
                        let (leader, d_hat, d_sep) = self.join_geometry(platoon)?;
                        let (u, phase) =
                            join_platoon(&vehicle.state, &leader, index, d_sep, d_hat, &ctx)?;
                        phases[vi] = Some(phase);
                        u
                    }
                    None => match vehicle.mode {
                        Mode::Leader { highway, .. } => {
                            let h = &self.highways[highway];
                            let s0 = h.project(vehicle.state.p);
                            let sol = mpc_track_highway(
                                &vehicle.state,
                                h,
                                s0,
                                p.mpc_horizon_steps as f64 * p.dt,
                                p.dt,
                                p.u_max,
                                p.v_max,
                                p.mpc_iters,
                            )?;
                            sol.controls[0]
                        }
                        // Idle free vehicle: brake to rest and hold position.
                        _ => [
                            (-vehicle.state.v[0]).clamp(-p.u_max, p.u_max),
                            (-vehicle.state.v[1]).clamp(-p.u_max, p.u_max),
                        ],
                    },
                },
            };
            let (u, br) = safety_supervisor(
                vehicle.id,
                &self.world,
                qset,
                &ctx,
                nominal,
                &self.active_breaches[vi],
            )?;
            applied[vi] = u;
            breaches[vi] = br;
        }

        for vi in 0..n {
            if self.removed[vi] {
                continue;
            }
            let vehicle = self.world.vehicles[vi];
            let Mode::Follower { platoon, index } = vehicle.mode else {
                continue;
            };
            let pl = self
                .world
                .platoon(platoon)
                .ok_or_else(|| SimError::ConfigInvalid(format!("platoon {platoon} vanished")))?;
            let leader_id = pl.members[0];
            let li = self.idx(leader_id)?;
            let leader = self.world.vehicles[li].state;
            let d_hat = self.highways[pl.highway].direction();
            let nominal = follower_control(
                leader.p,
                leader.v,
                applied[li],
                &vehicle.state,
                index,
                pl.d_sep,
                d_hat,
                p.k_p,
                p.k_v,
                p.u_max,
            );
            let (u, br) = safety_supervisor(
                vehicle.id,
                &self.world,
                qset,
                &ctx,
                nominal,
                &self.active_breaches[vi],
            )?;
            applied[vi] = u;
            breaches[vi] = br;
        }

        Ok((applied, phases, breaches))
    }

    fn record_breaches(&mut self, t: f64, breaches: &[Vec<usize>]) -> Result<(), SimError> {
        let mut escalate: Vec<usize> = Vec::new();
        for vi in 0..breaches.len() {
            if self.removed[vi] {
                continue;
            }
            let vid = self.world.vehicles[vi].id;
            for &j in &breaches[vi] {
                if !self.active_breaches[vi].contains(&j) {
                    self.events
                        .push(t, vid, EventKind::SafetyBreachStart { with: j });
                }
            }
            for &j in &self.active_breaches[vi] {
                if !breaches[vi].contains(&j) {
                    self.events
                        .push(t, vid, EventKind::SafetyBreachEnd { with: j });
                }
            }
            self.active_breaches[vi] = breaches[vi].clone();
            if breaches[vi].len() > 1 && !matches!(self.world.vehicles[vi].mode, Mode::Faulty { .. })
            {
                escalate.push(vi);
            }
        }
        // More than one simultaneous breach means the single-pursuer safety
        // guarantee no longer applies: treat it as a fault and descend.
        for vi in escalate {
            let from = self.world.vehicles[vi].mode;
            let to = request_transition(from, Event::FaultDetected)?;
            self.detach(vi, t)?;
            self.set_mode(vi, to, t);
            self.tasks[vi] = None;
        }
        Ok(())
    }

    fn member_index(&self, vid: usize) -> usize {
        match self.world.vehicle(vid).map(|v| v.mode) {
            Some(Mode::Leader { .. }) => 1,
            Some(Mode::Follower { index, .. }) => index,
            _ => usize::MAX,
        }
    }

    fn apply_arrivals(&mut self, t: f64, phases: &[Option<Phase>]) -> Result<(), SimError> {
        for vi in 0..phases.len() {
            if phases[vi] != Some(Phase::Arrived) || self.removed[vi] {
                continue;
            }
            let Some(task) = self.tasks[vi] else { continue };
            let vid = self.world.vehicles[vi].id;
            let mode = self.world.vehicles[vi].mode;
            self.events.push(t, vid, EventKind::ArrivedAtTarget);
            match task {
                Task::Merge { highway, .. } => {
                    let pid = self.next_platoon_id;
                    self.next_platoon_id += 1;
                    self.world.platoons.push(Platoon {
                        id: pid,
                        highway,
                        members: vec![vid],
                        reserved: Vec::new(),
                        d_sep: self.cfg.params.d_sep,
                    });
                    let to = request_transition(
                        mode,
                        Event::MergeComplete {
                            highway,
                            platoon: pid,
                        },
                    )?;
                    self.set_mode(vi, to, t);
                }
                Task::Join { platoon, index } => {
                    // A transferring leader dissolves its singleton file.
                    if matches!(mode, Mode::Leader { .. }) {
                        self.detach(vi, t)?;
                    }
                    let pl = self
                        .world
                        .platoons
                        .iter_mut()
                        .find(|p| p.id == platoon)
                        .ok_or_else(|| {
                            SimError::ConfigInvalid(format!("platoon {platoon} vanished"))
                        })?;
                    pl.reserved.retain(|&(v, _)| v != vid);
                    let pl_id = pl.id;
                    let members = pl.members.clone();
                    let pos = members
                        .iter()
                        .position(|&m| self.member_index(m) > index)
                        .unwrap_or(members.len());
                    self.world
                        .platoons
                        .iter_mut()
                        .find(|p| p.id == pl_id)
                        .unwrap()
                        .members
                        .insert(pos, vid);
                    let to = request_transition(mode, Event::JoinComplete { platoon, index })?;
                    self.set_mode(vi, to, t);
                }
            }
            self.tasks[vi] = None;
        }
        Ok(())
    }

    fn advance_faults(&mut self, t: f64) -> Result<(), SimError> {
        let p = &self.cfg.params;
        for vi in 0..self.world.vehicles.len() {
            if self.removed[vi] {
                continue;
            }
            if let Mode::Faulty { clock } = self.world.vehicles[vi].mode {
                let clock = clock + p.dt;
                self.world.vehicles[vi].mode = Mode::Faulty { clock };
                if clock >= p.t_d {
                    self.removed[vi] = true;
                    let vid = self.world.vehicles[vi].id;
                    self.events.push(t, vid, EventKind::FaultDescent);
                    for j in std::mem::take(&mut self.active_breaches[vi]) {
                        self.events
                            .push(t, vid, EventKind::SafetyBreachEnd { with: j });
                    }
                    self.detach(vi, t)?;
                    self.tasks[vi] = None;
                }
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<SimOutput, SimError> {
        let p = self.cfg.params;
        let steps = (self.cfg.duration / p.dt).round() as usize;
        for k in 0..steps {
            let t = k as f64 * p.dt;
            self.process_directives(t)?;
            let qset = self.build_qset();
            let (applied, phases, breaches) = self.controls(&qset)?;
            for vi in 0..self.world.vehicles.len() {
                if self.removed[vi] {
                    continue;
                }
                let v = &self.world.vehicles[vi];
                self.rows.push(TrajectoryRecord {
                    t,
                    vehicle: v.id,
                    mode: v.mode.tag(),
                    p: v.state.p,
                    v: v.state.v,
                    u: applied[vi],
                });
            }
            self.record_breaches(t, &breaches)?;
            for vi in 0..self.world.vehicles.len() {
                if self.removed[vi] {
                    continue;
                }
                let state = self.world.vehicles[vi].state;
                self.world.vehicles[vi].state =
                    step_dynamics(&state, applied[vi], p.dt, p.u_max, p.v_max)?;
            }
            self.apply_arrivals(t, &phases)?;
            self.advance_faults(t)?;
        }
        let separation = check_separation(&self.rows, p.d);
        Ok(SimOutput {
            rows: self.rows,
            events: self.events,
            separation,
            world: self.world,
        })
    }
}

/// Run a scenario to completion against precomputed reachable sets.
pub fn run_scenario(cfg: &ScenarioConfig, brs: &BrsBundle) -> Result<SimOutput, SimError> {
    Engine::new(cfg, brs)?.run()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Write the run's artifacts under `dir`: `trajectories.csv`, `events.txt`,
/// `separation.txt`, and one `paths/vehicle_<id>.csv` polyline per vehicle.
/// Identical runs produce byte-identical files.
pub fn emit_outputs(output: &SimOutput, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("t,vehicle_id,mode,px,py,vx,vy,ux,uy\n");
    for r in &output.rows {
        let _ = writeln!(
            csv,
            "{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.t, r.vehicle, r.mode, r.p[0], r.p[1], r.v[0], r.v[1], r.u[0], r.u[1]
        );
    }
    write_atomic(&dir.join("trajectories.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("events.txt"), output.events.lines().as_bytes())?;
    write_atomic(
        &dir.join("separation.txt"),
        output.separation.lines().as_bytes(),
    )?;
    let paths_dir = dir.join("paths");
    fs::create_dir_all(&paths_dir)?;
    let mut ids: Vec<usize> = output.rows.iter().map(|r| r.vehicle).collect();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let mut body = String::from("x,y\n");
        for r in output.rows.iter().filter(|r| r.vehicle == id) {
            let _ = writeln!(body, "{:.6},{:.6}", r.p[0], r.p[1]);
        }
        write_atomic(&paths_dir.join(format!("vehicle_{id}.csv")), body.as_bytes())?;
    }
    Ok(())
}

/// Five free vehicles merge onto one highway and assemble into a single
/// five-vehicle platoon: the nearest vehicle merges at t = 0 and becomes the
/// leader; the rest join in order of initial distance to the entry point.
pub fn form_platoon_scenario() -> ScenarioConfig {
    let params = SimParams::default();
    let vehicles = vec![
        VehicleCfg {
            id: 0,
            p: [40.0, 10.0],
            v: [0.0, 0.0],
            mode: Mode::Free,
        },
        VehicleCfg {
            id: 1,
            p: [70.0, 30.0],
            v: [0.0, 0.0],
            mode: Mode::Free,
        },
        VehicleCfg {
            id: 2,
            p: [30.0, -35.0],
            v: [0.0, 0.0],
            mode: Mode::Free,
        },
        VehicleCfg {
            id: 3,
            p: [90.0, 45.0],
            v: [0.0, 0.0],
            mode: Mode::Free,
        },
        VehicleCfg {
            id: 4,
            p: [10.0, -50.0],
            v: [0.0, 0.0],
            mode: Mode::Free,
        },
    ];
    let mut plan = vec![Directive {
        t: 0.0,
        vehicle: 0,
        action: Action::MergeToHighway {
            highway: 0,
            entry_s: 0.0625, // 50 m down the corridor
        },
    }];
    // Join in order of distance to the entry point; the platoon id is 0
    // because the merge above founds the first platoon. The directives sit
    // at t = 4 but each one waits until the platoon exists.
    for &id in &[1, 2, 3, 4] {
        plan.push(Directive {
            t: 4.0,
            vehicle: id,
            action: Action::JoinPlatoon { platoon: 0 },
        });
    }
    ScenarioConfig {
        name: "form-platoon".into(),
        duration: 45.0,
        params,
        highways: vec![HighwayCfg {
            start: [0.0, 0.0],
            end: [800.0, 0.0],
            speed: params.v_hw,
        }],
        vehicles,
        platoons: vec![],
        intruders: vec![],
        plan,
    }
}

/// A cruising four-vehicle platoon crossed by a scripted intruder: the
/// supervisor must deflect members around it and return them to the file.
pub fn intruder_scenario() -> ScenarioConfig {
    let params = SimParams::default();
    let d_sep = 15.0;
    let mut vehicles: Vec<VehicleCfg> = (0..4)
        .map(|k| VehicleCfg {
            id: k,
            p: [120.0 - d_sep * k as f64, 0.0],
            v: [params.v_hw, 0.0],
            mode: if k == 0 {
                Mode::Leader {
                    highway: 0,
                    platoon: 0,
                }
            } else {
                Mode::Follower {
                    platoon: 0,
                    index: k + 1,
                }
            },
        })
        .collect();
    vehicles.push(VehicleCfg {
        id: 4,
        p: [200.0, -70.0],
        v: [0.0, 9.0],
        mode: Mode::Free,
    });
    ScenarioConfig {
        name: "intruder".into(),
        // Long enough for the platoon to absorb the encounter and settle
        // back onto the highway: the crossing happens near t = 8, evasive
        // engagement ends near t = 17, and unwinding a displacement of
        // ~100 m at u_max = 3 m/s² takes the followers into the forties.
        duration: 50.0,
        params,
        highways: vec![HighwayCfg {
            start: [0.0, 0.0],
            end: [800.0, 0.0],
            speed: params.v_hw,
        }],
        vehicles,
        platoons: vec![PlatoonCfg {
            id: 0,
            highway: 0,
            members: vec![0, 1, 2, 3],
            d_sep: Some(d_sep),
        }],
        intruders: vec![4],
        plan: vec![],
    }
}

/// Two parallel corridors: the four-vehicle platoon on the lower highway
/// loses its leader and an interior follower to the upper platoon, ending
/// with files of two and five. Exercises leader→follower (the transferring
/// leader docks as a follower) and follower→leader (the second slot takes
/// over the abandoned file).
pub fn change_highways_scenario() -> ScenarioConfig {
    let params = SimParams::default();
    let mk_leader = |platoon| Mode::Leader {
        highway: if platoon == 0 { 0 } else { 1 },
        platoon,
    };
    let mut vehicles = Vec::new();
    // Lower file: leader 0 then followers 1..3 at 10 m spacing.
    for k in 0..4usize {
        vehicles.push(VehicleCfg {
            id: k,
            p: [120.0 - 10.0 * k as f64, 0.0],
            v: [params.v_hw, 0.0],
            mode: if k == 0 {
                mk_leader(0)
            } else {
                Mode::Follower {
                    platoon: 0,
                    index: k + 1,
                }
            },
        });
    }
    // Upper file: leader 4 then followers 5, 6.
    for k in 0..3usize {
        vehicles.push(VehicleCfg {
            id: 4 + k,
            p: [100.0 - 10.0 * k as f64, 80.0],
            v: [params.v_hw, 0.0],
            mode: if k == 0 {
                mk_leader(1)
            } else {
                Mode::Follower {
                    platoon: 1,
                    index: k + 1,
                }
            },
        });
    }
    ScenarioConfig {
        name: "change-highways".into(),
        duration: 50.0,
        params,
        highways: vec![
            HighwayCfg {
                start: [0.0, 0.0],
                end: [900.0, 0.0],
                speed: params.v_hw,
            },
            HighwayCfg {
                start: [0.0, 80.0],
                end: [900.0, 80.0],
                speed: params.v_hw,
            },
        ],
        vehicles,
        platoons: vec![
            PlatoonCfg {
                id: 0,
                highway: 0,
                members: vec![0, 1, 2, 3],
                d_sep: None,
            },
            PlatoonCfg {
                id: 1,
                highway: 1,
                members: vec![4, 5, 6],
                d_sep: None,
            },
        ],
        intruders: vec![],
        plan: vec![
            Directive {
                t: 10.0,
                vehicle: 0,
                action: Action::JoinPlatoon { platoon: 1 },
            },
            Directive {
                t: 20.0,
                vehicle: 2,
                action: Action::JoinPlatoon { platoon: 1 },
            },
        ],
    }
}
