//! Backward reachable sets for double-integrator vehicles.
//!
//! Solves the terminal-value Hamilton–Jacobi PDE `D_t V + H(x, D_x V) = 0`,
//! `V(0,x) = l(x)`, backward in time on a regular grid with a first-order
//! upwind Lax–Friedrichs scheme, applying the freeze `V ← min(V_prev, V_new)`
//! each step so the zero sublevel set captures "reach (or be captured)
//! within |t|". Closed-form Hamiltonians cover the absolute goal dynamics,
//! the relative pursuit dynamics (game and reference-at-rest goal form), the
//! velocity-augmented relative dynamics, and the per-axis `(p, v)` subsystem
//! used both by the exact decomposition of axis-aligned box targets and by
//! small planar studies.

pub mod field;

pub use field::{AxisSpec, FieldError, ScalarFieldND};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReachError {
    #[error("grid has {got} axes, target/dynamics expect {expected}")]
    GridMismatch { expected: usize, got: usize },
    #[error("state/costate dimension {got} does not match dynamics dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mode {mode} is not defined for dynamics {kind}")]
    UnsupportedMode { kind: DynamicsKind, mode: Mode },
    #[error("invalid target: {0}")]
    BadTarget(String),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("store interval must be positive, got {0}")]
    BadStoreInterval(f64),
    #[error("solver produced non-finite values even at the smallest time step")]
    NonFiniteValue,
    #[error("decomposition requires an axis-aligned box target")]
    NonBoxTarget,
    #[error("time {t} outside stored range [{min_t}, 0]")]
    TimeOutOfRange { t: f64, min_t: f64 },
    #[error("a reachable set needs at least one stored slice, starting at t = 0")]
    BadSlices,
    #[error("bad index file: {0}")]
    Index(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which player optimizes against which in the PDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Single controlled player steering into the target (reach).
    Goal,
    /// Two players: Player 1 avoids the target, Player 2 forces it.
    Game,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Goal => "goal",
            Mode::Game => "game",
        })
    }
}

/// Supported dynamics with fixed, documented state orderings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsKind {
    /// One vehicle, state `(p_x, v_x, p_y, v_y)`; both axes are double
    /// integrators driven by `u` with `|u| ≤ u_max_i` componentwise.
    Single4D,
    /// Relative state between vehicles i and j:
    /// `(p_xr, p_yr, v_xr, v_yr)` with accelerations `u_i - u_j`.
    Relative4D,
    /// Relative state augmented with vehicle i's own velocity:
    /// `(p_xr, p_yr, v_xr, v_yr, v_xi, v_yi)`.
    AugRelative6D,
    /// Single-axis double integrator, state `(p, v)`; the subsystem used by
    /// the axis decomposition and planar studies.
    DoubleInt2D,
}

impl DynamicsKind {
    pub fn state_dim(&self) -> usize {
        match self {
            DynamicsKind::Single4D | DynamicsKind::Relative4D => 4,
            DynamicsKind::AugRelative6D => 6,
            DynamicsKind::DoubleInt2D => 2,
        }
    }
}

impl fmt::Display for DynamicsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DynamicsKind::Single4D => "single4d",
            DynamicsKind::Relative4D => "relative4d",
            DynamicsKind::AugRelative6D => "augrelative6d",
            DynamicsKind::DoubleInt2D => "doubleint2d",
        })
    }
}

/// Dynamics parameters: `u_max_i` bounds Player 1's acceleration,
/// `u_max_j` Player 2's (0 when there is no second player), and `v_max`
/// is the speed limit enforced by simulation clamping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub kind: DynamicsKind,
    pub u_max_i: f64,
    pub u_max_j: f64,
    pub v_max: f64,
}

impl DynamicsSpec {
    pub fn new(kind: DynamicsKind, u_max_i: f64, u_max_j: f64, v_max: f64) -> Result<Self, ReachError> {
        if !(u_max_i > 0.0) || !(u_max_j >= 0.0) || !(v_max > 0.0) {
            return Err(ReachError::BadTarget(format!(
                "need u_max_i > 0, u_max_j >= 0, v_max > 0; got {u_max_i}, {u_max_j}, {v_max}"
            )));
        }
        Ok(Self {
            kind,
            u_max_i,
            u_max_j,
            v_max,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }
}

/// Target-set specification turned into an implicit surface on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TargetSpec {
    /// Axis-aligned box: `l(x) = max_k (|x_k - center_k| - radii_k)`.
    Box { center: Vec<f64>, radii: Vec<f64> },
    /// Collision set: within `d` meters simultaneously in x and y, or either
    /// own-velocity component outside `±v_max` (velocity terms only on
    /// 6-dimensional grids that carry the own-velocity axes).
    Safety { d: f64, v_max: f64 },
}

/// Evaluate the implicit surface of `target` on the grid `axes`.
/// Negative inside the set, positive outside.
pub fn implicit_surface(target: &TargetSpec, axes: &[AxisSpec]) -> Result<ScalarFieldND, ReachError> {
    match target {
        TargetSpec::Box { center, radii } => {
            if center.len() != axes.len() || radii.len() != axes.len() {
                return Err(ReachError::GridMismatch {
                    expected: center.len(),
                    got: axes.len(),
                });
            }
            if radii.iter().any(|&r| !(r > 0.0)) {
                return Err(ReachError::BadTarget("box radii must be positive".into()));
            }
            let c = center.clone();
            let r = radii.clone();
            Ok(ScalarFieldND::from_fn(axes.to_vec(), move |x| {
                x.iter()
                    .zip(c.iter().zip(&r))
                    .map(|(&xi, (&ci, &ri))| (xi - ci).abs() - ri)
                    .fold(f64::NEG_INFINITY, f64::max)
            })?)
        }
        TargetSpec::Safety { d, v_max } => {
            if !(*d > 0.0) || !(*v_max > 0.0) {
                return Err(ReachError::BadTarget(
                    "safety target needs d > 0 and v_max > 0".into(),
                ));
            }
            let (d, v_max) = (*d, *v_max);
            match axes.len() {
                4 => Ok(ScalarFieldND::from_fn(axes.to_vec(), move |x| {
                    (x[0].abs() - d).max(x[1].abs() - d)
                })?),
                6 => Ok(ScalarFieldND::from_fn(axes.to_vec(), move |x| {
                    ((x[0].abs() - d).max(x[1].abs() - d))
                        .min(v_max - x[4].abs())
                        .min(v_max - x[5].abs())
                })?),
                n => Err(ReachError::GridMismatch { expected: 4, got: n }),
            }
        }
    }
}

/// Resolved Hamiltonian form; couples a dynamics kind with a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HamOp {
    /// min over u: drift q1 v_x + q3 v_y minus u_max (|q2| + |q4|).
    S4Goal,
    /// max over u_i, min over u_j: drift plus (u_i - u_j)(|q3| + |q4|).
    R4Game,
    /// Reference vehicle coasts (u_j = 0), Player 1 minimizes.
    R4Goal,
    /// 6-D game: u_i enters both relative and own-velocity rows.
    A6Game,
    /// Per-axis (p, v) goal form.
    D2Goal,
}

fn ham_op(kind: DynamicsKind, mode: Mode) -> Result<HamOp, ReachError> {
    match (kind, mode) {
        (DynamicsKind::Single4D, Mode::Goal) => Ok(HamOp::S4Goal),
        (DynamicsKind::Relative4D, Mode::Game) => Ok(HamOp::R4Game),
        (DynamicsKind::Relative4D, Mode::Goal) => Ok(HamOp::R4Goal),
        (DynamicsKind::AugRelative6D, Mode::Game) => Ok(HamOp::A6Game),
        (DynamicsKind::DoubleInt2D, Mode::Goal) => Ok(HamOp::D2Goal),
        (kind, mode) => Err(ReachError::UnsupportedMode { kind, mode }),
    }
}

#[inline]
fn ham_eval(op: HamOp, u_i: f64, u_j: f64, x: &[f64], q: &[f64]) -> f64 {
    match op {
        HamOp::S4Goal => q[0] * x[1] + q[2] * x[3] - u_i * (q[1].abs() + q[3].abs()),
        HamOp::R4Game => q[0] * x[2] + q[1] * x[3] + (u_i - u_j) * (q[2].abs() + q[3].abs()),
        HamOp::R4Goal => q[0] * x[2] + q[1] * x[3] - u_i * (q[2].abs() + q[3].abs()),
        HamOp::A6Game => {
            q[0] * x[2] + q[1] * x[3] + u_i * ((q[2] + q[4]).abs() + (q[3] + q[5]).abs())
                - u_j * (q[2].abs() + q[3].abs())
        }
        HamOp::D2Goal => q[0] * x[1] - u_i * q[1].abs(),
    }
}

/// Optimized Hamiltonian `opt_u [opt_d] q · f(x, u, d)` in closed form.
pub fn hamiltonian(
    dynamics: &DynamicsSpec,
    mode: Mode,
    state: &[f64],
    costate: &[f64],
) -> Result<f64, ReachError> {
    let dim = dynamics.state_dim();
    if state.len() != dim || costate.len() != dim {
        return Err(ReachError::DimensionMismatch {
            expected: dim,
            got: if state.len() != dim {
                state.len()
            } else {
                costate.len()
            },
        });
    }
    let op = ham_op(dynamics.kind, mode)?;
    Ok(ham_eval(op, dynamics.u_max_i, dynamics.u_max_j, state, costate))
}

/// Largest velocity magnitude representable on an axis.
fn vbound(a: &AxisSpec) -> f64 {
    a.min.abs().max(a.max.abs())
}

/// Per-axis Lax–Friedrichs dissipation bounds `max |∂H/∂q_k|` over the grid.
fn lf_alphas(op: HamOp, u_i: f64, u_j: f64, axes: &[AxisSpec]) -> Vec<f64> {
    match op {
        HamOp::S4Goal => vec![vbound(&axes[1]), u_i, vbound(&axes[3]), u_i],
        HamOp::R4Game => {
            let a = (u_i - u_j).abs();
            vec![vbound(&axes[2]), vbound(&axes[3]), a, a]
        }
        HamOp::R4Goal => vec![vbound(&axes[2]), vbound(&axes[3]), u_i, u_i],
        HamOp::A6Game => vec![
            vbound(&axes[2]),
            vbound(&axes[3]),
            u_i + u_j,
            u_i + u_j,
            u_i,
            u_i,
        ],
        HamOp::D2Goal => vec![vbound(&axes[1]), u_i],
    }
}

/// Position axes advect with a speed equal to one of the state's velocity
/// coordinates, so `|dH/dq_k|` at a node is exactly `|x_m|` for that axis.
/// Using the node-local value instead of the grid-wide bound turns the
/// advective part of the scheme into pure upwinding (far less smearing)
/// while every stencil weight stays nonnegative, since the local value never
/// exceeds the bound used for the CFL step size. `Some(m)` marks axis `k` as
/// advected by coordinate `m`; `None` keeps the constant bound from
/// [`lf_alphas`].
fn lf_alpha_sources(op: HamOp) -> [Option<usize>; MAX_NDIM] {
    let mut src = [None; MAX_NDIM];
    match op {
        HamOp::S4Goal => {
            src[0] = Some(1);
            src[2] = Some(3);
        }
        HamOp::R4Game | HamOp::R4Goal | HamOp::A6Game => {
            src[0] = Some(2);
            src[1] = Some(3);
        }
        HamOp::D2Goal => {
            src[0] = Some(1);
        }
    }
    src
}

const CFL_FACTOR: f64 = 0.9;
const MAX_NDIM: usize = 6;

/// Grid-resolved explicit stepper for one Hamiltonian form.
struct Stepper {
    ndim: usize,
    counts: [usize; MAX_NDIM],
    strides: [usize; MAX_NDIM],
    inv_h: [f64; MAX_NDIM],
    alpha: [f64; MAX_NDIM],
    alpha_src: [Option<usize>; MAX_NDIM],
    nodes: Vec<Vec<f64>>,
    op: HamOp,
    u_i: f64,
    u_j: f64,
}

impl Stepper {
    fn new(op: HamOp, dynamics: &DynamicsSpec, axes: &[AxisSpec]) -> Self {
        let ndim = axes.len();
        let alphas = lf_alphas(op, dynamics.u_max_i, dynamics.u_max_j, axes);
        let mut counts = [1usize; MAX_NDIM];
        let mut strides = [0usize; MAX_NDIM];
        let mut inv_h = [0f64; MAX_NDIM];
        let mut alpha = [0f64; MAX_NDIM];
        for k in 0..ndim {
            counts[k] = axes[k].count;
            inv_h[k] = 1.0 / axes[k].spacing();
            alpha[k] = alphas[k];
        }
        let mut s = 1usize;
        for k in (0..ndim).rev() {
            strides[k] = s;
            s *= counts[k];
        }
        let nodes = axes
            .iter()
            .map(|a| (0..a.count).map(|i| a.node(i)).collect())
            .collect();
        Self {
            ndim,
            counts,
            strides,
            inv_h,
            alpha,
            alpha_src: lf_alpha_sources(op),
            nodes,
            op,
            u_i: dynamics.u_max_i,
            u_j: dynamics.u_max_j,
        }
    }

    /// Largest stable time step under the CFL bound.
    fn cfl_dt(&self, window: f64) -> f64 {
        let sum: f64 = (0..self.ndim).map(|k| self.alpha[k] * self.inv_h[k]).sum();
        if sum > 0.0 {
            (CFL_FACTOR / sum).min(window)
        } else {
            window
        }
    }

    /// One explicit Euler step of length `dt` backward in time; `freeze`
    /// clips the update to `min(previous, candidate)`. Returns whether every
    /// written value stayed finite.
    fn step(&self, prev: &[f64], next: &mut [f64], dt: f64, freeze: bool) -> bool {
        let ndim = self.ndim;
        let mut ci = [0usize; MAX_NDIM];
        let mut xv = [0f64; MAX_NDIM];
        for k in 0..ndim {
            xv[k] = self.nodes[k][0];
        }
        let mut finite = true;
        for idx in 0..prev.len() {
            let v0 = prev[idx];
            let mut qc = [0f64; MAX_NDIM];
            let mut diss = 0.0;
            for k in 0..ndim {
                let s = self.strides[k];
                let i = ci[k];
                // Ghost nodes copy the edge value (zero-order extension).
                // Linear extrapolation would cancel the dissipation term at
                // the edge and hand the ghost neighbor a negative stencil
                // weight, losing monotonicity; boundary values then ratchet
                // away wherever characteristics enter the domain. With copied
                // ghosts every weight stays nonnegative under the CFL bound,
                // so values obey the max principle at the cost of a little
                // extra smearing in the outermost cells.
                let (qm, qp) = if i == 0 {
                    (0.0, (prev[idx + s] - v0) * self.inv_h[k])
                } else if i == self.counts[k] - 1 {
                    ((v0 - prev[idx - s]) * self.inv_h[k], 0.0)
                } else {
                    (
                        (v0 - prev[idx - s]) * self.inv_h[k],
                        (prev[idx + s] - v0) * self.inv_h[k],
                    )
                };
                qc[k] = 0.5 * (qm + qp);
                let a = match self.alpha_src[k] {
                    Some(m) => xv[m].abs(),
                    None => self.alpha[k],
                };
                diss += a * 0.5 * (qp - qm);
            }
            let h = ham_eval(self.op, self.u_i, self.u_j, &xv[..ndim], &qc[..ndim]);
            // Marching in increasing |t|: V(t - dt) = V(t) + dt (H + diss).
            let mut vn = v0 + dt * (h + diss);
            if freeze && vn > v0 {
                vn = v0;
            }
            if !vn.is_finite() {
                finite = false;
            }
            next[idx] = vn;
            for k in (0..ndim).rev() {
                ci[k] += 1;
                if ci[k] < self.counts[k] {
                    xv[k] = self.nodes[k][ci[k]];
                    break;
                }
                ci[k] = 0;
                xv[k] = self.nodes[k][0];
            }
        }
        finite
    }
}

/// Time-step scales tried before giving up on a non-finite solve.
const DT_SCALES: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

fn march_windows(
    stepper: &Stepper,
    l: &ScalarFieldND,
    store_times: &[f64],
    freeze: bool,
) -> Result<Vec<ScalarFieldND>, ReachError> {
    'attempt: for scale in DT_SCALES {
        let mut slices = Vec::with_capacity(store_times.len());
        let mut first = l.clone();
        first.time = Some(0.0);
        slices.push(first);
        let mut prev = l.values().to_vec();
        let mut next = vec![0.0f64; prev.len()];
        for w in 1..store_times.len() {
            let window = store_times[w - 1] - store_times[w];
            let dt_max = stepper.cfl_dt(window) * scale;
            let n = (window / dt_max).ceil().max(1.0) as usize;
            let dt = window / n as f64;
            for _ in 0..n {
                if !stepper.step(&prev, &mut next, dt, freeze) {
                    continue 'attempt;
                }
                std::mem::swap(&mut prev, &mut next);
            }
            let mut slice = ScalarFieldND::new(l.axes().to_vec(), prev.clone())?;
            slice.time = Some(store_times[w]);
            slices.push(slice);
        }
        return Ok(slices);
    }
    Err(ReachError::NonFiniteValue)
}

/// Stored-slice layout of a [`BackwardReachableSet`].
#[derive(Debug, Clone)]
enum Repr {
    /// Full-dimensional value-function slices, descending in time from 0.
    Dense(Vec<ScalarFieldND>),
    /// Per-axis `(p, v)` subsystem slices solved in fixed-time form and
    /// recombined on query; `grid` is the virtual 4-D grid.
    Decomposed {
        sub_x: Vec<ScalarFieldND>,
        sub_y: Vec<ScalarFieldND>,
        times: Vec<f64>,
        grid: Vec<AxisSpec>,
    },
}

/// Which player's control to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Player {
    /// The controlled vehicle (minimizer in goal mode, evader in game mode).
    One,
    /// The opponent (only defined in game mode).
    Two,
}

/// Value function of a backward-reachability problem with query helpers.
#[derive(Debug, Clone)]
pub struct BackwardReachableSet {
    pub dynamics: DynamicsSpec,
    pub mode: Mode,
    /// Positive horizon T; slices span t ∈ [−T, 0].
    pub horizon: f64,
    repr: Repr,
}

const TIME_EPS: f64 = 1e-9;

impl BackwardReachableSet {
    /// Assemble from externally produced slices (e.g. loaded from disk).
    /// Slices must start at t = 0 and be strictly decreasing in time on one
    /// common grid.
    pub fn from_slices(
        dynamics: DynamicsSpec,
        mode: Mode,
        slices: Vec<ScalarFieldND>,
    ) -> Result<Self, ReachError> {
        ham_op(dynamics.kind, mode)?;
        if slices.is_empty() || slices[0].time.unwrap_or(f64::NAN).abs() > TIME_EPS {
            return Err(ReachError::BadSlices);
        }
        let mut t_prev = 0.0;
        for (i, s) in slices.iter().enumerate() {
            if s.ndim() != dynamics.state_dim() {
                return Err(ReachError::GridMismatch {
                    expected: dynamics.state_dim(),
                    got: s.ndim(),
                });
            }
            if s.axes() != slices[0].axes() {
                return Err(ReachError::BadSlices);
            }
            let t = s.time.ok_or(ReachError::BadSlices)?;
            if i > 0 && t >= t_prev - TIME_EPS {
                return Err(ReachError::BadSlices);
            }
            t_prev = t;
        }
        let horizon = -t_prev;
        Ok(Self {
            dynamics,
            mode,
            horizon,
            repr: Repr::Dense(slices),
        })
    }

    /// The grid the value function lives on (the virtual 4-D grid for the
    /// decomposed representation).
    pub fn grid(&self) -> &[AxisSpec] {
        match &self.repr {
            Repr::Dense(slices) => slices[0].axes(),
            Repr::Decomposed { grid, .. } => grid,
        }
    }

    /// Dense slices in descending time order, if this set is dense.
    pub fn slices(&self) -> Option<&[ScalarFieldND]> {
        match &self.repr {
            Repr::Dense(s) => Some(s),
            Repr::Decomposed { .. } => None,
        }
    }

    /// Whether `x` lies inside the grid bounds.
    pub fn contains_state(&self, x: &[f64]) -> bool {
        x.len() == self.grid().len()
            && x.iter().zip(self.grid()).all(|(&v, a)| {
                let eps = 1e-9 * (a.max - a.min).abs();
                v >= a.min - eps && v <= a.max + eps
            })
    }

    fn check_time(&self, t: f64) -> Result<f64, ReachError> {
        if !t.is_finite() || t > TIME_EPS || t < -self.horizon - TIME_EPS {
            return Err(ReachError::TimeOutOfRange {
                t,
                min_t: -self.horizon,
            });
        }
        Ok(t.clamp(-self.horizon, 0.0))
    }

    /// Value `V(t, x)` from the nearest stored slice at or below `t`
    /// (the conservative side for safety queries: larger |t| slices have
    /// smaller values, and safety requires a positive value).
    pub fn value_at(&self, t: f64, x: &[f64]) -> Result<f64, ReachError> {
        let t = self.check_time(t)?;
        match &self.repr {
            Repr::Dense(slices) => {
                let slice = slices
                    .iter()
                    .find(|s| s.time.unwrap_or(0.0) <= t + TIME_EPS)
                    .unwrap_or_else(|| slices.last().expect("nonempty"));
                Ok(slice.sample(x)?)
            }
            Repr::Decomposed {
                sub_x,
                sub_y,
                times,
                ..
            } => {
                if x.len() != 4 {
                    return Err(ReachError::DimensionMismatch {
                        expected: 4,
                        got: x.len(),
                    });
                }
                let px = [x[0], x[1]];
                let py = [x[2], x[3]];
                let mut best = f64::INFINITY;
                for (i, &s) in times.iter().enumerate() {
                    if s < t - TIME_EPS {
                        break;
                    }
                    let v = sub_x[i].sample(&px)?.max(sub_y[i].sample(&py)?);
                    best = best.min(v);
                }
                Ok(best)
            }
        }
    }

    /// Bang-bang control extracted from the spatial gradient of the value
    /// function.
    ///
    /// Goal mode reads the gradient on the earliest stored slice (smallest
    /// |time| ≤ |t|) whose zero sublevel set already contains `x` — the
    /// slice whose boundary passes through the state, where the descent
    /// direction is sharp; if no stored slice contains `x`, the slice used
    /// by [`Self::value_at`] supplies the gradient.
    ///
    /// Game mode always reads the slice at the queried horizon: that is the
    /// value the players fight over, and early slices offer no guidance
    /// inside the target (they reduce to the target surface, which carries
    /// no velocity dependence). Where the value is frozen flat along the
    /// velocity axes, the control instead pushes the relative velocity
    /// along the position gradient — the direction that grows the drift
    /// term fastest — so a vehicle already inside the unsafe set flees
    /// through the nearest face instead of coasting.
    pub fn optimal_control(&self, t: f64, x: &[f64], player: Player) -> Result<[f64; 2], ReachError> {
        let t = self.check_time(t)?;
        let op = ham_op(self.dynamics.kind, self.mode)?;
        if player == Player::Two && self.mode == Mode::Goal {
            return Err(ReachError::UnsupportedMode {
                kind: self.dynamics.kind,
                mode: self.mode,
            });
        }
        let bound = match player {
            Player::One => self.dynamics.u_max_i,
            Player::Two => self.dynamics.u_max_j,
        };
        let q = match &self.repr {
            Repr::Dense(slices) => {
                let at_horizon = || {
                    slices
                        .iter()
                        .find(|s| s.time.unwrap_or(0.0) <= t + TIME_EPS)
                        .unwrap_or_else(|| slices.last().expect("nonempty"))
                };
                let slice = if self.mode == Mode::Game {
                    at_horizon()
                } else {
                    let mut chosen = None;
                    for s in slices.iter().rev() {
                        if s.time.unwrap_or(0.0) < t - TIME_EPS {
                            continue;
                        }
                        if s.sample(x)? <= 0.0 {
                            chosen = Some(s);
                        }
                    }
                    chosen.unwrap_or_else(at_horizon)
                };
                slice.gradient(x)?
            }
            Repr::Decomposed {
                sub_x,
                sub_y,
                times,
                ..
            } => {
                let px = [x[0], x[1]];
                let py = [x[2], x[3]];
                // Earliest time whose recombined value is nonpositive, else
                // the overall minimizer.
                let mut pick = 0usize;
                let mut best = f64::INFINITY;
                let mut found = false;
                for i in (0..times.len()).rev() {
                    if times[i] < t - TIME_EPS {
                        continue;
                    }
                    let v = sub_x[i].sample(&px)?.max(sub_y[i].sample(&py)?);
                    if v <= 0.0 {
                        pick = i;
                        found = true;
                    }
                    if v < best {
                        best = v;
                        if !found {
                            pick = i;
                        }
                    }
                }
                let qx = sub_x[pick].gradient(&px)?;
                let qy = sub_y[pick].gradient(&py)?;
                // Assemble the 4-D costate in Single4D ordering.
                vec![qx[0], qx[1], qy[0], qy[1]]
            }
        };
        // Velocity-axis gradient with a drift-growing fallback on the
        // frozen-plateau regions of game values (see the doc comment).
        let or_drift = |g_vel: f64, g_pos: f64| {
            if g_vel.abs() > 1e-9 {
                bound * sign0(g_vel)
            } else {
                bound * sign0(g_pos)
            }
        };
        let u = match op {
            HamOp::S4Goal => [-bound * sign0(q[1]), -bound * sign0(q[3])],
            HamOp::D2Goal => [-bound * sign0(q[1]), 0.0],
            HamOp::R4Goal => [-bound * sign0(q[2]), -bound * sign0(q[3])],
            HamOp::R4Game => [or_drift(q[2], q[0]), or_drift(q[3], q[1])],
            HamOp::A6Game => match player {
                Player::One => [or_drift(q[2] + q[4], q[0]), or_drift(q[3] + q[5], q[1])],
                Player::Two => [or_drift(q[2], q[0]), or_drift(q[3], q[1])],
            },
        };
        Ok(u)
    }

    /// Persist as an index file plus one HJVF file per slice, named after
    /// the index file's stem. Only dense sets are persisted.
    pub fn save(&self, index_path: &Path) -> Result<(), ReachError> {
        let slices = match &self.repr {
            Repr::Dense(s) => s,
            Repr::Decomposed { .. } => {
                return Err(ReachError::Index(
                    "decomposed sets are query-only and cannot be saved".into(),
                ))
            }
        };
        let stem = index_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| ReachError::Index("index path needs a file name".into()))?
            .to_string();
        let dir = index_path.parent().unwrap_or_else(|| Path::new("."));
        let mut names = Vec::with_capacity(slices.len());
        for (i, s) in slices.iter().enumerate() {
            let name = format!("{stem}_{i:03}.hjvf");
            s.save_hjvf(&dir.join(&name))?;
            names.push(name);
        }
        let index = BrsIndex {
            kind: self.dynamics.kind,
            mode: self.mode,
            u_max_i: self.dynamics.u_max_i,
            u_max_j: self.dynamics.u_max_j,
            v_max: self.dynamics.v_max,
            horizon: self.horizon,
            slices: names,
        };
        let text = toml::to_string_pretty(&index).map_err(|e| ReachError::Index(e.to_string()))?;
        let tmp = dir.join(format!("{stem}.tmp"));
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, index_path)?;
        Ok(())
    }

    pub fn load(index_path: &Path) -> Result<Self, ReachError> {
        let text = std::fs::read_to_string(index_path)?;
        let index: BrsIndex = toml::from_str(&text).map_err(|e| ReachError::Index(e.to_string()))?;
        let dynamics = DynamicsSpec::new(index.kind, index.u_max_i, index.u_max_j, index.v_max)?;
        let dir = index_path.parent().unwrap_or_else(|| Path::new("."));
        let mut slices = Vec::with_capacity(index.slices.len());
        for name in &index.slices {
            slices.push(ScalarFieldND::load_hjvf(&dir.join(name))?);
        }
        let brs = Self::from_slices(dynamics, index.mode, slices)?;
        if (brs.horizon - index.horizon).abs() > 1e-6 * index.horizon.max(1.0) {
            return Err(ReachError::Index(format!(
                "index horizon {} disagrees with slice times (last = {})",
                index.horizon, -brs.horizon
            )));
        }
        Ok(brs)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BrsIndex {
    kind: DynamicsKind,
    mode: Mode,
    u_max_i: f64,
    u_max_j: f64,
    v_max: f64,
    horizon: f64,
    slices: Vec<String>,
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Solve the terminal-value HJ PDE backward over `[−horizon, 0]`, storing a
/// slice every `store_interval` seconds (plus one at exactly −horizon).
pub fn solve_hji(
    dynamics: &DynamicsSpec,
    mode: Mode,
    l: &ScalarFieldND,
    horizon: f64,
    store_interval: f64,
) -> Result<BackwardReachableSet, ReachError> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(ReachError::BadHorizon(horizon));
    }
    if !(store_interval > 0.0) {
        return Err(ReachError::BadStoreInterval(store_interval));
    }
    if l.ndim() != dynamics.state_dim() {
        return Err(ReachError::GridMismatch {
            expected: dynamics.state_dim(),
            got: l.ndim(),
        });
    }
    let op = ham_op(dynamics.kind, mode)?;
    let mut store_times = vec![0.0];
    let mut k = 1usize;
    while (k as f64) * store_interval < horizon - TIME_EPS * horizon.max(1.0) {
        store_times.push(-(k as f64) * store_interval);
        k += 1;
    }
    store_times.push(-horizon);
    let stepper = Stepper::new(op, dynamics, l.axes());
    let slices = march_windows(&stepper, l, &store_times, true)?;
    Ok(BackwardReachableSet {
        dynamics: *dynamics,
        mode,
        horizon,
        repr: Repr::Dense(slices),
    })
}

/// Exact-decomposition solve for Single4D with an axis-aligned box target:
/// the x and y `(p, v)` subsystems are solved independently in fixed-time
/// (no-freeze) form with a shared time step and a slice stored at every
/// step, and queries recombine them as
/// `V(t, x) = min over stored s ∈ [t, 0] of max(V_x(s), V_y(s))`.
pub fn decompose_solve_single4d(
    dynamics: &DynamicsSpec,
    target: &TargetSpec,
    grid: &[AxisSpec],
    horizon: f64,
) -> Result<BackwardReachableSet, ReachError> {
    if dynamics.kind != DynamicsKind::Single4D {
        return Err(ReachError::UnsupportedMode {
            kind: dynamics.kind,
            mode: Mode::Goal,
        });
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(ReachError::BadHorizon(horizon));
    }
    if grid.len() != 4 {
        return Err(ReachError::GridMismatch {
            expected: 4,
            got: grid.len(),
        });
    }
    let (center, radii) = match target {
        TargetSpec::Box { center, radii } => (center, radii),
        _ => return Err(ReachError::NonBoxTarget),
    };
    if center.len() != 4 || radii.len() != 4 {
        return Err(ReachError::GridMismatch {
            expected: 4,
            got: center.len(),
        });
    }
    let sub = DynamicsSpec::new(
        DynamicsKind::DoubleInt2D,
        dynamics.u_max_i,
        0.0,
        dynamics.v_max,
    )?;
    let axes_x = vec![grid[0], grid[1]];
    let axes_y = vec![grid[2], grid[3]];
    let l_x = implicit_surface(
        &TargetSpec::Box {
            center: vec![center[0], center[1]],
            radii: vec![radii[0], radii[1]],
        },
        &axes_x,
    )?;
    let l_y = implicit_surface(
        &TargetSpec::Box {
            center: vec![center[2], center[3]],
            radii: vec![radii[2], radii[3]],
        },
        &axes_y,
    )?;
    let st_x = Stepper::new(HamOp::D2Goal, &sub, &axes_x);
    let st_y = Stepper::new(HamOp::D2Goal, &sub, &axes_y);
    let dt_raw = st_x.cfl_dt(horizon).min(st_y.cfl_dt(horizon));
    let n = (horizon / dt_raw).ceil().max(1.0) as usize;
    // Shared per-step store times for both subsystems.
    let mut times = Vec::with_capacity(n + 1);
    for k in 0..=n {
        times.push(if k == n {
            -horizon
        } else {
            -(k as f64) * horizon / n as f64
        });
    }
    let sub_x = march_windows(&st_x, &l_x, &times, false)?;
    let sub_y = march_windows(&st_y, &l_y, &times, false)?;
    Ok(BackwardReachableSet {
        dynamics: *dynamics,
        mode: Mode::Goal,
        horizon,
        repr: Repr::Decomposed {
            sub_x,
            sub_y,
            times,
            grid: grid.to_vec(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DynamicsKind, u_i: f64, u_j: f64) -> DynamicsSpec {
        DynamicsSpec::new(kind, u_i, u_j, 20.0).unwrap()
    }

    #[test]
    fn hamiltonian_single4d_goal_closed_form() {
        let d = spec(DynamicsKind::Single4D, 1.0, 0.0);
        let h = hamiltonian(&d, Mode::Goal, &[0.0, 2.0, 0.0, 3.0], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((h - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_relative4d_equal_bounds_cancels_controls() {
        let d = spec(DynamicsKind::Relative4D, 2.5, 2.5);
        for q34 in [[0.0, 0.0], [5.0, -7.0], [-0.3, 0.3]] {
            let q = [1.0, -1.0, q34[0], q34[1]];
            let h = hamiltonian(&d, Mode::Game, &[0.0, 0.0, 1.0, -1.0], &q).unwrap();
            // Drift q1*v_xr + q2*v_yr = 1*1 + (-1)*(-1) = 2; control terms gone.
            assert!((h - 2.0).abs() < 1e-12, "q34 = {q34:?}");
        }
    }

    #[test]
    fn hamiltonian_augmented6d_closed_form() {
        let d = spec(DynamicsKind::AugRelative6D, 1.0, 1.0);
        let h = hamiltonian(
            &d,
            Mode::Game,
            &[0.0; 6],
            &[0.0, 0.0, 1.0, 0.0, -1.0, 0.0],
        )
        .unwrap();
        assert!((h - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_rejects_mismatch_and_unsupported_modes() {
        let d = spec(DynamicsKind::Single4D, 1.0, 0.0);
        assert!(matches!(
            hamiltonian(&d, Mode::Goal, &[0.0; 3], &[0.0; 4]),
            Err(ReachError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            hamiltonian(&d, Mode::Game, &[0.0; 4], &[0.0; 4]),
            Err(ReachError::UnsupportedMode { .. })
        ));
    }

    #[test]
    fn implicit_surface_box_values() {
        let axes = vec![
            AxisSpec::new(-2.0, 2.0, 5),
            AxisSpec::new(-2.0, 2.0, 5),
            AxisSpec::new(-2.0, 2.0, 5),
            AxisSpec::new(-2.0, 2.0, 5),
        ];
        let t = TargetSpec::Box {
            center: vec![0.0; 4],
            radii: vec![1.0; 4],
        };
        let l = implicit_surface(&t, &axes).unwrap();
        assert!((l.sample(&[0.0; 4]).unwrap() + 1.0).abs() < 1e-12);
        assert!((l.sample(&[2.0, 0.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn implicit_surface_safety_values() {
        let ax = |lim: f64| AxisSpec::new(-lim, lim, 5);
        let t = TargetSpec::Safety {
            d: 5.0,
            v_max: 20.0,
        };
        // 6-D: one axis within d, the other not, own velocity well inside.
        let axes6 = vec![ax(10.0), ax(10.0), ax(8.0), ax(8.0), ax(20.0), ax(20.0)];
        let l6 = implicit_surface(&t, &axes6).unwrap();
        let v = l6.sample(&[0.0, 10.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((v - 5.0).abs() < 1e-12);
        // 4-D reduction keeps only the position conjunction. Unit spacing
        // puts the probe states exactly on grid nodes, where the stored
        // surface is exact.
        let axes4 = vec![
            AxisSpec::new(-10.0, 10.0, 21),
            AxisSpec::new(-10.0, 10.0, 21),
            AxisSpec::new(-8.0, 8.0, 17),
            AxisSpec::new(-8.0, 8.0, 17),
        ];
        let l4 = implicit_surface(&t, &axes4).unwrap();
        assert!((l4.sample(&[0.0, 10.0, 0.0, 0.0]).unwrap() - 5.0).abs() < 1e-12);
        assert!((l4.sample(&[1.0, 1.0, 0.0, 0.0]).unwrap() + 4.0).abs() < 1e-12);
    }

    fn small_2d_problem() -> (DynamicsSpec, ScalarFieldND) {
        let d = spec(DynamicsKind::DoubleInt2D, 1.0, 0.0);
        let axes = vec![AxisSpec::new(-2.0, 2.0, 81), AxisSpec::new(-2.0, 2.0, 81)];
        let l = implicit_surface(
            &TargetSpec::Box {
                center: vec![0.0, 0.0],
                radii: vec![0.25, 0.25],
            },
            &axes,
        )
        .unwrap();
        (d, l)
    }

    #[test]
    fn slice_zero_is_terminal_condition_exactly() {
        let (d, l) = small_2d_problem();
        let brs = solve_hji(&d, Mode::Goal, &l, 0.2, 0.1).unwrap();
        let s0 = &brs.slices().unwrap()[0];
        assert_eq!(s0.values(), l.values());
        assert_eq!(s0.time, Some(0.0));
    }

    #[test]
    fn freezing_makes_values_nonincreasing_in_time() {
        let (d, l) = small_2d_problem();
        let brs = solve_hji(&d, Mode::Goal, &l, 0.5, 0.1).unwrap();
        let slices = brs.slices().unwrap();
        assert_eq!(slices.len(), 6);
        for w in slices.windows(2) {
            for (a, b) in w[0].values().iter().zip(w[1].values()) {
                assert!(*b <= a + 1e-12);
            }
        }
    }

    #[test]
    fn small_brs_membership_is_sensible() {
        let (d, l) = small_2d_problem();
        let brs = solve_hji(&d, Mode::Goal, &l, 1.0, 0.25).unwrap();
        // Braking from (-0.5, 0.5): inside the box (position and speed within
        // 0.25) before t = 1, so the state is in the BRS.
        assert!(brs.value_at(-1.0, &[-0.5, 0.5]).unwrap() < 0.0);
        // From (1.5, 0) at most 0.5 m can be covered in 1 s with |u| <= 1.
        assert!(brs.value_at(-1.0, &[1.5, 0.0]).unwrap() > 0.0);
        // The target center stays inside at every queried time.
        for t in [0.0, -0.3, -0.6, -1.0] {
            assert!(brs.value_at(t, &[0.0, 0.0]).unwrap() <= 0.0);
        }
    }

    #[test]
    fn value_at_uses_the_slice_at_or_below_t() {
        let (d, l) = small_2d_problem();
        let brs = solve_hji(&d, Mode::Goal, &l, 1.0, 0.5).unwrap();
        let slices = brs.slices().unwrap();
        let x = [0.6, -0.3];
        let v = brs.value_at(-0.3, &x).unwrap();
        assert_eq!(v, slices[1].sample(&x).unwrap());
        assert_eq!(slices[1].time, Some(-0.5));
        assert!(matches!(
            brs.value_at(-1.2, &x),
            Err(ReachError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            brs.value_at(0.1, &x),
            Err(ReachError::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn solver_rejects_bad_arguments() {
        let (d, l) = small_2d_problem();
        assert!(matches!(
            solve_hji(&d, Mode::Goal, &l, -1.0, 0.1),
            Err(ReachError::BadHorizon(_))
        ));
        assert!(matches!(
            solve_hji(&d, Mode::Goal, &l, 1.0, 0.0),
            Err(ReachError::BadStoreInterval(_))
        ));
        assert!(matches!(
            solve_hji(&d, Mode::Game, &l, 1.0, 0.1),
            Err(ReachError::UnsupportedMode { .. })
        ));
        let d4 = spec(DynamicsKind::Single4D, 1.0, 0.0);
        assert!(matches!(
            solve_hji(&d4, Mode::Goal, &l, 1.0, 0.1),
            Err(ReachError::GridMismatch { .. })
        ));
    }

    /// Hand-built single-slice set with a linear value function, so the
    /// interpolated gradient is exact and control signs are forced.
    fn linear_brs(kind: DynamicsKind, mode: Mode, coeffs: &[f64]) -> BackwardReachableSet {
        let axes = vec![AxisSpec::new(-1.0, 1.0, 3); coeffs.len()];
        let c = coeffs.to_vec();
        let mut l = ScalarFieldND::from_fn(axes, |x| {
            x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        })
        .unwrap();
        l.time = Some(0.0);
        let d = DynamicsSpec::new(kind, 2.0, 1.0, 20.0).unwrap();
        BackwardReachableSet::from_slices(d, mode, vec![l]).unwrap()
    }

    #[test]
    fn control_signs_follow_the_gradient() {
        // Goal mode: V = v_x, gradient q = (0,1,0,0), so u_x = -u_max.
        let brs = linear_brs(DynamicsKind::Single4D, Mode::Goal, &[0.0, 1.0, 0.0, 0.0]);
        let u = brs.optimal_control(0.0, &[0.0; 4], Player::One).unwrap();
        assert_eq!(u, [-2.0, 0.0]);
        // Evader with q3 < 0, q4 > 0 accelerates away: (-u_max, +u_max).
        let brs = linear_brs(DynamicsKind::Relative4D, Mode::Game, &[0.0, 0.0, -1.0, 1.0]);
        let u = brs.optimal_control(0.0, &[0.0; 4], Player::One).unwrap();
        assert_eq!(u, [-2.0, 2.0]);
        let u = brs.optimal_control(0.0, &[0.0; 4], Player::Two).unwrap();
        assert_eq!(u, [-1.0, 1.0]);
        // Zero gradient on an axis gives zero control on that axis.
        let brs = linear_brs(DynamicsKind::Single4D, Mode::Goal, &[0.0, 0.0, 0.0, 1.0]);
        let u = brs.optimal_control(0.0, &[0.0; 4], Player::One).unwrap();
        assert_eq!(u, [0.0, -2.0]);
        // Pursuer extraction is rejected in goal mode.
        assert!(matches!(
            brs.optimal_control(0.0, &[0.0; 4], Player::Two),
            Err(ReachError::UnsupportedMode { .. })
        ));
    }

    #[test]
    fn decomposition_matches_box_surface_at_time_zero() {
        let d = spec(DynamicsKind::Single4D, 1.0, 0.0);
        let grid = vec![
            AxisSpec::new(-2.0, 2.0, 11),
            AxisSpec::new(-1.0, 1.0, 11),
            AxisSpec::new(-2.0, 2.0, 11),
            AxisSpec::new(-1.0, 1.0, 11),
        ];
        let target = TargetSpec::Box {
            center: vec![0.0; 4],
            radii: vec![0.25; 4],
        };
        let brs = decompose_solve_single4d(&d, &target, &grid, 0.6).unwrap();
        let l4 = implicit_surface(&target, &grid).unwrap();
        for x in [
            [0.0, 0.0, 0.0, 0.0],
            [0.4, 0.2, -0.8, 0.0],
            [1.6, -0.6, 1.2, 0.4],
        ] {
            let got = brs.value_at(0.0, &x).unwrap();
            let want = l4.sample(&x).unwrap();
            assert!((got - want).abs() < 1e-9, "at {x:?}: {got} vs {want}");
        }
        // Symmetric problem: swapping the x and y subsystem states is a no-op.
        let a = brs.value_at(-0.6, &[0.5, -0.3, 1.0, 0.2]).unwrap();
        let b = brs.value_at(-0.6, &[1.0, 0.2, 0.5, -0.3]).unwrap();
        assert!((a - b).abs() < 1e-12);
        // Membership end points.
        assert!(brs.value_at(-0.6, &[0.0; 4]).unwrap() <= 0.0);
        assert!(brs.value_at(-0.6, &[1.9, 0.9, 1.9, 0.9]).unwrap() > 0.0);
    }

    #[test]
    fn decomposition_rejects_non_box_targets() {
        let d = spec(DynamicsKind::Single4D, 1.0, 0.0);
        let grid = vec![AxisSpec::new(-1.0, 1.0, 5); 4];
        let t = TargetSpec::Safety {
            d: 5.0,
            v_max: 20.0,
        };
        assert!(matches!(
            decompose_solve_single4d(&d, &t, &grid, 1.0),
            Err(ReachError::NonBoxTarget)
        ));
    }

    #[test]
    fn save_load_roundtrip_preserves_slices() {
        let (d, l) = small_2d_problem();
        let brs = solve_hji(&d, Mode::Goal, &l, 0.4, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let index = dir.path().join("brs.toml");
        brs.save(&index).unwrap();
        let loaded = BackwardReachableSet::load(&index).unwrap();
        assert_eq!(loaded.dynamics, brs.dynamics);
        assert_eq!(loaded.mode, brs.mode);
        let (a, b) = (brs.slices().unwrap(), loaded.slices().unwrap());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.values(), y.values());
            assert_eq!(x.time, y.time);
        }
    }
}
