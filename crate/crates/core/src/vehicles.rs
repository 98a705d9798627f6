//! Vehicle state, exact double-integrator stepping, the hybrid mode machine
//! (Free / Leader / Follower / Faulty), platoon rosters, and construction of
//! the per-vehicle safety-check sets.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("non-finite input to dynamics step")]
    NonFiniteInput,
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("acceleration/velocity bounds must be positive, got u_max={0}, v_max={1}")]
    BadBounds(f64, f64),
    #[error("event {event:?} is illegal from mode {mode:?}")]
    IllegalTransition { mode: Mode, event: Event },
}

/// Planar position and velocity of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub p: [f64; 2],
    pub v: [f64; 2],
}

impl VehicleState {
    pub fn new(p: [f64; 2], v: [f64; 2]) -> Self {
        Self { p, v }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(&self.v).all(|c| c.is_finite())
    }
}

/// Advance one exact double-integrator step: `u` is clamped componentwise to
/// `[-u_max, u_max]`, then `p += v dt + u dt²/2`, `v += u dt`, and finally
/// `v` is clamped componentwise to `[-v_max, v_max]`.
pub fn step_dynamics(
    x: &VehicleState,
    u: [f64; 2],
    dt: f64,
    u_max: f64,
    v_max: f64,
) -> Result<VehicleState, VehicleError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(VehicleError::BadStep(dt));
    }
    if !(u_max > 0.0) || !(v_max > 0.0) {
        return Err(VehicleError::BadBounds(u_max, v_max));
    }
    if !x.is_finite() || !u.iter().all(|c| c.is_finite()) {
        return Err(VehicleError::NonFiniteInput);
    }
    let mut next = *x;
    for k in 0..2 {
        let a = u[k].clamp(-u_max, u_max);
        next.p[k] += next.v[k] * dt + 0.5 * a * dt * dt;
        next.v[k] = (next.v[k] + a * dt).clamp(-v_max, v_max);
    }
    Ok(next)
}

/// Relative state of vehicle i with respect to vehicle j, ordered
/// `(p_xr, p_yr, v_xr, v_yr)`; antisymmetric under argument swap.
pub fn relative_state(x_i: &VehicleState, x_j: &VehicleState) -> [f64; 4] {
    [
        x_i.p[0] - x_j.p[0],
        x_i.p[1] - x_j.p[1],
        x_i.v[0] - x_j.v[0],
        x_i.v[1] - x_j.v[1],
    ]
}

/// Hybrid mode of a vehicle. `Follower::index` is the 1-based single-file
/// position, so followers always carry index ≥ 2 (the leader is position 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Free,
    Leader { highway: usize, platoon: usize },
    Follower { platoon: usize, index: usize },
    Faulty { clock: f64 },
}

impl Mode {
    pub fn tag(&self) -> &'static str {
        match self {
            Mode::Free => "free",
            Mode::Leader { .. } => "leader",
            Mode::Follower { .. } => "follower",
            Mode::Faulty { .. } => "faulty",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Events that drive the mode machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Event {
    /// Arrived on a highway and founded a new platoon: Free → Leader.
    MergeComplete { highway: usize, platoon: usize },
    /// Arrived at a reserved platoon slot: Free/Leader → Follower.
    JoinComplete { platoon: usize, index: usize },
    /// A follower breaks away to lead its own platoon.
    SplitFromPlatoon { highway: usize, platoon: usize },
    /// Leave the highway (and any platoon): Leader/Follower → Free.
    LeaveHighway,
    /// The vehicle ahead left the file: position 2 is promoted to Leader,
    /// everyone further back shifts forward one index.
    LeaderLeft { highway: usize },
    /// Irrecoverable fault: descend and leave the altitude level after t_d.
    FaultDetected,
}

/// Apply `event` to `mode` per the legality table; illegal pairs are
/// rejected without a state change.
pub fn request_transition(mode: Mode, event: Event) -> Result<Mode, VehicleError> {
    match (mode, event) {
        (Mode::Free, Event::MergeComplete { highway, platoon }) => {
            Ok(Mode::Leader { highway, platoon })
        }
        (Mode::Free, Event::JoinComplete { platoon, index }) if index >= 2 => {
            Ok(Mode::Follower { platoon, index })
        }
        (Mode::Leader { .. }, Event::JoinComplete { platoon, index }) if index >= 2 => {
            Ok(Mode::Follower { platoon, index })
        }
        (Mode::Follower { .. }, Event::SplitFromPlatoon { highway, platoon }) => {
            Ok(Mode::Leader { highway, platoon })
        }
        (Mode::Leader { .. }, Event::LeaveHighway) | (Mode::Follower { .. }, Event::LeaveHighway) => {
            Ok(Mode::Free)
        }
        (Mode::Follower { platoon, index: 2 }, Event::LeaderLeft { highway }) => {
            Ok(Mode::Leader { highway, platoon })
        }
        (Mode::Follower { platoon, index }, Event::LeaderLeft { .. }) if index > 2 => {
            Ok(Mode::Follower {
                platoon,
                index: index - 1,
            })
        }
        (Mode::Faulty { clock }, Event::FaultDetected) => Ok(Mode::Faulty { clock }),
        (Mode::Faulty { .. }, _) => Err(VehicleError::IllegalTransition { mode, event }),
        (_, Event::FaultDetected) => Ok(Mode::Faulty { clock: 0.0 }),
        _ => Err(VehicleError::IllegalTransition { mode, event }),
    }
}

/// One vehicle in the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: usize,
    pub state: VehicleState,
    pub mode: Mode,
}

/// Single-file platoon roster. `members` holds confirmed vehicles in
/// ascending index order (leader first); `reserved` holds slots promised to
/// inbound joiners so that simultaneous joins target distinct positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Platoon {
    pub id: usize,
    pub highway: usize,
    pub members: Vec<usize>,
    #[serde(default)]
    pub reserved: Vec<(usize, usize)>,
    pub d_sep: f64,
}

impl Platoon {
    /// Index (1-based single-file position) for the next joiner: one slot
    /// behind the last confirmed or reserved slot.
    pub fn next_slot(&self) -> usize {
        let reserved_max = self.reserved.iter().map(|&(_, i)| i).max().unwrap_or(0);
        self.members.len().max(reserved_max) + 1
    }
}

/// World snapshot used for safety-check-set construction.
#[derive(Debug, Clone, Default)]
pub struct World {
    pub vehicles: Vec<Vehicle>,
    pub platoons: Vec<Platoon>,
    /// Scripted vehicles that ignore controllers; everyone checks against them.
    pub intruders: Vec<usize>,
}

impl World {
    pub fn vehicle(&self, id: usize) -> Option<&Vehicle> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn platoon(&self, id: usize) -> Option<&Platoon> {
        self.platoons.iter().find(|p| p.id == id)
    }

    fn platoon_of(&self, vehicle: usize) -> Option<(&Platoon, usize)> {
        self.platoons.iter().find_map(|p| {
            p.members
                .iter()
                .position(|&m| m == vehicle)
                .map(|pos| (p, pos))
        })
    }
}

/// Per-vehicle list of the vehicles it must check safety against.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyCheckSet {
    entries: Vec<(usize, Vec<usize>)>,
}

impl SafetyCheckSet {
    /// Assemble a check set directly, for callers that widen or override the
    /// default neighbor lists.
    pub fn from_entries(entries: Vec<(usize, Vec<usize>)>) -> Self {
        Self { entries }
    }

    pub fn for_vehicle(&self, id: usize) -> &[usize] {
        self.entries
            .iter()
            .find(|(v, _)| *v == id)
            .map(|(_, q)| q.as_slice())
            .unwrap_or(&[])
    }

    pub fn entries(&self) -> &[(usize, Vec<usize>)] {
        &self.entries
    }
}

/// Build Q(i) for every vehicle: Free vehicles check everyone; platoon
/// members check their single-file neighbors (the leader checks position 2,
/// the trailer checks the member ahead); detected intruders and descending
/// Faulty vehicles are appended to every set. Faulty vehicles at or past
/// `t_d` are out of the altitude level and excluded everywhere.
pub fn safety_check_set(world: &World, t_d: f64) -> SafetyCheckSet {
    let active = |v: &Vehicle| match v.mode {
        Mode::Faulty { clock } => clock < t_d,
        _ => true,
    };
    let hazards: Vec<usize> = world
        .vehicles
        .iter()
        .filter(|v| {
            active(v)
                && (world.intruders.contains(&v.id) || matches!(v.mode, Mode::Faulty { .. }))
        })
        .map(|v| v.id)
        .collect();
    let mut entries = Vec::with_capacity(world.vehicles.len());
    for v in &world.vehicles {
        if !active(v) {
            entries.push((v.id, Vec::new()));
            continue;
        }
        let mut q: Vec<usize> = Vec::new();
        match world.platoon_of(v.id) {
            Some((platoon, pos)) => {
                if pos > 0 {
                    q.push(platoon.members[pos - 1]);
                }
                if pos + 1 < platoon.members.len() {
                    q.push(platoon.members[pos + 1]);
                }
            }
            None => {
                // Free, Faulty, or scripted: check against every other
                // active vehicle.
                q.extend(
                    world
                        .vehicles
                        .iter()
                        .filter(|o| o.id != v.id && active(o))
                        .map(|o| o.id),
                );
            }
        }
        for &h in &hazards {
            if h != v.id && !q.contains(&h) {
                q.push(h);
            }
        }
        entries.push((v.id, q));
    }
    SafetyCheckSet { entries }
}
