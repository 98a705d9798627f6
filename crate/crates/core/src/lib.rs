//! Air-highway placement and UAV platoon simulation.
//!
//! The crate has two halves that share a small numerical core:
//!
//! * **Placement** — [`costmap`] holds 2-D cost rasters, [`eikonal`] solves
//!   `|∇V| = c(p)` with the fast marching method and extracts cost-minimizing
//!   paths by gradient descent, and [`highways`] sparsifies those paths into a
//!   waypoint graph of directed, constant-speed highway segments.
//! * **Platooning** — [`reachability`] computes backward reachable sets for
//!   planar double-integrator vehicles (single-vehicle goal sets, relative-state
//!   goal sets, and pursuit–evasion safety sets), [`controllers`] turns them
//!   into goal-satisfaction and collision-avoidance control laws, and
//!   [`vehicles`] + [`sim`] run the hybrid Free/Leader/Follower/Faulty mode
//!   machine in deterministic closed-loop scenarios.
//!
//! Everything is plain CPU code on regular grids; no GPU, no global state.

pub mod controllers;
pub mod costmap;
pub mod eikonal;
pub mod highways;
pub mod reachability;
pub mod sim;
pub mod vehicles;
