//! Waypoint sparsification and the directed air-highway graph.
//!
//! Cost-minimizing paths from the Eikonal solver are dense polylines; this
//! module reduces them to waypoints wherever the heading changes by more than
//! a threshold, optionally merges nearby waypoints across paths into
//! centroids, and strings consecutive waypoints into directed constant-speed
//! highway segments. Per-path highway sequences are retained so each chain
//! start/end invariant (origin → ... → destination) stays checkable.

use crate::eikonal::PathPolyline;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HighwayError {
    #[error("path must contain at least 2 distinct points")]
    DegeneratePath,
    #[error("heading threshold must lie in (0, pi), got {0}")]
    BadThreshold(f64),
    #[error("cluster radius must be nonnegative, got {0}")]
    BadRadius(f64),
    #[error("waypoint list {0} has fewer than 2 waypoints")]
    TooFewWaypoints(usize),
    #[error("consecutive waypoints coincide at ({0}, {1})")]
    DegenerateEdge(f64, f64),
    #[error("highway speed must be positive, got {0}")]
    BadSpeed(f64),
    #[error("highway parameter s = {0} outside [0, 1]")]
    SOutOfRange(f64),
}

/// Where a waypoint came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Point `j` of source path `i`.
    PathPoint { path: usize, point: usize },
    Origin,
    Destination,
    ClusterCentroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub id: usize,
    pub position: [f64; 2],
    pub provenance: Provenance,
}

/// Directed straight segment travelled at `speed` m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Highway {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub speed: f64,
}

impl Highway {
    pub fn new(start: [f64; 2], end: [f64; 2], speed: f64) -> Result<Self, HighwayError> {
        if !(speed > 0.0) {
            return Err(HighwayError::BadSpeed(speed));
        }
        if dist(start, end) < 1e-12 {
            return Err(HighwayError::DegenerateEdge(start[0], start[1]));
        }
        Ok(Self { start, end, speed })
    }

    pub fn length(&self) -> f64 {
        dist(self.start, self.end)
    }

    /// Unit direction of travel `(end - start) / |end - start|`.
    pub fn direction(&self) -> [f64; 2] {
        let len = self.length();
        [
            (self.end[0] - self.start[0]) / len,
            (self.end[1] - self.start[1]) / len,
        ]
    }

    /// Position and velocity at parameter `s ∈ [0, 1]` along the segment.
    pub fn state(&self, s: f64) -> Result<([f64; 2], [f64; 2]), HighwayError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(HighwayError::SOutOfRange(s));
        }
        let p = [
            self.start[0] + s * (self.end[0] - self.start[0]),
            self.start[1] + s * (self.end[1] - self.start[1]),
        ];
        let d = self.direction();
        Ok((p, [self.speed * d[0], self.speed * d[1]]))
    }

    /// Clamped arc-length parameter of the point nearest to `p`.
    pub fn project(&self, p: [f64; 2]) -> f64 {
        let dx = self.end[0] - self.start[0];
        let dy = self.end[1] - self.start[1];
        let l2 = dx * dx + dy * dy;
        (((p[0] - self.start[0]) * dx + (p[1] - self.start[1]) * dy) / l2).clamp(0.0, 1.0)
    }
}

/// Directed highway graph plus the per-source-path edge chains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HighwayGraph {
    pub waypoints: Vec<Waypoint>,
    /// Edges as (from waypoint id, to waypoint id, speed).
    pub edges: Vec<(usize, usize, f64)>,
    /// Edge-index chains, one per input path, satisfying the start/end
    /// chain conditions.
    pub sequences: Vec<Vec<usize>>,
}

impl HighwayGraph {
    pub fn highway(&self, edge: usize) -> Highway {
        let (a, b, speed) = self.edges[edge];
        Highway {
            start: self.waypoints[a].position,
            end: self.waypoints[b].position,
            speed,
        }
    }

    /// Check the chain invariant for one stored sequence: consecutive edges
    /// share endpoints, the first starts at `origin`, the last ends at `dest`.
    pub fn sequence_is_chain(&self, seq: usize, origin: [f64; 2], dest: [f64; 2]) -> bool {
        let chain = &self.sequences[seq];
        if chain.is_empty() {
            return false;
        }
        let first = self.highway(chain[0]);
        let last = self.highway(chain[chain.len() - 1]);
        if dist(first.start, origin) > 1e-9 || dist(last.end, dest) > 1e-9 {
            return false;
        }
        chain
            .windows(2)
            .all(|w| dist(self.highway(w[0]).end, self.highway(w[1]).start) <= 1e-9)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Wrap an angle difference into `(-pi, pi]`.
fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// Emit a waypoint wherever the path heading drifts more than `theta_c`
/// radians from the heading at the last emitted waypoint; the path's first
/// and last points are always included. `path_index` seeds provenance.
pub fn sparsify_by_heading(
    path: &PathPolyline,
    theta_c: f64,
    path_index: usize,
) -> Result<Vec<Waypoint>, HighwayError> {
    if !(theta_c > 0.0 && theta_c < std::f64::consts::PI) {
        return Err(HighwayError::BadThreshold(theta_c));
    }
    // Collapse consecutive duplicates; headings need nonzero segments.
    let mut pts: Vec<([f64; 2], usize)> = Vec::with_capacity(path.points.len());
    for (j, &p) in path.points.iter().enumerate() {
        if pts.last().map_or(true, |&(q, _)| dist(p, q) > 1e-12) {
            pts.push((p, j));
        }
    }
    if pts.len() < 2 {
        return Err(HighwayError::DegeneratePath);
    }

    let heading = |a: [f64; 2], b: [f64; 2]| (b[1] - a[1]).atan2(b[0] - a[0]);
    let mut out = vec![Waypoint {
        id: 0,
        position: pts[0].0,
        provenance: Provenance::Origin,
    }];
    let mut ref_heading = heading(pts[0].0, pts[1].0);
    for k in 1..pts.len() - 1 {
        let h = heading(pts[k].0, pts[k + 1].0);
        if wrap_angle(h - ref_heading).abs() > theta_c {
            out.push(Waypoint {
                id: out.len(),
                position: pts[k].0,
                provenance: Provenance::PathPoint {
                    path: path_index,
                    point: pts[k].1,
                },
            });
            ref_heading = h;
        }
    }
    out.push(Waypoint {
        id: out.len(),
        position: pts[pts.len() - 1].0,
        provenance: Provenance::Destination,
    });
    Ok(out)
}

/// Greedy radius clustering in input order: the first unclustered point
/// seeds a cluster that absorbs every unclustered point within `radius` of
/// it, and the cluster is replaced by its centroid. Origin and destination
/// waypoints are pinned: they pass through unchanged and absorb nothing.
pub fn cluster_waypoints(points: &[Waypoint], radius: f64) -> Result<Vec<Waypoint>, HighwayError> {
    if radius < 0.0 {
        return Err(HighwayError::BadRadius(radius));
    }
    let pinned = |w: &Waypoint| {
        matches!(w.provenance, Provenance::Origin | Provenance::Destination)
    };
    let mut used = vec![false; points.len()];
    let mut out: Vec<Waypoint> = Vec::new();
    for i in 0..points.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        if pinned(&points[i]) || radius == 0.0 {
            out.push(Waypoint {
                id: out.len(),
                ..points[i]
            });
            continue;
        }
        let mut members = vec![points[i].position];
        for j in i + 1..points.len() {
            if !used[j] && !pinned(&points[j]) && dist(points[i].position, points[j].position) <= radius
            {
                used[j] = true;
                members.push(points[j].position);
            }
        }
        let n = members.len() as f64;
        let centroid = members.iter().fold([0.0, 0.0], |acc, p| {
            [acc[0] + p[0] / n, acc[1] + p[1] / n]
        });
        out.push(Waypoint {
            id: out.len(),
            position: centroid,
            provenance: if members.len() == 1 {
                points[i].provenance
            } else {
                Provenance::ClusterCentroid
            },
        });
    }
    Ok(out)
}

/// Chain each path's waypoints into directed highways at speed `v_hw`,
/// merging waypoints and edges that coincide within 1e-6 m across paths.
pub fn build_graph(
    waypoint_lists: &[Vec<Waypoint>],
    v_hw: f64,
) -> Result<HighwayGraph, HighwayError> {
    if !(v_hw > 0.0) {
        return Err(HighwayError::BadSpeed(v_hw));
    }
    const MERGE_TOL: f64 = 1e-6;
    let mut waypoints: Vec<Waypoint> = Vec::new();
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    let mut sequences: Vec<Vec<usize>> = Vec::new();

    let node_id = |waypoints: &mut Vec<Waypoint>, w: &Waypoint| -> usize {
        if let Some(existing) = waypoints
            .iter()
            .position(|q| dist(q.position, w.position) <= MERGE_TOL)
        {
            existing
        } else {
            let id = waypoints.len();
            waypoints.push(Waypoint { id, ..*w });
            id
        }
    };

    for (list_idx, list) in waypoint_lists.iter().enumerate() {
        if list.len() < 2 {
            return Err(HighwayError::TooFewWaypoints(list_idx));
        }
        let mut chain = Vec::with_capacity(list.len() - 1);
        for w in list.windows(2) {
            if dist(w[0].position, w[1].position) <= MERGE_TOL {
                return Err(HighwayError::DegenerateEdge(
                    w[0].position[0],
                    w[0].position[1],
                ));
            }
            let a = node_id(&mut waypoints, &w[0]);
            let b = node_id(&mut waypoints, &w[1]);
            let edge = edges
                .iter()
                .position(|&(ea, eb, _)| ea == a && eb == b)
                .unwrap_or_else(|| {
                    edges.push((a, b, v_hw));
                    edges.len() - 1
                });
            chain.push(edge);
        }
        sequences.push(chain);
    }
    Ok(HighwayGraph {
        waypoints,
        edges,
        sequences,
    })
}

/// Directed Hausdorff distance from the source path to the piecewise-linear
/// interpolation of its sparsified waypoints; reported per run, not
/// thresholded.
pub fn sparsification_deviation(path: &PathPolyline, waypoints: &[Waypoint]) -> f64 {
    let seg_dist = |p: [f64; 2], a: [f64; 2], b: [f64; 2]| -> f64 {
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let l2 = dx * dx + dy * dy;
        if l2 == 0.0 {
            return dist(p, a);
        }
        let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0);
        dist(p, [a[0] + t * dx, a[1] + t * dy])
    };
    path.points
        .iter()
        .map(|&p| {
            waypoints
                .windows(2)
                .map(|w| seg_dist(p, w[0].position, w[1].position))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Graph export: TOML with a waypoint table and an edge table.
#[derive(Debug, Serialize, Deserialize)]
pub struct GraphDocument {
    pub waypoints: Vec<WaypointRow>,
    pub edges: Vec<EdgeRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WaypointRow {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EdgeRow {
    pub from: usize,
    pub to: usize,
    pub speed: f64,
}

impl From<&HighwayGraph> for GraphDocument {
    fn from(g: &HighwayGraph) -> Self {
        GraphDocument {
            waypoints: g
                .waypoints
                .iter()
                .map(|w| WaypointRow {
                    id: w.id,
                    x: w.position[0],
                    y: w.position[1],
                })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|&(from, to, speed)| EdgeRow { from, to, speed })
                .collect(),
        }
    }
}

impl fmt::Display for GraphDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = toml::to_string_pretty(self).map_err(|_| fmt::Error)?;
        f.write_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn polyline(points: Vec<[f64; 2]>) -> PathPolyline {
        PathPolyline { points, step: 1.0 }
    }

    #[test]
    fn straight_path_keeps_only_endpoints() {
        let pts: Vec<[f64; 2]> = (0..100).map(|k| [k as f64, 0.0]).collect();
        let path = polyline(pts);
        let wps = sparsify_by_heading(&path, 10f64.to_radians(), 0).unwrap();
        assert_eq!(wps.len(), 2);
        assert_eq!(wps[0].position, [0.0, 0.0]);
        assert_eq!(wps[1].position, [99.0, 0.0]);
    }

    #[test]
    fn l_shaped_path_keeps_the_corner() {
        let mut pts: Vec<[f64; 2]> = (0..=10).map(|k| [k as f64, 0.0]).collect();
        pts.extend((1..=10).map(|k| [10.0, k as f64]));
        let path = polyline(pts);
        let wps = sparsify_by_heading(&path, 10f64.to_radians(), 0).unwrap();
        assert_eq!(wps.len(), 3);
        assert_eq!(wps[1].position, [10.0, 0.0]);
    }

    #[test]
    fn quarter_circle_interior_waypoint_count() {
        // 90 degrees of total turn with a 30-degree threshold: the
        // accumulator crosses at 30 and 60 degrees in the interior (the third
        // crossing lands at the endpoint), so interior count = 90/30 - 1.
        let pts: Vec<[f64; 2]> = (0..=200)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 * k as f64 / 200.0;
                [a.sin() * 100.0, 100.0 - a.cos() * 100.0]
            })
            .collect();
        let path = polyline(pts);
        let wps = sparsify_by_heading(&path, 30f64.to_radians(), 0).unwrap();
        assert_eq!(wps.len() - 2, 2, "interior waypoints: {:?}", wps);
    }

    #[test]
    fn sparsify_rejects_degenerate_and_bad_threshold() {
        let path = polyline(vec![[1.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(
            sparsify_by_heading(&path, 0.1, 0),
            Err(HighwayError::DegeneratePath)
        ));
        let ok = polyline(vec![[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            sparsify_by_heading(&ok, 0.0, 0),
            Err(HighwayError::BadThreshold(_))
        ));
    }

    #[test]
    fn sparsify_never_adds_points() {
        let pts: Vec<[f64; 2]> = (0..=50)
            .map(|k| {
                let t = k as f64 / 50.0;
                [t * 40.0, (t * 8.0).sin() * 10.0]
            })
            .collect();
        let n = pts.len();
        let path = polyline(pts);
        for deg in [5.0, 15.0, 45.0, 120.0] {
            let wps = sparsify_by_heading(&path, (deg as f64).to_radians(), 0).unwrap();
            assert!(wps.len() <= n);
            assert_eq!(wps.first().unwrap().position, path.points[0]);
            assert_eq!(wps.last().unwrap().position, path.points[n - 1]);
        }
    }

    fn plain(id: usize, x: f64, y: f64) -> Waypoint {
        Waypoint {
            id,
            position: [x, y],
            provenance: Provenance::PathPoint { path: 0, point: id },
        }
    }

    #[test]
    fn radius_zero_clustering_is_identity() {
        let pts = vec![plain(0, 0.0, 0.0), plain(1, 1.0, 0.0), plain(2, 2.0, 0.0)];
        let out = cluster_waypoints(&pts, 0.0).unwrap();
        assert_eq!(out.len(), 3);
        for (a, b) in out.iter().zip(&pts) {
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn symmetric_pair_merges_to_midpoint() {
        let pts = vec![plain(0, 0.0, 0.0), plain(1, 1.0, 0.0)];
        let out = cluster_waypoints(&pts, 2.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].position, [0.5, 0.0]);
        assert_eq!(out[0].provenance, Provenance::ClusterCentroid);
    }

    #[test]
    fn greedy_clustering_is_seed_relative() {
        let pts = vec![plain(0, 0.0, 0.0), plain(1, 10.0, 0.0), plain(2, 20.0, 0.0)];
        let out = cluster_waypoints(&pts, 12.0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].position, [5.0, 0.0]);
        assert_eq!(out[1].position, [20.0, 0.0]);
    }

    #[test]
    fn origin_and_destination_are_pinned() {
        let origin = Waypoint {
            id: 0,
            position: [0.0, 0.0],
            provenance: Provenance::Origin,
        };
        let near = plain(1, 0.5, 0.0);
        let dest = Waypoint {
            id: 2,
            position: [0.6, 0.0],
            provenance: Provenance::Destination,
        };
        let out = cluster_waypoints(&[origin, near, dest], 5.0).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].position, [0.0, 0.0]);
        assert_eq!(out[2].position, [0.6, 0.0]);
    }

    #[test]
    fn graph_chains_one_path() {
        let list = vec![plain(0, 0.0, 0.0), plain(1, 10.0, 0.0), plain(2, 10.0, 10.0)];
        let g = build_graph(&[list], 10.0).unwrap();
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.sequences[0], vec![0, 1]);
        assert!(g.sequence_is_chain(0, [0.0, 0.0], [10.0, 10.0]));
        for &(_, _, speed) in &g.edges {
            assert_eq!(speed, 10.0);
        }
    }

    #[test]
    fn shared_trunk_edge_stored_once() {
        let a = vec![plain(0, 0.0, 0.0), plain(1, 10.0, 0.0), plain(2, 20.0, 5.0)];
        let b = vec![plain(0, 0.0, 0.0), plain(1, 10.0, 0.0), plain(2, 20.0, -5.0)];
        let g = build_graph(&[a, b], 10.0).unwrap();
        assert_eq!(g.waypoints.len(), 4);
        assert_eq!(g.edges.len(), 3);
        assert_eq!(g.sequences[0][0], g.sequences[1][0]);
    }

    #[test]
    fn degenerate_edge_rejected() {
        let list = vec![plain(0, 0.0, 0.0), plain(1, 0.0, 0.0)];
        assert!(matches!(
            build_graph(&[list], 10.0),
            Err(HighwayError::DegenerateEdge(_, _))
        ));
    }

    #[test]
    fn highway_state_interpolates() {
        let h = Highway::new([0.0, 0.0], [100.0, 0.0], 10.0).unwrap();
        let (p, v) = h.state(0.0).unwrap();
        assert_eq!(p, [0.0, 0.0]);
        assert_eq!(v, [10.0, 0.0]);
        let (p, v) = h.state(0.5).unwrap();
        assert_eq!(p, [50.0, 0.0]);
        assert_eq!(v, [10.0, 0.0]);
        let (p, _) = h.state(1.0).unwrap();
        assert_eq!(p, [100.0, 0.0]);
        assert!(matches!(h.state(1.2), Err(HighwayError::SOutOfRange(_))));
    }

    #[test]
    fn direction_is_unit_and_reverses() {
        let h = Highway::new([0.0, 0.0], [30.0, 40.0], 10.0).unwrap();
        let d = h.direction();
        assert!(((d[0] * d[0] + d[1] * d[1]).sqrt() - 1.0).abs() < 1e-12);
        let r = Highway::new([30.0, 40.0], [0.0, 0.0], 10.0).unwrap();
        let rd = r.direction();
        assert!((d[0] + rd[0]).abs() < 1e-12 && (d[1] + rd[1]).abs() < 1e-12);
    }

    #[test]
    fn deviation_zero_for_straight_path() {
        let pts: Vec<[f64; 2]> = (0..=10).map(|k| [k as f64, 0.0]).collect();
        let path = polyline(pts);
        let wps = sparsify_by_heading(&path, 0.2, 0).unwrap();
        assert!(sparsification_deviation(&path, &wps) < 1e-12);
    }
}
