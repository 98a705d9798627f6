//! Shared test oracles: independent reference implementations the solver
//! tests are checked against. Nothing here calls into the code under test
//! beyond plain data types (grids, cost maps, scalar fields).

#![allow(dead_code)]

use airways_core::costmap::{CostMap, GridSpec2D};
use airways_core::reachability::ScalarFieldND;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Line integral of the nearest-node cost along the straight segment between
/// two grid nodes (midpoint samples, about four per cell crossed).
pub fn lineint_cost(map: &CostMap, a: [usize; 2], b: [usize; 2]) -> f64 {
    let h = map.grid.spacing();
    let di = b[0] as f64 - a[0] as f64;
    let dj = b[1] as f64 - a[1] as f64;
    let cells = (di * di + dj * dj).sqrt();
    let len = ((di * h[0]).powi(2) + (dj * h[1]).powi(2)).sqrt();
    let k = ((cells * 4.0).ceil() as usize).max(2);
    let (nx, ny) = (map.grid.counts[0], map.grid.counts[1]);
    let mut acc = 0.0;
    for s in 0..k {
        let t = (s as f64 + 0.5) / k as f64;
        let i = ((a[0] as f64 + di * t).round() as usize).min(nx - 1);
        let j = ((a[1] as f64 + dj * t).round() as usize).min(ny - 1);
        acc += map.value(i, j);
    }
    acc / k as f64 * len
}

/// Average of the endpoint costs times the segment length: the classical
/// graph-approximation edge weight.
pub fn mean_endpoint_cost(map: &CostMap, a: [usize; 2], b: [usize; 2]) -> f64 {
    let h = map.grid.spacing();
    let di = b[0] as f64 - a[0] as f64;
    let dj = b[1] as f64 - a[1] as f64;
    let len = ((di * h[0]).powi(2) + (dj * h[1]).powi(2)).sqrt();
    0.5 * (map.value(a[0], a[1]) + map.value(b[0], b[1])) * len
}

#[derive(Clone, Copy)]
pub enum EdgeWeight {
    /// Midpoint-sampled line integral of the cost field along the edge.
    LineIntegral,
    /// Mean of the endpoint costs times the edge length.
    MeanEndpoint,
}

struct QueueItem {
    value: f64,
    node: usize,
}

impl PartialEq for QueueItem {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value && self.node == other.node
    }
}
impl Eq for QueueItem {}
impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap and we need the cheapest first.
        other
            .value
            .partial_cmp(&self.value)
            .expect("finite queue values")
            .then_with(|| other.node.cmp(&self.node))
    }
}
impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const MOVES16: [(i64, i64); 16] = [
    (1, 0),
    (0, 1),
    (-1, 0),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
    (2, 1),
    (1, 2),
    (-1, 2),
    (-2, 1),
    (-2, -1),
    (-1, -2),
    (1, -2),
    (2, -1),
];

/// 16-connected Dijkstra over the cost-map nodes; returns the shortest-path
/// cost from `src` to each destination (same order as `dests`).
pub fn dijkstra16(
    map: &CostMap,
    src: [usize; 2],
    dests: &[[usize; 2]],
    weight: EdgeWeight,
) -> Vec<f64> {
    let (nx, ny) = (map.grid.counts[0], map.grid.counts[1]);
    let flat = |i: usize, j: usize| j * nx + i;
    let mut dist = vec![f64::INFINITY; nx * ny];
    let mut heap = BinaryHeap::new();
    dist[flat(src[0], src[1])] = 0.0;
    heap.push(QueueItem {
        value: 0.0,
        node: flat(src[0], src[1]),
    });
    let mut remaining: Vec<usize> = dests.iter().map(|d| flat(d[0], d[1])).collect();
    remaining.sort_unstable();
    remaining.dedup();
    let mut left = remaining.len();
    while let Some(QueueItem { value, node }) = heap.pop() {
        if value > dist[node] {
            continue;
        }
        if remaining.binary_search(&node).is_ok() {
            left -= 1;
            if left == 0 {
                break;
            }
            // Mark as visited so duplicates are not double-counted.
            let pos = remaining.binary_search(&node).unwrap();
            remaining[pos] = usize::MAX;
            remaining.sort_unstable();
        }
        let (i, j) = (node % nx, node / nx);
        for (di, dj) in MOVES16 {
            let ni = i as i64 + di;
            let nj = j as i64 + dj;
            if ni < 0 || nj < 0 || ni >= nx as i64 || nj >= ny as i64 {
                continue;
            }
            let (ni, nj) = (ni as usize, nj as usize);
            let w = match weight {
                EdgeWeight::LineIntegral => lineint_cost(map, [i, j], [ni, nj]),
                EdgeWeight::MeanEndpoint => mean_endpoint_cost(map, [i, j], [ni, nj]),
            };
            let cand = value + w;
            let nf = flat(ni, nj);
            if cand < dist[nf] {
                dist[nf] = cand;
                heap.push(QueueItem {
                    value: cand,
                    node: nf,
                });
            }
        }
    }
    dests.iter().map(|d| dist[flat(d[0], d[1])]).collect()
}

/// Synthetic geography on the unit square: quiet background, a couple of
/// cheap water bodies, rectangular expensive cities, and very expensive
/// airport patches inside cities. Costs are the four-category set
/// {0.0625, 0.25, 1, 4}.
pub fn layered_map(n: usize, rng: &mut ChaCha8Rng) -> CostMap {
    let grid = GridSpec2D::new([0.0, 0.0], [1.0, 1.0], [n, n]).unwrap();
    let mut vals = vec![0.25; n * n];
    let flat = |i: usize, j: usize| j * n + i;

    for _ in 0..rng.gen_range(1..3u32) {
        let cx = rng.gen_range(0.0..n as f64);
        let cy = rng.gen_range(0.0..n as f64);
        let rr = rng.gen_range(15.0..35.0);
        for i in 0..n {
            for j in 0..n {
                if (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2) < rr * rr {
                    vals[flat(i, j)] = 0.0625;
                }
            }
        }
    }
    let mut city = vec![false; n * n];
    for _ in 0..rng.gen_range(2..5u32) {
        let cx = rng.gen_range(0.0..n as f64);
        let cy = rng.gen_range(0.0..n as f64);
        let rx = rng.gen_range(8.0..25.0);
        let ry = rng.gen_range(8.0..25.0);
        for i in 0..n {
            for j in 0..n {
                if (i as f64 - cx).abs() < rx && (j as f64 - cy).abs() < ry {
                    vals[flat(i, j)] = 1.0;
                    city[flat(i, j)] = true;
                }
            }
        }
    }
    for _ in 0..rng.gen_range(1..4u32) {
        let cells: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| city[flat(i, j)])
            .collect();
        if cells.is_empty() {
            break;
        }
        let (cx, cy) = cells[rng.gen_range(0..cells.len())];
        let rr = rng.gen_range(3.0..6.0);
        for i in 0..n {
            for j in 0..n {
                if (i as f64 - cx as f64).abs() < rr && (j as f64 - cy as f64).abs() < rr {
                    vals[flat(i, j)] = 4.0;
                }
            }
        }
    }
    CostMap::new(grid, vals).unwrap()
}

/// Can a 1-D double integrator `p̈ = u`, `|u| ≤ u_max`, starting at
/// `(p0, v0)`, put its state inside the box `|p| ≤ rp`, `|v| ≤ rv` within
/// `horizon` seconds? Any reachable point is reachable by a bang-bang input
/// with at most one switch, so scanning switch times is a complete check up
/// to the switch-grid resolution.
pub fn double_int_reaches_box(
    p0: f64,
    v0: f64,
    u_max: f64,
    horizon: f64,
    rp: f64,
    rv: f64,
    switch_samples: usize,
) -> bool {
    for u1 in [u_max, -u_max] {
        for k in 0..=switch_samples {
            let ts = horizon * k as f64 / switch_samples as f64;
            if phase_enters_box(p0, v0, u1, ts, rp, rv) {
                return true;
            }
            let pm = p0 + v0 * ts + 0.5 * u1 * ts * ts;
            let vm = v0 + u1 * ts;
            if phase_enters_box(pm, vm, -u1, horizon - ts, rp, rv) {
                return true;
            }
        }
    }
    false
}

/// Exact check that the constant-acceleration arc `(p0 + v0 s + a s²/2,
/// v0 + a s)` for `s ∈ [0, dur]` passes through the box.
fn phase_enters_box(p0: f64, v0: f64, a: f64, dur: f64, rp: f64, rv: f64) -> bool {
    if dur < 0.0 {
        return false;
    }
    let (mut lo, mut hi) = (0.0f64, dur);
    if a.abs() < 1e-15 {
        if v0.abs() > rv {
            return false;
        }
    } else {
        let t1 = (-rv - v0) / a;
        let t2 = (rv - v0) / a;
        let (t1, t2) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        lo = lo.max(t1);
        hi = hi.min(t2);
    }
    if lo > hi {
        return false;
    }
    let p = |s: f64| p0 + v0 * s + 0.5 * a * s * s;
    let mut cands = vec![p(lo), p(hi)];
    if a.abs() > 1e-15 {
        let sv = -v0 / a; // vertex of the position parabola
        if sv > lo && sv < hi {
            cands.push(p(sv));
        }
    }
    let mut low = f64::INFINITY;
    let mut high = f64::NEG_INFINITY;
    for c in cands {
        if c.abs() <= rp {
            return true;
        }
        low = low.min(c);
        high = high.max(c);
    }
    // The arc jumped across the band between candidate points.
    low < -rp && high > rp
}

/// Drift-only collision predicate for the equal-bounds relative-state game:
/// some `s ∈ [0, horizon]` puts `|p + s v| ≤ d` on both axes simultaneously.
pub fn drift_only_member(rel: &[f64; 4], d: f64, horizon: f64) -> bool {
    let mut lo = 0.0f64;
    let mut hi = horizon;
    for ax in 0..2 {
        let p = rel[ax];
        let v = rel[2 + ax];
        if v.abs() < 1e-15 {
            if p.abs() > d {
                return false;
            }
        } else {
            let a = (-d - p) / v;
            let b = (d - p) / v;
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            lo = lo.max(a);
            hi = hi.min(b);
        }
    }
    lo <= hi
}

/// True when `x` is more than `cells` grid cells away from the zero level
/// set of `field`, in the sense |V(x)| > cells · Σ_k h_k |∂V/∂x_k|.
pub fn outside_band(field: &ScalarFieldND, x: &[f64], cells: f64) -> bool {
    let v = field.sample(x).unwrap();
    let g = field.gradient(x).unwrap();
    let band: f64 = field
        .axes()
        .iter()
        .zip(&g)
        .map(|(a, q)| a.spacing() * q.abs())
        .sum();
    v.abs() > cells * band
}
