//! End-to-end placement pipeline: cost map -> value field -> paths ->
//! sparsified waypoints -> clustered waypoints -> highway graph document.

mod common;

use airways_core::costmap::{CostMap, GridSpec2D};
use airways_core::eikonal::{extract_path, solve_fmm, FmmOptions};
use airways_core::highways::{
    build_graph, cluster_waypoints, sparsification_deviation, sparsify_by_heading, GraphDocument,
    Provenance,
};

#[test]
fn corridor_map_yields_a_connected_two_destination_graph() {
    // Cheap corridor through an expensive background, as in the trunk-route
    // acceptance check, but exercised all the way to the graph document.
    let n = 101usize;
    let grid = GridSpec2D::new([0.0, 0.0], [1.0, 1.0], [n, n]).unwrap();
    let mut vals = vec![1.0; n * n];
    for j in 48..=52 {
        for i in 0..=75 {
            vals[j * n + i] = 0.08;
        }
    }
    let map = CostMap::new(grid, vals).unwrap();
    let h = grid.spacing()[0];
    let origin = grid.node_pos(5, 50);
    let sol = solve_fmm(&map, origin, &FmmOptions::default()).unwrap();

    let dests = [grid.node_pos(90, 25), grid.node_pos(90, 75)];
    let theta_c = 0.2;
    let mut lists = Vec::new();
    let mut paths = Vec::new();
    for (k, &dest) in dests.iter().enumerate() {
        let path = extract_path(&sol, dest, 0.4 * h, 1.6 * h).unwrap();
        let sparse = sparsify_by_heading(&path, theta_c, k).unwrap();
        assert!(
            sparse.len() >= 3,
            "corridor turn must surface at least one interior waypoint"
        );
        let clustered = cluster_waypoints(&sparse, 2.0 * h).unwrap();

        // Endpoints are pinned by construction.
        assert_eq!(clustered.first().unwrap().provenance, Provenance::Origin);
        assert_eq!(
            clustered.last().unwrap().provenance,
            Provenance::Destination
        );

        // The chord chain stays close to the source path.
        let deviation = sparsification_deviation(&path, &clustered);
        assert!(
            deviation < 0.05,
            "chord deviation {deviation} too large for theta_c={theta_c}"
        );

        lists.push(clustered);
        paths.push(path);
    }

    let graph = build_graph(&lists, 10.0).unwrap();

    // One shared origin node, two distinct destination nodes.
    let origin_nodes = graph
        .waypoints
        .iter()
        .filter(|w| {
            ((w.position[0] - origin[0]).powi(2) + (w.position[1] - origin[1]).powi(2)).sqrt()
                <= 1e-6
        })
        .count();
    assert_eq!(origin_nodes, 1, "shared origin must be merged");
    assert_eq!(graph.sequences.len(), 2);
    for (k, &dest) in dests.iter().enumerate() {
        assert!(
            graph.sequence_is_chain(k, origin, dest),
            "sequence {k} must chain origin -> destination"
        );
    }

    // Every edge is a usable highway.
    for e in 0..graph.edges.len() {
        let hw = graph.highway(e);
        assert!(hw.length() > 0.0);
        assert_eq!(hw.speed, 10.0);
    }

    // The exported document parses back with identical topology.
    let doc = GraphDocument::from(&graph);
    let text = doc.to_string();
    let parsed: GraphDocument = toml::from_str(&text).unwrap();
    assert_eq!(parsed.waypoints.len(), graph.waypoints.len());
    assert_eq!(parsed.edges.len(), graph.edges.len());
    for (row, &(from, to, speed)) in parsed.edges.iter().zip(&graph.edges) {
        assert_eq!((row.from, row.to), (from, to));
        assert_eq!(row.speed, speed);
    }
}
