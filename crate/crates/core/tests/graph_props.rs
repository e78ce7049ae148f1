mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::{adjacency_lists, contraction_oracle, max_abs, naive_norm_adj, to_mat};
use gridfault::graph::{bundled_pmu_configs, induce_pmu_graph, PmuGraph, Topology};
use gridfault::seed;
use gridfault::verify::random_connected_graph;

#[test]
fn bundled_configs_match_contraction_oracle() {
    let topo = Topology::ieee123();
    for (n, pmus) in bundled_pmu_configs() {
        let g = induce_pmu_graph(&topo, &pmus).unwrap();
        assert_eq!(g.len(), n);
        assert_eq!(g.bus_edges(), contraction_oracle(&topo, &pmus), "config {n}");
        assert!((0..n).all(|v| g.degree(v) >= 1));
    }
}

#[test]
fn all_buses_measured_gives_feeder_edges() {
    let topo = Topology::ieee123();
    let g = induce_pmu_graph(&topo, topo.buses()).unwrap();
    let want: BTreeSet<_> = topo.edges().iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    assert_eq!(g.bus_edges(), want);
}

#[test]
fn path_contraction_skips_unmeasured_bus() {
    let topo = Topology::new(vec![1, 2, 3], vec![(1, 2), (2, 3)]).unwrap();
    let g = induce_pmu_graph(&topo, &[1, 3]).unwrap();
    assert_eq!(g.bus_edges(), BTreeSet::from([(1, 3)]));
}

#[test]
fn unknown_pmu_is_a_config_error() {
    let topo = Topology::ieee123();
    assert!(matches!(
        induce_pmu_graph(&topo, &[1, 99999]),
        Err(gridfault::Error::Config(_))
    ));
}

#[test]
fn star_adjacency_entry() {
    let g = PmuGraph::from_edges(vec![1, 2, 3], &[(0, 1), (0, 2)]).unwrap();
    let a = g.normalized_adjacency();
    assert!((a.at(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
}

#[test]
fn nested_configs_give_nested_node_sets() {
    let topo = Topology::ieee123();
    let cfgs = bundled_pmu_configs();
    let sets: Vec<BTreeSet<u32>> = cfgs
        .values()
        .map(|p| {
            induce_pmu_graph(&topo, p)
                .unwrap()
                .pmu_buses()
                .iter()
                .copied()
                .collect()
        })
        .collect();
    for w in sets.windows(2) {
        assert!(w[0].is_subset(&w[1]));
    }
}

fn spectral_radius(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut v = vec![1.0; n];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i][j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / norm).collect();
    }
    lambda
}

proptest! {
    #[test]
    fn adjacency_matches_naive_and_is_bounded(n in 2usize..=10, extra in 0usize..8, s in any::<u64>()) {
        let g = random_connected_graph(n, extra, &mut seed::rng(s, "graph", 0));
        let a = to_mat(&g.normalized_adjacency());
        prop_assert!(max_abs(&a, &naive_norm_adj(&g)) < 1e-12);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a[i][j], a[j][i]);
                prop_assert!(a[i][j] >= 0.0);
            }
        }
        prop_assert!(spectral_radius(&a) <= 1.0 + 1e-9);
    }

    #[test]
    fn neighbor_lists_are_consistent(n in 2usize..=10, extra in 0usize..8, s in any::<u64>()) {
        let g = random_connected_graph(n, extra, &mut seed::rng(s, "graph", 1));
        let lists = g.neighbor_lists();
        prop_assert_eq!(lists.to_vec(), adjacency_lists(&g));
        let total: usize = lists.iter().map(Vec::len).sum();
        prop_assert_eq!(total, 2 * g.edges().len());
        for (v, l) in lists.iter().enumerate() {
            prop_assert!(!l.contains(&v));
            prop_assert!(l.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn induced_graph_ignores_input_order(k in 2usize..12, s in any::<u64>()) {
        let topo = Topology::ieee123();
        let mut rng = seed::rng(s, "pmus", 0);
        let mut buses = topo.buses().to_vec();
        use rand::seq::SliceRandom;
        buses.shuffle(&mut rng);
        let pick = &buses[..k];
        let mut rev = pick.to_vec();
        rev.reverse();
        let a = induce_pmu_graph(&topo, pick).unwrap();
        let b = induce_pmu_graph(&topo, &rev).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.bus_edges(), contraction_oracle(&topo, pick));
    }
}
