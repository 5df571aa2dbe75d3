//! Property tests over random graphs, orders and beliefs.

use proptest::prelude::*;

use skorder::dist::{
    composite_nll, consistency_residuals, directed_marginals, exact_log_likelihood, joint_log_prob,
    map_order, map_prediction, recover_beliefs, EdgeBeliefs,
};
use skorder::graph::{
    compose, is_acyclic, kahn_order, skeleton_of, topological_orders, DirectedGraph, NodeOrder,
    SkeletonGraph,
};
use skorder::io::{
    beliefs_from_json, beliefs_to_json, graph_from_json, graph_to_json, skeleton_from_json,
    skeleton_to_json,
};
use skorder::metrics::{average_precision, f1, nshd, shd};

fn skeleton_p(p: usize) -> impl Strategy<Value = SkeletonGraph> {
    proptest::collection::vec(any::<bool>(), p * (p - 1) / 2).prop_map(move |bits| {
        let mut a = SkeletonGraph::empty(p);
        let mut it = bits.into_iter();
        for j in 0..p {
            for k in j + 1..p {
                a.set_link(j, k, it.next().unwrap());
            }
        }
        a
    })
}

fn order(p: usize) -> impl Strategy<Value = NodeOrder> {
    Just((0..p).collect::<Vec<_>>())
        .prop_shuffle()
        .prop_map(|v| NodeOrder::new(v).unwrap())
}

fn skeleton_and_order(max_p: usize) -> impl Strategy<Value = (SkeletonGraph, NodeOrder)> {
    (2..=max_p).prop_flat_map(|p| (skeleton_p(p), order(p)))
}

/// Beliefs with ν in [0.001, 0.999] and scores in [-spread, spread].
fn beliefs_p(p: usize, spread: f64) -> impl Strategy<Value = EdgeBeliefs> {
    (
        proptest::collection::vec(0.001f64..0.999, p * (p - 1) / 2),
        proptest::collection::vec(-spread..spread, p),
    )
        .prop_map(move |(upper, s)| {
            let mut nu = vec![0.0; p * p];
            let mut it = upper.into_iter();
            for j in 0..p {
                for k in j + 1..p {
                    let v = it.next().unwrap();
                    nu[j * p + k] = v;
                    nu[k * p + j] = v;
                }
            }
            EdgeBeliefs::from_probs(p, &nu, s).unwrap()
        })
}

fn beliefs(max_p: usize) -> impl Strategy<Value = EdgeBeliefs> {
    (2..=max_p).prop_flat_map(|p| beliefs_p(p, 6.0))
}

/// Beliefs together with a skeleton and two orders on the same node set.
fn beliefs_and_graph(
    max_p: usize,
    spread: f64,
) -> impl Strategy<Value = (EdgeBeliefs, SkeletonGraph, NodeOrder, NodeOrder)> {
    (2..=max_p).prop_flat_map(move |p| (beliefs_p(p, spread), skeleton_p(p), order(p), order(p)))
}

fn respects(g: &DirectedGraph, o: &NodeOrder) -> bool {
    let pos = o.positions();
    g.edges().iter().all(|&(j, k)| pos[j] < pos[k])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn composition_gives_a_dag_with_that_skeleton((a, o) in skeleton_and_order(12)) {
        let g = compose(&a, &o).unwrap();
        prop_assert!(is_acyclic(&g));
        prop_assert_eq!(skeleton_of(&g), a.clone());
        prop_assert_eq!(g.edge_count(), a.link_count());
        prop_assert!(respects(&g, &o));
    }

    #[test]
    fn every_topological_order_is_a_preimage((a, o) in skeleton_and_order(7)) {
        let g = compose(&a, &o).unwrap();
        let orders = topological_orders(&g, 100_000).unwrap().into_complete(100_000).unwrap();
        prop_assert!(orders.contains(&o));
        for t in &orders {
            prop_assert!(respects(&g, t));
            prop_assert_eq!(compose(&skeleton_of(&g), t).unwrap(), g.clone());
        }
        let kahn = kahn_order(&g).unwrap();
        prop_assert!(orders.contains(&kahn));
    }

    #[test]
    fn marginals_round_trip(b in beliefs(40)) {
        let r = directed_marginals(&b);
        let back = recover_beliefs(&r).unwrap();
        let p = b.p();
        for j in 0..p {
            for k in 0..p {
                if j != k {
                    prop_assert_eq!(back.nu(j, k), b.nu(j, k));
                }
            }
            let d = (back.scores()[j] - back.scores()[0]) - (b.scores()[j] - b.scores()[0]);
            prop_assert!(d.abs() <= 1e-10, "score difference off by {}", d);
        }
        prop_assert!(consistency_residuals(&r).unwrap() <= 1e-10);
    }

    #[test]
    fn composite_nll_is_shift_invariant((b, a, o, _) in beliefs_and_graph(10, 6.0), c in -30.0f64..30.0) {
        let g = compose(&a, &o).unwrap();
        let shifted = EdgeBeliefs::from_probs(b.p(), b.nu_matrix(), b.scores().iter().map(|s| s + c).collect()).unwrap();
        let (x, y) = (composite_nll(&b, &g).unwrap(), composite_nll(&shifted, &g).unwrap());
        prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
    }

    #[test]
    fn composite_nll_prefers_beliefs_near_the_truth((b, a, o, _) in beliefs_and_graph(8, 6.0)) {
        let p = b.p();
        let g = compose(&a, &o).unwrap();
        let pos = o.positions();
        let nu: Vec<f64> = (0..p * p)
            .map(|i| if a.has_link(i / p, i % p) { 0.999 } else { 0.001 })
            .collect();
        let s: Vec<f64> = (0..p).map(|j| -8.0 * pos[j] as f64).collect();
        let near = EdgeBeliefs::from_probs(p, &nu, s).unwrap();
        let (x, y) = (composite_nll(&near, &g).unwrap(), composite_nll(&b, &g).unwrap());
        prop_assert!(x > 0.0 && x < 0.01 * (p * p) as f64, "near-truth loss {}", x);
        prop_assert!(x <= y, "near-truth loss {} above {}", x, y);
    }

    #[test]
    fn map_prediction_is_acyclic_and_consistent(b in beliefs(25)) {
        let g = map_prediction(&b);
        prop_assert!(is_acyclic(&g));
        let o = map_order(b.scores());
        prop_assert!(respects(&g, &o));
        for (j, k) in skeleton_of(&g).links() {
            prop_assert!(b.nu(j, k) > 0.5);
        }
    }

    #[test]
    fn map_prediction_is_the_joint_mode(b in beliefs(4)) {
        // The MAP pair maximizes the joint mass over all (A, π).
        let p = b.p();
        let g = map_prediction(&b);
        let best = joint_log_prob(&b, &skeleton_of(&g), &map_order(b.scores())).unwrap();
        for a in skorder::graph::all_skeletons(p) {
            for o in skorder::graph::all_orders(p) {
                prop_assert!(joint_log_prob(&b, &a, &o).unwrap() <= best + 1e-12);
            }
        }
    }

    #[test]
    fn exact_likelihood_is_a_log_probability((b, a, o, _) in beliefs_and_graph(5, 6.0)) {
        let g = compose(&a, &o).unwrap();
        let ll = exact_log_likelihood(&b, &g, 1000).unwrap();
        prop_assert!(ll <= 1e-12);
        prop_assert!(ll >= joint_log_prob(&b, &a, &o).unwrap() - 1e-12);
    }

    #[test]
    fn json_round_trips((a, o) in skeleton_and_order(15), b in beliefs(15)) {
        let g = compose(&a, &o).unwrap();
        prop_assert_eq!(graph_from_json(&graph_to_json(&g)).unwrap(), g);
        prop_assert_eq!(skeleton_from_json(&skeleton_to_json(&a)).unwrap(), a);
        let back = beliefs_from_json(&beliefs_to_json(&b)).unwrap();
        prop_assert_eq!(back.nu_matrix(), b.nu_matrix());
        prop_assert_eq!(back.scores(), b.scores());
    }

    #[test]
    fn metric_ranges_and_identities((b, a, o, o2) in beliefs_and_graph(8, 6.0)) {
        let truth = compose(&a, &o).unwrap();
        let pred = compose(&a, &o2).unwrap();
        prop_assert_eq!(shd(&pred, &truth).unwrap(), shd(&truth, &pred).unwrap());
        prop_assert_eq!(shd(&truth, &truth).unwrap(), 0);
        prop_assert_eq!(f1(&truth, &truth).unwrap(), 1.0);
        let f = f1(&pred, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        // Same skeleton: every mismatch is a reversal.
        let reversed = truth.edges().iter().filter(|&&(j, k)| pred.has_edge(k, j)).count();
        prop_assert_eq!(shd(&pred, &truth).unwrap(), reversed);
        if truth.edge_count() > 0 {
            prop_assert_eq!(nshd(&DirectedGraph::empty(a.p()), &truth).unwrap(), 1.0);
        }
        let ap = average_precision(&directed_marginals(&b), &truth).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
    }
}
