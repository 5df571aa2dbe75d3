//! Random skeletons with an exact edge count, and random orientation.

use rand::seq::index;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::graph::{compose, DirectedGraph, NodeOrder, SkeletonGraph};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GraphFamily {
    #[serde(rename = "erdos-renyi")]
    ErdosRenyi,
    #[serde(rename = "scale-free")]
    ScaleFree,
    #[serde(rename = "small-world")]
    SmallWorld,
}

/// Rewiring probability of the ring lattice.
pub const SMALL_WORLD_REWIRE: f64 = 0.25;

pub fn max_links(p: usize) -> usize {
    p * p.saturating_sub(1) / 2
}

/// Skeleton on `p` nodes with exactly `min(s, p(p-1)/2)` links.
pub fn sample_skeleton(
    family: GraphFamily,
    p: usize,
    s: usize,
    rng: &mut impl RngCore,
) -> Result<SkeletonGraph> {
    if p < 2 {
        return Err(Error::config(
            "p",
            format!("graphs need at least 2 nodes, got {p}"),
        ));
    }
    let s = s.min(max_links(p));
    let a = match family {
        GraphFamily::ErdosRenyi => erdos_renyi(p, s, rng),
        GraphFamily::ScaleFree => scale_free(p, s, rng),
        GraphFamily::SmallWorld => small_world(p, s, rng),
    };
    debug_assert_eq!(a.link_count(), s);
    Ok(a)
}

fn pair_at(p: usize, mut idx: usize) -> (usize, usize) {
    for j in 0..p {
        let row = p - 1 - j;
        if idx < row {
            return (j, j + 1 + idx);
        }
        idx -= row;
    }
    unreachable!("pair index out of range")
}

fn erdos_renyi(p: usize, s: usize, rng: &mut impl RngCore) -> SkeletonGraph {
    let mut a = SkeletonGraph::empty(p);
    for idx in index::sample(rng, max_links(p), s) {
        let (j, k) = pair_at(p, idx);
        a.set_link(j, k, true);
    }
    a
}

fn pick_weighted(weights: &[f64], rng: &mut impl RngCore) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap()
}

// Edges are added one at a time; each endpoint is drawn with probability
// proportional to (current degree + 1) among nodes that can still take it.
fn scale_free(p: usize, s: usize, rng: &mut impl RngCore) -> SkeletonGraph {
    let mut a = SkeletonGraph::empty(p);
    let mut deg = vec![0usize; p];
    let mut w = vec![0.0; p];
    for _ in 0..s {
        for j in 0..p {
            w[j] = if deg[j] < p - 1 {
                deg[j] as f64 + 1.0
            } else {
                0.0
            };
        }
        let j = pick_weighted(&w, rng);
        for k in 0..p {
            w[k] = if k != j && !a.has_link(j, k) {
                deg[k] as f64 + 1.0
            } else {
                0.0
            };
        }
        let k = pick_weighted(&w, rng);
        a.set_link(j, k, true);
        deg[j] += 1;
        deg[k] += 1;
    }
    a
}

fn small_world(p: usize, s: usize, rng: &mut impl RngCore) -> SkeletonGraph {
    let mut a = SkeletonGraph::empty(p);
    // Even lattice degree nearest to the target mean degree.
    let max_even = (p - 1) & !1;
    let k = ((s as f64 / p as f64).round() as usize * 2).min(max_even);
    for j in 0..p {
        for off in 1..=k / 2 {
            a.set_link(j, (j + off) % p, true);
        }
    }
    for j in 0..p {
        for off in 1..=k / 2 {
            let t = (j + off) % p;
            if !a.has_link(j, t) || rng.random::<f64>() >= SMALL_WORLD_REWIRE {
                continue;
            }
            let free: Vec<usize> = (0..p).filter(|&u| u != j && !a.has_link(j, u)).collect();
            if let Some(&u) = free.choose(rng) {
                a.set_link(j, t, false);
                a.set_link(j, u, true);
            }
        }
    }
    let links = a.links();
    if links.len() > s {
        for i in index::sample(rng, links.len(), links.len() - s) {
            let (j, k) = links[i];
            a.set_link(j, k, false);
        }
    } else if links.len() < s {
        let absent: Vec<(usize, usize)> = (0..max_links(p))
            .map(|i| pair_at(p, i))
            .filter(|&(j, k)| !a.has_link(j, k))
            .collect();
        for i in index::sample(rng, absent.len(), s - links.len()) {
            let (j, k) = absent[i];
            a.set_link(j, k, true);
        }
    }
    a
}

/// Uniformly random node order.
pub fn random_order(p: usize, rng: &mut impl RngCore) -> NodeOrder {
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(rng);
    NodeOrder::new(perm).expect("shuffle of 0..p")
}

/// Orients every link from the earlier to the later node of a uniformly
/// random order.
pub fn orient_random(a: &SkeletonGraph, rng: &mut impl RngCore) -> (DirectedGraph, NodeOrder) {
    let order = random_order(a.p(), rng);
    let g = compose(a, &order).expect("order built for this skeleton");
    (g, order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::skeleton_of;
    use crate::rng::SplitMix64;

    #[test]
    fn pair_indexing_covers_upper_triangle() {
        let p = 5;
        let pairs: Vec<_> = (0..max_links(p)).map(|i| pair_at(p, i)).collect();
        let expected: Vec<_> = (0..p)
            .flat_map(|j| (j + 1..p).map(move |k| (j, k)))
            .collect();
        assert_eq!(pairs, expected);
    }

    #[test]
    fn exact_counts_for_every_family() {
        let mut rng = SplitMix64::new(17);
        for family in [
            GraphFamily::ErdosRenyi,
            GraphFamily::ScaleFree,
            GraphFamily::SmallWorld,
        ] {
            for p in 2..12 {
                for s in [0, 1, p, 2 * p, 4 * p, max_links(p)] {
                    let a = sample_skeleton(family, p, s, &mut rng).unwrap();
                    assert_eq!(
                        a.link_count(),
                        s.min(max_links(p)),
                        "{family:?} p={p} s={s}"
                    );
                }
            }
            assert_eq!(
                sample_skeleton(family, 3, 3, &mut rng).unwrap(),
                SkeletonGraph::complete(3)
            );
            assert_eq!(
                sample_skeleton(family, 3, 0, &mut rng).unwrap(),
                SkeletonGraph::empty(3)
            );
        }
        assert!(sample_skeleton(GraphFamily::ErdosRenyi, 1, 0, &mut rng).is_err());
    }

    #[test]
    fn orientation_keeps_skeleton() {
        let mut rng = SplitMix64::new(3);
        let a = sample_skeleton(GraphFamily::ErdosRenyi, 8, 12, &mut rng).unwrap();
        let (g, _) = orient_random(&a, &mut rng);
        assert_eq!(skeleton_of(&g), a);
        let (g, _) = orient_random(&SkeletonGraph::empty(4), &mut rng);
        assert_eq!(g, DirectedGraph::empty(4));
    }
}
