//! DAGs, skeletons, and node orders.
//!
//! A DAG `G` over `p` nodes is written as `G = A ⊙ M(π)`: an undirected
//! skeleton `A` whose links are oriented from the earlier to the later node
//! of the order `π`. Node indices are 0-based.

use std::fmt;

use crate::{Error, Result};

/// Dense square bit matrix, one row of `u64` words per node.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    p: usize,
    words: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(p: usize) -> Self {
        let words = p.div_ceil(64).max(1);
        BitMatrix {
            p,
            words,
            bits: vec![0; p * words],
        }
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> bool {
        debug_assert!(j < self.p && k < self.p);
        self.bits[j * self.words + k / 64] >> (k % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, j: usize, k: usize, value: bool) {
        debug_assert!(j < self.p && k < self.p);
        let word = &mut self.bits[j * self.words + k / 64];
        if value {
            *word |= 1 << (k % 64);
        } else {
            *word &= !(1 << (k % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn row_ones(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.p).filter(move |&k| self.get(j, k))
    }
}

impl fmt::Debug for BitMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BitMatrix(p={})", self.p)?;
        for j in 0..self.p {
            let row: String = (0..self.p)
                .map(|k| if self.get(j, k) { '1' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

/// Directed graph; `has_edge(j, k)` means `j → k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DirectedGraph {
    adj: BitMatrix,
}

impl DirectedGraph {
    pub fn empty(p: usize) -> Self {
        DirectedGraph {
            adj: BitMatrix::zeros(p),
        }
    }

    /// Builds a graph from an edge list. Self-loops and out-of-range
    /// endpoints are rejected.
    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(p);
        for &(j, k) in edges {
            if j >= p || k >= p {
                return Err(Error::Format(format!(
                    "edge ({j}, {k}) out of range for p={p}"
                )));
            }
            if j == k {
                return Err(Error::Format(format!("self-loop at node {j}")));
            }
            g.adj.set(j, k, true);
        }
        Ok(g)
    }

    /// Builds a graph from a row-major 0/1 matrix, ignoring the diagonal.
    pub fn from_fn(p: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut g = Self::empty(p);
        for j in 0..p {
            for k in 0..p {
                if j != k && f(j, k) {
                    g.adj.set(j, k, true);
                }
            }
        }
        g
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.adj.p()
    }

    #[inline]
    pub fn has_edge(&self, j: usize, k: usize) -> bool {
        self.adj.get(j, k)
    }

    pub fn set_edge(&mut self, j: usize, k: usize, present: bool) {
        assert_ne!(j, k, "self-loops are not representable");
        self.adj.set(j, k, present);
    }

    pub fn edge_count(&self) -> usize {
        self.adj.count_ones()
    }

    /// Edges in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let p = self.p();
        (0..p)
            .flat_map(|j| self.adj.row_ones(j).map(move |k| (j, k)))
            .collect()
    }

    pub fn parents(&self, k: usize) -> Vec<usize> {
        (0..self.p()).filter(|&j| self.has_edge(j, k)).collect()
    }

    pub fn children(&self, j: usize) -> Vec<usize> {
        self.adj.row_ones(j).collect()
    }

    pub fn matrix(&self) -> &BitMatrix {
        &self.adj
    }
}

/// Symmetric, zero-diagonal adjacency.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SkeletonGraph {
    adj: BitMatrix,
}

impl SkeletonGraph {
    pub fn empty(p: usize) -> Self {
        SkeletonGraph {
            adj: BitMatrix::zeros(p),
        }
    }

    pub fn complete(p: usize) -> Self {
        let mut a = Self::empty(p);
        for j in 0..p {
            for k in j + 1..p {
                a.set_link(j, k, true);
            }
        }
        a
    }

    pub fn from_links(p: usize, links: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(p);
        for &(j, k) in links {
            if j >= p || k >= p {
                return Err(Error::Format(format!(
                    "link ({j}, {k}) out of range for p={p}"
                )));
            }
            if j == k {
                return Err(Error::Format(format!("self-link at node {j}")));
            }
            a.set_link(j, k, true);
        }
        Ok(a)
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.adj.p()
    }

    #[inline]
    pub fn has_link(&self, j: usize, k: usize) -> bool {
        self.adj.get(j, k)
    }

    pub fn set_link(&mut self, j: usize, k: usize, present: bool) {
        assert_ne!(j, k, "self-links are not representable");
        self.adj.set(j, k, present);
        self.adj.set(k, j, present);
    }

    pub fn link_count(&self) -> usize {
        self.adj.count_ones() / 2
    }

    /// Links `(j, k)` with `j < k`, in lexicographic order.
    pub fn links(&self) -> Vec<(usize, usize)> {
        let p = self.p();
        (0..p)
            .flat_map(|j| {
                self.adj
                    .row_ones(j)
                    .filter(move |&k| k > j)
                    .map(move |k| (j, k))
            })
            .collect()
    }

    pub fn degree(&self, j: usize) -> usize {
        self.adj.row_ones(j).count()
    }

    pub fn neighbors(&self, j: usize) -> Vec<usize> {
        self.adj.row_ones(j).collect()
    }

    pub fn matrix(&self) -> &BitMatrix {
        &self.adj
    }
}

/// A permutation; `perm[i]` is the node at position `i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeOrder {
    perm: Vec<usize>,
}

impl NodeOrder {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let p = perm.len();
        let mut seen = vec![false; p];
        for &v in &perm {
            if v >= p {
                return Err(Error::InvalidPermutation(format!(
                    "index {v} out of range for p={p}"
                )));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidPermutation(format!("duplicate index {v}")));
            }
        }
        Ok(NodeOrder { perm })
    }

    pub fn identity(p: usize) -> Self {
        NodeOrder {
            perm: (0..p).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    /// `position[v]` is the index of node `v` in the order.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.perm.len()];
        for (i, &v) in self.perm.iter().enumerate() {
            pos[v] = i;
        }
        pos
    }
}

/// `mask[j][k] = 1` iff `j` precedes `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderMask {
    mask: BitMatrix,
}

impl OrderMask {
    #[inline]
    pub fn precedes(&self, j: usize, k: usize) -> bool {
        self.mask.get(j, k)
    }

    pub fn p(&self) -> usize {
        self.mask.p()
    }
}

pub fn order_mask(order: &NodeOrder) -> OrderMask {
    let p = order.len();
    let pos = order.positions();
    let mut mask = BitMatrix::zeros(p);
    for j in 0..p {
        for k in 0..p {
            if pos[j] < pos[k] {
                mask.set(j, k, true);
            }
        }
    }
    OrderMask { mask }
}

/// Orients every skeleton link from the earlier to the later node of `order`.
pub fn compose(skeleton: &SkeletonGraph, order: &NodeOrder) -> Result<DirectedGraph> {
    let p = skeleton.p();
    if order.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: order.len(),
        });
    }
    let pos = order.positions();
    let mut g = DirectedGraph::empty(p);
    for (j, k) in skeleton.links() {
        if pos[j] < pos[k] {
            g.adj.set(j, k, true);
        } else {
            g.adj.set(k, j, true);
        }
    }
    Ok(g)
}

pub fn skeleton_of(g: &DirectedGraph) -> SkeletonGraph {
    let mut a = SkeletonGraph::empty(g.p());
    for (j, k) in g.edges() {
        a.set_link(j, k, true);
    }
    a
}

/// Kahn peeling. Returns the peel order (smallest available node first) when
/// the graph is acyclic.
pub fn kahn_order(g: &DirectedGraph) -> Option<NodeOrder> {
    let p = g.p();
    let mut indeg: Vec<usize> = (0..p).map(|k| g.parents(k).len()).collect();
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..p)
        .filter(|&k| indeg[k] == 0)
        .map(std::cmp::Reverse)
        .collect();
    let mut perm = Vec::with_capacity(p);
    while let Some(std::cmp::Reverse(j)) = ready.pop() {
        perm.push(j);
        for k in g.children(j) {
            indeg[k] -= 1;
            if indeg[k] == 0 {
                ready.push(std::cmp::Reverse(k));
            }
        }
    }
    (perm.len() == p).then_some(NodeOrder { perm })
}

pub fn is_acyclic(g: &DirectedGraph) -> bool {
    kahn_order(g).is_some()
}

pub const DEFAULT_ORDER_CAP: usize = 10_000;

/// Result of exhaustive topological-order enumeration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Enumeration {
    Complete(Vec<NodeOrder>),
    /// More than `cap` orders exist; holds the first `cap` in lexicographic order.
    Truncated(Vec<NodeOrder>),
}

impl Enumeration {
    pub fn orders(&self) -> &[NodeOrder] {
        match self {
            Enumeration::Complete(v) | Enumeration::Truncated(v) => v,
        }
    }

    pub fn into_complete(self, cap: usize) -> Result<Vec<NodeOrder>> {
        match self {
            Enumeration::Complete(v) => Ok(v),
            Enumeration::Truncated(_) => Err(Error::EnumerationOverflow { cap }),
        }
    }
}

/// All topological orders of `g`, lexicographic by position.
pub fn topological_orders(g: &DirectedGraph, cap: usize) -> Result<Enumeration> {
    if !is_acyclic(g) {
        return Err(Error::Cyclic);
    }
    let p = g.p();
    let mut indeg: Vec<usize> = (0..p).map(|k| g.parents(k).len()).collect();
    let children: Vec<Vec<usize>> = (0..p).map(|j| g.children(j)).collect();
    let mut used = vec![false; p];
    let mut prefix = Vec::with_capacity(p);
    let mut out = Vec::new();
    let complete = extend(&children, &mut indeg, &mut used, &mut prefix, &mut out, cap);
    Ok(if complete {
        Enumeration::Complete(out)
    } else {
        Enumeration::Truncated(out)
    })
}

// Returns false once the cap is exceeded.
fn extend(
    children: &[Vec<usize>],
    indeg: &mut [usize],
    used: &mut [bool],
    prefix: &mut Vec<usize>,
    out: &mut Vec<NodeOrder>,
    cap: usize,
) -> bool {
    let p = indeg.len();
    if prefix.len() == p {
        if out.len() == cap {
            return false;
        }
        out.push(NodeOrder {
            perm: prefix.clone(),
        });
        return true;
    }
    for v in 0..p {
        if used[v] || indeg[v] != 0 {
            continue;
        }
        used[v] = true;
        prefix.push(v);
        for &c in &children[v] {
            indeg[c] -= 1;
        }
        let ok = extend(children, indeg, used, prefix, out, cap);
        for &c in &children[v] {
            indeg[c] += 1;
        }
        prefix.pop();
        used[v] = false;
        if !ok {
            return false;
        }
    }
    true
}

/// Every permutation of `0..p` in lexicographic order.
pub fn all_orders(p: usize) -> Vec<NodeOrder> {
    topological_orders(&DirectedGraph::empty(p), usize::MAX)
        .expect("empty graph is acyclic")
        .orders()
        .to_vec()
}

/// Every skeleton on `p` nodes (2^(p(p-1)/2) of them).
pub fn all_skeletons(p: usize) -> Vec<SkeletonGraph> {
    let pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|j| (j + 1..p).map(move |k| (j, k)))
        .collect();
    assert!(pairs.len() < 32, "skeleton enumeration is only for tiny p");
    (0u32..1 << pairs.len())
        .map(|mask| {
            let mut a = SkeletonGraph::empty(p);
            for (b, &(j, k)) in pairs.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    a.set_link(j, k, true);
                }
            }
            a
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn order(v: &[usize]) -> NodeOrder {
        NodeOrder::new(v.to_vec()).unwrap()
    }

    #[test]
    fn order_mask_examples() {
        let m = order_mask(&order(&[0, 1]));
        assert!(m.precedes(0, 1) && !m.precedes(1, 0));
        let m = order_mask(&order(&[1, 0]));
        assert!(!m.precedes(0, 1) && m.precedes(1, 0));

        let m = order_mask(&order(&[2, 0, 1]));
        let ones: Vec<_> = (0..3)
            .flat_map(|j| (0..3).map(move |k| (j, k)))
            .filter(|&(j, k)| m.precedes(j, k))
            .collect();
        assert_eq!(ones, vec![(0, 1), (2, 0), (2, 1)]);
    }

    #[test]
    fn invalid_permutations_rejected() {
        assert!(matches!(
            NodeOrder::new(vec![0, 0]),
            Err(Error::InvalidPermutation(_))
        ));
        assert!(matches!(
            NodeOrder::new(vec![0, 2]),
            Err(Error::InvalidPermutation(_))
        ));
    }

    #[test]
    fn compose_examples() {
        let full = SkeletonGraph::complete(2);
        let g = compose(&full, &order(&[0, 1])).unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);

        let g = compose(&SkeletonGraph::empty(4), &order(&[3, 1, 0, 2])).unwrap();
        assert_eq!(g.edge_count(), 0);

        let tri = SkeletonGraph::from_links(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let g = compose(&tri, &order(&[0, 1, 2])).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (0, 2), (1, 2)]);

        assert!(matches!(
            compose(&tri, &order(&[0, 1])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn skeleton_of_examples() {
        let g = DirectedGraph::from_edges(2, &[(0, 1)]).unwrap();
        assert_eq!(skeleton_of(&g).links(), vec![(0, 1)]);
        assert_eq!(skeleton_of(&DirectedGraph::empty(3)).link_count(), 0);
        let tri = DirectedGraph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(skeleton_of(&tri), SkeletonGraph::complete(3));
    }

    #[test]
    fn acyclicity() {
        assert!(is_acyclic(&DirectedGraph::empty(3)));
        assert!(!is_acyclic(
            &DirectedGraph::from_edges(2, &[(0, 1), (1, 0)]).unwrap()
        ));
        let tri = DirectedGraph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert!(is_acyclic(&tri));
    }

    #[test]
    fn topological_order_examples() {
        let all = topological_orders(&DirectedGraph::empty(3), DEFAULT_ORDER_CAP).unwrap();
        assert_eq!(all.orders().len(), 6);
        assert!(all.orders().windows(2).all(|w| w[0] < w[1]));

        let chain = DirectedGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let e = topological_orders(&chain, DEFAULT_ORDER_CAP).unwrap();
        assert_eq!(e, Enumeration::Complete(vec![order(&[0, 1, 2])]));

        // Brute force: keep permutations respecting every edge.
        let collider = DirectedGraph::from_edges(3, &[(0, 2), (1, 2)]).unwrap();
        let brute: Vec<NodeOrder> = all_orders(3)
            .into_iter()
            .filter(|o| {
                let pos = o.positions();
                collider.edges().iter().all(|&(j, k)| pos[j] < pos[k])
            })
            .collect();
        assert_eq!(brute, vec![order(&[0, 1, 2]), order(&[1, 0, 2])]);
        let e = topological_orders(&collider, DEFAULT_ORDER_CAP).unwrap();
        assert_eq!(e.orders(), &brute[..]);
    }

    #[test]
    fn enumeration_cap_and_cycles() {
        let e = topological_orders(&DirectedGraph::empty(4), 5).unwrap();
        assert!(matches!(e, Enumeration::Truncated(ref v) if v.len() == 5));
        assert!(matches!(
            e.into_complete(5),
            Err(Error::EnumerationOverflow { cap: 5 })
        ));
        let exact = topological_orders(&DirectedGraph::empty(3), 6).unwrap();
        assert!(matches!(exact, Enumeration::Complete(ref v) if v.len() == 6));

        let cyc = DirectedGraph::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        assert!(matches!(topological_orders(&cyc, 10), Err(Error::Cyclic)));
    }

    #[test]
    fn wide_graphs_use_multiple_words() {
        let mut g = DirectedGraph::empty(130);
        g.set_edge(3, 129, true);
        g.set_edge(129, 64, true);
        assert_eq!(g.edges(), vec![(3, 129), (129, 64)]);
        assert_eq!(skeleton_of(&g).degree(129), 2);
    }
}
