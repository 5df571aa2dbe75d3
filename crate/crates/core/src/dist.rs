//! Product-Bernoulli skeleton × Plackett–Luce order distribution over DAGs.
//!
//! Edge probabilities are kept alongside their logits so that every
//! likelihood path can work in log-sigmoid form; `log(1 - ν q)` underflows
//! badly for confident beliefs otherwise.

use crate::graph::{
    compose, skeleton_of, topological_orders, DirectedGraph, NodeOrder, SkeletonGraph,
};
use crate::{Error, Result};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before logs in the loss.
pub const CLAMP: f64 = 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log σ(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(1 - exp(a))` for `a ≤ 0`.
#[inline]
pub fn log1mexp(a: f64) -> f64 {
    if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric skeleton edge probabilities `ν` and order scores `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBeliefs {
    p: usize,
    nu: Vec<f64>,
    logits: Vec<f64>,
    s: Vec<f64>,
}

impl EdgeBeliefs {
    /// From edge logits `e` (ν = σ(e)); `logits` is a row-major p×p matrix
    /// whose upper triangle is used and mirrored.
    pub fn from_logits(p: usize, logits: &[f64], s: Vec<f64>) -> Result<Self> {
        check_len(p, logits.len(), s.len())?;
        let mut lg = vec![0.0; p * p];
        let mut nu = vec![0.0; p * p];
        for j in 0..p {
            for k in j + 1..p {
                let e = logits[j * p + k];
                if !e.is_finite() {
                    return Err(Error::NonFinite(format!("edge logit ({j}, {k})")));
                }
                let v = sigmoid(e);
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::Domain(format!(
                        "edge probability ({j}, {k}) saturated at {v}"
                    )));
                }
                lg[j * p + k] = e;
                lg[k * p + j] = e;
                nu[j * p + k] = v;
                nu[k * p + j] = v;
            }
        }
        check_scores(&s)?;
        Ok(EdgeBeliefs {
            p,
            nu,
            logits: lg,
            s,
        })
    }

    /// From edge probabilities; the upper triangle of `nu` is used and mirrored.
    pub fn from_probs(p: usize, nu: &[f64], s: Vec<f64>) -> Result<Self> {
        check_len(p, nu.len(), s.len())?;
        let mut probs = vec![0.0; p * p];
        let mut lg = vec![0.0; p * p];
        for j in 0..p {
            for k in j + 1..p {
                let v = nu[j * p + k];
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::Domain(format!(
                        "edge probability ({j}, {k}) = {v} outside (0, 1)"
                    )));
                }
                let e = v.ln() - (-v).ln_1p();
                probs[j * p + k] = v;
                probs[k * p + j] = v;
                lg[j * p + k] = e;
                lg[k * p + j] = e;
            }
        }
        check_scores(&s)?;
        Ok(EdgeBeliefs {
            p,
            nu: probs,
            logits: lg,
            s,
        })
    }

    /// Every pair shares the same probability `nu`.
    pub fn uniform(p: usize, nu: f64, s: Vec<f64>) -> Result<Self> {
        Self::from_probs(p, &vec![nu; p * p], s)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn nu(&self, j: usize, k: usize) -> f64 {
        self.nu[j * self.p + k]
    }

    #[inline]
    pub fn logit(&self, j: usize, k: usize) -> f64 {
        self.logits[j * self.p + k]
    }

    pub fn scores(&self) -> &[f64] {
        &self.s
    }

    /// Row-major p×p probability matrix with zero diagonal.
    pub fn nu_matrix(&self) -> &[f64] {
        &self.nu
    }

    /// Upper triangle `(0,1), (0,2), …, (1,2), …` in row-major order.
    pub fn nu_upper(&self) -> Vec<f64> {
        let p = self.p;
        (0..p)
            .flat_map(|j| (j + 1..p).map(move |k| (j, k)))
            .map(|(j, k)| self.nu(j, k))
            .collect()
    }
}

fn check_len(p: usize, mat: usize, s: usize) -> Result<()> {
    if mat != p * p {
        return Err(Error::DimensionMismatch {
            expected: p * p,
            got: mat,
        });
    }
    if s != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: s,
        });
    }
    Ok(())
}

fn check_scores(s: &[f64]) -> Result<()> {
    match s.iter().position(|x| !x.is_finite()) {
        Some(j) => Err(Error::NonFinite(format!("score s[{j}]"))),
        None => Ok(()),
    }
}

/// Directed edge marginals `r[j][k] = Pr(G_jk = 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectedMarginals {
    p: usize,
    r: Vec<f64>,
}

impl DirectedMarginals {
    /// Dense row-major p×p matrix; the diagonal must be zero and entries in [0, 1].
    pub fn from_dense(p: usize, r: Vec<f64>) -> Result<Self> {
        if r.len() != p * p {
            return Err(Error::DimensionMismatch {
                expected: p * p,
                got: r.len(),
            });
        }
        for j in 0..p {
            for k in 0..p {
                let v = r[j * p + k];
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain(format!("marginal ({j}, {k}) = {v}")));
                }
                if j == k && v != 0.0 {
                    return Err(Error::Domain(format!("nonzero diagonal at {j}")));
                }
            }
        }
        Ok(DirectedMarginals { p, r })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.r[j * self.p + k]
    }

    pub fn as_dense(&self) -> &[f64] {
        &self.r
    }
}

pub fn skeleton_log_prob(beliefs: &EdgeBeliefs, a: &SkeletonGraph) -> Result<f64> {
    let p = beliefs.p();
    if a.p() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: a.p(),
        });
    }
    let mut total = 0.0;
    for j in 0..p {
        for k in j + 1..p {
            let e = beliefs.logit(j, k);
            total += if a.has_link(j, k) {
                log_sigmoid(e)
            } else {
                log_sigmoid(-e)
            };
        }
    }
    Ok(total)
}

/// Plackett–Luce log mass of `order`; larger scores favor earlier positions.
pub fn order_log_prob(beliefs: &EdgeBeliefs, order: &NodeOrder) -> Result<f64> {
    if order.len() != beliefs.p() {
        return Err(Error::DimensionMismatch {
            expected: beliefs.p(),
            got: order.len(),
        });
    }
    let s = beliefs.scores();
    let perm = order.as_slice();
    // Suffix log-sum-exp, accumulated back to front with a running max.
    let mut total = 0.0;
    let mut m = f64::NEG_INFINITY;
    let mut acc = 0.0;
    for &v in perm.iter().rev() {
        let x = s[v];
        if x > m {
            acc = acc * (m - x).exp() + 1.0;
            m = x;
        } else {
            acc += (x - m).exp();
        }
        total += x - (m + acc.ln());
    }
    Ok(total)
}

/// `q_jk = σ(s_j - s_k)`, the probability that `j` precedes `k`.
pub fn precedence_prob(beliefs: &EdgeBeliefs, j: usize, k: usize) -> Result<f64> {
    if j == k {
        return Err(Error::Domain(format!("precedence of node {j} with itself")));
    }
    let s = beliefs.scores();
    Ok(sigmoid(s[j] - s[k]))
}

pub fn directed_marginals(beliefs: &EdgeBeliefs) -> DirectedMarginals {
    let p = beliefs.p();
    let s = beliefs.scores();
    let mut r = vec![0.0; p * p];
    for j in 0..p {
        for k in j + 1..p {
            let nu = beliefs.nu(j, k);
            let d = s[j] - s[k];
            // The smaller direction is computed as a product and the larger
            // as the remainder. Re-deriving the smaller one from the rounded
            // remainder is exact (the operands are within a factor of two),
            // so the pair sums back to ν without rounding.
            let (small, large) = if d >= 0.0 {
                (k * p + j, j * p + k)
            } else {
                (j * p + k, k * p + j)
            };
            let rest = nu - nu * sigmoid(-d.abs());
            r[large] = rest;
            r[small] = nu - rest;
        }
    }
    DirectedMarginals { p, r }
}

/// Composite negative log-likelihood over ordered pairs, in log-sigmoid form.
pub fn composite_nll(beliefs: &EdgeBeliefs, gstar: &DirectedGraph) -> Result<f64> {
    let p = beliefs.p();
    if gstar.p() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: gstar.p(),
        });
    }
    let s = beliefs.scores();
    let lo = CLAMP.ln();
    let hi = (-CLAMP).ln_1p();
    let mut total = 0.0;
    for j in 0..p {
        for k in 0..p {
            if j == k {
                continue;
            }
            let log_r = (log_sigmoid(beliefs.logit(j, k)) + log_sigmoid(s[j] - s[k])).clamp(lo, hi);
            total -= if gstar.has_edge(j, k) {
                log_r
            } else {
                log1mexp(log_r)
            };
        }
    }
    if !total.is_finite() {
        return Err(Error::Domain("composite likelihood is not finite".into()));
    }
    Ok(total)
}

/// `log p(G*)`: skeleton mass times the Plackett–Luce mass of every
/// topological order of `G*`. Intended for small graphs.
pub fn exact_log_likelihood(
    beliefs: &EdgeBeliefs,
    gstar: &DirectedGraph,
    cap: usize,
) -> Result<f64> {
    let skel = skeleton_log_prob(beliefs, &skeleton_of(gstar))?;
    let orders = topological_orders(gstar, cap)?.into_complete(cap)?;
    let logs = orders
        .iter()
        .map(|o| order_log_prob(beliefs, o))
        .collect::<Result<Vec<_>>>()?;
    Ok(skel + logsumexp(&logs))
}

/// Inverts `r = ν σ(s_j - s_k)`: `ν_jk = r_jk + r_kj`, `s_j = log(r_j0 / r_0j)`.
pub fn recover_beliefs(r: &DirectedMarginals) -> Result<EdgeBeliefs> {
    let p = r.p();
    let mut nu = vec![0.0; p * p];
    for j in 0..p {
        for k in j + 1..p {
            let (a, b) = (r.get(j, k), r.get(k, j));
            if a <= 0.0 || b <= 0.0 {
                return Err(Error::Domain(format!("zero marginal for pair ({j}, {k})")));
            }
            nu[j * p + k] = a + b;
        }
    }
    let s = (0..p)
        .map(|j| {
            if j == 0 {
                0.0
            } else {
                (r.get(j, 0) / r.get(0, j)).ln()
            }
        })
        .collect();
    EdgeBeliefs::from_probs(p, &nu, s)
}

/// Largest triangle sum `|ρ_ij + ρ_jk + ρ_ki|` with `ρ_jk = log(r_jk / r_kj)`.
/// Zero exactly when `r` is representable by some skeleton–order beliefs.
pub fn consistency_residuals(r: &DirectedMarginals) -> Result<f64> {
    let p = r.p();
    let mut rho = vec![0.0; p * p];
    for j in 0..p {
        for k in 0..p {
            if j == k {
                continue;
            }
            let (a, b) = (r.get(j, k), r.get(k, j));
            if a <= 0.0 || b <= 0.0 {
                return Err(Error::Domain(format!("zero marginal for pair ({j}, {k})")));
            }
            rho[j * p + k] = (a / b).ln();
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..p {
        for j in i + 1..p {
            for k in j + 1..p {
                let cyc = rho[i * p + j] + rho[j * p + k] + rho[k * p + i];
                worst = worst.max(cyc.abs());
            }
        }
    }
    Ok(worst)
}

/// Scores sorted descending; ties go to the smaller node index.
pub fn map_order(scores: &[f64]) -> NodeOrder {
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    perm.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    NodeOrder::new(perm).expect("sorted indices form a permutation")
}

/// Most probable `(A, π)` pair, oriented into a DAG: links with `ν > 0.5`
/// (strict) oriented by the score-sorted order.
pub fn map_prediction(beliefs: &EdgeBeliefs) -> DirectedGraph {
    let p = beliefs.p();
    let mut a = SkeletonGraph::empty(p);
    for j in 0..p {
        for k in j + 1..p {
            if beliefs.nu(j, k) > 0.5 {
                a.set_link(j, k, true);
            }
        }
    }
    compose(&a, &map_order(beliefs.scores())).expect("dimensions agree")
}

/// Joint log mass `log p(A) + log p(π)`.
pub fn joint_log_prob(beliefs: &EdgeBeliefs, a: &SkeletonGraph, order: &NodeOrder) -> Result<f64> {
    Ok(skeleton_log_prob(beliefs, a)? + order_log_prob(beliefs, order)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{all_orders, DEFAULT_ORDER_CAP};

    const LN2: f64 = std::f64::consts::LN_2;

    fn b2(nu: f64, s: [f64; 2]) -> EdgeBeliefs {
        EdgeBeliefs::uniform(2, nu, s.to_vec()).unwrap()
    }

    #[test]
    fn skeleton_log_prob_examples() {
        let b = b2(0.5, [0.0, 0.0]);
        let full = SkeletonGraph::complete(2);
        assert!((skeleton_log_prob(&b, &full).unwrap() + LN2).abs() < 1e-12);
        let empty = SkeletonGraph::empty(2);
        assert!((skeleton_log_prob(&b, &empty).unwrap() + LN2).abs() < 1e-12);
        let b3 = EdgeBeliefs::uniform(3, 0.5, vec![0.0; 3]).unwrap();
        let a = SkeletonGraph::from_links(3, &[(0, 2)]).unwrap();
        assert!((skeleton_log_prob(&b3, &a).unwrap() + 3.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_probabilities_rejected() {
        assert!(matches!(
            EdgeBeliefs::uniform(2, 1.0, vec![0.0; 2]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            EdgeBeliefs::uniform(2, 0.0, vec![0.0; 2]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn order_log_prob_examples() {
        let b = EdgeBeliefs::uniform(3, 0.5, vec![0.0; 3]).unwrap();
        for o in all_orders(3) {
            assert!((order_log_prob(&b, &o).unwrap() - (1.0f64 / 6.0).ln()).abs() < 1e-12);
        }
        let b = b2(0.5, [2f64.ln(), 0.0]);
        let lp = order_log_prob(&b, &NodeOrder::identity(2)).unwrap();
        assert!((lp - (2.0f64 / 3.0).ln()).abs() < 1e-12);

        let s = vec![0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = s.iter().map(|x| x + 41.0).collect();
        let a = EdgeBeliefs::uniform(4, 0.5, s).unwrap();
        let c = EdgeBeliefs::uniform(4, 0.5, shifted).unwrap();
        for o in all_orders(4) {
            let d = order_log_prob(&a, &o).unwrap() - order_log_prob(&c, &o).unwrap();
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn order_log_prob_is_stable_for_huge_scores() {
        let b = b2(0.5, [1000.0, -1000.0]);
        let lp = order_log_prob(&b, &NodeOrder::new(vec![1, 0]).unwrap()).unwrap();
        assert!((lp + 2000.0).abs() < 1e-9);
    }

    #[test]
    fn precedence_examples() {
        let b = b2(0.5, [0.7, 0.7]);
        assert_eq!(precedence_prob(&b, 0, 1).unwrap(), 0.5);
        let b = b2(0.5, [3f64.ln(), 0.0]);
        assert!((precedence_prob(&b, 0, 1).unwrap() - 0.75).abs() < 1e-15);
        assert!(precedence_prob(&b, 1, 1).is_err());
        let b = EdgeBeliefs::uniform(3, 0.5, vec![0.1, -2.0, 5.0]).unwrap();
        for (j, k) in [(0, 1), (1, 2), (0, 2)] {
            let t = precedence_prob(&b, j, k).unwrap() + precedence_prob(&b, k, j).unwrap();
            assert!((t - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn directed_marginal_examples() {
        let r = directed_marginals(&b2(0.5, [0.0, 0.0]));
        assert_eq!((r.get(0, 1), r.get(1, 0)), (0.25, 0.25));
        assert_eq!((r.get(0, 0), r.get(1, 1)), (0.0, 0.0));
        let r = directed_marginals(&b2(0.4, [3f64.ln(), 0.0]));
        assert!((r.get(0, 1) - 0.3).abs() < 1e-15);
        assert!((r.get(1, 0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn composite_nll_examples() {
        let g = DirectedGraph::from_edges(2, &[(0, 1)]).unwrap();
        let l = composite_nll(&b2(0.5, [0.0, 0.0]), &g).unwrap();
        assert!((l - (-(0.25f64).ln() - (0.75f64).ln())).abs() < 1e-12);
        assert!((l - 1.673976).abs() < 1e-6);

        let empty = DirectedGraph::empty(3);
        let s = vec![0.4, -0.1, 1.3];
        let mut prev = f64::INFINITY;
        for nu in [0.9, 0.7, 0.5, 0.3, 0.1, 0.01] {
            let l =
                composite_nll(&EdgeBeliefs::uniform(3, nu, s.clone()).unwrap(), &empty).unwrap();
            assert!(l < prev);
            prev = l;
        }

        let g = DirectedGraph::from_edges(3, &[(0, 1), (2, 1)]).unwrap();
        let a = EdgeBeliefs::uniform(3, 0.3, s.clone()).unwrap();
        let c = EdgeBeliefs::uniform(3, 0.3, s.iter().map(|x| x - 7.5).collect()).unwrap();
        let d = composite_nll(&a, &g).unwrap() - composite_nll(&c, &g).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn composite_nll_handles_confident_beliefs() {
        // ν q ≈ 1 - 1e-13 on a non-edge: the clamp keeps the loss finite.
        let b = EdgeBeliefs::from_logits(2, &[0.0, 30.0, 30.0, 0.0], vec![30.0, 0.0]).unwrap();
        let l = composite_nll(&b, &DirectedGraph::empty(2)).unwrap();
        assert!((l - (-(CLAMP).ln() + 0.0)).abs() < 1e-6);
    }

    #[test]
    fn exact_likelihood_examples() {
        let b = b2(0.5, [0.0, 0.0]);
        let g = DirectedGraph::from_edges(2, &[(0, 1)]).unwrap();
        let l = exact_log_likelihood(&b, &g, DEFAULT_ORDER_CAP).unwrap();
        assert!((l - 0.25f64.ln()).abs() < 1e-12);
        let l = exact_log_likelihood(&b, &DirectedGraph::empty(2), DEFAULT_ORDER_CAP).unwrap();
        assert!((l - 0.5f64.ln()).abs() < 1e-12);
        let err = exact_log_likelihood(&b, &DirectedGraph::empty(2), 1);
        assert!(matches!(err, Err(Error::EnumerationOverflow { cap: 1 })));
    }

    #[test]
    fn recover_examples() {
        let r = DirectedMarginals::from_dense(2, vec![0.0, 0.3, 0.1, 0.0]).unwrap();
        let b = recover_beliefs(&r).unwrap();
        assert!((b.nu(0, 1) - 0.4).abs() < 1e-15);
        let d = b.scores()[0] - b.scores()[1];
        assert!((d - 3f64.ln()).abs() < 1e-12);

        let r = DirectedMarginals::from_dense(3, vec![0.0, 0.2, 0.1, 0.2, 0.0, 0.3, 0.1, 0.3, 0.0])
            .unwrap();
        let b = recover_beliefs(&r).unwrap();
        assert!(b.scores().iter().all(|&x| x == 0.0));

        let r = DirectedMarginals::from_dense(2, vec![0.0, 0.3, 0.0, 0.0]).unwrap();
        assert!(matches!(recover_beliefs(&r), Err(Error::Domain(_))));
    }

    #[test]
    fn consistency_examples() {
        let cyc =
            DirectedMarginals::from_dense(3, vec![0.0, 0.3, 0.1, 0.1, 0.0, 0.3, 0.3, 0.1, 0.0])
                .unwrap();
        let res = consistency_residuals(&cyc).unwrap();
        assert!((res - 3.0 * 3f64.ln()).abs() < 1e-12);
        let two = DirectedMarginals::from_dense(2, vec![0.0, 0.3, 0.1, 0.0]).unwrap();
        assert_eq!(consistency_residuals(&two).unwrap(), 0.0);
    }

    #[test]
    fn map_examples() {
        let g = map_prediction(&b2(0.9, [1.0, 0.0]));
        assert_eq!(g.edges(), vec![(0, 1)]);
        let g = map_prediction(&b2(0.5, [1.0, 0.0]));
        assert_eq!(g.edge_count(), 0);
        let b = EdgeBeliefs::uniform(4, 0.2, vec![3.0, -1.0, 0.0, 2.0]).unwrap();
        assert_eq!(map_prediction(&b).edge_count(), 0);
        // Equal scores: smaller index first.
        let g = map_prediction(&b2(0.9, [0.0, 0.0]));
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert_eq!(map_order(&[1.0, 2.0, 2.0, 0.0]).as_slice(), &[1, 2, 0, 3]);
    }
}
