//! Invariant suites with brute-force oracles, runnable from the command line.
//!
//! Each check returns the quantity it measured, the threshold it was held
//! to, and a short description of the property it exercises. The oracles
//! here are written without reusing the code they check wherever that is
//! practical: DAGs are recognized by exhaustive permutation search,
//! likelihoods are summed over every (skeleton, order) pair, and the
//! metrics are recomputed from edge sets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::dist::{
    composite_nll, consistency_residuals, directed_marginals, exact_log_likelihood, map_prediction,
    recover_beliefs, DirectedMarginals, EdgeBeliefs,
};
use crate::encoder::{forward, param_count, EncoderConfig, EncoderParams};
use crate::graph::{
    compose, is_acyclic, skeleton_of, topological_orders, DirectedGraph, NodeOrder, SkeletonGraph,
};
use crate::metrics::{average_precision, f1, nshd, shd};
use crate::rng::SplitMix64;
use crate::taskgen::{sample_skeleton, sample_task, GraphFamily, SemFamily, TaskConfig};
use crate::trainer::{edge_frequencies, minimize_composite_risk, task_loss, task_loss_and_grad};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Factorization,
    Likelihood,
    Generator,
    Encoder,
    Metrics,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Factorization,
        Suite::Likelihood,
        Suite::Generator,
        Suite::Encoder,
        Suite::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Factorization => "factorization",
            Suite::Likelihood => "likelihood",
            Suite::Generator => "generator",
            Suite::Encoder => "encoder",
            Suite::Metrics => "metrics",
        }
    }

    /// `"all"` expands to every suite.
    pub fn parse_selection(name: &str) -> Result<Vec<Suite>> {
        if name == "all" {
            return Ok(Suite::ALL.to_vec());
        }
        Ok(vec![name.parse()?])
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config("suite", format!("unknown suite `{s}`; expected one of factorization, likelihood, generator, encoder, metrics, all")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: &'static str,
    /// The property under test.
    pub anchor: &'static str,
    pub passed: bool,
    /// Measured quantity (error, failure count, rate...).
    pub observed: f64,
    pub threshold: String,
    pub seconds: f64,
}

fn timed(
    suite: Suite,
    name: &'static str,
    anchor: &'static str,
    f: impl FnOnce() -> Result<(bool, f64, String)>,
) -> CheckResult {
    let start = std::time::Instant::now();
    let (passed, observed, threshold) = match f() {
        Ok(x) => x,
        Err(e) => (false, f64::NAN, format!("error: {e}")),
    };
    CheckResult {
        suite,
        name,
        anchor,
        passed,
        observed,
        threshold,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(suite: Suite) -> Vec<CheckResult> {
    match suite {
        Suite::Factorization => vec![
            timed(suite, "dag_decomposition", "a DAG equals its skeleton oriented by any of its topological orders, and by no other order", || {
                let failures = (1..=4).map(dag_decomposition_failures).sum::<usize>();
                Ok((failures == 0, failures as f64, "0 failures, p <= 4".into()))
            }),
            timed(suite, "composition_is_acyclic", "every skeleton oriented by every order is a DAG with that skeleton and that order among its topological orders", || {
                let failures = (1..=4).map(composition_failures).sum::<usize>();
                Ok((failures == 0, failures as f64, "0 failures, p <= 4".into()))
            }),
            timed(suite, "acyclicity_test", "is_acyclic agrees with exhaustive permutation search on every directed graph", || {
                let failures = (1..=4).map(acyclicity_failures).sum::<usize>();
                Ok((failures == 0, failures as f64, "0 failures, p <= 4".into()))
            }),
            timed(suite, "enumeration_cap", "order enumeration stops at the cap and reports truncation", || {
                let e = topological_orders(&DirectedGraph::empty(8), 10_000)?;
                let ok = e.orders().len() == 10_000 && matches!(e, crate::graph::Enumeration::Truncated(_));
                Ok((ok, e.orders().len() as f64, "truncated at 10000 for 8! orders".into()))
            }),
        ],
        Suite::Likelihood => vec![
            timed(suite, "normalization", "the exact likelihood sums to one over all DAGs and matches the brute-force sum over (skeleton, order) pairs", || {
                let err = likelihood_normalization_error(20, 11)?;
                Ok((err <= 1e-8, err, "<= 1e-8".into()))
            }),
            timed(suite, "marginal_inversion", "directed marginals determine the skeleton probabilities exactly and the scores up to a shift", || {
                let (nu_err, s_err, resid) = inversion_errors(1000, 50, 12)?;
                let worst = s_err.max(resid);
                Ok((nu_err == 0.0 && worst <= 1e-10, worst.max(nu_err), "nu exact; score differences and residual <= 1e-10".into()))
            }),
            timed(suite, "cyclic_preference_residual", "a cyclic three-way preference is not representable; its triangle residual is 3 log 3", || {
                let err = (cyclic_preference_residual()? - 3.0 * 3f64.ln()).abs();
                Ok((err <= 1e-9, err, "|residual - 3 ln 3| <= 1e-9".into()))
            }),
            timed(suite, "model_marginals_consistent", "marginals generated by any skeleton-order beliefs have zero triangle residual", || {
                let worst = model_residual_max(1000, 30, 13)?;
                Ok((worst <= 1e-10, worst, "<= 1e-10".into()))
            }),
            timed(suite, "risk_minimizer_is_frequency", "the composite risk over free marginals is minimized by the edge frequencies", || {
                let err = risk_minimizer_error()?;
                Ok((err <= 1e-3, err, "<= 1e-3".into()))
            }),
            timed(suite, "population_consistency", "under a correctly specified model the risk minimizer inverts to the generating beliefs", || {
                let err = population_consistency_error(14)?;
                Ok((err <= 1e-2, err, "<= 1e-2".into()))
            }),
            timed(suite, "composite_nll_shift_invariant", "the composite NLL is unchanged by a common shift of all scores", || {
                let err = shift_invariance_error(200, 15)?;
                Ok((err <= 1e-9, err, "<= 1e-9 relative".into()))
            }),
        ],
        Suite::Generator => vec![
            timed(suite, "standardization", "every generated column has mean 0 and variance 1", || {
                let err = standardization_error(100, 21)?;
                Ok((err <= 1e-6, err, "<= 1e-6".into()))
            }),
            timed(suite, "r2_targeting", "linear-mechanism nodes reach their target R² at n = 1000", || {
                let rate = r2_hit_rate(60, 22)?;
                Ok((rate >= 0.95, rate, "share within ±0.05 >= 0.95".into()))
            }),
            timed(suite, "orientation_balance", "random orientation points each link either way with probability 1/2", || {
                let pval = orientation_balance_pvalue(400, 23)?;
                Ok((pval >= 0.01, pval, "two-sided binomial p >= 0.01".into()))
            }),
            timed(suite, "exact_edge_counts", "each graph family yields exactly the requested number of links", || {
                let failures = edge_count_failures(24)?;
                Ok((failures == 0, failures as f64, "0 failures".into()))
            }),
        ],
        Suite::Encoder => vec![
            timed(suite, "gradient_fidelity", "end-to-end gradients match central differences", || {
                let err = encoder_gradient_error(31)?;
                Ok((err <= 1e-4, err, "max relative error <= 1e-4".into()))
            }),
            timed(suite, "observation_invariance", "beliefs do not depend on the order of observations", || {
                let err = observation_permutation_error(32)?;
                Ok((err <= 1e-10, err, "<= 1e-10".into()))
            }),
            timed(suite, "variable_equivariance", "permuting variables permutes beliefs accordingly", || {
                let err = variable_permutation_error(33)?;
                Ok((err <= 1e-10, err, "<= 1e-10".into()))
            }),
            timed(suite, "skeleton_symmetry", "skeleton probabilities are exactly symmetric", || {
                let asym = skeleton_asymmetry(34)?;
                Ok((asym == 0.0, asym, "exactly 0".into()))
            }),
            timed(suite, "map_acyclic", "the maximum-probability prediction is always acyclic", || {
                let violations = map_cyclic_count(10_000, 35);
                Ok((violations == 0, violations as f64, "0 of 10000".into()))
            }),
            timed(suite, "large_parameter_count", "the large configuration has about 37M trainable parameters", || {
                let n = param_count(&EncoderConfig::large()) as f64;
                let rel = (n - 37e6).abs() / 37e6;
                Ok((rel <= 0.1, n, "within 10% of 37M".into()))
            }),
        ],
        Suite::Metrics => vec![
            timed(suite, "graph_metrics_oracle", "SHD, normalized SHD and F1 agree with edge-set recomputation on all DAG pairs", || {
                let failures = (1..=4).map(graph_metric_failures).sum::<usize>();
                Ok((failures == 0, failures as f64, "0 failures, p <= 4".into()))
            }),
            timed(suite, "average_precision_oracle", "average precision agrees with a threshold-by-threshold recomputation", || {
                let err = average_precision_error(1000, 41)?;
                Ok((err <= 1e-12, err, "<= 1e-12".into()))
            }),
            timed(suite, "perfect_iff_one", "F1 and average precision equal one exactly when the prediction or ranking is perfect", || {
                let failures = perfect_iff_one_failures(3, 42)?;
                Ok((failures == 0, failures as f64, "0 failures, p <= 3".into()))
            }),
            timed(suite, "empty_prediction_nshd", "predicting no edges scores a normalized SHD of exactly one", || {
                let mut bad = 0;
                for p in 2..=4 {
                    for g in all_dags(p).into_iter().filter(|g| g.edge_count() > 0) {
                        bad += (nshd(&DirectedGraph::empty(p), &g)? != 1.0) as usize;
                    }
                }
                Ok((bad == 0, bad as f64, "0 failures, p <= 4".into()))
            }),
        ],
    }
}

pub fn run_suites(suites: &[Suite]) -> Vec<CheckResult> {
    suites.iter().flat_map(|&s| run_suite(s)).collect()
}

// ---------------------------------------------------------------------------
// Brute-force helpers

fn permutations(p: usize) -> Vec<Vec<usize>> {
    // Heap's algorithm
    let mut a: Vec<usize> = (0..p).collect();
    let mut c = vec![0; p];
    let mut out = vec![a.clone()];
    let mut i = 0;
    while i < p {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

fn off_diagonal(p: usize) -> Vec<(usize, usize)> {
    (0..p)
        .flat_map(|j| (0..p).filter(move |&k| k != j).map(move |k| (j, k)))
        .collect()
}

fn unordered_pairs(p: usize) -> Vec<(usize, usize)> {
    (0..p)
        .flat_map(|j| (j + 1..p).map(move |k| (j, k)))
        .collect()
}

fn all_directed(p: usize) -> Vec<DirectedGraph> {
    let slots = off_diagonal(p);
    (0u64..1 << slots.len())
        .map(|bits| {
            let edges: Vec<_> = slots
                .iter()
                .enumerate()
                .filter(|(i, _)| bits >> i & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            DirectedGraph::from_edges(p, &edges).unwrap()
        })
        .collect()
}

fn respects(g: &DirectedGraph, perm: &[usize]) -> bool {
    let mut pos = vec![0; perm.len()];
    for (i, &v) in perm.iter().enumerate() {
        pos[v] = i;
    }
    g.edges().iter().all(|&(j, k)| pos[j] < pos[k])
}

fn all_dags(p: usize) -> Vec<DirectedGraph> {
    let perms = permutations(p);
    all_directed(p)
        .into_iter()
        .filter(|g| perms.iter().any(|o| respects(g, o)))
        .collect()
}

fn all_links(p: usize) -> Vec<SkeletonGraph> {
    let pairs = unordered_pairs(p);
    (0u64..1 << pairs.len())
        .map(|bits| {
            let links: Vec<_> = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| bits >> i & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            SkeletonGraph::from_links(p, &links).unwrap()
        })
        .collect()
}

fn orient(a: &SkeletonGraph, perm: &[usize]) -> DirectedGraph {
    let mut pos = vec![0; perm.len()];
    for (i, &v) in perm.iter().enumerate() {
        pos[v] = i;
    }
    let edges: Vec<_> = a
        .links()
        .into_iter()
        .map(|(j, k)| if pos[j] < pos[k] { (j, k) } else { (k, j) })
        .collect();
    DirectedGraph::from_edges(a.p(), &edges).unwrap()
}

fn random_beliefs(p: usize, rng: &mut impl RngCore) -> EdgeBeliefs {
    random_beliefs_in(p, 0.02, 2.0, rng)
}

/// ν uniform on `[lo, 1 - lo)`, scores normal with standard deviation `sd`.
fn random_beliefs_in(p: usize, lo: f64, sd: f64, rng: &mut impl RngCore) -> EdgeBeliefs {
    let mut nu = vec![0.0; p * p];
    for (j, k) in unordered_pairs(p) {
        let v = rng.random_range(lo..1.0 - lo);
        nu[j * p + k] = v;
        nu[k * p + j] = v;
    }
    let s = (0..p)
        .map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    EdgeBeliefs::from_probs(p, &nu, s).unwrap()
}

// ---------------------------------------------------------------------------
// Factorization

pub fn dag_decomposition_failures(p: usize) -> usize {
    let perms = permutations(p);
    let mut failures = 0;
    for g in all_dags(p) {
        let a = skeleton_of(&g);
        let expected: HashSet<Vec<usize>> =
            perms.iter().filter(|o| respects(&g, o)).cloned().collect();
        let got: HashSet<Vec<usize>> = match topological_orders(&g, usize::MAX) {
            Ok(e) => e.orders().iter().map(|o| o.as_slice().to_vec()).collect(),
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        if got != expected {
            failures += 1;
        }
        for o in &perms {
            let composed = compose(&a, &NodeOrder::new(o.clone()).unwrap()).unwrap();
            if (composed == g) != expected.contains(o) {
                failures += 1;
            }
        }
    }
    failures
}

pub fn composition_failures(p: usize) -> usize {
    let perms = permutations(p);
    let mut failures = 0;
    for a in all_links(p) {
        for o in &perms {
            let g = compose(&a, &NodeOrder::new(o.clone()).unwrap()).unwrap();
            let ok = g == orient(&a, o)
                && is_acyclic(&g)
                && skeleton_of(&g) == a
                && respects(&g, o)
                && topological_orders(&g, usize::MAX)
                    .map(|e| e.orders().iter().any(|x| x.as_slice() == o.as_slice()))
                    .unwrap_or(false);
            failures += !ok as usize;
        }
    }
    failures
}

pub fn acyclicity_failures(p: usize) -> usize {
    let perms = permutations(p);
    all_directed(p)
        .iter()
        .filter(|g| is_acyclic(g) != perms.iter().any(|o| respects(g, o)))
        .count()
}

// ---------------------------------------------------------------------------
// Likelihood

fn brute_joint(b: &EdgeBeliefs, a: &SkeletonGraph, perm: &[usize]) -> f64 {
    let p = b.p();
    let mut prob = 1.0;
    for (j, k) in unordered_pairs(p) {
        prob *= if a.has_link(j, k) {
            b.nu(j, k)
        } else {
            1.0 - b.nu(j, k)
        };
    }
    let s = b.scores();
    let mut remaining: Vec<usize> = (0..p).collect();
    for &v in perm {
        let z: f64 = remaining.iter().map(|&u| s[u].exp()).sum();
        prob *= s[v].exp() / z;
        remaining.retain(|&u| u != v);
    }
    prob
}

/// Largest deviation across `count` random beliefs per p ∈ {3, 4}: both
/// the total mass and each DAG's exact likelihood against the brute-force
/// aggregation over all (skeleton, order) pairs.
pub fn likelihood_normalization_error(count: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst: f64 = 0.0;
    for p in [3, 4] {
        let skeletons = all_links(p);
        let perms = permutations(p);
        let dags = all_dags(p);
        for _ in 0..count {
            let b = random_beliefs(p, &mut rng);
            let mut mass: BTreeMap<Vec<(usize, usize)>, f64> = BTreeMap::new();
            for a in &skeletons {
                for o in &perms {
                    *mass.entry(orient(a, o).edges()).or_default() += brute_joint(&b, a, o);
                }
            }
            let total_brute: f64 = mass.values().sum();
            let mut total_exact = 0.0;
            for g in &dags {
                let exact = exact_log_likelihood(&b, g, usize::MAX)?.exp();
                total_exact += exact;
                worst = worst.max((exact - mass.get(&g.edges()).copied().unwrap_or(0.0)).abs());
            }
            worst = worst
                .max((total_exact - 1.0).abs())
                .max((total_brute - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Returns `(max |ν - ν̂|, max score-difference error, max residual)` over
/// `count` random beliefs with p up to `max_p`.
pub fn inversion_errors(count: usize, max_p: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let mut rng = SplitMix64::new(seed);
    let (mut nu_err, mut s_err, mut resid): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..count {
        let p = rng.random_range(2..=max_p);
        let b = random_beliefs(p, &mut rng);
        let r = directed_marginals(&b);
        let back = recover_beliefs(&r)?;
        for (j, k) in unordered_pairs(p) {
            nu_err = nu_err.max((back.nu(j, k) - b.nu(j, k)).abs());
        }
        let (s, t) = (b.scores(), back.scores());
        for j in 1..p {
            s_err = s_err.max(((t[j] - t[0]) - (s[j] - s[0])).abs());
        }
        resid = resid.max(consistency_residuals(&r)?);
    }
    Ok((nu_err, s_err, resid))
}

/// Residual of the marginals where 0 beats 1, 1 beats 2 and 2 beats 0,
/// each three to one.
pub fn cyclic_preference_residual() -> Result<f64> {
    let p = 3;
    let mut r = vec![0.0; 9];
    for (j, k) in [(0, 1), (1, 2), (2, 0)] {
        r[j * p + k] = 0.6;
        r[k * p + j] = 0.2;
    }
    consistency_residuals(&DirectedMarginals::from_dense(p, r)?)
}

pub fn model_residual_max(count: usize, max_p: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let p = rng.random_range(3..=max_p);
        worst = worst.max(consistency_residuals(&directed_marginals(
            &random_beliefs(p, &mut rng),
        ))?);
    }
    Ok(worst)
}

/// Two equally likely DAGs on three nodes.
pub fn two_dag_meta_distribution() -> Vec<(DirectedGraph, f64)> {
    vec![
        (
            DirectedGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap(),
            0.5,
        ),
        (
            DirectedGraph::from_edges(3, &[(2, 1), (0, 2)]).unwrap(),
            0.5,
        ),
    ]
}

/// Max |r* - η| after direct risk minimization on the two-DAG example.
pub fn risk_minimizer_error() -> Result<f64> {
    let samples = two_dag_meta_distribution();
    // Frequencies of the example, by hand.
    let mut eta = vec![0.0; 9];
    for (j, k, f) in [(0, 1, 0.5), (1, 2, 0.5), (2, 1, 0.5), (0, 2, 0.5)] {
        eta[j * 3 + k] = f;
    }
    let computed = edge_frequencies(&samples)?;
    let r = minimize_composite_risk(&samples, 4000, 5.0)?;
    Ok(r.iter()
        .zip(&eta)
        .chain(computed.iter().zip(&eta))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Fits free marginals to the exact DAG distribution of random beliefs at
/// p = 4 and inverts them; returns the larger of the ν error and the
/// score-difference error. The beliefs are kept away from saturation so
/// that plain gradient descent converges on every marginal.
pub fn population_consistency_error(seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let p = 4;
    let b = random_beliefs_in(p, 0.1, 1.0, &mut rng);
    let perms = permutations(p);
    let mut samples = Vec::new();
    for a in all_links(p) {
        for o in &perms {
            samples.push((orient(&a, o), brute_joint(&b, &a, o)));
        }
    }
    let total: f64 = samples.iter().map(|s| s.1).sum();
    samples.iter_mut().for_each(|s| s.1 /= total);
    let r = minimize_composite_risk(&samples, 20_000, 5.0)?;
    let back = recover_beliefs(&DirectedMarginals::from_dense(p, r)?)?;
    let mut err: f64 = 0.0;
    for (j, k) in unordered_pairs(p) {
        err = err.max((back.nu(j, k) - b.nu(j, k)).abs());
    }
    let (s, t) = (b.scores(), back.scores());
    for j in 1..p {
        err = err.max(((t[j] - t[0]) - (s[j] - s[0])).abs());
    }
    Ok(err)
}

pub fn shift_invariance_error(count: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let p = rng.random_range(2..=12);
        let b = random_beliefs(p, &mut rng);
        let c: f64 = rng.random_range(-20.0..20.0);
        let shifted =
            EdgeBeliefs::from_probs(p, b.nu_matrix(), b.scores().iter().map(|s| s + c).collect())?;
        let g = map_prediction(&random_beliefs(p, &mut rng));
        let (x, y) = (composite_nll(&b, &g)?, composite_nll(&shifted, &g)?);
        worst = worst.max((x - y).abs() / x.abs().max(1.0));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Generator

fn column(x: &Tensor, j: usize) -> Vec<f64> {
    let p = x.shape()[1];
    x.data().iter().skip(j).step_by(p).copied().collect()
}

pub fn standardization_error(count: u64, seed: u64) -> Result<f64> {
    let cfg = TaskConfig {
        seed,
        n_range: [50, 400],
        p_range: [2, 20],
        ..TaskConfig::default()
    };
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let t = sample_task(&cfg, i)?;
        for j in 0..t.p() {
            let c = column(&t.x, j);
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            worst = worst.max(mean.abs()).max((var - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Ordinary least-squares R² of `y` on the columns `xs` plus an intercept.
fn ols_r2(y: &[f64], xs: &[Vec<f64>]) -> f64 {
    let n = y.len();
    let q = xs.len() + 1;
    let row = |i: usize| std::iter::once(1.0).chain(xs.iter().map(move |c| c[i]));
    let mut xtx = vec![0.0; q * q];
    let mut xty = vec![0.0; q];
    for i in 0..n {
        let r: Vec<f64> = row(i).collect();
        for a in 0..q {
            xty[a] += r[a] * y[i];
            for b in 0..q {
                xtx[a * q + b] += r[a] * r[b];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    let mut m = xtx;
    let mut v = xty;
    for c in 0..q {
        let piv = (c..q)
            .max_by(|&a, &b| m[a * q + c].abs().total_cmp(&m[b * q + c].abs()))
            .unwrap();
        for k in 0..q {
            m.swap(c * q + k, piv * q + k);
        }
        v.swap(c, piv);
        for r in c + 1..q {
            let f = m[r * q + c] / m[c * q + c];
            for k in c..q {
                m[r * q + k] -= f * m[c * q + k];
            }
            v[r] -= f * v[c];
        }
    }
    let mut beta = vec![0.0; q];
    for c in (0..q).rev() {
        let tail: f64 = (c + 1..q).map(|k| m[c * q + k] * beta[k]).sum();
        beta[c] = (v[c] - tail) / m[c * q + c];
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..n {
        let fit: f64 = row(i).zip(&beta).map(|(a, b)| a * b).sum();
        ss_res += (y[i] - fit).powi(2);
        ss_tot += (y[i] - mean).powi(2);
    }
    1.0 - ss_res / ss_tot
}

/// Share of non-root nodes in linear tasks at n = 1000 whose OLS R² on
/// their parents is within 0.05 of the target.
pub fn r2_hit_rate(count: u64, seed: u64) -> Result<f64> {
    let cfg = TaskConfig {
        seed,
        n_range: [1000, 1000],
        p_range: [3, 12],
        sem_families: [(SemFamily::Linear, 1.0)].into_iter().collect(),
        ..TaskConfig::default()
    };
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..count {
        let t = sample_task(&cfg, i)?;
        for j in 0..t.p() {
            let (Some(target), false) = (t.meta.r2[j], t.meta.degenerate[j]) else {
                continue;
            };
            let parents: Vec<Vec<f64>> = t
                .gstar
                .parents(j)
                .into_iter()
                .map(|k| column(&t.x, k))
                .collect();
            let r2 = ols_r2(&column(&t.x, j), &parents);
            hits += ((r2 - target).abs() <= 0.05) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Domain("no non-root nodes sampled".into()));
    }
    Ok(hits as f64 / total as f64)
}

fn binomial_two_sided(k: u64, n: u64) -> f64 {
    let ln_pmf = |i: u64| {
        libm::lgamma(n as f64 + 1.0)
            - libm::lgamma(i as f64 + 1.0)
            - libm::lgamma((n - i) as f64 + 1.0)
            - n as f64 * std::f64::consts::LN_2
    };
    let observed = ln_pmf(k);
    let p: f64 = (0..=n)
        .map(ln_pmf)
        .filter(|&l| l <= observed + 1e-9)
        .map(f64::exp)
        .sum();
    p.min(1.0)
}

/// Two-sided binomial p-value for "lower index → higher index" across all
/// links of `count` tasks.
pub fn orientation_balance_pvalue(count: u64, seed: u64) -> Result<f64> {
    let cfg = TaskConfig {
        seed,
        n_range: [10, 10],
        p_range: [2, 15],
        sem_families: [(SemFamily::Linear, 1.0)].into_iter().collect(),
        ..TaskConfig::default()
    };
    let (mut forward_edges, mut total) = (0u64, 0u64);
    for i in 0..count {
        for (j, k) in sample_task(&cfg, i)?.gstar.edges() {
            forward_edges += (j < k) as u64;
            total += 1;
        }
    }
    Ok(binomial_two_sided(forward_edges, total))
}

pub fn edge_count_failures(seed: u64) -> Result<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut failures = 0;
    for family in [
        GraphFamily::ErdosRenyi,
        GraphFamily::ScaleFree,
        GraphFamily::SmallWorld,
    ] {
        for p in 2..=20 {
            let max = p * (p - 1) / 2;
            for s in 0..=(4 * p).min(max) {
                let a = sample_skeleton(family, p, s, &mut rng)?;
                failures += (a.link_count() != s) as usize;
            }
        }
    }
    Ok(failures)
}

// ---------------------------------------------------------------------------
// Encoder

fn random_data(n: usize, p: usize, rng: &mut impl RngCore) -> Tensor {
    Tensor::new(
        &[n, p],
        (0..n * p).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .unwrap()
}

/// Max relative error of every parameter gradient of the composite NLL
/// (tiny encoder, d = 8, n = 6, p = 3) against a fourth-order central
/// difference. Entries where both values are below `1e-6` in magnitude
/// are compared absolutely: key biases, for one, have an exactly zero
/// gradient, and the difference quotient only resolves about `1e-11`.
pub fn encoder_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let cfg = EncoderConfig {
        d: 8,
        ..EncoderConfig::tiny()
    };
    let mut params = EncoderParams::init(&cfg, &mut rng)?;
    let x = random_data(6, 3, &mut rng);
    let g = DirectedGraph::from_edges(3, &[(0, 1), (0, 2)])?;
    let (_, grads) = task_loss_and_grad(&params, &x, &g)?;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (a, grad) in grads.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = params.tensors()[a].data()[i];
            let mut at = |delta: f64| {
                params.tensors_mut()[a].data_mut()[i] = orig + delta;
                task_loss(&params, &x, &g)
            };
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            params.tensors_mut()[a].data_mut()[i] = orig;
            let analytic = grad.data()[i];
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

fn belief_distance(a: &EdgeBeliefs, b: &EdgeBeliefs, perm: &[usize]) -> f64 {
    let p = a.p();
    let mut worst: f64 = 0.0;
    for j in 0..p {
        worst = worst.max((a.scores()[j] - b.scores()[perm[j]]).abs());
        for k in 0..p {
            if j != k {
                worst = worst.max((a.nu(j, k) - b.nu(perm[j], perm[k])).abs());
            }
        }
    }
    worst
}

fn small_model(rng: &mut impl RngCore) -> Result<EncoderParams> {
    EncoderParams::init(
        &EncoderConfig {
            d: 16,
            blocks: 2,
            heads: 2,
            ..EncoderConfig::tiny()
        },
        rng,
    )
}

pub fn observation_permutation_error(seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let params = small_model(&mut rng)?;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (n, p) = (rng.random_range(5..40), rng.random_range(2..8));
        let x = random_data(n, p, &mut rng);
        let mut rows: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng);
        let y = Tensor::new(
            &[n, p],
            rows.iter()
                .flat_map(|&i| x.data()[i * p..(i + 1) * p].to_vec())
                .collect(),
        )?;
        let ident: Vec<usize> = (0..p).collect();
        worst = worst.max(belief_distance(
            &forward(&params, &x)?,
            &forward(&params, &y)?,
            &ident,
        ));
    }
    Ok(worst)
}

/// Column `j` of the permuted data is column `perm[j]` of the original,
/// so its beliefs about `(j, k)` must equal the original's about
/// `(perm[j], perm[k])`.
pub fn variable_permutation_error(seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let params = small_model(&mut rng)?;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (n, p) = (rng.random_range(5..40), rng.random_range(2..8));
        let x = random_data(n, p, &mut rng);
        let mut perm: Vec<usize> = (0..p).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let y = Tensor::new(
            &[n, p],
            (0..n)
                .flat_map(|i| perm.iter().map(move |&c| (i, c)))
                .map(|(i, c)| x.data()[i * p + c])
                .collect(),
        )?;
        worst = worst.max(belief_distance(
            &forward(&params, &y)?,
            &forward(&params, &x)?,
            &perm,
        ));
    }
    Ok(worst)
}

pub fn skeleton_asymmetry(seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let params = small_model(&mut rng)?;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (n, p) = (rng.random_range(5..40), rng.random_range(2..8));
        let b = forward(&params, &random_data(n, p, &mut rng))?;
        for (j, k) in unordered_pairs(p) {
            worst = worst
                .max((b.nu(j, k) - b.nu(k, j)).abs())
                .max((b.logit(j, k) - b.logit(k, j)).abs());
        }
    }
    Ok(worst)
}

/// Cyclic MAP predictions among `count` random beliefs; half of them
/// draw scores from a few values so that ties are common.
pub fn map_cyclic_count(count: usize, seed: u64) -> usize {
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .filter(|&i| {
            let p = rng.random_range(2..=30);
            let mut nu = vec![0.0; p * p];
            for (j, k) in unordered_pairs(p) {
                let v = rng.random_range(0.0..1.0);
                nu[j * p + k] = v;
                nu[k * p + j] = v;
            }
            let s: Vec<f64> = (0..p)
                .map(|_| {
                    if i % 2 == 0 {
                        rng.random_range(0..3) as f64
                    } else {
                        StandardNormal.sample(&mut rng)
                    }
                })
                .collect();
            let b = EdgeBeliefs::from_probs(p, &nu, s).unwrap();
            let g = map_prediction(&b);
            let perms_ok = crate::graph::kahn_order(&g).is_some_and(|o| respects(&g, o.as_slice()));
            !perms_ok || !is_acyclic(&g)
        })
        .count()
}

// ---------------------------------------------------------------------------
// Metrics

type EdgeSet = HashSet<(usize, usize)>;

fn edge_set(g: &DirectedGraph) -> EdgeSet {
    g.edges().into_iter().collect()
}

fn oracle_shd(pred: &EdgeSet, truth: &EdgeSet) -> usize {
    let sym = pred.symmetric_difference(truth).count();
    let reversed = pred
        .iter()
        .filter(|&&(j, k)| {
            truth.contains(&(k, j)) && !truth.contains(&(j, k)) && !pred.contains(&(k, j))
        })
        .count();
    sym - reversed
}

fn oracle_f1(pred: &EdgeSet, truth: &EdgeSet) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let tp = pred.intersection(truth).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / pred.len() as f64;
    let recall = tp / truth.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn graph_metric_failures(p: usize) -> usize {
    let dags = all_dags(p);
    let sets: Vec<EdgeSet> = dags.iter().map(edge_set).collect();
    let mut failures = 0;
    for (pred, ps) in dags.iter().zip(&sets) {
        for (truth, ts) in dags.iter().zip(&sets) {
            let s = oracle_shd(ps, ts);
            let ok = shd(pred, truth).ok() == Some(s)
                && nshd(pred, truth).ok() == Some(s as f64 / ts.len().max(1) as f64)
                && f1(pred, truth).is_ok_and(|x| (x - oracle_f1(ps, ts)).abs() < 1e-15);
            failures += !ok as usize;
        }
    }
    failures
}

fn oracle_ap(scores: &[(f64, bool)]) -> f64 {
    let positives = scores.iter().filter(|s| s.1).count();
    if positives == 0 {
        return 1.0;
    }
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<_> = scores.iter().filter(|s| s.0 >= t).collect();
        let tp = selected.iter().filter(|s| s.1).count() as f64;
        let recall = tp / positives as f64;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}

fn random_marginals(p: usize, ties: bool, rng: &mut impl RngCore) -> DirectedMarginals {
    let mut r = vec![0.0; p * p];
    for (j, k) in unordered_pairs(p) {
        let (a, b) = if ties {
            (
                rng.random_range(0..4) as f64 * 0.1,
                rng.random_range(0..4) as f64 * 0.1,
            )
        } else {
            (rng.random_range(0.0..0.49), rng.random_range(0.0..0.49))
        };
        r[j * p + k] = a;
        r[k * p + j] = b;
    }
    DirectedMarginals::from_dense(p, r).unwrap()
}

/// Max |AP - oracle| over `count` random rankings (half with heavy ties)
/// against random DAGs.
pub fn average_precision_error(count: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let p = rng.random_range(2..=8);
        let r = random_marginals(p, i % 2 == 0, &mut rng);
        let truth = map_prediction(&random_beliefs(p, &mut rng));
        let ts = edge_set(&truth);
        let scored: Vec<(f64, bool)> = off_diagonal(p)
            .into_iter()
            .map(|(j, k)| (r.get(j, k), ts.contains(&(j, k))))
            .collect();
        worst = worst.max((average_precision(&r, &truth)? - oracle_ap(&scored)).abs());
    }
    Ok(worst)
}

/// Over all DAG pairs (F1) and all DAG/ranking pairs on a coarse grid
/// (AP), counts disagreements between "metric is 1" and "perfect".
pub fn perfect_iff_one_failures(max_p: usize, seed: u64) -> Result<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut failures = 0;
    for p in 2..=max_p {
        let dags = all_dags(p);
        for pred in &dags {
            for truth in &dags {
                failures += ((f1(pred, truth)? == 1.0) != (pred == truth)) as usize;
            }
        }
        for truth in &dags {
            let ts = edge_set(truth);
            for _ in 0..200 {
                let r = random_marginals(p, true, &mut rng);
                let scored: Vec<(f64, bool)> = off_diagonal(p)
                    .into_iter()
                    .map(|(j, k)| (r.get(j, k), ts.contains(&(j, k))))
                    .collect();
                // Perfect: every positive strictly above every negative.
                let min_pos = scored
                    .iter()
                    .filter(|s| s.1)
                    .map(|s| s.0)
                    .fold(f64::INFINITY, f64::min);
                let max_neg = scored
                    .iter()
                    .filter(|s| !s.1)
                    .map(|s| s.0)
                    .fold(f64::NEG_INFINITY, f64::max);
                let perfect = ts.is_empty() || min_pos > max_neg;
                failures += ((average_precision(&r, truth)? == 1.0) != perfect) as usize;
            }
        }
    }
    Ok(failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_complete() {
        let perms = permutations(4);
        assert_eq!(perms.len(), 24);
        assert_eq!(perms.iter().collect::<HashSet<_>>().len(), 24);
    }

    #[test]
    fn dag_counts_match_known_sequence() {
        // Labelled DAGs: 1, 3, 25, 543.
        let counts: Vec<usize> = (1..=4).map(|p| all_dags(p).len()).collect();
        assert_eq!(counts, vec![1, 3, 25, 543]);
    }

    #[test]
    fn binomial_p_values() {
        assert!((binomial_two_sided(5, 10) - 1.0).abs() < 1e-12);
        // P(X <= 1) + P(X >= 9) for Bin(10, 1/2) = 22/1024.
        assert!((binomial_two_sided(1, 10) - 22.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn ols_recovers_exact_fit() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        assert!((ols_r2(&y, &[x]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_ap_example() {
        // Ranking: +, -, + gives (1/2)·1 + (1/2)·(2/3).
        let s = [(0.9, true), (0.5, false), (0.1, true)];
        assert!((oracle_ap(&s) - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!(Suite::parse_selection("all").unwrap().len(), 5);
        assert_eq!("metrics".parse::<Suite>().unwrap(), Suite::Metrics);
        assert!(matches!("nope".parse::<Suite>(), Err(Error::Config { .. })));
    }

    #[test]
    fn every_suite_passes() {
        let results = run_suites(&Suite::ALL);
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
