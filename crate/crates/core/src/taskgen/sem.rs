//! Structural equation mechanisms, noise models, and the simulator.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution, Gamma, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::graph::{kahn_order, DirectedGraph};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemFamily {
    Linear,
    Mlp,
    Spline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Normal,
    Uniform,
    Beta,
    Gamma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Hardtanh,
    Sigmoid,
    Hardsigmoid,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Tanh,
        Activation::Hardtanh,
        Activation::Sigmoid,
        Activation::Hardsigmoid,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Hardtanh => x.clamp(-1.0, 1.0),
            Activation::Sigmoid => crate::dist::sigmoid(x),
            Activation::Hardsigmoid => (x / 6.0 + 0.5).clamp(0.0, 1.0),
        }
    }
}

pub const MLP_MAX_HIDDEN: usize = 64;
pub const SPLINE_KNOTS: usize = 5;
pub const SPLINE_RANGE: (f64, f64) = (-2.0, 2.0);

/// Natural cubic spline through `(knot_i, values_i)` on uniformly spaced
/// knots, extended linearly outside the knot range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    pub values: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    pub curvature: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(values: Vec<f64>) -> Self {
        let k = values.len();
        assert!(k >= 2, "a spline needs at least two knots");
        let h = Self::spacing(k);
        // Tridiagonal system for interior second derivatives (Thomas algorithm).
        let m = k - 2;
        let mut curvature = vec![0.0; k];
        if m > 0 {
            let mut diag = vec![4.0; m];
            let mut rhs: Vec<f64> = (1..k - 1)
                .map(|i| 6.0 * (values[i + 1] - 2.0 * values[i] + values[i - 1]) / (h * h))
                .collect();
            for i in 1..m {
                let f = 1.0 / diag[i - 1];
                diag[i] -= f;
                rhs[i] -= f * rhs[i - 1];
            }
            let mut x = vec![0.0; m];
            x[m - 1] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                x[i] = (rhs[i] - x[i + 1]) / diag[i];
            }
            curvature[1..k - 1].copy_from_slice(&x);
        }
        NaturalSpline { values, curvature }
    }

    fn spacing(k: usize) -> f64 {
        (SPLINE_RANGE.1 - SPLINE_RANGE.0) / (k - 1) as f64
    }

    pub fn knot(&self, i: usize) -> f64 {
        SPLINE_RANGE.0 + i as f64 * Self::spacing(self.values.len())
    }

    fn slope(&self, i: usize, at_left: bool) -> f64 {
        let h = Self::spacing(self.values.len());
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.curvature[i], self.curvature[i + 1]);
        if at_left {
            (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0
        } else {
            (y1 - y0) / h + h * (m0 + 2.0 * m1) / 6.0
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.values.len();
        let h = Self::spacing(k);
        if x <= SPLINE_RANGE.0 {
            return self.values[0] + self.slope(0, true) * (x - SPLINE_RANGE.0);
        }
        if x >= SPLINE_RANGE.1 {
            return self.values[k - 1] + self.slope(k - 2, false) * (x - SPLINE_RANGE.1);
        }
        let i = (((x - SPLINE_RANGE.0) / h) as usize).min(k - 2);
        let t0 = self.knot(i);
        let a = (t0 + h - x) / h;
        let b = (x - t0) / h;
        let (m0, m1) = (self.curvature[i], self.curvature[i + 1]);
        a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }
}

/// How one node is computed from its parents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mechanism {
    Root,
    Linear {
        parents: Vec<usize>,
        weights: Vec<f64>,
    },
    /// `c^T φ(W^T x_pa)`; `hidden` is row-major `parents.len() × h`.
    Mlp {
        parents: Vec<usize>,
        hidden: Vec<f64>,
        output: Vec<f64>,
        activation: Activation,
    },
    /// Sum of per-parent splines.
    Spline {
        parents: Vec<usize>,
        splines: Vec<NaturalSpline>,
    },
}

impl Mechanism {
    pub fn parents(&self) -> &[usize] {
        match self {
            Mechanism::Root => &[],
            Mechanism::Linear { parents, .. }
            | Mechanism::Mlp { parents, .. }
            | Mechanism::Spline { parents, .. } => parents,
        }
    }

    /// Mechanism output for one row; `x` holds all node values of the row.
    pub fn eval(&self, x: impl Fn(usize) -> f64) -> f64 {
        match self {
            Mechanism::Root => 0.0,
            Mechanism::Linear { parents, weights } => {
                parents.iter().zip(weights).map(|(&j, w)| w * x(j)).sum()
            }
            Mechanism::Mlp {
                parents,
                hidden,
                output,
                activation,
            } => {
                let h = output.len();
                let mut acc = 0.0;
                for (u, c) in output.iter().enumerate() {
                    let pre: f64 = parents
                        .iter()
                        .enumerate()
                        .map(|(i, &j)| hidden[i * h + u] * x(j))
                        .sum();
                    acc += c * activation.apply(pre);
                }
                acc
            }
            Mechanism::Spline { parents, splines } => parents
                .iter()
                .zip(splines)
                .map(|(&j, f)| f.eval(x(j)))
                .sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemSpec {
    pub family: SemFamily,
    /// Half-width of the weight-magnitude interval `[1 - a_w, 1 + a_w]`.
    pub a_w: f64,
    pub mechanisms: Vec<Mechanism>,
}

fn signed_weight(a_w: f64, rng: &mut impl RngCore) -> f64 {
    let mag = if a_w > 0.0 {
        rng.random_range(1.0 - a_w..=1.0 + a_w)
    } else {
        1.0
    };
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

/// Mechanisms for every node of `g`; supports match parent sets exactly.
pub fn sample_sem(
    g: &DirectedGraph,
    family: SemFamily,
    a_w_max: f64,
    rng: &mut impl RngCore,
) -> SemSpec {
    let a_w = if a_w_max > 0.0 {
        rng.random_range(0.0..a_w_max)
    } else {
        0.0
    };
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mechanisms = (0..g.p())
        .map(|j| {
            let parents = g.parents(j);
            if parents.is_empty() {
                return Mechanism::Root;
            }
            match family {
                SemFamily::Linear => Mechanism::Linear {
                    weights: parents.iter().map(|_| signed_weight(a_w, rng)).collect(),
                    parents,
                },
                SemFamily::Mlp => {
                    let h = rng.random_range(1..=MLP_MAX_HIDDEN);
                    let activation = Activation::ALL[rng.random_range(0..Activation::ALL.len())];
                    Mechanism::Mlp {
                        hidden: (0..parents.len() * h)
                            .map(|_| signed_weight(a_w, rng))
                            .collect(),
                        output: (0..h).map(|_| signed_weight(a_w, rng)).collect(),
                        activation,
                        parents,
                    }
                }
                SemFamily::Spline => Mechanism::Spline {
                    splines: parents
                        .iter()
                        .map(|_| {
                            NaturalSpline::new(
                                (0..SPLINE_KNOTS).map(|_| normal.sample(rng)).collect(),
                            )
                        })
                        .collect(),
                    parents,
                },
            }
        })
        .collect();
    SemSpec {
        family,
        a_w,
        mechanisms,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum NoiseSpec {
    /// Norm(0, 1).
    Normal,
    /// Unif(-1, 1).
    Uniform,
    Beta {
        alpha: f64,
        beta: f64,
    },
    /// Gamma(shape, 1) shifted to mean zero.
    Gamma {
        shape: f64,
    },
}

impl NoiseSpec {
    pub fn family(&self) -> NoiseFamily {
        match self {
            NoiseSpec::Normal => NoiseFamily::Normal,
            NoiseSpec::Uniform => NoiseFamily::Uniform,
            NoiseSpec::Beta { .. } => NoiseFamily::Beta,
            NoiseSpec::Gamma { .. } => NoiseFamily::Gamma,
        }
    }

    pub fn sample_n(&self, n: usize, rng: &mut impl RngCore) -> Vec<f64> {
        match *self {
            NoiseSpec::Normal => Normal::new(0.0, 1.0)
                .unwrap()
                .sample_iter(rng)
                .take(n)
                .collect(),
            NoiseSpec::Uniform => Uniform::new(-1.0, 1.0)
                .unwrap()
                .sample_iter(rng)
                .take(n)
                .collect(),
            NoiseSpec::Beta { alpha, beta } => Beta::new(alpha, beta)
                .unwrap()
                .sample_iter(rng)
                .take(n)
                .collect(),
            NoiseSpec::Gamma { shape } => Gamma::new(shape, 1.0)
                .unwrap()
                .sample_iter(rng)
                .take(n)
                .map(|x: f64| x - shape)
                .collect(),
        }
    }
}

/// Per-node noise, shared by all nodes when `homogeneous`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub homogeneous: bool,
    pub nodes: Vec<NoiseSpec>,
}

pub(crate) fn pick<T: Copy>(weights: &BTreeMap<T, f64>, rng: &mut impl RngCore) -> T {
    let mut u = rng.random::<f64>() * weights.values().sum::<f64>();
    let mut last = None;
    for (&item, &w) in weights {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return item;
        }
        u -= w;
        last = Some(item);
    }
    last.expect("at least one positive weight")
}

fn draw_noise(families: &BTreeMap<NoiseFamily, f64>, rng: &mut impl RngCore) -> NoiseSpec {
    match pick(families, rng) {
        NoiseFamily::Normal => NoiseSpec::Normal,
        NoiseFamily::Uniform => NoiseSpec::Uniform,
        NoiseFamily::Beta => NoiseSpec::Beta {
            alpha: rng.random_range(1.0..10.0),
            beta: rng.random_range(1.0..10.0),
        },
        NoiseFamily::Gamma => NoiseSpec::Gamma {
            shape: rng.random_range(1.0..10.0),
        },
    }
}

/// Fair coin between one shared noise draw and independent per-node draws.
pub fn sample_noise_spec(
    p: usize,
    families: &BTreeMap<NoiseFamily, f64>,
    rng: &mut impl RngCore,
) -> NoisePlan {
    let homogeneous = rng.random::<bool>();
    let nodes = if homogeneous {
        vec![draw_noise(families, rng); p]
    } else {
        (0..p).map(|_| draw_noise(families, rng)).collect()
    };
    NoisePlan { homogeneous, nodes }
}

/// Mean and variance (divisor `n`).
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn standardize(col: &mut [f64]) {
    let (mean, var) = moments(col);
    let sd = var.sqrt();
    for x in col.iter_mut() {
        *x = (*x - mean) / sd;
    }
}

/// Relative variance below which a mechanism output counts as constant.
const DEGENERATE_VAR: f64 = 1e-12;

pub struct Simulation {
    /// Row-major `n×p`.
    pub data: Vec<f64>,
    /// Nodes whose mechanism produced (numerically) constant output and
    /// were emitted as pure noise instead.
    pub degenerate: Vec<bool>,
}

/// Generates `n` rows in topological order. Each non-root column is
/// `signal + c·ε` with `c` chosen so the realized variance ratio
/// `Var(signal) / (Var(signal) + c²Var(ε))` equals `r2[j]`; every column is
/// standardized as soon as it is generated.
pub fn simulate(
    g: &DirectedGraph,
    sem: &SemSpec,
    noise: &NoisePlan,
    r2: &[f64],
    n: usize,
    rng: &mut impl RngCore,
) -> Result<Simulation> {
    let p = g.p();
    if n < 2 {
        return Err(Error::config("n", "at least two observations are required"));
    }
    if sem.mechanisms.len() != p || noise.nodes.len() != p || r2.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: sem.mechanisms.len().min(noise.nodes.len()).min(r2.len()),
        });
    }
    let order = kahn_order(g).ok_or(Error::Cyclic)?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut degenerate = vec![false; p];
    for &j in order.as_slice() {
        let eps = noise.nodes[j].sample_n(n, rng);
        let mech = &sem.mechanisms[j];
        let mut col = if mech.parents().is_empty() {
            eps
        } else {
            let signal: Vec<f64> = (0..n).map(|i| mech.eval(|k| cols[k][i])).collect();
            let (_, var_s) = moments(&signal);
            let (_, var_e) = moments(&eps);
            let scale = signal.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
            if !(var_s > DEGENERATE_VAR * scale * scale) || !var_s.is_finite() {
                degenerate[j] = true;
                eps
            } else {
                let c = (var_s * (1.0 - r2[j]) / (r2[j] * var_e)).sqrt();
                signal.iter().zip(&eps).map(|(s, e)| s + c * e).collect()
            }
        };
        standardize(&mut col);
        cols[j] = col;
    }
    let mut data = vec![0.0; n * p];
    for (j, col) in cols.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            data[i * p + j] = *x;
        }
    }
    Ok(Simulation { data, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn spline_interpolates_with_natural_ends() {
        let f = NaturalSpline::new(vec![0.3, -1.2, 0.8, 2.0, -0.5]);
        for i in 0..5 {
            assert!((f.eval(f.knot(i)) - f.values[i]).abs() < 1e-12);
        }
        assert_eq!(f.curvature[0], 0.0);
        assert_eq!(f.curvature[4], 0.0);
        // C¹ at an interior knot and linear beyond the range.
        let h = 1e-6;
        let t = f.knot(2);
        let dl = (f.eval(t) - f.eval(t - h)) / h;
        let dr = (f.eval(t + h) - f.eval(t)) / h;
        assert!((dl - dr).abs() < 1e-4);
        let (a, b, c) = (f.eval(3.0), f.eval(4.0), f.eval(5.0));
        assert!((b - a - (c - b)).abs() < 1e-12);
        let edge = (f.eval(2.0) - f.eval(2.0 - h)) / h;
        assert!((edge - (c - b)).abs() < 1e-4);
    }

    #[test]
    fn spline_reproduces_lines() {
        let f = NaturalSpline::new((0..5).map(|i| 2.0 * i as f64 - 1.0).collect());
        for x in [-3.0, -1.7, 0.1, 1.9, 2.5] {
            let expected = 2.0 * (x + 2.0) - 1.0;
            assert!((f.eval(x) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Hardsigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Hardsigmoid.apply(4.0), 1.0);
        assert_eq!(Activation::Hardtanh.apply(-3.0), -1.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    }

    #[test]
    fn sem_supports_match_parents() {
        let g = DirectedGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut rng = SplitMix64::new(2);
        for family in [SemFamily::Linear, SemFamily::Mlp, SemFamily::Spline] {
            let sem = sample_sem(&g, family, 0.9, &mut rng);
            assert_eq!(sem.mechanisms[0], Mechanism::Root);
            assert_eq!(sem.mechanisms[1].parents(), &[0]);
            assert_eq!(sem.mechanisms[2].parents(), &[1]);
            if let Mechanism::Mlp { hidden, output, .. } = &sem.mechanisms[1] {
                assert!((1..=64).contains(&output.len()));
                assert_eq!(hidden.len(), output.len());
            }
        }
    }

    #[test]
    fn gamma_noise_is_centered() {
        let mut rng = SplitMix64::new(5);
        let xs = NoiseSpec::Gamma { shape: 4.0 }.sample_n(20000, &mut rng);
        let (mean, var) = moments(&xs);
        assert!(mean.abs() < 0.05);
        assert!((var - 4.0).abs() < 0.2);
    }

    #[test]
    fn degenerate_mechanism_falls_back_to_noise() {
        let g = DirectedGraph::from_edges(2, &[(0, 1)]).unwrap();
        let sem = SemSpec {
            family: SemFamily::Linear,
            a_w: 0.0,
            mechanisms: vec![
                Mechanism::Root,
                Mechanism::Linear {
                    parents: vec![0],
                    weights: vec![0.0],
                },
            ],
        };
        let noise = NoisePlan {
            homogeneous: true,
            nodes: vec![NoiseSpec::Normal; 2],
        };
        let sim = simulate(&g, &sem, &noise, &[0.5, 0.5], 50, &mut SplitMix64::new(1)).unwrap();
        assert_eq!(sim.degenerate, vec![false, true]);
        assert!(sim.data.iter().all(|x| x.is_finite()));
    }
}
