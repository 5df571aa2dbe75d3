//! Synthetic causal tasks: random DAG, random SEM, standardized data.
//!
//! A task is a pure function of `(seed, index)`: every draw comes from
//! `SplitMix64::for_index(seed, index)` in a fixed sequence, so any worker
//! can regenerate any task without coordination.

mod graphs;
mod sem;

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

pub use graphs::{
    max_links, orient_random, random_order, sample_skeleton, GraphFamily, SMALL_WORLD_REWIRE,
};
pub use sem::{
    moments, sample_noise_spec, sample_sem, simulate, Activation, Mechanism, NaturalSpline,
    NoiseFamily, NoisePlan, NoiseSpec, SemFamily, SemSpec, Simulation, MLP_MAX_HIDDEN,
    SPLINE_KNOTS, SPLINE_RANGE,
};

use crate::autodiff::Tensor;
use crate::error::Error;
use crate::graph::DirectedGraph;
use crate::rng::SplitMix64;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Inclusive range of observation counts.
    pub n_range: [usize; 2],
    /// Inclusive range of variable counts.
    pub p_range: [usize; 2],
    pub graph_families: BTreeMap<GraphFamily, f64>,
    pub sem_families: BTreeMap<SemFamily, f64>,
    pub noise_families: BTreeMap<NoiseFamily, f64>,
    /// Edge counts are drawn from `{0, …, edge_multiplier_max · p}`.
    pub edge_multiplier_max: usize,
    /// Per-node R² targets are mapped into this interval.
    pub r2_range: [f64; 2],
    pub weight_magnitude_halfwidth_max: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_range: [100, 2000],
            p_range: [2, 100],
            graph_families: BTreeMap::from([
                (GraphFamily::ErdosRenyi, 0.5),
                (GraphFamily::ScaleFree, 0.5),
            ]),
            sem_families: BTreeMap::from([(SemFamily::Linear, 0.5), (SemFamily::Mlp, 0.5)]),
            noise_families: BTreeMap::from([
                (NoiseFamily::Normal, 1.0 / 3.0),
                (NoiseFamily::Uniform, 1.0 / 3.0),
                (NoiseFamily::Beta, 1.0 / 3.0),
            ]),
            edge_multiplier_max: 4,
            r2_range: [0.1, 0.9],
            weight_magnitude_halfwidth_max: 0.9,
            seed: 0,
        }
    }
}

impl TaskConfig {
    /// Narrow distribution used for desk-scale training: small tasks,
    /// linear mechanisms, Gaussian noise.
    pub fn desk() -> Self {
        TaskConfig {
            n_range: [100, 300],
            p_range: [3, 8],
            sem_families: BTreeMap::from([(SemFamily::Linear, 1.0)]),
            noise_families: BTreeMap::from([(NoiseFamily::Normal, 1.0)]),
            ..TaskConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [n0, n1] = self.n_range;
        if n0 < 2 || n0 > n1 {
            return Err(Error::config(
                "n_range",
                format!("need 2 <= min <= max, got [{n0}, {n1}]"),
            ));
        }
        let [p0, p1] = self.p_range;
        if p0 < 2 || p0 > p1 {
            return Err(Error::config(
                "p_range",
                format!("need 2 <= min <= max, got [{p0}, {p1}]"),
            ));
        }
        check_weights("graph_families", &self.graph_families)?;
        check_weights("sem_families", &self.sem_families)?;
        check_weights("noise_families", &self.noise_families)?;
        let [r0, r1] = self.r2_range;
        if !(r0 > 0.0 && r0 <= r1 && r1 < 1.0) {
            return Err(Error::config(
                "r2_range",
                format!("need 0 < min <= max < 1, got [{r0}, {r1}]"),
            ));
        }
        let a = self.weight_magnitude_halfwidth_max;
        if !(0.0..1.0).contains(&a) {
            return Err(Error::config(
                "weight_magnitude_halfwidth_max",
                format!("need a value in [0, 1), got {a}"),
            ));
        }
        Ok(())
    }
}

fn check_weights<T>(field: &str, w: &BTreeMap<T, f64>) -> Result<()> {
    if w.is_empty() {
        return Err(Error::config(field, "at least one entry is required"));
    }
    if w.values().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::config(
            field,
            "weights must be finite and nonnegative",
        ));
    }
    let total: f64 = w.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            field,
            format!("weights sum to {total}, not 1"),
        ));
    }
    Ok(())
}

/// Out-of-distribution presets, each replacing one axis of a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodPreset {
    SmallWorldGraph,
    SplineFunction,
    GammaNoise,
    AllShifts,
}

impl OodPreset {
    pub const ALL: [OodPreset; 4] = [
        OodPreset::SmallWorldGraph,
        OodPreset::SplineFunction,
        OodPreset::GammaNoise,
        OodPreset::AllShifts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OodPreset::SmallWorldGraph => "small-world-graph",
            OodPreset::SplineFunction => "spline-function",
            OodPreset::GammaNoise => "gamma-noise",
            OodPreset::AllShifts => "all-shifts",
        }
    }

    /// `base` with the preset's axes replaced.
    pub fn apply(self, base: &TaskConfig) -> TaskConfig {
        let mut c = base.clone();
        let all = self == OodPreset::AllShifts;
        if all || self == OodPreset::SmallWorldGraph {
            c.graph_families = BTreeMap::from([(GraphFamily::SmallWorld, 1.0)]);
        }
        if all || self == OodPreset::SplineFunction {
            c.sem_families = BTreeMap::from([(SemFamily::Spline, 1.0)]);
        }
        if all || self == OodPreset::GammaNoise {
            c.noise_families = BTreeMap::from([(NoiseFamily::Gamma, 1.0)]);
        }
        c
    }
}

impl FromStr for OodPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OodPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = OodPreset::ALL.iter().map(|p| p.name()).collect();
                Error::config(
                    "ood",
                    format!(
                        "unknown preset `{s}` (expected one of {})",
                        names.join(", ")
                    ),
                )
            })
    }
}

/// The default configuration with the named preset applied.
pub fn ood_preset(name: &str) -> Result<TaskConfig> {
    Ok(name.parse::<OodPreset>()?.apply(&TaskConfig::default()))
}

/// Every resolved draw behind a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub seed: u64,
    pub index: u64,
    pub n: usize,
    pub p: usize,
    pub graph_family: GraphFamily,
    /// Edge count drawn before clipping to `p(p-1)/2`.
    pub edges_drawn: usize,
    pub edges: usize,
    /// Orientation order (node at each position).
    pub order: Vec<usize>,
    pub sem: SemSpec,
    pub noise: NoisePlan,
    /// Shapes of the task-level Beta distribution for R² targets.
    pub r2_beta: [f64; 2],
    /// Target R² per node; `None` for roots.
    pub r2: Vec<Option<f64>>,
    pub degenerate: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    /// `n×p` standardized data.
    pub x: Tensor,
    pub gstar: DirectedGraph,
    pub meta: TaskMeta,
}

impl TaskSample {
    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn p(&self) -> usize {
        self.x.shape()[1]
    }
}

/// Task `index` of the stream defined by `config`.
pub fn sample_task(config: &TaskConfig, index: u64) -> Result<TaskSample> {
    sample_task_shaped(config, index, None)
}

/// Like [`sample_task`], with `(n, p)` fixed instead of drawn.
pub fn sample_task_shaped(
    config: &TaskConfig,
    index: u64,
    shape: Option<(usize, usize)>,
) -> Result<TaskSample> {
    config.validate()?;
    let mut rng = SplitMix64::for_index(config.seed, index);
    let (n, p) = match shape {
        Some(s) => s,
        None => draw_shape(config, &mut rng),
    };
    if n < 2 || p < 2 {
        return Err(Error::config(
            "shape",
            format!("need n >= 2 and p >= 2, got ({n}, {p})"),
        ));
    }
    let graph_family = sem::pick(&config.graph_families, &mut rng);
    let edges_drawn = rng.random_range(0..=config.edge_multiplier_max * p);
    let skeleton = sample_skeleton(graph_family, p, edges_drawn, &mut rng)?;
    let (gstar, order) = orient_random(&skeleton, &mut rng);
    let sem_family = sem::pick(&config.sem_families, &mut rng);
    let sem = sample_sem(
        &gstar,
        sem_family,
        config.weight_magnitude_halfwidth_max,
        &mut rng,
    );
    let noise = sample_noise_spec(p, &config.noise_families, &mut rng);
    let r2_beta = [rng.random_range(1.0..=10.0), rng.random_range(1.0..=10.0)];
    let beta = Beta::new(r2_beta[0], r2_beta[1]).unwrap();
    let [lo, hi] = config.r2_range;
    let r2: Vec<Option<f64>> = (0..p)
        .map(|j| {
            let u: f64 = beta.sample(&mut rng);
            (!gstar.parents(j).is_empty()).then_some(lo + (hi - lo) * u)
        })
        .collect();
    let targets: Vec<f64> = r2.iter().map(|r| r.unwrap_or(0.0)).collect();
    let sim = simulate(&gstar, &sem, &noise, &targets, n, &mut rng)?;
    let meta = TaskMeta {
        seed: config.seed,
        index,
        n,
        p,
        graph_family,
        edges_drawn,
        edges: gstar.edge_count(),
        order: order.as_slice().to_vec(),
        sem,
        noise,
        r2_beta,
        r2,
        degenerate: sim.degenerate,
    };
    Ok(TaskSample {
        x: Tensor::new(&[n, p], sim.data)?,
        gstar,
        meta,
    })
}

/// `(n, p)` drawn uniformly from the configured ranges.
pub fn draw_shape(config: &TaskConfig, rng: &mut impl RngCore) -> (usize, usize) {
    let n = rng.random_range(config.n_range[0]..=config.n_range[1]);
    let p = rng.random_range(config.p_range[0]..=config.p_range[1]);
    (n, p)
}
