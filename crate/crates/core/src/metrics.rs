//! Structure-recovery metrics: SHD, normalized SHD, F1, average precision.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dist::{directed_marginals, map_prediction, DirectedMarginals, EdgeBeliefs};
use crate::encoder::{forward, EncoderParams};
use crate::graph::DirectedGraph;
use crate::par::Exec;
use crate::taskgen::TaskSample;
use crate::{Error, Result};

fn same_p(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: a,
        });
    }
    Ok(())
}

// 0 = none, 1 = j→k, 2 = k→j, 3 = both
fn pair_status(g: &DirectedGraph, j: usize, k: usize) -> u8 {
    g.has_edge(j, k) as u8 | (g.has_edge(k, j) as u8) << 1
}

/// Unordered pairs whose edge status differs; a reversed edge costs one.
pub fn shd(pred: &DirectedGraph, truth: &DirectedGraph) -> Result<usize> {
    same_p(pred.p(), truth.p())?;
    let p = truth.p();
    let mut count = 0;
    for j in 0..p {
        for k in j + 1..p {
            if pair_status(pred, j, k) != pair_status(truth, j, k) {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// SHD divided by the SHD of the empty graph (the truth's edge count); the
/// raw SHD when the truth is empty.
pub fn nshd(pred: &DirectedGraph, truth: &DirectedGraph) -> Result<f64> {
    Ok(shd(pred, truth)? as f64 / truth.edge_count().max(1) as f64)
}

/// Directed-edge confusion counts. A reversed edge is one false positive
/// and one false negative, and is also tallied under `reversals`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub reversals: usize,
}

pub fn edge_counts(pred: &DirectedGraph, truth: &DirectedGraph) -> Result<EdgeCounts> {
    same_p(pred.p(), truth.p())?;
    let p = truth.p();
    let mut c = EdgeCounts::default();
    for j in 0..p {
        for k in 0..p {
            if j == k {
                continue;
            }
            match (pred.has_edge(j, k), truth.has_edge(j, k)) {
                (true, true) => c.true_positives += 1,
                (true, false) => {
                    c.false_positives += 1;
                    if truth.has_edge(k, j) && !pred.has_edge(k, j) {
                        c.reversals += 1;
                    }
                }
                (false, true) => c.false_negatives += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

/// F1 over directed edges: 1 when both graphs are empty, 0 when exactly
/// one is.
pub fn f1(pred: &DirectedGraph, truth: &DirectedGraph) -> Result<f64> {
    let c = edge_counts(pred, truth)?;
    let (np, nt) = (pred.edge_count(), truth.edge_count());
    Ok(match (np, nt) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * c.true_positives as f64 / (np + nt) as f64,
    })
}

/// Expected F1 of a random guess with the truth's edge count: that many
/// links drawn uniformly from all pairs, each oriented either way with
/// probability 1/2. Each true edge is hit with probability `s / (2M)`
/// over `M = p(p-1)/2` pairs, and F1 reduces to `TP / s` when the counts
/// match. An empty truth is matched exactly by the empty guess.
pub fn matched_random_f1(truth: &DirectedGraph) -> f64 {
    let s = truth.edge_count();
    if s == 0 {
        return 1.0;
    }
    let pairs = truth.p() * (truth.p() - 1) / 2;
    s as f64 / (2.0 * pairs as f64)
}

/// Average precision of the ranking of all ordered pairs by `r_jk`,
/// against the truth's directed edges. Tied scores form one threshold, so
/// the result depends only on the ranking. Returns 1 for an empty truth.
pub fn average_precision(marginals: &DirectedMarginals, truth: &DirectedGraph) -> Result<f64> {
    same_p(marginals.p(), truth.p())?;
    let p = truth.p();
    let positives = truth.edge_count();
    if positives == 0 {
        return Ok(1.0);
    }
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(p * p.saturating_sub(1));
    for j in 0..p {
        for k in 0..p {
            if j != k {
                scored.push((marginals.get(j, k), truth.has_edge(j, k)));
            }
        }
    }
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::NonFinite("marginal score".into()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < scored.len() {
        let mut end = i;
        while end < scored.len() && scored[end].0 == scored[i].0 {
            tp += scored[end].1 as usize;
            end += 1;
        }
        seen = end;
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = end;
    }
    debug_assert_eq!(seen, scored.len());
    Ok(ap)
}

/// Forward pass plus MAP decoding, timed together; data handling is
/// outside the timed region.
pub fn timed_predict(
    params: &EncoderParams,
    x: &Tensor,
) -> Result<(DirectedGraph, EdgeBeliefs, f64)> {
    let start = Instant::now();
    let beliefs = forward(params, x)?;
    let graph = map_prediction(&beliefs);
    let secs = start.elapsed().as_secs_f64();
    Ok((graph, beliefs, secs.max(f64::MIN_POSITIVE)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nshd: f64,
    pub f1: f64,
    pub ap: f64,
    pub runtime_seconds: f64,
    pub shd: usize,
    pub counts: EdgeCounts,
    /// The truth has no edges: nSHD is the raw SHD and AP is fixed at 1.
    pub empty_truth: bool,
}

/// Scores a prediction and its beliefs against the truth.
pub fn score(
    pred: &DirectedGraph,
    beliefs: &EdgeBeliefs,
    truth: &DirectedGraph,
    runtime_seconds: f64,
) -> Result<MetricReport> {
    Ok(MetricReport {
        nshd: nshd(pred, truth)?,
        f1: f1(pred, truth)?,
        ap: average_precision(&directed_marginals(beliefs), truth)?,
        runtime_seconds,
        shd: shd(pred, truth)?,
        counts: edge_counts(pred, truth)?,
        empty_truth: truth.edge_count() == 0,
    })
}

/// Mean and standard error (sample standard deviation over `√count`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        MeanSe { mean, se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub tasks: usize,
    pub nshd: MeanSe,
    pub f1: MeanSe,
    pub ap: MeanSe,
    pub runtime_seconds: MeanSe,
}

pub fn summarize(reports: &[MetricReport]) -> Result<MetricSummary> {
    if reports.is_empty() {
        return Err(Error::config(
            "tasks",
            "cannot summarize an empty task list",
        ));
    }
    let col = |f: fn(&MetricReport) -> f64| MeanSe::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(MetricSummary {
        tasks: reports.len(),
        nshd: col(|r| r.nshd),
        f1: col(|r| r.f1),
        ap: col(|r| r.ap),
        runtime_seconds: col(|r| r.runtime_seconds),
    })
}

/// Scores `predict` on every task. `predict` returns beliefs and the
/// runtime to report.
pub fn evaluate_with<F>(
    tasks: &[TaskSample],
    exec: Exec,
    predict: F,
) -> Result<(Vec<MetricReport>, MetricSummary)>
where
    F: Fn(&TaskSample) -> Result<(EdgeBeliefs, f64)> + Sync + Send,
{
    if tasks.is_empty() {
        return Err(Error::config("tasks", "evaluation needs at least one task"));
    }
    let reports = exec
        .map(tasks, |t| {
            let (beliefs, secs) = predict(t)?;
            score(&map_prediction(&beliefs), &beliefs, &t.gstar, secs)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&reports)?;
    Ok((reports, summary))
}

/// Scores the encoder on every task.
pub fn evaluate(
    params: &EncoderParams,
    tasks: &[TaskSample],
    exec: Exec,
) -> Result<(Vec<MetricReport>, MetricSummary)> {
    evaluate_with(tasks, exec, |t| {
        let (_, beliefs, secs) = timed_predict(params, &t.x)?;
        Ok((beliefs, secs))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::taskgen::{orient_random, sample_skeleton, GraphFamily};

    #[test]
    fn matched_random_f1_matches_simulation() {
        let truth = g(6, &[(0, 1), (1, 2), (3, 2), (4, 5), (0, 5)]);
        let mut rng = SplitMix64::new(3);
        let draws = 40_000;
        let mean = (0..draws)
            .map(|_| {
                let a = sample_skeleton(GraphFamily::ErdosRenyi, 6, 5, &mut rng).unwrap();
                f1(&orient_random(&a, &mut rng).0, &truth).unwrap()
            })
            .sum::<f64>()
            / draws as f64;
        // 5 / 30; the standard error of the mean is about 8e-4.
        assert!((mean - matched_random_f1(&truth)).abs() < 4e-3, "{mean}");
        assert_eq!(matched_random_f1(&DirectedGraph::empty(4)), 1.0);
    }

    fn g(p: usize, e: &[(usize, usize)]) -> DirectedGraph {
        DirectedGraph::from_edges(p, e).unwrap()
    }

    #[test]
    fn shd_examples() {
        let t = g(3, &[(0, 1), (1, 2)]);
        assert_eq!(shd(&t, &t).unwrap(), 0);
        assert_eq!(shd(&DirectedGraph::empty(3), &t).unwrap(), 2);
        assert_eq!(shd(&g(2, &[(1, 0)]), &g(2, &[(0, 1)])).unwrap(), 1);
        assert!(shd(&DirectedGraph::empty(2), &t).is_err());
    }

    #[test]
    fn nshd_examples() {
        let t = g(3, &[(0, 1), (1, 2)]);
        assert_eq!(nshd(&t, &t).unwrap(), 0.0);
        assert_eq!(nshd(&DirectedGraph::empty(3), &t).unwrap(), 1.0);
        let dense = g(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(nshd(&dense, &g(4, &[(0, 1)])).unwrap(), 5.0);
        assert_eq!(
            nshd(&g(3, &[(0, 1)]), &DirectedGraph::empty(3)).unwrap(),
            1.0
        );
    }

    #[test]
    fn f1_examples() {
        let t = g(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        assert_eq!(f1(&t, &t).unwrap(), 1.0);
        assert_eq!(f1(&DirectedGraph::empty(4), &t).unwrap(), 0.0);
        let extra = g(4, &[(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)]);
        assert!((f1(&extra, &t).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(
            f1(&DirectedGraph::empty(4), &DirectedGraph::empty(4)).unwrap(),
            1.0
        );
    }

    fn marg(p: usize, f: impl Fn(usize, usize) -> f64) -> DirectedMarginals {
        let mut r = vec![0.0; p * p];
        for j in 0..p {
            for k in 0..p {
                if j != k {
                    r[j * p + k] = f(j, k);
                }
            }
        }
        DirectedMarginals::from_dense(p, r).unwrap()
    }

    #[test]
    fn ap_examples() {
        let t = g(3, &[(0, 1)]);
        let perfect = marg(3, |j, k| {
            if (j, k) == (0, 1) {
                0.4
            } else {
                0.01 * (j + k) as f64 + 0.01
            }
        });
        assert_eq!(average_precision(&perfect, &t).unwrap(), 1.0);
        let reversed = marg(3, |j, k| {
            if (j, k) == (0, 1) {
                0.001
            } else {
                0.05 + 0.01 * (3 * j + k) as f64
            }
        });
        assert!((average_precision(&reversed, &t).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        // All tied: one threshold, precision = prevalence.
        let flat = marg(3, |_, _| 0.2);
        assert!((average_precision(&flat, &t).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(
            average_precision(&flat, &DirectedGraph::empty(3)).unwrap(),
            1.0
        );
    }

    #[test]
    fn counts_track_reversals() {
        let c = edge_counts(&g(3, &[(1, 0), (1, 2)]), &g(3, &[(0, 1), (1, 2)])).unwrap();
        assert_eq!(
            c,
            EdgeCounts {
                true_positives: 1,
                false_positives: 1,
                false_negatives: 1,
                reversals: 1
            }
        );
    }

    #[test]
    fn standard_error_definition() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(m.mean, 3.0);
        let sd = ((4.0 + 1.0 + 0.0 + 9.0) / 3.0f64).sqrt();
        assert!((m.se - sd / 2.0).abs() < 1e-15);
        assert!(summarize(&[]).is_err());
    }
}
