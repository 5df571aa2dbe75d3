//! Composite risk over unconstrained directed marginals.
//!
//! For a finite distribution over ground-truth DAGs, the expected composite
//! NLL is minimized pointwise by the directed-edge frequencies. These
//! helpers minimize it numerically so that claim can be checked.

use crate::autodiff::{Tape, Tensor};
use crate::dist::sigmoid;
use crate::graph::DirectedGraph;
use crate::{Error, Result};

fn check(samples: &[(DirectedGraph, f64)]) -> Result<usize> {
    let p = samples
        .first()
        .map(|(g, _)| g.p())
        .ok_or_else(|| Error::config("samples", "need at least one graph"))?;
    let total: f64 = samples.iter().map(|(_, w)| w).sum();
    if samples.iter().any(|(g, w)| g.p() != p || !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "samples",
            "graphs must share p and weights must form a distribution",
        ));
    }
    Ok(p)
}

/// `η_jk = Σ_i w_i G_i[j][k]`, row-major with zero diagonal.
pub fn edge_frequencies(samples: &[(DirectedGraph, f64)]) -> Result<Vec<f64>> {
    let p = check(samples)?;
    let mut eta = vec![0.0; p * p];
    for (g, w) in samples {
        for (j, k) in g.edges() {
            eta[j * p + k] += w;
        }
    }
    Ok(eta)
}

/// Expected composite NLL of free marginals `r = σ(θ)` under `samples`,
/// minimized by gradient descent from `θ = 0`. Returns the row-major
/// marginals with zero diagonal; they need not satisfy the `r_jk + r_kj < 1`
/// bound of model marginals.
pub fn minimize_composite_risk(
    samples: &[(DirectedGraph, f64)],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let p = check(samples)?;
    let eta = edge_frequencies(samples)?;
    let off: Vec<f64> = (0..p * p).map(|i| (i / p != i % p) as u8 as f64).collect();
    let mut theta = Tensor::zeros(&[p, p]);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let th = tape.leaf(theta.clone());
        let r = tape.sigmoid(th);
        let ones = tape.constant(Tensor::full(&[p, p], 1.0));
        let omr = tape.sub(ones, r)?;
        let (lr_, l1r) = (tape.log(r), tape.log(omr));
        // Linear in G, so the expectation over samples uses η directly.
        let pos = tape.constant(Tensor::new(&[p, p], eta.clone())?);
        let neg = tape.constant(Tensor::new(
            &[p, p],
            off.iter().zip(&eta).map(|(o, e)| o - e).collect(),
        )?);
        let a = tape.mul(pos, lr_)?;
        let b = tape.mul(neg, l1r)?;
        let ab = tape.add(a, b)?;
        let total = tape.sum(ab);
        let loss = tape.scale(total, -1.0);
        let grads = tape.backward(loss)?;
        let g = grads.get_or_zeros(th, &theta);
        for (t, d) in theta.data_mut().iter_mut().zip(g.data()) {
            *t -= lr * d;
        }
    }
    Ok(theta
        .data()
        .iter()
        .zip(&off)
        .map(|(t, o)| o * sigmoid(*t))
        .collect())
}
