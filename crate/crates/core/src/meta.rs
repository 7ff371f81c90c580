//! Softmax-free (relaxed) forms of the two output distributions, the
//! retrieval-induced update on the projection matrix, and the identity
//! between interpolated relaxed outputs and a single forward pass through
//! the updated projection.
//!
//! These forms are analysis-only: decoding in `prediction` never substitutes
//! relaxed outputs. All arithmetic here is double precision.

use ndarray::{Array1, Array2};

use crate::datastore::NeighborSet;
use crate::error::{Error, Result};
use crate::prediction::Projection;

/// Provenance of a projection update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradKind {
    /// Implicit update induced by retrieval interpolation.
    Meta,
    /// Back-propagated gradient of the neighbor log-likelihood.
    Analytic,
}

/// A `vocab_size x dim` update matrix with its provenance.
#[derive(Debug, Clone)]
pub struct GradMatrix {
    pub delta: Array2<f64>,
    pub kind: GradKind,
}

/// Relaxed base output: `W h`, no softmax.
pub fn relaxed_nmt(proj: &Projection, h: &[f32]) -> Result<Array1<f64>> {
    proj.logits(h)
}

/// Relaxed retrieval output: `(V K^T h) / T` with one-hot values, i.e. the
/// component at token v is the sum of key-query dot products over neighbors
/// valued v, divided by T.
pub fn relaxed_knn(
    nbrs: &NeighborSet,
    h: &[f32],
    temperature: f64,
    vocab_size: usize,
) -> Result<Array1<f64>> {
    if nbrs.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    if temperature <= 0.0 {
        return Err(Error::BadTemperature(temperature));
    }
    let mut out = Array1::zeros(vocab_size);
    for n in &nbrs.entries {
        let dot: f64 = n
            .key
            .iter()
            .zip(h)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        out[n.value as usize] += dot / temperature;
    }
    Ok(out)
}

/// The implicit update `V K^T - T * W`: a sum of one-hot x key outer products
/// minus the l2 term scaled by the temperature.
pub fn meta_gradient(
    nbrs: &NeighborSet,
    proj: &Projection,
    temperature: f64,
) -> Result<GradMatrix> {
    if nbrs.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    if temperature <= 0.0 {
        return Err(Error::BadTemperature(temperature));
    }
    let mut delta = proj.weights() * (-temperature);
    for n in &nbrs.entries {
        let row = n.value as usize;
        for (c, &kc) in n.key.iter().enumerate() {
            delta[[row, c]] += kc as f64;
        }
    }
    Ok(GradMatrix {
        delta,
        kind: GradKind::Meta,
    })
}

/// One forward pass through the updated projection:
/// `(W + (lambda / T) * (V K^T - T W)) h`.
pub fn dual_output(
    proj: &Projection,
    nbrs: &NeighborSet,
    h: &[f32],
    lambda: f64,
    temperature: f64,
) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::BadLambda(lambda));
    }
    let grad = meta_gradient(nbrs, proj, temperature)?;
    let updated = proj.weights() + &(grad.delta * (lambda / temperature));
    let hv: Array1<f64> = h.iter().map(|&x| x as f64).collect();
    Ok(updated.dot(&hv))
}

/// Relative residual between the updated-projection pass and the
/// interpolated relaxed outputs, with a norm floor of 1.
pub fn dual_residual(
    proj: &Projection,
    nbrs: &NeighborSet,
    h: &[f32],
    lambda: f64,
    temperature: f64,
) -> Result<f64> {
    let lhs = dual_output(proj, nbrs, h, lambda, temperature)?;
    let f_nmt = relaxed_nmt(proj, h)?;
    let f_knn = relaxed_knn(nbrs, h, temperature, proj.vocab_size())?;
    let rhs = &f_nmt + &((&f_knn - &f_nmt) * lambda);
    let diff_norm = (&lhs - &rhs).mapv(|x| x * x).sum().sqrt();
    let out_norm = lhs.mapv(|x| x * x).sum().sqrt();
    Ok(diff_norm / out_norm.max(1.0))
}
