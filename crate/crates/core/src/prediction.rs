//! Next-token distributions: softmax over projection logits, the retrieval
//! distribution over temperature-scaled neighbor scores, and their
//! interpolation, plus teacher-forced sequence scoring.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::datastore::{Datastore, Metric, NeighborSet};
use crate::error::{Error, Result};

/// Output projection weights, `vocab_size x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    weights: Array2<f64>,
}

impl Projection {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Projection {
            weights: Array2::zeros((vocab_size, dim)),
        }
    }

    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(Projection { weights })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Raw logits `W h`.
    pub fn logits(&self, h: &[f32]) -> Result<Array1<f64>> {
        if h.len() != self.dim() {
            return Err(Error::QueryDimMismatch {
                expected: self.dim(),
                got: h.len(),
            });
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index: 0 });
        }
        let hv: Array1<f64> = h.iter().map(|&x| x as f64).collect();
        Ok(self.weights.dot(&hv))
    }
}

/// A distribution over the vocabulary: nonnegative, sums to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::NonFinite { index: 0 });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(ProbVector { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, token: u32) -> f64 {
        self.probs[token as usize]
    }
}

/// Retrieval and interpolation hyper-parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Hyper {
    pub k: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub metric: Metric,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::ZeroK);
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::BadLambda(self.lambda));
        }
        if self.temperature <= 0.0 {
            return Err(Error::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Which distribution `score_sequence` records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreVariant {
    Nmt,
    Knn,
    Interpolated,
}

/// Per-timestep scoring record under teacher forcing.
#[derive(Debug, Clone)]
pub struct ScoredToken {
    pub position: usize,
    pub gold_token: u32,
    pub p_gold: f64,
    pub log_p_gold: f64,
    pub neighbor_set: Option<NeighborSet>,
}

/// Supplies (k, lambda) per timestep. The constant policy is plain
/// interpolated retrieval; adaptive variants plug in here.
pub trait StepPolicy {
    fn step(&self, position: usize) -> (usize, f64);
}

/// Uses the same (k, lambda) at every step.
pub struct ConstantPolicy {
    pub k: usize,
    pub lambda: f64,
}

impl StepPolicy for ConstantPolicy {
    fn step(&self, _position: usize) -> (usize, f64) {
        (self.k, self.lambda)
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-softmax with max subtraction; avoids underflow for small tail mass.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits
        .iter()
        .map(|&z| (z - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&z| z - log_sum).collect()
}

/// p_NMT = softmax(W h).
pub fn nmt_distribution(proj: &Projection, h: &[f32]) -> Result<ProbVector> {
    let logits = proj.logits(h)?;
    ProbVector::new(softmax(logits.as_slice().unwrap()))
}

/// Retrieval distribution: mass exp(score / T) aggregated per token value.
pub fn knn_distribution(
    nbrs: &NeighborSet,
    temperature: f64,
    vocab_size: usize,
) -> Result<ProbVector> {
    if nbrs.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    if temperature <= 0.0 {
        return Err(Error::BadTemperature(temperature));
    }
    // Shift by max score before exponentiating; the distribution is invariant
    // under a constant score offset.
    let max_score = nbrs
        .entries
        .iter()
        .map(|n| n.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; vocab_size];
    for n in &nbrs.entries {
        probs[n.value as usize] += ((n.score - max_score) / temperature).exp();
    }
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    ProbVector::new(probs)
}

/// lambda * p_knn + (1 - lambda) * p_nmt.
pub fn interpolate(p_knn: &ProbVector, p_nmt: &ProbVector, lambda: f64) -> Result<ProbVector> {
    if p_knn.len() != p_nmt.len() {
        return Err(Error::LengthMismatch {
            a: p_knn.len(),
            b: p_nmt.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::BadLambda(lambda));
    }
    if lambda == 0.0 {
        return Ok(p_nmt.clone());
    }
    if lambda == 1.0 {
        return Ok(p_knn.clone());
    }
    let probs = p_knn
        .probs()
        .iter()
        .zip(p_nmt.probs())
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    ProbVector::new(probs)
}

/// Argmax over the distribution; ties broken by lowest token id.
pub fn greedy_decode_step(p: &ProbVector) -> u32 {
    let mut best = 0usize;
    for (i, &pi) in p.probs().iter().enumerate() {
        if pi > p.probs()[best] {
            best = i;
        }
    }
    best as u32
}

/// Teacher-forced scoring of a token sequence under the requested variant.
///
/// `retain_neighbors` keeps the retrieved set on each record for later
/// neighbor-quality analysis. The NMT variant skips retrieval entirely
/// unless retention is requested.
pub fn score_sequence(
    proj: &Projection,
    ds: &Datastore,
    hyper: &Hyper,
    steps: &[(Vec<f32>, u32)],
    variant: ScoreVariant,
    retain_neighbors: bool,
) -> Result<Vec<ScoredToken>> {
    hyper.validate()?;
    let policy = ConstantPolicy {
        k: hyper.k,
        lambda: hyper.lambda,
    };
    score_sequence_with_policy(proj, ds, hyper, steps, variant, retain_neighbors, &policy)
}

pub fn score_sequence_with_policy<P: StepPolicy>(
    proj: &Projection,
    ds: &Datastore,
    hyper: &Hyper,
    steps: &[(Vec<f32>, u32)],
    variant: ScoreVariant,
    retain_neighbors: bool,
    policy: &P,
) -> Result<Vec<ScoredToken>> {
    let mut out = Vec::with_capacity(steps.len());
    for (position, (h, gold)) in steps.iter().enumerate() {
        let (k, lambda) = policy.step(position);
        let needs_retrieval = retain_neighbors || variant != ScoreVariant::Nmt;
        let nbrs = if needs_retrieval {
            Some(ds.search(h, k, hyper.metric)?)
        } else {
            None
        };
        let (p_gold, log_p_gold) = match variant {
            ScoreVariant::Nmt => {
                let logits = proj.logits(h)?;
                let logp = log_softmax(logits.as_slice().unwrap());
                let lp = logp[*gold as usize];
                (lp.exp(), lp)
            }
            ScoreVariant::Knn => {
                let p = knn_distribution(nbrs.as_ref().unwrap(), hyper.temperature, proj.vocab_size())?;
                let pg = p.get(*gold);
                (pg, pg.ln())
            }
            ScoreVariant::Interpolated => {
                let p_nmt = nmt_distribution(proj, h)?;
                let p_knn =
                    knn_distribution(nbrs.as_ref().unwrap(), hyper.temperature, proj.vocab_size())?;
                let p = interpolate(&p_knn, &p_nmt, lambda)?;
                let pg = p.get(*gold);
                (pg, pg.ln())
            }
        };
        out.push(ScoredToken {
            position,
            gold_token: *gold,
            p_gold,
            log_p_gold,
            neighbor_set: if retain_neighbors { nbrs } else { None },
        });
    }
    Ok(out)
}
