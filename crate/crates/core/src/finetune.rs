//! Explicit fine-tuning of the output projection on retrieved neighbors:
//! the regularized log-likelihood objective, its closed-form gradient, a
//! central finite-difference oracle, per-timestep and full-data training
//! loops, and grid search over (learning rate, l2 coefficient).

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{Datastore, NeighborSet};
use crate::error::{Error, Result};
use crate::meta::{GradKind, GradMatrix};
use crate::prediction::{log_softmax, softmax, Hyper, Projection, ScoredToken};

/// Validation PPL is checked every this many optimizer steps during
/// `finetune_full`, and the best weights seen are returned.
pub const EVAL_INTERVAL: usize = 50;

/// Fine-tuning hyper-parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FtHyper {
    /// Learning rate (ascent step size).
    pub lr: f64,
    /// l2-regularization coefficient.
    pub alpha: f64,
    /// Number of optimizer steps.
    pub steps: usize,
    /// Mini-batch size.
    pub batch: usize,
}

impl FtHyper {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Candidate grid for learning rate and l2 coefficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub lr_candidates: Vec<f64>,
    pub alpha_candidates: Vec<f64>,
}

impl GridSpec {
    /// Full default grid: lr bases 1..9 scaled by 1e-1..1e-4, and the
    /// standard l2 candidates.
    pub fn full() -> Self {
        let mut lr_candidates = Vec::new();
        for scale in [1e-1, 1e-2, 1e-3, 1e-4] {
            for base in 1..=9 {
                lr_candidates.push(base as f64 * scale);
            }
        }
        GridSpec {
            lr_candidates,
            alpha_candidates: vec![0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_candidates.is_empty() || self.alpha_candidates.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if self.lr_candidates.iter().any(|&lr| lr <= 0.0) {
            return Err(Error::InvalidConfig("grid learning rates must be > 0".into()));
        }
        Ok(())
    }
}

fn loss_over<'a, I>(proj: &Projection, pairs: I, alpha: f64) -> f64
where
    I: Iterator<Item = (&'a [f32], u32)>,
{
    let mut data_term = 0.0;
    for (key, value) in pairs {
        let logits = proj.logits(key).expect("shape checked by caller");
        let logp = log_softmax(logits.as_slice().unwrap());
        data_term += logp[value as usize];
    }
    let reg = proj.weights().iter().map(|w| w * w).sum::<f64>();
    data_term - 0.5 * alpha * reg
}

fn gradient_over<'a, I>(proj: &Projection, pairs: I, alpha: f64) -> Array2<f64>
where
    I: Iterator<Item = (&'a [f32], u32)>,
{
    let mut delta = proj.weights() * (-alpha);
    for (key, value) in pairs {
        let logits = proj.logits(key).expect("shape checked by caller");
        let probs = softmax(logits.as_slice().unwrap());
        for (row, &p) in probs.iter().enumerate() {
            let err = if row == value as usize { 1.0 - p } else { -p };
            for (c, &kc) in key.iter().enumerate() {
                delta[[row, c]] += err * kc as f64;
            }
        }
    }
    delta
}

/// Regularized log-likelihood of the neighbor set:
/// sum_j log softmax(W K_j)[V_j] - (alpha/2) |W|^2.
pub fn opl_loss(proj: &Projection, nbrs: &NeighborSet, alpha: f64) -> Result<f64> {
    if nbrs.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    Ok(loss_over(
        proj,
        nbrs.entries.iter().map(|n| (n.key.as_slice(), n.value)),
        alpha,
    ))
}

/// Closed-form gradient of `opl_loss`:
/// sum_j (onehot(V_j) - softmax(W K_j)) x K_j^T - alpha * W.
pub fn opl_gradient(proj: &Projection, nbrs: &NeighborSet, alpha: f64) -> Result<GradMatrix> {
    if nbrs.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    Ok(GradMatrix {
        delta: gradient_over(
            proj,
            nbrs.entries.iter().map(|n| (n.key.as_slice(), n.value)),
            alpha,
        ),
        kind: GradKind::Analytic,
    })
}

/// The gradient with the model-prediction term dropped from the error
/// signal: sum_j onehot(V_j) x K_j^T - alpha * W. With alpha set to the
/// retrieval temperature this coincides with the implicit update of
/// `meta::meta_gradient`.
pub fn label_only_gradient(
    proj: &Projection,
    nbrs: &NeighborSet,
    alpha: f64,
) -> Result<GradMatrix> {
    if nbrs.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    let mut delta = proj.weights() * (-alpha);
    for n in &nbrs.entries {
        let row = n.value as usize;
        for (c, &kc) in n.key.iter().enumerate() {
            delta[[row, c]] += kc as f64;
        }
    }
    Ok(GradMatrix {
        delta,
        kind: GradKind::Analytic,
    })
}

/// Central finite differences of `opl_loss` over every weight entry.
pub fn fd_gradient(
    proj: &Projection,
    nbrs: &NeighborSet,
    alpha: f64,
    epsilon: f64,
) -> Result<GradMatrix> {
    if nbrs.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    let (rows, cols) = (proj.vocab_size(), proj.dim());
    let mut delta = Array2::zeros((rows, cols));
    let mut work = proj.clone();
    for r in 0..rows {
        for c in 0..cols {
            let orig = work.weights()[[r, c]];
            work.weights_mut()[[r, c]] = orig + epsilon;
            let plus = opl_loss(&work, nbrs, alpha)?;
            work.weights_mut()[[r, c]] = orig - epsilon;
            let minus = opl_loss(&work, nbrs, alpha)?;
            work.weights_mut()[[r, c]] = orig;
            delta[[r, c]] = (plus - minus) / (2.0 * epsilon);
        }
    }
    Ok(GradMatrix {
        delta,
        kind: GradKind::Analytic,
    })
}

/// Ascent update `W' = W + lr * delta`.
pub fn sgd_step(proj: &Projection, grad: &GradMatrix, lr: f64) -> Result<Projection> {
    if proj.weights().dim() != grad.delta.dim() {
        return Err(Error::LengthMismatch {
            a: proj.weights().len(),
            b: grad.delta.len(),
        });
    }
    Projection::from_weights(proj.weights() + &(&grad.delta * lr))
}

/// Per-timestep fine-tuning under teacher forcing: at each step the k
/// nearest neighbors are retrieved, a fresh copy of the weights takes
/// `ft.steps` ascent steps on them, and the gold probability under the
/// tuned copy is recorded. Weights are reset between timesteps so the
/// records stay comparable across positions.
pub fn finetune_per_step(
    proj: &Projection,
    ds: &Datastore,
    hyper: &Hyper,
    ft: &FtHyper,
    steps: &[(Vec<f32>, u32)],
    retain_neighbors: bool,
) -> Result<Vec<ScoredToken>> {
    hyper.validate()?;
    ft.validate()?;
    let mut out = Vec::with_capacity(steps.len());
    for (position, (h, gold)) in steps.iter().enumerate() {
        let nbrs = ds.search(h, hyper.k, hyper.metric)?;
        let mut tuned = proj.clone();
        for _ in 0..ft.steps {
            let grad = opl_gradient(&tuned, &nbrs, ft.alpha)?;
            tuned = sgd_step(&tuned, &grad, ft.lr)?;
        }
        let logits = tuned.logits(h)?;
        let logp = log_softmax(logits.as_slice().unwrap());
        let lp = logp[*gold as usize];
        out.push(ScoredToken {
            position,
            gold_token: *gold,
            p_gold: lp.exp(),
            log_p_gold: lp,
            neighbor_set: if retain_neighbors { Some(nbrs) } else { None },
        });
    }
    Ok(out)
}

/// Teacher-forced validation perplexity of the bare projection.
pub fn validation_ppl(proj: &Projection, pairs: &[(Vec<f32>, u32)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    let mut nll = 0.0;
    for (h, gold) in pairs {
        let logits = proj.logits(h)?;
        let logp = log_softmax(logits.as_slice().unwrap());
        nll -= logp[*gold as usize];
    }
    Ok((nll / pairs.len() as f64).exp())
}

/// Mini-batch ascent over the full training set, returning the weights with
/// the best validation PPL seen (checked every `EVAL_INTERVAL` steps and at
/// the end). Shuffling is seeded, so runs are reproducible.
pub fn finetune_full(
    proj: &Projection,
    pairs: &[(Vec<f32>, u32)],
    ft: &FtHyper,
    val: &[(Vec<f32>, u32)],
    seed: u64,
) -> Result<(Projection, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    ft.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut current = proj.clone();
    let mut best = current.clone();
    let mut best_ppl = validation_ppl(&current, val)?;

    for step in 1..=ft.steps {
        let mut batch: Vec<(&[f32], u32)> = Vec::with_capacity(ft.batch);
        for _ in 0..ft.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (h, gold) = &pairs[order[cursor]];
            batch.push((h.as_slice(), *gold));
            cursor += 1;
        }
        // Average the batch gradient so lr is batch-size independent.
        let grad = gradient_over(&current, batch.iter().copied(), ft.alpha)
            / batch.len() as f64;
        let next = Projection::from_weights(current.weights() + &(&grad * ft.lr))?;
        current = next;
        if step % EVAL_INTERVAL == 0 || step == ft.steps {
            let ppl = validation_ppl(&current, val)?;
            if ppl < best_ppl {
                best_ppl = ppl;
                best = current.clone();
            }
        }
    }
    Ok((best, best_ppl))
}

/// Evaluates every (lr, alpha) cell via `finetune_full` and returns the
/// hyper-parameters with minimal validation PPL. Ties keep the earliest
/// cell in lr-major order.
pub fn grid_search(
    proj: &Projection,
    pairs: &[(Vec<f32>, u32)],
    val: &[(Vec<f32>, u32)],
    grid: &GridSpec,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<(FtHyper, f64)> {
    grid.validate()?;
    let mut best: Option<(FtHyper, f64)> = None;
    for &lr in &grid.lr_candidates {
        for &alpha in &grid.alpha_candidates {
            let ft = FtHyper {
                lr,
                alpha,
                steps,
                batch,
            };
            let (_, ppl) = finetune_full(proj, pairs, &ft, val, seed)?;
            match &best {
                Some((_, best_ppl)) if ppl >= *best_ppl => {}
                _ => best = Some((ft, ppl)),
            }
        }
    }
    Ok(best.expect("grid validated nonempty"))
}
