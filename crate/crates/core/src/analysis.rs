//! Comparison statistics over teacher-forced gold probabilities (mean and
//! variance of per-token differences, perplexity) and word-level analyses:
//! clipped precision/recall/F1, domain-specificity buckets, incremental
//! recall against a fine-tuning baseline, and neighbor-quality metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datastore::Metric;
use crate::error::{Error, Result};
use crate::prediction::ScoredToken;

/// Gold-label probabilities of one system over a shared test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldProbSeries {
    pub variant: String,
    pub probs: Vec<f64>,
}

impl GoldProbSeries {
    pub fn from_scored(variant: &str, steps: &[ScoredToken]) -> Self {
        GoldProbSeries {
            variant: variant.to_string(),
            probs: steps.iter().map(|s| s.p_gold).collect(),
        }
    }
}

fn diffs(a: &GoldProbSeries, b: &GoldProbSeries) -> Result<Vec<f64>> {
    if a.probs.len() != b.probs.len() {
        return Err(Error::SeriesLengthMismatch {
            a: a.probs.len(),
            b: b.probs.len(),
        });
    }
    Ok(a.probs
        .iter()
        .zip(&b.probs)
        .map(|(&x, &y)| x - y)
        .collect())
}

/// M(A-B) = mean of per-token gold probability differences.
pub fn mean_diff(a: &GoldProbSeries, b: &GoldProbSeries) -> Result<f64> {
    let d = diffs(a, b)?;
    if d.is_empty() {
        return Err(Error::TooFewObservations { need: 1, got: 0 });
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// V(A-B) = sample variance (n-1 denominator) of the differences.
pub fn var_diff(a: &GoldProbSeries, b: &GoldProbSeries) -> Result<f64> {
    let d = diffs(a, b)?;
    if d.len() < 2 {
        return Err(Error::TooFewObservations {
            need: 2,
            got: d.len(),
        });
    }
    let m = d.iter().sum::<f64>() / d.len() as f64;
    Ok(d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64)
}

/// exp of mean negative log probability. Zero probabilities are an error;
/// callers wanting a floor must apply it in the log domain first.
pub fn perplexity(series: &GoldProbSeries) -> Result<f64> {
    if series.probs.is_empty() {
        return Err(Error::TooFewObservations { need: 1, got: 0 });
    }
    let mut nll = 0.0;
    for (i, &p) in series.probs.iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::ZeroProbability(i));
        }
        nll -= p.ln();
    }
    Ok((nll / series.probs.len() as f64).exp())
}

/// Domain-specificity ratio of a word: in-domain over general-domain
/// training frequency. A word unseen in general data maps to +inf.
pub fn gamma(f_id: u64, f_gd: u64) -> Result<f64> {
    if f_id == 0 {
        return Err(Error::ZeroInDomainFrequency);
    }
    if f_gd == 0 {
        Ok(f64::INFINITY)
    } else {
        Ok(f_id as f64 / f_gd as f64)
    }
}

pub const GAMMA_BUCKET_LABELS: [&str; 4] = ["0<=g<1", "1<=g<2", "2<=g<5", "g>=5"];

/// Bucket index for a gamma value; edges [0,1), [1,2), [2,5), [5,inf].
pub fn gamma_bucket(g: f64) -> usize {
    if g < 1.0 {
        0
    } else if g < 2.0 {
        1
    } else if g < 5.0 {
        2
    } else {
        3
    }
}

pub const FREQ_BUCKET_LABELS: [&str; 4] = ["top1%", "top1-5%", "top5-20%", "top20-100%"];

/// Assign words to frequency-rank buckets (top 1%, 1-5%, 5-20%, 20-100%)
/// by in-domain frequency, highest first. Ties rank lexicographically so
/// the assignment is deterministic.
pub fn frequency_buckets(f_id: &BTreeMap<String, u64>) -> BTreeMap<String, usize> {
    let mut ranked: Vec<(&String, u64)> = f_id.iter().map(|(w, &f)| (w, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let n = ranked.len() as f64;
    let mut out = BTreeMap::new();
    for (i, (word, _)) in ranked.into_iter().enumerate() {
        let pct = (i + 1) as f64 / n * 100.0;
        let bucket = if pct <= 1.0 {
            0
        } else if pct <= 5.0 {
            1
        } else if pct <= 20.0 {
            2
        } else {
            3
        };
        out.insert(word.clone(), bucket);
    }
    out
}

/// Corpus-level counts for one word, accumulated with per-sentence clipping.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WordStats {
    pub hyp_count: u64,
    pub ref_count: u64,
    pub match_count: u64,
}

impl WordStats {
    pub fn precision(&self) -> f64 {
        if self.hyp_count == 0 {
            0.0
        } else {
            self.match_count as f64 / self.hyp_count as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.ref_count == 0 {
            0.0
        } else {
            self.match_count as f64 / self.ref_count as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Per-word precision/recall statistics over parallel sentence lists.
/// Matches are clipped per sentence: match = min(hyp count, ref count)
/// within each sentence, summed corpus-wide.
pub fn word_prf(hyp_sentences: &[&str], ref_sentences: &[&str]) -> BTreeMap<String, WordStats> {
    let mut stats: BTreeMap<String, WordStats> = BTreeMap::new();
    for (hyp, reference) in hyp_sentences.iter().zip(ref_sentences) {
        let mut hyp_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for w in hyp.split_whitespace() {
            *hyp_counts.entry(w).or_default() += 1;
        }
        let mut ref_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for w in reference.split_whitespace() {
            *ref_counts.entry(w).or_default() += 1;
        }
        for (&w, &h) in &hyp_counts {
            let entry = stats.entry(w.to_string()).or_default();
            entry.hyp_count += h;
            let r = ref_counts.get(w).copied().unwrap_or(0);
            entry.match_count += h.min(r);
        }
        for (&w, &r) in &ref_counts {
            stats.entry(w.to_string()).or_default().ref_count += r;
        }
    }
    stats
}

/// Recall difference against a fine-tuning baseline per word. Words absent
/// from the shared reference (ref_count = 0) are excluded.
pub fn incremental_recall(
    stats: &BTreeMap<String, WordStats>,
    stats_ft: &BTreeMap<String, WordStats>,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (word, s) in stats {
        if s.ref_count == 0 {
            continue;
        }
        let r_ft = stats_ft.get(word).map(|t| t.recall()).unwrap_or(0.0);
        out.insert(word.clone(), s.recall() - r_ft);
    }
    out
}

/// Mean and sample standard deviation (n-1; zero for n < 2) of a bucket.
pub fn bucket_mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Retrieval-quality metrics at a single timestep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepQuality {
    pub retrieved: bool,
    /// Rank (1-based) of the first gold-valued neighbor; rank of the last
    /// neighbor when absent.
    pub gold_rank: usize,
    /// Distance of that neighbor: negated score under negative-L2, raw
    /// score under inner product.
    pub gold_dist: f64,
    pub gold_count: usize,
    pub distinct_labels: usize,
}

/// Word-level retrieval quality, averaged over the word's sub-tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborQuality {
    pub unretrieved: bool,
    pub gold_rank: f64,
    pub gold_dist: f64,
    pub gold_count: f64,
    pub distinct_labels: f64,
}

/// One occurrence of a word in a teacher-forced sequence: the timesteps of
/// its sub-tokens, in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordOccurrence {
    pub word: String,
    pub positions: Vec<usize>,
}

/// Metrics for a single scored timestep; errors if the neighbor set was
/// not retained during scoring.
pub fn step_quality(step: &ScoredToken) -> Result<StepQuality> {
    let nbrs = step
        .neighbor_set
        .as_ref()
        .ok_or(Error::MissingNeighborRetention)?;
    let dist = |score: f64| match nbrs.metric {
        Metric::NegativeL2 => -score,
        Metric::InnerProduct => score,
    };
    let mut gold_rank = None;
    let mut gold_count = 0usize;
    let mut labels: Vec<u32> = Vec::new();
    for (i, n) in nbrs.entries.iter().enumerate() {
        if n.value == step.gold_token {
            gold_count += 1;
            if gold_rank.is_none() {
                gold_rank = Some(i + 1);
            }
        }
        if !labels.contains(&n.value) {
            labels.push(n.value);
        }
    }
    let last = nbrs.entries.len();
    let (rank, score) = match gold_rank {
        Some(r) => (r, nbrs.entries[r - 1].score),
        None => (last, nbrs.entries[last - 1].score),
    };
    Ok(StepQuality {
        retrieved: gold_count > 0,
        gold_rank: rank,
        gold_dist: dist(score),
        gold_count,
        distinct_labels: labels.len(),
    })
}

/// Word-level neighbor quality: a word is unretrieved iff any of its
/// sub-tokens is absent from the retrieved values at its timestep; the
/// remaining metrics are means over the word's sub-token timesteps.
pub fn neighbor_quality(
    steps: &[ScoredToken],
    occurrences: &[WordOccurrence],
) -> Result<Vec<(String, NeighborQuality)>> {
    let mut out = Vec::with_capacity(occurrences.len());
    for occ in occurrences {
        let mut unretrieved = false;
        let mut rank_sum = 0.0;
        let mut dist_sum = 0.0;
        let mut count_sum = 0.0;
        let mut label_sum = 0.0;
        for &pos in &occ.positions {
            let q = step_quality(&steps[pos])?;
            if !q.retrieved {
                unretrieved = true;
            }
            rank_sum += q.gold_rank as f64;
            dist_sum += q.gold_dist;
            count_sum += q.gold_count as f64;
            label_sum += q.distinct_labels as f64;
        }
        let n = occ.positions.len() as f64;
        out.push((
            occ.word.clone(),
            NeighborQuality {
                unretrieved,
                gold_rank: rank_sum / n,
                gold_dist: dist_sum / n,
                gold_count: count_sum / n,
                distinct_labels: label_sum / n,
            },
        ));
    }
    Ok(out)
}
