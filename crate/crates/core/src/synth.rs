//! Deterministic synthetic task generator: class-conditional Gaussian
//! context vectors over a skewed token-frequency law, with a general-domain
//! split, a shifted in-domain split, word/sub-token structure, and the
//! frequency tables the word-level analyses consume.
//!
//! All output is a pure function of the config; the generator is a seeded
//! ChaCha8 stream, so identical configs produce bit-identical bytes on any
//! platform.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::WordOccurrence;
use crate::error::{Error, Result};
use crate::finetune::{finetune_full, FtHyper};
use crate::io::ContextPairs;
use crate::prediction::Projection;

/// Words per generated sentence.
const SENTENCE_LEN: usize = 8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub vocab_size: u32,
    pub n_general: usize,
    pub n_indomain: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Scale of the class-mean directions; smaller values mean more
    /// cluster overlap.
    pub class_sep: f64,
    /// In-domain displacement of every class mean.
    pub shift: f64,
    /// Zipf exponent of the word-frequency law (>= 1).
    pub low_freq_skew: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 32,
            vocab_size: 128,
            n_general: 50_000,
            n_indomain: 20_000,
            n_val: 2_000,
            n_test: 2_000,
            class_sep: 4.0,
            shift: 2.0,
            low_freq_skew: 1.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be positive".into()));
        }
        if [self.n_general, self.n_indomain, self.n_val, self.n_test]
            .iter()
            .any(|&n| n == 0)
        {
            return Err(Error::InvalidConfig("split sizes must be >= 1".into()));
        }
        if self.class_sep <= 0.0 {
            return Err(Error::InvalidConfig("class_sep must be > 0".into()));
        }
        if self.shift < 0.0 {
            return Err(Error::InvalidConfig("shift must be >= 0".into()));
        }
        if self.low_freq_skew < 1.0 {
            return Err(Error::InvalidConfig("low_freq_skew must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything the downstream protocols need from one generated task.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub general: ContextPairs,
    pub train: ContextPairs,
    pub val: ContextPairs,
    pub test: ContextPairs,
    /// Word frequencies in general-domain data.
    pub f_gd: BTreeMap<String, u64>,
    /// Word frequencies in in-domain training data.
    pub f_id: BTreeMap<String, u64>,
    /// Word -> its sub-token ids.
    pub word_map: BTreeMap<String, Vec<u32>>,
    /// Word instances in the test split; positions index the flattened
    /// non-sentinel records of `test`.
    pub test_occurrences: Vec<WordOccurrence>,
    /// Test sentences as whitespace-joined words, for text-level analyses.
    pub test_sentences: Vec<String>,
}

fn word_name(i: usize) -> String {
    format!("w{i:04}")
}

/// Fixed word inventory over the vocabulary: every token appears as the
/// first sub-token of exactly one word; every third word carries a second
/// sub-token so the sub-word mapping is exercised.
fn build_word_map(vocab_size: u32) -> BTreeMap<String, Vec<u32>> {
    let mut map = BTreeMap::new();
    for i in 0..vocab_size {
        let subs = if i % 3 == 0 {
            vec![i, (i + 1) % vocab_size]
        } else {
            vec![i]
        };
        map.insert(word_name(i as usize), subs);
    }
    map
}

struct ZipfTable {
    cumulative: Vec<f64>,
}

impl ZipfTable {
    /// Weight of the item ranked r (0-based) is 1/(r+1)^skew.
    fn new(n: usize, skew: f64) -> Self {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for r in 0..n {
            acc += 1.0 / ((r + 1) as f64).powf(skew);
            cumulative.push(acc);
        }
        let total = acc;
        for c in &mut cumulative {
            *c /= total;
        }
        ZipfTable { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        self.cumulative.partition_point(|&c| c < u)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    words: Vec<(String, Vec<u32>)>,
    general_means: Vec<Vec<f64>>,
    indomain_means: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn emit_split(
        &self,
        rng: &mut ChaCha8Rng,
        zipf: &ZipfTable,
        word_order: &[usize],
        min_tokens: usize,
        in_domain: bool,
        freq: Option<&mut BTreeMap<String, u64>>,
        mut occurrences: Option<&mut Vec<WordOccurrence>>,
        mut sentences: Option<&mut Vec<String>>,
    ) -> ContextPairs {
        let mut pairs = ContextPairs::new(self.cfg.dim, self.cfg.vocab_size);
        let mut freq_local: BTreeMap<String, u64> = BTreeMap::new();
        let mut tokens = 0usize;
        let mut position = 0usize;
        let mut sentence_words: Vec<String> = Vec::new();
        while tokens < min_tokens {
            let rank = zipf.sample(rng);
            let word_idx = word_order[rank];
            let (name, subs) = &self.words[word_idx];
            *freq_local.entry(name.clone()).or_default() += 1;
            let mut positions = Vec::with_capacity(subs.len());
            for &token in subs {
                let means = if in_domain {
                    &self.indomain_means[token as usize]
                } else {
                    &self.general_means[token as usize]
                };
                let vector: Vec<f32> = means
                    .iter()
                    .map(|&m| {
                        let noise: f64 = StandardNormal.sample(rng);
                        (m + noise) as f32
                    })
                    .collect();
                pairs.push(vector, token);
                positions.push(position);
                position += 1;
                tokens += 1;
            }
            if let Some(occ) = occurrences.as_deref_mut() {
                occ.push(WordOccurrence {
                    word: name.clone(),
                    positions,
                });
            }
            sentence_words.push(name.clone());
            if sentence_words.len() == SENTENCE_LEN {
                pairs.push_boundary();
                if let Some(s) = sentences.as_deref_mut() {
                    s.push(sentence_words.join(" "));
                }
                sentence_words.clear();
            }
        }
        if !sentence_words.is_empty() {
            pairs.push_boundary();
            if let Some(s) = sentences.as_deref_mut() {
                s.push(sentence_words.join(" "));
            }
        }
        if let Some(f) = freq {
            *f = freq_local;
        }
        pairs
    }
}

/// Generate a complete task from the config. Identical configs (including
/// seed) produce identical output.
pub fn gen_task(cfg: &SynthConfig) -> Result<SynthTask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = cfg.vocab_size as usize;

    let general_means: Vec<Vec<f64>> = (0..vocab)
        .map(|_| {
            unit_vector(&mut rng, cfg.dim)
                .into_iter()
                .map(|x| x * cfg.class_sep)
                .collect()
        })
        .collect();
    let indomain_means: Vec<Vec<f64>> = general_means
        .iter()
        .map(|mu| {
            let delta = unit_vector(&mut rng, cfg.dim);
            mu.iter()
                .zip(&delta)
                .map(|(&m, &d)| m + cfg.shift * d)
                .collect()
        })
        .collect();

    let word_map = build_word_map(cfg.vocab_size);
    let words: Vec<(String, Vec<u32>)> =
        word_map.iter().map(|(w, s)| (w.clone(), s.clone())).collect();

    // General and in-domain splits draw from the same Zipf law over
    // different word orderings, so domain-specificity (the frequency
    // ratio) spans all buckets.
    let zipf = ZipfTable::new(words.len(), cfg.low_freq_skew);
    let general_order: Vec<usize> = (0..words.len()).collect();
    let mut indomain_order = general_order.clone();
    // Deterministic rotation rather than a sampled permutation: rank
    // distance to the general ordering controls gamma.
    indomain_order.rotate_left(words.len() / 3);

    let gen = Generator {
        cfg,
        words,
        general_means,
        indomain_means,
    };

    let mut f_gd = BTreeMap::new();
    let general = gen.emit_split(
        &mut rng,
        &zipf,
        &general_order,
        cfg.n_general,
        false,
        Some(&mut f_gd),
        None,
        None,
    );
    let mut f_id = BTreeMap::new();
    let train = gen.emit_split(
        &mut rng,
        &zipf,
        &indomain_order,
        cfg.n_indomain,
        true,
        Some(&mut f_id),
        None,
        None,
    );
    let val = gen.emit_split(
        &mut rng,
        &zipf,
        &indomain_order,
        cfg.n_val,
        true,
        None,
        None,
        None,
    );
    let mut test_occurrences = Vec::new();
    let mut test_sentences = Vec::new();
    let test = gen.emit_split(
        &mut rng,
        &zipf,
        &indomain_order,
        cfg.n_test,
        true,
        None,
        Some(&mut test_occurrences),
        Some(&mut test_sentences),
    );

    Ok(SynthTask {
        general,
        train,
        val,
        test,
        f_gd,
        f_id,
        word_map,
        test_occurrences,
        test_sentences,
    })
}

/// Train a projection from zero on general-domain pairs; this plays the
/// role of the pre-trained model's output layer for every downstream
/// protocol. The last tenth of the pairs serves as the validation split.
pub fn base_projection(cfg: &SynthConfig, general: &ContextPairs) -> Result<Projection> {
    let pairs = general.pairs();
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    let split = (pairs.len() * 9) / 10;
    let (train, val) = if split == 0 || split == pairs.len() {
        (&pairs[..], &pairs[..])
    } else {
        (&pairs[..split], &pairs[split..])
    };
    let proj = Projection::zeros(cfg.vocab_size as usize, cfg.dim);
    let ft = FtHyper {
        lr: 0.5,
        alpha: 0.0,
        steps: 600,
        batch: 64,
    };
    let (tuned, _) = finetune_full(&proj, train, &ft, val, cfg.seed ^ 0x9e3779b97f4a7c15)?;
    Ok(tuned)
}
