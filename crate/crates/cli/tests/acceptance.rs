//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line. Randomized criteria use pinned seeds; the synthetic
//! protocols run at desk scale with reduced but real grids.

use std::collections::BTreeMap;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use knnmt_core::analysis::{
    frequency_buckets, gamma, gamma_bucket, incremental_recall, mean_diff, neighbor_quality,
    perplexity, var_diff, word_prf, GoldProbSeries, WordOccurrence,
};
use knnmt_core::datastore::{Datastore, Metric};
use knnmt_core::finetune::{
    fd_gradient, finetune_full, finetune_per_step, grid_search, label_only_gradient, opl_gradient,
    validation_ppl, FtHyper, GridSpec,
};
use knnmt_core::meta::{dual_residual, meta_gradient};
use knnmt_core::prediction::{
    interpolate, knn_distribution, nmt_distribution, score_sequence, Hyper, Projection,
    ScoreVariant,
};
use knnmt_core::synth::{base_projection, gen_task, SynthConfig};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "[criterion {n:02}] {name}: {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn random_store(
    rng: &mut ChaCha8Rng,
    dim: usize,
    vocab: usize,
    count: usize,
) -> (Datastore, Vec<Vec<f32>>) {
    let keys: Vec<Vec<f32>> = (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect())
        .collect();
    let values: Vec<u32> = (0..count).map(|_| rng.random_range(0..vocab as u32)).collect();
    let ds = Datastore::build(
        keys.iter().map(|v| v.as_slice()).zip(values.iter().copied()),
        dim,
        vocab as u32,
    )
    .unwrap();
    (ds, keys)
}

fn random_projection(rng: &mut ChaCha8Rng, vocab: usize, dim: usize) -> Projection {
    let w: Vec<f64> = (0..vocab * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Projection::from_weights(Array2::from_shape_vec((vocab, dim), w).unwrap()).unwrap()
}

#[test]
fn criterion_01_dual_form_identity() {
    let temperatures = [5.0, 10.0, 20.0, 50.0, 100.0, 150.0, 200.0];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut max_residual = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(2..=64usize);
        let vocab = rng.random_range(2..=256usize);
        let k = rng.random_range(1..=32usize);
        let lambda: f64 = rng.random();
        let temperature = temperatures[rng.random_range(0..temperatures.len())];
        let count = rng.random_range(k..=k + 16);
        let (ds, _) = random_store(&mut rng, dim, vocab, count);
        let proj = random_projection(&mut rng, vocab, dim);
        let h: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let nbrs = ds.search(&h, k, Metric::InnerProduct).unwrap();
        let r = dual_residual(&proj, &nbrs, &h, lambda, temperature).unwrap();
        max_residual = max_residual.max(r);
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        1,
        "dual-form identity",
        max_residual <= 1e-6 && elapsed < 30.0,
        &format!("max residual {max_residual:e}, elapsed {elapsed:.1}s"),
    );
}

#[test]
fn criterion_02_gradient_oracle() {
    let alphas = [0.0, 0.1, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let start = Instant::now();
    let mut worst_rel = 0.0f64;
    let mut ratios = Vec::new();
    for trial in 0..100 {
        let dim = rng.random_range(2..=16usize);
        let vocab = rng.random_range(2..=32usize);
        let k = rng.random_range(1..=8usize);
        let alpha = alphas[trial % alphas.len()];
        let (ds, _) = random_store(&mut rng, dim, vocab, k);
        let proj = random_projection(&mut rng, vocab, dim);
        let h: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let nbrs = ds.search(&h, k, Metric::NegativeL2).unwrap();
        let analytic = opl_gradient(&proj, &nbrs, alpha).unwrap();
        let fd = fd_gradient(&proj, &nbrs, alpha, 1e-5).unwrap();
        let rel = analytic
            .delta
            .iter()
            .zip(fd.delta.iter())
            .map(|(a, f)| (a - f).abs() / a.abs().max(1.0))
            .fold(0.0f64, f64::max);
        worst_rel = worst_rel.max(rel);
        // Truncation-error convergence: halving epsilon shrinks the FD
        // error by about 4 (central differences are O(eps^2)). Measured
        // at a larger epsilon so rounding noise stays negligible.
        if trial < 10 {
            let err_at = |eps: f64| {
                let fd = fd_gradient(&proj, &nbrs, alpha, eps).unwrap();
                analytic
                    .delta
                    .iter()
                    .zip(fd.delta.iter())
                    .map(|(a, f)| (a - f).abs())
                    .fold(0.0f64, f64::max)
            };
            let coarse = err_at(1e-3);
            let fine = err_at(5e-4);
            if fine > 1e-12 {
                ratios.push(coarse / fine);
            }
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median_ratio = ratios[ratios.len() / 2];
    let elapsed = start.elapsed().as_secs_f64();
    report(
        2,
        "analytic gradient vs finite differences",
        worst_rel <= 1e-5 && (3.0..=5.0).contains(&median_ratio) && elapsed < 60.0,
        &format!(
            "max relative error {worst_rel:e}, median halving ratio {median_ratio:.2}, elapsed {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_03_error_signal_correspondence() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dim = rng.random_range(2..=16usize);
        let vocab = rng.random_range(2..=32usize);
        let k = rng.random_range(1..=8usize);
        let temperature = rng.random_range(1.0..200.0);
        let (ds, _) = random_store(&mut rng, dim, vocab, k);
        let proj = random_projection(&mut rng, vocab, dim);
        let h: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let nbrs = ds.search(&h, k, Metric::InnerProduct).unwrap();
        let ablated = label_only_gradient(&proj, &nbrs, temperature).unwrap();
        let meta = meta_gradient(&nbrs, &proj, temperature).unwrap();
        let rel = ablated
            .delta
            .iter()
            .zip(meta.delta.iter())
            .map(|(a, m)| (a - m).abs() / m.abs().max(1.0))
            .fold(0.0f64, f64::max);
        worst = worst.max(rel);
    }
    report(
        3,
        "model-signal-ablated gradient equals retrieval meta-gradient",
        worst <= 1e-12,
        &format!("max relative deviation {worst:e}"),
    );
}

#[test]
fn criterion_04_retrieval_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut exact = true;
    for trial in 0..1000 {
        let dim = rng.random_range(1..=16usize);
        let count = rng.random_range(1..=64usize);
        let k = rng.random_range(1..=12usize);
        let metric = if trial % 2 == 0 {
            Metric::InnerProduct
        } else {
            Metric::NegativeL2
        };
        let (ds, keys) = random_store(&mut rng, dim, 32, count);
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let ns = ds.search(&q, k, metric).unwrap();
        let mut oracle: Vec<(usize, f64)> = keys
            .iter()
            .enumerate()
            .map(|(i, key)| (i, metric.score(key, &q)))
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        oracle.truncate(k);
        if ns.entries.len() != oracle.len()
            || ns
                .entries
                .iter()
                .zip(&oracle)
                .any(|(n, &(i, s))| n.index != i || n.score != s)
        {
            exact = false;
        }
    }
    // Equal-norm agreement between metrics.
    let mut agree = true;
    for _ in 0..200 {
        let dim = rng.random_range(2..=8usize);
        let count = rng.random_range(2..=32usize);
        let k = rng.random_range(1..=6usize);
        let unit = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            loop {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let n = v.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
                if n > 1e-3 {
                    return v.iter().map(|x| (*x as f64 / n) as f32).collect();
                }
            }
        };
        let keys: Vec<Vec<f32>> = (0..count).map(|_| unit(&mut rng)).collect();
        let ds = Datastore::build(keys.iter().map(|v| (v.as_slice(), 0u32)), dim, 4).unwrap();
        let q = unit(&mut rng);
        let ip: Vec<usize> = ds
            .search(&q, k, Metric::InnerProduct)
            .unwrap()
            .entries
            .iter()
            .map(|n| n.index)
            .collect();
        let mut l2: Vec<usize> = ds
            .search(&q, k, Metric::NegativeL2)
            .unwrap()
            .entries
            .iter()
            .map(|n| n.index)
            .collect();
        // The top-k sets must coincide; internal order may differ when
        // rounding perturbs near-ties, so compare as sets.
        let mut ip_sorted = ip.clone();
        ip_sorted.sort_unstable();
        l2.sort_unstable();
        if ip_sorted != l2 {
            agree = false;
        }
    }
    report(
        4,
        "search equals full scan; metrics agree at equal norm",
        exact && agree,
        &format!("full-scan exact: {exact}, equal-norm agreement: {agree}"),
    );
}

#[test]
fn criterion_05_distribution_axioms() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut ok = true;
    for _ in 0..200 {
        let dim = rng.random_range(2..=8usize);
        let vocab = rng.random_range(2..=32usize);
        let k = rng.random_range(1..=8usize);
        let temperature = rng.random_range(1.0..100.0);
        let count = rng.random_range(k..=k + 8);
        let (ds, _) = random_store(&mut rng, dim, vocab, count);
        let proj = random_projection(&mut rng, vocab, dim);
        let h: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let p_nmt = nmt_distribution(&proj, &h).unwrap();
        let nbrs = ds.search(&h, k, Metric::NegativeL2).unwrap();
        let p_knn = knn_distribution(&nbrs, temperature, vocab).unwrap();
        let lambda: f64 = rng.random();
        let p = interpolate(&p_knn, &p_nmt, lambda).unwrap();
        for dist in [&p_nmt, &p_knn, &p] {
            let sum: f64 = dist.probs().iter().sum();
            if (sum - 1.0).abs() > 1e-9 || dist.probs().iter().any(|&x| x < 0.0) {
                ok = false;
            }
        }
        // Boundary cases are exact copies, not approximations.
        if interpolate(&p_knn, &p_nmt, 0.0).unwrap().probs() != p_nmt.probs() {
            ok = false;
        }
        if interpolate(&p_knn, &p_nmt, 1.0).unwrap().probs() != p_knn.probs() {
            ok = false;
        }
    }
    report(
        5,
        "distribution axioms and interpolation boundaries",
        ok,
        "a distribution violated normalization, positivity, or a boundary case",
    );
}

fn similarity_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        dim: 16,
        vocab_size: 64,
        n_general: 2400,
        n_indomain: 1600,
        n_val: 400,
        n_test: 400,
        class_sep: 4.0,
        shift: 2.0,
        low_freq_skew: 1.2,
        seed,
    }
}

fn series_of(steps: &[knnmt_core::prediction::ScoredToken], tag: &str) -> GoldProbSeries {
    GoldProbSeries::from_scored(tag, steps)
}

/// Validation-tuned retrieval hyper-parameters for one metric.
fn tune_retrieval(
    proj: &Projection,
    ds: &Datastore,
    val: &[(Vec<f32>, u32)],
    metric: Metric,
) -> Hyper {
    let mut best: Option<(Hyper, f64)> = None;
    for &lambda in &[0.3, 0.5, 0.7] {
        for &temperature in &[5.0, 10.0, 20.0] {
            let hyper = Hyper {
                k: 8,
                lambda,
                temperature,
                metric,
            };
            let scored =
                score_sequence(proj, ds, &hyper, val, ScoreVariant::Interpolated, false).unwrap();
            let ppl = perplexity(&series_of(&scored, "val")).unwrap();
            match &best {
                Some((_, b)) if ppl >= *b => {}
                _ => best = Some((hyper, ppl)),
            }
        }
    }
    best.unwrap().0
}

/// Validation-tuned per-step ascent rate.
fn tune_per_step(
    proj: &Projection,
    ds: &Datastore,
    hyper: &Hyper,
    val: &[(Vec<f32>, u32)],
) -> FtHyper {
    let mut best: Option<(FtHyper, f64)> = None;
    for &lr in &[0.2, 0.5, 1.0] {
        let ft = FtHyper {
            lr,
            alpha: 0.0,
            steps: 8,
            batch: 1,
        };
        let scored = finetune_per_step(proj, ds, hyper, &ft, val, false).unwrap();
        let ppl = perplexity(&series_of(&scored, "val")).unwrap();
        match &best {
            Some((_, b)) if ppl >= *b => {}
            _ => best = Some((ft, ppl)),
        }
    }
    best.unwrap().0
}

#[test]
fn criterion_06_similarity_direction() {
    let start = Instant::now();
    let mut ok = true;
    let mut detail = String::new();
    for seed in [0u64, 1, 2] {
        let cfg = similarity_cfg(seed);
        let task = gen_task(&cfg).unwrap();
        let base = base_projection(&cfg, &task.general).unwrap();
        let train = task.train.pairs();
        let val = task.val.pairs();
        let test = task.test.pairs();
        let ds = Datastore::build(
            train.iter().map(|(v, t)| (v.as_slice(), *t)),
            cfg.dim,
            cfg.vocab_size,
        )
        .unwrap();
        for metric in [Metric::InnerProduct, Metric::NegativeL2] {
            let hyper = tune_retrieval(&base, &ds, &val, metric);
            let knn = series_of(
                &score_sequence(&base, &ds, &hyper, &test, ScoreVariant::Interpolated, false)
                    .unwrap(),
                "kNN-MT",
            );
            let nmt = series_of(
                &score_sequence(&base, &ds, &hyper, &test, ScoreVariant::Nmt, false).unwrap(),
                "NMT",
            );
            let ft_hyper = tune_per_step(&base, &ds, &hyper, &val);
            let ft = series_of(
                &finetune_per_step(&base, &ds, &hyper, &ft_hyper, &test, false).unwrap(),
                "OPL-FT",
            );
            let m_ft = mean_diff(&knn, &ft).unwrap().abs();
            let m_nmt = mean_diff(&knn, &nmt).unwrap().abs();
            let v_ft = var_diff(&knn, &ft).unwrap();
            let v_nmt = var_diff(&knn, &nmt).unwrap();
            if !(m_ft < m_nmt && v_ft < v_nmt) {
                ok = false;
            }
            detail.push_str(&format!(
                "seed {seed} {metric:?}: |M| {m_ft:.4} vs {m_nmt:.4}, V {v_ft:.4} vs {v_nmt:.4}; "
            ));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        6,
        "retrieval interpolation is closer to per-step tuning than to the base model",
        ok && elapsed < 300.0,
        &format!("{detail}elapsed {elapsed:.1}s"),
    );
}

#[test]
fn criterion_07_domain_adaptation_gain() {
    let mut ok = true;
    let mut detail = String::new();
    for seed in [0u64, 1] {
        let cfg = similarity_cfg(seed);
        let task = gen_task(&cfg).unwrap();
        let base = base_projection(&cfg, &task.general).unwrap();
        let train = task.train.pairs();
        let val = task.val.pairs();
        let test = task.test.pairs();
        let base_ppl = validation_ppl(&base, &test).unwrap();

        let ds = Datastore::build(
            train.iter().map(|(v, t)| (v.as_slice(), *t)),
            cfg.dim,
            cfg.vocab_size,
        )
        .unwrap();
        let hyper = tune_retrieval(&base, &ds, &val, Metric::InnerProduct);
        let knn_scored =
            score_sequence(&base, &ds, &hyper, &test, ScoreVariant::Interpolated, false).unwrap();
        let knn_ppl = perplexity(&series_of(&knn_scored, "kNN-MT")).unwrap();

        let grid = GridSpec {
            lr_candidates: vec![0.05, 0.2, 0.5],
            alpha_candidates: vec![0.0, 0.1],
        };
        let (ft, _) = grid_search(&base, &train, &val, &grid, 200, 32, seed).unwrap();
        let (tuned, _) = finetune_full(&base, &train, &ft, &val, seed).unwrap();
        let ft_ppl = validation_ppl(&tuned, &test).unwrap();

        // Gain thresholds are fixed at 5% relative, calibrated on the
        // synthetic shifted task rather than taken from any reference.
        if knn_ppl > 0.95 * base_ppl || ft_ppl > 0.95 * base_ppl {
            ok = false;
        }
        detail.push_str(&format!(
            "seed {seed}: base {base_ppl:.3}, retrieval {knn_ppl:.3}, tuned {ft_ppl:.3}; "
        ));
    }
    report(7, "domain-adaptation gain of at least 5%", ok, &detail);
}

#[test]
fn criterion_08_word_level_micro_corpus() {
    let reference = [
        "the drug dose is high",
        "the dose dose limit",
        "trial results are good",
    ];
    let hyp = [
        "the drug dose is low",
        "the dose limit limit",
        "trial results good good",
    ];
    let hyp_ft = [
        "the drug dose is high",
        "the dose dose limit",
        "good results are trial",
    ];
    let stats = word_prf(&hyp, &reference);
    let mut ok = true;
    let mut check = |cond: bool| {
        if !cond {
            ok = false;
        }
    };
    let s = |w: &str| stats.get(w).unwrap();
    // Hand-tallied counts with per-sentence clipping.
    check(s("the").precision() == 1.0 && s("the").recall() == 1.0 && s("the").f1() == 1.0);
    check(s("dose").precision() == 1.0);
    check(s("dose").recall() == 2.0 / 3.0);
    check(s("dose").f1() == 2.0 * (2.0 / 3.0) / (1.0 + 2.0 / 3.0));
    check(s("limit").precision() == 0.5 && s("limit").recall() == 1.0);
    check(s("limit").f1() == 2.0 * 0.5 / 1.5);
    check(s("good").precision() == 0.5 && s("good").recall() == 1.0);
    check(s("high").precision() == 0.0 && s("high").recall() == 0.0 && s("high").f1() == 0.0);
    check(s("low").ref_count == 0 && s("low").recall() == 0.0);

    // Domain-specificity buckets from hand-chosen frequency tables.
    check(gamma_bucket(gamma(4, 8).unwrap()) == 0);
    check(gamma_bucket(gamma(3, 2).unwrap()) == 1);
    check(gamma_bucket(gamma(6, 2).unwrap()) == 2);
    check(gamma_bucket(gamma(2, 1).unwrap()) == 2);
    check(gamma_bucket(gamma(2, 0).unwrap()) == 3);
    check(gamma(2, 0).unwrap() == f64::INFINITY);

    // Incremental recall against a perfect-recall baseline.
    let stats_ft = word_prf(&hyp_ft, &reference);
    let dr = incremental_recall(&stats, &stats_ft);
    check(dr["the"] == 0.0);
    check(dr["dose"] == 2.0 / 3.0 - 1.0);
    check(dr["high"] == -1.0);
    check(dr["are"] == -1.0);
    check(!dr.contains_key("low"));

    // Neighbor quality on a hand-built store; every key coordinate is
    // exactly representable so the distances are exact.
    let keys: Vec<(Vec<f32>, u32)> = vec![
        (vec![1.0, 0.0], 3),
        (vec![0.875, 0.0], 5),
        (vec![0.75, 0.0], 3),
        (vec![0.0, 1.0], 2),
        (vec![0.0, 0.875], 6),
    ];
    let ds = Datastore::build(keys.iter().map(|(v, t)| (v.as_slice(), *t)), 2, 8).unwrap();
    let proj = Projection::zeros(8, 2);
    let hyper = Hyper {
        k: 3,
        lambda: 0.5,
        temperature: 10.0,
        metric: Metric::NegativeL2,
    };
    let steps = vec![(vec![1.0f32, 0.0], 3u32), (vec![0.0f32, 1.0], 7u32)];
    let scored =
        score_sequence(&proj, &ds, &hyper, &steps, ScoreVariant::Interpolated, true).unwrap();
    let occ = vec![WordOccurrence {
        word: "wx".into(),
        positions: vec![0, 1],
    }];
    let q = &neighbor_quality(&scored, &occ).unwrap()[0].1;
    // Step 0: gold among neighbors at rank 1, distance 0, twice, two
    // distinct labels. Step 1: gold absent, so the last neighbor (rank 3,
    // distance 1.5625) stands in; three distinct labels.
    check(q.unretrieved);
    check(q.gold_rank == 2.0);
    check(q.gold_dist == 0.78125);
    check(q.gold_count == 1.0);
    check(q.distinct_labels == 2.5);

    report(
        8,
        "micro-corpus word statistics match manual enumeration",
        ok,
        "a hand-computed value did not match",
    );
}

#[test]
fn criterion_09_nonretrieval_by_frequency() {
    let mut bucket_totals = [0usize; 4];
    let mut bucket_unretrieved = [0usize; 4];
    for seed in [0u64, 1, 2] {
        let cfg = SynthConfig {
            dim: 16,
            vocab_size: 1024,
            n_general: 12_000,
            n_indomain: 6_000,
            n_val: 200,
            n_test: 2_500,
            class_sep: 4.0,
            shift: 2.0,
            low_freq_skew: 1.2,
            seed,
        };
        let task = gen_task(&cfg).unwrap();
        let train = task.train.pairs();
        let ds = Datastore::build(
            train.iter().map(|(v, t)| (v.as_slice(), *t)),
            cfg.dim,
            cfg.vocab_size,
        )
        .unwrap();
        let proj = Projection::zeros(cfg.vocab_size as usize, cfg.dim);
        let hyper = Hyper {
            k: 8,
            lambda: 0.5,
            temperature: 10.0,
            metric: Metric::NegativeL2,
        };
        let scored = score_sequence(
            &proj,
            &ds,
            &hyper,
            &task.test.pairs(),
            ScoreVariant::Interpolated,
            true,
        )
        .unwrap();
        let quality = neighbor_quality(&scored, &task.test_occurrences).unwrap();

        // Frequency buckets over the domain-specific (gamma >= 5) words.
        let domain_specific: BTreeMap<String, u64> = task
            .f_id
            .iter()
            .filter(|(w, &fi)| {
                let fg = task.f_gd.get(*w).copied().unwrap_or(0);
                gamma(fi, fg).unwrap() >= 5.0
            })
            .map(|(w, &fi)| (w.clone(), fi))
            .collect();
        let assign = frequency_buckets(&domain_specific);
        for (word, q) in &quality {
            if let Some(&b) = assign.get(word) {
                bucket_totals[b] += 1;
                if q.unretrieved {
                    bucket_unretrieved[b] += 1;
                }
            }
        }
    }
    let rates: Vec<f64> = (0..4)
        .map(|b| bucket_unretrieved[b] as f64 / bucket_totals[b].max(1) as f64)
        .collect();
    let populated = bucket_totals.iter().all(|&n| n > 0);
    let monotone = rates.windows(2).all(|w| w[0] <= w[1]);
    report(
        9,
        "non-retrieval rate non-decreasing toward rarer words",
        populated && monotone,
        &format!("rates {rates:?}, populations {bucket_totals:?}"),
    );
}

#[test]
fn criterion_10_round_trip_and_cli() {
    let bin = env!("CARGO_BIN_EXE_knnmt");
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut ok = true;
    let mut detail = String::new();

    // Bit-identical datastore round trip.
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let (ds, _) = random_store(&mut rng, 8, 32, 50);
    let mut buf_a = Vec::new();
    ds.save(&mut buf_a).unwrap();
    let reloaded = Datastore::load(&buf_a[..]).unwrap();
    let mut buf_b = Vec::new();
    reloaded.save(&mut buf_b).unwrap();
    if buf_a != buf_b || reloaded != ds {
        ok = false;
        detail.push_str("round trip not bit-identical; ");
    }

    let run = |args: &[&str]| -> bool {
        Command::new(bin)
            .args(args)
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    };
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();

    // Determinism: the same seed must reproduce every output file.
    for round in ["a", "b"] {
        let task_dir = p(&format!("task_{round}"));
        ok &= run(&[
            "synth", "--out-dir", &task_dir, "--seed", "5", "--dim", "8", "--vocab-size", "32",
            "--n-general", "800", "--n-indomain", "400", "--n-val", "100", "--n-test", "100",
        ]);
        ok &= run(&[
            "build",
            "--pairs",
            &format!("{task_dir}/train.kncp"),
            "--out",
            &p(&format!("store_{round}.knds")),
        ]);
        ok &= run(&[
            "dual-check",
            "--trials",
            "1000",
            "--seed",
            "5",
            "--out",
            &p(&format!("dual_{round}.csv")),
        ]);
        ok &= run(&[
            "grad-check",
            "--trials",
            "100",
            "--seed",
            "5",
            "--out",
            &p(&format!("grad_{round}.csv")),
        ]);
        ok &= run(&[
            "finetune",
            "--train",
            &format!("{task_dir}/train.kncp"),
            "--val",
            &format!("{task_dir}/val.kncp"),
            "--grid-lr",
            "0.1,0.5",
            "--grid-alpha",
            "0",
            "--steps",
            "50",
            "--batch",
            "16",
            "--seed",
            "5",
            "--out-projection",
            &p(&format!("proj_{round}.knpj")),
            "--report",
            &p(&format!("ft_{round}.json")),
        ]);
        ok &= run(&[
            "score",
            "--datastore",
            &p(&format!("store_{round}.knds")),
            "--projection",
            &p(&format!("proj_{round}.knpj")),
            "--pairs",
            &format!("{task_dir}/test.kncp"),
            "--variant",
            "interp",
            "--out",
            &p(&format!("scores_{round}.json")),
        ]);
    }
    if !ok {
        detail.push_str("a subcommand exited nonzero; ");
    }
    for name in [
        "task_a/train.kncp",
        "task_a/test.kncp",
        "task_a/freq_id.json",
        "store_a.knds",
        "dual_a.csv",
        "grad_a.csv",
        "proj_a.knpj",
        "ft_a.json",
        "scores_a.json",
    ] {
        let twin = name.replace("_a", "_b");
        let a = std::fs::read(dir.join(name)).unwrap();
        let b = std::fs::read(dir.join(&twin)).unwrap();
        if a != b {
            ok = false;
            detail.push_str(&format!("{name} differs between identical runs; "));
        }
    }
    report(
        10,
        "bit-identical round trips and deterministic CLI",
        ok,
        &detail,
    );
}
