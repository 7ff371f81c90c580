//! Single executable exposing the full workflow: synthetic task generation,
//! datastore construction and search, teacher-forced scoring, the dual-form
//! and gradient checks, fine-tuning with grid search, prediction comparison,
//! word-level analysis, and a scoring micro-benchmark.

mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use knnmt_core::analysis::{
    self, bucket_mean_std, frequency_buckets, gamma, gamma_bucket, neighbor_quality, word_prf,
    GoldProbSeries, WordOccurrence, FREQ_BUCKET_LABELS, GAMMA_BUCKET_LABELS,
};
use knnmt_core::datastore::{Datastore, Metric};
use knnmt_core::finetune::{
    fd_gradient, finetune_full, grid_search, opl_gradient, GridSpec,
};
use knnmt_core::io::{load_projection_path, save_projection_path, ContextPairs};
use knnmt_core::meta::dual_residual;
use knnmt_core::prediction::{score_sequence, Hyper, Projection, ScoreVariant};
use knnmt_core::synth::{base_projection, gen_task, SynthConfig};

use report::{write_atomic, write_json, Header};

const EXIT_USAGE: i32 = 2;
const EXIT_MISSING_INPUT: i32 = 3;
const EXIT_FORMAT: i32 = 4;
const EXIT_NUMERIC: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self::new(EXIT_NUMERIC, message)
    }

    fn io(context: &str, e: std::io::Error) -> Self {
        let code = if e.kind() == std::io::ErrorKind::NotFound {
            EXIT_MISSING_INPUT
        } else {
            EXIT_FORMAT
        };
        Self::new(code, format!("{context}: {e}"))
    }
}

impl From<knnmt_core::Error> for CliError {
    fn from(e: knnmt_core::Error) -> Self {
        use knnmt_core::Error as E;
        let code = match &e {
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_INPUT,
            E::BadMagic { .. }
            | E::VersionMismatch(_)
            | E::TruncatedFile(_)
            | E::DimensionMismatch { .. }
            | E::TokenOutOfRange { .. }
            | E::QueryDimMismatch { .. }
            | E::Io(_) => EXIT_FORMAT,
            E::NonFinite { .. } | E::ZeroProbability(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        CliError::new(code, e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "knnmt", version, about = "Retrieval-interpolated scoring and output-projection fine-tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RetrievalArgs {
    /// Number of neighbors to retrieve.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Interpolation coefficient.
    #[arg(long, default_value_t = 0.6)]
    lambda: f64,
    /// Retrieval softmax temperature.
    #[arg(long, default_value_t = 20.0)]
    temperature: f64,
    /// Distance metric: ip or l2.
    #[arg(long, default_value = "ip")]
    metric: Metric,
}

impl RetrievalArgs {
    fn hyper(&self) -> Hyper {
        Hyper {
            k: self.k,
            lambda: self.lambda,
            temperature: self.temperature,
            metric: self.metric,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task: context-pair splits, frequency tables,
    /// and the word/sub-token map.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 128)]
        vocab_size: u32,
        #[arg(long, default_value_t = 50_000)]
        n_general: usize,
        #[arg(long, default_value_t = 20_000)]
        n_indomain: usize,
        #[arg(long, default_value_t = 2_000)]
        n_val: usize,
        #[arg(long, default_value_t = 2_000)]
        n_test: usize,
        #[arg(long, default_value_t = 4.0)]
        class_sep: f64,
        #[arg(long, default_value_t = 2.0)]
        shift: f64,
        #[arg(long, default_value_t = 1.2)]
        skew: f64,
        /// Also train a base projection on the general split and save it here.
        #[arg(long)]
        base_projection: Option<PathBuf>,
    },
    /// Build a datastore from a context-pair file.
    Build {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query a datastore and print the neighbors as CSV.
    Search {
        #[arg(long)]
        datastore: PathBuf,
        /// Comma-separated query vector.
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value = "ip")]
        metric: Metric,
    },
    /// Teacher-forced scoring of a context-pair file.
    Score {
        #[arg(long)]
        datastore: PathBuf,
        #[arg(long)]
        projection: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// nmt, knn, or interp.
        #[arg(long, default_value = "interp")]
        variant: String,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the dual-form identity on random instances; emits CSV.
    DualCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the analytic gradient against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-searched full-data fine-tuning of the projection.
    Finetune {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Initial projection; zeros when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-separated learning-rate candidates; the standard full
        /// grid when omitted.
        #[arg(long)]
        grid_lr: Option<String>,
        /// Comma-separated l2-coefficient candidates.
        #[arg(long)]
        grid_alpha: Option<String>,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_projection: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Pairwise mean/variance of gold-probability differences between
    /// scored series files.
    Compare {
        /// Two or three scores files produced by `score`.
        #[arg(long, num_args = 2..=3)]
        series: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Word-level analysis: bucketed P/R/F1 and incremental recall from
    /// text files, and optionally neighbor quality from retrieval.
    Analyze {
        /// Hypothesis sentences, one per line.
        #[arg(long)]
        hyp: PathBuf,
        /// Reference sentences, one per line.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Fine-tuning-baseline hypothesis sentences for incremental recall.
        #[arg(long)]
        hyp_ft: Option<PathBuf>,
        /// JSON word -> in-domain frequency.
        #[arg(long)]
        freq_id: PathBuf,
        /// JSON word -> general-domain frequency.
        #[arg(long)]
        freq_gd: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Datastore for neighbor-quality analysis.
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long)]
        projection: Option<PathBuf>,
        /// Context pairs aligned with the occurrences file.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// JSON list of word occurrences with sub-token positions.
        #[arg(long)]
        occurrences: Option<PathBuf>,
        #[arg(long)]
        neighbor_out: Option<PathBuf>,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Wall-clock per-token scoring time, pure NMT vs interpolated.
    Bench {
        #[arg(long)]
        datastore: PathBuf,
        #[arg(long)]
        projection: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth {
            out_dir,
            seed,
            dim,
            vocab_size,
            n_general,
            n_indomain,
            n_val,
            n_test,
            class_sep,
            shift,
            skew,
            base_projection: base_out,
        } => {
            let cfg = SynthConfig {
                dim,
                vocab_size,
                n_general,
                n_indomain,
                n_val,
                n_test,
                class_sep,
                shift,
                low_freq_skew: skew,
                seed,
            };
            cmd_synth(&out_dir, &cfg, base_out.as_deref())
        }
        Command::Build { pairs, out } => cmd_build(&pairs, &out),
        Command::Search {
            datastore,
            query,
            k,
            metric,
        } => cmd_search(&datastore, &query, k, metric),
        Command::Score {
            datastore,
            projection,
            pairs,
            variant,
            retrieval,
            out,
        } => cmd_score(&datastore, &projection, &pairs, &variant, &retrieval, &out),
        Command::DualCheck { trials, seed, out } => cmd_dual_check(trials, seed, out.as_deref()),
        Command::GradCheck {
            trials,
            dim,
            vocab,
            k,
            epsilon,
            seed,
            out,
        } => cmd_grad_check(trials, dim, vocab, k, epsilon, seed, out.as_deref()),
        Command::Finetune {
            train,
            val,
            init,
            grid_lr,
            grid_alpha,
            steps,
            batch,
            seed,
            out_projection,
            report,
        } => cmd_finetune(
            &train,
            &val,
            init.as_deref(),
            grid_lr.as_deref(),
            grid_alpha.as_deref(),
            steps,
            batch,
            seed,
            &out_projection,
            &report,
        ),
        Command::Compare { series, out } => cmd_compare(&series, &out),
        Command::Analyze {
            hyp,
            reference,
            hyp_ft,
            freq_id,
            freq_gd,
            out,
            datastore,
            projection,
            pairs,
            occurrences,
            neighbor_out,
            retrieval,
        } => cmd_analyze(AnalyzeInputs {
            hyp,
            reference,
            hyp_ft,
            freq_id,
            freq_gd,
            out,
            datastore,
            projection,
            pairs,
            occurrences,
            neighbor_out,
            retrieval,
        }),
        Command::Bench {
            datastore,
            projection,
            pairs,
            retrieval,
            reps,
            out,
        } => cmd_bench(&datastore, &projection, &pairs, &retrieval, reps, out.as_deref()),
    }
}

fn cmd_synth(out_dir: &Path, cfg: &SynthConfig, base_out: Option<&Path>) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io("creating output dir", e))?;
    let task = gen_task(cfg)?;
    let save_pairs = |name: &str, pairs: &ContextPairs| -> Result<(), CliError> {
        let mut buf = Vec::new();
        pairs.save(&mut buf)?;
        write_atomic(&out_dir.join(name), &buf)
    };
    save_pairs("general.kncp", &task.general)?;
    save_pairs("train.kncp", &task.train)?;
    save_pairs("val.kncp", &task.val)?;
    save_pairs("test.kncp", &task.test)?;
    write_json(&out_dir.join("freq_gd.json"), &task.f_gd)?;
    write_json(&out_dir.join("freq_id.json"), &task.f_id)?;
    write_json(&out_dir.join("words.json"), &task.word_map)?;
    write_json(&out_dir.join("occurrences.json"), &task.test_occurrences)?;
    write_atomic(
        &out_dir.join("test_sentences.txt"),
        (task.test_sentences.join("\n") + "\n").as_bytes(),
    )?;
    if let Some(path) = base_out {
        let proj = base_projection(cfg, &task.general)?;
        save_projection_path(&proj, path)?;
    }
    let header = Header::new(cfg.seed, serde_json::to_value(cfg).unwrap());
    write_json(
        &out_dir.join("synth_report.json"),
        &json!({
            "header": header,
            "splits": {
                "general": task.general.pairs().len(),
                "train": task.train.pairs().len(),
                "val": task.val.pairs().len(),
                "test": task.test.pairs().len(),
            },
            "words": task.word_map.len(),
        }),
    )
}

fn cmd_build(pairs_path: &Path, out: &Path) -> Result<(), CliError> {
    let cp = ContextPairs::load_path(pairs_path)?;
    let pairs = cp.pairs();
    let ds = Datastore::build(
        pairs.iter().map(|(v, t)| (v.as_slice(), *t)),
        cp.dim,
        cp.vocab_size,
    )?;
    let mut buf = Vec::new();
    ds.save(&mut buf)?;
    write_atomic(out, &buf)
}

fn cmd_search(ds_path: &Path, query: &str, k: usize, metric: Metric) -> Result<(), CliError> {
    let ds = Datastore::load_path(ds_path)?;
    let parsed: Result<Vec<f32>, _> = query.split(',').map(|s| s.trim().parse::<f32>()).collect();
    let q = parsed.map_err(|e| CliError::usage(format!("bad query vector: {e}")))?;
    let ns = ds.search(&q, k, metric)?;
    println!("rank,index,value,score");
    for (rank, n) in ns.entries.iter().enumerate() {
        println!("{},{},{},{}", rank + 1, n.index, n.value, n.score);
    }
    Ok(())
}

fn parse_variant(s: &str) -> Result<ScoreVariant, CliError> {
    match s {
        "nmt" => Ok(ScoreVariant::Nmt),
        "knn" => Ok(ScoreVariant::Knn),
        "interp" => Ok(ScoreVariant::Interpolated),
        other => Err(CliError::usage(format!(
            "unknown variant {other:?} (expected nmt, knn, or interp)"
        ))),
    }
}

#[derive(Serialize, Deserialize)]
struct ScoresFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    header: Option<Value>,
    variant: String,
    probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ppl: Option<f64>,
}

fn cmd_score(
    ds_path: &Path,
    proj_path: &Path,
    pairs_path: &Path,
    variant: &str,
    retrieval: &RetrievalArgs,
    out: &Path,
) -> Result<(), CliError> {
    let ds = Datastore::load_path(ds_path)?;
    let proj = load_projection_path(proj_path)?;
    let cp = ContextPairs::load_path(pairs_path)?;
    let v = parse_variant(variant)?;
    let hyper = retrieval.hyper();
    let scored = score_sequence(&proj, &ds, &hyper, &cp.pairs(), v, false)?;
    let nll: f64 = scored.iter().map(|s| -s.log_p_gold).sum();
    let ppl = (nll / scored.len().max(1) as f64).exp();
    if !ppl.is_finite() {
        return Err(CliError::numeric("non-finite perplexity"));
    }
    let header = Header::new(0, json!({ "variant": variant, "hyper": hyper }));
    write_json(
        out,
        &ScoresFile {
            header: Some(serde_json::to_value(header).unwrap()),
            variant: variant.to_string(),
            probs: scored.iter().map(|s| s.p_gold).collect(),
            ppl: Some(ppl),
        },
    )
}

fn cmd_dual_check(trials: usize, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let temperatures = [5.0, 10.0, 20.0, 50.0, 100.0, 150.0, 200.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let header = Header::new(seed, json!({ "trials": trials }));
    let mut csv = String::new();
    csv.push_str(&header.csv_comment());
    csv.push('\n');
    csv.push_str("trial,dim,vocab,k,lambda,temperature,residual\n");
    let mut max_residual = 0.0f64;
    for trial in 0..trials {
        let dim = rng.random_range(2..=64usize);
        let vocab = rng.random_range(2..=256usize);
        let k = rng.random_range(1..=32usize);
        let lambda: f64 = rng.random();
        let temperature = temperatures[rng.random_range(0..temperatures.len())];
        let count = rng.random_range(k..=k + 16);
        let pairs: Vec<(Vec<f32>, u32)> = (0..count)
            .map(|_| {
                (
                    (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
                    rng.random_range(0..vocab as u32),
                )
            })
            .collect();
        let ds = Datastore::build(
            pairs.iter().map(|(v, t)| (v.as_slice(), *t)),
            dim,
            vocab as u32,
        )?;
        let weights: Vec<f64> = (0..vocab * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = Projection::from_weights(
            ndarray::Array2::from_shape_vec((vocab, dim), weights).unwrap(),
        )?;
        let h: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let nbrs = ds.search(&h, k, Metric::InnerProduct)?;
        let residual = dual_residual(&proj, &nbrs, &h, lambda, temperature)?;
        if !residual.is_finite() {
            return Err(CliError::numeric(format!(
                "non-finite residual at trial {trial}"
            )));
        }
        max_residual = max_residual.max(residual);
        csv.push_str(&format!(
            "{trial},{dim},{vocab},{k},{lambda},{temperature},{residual:e}\n"
        ));
    }
    match out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    eprintln!("dual-check: {trials} trials, max residual {max_residual:e}");
    Ok(())
}

fn cmd_grad_check(
    trials: usize,
    max_dim: usize,
    max_vocab: usize,
    max_k: usize,
    epsilon: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if epsilon <= 0.0 {
        return Err(CliError::usage("epsilon must be positive"));
    }
    let alphas = [0.0, 0.1, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let header = Header::new(
        seed,
        json!({ "trials": trials, "dim": max_dim, "vocab": max_vocab, "k": max_k, "epsilon": epsilon }),
    );
    let mut csv = String::new();
    csv.push_str(&header.csv_comment());
    csv.push('\n');
    csv.push_str("trial,dim,vocab,k,alpha,epsilon,max_rel_err\n");
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let dim = rng.random_range(2..=max_dim);
        let vocab = rng.random_range(2..=max_vocab);
        let k = rng.random_range(1..=max_k);
        let alpha = alphas[trial % alphas.len()];
        let pairs: Vec<(Vec<f32>, u32)> = (0..k)
            .map(|_| {
                (
                    (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
                    rng.random_range(0..vocab as u32),
                )
            })
            .collect();
        let ds = Datastore::build(
            pairs.iter().map(|(v, t)| (v.as_slice(), *t)),
            dim,
            vocab as u32,
        )?;
        let h: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let nbrs = ds.search(&h, k, Metric::NegativeL2)?;
        let weights: Vec<f64> = (0..vocab * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = Projection::from_weights(
            ndarray::Array2::from_shape_vec((vocab, dim), weights).unwrap(),
        )?;
        let analytic = opl_gradient(&proj, &nbrs, alpha)?;
        let fd = fd_gradient(&proj, &nbrs, alpha, epsilon)?;
        let max_rel = analytic
            .delta
            .iter()
            .zip(fd.delta.iter())
            .map(|(a, f)| (a - f).abs() / a.abs().max(1.0))
            .fold(0.0f64, f64::max);
        if !max_rel.is_finite() {
            return Err(CliError::numeric(format!(
                "non-finite gradient error at trial {trial}"
            )));
        }
        worst = worst.max(max_rel);
        csv.push_str(&format!(
            "{trial},{dim},{vocab},{k},{alpha},{epsilon},{max_rel:e}\n"
        ));
    }
    match out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    eprintln!("grad-check: {trials} trials, max relative error {worst:e}");
    Ok(())
}

fn parse_grid_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| CliError::usage(format!("bad grid value {tok:?}: {e}")))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    train_path: &Path,
    val_path: &Path,
    init: Option<&Path>,
    grid_lr: Option<&str>,
    grid_alpha: Option<&str>,
    steps: usize,
    batch: usize,
    seed: u64,
    out_projection: &Path,
    report_path: &Path,
) -> Result<(), CliError> {
    let train = ContextPairs::load_path(train_path)?;
    let val = ContextPairs::load_path(val_path)?;
    let proj = match init {
        Some(path) => load_projection_path(path)?,
        None => Projection::zeros(train.vocab_size as usize, train.dim),
    };
    let full = GridSpec::full();
    let grid = GridSpec {
        lr_candidates: match grid_lr {
            Some(s) => parse_grid_list(s)?,
            None => full.lr_candidates,
        },
        alpha_candidates: match grid_alpha {
            Some(s) => parse_grid_list(s)?,
            None => full.alpha_candidates,
        },
    };
    let train_pairs = train.pairs();
    let val_pairs = val.pairs();
    let (best_ft, _) = grid_search(&proj, &train_pairs, &val_pairs, &grid, steps, batch, seed)?;
    let (tuned, ppl) = finetune_full(&proj, &train_pairs, &best_ft, &val_pairs, seed)?;
    let mut buf = Vec::new();
    knnmt_core::io::save_projection(&tuned, &mut buf)?;
    write_atomic(out_projection, &buf)?;
    let header = Header::new(
        seed,
        json!({ "steps": steps, "batch": batch, "grid_lr": grid.lr_candidates, "grid_alpha": grid.alpha_candidates }),
    );
    write_json(
        report_path,
        &json!({
            "header": header,
            "selected": { "lr": best_ft.lr, "alpha": best_ft.alpha },
            "validation_ppl": ppl,
        }),
    )
}

fn cmd_compare(series_paths: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut series = Vec::new();
    for path in series_paths {
        let body = std::fs::read(path)
            .map_err(|e| CliError::io(&format!("reading {}", path.display()), e))?;
        let file: ScoresFile = serde_json::from_slice(&body)
            .map_err(|e| CliError::new(EXIT_FORMAT, format!("{}: {e}", path.display())))?;
        series.push(GoldProbSeries {
            variant: file.variant,
            probs: file.probs,
        });
    }
    let mut pairwise = Vec::new();
    for i in 0..series.len() {
        for j in 0..series.len() {
            if i == j {
                continue;
            }
            let m = analysis::mean_diff(&series[i], &series[j])?;
            let v = analysis::var_diff(&series[i], &series[j])?;
            pairwise.push(json!({
                "a": series[i].variant,
                "b": series[j].variant,
                "a_file": series_paths[i],
                "b_file": series_paths[j],
                "mean": m,
                "variance": v,
            }));
        }
    }
    let header = Header::new(0, json!({ "series": series_paths }));
    write_json(out, &json!({ "header": header, "pairwise": pairwise }))
}

struct AnalyzeInputs {
    hyp: PathBuf,
    reference: PathBuf,
    hyp_ft: Option<PathBuf>,
    freq_id: PathBuf,
    freq_gd: PathBuf,
    out: PathBuf,
    datastore: Option<PathBuf>,
    projection: Option<PathBuf>,
    pairs: Option<PathBuf>,
    occurrences: Option<PathBuf>,
    neighbor_out: Option<PathBuf>,
    retrieval: RetrievalArgs,
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(&format!("reading {}", path.display()), e))?;
    Ok(body.lines().map(|l| l.to_string()).collect())
}

fn read_freq(path: &Path) -> Result<BTreeMap<String, u64>, CliError> {
    let body = std::fs::read(path)
        .map_err(|e| CliError::io(&format!("reading {}", path.display()), e))?;
    serde_json::from_slice(&body)
        .map_err(|e| CliError::new(EXIT_FORMAT, format!("{}: {e}", path.display())))
}

fn cmd_analyze(inputs: AnalyzeInputs) -> Result<(), CliError> {
    let hyp = read_lines(&inputs.hyp)?;
    let reference = read_lines(&inputs.reference)?;
    if hyp.len() != reference.len() {
        return Err(CliError::new(
            EXIT_FORMAT,
            format!(
                "hypothesis has {} sentences, reference has {}",
                hyp.len(),
                reference.len()
            ),
        ));
    }
    let f_id = read_freq(&inputs.freq_id)?;
    let f_gd = read_freq(&inputs.freq_gd)?;

    let hyp_refs: Vec<&str> = hyp.iter().map(|s| s.as_str()).collect();
    let ref_refs: Vec<&str> = reference.iter().map(|s| s.as_str()).collect();
    let stats = word_prf(&hyp_refs, &ref_refs);

    // gamma per in-domain word; unseen-in-domain words are skipped.
    let mut word_gamma: BTreeMap<String, f64> = BTreeMap::new();
    for (word, &fi) in &f_id {
        let fg = f_gd.get(word).copied().unwrap_or(0);
        word_gamma.insert(word.clone(), gamma(fi, fg)?);
    }

    let delta_r = match &inputs.hyp_ft {
        Some(path) => {
            let hyp_ft = read_lines(path)?;
            if hyp_ft.len() != reference.len() {
                return Err(CliError::new(
                    EXIT_FORMAT,
                    "ft hypothesis sentence count differs from reference",
                ));
            }
            let ft_refs: Vec<&str> = hyp_ft.iter().map(|s| s.as_str()).collect();
            let stats_ft = word_prf(&ft_refs, &ref_refs);
            Some(analysis::incremental_recall(&stats, &stats_ft))
        }
        None => None,
    };

    let header = Header::new(0, json!({ "hyp": inputs.hyp, "ref": inputs.reference }));
    let mut csv = String::new();
    csv.push_str(&header.csv_comment());
    csv.push('\n');
    csv.push_str("bucket_type,bucket,metric,mean,std,count\n");

    // gamma-bucketed P/R/F1 (and delta recall when available).
    let mut bucket_vals: Vec<BTreeMap<&str, Vec<f64>>> = vec![BTreeMap::new(); 4];
    for (word, &g) in &word_gamma {
        if let Some(s) = stats.get(word) {
            if s.ref_count == 0 && s.hyp_count == 0 {
                continue;
            }
            let b = gamma_bucket(g);
            bucket_vals[b].entry("precision").or_default().push(s.precision());
            bucket_vals[b].entry("recall").or_default().push(s.recall());
            bucket_vals[b].entry("f1").or_default().push(s.f1());
            if let Some(dr) = &delta_r {
                if let Some(&d) = dr.get(word) {
                    bucket_vals[b].entry("delta_recall").or_default().push(d);
                }
            }
        }
    }
    for (b, vals) in bucket_vals.iter().enumerate() {
        for (metric, v) in vals {
            let (mean, std) = bucket_mean_std(v);
            csv.push_str(&format!(
                "gamma,{},{metric},{mean},{std},{}\n",
                GAMMA_BUCKET_LABELS[b],
                v.len()
            ));
        }
    }

    // frequency buckets over gamma >= 5 words.
    let domain_specific: BTreeMap<String, u64> = word_gamma
        .iter()
        .filter(|(_, &g)| g >= 5.0)
        .filter_map(|(w, _)| f_id.get(w).map(|&f| (w.clone(), f)))
        .collect();
    let freq_assign = frequency_buckets(&domain_specific);
    let mut freq_vals: Vec<BTreeMap<&str, Vec<f64>>> = vec![BTreeMap::new(); 4];
    for (word, &b) in &freq_assign {
        if let Some(s) = stats.get(word) {
            freq_vals[b].entry("recall").or_default().push(s.recall());
            if let Some(dr) = &delta_r {
                if let Some(&d) = dr.get(word) {
                    freq_vals[b].entry("delta_recall").or_default().push(d);
                }
            }
        }
    }
    for (b, vals) in freq_vals.iter().enumerate() {
        for (metric, v) in vals {
            let (mean, std) = bucket_mean_std(v);
            csv.push_str(&format!(
                "frequency,{},{metric},{mean},{std},{}\n",
                FREQ_BUCKET_LABELS[b],
                v.len()
            ));
        }
    }
    write_atomic(&inputs.out, csv.as_bytes())?;

    // Optional retrieval-quality analysis.
    if let (Some(ds_path), Some(proj_path), Some(pairs_path), Some(occ_path), Some(nbr_out)) = (
        &inputs.datastore,
        &inputs.projection,
        &inputs.pairs,
        &inputs.occurrences,
        &inputs.neighbor_out,
    ) {
        let ds = Datastore::load_path(ds_path)?;
        let proj = load_projection_path(proj_path)?;
        let cp = ContextPairs::load_path(pairs_path)?;
        let occ_body = std::fs::read(occ_path)
            .map_err(|e| CliError::io(&format!("reading {}", occ_path.display()), e))?;
        let occurrences: Vec<WordOccurrence> = serde_json::from_slice(&occ_body)
            .map_err(|e| CliError::new(EXIT_FORMAT, format!("{}: {e}", occ_path.display())))?;
        let hyper = inputs.retrieval.hyper();
        let scored = score_sequence(
            &proj,
            &ds,
            &hyper,
            &cp.pairs(),
            ScoreVariant::Interpolated,
            true,
        )?;
        let quality = neighbor_quality(&scored, &occurrences)?;

        let mut nbr_csv = String::new();
        nbr_csv.push_str(&header.csv_comment());
        nbr_csv.push('\n');
        nbr_csv.push_str("bucket,unretrieved_rate,gold_rank,gold_dist,gold_count,distinct_labels,count\n");
        let mut buckets: Vec<Vec<&analysis::NeighborQuality>> = vec![Vec::new(); 4];
        for (word, q) in &quality {
            if let Some(&b) = freq_assign.get(word) {
                buckets[b].push(q);
            }
        }
        for (b, qs) in buckets.iter().enumerate() {
            if qs.is_empty() {
                nbr_csv.push_str(&format!("{},,,,,,0\n", FREQ_BUCKET_LABELS[b]));
                continue;
            }
            let n = qs.len() as f64;
            let unret = qs.iter().filter(|q| q.unretrieved).count() as f64 / n;
            let mean_of = |f: fn(&analysis::NeighborQuality) -> f64| {
                qs.iter().map(|q| f(q)).sum::<f64>() / n
            };
            nbr_csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                FREQ_BUCKET_LABELS[b],
                unret,
                mean_of(|q| q.gold_rank),
                mean_of(|q| q.gold_dist),
                mean_of(|q| q.gold_count),
                mean_of(|q| q.distinct_labels),
                qs.len()
            ));
        }
        write_atomic(nbr_out, nbr_csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_bench(
    ds_path: &Path,
    proj_path: &Path,
    pairs_path: &Path,
    retrieval: &RetrievalArgs,
    reps: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ds = Datastore::load_path(ds_path)?;
    let proj = load_projection_path(proj_path)?;
    let cp = ContextPairs::load_path(pairs_path)?;
    let pairs = cp.pairs();
    let hyper = retrieval.hyper();
    let reps = reps.max(1);

    let time_variant = |variant: ScoreVariant| -> Result<f64, CliError> {
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            let scored = score_sequence(&proj, &ds, &hyper, &pairs, variant, false)?;
            let elapsed = start.elapsed().as_secs_f64();
            samples.push(elapsed / scored.len().max(1) as f64);
        }
        samples.sort_by(f64::total_cmp);
        Ok(samples[samples.len() / 2])
    };
    // warm-up
    let _ = time_variant(ScoreVariant::Nmt)?;
    let nmt = time_variant(ScoreVariant::Nmt)?;
    let interp = time_variant(ScoreVariant::Interpolated)?;
    let header = Header::new(0, json!({ "reps": reps, "hyper": hyper, "tokens": pairs.len() }));
    let report = json!({
        "header": header,
        "nmt_seconds_per_token": nmt,
        "interpolated_seconds_per_token": interp,
        "relative_speed": nmt / interp,
    });
    match out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).unwrap()),
    }
    Ok(())
}
