//! The six subcommand implementations. Each one merges flag/file/default
//! settings, runs the corresponding library operation, writes its
//! artifacts plus a resolved-config echo into the output directory, and
//! prints a one-line JSON summary to stdout on success.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use dyncot::corpus::{self, Dataset, DatasetStats, GenSpec, Post};
use dyncot::cotgen::{self, TeacherEndpoint, TeacherKind};
use dyncot::eval;
use dyncot::model::checkpoint::{load_checkpoint, save_checkpoint};
use dyncot::model::vocab;
use dyncot::model::ModelConfig;
use dyncot::trainer::{self, Strategy, TrainConfig};

use crate::config::{load_config, Resolver};
use crate::CliError;

/// Fixed default so reruns are byte-identical; pass the wall-clock time
/// if provenance matters more than reproducibility.
const DEFAULT_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("no such file: {}", path.display())));
    }
    Ok(corpus::read_jsonl(path)?)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn print_summary(v: serde_json::Value) {
    println!("{}", serde_json::to_string(&v).expect("summary serializes"));
}

/// Image-symbol count implied by a corpus: one past the largest
/// `<img:k>` index any post uses.
fn image_symbol_count(posts: &[Post]) -> usize {
    posts
        .iter()
        .flat_map(|p| &p.image_tokens)
        .filter_map(|t| vocab::img_index(t))
        .max()
        .map_or(1, |k| k + 1)
}

// ---------------------------------------------------------------- gen

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Flat key = value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for train.jsonl, test.jsonl, and the stats report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Number of distinct keyphrase types to synthesize.
    #[arg(long)]
    pub kp_vocab_size: Option<usize>,
    /// Target fraction of unique test keyphrases absent from train.
    #[arg(long)]
    pub unseen_fraction: Option<f64>,
    /// Per-(post, keyphrase) probability the phrase is absent from the text.
    #[arg(long)]
    pub absent_fraction: Option<f64>,
    /// Mean gold keyphrases per post, in [1, 2].
    #[arg(long)]
    pub kp_per_post_mean: Option<f64>,
    /// Size of the image-token alphabet.
    #[arg(long)]
    pub image_symbols: Option<usize>,
    /// Image tokens per post.
    #[arg(long)]
    pub image_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run_gen(a: GenArgs) -> Result<(), CliError> {
    let file = load_config(a.config.as_deref())?;
    let mut r = Resolver::new(&file);
    let out = r.required_path("out", a.out)?;
    let d = GenSpec::default();
    let spec = GenSpec {
        n_train: r.value("n_train", a.n_train, d.n_train)?,
        n_test: r.value("n_test", a.n_test, d.n_test)?,
        kp_vocab_size: r.value("kp_vocab_size", a.kp_vocab_size, d.kp_vocab_size)?,
        unseen_fraction: r.value("unseen_fraction", a.unseen_fraction, d.unseen_fraction)?,
        absent_fraction: r.value("absent_fraction", a.absent_fraction, d.absent_fraction)?,
        kp_per_post_mean: r.value("kp_per_post_mean", a.kp_per_post_mean, d.kp_per_post_mean)?,
        image_symbols: r.value("image_symbols", a.image_symbols, d.image_symbols)?,
        image_len: r.value("image_len", a.image_len, d.image_len)?,
        seed: r.value("seed", a.seed, d.seed)?,
    };
    let (train, test) = corpus::generate_synthetic(&spec)?;
    let stats = corpus::compute_stats(&train, &test)?;
    ensure_dir(&out)?;
    let train_path = out.join("train.jsonl");
    let test_path = out.join("test.jsonl");
    corpus::write_jsonl(&train, &train_path)?;
    corpus::write_jsonl(&test, &test_path)?;
    write_text(&out.join("stats.txt"), &DatasetStats::table(&[("synthetic", &stats)]))?;
    write_text(
        &out.join("stats.json"),
        &serde_json::to_string_pretty(&stats).expect("stats serialize"),
    )?;
    r.write_echo(&out, "gen")?;
    print_summary(json!({
        "command": "gen",
        "train": train_path.display().to_string(),
        "test": test_path.display().to_string(),
        "train_posts": stats.train_posts,
        "test_posts": stats.test_posts,
        "kp_overlap_percent": stats.overlap_percent_2dp(),
        "seed": spec.seed,
    }));
    Ok(())
}

// -------------------------------------------------------------- stats

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Flat key = value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train split (JSONL, one post per line).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Test split (JSONL, one post per line).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Optional directory for stats.json and the config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_stats(a: StatsArgs) -> Result<(), CliError> {
    let file = load_config(a.config.as_deref())?;
    let mut r = Resolver::new(&file);
    let train_path = r.required_path("train", a.train)?;
    let test_path = r.required_path("test", a.test)?;
    let out = r.optional_path("out", a.out);
    let train = read_dataset(&train_path)?;
    let test = read_dataset(&test_path)?;
    let stats = corpus::compute_stats(&train, &test)?;
    print!("{}", DatasetStats::table(&[(train.name.as_str(), &stats)]));
    if let Some(dir) = &out {
        ensure_dir(dir)?;
        write_text(
            &dir.join("stats.json"),
            &serde_json::to_string_pretty(&stats).expect("stats serialize"),
        )?;
        r.write_echo(dir, "stats")?;
    }
    print_summary(json!({
        "command": "stats",
        "train_posts": stats.train_posts,
        "test_posts": stats.test_posts,
        "avg_kp_per_post": stats.avg_kp_per_post,
        "train_kp_types": stats.train_kp_types,
        "test_kp_types": stats.test_kp_types,
        "shared_kp_types": stats.shared_kp_types,
        "kp_overlap_percent": stats.overlap_percent_2dp(),
    }));
    Ok(())
}

// ----------------------------------------------------------- resample

#[derive(Args, Debug)]
pub struct ResampleArgs {
    /// Flat key = value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory for the resampled splits.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keyphrase-overlap rate to aim for, in [0, 1].
    #[arg(long)]
    pub target_overlap: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run_resample(a: ResampleArgs) -> Result<(), CliError> {
    let file = load_config(a.config.as_deref())?;
    let mut r = Resolver::new(&file);
    let train_path = r.required_path("train", a.train)?;
    let test_path = r.required_path("test", a.test)?;
    let out = r.required_path("out", a.out)?;
    let target = r.value("target_overlap", a.target_overlap, 0.45)?;
    let seed = r.value("seed", a.seed, 17u64)?;
    let train = read_dataset(&train_path)?;
    let test = read_dataset(&test_path)?;
    let before = corpus::compute_stats(&train, &test)?;
    let outcome = corpus::resample_v2(&train, &test, target, seed)?;
    let after = corpus::compute_stats(&outcome.train, &outcome.test)?;
    ensure_dir(&out)?;
    corpus::write_jsonl(&outcome.train, &out.join("train.jsonl"))?;
    corpus::write_jsonl(&outcome.test, &out.join("test.jsonl"))?;
    corpus::write_jsonl(
        &Dataset::new("removed", outcome.removed.clone()),
        &out.join("removed.jsonl"),
    )?;
    write_text(
        &out.join("stats.txt"),
        &DatasetStats::table(&[("original", &before), ("resampled", &after)]),
    )?;
    r.write_echo(&out, "resample")?;
    print_summary(json!({
        "command": "resample",
        "moved_to_test": outcome.moved_ids.len(),
        "removed": outcome.removed.len(),
        "target_overlap": outcome.target_overlap,
        "achieved_overlap": outcome.achieved_overlap,
        "train_posts": outcome.train.posts.len(),
        "test_posts": outcome.test.posts.len(),
        "out": out.display().to_string(),
    }));
    Ok(())
}

// ------------------------------------------------------------- cotgen

#[derive(Args, Debug)]
pub struct CotgenArgs {
    /// Flat key = value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Posts to produce reasoning traces for (JSONL).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Output directory for cot_cache.jsonl and skips.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `oracle` (built-in deterministic teacher) or `remote`
    /// (HTTP endpoint from TEACHER_URL / TEACHER_TOKEN / TEACHER_MODEL).
    #[arg(long)]
    pub teacher: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// RFC 3339 creation time recorded on each record. Fixed by default
    /// so reruns are byte-identical.
    #[arg(long)]
    pub timestamp: Option<String>,
}

pub fn run_cotgen(a: CotgenArgs) -> Result<(), CliError> {
    let file = load_config(a.config.as_deref())?;
    let mut r = Resolver::new(&file);
    let train_path = r.required_path("train", a.train)?;
    let out = r.required_path("out", a.out)?;
    let teacher: TeacherKind = r.keyword("teacher", a.teacher, TeacherKind::Oracle)?;
    let seed = r.value("seed", a.seed, 17u64)?;
    let timestamp = r.value("timestamp", a.timestamp, DEFAULT_TIMESTAMP.to_string())?;
    let train = read_dataset(&train_path)?;
    let (records, skips) = match teacher {
        TeacherKind::Oracle => (cotgen::oracle_records(&train.posts, seed, &timestamp), Vec::new()),
        TeacherKind::Remote => {
            let endpoint = TeacherEndpoint::from_env()?;
            cotgen::remote_records(&train.posts, &endpoint, &timestamp)?
        }
    };
    ensure_dir(&out)?;
    let cache_path = out.join("cot_cache.jsonl");
    let sidecar_path = out.join("skips.jsonl");
    cotgen::write_cot_cache(&records, &cache_path)?;
    cotgen::write_sidecar(&skips, &sidecar_path)?;
    r.write_echo(&out, "cotgen")?;
    print_summary(json!({
        "command": "cotgen",
        "teacher": teacher.to_string(),
        "records": records.len(),
        "skipped": skips.len(),
        "cache": cache_path.display().to_string(),
        "sidecar": sidecar_path.display().to_string(),
    }));
    Ok(())
}

// -------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat key = value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training posts (JSONL).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Reasoning-trace cache produced by `cotgen`. Required for the
    /// cot, multitask, and dynamic strategies.
    #[arg(long)]
    pub cot_cache: Option<PathBuf>,
    /// Output directory for checkpoint.json and train_log.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// sft | cot | multitask | dynamic.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Probe-loss threshold for the dynamic strategy; `inf` always
    /// routes to reasoning targets, 0 never does.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// fixed | running_average.
    #[arg(long)]
    pub gamma_mode: Option<String>,
    /// per_step | per_epoch.
    #[arg(long)]
    pub probe_timing: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cosine-decay floor as a fraction of the initial rate, in [0, 1].
    #[arg(long)]
    pub final_lr_fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Model width (must be divisible by --heads).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Feed-forward hidden width.
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Also save checkpoint_step_N.json every N optimizer steps (0 = off).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

pub fn run_train(a: TrainArgs) -> Result<(), CliError> {
    let file = load_config(a.config.as_deref())?;
    let mut r = Resolver::new(&file);
    let train_path = r.required_path("train", a.train)?;
    let cot_cache = r.optional_path("cot_cache", a.cot_cache);
    let out = r.required_path("out", a.out)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        strategy: r.keyword("strategy", a.strategy, d.strategy)?,
        gamma: r.value("gamma", a.gamma, d.gamma)?,
        gamma_mode: r.keyword("gamma_mode", a.gamma_mode, d.gamma_mode)?,
        probe_timing: r.keyword("probe_timing", a.probe_timing, d.probe_timing)?,
        lr: r.value("lr", a.lr, d.lr)?,
        final_lr_fraction: r.value("final_lr_fraction", a.final_lr_fraction, d.final_lr_fraction)?,
        epochs: r.value("epochs", a.epochs, d.epochs)?,
        seed: r.value("seed", a.seed, d.seed)?,
        beta1: r.value("beta1", a.beta1, d.beta1)?,
        beta2: r.value("beta2", a.beta2, d.beta2)?,
        eps: r.value("eps", a.eps, d.eps)?,
        weight_decay: r.value("weight_decay", a.weight_decay, d.weight_decay)?,
        batch_size: r.value("batch_size", a.batch_size, d.batch_size)?,
    };
    cfg.validate()?;
    let layers = r.value("layers", a.layers, 2usize)?;
    let heads = r.value("heads", a.heads, 4usize)?;
    let dim = r.value("dim", a.dim, 64usize)?;
    let ff_dim = r.value("ff_dim", a.ff_dim, 128usize)?;
    let max_seq_len = r.value("max_seq_len", a.max_seq_len, 192usize)?;
    let checkpoint_every = r.value("checkpoint_every", a.checkpoint_every, 0usize)?;

    if cfg.strategy != Strategy::Sft && cot_cache.is_none() {
        return Err(CliError::Usage(format!(
            "strategy {} trains on reasoning targets; pass --cot-cache",
            cfg.strategy
        )));
    }
    let train = read_dataset(&train_path)?;
    let records = match &cot_cache {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Data(format!("no such file: {}", p.display())));
            }
            cotgen::read_cot_cache(p)?
        }
        None => Vec::new(),
    };
    let vocabulary = cotgen::training_vocabulary(&train.posts, &records, image_symbol_count(&train.posts));
    let model_cfg = ModelConfig {
        layers,
        heads,
        dim,
        ff_dim,
        max_seq_len,
        vocab_size: vocabulary.len(),
    };
    model_cfg.validate()?;
    let params = dyncot::model::TransformerParams::<f32>::init(&model_cfg, cfg.seed)?;
    let n_params = params.param_count();
    let pairs = trainer::build_example_pairs(&train.posts, &records, &vocabulary, model_cfg.max_seq_len)?;

    ensure_dir(&out)?;
    let mut observer = |st: &trainer::TrainState| -> dyncot::Result<()> {
        if checkpoint_every > 0 && st.step % checkpoint_every == 0 {
            let path = out.join(format!("checkpoint_step_{:06}.json", st.step));
            save_checkpoint(&path, &model_cfg, &vocabulary, &st.params)?;
        }
        Ok(())
    };
    let outcome = trainer::run_training(&cfg, &model_cfg, params, &pairs, Some(&mut observer))?;

    let ckpt_path = out.join("checkpoint.json");
    let log_path = out.join("train_log.jsonl");
    save_checkpoint(&ckpt_path, &model_cfg, &vocabulary, &outcome.params)?;
    trainer::write_train_log(&outcome.log, &log_path)?;
    r.write_echo(&out, "train")?;
    let averages = trainer::epoch_averages(&outcome.log);
    for (epoch, mean) in &averages {
        println!("epoch {epoch}: mean train loss {mean:.4}");
    }
    print_summary(json!({
        "command": "train",
        "strategy": cfg.strategy.to_string(),
        "steps": outcome.log.len(),
        "epochs": cfg.epochs,
        "model_params": n_params,
        "final_epoch_mean_loss": averages.last().map(|(_, m)| *m),
        "checkpoint": ckpt_path.display().to_string(),
        "log": log_path.display().to_string(),
    }));
    Ok(())
}

// --------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Flat key = value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Train split used to decide which test keyphrases count as seen.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Test split to decode and score.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory for predictions.jsonl and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Decode budget per post, in tokens.
    #[arg(long)]
    pub max_new: Option<usize>,
    /// Run label recorded in the report (e.g. the strategy name).
    #[arg(long)]
    pub label: Option<String>,
}

pub fn run_eval(a: EvalArgs) -> Result<(), CliError> {
    let file = load_config(a.config.as_deref())?;
    let mut r = Resolver::new(&file);
    let ckpt_path = r.required_path("checkpoint", a.checkpoint)?;
    let train_path = r.required_path("train", a.train)?;
    let test_path = r.required_path("test", a.test)?;
    let out = r.required_path("out", a.out)?;
    let max_new = r.value("max_new", a.max_new, 64usize)?;
    let label = r.value("label", a.label, "model".to_string())?;
    if !ckpt_path.exists() {
        return Err(CliError::Data(format!("no such file: {}", ckpt_path.display())));
    }
    let (model_cfg, vocabulary, params) = load_checkpoint(&ckpt_path)?;
    let train = read_dataset(&train_path)?;
    let test = read_dataset(&test_path)?;
    let labels = corpus::label_slices(&train, &test);
    let evaluation = eval::evaluate(&params, &model_cfg, &test, &labels, &vocabulary, max_new, &label)?;
    ensure_dir(&out)?;
    let pred_path = out.join("predictions.jsonl");
    let report_path = out.join("report.json");
    eval::write_predictions(&evaluation.predictions, &pred_path)?;
    write_text(
        &report_path,
        &serde_json::to_string_pretty(&evaluation.report).expect("report serialize"),
    )?;
    r.write_echo(&out, "eval")?;
    print!("{}", evaluation.report.table());
    let rep = &evaluation.report;
    print_summary(json!({
        "command": "eval",
        "label": rep.strategy,
        "all_f1_1": rep.all.f1_1,
        "all_f1_m": rep.all.f1_m,
        "seen_f1_1": rep.seen.f1_1,
        "unseen_f1_1": rep.unseen.f1_1,
        "absent_f1_1": rep.absent.f1_1,
        "mean_output_words": rep.mean_output_words,
        "excluded": rep.excluded,
        "predictions": pred_path.display().to_string(),
        "report": report_path.display().to_string(),
    }));
    Ok(())
}
