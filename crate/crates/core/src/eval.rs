//! Decoding-output parsing, exact-match F1 metrics over the
//! all/seen/unseen/absent slices, output-length accounting, and
//! judge-rank aggregation.

use crate::corpus::{normalize_keyphrase, Dataset, Post, SliceLabels};
use crate::cotgen::build_prompt_sequence;
use crate::error::{Error, Result};
use crate::model::vocab::{Vocabulary, ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};
use crate::model::{decode_to_text, ModelConfig, TransformerParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Total parser for generated text. Recognizes
/// `<think>…</think> <answer>…</answer>` (the space optional) and a
/// bare `<answer>…</answer>`; any other text is taken whole as the
/// answer payload. Payloads split on `;` and normalize; text after
/// `</answer>` is ignored.
pub fn parse_output(text: &str) -> (Option<String>, Vec<String>) {
    let trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix(THINK_OPEN) {
        if let Some(close) = rest.find(THINK_CLOSE) {
            let think = rest[..close].trim().to_string();
            let after = rest[close + THINK_CLOSE.len()..].trim_start();
            if let Some(payload) = answer_payload(after) {
                return (Some(think), split_keyphrases(payload));
            }
        }
    }
    if let Some(payload) = answer_payload(trimmed) {
        return (None, split_keyphrases(payload));
    }
    (None, split_keyphrases(trimmed))
}

fn answer_payload(s: &str) -> Option<&str> {
    let rest = s.strip_prefix(ANSWER_OPEN)?;
    let close = rest.find(ANSWER_CLOSE)?;
    Some(&rest[..close])
}

fn split_keyphrases(payload: &str) -> Vec<String> {
    payload
        .split(';')
        .map(normalize_keyphrase)
        .filter(|k| !k.is_empty())
        .collect()
}

fn require_gold(gold: &BTreeSet<String>) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::Config("metrics need a non-empty gold keyphrase set".into()));
    }
    Ok(())
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// F1 of the first predicted keyphrase only: precision is 0 or 1,
/// recall is matches/|gold|. Empty predictions score 0.
pub fn f1_at_1(pred: &[String], gold: &BTreeSet<String>) -> Result<f64> {
    require_gold(gold)?;
    let Some(first) = pred.first() else {
        return Ok(0.0);
    };
    let matched = if gold.contains(first) { 1.0 } else { 0.0 };
    Ok(harmonic(matched, matched / gold.len() as f64))
}

/// Set-level F1 over all predicted keyphrases; duplicate predictions
/// collapse before the set arithmetic.
pub fn f1_at_m(pred: &[String], gold: &BTreeSet<String>) -> Result<f64> {
    require_gold(gold)?;
    let unique: BTreeSet<&String> = pred.iter().collect();
    if unique.is_empty() {
        return Ok(0.0);
    }
    let hits = unique.iter().filter(|k| gold.contains(k.as_str())).count() as f64;
    let p = hits / unique.len() as f64;
    let r = hits / gold.len() as f64;
    Ok(harmonic(p, r))
}

/// One evaluated test post, persisted before aggregation so every
/// reported mean is recomputable offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub post_id: String,
    pub raw: String,
    pub think: Option<String>,
    pub keyphrases: Vec<String>,
    pub f1_1: f64,
    pub f1_m: f64,
    /// Every gold keyphrase of the post appears in the train split.
    pub seen: bool,
    /// At least one gold keyphrase is absent from the post text.
    pub absent: bool,
    /// Whitespace-separated words in the raw output.
    pub words: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub count: usize,
    pub f1_1: f64,
    pub f1_m: f64,
}

impl SliceMetrics {
    fn empty() -> Self {
        SliceMetrics {
            count: 0,
            f1_1: 0.0,
            f1_m: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub all: SliceMetrics,
    pub seen: SliceMetrics,
    pub unseen: SliceMetrics,
    pub absent: SliceMetrics,
    pub mean_output_words: f64,
    /// Posts dropped because decoding failed (for example an overlong
    /// prompt); they do not enter any mean.
    pub excluded: usize,
}

impl MetricsReport {
    /// Aligned table: one row per metric, one column per slice.
    pub fn table(&self) -> String {
        let slices = [
            ("All", &self.all),
            ("Seen", &self.seen),
            ("Unseen", &self.unseen),
            ("Absent", &self.absent),
        ];
        let mut out = format!("{:<8}{:>8}{:>8}{:>8}{:>8}\n", "", "All", "Seen", "Unseen", "Absent");
        for (label, pick) in [
            ("F1@1", 0usize),
            ("F1@M", 1),
            ("posts", 2),
        ] {
            out.push_str(&format!("{label:<8}"));
            for (_, s) in &slices {
                match pick {
                    0 => out.push_str(&format!("{:>8.4}", s.f1_1)),
                    1 => out.push_str(&format!("{:>8.4}", s.f1_m)),
                    _ => out.push_str(&format!("{:>8}", s.count)),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "mean output words {:.2}; excluded posts {}\n",
            self.mean_output_words, self.excluded
        ));
        out
    }
}

/// Deterministic fold of prediction records into per-slice means, in
/// record order. Empty slices report zero means with a zero count.
pub fn aggregate(strategy: &str, predictions: &[PredictionRecord], excluded: usize) -> MetricsReport {
    let fold = |keep: &dyn Fn(&PredictionRecord) -> bool| {
        let mut m = SliceMetrics::empty();
        for rec in predictions.iter().filter(|r| keep(r)) {
            m.count += 1;
            m.f1_1 += rec.f1_1;
            m.f1_m += rec.f1_m;
        }
        if m.count > 0 {
            m.f1_1 /= m.count as f64;
            m.f1_m /= m.count as f64;
        }
        m
    };
    let all = fold(&|_| true);
    let words: usize = predictions.iter().map(|r| r.words).sum();
    MetricsReport {
        strategy: strategy.to_string(),
        all,
        seen: fold(&|r| r.seen),
        unseen: fold(&|r| !r.seen),
        absent: fold(&|r| r.absent),
        mean_output_words: if all.count > 0 {
            words as f64 / all.count as f64
        } else {
            0.0
        },
        excluded,
    }
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRecord>,
}

fn decode_post(
    params: &TransformerParams<f32>,
    model_cfg: &ModelConfig,
    vocabulary: &Vocabulary,
    max_new: usize,
    post: &Post,
) -> Result<String> {
    let prompt = build_prompt_sequence(post, vocabulary);
    decode_to_text(params, model_cfg, vocabulary, &prompt, max_new)
}

/// Greedy-decodes every test post, parses and scores the outputs, and
/// aggregates per slice. Decoding parallelizes across posts; scoring is
/// a deterministic fold in post order either way. Posts that fail to
/// decode are logged and excluded.
pub fn evaluate(
    params: &TransformerParams<f32>,
    model_cfg: &ModelConfig,
    test: &Dataset,
    labels: &SliceLabels,
    vocabulary: &Vocabulary,
    max_new: usize,
    strategy: &str,
) -> Result<Evaluation> {
    #[cfg(feature = "parallel")]
    let decoded: Vec<Result<String>> = {
        use rayon::prelude::*;
        test.posts
            .par_iter()
            .map(|p| decode_post(params, model_cfg, vocabulary, max_new, p))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let decoded: Vec<Result<String>> = test
        .posts
        .iter()
        .map(|p| decode_post(params, model_cfg, vocabulary, max_new, p))
        .collect();

    let mut predictions = Vec::with_capacity(test.posts.len());
    let mut excluded = 0usize;
    for (post, outcome) in test.posts.iter().zip(decoded) {
        let raw = match outcome {
            Ok(raw) => raw,
            Err(e) => {
                log::warn!("excluding post {} from evaluation: {e}", post.id);
                excluded += 1;
                continue;
            }
        };
        let label = labels
            .get(&post.id)
            .ok_or_else(|| Error::Config(format!("no slice label for post {}", post.id)))?;
        let gold: BTreeSet<String> =
            post.keyphrases.iter().map(|k| normalize_keyphrase(k)).collect();
        let (think, keyphrases) = parse_output(&raw);
        let f1_1 = f1_at_1(&keyphrases, &gold)?;
        let f1_m = f1_at_m(&keyphrases, &gold)?;
        predictions.push(PredictionRecord {
            post_id: post.id.clone(),
            words: raw.split_whitespace().count(),
            raw,
            think,
            keyphrases,
            f1_1,
            f1_m,
            seen: label.seen,
            absent: label.has_absent(),
        });
    }
    let report = aggregate(strategy, &predictions, excluded);
    Ok(Evaluation {
        report,
        predictions,
    })
}

/// Column means of a rank matrix whose rows each rank models 1..=N;
/// lower is better.
pub fn aggregate_rankings(rows: &[Vec<usize>]) -> Result<Vec<f64>> {
    let n = rows.first().map(|r| r.len()).unwrap_or(0);
    if n == 0 {
        return Err(Error::Config("ranking aggregation needs at least one non-empty row".into()));
    }
    let mut sums = vec![0.0f64; n];
    for (row_idx, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidRanking { row: row_idx, n });
        }
        let mut used = vec![false; n];
        for &rank in row {
            if rank < 1 || rank > n || used[rank - 1] {
                return Err(Error::InvalidRanking { row: row_idx, n });
            }
            used[rank - 1] = true;
        }
        for (j, &rank) in row.iter().enumerate() {
            sums[j] += rank as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / rows.len() as f64).collect())
}

pub fn write_predictions(predictions: &[PredictionRecord], path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    for rec in predictions {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::json(ctx(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
