//! Synthetic multi-modal keyphrase corpora with controllable overlap.
//!
//! Each keyphrase type owns a disjoint set of surface words plus a bag
//! of filler words and two preferred image symbols. Posts draw text
//! from the bags of their gold keyphrases, insert each present
//! keyphrase as a contiguous word run, and omit the surface words of
//! absent keyphrases entirely, so present/absent labels are exact by
//! construction. Train/test keyphrase overlap is planned at the type
//! level: the test split covers all its planned types, which pins the
//! overlap rate to planned-seen / (planned-seen + unseen).

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    pub image_tokens: Vec<String>,
    pub keyphrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub posts: Vec<Post>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, posts: Vec<Post>) -> Self {
        Dataset {
            name: name.into(),
            posts,
        }
    }

    /// Normalized gold keyphrase types over the whole split.
    pub fn kp_types(&self) -> BTreeSet<String> {
        self.posts
            .iter()
            .flat_map(|p| p.keyphrases.iter())
            .map(|k| normalize_keyphrase(k))
            .collect()
    }
}

/// Lowercased, whitespace-collapsed form used for all keyphrase
/// comparisons.
pub fn normalize_keyphrase(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// True when the keyphrase occurs as a contiguous word run in the
/// normalized post text.
pub fn present_in_text(keyphrase: &str, text: &str) -> bool {
    let kp: Vec<String> = keyphrase.split_whitespace().map(|w| w.to_lowercase()).collect();
    if kp.is_empty() {
        return false;
    }
    let words: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
    words.windows(kp.len()).any(|w| w == kp.as_slice())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub kp_vocab_size: usize,
    /// Target fraction of unique test keyphrases absent from train.
    pub unseen_fraction: f64,
    /// Per-(post, keyphrase) probability that the phrase is absent from
    /// the post text.
    pub absent_fraction: f64,
    /// Mean gold keyphrases per post, in [1, 2].
    pub kp_per_post_mean: f64,
    pub image_symbols: usize,
    pub image_len: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_train: 2000,
            n_test: 400,
            kp_vocab_size: 120,
            unseen_fraction: 0.45,
            absent_fraction: 0.25,
            kp_per_post_mean: 1.3,
            image_symbols: 16,
            image_len: 6,
            seed: 17,
        }
    }
}

const MAX_KP_VOCAB: usize = 5000;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InfeasibleSpec(m));
        if self.n_train == 0 || self.n_test == 0 {
            return err("n_train and n_test must be positive".into());
        }
        if self.kp_vocab_size == 0 || self.kp_vocab_size > MAX_KP_VOCAB {
            return err(format!(
                "kp_vocab_size must be in 1..={MAX_KP_VOCAB}, got {}",
                self.kp_vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.unseen_fraction) || !(0.0..=1.0).contains(&self.absent_fraction) {
            return err("unseen_fraction and absent_fraction must lie in [0, 1]".into());
        }
        if !(1.0..=2.0).contains(&self.kp_per_post_mean) {
            return err(format!(
                "kp_per_post_mean must lie in [1, 2], got {}",
                self.kp_per_post_mean
            ));
        }
        if self.image_symbols < 2 {
            return err("need at least 2 image symbols".into());
        }
        if self.image_len == 0 {
            return err("image_len must be positive".into());
        }
        Ok(())
    }
}

// Fixed-width syllables make concatenation injective, so pseudo-words
// never collide.
const SYLLABLES: [&str; 24] = [
    "ba", "be", "bo", "bu", "da", "de", "do", "du", "ka", "ke", "ko", "ku", "ma", "me", "mo",
    "mu", "ra", "re", "ro", "ru", "ta", "te", "to", "tu",
];

fn pseudo_word(i: usize) -> String {
    let n = SYLLABLES.len();
    format!(
        "{}{}{}",
        SYLLABLES[(i / (n * n)) % n],
        SYLLABLES[(i / n) % n],
        SYLLABLES[i % n]
    )
}

const FILLER_POOL: usize = 120;
// Surface words start well past the filler range: disjoint by layout.
const SURFACE_BASE: usize = 2048;

struct KpType {
    phrase: String,
    bag: Vec<String>,
    preferred_imgs: [usize; 2],
}

fn filler_word(i: usize) -> String {
    pseudo_word(i % FILLER_POOL)
}

/// Popularity weights over `n` ranked types, heavier head.
fn popularity_weights(n: usize) -> Vec<f64> {
    (0..n).map(|j| 1.0 / (1.0 + j as f64).powf(0.7)).collect()
}

fn sample_weighted(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().expect("non-empty");
    let x: f64 = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1)
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Generates a train/test pair from a [`GenSpec`]. Deterministic in the
/// seed: the same settings yield byte-identical datasets.
pub fn generate_synthetic(spec: &GenSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let v = spec.kp_vocab_size;
    let unseen = (spec.unseen_fraction * v as f64).round() as usize;
    let seen_pool = v - unseen;
    if seen_pool == 0 {
        return Err(Error::InfeasibleSpec(format!(
            "unseen_fraction {} marks all {v} keyphrases unseen, leaving none for training",
            spec.unseen_fraction
        )));
    }
    if spec.n_train < seen_pool {
        return Err(Error::InfeasibleSpec(format!(
            "n_train {} cannot cover the {seen_pool} training keyphrase types",
            spec.n_train
        )));
    }
    if unseen > spec.n_test {
        return Err(Error::InfeasibleSpec(format!(
            "n_test {} cannot cover the {unseen} unseen keyphrase types",
            spec.n_test
        )));
    }
    // Planned seen types in test, sized so that unseen/(seen+unseen)
    // tracks unseen_fraction, capped by coverage capacity.
    let seen_planned = if unseen == 0 {
        seen_pool.min(spec.n_test)
    } else {
        let target = (unseen as f64 * (1.0 - spec.unseen_fraction) / spec.unseen_fraction).round() as usize;
        target.min(seen_pool).min(spec.n_test - unseen)
    };
    if seen_planned == 0 {
        return Err(Error::InfeasibleSpec(
            "test split would contain no keyphrases seen in training; \
             lower unseen_fraction or raise n_test"
                .into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut surface_next = SURFACE_BASE;
    let types: Vec<KpType> = (0..v)
        .map(|i| {
            let n_words = if i % 5 < 2 { 2 } else { 1 };
            let words: Vec<String> = (0..n_words)
                .map(|_| {
                    let w = pseudo_word(surface_next);
                    surface_next += 1;
                    w
                })
                .collect();
            let mut bag: Vec<String> = Vec::with_capacity(6);
            while bag.len() < 6 {
                let w = filler_word(rng.random_range(0..FILLER_POOL));
                if !bag.contains(&w) {
                    bag.push(w);
                }
            }
            let a = rng.random_range(0..spec.image_symbols);
            let mut b = rng.random_range(0..spec.image_symbols);
            while b == a {
                b = rng.random_range(0..spec.image_symbols);
            }
            KpType {
                phrase: words.join(" "),
                bag,
                preferred_imgs: [a, b],
            }
        })
        .collect();

    // Types 0..seen_pool are rankable by popularity; the tail
    // seen_pool..v is test-only (unseen). Popular head types are the
    // ones planned into test, leaving an unpopular train-exclusive
    // surplus for the resampler to exploit.
    let train_cum = cumulative(&popularity_weights(seen_pool));
    let test_plan: Vec<usize> = (0..seen_planned).chain(seen_pool..v).collect();
    let plan_cum = cumulative(&popularity_weights(test_plan.len()));

    let two_kp_prob = spec.kp_per_post_mean - 1.0;
    let make_post = |rng: &mut ChaCha8Rng,
                         id: String,
                         primary: usize,
                         pick_second: &dyn Fn(&mut ChaCha8Rng) -> usize| {
        let mut gold = vec![primary];
        if rng.random::<f64>() < two_kp_prob {
            let mut second = pick_second(rng);
            let mut guard = 0;
            while second == primary && guard < 64 {
                second = pick_second(rng);
                guard += 1;
            }
            if second != primary {
                gold.push(second);
            }
        }
        // each bag word and each inserted keyphrase is one atomic unit:
        // later insertions go between units, so they can never split an
        // earlier keyphrase's contiguous run
        let mut units: Vec<Vec<String>> = Vec::new();
        let n_base = 6 + rng.random_range(0..5);
        for _ in 0..n_base {
            let t = &types[gold[rng.random_range(0..gold.len())]];
            units.push(vec![t.bag[rng.random_range(0..t.bag.len())].clone()]);
        }
        if rng.random::<f64>() < 0.5 {
            units.push(vec![filler_word(rng.random_range(0..FILLER_POOL))]);
        }
        for &k in &gold {
            if rng.random::<f64>() < spec.absent_fraction {
                continue;
            }
            let at = rng.random_range(0..=units.len());
            let unit: Vec<String> =
                types[k].phrase.split_whitespace().map(str::to_string).collect();
            units.insert(at, unit);
        }
        let words: Vec<String> = units.into_iter().flatten().collect();
        let image_tokens: Vec<String> = (0..spec.image_len)
            .map(|_| {
                let sym = if rng.random::<f64>() < 0.75 {
                    let t = &types[gold[rng.random_range(0..gold.len())]];
                    t.preferred_imgs[rng.random_range(0..2)]
                } else {
                    rng.random_range(0..spec.image_symbols)
                };
                crate::model::vocab::img_token(sym)
            })
            .collect();
        Post {
            id,
            text: words.join(" "),
            image_tokens,
            keyphrases: gold.iter().map(|&k| types[k].phrase.clone()).collect(),
        }
    };

    let mut train_posts = Vec::with_capacity(spec.n_train);
    for i in 0..spec.n_train {
        let primary = if i < seen_pool {
            i
        } else {
            sample_weighted(&mut rng, &train_cum)
        };
        let pick = |r: &mut ChaCha8Rng| sample_weighted(r, &train_cum);
        train_posts.push(make_post(&mut rng, format!("tr{i:05}"), primary, &pick));
    }
    let mut test_posts = Vec::with_capacity(spec.n_test);
    for i in 0..spec.n_test {
        let primary = if i < test_plan.len() {
            test_plan[i]
        } else {
            test_plan[sample_weighted(&mut rng, &plan_cum)]
        };
        let pick = |r: &mut ChaCha8Rng| test_plan[sample_weighted(r, &plan_cum)];
        test_posts.push(make_post(&mut rng, format!("te{i:05}"), primary, &pick));
    }
    Ok((
        Dataset::new("train", train_posts),
        Dataset::new("test", test_posts),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train_posts: usize,
    pub test_posts: usize,
    pub avg_kp_per_post: f64,
    pub train_kp_types: usize,
    pub test_kp_types: usize,
    pub shared_kp_types: usize,
    /// shared / test types.
    pub overlap_rate: f64,
}

impl DatasetStats {
    pub fn overlap_percent_2dp(&self) -> String {
        format!("{:.2}%", self.overlap_rate * 100.0)
    }

    /// One aligned table row per corpus, headed like the usual corpus
    /// comparison tables.
    pub fn table(rows: &[(&str, &DatasetStats)]) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>10} {:>10} {:>9} {:>11}\n",
            "dataset", "#train", "#test", "#kp/post", "kp overlap"
        ));
        for (name, s) in rows {
            out.push_str(&format!(
                "{:<16} {:>10} {:>10} {:>9.2} {:>11}\n",
                name,
                thousands(s.train_posts),
                thousands(s.test_posts),
                s.avg_kp_per_post,
                s.overlap_percent_2dp()
            ));
        }
        out
    }
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Type-level overlap statistics. Errors when the test split carries no
/// gold keyphrases, which leaves the overlap rate undefined.
pub fn compute_stats(train: &Dataset, test: &Dataset) -> Result<DatasetStats> {
    let train_types = train.kp_types();
    let test_types = test.kp_types();
    if test_types.is_empty() {
        return Err(Error::UndefinedOverlap);
    }
    let shared = test_types.intersection(&train_types).count();
    let total_posts = train.posts.len() + test.posts.len();
    let total_kps: usize = train
        .posts
        .iter()
        .chain(&test.posts)
        .map(|p| p.keyphrases.len())
        .sum();
    Ok(DatasetStats {
        train_posts: train.posts.len(),
        test_posts: test.posts.len(),
        avg_kp_per_post: total_kps as f64 / total_posts as f64,
        train_kp_types: train_types.len(),
        test_kp_types: test_types.len(),
        shared_kp_types: shared,
        overlap_rate: shared as f64 / test_types.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct ResampleOutcome {
    pub train: Dataset,
    pub test: Dataset,
    pub removed: Vec<Post>,
    /// Ids moved from train to test in step 1, in original train order.
    pub moved_ids: Vec<String>,
    pub target_overlap: f64,
    pub achieved_overlap: f64,
}

/// Two-step overlap reduction. Step 1 moves every train post whose gold
/// keyphrases all fall outside the original test gold set into test.
/// Step 2 removes seeded-random test posts whose gold keyphrases are
/// all covered by the remaining train split, until the overlap drops to
/// target + 0.02 or no candidates remain. Never fails on an unreachable
/// target; the outcome reports what was achieved.
pub fn resample_v2(train: &Dataset, test: &Dataset, target: f64, seed: u64) -> Result<ResampleOutcome> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!(
            "target overlap must lie in [0, 1], got {target}"
        )));
    }
    let orig_test_types: BTreeSet<String> = test.kp_types();
    let (moved, kept): (Vec<&Post>, Vec<&Post>) = train.posts.iter().partition(|p| {
        p.keyphrases
            .iter()
            .all(|k| !orig_test_types.contains(&normalize_keyphrase(k)))
    });
    let moved_ids: Vec<String> = moved.iter().map(|p| p.id.clone()).collect();
    let new_train = Dataset::new(train.name.clone(), kept.into_iter().cloned().collect());
    let mut new_test = Dataset::new(test.name.clone(), test.posts.clone());
    new_test.posts.extend(moved.into_iter().cloned());

    let train_types = new_train.kp_types();
    let mut candidates: Vec<usize> = new_test
        .posts
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            p.keyphrases
                .iter()
                .all(|k| train_types.contains(&normalize_keyphrase(k)))
        })
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over the candidate order.
    for i in (1..candidates.len()).rev() {
        let j = rng.random_range(0..=i);
        candidates.swap(i, j);
    }

    let mut removed_idx: BTreeSet<usize> = BTreeSet::new();
    let mut achieved = compute_stats(&new_train, &new_test)?.overlap_rate;
    for &idx in &candidates {
        if achieved <= target + 0.02 {
            break;
        }
        if removed_idx.len() + 1 == new_test.posts.len() {
            break; // never empty the test split
        }
        removed_idx.insert(idx);
        let probe = Dataset::new(
            new_test.name.clone(),
            new_test
                .posts
                .iter()
                .enumerate()
                .filter(|(i, _)| !removed_idx.contains(i))
                .map(|(_, p)| p.clone())
                .collect(),
        );
        achieved = compute_stats(&new_train, &probe)?.overlap_rate;
    }
    if achieved > target + 0.02 {
        log::warn!(
            "resample target {target:.4} unreachable; achieved {achieved:.4} after exhausting candidates"
        );
    }
    let mut removed = Vec::with_capacity(removed_idx.len());
    let mut final_posts = Vec::with_capacity(new_test.posts.len() - removed_idx.len());
    for (i, p) in new_test.posts.into_iter().enumerate() {
        if removed_idx.contains(&i) {
            removed.push(p);
        } else {
            final_posts.push(p);
        }
    }
    new_test.posts = final_posts;
    Ok(ResampleOutcome {
        train: new_train,
        test: new_test,
        removed,
        moved_ids,
        target_overlap: target,
        achieved_overlap: achieved,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyphraseLabel {
    pub keyphrase: String,
    /// Occurs as a contiguous word run in the post text.
    pub present: bool,
    /// Never appears as a gold keyphrase in the train split.
    pub unseen: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostLabels {
    pub post_id: String,
    /// Every gold keyphrase of the post appears in train.
    pub seen: bool,
    pub keyphrases: Vec<KeyphraseLabel>,
}

impl PostLabels {
    pub fn has_absent(&self) -> bool {
        self.keyphrases.iter().any(|k| !k.present)
    }
}

#[derive(Debug, Clone)]
pub struct SliceLabels {
    pub posts: Vec<PostLabels>,
    index: HashMap<String, usize>,
}

impl SliceLabels {
    pub fn get(&self, post_id: &str) -> Option<&PostLabels> {
        self.index.get(post_id).map(|&i| &self.posts[i])
    }
}

/// Labels every test post and gold keyphrase for slice evaluation.
pub fn label_slices(train: &Dataset, test: &Dataset) -> SliceLabels {
    let train_types = train.kp_types();
    let posts: Vec<PostLabels> = test
        .posts
        .iter()
        .map(|p| {
            let keyphrases: Vec<KeyphraseLabel> = p
                .keyphrases
                .iter()
                .map(|k| {
                    let norm = normalize_keyphrase(k);
                    KeyphraseLabel {
                        present: present_in_text(k, &p.text),
                        unseen: !train_types.contains(&norm),
                        keyphrase: norm,
                    }
                })
                .collect();
            PostLabels {
                post_id: p.id.clone(),
                seen: keyphrases.iter().all(|k| !k.unseen),
                keyphrases,
            }
        })
        .collect();
    let index = posts
        .iter()
        .enumerate()
        .map(|(i, p)| (p.post_id.clone(), i))
        .collect();
    SliceLabels { posts, index }
}

/// One post per line. Read errors carry the 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let reader = BufReader::new(file);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let mut posts = Vec::new();
    let mut seen_ids = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let perr = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            message,
        };
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let post: Post = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        if post.keyphrases.is_empty() {
            return Err(perr(format!("post {} has no gold keyphrases", post.id)));
        }
        if let Some(first) = seen_ids.insert(post.id.clone(), line_no) {
            return Err(perr(format!(
                "duplicate post id {} (first seen at line {first})",
                post.id
            )));
        }
        posts.push(post);
    }
    Ok(Dataset::new(name, posts))
}

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    for post in &dataset.posts {
        serde_json::to_writer(&mut w, post).map_err(|e| Error::json(ctx(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}
