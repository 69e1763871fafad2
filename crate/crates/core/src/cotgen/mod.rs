//! CoT data production: teacher prompt rendering, a deterministic
//! offline oracle teacher, a remote teacher pipeline with bounded
//! parallelism, response assembly, and training-example building.
//!
//! One CoT record per post, generated once and cached as JSONL, keeps
//! training deterministic and offline.

pub mod teacher;

pub use teacher::{
    remote_generate, SkipRecord, TeacherEndpoint, TeacherError, TeacherFailure, TeacherReply,
    TeacherRequest,
};

use crate::corpus::Post;
use crate::error::{Error, Result};
use crate::model::vocab::{self, Role, TokenSequence, Vocabulary};
use crate::model::{SupervisionMode, TrainingExample};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Verbatim teacher prompt. The three slots take the comma-joined gold
/// keyphrases, the post text, and the space-joined image symbols.
pub const TEACHER_PROMPT_TEMPLATE: &str = "[INST]<SYS>\n\
You are a helpful assistant. Analyze briefly why social media users would use specific hashtags \
\"Keyphrases\" for a post titled \"Post text\" with given image \"Image\".</SYS>\n\
<USER>\n\
\"Keyphrases\": {keyphrases}\n\
\"Post text\": {post text}\n\
\"Image\": {image}\n\
</USER>[INST]";

/// Instruction prefix of every student prompt.
pub const STUDENT_INSTRUCTION: &str = "suggest keyphrases for this post";

/// Delimiter between keyphrases inside `<answer>`; semicolons avoid
/// collision with commas inside phrases.
pub const KEYPHRASE_DELIMITER: &str = "; ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Oracle,
    Remote,
}

impl std::fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TeacherKind::Oracle => "oracle",
            TeacherKind::Remote => "remote",
        })
    }
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<TeacherKind> {
        match s {
            "oracle" => Ok(TeacherKind::Oracle),
            "remote" => Ok(TeacherKind::Remote),
            other => Err(Error::Config(format!(
                "unknown teacher kind {other:?}: expected oracle or remote"
            ))),
        }
    }
}

/// One cached reasoning trace. The teacher analyzes the given gold
/// keyphrases, it does not invent them, so `answer_keyphrases` mirrors
/// the post's gold list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotRecord {
    pub post_id: String,
    pub think: String,
    pub answer_keyphrases: Vec<String>,
    pub teacher: TeacherKind,
    pub created_at: String,
}

/// Fills the teacher prompt template byte-exactly.
pub fn render_prompt(post: &Post) -> Result<String> {
    if post.keyphrases.is_empty() {
        return Err(Error::Config(format!(
            "post {} has no keyphrases to render a teacher prompt for",
            post.id
        )));
    }
    Ok(TEACHER_PROMPT_TEMPLATE
        .replace("{keyphrases}", &post.keyphrases.join(", "))
        .replace("{post text}", &post.text)
        .replace("{image}", &post.image_tokens.join(" ")))
}

/// Strips reserved special-token literals (including `<img:k>`) from
/// teacher text and collapses whitespace, so no teacher output can
/// corrupt the response grammar. Stripping repeats until a pass removes
/// nothing, because deleting a literal can splice its neighbours into a
/// new one (`</thi<img:0>nk>` becomes `</think>` after one pass).
pub fn sanitize_teacher_text(text: &str) -> String {
    let mut current = text.to_string();
    loop {
        let mut kept = String::with_capacity(current.len());
        let mut i = 0;
        let mut stripped = false;
        while i < current.len() {
            if let Some(len) = vocab::special_at(&current, i) {
                i += len;
                stripped = true;
            } else {
                let ch = current[i..].chars().next().expect("in bounds");
                kept.push(ch);
                i += ch.len_utf8();
            }
        }
        if !stripped {
            return kept.split_whitespace().collect::<Vec<_>>().join(" ");
        }
        current = kept;
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn count_words(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Deterministic offline teacher: names salient text words and image
/// symbols, gives one rationale sentence per gold keyphrase (mentioning
/// the phrase exactly once), and pads with neutral filler to 30..=41
/// words. Same post and seed always yield the same text.
pub fn oracle_generate(post: &Post, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(post.id.as_bytes()));
    let kp_words: HashSet<String> = post
        .keyphrases
        .iter()
        .flat_map(|k| k.split_whitespace())
        .map(|w| w.to_lowercase())
        .collect();
    let mut salient: Vec<String> = Vec::new();
    for w in post.text.split_whitespace() {
        let w = w.to_lowercase();
        if !kp_words.contains(&w) && !salient.contains(&w) {
            salient.push(w);
        }
    }
    if salient.is_empty() {
        salient.push("little".to_string());
    }
    let pick = |rng: &mut ChaCha8Rng, v: &[String]| v[rng.random_range(0..v.len())].clone();
    let image = post
        .image_tokens
        .first()
        .and_then(|t| t.strip_prefix("<img:"))
        .and_then(|t| t.strip_suffix('>'))
        .map(|k| format!("image symbol {k}"))
        .unwrap_or_else(|| "plain backdrop".to_string());

    let w1 = pick(&mut rng, &salient);
    let w2 = pick(&mut rng, &salient);
    let openers = [
        format!("the post builds around {w1} and {w2} while the attached {image} sets the scene."),
        format!("at a glance the text repeats {w1} next to {w2} and the {image} echoes that."),
        format!("the wording leans on {w1} together with {w2} and the {image} backs that reading."),
    ];
    let mut sentences = vec![openers[rng.random_range(0..openers.len())].clone()];
    for kp in &post.keyphrases {
        let w = pick(&mut rng, &salient);
        let forms = [
            format!("users reach for the tag {kp} because the text keeps circling {w}."),
            format!("the tag {kp} fits since {w} dominates the phrasing."),
            format!("{kp} is the natural label once {w} shows up this often."),
        ];
        sentences.push(forms[rng.random_range(0..forms.len())].clone());
    }
    let fillers = [
        "similar posts carry the same tags so the habit repeats.",
        "the casual tone files it under familiar labels.",
        "nothing in the post pushes against that choice.",
        "the strongest cue words make the topic easy to pin down.",
        "picture and text point the same way which settles it.",
        "short posts get tagged by their loudest cue.",
    ];
    let target = 30 + rng.random_range(0..12);
    let mut fi = rng.random_range(0..fillers.len());
    while count_words(&sentences.join(" ")) < target {
        sentences.push(fillers[fi].to_string());
        fi = (fi + 1) % fillers.len();
    }
    sanitize_teacher_text(&sentences.join(" "))
}

/// `<think>` + think + `</think>` + single space + `<answer>` +
/// delimiter-joined keyphrases + `</answer>`.
pub fn assemble_response(think: &str, keyphrases: &[String]) -> String {
    format!(
        "{}{think}{} {}{}{}",
        vocab::THINK_OPEN,
        vocab::THINK_CLOSE,
        vocab::ANSWER_OPEN,
        keyphrases.join(KEYPHRASE_DELIMITER),
        vocab::ANSWER_CLOSE
    )
}

/// Student prompt tokens for a post: `<bos>` + instruction + image
/// tokens + post text + `<sep>`. Identical across plain and CoT modes,
/// so target switching changes supervision only.
pub fn build_prompt_sequence(post: &Post, vocabulary: &Vocabulary) -> TokenSequence {
    let mut seq = TokenSequence::new();
    seq.push(vocab::BOS_ID, Role::Prompt);
    let instr = vocab::tokenize(STUDENT_INSTRUCTION, vocabulary);
    seq.extend(instr.ids, Role::Prompt);
    for tok in &post.image_tokens {
        seq.push(vocabulary.id_or_unk(tok), Role::Image);
    }
    let text = vocab::tokenize(&post.text, vocabulary);
    seq.extend(text.ids, Role::Prompt);
    seq.push(vocab::SEP_ID, Role::Prompt);
    seq
}

/// Builds the word-id space a training run needs: the student
/// instruction, every post text, every gold keyphrase (absent phrases
/// may use words that appear in no post text), and every cached
/// reasoning text. Sources are fed in a fixed order so the id
/// assignment is deterministic.
pub fn training_vocabulary(
    posts: &[Post],
    cot_records: &[CotRecord],
    image_symbols: usize,
) -> Vocabulary {
    let mut sources: Vec<&str> = vec![STUDENT_INSTRUCTION];
    for p in posts {
        sources.push(&p.text);
        for k in &p.keyphrases {
            sources.push(k);
        }
    }
    for r in cot_records {
        sources.push(&r.think);
        for k in &r.answer_keyphrases {
            sources.push(k);
        }
    }
    Vocabulary::build(sources, image_symbols)
}

/// Builds the supervised example for one post in one mode. The mask is
/// true exactly on target positions (target tokens plus the closing
/// `<eos>`).
pub fn build_training_example(
    post: &Post,
    mode: SupervisionMode,
    cot: Option<&CotRecord>,
    vocabulary: &Vocabulary,
    max_seq_len: usize,
) -> Result<TrainingExample> {
    let prompt = build_prompt_sequence(post, vocabulary);
    let target_text = match mode {
        SupervisionMode::Plain => post.keyphrases.join(KEYPHRASE_DELIMITER),
        SupervisionMode::Cot => {
            let rec = cot.ok_or_else(|| {
                Error::Config(format!("cot-mode example for post {} requires a CoT record", post.id))
            })?;
            assemble_response(&rec.think, &rec.answer_keyphrases)
        }
    };
    let target = vocab::tokenize(&target_text, vocabulary);
    let mut ids = prompt.ids;
    let mut mask = vec![false; ids.len()];
    ids.extend(&target.ids);
    mask.extend(std::iter::repeat(true).take(target.ids.len()));
    ids.push(vocab::EOS_ID);
    mask.push(true);
    // the loss shifts by one, so n tokens fit a model of max length n-1
    if ids.len() > max_seq_len + 1 {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: max_seq_len + 1,
            post_id: Some(post.id.clone()),
        });
    }
    Ok(TrainingExample {
        post_id: post.id.clone(),
        mode,
        ids,
        mask,
    })
}

/// Generates oracle records for every post, in post order.
pub fn oracle_records(posts: &[Post], seed: u64, created_at: &str) -> Vec<CotRecord> {
    posts
        .iter()
        .map(|p| CotRecord {
            post_id: p.id.clone(),
            think: oracle_generate(p, seed),
            answer_keyphrases: p.keyphrases.clone(),
            teacher: TeacherKind::Oracle,
            created_at: created_at.to_string(),
        })
        .collect()
}

/// Fetches remote records with at most `endpoint.parallel` in-flight
/// requests. Results and skips come back in post order regardless of
/// completion order; a failed post never aborts the batch.
pub fn remote_records(
    posts: &[Post],
    endpoint: &TeacherEndpoint,
    created_at: &str,
) -> Result<(Vec<CotRecord>, Vec<SkipRecord>)> {
    let client = reqwest::blocking::Client::new();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<std::result::Result<TeacherReply, TeacherFailure>>>> =
        Mutex::new((0..posts.len()).map(|_| None).collect());
    let workers = endpoint.parallel.clamp(1, posts.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= posts.len() {
                    break;
                }
                let outcome = render_prompt(&posts[i])
                    .map_err(|e| TeacherFailure {
                        error: TeacherError::Malformed(e.to_string()),
                        attempts: 0,
                    })
                    .and_then(|prompt| {
                        let req = TeacherRequest::new(posts[i].id.clone(), prompt);
                        remote_generate(&client, &req, endpoint)
                    });
                slots.lock().expect("no poisoned worker")[i] = Some(outcome);
            });
        }
    });
    let mut records = Vec::new();
    let mut skips = Vec::new();
    let slots = slots.into_inner().expect("workers joined");
    for (post, slot) in posts.iter().zip(slots) {
        match slot.expect("every index visited") {
            Ok(reply) => {
                let think = sanitize_teacher_text(&reply.think);
                if think.is_empty() {
                    skips.push(SkipRecord {
                        post_id: post.id.clone(),
                        reason: "teacher text empty after sanitization".into(),
                        attempts: reply.attempts,
                    });
                } else {
                    records.push(CotRecord {
                        post_id: post.id.clone(),
                        think,
                        answer_keyphrases: post.keyphrases.clone(),
                        teacher: TeacherKind::Remote,
                        created_at: created_at.to_string(),
                    });
                }
            }
            Err(failure) => skips.push(SkipRecord {
                post_id: post.id.clone(),
                reason: failure.error.to_string(),
                attempts: failure.attempts,
            }),
        }
    }
    Ok((records, skips))
}

/// One record per line; think must be non-empty and post ids unique.
pub fn read_cot_cache(path: &Path) -> Result<Vec<CotRecord>> {
    let file = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
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
        let rec: CotRecord = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        if rec.think.trim().is_empty() {
            return Err(perr(format!("record {} has an empty think", rec.post_id)));
        }
        if !seen.insert(rec.post_id.clone()) {
            return Err(perr(format!("duplicate CoT record for post {}", rec.post_id)));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_cot_cache(records: &[CotRecord], path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::json(ctx(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn write_sidecar(skips: &[SkipRecord], path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    for rec in skips {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::json(ctx(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads a skip sidecar back, one record per line.
pub fn read_sidecar_lines(path: &Path) -> Result<Vec<SkipRecord>> {
    let file = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut skips = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SkipRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        skips.push(rec);
    }
    Ok(skips)
}
