//! Word-level vocabulary with reserved special tokens.
//!
//! Ids are assigned in a fixed order: the nine special literals, then
//! the contiguous image-symbol block `<img:0>..<img:K-1>`, then the
//! corpus words sorted lexicographically. Tokenization lowercases,
//! splits on whitespace, and additionally splits out special literals
//! and `;` so that detokenized text re-tokenizes to the same ids.

use crate::error::{Error, Result};
use std::collections::HashMap;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Fixed id order of the special literals.
pub const SPECIALS: [&str; 9] = [
    PAD,
    BOS,
    EOS,
    SEP,
    UNK,
    THINK_OPEN,
    THINK_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
];

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const THINK_OPEN_ID: u32 = 5;
pub const THINK_CLOSE_ID: u32 = 6;
pub const ANSWER_OPEN_ID: u32 = 7;
pub const ANSWER_CLOSE_ID: u32 = 8;

const IMG_BASE: u32 = SPECIALS.len() as u32;

pub fn img_token(k: usize) -> String {
    format!("<img:{k}>")
}

/// Parses `<img:k>` back to `k`; `None` for any other token.
pub fn img_index(token: &str) -> Option<usize> {
    token.strip_prefix("<img:")?.strip_suffix('>')?.parse().ok()
}

fn starts_with_ci(rest: &str, lit: &str) -> bool {
    rest.len() >= lit.len() && rest.as_bytes()[..lit.len()].eq_ignore_ascii_case(lit.as_bytes())
}

/// Length in bytes of the special literal or `<img:k>` token starting at
/// byte `i` of `chunk`, if any. `i` must be a char boundary. Matching is
/// ASCII case-insensitive so text sanitizers catch uppercased literals
/// before the lowercasing tokenizer would turn them into real specials.
pub(crate) fn special_at(chunk: &str, i: usize) -> Option<usize> {
    let rest = &chunk[i..];
    if !rest.starts_with('<') {
        return None;
    }
    for s in SPECIALS {
        if starts_with_ci(rest, s) {
            return Some(s.len());
        }
    }
    if starts_with_ci(rest, "<img:") {
        let after = &rest["<img:".len()..];
        let digits = after.bytes().take_while(|b| b.is_ascii_digit()).count();
        if digits > 0 && after.as_bytes().get(digits) == Some(&b'>') {
            return Some("<img:".len() + digits + 1);
        }
    }
    None
}

/// Lowercases and splits text into word tokens. Special literals and
/// `;` become their own tokens even when glued to neighbors, so
/// `"<think>fresh snow; roads"` yields
/// `["<think>", "fresh", "snow", ";", "roads"]`.
pub fn pretokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut buf = String::new();
        let mut i = 0;
        while i < chunk.len() {
            if let Some(len) = special_at(chunk, i) {
                if !buf.is_empty() {
                    out.push(std::mem::take(&mut buf));
                }
                out.push(chunk[i..i + len].to_string());
                i += len;
            } else if chunk[i..].starts_with(';') {
                if !buf.is_empty() {
                    out.push(std::mem::take(&mut buf));
                }
                out.push(";".to_string());
                i += 1;
            } else {
                let ch = chunk[i..].chars().next().expect("in bounds");
                buf.push(ch);
                i += ch.len_utf8();
            }
        }
        if !buf.is_empty() {
            out.push(buf);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_of: Vec<String>,
    id_of: HashMap<String, u32>,
    image_symbols: usize,
}

impl Vocabulary {
    /// Builds the id space from raw text sources: every word token seen
    /// in any source gets an id. `;` is always included since target
    /// strings join keyphrases with it.
    pub fn build<I, S>(sources: I, image_symbols: usize) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words = std::collections::BTreeSet::new();
        words.insert(";".to_string());
        for src in sources {
            for tok in pretokenize(src.as_ref()) {
                if special_at(&tok, 0) != Some(tok.len()) {
                    words.insert(tok);
                }
            }
        }
        let mut token_of: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        token_of.extend((0..image_symbols).map(img_token));
        token_of.extend(words);
        Self::from_token_list(token_of, image_symbols)
    }

    fn from_token_list(token_of: Vec<String>, image_symbols: usize) -> Vocabulary {
        let id_of = token_of
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_of,
            id_of,
            image_symbols,
        }
    }

    /// Rebuilds a vocabulary from an id-ordered token list (checkpoint
    /// load path), validating the reserved layout.
    pub fn from_id_ordered(tokens: Vec<String>, image_symbols: usize) -> Result<Vocabulary> {
        if tokens.len() < SPECIALS.len() + image_symbols {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens cannot hold {} specials and {image_symbols} image symbols",
                tokens.len(),
                SPECIALS.len()
            )));
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Config(format!(
                    "vocabulary slot {i} holds {:?}, expected special {want:?}",
                    tokens[i]
                )));
            }
        }
        for k in 0..image_symbols {
            let want = img_token(k);
            let got = &tokens[SPECIALS.len() + k];
            if *got != want {
                return Err(Error::Config(format!(
                    "vocabulary slot {} holds {got:?}, expected {want:?}",
                    SPECIALS.len() + k
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t) {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self::from_token_list(tokens, image_symbols))
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn image_symbols(&self) -> usize {
        self.image_symbols
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn img_id(&self, k: usize) -> Option<u32> {
        (k < self.image_symbols).then(|| IMG_BASE + k as u32)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.token_of
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::TokenOutOfRange {
                id,
                size: self.token_of.len(),
            })
    }

    pub fn is_image_id(&self, id: u32) -> bool {
        id >= IMG_BASE && (id as usize) < IMG_BASE as usize + self.image_symbols
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }
}

/// Where a token sits in the prompt/response structure of an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Image,
    Response,
}

/// Token ids paired with their structural roles.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub roles: Vec<Role>,
}

impl Default for TokenSequence {
    fn default() -> Self {
        Self::new()
    }
}

impl TokenSequence {
    pub fn new() -> Self {
        TokenSequence {
            ids: Vec::new(),
            roles: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u32, role: Role) {
        self.ids.push(id);
        self.roles.push(role);
    }

    pub fn extend(&mut self, ids: impl IntoIterator<Item = u32>, role: Role) {
        for id in ids {
            self.push(id, role);
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercase, whitespace-split word tokenization; unknown words map to
/// `<unk>`. Image tokens get the Image role, everything else Prompt.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut seq = TokenSequence::new();
    for tok in pretokenize(text) {
        let id = vocab.id_or_unk(&tok);
        let role = if vocab.is_image_id(id) {
            Role::Image
        } else {
            Role::Prompt
        };
        seq.push(id, role);
    }
    seq
}

/// Inverse of [`tokenize`] up to whitespace normalization: tokens joined
/// by single spaces. Errors on ids outside the vocabulary.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for (i, &id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(vocab.token(id)?);
    }
    Ok(out)
}
