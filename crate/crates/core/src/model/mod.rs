//! Decoder-only transformer assembled from autodiff ops.
//!
//! Pre-norm blocks, learned positional embeddings, causal multi-head
//! attention without biases, GELU feed-forward with biases, untied
//! output projection. Weights init from normal(0, 0.02), layer norm
//! gains at one and an epsilon of 1e-5.

pub mod checkpoint;
pub mod vocab;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vocab::{Role, TokenSequence, Vocabulary, EOS_ID};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            dim: 128,
            ff_dim: 512,
            max_seq_len: 512,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "model extents (layers, heads, dim, ff_dim, max_seq_len) must be positive".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.vocab_size <= vocab::SPECIALS.len() {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the {} reserved specials",
                self.vocab_size,
                vocab::SPECIALS.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<E: Scalar> {
    pub ln1_gain: Tensor<E>,
    pub ln1_bias: Tensor<E>,
    pub attn_q: Tensor<E>,
    pub attn_k: Tensor<E>,
    pub attn_v: Tensor<E>,
    pub attn_out: Tensor<E>,
    pub ln2_gain: Tensor<E>,
    pub ln2_bias: Tensor<E>,
    pub ff_in: Tensor<E>,
    pub ff_in_bias: Tensor<E>,
    pub ff_out: Tensor<E>,
    pub ff_out_bias: Tensor<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<E: Scalar> {
    pub token_embedding: Tensor<E>,
    pub position_embedding: Tensor<E>,
    pub blocks: Vec<BlockParams<E>>,
    pub final_gain: Tensor<E>,
    pub final_bias: Tensor<E>,
    pub output_projection: Tensor<E>,
}

const TENSORS_PER_BLOCK: usize = 12;

/// Canonical parameter-tensor names, fixed order. Optimizer moments,
/// checkpoints, and graph leaves all follow this order; nothing numeric
/// ever iterates a hash map.
pub fn param_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec!["token_embedding".to_string(), "position_embedding".to_string()];
    for b in 0..cfg.layers {
        for field in [
            "ln1_gain",
            "ln1_bias",
            "attn_q",
            "attn_k",
            "attn_v",
            "attn_out",
            "ln2_gain",
            "ln2_bias",
            "ff_in",
            "ff_in_bias",
            "ff_out",
            "ff_out_bias",
        ] {
            names.push(format!("block{b}.{field}"));
        }
    }
    names.push("final_gain".to_string());
    names.push("final_bias".to_string());
    names.push("output_projection".to_string());
    names
}

pub fn param_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let (v, d, f, l) = (cfg.vocab_size, cfg.dim, cfg.ff_dim, cfg.max_seq_len);
    let mut shapes = vec![vec![v, d], vec![l, d]];
    for _ in 0..cfg.layers {
        shapes.extend([
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]);
    }
    shapes.extend([vec![d], vec![d], vec![d, v]]);
    shapes
}

/// Standard normal via Box-Muller over a seeded stream; sampling order
/// is part of the reproducibility contract.
fn fill_normal<E: Scalar>(rng: &mut ChaCha8Rng, t: &mut Tensor<E>, std: f64) {
    use rand::Rng;
    let mut spare: Option<f64> = None;
    for v in t.data_mut() {
        let z = match spare.take() {
            Some(z) => z,
            None => {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random::<f64>();
                let r = (-2.0 * u1.ln()).sqrt();
                let theta = std::f64::consts::TAU * u2;
                spare = Some(r * theta.sin());
                r * theta.cos()
            }
        };
        *v = E::from_f64(z * std);
    }
}

impl<E: Scalar> TransformerParams<E> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (cfg.dim, cfg.ff_dim);
        let ones = |n: usize| Tensor::new(vec![n], vec![E::ONE; n]).expect("positive extent");
        let mut normal = |shape: &[usize]| {
            let mut t = Tensor::zeros(shape);
            fill_normal(&mut rng, &mut t, INIT_STD);
            t
        };
        let token_embedding = normal(&[cfg.vocab_size, d]);
        let position_embedding = normal(&[cfg.max_seq_len, d]);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(BlockParams {
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(&[d]),
                attn_q: normal(&[d, d]),
                attn_k: normal(&[d, d]),
                attn_v: normal(&[d, d]),
                attn_out: normal(&[d, d]),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(&[d]),
                ff_in: normal(&[d, f]),
                ff_in_bias: Tensor::zeros(&[f]),
                ff_out: normal(&[f, d]),
                ff_out_bias: Tensor::zeros(&[d]),
            });
        }
        let final_gain = ones(d);
        let final_bias = Tensor::zeros(&[d]);
        let output_projection = normal(&[d, cfg.vocab_size]);
        Ok(TransformerParams {
            token_embedding,
            position_embedding,
            blocks,
            final_gain,
            final_bias,
            output_projection,
        })
    }

    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor<E>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain,
                &b.ln1_bias,
                &b.attn_q,
                &b.attn_k,
                &b.attn_v,
                &b.attn_out,
                &b.ln2_gain,
                &b.ln2_bias,
                &b.ff_in,
                &b.ff_in_bias,
                &b.ff_out,
                &b.ff_out_bias,
            ]);
        }
        out.extend([&self.final_gain, &self.final_bias, &self.output_projection]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.attn_q,
                &mut b.attn_k,
                &mut b.attn_v,
                &mut b.attn_out,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.ff_in,
                &mut b.ff_in_bias,
                &mut b.ff_out,
                &mut b.ff_out_bias,
            ]);
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.output_projection]);
        out
    }

    /// Rebuilds the struct from canonically ordered tensors, validating
    /// every shape against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<E>>) -> Result<Self> {
        cfg.validate()?;
        let shapes = param_shapes(cfg);
        let names = param_names(cfg);
        if tensors.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), n) in tensors.iter().zip(&shapes).zip(&names) {
            if t.shape() != s.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {n} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(BlockParams {
                ln1_gain: next(),
                ln1_bias: next(),
                attn_q: next(),
                attn_k: next(),
                attn_v: next(),
                attn_out: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                ff_in: next(),
                ff_in_bias: next(),
                ff_out: next(),
                ff_out_bias: next(),
            });
        }
        Ok(TransformerParams {
            token_embedding,
            position_embedding,
            blocks,
            final_gain: next(),
            final_bias: next(),
            output_projection: next(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> TransformerParams<T> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        let cfg_probe = ModelConfig {
            layers: self.blocks.len(),
            heads: 1,
            dim: self.final_gain.numel(),
            ff_dim: self.blocks.first().map(|b| b.ff_in_bias.numel()).unwrap_or(1),
            max_seq_len: self.position_embedding.shape()[0],
            vocab_size: self.token_embedding.shape()[0],
        };
        TransformerParams::from_tensors(&cfg_probe, tensors).expect("shapes mirror self")
    }
}

/// Which target string an example supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionMode {
    Plain,
    Cot,
}

impl std::fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SupervisionMode::Plain => write!(f, "plain"),
            SupervisionMode::Cot => write!(f, "cot"),
        }
    }
}

/// One supervised sequence: token ids with a mask that is true exactly
/// on the positions whose prediction is trained (the target tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub post_id: String,
    pub mode: SupervisionMode,
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Graph leaves for every parameter tensor, canonical order.
pub fn param_leaves<E: Scalar>(g: &mut Graph<E>, params: &TransformerParams<E>) -> Vec<NodeId> {
    params.tensors().into_iter().map(|t| g.leaf(t.clone())).collect()
}

struct Layout {
    layers: usize,
}

impl Layout {
    const TOK: usize = 0;
    const POS: usize = 1;
    fn block(&self, b: usize, field: usize) -> usize {
        2 + b * TENSORS_PER_BLOCK + field
    }
    fn final_gain(&self) -> usize {
        2 + self.layers * TENSORS_PER_BLOCK
    }
    fn final_bias(&self) -> usize {
        self.final_gain() + 1
    }
    fn output(&self) -> usize {
        self.final_gain() + 2
    }
}

/// Builds the logits graph for a token prefix. Every position's logits
/// depend only on positions at or before it (enforced by the causal
/// attention op and checked in tests).
pub fn build_forward<E: Scalar>(
    g: &mut Graph<E>,
    cfg: &ModelConfig,
    leaves: &[NodeId],
    ids: &[u32],
) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(Error::Config("cannot run the model on an empty sequence".into()));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_seq_len,
            post_id: None,
        });
    }
    let lay = Layout { layers: cfg.layers };
    let positions: Vec<u32> = (0..ids.len() as u32).collect();
    let tok = g.embedding(leaves[Layout::TOK], ids)?;
    let pos = g.embedding(leaves[Layout::POS], &positions)?;
    let mut x = g.add(tok, pos)?;
    for b in 0..cfg.layers {
        let f = |i: usize| leaves[lay.block(b, i)];
        let a = g.layer_norm(x, f(0), f(1), LN_EPS)?;
        let q = g.matmul(a, f(2))?;
        let k = g.matmul(a, f(3))?;
        let v = g.matmul(a, f(4))?;
        let att = g.causal_attention(q, k, v, cfg.heads)?;
        let proj = g.matmul(att, f(5))?;
        x = g.add(x, proj)?;
        let h = g.layer_norm(x, f(6), f(7), LN_EPS)?;
        let up = g.matmul(h, f(8))?;
        let up = g.add_row(up, f(9))?;
        let act = g.gelu(up);
        let down = g.matmul(act, f(10))?;
        let down = g.add_row(down, f(11))?;
        x = g.add(x, down)?;
    }
    let normed = g.layer_norm(x, leaves[lay.final_gain()], leaves[lay.final_bias()], LN_EPS)?;
    g.matmul(normed, leaves[lay.output()])
}

/// Next-token logits for a prefix, shape `[len, vocab]`.
pub fn forward<E: Scalar>(params: &TransformerParams<E>, cfg: &ModelConfig, ids: &[u32]) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let leaves = param_leaves(&mut g, params);
    let logits = build_forward(&mut g, cfg, &leaves, ids)?;
    Ok(g.value(logits).clone())
}

/// Builds the supervised loss graph: next-token cross-entropy averaged
/// over the masked-in target positions only.
pub fn build_loss<E: Scalar>(
    g: &mut Graph<E>,
    cfg: &ModelConfig,
    leaves: &[NodeId],
    example: &TrainingExample,
) -> Result<NodeId> {
    let n = example.ids.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "example {} has {n} tokens; need at least a prompt token and a target token",
            example.post_id
        )));
    }
    if example.mask.len() != n {
        return Err(Error::Config(format!(
            "example {} mask length {} does not match {n} tokens",
            example.post_id,
            example.mask.len()
        )));
    }
    if n > cfg.max_seq_len + 1 {
        return Err(Error::SequenceTooLong {
            len: n,
            max: cfg.max_seq_len + 1,
            post_id: Some(example.post_id.clone()),
        });
    }
    let inputs = &example.ids[..n - 1];
    let targets = &example.ids[1..];
    let mask = &example.mask[1..];
    let logits = build_forward(g, cfg, leaves, inputs)?;
    g.masked_cross_entropy(logits, targets, mask)
}

/// Mean masked cross-entropy of one example under fixed parameters.
pub fn sequence_loss<E: Scalar>(
    params: &TransformerParams<E>,
    cfg: &ModelConfig,
    example: &TrainingExample,
) -> Result<E> {
    let mut g = Graph::new();
    let leaves = param_leaves(&mut g, params);
    let loss = build_loss(&mut g, cfg, &leaves, example)?;
    g.value(loss).item()
}

/// Greedy continuation of a prompt. Stops at `<eos>`, at `max_new`
/// tokens, or at the model's length cap; argmax ties break toward the
/// lowest id. Returns only the generated part.
pub fn greedy_decode<E: Scalar>(
    params: &TransformerParams<E>,
    cfg: &ModelConfig,
    prompt: &TokenSequence,
    max_new: usize,
) -> Result<TokenSequence> {
    if prompt.is_empty() {
        return Err(Error::Config("cannot decode from an empty prompt".into()));
    }
    if prompt.len() >= cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            max: cfg.max_seq_len,
            post_id: None,
        });
    }
    let mut ids = prompt.ids.clone();
    let mut out = TokenSequence::new();
    while out.len() < max_new && ids.len() < cfg.max_seq_len {
        let logits = forward(params, cfg, &ids)?;
        let (t, v) = logits.dims2()?;
        let row = &logits.data()[(t - 1) * v..t * v];
        let mut best = 0usize;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        let id = best as u32;
        ids.push(id);
        out.push(id, Role::Response);
        if id == EOS_ID {
            break;
        }
    }
    Ok(out)
}

/// Decoded continuation as text, `<eos>` stripped.
pub fn decode_to_text<E: Scalar>(
    params: &TransformerParams<E>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    prompt: &TokenSequence,
    max_new: usize,
) -> Result<String> {
    let seq = greedy_decode(params, cfg, prompt, max_new)?;
    let ids: Vec<u32> = seq.ids.iter().copied().filter(|&id| id != EOS_ID).collect();
    vocab::detokenize(&ids, vocab)
}
