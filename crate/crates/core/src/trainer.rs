//! Four supervised training strategies over the transformer — plain
//! keyphrase targets, reasoning-trace targets, an interleaved mix with
//! a matched optimizer-step budget, and per-step dynamic switching that
//! routes easy posts (probe loss below a threshold) to the reasoning
//! target — plus decoupled-weight-decay adaptive-moment updates under a
//! cosine learning-rate schedule.

use crate::autodiff::Graph;
use crate::cotgen::{build_training_example, CotRecord};
use crate::corpus::Post;
use crate::error::{Error, Result};
use crate::model::vocab::Vocabulary;
use crate::model::{
    build_loss, param_leaves, sequence_loss, ModelConfig, SupervisionMode, TrainingExample,
    TransformerParams,
};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sft,
    Cot,
    Multitask,
    Dynamic,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Sft => "sft",
            Strategy::Cot => "cot",
            Strategy::Multitask => "multitask",
            Strategy::Dynamic => "dynamic",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Strategy::Sft),
            "cot" => Ok(Strategy::Cot),
            "multitask" => Ok(Strategy::Multitask),
            "dynamic" => Ok(Strategy::Dynamic),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; expected sft, cot, multitask, or dynamic"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    Fixed,
    RunningAverage,
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaMode::Fixed => "fixed",
            GammaMode::RunningAverage => "running_average",
        })
    }
}

impl std::str::FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(GammaMode::Fixed),
            "running_average" | "avg" => Ok(GammaMode::RunningAverage),
            other => Err(Error::Config(format!(
                "unknown gamma mode {other:?}; expected fixed or running_average"
            ))),
        }
    }
}

/// When dynamic routing evaluates probe losses: freshly before every
/// step (default), or once per epoch with the epoch-start parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTiming {
    PerStep,
    PerEpoch,
}

impl fmt::Display for ProbeTiming {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeTiming::PerStep => "per_step",
            ProbeTiming::PerEpoch => "per_epoch",
        })
    }
}

impl std::str::FromStr for ProbeTiming {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step" => Ok(ProbeTiming::PerStep),
            "per_epoch" => Ok(ProbeTiming::PerEpoch),
            other => Err(Error::Config(format!(
                "unknown probe timing {other:?}; expected per_step or per_epoch"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Loss threshold for dynamic routing; `inf` is the always-reason
    /// sentinel. Ignored under `gamma_mode = running_average`.
    pub gamma: f64,
    pub gamma_mode: GammaMode,
    pub probe_timing: ProbeTiming,
    pub lr: f64,
    /// Cosine schedule floor as a fraction of the initial rate.
    pub final_lr_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-sample target switching requires single-example steps.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Sft,
            gamma: 0.4,
            gamma_mode: GammaMode::Fixed,
            probe_timing: ProbeTiming::PerStep,
            lr: 5e-5,
            final_lr_fraction: 0.0,
            epochs: 1,
            seed: 17,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "gamma must be a non-negative loss threshold (inf allowed), got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(format!(
                "final_lr_fraction must lie in [0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch_size must be 1 (per-sample target switching needs single-example steps), got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Both supervision variants of one post, built against one vocabulary.
#[derive(Debug, Clone)]
pub struct ExamplePair {
    pub post_id: String,
    pub plain: TrainingExample,
    pub cot: Option<TrainingExample>,
}

/// Builds a plain example for every post, plus a reasoning example for
/// every post with a cached CoT record.
pub fn build_example_pairs(
    posts: &[Post],
    cot_records: &[CotRecord],
    vocabulary: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<ExamplePair>> {
    let by_id: BTreeMap<&str, &CotRecord> =
        cot_records.iter().map(|r| (r.post_id.as_str(), r)).collect();
    posts
        .iter()
        .map(|p| {
            let plain =
                build_training_example(p, SupervisionMode::Plain, None, vocabulary, max_seq_len)?;
            let cot = match by_id.get(p.id.as_str()) {
                Some(rec) => Some(build_training_example(
                    p,
                    SupervisionMode::Cot,
                    Some(rec),
                    vocabulary,
                    max_seq_len,
                )?),
                None => None,
            };
            Ok(ExamplePair {
                post_id: p.id.clone(),
                plain,
                cot,
            })
        })
        .collect()
}

/// The routing decision for one dynamic step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisionChoice {
    pub mode: SupervisionMode,
    pub probe_loss: f64,
    pub threshold: f64,
}

/// Plain-target loss evaluated as a pure read of the parameters; bit
/// for bit the same number [`sequence_loss`] returns.
pub fn probe_loss(
    params: &TransformerParams<f32>,
    cfg: &ModelConfig,
    plain_example: &TrainingExample,
) -> Result<f64> {
    Ok(sequence_loss(params, cfg, plain_example)?.to_f64())
}

/// Strict switch: probe < threshold routes to the reasoning target,
/// ties and above stay on the plain target.
pub fn select_target<'a>(
    probe: f64,
    gamma: f64,
    plain: &'a TrainingExample,
    cot: &'a TrainingExample,
) -> (SupervisionChoice, &'a TrainingExample) {
    let (mode, example) = if probe < gamma {
        (SupervisionMode::Cot, cot)
    } else {
        (SupervisionMode::Plain, plain)
    };
    (
        SupervisionChoice {
            mode,
            probe_loss: probe,
            threshold: gamma,
        },
        example,
    )
}

/// Cosine annealing from the initial rate down to
/// `lr * final_lr_fraction` across `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let initial = config.lr;
    let floor = config.lr * config.final_lr_fraction;
    if total_steps == 0 {
        return initial;
    }
    let frac = step as f64 / total_steps as f64;
    floor + (initial - floor) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// One JSONL line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    /// 1-based pass over the training set.
    pub epoch: usize,
    pub post_id: String,
    /// Present only under dynamic routing.
    pub probe_loss: Option<f64>,
    /// Threshold the probe was compared against (dynamic only).
    pub threshold: Option<f64>,
    pub chosen_mode: SupervisionMode,
    pub train_loss: f64,
    pub lr: f64,
}

/// First and second moment estimates, mirroring the parameter tensors
/// in canonical order.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamMoments {
    pub fn zeros_like(params: &TransformerParams<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> =
            params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamMoments {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub step: usize,
    pub params: TransformerParams<f32>,
    pub moments: AdamMoments,
    /// Count-weighted running mean of probe losses, fed only by probes.
    pub probe_sum: f64,
    pub probe_count: usize,
    pub log: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(params: TransformerParams<f32>) -> Self {
        let moments = AdamMoments::zeros_like(&params);
        TrainState {
            step: 0,
            params,
            moments,
            probe_sum: 0.0,
            probe_count: 0,
            log: Vec::new(),
        }
    }

    /// Mean of all probe losses seen so far, if any.
    pub fn running_mean(&self) -> Option<f64> {
        (self.probe_count > 0).then(|| self.probe_sum / self.probe_count as f64)
    }

    fn note_probe(&mut self, probe: f64) {
        self.probe_sum += probe;
        self.probe_count += 1;
    }
}

/// Decoupled-weight-decay adaptive-moment update, elementwise over the
/// canonical parameter order. `t` is the 1-based step for bias
/// correction.
pub fn apply_adamw(
    params: &mut TransformerParams<f32>,
    moments: &mut AdamMoments,
    grads: &[Tensor<f32>],
    t: usize,
    lr: f64,
    config: &TrainConfig,
) {
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    let mut tensors = params.tensors_mut();
    debug_assert_eq!(tensors.len(), grads.len());
    for (slot, grad) in grads.iter().enumerate() {
        let m = moments.m[slot].data_mut();
        let v = moments.v[slot].data_mut();
        let p = tensors[slot].data_mut();
        let g = grad.data();
        for j in 0..p.len() {
            let gj = g[j] as f64;
            let mj = config.beta1 * m[j] as f64 + (1.0 - config.beta1) * gj;
            let vj = config.beta2 * v[j] as f64 + (1.0 - config.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let step_term = lr * (mj / bc1) / ((vj / bc2).sqrt() + config.eps);
            let decay_term = lr * config.weight_decay * p[j] as f64;
            p[j] = (p[j] as f64 - step_term - decay_term) as f32;
        }
    }
}

/// One forward/backward on `example`, one optimizer update at the
/// scheduled rate, one appended log record. Aborts on a non-finite loss
/// with a diagnostic naming the offending example.
pub fn train_step(
    state: &mut TrainState,
    model_cfg: &ModelConfig,
    config: &TrainConfig,
    total_steps: usize,
    epoch: usize,
    example: &TrainingExample,
    choice: Option<&SupervisionChoice>,
) -> Result<f64> {
    let lr = lr_at(state.step, total_steps, config);
    let mut g = Graph::new();
    let leaves = param_leaves(&mut g, &state.params);
    let loss_node = build_loss(&mut g, model_cfg, &leaves, example)?;
    let loss = g.value(loss_node).item()?.to_f64();
    if !loss.is_finite() {
        log::error!(
            "non-finite loss at step {} on post {}: mode {}, {} tokens ({} supervised), loss {loss}",
            state.step + 1,
            example.post_id,
            example.mode,
            example.ids.len(),
            example.mask.iter().filter(|&&m| m).count(),
        );
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            post_id: example.post_id.clone(),
            loss,
        });
    }
    let mut grads = g.backward(loss_node)?;
    let grad_tensors: Vec<Tensor<f32>> = leaves.iter().map(|&id| grads.take(id)).collect();
    apply_adamw(
        &mut state.params,
        &mut state.moments,
        &grad_tensors,
        state.step + 1,
        lr,
        config,
    );
    state.step += 1;
    state.log.push(StepRecord {
        step: state.step,
        epoch,
        post_id: example.post_id.clone(),
        probe_loss: choice.map(|c| c.probe_loss),
        threshold: choice.map(|c| c.threshold),
        chosen_mode: example.mode,
        train_loss: loss,
        lr,
    });
    Ok(loss)
}

/// Seeded shuffle order for one pass over the training set.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Per-epoch mean train loss, in epoch order.
pub fn epoch_averages(log: &[StepRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for rec in log {
        match out.last_mut() {
            Some((e, sum, count)) if *e == rec.epoch => {
                *sum += rec.train_loss;
                *count += 1;
            }
            _ => out.push((rec.epoch, rec.train_loss, 1)),
        }
    }
    out.into_iter().map(|(e, sum, count)| (e, sum / count as f64)).collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: TransformerParams<f32>,
    pub log: Vec<StepRecord>,
}

/// Called after every optimizer step with the full state; errors abort
/// the run. Checkpoint-every-N hooks plug in here.
pub type StepObserver<'a> = &'a mut dyn FnMut(&TrainState) -> Result<()>;

/// Runs one strategy to completion over `pairs.len() * epochs`
/// optimizer steps.
///
/// sft trains on plain targets, cot on reasoning targets, multitask
/// interleaves both per post within the same step budget (so it makes
/// about half as many passes), and dynamic probes the plain loss each
/// step and routes below-threshold posts to the reasoning target.
pub fn run_training(
    config: &TrainConfig,
    model_cfg: &ModelConfig,
    params: TransformerParams<f32>,
    pairs: &[ExamplePair],
    mut observer: Option<StepObserver>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("training requires at least one example pair".into()));
    }
    let needs_cot = matches!(
        config.strategy,
        Strategy::Cot | Strategy::Multitask | Strategy::Dynamic
    );
    if needs_cot {
        let missing: Vec<&str> = pairs
            .iter()
            .filter(|p| p.cot.is_none())
            .map(|p| p.post_id.as_str())
            .collect();
        if !missing.is_empty() {
            let shown = missing.iter().take(10).copied().collect::<Vec<_>>().join(", ");
            let suffix = if missing.len() > 10 {
                format!(" and {} more", missing.len() - 10)
            } else {
                String::new()
            };
            return Err(Error::Config(format!(
                "strategy {} needs a CoT record for every post; {} lack one: {shown}{suffix}",
                config.strategy,
                missing.len()
            )));
        }
    }
    let total_steps = pairs.len() * config.epochs;
    let mut state = TrainState::new(params);

    if config.strategy == Strategy::Multitask {
        let mut pass = 0;
        'budget: loop {
            pass += 1;
            let order = epoch_order(pairs.len(), config.seed, pass);
            for &idx in &order {
                let pair = &pairs[idx];
                let cot = pair.cot.as_ref().expect("coverage validated above");
                for example in [&pair.plain, cot] {
                    if state.step >= total_steps {
                        break 'budget;
                    }
                    train_step(&mut state, model_cfg, config, total_steps, pass, example, None)?;
                    if let Some(obs) = observer.as_mut() {
                        obs(&state)?;
                    }
                }
            }
            if state.step >= total_steps {
                break;
            }
        }
    } else {
        for epoch in 1..=config.epochs {
            let order = epoch_order(pairs.len(), config.seed, epoch);
            let cached_probes = if config.strategy == Strategy::Dynamic
                && config.probe_timing == ProbeTiming::PerEpoch
            {
                Some(
                    order
                        .iter()
                        .map(|&i| probe_loss(&state.params, model_cfg, &pairs[i].plain))
                        .collect::<Result<Vec<f64>>>()?,
                )
            } else {
                None
            };
            for (k, &idx) in order.iter().enumerate() {
                let pair = &pairs[idx];
                match config.strategy {
                    Strategy::Sft => {
                        train_step(
                            &mut state, model_cfg, config, total_steps, epoch, &pair.plain, None,
                        )?;
                    }
                    Strategy::Cot => {
                        let cot = pair.cot.as_ref().expect("coverage validated above");
                        train_step(&mut state, model_cfg, config, total_steps, epoch, cot, None)?;
                    }
                    Strategy::Dynamic => {
                        let probe = match &cached_probes {
                            Some(cache) => cache[k],
                            None => probe_loss(&state.params, model_cfg, &pair.plain)?,
                        };
                        let threshold = match config.gamma_mode {
                            GammaMode::Fixed => config.gamma,
                            // mean of earlier probes; no history routes plain
                            GammaMode::RunningAverage => state.running_mean().unwrap_or(0.0),
                        };
                        let cot = pair.cot.as_ref().expect("coverage validated above");
                        let (choice, example) = select_target(probe, threshold, &pair.plain, cot);
                        state.note_probe(probe);
                        train_step(
                            &mut state,
                            model_cfg,
                            config,
                            total_steps,
                            epoch,
                            example,
                            Some(&choice),
                        )?;
                    }
                    Strategy::Multitask => unreachable!("handled above"),
                }
                if let Some(obs) = observer.as_mut() {
                    obs(&state)?;
                }
            }
        }
    }

    if config.strategy == Strategy::Sft {
        let averages = epoch_averages(&state.log);
        for w in averages.windows(2) {
            if w[1].1 > w[0].1 {
                log::warn!(
                    "epoch {} mean loss {:.6} rose above epoch {} mean {:.6}",
                    w[1].0,
                    w[1].1,
                    w[0].0,
                    w[0].1
                );
            }
        }
    }
    Ok(TrainOutcome {
        params: state.params,
        log: state.log,
    })
}

pub fn write_train_log(log: &[StepRecord], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let ctx = || format!("writing {}", path.display());
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?,
    );
    for rec in log {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::json(ctx(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cotgen::oracle_records;
    use crate::cotgen::STUDENT_INSTRUCTION;
    use crate::model::vocab;

    fn fixture_posts() -> Vec<Post> {
        let texts = [
            "fresh snow on the road again",
            "coffee first then the long drive",
            "rain never stops this week",
            "sunset over the old pier",
            "new bike same old hill",
            "quiet morning loud birds",
        ];
        let kps = [
            vec!["snow day"],
            vec!["coffee"],
            vec!["rain watch"],
            vec!["pier life"],
            vec!["hill climb"],
            vec!["bird song"],
        ];
        texts
            .iter()
            .zip(kps)
            .enumerate()
            .map(|(i, (t, k))| Post {
                id: format!("p{i}"),
                text: t.to_string(),
                image_tokens: vec![vocab::img_token(i % 2)],
                keyphrases: k.into_iter().map(str::to_string).collect(),
            })
            .collect()
    }

    struct Fixture {
        model_cfg: ModelConfig,
        vocabulary: Vocabulary,
        pairs: Vec<ExamplePair>,
    }

    fn fixture() -> Fixture {
        let posts = fixture_posts();
        let records = oracle_records(&posts, 11, "0");
        let mut sources: Vec<String> = vec![STUDENT_INSTRUCTION.to_string()];
        for p in &posts {
            sources.push(p.text.clone());
            sources.push(p.keyphrases.join(" "));
        }
        for r in &records {
            sources.push(r.think.clone());
        }
        let vocabulary = Vocabulary::build(sources, 2);
        let model_cfg = ModelConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            ff_dim: 32,
            max_seq_len: 96,
            vocab_size: vocabulary.len(),
        };
        let pairs = build_example_pairs(&posts, &records, &vocabulary, model_cfg.max_seq_len)
            .expect("fixture pairs");
        Fixture {
            model_cfg,
            vocabulary,
            pairs,
        }
    }

    fn quick_config(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            strategy,
            lr: 1e-2,
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_rejects_bad_fields() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 2;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size"), "{msg}");

        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.gamma = f64::NAN;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.gamma = f64::INFINITY;
        assert!(cfg.validate().is_ok(), "inf is the always-reason sentinel");
    }

    #[test]
    fn switch_is_strict_at_the_boundary() {
        let f = fixture();
        let plain = &f.pairs[0].plain;
        let cot = f.pairs[0].cot.as_ref().unwrap();

        let (choice, ex) = select_target(0.39, 0.4, plain, cot);
        assert_eq!(choice.mode, SupervisionMode::Cot);
        assert_eq!(ex.mode, SupervisionMode::Cot);
        assert_eq!(choice.probe_loss, 0.39);
        assert_eq!(choice.threshold, 0.4);

        let (choice, ex) = select_target(0.40, 0.4, plain, cot);
        assert_eq!(choice.mode, SupervisionMode::Plain, "tie routes plain");
        assert_eq!(ex.mode, SupervisionMode::Plain);

        let (choice, _) = select_target(6.2, 0.4, plain, cot);
        assert_eq!(choice.mode, SupervisionMode::Plain);
    }

    #[test]
    fn cosine_schedule_hits_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &cfg), 5e-5);
        assert!(lr_at(100, 100, &cfg).abs() < 1e-20);
        let mid = lr_at(50, 100, &cfg);
        assert!((mid - 2.5e-5).abs() < 1e-12, "{mid}");

        let floored = TrainConfig {
            final_lr_fraction: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 10, &floored), 5e-5);
        assert!((lr_at(10, 10, &floored) - 2.5e-5).abs() < 1e-20);

        assert_eq!(lr_at(0, 0, &cfg), 5e-5, "degenerate schedule stays at the initial rate");
    }

    #[test]
    fn probe_matches_sequence_loss_bit_for_bit_and_reads_only() {
        let f = fixture();
        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let before: Vec<u32> = params.tensors().iter().flat_map(|t| t.data()).map(|x| x.to_bits()).collect();
        let probe = probe_loss(&params, &f.model_cfg, &f.pairs[0].plain).unwrap();
        let direct = sequence_loss(&params, &f.model_cfg, &f.pairs[0].plain).unwrap();
        assert_eq!(probe.to_bits(), (direct as f64).to_bits());
        let after: Vec<u32> = params.tensors().iter().flat_map(|t| t.data()).map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
        // untrained model sits near the uniform-logit loss ln V
        let ln_v = (f.model_cfg.vocab_size as f64).ln();
        assert!((probe - ln_v).abs() < 0.35, "probe {probe} vs ln V {ln_v}");
    }

    #[test]
    fn zero_gradient_with_zero_decay_leaves_params_untouched() {
        let f = fixture();
        let mut params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let mut moments = AdamMoments::zeros_like(&params);
        let zeros: Vec<Tensor<f32>> =
            params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let before: Vec<u32> =
            params.tensors().iter().flat_map(|t| t.data()).map(|x| x.to_bits()).collect();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        apply_adamw(&mut params, &mut moments, &zeros, 1, 5e-5, &cfg);
        let after: Vec<u32> =
            params.tensors().iter().flat_map(|t| t.data()).map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn weight_decay_alone_shrinks_params_toward_zero() {
        let f = fixture();
        let mut params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let mut moments = AdamMoments::zeros_like(&params);
        let zeros: Vec<Tensor<f32>> =
            params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let before = params.token_embedding.data()[0];
        let cfg = TrainConfig {
            weight_decay: 0.1,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        apply_adamw(&mut params, &mut moments, &zeros, 1, 1e-2, &cfg);
        let after = params.token_embedding.data()[0];
        let expected = (before as f64 * (1.0 - 1e-2 * 0.1)) as f32;
        assert_eq!(after.to_bits(), expected.to_bits());
    }

    #[test]
    fn one_example_overfits_within_two_hundred_steps() {
        let f = fixture();
        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let one = vec![f.pairs[0].clone()];
        let cfg = TrainConfig {
            strategy: Strategy::Sft,
            lr: 1e-2,
            epochs: 200,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = run_training(&cfg, &f.model_cfg, params, &one, None).unwrap();
        let final_loss = sequence_loss(&out.params, &f.model_cfg, &one[0].plain).unwrap();
        assert!(final_loss < 0.05, "final loss {final_loss}");
        assert_eq!(out.log.len(), 200);
    }

    fn loss_bits(log: &[StepRecord]) -> Vec<u64> {
        log.iter().map(|r| r.train_loss.to_bits()).collect()
    }

    #[test]
    fn same_seed_and_config_reproduce_the_loss_curve_exactly() {
        let f = fixture();
        let cfg = quick_config(Strategy::Dynamic);
        let run = |cfg: &TrainConfig| {
            let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
            run_training(cfg, &f.model_cfg, params, &f.pairs, None).unwrap()
        };
        assert_eq!(loss_bits(&run(&cfg).log), loss_bits(&run(&cfg).log));
        let reseeded = TrainConfig { seed: 6, ..cfg };
        assert_ne!(loss_bits(&run(&cfg).log), loss_bits(&run(&reseeded).log));
    }

    #[test]
    fn zero_threshold_reproduces_plain_training_bit_for_bit() {
        let f = fixture();
        let run = |cfg: &TrainConfig| {
            let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
            run_training(cfg, &f.model_cfg, params, &f.pairs, None).unwrap()
        };
        let sft = run(&quick_config(Strategy::Sft));
        let dyn0 = run(&TrainConfig {
            gamma: 0.0,
            ..quick_config(Strategy::Dynamic)
        });
        assert_eq!(loss_bits(&sft.log), loss_bits(&dyn0.log));
        assert!(dyn0.log.iter().all(|r| r.chosen_mode == SupervisionMode::Plain));
        let sft_bits: Vec<u32> =
            sft.params.tensors().iter().flat_map(|t| t.data()).map(|x| x.to_bits()).collect();
        let dyn_bits: Vec<u32> =
            dyn0.params.tensors().iter().flat_map(|t| t.data()).map(|x| x.to_bits()).collect();
        assert_eq!(sft_bits, dyn_bits);
    }

    #[test]
    fn infinite_threshold_reproduces_reasoning_training_bit_for_bit() {
        let f = fixture();
        let run = |cfg: &TrainConfig| {
            let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
            run_training(cfg, &f.model_cfg, params, &f.pairs, None).unwrap()
        };
        let cot = run(&quick_config(Strategy::Cot));
        let dyn_inf = run(&TrainConfig {
            gamma: f64::INFINITY,
            ..quick_config(Strategy::Dynamic)
        });
        assert_eq!(loss_bits(&cot.log), loss_bits(&dyn_inf.log));
        assert!(dyn_inf.log.iter().all(|r| r.chosen_mode == SupervisionMode::Cot));
    }

    #[test]
    fn every_dynamic_step_replays_the_switch_rule_from_the_log() {
        let f = fixture();
        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        // a threshold just under every untrained probe starts plain;
        // training then drives probes below it, exercising both routes
        let min_initial = f
            .pairs
            .iter()
            .map(|p| probe_loss(&params, &f.model_cfg, &p.plain).unwrap())
            .fold(f64::INFINITY, f64::min);
        let cfg = TrainConfig {
            gamma: min_initial - 0.05,
            epochs: 3,
            ..quick_config(Strategy::Dynamic)
        };
        let out = run_training(&cfg, &f.model_cfg, params, &f.pairs, None).unwrap();
        let mut cot_steps = 0;
        for rec in &out.log {
            let probe = rec.probe_loss.expect("dynamic logs probes");
            let threshold = rec.threshold.expect("dynamic logs thresholds");
            assert_eq!(
                rec.chosen_mode == SupervisionMode::Cot,
                probe < threshold,
                "step {}",
                rec.step
            );
            if rec.chosen_mode == SupervisionMode::Cot {
                cot_steps += 1;
            }
        }
        assert!(cot_steps > 0 && cot_steps < out.log.len(), "cot steps {cot_steps}");
    }

    #[test]
    fn running_average_threshold_is_the_mean_of_earlier_probes() {
        let f = fixture();
        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let cfg = TrainConfig {
            gamma_mode: GammaMode::RunningAverage,
            epochs: 3,
            ..quick_config(Strategy::Dynamic)
        };
        let out = run_training(&cfg, &f.model_cfg, params, &f.pairs, None).unwrap();
        assert_eq!(out.log[0].threshold, Some(0.0));
        assert_eq!(out.log[0].chosen_mode, SupervisionMode::Plain);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut saw_cot = false;
        for rec in &out.log {
            let expected = if count == 0 { 0.0 } else { sum / count as f64 };
            assert_eq!(rec.threshold, Some(expected), "step {}", rec.step);
            sum += rec.probe_loss.unwrap();
            count += 1;
            saw_cot |= rec.chosen_mode == SupervisionMode::Cot;
        }
        assert!(saw_cot, "an adaptive threshold routes easy posts to reasoning");
    }

    #[test]
    fn per_epoch_probing_freezes_probes_within_an_epoch() {
        let f = fixture();
        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let cfg = TrainConfig {
            probe_timing: ProbeTiming::PerEpoch,
            gamma: 4.5,
            ..quick_config(Strategy::Dynamic)
        };
        let out = run_training(&cfg, &f.model_cfg, params, &f.pairs, None).unwrap();
        assert_eq!(out.log.len(), f.pairs.len() * 2);
        for rec in &out.log {
            let probe = rec.probe_loss.unwrap();
            assert_eq!(rec.chosen_mode == SupervisionMode::Cot, probe < 4.5);
        }
    }

    #[test]
    fn multitask_matches_the_step_budget_and_interleaves() {
        let f = fixture();
        let pairs = &f.pairs[..5];
        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..quick_config(Strategy::Multitask)
        };
        let out = run_training(&cfg, &f.model_cfg, params, pairs, None).unwrap();
        assert_eq!(out.log.len(), 15, "5 posts x 3 epochs");
        let plain = out.log.iter().filter(|r| r.chosen_mode == SupervisionMode::Plain).count();
        // odd budget truncates mid-pair: 7 full pairs plus one plain step
        assert_eq!(plain, 8);
        for w in out.log.windows(2) {
            if w[0].chosen_mode == SupervisionMode::Plain && w[1].chosen_mode == SupervisionMode::Cot {
                assert_eq!(w[0].post_id, w[1].post_id, "a post's two targets stay adjacent");
            }
        }
    }

    #[test]
    fn missing_reasoning_records_are_named_in_the_error() {
        let f = fixture();
        let mut pairs = f.pairs.clone();
        pairs[2].cot = None;
        pairs[4].cot = None;
        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let err = run_training(
            &quick_config(Strategy::Dynamic),
            &f.model_cfg,
            params,
            &pairs,
            None,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("p2") && msg.contains("p4"), "{msg}");

        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        assert!(run_training(&quick_config(Strategy::Sft), &f.model_cfg, params, &pairs, None)
            .is_ok());
    }

    #[test]
    fn non_finite_loss_aborts_and_names_the_post() {
        let f = fixture();
        let mut params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        // the output projection feeds every logit, so this NaN reaches
        // the loss no matter which tokens the example uses
        params.output_projection.data_mut()[0] = f32::NAN;
        let mut state = TrainState::new(params);
        let err = train_step(
            &mut state,
            &f.model_cfg,
            &TrainConfig::default(),
            10,
            1,
            &f.pairs[0].plain,
            None,
        )
        .unwrap_err();
        match err {
            Error::NonFiniteLoss { step, ref post_id, .. } => {
                assert_eq!(step, 1);
                assert_eq!(post_id, "p0");
            }
            other => panic!("unexpected error {other}"),
        }
        assert_eq!(state.step, 0, "aborted step leaves no trace");
        assert!(state.log.is_empty());
    }

    #[test]
    fn observer_sees_every_step_and_can_abort() {
        let f = fixture();
        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let mut seen = Vec::new();
        let mut obs = |state: &TrainState| {
            seen.push(state.step);
            Ok(())
        };
        run_training(
            &quick_config(Strategy::Sft),
            &f.model_cfg,
            params,
            &f.pairs,
            Some(&mut obs),
        )
        .unwrap();
        assert_eq!(seen, (1..=12).collect::<Vec<_>>());

        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let mut abort = |state: &TrainState| {
            if state.step == 3 {
                Err(Error::Config("stop requested".into()))
            } else {
                Ok(())
            }
        };
        let err = run_training(
            &quick_config(Strategy::Sft),
            &f.model_cfg,
            params,
            &f.pairs,
            Some(&mut abort),
        )
        .unwrap_err();
        assert!(err.to_string().contains("stop requested"));
    }

    #[test]
    fn routing_sets_nest_as_the_threshold_grows() {
        let f = fixture();
        let params = TransformerParams::<f32>::init(&f.model_cfg, 3).unwrap();
        let probes: Vec<f64> = f
            .pairs
            .iter()
            .map(|p| probe_loss(&params, &f.model_cfg, &p.plain).unwrap())
            .collect();
        let routed = |gamma: f64| -> Vec<usize> {
            probes
                .iter()
                .enumerate()
                .filter(|(_, &p)| {
                    let pair = &f.pairs[0];
                    let (c, _) = select_target(p, gamma, &pair.plain, pair.cot.as_ref().unwrap());
                    c.mode == SupervisionMode::Cot
                })
                .map(|(i, _)| i)
                .collect()
        };
        let sweep = [0.3, 0.4, 0.5, 0.6, 4.3, 4.4, 4.5, f64::INFINITY];
        for pair in sweep.windows(2) {
            let lo = routed(pair[0]);
            let hi = routed(pair[1]);
            assert!(lo.iter().all(|i| hi.contains(i)), "γ {} vs {}", pair[0], pair[1]);
        }
        assert_eq!(routed(f64::INFINITY).len(), probes.len());
        assert!(routed(0.0).is_empty());
    }

    #[test]
    fn epoch_averages_group_in_order() {
        let rec = |step: usize, epoch: usize, loss: f64| StepRecord {
            step,
            epoch,
            post_id: "p".into(),
            probe_loss: None,
            threshold: None,
            chosen_mode: SupervisionMode::Plain,
            train_loss: loss,
            lr: 1e-3,
        };
        let log = vec![rec(1, 1, 2.0), rec(2, 1, 4.0), rec(3, 2, 1.0)];
        assert_eq!(epoch_averages(&log), vec![(1, 3.0), (2, 1.0)]);
    }

    #[test]
    fn pair_builder_carries_reasoning_only_when_cached() {
        let f = fixture();
        let posts = fixture_posts();
        let records = oracle_records(&posts[..3], 11, "0");
        let pairs = build_example_pairs(&posts, &records, &f.vocabulary, 96).unwrap();
        assert_eq!(pairs.len(), posts.len());
        for (i, pair) in pairs.iter().enumerate() {
            assert_eq!(pair.cot.is_some(), i < 3, "post {}", pair.post_id);
            assert_eq!(pair.plain.mode, SupervisionMode::Plain);
        }
    }
}
