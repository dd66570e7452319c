use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{argmax, is_prompt_param, similarity, AlphaMask, DualEncoder, DualNet};
use super::vocab::Vocabulary;
use crate::dataforge::Sample;
use crate::error::{contract, Result};
use crate::nncore::optim::{cosine_lr, sum_grads, Adam, Sgd};
use crate::nncore::{Graph, ParamId, Tensor, Var};

/// Upper bound on `ln(1 / tau)`.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

/// Whole-model surrogate pretraining on seen classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 16,
            lr: 2e-3,
            lr_floor: 1e-4,
            weight_decay: 0.0,
            seed: 11,
        }
    }
}

/// Prompt tuning: SGD with momentum over `P_t` and the injector only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch: 8,
            lr: 0.0035,
            momentum: 0.9,
            seed: 13,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.batch > 0, "pretrain_clip.batch must be positive");
        contract!(
            self.lr > 0.0 && self.lr_floor >= 0.0,
            "pretrain_clip learning rates must be positive"
        );
        Ok(())
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.batch > 0, "tune_clip.batch must be positive");
        contract!(self.lr > 0.0, "tune_clip.lr must be positive");
        contract!((0.0..1.0).contains(&self.momentum), "tune_clip.momentum must lie in [0, 1)");
        Ok(())
    }
}

/// Result of one tuning step before the optimizer update.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    /// How many samples drew the ground-truth alpha.
    pub gt_alpha: usize,
    pub grads: HashMap<ParamId, Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub gt_alpha_draws: usize,
    pub samples: usize,
}

impl TrainLog {
    pub fn gt_alpha_fraction(&self) -> f64 {
        self.gt_alpha_draws as f64 / self.samples.max(1) as f64
    }
}

/// Draws all-one or ground-truth alpha with equal probability.
pub fn draw_alpha(sample: &Sample, rng: &mut ChaCha8Rng) -> Result<AlphaMask> {
    if rng.random_bool(0.5) {
        AlphaMask::ground_truth(&sample.mask)
    } else {
        let s = sample.image.shape();
        Ok(AlphaMask::all_one(s[0], s[1]))
    }
}

fn position(subset: &[usize], label: usize) -> Result<usize> {
    match subset.iter().position(|&c| c == label) {
        Some(p) => Ok(p),
        None => Err(crate::Error::Contract(format!(
            "label {label} is not in the training subset {subset:?}"
        ))),
    }
}

/// Cross-entropy of one sample against precomputed text embeddings `e_t`.
pub fn sample_loss(net: &DualNet, g: &mut Graph, e_t: Var, img: &Tensor, alpha: &AlphaMask, target: usize) -> Result<Var> {
    let e_v = net.image_embedding(g, img, alpha)?;
    let s = net.scores(g, e_t, e_v)?;
    let logits = net.logits(g, s)?;
    g.cross_entropy(logits, target)
}

/// Mean loss of a batch recorded on a single graph.
pub fn batch_loss(
    net: &DualNet,
    g: &mut Graph,
    batch: &[(&Tensor, &AlphaMask, usize)],
    vocab: &Vocabulary,
    subset: &[usize],
) -> Result<Var> {
    contract!(!batch.is_empty(), "empty batch");
    let e_t = net.text_embeddings(g, vocab, subset)?;
    let mut total: Option<Var> = None;
    for (img, alpha, label) in batch {
        let l = sample_loss(net, g, e_t, img, alpha, position(subset, *label)?)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

/// One step of alpha-randomized classification training. Gradients are
/// produced only for parameters currently marked trainable.
pub fn clip_tune_step(
    enc: &DualEncoder,
    batch: &[&Sample],
    vocab: &Vocabulary,
    subset: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    contract!(!batch.is_empty(), "empty batch");
    let targets = batch.iter().map(|s| position(subset, s.label)).collect::<Result<Vec<_>>>()?;
    let alphas = batch.iter().map(|s| draw_alpha(s, rng)).collect::<Result<Vec<_>>>()?;
    let gt_alpha = alphas.iter().filter(|a| a.kind() == super::AlphaKind::GroundTruth).count();

    let net = &enc.net;
    let mut gt = Graph::new(&enc.store);
    let e_t = net.text_embeddings(&mut gt, vocab, subset)?;
    let e_t_val = gt.value(e_t).clone();
    let inv = 1.0 / batch.len() as f64;

    let parts = batch
        .par_iter()
        .zip(alphas.par_iter())
        .zip(targets.par_iter())
        .map(|((s, alpha), &t)| {
            let mut g = Graph::new(&enc.store);
            let et = g.input(e_t_val.clone());
            let l = sample_loss(net, &mut g, et, &s.image, alpha, t)?;
            let loss = g.value(l).data()[0];
            let root = g.scale(l, inv);
            let grads = g.backward(root);
            let leaf = grads.leaf(et).cloned();
            Ok((loss, grads.into_params(), leaf))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut loss = 0.0;
    let mut text_grad: Option<Tensor> = None;
    let mut param_parts = Vec::with_capacity(parts.len() + 1);
    for (l, p, leaf) in parts {
        loss += l;
        param_parts.push(p);
        if let Some(leaf) = leaf {
            match &mut text_grad {
                Some(t) => t.add_assign(&leaf),
                None => text_grad = Some(leaf),
            }
        }
    }
    if let Some(tg) = text_grad {
        param_parts.push(gt.backward_seeded(&[(e_t, tg)]).into_params());
    }
    Ok(StepOutcome {
        loss: loss * inv,
        gt_alpha,
        grads: sum_grads(param_parts),
    })
}

fn check_data(data: &[Sample], vocab: &Vocabulary) -> Result<()> {
    contract!(!data.is_empty(), "no training samples");
    for s in data {
        contract!(
            vocab.is_seen(s.label),
            "training sample {} has label {} outside the seen split",
            s.id,
            s.label
        );
    }
    Ok(())
}

fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Trains every dual-encoder parameter (including the temperature) on seen
/// classes with Adam and cosine decay.
pub fn pretrain(
    enc: &mut DualEncoder,
    data: &[Sample],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<TrainLog> {
    cfg.validate()?;
    check_data(data, vocab)?;
    enc.store.train_only(|_| true);
    let subset = vocab.seen().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = data.len().div_ceil(cfg.batch);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = Adam::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(data.len(), cfg.batch, &mut rng) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let out = clip_tune_step(enc, &batch, vocab, &subset, &mut rng)?;
            opt.lr = cosine_lr(cfg.lr, cfg.lr_floor, step, total);
            opt.step(&mut enc.store, &out.grads)?;
            let ls = enc.store.tensor_mut(enc.net.logit_scale);
            ls.data_mut()[0] = ls.data()[0].min(MAX_LOGIT_SCALE);
            log.losses.push(out.loss);
            log.gt_alpha_draws += out.gt_alpha;
            log.samples += batch.len();
            on_step(step, out.loss);
            step += 1;
        }
    }
    Ok(log)
}

/// Tunes only the textual prompts and the injector. Every other tensor,
/// the temperature included, stays bit-identical.
pub fn tune_prompts(
    enc: &mut DualEncoder,
    data: &[Sample],
    vocab: &Vocabulary,
    cfg: &TuneConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<TrainLog> {
    cfg.validate()?;
    check_data(data, vocab)?;
    enc.store.train_only(is_prompt_param);
    let subset = vocab.seen().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = TrainLog::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(data.len(), cfg.batch, &mut rng) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let out = clip_tune_step(enc, &batch, vocab, &subset, &mut rng)?;
            opt.step(&mut enc.store, &out.grads)?;
            log.losses.push(out.loss);
            log.gt_alpha_draws += out.gt_alpha;
            log.samples += batch.len();
            on_step(step, out.loss);
            step += 1;
        }
    }
    enc.store.freeze_all();
    Ok(log)
}

/// Which alpha the evaluation feeds to the image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalAlpha {
    AllOne,
    GroundTruth,
}

/// Top-1 accuracy over `subset`.
pub fn accuracy(enc: &DualEncoder, data: &[Sample], vocab: &Vocabulary, subset: &[usize], alpha: EvalAlpha) -> Result<f64> {
    contract!(!data.is_empty(), "no evaluation samples");
    let e_t = enc.encode_text(vocab, subset)?;
    let hits = data
        .par_iter()
        .map(|s| {
            let a = match alpha {
                EvalAlpha::AllOne => AlphaMask::all_one(s.image.shape()[0], s.image.shape()[1]),
                EvalAlpha::GroundTruth => AlphaMask::ground_truth(&s.mask)?,
            };
            let e_v = enc.encode_image(&s.image, &a)?;
            let sc = similarity(&e_t, &e_v)?;
            Ok(usize::from(subset[argmax(&sc)?] == s.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}
