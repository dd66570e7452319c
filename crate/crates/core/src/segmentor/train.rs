use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LossWeights, Segmentor};
use crate::dataforge::Sample;
use crate::dualenc::EmbeddingBundle;
use crate::error::{contract, Result};
use crate::nncore::optim::{cosine_lr, sum_grads, Adam};
use crate::nncore::{Graph, Tensor};

/// Masked-patch reconstruction budget for the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch: 16,
            lr: 2e-3,
            mask_ratio: 0.5,
            seed: 19,
        }
    }
}

/// Adapter, prompt adapter and decoder training with a frozen backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            lr: 5e-3,
            lr_floor: 2e-5,
            seed: 23,
            loss: LossWeights::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.batch > 0, "backbone.batch must be positive");
        contract!(self.lr > 0.0, "backbone.lr must be positive");
        contract!(
            (0.0..1.0).contains(&self.mask_ratio),
            "backbone.mask_ratio must lie in [0, 1)"
        );
        Ok(())
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.batch > 0, "train_seg.batch must be positive");
        contract!(
            self.lr > 0.0 && self.lr_floor >= 0.0,
            "train_seg learning rates must be positive"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SegTrainLog {
    pub losses: Vec<f64>,
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Pretrains `backbone.*` by masked-patch reconstruction, then leaves the
/// whole store frozen.
pub fn pretrain_backbone(
    seg: &mut Segmentor,
    images: &[&Tensor],
    cfg: &BackboneConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<SegTrainLog> {
    cfg.validate()?;
    contract!(!images.is_empty(), "no images for backbone pretraining");
    seg.store.train_only(|n| n.starts_with("backbone."));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let patches = seg.net.cfg.grid().pow(2);
    let mut log = SegTrainLog::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in batches(images.len(), cfg.batch, &mut rng) {
            let hidden: Vec<Vec<bool>> = idx
                .iter()
                .map(|_| (0..patches).map(|_| rng.random_bool(cfg.mask_ratio)).collect())
                .collect();
            let inv = 1.0 / idx.len() as f64;
            let (net, store) = (&seg.net, &seg.store);
            let parts = idx
                .par_iter()
                .zip(hidden.par_iter())
                .map(|(&i, h)| {
                    let mut g = Graph::new(store);
                    let l = net.backbone.reconstruction_loss(&mut g, &net.cfg, images[i], h)?;
                    let v = g.value(l).data()[0];
                    let root = g.scale(l, inv);
                    Ok((v, g.backward(root).into_params()))
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = parts.iter().map(|p| p.0).sum::<f64>() * inv;
            let grads = sum_grads(parts.into_iter().map(|p| p.1));
            opt.step(&mut seg.store, &grads)?;
            log.losses.push(loss);
            on_step(step, loss);
            step += 1;
        }
    }
    seg.store.freeze_all();
    Ok(log)
}

/// Trains adapters, prompt adapter and decoder; `backbone.*` stays bit-identical.
/// `bundles[i]` holds the frozen dual-encoder outputs for `data[i]`.
pub fn train_decoder(
    seg: &mut Segmentor,
    data: &[Sample],
    bundles: &[EmbeddingBundle],
    cfg: &SegTrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<SegTrainLog> {
    cfg.validate()?;
    contract!(!data.is_empty(), "no segmentation training samples");
    contract!(bundles.len() == data.len(), "one embedding bundle per sample is required");
    seg.store.train_only(|n| !n.starts_with("backbone."));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let total = data.len().div_ceil(cfg.batch) * cfg.epochs;
    let mut log = SegTrainLog::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in batches(data.len(), cfg.batch, &mut rng) {
            let inv = 1.0 / idx.len() as f64;
            let (net, store) = (&seg.net, &seg.store);
            let parts = idx
                .par_iter()
                .map(|&i| {
                    let s = &data[i];
                    let mut g = Graph::new(store);
                    let vars = net.forward(&mut g, &s.image, &bundles[i])?;
                    let l = vars.decode.loss(&mut g, &s.mask, &s.edge, &cfg.loss)?;
                    let v = g.value(l).data()[0];
                    let root = g.scale(l, inv);
                    Ok((v, g.backward(root).into_params()))
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = parts.iter().map(|p| p.0).sum::<f64>() * inv;
            let grads = sum_grads(parts.into_iter().map(|p| p.1));
            opt.lr = cosine_lr(cfg.lr, cfg.lr_floor, step, total);
            opt.step(&mut seg.store, &grads)?;
            log.losses.push(loss);
            on_step(step, loss);
            step += 1;
        }
    }
    seg.store.freeze_all();
    Ok(log)
}
