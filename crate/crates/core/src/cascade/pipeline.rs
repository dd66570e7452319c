use rayon::prelude::*;

use crate::dataforge::Sample;
use crate::dualenc::{
    is_prompt_param, pretrain, tune_prompts, AlphaMask, DualEncConfig, DualEncoder, EmbeddingBundle, PretrainConfig, TuneConfig,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::nncore::{ParamStore, Tensor};
use crate::segmentor::{pretrain_backbone, train_decoder, BackboneConfig, SegConfig, SegTrainConfig, Segmentor};

/// Outcome of comparing a group of tensors before and after a phase.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeCheck {
    pub group: String,
    pub tensors: usize,
    pub changed: Vec<String>,
}

impl FreezeCheck {
    pub fn holds(&self) -> bool {
        self.changed.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct PhaseReport {
    pub losses: Vec<f64>,
    /// Fraction of samples that drew the ground-truth alpha.
    pub gt_alpha_fraction: Option<f64>,
    pub freeze: Vec<FreezeCheck>,
}

fn compare(group: &str, before: &[(String, Tensor)], after: &ParamStore) -> FreezeCheck {
    let changed = before
        .iter()
        .filter(|(name, t)| after.id(name).is_none_or(|id| !after.tensor(id).bit_eq(t)))
        .map(|(name, _)| name.clone())
        .collect();
    FreezeCheck {
        group: group.to_string(),
        tensors: before.len(),
        changed,
    }
}

fn enforce(checks: &[FreezeCheck]) -> Result<()> {
    for c in checks {
        if !c.holds() {
            return Err(Error::Contract(format!(
                "frozen {} tensors changed: {}",
                c.group,
                c.changed.join(", ")
            )));
        }
    }
    Ok(())
}

/// Builds a dual encoder and trains all of it on the seen classes.
pub fn pretrain_clip(
    cfg: &DualEncConfig,
    train: &PretrainConfig,
    data: &[Sample],
    vocab: &Vocabulary,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<(DualEncoder, PhaseReport)> {
    let mut enc = DualEncoder::new(cfg)?;
    let log = pretrain(&mut enc, data, vocab, train, on_step)?;
    enc.store.freeze_all();
    Ok((
        enc,
        PhaseReport {
            gt_alpha_fraction: Some(log.gt_alpha_fraction()),
            losses: log.losses,
            freeze: Vec::new(),
        },
    ))
}

/// Prompt tuning; fails if any encoder tensor moves.
pub fn tune_clip(
    enc: &mut DualEncoder,
    train: &TuneConfig,
    data: &[Sample],
    vocab: &Vocabulary,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<PhaseReport> {
    let before = enc.store.snapshot(|n| !is_prompt_param(n));
    let log = tune_prompts(enc, data, vocab, train, on_step)?;
    let freeze = vec![compare("dual-encoder", &before, &enc.store)];
    enforce(&freeze)?;
    Ok(PhaseReport {
        gt_alpha_fraction: Some(log.gt_alpha_fraction()),
        losses: log.losses,
        freeze,
    })
}

/// Frozen dual-encoder outputs with an all-one alpha, one bundle per sample.
pub fn condition_bundles(
    enc: &DualEncoder,
    data: &[Sample],
    vocab: &Vocabulary,
    subset: &[usize],
) -> Result<Vec<EmbeddingBundle>> {
    let e_t = enc.encode_text(vocab, subset)?;
    data.par_iter()
        .map(|s| {
            let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
            enc.bundle_with(&e_t, &s.image, &AlphaMask::all_one(h, w))
        })
        .collect()
}

/// Pretrains the segmentor backbone, freezes it, then trains adapters,
/// prompt adapter and decoder against the frozen dual encoder.
pub fn train_seg(
    enc: &DualEncoder,
    cfg: &SegConfig,
    backbone: &BackboneConfig,
    train: &SegTrainConfig,
    data: &[Sample],
    vocab: &Vocabulary,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<(Segmentor, PhaseReport)> {
    let clip_before = enc.store.snapshot(|_| true);
    let mut seg = Segmentor::new(cfg)?;
    let images: Vec<&Tensor> = data.iter().map(|s| &s.image).collect();
    let mut losses = pretrain_backbone(&mut seg, &images, backbone, on_step)?.losses;
    let backbone_before = seg.store.snapshot(|n| n.starts_with("backbone."));
    let bundles = condition_bundles(enc, data, vocab, vocab.seen())?;
    let offset = losses.len();
    let log = train_decoder(&mut seg, data, &bundles, train, &mut |s, l| on_step(offset + s, l))?;
    losses.extend(log.losses);
    let freeze = vec![
        compare("dual-encoder", &clip_before, &enc.store),
        compare("segmentor backbone", &backbone_before, &seg.store),
    ];
    enforce(&freeze)?;
    Ok((
        seg,
        PhaseReport {
            losses,
            gt_alpha_fraction: None,
            freeze,
        },
    ))
}
