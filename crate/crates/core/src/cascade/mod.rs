//! Two-stage inference: segment with an all-one alpha, then classify with the
//! predicted mask as a soft alpha. Also drives the three training phases.

mod pipeline;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pipeline::{condition_bundles, pretrain_clip, train_seg, tune_clip, FreezeCheck, PhaseReport};

use crate::dataforge::Sample;
use crate::dualenc::{classify, similarity, AlphaMask, DualEncoder, EmbeddingBundle, Vocabulary};
use crate::error::{contract, Result};
use crate::metrics::{evaluate as evaluate_records, EvalRecord, MetricsReport};
use crate::nncore::Tensor;
use crate::segmentor::{SegOutput, Segmentor};

/// Output of the full cascade for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `H x W` probabilities from stage 1.
    pub mask: Tensor,
    pub label: usize,
    pub stage1_scores: Vec<f64>,
    pub stage2_scores: Vec<f64>,
    /// Class indices the scores refer to.
    pub subset: Vec<usize>,
}

impl Prediction {
    /// Subset classes sorted by decreasing stage-2 score, ties to the lower position.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.subset.len()).collect();
        order.sort_by(|&a, &b| self.stage2_scores[b].total_cmp(&self.stage2_scores[a]).then(a.cmp(&b)));
        order.into_iter().map(|i| self.subset[i]).collect()
    }
}

/// Alpha used by stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTwoAlpha {
    Predicted,
    AllOne,
}

/// A trained dual encoder and segmentor sharing one inference path.
#[derive(Debug)]
pub struct Cascade {
    clip: DualEncoder,
    seg: Segmentor,
    text_cache: Mutex<HashMap<Vec<usize>, Arc<Tensor>>>,
}

impl Cascade {
    pub fn new(clip: DualEncoder, seg: Segmentor) -> Result<Self> {
        contract!(
            clip.config().embed_dim == seg.config().embed_dim,
            "segmentor expects {}-d embeddings, dual encoder produces {}",
            seg.config().embed_dim,
            clip.config().embed_dim
        );
        contract!(
            clip.config().image_size == seg.config().image_size,
            "dual encoder and segmentor image sizes differ"
        );
        Ok(Self {
            clip,
            seg,
            text_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn clip(&self) -> &DualEncoder {
        &self.clip
    }

    pub fn segmentor(&self) -> &Segmentor {
        &self.seg
    }

    pub fn into_parts(self) -> (DualEncoder, Segmentor) {
        (self.clip, self.seg)
    }

    /// Text embeddings for `subset`, memoized per subset.
    pub fn text_embeddings(&self, vocab: &Vocabulary, subset: &[usize]) -> Result<Arc<Tensor>> {
        if let Some(t) = self.text_cache.lock().expect("text cache poisoned").get(subset) {
            return Ok(t.clone());
        }
        let e = Arc::new(self.clip.encode_text(vocab, subset)?);
        self.text_cache
            .lock()
            .expect("text cache poisoned")
            .insert(subset.to_vec(), e.clone());
        Ok(e)
    }

    fn check_image(&self, img: &Tensor) -> Result<()> {
        let s = img.shape();
        contract!(s.len() == 3 && s[2] == 3, "image must be h x w x 3, got {s:?}");
        Ok(())
    }

    /// Stage 1: all-one alpha embedding, condition prompts, segmentation.
    pub fn run_stage1(&self, img: &Tensor, vocab: &Vocabulary, subset: &[usize]) -> Result<(SegOutput, EmbeddingBundle)> {
        self.check_image(img)?;
        let e_t = self.text_embeddings(vocab, subset)?;
        let alpha = AlphaMask::all_one(img.shape()[0], img.shape()[1]);
        let bundle = self.clip.bundle_with(&e_t, img, &alpha)?;
        let out = self.seg.segment(img, &bundle)?;
        Ok((out, bundle))
    }

    /// Stage 2: classify with `alpha`. Returns `(label, scores)`.
    pub fn run_stage2_alpha(
        &self,
        img: &Tensor,
        alpha: &AlphaMask,
        vocab: &Vocabulary,
        subset: &[usize],
    ) -> Result<(usize, Vec<f64>)> {
        self.check_image(img)?;
        let e_t = self.text_embeddings(vocab, subset)?;
        let e_v = self.clip.encode_image(img, alpha)?;
        let s = similarity(&e_t, &e_v)?;
        Ok((classify(&s, subset)?, s))
    }

    /// Stage 2 with a soft predicted mask `m` (values in [0, 1], no thresholding).
    pub fn run_stage2(&self, img: &Tensor, m: &Tensor, vocab: &Vocabulary, subset: &[usize]) -> Result<(usize, Vec<f64>)> {
        let alpha = AlphaMask::predicted(m)?;
        self.run_stage2_alpha(img, &alpha, vocab, subset)
    }

    /// Full cascade over the unseen classes.
    pub fn infer(&self, img: &Tensor, vocab: &Vocabulary) -> Result<Prediction> {
        self.infer_with(img, vocab, vocab.unseen(), StageTwoAlpha::Predicted)
    }

    pub fn infer_with(&self, img: &Tensor, vocab: &Vocabulary, subset: &[usize], alpha: StageTwoAlpha) -> Result<Prediction> {
        let (out, bundle) = self.run_stage1(img, vocab, subset)?;
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let mask = out.mask.reshape(&[h, w])?;
        let (label, s2) = match alpha {
            StageTwoAlpha::Predicted => self.run_stage2(img, &mask, vocab, subset)?,
            StageTwoAlpha::AllOne => self.run_stage2_alpha(img, &AlphaMask::all_one(h, w), vocab, subset)?,
        };
        Ok(Prediction {
            mask,
            label,
            stage1_scores: bundle.s,
            stage2_scores: s2,
            subset: subset.to_vec(),
        })
    }

    /// Predictions for many images, in input order.
    pub fn infer_many(
        &self,
        samples: &[Sample],
        vocab: &Vocabulary,
        subset: &[usize],
        alpha: StageTwoAlpha,
    ) -> Result<Vec<Prediction>> {
        samples
            .par_iter()
            .map(|s| self.infer_with(&s.image, vocab, subset, alpha))
            .collect()
    }

    /// Runs the cascade on labelled samples and scores the predictions.
    pub fn evaluate(&self, samples: &[Sample], vocab: &Vocabulary, subset: &[usize]) -> Result<MetricsReport> {
        let preds = self.infer_many(samples, vocab, subset, StageTwoAlpha::Predicted)?;
        evaluate_records(&records(samples, &preds))
    }
}

/// Pairs predictions with their ground truth for scoring.
pub fn records(samples: &[Sample], preds: &[Prediction]) -> Vec<EvalRecord> {
    samples
        .iter()
        .zip(preds)
        .map(|(s, p)| EvalRecord {
            id: s.id.clone(),
            pred: Some(p.mask.clone()),
            gt: s.mask.clone(),
            gt_label: s.label,
            ranking: p.ranking(),
        })
        .collect()
}
