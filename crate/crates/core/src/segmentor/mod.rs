//! Adapter-tuned ViT segmentor with a prompt-conditioned, edge-refined mask decoder.

mod backbone;
mod decoder;
mod loss;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{encode, patch_pixels, Adapter, Adapters, Backbone, FeatureVars};
pub use decoder::{refine, CondWayBlock, DecodeVars, Decoder, PromptAdapter};
pub use loss::{seg_loss, seg_loss_value, LossWeights};
pub use train::{pretrain_backbone, train_decoder, BackboneConfig, SegTrainConfig, SegTrainLog};

use crate::dualenc::EmbeddingBundle;
use crate::error::{contract, Result};
use crate::nncore::functional::sigmoid;
use crate::nncore::{Graph, ParamStore, Tensor, Var};

/// Condition width of the full-size reference model.
pub const FULL_COND_DIM: usize = 256;
/// Deep feature width of the full-size reference model.
pub const FULL_WIDTH: usize = 256;
/// Deep feature grid side of the full-size reference model.
pub const FULL_GRID: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Backbone and decoder token width `c`.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub adapter_dim: usize,
    /// Width of the text/image embeddings fed to the prompt adapter.
    pub embed_dim: usize,
    /// Condition width `d_c`.
    pub cond_dim: usize,
    /// Channels of the upsampled and fused maps.
    pub up_channels: usize,
    pub cond_blocks: usize,
    pub mask_tokens: usize,
    pub cma_enabled: bool,
    pub ede_enabled: bool,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            width: 32,
            depth: 2,
            heads: 2,
            adapter_dim: 8,
            embed_dim: 64,
            cond_dim: 32,
            up_channels: 8,
            cond_blocks: 2,
            mask_tokens: 1,
            cma_enabled: true,
            ede_enabled: true,
            seed: 17,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.patch > 0 && self.image_size % self.patch == 0,
            "segmentor patch must divide image_size"
        );
        contract!(
            self.width >= 4 && self.width % 4 == 0,
            "segmentor width must be a positive multiple of 4"
        );
        contract!(
            self.heads > 0 && self.width % self.heads == 0,
            "segmentor heads must divide width"
        );
        contract!(self.depth >= 1, "segmentor depth must be at least 1");
        contract!(self.cond_blocks >= 1, "cond_blocks must be at least 1");
        contract!(self.mask_tokens == 1, "only one mask token is supported");
        contract!(
            self.adapter_dim > 0 && self.embed_dim > 0 && self.cond_dim > 0 && self.up_channels > 0,
            "segmentor dims must be positive"
        );
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }
}

/// Decoder outputs for one image. Logit maps are `2grid x 2grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    pub coarse_logits: Tensor,
    pub edge_logits: Tensor,
    pub fine_logits: Tensor,
    /// `H x W x 1` probabilities.
    pub mask: Tensor,
}

/// Parameter handles of the segmentor.
#[derive(Debug, Clone)]
pub struct SegNet {
    pub cfg: SegConfig,
    pub backbone: Backbone,
    pub adapters: Adapters,
    pub prompt_adapter: PromptAdapter,
    pub decoder: Decoder,
}

/// Graph handles of a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SegVars {
    pub features: FeatureVars,
    pub cond: Option<Var>,
    pub decode: DecodeVars,
}

impl SegNet {
    pub fn new(store: &mut ParamStore, cfg: &SegConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(store, cfg, &mut rng),
            adapters: Adapters::new(store, cfg, &mut rng),
            prompt_adapter: PromptAdapter::new(store, cfg, &mut rng),
            decoder: Decoder::new(store, cfg, &mut rng),
        })
    }

    pub fn features(&self, g: &mut Graph, img: &Tensor) -> Result<FeatureVars> {
        encode(g, &self.cfg, &self.backbone, &self.adapters, img)
    }

    /// `P_c` from a similarity bundle.
    pub fn condition(&self, g: &mut Graph, bundle: &EmbeddingBundle) -> Result<Var> {
        self.prompt_adapter.forward(g, &bundle.e_t, &bundle.e_v, &bundle.s)
    }

    /// Encoder, prompt adapter (when conditioning is enabled) and decoder.
    pub fn forward(&self, g: &mut Graph, img: &Tensor, bundle: &EmbeddingBundle) -> Result<SegVars> {
        let features = self.features(g, img)?;
        let cond = if self.cfg.cma_enabled {
            Some(self.condition(g, bundle)?)
        } else {
            None
        };
        let decode = self.decoder.forward(g, &self.cfg, features.x, features.x_shallow, cond)?;
        Ok(SegVars { features, cond, decode })
    }

    /// `sigmoid(upsample(fine))` at the input resolution.
    pub fn output(&self, g: &Graph, vars: &SegVars) -> Result<SegOutput> {
        let n = self.cfg.image_size;
        let side = 2 * self.cfg.grid();
        let flat = |v: Var| g.value(v).clone().reshape(&[side, side]);
        let fine = g.value(vars.decode.fine).clone();
        let up = crate::nncore::functional::resize_bilinear(&fine, n, n)?;
        Ok(SegOutput {
            coarse_logits: flat(vars.decode.coarse)?,
            edge_logits: flat(vars.decode.edge)?,
            fine_logits: flat(vars.decode.fine)?,
            mask: up.map(sigmoid),
        })
    }
}

/// A segmentor together with its parameters.
#[derive(Debug, Clone)]
pub struct Segmentor {
    pub net: SegNet,
    pub store: ParamStore,
}

/// Checkpoint section of a segmentor parameter name.
pub fn section_of(name: &str) -> &'static str {
    if name.starts_with("backbone.") {
        "backbone"
    } else if name.starts_with("adapters.") {
        "adapters"
    } else if name.starts_with("prompt_adapter.") {
        "prompt_adapter"
    } else {
        "decoder"
    }
}

impl Segmentor {
    pub fn new(cfg: &SegConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = SegNet::new(&mut store, cfg)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &SegConfig {
        &self.net.cfg
    }

    /// Deep features `grid x grid x c` and shallow features `2grid x 2grid x c/4`.
    pub fn encode_features(&self, img: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference(&self.store);
        let f = self.net.features(&mut g, img)?;
        let grid = self.net.cfg.grid();
        let x = g.value(f.x).clone().reshape(&[grid, grid, self.net.cfg.width])?;
        Ok((x, g.value(f.x_shallow).clone()))
    }

    pub fn prompt_adapter(&self, e_t: &Tensor, e_v: &Tensor, s: &[f64]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let p = self.net.prompt_adapter.forward(&mut g, e_t, e_v, s)?;
        Ok(g.value(p).clone())
    }

    pub fn segment(&self, img: &Tensor, bundle: &EmbeddingBundle) -> Result<SegOutput> {
        let mut g = Graph::inference(&self.store);
        let vars = self.net.forward(&mut g, img, bundle)?;
        self.net.output(&g, &vars)
    }
}
