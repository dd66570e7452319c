use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::SegConfig;
use crate::error::{contract, Result};
use crate::nncore::functional::pixel_shuffle_perm;
use crate::nncore::layers::{Linear, TransformerBlock};
use crate::nncore::params::{trunc_normal, INIT_STD};
use crate::nncore::{Graph, ParamId, ParamStore, Tensor, Var};

/// Residual bottleneck `x + up(relu(down(x)))`; `up` starts at zero.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            down: Linear::new(store, &format!("{name}.down"), dim, hidden, rng),
            up: Linear::zeroed(store, &format!("{name}.up"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.down.forward(g, x)?;
        let h = g.relu(h);
        let h = self.up.forward(g, h)?;
        g.add(x, h)
    }
}

/// ViT feature encoder; parameters live under `backbone.`.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub patch_embed: ParamId,
    pub patch_bias: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    /// Replaces hidden patches during reconstruction pretraining.
    pub mask_token: ParamId,
    /// Predicts the `p x p x 3` pixels of each patch.
    pub recon_head: Linear,
}

/// Trainable adapters, one per backbone block, under `adapters.`.
#[derive(Debug, Clone)]
pub struct Adapters {
    pub blocks: Vec<Adapter>,
}

/// Deep and shallow features of one image.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    /// `(grid * grid) x c` tokens from the last block.
    pub x: Var,
    /// `2grid x 2grid x c/4` from the first block.
    pub x_shallow: Var,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Self {
        let (p, c) = (cfg.patch, cfg.width);
        let grid = cfg.grid();
        Self {
            patch_embed: store.add(
                "backbone.patch_embed",
                trunc_normal(rng, &[p, p, 3, c], 1.0 / ((p * p * 3) as f64).sqrt()),
            ),
            patch_bias: store.add("backbone.patch_bias", Tensor::zeros(&[1, c])),
            position: store.add("backbone.position", trunc_normal(rng, &[grid * grid, c], 0.1)),
            blocks: (0..cfg.depth)
                .map(|i| TransformerBlock::new(store, &format!("backbone.block{i}"), c, cfg.heads, rng))
                .collect(),
            mask_token: store.add("backbone.mask_token", trunc_normal(rng, &[1, c], INIT_STD)),
            recon_head: Linear::new(store, "backbone.recon_head", c, p * p * 3, rng),
        }
    }

    /// Patch tokens before position codes, `(grid * grid) x c`.
    pub fn patchify(&self, g: &mut Graph, cfg: &SegConfig, img: &Tensor) -> Result<Var> {
        let s = img.shape();
        contract!(s.len() == 3 && s[2] == 3, "image must be h x w x 3, got {s:?}");
        contract!(
            s[0] % cfg.patch == 0 && s[1] % cfg.patch == 0,
            "image {}x{} is not divisible by patch size {}",
            s[0],
            s[1],
            cfg.patch
        );
        contract!(
            s[0] == cfg.image_size && s[1] == cfg.image_size,
            "segmentor expects {n}x{n} images, got {}x{}",
            s[0],
            s[1],
            n = cfg.image_size
        );
        let grid = cfg.grid();
        let x = g.constant(img.map(|v| (v - 0.5) * 4.0));
        let k = g.param(self.patch_embed);
        let f = g.conv2d(x, k, cfg.patch, 0)?;
        let f = g.reshape(f, &[grid * grid, cfg.width])?;
        let b = g.param(self.patch_bias);
        g.add_row(f, b)
    }

    pub fn add_position(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let pos = g.param(self.position);
        g.add(tokens, pos)
    }

    /// Masked-patch reconstruction loss: patches listed in `hidden` are
    /// replaced by the mask token and all patches are regressed.
    pub fn reconstruction_loss(&self, g: &mut Graph, cfg: &SegConfig, img: &Tensor, hidden: &[bool]) -> Result<Var> {
        let grid = cfg.grid();
        contract!(hidden.len() == grid * grid, "hidden mask must cover {} patches", grid * grid);
        let tokens = self.patchify(g, cfg, img)?;
        let mt = g.param(self.mask_token);
        let mut rows = Vec::with_capacity(hidden.len());
        for (i, &h) in hidden.iter().enumerate() {
            rows.push(if h { mt } else { g.slice_rows(tokens, i, 1)? });
        }
        let mut x = g.concat_rows(&rows)?;
        x = self.add_position(g, x)?;
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        let pred = self.recon_head.forward(g, x)?;
        let target = patch_pixels(img, cfg.patch)?;
        g.mse(pred, Arc::new(target))
    }
}

/// Rearranges an `h x w x 3` image into `(h/p * w/p) x (p * p * 3)` rows, centred.
pub fn patch_pixels(img: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * 3);
    for pi in 0..gh {
        for pj in 0..gw {
            for i in 0..p {
                for j in 0..p {
                    let base = ((pi * p + i) * w + pj * p + j) * 3;
                    out.extend(img.data()[base..base + 3].iter().map(|v| (v - 0.5) * 4.0));
                }
            }
        }
    }
    Tensor::new(&[gh * gw, p * p * 3], out)
}

impl Adapters {
    pub fn new(store: &mut ParamStore, cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            blocks: (0..cfg.depth)
                .map(|i| Adapter::new(store, &format!("adapters.block{i}"), cfg.width, cfg.adapter_dim, rng))
                .collect(),
        }
    }
}

/// Runs the frozen backbone with an adapter after every block.
pub fn encode(g: &mut Graph, cfg: &SegConfig, bb: &Backbone, ad: &Adapters, img: &Tensor) -> Result<FeatureVars> {
    let tokens = bb.patchify(g, cfg, img)?;
    let mut x = bb.add_position(g, tokens)?;
    let mut shallow = None;
    for (i, (b, a)) in bb.blocks.iter().zip(&ad.blocks).enumerate() {
        x = b.forward(g, x)?;
        x = a.forward(g, x)?;
        if i == 0 {
            shallow = Some(x);
        }
    }
    let grid = cfg.grid();
    let c = cfg.width;
    let perm = pixel_shuffle_perm(grid, grid, c);
    let x_shallow = g.gather(shallow.expect("depth >= 1"), Arc::new(perm), &[2 * grid, 2 * grid, c / 4])?;
    Ok(FeatureVars { x, x_shallow })
}
