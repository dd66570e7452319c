use rand_chacha::ChaCha8Rng;

use super::SegConfig;
use crate::dualenc::argmax;
use crate::error::{contract, Result};
use crate::nncore::layers::{Activation, Attention, LayerNorm, Linear, Mlp};
use crate::nncore::params::trunc_normal;
use crate::nncore::{Graph, ParamId, ParamStore, Tensor, Var};

/// Projects the selected text embedding and the image embedding into the
/// condition space. Parameters live under `prompt_adapter.`.
#[derive(Debug, Clone)]
pub struct PromptAdapter {
    pub text: Mlp,
    pub vis: Mlp,
}

impl PromptAdapter {
    pub fn new(store: &mut ParamStore, cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, dc) = (cfg.embed_dim, cfg.cond_dim);
        Self {
            text: Mlp::new(store, "prompt_adapter.text", d, 2 * dc, dc, Activation::Relu, rng),
            vis: Mlp::new(store, "prompt_adapter.vis", d, 2 * dc, dc, Activation::Relu, rng),
        }
    }

    /// `2 x d_c` condition prompts: the text row of the best-scoring class,
    /// then the image row.
    pub fn forward(&self, g: &mut Graph, e_t: &Tensor, e_v: &Tensor, s: &[f64]) -> Result<Var> {
        let n = e_t.rows();
        contract!(n >= 1, "prompt adapter needs at least one class");
        contract!(s.len() == n, "score count {} differs from {} text embeddings", s.len(), n);
        let best = argmax(s)?;
        let t = g.constant(Tensor::new(&[1, e_t.cols()], e_t.row(best).to_vec())?);
        let v = g.constant(e_v.clone().reshape(&[1, e_v.len()])?);
        let pt = self.text.forward(g, t)?;
        let pv = self.vis.forward(g, v)?;
        g.concat_rows(&[pt, pv])
    }
}

/// One conditional multi-way attention block.
#[derive(Debug, Clone)]
pub struct CondWayBlock {
    pub token_self: Attention,
    pub token_cond: Attention,
    pub token_image: Attention,
    pub token_mlp: Mlp,
    pub image_token: Attention,
    pub image_cond: Attention,
    pub norms: [LayerNorm; 6],
}

impl CondWayBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c, h) = (cfg.width, cfg.heads);
        let norm = |store: &mut ParamStore, i: usize| LayerNorm::new(store, &format!("{name}.norm{i}"), c);
        Self {
            token_self: Attention::new(store, &format!("{name}.token_self"), c, h, rng),
            token_cond: Attention::new(store, &format!("{name}.token_cond"), c, h, rng),
            token_image: Attention::new(store, &format!("{name}.token_image"), c, h, rng),
            token_mlp: Mlp::new(store, &format!("{name}.token_mlp"), c, 2 * c, c, Activation::Relu, rng),
            image_token: Attention::new(store, &format!("{name}.image_token"), c, h, rng),
            image_cond: Attention::new(store, &format!("{name}.image_cond"), c, h, rng),
            norms: [
                norm(store, 0),
                norm(store, 1),
                norm(store, 2),
                norm(store, 3),
                norm(store, 4),
                norm(store, 5),
            ],
        }
    }

    /// Returns updated `(x, tokens)`. `pe` is added to image keys and queries;
    /// `cond` is `None` when conditioning is disabled.
    pub fn forward(&self, g: &mut Graph, x: Var, tokens: Var, cond: Option<Var>, pe: Var) -> Result<(Var, Var)> {
        let a = self.token_self.forward(g, tokens, tokens, tokens)?;
        let t = g.add(tokens, a)?;
        let mut t = self.norms[0].forward(g, t)?;

        if let Some(p) = cond {
            let a = self.token_cond.forward(g, t, p, p)?;
            let s = g.add(t, a)?;
            t = self.norms[1].forward(g, s)?;
        }

        let keys = g.add(x, pe)?;
        let a = self.token_image.forward(g, t, keys, x)?;
        let s = g.add(t, a)?;
        let t = self.norms[2].forward(g, s)?;

        let m = self.token_mlp.forward(g, t)?;
        let s = g.add(t, m)?;
        let t = self.norms[3].forward(g, s)?;

        let queries = g.add(x, pe)?;
        let a = self.image_token.forward(g, queries, t, t)?;
        let s = g.add(x, a)?;
        let mut x = self.norms[4].forward(g, s)?;

        if let Some(p) = cond {
            let a = self.image_cond.forward(g, x, p, p)?;
            let s = g.add(x, a)?;
            x = self.norms[5].forward(g, s)?;
        }
        Ok((x, t))
    }
}

/// Everything after the image encoder and prompt adapter. Parameters live
/// under `decoder.`.
#[derive(Debug, Clone)]
pub struct Decoder {
    /// Maps `d_c` condition rows to the token width when they differ.
    pub cond_in: Option<Linear>,
    pub mask_token: ParamId,
    pub edge_token: ParamId,
    pub blocks: Vec<CondWayBlock>,
    pub tconv: ParamId,
    pub tconv_bias: ParamId,
    pub shallow_conv1: ParamId,
    pub shallow_bias1: ParamId,
    pub shallow_norm: LayerNorm,
    pub shallow_conv2: ParamId,
    pub shallow_bias2: ParamId,
    pub mask_mlp: Mlp,
    pub edge_mlp: Mlp,
}

/// Graph handles of the decoder outputs; maps are `2grid x 2grid x 1`.
#[derive(Debug, Clone, Copy)]
pub struct DecodeVars {
    pub x_tilde: Var,
    pub mask_token: Var,
    pub edge_token: Var,
    pub upsampled: Var,
    pub fusion: Var,
    pub coarse: Var,
    pub edge: Var,
    pub fine: Var,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c, cu, cs) = (cfg.width, cfg.up_channels, cfg.width / 4);
        let cond_in = (cfg.cond_dim != c).then(|| Linear::new(store, "decoder.cond_in", cfg.cond_dim, c, rng));
        let conv_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Self {
            cond_in,
            mask_token: store.add("decoder.mask_token", trunc_normal(rng, &[1, c], 1.0)),
            edge_token: store.add("decoder.edge_token", trunc_normal(rng, &[1, c], 1.0)),
            blocks: (0..cfg.cond_blocks)
                .map(|i| CondWayBlock::new(store, &format!("decoder.block{i}"), cfg, rng))
                .collect(),
            tconv: store.add("decoder.tconv", trunc_normal(rng, &[2, 2, cu, c], conv_std(c))),
            tconv_bias: store.add("decoder.tconv_bias", Tensor::zeros(&[1, cu])),
            shallow_conv1: store.add("decoder.shallow_conv1", trunc_normal(rng, &[3, 3, cs, cu], conv_std(9 * cs))),
            shallow_bias1: store.add("decoder.shallow_bias1", Tensor::zeros(&[1, cu])),
            shallow_norm: LayerNorm::new(store, "decoder.shallow_norm", cu),
            shallow_conv2: store.add("decoder.shallow_conv2", trunc_normal(rng, &[3, 3, cu, cu], conv_std(9 * cu))),
            shallow_bias2: store.add("decoder.shallow_bias2", Tensor::zeros(&[1, cu])),
            mask_mlp: Mlp::new(store, "decoder.mask_mlp", c, c, cu, Activation::Relu, rng),
            edge_mlp: Mlp::new(store, "decoder.edge_mlp", c, c, cu, Activation::Relu, rng),
        }
    }

    /// Stacked conditional multi-way attention over image tokens `x`
    /// (`(grid * grid) x c`). Returns `(x_tilde, mask_token, edge_token)`.
    pub fn cond_way_attn(&self, g: &mut Graph, cfg: &SegConfig, x: Var, cond: Option<Var>) -> Result<(Var, Var, Var)> {
        let grid = cfg.grid();
        contract!(
            g.shape(x) == [grid * grid, cfg.width],
            "image tokens {:?} do not match {}x{} grid of width {}",
            g.shape(x),
            grid,
            grid,
            cfg.width
        );
        let cond = match (cond, cfg.cma_enabled) {
            (Some(p), true) => {
                contract!(
                    g.shape(p) == [2, cfg.cond_dim],
                    "condition prompts must be 2 x {}",
                    cfg.cond_dim
                );
                Some(match &self.cond_in {
                    Some(l) => l.forward(g, p)?,
                    None => p,
                })
            }
            _ => None,
        };
        let pe = g.constant(crate::nncore::functional::sincos_position_code(grid, grid, cfg.width));
        let mt = g.param(self.mask_token);
        let et = g.param(self.edge_token);
        let mut tokens = g.concat_rows(&[mt, et])?;
        let mut x = x;
        for b in &self.blocks {
            (x, tokens) = b.forward(g, x, tokens, cond, pe)?;
        }
        let m = g.slice_rows(tokens, 0, 1)?;
        let e = g.slice_rows(tokens, 1, 1)?;
        Ok((x, m, e))
    }

    /// Transposed-conv upsampling of `x_tilde` to `2grid x 2grid x c_up`.
    pub fn upsample(&self, g: &mut Graph, cfg: &SegConfig, x_tilde: Var) -> Result<Var> {
        let grid = cfg.grid();
        let x = g.reshape(x_tilde, &[grid, grid, cfg.width])?;
        let k = g.param(self.tconv);
        let y = g.tconv2d(x, k, 2)?;
        let y = g.reshape(y, &[4 * grid * grid, cfg.up_channels])?;
        let b = g.param(self.tconv_bias);
        let y = g.add_row(y, b)?;
        g.reshape(y, &[2 * grid, 2 * grid, cfg.up_channels])
    }

    /// `Conv(ReLU(Norm(Conv(x_shallow))))`.
    pub fn shallow_branch(&self, g: &mut Graph, x_shallow: Var) -> Result<Var> {
        let s = g.shape(x_shallow).to_vec();
        contract!(s.len() == 3, "shallow features must be h x w x c");
        let (h, w) = (s[0], s[1]);
        let k1 = g.param(self.shallow_conv1);
        let y = g.conv2d(x_shallow, k1, 1, 1)?;
        let cu = g.shape(y)[2];
        let y = g.reshape(y, &[h * w, cu])?;
        let b1 = g.param(self.shallow_bias1);
        let y = g.add_row(y, b1)?;
        let y = self.shallow_norm.forward(g, y)?;
        let y = g.relu(y);
        let y = g.reshape(y, &[h, w, cu])?;
        let k2 = g.param(self.shallow_conv2);
        let y = g.conv2d(y, k2, 1, 1)?;
        let y = g.reshape(y, &[h * w, cu])?;
        let b2 = g.param(self.shallow_bias2);
        let y = g.add_row(y, b2)?;
        g.reshape(y, &[h, w, cu])
    }

    /// `X_fusion = up + shallow_branch(x_shallow)`.
    pub fn fuse_shallow(&self, g: &mut Graph, up: Var, x_shallow: Var) -> Result<Var> {
        let sb = self.shallow_branch(g, x_shallow)?;
        contract!(
            g.shape(up) == g.shape(sb),
            "upsampled features {:?} and shallow branch {:?} differ",
            g.shape(up),
            g.shape(sb)
        );
        g.add(up, sb)
    }

    /// Per-pixel inner product of a map `h x w x c` with a `1 x c` kernel row.
    fn token_map(g: &mut Graph, map: Var, kernel: Var) -> Result<Var> {
        let s = g.shape(map).to_vec();
        let flat = g.reshape(map, &[s[0] * s[1], s[2]])?;
        let y = g.matmul_t(flat, kernel)?;
        g.reshape(y, &[s[0], s[1], 1])
    }

    /// Coarse mask, edge and refined logits from the decoded tokens.
    pub fn heads(
        &self,
        g: &mut Graph,
        cfg: &SegConfig,
        mask_token: Var,
        edge_token: Var,
        up: Var,
        fusion: Var,
    ) -> Result<(Var, Var, Var)> {
        let wm = self.mask_mlp.forward(g, mask_token)?;
        let coarse = Self::token_map(g, up, wm)?;
        let we = self.edge_mlp.forward(g, edge_token)?;
        let edge = Self::token_map(g, fusion, we)?;
        let fine = if cfg.ede_enabled { refine(g, coarse, edge)? } else { coarse };
        Ok((coarse, edge, fine))
    }

    /// Full decode from image tokens, shallow features and condition prompts.
    pub fn forward(&self, g: &mut Graph, cfg: &SegConfig, x: Var, x_shallow: Var, cond: Option<Var>) -> Result<DecodeVars> {
        let (x_tilde, mask_token, edge_token) = self.cond_way_attn(g, cfg, x, cond)?;
        let upsampled = self.upsample(g, cfg, x_tilde)?;
        let fusion = self.fuse_shallow(g, upsampled, x_shallow)?;
        let (coarse, edge, fine) = self.heads(g, cfg, mask_token, edge_token, upsampled, fusion)?;
        Ok(DecodeVars {
            x_tilde,
            mask_token,
            edge_token,
            upsampled,
            fusion,
            coarse,
            edge,
            fine,
        })
    }
}

/// `coarse + coarse * sigmoid(edge)`.
pub fn refine(g: &mut Graph, coarse: Var, edge: Var) -> Result<Var> {
    let gate = g.sigmoid(edge);
    let r = g.mul(coarse, gate)?;
    g.add(coarse, r)
}
