use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use super::vocab::Vocabulary;
use crate::error::{contract, Result};
use crate::nncore::layers::{Activation, LayerNorm, Mlp, TransformerBlock};
use crate::nncore::params::{trunc_normal, INIT_STD};
use crate::nncore::{Graph, ParamId, ParamStore, Tensor, Var};

/// Embedding width of the full-size reference model.
pub const FULL_EMBED_DIM: usize = 768;

/// Prefix shared by every prompt parameter name.
pub const PROMPT_PREFIX: &str = "prompts.";

/// Token embeddings start at unit scale so class words dominate the pooled text.
const TOKEN_STD: f64 = 1.0;

/// Rescales centered pixels to roughly unit spread.
const PIXEL_GAIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualEncConfig {
    pub embed_dim: usize,
    pub prompt_tokens: usize,
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub image_size: usize,
    pub max_text_len: usize,
    /// Initial softmax temperature.
    pub tau: f64,
    pub seed: u64,
}

impl Default for DualEncConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            prompt_tokens: 4,
            patch: 8,
            depth: 2,
            heads: 2,
            image_size: 64,
            max_text_len: 32,
            tau: 0.07,
            seed: 7,
        }
    }
}

impl DualEncConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.embed_dim > 0, "embed_dim must be positive");
        contract!(
            self.heads > 0 && self.embed_dim % self.heads == 0,
            "heads must divide embed_dim"
        );
        contract!(
            self.patch > 0 && self.image_size % self.patch == 0,
            "patch must divide image_size"
        );
        contract!(self.depth > 0, "depth must be positive");
        contract!(self.max_text_len > 0, "max_text_len must be positive");
        contract!(self.tau > 0.0 && self.tau.is_finite(), "tau must be positive");
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaKind {
    AllOne,
    GroundTruth,
    Predicted,
}

/// Per-pixel region weight fed to the alpha branch of the image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMask {
    values: Tensor,
    kind: AlphaKind,
}

impl AlphaMask {
    pub fn all_one(h: usize, w: usize) -> Self {
        Self {
            values: Tensor::full(&[h, w, 1], 1.0),
            kind: AlphaKind::AllOne,
        }
    }

    /// From a binary `h x w` (or `h x w x 1`) mask.
    pub fn ground_truth(mask: &Tensor) -> Result<Self> {
        let values = as_map(mask)?;
        contract!(
            values.data().iter().all(|&v| v == 0.0 || v == 1.0),
            "ground-truth alpha must be binary"
        );
        Ok(Self {
            values,
            kind: AlphaKind::GroundTruth,
        })
    }

    /// From a soft mask with values in [0, 1].
    pub fn predicted(mask: &Tensor) -> Result<Self> {
        let values = as_map(mask)?;
        contract!(
            values.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "predicted alpha must lie in [0, 1]"
        );
        Ok(Self {
            values,
            kind: AlphaKind::Predicted,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> AlphaKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

fn as_map(mask: &Tensor) -> Result<Tensor> {
    let s = mask.shape();
    contract!(
        s.len() == 2 || (s.len() == 3 && s[2] == 1),
        "alpha must be h x w or h x w x 1, got {s:?}"
    );
    mask.clone().reshape(&[s[0], s[1], 1])
}

/// Text encodings, image encoding and their cosine scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    /// `N x d`, one row per queried class.
    pub e_t: Tensor,
    /// `1 x d`.
    pub e_v: Tensor,
    pub s: Vec<f64>,
}

/// Learnable textual prompts and the injector producing visual prompts.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub textual: ParamId,
    pub injector: Mlp,
}

impl PromptSet {
    fn new(store: &mut ParamStore, cfg: &DualEncConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let textual = store.add(
            format!("{PROMPT_PREFIX}textual"),
            trunc_normal(rng, &[cfg.prompt_tokens, d], INIT_STD),
        );
        let injector = Mlp::new(store, &format!("{PROMPT_PREFIX}injector"), d, 2 * d, d, Activation::Relu, rng);
        Self { textual, injector }
    }

    pub fn textual(&self, g: &mut Graph) -> Var {
        g.param(self.textual)
    }

    /// `P_v`, recomputed from the current `P_t` on every call.
    pub fn visual(&self, g: &mut Graph) -> Result<Var> {
        let pt = g.param(self.textual);
        self.injector.forward(g, pt)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub proj: ParamId,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub rgb_conv: ParamId,
    pub alpha_conv: ParamId,
    pub patch_bias: ParamId,
    pub position: ParamId,
    pub class_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
    pub proj: ParamId,
}

/// Parameter handles of the dual encoder; computation is recorded on a graph
/// borrowing the matching [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DualNet {
    pub cfg: DualEncConfig,
    pub tokenizer: Tokenizer,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub prompts: PromptSet,
    /// `ln(1 / tau)`.
    pub logit_scale: ParamId,
}

impl DualNet {
    pub fn new(store: &mut ParamStore, cfg: &DualEncConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let tokenizer = Tokenizer::new();
        let text = TextEncoder {
            token_embed: store.add(
                "text.token_embed",
                trunc_normal(&mut rng, &[tokenizer.vocab_size(), d], TOKEN_STD),
            ),
            position: store.add("text.position", trunc_normal(&mut rng, &[cfg.max_text_len, d], 0.1)),
            blocks: (0..cfg.depth)
                .map(|i| TransformerBlock::new(store, &format!("text.block{i}"), d, cfg.heads, &mut rng))
                .collect(),
            ln_final: LayerNorm::new(store, "text.ln_final", d),
            proj: store.add("text.proj", trunc_normal(&mut rng, &[d, d], 1.0 / (d as f64).sqrt())),
        };
        let p = cfg.patch;
        let grid = cfg.grid();
        let conv_std = 1.0 / ((p * p * 3) as f64).sqrt();
        let vision = VisionEncoder {
            rgb_conv: store.add("vision.rgb_conv", trunc_normal(&mut rng, &[p, p, 3, d], conv_std)),
            alpha_conv: store.add(
                "vision.alpha_conv",
                trunc_normal(&mut rng, &[p, p, 1, d], 1.0 / ((p * p) as f64).sqrt()),
            ),
            patch_bias: store.add("vision.patch_bias", Tensor::zeros(&[1, d])),
            position: store.add("vision.position", trunc_normal(&mut rng, &[grid * grid, d], 0.1)),
            class_token: store.add("vision.class_token", trunc_normal(&mut rng, &[1, d], INIT_STD)),
            blocks: (0..cfg.depth)
                .map(|i| TransformerBlock::new(store, &format!("vision.block{i}"), d, cfg.heads, &mut rng))
                .collect(),
            ln_post: LayerNorm::new(store, "vision.ln_post", d),
            proj: store.add("vision.proj", trunc_normal(&mut rng, &[d, d], 1.0 / (d as f64).sqrt())),
        };
        let prompts = PromptSet::new(store, cfg, &mut rng);
        let logit_scale = store.add("logit_scale", Tensor::scalar((1.0 / cfg.tau).ln()));
        Ok(Self {
            cfg: cfg.clone(),
            tokenizer,
            text,
            vision,
            prompts,
            logit_scale,
        })
    }

    fn class_tokens(&self, name: &str) -> Vec<usize> {
        let mut ids = self.tokenizer.encode_class(name);
        ids.truncate(self.cfg.max_text_len);
        ids
    }

    /// Encodes one class name into an unnormalized `1 x d` row.
    fn text_row(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let d = self.cfg.embed_dim;
        let table = g.param(self.text.token_embed);
        let index: Vec<usize> = ids.iter().flat_map(|&t| (0..d).map(move |j| t * d + j)).collect();
        let tokens = g.gather(table, Arc::new(index), &[ids.len(), d])?;
        let pos = g.param(self.text.position);
        let pos = g.slice_rows(pos, 0, ids.len())?;
        let tokens = g.add(tokens, pos)?;
        let pt = self.prompts.textual(g);
        let mut x = g.concat_rows(&[pt, tokens])?;
        for b in &self.text.blocks {
            x = b.forward(g, x)?;
        }
        let pooled = g.mean_rows(x);
        let pooled = self.text.ln_final.forward(g, pooled)?;
        let proj = g.param(self.text.proj);
        g.matmul(pooled, proj)
    }

    /// `N x d` L2-normalized class embeddings for `subset`, in subset order.
    pub fn text_embeddings(&self, g: &mut Graph, vocab: &Vocabulary, subset: &[usize]) -> Result<Var> {
        contract!(!subset.is_empty(), "text subset must be nonempty");
        contract!(
            subset.iter().all(|&i| i < vocab.len()),
            "subset index out of range for a vocabulary of {}",
            vocab.len()
        );
        let names: Vec<&str> = subset.iter().map(|&i| vocab.name(i)).collect();
        self.text_embeddings_for(g, &names)
    }

    /// Same as [`DualNet::text_embeddings`] for free-form class names.
    pub fn text_embeddings_for(&self, g: &mut Graph, names: &[&str]) -> Result<Var> {
        contract!(!names.is_empty(), "text subset must be nonempty");
        let mut rows = Vec::with_capacity(names.len());
        for name in names {
            let ids = self.class_tokens(name);
            rows.push(self.text_row(g, &ids)?);
        }
        let e = g.concat_rows(&rows)?;
        Ok(g.l2_normalize_rows(e))
    }

    /// `1 x d` L2-normalized image embedding.
    pub fn image_embedding(&self, g: &mut Graph, img: &Tensor, alpha: &AlphaMask) -> Result<Var> {
        let s = img.shape();
        contract!(s.len() == 3 && s[2] == 3, "image must be h x w x 3, got {s:?}");
        contract!(
            alpha.height() == s[0] && alpha.width() == s[1],
            "alpha {}x{} does not match image {}x{}",
            alpha.height(),
            alpha.width(),
            s[0],
            s[1]
        );
        let n = self.cfg.image_size;
        contract!(
            s[0] == n && s[1] == n,
            "encoder expects {n}x{n} images, got {}x{}",
            s[0],
            s[1]
        );
        let d = self.cfg.embed_dim;
        let grid = self.cfg.grid();
        let x = g.constant(img.map(|v| (v - 0.5) * PIXEL_GAIN));
        let a = g.constant(alpha.values().map(|v| (v - 0.5) * 2.0));
        let kr = g.param(self.vision.rgb_conv);
        let ka = g.param(self.vision.alpha_conv);
        let fr = g.conv2d(x, kr, self.cfg.patch, 0)?;
        let fa = g.conv2d(a, ka, self.cfg.patch, 0)?;
        let f = g.add(fr, fa)?;
        let f = g.reshape(f, &[grid * grid, d])?;
        let bias = g.param(self.vision.patch_bias);
        let f = g.add_row(f, bias)?;
        let pos = g.param(self.vision.position);
        let patches = g.add(f, pos)?;
        let cls = g.param(self.vision.class_token);
        let pv = self.prompts.visual(g)?;
        let mut h = g.concat_rows(&[cls, pv, patches])?;
        for b in &self.vision.blocks {
            h = b.forward(g, h)?;
        }
        let lead = 1 + self.cfg.prompt_tokens;
        let c = g.slice_rows(h, lead, grid * grid)?;
        let c = g.mean_rows(c);
        let c = self.vision.ln_post.forward(g, c)?;
        let proj = g.param(self.vision.proj);
        let e = g.matmul(c, proj)?;
        Ok(g.l2_normalize_rows(e))
    }

    /// `S = E_v E_t^T` as a `1 x N` row on the graph.
    pub fn scores(&self, g: &mut Graph, e_t: Var, e_v: Var) -> Result<Var> {
        g.matmul_t(e_v, e_t)
    }

    /// Temperature-scaled logits `S / tau`.
    pub fn logits(&self, g: &mut Graph, s: Var) -> Result<Var> {
        let ls = g.param(self.logit_scale);
        let scale = g.exp(ls);
        g.scale_by(s, scale)
    }
}

/// Names of the parameters updated during prompt tuning.
pub fn is_prompt_param(name: &str) -> bool {
    name.starts_with(PROMPT_PREFIX)
}

/// A dual encoder together with its parameters.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub net: DualNet,
    pub store: ParamStore,
}

impl DualEncoder {
    pub fn new(cfg: &DualEncConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = DualNet::new(&mut store, cfg)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &DualEncConfig {
        &self.net.cfg
    }

    pub fn encode_text(&self, vocab: &Vocabulary, subset: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let e = self.net.text_embeddings(&mut g, vocab, subset)?;
        Ok(g.value(e).clone())
    }

    pub fn encode_names(&self, names: &[&str]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let e = self.net.text_embeddings_for(&mut g, names)?;
        Ok(g.value(e).clone())
    }

    pub fn encode_image(&self, img: &Tensor, alpha: &AlphaMask) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let e = self.net.image_embedding(&mut g, img, alpha)?;
        Ok(g.value(e).clone())
    }

    /// Encodes the image and scores it against precomputed text embeddings.
    pub fn bundle_with(&self, e_t: &Tensor, img: &Tensor, alpha: &AlphaMask) -> Result<EmbeddingBundle> {
        let e_v = self.encode_image(img, alpha)?;
        let s = similarity(e_t, &e_v)?;
        Ok(EmbeddingBundle {
            e_t: e_t.clone(),
            e_v,
            s,
        })
    }

    pub fn temperature(&self) -> f64 {
        (-self.store.tensor(self.net.logit_scale).data()[0]).exp()
    }
}

/// `S_i = <E_t[i], E_v>`.
pub fn similarity(e_t: &Tensor, e_v: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = e_t.as_matrix();
    contract!(e_v.len() == d, "similarity dims differ: text {d}, image {}", e_v.len());
    let v = e_v.data();
    Ok((0..n).map(|i| e_t.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect())
}

/// Position of the largest score, ties to the lowest index.
pub fn argmax(s: &[f64]) -> Result<usize> {
    contract!(!s.is_empty(), "argmax of an empty score vector");
    let mut best = 0;
    for (i, &v) in s.iter().enumerate().skip(1) {
        if v > s[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Class index `subset[argmax S]`.
pub fn classify(s: &[f64], subset: &[usize]) -> Result<usize> {
    contract!(!subset.is_empty(), "classify over an empty subset");
    contract!(
        s.len() == subset.len(),
        "score count {} differs from subset size {}",
        s.len(),
        subset.len()
    );
    Ok(subset[argmax(s)?])
}
