//! Gradient-check fragments covering every differentiable graph primitive.
#![allow(dead_code)]

use std::sync::Arc;

use camoseg::nncore::layers::{Activation, Attention, Mlp, TransformerBlock};
use camoseg::nncore::params::trunc_normal;
use camoseg::nncore::{grad_check, Coverage, GradReport, Graph, ParamStore, Tensor, Var};
use camoseg::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    trunc_normal(r, shape, 0.5)
}

/// Reduces `y` to a scalar through a fixed random weighting so every output
/// element contributes a distinct gradient.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = rand_t(&mut rng(seed), g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (n, sh) in shapes {
        s.add(*n, rand_t(&mut r, sh));
    }
    s
}

fn check<F>(store: &mut ParamStore, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    grad_check(store, EPS, Coverage::All, f)
}

fn grad_exp() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 4])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.exp(x)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_relu() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 4])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.relu(x)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_gelu() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 4])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.gelu(x)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_sigmoid() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 4])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.sigmoid(x)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_softmax_rows() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 5])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.softmax_rows(x)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_scale() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[2, 3])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.scale(x, -1.7)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_transpose() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[2, 5])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.transpose(x)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_l2_normalize() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 4])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.l2_normalize_rows(x)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_mean_rows() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[4, 3])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.mean_rows(x)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_mean() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[4, 3])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| -> Result<Var> { Ok(g.mean(x)) };
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_slice_rows() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[5, 3])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| g.slice_rows(x, 1, 3);
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_slice_cols() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 5])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| g.slice_cols(x, 2, 2);
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_reshape() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[2, 6])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| g.reshape(x, &[3, 2, 2]);
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_resize_up() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 3, 2])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| g.resize(x, 7, 5);
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_resize_down() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[6, 6, 1])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| g.resize(x, 4, 3);
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_gather() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[2, 4])], 1);
    let id = s.id("x").unwrap();
    let op = |g: &mut Graph, x| g.gather(x, Arc::new(vec![3, 0, 0, 7, 5, 2]), &[3, 2]);
    check(&mut s, |g| {
        let x = g.param(id);
        let y = op(g, x)?;
        probe(g, y, 7)
    })
}

fn grad_binary_elementwise() -> Result<GradReport> {
    let mut s = store_with(&[("a", &[3, 4]), ("b", &[3, 4])], 2);
    let (a, b) = (s.id("a").unwrap(), s.id("b").unwrap());
    check(&mut s, |g| {
        let (a, b) = (g.param(a), g.param(b));
        let x = g.add(a, b)?;
        let y = g.sub(x, b)?;
        let z = g.mul(y, b)?;
        probe(g, z, 3)
    })
}

fn grad_matmul_variants() -> Result<GradReport> {
    let mut s = store_with(&[("a", &[3, 4]), ("b", &[4, 2]), ("c", &[5, 4])], 3);
    let ids = (s.id("a").unwrap(), s.id("b").unwrap(), s.id("c").unwrap());
    check(&mut s, |g| {
        let (a, b, c) = (g.param(ids.0), g.param(ids.1), g.param(ids.2));
        let x = g.matmul(a, b)?;
        let y = g.matmul_t(a, c)?;
        let p = probe(g, x, 4)?;
        let q = probe(g, y, 5)?;
        let t = g.add(p, q)?;
        Ok(t)
    })
}

fn grad_add_row_and_scale_by() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 4]), ("r", &[1, 4]), ("s", &[1, 1])], 4);
    let ids = (s.id("x").unwrap(), s.id("r").unwrap(), s.id("s").unwrap());
    check(&mut s, |g| {
        let (x, r, sc) = (g.param(ids.0), g.param(ids.1), g.param(ids.2));
        let y = g.add_row(x, r)?;
        let y = g.scale_by(y, sc)?;
        probe(g, y, 6)
    })
}

fn grad_layer_norm() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 5]), ("gain", &[1, 5]), ("bias", &[1, 5])], 5);
    let ids = (s.id("x").unwrap(), s.id("gain").unwrap(), s.id("bias").unwrap());
    check(&mut s, |g| {
        let (x, ga, b) = (g.param(ids.0), g.param(ids.1), g.param(ids.2));
        let y = g.layer_norm(x, ga, b)?;
        probe(g, y, 8)
    })
}

fn grad_concat() -> Result<GradReport> {
    let mut s = store_with(&[("a", &[2, 3]), ("b", &[1, 3]), ("c", &[2, 2])], 6);
    let ids = (s.id("a").unwrap(), s.id("b").unwrap(), s.id("c").unwrap());
    check(&mut s, |g| {
        let (a, b, c) = (g.param(ids.0), g.param(ids.1), g.param(ids.2));
        let r = g.concat_rows(&[a, b, a])?;
        let k = g.concat_cols(&[a, c])?;
        let p = probe(g, r, 9)?;
        let q = probe(g, k, 10)?;
        g.add(p, q)
    })
}

fn grad_conv2d_padded_and_strided() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[5, 5, 2]), ("k", &[3, 3, 2, 3]), ("k2", &[2, 2, 2, 2])], 7);
    let ids = (s.id("x").unwrap(), s.id("k").unwrap(), s.id("k2").unwrap());
    check(&mut s, |g| {
        let (x, k, k2) = (g.param(ids.0), g.param(ids.1), g.param(ids.2));
        let y = g.conv2d(x, k, 1, 1)?;
        let p = probe(g, y, 11)?;
        let x4 = g.slice_rows(x, 0, 4)?; // rows of a h x w x c tensor are (h, w) pairs
        let x4 = g.reshape(x4, &[2, 2, 2])?;
        let z = g.conv2d(x4, k2, 2, 0)?;
        let q = probe(g, z, 12)?;
        g.add(p, q)
    })
}

fn grad_tconv2d() -> Result<GradReport> {
    let mut s = store_with(&[("x", &[3, 2, 3]), ("k", &[2, 2, 2, 3])], 8);
    let ids = (s.id("x").unwrap(), s.id("k").unwrap());
    check(&mut s, |g| {
        let (x, k) = (g.param(ids.0), g.param(ids.1));
        let y = g.tconv2d(x, k, 2)?;
        assert_eq!(g.shape(y), &[6, 4, 2]);
        probe(g, y, 13)
    })
}

fn grad_losses() -> Result<GradReport> {
    let mut s = store_with(&[("z", &[1, 6])], 9);
    let id = s.id("z").unwrap();
    let target = Arc::new(Tensor::new(&[1, 6], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap());
    let soft = Arc::new(Tensor::new(&[1, 6], vec![0.2, 0.9, 0.5, 0.1, 0.7, 0.3]).unwrap());
    check(&mut s, |g| {
        let z = g.param(id);
        let a = g.cross_entropy(z, 4)?;
        let b = g.bce_with_logits(z, target.clone())?;
        let c = g.soft_iou_loss(z, target.clone())?;
        let d = g.mse(z, soft.clone())?;
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        g.add(ab, cd)
    })
}

fn grad_composite_layers() -> Result<GradReport> {
    let mut r = rng(13);
    let mut s = ParamStore::new();
    let blk = TransformerBlock::new(&mut s, "blk", 8, 2, &mut r);
    let att = Attention::new(&mut s, "xatt", 8, 1, &mut r);
    let mlp = Mlp::new(&mut s, "mlp", 8, 16, 4, Activation::Relu, &mut r);
    for id in s.ids().collect::<Vec<_>>() {
        let sh = s.tensor(id).shape().to_vec();
        *s.tensor_mut(id) = trunc_normal(&mut r, &sh, 0.3);
    }
    let x = rand_t(&mut r, &[5, 8]);
    let m = rand_t(&mut r, &[3, 8]);
    check(&mut s, |g| {
        let xv = g.constant(x.clone());
        let mv = g.constant(m.clone());
        let h = blk.forward(g, xv)?;
        let h = att.forward(g, h, mv, mv)?;
        let o = mlp.forward(g, h)?;
        probe(g, o, 21)
    })
}

/// Every fragment by name.
pub fn all() -> Vec<(&'static str, fn() -> Result<GradReport>)> {
    vec![
        ("exp", grad_exp),
        ("relu", grad_relu),
        ("gelu", grad_gelu),
        ("sigmoid", grad_sigmoid),
        ("softmax_rows", grad_softmax_rows),
        ("scale", grad_scale),
        ("transpose", grad_transpose),
        ("l2_normalize", grad_l2_normalize),
        ("mean_rows", grad_mean_rows),
        ("mean", grad_mean),
        ("slice_rows", grad_slice_rows),
        ("slice_cols", grad_slice_cols),
        ("reshape", grad_reshape),
        ("resize_up", grad_resize_up),
        ("resize_down", grad_resize_down),
        ("gather", grad_gather),
        ("binary_elementwise", grad_binary_elementwise),
        ("matmul_variants", grad_matmul_variants),
        ("add_row_and_scale_by", grad_add_row_and_scale_by),
        ("layer_norm", grad_layer_norm),
        ("concat", grad_concat),
        ("conv2d_padded_and_strided", grad_conv2d_padded_and_strided),
        ("tconv2d", grad_tconv2d),
        ("losses", grad_losses),
        ("composite_layers", grad_composite_layers),
    ]
}
