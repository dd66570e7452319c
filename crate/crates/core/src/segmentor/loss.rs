use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DecodeVars, SegOutput};
use crate::error::{contract, Result};
use crate::nncore::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub iou: f64,
    pub edge: f64,
    pub coarse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            iou: 1.0,
            edge: 1.0,
            coarse: 0.5,
        }
    }
}

fn binary(t: &Tensor, what: &str) -> Result<Arc<Tensor>> {
    contract!(t.data().iter().all(|&v| v == 0.0 || v == 1.0), "{what} must be binary");
    Ok(Arc::new(t.clone()))
}

fn upsampled(g: &mut Graph, map: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(map).to_vec();
    let m = g.reshape(map, &[s[0], s[1], 1])?;
    g.resize(m, h, w)
}

/// Mask BCE + soft IoU on the refined logits, edge BCE, and coarse-mask BCE,
/// all at the resolution of `gt_mask`.
pub fn seg_loss(
    g: &mut Graph,
    coarse: Var,
    edge: Var,
    fine: Var,
    gt_mask: &Tensor,
    gt_edge: &Tensor,
    w: &LossWeights,
) -> Result<Var> {
    let s = gt_mask.shape();
    contract!(s.len() >= 2, "gt mask must be h x w");
    contract!(gt_edge.len() == gt_mask.len(), "gt edge and mask sizes differ");
    let (h, wd) = (s[0], s[1]);
    let gm = binary(gt_mask, "gt mask")?;
    let ge = binary(gt_edge, "gt edge")?;
    let fine = upsampled(g, fine, h, wd)?;
    let edge = upsampled(g, edge, h, wd)?;
    let coarse = upsampled(g, coarse, h, wd)?;
    let bce = g.bce_with_logits(fine, gm.clone())?;
    let iou = g.soft_iou_loss(fine, gm.clone())?;
    let eb = g.bce_with_logits(edge, ge)?;
    let cb = g.bce_with_logits(coarse, gm)?;
    let iou = g.scale(iou, w.iou);
    let eb = g.scale(eb, w.edge);
    let cb = g.scale(cb, w.coarse);
    let a = g.add(bce, iou)?;
    let b = g.add(eb, cb)?;
    g.add(a, b)
}

/// Graph-free evaluation of [`seg_loss`] on a finished output.
pub fn seg_loss_value(out: &SegOutput, gt_mask: &Tensor, gt_edge: &Tensor, w: &LossWeights) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let c = g.constant(out.coarse_logits.clone());
    let e = g.constant(out.edge_logits.clone());
    let f = g.constant(out.fine_logits.clone());
    let l = seg_loss(&mut g, c, e, f, gt_mask, gt_edge, w)?;
    Ok(g.value(l).data()[0])
}

impl DecodeVars {
    pub fn loss(&self, g: &mut Graph, gt_mask: &Tensor, gt_edge: &Tensor, w: &LossWeights) -> Result<Var> {
        seg_loss(g, self.coarse, self.edge, self.fine, gt_mask, gt_edge, w)
    }
}
