//! Per-sample segmentation measures over an `h x w` prediction in [0, 1] and a
//! binary ground truth.

use crate::error::{contract, Result};
use crate::nncore::Tensor;

/// Machine epsilon used by the reference measure implementations.
pub const EPS: f64 = f64::EPSILON;

/// Binarization threshold for IoU and E-measure.
pub const THRESHOLD: f64 = 0.5;

pub const F_BETA2: f64 = 0.3;
pub const WF_BETA2: f64 = 1.0;
pub const S_ALPHA: f64 = 0.5;

/// A prediction/ground-truth pair validated for measurement.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub h: usize,
    pub w: usize,
    pub pred: &'a [f64],
    pub gt: &'a [f64],
}

fn hw(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    match s.len() {
        2 => Ok((s[0], s[1])),
        3 if s[2] == 1 => Ok((s[0], s[1])),
        _ => Err(crate::Error::Contract(format!(
            "expected an h x w (or h x w x 1) map, got {s:?}"
        ))),
    }
}

impl<'a> Pair<'a> {
    pub fn new(pred: &'a Tensor, gt: &'a Tensor) -> Result<Self> {
        let (h, w) = hw(pred)?;
        let (gh, gw) = hw(gt)?;
        contract!(
            (h, w) == (gh, gw),
            "prediction {h}x{w} and ground truth {gh}x{gw} differ in shape"
        );
        contract!(
            gt.data().iter().all(|&v| v == 0.0 || v == 1.0),
            "ground truth must be strictly binary"
        );
        contract!(
            pred.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "prediction values must lie in [0, 1]"
        );
        Ok(Self {
            h,
            w,
            pred: pred.data(),
            gt: gt.data(),
        })
    }

    fn n(&self) -> f64 {
        (self.h * self.w) as f64
    }

    fn fg(&self, i: usize) -> bool {
        self.gt[i] == 1.0
    }

    fn gt_mean(&self) -> f64 {
        self.gt.iter().sum::<f64>() / self.n()
    }
}

pub fn mae(p: &Pair) -> f64 {
    let s: f64 = p.pred.iter().zip(p.gt).map(|(a, b)| (a - b).abs()).sum();
    s / p.n()
}

/// Intersection over union of `pred >= 0.5` with the ground truth; 1 when both are empty.
pub fn iou(p: &Pair) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..p.pred.len() {
        let b = p.pred[i] >= THRESHOLD;
        let g = p.fg(i);
        inter += (b && g) as usize;
        union += (b || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// F-measure at the adaptive threshold `min(2 mean(P), 1)`.
pub fn f_beta(p: &Pair) -> f64 {
    let thr = (2.0 * p.pred.iter().sum::<f64>() / p.n()).min(1.0);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for i in 0..p.pred.len() {
        let b = p.pred[i] >= thr && p.pred[i] > 0.0;
        match (b, p.fg(i)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let pr = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let re = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let den = F_BETA2 * pr + re;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + F_BETA2) * pr * re / den
    }
}

/// Enhanced alignment of `pred >= 0.5` against the ground truth.
pub fn e_measure(p: &Pair) -> f64 {
    let n = p.n();
    let bin: Vec<f64> = p.pred.iter().map(|&v| (v >= THRESHOLD) as u8 as f64).collect();
    let gm = p.gt_mean();
    let bm = bin.iter().sum::<f64>() / n;
    if gm == 0.0 {
        return 1.0 - bm;
    }
    if gm == 1.0 {
        return bm;
    }
    let mut s = 0.0;
    for (b, g) in bin.iter().zip(p.gt) {
        let (db, dg) = (b - bm, g - gm);
        let align = 2.0 * db * dg / (db * db + dg * dg + EPS);
        s += (align + 1.0) * (align + 1.0) / 4.0;
    }
    s / n
}

/// Structure measure combining object- and region-level similarity.
pub fn s_measure(p: &Pair) -> f64 {
    let gm = p.gt_mean();
    let pm = p.pred.iter().sum::<f64>() / p.n();
    if gm == 0.0 {
        return 1.0 - pm;
    }
    if gm == 1.0 {
        return pm;
    }
    let s = S_ALPHA * s_object(p) + (1.0 - S_ALPHA) * s_region(p);
    s.max(0.0)
}

fn object_score(vals: &[f64]) -> f64 {
    let n = vals.len();
    let x = vals.iter().sum::<f64>() / n as f64;
    let sigma = if n > 1 {
        (vals.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(p: &Pair) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for i in 0..p.pred.len() {
        if p.fg(i) {
            fg.push(p.pred[i]);
        } else {
            bg.push(1.0 - p.pred[i]);
        }
    }
    let u = p.gt_mean();
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Round half to even, as numpy does.
pub(crate) fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - x.signum()
    } else {
        r
    }
}

/// Split point (column, row) one past the rounded foreground centroid.
pub(crate) fn centroid(p: &Pair) -> (usize, usize) {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for r in 0..p.h {
        for c in 0..p.w {
            if p.fg(r * p.w + c) {
                sr += r as f64;
                sc += c as f64;
                n += 1;
            }
        }
    }
    let (y, x) = if n == 0 {
        (round_half_even(p.h as f64 / 2.0), round_half_even(p.w as f64 / 2.0))
    } else {
        (round_half_even(sr / n as f64), round_half_even(sc / n as f64))
    };
    (x as usize + 1, y as usize + 1)
}

fn block_ssim(p: &Pair, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
    let n = (r1 - r0) * (c1 - c0);
    let mut pv = Vec::with_capacity(n);
    let mut gv = Vec::with_capacity(n);
    for r in r0..r1 {
        for c in c0..c1 {
            pv.push(p.pred[r * p.w + c]);
            gv.push(p.gt[r * p.w + c]);
        }
    }
    let x = pv.iter().sum::<f64>() / n as f64;
    let y = gv.iter().sum::<f64>() / n as f64;
    let div = (n.max(2) - 1) as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in pv.iter().zip(&gv) {
        sx += (a - x) * (a - x);
        sy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let (sx, sy, sxy) = (sx / div, sy / div, sxy / div);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: &Pair) -> f64 {
    let (x, y) = centroid(p);
    let (x, y) = (x.min(p.w), y.min(p.h));
    let area = p.n();
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (p.w - x)) as f64 / area;
    let w3 = ((p.h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let blocks = [(w1, 0, y, 0, x), (w2, 0, y, x, p.w), (w3, y, p.h, 0, x), (w4, y, p.h, x, p.w)];
    let mut s = 0.0;
    for (wt, r0, r1, c0, c1) in blocks {
        if r1 > r0 && c1 > c0 {
            s += wt * block_ssim(p, r0, r1, c0, c1);
        }
    }
    s
}

/// 7x7 Gaussian with sigma 5, small entries zeroed and normalized to unit sum.
pub(crate) fn gauss_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut max: f64 = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
            max = max.max(*v);
        }
    }
    let mut sum = 0.0;
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            if *v < EPS * max {
                *v = 0.0;
            }
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// For every pixel, the squared distance to and index of the nearest foreground
/// pixel (ties go to the lowest linear index). Foreground pixels map to themselves.
pub(crate) fn nearest_foreground(p: &Pair) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = (p.h, p.w);
    // Foreground columns per row, for pruned search.
    let rows: Vec<Vec<usize>> = (0..h).map(|r| (0..w).filter(|&c| p.fg(r * w + c)).collect()).collect();
    let mut dist = vec![f64::INFINITY; h * w];
    let mut idx = vec![usize::MAX; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best = usize::MAX;
            let mut best_i = usize::MAX;
            for (rr, cols) in rows.iter().enumerate() {
                let dr = rr.abs_diff(r);
                if dr * dr > best {
                    continue;
                }
                for &cc in cols {
                    let dc = cc.abs_diff(c);
                    let d = dr * dr + dc * dc;
                    let i = rr * w + cc;
                    if d < best || (d == best && i < best_i) {
                        best = d;
                        best_i = i;
                    }
                }
            }
            dist[r * w + c] = (best as f64).sqrt();
            idx[r * w + c] = best_i;
        }
    }
    (dist, idx)
}

/// Weighted F-measure with dependency-propagated and distance-weighted errors.
pub fn wf_beta(p: &Pair) -> f64 {
    let (h, w) = (p.h, p.w);
    if p.gt.iter().all(|&g| g == 0.0) {
        return 1.0 - p.pred.iter().sum::<f64>() / p.n();
    }
    let (dst, nearest) = nearest_foreground(p);
    let e: Vec<f64> = p.pred.iter().zip(p.gt).map(|(a, b)| (a - b).abs()).collect();
    let et: Vec<f64> = (0..h * w).map(|i| if p.fg(i) { e[i] } else { e[nearest[i]] }).collect();
    let k = gauss_kernel();
    let mut ew = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut ea = 0.0;
            for (ki, krow) in k.iter().enumerate() {
                let rr = r as isize + ki as isize - 3;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for (kj, kv) in krow.iter().enumerate() {
                    let cc = c as isize + kj as isize - 3;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    ea += kv * et[rr as usize * w + cc as usize];
                }
            }
            let m = if p.fg(i) && ea < e[i] { ea } else { e[i] };
            let b = if p.fg(i) {
                1.0
            } else {
                2.0 - ((0.5f64).ln() / 5.0 * dst[i]).exp()
            };
            ew[i] = m * b;
        }
    }
    let (mut n_fg, mut ew_fg, mut ew_bg) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        if p.fg(i) {
            n_fg += 1.0;
            ew_fg += ew[i];
        } else {
            ew_bg += ew[i];
        }
    }
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let pr = tpw / (tpw + ew_bg + EPS);
    (1.0 + WF_BETA2) * r * pr / (r + WF_BETA2 * pr + EPS)
}

/// Gates a segmentation score by classification correctness.
pub fn class_aware(m: f64, pred_label: usize, gt_label: usize) -> f64 {
    if pred_label == gt_label {
        m
    } else {
        0.0
    }
}

/// Class-aware MAE: gates the complement so a wrong label scores 1.
pub fn class_aware_mae(mae: f64, pred_label: usize, gt_label: usize) -> f64 {
    1.0 - class_aware(1.0 - mae, pred_label, gt_label)
}
