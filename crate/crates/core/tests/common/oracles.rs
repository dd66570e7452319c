//! Brute-force oracles for the segmentation measures, written directly from the
//! published definitions over 2-D grids. Shared by several test targets.
#![allow(dead_code)]

use camoseg::nncore::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Grid = Vec<Vec<f64>>;
pub const EPS: f64 = f64::EPSILON;

pub fn t(g: &Grid) -> Tensor {
    let h = g.len();
    let w = g[0].len();
    Tensor::new(&[h, w], g.iter().flatten().copied().collect()).unwrap()
}

pub fn oracle_mae(p: &Grid, g: &Grid) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for r in 0..p.len() {
        for c in 0..p[0].len() {
            s += (p[r][c] - g[r][c]).abs();
            n += 1.0;
        }
    }
    s / n
}

pub fn oracle_iou(p: &Grid, g: &Grid) -> f64 {
    let (mut i, mut u) = (0, 0);
    for r in 0..p.len() {
        for c in 0..p[0].len() {
            let a = p[r][c] >= 0.5;
            let b = g[r][c] > 0.5;
            if a && b {
                i += 1;
            }
            if a || b {
                u += 1;
            }
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

pub fn oracle_f_beta(p: &Grid, g: &Grid) -> f64 {
    let n = (p.len() * p[0].len()) as f64;
    let mean: f64 = p.iter().flatten().sum::<f64>() / n;
    let thr = if 2.0 * mean > 1.0 { 1.0 } else { 2.0 * mean };
    let mut tp = 0.0;
    let mut pos = 0.0;
    let mut fg = 0.0;
    for r in 0..p.len() {
        for c in 0..p[0].len() {
            let b = p[r][c] > 0.0 && p[r][c] >= thr;
            let y = g[r][c] == 1.0;
            if b {
                pos += 1.0;
            }
            if y {
                fg += 1.0;
            }
            if b && y {
                tp += 1.0;
            }
        }
    }
    let pr = if pos > 0.0 { tp / pos } else { 0.0 };
    let re = if fg > 0.0 { tp / fg } else { 0.0 };
    if 0.3 * pr + re == 0.0 {
        0.0
    } else {
        1.3 * pr * re / (0.3 * pr + re)
    }
}

pub fn oracle_e_measure(p: &Grid, g: &Grid) -> f64 {
    let (h, w) = (p.len(), p[0].len());
    let n = (h * w) as f64;
    let b: Grid = p
        .iter()
        .map(|r| r.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect())
        .collect();
    let mb = b.iter().flatten().sum::<f64>() / n;
    let mg = g.iter().flatten().sum::<f64>() / n;
    if mg == 0.0 {
        return 1.0 - mb;
    }
    if mg == 1.0 {
        return mb;
    }
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            let x = b[r][c] - mb;
            let y = g[r][c] - mg;
            let al = 2.0 * x * y / (x * x + y * y + EPS);
            s += (1.0 + al).powi(2) / 4.0;
        }
    }
    s / n
}

pub fn std_sample(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let d = if p.len() > 1 { n - 1.0 } else { 1.0 };
    let sx: f64 = p.iter().map(|a| (a - x).powi(2)).sum::<f64>() / d;
    let sy: f64 = g.iter().map(|a| (a - y).powi(2)).sum::<f64>() / d;
    let sxy: f64 = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx + sy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn banker(x: f64) -> f64 {
    let f = x.floor();
    let d = x - f;
    if d > 0.5 || (d == 0.5 && f % 2.0 != 0.0) {
        f + 1.0
    } else {
        f
    }
}

pub fn oracle_s_measure(p: &Grid, g: &Grid) -> f64 {
    let (h, w) = (p.len(), p[0].len());
    let n = (h * w) as f64;
    let mg = g.iter().flatten().sum::<f64>() / n;
    let mp = p.iter().flatten().sum::<f64>() / n;
    if mg == 0.0 {
        return 1.0 - mp;
    }
    if mg == 1.0 {
        return mp;
    }
    // object
    let mut fg = vec![];
    let mut bg = vec![];
    for r in 0..h {
        for c in 0..w {
            if g[r][c] == 1.0 {
                fg.push(p[r][c]);
            } else {
                bg.push(1.0 - p[r][c]);
            }
        }
    }
    let score = |v: &[f64]| {
        let x = v.iter().sum::<f64>() / v.len() as f64;
        2.0 * x / (x * x + 1.0 + std_sample(v) + EPS)
    };
    let so = mg * score(&fg) + (1.0 - mg) * score(&bg);
    // region
    let mut rows = vec![];
    let mut cols = vec![];
    for r in 0..h {
        for c in 0..w {
            if g[r][c] == 1.0 {
                rows.push(r as f64);
                cols.push(c as f64);
            }
        }
    }
    let cy = banker(rows.iter().sum::<f64>() / rows.len() as f64) as usize + 1;
    let cx = banker(cols.iter().sum::<f64>() / cols.len() as f64) as usize + 1;
    let (cx, cy) = (cx.min(w), cy.min(h));
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut sr = 0.0;
    let mut wsum = 0.0;
    for (k, (r0, r1, c0, c1)) in quads.iter().enumerate() {
        let wt = if k < 3 {
            ((r1 - r0) * (c1 - c0)) as f64 / n
        } else {
            1.0 - wsum
        };
        wsum += wt;
        if r1 <= r0 || c1 <= c0 {
            continue;
        }
        let mut pv = vec![];
        let mut gv = vec![];
        for r in *r0..*r1 {
            for c in *c0..*c1 {
                pv.push(p[r][c]);
                gv.push(g[r][c]);
            }
        }
        sr += wt * ssim(&pv, &gv);
    }
    (0.5 * so + 0.5 * sr).max(0.0)
}

pub fn oracle_wf_beta(p: &Grid, g: &Grid) -> f64 {
    let (h, w) = (p.len(), p[0].len());
    let fgs: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| g[r][c] == 1.0)
        .collect();
    if fgs.is_empty() {
        return 1.0 - p.iter().flatten().sum::<f64>() / (h * w) as f64;
    }
    let e: Grid = (0..h).map(|r| (0..w).map(|c| (p[r][c] - g[r][c]).abs()).collect()).collect();
    let mut et = e.clone();
    let mut dist = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            if g[r][c] == 1.0 {
                continue;
            }
            // exhaustive nearest foreground, first in raster order wins ties
            let mut best = (f64::INFINITY, 0, 0);
            for &(fr, fc) in &fgs {
                let d = ((fr as f64 - r as f64).powi(2) + (fc as f64 - c as f64).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, fr, fc);
                }
            }
            dist[r][c] = best.0;
            et[r][c] = e[best.1][best.2];
        }
    }
    // MATLAB fspecial('gaussian', 7, 5)
    let mut k = [[0.0f64; 7]; 7];
    let mut s = 0.0;
    for i in 0..7 {
        for j in 0..7 {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            k[i][j] = (-(x * x + y * y) / (2.0 * 25.0)).exp();
            s += k[i][j];
        }
    }
    let mut ew = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            let mut ea = 0.0;
            for i in 0..7 {
                for j in 0..7 {
                    let rr = r as i64 + i as i64 - 3;
                    let cc = c as i64 + j as i64 - 3;
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        ea += k[i][j] / s * et[rr as usize][cc as usize];
                    }
                }
            }
            let fg = g[r][c] == 1.0;
            let m = if fg && ea < e[r][c] { ea } else { e[r][c] };
            let b = if fg {
                1.0
            } else {
                2.0 - (0.5f64.ln() / 5.0 * dist[r][c]).exp()
            };
            ew[r][c] = m * b;
        }
    }
    let mut tp = 0.0;
    let mut efg = 0.0;
    let mut fp = 0.0;
    let mut nfg = 0.0;
    for r in 0..h {
        for c in 0..w {
            if g[r][c] == 1.0 {
                nfg += 1.0;
                efg += ew[r][c];
            } else {
                fp += ew[r][c];
            }
        }
    }
    tp += nfg - efg;
    let rec = 1.0 - efg / nfg;
    let pre = tp / (tp + fp + EPS);
    2.0 * rec * pre / (rec + pre + EPS)
}

/// A random prediction/ground-truth pair mixing degenerate and generic cases.
pub fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Grid, Grid) {
    let mode = rng.random_range(0..6);
    let g: Grid = (0..h)
        .map(|_| {
            (0..w)
                .map(|_| match mode {
                    0 => 0.0,
                    1 => 1.0,
                    _ => (rng.random::<f64>() < 0.4) as u8 as f64,
                })
                .collect()
        })
        .collect();
    let pmode = rng.random_range(0..4);
    let p: Grid = (0..h)
        .map(|r| {
            (0..w)
                .map(|c| match pmode {
                    0 => rng.random::<f64>(),
                    1 => (rng.random::<f64>() < 0.5) as u8 as f64,
                    2 => (0.7 * g[r][c] + 0.3 * rng.random::<f64>()).clamp(0.0, 1.0),
                    _ => (rng.random::<f64>() * 8.0).floor() / 8.0,
                })
                .collect()
        })
        .collect();
    (p, g)
}
