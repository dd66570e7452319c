use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::measures::{self, class_aware, class_aware_mae, Pair};
use crate::error::Result;
use crate::nncore::Tensor;

/// One sample to be scored.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub id: String,
    /// Predicted mask; `None` marks a missing prediction.
    pub pred: Option<Tensor>,
    pub gt: Tensor,
    pub gt_label: usize,
    /// Class indices ordered by decreasing score; the first is the prediction.
    pub ranking: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    pub gt_label: usize,
    pub pred_label: usize,
    pub top5: bool,
    pub s_measure: f64,
    pub wf_beta: f64,
    pub mae: f64,
    pub f_beta: f64,
    pub e_measure: f64,
    pub iou: f64,
    pub c_s_measure: f64,
    pub c_wf_beta: f64,
    pub c_mae: f64,
    pub c_f_beta: f64,
    pub c_e_measure: f64,
    pub c_iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub c_s_measure: f64,
    pub c_wf_beta: f64,
    pub c_mae: f64,
    pub c_f_beta: f64,
    pub c_e_measure: f64,
    pub c_iou: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub wf_beta: f64,
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub excluded: Vec<String>,
    pub aggregate: Aggregates,
    pub samples: Vec<SampleScores>,
}

/// Scores one prediction against its ground truth.
pub fn score_sample(id: &str, pred: &Tensor, gt: &Tensor, gt_label: usize, ranking: &[usize]) -> Result<SampleScores> {
    crate::error::contract!(!ranking.is_empty(), "sample {id} has an empty class ranking");
    let p = Pair::new(pred, gt)?;
    let pred_label = ranking[0];
    let (sm, wf, mae, fb, em, iou) = (
        measures::s_measure(&p),
        measures::wf_beta(&p),
        measures::mae(&p),
        measures::f_beta(&p),
        measures::e_measure(&p),
        measures::iou(&p),
    );
    Ok(SampleScores {
        id: id.to_string(),
        gt_label,
        pred_label,
        top5: ranking.iter().take(5).any(|&c| c == gt_label),
        s_measure: sm,
        wf_beta: wf,
        mae,
        f_beta: fb,
        e_measure: em,
        iou,
        c_s_measure: class_aware(sm, pred_label, gt_label),
        c_wf_beta: class_aware(wf, pred_label, gt_label),
        c_mae: class_aware_mae(mae, pred_label, gt_label),
        c_f_beta: class_aware(fb, pred_label, gt_label),
        c_e_measure: class_aware(em, pred_label, gt_label),
        c_iou: class_aware(iou, pred_label, gt_label),
    })
}

/// Scores every record and averages in record order.
pub fn evaluate(records: &[EvalRecord]) -> Result<MetricsReport> {
    let scored: Vec<Option<Result<SampleScores>>> = records
        .par_iter()
        .map(|r| {
            r.pred
                .as_ref()
                .filter(|_| !r.ranking.is_empty())
                .map(|p| score_sample(&r.id, p, &r.gt, r.gt_label, &r.ranking))
        })
        .collect();
    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    for (r, s) in records.iter().zip(scored) {
        match s {
            Some(s) => samples.push(s?),
            None => excluded.push(r.id.clone()),
        }
    }
    Ok(MetricsReport {
        count: samples.len(),
        excluded,
        aggregate: aggregate(&samples),
        samples,
    })
}

pub fn aggregate(samples: &[SampleScores]) -> Aggregates {
    if samples.is_empty() {
        return Aggregates::default();
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleScores) -> f64| samples.iter().map(f).sum::<f64>() / n;
    Aggregates {
        c_s_measure: mean(|s| s.c_s_measure),
        c_wf_beta: mean(|s| s.c_wf_beta),
        c_mae: mean(|s| s.c_mae),
        c_f_beta: mean(|s| s.c_f_beta),
        c_e_measure: mean(|s| s.c_e_measure),
        c_iou: mean(|s| s.c_iou),
        s_measure: mean(|s| s.s_measure),
        e_measure: mean(|s| s.e_measure),
        wf_beta: mean(|s| s.wf_beta),
        mae: mean(|s| s.mae),
        f_beta: mean(|s| s.f_beta),
        iou: mean(|s| s.iou),
        top1: mean(|s| (s.pred_label == s.gt_label) as u8 as f64),
        top5: mean(|s| s.top5 as u8 as f64),
    }
}

pub const CLASS_AWARE_COLUMNS: [&str; 6] = ["cS_m", "cF_β^w", "cMAE", "cF_β", "cE_m", "cIoU"];
pub const COS_COLUMNS: [&str; 4] = ["S_α", "E_φ", "F_β^ω", "MAE"];
pub const ACCURACY_COLUMNS: [&str; 2] = ["Top-1", "Top-5"];

fn row(label: &str, cols: &[&str], vals: &[f64]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{label:<12}");
    for c in cols {
        let _ = write!(s, " {c:>8}");
    }
    s.push('\n');
    let _ = write!(s, "{:<12}", "");
    for v in vals {
        let _ = write!(s, " {v:>8.3}");
    }
    s.push('\n');
    s
}

/// Fixed-width class-aware row in the order cS_m cF_β^w cMAE cF_β cE_m cIoU.
pub fn class_aware_row(a: &Aggregates) -> String {
    [a.c_s_measure, a.c_wf_beta, a.c_mae, a.c_f_beta, a.c_e_measure, a.c_iou]
        .iter()
        .map(|v| format!("{v:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::Error::Decode {
            path: "<report>".into(),
            message: e.to_string(),
        })
    }

    /// Human-readable tables: class-aware, class-agnostic and accuracy.
    pub fn table(&self) -> String {
        let a = &self.aggregate;
        let mut s = String::new();
        s.push_str(&row(
            "class-aware",
            &CLASS_AWARE_COLUMNS,
            &[a.c_s_measure, a.c_wf_beta, a.c_mae, a.c_f_beta, a.c_e_measure, a.c_iou],
        ));
        s.push_str(&row("mask-only", &COS_COLUMNS, &[a.s_measure, a.e_measure, a.wf_beta, a.mae]));
        s.push_str(&row("accuracy", &ACCURACY_COLUMNS, &[a.top1, a.top5]));
        let _ = writeln!(s, "samples {} excluded {}", self.count, self.excluded.len());
        s
    }
}
