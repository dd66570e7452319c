//! Segmentation measures, class-aware gating and report rendering.

pub mod measures;
pub mod report;

pub use measures::{class_aware, class_aware_mae, e_measure, f_beta, iou, mae, s_measure, wf_beta, Pair};
pub use report::{aggregate, class_aware_row, evaluate, score_sample, Aggregates, EvalRecord, MetricsReport, SampleScores};
