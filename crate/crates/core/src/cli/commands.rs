use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::CheckpointArchive;
use super::config::RunConfig;
use crate::cascade::{pretrain_clip, train_seg, tune_clip, Cascade, PhaseReport, StageTwoAlpha};
use crate::dataforge::{
    generate, load_binary, load_gray, load_rgb, load_split, save_gray, DatasetManifest, Split, MANIFEST_FILE,
};
use crate::dualenc::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalRecord, MetricsReport};
use crate::nncore::Tensor;

pub const PRODUCED_FILE: &str = "produced.txt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";

/// Training phases in the order they must run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Phase {
    PretrainClip,
    TuneClip,
    TrainSeg,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainClip => "pretrain-clip",
            Phase::TuneClip => "tune-clip",
            Phase::TrainSeg => "train-seg",
        }
    }

    pub fn upstream(self) -> Option<Phase> {
        match self {
            Phase::PretrainClip => None,
            Phase::TuneClip => Some(Phase::PretrainClip),
            Phase::TrainSeg => Some(Phase::TuneClip),
        }
    }
}

/// Classes an inference run ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Query {
    Unseen,
    Seen,
    All,
}

impl Query {
    pub fn subset(self, vocab: &Vocabulary) -> Vec<usize> {
        match self {
            Query::Unseen => vocab.unseen().to_vec(),
            Query::Seen => vocab.seen().to_vec(),
            Query::All => vocab.all(),
        }
    }
}

pub fn checkpoint_path(cfg: &RunConfig, phase: Phase) -> PathBuf {
    cfg.run_dir().join("checkpoints").join(format!("{}.ckpt", phase.as_str()))
}

/// Tracks the files a run directory holds, with their SHA-256, in `produced.txt`.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let listing = root.join(PRODUCED_FILE);
        let mut files = BTreeMap::new();
        if listing.is_file() {
            let text = fs::read_to_string(&listing).map_err(|e| Error::io(&listing, e))?;
            for line in text.lines() {
                if let Some((hash, path)) = line.split_once("  ") {
                    files.insert(path.to_string(), hash.to_string());
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            files,
        })
    }

    pub fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        let key = rel.to_string_lossy().replace('\\', "/");
        let hash = Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        self.files.insert(key, hash);
        Ok(())
    }

    pub fn write(&mut self, rel: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.record(&path)?;
        Ok(path)
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    pub fn finish(&self) -> Result<()> {
        let mut text = String::new();
        for (path, hash) in &self.files {
            let _ = writeln!(text, "{hash}  {path}");
        }
        let listing = self.root.join(PRODUCED_FILE);
        fs::write(&listing, text).map_err(|e| Error::io(&listing, e))
    }
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.data_dir().join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Manifest(format!(
            "no dataset at {}; run `gen-data` first",
            path.display()
        )));
    }
    DatasetManifest::load(&path)
}

/// Writes the synthetic dataset under the run directory.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    let spec = cfg.data.generate_spec();
    let root = cfg.data_dir();
    let mut run = RunDir::open(cfg.run_dir())?;
    let m = generate(&spec, &root)?;
    run.record(&root.join(MANIFEST_FILE))?;
    for r in &m.records {
        for rel in [&r.image, &r.mask, &r.edge] {
            run.record(&m.path(rel))?;
        }
    }
    run.finish()?;
    info!(
        "generated {} samples ({} seen / {} unseen categories) in {}",
        m.records.len(),
        m.vocab.seen().len(),
        m.vocab.unseen().len(),
        root.display()
    );
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub phase: Phase,
    pub checkpoint: PathBuf,
    pub report: PhaseReport,
}

fn upstream_archive(cfg: &RunConfig, phase: Phase) -> Result<CheckpointArchive> {
    let up = phase.upstream().expect("phase has an upstream");
    let path = checkpoint_path(cfg, up);
    if !path.is_file() {
        return Err(Error::MissingUpstream {
            phase: phase.as_str().into(),
            path,
        });
    }
    let archive = CheckpointArchive::load(&path)?;
    if archive.phase != up.as_str() {
        return Err(Error::Checkpoint(format!(
            "{} was written by phase `{}`, expected `{}`",
            path.display(),
            archive.phase,
            up.as_str()
        )));
    }
    Ok(archive)
}

fn phase_log(report: &PhaseReport) -> String {
    let freeze: Vec<_> = report
        .freeze
        .iter()
        .map(|f| serde_json::json!({ "group": f.group, "tensors": f.tensors, "changed": f.changed }))
        .collect();
    let v = serde_json::json!({
        "steps": report.losses.len(),
        "final_loss": report.losses.last(),
        "gt_alpha_fraction": report.gt_alpha_fraction,
        "freeze": freeze,
    });
    serde_json::to_string_pretty(&v).expect("log serializes")
}

/// Runs one training phase and writes its checkpoint and loss log.
pub fn cmd_train(cfg: &RunConfig, phase: Phase) -> Result<TrainOutcome> {
    let upstream = phase.upstream().map(|_| upstream_archive(cfg, phase)).transpose()?;
    let manifest = load_manifest(cfg)?;
    let data = load_split(&manifest, Split::Train)?;
    let vocab = &manifest.vocab;
    let mut on_step = |step: usize, loss: f64| debug!("{} step {step} loss {loss:.6}", phase.as_str());
    info!("{}: {} training samples", phase.as_str(), data.len());
    let (archive, report) = match phase {
        Phase::PretrainClip => {
            let (enc, report) = pretrain_clip(&cfg.dualenc, &cfg.pretrain_clip, &data, vocab, &mut on_step)?;
            (CheckpointArchive::capture(phase.as_str(), cfg, &enc, None), report)
        }
        Phase::TuneClip => {
            let mut enc = upstream.as_ref().expect("upstream loaded").dualenc(&cfg.dualenc)?;
            let report = tune_clip(&mut enc, &cfg.tune_clip, &data, vocab, &mut on_step)?;
            (CheckpointArchive::capture(phase.as_str(), cfg, &enc, None), report)
        }
        Phase::TrainSeg => {
            let enc = upstream.as_ref().expect("upstream loaded").dualenc(&cfg.dualenc)?;
            let (seg, report) = train_seg(
                &enc,
                &cfg.segmentor,
                &cfg.backbone,
                &cfg.train_seg,
                &data,
                vocab,
                &mut on_step,
            )?;
            (CheckpointArchive::capture(phase.as_str(), cfg, &enc, Some(&seg)), report)
        }
    };
    let mut run = RunDir::open(cfg.run_dir())?;
    let checkpoint = checkpoint_path(cfg, phase);
    archive.save(&checkpoint)?;
    run.record(&checkpoint)?;
    let mut curve = String::from("step\tloss\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(curve, "{i}\t{l:e}");
    }
    run.write(&format!("logs/{}.tsv", phase.as_str()), curve.as_bytes())?;
    run.write(&format!("logs/{}.json", phase.as_str()), phase_log(&report).as_bytes())?;
    run.finish()?;
    info!(
        "{}: {} steps, final loss {:.4}, checkpoint {}",
        phase.as_str(),
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        checkpoint.display()
    );
    Ok(TrainOutcome {
        phase,
        checkpoint,
        report,
    })
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    /// Mask raster, relative to the predictions file.
    pub mask: String,
    pub label: usize,
    pub label_name: String,
    pub subset: Vec<usize>,
    pub stage1_scores: Vec<f64>,
    pub stage2_scores: Vec<f64>,
    /// Subset classes by decreasing stage-2 score.
    pub ranking: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct InferOptions {
    /// Images to segment; the test split when empty.
    pub images: Vec<PathBuf>,
    pub alpha: StageTwoAlpha,
    pub query: Query,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            images: Vec::new(),
            alpha: StageTwoAlpha::Predicted,
            query: Query::Unseen,
        }
    }
}

pub fn load_cascade(cfg: &RunConfig) -> Result<Cascade> {
    let path = checkpoint_path(cfg, Phase::TrainSeg);
    if !path.is_file() {
        return Err(Error::MissingUpstream {
            phase: "infer".into(),
            path,
        });
    }
    let archive = CheckpointArchive::load(&path)?;
    Cascade::new(archive.dualenc(&cfg.dualenc)?, archive.segmentor(&cfg.segmentor)?)
}

/// Runs the cascade and writes one mask raster and one record per image.
pub fn cmd_infer(cfg: &RunConfig, opts: &InferOptions) -> Result<Vec<PredictionRecord>> {
    let cascade = load_cascade(cfg)?;
    let manifest = load_manifest(cfg)?;
    let vocab = &manifest.vocab;
    let inputs: Vec<(String, Tensor)> = if opts.images.is_empty() {
        manifest
            .records(Split::Test)
            .map(|r| Ok((r.id.clone(), load_rgb(&manifest.path(&r.image))?)))
            .collect::<Result<_>>()?
    } else {
        opts.images
            .iter()
            .map(|p| {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((id, load_rgb(p)?))
            })
            .collect::<Result<_>>()?
    };
    let subset = opts.query.subset(vocab);
    let mut run = RunDir::open(cfg.run_dir())?;
    let mut lines = String::new();
    let mut out = Vec::with_capacity(inputs.len());
    for (id, img) in &inputs {
        let p = cascade.infer_with(img, vocab, &subset, opts.alpha)?;
        let rel = format!("masks/{id}.png");
        let path = cfg.run_dir().join("predictions").join(&rel);
        save_gray(&path, &p.mask)?;
        run.record(&path)?;
        let rec = PredictionRecord {
            id: id.clone(),
            mask: rel,
            label: p.label,
            label_name: vocab.name(p.label).to_string(),
            ranking: p.ranking(),
            subset: p.subset,
            stage1_scores: p.stage1_scores,
            stage2_scores: p.stage2_scores,
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
        out.push(rec);
    }
    run.write(&format!("predictions/{PREDICTIONS_FILE}"), lines.as_bytes())?;
    run.finish()?;
    info!("wrote {} predictions", out.len());
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Scores predictions against the test split of a manifest. Test samples
/// without a prediction are reported as excluded.
pub fn evaluate_files(manifest_path: &Path, predictions: &Path) -> Result<MetricsReport> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let preds = read_predictions(predictions)?;
    let base = predictions.parent().unwrap_or(Path::new("."));
    let by_id: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let records = manifest
        .records(Split::Test)
        .map(|r| {
            let gt = load_binary(&manifest.path(&r.mask))?;
            let (pred, ranking) = match by_id.get(r.id.as_str()) {
                Some(p) => (Some(load_gray(&base.join(&p.mask))?), p.ranking.clone()),
                None => (None, Vec::new()),
            };
            Ok(EvalRecord {
                id: r.id.clone(),
                pred,
                gt,
                gt_label: manifest.label(r),
                ranking,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&records)
}

/// Evaluates `predictions` (default: the run's own) and writes the report files.
pub fn cmd_eval(cfg: &RunConfig, predictions: Option<&Path>) -> Result<MetricsReport> {
    let default = cfg.run_dir().join("predictions").join(PREDICTIONS_FILE);
    let preds = predictions.unwrap_or(&default);
    let report = evaluate_files(&cfg.data_dir().join(MANIFEST_FILE), preds)?;
    let mut run = RunDir::open(cfg.run_dir())?;
    run.write(REPORT_JSON, report.to_json().as_bytes())?;
    run.write(REPORT_TABLE, report.table().as_bytes())?;
    run.finish()?;
    info!("\n{}", report.table());
    Ok(report)
}
