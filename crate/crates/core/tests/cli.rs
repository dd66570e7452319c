#[path = "common/oracles.rs"]
mod oracles;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use camoseg::cascade::StageTwoAlpha;
use camoseg::cli::*;
use camoseg::dataforge::{generate, load_binary, load_gray, save_gray, GenerateSpec, Split, MANIFEST_FILE};
use camoseg::dualenc::DualEncoder;
use camoseg::nncore::{DType, Tensor};
use camoseg::segmentor::Segmentor;
use camoseg::Error;
use oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const TINY: &str = r#"
[data]
train_count = 24
test_count = 8
height = 16
width = 16

[dualenc]
embed_dim = 16
prompt_tokens = 2
patch = 4
depth = 1
image_size = 16

[pretrain_clip]
epochs = 1
batch = 8

[tune_clip]
epochs = 1
batch = 8

[segmentor]
image_size = 16
patch = 4
width = 8
adapter_dim = 4
embed_dim = 16
cond_dim = 8
up_channels = 4

[backbone]
epochs = 1
batch = 8

[train_seg]
epochs = 1
batch = 8
"#;

fn tiny(run_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(TINY).unwrap();
    cfg.paths.run_dir = run_dir.to_path_buf();
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn bin() -> Proc {
    let mut c = Proc::new(env!("CARGO_BIN_EXE_camoseg"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_bin(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_config_is_valid_with_eight_seen_and_four_unseen() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    let v = cfg.data.generate_spec().vocabulary().unwrap();
    assert_eq!(v.seen().len(), 8);
    assert_eq!(v.unseen().len(), 4);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
}

#[test]
fn unknown_keys_are_rejected_anywhere() {
    for text in [
        "bogus = 1",
        "[dualenc]\nembed = 4",
        "[segmentor]\ncma = false",
        "[train_seg.loss]\nlambda = 2.0",
        "[paths]\nrun = \"x\"",
        "[mystery]\n",
    ] {
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn invalid_values_name_their_field() {
    let cases = [
        ("[data]\nunseen = []", "data.unseen"),
        ("[data]\nkappa = 1.5", "data.kappa"),
        ("[segmentor]\nembed_dim = 32", "embed_dim"),
        ("[dualenc]\nimage_size = 32", "image_size"),
        ("[train_seg]\nbatch = 0", "train_seg"),
    ];
    for (text, field) in cases {
        let err = RunConfig::from_toml(text).unwrap_err().to_string();
        assert!(err.contains(field), "{err}");
    }
}

#[test]
fn seed_override_touches_every_seed() {
    let a = RunConfig::default().with_seed(100);
    let b = RunConfig::default().with_seed(101);
    assert_ne!(a.data.seed, b.data.seed);
    assert_ne!(a.dualenc.seed, b.dualenc.seed);
    assert_ne!(a.pretrain_clip.seed, b.pretrain_clip.seed);
    assert_ne!(a.tune_clip.seed, b.tune_clip.seed);
    assert_ne!(a.segmentor.seed, b.segmentor.seed);
    assert_ne!(a.backbone.seed, b.backbone.seed);
    assert_ne!(a.train_seg.seed, b.train_seg.seed);
}

fn archive(dtype: StorageDType) -> (RunConfig, CheckpointArchive, DualEncoder, Segmentor) {
    let mut cfg = tiny(Path::new("unused"));
    cfg.checkpoint.dtype = dtype;
    let enc = DualEncoder::new(&cfg.dualenc).unwrap();
    let seg = Segmentor::new(&cfg.segmentor).unwrap();
    let a = CheckpointArchive::capture("train-seg", &cfg, &enc, Some(&seg));
    (cfg, a, enc, seg)
}

#[test]
fn checkpoints_round_trip_byte_identically() {
    for dtype in [StorageDType::F32, StorageDType::F64] {
        let (cfg, a, enc, seg) = archive(dtype);
        let bytes = a.to_bytes();
        let b = CheckpointArchive::from_bytes(&bytes).unwrap();
        assert_eq!(b, a);
        assert_eq!(b.to_bytes(), bytes);
        assert_eq!(&bytes[..8], MAGIC);
        let enc2 = b.dualenc(&cfg.dualenc).unwrap();
        let seg2 = b.segmentor(&cfg.segmentor).unwrap();
        for (orig, loaded) in [(&enc.store, &enc2.store), (&seg.store, &seg2.store)] {
            for (id, p) in orig.iter() {
                let mut q = p.tensor.clone();
                q.quantize(dtype.into());
                assert!(loaded.tensor(id).bit_eq(&q), "{}", p.name);
            }
        }
        let again = CheckpointArchive::capture("train-seg", &cfg, &enc2, Some(&seg2));
        assert_eq!(again.to_bytes(), bytes);
    }
}

#[test]
fn archives_hold_the_named_sections() {
    let (_, a, _, _) = archive(StorageDType::F32);
    let names: Vec<&str> = a.sections.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(
        names,
        [
            DUALENC_ENCODER,
            DUALENC_PROMPTS,
            "segmentor/backbone",
            "segmentor/adapters",
            "segmentor/prompt_adapter",
            "segmentor/decoder"
        ]
    );
    assert!(a.sections.iter().all(|s| !s.tensors.is_empty()));
    assert_eq!(a.dtype, DType::F32);
    assert_eq!(a.version, FORMAT_VERSION);
    assert!(a.config.contains("[segmentor]"));
}

#[test]
fn corrupt_archives_are_rejected() {
    let (_, a, _, _) = archive(StorageDType::F32);
    let bytes = a.to_bytes();
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(matches!(CheckpointArchive::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(CheckpointArchive::from_bytes(&magic), Err(Error::Checkpoint(_))));
    assert!(CheckpointArchive::from_bytes(&bytes[..bytes.len() - 5]).is_err());
}

#[test]
fn mismatched_dims_are_a_structured_error() {
    let (cfg, a, _, _) = archive(StorageDType::F32);
    let mut other = cfg.segmentor.clone();
    other.width = 16;
    let err = a.segmentor(&other).unwrap_err();
    assert!(matches!(&err, Error::Checkpoint(m) if m.contains("segmentor.width")), "{err}");
    let mut d = cfg.dualenc.clone();
    d.prompt_tokens = 3;
    assert!(matches!(a.dualenc(&d), Err(Error::Checkpoint(m)) if m.contains("prompt_tokens")));
    let mut seeded = cfg.dualenc.clone();
    seeded.seed += 1;
    a.dualenc(&seeded).unwrap();
    let clip_only = CheckpointArchive::capture("tune-clip", &cfg, &DualEncoder::new(&cfg.dualenc).unwrap(), None);
    assert!(matches!(clip_only.segmentor(&cfg.segmentor), Err(Error::Checkpoint(_))));
}

#[test]
fn gen_data_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let m = cmd_gen_data(&tiny(a.path())).unwrap();
    cmd_gen_data(&tiny(b.path())).unwrap();
    assert_eq!(m.vocab.seen().len(), 8);
    assert_eq!(m.vocab.unseen().len(), 4);
    let ta = tree(a.path());
    assert_eq!(ta, tree(b.path()));
    assert_eq!(ta.len(), 1 + 1 + 3 * 32);
    let produced = fs::read_to_string(a.path().join(PRODUCED_FILE)).unwrap();
    assert!(produced.lines().any(|l| l.ends_with("data/manifest.txt")));
}

#[test]
fn training_needs_its_upstream_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    cmd_gen_data(&cfg).unwrap();
    for phase in [Phase::TuneClip, Phase::TrainSeg] {
        let err = cmd_train(&cfg, phase).unwrap_err();
        assert!(matches!(&err, Error::MissingUpstream { .. }));
        assert!(err.to_string().contains("pretrain-clip -> tune-clip -> train-seg"));
    }
    assert!(matches!(
        cmd_infer(&cfg, &InferOptions::default()),
        Err(Error::MissingUpstream { .. })
    ));
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let dirs = [TempDir::new().unwrap(), TempDir::new().unwrap()];
    let mut finals = Vec::new();
    for d in &dirs {
        let cfg = tiny(d.path());
        cmd_gen_data(&cfg).unwrap();
        let mut losses = Vec::new();
        for phase in [Phase::PretrainClip, Phase::TuneClip, Phase::TrainSeg] {
            let out = cmd_train(&cfg, phase).unwrap();
            assert!(out.report.freeze.iter().all(|f| f.holds()));
            assert!(out.checkpoint.is_file());
            losses.push(*out.report.losses.last().unwrap());
        }
        finals.push(losses);
    }
    assert_eq!(finals[0], finals[1]);
    let cfg = tiny(dirs[0].path());

    let tuned = CheckpointArchive::load(&checkpoint_path(&cfg, Phase::TuneClip)).unwrap();
    let seg_ckpt = CheckpointArchive::load(&checkpoint_path(&cfg, Phase::TrainSeg)).unwrap();
    assert_eq!(
        tuned.section(DUALENC_ENCODER).unwrap(),
        seg_ckpt.section(DUALENC_ENCODER).unwrap()
    );
    assert_eq!(
        tuned.section(DUALENC_PROMPTS).unwrap(),
        seg_ckpt.section(DUALENC_PROMPTS).unwrap()
    );
    let pre = CheckpointArchive::load(&checkpoint_path(&cfg, Phase::PretrainClip)).unwrap();
    assert_eq!(pre.section(DUALENC_ENCODER), tuned.section(DUALENC_ENCODER));
    assert_ne!(pre.section(DUALENC_PROMPTS), tuned.section(DUALENC_PROMPTS));
    let bytes = fs::read(checkpoint_path(&cfg, Phase::TrainSeg)).unwrap();
    assert_eq!(seg_ckpt.to_bytes(), bytes);

    let preds = cmd_infer(&cfg, &InferOptions::default()).unwrap();
    assert_eq!(preds.len(), 8);
    for p in &preds {
        assert!(p.subset.contains(&p.label));
        assert!(cfg.run_dir().join("predictions").join(&p.mask).is_file());
    }
    let report = cmd_eval(&cfg, None).unwrap();
    assert_eq!(report.count, 8);
    assert!(cfg.run_dir().join(REPORT_JSON).is_file());
    assert!(fs::read_to_string(cfg.run_dir().join(REPORT_TABLE)).unwrap().contains("cIoU"));

    let forced = cmd_infer(
        &cfg,
        &InferOptions {
            alpha: StageTwoAlpha::AllOne,
            ..InferOptions::default()
        },
    )
    .unwrap();
    for p in &forced {
        assert_eq!(p.stage1_scores, p.stage2_scores);
    }
    let reread = read_predictions(&cfg.run_dir().join("predictions").join(PREDICTIONS_FILE)).unwrap();
    assert_eq!(reread, forced);

    let listing = fs::read_to_string(cfg.run_dir().join(PRODUCED_FILE)).unwrap();
    for want in [
        "checkpoints/train-seg.ckpt",
        "logs/pretrain-clip.tsv",
        "logs/train-seg.json",
        "report.json",
    ] {
        assert!(listing.lines().any(|l| l.ends_with(want)), "{want} missing");
    }
    for line in listing.lines() {
        let (hash, rel) = line.split_once("  ").unwrap();
        assert!(cfg.run_dir().join(rel).is_file(), "{rel}");
        assert_eq!(hash.len(), 64);
    }
}

#[test]
fn perfect_predictions_give_a_perfect_report() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let m = cmd_gen_data(&cfg).unwrap();
    let pred_dir = dir.path().join("oracle");
    let mut lines = String::new();
    for r in m.records(Split::Test) {
        let gt = load_binary(&m.path(&r.mask)).unwrap();
        let rel = format!("masks/{}.png", r.id);
        save_gray(&pred_dir.join(&rel), &gt).unwrap();
        let label = m.label(r);
        let rec = PredictionRecord {
            id: r.id.clone(),
            mask: rel,
            label,
            label_name: r.category.clone(),
            subset: m.vocab.unseen().to_vec(),
            stage1_scores: vec![0.0; 4],
            stage2_scores: vec![0.0; 4],
            ranking: vec![label],
        };
        lines.push_str(&serde_json::to_string(&rec).unwrap());
        lines.push('\n');
    }
    fs::write(pred_dir.join(PREDICTIONS_FILE), lines).unwrap();
    let report = cmd_eval(&cfg, Some(&pred_dir.join(PREDICTIONS_FILE))).unwrap();
    let a = &report.aggregate;
    for v in [a.c_s_measure, a.c_wf_beta, a.c_f_beta, a.c_e_measure, a.c_iou, a.top1, a.top5] {
        assert!((v - 1.0).abs() <= 1e-9, "{a:?}");
    }
    assert_eq!(a.c_mae, 0.0);
    assert_eq!(a.mae, 0.0);
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval10")
}

/// Oracle scores for one record, in report order, plus the top-1 hit.
fn oracle_scores(p: &Tensor, g: &Tensor, pred: usize, gt: usize) -> ([f64; 6], [f64; 6], bool) {
    let grid = |t: &Tensor| -> Grid { t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect() };
    let (p, g) = (grid(p), grid(g));
    let raw = [
        oracle_s_measure(&p, &g),
        oracle_wf_beta(&p, &g),
        oracle_mae(&p, &g),
        oracle_f_beta(&p, &g),
        oracle_e_measure(&p, &g),
        oracle_iou(&p, &g),
    ];
    let hit = pred == gt;
    let mut gated = raw.map(|v| if hit { v } else { 0.0 });
    gated[2] = if hit { raw[2] } else { 1.0 };
    (raw, gated, hit)
}

#[derive(serde::Serialize, serde::Deserialize, Debug)]
struct Golden {
    /// cS_m cF_β^w cMAE cF_β cE_m cIoU
    class_aware: [f64; 6],
    /// S_α F_β^ω MAE F_β E_φ IoU
    mask_only: [f64; 6],
    top1: f64,
    top5: f64,
}

fn oracle_golden() -> Golden {
    let m = camoseg::dataforge::DatasetManifest::load(&fixture().join("data").join(MANIFEST_FILE)).unwrap();
    let preds = read_predictions(&fixture().join("predictions").join(PREDICTIONS_FILE)).unwrap();
    let mut g = Golden {
        class_aware: [0.0; 6],
        mask_only: [0.0; 6],
        top1: 0.0,
        top5: 0.0,
    };
    let recs: Vec<_> = m.records(Split::Test).collect();
    for r in &recs {
        let p = preds.iter().find(|p| p.id == r.id).unwrap();
        let pm = load_gray(&fixture().join("predictions").join(&p.mask)).unwrap();
        let gm = load_binary(&m.path(&r.mask)).unwrap();
        let (raw, gated, hit) = oracle_scores(&pm, &gm, p.ranking[0], m.label(r));
        for i in 0..6 {
            g.mask_only[i] += raw[i];
            g.class_aware[i] += gated[i];
        }
        g.top1 += hit as u8 as f64;
        g.top5 += p.ranking.iter().take(5).any(|&c| c == m.label(r)) as u8 as f64;
    }
    let n = recs.len() as f64;
    g.class_aware.iter_mut().chain(g.mask_only.iter_mut()).for_each(|v| *v /= n);
    g.top1 /= n;
    g.top5 /= n;
    g
}

#[test]
fn bundled_fixture_matches_the_golden_report() {
    let golden: Golden = serde_json::from_str(&fs::read_to_string(fixture().join("golden.json")).unwrap()).unwrap();
    let report = evaluate_files(
        &fixture().join("data").join(MANIFEST_FILE),
        &fixture().join("predictions").join(PREDICTIONS_FILE),
    )
    .unwrap();
    assert_eq!(report.count, 10);
    let a = &report.aggregate;
    let got_c = [a.c_s_measure, a.c_wf_beta, a.c_mae, a.c_f_beta, a.c_e_measure, a.c_iou];
    let got_m = [a.s_measure, a.wf_beta, a.mae, a.f_beta, a.e_measure, a.iou];
    for (x, y) in got_c.iter().zip(golden.class_aware).chain(got_m.iter().zip(golden.mask_only)) {
        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }
    assert!((a.top1 - golden.top1).abs() <= 1e-9);
    assert!((a.top5 - golden.top5).abs() <= 1e-9);
}

#[test]
fn golden_report_agrees_with_a_fresh_oracle_run() {
    let golden: Golden = serde_json::from_str(&fs::read_to_string(fixture().join("golden.json")).unwrap()).unwrap();
    let fresh = oracle_golden();
    for (x, y) in golden
        .class_aware
        .iter()
        .chain(&golden.mask_only)
        .zip(fresh.class_aware.iter().chain(&fresh.mask_only))
    {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn eval_command_reads_the_fixture() {
    let dir = TempDir::new().unwrap();
    let mut cfg = RunConfig::default();
    cfg.paths.run_dir = dir.path().to_path_buf();
    cfg.paths.data_dir = fixture().join("data");
    let cfg_path = write_config(dir.path(), &cfg);
    let preds = fixture().join("predictions").join(PREDICTIONS_FILE);
    let (code, err) = run_bin(&[
        "eval",
        "--config",
        cfg_path.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let report = camoseg::metrics::MetricsReport::from_json(&fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(report.count, 10);
    let table = fs::read_to_string(dir.path().join(REPORT_TABLE)).unwrap();
    let header = table.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().skip(1).collect();
    assert_eq!(cols, ["cS_m", "cF_β^w", "cMAE", "cF_β", "cE_m", "cIoU"]);
}

/// Rebuilds the committed fixture; run with `--ignored` after changing it deliberately.
#[test]
#[ignore]
fn regenerate_eval_fixture() {
    let root = fixture();
    let _ = fs::remove_dir_all(&root);
    let mut spec = GenerateSpec::default_split(1, 10, 77);
    spec.height = 24;
    spec.width = 24;
    let m = generate(&spec, &root.join("data")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut lines = String::new();
    for (i, r) in m.records(Split::Test).enumerate() {
        let gt = load_binary(&m.path(&r.mask)).unwrap();
        let noisy: Vec<f64> = gt
            .data()
            .iter()
            .map(|v| (0.5 * v + 0.7 * rng.random::<f64>() - 0.1).clamp(0.0, 1.0))
            .collect();
        let pred = Tensor::new(gt.shape(), noisy).unwrap();
        let rel = format!("masks/{}.png", r.id);
        save_gray(&root.join("predictions").join(&rel), &pred).unwrap();
        let truth = m.label(r);
        let mut ranking = m.vocab.unseen().to_vec();
        ranking.sort_by_key(|&c| (c != truth) as u8);
        if i % 3 == 1 {
            ranking.rotate_left(1);
        }
        let rec = PredictionRecord {
            id: r.id.clone(),
            mask: rel,
            label: ranking[0],
            label_name: m.vocab.name(ranking[0]).to_string(),
            subset: m.vocab.unseen().to_vec(),
            stage1_scores: vec![0.0; 4],
            stage2_scores: vec![0.0; 4],
            ranking,
        };
        lines.push_str(&serde_json::to_string(&rec).unwrap());
        lines.push('\n');
    }
    fs::write(root.join("predictions").join(PREDICTIONS_FILE), lines).unwrap();
    let golden = oracle_golden();
    fs::write(root.join("golden.json"), serde_json::to_string_pretty(&golden).unwrap()).unwrap();
}

#[test]
fn binary_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let good = write_config(dir.path(), &cfg);
    let good = good.to_str().unwrap();

    let (code, _) = run_bin(&["--help"]);
    assert_eq!(code, 0);
    let (code, _) = run_bin(&["frobnicate"]);
    assert_eq!(code, 1);
    let (code, _) = run_bin(&["train", "--config", good]);
    assert_eq!(code, 1);

    let (code, err) = run_bin(&["train", "--phase", "tune-clip", "--config", good]);
    assert_eq!(code, 1);
    assert!(err.contains("pretrain-clip"), "{err}");
    let (code, _) = run_bin(&["infer", "--config", good]);
    assert_eq!(code, 1);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[data]\nunseen = []\n").unwrap();
    let (code, err) = run_bin(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("data.unseen"), "{err}");
    fs::write(&bad, "[segmentor]\nextra = 1\n").unwrap();
    let (code, err) = run_bin(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("extra"), "{err}");

    let (code, err) = run_bin(&["gen-data", "--config", good, "--seed", "9"]);
    assert_eq!(code, 0, "{err}");
    assert!(dir.path().join("data").join(MANIFEST_FILE).is_file());
}
