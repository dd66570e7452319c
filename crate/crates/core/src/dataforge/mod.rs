//! Synthetic camouflage scenes, edge derivation, raster I/O and manifests.

mod io;
mod manifest;
mod scene;

use std::path::Path;

use rayon::prelude::*;

pub use io::{load_binary, load_gray, load_rgb, save_gray, save_rgb};
pub use manifest::{DatasetManifest, Record, Split, MANIFEST_FILE};
pub use scene::{
    all_categories, derive_edge, parse_category, scene_seed, Scene, SceneSpec, ShapeKind, TextureKind, DEFAULT_KAPPA,
    DEFAULT_UNSEEN, SHAPES, TEXTURES,
};

use crate::dualenc::Vocabulary;
use crate::error::{contract, Result};
use crate::nncore::Tensor;

/// One training or evaluation example held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `h x w x 3` in [0, 1].
    pub image: Tensor,
    /// Binary `h x w`.
    pub mask: Tensor,
    /// Binary `h x w`.
    pub edge: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct GenerateSpec {
    /// `(category, is_seen)` in vocabulary order.
    pub categories: Vec<(String, bool)>,
    pub train_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub kappa: f64,
    pub seed: u64,
}

impl GenerateSpec {
    /// The default twelve categories with four held out.
    pub fn default_split(train_count: usize, test_count: usize, seed: u64) -> Self {
        let categories = all_categories()
            .into_iter()
            .map(|c| {
                let seen = !DEFAULT_UNSEEN.contains(&c.as_str());
                (c, seen)
            })
            .collect();
        Self {
            categories,
            train_count,
            test_count,
            height: 64,
            width: 64,
            kappa: DEFAULT_KAPPA,
            seed,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_pairs(&self.categories)
    }

    /// Scene specs for every sample, train first, categories cycled in vocabulary order.
    pub fn scenes(&self) -> Result<Vec<(String, Split, SceneSpec)>> {
        let vocab = self.vocabulary()?;
        contract!(
            vocab.seen().len() >= 2 && vocab.unseen().len() >= 2,
            "need at least 2 seen and 2 unseen categories, got {} seen and {} unseen",
            vocab.seen().len(),
            vocab.unseen().len()
        );
        contract!(
            self.train_count >= 1 && self.test_count >= 1,
            "train_count and test_count must be at least 1"
        );
        for c in vocab.classes() {
            parse_category(c)?;
        }
        let mut out = Vec::with_capacity(self.train_count + self.test_count);
        let plan = [
            (Split::Train, self.train_count, vocab.seen()),
            (Split::Test, self.test_count, vocab.unseen()),
        ];
        let mut index = 0u64;
        for (split, count, pool) in plan {
            for i in 0..count {
                let cat = vocab.name(pool[i % pool.len()]);
                let id = format!("{}_{:05}", split.as_str(), i);
                let spec = SceneSpec::new(cat, self.height, self.width, self.kappa, scene_seed(self.seed, index));
                out.push((id, split, spec));
                index += 1;
            }
        }
        Ok(out)
    }
}

/// Renders a scene into a sample with its derived edge map.
pub fn render_sample(id: &str, spec: &SceneSpec, label: usize) -> Result<Sample> {
    let scene = spec.render()?;
    let edge = derive_edge(&scene.mask)?;
    Ok(Sample {
        id: id.to_string(),
        image: scene.image,
        mask: scene.mask,
        edge,
        label,
    })
}

/// Renders every scene and writes rasters plus `manifest.txt` under `root`.
pub fn generate(spec: &GenerateSpec, root: &Path) -> Result<DatasetManifest> {
    let vocab = spec.vocabulary()?;
    let scenes = spec.scenes()?;
    let records: Vec<Record> = scenes
        .par_iter()
        .map(|(id, split, s)| {
            let label = vocab.index_of(&s.category).expect("category in vocabulary");
            let sample = render_sample(id, s, label)?;
            let rec = Record {
                id: id.clone(),
                image: format!("images/{id}.png"),
                mask: format!("masks/{id}.png"),
                edge: format!("edges/{id}.png"),
                category: s.category.clone(),
                split: *split,
            };
            save_sample(root, &rec, &sample)?;
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let m = DatasetManifest {
        root: root.to_path_buf(),
        vocab,
        records,
    };
    m.save()?;
    Ok(m)
}

/// In-memory equivalent of [`generate`] for one split.
pub fn synthesize(spec: &GenerateSpec, split: Split) -> Result<Vec<Sample>> {
    let vocab = spec.vocabulary()?;
    spec.scenes()?
        .par_iter()
        .filter(|(_, s, _)| *s == split)
        .map(|(id, _, s)| render_sample(id, s, vocab.index_of(&s.category).unwrap()))
        .collect()
}

pub fn save_sample(root: &Path, rec: &Record, s: &Sample) -> Result<()> {
    save_rgb(&root.join(&rec.image), &s.image)?;
    save_gray(&root.join(&rec.mask), &s.mask)?;
    save_gray(&root.join(&rec.edge), &s.edge)
}

pub fn load_sample(m: &DatasetManifest, rec: &Record) -> Result<Sample> {
    let image = load_rgb(&m.path(&rec.image))?;
    let mask = load_binary(&m.path(&rec.mask))?;
    let edge = load_binary(&m.path(&rec.edge))?;
    contract!(
        image.shape()[..2] == *mask.shape() && mask.shape() == edge.shape(),
        "sample {} has inconsistent raster sizes",
        rec.id
    );
    Ok(Sample {
        id: rec.id.clone(),
        image,
        mask,
        edge,
        label: m.label(rec),
    })
}

pub fn load_split(m: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    let recs: Vec<&Record> = m.records(split).collect();
    recs.par_iter().map(|r| load_sample(m, r)).collect()
}
