use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataforge::{all_categories, parse_category, GenerateSpec, DEFAULT_KAPPA, DEFAULT_UNSEEN};
use crate::dualenc::{DualEncConfig, PretrainConfig, TuneConfig};
use crate::error::{Error, Result};
use crate::nncore::DType;
use crate::segmentor::{BackboneConfig, SegConfig, SegTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Vocabulary in index order.
    pub categories: Vec<String>,
    /// Held-out categories; every other category is seen.
    pub unseen: Vec<String>,
    pub train_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub kappa: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: all_categories(),
            unseen: DEFAULT_UNSEEN.iter().map(|s| s.to_string()).collect(),
            train_count: 384,
            test_count: 96,
            height: 64,
            width: 64,
            kappa: DEFAULT_KAPPA,
            seed: 5,
        }
    }
}

impl DataConfig {
    pub fn generate_spec(&self) -> GenerateSpec {
        GenerateSpec {
            categories: self
                .categories
                .iter()
                .map(|c| (c.clone(), !self.unseen.contains(c)))
                .collect(),
            train_count: self.train_count,
            test_count: self.test_count,
            height: self.height,
            width: self.width,
            kappa: self.kappa,
            seed: self.seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let seen = self.categories.iter().filter(|c| !self.unseen.contains(c)).count();
        if self.unseen.len() < 2 {
            return Err(Error::Config(format!(
                "data.unseen must name at least 2 categories, got {}",
                self.unseen.len()
            )));
        }
        if seen < 2 {
            return Err(Error::Config(format!(
                "data.categories must leave at least 2 seen categories, got {seen}"
            )));
        }
        for u in &self.unseen {
            if !self.categories.contains(u) {
                return Err(Error::Config(format!("data.unseen entry `{u}` is not in data.categories")));
            }
        }
        for c in &self.categories {
            parse_category(c).map_err(|e| Error::Config(format!("data.categories: {e}")))?;
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config(
                "data.train_count and data.test_count must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Config(format!("data.kappa must lie in [0, 1], got {}", self.kappa)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageDType {
    F32,
    F64,
}

impl From<StorageDType> for DType {
    fn from(d: StorageDType) -> Self {
        match d {
            StorageDType::F32 => DType::F32,
            StorageDType::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Every output lands under this directory.
    pub run_dir: PathBuf,
    /// Dataset location; relative paths resolve against `run_dir`.
    pub data_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
            data_dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    pub dtype: StorageDType,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            dtype: StorageDType::F32,
        }
    }
}

/// Everything a command needs: model dims, phase hyperparameters, data and paths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub dualenc: DualEncConfig,
    pub pretrain_clip: PretrainConfig,
    pub tune_clip: TuneConfig,
    pub segmentor: SegConfig,
    pub backbone: BackboneConfig,
    pub train_seg: SegTrainConfig,
    pub checkpoint: CheckpointConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Contract(m) | Error::Config(m) => Error::Config(format!("[{section}] {m}")),
                other => other,
            })
        };
        self.data.validate()?;
        wrap("dualenc", self.dualenc.validate())?;
        wrap("pretrain_clip", self.pretrain_clip.validate())?;
        wrap("tune_clip", self.tune_clip.validate())?;
        wrap("segmentor", self.segmentor.validate())?;
        wrap("backbone", self.backbone.validate())?;
        wrap("train_seg", self.train_seg.validate())?;
        if self.dualenc.embed_dim != self.segmentor.embed_dim {
            return Err(Error::Config(format!(
                "segmentor.embed_dim ({}) must equal dualenc.embed_dim ({})",
                self.segmentor.embed_dim, self.dualenc.embed_dim
            )));
        }
        for (name, size) in [("dualenc", self.dualenc.image_size), ("segmentor", self.segmentor.image_size)] {
            if size != self.data.height || size != self.data.width {
                return Err(Error::Config(format!(
                    "{name}.image_size ({size}) must match data.height x data.width ({} x {})",
                    self.data.height, self.data.width
                )));
            }
        }
        Ok(())
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.dualenc.seed = seed.wrapping_add(1);
        self.pretrain_clip.seed = seed.wrapping_add(2);
        self.tune_clip.seed = seed.wrapping_add(3);
        self.segmentor.seed = seed.wrapping_add(4);
        self.backbone.seed = seed.wrapping_add(5);
        self.train_seg.seed = seed.wrapping_add(6);
        self
    }

    pub fn run_dir(&self) -> &Path {
        &self.paths.run_dir
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.run_dir.join(&self.paths.data_dir)
    }
}
