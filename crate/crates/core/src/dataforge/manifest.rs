use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dualenc::Vocabulary;
use crate::error::{Error, Result};

const HEADER: &str = "# camoseg dataset manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub edge: String,
    pub category: String,
    pub split: Split,
}

/// Sample records plus the vocabulary they are drawn from. Paths are relative
/// to `root`, the directory holding the manifest file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub vocab: Vocabulary,
    pub records: Vec<Record>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn records(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn label(&self, r: &Record) -> usize {
        self.vocab.index_of(&r.category).expect("record category in vocabulary")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(HEADER);
        s.push_str("\n[vocabulary]\n");
        for (i, c) in self.vocab.classes().iter().enumerate() {
            let tag = if self.vocab.is_seen(i) { "seen" } else { "unseen" };
            let _ = writeln!(s, "{c} {tag}");
        }
        s.push_str("[samples]\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                r.id,
                r.split.as_str(),
                r.category,
                r.image,
                r.mask,
                r.edge
            );
        }
        s
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Parses a manifest and checks split semantics and that every path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root)?;
        for r in &m.records {
            for rel in [&r.image, &r.mask, &r.edge] {
                let p = m.path(rel);
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Manifest(format!("line {line}: {msg}"));
        let mut section = "";
        let mut pairs: Vec<(String, bool)> = Vec::new();
        let mut raw = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[vocabulary]" || line == "[samples]" {
                section = if line == "[vocabulary]" { "vocab" } else { "samples" };
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            match section {
                "vocab" => {
                    let [name, tag] = f[..] else {
                        return Err(bad(n, "expected `<class> seen|unseen`"));
                    };
                    let seen = match tag {
                        "seen" => true,
                        "unseen" => false,
                        _ => return Err(bad(n, "split tag must be seen or unseen")),
                    };
                    pairs.push((name.to_string(), seen));
                }
                "samples" => {
                    let [id, split, cat, img, mask, edge] = f[..] else {
                        return Err(bad(n, "expected `<id> <split> <category> <image> <mask> <edge>`"));
                    };
                    let split = Split::parse(split).ok_or_else(|| bad(n, "split must be train or test"))?;
                    raw.push((
                        n,
                        Record {
                            id: id.into(),
                            image: img.into(),
                            mask: mask.into(),
                            edge: edge.into(),
                            category: cat.into(),
                            split,
                        },
                    ));
                }
                _ => return Err(bad(n, "content before any section header")),
            }
        }
        let vocab = Vocabulary::from_pairs(&pairs).map_err(|e| Error::Manifest(e.to_string()))?;
        let mut records = Vec::with_capacity(raw.len());
        for (n, r) in raw {
            let idx = vocab
                .index_of(&r.category)
                .ok_or_else(|| bad(n, &format!("category {} not in vocabulary", r.category)))?;
            let ok = match r.split {
                Split::Train => vocab.is_seen(idx),
                Split::Test => !vocab.is_seen(idx),
            };
            if !ok {
                return Err(bad(n, "train records must use seen classes and test records unseen ones"));
            }
            records.push(r);
        }
        Ok(Self { root, vocab, records })
    }
}
