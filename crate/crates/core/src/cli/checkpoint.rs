//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CAMOSEG\0" | version u32 | dtype u8 | phase str | config str | sections u32
//! section: name str | tensors u32
//! tensor:  name str | ndim u32 | dims u64 * ndim | values (f32 or f64)
//! trailer: sha256 of every preceding byte
//! ```
//! Strings are a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::dualenc::{is_prompt_param, DualEncConfig, DualEncoder};
use crate::error::{Error, Result};
use crate::nncore::{DType, ParamStore, Tensor};
use crate::segmentor::{section_of, SegConfig, Segmentor};

pub const MAGIC: &[u8; 8] = b"CAMOSEG\0";
pub const FORMAT_VERSION: u32 = 1;

pub const DUALENC_ENCODER: &str = "dualenc/encoder";
pub const DUALENC_PROMPTS: &str = "dualenc/prompts";
const SEGMENTOR_PREFIX: &str = "segmentor/";

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointArchive {
    pub version: u32,
    pub dtype: DType,
    /// Training phase that produced the archive.
    pub phase: String,
    /// TOML snapshot of the run configuration.
    pub config: String,
    pub sections: Vec<Section>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl CheckpointArchive {
    /// Captures the dual encoder and, when given, the segmentor. Values are
    /// rounded to `dtype` so the in-memory copy matches what a reload yields.
    pub fn capture(phase: &str, cfg: &RunConfig, enc: &DualEncoder, seg: Option<&Segmentor>) -> Self {
        let dtype: DType = cfg.checkpoint.dtype.into();
        let mut sections = vec![
            Section {
                name: DUALENC_ENCODER.into(),
                tensors: enc.store.snapshot(|n| !is_prompt_param(n)),
            },
            Section {
                name: DUALENC_PROMPTS.into(),
                tensors: enc.store.snapshot(is_prompt_param),
            },
        ];
        if let Some(seg) = seg {
            for part in ["backbone", "adapters", "prompt_adapter", "decoder"] {
                sections.push(Section {
                    name: format!("{SEGMENTOR_PREFIX}{part}"),
                    tensors: seg.store.snapshot(|n| section_of(n) == part),
                });
            }
        }
        for s in &mut sections {
            for (_, t) in &mut s.tensors {
                t.quantize(dtype);
            }
        }
        Self {
            version: FORMAT_VERSION,
            dtype,
            phase: phase.to_string(),
            config: cfg.to_toml(),
            sections,
        }
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config).map_err(|e| ckpt_err(format!("embedded config: {e}")))
    }

    pub fn has_segmentor(&self) -> bool {
        self.sections.iter().any(|s| s.name.starts_with(SEGMENTOR_PREFIX))
    }

    /// Rebuilds the dual encoder, requiring the archived dims to equal `cfg`.
    pub fn dualenc(&self, cfg: &DualEncConfig) -> Result<DualEncoder> {
        let stored = self.run_config()?;
        check_dims("dualenc", &stored.dualenc, cfg)?;
        let mut enc = DualEncoder::new(cfg)?;
        let names = [DUALENC_ENCODER, DUALENC_PROMPTS];
        restore(&mut enc.store, self, |s| names.contains(&s))?;
        Ok(enc)
    }

    pub fn segmentor(&self, cfg: &SegConfig) -> Result<Segmentor> {
        if !self.has_segmentor() {
            return Err(ckpt_err(format!("archive from phase `{}` holds no segmentor", self.phase)));
        }
        let stored = self.run_config()?;
        check_dims("segmentor", &stored.segmentor, cfg)?;
        let mut seg = Segmentor::new(cfg)?;
        restore(&mut seg.store, self, |s| s.starts_with(SEGMENTOR_PREFIX))?;
        Ok(seg)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.dtype.tag());
        put_str(&mut out, &self.phase);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
            for (name, t) in &s.tensors {
                put_str(&mut out, name);
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    match self.dtype {
                        DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                        DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ckpt_err("not a camoseg checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ckpt_err("checksum mismatch"));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported format version {version}")));
        }
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| ckpt_err("unknown dtype tag"))?;
        let phase = r.string()?;
        let config = r.string()?;
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name = r.string()?;
            let n = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..n {
                let tname = r.string()?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let len: usize = shape.iter().product();
                let data = (0..len)
                    .map(|_| match dtype {
                        DType::F32 => r.f32().map(f64::from),
                        DType::F64 => r.f64(),
                    })
                    .collect::<Result<Vec<_>>>()?;
                tensors.push((tname, Tensor::new(&shape, data)?));
            }
            sections.push(Section { name, tensors });
        }
        if r.pos != body.len() {
            return Err(ckpt_err("trailing bytes after last section"));
        }
        Ok(Self {
            version,
            dtype,
            phase,
            config,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => ckpt_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Compares two configs field by field, ignoring seeds.
fn check_dims<T: serde::Serialize>(what: &str, stored: &T, requested: &T) -> Result<()> {
    let a = serde_json::to_value(stored).expect("config serializes");
    let b = serde_json::to_value(requested).expect("config serializes");
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        unreachable!("configs serialize to objects")
    };
    let diff: Vec<String> = a
        .iter()
        .filter(|(k, v)| k.as_str() != "seed" && b.get(*k) != Some(v))
        .map(|(k, v)| {
            format!(
                "{what}.{k}: checkpoint {v}, requested {}",
                b.get(k).unwrap_or(&serde_json::Value::Null)
            )
        })
        .collect();
    if diff.is_empty() {
        Ok(())
    } else {
        Err(ckpt_err(format!("config mismatch: {}", diff.join("; "))))
    }
}

fn restore(store: &mut ParamStore, archive: &CheckpointArchive, select: impl Fn(&str) -> bool) -> Result<()> {
    let mut assigned = 0;
    for s in archive.sections.iter().filter(|s| select(&s.name)) {
        for (name, t) in &s.tensors {
            store.assign(name, t.clone())?;
            assigned += 1;
        }
    }
    if assigned != store.len() {
        return Err(ckpt_err(format!("archive restores {assigned} of {} parameters", store.len())));
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ckpt_err("truncated archive"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ckpt_err("invalid UTF-8 string"))
    }
}
