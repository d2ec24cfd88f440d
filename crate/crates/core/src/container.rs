//! Binary container for datasets and checkpoints.
//!
//! Layout: `b"IEMF"`, `u32` LE version, `u64` LE header length, a JSON
//! header, then the little-endian `f64` payload. The header lists every
//! section's name, shape and element offset into the payload, plus free-form
//! metadata.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, MultimodalModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IEMF";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    sections: Vec<SectionHeader>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub sections: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, sections: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.sections.push((name.to_string(), t));
    }

    pub fn section(&self, name: &str) -> Result<&Tensor> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing section {name:?}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut offset = 0;
        let sections = self
            .sections
            .iter()
            .map(|(name, t)| {
                let s = SectionHeader { name: name.clone(), shape: t.shape().to_vec(), offset, count: t.numel() };
                offset += t.numel();
                s
            })
            .collect();
        let header = Header { kind: self.kind.clone(), sections, meta: self.meta.clone() };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.sections {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        read_exact(r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact(r, &mut b8)?;
        let len = u64::from_le_bytes(b8);
        if len > MAX_HEADER {
            return Err(Error::Format(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        read_exact(r, &mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 8 != 0 {
            return Err(Error::Format("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut sections = Vec::with_capacity(header.sections.len());
        for s in header.sections {
            let end = s
                .offset
                .checked_add(s.count)
                .filter(|&e| e <= values.len())
                .ok_or_else(|| Error::Format(format!("section {:?} runs past the payload", s.name)))?;
            if s.shape.iter().product::<usize>() != s.count {
                return Err(Error::Format(format!("section {:?} shape does not match its count", s.name)));
            }
            let t = Tensor::new(s.shape, values[s.offset..end].to_vec())
                .map_err(|e| Error::Format(format!("section {:?}: {e}", s.name)))?;
            sections.push((s.name, t));
        }
        Ok(Self { kind: header.kind, meta: header.meta, sections })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated container".into()),
        _ => Error::Io(e),
    })
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn labels_tensor(y: &[usize]) -> Result<Tensor> {
    Tensor::new(vec![y.len()], y.iter().map(|&c| c as f64).collect())
}

fn labels_from(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("label {v} is not a class index")))
            }
        })
        .collect()
}

pub fn dataset_container(ds: &Dataset) -> Result<Container> {
    let meta = serde_json::to_value(&ds.spec).map_err(|e| Error::Format(e.to_string()))?;
    let mut c = Container::new("dataset", meta);
    for (prefix, b) in [("train", &ds.train), ("test", &ds.test)] {
        c.push(&format!("{prefix}.x_a"), b.x_a.clone());
        c.push(&format!("{prefix}.x_v"), b.x_v.clone());
        c.push(&format!("{prefix}.y"), labels_tensor(&b.y)?);
    }
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset> {
    if c.kind != "dataset" {
        return Err(Error::Format(format!("expected a dataset container, found {:?}", c.kind)));
    }
    let spec: DataSpec = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let batch = |prefix: &str| -> Result<Batch> {
        let y = labels_from(c.section(&format!("{prefix}.y"))?)?;
        if y.iter().any(|&l| l >= spec.n_classes) {
            return Err(Error::Format("label outside the class range".into()));
        }
        Batch::new(c.section(&format!("{prefix}.x_a"))?.clone(), c.section(&format!("{prefix}.x_v"))?.clone(), y)
            .map_err(|e| Error::Format(e.to_string()))
    };
    Ok(Dataset { train: batch("train")?, test: batch("test")?, spec })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    dataset_container(ds)?.save(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_container(&Container::load(path)?)
}

pub fn model_container(model: &MultimodalModel) -> Result<Container> {
    let meta = serde_json::to_value(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    let mut c = Container::new("checkpoint", meta);
    for p in model.params() {
        c.push(&p.name, p.value.clone());
    }
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<MultimodalModel> {
    if c.kind != "checkpoint" {
        return Err(Error::Format(format!("expected a checkpoint container, found {:?}", c.kind)));
    }
    let cfg: ModelConfig = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(e.to_string()))?;
    MultimodalModel::from_named(cfg, &c.sections)
}

pub fn save_model(model: &MultimodalModel, path: &Path) -> Result<()> {
    model_container(model)?.save(path)
}

pub fn load_model(path: &Path) -> Result<MultimodalModel> {
    model_from_container(&Container::load(path)?)
}
