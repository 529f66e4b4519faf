//! Portable tensor container and JSON dataset manifests.
//!
//! Container layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 8            | magic `ANOMTEN1`                          |
//! | 1            | dtype: 1 = f32, 2 = u8                    |
//! | 1            | ndim, 1..=4                               |
//! | 4 × ndim     | dims as u32                               |
//! | rest         | row-major payload                         |

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ANOMTEN1";
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U8(_) => "u8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<u32>,
    data: TensorData,
}

fn check_shape(dims: &[u32], len: usize) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::BadRank(dims.len()));
    }
    if dims.contains(&0) {
        return Err(Error::ZeroDimension(dims.to_vec()));
    }
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    if expected != len {
        return Err(Error::PayloadMismatch { dims: dims.to_vec(), found: len });
    }
    Ok(())
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self> {
        check_shape(&dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn from_u8(dims: Vec<u32>, values: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(values))
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::DtypeMismatch { expected: "f32", found: other.name() }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(Error::DtypeMismatch { expected: "u8", found: other.name() }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = match &self.data {
            TensorData::F32(v) => v.len() * 4,
            TensorData::U8(v) => v.len(),
        };
        let mut out = Vec::with_capacity(10 + 4 * self.dims.len() + payload);
        out.extend_from_slice(MAGIC);
        out.push(match self.data {
            TensorData::F32(_) => DTYPE_F32,
            TensorData::U8(_) => DTYPE_U8,
        });
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::Truncated { expected: 10, found: bytes.len() });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let dtype = bytes[8];
        let elem = match dtype {
            DTYPE_F32 => 4,
            DTYPE_U8 => 1,
            code => return Err(Error::UnknownDtype(code)),
        };
        let ndim = bytes[9] as usize;
        if !(1..=4).contains(&ndim) {
            return Err(Error::BadRank(ndim));
        }
        let header = 10 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Truncated { expected: header, found: bytes.len() });
        }
        let dims: Vec<u32> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if dims.contains(&0) {
            return Err(Error::ZeroDimension(dims));
        }
        let count: usize = dims.iter().map(|&d| d as usize).product();
        let expected = header + count * elem;
        if bytes.len() < expected {
            return Err(Error::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(Error::PayloadMismatch { dims, found: (bytes.len() - header) / elem });
        }
        let payload = &bytes[header..];
        let data = match dtype {
            DTYPE_F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    ProxyAnom,
    Test,
    Novel,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::ProxyAnom, Split::Test, Split::Novel];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ProxyAnom => "proxy-anom",
            Split::Test => "test",
            Split::Novel => "novel",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|split| split.as_str() == s)
            .ok_or_else(|| Error::UnknownSplit(s.to_string()))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One scene: image tensor, label tensor and (for annotated splits) the anomaly mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<PathBuf>,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub class_names: Vec<String>,
    /// `null` for no region-of-interest restriction, otherwise a label tensor
    /// whose nonzero pixels are inside the region.
    #[serde(default)]
    pub roi: Option<PathBuf>,
    /// Directory relative paths are resolved against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Parse and validate a manifest: every referenced tensor must exist and decode,
/// and no image may be listed twice.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let check = |p: &Path| -> Result<()> {
        let full = manifest.resolve(p);
        if !full.is_file() {
            return Err(Error::MissingFile(full));
        }
        read_tensor(&full).map(|_| ())
    };

    let mut seen = HashSet::new();
    for record in &manifest.records {
        if !seen.insert(record.image.clone()) {
            return Err(Error::DuplicateRecord(record.image.clone()));
        }
        check(&record.image)?;
        check(&record.label)?;
        if let Some(anomaly) = &record.anomaly {
            check(anomaly)?;
        }
    }
    if let Some(roi) = &manifest.roi {
        check(roi)?;
    }
    Ok(manifest)
}
