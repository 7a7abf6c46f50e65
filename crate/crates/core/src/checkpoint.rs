//! Single-file tensor archive used for checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [0..8)    magic "MDIFTNSR"
//! [8..12)   u32 format version
//! [12..20)  u64 manifest byte length
//! [20..)    manifest: UTF-8, one line per tensor
//!           "<name>\t<dtype>\t<d0>x<d1>x..\t<offset>\t<byte_len>"
//! then      payload: raw tensor bytes, contiguous in manifest order
//! ```
//!
//! Offsets are relative to the payload start and must tile it exactly, so a
//! file that loses or gains a single byte is rejected as a manifest/payload
//! inconsistency. Saving is deterministic in insertion order: save -> load
//! -> save reproduces the file bitwise.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 8] = b"MDIFTNSR";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated inside header or manifest")]
    Truncated,
    #[error("manifest line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error("manifest/payload inconsistency: {0}")]
    PayloadMismatch(String),
    #[error("tensor {0} not present in checkpoint")]
    MissingTensor(String),
    #[error("tensor {name} has dtype {found}, expected {expected}")]
    WrongDtype {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U64,
    U8,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U64 => "u64",
            Dtype::U8 => "u8",
        }
    }

    fn from_str(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "u64" => Some(Dtype::U64),
            "u8" => Some(Dtype::U8),
            _ => None,
        }
    }

    fn elem_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

/// An ordered collection of named tensors with a binary file form.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.by_name
            .get(name)
            .map(|&i| self.entries[i].shape.as_slice())
    }

    fn insert(&mut self, entry: Entry) -> Result<(), CheckpointError> {
        if self.by_name.contains_key(&entry.name) {
            return Err(CheckpointError::DuplicateName(entry.name));
        }
        self.by_name.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn put_f32(
        &mut self,
        name: &str,
        shape: &[usize],
        data: &[f32],
    ) -> Result<(), CheckpointError> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.insert(Entry {
            name: name.to_string(),
            dtype: Dtype::F32,
            shape: shape.to_vec(),
            data: bytes,
        })
    }

    pub fn put_u64(&mut self, name: &str, data: &[u64]) -> Result<(), CheckpointError> {
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.insert(Entry {
            name: name.to_string(),
            dtype: Dtype::U64,
            shape: vec![data.len()],
            data: bytes,
        })
    }

    pub fn put_u8(&mut self, name: &str, data: &[u8]) -> Result<(), CheckpointError> {
        self.insert(Entry {
            name: name.to_string(),
            dtype: Dtype::U8,
            shape: vec![data.len()],
            data: data.to_vec(),
        })
    }

    fn entry(&self, name: &str, dtype: Dtype) -> Result<&Entry, CheckpointError> {
        let &i = self
            .by_name
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        let e = &self.entries[i];
        if e.dtype != dtype {
            return Err(CheckpointError::WrongDtype {
                name: name.to_string(),
                expected: dtype.as_str(),
                found: e.dtype.as_str(),
            });
        }
        Ok(e)
    }

    pub fn get_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>), CheckpointError> {
        let e = self.entry(name, Dtype::F32)?;
        let vals = e
            .data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((e.shape.clone(), vals))
    }

    pub fn get_u64(&self, name: &str) -> Result<Vec<u64>, CheckpointError> {
        let e = self.entry(name, Dtype::U64)?;
        Ok(e.data
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn get_u8(&self, name: &str) -> Result<Vec<u8>, CheckpointError> {
        let e = self.entry(name, Dtype::U8)?;
        Ok(e.data.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut manifest = String::new();
        let mut offset = 0usize;
        for e in &self.entries {
            let shape = e
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.name,
                e.dtype.as_str(),
                shape,
                offset,
                e.data.len()
            ));
            offset += e.data.len();
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&(manifest.len() as u64).to_le_bytes())?;
        file.write_all(manifest.as_bytes())?;
        for e in &self.entries {
            file.write_all(&e.data)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[0..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + manifest_len {
            return Err(CheckpointError::Truncated);
        }
        let manifest = std::str::from_utf8(&bytes[20..20 + manifest_len]).map_err(|e| {
            CheckpointError::ManifestParse {
                line: 0,
                msg: format!("manifest not UTF-8: {e}"),
            }
        })?;
        let payload = &bytes[20 + manifest_len..];
        let mut archive = TensorArchive::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            let parse = |msg: String| CheckpointError::ManifestParse {
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(parse(format!("expected 5 fields, got {}", fields.len())));
            }
            let dtype = Dtype::from_str(fields[1])
                .ok_or_else(|| parse(format!("unknown dtype {}", fields[1])))?;
            let shape: Vec<usize> = if fields[2].is_empty() {
                Vec::new()
            } else {
                fields[2]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| parse(format!("bad shape: {e}")))?
            };
            let offset: usize = fields[3]
                .parse()
                .map_err(|e| parse(format!("bad offset: {e}")))?;
            let byte_len: usize = fields[4]
                .parse()
                .map_err(|e| parse(format!("bad length: {e}")))?;
            if offset != expected_offset {
                return Err(CheckpointError::PayloadMismatch(format!(
                    "tensor {} at offset {offset}, expected {expected_offset}",
                    fields[0]
                )));
            }
            if shape.iter().product::<usize>() * dtype.elem_size() != byte_len {
                return Err(CheckpointError::PayloadMismatch(format!(
                    "tensor {} shape {:?} does not match byte length {byte_len}",
                    fields[0], shape
                )));
            }
            if offset + byte_len > payload.len() {
                return Err(CheckpointError::PayloadMismatch(format!(
                    "tensor {} extends past end of payload",
                    fields[0]
                )));
            }
            archive.insert(Entry {
                name: fields[0].to_string(),
                dtype,
                shape,
                data: payload[offset..offset + byte_len].to_vec(),
            })?;
            expected_offset += byte_len;
        }
        if expected_offset != payload.len() {
            return Err(CheckpointError::PayloadMismatch(format!(
                "payload has {} bytes, manifest accounts for {expected_offset}",
                payload.len()
            )));
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_archive() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.put_f32("param/w", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        a.put_u64("meta/step", &[42]).unwrap();
        a.put_u8("meta/rng", &[7; 56]).unwrap();
        a
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let a = sample_archive();
        a.save(&p1).unwrap();
        let b = TensorArchive::load(&p1).unwrap();
        b.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (shape, vals) = b.get_f32("param/w").unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(b.get_u64("meta/step").unwrap(), vec![42]);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample_archive().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            TensorArchive::load(&p),
            Err(CheckpointError::PayloadMismatch(_))
        ));
    }

    #[test]
    fn truncated_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample_archive().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..25]).unwrap();
        assert!(matches!(
            TensorArchive::load(&p),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn version_bump_is_rejected_without_partial_state() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample_archive().save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 2;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            TensorArchive::load(&p),
            Err(CheckpointError::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample_archive().save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            TensorArchive::load(&p),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn wrong_dtype_and_missing_tensor() {
        let a = sample_archive();
        assert!(matches!(
            a.get_f32("meta/step"),
            Err(CheckpointError::WrongDtype { .. })
        ));
        assert!(matches!(
            a.get_f32("nope"),
            Err(CheckpointError::MissingTensor(_))
        ));
    }
}
