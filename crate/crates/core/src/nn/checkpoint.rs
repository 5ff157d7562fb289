//! Binary checkpoint format: `AIMD` magic, u32 version, a length-prefixed
//! JSON descriptor, then named little-endian f32 tensors.

use std::fs;
use std::path::Path;

use super::model::{Architecture, ModelParams, ParamSet};
use super::tensor::Tensor;
use super::NnError;
use crate::spectral::RepresentationKind;

pub const MAGIC: &[u8; 4] = b"AIMD";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(
    path: &Path,
    descriptor: &serde_json::Value,
    tensors: &ParamSet<f32>,
) -> Result<(), NnError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let desc = serde_json::to_vec(descriptor).expect("json value serialises");
    buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    buf.extend_from_slice(&desc);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|source| NnError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
    }
    fs::write(path, buf).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Corrupted {
                path: self.path.to_path_buf(),
                detail: format!("unexpected end of file reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn corrupted(&self, detail: String) -> NnError {
        NnError::Corrupted {
            path: self.path.to_path_buf(),
            detail,
        }
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamSet<f32>), NnError> {
    let buf = fs::read(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(NnError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader {
        buf: &buf,
        pos: 4,
        path,
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(NnError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let dlen = r.u32("descriptor length")? as usize;
    let desc: serde_json::Value = serde_json::from_slice(r.bytes(dlen, "descriptor")?)
        .map_err(|e| r.corrupted(format!("descriptor: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = String::from_utf8(r.bytes(nlen, "tensor name")?.to_vec())
            .map_err(|_| r.corrupted("tensor name is not UTF-8".into()))?;
        let ndim = r.u32("rank")? as usize;
        if ndim > 8 {
            return Err(r.corrupted(format!("{name}: implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or_else(|| r.corrupted(format!("{name}: shape overflow")))?;
        let data = r
            .bytes(n * 4, &format!("tensor {name}"))?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::from_vec(&shape, data).expect("sized"));
    }
    if r.pos != buf.len() {
        return Err(r.corrupted(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((desc, tensors))
}

impl ModelParams<f32> {
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let desc = serde_json::json!({ "model": "detector", "architecture": self.arch });
        write_checkpoint(path, &desc, &self.tensors)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let (desc, tensors) = read_checkpoint(path)?;
        if desc.get("model").and_then(|m| m.as_str()) != Some("detector") {
            return Err(NnError::Corrupted {
                path: path.to_path_buf(),
                detail: "not a detector checkpoint".into(),
            });
        }
        let arch: Architecture =
            serde_json::from_value(desc["architecture"].clone()).map_err(|e| {
                NnError::Corrupted {
                    path: path.to_path_buf(),
                    detail: format!("architecture: {e}"),
                }
            })?;
        let p = Self { arch, tensors };
        p.validate().map_err(|e| NnError::Corrupted {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(p)
    }

    /// Loads a detector and checks it was trained on `kind`.
    pub fn load_for(path: &Path, kind: RepresentationKind) -> Result<Self, NnError> {
        let p = Self::load(path)?;
        if p.arch.representation != kind {
            return Err(NnError::RepresentationMismatch {
                model: p.arch.representation,
                input: kind,
            });
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p: ModelParams =
            ModelParams::init(Architecture::detector(RepresentationKind::Phase), 7);
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p: ModelParams =
            ModelParams::init(Architecture::detector(RepresentationKind::Waveform), 1);
        p.save(&path).unwrap();
        assert!(matches!(
            ModelParams::load_for(&path, RepresentationKind::Amplitude),
            Err(NnError::RepresentationMismatch { .. })
        ));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            ModelParams::load(&path),
            Err(NnError::Corrupted { .. })
        ));
        fs::write(&path, b"RIFF....").unwrap();
        assert!(matches!(
            ModelParams::load(&path),
            Err(NnError::BadMagic { .. })
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        fs::write(&path, v).unwrap();
        assert!(matches!(
            ModelParams::load(&path),
            Err(NnError::UnsupportedVersion { found: 9, .. })
        ));
        assert!(matches!(
            ModelParams::load(&dir.path().join("missing")),
            Err(NnError::Io { .. })
        ));
    }
}
