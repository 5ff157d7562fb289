use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DatasetError;
use crate::audio_io::wav_info;

pub const MIN_TRACKS: usize = 10;
pub const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub track_id: String,
    pub real_path: PathBuf,
    #[serde(default)]
    pub reconstructions: BTreeMap<String, PathBuf>,
    pub split: Split,
    pub duration: f64,
}

/// Tracks, their reconstructions and split assignment. In memory, paths are
/// usable as-is; on disk they are stored relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub decoder_ids: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    decoder_ids: Vec<String>,
}

fn split_key(track_id: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(track_id.as_bytes());
    h.finalize().into()
}

/// Assigns splits by ordering tracks on a seeded hash of their id and cutting
/// the ordering at 70 % and 80 %.
pub fn assign_splits(track_ids: &[String], seed: u64) -> Vec<Split> {
    let n = track_ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (split_key(&track_ids[i], seed), i));
    let n_train = (n as f64 * SPLIT_FRACTIONS[0]).round() as usize;
    let n_valid = (n as f64 * SPLIT_FRACTIONS[1]).round() as usize;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    out
}

/// Scans `real_dir` (non-recursively) for `.wav` files. Files whose header
/// cannot be read are skipped with a warning.
pub fn build_manifest(real_dir: &Path, split_seed: u64) -> Result<DatasetManifest, DatasetError> {
    let read_dir = fs::read_dir(real_dir).map_err(|source| DatasetError::Io {
        path: real_dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = read_dir
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    files.sort();
    let mut ids = Vec::new();
    let mut kept = Vec::new();
    let mut seen = BTreeSet::new();
    for path in files {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DatasetError::Invalid(format!("{}: non-UTF-8 name", path.display())))?
            .to_string();
        match wav_info(&path) {
            Ok(info) => {
                if !seen.insert(id.clone()) {
                    return Err(DatasetError::Invalid(format!("duplicate track id {id}")));
                }
                ids.push(id);
                kept.push((path, info.duration()));
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if ids.len() < MIN_TRACKS {
        return Err(DatasetError::TooFewTracks {
            found: ids.len(),
            need: MIN_TRACKS,
        });
    }
    let splits = assign_splits(&ids, split_seed);
    let entries = ids
        .into_iter()
        .zip(kept)
        .zip(splits)
        .map(|((track_id, (real_path, duration)), split)| ManifestEntry {
            track_id,
            real_path,
            reconstructions: BTreeMap::new(),
            split,
            duration,
        })
        .collect();
    Ok(DatasetManifest {
        decoder_ids: Vec::new(),
        entries,
    })
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn relative_to(p: &Path, base: &Path) -> PathBuf {
    pathdiff::diff_paths(absolute(p), base).unwrap_or_else(|| absolute(p))
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for e in &self.entries {
            c[e.split as usize] += 1;
        }
        c
    }

    pub fn entry(&self, track_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.track_id == track_id)
    }

    /// Checks the structural invariants: unique ids and registered decoders.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        let decoders: BTreeSet<&str> = self.decoder_ids.iter().map(String::as_str).collect();
        if decoders.len() != self.decoder_ids.len() {
            return Err(DatasetError::Invalid("duplicate decoder ids".into()));
        }
        for e in &self.entries {
            if !seen.insert(e.track_id.as_str()) {
                return Err(DatasetError::Invalid(format!(
                    "duplicate track id {}",
                    e.track_id
                )));
            }
            for d in e.reconstructions.keys() {
                if !decoders.contains(d.as_str()) {
                    return Err(DatasetError::UnknownDecoder(d.clone()));
                }
            }
        }
        Ok(())
    }

    /// Writes JSON Lines: one header line with the decoder ids, then one
    /// line per track. Paths are stored relative to the manifest directory.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        let io = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let base = absolute(path.parent().unwrap_or(Path::new(".")));
        fs::create_dir_all(&base).map_err(io)?;
        let mut out = Vec::new();
        serde_json::to_writer(
            &mut out,
            &Header {
                decoder_ids: self.decoder_ids.clone(),
            },
        )
        .expect("header serialises");
        out.push(b'\n');
        for e in &self.entries {
            let rel = ManifestEntry {
                real_path: relative_to(&e.real_path, &base),
                reconstructions: e
                    .reconstructions
                    .iter()
                    .map(|(k, p)| (k.clone(), relative_to(p, &base)))
                    .collect(),
                ..e.clone()
            };
            serde_json::to_writer(&mut out, &rel).expect("entry serialises");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&out).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let io = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let base = absolute(path.parent().unwrap_or(Path::new(".")));
        let f = fs::File::open(path).map_err(io)?;
        let mut lines = BufReader::new(f).lines().enumerate();
        let parse_err = |line: usize, e: serde_json::Error| DatasetError::Parse {
            path: path.to_path_buf(),
            line: line + 1,
            detail: e.to_string(),
        };
        let (_, first) = lines.next().ok_or_else(|| DatasetError::Parse {
            path: path.to_path_buf(),
            line: 1,
            detail: "empty manifest".into(),
        })?;
        let header: Header =
            serde_json::from_str(&first.map_err(io)?).map_err(|e| parse_err(0, e))?;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(&line).map_err(|e| parse_err(i, e))?;
            e.real_path = base.join(&e.real_path);
            for p in e.reconstructions.values_mut() {
                *p = base.join(&*p);
            }
            entries.push(e);
        }
        let m = Self {
            decoder_ids: header.decoder_ids,
            entries,
        };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("track{i:03}")).collect()
    }

    #[test]
    fn split_sizes_follow_fractions() {
        for n in [10usize, 37, 100, 251] {
            let s = assign_splits(&ids(n), 7);
            let count = |k| s.iter().filter(|&&x| x == k).count() as f64;
            assert!((count(Split::Train) - 0.7 * n as f64).abs() <= 2.0);
            assert!((count(Split::Valid) - 0.1 * n as f64).abs() <= 2.0);
            assert!((count(Split::Test) - 0.2 * n as f64).abs() <= 2.0);
        }
        let s = assign_splits(&ids(100), 7);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 70);
    }

    #[test]
    fn splits_depend_on_seed_not_order() {
        let a = assign_splits(&ids(100), 7);
        assert_eq!(a, assign_splits(&ids(100), 7));
        assert_ne!(a, assign_splits(&ids(100), 8));
        let mut rev = ids(100);
        rev.reverse();
        let mut b = assign_splits(&rev, 7);
        b.reverse();
        assert_eq!(a, b);
    }
}
