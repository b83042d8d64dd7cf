//! Binary model files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CBLN" | version: u32 | header_len: u64 | header (JSON: architecture, tasks)
//! per weight: n_components: u32, (mean, var, weight): f64 x 3 each,
//!             n_assignments: u32, (task: u64, component: u32) each
//! SHA-256 of everything above (32 bytes)
//! ```
//!
//! Floats are stored as raw bits, so a round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bnn::{Architecture, TaskSnapshot};
use crate::mixture::{GaussianComponent, MergedModel, PosteriorMixture, TaskInfo};
use crate::{Error, Result, TaskId};

pub const MAGIC: &[u8; 4] = b"CBLN";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Architecture,
    tasks: BTreeMap<TaskId, TaskInfo>,
    num_weights: usize,
}

pub fn encode_model(model: &MergedModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        arch: model.arch.clone(),
        tasks: model.tasks.clone(),
        num_weights: model.weights.len(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for w in &model.weights {
        out.extend_from_slice(&(w.components.len() as u32).to_le_bytes());
        for c in &w.components {
            for v in [c.mean, c.var, c.weight] {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out.extend_from_slice(&(w.assignment.len() as u32).to_le_bytes());
        for (&task, &comp) in &w.assignment {
            out.extend_from_slice(&(task as u64).to_le_bytes());
            out.extend_from_slice(&(comp as u32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("truncated: needed {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<MergedModel> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        cur.pos = 0;
        return Err(cur.error("bad magic: not a model file"));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < DIGEST_LEN + cur.pos {
        return Err(cur.error("file too short for a checksum"));
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let mut cur = Cursor {
        path,
        bytes: content,
        pos: cur.pos,
    };

    let header_len = cur.u64()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| cur.error(format!("bad header: {e}")))?;
    if header.num_weights != header.arch.num_weights() {
        return Err(cur.error(format!(
            "header lists {} weights, architecture {} has {}",
            header.num_weights,
            header.arch,
            header.arch.num_weights()
        )));
    }
    let mut weights = Vec::with_capacity(header.num_weights);
    for _ in 0..header.num_weights {
        let n = cur.u32()? as usize;
        let mut components = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            components.push(GaussianComponent {
                mean: cur.f64()?,
                var: cur.f64()?,
                weight: cur.f64()?,
            });
        }
        let m = cur.u32()? as usize;
        let mut assignment = BTreeMap::new();
        for _ in 0..m {
            let task = cur.u64()? as TaskId;
            let comp = cur.u32()? as usize;
            if comp >= components.len() {
                return Err(cur.error(format!("assignment to missing component {comp}")));
            }
            assignment.insert(task, comp);
        }
        weights.push(PosteriorMixture {
            components,
            assignment,
        });
    }
    if cur.pos != content.len() {
        return Err(cur.error("trailing bytes after the last weight"));
    }
    Ok(MergedModel {
        arch: header.arch,
        weights,
        tasks: header.tasks,
    })
}

pub fn save_model(model: &MergedModel, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<MergedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(path, &bytes)
}

/// Pre-merge task networks as JSON. `serde_json` writes floats with
/// round-trip precision, so these are exact too.
pub fn save_snapshots(snapshots: &[TaskSnapshot], path: &Path) -> Result<()> {
    let text = serde_json::to_vec(snapshots)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_snapshots(path: &Path) -> Result<Vec<TaskSnapshot>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{count_parameters, extract_solution, merge_models, MergeConfig};

    fn model() -> MergedModel {
        let arch = Architecture::new(vec![2, 3, 2]).unwrap();
        let n = arch.num_weights();
        let snaps: Vec<TaskSnapshot> = (0..3)
            .map(|t| TaskSnapshot {
                task_id: t,
                arch: arch.clone(),
                mean: (0..n).map(|i| ((i * 7 + t * 3) % 11) as f64 / 7.0 - 0.6 + 1e-17 * t as f64).collect(),
                sigma: (0..n).map(|i| 0.01 + ((i + t) % 5) as f64 * 0.03).collect(),
                label_map: vec![2 * t, 2 * t + 1],
            })
            .collect();
        merge_models(None, &snaps, &MergeConfig::default(), 11).unwrap().0
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cbln");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, m);
        for t in m.task_ids() {
            let (a, b) = (extract_solution(&m, t).unwrap(), extract_solution(&back, t).unwrap());
            assert!(a.mean.iter().zip(&b.mean).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.var.iter().zip(&b.var).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(count_parameters(&m), count_parameters(&back));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_model(&model()).unwrap();
        bytes[0] = b'X';
        let err = decode_model(Path::new("m"), &bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_model(&model()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_model(Path::new("m"), &bytes),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn corruption_fails_checksum() {
        let mut bytes = encode_model(&model()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_model(Path::new("m"), &bytes), Err(Error::Checksum(_))));
    }

    #[test]
    fn truncated_file() {
        let bytes = encode_model(&model()).unwrap();
        assert!(decode_model(Path::new("m"), &bytes[..10]).is_err());
    }

    #[test]
    fn snapshots_round_trip() {
        let snap = TaskSnapshot {
            task_id: 2,
            arch: Architecture::new(vec![1, 2]).unwrap(),
            mean: vec![0.1 + 0.2, -1e-300, 3.0, std::f64::consts::PI],
            sigma: vec![1e-5, 0.3, 0.25, 1.0 / 3.0],
            label_map: vec![4, 5],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_snapshots(std::slice::from_ref(&snap), &p).unwrap();
        assert_eq!(load_snapshots(&p).unwrap(), vec![snap]);
    }
}
