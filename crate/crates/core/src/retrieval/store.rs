use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PEMB";
const VERSION: u32 = 1;
/// Allowed deviation of a stored row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

/// Immutable matrix of unit-norm retrieval vectors with per-row labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    vectors: Tensor,
    labels: Vec<String>,
    image_refs: Vec<String>,
    /// SHA-256 of the checkpoint the vectors came from, when known.
    pub fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TrailerRow {
    patent_id: String,
    image_path: String,
}

/// Dot product accumulated in `f64`, left to right.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

/// Unit-norm copy of `v`. Fails on zero or non-finite input.
pub fn l2_normalized(v: &[f32]) -> Result<Vec<f32>> {
    let norm = dot_f64(v, v).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

impl EmbeddingStore {
    /// Normalizes each row of `features` (`[R, d]`).
    pub fn new(features: &Tensor, labels: Vec<String>, image_refs: Vec<String>) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::shape(format!(
                "embedding matrix must be 2-D, got {:?}",
                features.shape()
            )));
        }
        let (r, d) = (features.shape()[0], features.shape()[1]);
        let mut data = Vec::with_capacity(r * d);
        for i in 0..r {
            let row = l2_normalized(features.row(i))
                .map_err(|_| Error::invalid(format!("embedding row {i} has zero norm")))?;
            data.extend(row);
        }
        Self::from_normalized(Tensor::new([r, d], data)?, labels, image_refs)
    }

    /// Wraps rows that are already unit norm, checking that they are.
    pub fn from_normalized(vectors: Tensor, labels: Vec<String>, image_refs: Vec<String>) -> Result<Self> {
        if vectors.ndim() != 2 {
            return Err(Error::shape("embedding matrix must be 2-D"));
        }
        let r = vectors.shape()[0];
        if labels.len() != r || image_refs.len() != r {
            return Err(Error::shape(format!(
                "{r} rows but {} labels and {} image refs",
                labels.len(),
                image_refs.len()
            )));
        }
        for i in 0..r {
            let row = vectors.row(i);
            let n = dot_f64(row, row).sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::EmbeddingFile(format!("row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            vectors,
            labels,
            image_refs,
            fingerprint: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.vectors.row(i)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn image_refs(&self) -> &[String] {
        &self.image_refs
    }

    pub fn find_ref(&self, image_ref: &str) -> Option<usize> {
        self.image_refs.iter().position(|r| r == image_ref)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (r, d) = (self.len(), self.dim());
        let mut out = Vec::with_capacity(16 + 4 * r * d);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.vectors.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (label, path) in self.labels.iter().zip(&self.image_refs) {
            let row = TrailerRow {
                patent_id: label.clone(),
                image_path: path.clone(),
            };
            out.extend(serde_json::to_vec(&row).expect("trailer rows serialize"));
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::EmbeddingFile(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing PEMB header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let (r, d) = (word(8) as usize, word(12) as usize);
        let payload = r
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("dimensions overflow".into()))?;
        let body = bytes
            .get(16..16 + payload)
            .ok_or_else(|| bad(format!("truncated payload: expected {r}x{d} floats")))?;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let trailer = std::str::from_utf8(&bytes[16 + payload..])
            .map_err(|_| bad("trailer is not UTF-8".into()))?;
        let mut labels = Vec::with_capacity(r);
        let mut refs = Vec::with_capacity(r);
        for (i, line) in trailer.lines().enumerate() {
            let row: TrailerRow = serde_json::from_str(line)
                .map_err(|e| bad(format!("trailer line {}: {e}", i + 1)))?;
            labels.push(row.patent_id);
            refs.push(row.image_path);
        }
        if labels.len() != r {
            return Err(bad(format!("trailer has {} rows, header says {r}", labels.len())));
        }
        Self::from_normalized(Tensor::new([r, d], data)?, labels, refs)
    }

    /// Writes the PEMB file and, if the fingerprint is known, a
    /// `<path>.fingerprint` sidecar holding it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = fingerprint_path(path);
        match &self.fingerprint {
            Some(fp) => std::fs::write(&side, format!("{fp}\n")).map_err(|e| Error::io(&side, e)),
            None if side.exists() => std::fs::remove_file(&side).map_err(|e| Error::io(&side, e)),
            None => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut store = Self::from_bytes(&bytes)?;
        let side = fingerprint_path(path);
        if side.exists() {
            let fp = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            store.fingerprint = Some(fp.trim().to_string());
        }
        Ok(store)
    }
}

pub fn fingerprint_path(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".fingerprint");
    PathBuf::from(s)
}
