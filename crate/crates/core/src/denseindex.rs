//! Exhaustive inner-product index over unit vectors.
//!
//! File layout (little-endian):
//!
//! ```text
//! b"DSEIDX01"  version:u32  dim:u32  count:u64
//! count x dim f32 values, row-major
//! count x (len:u32, UTF-8 bytes)   doc ids
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::eval::RunList;

pub const INDEX_MAGIC: &[u8; 8] = b"DSEIDX01";
pub const INDEX_VERSION: u32 = 1;
/// Allowed deviation of a stored vector's norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    vectors: Vec<f32>,
    doc_ids: Vec<String>,
    ids: HashSet<String>,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            doc_ids: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn add(&mut self, doc_id: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        let norm = vector
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
            return Err(Error::Validation(format!(
                "vector for {doc_id:?} has norm {norm}, expected 1"
            )));
        }
        if self.ids.contains(doc_id) {
            return Err(Error::Validation(format!(
                "doc_id {doc_id:?} already indexed"
            )));
        }
        self.ids.insert(doc_id.to_string());
        self.doc_ids.push(doc_id.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    /// Dot product accumulated in f64, reported as f32.
    pub fn score(&self, i: usize, query: &[f32]) -> f32 {
        self.vector(i)
            .iter()
            .zip(query)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum::<f64>() as f32
    }

    /// Exact top-`k` by dot product, ties by doc_id ascending.
    pub fn search(&self, query_id: &str, query: &[f32], k: usize) -> Result<RunList> {
        if query.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let scored = (0..self.len())
            .map(|i| (self.doc_ids[i].clone(), f64::from(self.score(i, query))))
            .collect();
        Ok(RunList::from_scores(query_id, scored, k))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.vectors.len() * 4);
        for v in &self.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        for id in &self.doc_ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("reading index: {e}")))?;
        let mut cur = Cursor::new(&bytes, "index");
        if cur.take(8, "magic")? != INDEX_MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let version = cur.u32("version")?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!(
                "unsupported index version {version}"
            )));
        }
        let dim = cur.u32("dim")? as usize;
        let count = cur.u64("count")?;
        let values = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("index count overflows".into()))?;
        let vectors: Vec<f32> = cur
            .take(values, "vectors")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut doc_ids = Vec::new();
        for _ in 0..count {
            let len = cur.u32("doc id length")? as usize;
            let s = std::str::from_utf8(cur.take(len, "doc id")?)
                .map_err(|_| Error::Format("doc id is not UTF-8".into()))?;
            doc_ids.push(s.to_string());
        }
        if cur.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after declared {count} entries",
                cur.remaining()
            )));
        }
        let ids: HashSet<String> = doc_ids.iter().cloned().collect();
        if ids.len() != doc_ids.len() {
            return Err(Error::Format("index contains duplicate doc ids".into()));
        }
        Ok(Self {
            dim,
            vectors,
            doc_ids,
            ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}
