//! Embedding storage (EMBV1 files) and exact top-K cosine ranking.
//!
//! EMBV1 layout, little-endian throughout:
//!
//! ```text
//! magic   45 4D 42 56 31 00   "EMBV1\0"
//! dim     u32
//! count   u64
//! count × { id_len u16, id utf-8 bytes, dim × f32 }
//! ```
//!
//! Writers may store unnormalized vectors; the loader normalizes every row.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use tracing::warn;

use crate::domain::{rank_order, DomainError, ImageId, RankedList, View};

pub const EMBV1_MAGIC: [u8; 6] = *b"EMBV1\0";

/// Rows whose norm is already this close to 1 are kept bit-for-bit.
const UNIT_NORM_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedStoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic at byte offset 0: expected \"EMBV1\\0\"")]
    BadMagic,
    #[error("file truncated at byte offset {offset} (needed {needed} more bytes)")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("duplicate image id {id:?} at byte offset {offset}")]
    DuplicateId { id: String, offset: usize },
    #[error("dimension is zero")]
    ZeroDim,
    #[error("invalid image id at byte offset {offset}: {reason}")]
    BadId { offset: usize, reason: String },
    #[error("{trailing} trailing bytes after the last record at byte offset {offset}")]
    TrailingBytes { offset: usize, trailing: usize },
    #[error("query has {got} components, store dimension is {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("unknown image id {0}")]
    UnknownImageId(ImageId),
    #[error("top_n must be at least 1")]
    ZeroTopN,
    #[error("image id {0:?} longer than 65535 bytes")]
    IdTooLong(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Row-major matrix of L2-normalized embeddings keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<ImageId>,
    vectors: Vec<f32>,
    index: HashMap<ImageId, usize>,
    /// Ids whose stored vector had zero norm and were replaced by e1.
    replaced_zero_rows: Vec<ImageId>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from raw rows, normalizing each one.
    pub fn from_rows(dim: usize, rows: Vec<(ImageId, Vec<f32>)>) -> Result<Self, EmbedStoreError> {
        if dim == 0 {
            return Err(EmbedStoreError::ZeroDim);
        }
        let mut ids = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (id, row) in rows {
            if row.len() != dim {
                return Err(EmbedStoreError::DimMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            ids.push(id);
            vectors.extend_from_slice(&row);
        }
        Self::assemble(dim, ids, vectors, |i| i)
    }

    fn assemble(
        dim: usize,
        ids: Vec<ImageId>,
        mut vectors: Vec<f32>,
        offset_of: impl Fn(usize) -> usize,
    ) -> Result<Self, EmbedStoreError> {
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(EmbedStoreError::DuplicateId {
                    id: id.to_string(),
                    offset: offset_of(row),
                });
            }
        }
        let mut replaced_zero_rows = Vec::new();
        for (row, chunk) in vectors.chunks_exact_mut(dim).enumerate() {
            if !normalize_in_place(chunk) {
                warn!(id = %ids[row], "zero-norm embedding replaced by unit vector e1");
                replaced_zero_rows.push(ids[row].clone());
            }
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            index,
            replaced_zero_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.index.contains_key(id)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector_of(&self, id: &ImageId) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn replaced_zero_rows(&self) -> &[ImageId] {
        &self.replaced_zero_rows
    }

    /// Exact top-`top_n` ranking by cosine similarity against `query`.
    pub fn rank_by_vector(
        &self,
        query: &[f32],
        top_n: usize,
        produced_for: &str,
        view: View,
    ) -> Result<RankedList, EmbedStoreError> {
        if query.len() != self.dim {
            return Err(EmbedStoreError::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if top_n == 0 {
            return Err(EmbedStoreError::ZeroTopN);
        }
        let mut q = query.to_vec();
        normalize_in_place(&mut q);

        let mut scored: Vec<(ImageId, f64)> = Vec::with_capacity(self.len());
        for (i, id) in self.ids.iter().enumerate() {
            let dot: f32 = self.row(i).iter().zip(&q).map(|(a, b)| a * b).sum();
            scored.push((id.clone(), dot as f64));
        }
        let keep = top_n.min(scored.len());
        if keep < scored.len() && keep > 0 {
            scored.select_nth_unstable_by(keep - 1, rank_order);
            scored.truncate(keep);
        }
        scored.sort_by(rank_order);
        Ok(RankedList::from_sorted(view, produced_for, scored)?)
    }

    /// Ranks the gallery against the stored vector of `reference`.
    /// The reference itself stays in the result.
    pub fn rank_by_image(
        &self,
        reference: &ImageId,
        top_n: usize,
        produced_for: &str,
    ) -> Result<RankedList, EmbedStoreError> {
        let row = self
            .vector_of(reference)
            .ok_or_else(|| EmbedStoreError::UnknownImageId(reference.clone()))?
            .to_vec();
        self.rank_by_vector(&row, top_n, produced_for, View::Vis)
    }
}

/// Normalizes to unit length. Returns false (and writes e1) for zero vectors.
fn normalize_in_place(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return norm != 0.0 && norm.is_finite();
    }
    if (norm - 1.0).abs() <= UNIT_NORM_SLACK {
        return true;
    }
    v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    true
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedStoreError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(EmbedStoreError::TruncatedFile {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, EmbedStoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, EmbedStoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EmbedStoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_embv1(bytes: &[u8]) -> Result<EmbeddingMatrix, EmbedStoreError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let head = &bytes[..bytes.len().min(EMBV1_MAGIC.len())];
    if head != &EMBV1_MAGIC[..head.len()] {
        return Err(EmbedStoreError::BadMagic);
    }
    if cur.take(EMBV1_MAGIC.len())? != EMBV1_MAGIC {
        return Err(EmbedStoreError::BadMagic);
    }
    let dim = cur.u32()? as usize;
    if dim == 0 {
        return Err(EmbedStoreError::ZeroDim);
    }
    let count = cur.u64()? as usize;

    // Guard the allocation against a corrupt count.
    let min_record = 2 + dim * 4;
    let cap = count.min((bytes.len() - cur.pos) / min_record + 1);
    let mut ids = Vec::with_capacity(cap);
    let mut offsets = Vec::with_capacity(cap);
    let mut vectors = Vec::with_capacity(cap * dim);
    for _ in 0..count {
        let record_offset = cur.pos;
        let id_len = cur.u16()? as usize;
        let raw = cur.take(id_len)?;
        let text = std::str::from_utf8(raw).map_err(|e| EmbedStoreError::BadId {
            offset: record_offset + 2,
            reason: e.to_string(),
        })?;
        let id = ImageId::new(text).map_err(|e| EmbedStoreError::BadId {
            offset: record_offset + 2,
            reason: e.to_string(),
        })?;
        let comps = cur.take(dim * 4)?;
        vectors.extend(comps.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        ids.push(id);
        offsets.push(record_offset);
    }
    if cur.pos != bytes.len() {
        return Err(EmbedStoreError::TrailingBytes {
            offset: cur.pos,
            trailing: bytes.len() - cur.pos,
        });
    }
    EmbeddingMatrix::assemble(dim, ids, vectors, |row| offsets[row])
}

pub fn load_embv1(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbedStoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| EmbedStoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_embv1(&bytes)
}

/// Encodes raw rows; vectors are written as given.
pub fn encode_embv1<'a, I>(dim: usize, rows: I) -> Result<Vec<u8>, EmbedStoreError>
where
    I: IntoIterator<Item = (&'a ImageId, &'a [f32])>,
{
    if dim == 0 {
        return Err(EmbedStoreError::ZeroDim);
    }
    let rows: Vec<_> = rows.into_iter().collect();
    let mut out = Vec::with_capacity(18 + rows.len() * (dim * 4 + 16));
    out.extend_from_slice(&EMBV1_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for (id, v) in rows {
        if v.len() != dim {
            return Err(EmbedStoreError::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        let raw = id.as_str().as_bytes();
        let len = u16::try_from(raw.len()).map_err(|_| EmbedStoreError::IdTooLong(id.to_string()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(raw);
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_embv1_rows<'a, I>(path: impl AsRef<Path>, dim: usize, rows: I) -> Result<(), EmbedStoreError>
where
    I: IntoIterator<Item = (&'a ImageId, &'a [f32])>,
{
    let path = path.as_ref();
    let bytes = encode_embv1(dim, rows)?;
    let io_err = |source| EmbedStoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

pub fn write_embv1(path: impl AsRef<Path>, matrix: &EmbeddingMatrix) -> Result<(), EmbedStoreError> {
    write_embv1_rows(
        path,
        matrix.dim(),
        matrix.ids().iter().enumerate().map(|(i, id)| (id, matrix.row(i))),
    )
}
