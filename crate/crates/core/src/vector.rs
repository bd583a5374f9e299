//! Unit-norm embeddings and an exact flat index searched by dot product.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::text::{chunk_text, ChunkError};

/// Largest accepted deviation of a stored vector's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VectorError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("vector contains a non-finite component")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error("threshold must be a finite number")]
    BadThreshold,
}

/// Euclidean norm accumulated in `f64`.
pub fn l2_norm(values: &[f32]) -> f64 {
    libm::sqrt(values.iter().map(|&x| f64::from(x) * f64::from(x)).sum())
}

/// A vector whose Euclidean norm is 1 within [`NORM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f32>);

impl UnitVector {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// Accepts an already-normalized vector, checking the invariant.
    pub fn from_normalized(values: Vec<f32>) -> Result<Self, VectorError> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(VectorError::NonFinite);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(VectorError::Corrupt(alloc::format!("vector norm {norm} is not 1")));
        }
        Ok(UnitVector(values))
    }

    pub fn dot(&self, other: &[f32]) -> f64 {
        dot(&self.0, other)
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Rescales `values` to unit length. Zero and non-finite vectors are errors.
pub fn l2_normalize(values: &[f32]) -> Result<UnitVector, VectorError> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(VectorError::NonFinite);
    }
    let norm = l2_norm(values);
    if norm == 0.0 {
        return Err(VectorError::ZeroVector);
    }
    Ok(UnitVector(
        values.iter().map(|&x| (f64::from(x) / norm) as f32).collect(),
    ))
}

/// A piece of one report entry submitted for embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: u32,
    pub entry_id: u32,
    /// Character offsets into the cleaned entry text.
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

impl Chunk {
    pub fn meta(&self) -> ChunkMeta {
        ChunkMeta {
            chunk_id: self.chunk_id,
            entry_id: self.entry_id,
            char_start: self.char_start,
            char_end: self.char_end,
        }
    }
}

/// Chunks one entry's text, numbering chunks from `first_chunk_id`.
pub fn chunk_for_embedding(
    entry_id: u32,
    text: &str,
    window_tokens: usize,
    overlap_tokens: usize,
    first_chunk_id: u32,
) -> Result<Vec<Chunk>, ChunkError> {
    Ok(chunk_text(text, window_tokens, overlap_tokens)?
        .into_iter()
        .zip(first_chunk_id..)
        .map(|(c, chunk_id)| Chunk {
            chunk_id,
            entry_id,
            char_start: c.span.start,
            char_end: c.span.end,
            text: c.text.into(),
        })
        .collect())
}

/// Metadata row stored alongside each vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMeta {
    pub chunk_id: u32,
    pub entry_id: u32,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub dimension: usize,
    pub count: usize,
    pub embed_model_id: String,
    pub normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub entry_id: u32,
    pub chunk_id: u32,
    pub score: f64,
}

/// Exact index over unit vectors: row-major `count x dimension` floats with
/// one metadata row per vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    header: IndexHeader,
    data: Vec<f32>,
    meta: Vec<ChunkMeta>,
}

impl FlatIndex {
    pub fn build(
        embed_model_id: impl Into<String>,
        dimension: usize,
        vectors: Vec<UnitVector>,
        meta: Vec<ChunkMeta>,
    ) -> Result<Self, VectorError> {
        if vectors.len() != meta.len() {
            return Err(VectorError::Corrupt(alloc::format!(
                "{} vectors but {} metadata rows",
                vectors.len(),
                meta.len()
            )));
        }
        let mut data = Vec::with_capacity(vectors.len() * dimension);
        for v in &vectors {
            if v.dimension() != dimension {
                return Err(VectorError::DimensionMismatch {
                    expected: dimension,
                    found: v.dimension(),
                });
            }
            data.extend_from_slice(v.as_slice());
        }
        Ok(FlatIndex {
            header: IndexHeader {
                dimension,
                count: vectors.len(),
                embed_model_id: embed_model_id.into(),
                normalized: true,
            },
            data,
            meta,
        })
    }

    /// Reassembles an index from persisted parts, verifying that counts agree
    /// and that every vector is normalized.
    pub fn from_parts(header: IndexHeader, data: Vec<f32>, meta: Vec<ChunkMeta>) -> Result<Self, VectorError> {
        if !header.normalized {
            return Err(VectorError::Corrupt("header does not declare normalized vectors".into()));
        }
        if data.len() != header.count * header.dimension {
            return Err(VectorError::Corrupt(alloc::format!(
                "header declares {} x {} values but the vector block holds {}",
                header.count,
                header.dimension,
                data.len()
            )));
        }
        if meta.len() != header.count {
            return Err(VectorError::Corrupt(alloc::format!(
                "header declares {} vectors but metadata has {} rows",
                header.count,
                meta.len()
            )));
        }
        if header.dimension > 0 {
            for row in data.chunks_exact(header.dimension) {
                UnitVector::from_normalized(row.to_vec())?;
            }
        }
        Ok(FlatIndex { header, data, meta })
    }

    pub fn header(&self) -> &IndexHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn dimension(&self) -> usize {
        self.header.dimension
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn meta(&self) -> &[ChunkMeta] {
        &self.meta
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        let d = self.header.dimension;
        &self.data[row * d..(row + 1) * d]
    }

    /// Every stored chunk scoring at least `threshold`, best first, ties
    /// broken by ascending chunk id.
    pub fn search(&self, query: &UnitVector, threshold: f64) -> Result<Vec<SearchHit>, VectorError> {
        if !threshold.is_finite() {
            return Err(VectorError::BadThreshold);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.dimension() != self.header.dimension {
            return Err(VectorError::DimensionMismatch {
                expected: self.header.dimension,
                found: query.dimension(),
            });
        }
        let mut hits: Vec<SearchHit> = (0..self.len())
            .filter_map(|row| {
                let score = query.dot(self.vector(row));
                (score >= threshold).then(|| SearchHit {
                    entry_id: self.meta[row].entry_id,
                    chunk_id: self.meta[row].chunk_id,
                    score,
                })
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.chunk_id.cmp(&b.chunk_id)));
        Ok(hits)
    }
}

/// Entries with at least one hit chunk.
pub fn select_entries(hits: &[SearchHit]) -> BTreeSet<u32> {
    hits.iter().map(|h| h.entry_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn meta(chunk_id: u32, entry_id: u32) -> ChunkMeta {
        ChunkMeta {
            chunk_id,
            entry_id,
            char_start: 0,
            char_end: 1,
        }
    }

    #[test]
    fn normalizes_3_4_5() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(v.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn unit_vector_is_fixed_point() {
        let v = l2_normalize(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_vector_is_an_error() {
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(VectorError::ZeroVector));
        assert_eq!(l2_normalize(&[f32::NAN, 1.0]), Err(VectorError::NonFinite));
    }

    fn axis_index() -> FlatIndex {
        let vectors = vec![
            l2_normalize(&[1.0, 0.0, 0.0]).unwrap(),
            l2_normalize(&[1.0, 1.0, 0.0]).unwrap(),
            l2_normalize(&[0.0, 1.0, 0.0]).unwrap(),
        ];
        FlatIndex::build("m", 3, vectors, vec![meta(0, 7), meta(1, 7), meta(2, 9)]).unwrap()
    }

    #[test]
    fn self_similarity_hits_with_score_one() {
        let index = axis_index();
        let query = l2_normalize(&[0.0, 1.0, 0.0]).unwrap();
        let hits = index.search(&query, 0.99).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].chunk_id, 2);
        assert!((hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_query_finds_nothing() {
        let index = axis_index();
        let query = l2_normalize(&[0.0, 0.0, 1.0]).unwrap();
        assert!(index.search(&query, 0.1).unwrap().is_empty());
        assert_eq!(index.search(&query, -1.0).unwrap().len(), 3);
    }

    #[test]
    fn hits_sorted_by_score_then_chunk() {
        let index = axis_index();
        let query = l2_normalize(&[1.0, 1.0, 0.0]).unwrap();
        let hits = index.search(&query, 0.0).unwrap();
        let order: Vec<u32> = hits.iter().map(|h| h.chunk_id).collect();
        assert_eq!(order, [1, 0, 2]);
    }

    #[test]
    fn empty_index_searches_empty() {
        let index = FlatIndex::build("m", 3, vec![], vec![]).unwrap();
        let query = l2_normalize(&[1.0]).unwrap();
        assert!(index.search(&query, -1.0).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let query = l2_normalize(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            axis_index().search(&query, 0.0),
            Err(VectorError::DimensionMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn from_parts_checks_counts() {
        let index = axis_index();
        let mut header = index.header().clone();
        header.count = 4;
        assert!(matches!(
            FlatIndex::from_parts(header, index.data().to_vec(), index.meta().to_vec()),
            Err(VectorError::Corrupt(_))
        ));
        let rebuilt =
            FlatIndex::from_parts(index.header().clone(), index.data().to_vec(), index.meta().to_vec()).unwrap();
        assert_eq!(rebuilt, index);
    }

    #[test]
    fn selects_distinct_entries() {
        let hits = [
            SearchHit { entry_id: 7, chunk_id: 2, score: 0.9 },
            SearchHit { entry_id: 7, chunk_id: 3, score: 0.5 },
        ];
        assert_eq!(select_entries(&hits).into_iter().collect::<Vec<_>>(), [7]);
        assert!(select_entries(&[]).is_empty());
        let spread = [
            SearchHit { entry_id: 1, chunk_id: 0, score: 0.9 },
            SearchHit { entry_id: 4, chunk_id: 5, score: 0.8 },
            SearchHit { entry_id: 2, chunk_id: 9, score: 0.7 },
            SearchHit { entry_id: 4, chunk_id: 6, score: 0.6 },
        ];
        assert_eq!(select_entries(&spread).len(), 3);
    }

    #[test]
    fn embedding_chunks_carry_entry_and_ids() {
        let text = "a".repeat(50);
        let chunks = chunk_for_embedding(3, &text, 5, 1, 10).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].chunk_id, 10);
        assert!(chunks.iter().all(|c| c.entry_id == 3));
        assert_eq!(chunks[2].char_end, 50);
    }
}
