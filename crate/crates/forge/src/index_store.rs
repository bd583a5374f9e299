//! Per-patient index directories: `index.json` (header), `vectors.bin`
//! (little-endian f32, row-major) and `meta.jsonl` (one row per vector).

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use forge_core::vector::{ChunkMeta, FlatIndex, IndexHeader, VectorError};

pub const HEADER_FILE: &str = "index.json";
pub const VECTORS_FILE: &str = "vectors.bin";
pub const META_FILE: &str = "meta.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum IndexStoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt index at {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IndexStoreError + '_ {
    move |source| IndexStoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the three files. The header goes last so a half-written directory
/// never loads.
pub fn save_index(index: &FlatIndex, dir: &Path) -> Result<(), IndexStoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let header_path = dir.join(HEADER_FILE);
    if header_path.exists() {
        fs::remove_file(&header_path).map_err(io_err(&header_path))?;
    }

    let vec_path = dir.join(VECTORS_FILE);
    let mut bytes = Vec::with_capacity(index.data().len() * 4);
    for x in index.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&vec_path, bytes).map_err(io_err(&vec_path))?;

    let meta_path = dir.join(META_FILE);
    let file = fs::File::create(&meta_path).map_err(io_err(&meta_path))?;
    let mut w = BufWriter::new(file);
    for m in index.meta() {
        serde_json::to_writer(&mut w, m).map_err(|e| io_err(&meta_path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(&meta_path))?;
    }
    w.flush().map_err(io_err(&meta_path))?;

    let header = serde_json::to_vec_pretty(index.header()).map_err(|e| io_err(&header_path)(e.into()))?;
    let tmp = dir.join(format!("{HEADER_FILE}.tmp"));
    fs::write(&tmp, header).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &header_path).map_err(io_err(&header_path))
}

pub fn load_index(dir: &Path) -> Result<FlatIndex, IndexStoreError> {
    let corrupt = |detail: String| IndexStoreError::Corrupt {
        path: dir.to_path_buf(),
        detail,
    };
    let header_path = dir.join(HEADER_FILE);
    let raw = fs::read(&header_path).map_err(io_err(&header_path))?;
    let header: IndexHeader = serde_json::from_slice(&raw).map_err(|e| corrupt(format!("header: {e}")))?;

    let vec_path = dir.join(VECTORS_FILE);
    let bytes = fs::read(&vec_path).map_err(io_err(&vec_path))?;
    if bytes.len() % 4 != 0 {
        return Err(corrupt(format!("vector file length {} is not a multiple of 4", bytes.len())));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let meta_path = dir.join(META_FILE);
    let file = fs::File::open(&meta_path).map_err(io_err(&meta_path))?;
    let mut meta = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&meta_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ChunkMeta =
            serde_json::from_str(&line).map_err(|e| corrupt(format!("metadata line {}: {e}", i + 1)))?;
        meta.push(row);
    }
    FlatIndex::from_parts(header, data, meta).map_err(|e| match e {
        VectorError::Corrupt(detail) => corrupt(detail),
        other => corrupt(other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_core::vector::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(n: usize, dim: usize) -> FlatIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vectors = (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                l2_normalize(&v).unwrap()
            })
            .collect();
        let meta = (0..n as u32)
            .map(|i| ChunkMeta {
                chunk_id: i,
                entry_id: i / 3,
                char_start: i as usize * 10,
                char_end: i as usize * 10 + 40,
            })
            .collect();
        FlatIndex::build("embed-test", dim, vectors, meta).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let index = random_index(10, 24);
        save_index(&index, dir.path()).unwrap();
        let back = load_index(dir.path()).unwrap();
        let bits = |i: &FlatIndex| i.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&index));
        assert_eq!(back.meta(), index.meta());
        assert_eq!(back.header(), index.header());
    }

    #[test]
    fn empty_index_round_trips_and_searches_empty() {
        let dir = tempfile::tempdir().unwrap();
        let index = FlatIndex::build("m", 4, vec![], vec![]).unwrap();
        save_index(&index, dir.path()).unwrap();
        let back = load_index(dir.path()).unwrap();
        assert!(back.is_empty());
        let q = l2_normalize(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(back.search(&q, -1.0).unwrap().is_empty());
    }

    #[test]
    fn truncated_vector_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save_index(&random_index(5, 8), dir.path()).unwrap();
        let path = dir.path().join(VECTORS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 32]).unwrap();
        assert!(matches!(load_index(dir.path()), Err(IndexStoreError::Corrupt { .. })));
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_index(dir.path()), Err(IndexStoreError::Corrupt { .. })));
    }

    #[test]
    fn metadata_count_mismatch_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save_index(&random_index(5, 8), dir.path()).unwrap();
        let path = dir.path().join(META_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let fewer: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        fs::write(&path, fewer).unwrap();
        assert!(matches!(load_index(dir.path()), Err(IndexStoreError::Corrupt { .. })));
    }
}
