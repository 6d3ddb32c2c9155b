//! Embedding extraction with a per-encoder disk cache keyed by pixel hash.
//!
//! Cache layout in the cache directory, per encoder name and version:
//! `<name>-<version>.json` lists the pixel hash of every cached row and
//! `<name>-<version>.bin` holds the rows as little-endian `f64`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderPort;
use crate::error::{read_json, write_json, DataError, Result};
use crate::image_io::{load_and_normalize, pixel_hash};
use crate::manifest::{DatasetManifest, Split};

const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheIndex {
    schema_version: u32,
    encoder: String,
    version: String,
    dim: usize,
    hashes: Vec<String>,
}

struct Cache {
    index_path: PathBuf,
    blob_path: PathBuf,
    index: CacheIndex,
    rows: Vec<f64>,
    lookup: HashMap<String, usize>,
}

impl Cache {
    fn open(dir: &Path, encoder: &dyn EncoderPort) -> Result<Self> {
        let stem = format!("{}-{}", encoder.name(), encoder.version());
        let index_path = dir.join(format!("{stem}.json"));
        let blob_path = dir.join(format!("{stem}.bin"));
        let (index, rows) = if index_path.exists() {
            let index: CacheIndex = read_json(&index_path)?;
            if index.dim != encoder.dim() {
                return Err(DataError::CacheDimMismatch { cached: index.dim, encoder: encoder.dim() });
            }
            let bytes = fs::read(&blob_path).map_err(|e| DataError::io(&blob_path, e))?;
            if bytes.len() != index.hashes.len() * index.dim * 8 {
                return Err(DataError::Manifest(format!("{} does not match its index", blob_path.display())));
            }
            let rows = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            (index, rows)
        } else {
            let index = CacheIndex {
                schema_version: SCHEMA_VERSION,
                encoder: encoder.name().to_string(),
                version: encoder.version().to_string(),
                dim: encoder.dim(),
                hashes: Vec::new(),
            };
            (index, Vec::new())
        };
        let lookup = index.hashes.iter().enumerate().map(|(i, h)| (h.clone(), i)).collect();
        Ok(Self { index_path, blob_path, index, rows, lookup })
    }

    fn get(&self, hash: &str) -> Option<&[f64]> {
        let d = self.index.dim;
        self.lookup.get(hash).map(|&i| &self.rows[i * d..(i + 1) * d])
    }

    fn insert(&mut self, hash: String, row: &[f64]) {
        self.lookup.insert(hash.clone(), self.index.hashes.len());
        self.index.hashes.push(hash);
        self.rows.extend_from_slice(row);
    }

    /// Blob first, index second: an index never refers past the end of its blob.
    fn flush(&self) -> Result<()> {
        let bytes: Vec<u8> = self.rows.iter().flat_map(|v| v.to_le_bytes()).collect();
        protoguide_core::fsutil::write_atomic(&self.blob_path, &bytes).map_err(|e| DataError::io(&self.blob_path, e))?;
        write_json(&self.index_path, &self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    /// One row per selected record, in manifest order.
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub paths: Vec<String>,
    pub cache_hits: usize,
    pub encoded: usize,
}

/// Embeds the manifest records in `split` (all records when `None`), reusing
/// cached rows for images whose normalized pixels were seen before.
pub fn extract_embeddings(
    manifest: &DatasetManifest,
    split: Option<Split>,
    encoder: &dyn EncoderPort,
    cache_dir: &Path,
    target_size: usize,
) -> Result<Embeddings> {
    fs::create_dir_all(cache_dir).map_err(|e| DataError::io(cache_dir, e))?;
    let mut cache = Cache::open(cache_dir, encoder)?;
    let dim = encoder.dim();
    let mut out = Embeddings { dim, rows: Vec::new(), labels: Vec::new(), paths: Vec::new(), cache_hits: 0, encoded: 0 };
    for record in manifest.records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
        let path = manifest.resolve(record);
        let image = load_and_normalize(&path, target_size)?;
        let hash = pixel_hash(&image);
        let row = match cache.get(&hash) {
            Some(row) => {
                out.cache_hits += 1;
                row.to_vec()
            }
            None => {
                let row = encoder.encode(&image).map_err(|message| DataError::Encoder { path: path.clone(), message })?;
                if row.len() != dim {
                    return Err(DataError::Encoder {
                        path,
                        message: format!("returned {} values, declared {dim}", row.len()),
                    });
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(DataError::Encoder { path, message: "returned non-finite values".into() });
                }
                cache.insert(hash, &row);
                out.encoded += 1;
                row
            }
        };
        out.rows.push(row);
        out.labels.push(record.class_id);
        out.paths.push(record.path.clone());
    }
    if out.encoded > 0 {
        cache.flush()?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::encoder::MeanPixelEncoder;
    use crate::manifest::build_manifest;
    use crate::synthetic::{write_dataset, Pattern};

    struct Counting {
        inner: MeanPixelEncoder,
        calls: Cell<usize>,
        dim: usize,
    }

    impl EncoderPort for Counting {
        fn name(&self) -> &str {
            "counting"
        }
        fn version(&self) -> &str {
            "1"
        }
        fn dim(&self) -> usize {
            self.dim
        }
        fn encode(&self, image: &protoguide_core::ImageTensor) -> std::result::Result<Vec<f64>, String> {
            self.calls.set(self.calls.get() + 1);
            self.inner.encode(image)
        }
    }

    fn fixture() -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        write_dataset(&root, &[("dark", Pattern::Solid(40)), ("light", Pattern::Solid(220))], 6, 8, 0).unwrap();
        let m = build_manifest(&root, 4, 2, 0, "solid").unwrap();
        (dir, m)
    }

    #[test]
    fn mean_pixel_on_solid_classes() {
        let (dir, m) = fixture();
        let enc = MeanPixelEncoder { channels: 3 };
        let e = extract_embeddings(&m, Some(Split::Train), &enc, &dir.path().join("cache"), 8).unwrap();
        assert_eq!(e.rows.len(), 8);
        for (row, &label) in e.rows.iter().zip(&e.labels) {
            let expected = crate::image_io::normalize(if label == 0 { 40 } else { 220 });
            assert!(row.iter().all(|&v| (v - expected).abs() < 1e-12), "{row:?}");
        }
        let order: Vec<_> = m.split(Split::Train).map(|r| r.path.clone()).collect();
        assert_eq!(e.paths, order);
    }

    #[test]
    fn cache_hits_skip_the_encoder() {
        let (dir, m) = fixture();
        let cache = dir.path().join("cache");
        let enc = Counting { inner: MeanPixelEncoder { channels: 3 }, calls: Cell::new(0), dim: 3 };
        let first = extract_embeddings(&m, None, &enc, &cache, 8).unwrap();
        // Solid images of one class share a pixel hash, so only two encodes happen.
        assert_eq!(enc.calls.get(), 2);
        let second = extract_embeddings(&m, None, &enc, &cache, 8).unwrap();
        assert_eq!(enc.calls.get(), 2);
        assert_eq!(second.cache_hits, 12);
        let bits = |e: &Embeddings| e.rows.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&first), bits(&second));
    }

    #[test]
    fn dim_mismatch_is_fatal() {
        let (dir, m) = fixture();
        let cache = dir.path().join("cache");
        let enc = Counting { inner: MeanPixelEncoder { channels: 3 }, calls: Cell::new(0), dim: 3 };
        extract_embeddings(&m, None, &enc, &cache, 8).unwrap();
        let wider = Counting { dim: 4, ..enc };
        assert!(matches!(
            extract_embeddings(&m, None, &wider, &cache, 8),
            Err(DataError::CacheDimMismatch { cached: 3, encoder: 4 })
        ));
    }

    #[test]
    fn encoder_errors_name_the_image() {
        let (dir, m) = fixture();
        let enc = MeanPixelEncoder { channels: 1 };
        let err = extract_embeddings(&m, None, &enc, &dir.path().join("c"), 8).unwrap_err();
        assert!(err.to_string().contains(&m.records[0].path), "{err}");
    }
}
