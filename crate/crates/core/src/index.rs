//! Pre-computed document embeddings with exact top-k dot-product search.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::corpus::Corpus;
use crate::encoder::{EncoderBackend, Side};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DIGI";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    embeddings: Array2<f64>,
    fingerprint: String,
    /// Seconds since the epoch; not persisted, so loaded indexes carry `None`.
    built_at: Option<u64>,
}

/// Descending score, ascending doc id on ties.
// `+ 0.0` folds -0.0 into 0.0 so equal scores tie under total_cmp
fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    (b.1 + 0.0)
        .total_cmp(&(a.1 + 0.0))
        .then_with(|| a.0.cmp(b.0))
}

impl DenseIndex {
    pub fn from_parts(
        doc_ids: Vec<String>,
        embeddings: Array2<f64>,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if doc_ids.len() != embeddings.nrows() {
            return Err(Error::DimensionMismatch {
                expected: doc_ids.len(),
                actual: embeddings.nrows(),
            });
        }
        let mut seen = HashSet::with_capacity(doc_ids.len());
        if let Some(dup) = doc_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        Ok(Self {
            doc_ids,
            embeddings,
            fingerprint: fingerprint.into(),
            built_at: None,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn built_at(&self) -> Option<u64> {
        self.built_at
    }

    pub fn check_backend<B: EncoderBackend + ?Sized>(&self, backend: &B) -> Result<()> {
        self.check_fingerprint(backend.fingerprint())
    }

    pub fn check_fingerprint(&self, active: &str) -> Result<()> {
        if self.fingerprint != active {
            return Err(Error::FingerprintMismatch {
                indexed: self.fingerprint.clone(),
                active: active.to_string(),
            });
        }
        Ok(())
    }

    /// The `min(k, N)` highest-scoring documents, best first.
    pub fn retrieve(&self, query: ArrayView1<'_, f64>, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        let scores = self.embeddings.dot(&query);
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            rank_order((&self.doc_ids[a], scores[a]), (&self.doc_ids[b], scores[b]))
        };
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                doc_id: self.doc_ids[i].clone(),
                score: scores[i],
            })
            .collect())
    }

    /// Header (magic, version, N, d, fingerprint), doc id table, then the
    /// N×d embedding matrix as row-major little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.embeddings.len() * 8);
        out.extend_from_slice(MAGIC);
        binio::put_u32(&mut out, VERSION);
        binio::put_u64(&mut out, self.len() as u64);
        binio::put_u64(&mut out, self.dim() as u64);
        binio::put_string(&mut out, &self.fingerprint);
        for id in &self.doc_ids {
            binio::put_string(&mut out, id);
        }
        binio::put_f64s(&mut out, self.embeddings.iter());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "index");
        if r.bytes(4)? != MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let n = r.usize()?;
        let d = r.usize()?;
        let fingerprint = r.string()?;
        let mut doc_ids = Vec::with_capacity(n.min(r.remaining() / 4));
        for _ in 0..n {
            doc_ids.push(r.string()?);
        }
        let area = binio::checked_area(&r, n, d)?;
        let data = r.f64s(area)?;
        r.finish()?;
        let embeddings =
            Array2::from_shape_vec((n, d), data).map_err(|e| r.corrupt(e.to_string()))?;
        Self::from_parts(doc_ids, embeddings, fingerprint).map_err(|e| r.corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads an index without checking which model built it.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Reads an index and refuses it unless it was built by `backend`.
pub fn load_index<B: EncoderBackend + ?Sized>(
    path: impl AsRef<Path>,
    backend: &B,
) -> Result<DenseIndex> {
    let index = DenseIndex::read(path)?;
    index.check_backend(backend)?;
    Ok(index)
}

pub fn save_index(index: &DenseIndex, path: impl AsRef<Path>) -> Result<()> {
    index.save(path)
}

pub fn build_index<B: EncoderBackend + ?Sized>(
    corpus: &Corpus,
    backend: &B,
    batch_size: usize,
) -> Result<DenseIndex> {
    build_index_with_progress(corpus, backend, batch_size, |done, total| {
        log::info!("encoded {done}/{total} documents");
    })
}

/// Encodes every document's `full_text()`. Row order follows corpus order
/// regardless of batch size or parallelism.
pub fn build_index_with_progress<B, P>(
    corpus: &Corpus,
    backend: &B,
    batch_size: usize,
    mut progress: P,
) -> Result<DenseIndex>
where
    B: EncoderBackend + ?Sized,
    P: FnMut(usize, usize),
{
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let d = backend.embedding_dim();
    let total = corpus.len();
    let mut embeddings = Array2::zeros((total, d));
    let encode = |doc: &crate::corpus::Document| {
        backend
            .encode(&doc.full_text(), Side::Document)
            .map_err(|e| Error::for_document(&doc.doc_id, e))
    };
    let mut done = 0;
    for (b, batch) in corpus.as_slice().chunks(batch_size).enumerate() {
        let vecs: Vec<_> = if backend.supports_parallel() {
            batch.par_iter().map(encode).collect::<Result<_>>()?
        } else {
            batch.iter().map(encode).collect::<Result<_>>()?
        };
        for (i, v) in vecs.into_iter().enumerate() {
            if v.len() != d {
                return Err(Error::for_document(
                    &batch[i].doc_id,
                    Error::DimensionMismatch {
                        expected: d,
                        actual: v.len(),
                    },
                ));
            }
            embeddings.row_mut(b * batch_size + i).assign(&v);
        }
        done += batch.len();
        progress(done, total);
    }
    let doc_ids = corpus.iter().map(|d| d.doc_id.clone()).collect();
    let mut index = DenseIndex::from_parts(doc_ids, embeddings, backend.fingerprint())?;
    index.built_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs());
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> DenseIndex {
        DenseIndex::from_parts(
            vec!["d1".into(), "d2".into(), "d3".into()],
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            "fp",
        )
        .unwrap()
    }

    #[test]
    fn ties_break_by_doc_id() {
        let hits = tiny().retrieve(array![1.0, 0.0].view(), 2).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, ["d1", "d3"]);
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(hits[1].score, 1.0);
    }

    #[test]
    fn k_larger_than_n_returns_all() {
        let hits = tiny().retrieve(array![0.2, 1.0].view(), 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].doc_id, "d3");
    }

    #[test]
    fn dimension_and_k_errors() {
        assert!(matches!(
            tiny().retrieve(array![1.0].view(), 1),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(tiny().retrieve(array![1.0, 0.0].view(), 0).is_err());
    }

    #[test]
    fn bytes_round_trip_and_corruption() {
        let idx = tiny();
        let bytes = idx.to_bytes();
        let back = DenseIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back.doc_ids(), idx.doc_ids());
        assert_eq!(back.embeddings(), idx.embeddings());
        assert_eq!(back.fingerprint(), "fp");
        for cut in [0, 5, 17, bytes.len() - 1] {
            assert!(matches!(
                DenseIndex::from_bytes(&bytes[..cut]),
                Err(Error::Corrupt { .. })
            ));
        }
        assert!(back.check_fingerprint("other").is_err());
    }

    #[test]
    fn empty_index_with_absurd_dim_is_corrupt() {
        let mut bytes = b"DIGI".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(0u64.to_le_bytes());
        bytes.extend(0xfff9_0000_0000_0004u64.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.push(b'x');
        assert!(matches!(
            DenseIndex::from_bytes(&bytes),
            Err(Error::Corrupt { .. })
        ));
    }
}
