//! Exact and product-quantized descriptor retrieval.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::LocalizeError;
use crate::aggregator::GlobalDescriptor;
use crate::covis::ImageId;
use crate::numeric::{dot, kmeans, sq_dist, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PqParams {
    /// Number of sub-blocks.
    pub m: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PqParams {
    fn default() -> Self {
        Self {
            m: 8,
            iterations: 25,
            seed: 0,
        }
    }
}

pub const PQ_MAX_CENTROIDS: usize = 256;

/// Per-block codebooks and per-entry codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    /// One `centroids x sub_dim` matrix per sub-block.
    pub codebooks: Vec<DMatrix<f64>>,
    /// One code per sub-block per entry, entry-major.
    pub codes: Vec<Vec<u8>>,
}

impl ProductQuantizer {
    pub fn m(&self) -> usize {
        self.codebooks.len()
    }

    pub fn sub_dim(&self) -> usize {
        self.codebooks.first().map_or(0, |c| c.ncols())
    }

    pub fn reconstruct(&self, entry: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.m() * self.sub_dim());
        for (book, &code) in self.codebooks.iter().zip(&self.codes[entry]) {
            out.extend(book.row(code as usize).iter());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<GlobalDescriptor>,
    pq: Option<ProductQuantizer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Exact,
    Quantized,
}

impl RetrievalIndex {
    /// Validates shapes; used by loaders.
    pub fn from_parts(entries: Vec<GlobalDescriptor>, pq: Option<ProductQuantizer>) -> Result<Self, LocalizeError> {
        let dim = entries.first().ok_or(LocalizeError::EmptyInput)?.dim();
        if let Some(e) = entries.iter().find(|e| e.dim() != dim) {
            return Err(LocalizeError::DimensionMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        if let Some(q) = &pq {
            if q.m() == 0 || q.m() * q.sub_dim() != dim || q.codes.len() != entries.len() {
                return Err(LocalizeError::IndivisibleDimension { dim, m: q.m() });
            }
            let ok = q.codes.iter().all(|c| {
                c.len() == q.m()
                    && c.iter()
                        .zip(&q.codebooks)
                        .all(|(&code, book)| (code as usize) < book.nrows())
            });
            if !ok {
                return Err(LocalizeError::InvalidConfig("PQ code out of range".into()));
            }
        }
        Ok(Self { entries, pq })
    }

    pub fn entries(&self) -> &[GlobalDescriptor] {
        &self.entries
    }

    pub fn pq(&self) -> Option<&ProductQuantizer> {
        self.pq.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].dim()
    }

    pub fn get(&self, id: ImageId) -> Option<&GlobalDescriptor> {
        self.entries.iter().find(|e| e.image_id == id)
    }
}

/// Builds the index. With `pq`, each sub-block is quantized with
/// `min(256, entries)` k-means centroids.
pub fn build_index(descriptors: Vec<GlobalDescriptor>, pq: Option<PqParams>) -> Result<RetrievalIndex, LocalizeError> {
    if descriptors.is_empty() {
        return Err(LocalizeError::EmptyInput);
    }
    let dim = descriptors[0].dim();
    let quantizer = match pq {
        None => None,
        Some(p) => {
            if p.m == 0 || !dim.is_multiple_of(p.m) {
                return Err(LocalizeError::IndivisibleDimension { dim, m: p.m });
            }
            let sub = dim / p.m;
            let n = descriptors.len();
            let k = n.min(PQ_MAX_CENTROIDS);
            let root = RngStream::new(p.seed, "pq");
            let mut codebooks = Vec::with_capacity(p.m);
            let mut codes = vec![Vec::with_capacity(p.m); n];
            for b in 0..p.m {
                let data = DMatrix::from_fn(n, sub, |r, c| descriptors[r].values()[b * sub + c]);
                let km = kmeans(&data, k, p.iterations, &mut root.substream_indexed("block", b as u64))?;
                // Codes refer to the stored codebook, so assign against it directly.
                for (r, code) in codes.iter_mut().enumerate() {
                    let row: Vec<f64> = data.row(r).iter().copied().collect();
                    let mut best = (0usize, f64::INFINITY);
                    for c in 0..k {
                        let cent: Vec<f64> = km.centroids.row(c).iter().copied().collect();
                        let d = sq_dist(&row, &cent);
                        if d < best.1 {
                            best = (c, d);
                        }
                    }
                    code.push(best.0 as u8);
                }
                codebooks.push(km.centroids);
            }
            Some(ProductQuantizer { codebooks, codes })
        }
    };
    RetrievalIndex::from_parts(descriptors, quantizer)
}

/// Top-`k` ids, quantized search when the index carries a quantizer.
pub fn retrieve_topk(
    index: &RetrievalIndex,
    query: &GlobalDescriptor,
    k: usize,
) -> Result<Vec<ImageId>, LocalizeError> {
    let mode = if index.pq.is_some() {
        SearchMode::Quantized
    } else {
        SearchMode::Exact
    };
    retrieve_topk_with(index, query, k, mode)
}

/// Exact mode ranks by decreasing cosine similarity; quantized mode by
/// increasing squared distance between the query and reconstructed entries.
/// Ties go to the smaller image id.
pub fn retrieve_topk_with(
    index: &RetrievalIndex,
    query: &GlobalDescriptor,
    k: usize,
    mode: SearchMode,
) -> Result<Vec<ImageId>, LocalizeError> {
    if k > index.len() {
        return Err(LocalizeError::KTooLarge { k, size: index.len() });
    }
    if query.dim() != index.dim() {
        return Err(LocalizeError::DimensionMismatch {
            expected: index.dim(),
            got: query.dim(),
        });
    }
    let q = query.values();
    let mut scored: Vec<(f64, ImageId)> = match (mode, &index.pq) {
        (SearchMode::Quantized, Some(pq)) => {
            let sub = pq.sub_dim();
            // Asymmetric distance tables: query block vs every centroid.
            let tables: Vec<Vec<f64>> = pq
                .codebooks
                .iter()
                .enumerate()
                .map(|(b, book)| {
                    let qb = &q[b * sub..(b + 1) * sub];
                    (0..book.nrows())
                        .map(|c| {
                            let cent: Vec<f64> = book.row(c).iter().copied().collect();
                            sq_dist(qb, &cent)
                        })
                        .collect()
                })
                .collect();
            index
                .entries
                .iter()
                .zip(&pq.codes)
                .map(|(e, code)| {
                    let d: f64 = code.iter().enumerate().map(|(b, &c)| tables[b][c as usize]).sum();
                    (d, e.image_id)
                })
                .collect()
        }
        (SearchMode::Quantized, None) => return Err(LocalizeError::InvalidConfig("index has no quantizer".into())),
        (SearchMode::Exact, _) => index
            .entries
            .iter()
            .map(|e| (-dot(q, e.values()), e.image_id))
            .collect(),
    };
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}
