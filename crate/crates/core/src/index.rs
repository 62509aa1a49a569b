//! Single-embedding catalog index with exact KNN search.
//!
//! File layout (little-endian): magic `CAPSIDX\0`, `u32` version, 32-byte
//! model fingerprint, `u64` dimension, `u64` item count, then per item its
//! id, fine category and high category (each `u32` length + UTF-8), zero
//! padding to an 8-byte boundary, and finally the contiguous `n * d` block
//! of `f64` embeddings.

use std::cell::Cell;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::data::{Catalog, Item};
use crate::distance::{self, Metric};
use crate::encoders::normalize_text;
use crate::error::{Error, Result};
use crate::model::{OutfitModel, TargetKind, TargetSpec};

pub const MAGIC: &[u8; 8] = b"CAPSIDX\0";
pub const VERSION: u32 = 1;
/// Bytes before the item table.
pub const FIXED_HEADER_BYTES: usize = 8 + 4 + 32 + 8 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub item_id: String,
    pub fine_category: String,
    pub high_category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub item_id: String,
    pub distance: f64,
    pub fine_category: String,
    pub high_category: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Ok,
    /// The category filter left no candidates.
    EmptyPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub status: QueryStatus,
    pub neighbors: Vec<Neighbor>,
}

thread_local! {
    static KNN_QUERIES: Cell<usize> = const { Cell::new(0) };
}

/// KNN queries issued on this thread.
pub fn knn_query_calls() -> usize {
    KNN_QUERIES.with(Cell::get)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    fingerprint: [u8; 32],
    dim: usize,
    entries: Vec<IndexEntry>,
    vectors: Vec<f64>,
    by_category: BTreeMap<String, Vec<usize>>,
}

#[derive(PartialEq)]
struct Ranked<'a> {
    distance: f64,
    item_id: &'a str,
    row: usize,
}

impl Eq for Ranked<'_> {}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then_with(|| self.item_id.cmp(other.item_id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn parse_fingerprint(hex_str: &str) -> Result<[u8; 32]> {
    let bytes = hex::decode(hex_str).map_err(|e| Error::Index(format!("bad fingerprint: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| Error::Index("fingerprint must be 32 bytes".into()))
}

impl EmbeddingIndex {
    /// Assembles an index from precomputed rows. Entries are sorted by id.
    pub fn from_parts(fingerprint: &str, dim: usize, rows: Vec<(IndexEntry, Vec<f64>)>) -> Result<Self> {
        let fingerprint = parse_fingerprint(fingerprint)?;
        let mut rows = rows;
        rows.sort_by(|a, b| a.0.item_id.cmp(&b.0.item_id));
        if rows.windows(2).any(|w| w[0].0.item_id == w[1].0.item_id) {
            return Err(Error::Index("duplicate item id".into()));
        }
        let mut entries = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (entry, v) in rows {
            if v.len() != dim {
                return Err(Error::Index(format!(
                    "embedding for {} has {} values, expected {dim}",
                    entry.item_id,
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("index embedding"));
            }
            vectors.extend(v);
            entries.push(entry);
        }
        let mut index = Self {
            fingerprint,
            dim,
            entries,
            vectors,
            by_category: BTreeMap::new(),
        };
        index.rebuild_categories();
        Ok(index)
    }

    fn rebuild_categories(&mut self) {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            map.entry(e.fine_category.clone()).or_default().push(i);
            if e.high_category != e.fine_category {
                map.entry(e.high_category.clone()).or_default().push(i);
            }
        }
        self.by_category = map;
    }

    /// Encodes every catalog item once with `model`.
    pub fn build(catalog: &Catalog, model: &OutfitModel) -> Result<Self> {
        let items: Vec<&Item> = catalog.items().iter().collect();
        let features = model.item_features(&items, 256)?;
        let rows = items
            .iter()
            .zip(features)
            .map(|(it, f)| {
                (
                    IndexEntry {
                        item_id: it.item_id.clone(),
                        fine_category: it.fine_category.clone(),
                        high_category: it.high_category.clone(),
                    },
                    f,
                )
            })
            .collect();
        Self::from_parts(&model.fingerprint(), model.dim(), rows)
    }

    /// Adds items encoded by `model`, which must be the model that built
    /// this index.
    pub fn extend(&self, model: &OutfitModel, items: &[&Item]) -> Result<Self> {
        self.check_fingerprint(&model.fingerprint())?;
        let features = model.item_features(items, 256)?;
        let mut rows: Vec<(IndexEntry, Vec<f64>)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), self.vector(i).to_vec()))
            .collect();
        let known: HashSet<&str> = self.entries.iter().map(|e| e.item_id.as_str()).collect();
        for (it, f) in items.iter().zip(features) {
            if known.contains(it.item_id.as_str()) {
                return Err(Error::Index(format!("item {} already indexed", it.item_id)));
            }
            rows.push((
                IndexEntry {
                    item_id: it.item_id.clone(),
                    fine_category: it.fine_category.clone(),
                    high_category: it.high_category.clone(),
                },
                f,
            ));
        }
        Self::from_parts(&self.fingerprint(), self.dim, rows)
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        let found = self.fingerprint();
        if found != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found,
            });
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(self.fingerprint)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_of(&self, item_id: &str) -> Option<usize> {
        self.entries.binary_search_by(|e| e.item_id.as_str().cmp(item_id)).ok()
    }

    /// Rows in a fine or high category. Exact names win; otherwise names are
    /// compared after text normalization.
    pub fn category_rows(&self, category: &str) -> Option<&[usize]> {
        if let Some(rows) = self.by_category.get(category) {
            return Some(rows);
        }
        let wanted = normalize_text(category);
        self.by_category
            .iter()
            .find(|(name, _)| normalize_text(name) == wanted)
            .map(|(_, rows)| rows.as_slice())
    }

    /// Exact k nearest items by Euclidean distance, ascending, ties broken by
    /// item id.
    pub fn knn_query(&self, t: &[f64], k: usize, category: Option<&str>, exclude: &[&str]) -> Result<KnnResult> {
        KNN_QUERIES.with(|c| c.set(c.get() + 1));
        if k == 0 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        if t.len() != self.dim {
            return Err(Error::Input(format!(
                "query has dimension {}, index has {}",
                t.len(),
                self.dim
            )));
        }
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("knn query"));
        }
        let all: Vec<usize>;
        let pool: &[usize] = match category {
            Some(c) => self.category_rows(c).unwrap_or(&[]),
            None => {
                all = (0..self.entries.len()).collect();
                &all
            }
        };
        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
        let mut eligible = 0usize;
        for &row in pool {
            let id = self.entries[row].item_id.as_str();
            if exclude.contains(&id) {
                continue;
            }
            eligible += 1;
            let cand = Ranked {
                distance: distance::between(Metric::Euclidean, t, self.vector(row)),
                item_id: id,
                row,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if heap.peek().is_some_and(|worst| cand < *worst) {
                heap.pop();
                heap.push(cand);
            }
        }
        if eligible == 0 {
            return Ok(KnnResult {
                status: QueryStatus::EmptyPool,
                neighbors: Vec::new(),
            });
        }
        let neighbors = heap
            .into_sorted_vec()
            .into_iter()
            .map(|r| {
                let e = &self.entries[r.row];
                Neighbor {
                    item_id: e.item_id.clone(),
                    distance: r.distance,
                    fine_category: e.fine_category.clone(),
                    high_category: e.high_category.clone(),
                }
            })
            .collect();
        Ok(KnnResult {
            status: QueryStatus::Ok,
            neighbors,
        })
    }

    /// Bytes of the item table (ids and categories) plus alignment padding.
    pub fn table_bytes(&self) -> usize {
        let raw: usize = self
            .entries
            .iter()
            .map(|e| 12 + e.item_id.len() + e.fine_category.len() + e.high_category.len())
            .sum();
        (FIXED_HEADER_BYTES + raw).next_multiple_of(8) - FIXED_HEADER_BYTES
    }

    /// Everything except the embedding block.
    pub fn header_bytes(&self) -> usize {
        FIXED_HEADER_BYTES + self.table_bytes()
    }

    pub fn payload_bytes(&self) -> usize {
        self.entries.len() * self.dim * 8
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_bytes() + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            for s in [&e.item_id, &e.fine_category, &e.high_category] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        out.resize(out.len().next_multiple_of(8), 0);
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let wrap = |e: Error| match e {
            Error::Checkpoint(m) => Error::Index(m),
            other => other,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(wrap)? != MAGIC {
            return Err(Error::Index("not an index file (bad magic)".into()));
        }
        let version = r.u32().map_err(wrap)?;
        if version != VERSION {
            return Err(Error::Index(format!("unsupported index version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32).map_err(wrap)?.try_into().expect("32 bytes");
        let dim = r.u64().map_err(wrap)? as usize;
        let n = r.u64().map_err(wrap)? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            entries.push(IndexEntry {
                item_id: r.string().map_err(wrap)?,
                fine_category: r.string().map_err(wrap)?,
                high_category: r.string().map_err(wrap)?,
            });
        }
        let pad = r.pos.next_multiple_of(8) - r.pos;
        if r.take(pad).map_err(wrap)?.iter().any(|&b| b != 0) {
            return Err(Error::Index("nonzero alignment padding".into()));
        }
        let vectors = r
            .f64s(n.checked_mul(dim).ok_or_else(|| Error::Index("size overflow".into()))?)
            .map_err(wrap)?;
        if r.pos != bytes.len() {
            return Err(Error::Index(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if entries.windows(2).any(|w| w[0].item_id >= w[1].item_id) {
            return Err(Error::Index("item table not sorted by id".into()));
        }
        let mut index = Self {
            fingerprint,
            dim,
            entries,
            vectors,
            by_category: BTreeMap::new(),
        };
        index.rebuild_categories();
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn category_counts(&self) -> HashMap<&str, usize> {
        self.by_category.iter().map(|(k, v)| (k.as_str(), v.len())).collect()
    }
}

/// Storage comparison between one embedding per item and a subspace scheme
/// that stores one embedding per item per target category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSizeComparison {
    pub items: usize,
    pub dim: usize,
    pub categories: usize,
    pub single_embedding_bytes: u64,
    pub subspace_bytes: u64,
    pub ratio: f64,
}

pub fn compare_index_sizes(items: usize, dim: usize, categories: usize) -> IndexSizeComparison {
    let single = (items * dim * 8) as u64;
    let subspace = (items * categories * dim * 8) as u64;
    IndexSizeComparison {
        items,
        dim,
        categories,
        single_embedding_bytes: single,
        subspace_bytes: subspace,
        ratio: if single == 0 {
            0.0
        } else {
            subspace as f64 / single as f64
        },
    }
}

/// One retrieval-head pass over the partial outfit, then one KNN query.
/// Category targets filter candidates to that category; the partial
/// outfit's own items are never returned.
pub fn complete_outfit(
    index: &EmbeddingIndex,
    model: &OutfitModel,
    partial: &[&Item],
    spec: &TargetSpec,
    k: usize,
) -> Result<KnnResult> {
    if partial.is_empty() {
        return Err(Error::Input("partial outfit is empty".into()));
    }
    let t = model.target_embedding(partial, spec)?;
    let filter = match spec.kind {
        TargetKind::Category => Some(spec.text.as_str()),
        TargetKind::FreeText => None,
    };
    let exclude: Vec<&str> = partial.iter().map(|it| it.item_id.as_str()).collect();
    index.knn_query(&t, k, filter, &exclude)
}
