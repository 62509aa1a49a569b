//! Catalog, outfit and split types, plus the Polyvore-format loader and the
//! planted-style synthetic generator.

mod polyvore;
mod queries;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use polyvore::{load_polyvore, write_polyvore, LoadOptions};
pub use queries::{make_fitb_questions, make_retrieval_queries, FITB_CANDIDATES};
pub use synthetic::{generate_synthetic, planted_compatible, SyntheticSpec};

/// Raw image input for the image backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagePayload {
    /// Fixed-length numeric feature vector (MLP backbone).
    Features(Vec<f64>),
    /// 32x32 grayscale intensities in `[0, 1]`, row-major (CNN backbone).
    Pixels(Vec<f64>),
    /// Image file decoded on demand (CNN backbone).
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub image: ImagePayload,
    pub description: String,
    pub fine_category: String,
    pub high_category: String,
    /// Planted latent style; only synthetic catalogs carry one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<u32>,
}

/// Immutable item collection with category lookups. Items are kept sorted
/// by id so that iteration order is canonical.
#[derive(Clone, Debug)]
pub struct Catalog {
    items: Vec<Item>,
    by_id: HashMap<String, usize>,
    by_fine: BTreeMap<String, Vec<usize>>,
    by_high: BTreeMap<String, Vec<usize>>,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl Catalog {
    pub fn new(mut items: Vec<Item>) -> Result<Self> {
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        let mut by_id = HashMap::with_capacity(items.len());
        let mut by_fine: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_high: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut hierarchy: BTreeMap<&str, &str> = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            if by_id.insert(item.item_id.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate item id {}", item.item_id)));
            }
            match hierarchy.insert(&item.fine_category, &item.high_category) {
                Some(prev) if prev != item.high_category => {
                    return Err(Error::Input(format!(
                        "fine category {} maps to both {prev} and {}",
                        item.fine_category, item.high_category
                    )))
                }
                _ => {}
            }
            by_fine.entry(item.fine_category.clone()).or_default().push(i);
            by_high.entry(item.high_category.clone()).or_default().push(i);
        }
        Ok(Self {
            items,
            by_id,
            by_fine,
            by_high,
        })
    }

    /// Catalog restricted to the given ids; unknown ids are an error.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Result<Catalog> {
        let ids: BTreeSet<&String> = ids.into_iter().collect();
        let items = self.resolve(&ids.into_iter().collect::<Vec<_>>())?;
        Catalog::new(items.into_iter().cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Resolves ids, failing with every unresolved id listed.
    pub fn resolve<'a, S: AsRef<str>>(&'a self, ids: &[S]) -> Result<Vec<&'a Item>> {
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            match self.get(id.as_ref()) {
                Some(item) => out.push(item),
                None => missing.push(id.as_ref().to_string()),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::MissingItems(missing))
        }
    }

    pub fn fine_members(&self, fine: &str) -> &[usize] {
        self.by_fine.get(fine).map_or(&[], Vec::as_slice)
    }

    pub fn high_members(&self, high: &str) -> &[usize] {
        self.by_high.get(high).map_or(&[], Vec::as_slice)
    }

    pub fn fine_categories(&self) -> impl Iterator<Item = &str> {
        self.by_fine.keys().map(String::as_str)
    }

    pub fn high_categories(&self) -> impl Iterator<Item = &str> {
        self.by_high.keys().map(String::as_str)
    }

    pub fn high_of(&self, fine: &str) -> Option<&str> {
        self.by_fine
            .get(fine)
            .and_then(|m| m.first())
            .map(|&i| self.items[i].high_category.as_str())
    }
}

/// An unordered set of items. Item ids are stored sorted, so two outfits
/// with the same members compare equal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Outfit {
    pub outfit_id: String,
    pub items: Vec<String>,
    pub label: Option<u8>,
}

impl Outfit {
    pub fn new(outfit_id: impl Into<String>, mut items: Vec<String>, label: Option<u8>) -> Result<Self> {
        let outfit_id = outfit_id.into();
        items.sort();
        if items.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input(format!("outfit {outfit_id} has duplicate items")));
        }
        if items.len() < 2 {
            return Err(Error::Input(format!(
                "outfit {outfit_id} has {} items, need at least 2",
                items.len()
            )));
        }
        Ok(Self {
            outfit_id,
            items,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fill-in-the-blank question: a partial outfit and four candidates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitbQuestion {
    pub outfit_id: String,
    pub partial: Vec<String>,
    pub candidates: Vec<String>,
    pub answer_index: usize,
    /// 1-based position of the blank in the source outfit listing.
    pub blank_position: usize,
}

/// Retrieval query: partial outfit, target category and held-out item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub partial: Vec<String>,
    pub target_category: String,
    pub ground_truth: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub catalog: Catalog,
    pub train: Vec<Outfit>,
    pub valid: Vec<Outfit>,
    pub test: Vec<Outfit>,
    pub disjoint: bool,
    /// Labelled compatibility sets (positives and negatives) per split.
    pub compatibility: BTreeMap<SplitName, Vec<Outfit>>,
    pub fitb: BTreeMap<SplitName, Vec<FitbQuestion>>,
}

impl DatasetSplit {
    pub fn outfits(&self, split: SplitName) -> &[Outfit] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    /// Items a split may draw from: the whole catalog, or in disjoint mode
    /// the items referenced by that split's outfits.
    pub fn split_catalog(&self, split: SplitName) -> Result<Catalog> {
        if !self.disjoint {
            return Ok(self.catalog.clone());
        }
        self.catalog.subset(self.outfits(split).iter().flat_map(|o| &o.items))
    }

    /// Checks id resolution and the split-overlap invariant for the mode.
    pub fn validate(&self) -> Result<()> {
        let mut missing = BTreeSet::new();
        for split in SplitName::ALL {
            for outfit in self.outfits(split) {
                for id in &outfit.items {
                    if self.catalog.get(id).is_none() {
                        missing.insert(id.clone());
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingItems(missing.into_iter().collect()));
        }
        if self.disjoint {
            let mut owner: HashMap<&str, SplitName> = HashMap::new();
            for split in SplitName::ALL {
                for outfit in self.outfits(split) {
                    for id in &outfit.items {
                        if let Some(&prev) = owner.get(id.as_str()) {
                            if prev != split {
                                return Err(Error::Input(format!(
                                    "disjoint split violated: item {id} in {prev} and {split}"
                                )));
                            }
                        }
                        owner.insert(id, split);
                    }
                }
            }
        }
        let mut seen: HashMap<&str, SplitName> = HashMap::new();
        for split in SplitName::ALL {
            for outfit in self.outfits(split) {
                if let Some(prev) = seen.insert(&outfit.outfit_id, split) {
                    return Err(Error::Input(format!(
                        "outfit {} appears in {prev} and {split}",
                        outfit.outfit_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Shuffles (seeded) and truncates outfits longer than `max_len`; returns
/// how many outfits were shortened.
pub fn truncate_outfits(outfits: &mut [Outfit], max_len: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    for outfit in outfits.iter_mut() {
        if outfit.items.len() > max_len {
            outfit.items.shuffle(&mut rng);
            outfit.items.truncate(max_len);
            outfit.items.sort();
            count += 1;
        }
    }
    if count > 0 {
        log::info!("truncated {count} outfits to {max_len} items");
    }
    count
}
