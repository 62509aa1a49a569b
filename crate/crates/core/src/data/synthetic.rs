//! Planted-style synthetic catalogs. Every item carries a latent style; an
//! outfit is compatible iff all of its items share one style.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::queries::make_fitb_questions;
use super::{Catalog, DatasetSplit, ImagePayload, Item, Outfit, SplitName};
use crate::error::{Error, Result};
use crate::sampling::NegativeOutfitSampler;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_styles: usize,
    pub num_high_categories: usize,
    pub fine_per_high: usize,
    pub items_per_fine: usize,
    pub min_outfit_len: usize,
    pub max_outfit_len: usize,
    pub payload_dim: usize,
    pub noise_sigma: f64,
    pub train_outfits: usize,
    pub valid_outfits: usize,
    pub test_outfits: usize,
    /// Partition items across splits instead of sharing the catalog.
    pub disjoint: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_styles: 4,
            num_high_categories: 3,
            fine_per_high: 4,
            items_per_fine: 200,
            min_outfit_len: 3,
            max_outfit_len: 5,
            payload_dim: 32,
            noise_sigma: 0.1,
            train_outfits: 1200,
            valid_outfits: 200,
            test_outfits: 400,
            disjoint: false,
        }
    }
}

impl SyntheticSpec {
    pub fn num_fine(&self) -> usize {
        self.num_high_categories * self.fine_per_high
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_styles == 0 || self.num_high_categories == 0 || self.fine_per_high == 0 || self.items_per_fine == 0
        {
            return bad("synthetic counts must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.min_outfit_len < 2 || self.max_outfit_len < self.min_outfit_len {
            return bad(format!(
                "outfit length range {}..={} invalid",
                self.min_outfit_len, self.max_outfit_len
            ));
        }
        if self.max_outfit_len > self.num_fine() {
            return bad(format!(
                "outfits of {} items need that many fine categories, have {}",
                self.max_outfit_len,
                self.num_fine()
            ));
        }
        if self.payload_dim < self.num_styles + self.num_fine() {
            return bad(format!(
                "payload_dim {} < styles {} + fine categories {}",
                self.payload_dim,
                self.num_styles,
                self.num_fine()
            ));
        }
        let per_style = self.items_per_fine / self.num_styles;
        let split_share = if self.disjoint { per_style / 3 } else { per_style };
        if split_share < 1 {
            return bad("too few items per fine category and style".into());
        }
        Ok(())
    }
}

const HIGH_NAMES: [&str; 6] = ["tops", "bottoms", "shoes", "bags", "outerwear", "accessories"];
const FINE_NAMES: [[&str; 6]; 6] = [
    ["blouse", "tee", "sweater", "tank", "cardigan", "hoodie"],
    ["jeans", "skirt", "shorts", "trousers", "leggings", "culottes"],
    ["sneakers", "boots", "sandals", "loafers", "heels", "mules"],
    ["tote", "clutch", "backpack", "satchel", "crossbody", "bucket"],
    ["parka", "blazer", "trench", "bomber", "poncho", "cape"],
    ["scarf", "belt", "hat", "watch", "necklace", "bracelet"],
];
const STYLE_WORDS: [&str; 8] = [
    "bohemian",
    "classic",
    "sporty",
    "edgy",
    "preppy",
    "minimalist",
    "romantic",
    "grunge",
];

pub(crate) fn high_name(h: usize) -> String {
    HIGH_NAMES.get(h).map_or_else(|| format!("group{h}"), |s| s.to_string())
}

pub(crate) fn fine_name(h: usize, k: usize) -> String {
    match FINE_NAMES.get(h).and_then(|row| row.get(k)) {
        Some(s) => s.to_string(),
        None => format!("{}kind{k}", high_name(h)),
    }
}

pub(crate) fn style_word(s: usize) -> String {
    STYLE_WORDS
        .get(s)
        .map_or_else(|| format!("style{s}"), |w| w.to_string())
}

fn split_of(n: usize, per_style: usize, disjoint: bool) -> Option<SplitName> {
    if !disjoint {
        return None;
    }
    // Item n is the (n / styles)-th member of its (fine, style) group.
    let third = per_style / 3;
    Some(match n {
        r if r < per_style - 2 * third => SplitName::Train,
        r if r < per_style - third => SplitName::Valid,
        _ => SplitName::Test,
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let num_fine = spec.num_fine();
    let per_style = spec.items_per_fine / spec.num_styles;

    // groups[split][fine][style] -> item ids
    let mut groups: BTreeMap<Option<SplitName>, Vec<Vec<Vec<String>>>> = BTreeMap::new();
    let mut items = Vec::with_capacity(num_fine * spec.items_per_fine);
    for h in 0..spec.num_high_categories {
        for k in 0..spec.fine_per_high {
            let f = h * spec.fine_per_high + k;
            for n in 0..spec.items_per_fine {
                let style = n % spec.num_styles;
                let id = format!("item-{:07}", f * spec.items_per_fine + n);
                let mut payload: Vec<f64> = (0..spec.payload_dim)
                    .map(|_| {
                        if spec.noise_sigma > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                payload[style] += 1.0;
                payload[spec.num_styles + f] += 1.0;
                let member = n / spec.num_styles;
                if member < per_style {
                    let split = split_of(member, per_style, spec.disjoint);
                    groups
                        .entry(split)
                        .or_insert_with(|| vec![vec![Vec::new(); spec.num_styles]; num_fine])[f][style]
                        .push(id.clone());
                }
                items.push(Item {
                    item_id: id,
                    image: ImagePayload::Features(payload),
                    description: format!("{} {}", fine_name(h, k), style_word(style)),
                    fine_category: fine_name(h, k),
                    high_category: high_name(h),
                    style: Some(style as u32),
                });
            }
        }
    }
    let catalog = Catalog::new(items)?;

    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut make_outfits = |split: SplitName, count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Outfit>> {
        let key = spec.disjoint.then_some(split);
        let pool = &groups[&key];
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > count * 100 + 1000 {
                return Err(Error::Config(format!(
                    "cannot draw {count} distinct {split} outfits from this spec"
                )));
            }
            let style = rng.random_range(0..spec.num_styles);
            let len = rng.random_range(spec.min_outfit_len..=spec.max_outfit_len);
            let ids: Vec<String> = index::sample(rng, num_fine, len)
                .into_iter()
                .map(|f| {
                    let members = &pool[f][style];
                    members[rng.random_range(0..members.len())].clone()
                })
                .collect();
            let outfit = Outfit::new(format!("{split}-{:06}", out.len()), ids, Some(1))?;
            if seen.insert(outfit.items.clone()) {
                out.push(outfit);
            }
        }
        Ok(out)
    };
    let train = make_outfits(SplitName::Train, spec.train_outfits, &mut rng)?;
    let valid = make_outfits(SplitName::Valid, spec.valid_outfits, &mut rng)?;
    let test = make_outfits(SplitName::Test, spec.test_outfits, &mut rng)?;

    let sampler = NegativeOutfitSampler::new(train.iter().chain(&valid).chain(&test));
    let mut compatibility = BTreeMap::new();
    let mut fitb = BTreeMap::new();
    for (split, outfits) in [(SplitName::Valid, &valid), (SplitName::Test, &test)] {
        let pool = if spec.disjoint {
            catalog.subset(groups[&Some(split)].iter().flatten().flatten())?
        } else {
            catalog.clone()
        };
        let mut labelled = Vec::with_capacity(outfits.len() * 2);
        for source in outfits {
            labelled.push(Outfit {
                outfit_id: compat_id(split, labelled.len()),
                ..source.clone()
            });
            // Held-out negatives are kept only if the planted rule rejects them.
            let negative = loop {
                let candidate = sampler.corrupt(&pool, source, compat_id(split, labelled.len()), &mut rng)?;
                if !planted_compatible(&catalog, &candidate.items) {
                    break candidate;
                }
            };
            labelled.push(negative);
        }
        compatibility.insert(split, labelled);
        fitb.insert(split, make_fitb_questions(outfits, &pool, &mut rng)?);
    }

    let split = DatasetSplit {
        catalog,
        train,
        valid,
        test,
        disjoint: spec.disjoint,
        compatibility,
        fitb,
    };
    split.validate()?;
    Ok(split)
}

pub(crate) fn compat_id(split: SplitName, n: usize) -> String {
    format!("{split}-compat-{n:06}")
}

/// Planted rule: all items share one style. Items without a style never pass.
pub fn planted_compatible<S: AsRef<str>>(catalog: &Catalog, ids: &[S]) -> bool {
    let mut style = None;
    for id in ids {
        match catalog.get(id.as_ref()).and_then(|it| it.style) {
            None => return false,
            Some(s) if style.is_some_and(|p| p != s) => return false,
            Some(s) => style = Some(s),
        }
    }
    true
}
