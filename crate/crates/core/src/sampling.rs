//! Training-instance construction: positive/partial splits for retrieval,
//! curriculum negatives, and category-preserving corrupted outfits.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Item, Outfit};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumStage {
    HighLevel,
    FineGrained,
}

/// Stage for a zero-based epoch. A fraction of 1.0 never leaves the
/// high-level stage; 0.0 starts fine-grained.
pub fn stage_for_epoch(epoch: usize, total_epochs: usize, switch_fraction: f64) -> CurriculumStage {
    if (epoch as f64) < switch_fraction * total_epochs as f64 {
        CurriculumStage::HighLevel
    } else {
        CurriculumStage::FineGrained
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CirInstance {
    pub partial: Vec<String>,
    pub positive: String,
}

/// Picks a uniformly random positive; the rest form the partial outfit.
/// Outfits with fewer than two items are skipped.
pub fn make_cir_instance<R: Rng + ?Sized>(outfit: &Outfit, rng: &mut R) -> Option<CirInstance> {
    if outfit.items.len() < 2 {
        log::warn!("skipping outfit {} with {} items", outfit.outfit_id, outfit.items.len());
        return None;
    }
    let pick = rng.random_range(0..outfit.items.len());
    let mut partial = outfit.items.clone();
    let positive = partial.remove(pick);
    Some(CirInstance { partial, positive })
}

/// Draws `count` distinct negatives for `positive`, never the positive or a
/// partial-outfit item. A fine-grained shortfall is filled from the
/// high-level pool.
pub fn sample_negatives<'a, R: Rng + ?Sized>(
    positive: &Item,
    partial: &[&str],
    catalog: &'a Catalog,
    stage: CurriculumStage,
    count: usize,
    rng: &mut R,
) -> Result<Vec<&'a Item>> {
    let items = catalog.items();
    let eligible = |&i: &usize| {
        let id = items[i].item_id.as_str();
        id != positive.item_id && !partial.contains(&id)
    };
    let high_pool: Vec<usize> = catalog
        .high_members(&positive.high_category)
        .iter()
        .copied()
        .filter(eligible)
        .collect();
    let mut chosen: Vec<usize> = match stage {
        CurriculumStage::HighLevel => pick_distinct(&high_pool, count, rng),
        CurriculumStage::FineGrained => {
            let fine_pool: Vec<usize> = catalog
                .fine_members(&positive.fine_category)
                .iter()
                .copied()
                .filter(eligible)
                .collect();
            pick_distinct(&fine_pool, count, rng)
        }
    };
    if chosen.len() < count {
        let rest: Vec<usize> = high_pool.into_iter().filter(|i| !chosen.contains(i)).collect();
        let shortfall = count - chosen.len();
        log::debug!(
            "negative pool for {} short by {shortfall}; filling from high-level pool",
            positive.item_id
        );
        chosen.extend(pick_distinct(&rest, shortfall, rng));
    }
    if chosen.len() < count {
        return Err(Error::Input(format!(
            "only {} eligible negatives for {} (need {count})",
            chosen.len(),
            positive.item_id
        )));
    }
    Ok(chosen.into_iter().map(|i| &items[i]).collect())
}

fn pick_distinct<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() <= count {
        return pool.to_vec();
    }
    index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Corrupts positive outfits by replacing every item with a random item of
/// the same fine category. Results never coincide with a known positive.
#[derive(Clone, Debug)]
pub struct NegativeOutfitSampler {
    positives: HashSet<Vec<String>>,
}

const MAX_CORRUPTION_ATTEMPTS: usize = 1000;

impl NegativeOutfitSampler {
    pub fn new<'a>(positives: impl IntoIterator<Item = &'a Outfit>) -> Self {
        Self {
            positives: positives.into_iter().map(|o| o.items.clone()).collect(),
        }
    }

    pub fn is_positive(&self, sorted_items: &[String]) -> bool {
        self.positives.contains(sorted_items)
    }

    pub fn corrupt<R: Rng + ?Sized>(
        &self,
        catalog: &Catalog,
        source: &Outfit,
        outfit_id: String,
        rng: &mut R,
    ) -> Result<Outfit> {
        let sources = catalog.resolve(&source.items)?;
        for _ in 0..MAX_CORRUPTION_ATTEMPTS {
            let mut items: Vec<String> = sources
                .iter()
                .map(|it| {
                    let pool = catalog.fine_members(&it.fine_category);
                    catalog.items()[pool[rng.random_range(0..pool.len())]].item_id.clone()
                })
                .collect();
            items.sort();
            if items.windows(2).any(|w| w[0] == w[1]) || items == source.items || self.is_positive(&items) {
                continue;
            }
            return Outfit::new(outfit_id, items, Some(0));
        }
        Err(Error::Input(format!(
            "could not corrupt outfit {}: category pools too small",
            source.outfit_id
        )))
    }
}

/// Corrupts a uniformly chosen positive outfit.
pub fn make_negative_outfit<R: Rng + ?Sized>(
    catalog: &Catalog,
    positive_outfits: &[Outfit],
    rng: &mut R,
) -> Result<Outfit> {
    if positive_outfits.is_empty() || catalog.is_empty() {
        return Err(Error::Input("no outfits to corrupt".into()));
    }
    let sampler = NegativeOutfitSampler::new(positive_outfits);
    let source = &positive_outfits[rng.random_range(0..positive_outfits.len())];
    sampler.corrupt(catalog, source, format!("{}-neg", source.outfit_id), rng)
}
