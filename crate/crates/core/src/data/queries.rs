//! Held-out query construction shared by every dataset source.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{Catalog, FitbQuestion, Outfit, RetrievalQuery};
use crate::error::Result;

pub const FITB_CANDIDATES: usize = 4;

/// One fill-in-the-blank question per outfit. Distractors share the answer's
/// fine category and are not in the outfit; when the catalog carries planted
/// styles, distractors must also differ in style from the answer. Outfits
/// without enough distractors are skipped.
pub fn make_fitb_questions<R: Rng + ?Sized>(
    outfits: &[Outfit],
    catalog: &Catalog,
    rng: &mut R,
) -> Result<Vec<FitbQuestion>> {
    let mut out = Vec::with_capacity(outfits.len());
    for outfit in outfits {
        let blank = rng.random_range(0..outfit.items.len());
        let answer = catalog.resolve(&outfit.items[blank..=blank])?[0];
        let pool: Vec<usize> = catalog
            .fine_members(&answer.fine_category)
            .iter()
            .copied()
            .filter(|&i| {
                let it = &catalog.items()[i];
                !outfit.items.contains(&it.item_id)
                    && match (it.style, answer.style) {
                        (Some(a), Some(b)) => a != b,
                        _ => true,
                    }
            })
            .collect();
        if pool.len() < FITB_CANDIDATES - 1 {
            log::warn!(
                "skipping fitb question for {}: {} distractors",
                outfit.outfit_id,
                pool.len()
            );
            continue;
        }
        let mut candidates: Vec<String> = index::sample(rng, pool.len(), FITB_CANDIDATES - 1)
            .into_iter()
            .map(|i| catalog.items()[pool[i]].item_id.clone())
            .collect();
        candidates.push(answer.item_id.clone());
        candidates.shuffle(rng);
        let answer_index = candidates
            .iter()
            .position(|c| *c == answer.item_id)
            .expect("answer present");
        let mut partial = outfit.items.clone();
        partial.remove(blank);
        out.push(FitbQuestion {
            outfit_id: outfit.outfit_id.clone(),
            partial,
            candidates,
            answer_index,
            blank_position: blank + 1,
        });
    }
    Ok(out)
}

/// One retrieval query per outfit: a random held-out item whose fine
/// category becomes the target.
pub fn make_retrieval_queries<R: Rng + ?Sized>(
    outfits: &[Outfit],
    catalog: &Catalog,
    rng: &mut R,
) -> Result<Vec<RetrievalQuery>> {
    let mut out = Vec::with_capacity(outfits.len());
    for outfit in outfits {
        let held = rng.random_range(0..outfit.items.len());
        let mut partial = outfit.items.clone();
        let ground_truth = partial.remove(held);
        let target_category = match catalog.get(&ground_truth) {
            Some(item) => item.fine_category.clone(),
            None => {
                log::warn!("held-out item {ground_truth} not in catalog");
                String::new()
            }
        };
        out.push(RetrievalQuery {
            partial,
            target_category,
            ground_truth,
        });
    }
    Ok(out)
}
