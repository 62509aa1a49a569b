#![allow(dead_code)]

use capsule_core::data::{generate_synthetic, DatasetSplit, SyntheticSpec};
use capsule_core::encoders::ItemEncoderConfig;
use capsule_core::model::{EncoderConfig, ModelConfig};
use capsule_core::nn::{ParamStore, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Moves every parameter off its initial value so that unit-scale and
/// zero-bias initializations do not hide gradient errors.
pub fn jitter(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Small enough for finite differences over every parameter.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        item: ItemEncoderConfig {
            payload_dim: 8,
            image_hidden: 6,
            d_img: 4,
            d_text: 4,
            hash_buckets: 64,
            text_feature_dim: 6,
            ..ItemEncoderConfig::default()
        },
        encoder: EncoderConfig {
            model_dim: 8,
            layers: 2,
            heads: 2,
            ff_hidden: 10,
            max_outfit_len: 8,
        },
        seed,
    }
}

pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_styles: 2,
        num_high_categories: 2,
        fine_per_high: 2,
        items_per_fine: 24,
        min_outfit_len: 2,
        max_outfit_len: 4,
        payload_dim: 8,
        noise_sigma: 0.1,
        train_outfits: 40,
        valid_outfits: 10,
        test_outfits: 20,
        disjoint: false,
    }
}

pub fn tiny_data(seed: u64) -> DatasetSplit {
    generate_synthetic(&tiny_spec(), seed).unwrap()
}
