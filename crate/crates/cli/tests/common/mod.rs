#![allow(dead_code)]

use std::path::Path;

use capsule_core::data::{generate_synthetic, DatasetSplit, SyntheticSpec};
use capsule_core::encoders::ItemEncoderConfig;
use capsule_core::model::{EncoderConfig, ModelConfig};

/// Small enough that a full train/eval pipeline runs in about a second.
pub const TINY_TOML: &str = r#"
[model]
seed = 3

[model.item]
payload_dim = 8
image_hidden = 6
d_img = 4
d_text = 4
hash_buckets = 64
text_feature_dim = 6

[model.encoder]
model_dim = 8
layers = 1
heads = 2
ff_hidden = 10
max_outfit_len = 8

[train]
batch_size = 10
epochs_cp = 2
epochs_cir = 2
negatives = 4

[synthetic]
num_styles = 2
num_high_categories = 2
fine_per_high = 2
items_per_fine = 24
min_outfit_len = 2
max_outfit_len = 4
payload_dim = 8
train_outfits = 40
valid_outfits = 10
test_outfits = 20
"#;

pub fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_TOML).unwrap();
    path
}

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
            layers: 1,
            heads: 2,
            ff_hidden: 10,
            max_outfit_len: 8,
        },
        seed,
    }
}

pub fn tiny_data(seed: u64) -> DatasetSplit {
    let spec = SyntheticSpec {
        num_styles: 2,
        num_high_categories: 2,
        fine_per_high: 2,
        items_per_fine: 24,
        min_outfit_len: 2,
        max_outfit_len: 4,
        payload_dim: 8,
        train_outfits: 40,
        valid_outfits: 10,
        test_outfits: 20,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}
