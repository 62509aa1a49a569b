//! Item encoders: `u = E_img(image) ∥ E_text(text)`, image part first.
//!
//! The image backbone is either a two-layer MLP over a numeric payload or a
//! small CNN over 32x32 grayscale. The text backbone hashes normalized
//! tokens into a fixed bucket space, applies a frozen random projection and
//! then a trainable linear head.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImagePayload, Item};
use crate::error::{Error, Result};
use crate::nn::{ConvGeometry, Graph, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageEncoderKind {
    #[default]
    Mlp,
    Cnn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderKind {
    #[default]
    HashBow,
}

/// Which item field feeds the text encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    #[default]
    Description,
    Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ItemEncoderConfig {
    pub image_encoder: ImageEncoderKind,
    pub text_encoder: TextEncoderKind,
    pub text_source: TextSource,
    /// Input length of the MLP backbone.
    pub payload_dim: usize,
    pub image_hidden: usize,
    pub d_img: usize,
    pub d_text: usize,
    pub hash_buckets: usize,
    /// Output width of the frozen projection.
    pub text_feature_dim: usize,
}

impl Default for ItemEncoderConfig {
    fn default() -> Self {
        Self {
            image_encoder: ImageEncoderKind::Mlp,
            text_encoder: TextEncoderKind::HashBow,
            text_source: TextSource::Description,
            payload_dim: 32,
            image_hidden: 64,
            d_img: 64,
            d_text: 64,
            hash_buckets: 4096,
            text_feature_dim: 64,
        }
    }
}

impl ItemEncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.d_img + self.d_text
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.payload_dim,
            self.image_hidden,
            self.d_img,
            self.d_text,
            self.text_feature_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("item encoder dimensions must be positive".into()));
        }
        if self.hash_buckets < 2 {
            return Err(Error::Config("hash_buckets must be at least 2".into()));
        }
        Ok(())
    }
}

/// Lowercases, replaces punctuation with nothing and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        let cleaned: String = word
            .chars()
            .filter(|c| !c.is_ascii_punctuation() && !c.is_ascii_control())
            .flat_map(char::to_lowercase)
            .collect();
        if cleaned.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&cleaned);
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Sparse bag of hashed tokens, L2-normalized. Bucket 0 is reserved for
/// empty text.
pub fn hash_bow(text: &str, buckets: usize) -> Vec<(usize, f64)> {
    let norm = normalize_text(text);
    let mut counts: Vec<(usize, f64)> = Vec::new();
    for token in norm.split(' ').filter(|t| !t.is_empty()) {
        let b = 1 + (fnv1a(token.as_bytes()) % (buckets as u64 - 1)) as usize;
        match counts.iter_mut().find(|(k, _)| *k == b) {
            Some((_, c)) => *c += 1.0,
            None => counts.push((b, 1.0)),
        }
    }
    if counts.is_empty() {
        return vec![(0, 1.0)];
    }
    counts.sort_by_key(|&(k, _)| k);
    let len = counts.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
    counts.into_iter().map(|(k, c)| (k, c / len)).collect()
}

const CNN_SIDE: usize = 32;
const CNN_CHANNELS: [usize; 2] = [8, 16];

#[derive(Clone, Debug)]
enum ImageBackbone {
    Mlp { hidden: Linear, out: Linear },
    Cnn { conv1: Linear, conv2: Linear, out: Linear },
}

#[derive(Clone, Debug)]
pub struct ItemEncoder {
    pub config: ItemEncoderConfig,
    image: ImageBackbone,
    projection: ParamId,
    text_head: Linear,
}

fn conv1_geometry() -> ConvGeometry {
    ConvGeometry {
        height: CNN_SIDE,
        width: CNN_SIDE,
        channels: 1,
        kernel: 3,
        stride: 2,
        pad: 1,
    }
}

fn conv2_geometry() -> ConvGeometry {
    let g1 = conv1_geometry();
    ConvGeometry {
        height: g1.out_height(),
        width: g1.out_width(),
        channels: CNN_CHANNELS[0],
        kernel: 3,
        stride: 2,
        pad: 1,
    }
}

impl ItemEncoder {
    /// Registers parameters under `item.img.*` and `item.text.*`.
    pub fn new(config: ItemEncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let image = match config.image_encoder {
            ImageEncoderKind::Mlp => ImageBackbone::Mlp {
                hidden: Linear::new(store, "item.img.fc1", config.payload_dim, config.image_hidden, rng),
                out: Linear::new(store, "item.img.fc2", config.image_hidden, config.d_img, rng),
            },
            ImageEncoderKind::Cnn => ImageBackbone::Cnn {
                conv1: Linear::new(
                    store,
                    "item.img.conv1",
                    conv1_geometry().patch_len(),
                    CNN_CHANNELS[0],
                    rng,
                ),
                conv2: Linear::new(
                    store,
                    "item.img.conv2",
                    conv2_geometry().patch_len(),
                    CNN_CHANNELS[1],
                    rng,
                ),
                out: Linear::new(store, "item.img.fc", CNN_CHANNELS[1], config.d_img, rng),
            },
        };
        let bound = (3.0 / config.text_feature_dim as f64).sqrt();
        let projection = store.add_uniform(
            "item.text.proj",
            &[config.hash_buckets, config.text_feature_dim],
            bound,
            rng,
        );
        store.get_mut(projection).trainable = false;
        let text_head = Linear::new(store, "item.text.fc", config.text_feature_dim, config.d_text, rng);
        Ok(Self {
            config,
            image,
            projection,
            text_head,
        })
    }

    /// The final image layer, i.e. the one whose zero init yields zero output.
    pub fn image_output_layer(&self) -> &Linear {
        match &self.image {
            ImageBackbone::Mlp { out, .. } | ImageBackbone::Cnn { out, .. } => out,
        }
    }

    pub fn text_of<'a>(&self, item: &'a Item) -> &'a str {
        match self.config.text_source {
            TextSource::Description => &item.description,
            TextSource::Category => &item.fine_category,
        }
    }

    fn payload_matrix(&self, payloads: &[&ImagePayload]) -> Result<Tensor> {
        let (width, is_mlp) = match self.image {
            ImageBackbone::Mlp { .. } => (self.config.payload_dim, true),
            ImageBackbone::Cnn { .. } => (CNN_SIDE * CNN_SIDE, false),
        };
        let mut data = Vec::with_capacity(payloads.len() * width);
        for p in payloads {
            match (p, is_mlp) {
                (ImagePayload::Features(f), true) if f.len() == width => data.extend_from_slice(f),
                (ImagePayload::Pixels(px), false) if px.len() == width => data.extend_from_slice(px),
                (ImagePayload::File(path), false) => data.extend(decode_grayscale(path)?),
                (other, _) => {
                    let backbone = if is_mlp { "mlp" } else { "cnn" };
                    return Err(Error::Input(format!(
                        "{backbone} image encoder expects {width} values, got {}",
                        describe(other)
                    )));
                }
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image payload contains non-finite values".into()));
        }
        Tensor::new(vec![payloads.len(), width], data)
    }

    /// `[n, d_img]` image embeddings.
    pub fn encode_images(&self, g: &mut Graph, store: &ParamStore, payloads: &[&ImagePayload]) -> Result<Var> {
        let x = self.payload_matrix(payloads)?;
        let n = payloads.len();
        let x = g.constant(x);
        match &self.image {
            ImageBackbone::Mlp { hidden, out } => {
                let h = hidden.forward(g, store, x)?;
                let h = g.gelu(h)?;
                out.forward(g, store, h)
            }
            ImageBackbone::Cnn { conv1, conv2, out } => {
                let (g1, g2) = (conv1_geometry(), conv2_geometry());
                let p1 = g.im2col(x, g1)?;
                let h1 = conv1.forward(g, store, p1)?;
                let h1 = g.gelu(h1)?;
                let h1 = g.reshape(h1, &[n, g1.out_height() * g1.out_width() * CNN_CHANNELS[0]])?;
                let p2 = g.im2col(h1, g2)?;
                let h2 = conv2.forward(g, store, p2)?;
                let h2 = g.gelu(h2)?;
                let pooled = g.group_mean_rows(h2, g2.out_height() * g2.out_width())?;
                out.forward(g, store, pooled)
            }
        }
    }

    /// Frozen bag-of-words features `[n, text_feature_dim]`.
    pub fn text_features(&self, store: &ParamStore, texts: &[&str]) -> Tensor {
        let proj = store.value(self.projection);
        let dim = self.config.text_feature_dim;
        let mut data = vec![0.0; texts.len() * dim];
        for (row, text) in data.chunks_mut(dim).zip(texts) {
            for (bucket, weight) in hash_bow(text, self.config.hash_buckets) {
                for (o, p) in row.iter_mut().zip(proj.row(bucket)) {
                    *o += weight * p;
                }
            }
        }
        Tensor::new(vec![texts.len(), dim], data).expect("text feature shape")
    }

    /// `[n, d_text]` text embeddings.
    pub fn encode_texts(&self, g: &mut Graph, store: &ParamStore, texts: &[&str]) -> Result<Var> {
        let feats = g.constant(self.text_features(store, texts));
        self.text_head.forward(g, store, feats)
    }

    /// `[n, d_img + d_text]` item features.
    pub fn encode_items(&self, g: &mut Graph, store: &ParamStore, items: &[&Item]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Input("no items to encode".into()));
        }
        let payloads: Vec<&ImagePayload> = items.iter().map(|it| &it.image).collect();
        let texts: Vec<&str> = items.iter().map(|it| self.text_of(it)).collect();
        let img = self.encode_images(g, store, &payloads)?;
        let txt = self.encode_texts(g, store, &texts)?;
        g.concat_cols(&[img, txt])
    }
}

fn describe(p: &ImagePayload) -> String {
    match p {
        ImagePayload::Features(f) => format!("a feature vector of length {}", f.len()),
        ImagePayload::Pixels(px) => format!("{} pixels", px.len()),
        ImagePayload::File(path) => format!("image file {}", path.display()),
    }
}

/// Decodes an image file to 32x32 grayscale intensities in `[0, 1]`.
pub fn decode_grayscale(path: &Path) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::Input(format!("cannot decode {}: {e}", path.display())))?;
    let side = CNN_SIDE as u32;
    let gray = img
        .resize_exact(side, side, image::imageops::FilterType::Triangle)
        .to_luma8();
    Ok(gray.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect())
}
