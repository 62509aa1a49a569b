//! Outfit encoder: a transformer over the item-feature set with a task token
//! at position 0. The compatibility head reads the outfit token's output;
//! the retrieval head reads the target-item token's output.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Item;
use crate::encoders::{ItemEncoder, ItemEncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamId, ParamStore, SeqLayout, TransformerEncoder, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub max_outfit_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            model_dim: 128,
            layers: 2,
            heads: 4,
            ff_hidden: 256,
            max_outfit_len: 16,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            layers: 6,
            heads: 16,
            ff_hidden: 512,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("layers and ff_hidden must be positive".into()));
        }
        if self.max_outfit_len < 2 {
            return Err(Error::Config("max_outfit_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub item: ItemEncoderConfig,
    pub encoder: EncoderConfig,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.item.validate()?;
        self.encoder.validate()?;
        if self.item.feature_dim() != self.encoder.model_dim {
            return Err(Error::Config(format!(
                "d_img + d_text = {} but model_dim = {}",
                self.item.feature_dim(),
                self.encoder.model_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Category,
    FreeText,
}

/// Query-time description of the wanted item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub text: String,
}

impl TargetSpec {
    pub fn category(text: impl Into<String>) -> Self {
        Self {
            kind: TargetKind::Category,
            text: text.into(),
        }
    }

    pub fn free_text(text: impl Into<String>) -> Self {
        Self {
            kind: TargetKind::FreeText,
            text: text.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::Input("target text must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub cp: bool,
    pub cir: bool,
}

impl HeadSet {
    pub const CP: HeadSet = HeadSet { cp: true, cir: false };
    pub const CIR: HeadSet = HeadSet { cp: false, cir: true };
    pub const BOTH: HeadSet = HeadSet { cp: true, cir: true };
}

/// Parameter-name prefixes shared by both tasks.
pub const TRUNK_PREFIXES: [&str; 3] = ["item.", "enc.", "tok."];

#[derive(Clone, Debug)]
struct MlpHead {
    fc1: Linear,
    fc2: Linear,
}

impl MlpHead {
    fn new(store: &mut ParamStore, name: &str, dim: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, out, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

thread_local! {
    static CIR_FORWARDS: Cell<usize> = const { Cell::new(0) };
}

/// Retrieval-head forward passes issued on this thread.
pub fn cir_forward_calls() -> usize {
    CIR_FORWARDS.with(Cell::get)
}

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
pub struct OutfitModel {
    config: ModelConfig,
    params: ParamStore,
    items: ItemEncoder,
    trunk: TransformerEncoder,
    outfit_token: ParamId,
    image_token: ParamId,
    cp_head: Option<MlpHead>,
    cir_head: Option<MlpHead>,
}

impl OutfitModel {
    /// Fresh model. Each component draws from its own seeded stream, so a
    /// head's initial weights do not depend on which other heads exist.
    pub fn new(config: ModelConfig, heads: HeadSet) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.model_dim;
        let mut params = ParamStore::new();
        let items = ItemEncoder::new(config.item.clone(), &mut params, &mut component_rng(config.seed, 1))?;
        let enc = &config.encoder;
        let trunk = TransformerEncoder::new(
            &mut params,
            "enc",
            d,
            enc.layers,
            enc.heads,
            enc.ff_hidden,
            &mut component_rng(config.seed, 2),
        )?;
        let mut tok_rng = component_rng(config.seed, 3);
        let outfit_token = params.add_uniform("tok.outfit", &[1, d], 0.1, &mut tok_rng);
        let image_token = params.add_uniform("tok.img", &[1, config.item.d_img], 0.1, &mut tok_rng);
        let cp_head = heads
            .cp
            .then(|| MlpHead::new(&mut params, "head.cp", d, 1, &mut component_rng(config.seed, 4)));
        let cir_head = heads
            .cir
            .then(|| MlpHead::new(&mut params, "head.cir", d, d, &mut component_rng(config.seed, 5)));
        Ok(Self {
            config,
            params,
            items,
            trunk,
            outfit_token,
            image_token,
            cp_head,
            cir_head,
        })
    }

    /// Retrieval model whose trunk (item encoders, transformer, tokens) is
    /// copied from `source`; the compatibility head is dropped and a fresh
    /// retrieval head added. Returns the verified trunk hash.
    pub fn for_retrieval_from(source: &OutfitModel) -> Result<(Self, String)> {
        let mut model = Self::new(source.config.clone(), HeadSet::CIR)?;
        model.params.copy_matching(&source.params, &TRUNK_PREFIXES)?;
        let expected = source.params.hash(&TRUNK_PREFIXES);
        let found = model.params.hash(&TRUNK_PREFIXES);
        if expected != found {
            return Err(Error::FingerprintMismatch { expected, found });
        }
        Ok((model, found))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn heads(&self) -> HeadSet {
        HeadSet {
            cp: self.cp_head.is_some(),
            cir: self.cir_head.is_some(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn item_encoder(&self) -> &ItemEncoder {
        &self.items
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.model_dim
    }

    /// SHA-256 over the configuration and every parameter.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.config, self.heads(), &self.params)
    }

    /// `[n, model_dim]` item features.
    pub fn encode_items(&self, g: &mut Graph, items: &[&Item]) -> Result<Var> {
        self.items.encode_items(g, &self.params, items)
    }

    fn check_groups(&self, groups: &[Vec<usize>], min: usize, rows: usize, op: &'static str) -> Result<()> {
        if groups.is_empty() {
            return Err(Error::Input(format!("{op}: empty batch")));
        }
        let max = self.config.encoder.max_outfit_len;
        for group in groups {
            if group.len() < min {
                return Err(Error::Input(format!(
                    "{op}: {} items given, need at least {min}",
                    group.len()
                )));
            }
            if group.len() > max {
                return Err(Error::Input(format!(
                    "{op}: {} items exceed max_outfit_len {max}",
                    group.len()
                )));
            }
            if let Some(&r) = group.iter().find(|&&r| r >= rows) {
                return Err(Error::shape(op, format!("row {r} of {rows}")));
            }
        }
        Ok(())
    }

    /// Runs the transformer over `[token_b, features[groups[b]]...]` and
    /// returns the position-0 outputs `[B, d]`. Sequences are padded to the
    /// longest group, or to `pad_to` items when that is longer.
    fn run_trunk(
        &self,
        g: &mut Graph,
        tokens: Var,
        features: Var,
        groups: &[Vec<usize>],
        pad_to: Option<usize>,
    ) -> Result<Var> {
        let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
        let seq_len = 1 + longest.max(pad_to.unwrap_or(0));
        let mut index = Vec::with_capacity(groups.len() * seq_len);
        let mut valid = Vec::with_capacity(groups.len() * seq_len);
        for (b, group) in groups.iter().enumerate() {
            index.push(Some((0, b)));
            valid.push(true);
            for slot in 0..seq_len - 1 {
                match group.get(slot) {
                    Some(&r) => {
                        index.push(Some((1, r)));
                        valid.push(true);
                    }
                    None => {
                        index.push(None);
                        valid.push(false);
                    }
                }
            }
        }
        let x = g.gather_rows(&[tokens, features], index)?;
        let layout = SeqLayout {
            batch: groups.len(),
            seq_len,
            valid,
        };
        let h = self.trunk.forward(g, &self.params, x, &layout)?;
        g.gather_rows(&[h], (0..groups.len()).map(|b| Some((0, b * seq_len))).collect())
    }

    fn repeat_param(&self, g: &mut Graph, id: ParamId, times: usize) -> Result<Var> {
        let p = g.param(&self.params, id);
        g.gather_rows(&[p], vec![Some((0, 0)); times])
    }

    /// Compatibility scores `[B]` for outfits given as row groups of a
    /// feature matrix `[N, model_dim]`.
    pub fn cp_forward(
        &self,
        g: &mut Graph,
        features: Var,
        groups: &[Vec<usize>],
        pad_to: Option<usize>,
    ) -> Result<Var> {
        let head = self
            .cp_head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no compatibility head".into()))?;
        self.check_groups(groups, 2, g.value(features).rows(), "cp_forward")?;
        let tokens = self.repeat_param(g, self.outfit_token, groups.len())?;
        let h = self.run_trunk(g, tokens, features, groups, pad_to)?;
        let logits = head.forward(g, &self.params, h)?;
        let scores = g.sigmoid(logits)?;
        g.reshape(scores, &[groups.len()])
    }

    /// Target embeddings `[B, model_dim]`, one per (partial outfit, spec).
    pub fn cir_forward(
        &self,
        g: &mut Graph,
        features: Var,
        groups: &[Vec<usize>],
        specs: &[&TargetSpec],
        pad_to: Option<usize>,
    ) -> Result<Var> {
        let head = self
            .cir_head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no retrieval head".into()))?;
        if specs.len() != groups.len() {
            return Err(Error::shape(
                "cir_forward",
                format!("{} specs for {} outfits", specs.len(), groups.len()),
            ));
        }
        for spec in specs {
            spec.validate()?;
        }
        self.check_groups(groups, 1, g.value(features).rows(), "cir_forward")?;
        CIR_FORWARDS.with(|c| c.set(c.get() + 1));
        let texts: Vec<&str> = specs.iter().map(|s| s.text.as_str()).collect();
        let text = self.items.encode_texts(g, &self.params, &texts)?;
        let img = self.repeat_param(g, self.image_token, groups.len())?;
        let tokens = g.concat_cols(&[img, text])?;
        let h = self.run_trunk(g, tokens, features, groups, pad_to)?;
        head.forward(g, &self.params, h)
    }

    /// Encodes a batch of outfits in one pass and scores them.
    pub fn cp_scores(&self, g: &mut Graph, outfits: &[Vec<&Item>]) -> Result<Var> {
        let (flat, groups) = flatten(outfits);
        if flat.is_empty() {
            return Err(Error::Input("cp_scores: empty outfits".into()));
        }
        let features = self.encode_items(g, &flat)?;
        self.cp_forward(g, features, &groups, None)
    }

    pub fn cir_targets(&self, g: &mut Graph, partials: &[Vec<&Item>], specs: &[&TargetSpec]) -> Result<Var> {
        let (flat, groups) = flatten(partials);
        if flat.is_empty() {
            return Err(Error::Input("cir_forward: partial outfit is empty".into()));
        }
        let features = self.encode_items(g, &flat)?;
        self.cir_forward(g, features, &groups, specs, None)
    }

    /// Inference-only compatibility score of one outfit.
    pub fn score(&self, items: &[&Item]) -> Result<f64> {
        let mut g = Graph::no_grad();
        let s = self.cp_scores(&mut g, &[items.to_vec()])?;
        Ok(g.value(s).data()[0])
    }

    /// Inference-only target embedding for one partial outfit.
    pub fn target_embedding(&self, partial: &[&Item], spec: &TargetSpec) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let t = self.cir_targets(&mut g, &[partial.to_vec()], &[spec])?;
        Ok(g.value(t).data().to_vec())
    }

    /// Inference-only item features, encoded in chunks of `batch`.
    pub fn item_features(&self, items: &[&Item], batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(batch.max(1)) {
            let mut g = Graph::no_grad();
            let f = self.encode_items(&mut g, chunk)?;
            let t = g.value(f);
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Replaces parameter values from `source`, which must hold exactly the
    /// same names and shapes. Trainability flags are taken from `source`.
    pub fn load_params(&mut self, source: &ParamStore) -> Result<()> {
        if source.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                source.len(),
                self.params.len()
            )));
        }
        for (id, p) in source.iter() {
            let dst = self.params.get_mut(id);
            if dst.name != p.name || dst.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match model parameter {} {:?}",
                    p.name,
                    p.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = p.value.clone();
            dst.trainable = p.trainable;
        }
        Ok(())
    }
}

/// SHA-256 over a configuration, its head set and parameter values.
pub fn fingerprint(config: &ModelConfig, heads: HeadSet, params: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(serde_json::to_vec(&heads).expect("heads serialize"));
    h.update(params.hash(&[]).as_bytes());
    hex::encode(h.finalize())
}

fn flatten<'a>(outfits: &[Vec<&'a Item>]) -> (Vec<&'a Item>, Vec<Vec<usize>>) {
    let mut flat = Vec::new();
    let mut groups = Vec::with_capacity(outfits.len());
    for outfit in outfits {
        groups.push((flat.len()..flat.len() + outfit.len()).collect());
        flat.extend_from_slice(outfit);
    }
    (flat, groups)
}
