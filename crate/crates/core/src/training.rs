//! Two-phase training: compatibility pre-training with focal loss, then
//! retrieval fine-tuning with the set-wise ranking loss under a curriculum
//! of negatives.
//!
//! Every epoch draws from its own seeded stream, so a run resumed from a
//! state checkpoint at epoch k continues exactly as the uninterrupted run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{make_fitb_questions, Catalog, DatasetSplit, FitbQuestion, Item, Outfit, SplitName};
use crate::distance::Metric;
use crate::error::{Error, Result};
use crate::eval::{self, FitbMode, ModelFitbScorer};
use crate::losses::{FocalConfig, RankingComponents, RankingConfig};
use crate::model::{HeadSet, ModelConfig, OutfitModel, TargetSpec};
use crate::nn::{
    clip_global_norm, global_norm, halving_schedule, Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::sampling::{make_cir_instance, sample_negatives, stage_for_epoch, CurriculumStage, NegativeOutfitSampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_interval: usize,
    pub epochs_cp: usize,
    pub epochs_cir: usize,
    pub margin: f64,
    pub negatives: usize,
    /// Fraction of retrieval epochs spent on high-level negatives.
    pub curriculum_switch_fraction: f64,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub focal: FocalConfig,
    pub metric: Metric,
    pub ranking_components: RankingComponents,
    /// Keep image and text encoders at their initial values.
    pub freeze_item_encoders: bool,
    /// Embed positives and negatives without gradient during fine-tuning.
    pub frozen_candidate_encoders: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            lr_initial: 1e-3,
            lr_halving_interval: 10,
            epochs_cp: 30,
            epochs_cir: 30,
            margin: 2.0,
            negatives: 10,
            curriculum_switch_fraction: 0.5,
            seed: 0,
            grad_clip: Some(5.0),
            focal: FocalConfig::default(),
            metric: Metric::Euclidean,
            ranking_components: RankingComponents::AllPlusHard,
            freeze_item_encoders: false,
            frozen_candidate_encoders: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate suited to pretrained backbones.
    pub fn full_scale() -> Self {
        Self {
            lr_initial: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.negatives == 0 || self.lr_halving_interval == 0 {
            return bad("batch_size, negatives and lr_halving_interval must be positive");
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad("lr_initial must be positive");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be positive");
        }
        if !(0.0..=1.0).contains(&self.curriculum_switch_fraction) {
            return bad("curriculum_switch_fraction must lie in [0, 1]");
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        halving_schedule(self.lr_initial, self.lr_halving_interval, epoch)
    }

    fn ranking(&self) -> RankingConfig {
        RankingConfig {
            margin: self.margin,
            metric: self.metric,
            components: self.ranking_components,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cp,
    Cir,
}

impl Phase {
    fn stream(self) -> u64 {
        match self {
            Phase::Cp => 1,
            Phase::Cir => 2,
        }
    }
}

/// One line of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<CurriculumStage>,
    pub train_loss: f64,
    pub mean_grad_norm: f64,
    pub steps: usize,
    pub skipped_instances: usize,
    /// Validation AUC (compatibility) or FITB accuracy (retrieval).
    pub val_metric: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    phase: Phase,
    epoch: usize,
    adam_step: u64,
    best_epoch: Option<usize>,
    best_metric: Option<f64>,
    train_config: TrainConfig,
    history: Vec<EpochRecord>,
    transferred_trunk_hash: Option<String>,
}

const STATE_KIND: &str = "training_state";

/// Starting point for retrieval fine-tuning.
pub enum CirInit<'a> {
    Scratch(ModelConfig),
    Pretrained(&'a Checkpoint),
}

pub struct Trainer<'d> {
    phase: Phase,
    config: TrainConfig,
    data: &'d DatasetSplit,
    pool: Catalog,
    model: OutfitModel,
    adam: Adam,
    epoch: usize,
    best: Option<(usize, f64, ParamStore)>,
    history: Vec<EpochRecord>,
    val_outfits: Vec<Outfit>,
    val_fitb: Vec<FitbQuestion>,
    positives: NegativeOutfitSampler,
    transferred_trunk_hash: Option<String>,
}

fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase.stream() << 32) | epoch as u64);
    rng
}

fn apply_trainability(model: &mut OutfitModel, config: &TrainConfig) {
    let params = model.params_mut();
    params.set_trainable("item.", !config.freeze_item_encoders);
    params.set_trainable("item.text.proj", false);
}

impl<'d> Trainer<'d> {
    pub fn cp(model_config: ModelConfig, config: TrainConfig, data: &'d DatasetSplit) -> Result<Self> {
        let model = OutfitModel::new(model_config, HeadSet::CP)?;
        Self::with_model(Phase::Cp, model, config, data, None)
    }

    pub fn cir(init: CirInit, config: TrainConfig, data: &'d DatasetSplit) -> Result<Self> {
        let (model, hash) = match init {
            CirInit::Scratch(model_config) => (OutfitModel::new(model_config, HeadSet::CIR)?, None),
            CirInit::Pretrained(ckpt) => {
                let source = ckpt.to_model()?;
                let (model, hash) = OutfitModel::for_retrieval_from(&source)?;
                log::info!("transferred trunk verified, hash {hash}");
                (model, Some(hash))
            }
        };
        Self::with_model(Phase::Cir, model, config, data, hash)
    }

    fn with_model(
        phase: Phase,
        mut model: OutfitModel,
        config: TrainConfig,
        data: &'d DatasetSplit,
        transferred_trunk_hash: Option<String>,
    ) -> Result<Self> {
        config.validate()?;
        apply_trainability(&mut model, &config);
        if data.train.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let max_len = model.config().encoder.max_outfit_len;
        if let Some(o) = data.train.iter().find(|o| o.len() > max_len) {
            return Err(Error::Input(format!(
                "outfit {} has {} items, above max_outfit_len {max_len}; truncate on load",
                o.outfit_id,
                o.len()
            )));
        }
        let pool = data.split_catalog(SplitName::Train)?;
        let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba5e);
        let positives = NegativeOutfitSampler::new(data.train.iter().chain(&data.valid).chain(&data.test));
        let val_outfits = match data.compatibility.get(&SplitName::Valid) {
            Some(v) if !v.is_empty() => v.clone(),
            _ if phase == Phase::Cp && !data.valid.is_empty() => {
                let val_pool = data.split_catalog(SplitName::Valid)?;
                let mut out = Vec::with_capacity(data.valid.len() * 2);
                for o in &data.valid {
                    out.push(o.clone());
                    out.push(positives.corrupt(&val_pool, o, format!("{}-neg", o.outfit_id), &mut val_rng)?);
                }
                out
            }
            _ => Vec::new(),
        };
        let val_fitb = match data.fitb.get(&SplitName::Valid) {
            Some(v) if !v.is_empty() => v.clone(),
            _ if phase == Phase::Cir && !data.valid.is_empty() => {
                make_fitb_questions(&data.valid, &data.split_catalog(SplitName::Valid)?, &mut val_rng)?
            }
            _ => Vec::new(),
        };
        let adam = Adam::new(model.params(), config.adam);
        Ok(Self {
            phase,
            config,
            data,
            pool,
            model,
            adam,
            epoch: 0,
            best: None,
            history: Vec::new(),
            val_outfits,
            val_fitb,
            positives,
            transferred_trunk_hash,
        })
    }

    /// Restores a trainer from [`Trainer::state_checkpoint`] output.
    pub fn resume(state: &Checkpoint, data: &'d DatasetSplit) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(state.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("not a training-state checkpoint: {e}")))?;
        if meta.kind != STATE_KIND {
            return Err(Error::Checkpoint("not a training-state checkpoint".into()));
        }
        let model = state.to_model()?;
        let mut trainer = Self::with_model(
            meta.phase,
            model,
            meta.train_config.clone(),
            data,
            meta.transferred_trunk_hash.clone(),
        )?;
        // Restore exact flags and values, which with_model re-derived.
        trainer.model.load_params(&state.params)?;
        trainer.adam.step = meta.adam_step;
        let mut best_params = trainer.model.params().clone();
        let names: Vec<String> = trainer.model.params().iter().map(|(_, p)| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let fetch = |prefix: &str| {
                state
                    .extra(&format!("{prefix}/{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("state is missing {prefix}/{name}")))
            };
            trainer.adam.m[i] = fetch("adam.m")?.data().to_vec();
            trainer.adam.v[i] = fetch("adam.v")?.data().to_vec();
            if meta.best_epoch.is_some() {
                let id = best_params.find(name).expect("same model layout");
                best_params.get_mut(id).value = fetch("best")?.clone();
            }
        }
        trainer.epoch = meta.epoch;
        trainer.history = meta.history;
        trainer.best = match (meta.best_epoch, meta.best_metric) {
            (Some(e), Some(m)) => Some((e, m, best_params)),
            _ => None,
        };
        Ok(trainer)
    }

    pub fn model(&self) -> &OutfitModel {
        &self.model
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn transferred_trunk_hash(&self) -> Option<&str> {
        self.transferred_trunk_hash.as_deref()
    }

    pub fn total_epochs(&self) -> usize {
        match self.phase {
            Phase::Cp => self.config.epochs_cp,
            Phase::Cir => self.config.epochs_cir,
        }
    }

    /// Trains until `total_epochs`, reporting each epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while self.epoch < self.total_epochs() {
            let record = self.train_epoch()?;
            on_epoch(&record);
        }
        Ok(())
    }

    /// Trains until `epochs` epochs have completed (capped at the total).
    pub fn run_until(&mut self, epochs: usize) -> Result<()> {
        while self.epoch < epochs.min(self.total_epochs()) {
            self.train_epoch()?;
        }
        Ok(())
    }

    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let mut rng = epoch_rng(self.config.seed, self.phase, epoch);
        let (stats, stage) = match self.phase {
            Phase::Cp => (self.cp_epoch(lr, &mut rng)?, None),
            Phase::Cir => {
                let stage = stage_for_epoch(epoch, self.config.epochs_cir, self.config.curriculum_switch_fraction);
                (self.cir_epoch(lr, stage, &mut rng)?, Some(stage))
            }
        };
        let train_loss = stats.loss_sum / stats.steps.max(1) as f64;
        let val_metric = self.validate(train_loss)?;
        let improved = self.best.as_ref().is_none_or(|(_, m, _)| val_metric > *m);
        if improved {
            self.best = Some((epoch, val_metric, self.model.params().clone()));
        }
        self.epoch += 1;
        let record = EpochRecord {
            phase: self.phase,
            epoch,
            lr,
            stage,
            train_loss,
            mean_grad_norm: stats.grad_norm_sum / stats.steps.max(1) as f64,
            steps: stats.steps,
            skipped_instances: stats.skipped,
            val_metric,
            best: improved,
        };
        log::info!("{}", serde_json::to_string(&record).expect("record serializes"));
        self.history.push(record.clone());
        Ok(record)
    }

    /// Held-out metric used for model selection; without validation data the
    /// negated training loss stands in.
    pub fn validate(&self, train_loss: f64) -> Result<f64> {
        match self.phase {
            Phase::Cp if !self.val_outfits.is_empty() => {
                let labels: Vec<u8> = self.val_outfits.iter().map(|o| o.label.unwrap_or(1)).collect();
                let scores = eval::cp_scores(&self.model, &self.data.catalog, &self.val_outfits, 100)?;
                eval::auc(&scores, &labels)
            }
            Phase::Cir if !self.val_fitb.is_empty() => {
                let scorer = ModelFitbScorer {
                    model: &self.model,
                    catalog: &self.data.catalog,
                    mode: FitbMode::CirDistance,
                    batch: 50,
                };
                let report = eval::fitb_accuracy(&scorer, &self.val_fitb, self.config.seed)?;
                Ok(report.metrics.values().next().copied().unwrap_or(0.0))
            }
            _ => Ok(-train_loss),
        }
    }

    fn diverged(&self, step: usize, detail: String) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            step,
            detail,
        }
    }

    /// Backward pass and optimizer step. A batch whose gradient is exactly
    /// zero leaves parameters and optimizer state untouched.
    fn step(&mut self, g: &Graph, loss: Var, lr: f64, step: usize, stats: &mut EpochStats) -> Result<()> {
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(self.diverged(step, format!("loss {value} at lr {lr}")));
        }
        let grads = g.backward(loss).map_err(|e| self.diverged(step, e.to_string()))?;
        let params = self.model.params();
        let mut grads: Vec<(ParamId, Tensor)> = g
            .param_grads(&grads)
            .into_iter()
            .filter(|(id, _)| params.get(*id).trainable)
            .collect();
        let norm = match self.config.grad_clip {
            Some(cap) => clip_global_norm(&mut grads, cap),
            None => global_norm(&grads),
        };
        if !norm.is_finite() {
            return Err(self.diverged(step, format!("gradient norm {norm}, loss {value}")));
        }
        if norm > 0.0 {
            self.adam.update(self.model.params_mut(), &grads, lr);
        }
        stats.loss_sum += value;
        stats.grad_norm_sum += norm;
        stats.steps += 1;
        Ok(())
    }

    fn wrap_forward<T>(&self, step: usize, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::NonFinite(op) => self.diverged(step, format!("non-finite output of {op}")),
            other => other,
        })
    }

    fn cp_epoch(&mut self, lr: f64, rng: &mut ChaCha8Rng) -> Result<EpochStats> {
        let data = self.data;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(rng);
        let per_batch = (self.config.batch_size / 2).max(1);
        let mut stats = EpochStats::default();
        for (step, chunk) in order.chunks(per_batch).enumerate() {
            let mut outfits: Vec<Vec<&Item>> = Vec::with_capacity(chunk.len() * 2);
            let mut labels = Vec::with_capacity(chunk.len() * 2);
            for &i in chunk {
                let source = &data.train[i];
                let negative = self
                    .positives
                    .corrupt(&self.pool, source, format!("{}-neg", source.outfit_id), rng)?;
                outfits.push(data.catalog.resolve(&source.items)?);
                labels.push(1);
                outfits.push(data.catalog.resolve(&negative.items)?);
                labels.push(0);
            }
            let mut g = Graph::new();
            let scores = self.model.cp_scores(&mut g, &outfits);
            let scores = self.wrap_forward(step, scores)?;
            let loss = g.focal_loss(scores, &labels, self.config.focal.gamma, self.config.focal.alpha);
            let loss = self.wrap_forward(step, loss)?;
            self.step(&g, loss, lr, step, &mut stats)?;
        }
        Ok(stats)
    }

    fn cir_epoch(&mut self, lr: f64, stage: CurriculumStage, rng: &mut ChaCha8Rng) -> Result<EpochStats> {
        let data = self.data;
        let s = self.config.negatives;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(rng);
        let mut stats = EpochStats::default();
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut partials: Vec<Vec<&Item>> = Vec::with_capacity(chunk.len());
            let mut positives: Vec<&Item> = Vec::with_capacity(chunk.len());
            let mut negatives: Vec<&Item> = Vec::with_capacity(chunk.len() * s);
            let mut specs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let Some(inst) = make_cir_instance(&data.train[i], rng) else {
                    stats.skipped += 1;
                    continue;
                };
                let positive = data.catalog.resolve(std::slice::from_ref(&inst.positive))?[0];
                let partial_ids: Vec<&str> = inst.partial.iter().map(String::as_str).collect();
                negatives.extend(sample_negatives(positive, &partial_ids, &self.pool, stage, s, rng)?);
                specs.push(TargetSpec::category(positive.fine_category.clone()));
                partials.push(data.catalog.resolve(&inst.partial)?);
                positives.push(positive);
            }
            if partials.is_empty() {
                continue;
            }
            let spec_refs: Vec<&TargetSpec> = specs.iter().collect();
            let mut g = Graph::new();
            let forward = (|| -> Result<Var> {
                let t = self.model.cir_targets(&mut g, &partials, &spec_refs)?;
                let (p, n) = if self.config.frozen_candidate_encoders {
                    let mut frozen = Graph::no_grad();
                    let p = self.model.encode_items(&mut frozen, &positives)?;
                    let n = self.model.encode_items(&mut frozen, &negatives)?;
                    (g.constant(frozen.value(p).clone()), g.constant(frozen.value(n).clone()))
                } else {
                    (
                        self.model.encode_items(&mut g, &positives)?,
                        self.model.encode_items(&mut g, &negatives)?,
                    )
                };
                g.setwise_ranking_loss(t, p, n, s, &self.config.ranking())
            })();
            let loss = self.wrap_forward(step, forward)?;
            self.step(&g, loss, lr, step, &mut stats)?;
        }
        Ok(stats)
    }

    /// Best-validation parameters as a model checkpoint.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        if let Some((epoch, metric, params)) = &self.best {
            ckpt.params = params.clone();
            ckpt.meta = serde_json::json!({
                "kind": "model",
                "phase": self.phase,
                "best_epoch": epoch,
                "best_metric": metric,
                "epochs_trained": self.epoch,
                "transferred_trunk_hash": self.transferred_trunk_hash,
            });
        }
        ckpt
    }

    /// Model plus optimizer moments, best snapshot and history, enough to
    /// resume bit-exactly.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        let meta = StateMeta {
            kind: STATE_KIND.into(),
            phase: self.phase,
            epoch: self.epoch,
            adam_step: self.adam.step,
            best_epoch: self.best.as_ref().map(|b| b.0),
            best_metric: self.best.as_ref().map(|b| b.1),
            train_config: self.config.clone(),
            history: self.history.clone(),
            transferred_trunk_hash: self.transferred_trunk_hash.clone(),
        };
        ckpt.meta = serde_json::to_value(meta).expect("meta serializes");
        for (i, (_, p)) in self.model.params().iter().enumerate() {
            let shape = p.value.shape().to_vec();
            let tensor = |data: &Vec<f64>| Tensor::new(shape.clone(), data.clone()).expect("moment shape");
            ckpt.extras
                .push((format!("adam.m/{}", p.name), tensor(&self.adam.m[i])));
            ckpt.extras
                .push((format!("adam.v/{}", p.name), tensor(&self.adam.v[i])));
        }
        if let Some((_, _, params)) = &self.best {
            for (_, p) in params.iter() {
                ckpt.extras.push((format!("best/{}", p.name), p.value.clone()));
            }
        }
        ckpt
    }
}

#[derive(Default)]
struct EpochStats {
    loss_sum: f64,
    grad_norm_sum: f64,
    steps: usize,
    skipped: usize,
}

/// Result of a complete training run.
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub state: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub fn pretrain_cp(model_config: ModelConfig, config: TrainConfig, data: &DatasetSplit) -> Result<TrainOutcome> {
    let mut trainer = Trainer::cp(model_config, config, data)?;
    trainer.run(|_| {})?;
    Ok(TrainOutcome {
        best: trainer.best_checkpoint(),
        state: trainer.state_checkpoint(),
        history: trainer.history().to_vec(),
    })
}

pub fn finetune_cir(init: CirInit, config: TrainConfig, data: &DatasetSplit) -> Result<TrainOutcome> {
    let mut trainer = Trainer::cir(init, config, data)?;
    trainer.run(|_| {})?;
    Ok(TrainOutcome {
        best: trainer.best_checkpoint(),
        state: trainer.state_checkpoint(),
        history: trainer.history().to_vec(),
    })
}
