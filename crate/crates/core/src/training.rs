//! Training loop: per-epoch random instance order within every photo,
//! photo-order shuffling, fixed unroll length, minibatched Adam with a
//! single step decay of the learning rate.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PhotoRecord;
use crate::error::{Error, Result};
use crate::layers::EmbeddingMode;
use crate::numcore::{AdamState, DenseVector};
use crate::seeding::{derive_seed, purpose, rng_for};
use crate::seqmodel::{
    backward_train, forward_train_with, LabelFeeding, ModelConfig, ModelParams, SequenceItem,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Fixed unroll length; every photo must fit.
    pub unroll: usize,
    pub learning_rate: f64,
    /// The learning rate is divided by this at `decay_epoch`.
    pub decay_factor: f64,
    pub decay_epoch: usize,
    pub total_epochs: usize,
    /// Photos per minibatch.
    pub batch_size: usize,
    pub mode: EmbeddingMode,
    pub use_scene: bool,
    pub seed: u64,
    /// Feature region the model reads.
    pub region: String,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub feeding: LabelFeeding,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 512,
            hidden_dim: 512,
            unroll: 22,
            learning_rate: 0.001,
            decay_factor: 10.0,
            decay_epoch: 20,
            total_epochs: 80,
            batch_size: 16,
            mode: EmbeddingMode::Addition,
            use_scene: true,
            seed: 0,
            region: "head".into(),
            clip_norm: None,
            feeding: LabelFeeding::TeacherForcing,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed_dim and hidden_dim must be positive".into());
        }
        if self.unroll == 0 {
            return bad("unroll must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if self.total_epochs > 0 && self.decay_epoch >= self.total_epochs {
            return bad(format!(
                "decay_epoch {} must precede total_epochs {}",
                self.decay_epoch, self.total_epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.region.is_empty() {
            return bad("region must be named".into());
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Validation(format!(
            "epoch {epoch} outside 0..{}",
            cfg.total_epochs
        )));
    }
    Ok(if epoch < cfg.decay_epoch {
        cfg.learning_rate
    } else {
        cfg.learning_rate / cfg.decay_factor
    })
}

/// Applies one random permutation jointly to a photo's instance features and
/// labels. The permutation is a function of `(seed, epoch, photo_index)`.
pub fn shuffle_photo(
    photo: &PhotoRecord,
    region: &str,
    pad_to: usize,
    seed: u64,
    epoch: usize,
    photo_index: usize,
) -> Result<SequenceItem> {
    if photo.is_empty() {
        return Err(Error::Validation(format!("photo {} has no instances", photo.photo_id)));
    }
    let feats = photo.region_features(region)?;
    let mut order: Vec<usize> = (0..photo.len()).collect();
    let mut rng = rng_for(
        seed,
        &[purpose::INSTANCE_ORDER, epoch as u64, photo_index as u64],
    );
    order.shuffle(&mut rng);
    Ok(SequenceItem {
        scene_feat: photo.scene_feat.clone(),
        instance_feats: order.iter().map(|&i| feats[i].clone()).collect(),
        labels: order.iter().map(|&i| photo.instances[i].label).collect(),
        pad_to,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean negative log likelihood per real (unpadded) step.
    pub mean_loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Model shape implied by a dataset and a training configuration.
pub fn model_config_for(
    dataset: &[PhotoRecord],
    num_identities: usize,
    cfg: &TrainConfig,
) -> Result<ModelConfig> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Validation("empty training set".into()))?;
    let feature_dim = first
        .region_features(&cfg.region)?
        .first()
        .map(|f| f.dim())
        .ok_or_else(|| Error::Validation(format!("photo {} has no instances", first.photo_id)))?;
    let config = ModelConfig {
        num_identities,
        feature_dim,
        scene_dim: first.scene_feat.dim(),
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        mode: cfg.mode,
        use_scene: cfg.use_scene,
    };
    config.validate()?;
    Ok(config)
}

/// Checks every photo against the model shape and the unroll length.
pub fn check_dataset(dataset: &[PhotoRecord], model: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    for photo in dataset {
        if photo.is_empty() {
            return Err(Error::Validation(format!("photo {} has no instances", photo.photo_id)));
        }
        if photo.len() > cfg.unroll {
            return Err(Error::Config(format!(
                "photo {} has {} instances, more than unroll length {}",
                photo.photo_id,
                photo.len(),
                cfg.unroll
            )));
        }
        if photo.scene_feat.dim() != model.scene_dim {
            return Err(Error::Shape(format!(
                "photo {}: scene dim {} but model expects {}",
                photo.photo_id,
                photo.scene_feat.dim(),
                model.scene_dim
            )));
        }
        for (inst, feat) in photo.instances.iter().zip(photo.region_features(&cfg.region)?) {
            if feat.dim() != model.feature_dim {
                return Err(Error::Shape(format!(
                    "photo {}: `{}` dim {} but model expects {}",
                    photo.photo_id,
                    cfg.region,
                    feat.dim(),
                    model.feature_dim
                )));
            }
            if inst.label == 0 || inst.label > model.num_identities {
                return Err(Error::Validation(format!(
                    "photo {}: label {} outside 1..={}",
                    photo.photo_id, inst.label, model.num_identities
                )));
            }
        }
    }
    Ok(())
}

pub fn train(
    dataset: &[PhotoRecord],
    num_identities: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    train_with(dataset, num_identities, cfg, |_, _| Ok(None))
}

/// Training with a per-epoch hook. The hook sees the parameters after each
/// epoch and may return an evaluation accuracy to record.
pub fn train_with<F>(
    dataset: &[PhotoRecord],
    num_identities: usize,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainReport)>
where
    F: FnMut(&ModelParams, &EpochRecord) -> Result<Option<f64>>,
{
    cfg.validate()?;
    let model_cfg = model_config_for(dataset, num_identities, cfg)?;
    check_dataset(dataset, &model_cfg, cfg)?;

    let mut params = ModelParams::init(model_cfg, derive_seed(cfg.seed, &[purpose::INIT]))?;
    let mut adam = AdamState::new(params.num_params(), cfg.learning_rate);
    let mut flat = params.to_flat();
    let mut epochs = Vec::with_capacity(cfg.total_epochs);

    for epoch in 0..cfg.total_epochs {
        adam.learning_rate = lr_schedule(cfg, epoch)?;
        let mut photo_order: Vec<usize> = (0..dataset.len()).collect();
        photo_order.shuffle(&mut rng_for(cfg.seed, &[purpose::PHOTO_ORDER, epoch as u64]));

        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch in photo_order.chunks(cfg.batch_size) {
            let (loss, steps, grads) = batch_gradient(&params, dataset, batch, cfg, epoch)?;
            epoch_loss += loss;
            epoch_steps += steps;
            let mut flat_grads = grads.to_flat();
            if let Some(limit) = cfg.clip_norm {
                clip_to_norm(&mut flat_grads, limit);
            }
            adam.step(&mut flat, &flat_grads)?;
            params.load_flat(&flat)?;
        }

        let mut record = EpochRecord {
            epoch: epoch + 1,
            learning_rate: adam.learning_rate,
            mean_loss: epoch_loss / epoch_steps as f64,
            eval_accuracy: None,
        };
        if !record.mean_loss.is_finite() || !params.is_finite() {
            return Err(Error::NonFinite(format!("training diverged in epoch {}", epoch + 1)));
        }
        record.eval_accuracy = on_epoch(&params, &record)?;
        epochs.push(record);
    }

    let report = TrainReport {
        seed: cfg.seed,
        config: cfg.clone(),
        model: model_cfg,
        epochs,
        checkpoint: None,
    };
    Ok((params, report))
}

/// Summed loss, number of loss-carrying steps, and the gradient of the
/// minibatch objective (summed loss divided by step count).
fn batch_gradient(
    params: &ModelParams,
    dataset: &[PhotoRecord],
    batch: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, usize, ModelParams)> {
    let per_photo: Vec<(f64, usize, ModelParams)> = batch
        .par_iter()
        .map(|&idx| {
            let item = shuffle_photo(&dataset[idx], &cfg.region, cfg.unroll, cfg.seed, epoch, idx)?;
            let trace = forward_train_with(params, &item, cfg.feeding)?;
            let grads = backward_train(params, &trace)?;
            Ok((trace.loss(), trace.num_steps(), grads))
        })
        .collect::<Result<_>>()?;

    // Sequential reduction keeps the sum order fixed.
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let mut steps = 0;
    for (l, s, g) in &per_photo {
        loss += l;
        steps += s;
        total.add_scaled(g, 1.0);
    }
    total.scale(1.0 / steps as f64);
    Ok((loss, steps, total))
}

fn clip_to_norm(grads: &mut [f64], limit: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        let factor = limit / norm;
        grads.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Mean per-step teacher-forced loss of `params` over a dataset, with
/// instances in stored order.
pub fn mean_loss(params: &ModelParams, dataset: &[PhotoRecord], region: &str) -> Result<f64> {
    let mut loss = 0.0;
    let mut steps = 0;
    for photo in dataset {
        let feats = photo.region_features(region)?;
        let item = SequenceItem {
            scene_feat: photo.scene_feat.clone(),
            instance_feats: feats.into_iter().cloned().collect::<Vec<DenseVector>>(),
            labels: photo.labels(),
            pad_to: photo.len(),
        };
        let trace = forward_train_with(params, &item, LabelFeeding::TeacherForcing)?;
        loss += trace.loss();
        steps += trace.num_steps();
    }
    Ok(loss / steps.max(1) as f64)
}
