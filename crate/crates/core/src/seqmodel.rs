//! The per-photo sequence model: an optional scene step that initializes the
//! LSTM, then one step per instance whose input jointly embeds the previous
//! identity label and the current instance feature. Every instance step is
//! classified and contributes its negative log likelihood to the loss; the
//! scene step contributes none.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    classify, classify_backward, joint_embed, joint_embed_backward, lstm_backward, lstm_step,
    scene_embed, scene_embed_backward, ClassifierParams, EmbeddingMode, EmbeddingParams,
    JointEmbedCache, LstmCache, LstmParams, LstmState, SceneEmbedCache,
};
use crate::numcore::{nll, DenseVector, Distribution};

/// Index of the auxiliary start label in the label vocabulary.
pub const START_LABEL: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_identities: usize,
    pub feature_dim: usize,
    pub scene_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mode: EmbeddingMode,
    pub use_scene: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::Config("num_identities must be at least 1".into()));
        }
        for (name, d) in [
            ("feature_dim", self.feature_dim),
            ("scene_dim", self.scene_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Size of the one-hot label encoding: the identities plus the start label.
    pub fn label_vocab_dim(&self) -> usize {
        self.num_identities + 1
    }
}

/// All learnable weights of the sequence model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: EmbeddingParams,
    pub lstm: LstmParams,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            config,
            embedding: EmbeddingParams::zeros(
                config.embed_dim,
                config.label_vocab_dim(),
                config.feature_dim,
                config.scene_dim,
                config.mode,
            ),
            lstm: LstmParams::zeros(config.embed_dim, config.hidden_dim),
            classifier: ClassifierParams::zeros(config.num_identities, config.hidden_dim),
        })
    }

    /// Uniform `[-0.08, 0.08]` weights, forget-gate bias 1, other biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = EmbeddingParams::random(
            &mut rng,
            config.embed_dim,
            config.label_vocab_dim(),
            config.feature_dim,
            config.scene_dim,
            config.mode,
        );
        let lstm = LstmParams::random(&mut rng, config.embed_dim, config.hidden_dim);
        let classifier = ClassifierParams::random(&mut rng, config.num_identities, config.hidden_dim);
        Ok(ModelParams {
            config,
            embedding,
            lstm,
            classifier,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config,
            embedding: self.embedding.zeros_like(),
            lstm: self.lstm.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    /// Parameter arrays in canonical order: U_y, U_b, U_I, LSTM input
    /// weights, LSTM hidden weights, LSTM bias, classifier weight, classifier bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(8);
        out.extend(self.embedding.slices());
        out.extend(self.lstm.slices());
        out.extend(self.classifier.slices());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(8);
        out.extend(self.embedding.slices_mut());
        out.extend(self.lstm.slices_mut());
        out.extend(self.classifier.slices_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += factor · other`, blockwise.
    pub fn add_scaled(&mut self, other: &ModelParams, factor: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// LSTM state after the initial step: the scene step when the model
    /// uses scene context, otherwise all zeros.
    pub fn initial_state(&self, scene_feat: &DenseVector) -> Result<LstmState> {
        let zero = LstmState::zeros(self.config.hidden_dim);
        if !self.config.use_scene {
            return Ok(zero);
        }
        let (x0, _) = scene_embed(&self.embedding, scene_feat)?;
        let (state, _, _) = lstm_step(&self.lstm, &zero, &x0)?;
        Ok(state)
    }

    /// One instance step fed with `prev_label` (vocabulary index, 0 = start).
    pub fn instance_step(
        &self,
        state: &LstmState,
        prev_label: usize,
        feat: &DenseVector,
    ) -> Result<(LstmState, Distribution)> {
        let onehot = DenseVector::one_hot(prev_label, self.config.label_vocab_dim())?;
        let (x, _) = joint_embed(&self.embedding, &onehot, feat)?;
        let (next, z, _) = lstm_step(&self.lstm, state, &x)?;
        let dist = classify(&self.classifier, &z)?;
        Ok((next, dist))
    }
}

/// Which previous label is fed at each training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFeeding {
    /// Ground-truth previous labels.
    #[default]
    TeacherForcing,
    /// Argmax of the previous step's distribution (lowest index on ties),
    /// treated as a constant by the backward pass.
    Predicted,
}

/// One photo prepared for training: instances in the order they are fed.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceItem {
    pub scene_feat: DenseVector,
    pub instance_feats: Vec<DenseVector>,
    /// Identity labels in `1..=num_identities`.
    pub labels: Vec<usize>,
    /// Fixed unroll length; positions past the real instances carry no loss.
    pub pad_to: usize,
}

impl SequenceItem {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Validation("sequence has no instances".into()));
        }
        if self.labels.len() != self.instance_feats.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} instances",
                self.labels.len(),
                self.instance_feats.len()
            )));
        }
        if self.labels.len() > self.pad_to {
            return Err(Error::Validation(format!(
                "{} instances exceed unroll length {}",
                self.labels.len(),
                self.pad_to
            )));
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l == START_LABEL || l > config.num_identities)
        {
            return Err(Error::Validation(format!(
                "label {bad} outside 1..={}",
                config.num_identities
            )));
        }
        Ok(())
    }
}

/// Everything the backward pass needs from a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    distributions: Vec<Distribution>,
    loss: f64,
    targets: Vec<usize>,
    outputs: Vec<DenseVector>,
    scene_cache: Option<SceneEmbedCache>,
    embed_caches: Vec<JointEmbedCache>,
    lstm_caches: Vec<LstmCache>,
}

impl ForwardTrace {
    /// One distribution per real instance, in sequence order.
    pub fn distributions(&self) -> &[Distribution] {
        &self.distributions
    }

    /// Sum of per-step negative log likelihoods.
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Number of steps that carry a loss term.
    pub fn num_steps(&self) -> usize {
        self.distributions.len()
    }
}

pub fn forward_train(params: &ModelParams, item: &SequenceItem) -> Result<ForwardTrace> {
    forward_train_with(params, item, LabelFeeding::TeacherForcing)
}

pub fn forward_train_with(
    params: &ModelParams,
    item: &SequenceItem,
    feeding: LabelFeeding,
) -> Result<ForwardTrace> {
    item.validate(&params.config)?;
    let cfg = &params.config;
    let n = item.len();
    let mut state = LstmState::zeros(cfg.hidden_dim);
    let mut lstm_caches = Vec::with_capacity(n + 1);

    let scene_cache = if cfg.use_scene {
        let (x0, cache) = scene_embed(&params.embedding, &item.scene_feat)?;
        let (next, _, lc) = lstm_step(&params.lstm, &state, &x0)?;
        state = next;
        lstm_caches.push(lc);
        Some(cache)
    } else {
        None
    };

    let mut distributions = Vec::with_capacity(n);
    let mut embed_caches = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut loss = 0.0;
    let mut prev = START_LABEL;
    // Steps past `n` are padding: nothing is computed for them.
    for (feat, &label) in item.instance_feats.iter().zip(&item.labels) {
        let onehot = DenseVector::one_hot(prev, cfg.label_vocab_dim())?;
        let (x, ec) = joint_embed(&params.embedding, &onehot, feat)?;
        let (next, z, lc) = lstm_step(&params.lstm, &state, &x)?;
        let dist = classify(&params.classifier, &z)?;
        let target = label - 1;
        loss += nll(&dist, target)?;
        prev = match feeding {
            LabelFeeding::TeacherForcing => label,
            LabelFeeding::Predicted => dist.argmax() + 1,
        };
        state = next;
        embed_caches.push(ec);
        lstm_caches.push(lc);
        outputs.push(z);
        targets.push(target);
        distributions.push(dist);
    }

    Ok(ForwardTrace {
        distributions,
        loss,
        targets,
        outputs,
        scene_cache,
        embed_caches,
        lstm_caches,
    })
}

/// Gradient of `trace.loss()` with respect to every parameter.
pub fn backward_train(params: &ModelParams, trace: &ForwardTrace) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    backward_train_into(params, trace, &mut grads)?;
    Ok(grads)
}

/// Like [`backward_train`] but accumulates into an existing buffer.
pub fn backward_train_into(
    params: &ModelParams,
    trace: &ForwardTrace,
    grads: &mut ModelParams,
) -> Result<()> {
    let hd = params.config.hidden_dim;
    let mut grad_z = Vec::with_capacity(trace.lstm_caches.len());
    if trace.scene_cache.is_some() {
        grad_z.push(DenseVector::zeros(hd));
    }
    for ((z, dist), &target) in trace
        .outputs
        .iter()
        .zip(&trace.distributions)
        .zip(&trace.targets)
    {
        grad_z.push(classify_backward(
            &params.classifier,
            z,
            dist,
            target,
            &mut grads.classifier,
        )?);
    }
    let grad_x = lstm_backward(&params.lstm, &trace.lstm_caches, &grad_z, &mut grads.lstm)?;
    let mut grad_x = grad_x.iter();
    if let Some(cache) = &trace.scene_cache {
        let g0 = grad_x.next().expect("scene step present");
        scene_embed_backward(cache, g0, &mut grads.embedding)?;
    }
    for (cache, gx) in trace.embed_caches.iter().zip(grad_x) {
        joint_embed_backward(&params.embedding, cache, gx, &mut grads.embedding)?;
    }
    Ok(())
}

/// `Σ_t ln p(y_t | ·)` under teacher forcing.
pub fn log_likelihood(params: &ModelParams, item: &SequenceItem) -> Result<f64> {
    Ok(-forward_train(params, item)?.loss())
}
