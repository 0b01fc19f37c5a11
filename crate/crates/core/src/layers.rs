//! Learnable blocks of the recurrent identity model: the joint label/feature
//! embedding, the scene projection, an LSTM cell, and the softmax classifier.
//!
//! Every forward function returns a cache; the matching backward function
//! consumes it and *accumulates* parameter gradients into a caller-owned
//! buffer of the same shape as the parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{sigmoid, softmax, DenseMatrix, DenseVector, Distribution};

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.08;
/// Initial value of every forget-gate bias.
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// How the previous-label embedding and the instance-feature embedding are
/// combined before the rectifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// `relu(U_y·y + U_b·φ)`
    Addition,
    /// `relu(max(U_y·y, U_b·φ))`
    #[serde(rename = "max")]
    ElementwiseMax,
}

impl std::fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbeddingMode::Addition => f.write_str("addition"),
            EmbeddingMode::ElementwiseMax => f.write_str("max"),
        }
    }
}

impl std::str::FromStr for EmbeddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addition" | "add" => Ok(EmbeddingMode::Addition),
            "max" | "elementwise_max" => Ok(EmbeddingMode::ElementwiseMax),
            other => Err(Error::Config(format!("unknown embedding mode `{other}`"))),
        }
    }
}

pub(crate) fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized by construction")
}

fn shape_check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("{what}: expected dim {expected}, got {got}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// Label embedding `U_y`, feature embedding `U_b`, and scene projection `U_I`.
///
/// Column 0 of `label` belongs to the auxiliary start label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub label: DenseMatrix,
    pub feature: DenseMatrix,
    pub scene: DenseMatrix,
    pub mode: EmbeddingMode,
}

impl EmbeddingParams {
    pub fn zeros(
        embed_dim: usize,
        label_vocab_dim: usize,
        feature_dim: usize,
        scene_dim: usize,
        mode: EmbeddingMode,
    ) -> Self {
        EmbeddingParams {
            label: DenseMatrix::zeros(embed_dim, label_vocab_dim),
            feature: DenseMatrix::zeros(embed_dim, feature_dim),
            scene: DenseMatrix::zeros(embed_dim, scene_dim),
            mode,
        }
    }

    pub fn random<R: Rng>(
        rng: &mut R,
        embed_dim: usize,
        label_vocab_dim: usize,
        feature_dim: usize,
        scene_dim: usize,
        mode: EmbeddingMode,
    ) -> Self {
        EmbeddingParams {
            label: uniform_matrix(rng, embed_dim, label_vocab_dim),
            feature: uniform_matrix(rng, embed_dim, feature_dim),
            scene: uniform_matrix(rng, embed_dim, scene_dim),
            mode,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.label.rows()
    }

    pub fn zeros_like(&self) -> Self {
        EmbeddingParams::zeros(
            self.label.rows(),
            self.label.cols(),
            self.feature.cols(),
            self.scene.cols(),
            self.mode,
        )
    }

    pub fn slices(&self) -> [&[f64]; 3] {
        [self.label.as_slice(), self.feature.as_slice(), self.scene.as_slice()]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.label.as_mut_slice(),
            self.feature.as_mut_slice(),
            self.scene.as_mut_slice(),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct JointEmbedCache {
    label_index: usize,
    feat: DenseVector,
    label_branch: DenseVector,
    feature_branch: DenseVector,
    output: DenseVector,
}

impl JointEmbedCache {
    pub fn output(&self) -> &DenseVector {
        &self.output
    }
}

/// Embeds the previous label (one-hot) jointly with the current instance
/// feature. The result is elementwise nonnegative.
pub fn joint_embed(
    params: &EmbeddingParams,
    prev_label: &DenseVector,
    feat: &DenseVector,
) -> Result<(DenseVector, JointEmbedCache)> {
    shape_check("label one-hot", params.label.cols(), prev_label.dim())?;
    let label_index = prev_label
        .one_hot_index()
        .ok_or_else(|| Error::Validation("previous label is not one-hot".into()))?;
    shape_check("instance feature", params.feature.cols(), feat.dim())?;

    let label_branch = params.label.column(label_index);
    let feature_branch = params.feature.matvec(feat)?;
    let output: DenseVector = label_branch
        .iter()
        .zip(feature_branch.iter())
        .map(|(&a, &b)| match params.mode {
            EmbeddingMode::Addition => (a + b).max(0.0),
            EmbeddingMode::ElementwiseMax => a.max(b).max(0.0),
        })
        .collect::<Vec<_>>()
        .into();

    let cache = JointEmbedCache {
        label_index,
        feat: feat.clone(),
        label_branch,
        feature_branch,
        output: output.clone(),
    };
    Ok((output, cache))
}

/// Backward of [`joint_embed`]. Accumulates into `grads.label` and
/// `grads.feature` and returns the gradient with respect to the feature.
///
/// In max mode each coordinate's gradient goes to the branch that attained
/// the maximum; on exact ties it goes to the label branch.
pub fn joint_embed_backward(
    params: &EmbeddingParams,
    cache: &JointEmbedCache,
    grad_out: &DenseVector,
    grads: &mut EmbeddingParams,
) -> Result<DenseVector> {
    shape_check("joint embedding gradient", params.embed_dim(), grad_out.dim())?;
    let dim = grad_out.dim();
    let mut to_label = DenseVector::zeros(dim);
    let mut to_feature = DenseVector::zeros(dim);
    for k in 0..dim {
        let (a, b) = (cache.label_branch[k], cache.feature_branch[k]);
        match params.mode {
            EmbeddingMode::Addition => {
                if a + b > 0.0 {
                    to_label[k] = grad_out[k];
                    to_feature[k] = grad_out[k];
                }
            }
            EmbeddingMode::ElementwiseMax => {
                if a >= b {
                    if a > 0.0 {
                        to_label[k] = grad_out[k];
                    }
                } else if b > 0.0 {
                    to_feature[k] = grad_out[k];
                }
            }
        }
    }
    grads.label.add_to_column(cache.label_index, &to_label);
    grads.feature.add_outer(&to_feature, &cache.feat);
    params.feature.matvec_transposed(&to_feature)
}

#[derive(Clone, Debug)]
pub struct SceneEmbedCache {
    input: DenseVector,
    pre_activation: DenseVector,
}

/// `relu(U_I · scene_feat)`: the input of the initial recurrent step.
pub fn scene_embed(
    params: &EmbeddingParams,
    scene_feat: &DenseVector,
) -> Result<(DenseVector, SceneEmbedCache)> {
    shape_check("scene feature", params.scene.cols(), scene_feat.dim())?;
    let pre_activation = params.scene.matvec(scene_feat)?;
    let output = crate::numcore::relu(&pre_activation);
    Ok((
        output,
        SceneEmbedCache {
            input: scene_feat.clone(),
            pre_activation,
        },
    ))
}

/// Backward of [`scene_embed`]; accumulates into `grads.scene`.
pub fn scene_embed_backward(
    cache: &SceneEmbedCache,
    grad_out: &DenseVector,
    grads: &mut EmbeddingParams,
) -> Result<()> {
    shape_check("scene embedding gradient", cache.pre_activation.dim(), grad_out.dim())?;
    let masked: DenseVector = grad_out
        .iter()
        .zip(cache.pre_activation.iter())
        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
        .collect::<Vec<_>>()
        .into();
    grads.scene.add_outer(&masked, &cache.input);
    Ok(())
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// Weights of a peephole-free LSTM cell. The four gate blocks are stacked
/// row-wise in the order input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input_weights: DenseMatrix,
    pub hidden_weights: DenseMatrix,
    pub bias: DenseVector,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            input_weights: DenseMatrix::zeros(4 * hidden_dim, input_dim),
            hidden_weights: DenseMatrix::zeros(4 * hidden_dim, hidden_dim),
            bias: DenseVector::zeros(4 * hidden_dim),
        }
    }

    /// Uniform weights, zero biases except the forget gate.
    pub fn random<R: Rng>(rng: &mut R, input_dim: usize, hidden_dim: usize) -> Self {
        let mut bias = DenseVector::zeros(4 * hidden_dim);
        for k in hidden_dim..2 * hidden_dim {
            bias[k] = FORGET_BIAS_INIT;
        }
        LstmParams {
            input_weights: uniform_matrix(rng, 4 * hidden_dim, input_dim),
            hidden_weights: uniform_matrix(rng, 4 * hidden_dim, hidden_dim),
            bias,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_weights.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.cols()
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.input_dim(), self.hidden_dim())
    }

    pub fn slices(&self) -> [&[f64]; 3] {
        [
            self.input_weights.as_slice(),
            self.hidden_weights.as_slice(),
            self.bias.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.input_weights.as_mut_slice(),
            self.hidden_weights.as_mut_slice(),
            self.bias.as_mut_slice(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: DenseVector,
    pub c: DenseVector,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        LstmState {
            h: DenseVector::zeros(hidden_dim),
            c: DenseVector::zeros(hidden_dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    x: DenseVector,
    h_prev: DenseVector,
    c_prev: DenseVector,
    input_gate: Vec<f64>,
    forget_gate: Vec<f64>,
    candidate: Vec<f64>,
    output_gate: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// One LSTM step. The returned output `z` is the new hidden state.
pub fn lstm_step(
    params: &LstmParams,
    state: &LstmState,
    x: &DenseVector,
) -> Result<(LstmState, DenseVector, LstmCache)> {
    let hd = params.hidden_dim();
    shape_check("lstm input", params.input_dim(), x.dim())?;
    shape_check("lstm hidden state", hd, state.h.dim())?;
    shape_check("lstm cell state", hd, state.c.dim())?;

    let mut pre = params.input_weights.matvec(x)?;
    pre.add_assign(&params.hidden_weights.matvec(&state.h)?);
    pre.add_assign(&params.bias);
    let pre = pre.as_slice();

    let input_gate: Vec<f64> = pre[..hd].iter().map(|&a| sigmoid(a)).collect();
    let forget_gate: Vec<f64> = pre[hd..2 * hd].iter().map(|&a| sigmoid(a)).collect();
    let candidate: Vec<f64> = pre[2 * hd..3 * hd].iter().map(|&a| a.tanh()).collect();
    let output_gate: Vec<f64> = pre[3 * hd..].iter().map(|&a| sigmoid(a)).collect();

    let c: Vec<f64> = (0..hd)
        .map(|k| forget_gate[k] * state.c[k] + input_gate[k] * candidate[k])
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..hd).map(|k| output_gate[k] * tanh_c[k]).collect();

    let new_state = LstmState {
        h: h.into(),
        c: c.into(),
    };
    let cache = LstmCache {
        x: x.clone(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        input_gate,
        forget_gate,
        candidate,
        output_gate,
        tanh_c,
    };
    let z = new_state.h.clone();
    Ok((new_state, z, cache))
}

/// Backpropagation through a contiguous unroll. `grad_outputs[t]` is the loss
/// gradient with respect to the output of step `t`; steps without a loss
/// term pass zeros. Returns the gradient with respect to each step input.
///
/// The initial state of the unroll is treated as a constant.
pub fn lstm_backward(
    params: &LstmParams,
    caches: &[LstmCache],
    grad_outputs: &[DenseVector],
    grads: &mut LstmParams,
) -> Result<Vec<DenseVector>> {
    if caches.len() != grad_outputs.len() {
        return Err(Error::Shape(format!(
            "{} caches but {} output gradients",
            caches.len(),
            grad_outputs.len()
        )));
    }
    let hd = params.hidden_dim();
    let mut dh_next = DenseVector::zeros(hd);
    let mut dc_next = vec![0.0; hd];
    let mut input_grads = vec![DenseVector::zeros(0); caches.len()];

    for t in (0..caches.len()).rev() {
        let cache = &caches[t];
        shape_check("lstm output gradient", hd, grad_outputs[t].dim())?;
        let mut dpre = DenseVector::zeros(4 * hd);
        for k in 0..hd {
            let dh = grad_outputs[t][k] + dh_next[k];
            let (i, f, g, o) = (
                cache.input_gate[k],
                cache.forget_gate[k],
                cache.candidate[k],
                cache.output_gate[k],
            );
            let tc = cache.tanh_c[k];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
            let d_o = dh * tc;
            let d_i = dc * g;
            let d_g = dc * i;
            let d_f = dc * cache.c_prev[k];
            dc_next[k] = dc * f;
            dpre[k] = d_i * i * (1.0 - i);
            dpre[hd + k] = d_f * f * (1.0 - f);
            dpre[2 * hd + k] = d_g * (1.0 - g * g);
            dpre[3 * hd + k] = d_o * o * (1.0 - o);
        }
        grads.input_weights.add_outer(&dpre, &cache.x);
        grads.hidden_weights.add_outer(&dpre, &cache.h_prev);
        grads.bias.add_assign(&dpre);
        input_grads[t] = params.input_weights.matvec_transposed(&dpre)?;
        dh_next = params.hidden_weights.matvec_transposed(&dpre)?;
    }
    Ok(input_grads)
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// Affine layer followed by softmax over the real identities. Output index
/// `k` corresponds to identity label `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
}

impl ClassifierParams {
    pub fn zeros(num_identities: usize, input_dim: usize) -> Self {
        ClassifierParams {
            weight: DenseMatrix::zeros(num_identities, input_dim),
            bias: DenseVector::zeros(num_identities),
        }
    }

    pub fn random<R: Rng>(rng: &mut R, num_identities: usize, input_dim: usize) -> Self {
        ClassifierParams {
            weight: uniform_matrix(rng, num_identities, input_dim),
            bias: DenseVector::zeros(num_identities),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierParams::zeros(self.num_classes(), self.input_dim())
    }

    pub fn slices(&self) -> [&[f64]; 2] {
        [self.weight.as_slice(), self.bias.as_slice()]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.as_mut_slice(), self.bias.as_mut_slice()]
    }
}

pub fn classify(params: &ClassifierParams, z: &DenseVector) -> Result<Distribution> {
    let mut logits = params.weight.matvec(z)?;
    logits.add_assign(&params.bias);
    Ok(softmax(&logits))
}

/// Gradient of `-ln dist[target]` through [`classify`]. Accumulates into
/// `grads` and returns the gradient with respect to `z`.
pub fn classify_backward(
    params: &ClassifierParams,
    z: &DenseVector,
    dist: &Distribution,
    target: usize,
    grads: &mut ClassifierParams,
) -> Result<DenseVector> {
    if target >= dist.dim() {
        return Err(Error::Index {
            index: target,
            dim: dist.dim(),
        });
    }
    let mut dlogits = DenseVector::new(dist.probs().to_vec());
    dlogits[target] -= 1.0;
    grads.weight.add_outer(&dlogits, z);
    grads.bias.add_assign(&dlogits);
    params.weight.matvec_transposed(&dlogits)
}
