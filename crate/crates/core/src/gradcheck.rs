//! Finite-difference gradient suite over every layer and over the whole
//! model. Each block flattens its parameters (and differentiable inputs),
//! evaluates a scalar objective, and compares the analytic gradient against
//! central differences.
//!
//! Coordinates sitting on a ReLU kink (one-sided slopes disagree) are checked
//! against the interval spanned by the two one-sided slopes instead, since
//! any value in it is a valid subgradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    classify, classify_backward, joint_embed, joint_embed_backward, lstm_backward, lstm_step, scene_embed,
    scene_embed_backward, ClassifierParams, EmbeddingMode, EmbeddingParams, LstmCache, LstmParams, LstmState,
};
use crate::numcore::{nll, relative_error, DenseVector};
use crate::seqmodel::{backward_train, forward_train, ModelConfig, ModelParams, SequenceItem};

pub const MAX_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Shared size of every layer dimension.
    pub dim: usize,
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub step: f64,
    /// Check at all-zero parameters instead of random ones.
    pub zero_init: bool,
    /// Names a block whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            dim: 6,
            seeds: (0..10).collect(),
            tolerance: 1e-5,
            step: 1e-6,
            zero_init: false,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub block: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinates judged by the one-sided interval rule.
    pub kinks: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.passed).map(|b| b.block.as_str()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<28} {:>12.3e} {}\n",
                b.block,
                b.max_rel_error,
                if b.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Compares `analytic` with differences of `f` around `x`; returns the
/// worst error and the number of kink coordinates.
fn compare<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<(f64, usize)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::Shape(format!("{} gradient entries for {} inputs", analytic.len(), x.len())));
    }
    let f0 = f(x)?;
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let central = (up - down) / (2.0 * step);
        let (right, left) = ((up - f0) / step, (f0 - down) / step);
        let err = if (right - left).abs() > 1e-4 * central.abs().max(1.0) {
            kinks += 1;
            let (lo, hi) = if left < right { (left, right) } else { (right, left) };
            if analytic[i] < lo {
                relative_error(analytic[i], lo)
            } else if analytic[i] > hi {
                relative_error(analytic[i], hi)
            } else {
                0.0
            }
        } else {
            relative_error(analytic[i], central)
        };
        worst = worst.max(err);
    }
    Ok((worst, kinks))
}

struct Block {
    name: String,
    x: Vec<f64>,
    analytic: Vec<f64>,
    objective: Box<dyn Fn(&[f64]) -> Result<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn fill(rng: &mut ChaCha8Rng, slices: Vec<&mut [f64]>, zero: bool) {
    for s in slices {
        for v in s.iter_mut() {
            *v = if zero { 0.0 } else { rng.random_range(-1.0..1.0) };
        }
    }
}

fn split_off<'a>(x: &mut &'a [f64], n: usize) -> &'a [f64] {
    let (head, tail) = x.split_at(n);
    *x = tail;
    head
}

fn load(slices: Vec<&mut [f64]>, x: &mut &[f64]) {
    for s in slices {
        let n = s.len();
        s.copy_from_slice(split_off(x, n));
    }
}

fn joint_embed_block(mode: EmbeddingMode, d: usize, seed: u64, zero: bool) -> Result<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EmbeddingParams::zeros(d, d + 1, d, d, mode);
    let [l, f, _] = params.slices_mut();
    fill(&mut rng, vec![l, f], zero);
    let label = rng.random_range(0..=d);
    let onehot = DenseVector::one_hot(label, d + 1)?;
    let feat = DenseVector::new(uniform(&mut rng, d, 1.0));
    let w = DenseVector::new(uniform(&mut rng, d, 1.0));

    let (_, cache) = joint_embed(&params, &onehot, &feat)?;
    let mut grads = params.zeros_like();
    let dfeat = joint_embed_backward(&params, &cache, &w, &mut grads)?;
    let [gl, gf, _] = grads.slices();
    let analytic = [gl, gf, dfeat.as_slice()].concat();
    let [pl, pf, _] = params.slices();
    let x = [pl, pf, feat.as_slice()].concat();

    let objective = move |x: &[f64]| {
        let mut p = params.clone();
        let mut rest = x;
        let [l, f, _] = p.slices_mut();
        load(vec![l, f], &mut rest);
        let feat = DenseVector::new(rest.to_vec());
        let (out, _) = joint_embed(&p, &onehot, &feat)?;
        Ok(out.iter().zip(w.iter()).map(|(a, b)| a * b).sum())
    };
    Ok(Block {
        name: format!("joint_embed/{mode}"),
        x,
        analytic,
        objective: Box::new(objective),
    })
}

fn scene_block(d: usize, seed: u64, zero: bool) -> Result<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EmbeddingParams::zeros(d, d + 1, d, d, EmbeddingMode::Addition);
    fill(&mut rng, vec![params.scene.as_mut_slice()], zero);
    let scene = DenseVector::new(uniform(&mut rng, d, 1.0));
    let w = DenseVector::new(uniform(&mut rng, d, 1.0));
    let (_, cache) = scene_embed(&params, &scene)?;
    let mut grads = params.zeros_like();
    scene_embed_backward(&cache, &w, &mut grads)?;
    let analytic = grads.scene.as_slice().to_vec();
    let x = params.scene.as_slice().to_vec();
    let objective = move |x: &[f64]| {
        let mut p = params.clone();
        p.scene.as_mut_slice().copy_from_slice(x);
        let (out, _) = scene_embed(&p, &scene)?;
        Ok(out.iter().zip(w.iter()).map(|(a, b)| a * b).sum())
    };
    Ok(Block {
        name: "scene_embed".into(),
        x,
        analytic,
        objective: Box::new(objective),
    })
}

fn lstm_block(steps: usize, d: usize, seed: u64, zero: bool) -> Result<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = LstmParams::zeros(d, d);
    fill(&mut rng, params.slices_mut().into_iter().collect(), zero);
    let xs: Vec<DenseVector> = (0..steps).map(|_| DenseVector::new(uniform(&mut rng, d, 1.0))).collect();
    let ws: Vec<DenseVector> = (0..steps).map(|_| DenseVector::new(uniform(&mut rng, d, 1.0))).collect();

    fn run(p: &LstmParams, xs: &[DenseVector], ws: &[DenseVector]) -> Result<(f64, Vec<LstmCache>)> {
        let mut state = LstmState::zeros(p.hidden_dim());
        let mut total = 0.0;
        let mut caches = Vec::new();
        for (x, w) in xs.iter().zip(ws) {
            let (next, z, cache) = lstm_step(p, &state, x)?;
            total += z.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
            caches.push(cache);
            state = next;
        }
        Ok((total, caches))
    }
    let (_, caches) = run(&params, &xs, &ws)?;
    let mut grads = params.zeros_like();
    let dxs = lstm_backward(&params, &caches, &ws, &mut grads)?;
    let mut analytic: Vec<f64> = grads.slices().concat();
    let mut x: Vec<f64> = params.slices().concat();
    for (dx, xi) in dxs.iter().zip(&xs) {
        analytic.extend_from_slice(dx.as_slice());
        x.extend_from_slice(xi.as_slice());
    }
    let objective = move |x: &[f64]| {
        let mut p = params.clone();
        let mut rest = x;
        load(p.slices_mut().into_iter().collect(), &mut rest);
        let xs: Vec<DenseVector> = rest.chunks(d).map(|c| DenseVector::new(c.to_vec())).collect();
        Ok(run(&p, &xs, &ws)?.0)
    };
    Ok(Block {
        name: format!("lstm/{steps}"),
        x,
        analytic,
        objective: Box::new(objective),
    })
}

fn classifier_block(d: usize, seed: u64, zero: bool) -> Result<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ClassifierParams::zeros(d, d);
    fill(&mut rng, params.slices_mut().into_iter().collect(), zero);
    let z = DenseVector::new(uniform(&mut rng, d, 1.0));
    let target = rng.random_range(0..d);
    let dist = classify(&params, &z)?;
    let mut grads = params.zeros_like();
    let dz = classify_backward(&params, &z, &dist, target, &mut grads)?;
    let analytic = [grads.slices().concat(), dz.into_vec()].concat();
    let x = [params.slices().concat(), z.as_slice().to_vec()].concat();
    let objective = move |x: &[f64]| {
        let mut p = params.clone();
        let mut rest = x;
        load(p.slices_mut().into_iter().collect(), &mut rest);
        nll(&classify(&p, &DenseVector::new(rest.to_vec()))?, target)
    };
    Ok(Block {
        name: "classifier".into(),
        x,
        analytic,
        objective: Box::new(objective),
    })
}

fn model_block(mode: EmbeddingMode, use_scene: bool, n: usize, d: usize, seed: u64, zero: bool) -> Result<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        num_identities: d,
        feature_dim: d,
        scene_dim: d,
        embed_dim: d,
        hidden_dim: d,
        mode,
        use_scene,
    };
    let mut params = ModelParams::zeros(config)?;
    fill(&mut rng, params.slices_mut(), zero);
    let item = SequenceItem {
        scene_feat: DenseVector::new(uniform(&mut rng, d, 1.0)),
        instance_feats: (0..n).map(|_| DenseVector::new(uniform(&mut rng, d, 1.0))).collect(),
        labels: (0..n).map(|_| rng.random_range(1..=d)).collect(),
        pad_to: n,
    };
    let trace = forward_train(&params, &item)?;
    let analytic = backward_train(&params, &trace)?.to_flat();
    let x = params.to_flat();
    let objective = move |x: &[f64]| {
        let mut p = params.clone();
        p.load_flat(x)?;
        Ok(forward_train(&p, &item)?.loss())
    };
    let scene = if use_scene { "scene" } else { "no-scene" };
    Ok(Block {
        name: format!("model/{mode}/{scene}/n{n}"),
        x,
        analytic,
        objective: Box::new(objective),
    })
}

fn blocks_for(d: usize, seed: u64, zero: bool) -> Result<Vec<Block>> {
    let modes = [EmbeddingMode::Addition, EmbeddingMode::ElementwiseMax];
    let mut blocks = Vec::new();
    for mode in modes {
        blocks.push(joint_embed_block(mode, d, seed, zero)?);
    }
    blocks.push(scene_block(d, seed, zero)?);
    for steps in 1..=4 {
        blocks.push(lstm_block(steps, d, seed, zero)?);
    }
    blocks.push(classifier_block(d, seed, zero)?);
    for mode in modes {
        for use_scene in [true, false] {
            for n in 1..=3 {
                blocks.push(model_block(mode, use_scene, n, d, seed, zero)?);
            }
        }
    }
    Ok(blocks)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.dim == 0 || cfg.dim > MAX_DIM {
        return Err(Error::Config(format!("gradcheck dim must be in 1..={MAX_DIM}, got {}", cfg.dim)));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::Config("step and tolerance must be positive".into()));
    }
    let mut results: Vec<BlockResult> = Vec::new();
    for &seed in &cfg.seeds {
        for mut block in blocks_for(cfg.dim, seed, cfg.zero_init)? {
            if cfg.corrupt.as_deref().is_some_and(|c| block.name.starts_with(c)) {
                block.analytic[0] += 1.0;
            }
            let (err, kinks) = compare(&block.objective, &block.x, &block.analytic, cfg.step)?;
            match results.iter_mut().find(|r| r.block == block.name) {
                Some(r) => {
                    r.max_rel_error = r.max_rel_error.max(err);
                    r.coordinates += block.x.len();
                    r.kinks += kinks;
                }
                None => results.push(BlockResult {
                    block: block.name,
                    max_rel_error: err,
                    coordinates: block.x.len(),
                    kinks,
                    passed: true,
                }),
            }
        }
    }
    for r in &mut results {
        r.passed = r.max_rel_error <= cfg.tolerance;
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        blocks: results,
    })
}
