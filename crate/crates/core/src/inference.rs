//! Test-time prediction. Each query instance is placed at the end of several
//! orderings of its photo; the other instances are labelled greedily along
//! the way and their predicted labels are fed forward. The query's
//! distributions from all orderings are fused by elementwise maximum.
//!
//! Also hosts the appearance-only baseline and multi-region fusion.

use std::collections::HashSet;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate, AccuracyBreakdown, LabelVocabulary, PhotoRecord};
use crate::error::{Error, Result};
use crate::layers::{classify, classify_backward, ClassifierParams};
use crate::numcore::{argmax, AdamState, DenseVector, Distribution};
use crate::seeding::{derive_seed, purpose, rng_for};
use crate::seqmodel::{ModelParams, START_LABEL};
use crate::training::{lr_schedule, TrainConfig};

pub const DEFAULT_BUDGET: usize = 24;

/// Orderings used to predict one query instance. Every ordering ends with
/// the query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderingPlan {
    pub query_index: usize,
    pub orderings: Vec<Vec<usize>>,
    pub exhaustive: bool,
}

fn factorial_at_most(n: usize, cap: usize) -> Option<usize> {
    let mut acc: usize = 1;
    for k in 2..=n {
        acc = acc.checked_mul(k)?;
        if acc > cap {
            return None;
        }
    }
    Some(acc)
}

/// All `(n-1)!` orderings when that is within `budget`, otherwise `budget`
/// distinct uniformly sampled ones.
pub fn make_orderings(n: usize, query_index: usize, budget: usize, seed: u64) -> Result<OrderingPlan> {
    if n == 0 {
        return Err(Error::Validation("photo has no instances".into()));
    }
    if budget == 0 {
        return Err(Error::Validation("ordering budget must be at least 1".into()));
    }
    if query_index >= n {
        return Err(Error::Index {
            index: query_index,
            dim: n,
        });
    }
    let others: Vec<usize> = (0..n).filter(|&i| i != query_index).collect();
    let with_query = |mut prefix: Vec<usize>| {
        prefix.push(query_index);
        prefix
    };

    if factorial_at_most(others.len(), budget).is_some() {
        let orderings = others
            .iter()
            .copied()
            .permutations(others.len())
            .map(with_query)
            .collect();
        return Ok(OrderingPlan {
            query_index,
            orderings,
            exhaustive: true,
        });
    }

    let mut rng = rng_for(seed, &[purpose::INFERENCE_ORDER, n as u64, query_index as u64]);
    let mut seen = HashSet::with_capacity(budget);
    let mut orderings = Vec::with_capacity(budget);
    while orderings.len() < budget {
        let mut prefix = others.clone();
        prefix.shuffle(&mut rng);
        if seen.insert(prefix.clone()) {
            orderings.push(with_query(prefix));
        }
    }
    Ok(OrderingPlan {
        query_index,
        orderings,
        exhaustive: false,
    })
}

/// Scene feature plus one feature vector per instance, in stored order.
#[derive(Clone, Debug)]
pub struct PhotoView<'a> {
    pub scene: &'a DenseVector,
    pub feats: Vec<&'a DenseVector>,
}

impl<'a> PhotoView<'a> {
    pub fn new(photo: &'a PhotoRecord, region: &str) -> Result<Self> {
        Ok(PhotoView {
            scene: &photo.scene_feat,
            feats: photo.region_features(region)?,
        })
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}

/// Runs one ordering, feeding each step's argmax label into the next step,
/// and returns the distribution at the last step.
pub fn run_sequence(params: &ModelParams, photo: &PhotoView<'_>, ordering: &[usize]) -> Result<Distribution> {
    if ordering.is_empty() {
        return Err(Error::Validation("empty ordering".into()));
    }
    let mut seen = vec![false; photo.len()];
    for &i in ordering {
        if i >= photo.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Validation(format!(
                "ordering {ordering:?} is not valid for a photo of {} instances",
                photo.len()
            )));
        }
    }
    let mut state = params.initial_state(photo.scene)?;
    let mut prev = START_LABEL;
    let mut last = None;
    for &i in ordering {
        let (next, dist) = params.instance_step(&state, prev, photo.feats[i])?;
        prev = dist.argmax() + 1;
        state = next;
        last = Some(dist);
    }
    Ok(last.expect("ordering is nonempty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    /// Elementwise max over orderings; not renormalized.
    pub fused: Vec<f64>,
    /// Identity label in `1..=K`.
    pub label: usize,
    pub orderings_used: usize,
}

/// Fuses the query-step distributions of a plan's orderings by elementwise max.
pub fn fuse_plan(params: &ModelParams, photo: &PhotoView<'_>, plan: &OrderingPlan) -> Result<InstancePrediction> {
    let mut fused = vec![f64::NEG_INFINITY; params.config.num_identities];
    for ordering in &plan.orderings {
        let dist = run_sequence(params, photo, ordering)?;
        for (f, &p) in fused.iter_mut().zip(dist.probs()) {
            *f = f.max(p);
        }
    }
    let label = argmax(&fused) + 1;
    Ok(InstancePrediction {
        fused,
        label,
        orderings_used: plan.orderings.len(),
    })
}

pub fn predict_instance(
    params: &ModelParams,
    photo: &PhotoView<'_>,
    query_index: usize,
    budget: usize,
    seed: u64,
) -> Result<InstancePrediction> {
    let plan = make_orderings(photo.len(), query_index, budget, seed)?;
    fuse_plan(params, photo, &plan)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub instances: Vec<InstancePrediction>,
}

impl PredictionResult {
    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }
}

/// Predicts every instance of a photo independently.
pub fn predict_photo(params: &ModelParams, photo: &PhotoView<'_>, budget: usize, seed: u64) -> Result<PredictionResult> {
    if photo.is_empty() {
        return Err(Error::Validation("photo has no instances".into()));
    }
    let instances = (0..photo.len())
        .map(|q| predict_instance(params, photo, q, budget, seed))
        .collect::<Result<_>>()?;
    Ok(PredictionResult { instances })
}

/// [`predict_photo`] over a dataset, in parallel. Photo `i` uses a seed
/// derived from `(seed, i)`.
pub fn predict_dataset(
    params: &ModelParams,
    photos: &[PhotoRecord],
    region: &str,
    budget: usize,
    seed: u64,
) -> Result<Vec<PredictionResult>> {
    photos
        .par_iter()
        .enumerate()
        .map(|(i, photo)| {
            let view = PhotoView::new(photo, region)?;
            predict_photo(params, &view, budget, derive_seed(seed, &[i as u64]))
        })
        .collect()
}

pub fn predicted_labels(results: &[PredictionResult]) -> Vec<Vec<usize>> {
    results.iter().map(PredictionResult::labels).collect()
}

// ---------------------------------------------------------------------------
// Region fusion
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionFusion {
    Avg,
    Max,
}

impl std::str::FromStr for RegionFusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(RegionFusion::Avg),
            "max" => Ok(RegionFusion::Max),
            other => Err(Error::Config(format!("unknown fusion `{other}` (avg|max)"))),
        }
    }
}

impl std::fmt::Display for RegionFusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegionFusion::Avg => "avg",
            RegionFusion::Max => "max",
        })
    }
}

/// Combines per-region score vectors for one instance and returns the fused
/// scores with their argmax label (1-based).
pub fn fuse_regions(per_region: &[&[f64]], mode: RegionFusion) -> Result<(Vec<f64>, usize)> {
    if per_region.len() < 2 {
        return Err(Error::Validation("region fusion needs at least two regions".into()));
    }
    let dim = per_region[0].len();
    if dim == 0 || per_region.iter().any(|d| d.len() != dim) {
        return Err(Error::Validation("region distributions cover different vocabularies".into()));
    }
    let fused: Vec<f64> = (0..dim)
        .map(|i| {
            let column = per_region.iter().map(|d| d[i]);
            match mode {
                RegionFusion::Avg => column.sum::<f64>() / per_region.len() as f64,
                RegionFusion::Max => column.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let label = argmax(&fused) + 1;
    Ok((fused, label))
}

/// Fuses whole-dataset predictions from several models (one per region).
pub fn fuse_predictions(runs: &[Vec<PredictionResult>], mode: RegionFusion) -> Result<Vec<PredictionResult>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Validation("no prediction runs to fuse".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Validation("prediction runs cover different photos".into()));
    }
    (0..first.len())
        .map(|p| {
            let n = first[p].instances.len();
            if runs.iter().any(|r| r[p].instances.len() != n) {
                return Err(Error::Validation(format!("photo {p}: instance counts differ across runs")));
            }
            let instances = (0..n)
                .map(|i| {
                    let scores: Vec<&[f64]> = runs.iter().map(|r| r[p].instances[i].fused.as_slice()).collect();
                    let (fused, label) = fuse_regions(&scores, mode)?;
                    Ok(InstancePrediction {
                        fused,
                        label,
                        orderings_used: runs.iter().map(|r| r[p].instances[i].orderings_used).max().unwrap_or(0),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(PredictionResult { instances })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Appearance-only baseline
// ---------------------------------------------------------------------------

/// Softmax classifier on instance features alone.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceModel {
    pub classifier: ClassifierParams,
    pub region: String,
}

impl AppearanceModel {
    pub fn predict(&self, feat: &DenseVector) -> Result<Distribution> {
        classify(&self.classifier, feat)
    }

    pub fn predict_photos(&self, photos: &[PhotoRecord]) -> Result<Vec<PredictionResult>> {
        photos
            .iter()
            .map(|photo| {
                let instances = photo
                    .region_features(&self.region)?
                    .into_iter()
                    .map(|f| {
                        let d = self.predict(f)?;
                        Ok(InstancePrediction {
                            label: d.argmax() + 1,
                            fused: d.probs().to_vec(),
                            orderings_used: 1,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(PredictionResult { instances })
            })
            .collect()
    }
}

/// Trains the appearance-only classifier with the same optimizer, schedule,
/// minibatching and seed as the sequence model.
pub fn train_appearance(photos: &[PhotoRecord], num_identities: usize, cfg: &TrainConfig) -> Result<AppearanceModel> {
    cfg.validate()?;
    check_labels(photos, num_identities)?;
    let feats: Vec<Vec<&DenseVector>> = photos
        .iter()
        .map(|p| p.region_features(&cfg.region))
        .collect::<Result<_>>()?;
    let dim = feats
        .first()
        .and_then(|f| f.first())
        .map(|f| f.dim())
        .ok_or_else(|| Error::Validation("empty training set".into()))?;
    if let Some(bad) = feats.iter().flatten().find(|f| f.dim() != dim) {
        return Err(Error::Shape(format!("feature dim {} differs from {dim}", bad.dim())));
    }

    let mut rng = rng_for(cfg.seed, &[purpose::APPEARANCE]);
    let mut classifier = ClassifierParams::random(&mut rng, num_identities, dim);
    let mut adam = AdamState::new(num_identities * dim + num_identities, cfg.learning_rate);
    let mut flat: Vec<f64> = classifier.slices().concat();

    for epoch in 0..cfg.total_epochs {
        adam.learning_rate = lr_schedule(cfg, epoch)?;
        let mut order: Vec<usize> = (0..photos.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[purpose::PHOTO_ORDER, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = classifier.zeros_like();
            let mut count = 0usize;
            for &p in batch {
                for (inst, feat) in photos[p].instances.iter().zip(&feats[p]) {
                    let dist = classify(&classifier, feat)?;
                    classify_backward(&classifier, feat, &dist, inst.label - 1, &mut grads)?;
                    count += 1;
                }
            }
            let mut g: Vec<f64> = grads.slices().concat();
            g.iter_mut().for_each(|x| *x /= count as f64);
            adam.step(&mut flat, &g)?;
            let (w, b) = flat.split_at(num_identities * dim);
            classifier.weight.as_mut_slice().copy_from_slice(w);
            classifier.bias.as_mut_slice().copy_from_slice(b);
        }
    }
    Ok(AppearanceModel {
        classifier,
        region: cfg.region.clone(),
    })
}

fn check_labels(photos: &[PhotoRecord], num_identities: usize) -> Result<()> {
    for p in photos {
        if let Some(inst) = p.instances.iter().find(|i| i.label == 0 || i.label > num_identities) {
            return Err(Error::Validation(format!(
                "photo {}: label {} is not in the shared vocabulary of {num_identities} identities",
                p.photo_id, inst.label
            )));
        }
    }
    Ok(())
}

/// Trains on `train`, scores `eval`. Both splits must use the same vocabulary.
pub fn appearance_only_train_eval(
    train: &[PhotoRecord],
    eval: &[PhotoRecord],
    num_identities: usize,
    cfg: &TrainConfig,
) -> Result<AccuracyBreakdown> {
    check_labels(eval, num_identities)?;
    let model = train_appearance(train, num_identities, cfg)?;
    evaluate(eval, &predicted_labels(&model.predict_photos(eval)?))
}

// ---------------------------------------------------------------------------
// Per-instance output records
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub label: String,
    pub score: f64,
}

/// One line of the per-instance predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub photo_id: String,
    pub instance_id: String,
    pub true_label: String,
    pub predicted_label: String,
    pub top: Vec<TopEntry>,
    pub orderings: usize,
}

pub fn prediction_records(
    photos: &[PhotoRecord],
    results: &[PredictionResult],
    vocab: &LabelVocabulary,
    top_k: usize,
) -> Result<Vec<PredictionRecord>> {
    if photos.len() != results.len() {
        return Err(Error::Validation("prediction count differs from photo count".into()));
    }
    let name = |l: usize| {
        vocab
            .name_of(l)
            .map(str::to_string)
            .ok_or_else(|| Error::Validation(format!("label {l} not in vocabulary")))
    };
    let mut out = Vec::new();
    for (photo, result) in photos.iter().zip(results) {
        for (inst, pred) in photo.instances.iter().zip(&result.instances) {
            let mut ranked: Vec<usize> = (0..pred.fused.len()).collect();
            // Stable sort keeps lower labels first among equal scores.
            ranked.sort_by(|&a, &b| pred.fused[b].total_cmp(&pred.fused[a]));
            let top = ranked
                .into_iter()
                .take(top_k)
                .map(|i| {
                    Ok(TopEntry {
                        label: name(i + 1)?,
                        score: pred.fused[i],
                    })
                })
                .collect::<Result<_>>()?;
            out.push(PredictionRecord {
                photo_id: photo.photo_id.clone(),
                instance_id: inst.instance_id.clone(),
                true_label: name(inst.label)?,
                predicted_label: name(pred.label)?,
                top,
                orderings: pred.orderings_used,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InstanceRecord;
    use crate::layers::EmbeddingMode;
    use crate::seqmodel::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn cfg(use_scene: bool) -> ModelConfig {
        ModelConfig {
            num_identities: 5,
            feature_dim: 4,
            scene_dim: 3,
            embed_dim: 6,
            hidden_dim: 6,
            mode: EmbeddingMode::Addition,
            use_scene,
        }
    }

    fn random_params(c: ModelConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(c).unwrap();
        let flat: Vec<f64> = (0..p.num_params()).map(|_| rng.random_range(-1.5..1.5)).collect();
        p.load_flat(&flat).unwrap();
        p
    }

    fn random_photo(n: usize, seed: u64) -> PhotoRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |d: usize| DenseVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        PhotoRecord {
            photo_id: format!("p{seed}"),
            scene_feat: v(3),
            instances: (0..n)
                .map(|i| InstanceRecord {
                    instance_id: format!("i{i}"),
                    label: 1 + i % 5,
                    region_feats: BTreeMap::from([("head".to_string(), v(4))]),
                })
                .collect(),
        }
    }

    #[test]
    fn ordering_examples() {
        let plan = make_orderings(1, 0, 5, 0).unwrap();
        assert_eq!(plan.orderings, vec![vec![0]]);
        assert!(plan.exhaustive);

        let plan = make_orderings(3, 1, 2, 0).unwrap();
        assert_eq!(plan.orderings, vec![vec![0, 2, 1], vec![2, 0, 1]]);
        assert!(plan.exhaustive);

        let plan = make_orderings(6, 4, 10, 7).unwrap();
        assert!(!plan.exhaustive);
        assert_eq!(plan.orderings.len(), 10);
        let distinct: HashSet<&Vec<usize>> = plan.orderings.iter().collect();
        assert_eq!(distinct.len(), 10);
        for o in &plan.orderings {
            assert_eq!(*o.last().unwrap(), 4);
            let mut sorted = o.clone();
            sorted.sort();
            assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        }
        assert_eq!(plan, make_orderings(6, 4, 10, 7).unwrap());

        assert!(make_orderings(3, 3, 5, 0).is_err());
        assert!(make_orderings(3, 0, 0, 0).is_err());
        assert_eq!(make_orderings(5, 0, 24, 0).unwrap().orderings.len(), 24);
        assert!(make_orderings(5, 0, 24, 0).unwrap().exhaustive);
        assert!(!make_orderings(6, 0, 24, 0).unwrap().exhaustive);
        assert!(make_orderings(40, 0, 3, 0).unwrap().orderings.len() == 3);
    }

    #[test]
    fn single_instance_sequence_is_single_step() {
        for use_scene in [false, true] {
            let p = random_params(cfg(use_scene), 1);
            let photo = random_photo(1, 2);
            let view = PhotoView::new(&photo, "head").unwrap();
            let dist = run_sequence(&p, &view, &[0]).unwrap();
            let state = p.initial_state(&photo.scene_feat).unwrap();
            let (_, expected) = p.instance_step(&state, START_LABEL, view.feats[0]).unwrap();
            assert_eq!(dist, expected);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = ModelParams::zeros(cfg(true)).unwrap();
        let photo = random_photo(4, 3);
        let view = PhotoView::new(&photo, "head").unwrap();
        let dist = run_sequence(&p, &view, &[2, 0, 3, 1]).unwrap();
        assert!(dist.probs().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let pred = predict_instance(&p, &view, 1, 24, 0).unwrap();
        assert_eq!(pred.label, 1);
    }

    #[test]
    fn run_sequence_validates_and_is_deterministic() {
        let p = random_params(cfg(true), 4);
        let photo = random_photo(3, 5);
        let view = PhotoView::new(&photo, "head").unwrap();
        let a = run_sequence(&p, &view, &[1, 2, 0]).unwrap();
        let b = run_sequence(&p, &view, &[1, 2, 0]).unwrap();
        assert_eq!(a.probs().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   b.probs().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(run_sequence(&p, &view, &[]).is_err());
        assert!(run_sequence(&p, &view, &[0, 0]).is_err());
        assert!(run_sequence(&p, &view, &[3]).is_err());
    }

    /// Independent enumeration: recursive permutation generation, greedy
    /// decoding re-implemented from the model's public step function.
    fn brute_force_fused(p: &ModelParams, photo: &PhotoRecord, query: usize) -> Vec<f64> {
        fn perms(items: &[usize]) -> Vec<Vec<usize>> {
            if items.is_empty() {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for (i, &x) in items.iter().enumerate() {
                let mut rest = items.to_vec();
                rest.remove(i);
                for mut tail in perms(&rest) {
                    tail.insert(0, x);
                    out.push(tail);
                }
            }
            out
        }
        let feats = photo.region_features("head").unwrap();
        let others: Vec<usize> = (0..photo.len()).filter(|&i| i != query).collect();
        let mut fused = vec![0.0f64; p.config.num_identities];
        for mut order in perms(&others) {
            order.push(query);
            let mut state = p.initial_state(&photo.scene_feat).unwrap();
            let mut prev = 0;
            let mut last = Vec::new();
            for &i in &order {
                let (next, dist) = p.instance_step(&state, prev, feats[i]).unwrap();
                let probs = dist.probs();
                let mut best = 0;
                for k in 0..probs.len() {
                    if probs[k] > probs[best] {
                        best = k;
                    }
                }
                prev = best + 1;
                state = next;
                last = probs.to_vec();
            }
            for (f, x) in fused.iter_mut().zip(last) {
                *f = f.max(x);
            }
        }
        fused
    }

    #[test]
    fn fused_matches_brute_force() {
        for n in 1..=4 {
            for seed in 0..5 {
                let p = random_params(cfg(seed % 2 == 0), 10 + seed);
                let photo = random_photo(n, 20 + seed);
                let view = PhotoView::new(&photo, "head").unwrap();
                for q in 0..n {
                    let pred = predict_instance(&p, &view, q, 24, seed).unwrap();
                    assert_eq!(pred.fused, brute_force_fused(&p, &photo, q));
                }
            }
        }
    }

    #[test]
    fn fusion_properties() {
        let p = random_params(cfg(true), 30);
        let photo = random_photo(4, 31);
        let view = PhotoView::new(&photo, "head").unwrap();
        let plan = make_orderings(4, 2, 24, 0).unwrap();
        let fused = fuse_plan(&p, &view, &plan).unwrap();
        for o in &plan.orderings {
            let d = run_sequence(&p, &view, o).unwrap();
            for (f, x) in fused.fused.iter().zip(d.probs()) {
                assert!(f >= x);
            }
        }
        let single = OrderingPlan { orderings: vec![plan.orderings[0].clone()], ..plan.clone() };
        let one = fuse_plan(&p, &view, &single).unwrap();
        assert_eq!(one.fused, run_sequence(&p, &view, &plan.orderings[0]).unwrap().probs());
        let mut doubled = plan.clone();
        doubled.orderings.push(plan.orderings[1].clone());
        let twice = fuse_plan(&p, &view, &doubled).unwrap();
        assert_eq!(twice.fused, fused.fused);
        assert_eq!(twice.label, fused.label);
    }

    #[test]
    fn photo_prediction_is_order_free_under_exhaustive_budget() {
        let p = random_params(cfg(true), 40);
        let photo = random_photo(4, 41);
        let base = predict_photo(&p, &PhotoView::new(&photo, "head").unwrap(), 24, 0).unwrap();
        assert_eq!(base.instances.len(), 4);
        let perm = [2, 0, 3, 1];
        let mut shuffled = photo.clone();
        shuffled.instances = perm.iter().map(|&i| photo.instances[i].clone()).collect();
        let other = predict_photo(&p, &PhotoView::new(&shuffled, "head").unwrap(), 24, 99).unwrap();
        for (new_pos, &old_pos) in perm.iter().enumerate() {
            assert_eq!(other.instances[new_pos].fused, base.instances[old_pos].fused);
        }
    }

    #[test]
    fn single_instance_budget_irrelevant() {
        let p = random_params(cfg(true), 50);
        let photo = random_photo(1, 51);
        let view = PhotoView::new(&photo, "head").unwrap();
        assert_eq!(
            predict_photo(&p, &view, 1, 0).unwrap(),
            predict_photo(&p, &view, 24, 5).unwrap()
        );
    }

    #[test]
    fn region_fusion_examples() {
        let (f, l) = fuse_regions(&[&[0.6, 0.4], &[0.2, 0.8]], RegionFusion::Avg).unwrap();
        assert!((f[0] - 0.4).abs() < 1e-15 && (f[1] - 0.6).abs() < 1e-15);
        assert_eq!(l, 2);
        let (f, l) = fuse_regions(&[&[0.6, 0.4], &[0.2, 0.8]], RegionFusion::Max).unwrap();
        assert_eq!((f, l), (vec![0.6, 0.8], 2));
        let (f, l) = fuse_regions(&[&[0.9, 0.1], &[0.4, 0.6]], RegionFusion::Avg).unwrap();
        assert!((f[0] - 0.65).abs() < 1e-15 && (f[1] - 0.35).abs() < 1e-15);
        assert_eq!(l, 1);
        let (f, l) = fuse_regions(&[&[0.9, 0.1], &[0.4, 0.6]], RegionFusion::Max).unwrap();
        assert_eq!((f, l), (vec![0.9, 0.6], 1));
        for mode in [RegionFusion::Avg, RegionFusion::Max] {
            assert_eq!(fuse_regions(&[&[0.1, 0.7, 0.2], &[0.1, 0.7, 0.2]], mode).unwrap().1, 2);
        }
        assert!(fuse_regions(&[&[0.5, 0.5]], RegionFusion::Avg).is_err());
        assert!(fuse_regions(&[&[0.5, 0.5], &[1.0]], RegionFusion::Max).is_err());
    }

    fn prototype_photos(n_photos: usize, seed: u64) -> Vec<PhotoRecord> {
        // Identity k has feature e_k; photos hold one or two instances.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_photos)
            .map(|p| {
                let n = 1 + p % 2;
                PhotoRecord {
                    photo_id: format!("p{p}"),
                    scene_feat: DenseVector::new(vec![0.0, 1.0]),
                    instances: (0..n)
                        .map(|i| {
                            let label = rng.random_range(1..=4);
                            let mut f = vec![0.0; 4];
                            f[label - 1] = 3.0;
                            InstanceRecord {
                                instance_id: format!("p{p}_{i}"),
                                label,
                                region_feats: BTreeMap::from([("head".to_string(), DenseVector::new(f))]),
                            }
                        })
                        .collect(),
                }
            })
            .collect()
    }

    #[test]
    fn appearance_baseline_learns_prototypes() {
        let photos = prototype_photos(60, 1);
        let cfg = TrainConfig {
            total_epochs: 30,
            decay_epoch: 20,
            learning_rate: 0.05,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let m = appearance_only_train_eval(&photos, &photos, 4, &cfg).unwrap();
        assert_eq!(m.acc_overall, 1.0);
        let mut bad = photos.clone();
        bad[0].instances[0].label = 9;
        assert!(appearance_only_train_eval(&photos, &bad, 4, &cfg).is_err());
    }

    #[test]
    fn zero_appearance_model_predicts_lowest_label() {
        let photos = prototype_photos(30, 2);
        let model = AppearanceModel {
            classifier: ClassifierParams::zeros(4, 4),
            region: "head".into(),
        };
        let preds = predicted_labels(&model.predict_photos(&photos).unwrap());
        assert!(preds.iter().flatten().all(|&l| l == 1));
        let m = evaluate(&photos, &preds).unwrap();
        let ones = photos.iter().flat_map(|p| p.labels()).filter(|&l| l == 1).count();
        let total: usize = photos.iter().map(|p| p.len()).sum();
        assert_eq!(m.acc_overall, ones as f64 / total as f64);
    }

    #[test]
    fn records_list_top_scores() {
        let photos = prototype_photos(3, 3);
        let vocab = LabelVocabulary::new((1..=4).map(|i| format!("n{i}")).collect()).unwrap();
        let model = AppearanceModel {
            classifier: ClassifierParams::zeros(4, 4),
            region: "head".into(),
        };
        let results = model.predict_photos(&photos).unwrap();
        let recs = prediction_records(&photos, &results, &vocab, 2).unwrap();
        assert_eq!(recs.len(), photos.iter().map(|p| p.len()).sum::<usize>());
        assert_eq!(recs[0].top.len(), 2);
        assert_eq!(recs[0].top[0].label, "n1");
        assert_eq!(recs[0].predicted_label, "n1");
    }
}
