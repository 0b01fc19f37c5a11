//! Photos, label vocabularies, the on-disk dataset format, accuracy metrics,
//! region concatenation, and the synthetic album generator.
//!
//! # Dataset file
//!
//! One JSON object per line:
//!
//! ```json
//! {"photo_id":"s0_p000001","scene":[0.12,-1.5],
//!  "instances":[{"instance_id":"s0_p000001_i0","label":"id_007",
//!                "regions":{"head":[...],"upper":[...]}}]}
//! ```
//!
//! Labels are identity names resolved through the vocabulary file, which
//! lists one name per line; line `k` (1-based) is identity index `k`. Index
//! 0 is the implicit start label and never appears in either file. Floats
//! are written in shortest round-trip form, so save/load is bit-exact.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::DenseVector;
use crate::seeding::{purpose, rng_for};

/// Region name produced by [`concat_regions`].
pub const CONCAT_REGION: &str = "concat";

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub instance_id: String,
    /// Identity index in `1..=K`.
    pub label: usize,
    pub region_feats: BTreeMap<String, DenseVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhotoRecord {
    pub photo_id: String,
    pub scene_feat: DenseVector,
    pub instances: Vec<InstanceRecord>,
}

impl PhotoRecord {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// Feature vectors of `region`, one per instance in stored order.
    pub fn region_features(&self, region: &str) -> Result<Vec<&DenseVector>> {
        self.instances
            .iter()
            .map(|inst| {
                inst.region_feats.get(region).ok_or_else(|| {
                    Error::Validation(format!(
                        "photo {} instance {} has no region `{region}`",
                        self.photo_id, inst.instance_id
                    ))
                })
            })
            .collect()
    }

    pub fn region_names(&self) -> BTreeSet<&str> {
        self.instances
            .first()
            .map(|i| i.region_feats.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    fn check_shape(&self) -> std::result::Result<(), String> {
        if self.instances.is_empty() {
            return Err(format!("photo {} has no instances", self.photo_id));
        }
        let regions: Vec<&String> = self.instances[0].region_feats.keys().collect();
        if regions.is_empty() {
            return Err(format!("photo {} has instances without regions", self.photo_id));
        }
        for inst in &self.instances {
            if !inst.region_feats.keys().eq(regions.iter().copied()) {
                return Err(format!(
                    "photo {}: instance {} has a different region set",
                    self.photo_id, inst.instance_id
                ));
            }
            if inst.region_feats.values().any(|v| !v.is_finite() || v.dim() == 0) {
                return Err(format!(
                    "photo {}: instance {} has an empty or non-finite feature",
                    self.photo_id, inst.instance_id
                ));
            }
        }
        if !self.scene_feat.is_finite() || self.scene_feat.dim() == 0 {
            return Err(format!("photo {} has an empty or non-finite scene feature", self.photo_id));
        }
        Ok(())
    }
}

/// Identity names; index `k ≥ 1` is `names[k - 1]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name.contains(['\n', '\r']) || name.trim() != name {
                return Err(Error::Validation(format!("invalid identity name {name:?}")));
            }
            if index.insert(name.clone(), i + 1).is_some() {
                return Err(Error::Validation(format!("duplicate identity name `{name}`")));
            }
        }
        Ok(LabelVocabulary { names, index })
    }

    pub fn num_identities(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name_of(&self, label: usize) -> Option<&str> {
        label.checked_sub(1).and_then(|i| self.names.get(i)).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for n in &self.names {
            text.push_str(n);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut names = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let name = line.trim();
            let fail = |message: String| Error::Load {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            if name.is_empty() {
                return Err(fail("empty identity name".into()));
            }
            if !seen.insert(name.to_string()) {
                return Err(fail(format!("duplicate identity name `{name}`")));
            }
            names.push(name.to_string());
        }
        LabelVocabulary::new(names)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhotoLine {
    photo_id: String,
    scene: DenseVector,
    instances: Vec<InstanceLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceLine {
    instance_id: String,
    label: String,
    regions: BTreeMap<String, DenseVector>,
}

/// Writes photos in the line-delimited dataset format.
pub fn write_photos<W: Write>(mut out: W, photos: &[PhotoRecord], vocab: &LabelVocabulary) -> Result<()> {
    let mut buf = String::new();
    for photo in photos {
        let line = PhotoLine {
            photo_id: photo.photo_id.clone(),
            scene: photo.scene_feat.clone(),
            instances: photo
                .instances
                .iter()
                .map(|inst| {
                    Ok(InstanceLine {
                        instance_id: inst.instance_id.clone(),
                        label: vocab
                            .name_of(inst.label)
                            .ok_or_else(|| {
                                Error::Validation(format!(
                                    "photo {}: label {} not in vocabulary",
                                    photo.photo_id, inst.label
                                ))
                            })?
                            .to_string(),
                        regions: inst.region_feats.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        };
        buf.clear();
        buf.push_str(&serde_json::to_string(&line).map_err(|e| Error::Validation(e.to_string()))?);
        buf.push('\n');
        out.write_all(buf.as_bytes())
            .map_err(|e| Error::io("<dataset writer>", e))?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, photos: &[PhotoRecord], vocab: &LabelVocabulary) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_photos(&mut w, photos, vocab)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a dataset file against a known vocabulary.
pub fn read_photos(path: &Path, vocab: &LabelVocabulary) -> Result<Vec<PhotoRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut photos = Vec::new();
    let mut scene_dim: Option<usize> = None;
    let mut region_dims: BTreeMap<String, usize> = BTreeMap::new();
    let mut ids = HashSet::new();

    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let fail = |message: String| Error::Load {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PhotoLine = serde_json::from_str(&line).map_err(|e| fail(format!("parse error: {e}")))?;
        let instances = parsed
            .instances
            .into_iter()
            .map(|inst| {
                let label = vocab
                    .index_of(&inst.label)
                    .ok_or_else(|| fail(format!("unknown label `{}`", inst.label)))?;
                Ok(InstanceRecord {
                    instance_id: inst.instance_id,
                    label,
                    region_feats: inst.regions,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let photo = PhotoRecord {
            photo_id: parsed.photo_id,
            scene_feat: parsed.scene,
            instances,
        };
        photo.check_shape().map_err(fail)?;
        if !ids.insert(photo.photo_id.clone()) {
            return Err(fail(format!("duplicate photo id {}", photo.photo_id)));
        }
        match scene_dim {
            None => scene_dim = Some(photo.scene_feat.dim()),
            Some(d) if d != photo.scene_feat.dim() => {
                return Err(fail(format!(
                    "photo {}: scene dim {} but dataset uses {d}",
                    photo.photo_id,
                    photo.scene_feat.dim()
                )))
            }
            _ => {}
        }
        for inst in &photo.instances {
            for (region, feat) in &inst.region_feats {
                let expected = *region_dims.entry(region.clone()).or_insert(feat.dim());
                if expected != feat.dim() {
                    return Err(fail(format!(
                        "photo {}: region `{region}` has dim {} but dataset uses {expected}",
                        photo.photo_id,
                        feat.dim()
                    )));
                }
            }
        }
        photos.push(photo);
    }
    Ok(photos)
}

/// Loads a dataset file together with its vocabulary file.
pub fn load_dataset(path: &Path, vocab_path: &Path) -> Result<(Vec<PhotoRecord>, LabelVocabulary)> {
    let vocab = LabelVocabulary::load(vocab_path)?;
    let photos = read_photos(path, &vocab)?;
    Ok((photos, vocab))
}

/// Replaces each instance's regions with a single [`CONCAT_REGION`] holding
/// the named regions' features concatenated in `order`.
pub fn concat_regions(photo: &PhotoRecord, order: &[&str]) -> Result<PhotoRecord> {
    if order.is_empty() {
        return Err(Error::Validation("no regions to concatenate".into()));
    }
    let feats: Vec<Vec<&DenseVector>> = order
        .iter()
        .map(|r| photo.region_features(r))
        .collect::<Result<_>>()?;
    let instances = photo
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let joined: Vec<f64> = feats
                .iter()
                .flat_map(|per_region| per_region[i].iter().copied())
                .collect();
            InstanceRecord {
                instance_id: inst.instance_id.clone(),
                label: inst.label,
                region_feats: BTreeMap::from([(CONCAT_REGION.to_string(), joined.into())]),
            }
        })
        .collect();
    Ok(PhotoRecord {
        photo_id: photo.photo_id.clone(),
        scene_feat: photo.scene_feat.clone(),
        instances,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Accuracy over all instances, instances of multi-person photos, and
/// instances of single-person photos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBreakdown {
    pub acc_overall: f64,
    pub acc_multi: Option<f64>,
    pub acc_single: Option<f64>,
    pub n_overall: usize,
    pub n_multi: usize,
    pub n_single: usize,
    pub correct_multi: usize,
    pub correct_single: usize,
}

/// Scores predicted labels (one list per photo, in stored instance order).
pub fn evaluate(truth: &[PhotoRecord], predictions: &[Vec<usize>]) -> Result<AccuracyBreakdown> {
    if truth.len() != predictions.len() {
        return Err(Error::Validation(format!(
            "{} photos but {} prediction lists",
            truth.len(),
            predictions.len()
        )));
    }
    let (mut n_multi, mut n_single, mut correct_multi, mut correct_single) = (0, 0, 0, 0);
    for (photo, preds) in truth.iter().zip(predictions) {
        if preds.len() != photo.len() {
            return Err(Error::Validation(format!(
                "photo {}: {} predictions for {} instances",
                photo.photo_id,
                preds.len(),
                photo.len()
            )));
        }
        let correct = photo
            .instances
            .iter()
            .zip(preds)
            .filter(|(inst, &p)| inst.label == p)
            .count();
        if photo.len() >= 2 {
            n_multi += photo.len();
            correct_multi += correct;
        } else {
            n_single += photo.len();
            correct_single += correct;
        }
    }
    let n_overall = n_multi + n_single;
    if n_overall == 0 {
        return Err(Error::Validation("no instances to evaluate".into()));
    }
    let ratio = |c: usize, n: usize| (n > 0).then(|| c as f64 / n as f64);
    Ok(AccuracyBreakdown {
        acc_overall: (correct_multi + correct_single) as f64 / n_overall as f64,
        acc_multi: ratio(correct_multi, n_multi),
        acc_single: ratio(correct_single, n_single),
        n_overall,
        n_multi,
        n_single,
        correct_multi,
        correct_single,
    })
}

/// Which split trained the model and which was evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "0->1")]
    ZeroToOne,
    #[serde(rename = "1->0")]
    OneToZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub direction: Direction,
    pub metrics: AccuracyBreakdown,
}

/// Unweighted mean of the two protocol directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanAccuracy {
    pub acc_overall: f64,
    pub acc_multi: Option<f64>,
    pub acc_single: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub directions: Vec<DirectionMetrics>,
    pub mean: MeanAccuracy,
}

impl MetricsReport {
    pub fn from_directions(directions: Vec<DirectionMetrics>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Validation("no directions to report".into()));
        }
        let mean_of = |f: &dyn Fn(&AccuracyBreakdown) -> Option<f64>| {
            let vals: Vec<f64> = directions.iter().filter_map(|d| f(&d.metrics)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mean = MeanAccuracy {
            acc_overall: mean_of(&|m| Some(m.acc_overall)).expect("nonempty"),
            acc_multi: mean_of(&|m| m.acc_multi),
            acc_single: mean_of(&|m| m.acc_single),
        };
        Ok(MetricsReport { directions, mean })
    }
}

/// Table-1 style counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub photos: usize,
    pub instances: usize,
    pub identities: usize,
    pub multi_instance_photos: usize,
    pub multi_instances: usize,
}

pub fn split_stats(photos: &[PhotoRecord]) -> SplitStats {
    let identities: HashSet<usize> = photos
        .iter()
        .flat_map(|p| p.instances.iter().map(|i| i.label))
        .collect();
    let multi: Vec<&PhotoRecord> = photos.iter().filter(|p| p.len() >= 2).collect();
    SplitStats {
        photos: photos.len(),
        instances: photos.iter().map(PhotoRecord::len).sum(),
        identities: identities.len(),
        multi_instance_photos: multi.len(),
        multi_instances: multi.iter().map(|p| p.len()).sum(),
    }
}

// ---------------------------------------------------------------------------
// Synthetic albums
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_identities: usize,
    pub num_groups: usize,
    pub num_scenes: usize,
    pub feature_dim: usize,
    pub scene_feature_dim: usize,
    /// Standard deviation of identity and scene prototype coordinates.
    pub prototype_scale: f64,
    /// Standard deviation of per-instance appearance noise.
    pub noise_scale: f64,
    /// Standard deviation of per-photo scene-feature noise.
    pub scene_noise_scale: f64,
    /// Probability that each instance is drawn from the photo's group.
    pub co_occurrence_strength: f64,
    /// Probability that a photo's group is one with affinity to its scene.
    pub scene_affinity_strength: f64,
    pub photos_per_split: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Body regions; each gets its own prototypes and independent noise.
    pub regions: Vec<String>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_identities: 40,
            num_groups: 8,
            num_scenes: 8,
            feature_dim: 32,
            scene_feature_dim: 16,
            prototype_scale: 1.0,
            noise_scale: 1.5,
            scene_noise_scale: 0.5,
            co_occurrence_strength: 0.9,
            scene_affinity_strength: 0.0,
            photos_per_split: 1000,
            min_instances: 1,
            max_instances: 4,
            regions: vec!["head".into(), "upper".into()],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_identities == 0 || self.num_groups == 0 || self.num_scenes == 0 {
            return bad("identities, groups and scenes must all be positive".into());
        }
        if self.num_groups > self.num_identities {
            return bad(format!(
                "num_groups {} exceeds num_identities {}",
                self.num_groups, self.num_identities
            ));
        }
        if self.feature_dim < 2 || self.scene_feature_dim < 2 {
            return bad("feature dims must be at least 2".into());
        }
        for (name, s) in [
            ("co_occurrence_strength", self.co_occurrence_strength),
            ("scene_affinity_strength", self.scene_affinity_strength),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("{name} must lie in [0, 1], got {s}"));
            }
        }
        for (name, s) in [
            ("prototype_scale", self.prototype_scale),
            ("noise_scale", self.noise_scale),
            ("scene_noise_scale", self.scene_noise_scale),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {s}"));
            }
        }
        if self.photos_per_split == 0 {
            return bad("photos_per_split must be positive".into());
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad(format!(
                "invalid instance range {}..={}",
                self.min_instances, self.max_instances
            ));
        }
        if self.max_instances > self.num_identities {
            return bad(format!(
                "max_instances {} exceeds num_identities {}: identities cannot repeat within a photo",
                self.max_instances, self.num_identities
            ));
        }
        if self.co_occurrence_strength == 1.0 {
            let smallest = self.num_identities / self.num_groups;
            if self.max_instances > smallest {
                return bad(format!(
                    "co_occurrence_strength 1 needs groups of at least {} identities, smallest has {smallest}",
                    self.max_instances
                ));
            }
        }
        if self.regions.is_empty() {
            return bad("at least one region is required".into());
        }
        let unique: HashSet<&String> = self.regions.iter().collect();
        if unique.len() != self.regions.len() || self.regions.iter().any(|r| r.is_empty()) {
            return bad("region names must be unique and nonempty".into());
        }
        Ok(())
    }

    /// Group of identity `label` (1-based): contiguous balanced blocks.
    pub fn group_of(&self, label: usize) -> usize {
        (label - 1) * self.num_groups / self.num_identities
    }

    /// Scene with affinity to `group`.
    pub fn scene_of_group(&self, group: usize) -> usize {
        group % self.num_scenes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPair {
    pub set_0: Vec<PhotoRecord>,
    pub set_1: Vec<PhotoRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotoTruth {
    pub photo_id: String,
    pub scene: usize,
    pub group: usize,
}

/// Hidden variables of a generated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenMetadata {
    pub config: GenConfig,
    /// Group of identity `k` at position `k - 1`.
    pub identity_groups: Vec<usize>,
    /// Affinity scene of each group.
    pub group_scenes: Vec<usize>,
    pub photos_0: Vec<PhotoTruth>,
    pub photos_1: Vec<PhotoTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub splits: SplitPair,
    pub vocab: LabelVocabulary,
    pub metadata: GenMetadata,
}

fn gaussian_vector<R: Rng>(rng: &mut R, dim: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; dim];
    }
    let normal = Normal::new(0.0, std).expect("finite nonnegative std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn add_noise<R: Rng>(rng: &mut R, prototype: &[f64], std: f64) -> DenseVector {
    let noise = gaussian_vector(rng, prototype.len(), std);
    prototype
        .iter()
        .zip(noise)
        .map(|(p, n)| p + n)
        .collect::<Vec<_>>()
        .into()
}

/// Draws a world (prototypes, groups, scene affinities) and two splits of
/// photos from it.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let k = cfg.num_identities;
    let mut world_rng = rng_for(cfg.seed, &[purpose::GEN_WORLD]);

    // prototypes[region][identity - 1]
    let prototypes: Vec<Vec<Vec<f64>>> = cfg
        .regions
        .iter()
        .map(|_| {
            (0..k)
                .map(|_| gaussian_vector(&mut world_rng, cfg.feature_dim, cfg.prototype_scale))
                .collect()
        })
        .collect();
    let scene_prototypes: Vec<Vec<f64>> = (0..cfg.num_scenes)
        .map(|_| gaussian_vector(&mut world_rng, cfg.scene_feature_dim, cfg.prototype_scale))
        .collect();

    let identity_groups: Vec<usize> = (1..=k).map(|l| cfg.group_of(l)).collect();
    let group_members: Vec<Vec<usize>> = (0..cfg.num_groups)
        .map(|g| (1..=k).filter(|&l| identity_groups[l - 1] == g).collect())
        .collect();
    let group_scenes: Vec<usize> = (0..cfg.num_groups).map(|g| cfg.scene_of_group(g)).collect();
    let scene_groups: Vec<Vec<usize>> = (0..cfg.num_scenes)
        .map(|s| (0..cfg.num_groups).filter(|&g| group_scenes[g] == s).collect())
        .collect();

    let vocab = LabelVocabulary::new((1..=k).map(|l| format!("id_{l:03}")).collect())?;

    let make_split = |split: u64| -> (Vec<PhotoRecord>, Vec<PhotoTruth>) {
        let mut photos = Vec::with_capacity(cfg.photos_per_split);
        let mut truths = Vec::with_capacity(cfg.photos_per_split);
        for p in 0..cfg.photos_per_split {
            let mut rng = rng_for(cfg.seed, &[purpose::GEN_PHOTO, split, p as u64]);
            let scene = rng.random_range(0..cfg.num_scenes);
            let group = match scene_groups[scene].choose(&mut rng) {
                Some(&g) if rng.random::<f64>() < cfg.scene_affinity_strength => g,
                _ => rng.random_range(0..cfg.num_groups),
            };
            let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
            let mut used: Vec<usize> = Vec::with_capacity(n);
            for _ in 0..n {
                let from_group: Vec<usize> = group_members[group]
                    .iter()
                    .copied()
                    .filter(|l| !used.contains(l))
                    .collect();
                let pick_group = rng.random::<f64>() < cfg.co_occurrence_strength;
                let label = if pick_group && !from_group.is_empty() {
                    *from_group.choose(&mut rng).expect("nonempty")
                } else {
                    let pool: Vec<usize> = (1..=k).filter(|l| !used.contains(l)).collect();
                    *pool.choose(&mut rng).expect("max_instances <= num_identities")
                };
                used.push(label);
            }
            let photo_id = format!("s{split}_p{p:06}");
            let instances = used
                .iter()
                .enumerate()
                .map(|(i, &label)| InstanceRecord {
                    instance_id: format!("{photo_id}_i{i}"),
                    label,
                    region_feats: cfg
                        .regions
                        .iter()
                        .zip(&prototypes)
                        .map(|(name, protos)| {
                            (name.clone(), add_noise(&mut rng, &protos[label - 1], cfg.noise_scale))
                        })
                        .collect(),
                })
                .collect();
            let scene_feat = add_noise(&mut rng, &scene_prototypes[scene], cfg.scene_noise_scale);
            truths.push(PhotoTruth {
                photo_id: photo_id.clone(),
                scene,
                group,
            });
            photos.push(PhotoRecord {
                photo_id,
                scene_feat,
                instances,
            });
        }
        (photos, truths)
    };

    let (set_0, photos_0) = make_split(0);
    let (set_1, photos_1) = make_split(1);
    Ok(SyntheticWorld {
        splits: SplitPair { set_0, set_1 },
        vocab,
        metadata: GenMetadata {
            config: cfg.clone(),
            identity_groups,
            group_scenes,
            photos_0,
            photos_1,
        },
    })
}

/// Mean over multi-instance photos of the share of instances belonging to
/// the photo's most common group.
pub fn group_purity(photos: &[PhotoRecord], identity_groups: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for photo in photos.iter().filter(|p| p.len() >= 2) {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for inst in &photo.instances {
            *counts.entry(identity_groups[inst.label - 1]).or_default() += 1;
        }
        let top = counts.values().copied().max().unwrap_or(0);
        total += top as f64 / photo.len() as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Multi-line human-readable summary of a split pair.
pub fn describe_splits(splits: &SplitPair) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "split  photos  instances  identities  multi_photos  multi_instances");
    for (name, set) in [("set_0", &splits.set_0), ("set_1", &splits.set_1)] {
        let s = split_stats(set);
        let _ = writeln!(
            out,
            "{name:<6} {:>6}  {:>9}  {:>10}  {:>12}  {:>15}",
            s.photos, s.instances, s.identities, s.multi_instance_photos, s.multi_instances
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig {
            photos_per_split: 50,
            feature_dim: 4,
            scene_feature_dim: 3,
            ..GenConfig::default()
        }
    }

    fn photo(id: &str, labels: &[usize], dim: usize) -> PhotoRecord {
        PhotoRecord {
            photo_id: id.into(),
            scene_feat: DenseVector::new(vec![0.5; 2]),
            instances: labels
                .iter()
                .enumerate()
                .map(|(i, &l)| InstanceRecord {
                    instance_id: format!("{id}_{i}"),
                    label: l,
                    region_feats: BTreeMap::from([
                        ("head".to_string(), DenseVector::new(vec![l as f64; dim])),
                        ("upper".to_string(), DenseVector::new(vec![-(l as f64); dim])),
                    ]),
                })
                .collect(),
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        for p in a.splits.set_0.iter().chain(&a.splits.set_1) {
            assert!(p.check_shape().is_ok());
            let labels: HashSet<usize> = p.labels().into_iter().collect();
            assert_eq!(labels.len(), p.len(), "repeated identity in {}", p.photo_id);
            assert!(p.labels().iter().all(|&l| (1..=40).contains(&l)));
        }
        let c = generate_synthetic(&GenConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.splits, c.splits);
    }

    #[test]
    fn full_co_occurrence_keeps_photos_in_one_group() {
        let cfg = GenConfig {
            co_occurrence_strength: 1.0,
            ..small_cfg()
        };
        let world = generate_synthetic(&cfg).unwrap();
        for p in world.splits.set_0.iter().chain(&world.splits.set_1) {
            let groups: HashSet<usize> = p.labels().iter().map(|&l| cfg.group_of(l)).collect();
            assert_eq!(groups.len(), 1);
        }
    }

    #[test]
    fn zero_noise_gives_identical_features() {
        let cfg = GenConfig {
            noise_scale: 0.0,
            ..small_cfg()
        };
        let world = generate_synthetic(&cfg).unwrap();
        let mut seen: HashMap<(usize, String), DenseVector> = HashMap::new();
        for p in world.splits.set_0.iter().chain(&world.splits.set_1) {
            for inst in &p.instances {
                for (r, f) in &inst.region_feats {
                    let prev = seen.entry((inst.label, r.clone())).or_insert_with(|| f.clone());
                    assert_eq!(prev, f);
                }
            }
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let too_many = GenConfig {
            max_instances: 41,
            ..GenConfig::default()
        };
        assert!(generate_synthetic(&too_many).is_err());
        assert!(GenConfig { photos_per_split: 0, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { num_groups: 41, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { co_occurrence_strength: 1.5, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { feature_dim: 1, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig {
            co_occurrence_strength: 1.0,
            num_groups: 20,
            ..GenConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let world = generate_synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("set_0.jsonl");
        let vocab = dir.path().join("vocab.txt");
        save_dataset(&data, &world.splits.set_0, &world.vocab).unwrap();
        world.vocab.save(&vocab).unwrap();
        let (photos, v) = load_dataset(&data, &vocab).unwrap();
        assert_eq!(v, world.vocab);
        assert_eq!(photos, world.splits.set_0);
    }

    #[test]
    fn awkward_floats_survive_roundtrip() {
        let vocab = LabelVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let mut p = photo("x", &[1, 2], 3);
        let awkward = [0.1 + 0.2, 1e-308, -2.2250738585072014e-308, 5e-324, 1.7976931348623157e308, 1.0 / 3.0];
        p.scene_feat = DenseVector::new(awkward.to_vec());
        p.instances[0].region_feats.insert("head".into(), DenseVector::new(awkward[..3].to_vec()));
        let mut buf = Vec::new();
        write_photos(&mut buf, std::slice::from_ref(&p), &vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, &buf).unwrap();
        let back = read_photos(&path, &vocab).unwrap();
        for (a, b) in back[0].scene_feat.iter().zip(p.scene_feat.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back[0], p);
    }

    fn write_lines(lines: &[String]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    #[test]
    fn load_errors_name_the_line() {
        let vocab = LabelVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let mut good = Vec::new();
        write_photos(&mut good, &[photo("p1", &[1], 16)], &vocab).unwrap();
        let good = String::from_utf8(good).unwrap().trim_end().to_string();

        let empty = r#"{"photo_id":"p2","scene":[1.0,2.0],"instances":[]}"#.to_string();
        let (_d, path) = write_lines(&[good.clone(), empty]);
        match read_photos(&path, &vocab) {
            Err(Error::Load { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("p2"), "{message}");
            }
            other => panic!("expected load error, got {other:?}"),
        }

        let mut small = Vec::new();
        write_photos(&mut small, &[photo("p3", &[2], 8)], &vocab).unwrap();
        let (_d, path) = write_lines(&[good.clone(), String::from_utf8(small).unwrap()]);
        match read_photos(&path, &vocab) {
            Err(Error::Load { line: 2, message, .. }) => assert!(message.contains("dim 8")),
            other => panic!("expected dimension error, got {other:?}"),
        }

        let unknown = good.replace("\"label\":\"a\"", "\"label\":\"zed\"");
        let (_d, path) = write_lines(&[unknown]);
        assert!(matches!(read_photos(&path, &vocab), Err(Error::Load { line: 1, .. })));

        let (_d, path) = write_lines(&["{not json".to_string()]);
        assert!(matches!(read_photos(&path, &vocab), Err(Error::Load { line: 1, .. })));

        let (_d, path) = write_lines(&[good.clone(), good]);
        assert!(matches!(read_photos(&path, &vocab), Err(Error::Load { line: 2, .. })));
    }

    #[test]
    fn vocabulary_file_rules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        std::fs::write(&path, "alice\nbob\n").unwrap();
        let v = LabelVocabulary::load(&path).unwrap();
        assert_eq!(v.index_of("bob"), Some(2));
        assert_eq!(v.name_of(1), Some("alice"));
        assert_eq!(v.name_of(0), None);
        std::fs::write(&path, "alice\nalice\n").unwrap();
        assert!(matches!(LabelVocabulary::load(&path), Err(Error::Load { line: 2, .. })));
    }

    #[test]
    fn concat_examples() {
        let p = photo("c", &[1, 2], 8);
        let single = concat_regions(&p, &["head"]).unwrap();
        for (a, b) in single.instances.iter().zip(&p.instances) {
            assert_eq!(a.region_feats[CONCAT_REGION], b.region_feats["head"]);
        }
        let both = concat_regions(&p, &["head", "upper"]).unwrap();
        let f = &both.instances[1].region_feats[CONCAT_REGION];
        assert_eq!(f.dim(), 16);
        assert_eq!(&f.as_slice()[..8], p.instances[1].region_feats["head"].as_slice());
        assert_eq!(&f.as_slice()[8..], p.instances[1].region_feats["upper"].as_slice());
        assert!(concat_regions(&p, &["head", "legs"]).is_err());
        assert!(concat_regions(&p, &[]).is_err());
    }

    #[test]
    fn metric_examples() {
        let truth = vec![photo("a", &[1, 2, 3], 2), photo("b", &[4], 2)];
        let m = evaluate(&truth, &[vec![1, 2, 1], vec![4]]).unwrap();
        assert_eq!(m.acc_overall, 0.75);
        assert_eq!(m.acc_multi, Some(2.0 / 3.0));
        assert_eq!(m.acc_single, Some(1.0));

        let singles = vec![photo("a", &[1], 2), photo("b", &[2], 2)];
        let m = evaluate(&singles, &[vec![1], vec![1]]).unwrap();
        assert_eq!(m.acc_multi, None);
        assert_eq!(m.n_multi, 0);
        assert_eq!(Some(m.acc_overall), m.acc_single);

        let mixed = vec![photo("a", &[1, 2], 2), photo("b", &[3], 2)];
        let m = evaluate(&mixed, &[vec![1, 1], vec![3]]).unwrap();
        let weighted = (2.0 * m.acc_multi.unwrap() + m.acc_single.unwrap()) / 3.0;
        assert!((m.acc_overall - weighted).abs() < 1e-12);

        assert!(evaluate(&mixed, &[vec![1, 1]]).is_err());
        assert!(evaluate(&mixed, &[vec![1], vec![3]]).is_err());
    }

    #[test]
    fn protocol_mean_is_average() {
        let truth = vec![photo("a", &[1, 2], 2), photo("b", &[3], 2)];
        let d0 = evaluate(&truth, &[vec![1, 2], vec![1]]).unwrap();
        let d1 = evaluate(&truth, &[vec![2, 2], vec![3]]).unwrap();
        let report = MetricsReport::from_directions(vec![
            DirectionMetrics { direction: Direction::ZeroToOne, metrics: d0.clone() },
            DirectionMetrics { direction: Direction::OneToZero, metrics: d1.clone() },
        ])
        .unwrap();
        assert!((report.mean.acc_overall - (d0.acc_overall + d1.acc_overall) / 2.0).abs() < 1e-12);
        assert_eq!(report.mean.acc_single, Some(0.5));
    }

    /// Wilson–Hilferty approximation of the chi-square upper quantile.
    fn chi_square_critical(df: f64, z: f64) -> f64 {
        let a = 2.0 / (9.0 * df);
        df * (1.0 - a + z * a.sqrt()).powi(3)
    }

    #[test]
    fn no_context_means_uniform_pairs() {
        let cfg = GenConfig {
            co_occurrence_strength: 0.0,
            scene_affinity_strength: 0.0,
            photos_per_split: 5000,
            feature_dim: 2,
            scene_feature_dim: 2,
            regions: vec!["head".into()],
            seed: 11,
            ..GenConfig::default()
        };
        let world = generate_synthetic(&cfg).unwrap();
        let k = cfg.num_identities;
        let mut counts = vec![0usize; k * k];
        let mut pairs = 0usize;
        for p in world.splits.set_0.iter().chain(&world.splits.set_1) {
            let labels = p.labels();
            for i in 0..labels.len() {
                for j in i + 1..labels.len() {
                    let (a, b) = (labels[i].min(labels[j]), labels[i].max(labels[j]));
                    counts[(a - 1) * k + (b - 1)] += 1;
                    pairs += 1;
                }
            }
        }
        let cells = k * (k - 1) / 2;
        let expected = pairs as f64 / cells as f64;
        let mut stat = 0.0;
        for a in 0..k {
            for b in a + 1..k {
                let o = counts[a * k + b] as f64;
                stat += (o - expected).powi(2) / expected;
            }
        }
        // z for the 0.99 quantile of a standard normal.
        let critical = chi_square_critical((cells - 1) as f64, 2.326_347_874);
        assert!(stat < critical, "chi-square {stat} >= {critical}");
    }

    #[test]
    fn purity_rises_with_co_occurrence() {
        let purity_at = |c: f64| {
            let cfg = GenConfig {
                co_occurrence_strength: c,
                photos_per_split: 5000,
                feature_dim: 2,
                scene_feature_dim: 2,
                regions: vec!["head".into()],
                seed: 5,
                ..GenConfig::default()
            };
            let world = generate_synthetic(&cfg).unwrap();
            let mut all = world.splits.set_0.clone();
            all.extend(world.splits.set_1.iter().cloned());
            group_purity(&all, &world.metadata.identity_groups)
        };
        let (p0, p5, p10) = (purity_at(0.0), purity_at(0.5), purity_at(1.0));
        assert!(p10 >= p5 && p5 >= p0, "{p0} {p5} {p10}");
        assert_eq!(p10, 1.0);
    }
}
