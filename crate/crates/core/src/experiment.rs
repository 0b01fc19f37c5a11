//! Two-direction evaluation protocol and the method ablation: train on one
//! split, evaluate on the other, then swap and average.

use serde::{Deserialize, Serialize};

use crate::data::{evaluate, AccuracyBreakdown, Direction, DirectionMetrics, MetricsReport, PhotoRecord, SplitPair};
use crate::error::{Error, Result};
use crate::inference::{
    fuse_predictions, predict_dataset, predicted_labels, train_appearance, PredictionResult, RegionFusion,
};
use crate::training::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Softmax classifier on instance features.
    AppearanceOnly,
    /// Sequence model without the scene step.
    OursRelation,
    /// Sequence model with the scene step.
    Ours,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::AppearanceOnly, Method::OursRelation, Method::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Method::AppearanceOnly => "appearance-only",
            Method::OursRelation => "ours-relation",
            Method::Ours => "ours",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn directions(splits: &SplitPair) -> [(Direction, &[PhotoRecord], &[PhotoRecord]); 2] {
    [
        (Direction::ZeroToOne, &splits.set_0, &splits.set_1),
        (Direction::OneToZero, &splits.set_1, &splits.set_0),
    ]
}

/// Trains `method` on `train_set` and returns its predictions on `eval_set`.
pub fn method_predictions(
    train_set: &[PhotoRecord],
    eval_set: &[PhotoRecord],
    num_identities: usize,
    method: Method,
    cfg: &TrainConfig,
    budget: usize,
) -> Result<Vec<PredictionResult>> {
    match method {
        Method::AppearanceOnly => train_appearance(train_set, num_identities, cfg)?.predict_photos(eval_set),
        Method::OursRelation | Method::Ours => {
            let cfg = TrainConfig {
                use_scene: method == Method::Ours,
                ..cfg.clone()
            };
            let (params, _) = train(train_set, num_identities, &cfg)?;
            predict_dataset(&params, eval_set, &cfg.region, budget, cfg.seed)
        }
    }
}

pub fn run_method(
    splits: &SplitPair,
    num_identities: usize,
    method: Method,
    cfg: &TrainConfig,
    budget: usize,
) -> Result<MetricsReport> {
    let per_direction = directions(splits)
        .into_iter()
        .map(|(direction, train_set, eval_set)| {
            let preds = method_predictions(train_set, eval_set, num_identities, method, cfg, budget)?;
            Ok(DirectionMetrics {
                direction,
                metrics: evaluate(eval_set, &predicted_labels(&preds))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_directions(per_direction)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub report: MetricsReport,
}

/// One row per method, in the order of [`Method::ALL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, method: Method) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.report)
    }

    /// Plain-text table of mean overall/multi/single accuracy in percent.
    pub fn render(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = format!("{:<16} {:>8} {:>8} {:>8}\n", "method", "overall", "multi", "single");
        for row in &self.rows {
            let m = &row.report.mean;
            out.push_str(&format!(
                "{:<16} {:>8} {:>8} {:>8}\n",
                row.method.name(),
                pct(Some(m.acc_overall)),
                pct(m.acc_multi),
                pct(m.acc_single)
            ));
        }
        out
    }
}

pub fn ablate(splits: &SplitPair, num_identities: usize, cfg: &TrainConfig, budget: usize) -> Result<AblationTable> {
    let rows = Method::ALL
        .into_iter()
        .map(|method| {
            Ok(AblationRow {
                method,
                report: run_method(splits, num_identities, method, cfg, budget)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { rows })
}

/// Per-region results plus both fusions, each under the two-direction protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub regions: Vec<(String, MetricsReport)>,
    pub avg: MetricsReport,
    pub max: MetricsReport,
}

/// Trains one full model per region and compares single regions with
/// Avg and Max fusion of their fused-over-orderings scores.
pub fn region_fusion(
    splits: &SplitPair,
    num_identities: usize,
    regions: &[String],
    cfg: &TrainConfig,
    budget: usize,
) -> Result<FusionReport> {
    if regions.len() < 2 {
        return Err(Error::Validation("region fusion needs at least two regions".into()));
    }
    let mut single: Vec<Vec<DirectionMetrics>> = vec![Vec::new(); regions.len()];
    let mut avg = Vec::new();
    let mut max = Vec::new();
    for (direction, train_set, eval_set) in directions(splits) {
        let runs = regions
            .iter()
            .map(|region| {
                let cfg = TrainConfig {
                    region: region.clone(),
                    ..cfg.clone()
                };
                method_predictions(train_set, eval_set, num_identities, Method::Ours, &cfg, budget)
            })
            .collect::<Result<Vec<_>>>()?;
        let score = |preds: &[PredictionResult]| -> Result<AccuracyBreakdown> {
            evaluate(eval_set, &predicted_labels(preds))
        };
        for (slot, run) in single.iter_mut().zip(&runs) {
            slot.push(DirectionMetrics {
                direction,
                metrics: score(run)?,
            });
        }
        avg.push(DirectionMetrics {
            direction,
            metrics: score(&fuse_predictions(&runs, RegionFusion::Avg)?)?,
        });
        max.push(DirectionMetrics {
            direction,
            metrics: score(&fuse_predictions(&runs, RegionFusion::Max)?)?,
        });
    }
    Ok(FusionReport {
        regions: regions
            .iter()
            .cloned()
            .zip(single)
            .map(|(r, d)| Ok((r, MetricsReport::from_directions(d)?)))
            .collect::<Result<_>>()?,
        avg: MetricsReport::from_directions(avg)?,
        max: MetricsReport::from_directions(max)?,
    })
}
