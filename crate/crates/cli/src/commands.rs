use std::collections::BTreeMap;
use std::path::Path;

use albumseq::checkpoint::Checkpoint;
use albumseq::data::{
    describe_splits, evaluate, generate_synthetic, write_photos, Direction, DirectionMetrics, GenConfig,
    MetricsReport, PhotoRecord,
};
use albumseq::experiment::{self, Method};
use albumseq::gradcheck::{run_gradcheck, GradcheckConfig};
use albumseq::inference::{
    fuse_predictions, predict_dataset, predicted_labels, prediction_records, PredictionRecord, RegionFusion,
};
use albumseq::seqmodel::ModelParams;
use albumseq::training::{train as train_model, TrainConfig};
use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use crate::config;
use crate::files::{self, create_dir, load_dataset_dir, prepare_region, write_atomic, write_json};
use crate::report::{MetricsFile, ResultFile, TrainFile};
use crate::Common;

const TOP_K: usize = 5;

pub fn gen(common: &Common) -> Result<()> {
    let cfg: GenConfig = config::load(common.config.as_deref(), &common.overrides, common.seed)?;
    let world = generate_synthetic(&cfg)?;
    create_dir(&common.out)?;
    for (split, photos) in [(0, &world.splits.set_0), (1, &world.splits.set_1)] {
        let mut buf = Vec::new();
        write_photos(&mut buf, photos, &world.vocab)?;
        write_atomic(&files::split_path(&common.out, split), &buf)?;
    }
    let vocab: String = world.vocab.names().iter().map(|n| format!("{n}\n")).collect();
    write_atomic(&common.out.join(files::VOCAB), vocab.as_bytes())?;
    write_json(&common.out.join(files::GEN_METADATA), &world.metadata)?;
    print!("{}", describe_splits(&world.splits));
    Ok(())
}

fn parse_splits(split: &str) -> Result<Vec<usize>> {
    Ok(match split {
        "0" => vec![0],
        "1" => vec![1],
        "both" => vec![0, 1],
        other => bail!("--split must be 0, 1 or both, got `{other}`"),
    })
}

fn split_photos(splits: &albumseq::data::SplitPair, split: usize) -> &[PhotoRecord] {
    if split == 0 {
        &splits.set_0
    } else {
        &splits.set_1
    }
}

pub fn train(common: &Common, data: &Path, split: &str) -> Result<()> {
    let cfg: TrainConfig = config::load(common.config.as_deref(), &common.overrides, common.seed)?;
    cfg.validate()?;
    let splits = parse_splits(split)?;
    let dataset = load_dataset_dir(data)?;
    let k = dataset.vocab.num_identities();
    let prepared: Vec<(usize, Vec<PhotoRecord>)> = splits
        .iter()
        .map(|&s| Ok((s, prepare_region(split_photos(&dataset.splits, s), &cfg.region)?)))
        .collect::<Result<_>>()?;
    create_dir(&common.out)?;

    for (s, photos) in prepared {
        let (params, report) = train_model(&photos, k, &cfg)?;
        let mut ckpt = Checkpoint::new(params);
        ckpt.metadata = BTreeMap::from([
            ("region".to_string(), cfg.region.clone()),
            ("split".to_string(), s.to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
            ("vocab_fingerprint".to_string(), dataset.fingerprint.clone()),
            ("train_config".to_string(), serde_json::to_string(&cfg)?),
        ]);
        let ckpt_name = files::checkpoint_name(&cfg.region, s);
        write_atomic(&common.out.join(&ckpt_name), &ckpt.to_bytes()?)?;

        let mut log = String::from("epoch\tlearning_rate\tmean_loss\n");
        for e in &report.epochs {
            log.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.learning_rate, e.mean_loss));
        }
        write_atomic(&common.out.join(files::train_log_name(&cfg.region, s)), log.as_bytes())?;
        let summary = ResultFile::Train(TrainFile {
            region: cfg.region.clone(),
            split: s,
            vocab_fingerprint: dataset.fingerprint.clone(),
            report: albumseq::training::TrainReport {
                checkpoint: Some(ckpt_name.clone()),
                ..report
            },
        });
        write_json(&common.out.join(files::train_report_name(&cfg.region, s)), &summary)?;
        println!("trained on split {s}: {ckpt_name}");
    }
    Ok(())
}

fn load_model(models: &Path, region: &str, split: usize, fingerprint: &str, sample: &[PhotoRecord]) -> Result<ModelParams> {
    let path = models.join(files::checkpoint_name(region, split));
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(fp) = ckpt.metadata.get("vocab_fingerprint") {
        ensure!(
            fp == fingerprint,
            "{} was trained with a different identity vocabulary",
            path.display()
        );
    }
    let c = &ckpt.params.config;
    if let Some(photo) = sample.first() {
        let feat_dim = photo.region_features(region)?.first().map(|f| f.dim()).unwrap_or(0);
        ensure!(
            feat_dim == c.feature_dim && photo.scene_feat.dim() == c.scene_dim,
            "{}: model expects `{region}` dim {} and scene dim {}, dataset has {} and {}",
            path.display(),
            c.feature_dim,
            c.scene_dim,
            feat_dim,
            photo.scene_feat.dim()
        );
    }
    Ok(ckpt.params)
}

#[derive(Serialize)]
struct DirectedRecord<'a> {
    direction: Direction,
    #[serde(flatten)]
    record: &'a PredictionRecord,
}

pub fn eval(common: &Common, data: &Path, models: &Path, budget: usize, fusion: &str, regions: &[String]) -> Result<()> {
    ensure!(budget >= 1, "--budget must be at least 1");
    let fusion: RegionFusion = fusion.parse()?;
    let regions: Vec<String> = if regions.is_empty() { vec!["head".into()] } else { regions.to_vec() };
    let seed = common.seed.unwrap_or(0);
    let dataset = load_dataset_dir(data)?;
    let k = dataset.vocab.num_identities();

    let mut directions = Vec::new();
    let mut lines = String::new();
    let mut method = None;
    for (direction, train_split, eval_split) in [(Direction::ZeroToOne, 0, 1), (Direction::OneToZero, 1, 0)] {
        let eval_set = split_photos(&dataset.splits, eval_split);
        let mut runs = Vec::new();
        for region in &regions {
            let photos = prepare_region(eval_set, region)?;
            let params = load_model(models, region, train_split, &dataset.fingerprint, &photos)?;
            ensure!(
                params.config.num_identities == k,
                "checkpoint has {} identities, vocabulary has {k}",
                params.config.num_identities
            );
            method.get_or_insert(if params.config.use_scene { Method::Ours } else { Method::OursRelation });
            runs.push(predict_dataset(&params, &photos, region, budget, seed)?);
        }
        let results = if runs.len() == 1 { runs.pop().expect("one run") } else { fuse_predictions(&runs, fusion)? };
        directions.push(DirectionMetrics {
            direction,
            metrics: evaluate(eval_set, &predicted_labels(&results))?,
        });
        for record in prediction_records(eval_set, &results, &dataset.vocab, TOP_K)? {
            lines.push_str(&serde_json::to_string(&DirectedRecord { direction, record: &record })?);
            lines.push('\n');
        }
    }
    let report = MetricsReport::from_directions(directions)?;
    let file = ResultFile::Metrics(MetricsFile {
        method: method.expect("at least one region").name().to_string(),
        regions: regions.clone(),
        fusion: (regions.len() > 1).then_some(fusion),
        seed,
        budget,
        vocab_fingerprint: dataset.fingerprint.clone(),
        report: report.clone(),
    });
    create_dir(&common.out)?;
    write_atomic(&common.out.join(files::PREDICTIONS), lines.as_bytes())?;
    write_json(&common.out.join(files::METRICS), &file)?;
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
    for d in &report.directions {
        let direction = serde_json::to_value(d.direction)?;
        println!(
            "{:<5} overall {} multi {} single {}",
            direction.as_str().unwrap_or("?"),
            pct(Some(d.metrics.acc_overall)),
            pct(d.metrics.acc_multi),
            pct(d.metrics.acc_single)
        );
    }
    println!(
        "mean  overall {} multi {} single {}",
        pct(Some(report.mean.acc_overall)),
        pct(report.mean.acc_multi),
        pct(report.mean.acc_single)
    );
    Ok(())
}

pub fn ablate(common: &Common, data: &Path, budget: usize) -> Result<()> {
    ensure!(budget >= 1, "--budget must be at least 1");
    let cfg: TrainConfig = config::load(common.config.as_deref(), &common.overrides, common.seed)?;
    cfg.validate()?;
    let dataset = load_dataset_dir(data)?;
    let splits = albumseq::data::SplitPair {
        set_0: prepare_region(&dataset.splits.set_0, &cfg.region)?,
        set_1: prepare_region(&dataset.splits.set_1, &cfg.region)?,
    };
    let table = experiment::ablate(&splits, dataset.vocab.num_identities(), &cfg, budget)?;
    create_dir(&common.out)?;
    for row in &table.rows {
        let file = ResultFile::Metrics(MetricsFile {
            method: row.method.name().to_string(),
            regions: vec![cfg.region.clone()],
            fusion: None,
            seed: cfg.seed,
            budget,
            vocab_fingerprint: dataset.fingerprint.clone(),
            report: row.report.clone(),
        });
        write_json(&common.out.join(format!("metrics_{}.json", row.method.name())), &file)?;
    }
    write_json(&common.out.join("ablation.json"), &table)?;
    let text = table.render();
    write_atomic(&common.out.join("ablation.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn gradcheck(common: &Common) -> Result<()> {
    let mut table = config::merged_table(common.config.as_deref(), &common.overrides, None)?;
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).context("seed out of range")?;
        table.insert("seeds".into(), toml::Value::Array(vec![toml::Value::Integer(seed)]));
    }
    let cfg: GradcheckConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    let report = run_gradcheck(&cfg)?;
    create_dir(&common.out)?;
    write_json(&common.out.join("gradcheck.json"), &report)?;
    print!("{}", report.render());
    ensure!(
        report.passed(),
        "gradient check failed for: {}",
        report.failures().join(", ")
    );
    Ok(())
}
