//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! Synthetic experiments use a pinned configuration: 40 identities in 8
//! groups, 8-dim instance features with noise 0.85 (Appearance-only lands
//! at roughly 65-69% overall), 5000 photos per split, 32-dim embedding and
//! LSTM, learning rate 0.001 for 30 epochs then 0.0001 for 10 more, budget
//! 24, seeds 0, 1, 2.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use albumseq::data::{generate_synthetic, GenConfig, MetricsReport, PhotoRecord};
use albumseq::experiment::{region_fusion, run_method, Method};
use albumseq::gradcheck::{run_gradcheck, GradcheckConfig};
use albumseq::inference::{predict_instance, PhotoView};
use albumseq::layers::EmbeddingMode;
use albumseq::numcore::DenseVector;
use albumseq::seqmodel::{backward_train, forward_train, ModelConfig, ModelParams, SequenceItem};
use albumseq::training::TrainConfig;

const SEEDS: [u64; 3] = [0, 1, 2];
const BUDGET: usize = 24;
const TEN_MINUTES: Duration = Duration::from_secs(600);

fn standard_gen(seed: u64) -> GenConfig {
    GenConfig {
        num_identities: 40,
        num_groups: 8,
        num_scenes: 8,
        feature_dim: 8,
        co_occurrence_strength: 0.9,
        scene_affinity_strength: 0.0,
        noise_scale: 0.85,
        photos_per_split: 5000,
        seed,
        ..GenConfig::default()
    }
}

fn standard_train(seed: u64) -> TrainConfig {
    TrainConfig {
        embed_dim: 32,
        hidden_dim: 32,
        learning_rate: 0.001,
        total_epochs: 40,
        decay_epoch: 30,
        seed,
        ..TrainConfig::default()
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pts(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Runs `method` on the world of each seed and keeps the reports.
struct Runs {
    reports: HashMap<(String, Method, u64), MetricsReport>,
}

impl Runs {
    fn run(&mut self, tag: &str, gen: impl Fn(u64) -> GenConfig, method: Method, train: impl Fn(u64) -> TrainConfig) -> Vec<MetricsReport> {
        SEEDS
            .iter()
            .map(|&seed| {
                let key = (tag.to_string(), method, seed);
                if let Some(r) = self.reports.get(&key) {
                    return r.clone();
                }
                let world = generate_synthetic(&gen(seed)).expect("valid generator config");
                let report = run_method(&world.splits, 40, method, &train(seed), BUDGET).expect("experiment runs");
                self.reports.insert(key, report.clone());
                report
            })
            .collect()
    }
}

fn overall(rs: &[MetricsReport]) -> f64 {
    mean(&rs.iter().map(|r| r.mean.acc_overall).collect::<Vec<_>>())
}

fn multi(rs: &[MetricsReport]) -> f64 {
    mean(&rs.iter().map(|r| r.mean.acc_multi.expect("multi-instance photos")).collect::<Vec<_>>())
}

fn single(rs: &[MetricsReport]) -> f64 {
    mean(&rs.iter().map(|r| r.mean.acc_single.expect("single-instance photos")).collect::<Vec<_>>())
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for dim in [4, 6, 8] {
        let report = run_gradcheck(&GradcheckConfig {
            dim,
            seeds: (0..10).collect(),
            ..GradcheckConfig::default()
        })
        .expect("gradcheck runs");
        worst = report.blocks.iter().fold(worst, |w, b| w.max(b.max_rel_error));
        failures.extend(report.failures().into_iter().map(|f| format!("{f}@{dim}")));
    }
    outcome(
        failures.is_empty(),
        format!("max relative error {worst:.2e} over dims 4/6/8 x 10 seeds; failing: {failures:?}"),
    )
}

fn small_photos(seed: u64, n_max: usize) -> Vec<PhotoRecord> {
    generate_synthetic(&GenConfig {
        num_identities: 6,
        num_groups: 2,
        num_scenes: 2,
        feature_dim: 5,
        scene_feature_dim: 4,
        max_instances: n_max,
        photos_per_split: 20,
        seed,
        ..GenConfig::default()
    })
    .expect("valid config")
    .splits
    .set_0
}

fn strong_params(mode: EmbeddingMode, use_scene: bool, seed: u64) -> ModelParams {
    let config = ModelConfig {
        num_identities: 6,
        feature_dim: 5,
        scene_dim: 4,
        embed_dim: 7,
        hidden_dim: 7,
        mode,
        use_scene,
    };
    let mut p = ModelParams::init(config, seed).expect("valid model config");
    p.scale(12.0);
    p
}

fn padding() -> Outcome {
    let mut checked = 0;
    for seed in 0..5 {
        for mode in [EmbeddingMode::Addition, EmbeddingMode::ElementwiseMax] {
            for use_scene in [true, false] {
                let params = strong_params(mode, use_scene, seed);
                for photo in small_photos(seed, 4) {
                    let item = |pad_to| SequenceItem {
                        scene_feat: photo.scene_feat.clone(),
                        instance_feats: photo.region_features("head").unwrap().into_iter().cloned().collect::<Vec<DenseVector>>(),
                        labels: photo.labels(),
                        pad_to,
                    };
                    let short = forward_train(&params, &item(photo.len())).unwrap();
                    let long = forward_train(&params, &item(22)).unwrap();
                    let g_short = backward_train(&params, &short).unwrap().to_flat();
                    let g_long = backward_train(&params, &long).unwrap().to_flat();
                    let same = short.loss().to_bits() == long.loss().to_bits()
                        && g_short.iter().map(|x| x.to_bits()).eq(g_long.iter().map(|x| x.to_bits()));
                    if !same {
                        return outcome(false, format!("photo {} differs (seed {seed}, {mode}, scene {use_scene})", photo.photo_id));
                    }
                    checked += 1;
                }
            }
        }
    }
    outcome(true, format!("{checked} photos bit-identical at T_max = N and 22"))
}

fn brute_force(params: &ModelParams, photo: &PhotoRecord, query: usize) -> Vec<f64> {
    fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(i);
            for mut tail in permutations(rest) {
                tail.insert(0, head);
                out.push(tail);
            }
        }
        out
    }
    let feats = photo.region_features("head").unwrap();
    let others = (0..photo.len()).filter(|&i| i != query).collect();
    let mut fused = vec![f64::NEG_INFINITY; params.config.num_identities];
    for mut order in permutations(others) {
        order.push(query);
        let mut state = params.initial_state(&photo.scene_feat).unwrap();
        let mut prev = 0;
        let mut probs = Vec::new();
        for &i in &order {
            let (next, dist) = params.instance_step(&state, prev, feats[i]).unwrap();
            probs = dist.probs().to_vec();
            let mut best = 0;
            for (k, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = k;
                }
            }
            prev = best + 1;
            state = next;
        }
        for (f, p) in fused.iter_mut().zip(probs) {
            *f = f.max(p);
        }
    }
    fused
}

fn inference_oracle() -> Outcome {
    let mut checked = 0;
    for seed in 0..4 {
        for mode in [EmbeddingMode::Addition, EmbeddingMode::ElementwiseMax] {
            for use_scene in [true, false] {
                let params = strong_params(mode, use_scene, seed + 100);
                for photo in small_photos(seed + 100, 4) {
                    let view = PhotoView::new(&photo, "head").unwrap();
                    for q in 0..photo.len() {
                        let got = predict_instance(&params, &view, q, BUDGET, seed).unwrap();
                        if got.fused != brute_force(&params, &photo, q) {
                            return outcome(false, format!("photo {} query {q} differs", photo.photo_id));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    outcome(true, format!("{checked} queries with N <= 4 match exhaustive enumeration exactly"))
}

fn relation_effect(runs: &mut Runs) -> Outcome {
    let app = runs.run("standard", standard_gen, Method::AppearanceOnly, standard_train);
    let rel = runs.run("standard", standard_gen, Method::OursRelation, standard_train);
    let gain = multi(&rel) - multi(&app);
    let gap = (single(&rel) - single(&app)).abs();
    outcome(
        gain >= 0.03 && gap < 0.02,
        format!(
            "appearance overall {} multi {} single {}; relation multi {} single {}; multi gain {} pts, single gap {} pts",
            pts(overall(&app)),
            pts(multi(&app)),
            pts(single(&app)),
            pts(multi(&rel)),
            pts(single(&rel)),
            pts(gain),
            pts(gap)
        ),
    )
}

fn scene_gen(seed: u64) -> GenConfig {
    GenConfig {
        scene_affinity_strength: 0.9,
        ..standard_gen(seed)
    }
}

fn scene_effect(runs: &mut Runs) -> Outcome {
    let rel = runs.run("scene", scene_gen, Method::OursRelation, standard_train);
    let full = runs.run("scene", scene_gen, Method::Ours, standard_train);
    let gain = overall(&full) - overall(&rel);
    outcome(
        gain >= 0.02,
        format!("relation {} vs full {}; gain {} pts", pts(overall(&rel)), pts(overall(&full)), pts(gain)),
    )
}

fn null_gen(seed: u64) -> GenConfig {
    GenConfig {
        co_occurrence_strength: 0.0,
        scene_affinity_strength: 0.0,
        ..standard_gen(seed)
    }
}

fn null_control(runs: &mut Runs) -> Outcome {
    let accs: Vec<(Method, f64)> = Method::ALL
        .into_iter()
        .map(|m| (m, overall(&runs.run("null", null_gen, m, standard_train))))
        .collect();
    let hi = accs.iter().map(|a| a.1).fold(f64::MIN, f64::max);
    let lo = accs.iter().map(|a| a.1).fold(f64::MAX, f64::min);
    let listed: Vec<String> = accs.iter().map(|(m, a)| format!("{m} {}", pts(*a))).collect();
    outcome(hi - lo < 0.03, format!("{}; spread {} pts", listed.join(", "), pts(hi - lo)))
}

fn mode_parity(runs: &mut Runs) -> Outcome {
    let add = runs.run("standard", standard_gen, Method::OursRelation, standard_train);
    let max = runs.run("standard-max", standard_gen, Method::OursRelation, |s| TrainConfig {
        mode: EmbeddingMode::ElementwiseMax,
        ..standard_train(s)
    });
    let diff = (overall(&add) - overall(&max)).abs();
    outcome(
        diff < 0.02,
        format!("addition {} vs max {}; difference {} pts", pts(overall(&add)), pts(overall(&max)), pts(diff)),
    )
}

fn fusion_sanity() -> Outcome {
    let regions = vec!["head".to_string(), "upper".to_string()];
    let mut per_region = vec![Vec::new(); regions.len()];
    let mut avg = Vec::new();
    for seed in SEEDS {
        let world = generate_synthetic(&standard_gen(seed)).expect("valid config");
        let report = region_fusion(&world.splits, 40, &regions, &standard_train(seed), BUDGET).expect("fusion runs");
        for (slot, (_, r)) in per_region.iter_mut().zip(&report.regions) {
            slot.push(r.mean.acc_overall);
        }
        avg.push(report.avg.mean.acc_overall);
    }
    let best = per_region.iter().map(|v| mean(v)).fold(f64::MIN, f64::max);
    let fused = mean(&avg);
    outcome(
        fused >= best - 0.005,
        format!(
            "head {} upper {} avg-fusion {}",
            pts(mean(&per_region[0])),
            pts(mean(&per_region[1])),
            pts(fused)
        ),
    )
}

fn cli(args: &[&str]) {
    albumseq_cli::run_args(std::iter::once("albumseq").chain(args.iter().copied()))
        .unwrap_or_else(|e| panic!("{args:?}: {e:#}"));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn determinism_and_protocol(tmp: &Path) -> (Outcome, Outcome) {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = tmp.join("data");
    cli(&["gen", "--out", &s(&data), "--set", "photos_per_split=300", "--set", "feature_dim=8", "--set", "noise_scale=0.85", "--seed", "3"]);
    let train_flags = ["--set", "embed_dim=16", "--set", "hidden_dim=16", "--set", "total_epochs=4", "--set", "decay_epoch=3", "--seed", "5"];
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let models = tmp.join(format!("models_{run}"));
        let eval = tmp.join(format!("eval_{run}"));
        let mut args = vec!["train", "--data", &s(&data), "--out", &s(&models)].into_iter().map(String::from).collect::<Vec<_>>();
        args.extend(train_flags.iter().map(|x| x.to_string()));
        cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
        cli(&["eval", "--data", &s(&data), "--models", &s(&models), "--out", &s(&eval), "--seed", "5"]);
        outs.push((dir_bytes(&models), dir_bytes(&eval)));
    }
    let same_models = outs[0].0 == outs[1].0;
    let same_eval = outs[0].1 == outs[1].1;
    let determinism = outcome(
        same_models && same_eval,
        format!(
            "{} model files identical: {same_models}; {} eval files identical: {same_eval}",
            outs[0].0.len(),
            outs[0].1.len()
        ),
    );

    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.join("eval_a").join("metrics.json")).unwrap()).unwrap();
    let report: MetricsReport = serde_json::from_value(metrics["report"].clone()).unwrap();
    let names: Vec<String> = report
        .directions
        .iter()
        .map(|d| serde_json::to_value(d.direction).unwrap().as_str().unwrap().to_string())
        .collect();
    let pick = |f: &dyn Fn(&albumseq::data::AccuracyBreakdown) -> Option<f64>| {
        report.directions.iter().map(|d| f(&d.metrics).unwrap()).sum::<f64>() / 2.0
    };
    let errs = [
        (report.mean.acc_overall - pick(&|m| Some(m.acc_overall))).abs(),
        (report.mean.acc_multi.unwrap() - pick(&|m| m.acc_multi)).abs(),
        (report.mean.acc_single.unwrap() - pick(&|m| m.acc_single)).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    let protocol = outcome(
        names == ["0->1", "1->0"] && worst <= 1e-12,
        format!("directions {names:?}; mean vs average max error {worst:.1e}"),
    );
    (determinism, protocol)
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut runs = Runs { reports: HashMap::new() };
    let mut results: Vec<(u32, &str, Outcome, Duration, Option<Duration>)> = Vec::new();
    let mut record = |id, name, limit, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let elapsed = start.elapsed();
        let line = (id, name, o, elapsed, limit);
        print_line(&line);
        results.push(line);
    };

    record(1, "gradient correctness", Some(Duration::from_secs(60)), &mut gradients);
    record(2, "padding invariance", Some(Duration::from_secs(60)), &mut padding);
    record(3, "inference oracle", Some(Duration::from_secs(60)), &mut inference_oracle);
    record(4, "relation context", Some(TEN_MINUTES), &mut || relation_effect(&mut runs));
    record(5, "scene context", Some(TEN_MINUTES), &mut || scene_effect(&mut runs));
    record(6, "null-context control", Some(TEN_MINUTES), &mut || null_control(&mut runs));
    record(7, "embedding-mode parity", None, &mut || mode_parity(&mut runs));
    record(8, "region fusion", None, &mut fusion_sanity);
    let mut proto = None;
    record(9, "determinism", None, &mut || {
        let (det, p) = determinism_and_protocol(tmp.path());
        proto = Some(p);
        det
    });
    record(10, "protocol", None, &mut || proto.take().expect("criterion 9 ran"));

    println!();
    let failed: Vec<u32> = results.iter().filter(|r| !passes(r)).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn passes(r: &(u32, &str, Outcome, Duration, Option<Duration>)) -> bool {
    r.2.passed && r.4.is_none_or(|limit| r.3 < limit)
}

fn print_line(r: &(u32, &str, Outcome, Duration, Option<Duration>)) {
    let over = match r.4 {
        Some(limit) if r.3 >= limit => format!(" [over {}s limit]", limit.as_secs()),
        _ => String::new(),
    };
    println!(
        "criterion {:>2} {} {:<22} {} ({:.1}s){over}",
        r.0,
        if passes(r) { "PASS" } else { "FAIL" },
        r.1,
        r.2.detail,
        r.3.as_secs_f64()
    );
}
