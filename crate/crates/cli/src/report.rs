//! Result files and their consolidation into one comparison table.

use std::collections::BTreeMap;
use std::path::PathBuf;

use albumseq::data::MetricsReport;
use albumseq::inference::RegionFusion;
use albumseq::training::TrainReport;
use anyhow::{ensure, Result};
use serde::{Deserialize, Serialize};

use crate::files::{create_dir, read_json, write_atomic, write_json};
use crate::Common;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub method: String,
    pub regions: Vec<String>,
    pub fusion: Option<RegionFusion>,
    pub seed: u64,
    pub budget: usize,
    pub vocab_fingerprint: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainFile {
    pub region: String,
    pub split: usize,
    pub vocab_fingerprint: String,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResultFile {
    Metrics(MetricsFile),
    Train(TrainFile),
}

impl ResultFile {
    fn fingerprint(&self) -> &str {
        match self {
            ResultFile::Metrics(m) => &m.vocab_fingerprint,
            ResultFile::Train(t) => &t.vocab_fingerprint,
        }
    }
}

/// Mean and sample standard deviation of one accuracy cell across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub spread: f64,
    pub runs: usize,
}

fn cell(values: &[f64]) -> Option<Cell> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let spread = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Cell {
        mean,
        spread,
        runs: values.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub region: String,
    pub fusion: String,
    /// Distinct runs merged into this row.
    pub runs: usize,
    /// Inputs that duplicated an earlier run exactly.
    pub repeats: usize,
    pub overall: Cell,
    pub multi: Option<Cell>,
    pub single: Option<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn render(&self) -> String {
        let fmt = |c: &Option<Cell>| match c {
            Some(c) if c.runs > 1 => format!("{:.2}±{:.2}", 100.0 * c.mean, 100.0 * c.spread),
            Some(c) => format!("{:.2}", 100.0 * c.mean),
            None => "-".into(),
        };
        let mut out = format!(
            "{:<16} {:<12} {:<6} {:>4} {:>7} {:>14} {:>14} {:>14}\n",
            "method", "region", "fusion", "runs", "repeats", "overall", "multi", "single"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:<12} {:<6} {:>4} {:>7} {:>14} {:>14} {:>14}\n",
                r.method,
                r.region,
                r.fusion,
                r.runs,
                r.repeats,
                fmt(&Some(r.overall.clone())),
                fmt(&r.multi),
                fmt(&r.single)
            ));
        }
        out
    }
}

/// Groups metrics files by method/region/fusion, dropping exact duplicates.
pub fn merge(files: &[ResultFile]) -> Result<Report> {
    if let Some(first) = files.first() {
        ensure!(
            files.iter().all(|f| f.fingerprint() == first.fingerprint()),
            "inputs were produced with different identity vocabularies"
        );
    }
    let mut groups: BTreeMap<(String, String, String), (Vec<&MetricsFile>, usize)> = BTreeMap::new();
    for f in files {
        if let ResultFile::Metrics(m) = f {
            let fusion = m.fusion.map_or("-".to_string(), |f| f.to_string());
            let (runs, repeats) = groups.entry((m.method.clone(), m.regions.join(","), fusion)).or_default();
            if runs.contains(&m) {
                *repeats += 1;
            } else {
                runs.push(m);
            }
        }
    }
    let rows = groups
        .into_iter()
        .map(|((method, region, fusion), (runs, repeats))| {
            let pick = |f: &dyn Fn(&MetricsFile) -> Option<f64>| runs.iter().filter_map(|m| f(m)).collect::<Vec<_>>();
            ReportRow {
                method,
                region,
                fusion,
                runs: runs.len(),
                repeats,
                overall: cell(&pick(&|m| Some(m.report.mean.acc_overall))).expect("group is nonempty"),
                multi: cell(&pick(&|m| m.report.mean.acc_multi)),
                single: cell(&pick(&|m| m.report.mean.acc_single)),
            }
        })
        .collect();
    Ok(Report { rows })
}

pub fn report(common: &Common, inputs: &[PathBuf]) -> Result<()> {
    let files: Vec<ResultFile> = inputs.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let table = merge(&files)?;

    let mut accuracy = String::from("method\tregion\tfusion\toverall\tmulti\tsingle\truns\n");
    for r in &table.rows {
        let v = |c: &Option<Cell>| c.as_ref().map_or("nan".to_string(), |c| c.mean.to_string());
        accuracy.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.method,
            r.region,
            r.fusion,
            r.overall.mean,
            v(&r.multi),
            v(&r.single),
            r.runs
        ));
    }
    let mut loss = String::from("run\tepoch\tmean_loss\n");
    for f in &files {
        if let ResultFile::Train(t) = f {
            let run = format!("{}_{}_seed{}", t.region, t.split, t.report.seed);
            for e in &t.report.epochs {
                loss.push_str(&format!("{run}\t{}\t{}\n", e.epoch, e.mean_loss));
            }
        }
    }

    create_dir(&common.out)?;
    let text = table.render();
    write_atomic(&common.out.join("report.txt"), text.as_bytes())?;
    write_json(&common.out.join("report.json"), &table)?;
    write_atomic(&common.out.join("accuracy.tsv"), accuracy.as_bytes())?;
    write_atomic(&common.out.join("loss.tsv"), loss.as_bytes())?;
    print!("{text}");
    Ok(())
}
