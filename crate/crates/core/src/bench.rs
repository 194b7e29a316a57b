//! AUROC, multi-seed benchmark runs and report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clam::{adapt, AdaptationConfig, FeatureSet, Protocol};
use crate::error::{Error, Result};
use crate::synth::Split;
use crate::util::{canonical_json, create_dir, write_json};

pub const SEEDS: [u64; 4] = [0, 1, 2, 3];

/// Probability that a random positive outranks a random negative, ties
/// counting one half, by the midrank method.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept in integers.
    let mut rank2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2 += mid2 * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        i = j + 1;
    }
    let num2 = rank2 - pos * (pos + 1);
    Ok(num2 as f64 / (2 * pos * neg) as f64)
}

/// The pairwise definition, for checking [`auroc`].
pub fn auroc_brute_force(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut num2: u64 = 0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                num2 += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    Ok(num2 as f64 / (2 * pos * neg) as f64)
}

fn class_counts(scores: &[f64], labels: &[usize]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric(format!("score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::UndefinedMetric(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    Ok((pos, neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackboneKind {
    SlideLevel,
    PatchLevel,
    EarlyExit,
}

pub fn protocol_for_backbone(kind: BackboneKind) -> Protocol {
    match kind {
        BackboneKind::SlideLevel => Protocol::Linear,
        BackboneKind::PatchLevel | BackboneKind::EarlyExit => Protocol::Clam,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTask {
    pub task_id: String,
    pub dataset_id: String,
    pub positive_class: usize,
    pub protocols: Vec<Protocol>,
}

impl BenchmarkTask {
    pub fn for_features(features: &FeatureSet, protocols: &[Protocol]) -> Self {
        BenchmarkTask {
            task_id: features.dataset_id.clone(),
            dataset_id: features.dataset_id.clone(),
            positive_class: 1,
            protocols: protocols.to_vec(),
        }
    }

    pub fn validate(&self, features: &FeatureSet) -> Result<()> {
        if features.dataset_id != self.dataset_id {
            return Err(Error::Contract(format!("task {} given features of {}", self.task_id, features.dataset_id)));
        }
        let test: Vec<usize> = features.in_split(Split::Test).map(|s| s.label).collect();
        if !test.contains(&self.positive_class) || test.iter().all(|&l| l == self.positive_class) {
            return Err(Error::Data(format!("test split of {} lacks a class", self.task_id)));
        }
        if self.protocols.is_empty() {
            return Err(Error::Config(format!("task {} has no protocol", self.task_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub task_id: String,
    pub protocol: Protocol,
    pub seed: u64,
    pub auroc: f64,
    pub n_test: usize,
}

/// One row per (protocol, seed): adapt on the train split, score the test
/// split. Seeds run on the current rayon pool.
pub fn run_benchmark(task: &BenchmarkTask, features: &FeatureSet, cfg: &AdaptationConfig, seeds: &[u64]) -> Result<Vec<RunRow>> {
    task.validate(features)?;
    let jobs: Vec<(Protocol, u64)> = task
        .protocols
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    jobs.par_iter()
        .map(|&(protocol, seed)| {
            let cfg = AdaptationConfig {
                protocol,
                source: None,
                ..*cfg
            };
            let a = adapt(features, &cfg, seed)?;
            let scores: Vec<f64> = a.scores.iter().map(|r| r.score).collect();
            let labels: Vec<usize> = a.scores.iter().map(|r| usize::from(r.label == task.positive_class)).collect();
            Ok(RunRow {
                task_id: task.task_id.clone(),
                protocol,
                seed,
                auroc: auroc(&scores, &labels)?,
                n_test: scores.len(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub protocol: Protocol,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for one seed).
    pub std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tasks: Vec<TaskSummary>,
    /// Mean of the per-task means, per protocol.
    pub average: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarEntry {
    pub task_id: String,
    pub protocol: Protocol,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub rows: Vec<RunRow>,
    pub summary: Summary,
    pub radar: Vec<RadarEntry>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates rows in the order tasks and protocols first appear.
pub fn summarize(rows: &[RunRow]) -> Result<RunReport> {
    if rows.is_empty() {
        return Err(Error::Contract("no benchmark rows to report".into()));
    }
    let mut keys: Vec<(String, Protocol)> = Vec::new();
    let mut groups: BTreeMap<(String, Protocol), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let k = (r.task_id.clone(), r.protocol);
        if !groups.contains_key(&k) {
            keys.push(k.clone());
        }
        groups.entry(k).or_default().push(r.auroc);
    }
    let tasks: Vec<TaskSummary> = keys
        .iter()
        .map(|k| {
            let (mean, std) = mean_std(&groups[k]);
            TaskSummary {
                task_id: k.0.clone(),
                protocol: k.1,
                mean,
                std,
                seeds: groups[k].len(),
            }
        })
        .collect();
    let mut per_protocol: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in &tasks {
        per_protocol.entry(t.protocol.to_string()).or_default().push(t.mean);
    }
    let average = per_protocol.into_iter().map(|(p, m)| (p, mean_std(&m).0)).collect();
    let radar = tasks
        .iter()
        .map(|t| RadarEntry {
            task_id: t.task_id.clone(),
            protocol: t.protocol,
            mean: t.mean,
        })
        .collect();
    Ok(RunReport {
        rows: rows.to_vec(),
        summary: Summary { tasks, average },
        radar,
    })
}

pub const REPORT_HEADER: &str = "task_id,protocol,seed,auroc,n_test";

pub fn report_csv(rows: &[RunRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.task_id, r.protocol, r.seed, r.auroc, r.n_test));
    }
    s
}

/// Parses [`report_csv`] output.
pub fn parse_report_csv(text: &str) -> Result<Vec<RunRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Data("report.csv header mismatch".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("bad report row {line:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(RunRow {
                task_id: f[0].to_string(),
                protocol: f[1].parse()?,
                seed: f[2].parse().map_err(|_| bad())?,
                auroc: f[3].parse().map_err(|_| bad())?,
                n_test: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes `report.csv`, `summary.json` and `radar.json` into `dir`.
pub fn emit_report(rows: &[RunRow], dir: &Path) -> Result<RunReport> {
    let report = summarize(rows)?;
    create_dir(dir)?;
    let path = dir.join("report.csv");
    std::fs::write(&path, report_csv(&report.rows)).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("summary.json"), &report.summary)?;
    write_json(&dir.join("radar.json"), &report.radar)?;
    Ok(report)
}

/// First 16 hex digits of the SHA-256 of the canonical JSON of `config`.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let json = canonical_json(config)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

pub fn run_dir<C: Serialize>(root: &Path, config: &C) -> Result<PathBuf> {
    Ok(root.join(config_hash(config)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4, 0.5, 0.1], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    fn row(task: &str, seed: u64, a: f64) -> RunRow {
        RunRow {
            task_id: task.into(),
            protocol: Protocol::Clam,
            seed,
            auroc: a,
            n_test: 10,
        }
    }

    #[test]
    fn report_counts_and_fidelity() {
        let rows: Vec<RunRow> = (0..10)
            .flat_map(|t| SEEDS.map(|s| row(&format!("task{t}"), s, 0.5 + 0.01 * (t as f64 + s as f64))))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let rep = emit_report(&rows, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 41);
        assert_eq!(rep.radar.len(), 10);
        assert_eq!(rep.summary.average.len(), 1);
        let parsed = parse_report_csv(&csv).unwrap();
        assert_eq!(parsed, rows);
        for t in &rep.summary.tasks {
            let xs: Vec<f64> = parsed.iter().filter(|r| r.task_id == t.task_id).map(|r| r.auroc).collect();
            assert!((xs.iter().sum::<f64>() / 4.0 - t.mean).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_rows_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&[], dir.path()).is_err());
        assert!(!dir.path().join("report.csv").exists());
    }

    #[test]
    fn protocols_per_backbone() {
        assert_eq!(protocol_for_backbone(BackboneKind::SlideLevel), Protocol::Linear);
        assert_eq!(protocol_for_backbone(BackboneKind::PatchLevel), Protocol::Clam);
        assert_eq!(protocol_for_backbone(BackboneKind::EarlyExit), Protocol::Clam);
    }

    #[test]
    fn config_hash_is_sixteen_hex() {
        let h = config_hash(&AdaptationConfig::default()).unwrap();
        assert_eq!(h.len(), 16);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(h, config_hash(&AdaptationConfig::default()).unwrap());
    }
}
