//! The end-to-end stages shared by the CLI, the examples and the tests:
//! dataset generation, pretraining, feature extraction and evaluation.

use std::path::Path;

use rayon::prelude::*;

use crate::bench::{run_benchmark, BenchmarkTask, RunRow};
use crate::clam::{adapt_frozen, AdaptationConfig, FeatureSet, Protocol, ScoreRow};
use crate::error::{Error, Result};
use crate::model::{HierarchicalModel, ModelConfig};
use crate::multitask::register_default_tasks;
use crate::synth::{generate_dataset, load_dataset, load_suite, preset, write_suite, Suite};
use crate::train::{final_checkpoint, load_backbone, run_curriculum, CurriculumConfig, CurriculumRun, TrainingData};

/// Writes `<root>/suite.json` and every dataset of the preset.
pub fn gen_data(root: &Path, preset_name: &str, seed: u64) -> Result<Suite> {
    let suite = preset(preset_name, seed)?;
    let registry = register_default_tasks();
    for spec in &suite.datasets {
        generate_dataset(spec, &registry, Some(root))?;
    }
    write_suite(root, &suite)?;
    Ok(suite)
}

/// The curriculum over the train splits of a generated suite.
pub fn pretrain(data_root: &Path, out: &Path, cfg: &CurriculumConfig, model: ModelConfig) -> Result<CurriculumRun<f32>> {
    let suite = load_suite(data_root)?;
    let data = TrainingData::from_suite(data_root, &suite, &model.registry)?;
    run_curriculum(cfg, model, &data, Some(out))
}

/// Loads a backbone from either a checkpoint directory or a pretraining
/// output directory.
pub fn load_model(path: &Path) -> Result<HierarchicalModel<f32>> {
    if path.join("checkpoint.json").exists() {
        load_backbone(path)
    } else {
        load_backbone(&final_checkpoint(path))
    }
}

/// Features of every dataset in the suite, saved under `<out>/<dataset_id>`
/// when `out` is given.
pub fn extract_suite(model: &HierarchicalModel<f32>, data_root: &Path, out: Option<&Path>) -> Result<Vec<FeatureSet>> {
    let suite = load_suite(data_root)?;
    suite
        .datasets
        .iter()
        .map(|spec| {
            let dir = data_root.join(&spec.dataset_id);
            let manifest = load_dataset(&dir)?;
            let set = crate::clam::extract_features(model, &dir, &manifest)?;
            if let Some(o) = out {
                set.save(&o.join(&set.dataset_id))?;
            }
            Ok(set)
        })
        .collect()
}

/// Reads the feature sets written by [`extract_suite`], in suite order
/// when a `suite.json` sits alongside, otherwise in directory order.
pub fn load_features(dir: &Path) -> Result<Vec<FeatureSet>> {
    let mut ids: Vec<String> = match load_suite(dir) {
        Ok(s) => s.datasets.into_iter().map(|d| d.dataset_id).collect(),
        Err(_) => {
            let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut v = Vec::new();
            for e in entries {
                let e = e.map_err(|e| Error::io(dir, e))?;
                if e.path().join("features.json").exists() {
                    v.push(e.file_name().to_string_lossy().into_owned());
                }
            }
            v.sort();
            v
        }
    };
    if ids.is_empty() {
        return Err(Error::Data(format!("no feature sets under {}", dir.display())));
    }
    ids.dedup();
    ids.iter().map(|id| FeatureSet::load(&dir.join(id))).collect()
}

/// Test-split scores of one adaptation run per dataset.
pub fn adapt_suite(model: &HierarchicalModel<f32>, features: &[FeatureSet], cfg: &AdaptationConfig, seed: u64) -> Result<Vec<ScoreRow>> {
    let per: Vec<Vec<ScoreRow>> = features
        .par_iter()
        .map(|f| Ok(adapt_frozen(model, f, cfg, seed)?.scores))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Benchmark rows for every feature set, protocol and seed, in that order.
/// `shuffle_seed` swaps in the label-shuffled control.
pub fn evaluate(features: &[FeatureSet], cfg: &AdaptationConfig, protocols: &[Protocol], seeds: &[u64], shuffle_seed: Option<u64>) -> Result<Vec<RunRow>> {
    let per: Vec<Vec<RunRow>> = features
        .par_iter()
        .map(|f| {
            let f = match shuffle_seed {
                Some(s) => f.shuffled_labels(s),
                None => f.clone(),
            };
            run_benchmark(&BenchmarkTask::for_features(&f, protocols), &f, cfg, seeds)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Mean AUROC over rows of one protocol.
pub fn mean_auroc(rows: &[RunRow], protocol: Protocol) -> Option<f64> {
    let xs: Vec<f64> = rows.iter().filter(|r| r.protocol == protocol).map(|r| r.auroc).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
