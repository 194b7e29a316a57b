use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{clam_forward, clam_loss, ClamShape};
use crate::error::{Error, Result};
use crate::model::{full_forward, Binder, HierarchicalModel, ParamStore};
use crate::multitask::masked_cross_entropy;
use crate::synth::{load_slide, DatasetManifest, Split};
use crate::tensor::{purpose_hash, read_snapshot, write_snapshot, Element, Graph, Rng, Tensor};
use crate::train::{AdamW, AdamWConfig};
use crate::util::{create_dir, read_json, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    Clam,
    Linear,
}

impl Protocol {
    pub fn source(self) -> BagSource {
        match self {
            Protocol::Clam => BagSource::PatchFeatures,
            Protocol::Linear => BagSource::SlideEmbeddings,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Clam => "CLAM",
            Protocol::Linear => "LINEAR",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clam" => Ok(Protocol::Clam),
            "linear" => Ok(Protocol::Linear),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (expected clam or linear)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BagSource {
    PatchFeatures,
    SlideEmbeddings,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClamTraining {
    pub shape: ClamShape,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_instance: f64,
}

impl Default for ClamTraining {
    fn default() -> Self {
        ClamTraining {
            shape: ClamShape::default(),
            epochs: 30,
            lr: 3e-3,
            weight_decay: 1e-4,
            lambda_instance: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearTraining {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for LinearTraining {
    fn default() -> Self {
        LinearTraining {
            epochs: 100,
            lr: 0.05,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub protocol: Protocol,
    /// Defaults to the protocol's own source; anything else is rejected.
    pub source: Option<BagSource>,
    pub clam: ClamTraining,
    pub linear: LinearTraining,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            protocol: Protocol::Clam,
            source: None,
            clam: ClamTraining::default(),
            linear: LinearTraining::default(),
        }
    }
}

impl AdaptationConfig {
    pub fn with_protocol(protocol: Protocol) -> Self {
        AdaptationConfig {
            protocol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(src) = self.source {
            if src != self.protocol.source() {
                return Err(Error::Config(format!("{} cannot train on {src:?}", self.protocol)));
            }
        }
        self.clam.shape.validate()?;
        let opt = |lr: f64, wd: f64| {
            AdamWConfig {
                lr,
                weight_decay: wd,
                ..Default::default()
            }
            .validate()
        };
        opt(self.clam.lr, self.clam.weight_decay)?;
        opt(self.linear.lr, self.linear.weight_decay)?;
        if self.clam.lambda_instance < 0.0 {
            return Err(Error::Config("lambda_instance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Frozen-backbone features of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideFeatures {
    pub slide_id: String,
    pub split: Split,
    pub label: usize,
    /// Stage-1 embedding of every patch, `[P, d]`.
    pub patches: Tensor<f32>,
    /// Stage-3 slide embedding, `[d]`.
    pub slide: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dataset_id: String,
    pub primary_task: String,
    pub classes: usize,
    pub backbone_checksum: String,
    pub slides: Vec<SlideFeatures>,
}

#[derive(Serialize, Deserialize)]
struct FeatureIndex {
    dataset_id: String,
    primary_task: String,
    classes: usize,
    backbone_checksum: String,
    slides: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    slide_id: String,
    split: Split,
    label: usize,
}

impl FeatureSet {
    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SlideFeatures> {
        self.slides.iter().filter(move |s| s.split == split)
    }

    /// Labels permuted within each split, so class counts are kept.
    pub fn shuffled_labels(&self, seed: u64) -> FeatureSet {
        let mut out = self.clone();
        let mut rng = Rng::derive(seed, "shuffle-labels");
        for split in [Split::Train, Split::Test] {
            let idx: Vec<usize> = (0..out.slides.len()).filter(|&i| out.slides[i].split == split).collect();
            let mut labels: Vec<usize> = idx.iter().map(|&i| out.slides[i].label).collect();
            rng.shuffle(&mut labels);
            for (&i, l) in idx.iter().zip(labels) {
                out.slides[i].label = l;
            }
        }
        out
    }

    /// `<dir>/features.json` plus `<slide>.patches.snap` and
    /// `<slide>.slide.snap` per slide.
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        for s in &self.slides {
            write_snapshot(&dir.join(format!("{}.patches.snap", s.slide_id)), &s.patches)?;
            write_snapshot(&dir.join(format!("{}.slide.snap", s.slide_id)), &s.slide)?;
        }
        let index = FeatureIndex {
            dataset_id: self.dataset_id.clone(),
            primary_task: self.primary_task.clone(),
            classes: self.classes,
            backbone_checksum: self.backbone_checksum.clone(),
            slides: self
                .slides
                .iter()
                .map(|s| IndexEntry {
                    slide_id: s.slide_id.clone(),
                    split: s.split,
                    label: s.label,
                })
                .collect(),
        };
        write_json(&dir.join("features.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<FeatureSet> {
        let index: FeatureIndex = read_json(&dir.join("features.json"))?;
        let slides = index
            .slides
            .into_iter()
            .map(|e| {
                let patches = read_snapshot(&dir.join(format!("{}.patches.snap", e.slide_id)))?;
                let slide = read_snapshot(&dir.join(format!("{}.slide.snap", e.slide_id)))?;
                Ok(SlideFeatures {
                    slide_id: e.slide_id,
                    split: e.split,
                    label: e.label,
                    patches,
                    slide,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureSet {
            dataset_id: index.dataset_id,
            primary_task: index.primary_task,
            classes: index.classes,
            backbone_checksum: index.backbone_checksum,
            slides,
        })
    }
}

/// Stage-1 patch features and the slide embedding of every slide of a
/// dataset, computed in parallel with the backbone read-only.
pub fn extract_features<T: Element>(model: &HierarchicalModel<T>, dataset_dir: &Path, manifest: &DatasetManifest) -> Result<FeatureSet> {
    let classes = model
        .config
        .registry
        .by_name(&manifest.primary_task)
        .map(|t| t.class_count)
        .ok_or_else(|| Error::Data(format!("task {} is not registered", manifest.primary_task)))?;
    let d = model.config.embed_dim();
    let grid = manifest.geometry.grid;
    let slides = manifest
        .slides
        .par_iter()
        .map(|m| {
            let pixels = load_slide(dataset_dir, m)?;
            let tokens = pixels.all_patch_tokens().cast::<T>();
            let mut g = Graph::new();
            let mut p = Binder::frozen(&model.params);
            let out = full_forward(&mut g, &mut p, &model.config, &tokens, grid)?;
            let cat = g.concat(&out.patch_embeds, 0)?;
            let patches = g.value(cat)?.cast::<f32>();
            let slide = g.value(out.slide_embed)?.cast::<f32>().reshape(&[d])?;
            let split = *manifest
                .split
                .get(&m.slide_id)
                .ok_or_else(|| Error::Data(format!("slide {} has no split", m.slide_id)))?;
            Ok(SlideFeatures {
                slide_id: m.slide_id.clone(),
                split,
                label: manifest.primary_label(m)?,
                patches,
                slide,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSet {
        dataset_id: manifest.dataset_id.clone(),
        primary_task: manifest.primary_task.clone(),
        classes,
        backbone_checksum: model.params.checksum(),
        slides,
    })
}

/// Test-split prediction: `score` is the softmax probability of class 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub slide_id: String,
    pub task_id: String,
    pub score: f64,
    pub label: usize,
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("slide_id,task_id,score,label\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.slide_id, r.task_id, r.score, r.label));
    }
    s
}

/// Per-dimension mean and standard deviation of `rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f32]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for (j, &x) in r.iter().enumerate() {
                sum[j] += x as f64;
                sq[j] += x as f64 * x as f64;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, t: &Tensor<f32>) -> Tensor<f64> {
        let d = self.mean.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| (x as f64 - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }
}

/// A trained head and its test-split scores.
#[derive(Clone, Debug)]
pub struct Adaptation {
    pub protocol: Protocol,
    pub head: ParamStore<f64>,
    pub standardizer: Standardizer,
    pub scores: Vec<ScoreRow>,
    pub train_accuracy: f64,
}

/// Trains the protocol's head on the train split and scores the test split.
/// Only head parameters exist in the graphs built here, so the backbone
/// that produced `features` cannot change.
pub fn adapt(features: &FeatureSet, cfg: &AdaptationConfig, seed: u64) -> Result<Adaptation> {
    cfg.validate()?;
    if features.in_split(Split::Train).next().is_none() || features.in_split(Split::Test).next().is_none() {
        return Err(Error::Data(format!("{} needs slides in both splits", features.dataset_id)));
    }
    let seed = seed ^ purpose_hash(&features.dataset_id);
    match cfg.protocol {
        Protocol::Clam => adapt_clam(features, &cfg.clam, seed),
        Protocol::Linear => adapt_linear(features, &cfg.linear, seed),
    }
}

fn positive_probability(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    (logits[1] - m).exp() / z
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn adapt_clam(features: &FeatureSet, cfg: &ClamTraining, seed: u64) -> Result<Adaptation> {
    let d = features.slides[0].patches.shape()[1];
    let shape = ClamShape {
        feature_dim: d,
        classes: features.classes,
        ..cfg.shape
    };
    let std = Standardizer::fit(
        features.in_split(Split::Train).flat_map(|s| s.patches.data().chunks(d)),
        d,
    );
    let train: Vec<(Tensor<f64>, usize)> = features
        .in_split(Split::Train)
        .map(|s| (std.apply(&s.patches), s.label))
        .collect();
    let mut head = shape.init::<f64>(seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut rng = Rng::derive(seed, "clam-order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let (feats, label) = &train[i];
            let grads = {
                let mut g = Graph::new();
                let mut p = Binder::all(&head);
                let f = g.constant(feats.clone())?;
                let (loss, _) = clam_loss(&mut g, &mut p, f, *label, shape.k_instances, cfg.lambda_instance)?;
                let gr = g.backward(loss)?;
                p.grads(&gr)
            };
            opt.step(&mut head, &grads, |_| true)?;
        }
    }
    let logits = |t: &Tensor<f64>| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&head);
        let f = g.constant(t.clone())?;
        let out = clam_forward(&mut g, &mut p, f, shape.k_instances)?;
        Ok(g.value(out.logits)?.data().to_vec())
    };
    let mut correct = 0;
    for (t, l) in &train {
        correct += usize::from(argmax(&logits(t)?) == *l);
    }
    let scores = features
        .in_split(Split::Test)
        .map(|s| {
            Ok(ScoreRow {
                slide_id: s.slide_id.clone(),
                task_id: features.dataset_id.clone(),
                score: positive_probability(&logits(&std.apply(&s.patches))?),
                label: s.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Adaptation {
        protocol: Protocol::Clam,
        train_accuracy: correct as f64 / train.len() as f64,
        head,
        standardizer: std,
        scores,
    })
}

/// Attention weights of a trained CLAM head over standardised features.
pub fn clam_attention(head: &ParamStore<f64>, feats: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut p = Binder::frozen(head);
    let f = g.constant(feats.clone())?;
    let a = super::gated_attention(&mut g, &mut p, f)?;
    Ok(g.value(a)?.data().to_vec())
}

fn stack(rows: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let d = rows[0].numel();
    let data = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data)
}

fn linear_logits(g: &mut Graph<f64>, p: &mut Binder<f64>, x: Tensor<f64>) -> Result<crate::tensor::Var> {
    let x = g.constant(x)?;
    let w = p.var(g, "linear.weight")?;
    let b = p.var(g, "linear.bias")?;
    let z = g.matmul(x, w)?;
    g.add(z, b)
}

fn adapt_linear(features: &FeatureSet, cfg: &LinearTraining, seed: u64) -> Result<Adaptation> {
    let d = features.slides[0].slide.numel();
    let std = Standardizer::fit(features.in_split(Split::Train).map(|s| s.slide.data()), d);
    let rows: Vec<Tensor<f64>> = features.in_split(Split::Train).map(|s| std.apply(&s.slide)).collect();
    let labels: Vec<Option<usize>> = features.in_split(Split::Train).map(|s| Some(s.label)).collect();
    let x = stack(&rows)?;
    let mut head = ParamStore::new();
    let wstd = (d as f64).sqrt().recip();
    head.insert("linear.weight", crate::model::init_tensor(seed, "linear.weight", &[d, features.classes], wstd));
    head.insert("linear.bias", Tensor::zeros(&[features.classes]));
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    for _ in 0..cfg.epochs {
        let grads = {
            let mut g = Graph::new();
            let mut p = Binder::all(&head);
            let z = linear_logits(&mut g, &mut p, x.clone())?;
            let loss = masked_cross_entropy(&mut g, z, &labels)?.expect("labels present");
            let gr = g.backward(loss)?;
            p.grads(&gr)
        };
        opt.step(&mut head, &grads, |_| true)?;
    }
    let predict = |x: Tensor<f64>| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&head);
        let z = linear_logits(&mut g, &mut p, x)?;
        Ok(g.value(z)?.clone())
    };
    let train_logits = predict(x)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, l)| Some(argmax(train_logits.row(*i))) == **l)
        .count();
    let test: Vec<&SlideFeatures> = features.in_split(Split::Test).collect();
    let test_rows: Vec<Tensor<f64>> = test.iter().map(|s| std.apply(&s.slide)).collect();
    let test_logits = predict(stack(&test_rows)?)?;
    let scores = test
        .iter()
        .enumerate()
        .map(|(i, s)| ScoreRow {
            slide_id: s.slide_id.clone(),
            task_id: features.dataset_id.clone(),
            score: positive_probability(test_logits.row(i)),
            label: s.label,
        })
        .collect();
    Ok(Adaptation {
        protocol: Protocol::Linear,
        train_accuracy: correct as f64 / labels.len() as f64,
        head,
        standardizer: std,
        scores,
    })
}

/// [`adapt`] with the freeze contract checked: the backbone's parameter
/// checksum must match the one recorded with the features, before and after.
pub fn adapt_frozen<T: Element>(backbone: &HierarchicalModel<T>, features: &FeatureSet, cfg: &AdaptationConfig, seed: u64) -> Result<Adaptation> {
    let before = backbone.params.checksum();
    if before != features.backbone_checksum {
        return Err(Error::Contract(format!(
            "features of {} were extracted with another backbone",
            features.dataset_id
        )));
    }
    let out = adapt(features, cfg, seed)?;
    if backbone.params.checksum() != before {
        return Err(Error::Contract("backbone changed during adaptation".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_set(n_train: usize, n_test: usize, patches: usize, planted: bool, seed: u64) -> FeatureSet {
        let d = 8;
        let mut rng = Rng::new(seed);
        let mut slides = Vec::new();
        for i in 0..n_train + n_test {
            let label = i % 2;
            let mut data: Vec<f32> = (0..patches * d).map(|_| rng.normal() as f32).collect();
            let mut slide: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
            if label == 1 {
                slide[0] += 6.0;
                if planted {
                    let at = rng.below(patches);
                    data[at * d] += 8.0;
                }
            }
            slides.push(SlideFeatures {
                slide_id: format!("s{i:03}"),
                split: if i < n_train { Split::Train } else { Split::Test },
                label,
                patches: Tensor::new(vec![patches, d], data).unwrap(),
                slide: Tensor::new(vec![d], slide).unwrap(),
            });
        }
        FeatureSet {
            dataset_id: "toy".into(),
            primary_task: "tmb".into(),
            classes: 2,
            backbone_checksum: String::new(),
            slides,
        }
    }

    #[test]
    fn protocol_source_mismatch_is_rejected() {
        let mut cfg = AdaptationConfig::with_protocol(Protocol::Linear);
        cfg.source = Some(BagSource::PatchFeatures);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.source = Some(BagSource::SlideEmbeddings);
        cfg.validate().unwrap();
        assert_eq!("CLAM".parse::<Protocol>().unwrap(), Protocol::Clam);
        assert!("mlp".parse::<Protocol>().is_err());
    }

    #[test]
    fn linear_separates_separable_embeddings() {
        let set = toy_set(40, 10, 4, false, 1);
        let a = adapt(&set, &AdaptationConfig::with_protocol(Protocol::Linear), 0).unwrap();
        assert_eq!(a.train_accuracy, 1.0);
        assert_eq!(a.scores.len(), 10);
        assert!(a.scores.iter().all(|r| (0.0..=1.0).contains(&r.score)));
    }

    #[test]
    fn clam_attends_to_planted_patch() {
        let set = toy_set(40, 10, 16, true, 2);
        let mut cfg = AdaptationConfig::with_protocol(Protocol::Clam);
        cfg.clam.shape.k_instances = 2;
        let a = adapt(&set, &cfg, 0).unwrap();
        let mut ranks = Vec::new();
        for s in set.in_split(Split::Train).filter(|s| s.label == 1) {
            let planted = (0..16).max_by(|&i, &j| s.patches.row(i)[0].total_cmp(&s.patches.row(j)[0])).unwrap();
            let w = clam_attention(&a.head, &a.standardizer.apply(&s.patches)).unwrap();
            let rank = 1 + w.iter().filter(|&&x| x > w[planted]).count();
            ranks.push(rank as f64);
        }
        let mean = ranks.iter().sum::<f64>() / ranks.len() as f64;
        assert_eq!(mean, 1.0, "{ranks:?}");
    }

    #[test]
    fn adaptation_is_seeded() {
        let set = toy_set(12, 6, 8, true, 3);
        let cfg = AdaptationConfig::with_protocol(Protocol::Clam);
        let a = adapt(&set, &cfg, 5).unwrap();
        let b = adapt(&set, &cfg, 5).unwrap();
        assert_eq!(scores_csv(&a.scores), scores_csv(&b.scores));
    }

    #[test]
    fn shuffled_labels_keep_counts() {
        let set = toy_set(20, 10, 2, false, 4);
        let sh = set.shuffled_labels(9);
        for split in [Split::Train, Split::Test] {
            let pos = |s: &FeatureSet| s.in_split(split).filter(|x| x.label == 1).count();
            assert_eq!(pos(&set), pos(&sh));
        }
        assert_ne!(
            set.slides.iter().map(|s| s.label).collect::<Vec<_>>(),
            sh.slides.iter().map(|s| s.label).collect::<Vec<_>>()
        );
    }

    #[test]
    fn feature_set_roundtrip() {
        let set = toy_set(3, 2, 2, false, 5);
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        assert_eq!(FeatureSet::load(dir.path()).unwrap(), set);
    }
}
