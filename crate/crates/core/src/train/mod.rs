//! Two-stage curriculum: DINO on patches and small regions first, then
//! large regions plus slide-level multi-task cross-entropy end to end.

mod optim;

pub use optim::{AdamW, AdamWConfig};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dino::{dino_head_forward, make_views, mean_distribution_entropy, symmetric_dino_loss, teacher_probs, DinoConfig, TeacherState, ViewOptions};
use crate::error::{Error, Result};
use crate::memory::{checkpointed_forward, run_under_policy, CheckpointMode, CheckpointPolicy, PolicyRun};
use crate::model::{stage1_forward, stage2_forward, Binder, HierarchicalModel, ModelConfig, ParamGrads, ParamStore};
use crate::multitask::{head_forward, multitask_loss, LabelBatch, TaskRegistry};
use crate::synth::{load_dataset, load_slide, DatasetManifest, Image, RegionSize, SlidePixels, Split, Suite, TOKENS_PER_PATCH, TOKEN_DIM};
use crate::tensor::{Element, Graph, Rng, Tensor, Var};
use crate::util::{create_dir, read_json, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::A => "A",
            Stage::B => "B",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dino_patch: f64,
    pub dino_region: f64,
    pub slide_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dino_patch: 1.0,
            dino_region: 1.0,
            slide_ce: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub stage_a_steps: usize,
    pub stage_b_steps: usize,
    /// Patches per DINO batch (both stages).
    pub patch_batch: usize,
    /// 64-px regions per stage-A region batch.
    pub small_region_batch: usize,
    /// 256-px regions per stage-B region batch.
    pub large_region_batch: usize,
    /// Slides per stage-B cross-entropy batch.
    pub slide_batch: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub dino: DinoConfig,
    pub policy: CheckpointPolicy,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            stage_a_steps: 200,
            stage_b_steps: 200,
            patch_batch: 32,
            small_region_batch: 8,
            large_region_batch: 2,
            slide_batch: 2,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            dino: DinoConfig::default(),
            policy: CheckpointPolicy::default(),
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.dino.validate()?;
        let w = &self.weights;
        if [w.dino_patch, w.dino_region, w.slide_ce].iter().any(|&x| x.is_nan() || x < 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if [self.patch_batch, self.small_region_batch, self.large_region_batch].iter().any(|&b| b < 2) || self.slide_batch == 0 {
            return Err(Error::Config("DINO batches need at least two items and the slide batch one".into()));
        }
        Ok(())
    }
}

/// A training slide held in memory with one label slot per registered task.
#[derive(Clone, Debug)]
pub struct TrainSlide {
    pub slide_id: String,
    pub pixels: SlidePixels,
    pub labels: Vec<Option<usize>>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub slides: Vec<TrainSlide>,
}

impl TrainingData {
    /// Train-split slides of one dataset.
    pub fn from_manifest(dir: &Path, manifest: &DatasetManifest, registry: &TaskRegistry) -> Result<Self> {
        let slides = manifest
            .slides_in(Split::Train)
            .into_par_iter()
            .map(|m| {
                Ok(TrainSlide {
                    slide_id: m.slide_id.clone(),
                    pixels: load_slide(dir, m)?,
                    labels: registry.tasks.iter().map(|t| m.label(&t.name)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData { slides })
    }

    /// Train-split slides of every dataset of a suite written under `root`.
    pub fn from_suite(root: &Path, suite: &Suite, registry: &TaskRegistry) -> Result<Self> {
        let mut out = TrainingData::default();
        for spec in &suite.datasets {
            let dir = root.join(&spec.dataset_id);
            let m = load_dataset(&dir)?;
            out.slides.extend(Self::from_manifest(&dir, &m, registry)?.slides);
        }
        if out.slides.is_empty() {
            return Err(Error::Data("no training slides".into()));
        }
        Ok(out)
    }
}

pub struct TrainState<T: Element> {
    pub model: HierarchicalModel<T>,
    pub teacher_patch: TeacherState<T>,
    pub teacher_region: TeacherState<T>,
    pub optimizer: AdamW,
    pub step: usize,
    pub stage: Stage,
}

const PATCH_TEACHER: [&str; 2] = ["stage1.", "dino_patch."];
const REGION_TEACHER: [&str; 3] = ["stage1.", "stage2.", "dino_region."];

impl<T: Element> TrainState<T> {
    pub fn new(model: HierarchicalModel<T>, cfg: &CurriculumConfig) -> Self {
        let k = model.config.dino_prototypes;
        TrainState {
            teacher_patch: TeacherState::from_student(&model.params, &PATCH_TEACHER, k, &cfg.dino),
            teacher_region: TeacherState::from_student(&model.params, &REGION_TEACHER, k, &cfg.dino),
            model,
            optimizer: AdamW::new(cfg.optimizer),
            step: 0,
            stage: Stage::A,
        }
    }

    /// Moves to stage B; there is no way back.
    pub fn advance(&mut self) {
        self.stage = Stage::B;
    }
}

/// Two augmented views of a DINO batch, tokenised as `[N, 16, 48]`.
#[derive(Clone, Debug)]
pub struct ViewPair<T> {
    pub views: [Tensor<T>; 2],
    /// Items in the batch; `N` is `items · size.patches()` for regions.
    pub items: usize,
}

#[derive(Clone, Debug)]
pub struct SlideItem<T> {
    pub slide_id: String,
    pub tokens: Tensor<T>,
    pub grid: usize,
    pub labels: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct StepBatch<T> {
    pub stage: Stage,
    pub patches: ViewPair<T>,
    pub regions: ViewPair<T>,
    pub region_size: RegionSize,
    pub slides: Vec<SlideItem<T>>,
}

type ViewPick = fn(&(Tensor<f32>, Tensor<f32>)) -> &Tensor<f32>;

fn views_of<T: Element>(images: Vec<Image>, seed: u64, purpose: &str, opts: &ViewOptions) -> Result<ViewPair<T>> {
    let items = images.len();
    let pairs = images
        .into_par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = Rng::derive_indexed(seed, purpose, i as u64);
            let (a, b) = make_views(&img, &mut rng, opts);
            Ok((a.to_patch_tokens()?, b.to_patch_tokens()?))
        })
        .collect::<Result<Vec<_>>>()?;
    let stack = |pick: ViewPick| -> Result<Tensor<T>> {
        let mut data = Vec::new();
        for p in &pairs {
            data.extend(pick(p).data().iter().map(|&v| T::from_f64(v as f64)));
        }
        let n = data.len() / (TOKENS_PER_PATCH * TOKEN_DIM);
        Tensor::new(vec![n, TOKENS_PER_PATCH, TOKEN_DIM], data)
    };
    Ok(ViewPair {
        views: [stack(|p| &p.0)?, stack(|p| &p.1)?],
        items,
    })
}

/// Samples and augments one step's inputs. Every random choice comes from
/// streams derived from `(seed, step)`, so the batch does not depend on the
/// number of workers.
pub fn assemble_batch<T: Element>(data: &TrainingData, cfg: &CurriculumConfig, stage: Stage, step: usize) -> Result<StepBatch<T>> {
    if data.slides.is_empty() {
        return Err(Error::Data("no training slides".into()));
    }
    let seed = Rng::derive_indexed(cfg.seed, "step", step as u64).next_u64();
    let mut rng = Rng::derive(seed, "sample");
    let n = data.slides.len();
    let patch_imgs: Vec<Image> = (0..cfg.patch_batch)
        .map(|_| {
            let s = &data.slides[rng.below(n)];
            s.pixels.patch_image(rng.below(s.pixels.patch_count()))
        })
        .collect();
    let (size, count) = match stage {
        Stage::A => (RegionSize::Small, cfg.small_region_batch),
        Stage::B => (RegionSize::Large, cfg.large_region_batch),
    };
    let region_imgs: Vec<Image> = (0..count)
        .map(|_| {
            let s = &data.slides[rng.below(n)];
            let per = match size {
                RegionSize::Small => s.pixels.geometry.regions_small(),
                RegionSize::Large => s.pixels.geometry.regions_large(),
            };
            s.pixels.region_image(size, rng.below(per))
        })
        .collect();
    let slides = match stage {
        Stage::A => Vec::new(),
        Stage::B => rng
            .choose_subset(n, cfg.slide_batch.min(n))
            .into_iter()
            .map(|i| {
                let s = &data.slides[i];
                SlideItem {
                    slide_id: s.slide_id.clone(),
                    tokens: s.pixels.all_patch_tokens().cast(),
                    grid: s.pixels.geometry.grid,
                    labels: s.labels.clone(),
                }
            })
            .collect(),
    };
    Ok(StepBatch {
        stage,
        patches: views_of(patch_imgs, seed, "patch-views", &ViewOptions::patch(&cfg.dino))?,
        regions: views_of(region_imgs, seed, "region-views", &ViewOptions::region(&cfg.dino))?,
        region_size: size,
        slides,
    })
}

/// Loss values and combined gradients of one step.
#[derive(Clone, Debug)]
pub struct StepLosses<T> {
    pub stage: Stage,
    pub total: f64,
    pub dino_patch: f64,
    pub dino_region: f64,
    /// `None` in stage A, where the term does not exist.
    pub slide_ce: Option<f64>,
    pub grads: ParamGrads<T>,
    pub fast_peak_bytes: u64,
    /// Raw teacher logits of both views, per scale, for centre updates.
    pub teacher_logits_patch: Tensor<T>,
    pub teacher_logits_region: Tensor<T>,
    pub teacher_entropy_patch: f64,
    pub teacher_entropy_region: f64,
}

fn patch_logits<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ModelConfig, tokens: Var) -> Result<Var> {
    let e = stage1_forward(g, p, cfg, tokens)?;
    dino_head_forward(g, p, "dino_patch", e)
}

fn region_logits<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ModelConfig, tokens: Var, items: usize, size: RegionSize) -> Result<Var> {
    let e = stage1_forward(g, p, cfg, tokens)?;
    let seq = g.reshape(e, &[items, size.patches(), cfg.embed_dim()])?;
    let r = stage2_forward(g, p, cfg, seq, size)?;
    dino_head_forward(g, p, "dino_region", r)
}

type LogitFn<T> = fn(&mut Graph<T>, &mut Binder<T>, &ModelConfig, Var, usize, RegionSize) -> Result<Var>;

fn as_patch<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ModelConfig, x: Var, _: usize, _: RegionSize) -> Result<Var> {
    patch_logits(g, p, cfg, x)
}

struct DinoTerm<T> {
    loss: f64,
    grads: ParamGrads<T>,
    peak: u64,
    teacher_logits: Tensor<T>,
    entropy: f64,
}

/// One DINO term: teacher targets from both views, then the student's
/// symmetric cross-view loss scaled by `weight`.
fn dino_term<T: Element>(
    model: &HierarchicalModel<T>,
    teacher: &TeacherState<T>,
    dino: &DinoConfig,
    pair: &ViewPair<T>,
    size: RegionSize,
    weight: f64,
    logits: LogitFn<T>,
) -> Result<DinoTerm<T>> {
    let cfg = &model.config;
    let mut tg = Graph::new();
    let mut tp = Binder::frozen(&teacher.params);
    let mut raw = Vec::new();
    let mut probs = Vec::new();
    for v in &pair.views {
        let x = tg.constant(v.clone())?;
        let l = logits(&mut tg, &mut tp, cfg, x, pair.items, size)?;
        let t = tg.value(l)?.clone();
        probs.push(teacher_probs(&t, &teacher.center, dino.tau_teacher)?);
        raw.push(l);
    }
    let cat = tg.concat(&raw, 0)?;
    let teacher_logits = tg.value(cat)?.clone();
    let k = cfg.dino_prototypes;
    let both: Vec<T> = probs.iter().flat_map(|p| p.data().iter().copied()).collect();
    let entropy = mean_distribution_entropy(&Tensor::new(vec![both.len() / k, k], both)?);

    let mut g = Graph::new();
    let mut p = model.binder();
    let mut student = Vec::new();
    for v in &pair.views {
        let x = g.constant(v.clone())?;
        student.push(logits(&mut g, &mut p, cfg, x, pair.items, size)?);
    }
    let [pa, pb]: [Tensor<T>; 2] = probs.try_into().map_err(|_| Error::Contract("two views".into()))?;
    let loss = symmetric_dino_loss(&mut g, [student[0], student[1]], [pa, pb], dino.tau_student)?;
    let value = g.scalar_value(loss)?.as_f64();
    let scaled = g.scale(loss, weight)?;
    let grads = g.backward(scaled)?;
    Ok(DinoTerm {
        loss: value,
        grads: p.grads(&grads),
        peak: g.meter().fast_peak_bytes.max(tg.meter().fast_peak_bytes),
        teacher_logits,
        entropy,
    })
}

/// Multi-task slide cross-entropy over a batch of whole slides under a
/// checkpoint policy. Returns the loss value (unscaled), the gradients of
/// `weight · loss` and the FAST peak.
pub fn slide_ce_term<T: Element>(
    model: &HierarchicalModel<T>,
    slides: &[SlideItem<T>],
    policy: &CheckpointPolicy,
    weight: f64,
) -> Result<(f64, ParamGrads<T>, u64)> {
    let (value, run) = slide_ce_run(model, slides, policy, weight, false)?;
    Ok((value, run.grads, run.meter.fast_peak_bytes))
}

/// [`slide_ce_term`] returning the whole policy run, with its memory trace
/// when `keep_trace` is set.
pub fn slide_ce_run<T: Element>(
    model: &HierarchicalModel<T>,
    slides: &[SlideItem<T>],
    policy: &CheckpointPolicy,
    weight: f64,
    keep_trace: bool,
) -> Result<(f64, PolicyRun<T>)> {
    let cfg = &model.config;
    let registry = &cfg.registry;
    let labels = LabelBatch::new(
        slides.iter().map(|s| s.slide_id.clone()).collect(),
        (0..registry.len()).map(|t| slides.iter().map(|s| s.labels[t]).collect()).collect(),
        registry,
    )?;
    let mode: CheckpointMode = policy.mode;
    let mut value = 0.0;
    let run = run_under_policy(policy, keep_trace, |g: &mut Graph<T>| {
        let mut p = model.binder();
        let mut embeds = Vec::with_capacity(slides.len());
        for s in slides {
            let (out, _) = checkpointed_forward(g, &mut p, cfg, &s.tokens, s.grid, mode)?;
            embeds.push(out.slide_embed);
        }
        let e = g.concat(&embeds, 0)?;
        let mut logits = Vec::with_capacity(registry.len());
        for (t, task) in registry.tasks.iter().enumerate() {
            if labels.present(t) == 0 {
                logits.push(None);
                continue;
            }
            let w = p.var(g, &format!("heads.{}.weight", task.name))?;
            let b = p.var(g, &format!("heads.{}.bias", task.name))?;
            logits.push(Some(head_forward(g, e, w, b)?));
        }
        let loss = multitask_loss(g, &logits, &labels)?;
        value = g.scalar_value(loss)?.as_f64();
        Ok((g.scale(loss, weight)?, p))
    })?;
    Ok((value, run))
}

fn compute_losses<T: Element>(state: &TrainState<T>, cfg: &CurriculumConfig, batch: &StepBatch<T>) -> Result<StepLosses<T>> {
    let w = &cfg.weights;
    let model = &state.model;
    let patch = dino_term(model, &state.teacher_patch, &cfg.dino, &batch.patches, RegionSize::Small, w.dino_patch, as_patch)?;
    let region = dino_term(model, &state.teacher_region, &cfg.dino, &batch.regions, batch.region_size, w.dino_region, region_logits)?;
    let mut grads = patch.grads;
    grads.accumulate(region.grads);
    let mut peak = patch.peak.max(region.peak);
    let mut total = w.dino_patch * patch.loss + w.dino_region * region.loss;
    let slide_ce = match batch.stage {
        Stage::A => None,
        Stage::B => {
            let (ce, g, p) = slide_ce_term(model, &batch.slides, &cfg.policy, w.slide_ce)?;
            grads.accumulate(g);
            peak = peak.max(p);
            total += w.slide_ce * ce;
            Some(ce)
        }
    };
    Ok(StepLosses {
        stage: batch.stage,
        total,
        dino_patch: patch.loss,
        dino_region: region.loss,
        slide_ce,
        grads,
        fast_peak_bytes: peak,
        teacher_logits_patch: patch.teacher_logits,
        teacher_logits_region: region.teacher_logits,
        teacher_entropy_patch: patch.entropy,
        teacher_entropy_region: region.entropy,
    })
}

/// Patch DINO plus small-region DINO; stage 3 and the task heads are never
/// part of the graph.
pub fn stage_a_losses<T: Element>(state: &TrainState<T>, cfg: &CurriculumConfig, batch: &StepBatch<T>) -> Result<StepLosses<T>> {
    if state.stage != Stage::A || batch.stage != Stage::A {
        return Err(Error::Contract("stage A losses need a stage-A state and batch".into()));
    }
    compute_losses(state, cfg, batch)
}

/// Patch DINO, large-region DINO and slide-level multi-task cross-entropy.
pub fn stage_b_losses<T: Element>(state: &TrainState<T>, cfg: &CurriculumConfig, batch: &StepBatch<T>) -> Result<StepLosses<T>> {
    if state.stage != Stage::B || batch.stage != Stage::B {
        return Err(Error::Contract("stage B losses need a stage-B state and batch".into()));
    }
    compute_losses(state, cfg, batch)
}

fn stage_updates(stage: Stage, name: &str) -> bool {
    match stage {
        Stage::A => ["stage1.", "stage2.", "dino_patch.", "dino_region."].iter().any(|p| name.starts_with(p)),
        Stage::B => true,
    }
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss_total: f64,
    pub loss_dino_patch: f64,
    pub loss_dino_region: f64,
    pub loss_slide_ce: Option<f64>,
    pub fast_peak_bytes: u64,
    pub teacher_entropy_patch: f64,
    pub teacher_entropy_region: f64,
}

/// Losses, optimiser update, then teacher EMA and centre updates.
pub fn train_step<T: Element>(state: &mut TrainState<T>, cfg: &CurriculumConfig, data: &TrainingData) -> Result<StepRecord> {
    let batch = assemble_batch(data, cfg, state.stage, state.step)?;
    let losses = compute_losses(state, cfg, &batch)?;
    if !losses.total.is_finite() {
        return Err(Error::NumericDomain { op: "training loss" });
    }
    let stage = state.stage;
    let model = &mut state.model;
    let frozen = model.frozen;
    let trainable = |n: &str| stage_updates(stage, n) && !crate::model::STAGE_PREFIXES.iter().zip(frozen).any(|(p, f)| f && n.starts_with(p));
    state.optimizer.step(&mut model.params, &losses.grads, trainable)?;
    state.teacher_patch.update(&model.params)?;
    state.teacher_region.update(&model.params)?;
    state.teacher_patch.update_center(&losses.teacher_logits_patch)?;
    state.teacher_region.update_center(&losses.teacher_logits_region)?;
    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        stage,
        loss_total: losses.total,
        loss_dino_patch: losses.dino_patch,
        loss_dino_region: losses.dino_region,
        loss_slide_ce: losses.slide_ce,
        fast_peak_bytes: losses.fast_peak_bytes,
        teacher_entropy_patch: losses.teacher_entropy_patch,
        teacher_entropy_region: losses.teacher_entropy_region,
    })
}

pub const METRICS_HEADER: &str = "step,stage,loss_total,loss_dino_patch,loss_dino_region,loss_slide_ce,fast_peak_bytes";

pub fn metrics_csv(rows: &[StepRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let ce = r.loss_slide_ce.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.stage, r.loss_total, r.loss_dino_patch, r.loss_dino_region, ce, r.fast_peak_bytes
        );
    }
    out
}

fn teacher_csv(rows: &[StepRecord]) -> String {
    let mut out = String::from("step,stage,entropy_patch,entropy_region\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.stage, r.teacher_entropy_patch, r.teacher_entropy_region);
    }
    out
}

/// Everything saved with a checkpoint besides the parameter files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub step: usize,
    pub stage: Stage,
    pub model: ModelConfig,
    pub checksum: String,
}

/// `<dir>/student`, `<dir>/teacher_patch`, `<dir>/teacher_region` and
/// `<dir>/checkpoint.json`.
pub fn save_checkpoint<T: Element>(state: &TrainState<T>, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    state.model.params.save(&dir.join("student"))?;
    state.teacher_patch.params.save(&dir.join("teacher_patch"))?;
    state.teacher_region.params.save(&dir.join("teacher_region"))?;
    write_json(
        &dir.join("checkpoint.json"),
        &CheckpointInfo {
            step: state.step,
            stage: state.stage,
            model: state.model.config.clone(),
            checksum: state.model.params.checksum(),
        },
    )
}

/// The student backbone stored in a checkpoint directory.
pub fn load_backbone<T: Element>(dir: &Path) -> Result<HierarchicalModel<T>> {
    let info: CheckpointInfo = read_json(&dir.join("checkpoint.json"))?;
    let params = ParamStore::load(&dir.join("student"))?;
    if params.checksum() != info.checksum {
        return Err(Error::CorruptPayload {
            path: dir.join("student"),
            reason: "parameter checksum mismatch".into(),
        });
    }
    info.model.validate()?;
    Ok(HierarchicalModel {
        config: info.model,
        params,
        frozen: [false; 3],
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub steps: usize,
    pub fast_peak_bytes: u64,
    pub wall_seconds: f64,
}

pub struct CurriculumRun<T: Element> {
    pub state: TrainState<T>,
    pub records: Vec<StepRecord>,
    pub counters: RunCounters,
}

/// Stage A then stage B, checkpointing after each under `out/checkpoints`
/// along with `metrics.csv`, `teacher.csv` and `meta.json`. A failing step
/// saves the last good state to `out/checkpoints/last_good` before the
/// error is returned.
pub fn run_curriculum<T: Element>(cfg: &CurriculumConfig, model_cfg: ModelConfig, data: &TrainingData, out: Option<&Path>) -> Result<CurriculumRun<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let model = HierarchicalModel::new(model_cfg, cfg.seed)?;
    let mut state = TrainState::new(model, cfg);
    let mut records = Vec::with_capacity(cfg.stage_a_steps + cfg.stage_b_steps);
    let ckpt = |name: &str| out.map(|o| o.join("checkpoints").join(name));
    let write_metrics = |records: &[StepRecord]| -> Result<()> {
        if let Some(o) = out {
            create_dir(o)?;
            write_text(&o.join("metrics.csv"), &metrics_csv(records))?;
            write_text(&o.join("teacher.csv"), &teacher_csv(records))?;
        }
        Ok(())
    };
    for (stage, steps) in [(Stage::A, cfg.stage_a_steps), (Stage::B, cfg.stage_b_steps)] {
        if stage == Stage::B {
            state.advance();
        }
        for _ in 0..steps {
            match train_step(&mut state, cfg, data) {
                Ok(r) => records.push(r),
                Err(e) => {
                    if let Some(dir) = ckpt("last_good") {
                        save_checkpoint(&state, &dir)?;
                        write_metrics(&records)?;
                    }
                    return Err(e);
                }
            }
        }
        if let Some(dir) = ckpt(&format!("stage_{}", stage.to_string().to_lowercase())) {
            save_checkpoint(&state, &dir)?;
        }
    }
    let counters = RunCounters {
        steps: records.len(),
        fast_peak_bytes: records.iter().map(|r| r.fast_peak_bytes).max().unwrap_or(0),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_metrics(&records)?;
    if let Some(o) = out {
        write_json(&o.join("meta.json"), &counters)?;
    }
    Ok(CurriculumRun { state, records, counters })
}

/// The final checkpoint directory of a pretraining output directory.
pub fn final_checkpoint(out: &Path) -> PathBuf {
    out.join("checkpoints").join("stage_b")
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_slide, Geometry};

    fn tiny_data(n: usize) -> TrainingData {
        let reg = crate::multitask::register_default_tasks();
        let slides = (0..n)
            .map(|i| {
                let (m, px) = generate_slide(i as u64, Geometry::new(1).unwrap(), &reg).unwrap();
                TrainSlide {
                    slide_id: m.slide_id.clone(),
                    pixels: SlidePixels::new(m.geometry, px, Path::new("mem")).unwrap(),
                    labels: reg.tasks.iter().map(|t| m.label(&t.name)).collect(),
                }
            })
            .collect();
        TrainingData { slides }
    }

    fn small_cfg() -> CurriculumConfig {
        CurriculumConfig {
            stage_a_steps: 1,
            stage_b_steps: 1,
            patch_batch: 4,
            small_region_batch: 2,
            large_region_batch: 2,
            slide_batch: 1,
            ..Default::default()
        }
    }

    fn small_model() -> ModelConfig {
        ModelConfig::with_dims(8, 1, 2)
    }

    #[test]
    fn stage_a_never_touches_stage_three() {
        let cfg = small_cfg();
        let data = tiny_data(2);
        let state = TrainState::<f32>::new(HierarchicalModel::new(small_model(), 0).unwrap(), &cfg);
        let batch = assemble_batch(&data, &cfg, Stage::A, 0).unwrap();
        let l = stage_a_losses(&state, &cfg, &batch).unwrap();
        assert!(l.slide_ce.is_none());
        assert!(l.grads.all_zero("stage3."));
        assert!(l.grads.all_zero("heads."));
        assert!(l.grads.any_nonzero("stage1.") && l.grads.any_nonzero("stage2."));
        assert_eq!(l.total, l.dino_patch + l.dino_region);
        assert!(stage_b_losses(&state, &cfg, &batch).is_err());
    }

    #[test]
    fn stage_b_reaches_every_stage() {
        let cfg = small_cfg();
        let data = tiny_data(2);
        let mut state = TrainState::<f32>::new(HierarchicalModel::new(small_model(), 0).unwrap(), &cfg);
        state.advance();
        let batch = assemble_batch(&data, &cfg, Stage::B, 0).unwrap();
        let l = stage_b_losses(&state, &cfg, &batch).unwrap();
        for p in ["stage1.", "stage2.", "stage3."] {
            assert!(l.grads.any_nonzero(p), "{p}");
        }
        assert!(l.slide_ce.unwrap() > 0.0);
    }

    #[test]
    fn missing_labels_zero_the_slide_term() {
        let cfg = small_cfg();
        let mut data = tiny_data(2);
        for s in &mut data.slides {
            s.labels.iter_mut().for_each(|l| *l = None);
        }
        let mut state = TrainState::<f32>::new(HierarchicalModel::new(small_model(), 0).unwrap(), &cfg);
        state.advance();
        let batch = assemble_batch(&data, &cfg, Stage::B, 0).unwrap();
        let l = stage_b_losses(&state, &cfg, &batch).unwrap();
        assert_eq!(l.slide_ce, Some(0.0));
        assert!(l.grads.all_zero("stage3."));
        assert!(l.grads.all_zero("heads."));
    }

    #[test]
    fn zero_weight_disables_a_term() {
        let mut cfg = small_cfg();
        let data = tiny_data(2);
        let state = TrainState::<f32>::new(HierarchicalModel::new(small_model(), 0).unwrap(), &cfg);
        let batch = assemble_batch(&data, &cfg, Stage::A, 0).unwrap();
        let full = stage_a_losses(&state, &cfg, &batch).unwrap();
        cfg.weights.dino_region = 0.0;
        let off = stage_a_losses(&state, &cfg, &batch).unwrap();
        assert!(off.grads.all_zero("stage2."));
        assert!(off.grads.all_zero("dino_region."));
        assert_eq!(off.total, full.dino_patch);
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = small_cfg();
        let data = tiny_data(2);
        let a = run_curriculum::<f32>(&cfg, small_model(), &data, None).unwrap();
        let b = run_curriculum::<f32>(&cfg, small_model(), &data, None).unwrap();
        assert!(a.state.model.params.bit_eq(&b.state.model.params));
        assert_eq!(a.records, b.records);
        let mut only_a = cfg.clone();
        only_a.stage_b_steps = 0;
        let c = run_curriculum::<f32>(&only_a, small_model(), &data, None).unwrap();
        assert_eq!(c.records[..], a.records[..1]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CurriculumConfig {
            stage_b_steps: 0,
            ..small_cfg()
        };
        let run = run_curriculum::<f32>(&cfg, small_model(), &tiny_data(2), Some(dir.path())).unwrap();
        let back = load_backbone::<f32>(&dir.path().join("checkpoints/stage_a")).unwrap();
        assert!(back.params.bit_eq(&run.state.model.params));
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }
}
