//! The three-stage hierarchical ViT.
//!
//! Stage 1 reads the 16 pixel tokens of a patch, stage 2 reads the patch
//! embeddings of a region (4×4 for small regions, 16×16 for large ones) and
//! stage 3 reads the region embeddings of a slide. Each stage returns its
//! final CLS state.

mod params;
mod vit;

pub use params::{init_tensor, Binder, ParamGrads, ParamStore};
pub use vit::{crop_positions, vit_forward, ViTConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multitask::{register_default_tasks, TaskRegistry};
use crate::synth::{tokenize_patch, RegionSize, PATCHES_PER_LARGE, TOKENS_PER_PATCH, TOKEN_DIM};
use crate::tensor::{Element, Graph, Tensor, Var};

pub const STAGE_PREFIXES: [&str; 3] = ["stage1.", "stage2.", "stage3."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stage1: ViTConfig,
    pub stage2: ViTConfig,
    pub stage3: ViTConfig,
    pub dino_hidden: usize,
    pub dino_prototypes: usize,
    pub registry: TaskRegistry,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_dims(32, 2, 4)
    }
}

impl ModelConfig {
    /// Default geometry with every stage at `embed_dim`, `depth` blocks and `heads` heads.
    pub fn with_dims(embed_dim: usize, depth: usize, heads: usize) -> Self {
        let stage = |name: &str, grid: usize, din: usize| {
            let mut c = ViTConfig::new(name, grid, din, embed_dim);
            c.depth = depth;
            c.heads = heads;
            c
        };
        ModelConfig {
            stage1: stage("stage1", 4, TOKEN_DIM),
            stage2: stage("stage2", 16, embed_dim),
            stage3: stage("stage3", 4, embed_dim),
            dino_hidden: 64,
            dino_prototypes: 32,
            registry: register_default_tasks(),
            init_std: 0.02,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.stage1.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.stage1, &self.stage2, &self.stage3] {
            s.validate()?;
        }
        if self.stage2.token_dim_in != self.stage1.embed_dim || self.stage3.token_dim_in != self.stage2.embed_dim {
            return Err(Error::Config("stage input dims must match the previous stage's embed_dim".into()));
        }
        if self.stage1.input_tokens != TOKENS_PER_PATCH || self.stage1.token_dim_in != TOKEN_DIM {
            return Err(Error::Config("stage 1 reads 16 tokens of 48 values".into()));
        }
        if self.stage2.input_tokens != PATCHES_PER_LARGE {
            return Err(Error::Config("stage 2 positional table covers a large region".into()));
        }
        if self.dino_hidden == 0 || self.dino_prototypes < 2 {
            return Err(Error::Config("DINO head needs a hidden layer and at least 2 prototypes".into()));
        }
        Ok(())
    }
}

/// DINO head names for one scale (`dino_patch` or `dino_region`).
pub fn dino_head_shapes(prefix: &str, d: usize, hidden: usize, k: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.fc.weight"), vec![d, hidden]),
        (format!("{prefix}.fc.bias"), vec![hidden]),
        (format!("{prefix}.last.weight"), vec![hidden, k]),
    ]
}

/// Backbone, DINO heads and task heads with per-stage freeze flags.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub frozen: [bool; 3],
}

impl<T: Element> HierarchicalModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let std = config.init_std;
        for s in [&config.stage1, &config.stage2, &config.stage3] {
            s.init(seed, std, &mut params);
        }
        let d = config.embed_dim();
        for head in ["dino_patch", "dino_region"] {
            for (name, shape) in dino_head_shapes(head, d, config.dino_hidden, config.dino_prototypes) {
                let t = init_tensor(seed, &name, &shape, std);
                params.insert(name, t);
            }
        }
        for task in &config.registry.tasks {
            for (name, shape) in [
                (format!("heads.{}.weight", task.name), vec![d, task.class_count]),
                (format!("heads.{}.bias", task.name), vec![task.class_count]),
            ] {
                let t = init_tensor(seed, &name, &shape, std);
                params.insert(name, t);
            }
        }
        Ok(HierarchicalModel {
            config,
            params,
            frozen: [false; 3],
        })
    }

    pub fn freeze(&mut self, stage: usize, frozen: bool) {
        self.frozen[stage] = frozen;
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !STAGE_PREFIXES
            .iter()
            .zip(self.frozen)
            .any(|(p, f)| f && name.starts_with(p))
    }

    /// Binder honouring the freeze flags.
    pub fn binder(&self) -> Binder<'_, T> {
        let frozen = self.frozen;
        Binder::new(&self.params, move |name| {
            !STAGE_PREFIXES.iter().zip(frozen).any(|(p, f)| f && name.starts_with(p))
        })
    }

    /// Stage-1 embedding of one `16×16×3` patch, computed in a scratch graph.
    pub fn embed_patch(&self, patch: &Tensor<f32>) -> Result<Tensor<T>> {
        let tokens = tokenize_patch(patch)?.cast::<T>().reshape(&[1, TOKENS_PER_PATCH, TOKEN_DIM])?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let x = g.constant(tokens)?;
        let e = stage1_forward(&mut g, &mut p, &self.config, x)?;
        g.value(e)?.clone().reshape(&[self.config.embed_dim()])
    }
}

/// `[B, 16, 48]` patch tokens → `[B, d]`.
pub fn stage1_forward<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ModelConfig, tokens: Var) -> Result<Var> {
    let positions: Vec<usize> = (0..cfg.stage1.input_tokens).collect();
    vit_forward(g, p, &cfg.stage1, tokens, &positions)
}

/// `[B, n, d]` patch embeddings of `B` regions → `[B, d]`. Small regions
/// use the centred 4×4 window of the large positional table.
pub fn stage2_forward<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ModelConfig, embeds: Var, size: RegionSize) -> Result<Var> {
    let shape = g.shape(embeds).to_vec();
    if shape.len() != 3 || shape[1] != size.patches() {
        return Err(Error::shape("stage2_forward", &shape, &[1, size.patches(), cfg.embed_dim()]));
    }
    let positions = cfg.stage2.crop_positions(size.side_patches())?;
    vit_forward(g, p, &cfg.stage2, embeds, &positions)
}

/// `[B, g², d]` region embeddings → `[B, d]`, placed on the centred `g×g`
/// window of the 4×4 positional grid.
pub fn stage3_forward<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ModelConfig, embeds: Var, grid: usize) -> Result<Var> {
    let shape = g.shape(embeds).to_vec();
    if shape.len() != 3 || shape[1] != grid * grid || grid > cfg.stage3.pos_grid {
        return Err(Error::shape("stage3_forward", &shape, &[1, grid * grid, cfg.embed_dim()]));
    }
    let positions = cfg.stage3.crop_positions(grid)?;
    vit_forward(g, p, &cfg.stage3, embeds, &positions)
}

/// Intermediate and final features of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct FullOutputs {
    /// Per large region, `[256, d]`.
    pub patch_embeds: Vec<Var>,
    /// Per large region, `[1, d]`.
    pub region_embeds: Vec<Var>,
    /// `[1, d]`.
    pub slide_embed: Var,
}

/// Tokens of one large region, sliced from `[patches, 16, 48]` slide tokens.
pub fn region_tokens<T: Element>(slide_tokens: &Tensor<T>, region: usize) -> Result<Tensor<T>> {
    let per = TOKENS_PER_PATCH * TOKEN_DIM * PATCHES_PER_LARGE;
    let data = slide_tokens
        .data()
        .get(region * per..(region + 1) * per)
        .ok_or_else(|| Error::shape("region_tokens", slide_tokens.shape(), &[(region + 1) * PATCHES_PER_LARGE, 16, 48]))?;
    Tensor::new(vec![PATCHES_PER_LARGE, TOKENS_PER_PATCH, TOKEN_DIM], data.to_vec())
}

/// Stage 1 over a region's patches, then stage 2 over the result.
pub fn region_forward<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ModelConfig, tokens: Tensor<T>) -> Result<(Var, Var)> {
    let x = g.constant(tokens)?;
    let patches = stage1_forward(g, p, cfg, x)?;
    let seq = g.reshape(patches, &[1, PATCHES_PER_LARGE, cfg.embed_dim()])?;
    let region = stage2_forward(g, p, cfg, seq, RegionSize::Large)?;
    Ok((patches, region))
}

/// The whole hierarchy over `[g²·256, 16, 48]` slide tokens, region by region.
pub fn full_forward<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ModelConfig, slide_tokens: &Tensor<T>, grid: usize) -> Result<FullOutputs> {
    let regions = grid * grid;
    if slide_tokens.shape() != [regions * PATCHES_PER_LARGE, TOKENS_PER_PATCH, TOKEN_DIM] {
        return Err(Error::shape(
            "full_forward",
            slide_tokens.shape(),
            &[regions * PATCHES_PER_LARGE, TOKENS_PER_PATCH, TOKEN_DIM],
        ));
    }
    let mut patch_embeds = Vec::with_capacity(regions);
    let mut region_embeds = Vec::with_capacity(regions);
    for r in 0..regions {
        let (pe, re) = region_forward(g, p, cfg, region_tokens(slide_tokens, r)?)?;
        patch_embeds.push(pe);
        region_embeds.push(re);
    }
    let slide_embed = slide_from_regions(g, p, cfg, &region_embeds, grid)?;
    Ok(FullOutputs {
        patch_embeds,
        region_embeds,
        slide_embed,
    })
}

/// Stage 3 over `[1, d]` region embeddings in grid order.
pub fn slide_from_regions<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ModelConfig, regions: &[Var], grid: usize) -> Result<Var> {
    let cat = g.concat(regions, 0)?;
    let seq = g.reshape(cat, &[1, regions.len(), cfg.embed_dim()])?;
    stage3_forward(g, p, cfg, seq, grid)
}
