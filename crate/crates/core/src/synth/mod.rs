//! Synthetic slides with planted, countable signal.
//!
//! A slide is a `g×g` grid of 256 px regions stored as raw RGB bytes. The
//! background hue encodes the tissue class, a sinusoidal texture family
//! encodes the subtype, and each biomarker owns one exact 4×4 motif that is
//! stamped into token slot `j` of a chosen subset of patches. Background
//! pixels are clamped to `[32, 223]`, so the 0/255 motifs can never appear by
//! accident and a brute-force counter recovers every biomarker label.

mod dataset;

pub use dataset::{
    generate_dataset, load_dataset, load_suite, preset, write_suite, ClassRatio, DatasetManifest, DatasetSpec,
    Split, Suite, BENCHMARKS,
};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multitask::{TaskCategory, TaskRegistry, SUBTYPE_CLASSES, TISSUE_CLASSES};
use crate::tensor::{Rng, Tensor};

pub const TOKEN_PX: usize = 4;
pub const PATCH_PX: usize = 16;
pub const REGION_SMALL_PX: usize = 64;
pub const REGION_LARGE_PX: usize = 256;
pub const TOKENS_PER_PATCH: usize = 16;
/// Values in one token: 4×4 pixels × RGB.
pub const TOKEN_DIM: usize = TOKEN_PX * TOKEN_PX * 3;
pub const PATCHES_PER_SMALL: usize = 16;
pub const PATCHES_PER_LARGE: usize = 256;

/// Biomarker label threshold on the fraction of motif-carrying patches.
pub const MOTIF_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MISSING_RATE: f64 = 0.25;

const BACKGROUND_MIN: u8 = 32;
const BACKGROUND_MAX: u8 = 223;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub token_px: usize,
    pub patch_px: usize,
    pub region_small_px: usize,
    pub region_large_px: usize,
    /// Large regions per side.
    pub grid: usize,
}

impl Geometry {
    pub fn new(grid: usize) -> Result<Self> {
        if !(1..=4).contains(&grid) {
            return Err(Error::Config(format!("slide grid must be in 1..=4, got {grid}")));
        }
        Ok(Geometry {
            token_px: TOKEN_PX,
            patch_px: PATCH_PX,
            region_small_px: REGION_SMALL_PX,
            region_large_px: REGION_LARGE_PX,
            grid,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let expect = Geometry::new(self.grid)?;
        if *self != expect {
            return Err(Error::Data(format!("unsupported geometry {self:?}")));
        }
        Ok(())
    }

    pub fn side_px(&self) -> usize {
        self.grid * REGION_LARGE_PX
    }

    pub fn payload_bytes(&self) -> usize {
        3 * self.side_px() * self.side_px()
    }

    pub fn patches(&self) -> usize {
        (self.grid * 16) * (self.grid * 16)
    }

    pub fn regions_large(&self) -> usize {
        self.grid * self.grid
    }

    pub fn regions_small(&self) -> usize {
        (self.grid * 4) * (self.grid * 4)
    }

    /// Top-left pixel of patch `i` in region-then-patch row-major order.
    pub fn patch_origin(&self, i: usize) -> (usize, usize) {
        let (r, p) = (i / PATCHES_PER_LARGE, i % PATCHES_PER_LARGE);
        let (ry, rx) = (r / self.grid, r % self.grid);
        let (py, px) = (p / 16, p % 16);
        (ry * REGION_LARGE_PX + py * PATCH_PX, rx * REGION_LARGE_PX + px * PATCH_PX)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RegionSize {
    Small,
    Large,
}

impl RegionSize {
    pub fn px(self) -> usize {
        match self {
            RegionSize::Small => REGION_SMALL_PX,
            RegionSize::Large => REGION_LARGE_PX,
        }
    }

    pub fn patches(self) -> usize {
        match self {
            RegionSize::Small => PATCHES_PER_SMALL,
            RegionSize::Large => PATCHES_PER_LARGE,
        }
    }

    pub fn side_patches(self) -> usize {
        self.px() / PATCH_PX
    }
}

/// One slide as written to disk and listed in a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub seed: u64,
    pub geometry: Geometry,
    /// Relative to the dataset directory.
    pub pixel_path: String,
    /// Task name → class, `null` when the label is withheld.
    pub labels: BTreeMap<String, Option<usize>>,
    /// Biomarker name → fraction of patches carrying its motif.
    pub motif_density: BTreeMap<String, f64>,
}

impl SlideManifest {
    pub fn label(&self, task: &str) -> Option<usize> {
        self.labels.get(task).copied().flatten()
    }
}

/// Everything that determines a slide's content.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecipe {
    pub slide_id: String,
    pub seed: u64,
    pub geometry: Geometry,
    pub tissue: usize,
    pub subtype: usize,
    /// Target motif fraction per biomarker, in registry order.
    pub densities: Vec<f64>,
    /// Tasks whose label is never withheld.
    pub keep_labels: Vec<String>,
    pub missing_rate: f64,
}

impl SlideRecipe {
    /// Random classes and biomarker states drawn from the slide seed.
    pub fn random(slide_id: impl Into<String>, seed: u64, geometry: Geometry, registry: &TaskRegistry) -> Self {
        let mut rng = Rng::derive(seed, "recipe");
        let tissue = rng.below(TISSUE_CLASSES);
        let subtype = rng.below(SUBTYPE_CLASSES);
        let densities = registry
            .biomarkers()
            .map(|_| {
                let positive = rng.bernoulli(0.3);
                sample_density(&mut rng, positive)
            })
            .collect();
        SlideRecipe {
            slide_id: slide_id.into(),
            seed,
            geometry,
            tissue,
            subtype,
            densities,
            keep_labels: Vec::new(),
            missing_rate: DEFAULT_MISSING_RATE,
        }
    }
}

/// Motif fraction for a slide of the given biomarker state: positives in
/// `[0.35, 0.6]`, negatives in `[0, 0.1]`.
pub fn sample_density(rng: &mut Rng, positive: bool) -> f64 {
    if positive {
        rng.uniform_range(0.35, 0.6)
    } else {
        rng.uniform_range(0.0, 0.1)
    }
}

/// Label for `count` motif patches out of `patches` (integer test of `count/patches ≥ 0.3`).
pub fn motif_label(count: usize, patches: usize) -> usize {
    usize::from(10 * count >= 3 * patches)
}

const TISSUE_PALETTE: [[f64; 3]; TISSUE_CLASSES] = [
    [196.0, 120.0, 168.0],
    [150.0, 96.0, 176.0],
    [204.0, 150.0, 150.0],
    [170.0, 140.0, 196.0],
    [120.0, 90.0, 150.0],
    [186.0, 170.0, 120.0],
];

const TEXTURE_AMPLITUDE: f64 = 22.0;
const NOISE_AMPLITUDE: i32 = 10;

/// Orientation (radians) and period (px) of subtype `f`'s stripe texture.
fn texture_family(f: usize) -> (f64, f64) {
    let angle = (f % 4) as f64 * std::f64::consts::FRAC_PI_4;
    let period = if f < 4 { 7.0 } else { 13.0 };
    (angle, period)
}

/// The exact RGB values of biomarker `j`'s motif at token pixel `(ty, tx)`.
/// Seven channel masks times two checker scales give 14 distinct motifs.
pub fn motif_pixel(j: usize, ty: usize, tx: usize) -> [u8; 3] {
    let mask = (j % 7) + 1;
    let on = if j < 7 { (ty + tx).is_multiple_of(2) } else { (ty / 2 + tx / 2).is_multiple_of(2) };
    let mut px = [0u8; 3];
    for (c, v) in px.iter_mut().enumerate() {
        if on && mask & (1 << c) != 0 {
            *v = 255;
        }
    }
    px
}

/// Token slot (row, col within the patch's 4×4 token grid) used by biomarker `j`.
pub fn motif_slot(j: usize) -> (usize, usize) {
    (j / 4, j % 4)
}

fn render_background(recipe: &SlideRecipe, rng: &mut Rng) -> Vec<u8> {
    let geo = recipe.geometry;
    let side = geo.side_px();
    let base = TISSUE_PALETTE[recipe.tissue];
    let (angle, period) = texture_family(recipe.subtype);
    let (ca, sa) = (angle.cos(), angle.sin());
    let weights = [1.0, -0.6, 0.8];
    let phases: Vec<f64> = (0..geo.regions_large())
        .map(|_| rng.uniform_range(0.0, std::f64::consts::TAU))
        .collect();
    let mut out = vec![0u8; geo.payload_bytes()];
    for y in 0..side {
        for x in 0..side {
            let r = (y / REGION_LARGE_PX) * geo.grid + x / REGION_LARGE_PX;
            let t = (std::f64::consts::TAU * (x as f64 * ca + y as f64 * sa) / period + phases[r]).sin();
            for c in 0..3 {
                let noise = rng.below((2 * NOISE_AMPLITUDE + 1) as usize) as i32 - NOISE_AMPLITUDE;
                let v = base[c] + TEXTURE_AMPLITUDE * weights[c] * t + noise as f64;
                out[(y * side + x) * 3 + c] = v.round().clamp(BACKGROUND_MIN as f64, BACKGROUND_MAX as f64) as u8;
            }
        }
    }
    out
}

fn stamp_motif(pixels: &mut [u8], geo: Geometry, patch: usize, j: usize) {
    let side = geo.side_px();
    let (py, px) = geo.patch_origin(patch);
    let (sy, sx) = motif_slot(j);
    for ty in 0..TOKEN_PX {
        for tx in 0..TOKEN_PX {
            let (y, x) = (py + sy * TOKEN_PX + ty, px + sx * TOKEN_PX + tx);
            let v = motif_pixel(j, ty, tx);
            pixels[(y * side + x) * 3..(y * side + x) * 3 + 3].copy_from_slice(&v);
        }
    }
}

/// Whether patch `patch` carries biomarker `j`'s motif exactly.
pub fn has_motif(pixels: &[u8], geo: Geometry, patch: usize, j: usize) -> bool {
    let side = geo.side_px();
    let (py, px) = geo.patch_origin(patch);
    let (sy, sx) = motif_slot(j);
    (0..TOKEN_PX).all(|ty| {
        (0..TOKEN_PX).all(|tx| {
            let (y, x) = (py + sy * TOKEN_PX + ty, px + sx * TOKEN_PX + tx);
            pixels[(y * side + x) * 3..(y * side + x) * 3 + 3] == motif_pixel(j, ty, tx)
        })
    })
}

/// Brute-force pixel-space count of patches carrying biomarker `j`'s motif.
pub fn count_motif_patches(pixels: &[u8], geo: Geometry, j: usize) -> usize {
    (0..geo.patches()).filter(|&p| has_motif(pixels, geo, p, j)).count()
}

/// Renders a slide and derives its labels from the emitted pixels.
pub fn render_slide(recipe: &SlideRecipe, registry: &TaskRegistry) -> Result<(SlideManifest, Vec<u8>)> {
    let geo = recipe.geometry;
    geo.validate()?;
    let n_bio = registry.biomarkers().count();
    if recipe.densities.len() != n_bio {
        return Err(Error::Config(format!(
            "{} densities for {n_bio} biomarkers",
            recipe.densities.len()
        )));
    }
    if n_bio > TOKENS_PER_PATCH {
        return Err(Error::Config("at most 16 biomarkers fit the token slots".into()));
    }
    if recipe.tissue >= TISSUE_CLASSES || recipe.subtype >= SUBTYPE_CLASSES {
        return Err(Error::Config("tissue or subtype class out of range".into()));
    }
    let mut rng = Rng::derive(recipe.seed, "pixels");
    let mut pixels = render_background(recipe, &mut rng);
    let patches = geo.patches();
    for (j, &d) in recipe.densities.iter().enumerate() {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::Config(format!("motif density {d} outside [0, 1]")));
        }
        let k = (d * patches as f64).round() as usize;
        let mut pick = Rng::derive_indexed(recipe.seed, "motif", j as u64);
        for p in pick.choose_subset(patches, k) {
            stamp_motif(&mut pixels, geo, p, j);
        }
    }

    let mut labels = BTreeMap::new();
    let mut density = BTreeMap::new();
    let mut miss = Rng::derive(recipe.seed, "missing");
    let mut j = 0;
    for task in &registry.tasks {
        let value = match task.category {
            TaskCategory::Subtyping => recipe.subtype % task.class_count,
            TaskCategory::Tissue => recipe.tissue % task.class_count,
            TaskCategory::Biomarker => {
                let count = count_motif_patches(&pixels, geo, j);
                density.insert(task.name.clone(), count as f64 / patches as f64);
                j += 1;
                motif_label(count, patches)
            }
        };
        let hidden = miss.bernoulli(recipe.missing_rate) && !recipe.keep_labels.contains(&task.name);
        labels.insert(task.name.clone(), if hidden { None } else { Some(value) });
    }
    let manifest = SlideManifest {
        slide_id: recipe.slide_id.clone(),
        seed: recipe.seed,
        geometry: geo,
        pixel_path: format!("slides/{}.rgb", recipe.slide_id),
        labels,
        motif_density: density,
    };
    Ok((manifest, pixels))
}

/// A slide with random classes and biomarker states under `seed`.
pub fn generate_slide(seed: u64, geometry: Geometry, registry: &TaskRegistry) -> Result<(SlideManifest, Vec<u8>)> {
    let recipe = SlideRecipe::random(format!("slide-{seed:016x}"), seed, geometry, registry);
    render_slide(&recipe, registry)
}

/// An RGB image in `[0, 1]`, height × width × channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidShape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Splits into 16 px patches (row-major) and each patch into 16 tokens of
    /// 48 values: `[patches, 16, 48]`.
    pub fn to_patch_tokens(&self) -> Result<Tensor<f32>> {
        if !self.height.is_multiple_of(PATCH_PX) || !self.width.is_multiple_of(PATCH_PX) {
            return Err(Error::shape("patchify", &[self.height, self.width, 3], &[PATCH_PX, PATCH_PX, 3]));
        }
        let (ph, pw) = (self.height / PATCH_PX, self.width / PATCH_PX);
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..ph {
            for px in 0..pw {
                push_patch_tokens(&mut out, |y, x, c| self.get(py * PATCH_PX + y, px * PATCH_PX + x, c));
            }
        }
        Tensor::new(vec![ph * pw, TOKENS_PER_PATCH, TOKEN_DIM], out)
    }
}

fn push_patch_tokens(out: &mut Vec<f32>, px: impl Fn(usize, usize, usize) -> f32) {
    for ty in 0..4 {
        for tx in 0..4 {
            for y in 0..TOKEN_PX {
                for x in 0..TOKEN_PX {
                    for c in 0..3 {
                        out.push(px(ty * TOKEN_PX + y, tx * TOKEN_PX + x, c));
                    }
                }
            }
        }
    }
}

/// Converts a `16×16×3` patch tensor into its `[16, 48]` tokens.
pub fn tokenize_patch(patch: &Tensor<f32>) -> Result<Tensor<f32>> {
    if patch.shape() != [PATCH_PX, PATCH_PX, 3] {
        return Err(Error::shape("tokenize_patch", patch.shape(), &[PATCH_PX, PATCH_PX, 3]));
    }
    let d = patch.data();
    let mut out = Vec::with_capacity(d.len());
    push_patch_tokens(&mut out, |y, x, c| d[(y * PATCH_PX + x) * 3 + c]);
    Tensor::new(vec![TOKENS_PER_PATCH, TOKEN_DIM], out)
}

/// A loaded slide payload.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidePixels {
    pub geometry: Geometry,
    pub bytes: Vec<u8>,
}

impl SlidePixels {
    pub fn new(geometry: Geometry, bytes: Vec<u8>, origin: &Path) -> Result<Self> {
        if bytes.len() != geometry.payload_bytes() {
            return Err(Error::CorruptPayload {
                path: origin.to_path_buf(),
                reason: format!("{} bytes, geometry needs {}", bytes.len(), geometry.payload_bytes()),
            });
        }
        Ok(SlidePixels { geometry, bytes })
    }

    pub fn patch_count(&self) -> usize {
        self.geometry.patches()
    }

    fn px(&self, y: usize, x: usize, c: usize) -> u8 {
        self.bytes[(y * self.geometry.side_px() + x) * 3 + c]
    }

    /// Raw `16×16×3` bytes of patch `i`.
    pub fn patch_bytes(&self, i: usize) -> Vec<u8> {
        let (oy, ox) = self.geometry.patch_origin(i);
        let mut out = Vec::with_capacity(PATCH_PX * PATCH_PX * 3);
        for y in 0..PATCH_PX {
            for x in 0..PATCH_PX {
                for c in 0..3 {
                    out.push(self.px(oy + y, ox + x, c));
                }
            }
        }
        out
    }

    /// Every patch in region-then-patch row-major order.
    pub fn patch_grid(&self) -> Vec<Vec<u8>> {
        (0..self.patch_count()).map(|i| self.patch_bytes(i)).collect()
    }

    /// Patch `i` as a `[16, 16, 3]` tensor in `[0, 1]`.
    pub fn normalized_patch(&self, i: usize) -> Tensor<f32> {
        let data = self.patch_bytes(i).into_iter().map(|b| b as f32 / 255.0).collect();
        Tensor::new(vec![PATCH_PX, PATCH_PX, 3], data).expect("patch shape")
    }

    /// Tokens of every patch, `[patches, 16, 48]`, ordered like [`Self::patch_grid`].
    pub fn all_patch_tokens(&self) -> Tensor<f32> {
        let mut out = Vec::with_capacity(self.bytes.len());
        for i in 0..self.patch_count() {
            let (oy, ox) = self.geometry.patch_origin(i);
            push_patch_tokens(&mut out, |y, x, c| self.px(oy + y, ox + x, c) as f32 / 255.0);
        }
        Tensor::new(vec![self.patch_count(), TOKENS_PER_PATCH, TOKEN_DIM], out).expect("token shape")
    }

    /// Pixel block of a region; `index` counts regions of that size row-major.
    pub fn region_image(&self, size: RegionSize, index: usize) -> Image {
        let per_side = self.geometry.side_px() / size.px();
        let (oy, ox) = ((index / per_side) * size.px(), (index % per_side) * size.px());
        self.crop(oy, ox, size.px())
    }

    pub fn patch_image(&self, i: usize) -> Image {
        let (oy, ox) = self.geometry.patch_origin(i);
        self.crop(oy, ox, PATCH_PX)
    }

    fn crop(&self, oy: usize, ox: usize, side: usize) -> Image {
        let mut data = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    data.push(self.px(oy + y, ox + x, c) as f32 / 255.0);
                }
            }
        }
        Image {
            height: side,
            width: side,
            data,
        }
    }
}

/// Reads a slide's payload from its dataset directory.
pub fn load_slide(dataset_dir: &Path, manifest: &SlideManifest) -> Result<SlidePixels> {
    let path = dataset_dir.join(&manifest.pixel_path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    SlidePixels::new(manifest.geometry, bytes, &path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::register_default_tasks;

    fn recipe(densities: Vec<f64>) -> SlideRecipe {
        SlideRecipe {
            slide_id: "t".into(),
            seed: 5,
            geometry: Geometry::new(1).unwrap(),
            tissue: 2,
            subtype: 3,
            densities,
            keep_labels: BIOMARKER_KEEP.iter().map(|s| s.to_string()).collect(),
            missing_rate: 0.25,
        }
    }

    const BIOMARKER_KEEP: [&str; 2] = ["tmb", "egfr"];

    #[test]
    fn geometry_counts() {
        let g = Geometry::new(2).unwrap();
        assert_eq!(g.patches(), 1024);
        assert_eq!(g.regions_large(), 4);
        assert_eq!(g.regions_small(), 64);
        assert_eq!(g.payload_bytes(), 3 * 512 * 512);
        assert!(Geometry::new(0).is_err());
        assert!(Geometry::new(5).is_err());
    }

    #[test]
    fn motifs_are_distinct_and_outside_background_range() {
        let pats: Vec<Vec<[u8; 3]>> = (0..14)
            .map(|j| (0..16).map(|i| motif_pixel(j, i / 4, i % 4)).collect())
            .collect();
        for a in 0..14 {
            for b in 0..a {
                assert_ne!(pats[a], pats[b]);
            }
            assert!(pats[a].iter().flatten().all(|&v| v == 0 || v == 255));
        }
    }

    #[test]
    fn density_040_is_positive_and_zero_is_negative() {
        let reg = register_default_tasks();
        let mut d = vec![0.0; 14];
        d[0] = 0.40;
        let (m, px) = render_slide(&recipe(d), &reg).unwrap();
        assert_eq!(m.label("tmb"), Some(1));
        assert_eq!(m.label("egfr"), Some(0));
        assert_eq!(count_motif_patches(&px, m.geometry, 0), 102);
        assert_eq!(count_motif_patches(&px, m.geometry, 1), 0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let reg = register_default_tasks();
        let g = Geometry::new(1).unwrap();
        let a = generate_slide(9, g, &reg).unwrap();
        let b = generate_slide(9, g, &reg).unwrap();
        assert_eq!(a, b);
        let c = generate_slide(10, g, &reg).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn tokenization_matches_patch_layout() {
        let patch = Tensor::<f32>::from_fn(&[16, 16, 3], |i| i as f32);
        let tok = tokenize_patch(&patch).unwrap();
        // Token 5 is row 1, col 1: pixel (4, 4) comes first.
        assert_eq!(tok.row(5)[0], ((4 * 16 + 4) * 3) as f32);
        assert_eq!(tok.row(5)[3], ((4 * 16 + 5) * 3) as f32);
        assert_eq!(tok.row(5)[12], ((5 * 16 + 4) * 3) as f32);
    }

    #[test]
    fn wrong_payload_size_is_corrupt() {
        let g = Geometry::new(1).unwrap();
        let res = SlidePixels::new(g, vec![0; 10], Path::new("x.rgb"));
        assert!(matches!(res, Err(Error::CorruptPayload { .. })));
    }

    #[test]
    fn normalization_endpoints() {
        let g = Geometry::new(1).unwrap();
        let mut bytes = vec![0u8; g.payload_bytes()];
        bytes[0] = 255;
        let s = SlidePixels::new(g, bytes, Path::new("x")).unwrap();
        let p = s.normalized_patch(0);
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(p.data()[1], 0.0);
    }
}
