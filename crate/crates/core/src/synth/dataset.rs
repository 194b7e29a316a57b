use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render_slide, sample_density, Geometry, SlideManifest, SlideRecipe, DEFAULT_MISSING_RATE};
use crate::error::{Error, Result};
use crate::multitask::{TaskCategory, TaskRegistry, SUBTYPE_CLASSES, TISSUE_CLASSES};
use crate::tensor::{purpose_hash, Rng};
use crate::util::{create_dir, read_json, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-class slide counts of the primary task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRatio {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassRatio {
    /// Stratified split of `counts`: class `c` puts `round(fraction·n_c)` slides in train.
    pub fn from_fraction(counts: &[usize], fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction {fraction} outside [0, 1]")));
        }
        let train: Vec<usize> = counts.iter().map(|&n| (fraction * n as f64).round() as usize).collect();
        let test = counts.iter().zip(&train).map(|(n, t)| n - t).collect();
        Ok(ClassRatio { train, test })
    }

    pub fn totals(&self) -> Vec<usize> {
        self.train.iter().zip(&self.test).map(|(a, b)| a + b).collect()
    }
}

/// Recipe for a dataset whose primary task has exact class counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: String,
    pub primary_task: String,
    pub seed: u64,
    pub grid: usize,
    pub counts: ClassRatio,
    /// Fixed tissue class for every slide; random when absent.
    pub tissue: Option<usize>,
    pub missing_rate: f64,
}

impl DatasetSpec {
    pub fn new(id: &str, primary_task: &str, seed: u64, counts: ClassRatio) -> Self {
        DatasetSpec {
            dataset_id: id.into(),
            primary_task: primary_task.into(),
            seed,
            grid: 1,
            counts,
            tissue: None,
            missing_rate: DEFAULT_MISSING_RATE,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.totals().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub primary_task: String,
    pub geometry: Geometry,
    pub slides: Vec<SlideManifest>,
    pub split: BTreeMap<String, Split>,
    pub class_ratio: ClassRatio,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let ids: std::collections::BTreeSet<&str> = self.slides.iter().map(|s| s.slide_id.as_str()).collect();
        if ids.len() != self.slides.len() {
            return Err(Error::Data(format!("{}: duplicate slide ids", self.dataset_id)));
        }
        if self.split.len() != ids.len() || !self.split.keys().all(|k| ids.contains(k.as_str())) {
            return Err(Error::Data(format!(
                "{}: split must cover each listed slide exactly once",
                self.dataset_id
            )));
        }
        Ok(())
    }

    pub fn slides_in(&self, split: Split) -> Vec<&SlideManifest> {
        self.slides.iter().filter(|s| self.split[&s.slide_id] == split).collect()
    }

    pub fn primary_label(&self, slide: &SlideManifest) -> Result<usize> {
        slide.label(&self.primary_task).ok_or_else(|| {
            Error::Data(format!(
                "slide {} lacks a {} label",
                slide.slide_id, self.primary_task
            ))
        })
    }
}

fn slide_recipes(spec: &DatasetSpec, registry: &TaskRegistry) -> Result<(Vec<SlideRecipe>, BTreeMap<String, Split>)> {
    let task = registry
        .by_name(&spec.primary_task)
        .ok_or_else(|| Error::Config(format!("unknown primary task {}", spec.primary_task)))?;
    let totals = spec.counts.totals();
    if totals.len() != task.class_count || spec.counts.train.len() != task.class_count {
        return Err(Error::Config(format!(
            "{} needs {} class counts, got {}",
            task.name,
            task.class_count,
            totals.len()
        )));
    }
    let n: usize = totals.iter().sum();
    if n == 0 {
        return Err(Error::Config(format!("dataset {} has no slides", spec.dataset_id)));
    }
    if !(0.0..=1.0).contains(&spec.missing_rate) {
        return Err(Error::Config(format!("missing rate {} outside [0, 1]", spec.missing_rate)));
    }
    if spec.tissue.is_some_and(|t| t >= TISSUE_CLASSES) {
        return Err(Error::Config("tissue class out of range".into()));
    }
    let geometry = Geometry::new(spec.grid)?;

    let mut classes: Vec<usize> = totals.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    Rng::derive(spec.seed, "classes").shuffle(&mut classes);

    let mut split = BTreeMap::new();
    let mut assign = vec![Split::Train; n];
    let mut pick = Rng::derive(spec.seed, "split");
    for (c, &test_n) in spec.counts.test.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| classes[i] == c).collect();
        for k in pick.choose_subset(members.len(), test_n) {
            assign[members[k]] = Split::Test;
        }
    }

    let biomarkers: Vec<&str> = registry.biomarkers().map(|t| t.name.as_str()).collect();
    let mut recipes = Vec::with_capacity(n);
    for (i, &class) in classes.iter().enumerate() {
        let slide_id = format!("{}-{i:03}", spec.dataset_id);
        let seed = Rng::derive_indexed(spec.seed, "slide", i as u64).next_u64();
        let mut rng = Rng::derive(seed, "recipe");
        let mut tissue = spec.tissue.unwrap_or_else(|| rng.below(TISSUE_CLASSES));
        let mut subtype = rng.below(SUBTYPE_CLASSES);
        let densities = biomarkers
            .iter()
            .map(|&b| {
                let positive = if b == task.name { class == 1 } else { rng.bernoulli(0.3) };
                sample_density(&mut rng, positive)
            })
            .collect();
        match task.category {
            TaskCategory::Subtyping => subtype = class,
            TaskCategory::Tissue => tissue = class,
            TaskCategory::Biomarker => {}
        }
        split.insert(slide_id.clone(), assign[i]);
        recipes.push(SlideRecipe {
            slide_id,
            seed,
            geometry,
            tissue,
            subtype,
            densities,
            keep_labels: vec![task.name.clone()],
            missing_rate: spec.missing_rate,
        });
    }
    Ok((recipes, split))
}

/// Renders every slide of `spec` (in parallel on the current rayon pool)
/// and, when `out` is given, writes `<out>/<dataset_id>/manifest.json` and
/// `<out>/<dataset_id>/slides/<slide_id>.rgb`.
pub fn generate_dataset(spec: &DatasetSpec, registry: &TaskRegistry, out: Option<&Path>) -> Result<DatasetManifest> {
    let (recipes, split) = slide_recipes(spec, registry)?;
    let dir = out.map(|o| o.join(&spec.dataset_id));
    if let Some(d) = &dir {
        create_dir(&d.join("slides"))?;
    }
    let slides = recipes
        .par_iter()
        .map(|r| {
            let (m, pixels) = render_slide(r, registry)?;
            if let Some(d) = &dir {
                let path = d.join(&m.pixel_path);
                std::fs::write(&path, &pixels).map_err(|e| Error::io(&path, e))?;
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    for s in &slides {
        let expected = spec.counts.totals().len();
        if s.label(&spec.primary_task).is_none_or(|c| c >= expected) {
            return Err(Error::Data(format!("slide {} lost its primary label", s.slide_id)));
        }
    }
    let manifest = DatasetManifest {
        dataset_id: spec.dataset_id.clone(),
        primary_task: spec.primary_task.clone(),
        geometry: Geometry::new(spec.grid)?,
        slides,
        split,
        class_ratio: spec.counts.clone(),
    };
    manifest.validate()?;
    if let Some(d) = &dir {
        write_json(&d.join("manifest.json"), &manifest)?;
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    m.validate()?;
    Ok(m)
}

/// A named set of datasets generated together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    pub seed: u64,
    pub datasets: Vec<DatasetSpec>,
}

pub fn write_suite(root: &Path, suite: &Suite) -> Result<()> {
    write_json(&root.join("suite.json"), suite)
}

pub fn load_suite(root: &Path) -> Result<Suite> {
    read_json(&root.join("suite.json"))
}

/// Dataset id, biomarker, tissue class, train neg:pos, test neg:pos.
pub type Benchmark = (&'static str, &'static str, usize, [usize; 2], [usize; 2]);

/// The ten benchmark tasks, roughly 80 slides each with uneven class balance.
pub const BENCHMARKS: [Benchmark; 10] = [
    ("luad-tmb", "tmb", 0, [53, 14], [7, 6]),
    ("luad-egfr", "egfr", 0, [51, 9], [18, 2]),
    ("luad-kras", "kras", 0, [54, 6], [13, 7]),
    ("crc-msi", "msi", 2, [46, 14], [15, 5]),
    ("brca-tp53", "tp53", 1, [35, 25], [13, 7]),
    ("brca-pik3ca", "pik3ca", 1, [38, 22], [13, 7]),
    ("rcc-pbrm1", "pbrm1", 3, [30, 30], [10, 10]),
    ("rcc-bap1", "bap1", 3, [48, 12], [18, 2]),
    ("coad-kras", "kras", 2, [38, 22], [12, 8]),
    ("coad-tp53", "tp53", 2, [40, 20], [13, 7]),
];

/// Named dataset suites: `mini` (the ten benchmarks), `tmb-mini` (53:14
/// TMB cohort, 0.8 train fraction) and `smoke` (two 12-slide datasets).
pub fn preset(name: &str, seed: u64) -> Result<Suite> {
    let derive = |id: &str| seed ^ purpose_hash(id);
    let datasets = match name {
        "mini" => BENCHMARKS
            .iter()
            .map(|&(id, task, tissue, train, test)| {
                let counts = ClassRatio {
                    train: train.to_vec(),
                    test: test.to_vec(),
                };
                let mut s = DatasetSpec::new(id, task, derive(id), counts);
                s.tissue = Some(tissue);
                s
            })
            .collect(),
        "tmb-mini" => vec![DatasetSpec::new(
            "tmb-mini",
            "tmb",
            derive("tmb-mini"),
            ClassRatio::from_fraction(&[53, 14], 0.8)?,
        )],
        "smoke" => ["smoke-tmb", "smoke-msi"]
            .iter()
            .zip(["tmb", "msi"])
            .map(|(&id, task)| {
                let counts = ClassRatio {
                    train: vec![4, 4],
                    test: vec![2, 2],
                };
                DatasetSpec::new(id, task, derive(id), counts)
            })
            .collect(),
        other => return Err(Error::Config(format!("unknown preset {other}"))),
    };
    Ok(Suite {
        name: name.into(),
        seed,
        datasets,
    })
}
