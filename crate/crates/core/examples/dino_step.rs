//! A few stage-A self-distillation steps: student update, EMA teacher and
//! centre, with the teacher's batch-mean entropy printed each step.

use hipt::model::{HierarchicalModel, ModelConfig};
use hipt::multitask::register_default_tasks;
use hipt::synth::{generate_slide, Geometry, SlidePixels};
use hipt::train::{train_step, CurriculumConfig, TrainSlide, TrainState, TrainingData};

fn main() -> hipt::Result<()> {
    let reg = register_default_tasks();
    let slides = (0..4)
        .map(|i| {
            let (m, px) = generate_slide(i, Geometry::new(1)?, &reg)?;
            Ok(TrainSlide {
                slide_id: m.slide_id.clone(),
                pixels: SlidePixels::new(m.geometry, px, std::path::Path::new("memory"))?,
                labels: reg.tasks.iter().map(|t| m.label(&t.name)).collect(),
            })
        })
        .collect::<hipt::Result<_>>()?;
    let data = TrainingData { slides };
    let cfg = CurriculumConfig {
        patch_batch: 16,
        small_region_batch: 4,
        ..Default::default()
    };
    let model = HierarchicalModel::new(ModelConfig::default(), cfg.seed)?;
    let k = model.config.dino_prototypes;
    let mut state = TrainState::<f32>::new(model, &cfg);
    println!("K = {k}, ln K = {:.3}", (k as f64).ln());
    for _ in 0..10 {
        let r = train_step(&mut state, &cfg, &data)?;
        println!(
            "step {:>2}  patch {:.4}  region {:.4}  teacher entropy {:.3} / {:.3}",
            r.step, r.loss_dino_patch, r.loss_dino_region, r.teacher_entropy_patch, r.teacher_entropy_region
        );
    }
    Ok(())
}
