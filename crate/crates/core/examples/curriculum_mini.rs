//! The two-stage curriculum on the smoke suite with a handful of steps per
//! stage, then reloads the final checkpoint.

use hipt::model::ModelConfig;
use hipt::pipeline::{gen_data, load_model, pretrain};
use hipt::train::CurriculumConfig;

fn main() -> hipt::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let root = std::env::temp_dir().join("hipt-curriculum-mini");
    let data = root.join("data");
    gen_data(&data, "smoke", 0)?;
    let cfg = CurriculumConfig {
        stage_a_steps: steps,
        stage_b_steps: steps,
        ..Default::default()
    };
    let run = pretrain(&data, &root.join("pretrain"), &cfg, ModelConfig::default())?;
    for r in &run.records {
        let ce = r.loss_slide_ce.map_or(String::from("-"), |v| format!("{v:.4}"));
        println!(
            "{} {:>3}  total {:.4}  patch {:.4}  region {:.4}  slide {ce}",
            r.stage, r.step, r.loss_total, r.loss_dino_patch, r.loss_dino_region
        );
    }
    println!("{} steps in {:.1}s, FAST peak {} B", run.counters.steps, run.counters.wall_seconds, run.counters.fast_peak_bytes);
    let back = load_model(&root.join("pretrain"))?;
    println!("reloaded checkpoint matches: {}", back.params.bit_eq(&run.state.model.params));
    Ok(())
}
