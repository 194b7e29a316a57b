//! Slide-level cross-entropy on a 2x2-region slide under each checkpoint
//! mode, unbounded and at the smallest feasible FAST budget.

use hipt::memory::{min_feasible_budget, CheckpointMode, CheckpointPolicy};
use hipt::model::{HierarchicalModel, ModelConfig};
use hipt::multitask::register_default_tasks;
use hipt::synth::{generate_slide, Geometry, SlidePixels};
use hipt::train::{slide_ce_run, SlideItem};

fn main() -> hipt::Result<()> {
    let reg = register_default_tasks();
    let geo = Geometry::new(2)?;
    let (m, bytes) = generate_slide(5, geo, &reg)?;
    let pixels = SlidePixels::new(geo, bytes, std::path::Path::new("memory"))?;
    let slide = SlideItem {
        slide_id: m.slide_id.clone(),
        tokens: pixels.all_patch_tokens(),
        grid: geo.grid,
        labels: reg.tasks.iter().map(|t| m.label(&t.name)).collect(),
    };
    let model = HierarchicalModel::<f32>::new(ModelConfig::default(), 0)?;
    let slides = [slide];

    let mut reference = None;
    for mode in [CheckpointMode::None, CheckpointMode::PerRegion, CheckpointMode::PerStage] {
        let (loss, traced) = slide_ce_run(&model, &slides, &CheckpointPolicy::new(mode, None), 1.0, true)?;
        let min = min_feasible_budget(traced.trace.as_ref().expect("traced"))?;
        let (_, tight) = slide_ce_run(&model, &slides, &CheckpointPolicy::new(mode, Some(min)), 1.0, false)?;
        let same = match &reference {
            None => {
                reference = Some((loss.to_bits(), traced.grads.clone()));
                true
            }
            Some((bits, grads)) => *bits == loss.to_bits() && grads.bit_eq(&traced.grads) && grads.bit_eq(&tight.grads),
        };
        println!(
            "{mode:?}: loss {loss:.6}, peak {:>10} B; budget {min:>10} B -> peak {:>10} B, {} moves, {} B to host; bitwise equal {same}",
            traced.meter.fast_peak_bytes,
            tight.meter.fast_peak_bytes,
            tight.plan.len(),
            tight.meter.transfer_bytes_fast_to_host
        );
    }

    match slide_ce_run(&model, &slides, &CheckpointPolicy::new(CheckpointMode::PerRegion, Some(1 << 20)), 1.0, false) {
        Err(e) => println!("1 MiB budget: {e}"),
        Ok(_) => println!("1 MiB budget unexpectedly fit"),
    }
    Ok(())
}
