//! Renders one slide with planted biomarker motifs, counts the motifs back
//! from the pixels and writes the two-dataset smoke suite to disk.

use hipt::multitask::register_default_tasks;
use hipt::synth::{count_motif_patches, generate_slide, load_dataset, Geometry, Split};

fn main() -> hipt::Result<()> {
    let reg = register_default_tasks();
    let geo = Geometry::new(1)?;
    let (m, pixels) = generate_slide(42, geo, &reg)?;
    println!("{}: {}x{} px, {} patches", m.slide_id, geo.side_px(), geo.side_px(), geo.patches());
    for (j, task) in reg.biomarkers().enumerate() {
        let found = count_motif_patches(&pixels, geo, j);
        println!(
            "  {:<8} density {:.3}  motif patches {:>3}  label {:?}",
            task.name,
            m.motif_density[&task.name],
            found,
            m.label(&task.name)
        );
    }

    let root = std::env::temp_dir().join("hipt-synthetic-slides");
    let suite = hipt::pipeline::gen_data(&root, "smoke", 0)?;
    for spec in &suite.datasets {
        let manifest = load_dataset(&root.join(&spec.dataset_id))?;
        println!(
            "{} ({}): {} train, {} test",
            spec.dataset_id,
            spec.primary_task,
            manifest.slides_in(Split::Train).len(),
            manifest.slides_in(Split::Test).len()
        );
    }
    println!("written to {}", root.display());
    Ok(())
}
