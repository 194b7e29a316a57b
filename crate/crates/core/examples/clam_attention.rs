//! Frozen features of the tmb-mini suite, a CLAM head per dataset and where its
//! attention lands: patches carrying the dataset's biomarker motif versus
//! the rest.

use hipt::clam::{adapt, clam_attention, AdaptationConfig, Protocol};
use hipt::model::{HierarchicalModel, ModelConfig};
use hipt::multitask::register_default_tasks;
use hipt::pipeline::{extract_suite, gen_data};
use hipt::synth::{has_motif, load_dataset, load_slide, Split};

fn main() -> hipt::Result<()> {
    let root = std::env::temp_dir().join("hipt-clam-attention");
    gen_data(&root, "tmb-mini", 0)?;
    let model = HierarchicalModel::<f32>::new(ModelConfig::default(), 0)?;
    let reg = register_default_tasks();
    let cfg = AdaptationConfig::with_protocol(Protocol::Clam);
    for set in extract_suite(&model, &root, None)? {
        let a = adapt(&set, &cfg, 0)?;
        println!("{}: train accuracy {:.2}", set.dataset_id, a.train_accuracy);
        let j = reg.biomarkers().position(|t| t.name == set.primary_task).expect("biomarker task");
        let dir = root.join(&set.dataset_id);
        let manifest = load_dataset(&dir)?;
        for s in set.in_split(Split::Test).filter(|s| s.label == 1) {
            let m = manifest.slides.iter().find(|m| m.slide_id == s.slide_id).expect("listed slide");
            let px = load_slide(&dir, m)?;
            let w = clam_attention(&a.head, &a.standardizer.apply(&s.patches))?;
            let (mut on, mut n_on) = (0.0, 0);
            for (i, &wi) in w.iter().enumerate() {
                if has_motif(&px.bytes, px.geometry, i, j) {
                    on += wi;
                    n_on += 1;
                }
            }
            println!(
                "  {}: {n_on} motif patches hold {:.1}% of attention ({:.2}x uniform)",
                s.slide_id,
                100.0 * on,
                on / (n_on as f64 / w.len() as f64)
            );
        }
    }
    Ok(())
}
