//! One forward pass through the three-stage hierarchy on a 2x2-region slide.

use hipt::model::{full_forward, HierarchicalModel, ModelConfig};
use hipt::multitask::register_default_tasks;
use hipt::synth::{generate_slide, Geometry, SlidePixels};
use hipt::tensor::Graph;

fn main() -> hipt::Result<()> {
    let model = HierarchicalModel::<f32>::new(ModelConfig::default(), 0)?;
    println!("{} parameter tensors, {} values", model.params.len(), model.params.numel());

    let geo = Geometry::new(2)?;
    let (m, bytes) = generate_slide(3, geo, &register_default_tasks())?;
    let pixels = SlidePixels::new(geo, bytes, std::path::Path::new("memory"))?;
    let tokens = pixels.all_patch_tokens();
    println!("{}: tokens {:?}", m.slide_id, tokens.shape());

    let mut g = Graph::new();
    let mut p = model.binder();
    let out = full_forward(&mut g, &mut p, &model.config, &tokens, geo.grid)?;
    println!("patch embeddings  {} x {:?}", out.patch_embeds.len(), g.shape(out.patch_embeds[0]));
    println!("region embeddings {} x {:?}", out.region_embeds.len(), g.shape(out.region_embeds[0]));
    println!("slide embedding   {:?}", g.shape(out.slide_embed));
    let e = g.value(out.slide_embed)?;
    println!("first values {:?}", &e.data()[..6]);
    println!("graph nodes {}, FAST peak {} bytes", g.len(), g.meter().fast_peak_bytes);
    Ok(())
}
