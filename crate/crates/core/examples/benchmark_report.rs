//! Both adaptation protocols over the tmb-mini suite for four seeds, with the
//! label-shuffled control, written as report.csv, summary.json and
//! radar.json.

use hipt::bench::{emit_report, SEEDS};
use hipt::clam::{AdaptationConfig, Protocol};
use hipt::model::{HierarchicalModel, ModelConfig};
use hipt::pipeline::{evaluate, extract_suite, gen_data, mean_auroc};

fn main() -> hipt::Result<()> {
    let root = std::env::temp_dir().join("hipt-benchmark-report");
    gen_data(&root.join("data"), "tmb-mini", 0)?;
    let model = HierarchicalModel::<f32>::new(ModelConfig::default(), 0)?;
    let features = extract_suite(&model, &root.join("data"), None)?;
    let protocols = [Protocol::Clam, Protocol::Linear];
    let cfg = AdaptationConfig::default();

    let rows = evaluate(&features, &cfg, &protocols, &SEEDS, None)?;
    let control = evaluate(&features, &cfg, &protocols, &SEEDS, Some(1))?;
    let report = emit_report(&rows, &root.join("report"))?;
    for t in &report.summary.tasks {
        println!("{:<10} {:<6} {:.3} ± {:.3}", t.task_id, t.protocol.to_string(), t.mean, t.std);
    }
    for p in protocols {
        println!("{p}: mean {:.3}, shuffled control {:.3}", mean_auroc(&rows, p).unwrap_or(f64::NAN), mean_auroc(&control, p).unwrap_or(f64::NAN));
    }
    println!("report in {}", root.join("report").display());
    Ok(())
}
