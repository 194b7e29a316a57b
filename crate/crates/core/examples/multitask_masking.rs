//! Multi-task cross-entropy with missing labels: tasks with no labels in the
//! batch contribute nothing, whatever their logits are.

use hipt::multitask::{multitask_loss, register_default_tasks, LabelBatch};
use hipt::tensor::{Graph, Rng, Tensor};

fn main() -> hipt::Result<()> {
    let reg = register_default_tasks();
    let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut rng = Rng::new(1);
    let labels: Vec<Vec<Option<usize>>> = reg
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            (0..ids.len())
                .map(|_| (t % 3 != 0).then(|| rng.below(task.class_count)))
                .collect()
        })
        .collect();
    let batch = LabelBatch::new(ids, labels, &reg)?;
    let logits: Vec<Tensor<f64>> = reg.tasks.iter().map(|t| Tensor::from_fn(&[3, t.class_count], |_| rng.normal())).collect();

    for offset in [0.0, 100.0] {
        let mut g = Graph::new();
        let vars = reg
            .tasks
            .iter()
            .enumerate()
            .map(|(t, _)| {
                let mut x = logits[t].clone();
                if batch.present(t) == 0 {
                    x.data_mut().iter_mut().for_each(|v| *v += offset);
                }
                g.leaf(x, true)
            })
            .collect::<hipt::Result<Vec<_>>>()?;
        let loss = multitask_loss(&mut g, &vars.iter().map(|&v| Some(v)).collect::<Vec<_>>(), &batch)?;
        let value = g.scalar_value(loss)?;
        let grads = g.backward(loss)?;
        println!("missing-task logits shifted by {offset}: loss {value:.12}");
        for (t, task) in reg.tasks.iter().enumerate() {
            let norm: f64 = grads.get(vars[t]).map_or(0.0, |x| x.data().iter().map(|v| v * v).sum::<f64>().sqrt());
            println!("  {:<10} labels {}  |grad| {norm:.6}", task.name, batch.present(t));
        }
    }
    Ok(())
}
