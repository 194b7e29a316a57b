//! Task registry, linear task heads and the masked multi-task cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskCategory {
    Subtyping,
    Tissue,
    Biomarker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub category: TaskCategory,
    pub class_count: usize,
    pub loss_weight: f64,
}

/// Biomarker names of the default registry, in registration order.
pub const BIOMARKERS: [&str; 14] = [
    "tmb", "egfr", "kras", "msi", "tp53", "pik3ca", "pbrm1", "bap1", "alk", "braf", "her2", "er", "pr", "idh1",
];
pub const SUBTYPE_CLASSES: usize = 8;
pub const TISSUE_CLASSES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        for (i, t) in tasks.iter().enumerate() {
            if t.class_count < 2 {
                return Err(Error::Config(format!("task {} needs at least 2 classes", t.name)));
            }
            if !(t.loss_weight >= 0.0 && t.loss_weight.is_finite()) {
                return Err(Error::Config(format!("task {} has invalid weight {}", t.name, t.loss_weight)));
            }
            if tasks[..i].iter().any(|o| o.task_id == t.task_id || o.name == t.name) {
                return Err(Error::Config(format!("duplicate task {}", t.name)));
            }
        }
        Ok(TaskRegistry { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn biomarkers(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.category == TaskCategory::Biomarker)
    }
}

/// 1 subtyping task (8 classes), 1 tissue task (6 classes) and 14 binary
/// biomarkers, all weighted 1.
pub fn register_default_tasks() -> TaskRegistry {
    let mut tasks = vec![
        TaskSpec {
            task_id: 0,
            name: "subtype".into(),
            category: TaskCategory::Subtyping,
            class_count: SUBTYPE_CLASSES,
            loss_weight: 1.0,
        },
        TaskSpec {
            task_id: 1,
            name: "tissue".into(),
            category: TaskCategory::Tissue,
            class_count: TISSUE_CLASSES,
            loss_weight: 1.0,
        },
    ];
    for (i, b) in BIOMARKERS.iter().enumerate() {
        tasks.push(TaskSpec {
            task_id: 2 + i,
            name: (*b).into(),
            category: TaskCategory::Biomarker,
            class_count: 2,
            loss_weight: 1.0,
        });
    }
    TaskRegistry::new(tasks).expect("default registry is valid")
}

/// Labels of a batch: `labels[t][s]` is slide `s`'s class for task `t`,
/// `None` when missing.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelBatch {
    pub slide_ids: Vec<String>,
    pub labels: Vec<Vec<Option<usize>>>,
    pub weights: Vec<f64>,
}

impl LabelBatch {
    pub fn new(slide_ids: Vec<String>, labels: Vec<Vec<Option<usize>>>, registry: &TaskRegistry) -> Result<Self> {
        if labels.len() != registry.len() {
            return Err(Error::Contract(format!(
                "{} label rows for {} tasks",
                labels.len(),
                registry.len()
            )));
        }
        for (task, row) in registry.tasks.iter().zip(&labels) {
            if row.len() != slide_ids.len() {
                return Err(Error::Contract(format!("task {} has {} labels", task.name, row.len())));
            }
            if let Some(bad) = row.iter().flatten().find(|&&c| c >= task.class_count) {
                return Err(Error::Data(format!("label {bad} out of range for task {}", task.name)));
            }
        }
        Ok(LabelBatch {
            slide_ids,
            labels,
            weights: registry.tasks.iter().map(|t| t.loss_weight).collect(),
        })
    }

    pub fn present(&self, task: usize) -> usize {
        self.labels[task].iter().flatten().count()
    }
}

/// `embed · weight + bias`; `embed` is `[B, d]`, `weight` `[d, C]`, `bias` `[C]`.
pub fn head_forward<T: Element>(g: &mut Graph<T>, embed: Var, weight: Var, bias: Var) -> Result<Var> {
    let z = g.matmul(embed, weight)?;
    g.add(z, bias)
}

/// Softmax cross-entropy averaged over the slides whose label is present.
/// Returns `None` when every label is missing.
pub fn masked_cross_entropy<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[Option<usize>]) -> Result<Option<Var>> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let classes = shape[1];
    let picks: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(s, l)| l.map(|c| s * classes + c))
        .collect();
    if picks.is_empty() {
        return Ok(None);
    }
    let ls = g.log_softmax(logits)?;
    let flat = g.reshape(ls, &[shape[0] * classes, 1])?;
    let chosen = g.index_select(flat, &picks)?;
    let mean = g.mean(chosen)?;
    Ok(Some(g.scale(mean, -1.0)?))
}

/// Weighted mean of per-task cross-entropies over the tasks with at least
/// one present label. `logits[t]` is task `t`'s `[B, C_t]` output; tasks without
/// present labels may pass `None`. An all-missing batch yields an exact 0
/// constant, so nothing upstream receives gradient.
pub fn multitask_loss<T: Element>(g: &mut Graph<T>, logits: &[Option<Var>], labels: &LabelBatch) -> Result<Var> {
    if logits.len() != labels.labels.len() {
        return Err(Error::Contract(format!(
            "{} logit sets for {} tasks",
            logits.len(),
            labels.labels.len()
        )));
    }
    let mut terms = Vec::new();
    for (t, row) in labels.labels.iter().enumerate() {
        if row.iter().all(Option::is_none) || labels.weights[t] == 0.0 {
            continue;
        }
        let lg = logits[t].ok_or_else(|| Error::Contract(format!("task {t} has labels but no logits")))?;
        let ce = masked_cross_entropy(g, lg, row)?.expect("labels present");
        terms.push((ce, labels.weights[t]));
    }
    if terms.is_empty() {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let total: f64 = terms.iter().map(|(_, w)| w).sum();
    let mut acc: Option<Var> = None;
    for (ce, w) in terms {
        let term = g.scale(ce, w / total)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one term"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry2() -> TaskRegistry {
        TaskRegistry::new(vec![
            TaskSpec {
                task_id: 0,
                name: "a".into(),
                category: TaskCategory::Biomarker,
                class_count: 2,
                loss_weight: 1.0,
            },
            TaskSpec {
                task_id: 1,
                name: "b".into(),
                category: TaskCategory::Biomarker,
                class_count: 2,
                loss_weight: 1.0,
            },
        ])
        .unwrap()
    }

    #[test]
    fn default_registry_shape() {
        let r = register_default_tasks();
        assert_eq!(r.len(), 16);
        let cats: std::collections::BTreeSet<_> = r.tasks.iter().map(|t| t.category).collect();
        assert_eq!(cats.len(), 3);
        assert!(r.tasks.iter().all(|t| t.loss_weight == 1.0));
        assert_eq!(r.biomarkers().count(), 14);
    }

    #[test]
    fn zero_weight_head_returns_bias() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(Tensor::from_f64(&[1, 3], &[0.3, -2.0, 5.0]).unwrap()).unwrap();
        let w = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let b = g.constant(Tensor::from_f64(&[2], &[0.7, -0.1]).unwrap()).unwrap();
        let z = head_forward(&mut g, e, w, b).unwrap();
        assert_eq!(g.value(z).unwrap().data(), &[0.7, -0.1]);
    }

    #[test]
    fn two_tasks_average_their_ce() {
        // CE of logits [0, x] against class 1 is ln(1 + e^-x).
        let x_for = |ce: f64| -((ce).exp() - 1.0).ln();
        let mut g = Graph::<f64>::new();
        let l0 = g.constant(Tensor::from_f64(&[1, 2], &[0.0, x_for(0.5)]).unwrap()).unwrap();
        let l1 = g.constant(Tensor::from_f64(&[1, 2], &[0.0, x_for(1.0)]).unwrap()).unwrap();
        let labels = LabelBatch::new(vec!["s".into()], vec![vec![Some(1)], vec![Some(1)]], &registry2()).unwrap();
        let loss = multitask_loss(&mut g, &[Some(l0), Some(l1)], &labels).unwrap();
        assert!((g.scalar_value(loss).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn all_missing_is_exact_zero() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), true).unwrap();
        let labels = LabelBatch::new(vec!["s".into(), "t".into()], vec![vec![None, None], vec![None, None]], &registry2()).unwrap();
        let loss = multitask_loss(&mut g, &[Some(l), Some(l)], &labels).unwrap();
        assert_eq!(g.scalar_value(loss).unwrap(), 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(l).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let res = LabelBatch::new(vec!["s".into()], vec![vec![Some(2)], vec![None]], &registry2());
        assert!(matches!(res, Err(Error::Data(_))));
    }
}
