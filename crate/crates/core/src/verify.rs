//! Self-checks run by `hipt verify`: finite-difference gradient checks of
//! every op and model component, plus exact invariants.

use crate::bench::{auroc, auroc_brute_force};
use crate::clam::{clam_forward, clam_loss, ClamShape};
use crate::dino::{dino_head_forward, dino_loss_with_targets, teacher_probs};
use crate::error::Result;
use crate::model::{dino_head_shapes, init_tensor, vit_forward, Binder, ParamStore, ViTConfig};
use crate::multitask::{head_forward, multitask_loss, LabelBatch, TaskCategory, TaskRegistry, TaskSpec};
use crate::tensor::gradcheck::finite_diff_report;
use crate::tensor::{Graph, Op, Rng, Tensor, Var};

/// Relative-error bound of every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {} ({})", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

type GraphFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct GradCase {
    name: String,
    params: Vec<Tensor<f64>>,
    f: GraphFn,
}

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(0.5, 2.0))
}

/// `Σ w ⊙ y` with fixed random weights, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::derive(seed, "projection");
    let w = randn(&mut rng, g.shape(y), 1.0);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn case(name: &str, params: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name: name.into(),
        params,
        f: Box::new(f),
    }
}

fn unary(name: &'static str, x: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> GradCase {
    case(name, vec![x], move |g, v| {
        let y = op(g, v[0])?;
        project(g, y, 1)
    })
}

fn op_cases(rng: &mut Rng) -> Vec<GradCase> {
    let a = randn(rng, &[3, 4], 1.0);
    let b = randn(rng, &[4, 2], 1.0);
    let c = randn(rng, &[3, 4], 1.0);
    let row = randn(rng, &[4], 1.0);
    let batch = randn(rng, &[2, 3, 4], 1.0);
    let batch_b = randn(rng, &[2, 4, 3], 1.0);
    vec![
        case("op/matmul", vec![a.clone(), b.clone()], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 2)
        }),
        case("op/matmul_batched", vec![batch.clone(), batch_b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 3)
        }),
        case("op/add", vec![a.clone(), c.clone(), row.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            let y = g.add(y, v[2])?;
            project(g, y, 4)
        }),
        case("op/sub", vec![a.clone(), c.clone()], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 5)
        }),
        case("op/mul", vec![a.clone(), c.clone(), row], |g, v| {
            let y = g.mul(v[0], v[1])?;
            let y = g.mul(y, v[2])?;
            project(g, y, 6)
        }),
        unary("op/scale", a.clone(), |g, x| g.scale(x, -1.7)),
        unary("op/add_scalar", a.clone(), |g, x| g.add_scalar(x, 0.3)),
        unary("op/exp", a.clone(), |g, x| g.exp(x)),
        unary("op/log", positive(rng, &[3, 4]), |g, x| g.log(x)),
        unary("op/tanh", a.clone(), |g, x| g.tanh(x)),
        unary("op/sigmoid", a.clone(), |g, x| g.sigmoid(x)),
        unary("op/gelu", a.clone(), |g, x| g.gelu(x)),
        unary("op/layer_norm", a.clone(), |g, x| g.layer_norm(x)),
        unary("op/softmax", a.clone(), |g, x| g.softmax(x)),
        unary("op/log_softmax", a.clone(), |g, x| g.log_softmax(x)),
        unary("op/l2_normalize", a.clone(), |g, x| g.l2_normalize(x)),
        case("op/sum", vec![a.clone()], |g, v| {
            let y = g.tanh(v[0])?;
            g.sum(y)
        }),
        case("op/mean", vec![a.clone()], |g, v| {
            let y = g.tanh(v[0])?;
            g.mean(y)
        }),
        case("op/concat", vec![a.clone(), c.clone()], |g, v| {
            let y = g.concat(&[v[0], v[1]], 0)?;
            let z = g.concat(&[v[0], v[1]], 1)?;
            let y = project(g, y, 7)?;
            let z = project(g, z, 8)?;
            g.add(y, z)
        }),
        unary("op/slice", batch.clone(), |g, x| g.slice(x, 1, 1, 2)),
        unary("op/index_select", a.clone(), |g, x| g.index_select(x, &[2, 0, 2])),
        unary("op/reshape", a.clone(), |g, x| {
            let y = g.reshape(x, &[2, 6])?;
            g.softmax(y)
        }),
        unary("op/permute", batch, |g, x| {
            let y = g.permute(x, &[2, 0, 1])?;
            g.softmax(y)
        }),
        unary("op/transpose", a.clone(), |g, x| {
            let y = g.transpose(x)?;
            g.softmax(y)
        }),
        unary("op/broadcast_leading", a, |g, x| {
            let y = g.broadcast_leading(x, 3)?;
            g.softmax(y)
        }),
    ]
}

/// A case whose parameters are the entries of `store`, bound by name.
fn store_case(
    name: &str,
    store: ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &mut Binder<f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    let names: Vec<String> = store.names().cloned().collect();
    let mut params: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    let n = params.len();
    params.extend(extra);
    case(name, params, move |g, vars| {
        let mut p = Binder::frozen(&store);
        for (name, &v) in names.iter().zip(vars) {
            p.bind(name.clone(), v);
        }
        f(g, &mut p, &vars[n..])
    })
}

fn vit_case(rng: &mut Rng, name: &str, grid: usize, side: usize, din: usize) -> GradCase {
    let mut cfg = ViTConfig::new(name, grid, din, 8);
    cfg.depth = 1;
    cfg.heads = 2;
    let mut store = ParamStore::new();
    cfg.init(rng.next_u64(), 0.3, &mut store);
    for (n, t) in store.iter_mut() {
        if n.ends_with(".bias") || n.ends_with(".beta") {
            *t = randn(rng, t.shape(), 0.1);
        }
    }
    let positions = cfg.crop_positions(side).expect("crop fits");
    let tokens = randn(rng, &[2, positions.len(), din], 1.0);
    let label = format!("vit/{name}");
    store_case(&label, store, vec![tokens], move |g, p, x| {
        let y = vit_forward(g, p, &cfg, x[0], &positions)?;
        project(g, y, 9)
    })
}

fn dino_case(rng: &mut Rng) -> GradCase {
    let (d, hidden, k) = (8, 6, 5);
    let mut store = ParamStore::new();
    for (n, shape) in dino_head_shapes("head", d, hidden, k) {
        store.insert(n.clone(), init_tensor(rng.next_u64(), &n, &shape, 0.4));
    }
    store.insert("head.fc.bias", randn(rng, &[hidden], 0.1));
    let x = randn(rng, &[4, d], 1.0);
    let teacher = randn(rng, &[4, k], 1.0);
    let center = randn(rng, &[k], 0.1);
    let targets = teacher_probs(&teacher, &center, 0.04).expect("valid teacher");
    store_case("dino/head_and_loss", store, vec![x], move |g, p, x| {
        let z = dino_head_forward(g, p, "head", x[0])?;
        dino_loss_with_targets(g, z, targets.clone(), 0.1)
    })
}

fn multitask_case(rng: &mut Rng) -> GradCase {
    let spec = |id, name: &str, classes, w| TaskSpec {
        task_id: id,
        name: name.into(),
        category: TaskCategory::Biomarker,
        class_count: classes,
        loss_weight: w,
    };
    let reg = TaskRegistry::new(vec![spec(0, "a", 3, 1.0), spec(1, "b", 2, 0.5), spec(2, "c", 2, 1.0)]).expect("valid registry");
    let d = 5;
    let mut store = ParamStore::new();
    for t in &reg.tasks {
        store.insert(format!("heads.{}.weight", t.name), randn(rng, &[d, t.class_count], 0.5));
        store.insert(format!("heads.{}.bias", t.name), randn(rng, &[t.class_count], 0.1));
    }
    let embed = randn(rng, &[4, d], 1.0);
    let labels = LabelBatch::new(
        (0..4).map(|i| format!("s{i}")).collect(),
        vec![
            vec![Some(2), None, Some(0), Some(1)],
            vec![None, Some(1), None, Some(0)],
            vec![None; 4],
        ],
        &reg,
    )
    .expect("valid labels");
    store_case("multitask/loss", store, vec![embed], move |g, p, x| {
        let mut logits = Vec::new();
        for t in &reg.tasks {
            let w = p.var(g, &format!("heads.{}.weight", t.name))?;
            let b = p.var(g, &format!("heads.{}.bias", t.name))?;
            logits.push(Some(head_forward(g, x[0], w, b)?));
        }
        multitask_loss(g, &logits, &labels)
    })
}

fn clam_case(rng: &mut Rng) -> GradCase {
    let shape = ClamShape {
        feature_dim: 4,
        hidden: 3,
        classes: 2,
        k_instances: 2,
    };
    let mut store = shape.init::<f64>(rng.next_u64());
    store.insert("clam.classifier.bias", randn(rng, &[2], 0.1));
    store.insert("clam.instance.bias", randn(rng, &[2], 0.1));
    let feats = randn(rng, &[6, 4], 1.0);
    store_case("clam/loss", store, vec![feats], move |g, p, x| Ok(clam_loss(g, p, x[0], 1, 2, 0.3)?.0))
}

fn all_grad_cases() -> Vec<GradCase> {
    let mut rng = Rng::new(2024);
    let mut cases = op_cases(&mut rng);
    cases.push(vit_case(&mut rng, "stage1", 2, 2, 6));
    cases.push(vit_case(&mut rng, "stage2", 4, 2, 8));
    cases.push(vit_case(&mut rng, "stage3", 2, 1, 8));
    cases.push(dino_case(&mut rng));
    cases.push(multitask_case(&mut rng));
    cases.push(clam_case(&mut rng));
    cases
}

/// Every gradient check, in a fixed order.
pub fn gradient_suite() -> Vec<CheckResult> {
    all_grad_cases()
        .into_iter()
        .map(|c| match finite_diff_report(&c.f, &c.params, STEP) {
            Ok(r) => CheckResult {
                name: format!("grad/{}", c.name),
                passed: r.max_rel_error < GRAD_TOLERANCE,
                detail: format!("max rel error {:.2e} over {} elements", r.max_rel_error, r.elements),
            },
            Err(e) => CheckResult {
                name: format!("grad/{}", c.name),
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

/// Registered op names that no gradient case exercises.
pub fn uncovered_ops() -> Vec<&'static str> {
    let names: Vec<String> = all_grad_cases().into_iter().map(|c| c.name).collect();
    Op::REGISTERED
        .iter()
        .copied()
        .filter(|op| !names.iter().any(|n| n.strip_prefix("op/").is_some_and(|s| s == *op || s.starts_with(&format!("{op}_")))))
        .collect()
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Random score/label sets of up to 20 items with heavy ties, both classes
/// present; returns the largest difference between the two AUROC methods.
pub fn auroc_oracle_gap(sets: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..sets {
        let n = 2 + rng.below(19);
        let levels = 1 + rng.below(6);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        worst = worst.max((auroc(&scores, &labels)? - auroc_brute_force(&scores, &labels)?).abs());
    }
    Ok(worst)
}

fn invariant_checks() -> Vec<CheckResult> {
    vec![
        check("invariant/auroc_oracle", || {
            let gap = auroc_oracle_gap(1000, 7)?;
            Ok((gap == 0.0, format!("largest gap {gap:e} over 1000 sets")))
        }),
        check("invariant/missing_task_masking", || {
            let reg = TaskRegistry::new(vec![
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
            ])?;
            let labels = LabelBatch::new(vec!["x".into(), "y".into()], vec![vec![Some(1), Some(0)], vec![None, None]], &reg)?;
            let run = |offset: f64| -> Result<(u64, Vec<u64>)> {
                let mut g = Graph::<f64>::new();
                let a = g.leaf(Tensor::from_f64(&[2, 2], &[0.3, -0.2, 1.1, 0.4])?, true)?;
                let b = g.leaf(Tensor::from_f64(&[2, 2], &[offset, -offset, 2.0 * offset, 0.0])?, true)?;
                let l = multitask_loss(&mut g, &[Some(a), Some(b)], &labels)?;
                let v = g.scalar_value(l)?.to_bits();
                let gr = g.backward(l)?;
                let ga = gr.get(a).map(|t| t.data().iter().map(|x| x.to_bits()).collect()).unwrap_or_default();
                Ok((v, ga))
            };
            let same = run(0.0)? == run(37.5)?;
            Ok((same, "perturbing a fully missing task changes nothing".into()))
        }),
        check("invariant/clam_permutation", || {
            let shape = ClamShape::default();
            let store = shape.init::<f64>(3);
            let mut rng = Rng::new(4);
            let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..32).map(|_| rng.normal()).collect()).collect();
            let mut perm: Vec<usize> = (0..10).collect();
            rng.shuffle(&mut perm);
            let logits = |order: &[usize]| -> Result<Vec<f64>> {
                let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
                let mut g = Graph::new();
                let mut p = Binder::frozen(&store);
                let f = g.constant(Tensor::new(vec![10, 32], data)?)?;
                let out = clam_forward(&mut g, &mut p, f, 4)?;
                let w = g.value(out.attention)?.data().iter().sum::<f64>();
                if (w - 1.0).abs() > 1e-6 {
                    return Err(crate::Error::Contract(format!("attention sums to {w}")));
                }
                Ok(g.value(out.logits)?.data().to_vec())
            };
            let a = logits(&(0..10).collect::<Vec<_>>())?;
            let b = logits(&perm)?;
            let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            Ok((gap < 1e-6, format!("logit gap {gap:.1e}")))
        }),
    ]
}

/// The full suite: gradient checks then invariants.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = gradient_suite();
    let missing = uncovered_ops();
    out.push(CheckResult {
        name: "grad/op_coverage".into(),
        passed: missing.is_empty(),
        detail: if missing.is_empty() {
            format!("{} registered ops covered", Op::REGISTERED.len())
        } else {
            format!("uncovered: {}", missing.join(", "))
        },
    });
    out.extend(invariant_checks());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_is_covered() {
        assert!(uncovered_ops().is_empty(), "{:?}", uncovered_ops());
    }

    #[test]
    fn auroc_matches_brute_force_on_a_few_sets() {
        assert_eq!(auroc_oracle_gap(50, 1).unwrap(), 0.0);
    }
}
