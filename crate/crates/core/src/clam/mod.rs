//! Gated-attention multiple-instance aggregation over patch features, with
//! an instance-level clustering loss on the most and least attended patches.

mod adapt;

pub use adapt::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_tensor, Binder, ParamStore};
use crate::multitask::masked_cross_entropy;
use crate::tensor::{Element, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClamShape {
    pub feature_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub k_instances: usize,
}

impl Default for ClamShape {
    fn default() -> Self {
        ClamShape {
            feature_dim: 32,
            hidden: 16,
            classes: 2,
            k_instances: 4,
        }
    }
}

impl ClamShape {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.classes < 2 || self.k_instances == 0 {
            return Err(Error::Config(format!("invalid CLAM shape {self:?}")));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.feature_dim, self.hidden);
        vec![
            ("clam.attn_v.weight".into(), vec![d, h]),
            ("clam.attn_u.weight".into(), vec![d, h]),
            ("clam.attn_w.weight".into(), vec![h, 1]),
            ("clam.classifier.weight".into(), vec![d, self.classes]),
            ("clam.classifier.bias".into(), vec![self.classes]),
            ("clam.instance.weight".into(), vec![d, 2]),
            ("clam.instance.bias".into(), vec![2]),
        ]
    }

    /// Truncated-normal weights with `std = 1/sqrt(fan_in)`, zero biases.
    pub fn init<T: Element>(&self, seed: u64) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let std = (shape[0] as f64).sqrt().recip();
            let t = init_tensor(seed, &name, &shape, std);
            s.insert(name, t);
        }
        s
    }
}

/// Attention over `[n, d]` features: `softmax_i(w · (tanh(V f_i) ⊙ σ(U f_i)))`,
/// returned as `[1, n]`.
pub fn gated_attention<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, feats: Var) -> Result<Var> {
    let shape = g.shape(feats).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("gated_attention", &shape, &[1, shape.last().copied().unwrap_or(0)]));
    }
    let v = p.var(g, "clam.attn_v.weight")?;
    let u = p.var(g, "clam.attn_u.weight")?;
    let w = p.var(g, "clam.attn_w.weight")?;
    let a = g.matmul(feats, v)?;
    let a = g.tanh(a)?;
    let b = g.matmul(feats, u)?;
    let b = g.sigmoid(b)?;
    let gated = g.mul(a, b)?;
    let scores = g.matmul(gated, w)?;
    let scores = g.reshape(scores, &[1, shape[0]])?;
    g.softmax(scores)
}

/// Bag logits `[1, C]`, attention `[1, n]` and the `k` most and least
/// attended patch indices (ties broken by index).
#[derive(Clone, Debug)]
pub struct ClamOutput {
    pub logits: Var,
    pub attention: Var,
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
}

pub fn clam_forward<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, feats: Var, k: usize) -> Result<ClamOutput> {
    let n = g.shape(feats)[0];
    if k == 0 || n < k {
        return Err(Error::InvalidShape(format!("bag of {n} patches cannot supply {k} instances")));
    }
    let attention = gated_attention(g, p, feats)?;
    let bag = g.matmul(attention, feats)?;
    let w = p.var(g, "clam.classifier.weight")?;
    let b = p.var(g, "clam.classifier.bias")?;
    let z = g.matmul(bag, w)?;
    let logits = g.add(z, b)?;
    let weights = g.value(attention)?.to_f64_vec();
    let (top, bottom) = extremes(&weights, k);
    Ok(ClamOutput {
        logits,
        attention,
        top,
        bottom,
    })
}

/// Indices of the `k` largest and `k` smallest values, ties going to the
/// lower index. With at least `2k` values the two sets are disjoint.
pub fn extremes(values: &[f64], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let top = order[..k].to_vec();
    let disjoint = values.len() >= 2 * k;
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let bottom = order.into_iter().filter(|i| !disjoint || !top.contains(i)).take(k).collect();
    (top, bottom)
}

/// Binary cross-entropy of the instance classifier with `top` patches as
/// class 1 and `bottom` patches as class 0, averaged over the `2k` picks.
pub fn instance_cluster_loss<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, feats: Var, top: &[usize], bottom: &[usize]) -> Result<Var> {
    let picks: Vec<usize> = top.iter().chain(bottom).copied().collect();
    let labels: Vec<Option<usize>> = top.iter().map(|_| Some(1)).chain(bottom.iter().map(|_| Some(0))).collect();
    let sel = g.index_select(feats, &picks)?;
    let w = p.var(g, "clam.instance.weight")?;
    let b = p.var(g, "clam.instance.bias")?;
    let z = g.matmul(sel, w)?;
    let z = g.add(z, b)?;
    masked_cross_entropy(g, z, &labels)?.ok_or_else(|| Error::Contract("instance loss needs picks".into()))
}

/// `CE(bag logits, label) + λ · instance loss`, plus the forward outputs.
pub fn clam_loss<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, feats: Var, label: usize, k: usize, lambda: f64) -> Result<(Var, ClamOutput)> {
    let out = clam_forward(g, p, feats, k)?;
    let bag = masked_cross_entropy(g, out.logits, &[Some(label)])?.expect("label present");
    if lambda == 0.0 {
        return Ok((bag, out));
    }
    let inst = instance_cluster_loss(g, p, feats, &out.top, &out.bottom)?;
    let inst = g.scale(inst, lambda)?;
    Ok((g.add(bag, inst)?, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy_params(d: usize, h: usize) -> ParamStore<f64> {
        ClamShape {
            feature_dim: d,
            hidden: h,
            classes: 2,
            k_instances: 1,
        }
        .init(0)
    }

    fn identity_params() -> ParamStore<f64> {
        let mut s = toy_params(2, 2);
        let eye = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        s.insert("clam.attn_v.weight", eye.clone());
        s.insert("clam.attn_u.weight", eye);
        s.insert("clam.attn_w.weight", Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
        s
    }

    #[test]
    fn gated_attention_oracle() {
        let s = identity_params();
        let mut g = Graph::new();
        let mut p = Binder::frozen(&s);
        let f = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 2.0, 0.0]).unwrap()).unwrap();
        let a = gated_attention(&mut g, &mut p, f).unwrap();
        let w = g.value(a).unwrap().data().to_vec();
        assert!((w[0] - 0.4274).abs() < 1e-4 && (w[1] - 0.5726).abs() < 1e-4, "{w:?}");
    }

    #[test]
    fn single_and_identical_patches() {
        let s = toy_params(4, 3);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&s);
        let one = g.constant(Tensor::from_f64(&[1, 4], &[0.3, -1.0, 2.0, 0.1]).unwrap()).unwrap();
        let a = gated_attention(&mut g, &mut p, one).unwrap();
        assert_eq!(g.value(a).unwrap().data(), &[1.0]);
        let same = g.constant(Tensor::full(&[5, 4], 0.7)).unwrap();
        let a = gated_attention(&mut g, &mut p, same).unwrap();
        assert!(g.value(a).unwrap().data().iter().all(|&w| (w - 0.2).abs() < 1e-15));
    }

    #[test]
    fn permutation_invariant_logits() {
        let s = toy_params(4, 3);
        let mut rng = crate::tensor::Rng::new(3);
        let feats: Tensor<f64> = Tensor::from_fn(&[8, 4], |_| rng.normal());
        let perm = [3, 1, 7, 0, 5, 2, 6, 4];
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| feats.row(i).to_vec()).collect();
        let mut out = Vec::new();
        for t in [feats.clone(), Tensor::new(vec![8, 4], permuted).unwrap()] {
            let mut g = Graph::new();
            let mut p = Binder::frozen(&s);
            let f = g.constant(t).unwrap();
            let o = clam_forward(&mut g, &mut p, f, 2).unwrap();
            out.push(g.value(o.logits).unwrap().clone());
        }
        assert!(out[0].max_abs_diff(&out[1]) < 1e-6);
    }

    #[test]
    fn lambda_zero_is_bag_ce() {
        let s = toy_params(4, 3);
        let mut rng = crate::tensor::Rng::new(4);
        let feats: Tensor<f64> = Tensor::from_fn(&[6, 4], |_| rng.normal());
        let mut g = Graph::new();
        let mut p = Binder::frozen(&s);
        let f = g.constant(feats).unwrap();
        let (l, out) = clam_loss(&mut g, &mut p, f, 1, 2, 0.0).unwrap();
        let z = g.value(out.logits).unwrap().data().to_vec();
        let ce = -(z[1] - (z[0].exp() + z[1].exp()).ln());
        assert!((g.scalar_value(l).unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn confident_instances_give_tiny_loss() {
        let mut s = toy_params(1, 1);
        s.insert("clam.instance.weight", Tensor::from_f64(&[1, 2], &[-5.0, 5.0]).unwrap());
        s.insert("clam.instance.bias", Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let mut p = Binder::frozen(&s);
        let f = g.constant(Tensor::from_f64(&[2, 1], &[1.0, -1.0]).unwrap()).unwrap();
        let l = instance_cluster_loss(&mut g, &mut p, f, &[0], &[1]).unwrap();
        assert!(g.scalar_value(l).unwrap() <= 1e-3);
    }

    fn mat(s: &ParamStore<f64>, name: &str) -> (Vec<f64>, usize) {
        let t = s.get(name).unwrap();
        (t.data().to_vec(), *t.shape().last().unwrap())
    }

    fn affine(x: &[f64], (w, cols): &(Vec<f64>, usize)) -> Vec<f64> {
        (0..*cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum()).collect()
    }

    fn log_softmax_at(z: &[f64], c: usize) -> f64 {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        z[c] - m - z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    }

    fn scalar_clam(s: &ParamStore<f64>, feats: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let (v, u, w) = (mat(s, "clam.attn_v.weight"), mat(s, "clam.attn_u.weight"), mat(s, "clam.attn_w.weight"));
        let scores: Vec<f64> = feats
            .iter()
            .map(|f| {
                let a = affine(f, &v);
                let b = affine(f, &u);
                let gated: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.tanh() / (1.0 + (-y).exp())).collect();
                affine(&gated, &w)[0]
            })
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
        let att: Vec<f64> = scores.iter().map(|x| (x - m).exp() / z).collect();
        let d = feats[0].len();
        let bag: Vec<f64> = (0..d).map(|j| feats.iter().zip(&att).map(|(f, a)| a * f[j]).sum()).collect();
        let bias = s.get("clam.classifier.bias").unwrap().data().to_vec();
        let logits = affine(&bag, &mat(s, "clam.classifier.weight")).iter().zip(&bias).map(|(a, b)| a + b).collect();
        (logits, att)
    }

    fn random_bag(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::tensor::Rng::new(seed);
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    fn bag_var(g: &mut Graph<f64>, bag: &[Vec<f64>]) -> Var {
        let flat: Vec<f64> = bag.concat();
        g.constant(Tensor::new(vec![bag.len(), bag[0].len()], flat).unwrap()).unwrap()
    }

    #[test]
    fn logits_match_scalar_oracle() {
        let s = ClamShape::default().init::<f64>(11);
        let bag = random_bag(8, 32, 12);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&s);
        let f = bag_var(&mut g, &bag);
        let out = clam_forward(&mut g, &mut p, f, 4).unwrap();
        let (logits, att) = scalar_clam(&s, &bag);
        for (a, b) in g.value(out.logits).unwrap().data().iter().zip(&logits) {
            assert!((a - b).abs() < 1e-6);
        }
        let w = g.value(out.attention).unwrap().data().to_vec();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6 && w.iter().all(|&x| x >= 0.0));
        assert_eq!(out.top, extremes(&att, 4).0);
    }

    #[test]
    fn total_loss_matches_scalar_oracle() {
        let shape = ClamShape {
            feature_dim: 3,
            hidden: 2,
            classes: 2,
            k_instances: 1,
        };
        let s = shape.init::<f64>(13);
        let bag = random_bag(4, 3, 14);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&s);
        let f = bag_var(&mut g, &bag);
        let (loss, out) = clam_loss(&mut g, &mut p, f, 1, 1, 0.3).unwrap();
        let (logits, att) = scalar_clam(&s, &bag);
        let (top, bottom) = extremes(&att, 1);
        let ib = s.get("clam.instance.bias").unwrap().data().to_vec();
        let inst = |i: usize, c: usize| {
            let z: Vec<f64> = affine(&bag[i], &mat(&s, "clam.instance.weight")).iter().zip(&ib).map(|(a, b)| a + b).collect();
            -log_softmax_at(&z, c)
        };
        let expected = -log_softmax_at(&logits, 1) + 0.3 * (inst(top[0], 1) + inst(bottom[0], 0)) / 2.0;
        assert_eq!((out.top, out.bottom), (top, bottom));
        assert!((g.scalar_value(loss).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn extremes_break_ties_by_index() {
        let (top, bottom) = extremes(&[0.2, 0.5, 0.5, 0.1, 0.1], 2);
        assert_eq!(top, vec![1, 2]);
        assert_eq!(bottom, vec![3, 4]);
        let (top, bottom) = extremes(&[0.0, 1.0, 0.0, 0.0], 2);
        assert_eq!(top, vec![1, 0]);
        assert_eq!(bottom, vec![2, 3]);
    }
}
