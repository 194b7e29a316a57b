//! Teacher–student self-distillation with an EMA teacher, centring and
//! temperature sharpening.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Binder, ParamStore};
use crate::synth::Image;
use crate::tensor::{Element, Graph, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DinoConfig {
    pub tau_student: f64,
    pub tau_teacher: f64,
    /// Teacher EMA momentum.
    pub momentum: f64,
    pub center_momentum: f64,
    pub jitter: f64,
    pub flip_p: f64,
    /// Fraction of a region's area kept by the random crop.
    pub crop_area: f64,
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig {
            tau_student: 0.1,
            tau_teacher: 0.04,
            momentum: 0.996,
            center_momentum: 0.9,
            jitter: 0.1,
            flip_p: 0.5,
            crop_area: 0.75,
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.momentum) && unit(self.center_momentum) && unit(self.flip_p)) {
            return Err(Error::Config("DINO momenta and flip probability must lie in [0, 1]".into()));
        }
        if !(self.tau_student > 0.0 && self.tau_teacher > 0.0) {
            return Err(Error::Config("DINO temperatures must be positive".into()));
        }
        if !(self.crop_area > 0.0 && self.crop_area <= 1.0 && self.jitter >= 0.0) {
            return Err(Error::Config("crop area must lie in (0, 1] and jitter be nonnegative".into()));
        }
        Ok(())
    }
}

/// `x` `[B, d]` → prototype logits `[B, K]`: a hidden layer normalised over
/// the batch, GELU, L2 normalisation, then a linear layer whose columns are
/// unit-normalised. Rows of a batch are therefore not independent; batches
/// need at least two rows.
pub fn dino_head_forward<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, prefix: &str, x: Var) -> Result<Var> {
    let rows = g.shape(x).first().copied().unwrap_or(0);
    if rows < 2 {
        return Err(Error::InvalidShape(format!("{prefix}: batch of {rows}, the head needs at least 2 rows")));
    }
    let w = p.var(g, &format!("{prefix}.fc.weight"))?;
    let b = p.var(g, &format!("{prefix}.fc.bias"))?;
    let h = g.matmul(x, w)?;
    let h = batch_norm(g, h)?;
    let h = g.add(h, b)?;
    let h = g.gelu(h)?;
    let h = g.l2_normalize(h)?;
    let v = p.var(g, &format!("{prefix}.last.weight"))?;
    let vt = g.transpose(v)?;
    let vt = g.l2_normalize(vt)?;
    let w_last = g.transpose(vt)?;
    g.matmul(h, w_last)
}

/// Per-column standardisation of `[B, H]` over the batch axis.
fn batch_norm<T: Element>(g: &mut Graph<T>, h: Var) -> Result<Var> {
    let t = g.transpose(h)?;
    let t = g.layer_norm(t)?;
    g.transpose(t)
}

/// Row-wise `softmax((logits − center) / tau)`.
pub fn teacher_probs<T: Element>(logits: &Tensor<T>, center: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let k = *logits.shape().last().expect("rank ≥ 1");
    if center.numel() != k {
        return Err(Error::shape("teacher_probs", logits.shape(), center.shape()));
    }
    let inv = T::from_f64(1.0 / tau);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        for (v, &c) in row.iter_mut().zip(center.data()) {
            *v = (*v - c) * inv;
        }
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Ok(out)
}

/// `−mean_b Σ_k p_t[b,k] · log p_s[b,k]` with `p_t` taken from the current
/// value of `teacher` (a constant: no gradient reaches it or the centre) and
/// `p_s = softmax(student / tau_s)`.
pub fn dino_loss<T: Element>(
    g: &mut Graph<T>,
    student: Var,
    teacher: Var,
    center: &Tensor<T>,
    tau_s: f64,
    tau_t: f64,
) -> Result<Var> {
    let pt = teacher_probs(g.value(teacher)?, center, tau_t)?;
    dino_loss_with_targets(g, student, pt, tau_s)
}

/// [`dino_loss`] against precomputed teacher probabilities.
pub fn dino_loss_with_targets<T: Element>(g: &mut Graph<T>, student: Var, targets: Tensor<T>, tau_s: f64) -> Result<Var> {
    let shape = g.shape(student).to_vec();
    if targets.shape() != shape.as_slice() {
        return Err(Error::shape("dino_loss", &shape, targets.shape()));
    }
    let batch = if shape.len() > 1 { shape[0] } else { 1 };
    let pt = g.constant(targets)?;
    let z = g.scale(student, 1.0 / tau_s)?;
    let ls = g.log_softmax(z)?;
    let prod = g.mul(ls, pt)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0 / batch as f64)
}

/// Average of the two cross-view pairings.
pub fn symmetric_dino_loss<T: Element>(
    g: &mut Graph<T>,
    student: [Var; 2],
    teacher_probs: [Tensor<T>; 2],
    tau_s: f64,
) -> Result<Var> {
    let [pa, pb] = teacher_probs;
    let ab = dino_loss_with_targets(g, student[1], pa, tau_s)?;
    let ba = dino_loss_with_targets(g, student[0], pb, tau_s)?;
    let s = g.add(ab, ba)?;
    g.scale(s, 0.5)
}

/// Entropy (nats) of the batch-mean of row distributions `[B, K]`.
pub fn mean_distribution_entropy<T: Element>(probs: &Tensor<T>) -> f64 {
    let k = *probs.shape().last().expect("rank ≥ 1");
    let b = probs.numel() / k;
    let mut mean = vec![0.0; k];
    for row in probs.data().chunks(k) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64() / b as f64;
        }
    }
    -mean.iter().filter(|&&m| m > 0.0).map(|&m| m * m.ln()).sum::<f64>()
}

/// Which augmentations [`make_views`] applies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewOptions {
    pub flip_p: f64,
    pub jitter: f64,
    /// Area fraction of the random crop; `None` disables cropping.
    pub crop_area: Option<f64>,
}

impl ViewOptions {
    pub fn patch(cfg: &DinoConfig) -> Self {
        ViewOptions {
            flip_p: cfg.flip_p,
            jitter: cfg.jitter,
            crop_area: None,
        }
    }

    pub fn region(cfg: &DinoConfig) -> Self {
        ViewOptions {
            crop_area: Some(cfg.crop_area),
            ..Self::patch(cfg)
        }
    }
}

fn augment(img: &Image, rng: &mut Rng, opts: &ViewOptions) -> Image {
    let (h, w) = (img.height, img.width);
    let (ch, cw, oy, ox) = match opts.crop_area {
        Some(a) if a < 1.0 => {
            let ch = ((a.sqrt() * h as f64).round() as usize).clamp(1, h);
            let cw = ((a.sqrt() * w as f64).round() as usize).clamp(1, w);
            (ch, cw, rng.below(h - ch + 1), rng.below(w - cw + 1))
        }
        _ => (h, w, 0, 0),
    };
    let flip_y = rng.bernoulli(opts.flip_p);
    let flip_x = rng.bernoulli(opts.flip_p);
    let shift: Vec<f32> = (0..3).map(|_| rng.uniform_range(-opts.jitter, opts.jitter) as f32).collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            // Nearest-neighbour resize of the crop window back to full size.
            let mut sy = y * ch / h;
            let mut sx = x * cw / w;
            if flip_y {
                sy = ch - 1 - sy;
            }
            if flip_x {
                sx = cw - 1 - sx;
            }
            for (c, s) in shift.iter().enumerate() {
                let v = img.get(oy + sy, ox + sx, c);
                data.push(if opts.jitter > 0.0 { (v + s).clamp(0.0, 1.0) } else { v });
            }
        }
    }
    Image {
        height: h,
        width: w,
        data,
    }
}

/// Two independently augmented copies of `img`.
pub fn make_views(img: &Image, rng: &mut Rng, opts: &ViewOptions) -> (Image, Image) {
    let a = augment(img, rng, opts);
    let b = augment(img, rng, opts);
    (a, b)
}

/// EMA teacher mirroring a subset of the student plus its output centre.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<T> {
    pub params: ParamStore<T>,
    pub center: Tensor<T>,
    pub momentum: f64,
    pub center_momentum: f64,
}

impl<T: Element> TeacherState<T> {
    /// Copies the student parameters whose names start with any of `prefixes`.
    pub fn from_student(student: &ParamStore<T>, prefixes: &[&str], k: usize, cfg: &DinoConfig) -> Self {
        let mut params = ParamStore::new();
        for p in prefixes {
            params.extend(student.subset(p));
        }
        TeacherState {
            params,
            center: Tensor::zeros(&[k]),
            momentum: cfg.momentum,
            center_momentum: cfg.center_momentum,
        }
    }

    /// `θ_t ← m·θ_t + (1 − m)·θ_s` for every mirrored parameter.
    pub fn update(&mut self, student: &ParamStore<T>) -> Result<()> {
        teacher_update(&mut self.params, student, self.momentum)
    }

    pub fn update_center(&mut self, teacher_logits: &Tensor<T>) -> Result<()> {
        center_update(&mut self.center, teacher_logits, self.center_momentum)
    }
}

pub fn teacher_update<T: Element>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, m: f64) -> Result<()> {
    let (m, rest) = (T::from_f64(m), T::from_f64(1.0 - m));
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        if s.shape() != t.shape() {
            return Err(Error::shape("teacher_update", t.shape(), s.shape()));
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + rest * b;
        }
    }
    Ok(())
}

/// `c ← λ·c + (1 − λ)·mean_b logits[b]`.
pub fn center_update<T: Element>(center: &mut Tensor<T>, logits: &Tensor<T>, lambda: f64) -> Result<()> {
    let k = center.numel();
    if logits.rank() != 2 || logits.shape()[1] != k {
        return Err(Error::shape("center_update", logits.shape(), center.shape()));
    }
    let b = logits.shape()[0];
    let mut mean = vec![0.0f64; k];
    for row in logits.data().chunks(k) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    for (c, m) in center.data_mut().iter_mut().zip(mean) {
        *c = T::from_f64(lambda * c.as_f64() + (1.0 - lambda) * m / b as f64);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn uniform_student_gives_ln2() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(t(&[1, 2], &[0.3, 0.3])).unwrap();
        let te = g.constant(t(&[1, 2], &[5.0, -1.0])).unwrap();
        let l = dino_loss(&mut g, s, te, &Tensor::zeros(&[2]), 1.0, 0.04).unwrap();
        assert!((g.scalar_value(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn one_hot_teacher_example() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let l = dino_loss_with_targets(&mut g, s, t(&[1, 2], &[1.0, 0.0]), 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.scalar_value(l).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn head_needs_two_rows() {
        let model = crate::model::HierarchicalModel::<f64>::new(crate::model::ModelConfig::with_dims(8, 1, 2), 0).unwrap();
        let mut p = model.binder();
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::ones(&[1, 8])).unwrap();
        assert!(matches!(dino_head_forward(&mut g, &mut p, "dino_patch", one), Err(Error::InvalidShape(_))));
        let two = g.constant(Tensor::from_fn(&[2, 8], |i| i as f64 * 0.1)).unwrap();
        let out = dino_head_forward(&mut g, &mut p, "dino_patch", two).unwrap();
        assert_eq!(g.shape(out), [2, model.config.dino_prototypes]);
    }

    #[test]
    fn teacher_logits_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(t(&[1, 3], &[0.1, 0.5, -0.2]), true).unwrap();
        let te = g.leaf(t(&[1, 3], &[1.0, 0.0, 2.0]), true).unwrap();
        let l = dino_loss(&mut g, s, te, &Tensor::zeros(&[3]), 0.1, 0.04).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(te).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(s).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ema_examples() {
        let mut student = ParamStore::<f64>::new();
        student.insert("w", t(&[1], &[0.0]));
        for (m, expect) in [(1.0, 1.0), (0.0, 0.0), (0.9, 0.9)] {
            let mut teacher = ParamStore::<f64>::new();
            teacher.insert("w", t(&[1], &[1.0]));
            teacher_update(&mut teacher, &student, m).unwrap();
            assert!((teacher.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn center_examples() {
        let mut c = t(&[2], &[0.0, 0.0]);
        center_update(&mut c, &t(&[2, 2], &[2.0, -1.0, 0.0, -1.0]), 0.9).unwrap();
        assert!((c.data()[0] - 0.1).abs() < 1e-12 && (c.data()[1] + 0.1).abs() < 1e-12);
        let mut c = t(&[2], &[3.0, 4.0]);
        center_update(&mut c, &t(&[1, 2], &[9.0, 9.0]), 1.0).unwrap();
        assert_eq!(c.data(), &[3.0, 4.0]);
        center_update(&mut c, &t(&[2, 2], &[7.0, 7.0, 7.0, 7.0]), 0.0).unwrap();
        assert_eq!(c.data(), &[7.0, 7.0]);
    }

    #[test]
    fn identity_views_without_augmentation() {
        let img = Image::new(16, 16, (0..768).map(|i| (i % 255) as f32 / 255.0).collect()).unwrap();
        let opts = ViewOptions {
            flip_p: 0.0,
            jitter: 0.0,
            crop_area: None,
        };
        let (a, b) = make_views(&img, &mut Rng::new(1), &opts);
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn views_are_seeded_and_bounded() {
        let img = Image::new(64, 64, (0..64 * 64 * 3).map(|i| [0.0, 1.0, 0.95][i % 3]).collect()).unwrap();
        let opts = ViewOptions::region(&DinoConfig::default());
        let v1 = make_views(&img, &mut Rng::new(3), &opts);
        let v2 = make_views(&img, &mut Rng::new(3), &opts);
        assert_eq!(v1, v2);
        assert!(v1.0.data.iter().chain(&v1.1.data).all(|&v| (0.0..=1.0).contains(&v)));
    }
}
