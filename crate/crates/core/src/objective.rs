//! Segmentation losses as fused graph ops: cross-entropy, soft Dice, their
//! weighted combination and the deep-supervision sum.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, Scalar, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1.0;

/// Integer labels laid out as `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBatch {
    shape: [usize; 3],
    data: Vec<u32>,
}

impl MaskBatch {
    pub fn new(shape: [usize; 3], data: Vec<u32>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("mask", "length", format!("{:?} does not hold {} labels", shape, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn image(&self, i: usize) -> &[u32] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[i * plane..(i + 1) * plane]
    }

    /// Rejects any label outside the classes a `classes`-channel map can score.
    /// A single channel is a sigmoid map over labels {0, 1}.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        let limit = classes.max(2);
        match self.data.iter().find(|&&v| v as usize >= limit) {
            Some(&value) => Err(Error::Label { value: value as usize, classes: limit }),
            None => Ok(()),
        }
    }
}

/// CE and Dice weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got α={alpha}, β={beta}")));
        }
        if alpha == 0.0 && beta == 0.0 {
            return Err(Error::Config("loss weights α and β cannot both be zero".into()));
        }
        Ok(Self { alpha, beta })
    }

    /// 1/1 for binary problems, 0.4/0.6 for multi-organ ones.
    pub fn for_classes(classes: usize) -> Self {
        if classes <= 2 {
            Self { alpha: 1.0, beta: 1.0 }
        } else {
            Self { alpha: 0.4, beta: 0.6 }
        }
    }
}

fn check_pair<T: Scalar>(logits: &Tensor<T>, y: &MaskBatch, op: &'static str) -> Result<[usize; 4]> {
    let [n, k, h, w] = logits.dims4(op)?;
    if [n, h, w] != y.shape() {
        return Err(Error::shape(op, "labels", format!("logits {:?} vs labels {:?}", logits.shape(), y.shape())));
    }
    y.check_labels(k)?;
    Ok([n, k, h, w])
}

/// Per-pixel class probabilities (softmax over channels, or sigmoid for one channel).
pub fn class_probabilities<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, h, w] = logits.dims4("probabilities")?;
    if k == 1 {
        return Ok(logits.map(sigmoid));
    }
    let plane = h * w;
    let x = logits.data();
    let mut p = vec![T::zero(); x.len()];
    for b in 0..n {
        for i in 0..plane {
            let idx = |c: usize| (b * k + c) * plane + i;
            let mx = (0..k).map(|c| x[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for c in 0..k {
                let e = (x[idx(c)] - mx).exp();
                p[idx(c)] = e;
                s += e;
            }
            for c in 0..k {
                p[idx(c)] /= s;
            }
        }
    }
    Tensor::new(logits.shape(), p)
}

/// Pushes `∂L/∂p` back through the probability map onto the logits.
fn probs_to_logit_grad<T: Scalar>(p: &Tensor<T>, gp: &[T]) -> Vec<T> {
    let [n, k, h, w] = p.dims4("probabilities").expect("checked");
    let pd = p.data();
    if k == 1 {
        return pd.iter().zip(gp).map(|(&q, &g)| g * q * (T::one() - q)).collect();
    }
    let plane = h * w;
    let mut gx = vec![T::zero(); pd.len()];
    for b in 0..n {
        for i in 0..plane {
            let idx = |c: usize| (b * k + c) * plane + i;
            let dot: T = (0..k).map(|c| gp[idx(c)] * pd[idx(c)]).sum();
            for c in 0..k {
                gx[idx(c)] = pd[idx(c)] * (gp[idx(c)] - dot);
            }
        }
    }
    gx
}

impl<T: Scalar> Graph<T> {
    /// Mean pixelwise cross-entropy.
    pub fn ce_loss(&mut self, logits: Var, y: &MaskBatch) -> Result<Var> {
        let x = self.rc(logits);
        let [n, k, h, w] = check_pair(&x, y, "ce_loss")?;
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let labels = y.data();
        let mut total = T::zero();
        let mut grad = vec![T::zero(); x.len()];
        if k == 1 {
            for (i, (&z, g)) in x.data().iter().zip(grad.iter_mut()).enumerate() {
                let t = T::of(labels[i] as f64);
                // log(1 + e^z) − t·z written to stay finite for large |z|
                total += z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p();
                *g = (sigmoid(z) - t) / count;
            }
        } else {
            let p = class_probabilities(&x)?;
            let pd = p.data();
            for b in 0..n {
                for i in 0..plane {
                    let t = labels[b * plane + i] as usize;
                    let idx = |c: usize| (b * k + c) * plane + i;
                    let mx = (0..k).map(|c| x.data()[idx(c)]).fold(T::neg_infinity(), T::max);
                    let lse = mx + (0..k).map(|c| (x.data()[idx(c)] - mx).exp()).sum::<T>().ln();
                    total += lse - x.data()[idx(t)];
                    for c in 0..k {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        grad[idx(c)] = (pd[idx(c)] - onehot) / count;
                    }
                }
            }
        }
        let gx = Rc::new(Tensor::new(x.shape(), grad)?);
        let vjp = move |gy: &Tensor<T>, _: &[bool]| vec![Some(gx.map(|v| v * gy.data()[0]))];
        Ok(self.push(Tensor::scalar(total / count), &[logits], Box::new(vjp)))
    }

    /// `1 − mean_c (2Σp·y + ε)/(Σp + Σy + ε)`, sums over batch and pixels, every class included.
    pub fn dice_loss(&mut self, logits: Var, y: &MaskBatch) -> Result<Var> {
        let x = self.rc(logits);
        let [n, k, h, w] = check_pair(&x, y, "dice_loss")?;
        let plane = h * w;
        let p = class_probabilities(&x)?;
        let eps = T::of(DICE_SMOOTH);
        let labels = y.data();
        // a single sigmoid channel scores the foreground label 1
        let target = |c: usize| if k == 1 { 1 } else { c as u32 };
        let mut inter = vec![T::zero(); k];
        let mut psum = vec![T::zero(); k];
        let mut ysum = vec![T::zero(); k];
        for b in 0..n {
            for c in 0..k {
                for i in 0..plane {
                    let q = p.data()[(b * k + c) * plane + i];
                    psum[c] += q;
                    if labels[b * plane + i] == target(c) {
                        inter[c] += q;
                        ysum[c] += T::one();
                    }
                }
            }
        }
        let kt = T::of(k as f64);
        let mut mean = T::zero();
        for c in 0..k {
            mean += (inter[c] + inter[c] + eps) / (psum[c] + ysum[c] + eps);
        }
        let loss = T::one() - mean / kt;

        let mut gp = vec![T::zero(); p.len()];
        for b in 0..n {
            for c in 0..k {
                let den = psum[c] + ysum[c] + eps;
                let num = inter[c] + inter[c] + eps;
                for i in 0..plane {
                    let yi = if labels[b * plane + i] == target(c) { T::one() } else { T::zero() };
                    gp[(b * k + c) * plane + i] = -((yi + yi) * den - num) / (den * den * kt);
                }
            }
        }
        let gx = Rc::new(Tensor::new(x.shape(), probs_to_logit_grad(&p, &gp))?);
        let vjp = move |gy: &Tensor<T>, _: &[bool]| vec![Some(gx.map(|v| v * gy.data()[0]))];
        Ok(self.push(Tensor::scalar(loss), &[logits], Box::new(vjp)))
    }

    /// `α·CE + β·Dice`; a zero-weight term is left out of the graph.
    pub fn composite_loss(&mut self, logits: Var, y: &MaskBatch, weights: LossWeights) -> Result<Var> {
        let weights = LossWeights::new(weights.alpha, weights.beta)?;
        let ce = if weights.alpha > 0.0 {
            let l = self.ce_loss(logits, y)?;
            Some(self.scale(l, T::of(weights.alpha)))
        } else {
            None
        };
        let dice = if weights.beta > 0.0 {
            let l = self.dice_loss(logits, y)?;
            Some(self.scale(l, T::of(weights.beta)))
        } else {
            None
        };
        match (ce, dice) {
            (Some(a), Some(b)) => self.add(a, b),
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => unreachable!("weights validated"),
        }
    }

    /// Unweighted sum of the composite loss over exactly three prediction maps.
    pub fn total_loss(&mut self, maps: &[Var], y: &MaskBatch, weights: LossWeights) -> Result<Var> {
        if maps.len() != 3 {
            return Err(Error::Config(format!("total loss takes exactly 3 prediction maps, got {}", maps.len())));
        }
        let l1 = self.composite_loss(maps[0], y, weights)?;
        let l2 = self.composite_loss(maps[1], y, weights)?;
        let l3 = self.composite_loss(maps[2], y, weights)?;
        let s = self.add(l1, l2)?;
        self.add(s, l3)
    }
}

/// Soft Dice loss on a probability map `[N, K, H, W]` (one channel means foreground).
pub fn soft_dice_from_probabilities<T: Scalar>(probs: &Tensor<T>, y: &MaskBatch) -> Result<T> {
    let [n, k, h, w] = check_pair(probs, y, "soft_dice")?;
    let plane = h * w;
    let eps = T::of(DICE_SMOOTH);
    let mut mean = T::zero();
    for c in 0..k {
        let target = if k == 1 { 1 } else { c as u32 };
        let (mut inter, mut ps, mut ys) = (T::zero(), T::zero(), T::zero());
        for b in 0..n {
            for i in 0..plane {
                let q = probs.data()[(b * k + c) * plane + i];
                ps += q;
                if y.data()[b * plane + i] == target {
                    inter += q;
                    ys += T::one();
                }
            }
        }
        mean += (inter + inter + eps) / (ps + ys + eps);
    }
    Ok(T::one() - mean / T::of(k as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Mode};

    fn scalar_of(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn ce_hand_values() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let y = MaskBatch::new([1, 2, 2], vec![0, 1, 2, 3]).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let l = g.ce_loss(x, &y).unwrap();
        assert!((scalar_of(&g, l) - 4f64.ln()).abs() < 1e-12);

        let y = MaskBatch::new([1, 1, 1], vec![1]).unwrap();
        let x = g.constant(Tensor::new(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
        let l = g.ce_loss(x, &y).unwrap();
        assert!((scalar_of(&g, l) + 0.75f64.ln()).abs() < 1e-12);

        let x = g.constant(Tensor::new(&[1, 2, 1, 1], vec![-40.0, 40.0]).unwrap());
        let l = g.ce_loss(x, &y).unwrap();
        assert!(scalar_of(&g, l) < 1e-12);
    }

    #[test]
    fn binary_ce_matches_two_class_form() {
        // a sigmoid logit z equals a softmax pair (0, z)
        let z = [0.3, -1.2, 2.5, 0.0];
        let y = MaskBatch::new([1, 2, 2], vec![1, 0, 1, 0]).unwrap();
        let mut g = Graph::<f64>::new(Mode::Train);
        let one = g.constant(Tensor::new(&[1, 1, 2, 2], z.to_vec()).unwrap());
        let mut pair = vec![0.0; 4];
        pair.extend_from_slice(&z);
        let two = g.constant(Tensor::new(&[1, 2, 2, 2], pair).unwrap());
        let a = g.ce_loss(one, &y).unwrap();
        let b = g.ce_loss(two, &y).unwrap();
        assert!((scalar_of(&g, a) - scalar_of(&g, b)).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_hand_case() {
        let y = MaskBatch::new([1, 2, 2], vec![1, 0, 0, 0]).unwrap();
        let p = Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((soft_dice_from_probabilities(&p, &y).unwrap() - 0.25f64).abs() < 1e-15);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let side = 64;
        let labels: Vec<u32> = (0..side * side).map(|i| (i % 3 == 0) as u32).collect();
        let y = MaskBatch::new([1, side, side], labels.clone()).unwrap();
        let big = 60.0;
        let mut g = Graph::<f64>::new(Mode::Train);
        let perfect: Vec<f64> = (0..2).flat_map(|c| labels.iter().map(move |&l| if l == c { big } else { -big })).collect();
        let x = g.constant(Tensor::new(&[1, 2, side, side], perfect.clone()).unwrap());
        let l = g.dice_loss(x, &y).unwrap();
        assert!(scalar_of(&g, l).abs() < 1e-4);
        let flipped: Vec<f64> = perfect.iter().map(|v| -v).collect();
        let x = g.constant(Tensor::new(&[1, 2, side, side], flipped).unwrap());
        let l = g.dice_loss(x, &y).unwrap();
        assert!(scalar_of(&g, l) > 0.999 && scalar_of(&g, l) < 1.0);
    }

    #[test]
    fn label_out_of_range_is_named() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let x = g.constant(Tensor::zeros(&[1, 3, 1, 2]));
        let y = MaskBatch::new([1, 1, 2], vec![0, 7]).unwrap();
        let err = g.ce_loss(x, &y).unwrap_err();
        assert!(err.to_string().contains('7'));
        assert!(g.dice_loss(x, &y).is_err());
        let x = g.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let y = MaskBatch::new([1, 1, 2], vec![0, 2]).unwrap();
        assert!(g.ce_loss(x, &y).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(-0.1, 1.0).is_err());
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(f64::NAN, 1.0).is_err());
        assert_eq!(LossWeights::for_classes(2), LossWeights { alpha: 1.0, beta: 1.0 });
        assert_eq!(LossWeights::for_classes(9), LossWeights { alpha: 0.4, beta: 0.6 });
    }

    #[test]
    fn composite_and_total_algebra() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let y = MaskBatch::new([1, 2, 2], vec![1, 0, 2, 1]).unwrap();
        let x = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| (i as f64 * 0.37).sin()));
        let ce = g.ce_loss(x, &y).unwrap();
        let dice = g.dice_loss(x, &y).unwrap();
        let only_ce = g.composite_loss(x, &y, LossWeights::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(scalar_of(&g, only_ce), scalar_of(&g, ce));
        let w = LossWeights::new(0.4, 0.6).unwrap();
        let mixed = g.composite_loss(x, &y, w).unwrap();
        let expect = 0.4 * scalar_of(&g, ce) + 0.6 * scalar_of(&g, dice);
        assert!((scalar_of(&g, mixed) - expect).abs() < 1e-12);
        let total = g.total_loss(&[x, x, x], &y, w).unwrap();
        assert!((scalar_of(&g, total) - 3.0 * scalar_of(&g, mixed)).abs() < 1e-12);
        assert!(g.total_loss(&[x, x], &y, w).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let y = MaskBatch::new([2, 3, 3], (0..18).map(|i| (i * 7 % 3) as u32).collect()).unwrap();
        let x0 = Tensor::from_fn(&[2, 3, 3, 3], |i| ((i * 37 % 17) as f64 / 17.0 - 0.5) * 1.5);
        for which in 0..3 {
            let err = grad_check(
                |g, x| match which {
                    0 => g.ce_loss(x, &y),
                    1 => g.dice_loss(x, &y),
                    _ => g.composite_loss(x, &y, LossWeights::new(0.4, 0.6).unwrap()),
                },
                &x0,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "loss {which}: {err}");
        }
        let yb = MaskBatch::new([1, 3, 3], (0..9).map(|i| (i % 2) as u32).collect()).unwrap();
        let xb = Tensor::from_fn(&[1, 1, 3, 3], |i| (i as f64 * 0.7).cos());
        for which in 0..2 {
            let err = grad_check(|g, x| if which == 0 { g.ce_loss(x, &yb) } else { g.dice_loss(x, &yb) }, &xb, 1e-6).unwrap();
            assert!(err < 1e-6, "binary loss {which}: {err}");
        }
    }
}
