//! Masked reconstruction loss and mixed weighted cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridio::GridField;
use crate::labeling::LabelTensor;
use crate::nn::Fmap;
use crate::patching::{masked_pixels, MaskSet, PatchConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the one-hot target; `1 - beta` goes to the density target.
    pub beta: f64,
    /// Per-class weights. Empty means all ones.
    pub class_weights: Vec<f64>,
    /// Derive weights from training class proportions instead.
    pub inverse_frequency: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 0.25, class_weights: Vec::new(), inverse_frequency: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !self.class_weights.is_empty() {
            check_weights(&self.class_weights)?;
        }
        Ok(())
    }

    /// Resolved weights for `classes` classes. `proportions` are needed
    /// only in inverse-frequency mode.
    pub fn weights(&self, classes: usize, proportions: Option<&[f64]>) -> Result<Vec<f64>> {
        if self.inverse_frequency {
            let p = proportions.ok_or_else(|| Error::Config("inverse-frequency weights need class proportions".into()))?;
            if p.len() != classes {
                return Err(Error::Argument(format!("{} proportions for {classes} classes", p.len())));
            }
            return inverse_frequency_weights(p);
        }
        if self.class_weights.is_empty() {
            return Ok(vec![1.0; classes]);
        }
        if self.class_weights.len() != classes {
            return Err(Error::Config(format!("{} class weights for {classes} classes", self.class_weights.len())));
        }
        check_weights(&self.class_weights)?;
        Ok(self.class_weights.clone())
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|&v| v == 0.0) {
        return Err(Error::Config(format!("class weights {w:?} must be finite, non-negative and not all zero")));
    }
    Ok(())
}

/// `1/p_i` rescaled to mean one; classes never seen get the largest
/// observed weight.
pub fn inverse_frequency_weights(proportions: &[f64]) -> Result<Vec<f64>> {
    let inv: Vec<Option<f64>> = proportions.iter().map(|&p| (p > 0.0 && p.is_finite()).then(|| 1.0 / p)).collect();
    let max = inv.iter().flatten().copied().fold(f64::NAN, f64::max);
    if max.is_nan() {
        return Err(Error::Argument("no class has positive proportion".into()));
    }
    let w: Vec<f64> = inv.iter().map(|v| v.unwrap_or(max)).collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    Ok(w.iter().map(|v| v / mean).collect())
}

/// Mean over masked patches of the squared L2 error of each patch.
pub fn rec_loss(xhat: &GridField, x: &GridField, mask: &MaskSet, cfg: &PatchConfig) -> Result<f64> {
    if (xhat.n_vars, xhat.height, xhat.width) != (x.n_vars, x.height, x.width) {
        return Err(Error::Argument(format!(
            "reconstruction {}x{}x{} vs input {}x{}x{}",
            xhat.n_vars, xhat.height, xhat.width, x.n_vars, x.height, x.width
        )));
    }
    let flags = masked_pixels(mask, cfg, x.n_vars, x.height, x.width)?;
    if mask.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = xhat
        .values
        .iter()
        .zip(&x.values)
        .zip(&flags)
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / mask.len() as f64)
}

/// [`rec_loss`] on 64-bit maps with its gradient. `pixel_mask` flags
/// pixels of the `n_masked` masked patches.
pub fn rec_loss_grad(pred: &Fmap, target: &Fmap, pixel_mask: &[bool], n_masked: usize) -> Result<(f64, Fmap)> {
    if !pred.same_shape(target) || pixel_mask.len() != pred.data.len() {
        return Err(Error::Argument("reconstruction, target and mask shapes differ".into()));
    }
    let mut grad = Fmap::zeros(pred.c, pred.h, pred.w);
    if n_masked == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n_masked as f64;
    let mut sum = 0.0;
    for (i, &m) in pixel_mask.iter().enumerate() {
        if m {
            let d = pred.data[i] - target.data[i];
            sum += d * d;
            grad.data[i] = 2.0 * d * inv;
        }
    }
    Ok((sum * inv, grad))
}

fn check_seg_shapes(logits: &Fmap, y: &LabelTensor, ystar: &LabelTensor, w: &[f64]) -> Result<()> {
    for (name, t) in [("one-hot", y), ("density", ystar)] {
        if (t.classes, t.height, t.width) != (logits.c, logits.h, logits.w) {
            return Err(Error::Argument(format!(
                "{name} labels {}x{}x{} vs logits {}x{}x{}",
                t.classes, t.height, t.width, logits.c, logits.h, logits.w
            )));
        }
    }
    if w.len() != logits.c {
        return Err(Error::Argument(format!("{} weights for {} classes", w.len(), logits.c)));
    }
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

/// Pixel-mean of `-Σ_i w_i t_i log softmax(z)_i` with `t = β y + (1-β) y*`,
/// and its gradient with respect to the logits.
pub fn seg_loss_grad(logits: &Fmap, y: &LabelTensor, ystar: &LabelTensor, beta: f64, w: &[f64]) -> Result<(f64, Fmap)> {
    check_seg_shapes(logits, y, ystar, w)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Argument(format!("beta {beta} outside [0, 1]")));
    }
    let (c, hw) = (logits.c, logits.hw());
    let inv = 1.0 / hw as f64;
    let mut grad = Fmap::zeros(c, logits.h, logits.w);
    let mut total = 0.0;
    let mut z = vec![0.0; c];
    let mut t = vec![0.0; c];
    for p in 0..hw {
        for i in 0..c {
            let k = i * hw + p;
            z[i] = logits.data[k];
            t[i] = beta * y.probs[k] + (1.0 - beta) * ystar.probs[k];
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let wt: f64 = (0..c).map(|i| w[i] * t[i]).sum();
        for i in 0..c {
            let logp = z[i] - lse;
            total -= w[i] * t[i] * logp;
            grad.data[i * hw + p] = (logp.exp() * wt - w[i] * t[i]) * inv;
        }
    }
    Ok((total * inv, grad))
}

pub fn seg_loss(logits: &Fmap, y: &LabelTensor, ystar: &LabelTensor, cfg: &LossConfig) -> Result<f64> {
    let w = cfg.weights(logits.c, None)?;
    Ok(seg_loss_grad(logits, y, ystar, cfg.beta, &w)?.0)
}

/// Per-pixel softmax over the class axis.
pub fn softmax(logits: &Fmap) -> Fmap {
    let (c, hw) = (logits.c, logits.hw());
    let mut out = logits.clone();
    for p in 0..hw {
        let m = (0..c).map(|i| logits.data[i * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..c).map(|i| (logits.data[i * hw + p] - m).exp()).sum();
        for i in 0..c {
            out.data[i * hw + p] = (logits.data[i * hw + p] - m).exp() / s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::LabelKind;
    use crate::nn::gradcheck::{check_gradient, GradCheck};
    use crate::patching::make_mask;
    use crate::rng::{keyed, Stream};
    use rand::Rng;

    fn labels(c: usize, h: usize, w: usize, probs: Vec<f64>) -> LabelTensor {
        LabelTensor { classes: c, height: h, width: w, probs, kind: LabelKind::Density }
    }

    fn random_simplex(c: usize, hw: usize, seed: u64) -> LabelTensor {
        let mut rng = keyed(seed, Stream::GradCheck, &[c as u64]);
        let mut probs = vec![0.0; c * hw];
        for p in 0..hw {
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = v.iter().sum();
            for i in 0..c {
                probs[i * hw + p] = v[i] / s;
            }
        }
        labels(c, 1, hw, probs)
    }

    fn random_logits(c: usize, hw: usize, seed: u64) -> Fmap {
        let mut rng = keyed(seed, Stream::GradCheck, &[]);
        Fmap::from_vec(c, 1, hw, (0..c * hw).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let z = Fmap::zeros(3, 2, 2);
        for beta in [0.0, 0.25, 1.0] {
            let (l, _) = seg_loss_grad(&z, &random_simplex(3, 4, 1).reshape(2, 2), &random_simplex(3, 4, 2).reshape(2, 2), beta, &[1.0; 3]).unwrap();
            assert!((l - 3f64.ln()).abs() < 1e-12);
        }
    }

    impl LabelTensor {
        fn reshape(mut self, h: usize, w: usize) -> Self {
            self.height = h;
            self.width = w;
            self
        }
    }

    #[test]
    fn standard_cross_entropy_value() {
        let z = Fmap::from_vec(2, 1, 1, vec![2.0, 0.0]).unwrap();
        let y = labels(2, 1, 1, vec![1.0, 0.0]);
        let other = labels(2, 1, 1, vec![0.3, 0.7]);
        let (l, _) = seg_loss_grad(&z, &y, &other, 1.0, &[1.0, 1.0]).unwrap();
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((l - want).abs() < 1e-15);
        assert!((l - 0.1269).abs() < 1e-4);
        let (l0, _) = seg_loss_grad(&z, &other, &y, 0.0, &[1.0, 1.0]).unwrap();
        assert_eq!(l0, l);
    }

    #[test]
    fn shift_invariance_and_beta_linearity() {
        let (c, hw) = (3, 50);
        let z = random_logits(c, hw, 3);
        let (y, ys) = (random_simplex(c, hw, 4), random_simplex(c, hw, 5));
        let w = [0.5, 1.0, 2.0];
        let base = seg_loss_grad(&z, &y, &ys, 0.25, &w).unwrap().0;
        let mut shifted = z.clone();
        for p in 0..hw {
            for i in 0..c {
                shifted.data[i * hw + p] += p as f64 * 0.7 - 4.0;
            }
        }
        assert!((seg_loss_grad(&shifted, &y, &ys, 0.25, &w).unwrap().0 - base).abs() < 1e-9);
        let l1 = seg_loss_grad(&z, &y, &ys, 1.0, &w).unwrap().0;
        let l0 = seg_loss_grad(&z, &y, &ys, 0.0, &w).unwrap().0;
        for beta in [0.0, 0.1, 0.25, 0.5, 0.9, 1.0] {
            let lb = seg_loss_grad(&z, &y, &ys, beta, &w).unwrap().0;
            assert!((lb - (beta * l1 + (1.0 - beta) * l0)).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (c, hw) = (3, 40);
        let z = random_logits(c, hw, 6);
        let (y, ys) = (random_simplex(c, hw, 7), random_simplex(c, hw, 8));
        let w = [1.5, 0.5, 1.0];
        let (_, g) = seg_loss_grad(&z, &y, &ys, 0.25, &w).unwrap();
        let gc = GradCheck { eps: 1e-5, floor: 1e-8, samples: 120, seed: 9 };
        let e = check_gradient(&gc, &z.data, &g.data, |v| {
            seg_loss_grad(&Fmap { data: v.to_vec(), ..z.clone() }, &y, &ys, 0.25, &w).unwrap().0
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn descent_converges_to_mixed_target() {
        let y = labels(3, 1, 1, vec![0.0, 1.0, 0.0]);
        let ys = labels(3, 1, 1, vec![0.2, 0.5, 0.3]);
        let beta = 0.25;
        let mut z = Fmap::zeros(3, 1, 1);
        for _ in 0..20000 {
            let (_, g) = seg_loss_grad(&z, &y, &ys, beta, &[1.0; 3]).unwrap();
            for (a, b) in z.data.iter_mut().zip(&g.data) {
                *a -= 0.5 * b;
            }
        }
        let s = softmax(&z);
        for i in 0..3 {
            let t = beta * y.probs[i] + (1.0 - beta) * ys.probs[i];
            assert!((s.data[i] - t).abs() < 1e-4);
        }
        let s = softmax(&random_logits(3, 10, 10));
        for p in 0..10 {
            assert!(((0..3).map(|i| s.data[i * 10 + p]).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn seg_errors() {
        let z = Fmap::from_vec(2, 1, 1, vec![f64::NAN, 0.0]).unwrap();
        let y = labels(2, 1, 1, vec![1.0, 0.0]);
        assert!(matches!(seg_loss_grad(&z, &y, &y, 0.5, &[1.0, 1.0]), Err(Error::Numeric(_))));
        let z = Fmap::zeros(3, 1, 1);
        assert!(matches!(seg_loss_grad(&z, &y, &y, 0.5, &[1.0; 3]), Err(Error::Argument(_))));
        assert!(LossConfig { beta: 1.5, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { class_weights: vec![0.0, 0.0], ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { class_weights: vec![-1.0, 1.0], ..LossConfig::default() }.validate().is_err());
    }

    #[test]
    fn inverse_frequency() {
        let w = inverse_frequency_weights(&[0.5, 0.25, 0.25]).unwrap();
        assert!((w[0] - 0.6).abs() < 1e-12 && (w[1] - 1.2).abs() < 1e-12);
        let w = inverse_frequency_weights(&[0.8, 0.2, 0.0]).unwrap();
        assert_eq!(w[1], w[2]);
        let cfg = LossConfig { inverse_frequency: true, ..LossConfig::default() };
        assert!(cfg.weights(3, None).is_err());
        assert_eq!(LossConfig::default().weights(3, None).unwrap(), vec![1.0; 3]);
    }

    fn grid(n: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> GridField {
        GridField::new((0..n).map(|i| format!("v{i}")).collect(), h, w, (0..n * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn reconstruction_loss_conventions() {
        let cfg = PatchConfig { q: 2, p: 16 };
        let x = grid(4, 32, 32, |i| (i % 7) as f32);
        let off = grid(4, 32, 32, |i| (i % 7) as f32 + 1.0);
        let n = cfg.n_tokens(4, 32, 32);
        let mask = make_mask(n, 0.5, 3).unwrap();
        assert_eq!(rec_loss(&x, &x, &mask, &cfg).unwrap(), 0.0);
        assert_eq!(rec_loss(&off, &x, &mask, &cfg).unwrap(), 512.0);
        assert_eq!(rec_loss(&off, &x, &make_mask(n, 0.0, 3).unwrap(), &cfg).unwrap(), 0.0);
        assert!(rec_loss(&grid(4, 32, 16, |_| 0.0), &x, &mask, &cfg).is_err());

        let pred = Fmap::from_vec(4, 32, 32, off.to_f64()).unwrap();
        let tgt = Fmap::from_vec(4, 32, 32, x.to_f64()).unwrap();
        let flags = masked_pixels(&mask, &cfg, 4, 32, 32).unwrap();
        let (l, g) = rec_loss_grad(&pred, &tgt, &flags, mask.len()).unwrap();
        assert_eq!(l, 512.0);
        let gc = GradCheck { eps: 1e-4, floor: 1e-8, samples: 100, seed: 1 };
        let e = check_gradient(&gc, &pred.data, &g.data, |v| {
            rec_loss_grad(&Fmap { data: v.to_vec(), ..pred.clone() }, &tgt, &flags, mask.len()).unwrap().0
        });
        assert!(e < 1e-6);
    }
}
