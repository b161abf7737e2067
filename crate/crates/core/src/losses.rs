//! Segmentation losses over per-pixel class probabilities.
//!
//! Every loss takes `pred` (N×M×H×W probabilities) and `gt` (one-hot, same
//! dims) and returns the scalar value together with its gradient with
//! respect to `pred`. Cross-entropy style losses are averaged over pixels;
//! dice losses accumulate soft precision and recall over the whole batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped here before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-7;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Wce,
    Focal,
    Wf,
    Dice,
    Wd,
    Fusion,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Ce,
        LossKind::Wce,
        LossKind::Focal,
        LossKind::Wf,
        LossKind::Dice,
        LossKind::Wd,
        LossKind::Fusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Wce => "wce",
            LossKind::Focal => "focal",
            LossKind::Wf => "wf",
            LossKind::Dice => "dice",
            LossKind::Wd => "wd",
            LossKind::Fusion => "fusion",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

/// Per-class weights in (PT, HT, BG[, OV]) order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    /// Entries lie in (0, 1) and sum to one.
    #[serde(default)]
    pub normalized: bool,
}

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("class weights must be finite and ≥ 0: {weights:?}")));
        }
        let normalized = weights.iter().all(|&w| w > 0.0 && w < 1.0)
            && (weights.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        Ok(Self { weights, normalized })
    }

    /// (PT, HT, BG, OV) = (0.3, 0.3, 0.1, 0.3).
    pub fn four_class_default() -> Self {
        Self::new(vec![0.3, 0.3, 0.1, 0.3]).expect("valid")
    }

    /// (PT, HT, BG) = (0.4, 0.5, 0.1).
    pub fn three_class_default() -> Self {
        Self::new(vec![0.4, 0.5, 0.1]).expect("valid")
    }

    pub fn default_for(classes: usize) -> Result<Self> {
        match classes {
            3 => Ok(Self::three_class_default()),
            4 => Ok(Self::four_class_default()),
            _ => Err(Error::Config(format!("no default weights for {classes} classes"))),
        }
    }

    pub fn uniform(m: usize) -> Self {
        Self::new(vec![1.0 / m as f64; m]).expect("valid")
    }

    pub fn ones(m: usize) -> Self {
        Self::new(vec![1.0; m]).expect("valid")
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn check_len(&self, m: usize) -> Result<()> {
        if self.weights.len() != m {
            return Err(Error::Config(format!(
                "{} class weights supplied for {m} classes",
                self.weights.len()
            )));
        }
        Ok(())
    }

    fn check_alpha(&self) -> Result<()> {
        if !self.normalized {
            return Err(Error::Config(format!(
                "focal alpha weights must each lie in (0,1) and sum to 1: {:?}",
                self.weights
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub weights: ClassWeights,
    #[serde(default = "default_smooth")]
    pub dice_smooth: f64,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_smooth() -> f64 {
    DEFAULT_DICE_SMOOTH
}

impl LossSpec {
    pub fn new(kind: LossKind, classes: usize) -> Result<Self> {
        Ok(Self {
            kind,
            gamma: DEFAULT_GAMMA,
            weights: ClassWeights::default_for(classes)?,
            dice_smooth: DEFAULT_DICE_SMOOTH,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!("dice_smooth must be > 0, got {}", self.dice_smooth)));
        }
        Ok(())
    }
}

fn check_pair<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, m, h, w) = pred.nchw()?;
    if gt.dims() != pred.dims() {
        return shape_err(format!("loss: pred dims {:?} vs gt dims {:?}", pred.dims(), gt.dims()));
    }
    Ok((n, m, h * w))
}

/// `mean_pixels Σ_m gt·w_m·(1−p)^γ·(−log p)` and its gradient.
fn focal_family<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    weights: Option<&ClassWeights>,
    gamma: f64,
) -> Result<(T, Tensor<T>)> {
    let (n, m, hw) = check_pair(pred, gt)?;
    if let Some(w) = weights {
        w.check_len(m)?;
    }
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be ≥ 0, got {gamma}")));
    }
    let g = T::lit(gamma);
    let eps = T::lit(LOG_CLAMP);
    let inv_pixels = T::one() / T::from_usize(n * hw).expect("count");
    let mut grad = Tensor::zeros(pred.dims());
    let mut total = T::zero();
    for s in 0..n {
        for ch in 0..m {
            let wm = weights.map_or(T::one(), |w| T::lit(w.weights[ch]));
            let off = (s * m + ch) * hw;
            for i in off..off + hw {
                let y = gt.data()[i];
                if y == T::zero() || wm == T::zero() {
                    continue;
                }
                let p = pred.data()[i];
                let (lp, dlp) = if p > eps { (p.ln(), T::one() / p) } else { (eps.ln(), T::zero()) };
                let q = T::one() - p;
                let modulate = q.powf(g);
                // d/dp (1−p)^γ = −γ(1−p)^(γ−1), zero when γ = 0 or p = 1.
                let dmod = if gamma == 0.0 || q == T::zero() {
                    T::zero()
                } else {
                    -g * q.powf(g - T::one())
                };
                let c = y * wm;
                total = total - c * modulate * lp;
                grad.data_mut()[i] = -c * (dmod * lp + modulate * dlp) * inv_pixels;
            }
        }
    }
    Ok((total * inv_pixels, grad))
}

/// Soft per-class precision/recall accumulated over the batch.
pub struct SoftCounts {
    pub intersection: Vec<f64>,
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
}

pub fn soft_counts<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<SoftCounts> {
    let (n, m, hw) = check_pair(pred, gt)?;
    let mut c = SoftCounts {
        intersection: vec![0.0; m],
        predicted: vec![0.0; m],
        actual: vec![0.0; m],
    };
    for s in 0..n {
        for ch in 0..m {
            let off = (s * m + ch) * hw;
            for i in off..off + hw {
                let (p, y) = (pred.data()[i].as_f64(), gt.data()[i].as_f64());
                c.intersection[ch] += p * y;
                c.predicted[ch] += p;
                c.actual[ch] += y;
            }
        }
    }
    Ok(c)
}

/// `1 − (2/M) Σ_m w_m·prec_m·rec_m / (prec_m + rec_m + s)` and its gradient.
fn dice_family<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    weights: Option<&ClassWeights>,
    smooth: f64,
) -> Result<(T, Tensor<T>)> {
    let (n, m, hw) = check_pair(pred, gt)?;
    if let Some(w) = weights {
        w.check_len(m)?;
    }
    if !(smooth > 0.0) {
        return Err(Error::Config(format!("dice smoothing must be > 0, got {smooth}")));
    }
    let s = T::lit(smooth);
    let scale = T::lit(2.0 / m as f64);
    let mut inter = vec![T::zero(); m];
    let mut psum = vec![T::zero(); m];
    let mut gsum = vec![T::zero(); m];
    for b in 0..n {
        for ch in 0..m {
            let off = (b * m + ch) * hw;
            for i in off..off + hw {
                let (p, y) = (pred.data()[i], gt.data()[i]);
                inter[ch] = inter[ch] + p * y;
                psum[ch] = psum[ch] + p;
                gsum[ch] = gsum[ch] + y;
            }
        }
    }
    let mut loss = T::one();
    // Per class: ∂L/∂I, ∂L/∂P where I = Σ p·y and P = Σ p.
    let mut d_inter = vec![T::zero(); m];
    let mut d_psum = vec![T::zero(); m];
    for ch in 0..m {
        let wm = weights.map_or(T::one(), |w| T::lit(w.weights[ch]));
        let (pd, gd) = (psum[ch] + s, gsum[ch] + s);
        let prec = inter[ch] / pd;
        let rec = inter[ch] / gd;
        let denom = prec + rec + s;
        let f = prec * rec / denom;
        loss = loss - scale * wm * f;
        let df_dprec = rec * (rec + s) / (denom * denom);
        let df_drec = prec * (prec + s) / (denom * denom);
        let c = -scale * wm;
        d_inter[ch] = c * (df_dprec / pd + df_drec / gd);
        d_psum[ch] = c * df_dprec * (-inter[ch] / (pd * pd));
    }
    let mut grad = Tensor::zeros(pred.dims());
    for b in 0..n {
        for ch in 0..m {
            let off = (b * m + ch) * hw;
            for i in off..off + hw {
                grad.data_mut()[i] = d_inter[ch] * gt.data()[i] + d_psum[ch];
            }
        }
    }
    Ok((loss, grad))
}

fn add_into<T: Real>(acc: &mut (T, Tensor<T>), part: (T, Tensor<T>)) {
    acc.0 = acc.0 + part.0;
    for (a, b) in acc.1.data_mut().iter_mut().zip(part.1.data()) {
        *a = *a + *b;
    }
}

pub fn ce_loss_grad<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    focal_family(pred, gt, None, 0.0)
}

pub fn wce_loss_grad<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    w: &ClassWeights,
) -> Result<(T, Tensor<T>)> {
    focal_family(pred, gt, Some(w), 0.0)
}

pub fn focal_loss_grad<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, gamma: f64) -> Result<(T, Tensor<T>)> {
    focal_family(pred, gt, None, gamma)
}

pub fn weighted_focal_loss_grad<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    alpha: &ClassWeights,
    gamma: f64,
) -> Result<(T, Tensor<T>)> {
    alpha.check_alpha()?;
    focal_family(pred, gt, Some(alpha), gamma)
}

pub fn dice_loss_grad<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, smooth: f64) -> Result<(T, Tensor<T>)> {
    dice_family(pred, gt, None, smooth)
}

pub fn weighted_dice_loss_grad<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    w: &ClassWeights,
    smooth: f64,
) -> Result<(T, Tensor<T>)> {
    dice_family(pred, gt, Some(w), smooth)
}

/// Weighted focal + weighted cross-entropy + weighted dice, one weight vector.
pub fn fusion_loss_grad<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    spec: &LossSpec,
) -> Result<(T, Tensor<T>)> {
    let mut acc = weighted_focal_loss_grad(pred, gt, &spec.weights, spec.gamma)?;
    add_into(&mut acc, wce_loss_grad(pred, gt, &spec.weights)?);
    add_into(&mut acc, weighted_dice_loss_grad(pred, gt, &spec.weights, spec.dice_smooth)?);
    Ok(acc)
}

/// Value and gradient of the loss selected by `spec`.
pub fn loss_and_grad<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    spec: &LossSpec,
) -> Result<(T, Tensor<T>)> {
    spec.validate()?;
    match spec.kind {
        LossKind::Ce => ce_loss_grad(pred, gt),
        LossKind::Wce => wce_loss_grad(pred, gt, &spec.weights),
        LossKind::Focal => focal_loss_grad(pred, gt, spec.gamma),
        LossKind::Wf => weighted_focal_loss_grad(pred, gt, &spec.weights, spec.gamma),
        LossKind::Dice => dice_loss_grad(pred, gt, spec.dice_smooth),
        LossKind::Wd => weighted_dice_loss_grad(pred, gt, &spec.weights, spec.dice_smooth),
        LossKind::Fusion => fusion_loss_grad(pred, gt, spec),
    }
}

pub fn loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, spec: &LossSpec) -> Result<T> {
    Ok(loss_and_grad(pred, gt, spec)?.0)
}

pub fn ce_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    Ok(ce_loss_grad(pred, gt)?.0)
}

pub fn wce_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, w: &ClassWeights) -> Result<T> {
    Ok(wce_loss_grad(pred, gt, w)?.0)
}

pub fn focal_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, gamma: f64) -> Result<T> {
    Ok(focal_loss_grad(pred, gt, gamma)?.0)
}

pub fn weighted_focal_loss<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    alpha: &ClassWeights,
    gamma: f64,
) -> Result<T> {
    Ok(weighted_focal_loss_grad(pred, gt, alpha, gamma)?.0)
}

pub fn dice_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, smooth: f64) -> Result<T> {
    Ok(dice_loss_grad(pred, gt, smooth)?.0)
}

pub fn weighted_dice_loss<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    w: &ClassWeights,
    smooth: f64,
) -> Result<T> {
    Ok(weighted_dice_loss_grad(pred, gt, w, smooth)?.0)
}

pub fn fusion_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, spec: &LossSpec) -> Result<T> {
    Ok(fusion_loss_grad(pred, gt, spec)?.0)
}

/// Append the loss of `probs` against `gt` to the tape as a scalar node.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    gt: &Tensor<T>,
    spec: &LossSpec,
) -> Result<Var> {
    let (value, grad) = loss_and_grad(tape.value(probs), gt, spec)?;
    tape.scalar(probs, value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single pixel, 4 classes, gt class `k`, with `p` on class `k` and the
    /// remainder split evenly.
    fn pixel(k: usize, p: f64) -> (Tensor<f64>, Tensor<f64>) {
        let pred = Tensor::from_fn(&[1, 4, 1, 1], |c| if c == k { p } else { (1.0 - p) / 3.0 });
        let gt = Tensor::from_fn(&[1, 4, 1, 1], |c| if c == k { 1.0 } else { 0.0 });
        (pred, gt)
    }

    #[test]
    fn ce_values() {
        let (_, gt) = pixel(1, 1.0);
        assert_eq!(ce_loss(&gt, &gt).unwrap(), 0.0);
        let (p, gt) = pixel(1, 0.25);
        assert!((ce_loss(&p, &gt).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((4f64.ln() - 1.38629).abs() < 1e-5);
        let (p, gt) = pixel(0, 0.7);
        assert!((ce_loss(&p, &gt).unwrap() - 0.35667).abs() < 1e-5);
    }

    #[test]
    fn wce_values() {
        let w = ClassWeights::three_class_default();
        let pred = Tensor::from_vec(&[1, 3, 1, 1], vec![0.25, 0.25, 0.5]).unwrap();
        let gt = Tensor::from_vec(&[1, 3, 1, 1], vec![0.0, 0.0, 1.0]).unwrap();
        let v = wce_loss(&pred, &gt, &w).unwrap();
        assert!((v - 0.1 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.06931).abs() < 1e-5);
        let zero = ClassWeights::new(vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(wce_loss(&pred, &gt, &zero).unwrap(), 0.0);
        assert!(wce_loss(&pred, &gt, &ClassWeights::four_class_default()).is_err());
    }

    #[test]
    fn focal_values() {
        let (p, gt) = pixel(2, 1.0);
        assert_eq!(focal_loss(&p, &gt, 2.0).unwrap(), 0.0);
        let (p, gt) = pixel(2, 0.5);
        let v = focal_loss(&p, &gt, 2.0).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.17329).abs() < 1e-5);
        assert!(focal_loss(&p, &gt, -1.0).is_err());
    }

    #[test]
    fn weighted_focal_values() {
        let (p, gt) = pixel(3, 0.5);
        let a = ClassWeights::four_class_default();
        let v = weighted_focal_loss(&p, &gt, &a, 2.0).unwrap();
        assert!((v - 0.3 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.05199).abs() < 1e-5);
        let u = weighted_focal_loss(&p, &gt, &ClassWeights::uniform(4), 2.0).unwrap();
        assert!((u - 0.25 * focal_loss(&p, &gt, 2.0).unwrap()).abs() < 1e-15);
        let (_, gt) = pixel(3, 1.0);
        assert_eq!(weighted_focal_loss(&gt, &gt, &a, 2.0).unwrap(), 0.0);
        let bad = ClassWeights::new(vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(weighted_focal_loss(&p, &gt, &bad, 2.0), Err(Error::Config(_))));
    }

    fn all_classes_gt() -> Tensor<f64> {
        // 2×2 image with one pixel of each class.
        Tensor::from_fn(&[1, 4, 2, 2], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 })
    }

    #[test]
    fn dice_values() {
        let gt = all_classes_gt();
        assert!(dice_loss(&gt, &gt, 1e-6).unwrap().abs() < 1e-4);
        let wd = weighted_dice_loss(&gt, &gt, &ClassWeights::four_class_default(), 1e-6).unwrap();
        assert!((wd - 0.75).abs() < 1e-4);
        // Uniform prediction: I = 0.25, P = 1, G = 1 → prec = rec = 0.25.
        // A prediction with prec = rec = 0.5: each class gets half of its mass right.
        let pred = Tensor::from_fn(&[1, 4, 2, 2], |i| {
            let (c, px) = (i / 4, i % 4);
            if c == px || (c + 1) % 4 == px { 0.5 } else { 0.0 }
        });
        let v = dice_loss(&pred, &gt, 1e-12).unwrap();
        assert!((v - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fusion_is_sum_of_parts() {
        let gt = all_classes_gt();
        let spec = LossSpec::new(LossKind::Fusion, 4).unwrap();
        let v = fusion_loss(&gt, &gt, &spec).unwrap();
        assert!((v - 0.75).abs() < 1e-4);
    }

    #[test]
    fn loss_kind_parses() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("tversky".parse::<LossKind>().is_err());
    }
}
