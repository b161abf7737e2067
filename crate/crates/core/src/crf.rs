//! Fully connected CRF post-processing by mean-field inference, and the
//! CRFH relabeling rule that lets only background pixels change.
//!
//! Pairwise kernels are evaluated exactly inside a window of radius
//! `ceil(3σ)` around each pixel. Each kernel's message is divided by the
//! kernel's total weight at that pixel unless normalization is disabled.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::labelcodec::{Class, LabelMap};
use crate::losses::LOG_CLAMP;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfConfig {
    pub n_iters: usize,
    pub spatial_sigma: f64,
    pub bilateral_sigma_xy: f64,
    pub bilateral_sigma_intensity: f64,
    pub spatial_weight: f64,
    pub bilateral_weight: f64,
    pub normalize: bool,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            n_iters: 5,
            spatial_sigma: 3.0,
            bilateral_sigma_xy: 40.0,
            bilateral_sigma_intensity: 20.0,
            spatial_weight: 3.0,
            bilateral_weight: 5.0,
            normalize: true,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Config("CRF needs at least one iteration".into()));
        }
        let sigmas = [self.spatial_sigma, self.bilateral_sigma_xy, self.bilateral_sigma_intensity];
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("CRF sigmas must be positive: {sigmas:?}")));
        }
        if !(self.spatial_weight >= 0.0 && self.bilateral_weight >= 0.0) {
            return Err(Error::Config("CRF kernel weights must be ≥ 0".into()));
        }
        Ok(())
    }

    fn has_pairwise(&self) -> bool {
        self.spatial_weight > 0.0 || self.bilateral_weight > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelabelPolicy {
    /// Plain argmax of the CRF marginals.
    Unrestricted,
    /// Only BG pixels may change, and only to HT or PT.
    Crfh,
}

/// Gaussian over squared pixel distance, tabulated by offset.
struct OffsetTable {
    radius: isize,
    values: Vec<f64>,
}

impl OffsetTable {
    fn new(sigma: f64) -> Self {
        let radius = (3.0 * sigma).ceil() as isize;
        let side = (2 * radius + 1) as usize;
        let mut values = vec![0.0; side * side];
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let d2 = (dx * dx + dy * dy) as f64;
                values[((dy + radius) as usize) * side + (dx + radius) as usize] =
                    (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        Self { radius, values }
    }

    fn get(&self, dx: isize, dy: isize) -> f64 {
        let side = (2 * self.radius + 1) as usize;
        self.values[((dy + self.radius) as usize) * side + (dx + self.radius) as usize]
    }
}

/// Mean-field marginals of the dense CRF with unaries `−ln p` taken from
/// `unary` (1×C×H×W probabilities) over the grayscale `image` (row-major
/// H×W). With both kernel weights zero, `unary` is returned unchanged.
pub fn meanfield<T: Real>(unary: &Tensor<T>, image: &[u8], cfg: &CrfConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (n, c, h, w) = unary.nchw()?;
    if n != 1 {
        return shape_err("meanfield expects a single sample");
    }
    if image.len() != h * w {
        return shape_err(format!("meanfield: image has {} pixels, prediction {}×{}", image.len(), h, w));
    }
    if !cfg.has_pairwise() {
        return Ok(unary.clone());
    }
    let hw = h * w;
    let u: Vec<f64> = unary.data().iter().map(|p| -p.as_f64().max(LOG_CLAMP).ln()).collect();
    let mut q = vec![0.0; c * hw];
    normalize_into(&mut q, |k, i| -u[k * hw + i], c, hw);

    let spatial = OffsetTable::new(cfg.spatial_sigma);
    let bilateral = OffsetTable::new(cfg.bilateral_sigma_xy);
    let inv = 1.0 / (2.0 * cfg.bilateral_sigma_intensity * cfg.bilateral_sigma_intensity);
    let intensity: Vec<f64> = (0..256).map(|d| (-((d * d) as f64) * inv).exp()).collect();

    let mut msg = vec![0.0; c * hw];
    let mut acc_s = vec![0.0; c];
    let mut acc_b = vec![0.0; c];
    for _ in 0..cfg.n_iters {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = y as usize * w + x as usize;
                acc_s.iter_mut().for_each(|v| *v = 0.0);
                acc_b.iter_mut().for_each(|v| *v = 0.0);
                let (mut ks, mut kb) = (0.0, 0.0);
                if cfg.spatial_weight > 0.0 {
                    let r = spatial.radius;
                    for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                        for xx in (x - r).max(0)..(x + r + 1).min(w as isize) {
                            let j = yy as usize * w + xx as usize;
                            if j == i {
                                continue;
                            }
                            let k = spatial.get(xx - x, yy - y);
                            ks += k;
                            for (l, a) in acc_s.iter_mut().enumerate() {
                                *a += k * q[l * hw + j];
                            }
                        }
                    }
                }
                if cfg.bilateral_weight > 0.0 {
                    let r = bilateral.radius;
                    let ii = image[i];
                    for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                        for xx in (x - r).max(0)..(x + r + 1).min(w as isize) {
                            let j = yy as usize * w + xx as usize;
                            if j == i {
                                continue;
                            }
                            let k = bilateral.get(xx - x, yy - y) * intensity[ii.abs_diff(image[j]) as usize];
                            kb += k;
                            for (l, a) in acc_b.iter_mut().enumerate() {
                                *a += k * q[l * hw + j];
                            }
                        }
                    }
                }
                let ns = if cfg.normalize && ks > 0.0 { 1.0 / ks } else { 1.0 };
                let nb = if cfg.normalize && kb > 0.0 { 1.0 / kb } else { 1.0 };
                for l in 0..c {
                    msg[l * hw + i] = cfg.spatial_weight * acc_s[l] * ns + cfg.bilateral_weight * acc_b[l] * nb;
                }
            }
        }
        // Potts: the penalty for label l is the message mass on every other label.
        normalize_into(
            &mut q,
            |k, i| {
                let total: f64 = (0..c).map(|l| msg[l * hw + i]).sum();
                -u[k * hw + i] - (total - msg[k * hw + i])
            },
            c,
            hw,
        );
    }
    Ok(Tensor::from_vec(unary.dims(), q.into_iter().map(T::lit).collect())?)
}

/// `q[k][i] = softmax_k(logit(k, i))` for every pixel.
fn normalize_into(q: &mut [f64], logit: impl Fn(usize, usize) -> f64, c: usize, hw: usize) {
    let mut buf = vec![0.0; c];
    for i in 0..hw {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = logit(k, i);
        }
        let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for b in buf.iter_mut() {
            *b = (*b - m).exp();
            z += *b;
        }
        for (k, b) in buf.iter().enumerate() {
            q[k * hw + i] = b / z;
        }
    }
}

/// Keep `pre` wherever it is not BG; BG pixels take `post` only if it is
/// HT or PT.
pub fn crfh_filter(pre: &LabelMap, post: &LabelMap) -> Result<LabelMap> {
    if (pre.width(), pre.height(), pre.mode()) != (post.width(), post.height(), post.mode()) {
        return shape_err("crfh_filter: label maps differ in size or mode");
    }
    let classes = pre
        .classes()
        .iter()
        .zip(post.classes())
        .map(|(&a, &b)| match (a, b) {
            (Class::Bg, Class::Ht | Class::Pt) => b,
            _ => a,
        })
        .collect();
    LabelMap::new(pre.width(), pre.height(), pre.mode(), classes)
}

/// Post-processed label map for one prediction.
pub fn apply_crf<T: Real>(
    pred: &Tensor<T>,
    image: &[u8],
    cfg: &CrfConfig,
    policy: RelabelPolicy,
) -> Result<LabelMap> {
    let post = LabelMap::from_probs(&meanfield(pred, image, cfg)?)?;
    match policy {
        RelabelPolicy::Unrestricted => Ok(post),
        RelabelPolicy::Crfh => crfh_filter(&LabelMap::from_probs(pred)?, &post),
    }
}
