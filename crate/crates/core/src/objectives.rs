//! Training losses for both stages and the SSIM / Jaccard metrics.

use crate::error::{Error, Result};
use crate::harness::rng::CitRng;
use crate::kernel::{Graph, Tensor, Var};

/// Loss weights; `mask_warp` is the extra warped-mask term of ablation B4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub mask: f64,
    pub reg: f64,
    pub mask_warp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            perceptual: 1.0,
            mask: 1.0,
            reg: 0.5,
            mask_warp: 0.0,
        }
    }
}

impl LossWeights {
    /// Warp L1, warped-mask L1 and grid regularization all at weight 1.
    pub fn b4() -> Self {
        LossWeights {
            reg: 1.0,
            mask_warp: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.perceptual, self.mask, self.reg, self.mask_warp];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("l1_loss", a.shape(), b.shape())?;
    Ok(a.zip_map(b, |x, y| (x - y).abs())?.mean())
}

impl Graph<'_> {
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("l1_loss", self.shape(a), self.shape(b))?;
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }
}

/// Accumulates `Σ weight·term`, skipping zero-weight terms.
fn weighted_total(g: &mut Graph<'_>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(w, t) in terms.iter().filter(|(w, _)| *w != 0.0) {
        let s = g.scale(t, w);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// `λ1·l1(ĉ, c_t) + λ_reg·reg(θ)`.
pub fn matching_loss(g: &mut Graph<'_>, warped: Var, target: Var, theta: Var, k: usize, w: &LossWeights) -> Result<Var> {
    let l1 = g.l1_loss(warped, target)?;
    let reg = g.grid_reg_loss(theta, k)?;
    weighted_total(g, &[(w.l1, l1), (w.reg, reg)])
}

/// `λ1·l1(ĉ, c_t) + λ2·l1(ĉ_m, c_tm) + λ_reg·reg(θ)`.
#[allow(clippy::too_many_arguments)]
pub fn matching_loss_b4(
    g: &mut Graph<'_>,
    warped: Var,
    target: Var,
    warped_mask: Var,
    target_mask: Var,
    theta: Var,
    k: usize,
    w: &LossWeights,
) -> Result<Var> {
    let l1 = g.l1_loss(warped, target)?;
    let l1m = g.l1_loss(warped_mask, target_mask)?;
    let reg = g.grid_reg_loss(theta, k)?;
    weighted_total(g, &[(w.l1, l1), (w.mask_warp, l1m), (w.reg, reg)])
}

/// Frozen, seed-determined conv pyramid standing in for pretrained perceptual features.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    /// `(weight [C_out × C_in × 3 × 3], bias [C_out])` per stride-2 stage.
    stages: Vec<(Tensor, Tensor)>,
}

pub const PERCEPTUAL_CHANNELS: [usize; 4] = [3, 8, 16, 32];

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let mut rng = CitRng::new(seed);
        let stages = PERCEPTUAL_CHANNELS
            .windows(2)
            .map(|io| {
                let bound = (6.0 / (io[0] * 9) as f64).sqrt();
                let w = Tensor::from_fn(&[io[1], io[0], 3, 3], |_| rng.uniform_in(-bound, bound));
                (w, Tensor::zeros(&[io[1]]))
            })
            .collect();
        PerceptualProxy { stages }
    }

    fn features(&self, g: &mut Graph<'_>, img: Var) -> Result<Vec<Var>> {
        let mut x = img;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.relu(y);
            out.push(x);
        }
        Ok(out)
    }

    /// Sum over stages of the mean absolute feature difference.
    pub fn loss(&self, g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
        same_shape("perceptual_loss", g.shape(a), g.shape(b))?;
        let fa = self.features(g, a)?;
        let fb = self.features(g, b)?;
        let mut terms = Vec::with_capacity(fa.len());
        for (x, y) in fa.into_iter().zip(fb) {
            terms.push((1.0, g.l1_loss(x, y)?));
        }
        weighted_total(g, &terms)
    }

    pub fn eval(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = self.loss(&mut g, av, bv)?;
        Ok(g.value(l).item())
    }
}

/// `λ1·l1(I_o, I_GT) + λ_p·perceptual(I_o, I_GT) + λ_mask·l1(M_o, c_tm)`.
#[allow(clippy::too_many_arguments)]
pub fn tryon_loss(
    g: &mut Graph<'_>,
    image: Var,
    target: Var,
    mask: Var,
    target_mask: Var,
    perceptual: &PerceptualProxy,
    w: &LossWeights,
) -> Result<Var> {
    let l1 = g.l1_loss(image, target)?;
    let p = if w.perceptual != 0.0 {
        perceptual.loss(g, image, target)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let lm = g.l1_loss(mask, target_mask)?;
    weighted_total(g, &[(w.l1, l1), (w.perceptual, p), (w.mask, lm)])
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-region separable Gaussian filter of one `h × w` plane.
fn blur(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, data range 1) averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a.shape(), b.shape())?;
    if a.rank() != 3 || a.dim(1) < SSIM_WINDOW || a.dim(2) < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{:?}: need [C x h x w] with h, w >= {SSIM_WINDOW}", a.shape()),
        ));
    }
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * plane..(ch + 1) * plane];
        let y = &b.data()[ch * plane..(ch + 1) * plane];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
        let mx = blur(x, h, w, &k);
        let my = blur(y, h, w, &k);
        let mxx = blur(&prod(|p, _| p * p), h, w, &k);
        let myy = blur(&prod(|_, q| q * q), h, w, &k);
        let mxy = blur(&prod(|p, q| p * q), h, w, &k);
        let n = mx.len();
        let mut s = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            s += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += s / n as f64;
    }
    Ok(total / c as f64)
}

pub const MASK_THRESHOLD: f64 = 0.5;

/// Intersection over union of masks binarized at 0.5; two empty masks score 1.
pub fn jaccard(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("jaccard", a.shape(), b.shape())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (p, q) = (x >= MASK_THRESHOLD, y >= MASK_THRESHOLD);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let a = Tensor::from_vec(vec![0.0, 0.0]);
        let b = Tensor::from_vec(vec![1.0, 3.0]);
        assert_eq!(l1_loss(&a, &b).unwrap(), 2.0);
        assert_eq!(l1_loss(&b, &a).unwrap(), 2.0);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert!(l1_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let m = |v: [f64; 4]| Tensor::new(&[2, 2], v.to_vec()).unwrap();
        let top = m([1.0, 1.0, 0.0, 0.0]);
        let left = m([1.0, 0.0, 1.0, 0.0]);
        assert_eq!(jaccard(&top, &left).unwrap(), 1.0 / 3.0);
        assert_eq!(jaccard(&top, &top).unwrap(), 1.0);
        assert_eq!(jaccard(&top, &m([0.0, 0.0, 1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(jaccard(&m([0.0; 4]), &m([0.2; 4])).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_follow_zero_variance_formula() {
        let a = Tensor::full(&[3, 12, 12], 0.5);
        let b = Tensor::full(&[3, 12, 12], 0.6);
        let expect = (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[3, 10, 12]), &Tensor::zeros(&[3, 10, 12])).is_err());
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(w[i], w[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn perceptual_proxy_is_deterministic_and_separates_patches() {
        let a = Tensor::full(&[3, 16, 16], 0.2);
        let mut b = a.clone();
        for c in 0..3 {
            for y in 4..12 {
                for x in 4..12 {
                    b.set(&[c, y, x], 1.2);
                }
            }
        }
        let p = PerceptualProxy::new(7);
        assert_eq!(p.eval(&a, &a).unwrap(), 0.0);
        let d = p.eval(&a, &b).unwrap();
        assert!(d > 0.0);
        assert_eq!(d, PerceptualProxy::new(7).eval(&b, &a).unwrap());
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let w = LossWeights {
            l1: 0.0,
            perceptual: 0.0,
            mask: 0.0,
            reg: 0.0,
            mask_warp: 0.0,
        };
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[3, 8, 8], 0.1));
        let b = g.input(Tensor::full(&[3, 8, 8], 0.9));
        let m = g.input(Tensor::full(&[1, 8, 8], 0.3));
        let n = g.input(Tensor::ones(&[1, 8, 8]));
        let l = tryon_loss(&mut g, a, b, m, n, &PerceptualProxy::new(1), &w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(LossWeights { reg: -1.0, ..w }.validate().is_err());
    }
}
