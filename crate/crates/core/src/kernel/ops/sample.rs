//! Differentiable bilinear sampling with normalized coordinates.
//!
//! Coordinates follow the corner-aligned convention: `-1` and `+1` are the
//! centers of the first and last pixel, so an identity grid reproduces the
//! input exactly. Out-of-range coordinates are clamped to the border.

use crate::error::{Error, Result};
use crate::kernel::graph::{Graph, Var};
use crate::kernel::tensor::Tensor;

/// Interpolation footprint of one coordinate along one axis.
#[derive(Clone, Copy, Debug)]
struct Axis {
    i0: usize,
    i1: usize,
    frac: f64,
    /// d(pixel coordinate)/d(normalized coordinate), zero when clamped.
    dpix: f64,
}

fn axis(coord: f64, size: usize) -> Axis {
    if size == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            frac: 0.0,
            dpix: 0.0,
        };
    }
    let scale = (size - 1) as f64 / 2.0;
    let mut raw = (coord + 1.0) * scale;
    // Snap round-off so pixel-center coordinates read pixels exactly.
    let nearest = raw.round();
    if (raw - nearest).abs() < 1e-10 {
        raw = nearest;
    }
    let max = (size - 1) as f64;
    let (pix, dpix) = if raw < 0.0 {
        (0.0, 0.0)
    } else if raw > max {
        (max, 0.0)
    } else {
        (raw, scale)
    };
    let i0 = (pix.floor() as usize).min(size - 2);
    Axis {
        i0,
        i1: i0 + 1,
        frac: pix - i0 as f64,
        dpix,
    }
}

fn check(img: &Tensor, grid: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (is, gs) = (img.shape(), grid.shape());
    if is.len() != 3 || gs.len() != 3 || gs[2] != 2 {
        return Err(Error::shape("bilinear_sample", format!("image {is:?}, grid {gs:?}")));
    }
    Ok((is[0], is[1], is[2], gs[0], gs[1]))
}

/// Samples `img: [C × h × w]` at `grid: [h' × w' × 2]` (x then y) giving `[C × h' × w']`.
pub fn bilinear_sample(img: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (c, h, w, oh, ow) = check(img, grid)?;
    grid.ensure_finite("sampling grid")?;
    let (src, gd) = (img.data(), grid.data());
    let mut out = vec![0.0; c * oh * ow];
    for p in 0..oh * ow {
        let ax = axis(gd[2 * p], w);
        let ay = axis(gd[2 * p + 1], h);
        for ch in 0..c {
            let base = ch * h * w;
            let v00 = src[base + ay.i0 * w + ax.i0];
            let v01 = src[base + ay.i0 * w + ax.i1];
            let v10 = src[base + ay.i1 * w + ax.i0];
            let v11 = src[base + ay.i1 * w + ax.i1];
            let top = v00 + ax.frac * (v01 - v00);
            let bottom = v10 + ax.frac * (v11 - v10);
            out[ch * oh * ow + p] = top + ay.frac * (bottom - top);
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// The corner-aligned identity grid of size `h × w`.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    let norm = |i: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    Tensor::from_fn(&[h, w, 2], |i| if i[2] == 0 { norm(i[1], w) } else { norm(i[0], h) })
}

impl Graph<'_> {
    pub fn bilinear_sample(&mut self, img: Var, grid: Var) -> Result<Var> {
        let out = bilinear_sample(self.value(img), self.value(grid))?;
        Ok(self.push(
            out,
            &[img, grid],
            Box::new(|cx| {
                let (img, grid) = (cx.inputs[0], cx.inputs[1]);
                let (c, h, w, oh, ow) = check(img, grid).unwrap();
                let (src, gd, g) = (img.data(), grid.data(), cx.grad.data());
                let mut dimg = cx.needs(0).then(|| vec![0.0; c * h * w]);
                let mut dgrid = cx.needs(1).then(|| vec![0.0; oh * ow * 2]);
                for p in 0..oh * ow {
                    let ax = axis(gd[2 * p], w);
                    let ay = axis(gd[2 * p + 1], h);
                    let (fx, fy) = (ax.frac, ay.frac);
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for ch in 0..c {
                        let go = g[ch * oh * ow + p];
                        let base = ch * h * w;
                        let (i00, i01) = (base + ay.i0 * w + ax.i0, base + ay.i0 * w + ax.i1);
                        let (i10, i11) = (base + ay.i1 * w + ax.i0, base + ay.i1 * w + ax.i1);
                        if let Some(d) = dimg.as_mut() {
                            d[i00] += go * (1.0 - fx) * (1.0 - fy);
                            d[i01] += go * fx * (1.0 - fy);
                            d[i10] += go * (1.0 - fx) * fy;
                            d[i11] += go * fx * fy;
                        }
                        if dgrid.is_some() {
                            let (v00, v01, v10, v11) = (src[i00], src[i01], src[i10], src[i11]);
                            gx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                            gy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                    }
                    if let Some(d) = dgrid.as_mut() {
                        d[2 * p] = gx * ax.dpix;
                        d[2 * p + 1] = gy * ay.dpix;
                    }
                }
                vec![
                    dimg.map(|d| Tensor::new(img.shape(), d).unwrap()),
                    dgrid.map(|d| Tensor::new(grid.shape(), d).unwrap()),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_grid_is_exact() {
        let img = Tensor::from_fn(&[2, 5, 7], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64 * 0.37);
        let out = bilinear_sample(&img, &identity_grid(5, 7)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn midpoint_interpolates() {
        let img = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let grid = Tensor::new(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(bilinear_sample(&img, &grid).unwrap().data(), &[0.5]);
    }

    #[test]
    fn out_of_range_clamps_to_border() {
        let img = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grid = Tensor::new(&[1, 2, 2], vec![-5.0, -5.0, 9.0, 9.0]).unwrap();
        assert_eq!(bilinear_sample(&img, &grid).unwrap().data(), &[1.0, 4.0]);
    }

    #[test]
    fn rejects_non_finite_grid() {
        let img = Tensor::zeros(&[1, 2, 2]);
        let grid = Tensor::new(&[1, 1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(bilinear_sample(&img, &grid).is_err());
    }
}
