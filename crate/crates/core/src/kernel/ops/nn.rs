//! Neural-network primitives: softmax, normalization, convolutions, patching.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel::graph::{Graph, Var};
use crate::kernel::ops::linalg::{gemm, MatRef};
use crate::kernel::tensor::Tensor;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", x.shape())));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n).map(|k| d[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (d[base + k * inner] - max).exp();
                d[base + k * inner] = e;
                total += e;
            }
            for k in 0..n {
                d[base + k * inner] /= total;
            }
        }
    }
    Ok(out)
}

/// Fixed sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(..)`.
pub fn positional_embedding(len: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Divisibility {
            what: "positional embedding dim",
            value: dim,
            divisor: 2,
        });
    }
    Ok(Tensor::from_fn(&[len, dim], |idx| {
        let (pos, j) = (idx[0] as f64, idx[1]);
        let freq = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (pos / freq).sin()
        } else {
            (pos / freq).cos()
        }
    }))
}

/// Output spatial size of a strided, zero-padded convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < kernel || stride == 0 {
        return Err(Error::shape("conv2d", format!("input {input} too small for kernel {kernel}")));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.ho * self.wo;
        let mut out = vec![0.0; self.c * self.kh * self.kw * cols];
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(ch * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, cols_data: &[f64]) -> Vec<f64> {
        let cols = self.ho * self.wo;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(ch * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl Graph<'_> {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |c| {
                let (outer, n, inner) = split_axis(c.output.shape(), axis);
                let (y, g) = (c.output.data(), c.grad.data());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..n {
                            let j = base + k * inner;
                            dx[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(c.output.shape(), dx).unwrap())]
            }),
        ))
    }

    /// Per-row normalization of `x: [L × d]`, scaled by `gamma` and shifted by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (rows, d) = (xs[0], xs[1]);
        let normalize = move |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut xhat = vec![0.0; rows * d];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for k in 0..d {
                    xhat[r * d + k] = (row[k] - mean) * is;
                }
            }
            (xhat, inv_std)
        };
        let (xhat, _) = normalize(self.value(x).data());
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[i % d] + bv[i % d])
            .collect();
        let out = Tensor::new(&xs, out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |c| {
                let (xhat, inv_std) = normalize(c.inputs[0].data());
                let g = c.grad.data();
                let gamma = c.inputs[1].data();
                let dx = c.needs(0).then(|| {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..d).map(|k| g[r * d + k] * gamma[k]).collect();
                        let m1 = gh.iter().sum::<f64>() / d as f64;
                        let m2 = (0..d).map(|k| gh[k] * xhat[r * d + k]).sum::<f64>() / d as f64;
                        for k in 0..d {
                            dx[r * d + k] = inv_std[r] * (gh[k] - m1 - xhat[r * d + k] * m2);
                        }
                    }
                    Tensor::new(&[rows, d], dx).unwrap()
                });
                let dgamma = c.needs(1).then(|| {
                    let mut dg = vec![0.0; d];
                    for i in 0..rows * d {
                        dg[i % d] += g[i] * xhat[i];
                    }
                    Tensor::from_vec(dg)
                });
                let dbeta = c.needs(2).then(|| {
                    let mut db = vec![0.0; d];
                    for i in 0..rows * d {
                        db[i % d] += g[i];
                    }
                    Tensor::from_vec(db)
                });
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// Length-preserving 1-D convolution over the token axis.
    ///
    /// `x: [L × d_in]`, `kernel: [k × d_in × d_out]` with `k` odd and zero padding `(k-1)/2`.
    pub fn temporal_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 2 || ks.len() != 3 || ks[1] != xs[1] {
            return Err(Error::shape("temporal_conv1d", format!("x {xs:?}, kernel {ks:?}")));
        }
        if ks[0] % 2 == 0 {
            return Err(Error::Invalid(format!("temporal kernel size must be odd, got {}", ks[0])));
        }
        let (len, din, k, dout) = (xs[0], xs[1], ks[0], ks[2]);
        let pad = k / 2;
        // Tap j reads row t + j - pad for output row t; returns the valid output range.
        let span = move |j: usize| -> Option<(usize, usize)> {
            let lo = pad.saturating_sub(j);
            let hi = (len + pad).saturating_sub(j).min(len);
            (lo < hi).then_some((lo, hi))
        };
        let mut out = vec![0.0; len * dout];
        {
            let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
            for j in 0..k {
                let Some((t0, t1)) = span(j) else { continue };
                let s0 = t0 + j - pad;
                let rows = t1 - t0;
                gemm(
                    MatRef::new(&xv[s0 * din..(s0 + rows) * din], rows, din),
                    MatRef::new(&kv[j * din * dout..(j + 1) * din * dout], din, dout),
                    &mut out[t0 * dout..t1 * dout],
                    1.0,
                );
            }
        }
        let out = Tensor::new(&[len, dout], out)?;
        Ok(self.push(
            out,
            &[x, kernel],
            Box::new(move |c| {
                let (xv, kv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut dx = c.needs(0).then(|| vec![0.0; len * din]);
                let mut dk = c.needs(1).then(|| vec![0.0; k * din * dout]);
                for j in 0..k {
                    let Some((t0, t1)) = span(j) else { continue };
                    let s0 = t0 + j - pad;
                    let rows = t1 - t0;
                    let gm = MatRef::new(&g[t0 * dout..t1 * dout], rows, dout);
                    if let Some(dx) = dx.as_mut() {
                        let km = MatRef::new(&kv[j * din * dout..(j + 1) * din * dout], din, dout);
                        gemm(gm, km.t(), &mut dx[s0 * din..(s0 + rows) * din], 1.0);
                    }
                    if let Some(dk) = dk.as_mut() {
                        let xm = MatRef::new(&xv[s0 * din..(s0 + rows) * din], rows, din);
                        gemm(xm.t(), gm, &mut dk[j * din * dout..(j + 1) * din * dout], 1.0);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(&[len, din], d).unwrap()),
                    dk.map(|d| Tensor::new(&[k, din, dout], d).unwrap()),
                ]
            }),
        ))
    }

    /// 2-D convolution of `x: [C × H × W]` with `weight: [O × C × kh × kw]` and optional `bias: [O]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::shape("conv2d", format!("x {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom {
            c: xs[0],
            h: xs[1],
            w: xs[2],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: conv_out_size(xs[1], ws[2], stride, pad)?,
            wo: conv_out_size(xs[2], ws[3], stride, pad)?,
        };
        let o = ws[0];
        let ckk = geom.c * geom.kh * geom.kw;
        let npix = geom.ho * geom.wo;
        let cols = Arc::new(geom.im2col(self.value(x).data()));
        let mut out = vec![0.0; o * npix];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (oc, chunk) in out.chunks_mut(npix).enumerate() {
                chunk.fill(bv[oc]);
            }
        }
        gemm(
            MatRef::new(self.value(weight).data(), o, ckk),
            MatRef::new(&cols, ckk, npix),
            &mut out,
            1.0,
        );
        let out = Tensor::new(&[o, geom.ho, geom.wo], out)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |c| {
                let g = MatRef::new(c.grad.data(), o, npix);
                let dx = c.needs(0).then(|| {
                    let mut dcols = vec![0.0; ckk * npix];
                    gemm(MatRef::new(c.inputs[1].data(), o, ckk).t(), g, &mut dcols, 0.0);
                    Tensor::new(&[geom.c, geom.h, geom.w], geom.col2im(&dcols)).unwrap()
                });
                let dw = c.needs(1).then(|| {
                    let mut d = vec![0.0; o * ckk];
                    gemm(g, MatRef::new(&cols, ckk, npix).t(), &mut d, 0.0);
                    Tensor::new(c.inputs[1].shape(), d).unwrap()
                });
                let mut grads = vec![dx, dw];
                if c.inputs.len() == 3 {
                    grads.push(c.needs(2).then(|| {
                        Tensor::from_vec(c.grad.data().chunks(npix).map(|r| r.iter().sum()).collect())
                    }));
                }
                grads
            }),
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[C × H × W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x);
        let out = Tensor::from_fn(&[c, 2 * h, 2 * w], |i| src.at(&[i[0], i[1] / 2, i[2] / 2]));
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], d).unwrap())]
            }),
        ))
    }

    /// Normalizes every column of `x: [C × L]` to unit L2 norm (`eps` guards zero columns).
    pub fn l2_normalize_columns(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize_columns", format!("{s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let norms = move |x: &[f64]| -> Vec<f64> {
            (0..cols)
                .map(|j| ((0..rows).map(|i| x[i * cols + j] * x[i * cols + j]).sum::<f64>() + eps).sqrt())
                .collect()
        };
        let xv = self.value(x).data();
        let n = norms(xv);
        let out: Vec<f64> = xv.iter().enumerate().map(|(i, v)| v / n[i % cols]).collect();
        let out = Tensor::new(&s, out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |c| {
                let (x, g) = (c.inputs[0].data(), c.grad.data());
                let n = norms(x);
                let mut d = vec![0.0; rows * cols];
                for j in 0..cols {
                    let dot: f64 = (0..rows).map(|i| g[i * cols + j] * x[i * cols + j]).sum();
                    let n3 = n[j] * n[j] * n[j];
                    for i in 0..rows {
                        let k = i * cols + j;
                        d[k] = g[k] / n[j] - x[k] * dot / n3;
                    }
                }
                vec![Some(Tensor::new(&[rows, cols], d).unwrap())]
            }),
        ))
    }

    /// Output element `i` takes input element `index[i]`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", src.len())));
        }
        let out = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |c| {
                let mut d = Tensor::zeros(c.inputs[0].shape());
                let dd = d.data_mut();
                for (o, &i) in index.iter().enumerate() {
                    dd[i] += c.grad.data()[o];
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Non-overlapping `P × P` patches of `[C × h × w]` as rows of `[T × C·P·P]`.
    pub fn patchify(&mut self, img: Var, patch: usize) -> Result<Var> {
        let s = self.shape(img).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("patchify", format!("{s:?}")));
        }
        let index = patch_index(s[0], s[1], s[2], patch)?;
        let t = (s[1] / patch) * (s[2] / patch);
        self.gather(img, Arc::new(index), &[t, s[0] * patch * patch])
    }

    /// Inverse of [`Graph::patchify`]: rows of `[T × C·P·P]` back to `[C × h × w]`.
    pub fn unpatchify(&mut self, tokens: Var, channels: usize, h: usize, w: usize, patch: usize) -> Result<Var> {
        let fwd = patch_index(channels, h, w, patch)?;
        let t = (h / patch) * (w / patch);
        if self.shape(tokens) != [t, channels * patch * patch] {
            return Err(Error::shape(
                "unpatchify",
                format!("{:?} for {channels}x{h}x{w} with patch {patch}", self.shape(tokens)),
            ));
        }
        let mut inv = vec![0; fwd.len()];
        for (token_pos, &pix) in fwd.iter().enumerate() {
            inv[pix] = token_pos;
        }
        self.gather(tokens, Arc::new(inv), &[channels, h, w])
    }
}

/// For each token element (row-major `[T × C·P·P]`), the flat pixel it reads.
pub fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    for (what, v) in [("image height", h), ("image width", w)] {
        if p == 0 || v % p != 0 {
            return Err(Error::Divisibility {
                what,
                value: v,
                divisor: p,
            });
        }
    }
    let (th, tw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(c * h * w);
    for ty in 0..th {
        for tx in 0..tw {
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        idx.push((ch * h + ty * p + py) * w + tx * p + px);
                    }
                }
            }
        }
    }
    Ok(idx)
}
