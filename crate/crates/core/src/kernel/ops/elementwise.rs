//! Broadcasting arithmetic, pointwise activations, reductions and shape ops.

use crate::error::{Error, Result};
use crate::kernel::graph::{Graph, Var};
use crate::kernel::tensor::Tensor;

/// Output shape of broadcasting `a` against `b` (trailing-aligned, size-1 stretches).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Broadcast {
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero where broadcast).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the matching flat offsets into each operand.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
pub fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let strides = broadcast_strides(shape, grad.shape());
    let zero = vec![0; strides.len()];
    let g = grad.data();
    let dst = out.data_mut();
    for_each_broadcast(grad.shape(), &strides, &zero, |o, ia, _| dst[ia] += g[o]);
    out
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut data = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out_shape, data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph<'_> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs(0).then(|| reduce_to(c.grad, c.inputs[0].shape())),
                    c.needs(1).then(|| reduce_to(c.grad, c.inputs[1].shape())),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs(0).then(|| reduce_to(c.grad, c.inputs[0].shape())),
                    c.needs(1).then(|| reduce_to(&c.grad.map(|g| -g), c.inputs[1].shape())),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                let (x, y) = (c.inputs[0], c.inputs[1]);
                let ga = c.needs(0).then(|| {
                    let full = broadcast_binary(c.grad, y, |g, v| g * v).unwrap();
                    reduce_to(&full, x.shape())
                });
                let gb = c.needs(1).then(|| {
                    let full = broadcast_binary(c.grad, x, |g, v| g * v).unwrap();
                    reduce_to(&full, y.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, &[a], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    /// `s - a`.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let out = self.value(a).map(|v| s - v);
        self.push(out, &[a], Box::new(|c| vec![Some(c.grad.map(|g| -g))]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, s| g * s * (1.0 - s)).unwrap())]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, t| g * (1.0 - t * t)).unwrap())]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(
            out,
            &[a],
            Box::new(|c| {
                vec![Some(
                    c.grad
                        .zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })
                        .unwrap(),
                )]
            }),
        )
    }

    /// |a| with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(
            out,
            &[a],
            Box::new(|c| {
                vec![Some(
                    c.grad
                        .zip_map(c.inputs[0], |g, x| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| 2.0 * g * x).unwrap())]),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of `a ⊙ w` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor) -> Result<Var> {
        let wv = self.constant(w.clone());
        let p = self.mul(a, wv)?;
        Ok(self.sum(p))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.reshape(c.inputs[0].shape()).unwrap())]),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank-2 input required, got {:?}", v.shape())));
        }
        let out = v.transpose();
        Ok(self.push(out, &[a], Box::new(|c| vec![Some(c.grad.transpose())])))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let first = shapes
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        for s in &shapes {
            let ok = s.len() == first.len()
                && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            parts,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if c.needs(i) {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g[start..start + w]);
                        }
                        grads.push(Some(Tensor::new(c.inputs[i].shape(), d).unwrap()));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = shape[axis] * inner;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = o * row + start * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(move |c| {
                let mut g = Tensor::zeros(&shape);
                let dst = g.data_mut();
                let src = c.grad.data();
                for o in 0..outer {
                    let s = o * row + start * inner;
                    dst[s..s + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 4, 5], &[1, 4, 5]).unwrap(), vec![3, 4, 5]);
        assert_eq!(broadcast_shape(&[3, 1], &[4]).unwrap(), vec![3, 4]);
        assert!(matches!(
            broadcast_shape(&[3, 4], &[2, 4]),
            Err(Error::Broadcast { .. })
        ));
    }

    #[test]
    fn sigmoid_at_zero_and_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn add_zero_is_identity_and_broadcast_add() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64));
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let m = g.constant(Tensor::from_vec(vec![10.0, 20.0, 30.0]));
        let y = g.add(x, m).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn broadcast_gradient_sums_stretched_axes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[3, 2, 2]));
        let m = g.input(Tensor::full(&[1, 2, 2], 2.0));
        let y = g.mul(x, m).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(m).unwrap().data(), &[3.0; 4]);
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0; 12]);
    }

    #[test]
    fn concat_on_feature_axis() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[4, 2]));
        let b = g.input(Tensor::ones(&[4, 3]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[4, 5]);
        assert_eq!(&g.value(c).data()[..5], &[0.0, 0.0, 1.0, 1.0, 1.0]);
        let bad = g.input(Tensor::ones(&[3, 3]));
        assert!(g.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn narrow_selects_columns() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[2, 4], |i| (i[0] * 4 + i[1]) as f64));
        let n = g.narrow(a, 1, 1, 2).unwrap();
        assert_eq!(g.value(n).data(), &[1.0, 2.0, 5.0, 6.0]);
    }
}
