use crate::error::{Error, Result};
use crate::kernel::graph::{Graph, Var};
use crate::kernel::tensor::Tensor;

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out = a · b + beta · out`, `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: the views describe in-bounds strided matrices (asserted sizes above,
    // strides derived from row-major layouts), and `out` is a distinct buffer.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
    }
    let mut out = vec![0.0; sa[0] * sb[1]];
    gemm(
        MatRef::new(a.data(), sa[0], sa[1]),
        MatRef::new(b.data(), sb[0], sb[1]),
        &mut out,
        0.0,
    );
    Tensor::new(&[sa[0], sb[1]], out)
}

impl Graph<'_> {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                let (x, w) = (c.inputs[0], c.inputs[1]);
                let (m, k, n) = (x.dim(0), x.dim(1), w.dim(1));
                let g = MatRef::new(c.grad.data(), m, n);
                let ga = c.needs(0).then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(g, MatRef::new(w.data(), k, n).t(), &mut d, 0.0);
                    Tensor::new(x.shape(), d).unwrap()
                });
                let gb = c.needs(1).then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(MatRef::new(x.data(), m, k).t(), g, &mut d, 0.0);
                    Tensor::new(w.shape(), d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `y = x · W + b` for `x: [L × d_in]`, `W: [d_in × d_out]`, `b: [d_out]`.
    pub fn linear_project(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let (bs, ys) = (self.shape(b), self.shape(y));
                if bs.len() != 1 || bs[0] != ys[1] {
                    return Err(Error::shape("linear_project", format!("bias {bs:?} for output {ys:?}")));
                }
                self.add(y, b)
            }
            None => Ok(y),
        }
    }
}
