//! Thin-plate-spline warping over a K×K control lattice.
//!
//! θ holds `2·K²` offsets, the x block followed by the y block, each in
//! row-major lattice order. The spline maps output coordinates to source
//! coordinates (backward warping), so `warp` never leaves holes.
//!
//! For a fixed lattice the spline is linear in its destinations, so the dense
//! grid is `identity + B·θ` with a basis `B` precomputed once per `(K, h, w)`.

use crate::error::{Error, Result};
use crate::kernel::ops::{bilinear_sample, identity_grid, matmul};
use crate::kernel::{Graph, Tensor, Var};

/// Diagonal regularizer used only when the exact system is singular.
pub const FALLBACK_JITTER: f64 = 1e-6;

/// Radial kernel `U(r) = r² log r²` taken as a function of `r²`; `U(0) = 0`.
pub fn radial(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Uniform lattice over `[-1, 1]²`, row-major: index `i·K + j` has `x_j, y_i`.
pub fn lattice(k: usize) -> Result<Vec<[f64; 2]>> {
    if k < 2 {
        return Err(Error::Invalid(format!("control grid needs K >= 2, got {k}")));
    }
    let at = |i: usize| -1.0 + 2.0 * i as f64 / (k - 1) as f64;
    Ok((0..k * k).map(|n| [at(n % k), at(n / k)]).collect())
}

/// Lattice points displaced by θ.
pub fn control_destinations(theta: &Tensor, k: usize) -> Result<Vec<[f64; 2]>> {
    let n = k * k;
    check_theta(theta, k)?;
    let t = theta.data();
    Ok(lattice(k)?
        .into_iter()
        .enumerate()
        .map(|(i, [x, y])| [x + t[i], y + t[n + i]])
        .collect())
}

fn check_theta(theta: &Tensor, k: usize) -> Result<()> {
    if theta.rank() != 1 || theta.len() != 2 * k * k {
        return Err(Error::shape("tps", format!("theta {:?} for K={k}", theta.shape())));
    }
    Ok(())
}

/// Solves `A x = b` for every column of `b` (row-major `n × m`) by Gaussian
/// elimination with partial pivoting. `a` is consumed as scratch.
fn solve_in_place(a: &mut [f64], n: usize, b: &mut [f64], m: usize) -> Result<()> {
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() <= 1e-13 * scale {
            return Err(Error::Singular(format!("zero pivot in column {col}")));
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            for c in 0..m {
                b.swap(col * m + c, pivot * m + c);
            }
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            for c in 0..m {
                b[r * m + c] -= f * b[col * m + c];
            }
        }
    }
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for c in 0..m {
            let mut s = b[col * m + c];
            for k in col + 1..n {
                s -= a[col * n + k] * b[k * m + c];
            }
            b[col * m + c] = s / d;
        }
    }
    Ok(())
}

/// The `(n+3) × (n+3)` TPS system `[[K, P], [Pᵀ, 0]]`, row-major.
fn system_matrix(src: &[[f64; 2]], jitter: f64) -> Vec<f64> {
    let n = src.len();
    let size = n + 3;
    let mut a = vec![0.0; size * size];
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (src[i][0] - src[j][0], src[i][1] - src[j][1]);
            a[i * size + j] = radial(dx * dx + dy * dy) + if i == j { jitter } else { 0.0 };
        }
        let p = [1.0, src[i][0], src[i][1]];
        for (c, v) in p.into_iter().enumerate() {
            a[i * size + n + c] = v;
            a[(n + c) * size + i] = v;
        }
    }
    a
}

/// Solves the TPS system for `rhs` (row-major `(n+3) × m`), falling back to a
/// jittered kernel only if the exact system is singular.
fn solve_system(src: &[[f64; 2]], rhs: &[f64], m: usize) -> Result<Vec<f64>> {
    let n = src.len() + 3;
    for jitter in [0.0, FALLBACK_JITTER] {
        let mut a = system_matrix(src, jitter);
        let mut b = rhs.to_vec();
        match solve_in_place(&mut a, n, &mut b, m) {
            Ok(()) => return Ok(b),
            Err(Error::Singular(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Singular("tps system even with jitter".into()))
}

/// Spline coefficients for both output axes.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsCoeffs {
    pub src: Vec<[f64; 2]>,
    /// Radial weights per axis; each satisfies `Σw = Σw·x = Σw·y = 0`.
    pub w: [Vec<f64>; 2],
    /// Affine terms `(a0, ax, ay)` per axis.
    pub a: [[f64; 3]; 2],
}

impl TpsCoeffs {
    pub fn eval(&self, x: f64, y: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (axis, o) in out.iter_mut().enumerate() {
            let a = self.a[axis];
            let mut v = a[0] + a[1] * x + a[2] * y;
            for (s, wi) in self.src.iter().zip(&self.w[axis]) {
                let (dx, dy) = (x - s[0], y - s[1]);
                v += wi * radial(dx * dx + dy * dy);
            }
            *o = v;
        }
        out
    }
}

pub fn tps_fit(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<TpsCoeffs> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(Error::shape("tps_fit", format!("{n} sources, {} destinations", dst.len())));
    }
    if src.iter().chain(dst).any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::NonFinite("tps control points".into()));
    }
    let mut rhs = vec![0.0; (n + 3) * 2];
    for (i, d) in dst.iter().enumerate() {
        rhs[2 * i] = d[0];
        rhs[2 * i + 1] = d[1];
    }
    let sol = solve_system(src, &rhs, 2)?;
    let col = |axis: usize, r: std::ops::Range<usize>| r.map(|i| sol[2 * i + axis]).collect::<Vec<_>>();
    let affine = |axis: usize| {
        let v = col(axis, n..n + 3);
        [v[0], v[1], v[2]]
    };
    Ok(TpsCoeffs {
        src: src.to_vec(),
        w: [col(0, 0..n), col(1, 0..n)],
        a: [affine(0), affine(1)],
    })
}

/// Dense grid by fitting the spline and evaluating it at every pixel center.
pub fn tps_grid(theta: &Tensor, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let coeffs = tps_fit(&lattice(k)?, &control_destinations(theta, k)?)?;
    let mut grid = identity_grid(h, w);
    for px in grid.data_mut().chunks_exact_mut(2) {
        let [x, y] = coeffs.eval(px[0], px[1]);
        px[0] = x;
        px[1] = y;
    }
    Ok(grid)
}

/// Precomputed linear map from θ to the dense sampling grid.
#[derive(Clone, Debug)]
pub struct TpsBasis {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    /// `[h·w × K²]`: grid displacement per unit destination offset.
    basis: Tensor,
    identity: Tensor,
}

impl TpsBasis {
    pub fn new(k: usize, h: usize, w: usize) -> Result<Self> {
        let src = lattice(k)?;
        let n = k * k;
        let size = n + 3;
        // Columns of the inverse that act on destinations: rhs = [I_n; 0].
        let mut rhs = vec![0.0; size * n];
        for i in 0..n {
            rhs[i * n + i] = 1.0;
        }
        let inv = Tensor::new(&[size, n], solve_system(&src, &rhs, n)?)?;
        let identity = identity_grid(h, w);
        let phi = Tensor::from_fn(&[h * w, size], |ix| {
            let (p, c) = (ix[0], ix[1]);
            let (x, y) = (identity.data()[2 * p], identity.data()[2 * p + 1]);
            if c < n {
                let (dx, dy) = (x - src[c][0], y - src[c][1]);
                radial(dx * dx + dy * dy)
            } else {
                [1.0, x, y][c - n]
            }
        });
        Ok(TpsBasis {
            k,
            h,
            w,
            basis: matmul(&phi, &inv)?,
            identity,
        })
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    /// Grid for θ without a graph.
    pub fn grid(&self, theta: &Tensor) -> Result<Tensor> {
        check_theta(theta, self.k)?;
        let n = self.k * self.k;
        let offsets = theta.reshape(&[2, n])?.transpose();
        let disp = matmul(&self.basis, &offsets)?.into_shape(&[self.h, self.w, 2])?;
        self.identity.zip_map(&disp, |a, b| a + b)
    }

    /// Differentiable grid for a θ variable of shape `[2·K²]`.
    pub fn grid_var(&self, g: &mut Graph<'_>, theta: Var) -> Result<Var> {
        let n = self.k * self.k;
        if g.shape(theta) != [2 * n] {
            return Err(Error::shape("tps_grid", format!("theta {:?} for K={}", g.shape(theta), self.k)));
        }
        let offsets = g.reshape(theta, &[2, n])?;
        let offsets = g.transpose(offsets)?;
        let basis = g.constant(self.basis.clone());
        let disp = g.matmul(basis, offsets)?;
        let disp = g.reshape(disp, &[self.h, self.w, 2])?;
        let id = g.constant(self.identity.clone());
        g.add(id, disp)
    }
}

pub fn warp(img: &Tensor, grid: &Tensor) -> Result<Tensor> {
    bilinear_sample(img, grid)
}

/// `[m × K²]` stencil of all second differences along lattice rows and columns.
fn second_difference_stencil(k: usize) -> Result<Tensor> {
    let n = k * k;
    let lines = if k >= 3 { 2 * k * (k - 2) } else { 0 };
    if lines == 0 {
        return Tensor::new(&[1, n], vec![0.0; n]);
    }
    let mut d = vec![0.0; lines * n];
    let mut row = 0;
    for a in 0..k {
        for b in 1..k - 1 {
            // Along a lattice row (varying j), then along a column (varying i).
            for idx in [[a * k + b - 1, a * k + b, a * k + b + 1], [(b - 1) * k + a, b * k + a, (b + 1) * k + a]] {
                d[row * n + idx[0]] = 1.0;
                d[row * n + idx[1]] = -2.0;
                d[row * n + idx[2]] = 1.0;
                row += 1;
            }
        }
    }
    Tensor::new(&[lines, n], d)
}

/// Smoothness penalty: squared second differences of the control destinations
/// along every lattice line, summed over both coordinates.
pub fn grid_reg_loss(theta: &Tensor, k: usize) -> Result<f64> {
    check_theta(theta, k)?;
    let n = k * k;
    let diffs = matmul(&second_difference_stencil(k)?, &theta.reshape(&[2, n])?.transpose())?;
    Ok(diffs.data().iter().map(|v| v * v).sum())
}

impl Graph<'_> {
    pub fn grid_reg_loss(&mut self, theta: Var, k: usize) -> Result<Var> {
        let n = k * k;
        if self.shape(theta) != [2 * n] {
            return Err(Error::shape("grid_reg_loss", format!("theta {:?} for K={k}", self.shape(theta))));
        }
        let stencil = self.constant(second_difference_stencil(k)?);
        let t = self.reshape(theta, &[2, n])?;
        let t = self.transpose(t)?;
        let d = self.matmul(stencil, t)?;
        let sq = self.square(d);
        Ok(self.sum(sq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rng::CitRng;

    fn random_theta(k: usize, bound: f64, rng: &mut CitRng) -> Tensor {
        Tensor::from_fn(&[2 * k * k], |_| rng.uniform_in(-bound, bound))
    }

    #[test]
    fn identity_fit_is_pure_affine() {
        let src = lattice(5).unwrap();
        let c = tps_fit(&src, &src).unwrap();
        assert!(c.w.iter().flatten().all(|w| w.abs() < 1e-9));
        let expect = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (got, want) in c.a.iter().flatten().zip(expect.iter().flatten()) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_is_absorbed_by_affine_part() {
        let src = lattice(3).unwrap();
        let dst: Vec<_> = src.iter().map(|p| [p[0] + 0.1, p[1]]).collect();
        let c = tps_fit(&src, &dst).unwrap();
        assert!(c.w.iter().flatten().all(|w| w.abs() < 1e-8));
        assert!((c.a[0][0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fit_interpolates_and_satisfies_side_conditions() {
        let mut rng = CitRng::new(11);
        for k in [3, 5] {
            let theta = random_theta(k, 0.4, &mut rng);
            let src = lattice(k).unwrap();
            let dst = control_destinations(&theta, k).unwrap();
            let c = tps_fit(&src, &dst).unwrap();
            for (s, d) in src.iter().zip(&dst) {
                let m = c.eval(s[0], s[1]);
                assert!((m[0] - d[0]).abs() < 1e-8 && (m[1] - d[1]).abs() < 1e-8);
            }
            for w in &c.w {
                let s0: f64 = w.iter().sum();
                let sx: f64 = w.iter().zip(&src).map(|(w, p)| w * p[0]).sum();
                let sy: f64 = w.iter().zip(&src).map(|(w, p)| w * p[1]).sum();
                assert!(s0.abs() < 1e-9 && sx.abs() < 1e-9 && sy.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn coincident_sources_fall_back_or_fail() {
        let src = vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let dst = src.clone();
        // Duplicate points make the exact system singular; the jittered retry
        // either succeeds with a finite solution or reports singularity.
        match tps_fit(&src, &dst) {
            Ok(c) => assert!(c.w.iter().flatten().all(|v| v.is_finite())),
            Err(e) => assert!(matches!(e, Error::Singular(_))),
        }
    }

    #[test]
    fn zero_and_translation_grids() {
        let basis = TpsBasis::new(5, 16, 12).unwrap();
        let id = identity_grid(16, 12);
        let zero = basis.grid(&Tensor::zeros(&[50])).unwrap();
        assert!(zero.max_abs_diff(&id) < 1e-9);
        let t = 0.13;
        let theta = Tensor::from_fn(&[50], |i| if i[0] < 25 { t } else { 0.0 });
        let moved = basis.grid(&theta).unwrap();
        let expect = Tensor::from_fn(&[16, 12, 2], |i| id.at(i) + if i[2] == 0 { t } else { 0.0 });
        assert!(moved.max_abs_diff(&expect) < 1e-8);
    }

    #[test]
    fn basis_grid_matches_direct_evaluation() {
        let mut rng = CitRng::new(4);
        for k in [3, 5] {
            let basis = TpsBasis::new(k, 9, 7).unwrap();
            let theta = random_theta(k, 0.4, &mut rng);
            let fast = basis.grid(&theta).unwrap();
            let direct = tps_grid(&theta, k, 9, 7).unwrap();
            assert!(fast.max_abs_diff(&direct) < 1e-9);
        }
    }

    #[test]
    fn graph_grid_matches_plain_grid() {
        let basis = TpsBasis::new(3, 5, 4).unwrap();
        let theta = random_theta(3, 0.3, &mut CitRng::new(8));
        let mut g = Graph::new();
        let t = g.input(theta.clone());
        let grid = basis.grid_var(&mut g, t).unwrap();
        assert_eq!(g.value(grid), &basis.grid(&theta).unwrap());
    }

    #[test]
    fn reg_loss_fixed_points() {
        assert_eq!(grid_reg_loss(&Tensor::zeros(&[18]), 3).unwrap(), 0.0);
        let shift = Tensor::from_fn(&[18], |i| if i[0] < 9 { 0.2 } else { -0.1 });
        assert_eq!(grid_reg_loss(&shift, 3).unwrap(), 0.0);
        assert_eq!(grid_reg_loss(&Tensor::zeros(&[8]), 2).unwrap(), 0.0);
    }

    #[test]
    fn reg_loss_vanishes_for_affine_destinations() {
        let src = lattice(4).unwrap();
        let theta = Tensor::from_fn(&[32], |i| {
            let p = src[i[0] % 16];
            if i[0] < 16 {
                0.1 * p[0] - 0.05 * p[1] + 0.02
            } else {
                0.07 * p[0] + 0.03 * p[1]
            }
        });
        assert!(grid_reg_loss(&theta, 4).unwrap() < 1e-28);
    }

    #[test]
    fn reg_loss_graph_matches_plain() {
        let theta = random_theta(5, 0.4, &mut CitRng::new(2));
        let mut g = Graph::new();
        let t = g.input(theta.clone());
        let l = g.grid_reg_loss(t, 5).unwrap();
        assert!((g.value(l).item() - grid_reg_loss(&theta, 5).unwrap()).abs() < 1e-12);
    }
}
