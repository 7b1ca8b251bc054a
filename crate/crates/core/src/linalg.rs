//! Small dense complex matrices (dimension at most [`MAX_DIM`]) used for the
//! pointwise fibre algebra: products, inverses, Hermitian eigenproblems and
//! matrix functions. Everything here is allocation free so that per-node loops
//! over a grid stay cheap.

use num_complex::Complex64 as C64;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

pub const MAX_DIM: usize = 4;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: [C64; MAX_DIM * MAX_DIM],
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows <= MAX_DIM && cols <= MAX_DIM, "matrix dimension exceeds {MAX_DIM}");
        Mat { rows, cols, data: [ZERO; MAX_DIM * MAX_DIM] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn scalar(n: usize, c: C64) -> Self {
        Mat::identity(n).scale_c(c)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[&[C64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        Mat::from_fn(r, c, |i, j| rows[i][j])
    }

    pub fn diag(values: &[C64]) -> Self {
        let n = values.len();
        Mat::from_fn(n, n, |i, j| if i == j { values[i] } else { ZERO })
    }

    pub fn diag_real(values: &[f64]) -> Self {
        let n = values.len();
        Mat::from_fn(n, n, |i, j| if i == j { C64::new(values[i], 0.0) } else { ZERO })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn adjoint(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut m = *self;
        for v in m.data.iter_mut() {
            *v *= s;
        }
        m
    }

    pub fn scale_c(&self, s: C64) -> Mat {
        let mut m = *self;
        for v in m.data.iter_mut() {
            *v *= s;
        }
        m
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn norm_fro(&self) -> f64 {
        self.entries().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> impl Iterator<Item = C64> + '_ {
        (0..self.rows).flat_map(move |i| (0..self.cols).map(move |j| self[(i, j)]))
    }

    pub fn is_finite(&self) -> bool {
        self.entries().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// (A + A†)/2
    pub fn hermitian_part(&self) -> Mat {
        (*self + self.adjoint()).scale(0.5)
    }

    pub fn kron(&self, other: &Mat) -> Mat {
        let (r1, c1, r2, c2) = (self.rows, self.cols, other.rows, other.cols);
        Mat::from_fn(r1 * r2, c1 * c2, |i, j| self[(i / r2, j / c2)] * other[(i % r2, j % c2)])
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Option<Mat> {
        assert!(self.is_square());
        let n = self.rows;
        let mut a = *self;
        let mut inv = Mat::identity(n);
        for col in 0..n {
            let (piv, pmax) = (col..n)
                .map(|r| (r, a[(r, col)].norm()))
                .fold((col, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if !(pmax > 0.0) || !pmax.is_finite() {
                return None;
            }
            if piv != col {
                for j in 0..n {
                    let t = a[(col, j)];
                    a[(col, j)] = a[(piv, j)];
                    a[(piv, j)] = t;
                    let t = inv[(col, j)];
                    inv[(col, j)] = inv[(piv, j)];
                    inv[(piv, j)] = t;
                }
            }
            let d = ONE / a[(col, col)];
            for j in 0..n {
                a[(col, j)] *= d;
                inv[(col, j)] *= d;
            }
            for r in 0..n {
                if r != col {
                    let f = a[(r, col)];
                    if f != ZERO {
                        for j in 0..n {
                            let aj = a[(col, j)];
                            let ij = inv[(col, j)];
                            a[(r, j)] -= f * aj;
                            inv[(r, j)] -= f * ij;
                        }
                    }
                }
            }
        }
        Some(inv)
    }

    pub fn det(&self) -> C64 {
        assert!(self.is_square());
        let n = self.rows;
        let mut a = *self;
        let mut det = ONE;
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[(x, col)].norm().total_cmp(&a[(y, col)].norm()))
                .unwrap();
            if a[(piv, col)].norm() == 0.0 {
                return ZERO;
            }
            if piv != col {
                for j in 0..n {
                    let t = a[(col, j)];
                    a[(col, j)] = a[(piv, j)];
                    a[(piv, j)] = t;
                }
                det = -det;
            }
            det *= a[(col, col)];
            for r in col + 1..n {
                let f = a[(r, col)] / a[(col, col)];
                for j in col..n {
                    let v = a[(col, j)];
                    a[(r, j)] -= f * v;
                }
            }
        }
        det
    }

    /// Lower-triangular Cholesky factor of a Hermitian positive-definite matrix.
    pub fn cholesky(&self) -> Option<Mat> {
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 0.0) {
                return None;
            }
            let d = d.sqrt();
            l[(j, j)] = C64::new(d, 0.0);
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / d;
            }
        }
        Some(l)
    }

    /// Matrix exponential by scaling and squaring with a Taylor core.
    pub fn expm(&self) -> Mat {
        assert!(self.is_square());
        let n = self.rows;
        let norm = self.norm_fro();
        let mut squarings = 0;
        let mut scaled = *self;
        if norm > 0.25 {
            squarings = (norm / 0.25).log2().ceil() as i32;
            scaled = self.scale(0.5f64.powi(squarings));
        }
        let mut term = Mat::identity(n);
        let mut sum = Mat::identity(n);
        for k in 1..=18 {
            term = (term * scaled).scale(1.0 / k as f64);
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    /// Principal square root (Denman-Beavers iteration).
    pub fn sqrtm(&self) -> Option<Mat> {
        let n = self.rows;
        let mut y = *self;
        let mut z = Mat::identity(n);
        for _ in 0..100 {
            let yi = y.inverse()?;
            let zi = z.inverse()?;
            let y_next = (y + zi).scale(0.5);
            let z_next = (z + yi).scale(0.5);
            let delta = (y_next - y).norm_fro();
            y = y_next;
            z = z_next;
            if delta <= 1e-15 * y.norm_fro() {
                return Some(y);
            }
        }
        Some(y)
    }

    /// Principal logarithm via inverse scaling and squaring.
    pub fn logm(&self) -> Option<Mat> {
        let n = self.rows;
        let id = Mat::identity(n);
        let mut a = *self;
        let mut k = 0;
        while (a - id).norm_fro() > 0.05 {
            a = a.sqrtm()?;
            k += 1;
            if k > 60 {
                return None;
            }
        }
        let x = a - id;
        let mut pow = x;
        let mut sum = Mat::zeros(n, n);
        for j in 1..=40 {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            sum += pow.scale(sign / j as f64);
            pow = pow * x;
        }
        Some(sum.scale(2f64.powi(k)))
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * MAX_DIM + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * MAX_DIM + j]
    }
}

impl Add for Mat {
    type Output = Mat;
    #[inline]
    fn add(mut self, rhs: Mat) -> Mat {
        self += rhs;
        self
    }
}

impl AddAssign for Mat {
    #[inline]
    fn add_assign(&mut self, rhs: Mat) {
        debug_assert!(self.rows == rhs.rows && self.cols == rhs.cols);
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += b;
        }
    }
}

impl Sub for Mat {
    type Output = Mat;
    #[inline]
    fn sub(mut self, rhs: Mat) -> Mat {
        self -= rhs;
        self
    }
}

impl SubAssign for Mat {
    #[inline]
    fn sub_assign(&mut self, rhs: Mat) {
        debug_assert!(self.rows == rhs.rows && self.cols == rhs.cols);
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a -= b;
        }
    }
}

impl Neg for Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

impl Mul for Mat {
    type Output = Mat;
    #[inline]
    fn mul(self, rhs: Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "dimension mismatch in matrix product");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == ZERO {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * MAX_DIM + j] += a * rhs.data[k * MAX_DIM + j];
                }
            }
        }
        out
    }
}

impl Mul<f64> for Mat {
    type Output = Mat;
    fn mul(self, rhs: f64) -> Mat {
        self.scale(rhs)
    }
}

impl Mul<C64> for Mat {
    type Output = Mat;
    fn mul(self, rhs: C64) -> Mat {
        self.scale_c(rhs)
    }
}

/// Eigen-decomposition of a Hermitian matrix: `a = v diag(values) v†`,
/// eigenvalues ascending.
#[derive(Clone, Copy, Debug)]
pub struct HermEig {
    pub values: [f64; MAX_DIM],
    pub vectors: Mat,
}

impl HermEig {
    pub fn dim(&self) -> usize {
        self.vectors.rows()
    }

    pub fn values(&self) -> &[f64] {
        &self.values[..self.dim()]
    }

    /// v f(Λ) v†
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.dim();
        let d = Mat::diag_real(&self.values[..n].iter().map(|&x| f(x)).collect::<Vec<_>>());
        self.vectors * d * self.vectors.adjoint()
    }
}

/// Cyclic complex Jacobi method for Hermitian matrices.
pub fn eigh(a: &Mat) -> HermEig {
    assert!(a.is_square());
    let n = a.rows();
    let mut m = a.hermitian_part();
    let mut v = Mat::identity(n);
    let scale = m.norm_fro().max(f64::MIN_POSITIVE);
    for _sweep in 0..60 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= 1e-16 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                let mag = apq.norm();
                if mag <= 1e-300 {
                    continue;
                }
                // phase to make the (p, q) entry real and positive
                let phase = apq / mag;
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                let theta = (aqq - app) / (2.0 * mag);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // rotation G with G_pp = c, G_qq = c, G_pq = s·phase, G_qp = -s·conj(phase)
                let mut g = Mat::identity(n);
                g[(p, p)] = C64::new(c, 0.0);
                g[(q, q)] = C64::new(c, 0.0);
                g[(p, q)] = phase * s;
                g[(q, p)] = -phase.conj() * s;
                m = g.adjoint() * m * g;
                m[(p, q)] = ZERO;
                m[(q, p)] = ZERO;
                v = v * g;
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| m[(i, i)].re.total_cmp(&m[(j, j)].re));
    let mut values = [0.0; MAX_DIM];
    let vectors = Mat::from_fn(n, n, |i, j| v[(i, idx[j])]);
    for (k, &i) in idx.iter().enumerate() {
        values[k] = m[(i, i)].re;
    }
    HermEig { values, vectors }
}

/// Generalized Hermitian eigenproblem `a u = λ b u` with `b` positive definite.
///
/// `u` has `b`-orthonormal columns (`u† b u = I`) and `w = b u`, so that
/// `b⁻¹a = u Λ w†` and `u⁻¹ = w†`.
#[derive(Clone, Copy, Debug)]
pub struct GenEig {
    pub values: [f64; MAX_DIM],
    pub u: Mat,
    pub w: Mat,
}

impl GenEig {
    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn values(&self) -> &[f64] {
        &self.values[..self.dim()]
    }

    /// The endomorphism `u f(Λ) u⁻¹`.
    pub fn endo(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.dim();
        let d = Mat::diag_real(&self.values[..n].iter().map(|&x| f(x)).collect::<Vec<_>>());
        self.u * d * self.w.adjoint()
    }

    /// The Hermitian form `w f(Λ) w†` (= `b · u f(Λ) u⁻¹`).
    pub fn form(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.dim();
        let d = Mat::diag_real(&self.values[..n].iter().map(|&x| f(x)).collect::<Vec<_>>());
        self.w * d * self.w.adjoint()
    }
}

pub fn gen_eigh(a: &Mat, b: &Mat) -> Option<GenEig> {
    let l = b.cholesky()?;
    let linv = l.inverse()?;
    let c = linv * *a * linv.adjoint();
    let e = eigh(&c);
    let u = linv.adjoint() * e.vectors;
    let w = l * e.vectors;
    Some(GenEig { values: e.values, u, w })
}

/// Ψ(x) = (eˣ − x − 1)/x², with its Taylor series near zero.
pub fn psi(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        0.5 + x / 6.0 + x * x / 24.0 + x * x * x / 120.0
    } else {
        (x.exp_m1() - x) / (x * x)
    }
}

/// φ₁(x) = (eˣ − 1)/x.
pub fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_herm(seed: &[f64], n: usize) -> Mat {
        let mut k = 0;
        let mut next = || {
            k += 1;
            seed[k % seed.len()] * (1.0 + 0.37 * k as f64).sin()
        };
        let a = Mat::from_fn(n, n, |_, _| c(next(), next()));
        a.hermitian_part()
    }

    #[test]
    fn inverse_of_small_matrix() {
        let a = Mat::from_rows(&[&[c(2.0, 0.0), c(1.0, 1.0)], &[c(0.0, -1.0), c(3.0, 0.5)]]);
        let inv = a.inverse().unwrap();
        assert!((a * inv - Mat::identity(2)).max_abs() < 1e-14);
        assert!(Mat::zeros(2, 2).inverse().is_none());
    }

    #[test]
    fn determinant_matches_product_of_eigenvalues() {
        let a = random_herm(&[0.3, -1.2, 0.8, 2.0], 3) + Mat::identity(3).scale(4.0);
        let e = eigh(&a);
        let prod: f64 = e.values().iter().product();
        assert!((a.det().re - prod).abs() < 1e-12 * prod.abs());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = random_herm(&[1.0, 0.5, -0.7, 0.2, 1.3], 4);
        let e = eigh(&a);
        let back = e.apply(|x| x);
        assert!((back - a).max_abs() < 1e-13 * a.norm_fro());
        let vv = e.vectors.adjoint() * e.vectors;
        assert!((vv - Mat::identity(4)).max_abs() < 1e-14);
        assert!(e.values().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn expm_and_logm_are_inverse() {
        let a = Mat::from_rows(&[&[c(1.0, 0.0), c(1.0, 0.0)], &[c(0.0, 0.0), c(1.0, 0.0)]]);
        let l = a.logm().unwrap();
        // log of a unipotent Jordan block is its nilpotent part
        let expected = Mat::from_rows(&[&[c(0.0, 0.0), c(1.0, 0.0)], &[c(0.0, 0.0), c(0.0, 0.0)]]);
        assert!((l - expected).max_abs() < 1e-12);
        assert!((l.expm() - a).max_abs() < 1e-12);
    }

    #[test]
    fn psi_branches_agree() {
        for &x in &[9.9e-4f64, -9.9e-4] {
            let direct = (x.exp_m1() - x) / (x * x);
            assert!((psi(x) - direct).abs() < 1e-9);
        }
        assert_eq!(psi(0.0), 0.5);
    }

    proptest! {
        #[test]
        fn jacobi_backward_error(vals in proptest::collection::vec(-3.0f64..3.0, 32), n in 1usize..=4) {
            let a = random_herm(&vals, n);
            let e = eigh(&a);
            let back = e.apply(|x| x);
            prop_assert!((back - a).max_abs() <= 1e-13 * a.norm_fro().max(1e-300));
        }

        #[test]
        fn generalized_eigen_reconstructs(vals in proptest::collection::vec(-1.0f64..1.0, 40), n in 1usize..=4) {
            let x = random_herm(&vals, n);
            let y = random_herm(&vals[7..], n);
            let a = x * x + Mat::identity(n).scale(0.1);
            let b = y * y + Mat::identity(n).scale(0.2);
            let g = gen_eigh(&a, &b).unwrap();
            let h = b.inverse().unwrap() * a;
            prop_assert!((g.endo(|v| v) - h).max_abs() < 1e-9 * h.norm_fro());
            prop_assert!((g.u.adjoint() * b * g.u - Mat::identity(n)).max_abs() < 1e-10);
            prop_assert!((g.form(|v| v) - a).max_abs() < 1e-10 * a.norm_fro());
        }
    }
}
