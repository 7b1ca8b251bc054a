//! Holomorphic bundles given by gluing data, Hermitian metrics on them, and
//! pointwise endomorphism calculus.
//!
//! Conventions. A metric matrix `H` gives `⟨u, v⟩ = v†Hu`. Torus sections
//! satisfy `v(z+1) = A₁v(z)` and `v(z+τ) = A_τv(z)`. On the sphere a section
//! has components `v₀` in chart 0 and `v₁` in chart 1 with `v₀ = t(z)v₁`,
//! where `z` is the chart-0 coordinate; hence `H₁ = t†H₀t`.
//!
//! Every ghost node holds `G·(source)` for a gluing matrix `G` with
//! `v_ghost = G v_source`:
//! metrics transform as `G^{-†}HG⁻¹`, endomorphisms as `GXG⁻¹`, and
//! `Hom(Q, S)`-valued (0,1)-forms as `G_S γ G_Q⁻¹ · conj(dz_src/dz_ghost)`.

use crate::error::{Error, Result};
use crate::field::{Field, MatField};
use crate::geometry::{BaseGeometry, BaseKind, GhostLink, Shift};
use crate::linalg::{gen_eigh, Mat, MAX_DIM};
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

pub type MetricField = MatField;
pub type EndoField = MatField;
pub type FormField = MatField;

const COCYCLE_TOL: f64 = 1e-12;
const COMPAT_TOL: f64 = 1e-8;
const POSITIVITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum Gluing {
    /// Constant commuting automorphy factors.
    Torus { a1: Mat, atau: Mat },
    /// `t(z) = U diag(z^{k_i}) U†` with `U` a constant unitary frame.
    Sphere { exponents: Vec<i32>, frame: Mat },
}

impl Gluing {
    /// Sphere transition `t(z)` at chart-0 coordinate `z`.
    pub fn transition(&self, z: C64) -> Mat {
        match self {
            Gluing::Sphere { exponents, frame } => {
                let d: Vec<C64> = exponents.iter().map(|&k| z.powi(k)).collect();
                *frame * Mat::diag(&d) * frame.adjoint()
            }
            Gluing::Torus { .. } => panic!("transition is defined for sphere gluing only"),
        }
    }

    fn transition_inverse(&self, z: C64) -> Mat {
        match self {
            Gluing::Sphere { exponents, frame } => {
                let d: Vec<C64> = exponents.iter().map(|&k| z.powi(-k)).collect();
                *frame * Mat::diag(&d) * frame.adjoint()
            }
            Gluing::Torus { .. } => panic!("transition is defined for sphere gluing only"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleSpec {
    pub rank: usize,
    pub gluing: Gluing,
    pub label: String,
}

/// Named bundles shipped with the lab.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CatalogEntry {
    TorusTrivial { rank: usize },
    TorusFlat { alpha: f64 },
    Atiyah { a_re: f64, a_im: f64 },
    SphereO { k: i32 },
    SphereSum { degrees: Vec<i32> },
    /// `𝒪(−1) ⊂ 𝒪²`; the bundle itself is the trivial rank-2 bundle.
    EulerPair,
}

impl BundleSpec {
    pub fn from_catalog(entry: &CatalogEntry) -> Result<Self> {
        match entry {
            CatalogEntry::TorusTrivial { rank } => {
                Self::torus(Mat::identity(*rank), Mat::identity(*rank), format!("trivial-{rank}"))
            }
            CatalogEntry::TorusFlat { alpha } => Self::torus(
                Mat::scalar(1, C64::from_polar(1.0, *alpha)),
                Mat::identity(1),
                format!("flat({alpha})"),
            ),
            CatalogEntry::Atiyah { a_re, a_im } => {
                let a = C64::new(*a_re, *a_im);
                if a.norm() == 0.0 {
                    return Err(Error::InvalidParameter("Atiyah parameter a must be nonzero".into()));
                }
                let one = C64::new(1.0, 0.0);
                let zero = C64::new(0.0, 0.0);
                Self::torus(Mat::identity(2), Mat::from_rows(&[&[one, a], &[zero, one]]), format!("atiyah({a})"))
            }
            CatalogEntry::SphereO { k } => Self::sphere(vec![*k], format!("O({k})")),
            CatalogEntry::SphereSum { degrees } => {
                let label = degrees.iter().map(|k| format!("O({k})")).collect::<Vec<_>>().join("+");
                Self::sphere(degrees.clone(), label)
            }
            CatalogEntry::EulerPair => Self::sphere(vec![0, 0], "euler-pair".into()),
        }
    }

    pub fn torus(a1: Mat, atau: Mat, label: String) -> Result<Self> {
        let rank = a1.rows();
        if rank == 0 || rank > MAX_DIM || !a1.is_square() || atau.rows() != rank || !atau.is_square() {
            return Err(Error::InvalidParameter(format!("automorphy factors must be square of rank 1..={MAX_DIM}")));
        }
        if a1.inverse().is_none() || atau.inverse().is_none() {
            return Err(Error::SingularTransition);
        }
        let comm = (a1 * atau - atau * a1).max_abs();
        let scale = a1.max_abs() * atau.max_abs();
        if comm > COCYCLE_TOL * scale.max(1.0) {
            return Err(Error::CocycleViolated(comm));
        }
        Ok(BundleSpec { rank, gluing: Gluing::Torus { a1, atau }, label })
    }

    pub fn sphere(exponents: Vec<i32>, label: String) -> Result<Self> {
        let rank = exponents.len();
        Self::sphere_framed(exponents, Mat::identity(rank), label)
    }

    pub fn sphere_framed(exponents: Vec<i32>, frame: Mat, label: String) -> Result<Self> {
        let rank = exponents.len();
        if rank == 0 || rank > MAX_DIM {
            return Err(Error::InvalidParameter(format!("rank {rank} outside 1..={MAX_DIM}")));
        }
        if frame.rows() != rank || (frame * frame.adjoint() - Mat::identity(rank)).max_abs() > 1e-12 {
            return Err(Error::InvalidParameter("sphere frame must be unitary of the bundle rank".into()));
        }
        Ok(BundleSpec { rank, gluing: Gluing::Sphere { exponents, frame }, label })
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.gluing, Gluing::Torus { .. })
    }

    /// Degree fixed by the gluing (sum of transition exponents; 0 on the torus
    /// since constant automorphy factors give flat determinant lines).
    pub fn topological_degree(&self) -> i32 {
        match &self.gluing {
            Gluing::Sphere { exponents, .. } => exponents.iter().sum(),
            Gluing::Torus { .. } => 0,
        }
    }

    /// Checks the sphere transition is invertible on the overlap nodes.
    pub fn check_against(&self, geom: &BaseGeometry) -> Result<()> {
        match (&self.gluing, geom.kind) {
            (Gluing::Torus { .. }, BaseKind::Torus { .. }) => Ok(()),
            (Gluing::Sphere { .. }, BaseKind::Sphere { .. }) => {
                for chart in &geom.charts {
                    for link in &chart.ghosts {
                        if let Shift::Sphere { z0, .. } = link.shift {
                            let d = self.gluing.transition(z0).det();
                            if !(d.norm() > 1e-300) || !d.is_finite() {
                                return Err(Error::SingularTransition);
                            }
                        }
                    }
                }
                Ok(())
            }
            _ => Err(Error::Mismatch(format!("bundle '{}' does not live on this base", self.label))),
        }
    }

    /// Constant change of frame `v ↦ U v`.
    pub fn gauge(&self, u: &Mat) -> Result<Self> {
        let uinv = u.inverse().ok_or(Error::SingularTransition)?;
        match &self.gluing {
            Gluing::Torus { a1, atau } => {
                Self::torus(*u * *a1 * uinv, *u * *atau * uinv, format!("{}-gauged", self.label))
            }
            Gluing::Sphere { exponents, frame } => {
                Self::sphere_framed(exponents.clone(), *u * *frame, format!("{}-gauged", self.label))
            }
        }
    }

    pub fn direct_sum(&self, other: &Self) -> Result<Self> {
        let label = format!("{}+{}", self.label, other.label);
        match (&self.gluing, &other.gluing) {
            (Gluing::Torus { a1, atau }, Gluing::Torus { a1: b1, atau: btau }) => {
                check_rank(self.rank + other.rank)?;
                Self::torus(block_diag(a1, b1), block_diag(atau, btau), label)
            }
            (Gluing::Sphere { exponents: e, frame: u }, Gluing::Sphere { exponents: f, frame: v }) => {
                check_rank(self.rank + other.rank)?;
                let ex = e.iter().chain(f).copied().collect();
                Self::sphere_framed(ex, block_diag(u, v), label)
            }
            _ => Err(Error::Mismatch("direct sum of bundles on different bases".into())),
        }
    }

    pub fn tensor(&self, other: &Self) -> Result<Self> {
        let label = format!("{}x{}", self.label, other.label);
        check_rank(self.rank * other.rank)?;
        match (&self.gluing, &other.gluing) {
            (Gluing::Torus { a1, atau }, Gluing::Torus { a1: b1, atau: btau }) => {
                Self::torus(a1.kron(b1), atau.kron(btau), label)
            }
            (Gluing::Sphere { exponents: e, frame: u }, Gluing::Sphere { exponents: f, frame: v }) => {
                let ex = e.iter().flat_map(|a| f.iter().map(move |b| a + b)).collect();
                Self::sphere_framed(ex, u.kron(v), label)
            }
            _ => Err(Error::Mismatch("tensor product of bundles on different bases".into())),
        }
    }

    pub fn sym_power(&self, p: usize) -> Result<Self> {
        let idx = multisets(self.rank, p);
        check_rank(idx.len())?;
        let label = format!("S^{p}({})", self.label);
        match &self.gluing {
            Gluing::Torus { a1, atau } => Self::torus(sym_matrix(a1, &idx), sym_matrix(atau, &idx), label),
            Gluing::Sphere { exponents, frame } => {
                let ex = idx.iter().map(|m| m.iter().map(|&i| exponents[i]).sum()).collect();
                Self::sphere_framed(ex, sym_matrix(frame, &idx), label)
            }
        }
    }

    pub fn ext_power(&self, p: usize) -> Result<Self> {
        if p == 0 || p > self.rank {
            return Err(Error::Mismatch(format!("exterior power {p} of a rank-{} bundle", self.rank)));
        }
        let idx = subsets(self.rank, p);
        check_rank(idx.len())?;
        let label = format!("L^{p}({})", self.label);
        match &self.gluing {
            Gluing::Torus { a1, atau } => Self::torus(ext_matrix(a1, &idx), ext_matrix(atau, &idx), label),
            Gluing::Sphere { exponents, frame } => {
                let ex = idx.iter().map(|m| m.iter().map(|&i| exponents[i]).sum()).collect();
                Self::sphere_framed(ex, ext_matrix(frame, &idx), label)
            }
        }
    }

    /// JSON description used in checkpoint headers.
    pub fn descriptor(&self) -> serde_json::Value {
        let mat = |m: &Mat| -> Vec<Vec<[f64; 2]>> {
            (0..m.rows()).map(|i| (0..m.cols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect()
        };
        match &self.gluing {
            Gluing::Torus { a1, atau } => serde_json::json!({
                "label": self.label, "rank": self.rank, "a1": mat(a1), "atau": mat(atau)
            }),
            Gluing::Sphere { exponents, frame } => serde_json::json!({
                "label": self.label, "rank": self.rank, "exponents": exponents, "frame": mat(frame)
            }),
        }
    }
}

fn check_rank(r: usize) -> Result<()> {
    if r == 0 || r > MAX_DIM {
        Err(Error::Mismatch(format!("resulting rank {r} exceeds the supported maximum {MAX_DIM}")))
    } else {
        Ok(())
    }
}

pub fn block_diag(a: &Mat, b: &Mat) -> Mat {
    let (ra, ca) = (a.rows(), a.cols());
    Mat::from_fn(ra + b.rows(), ca + b.cols(), |i, j| {
        if i < ra && j < ca {
            a[(i, j)]
        } else if i >= ra && j >= ca {
            b[(i - ra, j - ca)]
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Non-decreasing index tuples of length `p` from `0..r`.
pub fn multisets(r: usize, p: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, r: usize, p: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == p {
            out.push(cur.clone());
            return;
        }
        for i in start..r {
            cur.push(i);
            rec(i, r, p, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, r, p, &mut Vec::new(), &mut out);
    out
}

pub fn subsets(r: usize, p: usize) -> Vec<Vec<usize>> {
    multisets(r, p).into_iter().filter(|m| m.windows(2).all(|w| w[0] < w[1])).collect()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn multiplicity_factorial(m: &[usize]) -> f64 {
    let mut out = 1.0;
    let mut run = 1;
    for w in m.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            out *= factorial(run);
            run = 1;
        }
    }
    out * factorial(run)
}

fn permanent(a: &Mat) -> C64 {
    let n = a.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut total = C64::new(0.0, 0.0);
    permute(&mut perm, 0, &mut |p| {
        total += p.iter().enumerate().map(|(i, &j)| a[(i, j)]).product::<C64>();
    });
    total
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

/// Matrix of `A` acting on `S^p` in the orthonormal symmetrized basis.
pub fn sym_matrix(a: &Mat, idx: &[Vec<usize>]) -> Mat {
    Mat::from_fn(idx.len(), idx.len(), |i, j| {
        let sub = Mat::from_fn(idx[i].len(), idx[j].len(), |k, l| a[(idx[i][k], idx[j][l])]);
        permanent(&sub) / (multiplicity_factorial(&idx[i]) * multiplicity_factorial(&idx[j])).sqrt()
    })
}

/// Compound matrix of `A` on `Λ^p`.
pub fn ext_matrix(a: &Mat, idx: &[Vec<usize>]) -> Mat {
    Mat::from_fn(idx.len(), idx.len(), |i, j| {
        Mat::from_fn(idx[i].len(), idx[j].len(), |k, l| a[(idx[i][k], idx[j][l])]).det()
    })
}

/// Split/nonsplit verdict of a unipotent rank-2 torus extension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtensionClass {
    Split,
    Nonsplit,
}

/// Decides whether `0 → 𝒪 → E → 𝒪 → 0` with unipotent automorphy
/// `A₁ = [[1,b],[0,1]]`, `A_τ = [[1,a],[0,1]]` splits.
///
/// The extension class is the additive cocycle `c(1) = b`, `c(τ) = a` in
/// `H¹(𝒪)`. A coboundary `f(z+ω) − f(z) = c(ω)` with `f` entire forces `f′`
/// to be doubly periodic, hence constant, so `c(τ) = τ c(1)`. The
/// obstruction is therefore `a − τ b`.
pub fn extension_class_oracle(spec: &BundleSpec, tau: C64) -> Result<(ExtensionClass, C64)> {
    let (a1, atau) = match &spec.gluing {
        Gluing::Torus { a1, atau } if spec.rank == 2 => (a1, atau),
        _ => return Err(Error::Mismatch("extension oracle needs a rank-2 torus bundle".into())),
    };
    let unipotent = |m: &Mat| {
        (m[(0, 0)] - 1.0).norm() < 1e-14 && (m[(1, 1)] - 1.0).norm() < 1e-14 && m[(1, 0)].norm() < 1e-14
    };
    if !unipotent(a1) || !unipotent(atau) {
        return Err(Error::Mismatch("automorphy factors must be upper unipotent".into()));
    }
    let obstruction = atau[(0, 1)] - tau * a1[(0, 1)];
    let scale = 1.0 + atau[(0, 1)].norm() + tau.norm() * a1[(0, 1)].norm();
    let class = if obstruction.norm() <= 1e-13 * scale { ExtensionClass::Split } else { ExtensionClass::Nonsplit };
    Ok((class, obstruction))
}

/// A real function on the base given in closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GlobalScalar {
    Constant { value: f64 },
    /// `amp·cos(2π(m u + n v) + phase)` with `z = u + τ v`.
    TorusMode { m: i32, n: i32, amp: f64, #[serde(default)] phase: f64 },
    /// `amp·(axis · X)^power` with `X` the unit-sphere point of `z`.
    SpherePoly { axis: [f64; 3], power: u32, amp: f64 },
    Sum { terms: Vec<GlobalScalar> },
}

impl GlobalScalar {
    pub fn eval(&self, kind: BaseKind, z0: C64) -> f64 {
        match self {
            GlobalScalar::Constant { value } => *value,
            GlobalScalar::TorusMode { m, n, amp, phase } => {
                let tau = match kind {
                    BaseKind::Torus { tau } => tau,
                    BaseKind::Sphere { .. } => return f64::NAN,
                };
                let v = z0.im / tau.im;
                let u = z0.re - tau.re * v;
                amp * (2.0 * PI * (*m as f64 * u + *n as f64 * v) + phase).cos()
            }
            GlobalScalar::SpherePoly { axis, power, amp } => {
                let s = 1.0 + z0.norm_sqr();
                let x = if z0.is_finite() {
                    [2.0 * z0.re / s, 2.0 * z0.im / s, (z0.norm_sqr() - 1.0) / s]
                } else {
                    [0.0, 0.0, 1.0]
                };
                amp * (axis[0] * x[0] + axis[1] * x[1] + axis[2] * x[2]).powi(*power as i32)
            }
            GlobalScalar::Sum { terms } => terms.iter().map(|t| t.eval(kind, z0)).sum(),
        }
    }

    pub fn sample(&self, geom: &BaseGeometry) -> Field<f64> {
        let mut f = geom.field_from(|c, n| self.eval(geom.kind, geom.global_point(c, n)));
        f.synced = true;
        f
    }
}

/// Vanishing order of the bump profile `(1 − |z−c|²/ρ²)^m` at its rim.
const BUMP_ORDER: i32 = 8;

/// Bump `b(z)·S` supported in a disk of one chart, `b` vanishing to high
/// order at the rim.
#[derive(Clone, Debug, PartialEq)]
pub struct Bump {
    pub chart: usize,
    pub center: C64,
    pub radius: f64,
    /// Hermitian amplitude.
    pub amplitude: Mat,
}

impl Bump {
    pub fn profile(&self, z: C64) -> f64 {
        let q = (z - self.center).norm_sqr() / (self.radius * self.radius);
        if q >= 1.0 {
            0.0
        } else {
            (1.0 - q).powi(BUMP_ORDER)
        }
    }
}

/// Seeded random bumps inside the admissible region of each chart.
pub fn random_bumps(geom: &BaseGeometry, rank: usize, count: usize, amplitude: f64, seed: u64) -> Vec<Bump> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (chart, center, radius) = match geom.kind {
                BaseKind::Torus { tau } => {
                    let u: f64 = rng.gen_range(0.45..0.55);
                    let v: f64 = rng.gen_range(0.45..0.55);
                    // distance from the centre to the cell edges
                    let edge = tau.im * v.min(1.0 - v).min(u.min(1.0 - u) / tau.norm());
                    let radius = 0.9 * edge * rng.gen_range(0.8..1.0);
                    (0, C64::new(u, 0.0) + tau * v, radius)
                }
                BaseKind::Sphere { .. } => {
                    let chart = rng.gen_range(0..2usize);
                    let r = rng.gen_range(0.0..0.4);
                    let th = rng.gen_range(0.0..2.0 * PI);
                    (chart, C64::from_polar(r, th), (0.85 - r) * rng.gen_range(0.7..1.0))
                }
            };
            let m = Mat::from_fn(rank, rank, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            Bump { chart, center, radius, amplitude: m.hermitian_part().scale(amplitude) }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricRecipe {
    Identity,
    /// The same constant Hermitian matrix everywhere.
    Constant(Mat),
    /// `diag((1+|z|²)^{-k_i})` in each sphere chart, in the bundle's frame.
    FubiniStudy,
    /// `B(v)^{-†}B(v)^{-1}` with `B(v) = [[1, a v],[0, 1]]`, `v = Im z / Im τ`.
    AtiyahDefault,
    Conformal { phi: GlobalScalar, base: Box<MetricRecipe> },
    ExpPerturbation { bumps: Vec<Bump>, base: Box<MetricRecipe> },
}

/// Validation residuals of a metric field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub hermitian_residual: f64,
    pub min_eigenvalue: f64,
    pub compat_residual: f64,
}

/// A bundle on a concrete base.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub geom: Arc<BaseGeometry>,
    pub spec: BundleSpec,
}

impl Bundle {
    pub fn new(geom: Arc<BaseGeometry>, spec: BundleSpec) -> Result<Self> {
        spec.check_against(&geom)?;
        Ok(Bundle { geom, spec })
    }

    pub fn rank(&self) -> usize {
        self.spec.rank
    }

    /// `G` with `v_ghost = G v_source` for a ghost link of `chart`.
    pub fn ghost_factor(&self, link: &GhostLink) -> Mat {
        match (&self.spec.gluing, link.shift) {
            (Gluing::Torus { a1, atau }, Shift::Torus { n1, ntau }) => mat_pow(a1, n1) * mat_pow(atau, ntau),
            (g @ Gluing::Sphere { .. }, Shift::Sphere { to_chart, z0, .. }) => {
                if to_chart == 0 {
                    g.transition(z0)
                } else {
                    g.transition_inverse(z0)
                }
            }
            _ => unreachable!("bundle and base kinds are checked at construction"),
        }
    }

    fn transform_metric(&self, link: &GhostLink, h: &Mat) -> Mat {
        let g = self.ghost_factor(link);
        let gi = g.inverse().expect("gluing factors are invertible");
        gi.adjoint() * *h * gi
    }

    fn transform_endo(&self, link: &GhostLink, x: &Mat) -> Mat {
        let g = self.ghost_factor(link);
        let gi = g.inverse().expect("gluing factors are invertible");
        g * *x * gi
    }

    pub fn sync_metric(&self, h: &mut MetricField) {
        self.sync_with(h, |b, l, m| b.transform_metric(l, m));
    }

    pub fn sync_endo(&self, x: &mut EndoField) {
        self.sync_with(x, |b, l, m| b.transform_endo(l, m));
    }

    fn sync_with(&self, f: &mut MatField, t: impl Fn(&Self, &GhostLink, &Mat) -> Mat) {
        for chart in &self.geom.charts {
            for link in &chart.ghosts {
                let v = t(self, link, &f.charts[link.src_chart][link.src]);
                f.charts[chart.chart_id][link.ghost] = v;
            }
        }
        f.synced = true;
    }

    /// Largest relative mismatch between stored ghosts and transformed sources.
    pub fn compat_residual(&self, h: &MetricField) -> f64 {
        let mut worst: f64 = 0.0;
        for chart in &self.geom.charts {
            for link in &chart.ghosts {
                let expect = self.transform_metric(link, &h.charts[link.src_chart][link.src]);
                let got = h.charts[chart.chart_id][link.ghost];
                let r = (got - expect).max_abs() / expect.max_abs().max(1e-300);
                worst = worst.max(if r.is_nan() { f64::INFINITY } else { r });
            }
        }
        worst
    }

    pub fn validate(&self, h: &MetricField) -> Result<MetricReport> {
        let mut herm: f64 = 0.0;
        let mut min_eig = f64::INFINITY;
        for (c, n) in self.geom.owned_nodes() {
            let m = h.charts[c][n];
            if !m.is_finite() {
                return Err(Error::NonFinite { chart: c, node: n, z: format!("{}", self.geom.charts[c].nodes[n]) });
            }
            herm = herm.max((m - m.adjoint()).max_abs() / m.max_abs().max(1e-300));
            let e = crate::linalg::eigh(&m);
            min_eig = min_eig.min(e.values()[0]);
            if e.values()[0] <= POSITIVITY_FLOOR {
                return Err(Error::NotPositive { chart: c, node: n });
            }
        }
        Ok(MetricReport { hermitian_residual: herm, min_eigenvalue: min_eig, compat_residual: self.compat_residual(h) })
    }

    /// Pointwise recipe value at node `n` of `chart`.
    fn recipe_value(&self, recipe: &MetricRecipe, chart: usize, n: usize) -> Result<Mat> {
        let r = self.rank();
        let z = self.geom.charts[chart].nodes[n];
        Ok(match recipe {
            MetricRecipe::Identity => Mat::identity(r),
            MetricRecipe::Constant(m) => *m,
            MetricRecipe::FubiniStudy => match &self.spec.gluing {
                Gluing::Sphere { exponents, frame } => {
                    let s = 1.0 + z.norm_sqr();
                    let d: Vec<f64> = exponents.iter().map(|&k| s.powi(-k)).collect();
                    // frame change v ↦ U v sends H to U^{-†} H U^{-1} = U H U†
                    *frame * Mat::diag_real(&d) * frame.adjoint()
                }
                Gluing::Torus { .. } => {
                    return Err(Error::Unsupported("Fubini–Study recipe needs a sphere bundle".into()))
                }
            },
            MetricRecipe::AtiyahDefault => match (&self.spec.gluing, self.geom.kind) {
                (Gluing::Torus { atau, .. }, BaseKind::Torus { tau }) if r == 2 => {
                    let v = z.im / tau.im;
                    let one = C64::new(1.0, 0.0);
                    let zero = C64::new(0.0, 0.0);
                    let binv = Mat::from_rows(&[&[one, -atau[(0, 1)] * v], &[zero, one]]);
                    binv.adjoint() * binv
                }
                _ => return Err(Error::Unsupported("atiyah-default needs a rank-2 torus bundle".into())),
            },
            MetricRecipe::Conformal { phi, base } => {
                let b = self.recipe_value(base, chart, n)?;
                b.scale(phi.eval(self.geom.kind, self.geom.global_point(chart, n)).exp())
            }
            MetricRecipe::ExpPerturbation { bumps, base } => {
                let b = self.recipe_value(base, chart, n)?;
                let mut s = Mat::zeros(r, r);
                let zr = match self.geom.kind {
                    BaseKind::Torus { tau } => reduce_to_cell(z, tau),
                    BaseKind::Sphere { .. } => z,
                };
                for bump in bumps.iter().filter(|bp| bp.chart == chart) {
                    let w = bump.profile(zr);
                    if w > 0.0 {
                        s = s + bump.amplitude.hermitian_part().scale(w);
                    }
                }
                // carry the form from the cell representative to z
                if let (BaseKind::Torus { tau }, Gluing::Torus { a1, atau }) = (self.geom.kind, &self.spec.gluing) {
                    let d = z - zr;
                    let ntau = (d.im / tau.im).round() as i32;
                    let n1 = (d.re - tau.re * ntau as f64).round() as i32;
                    if n1 != 0 || ntau != 0 {
                        let gi = (mat_pow(a1, n1) * mat_pow(atau, ntau)).inverse().expect("gluing factors are invertible");
                        s = gi.adjoint() * s * gi;
                    }
                }
                if s.max_abs() == 0.0 {
                    b
                } else {
                    // H·exp(H⁻¹S) = w e^Λ w† for H⁻¹S = u Λ w†
                    gen_eigh(&s, &b).ok_or(Error::NotPositive { chart, node: n })?.form(f64::exp)
                }
            }
        })
    }

    /// Builds a metric from a recipe and checks it against the gluing.
    pub fn make_metric(&self, recipe: &MetricRecipe) -> Result<MetricField> {
        if let MetricRecipe::ExpPerturbation { bumps, .. } = recipe {
            for b in bumps {
                if b.chart >= self.geom.n_charts() || b.amplitude.rows() != self.rank() {
                    return Err(Error::InvalidParameter("bump chart or amplitude size is invalid".into()));
                }
            }
        }
        let mut charts = Vec::with_capacity(self.geom.n_charts());
        for chart in &self.geom.charts {
            let mut vals = Vec::with_capacity(chart.len());
            for n in 0..chart.len() {
                vals.push(self.recipe_value(recipe, chart.chart_id, n)?);
            }
            charts.push(vals);
        }
        let mut h = Field::from_charts(charts);
        let residual = self.compat_residual(&h);
        if !(residual <= COMPAT_TOL) {
            return Err(Error::Incompatible(residual));
        }
        self.sync_metric(&mut h);
        self.validate(&h)?;
        Ok(h)
    }

    /// Metric from a pointwise closure of (chart, node); ghosts are synced.
    pub fn metric_from_fn(&self, f: impl FnMut(usize, usize) -> Mat) -> Result<MetricField> {
        let mut h = self.geom.field_from(f);
        self.sync_metric(&mut h);
        self.validate(&h)?;
        Ok(h)
    }

    /// Constant frame change applied to both the bundle and a metric on it.
    pub fn gauge(&self, u: &Mat, h: &MetricField) -> Result<(Bundle, MetricField)> {
        let spec = self.spec.gauge(u)?;
        let uinv = u.inverse().ok_or(Error::SingularTransition)?;
        let hu = h.map(|m| uinv.adjoint() * *m * uinv);
        Ok((Bundle { geom: self.geom.clone(), spec }, hu))
    }

    pub fn direct_sum(&self, other: &Bundle) -> Result<Bundle> {
        self.same_base(other)?;
        Bundle::new(self.geom.clone(), self.spec.direct_sum(&other.spec)?)
    }

    pub fn tensor(&self, other: &Bundle) -> Result<Bundle> {
        self.same_base(other)?;
        Bundle::new(self.geom.clone(), self.spec.tensor(&other.spec)?)
    }

    pub fn sym_power(&self, p: usize) -> Result<Bundle> {
        Bundle::new(self.geom.clone(), self.spec.sym_power(p)?)
    }

    pub fn ext_power(&self, p: usize) -> Result<Bundle> {
        Bundle::new(self.geom.clone(), self.spec.ext_power(p)?)
    }

    fn same_base(&self, other: &Bundle) -> Result<()> {
        if Arc::ptr_eq(&self.geom, &other.geom) || self.geom.kind == other.geom.kind {
            Ok(())
        } else {
            Err(Error::Mismatch("bundles live on different bases".into()))
        }
    }
}

/// Representative of `z` in the cell `{u + τv : u, v ∈ [0, 1)}`.
pub fn reduce_to_cell(z: C64, tau: C64) -> C64 {
    let v = z.im / tau.im;
    let u = z.re - tau.re * v;
    C64::new(u.rem_euclid(1.0), 0.0) + tau * v.rem_euclid(1.0)
}

fn mat_pow(a: &Mat, k: i32) -> Mat {
    let base = if k < 0 { a.inverse().expect("invertible automorphy factor") } else { *a };
    let mut out = Mat::identity(a.rows());
    for _ in 0..k.unsigned_abs() {
        out = out * base;
    }
    out
}

/// Block-diagonal metric on a direct sum.
pub fn direct_sum_metric(h1: &MetricField, h2: &MetricField) -> Result<MetricField> {
    zip_fields(h1, h2, block_diag)
}

/// Kronecker product metric on `E₁ ⊗ E₂`.
pub fn tensor_metric(h1: &MetricField, h2: &MetricField) -> Result<MetricField> {
    zip_fields(h1, h2, |a, b| a.kron(b))
}

pub fn sym_power_metric(h: &MetricField, p: usize) -> Result<MetricField> {
    let r = h.charts[0][0].rows();
    let idx = multisets(r, p);
    check_rank(idx.len())?;
    Ok(h.map(|m| sym_matrix(m, &idx)))
}

pub fn ext_power_metric(h: &MetricField, p: usize) -> Result<MetricField> {
    let r = h.charts[0][0].rows();
    if p == 0 || p > r {
        return Err(Error::Mismatch(format!("exterior power {p} of a rank-{r} metric")));
    }
    let idx = subsets(r, p);
    check_rank(idx.len())?;
    Ok(h.map(|m| ext_matrix(m, &idx)))
}

fn zip_fields(a: &MatField, b: &MatField, f: impl Fn(&Mat, &Mat) -> Mat) -> Result<MatField> {
    if a.charts.len() != b.charts.len() || a.charts.iter().zip(&b.charts).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::Mismatch("fields live on different grids".into()));
    }
    Ok(Field {
        charts: a.charts.iter().zip(&b.charts).map(|(x, y)| x.iter().zip(y).map(|(p, q)| f(p, q)).collect()).collect(),
        synced: a.synced && b.synced,
    })
}

/// `s = log(H₀⁻¹H)`, pointwise via the generalized eigenproblem.
pub fn endo_log(geom: &BaseGeometry, h0: &MetricField, h: &MetricField) -> Result<EndoField> {
    endo_map(geom, h0, h, |e| {
        if e.values()[0] <= 0.0 {
            None
        } else {
            Some(e.endo(f64::ln))
        }
    })
}

/// `H = H₀ exp(s)` for an `H₀`-self-adjoint `s`.
pub fn endo_exp(geom: &BaseGeometry, h0: &MetricField, s: &EndoField) -> Result<MetricField> {
    let hs = zip_fields(h0, s, |a, b| (*a * *b).hermitian_part())?;
    endo_map(geom, h0, &hs, |e| Some(e.form(f64::exp)))
}

/// `h = H₀⁻¹H` as an endomorphism field.
pub fn endo_h(h0: &MetricField, h: &MetricField) -> Result<EndoField> {
    zip_fields(h0, h, |a, b| a.inverse().map(|ai| ai * *b).unwrap_or(Mat::zeros(a.rows(), a.cols())))
}

fn endo_map(
    geom: &BaseGeometry,
    h0: &MetricField,
    a: &MetricField,
    f: impl Fn(&crate::linalg::GenEig) -> Option<Mat>,
) -> Result<MatField> {
    let mut charts = Vec::with_capacity(h0.charts.len());
    for (c, (xs, ys)) in h0.charts.iter().zip(&a.charts).enumerate() {
        let mut out = Vec::with_capacity(xs.len());
        for (n, (b, m)) in xs.iter().zip(ys).enumerate() {
            let v = gen_eigh(m, b).and_then(|e| f(&e)).ok_or(Error::NotPositive { chart: c, node: n })?;
            let _ = geom;
            out.push(v);
        }
        charts.push(out);
    }
    Ok(Field { charts, synced: h0.synced && a.synced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_sphere, build_torus};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn sphere() -> Arc<BaseGeometry> {
        Arc::new(build_sphere(16, 32, 1.2).unwrap())
    }

    fn torus() -> Arc<BaseGeometry> {
        Arc::new(build_torus(c(0.0, 1.0), 16).unwrap())
    }

    fn bundle(g: &Arc<BaseGeometry>, e: CatalogEntry) -> Bundle {
        Bundle::new(g.clone(), BundleSpec::from_catalog(&e).unwrap()).unwrap()
    }

    #[test]
    fn catalog_atiyah_commutes() {
        let s = BundleSpec::from_catalog(&CatalogEntry::Atiyah { a_re: 1.0, a_im: 0.0 }).unwrap();
        assert_eq!(s.rank, 2);
        let o0 = BundleSpec::from_catalog(&CatalogEntry::SphereO { k: 0 }).unwrap();
        assert_eq!(o0.gluing.transition(c(0.3, 0.7)), Mat::identity(1));
    }

    #[test]
    fn non_commuting_pair_rejected() {
        let one = c(1.0, 0.0);
        let zero = c(0.0, 0.0);
        let a1 = Mat::from_rows(&[&[zero, one], &[one, zero]]);
        let at = Mat::from_rows(&[&[one, one], &[zero, one]]);
        assert!(matches!(BundleSpec::torus(a1, at, "x".into()), Err(Error::CocycleViolated(_))));
    }

    #[test]
    fn fubini_study_line_bundle_ghosts_are_analytic() {
        let g = sphere();
        let b = bundle(&g, CatalogEntry::SphereO { k: 1 });
        let h = b.make_metric(&MetricRecipe::FubiniStudy).unwrap();
        for chart in &g.charts {
            for link in &chart.ghosts {
                let z = chart.nodes[link.ghost];
                let expect = 1.0 / (1.0 + z.norm_sqr());
                assert!((h.charts[chart.chart_id][link.ghost][(0, 0)] - expect).norm() < 1e-10 * expect);
            }
        }
        let rep = b.validate(&h).unwrap();
        assert!(rep.compat_residual < 1e-12);
    }

    #[test]
    fn identity_on_trivial_torus() {
        let g = torus();
        let b = bundle(&g, CatalogEntry::TorusTrivial { rank: 2 });
        let h = b.make_metric(&MetricRecipe::Identity).unwrap();
        assert!(g.owned_nodes().all(|(c, n)| h.get(c, n) == Mat::identity(2)));
        assert!(h.charts[0].iter().all(|m| *m == Mat::identity(2)));
    }

    #[test]
    fn atiyah_identity_is_incompatible_default_is_not() {
        let g = torus();
        let b = bundle(&g, CatalogEntry::Atiyah { a_re: 1.0, a_im: 0.0 });
        assert!(matches!(b.make_metric(&MetricRecipe::Identity), Err(Error::Incompatible(_))));
        let h = b.make_metric(&MetricRecipe::AtiyahDefault).unwrap();
        let rep = b.validate(&h).unwrap();
        assert!(rep.compat_residual < 1e-12);
        for (c, n) in g.owned_nodes() {
            assert!((h.get(c, n).det() - 1.0).norm() < 1e-12);
        }
    }

    #[test]
    fn sync_is_idempotent() {
        let g = sphere();
        let b = bundle(&g, CatalogEntry::SphereSum { degrees: vec![1, -1] });
        let bumps = random_bumps(&g, 2, 3, 0.5, 7);
        let recipe = MetricRecipe::ExpPerturbation { bumps, base: Box::new(MetricRecipe::FubiniStudy) };
        let mut h = b.make_metric(&recipe).unwrap();
        let once = h.clone();
        b.sync_metric(&mut h);
        assert_eq!(once, h);
    }

    #[test]
    fn perturbed_metrics_are_compatible_on_torus() {
        let g = torus();
        let b = bundle(&g, CatalogEntry::Atiyah { a_re: 1.0, a_im: 0.0 });
        let bumps = random_bumps(&g, 2, 2, 0.5, 3);
        let recipe = MetricRecipe::ExpPerturbation { bumps, base: Box::new(MetricRecipe::AtiyahDefault) };
        let h = b.make_metric(&recipe).unwrap();
        assert!(b.validate(&h).unwrap().hermitian_residual < 1e-12);
    }

    #[test]
    fn conformal_recipe_scales() {
        let g = sphere();
        let b = bundle(&g, CatalogEntry::SphereO { k: 2 });
        let phi = GlobalScalar::SpherePoly { axis: [0.0, 0.6, 0.8], power: 1, amp: 0.4 };
        let recipe = MetricRecipe::Conformal { phi: phi.clone(), base: Box::new(MetricRecipe::FubiniStudy) };
        let h = b.make_metric(&recipe).unwrap();
        let h0 = b.make_metric(&MetricRecipe::FubiniStudy).unwrap();
        for (c, n) in g.owned_nodes() {
            let ratio = h.get(c, n)[(0, 0)].re / h0.get(c, n)[(0, 0)].re;
            assert!((ratio.ln() - phi.eval(g.kind, g.global_point(c, n))).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_sym_ext_examples() {
        let g = sphere();
        let o1 = bundle(&g, CatalogEntry::SphereO { k: 1 });
        let h1 = o1.make_metric(&MetricRecipe::FubiniStudy).unwrap();
        let t = o1.tensor(&o1).unwrap();
        assert_eq!(t.spec.topological_degree(), 2);
        let ht = tensor_metric(&h1, &h1).unwrap();
        for (c, n) in g.owned_nodes() {
            let z = g.charts[c].nodes[n];
            assert!((ht.get(c, n)[(0, 0)].re - (1.0 + z.norm_sqr()).powi(-2)).abs() < 1e-14);
        }
        assert!(t.validate(&ht).unwrap().compat_residual < 1e-12);

        let e = bundle(&g, CatalogEntry::SphereSum { degrees: vec![1, -1] });
        let bumps = random_bumps(&g, 2, 2, 0.5, 11);
        let he = e
            .make_metric(&MetricRecipe::ExpPerturbation { bumps, base: Box::new(MetricRecipe::FubiniStudy) })
            .unwrap();
        let det = ext_power_metric(&he, 2).unwrap();
        for (c, n) in g.owned_nodes() {
            assert!((det.get(c, n)[(0, 0)] - he.get(c, n).det()).norm() < 1e-12);
        }
        let le = e.ext_power(2).unwrap();
        assert!(le.validate(&det).unwrap().compat_residual < 1e-10);

        let s3 = o1.sym_power(3).unwrap();
        let hs = sym_power_metric(&h1, 3).unwrap();
        assert_eq!(s3.spec.topological_degree(), 3);
        for (c, n) in g.owned_nodes() {
            assert!((hs.get(c, n)[(0, 0)] - h1.get(c, n)[(0, 0)].powi(3)).norm() < 1e-14);
        }
        let s2 = e.sym_power(2).unwrap();
        let hs2 = sym_power_metric(&he, 2).unwrap();
        assert!(s2.validate(&hs2).unwrap().compat_residual < 1e-10);
    }

    #[test]
    fn sym_matrix_is_multiplicative() {
        let idx = multisets(2, 3);
        let a = Mat::from_rows(&[&[c(1.0, 0.2), c(0.3, -0.1)], &[c(-0.4, 0.0), c(0.7, 0.5)]]);
        let b = Mat::from_rows(&[&[c(0.2, 0.1), c(1.3, 0.0)], &[c(0.5, -0.6), c(-0.2, 0.4)]]);
        let lhs = sym_matrix(&(a * b), &idx);
        let rhs = sym_matrix(&a, &idx) * sym_matrix(&b, &idx);
        assert!((lhs - rhs).max_abs() < 1e-13);
        assert!((sym_matrix(&Mat::identity(2), &idx) - Mat::identity(4)).max_abs() < 1e-15);
    }

    #[test]
    fn extension_oracle_examples() {
        let tau = c(0.0, 1.0);
        for (a, expect) in [
            (c(0.0, 0.0), ExtensionClass::Split),
            (c(1.0, 0.0), ExtensionClass::Nonsplit),
            (c(-3.0, 2.0), ExtensionClass::Nonsplit),
        ] {
            let one = c(1.0, 0.0);
            let zero = c(0.0, 0.0);
            let s = BundleSpec::torus(Mat::identity(2), Mat::from_rows(&[&[one, a], &[zero, one]]), "e".into())
                .unwrap();
            assert_eq!(extension_class_oracle(&s, tau).unwrap().0, expect);
        }
    }

    #[test]
    fn endo_log_examples() {
        let g = torus();
        let b = bundle(&g, CatalogEntry::TorusTrivial { rank: 2 });
        let h0 = b.make_metric(&MetricRecipe::Identity).unwrap();
        let h = h0.map(|m| m.scale(0.7f64.exp()));
        let s = endo_log(&g, &h0, &h).unwrap();
        assert!(g.owned_nodes().all(|(c, n)| (s.get(c, n) - Mat::identity(2).scale(0.7)).max_abs() < 1e-14));
        let s0 = endo_log(&g, &h0, &h0).unwrap();
        assert!(g.owned_nodes().all(|(c, n)| s0.get(c, n).max_abs() < 1e-14));
    }

    #[test]
    fn constant_gauge_keeps_compatibility() {
        let g = torus();
        let b = bundle(&g, CatalogEntry::Atiyah { a_re: 0.5, a_im: 0.5 });
        let h = b.make_metric(&MetricRecipe::AtiyahDefault).unwrap();
        let th = 0.4f64;
        let u = Mat::from_rows(&[&[c(th.cos(), 0.0), c(0.0, th.sin())], &[c(0.0, th.sin()), c(th.cos(), 0.0)]]);
        let (bu, hu) = b.gauge(&u, &h).unwrap();
        assert!(bu.validate(&hu).unwrap().compat_residual < 1e-12);
    }

    fn spd(vals: &[f64]) -> Mat {
        let m = Mat::from_fn(2, 2, |i, j| c(vals[2 * i + j], vals[4 + 2 * i + j]));
        m * m.adjoint() + Mat::identity(2).scale(0.1)
    }

    proptest! {
        #[test]
        fn log_exp_round_trip(a in proptest::collection::vec(-1.0f64..1.0, 8),
                              b in proptest::collection::vec(-1.0f64..1.0, 8)) {
            let g = build_torus(c(0.0, 1.0), 8).unwrap();
            let (h0m, hm) = (spd(&a), spd(&b));
            let h0 = g.constant(h0m);
            let h = g.constant(hm);
            let s = endo_log(&g, &h0, &h).unwrap();
            let back = endo_exp(&g, &h0, &s).unwrap();
            let err = (back.get(0, 0) - hm).max_abs() / hm.max_abs();
            prop_assert!(err < 1e-12, "round trip error {err:e}");
            let hs = h0m * s.get(0, 0);
            prop_assert!((hs - hs.adjoint()).max_abs() < 1e-10 * hs.max_abs().max(1.0));
        }
    }
}
