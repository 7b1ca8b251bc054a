//! Discretized base surfaces: the flat torus `ℂ/(ℤ + τℤ)` and the round
//! sphere covered by two stereographic charts `z′ = 1/z`.
//!
//! Both carry a Kähler form `ω = (i/2) g dz∧dz̄` normalized to unit volume.
//! Fields are stored on a grid of owned nodes plus a ghost layer two nodes
//! wide; ghosts are filled from their source nodes by the gluing rules of
//! whatever bundle the field belongs to (see `bundle`).
//!
//! Torus fields are differentiated with 4th-order centred differences in the
//! lattice coordinates `(u, v)` where `z = u + τ v`. Sphere charts use a polar
//! grid: Gauss–Legendre nodes in `r²` on `(0, 1)` with 4th-order differences
//! in `r` (reflected through the origin), and Fourier differentiation in `θ`.

use crate::error::{Error, Result};
use crate::field::{Field, FieldValue};
use crate::quadrature::{fd_weights, gauss_legendre};
use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// Default stencil half-width (ghost width); centred stencils of this
/// half-width are 6th-order accurate.
pub const DEFAULT_HALF_WIDTH: usize = 3;

/// Radial stencils on sphere charts widen up to this half-width where the
/// rows exist (away from the ghost rows near `r = 1`).
const SPHERE_MAX_HALF_WIDTH: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaseKind {
    Torus { tau: C64 },
    Sphere { overlap: f64 },
}

/// How a ghost node relates to its source node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shift {
    /// Ghost sits at `z_src + n1 + ntau·τ`.
    Torus { n1: i32, ntau: i32 },
    /// Ghost lies in chart `to_chart`; `z0` is its chart-0 coordinate and
    /// `dsrc_dghost` the derivative of the source coordinate with respect to
    /// the ghost chart's coordinate.
    Sphere { to_chart: usize, z0: C64, dsrc_dghost: C64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GhostLink {
    pub ghost: usize,
    pub src_chart: usize,
    pub src: usize,
    pub shift: Shift,
}

#[derive(Clone, Debug)]
pub struct ChartGrid {
    pub chart_id: usize,
    pub rows: usize,
    pub cols: usize,
    pub nodes: Vec<C64>,
    /// Coordinate-area weights (`dx dy`); zero outside the owned region.
    pub quad_weights: Vec<f64>,
    pub metric_g: Vec<f64>,
    pub owned: Vec<usize>,
    pub ghosts: Vec<GhostLink>,
}

impl ChartGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct TorusLayout {
    pub n: usize,
    pub tau: C64,
    /// Stencil half-width (= ghost width).
    pub p: usize,
    /// Centred first/second derivative weights at unit spacing, length 2p+1.
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl TorusLayout {
    pub fn stride(&self) -> usize {
        self.n + 2 * self.p
    }

    /// Storage index of lattice node `(i, j)`, `i` along 1 and `j` along τ.
    pub fn index(&self, i: isize, j: isize) -> usize {
        let g = self.p as isize;
        ((j + g) as usize) * self.stride() + (i + g) as usize
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }
}

#[derive(Clone)]
pub(crate) struct SphereLayout {
    pub n_r: usize,
    pub n_theta: usize,
    /// Radii of rows `0..n_r + 2` (last two are ghost rows beyond `r = 1`).
    pub radii: Vec<f64>,
    /// Radial stencil of owned row `i`: (row, flipped through origin).
    pub stencil: Vec<Vec<(usize, bool)>>,
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
    pub fft: Arc<dyn Fft<f64>>,
    pub ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SphereLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SphereLayout")
            .field("n_r", &self.n_r)
            .field("n_theta", &self.n_theta)
            .field("radii", &self.radii)
            .finish()
    }
}

impl SphereLayout {
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n_theta + col
    }

    pub fn theta(&self, col: usize) -> f64 {
        2.0 * PI * col as f64 / self.n_theta as f64
    }

    /// Signed Fourier mode of FFT bin `k`.
    pub fn mode(&self, k: usize) -> i64 {
        let n = self.n_theta as i64;
        let k = k as i64;
        if k <= n / 2 {
            k
        } else {
            k - n
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Layout {
    Torus(TorusLayout),
    Sphere(SphereLayout),
}

/// A discretized compact Riemann surface with unit-volume Kähler form.
#[derive(Clone, Debug)]
pub struct BaseGeometry {
    pub kind: BaseKind,
    pub charts: Vec<ChartGrid>,
    pub(crate) layout: Layout,
}

/// `∂_z f`, `∂_z̄ f` and `∂_z∂_z̄ f` at owned nodes.
#[derive(Clone, Debug)]
pub struct Derivs<T> {
    pub dz: Field<T>,
    pub dzbar: Field<T>,
    pub dzdzbar: Field<T>,
}

impl BaseGeometry {
    pub fn torus(tau: C64, n: usize) -> Result<Self> {
        Self::torus_with_width(tau, n, DEFAULT_HALF_WIDTH)
    }

    /// Torus grid with centred stencils of half-width `p` (order `2p`).
    pub fn torus_with_width(tau: C64, n: usize, p: usize) -> Result<Self> {
        check_half_width(p)?;
        if !(tau.im > 0.0) || !tau.re.is_finite() {
            return Err(Error::InvalidParameter(format!("Im τ must be positive (τ = {tau})")));
        }
        if n < 8 {
            return Err(Error::InvalidParameter(format!("torus resolution too small: N = {n} < 8")));
        }
        let xs: Vec<f64> = (0..=2 * p).map(|k| k as f64 - p as f64).collect();
        let w = fd_weights(0.0, &xs, 2);
        let layout = TorusLayout { n, tau, p, d1: w[1].clone(), d2: w[2].clone() };
        let stride = layout.stride();
        let size = stride * stride;
        let g = 1.0 / tau.im;
        let area = tau.im / (n * n) as f64;
        let mut nodes = vec![C64::new(0.0, 0.0); size];
        let mut quad_weights = vec![0.0; size];
        let mut owned = Vec::with_capacity(n * n);
        let mut ghosts = Vec::new();
        let gw = p as isize;
        let ni = n as isize;
        for j in -gw..ni + gw {
            for i in -gw..ni + gw {
                let idx = layout.index(i, j);
                nodes[idx] = C64::new(i as f64 / n as f64, 0.0) + tau * (j as f64 / n as f64);
                let inside = (0..ni).contains(&i) && (0..ni).contains(&j);
                if inside {
                    quad_weights[idx] = area;
                    owned.push(idx);
                } else {
                    let n1 = i.div_euclid(ni) as i32;
                    let ntau = j.div_euclid(ni) as i32;
                    let src = layout.index(i.rem_euclid(ni), j.rem_euclid(ni));
                    ghosts.push(GhostLink { ghost: idx, src_chart: 0, src, shift: Shift::Torus { n1, ntau } });
                }
            }
        }
        let chart = ChartGrid {
            chart_id: 0,
            rows: stride,
            cols: stride,
            nodes,
            quad_weights,
            metric_g: vec![g; size],
            owned,
            ghosts,
        };
        Ok(BaseGeometry { kind: BaseKind::Torus { tau }, charts: vec![chart], layout: Layout::Torus(layout) })
    }

    pub fn sphere(n_r: usize, n_theta: usize, overlap: f64) -> Result<Self> {
        Self::sphere_with_width(n_r, n_theta, overlap, DEFAULT_HALF_WIDTH)
    }

    /// Sphere grid with radial stencils of half-width `p`.
    pub fn sphere_with_width(n_r: usize, n_theta: usize, overlap: f64, p: usize) -> Result<Self> {
        check_half_width(p)?;
        if n_r < 8 {
            return Err(Error::InvalidParameter(format!("radial count {n_r} < 8")));
        }
        if n_theta < 16 || n_theta % 2 != 0 {
            return Err(Error::InvalidParameter(format!("angular count {n_theta} must be even and ≥ 16")));
        }
        if !(overlap > 1.0 && overlap <= 1.5) {
            return Err(Error::InvalidParameter(format!("overlap radius {overlap} outside (1, 1.5]")));
        }
        let (x, wx) = gauss_legendre(n_r, 0.0, 1.0);
        let mut radii: Vec<f64> = x.iter().map(|x| x.sqrt()).collect();
        for k in 1..=p {
            radii.push(1.0 / radii[n_r - k]);
        }
        if radii[n_r + p - 1] > overlap {
            return Err(Error::InvalidParameter(format!(
                "ghost radius {:.4} exceeds the overlap radius {overlap}",
                radii[n_r + p - 1]
            )));
        }
        // extended radial coordinate: -r_{q-1}, ..., -r0, r0, ..., r_{n_r+p-1};
        // stencils widen up to half-width q away from the ghost rows
        let q = SPHERE_MAX_HALF_WIDTH.max(p).min(n_r);
        let ext: Vec<(f64, usize, bool)> = (0..q)
            .rev()
            .map(|k| (-radii[k], k, true))
            .chain(radii.iter().enumerate().map(|(i, &r)| (r, i, false)))
            .collect();
        let mut stencil = Vec::with_capacity(n_r);
        let mut w1 = Vec::with_capacity(n_r);
        let mut w2 = Vec::with_capacity(n_r);
        for i in 0..n_r {
            let centre = q + i;
            let half = q.min(ext.len() - 1 - centre);
            let pts = &ext[centre - half..=centre + half];
            let xs: Vec<f64> = pts.iter().map(|e| e.0).collect();
            let w = fd_weights(radii[i], &xs, 2);
            stencil.push(pts.iter().map(|e| (e.1, e.2)).collect());
            w1.push(w[1].clone());
            w2.push(w[2].clone());
        }
        let mut planner = FftPlanner::new();
        let layout = SphereLayout {
            n_r,
            n_theta,
            radii: radii.clone(),
            stencil,
            w1,
            w2,
            fft: planner.plan_fft_forward(n_theta),
            ifft: planner.plan_fft_inverse(n_theta),
        };
        let rows = n_r + p;
        let size = rows * n_theta;
        let dtheta = 2.0 * PI / n_theta as f64;
        let mut charts = Vec::with_capacity(2);
        for chart_id in 0..2 {
            let mut nodes = vec![C64::new(0.0, 0.0); size];
            let mut quad_weights = vec![0.0; size];
            let mut metric_g = vec![0.0; size];
            let mut owned = Vec::with_capacity(n_r * n_theta);
            let mut ghosts = Vec::new();
            let partner = 1 - chart_id;
            for row in 0..rows {
                for col in 0..n_theta {
                    let idx = layout.index(row, col);
                    let z = C64::from_polar(radii[row], layout.theta(col));
                    nodes[idx] = z;
                    metric_g[idx] = fs_density(z);
                    if row < n_r {
                        // ∫ f r dr dθ = ½ ∫ f d(r²) dθ
                        quad_weights[idx] = 0.5 * wx[row] * dtheta;
                        owned.push(idx);
                    } else {
                        let src_row = 2 * n_r - 1 - row;
                        let src_col = (n_theta - col) % n_theta;
                        let src = layout.index(src_row, src_col);
                        let (z0, dsrc) = if chart_id == 0 {
                            // source coordinate z' = 1/z
                            (z, -1.0 / (z * z))
                        } else {
                            // source coordinate z = 1/z'
                            (1.0 / z, -1.0 / (z * z))
                        };
                        ghosts.push(GhostLink {
                            ghost: idx,
                            src_chart: partner,
                            src,
                            shift: Shift::Sphere { to_chart: chart_id, z0, dsrc_dghost: dsrc },
                        });
                    }
                }
            }
            charts.push(ChartGrid {
                chart_id,
                rows,
                cols: n_theta,
                nodes,
                quad_weights,
                metric_g,
                owned,
                ghosts,
            });
        }
        Ok(BaseGeometry { kind: BaseKind::Sphere { overlap }, charts, layout: Layout::Sphere(layout) })
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.kind, BaseKind::Torus { .. })
    }

    pub fn n_charts(&self) -> usize {
        self.charts.len()
    }

    /// Owned nodes per chart as `(rows, cols)`, stored row-major: `(N, N)`
    /// with rows along τ on the torus, `(N_r, N_θ)` on the sphere.
    pub fn owned_shape(&self) -> (usize, usize) {
        match &self.layout {
            Layout::Torus(t) => (t.n, t.n),
            Layout::Sphere(s) => (s.n_r, s.n_theta),
        }
    }

    pub(crate) fn torus_layout(&self) -> Option<&TorusLayout> {
        match &self.layout {
            Layout::Torus(t) => Some(t),
            _ => None,
        }
    }

    pub(crate) fn sphere_layout(&self) -> Option<&SphereLayout> {
        match &self.layout {
            Layout::Sphere(s) => Some(s),
            _ => None,
        }
    }

    /// Chart-0 coordinate of a node (the torus has a single chart).
    pub fn global_point(&self, chart: usize, node: usize) -> C64 {
        let z = self.charts[chart].nodes[node];
        if chart == 0 {
            z
        } else {
            1.0 / z
        }
    }

    /// A field filled with `f(chart, node)` at every storage node.
    pub fn field_from<T: Copy>(&self, mut f: impl FnMut(usize, usize) -> T) -> Field<T> {
        Field {
            charts: self.charts.iter().map(|c| (0..c.len()).map(|n| f(c.chart_id, n)).collect()).collect(),
            synced: true,
        }
    }

    /// Samples a global scalar given as a function of the chart-0 coordinate.
    pub fn sample_scalar(&self, f: impl Fn(C64) -> C64) -> Field<C64> {
        self.field_from(|c, n| f(self.global_point(c, n)))
    }

    pub fn constant<T: Copy>(&self, v: T) -> Field<T> {
        self.field_from(|_, _| v)
    }

    /// Copies ghost values verbatim from their sources (scalar pullback).
    pub fn sync_scalar<T: Copy>(&self, f: &mut Field<T>) {
        for chart in &self.charts {
            for link in &chart.ghosts {
                let v = f.charts[link.src_chart][link.src];
                f.charts[chart.chart_id][link.ghost] = v;
            }
        }
        f.synced = true;
    }

    /// `Σ w · g · f` over owned nodes of every chart.
    pub fn integrate(&self, f: &Field<f64>) -> Result<f64> {
        let mut total = 0.0;
        for chart in &self.charts {
            for &n in &chart.owned {
                let v = f.charts[chart.chart_id][n];
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        chart: chart.chart_id,
                        node: n,
                        z: format!("{}", chart.nodes[n]),
                    });
                }
                total += chart.quad_weights[n] * chart.metric_g[n] * v;
            }
        }
        Ok(total)
    }

    /// Integral against the volume form of a pointwise quantity.
    pub fn integrate_with(&self, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for chart in &self.charts {
            for &n in &chart.owned {
                total += chart.quad_weights[n] * chart.metric_g[n] * f(chart.chart_id, n);
            }
        }
        total
    }

    pub fn volume(&self) -> f64 {
        self.integrate_with(|_, _| 1.0)
    }

    /// Iterator over `(chart, node)` of owned nodes.
    pub fn owned_nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.charts.iter().flat_map(|c| c.owned.iter().map(move |&n| (c.chart_id, n)))
    }

    pub fn min_metric(&self) -> f64 {
        self.owned_nodes().map(|(c, n)| self.charts[c].metric_g[n]).fold(f64::INFINITY, f64::min)
    }

    pub fn d_z<T: FieldValue>(&self, f: &Field<T>) -> Result<Field<T>> {
        Ok(self.derivatives(f)?.dz)
    }

    pub fn d_zbar<T: FieldValue>(&self, f: &Field<T>) -> Result<Field<T>> {
        Ok(self.derivatives(f)?.dzbar)
    }

    /// `Δ f = g⁻¹ ∂_z ∂_z̄ f` at owned nodes.
    pub fn laplacian<T: FieldValue>(&self, f: &Field<T>) -> Result<Field<T>> {
        let mut out = self.derivatives(f)?.dzdzbar;
        for chart in &self.charts {
            for &n in &chart.owned {
                let v = out.charts[chart.chart_id][n];
                out.charts[chart.chart_id][n] = v * (1.0 / chart.metric_g[n]);
            }
        }
        Ok(out)
    }

    pub fn derivatives<T: FieldValue>(&self, f: &Field<T>) -> Result<Derivs<T>> {
        if !f.synced {
            return Err(Error::StaleGhosts);
        }
        match &self.layout {
            Layout::Torus(t) => Ok(self.torus_derivatives(t, f)),
            Layout::Sphere(s) => Ok(self.sphere_derivatives(s, f)),
        }
    }

    fn torus_derivatives<T: FieldValue>(&self, t: &TorusLayout, f: &Field<T>) -> Derivs<T> {
        let vals = &f.charts[0];
        let zero = vals[0].zero_like();
        let mut dz = vec![zero; vals.len()];
        let mut dzbar = vec![zero; vals.len()];
        let mut lap = vec![zero; vals.len()];
        let h = t.h();
        let (tr, ti) = (t.tau.re, t.tau.im);
        let sheared = tr != 0.0;
        let n = t.n as isize;
        let p = t.p as isize;
        let (d1, d2) = (&t.d1, &t.d2);
        let i_unit = C64::new(0.0, 1.0);
        for j in 0..n {
            for i in 0..n {
                let mut du = zero;
                let mut dv = zero;
                let mut duu = zero;
                let mut dvv = zero;
                for k in 0..d1.len() {
                    let o = k as isize - p;
                    let fu = vals[t.index(i + o, j)];
                    let fv = vals[t.index(i, j + o)];
                    if d1[k] != 0.0 {
                        du = du + fu * d1[k];
                        dv = dv + fv * d1[k];
                    }
                    duu = duu + fu * d2[k];
                    dvv = dvv + fv * d2[k];
                }
                let du = du * (1.0 / h);
                let dv = dv * (1.0 / h);
                let duu = duu * (1.0 / (h * h));
                let dvv = dvv * (1.0 / (h * h));
                let mut dyy = dvv;
                if sheared {
                    let mut duv = zero;
                    for a in 0..d1.len() {
                        if d1[a] == 0.0 {
                            continue;
                        }
                        for b in 0..d1.len() {
                            if d1[b] == 0.0 {
                                continue;
                            }
                            let v = vals[t.index(i + a as isize - p, j + b as isize - p)];
                            duv = duv + v * (d1[a] * d1[b]);
                        }
                    }
                    let duv = duv * (1.0 / (h * h));
                    dyy = dvv - duv * (2.0 * tr) + duu * (tr * tr);
                }
                let dx = du;
                let dy = (dv - du * tr) * (1.0 / ti);
                let dyy = dyy * (1.0 / (ti * ti));
                let idx = t.index(i, j);
                dz[idx] = (dx - dy * i_unit) * 0.5;
                dzbar[idx] = (dx + dy * i_unit) * 0.5;
                lap[idx] = (duu + dyy) * 0.25;
            }
        }
        Derivs {
            dz: Field::from_charts(vec![dz]),
            dzbar: Field::from_charts(vec![dzbar]),
            dzdzbar: Field::from_charts(vec![lap]),
        }
    }

    fn sphere_derivatives<T: FieldValue>(&self, s: &SphereLayout, f: &Field<T>) -> Derivs<T> {
        let nt = s.n_theta;
        let half = nt / 2;
        let i_unit = C64::new(0.0, 1.0);
        let mut out_dz = Vec::with_capacity(2);
        let mut out_dzbar = Vec::with_capacity(2);
        let mut out_lap = Vec::with_capacity(2);
        for chart in 0..self.charts.len() {
            let vals = &f.charts[chart];
            let zero = vals[0].zero_like();
            let mut dz = vec![zero; vals.len()];
            let mut dzbar = vec![zero; vals.len()];
            let mut lap = vec![zero; vals.len()];
            for row in 0..s.n_r {
                let r = s.radii[row];
                let ring: Vec<T> = (0..nt).map(|c| vals[s.index(row, c)]).collect();
                let (dth, dthth) = self.ring_derivatives(s, &ring);
                for col in 0..nt {
                    let mut dr = zero;
                    let mut drr = zero;
                    for k in 0..s.stencil[row].len() {
                        let (srow, flip) = s.stencil[row][k];
                        let scol = if flip { (col + half) % nt } else { col };
                        let v = vals[s.index(srow, scol)];
                        dr = dr + v * s.w1[row][k];
                        drr = drr + v * s.w2[row][k];
                    }
                    let e = C64::from_polar(1.0, -s.theta(col));
                    let idx = s.index(row, col);
                    let ang = dth[col] * (i_unit / r);
                    dz[idx] = (dr - ang) * (e * 0.5);
                    dzbar[idx] = (dr + ang) * (e.conj() * 0.5);
                    lap[idx] = (drr + dr * (1.0 / r) + dthth[col] * (1.0 / (r * r))) * 0.25;
                }
            }
            out_dz.push(dz);
            out_dzbar.push(dzbar);
            out_lap.push(lap);
        }
        Derivs {
            dz: Field::from_charts(out_dz),
            dzbar: Field::from_charts(out_dzbar),
            dzdzbar: Field::from_charts(out_lap),
        }
    }

    /// Fourier first and second derivatives in θ of one ring of values.
    fn ring_derivatives<T: FieldValue>(&self, s: &SphereLayout, ring: &[T]) -> (Vec<T>, Vec<T>) {
        let nt = s.n_theta;
        let ncomp = ring[0].n_comp();
        let mut d1 = ring.to_vec();
        let mut d2 = ring.to_vec();
        let mut buf = vec![C64::new(0.0, 0.0); nt];
        let mut b1 = vec![C64::new(0.0, 0.0); nt];
        let inv_n = 1.0 / nt as f64;
        for k in 0..ncomp {
            for (b, v) in buf.iter_mut().zip(ring) {
                *b = v.comp(k);
            }
            s.fft.process(&mut buf);
            for (m_idx, b) in buf.iter_mut().enumerate() {
                let m = s.mode(m_idx) as f64;
                let first = if m_idx == nt / 2 { C64::new(0.0, 0.0) } else { *b * C64::new(0.0, m) };
                b1[m_idx] = first * inv_n;
                *b = *b * (-m * m * inv_n);
            }
            s.ifft.process(&mut b1);
            s.ifft.process(&mut buf);
            for c in 0..nt {
                d1[c].set_comp(k, b1[c]);
                d2[c].set_comp(k, buf[c]);
            }
        }
        (d1, d2)
    }
}

fn check_half_width(p: usize) -> Result<()> {
    if (2..=4).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("stencil half-width {p} outside 2..=4")))
    }
}

/// Round metric density `g = 1/(π(1+|z|²)²)` (unit area), the same in both charts.
pub fn fs_density(z: C64) -> f64 {
    let s = 1.0 + z.norm_sqr();
    1.0 / (PI * s * s)
}

pub fn build_torus(tau: C64, n: usize) -> Result<BaseGeometry> {
    BaseGeometry::torus(tau, n)
}

pub fn build_sphere(n_r: usize, n_theta: usize, overlap: f64) -> Result<BaseGeometry> {
    BaseGeometry::sphere(n_r, n_theta, overlap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn real(f: &Field<C64>) -> Field<f64> {
        f.map(|v| v.re)
    }

    #[test]
    fn torus_volume_and_metric() {
        let g = build_torus(c(0.0, 1.0), 64).unwrap();
        assert!((g.volume() - 1.0).abs() < 1e-13);
        assert_eq!(g.charts[0].owned.len(), 64 * 64);
        let g2 = build_torus(c(0.0, 2.0), 32).unwrap();
        assert!((g2.charts[0].metric_g[0] - 0.5).abs() < 1e-15);
        let cell = g2.charts[0].quad_weights[g2.charts[0].owned[0]];
        assert!((cell - 2.0 / 1024.0).abs() < 1e-16);
        assert!((g2.volume() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn torus_rejects_bad_parameters() {
        assert!(matches!(build_torus(c(0.0, 1.0), 4), Err(Error::InvalidParameter(_))));
        assert!(matches!(build_torus(c(1.0, 0.0), 16), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn sphere_volume_and_rejections() {
        let g = build_sphere(16, 32, 1.2).unwrap();
        assert!((g.volume() - 1.0).abs() < 1e-10);
        assert!(build_sphere(4, 32, 1.2).is_err());
        assert!(build_sphere(16, 8, 1.2).is_err());
        assert!(build_sphere(16, 32, 1.0).is_err());
        assert!(build_sphere(16, 32, 1.6).is_err());
    }

    #[test]
    fn sphere_integrals() {
        let g = build_sphere(16, 32, 1.2).unwrap();
        let f = g.sample_scalar(|z| c(1.0 / (1.0 + z.norm_sqr()), 0.0));
        assert!((g.integrate(&real(&f)).unwrap() - 0.5).abs() < 1e-8);
        let f = g.sample_scalar(|z| c(z.norm_sqr() / (1.0 + z.norm_sqr()), 0.0));
        assert!((g.integrate(&real(&f)).unwrap() - 0.5).abs() < 1e-8);
    }

    #[test]
    fn sphere_chart_swap_preserves_integrals() {
        let g = build_sphere(16, 32, 1.2).unwrap();
        let f = |z: C64| (z.re / (1.0 + z.norm_sqr())).exp() + 0.3 * (z.im / (1.0 + z.norm_sqr()));
        let a = g.integrate(&real(&g.sample_scalar(|z| c(f(z), 0.0)))).unwrap();
        let b = g.integrate(&real(&g.sample_scalar(|z| c(f(1.0 / z), 0.0)))).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn torus_trig_integral_exact() {
        let g = build_torus(c(0.0, 1.0), 32).unwrap();
        let f = g.sample_scalar(|z| c((2.0 * PI * z.re).cos().powi(2), 0.0));
        assert!((g.integrate(&real(&f)).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn integrate_reports_nan() {
        let g = build_torus(c(0.0, 1.0), 16).unwrap();
        let mut f = g.constant(1.0);
        let node = g.charts[0].owned[5];
        f.charts[0][node] = f64::NAN;
        match g.integrate(&f) {
            Err(Error::NonFinite { node: n, .. }) => assert_eq!(n, node),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn stale_ghosts_are_rejected() {
        let g = build_torus(c(0.0, 1.0), 16).unwrap();
        let mut f = g.constant(c(1.0, 0.0));
        f.synced = false;
        assert!(matches!(g.d_z(&f), Err(Error::StaleGhosts)));
    }

    #[test]
    fn sphere_chart_derivatives_of_polynomials() {
        let g = build_sphere(16, 32, 1.2).unwrap();
        // chart-local polynomial fields (ghosts filled analytically)
        let z2 = g.field_from(|c, n| g.charts[c].nodes[n].powi(2));
        let d = g.derivatives(&z2).unwrap();
        let zbar = g.field_from(|c, n| g.charts[c].nodes[n].conj());
        let zf = g.field_from(|c, n| g.charts[c].nodes[n]);
        let dzbar_of_zbar = g.d_zbar(&zbar).unwrap();
        let dzbar_of_z = g.d_zbar(&zf).unwrap();
        for (chart, node) in g.owned_nodes() {
            let z = g.charts[chart].nodes[node];
            assert!((d.dz.get(chart, node) - 2.0 * z).norm() < 1e-11);
            assert!(d.dzbar.get(chart, node).norm() < 1e-11);
            assert!((dzbar_of_zbar.get(chart, node) - 1.0).norm() < 1e-11);
            assert!(dzbar_of_z.get(chart, node).norm() < 1e-12);
        }
    }

    #[test]
    fn torus_laplacian_eigenfunction() {
        let g = build_torus(c(0.0, 1.0), 64).unwrap();
        let f = g.sample_scalar(|z| C64::from_polar(1.0, 2.0 * PI * z.re));
        let lap = g.laplacian(&f).unwrap();
        for (chart, node) in g.owned_nodes() {
            let expect = f.get(chart, node) * (-PI * PI);
            assert!((lap.get(chart, node) - expect).norm() < 1e-6);
        }
        let lc = g.laplacian(&g.constant(c(3.0, 0.0))).unwrap();
        assert!(g.owned_nodes().all(|(c, n)| lc.get(c, n).norm() < 1e-12));
    }

    #[test]
    fn sphere_laplacian_of_log_potential() {
        let g = build_sphere(32, 64, 1.2).unwrap();
        let f = g.field_from(|c, n| C64::new((1.0 + g.charts[c].nodes[n].norm_sqr()).ln(), 0.0));
        let lap = g.laplacian(&f).unwrap();
        let err = g.owned_nodes().map(|(c, n)| (lap.get(c, n) - PI).norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err:e}");
    }

    #[test]
    fn sheared_torus_matches_rectangular_formula() {
        let tau = c(0.3, 1.1);
        let g = build_torus(tau, 64).unwrap();
        // e^{2πi u} with u = x - (Re τ/Im τ) y is doubly periodic
        let k = |z: C64| 2.0 * PI * (z.re - tau.re / tau.im * z.im);
        let f = g.sample_scalar(|z| C64::from_polar(1.0, k(z)));
        let lap = g.laplacian(&f).unwrap();
        // Δ = g⁻¹ ¼ |∇|², ∇k = 2π (1, -Re τ/Im τ)
        let grad2 = (2.0 * PI).powi(2) * (1.0 + (tau.re / tau.im).powi(2));
        let metric = 1.0 / tau.im;
        for (chart, node) in g.owned_nodes() {
            let expect = f.get(chart, node) * (-0.25 * grad2 / metric);
            assert!((lap.get(chart, node) - expect).norm() < 1e-4);
        }
    }

    #[test]
    fn differentiation_order_on_torus() {
        let err = |n: usize| {
            let g = build_torus(c(0.0, 1.0), n).unwrap();
            let f = g.sample_scalar(|z| C64::new((2.0 * PI * z.re).sin() * (2.0 * PI * z.im).cos(), 0.0));
            let d = g.d_z(&f).unwrap();
            g.owned_nodes()
                .map(|(c, node)| {
                    let z = g.charts[c].nodes[node];
                    let (x, y) = (2.0 * PI * z.re, 2.0 * PI * z.im);
                    let exact = C64::new(PI * x.cos() * y.cos(), PI * x.sin() * y.sin());
                    (d.get(c, node) - exact).norm()
                })
                .fold(0.0, f64::max)
        };
        let order = (err(32) / err(64)).log2();
        assert!(order >= 3.8, "measured order {order}");
    }

    #[test]
    fn differentiation_order_on_sphere_radial() {
        let err = |n: usize| {
            let g = build_sphere(n, 32, 1.2).unwrap();
            let f = g.sample_scalar(|z| C64::new(1.0 / (1.0 + z.norm_sqr()), 0.0));
            let d = g.d_z(&f).unwrap();
            g.owned_nodes()
                .filter(|&(c, _)| c == 0)
                .map(|(c, node)| {
                    let z = g.charts[c].nodes[node];
                    let exact = -z.conj() / (1.0 + z.norm_sqr()).powi(2);
                    (d.get(c, node) - exact).norm()
                })
                .fold(0.0, f64::max)
        };
        let order = (err(16) / err(32)).log2();
        assert!(order >= 3.8, "measured order {order}");
    }
}
