//! Spectral form of the discrete scalar Laplacian `Δ = g⁻¹∂∂̄`.
//!
//! Both representations are obtained by probing the finite-difference
//! operator of [`BaseGeometry::laplacian`] with point sources, so they are
//! exact for the discrete operator rather than for the continuum one.
//!
//! Torus: the operator is translation invariant on the `N×N` lattice and
//! diagonal in 2D Fourier modes. Sphere: it commutes with rotations, so it
//! splits into one `2N_r × 2N_r` block per angular mode, coupling mode `m`
//! of chart 0 with mode `d − m` of chart 1, where `d` is the gluing weight
//! of the scalar (`0` for functions, `k_i − k_j` for an endomorphism entry
//! of a split sphere bundle in its adapted frame).

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{BaseGeometry, Shift};
use crate::linalg::phi1;
use crate::C64;
use nalgebra::{DMatrix, DVector};
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

type Lu = nalgebra::LU<C64, nalgebra::Dyn, nalgebra::Dyn>;

pub struct ScalarSpectrum {
    inner: Inner,
}

enum Inner {
    Torus(TorusSpectrum),
    Sphere(SphereSpectrum),
}

struct TorusSpectrum {
    n: usize,
    /// Storage index of owned node `j*N + i`.
    nodes: Vec<usize>,
    /// Symbol of the discrete Laplacian at `k2*N + k1`.
    symbol: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

struct SphereSpectrum {
    n_r: usize,
    n_theta: usize,
    /// Per weight, one block per chart-0 angular mode.
    blocks: HashMap<i32, Vec<DMatrix<C64>>>,
    /// `Σ_j w g` per owned row (rows share weights across columns).
    row_mass: Vec<[f64; 2]>,
    chart_len: [usize; 2],
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    cache: Mutex<HashMap<(i32, u64), Arc<Vec<Lu>>>>,
}

const CACHE_LIMIT: usize = 8;

impl ScalarSpectrum {
    /// Builds the spectrum for the given gluing weights (sphere only; the
    /// torus operator does not depend on the weight).
    pub fn new(geom: &BaseGeometry, weights: &[i32]) -> Result<Self> {
        if let Some(t) = geom.torus_layout() {
            let n = t.n;
            let mut nodes = Vec::with_capacity(n * n);
            for j in 0..n as isize {
                for i in 0..n as isize {
                    nodes.push(t.index(i, j));
                }
            }
            let mut planner = FftPlanner::new();
            let fft = planner.plan_fft_forward(n);
            let ifft = planner.plan_fft_inverse(n);
            let mut probe = geom.constant(C64::new(0.0, 0.0));
            probe.charts[0][nodes[0]] = C64::new(1.0, 0.0);
            geom.sync_scalar(&mut probe);
            let resp = geom.laplacian(&probe)?;
            let mut data: Vec<C64> = nodes.iter().map(|&k| resp.charts[0][k]).collect();
            fft2(&fft, n, &mut data);
            let symbol = data
                .iter()
                .map(|s| {
                    debug_assert!(s.im.abs() < 1e-8 * (1.0 + s.re.abs()));
                    s.re
                })
                .collect();
            return Ok(Self { inner: Inner::Torus(TorusSpectrum { n, nodes, symbol, fft, ifft }) });
        }
        let s = geom.sphere_layout().expect("base is a torus or a sphere");
        let (n_r, n_theta) = (s.n_r, s.n_theta);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n_theta);
        let ifft = planner.plan_fft_inverse(n_theta);
        let mut row_mass = vec![[0.0; 2]; n_r];
        for chart in &geom.charts {
            for row in 0..n_r {
                row_mass[row][chart.chart_id] = (0..n_theta)
                    .map(|col| {
                        let k = s.index(row, col);
                        chart.quad_weights[k] * chart.metric_g[k]
                    })
                    .sum();
            }
        }
        let mut sph = SphereSpectrum {
            n_r,
            n_theta,
            blocks: HashMap::new(),
            row_mass,
            chart_len: [geom.charts[0].len(), geom.charts[1].len()],
            fft,
            ifft,
            cache: Mutex::new(HashMap::new()),
        };
        let mut ws: Vec<i32> = weights.to_vec();
        ws.push(0);
        ws.sort_unstable();
        ws.dedup();
        for d in ws {
            let b = sph.probe(geom, d)?;
            sph.blocks.insert(d, b);
        }
        Ok(Self { inner: Inner::Sphere(sph) })
    }

    /// Solves `Δφ = rhs − c` with `∫φ dvol = 0`; returns `(φ, c)`. `c` is the
    /// part of `rhs` outside the range of the discrete operator.
    pub fn poisson(&self, geom: &BaseGeometry, rhs: &Field<f64>) -> Result<(Field<f64>, f64)> {
        let mut out = geom.constant(0.0);
        let c = match &self.inner {
            Inner::Torus(t) => {
                let mut data: Vec<C64> = t.nodes.iter().map(|&k| C64::new(rhs.charts[0][k], 0.0)).collect();
                fft2(&t.fft, t.n, &mut data);
                let c = data[0].re / (t.n * t.n) as f64;
                for (v, &s) in data.iter_mut().zip(&t.symbol) {
                    *v = if s.abs() < 1e-12 { C64::new(0.0, 0.0) } else { *v / s };
                }
                ifft2(&t.ifft, t.n, &mut data);
                for (&k, v) in t.nodes.iter().zip(&data) {
                    out.charts[0][k] = v.re;
                }
                c
            }
            Inner::Sphere(s) => {
                let rhs_c = rhs.map(|v| C64::new(*v, 0.0));
                let (mut modes, _) = s.forward(&rhs_c, 0);
                let blocks = &s.blocks[&0];
                let mut c = 0.0;
                for (m, v) in modes.iter_mut().enumerate() {
                    if m == 0 {
                        let (x, cc) = s.bordered_solve(&blocks[0], v)?;
                        *v = x;
                        c = cc;
                    } else {
                        *v = blocks[m].clone().lu().solve(v).ok_or_else(|| {
                            Error::InvalidParameter(format!("singular Laplacian block at mode {m}"))
                        })?;
                    }
                }
                let f = s.inverse(&modes, 0);
                for (ci, chart) in f.charts.iter().enumerate() {
                    for row in 0..s.n_r {
                        for col in 0..s.n_theta {
                            let k = row * s.n_theta + col;
                            out.charts[ci][k] = chart[k].re;
                        }
                    }
                }
                c
            }
        };
        geom.sync_scalar(&mut out);
        Ok((out, c))
    }

    /// Step propagator applied to a weight-`d` scalar given at owned nodes:
    /// `φ₁(dt·Δ)` on the torus and `(I − dt·Δ)⁻¹` on the sphere. Ghost
    /// values of the result are zero.
    pub fn propagate(&self, dt: f64, weight: i32, f: &Field<C64>) -> Result<Field<C64>> {
        match &self.inner {
            Inner::Torus(t) => {
                let mut data: Vec<C64> = t.nodes.iter().map(|&k| f.charts[0][k]).collect();
                fft2(&t.fft, t.n, &mut data);
                for (v, &s) in data.iter_mut().zip(&t.symbol) {
                    *v *= phi1(dt * s);
                }
                ifft2(&t.ifft, t.n, &mut data);
                let mut out = f.map(|_| C64::new(0.0, 0.0));
                out.synced = false;
                for (&k, v) in t.nodes.iter().zip(&data) {
                    out.charts[0][k] = *v;
                }
                Ok(out)
            }
            Inner::Sphere(s) => {
                let lus = s.implicit(dt, weight)?;
                let (mut modes, _) = s.forward(f, weight);
                for (v, lu) in modes.iter_mut().zip(lus.iter()) {
                    *v = lu.solve(v).ok_or_else(|| Error::InvalidParameter("singular implicit block".into()))?;
                }
                let mut out = s.inverse(&modes, weight);
                out.synced = false;
                Ok(out)
            }
        }
    }

    /// Discrete Laplacian applied through the spectral form (tests).
    pub fn apply(&self, weight: i32, f: &Field<C64>) -> Field<C64> {
        match &self.inner {
            Inner::Torus(t) => {
                let mut data: Vec<C64> = t.nodes.iter().map(|&k| f.charts[0][k]).collect();
                fft2(&t.fft, t.n, &mut data);
                for (v, &s) in data.iter_mut().zip(&t.symbol) {
                    *v *= s;
                }
                ifft2(&t.ifft, t.n, &mut data);
                let mut out = f.map(|_| C64::new(0.0, 0.0));
                for (&k, v) in t.nodes.iter().zip(&data) {
                    out.charts[0][k] = *v;
                }
                out
            }
            Inner::Sphere(s) => {
                let (mut modes, _) = s.forward(f, weight);
                for (v, b) in modes.iter_mut().zip(&s.blocks[&weight]) {
                    *v = b * &*v;
                }
                s.inverse(&modes, weight)
            }
        }
    }
}

impl SphereSpectrum {
    fn probe(&self, geom: &BaseGeometry, d: i32) -> Result<Vec<DMatrix<C64>>> {
        let (n_r, n_t) = (self.n_r, self.n_theta);
        let dim = 2 * n_r;
        let mut blocks = vec![DMatrix::<C64>::zeros(dim, dim); n_t];
        for src_chart in 0..2 {
            for src_row in 0..n_r {
                let mut probe = geom.constant(C64::new(0.0, 0.0));
                probe.charts[src_chart][src_row * n_t] = C64::new(1.0, 0.0);
                sync_weighted(geom, &mut probe, d);
                let resp = geom.laplacian(&probe)?;
                let col = src_chart * n_r + src_row;
                for chart in 0..2 {
                    for row in 0..n_r {
                        let mut line: Vec<C64> = (0..n_t).map(|j| resp.charts[chart][row * n_t + j]).collect();
                        self.fft.process(&mut line);
                        for (m, block) in blocks.iter_mut().enumerate() {
                            let idx = if chart == 0 { m } else { partner_mode(d, m, n_t) };
                            block[(chart * n_r + row, col)] = line[idx];
                        }
                    }
                }
            }
        }
        Ok(blocks)
    }

    /// Modal coefficients of the owned values, one vector per block.
    fn forward(&self, f: &Field<C64>, d: i32) -> (Vec<DVector<C64>>, ()) {
        let (n_r, n_t) = (self.n_r, self.n_theta);
        let mut lines = [vec![vec![C64::new(0.0, 0.0); n_t]; n_r], vec![vec![C64::new(0.0, 0.0); n_t]; n_r]];
        for (chart, rows) in lines.iter_mut().enumerate() {
            for (row, line) in rows.iter_mut().enumerate() {
                line.copy_from_slice(&f.charts[chart][row * n_t..(row + 1) * n_t]);
                self.fft.process(line);
            }
        }
        let modes = (0..n_t)
            .map(|m| {
                DVector::from_fn(2 * n_r, |k, _| {
                    if k < n_r {
                        lines[0][k][m]
                    } else {
                        lines[1][k - n_r][partner_mode(d, m, n_t)]
                    }
                })
            })
            .collect();
        (modes, ())
    }

    fn inverse(&self, modes: &[DVector<C64>], d: i32) -> Field<C64> {
        let (n_r, n_t) = (self.n_r, self.n_theta);
        let mut lines = [vec![vec![C64::new(0.0, 0.0); n_t]; n_r], vec![vec![C64::new(0.0, 0.0); n_t]; n_r]];
        for (m, v) in modes.iter().enumerate() {
            for row in 0..n_r {
                lines[0][row][m] = v[row];
                lines[1][row][partner_mode(d, m, n_t)] = v[n_r + row];
            }
        }
        let mut out = Field {
            charts: self.chart_len.iter().map(|&len| vec![C64::new(0.0, 0.0); len]).collect::<Vec<_>>(),
            synced: false,
        };
        let scale = 1.0 / n_t as f64;
        for (chart, rows) in lines.iter_mut().enumerate() {
            for (row, line) in rows.iter_mut().enumerate() {
                self.ifft.process(line);
                for (j, v) in line.iter().enumerate() {
                    out.charts[chart][row * n_t + j] = *v * scale;
                }
            }
        }
        out
    }

    fn bordered_solve(&self, block: &DMatrix<C64>, b: &DVector<C64>) -> Result<(DVector<C64>, f64)> {
        let n = block.nrows();
        let nt = self.n_theta as f64;
        let mut a = DMatrix::<C64>::zeros(n + 1, n + 1);
        a.view_mut((0, 0), (n, n)).copy_from(block);
        for k in 0..n {
            // constant field 1 has coefficient N_θ in every row of mode 0
            a[(k, n)] = C64::new(nt, 0.0);
            let mass = self.row_mass[k % self.n_r][k / self.n_r];
            a[(n, k)] = C64::new(mass / nt, 0.0);
        }
        let mut rhs = DVector::<C64>::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(b);
        let x = a.lu().solve(&rhs).ok_or_else(|| Error::InvalidParameter("singular bordered Poisson system".into()))?;
        Ok((x.rows(0, n).into_owned(), x[n].re))
    }

    fn implicit(&self, dt: f64, d: i32) -> Result<Arc<Vec<Lu>>> {
        let key = (d, dt.to_bits());
        let mut cache = self.cache.lock().expect("solver cache lock");
        if let Some(v) = cache.get(&key) {
            return Ok(v.clone());
        }
        let blocks = self
            .blocks
            .get(&d)
            .ok_or_else(|| Error::InvalidParameter(format!("no Laplacian blocks for gluing weight {d}")))?;
        let lus: Vec<Lu> = blocks
            .iter()
            .map(|b| {
                let n = b.nrows();
                (DMatrix::<C64>::identity(n, n) - b * C64::new(dt, 0.0)).lu()
            })
            .collect();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        let v = Arc::new(lus);
        cache.insert(key, v.clone());
        Ok(v)
    }
}

/// Chart-1 mode paired with chart-0 mode `m` for gluing weight `d`.
fn partner_mode(d: i32, m: usize, n: usize) -> usize {
    (d - m as i32).rem_euclid(n as i32) as usize
}

/// Ghost exchange for a scalar of gluing weight `d`: the chart-0 ghost takes
/// `z0^d` times its source, the chart-1 ghost `z0^{−d}`.
pub(crate) fn sync_weighted(geom: &BaseGeometry, f: &mut Field<C64>, d: i32) {
    for chart in &geom.charts {
        for link in &chart.ghosts {
            let v = f.charts[link.src_chart][link.src];
            let factor = match link.shift {
                Shift::Sphere { to_chart: 0, z0, .. } => z0.powi(d),
                Shift::Sphere { z0, .. } => z0.powi(-d),
                Shift::Torus { .. } => C64::new(1.0, 0.0),
            };
            f.charts[chart.chart_id][link.ghost] = v * factor;
        }
    }
    f.synced = true;
}

fn fft2(fft: &Arc<dyn Fft<f64>>, n: usize, data: &mut [C64]) {
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![C64::new(0.0, 0.0); n];
    for i in 0..n {
        for j in 0..n {
            col[j] = data[j * n + i];
        }
        fft.process(&mut col);
        for j in 0..n {
            data[j * n + i] = col[j];
        }
    }
}

fn ifft2(ifft: &Arc<dyn Fft<f64>>, n: usize, data: &mut [C64]) {
    fft2(ifft, n, data);
    let s = 1.0 / (n * n) as f64;
    for v in data.iter_mut() {
        *v *= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_sphere, build_torus};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_owned(geom: &BaseGeometry, seed: u64) -> Field<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = geom.constant(C64::new(0.0, 0.0));
        for (c, n) in geom.owned_nodes() {
            f.charts[c][n] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        f
    }

    fn max_owned_diff(geom: &BaseGeometry, a: &Field<C64>, b: &Field<C64>) -> f64 {
        geom.owned_nodes().map(|(c, n)| (a.charts[c][n] - b.charts[c][n]).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn spectral_form_reproduces_the_stencil() {
        let g = build_torus(C64::new(0.3, 0.9), 16).unwrap();
        let sp = ScalarSpectrum::new(&g, &[]).unwrap();
        let mut f = random_owned(&g, 1);
        g.sync_scalar(&mut f);
        let direct = g.laplacian(&f).unwrap();
        assert!(max_owned_diff(&g, &direct, &sp.apply(0, &f)) < 1e-9);

        let s = build_sphere(12, 24, 1.3).unwrap();
        let sp = ScalarSpectrum::new(&s, &[-2, 2]).unwrap();
        for d in [0, 2, -2] {
            let mut f = random_owned(&s, (4 + d) as u64);
            sync_weighted(&s, &mut f, d);
            let direct = s.laplacian(&f).unwrap();
            let scale = direct.charts.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max);
            assert!(max_owned_diff(&s, &direct, &sp.apply(d, &f)) < 1e-10 * scale, "weight {d}");
        }
    }

    #[test]
    fn poisson_residual_and_mean() {
        for g in [build_torus(C64::new(0.0, 1.0), 32).unwrap(), build_sphere(16, 32, 1.2).unwrap()] {
            let sp = ScalarSpectrum::new(&g, &[]).unwrap();
            let mut rhs = g.field_from(|c, n| {
                let z = g.global_point(c, n);
                let w = z / (1.0 + z.norm_sqr()).sqrt();
                (2.0 * w.re).sin() + w.im * w.im
            });
            let mean = g.integrate(&rhs).unwrap() / g.volume();
            rhs = rhs.map(|v| v - mean + 0.25);
            let (phi, c) = sp.poisson(&g, &rhs).unwrap();
            assert!((c - 0.25).abs() < 1e-3, "constant part {c}");
            assert!(g.integrate(&phi).unwrap().abs() < 1e-12);
            let lap = g.laplacian(&phi.map(|v| C64::new(*v, 0.0))).unwrap();
            let res = g.owned_nodes().map(|(ch, n)| (lap.charts[ch][n].re - rhs.charts[ch][n] + c).abs()).fold(0.0, f64::max);
            assert!(res < 1e-9, "residual {res}");
        }
    }

    #[test]
    fn torus_propagator_is_phi1_of_the_symbol() {
        let g = build_torus(C64::new(0.0, 1.0), 64).unwrap();
        let sp = ScalarSpectrum::new(&g, &[]).unwrap();
        let f = g.sample_scalar(|z| C64::new((2.0 * std::f64::consts::PI * z.re).cos(), 0.0));
        let dt = 0.3;
        let p = sp.propagate(dt, 0, &f).unwrap();
        let lam = -std::f64::consts::PI.powi(2);
        let expect = phi1(dt * lam);
        let worst = g.owned_nodes().map(|(c, n)| (p.charts[c][n] - f.charts[c][n] * expect).norm()).fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn sphere_propagator_inverts_implicit_operator() {
        let g = build_sphere(12, 24, 1.2).unwrap();
        let sp = ScalarSpectrum::new(&g, &[2]).unwrap();
        let f = random_owned(&g, 9);
        let dt = 0.05;
        let mut p = sp.propagate(dt, 2, &f).unwrap();
        sync_weighted(&g, &mut p, 2);
        let lp = g.laplacian(&p).unwrap();
        let worst = g
            .owned_nodes()
            .map(|(c, n)| (p.charts[c][n] - lp.charts[c][n] * dt - f.charts[c][n]).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }
}
