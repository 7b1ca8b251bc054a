//! Donaldson heat flow `H⁻¹∂_tH = −(ΛF − ĉI)`.
//!
//! A step is `H ← H·exp(−X)` with `X = dt·sym_H(P_dt(ΛF − ĉI))`, where
//! `P_dt` is the linear propagator of the scalar Laplacian applied
//! entrywise in a frame where the entries are honest functions (torus:
//! periodic gauge; sphere: the adapted splitting frame). On the torus
//! `P_dt = φ₁(dt·Δ)`, which makes the step exact for line bundles; on the
//! sphere `P_dt = (I − dt·Δ)⁻¹`. Steps are accepted only if `M` does not
//! increase and the update stays well inside the positive cone.

use crate::bundle::{Bundle, EndoField, Gluing, MetricField};
use crate::chern::{degree_from, diagnostics_from, lambda_f, rank_of};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::functional::{functional_path, Method};
use crate::geometry::{BaseGeometry, BaseKind};
use crate::linalg::{gen_eigh, phi1, Mat};
use crate::solvers::ScalarSpectrum;
use crate::C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Accepted steps may raise `M` by at most this much.
pub const DM_SLACK: f64 = 1e-10;
/// Smallest admissible eigenvalue of `exp(−X)` in one step.
pub const POSITIVITY_MARGIN: f64 = 1e-10;
pub const MAX_HALVINGS: u32 = 20;
pub const GROWTH_STREAK: u32 = 10;
pub const GROWTH_FACTOR: f64 = 1.1;
/// Gauss–Legendre nodes for the per-step increment of `M`.
pub const STEP_NT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowParams {
    pub dt0: f64,
    pub dt_max: f64,
    pub t_max: f64,
    /// Stop once `he_defect` drops below this value (0 disables).
    pub stop_defect: f64,
    /// Stop once `‖log h‖_∞` exceeds this value.
    pub blowup_log: f64,
    pub trace_stride: u64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self { dt0: 1e-3, dt_max: 0.5, t_max: 1.0, stop_defect: 0.0, blowup_log: 200.0, trace_stride: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub t: f64,
    pub h: MetricField,
    pub dt: f64,
    pub c_hat: f64,
    pub step: u64,
    pub streak: u32,
    /// `M(H₀, H_t)` accumulated from per-step increments.
    pub m: f64,
    pub rejected: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub he_defect: f64,
    pub hym_energy: f64,
    pub lambda_f_l2: f64,
    pub h_min_eig: f64,
    pub h_max_eig: f64,
    pub logdet_inf: f64,
    pub degree: f64,
}

impl TraceRow {
    pub const COLUMNS: [&'static str; 9] =
        ["t", "M", "he_defect", "hym_energy", "lambda_f_l2", "h_min_eig", "h_max_eig", "logdet_inf", "degree"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.t,
            self.m,
            self.he_defect,
            self.hym_energy,
            self.lambda_f_l2,
            self.h_min_eig,
            self.h_max_eig,
            self.logdet_inf,
            self.degree,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum StopReason {
    TMax,
    Converged { he_defect: f64 },
    /// `‖log h‖_∞` passed the threshold: the metric degenerates along a
    /// destabilizing direction.
    Blowup { log_h_inf: f64 },
}

#[derive(Clone, Debug)]
pub struct FlowOutcome {
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
    /// Largest accepted increment of `M`.
    pub max_dm: f64,
}

enum Frame {
    Torus { b: Vec<Mat>, binv: Vec<Mat> },
    Sphere { u: Mat, exponents: Vec<i32> },
}

/// Integrator for one bundle and reference metric `H₀`.
pub struct Flow {
    pub bundle: Bundle,
    pub h0: MetricField,
    spectrum: ScalarSpectrum,
    frame: Frame,
}

impl Flow {
    pub fn new(bundle: Bundle, h0: MetricField) -> Result<Self> {
        bundle.validate(&h0)?;
        let geom = bundle.geom.clone();
        let (frame, weights) = match (&bundle.spec.gluing, geom.kind) {
            (Gluing::Torus { a1, atau }, BaseKind::Torus { tau }) => {
                let la = a1.logm().ok_or_else(|| Error::Unsupported("automorphy factor has no logarithm".into()))?;
                let lt = atau.logm().ok_or_else(|| Error::Unsupported("automorphy factor has no logarithm".into()))?;
                let chart = &geom.charts[0];
                let mut b = Vec::with_capacity(chart.len());
                let mut binv = Vec::with_capacity(chart.len());
                for n in 0..chart.len() {
                    let z = chart.nodes[n];
                    let v = z.im / tau.im;
                    let u = z.re - tau.re * v;
                    b.push((la.scale(u) + lt.scale(v)).expm());
                    binv.push((la.scale(-u) + lt.scale(-v)).expm());
                }
                (Frame::Torus { b, binv }, vec![])
            }
            (Gluing::Sphere { exponents, frame }, BaseKind::Sphere { .. }) => {
                let mut w = Vec::new();
                for &a in exponents {
                    for &c in exponents {
                        w.push(a - c);
                    }
                }
                (Frame::Sphere { u: *frame, exponents: exponents.clone() }, w)
            }
            _ => return Err(Error::Mismatch("bundle and base kinds differ".into())),
        };
        let spectrum = ScalarSpectrum::new(&geom, &weights)?;
        Ok(Self { bundle, h0, spectrum, frame })
    }

    pub fn geom(&self) -> &BaseGeometry {
        &self.bundle.geom
    }

    /// Fresh state at `t = 0` with `ĉ = π·deg(H₀)/r`.
    pub fn initial_state(&self, dt0: f64) -> Result<FlowState> {
        let lf = lambda_f(self.geom(), &self.h0)?;
        let r = rank_of(&self.h0) as f64;
        let c_hat = PI * degree_from(self.geom(), &lf)? / r;
        // The step moves tr ΛF only within the range of the discrete
        // Laplacian, so the reachable constant is ĉ plus the bordered
        // Poisson constant of tr(ΛF₀ − ĉI).
        let rhs: Field<f64> = lf.map(|m| m.trace().re - r * c_hat);
        let (_, offset) = self.spectrum.poisson(self.geom(), &rhs)?;
        let c_hat = c_hat + offset / r;
        Ok(FlowState { t: 0.0, h: self.h0.clone(), dt: dt0, c_hat, step: 0, streak: 0, m: 0.0, rejected: 0 })
    }

    /// `P_dt` applied to an endomorphism field at owned nodes.
    fn precondition(&self, dt: f64, r: &EndoField) -> Result<EndoField> {
        let geom = self.geom();
        let rank = rank_of(r);
        let to_frame = |c: usize, n: usize, x: &Mat| -> Mat {
            match &self.frame {
                Frame::Torus { b, binv } => binv[n] * *x * b[n],
                Frame::Sphere { u, .. } => {
                    let _ = c;
                    u.adjoint() * *x * *u
                }
            }
        };
        let mut y = r.clone();
        for (c, n) in geom.owned_nodes() {
            y.charts[c][n] = to_frame(c, n, &r.charts[c][n]);
        }
        let mut out = y.clone();
        for a in 0..rank {
            for bcol in 0..rank {
                let weight = match &self.frame {
                    Frame::Torus { .. } => 0,
                    Frame::Sphere { exponents, .. } => exponents[a] - exponents[bcol],
                };
                let entry: Field<C64> = y.map(|m| m[(a, bcol)]);
                let p = self.spectrum.propagate(dt, weight, &entry)?;
                for (c, n) in geom.owned_nodes() {
                    out.charts[c][n][(a, bcol)] = p.charts[c][n];
                }
            }
        }
        for (c, n) in geom.owned_nodes() {
            let v = out.charts[c][n];
            out.charts[c][n] = match &self.frame {
                Frame::Torus { b, binv } => b[n] * v * binv[n],
                Frame::Sphere { u, .. } => *u * v * u.adjoint(),
            };
        }
        out.synced = false;
        Ok(out)
    }

    /// Proposed metric for step `dt`, or `None` if it leaves the positive cone.
    fn propose(&self, state: &FlowState, lf: &EndoField, dt: f64) -> Result<Option<MetricField>> {
        let geom = self.geom();
        let r = rank_of(&state.h);
        let mut res = lf.clone();
        for (c, n) in geom.owned_nodes() {
            res.charts[c][n] = lf.charts[c][n] - Mat::identity(r).scale(state.c_hat);
        }
        let p = self.precondition(dt, &res)?;
        let mut h = state.h.clone();
        for (c, n) in geom.owned_nodes() {
            let hm = state.h.charts[c][n];
            let y = p.charts[c][n];
            // H·sym_H(Y) = ½(HY + Y†H) is Hermitian
            let s = (hm * y + y.adjoint() * hm).scale(0.5 * dt);
            let e = gen_eigh(&s, &hm).ok_or(Error::NotPositive { chart: c, node: n })?;
            let top = e.values().iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            if !top.is_finite() || (-top).exp() < POSITIVITY_MARGIN {
                return Ok(None);
            }
            // H·exp(−H⁻¹S)
            let next = e.form(|l| (-l).exp());
            if !next.is_finite() {
                return Ok(None);
            }
            h.charts[c][n] = next;
        }
        self.bundle.sync_metric(&mut h);
        Ok(Some(h))
    }

    /// One accepted step, halving `dt` on rejection. `limit` caps the step
    /// without changing the controller's `dt`.
    pub fn step(&self, state: &FlowState, lf: &EndoField, limit: f64) -> Result<(FlowState, f64)> {
        let geom = self.geom();
        let mut dt = state.dt;
        let mut rejected = 0u32;
        loop {
            let dt_try = dt.min(limit);
            if let Some(h) = self.propose(state, lf, dt_try)? {
                let dm = functional_path(geom, &state.h, &h, Method::PathExp, STEP_NT, Some(state.c_hat))?.value;
                if dm <= DM_SLACK {
                    let mut next = state.clone();
                    next.h = h;
                    next.t += dt_try;
                    next.m += dm;
                    next.step += 1;
                    next.rejected += rejected as u64;
                    if rejected > 0 {
                        next.dt = dt;
                        next.streak = 0;
                    } else {
                        next.streak += 1;
                        if next.streak >= GROWTH_STREAK {
                            next.streak = 0;
                            next.dt = dt * GROWTH_FACTOR;
                        }
                    }
                    return Ok((next, dm));
                }
            }
            rejected += 1;
            if rejected > MAX_HALVINGS {
                let d = diagnostics_from(geom, &state.h, lf, state.c_hat)?;
                return Err(Error::DtUnderflow { t: state.t, he_defect: d.he_defect, log_h: self.log_h_inf(&state.h)? });
            }
            dt *= 0.5;
        }
    }

    /// `max |log λ|` over eigenvalues `λ` of `h = H₀⁻¹H`.
    pub fn log_h_inf(&self, h: &MetricField) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (c, n) in self.geom().owned_nodes() {
            let e = gen_eigh(&h.charts[c][n], &self.h0.charts[c][n]).ok_or(Error::NotPositive { chart: c, node: n })?;
            for &l in e.values() {
                worst = worst.max(l.ln().abs());
            }
        }
        Ok(worst)
    }

    pub fn record(&self, state: &FlowState, lf: &EndoField) -> Result<TraceRow> {
        let geom = self.geom();
        let d = diagnostics_from(geom, &state.h, lf, state.c_hat)?;
        let (mut lo, mut hi, mut ld) = (f64::INFINITY, 0.0f64, 0.0f64);
        for (c, n) in geom.owned_nodes() {
            let e = gen_eigh(&state.h.charts[c][n], &self.h0.charts[c][n]).ok_or(Error::NotPositive { chart: c, node: n })?;
            let v = e.values();
            lo = lo.min(v[0]);
            hi = hi.max(v[v.len() - 1]);
            ld = ld.max(v.iter().map(|l| l.ln()).sum::<f64>().abs());
        }
        Ok(TraceRow {
            t: state.t,
            m: state.m,
            he_defect: d.he_defect,
            hym_energy: d.hym_energy,
            lambda_f_l2: d.lambda_f_l2,
            h_min_eig: lo,
            h_max_eig: hi,
            logdet_inf: ld,
            degree: d.degree,
        })
    }

    /// Integrates until `t_max`, convergence, or blow-up. `on_step` sees
    /// the starting state and every accepted state, with the trace row when
    /// one is recorded.
    pub fn run(
        &self,
        mut state: FlowState,
        params: &FlowParams,
        mut on_step: impl FnMut(&FlowState, Option<&TraceRow>) -> Result<()>,
    ) -> Result<(FlowState, FlowOutcome)> {
        validate_params(params)?;
        let mut lf = lambda_f(self.geom(), &state.h)?;
        let first = self.record(&state, &lf)?;
        on_step(&state, Some(&first))?;
        let mut trace = vec![first];
        let mut max_dm = f64::NEG_INFINITY;
        let mut stop = self.stop_check(&state, &first, params)?;
        while stop.is_none() {
            let limit = params.t_max - state.t;
            let (mut next, dm) = self.step(&state, &lf, limit)?;
            next.dt = next.dt.min(params.dt_max);
            if params.t_max - next.t < 1e-12 * params.t_max.max(1.0) {
                next.t = params.t_max;
            }
            max_dm = max_dm.max(dm);
            state = next;
            lf = lambda_f(self.geom(), &state.h)?;
            let row = self.record(&state, &lf)?;
            stop = self.stop_check(&state, &row, params)?;
            if state.step % params.trace_stride == 0 || stop.is_some() {
                on_step(&state, Some(&row))?;
                trace.push(row);
            } else {
                on_step(&state, None)?;
            }
        }
        Ok((state, FlowOutcome { trace, stop: stop.expect("loop exits on a stop reason"), max_dm }))
    }

    fn stop_check(&self, state: &FlowState, row: &TraceRow, params: &FlowParams) -> Result<Option<StopReason>> {
        if params.stop_defect > 0.0 && row.he_defect < params.stop_defect {
            return Ok(Some(StopReason::Converged { he_defect: row.he_defect }));
        }
        let lh = self.log_h_inf(&state.h)?;
        if lh > params.blowup_log {
            return Ok(Some(StopReason::Blowup { log_h_inf: lh }));
        }
        if state.t >= params.t_max {
            return Ok(Some(StopReason::TMax));
        }
        Ok(None)
    }
}

fn validate_params(p: &FlowParams) -> Result<()> {
    let mut errs = Vec::new();
    if !(p.dt0 > 0.0 && p.dt0.is_finite()) {
        errs.push(format!("flow.dt0 must be positive (got {})", p.dt0));
    }
    if !(p.dt_max >= p.dt0) {
        errs.push(format!("flow.dt_max must be at least dt0 (got {})", p.dt_max));
    }
    if !(p.t_max > 0.0 && p.t_max.is_finite()) {
        errs.push(format!("flow.t_max must be positive (got {})", p.t_max));
    }
    if p.trace_stride == 0 {
        errs.push("flow.trace_stride must be at least 1".into());
    }
    if !(p.blowup_log > 0.0) {
        errs.push("flow.blowup_log must be positive".into());
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConformalReport {
    /// `∫ tr(ΛF − ĉI) dvol` before normalization.
    pub rhs_integral: f64,
    /// `max |Δφ − (rhs − c)|` over owned nodes.
    pub residual: f64,
    pub phi_mean: f64,
    pub phi_max: f64,
}

/// Solves `Δφ = tr(ΛF − ĉI)` and returns `e^{φ/r}H`, which has
/// `tr ΛF = rĉ` pointwise.
pub fn conformal_normalize(bundle: &Bundle, h: &MetricField) -> Result<(MetricField, ConformalReport)> {
    let geom = &bundle.geom;
    let r = rank_of(h);
    let lf = lambda_f(geom, h)?;
    let c_hat = PI * degree_from(geom, &lf)? / r as f64;
    let rhs: Field<f64> = lf.map(|m| m.trace().re - r as f64 * c_hat);
    let integral = geom.integrate(&rhs)?;
    if integral.abs() > 1e-8 {
        return Err(Error::Invariant(format!(
            "conformal normalization needs ∫tr(ΛF − ĉI) dvol = 0 (got {integral:.3e})"
        )));
    }
    let spectrum = ScalarSpectrum::new(geom, &[])?;
    let (phi, c) = spectrum.poisson(geom, &rhs)?;
    let lap = geom.laplacian(&phi.map(|v| C64::new(*v, 0.0)))?;
    let residual = geom
        .owned_nodes()
        .map(|(ch, n)| (lap.charts[ch][n].re - rhs.charts[ch][n] + c).abs())
        .fold(0.0, f64::max);
    let mut out = h.clone();
    for ch in 0..out.charts.len() {
        for n in 0..out.charts[ch].len() {
            out.charts[ch][n] = h.charts[ch][n].scale((phi.charts[ch][n] / r as f64).exp());
        }
    }
    bundle.sync_metric(&mut out);
    let phi_max = geom.owned_nodes().map(|(ch, n)| phi.charts[ch][n].abs()).fold(0.0, f64::max);
    let report = ConformalReport { rhs_integral: integral, residual, phi_mean: geom.integrate(&phi)?, phi_max };
    Ok((out, report))
}

/// Exact Fourier solution of `∂_tφ = Δφ − f` on the torus with the
/// continuum symbol of `Δ = g⁻¹∂∂̄`. Inputs are sampled at owned nodes.
pub fn scalar_heat_oracle(geom: &BaseGeometry, phi0: &Field<f64>, f: &Field<f64>, t: f64) -> Result<Field<f64>> {
    let tau = match geom.kind {
        BaseKind::Torus { tau } => tau,
        BaseKind::Sphere { .. } => return Err(Error::Unsupported("the scalar heat oracle needs a torus".into())),
    };
    let n = (geom.charts[0].owned.len() as f64).sqrt().round() as usize;
    let chart = &geom.charts[0];
    // owned nodes in lattice order
    let mut idx = vec![0usize; n * n];
    for &k in &chart.owned {
        let z = chart.nodes[k];
        let v = z.im / tau.im;
        let u = z.re - tau.re * v;
        let i = (u * n as f64).round() as usize % n;
        let j = (v * n as f64).round() as usize % n;
        idx[j * n + i] = k;
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let transform = |data: &mut Vec<C64>, plan: &std::sync::Arc<dyn rustfft::Fft<f64>>| {
        for row in data.chunks_mut(n) {
            plan.process(row);
        }
        let mut col = vec![C64::new(0.0, 0.0); n];
        for i in 0..n {
            for j in 0..n {
                col[j] = data[j * n + i];
            }
            plan.process(&mut col);
            for j in 0..n {
                data[j * n + i] = col[j];
            }
        }
    };
    let mut p: Vec<C64> = idx.iter().map(|&k| C64::new(phi0.charts[0][k], 0.0)).collect();
    let mut q: Vec<C64> = idx.iter().map(|&k| C64::new(f.charts[0][k], 0.0)).collect();
    transform(&mut p, &fwd);
    transform(&mut q, &fwd);
    let signed = |k: usize| if k < n / 2 { k as f64 } else { k as f64 - n as f64 };
    for j in 0..n {
        for i in 0..n {
            let (k1, k2) = (signed(i), signed(j));
            let a = 2.0 * PI * k1;
            let b = 2.0 * PI * (k2 - k1 * tau.re) / tau.im;
            let lam = -tau.im * (a * a + b * b) / 4.0;
            let s = j * n + i;
            p[s] = p[s] * (lam * t).exp() - q[s] * (t * phi1(lam * t));
        }
    }
    transform(&mut p, &inv);
    let mut out = geom.constant(0.0);
    let scale = 1.0 / (n * n) as f64;
    for (s, &k) in idx.iter().enumerate() {
        out.charts[0][k] = p[s].re * scale;
    }
    geom.sync_scalar(&mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PassageEntry {
    pub epsilon: f64,
    /// First recorded time with `he_defect < ε`; `None` if not reached.
    pub t: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeReport {
    pub entries: Vec<PassageEntry>,
    /// Smallest recorded `he_defect`.
    pub best_defect: f64,
}

/// First-passage times of `he_defect` below each `ε` (sorted decreasing).
pub fn he_report(trace: &[TraceRow], eps: &[f64]) -> HeReport {
    let mut e: Vec<f64> = eps.to_vec();
    e.sort_by(|a, b| b.total_cmp(a));
    e.dedup();
    let entries = e
        .iter()
        .map(|&epsilon| PassageEntry { epsilon, t: trace.iter().find(|r| r.he_defect < epsilon).map(|r| r.t) })
        .collect();
    let best_defect = trace.iter().map(|r| r.he_defect).fold(f64::INFINITY, f64::min);
    HeReport { entries, best_defect }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AbReport {
    pub inf_lambda_f_l2: f64,
    /// `Σ (πμ_i)² r_i` in internal units.
    pub phi_sq_internal: f64,
    /// `Σ μ_i² r_i` with integer slopes.
    pub phi_sq_slopes: f64,
    /// `(inf − Φ²)/Φ²`, or the absolute gap when `Φ² = 0`.
    pub gap: f64,
}

/// Compares `inf ‖ΛF‖²` over a trace with `Φ(𝓕)²` for a declared flag
/// given as `(slope, rank)` of the successive quotients.
pub fn ab_compare(trace: &[TraceRow], flag: &[(f64, usize)], degree: f64, rank: usize) -> Result<AbReport> {
    if trace.is_empty() {
        return Err(Error::InvalidParameter("empty trace".into()));
    }
    if flag.is_empty() || flag.iter().any(|&(_, r)| r == 0) {
        return Err(Error::InadmissibleFlag("pieces must have positive rank".into()));
    }
    if flag.windows(2).any(|w| w[0].0 <= w[1].0) {
        return Err(Error::InadmissibleFlag("slopes must be strictly decreasing".into()));
    }
    let rsum: usize = flag.iter().map(|p| p.1).sum();
    if rsum != rank {
        return Err(Error::InadmissibleFlag(format!("ranks sum to {rsum}, bundle rank is {rank}")));
    }
    let dsum: f64 = flag.iter().map(|&(m, r)| m * r as f64).sum();
    if (dsum - degree).abs() > 1e-6 {
        return Err(Error::InadmissibleFlag(format!("degrees sum to {dsum}, bundle degree is {degree}")));
    }
    let phi_sq_slopes: f64 = flag.iter().map(|&(m, r)| m * m * r as f64).sum();
    let phi_sq_internal = PI * PI * phi_sq_slopes;
    let inf = trace.iter().map(|r| r.lambda_f_l2).fold(f64::INFINITY, f64::min);
    let gap = if phi_sq_internal > 0.0 { (inf - phi_sq_internal) / phi_sq_internal } else { inf };
    Ok(AbReport { inf_lambda_f_l2: inf, phi_sq_internal, phi_sq_slopes, gap })
}

/// Monotonicity and energy-identity checks on a trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonotonicityReport {
    /// Largest increase of `M` between consecutive records.
    pub max_increase: f64,
    /// Records where the centred `dM/dt` was compared with `−hym_energy`.
    pub smooth_points: usize,
    /// Worst relative mismatch on those records.
    pub worst_rel_mismatch: f64,
}

/// Relative change of `hym_energy` across a centred window below which
/// the stretch counts as smooth.
pub const SMOOTH_WINDOW: f64 = 0.02;

pub fn monotonicity(trace: &[TraceRow]) -> MonotonicityReport {
    let max_increase = trace.windows(2).map(|w| w[1].m - w[0].m).fold(f64::NEG_INFINITY, f64::max);
    let mut smooth_points = 0;
    let mut worst: f64 = 0.0;
    for w in trace.windows(3) {
        let e = w[1].hym_energy;
        if e <= 1e-12 || w[2].t <= w[0].t {
            continue;
        }
        if (w[2].hym_energy - w[0].hym_energy).abs() / e > SMOOTH_WINDOW {
            continue;
        }
        let dmdt = (w[2].m - w[0].m) / (w[2].t - w[0].t);
        smooth_points += 1;
        worst = worst.max((dmdt + e).abs() / e);
    }
    MonotonicityReport { max_increase, smooth_points, worst_rel_mismatch: worst }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{random_bumps, BundleSpec, CatalogEntry, GlobalScalar, MetricRecipe};
    use crate::geometry::{build_sphere, build_torus};
    use std::sync::Arc;

    fn torus_bundle(n: usize, e: CatalogEntry) -> Bundle {
        let g = Arc::new(build_torus(C64::new(0.0, 1.0), n).unwrap());
        Bundle::new(g, BundleSpec::from_catalog(&e).unwrap()).unwrap()
    }

    fn sphere_bundle(n_r: usize, e: CatalogEntry) -> Bundle {
        let g = Arc::new(build_sphere(n_r, 2 * n_r, 1.2).unwrap());
        Bundle::new(g, BundleSpec::from_catalog(&e).unwrap()).unwrap()
    }

    #[test]
    fn he_metric_is_a_fixed_point() {
        let b = torus_bundle(16, CatalogEntry::TorusTrivial { rank: 2 });
        let c = Mat::from_rows(&[&[C64::new(2.0, 0.0), C64::new(0.5, 0.5)], &[C64::new(0.5, -0.5), C64::new(1.0, 0.0)]]);
        let h0 = b.make_metric(&MetricRecipe::Constant(c)).unwrap();
        let flow = Flow::new(b, h0.clone()).unwrap();
        let st = flow.initial_state(0.1).unwrap();
        let lf = lambda_f(flow.geom(), &st.h).unwrap();
        let (next, dm) = flow.step(&st, &lf, 1.0).unwrap();
        let worst = flow.geom().owned_nodes().map(|(c, n)| (next.h.get(c, n) - h0.get(c, n)).max_abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12 && dm.abs() < 1e-12);
    }

    #[test]
    fn conformal_normalization_inverts_a_conformal_factor() {
        let b = torus_bundle(32, CatalogEntry::TorusFlat { alpha: 0.2 });
        let psi = GlobalScalar::Sum {
            terms: vec![
                GlobalScalar::TorusMode { m: 1, n: 0, amp: 0.4, phase: 0.3 },
                GlobalScalar::TorusMode { m: 1, n: 2, amp: 0.2, phase: 0.0 },
                GlobalScalar::Constant { value: 0.7 },
            ],
        };
        let h = b.make_metric(&MetricRecipe::Conformal { phi: psi.clone(), base: Box::new(MetricRecipe::Identity) }).unwrap();
        let (hn, rep) = conformal_normalize(&b, &h).unwrap();
        assert!(rep.residual < 1e-9 && rep.phi_mean.abs() < 1e-12, "{rep:?}");
        let g = &b.geom;
        // e^{ψ}·e^{φ} with φ = −ψ + mean ψ leaves e^{mean ψ} = e^{0.7}
        let worst = g.owned_nodes().map(|(c, n)| (hn.get(c, n)[(0, 0)].re - 0.7f64.exp()).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");

        let a = torus_bundle(32, CatalogEntry::Atiyah { a_re: 1.0, a_im: 0.0 });
        let ha = a.make_metric(&MetricRecipe::AtiyahDefault).unwrap();
        let (_, rep) = conformal_normalize(&a, &ha).unwrap();
        assert!(rep.rhs_integral.abs() < 1e-8);
    }

    #[test]
    fn normalization_makes_line_bundles_hermitian_einstein() {
        let b = sphere_bundle(16, CatalogEntry::SphereO { k: 2 });
        let bumps = random_bumps(&b.geom, 1, 2, 0.5, 5);
        let h = b.make_metric(&MetricRecipe::ExpPerturbation { bumps, base: Box::new(MetricRecipe::FubiniStudy) }).unwrap();
        let (hn, rep) = conformal_normalize(&b, &h).unwrap();
        assert!(rep.residual < 1e-9, "{rep:?}");
        let d = crate::chern::diagnostics(&b.geom, &hn).unwrap();
        assert!(d.he_defect < 1e-8, "{d:?}");
    }

    #[test]
    fn oracle_single_mode_and_trivial_cases() {
        let g = build_torus(C64::new(0.0, 1.0), 32).unwrap();
        let phi0 = g.field_from(|c, n| (2.0 * PI * g.global_point(c, n).re).cos());
        let zero = g.constant(0.0);
        let t = 0.2;
        let out = scalar_heat_oracle(&g, &phi0, &zero, t).unwrap();
        let decay = (-PI * PI * t).exp();
        let worst = g.owned_nodes().map(|(c, n)| (out.get(c, n) - decay * phi0.get(c, n)).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12);
        let k = g.constant(0.4);
        let out = scalar_heat_oracle(&g, &k, &zero, 1.0).unwrap();
        assert!(g.owned_nodes().all(|(c, n)| (out.get(c, n) - 0.4).abs() < 1e-14));
        assert!(scalar_heat_oracle(&g, &zero, &zero, 1.0).unwrap().charts[0].iter().all(|v| v.abs() < 1e-300));
        let s = build_sphere(8, 16, 1.2).unwrap();
        assert!(matches!(scalar_heat_oracle(&s, &s.constant(0.0), &s.constant(0.0), 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn line_bundle_flow_matches_oracle() {
        let b = torus_bundle(64, CatalogEntry::TorusTrivial { rank: 1 });
        let psi = GlobalScalar::Sum {
            terms: vec![
                GlobalScalar::TorusMode { m: 1, n: 0, amp: 0.5, phase: 0.0 },
                GlobalScalar::TorusMode { m: 2, n: -1, amp: 0.2, phase: 0.4 },
            ],
        };
        let h0 = b.make_metric(&MetricRecipe::Conformal { phi: psi, base: Box::new(MetricRecipe::Identity) }).unwrap();
        let g = b.geom.clone();
        let phi0 = h0.map(|m| m[(0, 0)].re.ln());
        let flow = Flow::new(b, h0).unwrap();
        let params = FlowParams { dt0: 0.01, dt_max: 0.05, t_max: 1.0, ..FlowParams::default() };
        let mut worst: f64 = 0.0;
        let st = flow.initial_state(params.dt0).unwrap();
        let (end, out) = flow
            .run(st, &params, |s, _| {
                if (s.t * 10.0 - (s.t * 10.0).round()).abs() < 1e-9 {
                    let o = scalar_heat_oracle(&g, &phi0, &g.constant(0.0), s.t).unwrap();
                    for (c, n) in g.owned_nodes() {
                        worst = worst.max((s.h.get(c, n)[(0, 0)].re.ln() - o.get(c, n)).abs());
                    }
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(out.stop, StopReason::TMax);
        assert!((end.t - 1.0).abs() < 1e-12);
        assert!(worst > 0.0 && worst < 1e-6, "{worst}");
        assert!(out.max_dm <= DM_SLACK);
    }

    #[test]
    fn sphere_line_bundle_converges() {
        let b = sphere_bundle(32, CatalogEntry::SphereO { k: 2 });
        let bumps = random_bumps(&b.geom, 1, 2, 0.5, 8);
        let h0 = b.make_metric(&MetricRecipe::ExpPerturbation { bumps, base: Box::new(MetricRecipe::FubiniStudy) }).unwrap();
        let flow = Flow::new(b, h0).unwrap();
        let params = FlowParams { dt0: 0.01, t_max: 20.0, stop_defect: 1e-7, ..FlowParams::default() };
        let st = flow.initial_state(params.dt0).unwrap();
        let (end, out) = flow.run(st, &params, |_, _| Ok(())).unwrap();
        assert!(matches!(out.stop, StopReason::Converged { .. }), "{:?}", out.stop);
        let mono = monotonicity(&out.trace);
        assert!(mono.max_increase <= DM_SLACK);
        let deg0 = out.trace[0].degree;
        let drift = out.trace.iter().map(|r| (r.degree - deg0).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "{drift:.3e}");
        let lf = lambda_f(flow.geom(), &end.h).unwrap();
        assert!(flow.geom().owned_nodes().all(|(c, n)| (lf.get(c, n)[(0, 0)].re - 2.0 * PI).abs() < 1e-6));
    }

    #[test]
    fn atiyah_flow_is_monotone_and_keeps_det() {
        let b = torus_bundle(16, CatalogEntry::Atiyah { a_re: 1.0, a_im: 0.0 });
        let bumps = random_bumps(&b.geom, 2, 2, 0.5, 4);
        let h = b.make_metric(&MetricRecipe::ExpPerturbation { bumps, base: Box::new(MetricRecipe::AtiyahDefault) }).unwrap();
        let (h0, _) = conformal_normalize(&b, &h).unwrap();
        let flow = Flow::new(b, h0).unwrap();
        let params = FlowParams { dt0: 0.01, t_max: 5.0, ..FlowParams::default() };
        let st = flow.initial_state(params.dt0).unwrap();
        let (_, out) = flow.run(st, &params, |_, _| Ok(())).unwrap();
        let mono = monotonicity(&out.trace);
        assert!(mono.max_increase <= DM_SLACK, "{mono:?}");
        assert!(out.trace.iter().all(|r| r.logdet_inf < 1e-6), "{:?}", out.trace.last());
        assert!(out.trace.last().unwrap().he_defect < out.trace[0].he_defect);
    }

    #[test]
    fn report_helpers() {
        let row = |t: f64, d: f64, l2: f64| TraceRow {
            t,
            m: -t,
            he_defect: d,
            hym_energy: d * d,
            lambda_f_l2: l2,
            h_min_eig: 1.0,
            h_max_eig: 1.0,
            logdet_inf: 0.0,
            degree: 0.0,
        };
        let tr = vec![row(0.0, 1.0, 3.0), row(1.0, 0.07, 2.0), row(2.0, 0.02, 1.0)];
        let rep = he_report(&tr, &[0.01, 0.1, 0.05]);
        let ts: Vec<Option<f64>> = rep.entries.iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![Some(1.0), Some(2.0), None]);
        assert_eq!(rep.entries[0].epsilon, 0.1);
        let start = he_report(&[row(0.0, 0.0, 0.0)], &[0.1, 0.01]);
        assert!(start.entries.iter().all(|e| e.t == Some(0.0)));
        let ab = ab_compare(&tr, &[(1.0, 1), (-1.0, 1)], 0.0, 2).unwrap();
        assert!((ab.phi_sq_internal - 2.0 * PI * PI).abs() < 1e-12);
        let triv = ab_compare(&tr, &[(0.0, 2)], 0.0, 2).unwrap();
        assert_eq!(triv.phi_sq_internal, 0.0);
        assert!(matches!(ab_compare(&tr, &[(-1.0, 1), (1.0, 1)], 0.0, 2), Err(Error::InadmissibleFlag(_))));
        assert!(matches!(ab_compare(&tr, &[(1.0, 1)], 0.0, 2), Err(Error::InadmissibleFlag(_))));
    }
}
