//! The Donaldson functional `M(H₀, H)` in internal units:
//!
//! `M = ∫₀¹ ∫ tr(ΛF_t · h_t⁻¹∂_t h_t) dvol dt − ĉ ∫ log det h dvol`,
//!
//! with `h = H₀⁻¹H`. Two path evaluators (exponential `h_t = e^{ts}` and
//! linear `H_t = (1−t)H₀ + tH`) and the eigenvalue form
//!
//! `M = ∫ tr(ΛF₀ s) − ĉ ∫ tr s + ∫ Σ_{α,γ} g⁻¹|(∂̄s)_{αγ}|² Ψ(λ_α − λ_γ)`
//!
//! where `s = log h = U diag(λ) U⁻¹` with `U` orthonormal for `H₀`, the
//! components are taken in that frame, and `Ψ(x) = (eˣ − x − 1)/x²`.

use crate::bundle::{endo_log, MetricField};
use crate::chern::{degree, degree_from, lambda_f, rank_of};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::BaseGeometry;
use crate::linalg::{gen_eigh, psi, GenEig, Mat};
use crate::quadrature::gauss_legendre;
use crate::subobjects::{induced_quot_metric, induced_sub_metric, second_fund_form, sff_l2_norm, Inclusion};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const DEFAULT_NT: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PathExp,
    PathLinear,
    Eigen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FunctionalResult {
    pub value: f64,
    pub method: Method,
    /// Gauss–Legendre nodes in t (0 for the eigen form).
    pub n_t: usize,
    pub c_hat: f64,
    /// Path forms: `∫∫ tr(ΛF_t h_t⁻¹∂_t h_t)`. Eigen form: `∫ tr(ΛF₀ s)`.
    pub curvature_term: f64,
    /// `−ĉ ∫ log det h`.
    pub logdet_term: f64,
    /// Eigen form only: `∫ Σ g⁻¹|∂̄s|² Ψ`.
    pub gradient_term: f64,
}

/// `ĉ = π deg(H₀)/r`, with the degree evaluated on the same grid.
pub fn c_hat_of(geom: &BaseGeometry, h0: &MetricField) -> Result<f64> {
    Ok(PI * degree(geom, h0)? / rank_of(h0) as f64)
}

fn check_pair(h0: &MetricField, h: &MetricField) -> Result<()> {
    if h0.charts.len() != h.charts.len()
        || h0.charts.iter().zip(&h.charts).any(|(a, b)| a.len() != b.len())
        || rank_of(h0) != rank_of(h)
    {
        return Err(Error::Mismatch("metrics live on different bundles or grids".into()));
    }
    if !h0.synced || !h.synced {
        return Err(Error::StaleGhosts);
    }
    Ok(())
}

/// Pointwise generalized eigen-decompositions of `H` against `H₀`.
fn pair_eigs(h0: &MetricField, h: &MetricField) -> Result<Vec<Vec<GenEig>>> {
    let mut out = Vec::with_capacity(h0.charts.len());
    for (c, (a, b)) in h0.charts.iter().zip(&h.charts).enumerate() {
        let mut v = Vec::with_capacity(a.len());
        for (n, (m0, m)) in a.iter().zip(b).enumerate() {
            let e = gen_eigh(m, m0).ok_or(Error::NotPositive { chart: c, node: n })?;
            if e.values()[0] <= 0.0 {
                return Err(Error::NotPositive { chart: c, node: n });
            }
            v.push(e);
        }
        out.push(v);
    }
    Ok(out)
}

fn logdet_integral(geom: &BaseGeometry, eigs: &[Vec<GenEig>]) -> Result<f64> {
    let f: Field<f64> = Field {
        charts: eigs.iter().map(|c| c.iter().map(|e| e.values().iter().map(|l| l.ln()).sum()).collect()).collect(),
        synced: true,
    };
    geom.integrate(&f)
}

/// Path form of `M(H₀, H)` with `n_t` Gauss–Legendre nodes in t.
pub fn functional_path(
    geom: &BaseGeometry,
    h0: &MetricField,
    h: &MetricField,
    method: Method,
    n_t: usize,
    c_hat: Option<f64>,
) -> Result<FunctionalResult> {
    check_pair(h0, h)?;
    if n_t == 0 {
        return Err(Error::InvalidParameter("n_t must be positive".into()));
    }
    let c_hat = match c_hat {
        Some(c) => c,
        None => c_hat_of(geom, h0)?,
    };
    let eigs = pair_eigs(h0, h)?;
    let (ts, ws) = gauss_legendre(n_t, 0.0, 1.0);
    let mut curv = 0.0;
    for (&t, &w) in ts.iter().zip(&ws) {
        let (ht, velocity) = match method {
            Method::PathExp => {
                let ht = Field {
                    charts: eigs.iter().map(|c| c.iter().map(|e| e.form(|l| (t * l.ln()).exp())).collect()).collect(),
                    synced: true,
                };
                let s = Field {
                    charts: eigs.iter().map(|c| c.iter().map(|e| e.endo(f64::ln)).collect()).collect(),
                    synced: true,
                };
                (ht, s)
            }
            Method::PathLinear => {
                let mut ht = h0.clone();
                let mut vel = h0.clone();
                for c in 0..h0.charts.len() {
                    for n in 0..h0.charts[c].len() {
                        let (a, b) = (h0.charts[c][n], h.charts[c][n]);
                        let m = a.scale(1.0 - t) + b.scale(t);
                        ht.charts[c][n] = m;
                        vel.charts[c][n] =
                            m.inverse().ok_or(Error::NotPositive { chart: c, node: n })? * (b - a);
                    }
                }
                (ht, vel)
            }
            Method::Eigen => return Err(Error::InvalidParameter("use functional_eigen for the eigen form".into())),
        };
        let lf = lambda_f(geom, &ht)?;
        let mut acc = 0.0;
        for chart in &geom.charts {
            let c = chart.chart_id;
            for &n in &chart.owned {
                let v = (lf.charts[c][n] * velocity.charts[c][n]).trace().re;
                acc += chart.quad_weights[n] * chart.metric_g[n] * v;
            }
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite { chart: 0, node: 0, z: format!("path integrand at t = {t}") });
        }
        curv += w * acc;
    }
    let logdet = -c_hat * logdet_integral(geom, &eigs)?;
    Ok(FunctionalResult {
        value: curv + logdet,
        method,
        n_t,
        c_hat,
        curvature_term: curv,
        logdet_term: logdet,
        gradient_term: 0.0,
    })
}

/// Eigenvalue form of `M(H₀, H)`.
pub fn functional_eigen(
    geom: &BaseGeometry,
    h0: &MetricField,
    h: &MetricField,
    c_hat: Option<f64>,
) -> Result<FunctionalResult> {
    check_pair(h0, h)?;
    let lf0 = lambda_f(geom, h0)?;
    let c_hat = match c_hat {
        Some(c) => c,
        None => PI * degree_from(geom, &lf0)? / rank_of(h0) as f64,
    };
    let s = endo_log(geom, h0, h)?;
    let ds = geom.d_zbar(&s)?;
    let eigs = pair_eigs(h0, h)?;
    let r = rank_of(h0);
    let (mut curv, mut logdet, mut grad) = (0.0, 0.0, 0.0);
    for chart in &geom.charts {
        let c = chart.chart_id;
        for &n in &chart.owned {
            let e = &eigs[c][n];
            let lam: Vec<f64> = e.values().iter().map(|l| l.ln()).collect();
            let sm = s.charts[c][n];
            let dvol = chart.quad_weights[n] * chart.metric_g[n];
            curv += dvol * (lf0.charts[c][n] * sm).trace().re;
            logdet += dvol * lam.iter().sum::<f64>();
            // components of ∂̄s in the H₀-orthonormal eigenframe: U⁻¹(∂̄s)U
            let comp: Mat = e.w.adjoint() * ds.charts[c][n] * e.u;
            let mut acc = 0.0;
            for a in 0..r {
                for b in 0..r {
                    acc += comp[(a, b)].norm_sqr() * psi(lam[a] - lam[b]);
                }
            }
            // g⁻¹|·|² dvol = |·|² dx dy
            grad += chart.quad_weights[n] * acc;
        }
    }
    let logdet = -c_hat * logdet;
    Ok(FunctionalResult {
        value: curv + logdet + grad,
        method: Method::Eigen,
        n_t: 0,
        c_hat,
        curvature_term: curv,
        logdet_term: logdet,
        gradient_term: grad,
    })
}

/// `M(H₀,H₁) + M(H₁,H₂) − M(H₀,H₂)` along exponential paths.
pub fn cocycle_residual(
    geom: &BaseGeometry,
    h0: &MetricField,
    h1: &MetricField,
    h2: &MetricField,
    n_t: usize,
) -> Result<f64> {
    let c = c_hat_of(geom, h0)?;
    let m = |a, b| functional_path(geom, a, b, Method::PathExp, n_t, Some(c)).map(|r| r.value);
    Ok(m(h0, h1)? + m(h1, h2)? - m(h0, h2)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub m_e: f64,
    pub m_s: f64,
    pub m_q: f64,
    pub gamma_sq: f64,
    pub gamma0_sq: f64,
    pub residual: f64,
    pub slope_s: f64,
    pub slope_e: f64,
    pub slope_q: f64,
}

/// `|M_E − (M_S + M_Q + ‖γ‖² − ‖γ₀‖²)|` for an equal-slope inclusion.
pub fn decomposition_residual(
    geom: &BaseGeometry,
    inc: &Inclusion,
    h0: &MetricField,
    h: &MetricField,
    n_t: usize,
) -> Result<DecompositionReport> {
    let (j0, j) = (induced_sub_metric(inc, h0)?, induced_sub_metric(inc, h)?);
    let (k0, k) = (induced_quot_metric(inc, h0)?, induced_quot_metric(inc, h)?);
    let slope = |m: &MetricField| degree(geom, m).map(|d| d / rank_of(m) as f64);
    let (mu_s, mu_e, mu_q) = (slope(&j0)?, slope(h0)?, slope(&k0)?);
    if (mu_s - mu_e).abs() > 1e-6 || (mu_q - mu_e).abs() > 1e-6 {
        return Err(Error::SlopeMismatch { sub: mu_s, bundle: mu_e, quot: mu_q });
    }
    let m = |a: &MetricField, b: &MetricField| {
        functional_path(geom, a, b, Method::PathExp, n_t, None).map(|r| r.value)
    };
    let (m_e, m_s, m_q) = (m(h0, h)?, m(&j0, &j)?, m(&k0, &k)?);
    let g0 = sff_l2_norm(geom, &second_fund_form(geom, inc, h0)?, &j0, &k0)?;
    let g1 = sff_l2_norm(geom, &second_fund_form(geom, inc, h)?, &j, &k)?;
    Ok(DecompositionReport {
        m_e,
        m_s,
        m_q,
        gamma_sq: g1,
        gamma0_sq: g0,
        residual: (m_e - (m_s + m_q + g1 - g0)).abs(),
        slope_s: mu_s,
        slope_e: mu_e,
        slope_q: mu_q,
    })
}
