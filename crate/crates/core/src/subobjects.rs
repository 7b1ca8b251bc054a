//! Subbundles `0 → S → E → Q → 0`, induced metrics and the second
//! fundamental form.
//!
//! An inclusion is given per chart by holomorphic matrices `f` (r×s), `p`
//! (q×r) and a lift `L` (r×q) with `pf = 0`, `pL = I`. With `J = f†Hf`,
//! `λ = fJ⁻¹f†H` and `P† = (I − λ)L`:
//!
//! * `K = P††HP†` is the quotient metric,
//! * `γ = J⁻¹f†H ∂_z̄P†` is the second fundamental form in the `f` frame,
//! * `F(J) = J⁻¹f†HFf − γγ*` and `F(K) = K⁻¹P††HFP† + γ*γ`, where
//!   `γ* = K⁻¹γ†J` is the metric adjoint.
//!
//! S-quantities live in the `f`-column frame and Q-quantities in the lift
//! frame; all adjoints are metric adjoints.

use crate::bundle::{EndoField, FormField, MetricField};
use crate::chern::{curvature, degree, norm_sq_h};
use crate::error::{Error, Result};
use crate::field::{Field, MatField};
use crate::geometry::BaseGeometry;
use crate::linalg::{eigh, Mat};
use crate::C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const SIGMA_MIN: f64 = 1e-8;

/// Named inclusions shipped with the lab.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InclusionEntry {
    /// `𝒪(−1) → 𝒪²`, `f = (1, z)ᵀ` in chart 0.
    EulerPair,
    /// The sub-line `𝒪 = span e₁` of the Atiyah bundle.
    AtiyahSub,
    /// First `s` coordinate directions of a split bundle.
    Coordinate { s: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inclusion {
    pub f: MatField,
    pub p: MatField,
    pub l: MatField,
    pub label: String,
}

impl Inclusion {
    pub fn s(&self) -> usize {
        self.f.charts[0][0].cols()
    }

    pub fn q(&self) -> usize {
        self.p.charts[0][0].rows()
    }

    /// Builds an inclusion from per-chart closures of the chart coordinate.
    pub fn from_fns(
        geom: &BaseGeometry,
        f: impl Fn(usize, C64) -> Mat,
        p: impl Fn(usize, C64) -> Mat,
        l: impl Fn(usize, C64) -> Mat,
        label: &str,
    ) -> Result<Self> {
        let at = |g: &dyn Fn(usize, C64) -> Mat| {
            let mut fld = geom.field_from(|c, n| g(c, geom.charts[c].nodes[n]));
            fld.synced = true;
            fld
        };
        let inc = Inclusion { f: at(&f), p: at(&p), l: at(&l), label: label.to_string() };
        inc.validate(geom)?;
        Ok(inc)
    }

    pub fn from_catalog(geom: &BaseGeometry, rank: usize, entry: &InclusionEntry) -> Result<Self> {
        let one = C64::new(1.0, 0.0);
        let zero = C64::new(0.0, 0.0);
        match entry {
            InclusionEntry::EulerPair => {
                if geom.is_torus() || rank != 2 {
                    return Err(Error::Mismatch("Euler pair lives in the rank-2 trivial sphere bundle".into()));
                }
                Self::from_fns(
                    geom,
                    |c, z| if c == 0 { Mat::from_rows(&[&[one], &[z]]) } else { Mat::from_rows(&[&[z], &[one]]) },
                    |c, z| if c == 0 { Mat::from_rows(&[&[-z, one]]) } else { Mat::from_rows(&[&[-one, z]]) },
                    |c, _| if c == 0 { Mat::from_rows(&[&[zero], &[one]]) } else { Mat::from_rows(&[&[-one], &[zero]]) },
                    "euler-pair",
                )
            }
            InclusionEntry::AtiyahSub => {
                if !geom.is_torus() || rank != 2 {
                    return Err(Error::Mismatch("Atiyah sub-line needs the rank-2 torus bundle".into()));
                }
                Self::coordinate(geom, 2, 1, "atiyah-sub")
            }
            InclusionEntry::Coordinate { s } => Self::coordinate(geom, rank, *s, "coordinate"),
        }
    }

    pub fn coordinate(geom: &BaseGeometry, r: usize, s: usize, label: &str) -> Result<Self> {
        if s == 0 || s >= r {
            return Err(Error::InvalidParameter(format!("coordinate sub-rank {s} must lie in 1..{r}")));
        }
        let e = |i: usize, j: usize| if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
        Self::from_fns(
            geom,
            |_, _| Mat::from_fn(r, s, e),
            |_, _| Mat::from_fn(r - s, r, |i, j| e(i + s, j)),
            |_, _| Mat::from_fn(r, r - s, |i, j| e(i, j + s)),
            label,
        )
    }

    /// `pf = 0`, `pL = I` and a full-rank `f` at every node.
    pub fn validate(&self, geom: &BaseGeometry) -> Result<()> {
        let (s, q) = (self.s(), self.q());
        for chart in &geom.charts {
            let c = chart.chart_id;
            for n in 0..chart.len() {
                let (f, p, l) = (self.f.charts[c][n], self.p.charts[c][n], self.l.charts[c][n]);
                if f.rows() != s + q || p.cols() != s + q || l.rows() != s + q || l.cols() != q {
                    return Err(Error::Mismatch("inclusion block sizes do not add up".into()));
                }
                let scale = f.max_abs().max(1.0) * p.max_abs().max(1.0) * l.max_abs().max(1.0);
                if (p * f).max_abs() > 1e-10 * scale || (p * l - Mat::identity(q)).max_abs() > 1e-10 * scale {
                    return Err(Error::DegenerateInclusion(format!("pf ≠ 0 or pL ≠ I in chart {c} at node {n}")));
                }
                let smin = eigh(&(f.adjoint() * f)).values()[0].max(0.0).sqrt();
                if smin < SIGMA_MIN {
                    return Err(Error::DegenerateInclusion(format!(
                        "σ_min(f) = {smin:.2e} in chart {c} at node {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Constant frame change `v ↦ Uv` of the ambient bundle.
    pub fn gauge(&self, u: &Mat) -> Result<Self> {
        let ui = u.inverse().ok_or(Error::SingularTransition)?;
        Ok(Inclusion {
            f: self.f.map(|m| *u * *m),
            p: self.p.map(|m| *m * ui),
            l: self.l.map(|m| *u * *m),
            label: self.label.clone(),
        })
    }

    /// Same inclusion with the lift replaced by `L + f·h`.
    pub fn with_lift_shift(&self, geom: &BaseGeometry, h: impl Fn(usize, C64) -> Mat) -> Self {
        let mut l = self.l.clone();
        for chart in &geom.charts {
            for n in 0..chart.len() {
                let c = chart.chart_id;
                l.charts[c][n] = self.l.charts[c][n] + self.f.charts[c][n] * h(c, chart.nodes[n]);
            }
        }
        Inclusion { l, ..self.clone() }
    }
}

fn zip3(a: &MatField, b: &MatField, c: &MatField, f: impl Fn(&Mat, &Mat, &Mat) -> Result<Mat>) -> Result<MatField> {
    let mut charts = Vec::with_capacity(a.charts.len());
    for ci in 0..a.charts.len() {
        let mut v = Vec::with_capacity(a.charts[ci].len());
        for n in 0..a.charts[ci].len() {
            v.push(f(&a.charts[ci][n], &b.charts[ci][n], &c.charts[ci][n])?);
        }
        charts.push(v);
    }
    Ok(Field { charts, synced: a.synced && b.synced && c.synced })
}

fn inverse(m: &Mat) -> Result<Mat> {
    m.inverse().ok_or(Error::DegenerateInclusion("near-singular induced metric".into()))
}

/// `J = f†Hf`.
pub fn induced_sub_metric(inc: &Inclusion, h: &MetricField) -> Result<MetricField> {
    zip3(&inc.f, h, h, |f, h, _| Ok((f.adjoint() * *h * *f).hermitian_part()))
}

/// `λ = fJ⁻¹f†H`.
pub fn projection(inc: &Inclusion, h: &MetricField) -> Result<EndoField> {
    zip3(&inc.f, h, h, |f, h, _| {
        let j = f.adjoint() * *h * *f;
        Ok(*f * inverse(&j)? * f.adjoint() * *h)
    })
}

/// `P† = (I − λ)L`.
pub fn quotient_lift(inc: &Inclusion, h: &MetricField) -> Result<MatField> {
    zip3(&inc.f, &inc.l, h, |f, l, h| {
        let j = f.adjoint() * *h * *f;
        let lam = *f * inverse(&j)? * f.adjoint() * *h;
        Ok((Mat::identity(f.rows()) - lam) * *l)
    })
}

/// `K = P††HP†`.
pub fn induced_quot_metric(inc: &Inclusion, h: &MetricField) -> Result<MetricField> {
    let pd = quotient_lift(inc, h)?;
    zip3(&pd, h, h, |p, h, _| Ok((p.adjoint() * *h * *p).hermitian_part()))
}

/// `γ = J⁻¹f†H ∂_z̄P†` at owned nodes.
///
/// Since `f` and `L` are holomorphic, `∂_z̄P† = −f ∂_z̄(J⁻¹f†H) L`, so
/// `γ = −∂_z̄(J⁻¹f†H)·L`; differentiating `J⁻¹f†H` keeps `fγ` inside `S`
/// exactly at the discrete level.
pub fn second_fund_form(geom: &BaseGeometry, inc: &Inclusion, h: &MetricField) -> Result<FormField> {
    let phi = zip3(&inc.f, h, h, |f, h, _| {
        let j = f.adjoint() * *h * *f;
        Ok(inverse(&j)? * f.adjoint() * *h)
    })?;
    let d = geom.d_zbar(&phi)?;
    let mut out = geom.constant(Mat::zeros(inc.s(), inc.q()));
    out.synced = false;
    for (c, n) in geom.owned_nodes() {
        out.charts[c][n] = -(d.charts[c][n] * inc.l.charts[c][n]);
    }
    Ok(out)
}

/// `∫ g⁻¹ tr(γ*γ) dvol = ∫ tr(K⁻¹γ†Jγ) dx dy`.
pub fn sff_l2_norm(geom: &BaseGeometry, gamma: &FormField, j: &MetricField, k: &MetricField) -> Result<f64> {
    let mut total = 0.0;
    for chart in &geom.charts {
        let c = chart.chart_id;
        for &n in &chart.owned {
            let g = gamma.charts[c][n];
            let v = (inverse(&k.charts[c][n])? * g.adjoint() * j.charts[c][n] * g).trace().re;
            total += chart.quad_weights[n] * v;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Decomposition {
    pub degree_e: f64,
    pub degree_s: f64,
    pub degree_q: f64,
    pub sff_l2_norm: f64,
    /// `sup |F(J) − compress_S F + γγ*|_J` over owned nodes.
    pub res_s: f64,
    /// `sup |F(K) − compress_Q F − γ*γ|_K` over owned nodes.
    pub res_q: f64,
    /// `∫tr ΛF(J) − ∫tr Λ compress_S F` (should equal `−sff_l2_norm`).
    pub trace_gap_s: f64,
    /// `∫tr ΛF(K) − ∫tr Λ compress_Q F` (should equal `sff_l2_norm`).
    pub trace_gap_q: f64,
}

/// Induced metrics, γ and the residuals of the curvature decomposition.
pub fn curvature_decomposition(geom: &BaseGeometry, inc: &Inclusion, h: &MetricField) -> Result<Decomposition> {
    let j = induced_sub_metric(inc, h)?;
    let k = induced_quot_metric(inc, h)?;
    let pd = quotient_lift(inc, h)?;
    let gamma = second_fund_form(geom, inc, h)?;
    let fe = curvature(geom, h)?;
    let fj = curvature(geom, &j)?;
    let fk = curvature(geom, &k)?;
    let (mut res_s, mut res_q): (f64, f64) = (0.0, 0.0);
    let (mut gap_s, mut gap_q) = (0.0, 0.0);
    for chart in &geom.charts {
        let c = chart.chart_id;
        for &n in &chart.owned {
            let (hm, f, p) = (h.charts[c][n], inc.f.charts[c][n], pd.charts[c][n]);
            let (jm, km, g) = (j.charts[c][n], k.charts[c][n], gamma.charts[c][n]);
            let (ji, ki) = (inverse(&jm)?, inverse(&km)?);
            let f_e = fe.charts[c][n];
            let comp_s = ji * f.adjoint() * hm * f_e * f;
            let comp_q = ki * p.adjoint() * hm * f_e * p;
            let gstar = ki * g.adjoint() * jm;
            let rs = fj.charts[c][n] - comp_s + g * gstar;
            let rq = fk.charts[c][n] - comp_q - gstar * g;
            res_s = res_s.max(norm_sq_h(&jm, &rs).max(0.0).sqrt());
            res_q = res_q.max(norm_sq_h(&km, &rq).max(0.0).sqrt());
            let w = chart.quad_weights[n];
            gap_s += w * (fj.charts[c][n] - comp_s).trace().re;
            gap_q += w * (fk.charts[c][n] - comp_q).trace().re;
        }
    }
    Ok(Decomposition {
        degree_e: degree(geom, h)?,
        degree_s: degree(geom, &j)?,
        degree_q: degree(geom, &k)?,
        sff_l2_norm: sff_l2_norm(geom, &gamma, &j, &k)?,
        res_s,
        res_q,
        trace_gap_s: gap_s,
        trace_gap_q: gap_q,
    })
}

/// `π` times a degree, the integral of `tr ΛF` in internal units.
pub fn trace_integral_of_degree(deg: f64) -> f64 {
    PI * deg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{random_bumps, Bundle, BundleSpec, CatalogEntry, MetricRecipe};
    use crate::geometry::{build_sphere, build_torus};
    use std::sync::Arc;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn euler(n_r: usize) -> (Arc<BaseGeometry>, Bundle, Inclusion, MetricField) {
        let g = Arc::new(build_sphere(n_r, 2 * n_r, 1.2).unwrap());
        let b = Bundle::new(g.clone(), BundleSpec::from_catalog(&CatalogEntry::EulerPair).unwrap()).unwrap();
        let inc = Inclusion::from_catalog(&g, 2, &InclusionEntry::EulerPair).unwrap();
        let h = b.make_metric(&MetricRecipe::Identity).unwrap();
        (g, b, inc, h)
    }

    #[test]
    fn euler_pair_induced_metrics() {
        let (g, _, inc, h) = euler(32);
        let j = induced_sub_metric(&inc, &h).unwrap();
        let k = induced_quot_metric(&inc, &h).unwrap();
        let lam = projection(&inc, &h).unwrap();
        for (ch, n) in g.owned_nodes().filter(|&(ch, _)| ch == 0) {
            let z = g.charts[ch].nodes[n];
            let s = 1.0 + z.norm_sqr();
            assert!((j.get(ch, n)[(0, 0)] - s).norm() < 1e-14);
            assert!((k.get(ch, n)[(0, 0)] - 1.0 / s).norm() < 1e-14);
            let expect = Mat::from_rows(&[&[c(1.0, 0.0), z.conj()], &[z, c(z.norm_sqr(), 0.0)]]).scale(1.0 / s);
            assert!((lam.get(ch, n) - expect).max_abs() < 1e-14);
        }
        let d = curvature_decomposition(&g, &inc, &h).unwrap();
        assert!((d.degree_s + 1.0).abs() < 1e-6);
        assert!((d.degree_q - 1.0).abs() < 1e-6);
        assert!((d.degree_s + d.degree_q - d.degree_e).abs() < 1e-6);
        assert!((d.sff_l2_norm - PI).abs() < 1e-3);
        assert!(d.res_s < 5e-4 && d.res_q < 5e-4, "{d:?}");
        assert!((d.trace_gap_q - d.sff_l2_norm).abs() < 1e-4);
        assert!((d.trace_gap_s + d.sff_l2_norm).abs() < 1e-4);
    }

    #[test]
    fn euler_pair_residuals_refine() {
        let res = |n| {
            let (g, _, inc, h) = euler(n);
            let d = curvature_decomposition(&g, &inc, &h).unwrap();
            d.res_s.max(d.res_q)
        };
        let (a, b) = (res(8), res(16));
        assert!((a / b).log2() >= 1.8, "{a:e} -> {b:e}");
        assert!(res(64) < 5e-5);
    }

    #[test]
    fn projector_identities_on_perturbed_metric() {
        let (g, b, inc, _) = euler(32);
        let bumps = random_bumps(&g, 2, 3, 0.5, 9);
        let h = b.make_metric(&MetricRecipe::ExpPerturbation { bumps, base: Box::new(MetricRecipe::Identity) });
        let h = h.unwrap();
        let lam = projection(&inc, &h).unwrap();
        for (ch, n) in g.owned_nodes() {
            let l = lam.get(ch, n);
            assert!((l * l - l).max_abs() < 1e-9);
            let hl = h.get(ch, n) * l;
            assert!((hl - hl.adjoint()).max_abs() < 1e-9);
            assert!((l * inc.f.get(ch, n) - inc.f.get(ch, n)).max_abs() < 1e-9);
            assert!((l.trace() - 1.0).norm() < 1e-9);
        }
        let shifted = inc.with_lift_shift(&g, |_, z| Mat::scalar(1, z * z + 0.5));
        let (k1, k2) = (induced_quot_metric(&inc, &h).unwrap(), induced_quot_metric(&shifted, &h).unwrap());
        assert!(g.owned_nodes().all(|(ch, n)| (k1.get(ch, n) - k2.get(ch, n)).max_abs() < 1e-9));
        let gamma = second_fund_form(&g, &inc, &h).unwrap();
        let pd = quotient_lift(&inc, &h).unwrap();
        let dpd = g.d_zbar(&pd).unwrap();
        let lam = projection(&inc, &h).unwrap();
        let mut worst: f64 = 0.0;
        for (ch, n) in g.owned_nodes() {
            // f·γ lies in S and reproduces ∂̄P† up to truncation error
            let emb = inc.f.get(ch, n) * gamma.get(ch, n);
            assert!((lam.get(ch, n) * emb - emb).max_abs() < 1e-8 * emb.max_abs().max(1.0));
            worst = worst.max((emb - dpd.get(ch, n)).max_abs());
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn split_case_has_no_second_fundamental_form() {
        let g = Arc::new(build_sphere(32, 64, 1.2).unwrap());
        let b = Bundle::new(g.clone(), BundleSpec::from_catalog(&CatalogEntry::SphereSum { degrees: vec![1, -1] }).unwrap())
            .unwrap();
        let h = b.make_metric(&MetricRecipe::FubiniStudy).unwrap();
        let inc = Inclusion::from_catalog(&g, 2, &InclusionEntry::Coordinate { s: 1 }).unwrap();
        let d = curvature_decomposition(&g, &inc, &h).unwrap();
        assert_eq!(d.sff_l2_norm, 0.0);
        // the trace part of F is shared evenly, so blocks agree to truncation level
        assert!(d.res_s < 1e-9 && d.res_q < 1e-9, "{} {}", d.res_s, d.res_q);
        let k = induced_quot_metric(&inc, &h).unwrap();
        assert!(g.owned_nodes().all(|(c, n)| (k.get(c, n)[(0, 0)] - h.get(c, n)[(1, 1)]).norm() < 1e-15));
    }

    #[test]
    fn scaling_and_gauge_invariance() {
        let (g, b, inc, h) = euler(16);
        let d0 = curvature_decomposition(&g, &inc, &h).unwrap();
        let h2 = h.map(|m| m.scale(2.0));
        let d2 = curvature_decomposition(&g, &inc, &h2).unwrap();
        assert!((d0.sff_l2_norm - d2.sff_l2_norm).abs() < 1e-10);
        let th = 0.7f64;
        let u = Mat::from_rows(&[&[c(th.cos(), 0.0), c(-th.sin(), 0.0)], &[c(th.sin(), 0.0), c(th.cos(), 0.0)]])
            * Mat::diag(&[C64::from_polar(1.0, 0.3), c(1.0, 0.0)]);
        let (_, hu) = b.gauge(&u, &h).unwrap();
        let du = curvature_decomposition(&g, &inc.gauge(&u).unwrap(), &hu).unwrap();
        assert!((du.degree_s - d0.degree_s).abs() < 1e-10);
        assert!((du.degree_q - d0.degree_q).abs() < 1e-10);
        assert!((du.sff_l2_norm - d0.sff_l2_norm).abs() < 1e-10);
    }

    #[test]
    fn atiyah_sub_line() {
        let g = Arc::new(build_torus(c(0.0, 1.0), 32).unwrap());
        let b = Bundle::new(g.clone(), BundleSpec::from_catalog(&CatalogEntry::Atiyah { a_re: 1.0, a_im: 0.0 }).unwrap())
            .unwrap();
        let h = b.make_metric(&MetricRecipe::AtiyahDefault).unwrap();
        let inc = Inclusion::from_catalog(&g, 2, &InclusionEntry::AtiyahSub).unwrap();
        let d = curvature_decomposition(&g, &inc, &h).unwrap();
        assert!(d.degree_s.abs() < 1e-6);
        assert!(d.sff_l2_norm > 0.0);
        assert!((d.degree_s + d.degree_q - d.degree_e).abs() < 1e-6);
    }

    #[test]
    fn degenerate_inclusion_is_rejected() {
        let g = build_torus(c(0.0, 1.0), 8).unwrap();
        let one = c(1.0, 0.0);
        let zero = c(0.0, 0.0);
        let r = Inclusion::from_fns(
            &g,
            |_, _| Mat::from_rows(&[&[zero], &[zero]]),
            |_, _| Mat::from_rows(&[&[zero, one]]),
            |_, _| Mat::from_rows(&[&[zero], &[one]]),
            "bad",
        );
        assert!(matches!(r, Err(Error::DegenerateInclusion(_))));
    }
}
