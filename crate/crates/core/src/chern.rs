//! Chern connection, curvature and the degree/slope diagnostics.
//!
//! With `A_z = H⁻¹∂_zH` the curvature is
//! `F_{z̄z} = −∂_z̄A_z = H⁻¹(∂_z̄H)H⁻¹(∂_zH) − H⁻¹∂_z∂_z̄H`, evaluated from
//! first and second derivatives of `H` so no derivative of a derived field
//! (and no second ghost exchange) is needed. `ΛF = g⁻¹F_{z̄z}`.
//!
//! Degree: `deg = (1/π) ∫ tr F_{z̄z} dx dy`, integer for line bundles.
//! Slope `μ = deg/r`; the HE equation reads `ΛF = ĉ·I` with `ĉ = πμ`
//! (unit volume).

use crate::bundle::{EndoField, MetricField};
use crate::error::{Error, Result};
use crate::field::{Field, MatField};
use crate::geometry::BaseGeometry;
use crate::linalg::{gen_eigh, Mat};
use crate::C64;
use serde::Serialize;
use std::f64::consts::PI;

pub fn connection_form(geom: &BaseGeometry, h: &MetricField) -> Result<MatField> {
    let dz = geom.d_z(h)?;
    let mut out = dz.clone();
    for (c, n) in geom.owned_nodes() {
        out.charts[c][n] = inv(h, c, n)? * dz.charts[c][n];
    }
    Ok(out)
}

fn inv(h: &MetricField, c: usize, n: usize) -> Result<Mat> {
    h.charts[c][n].inverse().ok_or(Error::NotPositive { chart: c, node: n })
}

/// `F_{z̄z}` at owned nodes.
///
/// The trace part is taken from `tr F_{z̄z} = −∂_z∂_z̄ log det H`, using the
/// same discrete operator as the scalar Laplacian, so the discrete degree
/// does not move under conformal or trace changes of the metric.
pub fn curvature(geom: &BaseGeometry, h: &MetricField) -> Result<MatField> {
    let d = geom.derivatives(h)?;
    let logdet: Field<C64> = h.map(|m| C64::new(m.det().re.ln(), 0.0));
    let dl = geom.derivatives(&logdet)?;
    let r = h.charts[0][0].rows();
    let id = Mat::identity(r);
    let mut out = d.dzdzbar.clone();
    for (c, n) in geom.owned_nodes() {
        let hi = inv(h, c, n)?;
        let f = hi * d.dzbar.charts[c][n] * hi * d.dz.charts[c][n] - hi * d.dzdzbar.charts[c][n];
        let shift = (-dl.dzdzbar.charts[c][n] - f.trace()) / r as f64;
        out.charts[c][n] = f + id.scale_c(shift);
    }
    Ok(out)
}

/// `ΛF = g⁻¹F_{z̄z}` at owned nodes.
pub fn lambda_f(geom: &BaseGeometry, h: &MetricField) -> Result<EndoField> {
    let mut f = curvature(geom, h)?;
    for chart in &geom.charts {
        for &n in &chart.owned {
            let v = f.charts[chart.chart_id][n];
            f.charts[chart.chart_id][n] = v.scale(1.0 / chart.metric_g[n]);
        }
    }
    Ok(f)
}

/// Degree from a precomputed `ΛF`.
pub fn degree_from(geom: &BaseGeometry, lf: &EndoField) -> Result<f64> {
    let tr: Field<f64> = lf.map(|m| m.trace().re);
    Ok(geom.integrate(&tr)? / PI)
}

pub fn degree(geom: &BaseGeometry, h: &MetricField) -> Result<f64> {
    degree_from(geom, &lambda_f(geom, h)?)
}

pub fn rank_of(h: &MetricField) -> usize {
    h.charts[0][0].rows()
}

pub fn slope(geom: &BaseGeometry, h: &MetricField) -> Result<f64> {
    Ok(degree(geom, h)? / rank_of(h) as f64)
}

/// `ĉ = π·μ`.
pub fn he_constant(geom: &BaseGeometry, h: &MetricField) -> Result<f64> {
    Ok(PI * slope(geom, h)?)
}

/// Eigenvalues of an `H`-self-adjoint endomorphism `X` (of `H·X` relative to `H`).
pub fn self_adjoint_eigenvalues(h: &Mat, x: &Mat) -> Option<Vec<f64>> {
    gen_eigh(&(*h * *x).hermitian_part(), h).map(|e| e.values().to_vec())
}

/// `|X|²_H = tr(X X^*)` with the `H`-adjoint `X^* = H⁻¹X†H`.
pub fn norm_sq_h(h: &Mat, x: &Mat) -> f64 {
    let hi = h.inverse().expect("positive definite metric");
    (*x * hi * x.adjoint() * *h).trace().re
}

/// Pointwise diagnostics of `ΛF` against a fixed constant `ĉ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeDiagnostics {
    pub degree: f64,
    pub slope: f64,
    pub c_hat: f64,
    /// `max |ΛF − ĉI|` in the `H` operator norm.
    pub he_defect: f64,
    /// `∫ |ΛF − ĉI|²_H dvol`.
    pub hym_energy: f64,
    /// `∫ |ΛF|²_H dvol`.
    pub lambda_f_l2: f64,
}

/// Diagnostics with `ĉ` taken from the degree of `h` itself.
pub fn diagnostics(geom: &BaseGeometry, h: &MetricField) -> Result<HeDiagnostics> {
    let lf = lambda_f(geom, h)?;
    let deg = degree_from(geom, &lf)?;
    let c_hat = PI * deg / rank_of(h) as f64;
    diagnostics_from(geom, h, &lf, c_hat)
}

pub fn diagnostics_from(geom: &BaseGeometry, h: &MetricField, lf: &EndoField, c_hat: f64) -> Result<HeDiagnostics> {
    let r = rank_of(h);
    let deg = degree_from(geom, lf)?;
    let mut defect: f64 = 0.0;
    let mut hym = 0.0;
    let mut l2 = 0.0;
    for chart in &geom.charts {
        let c = chart.chart_id;
        for &n in &chart.owned {
            let hm = h.charts[c][n];
            let x = lf.charts[c][n];
            let xr = x - Mat::identity(r).scale(c_hat);
            let ev = self_adjoint_eigenvalues(&hm, &xr).ok_or(Error::NotPositive { chart: c, node: n })?;
            defect = defect.max(ev.iter().fold(0.0f64, |a, v| a.max(v.abs())));
            let w = chart.quad_weights[n] * chart.metric_g[n];
            hym += w * norm_sq_h(&hm, &xr);
            l2 += w * norm_sq_h(&hm, &x);
        }
    }
    Ok(HeDiagnostics { degree: deg, slope: deg / r as f64, c_hat, he_defect: defect, hym_energy: hym, lambda_f_l2: l2 })
}

pub fn he_defect(geom: &BaseGeometry, h: &MetricField) -> Result<f64> {
    Ok(diagnostics(geom, h)?.he_defect)
}

pub fn hym_energy(geom: &BaseGeometry, h: &MetricField) -> Result<f64> {
    Ok(diagnostics(geom, h)?.hym_energy)
}

pub fn lambda_f_l2(geom: &BaseGeometry, h: &MetricField) -> Result<f64> {
    Ok(diagnostics(geom, h)?.lambda_f_l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{
        direct_sum_metric, random_bumps, tensor_metric, Bundle, BundleSpec, CatalogEntry, GlobalScalar,
        MetricRecipe,
    };
    use crate::geometry::{build_sphere, build_torus};
    use crate::C64;
    use std::sync::Arc;

    fn sphere(n_r: usize, n_t: usize) -> Arc<BaseGeometry> {
        Arc::new(build_sphere(n_r, n_t, 1.2).unwrap())
    }

    fn bundle(g: &Arc<BaseGeometry>, e: CatalogEntry) -> Bundle {
        Bundle::new(g.clone(), BundleSpec::from_catalog(&e).unwrap()).unwrap()
    }

    #[test]
    fn connection_of_fubini_study() {
        let g = sphere(32, 64);
        let b = bundle(&g, CatalogEntry::SphereO { k: 1 });
        let h = b.make_metric(&MetricRecipe::FubiniStudy).unwrap();
        let a = connection_form(&g, &h).unwrap();
        let h2 = h.map(|m| m.scale(3.0));
        let a2 = connection_form(&g, &h2).unwrap();
        for (c, n) in g.owned_nodes() {
            let z = g.charts[c].nodes[n];
            let expect = -z.conj() / (1.0 + z.norm_sqr());
            assert!((a.get(c, n)[(0, 0)] - expect).norm() < 1e-6);
            assert!((a2.get(c, n) - a.get(c, n)).max_abs() < 1e-12);
        }
    }

    #[test]
    fn fubini_study_curvature_and_degrees() {
        let g = sphere(32, 64);
        for k in -2..=2 {
            let b = bundle(&g, CatalogEntry::SphereO { k });
            let h = b.make_metric(&MetricRecipe::FubiniStudy).unwrap();
            let f = curvature(&g, &h).unwrap();
            let lf = lambda_f(&g, &h).unwrap();
            for (c, n) in g.owned_nodes() {
                let z = g.charts[c].nodes[n];
                let expect = k as f64 / (1.0 + z.norm_sqr()).powi(2);
                assert!((f.get(c, n)[(0, 0)] - expect).norm() < 1e-5);
                assert!((lf.get(c, n)[(0, 0)] - PI * k as f64).norm() < 1e-5);
            }
            let d = diagnostics(&g, &h).unwrap();
            assert!((d.degree - k as f64).abs() < 1e-6, "k = {k}: {}", d.degree);
            assert!(d.he_defect < 1e-5);
            assert!(d.hym_energy < 1e-10);
        }
    }

    #[test]
    fn degree_is_metric_independent() {
        let g = sphere(32, 64);
        let b = bundle(&g, CatalogEntry::SphereO { k: 1 });
        let phi = GlobalScalar::SpherePoly { axis: [0.6, 0.0, 0.8], power: 2, amp: 0.7 };
        let h = b.make_metric(&MetricRecipe::Conformal { phi, base: Box::new(MetricRecipe::FubiniStudy) }).unwrap();
        assert!((degree(&g, &h).unwrap() - 1.0).abs() < 1e-6);
        let bumps = random_bumps(&g, 1, 3, 0.8, 5);
        let h = b.make_metric(&MetricRecipe::ExpPerturbation { bumps, base: Box::new(MetricRecipe::FubiniStudy) });
        assert!((degree(&g, &h.unwrap()).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conformal_change_shifts_lambda_f_by_minus_laplacian() {
        let g = sphere(32, 64);
        let b = bundle(&g, CatalogEntry::SphereO { k: 1 });
        let phi = GlobalScalar::SpherePoly { axis: [0.0, 0.6, 0.8], power: 1, amp: 0.5 };
        let h0 = b.make_metric(&MetricRecipe::FubiniStudy).unwrap();
        let h = b
            .make_metric(&MetricRecipe::Conformal { phi: phi.clone(), base: Box::new(MetricRecipe::FubiniStudy) })
            .unwrap();
        let l0 = lambda_f(&g, &h0).unwrap();
        let l1 = lambda_f(&g, &h).unwrap();
        // first eigenfunctions of the round Laplacian: Δ(axis·X) = −2π (axis·X) here
        for (c, n) in g.owned_nodes() {
            let p = phi.eval(g.kind, g.global_point(c, n));
            let lap = -2.0 * PI * p;
            assert!((l1.get(c, n)[(0, 0)] - (l0.get(c, n)[(0, 0)] - lap)).norm() < 1e-5);
        }
    }

    #[test]
    fn split_bundle_block_constants() {
        let g = sphere(32, 64);
        let b = bundle(&g, CatalogEntry::SphereSum { degrees: vec![1, -1] });
        let h = b.make_metric(&MetricRecipe::FubiniStudy).unwrap();
        let d = diagnostics(&g, &h).unwrap();
        assert!(d.c_hat.abs() < 1e-8);
        assert!((d.he_defect - PI).abs() < 1e-4);
        assert!((d.lambda_f_l2 - 2.0 * PI * PI).abs() < 1e-3);
    }

    #[test]
    fn flat_torus_cases() {
        let g = Arc::new(build_torus(C64::new(0.0, 1.0), 32).unwrap());
        let b = bundle(&g, CatalogEntry::TorusTrivial { rank: 2 });
        let h = b.make_metric(&MetricRecipe::Identity).unwrap();
        let d = diagnostics(&g, &h).unwrap();
        assert!(d.he_defect < 1e-14);
        let flat = bundle(&g, CatalogEntry::TorusFlat { alpha: 0.3 });
        let hf = flat.make_metric(&MetricRecipe::Identity).unwrap();
        assert!(lambda_f(&g, &hf).unwrap().charts[0].iter().all(|m| m.max_abs() < 1e-10));
    }

    #[test]
    fn atiyah_curvature_properties() {
        let g = Arc::new(build_torus(C64::new(0.2, 1.1), 32).unwrap());
        let b = bundle(&g, CatalogEntry::Atiyah { a_re: 1.0, a_im: 0.5 });
        let h = b.make_metric(&MetricRecipe::AtiyahDefault).unwrap();
        let f = curvature(&g, &h).unwrap();
        for (c, n) in g.owned_nodes() {
            let hf = h.get(c, n) * f.get(c, n);
            assert!((hf - hf.adjoint()).max_abs() < 1e-10);
        }
        let d = diagnostics(&g, &h).unwrap();
        assert!(d.degree.abs() < 1e-8);
        assert!(d.c_hat.abs() < 1e-8);
    }

    #[test]
    fn energy_identity_and_whitney() {
        let g = sphere(32, 64);
        let e1 = bundle(&g, CatalogEntry::SphereO { k: 2 });
        let e2 = bundle(&g, CatalogEntry::SphereO { k: -1 });
        let pert = |b: &Bundle, seed| {
            let bumps = random_bumps(&g, 1, 2, 0.6, seed);
            b.make_metric(&MetricRecipe::ExpPerturbation { bumps, base: Box::new(MetricRecipe::FubiniStudy) })
                .unwrap()
        };
        let (h1, h2) = (pert(&e1, 1), pert(&e2, 2));
        let hs = direct_sum_metric(&h1, &h2).unwrap();
        let d = diagnostics(&g, &hs).unwrap();
        assert!((d.degree - degree(&g, &h1).unwrap() - degree(&g, &h2).unwrap()).abs() < 1e-8);
        assert!((d.lambda_f_l2 - d.hym_energy - 2.0 * d.c_hat * d.c_hat).abs() < 1e-8);
        let tr = lambda_f(&g, &hs).unwrap().map(|m| m.trace().re);
        assert!((g.integrate(&tr).unwrap() - PI * d.degree).abs() < 1e-8);

        // smooth global conformal factors for the derivation identity
        let conf = |b: &Bundle, axis: [f64; 3]| {
            let phi = GlobalScalar::SpherePoly { axis, power: 2, amp: 0.4 };
            b.make_metric(&MetricRecipe::Conformal { phi, base: Box::new(MetricRecipe::FubiniStudy) }).unwrap()
        };
        let (h1, h2) = (conf(&e1, [0.0, 0.6, 0.8]), conf(&e2, [0.8, 0.0, 0.6]));
        let t = e1.tensor(&e2).unwrap();
        let ht = tensor_metric(&h1, &h2).unwrap();
        assert!(t.validate(&ht).unwrap().compat_residual < 1e-10);
        let (l1, l2, lt) = (lambda_f(&g, &h1).unwrap(), lambda_f(&g, &h2).unwrap(), lambda_f(&g, &ht).unwrap());
        for (c, n) in g.owned_nodes() {
            let sum = l1.get(c, n)[(0, 0)] + l2.get(c, n)[(0, 0)];
            assert!((lt.get(c, n)[(0, 0)] - sum).norm() < 1e-6);
        }
    }

    #[test]
    fn he_defect_converges_under_refinement() {
        // perturbation-free HE metric in a rotated frame on a split bundle of equal degrees
        let defect = |n: usize| {
            let g = sphere(n, 2 * n);
            let b = bundle(&g, CatalogEntry::SphereO { k: 2 });
            he_defect(&g, &b.make_metric(&MetricRecipe::FubiniStudy).unwrap()).unwrap()
        };
        let (a, b) = (defect(12), defect(24));
        assert!(b < a);
        assert!((a / b).log2() >= 3.5, "order {}", (a / b).log2());
    }
}
