//! Subcommands behind the `hymlab` binary: JSON summaries, trace CSVs and
//! checkpoints.
//!
//! Every reported number carries both unit conventions and a tolerance.
//! "internal" uses `deg = (1/π)∫tr F_{z̄z} dx dy` (integer degrees);
//! "paper-eq2" uses `deg = ∫tr F_{z̄z} dx dy`, so degrees and slopes are
//! π times larger there while `ĉ`, curvature norms, energies and `M` agree.

use crate::bundle::{Bundle, MetricField};
use crate::checkpoint;
use crate::chern::{diagnostics, rank_of};
use crate::config::{ExperimentConfig, Format};
use crate::error::{Error, Result};
use crate::flow::{ab_compare, he_report, monotonicity, Flow, FlowState, StopReason, TraceRow, DM_SLACK};
use crate::functional::{functional_eigen, functional_path, Method};
use crate::subobjects::{curvature_decomposition, Inclusion};
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

pub const DEGREE_TOL: f64 = 1e-6;
pub const ENERGY_IDENTITY_TOL: f64 = 1e-8;
pub const HE_DEFECT_TOL: f64 = 1e-5;
pub const PATH_TOL: f64 = 1e-5;
pub const EIGEN_REL_TOL: f64 = 1e-4;
pub const SCALE_TOL: f64 = 1e-8;
pub const SFF_TOL: f64 = 1e-3;
pub const DECOMP_RES_TOL: f64 = 5e-4;
pub const TRACE_GAP_TOL: f64 = 1e-4;
pub const SPLIT_FUNCTIONAL_TOL: f64 = 1e-3;
pub const DRIFT_TOL: f64 = 1e-6;
pub const ENERGY_RATE_TOL: f64 = 0.01;
/// Constant used for the scale-invariance check of `M`.
const SCALE_C: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Degree,
    Functional,
    Decompose,
    Flow,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Degree => "degree",
            Command::Functional => "functional",
            Command::Decompose => "decompose",
            Command::Flow => "flow",
            Command::Report => "report",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tagged {
    pub value: f64,
    pub tolerance: f64,
}

/// A reported number in both unit conventions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Quantity {
    pub internal: Tagged,
    #[serde(rename = "paper-eq2")]
    pub paper_eq2: Tagged,
}

impl Quantity {
    /// Same value in both conventions.
    pub fn same(v: f64, tolerance: f64) -> Self {
        let t = Tagged { value: v, tolerance };
        Self { internal: t, paper_eq2: t }
    }

    /// Degrees and slopes: the second convention drops the 1/π factor.
    pub fn degree_like(v: f64, tolerance: f64) -> Self {
        Self {
            internal: Tagged { value: v, tolerance },
            paper_eq2: Tagged { value: PI * v, tolerance: PI * tolerance },
        }
    }
}

fn q(v: f64, tol: f64) -> Value {
    json!(Quantity::same(v, tol))
}

fn qd(v: f64, tol: f64) -> Value {
    json!(Quantity::degree_like(v, tol))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, pass: value.is_finite() && value <= bound }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub command: String,
    pub inputs: ExperimentConfig,
    pub conventions: BTreeMap<&'static str, &'static str>,
    pub results: BTreeMap<String, Value>,
    pub invariants: Vec<Check>,
    /// Set when the integration broke down (dt underflow).
    pub breakdown: Option<String>,
    pub pass: bool,
}

impl Summary {
    fn new(command: Command, cfg: &ExperimentConfig) -> Self {
        let conventions = BTreeMap::from([
            ("internal", "deg = (1/pi) * integral tr F dx dy; slope = deg/r; c_hat = pi*slope; Vol = 1"),
            ("paper-eq2", "deg = integral tr F dx dy = pi * internal; slope = deg/r = c_hat"),
        ]);
        Self {
            command: command.name().into(),
            inputs: cfg.clone(),
            conventions,
            results: BTreeMap::new(),
            invariants: Vec::new(),
            breakdown: None,
            pass: true,
        }
    }

    fn put(&mut self, key: &str, v: Value) {
        self.results.insert(key.into(), v);
    }

    fn check(&mut self, c: Check) {
        self.invariants.push(c);
    }

    fn finish(mut self) -> Self {
        self.pass = self.breakdown.is_none() && self.invariants.iter().all(|c| c.pass);
        self
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.invariants.iter().filter(|c| !c.pass).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes `<dir>/<command>.json` when JSON output is enabled.
    pub fn write(&self, dir: &Path) -> Result<Option<PathBuf>> {
        if !self.inputs.outputs.formats.contains(&Format::Json) {
            return Ok(None);
        }
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.command));
        fs::write(&path, self.to_json())?;
        Ok(Some(path))
    }
}

fn target_metric(cfg: &ExperimentConfig, bundle: &Bundle) -> Result<MetricField> {
    cfg.target_metric
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["target_metric: required by this subcommand".into()]))?
        .build(bundle)
}

pub fn degree(cfg: &ExperimentConfig) -> Result<Summary> {
    let mut s = Summary::new(Command::Degree, cfg);
    let bundle = cfg.bundle()?;
    let h = cfg.initial_metric.build(&bundle)?;
    let report = bundle.validate(&h)?;
    let d = diagnostics(&bundle.geom, &h)?;
    let r = rank_of(&h) as f64;
    let topo = bundle.spec.topological_degree() as f64;
    s.put("rank", q(r, 0.0));
    s.put("degree", qd(d.degree, DEGREE_TOL));
    s.put("topological_degree", qd(topo, 0.0));
    s.put("slope", qd(d.slope, DEGREE_TOL / r));
    s.put("he_constant", q(d.c_hat, PI * DEGREE_TOL / r));
    s.put("he_defect", q(d.he_defect, HE_DEFECT_TOL));
    s.put("hym_energy", q(d.hym_energy, ENERGY_IDENTITY_TOL));
    s.put("lambda_f_l2", q(d.lambda_f_l2, ENERGY_IDENTITY_TOL));
    s.put(
        "metric",
        json!({
            "hermitian_residual": q(report.hermitian_residual, 0.0),
            "min_eigenvalue": q(report.min_eigenvalue, 0.0),
            "compat_residual": q(report.compat_residual, 0.0),
        }),
    );
    s.check(Check::at_most("degree equals the topological degree", (d.degree - topo).abs(), DEGREE_TOL));
    s.check(Check::at_most(
        "lambda_f_l2 = hym_energy + r c_hat^2",
        (d.lambda_f_l2 - d.hym_energy - r * d.c_hat * d.c_hat).abs(),
        ENERGY_IDENTITY_TOL * d.lambda_f_l2.max(1.0),
    ));
    Ok(s.finish())
}

pub fn functional(cfg: &ExperimentConfig) -> Result<Summary> {
    let mut s = Summary::new(Command::Functional, cfg);
    let bundle = cfg.bundle()?;
    let geom = &bundle.geom;
    let h0 = cfg.initial_metric.build(&bundle)?;
    let h = target_metric(cfg, &bundle)?;
    let n_t = cfg.functional.n_t;
    let mut values = BTreeMap::new();
    for &method in &cfg.functional.paths {
        let r = match method {
            Method::Eigen => functional_eigen(geom, &h0, &h, None)?,
            _ => functional_path(geom, &h0, &h, method, n_t, None)?,
        };
        values.insert(method, r.value);
        let tol = if method == Method::Eigen { EIGEN_REL_TOL * r.value.abs().max(1.0) } else { PATH_TOL };
        s.put(
            &serde_json::to_value(method)?.as_str().expect("method names are strings").to_string(),
            json!({
                "value": q(r.value, tol),
                "n_t": q(r.n_t as f64, 0.0),
                "c_hat": q(r.c_hat, PI * DEGREE_TOL),
                "curvature_term": q(r.curvature_term, tol),
                "logdet_term": q(r.logdet_term, tol),
                "gradient_term": q(r.gradient_term, tol),
            }),
        );
    }
    let exp = values.get(&Method::PathExp).copied();
    if let (Some(a), Some(b)) = (exp, values.get(&Method::PathLinear)) {
        s.check(Check::at_most("path-exp = path-linear", (a - b).abs(), PATH_TOL));
    }
    let path = exp.or_else(|| values.get(&Method::PathLinear).copied());
    if let (Some(a), Some(b)) = (path, values.get(&Method::Eigen)) {
        s.check(Check::at_most("path = eigen (relative)", (a - b).abs() / a.abs().max(1e-12), EIGEN_REL_TOL));
    }
    let c = SCALE_C;
    let scaled = h.map(|m| m.scale(c.exp()));
    let m_h = functional_path(geom, &h0, &h, Method::PathExp, n_t, None)?.value;
    let m_scaled = functional_path(geom, &h0, &scaled, Method::PathExp, n_t, None)?.value;
    let m_self = functional_path(geom, &h0, &h0.map(|m| m.scale(c.exp())), Method::PathExp, n_t, None)?.value;
    s.put("scale_constant", q(c, 0.0));
    s.check(Check::at_most("M(H0, e^c H) = M(H0, H)", (m_scaled - m_h).abs(), SCALE_TOL));
    s.check(Check::at_most("M(H0, e^c H0) = 0", m_self.abs(), SCALE_TOL));
    Ok(s.finish())
}

pub fn decompose(cfg: &ExperimentConfig) -> Result<Summary> {
    let mut s = Summary::new(Command::Decompose, cfg);
    let bundle = cfg.bundle()?;
    let geom = &bundle.geom;
    let entry = cfg
        .inclusion
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["inclusion: required by the decompose subcommand".into()]))?;
    let inc = Inclusion::from_catalog(geom, bundle.rank(), entry)?;
    let h = cfg.initial_metric.build(&bundle)?;
    let d = curvature_decomposition(geom, &inc, &h)?;
    s.put("deg_E", qd(d.degree_e, DEGREE_TOL));
    s.put("deg_S", qd(d.degree_s, DEGREE_TOL));
    s.put("deg_Q", qd(d.degree_q, DEGREE_TOL));
    s.put("sff_l2", q(d.sff_l2_norm, SFF_TOL));
    s.put("res_S", q(d.res_s, DECOMP_RES_TOL));
    s.put("res_Q", q(d.res_q, DECOMP_RES_TOL));
    s.put("trace_gap_S", q(d.trace_gap_s, TRACE_GAP_TOL));
    s.put("trace_gap_Q", q(d.trace_gap_q, TRACE_GAP_TOL));
    s.check(Check::at_most("deg_S + deg_Q = deg_E", (d.degree_s + d.degree_q - d.degree_e).abs(), DEGREE_TOL));
    s.check(Check::at_most("curvature decomposition residual (S)", d.res_s, DECOMP_RES_TOL));
    s.check(Check::at_most("curvature decomposition residual (Q)", d.res_q, DECOMP_RES_TOL));
    s.check(Check::at_most("trace gap (S) = -sff_l2", (d.trace_gap_s + d.sff_l2_norm).abs(), TRACE_GAP_TOL));
    s.check(Check::at_most("trace gap (Q) = sff_l2", (d.trace_gap_q - d.sff_l2_norm).abs(), TRACE_GAP_TOL));
    if cfg.target_metric.is_some() {
        let h1 = target_metric(cfg, &bundle)?;
        let rep = crate::functional::decomposition_residual(geom, &inc, &h, &h1, cfg.functional.n_t)?;
        s.put(
            "functional_decomposition",
            json!({
                "M_E": q(rep.m_e, PATH_TOL),
                "M_S": q(rep.m_s, PATH_TOL),
                "M_Q": q(rep.m_q, PATH_TOL),
                "gamma_sq": q(rep.gamma_sq, SFF_TOL),
                "gamma0_sq": q(rep.gamma0_sq, SFF_TOL),
                "residual": q(rep.residual, SPLIT_FUNCTIONAL_TOL),
                "slope": qd(rep.slope_e, DEGREE_TOL),
            }),
        );
        s.check(Check::at_most("M_E = M_S + M_Q + |gamma|^2 - |gamma0|^2", rep.residual, SPLIT_FUNCTIONAL_TOL));
    }
    Ok(s.finish())
}

fn trace_analysis(s: &mut Summary, cfg: &ExperimentConfig, trace: &[TraceRow], rank: usize) -> Result<()> {
    let he = he_report(trace, &cfg.flow.epsilons);
    let entries: Vec<Value> = he
        .entries
        .iter()
        .map(|e| {
            let t = e.t.map(|t| {
                // passage is resolved to the spacing of the recorded rows
                let i = trace.iter().position(|r| r.t == t).unwrap_or(0);
                let spacing = if i > 0 { t - trace[i - 1].t } else { 0.0 };
                json!(Quantity::same(t, spacing))
            });
            json!({ "epsilon": q(e.epsilon, 0.0), "t": t, "reached": e.t.is_some() })
        })
        .collect();
    s.put("he_report", json!({ "entries": entries, "best_defect": q(he.best_defect, HE_DEFECT_TOL) }));
    let mono = monotonicity(trace);
    s.put(
        "monotonicity",
        json!({
            "max_increase": q(mono.max_increase, DM_SLACK),
            "smooth_points": q(mono.smooth_points as f64, 0.0),
            "worst_rel_mismatch": q(mono.worst_rel_mismatch, ENERGY_RATE_TOL),
            "energy_rate_assessed": mono.smooth_points > 0,
        }),
    );
    let d0 = trace.first().map(|r| r.degree).unwrap_or(0.0);
    let drift = trace.iter().map(|r| (r.degree - d0).abs()).fold(0.0, f64::max);
    s.put("degree_drift", qd(drift, DRIFT_TOL));
    let logdet = trace.iter().map(|r| r.logdet_inf).fold(0.0, f64::max);
    s.put("max_logdet_inf", q(logdet, 0.0));
    if let Some(flag) = &cfg.flow.flag {
        let pieces: Vec<(f64, usize)> = flag.iter().map(|p| (p.slope, p.rank)).collect();
        let deg = trace.first().map(|r| r.degree.round()).unwrap_or(0.0);
        let ab = ab_compare(trace, &pieces, deg, rank)?;
        s.put(
            "ab_compare",
            json!({
                "inf_lambda_f_l2": q(ab.inf_lambda_f_l2, ENERGY_IDENTITY_TOL),
                "phi_sq": q(ab.phi_sq_internal, 0.0),
                "phi_sq_integer_slopes": q(ab.phi_sq_slopes, 0.0),
                "gap": q(ab.gap, 0.0),
            }),
        );
    }
    s.check(Check::at_most("M non-increasing between records", mono.max_increase, DM_SLACK));
    s.check(Check::at_most("degree drift", drift, DRIFT_TOL));
    // fast transients can leave no smooth stretch; nothing to compare then
    if mono.smooth_points > 0 {
        s.check(Check::at_most("dM/dt = -hym_energy on smooth stretches", mono.worst_rel_mismatch, ENERGY_RATE_TOL));
    }
    Ok(())
}

fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?
        .iter()
        .map(String::from)
        .collect();
    if header != TraceRow::COLUMNS {
        return Err(Error::Config(vec![format!("{}: unexpected columns {header:?}", path.display())]));
    }
    rd.deserialize()
        .collect::<std::result::Result<Vec<TraceRow>, _>>()
        .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
}

struct TraceSink {
    writer: Option<csv::Writer<fs::File>>,
}

impl TraceSink {
    fn open(path: &Path, enabled: bool, prior: &[TraceRow]) -> Result<Self> {
        if !enabled {
            return Ok(Self { writer: None });
        }
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(TraceRow::COLUMNS).map_err(csv_err)?;
        let mut sink = Self { writer: Some(w) };
        for r in prior {
            sink.push(r)?;
        }
        Ok(sink)
    }

    fn push(&mut self, r: &TraceRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.write_record(r.values().iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Runs the heat flow, writing `trace.csv` and periodic checkpoints into
/// `out`. With `resume`, the run continues from the checkpoint; rows of an
/// existing trace in `out` before the checkpoint time are kept.
pub fn flow(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<Summary> {
    let mut s = Summary::new(Command::Flow, cfg);
    let bundle = cfg.bundle()?;
    let rank = bundle.rank();
    let h0 = cfg.initial_metric.build(&bundle)?;
    let engine = Flow::new(bundle.clone(), h0)?;
    let params = cfg.flow.params();
    fs::create_dir_all(out)?;
    let trace_path = out.join(TRACE_FILE);
    let (state, prior) = match resume {
        Some(p) => {
            let st = checkpoint::read(p, &bundle)?;
            let prior = if trace_path.exists() {
                read_trace(&trace_path)?.into_iter().filter(|r| r.t < st.t).collect()
            } else {
                Vec::new()
            };
            (st, prior)
        }
        None => (engine.initial_state(params.dt0)?, Vec::new()),
    };
    let start_step = state.step;
    let c_hat = state.c_hat;
    let mut sink = TraceSink::open(&trace_path, cfg.outputs.formats.contains(&Format::Csv), &prior)?;
    let mut trace = prior;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let stride = cfg.flow.checkpoint_stride;
    let trace_stride = cfg.flow.trace_stride;
    let result = engine.run(state, &params, |st: &FlowState, row: Option<&TraceRow>| {
        if let Some(r) = row {
            // the resumed starting row is only kept where an unbroken run records one
            if st.step != start_step || resume.is_none() || st.step % trace_stride == 0 {
                sink.push(r)?;
                trace.push(*r);
            }
        }
        if stride > 0 && st.step > start_step && st.step % stride == 0 {
            sink.flush()?;
            checkpoint::write(&ckpt_path, &bundle, st)?;
        }
        Ok(())
    });
    sink.flush()?;
    drop(sink);
    s.put("c_hat", q(c_hat, PI * DEGREE_TOL / rank as f64));
    s.put("rank", q(rank as f64, 0.0));
    match result {
        Ok((end, outcome)) => {
            let stop = match outcome.stop {
                StopReason::TMax => json!({ "reason": "t-max" }),
                StopReason::Converged { he_defect } => {
                    json!({ "reason": "converged", "he_defect": q(he_defect, HE_DEFECT_TOL) })
                }
                StopReason::Blowup { log_h_inf } => {
                    json!({ "reason": "hn-degeneration", "log_h_inf": q(log_h_inf, 0.0) })
                }
            };
            s.put("stop", stop);
            s.put("t_final", q(end.t, 0.0));
            s.put("steps", q(end.step as f64, 0.0));
            s.put("rejected_steps", q(end.rejected as f64, 0.0));
            s.put("max_step_dm", q(outcome.max_dm, DM_SLACK));
            if let Some(last) = trace.last() {
                s.put("final", final_row(last));
            }
            if end.step > start_step {
                s.check(Check::at_most("M non-increasing per accepted step", outcome.max_dm, DM_SLACK));
            }
        }
        Err(Error::DtUnderflow { t, he_defect, log_h }) => {
            s.put(
                "stop",
                json!({
                    "reason": "dt-underflow",
                    "t": q(t, 0.0),
                    "he_defect": q(he_defect, HE_DEFECT_TOL),
                    "log_h_inf": q(log_h, 0.0),
                }),
            );
            s.breakdown = Some(format!("time step underflow at t = {t}"));
        }
        Err(e) => return Err(e),
    }
    trace_analysis(&mut s, cfg, &trace, rank)?;
    Ok(s.finish())
}

fn final_row(r: &TraceRow) -> Value {
    json!({
        "t": q(r.t, 0.0),
        "M": q(r.m, PATH_TOL),
        "he_defect": q(r.he_defect, HE_DEFECT_TOL),
        "hym_energy": q(r.hym_energy, ENERGY_IDENTITY_TOL),
        "lambda_f_l2": q(r.lambda_f_l2, ENERGY_IDENTITY_TOL),
        "h_min_eig": q(r.h_min_eig, 0.0),
        "h_max_eig": q(r.h_max_eig, 0.0),
        "logdet_inf": q(r.logdet_inf, 0.0),
        "degree": qd(r.degree, DEGREE_TOL),
    })
}

/// Summarizes a finished run directory from its `trace.csv`.
pub fn report(cfg: &ExperimentConfig, dir: &Path) -> Result<Summary> {
    let mut s = Summary::new(Command::Report, cfg);
    let trace = read_trace(&dir.join(TRACE_FILE))?;
    if trace.is_empty() {
        return Err(Error::Config(vec![format!("{}: empty trace", dir.join(TRACE_FILE).display())]));
    }
    let rank = cfg.bundle()?.rank();
    s.put("rows", q(trace.len() as f64, 0.0));
    s.put("final", final_row(trace.last().expect("nonempty")));
    trace_analysis(&mut s, cfg, &trace, rank)?;
    Ok(s.finish())
}

pub fn run(command: Command, cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<Summary> {
    if resume.is_some() && command != Command::Flow {
        return Err(Error::Config(vec!["--resume applies to the flow subcommand only".into()]));
    }
    let s = match command {
        Command::Degree => degree(cfg)?,
        Command::Functional => functional(cfg)?,
        Command::Decompose => decompose(cfg)?,
        Command::Flow => flow(cfg, out, resume)?,
        Command::Report => report(cfg, out)?,
    };
    s.write(out)?;
    Ok(s)
}

/// Process exit code for an outcome: 0 pass, 2 invariant failure, 3 config
/// or input error, 4 numerical breakdown.
pub fn exit_code(outcome: &Result<Summary>) -> i32 {
    match outcome {
        Ok(s) if s.breakdown.is_some() => 4,
        Ok(s) if s.pass => 0,
        Ok(_) => 2,
        Err(e) => match e {
            Error::DtUnderflow { .. } => 4,
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::Checkpoint(_)
            | Error::Mismatch(_)
            | Error::Unsupported(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            _ => 2,
        },
    }
}
