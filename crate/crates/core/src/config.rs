//! Experiment configuration in TOML.
//!
//! ```toml
//! [base]
//! kind = "torus"          # or "sphere" with n_r, n_theta, overlap
//! tau = [0.0, 1.0]
//! n = 32
//!
//! [bundle]
//! kind = "atiyah"
//! a_re = 1.0
//! a_im = 0.0
//!
//! [initial_metric]
//! recipe = "atiyah-default"
//!
//! [flow]
//! t_max = 60.0
//! epsilons = [0.1, 0.05, 0.01]
//! ```
//!
//! Unknown keys are rejected and every violation is reported, not just the
//! first one.

use crate::bundle::{random_bumps, Bundle, BundleSpec, CatalogEntry, GlobalScalar, MetricField, MetricRecipe};
use crate::error::{Error, Result};
use crate::flow::{conformal_normalize, FlowParams};
use crate::functional::{Method, DEFAULT_NT};
use crate::geometry::{build_sphere, build_torus, BaseGeometry};
use crate::subobjects::InclusionEntry;
use crate::C64;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use toml::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub base: BaseConfig,
    pub bundle: CatalogEntry,
    pub initial_metric: MetricConfig,
    /// Second metric for `functional` and the decomposition identity.
    #[serde(default)]
    pub target_metric: Option<MetricConfig>,
    #[serde(default)]
    pub inclusion: Option<InclusionEntry>,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub functional: FunctionalConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaseConfig {
    Torus {
        tau: [f64; 2],
        n: usize,
    },
    Sphere {
        n_r: usize,
        n_theta: usize,
        #[serde(default = "default_overlap")]
        overlap: f64,
    },
}

fn default_overlap() -> f64 {
    1.2
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseRecipe {
    Identity,
    FubiniStudy,
    AtiyahDefault,
}

/// Base recipe, then an optional conformal factor, then seeded bumps, then
/// optional conformal normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub recipe: BaseRecipe,
    #[serde(default)]
    pub conformal: Option<GlobalScalar>,
    #[serde(default)]
    pub bumps: usize,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagPiece {
    pub slope: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub dt0: f64,
    pub dt_max: f64,
    pub t_max: f64,
    /// Defect targets for the first-passage table, kept in decreasing order.
    pub epsilons: Vec<f64>,
    /// Stop once `he_defect` drops below this value (0 disables).
    pub stop_defect: f64,
    pub blowup_log: f64,
    pub trace_stride: u64,
    /// Accepted steps between checkpoints (0 disables).
    pub checkpoint_stride: u64,
    /// Quotient slopes and ranks of a filtration for the energy comparison.
    pub flag: Option<Vec<FlagPiece>>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let p = FlowParams::default();
        Self {
            dt0: 0.01,
            dt_max: p.dt_max,
            t_max: p.t_max,
            epsilons: vec![0.1, 0.05, 0.01],
            stop_defect: p.stop_defect,
            blowup_log: p.blowup_log,
            trace_stride: p.trace_stride,
            checkpoint_stride: 50,
            flag: None,
        }
    }
}

impl FlowConfig {
    pub fn params(&self) -> FlowParams {
        FlowParams {
            dt0: self.dt0,
            dt_max: self.dt_max,
            t_max: self.t_max,
            stop_defect: self.stop_defect,
            blowup_log: self.blowup_log,
            trace_stride: self.trace_stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FunctionalConfig {
    pub paths: Vec<Method>,
    pub n_t: usize,
}

impl Default for FunctionalConfig {
    fn default() -> Self {
        Self { paths: vec![Method::PathExp, Method::PathLinear, Method::Eigen], n_t: DEFAULT_NT }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputsConfig {
    /// Used when no `--out` is given.
    pub directory: Option<String>,
    pub formats: Vec<Format>,
}

impl Default for OutputsConfig {
    fn default() -> Self {
        Self { directory: None, formats: vec![Format::Json, Format::Csv] }
    }
}

const TOP_KEYS: &[&str] =
    &["base", "bundle", "initial_metric", "target_metric", "inclusion", "flow", "functional", "outputs"];
const METRIC_KEYS: &[&str] = &["recipe", "conformal", "bumps", "amplitude", "seed", "normalize"];
const FLOW_KEYS: &[&str] = &[
    "dt0",
    "dt_max",
    "t_max",
    "epsilons",
    "stop_defect",
    "blowup_log",
    "trace_stride",
    "checkpoint_stride",
    "flag",
];
const FUNCTIONAL_KEYS: &[&str] = &["paths", "n_t"];
const OUTPUT_KEYS: &[&str] = &["directory", "formats"];

const BASE_KINDS: &[(&str, &[&str])] = &[("torus", &["tau", "n"]), ("sphere", &["n_r", "n_theta", "overlap"])];
const BUNDLE_KINDS: &[(&str, &[&str])] = &[
    ("torus-trivial", &["rank"]),
    ("torus-flat", &["alpha"]),
    ("atiyah", &["a_re", "a_im"]),
    ("sphere-o", &["k"]),
    ("sphere-sum", &["degrees"]),
    ("euler-pair", &[]),
];
const INCLUSION_KINDS: &[(&str, &[&str])] = &[("euler-pair", &[]), ("atiyah-sub", &[]), ("coordinate", &["s"])];
const RECIPES: &[&str] = &["identity", "fubini-study", "atiyah-default"];

fn names(kinds: &[(&str, &[&str])]) -> String {
    kinds.iter().map(|k| k.0).collect::<Vec<_>>().join(", ")
}

fn check_keys(errs: &mut Vec<String>, path: &str, table: &toml::Table, allowed: &[&str]) {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            errs.push(format!("{path}: unknown key `{key}` (allowed: {})", allowed.join(", ")));
        }
    }
}

fn check_tagged(errs: &mut Vec<String>, path: &str, v: Option<&Value>, kinds: &[(&str, &[&str])], required: bool) {
    let Some(v) = v else {
        if required {
            errs.push(format!("{path}: missing table"));
        }
        return;
    };
    let Some(t) = v.as_table() else {
        errs.push(format!("{path}: expected a table"));
        return;
    };
    match t.get("kind").and_then(Value::as_str) {
        None => errs.push(format!("{path}.kind: missing (one of {})", names(kinds))),
        Some(kind) => match kinds.iter().find(|k| k.0 == kind) {
            None => errs.push(format!("{path}.kind: unknown `{kind}` (catalog: {})", names(kinds))),
            Some((_, keys)) => {
                let mut allowed = vec!["kind"];
                allowed.extend_from_slice(keys);
                check_keys(errs, path, t, &allowed);
            }
        },
    }
}

fn check_metric(errs: &mut Vec<String>, path: &str, v: Option<&Value>, required: bool) {
    let Some(v) = v else {
        if required {
            errs.push(format!("{path}: missing table"));
        }
        return;
    };
    let Some(t) = v.as_table() else {
        errs.push(format!("{path}: expected a table"));
        return;
    };
    check_keys(errs, path, t, METRIC_KEYS);
    match t.get("recipe").and_then(Value::as_str) {
        None => errs.push(format!("{path}.recipe: missing (one of {})", RECIPES.join(", "))),
        Some(r) if !RECIPES.contains(&r) => {
            errs.push(format!("{path}.recipe: unknown `{r}` (one of {})", RECIPES.join(", ")))
        }
        _ => {}
    }
    let bumps = t.get("bumps").and_then(Value::as_integer).unwrap_or(0);
    if bumps > 0 && !t.contains_key("seed") {
        errs.push(format!("{path}.seed: required when bumps > 0"));
    }
}

fn structural_violations(root: &toml::Table) -> Vec<String> {
    let mut errs = Vec::new();
    check_keys(&mut errs, "<root>", root, TOP_KEYS);
    check_tagged(&mut errs, "base", root.get("base"), BASE_KINDS, true);
    check_tagged(&mut errs, "bundle", root.get("bundle"), BUNDLE_KINDS, true);
    check_tagged(&mut errs, "inclusion", root.get("inclusion"), INCLUSION_KINDS, false);
    check_metric(&mut errs, "initial_metric", root.get("initial_metric"), true);
    check_metric(&mut errs, "target_metric", root.get("target_metric"), false);
    for (name, keys) in [("flow", FLOW_KEYS), ("functional", FUNCTIONAL_KEYS), ("outputs", OUTPUT_KEYS)] {
        match root.get(name) {
            Some(Value::Table(t)) => check_keys(&mut errs, name, t, keys),
            Some(_) => errs.push(format!("{name}: expected a table")),
            None => {}
        }
    }
    errs
}

/// Parses and validates a config; fills documented defaults and sorts the
/// ε targets in decreasing order.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
    let errs = structural_violations(&root);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
    cfg.flow.epsilons.sort_by(|a, b| b.total_cmp(a));
    cfg.flow.epsilons.dedup();
    let errs = semantic_violations(&cfg);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

fn semantic_violations(cfg: &ExperimentConfig) -> Vec<String> {
    let mut errs = Vec::new();
    match &cfg.base {
        BaseConfig::Torus { tau, n } => {
            if !(tau[1] > 0.0) {
                errs.push(format!("base.tau: imaginary part must be positive (got {})", tau[1]));
            }
            if *n < 8 {
                errs.push(format!("base.n: need at least 8 nodes (got {n})"));
            }
        }
        BaseConfig::Sphere { n_r, n_theta, overlap } => {
            if *n_r < 8 {
                errs.push(format!("base.n_r: need at least 8 rows (got {n_r})"));
            }
            if *n_theta < 8 || n_theta % 2 != 0 {
                errs.push(format!("base.n_theta: must be even and at least 8 (got {n_theta})"));
            }
            if !(*overlap > 1.0) {
                errs.push(format!("base.overlap: must exceed 1 (got {overlap})"));
            }
        }
    }
    let torus = matches!(cfg.base, BaseConfig::Torus { .. });
    let bundle_torus = matches!(
        cfg.bundle,
        CatalogEntry::TorusTrivial { .. } | CatalogEntry::TorusFlat { .. } | CatalogEntry::Atiyah { .. }
    );
    if torus != bundle_torus {
        errs.push("bundle.kind: bundle lives on a different base kind".into());
    }
    for (name, m) in [("initial_metric", Some(&cfg.initial_metric)), ("target_metric", cfg.target_metric.as_ref())] {
        let Some(m) = m else { continue };
        let ok = match m.recipe {
            BaseRecipe::Identity => true,
            BaseRecipe::FubiniStudy => !torus,
            BaseRecipe::AtiyahDefault => matches!(cfg.bundle, CatalogEntry::Atiyah { .. }),
        };
        if !ok {
            errs.push(format!("{name}.recipe: not available for this bundle"));
        }
        if m.bumps > 0 && !(m.amplitude.is_finite() && m.amplitude > 0.0) {
            errs.push(format!("{name}.amplitude: must be positive when bumps > 0"));
        }
    }
    let f = &cfg.flow;
    if !(f.dt0 > 0.0 && f.dt0.is_finite()) {
        errs.push(format!("flow.dt0: must be positive (got {})", f.dt0));
    }
    if !(f.dt_max >= f.dt0) {
        errs.push(format!("flow.dt_max: must be at least dt0 (got {})", f.dt_max));
    }
    if !(f.t_max > 0.0 && f.t_max.is_finite()) {
        errs.push(format!("flow.t_max: must be positive (got {})", f.t_max));
    }
    if f.epsilons.iter().any(|e| !(*e > 0.0)) {
        errs.push("flow.epsilons: targets must be positive".into());
    }
    if f.trace_stride == 0 {
        errs.push("flow.trace_stride: must be at least 1".into());
    }
    if !(f.blowup_log > 0.0) {
        errs.push("flow.blowup_log: must be positive".into());
    }
    if let Some(flag) = &f.flag {
        if flag.is_empty() || flag.iter().any(|p| p.rank == 0) {
            errs.push("flow.flag: pieces must be nonempty with positive rank".into());
        }
    }
    if cfg.functional.n_t < 2 {
        errs.push(format!("functional.n_t: need at least 2 nodes (got {})", cfg.functional.n_t));
    }
    if cfg.functional.paths.is_empty() {
        errs.push("functional.paths: list at least one method".into());
    }
    errs
}

impl ExperimentConfig {
    /// `--grid N`: `N` nodes per side on the torus, `(N, 2N)` on the sphere.
    pub fn with_grid(mut self, n: usize) -> Result<Self> {
        match &mut self.base {
            BaseConfig::Torus { n: m, .. } => *m = n,
            BaseConfig::Sphere { n_r, n_theta, .. } => {
                *n_r = n;
                *n_theta = 2 * n;
            }
        }
        let errs = semantic_violations(&self);
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn geometry(&self) -> Result<Arc<BaseGeometry>> {
        let g = match self.base {
            BaseConfig::Torus { tau, n } => build_torus(C64::new(tau[0], tau[1]), n)?,
            BaseConfig::Sphere { n_r, n_theta, overlap } => build_sphere(n_r, n_theta, overlap)?,
        };
        Ok(Arc::new(g))
    }

    pub fn bundle(&self) -> Result<Bundle> {
        Bundle::new(self.geometry()?, BundleSpec::from_catalog(&self.bundle)?)
    }
}

impl MetricConfig {
    pub fn build(&self, bundle: &Bundle) -> Result<MetricField> {
        let mut recipe = match self.recipe {
            BaseRecipe::Identity => MetricRecipe::Identity,
            BaseRecipe::FubiniStudy => MetricRecipe::FubiniStudy,
            BaseRecipe::AtiyahDefault => MetricRecipe::AtiyahDefault,
        };
        if let Some(phi) = &self.conformal {
            recipe = MetricRecipe::Conformal { phi: phi.clone(), base: Box::new(recipe) };
        }
        if self.bumps > 0 {
            let seed = self.seed.ok_or_else(|| Error::Config(vec!["metric seed is required with bumps".into()]))?;
            let bumps = random_bumps(&bundle.geom, bundle.rank(), self.bumps, self.amplitude, seed);
            recipe = MetricRecipe::ExpPerturbation { bumps, base: Box::new(recipe) };
        }
        let h = bundle.make_metric(&recipe)?;
        if self.normalize {
            Ok(conformal_normalize(bundle, &h)?.0)
        } else {
            Ok(h)
        }
    }
}
