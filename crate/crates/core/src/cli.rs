//! Batch runner: TOML run configurations, one mode per run, CSV and JSON
//! artifacts named `{mode}-{hash}` where the hash covers the resolved config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::continuation::{
    certify_uniqueness, continue_along_paths, ContinuationParams, Exclusion, FitMethod, Grid,
    SampledFunction,
};
use crate::error::{Error, Result};
use crate::full_propagator::{block_traces, propagate_full_with, Integrator, PropagationParams};
use crate::io::{
    create_buffered, fmt_f64, read_hermitian_matrix, read_numeric_csv_file, read_replay_log_file,
    read_samples_file, write_replay_log, write_samples, DissipationCsv, DissipationRow, MatrixDump,
    TrajectoryCsv,
};
use crate::linalg::{hermiticity_defect_max, trace, CMatrix};
use crate::model::{
    build_chain_system, ground_state_density_matrix, BiasProfile, Lead, Partition,
    TightBindingSystem,
};
use crate::partition_dissipation::{
    landauer_current, transient_plateau_current, DissipationLog, DissipationRecord,
};
use crate::reduced_propagator::{propagate_reduced, DissipationFunctional, WideBand};
use crate::rg_verifier::{refinement_ladder, HarmonicBenchmark, DEFAULT_LADDER};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TransportFull,
    TransportReduced,
    Landauer,
    Continue,
    Certify,
    RgCheck,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::TransportFull => "transport-full",
            Mode::TransportReduced => "transport-reduced",
            Mode::Landauer => "landauer",
            Mode::Continue => "continue",
            Mode::Certify => "certify",
            Mode::RgCheck => "rg-check",
        }
    }
}

/// Energies in units of the lead hopping, times in ħ / hopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Runs are always deterministic; the flag exists to make that explicit.
    #[serde(default = "default_true")]
    pub deterministic: bool,
    pub system: Option<SystemConfig>,
    pub filling: Option<FillingConfig>,
    pub bias: Option<BiasProfile>,
    pub propagation: Option<PropagationConfig>,
    pub reduced: Option<ReducedConfig>,
    pub landauer: Option<LandauerConfig>,
    #[serde(rename = "continue")]
    pub continuation: Option<ContinueConfig>,
    pub certify: Option<CertifyConfig>,
    pub rg_check: Option<RgCheckConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n_left: usize,
    pub n_device: usize,
    pub n_right: usize,
    #[serde(default = "default_hopping")]
    pub hopping: f64,
    #[serde(default)]
    pub onsite: f64,
    /// Overrides individual bonds of the chain (sites indexed L, D, R from 0).
    #[serde(default)]
    pub bonds: Vec<Bond>,
    /// Full Hamiltonian in the plain-text matrix format; replaces the chain.
    pub hamiltonian_file: Option<PathBuf>,
}

fn default_hopping() -> f64 {
    -1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FillingConfig {
    /// Defaults to half filling.
    pub electrons: Option<usize>,
    #[serde(default)]
    pub fractional: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    pub dt: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub integrator: Integrator,
    /// Write every k-th step to the CSV outputs.
    #[serde(default = "default_one")]
    pub output_every: usize,
    #[serde(default = "default_step_warning")]
    pub step_warning: f64,
    /// Also write the binary matrix dump at the output cadence.
    #[serde(default)]
    pub dump: bool,
}

fn default_one() -> usize {
    1
}

fn default_step_warning() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionalKind {
    Isolated,
    ExactReplay,
    WideBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducedConfig {
    pub functional: FunctionalKind,
    /// Q log written by a transport-full run of the same system.
    pub replay_log: Option<PathBuf>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub mu_left: f64,
    #[serde(default)]
    pub mu_right: f64,
    #[serde(default = "default_one")]
    pub refresh_every: usize,
}

fn default_gamma() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandauerConfig {
    pub biases: Vec<f64>,
    #[serde(default)]
    pub mu: f64,
    /// Also average the transient current of a full run over
    /// [t_rec/3, 2 t_rec/3] under a step bias.
    #[serde(default)]
    pub transient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkConfig {
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_step_fraction")]
    pub step_fraction: f64,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default)]
    pub method: FitMethod,
    /// Polylines from inside D into U; defaults to one segment from the
    /// centre of D to the corner of U furthest from it.
    #[serde(default)]
    pub paths: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub exclusions: Vec<Exclusion>,
}

fn default_order() -> usize {
    crate::continuation::DEFAULT_MAX_ORDER
}

fn default_step_fraction() -> f64 {
    0.5
}

fn default_safety() -> f64 {
    crate::continuation::DEFAULT_SAFETY
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            order: default_order(),
            step_fraction: default_step_fraction(),
            safety: default_safety(),
            method: FitMethod::default(),
            paths: Vec::new(),
            exclusions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinueConfig {
    pub input: PathBuf,
    /// Restrict the input to this box before fitting.
    pub from_lower: Option<Vec<f64>>,
    pub from_upper: Option<Vec<f64>>,
    pub target: TargetConfig,
    #[serde(default)]
    pub walk: WalkConfig,
    /// Known values on the target grid, for error reporting.
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub input_a: PathBuf,
    pub input_b: PathBuf,
    pub target: TargetConfig,
    #[serde(default)]
    pub walk: WalkConfig,
    #[serde(default = "default_tol_agree")]
    pub tol_agree: f64,
    /// Pass threshold for the difference of the continuations on U.
    #[serde(default = "default_tol_u")]
    pub tol_u: f64,
}

fn default_tol_agree() -> f64 {
    1e-9
}

fn default_tol_u() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RgCheckConfig {
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub gauge: f64,
    #[serde(default)]
    pub k: usize,
    #[serde(default = "default_dx")]
    pub dx: f64,
    #[serde(default = "default_rg_dt")]
    pub dt: f64,
    #[serde(default = "default_subinterval")]
    pub subinterval: Option<[f64; 2]>,
    /// (dx, dt) levels; fewer than two skips the ladder.
    #[serde(default = "default_ladder")]
    pub ladder: Vec<[f64; 2]>,
}

fn default_half_width() -> f64 {
    8.0
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_dx() -> f64 {
    DEFAULT_LADDER[0].0
}

fn default_rg_dt() -> f64 {
    DEFAULT_LADDER[0].1
}

fn default_subinterval() -> Option<[f64; 2]> {
    Some([0.5, 1.5])
}

fn default_ladder() -> Vec<[f64; 2]> {
    DEFAULT_LADDER.iter().map(|&(dx, dt)| [dx, dt]).collect()
}

impl Default for RgCheckConfig {
    fn default() -> Self {
        Self {
            half_width: default_half_width(),
            epsilon: default_epsilon(),
            gauge: 0.0,
            k: 0,
            dx: default_dx(),
            dt: default_rg_dt(),
            subinterval: default_subinterval(),
            ladder: default_ladder(),
        }
    }
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

fn require<'a, T>(block: &'a Option<T>, path: &str, mode: Mode) -> Result<&'a T> {
    block
        .as_ref()
        .ok_or_else(|| invalid(path, format!("block is required for mode {}", mode.name())))
}

fn check_positive(path: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            path,
            format!("must be positive and finite, got {x}"),
        ))
    }
}

fn check_file(path: &str, file: &Path) -> Result<()> {
    if file.is_file() {
        Ok(())
    } else {
        Err(invalid(
            path,
            format!("file '{}' does not exist", file.display()),
        ))
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses TOML, resolves relative paths against `base_dir` and validates.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read '{}': {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// A config with only the mode set; fill in the blocks before `validate`.
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            output_dir: default_output_dir(),
            deterministic: true,
            system: None,
            filling: None,
            bias: None,
            propagation: None,
            reduced: None,
            landauer: None,
            continuation: None,
            certify: None,
            rg_check: None,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        if let Some(f) = self
            .system
            .as_mut()
            .and_then(|s| s.hamiltonian_file.as_mut())
        {
            resolve(base, f);
        }
        if let Some(f) = self.reduced.as_mut().and_then(|r| r.replay_log.as_mut()) {
            resolve(base, f);
        }
        if let Some(c) = self.continuation.as_mut() {
            resolve(base, &mut c.input);
            if let Some(r) = c.reference.as_mut() {
                resolve(base, r);
            }
        }
        if let Some(c) = self.certify.as_mut() {
            resolve(base, &mut c.input_a);
            resolve(base, &mut c.input_b);
        }
    }

    /// Checks mode/block consistency, value ranges and referenced files.
    pub fn validate(&self) -> Result<()> {
        if !self.deterministic {
            return Err(invalid(
                "deterministic",
                "runs are always deterministic; the flag must be true",
            ));
        }
        let mode = self.mode;
        let allowed: &[&str] = match mode {
            Mode::TransportFull => &["system", "filling", "bias", "propagation"],
            Mode::TransportReduced => &["system", "filling", "bias", "propagation", "reduced"],
            Mode::Landauer => &["system", "filling", "propagation", "landauer"],
            Mode::Continue => &["continue"],
            Mode::Certify => &["certify"],
            Mode::RgCheck => &["rg_check"],
        };
        let present = [
            ("system", self.system.is_some()),
            ("filling", self.filling.is_some()),
            ("bias", self.bias.is_some()),
            ("propagation", self.propagation.is_some()),
            ("reduced", self.reduced.is_some()),
            ("landauer", self.landauer.is_some()),
            ("continue", self.continuation.is_some()),
            ("certify", self.certify.is_some()),
            ("rg_check", self.rg_check.is_some()),
        ];
        for (name, is_set) in present {
            if is_set && !allowed.contains(&name) {
                return Err(invalid(
                    name,
                    format!("block is not used by mode {}", mode.name()),
                ));
            }
        }
        match mode {
            Mode::TransportFull | Mode::TransportReduced | Mode::Landauer => {
                self.validate_system(require(&self.system, "system", mode)?)?;
                if let Some(b) = &self.bias {
                    b.validate().map_err(|e| invalid("bias", e))?;
                }
                if mode != Mode::Landauer {
                    validate_propagation(require(&self.propagation, "propagation", mode)?)?;
                }
            }
            _ => {}
        }
        match mode {
            Mode::TransportReduced => {
                let r = require(&self.reduced, "reduced", mode)?;
                match r.functional {
                    FunctionalKind::ExactReplay => {
                        let log = r.replay_log.as_ref().ok_or_else(|| {
                            invalid("reduced.replay_log", "required for exact-replay")
                        })?;
                        check_file("reduced.replay_log", log)?;
                    }
                    FunctionalKind::WideBand => {
                        if !(r.gamma >= 0.0 && r.gamma.is_finite()) {
                            return Err(invalid(
                                "reduced.gamma",
                                format!("must be non-negative, got {}", r.gamma),
                            ));
                        }
                        if r.refresh_every == 0 {
                            return Err(invalid("reduced.refresh_every", "must be at least 1"));
                        }
                    }
                    FunctionalKind::Isolated => {}
                }
                if r.functional != FunctionalKind::ExactReplay && r.replay_log.is_some() {
                    return Err(invalid("reduced.replay_log", "only used by exact-replay"));
                }
            }
            Mode::Landauer => {
                let l = require(&self.landauer, "landauer", mode)?;
                if l.biases.is_empty() {
                    return Err(invalid("landauer.biases", "list is empty"));
                }
                if let Some(b) = l.biases.iter().find(|b| !b.is_finite()) {
                    return Err(invalid("landauer.biases", format!("non-finite bias {b}")));
                }
                if l.transient {
                    validate_propagation(require(&self.propagation, "propagation", mode)?)?;
                } else if self.propagation.is_some() {
                    return Err(invalid(
                        "propagation",
                        "only used when landauer.transient = true",
                    ));
                }
            }
            Mode::Continue => {
                let c = require(&self.continuation, "continue", mode)?;
                check_file("continue.input", &c.input)?;
                if let Some(r) = &c.reference {
                    check_file("continue.reference", r)?;
                }
                validate_target("continue.target", &c.target)?;
                validate_walk("continue.walk", &c.walk)?;
                if c.from_lower.is_some() != c.from_upper.is_some() {
                    return Err(invalid(
                        "continue.from_lower",
                        "from_lower and from_upper go together",
                    ));
                }
            }
            Mode::Certify => {
                let c = require(&self.certify, "certify", mode)?;
                check_file("certify.input_a", &c.input_a)?;
                check_file("certify.input_b", &c.input_b)?;
                validate_target("certify.target", &c.target)?;
                validate_walk("certify.walk", &c.walk)?;
                check_positive("certify.tol_agree", c.tol_agree)?;
                check_positive("certify.tol_u", c.tol_u)?;
            }
            Mode::RgCheck => {
                let r = require(&self.rg_check, "rg_check", mode)?;
                check_positive("rg_check.half_width", r.half_width)?;
                check_positive("rg_check.dx", r.dx)?;
                check_positive("rg_check.dt", r.dt)?;
                if !r.epsilon.is_finite() || !r.gauge.is_finite() {
                    return Err(invalid(
                        "rg_check.epsilon",
                        "epsilon and gauge must be finite",
                    ));
                }
                if r.k > 1 {
                    return Err(invalid(
                        "rg_check.k",
                        format!("must be 0 or 1, got {}", r.k),
                    ));
                }
                if let Some([a, b]) = r.subinterval {
                    if !(a < b) {
                        return Err(invalid(
                            "rg_check.subinterval",
                            format!("[{a}, {b}] is empty"),
                        ));
                    }
                }
                for (i, [dx, dt]) in r.ladder.iter().enumerate() {
                    check_positive(&format!("rg_check.ladder[{i}].dx"), *dx)?;
                    check_positive(&format!("rg_check.ladder[{i}].dt"), *dt)?;
                }
            }
            Mode::TransportFull => {}
        }
        Ok(())
    }

    fn validate_system(&self, s: &SystemConfig) -> Result<()> {
        if s.n_left == 0 || s.n_device == 0 || s.n_right == 0 {
            return Err(invalid(
                "system",
                "n_left, n_device and n_right must all be at least 1",
            ));
        }
        if !s.hopping.is_finite() || s.hopping == 0.0 {
            return Err(invalid("system.hopping", "must be finite and nonzero"));
        }
        if !s.onsite.is_finite() {
            return Err(invalid("system.onsite", "must be finite"));
        }
        let n = s.n_left + s.n_device + s.n_right;
        for (k, b) in s.bonds.iter().enumerate() {
            if b.i >= n || b.j >= n || b.i == b.j || !b.value.is_finite() {
                return Err(invalid(
                    &format!("system.bonds[{k}]"),
                    format!("invalid bond {b:?} for {n} sites"),
                ));
            }
        }
        if let Some(f) = &s.hamiltonian_file {
            check_file("system.hamiltonian_file", f)?;
        }
        if let Some(f) = &self.filling {
            if let Some(e) = f.electrons {
                if e > n {
                    return Err(invalid(
                        "filling.electrons",
                        format!("{e} electrons exceed {n} sites"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&canonical)[..6])
    }

    pub fn artifact_stem(&self) -> String {
        format!("{}-{}", self.mode.name(), self.hash())
    }
}

fn validate_propagation(p: &PropagationConfig) -> Result<()> {
    check_positive("propagation.dt", p.dt)?;
    if p.n_steps == 0 {
        return Err(invalid("propagation.n_steps", "must be at least 1"));
    }
    if p.output_every == 0 {
        return Err(invalid("propagation.output_every", "must be at least 1"));
    }
    check_positive("propagation.step_warning", p.step_warning)
}

fn validate_target(path: &str, t: &TargetConfig) -> Result<()> {
    let d = t.lower.len();
    if d == 0 || t.upper.len() != d || t.counts.len() != d {
        return Err(invalid(
            path,
            "lower, upper and counts must have the same nonzero length",
        ));
    }
    Ok(())
}

fn validate_walk(path: &str, w: &WalkConfig) -> Result<()> {
    if w.order == 0 {
        return Err(invalid(&format!("{path}.order"), "must be at least 1"));
    }
    if !(w.step_fraction > 0.0 && w.step_fraction < 1.0) {
        return Err(invalid(
            &format!("{path}.step_fraction"),
            "must lie in (0, 1)",
        ));
    }
    if !(w.safety > 0.0 && w.safety <= 1.0) {
        return Err(invalid(&format!("{path}.safety"), "must lie in (0, 1]"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Turn every warning into an invariant breach.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub mode: Mode,
    pub config_hash: String,
    pub artifacts: Vec<PathBuf>,
    pub summary: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl RunOutcome {
    pub fn summary_table(&self) -> String {
        let width = self.summary.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:width$}  {}", "mode", self.mode.name());
        let _ = writeln!(out, "{:width$}  {}", "config hash", self.config_hash);
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k:width$}  {v}");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        for a in &self.artifacts {
            let _ = writeln!(out, "wrote {}", a.display());
        }
        out
    }
}

struct Artifacts {
    dir: PathBuf,
    stem: String,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn path(&mut self, suffix: &str) -> PathBuf {
        let p = self.dir.join(format!("{}{suffix}", self.stem));
        self.written.push(p.clone());
        p
    }
}

#[derive(Default)]
struct Summary {
    rows: Vec<(String, String)>,
    json: BTreeMap<String, serde_json::Value>,
}

impl Summary {
    fn num(&mut self, key: &str, x: f64) {
        self.rows.push((key.to_string(), format!("{x:.6e}")));
        self.json.insert(key.to_string(), json!(x));
    }

    fn text(&mut self, key: &str, s: impl Into<String>) {
        let s = s.into();
        self.rows.push((key.to_string(), s.clone()));
        self.json.insert(key.to_string(), json!(s));
    }
}

/// Runs one configuration, writes its artifacts and returns the summary. In
/// strict mode any warning is returned as an `InvariantBreach` after the
/// artifacts are written.
pub fn run(config: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let mut art = Artifacts {
        dir: config.output_dir.clone(),
        stem: config.artifact_stem(),
        written: Vec::new(),
    };
    let mut summary = Summary::default();
    let mut warnings = Vec::new();
    let report = match config.mode {
        Mode::TransportFull => run_full(config, opts, &mut art, &mut summary, &mut warnings)?,
        Mode::TransportReduced => run_reduced(config, opts, &mut art, &mut summary, &mut warnings)?,
        Mode::Landauer => run_landauer(config, opts, &mut art, &mut summary, &mut warnings)?,
        Mode::Continue => run_continue(config, &mut art, &mut summary)?,
        Mode::Certify => run_certify(config, &mut summary)?,
        Mode::RgCheck => run_rg(config, &mut art, &mut summary, &mut warnings)?,
    };

    let meta = json!({
        "mode": config.mode.name(),
        "config_hash": config.hash(),
        "version": VERSION,
        "config": config,
        "summary": summary.json,
        "warnings": warnings,
        "report": report,
    });
    let meta_path = art.path(".json");
    let mut f = create_buffered(&meta_path)?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    writeln!(f)?;
    f.flush()?;

    let outcome = RunOutcome {
        mode: config.mode,
        config_hash: config.hash(),
        artifacts: art.written,
        summary: summary.rows,
        warnings,
    };
    if opts.strict && !outcome.warnings.is_empty() {
        return Err(Error::InvariantBreach(outcome.warnings.join("; ")));
    }
    Ok(outcome)
}

fn build_system(cfg: &SystemConfig) -> Result<TightBindingSystem> {
    let mut system = match &cfg.hamiltonian_file {
        Some(f) => {
            let h = read_hermitian_matrix(f)?;
            TightBindingSystem::from_hamiltonian(
                h,
                Partition::new(cfg.n_left, cfg.n_device, cfg.n_right)?,
            )?
        }
        None => build_chain_system(
            cfg.n_left,
            cfg.n_device,
            cfg.n_right,
            cfg.hopping,
            cfg.onsite,
        )?,
    };
    for b in &cfg.bonds {
        system = system.with_bond(b.i, b.j, b.value)?;
    }
    Ok(system)
}

fn initial_state(config: &RunConfig, system: &TightBindingSystem) -> Result<CMatrix> {
    let filling = config.filling.unwrap_or(FillingConfig {
        electrons: None,
        fractional: false,
    });
    let n_e = filling.electrons.unwrap_or(system.dim() / 2);
    ground_state_density_matrix(system, n_e, filling.fractional)
}

fn propagation_params(p: &PropagationConfig, opts: &RunOptions) -> PropagationParams {
    let mut params = PropagationParams::new(p.dt, p.n_steps, p.integrator).strict(opts.strict);
    params.step_warning = p.step_warning;
    params
}

fn run_full(
    config: &RunConfig,
    opts: &RunOptions,
    art: &mut Artifacts,
    summary: &mut Summary,
    warnings: &mut Vec<String>,
) -> Result<serde_json::Value> {
    let system = build_system(config.system.as_ref().expect("validated"))?;
    let pcfg = config.propagation.expect("validated");
    let profile = config.bias.unwrap_or_default();
    let sigma0 = initial_state(config, &system)?;
    let params = propagation_params(&pcfg, opts);
    let partition = *system.partition();
    let d = partition.device();
    let h0 = system.h0().clone();
    let every = pcfg.output_every;

    let mut traj = TrajectoryCsv::new(create_buffered(&art.path(".csv"))?, None)?;
    let mut diss = DissipationCsv::new(create_buffered(&art.path(".dissipation.csv"))?)?;
    let mut dump = if pcfg.dump {
        let count = pcfg.n_steps / every + usize::from(!pcfg.n_steps.is_multiple_of(every)) + 1;
        Some(MatrixDump::new(
            create_buffered(&art.path(".dump"))?,
            system.dim(),
            count,
        )?)
    } else {
        None
    };
    let mut log = DissipationLog::new(pcfg.dt);
    let mut sigma_d = Vec::with_capacity(pcfg.n_steps + 1);
    let n0 = trace(&sigma0).re;
    let idempotent0 = (&sigma0 * &sigma0 - &sigma0).norm();
    let (mut max_j, mut trace_drift, mut herm_drift, mut idem_drift) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut last = None;

    let meta = propagate_full_with(&system, &profile, &sigma0, &params, |step, t, sigma| {
        let record = DissipationRecord::from_state(t, sigma, &h0, &partition)?;
        let traces = block_traces(sigma, &partition);
        max_j = max_j.max(record.j_left.abs()).max(record.j_right.abs());
        trace_drift = trace_drift.max((trace(sigma).re - n0).abs() / n0.max(1.0));
        herm_drift = herm_drift.max(hermiticity_defect_max(sigma));
        if step % every == 0 || step == pcfg.n_steps {
            idem_drift = idem_drift.max(((sigma * sigma - sigma).norm() - idempotent0).abs());
            traj.row(t, traces)?;
            diss.row(&DissipationRow::from_record(&record, traces[1]))?;
            if let Some(dump) = dump.as_mut() {
                dump.push(sigma)?;
            }
        }
        if step == pcfg.n_steps {
            last = Some((record.j_left, record.j_right));
        }
        sigma_d.push(
            sigma
                .view((d.start, d.start), (d.len(), d.len()))
                .into_owned(),
        );
        log.records.push(record);
        Ok(())
    })?;
    traj.finish()?;
    diss.finish()?;
    if let Some(dump) = dump {
        dump.finish()?;
    }
    write_replay_log(
        create_buffered(&art.path(".qlog"))?,
        &log,
        &sigma_d,
        &meta.fingerprint,
    )?;

    warnings.extend(meta.warnings.iter().cloned());
    if herm_drift > 1e-10 {
        warnings.push(format!("Hermiticity drift {herm_drift:.3e} exceeds 1e-10"));
    }
    let (jl, jr) = last.expect("final step observed");
    summary.num("final J_L", jl);
    summary.num("final J_R", jr);
    summary.num("max |J|", max_j);
    summary.num("trace drift (relative)", trace_drift);
    summary.num("Hermiticity drift", herm_drift);
    summary.num("idempotency drift", idem_drift);
    summary.num("recurrence time", system.recurrence_time());
    summary.text("fingerprint", meta.fingerprint.clone());
    Ok(json!({ "integrator": meta.integrator, "dt": meta.dt, "n_steps": meta.n_steps }))
}

fn run_reduced(
    config: &RunConfig,
    opts: &RunOptions,
    art: &mut Artifacts,
    summary: &mut Summary,
    warnings: &mut Vec<String>,
) -> Result<serde_json::Value> {
    let system = build_system(config.system.as_ref().expect("validated"))?;
    let pcfg = config.propagation.expect("validated");
    let rcfg = config.reduced.as_ref().expect("validated");
    let profile = config.bias.unwrap_or_default();
    let sigma0 = initial_state(config, &system)?;
    let partition = *system.partition();
    let d = partition.device();
    let sigma_d0 = sigma0
        .view((d.start, d.start), (d.len(), d.len()))
        .into_owned();

    let mut oracle = None;
    let functional = match rcfg.functional {
        FunctionalKind::Isolated => DissipationFunctional::Isolated,
        FunctionalKind::ExactReplay => {
            let path = rcfg.replay_log.as_ref().expect("validated");
            let replay = read_replay_log_file(path)?;
            if replay.fingerprint != system.fingerprint() {
                return Err(invalid(
                    "reduced.replay_log",
                    format!(
                        "log was produced by system {}, not {}",
                        replay.fingerprint,
                        system.fingerprint()
                    ),
                ));
            }
            oracle = Some(replay.sigma_d);
            DissipationFunctional::ExactReplay(replay.log)
        }
        FunctionalKind::WideBand => {
            let mut wb = WideBand::adjacent(d.len(), rcfg.gamma, rcfg.mu_left, rcfg.mu_right);
            wb.refresh_every = rcfg.refresh_every;
            DissipationFunctional::WideBand(wb)
        }
    };
    let params = propagation_params(&pcfg, opts);
    let run = propagate_reduced(&sigma_d0, &system, &profile, &functional, &params)?;
    warnings.extend(run.trajectory.meta.warnings.iter().cloned());

    // Lead occupations follow from the currents: d tr σ_α / dt = -J_α.
    let lead0 = [Lead::Left, Lead::Right].map(|l| {
        let r = partition.lead(l);
        (r.start..r.end).map(|i| sigma0[(i, i)].re).sum::<f64>()
    });
    let mut lead = lead0;
    let mut traj = TrajectoryCsv::new(create_buffered(&art.path(".csv"))?, Some(run.mode))?;
    let mut diss = DissipationCsv::new(create_buffered(&art.path(".dissipation.csv"))?)?;
    let mut max_j = 0.0f64;
    for (k, (sigma, c)) in run
        .trajectory
        .matrices
        .iter()
        .zip(&run.currents)
        .enumerate()
    {
        if k > 0 {
            let prev = &run.currents[k - 1];
            lead[0] -= 0.5 * pcfg.dt * (prev.j_left + c.j_left);
            lead[1] -= 0.5 * pcfg.dt * (prev.j_right + c.j_right);
        }
        max_j = max_j.max(c.j_left.abs()).max(c.j_right.abs());
        if k % pcfg.output_every == 0 || k == pcfg.n_steps {
            let tr_d = trace(sigma).re;
            traj.row(c.t, [lead[0], tr_d, lead[1]])?;
            diss.row(&DissipationRow {
                t: c.t,
                j_left: c.j_left,
                j_right: c.j_right,
                tr_sigma_d: tr_d,
                q_left_norm: c.q_left_norm,
                q_right_norm: c.q_right_norm,
            })?;
        }
    }
    traj.finish()?;
    diss.finish()?;

    let last = run.currents.last().expect("at least one sample");
    summary.text("functional", run.mode);
    summary.num("final J_L", last.j_left);
    summary.num("final J_R", last.j_right);
    summary.num("max |J|", max_j);
    summary.num(
        "final tr sigma_D",
        trace(run.trajectory.last().expect("stored")).re,
    );
    if let Some(oracle) = oracle {
        let dev = run
            .trajectory
            .matrices
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        summary.num("max sigma_D deviation", dev);
    }
    Ok(
        json!({ "integrator": run.trajectory.meta.integrator, "dt": pcfg.dt, "n_steps": pcfg.n_steps }),
    )
}

fn run_landauer(
    config: &RunConfig,
    opts: &RunOptions,
    art: &mut Artifacts,
    summary: &mut Summary,
    warnings: &mut Vec<String>,
) -> Result<serde_json::Value> {
    let system = build_system(config.system.as_ref().expect("validated"))?;
    let lcfg = config.landauer.as_ref().expect("validated");
    let sigma0 = if lcfg.transient {
        Some(initial_state(config, &system)?)
    } else {
        None
    };
    let t_rec = system.recurrence_time();
    let window = (t_rec / 3.0, 2.0 * t_rec / 3.0);
    if let Some(p) = &config.propagation {
        if lcfg.transient && p.dt * p.n_steps as f64 + 1e-12 < window.1 {
            return Err(invalid(
                "propagation.n_steps",
                format!(
                    "run ends before the averaging window closes at t = {:.3}",
                    window.1
                ),
            ));
        }
    }

    let points = lcfg
        .biases
        .par_iter()
        .map(|&bias| {
            let oracle = landauer_current(&system, bias, lcfg.mu)?;
            let transient = match (&sigma0, &config.propagation) {
                (Some(s0), Some(p)) => {
                    let params = propagation_params(p, opts);
                    let profile = BiasProfile::symmetric_step(bias);
                    Some(transient_plateau_current(
                        &system, &profile, s0, &params, window,
                    )?)
                }
                _ => None,
            };
            Ok((bias, oracle, transient))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(create_buffered(&art.path(".csv"))?);
    w.write_record([
        "bias",
        "landauer_current",
        "transient_current",
        "relative_difference",
    ])?;
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for (bias, oracle, transient) in &points {
        warnings.extend(oracle.warnings.iter().cloned());
        let (tc, rel) = match transient {
            Some(p) => {
                let rel = (p.through - oracle.current).abs()
                    / oracle.current.abs().max(f64::MIN_POSITIVE);
                worst = worst.max(rel);
                (fmt_f64(p.through), fmt_f64(rel))
            }
            None => (String::new(), String::new()),
        };
        w.write_record([fmt_f64(*bias), fmt_f64(oracle.current), tc, rel])?;
        rows.push(json!({ "bias": bias, "landauer": oracle, "transient": transient }));
    }
    w.flush()?;
    for (bias, oracle, _) in &points {
        summary.num(&format!("Landauer current at V = {bias}"), oracle.current);
    }
    if lcfg.transient {
        summary.num("max relative difference", worst);
    }
    Ok(json!({ "window": window, "points": rows }))
}

fn target_grid(path: &str, t: &TargetConfig) -> Result<Grid> {
    Grid::spanning(&t.lower, &t.upper, &t.counts).map_err(|e| invalid(path, e))
}

fn walk_params(w: &WalkConfig) -> ContinuationParams {
    let mut p = ContinuationParams::new(w.order, w.step_fraction);
    p.fit.method = w.method;
    p.safety = w.safety;
    p.exclusions = w.exclusions.clone();
    p
}

/// One segment from the centre of D to the corner of U furthest from it.
fn default_path(samples: &SampledFunction, target: &Grid) -> Vec<Vec<f64>> {
    let dom = samples.domain();
    let centre: Vec<f64> = dom
        .lower
        .iter()
        .zip(&dom.upper)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let u = target.bounds();
    let far: Vec<f64> = (0..centre.len())
        .map(|i| {
            if (u.lower[i] - centre[i]).abs() > (u.upper[i] - centre[i]).abs() {
                u.lower[i]
            } else {
                u.upper[i]
            }
        })
        .collect();
    vec![centre, far]
}

fn restrict(samples: SampledFunction, lower: &[f64], upper: &[f64]) -> Result<SampledFunction> {
    let rows: Vec<(Vec<f64>, f64)> = samples
        .rows()
        .filter(|(x, _)| {
            x.iter()
                .zip(lower.iter().zip(upper))
                .all(|(xi, (a, b))| *xi >= a - 1e-12 && *xi <= b + 1e-12)
        })
        .collect();
    SampledFunction::from_nodes(&rows)
}

fn run_continue(
    config: &RunConfig,
    art: &mut Artifacts,
    summary: &mut Summary,
) -> Result<serde_json::Value> {
    let c = config.continuation.as_ref().expect("validated");
    let mut samples = read_samples_file(&c.input)?;
    if let (Some(lo), Some(hi)) = (&c.from_lower, &c.from_upper) {
        samples = restrict(samples, lo, hi)?;
    }
    let target = target_grid("continue.target", &c.target)?;
    let paths = if c.walk.paths.is_empty() {
        vec![default_path(&samples, &target)]
    } else {
        c.walk.paths.clone()
    };
    let result = continue_along_paths(&samples, &target, &paths, &walk_params(&c.walk))?;
    write_samples(create_buffered(&art.path(".csv"))?, &result.values)?;

    summary.num("expansions", result.steps.len() as f64);
    if let Some(first) = result.steps.first() {
        summary.num("initial radius estimate", first.radius);
    }
    if let Some(reference) = &c.reference {
        let reference = read_samples_file(reference)?;
        let err = result.values.max_abs_diff(&reference)?;
        let scale = reference.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        summary.num("max abs error", err);
        summary.num("max relative error", err / scale.max(f64::MIN_POSITIVE));
    }
    Ok(json!({ "paths": paths, "steps": result.steps }))
}

fn run_certify(config: &RunConfig, summary: &mut Summary) -> Result<serde_json::Value> {
    let c = config.certify.as_ref().expect("validated");
    let f = read_samples_file(&c.input_a)?;
    let g = read_samples_file(&c.input_b)?;
    let target = target_grid("certify.target", &c.target)?;
    let paths = if c.walk.paths.is_empty() {
        vec![default_path(&f, &target)]
    } else {
        c.walk.paths.clone()
    };
    let report = certify_uniqueness(&f, &g, &target, &paths, &walk_params(&c.walk), c.tol_agree)?;
    summary.num("max difference on D", report.max_diff_on_d);
    match report.max_diff_on_u {
        Some(u) => {
            summary.num("max difference on U", u);
            summary.text("certified", if u < c.tol_u { "yes" } else { "no" });
        }
        None => summary.text("certified", "no (samples differ on D)"),
    }
    Ok(json!({ "paths": paths, "tol_u": c.tol_u, "uniqueness": report }))
}

fn run_rg(
    config: &RunConfig,
    art: &mut Artifacts,
    summary: &mut Summary,
    warnings: &mut Vec<String>,
) -> Result<serde_json::Value> {
    let r = config.rg_check.as_ref().expect("validated");
    let bench = HarmonicBenchmark {
        half_width: r.half_width,
        epsilon: r.epsilon,
        gauge: r.gauge,
        subinterval: r.subinterval.map(|[a, b]| (a, b)),
        k: r.k,
    };
    let report = bench.run(r.dx, r.dt)?;
    warnings.extend(report.warnings.iter().cloned());
    let mut w = csv::Writer::from_writer(create_buffered(&art.path(".csv"))?);
    w.write_record(["x", "lhs", "div_u"])?;
    for ((x, a), b) in report.x.iter().zip(&report.lhs).zip(&report.div_u) {
        w.write_record([fmt_f64(*x), fmt_f64(*a), fmt_f64(*b)])?;
    }
    w.flush()?;

    summary.num("relative residual", report.relative_residual);
    summary.num(
        "flipped-sign relative residual",
        report.flipped_relative_residual,
    );
    summary.num("norm drift", report.norm_drift);
    if let Some(sub) = &report.subinterval {
        summary.num("max |div u| on subinterval", sub.max_div_u);
        summary.text(
            "div u nonzero on subinterval",
            if sub.div_u_nonzero { "yes" } else { "no" },
        );
    }
    let ladder = if r.ladder.len() >= 2 {
        let levels: Vec<(f64, f64)> = r.ladder.iter().map(|&[dx, dt]| (dx, dt)).collect();
        let ladder = refinement_ladder(&bench, &levels)?;
        summary.num("fitted convergence order", ladder.fitted_order);
        Some(ladder)
    } else {
        None
    };
    Ok(json!({ "report": report, "ladder": ladder }))
}

/// Per-column maximum deviation of two CSV tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub columns: Vec<(String, f64)>,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Rows compared (common grid times).
    pub rows: usize,
}

/// Compares every numeric column except `t`. Time grids must be equal, or
/// one must refine the other by an integer factor, in which case the common
/// times are compared.
pub fn compare_trajectories(file_a: &Path, file_b: &Path, tolerance: f64) -> Result<CompareReport> {
    let a = read_numeric_csv_file(file_a)?;
    let b = read_numeric_csv_file(file_b)?;
    if a.headers != b.headers {
        return Err(Error::InvalidInput(format!(
            "column sets differ: {:?} vs {:?}",
            a.headers, b.headers
        )));
    }
    let ta = a
        .column("t")
        .ok_or_else(|| Error::InvalidInput("no 't' column".into()))?;
    let tb = b
        .column("t")
        .ok_or_else(|| Error::InvalidInput("no 't' column".into()))?;
    let (coarse, fine, a_is_coarse) = if ta.len() <= tb.len() {
        (ta, tb, true)
    } else {
        (tb, ta, false)
    };
    if coarse.is_empty() {
        return Err(Error::GridMismatch("empty table".into()));
    }
    let factor = if coarse.len() == 1 {
        1
    } else if (fine.len() - 1) % (coarse.len() - 1) == 0 {
        (fine.len() - 1) / (coarse.len() - 1)
    } else {
        return Err(Error::GridMismatch(format!(
            "{} and {} rows are not nested grids",
            ta.len(),
            tb.len()
        )));
    };
    let span = coarse
        .iter()
        .chain(fine)
        .fold(0.0f64, |m, t| m.max(t.abs()))
        .max(1.0);
    for (k, tc) in coarse.iter().enumerate() {
        let tf = fine[k * factor];
        if (tc - tf).abs() > 1e-9 * span {
            return Err(Error::GridMismatch(format!("row {k}: t = {tc} vs {tf}")));
        }
    }
    let mut columns = Vec::new();
    let mut max_deviation = 0.0f64;
    for (name, col_a) in a.headers.iter().zip(&a.columns) {
        if name == "t" {
            continue;
        }
        let col_b = b.column(name).expect("same headers");
        let (c, f) = if a_is_coarse {
            (&col_a[..], col_b)
        } else {
            (col_b, &col_a[..])
        };
        let dev = (0..coarse.len()).fold(0.0f64, |m, k| m.max((c[k] - f[k * factor]).abs()));
        max_deviation = max_deviation.max(dev);
        columns.push((name.clone(), dev));
    }
    Ok(CompareReport {
        columns,
        max_deviation,
        tolerance,
        pass: max_deviation <= tolerance,
        rows: coarse.len(),
    })
}

/// Parses `1/64`, `0.5` or `-3e-2`.
pub fn parse_number(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| format!("bad number '{s}'"))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| format!("bad number '{s}'"))?;
        return Ok(n / d);
    }
    s.parse().map_err(|_| format!("bad number '{s}'"))
}

/// Parses a box `lo:hi[,lo:hi...]`, one interval per axis.
pub fn parse_box(s: &str) -> std::result::Result<(Vec<f64>, Vec<f64>), String> {
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for part in s.split(',') {
        let (a, b) = part
            .split_once(':')
            .ok_or_else(|| format!("box axis '{part}' is not of the form lo:hi"))?;
        lower.push(parse_number(a)?);
        upper.push(parse_number(b)?);
    }
    Ok((lower, upper))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_toml(dir: &Path) -> String {
        format!(
            r#"
mode = "transport-full"
output_dir = "{}"

[system]
n_left = 6
n_device = 2
n_right = 6

[propagation]
dt = 0.01
n_steps = 50
integrator = "crank-nicolson"
"#,
            dir.display()
        )
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err =
            RunConfig::from_toml("mode = \"rg-check\"\nbogus = 1\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err =
            RunConfig::from_toml("mode = \"rg-check\"\n[rg_check]\ndx2 = 1\n", Path::new("."))
                .unwrap_err();
        assert!(err.to_string().contains("dx2"), "{err}");
    }

    #[test]
    fn errors_carry_field_paths() {
        let text = "mode = \"transport-full\"\n[system]\nn_left = 2\nn_device = 2\nn_right = 2\n[propagation]\ndt = -1\nn_steps = 3\n";
        let err = RunConfig::from_toml(text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("propagation.dt"), "{err}");
        assert_eq!(err.exit_code(), 2);

        let text = "mode = \"transport-full\"\n[system]\nn_left = 2\nn_device = 2\nn_right = 2\n";
        let err = RunConfig::from_toml(text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("propagation"), "{err}");

        let err = RunConfig::from_toml(
            "mode = \"rg-check\"\ndeterministic = false\n",
            Path::new("."),
        )
        .unwrap_err();
        assert!(err.to_string().contains("deterministic"), "{err}");
    }

    #[test]
    fn foreign_blocks_and_missing_files_are_rejected() {
        let text = "mode = \"rg-check\"\n[landauer]\nbiases = [0.1]\n";
        let err = RunConfig::from_toml(text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("landauer"), "{err}");
        let text = "mode = \"continue\"\n[continue]\ninput = \"no-such-file.csv\"\n[continue.target]\nlower=[1.0]\nupper=[2.0]\ncounts=[5]\n";
        let err = RunConfig::from_toml(text, Path::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("continue.input"), "{err}");
    }

    #[test]
    fn hash_depends_on_content_only() {
        let dir = Path::new("/tmp/x");
        let a = RunConfig::from_toml(&full_toml(dir), Path::new(".")).unwrap();
        let b = RunConfig::from_toml(&format!("# comment\n{}", full_toml(dir)), Path::new("."))
            .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_toml(
            &full_toml(dir).replace("n_steps = 50", "n_steps = 51"),
            Path::new("."),
        )
        .unwrap();
        assert_ne!(a.hash(), c.hash());
        assert!(a.artifact_stem().starts_with("transport-full-"));
    }

    #[test]
    fn number_and_box_parsing() {
        assert_eq!(parse_number("1/64").unwrap(), 1.0 / 64.0);
        assert_eq!(parse_number(" -2.5e-1 ").unwrap(), -0.25);
        assert!(parse_number("x").is_err());
        assert_eq!(
            parse_box("0:1,1/2:2").unwrap(),
            (vec![0.0, 0.5], vec![1.0, 2.0])
        );
        assert!(parse_box("0-1").is_err());
    }

    #[test]
    fn compare_nested_grids() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "t,y,mode\n0,1,x\n1,2,x\n").unwrap();
        std::fs::write(&b, "t,y,mode\n0,1,x\n0.5,7,x\n1,2.5,x\n").unwrap();
        let r = compare_trajectories(&a, &b, 0.1).unwrap();
        assert_eq!(r.rows, 2);
        assert_eq!(r.columns, vec![("y".to_string(), 0.5)]);
        assert!(!r.pass);
        let same = compare_trajectories(&a, &a, 0.0).unwrap();
        assert_eq!(same.max_deviation, 0.0);
        assert!(same.pass);
        std::fs::write(&b, "t,y\n0,1\n0.4,1\n0.8,2\n").unwrap();
        assert!(compare_trajectories(&a, &b, 0.1).is_err());
    }
}
