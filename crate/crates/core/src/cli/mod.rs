//! Command-line front end: TOML run configs, pipeline execution and artifact
//! emission.
//!
//! Exit codes: 0 all checks pass, 2 a check failed, 3 a construction step
//! failed, 4 the configuration is invalid.

pub mod expr;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Deserialize;
use thiserror::Error;

use crate::kfun::{ComparisonClass, MonotoneScalarFn};
use crate::lyap::LyapunovCertificate;
use crate::sys::{catalog, list_catalog, DisturbanceSet, DisturbedSystem, SysError, Trajectory};
use crate::verify::{
    pipeline_flow_normal_form, pipeline_ises_to_hinf, pipeline_iss_to_ises, pipeline_ugas_to_uges,
    Alpha4Choice, IsesSystem, PipelineOptions, PipelineReport, VerifyError,
};
use crate::xform::{change_table, CoordinateChange, InputChange};
use expr::{parse, Expr, Scope, Var};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_CONSTRUCTION: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("construction error: {0}")]
    Construction(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Construction(_) => EXIT_CONSTRUCTION,
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::InvalidSpec(_) => CliError::Config(e.to_string()),
            other => CliError::Construction(other.to_string()),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Config schema

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    Ugas2uges,
    Iss2ises,
    Ises2hinf,
    Flownorm,
}

impl PipelineKind {
    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::Ugas2uges => "ugas2uges",
            PipelineKind::Iss2ises => "iss2ises",
            PipelineKind::Ises2hinf => "ises2hinf",
            PipelineKind::Flownorm => "flownorm",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineKind,
    pub system: SystemSpec,
    #[serde(default)]
    pub certificate: Option<CertificateSpec>,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default)]
    pub outputs: Outputs,
}

/// Either `catalog = "<name>"` or an inline right-hand side.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub catalog: Option<String>,
    pub name: Option<String>,
    /// One expression per state component in `x1..xn`, `d1..dm`.
    pub rhs: Option<Vec<String>>,
    /// Number of disturbance inputs `m`.
    #[serde(default)]
    pub inputs: usize,
    /// Radius of the disturbance ball; unbounded when omitted.
    pub disturbance_radius: Option<f64>,
}

/// A catalog certificate, an inline `V`, or a catalog certificate with some
/// comparison functions replaced. Functions are expressions in `s`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    pub catalog: Option<String>,
    pub v: Option<String>,
    /// `α₁` in `L_f V ≤ −α₁(‖x‖)`.
    pub decay: Option<String>,
    /// `χ` in `‖x‖ ≥ χ(‖d‖) ⇒ L_f V ≤ −α₁(‖x‖)`.
    pub iss_gain: Option<String>,
    /// `α₂`, `α₃` with `α₂(‖x‖) ≤ V(x) ≤ α₃(‖x‖)`.
    pub lower: Option<String>,
    pub upper: Option<String>,
    /// For `ises2hinf`: the system is already ISES with `c = λ = 1` and this gain.
    pub ises_gain: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// `"identity"` or an expression in `s`.
    pub gamma: Option<String>,
    /// `"auto"` or `"integral"`.
    pub alpha4: Option<String>,
    pub level: Option<f64>,
    pub c: Option<f64>,
    pub lambda: Option<f64>,
    pub tol: Option<f64>,
    pub slack: Option<f64>,
    pub seed: Option<u64>,
    pub signals: Option<usize>,
    pub t_end: Option<f64>,
    pub mean_dwell: Option<f64>,
    pub y0_min: Option<f64>,
    pub y0_max: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// Radii per direction in `change_table.csv`.
    #[serde(default = "default_table_points")]
    pub table_points: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_table_points() -> usize {
    9
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            table_points: default_table_points(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed for disturbance signals.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Integration tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Number of simulated signals.
    #[arg(long)]
    pub signals: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply_flags(&mut self, flags: &RunFlags) {
        if let Some(o) = &flags.out {
            self.outputs.dir = o.clone();
        }
        if flags.seed.is_some() {
            self.overrides.seed = flags.seed;
        }
        if flags.tol.is_some() {
            self.overrides.tol = flags.tol;
        }
        if flags.signals.is_some() {
            self.overrides.signals = flags.signals;
        }
    }
}

// ---------------------------------------------------------------------------
// Building library objects from the config

pub fn scalar_fn(name: &str, src: &str) -> Result<MonotoneScalarFn, CliError> {
    if src.trim() == "identity" {
        return Ok(MonotoneScalarFn::identity());
    }
    let e = Arc::new(parse(src, Scope::scalar()).map_err(|e| config_err(format!("{name}: {e}")))?);
    let de = Arc::new(e.diff(Var::S));
    let f = MonotoneScalarFn::new(format!("{name}(s) = {}", src.trim()), ComparisonClass::KInfinity, move |s| {
        e.eval(&[], &[], s)
    })
    .with_derivative(move |s| de.eval(&[], &[], s));
    if !(f.eval(0.0).abs() < 1e-12) || !(f.eval(1.0) > 0.0) {
        return Err(config_err(format!("{name}: '{src}' is not a comparison function (need f(0) = 0, f(1) > 0)")));
    }
    Ok(f)
}

pub fn inline_system(spec: &SystemSpec) -> Result<DisturbedSystem, CliError> {
    let rhs = spec.rhs.as_ref().ok_or_else(|| config_err("system needs 'catalog' or 'rhs'"))?;
    let n = rhs.len();
    if n == 0 {
        return Err(config_err("system.rhs is empty"));
    }
    let m = spec.inputs;
    let exprs: Vec<Expr> = rhs
        .iter()
        .map(|s| parse(s, Scope::state(n, m)).map_err(|e| config_err(format!("system.rhs: {e}"))))
        .collect::<Result<_, _>>()?;
    let set = match (m, spec.disturbance_radius) {
        (0, _) => DisturbanceSet::Ball(0.0),
        (_, Some(r)) if r >= 0.0 => DisturbanceSet::Ball(r),
        (_, Some(r)) => return Err(config_err(format!("disturbance_radius {r} is negative"))),
        (_, None) => DisturbanceSet::Unbounded,
    };
    let name = spec.name.clone().unwrap_or_else(|| "inline".into());
    Ok(DisturbedSystem::new(name, n, m, set, move |x, d| {
        DVector::from_iterator(n, exprs.iter().map(|e| e.eval(x.as_slice(), d.as_slice(), 0.0)))
    }))
}

pub fn inline_certificate(src: &str, n: usize) -> Result<LyapunovCertificate, CliError> {
    let v = parse(src, Scope::state(n, 0)).map_err(|e| config_err(format!("certificate.v: {e}")))?;
    let grad: Vec<Expr> = (0..n).map(|i| v.diff(Var::X(i))).collect();
    Ok(LyapunovCertificate::new(format!("V = {}", src.trim()), n, move |x| v.eval(x.as_slice(), &[], 0.0))
        .with_gradient(move |x| DVector::from_iterator(n, grad.iter().map(|g| g.eval(x.as_slice(), &[], 0.0)))))
}

fn catalog_entry(name: &str) -> Result<crate::sys::CatalogEntry, CliError> {
    catalog(name).map_err(|e: SysError| config_err(e.to_string()))
}

/// The system and certificate a config describes.
pub fn resolve(cfg: &RunConfig) -> Result<(DisturbedSystem, LyapunovCertificate), CliError> {
    let system = match (&cfg.system.catalog, &cfg.system.rhs) {
        (Some(_), Some(_)) => return Err(config_err("system: give either 'catalog' or 'rhs', not both")),
        (Some(name), None) => catalog_entry(name)?.system,
        (None, _) => inline_system(&cfg.system)?,
    };
    let spec = cfg.certificate.clone().unwrap_or_default();
    let mut cert = match (&spec.catalog, &spec.v, &cfg.system.catalog) {
        (Some(_), Some(_), _) => return Err(config_err("certificate: give either 'catalog' or 'v', not both")),
        (Some(name), None, _) | (None, None, Some(name)) => catalog_entry(name)?.certificate,
        (None, Some(v), _) => inline_certificate(v, system.dim_x())?,
        (None, None, None) => return Err(config_err("inline system needs a certificate (catalog or v)")),
    };
    if cert.dim() != system.dim_x() {
        return Err(config_err(format!(
            "certificate dimension {} differs from system dimension {}",
            cert.dim(),
            system.dim_x()
        )));
    }
    if let Some(s) = &spec.decay {
        cert.decay = Some(scalar_fn("decay", s)?);
    }
    if let Some(s) = &spec.iss_gain {
        cert.iss_gain = Some(scalar_fn("iss_gain", s)?);
    }
    match (&spec.lower, &spec.upper) {
        (Some(lo), Some(hi)) => cert.bounds = Some((scalar_fn("lower", lo)?, scalar_fn("upper", hi)?)),
        (None, None) => {}
        _ => return Err(config_err("certificate: 'lower' and 'upper' go together")),
    }
    Ok((system, cert))
}

fn options(cfg: &RunConfig) -> Result<PipelineOptions, CliError> {
    let o = &cfg.overrides;
    let mut opts = PipelineOptions::default();
    if let Some(g) = &o.gamma {
        opts.gamma = Some(scalar_fn("gamma", g)?);
    }
    if let Some(a) = &o.alpha4 {
        opts.alpha4 = match a.as_str() {
            "auto" => Alpha4Choice::Auto,
            "integral" => Alpha4Choice::Integral,
            other => return Err(config_err(format!("alpha4 must be 'auto' or 'integral', got '{other}'"))),
        };
    }
    let positive = |name: &str, v: Option<f64>, slot: &mut f64| -> Result<(), CliError> {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive and finite, got {v}")));
            }
            *slot = v;
        }
        Ok(())
    };
    positive("level", o.level, &mut opts.level)?;
    positive("c", o.c, &mut opts.c_bound)?;
    positive("lambda", o.lambda, &mut opts.lambda)?;
    positive("tol", o.tol, &mut opts.tol)?;
    positive("t_end", o.t_end, &mut opts.t_end)?;
    positive("mean_dwell", o.mean_dwell, &mut opts.mean_dwell)?;
    positive("y0_min", o.y0_min, &mut opts.y0_range.0)?;
    positive("y0_max", o.y0_max, &mut opts.y0_range.1)?;
    if let Some(s) = o.slack {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(config_err(format!("slack must be nonnegative, got {s}")));
        }
        opts.slack = s;
    }
    if opts.y0_range.0 > opts.y0_range.1 {
        return Err(config_err("y0_min exceeds y0_max"));
    }
    if let Some(s) = o.seed {
        opts.seed = s;
    }
    if let Some(n) = o.signals {
        if n == 0 {
            return Err(config_err("signals must be at least 1"));
        }
        opts.signals = n;
    }
    Ok(opts)
}

/// Checks that the certificate carries what the chosen pipeline needs.
pub fn validate(
    kind: PipelineKind,
    system: &DisturbedSystem,
    cert: &LyapunovCertificate,
    has_ises_gain: bool,
) -> Result<(), CliError> {
    match kind {
        PipelineKind::Ugas2uges | PipelineKind::Flownorm if cert.decay.is_none() => {
            Err(config_err(format!("pipeline {} needs a certificate decay rate", kind.name())))
        }
        PipelineKind::Flownorm if system.dim_d() > 0 => Err(config_err("flownorm needs a system without inputs")),
        PipelineKind::Iss2ises if cert.iss_gain.is_none() => {
            Err(config_err("pipeline iss2ises needs certificate.iss_gain"))
        }
        PipelineKind::Iss2ises | PipelineKind::Ises2hinf if system.dim_d() == 0 => {
            Err(config_err(format!("pipeline {} needs a system with inputs", kind.name())))
        }
        PipelineKind::Ises2hinf if !has_ises_gain && cert.iss_gain.is_none() => {
            Err(config_err("pipeline ises2hinf needs certificate.ises_gain or certificate.iss_gain"))
        }
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Running

/// Everything a run produced, before it is written out.
pub struct RunOutput {
    pub report: PipelineReport,
    pub trajectories: Vec<Trajectory>,
    pub change: Option<CoordinateChange>,
    pub input: Option<InputChange>,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.report.pass {
            EXIT_PASS
        } else {
            EXIT_CHECK_FAILED
        }
    }
}

/// Runs the configured pipeline without touching the filesystem.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let (system, cert) = resolve(cfg)?;
    let ises_gain = match cfg.certificate.as_ref().and_then(|c| c.ises_gain.as_ref()) {
        Some(g) => Some(scalar_fn("ises_gain", g)?),
        None => None,
    };
    let opts = options(cfg)?;
    run_pipeline(cfg.pipeline, system, &cert, &opts, ises_gain)
}

/// Validates and runs one pipeline. `ises_gain` marks the system as already
/// ISES for `ises2hinf`.
pub fn run_pipeline(
    kind: PipelineKind,
    system: DisturbedSystem,
    cert: &LyapunovCertificate,
    opts: &PipelineOptions,
    ises_gain: Option<MonotoneScalarFn>,
) -> Result<RunOutput, CliError> {
    validate(kind, &system, cert, ises_gain.is_some())?;
    Ok(match kind {
        PipelineKind::Ugas2uges => {
            let out = pipeline_ugas_to_uges(&system, cert, opts)?;
            RunOutput {
                report: out.report,
                trajectories: out.trajectories,
                change: Some(out.change),
                input: None,
            }
        }
        PipelineKind::Flownorm => {
            let out = pipeline_flow_normal_form(&system, cert, opts)?;
            RunOutput {
                report: out.report,
                trajectories: out.trajectories,
                change: Some(out.change),
                input: None,
            }
        }
        PipelineKind::Iss2ises => {
            let out = pipeline_iss_to_ises(&system, cert, opts)?;
            RunOutput {
                report: out.report,
                trajectories: out.trajectories,
                change: Some(out.change),
                input: None,
            }
        }
        PipelineKind::Ises2hinf => match ises_gain {
            Some(alpha) => {
                let ises = IsesSystem {
                    system,
                    alpha,
                    transport: None,
                };
                let out = pipeline_ises_to_hinf(&ises, opts)?;
                RunOutput {
                    report: out.report,
                    trajectories: out.trajectories,
                    change: None,
                    input: Some(out.input),
                }
            }
            None => {
                let first = pipeline_iss_to_ises(&system, cert, opts)?;
                let out = pipeline_ises_to_hinf(&first.ises_system(), opts)?;
                let mut report = out.report;
                for (k, v) in first.report.info {
                    report.info.entry(format!("iss2ises.{k}")).or_insert(v);
                }
                let mut checks = first.report.checks;
                checks.append(&mut report.checks);
                report.pass = checks.iter().all(|c| c.pass);
                report.checks = checks;
                RunOutput {
                    report,
                    trajectories: out.trajectories,
                    change: Some(first.change),
                    input: Some(out.input),
                }
            }
        },
    })
}

/// Points for `change_table.csv`: log-spaced radii along `±eᵢ` and the
/// diagonal.
fn table_points(n: usize, per_dir: usize) -> Vec<DVector<f64>> {
    let mut dirs = Vec::new();
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut e = DVector::zeros(n);
            e[i] = sign;
            dirs.push(e);
        }
    }
    if n > 1 {
        dirs.push(DVector::from_element(n, 1.0 / (n as f64).sqrt()));
    }
    let radii = crate::sampling::log_grid(1e-2, 1e2, per_dir.max(2));
    dirs.iter().flat_map(|u| radii.iter().map(move |r| u * *r)).collect()
}

fn identity_table(points: &[DVector<f64>]) -> String {
    let n = points.first().map_or(0, |p| p.len());
    let mut cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    cols.extend((1..=n).map(|i| format!("y{i}")));
    let mut out = cols.join(",") + "\n";
    for p in points {
        let row: Vec<String> = p.iter().chain(p.iter()).map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn input_table(input: &InputChange, m: usize, per_dir: usize) -> String {
    let mut cols: Vec<String> = (1..=m).map(|i| format!("d{i}")).collect();
    cols.extend((1..=m).map(|i| format!("v{i}")));
    let mut out = cols.join(",") + "\n";
    for d in table_points(m, per_dir) {
        let v = input.r(&d);
        let row: Vec<String> = d.iter().chain(v.iter()).map(|x| format!("{x:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))
}

/// Writes `report.txt`, `change_table.csv` (and `input_table.csv` for H∞
/// runs) and `trajectories/traj_NNN.csv` under `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path, per_dir: usize) -> Result<(), CliError> {
    let tdir = dir.join("trajectories");
    fs::create_dir_all(&tdir).map_err(|e| config_err(format!("cannot create {}: {e}", tdir.display())))?;
    // stale trajectories from an earlier, larger run would break byte-identical output
    if let Ok(entries) = fs::read_dir(&tdir) {
        for entry in entries.flatten() {
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name.starts_with("traj_") && name.ends_with(".csv") {
                let _ = fs::remove_file(entry.path());
            }
        }
    }
    for (i, tr) in out.trajectories.iter().enumerate() {
        write_file(&tdir.join(format!("traj_{i:03}.csv")), &tr.to_csv())?;
    }
    let n = out
        .trajectories
        .first()
        .map(|t| t.initial().len())
        .or_else(|| out.change.as_ref().map(|c| c.dim()))
        .unwrap_or(1);
    let points = table_points(n, per_dir);
    let table = match &out.change {
        Some(ch) => change_table(ch, &points).map_err(|e| CliError::Construction(e.to_string()))?,
        None => identity_table(&points),
    };
    write_file(&dir.join("change_table.csv"), &table)?;
    if let Some(input) = &out.input {
        let m = out
            .trajectories
            .iter()
            .find_map(|t| t.signal.as_ref().and_then(|s| s.values.first().map(|v| v.len())))
            .unwrap_or(1);
        write_file(&dir.join("input_table.csv"), &input_table(input, m, per_dir))?;
    }
    let text = out
        .report
        .to_text()
        .map_err(|e| CliError::Construction(format!("report serialization: {e}")))?;
    write_file(&dir.join("report.txt"), &text)
}

/// Loads, runs and writes; returns the process exit code. Diagnostics go to
/// `err`.
pub fn run(path: &Path, flags: &RunFlags, err: &mut dyn Write) -> i32 {
    let result = RunConfig::load(path).and_then(|mut cfg| {
        cfg.apply_flags(flags);
        let out = execute(&cfg)?;
        write_outputs(&out, &cfg.outputs.dir, cfg.outputs.table_points)?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            for c in &out.report.checks {
                let _ = writeln!(err, "{}", c.summary());
            }
            let _ = writeln!(err, "OVERALL: {}", if out.report.pass { "PASS" } else { "FAIL" });
            out.exit_code()
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// Catalog listing

/// Human-readable table, or tab-separated with a header when `machine`.
pub fn list_catalog_text(machine: bool) -> String {
    let rows = list_catalog();
    let yn = |b: bool| if b { "yes" } else { "no" };
    let mut out = String::new();
    if machine {
        out.push_str("name\tdim_x\tdim_d\tdecay\tiss_gain\tbounds\tdescription\n");
        for r in &rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.name,
                r.dim_x,
                r.dim_d,
                yn(r.has_decay),
                yn(r.has_iss_gain),
                yn(r.has_bounds),
                r.description
            ));
        }
    } else {
        out.push_str(&format!(
            "{:<14} {:>5} {:>5} {:>6} {:>8}  {}\n",
            "name", "dim_x", "dim_d", "decay", "iss_gain", "description"
        ));
        for r in &rows {
            out.push_str(&format!(
                "{:<14} {:>5} {:>5} {:>6} {:>8}  {}\n",
                r.name,
                r.dim_x,
                r.dim_d,
                yn(r.has_decay),
                yn(r.has_iss_gain),
                r.description
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "stabxform", version, about = "Stability-transforming changes of variables with sampled verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline described by a TOML config.
    Run {
        path: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// List the built-in systems.
    List {
        /// Tab-separated output with a header row.
        #[arg(long)]
        machine: bool,
    },
}

/// Entry point shared by the binary; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
        }
    };
    match cli.command {
        Command::Run { path, flags } => run(&path, &flags, &mut std::io::stderr()),
        Command::List { machine } => {
            print!("{}", list_catalog_text(machine));
            EXIT_PASS
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::from_toml(text).unwrap()
    }

    #[test]
    fn catalog_config_resolves() {
        let c = cfg("pipeline = \"ugas2uges\"\n[system]\ncatalog = \"halfspeed_1d\"\n");
        let (sys, cert) = resolve(&c).unwrap();
        assert_eq!(sys.dim_x(), 1);
        assert!(cert.decay.is_some());
    }

    #[test]
    fn inline_system_and_certificate() {
        let c = cfg(r#"
pipeline = "iss2ises"
[system]
rhs = ["-x1 + d1"]
inputs = 1
disturbance_radius = 1.0
[certificate]
v = "x1^2/2"
decay = "s^2/2"
iss_gain = "2*s"
"#);
        let (sys, cert) = resolve(&c).unwrap();
        let x = DVector::from_element(1, 2.0);
        let d = DVector::from_element(1, 0.5);
        assert_eq!(sys.rhs(&x, &d)[0], -1.5);
        assert_eq!(cert.value(&x), 2.0);
        assert_eq!(cert.gradient(&x)[0], 2.0);
        assert_eq!(cert.iss_gain.as_ref().unwrap().eval(3.0), 6.0);
        validate(c.pipeline, &sys, &cert, false).unwrap();
    }

    #[test]
    fn config_errors_map_to_exit_4() {
        let bad = [
            "pipeline = \"nope\"\n[system]\ncatalog = \"halfspeed_1d\"\n",
            "pipeline = \"ugas2uges\"\n[system]\ncatalog = \"no_such\"\n",
            "pipeline = \"ugas2uges\"\n[system]\nrhs = [\"-x2\"]\n[certificate]\nv = \"x1^2\"\ndecay = \"s^2\"\n",
            "pipeline = \"iss2ises\"\n[system]\ncatalog = \"halfspeed_1d\"\n",
            "pipeline = \"ugas2uges\"\n[system]\ncatalog = \"halfspeed_1d\"\n[overrides]\nlambda = -1.0\n",
            "pipeline = \"ugas2uges\"\n[system]\ncatalog = \"halfspeed_1d\"\nbogus = 1\n",
        ];
        for text in bad {
            let err = RunConfig::from_toml(text).and_then(|c| execute(&c).map(|_| ()));
            assert_eq!(err.unwrap_err().exit_code(), EXIT_CONFIG, "{text}");
        }
    }

    #[test]
    fn flags_override_config() {
        let mut c = cfg("pipeline = \"ugas2uges\"\n[system]\ncatalog = \"halfspeed_1d\"\n[overrides]\nseed = 3\n");
        c.apply_flags(&RunFlags {
            out: Some("elsewhere".into()),
            seed: Some(9),
            tol: None,
            signals: Some(4),
        });
        let o = options(&c).unwrap();
        assert_eq!((o.seed, o.signals), (9, 4));
        assert_eq!(c.outputs.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn listing_formats() {
        let human = list_catalog_text(false);
        for name in ["halfspeed_1d", "cubic_1d", "iss_scalar"] {
            assert!(human.contains(name));
        }
        let machine = list_catalog_text(true);
        let lines: Vec<&str> = machine.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines.iter().all(|l| l.split('\t').count() == 7));
        assert!(lines[1].starts_with("halfspeed_1d\t1\t0\t"));
    }

    #[test]
    fn table_points_layout() {
        assert_eq!(table_points(1, 5).len(), 10);
        assert_eq!(table_points(2, 5).len(), 25);
    }
}
