//! Sampled and simulated checks of the stability estimates, and the three
//! construction pipelines UGAS → UGES, ISS → ISES and ISES → H∞.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kfun::{
    make_alpha4, make_gamma, make_rho, monotone_envelope, ComparisonClass, EnvelopeSide,
    MonotoneScalarFn,
};
use crate::lyap::{
    check_certificate, estimate_l, GradientFlowConfig, LyapunovCertificate, SamplingPlan,
};
use crate::sampling::{cube_to_ball, halton, log_grid, sphere_directions};
use crate::sys::{
    make_disturbance, simulate, DisturbanceSet, DisturbanceSignal, DisturbanceSpec,
    DisturbedSystem, Trajectory,
};
use crate::xform::{
    build_change, flow_based_normal_form, input_change, pushforward, CoordinateChange, InputChange, SupSampler,
    TransformedSystem, WORKING_LEVELS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("trajectory {index} carries no disturbance signal")]
    MissingSignal { index: usize },
    #[error("invalid stability specification: {0}")]
    InvalidSpec(String),
    #[error("stage '{stage}': {message}")]
    Pipeline { stage: Stage, message: String },
}

/// Pipeline stage an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Certificate,
    Reparametrization,
    Gamma,
    Change,
    Delta,
    InputChange,
    Simulation,
    Check,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Certificate => "certificate",
            Stage::Reparametrization => "reparametrization",
            Stage::Gamma => "gamma",
            Stage::Change => "change",
            Stage::Delta => "delta",
            Stage::InputChange => "input-change",
            Stage::Simulation => "simulation",
            Stage::Check => "check",
        };
        f.write_str(s)
    }
}

fn stage<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> VerifyError {
    move |e| VerifyError::Pipeline {
        stage,
        message: e.to_string(),
    }
}

/// Which estimate a report checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityKind {
    #[serde(rename = "UGES")]
    Uges,
    #[serde(rename = "ISS-max")]
    IssMax,
    #[serde(rename = "ISES")]
    Ises,
    #[serde(rename = "HINF")]
    Hinf,
    #[serde(rename = "CONTRACTION")]
    Contraction,
    #[serde(rename = "GAIN-DECAY")]
    GainDecay,
    #[serde(rename = "DISSIPATION")]
    Dissipation,
    #[serde(rename = "COMMUTATION")]
    Commutation,
}

impl StabilityKind {
    pub fn label(&self) -> &'static str {
        match self {
            StabilityKind::Uges => "UGES",
            StabilityKind::IssMax => "ISS-max",
            StabilityKind::Ises => "ISES",
            StabilityKind::Hinf => "HINF",
            StabilityKind::Contraction => "CONTRACTION",
            StabilityKind::GainDecay => "GAIN-DECAY",
            StabilityKind::Dissipation => "DISSIPATION",
            StabilityKind::Commutation => "COMMUTATION",
        }
    }
}

/// Constants of the exponential envelope `c·e^{−λt}‖x‖` and the gain.
#[derive(Debug, Clone)]
pub struct StabilitySpec {
    pub kind: StabilityKind,
    pub c: f64,
    pub lambda: f64,
    pub alpha: Option<MonotoneScalarFn>,
    pub slack: f64,
}

impl StabilitySpec {
    pub fn new(kind: StabilityKind, c: f64, lambda: f64, slack: f64) -> Result<Self, VerifyError> {
        let spec = Self {
            kind,
            c,
            lambda,
            alpha: None,
            slack,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_alpha(mut self, alpha: MonotoneScalarFn) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        if !(self.c >= 1.0) {
            return Err(VerifyError::InvalidSpec(format!("c = {} must be at least 1", self.c)));
        }
        if !(self.lambda > 0.0) {
            return Err(VerifyError::InvalidSpec(format!("lambda = {} must be positive", self.lambda)));
        }
        if !(self.slack >= 0.0) {
            return Err(VerifyError::InvalidSpec("slack must be nonnegative".into()));
        }
        if let Some(a) = &self.alpha {
            validate_gain(a)?;
        }
        Ok(())
    }
}

/// Rejects gains that are not strictly increasing and positive on `[1e-6, 1e3]`.
fn validate_gain(alpha: &MonotoneScalarFn) -> Result<(), VerifyError> {
    let grid = log_grid(1e-6, 1e3, 64);
    if grid.iter().any(|&s| !(alpha.eval(s) > 0.0)) || alpha.monotonicity_violation(&grid).is_some() {
        return Err(VerifyError::InvalidSpec(format!(
            "gain '{}' is not of class K-infinity",
            alpha.name()
        )));
    }
    Ok(())
}

/// Location of the worst margin or residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub index: usize,
    pub value: f64,
    pub point: Vec<f64>,
    pub time: Option<f64>,
}

/// Outcome of one check. Trajectory checks store margins (pass iff every
/// margin ≤ 1 + slack); sample checks store normalized residuals (pass iff
/// every residual ≤ slack).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub kind: StabilityKind,
    pub stage: String,
    pub c: f64,
    pub lambda: f64,
    pub slack: f64,
    pub alpha: Option<String>,
    pub margins: Vec<f64>,
    pub residuals: Vec<f64>,
    pub skipped: usize,
    pub worst: Option<Witness>,
    pub pass: bool,
}

impl VerificationReport {
    fn margins(kind: StabilityKind, c: f64, lambda: f64, slack: f64, margins: Vec<f64>, worst: Option<Witness>) -> Self {
        let pass = margins.iter().all(|m| *m <= 1.0 + slack);
        Self {
            kind,
            stage: String::new(),
            c,
            lambda,
            slack,
            alpha: None,
            margins,
            residuals: Vec::new(),
            skipped: 0,
            worst,
            pass,
        }
    }

    fn residuals(kind: StabilityKind, slack: f64, residuals: Vec<f64>, skipped: usize, worst: Option<Witness>) -> Self {
        let pass = residuals.iter().all(|r| *r <= slack);
        Self {
            kind,
            stage: String::new(),
            c: 1.0,
            lambda: 1.0,
            slack,
            alpha: None,
            margins: Vec::new(),
            residuals,
            skipped,
            worst,
            pass,
        }
    }

    pub fn with_stage(mut self, stage: impl Into<String>) -> Self {
        self.stage = stage.into();
        self
    }

    pub fn worst_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn worst_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Combines two reports of the same kind (associative).
    pub fn merge(mut self, other: VerificationReport) -> VerificationReport {
        let offset_m = self.margins.len();
        let offset_r = self.residuals.len();
        let worse = match (&self.worst, &other.worst) {
            (None, _) => true,
            (Some(a), Some(b)) => b.value > a.value,
            (Some(_), None) => false,
        };
        if worse {
            self.worst = other.worst.map(|mut w| {
                w.index += if self.margins.is_empty() { offset_r } else { offset_m };
                w
            });
        }
        self.margins.extend(other.margins);
        self.residuals.extend(other.residuals);
        self.skipped += other.skipped;
        self.pass = self.pass && other.pass;
        self
    }

    /// One summary line, e.g. `UGES: PASS (worst margin 0.9990, 100 trajectories)`.
    pub fn summary(&self) -> String {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        if self.margins.is_empty() {
            format!(
                "{}: {verdict} (worst residual {:.4e}, {} samples, {} skipped)",
                self.kind.label(),
                self.worst_residual(),
                self.residuals.len(),
                self.skipped
            )
        } else {
            format!(
                "{}: {verdict} (worst margin {:.6}, {} trajectories)",
                self.kind.label(),
                self.worst_margin(),
                self.margins.len()
            )
        }
    }
}

fn worst_of(items: impl Iterator<Item = (usize, f64, Vec<f64>, Option<f64>)>) -> Option<Witness> {
    items
        .filter(|(_, v, _, _)| !v.is_nan())
        .fold(None, |acc: Option<Witness>, (index, value, point, time)| match acc {
            Some(w) if w.value >= value => Some(w),
            _ => Some(Witness {
                index,
                value,
                point,
                time,
            }),
        })
}

/// Replaces NaN (failed evaluation) by +∞ so it fails every bound.
fn nan_fails(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

// ---------------------------------------------------------------------------
// Trajectory checks

/// `max_t ‖x(t)‖ / (c·e^{−λt}‖x(0)‖)` per trajectory.
pub fn check_uges(trajs: &[Trajectory], c: f64, lambda: f64, slack: f64) -> VerificationReport {
    let per: Vec<(f64, f64)> = trajs
        .iter()
        .map(|tr| {
            let n0 = tr.initial().norm();
            if n0 == 0.0 {
                return (0.0, 0.0);
            }
            tr.times
                .iter()
                .zip(&tr.states)
                .map(|(t, x)| (nan_fails(x.norm() / (c * (-lambda * t).exp() * n0)), *t))
                .fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a })
        })
        .collect();
    let worst = worst_of(
        per.iter()
            .enumerate()
            .map(|(i, (m, t))| (i, *m, trajs[i].initial().iter().copied().collect(), Some(*t))),
    );
    VerificationReport::margins(StabilityKind::Uges, c, lambda, slack, per.into_iter().map(|p| p.0).collect(), worst)
}

/// `max_t ‖x(t)‖ / max{c·e^{−λt}‖x(0)‖, α(sup_{s≤t}‖d(s)‖)}` per trajectory.
pub fn check_ises(
    trajs: &[Trajectory],
    alpha: &MonotoneScalarFn,
    c: f64,
    lambda: f64,
    slack: f64,
) -> Result<VerificationReport, VerifyError> {
    validate_gain(alpha)?;
    let mut per = Vec::with_capacity(trajs.len());
    for (i, tr) in trajs.iter().enumerate() {
        let sig = tr.signal.as_ref().ok_or(VerifyError::MissingSignal { index: i })?;
        let n0 = tr.initial().norm();
        let mut best = (0.0, 0.0);
        for (t, x) in tr.times.iter().zip(&tr.states) {
            let sup = sig.sup_norm_until(*t);
            let gain = if sup > 0.0 { alpha.eval(sup) } else { 0.0 };
            let bound = (c * (-lambda * t).exp() * n0).max(gain);
            let nx = x.norm();
            let m = if nx == 0.0 { 0.0 } else { nan_fails(nx / bound) };
            if m > best.0 {
                best = (m, *t);
            }
        }
        per.push(best);
    }
    let worst = worst_of(
        per.iter()
            .enumerate()
            .map(|(i, (m, t))| (i, *m, trajs[i].initial().iter().copied().collect(), Some(*t))),
    );
    let mut rep = VerificationReport::margins(
        StabilityKind::Ises,
        c,
        lambda,
        slack,
        per.into_iter().map(|p| p.0).collect(),
        worst,
    );
    rep.alpha = Some(alpha.name().to_owned());
    Ok(rep)
}

/// `∫₀ᵗ‖v‖²` for a piecewise-constant signal, exactly.
fn signal_energy(sig: &DisturbanceSignal, t: f64) -> f64 {
    let mut acc = 0.0;
    let mut start = 0.0;
    for (k, v) in sig.values.iter().enumerate() {
        let end = sig.switch_times.get(k).copied().unwrap_or(f64::INFINITY).min(t);
        if end > start {
            acc += v.norm_squared() * (end - start);
        }
        if end >= t {
            break;
        }
        start = end;
    }
    acc
}

/// Residual `∫₀ᵗ‖x‖² − ‖x(0)‖² − ∫₀ᵗ‖v‖²` at every report time, divided by
/// `1 + ‖x(0)‖²`. The state integral uses the trapezoidal rule on the
/// report grid; the input integral is exact for piecewise-constant `v`.
pub fn check_hinf(trajs: &[Trajectory], slack: f64) -> Result<VerificationReport, VerifyError> {
    let mut residuals = Vec::with_capacity(trajs.len());
    let mut witnesses = Vec::with_capacity(trajs.len());
    for (i, tr) in trajs.iter().enumerate() {
        let sig = tr.signal.as_ref().ok_or(VerifyError::MissingSignal { index: i })?;
        let x0 = tr.initial().norm_squared();
        let scale = 1.0 + x0;
        let mut state_int = 0.0;
        let mut worst = (-x0 / scale, 0.0);
        for k in 1..tr.times.len() {
            let dt = tr.times[k] - tr.times[k - 1];
            state_int += 0.5 * dt * (tr.states[k - 1].norm_squared() + tr.states[k].norm_squared());
            let r = nan_fails((state_int - x0 - signal_energy(sig, tr.times[k])) / scale);
            if r > worst.0 {
                worst = (r, tr.times[k]);
            }
        }
        residuals.push(worst.0);
        witnesses.push((i, worst.0, tr.initial().iter().copied().collect(), Some(worst.1)));
    }
    let worst = worst_of(witnesses.into_iter());
    Ok(VerificationReport::residuals(StabilityKind::Hinf, slack, residuals, 0, worst))
}

/// Residual curve `t ↦ ∫₀ᵗ‖x‖² − ‖x(0)‖² − ∫₀ᵗ‖v‖²` of one trajectory.
pub fn hinf_residual_curve(tr: &Trajectory) -> Result<Vec<f64>, VerifyError> {
    let sig = tr.signal.as_ref().ok_or(VerifyError::MissingSignal { index: 0 })?;
    let x0 = tr.initial().norm_squared();
    let mut out = vec![-x0];
    let mut acc = 0.0;
    for k in 1..tr.times.len() {
        let dt = tr.times[k] - tr.times[k - 1];
        acc += 0.5 * dt * (tr.states[k - 1].norm_squared() + tr.states[k].norm_squared());
        out.push(acc - x0 - signal_energy(sig, tr.times[k]));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sample checks

/// Quasi-random `(y, d)` pairs: `‖y‖` log-uniform in `[y_min, y_max]`,
/// `d` in the ball of radius `d_radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSampler {
    pub count: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub d_radius: f64,
    pub offset: u64,
}

impl PairSampler {
    pub fn samples(&self, n: usize, m: usize) -> Vec<(DVector<f64>, DVector<f64>)> {
        let (lo, hi) = (self.y_min.ln(), self.y_max.ln());
        (0..self.count as u64)
            .map(|i| {
                let h = halton(i + 1 + self.offset, 1 + n + m);
                let r = (lo + (hi - lo) * h[0]).exp();
                let dir = if n == 1 {
                    DVector::from_element(1, if h[1] < 0.5 { -1.0 } else { 1.0 })
                } else {
                    let v = cube_to_ball(&h[1..1 + n]);
                    let nv = v.norm();
                    if nv > 0.0 {
                        v / nv
                    } else {
                        let mut e = DVector::zeros(n);
                        e[0] = 1.0;
                        e
                    }
                };
                let d = cube_to_ball(&h[1 + n..]) * self.d_radius;
                (dir * r, d)
            })
            .collect()
    }
}

/// `(⟨f̃(y,d), y⟩ + ‖y‖²)/‖y‖²` per sample.
pub fn check_contraction(
    system: &DisturbedSystem,
    samples: &[(DVector<f64>, DVector<f64>)],
    slack: f64,
) -> VerificationReport {
    let res: Vec<f64> = samples
        .par_iter()
        .map(|(y, d)| {
            let f = system.rhs(y, d);
            nan_fails((f.dot(y) + y.norm_squared()) / y.norm_squared())
        })
        .collect();
    let worst = worst_of(res.iter().enumerate().map(|(i, r)| (i, *r, samples[i].0.iter().copied().collect(), None)));
    VerificationReport::residuals(StabilityKind::Contraction, slack, res, 0, worst)
}

/// `(L_{f̃_d}W̃(y) + W̃(y))/W̃(y)` on samples with `‖y‖ > α̃(‖d‖)`; the others
/// are skipped and counted.
pub fn check_gain_decay(
    system: &DisturbedSystem,
    w: &LyapunovCertificate,
    alpha_tilde: &MonotoneScalarFn,
    samples: &[(DVector<f64>, DVector<f64>)],
    slack: f64,
) -> VerificationReport {
    let evals: Vec<Option<f64>> = samples
        .par_iter()
        .map(|(y, d)| {
            let nd = d.norm();
            let gain = if nd > 0.0 { alpha_tilde.eval(nd) } else { 0.0 };
            if y.norm() <= gain {
                return None;
            }
            let wv = w.value(y);
            let lw = w.directional(y, &system.rhs(y, d));
            Some(nan_fails((lw + wv) / wv))
        })
        .collect();
    let skipped = evals.iter().filter(|e| e.is_none()).count();
    let mut res = Vec::with_capacity(evals.len() - skipped);
    let mut wit = Vec::new();
    for (i, e) in evals.iter().enumerate() {
        if let Some(r) = e {
            wit.push((i, *r, samples[i].0.iter().copied().collect(), None));
            res.push(*r);
        }
    }
    let mut rep = VerificationReport::residuals(StabilityKind::GainDecay, slack, res, skipped, worst_of(wit.into_iter()));
    rep.alpha = Some(alpha_tilde.name().to_owned());
    rep
}

/// `(2⟨f̄(x,v),x⟩ + ‖x‖² − ‖v‖²)/(‖x‖² + ‖v‖²)` per sample.
pub fn check_dissipation(
    system: &DisturbedSystem,
    samples: &[(DVector<f64>, DVector<f64>)],
    slack: f64,
) -> VerificationReport {
    let res: Vec<f64> = samples
        .par_iter()
        .map(|(x, v)| {
            let f = system.rhs(x, v);
            let scale = x.norm_squared() + v.norm_squared();
            nan_fails((2.0 * f.dot(x) + x.norm_squared() - v.norm_squared()) / scale)
        })
        .collect();
    let worst = worst_of(res.iter().enumerate().map(|(i, r)| (i, *r, samples[i].0.iter().copied().collect(), None)));
    VerificationReport::residuals(StabilityKind::Dissipation, slack, res, 0, worst)
}

/// Relative deviation `‖a(t) − b(t)‖/‖b(t)‖` between paired trajectories
/// sampled on the same grid (e.g. direct simulation of `f̃` against `T∘φ`).
///
/// Each comparison stops once `b` first enters the ball of radius
/// [`COMMUTATION_FLOOR`]`·‖b(0)‖`. `T` is flat at the origin, so `f̃(0, d) = 0`
/// for every `d` and solutions of `f̃` through the origin are not unique.
pub fn check_commutation(direct: &[Trajectory], transported: &[Trajectory], slack: f64) -> VerificationReport {
    let mut res = Vec::with_capacity(direct.len());
    let mut wit = Vec::new();
    for (i, (a, b)) in direct.iter().zip(transported).enumerate() {
        let mut worst = (0.0, 0.0);
        let floor = COMMUTATION_FLOOR * b.initial().norm();
        for ((t, ya), yb) in a.times.iter().zip(&a.states).zip(&b.states) {
            if yb.norm() < floor {
                break;
            }
            let scale = yb.norm().max(1e-300);
            let r = nan_fails((ya - yb).norm() / scale);
            if r > worst.0 {
                worst = (r, *t);
            }
        }
        res.push(worst.0);
        wit.push((i, worst.0, a.initial().iter().copied().collect(), Some(worst.1)));
    }
    VerificationReport::residuals(StabilityKind::Commutation, slack, res, 0, worst_of(wit.into_iter()))
}

/// Sampling plan for [`estimate_delta`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSampler {
    pub radii: usize,
    pub directions: usize,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for DeltaSampler {
    fn default() -> Self {
        Self {
            radii: 48,
            directions: 64,
            y_min: 1e-4,
            y_max: 1e4,
        }
    }
}

/// Lower class-K∞ envelope δ with `‖T⁻¹(y)‖ ≥ δ(‖y‖)`: minimum over each
/// sampled sphere, then [`monotone_envelope`] from below.
pub fn estimate_delta(change: &CoordinateChange, sampler: &DeltaSampler) -> Result<MonotoneScalarFn, VerifyError> {
    let n = change.dim();
    let dirs = if n == 1 {
        vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)]
    } else {
        let mut d = crate::lyap::axis_directions(n);
        d.extend(sphere_directions(n, sampler.directions, 0));
        d
    };
    let radii = log_grid(sampler.y_min, sampler.y_max, sampler.radii);
    let samples: Vec<(f64, f64)> = radii
        .par_iter()
        .map(|&r| -> Result<(f64, f64), VerifyError> {
            let mut m = f64::INFINITY;
            for u in &dirs {
                let x = change.inverse(&(u * r)).map_err(stage(Stage::Delta))?;
                m = m.min(x.norm());
            }
            Ok((r, m))
        })
        .collect::<Result<_, _>>()?;
    let env = monotone_envelope(&samples, EnvelopeSide::Lower).map_err(stage(Stage::Delta))?;
    Ok(env.renamed("delta"))
}

// ---------------------------------------------------------------------------
// Pipelines

/// How α₄ and ρ are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alpha4Choice {
    /// `α₄(a) = k·a` with `k = min{1, inf α₁(α₃⁻¹(a))/a}` when that infimum is
    /// at least 1e-2 on the check grid (then `ρ(a) = a^{1/k}`); otherwise the
    /// integral construction.
    Auto,
    /// Always `α₄ = (2/π)∫δ/(1+τ²)` and `ρ = exp(−∫ₐ¹ 1/α₄)`.
    Integral,
}

/// Knobs shared by the pipelines.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub gamma: Option<MonotoneScalarFn>,
    pub alpha4: Alpha4Choice,
    /// Reference level `c` of the change of variables.
    pub level: f64,
    /// Overshoot `c` and rate `λ` asserted by the UGES/ISES bounds.
    pub c_bound: f64,
    pub lambda: f64,
    pub signals: usize,
    pub seed: u64,
    pub tol: f64,
    pub t_end: f64,
    pub slack: f64,
    /// Range of `‖y₀‖` for simulated trajectories.
    pub y0_range: (f64, f64),
    pub contraction_samples: usize,
    pub gain_samples: usize,
    pub l_samples: usize,
    /// Trajectories re-simulated directly through `f̃` for the commutation check.
    pub commutation_checks: usize,
    pub commutation_horizon: f64,
    pub mean_dwell: f64,
    pub sup_sampler: SupSampler,
    pub delta_sampler: DeltaSampler,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            gamma: None,
            alpha4: Alpha4Choice::Auto,
            level: 1.0,
            c_bound: 1.0,
            lambda: 1.0,
            signals: 100,
            seed: 0,
            tol: 1e-8,
            t_end: 10.0,
            slack: 1e-3,
            y0_range: (1e-3, 1e3),
            contraction_samples: 500,
            gain_samples: 2000,
            l_samples: 16,
            commutation_checks: 1,
            commutation_horizon: 2.0,
            mean_dwell: 1.0,
            sup_sampler: SupSampler::default(),
            delta_sampler: DeltaSampler::default(),
        }
    }
}

/// Everything a pipeline produced, in report form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub pipeline: String,
    pub system: String,
    pub pass: bool,
    pub info: BTreeMap<String, String>,
    pub checks: Vec<VerificationReport>,
}

impl PipelineReport {
    fn new(pipeline: &str, system: &str, checks: Vec<VerificationReport>, info: BTreeMap<String, String>) -> Self {
        Self {
            pipeline: pipeline.into(),
            system: system.into(),
            pass: checks.iter().all(|c| c.pass),
            info,
            checks,
        }
    }

    pub fn check(&self, kind: StabilityKind) -> Option<&VerificationReport> {
        self.checks.iter().find(|c| c.kind == kind)
    }

    /// Summary comment lines followed by the TOML body.
    pub fn to_text(&self) -> Result<String, toml::ser::Error> {
        let mut out = String::from("# stabxform verification report\n");
        out.push_str(&format!("# pipeline: {}\n# system: {}\n", self.pipeline, self.system));
        for c in &self.checks {
            out.push_str(&format!("# {}\n", c.summary()));
        }
        out.push_str(&format!("# OVERALL: {}\n\n", if self.pass { "PASS" } else { "FAIL" }));
        out.push_str(&toml::to_string(self)?);
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Output of [`pipeline_ugas_to_uges`].
#[derive(Debug, Clone)]
pub struct UgesOutcome {
    pub w: LyapunovCertificate,
    pub change: CoordinateChange,
    pub transformed: TransformedSystem,
    pub trajectories: Vec<Trajectory>,
    pub report: PipelineReport,
}

/// Output of [`pipeline_iss_to_ises`].
#[derive(Debug, Clone)]
pub struct IsesOutcome {
    pub w: LyapunovCertificate,
    pub change: CoordinateChange,
    pub transformed: TransformedSystem,
    pub delta: MonotoneScalarFn,
    pub alpha_tilde: MonotoneScalarFn,
    pub trajectories: Vec<Trajectory>,
    pub report: PipelineReport,
}

/// An ISES system with `c = λ = 1` and gain `alpha`. When it is the image
/// of a base system under a change of variables, trajectories are computed
/// as `T∘φ` of the base system.
#[derive(Debug, Clone)]
pub struct IsesSystem {
    pub system: DisturbedSystem,
    pub alpha: MonotoneScalarFn,
    pub transport: Option<TransformedSystem>,
}

impl IsesOutcome {
    pub fn ises_system(&self) -> IsesSystem {
        IsesSystem {
            system: self.transformed.as_system(),
            alpha: self.alpha_tilde.clone(),
            transport: Some(self.transformed.clone()),
        }
    }
}

/// Output of [`pipeline_ises_to_hinf`].
#[derive(Debug, Clone)]
pub struct HinfOutcome {
    pub input: InputChange,
    pub system_bar: DisturbedSystem,
    pub trajectories: Vec<Trajectory>,
    pub report: PipelineReport,
}

/// Sampled upper bound `α₃(s) ≥ max_{‖x‖=s} V(x)`.
fn sampled_alpha3(cert: &LyapunovCertificate) -> Result<MonotoneScalarFn, VerifyError> {
    let n = cert.dim();
    let mut dirs = crate::lyap::axis_directions(n);
    dirs.extend(sphere_directions(n, 64, 0));
    let samples: Vec<(f64, f64)> = log_grid(1e-4, 1e3, 57)
        .into_iter()
        .map(|s| (s, dirs.iter().map(|u| cert.value(&(u * s))).fold(0.0, f64::max) * 1.01))
        .collect();
    monotone_envelope(&samples, EnvelopeSide::Upper).map_err(stage(Stage::Certificate))
}

/// Picks ρ per [`Alpha4Choice`]; returns ρ and a description.
/// Log grid for the tabulated α₄ and ρ of the integral construction.
/// Relative radius below which [`check_commutation`] stops comparing.
pub const COMMUTATION_FLOOR: f64 = 1e-6;
const TABLE_RANGE: (f64, f64) = (1e-12, 1e6);
const TABLE_PER_DECADE: usize = 40;

fn choose_rho(
    alpha1: &MonotoneScalarFn,
    alpha3: &MonotoneScalarFn,
    choice: Alpha4Choice,
) -> Result<(MonotoneScalarFn, String), VerifyError> {
    if choice == Alpha4Choice::Auto {
        let comp = MonotoneScalarFn::compose(alpha1, &alpha3.inverse());
        let k = log_grid(1e-6, 1e3, 1000)
            .into_iter()
            .map(|a| comp.eval(a) / a)
            .fold(f64::INFINITY, f64::min);
        if k >= 1e-2 {
            let k = k.min(1.0);
            if k == 1.0 {
                return Ok((MonotoneScalarFn::identity(), "alpha4 = identity, rho = identity".into()));
            }
            let p = 1.0 / k;
            return Ok((
                MonotoneScalarFn::power(1.0, p).renamed(format!("s^{p}")),
                format!("alpha4 = {k}*s, rho = s^{p}"),
            ));
        }
    }
    // both integrals are tabulated once; evaluating ρ through nested
    // quadrature inside every simulation step is far too slow
    let a4 = make_alpha4(alpha1, alpha3)
        .and_then(|a| a.tabulated(TABLE_RANGE.0, TABLE_RANGE.1, TABLE_PER_DECADE))
        .map_err(stage(Stage::Reparametrization))?;
    let rho = make_rho(&a4)
        .and_then(|r| r.tabulated(TABLE_RANGE.0, TABLE_RANGE.1, TABLE_PER_DECADE))
        .map_err(stage(Stage::Reparametrization))?
        .renamed("rho");
    Ok((rho, "alpha4 = (2/pi) int delta/(1+t^2), rho = exp(-int_a^1 1/alpha4)".into()))
}

/// `W = ρ∘V` for a certificate with decay rate α₁.
fn reparametrize(cert: &LyapunovCertificate, opts: &PipelineOptions) -> Result<(LyapunovCertificate, String), VerifyError> {
    let diag = check_certificate(cert, &SamplingPlan::default());
    if !diag.pass() {
        return Err(VerifyError::Pipeline {
            stage: Stage::Certificate,
            message: format!("certificate '{}' fails its sampled checks: {diag:?}", cert.name()),
        });
    }
    let alpha1 = cert.decay.clone().ok_or(VerifyError::Pipeline {
        stage: Stage::Certificate,
        message: "certificate has no decay rate alpha1".into(),
    })?;
    let alpha3 = match &cert.bounds {
        Some((_, a3)) => a3.clone(),
        None => sampled_alpha3(cert)?,
    };
    let (rho, desc) = choose_rho(&alpha1, &alpha3, opts.alpha4)?;
    let w = if rho.name() == "identity" {
        cert.clone()
    } else {
        cert.reparametrized(&rho)
    };
    Ok((w, desc))
}

/// Default γ from the sampled level-set Jacobian bound; in one dimension `Q`
/// is locally constant and `L ≡ 0`.
fn default_gamma(w: &LyapunovCertificate, opts: &PipelineOptions) -> Result<MonotoneScalarFn, VerifyError> {
    if let Some(g) = &opts.gamma {
        return Ok(g.clone());
    }
    let cfg = GradientFlowConfig::default();
    let one_d = w.dim() == 1;
    let profile = make_gamma(
        |s| {
            if one_d {
                0.0
            } else {
                estimate_l(w, opts.level, s, opts.l_samples, &cfg).unwrap_or(f64::NAN)
            }
        },
        WORKING_LEVELS.1,
    )
    .map_err(stage(Stage::Gamma))?;
    Ok(profile.gamma_fn())
}

fn signal_for(system: &DisturbedSystem, i: usize, count: usize, opts: &PipelineOptions) -> DisturbanceSignal {
    let radius = match system.disturbance_set {
        DisturbanceSet::Ball(r) => r,
        DisturbanceSet::Unbounded => 1.0,
    };
    let frac = if count > 1 { i as f64 / (count - 1) as f64 } else { 1.0 };
    let amplitude = radius * 10f64.powf(-3.0 * (1.0 - frac));
    make_disturbance(
        &DisturbanceSpec {
            dim: system.dim_d(),
            amplitude,
            mean_dwell: opts.mean_dwell,
            horizon: opts.t_end,
        },
        opts.seed.wrapping_add(i as u64),
    )
}

fn initial_points(n: usize, count: usize, range: (f64, f64), seed: u64) -> Vec<DVector<f64>> {
    let radii = log_grid(range.0, range.1, count.max(1));
    let dirs = sphere_directions(n, count, seed);
    radii.into_iter().zip(dirs).map(|(r, u)| u * r).collect()
}

/// `y(t) = T(φ(t, T⁻¹(y₀), d))` on the report grid.
fn transported(
    tsys: &TransformedSystem,
    y0: &DVector<f64>,
    sig: &DisturbanceSignal,
    t_end: f64,
    tol: f64,
) -> Result<Trajectory, VerifyError> {
    let x0 = tsys.change.inverse(y0).map_err(stage(Stage::Simulation))?;
    let tr = simulate(&tsys.base, &x0, sig, t_end, tol).map_err(stage(Stage::Simulation))?;
    let states = tr
        .states
        .iter()
        .map(|x| tsys.change.forward(x))
        .collect::<Result<Vec<_>, _>>()
        .map_err(stage(Stage::Simulation))?;
    Ok(Trajectory {
        times: tr.times,
        states,
        signal: Some(sig.clone()),
        tol_used: tol,
    })
}

fn batch(
    tsys: &TransformedSystem,
    opts: &PipelineOptions,
    map_signal: &(dyn Fn(&DisturbanceSignal) -> DisturbanceSignal + Sync),
) -> Result<Vec<Trajectory>, VerifyError> {
    let n = opts.signals;
    let y0s = initial_points(tsys.dim_x(), n, opts.y0_range, opts.seed);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let sig = signal_for(&tsys.base, i, n, opts);
            let mut tr = transported(tsys, &y0s[i], &sig, opts.t_end, opts.tol)?;
            tr.signal = Some(map_signal(&sig));
            Ok(tr)
        })
        .collect()
}

/// Direct simulation of `f̃` against `T∘φ` for the first few trajectories.
fn commutation(tsys: &TransformedSystem, opts: &PipelineOptions) -> Result<VerificationReport, VerifyError> {
    let k = opts.commutation_checks;
    let y0s = initial_points(tsys.dim_x(), k.max(1), (1.0, 10.0), opts.seed);
    let sys = tsys.as_system();
    let mut direct = Vec::new();
    let mut trans = Vec::new();
    for y0 in y0s.iter().take(k) {
        // strongest signal of the batch
        let sig = signal_for(&tsys.base, opts.signals.saturating_sub(1), opts.signals, opts);
        direct.push(simulate(&sys, y0, &sig, opts.commutation_horizon, opts.tol).map_err(stage(Stage::Simulation))?);
        trans.push(transported(tsys, y0, &sig, opts.commutation_horizon, opts.tol)?);
    }
    Ok(check_commutation(&direct, &trans, opts.slack))
}

fn y_range_of(change: &CoordinateChange) -> (f64, f64) {
    let h = change.gamma().inverse();
    (h.eval(WORKING_LEVELS.0), h.eval(WORKING_LEVELS.1))
}

fn d_radius(system: &DisturbedSystem) -> f64 {
    match system.disturbance_set {
        DisturbanceSet::Ball(r) => r,
        DisturbanceSet::Unbounded => 1.0,
    }
}

fn base_info(w: &LyapunovCertificate, change: &CoordinateChange, rho: &str, opts: &PipelineOptions) -> BTreeMap<String, String> {
    let mut info = BTreeMap::new();
    info.insert("certificate".into(), w.name().into());
    info.insert("rho".into(), rho.into());
    info.insert("gamma".into(), change.gamma().name().into());
    info.insert("level".into(), format!("{}", change.level()));
    info.insert(
        "slack_budget".into(),
        format!(
            "slack {} = integration tol {} + finite differences 1e-4 rel + envelope safety",
            opts.slack, opts.tol
        ),
    );
    info.insert("seed".into(), opts.seed.to_string());
    info
}

/// UGAS → UGES: `W = ρ∘V`, γ, `T`, `f̃`; checks contraction of `f̃`, the
/// UGES bound with the configured `c`, `λ` over seeded disturbance signals, and the
/// commutation `T∘φ = φ̃∘T`.
pub fn pipeline_ugas_to_uges(
    system: &DisturbedSystem,
    cert: &LyapunovCertificate,
    opts: &PipelineOptions,
) -> Result<UgesOutcome, VerifyError> {
    StabilitySpec::new(StabilityKind::Uges, opts.c_bound, opts.lambda, opts.slack)?;
    let (w, rho_desc) = reparametrize(cert, opts)?;
    let gamma = default_gamma(&w, opts)?;
    let change = build_change(&w, &gamma, opts.level).map_err(stage(Stage::Change))?;
    let tsys = pushforward(system, &change);

    let (ylo, yhi) = y_range_of(&change);
    let samples = PairSampler {
        count: opts.contraction_samples,
        y_min: ylo,
        y_max: yhi,
        d_radius: d_radius(system),
        offset: opts.seed,
    }
    .samples(system.dim_x(), system.dim_d());
    let contraction = check_contraction(&tsys.as_system(), &samples, opts.slack).with_stage("ugas2uges");

    let trajectories = batch(&tsys, opts, &|s| s.clone())?;
    let uges = check_uges(&trajectories, opts.c_bound, opts.lambda, opts.slack).with_stage("ugas2uges");
    let mut checks = vec![uges, contraction];
    if opts.commutation_checks > 0 {
        checks.push(commutation(&tsys, opts)?.with_stage("ugas2uges"));
    }
    let info = base_info(&w, &change, &rho_desc, opts);
    let report = PipelineReport::new("ugas2uges", system.name(), checks, info);
    Ok(UgesOutcome {
        w,
        change,
        transformed: tsys,
        trajectories,
        report,
    })
}

/// Trajectory-transport normal form of an undisturbed system: `f̃(y) = −y` by
/// construction, so the UGES bound with `c = λ = 1` is the equality case.
/// Same checks as [`pipeline_ugas_to_uges`].
pub fn pipeline_flow_normal_form(
    system: &DisturbedSystem,
    cert: &LyapunovCertificate,
    opts: &PipelineOptions,
) -> Result<UgesOutcome, VerifyError> {
    StabilitySpec::new(StabilityKind::Uges, opts.c_bound, opts.lambda, opts.slack)?;
    let (change, tsys) = flow_based_normal_form(system, cert, opts.level).map_err(stage(Stage::Change))?;
    let samples = PairSampler {
        count: opts.contraction_samples,
        y_min: opts.y0_range.0,
        y_max: opts.y0_range.1,
        d_radius: 0.0,
        offset: opts.seed,
    }
    .samples(system.dim_x(), system.dim_d());
    let contraction = check_contraction(&tsys.as_system(), &samples, opts.slack).with_stage("flownorm");
    let trajectories = batch(&tsys, opts, &|s| s.clone())?;
    let uges = check_uges(&trajectories, opts.c_bound, opts.lambda, opts.slack).with_stage("flownorm");
    let mut checks = vec![uges, contraction];
    if opts.commutation_checks > 0 {
        checks.push(commutation(&tsys, opts)?.with_stage("flownorm"));
    }
    let mut info = base_info(cert, &change, "none", opts);
    info.insert("construction".into(), "trajectory transport".into());
    let report = PipelineReport::new("flownorm", system.name(), checks, info);
    Ok(UgesOutcome {
        w: cert.clone(),
        change,
        transformed: tsys,
        trajectories,
        report,
    })
}

/// `W̃(y) = γ(‖y‖) = W(T⁻¹(y))` with gradient `γ'(‖y‖)·y/‖y‖`.
fn w_tilde(change: &CoordinateChange) -> LyapunovCertificate {
    let (g, gd) = (change.gamma().clone(), change.gamma().clone());
    LyapunovCertificate::new("W~", change.dim(), move |y| g.eval(y.norm())).with_gradient(move |y| {
        let r = y.norm();
        if r == 0.0 {
            DVector::zeros(y.len())
        } else {
            y * (gd.deriv(r) / r)
        }
    })
}

/// ISS → ISES: as the UGES pipeline with gain-conditioned decay; then
/// δ from sampled `‖T⁻¹‖`, `α̃ = δ⁻¹∘χ`, the gain-decay inequality
/// `‖y‖ > α̃(‖d‖) ⇒ L W̃ ≤ −W̃` and the ISES bound with `c = λ = 1`.
pub fn pipeline_iss_to_ises(
    system: &DisturbedSystem,
    cert: &LyapunovCertificate,
    opts: &PipelineOptions,
) -> Result<IsesOutcome, VerifyError> {
    StabilitySpec::new(StabilityKind::Ises, opts.c_bound, opts.lambda, opts.slack)?;
    let chi = cert.iss_gain.clone().ok_or(VerifyError::Pipeline {
        stage: Stage::Certificate,
        message: "certificate has no ISS gain chi".into(),
    })?;
    let (w, rho_desc) = reparametrize(cert, opts)?;
    let gamma = default_gamma(&w, opts)?;
    let change = build_change(&w, &gamma, opts.level).map_err(stage(Stage::Change))?;
    let tsys = pushforward(system, &change);

    let delta = estimate_delta(&change, &opts.delta_sampler)?;
    let alpha_tilde = MonotoneScalarFn::compose(&delta.inverse(), &chi).renamed("alpha_tilde");
    let alpha_tilde = MonotoneScalarFn::new("alpha_tilde", ComparisonClass::KInfinity, {
        let a = alpha_tilde.clone();
        move |r| a.eval(r)
    })
    .with_derivative({
        let a = alpha_tilde.clone();
        move |r| a.deriv(r)
    })
    .with_inverse({
        let a = alpha_tilde;
        move |y| a.inv(y)
    });

    let (ylo, yhi) = y_range_of(&change);
    let samples = PairSampler {
        count: opts.gain_samples,
        y_min: ylo,
        y_max: yhi,
        d_radius: d_radius(system),
        offset: opts.seed,
    }
    .samples(system.dim_x(), system.dim_d());
    let gain = check_gain_decay(&tsys.as_system(), &w_tilde(&change), &alpha_tilde, &samples, opts.slack)
        .with_stage("iss2ises");

    let trajectories = batch(&tsys, opts, &|s| s.clone())?;
    let ises = check_ises(&trajectories, &alpha_tilde, opts.c_bound, opts.lambda, opts.slack)?.with_stage("iss2ises");
    let mut checks = vec![ises, gain];
    if opts.commutation_checks > 0 {
        checks.push(commutation(&tsys, opts)?.with_stage("iss2ises"));
    }
    let mut info = base_info(&w, &change, &rho_desc, opts);
    info.insert("chi".into(), chi.name().into());
    info.insert("alpha_tilde".into(), "delta^-1 o chi, delta = lower envelope of |T^-1(y)|".into());
    let report = PipelineReport::new("iss2ises", system.name(), checks, info);
    Ok(IsesOutcome {
        w,
        change,
        transformed: tsys,
        delta,
        alpha_tilde,
        trajectories,
        report,
    })
}

/// ISES → H∞: α̃ from the sampled supremum, `R`, `f̄(x,v) = f(x, R⁻¹(v))`;
/// checks the dissipation inequality `L_{f̄_v}‖x‖² ≤ −‖x‖² + ‖v‖²` and the
/// integral H∞ estimate along trajectories driven by `v = R(d)`.
pub fn pipeline_ises_to_hinf(ises: &IsesSystem, opts: &PipelineOptions) -> Result<HinfOutcome, VerifyError> {
    validate_gain(&ises.alpha)?;
    let system = &ises.system;
    if system.dim_d() == 0 {
        return Err(VerifyError::Pipeline {
            stage: Stage::InputChange,
            message: "system has no disturbance input".into(),
        });
    }
    let input = input_change(system, &ises.alpha, &opts.sup_sampler).map_err(stage(Stage::InputChange))?;
    let system_bar = input.transformed_system(system);

    let raw = PairSampler {
        count: opts.gain_samples,
        y_min: opts.y0_range.0,
        y_max: opts.y0_range.1,
        d_radius: d_radius(system),
        offset: opts.seed,
    }
    .samples(system.dim_x(), system.dim_d());
    let samples: Vec<_> = raw.into_iter().map(|(x, d)| (x, input.r(&d))).collect();
    let dissipation = check_dissipation(&system_bar, &samples, opts.slack).with_stage("ises2hinf");

    let r_map = |s: &DisturbanceSignal| s.mapped(|d| input.r(d));
    let trajectories = match &ises.transport {
        Some(tsys) => batch(tsys, opts, &r_map)?,
        None => {
            let n = opts.signals;
            let y0s = initial_points(system.dim_x(), n, opts.y0_range, opts.seed);
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let sig = signal_for(system, i, n, opts);
                    let v = r_map(&sig);
                    simulate(&system_bar, &y0s[i], &v, opts.t_end, opts.tol).map_err(stage(Stage::Simulation))
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let hinf = check_hinf(&trajectories, opts.slack)?.with_stage("ises2hinf");
    let mut info = BTreeMap::new();
    info.insert("alpha".into(), ises.alpha.name().into());
    info.insert(
        "alpha_tilde".into(),
        "fourth root of the upper envelope of 1.1 * sup (2<f,x> + |x|^2)+".into(),
    );
    info.insert("degenerate_supremum".into(), input.degenerate.to_string());
    info.insert("seed".into(), opts.seed.to_string());
    let report = PipelineReport::new("ises2hinf", system.name(), vec![hinf, dissipation], info);
    Ok(HinfOutcome {
        input,
        system_bar,
        trajectories,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sys::catalog;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn decay(rate: f64) -> DisturbedSystem {
        DisturbedSystem::autonomous("decay", 1, move |x| x * -rate)
    }

    fn run(sys: &DisturbedSystem, x0: f64) -> Trajectory {
        simulate(sys, &v1(x0), &DisturbanceSignal::zero(sys.dim_d()), 10.0, 1e-10).unwrap()
    }

    #[test]
    fn uges_equality_case() {
        let r = check_uges(&[run(&decay(1.0), 1.0), run(&decay(1.0), -3.0)], 1.0, 1.0, 1e-3);
        assert!(r.pass);
        assert!(r.worst_margin() >= 1.0 - 1e-9 && r.worst_margin() <= 1.0 + 1e-8);
    }

    #[test]
    fn uges_detects_slow_decay() {
        let r = check_uges(&[run(&decay(0.5), 1.0)], 1.0, 1.0, 1e-3);
        assert!(!r.pass);
        assert!((r.worst_margin() - 5f64.exp()).abs() < 1e-6 * 5f64.exp());
        assert_eq!(r.worst.as_ref().unwrap().time, Some(10.0));
    }

    #[test]
    fn uges_zero_initial_state() {
        let r = check_uges(&[run(&decay(1.0), 0.0)], 1.0, 1.0, 0.0);
        assert!(r.pass);
        assert_eq!(r.margins, vec![0.0]);
    }

    #[test]
    fn ises_forced_response() {
        let e = catalog("iss_scalar").unwrap();
        let tr = simulate(&e.system, &v1(0.0), &DisturbanceSignal::constant(v1(1.0)), 10.0, 1e-10).unwrap();
        let r = check_ises(&[tr], &MonotoneScalarFn::linear(2.0), 1.0, 1.0, 1e-3).unwrap();
        assert!(r.pass);
        assert!(r.worst_margin() <= 0.5 + 1e-9);
    }

    #[test]
    fn ises_reduces_to_uges_without_input() {
        let e = catalog("iss_scalar").unwrap();
        let tr = simulate(&e.system, &v1(2.0), &DisturbanceSignal::zero(1), 10.0, 1e-10).unwrap();
        let a = check_ises(&[tr.clone()], &MonotoneScalarFn::linear(2.0), 1.0, 1.0, 1e-3).unwrap();
        let b = check_uges(&[tr], 1.0, 1.0, 1e-3);
        assert_eq!(a.margins, b.margins);
    }

    #[test]
    fn ises_validation() {
        let mut tr = run(&decay(1.0), 1.0);
        let zero = MonotoneScalarFn::new("zero", ComparisonClass::K, |_| 0.0);
        assert!(matches!(
            check_ises(&[tr.clone()], &zero, 1.0, 1.0, 0.0),
            Err(VerifyError::InvalidSpec(_))
        ));
        tr.signal = None;
        assert!(matches!(
            check_ises(&[tr], &MonotoneScalarFn::identity(), 1.0, 1.0, 0.0),
            Err(VerifyError::MissingSignal { index: 0 })
        ));
        assert!(StabilitySpec::new(StabilityKind::Uges, 0.5, 1.0, 0.0).is_err());
        assert!(StabilitySpec::new(StabilityKind::Uges, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn hinf_closed_forms() {
        let zero = run(&decay(1.0), 0.0);
        let r = check_hinf(&[zero], 0.0).unwrap();
        assert!(r.pass && r.worst_residual() == 0.0);

        let tr = simulate(&decay(1.0), &v1(1.0), &DisturbanceSignal::zero(0), 10.0, 1e-10).unwrap();
        let curve = hinf_residual_curve(&tr).unwrap();
        // ∫₀^∞ e^{−2s} ds − 1 = −0.5 (tail beyond t = 10 is e^{−20}/2)
        assert!((curve.last().unwrap() + 0.5).abs() < 1e-3);
        assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        assert!(check_hinf(&[tr], 1e-3).unwrap().pass);
    }

    #[test]
    fn signal_energy_exact() {
        let s = DisturbanceSignal::piecewise(vec![1.0, 3.0], vec![v1(2.0), v1(0.0), v1(1.0)]).unwrap();
        assert_eq!(signal_energy(&s, 0.5), 2.0);
        assert_eq!(signal_energy(&s, 2.0), 4.0);
        assert_eq!(signal_energy(&s, 5.0), 6.0);
    }

    #[test]
    fn contraction_examples() {
        let pairs = PairSampler {
            count: 50,
            y_min: 1e-3,
            y_max: 1e3,
            d_radius: 0.0,
            offset: 0,
        }
        .samples(2, 0);
        let minus = DisturbedSystem::autonomous("-y", 2, |y| -y);
        let r = check_contraction(&minus, &pairs, 0.0);
        assert!(r.pass && r.worst_residual().abs() < 1e-15);
        let twice = DisturbedSystem::autonomous("-2y", 2, |y| y * -2.0);
        let r = check_contraction(&twice, &pairs, 0.0);
        assert!(r.residuals.iter().all(|v| (v + 1.0).abs() < 1e-15));
    }

    #[test]
    fn gain_decay_examples() {
        let w = LyapunovCertificate::squared_norm(1);
        let pairs = PairSampler {
            count: 400,
            y_min: 1e-3,
            y_max: 10.0,
            d_radius: 1.0,
            offset: 0,
        }
        .samples(1, 1);
        let e = catalog("iss_scalar").unwrap();
        let two = MonotoneScalarFn::linear(2.0);
        let r = check_gain_decay(&e.system, &w, &two, &pairs, 0.0);
        assert!(r.pass, "{:?}", r.worst);
        let inside = pairs.iter().filter(|(y, d)| y.norm() <= 2.0 * d.norm()).count();
        assert_eq!(r.skipped, inside);
        assert_eq!(r.residuals.len() + r.skipped, pairs.len());

        let minus = DisturbedSystem::autonomous("-y", 1, |y| -y);
        let tiny = MonotoneScalarFn::linear(1e-300);
        let pairs0: Vec<_> = pairs.iter().map(|(y, _)| (y.clone(), DVector::zeros(0))).collect();
        assert!(check_gain_decay(&minus, &w, &tiny, &pairs0, 0.0).pass);
    }

    #[test]
    fn delta_from_known_inverse() {
        let e = catalog("halfspeed_1d").unwrap();
        let ch = build_change(&e.certificate, &MonotoneScalarFn::identity(), 1.0).unwrap();
        let d = estimate_delta(&ch, &DeltaSampler::default()).unwrap();
        assert!(d.eval(4.0) <= 2.0);
        assert!(d.eval(4.0) >= 2.0 * 0.99);
        assert!(d.monotonicity_violation(&log_grid(1e-5, 1e3, 80)).is_none());
    }

    #[test]
    fn delta_radial_change() {
        // V = ‖x‖², γ = identity: ‖T⁻¹(y)‖ = √‖y‖ on every sphere
        let cert = LyapunovCertificate::squared_norm(2);
        let ch = build_change(&cert, &MonotoneScalarFn::identity(), 1.0).unwrap();
        let sampler = DeltaSampler {
            directions: 16,
            ..DeltaSampler::default()
        };
        let d = estimate_delta(&ch, &sampler).unwrap();
        for r in [1e-2, 0.5, 3.0, 100.0] {
            assert!(d.eval(r) <= r.sqrt() * (1.0 + 1e-9), "{r}");
            assert!(d.eval(r) >= r.sqrt() * 0.99, "{r}");
        }
    }

    #[test]
    fn report_text_round_trip() {
        let r = check_uges(&[run(&decay(1.0), 1.0)], 1.0, 1.0, 1e-3).with_stage("unit");
        let mut info = BTreeMap::new();
        info.insert("k".to_string(), "v".to_string());
        let rep = PipelineReport::new("ugas2uges", "decay", vec![r], info);
        let text = rep.to_text().unwrap();
        assert!(text.contains("UGES: PASS"));
        assert_eq!(PipelineReport::from_text(&text).unwrap(), rep);
    }

    #[test]
    fn merge_is_associative() {
        let a = check_uges(&[run(&decay(1.0), 1.0)], 1.0, 1.0, 1e-3);
        let b = check_uges(&[run(&decay(0.5), 1.0)], 1.0, 1.0, 1e-3);
        let c = check_uges(&[run(&decay(2.0), 1.0)], 1.0, 1.0, 1e-3);
        let left = a.clone().merge(b.clone()).merge(c.clone());
        let right = a.merge(b.merge(c));
        assert_eq!(left, right);
        assert!(!left.pass);
        assert_eq!(left.worst.unwrap().index, 1);
    }

    #[test]
    fn flow_normal_form_pipeline() {
        let sys = DisturbedSystem::linear("neg_id_2d", nalgebra::DMatrix::identity(2, 2) * -1.0);
        let cert = LyapunovCertificate::squared_norm(2).with_decay(MonotoneScalarFn::power(2.0, 2.0));
        let opts = PipelineOptions {
            signals: 8,
            contraction_samples: 50,
            ..PipelineOptions::default()
        };
        let out = pipeline_flow_normal_form(&sys, &cert, &opts).unwrap();
        assert!(out.report.pass, "{}", out.report.to_text().unwrap());
        assert_eq!(out.report.pipeline, "flownorm");
    }

    #[test]
    fn pipeline_rejects_bad_lambda() {
        let e = catalog("halfspeed_1d").unwrap();
        let opts = PipelineOptions {
            lambda: 0.0,
            ..PipelineOptions::default()
        };
        assert!(matches!(
            pipeline_ugas_to_uges(&e.system, &e.certificate, &opts),
            Err(VerifyError::InvalidSpec(_))
        ));
    }

    #[test]
    fn commutation_stops_at_origin_passage() {
        // the direct run sticks at 0 while the reference crosses it
        let traj = |ys: &[f64]| Trajectory {
            times: (0..ys.len()).map(|i| i as f64).collect(),
            states: ys.iter().map(|&y| v1(y)).collect(),
            signal: None,
            tol_used: 1e-8,
        };
        let stuck = traj(&[1.0, 1e-3, 0.0, 0.0]);
        let crossing = traj(&[1.0, 1e-3, 1e-8, -1e-3]);
        let rep = check_commutation(&[stuck.clone()], &[crossing], 1e-3);
        assert!(rep.pass, "{rep:?}");
        let rep = check_commutation(&[stuck], &[traj(&[1.0, 2e-3, 1e-3, 1e-3])], 1e-3);
        assert!(!rep.pass);
    }
}
