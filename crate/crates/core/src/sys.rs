//! Disturbed systems `ẋ = f(x, d)`, piecewise-constant disturbance signals,
//! trajectory simulation and the built-in example catalog.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kfun::MonotoneScalarFn;
use crate::lyap::LyapunovCertificate;
use crate::ode::{Dopri5, OdeFailure, StepControl};

pub type RhsFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type StateMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Norm above which a trajectory is declared to blow up.
pub const BLOWUP_NORM: f64 = 1e12;
/// States closer than this to an equilibrium origin are pinned to zero.
pub const PIN_NORM: f64 = 1e-12;
/// Uniform report times per trajectory (plus the initial time).
pub const REPORT_POINTS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SysError {
    #[error("trajectory blew up (norm > 1e12) at t = {t}")]
    BlowupDetected { t: f64 },
    #[error("integration failed at t = {t}: {reason}")]
    IntegrationFailure { t: f64, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown catalog entry '{0}'")]
    UnknownName(String),
}

/// The admissible disturbance values D.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisturbanceSet {
    /// Closed ball of the given radius (radius 0 is D = {0}).
    Ball(f64),
    Unbounded,
}

impl DisturbanceSet {
    pub fn contains(&self, d: &DVector<f64>) -> bool {
        match self {
            DisturbanceSet::Ball(r) => d.norm() <= r * (1.0 + 1e-12),
            DisturbanceSet::Unbounded => true,
        }
    }

    pub fn radius(&self) -> f64 {
        match self {
            DisturbanceSet::Ball(r) => *r,
            DisturbanceSet::Unbounded => f64::INFINITY,
        }
    }
}

/// `ẋ = f(x, d)` on Rⁿ with d ∈ D ⊂ Rᵐ.
#[derive(Clone)]
pub struct DisturbedSystem {
    name: String,
    dim_x: usize,
    dim_d: usize,
    rhs: RhsFn,
    pub disturbance_set: DisturbanceSet,
    /// `f` may fail to be Lipschitz at the origin.
    pub non_lipschitz_at_origin: bool,
}

impl fmt::Debug for DisturbedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DisturbedSystem")
            .field("name", &self.name)
            .field("dim_x", &self.dim_x)
            .field("dim_d", &self.dim_d)
            .field("disturbance_set", &self.disturbance_set)
            .finish()
    }
}

impl DisturbedSystem {
    pub fn new<F>(name: impl Into<String>, dim_x: usize, dim_d: usize, set: DisturbanceSet, rhs: F) -> Self
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            dim_x,
            dim_d,
            rhs: Arc::new(rhs),
            disturbance_set: set,
            non_lipschitz_at_origin: false,
        }
    }

    /// Undisturbed `ẋ = f(x)`; D = {0} in zero dimensions.
    pub fn autonomous<F>(name: impl Into<String>, dim_x: usize, rhs: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::new(name, dim_x, 0, DisturbanceSet::Ball(0.0), move |x, _| rhs(x))
    }

    /// `ẋ = A x`.
    pub fn linear(name: impl Into<String>, a: DMatrix<f64>) -> Self {
        let n = a.nrows();
        Self::autonomous(name, n, move |x| &a * x)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_d(&self) -> usize {
        self.dim_d
    }

    #[inline]
    pub fn rhs(&self, x: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        (self.rhs)(x, d)
    }

    pub fn zero_disturbance(&self) -> DVector<f64> {
        DVector::zeros(self.dim_d)
    }
}

/// Piecewise-constant `d(·)`: `values[k]` is active on
/// `[switch_times[k-1], switch_times[k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSignal {
    pub switch_times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub seed: u64,
}

impl DisturbanceSignal {
    pub fn constant(d: DVector<f64>) -> Self {
        Self {
            switch_times: Vec::new(),
            values: vec![d],
            seed: 0,
        }
    }

    pub fn zero(dim_d: usize) -> Self {
        Self::constant(DVector::zeros(dim_d))
    }

    pub fn piecewise(switch_times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self, SysError> {
        if values.len() != switch_times.len() + 1 {
            return Err(SysError::InvalidInput(
                "need exactly one more value than switch times".into(),
            ));
        }
        if switch_times.windows(2).any(|w| w[1] <= w[0]) || switch_times.first().is_some_and(|t| *t <= 0.0) {
            return Err(SysError::InvalidInput("switch times must be positive and strictly increasing".into()));
        }
        Ok(Self {
            switch_times,
            values,
            seed: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    fn piece(&self, t: f64) -> usize {
        self.switch_times.partition_point(|&s| s <= t)
    }

    pub fn value_at(&self, t: f64) -> &DVector<f64> {
        &self.values[self.piece(t)]
    }

    /// `sup_{0 ≤ s ≤ t} ‖d(s)‖`, exact for piecewise-constant signals.
    pub fn sup_norm_until(&self, t: f64) -> f64 {
        let last = self.piece(t);
        self.values[..=last].iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// The signal with every value mapped through `map` (e.g. `v = R(d)`).
    pub fn mapped<F: Fn(&DVector<f64>) -> DVector<f64>>(&self, map: F) -> Self {
        Self {
            switch_times: self.switch_times.clone(),
            values: self.values.iter().map(map).collect(),
            seed: self.seed,
        }
    }
}

/// Recipe for a seeded random disturbance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceSpec {
    pub dim: usize,
    /// Values are drawn from the ball of this radius.
    pub amplitude: f64,
    /// Mean time between switches (exponentially distributed dwell times).
    pub mean_dwell: f64,
    /// Switches are generated up to this time.
    pub horizon: f64,
}

/// Reproducible piecewise-constant signal from `spec` and `seed`.
pub fn make_disturbance(spec: &DisturbanceSpec, seed: u64) -> DisturbanceSignal {
    if spec.amplitude == 0.0 || spec.dim == 0 {
        let mut s = DisturbanceSignal::zero(spec.dim);
        s.seed = seed;
        return s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::new();
    let mut t = 0.0;
    loop {
        let u: f64 = rng.random::<f64>().max(1e-300);
        t += -u.ln() * spec.mean_dwell;
        if t >= spec.horizon {
            break;
        }
        times.push(t);
    }
    let values = (0..=times.len())
        .map(|_| {
            let g: Vec<f64> = (0..spec.dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let mut v = DVector::from_vec(g);
            let n = v.norm();
            if n > 0.0 {
                v /= n;
            }
            let frac: f64 = rng.random::<f64>();
            v * (spec.amplitude * frac.powf(1.0 / spec.dim as f64))
        })
        .collect();
    DisturbanceSignal {
        switch_times: times,
        values,
        seed,
    }
}

/// A sampled solution `φ(t, x₀, d(·))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub signal: Option<DisturbanceSignal>,
    pub tol_used: f64,
}

impl Trajectory {
    pub fn initial(&self) -> &DVector<f64> {
        &self.states[0]
    }

    /// CSV with header `t,x1..xn,norm`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, |s| s.len());
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        out.push_str(",norm\n");
        for (t, x) in self.times.iter().zip(&self.states) {
            out.push_str(&format!("{t:.16e}"));
            for v in x.iter() {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push_str(&format!(",{:.16e}\n", x.norm()));
        }
        out
    }

    /// Parses [`Trajectory::to_csv`] output (the signal is not stored).
    pub fn from_csv(text: &str) -> Result<Self, SysError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| SysError::InvalidInput("empty CSV".into()))?;
        let cols = header.split(',').count();
        if cols < 2 {
            return Err(SysError::InvalidInput("CSV header too short".into()));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| SysError::InvalidInput(format!("bad CSV row: {e}")))?;
            if vals.len() != cols {
                return Err(SysError::InvalidInput("ragged CSV row".into()));
            }
            times.push(vals[0]);
            states.push(DVector::from_column_slice(&vals[1..cols - 1]));
        }
        Ok(Self {
            times,
            states,
            signal: None,
            tol_used: f64::NAN,
        })
    }
}

/// Integrates `system` from `x0` under `signal` up to `t_end`.
///
/// Dormand–Prince 5(4) with steps clamped to the 200 uniform report times
/// and to the switching times of the signal. A state with `‖x‖ < 1e-12`
/// under a disturbance value with `f(0, d) = 0` is pinned to the origin.
pub fn simulate(
    system: &DisturbedSystem,
    x0: &DVector<f64>,
    signal: &DisturbanceSignal,
    t_end: f64,
    tol: f64,
) -> Result<Trajectory, SysError> {
    if !(t_end > 0.0) {
        return Err(SysError::InvalidInput("t_end must be positive".into()));
    }
    if x0.len() != system.dim_x() || x0.iter().any(|v| !v.is_finite()) {
        return Err(SysError::InvalidInput("initial state has wrong dimension or is not finite".into()));
    }
    if signal.dim() != system.dim_d() {
        return Err(SysError::InvalidInput(format!(
            "signal dimension {} does not match system input dimension {}",
            signal.dim(),
            system.dim_d()
        )));
    }
    let report: Vec<f64> = (0..=REPORT_POINTS)
        .map(|k| t_end * k as f64 / REPORT_POINTS as f64)
        .collect();
    let mut stops: Vec<f64> = report[1..].to_vec();
    stops.extend(signal.switch_times.iter().copied().filter(|&s| s < t_end));
    stops.sort_by(f64::total_cmp);
    stops.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * t_end);

    let control = StepControl {
        rtol: tol,
        atol: 1e-4 * tol * x0.norm().max(1e-3),
        norm_scaled: true,
        ..StepControl::default()
    };
    let solver = Dopri5::new(control);
    let zero = DVector::zeros(system.dim_x());

    let mut states = vec![x0.clone()];
    let mut times = vec![0.0];
    let mut next_report = 1;
    let mut t = 0.0;
    let mut x = x0.clone();
    for &stop in &stops {
        let d = signal.value_at(t).clone();
        let origin_fixed = system.rhs(&zero, &d).norm() == 0.0;
        if origin_fixed && x.norm() < PIN_NORM {
            x = zero.clone();
        } else {
            let rhs = |_t: f64, y: &DVector<f64>| system.rhs(y, &d);
            let mut blowup = None;
            let run = solver.integrate(&rhs, t, &x, stop, |tt, y| {
                let nrm = y.norm();
                if nrm > BLOWUP_NORM {
                    blowup = Some(tt);
                    return false;
                }
                !(origin_fixed && nrm < PIN_NORM)
            });
            x = match run {
                Ok((y, _)) => y,
                Err(OdeFailure::Aborted { t: tt }) => {
                    if let Some(tb) = blowup {
                        return Err(SysError::BlowupDetected { t: tb });
                    }
                    let _ = tt;
                    zero.clone()
                }
                Err(e) => {
                    return Err(SysError::IntegrationFailure {
                        t,
                        reason: format!("{e:?}"),
                    })
                }
            };
        }
        t = stop;
        while next_report < report.len() && report[next_report] <= t + 1e-14 * t_end {
            times.push(report[next_report]);
            states.push(x.clone());
            next_report += 1;
        }
    }
    Ok(Trajectory {
        times,
        states,
        signal: Some(signal.clone()),
        tol_used: tol,
    })
}

// ---------------------------------------------------------------------------
// Catalog

/// A catalog system with its certificate and closed-form reference data.
#[derive(Clone)]
pub struct CatalogEntry {
    pub system: DisturbedSystem,
    pub certificate: LyapunovCertificate,
    /// Known change of variables for oracle tests, if any.
    pub reference_change: Option<StateMap>,
    /// Known scalar reference function (e.g. V₁ for `cubic_1d`).
    pub reference_scalar: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    pub description: &'static str,
}

impl fmt::Debug for CatalogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CatalogEntry")
            .field("system", &self.system)
            .field("certificate", &self.certificate)
            .field("description", &self.description)
            .finish()
    }
}

/// One row of [`list_catalog`].
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogInfo {
    pub name: &'static str,
    pub dim_x: usize,
    pub dim_d: usize,
    pub has_decay: bool,
    pub has_iss_gain: bool,
    pub has_bounds: bool,
    pub description: &'static str,
}

pub const CATALOG_NAMES: [&str; 5] = ["halfspeed_1d", "cubic_1d", "linear_2d", "coupled_2d", "iss_scalar"];

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

/// Looks up a catalog entry by name.
pub fn catalog(name: &str) -> Result<CatalogEntry, SysError> {
    let sq = || MonotoneScalarFn::power(1.0, 2.0);
    match name {
        "halfspeed_1d" => Ok(CatalogEntry {
            system: DisturbedSystem::autonomous(name, 1, |x| x * -0.5),
            // L_f V = −x²
            certificate: LyapunovCertificate::squared_norm(1).with_decay(sq()),
            reference_change: Some(Arc::new(|x: &DVector<f64>| v1(x[0].signum() * x[0] * x[0]))),
            reference_scalar: None,
            description: "x' = -x/2, V = x^2",
        }),
        "cubic_1d" => {
            let mut system = DisturbedSystem::autonomous(name, 1, |x| v1(-x[0].powi(3)));
            system.non_lipschitz_at_origin = false;
            Ok(CatalogEntry {
                system,
                // L_f V = −2x⁴
                certificate: LyapunovCertificate::squared_norm(1).with_decay(MonotoneScalarFn::power(2.0, 4.0)),
                reference_change: None,
                reference_scalar: Some(Arc::new(|x: f64| {
                    if x == 0.0 {
                        0.0
                    } else {
                        (-1.0 / (2.0 * x * x)).exp()
                    }
                })),
                description: "x' = -x^3, V = x^2 (nontrivial center manifold)",
            })
        }
        "linear_2d" => Ok(CatalogEntry {
            // rotation perturbation leaves ‖x‖² decay untouched: L_f V = −2‖x‖²
            system: DisturbedSystem::new(name, 2, 1, DisturbanceSet::Ball(1.0), |x, d| {
                DVector::from_vec(vec![-x[0] - d[0] * x[1], -x[1] + d[0] * x[0]])
            }),
            certificate: LyapunovCertificate::squared_norm(2).with_decay(MonotoneScalarFn::power(2.0, 2.0)),
            reference_change: None,
            reference_scalar: None,
            description: "x' = -x + d J x (J rotation), |d| <= 1, V = |x|^2",
        }),
        "coupled_2d" => {
            let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
            // AᵀP + PA = −I
            let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.75]);
            Ok(CatalogEntry {
                system: DisturbedSystem::linear(name, a),
                certificate: LyapunovCertificate::quadratic("x'Px", p).with_decay(sq()),
                reference_change: None,
                reference_scalar: None,
                description: "x' = [[-1,1],[0,-1]] x, V = x'Px with A'P + PA = -I",
            })
        }
        "iss_scalar" => Ok(CatalogEntry {
            system: DisturbedSystem::new(name, 1, 1, DisturbanceSet::Ball(1.0), |x, d| v1(-x[0] + d[0])),
            // |x| > 2|d| ⇒ 2x(−x + d) ≤ −x² ≤ −x²/2
            certificate: LyapunovCertificate::squared_norm(1)
                .with_decay(MonotoneScalarFn::power(0.5, 2.0))
                .with_iss_gain(MonotoneScalarFn::linear(2.0)),
            reference_change: None,
            reference_scalar: None,
            description: "x' = -x + d, |d| <= 1, V = x^2, chi(r) = 2r",
        }),
        other => Err(SysError::UnknownName(other.to_owned())),
    }
}

pub fn list_catalog() -> Vec<CatalogInfo> {
    CATALOG_NAMES
        .iter()
        .map(|&name| {
            let e = catalog(name).expect("catalog names are valid");
            CatalogInfo {
                name,
                dim_x: e.system.dim_x(),
                dim_d: e.system.dim_d(),
                has_decay: e.certificate.decay.is_some(),
                has_iss_gain: e.certificate.iss_gain.is_some(),
                has_bounds: e.certificate.bounds.is_some(),
                description: e.description,
            }
        })
        .collect()
}
