//! Changes of variables `T(x) = h(W(x))·Q(x)`, their pushforward systems, the
//! trajectory-transport normal form and the input-space map `R`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::kfun::{
    check_gamma_property, gamma_level_grid, monotone_envelope, ComparisonClass, EnvelopeSide,
    KfunError, MonotoneScalarFn,
};
use crate::lyap::{
    axis_directions, grad_flow, q_jacobian, q_map, ray_root, sphere_map, GradientFlowConfig,
    LyapError, LyapunovCertificate, SphereMap,
};
use crate::ode::{Dopri5, StepControl};
use crate::sampling::{cube_to_ball, halton, log_grid};
use crate::sys::{DisturbanceSet, DisturbedSystem, BLOWUP_NORM};

/// Levels on which every map is certified.
pub const WORKING_LEVELS: (f64, f64) = (1e-6, 1e3);
/// Below this level `γ(‖y‖)` the pushforward is identified with zero. Stated
/// on the level rather than on `‖y‖` because steep `h` maps the bottom of the
/// working range to `‖y‖` far below any fixed radius.
pub const ORIGIN_FLOOR: f64 = 1e-14;
/// Longest trajectory-transport time searched for the level crossing.
const TRANSPORT_HORIZON: f64 = 200.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum XformError {
    #[error("level set V = {level} is not star-shaped (witness {witness:?})")]
    NotStarShaped { level: f64, witness: Vec<f64> },
    #[error("gamma violates gamma/gamma' >= s at s = {s} (ratio {ratio})")]
    GammaPropertyViolated { s: f64, ratio: f64 },
    #[error("backward integration from {state:?} escaped before reaching |y| = {target}")]
    BackwardBlowup { state: Vec<f64>, target: f64 },
    #[error("W is not of class K-infinity: {0}")]
    NotKInfinity(String),
    #[error("level-set transport failed: {0}")]
    Transport(LyapError),
    #[error(transparent)]
    Kfun(#[from] KfunError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl From<LyapError> for XformError {
    fn from(e: LyapError) -> Self {
        match e {
            LyapError::NotStarShaped { level, witness } => XformError::NotStarShaped { level, witness },
            other => XformError::Transport(other),
        }
    }
}

/// How `Q` and `W` are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeKind {
    /// `Q = S∘π` with π the normalized gradient flow, `W` the certificate.
    GradientFlow,
    /// `π` and `W = e^{t(x)}` from the system's own trajectories.
    TrajectoryTransport,
}

/// Which choices produced a change of variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub kind: ChangeKind,
    pub certificate: String,
    pub gamma: String,
    pub level: f64,
}

#[derive(Clone)]
enum Engine {
    Gradient,
    Transport { system: DisturbedSystem, control: StepControl },
}

/// A change of variables `y = T(x)` fixing the origin.
#[derive(Clone)]
pub struct CoordinateChange {
    cert: LyapunovCertificate,
    gamma: MonotoneScalarFn,
    h: MonotoneScalarFn,
    c: f64,
    sphere: SphereMap,
    flow: GradientFlowConfig,
    engine: Engine,
    provenance: Provenance,
}

impl fmt::Debug for CoordinateChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoordinateChange").field("provenance", &self.provenance).finish()
    }
}

/// Builds `T(x) = γ⁻¹(W(x))·Q(x)` on the level set `W = c`.
pub fn build_change(
    cert: &LyapunovCertificate,
    gamma: &MonotoneScalarFn,
    c: f64,
) -> Result<CoordinateChange, XformError> {
    if !(c > 0.0) {
        return Err(XformError::InvalidInput("reference level must be positive".into()));
    }
    let sphere = sphere_map(cert, c)?;
    check_gamma_property(gamma, &gamma_level_grid(WORKING_LEVELS.1)).map_err(|e| match e {
        KfunError::GammaPropertyViolated { s, ratio } => XformError::GammaPropertyViolated { s, ratio },
        other => XformError::Kfun(other),
    })?;
    Ok(CoordinateChange {
        cert: cert.clone(),
        gamma: gamma.clone(),
        h: gamma.inverse(),
        c,
        sphere,
        flow: GradientFlowConfig::default(),
        engine: Engine::Gradient,
        provenance: Provenance {
            kind: ChangeKind::GradientFlow,
            certificate: cert.name().to_owned(),
            gamma: gamma.name().to_owned(),
            level: c,
        },
    })
}

impl CoordinateChange {
    pub fn dim(&self) -> usize {
        self.cert.dim()
    }

    pub fn level(&self) -> f64 {
        self.c
    }

    pub fn gamma(&self) -> &MonotoneScalarFn {
        &self.gamma
    }

    pub fn certificate(&self) -> &LyapunovCertificate {
        &self.cert
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// The scalar whose `h`-image is `‖T(x)‖`: `W(x)` for gradient changes,
    /// `e^{t(x)}` for trajectory transport.
    pub fn level_value(&self, x: &DVector<f64>) -> Result<f64, XformError> {
        match &self.engine {
            Engine::Gradient => Ok(self.cert.value(x)),
            Engine::Transport { .. } => {
                if x.norm() == 0.0 {
                    return Ok(0.0);
                }
                Ok(self.transport_to_level(x)?.0.exp())
            }
        }
    }

    /// `y = T(x)`.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, XformError> {
        self.check_dim(x)?;
        if x.norm() == 0.0 {
            return Ok(DVector::zeros(x.len()));
        }
        match &self.engine {
            Engine::Gradient => {
                let w = self.cert.value(x);
                Ok(self.q(x)? * self.h.eval(w))
            }
            Engine::Transport { .. } => {
                let (t, p) = self.transport_to_level(x)?;
                Ok(&p * (t.exp() / p.norm()))
            }
        }
    }

    /// `x = T⁻¹(y)`: the point on the level `γ(‖y‖)` reached from the level-`c`
    /// point in direction `y/‖y‖`.
    pub fn inverse(&self, y: &DVector<f64>) -> Result<DVector<f64>, XformError> {
        self.check_dim(y)?;
        let r = y.norm();
        if r == 0.0 {
            return Ok(DVector::zeros(y.len()));
        }
        let u = y / r;
        match &self.engine {
            Engine::Gradient => {
                let level = self.gamma.eval(r);
                if !(level > 0.0) {
                    return Ok(DVector::zeros(y.len()));
                }
                if self.dim() == 1 {
                    return Ok(&u * ray_root(&self.cert, &u, level)?);
                }
                let p = self.sphere.inverse(&u)?;
                if level >= self.flow.v_min {
                    return Ok(grad_flow(&self.cert, &p, level - self.c, &self.flow)?);
                }
                // below the floor: follow the ray through the floor point
                let xf = grad_flow(&self.cert, &p, self.flow.v_min - self.c, &self.flow)?;
                let uf = &xf / xf.norm();
                Ok(&uf * ray_root(&self.cert, &uf, level)?)
            }
            Engine::Transport { system, control } => {
                let p = self.sphere.inverse(&u)?;
                let t = r.ln();
                let d0 = system.zero_disturbance();
                let rhs = |_t: f64, z: &DVector<f64>| system.rhs(z, &d0);
                let solver = Dopri5::new(*control);
                let mut blew = false;
                let run = solver.integrate(&rhs, 0.0, &p, -t, |_, z| {
                    blew = z.norm() > BLOWUP_NORM;
                    !blew
                });
                match run {
                    Ok((x, _)) => Ok(x),
                    Err(_) if t > 0.0 || blew => Err(XformError::BackwardBlowup {
                        state: p.iter().copied().collect(),
                        target: r,
                    }),
                    Err(e) => Err(XformError::InvalidInput(format!("forward transport failed: {e:?}"))),
                }
            }
        }
    }

    /// `DT(x) = h'(W(x))·Q(x)∇W(x)ᵀ + h(W(x))·DQ(x)` for gradient changes;
    /// central differences for trajectory transport.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, XformError> {
        self.check_dim(x)?;
        let n = x.len();
        if x.norm() == 0.0 {
            return Ok(DMatrix::zeros(n, n));
        }
        match &self.engine {
            Engine::Transport { .. } => self.jacobian_fd(x),
            Engine::Gradient => {
                let w = self.cert.value(x);
                let q = self.q(x)?;
                let g = self.cert.gradient(x);
                let mut jac = &q * g.transpose() * self.h.deriv(w);
                if n > 1 {
                    jac += self.dq(x)? * self.h.eval(w);
                }
                Ok(jac)
            }
        }
    }

    /// Central-difference `DT` with step `1e-5·‖x‖`.
    pub fn jacobian_fd(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, XformError> {
        let n = x.len();
        let h = 1e-5 * x.norm().max(1e-300);
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let col = (self.forward(&xp)? - self.forward(&xm)?) / (2.0 * h);
            jac.set_column(i, &col);
        }
        Ok(jac)
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<(), XformError> {
        if x.len() != self.dim() {
            return Err(XformError::InvalidInput(format!(
                "expected a point of dimension {}, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// `Q(x)`; below the level floor the floor point on the same ray is used.
    fn q(&self, x: &DVector<f64>) -> Result<DVector<f64>, XformError> {
        if self.dim() == 1 {
            return Ok(DVector::from_element(1, x[0].signum()));
        }
        if self.cert.value(x) >= self.flow.v_min {
            return Ok(q_map(&self.cert, self.c, x, &self.flow)?);
        }
        let u = x / x.norm();
        let xf = &u * ray_root(&self.cert, &u, self.flow.v_min)?;
        Ok(q_map(&self.cert, self.c, &xf, &self.flow)?)
    }

    fn dq(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, XformError> {
        let n = x.len();
        if n == 1 {
            return Ok(DMatrix::zeros(1, 1));
        }
        Ok(q_jacobian(&self.cert, self.c, x, &self.flow)?)
    }

    /// Time `t(x)` with `V(φ(t, x)) = c` and the crossing point `φ(t(x), x)`.
    fn transport_to_level(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), XformError> {
        let Engine::Transport { system, control } = &self.engine else {
            unreachable!("transport requested on a gradient change");
        };
        let c = self.c;
        let v = self.cert.value(x);
        if v == c {
            return Ok((0.0, x.clone()));
        }
        // forward in time when above the level, backward when below
        let dir = if v > c { 1.0 } else { -1.0 };
        let d0 = system.zero_disturbance();
        let rhs = |_s: f64, z: &DVector<f64>| system.rhs(z, &d0) * dir;
        let solver = Dopri5::new(*control);
        let cert = &self.cert;
        let mut hit: Option<(f64, DVector<f64>)> = None;
        let mut blew = false;
        let run = solver.integrate(&rhs, 0.0, x, TRANSPORT_HORIZON, |s, z| {
            if z.norm() > BLOWUP_NORM {
                blew = true;
                return false;
            }
            if (cert.value(z) - c) * dir <= 0.0 {
                hit = Some((s, z.clone()));
                return false;
            }
            true
        });
        let escaped = || XformError::BackwardBlowup {
            state: x.iter().copied().collect(),
            target: c,
        };
        let (mut s, mut z) = match (hit, run) {
            (Some(h), _) => h,
            (None, Err(_)) | (None, Ok(_)) if dir < 0.0 || blew => return Err(escaped()),
            (None, _) => {
                return Err(XformError::InvalidInput(
                    "trajectory does not reach the reference level".into(),
                ))
            }
        };
        // Newton in time onto the level
        for _ in 0..8 {
            let g = cert.value(&z) - c;
            if g.abs() <= 1e-15 * c {
                break;
            }
            let rate = cert.directional(&z, &rhs(s, &z));
            if !(rate.abs() > 0.0) {
                break;
            }
            let ds = -g / rate;
            z = solver
                .integrate(&rhs, s, &z, s + ds, |_, _| true)
                .map_err(|e| XformError::InvalidInput(format!("level refinement failed: {e:?}")))?
                .0;
            s += ds;
        }
        Ok((dir * s, z))
    }
}

/// `ẏ = f̃(y, d) = DT(T⁻¹(y))·f(T⁻¹(y), d)`.
#[derive(Clone, Debug)]
pub struct TransformedSystem {
    pub base: DisturbedSystem,
    pub change: CoordinateChange,
}

/// Pushes `system` forward through `change`.
pub fn pushforward(system: &DisturbedSystem, change: &CoordinateChange) -> TransformedSystem {
    TransformedSystem {
        base: system.clone(),
        change: change.clone(),
    }
}

impl TransformedSystem {
    pub fn dim_x(&self) -> usize {
        self.base.dim_x()
    }

    pub fn dim_d(&self) -> usize {
        self.base.dim_d()
    }

    /// `f̃(y, d)`; zero once `γ(‖y‖) < ORIGIN_FLOOR`.
    pub fn rhs(&self, y: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>, XformError> {
        let ny = y.norm();
        if ny == 0.0 || self.change.gamma().eval(ny) < ORIGIN_FLOOR {
            return Ok(DVector::zeros(y.len()));
        }
        let x = self.change.inverse(y)?;
        let jac = self.change.jacobian(&x)?;
        Ok(jac * self.base.rhs(&x, d))
    }

    /// The transformed dynamics as a plain system; evaluation failures
    /// surface as NaN.
    pub fn as_system(&self) -> DisturbedSystem {
        let me = self.clone();
        let n = self.dim_x();
        let mut sys = DisturbedSystem::new(
            format!("{}~", self.base.name()),
            n,
            self.dim_d(),
            self.base.disturbance_set,
            move |y, d| me.rhs(y, d).unwrap_or_else(|_| DVector::from_element(n, f64::NAN)),
        );
        sys.non_lipschitz_at_origin = true;
        sys
    }
}

/// Exact normal form `ẏ = −y` from trajectory transport:
/// `W(x) = e^{t(x)}` with `V(φ(t(x), x)) = c`, `π(x) = φ(t(x), x)` and
/// `T(x) = W(x)·π(x)/‖π(x)‖`.
///
/// Fails with [`XformError::BackwardBlowup`] when backward trajectories from
/// the level set escape before covering `‖y‖ ∈ [1e-3, 1e3]`, and with
/// [`XformError::NotKInfinity`] when `V` does not grow along the image.
pub fn flow_based_normal_form(
    system: &DisturbedSystem,
    cert: &LyapunovCertificate,
    c: f64,
) -> Result<(CoordinateChange, TransformedSystem), XformError> {
    if system.dim_d() != 0 && system.disturbance_set != DisturbanceSet::Ball(0.0) {
        return Err(XformError::InvalidInput(
            "trajectory transport needs a system without disturbances".into(),
        ));
    }
    if system.dim_x() != cert.dim() {
        return Err(XformError::InvalidInput("system and certificate dimensions differ".into()));
    }
    let sphere = sphere_map(cert, c)?;
    let gamma = MonotoneScalarFn::identity();
    let change = CoordinateChange {
        cert: cert.clone(),
        h: gamma.clone(),
        gamma,
        c,
        sphere,
        flow: GradientFlowConfig::default(),
        engine: Engine::Transport {
            system: system.clone(),
            control: StepControl {
                rtol: 1e-12,
                atol: 1e-300,
                norm_scaled: true,
                ..StepControl::default()
            },
        },
        provenance: Provenance {
            kind: ChangeKind::TrajectoryTransport,
            certificate: cert.name().to_owned(),
            gamma: "identity".into(),
            level: c,
        },
    };
    for u in axis_directions(cert.dim()) {
        let mut prev = 0.0;
        for k in -3..=3 {
            let y = &u * 10f64.powi(k);
            let x = change.inverse(&y)?;
            let v = cert.value(&x);
            if !(v > prev) {
                return Err(XformError::NotKInfinity(format!(
                    "V does not increase along the image ray at |y| = 1e{k}"
                )));
            }
            prev = v;
        }
    }
    let tsys = pushforward(system, &change);
    Ok((change, tsys))
}

// ---------------------------------------------------------------------------
// Input-space change

/// Decades below α(r) covered by the log-radial samples.
const LOG_SHELL_DECADES: f64 = 9.0;

/// Sampling plan for the supremum defining α̃.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupSampler {
    pub radii: usize,
    pub per_radius: usize,
    pub r_min: f64,
    /// Largest disturbance radius; defaults to the radius of D (10 if D is
    /// unbounded).
    pub r_max: Option<f64>,
    pub safety: f64,
}

impl Default for SupSampler {
    fn default() -> Self {
        Self {
            radii: 64,
            per_radius: 4096,
            r_min: 1e-6,
            r_max: None,
            safety: 1.1,
        }
    }
}

/// `v = R(d) = α̃(‖d‖)²·d/‖d‖` with its inverse.
#[derive(Clone, Debug)]
pub struct InputChange {
    alpha_tilde: MonotoneScalarFn,
    /// Sampled `(r, sup (2⟨f,x⟩ + ‖x‖²)⁺)` pairs, empty for analytic α̃.
    pub samples: Vec<(f64, f64)>,
    /// The sampled supremum vanished at every radius.
    pub degenerate: bool,
}

/// Builds α̃ and `R` for an ISES system with gain `alpha` (`c = λ = 1`).
///
/// For each radius `r` the supremum of `(2⟨f(x,d),x⟩ + ‖x‖²)⁺` over
/// `‖x‖ ≤ α(r)`, `‖d‖ ≤ r` is sampled, inflated by `safety`, assigned to the
/// next-smaller radius (so the envelope dominates between radii) and
/// enveloped from above; `α̃` is the fourth root of the envelope, which makes
/// `L_{f̄_v}‖x‖² ≤ −‖x‖² + ‖v‖²` hold with `v = R(d)`.
pub fn input_change(
    system: &DisturbedSystem,
    alpha: &MonotoneScalarFn,
    sampler: &SupSampler,
) -> Result<InputChange, XformError> {
    let (n, m) = (system.dim_x(), system.dim_d());
    if m == 0 {
        return Err(XformError::InvalidInput("system has no disturbance input".into()));
    }
    if n + m > 16 {
        return Err(XformError::InvalidInput("state plus input dimension above 16".into()));
    }
    let r_max = sampler.r_max.unwrap_or(match system.disturbance_set {
        DisturbanceSet::Ball(r) => r,
        DisturbanceSet::Unbounded => 10.0,
    });
    if !(r_max > sampler.r_min) || sampler.radii < 2 || !(sampler.safety >= 1.0) {
        return Err(XformError::InvalidInput("bad supremum sampling plan".into()));
    }
    // Each Halton point gives a uniform-in-ball x, a log-radial copy so the
    // positive region is still hit when α(r) is much larger than where it
    // lives, and that copy again with d on the sphere ‖d‖ = r.
    let unit: Vec<(DVector<f64>, DVector<f64>)> = (1..=sampler.per_radius as u64)
        .flat_map(|i| {
            let h = halton(i, n + m + 1);
            let (ux, ud) = (cube_to_ball(&h[..n]), cube_to_ball(&h[n..n + m]));
            let nx = ux.norm();
            let shell = if nx > 0.0 {
                &ux * (10f64.powf(-LOG_SHELL_DECADES * h[n + m]) / nx)
            } else {
                ux.clone()
            };
            let nd = ud.norm();
            let edge = if nd > 0.0 { &ud / nd } else { ud.clone() };
            [(ux, ud.clone()), (shell.clone(), ud), (shell, edge)]
        })
        .collect();
    let radii = log_grid(sampler.r_min, r_max, sampler.radii);
    let mut sups = Vec::with_capacity(radii.len());
    for &r in &radii {
        let ax = alpha.eval(r);
        let mut sup: f64 = 0.0;
        for (ux, ud) in &unit {
            let x = ux * ax;
            let d = ud * r;
            let f = system.rhs(&x, &d);
            let q = 2.0 * f.dot(&x) + x.norm_squared();
            if !q.is_finite() {
                return Err(XformError::InvalidInput(format!(
                    "right-hand side not finite at x = {x:?}, d = {d:?}"
                )));
            }
            sup = sup.max(q);
        }
        sups.push(sup * sampler.safety);
    }
    let k = radii.len();
    let mut samples: Vec<(f64, f64)> = (0..k - 1).map(|i| (radii[i], sups[i + 1])).collect();
    samples.push((radii[k - 1], sups[k - 1]));
    let degenerate = sups.iter().all(|s| *s == 0.0);
    let energy = monotone_envelope(&samples, EnvelopeSide::Upper)?;
    Ok(InputChange {
        alpha_tilde: fourth_root(energy),
        samples,
        degenerate,
    })
}

fn fourth_root(energy: MonotoneScalarFn) -> MonotoneScalarFn {
    let (e, ed, ei) = (energy.clone(), energy.clone(), energy);
    MonotoneScalarFn::new("alpha_tilde", ComparisonClass::KInfinity, move |r| e.eval(r).max(0.0).powf(0.25))
        .with_derivative(move |r| {
            let v = ed.eval(r);
            if v <= 0.0 {
                f64::INFINITY
            } else {
                0.25 * v.powf(-0.75) * ed.deriv(r)
            }
        })
        .with_inverse(move |a| ei.inv(a.powi(4)))
}

impl InputChange {
    /// Uses a given α̃ instead of the sampled one.
    pub fn from_alpha_tilde(alpha_tilde: MonotoneScalarFn) -> Self {
        Self {
            alpha_tilde,
            samples: Vec::new(),
            degenerate: false,
        }
    }

    pub fn alpha_tilde(&self) -> &MonotoneScalarFn {
        &self.alpha_tilde
    }

    /// `R(d) = α̃(‖d‖)²·d/‖d‖`, `R(0) = 0`.
    pub fn r(&self, d: &DVector<f64>) -> DVector<f64> {
        let nd = d.norm();
        if nd == 0.0 {
            return d.clone();
        }
        d * (self.alpha_tilde.eval(nd).powi(2) / nd)
    }

    /// `R⁻¹(v)`: the radial preimage with `α̃(‖d‖)² = ‖v‖`.
    pub fn r_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        let nv = v.norm();
        if nv == 0.0 {
            return v.clone();
        }
        let nd = self.alpha_tilde.inv(nv.sqrt());
        v * (nd / nv)
    }

    /// `f̄(x, v) = f(x, R⁻¹(v))` with the correspondingly mapped input set.
    pub fn transformed_system(&self, system: &DisturbedSystem) -> DisturbedSystem {
        let me = self.clone();
        let base = system.clone();
        let set = match system.disturbance_set {
            DisturbanceSet::Ball(r) => DisturbanceSet::Ball(self.alpha_tilde.eval(r).powi(2)),
            DisturbanceSet::Unbounded => DisturbanceSet::Unbounded,
        };
        DisturbedSystem::new(
            format!("{}-bar", system.name()),
            system.dim_x(),
            system.dim_d(),
            set,
            move |x, v| base.rhs(x, &me.r_inv(v)),
        )
    }
}

/// Sampled lookup table of `T`: header `x1..xn,y1..yn`, 17 significant digits.
pub fn change_table(change: &CoordinateChange, points: &[DVector<f64>]) -> Result<String, XformError> {
    let n = change.dim();
    let mut out = String::new();
    let cols: Vec<String> = (1..=n)
        .map(|i| format!("x{i}"))
        .chain((1..=n).map(|i| format!("y{i}")))
        .collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for x in points {
        let y = change.forward(x)?;
        let row: Vec<String> = x.iter().chain(y.iter()).map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
