//! Lyapunov certificates and the level-set machinery built on them.
//!
//! The normalized gradient flow `ẋ = ∇V/‖∇V‖²` raises `V` at unit rate, so
//! `V(ψ(t, x)) = V(x) + t`. It is integrated here in the logarithmic level
//! coordinate `u = ln V`, where `dx/du = V·∇V/‖∇V‖²` is well scaled over many
//! decades of level, and the end point is polished onto the target level by
//! Newton steps along the gradient.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::kfun::{invert, ComparisonClass, MonotoneScalarFn};
use crate::ode::{Dopri5, OdeFailure, StepControl};
use crate::sampling::{log_grid, sphere_directions};

pub type StateFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapError {
    #[error("target level {target} is below the level floor {v_min}")]
    LevelFloorHit { target: f64, v_min: f64 },
    #[error("gradient flow step control collapsed near level {level}")]
    StiffFlow { level: f64 },
    #[error("level set {level} is not star-shaped; witness {witness:?}")]
    NotStarShaped { level: f64, witness: Vec<f64> },
    #[error("the origin has no level-set projection")]
    OriginState,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// A Lyapunov function `V` with optional comparison data.
///
/// `decay` is α₁ in `L_f V ≤ −α₁(‖x‖)` (for ISS certificates this holds only
/// when `‖x‖ > χ(‖d‖)`), `iss_gain` is χ, and `bounds` is `(α₂, α₃)` with
/// `α₂(‖x‖) ≤ V(x) ≤ α₃(‖x‖)`.
#[derive(Clone)]
pub struct LyapunovCertificate {
    name: String,
    dim: usize,
    value: StateFn,
    gradient: Option<GradFn>,
    pub decay: Option<MonotoneScalarFn>,
    pub iss_gain: Option<MonotoneScalarFn>,
    pub bounds: Option<(MonotoneScalarFn, MonotoneScalarFn)>,
}

impl fmt::Debug for LyapunovCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovCertificate")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("analytic_gradient", &self.gradient.is_some())
            .field("decay", &self.decay.as_ref().map(|a| a.name().to_owned()))
            .field("iss_gain", &self.iss_gain.as_ref().map(|a| a.name().to_owned()))
            .field("bounds", &self.bounds.is_some())
            .finish()
    }
}

impl LyapunovCertificate {
    pub fn new<F>(name: impl Into<String>, dim: usize, value: F) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            dim,
            value: Arc::new(value),
            gradient: None,
            decay: None,
            iss_gain: None,
            bounds: None,
        }
    }

    pub fn with_gradient<G>(mut self, grad: G) -> Self
    where
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(grad));
        self
    }

    pub fn with_decay(mut self, alpha1: MonotoneScalarFn) -> Self {
        self.decay = Some(alpha1);
        self
    }

    pub fn with_iss_gain(mut self, chi: MonotoneScalarFn) -> Self {
        self.iss_gain = Some(chi);
        self
    }

    pub fn with_bounds(mut self, alpha2: MonotoneScalarFn, alpha3: MonotoneScalarFn) -> Self {
        self.bounds = Some((alpha2, alpha3));
        self
    }

    /// `V(x) = ‖x‖²` with its comparison bounds.
    pub fn squared_norm(dim: usize) -> Self {
        Self::new("|x|^2", dim, |x: &DVector<f64>| x.norm_squared())
            .with_gradient(|x: &DVector<f64>| x * 2.0)
            .with_bounds(MonotoneScalarFn::power(1.0, 2.0), MonotoneScalarFn::power(1.0, 2.0))
    }

    /// `V(x) = xᵀPx` for symmetric positive definite `P`.
    pub fn quadratic(name: impl Into<String>, p: DMatrix<f64>) -> Self {
        let dim = p.nrows();
        let eig = p.clone().symmetric_eigen();
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        let (pv, pg) = (p.clone(), p);
        Self::new(name, dim, move |x: &DVector<f64>| x.dot(&(&pv * x)))
            .with_gradient(move |x: &DVector<f64>| (&pg * x) * 2.0)
            .with_bounds(MonotoneScalarFn::power(lo, 2.0), MonotoneScalarFn::power(hi, 2.0))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    #[inline]
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    /// Analytic gradient, or central differences with step `1e-6·max(1, ‖x‖)`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        if let Some(g) = &self.gradient {
            return g(x);
        }
        let h = 1e-6 * x.norm().max(1.0);
        let mut g = DVector::zeros(x.len());
        let mut xp = x.clone();
        for i in 0..x.len() {
            let xi = x[i];
            xp[i] = xi + h;
            let fp = self.value(&xp);
            xp[i] = xi - h;
            let fm = self.value(&xp);
            xp[i] = xi;
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// `W = ρ∘V` with gradient `ρ'(V)∇V`. Comparison bounds are carried
    /// through ρ; the decay rate is dropped since it changes with ρ.
    pub fn reparametrized(&self, rho: &MonotoneScalarFn) -> Self {
        let (base, base_g) = (self.clone(), self.clone());
        let (r, rd) = (rho.clone(), rho.clone());
        let mut out = Self::new(format!("{}∘{}", rho.name(), self.name), self.dim, move |x| {
            r.eval(base.value(x))
        })
        .with_gradient(move |x| base_g.gradient(x) * rd.deriv(base_g.value(x)));
        out.iss_gain = self.iss_gain.clone();
        out.bounds = self.bounds.as_ref().map(|(a2, a3)| {
            (
                MonotoneScalarFn::compose(rho, a2),
                MonotoneScalarFn::compose(rho, a3),
            )
        });
        out
    }

    /// `L_f V(x) = ⟨∇V(x), f⟩`.
    pub fn directional(&self, x: &DVector<f64>, f: &DVector<f64>) -> f64 {
        self.gradient(x).dot(f)
    }
}

/// Settings for the normalized gradient flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientFlowConfig {
    /// Relative local error per unit of log-level.
    pub step_tol: f64,
    /// Levels below this are identified with the origin.
    pub v_min: f64,
    pub max_steps: usize,
}

impl Default for GradientFlowConfig {
    fn default() -> Self {
        Self {
            step_tol: 1e-12,
            v_min: 1e-10,
            max_steps: 100_000,
        }
    }
}

impl GradientFlowConfig {
    fn control(&self) -> StepControl {
        StepControl {
            rtol: self.step_tol,
            atol: 1e-300,
            h_min: 1e-14,
            max_steps: self.max_steps,
            safety: 0.9,
            norm_scaled: true,
        }
    }
}

/// `ψ(t, x₀)`: transports `x₀` from level `V(x₀)` to level `V(x₀) + t`.
pub fn grad_flow(
    cert: &LyapunovCertificate,
    x0: &DVector<f64>,
    t: f64,
    cfg: &GradientFlowConfig,
) -> Result<DVector<f64>, LyapError> {
    check_dim(cert, x0)?;
    if t == 0.0 {
        return Ok(x0.clone());
    }
    let v0 = cert.value(x0);
    if !(v0 > 0.0) {
        return Err(LyapError::OriginState);
    }
    let target = v0 + t;
    if target < cfg.v_min {
        return Err(LyapError::LevelFloorHit {
            target,
            v_min: cfg.v_min,
        });
    }
    let rhs = |_u: f64, x: &DVector<f64>| -> DVector<f64> {
        let g = cert.gradient(x);
        let gg = g.norm_squared();
        if !(gg > 0.0) || !gg.is_finite() {
            return DVector::from_element(x.len(), f64::NAN);
        }
        g * (cert.value(x) / gg)
    };
    let solver = Dopri5::new(cfg.control());
    let (mut x, _) = solver
        .integrate(&rhs, v0.ln(), x0, target.ln(), |_, _| true)
        .map_err(|e| match e {
            OdeFailure::StepCollapse { t }
            | OdeFailure::TooManySteps { t }
            | OdeFailure::NonFinite { t }
            | OdeFailure::Aborted { t } => LyapError::StiffFlow { level: t.exp() },
        })?;
    polish_to_level(cert, &mut x, target);
    Ok(x)
}

/// Newton steps along the gradient onto `V = target`.
fn polish_to_level(cert: &LyapunovCertificate, x: &mut DVector<f64>, target: f64) {
    for _ in 0..3 {
        let v = cert.value(x);
        let res = target - v;
        if res.abs() <= 1e-15 * target {
            break;
        }
        let g = cert.gradient(x);
        let gg = g.norm_squared();
        if !(gg > 0.0) {
            break;
        }
        *x += g * (res / gg);
    }
}

/// `π(x) = ψ(c − V(x), x)`.
pub fn project_to_level(
    cert: &LyapunovCertificate,
    x: &DVector<f64>,
    c: f64,
    cfg: &GradientFlowConfig,
) -> Result<DVector<f64>, LyapError> {
    if c < cfg.v_min {
        return Err(LyapError::LevelFloorHit {
            target: c,
            v_min: cfg.v_min,
        });
    }
    let v = cert.value(x);
    grad_flow(cert, x, c - v, cfg)
}

fn check_dim(cert: &LyapunovCertificate, x: &DVector<f64>) -> Result<(), LyapError> {
    if x.len() != cert.dim {
        return Err(LyapError::Dimension {
            expected: cert.dim,
            got: x.len(),
        });
    }
    Ok(())
}

/// Radius `r` with `V(r·u) = level` along the unit direction `u`.
pub fn ray_root(
    cert: &LyapunovCertificate,
    u: &DVector<f64>,
    level: f64,
) -> Result<f64, LyapError> {
    let (cv, cg) = (cert.clone(), cert.clone());
    let (uv, ug) = (u.clone(), u.clone());
    let along = MonotoneScalarFn::new("ray", ComparisonClass::K, move |r| cv.value(&(&uv * r)))
        .with_derivative(move |r| cg.gradient(&(&ug * r)).dot(&ug));
    let r = invert(&along, level).map_err(|_| LyapError::NotStarShaped {
        level,
        witness: u.iter().copied().collect(),
    })?;
    Ok(r)
}

/// Radial identification of the level set `V⁻¹(c)` with the unit sphere.
#[derive(Clone, Debug)]
pub struct SphereMap {
    cert: LyapunovCertificate,
    level: f64,
}

/// Number of quasi-random directions used by the star-shapedness check.
pub const STAR_CHECK_SAMPLES: usize = 256;

impl SphereMap {
    pub fn level(&self) -> f64 {
        self.level
    }

    /// `S(x) = x/‖x‖`.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        x / x.norm()
    }

    /// `S⁻¹(u) = r(u)·u` with `V(r(u)·u) = c`.
    pub fn inverse(&self, u: &DVector<f64>) -> Result<DVector<f64>, LyapError> {
        let r = ray_root(&self.cert, u, self.level)?;
        Ok(u * r)
    }
}

/// Builds the radial sphere map for level `c` after checking that `V` is
/// increasing along each sampled ray out to twice the level set and that
/// `⟨∇V(x), x⟩ > 0` on quasi-random points of the level set, including the
/// coordinate axes.
pub fn sphere_map(cert: &LyapunovCertificate, c: f64) -> Result<SphereMap, LyapError> {
    let n = cert.dim();
    let mut dirs = axis_directions(n);
    dirs.extend(sphere_directions(n, STAR_CHECK_SAMPLES, 0));
    for u in dirs {
        let r = ray_root(cert, &u, c)?;
        let x = &u * r;
        let along: Vec<f64> = (1..=64).map(|k| cert.value(&(&u * (r * k as f64 / 32.0)))).collect();
        // exact zeros are underflow of steep reparametrizations near the origin
        let single_crossing = along.windows(2).all(|w| w[1] > w[0] || w[1] == 0.0);
        if !single_crossing || !(cert.gradient(&x).dot(&x) > 0.0) {
            return Err(LyapError::NotStarShaped {
                level: c,
                witness: x.iter().copied().collect(),
            });
        }
    }
    Ok(SphereMap {
        cert: cert.clone(),
        level: c,
    })
}

/// `±e_i` for every coordinate.
pub fn axis_directions(n: usize) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(n);
            e[i] = s;
            out.push(e);
        }
    }
    out
}

/// `Q(x) = S(π(x))` for projection onto level `c`.
pub fn q_map(
    cert: &LyapunovCertificate,
    c: f64,
    x: &DVector<f64>,
    cfg: &GradientFlowConfig,
) -> Result<DVector<f64>, LyapError> {
    let p = project_to_level(cert, x, c, cfg)?;
    Ok(&p / p.norm())
}

/// Radial Jacobian `(I − uuᵀ)/‖x‖` of `x ↦ x/‖x‖`.
pub fn radial_jacobian(x: &DVector<f64>) -> DMatrix<f64> {
    let r = x.norm();
    let u = x / r;
    (DMatrix::identity(x.len(), x.len()) - &u * u.transpose()) / r
}

/// Central-difference Jacobian of `Q` with step `1e-6·max(1, ‖x‖)`.
///
/// Falls back to the radial formula when a difference stencil would drop
/// below the level floor.
pub fn q_jacobian(
    cert: &LyapunovCertificate,
    c: f64,
    x: &DVector<f64>,
    cfg: &GradientFlowConfig,
) -> Result<DMatrix<f64>, LyapError> {
    let n = x.len();
    let h = 1e-6 * x.norm().max(1.0);
    let mut stencil = Vec::with_capacity(2 * n);
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut xp = x.clone();
            xp[i] += s * h;
            if cert.value(&xp) < cfg.v_min || xp.norm() == 0.0 {
                return Ok(radial_jacobian(x));
            }
            stencil.push(xp);
        }
    }
    let mut jac = DMatrix::zeros(n, n);
    for i in 0..n {
        let qp = q_map(cert, c, &stencil[2 * i], cfg)?;
        let qm = q_map(cert, c, &stencil[2 * i + 1], cfg)?;
        jac.set_column(i, &((qp - qm) / (2.0 * h)));
    }
    Ok(jac)
}

/// Largest singular value.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Safety factor applied to the sampled supremum in [`estimate_l`].
pub const L_SAFETY: f64 = 1.5;

/// `L(s) ≈ 1.5 · sup_{V(x)=s} ‖DQ(x)‖` over `n_samples` quasi-random points of
/// the level set (coordinate axes first, then Halton directions).
pub fn estimate_l(
    cert: &LyapunovCertificate,
    c_ref: f64,
    s: f64,
    n_samples: usize,
    cfg: &GradientFlowConfig,
) -> Result<f64, LyapError> {
    if s < cfg.v_min {
        return Err(LyapError::LevelFloorHit {
            target: s,
            v_min: cfg.v_min,
        });
    }
    let mut sup: f64 = 0.0;
    for u in level_directions(cert.dim(), n_samples) {
        let x = &u * ray_root(cert, &u, s)?;
        let dq = q_jacobian(cert, c_ref, &x, cfg)?;
        sup = sup.max(operator_norm(&dq));
    }
    Ok(L_SAFETY * sup)
}

/// First `count` directions of the level-set sampling sequence.
pub fn level_directions(n: usize, count: usize) -> Vec<DVector<f64>> {
    let mut dirs = axis_directions(n);
    dirs.extend(sphere_directions(n, count, 0));
    dirs.truncate(count);
    dirs
}

// ---------------------------------------------------------------------------
// Certificate diagnostics

/// Where and how to sample a certificate.
#[derive(Debug, Clone, Copy)]
pub struct SamplingPlan {
    pub directions: usize,
    pub radii: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            directions: 64,
            radii: 24,
            r_min: 1e-2,
            r_max: 1e2,
        }
    }
}

/// Outcome of one sampled property.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub property: &'static str,
    pub pass: bool,
    pub checked: usize,
    pub witness: Option<Vec<f64>>,
}

impl PropertyCheck {
    fn new(property: &'static str) -> Self {
        Self {
            property,
            pass: true,
            checked: 0,
            witness: None,
        }
    }

    fn record(&mut self, ok: bool, at: &DVector<f64>) {
        self.checked += 1;
        if !ok && self.pass {
            self.pass = false;
            self.witness = Some(at.iter().copied().collect());
        }
    }
}

/// Sampled hypotheses of the construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateDiagnostics {
    pub positive_definite: PropertyCheck,
    pub proper: PropertyCheck,
    pub gradient_nonvanishing: PropertyCheck,
    pub bounds: Option<PropertyCheck>,
}

impl CertificateDiagnostics {
    pub fn pass(&self) -> bool {
        self.positive_definite.pass
            && self.proper.pass
            && self.gradient_nonvanishing.pass
            && self.bounds.as_ref().is_none_or(|b| b.pass)
    }
}

/// Checks positive definiteness, properness (growth along rays, including
/// the coordinate axes), nonvanishing gradient and comparison bounds.
pub fn check_certificate(cert: &LyapunovCertificate, plan: &SamplingPlan) -> CertificateDiagnostics {
    let n = cert.dim();
    let mut dirs = axis_directions(n);
    dirs.extend(sphere_directions(n, plan.directions, 0));
    let radii = log_grid(plan.r_min, plan.r_max, plan.radii.max(1));

    let mut pd = PropertyCheck::new("positive_definite");
    let origin = DVector::zeros(n);
    pd.record(cert.value(&origin).abs() <= 1e-14, &origin);
    let mut grad = PropertyCheck::new("gradient_nonvanishing");
    let mut bounds = cert.bounds.as_ref().map(|_| PropertyCheck::new("comparison_bounds"));
    for u in &dirs {
        for &r in &radii {
            let x = u * r;
            let v = cert.value(&x);
            pd.record(v > 0.0, &x);
            let g = cert.gradient(&x);
            grad.record(g.norm() > 0.0 && g.iter().all(|c| c.is_finite()), &x);
            if let (Some(b), Some((a2, a3))) = (bounds.as_mut(), cert.bounds.as_ref()) {
                let ok = a2.eval(r) <= v * (1.0 + 1e-12) + 1e-300
                    && v <= a3.eval(r) * (1.0 + 1e-12) + 1e-300;
                b.record(ok, &x);
            }
        }
    }

    let mut proper = PropertyCheck::new("proper");
    for u in &dirs {
        let vals: Vec<f64> = (0..=40).map(|k| cert.value(&(u * 2f64.powi(k)))).collect();
        let incs: Vec<f64> = vals.windows(2).map(|w| w[1] - w[0]).collect();
        let increasing = incs.iter().all(|d| *d > 0.0);
        let first = incs.first().copied().unwrap_or(0.0);
        let last = incs.last().copied().unwrap_or(0.0);
        let ok = increasing && vals.iter().all(|v| v.is_finite()) && last >= 1e-3 * first;
        proper.record(ok, u);
    }

    CertificateDiagnostics {
        positive_definite: pd,
        proper,
        gradient_nonvanishing: grad,
        bounds,
    }
}
