//! Scalar comparison functions of class K and K∞.
//!
//! A [`MonotoneScalarFn`] is an immutable, cheaply clonable handle around an
//! evaluation closure, an optional analytic derivative and an optional known
//! inverse. Everything else in the crate (decay rates, gains, the level
//! reparametrizations ρ and γ, envelopes) is one of these.
//!
//! The constructions here are:
//!
//! ```text
//! α₄(a) = (2/π) ∫₀^a δ(τ)/(1+τ²) dτ            δ ≤ min{a, α₁∘α₃⁻¹(a)}
//! ρ(a)  = exp(−∫ₐ¹ α₄(τ)⁻¹ dτ),   ρ(0) = 0
//! h(r)  = ∫₀^r a(s) ds,            γ = h⁻¹,     a(s) ≤ min{s, s/L(s)}
//! ```

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::sampling::log_grid;

/// Scalar closure shared between clones.
pub type ScalarMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KfunError {
    #[error("quadrature did not converge: estimate {estimate}, error {error}")]
    NonConvergent { estimate: f64, error: f64 },
    #[error("value {y} could not be bracketed")]
    OutOfRange { y: f64 },
    #[error("envelope construction failed: {0}")]
    EnvelopeFailure(String),
    #[error("degenerate samples: {0}")]
    DegenerateSamples(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("gamma(s)/gamma'(s) >= s violated at s = {s} (ratio {ratio})")]
    GammaPropertyViolated { s: f64, ratio: f64 },
}

/// Comparison class tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonClass {
    K,
    KInfinity,
    /// Class K and continuously differentiable at zero with zero slope.
    C1AtZero,
}

/// A strictly increasing map `[0, ∞) → [0, ∞)`.
#[derive(Clone)]
pub struct MonotoneScalarFn {
    name: String,
    class: ComparisonClass,
    eval: ScalarMap,
    deriv: Option<ScalarMap>,
    inverse: Option<ScalarMap>,
}

impl fmt::Debug for MonotoneScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MonotoneScalarFn")
            .field("name", &self.name)
            .field("class", &self.class)
            .field("analytic_derivative", &self.deriv.is_some())
            .field("known_inverse", &self.inverse.is_some())
            .finish()
    }
}

impl MonotoneScalarFn {
    pub fn new<F>(name: impl Into<String>, class: ComparisonClass, eval: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            class,
            eval: Arc::new(eval),
            deriv: None,
            inverse: None,
        }
    }

    pub fn with_derivative<F>(mut self, deriv: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.deriv = Some(Arc::new(deriv));
        self
    }

    pub fn with_inverse<F>(mut self, inverse: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.inverse = Some(Arc::new(inverse));
        self
    }

    pub fn identity() -> Self {
        Self::new("identity", ComparisonClass::KInfinity, |s| s)
            .with_derivative(|_| 1.0)
            .with_inverse(|s| s)
    }

    /// `s ↦ k·s`.
    pub fn linear(k: f64) -> Self {
        assert!(k > 0.0, "linear gain must be positive");
        Self::new(format!("{k}*s"), ComparisonClass::KInfinity, move |s| k * s)
            .with_derivative(move |_| k)
            .with_inverse(move |y| y / k)
    }

    /// `s ↦ k·s^p`.
    pub fn power(k: f64, p: f64) -> Self {
        assert!(k > 0.0 && p > 0.0, "power law needs k > 0 and p > 0");
        let class = if p > 1.0 {
            ComparisonClass::C1AtZero
        } else {
            ComparisonClass::KInfinity
        };
        Self::new(format!("{k}*s^{p}"), class, move |s| k * s.max(0.0).powf(p))
            .with_derivative(move |s| {
                if s <= 0.0 {
                    if p > 1.0 {
                        0.0
                    } else if p == 1.0 {
                        k
                    } else {
                        f64::INFINITY
                    }
                } else {
                    k * p * s.powf(p - 1.0)
                }
            })
            .with_inverse(move |y| (y.max(0.0) / k).powf(1.0 / p))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class(&self) -> ComparisonClass {
        self.class
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        (self.eval)(s)
    }

    pub fn has_analytic_derivative(&self) -> bool {
        self.deriv.is_some()
    }

    /// Derivative, analytic when available, otherwise a central difference
    /// (one-sided near zero).
    pub fn deriv(&self, s: f64) -> f64 {
        if let Some(d) = &self.deriv {
            return d(s);
        }
        let h = 1e-6 * s.abs().max(1e-6);
        if s < h {
            (self.eval(s + h) - self.eval(s)) / h
        } else {
            (self.eval(s + h) - self.eval(s - h)) / (2.0 * h)
        }
    }

    /// Inverse value: the known inverse if one was attached, else numeric
    /// inversion (falls back to NaN when the value cannot be bracketed).
    pub fn inv(&self, y: f64) -> f64 {
        match &self.inverse {
            Some(g) => g(y),
            None => invert(self, y).unwrap_or(f64::NAN),
        }
    }

    /// The inverse function as a standalone comparison function.
    pub fn inverse(&self) -> MonotoneScalarFn {
        let fwd = self.clone();
        let back = self.clone();
        let mut out = MonotoneScalarFn::new(format!("inv({})", self.name), self.class, move |y| {
            fwd.inv(y)
        })
        .with_inverse(move |x| back.eval(x));
        let f = self.clone();
        out = out.with_derivative(move |y| {
            let x = f.inv(y);
            1.0 / f.deriv(x)
        });
        out
    }

    /// `outer ∘ inner`.
    pub fn compose(outer: &MonotoneScalarFn, inner: &MonotoneScalarFn) -> MonotoneScalarFn {
        let (o, i) = (outer.clone(), inner.clone());
        let (od, id) = (outer.clone(), inner.clone());
        let (oi, ii) = (outer.clone(), inner.clone());
        let class = match (outer.class, inner.class) {
            (ComparisonClass::K, _) | (_, ComparisonClass::K) => ComparisonClass::K,
            (ComparisonClass::C1AtZero, _) | (_, ComparisonClass::C1AtZero) => {
                ComparisonClass::C1AtZero
            }
            _ => ComparisonClass::KInfinity,
        };
        MonotoneScalarFn::new(format!("{}∘{}", outer.name, inner.name), class, move |s| {
            o.eval(i.eval(s))
        })
        .with_derivative(move |s| od.deriv(id.eval(s)) * id.deriv(s))
        .with_inverse(move |y| ii.inv(oi.inv(y)))
    }

    /// `s ↦ factor·f(s)`.
    pub fn scaled(&self, factor: f64) -> MonotoneScalarFn {
        assert!(factor > 0.0);
        let (f, d, i) = (self.clone(), self.clone(), self.clone());
        MonotoneScalarFn::new(format!("{factor}*{}", self.name), self.class, move |s| {
            factor * f.eval(s)
        })
        .with_derivative(move |s| factor * d.deriv(s))
        .with_inverse(move |y| i.inv(y / factor))
    }

    /// First grid pair `(s₁, s₂)` with `s₁ < s₂` but `f(s₁) ≥ f(s₂)`.
    pub fn monotonicity_violation(&self, grid: &[f64]) -> Option<(f64, f64)> {
        grid.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            (a < b && self.eval(a) >= self.eval(b)).then_some((a, b))
        })
    }

    /// Doubling search: does `f` exceed `bound` for some argument below 2^1000?
    pub fn exceeds(&self, bound: f64) -> bool {
        let mut s = 1.0;
        for _ in 0..1000 {
            if self.eval(s) > bound {
                return true;
            }
            s *= 2.0;
        }
        false
    }

    /// Cheap stand-in for functions defined by nested quadrature: cubic
    /// Hermite interpolation of `ln f` against `ln s` on a log grid over
    /// `[lo, hi]`, using `f'` at the knots, extended by power laws outside.
    /// Knots where `f` underflows to zero are dropped.
    pub fn tabulated(&self, lo: f64, hi: f64, per_decade: usize) -> Result<MonotoneScalarFn, KfunError> {
        if !(lo > 0.0 && hi > lo) || per_decade == 0 {
            return Err(KfunError::InvalidConfig(format!("bad tabulation range [{lo}, {hi}]")));
        }
        let count = ((hi / lo).log10() * per_decade as f64).ceil() as usize + 1;
        let mut knots = Vec::with_capacity(count);
        for s in log_grid(lo, hi, count.max(2)) {
            let (f, d) = (self.eval(s), self.deriv(s));
            if f > 0.0 && f.is_finite() && d.is_finite() && d >= 0.0 {
                knots.push((s.ln(), f.ln(), s * d / f));
            }
        }
        if knots.len() < 2 {
            return Err(KfunError::DegenerateSamples(format!("'{}' vanishes on the tabulation grid", self.name)));
        }
        let table = Arc::new(LogHermite { knots });
        let (t, td) = (table.clone(), table);
        Ok(MonotoneScalarFn::new(format!("tab({})", self.name), self.class, move |s| {
            if s <= 0.0 {
                0.0
            } else {
                t.eval(s.ln()).0.exp()
            }
        })
        .with_derivative(move |s| {
            if s <= 0.0 {
                return 0.0;
            }
            let (lf, slope) = td.eval(s.ln());
            lf.exp() * slope / s
        }))
    }

    /// Plain-text table of `(s, f(s), f'(s))` triples, one per line.
    pub fn to_table(&self, grid: &[f64]) -> String {
        let mut out = String::from("# s f(s) f'(s)\n");
        for &s in grid {
            out.push_str(&format!(
                "{:.16e} {:.16e} {:.16e}\n",
                s,
                self.eval(s),
                self.deriv(s)
            ));
        }
        out
    }
}

/// Knots `(ln s, ln f, d ln f / d ln s)`.
struct LogHermite {
    knots: Vec<(f64, f64, f64)>,
}

impl LogHermite {
    /// `(ln f, d ln f / d ln s)` at `u = ln s`.
    fn eval(&self, u: f64) -> (f64, f64) {
        let k = &self.knots;
        let (first, last) = (k[0], k[k.len() - 1]);
        if u <= first.0 {
            return (first.1 + first.2 * (u - first.0), first.2);
        }
        if u >= last.0 {
            return (last.1 + last.2 * (u - last.0), last.2);
        }
        let i = k.partition_point(|p| p.0 <= u) - 1;
        let ((u0, v0, m0), (u1, v1, m1)) = (k[i], k[i + 1]);
        let h = u1 - u0;
        let t = (u - u0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * v0
            + (t3 - 2.0 * t2 + t) * h * m0
            + (-2.0 * t3 + 3.0 * t2) * v1
            + (t3 - t2) * h * m1;
        let dv = ((6.0 * t2 - 6.0 * t) * v0 + (-6.0 * t2 + 6.0 * t) * v1) / h
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (3.0 * t2 - 2.0 * t) * m1;
        (v, dv)
    }
}

/// Parses the output of [`MonotoneScalarFn::to_table`].
pub fn parse_table(text: &str) -> Result<Vec<(f64, f64, f64)>, KfunError> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| KfunError::InvalidConfig(format!("bad table row '{line}': {e}")))?;
        if vals.len() != 3 {
            return Err(KfunError::InvalidConfig(format!("expected 3 columns: '{line}'")));
        }
        rows.push((vals[0], vals[1], vals[2]));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Quadrature

/// Adaptive quadrature settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: u32,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-13,
            rel_tol: 1e-11,
            max_depth: 100,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<(), KfunError> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(KfunError::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_depth < 1 {
            return Err(KfunError::InvalidConfig("max_depth must be at least 1".into()));
        }
        Ok(())
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Gauss–Kronrod 7/15 on `[a, b]`: (Kronrod value, |Kronrod − Gauss|).
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hl = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let dx = hl * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * hl, ((k - g) * hl).abs())
}

struct Piece {
    a: f64,
    b: f64,
    val: f64,
    err: f64,
    depth: u32,
}

/// Adaptive Gauss–Kronrod integral of `f` over `[a, b]`.
///
/// Intervals are refined worst-first until the summed error estimate is at
/// most `max(abs_tol, rel_tol·|value|)`. Endpoints are never sampled, so
/// integrable endpoint singularities are tolerated.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    cfg: &QuadratureConfig,
) -> Result<f64, KfunError> {
    cfg.validate()?;
    if a == b {
        return Ok(0.0);
    }
    if a > b {
        return Err(KfunError::InvalidConfig(format!("integration bounds reversed: {a} > {b}")));
    }
    let (v, e) = gk15(&f, a, b);
    let mut pieces = vec![Piece {
        a,
        b,
        val: v,
        err: e,
        depth: 0,
    }];
    loop {
        let total: f64 = pieces.iter().map(|p| p.val).sum();
        let err: f64 = pieces.iter().map(|p| p.err).sum();
        if !total.is_finite() || !err.is_finite() {
            return Err(KfunError::NonConvergent {
                estimate: total,
                error: err,
            });
        }
        if err <= cfg.abs_tol.max(cfg.rel_tol * total.abs()) {
            return Ok(total);
        }
        let (idx, _) = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.err.total_cmp(&y.1.err))
            .expect("non-empty");
        let p = pieces.swap_remove(idx);
        if p.depth >= cfg.max_depth || pieces.len() > 5000 {
            return Err(KfunError::NonConvergent {
                estimate: total,
                error: err,
            });
        }
        let m = 0.5 * (p.a + p.b);
        let (v1, e1) = gk15(&f, p.a, m);
        let (v2, e2) = gk15(&f, m, p.b);
        pieces.push(Piece {
            a: p.a,
            b: m,
            val: v1,
            err: e1,
            depth: p.depth + 1,
        });
        pieces.push(Piece {
            a: m,
            b: p.b,
            val: v2,
            err: e2,
            depth: p.depth + 1,
        });
    }
}

/// Like [`integrate`] but returns the best estimate on non-convergence.
fn integrate_lenient<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, cfg: &QuadratureConfig) -> f64 {
    match integrate(f, a, b, cfg) {
        Ok(v) => v,
        Err(KfunError::NonConvergent { estimate, .. }) => estimate,
        Err(_) => f64::NAN,
    }
}

// ---------------------------------------------------------------------------
// Inversion

const MAX_BISECTIONS: usize = 128;
const MAX_NEWTON: usize = 8;
const BRACKET_BUDGET: usize = 2100;

/// Solves `f(x) = y` for strictly increasing `f` with `f(0) = 0`.
///
/// A bracket `[lo, hi]` with `hi = 2·lo` is located by doubling/halving from
/// one, refined by bisection, then polished by at most eight Newton steps
/// that are kept only if they stay inside the bracket and reduce the residual.
pub fn invert(f: &MonotoneScalarFn, y: f64) -> Result<f64, KfunError> {
    if y.is_nan() || y < 0.0 {
        return Err(KfunError::OutOfRange { y });
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    let mut lo;
    if f.eval(hi) < y {
        let mut found = false;
        for _ in 0..BRACKET_BUDGET {
            hi *= 2.0;
            if !hi.is_finite() {
                break;
            }
            if f.eval(hi) >= y {
                found = true;
                break;
            }
        }
        if !found {
            return Err(KfunError::OutOfRange { y });
        }
        lo = hi / 2.0;
    } else {
        lo = 0.5;
        let mut found = false;
        for _ in 0..BRACKET_BUDGET {
            if f.eval(lo) < y {
                found = true;
                break;
            }
            hi = lo;
            lo *= 0.5;
            if lo == 0.0 {
                break;
            }
        }
        if !found {
            lo = 0.0;
        }
    }

    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f.eval(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    let mut res = (f.eval(x) - y).abs();
    for _ in 0..MAX_NEWTON {
        if res == 0.0 {
            break;
        }
        let d = f.deriv(x);
        if !(d.is_finite() && d > 0.0) {
            break;
        }
        let cand = x - (f.eval(x) - y) / d;
        if !(cand >= lo && cand <= hi) {
            break;
        }
        let r = (f.eval(cand) - y).abs();
        if r < res {
            x = cand;
            res = r;
        } else {
            break;
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Paper constructions

/// Relative margin applied to the smooth minimum when the two branches cross.
pub const DELTA_MARGIN: f64 = 1e-3;
const SOFTMIN_POWER: f64 = 8.0;

/// Which branch realizes `δ(a) ≤ min{a, α₁(α₃⁻¹(a))}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaBranch {
    /// `α₁∘α₃⁻¹(a) ≥ a` on the check grid: `δ(a) = a`.
    Identity,
    /// `α₁∘α₃⁻¹(a) ≤ a` on the check grid: `δ = α₁∘α₃⁻¹`.
    Composite,
    /// The branches cross: `δ = (1 − ε)·softmin`.
    SmoothMin,
}

/// Chooses δ for [`make_alpha4`]; exposed for inspection.
pub fn make_delta(
    alpha1: &MonotoneScalarFn,
    alpha3: &MonotoneScalarFn,
) -> (MonotoneScalarFn, DeltaBranch) {
    let comp = MonotoneScalarFn::compose(alpha1, &alpha3.inverse());
    let grid = log_grid(1e-6, 1e3, 1000);
    let ge = grid.iter().all(|&a| comp.eval(a) >= a);
    let le = grid.iter().all(|&a| comp.eval(a) <= a);
    if ge {
        (MonotoneScalarFn::identity().renamed("delta"), DeltaBranch::Identity)
    } else if le {
        (comp.renamed("delta"), DeltaBranch::Composite)
    } else {
        let c = comp.clone();
        let cd = comp.clone();
        let p = SOFTMIN_POWER;
        let k = 1.0 - DELTA_MARGIN;
        let delta = MonotoneScalarFn::new("delta", ComparisonClass::KInfinity, move |a| {
            if a <= 0.0 {
                return 0.0;
            }
            let m = c.eval(a);
            if m <= 0.0 {
                return 0.0;
            }
            k * (a.powf(-p) + m.powf(-p)).powf(-1.0 / p)
        })
        .with_derivative(move |a| {
            if a <= 0.0 {
                return 0.0;
            }
            let m = cd.eval(a);
            let dm = cd.deriv(a);
            let s = a.powf(-p) + m.powf(-p);
            k * s.powf(-1.0 / p - 1.0) * (a.powf(-p - 1.0) + m.powf(-p - 1.0) * dm)
        });
        (delta, DeltaBranch::SmoothMin)
    }
}

/// `α₄(a) = (2/π)∫₀^a δ(τ)/(1+τ²) dτ` with δ from [`make_delta`].
///
/// The result is C¹ with `α₄'(0) = 0` and satisfies
/// `α₄(a) ≤ min{a, α₁(α₃⁻¹(a))}`.
pub fn make_alpha4(
    alpha1: &MonotoneScalarFn,
    alpha3: &MonotoneScalarFn,
) -> Result<MonotoneScalarFn, KfunError> {
    let (delta, _) = make_delta(alpha1, alpha3);
    alpha4_from_delta(delta)
}

/// The α₄ integral for a given δ.
pub fn alpha4_from_delta(delta: MonotoneScalarFn) -> Result<MonotoneScalarFn, KfunError> {
    let cfg = QuadratureConfig::default();
    let scale = 2.0 / std::f64::consts::PI;
    for a in [1e-3, 0.5, 1.0, 10.0] {
        let d = delta.clone();
        integrate(move |t| d.eval(t) / (1.0 + t * t), 0.0, a, &cfg)?;
    }
    let d_eval = delta.clone();
    let d_deriv = delta;
    Ok(MonotoneScalarFn::new("alpha4", ComparisonClass::C1AtZero, move |a| {
        if a <= 0.0 {
            return 0.0;
        }
        let d = d_eval.clone();
        scale * integrate_lenient(move |t| d.eval(t) / (1.0 + t * t), 0.0, a, &cfg)
    })
    .with_derivative(move |a| {
        if a <= 0.0 {
            0.0
        } else {
            scale * d_deriv.eval(a) / (1.0 + a * a)
        }
    }))
}

/// Lower cut-off of the singular integral in [`make_rho`]; `ρ(a) = 0` below.
pub const RHO_TAU_MIN: f64 = 1e-12;

/// `ρ(a) = exp(−∫ₐ¹ α₄(τ)⁻¹ dτ)`, `ρ(0) = 0`, `ρ(1) = 1`.
pub fn make_rho(alpha4: &MonotoneScalarFn) -> Result<MonotoneScalarFn, KfunError> {
    let cfg = QuadratureConfig::default();
    for a in [1e-2, 0.5, 2.0] {
        let f = alpha4.clone();
        let (lo, hi) = if a < 1.0 { (a, 1.0) } else { (1.0, a) };
        let v = integrate(move |t| 1.0 / f.eval(t), lo, hi, &cfg)?;
        if !v.is_finite() {
            return Err(KfunError::NonConvergent {
                estimate: v,
                error: f64::INFINITY,
            });
        }
    }
    let f_eval = alpha4.clone();
    let rho_eval = move |a: f64| -> f64 {
        if a <= RHO_TAU_MIN {
            return 0.0;
        }
        if a == 1.0 {
            return 1.0;
        }
        let f = f_eval.clone();
        if a < 1.0 {
            (-integrate_lenient(move |t| 1.0 / f.eval(t), a, 1.0, &cfg)).exp()
        } else {
            integrate_lenient(move |t| 1.0 / f.eval(t), 1.0, a, &cfg).exp()
        }
    };
    let rho_for_deriv = rho_eval.clone();
    let f_deriv = alpha4.clone();
    Ok(MonotoneScalarFn::new("rho", ComparisonClass::C1AtZero, rho_eval).with_derivative(
        move |a| {
            if a <= RHO_TAU_MIN {
                0.0
            } else {
                rho_for_deriv(a) / f_deriv.eval(a)
            }
        },
    ))
}

/// Floor for `L(s)` in `a(s) ≤ s / max(L(s), ε_L)`.
pub const L_FLOOR: f64 = 1e-12;
const STRICT_SLOPE: f64 = 1e-3;

/// Power-law-per-segment profile `a(s)` with `h = ∫a` and `γ = h⁻¹` in closed
/// form.
///
/// `a` is nondecreasing, hence `h(r) ≤ r·a(r)` and `γ(s)/γ'(s) ≥ s`.
#[derive(Debug, Clone)]
pub struct GammaProfile {
    knots: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
    low_slope: f64,
    cumulative: Vec<f64>,
}

impl GammaProfile {
    /// Builds the profile from the constraint values `b_i = min{s_i, s_i/L_i}`.
    pub fn from_bounds(knots: Vec<f64>, bounds: Vec<f64>) -> Result<Self, KfunError> {
        if knots.len() < 2 || knots.len() != bounds.len() {
            return Err(KfunError::EnvelopeFailure("need at least two level samples".into()));
        }
        if let Some((s, b)) = knots
            .iter()
            .zip(&bounds)
            .find(|(_, b)| !(b.is_finite() && **b > 0.0))
        {
            return Err(KfunError::EnvelopeFailure(format!(
                "underestimate not strictly positive at s = {s} (bound {b})"
            )));
        }
        let n = knots.len();
        let mut values = bounds.clone();
        for i in (0..n - 1).rev() {
            let cap = values[i + 1] * (knots[i] / knots[i + 1]).powf(STRICT_SLOPE);
            values[i] = values[i].min(cap);
        }
        if values.iter().any(|v| !(*v > 0.0)) {
            return Err(KfunError::EnvelopeFailure("underestimate collapsed to zero".into()));
        }
        let slopes: Vec<f64> = (0..n - 1)
            .map(|i| (values[i + 1] / values[i]).ln() / (knots[i + 1] / knots[i]).ln())
            .collect();
        let low_slope = slopes[0].max(1.0);
        let mut cumulative = Vec::with_capacity(n);
        cumulative.push(values[0] * knots[0] / (low_slope + 1.0));
        for i in 0..n - 1 {
            let p = slopes[i];
            let seg = values[i] * knots[i] / (p + 1.0) * ((knots[i + 1] / knots[i]).powf(p + 1.0) - 1.0);
            cumulative.push(cumulative[i] + seg);
        }
        Ok(Self {
            knots,
            values,
            slopes,
            low_slope,
            cumulative,
        })
    }

    fn segment(&self, s: f64) -> (f64, f64, f64, f64) {
        // (knot, value, slope, h(knot)); index -1 encodes the region below the first knot
        let n = self.knots.len();
        if s < self.knots[0] {
            return (self.knots[0], self.values[0], self.low_slope, f64::NAN);
        }
        let i = match self.knots.partition_point(|&k| k <= s) {
            0 => 0,
            j => (j - 1).min(n - 2),
        };
        let i = if s >= self.knots[n - 1] { n - 1 } else { i };
        let p = if i == n - 1 { self.slopes[n - 2] } else { self.slopes[i] };
        (self.knots[i], self.values[i], p, self.cumulative[i])
    }

    /// `a(s)`.
    pub fn a(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let (k, v, p, _) = self.segment(s);
        v * (s / k).powf(p)
    }

    /// `h(r) = ∫₀^r a`.
    pub fn h(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let (k, v, p, hk) = self.segment(r);
        if hk.is_nan() {
            return v * k / (p + 1.0) * (r / k).powf(p + 1.0);
        }
        hk + v * k / (p + 1.0) * ((r / k).powf(p + 1.0) - 1.0)
    }

    /// `γ(y) = h⁻¹(y)`, solved per segment in closed form.
    pub fn gamma(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let n = self.knots.len();
        if y < self.cumulative[0] {
            let (k, v, p) = (self.knots[0], self.values[0], self.low_slope);
            return k * (y * (p + 1.0) / (v * k)).powf(1.0 / (p + 1.0));
        }
        let i = (self.cumulative.partition_point(|&c| c <= y) - 1).min(n - 1);
        let p = if i == n - 1 { self.slopes[n - 2] } else { self.slopes[i] };
        let (k, v, hk) = (self.knots[i], self.values[i], self.cumulative[i]);
        k * (1.0 + (y - hk) * (p + 1.0) / (v * k)).powf(1.0 / (p + 1.0))
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// γ as a comparison function, with `h` attached as its inverse.
    pub fn gamma_fn(&self) -> MonotoneScalarFn {
        let (g, gd, hi) = (self.clone(), self.clone(), self.clone());
        MonotoneScalarFn::new("gamma", ComparisonClass::KInfinity, move |y| g.gamma(y))
            .with_derivative(move |y| {
                let r = gd.gamma(y);
                1.0 / gd.a(r)
            })
            .with_inverse(move |r| hi.h(r))
    }
}

/// Level grid used by [`make_gamma`]: eight points per decade from `1e-6`
/// (or lower if `s_max` is tiny) up to `s_max`.
pub fn gamma_level_grid(s_max: f64) -> Vec<f64> {
    let lo = 1e-6f64.min(s_max / 10.0);
    let decades = (s_max / lo).log10();
    let count = ((decades * 8.0).ceil() as usize + 1).max(2);
    log_grid(lo, s_max, count)
}

/// Builds γ from a level-wise Jacobian bound `L`.
///
/// `a` is a nondecreasing power-law-per-segment underestimate of
/// `min{s, s/max(L(s), ε_L)}` on the level grid, `h = ∫a`, `γ = h⁻¹`.
pub fn make_gamma<L: Fn(f64) -> f64>(l: L, s_max: f64) -> Result<GammaProfile, KfunError> {
    if !(s_max > 0.0) {
        return Err(KfunError::InvalidConfig("s_max must be positive".into()));
    }
    let knots = gamma_level_grid(s_max);
    let bounds = knots
        .iter()
        .map(|&s| {
            let lv = l(s);
            let lv = if lv.is_nan() { f64::INFINITY } else { lv };
            s.min(s / lv.max(L_FLOOR))
        })
        .collect();
    GammaProfile::from_bounds(knots, bounds)
}

/// Checks `γ(s)/γ'(s) ≥ s·(1 − 1e-9)` on `grid`.
pub fn check_gamma_property(gamma: &MonotoneScalarFn, grid: &[f64]) -> Result<(), KfunError> {
    for &s in grid {
        let ratio = gamma.eval(s) / gamma.deriv(s);
        if !(ratio >= s * (1.0 - 1e-9)) {
            return Err(KfunError::GammaPropertyViolated { s, ratio });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Envelopes

/// Which side of the samples the envelope must stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeSide {
    Lower,
    Upper,
}

/// Relative size of the linear ramp added to upper envelopes.
pub const ENVELOPE_RAMP: f64 = 1e-6;

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson).
#[derive(Debug, Clone)]
struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl Pchip {
    fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        let sec: Vec<f64> = (0..n - 1)
            .map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]))
            .collect();
        let mut ds = vec![0.0; n];
        ds[0] = sec[0];
        ds[n - 1] = sec[n - 2];
        for i in 1..n - 1 {
            let (a, b) = (sec[i - 1], sec[i]);
            ds[i] = if a <= 0.0 || b <= 0.0 {
                0.0
            } else {
                let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
                let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
                (w1 + w2) / (w1 / a + w2 / b)
            };
        }
        for (i, s) in sec.iter().enumerate() {
            if *s == 0.0 {
                ds[i] = 0.0;
                ds[i + 1] = 0.0;
            } else {
                // endpoint slopes may overshoot; clamp to three secants
                ds[i] = ds[i].clamp(0.0, 3.0 * s);
                ds[i + 1] = ds[i + 1].clamp(0.0, 3.0 * s);
            }
        }
        Self { xs, ys, ds }
    }

    fn locate(&self, x: f64) -> usize {
        let n = self.xs.len();
        match self.xs.partition_point(|&k| k <= x) {
            0 => 0,
            j => (j - 1).min(n - 2),
        }
    }

    fn eval(&self, x: f64) -> (f64, f64) {
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1, d0, d1) = (self.ys[i], self.ys[i + 1], self.ds[i], self.ds[i + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * h * d0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * h * d1;
        let dv = ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * h * d0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * h * d1)
            / h;
        (v, dv)
    }
}

/// Class-K∞ envelope of `(s, v)` samples.
///
/// Lower: running minimum from the right, strictified, then interpolated
/// monotonically in log–log coordinates; below the first sample it decays at
/// least linearly. Upper: running maximum from the left, interpolated
/// monotonically, plus a ramp `ε·s` for strict increase and unboundedness.
pub fn monotone_envelope(
    samples: &[(f64, f64)],
    side: EnvelopeSide,
) -> Result<MonotoneScalarFn, KfunError> {
    if samples.len() < 2 {
        return Err(KfunError::DegenerateSamples("need at least two samples".into()));
    }
    if samples.iter().any(|(s, v)| !(*s > 0.0) || !v.is_finite() || !s.is_finite()) {
        return Err(KfunError::DegenerateSamples("abscissae must be positive and finite".into()));
    }
    let mut pts = samples.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // merge duplicate abscissae
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (s, v) in pts {
        match merged.last_mut() {
            Some(last) if last.0 == s => {
                last.1 = match side {
                    EnvelopeSide::Lower => last.1.min(v),
                    EnvelopeSide::Upper => last.1.max(v),
                }
            }
            _ => merged.push((s, v)),
        }
    }
    if merged.len() < 2 {
        return Err(KfunError::DegenerateSamples("need two distinct abscissae".into()));
    }
    match side {
        EnvelopeSide::Lower => lower_envelope(merged),
        EnvelopeSide::Upper => Ok(upper_envelope(merged)),
    }
}

fn lower_envelope(pts: Vec<(f64, f64)>) -> Result<MonotoneScalarFn, KfunError> {
    if let Some((s, v)) = pts.iter().find(|(_, v)| *v <= 0.0) {
        return Err(KfunError::DegenerateSamples(format!(
            "nonpositive sample {v} at s = {s} admits no positive lower envelope"
        )));
    }
    let n = pts.len();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let mut ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    for i in (0..n - 1).rev() {
        let cap = ys[i + 1] * (xs[i] / xs[i + 1]).powf(STRICT_SLOPE);
        ys[i] = ys[i].min(cap);
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let low_slope = ((ly[1] - ly[0]) / (lx[1] - lx[0])).max(1.0);
    let high_slope = ((ly[n - 1] - ly[n - 2]) / (lx[n - 1] - lx[n - 2])).max(STRICT_SLOPE);
    let interp = Pchip::new(lx, ly);
    let (x0, y0, xn, yn) = (xs[0], ys[0], xs[n - 1], ys[n - 1]);
    let eval_fn = move |s: f64| -> (f64, f64) {
        if s <= 0.0 {
            return (0.0, 0.0);
        }
        if s < x0 {
            let v = y0 * (s / x0).powf(low_slope);
            (v, v * low_slope / s)
        } else if s > xn {
            let v = yn * (s / xn).powf(high_slope);
            (v, v * high_slope / s)
        } else {
            let (lv, dl) = interp.eval(s.ln());
            // exp∘ln may round above a knot value
            let v = lv.exp() * (1.0 - 4.0 * f64::EPSILON);
            (v, v * dl / s)
        }
    };
    let e2 = eval_fn.clone();
    Ok(MonotoneScalarFn::new("lower_envelope", ComparisonClass::KInfinity, move |s| eval_fn(s).0)
        .with_derivative(move |s| e2(s).1))
}

fn upper_envelope(pts: Vec<(f64, f64)>) -> MonotoneScalarFn {
    let n = pts.len();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let mut ys: Vec<f64> = pts.iter().map(|p| p.1.max(0.0)).collect();
    for i in 1..n {
        ys[i] = ys[i].max(ys[i - 1]);
    }
    let (x0, y0, xn, yn) = (xs[0], ys[0], xs[n - 1], ys[n - 1]);
    let eps = ENVELOPE_RAMP * (yn / xn).max(1.0);
    let interp = Pchip::new(xs, ys);
    let end_slope = interp.ds[n - 1].max(0.0);
    let eval_fn = move |s: f64| -> (f64, f64) {
        if s <= 0.0 {
            return (0.0, eps);
        }
        let (v, d) = if s < x0 {
            (y0 * s / x0, y0 / x0)
        } else if s > xn {
            (yn + end_slope * (s - xn), end_slope)
        } else {
            interp.eval(s)
        };
        (v + eps * s, d + eps)
    };
    let e2 = eval_fn.clone();
    MonotoneScalarFn::new("upper_envelope", ComparisonClass::KInfinity, move |s| eval_fn(s).0)
        .with_derivative(move |s| e2(s).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    /// Composite Simpson with `n` panels, used as an independent oracle.
    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn integrate_polynomial_and_empty() {
        assert!((integrate(|t| t, 0.0, 1.0, &cfg()).unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(integrate(|t| t.exp(), 2.0, 2.0, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn integrate_against_refined_oracle() {
        let f = |t: f64| t / (1.0 + t * t);
        let v = integrate(f, 0.0, 1.0, &cfg()).unwrap();
        let coarse = simpson(f, 0.0, 1.0, 2000);
        let fine = simpson(f, 0.0, 1.0, 20000);
        assert!((coarse - fine).abs() < 1e-12);
        assert!((v - fine).abs() < 1e-8);
        assert!((v - 0.346_573_6).abs() < 1e-7);
    }

    #[test]
    fn integrate_endpoint_singularity() {
        // ∫₀¹ 1/√t = 2
        let v = integrate(|t| 1.0 / t.sqrt(), 0.0, 1.0, &cfg()).unwrap();
        assert!((v - 2.0).abs() < 1e-8);
    }

    #[test]
    fn integrate_nonconvergent() {
        let tight = QuadratureConfig {
            abs_tol: 1e-300,
            rel_tol: 1e-300,
            max_depth: 2,
        };
        let r = integrate(|t| t.sin() / t, 0.0, 100.0, &tight);
        assert!(matches!(r, Err(KfunError::NonConvergent { .. })));
    }

    #[test]
    fn bad_config_rejected() {
        let c = QuadratureConfig {
            abs_tol: 0.0,
            ..QuadratureConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn invert_examples() {
        let sq = MonotoneScalarFn::new("sq", ComparisonClass::KInfinity, |s| s * s);
        assert!((invert(&sq, 4.0).unwrap() - 2.0).abs() < 1e-14);
        assert!((invert(&MonotoneScalarFn::identity(), 0.3).unwrap() - 0.3).abs() < 1e-15);
        let f = MonotoneScalarFn::new("logf", ComparisonClass::KInfinity, |a| {
            (1.0 + a * a).ln() / std::f64::consts::PI
        });
        // forward oracle
        let y = f.eval(1.0);
        assert!((y - 0.220_635_6).abs() < 1e-7);
        assert!((invert(&f, 0.220_635_6).unwrap() - 1.0).abs() < 1e-6);
        assert!((invert(&f, y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invert_out_of_range() {
        let bounded = MonotoneScalarFn::new("atan", ComparisonClass::K, |s| s.atan());
        assert!(matches!(invert(&bounded, 2.0), Err(KfunError::OutOfRange { .. })));
        assert!(matches!(invert(&bounded, -1.0), Err(KfunError::OutOfRange { .. })));
    }

    #[test]
    fn alpha4_closed_forms() {
        let id = MonotoneScalarFn::identity();
        let a4 = make_alpha4(&id, &id).unwrap();
        assert_eq!(a4.eval(0.0), 0.0);
        let ln2_pi = 2f64.ln() / std::f64::consts::PI;
        assert!((a4.eval(1.0) - ln2_pi).abs() < 1e-9);
        let half = 1.25f64.ln() / std::f64::consts::PI;
        assert!((a4.eval(0.5) - half).abs() < 1e-9);
        assert!(a4.eval(0.5) <= 0.5);
        assert!((a4.eval(0.5) - 0.071_028_8).abs() < 1e-7);
    }

    #[test]
    fn alpha4_bounded_by_min_when_branches_cross() {
        // α₁∘α₃⁻¹(a) = a² crosses a at 1
        let a1 = MonotoneScalarFn::power(1.0, 4.0);
        let a3 = MonotoneScalarFn::power(1.0, 2.0);
        let (_, branch) = make_delta(&a1, &a3);
        assert_eq!(branch, DeltaBranch::SmoothMin);
        let a4 = make_alpha4(&a1, &a3).unwrap();
        for a in log_grid(1e-3, 1e2, 60) {
            assert!(a4.eval(a) <= a.min(a * a), "a = {a}");
        }
        // α₄'(0) = 0 via forward difference quotients
        let q: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|h| a4.eval(*h) / h).collect();
        assert!(q[0] > q[1] && q[1] > q[2] && q[2] < 1e-7);
    }

    #[test]
    fn rho_closed_forms() {
        let id = MonotoneScalarFn::identity();
        let rho = make_rho(&id).unwrap();
        assert!((rho.eval(0.5) - 0.5).abs() < 1e-9);
        assert_eq!(rho.eval(1.0), 1.0);
        assert_eq!(rho.eval(0.0), 0.0);
        let sq = MonotoneScalarFn::power(1.0, 2.0);
        let rho2 = make_rho(&sq).unwrap();
        assert!((rho2.eval(0.5) - (-1.0f64).exp()).abs() < 1e-9);
        // ρ'(0) = 0: difference quotient ρ(h)/h → 0
        let q: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|h| rho2.eval(*h) / h).collect();
        assert!(q[0] > q[1] && q[1] > q[2]);
    }

    #[test]
    fn gamma_from_unit_bound() {
        // L ≡ 0 (one-dimensional case): a(s) = s, h = r²/2, γ = √(2s)
        let prof = make_gamma(|_| 0.0, 1e3).unwrap();
        let g = prof.gamma_fn();
        assert_eq!(g.eval(0.0), 0.0);
        for s in [1e-4, 0.1, 0.7, 3.0, 400.0] {
            assert!((g.eval(s) - (2.0 * s).sqrt()).abs() < 1e-10 * (1.0 + s));
        }
        let ratio = g.eval(0.7) / g.deriv(0.7);
        assert!((ratio - 1.4).abs() < 1e-9);
    }

    #[test]
    fn gamma_property_and_round_trip() {
        let prof = make_gamma(|s: f64| 1.5 / s.sqrt(), 1e3).unwrap();
        let g = prof.gamma_fn();
        let grid = log_grid(1e-6, 1e3, 1000);
        check_gamma_property(&g, &grid).unwrap();
        for &s in &grid {
            let back = invert(&g, g.eval(s)).unwrap();
            assert!((back - s).abs() <= 1e-8 * s, "s = {s}");
        }
        assert!(g.monotonicity_violation(&grid).is_none());
    }

    #[test]
    fn gamma_override_identity_accepted_and_bad_rejected() {
        let grid = log_grid(1e-6, 1e3, 100);
        check_gamma_property(&MonotoneScalarFn::identity(), &grid).unwrap();
        // γ(s) = s² gives γ/γ' = s/2
        let bad = MonotoneScalarFn::power(1.0, 2.0);
        assert!(matches!(
            check_gamma_property(&bad, &grid),
            Err(KfunError::GammaPropertyViolated { .. })
        ));
    }

    #[test]
    fn gamma_rejects_nonpositive_bound() {
        let r = make_gamma(|_| f64::INFINITY, 1.0);
        assert!(matches!(r, Err(KfunError::EnvelopeFailure(_))));
    }

    #[test]
    fn envelope_examples() {
        let f = monotone_envelope(&[(1.0, 1.0), (2.0, 4.0), (3.0, 9.0)], EnvelopeSide::Lower).unwrap();
        assert!(f.eval(2.0) <= 4.0);
        assert!(f.monotonicity_violation(&log_grid(0.1, 10.0, 200)).is_none());

        let g = monotone_envelope(&[(1.0, 5.0), (2.0, 3.0)], EnvelopeSide::Lower).unwrap();
        assert!(g.eval(2.0) <= 3.0 && g.eval(1.0) <= 3.0);

        let samples: Vec<(f64, f64)> = log_grid(1e-3, 1e3, 49).into_iter().map(|s| (s, s.sqrt())).collect();
        let h = monotone_envelope(&samples, EnvelopeSide::Lower).unwrap();
        assert!(h.eval(4.0) <= 2.0 + 1e-12 && h.eval(4.0) >= 2.0 - 1e-3);
    }

    #[test]
    fn envelope_upper_dominates_and_grows() {
        let samples = vec![(0.5, 0.1), (1.0, 0.05), (2.0, 1.0), (4.0, 1.0)];
        let f = monotone_envelope(&samples, EnvelopeSide::Upper).unwrap();
        for (s, v) in &samples {
            assert!(f.eval(*s) >= *v);
        }
        assert!(f.exceeds(1e6));
        assert!(f.monotonicity_violation(&log_grid(1e-6, 1e3, 1000)).is_none());
        let zero = monotone_envelope(&[(1.0, 0.0), (2.0, -1.0)], EnvelopeSide::Upper).unwrap();
        assert!(zero.eval(1.0) > 0.0);
    }

    #[test]
    fn envelope_degenerate() {
        assert!(matches!(
            monotone_envelope(&[(1.0, 0.0), (2.0, -1.0)], EnvelopeSide::Lower),
            Err(KfunError::DegenerateSamples(_))
        ));
        assert!(matches!(
            monotone_envelope(&[(1.0, 1.0)], EnvelopeSide::Lower),
            Err(KfunError::DegenerateSamples(_))
        ));
    }

    #[test]
    fn table_round_trip() {
        let f = MonotoneScalarFn::power(2.0, 1.5);
        let text = f.to_table(&[0.5, 1.0, 2.0]);
        let rows = parse_table(&text).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].1, 2.0);
        assert_eq!(rows[2].0, 2.0);
    }

    #[test]
    fn composition_and_inverse() {
        let f = MonotoneScalarFn::power(1.0, 2.0);
        let g = MonotoneScalarFn::linear(3.0);
        let fg = MonotoneScalarFn::compose(&f, &g);
        assert!((fg.eval(2.0) - 36.0).abs() < 1e-12);
        assert!((fg.inv(36.0) - 2.0).abs() < 1e-12);
        assert!((fg.deriv(2.0) - 36.0).abs() < 1e-9);
        let numeric = MonotoneScalarFn::new("cube", ComparisonClass::KInfinity, |s| s.powi(3));
        assert!((numeric.inverse().eval(27.0) - 3.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn invert_is_left_inverse(k in 0.1f64..10.0, p in 0.3f64..4.0, x in 1e-4f64..1e3) {
                let f = MonotoneScalarFn::new("pw", ComparisonClass::KInfinity, move |s| k * s.powf(p));
                let y = f.eval(x);
                let back = invert(&f, y).unwrap();
                prop_assert!((back - x).abs() <= 1e-10 * x);
            }

            #[test]
            fn upper_envelope_above_samples(vals in proptest::collection::vec(0.0f64..100.0, 2..20)) {
                let samples: Vec<(f64, f64)> = vals.iter().enumerate().map(|(i, v)| ((i + 1) as f64, *v)).collect();
                let f = monotone_envelope(&samples, EnvelopeSide::Upper).unwrap();
                for (s, v) in &samples {
                    prop_assert!(f.eval(*s) >= *v);
                }
                prop_assert!(f.monotonicity_violation(&log_grid(1e-3, 1e3, 300)).is_none());
            }
        }
    }

    #[test]
    fn tabulated_matches_source() {
        let f = MonotoneScalarFn::new("s^2+s^3", ComparisonClass::KInfinity, |s| s * s + s * s * s)
            .with_derivative(|s| 2.0 * s + 3.0 * s * s);
        let t = f.tabulated(1e-4, 1e3, 20).unwrap();
        for s in [1e-4, 3e-3, 0.5, 1.0, 7.3, 999.0] {
            assert!((t.eval(s) / f.eval(s) - 1.0).abs() < 1e-6, "{s}");
            assert!((t.deriv(s) / f.deriv(s) - 1.0).abs() < 1e-4, "{s}");
        }
        // power-law extension
        assert!((t.eval(1e-6) / 1e-12 - 1.0).abs() < 1e-3);
        assert_eq!(t.eval(0.0), 0.0);
    }

    #[test]
    fn tabulated_rho_is_fast_and_close() {
        let a4 = make_alpha4(&MonotoneScalarFn::power(0.5, 2.0), &MonotoneScalarFn::power(1.0, 2.0)).unwrap();
        let a4t = a4.tabulated(1e-8, 1e4, 40).unwrap();
        let rho = make_rho(&a4t).unwrap();
        let rt = rho.tabulated(1e-3, 1e3, 40).unwrap();
        for a in [0.2, 0.9, 1.0, 3.0] {
            assert!((a4t.eval(a) / a4.eval(a) - 1.0).abs() < 1e-6, "{a}");
            assert!((rt.eval(a) / rho.eval(a) - 1.0).abs() < 1e-6, "{a}");
            // ρ'/ρ = 1/α₄
            assert!((rt.deriv(a) / rt.eval(a) * a4.eval(a) - 1.0).abs() < 1e-4, "{a}");
        }
    }
}
