//! Dormand–Prince 5(4) embedded Runge–Kutta stepper.
//!
//! Shared by the gradient-flow transport in [`crate::lyap`], trajectory
//! simulation in [`crate::sys`] and the trajectory-transport construction in
//! [`crate::xform`]. The driver clamps steps to caller-supplied stop points so
//! report times and switching times are hit exactly.

use nalgebra::DVector;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// fifth-order weights minus fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Tolerances and step-size controls for [`Dopri5`].
#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    pub h_min: f64,
    pub max_steps: usize,
    pub safety: f64,
    /// Scale every component by the state's max-norm instead of its own
    /// magnitude (avoids step collapse when a coordinate crosses zero).
    pub norm_scaled: bool,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            h_min: 1e-14,
            max_steps: 200_000,
            safety: 0.9,
            norm_scaled: false,
        }
    }
}

impl StepControl {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }
}

/// Result of a single attempted step.
pub struct Step {
    pub y: DVector<f64>,
    pub err: f64,
}

/// Failure modes of the driver.
#[derive(Debug, Clone, PartialEq)]
pub enum OdeFailure {
    /// Step size fell below `h_min` while rejecting.
    StepCollapse { t: f64 },
    /// Step budget exhausted.
    TooManySteps { t: f64 },
    /// Right-hand side or state became non-finite.
    NonFinite { t: f64 },
    /// The caller's guard asked to stop.
    Aborted { t: f64 },
}

/// Stateless Dormand–Prince stepper over `DVector<f64>`.
pub struct Dopri5 {
    pub control: StepControl,
}

impl Dopri5 {
    pub fn new(control: StepControl) -> Self {
        Self { control }
    }

    /// One step of size `h` from `(t, y)`; `err` is the scaled RMS error norm
    /// (accept when ≤ 1).
    pub fn step<F>(&self, f: &F, t: f64, y: &DVector<f64>, h: f64) -> Step
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    {
        let k1 = f(t, y);
        let k2 = f(t + C2 * h, &(y + &k1 * (h * A21)));
        let k3 = f(t + C3 * h, &(y + (&k1 * A31 + &k2 * A32) * h));
        let k4 = f(t + C4 * h, &(y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h));
        let k5 = f(
            t + C5 * h,
            &(y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h),
        );
        let k6 = f(
            t + h,
            &(y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h),
        );
        let y_new = y + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
        let k7 = f(t + h, &y_new);
        let e = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;

        let n = y.len().max(1) as f64;
        let ymax = y.amax().max(y_new.amax());
        let mut acc = 0.0;
        for i in 0..y.len() {
            let mag = if self.control.norm_scaled {
                ymax
            } else {
                y[i].abs().max(y_new[i].abs())
            };
            let sc = self.control.atol + self.control.rtol * mag;
            acc += (e[i] / sc).powi(2);
        }
        let err = (acc / n).sqrt();
        let err = if y_new.iter().all(|v| v.is_finite()) {
            err
        } else {
            f64::INFINITY
        };
        Step { y: y_new, err }
    }

    fn initial_step<F>(&self, f: &F, t: f64, y: &DVector<f64>, span: f64) -> f64
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    {
        let f0 = f(t, y);
        let sc = |v: f64| self.control.atol + self.control.rtol * v.abs();
        let d0 = y.iter().map(|v| (v / sc(*v)).powi(2)).sum::<f64>().sqrt();
        let d1 = f0
            .iter()
            .zip(y.iter())
            .map(|(fv, yv)| (fv / sc(*yv)).powi(2))
            .sum::<f64>()
            .sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 || !d1.is_finite() {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        h0.min(span.abs()).max(self.control.h_min)
    }

    /// Integrates from `t0` to `t1` (either direction), invoking `guard` after
    /// each accepted step; a `false` from the guard aborts.
    ///
    /// Returns the final state and the number of accepted steps.
    pub fn integrate<F, G>(
        &self,
        f: &F,
        t0: f64,
        y0: &DVector<f64>,
        t1: f64,
        mut guard: G,
    ) -> Result<(DVector<f64>, usize), OdeFailure>
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64>,
        G: FnMut(f64, &DVector<f64>) -> bool,
    {
        let span = t1 - t0;
        if span == 0.0 {
            return Ok((y0.clone(), 0));
        }
        let dir = span.signum();
        let mut t = t0;
        let mut y = y0.clone();
        let mut h = self.initial_step(f, t, &y, span);
        let mut accepted = 0usize;
        for _ in 0..self.control.max_steps {
            let remaining = (t1 - t) * dir;
            if remaining <= 1e-15 * t1.abs().max(1.0) {
                return Ok((y, accepted));
            }
            let last = h >= remaining;
            let h_try = if last { remaining } else { h };
            let st = self.step(f, t, &y, dir * h_try);
            if !st.err.is_finite() {
                h = h_try * 0.1;
                if h < self.control.h_min {
                    return Err(OdeFailure::NonFinite { t });
                }
                continue;
            }
            let fac = if st.err == 0.0 {
                5.0
            } else {
                (self.control.safety * st.err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if st.err <= 1.0 {
                t = if last { t1 } else { t + dir * h_try };
                y = st.y;
                accepted += 1;
                if !guard(t, &y) {
                    return Err(OdeFailure::Aborted { t });
                }
                h = h_try * fac;
            } else {
                h = h_try * fac.min(1.0);
                if h < self.control.h_min {
                    return Err(OdeFailure::StepCollapse { t });
                }
            }
        }
        Err(OdeFailure::TooManySteps { t })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_matches_closed_form() {
        let solver = Dopri5::new(StepControl::with_tol(1e-10));
        let f = |_t: f64, y: &DVector<f64>| -y;
        let (y, _) = solver
            .integrate(&f, 0.0, &DVector::from_vec(vec![1.0]), 1.0, |_, _| true)
            .unwrap();
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn backward_integration() {
        let solver = Dopri5::new(StepControl::with_tol(1e-10));
        let f = |_t: f64, y: &DVector<f64>| -y;
        let (y, _) = solver
            .integrate(&f, 1.0, &DVector::from_vec(vec![1.0]), 0.0, |_, _| true)
            .unwrap();
        assert!((y[0] - 1.0f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn guard_aborts() {
        let solver = Dopri5::new(StepControl::default());
        let f = |_t: f64, y: &DVector<f64>| y.clone();
        let r = solver.integrate(&f, 0.0, &DVector::from_vec(vec![1.0]), 100.0, |_, y| {
            y[0] < 10.0
        });
        assert!(matches!(r, Err(OdeFailure::Aborted { .. })));
    }
}
