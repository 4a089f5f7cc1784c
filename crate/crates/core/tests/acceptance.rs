//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use stabxform::kfun::{
    check_gamma_property, gamma_level_grid, make_alpha4, make_gamma, make_rho,
    MonotoneScalarFn,
};
use stabxform::lyap::{estimate_l, GradientFlowConfig, LyapunovCertificate};
use stabxform::sampling::{ball_points, log_grid, sphere_directions};
use stabxform::sys::{catalog, DisturbedSystem, CATALOG_NAMES};
use stabxform::verify::{
    pipeline_ises_to_hinf, pipeline_iss_to_ises, pipeline_ugas_to_uges, IsesOutcome,
    PipelineOptions, StabilityKind,
};
use stabxform::xform::{build_change, flow_based_normal_form, XformError};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn halfspeed_options() -> PipelineOptions {
    PipelineOptions {
        gamma: Some(MonotoneScalarFn::identity()),
        ..PipelineOptions::default()
    }
}

/// x ∈ [−10, −1e−3] ∪ [1e−3, 10], log-spaced on each side.
fn symmetric_grid(count: usize) -> Vec<f64> {
    let pos = log_grid(1e-3, 10.0, count);
    pos.iter().map(|x| -x).chain(pos.iter().copied()).collect()
}

fn criterion_1() -> Outcome {
    let e = catalog("halfspeed_1d").map_err(|e| e.to_string())?;
    let out = pipeline_ugas_to_uges(&e.system, &e.certificate, &halfspeed_options()).map_err(|e| e.to_string())?;
    let mut worst_t: f64 = 0.0;
    let mut worst_f: f64 = 0.0;
    for x in symmetric_grid(1000) {
        let y = out.change.forward(&v1(x)).map_err(|e| e.to_string())?[0];
        worst_t = worst_t.max((y - x.signum() * x * x).abs() / (1.0 + x * x));
        let f = out.transformed.rhs(&v1(y), &DVector::zeros(0)).map_err(|e| e.to_string())?[0];
        worst_f = worst_f.max((f + y).abs() / y.abs());
    }
    ensure(worst_t <= 1e-6, || format!("|T(x) - sign(x)x^2| / (1+x^2) = {worst_t:e}"))?;
    ensure(worst_f <= 1e-6, || format!("|f~(y) + y| / |y| = {worst_f:e}"))?;
    Ok(format!("T error {worst_t:.2e}, f~ error {worst_f:.2e}"))
}

fn uges_systems() -> Result<Vec<(String, stabxform::verify::UgesOutcome)>, String> {
    let mut out = Vec::new();
    for (name, opts) in [("halfspeed_1d", halfspeed_options()), ("linear_2d", PipelineOptions::default())] {
        let e = catalog(name).map_err(|e| e.to_string())?;
        let res = pipeline_ugas_to_uges(&e.system, &e.certificate, &opts).map_err(|e| format!("{name}: {e}"))?;
        out.push((name.to_string(), res));
    }
    Ok(out)
}

fn criteria_2_3() -> (Outcome, Outcome) {
    let runs = match uges_systems() {
        Ok(r) => r,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let mut msg2 = Vec::new();
    let mut msg3 = Vec::new();
    let mut ok2 = true;
    let mut ok3 = true;
    for (name, out) in &runs {
        // direct recheck of ‖y(t)‖ ≤ (1 + 1e−3)·e^{−t}‖y₀‖ up to t = 10
        let mut worst: f64 = 0.0;
        for tr in &out.trajectories {
            let n0 = tr.initial().norm();
            ok2 &= (1e-3 * (1.0 - 1e-12)..=1e3 * (1.0 + 1e-12)).contains(&n0);
            ok2 &= (tr.times.last().copied().unwrap_or(0.0) - 10.0).abs() < 1e-12;
            for (t, y) in tr.times.iter().zip(&tr.states) {
                worst = worst.max(y.norm() / ((-t).exp() * n0));
            }
        }
        ok2 &= out.trajectories.len() == 100 && worst <= 1.0 + 1e-3;
        msg2.push(format!("{name} worst {worst:.6}"));
        let c = out.report.check(StabilityKind::Contraction).expect("contraction check present");
        ok3 &= c.pass && c.residuals.len() == 500 && c.worst_residual() <= 1e-3;
        msg3.push(format!("{name} worst residual {:.2e}", c.worst_residual()));
    }
    let r2 = if ok2 { Ok(msg2.join(", ")) } else { Err(msg2.join(", ")) };
    let r3 = if ok3 { Ok(msg3.join(", ")) } else { Err(msg3.join(", ")) };
    (r2, r3)
}

fn criterion_4() -> Result<(IsesOutcome, String), String> {
    let e = catalog("iss_scalar").map_err(|e| e.to_string())?;
    let out = pipeline_iss_to_ises(&e.system, &e.certificate, &PipelineOptions::default()).map_err(|e| e.to_string())?;
    let ises = out.report.check(StabilityKind::Ises).ok_or("no ISES check")?;
    let gain = out.report.check(StabilityKind::GainDecay).ok_or("no gain-decay check")?;
    let msg = format!(
        "ISES worst margin {:.6} over {} signals; gain-decay worst {:.2e} ({} evaluated, {} skipped)",
        ises.worst_margin(),
        ises.margins.len(),
        gain.worst_residual(),
        gain.residuals.len(),
        gain.skipped
    );
    ensure(ises.pass && ises.margins.len() == 100, || msg.clone())?;
    ensure(gain.pass && gain.residuals.len() + gain.skipped == 2000, || msg.clone())?;
    Ok((out, msg))
}

fn criterion_5(ises: &IsesOutcome) -> Outcome {
    let opts = PipelineOptions {
        signals: 50,
        ..PipelineOptions::default()
    };
    let out = pipeline_ises_to_hinf(&ises.ises_system(), &opts).map_err(|e| e.to_string())?;
    let h = out.report.check(StabilityKind::Hinf).ok_or("no H-infinity check")?;
    let d = out.report.check(StabilityKind::Dissipation).ok_or("no dissipation check")?;
    let msg = format!(
        "max normalized residual {:.3e} over {} trajectories; dissipation worst {:.2e}",
        h.worst_residual(),
        h.residuals.len(),
        d.worst_residual()
    );
    ensure(h.pass && h.residuals.len() == 50 && h.worst_residual() <= 1e-3, || msg.clone())?;
    ensure(d.pass, || msg.clone())?;
    Ok(msg)
}

fn criterion_6() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [1usize, 2] {
        let sys = DisturbedSystem::linear("decay", -DMatrix::identity(n, n));
        let cert = LyapunovCertificate::squared_norm(n);
        let (_, tsys) = flow_based_normal_form(&sys, &cert, 1.0).map_err(|e| e.to_string())?;
        let pts: Vec<DVector<f64>> = if n == 1 {
            log_grid(1e-2, 1e2, 10).into_iter().flat_map(|r| [v1(r), v1(-r)]).collect()
        } else {
            let radii = log_grid(1e-2, 1e2, 20);
            sphere_directions(2, 20, 3).into_iter().zip(radii).map(|(u, r)| u * r).collect()
        };
        for y in pts {
            let f = tsys.rhs(&y, &DVector::zeros(0)).map_err(|e| e.to_string())?;
            worst = worst.max((&f + &y).norm() / y.norm());
        }
    }
    ensure(worst <= 1e-5, || format!("max relative deviation from -y: {worst:e}"))?;
    let e = catalog("cubic_1d").map_err(|e| e.to_string())?;
    let diag = match flow_based_normal_form(&e.system, &e.certificate, 1.0) {
        Err(err @ XformError::BackwardBlowup { .. }) | Err(err @ XformError::NotKInfinity(_)) => err.to_string(),
        Err(other) => return Err(format!("cubic_1d failed with an unexpected error: {other}")),
        Ok(_) => return Err("cubic_1d was transformed to y' = -y".into()),
    };
    Ok(format!("max deviation {worst:.2e}; cubic_1d rejected: {diag}"))
}

fn criterion_7(constructed: &[MonotoneScalarFn]) -> Outcome {
    let id = MonotoneScalarFn::identity();
    let a4 = make_alpha4(&id, &id).map_err(|e| e.to_string())?;
    let e1 = (a4.eval(1.0) - 2f64.ln() / std::f64::consts::PI).abs();
    let sq = MonotoneScalarFn::power(1.0, 2.0);
    let rho = make_rho(&sq).map_err(|e| e.to_string())?;
    let e2 = (rho.eval(0.5) - (-1.0f64).exp()).abs();
    let g = make_gamma(|_| 1.0, 1e3).map_err(|e| e.to_string())?.gamma_fn();
    let e3 = [0.01, 0.7, 2.0, 50.0]
        .iter()
        .map(|&s| (g.eval(s) - (2.0 * s).sqrt()).abs())
        .fold(0.0, f64::max);
    ensure(e1 <= 1e-6 && e2 <= 1e-6 && e3 <= 1e-6, || {
        format!("alpha4 err {e1:e}, rho err {e2:e}, gamma err {e3:e}")
    })?;
    let grid = gamma_level_grid(1e3);
    let mut all = vec![g.clone()];
    all.extend_from_slice(constructed);
    for gm in &all {
        check_gamma_property(gm, &grid).map_err(|e| format!("{}: {e}", gm.name()))?;
    }
    Ok(format!(
        "alpha4 err {e1:.1e}, rho err {e2:.1e}, gamma err {e3:.1e}; gamma/gamma' >= s for {} gammas",
        all.len()
    ))
}

fn constructed_gamma(cert: &LyapunovCertificate) -> Result<MonotoneScalarFn, String> {
    let cfg = GradientFlowConfig::default();
    let one_d = cert.dim() == 1;
    let profile = make_gamma(
        |s| if one_d { 0.0 } else { estimate_l(cert, 1.0, s, 16, &cfg).unwrap_or(f64::NAN) },
        1e3,
    )
    .map_err(|e| e.to_string())?;
    Ok(profile.gamma_fn())
}

/// Points with `V(x) ∈ [1e−6, 1e3]`: quasi-random directions, radii placed on
/// the level sets by ray root finding.
fn level_samples(cert: &LyapunovCertificate, count: usize) -> Vec<DVector<f64>> {
    let n = cert.dim();
    let dirs = sphere_directions(n, count, 11);
    let levels = ball_points(1, 1.0, count, 5);
    dirs.into_iter()
        .zip(levels)
        .map(|(u, l)| {
            // level log-uniform in [1e−6, 1e3]
            let frac = (l[0] + 1.0) / 2.0;
            let level = (1e-6f64.ln() + frac * (1e3f64.ln() - 1e-6f64.ln())).exp();
            let r = stabxform::lyap::ray_root(cert, &u, level).expect("ray root");
            u * r
        })
        .collect()
}

fn criterion_8() -> Result<(String, Vec<MonotoneScalarFn>), String> {
    let mut gammas = Vec::new();
    let mut worst_rt: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    for name in CATALOG_NAMES {
        let e = catalog(name).map_err(|e| e.to_string())?;
        let cert = &e.certificate;
        let gamma = constructed_gamma(cert)?.renamed(format!("gamma[{name}]"));
        let ch = build_change(cert, &gamma, 1.0).map_err(|e| format!("{name}: {e}"))?;
        for x in level_samples(cert, 200) {
            let y = ch.forward(&x).map_err(|e| format!("{name}: {e}"))?;
            let back = ch.inverse(&y).map_err(|e| format!("{name}: {e}"))?;
            let rt = (&back - &x).norm() / (1.0 + x.norm());
            let g = gamma.eval(y.norm());
            let nm = (cert.value(&back) - g).abs() / (1.0 + g);
            worst_rt = worst_rt.max(rt);
            worst_norm = worst_norm.max(nm);
        }
        ensure(worst_rt <= 1e-6, || format!("{name}: round trip error {worst_rt:e}"))?;
        ensure(worst_norm <= 1e-6, || format!("{name}: normalization error {worst_norm:e}"))?;
        // ‖DT(x_k)‖ decreasing along ‖x_k‖ = 2^{−k}
        let u = sphere_directions(cert.dim(), 1, 4).remove(0);
        let norms: Vec<f64> = (4..=20)
            .map(|k| {
                let jac = ch.jacobian(&(&u * 2f64.powi(-k))).expect("jacobian");
                stabxform::lyap::operator_norm(&jac)
            })
            .collect();
        ensure(norms.windows(2).all(|w| w[1] < w[0]), || format!("{name}: DT norms not decreasing {norms:?}"))?;
        gammas.push(gamma);
    }
    Ok((
        format!("round trip {worst_rt:.1e}, normalization {worst_norm:.1e} over {} systems", CATALOG_NAMES.len()),
        gammas,
    ))
}

fn report(n: &str, res: &Outcome, elapsed: Duration, limit: Option<Duration>) -> bool {
    let over = limit.is_some_and(|l| elapsed > l);
    let ok = res.is_ok() && !over;
    let detail = match res {
        Ok(m) => m.clone(),
        Err(e) => e.clone(),
    };
    let limit_note = match limit {
        Some(l) if over => format!(", exceeded limit {:.0}s", l.as_secs_f64()),
        _ => String::new(),
    };
    println!(
        "criterion {n}: {} [{:.2}s{limit_note}] {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn main() -> ExitCode {
    let mut ok = true;

    let t = Instant::now();
    let r = criterion_1();
    ok &= report("1", &r, t.elapsed(), Some(Duration::from_secs(5)));

    let t = Instant::now();
    let (r2, r3) = criteria_2_3();
    let el = t.elapsed();
    ok &= report("2", &r2, el, Some(Duration::from_secs(30)));
    ok &= report("3", &r3, el, None);

    let t = Instant::now();
    let r4 = criterion_4();
    let el = t.elapsed();
    let (o4, ises) = match r4 {
        Ok((out, msg)) => (Ok(msg), Some(out)),
        Err(e) => (Err(e), None),
    };
    ok &= report("4", &o4, el, Some(Duration::from_secs(60)));

    let t = Instant::now();
    let r5 = match &ises {
        Some(out) => criterion_5(out),
        None => Err("skipped: criterion 4 produced no ISES system".into()),
    };
    ok &= report("5", &r5, t.elapsed(), Some(Duration::from_secs(60)));

    let t = Instant::now();
    let r6 = criterion_6();
    ok &= report("6", &r6, t.elapsed(), None);

    let t = Instant::now();
    let r8 = criterion_8();
    let el8 = t.elapsed();
    let (o8, gammas) = match r8 {
        Ok((m, g)) => (Ok(m), g),
        Err(e) => (Err(e), Vec::new()),
    };

    let t = Instant::now();
    let mut pipeline_gammas = gammas.clone();
    if let Some(out) = &ises {
        pipeline_gammas.push(out.change.gamma().clone());
    }
    let r7 = criterion_7(&pipeline_gammas);
    ok &= report("7", &r7, t.elapsed(), None);
    ok &= report("8", &o8, el8, None);

    if ok {
        println!("acceptance: all criteria PASS");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAIL");
        ExitCode::FAILURE
    }
}
