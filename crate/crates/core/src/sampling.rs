//! Low-discrepancy sampling of spheres, balls and log-spaced grids.

use nalgebra::DVector;

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in base `base`.
pub fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % b) as f64;
        index /= b;
        f *= inv;
    }
    r
}

/// Halton point number `index` (1-based is recommended) in `[0,1)^dim`.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "halton dimension too large");
    (0..dim).map(|k| radical_inverse(index, PRIMES[k])).collect()
}

/// Deterministic unit directions on S^{n-1}.
///
/// In one dimension the directions alternate `+1, -1`. Otherwise Halton
/// points are pushed through Box–Muller and normalized; `offset` shifts the
/// Halton index so independent streams can be drawn.
pub fn sphere_directions(n: usize, count: usize, offset: u64) -> Vec<DVector<f64>> {
    if n == 1 {
        return (0..count)
            .map(|i| DVector::from_element(1, if (i as u64 + offset) % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
    }
    let pairs = n.div_ceil(2);
    let mut out = Vec::with_capacity(count);
    let mut idx = offset + 1;
    while out.len() < count {
        let u = halton(idx, 2 * pairs);
        idx += 1;
        let mut g = Vec::with_capacity(2 * pairs);
        for p in 0..pairs {
            let r = (-2.0 * u[2 * p].max(1e-300).ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u[2 * p + 1];
            g.push(r * th.cos());
            g.push(r * th.sin());
        }
        g.truncate(n);
        let v = DVector::from_vec(g);
        let nv = v.norm();
        if nv > 1e-12 {
            out.push(v / nv);
        }
    }
    out
}

/// Deterministic points of the closed ball of radius `radius` in R^n.
///
/// The first coordinate of the Halton point sets the radial fraction
/// (`u^{1/n}`, uniform in volume); the direction comes from the remaining
/// coordinates.
pub fn ball_points(n: usize, radius: f64, count: usize, offset: u64) -> Vec<DVector<f64>> {
    if n == 0 {
        return vec![DVector::zeros(0); count];
    }
    let dirs = sphere_directions(n, count, offset + 7);
    dirs.into_iter()
        .enumerate()
        .map(|(i, u)| {
            let frac = radical_inverse(i as u64 + offset + 1, 2);
            u * (radius * frac.powf(1.0 / n as f64))
        })
        .collect()
}

/// Maps `[0,1)^k` onto the closed unit ball of `R^k`; the faces of the cube
/// land on the sphere.
pub fn cube_to_ball(u: &[f64]) -> DVector<f64> {
    let v = DVector::from_iterator(u.len(), u.iter().map(|t| 2.0 * t - 1.0));
    let inf = v.amax();
    let two = v.norm();
    if two == 0.0 {
        v
    } else {
        v * (inf / two)
    }
}

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && count >= 1);
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base2() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn directions_are_unit() {
        for n in 1..5 {
            for u in sphere_directions(n, 50, 0) {
                assert!((u.norm() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ball_points_inside() {
        for p in ball_points(3, 2.0, 200, 0) {
            assert!(p.norm() <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn cube_faces_reach_sphere() {
        let p = cube_to_ball(&[1.0, 0.5]);
        assert!((p.norm() - 1.0).abs() < 1e-15);
        assert!(cube_to_ball(&[0.75, 0.6]).norm() < 1.0);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-6, 1e3, 10);
        assert!((g[0] - 1e-6).abs() < 1e-20);
        assert!((g[9] - 1e3).abs() < 1e-9);
    }
}
