//! Reference computations that share no code with the library routines
//! they check.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vwbound_core::quadratic::{Grids, QuadraticProblem, Region};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&m + m.transpose()) * 0.5
}

/// `MᵀM + ½I`, well away from singular.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    m.transpose() * &m + DMatrix::identity(n, n) * 0.5
}

/// Roots of `λ ↦ det(C − λB)` by sign changes on a grid and bisection.
pub fn pencil_roots(c: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let n = c.nrows();
    let b_inv = b.clone().try_inverse().expect("B invertible");
    let radius = 1.01 * b_inv.norm() * c.norm();
    let p = |l: f64| (c - b * l).determinant();
    let mut points = 4096 * n;
    loop {
        let mut roots = Vec::new();
        let h = 2.0 * radius / points as f64;
        let mut a = -radius;
        let mut pa = p(a);
        for k in 1..=points {
            let bb = -radius + h * k as f64;
            let pb = p(bb);
            if pa == 0.0 {
                roots.push(a);
            } else if pa.signum() != pb.signum() && pb != 0.0 {
                let (mut lo, mut hi, mut plo) = (a, bb, pa);
                for _ in 0..200 {
                    let m = 0.5 * (lo + hi);
                    if m <= lo || m >= hi {
                        break;
                    }
                    let pm = p(m);
                    if pm == 0.0 {
                        lo = m;
                        hi = m;
                        break;
                    }
                    if pm.signum() == plo.signum() {
                        lo = m;
                        plo = pm;
                    } else {
                        hi = m;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
            a = bb;
            pa = pb;
        }
        if roots.len() == n || points > 1 << 22 {
            roots.sort_by(f64::total_cmp);
            return roots;
        }
        points *= 8;
    }
}

/// Composite Simpson rule with `panels` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    assert!(panels % 2 == 0);
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for k in 1..panels {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + h * k as f64);
    }
    s * h / 3.0
}

/// `(1/c₃)∫_{v₀}^{v} (u − c₂√u)/(u^σ(u + c₁√u)) du` by Simpson's rule.
pub fn f_by_simpson(sigma: f64, c1: f64, c2: f64, c3: f64, v0: f64, v: f64) -> f64 {
    let integrand = |u: f64| (u - c2 * u.sqrt()) / (u.powf(sigma) * (u + c1 * u.sqrt()));
    simpson(integrand, v0, v, 1_000_000) / c3
}

/// Random `(σ, c₁, c₂, c₃, v₀)` with `c₂² < v₀`; every fourth set has `σ = 1`.
pub fn admissible_constants(rng: &mut ChaCha8Rng, k: usize) -> (f64, f64, f64, f64, f64) {
    let sigma = if k % 4 == 0 { 1.0 } else { rng.random_range(0.1..0.95) };
    let c1 = rng.random_range(0.0..0.5);
    let c2 = rng.random_range(0.01..0.3);
    let c3 = rng.random_range(0.2..4.0);
    let v0 = c2 * c2 * rng.random_range(1.5..20.0);
    (sigma, c1, c2, c3, v0)
}

pub const EPS: f64 = 0.1;

/// The bounded solution of the reference problem, by variation of constants.
pub fn reference_solution(t: f64) -> [f64; 2] {
    let s = EPS * (t.sin() + t.cos()) / 2.0;
    [-s, s]
}

pub fn reference_problem(grids: Grids) -> QuadraticProblem {
    QuadraticProblem::from_texts(
        2,
        &["1", "0", "0", "1"],
        &["1", "0", "0", "-1"],
        &["1", "0", "0", "-1"],
        &["0.1*sin(t)", "0.1*cos(t)"],
        (-40.0, 40.0),
        Region {
            v0: Some(0.02),
            v_star: None,
            w_minus: -0.02,
            w_plus: 0.02,
        },
        grids,
    )
    .expect("reference problem")
}

/// Cubic Hermite interpolation of node data using the vector field for
/// the slopes.
pub fn hermite(
    t: &[f64],
    x: &[Vec<f64>],
    field: impl Fn(f64, &[f64]) -> Vec<f64>,
    s: f64,
) -> Option<Vec<f64>> {
    if !(s >= t[0] && s <= t[t.len() - 1]) {
        return None;
    }
    let i = t.partition_point(|&p| p < s);
    if t[i] == s {
        return Some(x[i].clone());
    }
    let (t0, t1) = (t[i - 1], t[i]);
    let h = t1 - t0;
    let u = (s - t0) / h;
    let (d0, d1) = (field(t0, &x[i - 1]), field(t1, &x[i]));
    let h00 = 2.0 * u.powi(3) - 3.0 * u * u + 1.0;
    let h10 = u.powi(3) - 2.0 * u * u + u;
    let h01 = -2.0 * u.powi(3) + 3.0 * u * u;
    let h11 = u.powi(3) - u * u;
    Some(
        (0..x[i].len())
            .map(|k| h00 * x[i - 1][k] + h10 * h * d0[k] + h01 * x[i][k] + h11 * h * d1[k])
            .collect(),
    )
}
