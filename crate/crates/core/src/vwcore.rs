//! Estimate calculus for a V–W pair: the growth function `F`, its inverse,
//! the a-priori bounds along solutions, the return-time relation, `v_*`, and
//! a sampled checker for the general uniqueness criterion.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::quad::{adaptive_simpson, QuadError};
use crate::timefunc::{parse_expr_in, ExprError, Scope};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

const QUAD_TOL: f64 = 1e-12;
const QUAD_MAX_INTERVALS: usize = 1_000_000;
const VALIDATION_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VwError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid growth pair: {0}")]
    InvalidGrowthPair(String),
    #[error("F stays below {z} up to Vmax = {v_max} (F(Vmax) = {f_at_v_max}); condition (A) fails on the window")]
    NoUpperBracket { z: f64, v_max: f64, f_at_v_max: f64 },
    #[error("cumulative integral reaches {reached} < target {target} inside the sampled window")]
    WindowExhausted { reached: f64, target: f64 },
    #[error("quadrature: {0}")]
    Quadrature(#[from] QuadError),
    #[error("expression: {0}")]
    Expr(#[from] ExprError),
}

/// The functions `G`, `g` of a V–W pair together with the level `v₀`.
///
/// `F(v) = ∫_{v₀}^{v} g(u)/G(u) du` is integrated in the variable `ln u`,
/// which keeps the integrand smooth across the wide ranges `F⁻¹` explores.
#[derive(Clone)]
pub struct GrowthPair {
    v0: f64,
    big_g: ScalarFn,
    small_g: ScalarFn,
    v_max: f64,
}

impl fmt::Debug for GrowthPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrowthPair")
            .field("v0", &self.v0)
            .field("v_max", &self.v_max)
            .finish_non_exhaustive()
    }
}

impl GrowthPair {
    /// Uses the default `Vmax = 10⁶·v₀`.
    pub fn new(v0: f64, big_g: ScalarFn, small_g: ScalarFn) -> Result<Self, VwError> {
        Self::with_v_max(v0, big_g, small_g, 1e6 * v0)
    }

    pub fn with_v_max(
        v0: f64,
        big_g: ScalarFn,
        small_g: ScalarFn,
        v_max: f64,
    ) -> Result<Self, VwError> {
        if !(v0 > 0.0) || !v0.is_finite() {
            return Err(VwError::InvalidGrowthPair(format!("v0 = {v0} must be positive")));
        }
        if !(v_max > v0) {
            return Err(VwError::InvalidGrowthPair(format!(
                "Vmax = {v_max} must exceed v0 = {v0}"
            )));
        }
        let gp = Self {
            v0,
            big_g,
            small_g,
            v_max,
        };
        gp.validate()?;
        Ok(gp)
    }

    /// Parses `G` and `g` as expressions in the variable `v`.
    pub fn from_exprs(v0: f64, big_g: &str, small_g: &str) -> Result<Self, VwError> {
        let scope = Scope::scalar("v");
        let eg = parse_expr_in(big_g, &scope)?;
        let es = parse_expr_in(small_g, &scope)?;
        Self::new(
            v0,
            Arc::new(move |v| eg.eval(0.0, &[v]).unwrap_or(f64::NAN)),
            Arc::new(move |v| es.eval(0.0, &[v]).unwrap_or(f64::NAN)),
        )
    }

    fn validate(&self) -> Result<(), VwError> {
        let g0 = (self.small_g)(self.v0);
        if !(g0 > 0.0) {
            return Err(VwError::InvalidGrowthPair(format!("g(v0) = {g0} is not positive")));
        }
        let ratio = (self.v_max / self.v0).ln();
        for k in 0..=VALIDATION_POINTS {
            let v = self.v0 * (ratio * k as f64 / VALIDATION_POINTS as f64).exp();
            let g = (self.small_g)(v);
            let big = (self.big_g)(v);
            if !(g >= g0 * (1.0 - 1e-12)) {
                return Err(VwError::InvalidGrowthPair(format!(
                    "g({v}) = {g} < g(v0) = {g0}"
                )));
            }
            if !(big > 0.0) {
                return Err(VwError::InvalidGrowthPair(format!("G({v}) = {big} is not positive")));
            }
        }
        Ok(())
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn g(&self, v: f64) -> f64 {
        (self.small_g)(v)
    }

    pub fn big_g(&self, v: f64) -> f64 {
        (self.big_g)(v)
    }

    /// `g(v)/G(v)`, the rate `dF/dv`.
    pub fn ratio(&self, v: f64) -> f64 {
        (self.small_g)(v) / (self.big_g)(v)
    }

    /// `∫_a^b g/G`, both limits `≥ v₀`.
    fn integral(&self, a: f64, b: f64) -> Result<f64, VwError> {
        let h = |s: f64| {
            let u = s.exp();
            self.ratio(u) * u
        };
        let (la, lb) = (a.ln(), b.ln());
        // Tolerance relative to the size of the integral, from a coarse
        // midpoint sum; an absolute 1e-12 is out of reach once F is large.
        let coarse = (0..16)
            .map(|k| h(la + (lb - la) * (k as f64 + 0.5) / 16.0).abs())
            .sum::<f64>()
            * (lb - la).abs()
            / 16.0;
        let tol = QUAD_TOL * coarse.max(1.0);
        Ok(adaptive_simpson(&h, la, lb, tol, QUAD_MAX_INTERVALS)?)
    }

    /// `F(v)`; exactly zero at `v₀`.
    pub fn f(&self, v: f64) -> Result<f64, VwError> {
        if !(v >= self.v0) {
            return Err(VwError::Domain(format!("F({v}) with v < v0 = {}", self.v0)));
        }
        if v == self.v0 {
            return Ok(0.0);
        }
        self.integral(self.v0, v)
    }

    /// `F⁻¹(z)` for `z ≥ 0`, by doubling from `v₀ + 1` and then safeguarded
    /// regula falsi on the bracket.
    pub fn f_inv(&self, z: f64) -> Result<f64, VwError> {
        if !(z >= 0.0) || !z.is_finite() {
            return Err(VwError::Domain(format!("F⁻¹({z}) needs z ≥ 0")));
        }
        if z == 0.0 {
            return Ok(self.v0);
        }
        let target_tol = 1e-11 * (1.0 + z);
        let (mut lo, mut f_lo) = (self.v0, 0.0);
        let mut hi = (self.v0 + 1.0).min(self.v_max);
        let mut f_hi = self.integral(lo, hi)?;
        while f_hi < z {
            if hi >= self.v_max {
                return Err(VwError::NoUpperBracket {
                    z,
                    v_max: self.v_max,
                    f_at_v_max: f_hi,
                });
            }
            let next = (2.0 * hi).min(self.v_max);
            let step = self.integral(hi, next)?;
            lo = hi;
            f_lo = f_hi;
            hi = next;
            f_hi += step;
        }
        if (f_hi - z).abs() <= target_tol {
            return Ok(hi);
        }
        // Illinois variant of regula falsi, with a bisection fallback. The
        // interpolation weights are kept apart from the true values of F at
        // the bracket ends, which the incremental integration relies on.
        let (mut w_lo, mut w_hi) = (f_lo - z, f_hi - z);
        let mut side = 0i8;
        for _ in 0..200 {
            let mut m = lo - w_lo * (hi - lo) / (w_hi - w_lo);
            if !(m > lo && m < hi) {
                m = 0.5 * (lo + hi);
            }
            let f_m = f_lo + self.integral(lo, m)?;
            let r = f_m - z;
            if r.abs() <= target_tol || (hi - lo) <= 4.0 * f64::EPSILON * hi {
                return Ok(m);
            }
            if r < 0.0 {
                lo = m;
                f_lo = f_m;
                w_lo = r;
                if side == -1 {
                    w_hi *= 0.5;
                }
                side = -1;
            } else {
                hi = m;
                w_hi = r;
                if side == 1 {
                    w_lo *= 0.5;
                }
                side = 1;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Free-function form of [`GrowthPair::f`].
pub fn growth_f(gp: &GrowthPair, v: f64) -> Result<f64, VwError> {
    gp.f(v)
}

/// Free-function form of [`GrowthPair::f_inv`].
pub fn growth_f_inv(gp: &GrowthPair, z: f64) -> Result<f64, VwError> {
    gp.f_inv(z)
}

/// Running sup/inf of `W` along a trajectory and on its `V = v₀` crossings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowBounds {
    pub w_plus: f64,
    pub w_minus: f64,
    /// `W*`: sup of `W` over the times where `V > v₀`.
    pub w_sup: f64,
    /// `W_*`: inf of `W` over the times where `V > v₀`.
    pub w_inf: f64,
    /// `W₀`: inf of `W` on `V = v₀`.
    pub w_low0: f64,
    /// `W⁰`: sup of `W` on `V = v₀`.
    pub w_upper0: f64,
}

impl WindowBounds {
    pub fn is_consistent(&self) -> bool {
        let vals = [self.w_minus, self.w_low0, self.w_upper0, self.w_plus];
        if vals.iter().any(|v| !v.is_finite()) {
            return true;
        }
        self.w_minus <= self.w_low0 && self.w_low0 <= self.w_upper0 && self.w_upper0 <= self.w_plus
    }
}

/// `V ≤ F⁻¹(W* − W₀)` after the first entry into `V ≥ v₀`.
pub fn lemma1_outer_bound(gp: &GrowthPair, w_sup: f64, w_low0: f64) -> Result<f64, VwError> {
    if w_sup < w_low0 {
        return Err(VwError::Domain(format!("W* = {w_sup} < W0 = {w_low0}")));
    }
    gp.f_inv(w_sup - w_low0)
}

/// `V ≤ F⁻¹(F(V(t₀)) + W* − W(t₀))` while `V` stays above `v₀`.
pub fn lemma1_interior_bound(
    gp: &GrowthPair,
    v_t0: f64,
    w_t0: f64,
    w_sup: f64,
) -> Result<f64, VwError> {
    if v_t0 < gp.v0() {
        return Err(VwError::Domain(format!("V(t0) = {v_t0} < v0 = {}", gp.v0())));
    }
    if w_sup < w_t0 {
        return Err(VwError::Domain(format!("W* = {w_sup} < W(t0) = {w_t0}")));
    }
    gp.f_inv(gp.f(v_t0)? + w_sup - w_t0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedBound {
    pub value: f64,
    pub first: f64,
    pub second: f64,
    /// Set when an `F⁻¹` argument was negative and clamped to zero.
    pub first_clamped: bool,
    pub second_clamped: bool,
}

/// `max{F⁻¹(F(V(t₀)) + W⁰ − W(t₀)), F⁻¹(W* − W₀)}`. A negative argument is
/// clamped to zero (the term becomes `v₀`) and flagged.
pub fn lemma1_mixed_bound(
    gp: &GrowthPair,
    v_t0: f64,
    w_t0: f64,
    w_upper0: f64,
    w_sup: f64,
    w_low0: f64,
) -> Result<MixedBound, VwError> {
    if v_t0 < gp.v0() {
        return Err(VwError::Domain(format!("V(t0) = {v_t0} < v0 = {}", gp.v0())));
    }
    let a1 = gp.f(v_t0)? + w_upper0 - w_t0;
    let a2 = w_sup - w_low0;
    if a1 < 0.0 && a2 < 0.0 {
        return Err(VwError::Domain(format!(
            "both arguments negative ({a1}, {a2})"
        )));
    }
    let first = gp.f_inv(a1.max(0.0))?;
    let second = gp.f_inv(a2.max(0.0))?;
    Ok(MixedBound {
        value: first.max(second),
        first,
        second,
        first_clamped: a1 < 0.0,
        second_clamped: a2 < 0.0,
    })
}

/// `V ≤ F⁻¹(½[W(t*) − W(t_*)])` on an excursion above `v₀`.
pub fn lemma1_excursion_bound(
    gp: &GrowthPair,
    w_exit: f64,
    w_entry: f64,
) -> Result<f64, VwError> {
    if w_exit < w_entry {
        return Err(VwError::Domain(format!(
            "W at exit {w_exit} < W at entry {w_entry}"
        )));
    }
    gp.f_inv(0.5 * (w_exit - w_entry))
}

/// Smallest `θ ≥ t₀` with `∫_{t₀}^{θ} α = (W* − W_*)/g(v₀)`.
///
/// `alpha` is sampled as ascending `(t, α(t))` pairs and treated as piecewise
/// linear; the cumulative integral is inverted exactly within the segment
/// where it reaches the target.
pub fn return_time(
    alpha: &[(f64, f64)],
    t0: f64,
    w_sup: f64,
    w_inf: f64,
    g_v0: f64,
) -> Result<f64, VwError> {
    if !(g_v0 > 0.0) {
        return Err(VwError::Domain(format!("g(v0) = {g_v0} must be positive")));
    }
    if w_sup < w_inf {
        return Err(VwError::Domain(format!("W* = {w_sup} < W_* = {w_inf}")));
    }
    if alpha.iter().any(|&(_, a)| !(a > 0.0)) {
        return Err(VwError::Domain("α must be positive on all samples".into()));
    }
    if alpha.len() < 2 || t0 < alpha[0].0 || t0 > alpha[alpha.len() - 1].0 {
        return Err(VwError::Domain(format!("t0 = {t0} outside the sampled window")));
    }
    let target = (w_sup - w_inf) / g_v0;
    if target == 0.0 {
        return Ok(t0);
    }
    let start = alpha.partition_point(|&(t, _)| t <= t0).max(1) - 1;
    let interp = |i: usize, t: f64| {
        let (ta, aa) = alpha[i];
        let (tb, ab) = alpha[i + 1];
        aa + (ab - aa) * (t - ta) / (tb - ta)
    };
    let mut acc = 0.0;
    let mut ta = t0;
    let mut aa = interp(start, t0);
    for i in start..alpha.len() - 1 {
        let (tb, ab) = alpha[i + 1];
        let h = tb - ta;
        if h <= 0.0 {
            continue;
        }
        let piece = 0.5 * (aa + ab) * h;
        if acc + piece >= target {
            // Solve aa·d + (ab − aa)/(2h)·d² = rem for d ∈ [0, h].
            let rem = target - acc;
            let k = (ab - aa) / (2.0 * h);
            let d = if k.abs() < 1e-300 {
                rem / aa
            } else {
                2.0 * rem / (aa + (aa * aa + 4.0 * k * rem).sqrt())
            };
            return Ok(ta + d.clamp(0.0, h));
        }
        acc += piece;
        ta = tb;
        aa = ab;
    }
    Err(VwError::WindowExhausted {
        reached: acc,
        target,
    })
}

/// `v_* = F⁻¹((w⁺ − w₋)/2)`.
pub fn v_star(gp: &GrowthPair, w_plus: f64, w_minus: f64) -> Result<f64, VwError> {
    if !(w_plus > w_minus) {
        return Err(VwError::Domain(format!("w+ = {w_plus} must exceed w- = {w_minus}")));
    }
    gp.f_inv(0.5 * (w_plus - w_minus))
}

/// Time-dependent form `F⁻¹(½[sup_{s≥t} w⁰(s) − inf_{s≤t} w₀(s)])` on the
/// sample times of `w_upper0` / `w_low0` (same grid, ascending).
pub fn v_star_curve(
    gp: &GrowthPair,
    w_upper0: &[f64],
    w_low0: &[f64],
) -> Result<Vec<f64>, VwError> {
    if w_upper0.len() != w_low0.len() {
        return Err(VwError::Domain("w⁰ and w₀ sampled on different grids".into()));
    }
    let n = w_upper0.len();
    let mut suffix_max = vec![f64::NEG_INFINITY; n];
    let mut run = f64::NEG_INFINITY;
    for i in (0..n).rev() {
        run = run.max(w_upper0[i]);
        suffix_max[i] = run;
    }
    let mut run = f64::INFINITY;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        run = run.min(w_low0[i]);
        out.push(gp.f_inv((0.5 * (suffix_max[i] - run)).max(0.0))?);
    }
    Ok(out)
}

/// Status of a sampled uniqueness check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Vacuous,
}

/// Functions entering the general uniqueness criterion. `u` and `v` act on
/// the difference `z = x − y`; `field` is the right-hand side `f(t, x)`.
pub struct UniquenessInputs<'a> {
    pub u: &'a (dyn Fn(f64, &[f64]) -> f64 + Sync),
    pub v: &'a (dyn Fn(f64, &[f64]) -> f64 + Sync),
    pub big_h: &'a (dyn Fn(f64) -> f64 + Sync),
    pub small_h: &'a (dyn Fn(f64) -> f64 + Sync),
    pub b: &'a (dyn Fn(f64) -> f64 + Sync),
    pub beta: &'a (dyn Fn(f64) -> f64 + Sync),
    pub field: &'a (dyn Fn(f64, &[f64]) -> Vec<f64> + Sync),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    pub status: CheckStatus,
    pub samples: usize,
    /// `min b(t)H(V(z)) − |U(t,z)|`.
    pub bound_margin: f64,
    /// `min U̇ − β(t)h(V(z))`.
    pub growth_margin: f64,
    pub bound_witness: Option<(f64, Vec<f64>, Vec<f64>)>,
    pub growth_witness: Option<(f64, Vec<f64>, Vec<f64>)>,
    /// `(1/b(t))|∫₀ᵗ β(s) h(H⁻¹(u/b(s))) ds|` with `u = 1` at `t = T₋` and `t = T₊`.
    pub divergence_at_start: f64,
    pub divergence_at_end: f64,
    pub divergence_window_certified: bool,
    pub notes: Vec<String>,
}

/// Probe settings for [`check_uniqueness_general`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniquenessProbe {
    pub window: (f64, f64),
    pub v_probe_max: f64,
    pub divergence_threshold: f64,
}

fn invert_increasing(h: &dyn Fn(f64) -> f64, target: f64) -> Option<f64> {
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut iter = 0;
    while h(hi) < target {
        lo = hi;
        hi *= 2.0;
        iter += 1;
        if iter > 1100 || !hi.is_finite() {
            return None;
        }
    }
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if h(m) < target {
            lo = m;
        } else {
            hi = m;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Sampled check of the general uniqueness criterion on pairs `(t, x, y)`.
pub fn check_uniqueness_general(
    inputs: &UniquenessInputs<'_>,
    samples: &[(f64, Vec<f64>, Vec<f64>)],
    probe: &UniquenessProbe,
) -> UniquenessReport {
    let mut notes = Vec::new();
    let mut preconditions_ok = true;
    let grid: Vec<f64> = (1..=200)
        .map(|k| probe.v_probe_max * k as f64 / 200.0)
        .collect();
    for w in grid.windows(2) {
        if !((inputs.big_h)(w[1]) > (inputs.big_h)(w[0])) {
            notes.push(format!("H is not strictly increasing near v = {}", w[0]));
            preconditions_ok = false;
            break;
        }
    }
    for w in grid.windows(2) {
        if (inputs.small_h)(w[1]) < (inputs.small_h)(w[0]) {
            notes.push(format!("h is not nondecreasing near v = {}", w[0]));
            preconditions_ok = false;
            break;
        }
    }
    if let Some(&v) = grid.iter().find(|&&v| !((inputs.small_h)(v) > 0.0)) {
        notes.push(format!("h is not positive at v = {v}"));
        preconditions_ok = false;
    }

    // Normalised divergence integral at both window ends.
    let (t_lo, t_hi) = probe.window;
    let integrand = |s: f64| {
        let bs = (inputs.b)(s);
        match invert_increasing(inputs.big_h, 1.0 / bs) {
            Some(v) => (inputs.beta)(s) * (inputs.small_h)(v),
            None => f64::NAN,
        }
    };
    let integrate_to = |t: f64| {
        let steps = 2000;
        let h = t / steps as f64;
        let mut acc = 0.0;
        let mut prev = integrand(0.0);
        for k in 1..=steps {
            let cur = integrand(h * k as f64);
            acc += 0.5 * (prev + cur) * h;
            prev = cur;
        }
        acc.abs() / (inputs.b)(t)
    };
    let divergence_at_start = integrate_to(t_lo);
    let divergence_at_end = integrate_to(t_hi);
    let divergence_window_certified = divergence_at_start >= probe.divergence_threshold
        && divergence_at_end >= probe.divergence_threshold;
    if !divergence_window_certified {
        notes.push("divergence threshold not reached on the window".into());
    }

    if samples.is_empty() {
        notes.push("no sample pairs: check is vacuous".into());
        return UniquenessReport {
            status: CheckStatus::Vacuous,
            samples: 0,
            bound_margin: f64::NAN,
            growth_margin: f64::NAN,
            bound_witness: None,
            growth_witness: None,
            divergence_at_start,
            divergence_at_end,
            divergence_window_certified,
            notes,
        };
    }

    let mut bound_margin = f64::INFINITY;
    let mut growth_margin = f64::INFINITY;
    let mut bound_witness = None;
    let mut growth_witness = None;
    for (t, x, y) in samples {
        let z: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let vz = (inputs.v)(*t, &z);
        let m1 = (inputs.b)(*t) * (inputs.big_h)(vz) - (inputs.u)(*t, &z).abs();
        if m1 < bound_margin {
            bound_margin = m1;
            bound_witness = Some((*t, x.clone(), y.clone()));
        }
        // U̇ along the pair, by a central difference in the flow direction.
        let fx = (inputs.field)(*t, x);
        let fy = (inputs.field)(*t, y);
        let dz: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
        let step = 1e-5 * (1.0 + t.abs());
        let shifted = |s: f64| {
            let zs: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a + s * d).collect();
            (inputs.u)(*t + s, &zs)
        };
        let u_dot = (shifted(step) - shifted(-step)) / (2.0 * step);
        let m2 = u_dot - (inputs.beta)(*t) * (inputs.small_h)(vz);
        if m2 < growth_margin {
            growth_margin = m2;
            growth_witness = Some((*t, x.clone(), y.clone()));
        }
    }
    // The central difference carries O(step²) error.
    let slack = 1e-7;
    let pass = preconditions_ok
        && bound_margin >= -slack
        && growth_margin >= -slack
        && divergence_window_certified;
    UniquenessReport {
        status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
        samples: samples.len(),
        bound_margin,
        growth_margin,
        bound_witness,
        growth_witness,
        divergence_at_start,
        divergence_at_end,
        divergence_window_certified,
        notes,
    }
}
