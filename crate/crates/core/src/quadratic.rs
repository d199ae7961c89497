//! Quadratic V–W pairs `V = ⟨B(t)x,x⟩`, `W = ⟨C(t)x,x⟩` for systems
//! `ẋ = A(t,x)x + f₀(t)`: pencil quantities, constant fitting, the condition
//! checks, the closed-form bounds and the certificate that ties them together.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::pencil::{
    cholesky, lambda_minus_plus, signed_parts, solve_pencil, spd_solve, spectral_projectors_with,
    symmetric_eigen, Matrix, PencilError, PencilTolerances, SymmetricPencil, Vector,
};
use crate::timefunc::{MatrixError, MatrixFunction, Scope};
use crate::vwcore::{CheckStatus, GrowthPair, VwError};

/// Exponents tried when `σ` is not fixed by the caller.
pub const SIGMA_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
const VSTAR_AUTO_FACTOR: f64 = 1.05;
const VSTAR_AUTO_ITERATIONS: usize = 6;
const SHELL_FRACTION: usize = 4;
const ATTEMPTS_PER_SAMPLE: usize = 1000;
/// Floor for `c₃` so that `G` stays positive when `Λ_V` vanishes identically.
const C3_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadraticError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("{name}: {source}")]
    Matrix {
        name: &'static str,
        #[source]
        source: MatrixError,
    },
    #[error("pencil at t = {t}: {source}")]
    Pencil {
        t: f64,
        #[source]
        source: PencilError,
    },
    #[error("condition (e) infeasible: {inequality} violated at t = {t}, x = {x:?}")]
    InfeasibleConditionE {
        inequality: String,
        t: f64,
        x: Vec<f64>,
    },
    #[error("condition (g) fails: trailing max of λ₋⁺ is {trailing_max:.6e} ≤ {tolerance:.1e}")]
    ConditionGFailed { trailing_max: f64, tolerance: f64 },
    #[error("not retractable: ⟨C₊x,x⟩ = {value:.3e}")]
    NotRetractable { value: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Vw(#[from] VwError),
}

fn merr(name: &'static str) -> impl Fn(MatrixError) -> QuadraticError {
    move |source| QuadraticError::Matrix { name, source }
}

fn perr(t: f64) -> impl Fn(PencilError) -> QuadraticError {
    move |source| QuadraticError::Pencil { t, source }
}

/// Region scalars; `None` requests automatic selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub v0: Option<f64>,
    pub v_star: Option<f64>,
    pub w_minus: f64,
    pub w_plus: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grids {
    /// Number of sample times on the window (0 is always added).
    pub t_points: usize,
    /// Region samples per sample time.
    pub state_samples: usize,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            t_points: 161,
            state_samples: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub seed: u64,
    /// Fixed `σ`; `None` searches [`SIGMA_GRID`].
    pub sigma: Option<f64>,
    /// Level the window integrals of `α` must reach.
    pub divergence_threshold: f64,
    /// `λ₋⁺` must exceed this on the trailing quarter for condition (g).
    pub g_tolerance: f64,
    pub safety: f64,
    pub pencil: PencilTolerances,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 42,
            sigma: None,
            divergence_threshold: 10.0,
            g_tolerance: 1e-6,
            safety: 1.01,
            pencil: PencilTolerances::default(),
        }
    }
}

/// The problem data: `B`, `C`, `A`, `f₀`, window, region and grids.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    n: usize,
    b: MatrixFunction,
    c: MatrixFunction,
    a: MatrixFunction,
    f0: MatrixFunction,
    b_dot: MatrixFunction,
    c_dot: MatrixFunction,
    window: (f64, f64),
    pub region: Region,
    pub grids: Grids,
}

impl QuadraticProblem {
    pub fn new(
        b: MatrixFunction,
        c: MatrixFunction,
        a: MatrixFunction,
        f0: MatrixFunction,
        window: (f64, f64),
        region: Region,
        grids: Grids,
    ) -> Result<Self, QuadraticError> {
        let n = b.rows();
        let square = |m: &MatrixFunction, name: &str| {
            if m.rows() != n || m.cols() != n {
                Err(QuadraticError::Problem(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.rows(),
                    m.cols()
                )))
            } else {
                Ok(())
            }
        };
        if n == 0 {
            return Err(QuadraticError::Problem("dimension must be positive".into()));
        }
        square(&b, "B")?;
        square(&c, "C")?;
        square(&a, "A")?;
        if f0.rows() != n || f0.cols() != 1 {
            return Err(QuadraticError::Problem(format!(
                "f0 is {}x{}, expected {n}x1",
                f0.rows(),
                f0.cols()
            )));
        }
        if !b.is_symmetric() || !c.is_symmetric() {
            return Err(QuadraticError::Problem("B and C must be declared symmetric".into()));
        }
        b.require_state_independent().map_err(merr("B"))?;
        c.require_state_independent().map_err(merr("C"))?;
        f0.require_state_independent().map_err(merr("f0"))?;
        let (lo, hi) = window;
        if !(lo < 0.0 && 0.0 < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(QuadraticError::Problem(format!(
                "window [{lo}, {hi}] must satisfy T- < 0 < T+"
            )));
        }
        if !(region.w_minus < 0.0 && region.w_plus > 0.0) {
            return Err(QuadraticError::Problem(format!(
                "need w- < 0 < w+, got w- = {}, w+ = {}",
                region.w_minus, region.w_plus
            )));
        }
        if let Some(v0) = region.v0 {
            if !(v0 > 0.0) || !v0.is_finite() {
                return Err(QuadraticError::Problem(format!("v0 = {v0} must be positive")));
            }
            if let Some(vs) = region.v_star {
                if !(vs > v0) {
                    return Err(QuadraticError::Problem(format!("V* = {vs} must exceed v0 = {v0}")));
                }
            }
        }
        if grids.t_points < 2 || grids.state_samples == 0 {
            return Err(QuadraticError::Problem("grid sizes too small".into()));
        }
        let b_dot = b.diff_t().map_err(merr("dB/dt"))?;
        let c_dot = c.diff_t().map_err(merr("dC/dt"))?;
        Ok(Self {
            n,
            b,
            c,
            a,
            f0,
            b_dot,
            c_dot,
            window,
            region,
            grids,
        })
    }

    /// Parses row-major entry texts in the state scope `t, x1..xn`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_texts(
        n: usize,
        b: &[&str],
        c: &[&str],
        a: &[&str],
        f0: &[&str],
        window: (f64, f64),
        region: Region,
        grids: Grids,
    ) -> Result<Self, QuadraticError> {
        let scope = Scope::state(n);
        let parse = |name: &'static str, cols: usize, e: &[&str], sym: bool| {
            MatrixFunction::parse(n, cols, e, &scope, sym).map_err(merr(name))
        };
        Self::new(
            parse("B", n, b, true)?,
            parse("C", n, c, true)?,
            parse("A", n, a, false)?,
            parse("f0", 1, f0, false)?,
            window,
            region,
            grids,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    pub fn with_window(mut self, window: (f64, f64)) -> Result<Self, QuadraticError> {
        let (lo, hi) = window;
        if !(lo < 0.0 && 0.0 < hi) {
            return Err(QuadraticError::Problem(format!(
                "window [{lo}, {hi}] must satisfy T- < 0 < T+"
            )));
        }
        self.window = window;
        Ok(self)
    }

    pub fn a_function(&self) -> &MatrixFunction {
        &self.a
    }

    pub fn c_function(&self) -> &MatrixFunction {
        &self.c
    }

    /// Uniform grid over the window with `t = 0` inserted.
    pub fn t_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.window;
        let m = self.grids.t_points;
        let mut g: Vec<f64> = (0..m)
            .map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64)
            .collect();
        g[m - 1] = hi;
        if !g.iter().any(|&t| t == 0.0) {
            let pos = g.partition_point(|&t| t < 0.0);
            g.insert(pos, 0.0);
        }
        g
    }

    /// `v₀`, which must have been resolved.
    pub fn v0(&self) -> Result<f64, QuadraticError> {
        self.region
            .v0
            .ok_or_else(|| QuadraticError::Problem("v0 is 'auto' and not yet resolved".into()))
    }

    pub fn b_at(&self, t: f64) -> Result<Matrix, QuadraticError> {
        self.b.eval(t, &[]).map_err(merr("B"))
    }

    pub fn c_at(&self, t: f64) -> Result<Matrix, QuadraticError> {
        self.c.eval(t, &[]).map_err(merr("C"))
    }

    pub fn b_dot_at(&self, t: f64) -> Result<Matrix, QuadraticError> {
        self.b_dot.eval(t, &[]).map_err(merr("dB/dt"))
    }

    pub fn c_dot_at(&self, t: f64) -> Result<Matrix, QuadraticError> {
        self.c_dot.eval(t, &[]).map_err(merr("dC/dt"))
    }

    pub fn a_at(&self, t: f64, x: &[f64]) -> Result<Matrix, QuadraticError> {
        self.a.eval(t, x).map_err(merr("A"))
    }

    pub fn f0_at(&self, t: f64) -> Result<Vector, QuadraticError> {
        Ok(self.f0.eval(t, &[]).map_err(merr("f0"))?.column(0).into_owned())
    }

    /// `f(t,x) = A(t,x)x + f₀(t)`.
    pub fn field(&self, t: f64, x: &[f64]) -> Result<Vector, QuadraticError> {
        let xv = Vector::from_column_slice(x);
        Ok(self.a_at(t, x)? * xv + self.f0_at(t)?)
    }

    pub fn v(&self, t: f64, x: &[f64]) -> Result<f64, QuadraticError> {
        Ok(quad_form(&self.b_at(t)?, x))
    }

    pub fn w(&self, t: f64, x: &[f64]) -> Result<f64, QuadraticError> {
        Ok(quad_form(&self.c_at(t)?, x))
    }

    /// `V̇ = ⟨Ḃx,x⟩ + 2⟨Bx, f(t,x)⟩`.
    pub fn v_dot(&self, t: f64, x: &[f64]) -> Result<f64, QuadraticError> {
        let xv = Vector::from_column_slice(x);
        let f = self.field(t, x)?;
        Ok(quad_form(&self.b_dot_at(t)?, x) + 2.0 * (self.b_at(t)? * &xv).dot(&f))
    }

    /// `Ẇ = ⟨Ċx,x⟩ + 2⟨Cx, f(t,x)⟩`.
    pub fn w_dot(&self, t: f64, x: &[f64]) -> Result<f64, QuadraticError> {
        let xv = Vector::from_column_slice(x);
        let f = self.field(t, x)?;
        Ok(quad_form(&self.c_dot_at(t)?, x) + 2.0 * (self.c_at(t)? * &xv).dot(&f))
    }
}

pub fn quad_form(m: &Matrix, x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += m[(i, j)] * x[i] * x[j];
        }
    }
    s
}

/// `φ(t) = √⟨B f₀, f₀⟩`.
pub fn phi(qp: &QuadraticProblem, t: f64) -> Result<f64, QuadraticError> {
    let f0 = qp.f0_at(t)?;
    Ok(quad_form(&qp.b_at(t)?, f0.as_slice()).max(0.0).sqrt())
}

/// `ψ(t) = √⟨B⁻¹ C f₀, C f₀⟩`, through a solve against `B`.
pub fn psi(qp: &QuadraticProblem, t: f64) -> Result<f64, QuadraticError> {
    let cf = qp.c_at(t)? * qp.f0_at(t)?;
    let s = spd_solve(&qp.b_at(t)?, &cf).map_err(perr(t))?;
    Ok(s.dot(&cf).max(0.0).sqrt())
}

fn sym(m: Matrix) -> Matrix {
    (&m + m.transpose()) * 0.5
}

/// `Λ_V`: characteristic value of largest modulus of
/// `BA + AᵀB + Ḃ − λB`, sign preserved.
pub fn lambda_v(qp: &QuadraticProblem, t: f64, x: &[f64]) -> Result<f64, QuadraticError> {
    let b = qp.b_at(t)?;
    let a = qp.a_at(t, x)?;
    lambda_v_from(&b, &a, &qp.b_dot_at(t)?, t)
}

fn lambda_v_from(b: &Matrix, a: &Matrix, b_dot: &Matrix, t: f64) -> Result<f64, QuadraticError> {
    let m = sym(b * a + a.transpose() * b + b_dot);
    let p = SymmetricPencil::new(m, b.clone()).map_err(perr(t))?;
    Ok(solve_pencil(&p).map_err(perr(t))?.max_abs())
}

/// `λ_W`: minimal characteristic value of `CA + AᵀC + Ċ − λB`.
pub fn lambda_w(qp: &QuadraticProblem, t: f64, x: &[f64]) -> Result<f64, QuadraticError> {
    let a = qp.a_at(t, x)?;
    lambda_w_from(&qp.b_at(t)?, &qp.c_at(t)?, &a, &qp.c_dot_at(t)?, t)
}

fn lambda_w_from(
    b: &Matrix,
    c: &Matrix,
    a: &Matrix,
    c_dot: &Matrix,
    t: f64,
) -> Result<f64, QuadraticError> {
    let m = sym(c * a + a.transpose() * c + c_dot);
    let p = SymmetricPencil::new(m, b.clone()).map_err(perr(t))?;
    Ok(solve_pencil(&p).map_err(perr(t))?.min())
}

/// Per-time data shared by every state sample at that time.
struct Slice {
    t: f64,
    b: Matrix,
    c: Matrix,
    b_dot: Matrix,
    c_dot: Matrix,
    chol: Matrix,
    phi: f64,
    psi: f64,
}

impl Slice {
    fn new(qp: &QuadraticProblem, t: f64) -> Result<Self, QuadraticError> {
        let b = qp.b_at(t)?;
        let chol = cholesky(&b).map_err(perr(t))?;
        Ok(Self {
            t,
            c: qp.c_at(t)?,
            b_dot: qp.b_dot_at(t)?,
            c_dot: qp.c_dot_at(t)?,
            chol,
            b,
            phi: phi(qp, t)?,
            psi: psi(qp, t)?,
        })
    }
}

/// A region sample with everything the fits and checks need.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: f64,
    pub w: f64,
    pub lambda_v: f64,
    pub lambda_w: f64,
    pub phi: f64,
    pub psi: f64,
}

/// Seeded samples of `V⁻¹([v₀, v_upper]) ∩ W⁻¹([w₋, w⁺])` at every grid time.
///
/// A quarter of the samples lie on the shell `V = v₀`; the rest have `V`
/// uniform in `[v₀, v_upper]`. Each time index owns an independent stream of
/// the generator, so the result does not depend on thread scheduling.
pub fn sample_region(
    qp: &QuadraticProblem,
    seed: u64,
    v_upper: f64,
) -> Result<Vec<SampleEval>, QuadraticError> {
    let v0 = qp.v0()?;
    if !v_upper.is_finite() {
        return Err(QuadraticError::Domain(format!("sampling ceiling {v_upper} is not finite")));
    }
    let grid = qp.t_grid();
    let per_t: Vec<Result<Vec<SampleEval>, QuadraticError>> = grid
        .par_iter()
        .enumerate()
        .map(|(idx, &t)| sample_slice(qp, seed, idx, t, v0, v_upper))
        .collect();
    let mut out = Vec::new();
    for r in per_t {
        out.extend(r?);
    }
    Ok(out)
}

fn sample_slice(
    qp: &QuadraticProblem,
    seed: u64,
    idx: usize,
    t: f64,
    v0: f64,
    v_upper: f64,
) -> Result<Vec<SampleEval>, QuadraticError> {
    let slice = Slice::new(qp, t)?;
    let n = qp.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx as u64);
    let m = qp.grids.state_samples;
    let shell = m.div_ceil(SHELL_FRACTION);
    let (wl, wu) = (qp.region.w_minus, qp.region.w_plus);
    let a_const = if qp.a.depends_on_state() {
        None
    } else {
        Some(qp.a_at(t, &vec![0.0; n])?)
    };
    let mut out = Vec::with_capacity(m);
    let mut attempts = 0;
    while out.len() < m && attempts < m * ATTEMPTS_PER_SAMPLE {
        attempts += 1;
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let target_v = if out.len() < shell || v_upper <= v0 {
            v0
        } else {
            rng.random_range(v0..=v_upper)
        };
        let r = target_v.sqrt() / norm;
        let x = solve_upper_transposed(&slice.chol, &y.iter().map(|v| v * r).collect::<Vec<_>>());
        let w = quad_form(&slice.c, &x);
        if w < wl || w > wu {
            continue;
        }
        let a = match &a_const {
            Some(a) => a.clone(),
            None => qp.a_at(t, &x)?,
        };
        let lv = lambda_v_from(&slice.b, &a, &slice.b_dot, t)?;
        let lw = lambda_w_from(&slice.b, &slice.c, &a, &slice.c_dot, t)?;
        out.push(SampleEval {
            t: slice.t,
            v: if out.len() < shell { v0 } else { quad_form(&slice.b, &x) },
            x,
            w,
            lambda_v: lv,
            lambda_w: lw,
            phi: slice.phi,
            psi: slice.psi,
        });
    }
    Ok(out)
}

/// Solves `Lᵀx = y` for lower-triangular `L`.
fn solve_upper_transposed(l: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Worst margins of the two derivative inequalities over the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub samples: usize,
    /// `min |Λ_V|V + 2φ√V − |V̇|`.
    pub v_margin: f64,
    /// `min Ẇ − (λ_W V − 2ψ√V)`.
    pub w_margin: f64,
    pub v_witness: Option<(f64, Vec<f64>)>,
    pub w_witness: Option<(f64, Vec<f64>)>,
}

pub fn derivative_inequalities_check(
    qp: &QuadraticProblem,
    samples: &[SampleEval],
) -> Result<DerivativeReport, QuadraticError> {
    let margins: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let vd = qp.v_dot(s.t, &s.x)?;
            let wd = qp.w_dot(s.t, &s.x)?;
            let v = quad_form(&qp.b_at(s.t)?, &s.x);
            let mv = s.lambda_v.abs() * v + 2.0 * s.phi * v.sqrt() - vd.abs();
            let mw = wd - (s.lambda_w * v - 2.0 * s.psi * v.sqrt());
            Ok((mv, mw))
        })
        .collect::<Result<_, QuadraticError>>()?;
    let mut rep = DerivativeReport {
        samples: samples.len(),
        v_margin: f64::INFINITY,
        w_margin: f64::INFINITY,
        v_witness: None,
        w_witness: None,
    };
    for (s, &(mv, mw)) in samples.iter().zip(&margins) {
        if mv < rep.v_margin {
            rep.v_margin = mv;
            rep.v_witness = Some((s.t, s.x.clone()));
        }
        if mw < rep.w_margin {
            rep.w_margin = mw;
            rep.w_witness = Some((s.t, s.x.clone()));
        }
    }
    Ok(rep)
}

/// The constants of condition (e) together with `v₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticConstants {
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub v0: f64,
}

impl QuadraticConstants {
    pub fn new(sigma: f64, c1: f64, c2: f64, c3: f64, v0: f64) -> Result<Self, QuadraticError> {
        if !(sigma > 0.0 && sigma <= 1.0) {
            return Err(QuadraticError::Domain(format!("σ = {sigma} outside (0, 1]")));
        }
        if !(c1 >= 0.0 && c2 >= 0.0 && c3 > 0.0) {
            return Err(QuadraticError::Domain(format!(
                "constants must satisfy c1, c2 ≥ 0 < c3 (got {c1}, {c2}, {c3})"
            )));
        }
        if !(c2 * c2 < v0) {
            return Err(QuadraticError::Domain(format!("c2² = {} ≥ v0 = {v0}", c2 * c2)));
        }
        Ok(Self {
            sigma,
            c1,
            c2,
            c3,
            v0,
        })
    }

    /// `G(v) = c₃v^σ(v + c₁√v)`, `g(v) = v − c₂√v`.
    pub fn growth_pair(&self) -> Result<GrowthPair, QuadraticError> {
        let Self { sigma, c1, c2, c3, v0 } = *self;
        Ok(GrowthPair::new(
            v0,
            Arc::new(move |u: f64| c3 * u.powf(sigma) * (u + c1 * u.sqrt())),
            Arc::new(move |u: f64| u - c2 * u.sqrt()),
        )?)
    }

    fn f1_check(&self, v: f64) -> Result<(), QuadraticError> {
        if !(v >= self.v0) {
            return Err(QuadraticError::Domain(format!("v = {v} < v0 = {}", self.v0)));
        }
        Ok(())
    }

    /// Closed-form lower bound `F₁ ≤ F`.
    pub fn f1(&self, v: f64) -> Result<f64, QuadraticError> {
        self.f1_check(v)?;
        let Self { sigma, c1, c2, c3, v0 } = *self;
        let s0 = v0.sqrt();
        if sigma < 1.0 {
            let p = 1.0 - sigma;
            let k = s0 / (p * (s0 + c1) * c3);
            let c2p = c2.powf(p);
            Ok(k * (v.powf(p) - 2.0 * c2p * v.powf(p / 2.0) - v0.powf(p)
                + 2.0 * c2p * v0.powf(p / 2.0)))
        } else {
            let k = s0 / ((s0 + c1) * c3);
            Ok(k * (v.ln() - v0.ln() - 2.0 * c2 / s0))
        }
    }

    /// Inverse of [`f1`](Self::f1). For `σ = 1` the `c₃` factor is kept, as
    /// algebraic inversion of `F₁` requires.
    pub fn f1_inv(&self, z: f64) -> Result<f64, QuadraticError> {
        if !(z >= 0.0) {
            return Err(QuadraticError::Domain(format!("F1⁻¹({z}) needs z ≥ 0")));
        }
        let Self { sigma, c1, c2, c3, v0 } = *self;
        let s0 = v0.sqrt();
        if sigma < 1.0 {
            if z == 0.0 {
                // F₁(v₀) = 0 in this branch.
                return Ok(v0);
            }
            let p = 1.0 - sigma;
            let c2p = c2.powf(p);
            let k = p * (s0 + c1) * c3 / s0;
            let d = v0.powf(p / 2.0) - c2p;
            Ok(((k * z + d * d).sqrt() + c2p).powf(2.0 / p))
        } else {
            Ok(v0 * ((s0 + c1) * c3 / s0 * z + 2.0 * c2 / s0).exp())
        }
    }
}

/// `F(v) = (1/c₃)∫_{v₀}^{v} (u − c₂√u)/(u^σ(u + c₁√u)) du`.
pub fn f_quadratic(consts: &QuadraticConstants, v: f64) -> Result<f64, QuadraticError> {
    Ok(consts.growth_pair()?.f(v)?)
}

/// Minimal constants over the samples for a fixed `σ`, inflated by `safety`.
pub fn fit_constants(
    sigma: f64,
    v0: f64,
    samples: &[SampleEval],
    safety: f64,
) -> Result<QuadraticConstants, QuadraticError> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(QuadraticError::Domain(format!("σ = {sigma} outside (0, 1]")));
    }
    let (mut c1, mut c2, mut c3) = (0.0f64, 0.0f64, 0.0f64);
    for s in samples {
        let infeasible = |what: &str| QuadraticError::InfeasibleConditionE {
            inequality: what.to_string(),
            t: s.t,
            x: s.x.clone(),
        };
        if !(s.lambda_w > 0.0) {
            return Err(infeasible("λ_W > 0"));
        }
        let lv = s.lambda_v.abs();
        if 2.0 * s.phi > 0.0 {
            if lv == 0.0 {
                return Err(infeasible("2φ ≤ c1|Λ_V|"));
            }
            c1 = c1.max(2.0 * s.phi / lv);
        }
        c2 = c2.max(2.0 * s.psi / s.lambda_w);
        c3 = c3.max(lv / (s.v.powf(sigma) * s.lambda_w));
    }
    let (c1, c2, c3) = (safety * c1, safety * c2, (safety * c3).max(C3_FLOOR));
    if !(c2 * c2 < v0) {
        let (t, x) = samples
            .iter()
            .max_by(|a, b| (a.psi / a.lambda_w).total_cmp(&(b.psi / b.lambda_w)))
            .map(|s| (s.t, s.x.clone()))
            .unwrap_or((f64::NAN, Vec::new()));
        return Err(QuadraticError::InfeasibleConditionE {
            inequality: format!("c2² < v0 (c2² = {:.6e}, v0 = {v0:.6e})", c2 * c2),
            t,
            x,
        });
    }
    QuadraticConstants::new(sigma, c1, c2, c3, v0)
}

/// `λ⁺`, `λ₋`, `λ₋⁺` on the time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaCurves {
    pub t: Vec<f64>,
    pub lambda_plus: Vec<f64>,
    pub lambda_minus: Vec<f64>,
    pub lambda_minus_plus: Vec<f64>,
    pub n_plus: Vec<usize>,
    /// Smallest eigenvalue of `B(t)` (condition (a) evidence).
    pub b_min_eig: Vec<f64>,
    /// Smallest `|eig C(t)| / ‖C(t)‖₂` (condition (b) evidence).
    pub c_gap: Vec<f64>,
}

impl LambdaCurves {
    pub fn compute(qp: &QuadraticProblem, tol: &PencilTolerances) -> Result<Self, QuadraticError> {
        Self::on_grid(qp, &qp.t_grid(), tol)
    }

    pub fn on_grid(
        qp: &QuadraticProblem,
        grid: &[f64],
        tol: &PencilTolerances,
    ) -> Result<Self, QuadraticError> {
        let rows: Vec<(f64, f64, f64, usize, f64, f64)> = grid
            .par_iter()
            .map(|&t| {
                let b = qp.b_at(t)?;
                let c = qp.c_at(t)?;
                let (b_eigs, _) = symmetric_eigen(&b).map_err(perr(t))?;
                let p = SymmetricPencil::with_tolerances(c.clone(), b, tol).map_err(perr(t))?;
                let spec = solve_pencil(&p).map_err(perr(t))?;
                let proj = spectral_projectors_with(&c, tol).map_err(perr(t))?;
                let lmp = lambda_minus_plus(&p, &proj).map_err(perr(t))?;
                let cn = proj
                    .plus_eigenvalues
                    .iter()
                    .chain(&proj.minus_eigenvalues)
                    .map(|v| v.abs())
                    .fold(0.0, f64::max);
                let gap = proj
                    .plus_eigenvalues
                    .iter()
                    .chain(&proj.minus_eigenvalues)
                    .map(|v| v.abs())
                    .fold(f64::INFINITY, f64::min)
                    / cn;
                Ok((spec.max(), spec.min(), lmp, proj.n_plus, b_eigs[0], gap))
            })
            .collect::<Result<_, QuadraticError>>()?;
        Ok(Self {
            t: grid.to_vec(),
            lambda_plus: rows.iter().map(|r| r.0).collect(),
            lambda_minus: rows.iter().map(|r| r.1).collect(),
            lambda_minus_plus: rows.iter().map(|r| r.2).collect(),
            n_plus: rows.iter().map(|r| r.3).collect(),
            b_min_eig: rows.iter().map(|r| r.4).collect(),
            c_gap: rows.iter().map(|r| r.5).collect(),
        })
    }

    /// Indices of the trailing quarter `[T₋, T₋ + |T₋|/4]`.
    pub fn trailing_quarter(&self) -> Vec<usize> {
        let lo = self.t[0];
        let cut = lo + (0.0 - lo) / 4.0;
        (0..self.t.len()).filter(|&i| self.t[i] <= cut).collect()
    }

    /// `sup_{s≥t} λ⁺(s) − inf_{s≤t} λ₋(s)` on the sampled window; the grid
    /// cell containing `t` is included on both sides.
    pub fn delta_at(&self, t: f64) -> Result<f64, QuadraticError> {
        let n = self.t.len();
        if t < self.t[0] || t > self.t[n - 1] {
            return Err(QuadraticError::Domain(format!(
                "t = {t} outside the sampled window [{}, {}]",
                self.t[0],
                self.t[n - 1]
            )));
        }
        let hi = self.t.partition_point(|&s| s <= t).min(n); // first index with s > t
        let from = hi.saturating_sub(1);
        let to = if hi < n && self.t[hi - 1] != t { hi } else { hi - 1 };
        let sup = self.lambda_plus[from..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let inf = self.lambda_minus[..=to].iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(sup - inf)
    }
}

/// Condition status in a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    WindowCertified,
    Fail,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::WindowCertified => "window-certified",
            Status::Fail => "fail",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pass" => Some(Status::Pass),
            "window-certified" => Some(Status::WindowCertified),
            "fail" => Some(Status::Fail),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    /// Label such as `a`, `e`, `A`, `Vstar`.
    pub id: String,
    pub status: Status,
    pub margin: f64,
    pub note: String,
}

impl ConditionResult {
    fn new(id: &str, status: Status, margin: f64, note: impl Into<String>) -> Self {
        Self {
            id: id.to_string(),
            status,
            margin,
            note: note.into(),
        }
    }
}

/// Worst margins of condition (d) and the curves `w⁰ = λ⁺v₀`, `w₀ = λ₋v₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionDReport {
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub w_upper0: Vec<f64>,
    pub w_low0: Vec<f64>,
    pub pass: bool,
}

pub fn check_condition_d(curves: &LambdaCurves, v0: f64, region: &Region) -> ConditionDReport {
    let w_upper0: Vec<f64> = curves.lambda_plus.iter().map(|l| l * v0).collect();
    let w_low0: Vec<f64> = curves.lambda_minus.iter().map(|l| l * v0).collect();
    let lower_margin = w_low0
        .iter()
        .map(|w| w - region.w_minus)
        .fold(f64::INFINITY, f64::min);
    let upper_margin = w_upper0
        .iter()
        .map(|w| region.w_plus - w)
        .fold(f64::INFINITY, f64::min);
    let slack = 1e-12 * (region.w_plus.abs() + region.w_minus.abs());
    ConditionDReport {
        lower_margin,
        upper_margin,
        pass: lower_margin >= -slack && upper_margin >= -slack,
        w_upper0,
        w_low0,
    }
}

/// Largest `v₀` satisfying condition (d) on the sampled curves.
pub fn auto_v0(curves: &LambdaCurves, region: &Region) -> Result<f64, QuadraticError> {
    let mut v0 = f64::INFINITY;
    for (lp, lm) in curves.lambda_plus.iter().zip(&curves.lambda_minus) {
        if *lp > 0.0 {
            v0 = v0.min(region.w_plus / lp);
        }
        if *lm < 0.0 {
            v0 = v0.min(region.w_minus / lm);
        }
    }
    if !v0.is_finite() || v0 <= 0.0 {
        return Err(QuadraticError::Domain("cannot choose v0 from the λ curves".into()));
    }
    Ok(v0)
}

/// `α(t)`: minimum of `λ_W` over the samples with `V > v₀` at each grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaReport {
    pub alpha: Vec<f64>,
    pub integral_past: f64,
    pub integral_future: f64,
    pub window_certified: bool,
}

pub fn alpha_and_condition_f(
    curves: &LambdaCurves,
    samples: &[SampleEval],
    v0: f64,
    threshold: f64,
) -> AlphaReport {
    let mut alpha = vec![f64::INFINITY; curves.t.len()];
    for s in samples {
        if s.v > v0 {
            if let Ok(i) = curves.t.binary_search_by(|p| p.total_cmp(&s.t)) {
                alpha[i] = alpha[i].min(s.lambda_w);
            }
        }
    }
    for a in &mut alpha {
        if !a.is_finite() {
            *a = f64::NAN;
        }
    }
    let (past, future) = split_integrals(&curves.t, &alpha);
    let ok = alpha.iter().all(|a| *a > 0.0);
    AlphaReport {
        window_certified: ok && past >= threshold && future >= threshold,
        integral_past: past,
        integral_future: future,
        alpha,
    }
}

/// Trapezoid integrals of a sampled curve over `[T₋, 0]` and `[0, T₊]`.
fn split_integrals(t: &[f64], y: &[f64]) -> (f64, f64) {
    let (mut past, mut future) = (0.0, 0.0);
    for i in 0..t.len() - 1 {
        let piece = 0.5 * (y[i] + y[i + 1]) * (t[i + 1] - t[i]);
        if t[i + 1] <= 0.0 {
            past += piece;
        } else {
            future += piece;
        }
    }
    (past, future)
}

/// Trailing-quarter approximations of `ν`, `ω̃`, `ω₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limits {
    pub nu: f64,
    pub omega_tilde: f64,
    pub omega0: f64,
    pub trailing_max_lambda_minus_plus: f64,
}

pub fn limits_nu_omega(
    curves: &LambdaCurves,
    v0: f64,
    w_plus: f64,
    g_tolerance: f64,
) -> Result<Limits, QuadraticError> {
    let idx = curves.trailing_quarter();
    let tmax = idx
        .iter()
        .map(|&i| curves.lambda_minus_plus[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if !(tmax > g_tolerance) {
        return Err(QuadraticError::ConditionGFailed {
            trailing_max: tmax,
            tolerance: g_tolerance,
        });
    }
    let min_over = |f: &dyn Fn(usize) -> f64| idx.iter().map(|&i| f(i)).fold(f64::INFINITY, f64::min);
    let nu = min_over(&|i| {
        let l = curves.lambda_minus_plus[i];
        if l > 0.0 {
            w_plus / l
        } else {
            f64::INFINITY
        }
    });
    Ok(Limits {
        nu,
        omega_tilde: min_over(&|i| curves.lambda_minus_plus[i] * v0),
        omega0: min_over(&|i| curves.lambda_minus[i] * v0),
        trailing_max_lambda_minus_plus: tmax,
    })
}

/// Both terms of the `V*` requirement and the slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VStarCheck {
    pub first: f64,
    pub second: f64,
    pub slack: f64,
    pub pass: bool,
}

pub fn vstar_terms(
    gp: &GrowthPair,
    limits: &Limits,
    w_plus: f64,
) -> Result<(f64, f64), QuadraticError> {
    let nu = limits.nu.max(gp.v0());
    let first = gp.f_inv((gp.f(nu)? + w_plus - limits.omega_tilde).max(0.0))?;
    let second = gp.f_inv((w_plus - limits.omega0).max(0.0))?;
    Ok((first, second))
}

pub fn check_vstar(
    gp: &GrowthPair,
    limits: &Limits,
    w_plus: f64,
    v_star: f64,
) -> Result<VStarCheck, QuadraticError> {
    let (first, second) = vstar_terms(gp, limits, w_plus)?;
    let slack = v_star - first.max(second);
    Ok(VStarCheck {
        first,
        second,
        slack,
        pass: slack > 0.0,
    })
}

/// `F⁻¹((v₀/2)[sup_{s≥t} λ⁺ − inf_{s≤t} λ₋])` on the sampled curves.
pub fn bound_theorem3(
    curves: &LambdaCurves,
    gp: &GrowthPair,
    t: f64,
) -> Result<f64, QuadraticError> {
    let delta = curves.delta_at(t)?;
    Ok(gp.f_inv(0.5 * gp.v0() * delta.max(0.0))?)
}

/// The closed-form bound obtained in the limit `v₀ → c₂²`.
pub fn bound_theorem4(c1: f64, c2: f64, c3: f64, sigma: f64, delta: f64) -> Result<f64, QuadraticError> {
    if !(delta >= 0.0) {
        return Err(QuadraticError::Domain(format!("Δ = {delta} must be ≥ 0")));
    }
    if !(sigma > 0.0 && sigma <= 1.0) || c1 < 0.0 || c2 < 0.0 || !(c3 > 0.0) {
        return Err(QuadraticError::Domain("inadmissible constants".into()));
    }
    let c2_big = (c1 + c2) * c2 * c3 / 2.0;
    if sigma < 1.0 {
        let c1_big = ((1.0 - sigma) * c2_big).sqrt();
        Ok((c1_big * delta.sqrt() + c2.powf(1.0 - sigma)).powf(2.0 / (1.0 - sigma)))
    } else {
        Ok((std::f64::consts::E * c2).powi(2) * (c2_big * delta).exp())
    }
}

/// `y = θ P₊x` with `θ = √(c/⟨C₊x,x⟩)`, which lies on `⟨Cy,y⟩ = c` in `𝕃₊`.
pub fn retract_exit(
    qp: &QuadraticProblem,
    t: f64,
    x: &[f64],
    c: f64,
) -> Result<Vector, QuadraticError> {
    retract_exit_with(&qp.c_at(t)?, x, c, t)
}

pub fn retract_exit_with(cm: &Matrix, x: &[f64], c: f64, t: f64) -> Result<Vector, QuadraticError> {
    if !(c > 0.0) {
        return Err(QuadraticError::Domain(format!("c = {c} must be positive")));
    }
    let proj = spectral_projectors_with(cm, &PencilTolerances::default()).map_err(perr(t))?;
    let (cp, _) = signed_parts(cm, &proj);
    let q = quad_form(&cp, x);
    if !(q > 1e-12) {
        return Err(QuadraticError::NotRetractable { value: q });
    }
    Ok(&proj.plus * Vector::from_column_slice(x) * (c / q).sqrt())
}

/// Result of the sampled uniqueness check with the quadratic functions.
#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessCheck {
    pub status: CheckStatus,
    pub samples: usize,
    /// Smallest `λ̂` over the pairs; it must be positive.
    pub worst_lambda_hat: f64,
    pub lambda_hat_max: f64,
    pub witness: Option<(f64, Vec<f64>, Vec<f64>)>,
    pub t: Vec<f64>,
    /// `β̂(t)`: per-time minimum of `λ̂`.
    pub beta_hat: Vec<f64>,
    /// `Λ̂(t)`: characteristic value of largest modulus of `Ĉ − λB`.
    pub big_lambda_hat: Vec<f64>,
    pub integral_at_start: f64,
    pub integral_at_end: f64,
    pub divergence_window_certified: bool,
    pub notes: Vec<String>,
}

/// Checks the uniqueness conditions with `U = ⟨Ĉz,z⟩`. `a_hat` is a matrix
/// of `(t, x, y)`; pairs are drawn from `samples` at equal times.
pub fn check_uniqueness_theorem5(
    qp: &QuadraticProblem,
    c_hat: &MatrixFunction,
    a_hat: &MatrixFunction,
    samples: &[SampleEval],
    threshold: f64,
) -> Result<UniquenessCheck, QuadraticError> {
    let n = qp.n;
    if c_hat.rows() != n || c_hat.cols() != n || a_hat.rows() != n || a_hat.cols() != n {
        return Err(QuadraticError::Problem("Ĉ and Â must be n×n".into()));
    }
    c_hat.require_state_independent().map_err(merr("Ĉ"))?;
    let c_hat_dot = c_hat.diff_t().map_err(merr("dĈ/dt"))?;
    let grid = qp.t_grid();
    let mut notes = Vec::new();
    if a_hat.depends_on_state() {
        notes.push("Â depends on the state; the difference identity is assumed, not checked".into());
    }

    // Pairs: consecutive samples at the same time.
    let mut pairs: Vec<(usize, &SampleEval, &SampleEval)> = Vec::new();
    for (i, &t) in grid.iter().enumerate() {
        let at_t: Vec<&SampleEval> = samples.iter().filter(|s| s.t == t).collect();
        for w in at_t.chunks_exact(2) {
            pairs.push((i, w[0], w[1]));
        }
    }
    let per_t: Vec<f64> = grid
        .par_iter()
        .map(|&t| {
            let b = qp.b_at(t)?;
            let ch = c_hat.eval(t, &[]).map_err(merr("Ĉ"))?;
            let p = SymmetricPencil::new(sym(ch), b).map_err(perr(t))?;
            Ok(solve_pencil(&p).map_err(perr(t))?.max_abs())
        })
        .collect::<Result<_, QuadraticError>>()?;
    let lambdas: Vec<f64> = pairs
        .par_iter()
        .map(|&(_, x, y)| {
            let t = x.t;
            let b = qp.b_at(t)?;
            let ch = c_hat.eval(t, &[]).map_err(merr("Ĉ"))?;
            let chd = c_hat_dot.eval(t, &[]).map_err(merr("dĈ/dt"))?;
            let ah = a_hat.eval_pair(t, &x.x, &y.x).map_err(merr("Â"))?;
            let m = sym(&ch * &ah + ah.transpose() * &ch + chd);
            let p = SymmetricPencil::new(m, b).map_err(perr(t))?;
            Ok(solve_pencil(&p).map_err(perr(t))?.min())
        })
        .collect::<Result<_, QuadraticError>>()?;

    let mut beta_hat = vec![f64::INFINITY; grid.len()];
    let mut worst = f64::INFINITY;
    let mut best = f64::NEG_INFINITY;
    let mut witness = None;
    for (&(i, x, y), &l) in pairs.iter().zip(&lambdas) {
        beta_hat[i] = beta_hat[i].min(l);
        best = best.max(l);
        if l < worst {
            worst = l;
            witness = Some((x.t, x.x.clone(), y.x.clone()));
        }
    }
    for b in &mut beta_hat {
        if !b.is_finite() {
            *b = f64::NAN;
        }
    }
    // (1/|Λ̂(t)|)|∫₀ᵗ β̂/|Λ̂| ds| at both ends of the window.
    let ratio: Vec<f64> = beta_hat
        .iter()
        .zip(&per_t)
        .map(|(b, l)| b / l.abs())
        .collect();
    let (past, future) = split_integrals(&grid, &ratio);
    let integral_at_start = past.abs() / per_t[0].abs();
    let integral_at_end = future.abs() / per_t[per_t.len() - 1].abs();
    let divergence_window_certified = integral_at_start >= threshold && integral_at_end >= threshold;
    if !divergence_window_certified {
        notes.push("divergence threshold not reached on the window".into());
    }
    let status = if pairs.is_empty() {
        notes.push("no sample pairs: check is vacuous".into());
        CheckStatus::Vacuous
    } else if worst > 0.0 && divergence_window_certified {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(UniquenessCheck {
        status,
        samples: pairs.len(),
        worst_lambda_hat: worst,
        lambda_hat_max: best,
        witness,
        t: grid,
        beta_hat,
        big_lambda_hat: per_t,
        integral_at_start,
        integral_at_end,
        divergence_window_certified,
        notes,
    })
}

/// Everything `certify` establishes about a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub seed: u64,
    pub window: (f64, f64),
    pub v0: f64,
    pub v_star: f64,
    pub v_star_auto: bool,
    pub w_minus: f64,
    pub w_plus: f64,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub nu: f64,
    pub omega_tilde: f64,
    pub omega0: f64,
    /// `v_* = F⁻¹((w⁺ − w₋)/2)`.
    pub v_star_bound: f64,
    pub curve_at_zero: f64,
    pub closed_form_at_zero: f64,
    pub vstar_first: f64,
    pub vstar_second: f64,
    pub vstar_slack: f64,
    pub samples: usize,
    pub curves: LambdaCurves,
    pub alpha: Vec<f64>,
    pub conditions: Vec<ConditionResult>,
    pub notes: Vec<String>,
}

impl Certificate {
    /// 3 on any failure, else 2 if anything is only window-certified, else 0.
    pub fn exit_code(&self) -> i32 {
        if self.conditions.iter().any(|c| c.status == Status::Fail) {
            3
        } else if self
            .conditions
            .iter()
            .any(|c| c.status == Status::WindowCertified)
        {
            2
        } else {
            0
        }
    }

    pub fn condition(&self, id: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.id == id)
    }

    pub fn constants(&self) -> Result<QuadraticConstants, QuadraticError> {
        QuadraticConstants::new(self.sigma, self.c1, self.c2, self.c3, self.v0)
    }

    /// Violated certificate invariants; empty when all hold.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.c2 * self.c2 < self.v0) {
            out.push(format!("c2² = {} ≥ v0 = {}", self.c2 * self.c2, self.v0));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            out.push(format!("σ = {} outside (0, 1]", self.sigma));
        }
        if !(self.nu >= self.v0 * (1.0 - 1e-12)) {
            out.push(format!("ν = {} < v0 = {}", self.nu, self.v0));
        }
        let inside = |w: f64| w >= self.w_minus - 1e-12 && w <= self.w_plus + 1e-12;
        if !inside(self.omega0) {
            out.push(format!("ω0 = {} outside [w-, w+]", self.omega0));
        }
        if !inside(self.omega_tilde) {
            out.push(format!("ω̃ = {} outside [w-, w+]", self.omega_tilde));
        }
        out
    }

    /// Time-dependent bound on the certificate's curves.
    pub fn curve_bound(&self, t: f64) -> Result<f64, QuadraticError> {
        bound_theorem3(&self.curves, &self.constants()?.growth_pair()?, t)
    }

    pub fn closed_form_bound(&self, t: f64) -> Result<f64, QuadraticError> {
        bound_theorem4(self.c1, self.c2, self.c3, self.sigma, self.curves.delta_at(t)?)
    }
}

struct Fitted {
    consts: QuadraticConstants,
    gp: GrowthPair,
    bound0: f64,
}

fn fit_best(
    sigmas: &[f64],
    v0: f64,
    samples: &[SampleEval],
    safety: f64,
    curves: &LambdaCurves,
) -> Result<Fitted, QuadraticError> {
    let mut best: Option<Fitted> = None;
    let mut first_err = None;
    for &sigma in sigmas {
        let attempt = fit_constants(sigma, v0, samples, safety).and_then(|consts| {
            let gp = consts.growth_pair()?;
            let bound0 = bound_theorem3(curves, &gp, 0.0)?;
            Ok(Fitted { consts, gp, bound0 })
        });
        match attempt {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.bound0 < b.bound0) {
                    best = Some(f);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one σ"))
}

/// Runs every check on `qp` and assembles the certificate.
///
/// Hard evaluation errors are returned; failed conditions are recorded in the
/// certificate instead.
pub fn certify(qp: &QuadraticProblem, settings: &Settings) -> Result<Certificate, QuadraticError> {
    let mut conditions = Vec::new();
    let mut notes = Vec::new();
    let region = qp.region;
    let nan = f64::NAN;
    let mut cert = Certificate {
        seed: settings.seed,
        window: qp.window,
        v0: region.v0.unwrap_or(nan),
        v_star: region.v_star.unwrap_or(nan),
        v_star_auto: region.v_star.is_none(),
        w_minus: region.w_minus,
        w_plus: region.w_plus,
        sigma: nan,
        c1: nan,
        c2: nan,
        c3: nan,
        nu: nan,
        omega_tilde: nan,
        omega0: nan,
        v_star_bound: nan,
        curve_at_zero: nan,
        closed_form_at_zero: nan,
        vstar_first: nan,
        vstar_second: nan,
        vstar_slack: nan,
        samples: 0,
        curves: LambdaCurves {
            t: Vec::new(),
            lambda_plus: Vec::new(),
            lambda_minus: Vec::new(),
            lambda_minus_plus: Vec::new(),
            n_plus: Vec::new(),
            b_min_eig: Vec::new(),
            c_gap: Vec::new(),
        },
        alpha: Vec::new(),
        conditions: Vec::new(),
        notes: Vec::new(),
    };
    let skipped = |ids: &[&str], why: &str, conditions: &mut Vec<ConditionResult>| {
        for id in ids {
            conditions.push(ConditionResult::new(id, Status::Fail, nan, format!("not evaluated: {why}")));
        }
    };
    const ALL_AFTER_B: [&str; 10] = ["c", "d", "e", "f", "g", "A", "B", "C", "D", "Vstar"];

    // (a), (b): pencil curves on the grid.
    let curves = match LambdaCurves::compute(qp, &settings.pencil) {
        Ok(c) => c,
        Err(QuadraticError::Pencil { t, source }) => {
            let (a, b) = match &source {
                PencilError::NotPositiveDefinite { .. } => (Status::Fail, Status::Fail),
                _ => (Status::Pass, Status::Fail),
            };
            let msg = format!("at t = {t}: {source}");
            conditions.push(ConditionResult::new("a", a, nan, if a == Status::Fail { msg.clone() } else { String::new() }));
            conditions.push(ConditionResult::new("b", b, nan, msg));
            skipped(&ALL_AFTER_B, "pencil sampling failed", &mut conditions);
            cert.conditions = conditions;
            return Ok(cert);
        }
        Err(e) => return Err(e),
    };
    let b_margin = curves.b_min_eig.iter().cloned().fold(f64::INFINITY, f64::min);
    conditions.push(ConditionResult::new("a", Status::Pass, b_margin, "min eigenvalue of B on the grid"));
    let c_margin = curves.c_gap.iter().cloned().fold(f64::INFINITY, f64::min);
    let n_plus_const = curves.n_plus.windows(2).all(|w| w[0] == w[1]);
    conditions.push(ConditionResult::new(
        "b",
        if n_plus_const { Status::Pass } else { Status::Fail },
        c_margin,
        if n_plus_const {
            format!("relative spectral gap of C; n+ = {}", curves.n_plus[0])
        } else {
            "dimension of the positive subspace changes on the window".to_string()
        },
    ));

    let v0 = match region.v0 {
        Some(v) => v,
        None => {
            let v = auto_v0(&curves, &region)?;
            notes.push(format!("v0 chosen automatically as the largest value satisfying (d): {v:.6e}"));
            v
        }
    };
    cert.v0 = v0;
    let mut qp_resolved = qp.clone();
    qp_resolved.region.v0 = Some(v0);
    let qp = &qp_resolved;
    conditions.push(ConditionResult::new(
        "c",
        Status::Pass,
        region.w_plus.min(-region.w_minus),
        "w- < 0 < w+; the state domain is unrestricted",
    ));
    let d = check_condition_d(&curves, v0, &region);
    conditions.push(ConditionResult::new(
        "d",
        if d.pass { Status::Pass } else { Status::Fail },
        d.lower_margin.min(d.upper_margin),
        format!("λ₋v0 − w- ≥ {:.6e}, w+ − λ⁺v0 ≥ {:.6e}", d.lower_margin, d.upper_margin),
    ));

    let limits = limits_nu_omega(&curves, v0, region.w_plus, settings.g_tolerance);
    match &limits {
        Ok(l) => conditions.push(ConditionResult::new(
            "g",
            Status::Pass,
            l.trailing_max_lambda_minus_plus,
            "max of λ₋⁺ over the trailing window quarter",
        )),
        Err(e) => conditions.push(ConditionResult::new("g", Status::Fail, nan, e.to_string())),
    }

    // (e) with σ search and, for automatic V*, growth of the sampled region.
    let sigmas: Vec<f64> = match settings.sigma {
        Some(s) => vec![s],
        None => SIGMA_GRID.to_vec(),
    };
    let mut v_upper = region.v_star.unwrap_or(10.0 * v0);
    let mut fitted = None;
    let mut samples = Vec::new();
    let mut e_error = None;
    let mut v_star = region.v_star.unwrap_or(nan);
    let mut vstar_terms_found = None;
    for iter in 0..VSTAR_AUTO_ITERATIONS {
        samples = sample_region(qp, settings.seed, v_upper)?;
        match fit_best(&sigmas, v0, &samples, settings.safety, &curves) {
            Ok(f) => {
                let terms = match &limits {
                    Ok(l) => Some(vstar_terms(&f.gp, l, region.w_plus)),
                    Err(_) => None,
                };
                fitted = Some(f);
                e_error = None;
                if let Some(Ok((a, b))) = &terms {
                    vstar_terms_found = Some((*a, *b));
                    if region.v_star.is_none() {
                        v_star = VSTAR_AUTO_FACTOR * a.max(*b);
                        if !v_star.is_finite() {
                            notes.push(format!("V* terms {a:.6e}, {b:.6e} give no finite V*"));
                            break;
                        }
                        if v_star > v_upper * (1.0 + 1e-9) && iter + 1 < VSTAR_AUTO_ITERATIONS {
                            v_upper = v_star;
                            continue;
                        }
                    }
                } else if let Some(Err(e)) = terms {
                    notes.push(format!("V* terms: {e}"));
                }
                break;
            }
            Err(e) => {
                e_error = Some(e);
                break;
            }
        }
    }
    cert.samples = samples.len();
    cert.v_star = v_star;
    if samples.len() < curves.t.len() * qp.grids.state_samples {
        notes.push(format!(
            "region sampling accepted {} of {} requested states",
            samples.len(),
            curves.t.len() * qp.grids.state_samples
        ));
    }

    let alpha = alpha_and_condition_f(&curves, &samples, v0, settings.divergence_threshold);
    cert.alpha = alpha.alpha.clone();
    let f_status = if alpha.window_certified { Status::WindowCertified } else { Status::Fail };
    let f_note = format!(
        "∫α over [T-,0] = {:.6e}, over [0,T+] = {:.6e}, threshold {:.3e}",
        alpha.integral_past, alpha.integral_future, settings.divergence_threshold
    );

    match (&fitted, e_error) {
        (Some(f), _) => {
            let c = f.consts;
            cert.sigma = c.sigma;
            cert.c1 = c.c1;
            cert.c2 = c.c2;
            cert.c3 = c.c3;
            let mut note = format!("σ = {}, c1 = {:.6e}, c2 = {:.6e}, c3 = {:.6e}", c.sigma, c.c1, c.c2, c.c3);
            let covered = !(v_star > v_upper * (1.0 + 1e-9));
            if !covered {
                note.push_str("; samples do not reach V*");
            }
            conditions.push(ConditionResult::new(
                "e",
                if covered { Status::Pass } else { Status::Fail },
                v0 - c.c2 * c.c2,
                note,
            ));
        }
        (None, Some(e)) => {
            conditions.push(ConditionResult::new("e", Status::Fail, nan, e.to_string()));
        }
        (None, None) => {
            conditions.push(ConditionResult::new("e", Status::Fail, nan, "no samples"));
        }
    }
    conditions.push(ConditionResult::new("f", f_status, alpha.integral_past.min(alpha.integral_future), f_note.clone()));

    // Abstract conditions in the quadratic case.
    let mut a_status = Status::Fail;
    let mut a_margin = nan;
    let mut a_note = "constants not available".to_string();
    if let Some(f) = &fitted {
        cert.curve_at_zero = f.bound0;
        match f.gp.f(f.gp.v_max()) {
            Ok(fmax) => {
                let needed = [
                    0.5 * (region.w_plus - region.w_minus),
                    0.5 * v0 * curves.delta_at(0.0).unwrap_or(nan),
                ];
                let need = needed.iter().cloned().fold(0.0, f64::max);
                a_margin = fmax - need;
                a_status = if a_margin >= 0.0 { Status::WindowCertified } else { Status::Fail };
                a_note = format!("F(Vmax) = {fmax:.6e} at Vmax = {:.3e}", f.gp.v_max());
            }
            Err(e) => a_note = e.to_string(),
        }
        match f.gp.f_inv(0.5 * (region.w_plus - region.w_minus)) {
            Ok(v) => cert.v_star_bound = v,
            Err(e) => {
                a_status = Status::Fail;
                a_note = e.to_string();
            }
        }
        cert.closed_form_at_zero = curves
            .delta_at(0.0)
            .and_then(|d| bound_theorem4(f.consts.c1, f.consts.c2, f.consts.c3, f.consts.sigma, d))
            .unwrap_or(nan);
    }
    conditions.push(ConditionResult::new("A", a_status, a_margin, a_note));
    conditions.push(ConditionResult::new(
        "B",
        if alpha.window_certified { Status::WindowCertified } else { Status::Fail },
        alpha.integral_past.min(alpha.integral_future),
        format!("a = λ_W, so α is shared with (f); {f_note}"),
    ));
    conditions.push(ConditionResult::new(
        "C",
        if d.pass { Status::Pass } else { Status::Fail },
        d.lower_margin.min(d.upper_margin),
        "implied by (d)",
    ));
    let g_ok = limits.is_ok();
    conditions.push(ConditionResult::new(
        "D",
        if g_ok { Status::Pass } else { Status::Fail },
        limits.as_ref().map(|l| l.trailing_max_lambda_minus_plus).unwrap_or(nan),
        "ellipsoidal disks with (g); the retract hypothesis is not checked topologically",
    ));

    if let Ok(l) = &limits {
        cert.nu = l.nu;
        cert.omega_tilde = l.omega_tilde;
        cert.omega0 = l.omega0;
    }
    match vstar_terms_found {
        Some((a, b)) => {
            cert.vstar_first = a;
            cert.vstar_second = b;
            cert.vstar_slack = v_star - a.max(b);
            let pass = cert.vstar_slack > 0.0;
            conditions.push(ConditionResult::new(
                "Vstar",
                if pass { Status::Pass } else { Status::Fail },
                cert.vstar_slack,
                format!(
                    "V* = {v_star:.6e}{} against terms {a:.6e}, {b:.6e}",
                    if region.v_star.is_none() { " (auto)" } else { "" }
                ),
            ));
        }
        None => conditions.push(ConditionResult::new("Vstar", Status::Fail, nan, "requirement terms unavailable")),
    }
    if fitted.as_ref().is_some_and(|f| f.consts.sigma == 1.0) {
        notes.push("σ = 1 surrogate inverse carries the c3 factor required by algebraic inversion".into());
    }
    for v in cert_invariants_precheck(&cert, &conditions) {
        notes.push(v);
    }
    cert.curves = curves;
    cert.conditions = conditions;
    cert.notes = notes;
    Ok(cert)
}

fn cert_invariants_precheck(cert: &Certificate, conditions: &[ConditionResult]) -> Vec<String> {
    if conditions.iter().any(|c| c.status == Status::Fail) {
        return Vec::new();
    }
    cert.invariant_violations()
        .into_iter()
        .map(|v| format!("certificate invariant violated: {v}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;


    fn mf(n: usize, rows: usize, cols: usize, e: &[&str], symmetric: bool) -> MatrixFunction {
        MatrixFunction::parse(rows, cols, e, &Scope::state(n), symmetric).unwrap()
    }

    fn reference(eps: f64, v0: f64, w: f64) -> QuadraticProblem {
        let s = format!("{eps}*sin(t)");
        let c = format!("{eps}*cos(t)");
        QuadraticProblem::new(
            mf(2, 2, 2, &["1", "0", "0", "1"], true),
            mf(2, 2, 2, &["1", "0", "0", "-1"], true),
            mf(2, 2, 2, &["1", "0", "0", "-1"], false),
            mf(2, 2, 1, &[&s, &c], false),
            (-40.0, 40.0),
            Region {
                v0: Some(v0),
                v_star: None,
                w_minus: -w,
                w_plus: w,
            },
            Grids {
                t_points: 41,
                state_samples: 32,
            },
        )
        .unwrap()
    }

    #[test]
    fn phi_psi_lambdas() {
        let qp = reference(0.1, 0.02, 0.02);
        assert!((phi(&qp, 0.3).unwrap() - 0.1).abs() < 1e-14);
        assert!((psi(&qp, 0.3).unwrap() - 0.1).abs() < 1e-14);
        assert!((lambda_v(&qp, 0.0, &[1.0, 2.0]).unwrap().abs() - 2.0).abs() < 1e-12);
        assert!((lambda_w(&qp, 0.0, &[1.0, 2.0]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_inverse_roundtrip() {
        for sigma in [0.5, 1.0] {
            let c = QuadraticConstants::new(sigma, 0.1, 0.1, 2.0, 0.05).unwrap();
            for z in [0.0, 0.01, 0.3, 2.0] {
                let v = c.f1_inv(z).unwrap();
                if sigma < 1.0 || z > 0.0 {
                    assert!((c.f1(v).unwrap() - z).abs() < 1e-9, "σ={sigma} z={z}");
                }
            }
        }
        let c = QuadraticConstants::new(0.5, 0.1, 0.0, 1.0, 0.02).unwrap();
        assert_eq!(c.f1_inv(0.0).unwrap(), 0.02);
    }

    #[test]
    fn f_quadratic_log_case() {
        let c = QuadraticConstants::new(1.0, 0.0, 0.0, 1.0, 0.5).unwrap();
        assert_eq!(f_quadratic(&c, 0.5).unwrap(), 0.0);
        assert!((f_quadratic(&c, 3.0).unwrap() - (6.0f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn closed_form_values() {
        let b = bound_theorem4(0.3, 0.2, 1.5, 1.0, 0.0).unwrap();
        assert!((b - (std::f64::consts::E * 0.2).powi(2)).abs() < 1e-15);
        let b = bound_theorem4(0.3, 0.0, 1.5, 0.5, 2.0).unwrap();
        let c1 = (0.5f64 * 0.0).sqrt();
        assert!((b - (c1 * 2f64.sqrt()).powi(4)).abs() < 1e-15);
        assert!(bound_theorem4(0.3, 0.2, 1.5, 1.0, -1.0).is_err());
    }

    #[test]
    fn retraction_examples() {
        let c = Matrix::from_diagonal(&Vector::from_column_slice(&[1.0, -1.0]));
        let y = retract_exit_with(&c, &[2.0, 5.0], 1.0, 0.0).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);
        assert!(matches!(
            retract_exit_with(&c, &[0.0, 5.0], 1.0, 0.0),
            Err(QuadraticError::NotRetractable { .. })
        ));
    }

    #[test]
    fn condition_d_exact_margins() {
        let qp = reference(0.1, 1.0, 1.0);
        let curves = LambdaCurves::compute(&qp, &PencilTolerances::default()).unwrap();
        let d = check_condition_d(&curves, 1.0, &qp.region);
        assert_eq!(d.lower_margin, 0.0);
        assert_eq!(d.upper_margin, 0.0);
        assert!(d.pass);
        let l = limits_nu_omega(&curves, 1.0, 1.0, 1e-6).unwrap();
        assert_eq!((l.nu, l.omega_tilde, l.omega0), (1.0, 1.0, -1.0));
    }

    #[test]
    fn reference_certificate() {
        let qp = reference(0.1, 0.02, 0.02);
        let cert = certify(&qp, &Settings::default()).unwrap();
        assert_eq!(cert.exit_code(), 2, "{:#?}", cert.conditions);
        assert!((cert.c1 - 0.101).abs() < 1e-12);
        assert!((cert.c2 - 0.101).abs() < 1e-12);
        assert!(cert.invariant_violations().is_empty());
        assert!(cert.alpha.iter().all(|a| (a - 2.0).abs() < 1e-9));
    }

    #[test]
    fn infeasible_e() {
        let qp = reference(0.1, 0.005, 0.02);
        let cert = certify(&qp, &Settings::default()).unwrap();
        assert_eq!(cert.exit_code(), 3);
        assert_eq!(cert.condition("e").unwrap().status, Status::Fail);
    }
}
