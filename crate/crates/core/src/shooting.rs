//! Topological shooting on the ellipsoidal disks `{x ∈ 𝕃₊(t) : ⟨C(t)x,x⟩ ≤ w⁺}`
//! for a solution that stays in the region `w₋ ≤ W ≤ w⁺`.
//!
//! With `n₊ = 1` starts are located by bisection on the side of exit. The
//! sensitivity of exit behavior grows like the expansion rate of the flow,
//! so a single start cannot be resolved in floating point over a long
//! window. The search therefore proceeds in stages: once a bracket is
//! exhausted, the orbit is kept up to the last time its bracket endpoints
//! agree and the search restarts on the affine disk through that state.

use std::collections::{BinaryHeap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::odeint::{
    fmt_f64, integrate, EventKind, EventSpec, IntegrateOptions, OdeError, QuadraticSystem,
    Termination, Trajectory,
};
use crate::pencil::{spectral_projectors_with, Matrix, PencilTolerances, Vector};
use crate::quadratic::{quad_form, Certificate, QuadraticError, QuadraticProblem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShootingError {
    #[error("C({t}) has no positive directions")]
    EmptyPositiveSubspace { t: f64 },
    #[error("no sign change at t = {t}: both bracket ends exit on side {side:+}")]
    NoSignChange { t: f64, side: f64 },
    #[error("no cell of radius {rho} at t = {t} has exit directions surrounding the origin")]
    NoSurroundingCell { t: f64, rho: f64 },
    #[error("search budget of {evaluations} evaluations exhausted at t = {t} (latest exit at {best_exit_time}); the subdivision search is a heuristic")]
    BudgetExhausted {
        t: f64,
        evaluations: usize,
        best_exit_time: f64,
    },
    #[error("the search stalled at t = {t}: bracket orbits separate immediately")]
    Stalled { t: f64 },
    #[error("ξ did not converge over {} start times", xi.len())]
    NotConverged { xi: Vec<XiRecord> },
    #[error("chart point of norm {norm} lies outside the disk of radius {radius}")]
    OutsideDisk { norm: f64, radius: f64 },
    #[error("invalid shooting setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Problem(#[from] QuadraticError),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// Region levels used by the stop events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Levels {
    pub v0: f64,
    pub v_star: f64,
    pub w_minus: f64,
    pub w_plus: f64,
}

impl Levels {
    pub fn from_certificate(cert: &Certificate) -> Self {
        Self {
            v0: cert.v0,
            v_star: cert.v_star,
            w_minus: cert.w_minus,
            w_plus: cert.w_plus,
        }
    }

    fn system<'a>(&self, qp: &'a QuadraticProblem) -> QuadraticSystem<'a> {
        QuadraticSystem {
            qp,
            v0: self.v0,
            v_star: self.v_star,
            w_minus: self.w_minus,
            w_plus: self.w_plus,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShootingConfig {
    /// Number of start times `t_j = T₋·j/J`.
    pub count: usize,
    /// End of the stay interval; defaults to the window end.
    pub horizon: Option<f64>,
    /// Bracket width in chart coordinates at which bisection stops; zero
    /// bisects until the midpoint is no longer representable.
    pub bisection_tol: f64,
    /// Relative distance under which two orbits count as the same.
    pub agreement_tol: f64,
    pub xi_tol: f64,
    pub integrator_tol: f64,
    pub max_stages: usize,
    /// Classification budget per stage when `n₊ ≥ 2`.
    pub max_evaluations: usize,
    /// Initial half-width of the bracket after a restart, relative to the
    /// disk radius.
    pub restart_bracket: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            count: 8,
            horizon: None,
            bisection_tol: 0.0,
            agreement_tol: 1e-9,
            xi_tol: 1e-8,
            integrator_tol: 1e-10,
            max_stages: 64,
            max_evaluations: 4000,
            restart_bracket: 1e-6,
        }
    }
}

impl ShootingConfig {
    pub fn validate(&self) -> Result<(), ShootingError> {
        let bad = |m: &str| Err(ShootingError::Invalid(m.into()));
        if self.count == 0 {
            return bad("count must be positive");
        }
        if !(self.bisection_tol >= 0.0) {
            return bad("bisection_tol must be ≥ 0");
        }
        if !(self.agreement_tol > 0.0 && self.xi_tol > 0.0 && self.restart_bracket > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.integrator_tol >= 1e-12 && self.integrator_tol <= 1e-3) {
            return bad("integrator_tol must lie in [1e-12, 1e-3]");
        }
        if self.max_stages == 0 || self.max_evaluations == 0 {
            return bad("budgets must be positive");
        }
        Ok(())
    }

    /// `t_j = T₋·j/J`, decreasing.
    pub fn schedule(&self, t_minus: f64) -> Vec<f64> {
        (1..=self.count)
            .map(|j| t_minus * j as f64 / self.count as f64)
            .collect()
    }
}

/// Chart `u ↦ center + Σ u_k e_k` of a disk in `center + 𝕃₊(t)` with
/// `⟨C(t)e_k, e_l⟩ = δ_kl`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskChart {
    pub t: f64,
    pub center: Vector,
    /// Columns `e_k`.
    pub basis: Matrix,
    pub radius: f64,
}

impl DiskChart {
    pub fn n_plus(&self) -> usize {
        self.basis.ncols()
    }

    pub fn point(&self, u: &[f64]) -> Vec<f64> {
        let x = &self.center + &self.basis * Vector::from_column_slice(u);
        x.as_slice().to_vec()
    }

    /// `u_k = ⟨C(t)x, e_k⟩`, the chart coordinates of the `𝕃₊` part of `x`.
    pub fn coordinates(&self, c: &Matrix, x: &[f64]) -> Vec<f64> {
        let cx = c * Vector::from_column_slice(x);
        (0..self.n_plus())
            .map(|k| self.basis.column(k).dot(&cx))
            .collect()
    }

    /// Flips basis vectors to point along the corresponding columns of
    /// `reference`.
    pub fn orient(&mut self, reference: &Matrix) {
        for k in 0..self.n_plus().min(reference.ncols()) {
            if self.basis.column(k).dot(&reference.column(k)) < 0.0 {
                let neg = -self.basis.column(k);
                self.basis.set_column(k, &neg);
            }
        }
    }
}

fn positive_basis(qp: &QuadraticProblem, t: f64) -> Result<(Matrix, Matrix), ShootingError> {
    let c = qp.c_at(t)?;
    let proj = spectral_projectors_with(&c, &PencilTolerances::default())
        .map_err(|source| QuadraticError::Pencil { t, source })?;
    if proj.n_plus == 0 {
        return Err(ShootingError::EmptyPositiveSubspace { t });
    }
    let mut basis = proj.plus_basis.clone();
    for (k, mu) in proj.plus_eigenvalues.iter().enumerate() {
        let col = basis.column(k) / mu.sqrt();
        basis.set_column(k, &col);
    }
    Ok((basis, proj.minus))
}

/// The disk `M_t` of radius `√w⁺` centered at the origin.
pub fn make_disk_chart(qp: &QuadraticProblem, t: f64, w_plus: f64) -> Result<DiskChart, ShootingError> {
    if !(w_plus > 0.0) {
        return Err(ShootingError::Invalid(format!("w+ = {w_plus} must be positive")));
    }
    let (basis, _) = positive_basis(qp, t)?;
    Ok(DiskChart {
        t,
        center: Vector::zeros(qp.n()),
        basis,
        radius: w_plus.sqrt(),
    })
}

/// The disk through `x` parallel to `𝕃₊(t)`: center `P₋x`, radius
/// `√(w⁺ − W(t, P₋x))`.
pub fn make_affine_chart(
    qp: &QuadraticProblem,
    t: f64,
    x: &[f64],
    w_plus: f64,
) -> Result<DiskChart, ShootingError> {
    let (basis, minus) = positive_basis(qp, t)?;
    let center = minus * Vector::from_column_slice(x);
    let wc = quad_form(&qp.c_at(t)?, center.as_slice());
    if !(w_plus - wc > 0.0) {
        return Err(ShootingError::Invalid(format!("center level {wc} is not below w+ = {w_plus}")));
    }
    Ok(DiskChart {
        t,
        center,
        basis,
        radius: (w_plus - wc).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    WPlus,
    WMinus,
    VStar,
    BlowUp,
}

impl ExitKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExitKind::WPlus => "W_hits_wplus",
            ExitKind::WMinus => "W_hits_wminus",
            ExitKind::VStar => "V_hits_Vstar",
            ExitKind::BlowUp => "blow_up",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classification {
    Stayed {
        traj: Trajectory,
        /// Exit time and side past the horizon, when the orbit was followed
        /// further to learn which way it leaves.
        beyond: Option<(f64, Vec<f64>)>,
    },
    Exited {
        time: f64,
        kind: ExitKind,
        /// Chart coordinates of the exit state on the disk at the exit time.
        side: Vec<f64>,
        traj: Trajectory,
        diagnostic: Option<String>,
    },
}

impl Classification {
    pub fn stayed(&self) -> bool {
        matches!(self, Classification::Stayed { .. })
    }

    pub fn traj(&self) -> &Trajectory {
        match self {
            Classification::Stayed { traj, .. } | Classification::Exited { traj, .. } => traj,
        }
    }

    /// Exit time, past the horizon for a stayed orbit followed further, and
    /// `+∞` for one that never left.
    pub fn exit_time(&self) -> f64 {
        match self {
            Classification::Stayed { beyond: Some((t, _)), .. } => *t,
            Classification::Stayed { .. } => f64::INFINITY,
            Classification::Exited { time, .. } => *time,
        }
    }

    /// Chart coordinates of the exit state, if the orbit was seen leaving.
    pub fn side(&self) -> Option<&[f64]> {
        match self {
            Classification::Exited { side, .. } => Some(side),
            Classification::Stayed { beyond: Some((_, side)), .. } => Some(side),
            Classification::Stayed { beyond: None, .. } => None,
        }
    }

    fn side_sign(&self) -> f64 {
        self.side().and_then(|s| s.first().copied()).unwrap_or(0.0).signum()
    }

    /// Stayed until the horizon and never seen leaving afterwards.
    fn settled(&self) -> bool {
        matches!(self, Classification::Stayed { beyond: None, .. })
    }
}

fn stop_events() -> [EventSpec; 3] {
    [
        EventSpec::stop(EventKind::WHitsWplus),
        EventSpec::stop(EventKind::WHitsWminus),
        EventSpec {
            direction: crate::odeint::Direction::Rising,
            ..EventSpec::stop(EventKind::VHitsVstar)
        },
    ]
}

/// Integrates from the chart point `u` until a stop event or `horizon`.
pub fn classify_start(
    qp: &QuadraticProblem,
    levels: &Levels,
    chart: &DiskChart,
    u: &[f64],
    horizon: f64,
    tol: f64,
) -> Result<Classification, ShootingError> {
    classify_extended(qp, levels, chart, u, horizon, horizon, tol)
}

/// As [`classify_start`]; an orbit that stays until `horizon` is followed
/// up to `side_horizon` to record where it leaves.
fn classify_extended(
    qp: &QuadraticProblem,
    levels: &Levels,
    chart: &DiskChart,
    u: &[f64],
    horizon: f64,
    side_horizon: f64,
    tol: f64,
) -> Result<Classification, ShootingError> {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if u.len() != chart.n_plus() || norm > chart.radius * (1.0 + 1e-12) {
        return Err(ShootingError::OutsideDisk {
            norm,
            radius: chart.radius,
        });
    }
    if !(horizon > chart.t) {
        return Err(ShootingError::Invalid(format!(
            "horizon {horizon} must exceed the start time {}",
            chart.t
        )));
    }
    let x0 = chart.point(u);
    let sys = levels.system(qp);
    let opts = IntegrateOptions {
        landing: vec![0.0],
        ..IntegrateOptions::with_tol(tol)
    };
    let traj = match integrate(&sys, chart.t, &x0, horizon, &opts, &stop_events()) {
        Ok(traj) => traj,
        Err(e @ (OdeError::StepSizeUnderflow { .. } | OdeError::StepLimit { .. })) => {
            let (t, x) = match &e {
                OdeError::StepSizeUnderflow { t, x } => (*t, x.clone()),
                _ => (chart.t, x0.clone()),
            };
            let traj = if t > chart.t {
                Trajectory::from_nodes(vec![chart.t, t], vec![x0.clone(), x.clone()])?
            } else {
                Trajectory::from_nodes(vec![chart.t], vec![x0.clone()])?
            };
            let side = exit_side(qp, chart, t, &x).unwrap_or_else(|_| vec![0.0; chart.n_plus()]);
            return Ok(Classification::Exited {
                time: t,
                kind: ExitKind::BlowUp,
                side,
                traj,
                diagnostic: Some(e.to_string()),
            });
        }
        Err(e) => return Err(e.into()),
    };
    match traj.termination.clone() {
        Termination::Completed => {
            let beyond = if side_horizon > horizon {
                let xh = traj.x.last().expect("nonempty").clone();
                match integrate(&sys, horizon, &xh, side_horizon, &IntegrateOptions::with_tol(tol), &stop_events()) {
                    Ok(ext) if ext.termination != Termination::Completed => {
                        let x = ext.x.last().expect("nonempty");
                        exit_side(qp, chart, ext.t_end(), x).ok().map(|s| (ext.t_end(), s))
                    }
                    _ => None,
                }
            } else {
                None
            };
            Ok(Classification::Stayed { traj, beyond })
        }
        Termination::Stopped(kind) => {
            let time = traj.t_end();
            let x = traj.x.last().expect("nonempty").clone();
            let side = exit_side(qp, chart, time, &x)?;
            let kind = match kind {
                EventKind::WHitsWplus => ExitKind::WPlus,
                EventKind::WHitsWminus => ExitKind::WMinus,
                _ => ExitKind::VStar,
            };
            Ok(Classification::Exited {
                time,
                kind,
                side,
                traj,
                diagnostic: None,
            })
        }
    }
}

fn exit_side(qp: &QuadraticProblem, chart: &DiskChart, t: f64, x: &[f64]) -> Result<Vec<f64>, ShootingError> {
    let (mut basis, _) = positive_basis(qp, t)?;
    let mut probe = DiskChart {
        t,
        center: chart.center.clone(),
        basis: std::mem::replace(&mut basis, Matrix::zeros(0, 0)),
        radius: chart.radius,
    };
    if probe.n_plus() == 1 {
        probe.orient(&chart.basis);
        return Ok(probe.coordinates(&qp.c_at(t)?, x));
    }
    // Rotate into the start frame by the orthogonal polar factor of the
    // overlap between the two bases.
    let local = Vector::from_vec(probe.coordinates(&qp.c_at(t)?, x));
    let overlap = chart.basis.transpose() * &probe.basis;
    let svd = overlap.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Ok(local.as_slice().to_vec());
    };
    Ok((u * vt * local).as_slice().to_vec())
}

/// Result of one search stage on a single disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrappedStart {
    pub chart: DiskChart,
    /// Best chart point found.
    pub u: Vec<f64>,
    pub classification: Classification,
    /// Exit time of each successive midpoint (bisection) or refinement
    /// vertex (subdivision).
    pub exit_times: Vec<f64>,
    /// Final bracket or simplex vertices with their orbits; empty when the
    /// best start stayed.
    pub final_set: Vec<(Vec<f64>, Trajectory)>,
    pub evaluations: usize,
    /// True for the subdivision search used when `n₊ ≥ 2`.
    pub heuristic: bool,
}

struct Ctx<'a> {
    qp: &'a QuadraticProblem,
    levels: &'a Levels,
    horizon: f64,
    cfg: &'a ShootingConfig,
}

impl Ctx<'_> {
    fn classify(&self, chart: &DiskChart, u: &[f64]) -> Result<Classification, ShootingError> {
        let side_horizon = self.horizon + (self.horizon - self.qp.window().0);
        classify_extended(
            self.qp,
            self.levels,
            chart,
            u,
            self.horizon,
            side_horizon,
            self.cfg.integrator_tol,
        )
    }

    fn classify_pair(
        &self,
        chart: &DiskChart,
        a: &[f64],
        b: &[f64],
    ) -> Result<(Classification, Classification), ShootingError> {
        let (ca, cb) = rayon::join(|| self.classify(chart, a), || self.classify(chart, b));
        Ok((ca?, cb?))
    }
}

/// Locates a start on `M_{t_j}` whose orbit stays longest in the region.
///
/// With `n₊ = 1` this is bisection on the exit side over the whole disk and
/// returns either a stayed start or the exhausted bracket. With `n₊ ≥ 2` it
/// is a heuristic best-first simplicial subdivision.
pub fn find_trapped_start(
    qp: &QuadraticProblem,
    levels: &Levels,
    t_j: f64,
    cfg: &ShootingConfig,
) -> Result<TrappedStart, ShootingError> {
    cfg.validate()?;
    let horizon = cfg.horizon.unwrap_or(qp.window().1);
    let chart = make_disk_chart(qp, t_j, levels.w_plus)?;
    let ctx = Ctx {
        qp,
        levels,
        horizon,
        cfg,
    };
    let r = chart.radius;
    if chart.n_plus() == 1 {
        bisect(&ctx, chart, -r, r)
    } else {
        let center = vec![0.0; chart.n_plus()];
        subdivide(&ctx, chart, &center, r)
    }
}

fn bisect(ctx: &Ctx<'_>, chart: DiskChart, a: f64, b: f64) -> Result<TrappedStart, ShootingError> {
    let (ca, cb) = ctx.classify_pair(&chart, &[a], &[b])?;
    bisect_from(ctx, chart, (a, ca), (b, cb), 2)
}

fn bisect_from(
    ctx: &Ctx<'_>,
    chart: DiskChart,
    (mut a, mut ca): (f64, Classification),
    (mut b, mut cb): (f64, Classification),
    mut evaluations: usize,
) -> Result<TrappedStart, ShootingError> {
    for (u, c) in [(a, &ca), (b, &cb)] {
        if c.settled() {
            return Ok(done(chart, vec![u], c.clone(), Vec::new(), evaluations, false));
        }
    }
    let sa = ca.side_sign();
    if sa == cb.side_sign() {
        return Err(ShootingError::NoSignChange {
            t: chart.t,
            side: sa,
        });
    }
    let mut exit_times = Vec::new();
    for _ in 0..2000 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b || b - a <= ctx.cfg.bisection_tol {
            break;
        }
        let cm = ctx.classify(&chart, &[m])?;
        evaluations += 1;
        exit_times.push(cm.exit_time());
        if cm.settled() {
            return Ok(done(chart, vec![m], cm, exit_times, evaluations, false));
        }
        if cm.side_sign() == sa {
            a = m;
            ca = cm;
        } else {
            b = m;
            cb = cm;
        }
    }
    let (u, best) = if ca.exit_time() >= cb.exit_time() {
        (a, ca.clone())
    } else {
        (b, cb.clone())
    };
    Ok(TrappedStart {
        chart,
        u: vec![u],
        classification: best,
        exit_times,
        final_set: vec![(vec![a], ca.traj().clone()), (vec![b], cb.traj().clone())],
        evaluations,
        heuristic: false,
    })
}

fn done(
    chart: DiskChart,
    u: Vec<f64>,
    c: Classification,
    exit_times: Vec<f64>,
    evaluations: usize,
    heuristic: bool,
) -> TrappedStart {
    TrappedStart {
        chart,
        u,
        classification: c,
        exit_times,
        final_set: Vec::new(),
        evaluations,
        heuristic,
    }
}

struct Cell {
    /// Vertex exit directions surround the origin.
    surrounds: bool,
    score: f64,
    vertices: Vec<usize>,
}

impl Cell {
    fn key(&self) -> (bool, f64) {
        (self.surrounds, self.score)
    }
}

impl PartialEq for Cell {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == std::cmp::Ordering::Equal
    }
}
impl Eq for Cell {}
impl PartialOrd for Cell {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cell {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        let (a, b) = (self.key(), o.key());
        a.0.cmp(&b.0).then(a.1.total_cmp(&b.1))
    }
}

/// Unit exit direction of a classified start.
fn direction(c: &Classification) -> Option<Vec<f64>> {
    let side = c.side()?;
    let norm = side.iter().map(|s| s * s).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| side.iter().map(|s| s / norm).collect())
}

/// Whether the origin lies in the convex hull of the vertex exit
/// directions of a simplex.
fn hull_surrounds(dirs: &[Vec<f64>]) -> bool {
    let k = dirs.len() - 1;
    let mut m = Matrix::zeros(k + 1, k + 1);
    for (col, d) in dirs.iter().enumerate() {
        for (row, s) in d.iter().enumerate() {
            m[(row, col)] = *s;
        }
        m[(k, col)] = 1.0;
    }
    let mut rhs = Vector::zeros(k + 1);
    rhs[k] = 1.0;
    m.lu()
        .solve(&rhs)
        .is_some_and(|l| l.iter().all(|l| l.is_finite() && *l >= -1e-12))
}

enum Step {
    Point(usize),
    Settled(Vec<f64>, Classification),
}

struct Search<'c, 'a> {
    ctx: &'c Ctx<'a>,
    chart: DiskChart,
    points: Vec<Vec<f64>>,
    class: Vec<Classification>,
    midpoints: HashMap<(usize, usize), usize>,
    exit_times: Vec<f64>,
    evaluations: usize,
    floor: f64,
}

impl Search<'_, '_> {
    fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (&self.points[a], &self.points[b]);
        p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    fn midpoint(&mut self, a: usize, b: usize) -> Result<Step, ShootingError> {
        let key = (a.min(b), a.max(b));
        if let Some(&m) = self.midpoints.get(&key) {
            return Ok(Step::Point(m));
        }
        if self.evaluations >= self.ctx.cfg.max_evaluations {
            return Err(ShootingError::BudgetExhausted {
                t: self.chart.t,
                evaluations: self.evaluations,
                best_exit_time: self.class.iter().map(Classification::exit_time).fold(f64::NEG_INFINITY, f64::max),
            });
        }
        let u: Vec<f64> = self.points[a]
            .iter()
            .zip(&self.points[b])
            .map(|(p, q)| 0.5 * (p + q))
            .collect();
        let c = self.ctx.classify(&self.chart, &u)?;
        self.evaluations += 1;
        self.exit_times.push(c.exit_time());
        if c.settled() {
            return Ok(Step::Settled(u, c));
        }
        self.points.push(u);
        self.class.push(c);
        let m = self.points.len() - 1;
        self.midpoints.insert(key, m);
        Ok(Step::Point(m))
    }

    /// Signed angle swept by the planar exit direction from `a` to `b`,
    /// splitting the edge until consecutive directions are less than a
    /// quarter turn apart.
    fn sweep(&mut self, a: usize, b: usize) -> Result<Result<f64, Step>, ShootingError> {
        let (Some(da), Some(db)) = (direction(&self.class[a]), direction(&self.class[b])) else {
            return Ok(Ok(f64::NAN));
        };
        let angle = (da[0] * db[1] - da[1] * db[0]).atan2(da[0] * db[0] + da[1] * db[1]);
        if angle.abs() < std::f64::consts::FRAC_PI_2 || self.distance(a, b) <= self.floor {
            return Ok(Ok(angle));
        }
        let m = match self.midpoint(a, b)? {
            Step::Point(m) => m,
            settled => return Ok(Err(settled)),
        };
        let first = match self.sweep(a, m)? {
            Ok(x) => x,
            settled => return Ok(settled),
        };
        Ok(self.sweep(m, b)?.map(|second| first + second))
    }

    fn cell(&mut self, vertices: Vec<usize>) -> Result<Result<Cell, Step>, ShootingError> {
        let score = vertices
            .iter()
            .map(|&v| self.class[v].exit_time())
            .fold(f64::NEG_INFINITY, f64::max);
        let surrounds = if vertices.len() == 3 {
            let mut total = 0.0;
            for e in 0..3 {
                match self.sweep(vertices[e], vertices[(e + 1) % 3])? {
                    Ok(a) => total += a,
                    Err(settled) => return Ok(Err(settled)),
                }
            }
            total.abs() > std::f64::consts::PI
        } else {
            let dirs: Option<Vec<Vec<f64>>> = vertices.iter().map(|&v| direction(&self.class[v])).collect();
            dirs.is_some_and(|d| hull_surrounds(&d))
        };
        Ok(Ok(Cell {
            surrounds,
            score,
            vertices,
        }))
    }

    fn settled(self, u: Vec<f64>, c: Classification) -> TrappedStart {
        done(self.chart, u, c, self.exit_times, self.evaluations, true)
    }
}

/// Simplicial subdivision of the cross-polytope of radius `rho` around
/// `center`, keeping cells on which the exit direction winds around the
/// origin (a nonzero-degree analogue of the sign change used for
/// `n₊ = 1`). With `n₊ = 2` the winding is computed on resolved edges;
/// with `n₊ ≥ 3` it is approximated by the vertex directions.
fn subdivide(
    ctx: &Ctx<'_>,
    chart: DiskChart,
    center: &[f64],
    rho: f64,
) -> Result<TrappedStart, ShootingError> {
    let k = chart.n_plus();
    let clamp = |u: Vec<f64>| {
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > chart.radius {
            u.iter().map(|v| v * chart.radius / norm).collect()
        } else {
            u
        }
    };
    let mut points: Vec<Vec<f64>> = vec![center.to_vec()];
    for i in 0..k {
        for s in [1.0, -1.0] {
            let mut u = center.to_vec();
            u[i] += s * rho;
            points.push(clamp(u));
        }
    }
    let class: Vec<Classification> = points
        .par_iter()
        .map(|u| ctx.classify(&chart, u))
        .collect::<Result<_, _>>()?;
    let evaluations = class.len();
    if let Some(i) = class.iter().position(Classification::settled) {
        return Ok(done(chart, points[i].clone(), class[i].clone(), Vec::new(), evaluations, true));
    }
    let floor = 1e-15 * chart.radius.max(1.0).max(center.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    let mut search = Search {
        ctx,
        chart,
        points,
        class,
        midpoints: HashMap::new(),
        exit_times: Vec::new(),
        evaluations,
        floor: floor.max(ctx.cfg.bisection_tol),
    };
    let mut heap = BinaryHeap::new();
    for mask in 0..(1usize << k) {
        let mut cell = vec![0];
        for i in 0..k {
            cell.push(1 + 2 * i + ((mask >> i) & 1));
        }
        match search.cell(cell)? {
            Ok(c) if c.surrounds => heap.push(c),
            Ok(_) => {}
            Err(Step::Settled(u, c)) => return Ok(search.settled(u, c)),
            Err(Step::Point(_)) => unreachable!(),
        }
    }
    if heap.is_empty() {
        return Err(ShootingError::NoSurroundingCell { t: search.chart.t, rho });
    }
    while let Some(cell) = heap.pop() {
        let mut best = (0, 1, -1.0);
        for i in 0..cell.vertices.len() {
            for j in i + 1..cell.vertices.len() {
                let d = search.distance(cell.vertices[i], cell.vertices[j]);
                if d > best.2 {
                    best = (i, j, d);
                }
            }
        }
        let (i, j, len) = best;
        if len <= search.floor {
            let class = &search.class;
            let top = cell
                .vertices
                .iter()
                .copied()
                .max_by(|&a, &b| class[a].exit_time().total_cmp(&class[b].exit_time()))
                .expect("nonempty cell");
            let final_set = cell
                .vertices
                .iter()
                .map(|&v| (search.points[v].clone(), class[v].traj().clone()))
                .collect();
            return Ok(TrappedStart {
                u: search.points[top].clone(),
                classification: class[top].clone(),
                chart: search.chart,
                exit_times: search.exit_times,
                final_set,
                evaluations: search.evaluations,
                heuristic: true,
            });
        }
        let m = match search.midpoint(cell.vertices[i], cell.vertices[j])? {
            Step::Point(m) => m,
            Step::Settled(u, c) => return Ok(search.settled(u, c)),
        };
        let mut any = false;
        let mut children = Vec::new();
        for replace in [i, j] {
            let mut vertices = cell.vertices.clone();
            vertices[replace] = m;
            match search.cell(vertices)? {
                Ok(c) => {
                    any |= c.surrounds;
                    children.push(c);
                }
                Err(Step::Settled(u, c)) => return Ok(search.settled(u, c)),
                Err(Step::Point(_)) => unreachable!(),
            }
        }
        for mut c in children {
            // Vertex directions cannot split the degree when n₊ ≥ 3.
            if !any {
                c.surrounds = k >= 3;
            }
            if c.surrounds {
                heap.push(c);
            }
        }
    }
    Err(ShootingError::BudgetExhausted {
        t: search.chart.t,
        evaluations: search.evaluations,
        best_exit_time: f64::NAN,
    })
}

/// Last node time up to which all orbits agree within `tol·(1 + ‖x‖)`.
fn agreement_time(set: &[(Vec<f64>, Trajectory)], tol: f64) -> f64 {
    let base = &set[0].1;
    let end = set.iter().map(|(_, tr)| tr.t_end()).fold(f64::INFINITY, f64::min);
    let mut last = base.t_start();
    for (t, x) in base.t.iter().zip(&base.x) {
        if *t > end {
            break;
        }
        let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let agree = set[1..].iter().all(|(_, tr)| {
            tr.interpolate(*t).is_some_and(|y| {
                y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() <= tol * scale
            })
        });
        if !agree {
            break;
        }
        last = *t;
    }
    last
}

/// One search stage of a [`TrappedOrbit`].
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub t: f64,
    pub u: Vec<f64>,
    pub evaluations: usize,
    /// Time up to which this stage's orbit is kept.
    pub kept_until: f64,
}

/// An orbit from `t_j` that stays in the region up to the horizon,
/// assembled from the stages of the search.
#[derive(Debug, Clone, PartialEq)]
pub struct TrappedOrbit {
    pub t_j: f64,
    pub first: TrappedStart,
    pub stages: Vec<StageReport>,
    pub orbit: Trajectory,
    pub heuristic: bool,
}

impl TrappedOrbit {
    /// `ξ_j = x_j(0)`.
    pub fn xi(&self) -> Option<Vec<f64>> {
        self.orbit.interpolate(0.0)
    }
}

/// Staged search for an orbit from `M_{t_j}` that stays until the horizon.
pub fn trapped_orbit(
    qp: &QuadraticProblem,
    levels: &Levels,
    t_j: f64,
    cfg: &ShootingConfig,
) -> Result<TrappedOrbit, ShootingError> {
    let horizon = cfg.horizon.unwrap_or(qp.window().1);
    let ctx = Ctx {
        qp,
        levels,
        horizon,
        cfg,
    };
    let first = find_trapped_start(qp, levels, t_j, cfg)?;
    let heuristic = first.heuristic;
    let mut stages = Vec::new();
    let mut orbit: Option<Trajectory> = None;
    let mut stage = first.clone();
    loop {
        let mut stayed = stage.final_set.is_empty();
        let (piece, kept_until) = if stayed {
            let tr = stage.classification.traj().clone();
            let end = tr.t_end();
            (tr, end)
        } else {
            let s = agreement_time(&stage.final_set, cfg.agreement_tol);
            stayed = s >= horizon;
            if !(s > stage.chart.t + 1e-9 * (1.0 + stage.chart.t.abs())) {
                return Err(ShootingError::Stalled { t: stage.chart.t });
            }
            let mut tr = stage.classification.traj().clone();
            tr.truncate_after(s);
            (tr, s)
        };
        stages.push(StageReport {
            t: stage.chart.t,
            u: stage.u.clone(),
            evaluations: stage.evaluations,
            kept_until,
        });
        match orbit.as_mut() {
            None => orbit = Some(piece),
            Some(o) => o.append(piece)?,
        }
        if stayed {
            break;
        }
        if stages.len() >= cfg.max_stages {
            return Err(ShootingError::BudgetExhausted {
                t: kept_until,
                evaluations: stages.iter().map(|s| s.evaluations).sum(),
                best_exit_time: kept_until,
            });
        }
        let o = orbit.as_ref().expect("set above");
        let xs = o.x.last().expect("nonempty").clone();
        let mut chart = make_affine_chart(qp, kept_until, &xs, levels.w_plus)?;
        chart.orient(&stage.chart.basis);
        let u0 = chart.coordinates(&qp.c_at(kept_until)?, &xs);
        stage = restart(&ctx, chart, &u0)?;
    }
    let mut orbit = orbit.expect("at least one stage");
    orbit.termination = Termination::Completed;
    Ok(TrappedOrbit {
        t_j,
        first,
        stages,
        orbit,
        heuristic,
    })
}

fn restart(ctx: &Ctx<'_>, chart: DiskChart, u0: &[f64]) -> Result<TrappedStart, ShootingError> {
    let r = chart.radius;
    if chart.n_plus() >= 2 {
        let mut rho = ctx.cfg.restart_bracket * r;
        loop {
            match subdivide(ctx, chart.clone(), u0, rho) {
                Err(ShootingError::NoSurroundingCell { .. }) if rho < r => rho = (16.0 * rho).min(r),
                other => return other,
            }
        }
    }
    let u0 = u0[0].clamp(-r, r);
    let mut delta = ctx.cfg.restart_bracket * r;
    let mut evaluations = 0;
    loop {
        let (a, b) = ((u0 - delta).max(-r), (u0 + delta).min(r));
        let (ca, cb) = ctx.classify_pair(&chart, &[a], &[b])?;
        evaluations += 2;
        let whole = a == -r && b == r;
        if ca.settled() || cb.settled() || ca.side_sign() != cb.side_sign() || whole {
            return bisect_from(ctx, chart, (a, ca), (b, cb), evaluations);
        }
        delta *= 16.0;
    }
}

/// `(j, t_j, ξ_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct XiRecord {
    pub j: usize,
    pub t_j: f64,
    pub xi: Vec<f64>,
}

/// Writes `j,t_j,xi_1,…,xi_n` rows.
pub fn write_xi_csv<W: Write>(records: &[XiRecord], out: W) -> Result<(), ShootingError> {
    let n = records.first().map_or(0, |r| r.xi.len());
    let mut wr = csv::Writer::from_writer(out);
    let mut header = vec!["j".to_string(), "t_j".to_string()];
    header.extend((1..=n).map(|i| format!("xi_{i}")));
    let err = |e: csv::Error| ShootingError::Ode(OdeError::Csv(e.to_string()));
    wr.write_record(&header).map_err(err)?;
    for r in records {
        let mut row = vec![r.j.to_string(), fmt_f64(r.t_j)];
        row.extend(r.xi.iter().map(|v| fmt_f64(*v)));
        wr.write_record(&row).map_err(err)?;
    }
    wr.flush().map_err(|e| ShootingError::Ode(OdeError::Csv(e.to_string())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundedSolution {
    /// Orbit from the earliest start, kept from `t_{J−1}` on.
    pub trajectory: Trajectory,
    pub xi: Vec<XiRecord>,
    /// Index `j` at which `‖ξ_j − ξ_{j−1}‖ ≤ tol` held for the second
    /// consecutive time.
    pub converged_at: usize,
    pub sup_v: f64,
    pub sup_v_t: f64,
    pub heuristic: bool,
    pub stages: usize,
}

/// Runs the staged search for every `t_j`, checks convergence of `ξ_j` and
/// returns the orbit of the earliest start.
pub fn bounded_solution(
    qp: &QuadraticProblem,
    levels: &Levels,
    cfg: &ShootingConfig,
) -> Result<BoundedSolution, ShootingError> {
    cfg.validate()?;
    let (t_minus, t_plus) = qp.window();
    if !(t_minus < 0.0 && t_plus > 0.0) {
        return Err(ShootingError::Invalid(format!(
            "the window [{t_minus}, {t_plus}] must contain 0 in its interior"
        )));
    }
    let schedule = cfg.schedule(t_minus);
    let orbits: Vec<TrappedOrbit> = schedule
        .par_iter()
        .map(|&t_j| trapped_orbit(qp, levels, t_j, cfg))
        .collect::<Result<_, _>>()?;
    let xi: Vec<XiRecord> = orbits
        .iter()
        .enumerate()
        .map(|(i, o)| XiRecord {
            j: i + 1,
            t_j: o.t_j,
            xi: o.xi().unwrap_or_else(|| vec![f64::NAN; qp.n()]),
        })
        .collect();
    let mut streak = 0;
    let mut converged_at = None;
    for w in xi.windows(2) {
        let d = w[1]
            .xi
            .iter()
            .zip(&w[0].xi)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        streak = if d <= cfg.xi_tol { streak + 1 } else { 0 };
        if streak >= 2 {
            converged_at = Some(w[1].j);
            break;
        }
    }
    let Some(converged_at) = converged_at else {
        return Err(ShootingError::NotConverged { xi });
    };
    let last = orbits.last().expect("count ≥ 1");
    let mut trajectory = last.orbit.clone();
    if schedule.len() >= 2 {
        trajectory.truncate_before(schedule[schedule.len() - 2]);
    }
    let (sup_v_t, sup_v) = sup_v(qp, &trajectory)?;
    Ok(BoundedSolution {
        trajectory,
        xi,
        converged_at,
        sup_v,
        sup_v_t,
        heuristic: orbits.iter().any(|o| o.heuristic),
        stages: last.stages.len(),
    })
}

/// Times at which curves along `traj` are sampled: the nodes plus evenly
/// spaced points inside every step.
pub fn sample_times(traj: &Trajectory, per_step: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len() * (per_step + 1));
    for w in traj.t.windows(2) {
        for k in 0..=per_step {
            out.push(w[0] + (w[1] - w[0]) * k as f64 / (per_step + 1) as f64);
        }
    }
    out.push(traj.t_end());
    out
}

/// `(t, V)` at the maximum of `V` along `traj`, refined by golden-section
/// search on the interpolant.
pub fn sup_v(qp: &QuadraticProblem, traj: &Trajectory) -> Result<(f64, f64), ShootingError> {
    let v_at = |t: f64| -> Result<f64, ShootingError> {
        let x = traj
            .interpolate(t)
            .ok_or_else(|| ShootingError::Invalid(format!("t = {t} outside the trajectory")))?;
        Ok(qp.v(t, &x)?)
    };
    let times = sample_times(traj, 8);
    let mut best = (times[0], f64::NEG_INFINITY, 0);
    for (i, &t) in times.iter().enumerate() {
        let v = v_at(t)?;
        if v > best.1 {
            best = (t, v, i);
        }
    }
    let lo = times[best.2.saturating_sub(1)];
    let hi = times[(best.2 + 1).min(times.len() - 1)];
    let (mut a, mut b) = (lo, hi);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        if b - a <= 1e-13 * (1.0 + a.abs()) {
            break;
        }
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if v_at(c)? >= v_at(d)? {
            b = d;
        } else {
            a = c;
        }
    }
    let t = 0.5 * (a + b);
    let v = v_at(t)?;
    Ok(if v > best.1 { (t, v) } else { (best.0, best.1) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    VStarConstant,
    TimeCurve,
    ClosedForm,
}

impl BoundKind {
    pub fn name(&self) -> &'static str {
        match self {
            BoundKind::VStarConstant => "v_star_bound",
            BoundKind::TimeCurve => "time_curve",
            BoundKind::ClosedForm => "closed_form",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub bound: BoundKind,
    pub t: f64,
    pub v: f64,
    pub limit: f64,
}

/// Comparison of `V` along a trajectory with the certificate's bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    /// Part of the trajectory inside the certificate window.
    pub coverage: (f64, f64),
    pub samples: usize,
    pub sup_v: f64,
    pub sup_v_t: f64,
    /// `v_* − sup V`.
    pub slack_v_star: f64,
    /// Minimum of `bound(t) − V(t)` over the samples.
    pub slack_curve: f64,
    pub slack_curve_t: f64,
    /// Minimum against the closed-form bound; NaN if unavailable.
    pub slack_closed_form: f64,
    pub violations: Vec<Violation>,
    pub notes: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compares `V(t, x(t))` with `v_*`, the time-dependent bound curve and the
/// closed-form bound at the nodes of `traj` and inside each step.
pub fn verify_bound(
    qp: &QuadraticProblem,
    cert: &Certificate,
    traj: &Trajectory,
) -> Result<VerifyReport, ShootingError> {
    let (w0, w1) = cert.window;
    let lo = traj.t_start().max(w0);
    let hi = traj.t_end().min(w1);
    let mut notes = Vec::new();
    if !(lo < hi) {
        return Err(ShootingError::Invalid(format!(
            "trajectory [{}, {}] does not overlap the certificate window [{w0}, {w1}]",
            traj.t_start(),
            traj.t_end()
        )));
    }
    if lo > traj.t_start() || hi < traj.t_end() {
        notes.push(format!("comparison restricted to [{lo}, {hi}]"));
    }
    if lo > w0 || hi < w1 {
        notes.push(format!("trajectory covers [{lo}, {hi}] of the window [{w0}, {w1}]"));
    }
    let gp = cert.constants()?.growth_pair()?;
    let consts = cert.constants()?;
    let mut curve_cache: HashMap<u64, f64> = HashMap::new();
    let mut closed_cache: HashMap<u64, Option<f64>> = HashMap::new();
    let exceeds = |v: f64, limit: f64| v > limit * (1.0 + 1e-9) + 1e-12;

    let mut report = VerifyReport {
        coverage: (lo, hi),
        samples: 0,
        sup_v: f64::NEG_INFINITY,
        sup_v_t: f64::NAN,
        slack_v_star: f64::NAN,
        slack_curve: f64::INFINITY,
        slack_curve_t: f64::NAN,
        slack_closed_form: f64::NAN,
        violations: Vec::new(),
        notes,
    };
    let mut closed_min = f64::INFINITY;
    for t in sample_times(traj, 8).into_iter().filter(|&t| t >= lo && t <= hi) {
        let x = traj.interpolate(t).expect("inside the trajectory");
        let v = qp.v(t, &x)?;
        report.samples += 1;
        if v > report.sup_v {
            report.sup_v = v;
            report.sup_v_t = t;
        }
        let delta = cert.curves.delta_at(t)?.max(0.0);
        let key = delta.to_bits();
        let curve = match curve_cache.get(&key) {
            Some(&b) => b,
            None => {
                let b = gp.f_inv(0.5 * gp.v0() * delta).map_err(QuadraticError::from)?;
                curve_cache.insert(key, b);
                b
            }
        };
        if curve - v < report.slack_curve {
            report.slack_curve = curve - v;
            report.slack_curve_t = t;
        }
        if exceeds(v, curve) {
            report.violations.push(Violation {
                bound: BoundKind::TimeCurve,
                t,
                v,
                limit: curve,
            });
        }
        let closed = *closed_cache.entry(key).or_insert_with(|| {
            crate::quadratic::bound_theorem4(consts.c1, consts.c2, consts.c3, consts.sigma, delta)
                .ok()
                .filter(|b| b.is_finite())
        });
        if let Some(b) = closed {
            closed_min = closed_min.min(b - v);
            if exceeds(v, b) {
                report.violations.push(Violation {
                    bound: BoundKind::ClosedForm,
                    t,
                    v,
                    limit: b,
                });
            }
        }
        if exceeds(v, cert.v_star_bound) {
            report.violations.push(Violation {
                bound: BoundKind::VStarConstant,
                t,
                v,
                limit: cert.v_star_bound,
            });
        }
    }
    if closed_min.is_finite() {
        report.slack_closed_form = closed_min;
    } else {
        report.notes.push("closed-form bound unavailable".into());
    }
    report.slack_v_star = cert.v_star_bound - report.sup_v;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadratic::{Grids, Region};

    fn problem(c: &[&str], a: &[&str], f0: &[&str], window: (f64, f64)) -> QuadraticProblem {
        let n = f0.len();
        let b: Vec<String> = (0..n * n)
            .map(|k| if k % (n + 1) == 0 { "1".into() } else { "0".into() })
            .collect();
        let b: Vec<&str> = b.iter().map(String::as_str).collect();
        let region = Region {
            v0: Some(0.02),
            v_star: Some(1.0),
            w_minus: -0.02,
            w_plus: 0.02,
        };
        QuadraticProblem::from_texts(n, &b, c, a, f0, window, region, Grids::default()).unwrap()
    }

    fn saddle(f1: &str) -> QuadraticProblem {
        problem(&["1", "0", "0", "-1"], &["1", "0", "0", "-1"], &[f1, "0"], (-10.0, 10.0))
    }

    const LEVELS: Levels = Levels {
        v0: 0.02,
        v_star: 1.0,
        w_minus: -0.02,
        w_plus: 0.02,
    };

    #[test]
    fn chart_basis_is_c_normalized() {
        let qp = problem(&["4", "0", "0", "-1"], &["1", "0", "0", "-1"], &["0", "0"], (-1.0, 1.0));
        let chart = make_disk_chart(&qp, 0.0, 0.02).unwrap();
        assert_eq!(chart.n_plus(), 1);
        assert!((chart.basis[(0, 0)].abs() - 0.5).abs() < 1e-14);
        assert!(chart.basis[(1, 0)].abs() < 1e-14);
        assert!((chart.radius - 0.02f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn chart_coordinates_invert_points() {
        let qp = problem(
            &["2+0.3*sin(t)", "1", "0", "1", "-1", "0.2", "0", "0.2", "1.5"],
            &["1", "0", "0", "0", "-1", "0", "0", "0", "1"],
            &["0", "0", "0"],
            (-2.0, 2.0),
        );
        let t = 0.7;
        let chart = make_disk_chart(&qp, t, 0.02).unwrap();
        assert_eq!(chart.n_plus(), 2);
        let c = qp.c_at(t).unwrap();
        let gram = chart.basis.transpose() * &c * &chart.basis;
        assert!((gram - Matrix::identity(2, 2)).norm() < 1e-12);
        let u = [0.03, -0.07];
        let back = chart.coordinates(&c, &chart.point(&u));
        assert!((back[0] - u[0]).abs() < 1e-13 && (back[1] - u[1]).abs() < 1e-13);
        let w = qp.w(t, &chart.point(&u)).unwrap();
        assert!((w - (u[0] * u[0] + u[1] * u[1])).abs() < 1e-13);
    }

    #[test]
    fn boundary_start_exits_at_once() {
        let qp = saddle("0");
        let chart = make_disk_chart(&qp, -10.0, 0.02).unwrap();
        let c = classify_start(&qp, &LEVELS, &chart, &[chart.radius], 10.0, 1e-10).unwrap();
        match c {
            Classification::Exited { time, kind, side, .. } => {
                assert_eq!(time, -10.0);
                assert_eq!(kind, ExitKind::WPlus);
                assert!(side[0] > 0.0);
            }
            other => panic!("expected an exit, got {other:?}"),
        }
    }

    #[test]
    fn one_sided_forcing_has_no_sign_change() {
        let qp = saddle("1");
        let err = find_trapped_start(&qp, &LEVELS, -10.0, &ShootingConfig::default()).unwrap_err();
        assert!(matches!(err, ShootingError::NoSignChange { side, .. } if side > 0.0), "{err:?}");
    }

    #[test]
    fn unforced_saddle_traps_the_origin() {
        let qp = saddle("0");
        let s = find_trapped_start(&qp, &LEVELS, -10.0, &ShootingConfig::default()).unwrap();
        assert_eq!(s.u, vec![0.0]);
        assert!(s.classification.stayed());
        let bs = bounded_solution(&qp, &LEVELS, &ShootingConfig::default()).unwrap();
        let xi = &bs.xi.last().unwrap().xi;
        assert!(xi.iter().all(|v| v.abs() < 1e-12), "{xi:?}");
    }

    #[test]
    fn bracket_closes_on_the_equilibrium() {
        for a in [0.1, -0.05, 0.013] {
            let qp = saddle(&a.to_string());
            let s = find_trapped_start(&qp, &LEVELS, -10.0, &ShootingConfig::default()).unwrap();
            assert!((s.u[0] + a).abs() < 1e-12, "a = {a}: u = {:?}", s.u);
            // Exit times of the midpoints grow as the bracket closes in.
            let late = s.exit_times.iter().rev().take(5).fold(f64::INFINITY, |m, &t| m.min(t));
            assert!(late > s.exit_times[0], "a = {a}: {:?}", s.exit_times);
            for (_, traj) in &s.final_set {
                assert!(traj.t_end() > 10.0);
            }
        }
    }

    #[test]
    fn forced_saddle_bounded_solution() {
        let qp = saddle("0.1");
        let bs = bounded_solution(&qp, &LEVELS, &ShootingConfig::default()).unwrap();
        let xi = &bs.xi.last().unwrap().xi;
        assert!((xi[0] + 0.1).abs() < 1e-8 && xi[1].abs() < 1e-8, "{xi:?}");
        assert!((bs.sup_v - 0.01).abs() < 1e-6, "{}", bs.sup_v);
        let cert_free = sup_v(&qp, &bs.trajectory).unwrap();
        assert_eq!(cert_free.1, bs.sup_v);
    }

    #[test]
    fn subdivision_localizes_a_planar_saddle() {
        let qp = problem(
            &["1", "0", "0", "0", "1", "0", "0", "0", "-1"],
            &["1", "0", "0", "0", "1", "0", "0", "0", "-1"],
            &["0.05", "-0.03", "0"],
            (-6.0, 6.0),
        );
        let s = find_trapped_start(&qp, &LEVELS, -6.0, &ShootingConfig::default()).unwrap();
        assert!(s.heuristic);
        let x = s.chart.point(&s.u);
        assert!((x[0] + 0.05).abs() < 1e-12 && (x[1] - 0.03).abs() < 1e-12, "{x:?}");
        let bs = bounded_solution(&qp, &LEVELS, &ShootingConfig::default()).unwrap();
        assert!(bs.heuristic);
        let xi = &bs.xi.last().unwrap().xi;
        assert!((xi[0] + 0.05).abs() < 1e-8 && (xi[1] - 0.03).abs() < 1e-8 && xi[2].abs() < 1e-8, "{xi:?}");
    }

    #[test]
    fn schedule_and_config_checks() {
        let cfg = ShootingConfig::default();
        let s = cfg.schedule(-40.0);
        assert_eq!(s.len(), 8);
        assert_eq!(s[0], -5.0);
        assert_eq!(s[7], -40.0);
        let bad = ShootingConfig { count: 0, ..cfg };
        assert!(bad.validate().is_err());
    }
}
