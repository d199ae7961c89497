//! Dormand–Prince 5(4) integration with PI step control, free dense output
//! and event location on the level sets of `V` and `W`.

use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::pencil::Matrix;
use crate::quadratic::{quad_form, QuadraticError, QuadraticProblem};
use crate::vwcore::GrowthPair;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t}, x = {x:?}")]
    StepSizeUnderflow { t: f64, x: Vec<f64> },
    #[error("step limit of {limit} reached at t = {t}")]
    StepLimit { limit: usize, t: f64 },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("CSV: {0}")]
    Csv(String),
}

impl From<QuadraticError> for OdeError {
    fn from(e: QuadraticError) -> Self {
        OdeError::Evaluation(e.to_string())
    }
}

/// A right-hand side together with the level functions its events use.
pub trait OdeSystem: Sync {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), OdeError>;
    /// Value of the level function for `kind`; `None` if unsupported.
    fn level(&self, _kind: EventKind, _t: f64, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// A system given by a closure, without level functions.
pub struct FnSystem<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> OdeSystem for FnSystem<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), OdeError> {
        (self.f)(t, x, out);
        Ok(())
    }
}

/// A quadratic problem with resolved levels `v₀`, `V*`, `w₋`, `w⁺`.
pub struct QuadraticSystem<'a> {
    pub qp: &'a QuadraticProblem,
    pub v0: f64,
    pub v_star: f64,
    pub w_minus: f64,
    pub w_plus: f64,
}

impl<'a> QuadraticSystem<'a> {
    pub fn new(qp: &'a QuadraticProblem, v0: f64, v_star: f64) -> Self {
        Self {
            qp,
            v0,
            v_star,
            w_minus: qp.region.w_minus,
            w_plus: qp.region.w_plus,
        }
    }
}

impl OdeSystem for QuadraticSystem<'_> {
    fn dim(&self) -> usize {
        self.qp.n()
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), OdeError> {
        let f = self.qp.field(t, x)?;
        out.copy_from_slice(f.as_slice());
        Ok(())
    }

    fn level(&self, kind: EventKind, t: f64, x: &[f64]) -> Option<f64> {
        let v = |m: Result<Matrix, QuadraticError>| m.ok().map(|m| quad_form(&m, x));
        match kind {
            EventKind::WHitsWplus => v(self.qp.c_at(t)).map(|w| w - self.w_plus),
            EventKind::WHitsWminus => v(self.qp.c_at(t)).map(|w| w - self.w_minus),
            EventKind::VHitsV0 => v(self.qp.b_at(t)).map(|w| w - self.v0),
            EventKind::VHitsVstar => v(self.qp.b_at(t)).map(|w| w - self.v_star),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    WHitsWplus,
    WHitsWminus,
    VHitsV0,
    VHitsVstar,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::WHitsWplus => "W_hits_wplus",
            EventKind::WHitsWminus => "W_hits_wminus",
            EventKind::VHitsV0 => "V_hits_v0",
            EventKind::VHitsVstar => "V_hits_Vstar",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            EventKind::WHitsWplus,
            EventKind::WHitsWminus,
            EventKind::VHitsV0,
            EventKind::VHitsVstar,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    /// `W → w⁺` rising and `W → w₋` falling mark strict exits.
    pub fn default_direction(&self) -> Direction {
        match self {
            EventKind::WHitsWplus => Direction::Rising,
            EventKind::WHitsWminus => Direction::Falling,
            _ => Direction::Any,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Crossing direction, measured along the direction of integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Rising,
    Falling,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventAction {
    Stop,
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventSpec {
    pub kind: EventKind,
    pub direction: Direction,
    pub action: EventAction,
}

impl EventSpec {
    pub fn stop(kind: EventKind) -> Self {
        Self {
            kind,
            direction: kind.default_direction(),
            action: EventAction::Stop,
        }
    }

    pub fn record(kind: EventKind) -> Self {
        Self {
            kind,
            direction: Direction::Any,
            action: EventAction::Record,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub kind: EventKind,
    pub t: f64,
    pub x: Vec<f64>,
    /// Level value at the reported state.
    pub residual: f64,
    pub stopped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Completed,
    Stopped(EventKind),
}

/// Dense output on one accepted step.
#[derive(Debug, Clone, PartialEq)]
struct Segment {
    t_old: f64,
    h: f64,
    /// Five blocks of `n` coefficients.
    rcont: Vec<f64>,
}

impl Segment {
    fn lo(&self) -> f64 {
        self.t_old.min(self.t_old + self.h)
    }

    fn hi(&self) -> f64 {
        self.t_old.max(self.t_old + self.h)
    }

    fn eval(&self, t: f64, out: &mut [f64]) {
        let n = out.len();
        let th = (t - self.t_old) / self.h;
        let th1 = 1.0 - th;
        let r = &self.rcont;
        for i in 0..n {
            out[i] = r[i]
                + th * (r[n + i] + th1 * (r[2 * n + i] + th * (r[3 * n + i] + th1 * r[4 * n + i])));
        }
    }
}

/// A numerical solution: nodes with strictly increasing times, events and
/// (when produced by [`integrate`]) dense output between the nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub events: Vec<EventRecord>,
    pub stats: StepStats,
    pub termination: Termination,
    segments: Vec<Segment>,
}

impl Trajectory {
    /// A trajectory from nodes alone; interpolation is linear.
    pub fn from_nodes(t: Vec<f64>, x: Vec<Vec<f64>>) -> Result<Self, OdeError> {
        if t.len() != x.len() || t.is_empty() {
            return Err(OdeError::Invalid("node times and states differ in count".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(OdeError::Invalid("node times must increase strictly".into()));
        }
        Ok(Self {
            t,
            x,
            events: Vec::new(),
            stats: StepStats::default(),
            termination: Termination::Completed,
            segments: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t_start(&self) -> f64 {
        self.t[0]
    }

    pub fn t_end(&self) -> f64 {
        self.t[self.t.len() - 1]
    }

    pub fn has_dense_output(&self) -> bool {
        !self.segments.is_empty()
    }

    /// State at `t` from the dense output, or linear interpolation between
    /// nodes when none is available.
    pub fn interpolate(&self, t: f64) -> Option<Vec<f64>> {
        if !(t >= self.t_start() && t <= self.t_end()) {
            return None;
        }
        if let Ok(i) = self.t.binary_search_by(|p| p.total_cmp(&t)) {
            return Some(self.x[i].clone());
        }
        let n = self.dim();
        if !self.segments.is_empty() {
            let k = self.segments.partition_point(|s| s.hi() < t);
            if let Some(seg) = self.segments.get(k) {
                if t >= seg.lo() && t <= seg.hi() {
                    let mut out = vec![0.0; n];
                    seg.eval(t, &mut out);
                    return Some(out);
                }
            }
        }
        let i = self.t.partition_point(|&p| p < t);
        let (ta, tb) = (self.t[i - 1], self.t[i]);
        let s = (t - ta) / (tb - ta);
        Some(
            self.x[i - 1]
                .iter()
                .zip(&self.x[i])
                .map(|(a, b)| a + s * (b - a))
                .collect(),
        )
    }

    /// Keeps the part with `t ≤ t_cut`, ending exactly at `t_cut`.
    pub fn truncate_after(&mut self, t_cut: f64) {
        if t_cut >= self.t_end() {
            return;
        }
        let Some(xc) = self.interpolate(t_cut) else {
            return;
        };
        let keep = self.t.partition_point(|&p| p < t_cut);
        self.t.truncate(keep);
        self.x.truncate(keep);
        self.t.push(t_cut);
        self.x.push(xc);
        let seg_keep = self.segments.partition_point(|s| s.lo() < t_cut);
        self.segments.truncate(seg_keep);
        self.events.retain(|e| e.t <= t_cut);
    }

    /// Keeps the part with `t ≥ t_cut`, starting exactly at `t_cut`.
    pub fn truncate_before(&mut self, t_cut: f64) {
        if t_cut <= self.t_start() {
            return;
        }
        let Some(xc) = self.interpolate(t_cut) else {
            return;
        };
        let drop = self.t.partition_point(|&p| p <= t_cut);
        self.t.drain(..drop);
        self.x.drain(..drop);
        self.t.insert(0, t_cut);
        self.x.insert(0, xc);
        let seg_drop = self.segments.partition_point(|s| s.hi() <= t_cut);
        self.segments.drain(..seg_drop);
        self.events.retain(|e| e.t >= t_cut);
    }

    /// Appends `other`, which must start at this trajectory's end time.
    pub fn append(&mut self, other: Trajectory) -> Result<(), OdeError> {
        if (other.t_start() - self.t_end()).abs() > 1e-12 * (1.0 + self.t_end().abs()) {
            return Err(OdeError::Invalid(format!(
                "cannot append a trajectory starting at {} to one ending at {}",
                other.t_start(),
                self.t_end()
            )));
        }
        self.t.extend_from_slice(&other.t[1..]);
        self.x.extend(other.x.into_iter().skip(1));
        self.segments.extend(other.segments);
        self.events.extend(other.events);
        self.stats.accepted += other.stats.accepted;
        self.stats.rejected += other.stats.rejected;
        self.stats.evaluations += other.stats.evaluations;
        self.termination = other.termination;
        Ok(())
    }

    /// Writes `t,x1,…,xn,V,W` rows followed by `#event,kind,t,x…` lines.
    pub fn write_csv<W: Write>(
        &self,
        out: W,
        vw: &dyn Fn(f64, &[f64]) -> (f64, f64),
    ) -> Result<(), OdeError> {
        let n = self.dim();
        let mut wr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.push("V".into());
        header.push("W".into());
        wr.write_record(&header).map_err(csv_err)?;
        for (t, x) in self.t.iter().zip(&self.x) {
            let (v, w) = vw(*t, x);
            let mut row = vec![fmt_f64(*t)];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(v));
            row.push(fmt_f64(w));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| OdeError::Csv(e.to_string()))?;
        let mut out = wr.into_inner().map_err(|e| OdeError::Csv(e.to_string()))?;
        for e in &self.events {
            let mut line = format!("#event,{},{}", e.kind.name(), fmt_f64(e.t));
            for v in &e.x {
                line.push(',');
                line.push_str(&fmt_f64(*v));
            }
            writeln!(out, "{line}").map_err(|e| OdeError::Csv(e.to_string()))?;
        }
        Ok(())
    }

    /// Reads the format of [`write_csv`](Self::write_csv); `n` is the state
    /// dimension the columns must match.
    pub fn read_csv<R: BufRead>(input: R, n: usize) -> Result<Self, OdeError> {
        let mut body = String::new();
        let mut events = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| OdeError::Csv(e.to_string()))?;
            if let Some(rest) = line.strip_prefix("#event,") {
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() != n + 2 {
                    return Err(OdeError::Csv(format!("malformed event line: {line}")));
                }
                let kind = EventKind::from_name(parts[0])
                    .ok_or_else(|| OdeError::Csv(format!("unknown event kind {}", parts[0])))?;
                let nums = parts[1..]
                    .iter()
                    .map(|s| parse_f64(s))
                    .collect::<Result<Vec<_>, _>>()?;
                events.push(EventRecord {
                    kind,
                    t: nums[0],
                    x: nums[1..].to_vec(),
                    residual: f64::NAN,
                    stopped: false,
                });
            } else if !line.starts_with('#') {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(body.as_bytes());
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.len() != n + 3 {
            return Err(OdeError::Csv(format!(
                "expected {} columns (t, x1..x{n}, V, W), found {}",
                n + 3,
                header.len()
            )));
        }
        let (mut ts, mut xs) = (Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != n + 3 {
                return Err(OdeError::Csv(format!("row with {} columns", rec.len())));
            }
            let vals = rec.iter().map(parse_f64).collect::<Result<Vec<_>, _>>()?;
            ts.push(vals[0]);
            xs.push(vals[1..=n].to_vec());
        }
        let mut traj = Trajectory::from_nodes(ts, xs).map_err(|e| OdeError::Csv(e.to_string()))?;
        traj.events = events;
        Ok(traj)
    }
}

fn csv_err(e: csv::Error) -> OdeError {
    OdeError::Csv(e.to_string())
}

/// Shortest decimal text that reads back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str) -> Result<f64, OdeError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| OdeError::Csv(format!("not a number: {s:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateOptions {
    pub tol: f64,
    pub max_steps: usize,
    /// Times the integrator must land on exactly.
    pub landing: Vec<f64>,
    pub h_max: f64,
    /// Uncontrolled constant step size, for convergence studies.
    pub fixed_step: Option<f64>,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_steps: 1_000_000,
            landing: Vec::new(),
            h_max: f64::INFINITY,
            fixed_step: None,
        }
    }
}

impl IntegrateOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

// Dormand–Prince coefficients.
const C2: f64 = 0.2;
const C3: f64 = 0.3;
const C4: f64 = 0.8;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 0.2;
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
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// PI step-size control.
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const FACC1: f64 = 5.0;
const FACC2: f64 = 0.1;
const SAFE: f64 = 0.9;

struct Stepper<'a> {
    sys: &'a dyn OdeSystem,
    n: usize,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    evals: usize,
}

impl<'a> Stepper<'a> {
    fn new(sys: &'a dyn OdeSystem) -> Self {
        let n = sys.dim();
        Self {
            sys,
            n,
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            evals: 0,
        }
    }

    fn f(&mut self, t: f64, which: usize, x: &[f64]) -> Result<(), OdeError> {
        self.evals += 1;
        let mut out = std::mem::take(&mut self.k[which]);
        let r = self.sys.rhs(t, x, &mut out);
        self.k[which] = out;
        r?;
        if self.k[which].iter().any(|v| !v.is_finite()) {
            return Err(OdeError::Evaluation(format!("non-finite vector field at t = {t}")));
        }
        Ok(())
    }

    fn stage(&mut self, y: &[f64], h: f64, coef: &[(usize, f64)]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for &(j, a) in coef {
                s += a * self.k[j][i];
            }
            self.tmp[i] = y[i] + h * s;
        }
    }

    /// One trial step from `(t, y)` with `k[0] = f(t, y)`. Returns the new
    /// state and the scaled error.
    fn step(&mut self, t: f64, y: &[f64], h: f64, tol: f64) -> Result<(Vec<f64>, f64), OdeError> {
        self.stage(y, h, &[(0, A21)]);
        let tmp = self.tmp.clone();
        self.f(t + C2 * h, 1, &tmp)?;
        self.stage(y, h, &[(0, A31), (1, A32)]);
        let tmp = self.tmp.clone();
        self.f(t + C3 * h, 2, &tmp)?;
        self.stage(y, h, &[(0, A41), (1, A42), (2, A43)]);
        let tmp = self.tmp.clone();
        self.f(t + C4 * h, 3, &tmp)?;
        self.stage(y, h, &[(0, A51), (1, A52), (2, A53), (3, A54)]);
        let tmp = self.tmp.clone();
        self.f(t + C5 * h, 4, &tmp)?;
        self.stage(y, h, &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
        let tmp = self.tmp.clone();
        self.f(t + h, 5, &tmp)?;
        self.stage(y, h, &[(0, A71), (2, A73), (3, A74), (4, A75), (5, A76)]);
        let y1 = self.tmp.clone();
        self.f(t + h, 6, &y1)?;
        let mut err = 0.0f64;
        for i in 0..self.n {
            let e = h
                * (E1 * self.k[0][i]
                    + E3 * self.k[2][i]
                    + E4 * self.k[3][i]
                    + E5 * self.k[4][i]
                    + E6 * self.k[5][i]
                    + E7 * self.k[6][i]);
            let sk = tol * (1.0 + y[i].abs().max(y1[i].abs()));
            err = err.max((e / sk).abs());
        }
        Ok((y1, err))
    }

    fn dense(&self, y0: &[f64], y1: &[f64], h: f64) -> Vec<f64> {
        let n = self.n;
        let mut r = vec![0.0; 5 * n];
        for i in 0..n {
            let ydiff = y1[i] - y0[i];
            let bspl = h * self.k[0][i] - ydiff;
            r[i] = y0[i];
            r[n + i] = ydiff;
            r[2 * n + i] = bspl;
            r[3 * n + i] = ydiff - h * self.k[6][i] - bspl;
            r[4 * n + i] = h
                * (D1 * self.k[0][i]
                    + D3 * self.k[2][i]
                    + D4 * self.k[3][i]
                    + D5 * self.k[4][i]
                    + D6 * self.k[5][i]
                    + D7 * self.k[6][i]);
        }
        r
    }

    /// Starting step size from the two-evaluation heuristic.
    fn initial_step(&mut self, t: f64, y: &[f64], dir: f64, tol: f64, h_max: f64) -> Result<f64, OdeError> {
        let sk: Vec<f64> = y.iter().map(|v| tol * (1.0 + v.abs())).collect();
        let dnf: f64 = self.k[0].iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum();
        let dny: f64 = y.iter().zip(&sk).map(|(v, s)| (v / s).powi(2)).sum();
        let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
            1e-6
        } else {
            0.01 * (dny / dnf).sqrt()
        };
        h = h.min(h_max);
        let y1: Vec<f64> = y.iter().zip(&self.k[0]).map(|(v, f)| v + dir * h * f).collect();
        self.f(t + dir * h, 1, &y1)?;
        let der2 = self.k[1]
            .iter()
            .zip(&self.k[0])
            .zip(&sk)
            .map(|((a, b), s)| ((a - b) / s).powi(2))
            .sum::<f64>()
            .sqrt()
            / h;
        let der12 = der2.abs().max(dnf.sqrt());
        let h1 = if der12 <= 1e-15 {
            (h * 1e-3).max(1e-6)
        } else {
            (0.01 / der12).powf(0.2)
        };
        Ok((100.0 * h).min(h1).min(h_max))
    }
}

struct ActiveEvent {
    spec: EventSpec,
    last: f64,
}

fn crossed(dir: Direction, a: f64, b: f64, sense: f64) -> bool {
    let (a, b) = (a * sense, b * sense);
    match dir {
        Direction::Rising => a < 0.0 && b >= 0.0,
        Direction::Falling => a > 0.0 && b <= 0.0,
        Direction::Any => (a < 0.0 && b >= 0.0) || (a > 0.0 && b <= 0.0),
    }
}

/// Integrates from `(t0, x0)` to `t_end` (either direction).
///
/// Events are detected by a sign change of their level function between
/// accepted steps and located by bisection on the dense output. A stop event
/// ends the integration at the event. A stop event whose level is already at
/// zero and increasing in the direction of integration fires at `t0`.
pub fn integrate(
    sys: &dyn OdeSystem,
    t0: f64,
    x0: &[f64],
    t_end: f64,
    opts: &IntegrateOptions,
    events: &[EventSpec],
) -> Result<Trajectory, OdeError> {
    let n = sys.dim();
    if x0.len() != n {
        return Err(OdeError::Invalid(format!("x0 has {} entries, expected {n}", x0.len())));
    }
    if t0 == t_end {
        return Err(OdeError::Invalid("t0 must differ from t_end".into()));
    }
    if !(opts.tol >= 1e-12 && opts.tol <= 1e-3) {
        return Err(OdeError::Invalid(format!("tol = {} out of range", opts.tol)));
    }
    for e in events {
        if sys.level(e.kind, t0, x0).is_none() {
            return Err(OdeError::Invalid(format!("system has no level function for {}", e.kind)));
        }
    }
    let dir = if t_end > t0 { 1.0 } else { -1.0 };
    let tol = opts.tol;
    let mut st = Stepper::new(sys);
    let mut t = t0;
    let mut y = x0.to_vec();
    let mut ts = vec![t0];
    let mut xs = vec![y.clone()];
    let mut segments = Vec::new();
    let mut records = Vec::new();
    let mut stats = StepStats::default();
    let mut termination = Termination::Completed;

    let mut active: Vec<ActiveEvent> = events
        .iter()
        .map(|&spec| ActiveEvent {
            spec,
            last: sys.level(spec.kind, t0, x0).unwrap_or(f64::NAN),
        })
        .collect();

    st.f(t, 0, &y)?;
    // Stop events already at their level and moving outward fire at t0.
    let probe = 1e-7 * (1.0 + t0.abs());
    for ev in &active {
        if ev.spec.action != EventAction::Stop {
            continue;
        }
        let g0 = ev.last;
        let scale = 1.0 + g0.abs();
        if g0.abs() > 1e-12 * scale && !(ev.spec.direction == Direction::Rising && g0 >= 0.0) {
            continue;
        }
        let xp: Vec<f64> = y.iter().zip(&st.k[0]).map(|(v, f)| v + dir * probe * f).collect();
        let g1 = sys.level(ev.spec.kind, t0 + dir * probe, &xp).unwrap_or(f64::NAN);
        let rate = (g1 - g0) / probe;
        let outward = match ev.spec.direction {
            Direction::Rising => rate > 0.0,
            Direction::Falling => rate < 0.0,
            Direction::Any => rate != 0.0,
        };
        if outward && (g0.abs() <= 1e-12 * scale || ev.spec.direction == Direction::Rising) {
            records.push(EventRecord {
                kind: ev.spec.kind,
                t: t0,
                x: y.clone(),
                residual: g0,
                stopped: true,
            });
            return Ok(Trajectory {
                t: ts,
                x: xs,
                events: records,
                stats: StepStats {
                    evaluations: st.evals,
                    ..stats
                },
                termination: Termination::Stopped(ev.spec.kind),
                segments,
            });
        }
    }

    let mut landing: Vec<f64> = opts
        .landing
        .iter()
        .cloned()
        .filter(|&s| (s - t0) * dir > 0.0 && (t_end - s) * dir > 0.0)
        .collect();
    landing.sort_by(|a, b| (a * dir).total_cmp(&(b * dir)));
    landing.push(t_end);
    let mut next_landing = 0;

    let mut h = match opts.fixed_step {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(OdeError::Invalid(format!("fixed step {h} must be positive"))),
        None => st.initial_step(t, &y, dir, tol, opts.h_max)?,
    };
    let mut facold = 1e-4f64;
    let mut reject = false;
    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(OdeError::StepLimit {
                limit: opts.max_steps,
                t,
            });
        }
        let target = landing[next_landing];
        let mut hs = h.min(opts.h_max);
        let mut lands = false;
        if (t + dir * hs - target) * dir >= 0.0 || (target - t).abs() <= 1.01 * hs {
            hs = (target - t).abs();
            lands = true;
        }
        if hs < 1e-14 * (1.0 + t.abs()) {
            return Err(OdeError::StepSizeUnderflow { t, x: y });
        }
        let hsigned = dir * hs;
        let (y1, err) = st.step(t, &y, hsigned, tol)?;
        let fac11 = err.powf(EXPO1);
        let fixed = opts.fixed_step.is_some();
        if (err <= 1.0 || fixed) && y1.iter().all(|v| v.is_finite()) {
            let mut fac = fac11 / facold.powf(BETA);
            fac = FACC2.max(FACC1.min(fac / SAFE));
            let mut h_new = hs / fac;
            facold = err.max(1e-4);
            stats.accepted += 1;
            let seg = Segment {
                t_old: t,
                h: hsigned,
                rcont: st.dense(&y, &y1, hsigned),
            };
            let t_new = if lands { target } else { t + hsigned };

            // Events on this step.
            let mut first: Option<(usize, f64)> = None;
            let mut news = Vec::with_capacity(active.len());
            for (idx, ev) in active.iter().enumerate() {
                let g_new = sys.level(ev.spec.kind, t_new, &y1).unwrap_or(f64::NAN);
                news.push(g_new);
                if crossed(ev.spec.direction, ev.last, g_new, dir) {
                    let te = locate(sys, ev.spec.kind, &seg, t, t_new, ev.last, n);
                    if ev.spec.action == EventAction::Stop
                        && first.is_none_or(|(_, tf)| (te - tf) * dir < 0.0)
                    {
                        first = Some((idx, te));
                    }
                }
            }
            let stop_time = first.map(|(_, te)| te);
            for (idx, ev) in active.iter().enumerate() {
                if !crossed(ev.spec.direction, ev.last, news[idx], dir) {
                    continue;
                }
                let te = locate(sys, ev.spec.kind, &seg, t, t_new, ev.last, n);
                if let Some(ts_) = stop_time {
                    if (te - ts_) * dir > 0.0 {
                        continue;
                    }
                }
                let mut xe = vec![0.0; n];
                seg.eval(te, &mut xe);
                let residual = sys.level(ev.spec.kind, te, &xe).unwrap_or(f64::NAN);
                records.push(EventRecord {
                    kind: ev.spec.kind,
                    t: te,
                    x: xe,
                    residual,
                    stopped: first.is_some_and(|(i, _)| i == idx),
                });
            }
            if let Some((idx, te)) = first {
                let mut xe = vec![0.0; n];
                seg.eval(te, &mut xe);
                if (te - t) * dir > 0.0 {
                    ts.push(te);
                    xs.push(xe);
                    segments.push(seg);
                }
                stats.evaluations = st.evals;
                termination = Termination::Stopped(active[idx].spec.kind);
                break;
            }
            for (ev, g) in active.iter_mut().zip(news) {
                ev.last = g;
            }

            segments.push(seg);
            t = t_new;
            y = y1;
            ts.push(t);
            xs.push(y.clone());
            st.k[0] = st.k[6].clone();
            if lands {
                next_landing += 1;
                if next_landing == landing.len() {
                    break;
                }
            }
            if reject {
                h_new = h_new.min(hs);
            }
            reject = false;
            if !fixed {
                h = h_new;
            }
        } else {
            let fac = if err.is_finite() { FACC1.min(fac11 / SAFE) } else { FACC1 };
            h = hs / fac;
            reject = true;
            if stats.accepted >= 1 {
                stats.rejected += 1;
            }
        }
    }
    stats.evaluations = st.evals;
    if dir < 0.0 {
        ts.reverse();
        xs.reverse();
        segments.reverse();
    }
    Ok(Trajectory {
        t: ts,
        x: xs,
        events: records,
        stats,
        termination,
        segments,
    })
}

/// Bisection on the dense output for the level crossing inside a step.
fn locate(
    sys: &dyn OdeSystem,
    kind: EventKind,
    seg: &Segment,
    t_a: f64,
    t_b: f64,
    g_a: f64,
    n: usize,
) -> f64 {
    let mut x = vec![0.0; n];
    let (mut a, mut b) = (t_a, t_b);
    let mut ga = g_a;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m == a || m == b || (b - a).abs() <= 1e-15 * (1.0 + m.abs()) {
            break;
        }
        seg.eval(m, &mut x);
        let gm = sys.level(kind, m, &x).unwrap_or(f64::NAN);
        if gm == 0.0 {
            return m;
        }
        if (ga < 0.0) == (gm < 0.0) {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    b
}

/// `V`, `W`, their derivatives and the growth-rate margin along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AlongCurves {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub v_dot: Vec<f64>,
    pub w_dot: Vec<f64>,
    /// `dF(v)/dt = (g/G)(v)·V̇`; NaN where `v ≤ v₀`.
    pub f_dot: Vec<f64>,
    /// `dW/dt − |dF(v)/dt|`; NaN where `v ≤ v₀`.
    pub margin: Vec<f64>,
    pub worst_margin: f64,
}

/// Evaluates the curves at the nodes of `traj`, with derivatives taken from
/// the vector field.
pub fn eval_v_w_along(
    qp: &QuadraticProblem,
    traj: &Trajectory,
    gp: &GrowthPair,
) -> Result<AlongCurves, OdeError> {
    let m = traj.len();
    let mut c = AlongCurves {
        t: traj.t.clone(),
        v: Vec::with_capacity(m),
        w: Vec::with_capacity(m),
        v_dot: Vec::with_capacity(m),
        w_dot: Vec::with_capacity(m),
        f_dot: Vec::with_capacity(m),
        margin: Vec::with_capacity(m),
        worst_margin: f64::INFINITY,
    };
    for (t, x) in traj.t.iter().zip(&traj.x) {
        let v = qp.v(*t, x)?;
        let w = qp.w(*t, x)?;
        let vd = qp.v_dot(*t, x)?;
        let wd = qp.w_dot(*t, x)?;
        let (fd, mg) = if v > gp.v0() {
            let fd = gp.ratio(v) * vd;
            (fd, wd - fd.abs())
        } else {
            (f64::NAN, f64::NAN)
        };
        if mg < c.worst_margin {
            c.worst_margin = mg;
        }
        c.v.push(v);
        c.w.push(w);
        c.v_dot.push(vd);
        c.w_dot.push(wd);
        c.f_dot.push(fd);
        c.margin.push(mg);
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_system() -> FnSystem<impl Fn(f64, &[f64], &mut [f64]) + Sync> {
        FnSystem {
            dim: 1,
            f: |_t: f64, x: &[f64], out: &mut [f64]| out[0] = x[0],
        }
    }

    #[test]
    fn exponential_growth() {
        let sys = exp_system();
        for tol in [1e-6, 1e-9, 1e-12] {
            let tr = integrate(&sys, 0.0, &[1.0], 1.0, &IntegrateOptions::with_tol(tol), &[]).unwrap();
            let err = (tr.x.last().unwrap()[0] - std::f64::consts::E).abs();
            assert!(err <= 10.0 * tol, "tol {tol}: err {err}");
            assert_eq!(tr.t_end(), 1.0);
        }
    }

    #[test]
    fn fixed_step_fifth_order() {
        let sys = exp_system();
        let err = |h: f64| {
            let opts = IntegrateOptions {
                fixed_step: Some(h),
                ..IntegrateOptions::default()
            };
            let tr = integrate(&sys, 0.0, &[1.0], 1.0, &opts, &[]).unwrap();
            (tr.x.last().unwrap()[0] - std::f64::consts::E).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 25.0 && ratio < 40.0, "ratio {ratio}");
    }

    #[test]
    fn backward_and_dense() {
        let sys = exp_system();
        let tr = integrate(&sys, 1.0, &[1.0], -1.0, &IntegrateOptions::with_tol(1e-10), &[]).unwrap();
        assert_eq!(tr.t_start(), -1.0);
        assert_eq!(tr.t_end(), 1.0);
        assert!(tr.t.windows(2).all(|w| w[1] > w[0]));
        for s in [-0.93, -0.2, 0.0, 0.51] {
            let x = tr.interpolate(s).unwrap()[0];
            assert!((x - (s - 1.0f64).exp()).abs() < 1e-8, "s = {s}");
        }
    }

    #[test]
    fn constant_solution() {
        let sys = FnSystem {
            dim: 2,
            f: |_t: f64, _x: &[f64], out: &mut [f64]| out.fill(0.0),
        };
        let tr = integrate(&sys, 0.0, &[0.3, -2.0], 5.0, &IntegrateOptions::default(), &[]).unwrap();
        assert!(tr.x.iter().all(|x| x == &vec![0.3, -2.0]));
        assert!(tr.events.is_empty());
    }

    #[test]
    fn landing_times() {
        let sys = exp_system();
        let opts = IntegrateOptions {
            landing: vec![0.25, 0.5],
            ..IntegrateOptions::with_tol(1e-8)
        };
        let tr = integrate(&sys, 0.0, &[1.0], 1.0, &opts, &[]).unwrap();
        assert!(tr.t.contains(&0.25) && tr.t.contains(&0.5));
    }

    #[test]
    fn truncate_and_append() {
        let sys = exp_system();
        let opts = IntegrateOptions::with_tol(1e-10);
        let mut a = integrate(&sys, 0.0, &[1.0], 2.0, &opts, &[]).unwrap();
        a.truncate_after(0.7);
        assert_eq!(a.t_end(), 0.7);
        let xe = a.x.last().unwrap().clone();
        let b = integrate(&sys, 0.7, &xe, 1.5, &opts, &[]).unwrap();
        a.append(b).unwrap();
        assert_eq!(a.t_end(), 1.5);
        assert!((a.interpolate(1.2).unwrap()[0] - 1.2f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn csv_roundtrip() {
        let sys = exp_system();
        let tr = integrate(&sys, 0.0, &[1.0], 1.0, &IntegrateOptions::with_tol(1e-6), &[]).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, &|_t, x| (x[0] * x[0], 0.0)).unwrap();
        let back = Trajectory::read_csv(buf.as_slice(), 1).unwrap();
        assert_eq!(back.t, tr.t);
        assert_eq!(back.x, tr.x);
        assert!(matches!(Trajectory::read_csv(buf.as_slice(), 2), Err(OdeError::Csv(_))));
    }
}
