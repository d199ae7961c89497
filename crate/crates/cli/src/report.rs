//! Run reports: a flat `key = value` text form that reproduces every float
//! bit for bit, plus text and CSV renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;
use vwbound_core::quadratic::{Certificate, ConditionResult, LambdaCurves, Status};

pub const FORMAT: &str = "vwbound-report-1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("key {key}: {message}")]
    Value { key: String, message: String },
    #[error("missing key {0}")]
    Missing(String),
    #[error("empty report")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessSummary {
    pub status: String,
    pub samples: usize,
    pub worst_lambda_hat: f64,
    pub lambda_hat_max: f64,
    pub big_lambda_hat_min: f64,
    pub big_lambda_hat_max: f64,
    pub integral_at_start: f64,
    pub integral_at_end: f64,
    pub divergence_window_certified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionSummary {
    pub converged: bool,
    pub converged_at: usize,
    pub xi: Vec<f64>,
    pub sup_v: f64,
    pub sup_v_t: f64,
    pub heuristic: bool,
    pub stages: usize,
    pub span: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySummary {
    pub coverage: (f64, f64),
    pub samples: usize,
    pub sup_v: f64,
    pub sup_v_t: f64,
    pub slack_v_star: f64,
    pub slack_curve: f64,
    pub slack_closed_form: f64,
    pub violations: usize,
    pub first_violation: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub certificate: Certificate,
    pub uniqueness: Option<UniquenessSummary>,
    pub solution: Option<SolutionSummary>,
    pub verification: Option<VerifySummary>,
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| f(*x)).collect::<Vec<_>>().join(",")
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn unquote(s: &str) -> Option<String> {
    let inner = s.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = String::new();
    let mut it = inner.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next()? {
                'n' => out.push('\n'),
                c => out.push(c),
            }
        } else if c == '"' {
            return None;
        } else {
            out.push(c);
        }
    }
    Some(out)
}

impl RunReport {
    pub fn new(certificate: Certificate) -> Self {
        Self {
            certificate,
            uniqueness: None,
            solution: None,
            verification: None,
        }
    }

    /// Ordered `(key, value)` pairs of the machine-readable form.
    pub fn entries(&self) -> Vec<(String, String)> {
        let c = &self.certificate;
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("format", FORMAT.into());
        put("exit_code", c.exit_code().to_string());
        put(
            "exit_code.meaning",
            quote("0 all conditions pass; 2 some hold only on the window; 3 a condition fails"),
        );
        put("seed", c.seed.to_string());
        put("window", list(&[c.window.0, c.window.1]));
        put("v0", f(c.v0));
        put("v_star", f(c.v_star));
        put("v_star_auto", c.v_star_auto.to_string());
        put("w_minus", f(c.w_minus));
        put("w_plus", f(c.w_plus));
        put("sigma", f(c.sigma));
        put("c1", f(c.c1));
        put("c2", f(c.c2));
        put("c3", f(c.c3));
        put("nu", f(c.nu));
        put("omega_tilde", f(c.omega_tilde));
        put("omega0", f(c.omega0));
        put("bound.v_star", f(c.v_star_bound));
        put("bound.curve_at_zero", f(c.curve_at_zero));
        put("bound.closed_form_at_zero", f(c.closed_form_at_zero));
        put("vstar.first", f(c.vstar_first));
        put("vstar.second", f(c.vstar_second));
        put("vstar.slack", f(c.vstar_slack));
        put("samples", c.samples.to_string());
        put("curves.t", list(&c.curves.t));
        put("curves.lambda_plus", list(&c.curves.lambda_plus));
        put("curves.lambda_minus", list(&c.curves.lambda_minus));
        put("curves.lambda_minus_plus", list(&c.curves.lambda_minus_plus));
        put(
            "curves.n_plus",
            c.curves.n_plus.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        put("curves.b_min_eig", list(&c.curves.b_min_eig));
        put("curves.c_gap", list(&c.curves.c_gap));
        put("alpha", list(&c.alpha));
        put(
            "conditions",
            c.conditions.iter().map(|r| r.id.clone()).collect::<Vec<_>>().join(","),
        );
        for r in &c.conditions {
            put(&format!("condition.{}.status", r.id), r.status.as_str().into());
            put(&format!("condition.{}.margin", r.id), f(r.margin));
            put(&format!("condition.{}.note", r.id), quote(&r.note));
        }
        put("notes", c.notes.len().to_string());
        for (i, n) in c.notes.iter().enumerate() {
            put(&format!("note.{i}"), quote(n));
        }
        if let Some(u) = &self.uniqueness {
            put("uniqueness.status", u.status.clone());
            put("uniqueness.samples", u.samples.to_string());
            put("uniqueness.worst_lambda_hat", f(u.worst_lambda_hat));
            put("uniqueness.lambda_hat_max", f(u.lambda_hat_max));
            put("uniqueness.big_lambda_hat_min", f(u.big_lambda_hat_min));
            put("uniqueness.big_lambda_hat_max", f(u.big_lambda_hat_max));
            put("uniqueness.integral_at_start", f(u.integral_at_start));
            put("uniqueness.integral_at_end", f(u.integral_at_end));
            put(
                "uniqueness.divergence_window_certified",
                u.divergence_window_certified.to_string(),
            );
        }
        if let Some(s) = &self.solution {
            put("solution.converged", s.converged.to_string());
            put("solution.converged_at", s.converged_at.to_string());
            put("solution.xi", list(&s.xi));
            put("solution.sup_v", f(s.sup_v));
            put("solution.sup_v_t", f(s.sup_v_t));
            put("solution.heuristic", s.heuristic.to_string());
            put("solution.stages", s.stages.to_string());
            put("solution.span", list(&[s.span.0, s.span.1]));
        }
        if let Some(v) = &self.verification {
            put("verify.coverage", list(&[v.coverage.0, v.coverage.1]));
            put("verify.samples", v.samples.to_string());
            put("verify.sup_v", f(v.sup_v));
            put("verify.sup_v_t", f(v.sup_v_t));
            put("verify.slack_v_star", f(v.slack_v_star));
            put("verify.slack_curve", f(v.slack_curve));
            put("verify.slack_closed_form", f(v.slack_closed_form));
            put("verify.violations", v.violations.to_string());
            put("verify.first_violation", quote(&v.first_violation));
            put("verify.passed", v.passed.to_string());
        }
        e
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once(" = ").ok_or_else(|| ReportError::Syntax {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(ReportError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key {k}"),
                });
            }
        }
        Self::from_map(&map)
    }

    /// `key,value` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["key", "value"]).expect("in-memory write");
        for (k, v) in self.entries() {
            w.write_record([k, v]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut map = BTreeMap::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| ReportError::Syntax {
                line: i + 2,
                message: e.to_string(),
            })?;
            if rec.len() != 2 {
                return Err(ReportError::Syntax {
                    line: i + 2,
                    message: "expected two columns".into(),
                });
            }
            map.insert(rec[0].to_string(), rec[1].to_string());
        }
        Self::from_map(&map)
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self, ReportError> {
        if map.is_empty() {
            return Err(ReportError::Empty);
        }
        let r = Reader { map };
        let fmt = r.raw("format")?;
        if fmt != FORMAT {
            return Err(ReportError::Value {
                key: "format".into(),
                message: format!("unsupported format {fmt}"),
            });
        }
        let window = r.pair("window")?;
        let ids: Vec<String> = r
            .raw("conditions")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let mut conditions = Vec::new();
        for id in ids {
            let sk = format!("condition.{id}.status");
            let status = Status::parse(r.raw(&sk)?).ok_or_else(|| ReportError::Value {
                key: sk.clone(),
                message: "unknown status".into(),
            })?;
            conditions.push(ConditionResult {
                margin: r.real(&format!("condition.{id}.margin"))?,
                note: r.string(&format!("condition.{id}.note"))?,
                id,
                status,
            });
        }
        let notes = (0..r.count("notes")?)
            .map(|i| r.string(&format!("note.{i}")))
            .collect::<Result<_, _>>()?;
        let certificate = Certificate {
            seed: r.parse_as("seed")?,
            window,
            v0: r.real("v0")?,
            v_star: r.real("v_star")?,
            v_star_auto: r.parse_as("v_star_auto")?,
            w_minus: r.real("w_minus")?,
            w_plus: r.real("w_plus")?,
            sigma: r.real("sigma")?,
            c1: r.real("c1")?,
            c2: r.real("c2")?,
            c3: r.real("c3")?,
            nu: r.real("nu")?,
            omega_tilde: r.real("omega_tilde")?,
            omega0: r.real("omega0")?,
            v_star_bound: r.real("bound.v_star")?,
            curve_at_zero: r.real("bound.curve_at_zero")?,
            closed_form_at_zero: r.real("bound.closed_form_at_zero")?,
            vstar_first: r.real("vstar.first")?,
            vstar_second: r.real("vstar.second")?,
            vstar_slack: r.real("vstar.slack")?,
            samples: r.count("samples")?,
            curves: LambdaCurves {
                t: r.reals("curves.t")?,
                lambda_plus: r.reals("curves.lambda_plus")?,
                lambda_minus: r.reals("curves.lambda_minus")?,
                lambda_minus_plus: r.reals("curves.lambda_minus_plus")?,
                n_plus: r.counts("curves.n_plus")?,
                b_min_eig: r.reals("curves.b_min_eig")?,
                c_gap: r.reals("curves.c_gap")?,
            },
            alpha: r.reals("alpha")?,
            conditions,
            notes,
        };
        let m = certificate.curves.t.len();
        let c = &certificate.curves;
        if [c.lambda_plus.len(), c.lambda_minus.len(), c.lambda_minus_plus.len(), c.n_plus.len()]
            .iter()
            .any(|&l| l != m)
            || m < 2
        {
            return Err(ReportError::Value {
                key: "curves".into(),
                message: "curve lengths differ or are too short".into(),
            });
        }
        if let Ok(code) = r.parse_as::<i32>("exit_code") {
            if code != certificate.exit_code() {
                return Err(ReportError::Value {
                    key: "exit_code".into(),
                    message: format!("{code} disagrees with the condition table"),
                });
            }
        }
        let uniqueness = if map.contains_key("uniqueness.status") {
            Some(UniquenessSummary {
                status: r.raw("uniqueness.status")?.to_string(),
                samples: r.count("uniqueness.samples")?,
                worst_lambda_hat: r.real("uniqueness.worst_lambda_hat")?,
                lambda_hat_max: r.real("uniqueness.lambda_hat_max")?,
                big_lambda_hat_min: r.real("uniqueness.big_lambda_hat_min")?,
                big_lambda_hat_max: r.real("uniqueness.big_lambda_hat_max")?,
                integral_at_start: r.real("uniqueness.integral_at_start")?,
                integral_at_end: r.real("uniqueness.integral_at_end")?,
                divergence_window_certified: r.parse_as("uniqueness.divergence_window_certified")?,
            })
        } else {
            None
        };
        let solution = if map.contains_key("solution.converged") {
            Some(SolutionSummary {
                converged: r.parse_as("solution.converged")?,
                converged_at: r.count("solution.converged_at")?,
                xi: r.reals("solution.xi")?,
                sup_v: r.real("solution.sup_v")?,
                sup_v_t: r.real("solution.sup_v_t")?,
                heuristic: r.parse_as("solution.heuristic")?,
                stages: r.count("solution.stages")?,
                span: r.pair("solution.span")?,
            })
        } else {
            None
        };
        let verification = if map.contains_key("verify.passed") {
            Some(VerifySummary {
                coverage: r.pair("verify.coverage")?,
                samples: r.count("verify.samples")?,
                sup_v: r.real("verify.sup_v")?,
                sup_v_t: r.real("verify.sup_v_t")?,
                slack_v_star: r.real("verify.slack_v_star")?,
                slack_curve: r.real("verify.slack_curve")?,
                slack_closed_form: r.real("verify.slack_closed_form")?,
                violations: r.count("verify.violations")?,
                first_violation: r.string("verify.first_violation")?,
                passed: r.parse_as("verify.passed")?,
            })
        } else {
            None
        };
        Ok(Self {
            certificate,
            uniqueness,
            solution,
            verification,
        })
    }

    /// Aligned tables for reading.
    pub fn render_text(&self) -> String {
        let c = &self.certificate;
        let mut o = String::new();
        let code = c.exit_code();
        let meaning = match code {
            0 => "all conditions pass",
            2 => "some conditions hold only on the window",
            _ => "a condition fails",
        };
        let _ = writeln!(o, "certificate");
        let row = |o: &mut String, k: &str, v: String| {
            let _ = writeln!(o, "  {k:<26}{v}");
        };
        row(&mut o, "exit code", format!("{code} ({meaning})"));
        row(&mut o, "seed", c.seed.to_string());
        row(&mut o, "window", format!("[{}, {}]", c.window.0, c.window.1));
        row(&mut o, "v0", format!("{:.6e}", c.v0));
        row(
            &mut o,
            "V*",
            format!("{:.6e}{}", c.v_star, if c.v_star_auto { " (auto)" } else { "" }),
        );
        row(&mut o, "w-, w+", format!("{:.6e}, {:.6e}", c.w_minus, c.w_plus));
        row(&mut o, "samples", c.samples.to_string());
        let _ = writeln!(o, "\nconstants");
        row(&mut o, "sigma", format!("{}", c.sigma));
        row(&mut o, "c1, c2, c3", format!("{:.6e}, {:.6e}, {:.6e}", c.c1, c.c2, c.c3));
        row(&mut o, "nu", format!("{:.6e}", c.nu));
        row(&mut o, "omega~, omega0", format!("{:.6e}, {:.6e}", c.omega_tilde, c.omega0));
        let _ = writeln!(o, "\nconditions");
        let _ = writeln!(o, "  {:<8}{:<18}{:<16}note", "id", "status", "margin");
        for r in &c.conditions {
            let _ = writeln!(
                o,
                "  {:<8}{:<18}{:<16}{}",
                r.id,
                r.status.as_str(),
                format!("{:.6e}", r.margin),
                r.note
            );
        }
        let _ = writeln!(o, "\nbounds");
        row(&mut o, "v_* (constant)", format!("{:.6e}", c.v_star_bound));
        row(&mut o, "time curve at t = 0", format!("{:.6e}", c.curve_at_zero));
        row(&mut o, "closed form at t = 0", format!("{:.6e}", c.closed_form_at_zero));
        row(
            &mut o,
            "V* check",
            format!("{:.6e} vs {:.6e} (slack {:.6e})", c.vstar_first, c.vstar_second, c.vstar_slack),
        );
        if let Some(u) = &self.uniqueness {
            let _ = writeln!(o, "\nuniqueness");
            row(&mut o, "status", u.status.clone());
            row(&mut o, "lambda^ range", format!("[{:.6e}, {:.6e}]", u.worst_lambda_hat, u.lambda_hat_max));
            row(&mut o, "Lambda^ range", format!("[{:.6e}, {:.6e}]", u.big_lambda_hat_min, u.big_lambda_hat_max));
            row(
                &mut o,
                "divergence on window",
                format!("{} ({:.3e}, {:.3e})", u.divergence_window_certified, u.integral_at_start, u.integral_at_end),
            );
        }
        if let Some(s) = &self.solution {
            let _ = writeln!(o, "\nsolution");
            row(&mut o, "converged", format!("{} (j = {})", s.converged, s.converged_at));
            row(&mut o, "xi", format!("{:?}", s.xi));
            row(&mut o, "sup V", format!("{:.6e} at t = {:.6}", s.sup_v, s.sup_v_t));
            row(&mut o, "span", format!("[{}, {}]", s.span.0, s.span.1));
            row(&mut o, "stages", s.stages.to_string());
            if s.heuristic {
                row(&mut o, "search", "heuristic subdivision".into());
            }
        }
        if let Some(v) = &self.verification {
            let _ = writeln!(o, "\nverification");
            row(&mut o, "passed", v.passed.to_string());
            row(&mut o, "coverage", format!("[{}, {}]", v.coverage.0, v.coverage.1));
            row(&mut o, "sup V", format!("{:.6e} at t = {:.6}", v.sup_v, v.sup_v_t));
            row(&mut o, "slack vs v_*", format!("{:.6e}", v.slack_v_star));
            row(&mut o, "slack vs time curve", format!("{:.6e}", v.slack_curve));
            row(&mut o, "slack vs closed form", format!("{:.6e}", v.slack_closed_form));
            row(&mut o, "violations", v.violations.to_string());
            if v.violations > 0 {
                row(&mut o, "first violation", v.first_violation.clone());
            }
        }
        if !c.notes.is_empty() {
            let _ = writeln!(o, "\nnotes");
            for n in &c.notes {
                let _ = writeln!(o, "  - {n}");
            }
        }
        o
    }
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn raw(&self, k: &str) -> Result<&str, ReportError> {
        self.map
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| ReportError::Missing(k.into()))
    }

    fn bad(k: &str, m: &str) -> ReportError {
        ReportError::Value {
            key: k.into(),
            message: m.into(),
        }
    }

    fn parse_as<T: std::str::FromStr>(&self, k: &str) -> Result<T, ReportError> {
        self.raw(k)?.parse().map_err(|_| Self::bad(k, "unparsable value"))
    }

    fn real(&self, k: &str) -> Result<f64, ReportError> {
        self.parse_as(k)
    }

    fn count(&self, k: &str) -> Result<usize, ReportError> {
        self.parse_as(k)
    }

    fn reals(&self, k: &str) -> Result<Vec<f64>, ReportError> {
        let s = self.raw(k)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| p.parse().map_err(|_| Self::bad(k, "unparsable list entry")))
            .collect()
    }

    fn counts(&self, k: &str) -> Result<Vec<usize>, ReportError> {
        let s = self.raw(k)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| p.parse().map_err(|_| Self::bad(k, "unparsable list entry")))
            .collect()
    }

    fn pair(&self, k: &str) -> Result<(f64, f64), ReportError> {
        match self.reals(k)?.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(Self::bad(k, "expected two values")),
        }
    }

    fn string(&self, k: &str) -> Result<String, ReportError> {
        unquote(self.raw(k)?).ok_or_else(|| Self::bad(k, "malformed string"))
    }
}
