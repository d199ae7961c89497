//! Command-line front end: `certify`, `solve`, `verify` and `report`.
//!
//! Exit codes: 0 success, 2 certified only on the window, 3 certification
//! failure, 4 shooting did not converge, 5 bound violated, 64 usage or input
//! error.

pub mod document;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use vwbound_core::odeint::Trajectory;
use vwbound_core::quadratic::{certify, check_uniqueness_theorem5, sample_region, QuadraticProblem, Settings};
use vwbound_core::shooting::{bounded_solution, verify_bound, write_xi_csv, Levels, ShootingConfig, ShootingError};

use document::ProblemDocument;
use report::{RunReport, SolutionSummary, UniquenessSummary, VerifySummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_WINDOW: i32 = 2;
pub const EXIT_FAIL: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_VIOLATION: i32 = 5;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "vwbound", version, about = "Certify and compute V-bounded solutions of nonautonomous ODEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    /// The machine-readable `key = value` form.
    Report,
}

#[derive(Debug, Clone, Args)]
pub struct Overrides {
    /// Window as `T_minus,T_plus`.
    #[arg(long, allow_hyphen_values = true)]
    pub window: Option<String>,
    /// Grid as `t_points` or `t_points,state_samples`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Integrator tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fix σ instead of searching over {0.25, 0.5, 0.75, 1}.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the conditions and write a certificate report.
    Certify {
        problem: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Where to write the machine-readable report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the bounded solution by shooting.
    Solve {
        problem: PathBuf,
        certificate: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Output directory for trajectory.csv, xi.csv and report.txt.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare V along a trajectory with the certified bounds.
    Verify {
        problem: PathBuf,
        certificate: PathBuf,
        trajectory: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a report.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn with(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type Outcome = Result<i32, Failure>;

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            if code == EXIT_OK {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

/// Builds the global thread pool from `VWBOUND_THREADS` when set.
pub fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("VWBOUND_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("VWBOUND_THREADS = {v:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    match cmd {
        Command::Certify {
            problem,
            overrides,
            format,
            out: path,
        } => cmd_certify(&problem, &overrides, format, path.as_deref(), out),
        Command::Solve {
            problem,
            certificate,
            overrides,
            format,
            out: dir,
        } => cmd_solve(&problem, &certificate, &overrides, format, &dir, out, err),
        Command::Verify {
            problem,
            certificate,
            trajectory,
            overrides,
            format,
            out: path,
        } => cmd_verify(&problem, &certificate, &trajectory, &overrides, format, path.as_deref(), out),
        Command::Report { report, format } => cmd_report(&report, format, out),
    }
}

fn read(path: &Path, what: &str) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn parse_pair(text: &str, flag: &str) -> Result<(f64, f64), Failure> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => Ok((a, b)),
            _ => Err(Failure::usage(format!("--{flag} {text:?}: expected two reals"))),
        },
        _ => Err(Failure::usage(format!("--{flag} {text:?}: expected two comma-separated values"))),
    }
}

/// Loads the document and applies command-line overrides.
fn load_problem(path: &Path, ov: &Overrides) -> Result<(ProblemDocument, QuadraticProblem), Failure> {
    let text = read(path, "problem")?;
    let mut doc = ProblemDocument::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if let Some(w) = &ov.window {
        doc.window = parse_pair(w, "window")?;
    }
    if let Some(g) = &ov.grid {
        let parts: Vec<&str> = g.split(',').map(str::trim).collect();
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Failure::usage(format!("--grid {g:?}: expected counts")))
        };
        match parts.as_slice() {
            [t] => doc.grids.t_points = num(t)?,
            [t, s] => {
                doc.grids.t_points = num(t)?;
                doc.grids.state_samples = num(s)?;
            }
            _ => return Err(Failure::usage(format!("--grid {g:?}: expected one or two counts"))),
        }
    }
    if let Some(s) = ov.seed {
        doc.seed = Some(s);
    }
    if let Some(s) = ov.sigma {
        doc.sigma = Some(s);
    }
    if let Some(t) = ov.tol {
        doc.tol = Some(t);
    }
    let qp = doc
        .problem()
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok((doc, qp))
}

fn emit(report: &RunReport, format: Format, out: &mut dyn Write) -> Result<(), Failure> {
    let text = match format {
        Format::Text => report.render_text(),
        Format::Csv => report.to_csv(),
        Format::Report => report.to_text(),
    };
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::usage(format!("cannot write output: {e}")))
}

fn load_report(path: &Path) -> Result<RunReport, Failure> {
    let text = read(path, "report")?;
    RunReport::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

pub fn cmd_certify(
    path: &Path,
    ov: &Overrides,
    format: Format,
    out_path: Option<&Path>,
    out: &mut dyn Write,
) -> Outcome {
    let (doc, qp) = load_problem(path, ov)?;
    let settings = Settings {
        seed: doc.seed.unwrap_or(42),
        sigma: doc.sigma,
        divergence_threshold: doc.divergence_threshold.unwrap_or(10.0),
        ..Settings::default()
    };
    if let Some(s) = settings.sigma {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Failure::usage(format!("sigma = {s} must lie in (0, 1]")));
        }
    }
    let cert = certify(&qp, &settings).map_err(|e| Failure::with(EXIT_FAIL, format!("certification aborted: {e}")))?;
    let mut report = RunReport::new(cert);
    if let Some(c_hat) = doc.c_hat() {
        let c = &report.certificate;
        if c.v0.is_finite() && c.v_star.is_finite() {
            report.uniqueness = Some(uniqueness(&doc, &qp, &report, c_hat, &settings)?);
        } else {
            report
                .certificate
                .notes
                .push("uniqueness check skipped: v0 or V* is not finite".into());
        }
    }
    if let Some(p) = out_path {
        write_file(p, &report.to_text())?;
    }
    emit(&report, format, out)?;
    Ok(report.certificate.exit_code())
}

fn uniqueness(
    doc: &ProblemDocument,
    qp: &QuadraticProblem,
    report: &RunReport,
    c_hat: Result<vwbound_core::timefunc::MatrixFunction, vwbound_core::quadratic::QuadraticError>,
    settings: &Settings,
) -> Result<UniquenessSummary, Failure> {
    let cert = &report.certificate;
    let fail = |e: &dyn std::fmt::Display| Failure::usage(format!("uniqueness check: {e}"));
    let c_hat = c_hat.map_err(|e| fail(&e))?;
    let a_hat = doc.a_hat().map_err(|e| fail(&e))?;
    let mut qp = qp.clone();
    qp.region.v0 = Some(cert.v0);
    let samples = sample_region(&qp, settings.seed, cert.v_star)
        .map_err(|e| Failure::with(EXIT_FAIL, format!("uniqueness sampling: {e}")))?;
    let r = check_uniqueness_theorem5(&qp, &c_hat, &a_hat, &samples, settings.divergence_threshold)
        .map_err(|e| Failure::with(EXIT_FAIL, format!("uniqueness check: {e}")))?;
    let (lo, hi) = r
        .big_lambda_hat
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok(UniquenessSummary {
        status: format!("{:?}", r.status).to_lowercase(),
        samples: r.samples,
        worst_lambda_hat: r.worst_lambda_hat,
        lambda_hat_max: r.lambda_hat_max,
        big_lambda_hat_min: lo,
        big_lambda_hat_max: hi,
        integral_at_start: r.integral_at_start,
        integral_at_end: r.integral_at_end,
        divergence_window_certified: r.divergence_window_certified,
    })
}

pub fn cmd_solve(
    path: &Path,
    cert_path: &Path,
    ov: &Overrides,
    format: Format,
    dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let (doc, qp) = load_problem(path, ov)?;
    let mut report = load_report(cert_path)?;
    let code = report.certificate.exit_code();
    if code != EXIT_OK && code != EXIT_WINDOW {
        return Err(Failure::with(
            EXIT_FAIL,
            format!("certificate {} has exit code {code}; refusing to solve", cert_path.display()),
        ));
    }
    let tol = doc.tol.unwrap_or(1e-10);
    let cfg = ShootingConfig {
        integrator_tol: tol,
        ..ShootingConfig::default()
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    let levels = Levels::from_certificate(&report.certificate);
    match bounded_solution(&qp, &levels, &cfg) {
        Ok(sol) => {
            let mut buf = Vec::new();
            sol.trajectory
                .write_csv(&mut buf, &|t, x| (qp.v(t, x).unwrap_or(f64::NAN), qp.w(t, x).unwrap_or(f64::NAN)))
                .map_err(|e| Failure::usage(e.to_string()))?;
            write_file(&dir.join("trajectory.csv"), &String::from_utf8_lossy(&buf))?;
            write_xi(dir, &sol.xi)?;
            report.solution = Some(SolutionSummary {
                converged: true,
                converged_at: sol.converged_at,
                xi: sol.xi.last().map(|r| r.xi.clone()).unwrap_or_default(),
                sup_v: sol.sup_v,
                sup_v_t: sol.sup_v_t,
                heuristic: sol.heuristic,
                stages: sol.stages,
                span: (sol.trajectory.t_start(), sol.trajectory.t_end()),
            });
            write_file(&dir.join("report.txt"), &report.to_text())?;
            emit(&report, format, out)?;
            Ok(EXIT_OK)
        }
        Err(ShootingError::NotConverged { xi }) => {
            write_xi(dir, &xi)?;
            let _ = writeln!(err, "ξ did not converge; sequence (j, t_j, ξ_j):");
            for r in &xi {
                let _ = writeln!(err, "  {} {} {:?}", r.j, r.t_j, r.xi);
            }
            Err(Failure::with(
                EXIT_NOT_CONVERGED,
                format!("ξ did not converge over {} start times; see {}", xi.len(), dir.join("xi.csv").display()),
            ))
        }
        Err(e) => Err(Failure::with(EXIT_NOT_CONVERGED, format!("shooting failed: {e}"))),
    }
}

fn write_xi(dir: &Path, xi: &[vwbound_core::shooting::XiRecord]) -> Result<(), Failure> {
    let mut buf = Vec::new();
    write_xi_csv(xi, &mut buf).map_err(|e| Failure::usage(e.to_string()))?;
    write_file(&dir.join("xi.csv"), &String::from_utf8_lossy(&buf))
}

pub fn cmd_verify(
    path: &Path,
    cert_path: &Path,
    traj_path: &Path,
    ov: &Overrides,
    format: Format,
    out_path: Option<&Path>,
    out: &mut dyn Write,
) -> Outcome {
    let (doc, qp) = load_problem(path, ov)?;
    let mut report = load_report(cert_path)?;
    let file = fs::File::open(traj_path)
        .map_err(|e| Failure::usage(format!("cannot read trajectory {}: {e}", traj_path.display())))?;
    let traj = Trajectory::read_csv(BufReader::new(file), doc.n)
        .map_err(|e| Failure::usage(format!("{}: {e}", traj_path.display())))?;
    let r = verify_bound(&qp, &report.certificate, &traj).map_err(|e| Failure::usage(format!("verify: {e}")))?;
    let first = r
        .violations
        .first()
        .map(|v| format!("{} at t = {}: V = {:.16e} > {:.16e}", v.bound.name(), v.t, v.v, v.limit))
        .unwrap_or_default();
    report.verification = Some(VerifySummary {
        coverage: r.coverage,
        samples: r.samples,
        sup_v: r.sup_v,
        sup_v_t: r.sup_v_t,
        slack_v_star: r.slack_v_star,
        slack_curve: r.slack_curve,
        slack_closed_form: r.slack_closed_form,
        violations: r.violations.len(),
        first_violation: first,
        passed: r.passed(),
    });
    if let Some(p) = out_path {
        write_file(p, &report.to_text())?;
    }
    emit(&report, format, out)?;
    Ok(if r.passed() { EXIT_OK } else { EXIT_VIOLATION })
}

pub fn cmd_report(path: &Path, format: Format, out: &mut dyn Write) -> Outcome {
    let text = read(path, "report")?;
    let report = if text.trim_start().starts_with("key,value") {
        RunReport::from_csv(&text)
    } else {
        RunReport::parse(&text)
    }
    .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    emit(&report, format, out)?;
    Ok(EXIT_OK)
}
