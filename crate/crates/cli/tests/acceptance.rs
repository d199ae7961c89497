//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::fs;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use vwbound::report::RunReport;
use vwbound_core::odeint::{
    eval_v_w_along, integrate, Direction, EventKind, EventSpec, FnSystem, IntegrateOptions,
    QuadraticSystem, Termination, Trajectory,
};
use vwbound_core::pencil::{solve_pencil, spectral_projectors, SymmetricPencil};
use vwbound_core::quadratic::{
    bound_theorem4, certify, Certificate, Grids, QuadraticConstants, QuadraticProblem, Region,
    Settings,
};
use vwbound_core::shooting::{
    bounded_solution, find_trapped_start, sup_v, Levels, ShootingConfig, ShootingError,
};
use vwbound_core::vwcore::lemma1_excursion_bound;

type Check = fn() -> Result<(bool, String), String>;

fn main() {
    let criteria: [(u32, &str, f64, Check); 9] = [
        (1, "pencil", 5.0, pencil),
        (2, "F-calculus", 5.0, f_calculus),
        (3, "closed-form limit bound", 1.0, limit_bound),
        (4, "reference end-to-end", 30.0, reference_end_to_end),
        (5, "trajectory inequality", 10.0, trajectory_inequality),
        (6, "excursion bound", 10.0, excursion_bound),
        (7, "uniqueness", 20.0, uniqueness),
        (8, "negative controls", 10.0, negative_controls),
        (9, "integrator", 5.0, integrator),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match result {
            Ok(Ok((ok, detail))) => (ok, detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        let in_time = secs < limit;
        let pass = ok && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id}: {} {name}; {detail}; {secs:.2} s of {limit} s{}",
            if pass { "PASS" } else { "FAIL" },
            if in_time { "" } else { " (over time)" }
        );
    }
    println!("{} of 9 criteria pass", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vwbound"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn vwbound")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn reference_doc() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("problems/reference.vwp")
}

fn read_report(path: &Path) -> Result<RunReport, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    RunReport::parse(&text).map_err(|e| e.to_string())
}

fn read_traj(path: &Path) -> Result<Trajectory, String> {
    let f = fs::File::open(path).map_err(|e| e.to_string())?;
    Trajectory::read_csv(BufReader::new(f), 2).map_err(|e| e.to_string())
}

fn reference_certificate() -> (QuadraticProblem, Certificate) {
    let qp = oracle::reference_problem(Grids::default());
    let cert = certify(&qp, &Settings::default()).expect("certify reference");
    (qp, cert)
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pencil() -> Result<(bool, String), String> {
    let mut rng = oracle::rng(2024);
    let (mut worst_rel, mut worst_inv) = (0.0f64, 0.0f64);
    let mut mismatched = 0;
    for k in 0..100 {
        let n = 2 + k % 7;
        let b = oracle::random_spd(&mut rng, n);
        let c = oracle::random_symmetric(&mut rng, n);
        let roots = oracle::pencil_roots(&c, &b);
        let s = solve_pencil(&SymmetricPencil::new(c.clone(), b.clone()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        if roots.len() != n {
            mismatched += 1;
            continue;
        }
        for (got, want) in s.eigenvalues.iter().zip(&roots) {
            worst_rel = worst_rel.max((got - want).abs() / want.abs());
        }
        let x = DMatrix::from_columns(&s.eigenvectors);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.eigenvalues.clone()));
        let scale = 1.0 + c.norm() + b.norm();
        worst_inv = worst_inv.max((x.transpose() * &b * &x - DMatrix::identity(n, n)).norm() / scale);
        worst_inv = worst_inv.max((x.transpose() * &c * &x - d).norm() / scale);
        let proj = spectral_projectors(&c).map_err(|e| e.to_string())?;
        worst_inv = worst_inv.max((&proj.plus * &proj.plus - &proj.plus).norm());
        worst_inv = worst_inv.max((&proj.plus + &proj.minus - DMatrix::identity(n, n)).norm());
        worst_inv = worst_inv.max((&proj.plus * &c - &c * &proj.plus).norm() / scale);
    }
    let ok = mismatched == 0 && worst_rel <= 1e-8 && worst_inv <= 1e-10;
    Ok((
        ok,
        format!("100 instances, max relative eigenvalue error {worst_rel:.2e}, max invariant defect {worst_inv:.2e}, oracle root-count mismatches {mismatched}"),
    ))
}

fn f_calculus() -> Result<(bool, String), String> {
    let mut rng = oracle::rng(7);
    let (mut worst_inv, mut worst_oracle) = (0.0f64, 0.0f64);
    let (mut zero_ok, mut increasing, mut below) = (true, true, true);
    for k in 0..20 {
        let (sigma, c1, c2, c3, v0) = oracle::admissible_constants(&mut rng, k);
        let c = QuadraticConstants::new(sigma, c1, c2, c3, v0).map_err(|e| e.to_string())?;
        let gp = c.growth_pair().map_err(|e| e.to_string())?;
        let v_star = 100.0 * v0;
        zero_ok &= gp.f(v0).map_err(|e| e.to_string())? == 0.0;
        let mut last = 0.0;
        for i in 1..=200 {
            let v = v0 * (v_star / v0).powf(i as f64 / 200.0);
            let f = gp.f(v).map_err(|e| e.to_string())?;
            increasing &= f > last;
            below &= c.f1(v).map_err(|e| e.to_string())? <= f + 1e-12 * (1.0 + f);
            last = f;
        }
        let want = oracle::f_by_simpson(sigma, c1, c2, c3, v0, v_star);
        worst_oracle = worst_oracle.max((last - want).abs() / (1.0 + want));
        for i in 0..50 {
            let z = last * i as f64 / 49.0;
            let v = gp.f_inv(z).map_err(|e| e.to_string())?;
            worst_inv = worst_inv.max((gp.f(v).map_err(|e| e.to_string())? - z).abs());
        }
    }
    let ok = zero_ok && increasing && below && worst_inv <= 1e-8 && worst_oracle <= 1e-9;
    Ok((
        ok,
        format!("20 sets: F(v0) = 0 {zero_ok}, increasing {increasing}, F1 <= F {below}, max |F(F^-1(z)) - z| {worst_inv:.2e}, max deviation from Simpson {worst_oracle:.2e}"),
    ))
}

fn limit_bound() -> Result<(bool, String), String> {
    let mut rng = oracle::rng(11);
    let mut worst = [0.0f64; 2];
    for k in 0..40 {
        let sigma = if k < 20 { 1.0 } else { rng.random_range(0.1..0.9) };
        let c1 = rng.random_range(0.05..1.0);
        let c2 = rng.random_range(0.05..1.0);
        let c3 = rng.random_range(0.05..2.0);
        let delta = rng.random_range(0.0..5.0);
        let v0 = c2 * c2 * (1.0 + 1e-8);
        let big_c2 = (c1 + c2) * c2 * c3 / 2.0;
        let want = if sigma == 1.0 {
            (std::f64::consts::E * c2).powi(2) * (big_c2 * delta).exp()
        } else {
            let q = 1.0 - sigma;
            ((q * big_c2).sqrt() * delta.sqrt() + c2.powf(q)).powf(2.0 / q)
        };
        let c = QuadraticConstants::new(sigma, c1, c2, c3, v0).map_err(|e| e.to_string())?;
        let got = c.f1_inv(0.5 * v0 * delta).map_err(|e| e.to_string())?;
        let lib = bound_theorem4(c1, c2, c3, sigma, delta).map_err(|e| e.to_string())?;
        let rel = ((got - want).abs() / want).max((lib - want).abs() / want);
        worst[usize::from(k >= 20)] = worst[usize::from(k >= 20)].max(rel);
    }
    Ok((
        worst[0] <= 1e-6 && worst[1] <= 1e-6,
        format!("max relative error sigma = 1: {:.2e}, sigma < 1: {:.2e}", worst[0], worst[1]),
    ))
}

fn reference_end_to_end() -> Result<(bool, String), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let doc = reference_doc();
    let cert = dir.path().join("cert.txt");
    let o = run(&["certify", p(&doc), "--out", p(&cert)]);
    let certify_code = code(&o);
    let r = read_report(&cert)?;
    let cv = &r.certificate.curves;
    let dev = |v: &[f64], want: f64| v.iter().map(|x| (x - want).abs()).fold(0.0, f64::max);
    let curve_dev = dev(&cv.lambda_plus, 1.0)
        .max(dev(&cv.lambda_minus, -1.0))
        .max(dev(&cv.lambda_minus_plus, 1.0))
        .max(dev(&r.certificate.alpha, 2.0));

    let out = dir.path().join("solution");
    let o = run(&["solve", p(&doc), p(&cert), "--out", p(&out)]);
    let solve_code = code(&o);
    if solve_code != 0 {
        return Ok((false, format!("solve exited {solve_code}: {}", String::from_utf8_lossy(&o.stderr))));
    }
    let sol = read_report(&out.join("report.txt"))?.solution.ok_or("no solution section")?;
    let xi_dev = max_dev(&sol.xi, &oracle::reference_solution(0.0));
    let sup_dev = (sol.sup_v - 0.01).abs();
    let traj = read_traj(&out.join("trajectory.csv"))?;
    let traj_dev = traj
        .t
        .iter()
        .zip(&traj.x)
        .filter(|(t, _)| **t >= -20.0)
        .map(|(t, x)| max_dev(x, &oracle::reference_solution(*t)))
        .fold(0.0, f64::max);

    let vr = dir.path().join("verify.txt");
    let o = run(&["verify", p(&doc), p(&cert), p(&out.join("trajectory.csv")), "--out", p(&vr)]);
    let verify_code = code(&o);
    let v = read_report(&vr)?.verification.ok_or("no verification section")?;

    let ok = certify_code == 2
        && curve_dev <= 1e-9
        && xi_dev <= 1e-6
        && sup_dev <= 1e-5
        && traj_dev <= 1e-6
        && verify_code == 0
        && v.slack_v_star > 0.0
        && v.slack_curve > 0.0;
    Ok((
        ok,
        format!(
            "certify exit {certify_code}, curve deviation {curve_dev:.1e}; xi = ({:.10}, {:.10}), |xi - xi*| {xi_dev:.1e}; sup V {:.8} (|.-0.01| {sup_dev:.1e}); trajectory vs closed form on [-20, 40] {traj_dev:.1e}; verify exit {verify_code}, slack v_* {:.3e}, curve {:.3e}",
            sol.xi[0], sol.xi[1], sol.sup_v, v.slack_v_star, v.slack_curve
        ),
    ))
}

fn stop_events() -> [EventSpec; 3] {
    [
        EventSpec::stop(EventKind::WHitsWplus),
        EventSpec::stop(EventKind::WHitsWminus),
        EventSpec {
            direction: Direction::Rising,
            ..EventSpec::stop(EventKind::VHitsVstar)
        },
    ]
}

fn trajectory_inequality() -> Result<(bool, String), String> {
    let (qp, cert) = reference_certificate();
    let gp = cert.constants().and_then(|c| c.growth_pair()).map_err(|e| e.to_string())?;
    let levels = Levels::from_certificate(&cert);
    let bs = bounded_solution(&qp, &levels, &ShootingConfig::default()).map_err(|e| e.to_string())?;
    let tally = |traj: &Trajectory, worst: &mut f64, checked: &mut usize| -> Result<(), String> {
        let along = eval_v_w_along(&qp, traj, &gp).map_err(|e| e.to_string())?;
        for m in along.margin.iter().filter(|m| !m.is_nan()) {
            *worst = worst.min(*m);
            *checked += 1;
        }
        Ok(())
    };
    let mut worst = f64::INFINITY;
    let mut checked = 0usize;
    tally(&bs.trajectory, &mut worst, &mut checked)?;
    let on_solution = checked;
    let sys = QuadraticSystem::new(&qp, cert.v0, cert.v_star);
    let mut rng = oracle::rng(5);
    let (mut stayed, mut exited) = (0, 0);
    while stayed + exited < 20 {
        let r2 = rng.random_range(cert.v0..0.5 * cert.v_star);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let x = [r2.sqrt() * theta.cos(), r2.sqrt() * theta.sin()];
        let w = x[0] * x[0] - x[1] * x[1];
        if w <= cert.w_minus || w >= cert.w_plus {
            continue;
        }
        let t0 = rng.random_range(-30.0..20.0);
        let traj = integrate(&sys, t0, &x, t0 + 15.0, &IntegrateOptions::default(), &stop_events())
            .map_err(|e| e.to_string())?;
        if traj.termination == Termination::Completed {
            stayed += 1;
        } else {
            exited += 1;
        }
        tally(&traj, &mut worst, &mut checked)?;
    }
    Ok((
        worst >= -1e-6,
        format!("{checked} nodes with V > v0 ({on_solution} on the bounded solution, whose V stays below v0), 20 random trajectories ({stayed} stayed, {exited} exited); min of dW/dt - |dF/dt| = {worst:.3e}"),
    ))
}

fn excursion_bound() -> Result<(bool, String), String> {
    let (qp, cert) = reference_certificate();
    let gp = cert.constants().and_then(|c| c.growth_pair()).map_err(|e| e.to_string())?;
    let sys = QuadraticSystem::new(&qp, cert.v0, cert.v_star);
    let events = [
        EventSpec::stop(EventKind::WHitsWplus),
        EventSpec::stop(EventKind::WHitsWminus),
        EventSpec {
            direction: Direction::Rising,
            ..EventSpec::stop(EventKind::VHitsVstar)
        },
        EventSpec {
            direction: Direction::Falling,
            ..EventSpec::stop(EventKind::VHitsV0)
        },
    ];
    let mut rng = oracle::rng(9);
    let mut found = 0;
    let mut attempts = 0;
    let mut worst = f64::INFINITY;
    let mut peak = 0.0f64;
    while found < 10 && attempts < 20000 {
        attempts += 1;
        let t0 = rng.random_range(-30.0..30.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = cert.v0.sqrt();
        let x = [r * theta.cos(), r * theta.sin()];
        if !(qp.v_dot(t0, &x).map_err(|e| e.to_string())? > 0.0) {
            continue;
        }
        let traj = integrate(&sys, t0, &x, t0 + 20.0, &IntegrateOptions::default(), &events)
            .map_err(|e| e.to_string())?;
        if traj.termination != Termination::Stopped(EventKind::VHitsV0) {
            continue;
        }
        found += 1;
        let t_end = traj.t_end();
        let x_end = traj.x.last().expect("nonempty");
        let w_entry = qp.w(t0, &x).map_err(|e| e.to_string())?;
        let w_exit = qp.w(t_end, x_end).map_err(|e| e.to_string())?;
        let bound = lemma1_excursion_bound(&gp, w_exit, w_entry).map_err(|e| e.to_string())?;
        let (_, v_max) = sup_v(&qp, &traj).map_err(|e| e.to_string())?;
        worst = worst.min(bound + 1e-6 - v_max);
        peak = peak.max(v_max);
    }
    Ok((
        found == 10 && worst >= 0.0,
        format!("{found} excursions from {attempts} shell starts; highest max V {peak:.6e}; min of bound + 1e-6 - max V = {worst:.3e}"),
    ))
}

fn uniqueness() -> Result<(bool, String), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let doc = reference_doc();
    let mut trajs = Vec::new();
    let mut u = None;
    for seed in ["42", "7"] {
        let cert = dir.path().join(format!("cert{seed}.txt"));
        let o = run(&["certify", p(&doc), "--seed", seed, "--out", p(&cert)]);
        if code(&o) != 2 {
            return Ok((false, format!("certify with seed {seed} exited {}", code(&o))));
        }
        if u.is_none() {
            u = read_report(&cert)?.uniqueness;
        }
        let out = dir.path().join(format!("sol{seed}"));
        let o = run(&["solve", p(&doc), p(&cert), "--out", p(&out)]);
        if code(&o) != 0 {
            return Ok((false, format!("solve with seed {seed} exited {}", code(&o))));
        }
        trajs.push(read_traj(&out.join("trajectory.csv"))?);
    }
    let u = u.ok_or("certificate has no uniqueness section")?;
    let lambda_dev = (u.worst_lambda_hat - 2.0).abs().max((u.lambda_hat_max - 2.0).abs());
    let big_dev = (u.big_lambda_hat_min - 1.0).abs().max((u.big_lambda_hat_max - 1.0).abs());

    let qp = oracle::reference_problem(Grids::default());
    let field = |t: f64, x: &[f64]| qp.field(t, x).expect("field").as_slice().to_vec();
    let mut gap = 0.0f64;
    for (a, b) in [(&trajs[0], &trajs[1]), (&trajs[1], &trajs[0])] {
        for (t, x) in a.t.iter().zip(&a.x) {
            if *t < -20.0 || *t > 20.0 {
                continue;
            }
            let y = oracle::hermite(&b.t, &b.x, field, *t).ok_or("trajectories do not overlap")?;
            gap = gap.max(max_dev(x, &y));
        }
    }
    let ok = lambda_dev <= 1e-9 && big_dev <= 1e-9 && u.divergence_window_certified && gap <= 1e-5;
    Ok((
        ok,
        format!(
            "lambda^ in [{:.12}, {:.12}], Lambda^ in [{:.12}, {:.12}], divergence flag {}; seeds 42 and 7 agree on [-20, 20] within {gap:.2e}",
            u.worst_lambda_hat, u.lambda_hat_max, u.big_lambda_hat_min, u.big_lambda_hat_max, u.divergence_window_certified
        ),
    ))
}

fn negative_controls() -> Result<(bool, String), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let doc = reference_doc();
    let cert = dir.path().join("cert.txt");
    run(&["certify", p(&doc), "--out", p(&cert)]);
    let out = dir.path().join("solution");
    let o = run(&["solve", p(&doc), p(&cert), "--out", p(&out)]);
    if code(&o) != 0 {
        return Ok((false, format!("solve exited {}", code(&o))));
    }
    // v_* pushed below the measured sup V of 0.01.
    let text = fs::read_to_string(&cert).map_err(|e| e.to_string())?;
    let corrupted: String = text
        .lines()
        .map(|l| if l.starts_with("bound.v_star = ") { "bound.v_star = 1.0e-3".to_string() } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    let bad = dir.path().join("corrupted.txt");
    fs::write(&bad, corrupted + "\n").map_err(|e| e.to_string())?;
    let verify_code = code(&run(&["verify", p(&doc), p(&bad), p(&out.join("trajectory.csv"))]));

    let tiny = dir.path().join("tiny.vwp");
    let doc_text = fs::read_to_string(&doc).map_err(|e| e.to_string())?;
    fs::write(&tiny, doc_text.replace("v0 = 0.02", "v0 = 1e-9")).map_err(|e| e.to_string())?;
    let tiny_cert = dir.path().join("tiny.txt");
    let o = run(&["certify", p(&tiny), "--out", p(&tiny_cert)]);
    let certify_code = code(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    let e_row = stdout.lines().find(|l| l.trim_start().starts_with("e ")).unwrap_or("").trim().to_string();
    let e_failed = read_report(&tiny_cert)?
        .certificate
        .condition("e")
        .is_some_and(|c| c.status.as_str() == "fail");

    let qp = QuadraticProblem::from_texts(
        2,
        &["1", "0", "0", "1"],
        &["1", "0", "0", "-1"],
        &["1", "0", "0", "-1"],
        &["1", "0"],
        (-10.0, 10.0),
        Region {
            v0: Some(0.02),
            v_star: Some(1.0),
            w_minus: -0.02,
            w_plus: 0.02,
        },
        Grids::default(),
    )
    .map_err(|e| e.to_string())?;
    let levels = Levels {
        v0: 0.02,
        v_star: 1.0,
        w_minus: -0.02,
        w_plus: 0.02,
    };
    let shoot = find_trapped_start(&qp, &levels, -10.0, &ShootingConfig::default());
    let no_sign = matches!(shoot, Err(ShootingError::NoSignChange { .. }));
    let ok = verify_code == 5 && certify_code == 3 && e_failed && no_sign;
    Ok((
        ok,
        format!(
            "corrupted v_* -> verify exit {verify_code}; v0 = 1e-9 -> certify exit {certify_code}, condition (e) failed {e_failed} [{}]; one-sided forcing -> {}",
            e_row.split_whitespace().take(2).collect::<Vec<_>>().join(" "),
            match &shoot {
                Err(e) => e.to_string(),
                Ok(_) => "a trapped start".into(),
            }
        ),
    ))
}

fn integrator() -> Result<(bool, String), String> {
    let growth = FnSystem {
        dim: 1,
        f: |_t: f64, x: &[f64], out: &mut [f64]| out[0] = x[0],
    };
    let err_at = |opts: &IntegrateOptions| -> Result<f64, String> {
        let tr = integrate(&growth, 0.0, &[1.0], 1.0, opts, &[]).map_err(|e| e.to_string())?;
        Ok((tr.x.last().expect("nonempty")[0] - 1f64.exp()).abs())
    };
    let tols = [1e-6, 5e-7, 2.5e-7, 1.25e-7, 6.25e-8];
    let errs: Vec<f64> = tols
        .iter()
        .map(|&t| err_at(&IntegrateOptions::with_tol(t)))
        .collect::<Result<_, _>>()?;
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let order_ok = ratios.iter().all(|&r| r >= 8.0);
    let fixed = |h: f64| err_at(&IntegrateOptions { fixed_step: Some(h), ..IntegrateOptions::default() });
    let fixed_ratio = fixed(0.1)? / fixed(0.05)?;

    let tol = 1e-10;
    let osc = FnSystem {
        dim: 2,
        f: |t: f64, x: &[f64], out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -x[0] + 0.1 * t.sin();
        },
    };
    let opts = IntegrateOptions::with_tol(tol);
    let fwd = integrate(&osc, 0.0, &[1.0, 0.0], 10.0, &opts, &[]).map_err(|e| e.to_string())?;
    let back = integrate(&osc, 10.0, fwd.x.last().expect("nonempty"), 0.0, &opts, &[]).map_err(|e| e.to_string())?;
    let reversal = max_dev(&back.x[0], &[1.0, 0.0]);
    let reversal_ok = back.t_start() == 0.0 && reversal <= 100.0 * tol;

    let qp = oracle::reference_problem(Grids::default());
    let sys = QuadraticSystem::new(&qp, 0.02, 1.0);
    let mut rng = oracle::rng(3);
    let mut residual = 0.0f64;
    let mut events = 0;
    for _ in 0..20 {
        let x = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
        let t0 = rng.random_range(-20.0..20.0);
        let tr = integrate(&sys, t0, &x, t0 + 30.0, &IntegrateOptions::default(), &stop_events())
            .map_err(|e| e.to_string())?;
        for e in &tr.events {
            let level = match e.kind {
                EventKind::WHitsWplus => qp.w(e.t, &e.x).map_err(|e| e.to_string())? - 0.02,
                EventKind::WHitsWminus => qp.w(e.t, &e.x).map_err(|e| e.to_string())? + 0.02,
                _ => qp.v(e.t, &e.x).map_err(|e| e.to_string())? - 1.0,
            };
            residual = residual.max(level.abs());
            events += 1;
        }
    }
    let residual_ok = events > 0 && residual <= 1e-9;
    Ok((
        order_ok && reversal_ok && residual_ok,
        format!(
            "order check {} (endpoint error ratio per tolerance halving {}; fixed-step ratio per step halving {fixed_ratio:.1}); time reversal {reversal:.2e} {}; event residual {residual:.2e} over {events} events {}",
            if order_ok { "pass" } else { "FAIL" },
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", "),
            if reversal_ok { "pass" } else { "FAIL" },
            if residual_ok { "pass" } else { "FAIL" },
        ),
    ))
}
