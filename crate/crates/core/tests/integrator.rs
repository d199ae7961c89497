mod oracle;

use proptest::prelude::*;
use vwbound_core::odeint::{
    integrate, Direction, EventKind, EventSpec, FnSystem, IntegrateOptions, QuadraticSystem,
    Termination,
};
use vwbound_core::quadratic::{Grids, QuadraticProblem, Region};

fn saddle(f1: &str, f2: &str) -> QuadraticProblem {
    QuadraticProblem::from_texts(
        2,
        &["1", "0", "0", "1"],
        &["1", "0", "0", "-1"],
        &["1", "0", "0", "-1"],
        &[f1, f2],
        (-40.0, 40.0),
        Region {
            v0: Some(0.02),
            v_star: Some(1.0),
            w_minus: -0.02,
            w_plus: 0.02,
        },
        Grids::default(),
    )
    .unwrap()
}

#[test]
fn linear_flows_match_closed_form() {
    let sys = FnSystem {
        dim: 2,
        f: |_t: f64, x: &[f64], out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -x[0];
        },
    };
    let tr = integrate(&sys, 0.0, &[1.0, 0.0], 20.0, &IntegrateOptions::with_tol(1e-11), &[]).unwrap();
    let x = tr.x.last().unwrap();
    assert!((x[0] - 20f64.cos()).abs() < 1e-8 && (x[1] + 20f64.sin()).abs() < 1e-8, "{x:?}");
    for s in [0.3, 7.1, 13.9] {
        let y = tr.interpolate(s).unwrap();
        assert!((y[0] - s.cos()).abs() < 1e-8, "dense output at {s}");
    }
}

#[test]
fn saddle_exit_time_is_logarithmic() {
    let qp = saddle("0", "0");
    let sys = QuadraticSystem::new(&qp, 0.02, 1.0);
    for u in [1e-3, 0.01, 0.1] {
        let tr = integrate(
            &sys,
            -5.0,
            &[u, 0.0],
            40.0,
            &IntegrateOptions::default(),
            &[EventSpec::stop(EventKind::WHitsWplus)],
        )
        .unwrap();
        assert_eq!(tr.termination, Termination::Stopped(EventKind::WHitsWplus));
        let want = -5.0 + (0.02f64.sqrt() / u).ln();
        assert!((tr.t_end() - want).abs() < 1e-6, "u = {u}: {} vs {want}", tr.t_end());
    }
}

#[test]
fn reference_bounded_solution_stays_put() {
    let qp = oracle::reference_problem(Grids::default());
    let sys = QuadraticSystem::new(&qp, 0.02, 1.0);
    let x0 = oracle::reference_solution(-3.0);
    let tr = integrate(&sys, -3.0, &x0, 3.0, &IntegrateOptions::default(), &[]).unwrap();
    for (t, x) in tr.t.iter().zip(&tr.x) {
        let want = oracle::reference_solution(*t);
        assert!((x[0] - want[0]).abs() < 1e-7 && (x[1] - want[1]).abs() < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn time_reversal(a in -0.3f64..0.3, w in 0.2f64..3.0, span in 0.5f64..6.0, x0 in -1.0f64..1.0) {
        let sys = FnSystem {
            dim: 2,
            f: move |t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = a * x[0] + w * x[1] + 0.1 * t.sin();
                out[1] = -w * x[0] + a * x[1];
            },
        };
        let tol = 1e-10;
        let opts = IntegrateOptions::with_tol(tol);
        let fwd = integrate(&sys, 0.0, &[x0, 0.5], span, &opts, &[]).unwrap();
        let back = integrate(&sys, span, fwd.x.last().unwrap(), 0.0, &opts, &[]).unwrap();
        // Nodes are stored in ascending time.
        let end = &back.x[0];
        prop_assert_eq!(back.t_start(), 0.0);
        let err = ((end[0] - x0).powi(2) + (end[1] - 0.5).powi(2)).sqrt();
        prop_assert!(err <= 100.0 * tol, "error {}", err);
    }

    #[test]
    fn event_residuals(u in -0.14f64..0.14, x2 in -0.1f64..0.1, t0 in -10.0f64..10.0) {
        let qp = saddle("0.1*sin(t)", "0.1*cos(t)");
        let sys = QuadraticSystem::new(&qp, 0.02, 1.0);
        let events = [
            EventSpec::stop(EventKind::WHitsWplus),
            EventSpec::stop(EventKind::WHitsWminus),
            EventSpec { direction: Direction::Any, ..EventSpec::record(EventKind::VHitsV0) },
        ];
        let tr = integrate(&sys, t0, &[u, x2], t0 + 30.0, &IntegrateOptions::default(), &events).unwrap();
        for e in &tr.events {
            let level = match e.kind {
                EventKind::WHitsWplus => qp.w(e.t, &e.x).unwrap() - 0.02,
                EventKind::WHitsWminus => qp.w(e.t, &e.x).unwrap() + 0.02,
                _ => qp.v(e.t, &e.x).unwrap() - 0.02,
            };
            prop_assert!(level.abs() <= 1e-9, "{:?}: {}", e.kind, level);
            prop_assert!((level - e.residual).abs() <= 1e-15);
        }
    }
}
