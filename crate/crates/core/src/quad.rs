//! Adaptive Simpson quadrature.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadError {
    #[error("integrand is not finite at {at}")]
    NonFinite { at: f64 },
    #[error("interval cap of {cap} subintervals reached")]
    IntervalCap { cap: usize },
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`, splitting into at
/// most `max_intervals` subintervals.
pub fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    max_intervals: usize,
) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    let eval = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(QuadError::NonFinite { at: x })
        }
    };
    let simpson = |a: f64, fa: f64, _m: f64, fm: f64, b: f64, fb: f64| (b - a) / 6.0 * (fa + 4.0 * fm + fb);

    struct Panel {
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    }

    let fa = eval(a)?;
    let fb = eval(b)?;
    let m = 0.5 * (a + b);
    let fm = eval(m)?;
    let mut stack = vec![Panel {
        a,
        b,
        fa,
        fm,
        fb,
        whole: simpson(a, fa, m, fm, b, fb),
        tol,
        depth: 0,
    }];
    let mut total = 0.0;
    let mut comp = 0.0;
    let mut intervals = 1usize;
    while let Some(p) = stack.pop() {
        let m = 0.5 * (p.a + p.b);
        let lm = 0.5 * (p.a + m);
        let rm = 0.5 * (m + p.b);
        let flm = eval(lm)?;
        let frm = eval(rm)?;
        let left = simpson(p.a, p.fa, lm, flm, m, p.fm);
        let right = simpson(m, p.fm, rm, frm, p.b, p.fb);
        let delta = left + right - p.whole;
        if delta.abs() <= 15.0 * p.tol || p.depth >= 60 || (m - p.a).abs() <= f64::EPSILON * m.abs() {
            // Kahan-compensated accumulation of the Richardson-corrected panel.
            let y = left + right + delta / 15.0 - comp;
            let s = total + y;
            comp = (s - total) - y;
            total = s;
            continue;
        }
        intervals += 1;
        if intervals > max_intervals {
            return Err(QuadError::IntervalCap { cap: max_intervals });
        }
        stack.push(Panel {
            a: m,
            b: p.b,
            fa: p.fm,
            fm: frm,
            fb: p.fb,
            whole: right,
            tol: 0.5 * p.tol,
            depth: p.depth + 1,
        });
        stack.push(Panel {
            a: p.a,
            b: m,
            fa: p.fa,
            fm: flm,
            fb: p.fm,
            whole: left,
            tol: 0.5 * p.tol,
            depth: p.depth + 1,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_transcendental() {
        let v = adaptive_simpson(&|x| x * x, 0.0, 3.0, 1e-12, 1000).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
        let v = adaptive_simpson(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-12, 100_000).unwrap();
        assert!((v - 2.0).abs() < 1e-11);
        let v = adaptive_simpson(&|x: f64| x.exp(), 1.0, 0.0, 1e-12, 100_000).unwrap();
        assert!((v + (1f64.exp() - 1.0)).abs() < 1e-11);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            adaptive_simpson(&|x: f64| 1.0 / x, 0.0, 1.0, 1e-10, 100),
            Err(QuadError::NonFinite { .. })
        ));
        assert!(matches!(
            adaptive_simpson(&|x: f64| (50.0 * x).sin(), 0.0, 10.0, 1e-14, 4),
            Err(QuadError::IntervalCap { cap: 4 })
        ));
    }
}
