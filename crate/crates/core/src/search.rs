//! One-dimensional search: golden section, sign bisection, grid scan.

use crate::error::{Error, Result};

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
    pub iters: usize,
}

/// Golden-section search for a unimodal `f` on [lo, hi]. Stops when the
/// bracket is narrower than `tol` (absolute). Endpoints are compared at the
/// end so boundary minima are returned exactly.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64, max_iters: usize) -> Minimum {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iters = 0;
    while (b - a) > tol && iters < max_iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        iters += 1;
    }
    let mut best = if fc <= fd { Minimum { x: c, fx: fc, iters } } else { Minimum { x: d, fx: fd, iters } };
    for x in [lo, hi] {
        let fx = f(x);
        if fx < best.fx {
            best = Minimum { x, fx, iters };
        }
    }
    best
}

/// Uniform grid of `n` points on [lo, hi] (inclusive), returns the best.
pub fn grid_argmin<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> Minimum {
    assert!(n >= 2);
    let h = (hi - lo) / (n - 1) as f64;
    let mut best = Minimum { x: lo, fx: f(lo), iters: n };
    for i in 1..n {
        let x = if i == n - 1 { hi } else { lo + h * i as f64 };
        let fx = f(x);
        if fx < best.fx {
            best = Minimum { x, fx, iters: n };
        }
    }
    best
}

/// Grid scan to locate the basin, then golden section inside the two
/// neighbouring cells. Tolerates mild non-unimodality of `f`.
pub fn robust_minimize<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize, tol: f64) -> Minimum {
    let g = grid_argmin(&f, lo, hi, n);
    let h = (hi - lo) / (n - 1) as f64;
    let a = (g.x - h).max(lo);
    let b = (g.x + h).min(hi);
    let m = golden_section(&f, a, b, tol, 500);
    if m.fx <= g.fx {
        m
    } else {
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub iters: usize,
}

/// Bisection on the sign of `g` over [lo, hi] where g(lo) < 0 < g(hi).
/// Halves until (b−a)/2 < tol; errors after `max_iters` halvings.
pub fn bisect_sign<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64, tol: f64, max_iters: usize) -> Result<Root> {
    let (mut a, mut b) = (lo, hi);
    let mut iters = 0;
    loop {
        if (b - a) / 2.0 < tol {
            return Ok(Root { x: 0.5 * (a + b), iters });
        }
        if iters >= max_iters {
            return Err(Error::MaxItersExceeded { lo: a, hi: b });
        }
        let m = 0.5 * (a + b);
        if g(m) < 0.0 {
            a = m;
        } else {
            b = m;
        }
        iters += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_vertex() {
        let m = golden_section(|x| (x - 0.3).powi(2), -1.0, 2.0, 1e-10, 200);
        assert!((m.x - 0.3).abs() < 1e-9);
    }

    #[test]
    fn golden_returns_boundary_minimum() {
        let m = golden_section(|x| x, 1.0, 2.0, 1e-10, 200);
        assert_eq!(m.x, 1.0);
        let m = golden_section(|x| -x, 1.0, 2.0, 1e-10, 200);
        assert_eq!(m.x, 2.0);
    }

    #[test]
    fn bisection_halving_contract() {
        let r = bisect_sign(|x| x - 0.3, 0.0, 1.0, 0.5, 10).unwrap();
        assert!(r.iters <= 2);
        let r = bisect_sign(|x| x - 0.3, 0.0, 1.0, 1e-12, 100).unwrap();
        assert!((r.x - 0.3).abs() < 1e-12);
        assert!(matches!(
            bisect_sign(|x| x - 0.3, 0.0, 1.0, 1e-12, 5),
            Err(Error::MaxItersExceeded { .. })
        ));
    }

    #[test]
    fn robust_handles_flat_start() {
        let f = |x: f64| if x < 0.5 { 1.0 } else { (x - 0.8).powi(2) };
        let m = robust_minimize(f, 0.0, 1.0, 50, 1e-10);
        assert!((m.x - 0.8).abs() < 1e-8);
    }
}
