//! Safeguarded Newton iteration for a strictly decreasing function on an open
//! bracket.

use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// `|f(x)| ≤ ftol`.
    Residual,
    /// `|x_t − x_{t−1}| < xtol`.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root<T> {
    pub x: T,
    pub iterations: usize,
    pub stop: StopReason,
    /// `f` at the returned point (as last evaluated).
    pub residual: T,
    /// Number of iterations that fell back to bisection.
    pub bisections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootOptions<T> {
    pub ftol: T,
    pub xtol: T,
    pub max_iter: usize,
}

/// Root of a strictly decreasing `f` on the open interval `(lo, hi)`.
///
/// `eval(x)` returns `(f(x), f'(x))`, or `None` when `x` lies outside the
/// function's domain. Newton steps that leave the current bracket (or land
/// outside the domain) are replaced by the bracket midpoint; every evaluated
/// point shrinks the bracket. Returns `Err(last_iterate)` after `max_iter`
/// iterations without meeting either tolerance.
pub fn decreasing_root<T: Scalar>(
    mut eval: impl FnMut(T) -> Option<(T, T)>,
    mut lo: T,
    mut hi: T,
    start: T,
    opts: &RootOptions<T>,
) -> Result<Root<T>, T> {
    let mut x = start;
    let mut bisections = 0;
    let two = T::of(2.0);
    for it in 1..=opts.max_iter {
        let (f, df) = match eval(x) {
            Some(v) => v,
            None => {
                // outside the domain: the nearer pole is on the side of x
                if x > (lo + hi) / two {
                    hi = x;
                } else {
                    lo = x;
                }
                x = (lo + hi) / two;
                bisections += 1;
                continue;
            }
        };
        if f.abs() <= opts.ftol {
            return Ok(Root { x, iterations: it, stop: StopReason::Residual, residual: f, bisections });
        }
        if f > T::zero() {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - f / df;
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            bisections += 1;
            (lo + hi) / two
        };
        if (next - x).abs() < opts.xtol || next == x {
            let residual = eval(next).map_or(f, |(g, _)| g);
            return Ok(Root { x: next, iterations: it, stop: StopReason::Step, residual, bisections });
        }
        x = next;
    }
    Err(x)
}
