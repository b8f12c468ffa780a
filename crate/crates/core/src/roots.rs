//! Bracketed scalar root finding (Brent's method) for the M-step score
//! equations.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Finds a root of `f` in `[a, b]`, where `f(a)` and `f(b)` have opposite
/// signs (or one of them is zero). Returns `None` without a sign change.
///
/// Stops when `|f(x)| <= ftol` or the bracket shrinks to a few ulps.
pub fn brent<F>(mut f: F, mut a: f64, mut b: f64, ftol: f64, max_iter: usize) -> Option<Root>
where
    F: FnMut(f64) -> f64,
{
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Some(Root { x: a, fx: fa, iterations: 0, converged: true });
    }
    if fb == 0.0 {
        return Some(Root { x: b, fx: fb, iterations: 0, converged: true });
    }
    if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() {
        return None;
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut bisected = true;

    for it in 1..=max_iter {
        if fb.abs() <= ftol {
            return Some(Root { x: b, fx: fb, iterations: it - 1, converged: true });
        }
        let xtol = 4.0 * f64::EPSILON * b.abs().max(f64::MIN_POSITIVE);
        if (b - a).abs() <= xtol {
            return Some(Root { x: b, fx: fb, iterations: it - 1, converged: true });
        }

        let mut s = if fa != fc && fb != fc {
            // inverse quadratic interpolation
            a * fb * fc / ((fa - fb) * (fa - fc))
                + b * fa * fc / ((fb - fa) * (fb - fc))
                + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            b - fb * (b - a) / (fb - fa)
        };

        let lo = (3.0 * a + b) / 4.0;
        let between = if lo < b { s > lo && s < b } else { s > b && s < lo };
        let reject = !between
            || (bisected && (s - b).abs() >= (b - c).abs() / 2.0)
            || (!bisected && (s - b).abs() >= (c - d).abs() / 2.0)
            || (bisected && (b - c).abs() < xtol)
            || (!bisected && (c - d).abs() < xtol)
            || !s.is_finite();
        if reject {
            s = 0.5 * (a + b);
            bisected = true;
        } else {
            bisected = false;
        }

        let fs = f(s);
        d = c;
        c = b;
        fc = fb;
        if fa.signum() != fs.signum() {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
    }
    Some(Root { x: b, fx: fb, iterations: max_iter, converged: fb.abs() <= ftol })
}
