//! Scalar root finding and minimisation.

/// Golden-section search for a local minimum of `f` on [a, b].
pub fn golden_section_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol * (1.0 + a.abs().max(b.abs())) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Bisection on a bracket with f(a)·f(b) ≤ 0; returns the midpoint of the final bracket.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..400 {
        let m = 0.5 * (a + b);
        if (b - a).abs() <= tol || m == a || m == b {
            return m;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fa < 0.0) == (fm < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Newton's method safeguarded by bisection, for a function that is monotone
/// on [lo, hi] with a sign change. `fdf` returns (f, f').
pub fn safe_newton<F: Fn(f64) -> (f64, f64)>(fdf: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let (flo, _) = fdf(lo);
    let (fhi, _) = fdf(hi);
    if flo == 0.0 {
        return lo;
    }
    if fhi == 0.0 {
        return hi;
    }
    let increasing = fhi > flo;
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = fdf(x);
        if f == 0.0 {
            return x;
        }
        if (f > 0.0) == increasing {
            hi = x;
        } else {
            lo = x;
        }
        let newton = x - f / df;
        let next = if df != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= tol || hi - lo <= tol {
            return next;
        }
        x = next;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let (x, fx) = golden_section_min(|x| (x - 0.3).powi(2) + 1.0, -1.0, 2.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-6 && (fx - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bisect_and_newton_agree_on_cosine_root() {
        let r1 = bisect(|x: f64| x.cos(), 0.0, 3.0, 1e-15);
        let r2 = safe_newton(|x: f64| (x.cos(), -x.sin()), 0.0, 3.0, 1e-15);
        assert!((r1 - std::f64::consts::FRAC_PI_2).abs() < 1e-14);
        assert!((r2 - std::f64::consts::FRAC_PI_2).abs() < 1e-14);
    }
}
