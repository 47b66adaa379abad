//! Shape-preserving 1D interpolation.

use crate::error::{invalid, Result};

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Butland slopes).
///
/// Strictly increasing data give an interpolant with nonnegative derivative
/// everywhere. Outside the knot range the interpolant continues linearly with
/// the end slopes; callers that care about the range check [`Self::domain`].
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
    /// Running integral of the interpolant from x[0] to each knot.
    cum: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(invalid("knots", "need at least two (x, y) pairs"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("knots", "abscissae must be strictly increasing"));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                let (d0, d1) = (delta[k - 1], delta[k]);
                d[k] = if d0 * d1 <= 0.0 {
                    0.0
                } else {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    (w1 + w2) / (w1 / d0 + w2 / d1)
                };
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        let mut cum = vec![0.0; n];
        for k in 0..n - 1 {
            cum[k + 1] = cum[k] + h[k] * (y[k] + y[k + 1]) / 2.0 + h[k] * h[k] * (d[k] - d[k + 1]) / 12.0;
        }
        Ok(Self { x, y, d, cum })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    fn locate(&self, s: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&xk| xk <= s) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    pub fn value(&self, s: f64) -> f64 {
        let (lo, hi) = self.domain();
        let n = self.x.len();
        if s < lo {
            return self.y[0] + self.d[0] * (s - lo);
        }
        if s > hi {
            return self.y[n - 1] + self.d[n - 1] * (s - hi);
        }
        let k = self.locate(s);
        let h = self.x[k + 1] - self.x[k];
        let t = (s - self.x[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        self.y[k] * (2.0 * t3 - 3.0 * t2 + 1.0)
            + h * self.d[k] * (t3 - 2.0 * t2 + t)
            + self.y[k + 1] * (-2.0 * t3 + 3.0 * t2)
            + h * self.d[k + 1] * (t3 - t2)
    }

    pub fn derivative(&self, s: f64) -> f64 {
        let (lo, hi) = self.domain();
        if s < lo {
            return self.d[0];
        }
        if s > hi {
            return self.d[self.d.len() - 1];
        }
        let k = self.locate(s);
        let h = self.x[k + 1] - self.x[k];
        let t = (s - self.x[k]) / h;
        let t2 = t * t;
        (self.y[k] * (6.0 * t2 - 6.0 * t) + self.y[k + 1] * (-6.0 * t2 + 6.0 * t)) / h
            + self.d[k] * (3.0 * t2 - 4.0 * t + 1.0)
            + self.d[k + 1] * (3.0 * t2 - 2.0 * t)
    }

    /// ∫ from the first knot to `s` (exact for the cubic pieces).
    pub fn integral_from_start(&self, s: f64) -> f64 {
        let (lo, hi) = self.domain();
        let n = self.x.len();
        if s < lo {
            let ds = s - lo;
            return self.y[0] * ds + 0.5 * self.d[0] * ds * ds;
        }
        if s > hi {
            let ds = s - hi;
            return self.cum[n - 1] + self.y[n - 1] * ds + 0.5 * self.d[n - 1] * ds * ds;
        }
        let k = self.locate(s);
        let h = self.x[k + 1] - self.x[k];
        let t = (s - self.x[k]) / h;
        let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
        self.cum[k]
            + h * (self.y[k] * (t4 / 2.0 - t3 + t)
                + h * self.d[k] * (t4 / 4.0 - 2.0 * t3 / 3.0 + t2 / 2.0)
                + self.y[k + 1] * (-t4 / 2.0 + t3)
                + h * self.d[k + 1] * (t4 / 4.0 - t3 / 3.0))
    }
}

impl MonotoneCubic {
    /// Exact max of the derivative on [lo, hi]: it is quadratic on each cell
    /// and constant outside the knot range.
    pub fn max_derivative(&self, lo: f64, hi: f64) -> f64 {
        let mut best = self.derivative(lo).max(self.derivative(hi));
        let n = self.x.len();
        for k in 0..n - 1 {
            let (a, b) = (self.x[k], self.x[k + 1]);
            if b < lo || a > hi {
                continue;
            }
            let (d0, dm, d1) = (self.derivative(a), self.derivative(0.5 * (a + b)), self.derivative(b));
            // Vertex of the parabola through the three samples, in t ∈ [0, 1].
            let curv = 2.0 * (d0 - 2.0 * dm + d1);
            if curv < 0.0 {
                let t = (3.0 * d0 - 4.0 * dm + d1) / (2.0 * curv);
                let s = a + t * (b - a);
                if (0.0..=1.0).contains(&t) && s >= lo && s <= hi {
                    best = best.max(self.derivative(s));
                }
            }
            for s in [a, b] {
                if s >= lo && s <= hi {
                    best = best.max(self.derivative(s));
                }
            }
        }
        best
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, QuadTol};

    fn exp_table() -> MonotoneCubic {
        let x: Vec<f64> = (0..=40).map(|k| -4.0 + 0.1 * k as f64).collect();
        let y = x.iter().map(|s| s.exp()).collect();
        MonotoneCubic::new(x, y).unwrap()
    }

    #[test]
    fn interpolates_knots_and_tracks_smooth_data() {
        let m = exp_table();
        assert_eq!(m.value(-4.0), (-4.0f64).exp());
        assert!((m.value(-1.234) - (-1.234f64).exp()).abs() < 1e-4);
        assert!((m.derivative(-1.234) - (-1.234f64).exp()).abs() < 5e-3);
    }

    #[test]
    fn derivative_is_nonnegative_for_increasing_data() {
        let x = vec![0.0, 1.0, 1.1, 3.0, 3.05, 6.0];
        let y = vec![0.0, 0.01, 2.0, 2.1, 5.0, 5.0001];
        let m = MonotoneCubic::new(x, y).unwrap();
        for k in 0..=600 {
            assert!(m.derivative(0.01 * k as f64) >= -1e-14);
        }
    }

    #[test]
    fn max_derivative_beats_dense_sampling() {
        let m = exp_table();
        for &(lo, hi) in &[(-3.0, -1.05), (-4.5, 0.3), (-2.02, -2.01)] {
            let dense = (0..=20_000)
                .map(|k| m.derivative(lo + (hi - lo) * k as f64 / 20_000.0))
                .fold(f64::NEG_INFINITY, f64::max);
            let exact = m.max_derivative(lo, hi);
            assert!(exact >= dense - 1e-14 && exact - dense < 1e-6);
        }
    }

    #[test]
    fn integral_matches_quadrature_of_interpolant() {
        let m = exp_table();
        for &s in &[-3.95, -2.0, -0.33, 0.0] {
            let q = integrate(|u| m.value(u), -4.0, s, QuadTol::default()).unwrap();
            assert!((m.integral_from_start(s) - q).abs() < 1e-12);
        }
    }
}
