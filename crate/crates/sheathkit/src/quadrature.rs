//! Quadrature rules and Chebyshev approximation on bounded intervals.
//!
//! Adaptive Gauss–Kronrod (7/15) handles the smooth moment integrals of the
//! injection profile; Gauss–Jacobi handles inverse-square-root endpoint
//! singularities; Chebyshev interpolants cache expensive smooth functions of
//! the potential.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Kronrod-15 panel: (integral, error estimate).
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = hw * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * hw, ((kron - gauss) * hw).abs())
}

/// Tolerances for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct QuadTol {
    pub abs: f64,
    pub rel: f64,
    pub max_panels: usize,
}

impl Default for QuadTol {
    fn default() -> Self {
        Self {
            abs: 1e-13,
            rel: 1e-12,
            max_panels: 2000,
        }
    }
}

/// Globally adaptive Gauss–Kronrod: repeatedly bisects the panel with the
/// largest error estimate until the summed estimate meets the tolerance.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: QuadTol) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut panels = vec![(a, b, gk15(&f, a, b))];
    loop {
        let (value, error) = panels.iter().fold((0.0, 0.0), |(v, e), p| (v + p.2 .0, e + p.2 .1));
        if error <= tol.abs.max(tol.rel * value.abs()) {
            return Ok(value);
        }
        if panels.len() >= tol.max_panels {
            return Err(Error::QuadratureFailure { a, b, error });
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (lo, hi, _) = panels.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Err(Error::QuadratureFailure { a, b, error });
        }
        panels.push((lo, mid, gk15(&f, lo, mid)));
        panels.push((mid, hi, gk15(&f, mid, hi)));
    }
}

/// Integrates over consecutive breakpoints, adapting on each piece.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: F, breaks: &[f64], tol: QuadTol) -> Result<f64> {
    let mut total = 0.0;
    for w in breaks.windows(2) {
        total += integrate(&f, w[0], w[1], tol)?;
    }
    Ok(total)
}

/// Gauss–Jacobi rule on [-1, 1] for the weight (1 - x)^a (1 + x)^b.
#[derive(Debug, Clone)]
pub struct GaussJacobi {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussJacobi {
    /// Newton iteration on the Jacobi three-term recurrence; nodes come out
    /// in decreasing order. Requires a, b > -1.
    // 6.28 below is a fitted constant of the starting guesses, not 2π.
    #[allow(clippy::approx_constant)]
    pub fn new(n: usize, a: f64, b: f64) -> Self {
        use statrs::function::gamma::ln_gamma;
        assert!(n >= 4 && a > -1.0 && b > -1.0);
        let nf = n as f64;
        let ab = a + b;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut z = 0.0_f64;
        for i in 0..n {
            z = match i {
                0 => {
                    let an = a / nf;
                    let bn = b / nf;
                    let r1 = (1.0 + a) * (2.78 / (4.0 + nf * nf) + 0.768 * an / nf);
                    let r2 = 1.0 + 1.48 * an + 0.96 * bn + 0.452 * an * an + 0.83 * an * bn;
                    1.0 - r1 / r2
                }
                1 => {
                    let r1 = (4.1 + a) / ((1.0 + a) * (1.0 + 0.156 * a));
                    let r2 = 1.0 + 0.06 * (nf - 8.0) * (1.0 + 0.12 * a) / nf;
                    let r3 = 1.0 + 0.012 * b * (1.0 + 0.25 * a.abs()) / nf;
                    z - (1.0 - z) * r1 * r2 * r3
                }
                2 => {
                    let r1 = (1.67 + 0.28 * a) / (1.0 + 0.37 * a);
                    let r2 = 1.0 + 0.22 * (nf - 8.0) / nf;
                    let r3 = 1.0 + 8.0 * b / ((6.28 + b) * nf * nf);
                    z - (x[0] - z) * r1 * r2 * r3
                }
                _ if i == n - 2 => {
                    let r1 = (1.0 + 0.235 * b) / (0.766 + 0.119 * b);
                    let r2 = 1.0 / (1.0 + 0.639 * (nf - 4.0) / (1.0 + 0.71 * (nf - 4.0)));
                    let r3 = 1.0 / (1.0 + 20.0 * a / ((7.5 + a) * nf * nf));
                    z + (z - x[n - 4]) * r1 * r2 * r3
                }
                _ if i == n - 1 => {
                    let r1 = (1.0 + 0.37 * b) / (1.67 + 0.28 * b);
                    let r2 = 1.0 / (1.0 + 0.22 * (nf - 8.0) / nf);
                    let r3 = 1.0 / (1.0 + 8.0 * a / ((6.28 + a) * nf * nf));
                    z + (z - x[n - 3]) * r1 * r2 * r3
                }
                _ => 3.0 * x[i - 1] - 3.0 * x[i - 2] + x[i - 3],
            };
            let mut pp = 1.0;
            let mut p2 = 1.0;
            let mut temp = 2.0 + ab;
            for _ in 0..100 {
                temp = 2.0 + ab;
                let mut p1 = (a - b + temp * z) / 2.0;
                p2 = 1.0;
                for j in 2..=n {
                    let jf = j as f64;
                    let p3 = p2;
                    p2 = p1;
                    temp = 2.0 * jf + ab;
                    let aa = 2.0 * jf * (jf + ab) * (temp - 2.0);
                    let bb = (temp - 1.0) * (a * a - b * b + temp * (temp - 2.0) * z);
                    let cc = 2.0 * (jf - 1.0 + a) * (jf - 1.0 + b) * temp;
                    p1 = (bb * p2 - cc * p3) / aa;
                }
                pp = (nf * (a - b - temp * z) * p1 + 2.0 * (nf + a) * (nf + b) * p2) / (temp * (1.0 - z * z));
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            x[i] = z;
            w[i] = (ln_gamma(a + nf) + ln_gamma(b + nf) - ln_gamma(nf + 1.0) - ln_gamma(nf + ab + 1.0)).exp()
                * temp
                * 2f64.powf(ab)
                / (pp * p2);
        }
        // The weights share one gamma-function prefactor; fixing it through the
        // exactly known total mass removes the large-argument lgamma error.
        use statrs::function::gamma::gamma;
        let mass = 2f64.powf(ab + 1.0) * gamma(a + 1.0) * gamma(b + 1.0) / gamma(ab + 2.0);
        let total: f64 = w.iter().sum();
        for wi in &mut w {
            *wi *= mass / total;
        }
        Self { nodes: x, weights: w }
    }

    /// Σ w_j g(x_j), approximating ∫_{-1}^{1} (1-x)^a (1+x)^b g(x) dx.
    pub fn apply<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * g(x)).sum()
    }
}

/// Chebyshev interpolant of a smooth function on [a, b].
#[derive(Debug, Clone)]
pub struct Chebyshev {
    a: f64,
    b: f64,
    coeffs: Vec<f64>,
}

impl Chebyshev {
    /// Interpolates at `n` Chebyshev points of the first kind.
    pub fn fit<F: FnMut(f64) -> Result<f64>>(mut f: F, a: f64, b: f64, n: usize) -> Result<Self> {
        let nf = n as f64;
        let mut values = Vec::with_capacity(n);
        for k in 0..n {
            let t = (std::f64::consts::PI * (k as f64 + 0.5) / nf).cos();
            values.push(f(0.5 * (a + b) + 0.5 * (b - a) * t)?);
        }
        let coeffs = (0..n)
            .map(|j| {
                let s: f64 = values
                    .iter()
                    .enumerate()
                    .map(|(k, fk)| fk * (std::f64::consts::PI * j as f64 * (k as f64 + 0.5) / nf).cos())
                    .sum();
                2.0 * s / nf
            })
            .collect();
        Ok(Self { a, b, coeffs })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (2.0 * x - self.a - self.b) / (self.b - self.a);
        let (mut b1, mut b2) = (0.0, 0.0);
        for &c in self.coeffs.iter().skip(1).rev() {
            let b0 = 2.0 * t * b1 - b2 + c;
            b2 = b1;
            b1 = b0;
        }
        t * b1 - b2 + 0.5 * self.coeffs[0]
    }

    /// Magnitude of the trailing coefficients, a proxy for truncation error.
    pub fn tail(&self) -> f64 {
        self.coeffs.iter().rev().take(4).map(|c| c.abs()).fold(0.0, f64::max)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a, self.b)
    }
}
