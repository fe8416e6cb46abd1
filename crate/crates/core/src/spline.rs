//! Cubic smoothing spline with the penalty chosen by generalised
//! cross-validation (Reinsch form, banded solves throughout).

use crate::error::{Error, Result};

/// Natural cubic smoothing spline minimising Σ(yᵢ − g(xᵢ))² + λ∫g''².
#[derive(Debug, Clone)]
pub struct SmoothingSpline {
    origin: f64,
    scale: f64,
    /// Knots mapped to [0, 1].
    knots: Vec<f64>,
    fitted: Vec<f64>,
    /// Second derivatives at the knots (scaled abscissa); zero at both ends.
    curvature: Vec<f64>,
    lambda: f64,
    gcv: f64,
}

/// Banded factorisation B = L·D·Lᵀ of a symmetric pentadiagonal matrix.
struct Penta {
    d: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl Penta {
    /// `b0`, `b1`, `b2` hold the main, first and second diagonals (b1[i] = B[i][i+1]).
    fn factor(b0: &[f64], b1: &[f64], b2: &[f64]) -> Option<Self> {
        let m = b0.len();
        let mut d = vec![0.0; m];
        let mut l1 = vec![0.0; m];
        let mut l2 = vec![0.0; m];
        for i in 0..m {
            if i >= 2 {
                l2[i] = b2[i - 2] / d[i - 2];
            }
            if i >= 1 {
                let mut v = b1[i - 1];
                if i >= 2 {
                    v -= l2[i] * l1[i - 1] * d[i - 2];
                }
                l1[i] = v / d[i - 1];
            }
            let mut di = b0[i];
            if i >= 1 {
                di -= l1[i] * l1[i] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i] * l2[i] * d[i - 2];
            }
            if !(di > 0.0) {
                return None;
            }
            d[i] = di;
        }
        Some(Self { d, l1, l2 })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let m = rhs.len();
        let mut z = rhs.to_vec();
        for i in 0..m {
            if i >= 1 {
                z[i] -= self.l1[i] * z[i - 1];
            }
            if i >= 2 {
                z[i] -= self.l2[i] * z[i - 2];
            }
        }
        for i in 0..m {
            z[i] /= self.d[i];
        }
        for i in (0..m).rev() {
            if i + 1 < m {
                z[i] -= self.l1[i + 1] * z[i + 1];
            }
            if i + 2 < m {
                z[i] -= self.l2[i + 2] * z[i + 2];
            }
        }
        z
    }

    /// Entries of B⁻¹ within the pentadiagonal band (Hutchinson–de Hoog).
    fn inverse_band(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = self.d.len();
        let mut s0 = vec![0.0; m];
        let mut s1 = vec![0.0; m];
        let mut s2 = vec![0.0; m];
        for i in (0..m).rev() {
            let a = if i + 1 < m { self.l1[i + 1] } else { 0.0 };
            let b = if i + 2 < m { self.l2[i + 2] } else { 0.0 };
            if i + 2 < m {
                s2[i] = -a * s1[i + 1] - b * s0[i + 2];
            }
            if i + 1 < m {
                let s_i2_i1 = if i + 2 < m { s1[i + 1] } else { 0.0 };
                s1[i] = -a * s0[i + 1] - b * s_i2_i1;
            }
            s0[i] = 1.0 / self.d[i] - a * s1[i] - b * s2[i];
        }
        (s0, s1, s2)
    }
}

/// Q (n × n−2) stored by column: entries at rows j, j+1, j+2 of column j.
struct Design {
    q: Vec<[f64; 3]>,
    /// R diagonals.
    r0: Vec<f64>,
    r1: Vec<f64>,
    /// QᵀQ diagonals.
    m0: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
}

impl Design {
    fn new(x: &[f64]) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m = n - 2;
        let q: Vec<[f64; 3]> = (0..m)
            .map(|j| [1.0 / h[j], -1.0 / h[j] - 1.0 / h[j + 1], 1.0 / h[j + 1]])
            .collect();
        let r0 = (0..m).map(|j| (h[j] + h[j + 1]) / 3.0).collect();
        let r1 = (0..m.saturating_sub(1)).map(|j| h[j + 1] / 6.0).collect();
        let m0 = q.iter().map(|c| c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).collect();
        let m1 = (0..m.saturating_sub(1))
            .map(|j| q[j][1] * q[j + 1][0] + q[j][2] * q[j + 1][1])
            .collect();
        let m2 = (0..m.saturating_sub(2)).map(|j| q[j][2] * q[j + 2][0]).collect();
        Self { q, r0, r1, m0, m1, m2 }
    }

    fn qt_times(&self, y: &[f64]) -> Vec<f64> {
        self.q
            .iter()
            .enumerate()
            .map(|(j, c)| c[0] * y[j] + c[1] * y[j + 1] + c[2] * y[j + 2])
            .collect()
    }

    fn q_times(&self, g: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (j, c) in self.q.iter().enumerate() {
            out[j] += c[0] * g[j];
            out[j + 1] += c[1] * g[j];
            out[j + 2] += c[2] * g[j];
        }
        out
    }

    /// Fitted values, knot curvatures and tr(A(λ)) for one penalty.
    fn fit(&self, y: &[f64], lambda: f64) -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let n = y.len();
        let m = n - 2;
        let b0: Vec<f64> = (0..m).map(|i| self.r0[i] + lambda * self.m0[i]).collect();
        let b1: Vec<f64> = (0..m.saturating_sub(1))
            .map(|i| self.r1[i] + lambda * self.m1[i])
            .collect();
        let b2: Vec<f64> = self.m2.iter().map(|v| lambda * v).collect();
        let fac = Penta::factor(&b0, &b1, &b2)?;
        let gamma = fac.solve(&self.qt_times(y));
        let correction = self.q_times(&gamma, n);
        let fitted: Vec<f64> = y.iter().zip(&correction).map(|(yi, c)| yi - lambda * c).collect();

        // tr A = n − λ·tr(B⁻¹ QᵀQ)
        let (s0, s1, s2) = fac.inverse_band();
        let mut tr = 0.0;
        for i in 0..m {
            tr += s0[i] * self.m0[i];
            if i + 1 < m {
                tr += 2.0 * s1[i] * self.m1[i];
            }
            if i + 2 < m {
                tr += 2.0 * s2[i] * self.m2[i];
            }
        }
        let trace = n as f64 - lambda * tr;

        let mut curvature = vec![0.0; n];
        curvature[1..n - 1].copy_from_slice(&gamma);
        Some((fitted, curvature, trace))
    }
}

fn gcv_score(y: &[f64], fitted: &[f64], trace: f64) -> f64 {
    let n = y.len() as f64;
    let rss: f64 = y.iter().zip(fitted).map(|(a, b)| (a - b) * (a - b)).sum();
    let denom = 1.0 - trace / n;
    if denom <= 1e-9 {
        return f64::INFINITY;
    }
    rss / n / (denom * denom)
}

impl SmoothingSpline {
    fn prepare(x: &[f64], y: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
        if x.len() != y.len() {
            return Err(Error::InvalidArgument("x and y lengths differ".into()));
        }
        if x.len() < 3 {
            return Err(Error::InvalidArgument("smoothing spline needs at least 3 points".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "spline abscissae must be strictly increasing and ordinates finite".into(),
            ));
        }
        let origin = x[0];
        let scale = x[x.len() - 1] - origin;
        let knots = x.iter().map(|v| (v - origin) / scale).collect();
        Ok((origin, scale, knots))
    }

    /// Fit with a fixed penalty λ (on the abscissa rescaled to [0, 1]).
    pub fn fit(x: &[f64], y: &[f64], lambda: f64) -> Result<Self> {
        let (origin, scale, knots) = Self::prepare(x, y)?;
        let design = Design::new(&knots);
        let (fitted, curvature, trace) = design
            .fit(y, lambda)
            .ok_or_else(|| Error::NumericalIntegrity("spline system not positive definite".into()))?;
        let gcv = gcv_score(y, &fitted, trace);
        Ok(Self {
            origin,
            scale,
            knots,
            fitted,
            curvature,
            lambda,
            gcv,
        })
    }

    /// Fit with λ minimising the GCV score: coarse log-grid scan, then
    /// golden-section refinement in log λ.
    pub fn fit_gcv(x: &[f64], y: &[f64]) -> Result<Self> {
        let (_, _, knots) = Self::prepare(x, y)?;
        let design = Design::new(&knots);
        let score = |log_lambda: f64| {
            design
                .fit(y, 10f64.powf(log_lambda))
                .map(|(f, _, tr)| gcv_score(y, &f, tr))
                .unwrap_or(f64::INFINITY)
        };
        let (lo, hi, steps) = (-14.0, 4.0, 73);
        let grid: Vec<f64> = (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
            .collect();
        let scores: Vec<f64> = grid.iter().map(|&l| score(l)).collect();
        let best = scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty grid");

        let mut log_lambda = grid[best];
        if scores[best].is_finite() && scores[best] > 0.0 {
            let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps - 1)]);
            let ratio = (5f64.sqrt() - 1.0) / 2.0;
            let mut c = b - ratio * (b - a);
            let mut d = a + ratio * (b - a);
            let (mut fc, mut fd) = (score(c), score(d));
            for _ in 0..60 {
                if fc < fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - ratio * (b - a);
                    fc = score(c);
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + ratio * (b - a);
                    fd = score(d);
                }
            }
            let mid = 0.5 * (a + b);
            if score(mid) <= scores[best] {
                log_lambda = mid;
            }
        }
        Self::fit(x, y, 10f64.powf(log_lambda))
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gcv(&self) -> f64 {
        self.gcv
    }

    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    fn locate(&self, u: f64) -> usize {
        let n = self.knots.len();
        match self.knots.binary_search_by(|k| k.total_cmp(&u)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        let u = (x - self.origin) / self.scale;
        let i = self.locate(u);
        let h = self.knots[i + 1] - self.knots[i];
        let (a, b) = (u - self.knots[i], self.knots[i + 1] - u);
        let (g0, g1) = (self.fitted[i], self.fitted[i + 1]);
        let (c0, c1) = (self.curvature[i], self.curvature[i + 1]);
        (a * g1 + b * g0) / h - a * b / 6.0 * ((1.0 + a / h) * c1 + (1.0 + b / h) * c0)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let u = (x - self.origin) / self.scale;
        let i = self.locate(u);
        let h = self.knots[i + 1] - self.knots[i];
        let (a, b) = (u - self.knots[i], self.knots[i + 1] - u);
        let (g0, g1) = (self.fitted[i], self.fitted[i + 1]);
        let (c0, c1) = (self.curvature[i], self.curvature[i + 1]);
        let du = (g1 - g0) / h
            - ((b - a) * ((1.0 + a / h) * c1 + (1.0 + b / h) * c0) + a * b * (c1 - c0) / h) / 6.0;
        du / self.scale
    }
}

/// Fourth-order one-sided difference for y'(x₀) on a uniform grid.
pub fn one_sided_derivative(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 5 || y.len() < 5 {
        return Err(Error::InvalidArgument("five-point stencil needs 5 samples".into()));
    }
    let h = x[1] - x[0];
    Ok((-25.0 * y[0] + 48.0 * y[1] - 36.0 * y[2] + 16.0 * y[3] - 3.0 * y[4]) / (12.0 * h))
}
