//! Cubic interpolating spline with not-a-knot end conditions.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    /// Fit through `(x_i, y_i)`; `x` must be strictly increasing with at least four knots.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n != y.len() {
            return Err(Error::Shape {
                expected: n,
                found: y.len(),
            });
        }
        if n < 4 {
            return Err(Error::Table(format!(
                "spline needs at least 4 knots, got {n}"
            )));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Table("knots must be strictly increasing".into()));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Table("non-finite knot value".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();

        // Unknowns M_1..M_{n-2}; M_0 and M_{n-1} are eliminated with the
        // not-a-knot conditions (continuous third derivative at x_1, x_{n-2}).
        let k = n - 2;
        let mut sub = vec![0.0; k];
        let mut diag = vec![0.0; k];
        let mut sup = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for r in 0..k {
            let i = r + 1;
            sub[r] = h[i - 1];
            diag[r] = 2.0 * (h[i - 1] + h[i]);
            sup[r] = h[i];
            rhs[r] = 6.0 * (d[i] - d[i - 1]);
        }
        let (h0, h1) = (h[0], h[1]);
        diag[0] = 3.0 * h0 + 2.0 * h1 + h0 * h0 / h1;
        sup[0] = h1 - h0 * h0 / h1;
        let (ha, hb) = (h[n - 3], h[n - 2]);
        diag[k - 1] = 2.0 * ha + 3.0 * hb + hb * hb / ha;
        sub[k - 1] = ha - hb * hb / ha;
        let inner = thomas(&sub, &diag, &sup, &rhs);

        let mut m = vec![0.0; n];
        m[1..n - 1].copy_from_slice(&inner);
        m[0] = m[1] * (1.0 + h0 / h1) - m[2] * h0 / h1;
        m[n - 1] = m[n - 2] * (1.0 + hb / ha) - m[n - 3] * hb / ha;
        Ok(Self { x, y, m })
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }
    pub fn values(&self) -> &[f64] {
        &self.y
    }
    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    fn locate(&self, t: f64) -> Result<usize> {
        let (lo, hi) = self.domain();
        if !(t >= lo && t <= hi) {
            return Err(Error::Domain { r: t, lo, hi });
        }
        let i = self.x.partition_point(|&v| v <= t);
        Ok(i.clamp(1, self.x.len() - 1) - 1)
    }

    /// Value, first and second derivative at `t`.
    pub fn eval_all(&self, t: f64) -> Result<(f64, f64, f64)> {
        let i = self.locate(t)?;
        let h = self.x[i + 1] - self.x[i];
        let a = self.x[i + 1] - t;
        let b = t - self.x[i];
        let (mi, mj) = (self.m[i], self.m[i + 1]);
        let ci = self.y[i] / h - mi * h / 6.0;
        let cj = self.y[i + 1] / h - mj * h / 6.0;
        let v = mi * a.powi(3) / (6.0 * h) + mj * b.powi(3) / (6.0 * h) + ci * a + cj * b;
        let d1 = -mi * a * a / (2.0 * h) + mj * b * b / (2.0 * h) - ci + cj;
        let d2 = (mi * a + mj * b) / h;
        Ok((v, d1, d2))
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        self.eval_all(t).map(|v| v.0)
    }
    pub fn derivative(&self, t: f64) -> Result<f64> {
        self.eval_all(t).map(|v| v.1)
    }
}

/// Solve a tridiagonal system; `sub[0]` and `sup[n-1]` are ignored.
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let w = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / w;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / w;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cubic(t: f64) -> f64 {
        0.3 - 1.2 * t + 0.7 * t * t - 0.25 * t * t * t
    }

    #[test]
    fn reproduces_cubics_exactly() {
        // Not-a-knot splines are exact on cubic data, including uneven spacing.
        let x = vec![0.0, 0.3, 0.5, 1.1, 1.4, 2.0, 2.2, 3.0];
        let y: Vec<f64> = x.iter().map(|&t| cubic(t)).collect();
        let s = CubicSpline::new(x, y).unwrap();
        for i in 0..=60 {
            let t = 3.0 * i as f64 / 60.0;
            let (v, d1, d2) = s.eval_all(t).unwrap();
            assert!((v - cubic(t)).abs() < 1e-12);
            assert!((d1 - (-1.2 + 1.4 * t - 0.75 * t * t)).abs() < 1e-11);
            assert!((d2 - (1.4 - 1.5 * t)).abs() < 1e-10);
        }
    }

    #[test]
    fn four_knots_is_the_interpolating_cubic() {
        let x = vec![0.0, 1.0, 1.5, 3.0];
        let y: Vec<f64> = x.iter().map(|&t| cubic(t)).collect();
        let s = CubicSpline::new(x, y).unwrap();
        assert_relative_eq!(s.eval(2.2).unwrap(), cubic(2.2), epsilon = 1e-12);
    }

    #[test]
    fn rejects_extrapolation() {
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let s = CubicSpline::new(x.clone(), x).unwrap();
        assert!(matches!(s.eval(7.5), Err(Error::Domain { .. })));
        assert!(s.eval(7.0).is_ok());
        assert!(s.eval(-1e-9).is_err());
    }

    #[test]
    fn rejects_unsorted_knots() {
        let x = vec![0.0, 1.0, 1.0, 2.0, 3.0];
        assert!(CubicSpline::new(x, vec![0.0; 5]).is_err());
    }

    #[test]
    fn converges_on_smooth_functions() {
        // Fourth-order convergence: halving h cuts the max error by ~16.
        let err = |n: usize| {
            let x: Vec<f64> = (0..n).map(|i| 3.0 * i as f64 / (n - 1) as f64).collect();
            let y: Vec<f64> = x.iter().map(|t| t.sin()).collect();
            let s = CubicSpline::new(x, y).unwrap();
            (0..1000)
                .map(|i| {
                    let t = 3.0 * i as f64 / 999.0;
                    (s.eval(t).unwrap() - t.sin()).abs()
                })
                .fold(0.0, f64::max)
        };
        let order = (err(21) / err(41)).log2();
        assert!(order > 3.5 && order < 4.6, "order {order}");
    }

    proptest! {
        #[test]
        fn interpolates_nodes(ys in proptest::collection::vec(-10.0f64..10.0, 8..30), gap in 0.05f64..2.0) {
            let x: Vec<f64> = (0..ys.len()).map(|i| i as f64 * gap + 0.01 * (i as f64).sin()).collect();
            let s = CubicSpline::new(x.clone(), ys.clone()).unwrap();
            for (xi, yi) in x.iter().zip(&ys) {
                prop_assert!((s.eval(*xi).unwrap() - yi).abs() < 1e-10 * (1.0 + yi.abs()));
            }
        }
    }
}
