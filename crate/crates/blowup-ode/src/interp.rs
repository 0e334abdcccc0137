//! Monotone cubic Hermite interpolation (Fritsch–Carlson).

/// Monotonicity-preserving cubic through strictly increasing `xs`.
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    tangents: Vec<f64>,
}

impl MonotoneCubic {
    /// `xs` must be strictly increasing with at least 2 points.
    pub fn new(xs: &[f64], ys: &[f64]) -> Option<MonotoneCubic> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return None;
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return None;
        }
        let delta: Vec<f64> = (0..n - 1)
            .map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]))
            .collect();
        let mut t = vec![0.0; n];
        t[0] = delta[0];
        t[n - 1] = delta[n - 2];
        for i in 1..n - 1 {
            t[i] = 0.5 * (delta[i - 1] + delta[i]);
        }
        // Fritsch-Carlson limiting keeps the interpolant monotone per segment.
        for i in 0..n - 1 {
            if delta[i].abs() < 1e-300 {
                t[i] = 0.0;
                t[i + 1] = 0.0;
            } else {
                let alpha = t[i] / delta[i];
                let beta = t[i + 1] / delta[i];
                let r2 = alpha * alpha + beta * beta;
                if r2 > 9.0 {
                    let tau = 3.0 / r2.sqrt();
                    t[i] = tau * alpha * delta[i];
                    t[i + 1] = tau * beta * delta[i];
                }
            }
        }
        Some(MonotoneCubic {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            tangents: t,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    /// Evaluate inside `[x_min, x_max]`; `None` outside.
    pub fn eval(&self, x: f64) -> Option<f64> {
        if x < self.x_min() || x > self.x_max() {
            return None;
        }
        let n = self.xs.len();
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.xs[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let h = self.xs[hi] - self.xs[lo];
        let s = (x - self.xs[lo]) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        Some(
            h00 * self.ys[lo]
                + h10 * h * self.tangents[lo]
                + h01 * self.ys[hi]
                + h11 * h * self.tangents[hi],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_nodes_exactly() {
        let xs = [0.0, 0.5, 1.2, 2.0];
        let ys = [1.0, 2.0, 2.5, 7.0];
        let c = MonotoneCubic::new(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(ys.iter()) {
            assert!((c.eval(*x).unwrap() - y).abs() < 1e-14);
        }
    }

    #[test]
    fn stays_monotone_on_monotone_data() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 / (1.0 - 0.9 * x)).collect();
        let c = MonotoneCubic::new(&xs, &ys).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=200 {
            let x = i as f64 / 200.0;
            let v = c.eval(x).unwrap();
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn rejects_non_increasing_grid() {
        assert!(MonotoneCubic::new(&[0.0, 0.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
    }
}
