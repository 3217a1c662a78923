//! Akima piecewise-cubic interpolation.

use crate::error::{Error, Result};

/// Akima interpolant with slopes precomputed at construction.
#[derive(Clone, Debug)]
pub struct Akima {
    x: Vec<f64>,
    y: Vec<f64>,
    slopes: Vec<f64>,
}

impl Akima {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Config(format!(
                "akima: {} positions but {} values",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::Config("akima: at least 2 nodes required".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "akima: node positions must be strictly increasing".into(),
            ));
        }
        if y.iter().chain(x).any(|v| !v.is_finite()) {
            return Err(Error::Config("akima: nodes must be finite".into()));
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            slopes: slopes(x, y),
        })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    pub fn eval(&self, query: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(query >= lo && query <= hi) {
            return Err(Error::Range { query, lo, hi });
        }
        // index of the interval [x_k, x_{k+1}] holding the query
        let k = self
            .x
            .partition_point(|&p| p <= query)
            .saturating_sub(1)
            .min(self.x.len() - 2);
        let h = self.x[k + 1] - self.x[k];
        let t = (query - self.x[k]) / h;
        let (y0, y1) = (self.y[k], self.y[k + 1]);
        let (s0, s1) = (self.slopes[k] * h, self.slopes[k + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        Ok((2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * s0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * s1)
    }
}

fn slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let secants: Vec<f64> = x
        .windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (ys[1] - ys[0]) / (xs[1] - xs[0]))
        .collect();
    if n == 2 {
        return vec![secants[0]; 2];
    }
    // two extrapolated secants on each side
    let mut m = Vec::with_capacity(n + 3);
    let before1 = 2.0 * secants[0] - secants[1];
    let before2 = 2.0 * before1 - secants[0];
    let after1 = 2.0 * secants[n - 2] - secants[n - 3];
    let after2 = 2.0 * after1 - secants[n - 2];
    m.push(before2);
    m.push(before1);
    m.extend_from_slice(&secants);
    m.push(after1);
    m.push(after2);

    (0..n)
        .map(|i| {
            // m[i + 2] is the secant to the right of node i
            let (dm2, dm1, d0, d1) = (m[i], m[i + 1], m[i + 2], m[i + 3]);
            let w_left = (d1 - d0).abs();
            let w_right = (dm1 - dm2).abs();
            if w_left + w_right == 0.0 {
                0.5 * (dm1 + d0)
            } else {
                (w_left * dm1 + w_right * d0) / (w_left + w_right)
            }
        })
        .collect()
}

/// One-shot evaluation of the Akima interpolant through the given nodes.
pub fn akima_interpolate(node_positions: &[f64], node_values: &[f64], query: f64) -> Result<f64> {
    Akima::new(node_positions, node_values)?.eval(query)
}
