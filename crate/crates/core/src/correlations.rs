//! Translation-averaged two-point spin correlations on the periodic lattice.
//!
//! The connected correlation at displacement `(dx, dy)` is
//!
//! ```text
//! G(dx, dy) = (1/N) * sum_{x,y} [ <s(x,y) s(x+dx,y+dy)> - <s(x,y)> <s(x+dx,y+dy)> ]
//! ```
//!
//! with all coordinates wrapped periodically and `N = L*L`. The same table
//! type is filled three ways: exactly from an enumerated distribution, from
//! Monte Carlo samples, and from model-generated samples.

use serde::{Deserialize, Serialize};

/// `G` on the torus of displacements; `values[dy * side + dx]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    side: usize,
    values: Vec<f64>,
}

impl CorrelationTable {
    pub fn from_values(side: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), side * side);
        Self { side, values }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Correlation at signed displacement `(dx, dy)`, wrapped periodically.
    pub fn g(&self, dx: i64, dy: i64) -> f64 {
        let l = self.side as i64;
        let x = dx.rem_euclid(l) as usize;
        let y = dy.rem_euclid(l) as usize;
        self.values[y * self.side + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest asymmetry between `G(dx, dy)` and `G(dy, dx)`.
    pub fn max_transpose_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for dy in 0..self.side {
            for dx in 0..self.side {
                let a = self.values[dy * self.side + dx];
                let b = self.values[dx * self.side + dy];
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// Streaming estimator: push row-major ±1 configurations, then read the table.
#[derive(Debug, Clone)]
pub struct CorrelationAccumulator {
    side: usize,
    n: usize,
    site_sum: Vec<f64>,
    pair_sum: Vec<f64>,
    raw_sum: Vec<f64>,
    raw_sq_sum: Vec<f64>,
}

impl CorrelationAccumulator {
    pub fn new(side: usize) -> Self {
        let n_sites = side * side;
        Self {
            side,
            n: 0,
            site_sum: vec![0.0; n_sites],
            pair_sum: vec![0.0; n_sites],
            raw_sum: vec![0.0; n_sites],
            raw_sq_sum: vec![0.0; n_sites],
        }
    }

    /// Accumulate one configuration (`spins.len() == side * side`, entries ±1).
    pub fn push(&mut self, spins: &[i8]) {
        let l = self.side;
        let n_sites = l * l;
        assert_eq!(spins.len(), n_sites);
        self.n += 1;
        for (r, &s) in spins.iter().enumerate() {
            self.site_sum[r] += s as f64;
        }
        for dy in 0..l {
            for dx in 0..l {
                let mut acc = 0i64;
                for y in 0..l {
                    let y2 = (y + dy) % l;
                    let row = y * l;
                    let row2 = y2 * l;
                    for x in 0..l {
                        let x2 = (x + dx) % l;
                        acc += (spins[row + x] * spins[row2 + x2]) as i64;
                    }
                }
                let raw = acc as f64 / n_sites as f64;
                let d = dy * l + dx;
                self.pair_sum[d] += acc as f64;
                self.raw_sum[d] += raw;
                self.raw_sq_sum[d] += raw * raw;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Connected correlation table over all accumulated samples.
    pub fn table(&self) -> CorrelationTable {
        assert!(self.n > 0, "no samples accumulated");
        let l = self.side;
        let n_sites = l * l;
        let n = self.n as f64;
        let means: Vec<f64> = self.site_sum.iter().map(|&s| s / n).collect();
        let mut values = vec![0.0; n_sites];
        for dy in 0..l {
            for dx in 0..l {
                let d = dy * l + dx;
                let raw = self.pair_sum[d] / (n * n_sites as f64);
                let mut mean_prod = 0.0;
                for y in 0..l {
                    let y2 = (y + dy) % l;
                    for x in 0..l {
                        let x2 = (x + dx) % l;
                        mean_prod += means[y * l + x] * means[y2 * l + x2];
                    }
                }
                values[d] = raw - mean_prod / n_sites as f64;
            }
        }
        CorrelationTable::from_values(l, values)
    }

    /// Standard error of the raw (unsubtracted) correlation at `(dx, dy)`,
    /// treating samples as independent.
    pub fn raw_standard_error(&self, dx: usize, dy: usize) -> f64 {
        assert!(self.n > 1, "need at least two samples");
        let d = dy * self.side + dx;
        let n = self.n as f64;
        let mean = self.raw_sum[d] / n;
        let var = (self.raw_sq_sum[d] / n - mean * mean).max(0.0) * n / (n - 1.0);
        (var / n).sqrt()
    }

    /// Mean per-site magnetization over all accumulated samples.
    pub fn mean_site_magnetization(&self) -> f64 {
        assert!(self.n > 0);
        let n_sites = (self.side * self.side) as f64;
        self.site_sum.iter().sum::<f64>() / (self.n as f64 * n_sites)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_up_sample_has_zero_connected_correlation() {
        let mut acc = CorrelationAccumulator::new(4);
        acc.push(&[1i8; 16]);
        acc.push(&[1i8; 16]);
        let t = acc.table();
        for &v in t.values() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn g00_matches_site_variance_identity() {
        // G(0,0) = 1 - (1/N) sum_r <s_r>^2 because s_r^2 = 1.
        let mut acc = CorrelationAccumulator::new(2);
        acc.push(&[1, -1, 1, 1]);
        acc.push(&[1, 1, -1, 1]);
        acc.push(&[-1, 1, 1, -1]);
        let t = acc.table();
        let means = [
            (1.0 + 1.0 - 1.0) / 3.0,
            (-1.0 + 1.0 + 1.0) / 3.0,
            (1.0 - 1.0 + 1.0) / 3.0,
            (1.0 + 1.0 - 1.0) / 3.0,
        ];
        let expect = 1.0 - means.iter().map(|m| m * m).sum::<f64>() / 4.0;
        assert!((t.g(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn table_is_inversion_symmetric() {
        let mut acc = CorrelationAccumulator::new(4);
        let cfg: Vec<i8> = (0..16).map(|i| if (i * 7 + 3) % 5 < 2 { 1 } else { -1 }).collect();
        let cfg2: Vec<i8> = (0..16).map(|i| if (i * 3 + 1) % 7 < 4 { 1 } else { -1 }).collect();
        acc.push(&cfg);
        acc.push(&cfg2);
        let t = acc.table();
        for dy in -3i64..4 {
            for dx in -3i64..4 {
                assert!((t.g(dx, dy) - t.g(-dx, -dy)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn signed_lookup_wraps() {
        let t = CorrelationTable::from_values(2, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.g(-1, 0), t.g(1, 0));
        assert_eq!(t.g(0, -1), t.g(0, 1));
        assert_eq!(t.g(3, 2), t.g(1, 0));
    }
}
