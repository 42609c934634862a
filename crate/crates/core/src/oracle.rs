//! Exact Boltzmann statistics for small lattices by full enumeration.
//!
//! For L in {2, 4} every one of the `2^(L^2)` spin states is enumerated, so
//! probabilities, observables, entropies, and KL divergences against a model
//! are exact up to floating-point rounding. All probability arithmetic stays
//! in the log domain; at the stiffest temperatures in use the Boltzmann
//! weights span dozens of orders of magnitude.
//!
//! State encoding: bit `i` of the state index holds the spin at row-major
//! site `i` (`x = i % L`, `y = i / L`), with a set bit meaning spin +1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlations::CorrelationTable;
use crate::ising::SpinConfiguration;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("exact enumeration supports L in {{2, 4}}, got {0} (state space would overflow)")]
    SideUnsupported(usize),
    #[error("model log-probability for state {state} is not finite ({value})")]
    NonFiniteModelLogProb { state: usize, value: f64 },
}

/// The exact Boltzmann distribution over all `2^(L^2)` states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactDistribution {
    l: usize,
    beta: f64,
    log_weights: Vec<f64>,
    log_z: f64,
}

/// Stable `log(sum(exp(x)))`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Decode a state index into a ±1 configuration.
pub fn config_for_state(l: usize, state: usize) -> SpinConfiguration {
    let spins: Vec<i8> = (0..l * l)
        .map(|i| if (state >> i) & 1 == 1 { 1 } else { -1 })
        .collect();
    SpinConfiguration::from_spins(l, spins).expect("decoded spins are ±1")
}

/// Encode a configuration back into its state index.
pub fn state_for_config(config: &SpinConfiguration) -> usize {
    config
        .spins()
        .iter()
        .enumerate()
        .fold(0usize, |acc, (i, &s)| if s > 0 { acc | (1 << i) } else { acc })
}

/// Exact expectation values under an [`ExactDistribution`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactObservables {
    pub energy_per_site: f64,
    pub abs_magnetization: f64,
    pub correlation: CorrelationTable,
}

/// Enumerate all states of the `L×L` periodic lattice at inverse
/// temperature `beta`.
pub fn enumerate(l: usize, beta: f64) -> Result<ExactDistribution, OracleError> {
    if l != 2 && l != 4 {
        return Err(OracleError::SideUnsupported(l));
    }
    let n_states = 1usize << (l * l);
    let mut log_weights = Vec::with_capacity(n_states);
    for state in 0..n_states {
        let energy = config_for_state(l, state).energy();
        log_weights.push(-beta * energy);
    }
    let log_z = logsumexp(&log_weights);
    Ok(ExactDistribution {
        l,
        beta,
        log_weights,
        log_z,
    })
}

impl ExactDistribution {
    pub fn side(&self) -> usize {
        self.l
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_states(&self) -> usize {
        self.log_weights.len()
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn log_prob(&self, state: usize) -> f64 {
        self.log_weights[state] - self.log_z
    }

    pub fn prob(&self, state: usize) -> f64 {
        self.log_prob(state).exp()
    }

    /// Exact energy, |magnetization|, and connected correlation table.
    pub fn observables(&self) -> ExactObservables {
        let l = self.l;
        let n_sites = l * l;
        let mut energy_acc = 0.0;
        let mut abs_mag_acc = 0.0;
        let mut site_mean = vec![0.0f64; n_sites];
        let mut pair_acc = vec![0.0f64; n_sites];
        let mut spins = vec![0i8; n_sites];
        for state in 0..self.n_states() {
            let p = self.prob(state);
            for (i, s) in spins.iter_mut().enumerate() {
                *s = if (state >> i) & 1 == 1 { 1 } else { -1 };
            }
            let config = config_for_state(l, state);
            energy_acc += p * config.energy();
            let m: i64 = spins.iter().map(|&s| s as i64).sum();
            abs_mag_acc += p * (m.abs() as f64) / n_sites as f64;
            for (i, &s) in spins.iter().enumerate() {
                site_mean[i] += p * s as f64;
            }
            for dy in 0..l {
                for dx in 0..l {
                    let mut sum = 0i64;
                    for y in 0..l {
                        let row = y * l;
                        let row2 = ((y + dy) % l) * l;
                        for x in 0..l {
                            sum += (spins[row + x] * spins[row2 + (x + dx) % l]) as i64;
                        }
                    }
                    pair_acc[dy * l + dx] += p * sum as f64;
                }
            }
        }
        let mut values = vec![0.0f64; n_sites];
        for dy in 0..l {
            for dx in 0..l {
                let d = dy * l + dx;
                let mut mean_prod = 0.0;
                for y in 0..l {
                    for x in 0..l {
                        mean_prod += site_mean[y * l + x]
                            * site_mean[((y + dy) % l) * l + (x + dx) % l];
                    }
                }
                values[d] = (pair_acc[d] - mean_prod) / n_sites as f64;
            }
        }
        ExactObservables {
            energy_per_site: energy_acc / n_sites as f64,
            abs_magnetization: abs_mag_acc,
            correlation: CorrelationTable::from_values(l, values),
        }
    }

    /// Shannon entropy `-sum p ln p` in nats.
    pub fn entropy(&self) -> f64 {
        let mut acc = 0.0;
        for &lw in &self.log_weights {
            let p = (lw - self.log_z).exp();
            acc += p * lw;
        }
        self.log_z - acc
    }

    /// `KL(p || q)` where `q` is given by a total model log-probability per
    /// state index. Errors if the model assigns a non-finite log-probability.
    pub fn model_kld(&self, model_logprob: impl Fn(usize) -> f64) -> Result<f64, OracleError> {
        let mut acc = 0.0;
        for state in 0..self.n_states() {
            let lq = model_logprob(state);
            if !lq.is_finite() {
                return Err(OracleError::NonFiniteModelLogProb { state, value: lq });
            }
            let lp = self.log_prob(state);
            let p = lp.exp();
            if p > 0.0 {
                acc += p * (lp - lq);
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn uniform_at_beta_zero() {
        let d = enumerate(2, 0.0).unwrap();
        for s in 0..16 {
            assert!((d.prob(s) - 1.0 / 16.0).abs() < 1e-14);
        }
        assert!((d.entropy() - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let obs = d.observables();
        for dy in 0..2 {
            for dx in 0..2 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                assert!(obs.correlation.g(dx, dy).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_normalize() {
        for &(l, beta) in &[(2usize, 0.4407), (2, 0.667), (4, 0.286), (4, 0.435), (4, 0.667)] {
            let d = enumerate(l, beta).unwrap();
            let total: f64 = (0..d.n_states()).map(|s| d.prob(s)).sum();
            assert!((total - 1.0).abs() < 1e-10, "L={l} beta={beta}: total {total}");
            let lse = logsumexp(
                &(0..d.n_states())
                    .map(|s| d.log_prob(s))
                    .collect::<Vec<_>>(),
            );
            assert!(lse.abs() < 1e-12);
        }
    }

    #[test]
    fn all_up_probability_matches_plain_arithmetic() {
        // Independent route: linear-domain Boltzmann weights over all 16
        // states of the 2x2 lattice.
        let beta = 0.4407;
        let d = enumerate(2, beta).unwrap();
        let mut z = 0.0;
        let mut w_all_up = 0.0;
        for state in 0..16 {
            let e = config_for_state(2, state).energy();
            let w = (-beta * e).exp();
            z += w;
            if state == 0b1111 {
                w_all_up = w;
            }
        }
        assert!((d.prob(0b1111) - w_all_up / z).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_concentrates_on_ground_states() {
        let d = enumerate(2, 3.0).unwrap();
        let aligned = d.prob(0) + d.prob(0b1111);
        assert!(aligned > 0.999, "aligned mass {aligned}");
        let d = enumerate(2, 5.0).unwrap();
        assert!((d.entropy() - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn entropy_matches_thermodynamic_identity() {
        // H = ln Z + beta * <E> is an independent route to the entropy.
        for &(l, beta) in &[(2usize, 0.435), (4, 0.435), (4, 0.667)] {
            let d = enumerate(l, beta).unwrap();
            let obs = d.observables();
            let h_thermo = d.log_z() + beta * obs.energy_per_site * (l * l) as f64;
            assert!((d.entropy() - h_thermo).abs() < 1e-9);
        }
    }

    #[test]
    fn correlation_table_has_square_symmetry() {
        let d = enumerate(4, 0.435).unwrap();
        let g = d.observables().correlation;
        assert!(g.max_transpose_asymmetry() < 1e-10);
        for dy in -2i64..3 {
            for dx in -2i64..3 {
                assert!((g.g(dx, dy) - g.g(-dx, -dy)).abs() < 1e-10);
            }
        }
        // G(0,0) = 1 - (1/N) sum_r <s_r>^2 = 1 by spin-flip symmetry.
        assert!((g.g(0, 0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn kld_of_self_is_zero() {
        let d = enumerate(2, 0.435).unwrap();
        let kld = d.model_kld(|s| d.log_prob(s)).unwrap();
        assert!(kld.abs() < 1e-12);
    }

    #[test]
    fn kld_uniform_model_at_beta_zero_is_zero() {
        let d = enumerate(2, 0.0).unwrap();
        let kld = d.model_kld(|_| -(16f64.ln())).unwrap();
        assert!(kld.abs() < 1e-12);
    }

    #[test]
    fn kld_is_nonnegative_for_perturbed_models() {
        let d = enumerate(2, 0.435).unwrap();
        // Normalized but wrong distributions: tilt the exact one.
        for tilt in [0.1, 0.5, 1.0] {
            let tilted: Vec<f64> = (0..16).map(|s| d.log_prob(s) + tilt * (s % 3) as f64).collect();
            let z = logsumexp(&tilted);
            let kld = d.model_kld(|s| tilted[s] - z).unwrap();
            assert!(kld > 0.0);
        }
    }

    #[test]
    fn kld_rejects_non_finite_model() {
        let d = enumerate(2, 0.435).unwrap();
        let err = d
            .model_kld(|s| if s == 3 { f64::NEG_INFINITY } else { -2.0 })
            .unwrap_err();
        assert!(matches!(err, OracleError::NonFiniteModelLogProb { state: 3, .. }));
    }

    #[test]
    fn unsupported_sides_refused() {
        assert_eq!(enumerate(8, 0.4).unwrap_err(), OracleError::SideUnsupported(8));
        assert_eq!(enumerate(3, 0.4).unwrap_err(), OracleError::SideUnsupported(3));
    }

    /// Independent bit-twiddling energy: for each row pair and column pair,
    /// XOR + popcount counts the unsatisfied bonds.
    fn energy_by_popcount(l: usize, state: usize) -> f64 {
        let row_mask = (1usize << l) - 1;
        let rows: Vec<usize> = (0..l).map(|y| (state >> (y * l)) & row_mask).collect();
        let mut unsatisfied = 0u32;
        for y in 0..l {
            // Horizontal bonds: compare each row with itself rotated by one.
            let rot = ((rows[y] >> 1) | (rows[y] << (l - 1))) & row_mask;
            unsatisfied += (rows[y] ^ rot).count_ones();
            // Vertical bonds: compare row y with row y+1 (wrapped).
            unsatisfied += (rows[y] ^ rows[(y + 1) % l]).count_ones();
        }
        let total_bonds = (2 * l * l) as f64;
        // E = (unsatisfied) - (satisfied) = 2*unsatisfied - total.
        2.0 * unsatisfied as f64 - total_bonds
    }

    #[test]
    fn energy_histogram_matches_popcount_route() {
        for &l in &[2usize, 4] {
            let mut via_config: BTreeMap<i64, usize> = BTreeMap::new();
            let mut via_bits: BTreeMap<i64, usize> = BTreeMap::new();
            for state in 0..(1usize << (l * l)) {
                *via_config
                    .entry(config_for_state(l, state).energy() as i64)
                    .or_default() += 1;
                *via_bits.entry(energy_by_popcount(l, state) as i64).or_default() += 1;
            }
            assert_eq!(via_config, via_bits);
            // Spot values for L=2: ground states and fully frustrated states.
            if l == 2 {
                assert_eq!(via_config[&-8], 2);
                assert_eq!(via_config[&8], 2);
            }
        }
    }

    #[test]
    fn state_encoding_roundtrip() {
        for state in [0usize, 1, 0b1010, 0b1111] {
            let c = config_for_state(2, state);
            assert_eq!(state_for_config(&c), state);
        }
        let c = config_for_state(2, 0b0010);
        assert_eq!(c.get(1, 0), 1);
        assert_eq!(c.get(0, 0), -1);
    }
}
