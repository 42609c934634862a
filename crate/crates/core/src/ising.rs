//! Monte Carlo sampling of the 2D Ising model on a periodic L×L lattice.
//!
//! The Hamiltonian is `H = -sum_<ij> s_i s_j` over nearest-neighbor bonds
//! with J = 1; each of the `2 L^2` bonds is counted once (right and down
//! neighbor per site, wrapped). On the 2×2 lattice this doubles the physical
//! coupling between each site pair, which is the literal periodic reading of
//! the bond sum and is kept as such.
//!
//! Near the critical point single-spin Metropolis updates decorrelate too
//! slowly, so the default sampler interleaves Wolff cluster flips with
//! Metropolis sweeps: one "hybrid sweep" is one full Metropolis sweep
//! followed by [`WOLFF_PER_HYBRID_SWEEP`] cluster updates.

use std::io::{self, BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{child_seed, seeded, SeedRng};

/// Cluster updates folded into each hybrid sweep.
pub const WOLFF_PER_HYBRID_SWEEP: usize = 5;

/// Exact critical inverse temperature `ln(1 + sqrt(2)) / 2`.
pub fn critical_beta() -> f64 {
    (1.0 + 2.0f64.sqrt()).ln() / 2.0
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid thermal parameters: {0}")]
    InvalidParams(String),
    #[error("dataset io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

/// An L×L configuration of ±1 spins, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpinConfiguration {
    side: usize,
    spins: Vec<i8>,
}

impl SpinConfiguration {
    pub fn all_up(side: usize) -> Self {
        Self {
            side,
            spins: vec![1; side * side],
        }
    }

    pub fn random(side: usize, rng: &mut impl Rng) -> Self {
        let spins = (0..side * side)
            .map(|_| if rng.gen_bool(0.5) { 1 } else { -1 })
            .collect();
        Self { side, spins }
    }

    pub fn from_spins(side: usize, spins: Vec<i8>) -> Result<Self, SampleError> {
        if spins.len() != side * side {
            return Err(SampleError::Malformed(format!(
                "expected {} spins, got {}",
                side * side,
                spins.len()
            )));
        }
        if let Some(bad) = spins.iter().find(|&&s| s != 1 && s != -1) {
            return Err(SampleError::Malformed(format!("spin value {bad} is not ±1")));
        }
        Ok(Self { side, spins })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> i8 {
        self.spins[y * self.side + x]
    }

    #[inline]
    pub fn flip(&mut self, x: usize, y: usize) {
        self.spins[y * self.side + x] = -self.spins[y * self.side + x];
    }

    /// Total energy, each nearest-neighbor bond counted once.
    pub fn energy(&self) -> f64 {
        let l = self.side;
        let mut sum = 0i64;
        for y in 0..l {
            let yr = y * l;
            let yd = ((y + 1) % l) * l;
            for x in 0..l {
                let s = self.spins[yr + x] as i64;
                let right = self.spins[yr + (x + 1) % l] as i64;
                let down = self.spins[yd + x] as i64;
                sum += s * (right + down);
            }
        }
        -(sum as f64)
    }

    /// Mean spin, in `[-1, 1]`.
    pub fn magnetization(&self) -> f64 {
        let total: i64 = self.spins.iter().map(|&s| s as i64).sum();
        total as f64 / (self.side * self.side) as f64
    }

    /// Energy change from flipping the spin at `(x, y)`.
    #[inline]
    fn flip_delta_e(&self, x: usize, y: usize) -> f64 {
        let l = self.side;
        let s = self.get(x, y) as i64;
        let neighbors = self.get((x + 1) % l, y) as i64
            + self.get((x + l - 1) % l, y) as i64
            + self.get(x, (y + 1) % l) as i64
            + self.get(x, (y + l - 1) % l) as i64;
        (2 * s * neighbors) as f64
    }
}

/// Metropolis acceptance probability `min(1, exp(-beta * delta_e))`.
pub fn metropolis_acceptance(beta: f64, delta_e: f64) -> f64 {
    (-beta * delta_e).exp().min(1.0)
}

/// One sweep of `L^2` random-site Metropolis proposals. Returns the number
/// of accepted flips.
pub fn metropolis_sweep(config: &mut SpinConfiguration, beta: f64, rng: &mut impl Rng) -> usize {
    let l = config.side();
    let mut accepted = 0;
    for _ in 0..l * l {
        let x = rng.gen_range(0..l);
        let y = rng.gen_range(0..l);
        let delta_e = config.flip_delta_e(x, y);
        if delta_e <= 0.0 || rng.gen::<f64>() < metropolis_acceptance(beta, delta_e) {
            config.flip(x, y);
            accepted += 1;
        }
    }
    accepted
}

/// Wolff bond-activation probability `1 - exp(-2 beta)`.
pub fn wolff_add_probability(beta: f64) -> f64 {
    1.0 - (-2.0 * beta).exp()
}

/// One Wolff cluster flip. Returns the cluster size.
pub fn wolff_update(config: &mut SpinConfiguration, beta: f64, rng: &mut impl Rng) -> usize {
    let l = config.side();
    let n = l * l;
    let p_add = wolff_add_probability(beta);
    let seed = rng.gen_range(0..n);
    let target = config.spins[seed];
    let mut in_cluster = vec![false; n];
    let mut stack = vec![seed];
    let mut cluster = Vec::with_capacity(16);
    in_cluster[seed] = true;
    while let Some(site) = stack.pop() {
        cluster.push(site);
        let x = site % l;
        let y = site / l;
        let neighbors = [
            y * l + (x + 1) % l,
            y * l + (x + l - 1) % l,
            ((y + 1) % l) * l + x,
            ((y + l - 1) % l) * l + x,
        ];
        for nb in neighbors {
            if !in_cluster[nb] && config.spins[nb] == target && rng.gen::<f64>() < p_add {
                in_cluster[nb] = true;
                stack.push(nb);
            }
        }
    }
    for &site in &cluster {
        config.spins[site] = -config.spins[site];
    }
    cluster.len()
}

/// Update scheme used by [`sample_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// One Metropolis sweep plus [`WOLFF_PER_HYBRID_SWEEP`] Wolff updates
    /// per sweep unit (the default; defeats critical slowing down).
    Hybrid,
    /// Plain Metropolis sweeps, used for cross-validation.
    Metropolis,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Hybrid => "hybrid",
            Algorithm::Metropolis => "metropolis",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = SampleError;

    fn from_str(s: &str) -> Result<Self, SampleError> {
        match s.to_ascii_lowercase().as_str() {
            "hybrid" => Ok(Algorithm::Hybrid),
            "metropolis" => Ok(Algorithm::Metropolis),
            other => Err(SampleError::Malformed(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Everything needed to regenerate a deterministic sample batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalParams {
    pub l: usize,
    pub beta: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Hybrid sweep units applied before the first record.
    pub equilibration_sweeps: usize,
    /// Hybrid sweep units applied between records.
    pub decorrelation_sweeps: usize,
    pub algorithm: Algorithm,
}

impl ThermalParams {
    pub fn new(l: usize, beta: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            l,
            beta,
            n_samples,
            seed,
            equilibration_sweeps: 1000,
            decorrelation_sweeps: 1,
            algorithm: Algorithm::Hybrid,
        }
    }

    fn validate(&self) -> Result<(), SampleError> {
        if self.l < 2 {
            return Err(SampleError::InvalidParams(format!("side {} too small", self.l)));
        }
        // beta = 0 is the infinite-temperature limit and is allowed; only
        // negative couplings are rejected.
        if !(self.beta >= 0.0) {
            return Err(SampleError::InvalidParams(format!("beta {} must be >= 0", self.beta)));
        }
        if self.n_samples == 0 {
            return Err(SampleError::InvalidParams("n_samples must be positive".into()));
        }
        if self.equilibration_sweeps == 0 || self.decorrelation_sweeps == 0 {
            return Err(SampleError::InvalidParams("sweep counts must be positive".into()));
        }
        Ok(())
    }
}

/// Mean energy per site and mean |magnetization| with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub energy_per_site: f64,
    pub energy_per_site_se: f64,
    pub abs_magnetization: f64,
    pub abs_magnetization_se: f64,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// A set of recorded configurations plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub params: ThermalParams,
    pub configs: Vec<SpinConfiguration>,
    pub stats: EstimatorStats,
}

fn apply_sweep_unit(
    config: &mut SpinConfiguration,
    beta: f64,
    algorithm: Algorithm,
    rng: &mut SeedRng,
) {
    metropolis_sweep(config, beta, rng);
    if algorithm == Algorithm::Hybrid {
        for _ in 0..WOLFF_PER_HYBRID_SWEEP {
            wolff_update(config, beta, rng);
        }
    }
}

/// Equilibrate, then record one configuration every
/// `decorrelation_sweeps` sweep units. Fully deterministic in the seed.
pub fn sample_dataset(params: &ThermalParams) -> Result<SampleBatch, SampleError> {
    params.validate()?;
    let mut rng = seeded(child_seed(params.seed, "mc-chain"));
    let mut config = SpinConfiguration::random(params.l, &mut rng);
    for _ in 0..params.equilibration_sweeps {
        apply_sweep_unit(&mut config, params.beta, params.algorithm, &mut rng);
    }
    let n_sites = (params.l * params.l) as f64;
    let mut configs = Vec::with_capacity(params.n_samples);
    let mut energies = Vec::with_capacity(params.n_samples);
    let mut mags = Vec::with_capacity(params.n_samples);
    for _ in 0..params.n_samples {
        for _ in 0..params.decorrelation_sweeps {
            apply_sweep_unit(&mut config, params.beta, params.algorithm, &mut rng);
        }
        energies.push(config.energy() / n_sites);
        mags.push(config.magnetization().abs());
        configs.push(config.clone());
    }
    let (energy_per_site, energy_per_site_se) = mean_and_se(&energies);
    let (abs_magnetization, abs_magnetization_se) = mean_and_se(&mags);
    Ok(SampleBatch {
        params: params.clone(),
        configs,
        stats: EstimatorStats {
            energy_per_site,
            energy_per_site_se,
            abs_magnetization,
            abs_magnetization_se,
        },
    })
}

/// Lag-1 autocorrelation of a series; near zero for well-decorrelated records.
pub fn lag1_autocorrelation(series: &[f64]) -> f64 {
    assert!(series.len() > 2);
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = series
        .windows(2)
        .map(|w| (w[0] - mean) * (w[1] - mean))
        .sum();
    cov / var
}

/// First line of the on-disk dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    #[serde(rename = "L")]
    pub l: usize,
    pub beta: f64,
    pub n: usize,
    pub seed: u64,
    pub algorithm: String,
}

/// Write a batch in the dataset format: one JSON header line, then one
/// record per line of `L^2` characters in `{0, 1}` (0 maps to spin -1) in
/// row-major site order.
pub fn write_dataset(batch: &SampleBatch, mut w: impl Write) -> Result<(), SampleError> {
    let header = DatasetHeader {
        l: batch.params.l,
        beta: batch.params.beta,
        n: batch.params.n_samples,
        seed: batch.params.seed,
        algorithm: batch.params.algorithm.name().to_string(),
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| SampleError::Malformed(e.to_string()))?;
    writeln!(w, "{header_json}")?;
    let mut line = String::with_capacity(batch.params.l * batch.params.l + 1);
    for config in &batch.configs {
        line.clear();
        for &s in config.spins() {
            line.push(if s > 0 { '1' } else { '0' });
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// A dataset read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub header: DatasetHeader,
    pub configs: Vec<SpinConfiguration>,
}

pub fn read_dataset(r: impl BufRead) -> Result<LoadedDataset, SampleError> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| SampleError::Malformed("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| SampleError::Malformed(format!("bad header: {e}")))?;
    let n_sites = header.l * header.l;
    let mut configs = Vec::with_capacity(header.n);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if line.len() != n_sites {
            return Err(SampleError::Malformed(format!(
                "record {i} has {} characters, expected {n_sites}",
                line.len()
            )));
        }
        let spins: Vec<i8> = line
            .bytes()
            .map(|b| match b {
                b'0' => Ok(-1),
                b'1' => Ok(1),
                other => Err(SampleError::Malformed(format!(
                    "record {i} contains byte {other:#x}"
                ))),
            })
            .collect::<Result<_, _>>()?;
        configs.push(SpinConfiguration::from_spins(header.l, spins)?);
    }
    if configs.len() != header.n {
        return Err(SampleError::Malformed(format!(
            "header promises {} records, found {}",
            header.n,
            configs.len()
        )));
    }
    Ok(LoadedDataset { header, configs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn energy_all_up_l4() {
        assert_eq!(SpinConfiguration::all_up(4).energy(), -32.0);
    }

    #[test]
    fn energy_checkerboard_l4() {
        let spins: Vec<i8> = (0..16)
            .map(|i| if (i % 4 + i / 4) % 2 == 0 { 1 } else { -1 })
            .collect();
        let c = SpinConfiguration::from_spins(4, spins).unwrap();
        assert_eq!(c.energy(), 32.0);
    }

    #[test]
    fn energy_single_flip_l4() {
        let mut c = SpinConfiguration::all_up(4);
        c.flip(1, 2);
        assert_eq!(c.energy(), -24.0);
    }

    #[test]
    fn energy_global_flip_and_translation_invariance() {
        let mut rng = seeded(11);
        for _ in 0..20 {
            let c = SpinConfiguration::random(4, &mut rng);
            let e = c.energy();
            let flipped =
                SpinConfiguration::from_spins(4, c.spins().iter().map(|&s| -s).collect()).unwrap();
            assert_eq!(flipped.energy(), e);
            // Shift by one column and one row.
            let mut shifted = vec![0i8; 16];
            for y in 0..4 {
                for x in 0..4 {
                    shifted[y * 4 + x] = c.get((x + 1) % 4, (y + 3) % 4);
                }
            }
            let shifted = SpinConfiguration::from_spins(4, shifted).unwrap();
            assert_eq!(shifted.energy(), e);
        }
    }

    #[test]
    fn energy_range_and_parity() {
        let mut rng = seeded(5);
        for &l in &[2usize, 4] {
            let bound = 2.0 * (l * l) as f64;
            for _ in 0..50 {
                let c = SpinConfiguration::random(l, &mut rng);
                let e = c.energy();
                assert!(e >= -bound && e <= bound);
                // E - (-2 L^2) is a multiple of 4: single flips change E by
                // {-8,-4,0,4,8}.
                assert_eq!((e - (-bound)) as i64 % 4, 0);
            }
        }
    }

    #[test]
    fn metropolis_acceptance_formula() {
        // Oracle: evaluate exp(-beta * dE) directly.
        let p = metropolis_acceptance(0.4407, 8.0);
        assert_eq!(p, (-0.4407f64 * 8.0).exp());
        assert!((p - 0.0295).abs() < 1e-4);
        assert_eq!(metropolis_acceptance(0.4407, -4.0), 1.0);
        assert_eq!(metropolis_acceptance(0.4407, 0.0), 1.0);
    }

    #[test]
    fn beta_zero_accepts_everything() {
        let mut rng = seeded(3);
        let mut c = SpinConfiguration::all_up(4);
        for _ in 0..10 {
            assert_eq!(metropolis_sweep(&mut c, 0.0, &mut rng), 16);
        }
        // Long-run magnetization averages to zero at infinite temperature.
        let mut sum = 0.0;
        let sweeps = 400;
        for _ in 0..sweeps {
            metropolis_sweep(&mut c, 0.0, &mut rng);
            sum += c.magnetization();
        }
        assert!((sum / sweeps as f64).abs() < 0.05);
    }

    #[test]
    fn wolff_add_probability_values() {
        assert_eq!(wolff_add_probability(0.4407), 1.0 - (-2.0f64 * 0.4407).exp());
        assert!((wolff_add_probability(0.4407) - 0.58580).abs() < 1e-4);
        assert!(wolff_add_probability(1e-12) < 1e-11);
    }

    #[test]
    fn wolff_zero_beta_cluster_is_single_site() {
        let mut rng = seeded(9);
        let mut c = SpinConfiguration::random(8, &mut rng);
        for _ in 0..50 {
            assert_eq!(wolff_update(&mut c, 0.0, &mut rng), 1);
        }
    }

    #[test]
    fn wolff_preserves_spin_values() {
        let mut rng = seeded(13);
        let mut c = SpinConfiguration::random(8, &mut rng);
        for _ in 0..100 {
            wolff_update(&mut c, 0.4407, &mut rng);
        }
        assert!(c.spins().iter().all(|&s| s == 1 || s == -1));
    }

    #[test]
    fn wolff_and_metropolis_agree_on_mean_energy() {
        let beta = 0.435;
        let mut hybrid = ThermalParams::new(4, beta, 2000, 77);
        hybrid.equilibration_sweeps = 200;
        let mut metro = ThermalParams::new(4, beta, 2000, 78);
        metro.algorithm = Algorithm::Metropolis;
        metro.equilibration_sweeps = 500;
        metro.decorrelation_sweeps = 10;
        let a = sample_dataset(&hybrid).unwrap();
        let b = sample_dataset(&metro).unwrap();
        let diff = (a.stats.energy_per_site - b.stats.energy_per_site).abs();
        let sigma = (a.stats.energy_per_site_se.powi(2) + b.stats.energy_per_site_se.powi(2)).sqrt();
        assert!(
            diff <= 3.0 * sigma,
            "hybrid {} vs metropolis {} (3 sigma = {})",
            a.stats.energy_per_site,
            b.stats.energy_per_site,
            3.0 * sigma
        );
    }

    #[test]
    fn sample_dataset_is_deterministic() {
        let params = ThermalParams::new(4, 0.435, 50, 123);
        let a = sample_dataset(&params).unwrap();
        let b = sample_dataset(&params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn records_are_decorrelated() {
        let mut params = ThermalParams::new(8, 0.435, 1500, 21);
        params.equilibration_sweeps = 200;
        let batch = sample_dataset(&params).unwrap();
        let energies: Vec<f64> = batch.configs.iter().map(|c| c.energy()).collect();
        let rho = lag1_autocorrelation(&energies);
        assert!(rho.abs() < 0.05, "lag-1 autocorrelation {rho}");
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(sample_dataset(&ThermalParams::new(4, -0.1, 10, 0)).is_err());
        assert!(sample_dataset(&ThermalParams::new(4, 0.4, 0, 0)).is_err());
        assert!(sample_dataset(&ThermalParams::new(1, 0.4, 10, 0)).is_err());
    }

    #[test]
    fn critical_beta_value() {
        let b = critical_beta();
        assert!((b - 0.44068679).abs() < 1e-8);
        assert_eq!((b * 10000.0).round() / 10000.0, 0.4407);
        assert!((2.0 * b - (1.0 + 2.0f64.sqrt()).ln()).abs() < 1e-15);
    }

    #[test]
    fn dataset_roundtrip() {
        let params = ThermalParams::new(4, 0.435, 20, 5);
        let batch = sample_dataset(&params).unwrap();
        let mut buf = Vec::new();
        write_dataset(&batch, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"L\":4,"));
        assert_eq!(text.lines().count(), 21);
        assert!(text.lines().nth(1).unwrap().chars().all(|c| c == '0' || c == '1'));
        let loaded = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(loaded.header.l, 4);
        assert_eq!(loaded.header.algorithm, "hybrid");
        assert_eq!(loaded.configs, batch.configs);
    }

    #[test]
    fn dataset_rejects_corrupt_lines() {
        let text = "{\"L\":2,\"beta\":0.4,\"n\":1,\"seed\":0,\"algorithm\":\"hybrid\"}\n0102\n";
        assert!(read_dataset(text.as_bytes()).is_err());
        let text = "{\"L\":2,\"beta\":0.4,\"n\":2,\"seed\":0,\"algorithm\":\"hybrid\"}\n0101\n";
        assert!(read_dataset(text.as_bytes()).is_err());
    }
}
