//! Reproducible experiment recipes: dataset generation, grids of training
//! cells, result bundles, and plot-ready reports.
//!
//! A bundle directory is fully determined by its spec: datasets are
//! regenerated from recorded seeds when missing, every cell's training is
//! deterministic in its seed, and no file contains timestamps or other
//! environment noise, so re-running a spec reproduces the bundle
//! byte-for-byte. Aggregates (medians, standard errors) are computed only
//! at report time from the raw per-cell files.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ising::{read_dataset, sample_dataset, write_dataset, SampleError, ThermalParams};
use crate::models::{save_checkpoint, ArModel, ModelError, ModelKind, SequenceDataset};
use crate::paths::{PathError, PathKind, PathOrdering};
use crate::training::{train, CheckpointRecord, TrainConfig, TrainError, TrainProvenance};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    Validation(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("malformed bundle: {0}")]
    Malformed(String),
}

fn json_err(e: serde_json::Error) -> ExperimentError {
    ExperimentError::Malformed(e.to_string())
}

/// Which reproduction recipe a spec drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PathComparison,
    SizeScan,
    BetaScan,
}

/// Monte Carlo dataset settings shared by every `(L, beta)` pair in a spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    #[serde(default = "default_equilibration")]
    pub equilibration_sweeps: usize,
    #[serde(default = "default_decorrelation")]
    pub decorrelation_sweeps: usize,
    pub seed: u64,
}

fn default_equilibration() -> usize {
    1000
}

fn default_decorrelation() -> usize {
    1
}

/// Training settings applied to every cell (the per-cell seed comes from
/// the spec's seed list).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    #[serde(default = "default_n_model_samples")]
    pub n_model_samples: usize,
}

fn default_batch_size() -> usize {
    100
}

fn default_lr() -> f64 {
    1e-3
}

fn default_split() -> f64 {
    0.8
}

fn default_n_model_samples() -> usize {
    10_000
}

impl TrainSettings {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            split: self.split,
            seed,
            checkpoint_epochs: self.checkpoint_epochs.clone(),
            n_model_samples: self.n_model_samples,
        }
    }
}

/// Knobs of the plateau-length statistic (see [`plateau_length`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSpec {
    /// An epoch counts as stalled when validation NLL improves by less than
    /// this many nats per site.
    #[serde(default = "default_plateau_improvement")]
    pub improvement_per_site: f64,
    /// ... while still sitting at least this many nats per site above the
    /// trace minimum (so a converged tail does not count as a plateau).
    #[serde(default = "default_plateau_margin")]
    pub margin_per_site: f64,
}

fn default_plateau_improvement() -> f64 {
    1e-3
}

fn default_plateau_margin() -> f64 {
    5e-3
}

impl Default for PlateauSpec {
    fn default() -> Self {
        Self {
            improvement_per_site: default_plateau_improvement(),
            margin_per_site: default_plateau_margin(),
        }
    }
}

/// Nine evenly spaced inverse temperatures spanning the transition.
pub fn default_beta_grid() -> Vec<f64> {
    let (lo, hi) = (0.286, 0.667);
    (0..9).map(|i| lo + (hi - lo) * i as f64 / 8.0).collect()
}

/// A full experiment description; serializable as the JSON spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub model: ModelKind,
    #[serde(default)]
    pub paths: Vec<PathKind>,
    pub sizes: Vec<usize>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub train: TrainSettings,
    #[serde(default = "default_threshold_tol")]
    pub threshold_tol: f64,
    #[serde(default)]
    pub plateau: PlateauSpec,
}

fn default_threshold_tol() -> f64 {
    0.02
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let file = fs::File::open(path)?;
        let spec: ExperimentSpec = serde_json::from_reader(BufReader::new(file)).map_err(json_err)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |msg: String| Err(ExperimentError::Validation(msg));
        if self.sizes.is_empty() {
            return fail("sizes list is empty".into());
        }
        if self.betas.is_empty() {
            return fail("betas list is empty".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds list is empty".into());
        }
        for &l in &self.sizes {
            if l < 2 || !l.is_power_of_two() {
                return fail(format!("size {l} is not a power of two >= 2"));
            }
        }
        for &b in &self.betas {
            if !(b > 0.0) {
                return fail(format!("beta {b} must be positive"));
            }
        }
        match self.kind {
            ExperimentKind::PathComparison => {
                if self.effective_paths().is_empty() {
                    return fail("path comparison needs at least one path".into());
                }
                if self.sizes.len() != 1 || self.betas.len() != 1 {
                    return fail("path comparison runs at a single (L, beta)".into());
                }
            }
            ExperimentKind::SizeScan => {
                if self.effective_paths().len() != 1 {
                    return fail("size scan uses exactly one path".into());
                }
                if self.betas.len() != 1 {
                    return fail("size scan runs at a single beta".into());
                }
            }
            ExperimentKind::BetaScan => {
                if self.effective_paths().len() != 1 {
                    return fail("beta scan uses exactly one path".into());
                }
                if self.sizes.len() != 1 {
                    return fail("beta scan runs at a single L".into());
                }
            }
        }
        Ok(())
    }

    /// Paths actually run: scans default to zigzag when none is given.
    pub fn effective_paths(&self) -> Vec<PathKind> {
        if self.paths.is_empty() {
            match self.kind {
                ExperimentKind::PathComparison => PathKind::ALL.to_vec(),
                _ => vec![PathKind::Zigzag],
            }
        } else {
            self.paths.clone()
        }
    }

    /// The report table this spec feeds.
    pub fn figure_key(&self) -> &'static str {
        match (self.kind, self.model) {
            (ExperimentKind::PathComparison, ModelKind::Rnn) => "fig2a",
            (ExperimentKind::PathComparison, ModelKind::Transformer) => "fig2b",
            (ExperimentKind::SizeScan, _) => "fig3",
            (ExperimentKind::BetaScan, _) => "fig4",
        }
    }
}

fn beta_tag(beta: f64) -> String {
    format!("{beta:.6}")
}

fn dataset_file_name(l: usize, beta: f64, n: usize, seed: u64) -> String {
    format!("L{l}_beta{}_n{n}_seed{seed}.txt", beta_tag(beta))
}

/// One training run of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPlan {
    pub id: String,
    pub path: PathKind,
    pub l: usize,
    pub beta: f64,
    pub seed: u64,
    pub dataset_file: String,
}

/// Result record written to `cells/<id>/cell.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    #[serde(flatten)]
    pub plan: CellPlan,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<TrainProvenance>,
}

/// Bundle manifest written after all cells complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub name: String,
    pub kind: ExperimentKind,
    pub model: ModelKind,
    pub figure: String,
    pub partial: bool,
    pub datasets: Vec<String>,
    pub cells: Vec<CellStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub id: String,
    pub status: String,
}

fn cell_plans(spec: &ExperimentSpec) -> Vec<CellPlan> {
    let mut plans = Vec::new();
    for &path in &spec.effective_paths() {
        for &l in &spec.sizes {
            for &beta in &spec.betas {
                for &seed in &spec.seeds {
                    plans.push(CellPlan {
                        id: format!("{path}_L{l}_beta{}_seed{seed}", beta_tag(beta)),
                        path,
                        l,
                        beta,
                        seed,
                        dataset_file: dataset_file_name(
                            l,
                            beta,
                            spec.dataset.n_samples,
                            spec.dataset.seed,
                        ),
                    });
                }
            }
        }
    }
    plans
}

/// Generate any datasets the plans need that are not on disk yet.
fn ensure_datasets(spec: &ExperimentSpec, dataset_dir: &Path) -> Result<Vec<String>, ExperimentError> {
    fs::create_dir_all(dataset_dir)?;
    let mut pairs = BTreeSet::new();
    for &l in &spec.sizes {
        for beta in &spec.betas {
            pairs.insert((l, beta.to_bits()));
        }
    }
    let mut files = Vec::new();
    for (l, beta_bits) in pairs {
        let beta = f64::from_bits(beta_bits);
        let file_name = dataset_file_name(l, beta, spec.dataset.n_samples, spec.dataset.seed);
        let full = dataset_dir.join(&file_name);
        if !full.exists() {
            let params = ThermalParams {
                l,
                beta,
                n_samples: spec.dataset.n_samples,
                seed: spec.dataset.seed,
                equilibration_sweeps: spec.dataset.equilibration_sweeps,
                decorrelation_sweeps: spec.dataset.decorrelation_sweeps,
                algorithm: crate::ising::Algorithm::Hybrid,
            };
            let batch = sample_dataset(&params)?;
            let file = fs::File::create(&full)?;
            write_dataset(&batch, BufWriter::new(file))?;
        }
        files.push(file_name);
    }
    Ok(files)
}

fn run_cell(
    spec: &ExperimentSpec,
    plan: &CellPlan,
    dataset_dir: &Path,
    cells_dir: &Path,
) -> Result<CellRecord, ExperimentError> {
    let cell_dir = cells_dir.join(&plan.id);
    fs::create_dir_all(&cell_dir)?;
    let outcome = (|| -> Result<TrainProvenance, ExperimentError> {
        let file = fs::File::open(dataset_dir.join(&plan.dataset_file))?;
        let loaded = read_dataset(BufReader::new(file))?;
        let ordering = PathOrdering::new(plan.path, plan.l)?;
        let data = SequenceDataset::from_loaded(&loaded, &ordering);
        let mut model = ArModel::new(spec.model, ordering.len(), plan.seed);
        let cfg = spec.train.to_config(plan.seed);
        let trace = train(&mut model, &data, &ordering, &cfg)?;
        let csv_file = fs::File::create(cell_dir.join("trace.csv"))?;
        crate::training::write_trace_csv(&trace, BufWriter::new(csv_file))
            .map_err(|e| ExperimentError::Malformed(e.to_string()))?;
        let ckpt_json = fs::File::create(cell_dir.join("checkpoints.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(ckpt_json), &trace.checkpoints)
            .map_err(json_err)?;
        let model_file = fs::File::create(cell_dir.join("model.ckpt"))?;
        save_checkpoint(&model, plan.seed, cfg.epochs, BufWriter::new(model_file))?;
        Ok(trace.provenance)
    })();
    let record = match outcome {
        Ok(provenance) => CellRecord {
            plan: plan.clone(),
            status: "ok".into(),
            error: None,
            provenance: Some(provenance),
        },
        Err(err) => CellRecord {
            plan: plan.clone(),
            status: "failed".into(),
            error: Some(err.to_string()),
            provenance: None,
        },
    };
    let mut file = fs::File::create(cell_dir.join("cell.json"))?;
    serde_json::to_writer_pretty(&mut file, &record).map_err(json_err)?;
    writeln!(file)?;
    Ok(record)
}

/// Run every cell of a spec into `out_dir`. Missing datasets are generated
/// from the recorded seed; failed cells are recorded and mark the bundle
/// partial rather than aborting it.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<BundleManifest, ExperimentError> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let spec_file = fs::File::create(out_dir.join("spec.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(spec_file), spec).map_err(json_err)?;
    let dataset_dir = out_dir.join("datasets");
    let datasets = ensure_datasets(spec, &dataset_dir)?;
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let plans = cell_plans(spec);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellRecord>>> = Mutex::new(vec![None; plans.len()]);
    let worker_count = workers.max(1).min(plans.len().max(1));
    let first_error: Mutex<Option<ExperimentError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= plans.len() {
                    break;
                }
                match run_cell(spec, &plans[i], &dataset_dir, &cells_dir) {
                    Ok(record) => {
                        results.lock().expect("poisoned")[i] = Some(record);
                    }
                    Err(err) => {
                        let mut guard = first_error.lock().expect("poisoned");
                        if guard.is_none() {
                            *guard = Some(err);
                        }
                        break;
                    }
                }
            });
        }
    });
    if let Some(err) = first_error.into_inner().expect("poisoned") {
        return Err(err);
    }
    let records: Vec<CellRecord> = results
        .into_inner()
        .expect("poisoned")
        .into_iter()
        .map(|r| r.expect("all cells ran"))
        .collect();
    let manifest = BundleManifest {
        name: spec.name.clone(),
        kind: spec.kind,
        model: spec.model,
        figure: spec.figure_key().to_string(),
        partial: records.iter().any(|r| r.status != "ok"),
        datasets,
        cells: records
            .iter()
            .map(|r| CellStatus {
                id: r.plan.id.clone(),
                status: r.status.clone(),
            })
            .collect(),
    };
    let manifest_file = fs::File::create(out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(manifest_file), &manifest).map_err(json_err)?;
    Ok(manifest)
}

/// Count of epochs stalled mid-training: the longest consecutive run of
/// epochs whose validation NLL improves by less than
/// `improvement_per_site` while remaining more than `margin_per_site`
/// above the trace minimum. Converged tails therefore do not count.
pub fn plateau_length(val_nll: &[f64], n_sites: usize, spec: &PlateauSpec) -> usize {
    if val_nll.len() < 2 {
        return 0;
    }
    let floor = val_nll.iter().cloned().fold(f64::INFINITY, f64::min);
    let sites = n_sites as f64;
    let mut longest = 0usize;
    let mut current = 0usize;
    for w in val_nll.windows(2) {
        let improvement = (w[0] - w[1]) / sites;
        let stalled =
            improvement < spec.improvement_per_site && w[1] > floor + spec.margin_per_site * sites;
        if stalled {
            current += 1;
            longest = longest.max(current);
        } else {
            current = 0;
        }
    }
    longest
}

/// Median of a non-empty slice (mean of middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Standard error of the mean (sample std / sqrt(n)); zero for n < 2.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    (var / nf).sqrt()
}

/// A cell read back from disk for reporting.
#[derive(Debug, Clone)]
pub struct LoadedCell {
    pub record: CellRecord,
    pub epochs: Vec<(usize, f64, f64)>,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl LoadedCell {
    pub fn final_val_nll(&self) -> f64 {
        self.epochs.last().map(|e| e.2).unwrap_or(f64::NAN)
    }

    pub fn val_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.2).collect()
    }

    /// First epoch with validation NLL within `(1+tol)` of `target`.
    pub fn epochs_to_threshold(&self, target: f64, tol: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.2 <= (1.0 + tol) * target)
            .map(|e| e.0)
    }
}

/// Read every ok cell of a bundle.
pub fn load_bundle(
    bundle_dir: &Path,
) -> Result<(ExperimentSpec, BundleManifest, Vec<LoadedCell>), ExperimentError> {
    let spec: ExperimentSpec = serde_json::from_reader(BufReader::new(fs::File::open(
        bundle_dir.join("spec.json"),
    )?))
    .map_err(json_err)?;
    let manifest: BundleManifest = serde_json::from_reader(BufReader::new(fs::File::open(
        bundle_dir.join("manifest.json"),
    )?))
    .map_err(json_err)?;
    let mut cells = Vec::new();
    for status in &manifest.cells {
        if status.status != "ok" {
            continue;
        }
        let cell_dir = bundle_dir.join("cells").join(&status.id);
        let record: CellRecord = serde_json::from_reader(BufReader::new(fs::File::open(
            cell_dir.join("cell.json"),
        )?))
        .map_err(json_err)?;
        let mut epochs = Vec::new();
        let mut reader = csv::Reader::from_reader(BufReader::new(fs::File::open(
            cell_dir.join("trace.csv"),
        )?));
        for row in reader.records() {
            let row = row.map_err(|e| ExperimentError::Malformed(e.to_string()))?;
            let epoch: usize = row[0].parse().map_err(|_| {
                ExperimentError::Malformed(format!("bad epoch `{}`", &row[0]))
            })?;
            let train_nll: f64 = row[1].parse().map_err(|_| {
                ExperimentError::Malformed(format!("bad train_nll `{}`", &row[1]))
            })?;
            let val_nll: f64 = row[2].parse().map_err(|_| {
                ExperimentError::Malformed(format!("bad val_nll `{}`", &row[2]))
            })?;
            epochs.push((epoch, train_nll, val_nll));
        }
        let checkpoints: Vec<CheckpointRecord> = serde_json::from_reader(BufReader::new(
            fs::File::open(cell_dir.join("checkpoints.json"))?,
        ))
        .map_err(json_err)?;
        cells.push(LoadedCell {
            record,
            epochs,
            checkpoints,
        });
    }
    Ok((spec, manifest, cells))
}

/// Group-level summary for one grouping value (a path, size, or beta).
#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub n_runs: usize,
    pub median_final_val_nll: f64,
    pub se_final_val_nll: f64,
    pub median_final_val_nll_per_site: f64,
    /// Median epochs to reach `(1+tol) * target`; None when the median run
    /// never reaches it.
    pub median_epochs_to_threshold: Option<f64>,
    pub median_plateau_length: f64,
    /// `(checkpoint_epoch, median_anisotropy, se_anisotropy)` triples.
    pub anisotropy_by_checkpoint: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub figure: String,
    pub name: String,
    pub model: ModelKind,
    pub kind: ExperimentKind,
    pub threshold_tol: f64,
    /// Best (lowest) final validation NLL over all runs in the bundle; the
    /// epochs-to-threshold target.
    pub target_val_nll: f64,
    pub groups: Vec<GroupSummary>,
}

/// Median of epoch counts where `None` (never reached) sorts as +inf; the
/// result is `None` when the median itself is unreached.
pub fn median_epochs(counts: &[Option<usize>]) -> Option<f64> {
    assert!(!counts.is_empty());
    let mut vals: Vec<f64> = counts
        .iter()
        .map(|c| c.map(|v| v as f64).unwrap_or(f64::INFINITY))
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = vals.len();
    let m = if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    };
    m.is_finite().then_some(m)
}

fn group_label(kind: ExperimentKind, cell: &CellRecord) -> String {
    match kind {
        ExperimentKind::PathComparison => cell.plan.path.to_string(),
        ExperimentKind::SizeScan => format!("L{}", cell.plan.l),
        ExperimentKind::BetaScan => beta_tag(cell.plan.beta),
    }
}

/// Aggregate a loaded bundle into per-group summaries.
pub fn summarize(
    spec: &ExperimentSpec,
    manifest: &BundleManifest,
    cells: &[LoadedCell],
) -> ReportSummary {
    let target_val_nll = cells
        .iter()
        .map(|c| c.final_val_nll())
        .fold(f64::INFINITY, f64::min);
    let mut group_keys: Vec<String> = Vec::new();
    for cell in cells {
        let key = group_label(spec.kind, &cell.record);
        if !group_keys.contains(&key) {
            group_keys.push(key);
        }
    }
    let mut groups = Vec::new();
    for key in group_keys {
        let members: Vec<&LoadedCell> = cells
            .iter()
            .filter(|c| group_label(spec.kind, &c.record) == key)
            .collect();
        let finals: Vec<f64> = members.iter().map(|c| c.final_val_nll()).collect();
        let n_sites = members[0].record.plan.l * members[0].record.plan.l;
        let thresholds: Vec<Option<usize>> = members
            .iter()
            .map(|c| c.epochs_to_threshold(target_val_nll, spec.threshold_tol))
            .collect();
        let plateaus: Vec<f64> = members
            .iter()
            .map(|c| plateau_length(&c.val_series(), n_sites, &spec.plateau) as f64)
            .collect();
        let mut checkpoint_epochs: Vec<usize> = members
            .iter()
            .flat_map(|c| c.checkpoints.iter().map(|k| k.epoch))
            .collect();
        checkpoint_epochs.sort_unstable();
        checkpoint_epochs.dedup();
        let anisotropy_by_checkpoint = checkpoint_epochs
            .into_iter()
            .map(|epoch| {
                let vals: Vec<f64> = members
                    .iter()
                    .flat_map(|c| {
                        c.checkpoints
                            .iter()
                            .filter(|k| k.epoch == epoch)
                            .map(|k| k.anisotropy)
                    })
                    .collect();
                (epoch, median(&vals), standard_error(&vals))
            })
            .collect();
        groups.push(GroupSummary {
            group: key,
            n_runs: members.len(),
            median_final_val_nll: median(&finals),
            se_final_val_nll: standard_error(&finals),
            median_final_val_nll_per_site: median(&finals) / n_sites as f64,
            median_epochs_to_threshold: median_epochs(&thresholds),
            median_plateau_length: median(&plateaus),
            anisotropy_by_checkpoint,
        });
    }
    ReportSummary {
        figure: manifest.figure.clone(),
        name: spec.name.clone(),
        model: spec.model,
        kind: spec.kind,
        threshold_tol: spec.threshold_tol,
        target_val_nll,
        groups,
    }
}

/// Write the report directory: per-epoch aggregate curves, the
/// per-checkpoint anisotropy table for path comparisons, and the JSON
/// summary, all keyed to the bundle's figure name.
pub fn report(bundle_dir: &Path) -> Result<ReportSummary, ExperimentError> {
    let (spec, manifest, cells) = load_bundle(bundle_dir)?;
    if cells.is_empty() {
        return Err(ExperimentError::Malformed("bundle has no ok cells".into()));
    }
    let report_dir = bundle_dir.join("report");
    fs::create_dir_all(&report_dir)?;
    let summary = summarize(&spec, &manifest, &cells);

    // Aggregate per-epoch curves per group.
    let figure = &manifest.figure;
    let curve_file = fs::File::create(report_dir.join(format!("{figure}.csv")))?;
    let mut wtr = csv::Writer::from_writer(BufWriter::new(curve_file));
    wtr.write_record([
        "group",
        "epoch",
        "median_train_nll",
        "median_val_nll",
        "se_val_nll",
        "median_val_nll_per_site",
    ])
    .map_err(|e| ExperimentError::Malformed(e.to_string()))?;
    for group in &summary.groups {
        let members: Vec<&LoadedCell> = cells
            .iter()
            .filter(|c| group_label(spec.kind, &c.record) == group.group)
            .collect();
        let n_sites = (members[0].record.plan.l * members[0].record.plan.l) as f64;
        let max_epoch = members
            .iter()
            .map(|c| c.epochs.last().map(|e| e.0).unwrap_or(0))
            .max()
            .unwrap_or(0);
        for epoch in 0..=max_epoch {
            let trains: Vec<f64> = members
                .iter()
                .filter_map(|c| c.epochs.get(epoch).map(|e| e.1))
                .collect();
            let vals: Vec<f64> = members
                .iter()
                .filter_map(|c| c.epochs.get(epoch).map(|e| e.2))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mv = median(&vals);
            wtr.write_record([
                group.group.clone(),
                epoch.to_string(),
                median(&trains).to_string(),
                mv.to_string(),
                standard_error(&vals).to_string(),
                (mv / n_sites).to_string(),
            ])
            .map_err(|e| ExperimentError::Malformed(e.to_string()))?;
        }
    }
    wtr.flush()?;
    drop(wtr);

    // Anisotropy table (the correlation-snapshot view of path comparisons).
    if spec.kind == ExperimentKind::PathComparison {
        let aniso_file = fs::File::create(report_dir.join("fig2c.csv"))?;
        let mut wtr = csv::Writer::from_writer(BufWriter::new(aniso_file));
        wtr.write_record(["group", "checkpoint_epoch", "median_anisotropy", "se_anisotropy"])
            .map_err(|e| ExperimentError::Malformed(e.to_string()))?;
        for group in &summary.groups {
            for &(epoch, med, se) in &group.anisotropy_by_checkpoint {
                wtr.write_record([
                    group.group.clone(),
                    epoch.to_string(),
                    med.to_string(),
                    se.to_string(),
                ])
                .map_err(|e| ExperimentError::Malformed(e.to_string()))?;
            }
        }
        wtr.flush()?;
    }

    // Plateau table for beta scans.
    if spec.kind == ExperimentKind::BetaScan {
        let plateau_file = fs::File::create(report_dir.join("fig4_plateau.csv"))?;
        let mut wtr = csv::Writer::from_writer(BufWriter::new(plateau_file));
        wtr.write_record(["beta", "median_plateau_length", "median_final_val_nll_per_site"])
            .map_err(|e| ExperimentError::Malformed(e.to_string()))?;
        for group in &summary.groups {
            wtr.write_record([
                group.group.clone(),
                group.median_plateau_length.to_string(),
                group.median_final_val_nll_per_site.to_string(),
            ])
            .map_err(|e| ExperimentError::Malformed(e.to_string()))?;
        }
        wtr.flush()?;
    }

    let summary_file = fs::File::create(report_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(summary_file), &summary).map_err(json_err)?;
    Ok(summary)
}
