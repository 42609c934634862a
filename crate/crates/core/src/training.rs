//! Mini-batch NLL training with validation traces and correlation
//! diagnostics.
//!
//! One epoch is a full pass over the shuffled training split. The recorded
//! per-epoch training NLL is the running mean over the epoch's batches
//! (each measured before its update); validation NLL is evaluated after the
//! epoch. At configured checkpoint epochs the model is sampled and the
//! two-point correlation table plus its anisotropy score are recorded.
//!
//! Everything is deterministic in `(config, dataset)`: shuffling, the
//! per-checkpoint sampling streams, and the update arithmetic are all
//! derived from the run seed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamHyper, AdamState, AutodiffError, Graph};
use crate::correlations::{CorrelationAccumulator, CorrelationTable};
use crate::models::{ArModel, ModelError, ModelKind, SequenceDataset};
use crate::oracle::ExactDistribution;
use crate::paths::{PathKind, PathOrdering};
use crate::rng::{child_seed, seeded};

/// Guard for the anisotropy normalization when correlations vanish.
pub const ANISOTROPY_EPS: f64 = 1e-9;

/// Validation batches are evaluated in fixed-size chunks so results do not
/// depend on the validation-set size.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset does not match model/path: {0}")]
    DataMismatch(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub split: f64,
    pub seed: u64,
    /// Epochs (1-based; 0 means before any update) at which correlation
    /// diagnostics run.
    pub checkpoint_epochs: Vec<usize>,
    /// Model samples drawn per diagnostic checkpoint.
    pub n_model_samples: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 100,
            lr: 1e-3,
            split: 0.8,
            seed,
            checkpoint_epochs: Vec::new(),
            n_model_samples: 10_000,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(TrainError::Config(format!("split {} not in (0, 1)", self.split)));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub anisotropy: f64,
    pub n_model_samples: usize,
    pub correlation: CorrelationTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub model: ModelKind,
    pub path: PathKind,
    pub l: usize,
    pub beta: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub split: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub provenance: TrainProvenance,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl TrainingTrace {
    pub fn final_val_nll(&self) -> f64 {
        self.epochs.last().map(|e| e.val_nll).unwrap_or(f64::NAN)
    }

    pub fn best_val_nll(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_nll)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Mean NLL over a token matrix, evaluated tape-free in fixed chunks.
fn eval_split_nll(model: &ArModel, data: &SequenceDataset, indices: &[usize]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let tokens = data.gather(chunk);
        let lps = model.eval_seq_logprobs(&tokens, chunk.len())?;
        total -= lps.iter().sum::<f64>();
    }
    Ok(total / indices.len() as f64)
}

/// Train `model` in place; returns the trace. The dataset must be flattened
/// along `path` and match the model's sequence length.
pub fn train(
    model: &mut ArModel,
    data: &SequenceDataset,
    path: &PathOrdering,
    cfg: &TrainConfig,
) -> Result<TrainingTrace, TrainError> {
    cfg.validate()?;
    if data.path_kind != path.kind() || data.l != path.side() {
        return Err(TrainError::DataMismatch(format!(
            "dataset is {} L={}, path is {} L={}",
            data.path_kind,
            data.l,
            path.kind(),
            path.side()
        )));
    }
    if data.seq_len != model.seq_len() {
        return Err(TrainError::DataMismatch(format!(
            "dataset sequences have length {}, model expects {}",
            data.seq_len,
            model.seq_len()
        )));
    }
    let n = data.len();
    let n_train = ((n as f64) * cfg.split).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(TrainError::Config(format!(
            "split {} leaves an empty train or validation set for {n} samples",
            cfg.split
        )));
    }
    let train_indices: Vec<usize> = (0..n_train).collect();
    let val_indices: Vec<usize> = (n_train..n).collect();

    let provenance = TrainProvenance {
        model: model.kind(),
        path: path.kind(),
        l: data.l,
        beta: data.beta,
        seed: cfg.seed,
        n_train,
        n_val: val_indices.len(),
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        split: cfg.split,
        epochs: cfg.epochs,
    };

    let mut shuffle_rng = seeded(child_seed(cfg.seed, "shuffle"));
    let mut adam = AdamState::new(model.params().flat_len(), AdamHyper::with_lr(cfg.lr));
    let mut trace = TrainingTrace {
        provenance,
        epochs: Vec::with_capacity(cfg.epochs + 1),
        checkpoints: Vec::new(),
    };

    // Epoch 0: the untouched model.
    trace.epochs.push(EpochRecord {
        epoch: 0,
        train_nll: eval_split_nll(model, data, &train_indices)?,
        val_nll: eval_split_nll(model, data, &val_indices)?,
    });
    if cfg.checkpoint_epochs.contains(&0) {
        trace
            .checkpoints
            .push(diagnose(model, path, cfg, 0)?);
    }

    let mut order = train_indices.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut nll_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tokens = data.gather(batch);
            let mut g = Graph::new();
            let (bound, per_seq) = model.seq_logprob_graph(&mut g, &tokens, batch.len())?;
            let neg = g.scale(per_seq, -1.0);
            let loss = g.mean_all(neg);
            let loss_value = g.value(loss).at(0, 0);
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss: loss_value,
                });
            }
            nll_sum += loss_value * batch.len() as f64;
            g.backward(loss)?;
            let grads = model.params().collect_grads(&g, &bound);
            adam_step(model.params_mut(), &grads, &mut adam)?;
        }
        let val_nll = eval_split_nll(model, data, &val_indices)?;
        trace.epochs.push(EpochRecord {
            epoch,
            train_nll: nll_sum / n_train as f64,
            val_nll,
        });
        if cfg.checkpoint_epochs.contains(&epoch) {
            trace.checkpoints.push(diagnose(model, path, cfg, epoch)?);
        }
    }
    Ok(trace)
}

fn diagnose(
    model: &ArModel,
    path: &PathOrdering,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<CheckpointRecord, TrainError> {
    let mut rng = seeded(child_seed(cfg.seed, &format!("diagnostics-{epoch}")));
    let correlation = model_correlation(model, cfg.n_model_samples, path, &mut rng);
    Ok(CheckpointRecord {
        epoch,
        anisotropy: anisotropy_score(&correlation),
        n_model_samples: cfg.n_model_samples,
        correlation,
    })
}

/// Sample `n_samples` sequences from the model, map them back onto the
/// lattice through the path inverse, and estimate the connected two-point
/// correlation table.
pub fn model_correlation(
    model: &ArModel,
    n_samples: usize,
    path: &PathOrdering,
    rng: &mut impl rand::Rng,
) -> CorrelationTable {
    let l = path.side();
    let mut acc = CorrelationAccumulator::new(l);
    let (seqs, _) = model.generate(n_samples, rng);
    let mut spins = vec![0i8; l * l];
    for seq in &seqs {
        for (t, site) in path.order().iter().enumerate() {
            spins[site.y * l + site.x] = if seq[t] == 1 { 1 } else { -1 };
        }
        acc.push(&spins);
    }
    acc.table()
}

/// Normalized axial asymmetry of a correlation table:
/// `sum_r |G(r,0)-G(0,r)| / sum_r (|G(r,0)|+|G(0,r)|+eps)` over
/// `r = 1..=L/2`. Zero for isotropic tables, close to one when correlations
/// run along a single axis.
pub fn anisotropy_score(table: &CorrelationTable) -> f64 {
    let half = table.side() / 2;
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 1..=half {
        let gx = table.g(r as i64, 0);
        let gy = table.g(0, r as i64);
        num += (gx - gy).abs();
        den += gx.abs() + gy.abs() + ANISOTROPY_EPS;
    }
    num / den
}

/// First epoch whose validation NLL is within `(1 + tol)` of `target_nll`.
pub fn epochs_to_threshold(trace: &TrainingTrace, target_nll: f64, tol: f64) -> Option<usize> {
    trace
        .epochs
        .iter()
        .find(|e| e.val_nll <= (1.0 + tol) * target_nll)
        .map(|e| e.epoch)
}

/// Fit a model directly to an exact distribution by full-batch gradient
/// descent on the cross-entropy `-sum_s p(s) log q(s)` over every state.
/// Used to probe expressiveness floors without sampling noise.
pub fn fit_to_distribution(
    model: &mut ArModel,
    dist: &ExactDistribution,
    path: &PathOrdering,
    steps: usize,
    lr: f64,
) -> Result<(), TrainError> {
    let n_states = dist.n_states();
    let n = path.len();
    let mut tokens = Vec::with_capacity(n_states * n);
    for state in 0..n_states {
        let config = crate::oracle::config_for_state(path.side(), state);
        for site in path.order() {
            tokens.push(if config.get(site.x, site.y) > 0 { 1 } else { 0 });
        }
    }
    let probs: std::sync::Arc<Vec<f64>> =
        std::sync::Arc::new((0..n_states).map(|s| dist.prob(s)).collect());
    let mut adam = AdamState::new(model.params().flat_len(), AdamHyper::with_lr(lr));
    for _ in 0..steps {
        let mut g = Graph::new();
        let (bound, per_seq) = model.seq_logprob_graph(&mut g, &tokens, n_states)?;
        let cross = g.dot_const(per_seq, std::sync::Arc::clone(&probs))?;
        let loss = g.scale(cross, -1.0);
        g.backward(loss)?;
        let grads = model.params().collect_grads(&g, &bound);
        adam_step(model.params_mut(), &grads, &mut adam)?;
    }
    Ok(())
}

/// Write the per-epoch trace in the `epoch,train_nll,val_nll` CSV format.
pub fn write_trace_csv(trace: &TrainingTrace, w: impl std::io::Write) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["epoch", "train_nll", "val_nll"])?;
    for e in &trace.epochs {
        wtr.write_record([
            e.epoch.to_string(),
            e.train_nll.to_string(),
            e.val_nll.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
