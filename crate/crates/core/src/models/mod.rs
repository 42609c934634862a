//! Autoregressive sequence models over path-flattened spin configurations.
//!
//! Both architectures factorize the joint distribution of a binary sequence
//! into per-position conditionals. A learnable start token feeds position 0,
//! so the first conditional is defined without special cases, and a two-way
//! softmax head keeps the recurrent and attention models uniform.
//!
//! Token convention: `0` is spin -1, `1` is spin +1, and token `t` of a
//! sequence is the spin at `PathOrdering::site(t)`.

mod rnn;
mod transformer;

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParameterSet, Tensor};
use crate::ising::{LoadedDataset, SpinConfiguration};
use crate::paths::{PathKind, PathOrdering};
use crate::rng::{child_seed, seeded};

pub use rnn::{RnnConfig, RnnModel};
pub use transformer::{TransformerConfig, TransformerModel};

/// Token id for spin -1.
pub const TOKEN_ZERO: usize = 0;
/// Token id for spin +1.
pub const TOKEN_ONE: usize = 1;
/// Learnable start-of-sequence token id.
pub const START_TOKEN: usize = 2;
/// Embedding-table rows: the two spin tokens plus the start token.
pub const VOCAB: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("sequence length {got} does not match model sequence length {expect}")]
    SequenceLength { got: usize, expect: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

/// Which architecture a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rnn,
    Transformer,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(ModelKind::Rnn),
            "transformer" => Ok(ModelKind::Transformer),
            other => Err(ModelError::MalformedCheckpoint(format!(
                "unknown model kind `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One path-flattened configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub l: usize,
    pub path_kind: PathKind,
    pub tokens: Vec<u8>,
}

impl TokenSequence {
    /// Flatten a spin configuration along `path`.
    pub fn from_config(config: &SpinConfiguration, path: &PathOrdering) -> Self {
        assert_eq!(config.side(), path.side());
        let tokens = path
            .order()
            .iter()
            .map(|s| if config.get(s.x, s.y) > 0 { 1 } else { 0 })
            .collect();
        Self {
            l: path.side(),
            path_kind: path.kind(),
            tokens,
        }
    }

    /// Invert the flattening back to a spin configuration.
    pub fn to_config(&self, path: &PathOrdering) -> SpinConfiguration {
        assert_eq!(self.path_kind, path.kind());
        assert_eq!(self.l, path.side());
        let mut spins = vec![0i8; self.l * self.l];
        for (t, site) in path.order().iter().enumerate() {
            spins[site.y * self.l + site.x] = if self.tokens[t] == 1 { 1 } else { -1 };
        }
        SpinConfiguration::from_spins(self.l, spins).expect("tokens map to ±1")
    }
}

/// Provenance carried along with a flattened dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub seed: u64,
    pub algorithm: String,
}

/// A set of spin configurations flattened to token sequences along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub l: usize,
    pub beta: f64,
    pub path_kind: PathKind,
    pub seq_len: usize,
    pub provenance: DatasetProvenance,
    n: usize,
    tokens: Vec<u8>,
}

impl SequenceDataset {
    pub fn from_configs(
        configs: &[SpinConfiguration],
        path: &PathOrdering,
        beta: f64,
        provenance: DatasetProvenance,
    ) -> Self {
        let seq_len = path.len();
        let mut tokens = Vec::with_capacity(configs.len() * seq_len);
        for config in configs {
            for site in path.order() {
                tokens.push(if config.get(site.x, site.y) > 0 { 1 } else { 0 });
            }
        }
        Self {
            l: path.side(),
            beta,
            path_kind: path.kind(),
            seq_len,
            provenance,
            n: configs.len(),
            tokens,
        }
    }

    /// Flatten a dataset loaded from the on-disk format.
    pub fn from_loaded(loaded: &LoadedDataset, path: &PathOrdering) -> Self {
        Self::from_configs(
            &loaded.configs,
            path,
            loaded.header.beta,
            DatasetProvenance {
                seed: loaded.header.seed,
                algorithm: loaded.header.algorithm.clone(),
            },
        )
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sequence(&self, i: usize) -> &[u8] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Gather rows `indices` into one flat batch buffer.
    pub fn gather(&self, indices: &[usize]) -> Vec<u8> {
        let mut out = Vec::with_capacity(indices.len() * self.seq_len);
        for &i in indices {
            out.extend_from_slice(self.sequence(i));
        }
        out
    }
}

/// Model input ids: the start token followed by all but the last target.
pub(crate) fn input_ids(tokens_flat: &[u8], batch: usize, n: usize) -> Vec<usize> {
    debug_assert_eq!(tokens_flat.len(), batch * n);
    let mut ids = Vec::with_capacity(batch * n);
    for b in 0..batch {
        ids.push(START_TOKEN);
        for t in 0..n - 1 {
            ids.push(tokens_flat[b * n + t] as usize);
        }
    }
    ids
}

/// Target ids (the observed tokens themselves).
pub(crate) fn target_ids(tokens_flat: &[u8]) -> Vec<usize> {
    tokens_flat.iter().map(|&t| t as usize).collect()
}

/// Either architecture behind one interface.
#[derive(Debug, Clone)]
pub enum ArModel {
    Rnn(RnnModel),
    Transformer(TransformerModel),
}

impl ArModel {
    /// Build a model with the default (reported-optimum) hyperparameters for
    /// a given sequence length.
    pub fn new(kind: ModelKind, seq_len: usize, seed: u64) -> Self {
        match kind {
            ModelKind::Rnn => ArModel::Rnn(RnnModel::new(RnnConfig::new(seq_len), seed)),
            ModelKind::Transformer => {
                ArModel::Transformer(TransformerModel::new(TransformerConfig::new(seq_len), seed))
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ArModel::Rnn(_) => ModelKind::Rnn,
            ArModel::Transformer(_) => ModelKind::Transformer,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            ArModel::Rnn(m) => m.config().seq_len,
            ArModel::Transformer(m) => m.config().seq_len,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        match self {
            ArModel::Rnn(m) => m.params(),
            ArModel::Transformer(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        match self {
            ArModel::Rnn(m) => m.params_mut(),
            ArModel::Transformer(m) => m.params_mut(),
        }
    }

    /// Zero the output head, making every conditional exactly uniform.
    pub fn zero_output_head(&mut self) {
        let params = self.params_mut();
        for name in ["w_out", "b_out", "head.w", "head.b"] {
            if let Some(t) = params.by_name_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    fn check_len(&self, tokens_flat: &[u8], batch: usize) -> Result<(), ModelError> {
        let expect = self.seq_len() * batch;
        if tokens_flat.len() != expect {
            return Err(ModelError::SequenceLength {
                got: tokens_flat.len(),
                expect,
            });
        }
        Ok(())
    }

    /// Build the differentiable batch graph. Returns the bound parameter
    /// nodes (canonical order) and the `(batch, 1)` per-sequence total
    /// log-probability node.
    pub fn seq_logprob_graph(
        &self,
        g: &mut Graph,
        tokens_flat: &[u8],
        batch: usize,
    ) -> Result<(Vec<NodeId>, NodeId), ModelError> {
        self.check_len(tokens_flat, batch)?;
        match self {
            ArModel::Rnn(m) => m.seq_logprob_graph(g, tokens_flat, batch),
            ArModel::Transformer(m) => m.seq_logprob_graph(g, tokens_flat, batch),
        }
    }

    /// Tape-free per-sequence total log-probabilities for a flat batch.
    pub fn eval_seq_logprobs(&self, tokens_flat: &[u8], batch: usize) -> Result<Vec<f64>, ModelError> {
        self.check_len(tokens_flat, batch)?;
        Ok(match self {
            ArModel::Rnn(m) => m.eval_seq_logprobs(tokens_flat, batch),
            ArModel::Transformer(m) => m.eval_seq_logprobs(tokens_flat, batch),
        })
    }

    /// Per-position `log P(token_t | tokens_<t)` for one sequence.
    pub fn conditional_logprobs(&self, tokens: &[u8]) -> Result<Vec<f64>, ModelError> {
        self.check_len(tokens, 1)?;
        Ok(match self {
            ArModel::Rnn(m) => m.conditional_logprobs(tokens),
            ArModel::Transformer(m) => m.conditional_logprobs(tokens),
        })
    }

    /// Mean negative log-likelihood of a batch, evaluated without a tape.
    pub fn eval_nll(&self, tokens_flat: &[u8], batch: usize) -> Result<f64, ModelError> {
        let lps = self.eval_seq_logprobs(tokens_flat, batch)?;
        Ok(-lps.iter().sum::<f64>() / batch as f64)
    }

    /// Ancestral sampling of `count` sequences; also returns each sampled
    /// sequence's total log-probability under the model.
    pub fn generate(&self, count: usize, rng: &mut impl Rng) -> (Vec<Vec<u8>>, Vec<f64>) {
        match self {
            ArModel::Rnn(m) => m.generate(count, rng),
            ArModel::Transformer(m) => m.generate(count, rng),
        }
    }

    /// JSON description of the architecture configuration.
    pub fn config_json(&self) -> serde_json::Value {
        match self {
            ArModel::Rnn(m) => serde_json::to_value(m.config()).expect("serializable"),
            ArModel::Transformer(m) => serde_json::to_value(m.config()).expect("serializable"),
        }
    }
}

/// Total model log-probability of every enumerable lattice state, flattened
/// along `path`, evaluated in batches. Indexed by oracle state id.
pub fn all_state_logprobs(model: &ArModel, path: &PathOrdering) -> Result<Vec<f64>, ModelError> {
    let n = path.len();
    assert!(n <= 16, "state enumeration is limited to L <= 4");
    let n_states = 1usize << n;
    let chunk = 512.min(n_states);
    let mut out = Vec::with_capacity(n_states);
    let mut buf = Vec::with_capacity(chunk * n);
    let mut start = 0;
    while start < n_states {
        let end = (start + chunk).min(n_states);
        buf.clear();
        for state in start..end {
            let config = crate::oracle::config_for_state(path.side(), state);
            for site in path.order() {
                buf.push(if config.get(site.x, site.y) > 0 { 1 } else { 0 });
            }
        }
        out.extend(model.eval_seq_logprobs(&buf, end - start)?);
        start = end;
    }
    Ok(out)
}

const CHECKPOINT_FORMAT: &str = "arising-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamBlockMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    architecture: ModelKind,
    config: serde_json::Value,
    seed: u64,
    epoch: usize,
    params: Vec<ParamBlockMeta>,
}

/// Checkpoint metadata returned on load.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub architecture: ModelKind,
    pub seed: u64,
    pub epoch: usize,
}

/// Write a versioned checkpoint: one JSON header line, then the raw
/// little-endian f64 blocks of every parameter in canonical order.
pub fn save_checkpoint(
    model: &ArModel,
    seed: u64,
    epoch: usize,
    mut w: impl Write,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        architecture: model.kind(),
        config: model.config_json(),
        seed,
        epoch,
        params: model
            .params()
            .entries()
            .map(|(name, t)| ParamBlockMeta {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let line = serde_json::to_string(&header)
        .map_err(|e| ModelError::MalformedCheckpoint(e.to_string()))?;
    writeln!(w, "{line}")?;
    for (_, t) in model.params().entries() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(mut r: impl BufRead) -> Result<(ArModel, CheckpointMeta), ModelError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| ModelError::MalformedCheckpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(ModelError::MalformedCheckpoint(format!(
            "unsupported format {}/{}",
            header.format, header.version
        )));
    }
    let mut model = match header.architecture {
        ModelKind::Rnn => {
            let cfg: RnnConfig = serde_json::from_value(header.config.clone())
                .map_err(|e| ModelError::MalformedCheckpoint(format!("bad rnn config: {e}")))?;
            ArModel::Rnn(RnnModel::new(cfg, header.seed))
        }
        ModelKind::Transformer => {
            let cfg: TransformerConfig = serde_json::from_value(header.config.clone())
                .map_err(|e| {
                    ModelError::MalformedCheckpoint(format!("bad transformer config: {e}"))
                })?;
            ArModel::Transformer(TransformerModel::new(cfg, header.seed))
        }
    };
    {
        let params = model.params_mut();
        if params.len() != header.params.len() {
            return Err(ModelError::MalformedCheckpoint(format!(
                "{} parameter blocks promised, model has {}",
                header.params.len(),
                params.len()
            )));
        }
        for (meta, (name, t)) in header.params.iter().zip(params.entries()) {
            if name != meta.name || t.shape() != (meta.rows, meta.cols) {
                return Err(ModelError::MalformedCheckpoint(format!(
                    "parameter block `{}` {}x{} does not match model `{name}` {}x{}",
                    meta.name,
                    meta.rows,
                    meta.cols,
                    t.rows(),
                    t.cols()
                )));
            }
        }
        let mut buf8 = [0u8; 8];
        for idx in 0..params.len() {
            let t = params.tensor_mut(idx);
            for i in 0..t.len() {
                r.read_exact(&mut buf8)?;
                let row = i / t.cols();
                let col = i % t.cols();
                *t.at_mut(row, col) = f64::from_le_bytes(buf8);
            }
        }
    }
    Ok((
        model,
        CheckpointMeta {
            architecture: header.architecture,
            seed: header.seed,
            epoch: header.epoch,
        },
    ))
}

/// Seeded parameter initialization shared by both architectures.
pub(crate) fn init_rng(seed: u64) -> crate::rng::SeedRng {
    seeded(child_seed(seed, "model-init"))
}

pub(crate) fn ids_arc(ids: Vec<usize>) -> Arc<Vec<usize>> {
    Arc::new(ids)
}

/// Gather rows of a table tensor by id (tape-free embedding lookup).
pub(crate) fn gather_rows(table: &Tensor, ids: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(ids.len(), table.cols());
    for (r, &id) in ids.iter().enumerate() {
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    out
}
