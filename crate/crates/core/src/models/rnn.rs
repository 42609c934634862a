//! Single-layer unidirectional gated recurrent sequence model.
//!
//! The cell is a standard GRU; correlations propagate only through the
//! hidden state, so conditional `t` sees tokens `< t` exclusively via the
//! recurrence. The initial hidden state is itself a learnable parameter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, NodeId, ParameterSet, Tensor};

use super::{gather_rows, ids_arc, init_rng, input_ids, target_ids, ModelError, START_TOKEN, VOCAB};

/// Hidden size defaults to the reported optimum of 16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub seq_len: usize,
    pub hidden: usize,
}

impl RnnConfig {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            hidden: 16,
        }
    }
}

/// Canonical parameter order; checkpoints and the optimizer rely on it.
const PARAM_EMBED: usize = 0;
const PARAM_H0: usize = 1;
const PARAM_W_UPDATE_IN: usize = 2;
const PARAM_W_UPDATE_H: usize = 3;
const PARAM_B_UPDATE: usize = 4;
const PARAM_W_RESET_IN: usize = 5;
const PARAM_W_RESET_H: usize = 6;
const PARAM_B_RESET: usize = 7;
const PARAM_W_CAND_IN: usize = 8;
const PARAM_W_CAND_H: usize = 9;
const PARAM_B_CAND: usize = 10;
const PARAM_W_OUT: usize = 11;
const PARAM_B_OUT: usize = 12;

#[derive(Debug, Clone)]
pub struct RnnModel {
    config: RnnConfig,
    params: ParameterSet,
}

impl RnnModel {
    pub fn new(config: RnnConfig, seed: u64) -> Self {
        let h = config.hidden;
        let mut rng = init_rng(seed);
        let mut params = ParameterSet::new();
        params.push("embed", Tensor::uniform_init(VOCAB, h, VOCAB, &mut rng));
        params.push("h0", Tensor::zeros(1, h));
        for gate in ["update", "reset", "cand"] {
            params.push(
                format!("w_{gate}_in"),
                Tensor::uniform_init(h, h, h, &mut rng),
            );
            params.push(
                format!("w_{gate}_h"),
                Tensor::uniform_init(h, h, h, &mut rng),
            );
            params.push(format!("b_{gate}"), Tensor::zeros(1, h));
        }
        params.push("w_out", Tensor::uniform_init(h, 2, h, &mut rng));
        params.push("b_out", Tensor::zeros(1, 2));
        Self { config, params }
    }

    pub fn config(&self) -> &RnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub(super) fn seq_logprob_graph(
        &self,
        g: &mut Graph,
        tokens_flat: &[u8],
        batch: usize,
    ) -> Result<(Vec<NodeId>, NodeId), ModelError> {
        let n = self.config.seq_len;
        let bound = self.params.bind(g);
        let p = |i: usize| bound[i];
        let inputs = input_ids(tokens_flat, batch, n);
        let targets = target_ids(tokens_flat);
        // Broadcast the learnable initial state over the batch.
        let mut h = g.embedding(p(PARAM_H0), ids_arc(vec![0; batch]))?;
        let mut total: Option<NodeId> = None;
        for t in 0..n {
            let step_ids: Vec<usize> = (0..batch).map(|b| inputs[b * n + t]).collect();
            let x = g.embedding(p(PARAM_EMBED), ids_arc(step_ids))?;
            let h_new = {
                let z = g.linear2(
                    x,
                    p(PARAM_W_UPDATE_IN),
                    h,
                    p(PARAM_W_UPDATE_H),
                    p(PARAM_B_UPDATE),
                    Activation::Sigmoid,
                )?;
                let r = g.linear2(
                    x,
                    p(PARAM_W_RESET_IN),
                    h,
                    p(PARAM_W_RESET_H),
                    p(PARAM_B_RESET),
                    Activation::Sigmoid,
                )?;
                let gated = g.hadamard(r, h)?;
                let cand = g.linear2(
                    x,
                    p(PARAM_W_CAND_IN),
                    gated,
                    p(PARAM_W_CAND_H),
                    p(PARAM_B_CAND),
                    Activation::Tanh,
                )?;
                // h' = (1 - z) h + z c, written as h + z (c - h).
                let delta = g.sub(cand, h)?;
                let gated_delta = g.hadamard(z, delta)?;
                g.add(h, gated_delta)?
            };
            h = h_new;
            let logits = g.linear(h, p(PARAM_W_OUT), p(PARAM_B_OUT), Activation::Identity)?;
            let logp = g.log_softmax_rows(logits);
            let step_targets: Vec<usize> = (0..batch).map(|b| targets[b * n + t]).collect();
            let picked = g.pick(logp, ids_arc(step_targets))?;
            total = Some(match total {
                None => picked,
                Some(acc) => g.add(acc, picked)?,
            });
        }
        Ok((bound, total.expect("seq_len > 0")))
    }

    /// One concrete GRU step for a batch of embedded inputs.
    fn step(&self, h: &Tensor, x: &Tensor) -> Tensor {
        use crate::autodiff::tensor::{add_row_inplace, matmul, sigmoid_inplace, tanh_inplace};
        let p = &self.params;
        let hcols = self.config.hidden;
        let mut z = matmul(x, p.tensor(PARAM_W_UPDATE_IN));
        add2(&mut z, &matmul(h, p.tensor(PARAM_W_UPDATE_H)));
        add_row_inplace(z.data_mut(), hcols, p.tensor(PARAM_B_UPDATE).data());
        sigmoid_inplace(z.data_mut());
        let mut r = matmul(x, p.tensor(PARAM_W_RESET_IN));
        add2(&mut r, &matmul(h, p.tensor(PARAM_W_RESET_H)));
        add_row_inplace(r.data_mut(), hcols, p.tensor(PARAM_B_RESET).data());
        sigmoid_inplace(r.data_mut());
        let mut gated = h.clone();
        for (gv, rv) in gated.data_mut().iter_mut().zip(r.data()) {
            *gv *= rv;
        }
        let mut cand = matmul(x, p.tensor(PARAM_W_CAND_IN));
        add2(&mut cand, &matmul(&gated, p.tensor(PARAM_W_CAND_H)));
        add_row_inplace(cand.data_mut(), hcols, p.tensor(PARAM_B_CAND).data());
        tanh_inplace(cand.data_mut());
        let mut out = h.clone();
        for ((o, zv), cv) in out.data_mut().iter_mut().zip(z.data()).zip(cand.data()) {
            *o += zv * (cv - *o);
        }
        out
    }

    /// Two-way log-probabilities of the next token for each batch row.
    fn head_logprobs(&self, h: &Tensor) -> Tensor {
        use crate::autodiff::tensor::{add_row_inplace, log_softmax_rows_inplace, matmul};
        let mut logits = matmul(h, self.params.tensor(PARAM_W_OUT));
        add_row_inplace(logits.data_mut(), 2, self.params.tensor(PARAM_B_OUT).data());
        log_softmax_rows_inplace(logits.data_mut(), 2);
        logits
    }

    fn initial_state(&self, batch: usize) -> Tensor {
        gather_rows(self.params.tensor(PARAM_H0), &vec![0; batch])
    }

    pub(super) fn eval_seq_logprobs(&self, tokens_flat: &[u8], batch: usize) -> Vec<f64> {
        let n = self.config.seq_len;
        let inputs = input_ids(tokens_flat, batch, n);
        let mut h = self.initial_state(batch);
        let mut totals = vec![0.0; batch];
        for t in 0..n {
            let step_ids: Vec<usize> = (0..batch).map(|b| inputs[b * n + t]).collect();
            let x = gather_rows(self.params.tensor(PARAM_EMBED), &step_ids);
            h = self.step(&h, &x);
            let logp = self.head_logprobs(&h);
            for b in 0..batch {
                totals[b] += logp.at(b, tokens_flat[b * n + t] as usize);
            }
        }
        totals
    }

    pub(super) fn conditional_logprobs(&self, tokens: &[u8]) -> Vec<f64> {
        let n = self.config.seq_len;
        let mut h = self.initial_state(1);
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let id = if t == 0 {
                START_TOKEN
            } else {
                tokens[t - 1] as usize
            };
            let x = gather_rows(self.params.tensor(PARAM_EMBED), &[id]);
            h = self.step(&h, &x);
            let logp = self.head_logprobs(&h);
            out.push(logp.at(0, tokens[t] as usize));
        }
        out
    }

    pub(super) fn generate(&self, count: usize, rng: &mut impl Rng) -> (Vec<Vec<u8>>, Vec<f64>) {
        let n = self.config.seq_len;
        let mut seqs = vec![Vec::with_capacity(n); count];
        let mut logprobs = vec![0.0; count];
        let mut h = self.initial_state(count);
        let mut prev: Vec<usize> = vec![START_TOKEN; count];
        for _ in 0..n {
            let x = gather_rows(self.params.tensor(PARAM_EMBED), &prev);
            h = self.step(&h, &x);
            let logp = self.head_logprobs(&h);
            for b in 0..count {
                let p_one = logp.at(b, 1).exp();
                let tok = usize::from(rng.gen::<f64>() < p_one);
                seqs[b].push(tok as u8);
                logprobs[b] += logp.at(b, tok);
                prev[b] = tok;
            }
        }
        (seqs, logprobs)
    }
}

fn add2(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}
