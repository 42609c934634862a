//! Finite-difference verification of every graph op and of the end-to-end
//! NLL gradients of both architectures.
//!
//! The numeric side only calls the forward pass, so it is independent of
//! the backward rules it checks. Outputs are contracted to a scalar through
//! a random linear functional so no gradient error can hide by cancelling
//! in a plain mean.

use std::sync::Arc;

use arising_core::autodiff::gradcheck::{central_difference, max_relative_error, FD_STEP, FD_TOL};
use arising_core::autodiff::{Activation, Graph, Mask, NodeId, Tensor};
use arising_core::models::{ArModel, ModelKind, RnnConfig, RnnModel, TransformerConfig, TransformerModel};
use arising_core::rng::seeded;
use rand::Rng;

const INSTANCES: usize = 10;

struct Inputs {
    tensors: Vec<Tensor>,
}

impl Inputs {
    fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn with_flat(&self, flat: &[f64]) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.tensors.len());
        let mut off = 0;
        for t in &self.tensors {
            let n = t.len();
            out.push(Tensor::from_vec(
                t.rows(),
                t.cols(),
                flat[off..off + n].to_vec(),
            ));
            off += n;
        }
        out
    }
}

fn rand_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
    )
}

/// Check one op over `INSTANCES` random instances. `gen` draws the leaf
/// tensors, `build` assembles a scalar root from the bound leaves.
fn check_op(
    name: &str,
    gen: impl Fn(&mut dyn FnMut(usize, usize, f64, f64) -> Tensor) -> Vec<Tensor>,
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
) {
    for instance in 0..INSTANCES {
        let mut rng = seeded(1000 + instance as u64);
        let mut draw = |r: usize, c: usize, lo: f64, hi: f64| rand_tensor(r, c, lo, hi, &mut rng);
        let inputs = Inputs {
            tensors: gen(&mut draw),
        };
        let x0 = inputs.flat();
        let eval = |flat: &[f64]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs
                .with_flat(flat)
                .into_iter()
                .map(|t| g.leaf(t))
                .collect();
            let root = build(&mut g, &ids);
            g.value(root).at(0, 0)
        };
        let numeric = central_difference(eval, &x0, FD_STEP);
        let analytic = {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs
                .with_flat(&x0)
                .into_iter()
                .map(|t| g.leaf(t))
                .collect();
            let root = build(&mut g, &ids);
            g.backward(root).unwrap();
            let mut flat = Vec::with_capacity(x0.len());
            for (id, t) in ids.iter().zip(&inputs.tensors) {
                match g.grad(*id) {
                    Some(grad) => flat.extend_from_slice(grad.data()),
                    None => flat.extend(std::iter::repeat(0.0).take(t.len())),
                }
            }
            flat
        };
        let err = max_relative_error(&analytic, &numeric);
        assert!(
            err < FD_TOL,
            "{name} instance {instance}: max relative error {err:e}"
        );
    }
}

/// Contract an arbitrary output to a scalar through the last generated
/// tensor, which must be the same shape as `out`.
fn contract(g: &mut Graph, out: NodeId, weight: NodeId) -> NodeId {
    let prod = g.hadamard(out, weight).unwrap();
    g.mean_all(prod)
}

#[test]
fn grad_matmul() {
    check_op(
        "matmul",
        |d| vec![d(3, 4, -1.0, 1.0), d(4, 2, -1.0, 1.0), d(3, 2, -1.0, 1.0)],
        |g, ids| {
            let out = g.matmul(ids[0], ids[1]).unwrap();
            contract(g, out, ids[2])
        },
    );
}

#[test]
fn grad_add_sub_hadamard() {
    check_op(
        "add",
        |d| vec![d(3, 3, -1.0, 1.0), d(3, 3, -1.0, 1.0), d(3, 3, -1.0, 1.0)],
        |g, ids| {
            let out = g.add(ids[0], ids[1]).unwrap();
            contract(g, out, ids[2])
        },
    );
    check_op(
        "sub",
        |d| vec![d(3, 3, -1.0, 1.0), d(3, 3, -1.0, 1.0), d(3, 3, -1.0, 1.0)],
        |g, ids| {
            let out = g.sub(ids[0], ids[1]).unwrap();
            contract(g, out, ids[2])
        },
    );
    check_op(
        "hadamard",
        |d| vec![d(3, 3, -1.0, 1.0), d(3, 3, -1.0, 1.0), d(3, 3, -1.0, 1.0)],
        |g, ids| {
            let out = g.hadamard(ids[0], ids[1]).unwrap();
            contract(g, out, ids[2])
        },
    );
}

#[test]
fn grad_row_broadcasts() {
    check_op(
        "add_row",
        |d| vec![d(4, 3, -1.0, 1.0), d(1, 3, -1.0, 1.0), d(4, 3, -1.0, 1.0)],
        |g, ids| {
            let out = g.add_row(ids[0], ids[1]).unwrap();
            contract(g, out, ids[2])
        },
    );
    check_op(
        "add_tiled_rows",
        |d| vec![d(6, 3, -1.0, 1.0), d(2, 3, -1.0, 1.0), d(6, 3, -1.0, 1.0)],
        |g, ids| {
            let out = g.add_tiled_rows(ids[0], ids[1]).unwrap();
            contract(g, out, ids[2])
        },
    );
}

#[test]
fn grad_scalar_maps() {
    check_op(
        "scale+add_const",
        |d| vec![d(3, 4, -1.0, 1.0), d(3, 4, -1.0, 1.0)],
        |g, ids| {
            let s = g.scale(ids[0], -1.7);
            let out = g.add_const(s, 0.3);
            contract(g, out, ids[1])
        },
    );
    check_op(
        "tanh",
        |d| vec![d(3, 4, -2.0, 2.0), d(3, 4, -1.0, 1.0)],
        |g, ids| {
            let out = g.tanh(ids[0]);
            contract(g, out, ids[1])
        },
    );
    check_op(
        "sigmoid",
        |d| vec![d(3, 4, -2.0, 2.0), d(3, 4, -1.0, 1.0)],
        |g, ids| {
            let out = g.sigmoid(ids[0]);
            contract(g, out, ids[1])
        },
    );
    check_op(
        "exp",
        |d| vec![d(3, 4, -1.5, 1.5), d(3, 4, -1.0, 1.0)],
        |g, ids| {
            let out = g.exp(ids[0]);
            contract(g, out, ids[1])
        },
    );
    check_op(
        "log",
        |d| vec![d(3, 4, 0.5, 3.0), d(3, 4, -1.0, 1.0)],
        |g, ids| {
            let out = g.log(ids[0]);
            contract(g, out, ids[1])
        },
    );
}

#[test]
fn grad_softmaxes() {
    check_op(
        "softmax_rows",
        |d| vec![d(4, 5, -2.0, 2.0), d(4, 5, -1.0, 1.0)],
        |g, ids| {
            let out = g.softmax_rows(ids[0]);
            contract(g, out, ids[1])
        },
    );
    check_op(
        "log_softmax_rows",
        |d| vec![d(4, 5, -2.0, 2.0), d(4, 5, -1.0, 1.0)],
        |g, ids| {
            let out = g.log_softmax_rows(ids[0]);
            contract(g, out, ids[1])
        },
    );
}

#[test]
fn grad_masked_fill() {
    let mask = Arc::new(Mask::causal(4));
    check_op(
        "masked_fill",
        |d| vec![d(8, 4, -2.0, 2.0), d(8, 4, -1.0, 1.0)],
        move |g, ids| {
            // Finite fill value: -inf would poison the finite-difference
            // probe; gradient flow through blocked slots is zero either way.
            let out = g.masked_fill(ids[0], Arc::clone(&mask), -7.5).unwrap();
            contract(g, out, ids[1])
        },
    );
}

#[test]
fn grad_concat_slice() {
    check_op(
        "concat_cols",
        |d| vec![d(3, 2, -1.0, 1.0), d(3, 4, -1.0, 1.0), d(3, 6, -1.0, 1.0)],
        |g, ids| {
            let out = g.concat_cols(ids[0], ids[1]).unwrap();
            contract(g, out, ids[2])
        },
    );
    check_op(
        "slice_cols",
        |d| vec![d(3, 6, -1.0, 1.0), d(3, 3, -1.0, 1.0)],
        |g, ids| {
            let out = g.slice_cols(ids[0], 2..5).unwrap();
            contract(g, out, ids[1])
        },
    );
}

#[test]
fn grad_embedding_and_pick() {
    let ids_fixed = Arc::new(vec![2usize, 0, 1, 2, 1]);
    check_op(
        "embedding",
        |d| vec![d(3, 4, -1.0, 1.0), d(5, 4, -1.0, 1.0)],
        move |g, leaf| {
            let out = g.embedding(leaf[0], Arc::clone(&ids_fixed)).unwrap();
            contract(g, out, leaf[1])
        },
    );
    let picks = Arc::new(vec![1usize, 0, 2, 1]);
    check_op(
        "pick",
        |d| vec![d(4, 3, -1.0, 1.0), d(4, 1, -1.0, 1.0)],
        move |g, leaf| {
            let out = g.pick(leaf[0], Arc::clone(&picks)).unwrap();
            contract(g, out, leaf[1])
        },
    );
}

#[test]
fn grad_layer_norm() {
    check_op(
        "layer_norm",
        |d| {
            vec![
                d(4, 6, -2.0, 2.0),
                d(1, 6, 0.5, 1.5),
                d(1, 6, -0.5, 0.5),
                d(4, 6, -1.0, 1.0),
            ]
        },
        |g, ids| {
            let out = g.layer_norm(ids[0], ids[1], ids[2]).unwrap();
            contract(g, out, ids[3])
        },
    );
}

#[test]
fn grad_attention_ops() {
    // Two sequences, two heads, four positions, head dim 3.
    let (batch, heads, t, dh) = (2usize, 2usize, 4usize, 3usize);
    let e = heads * dh;
    let scale = 1.0 / (dh as f64).sqrt();
    check_op(
        "attn_scores",
        |d| {
            vec![
                d(batch * t, e, -1.0, 1.0),
                d(batch * t, e, -1.0, 1.0),
                d(batch * heads * t, t, -1.0, 1.0),
            ]
        },
        move |g, ids| {
            let out = g.attn_scores(ids[0], ids[1], heads, t, scale).unwrap();
            contract(g, out, ids[2])
        },
    );
    check_op(
        "attn_apply",
        |d| {
            vec![
                d(batch * heads * t, t, 0.0, 1.0),
                d(batch * t, e, -1.0, 1.0),
                d(batch * t, e, -1.0, 1.0),
            ]
        },
        move |g, ids| {
            let out = g.attn_apply(ids[0], ids[1], heads, t).unwrap();
            contract(g, out, ids[2])
        },
    );
}

#[test]
fn grad_reductions() {
    check_op(
        "sum_groups",
        |d| vec![d(6, 1, -1.0, 1.0), d(3, 1, -1.0, 1.0)],
        |g, ids| {
            let out = g.sum_groups(ids[0], 2).unwrap();
            contract(g, out, ids[1])
        },
    );
    check_op(
        "mean_all",
        |d| vec![d(3, 4, -1.0, 1.0)],
        |g, ids| g.mean_all(ids[0]),
    );
    let w = Arc::new(vec![0.3, -1.1, 0.7, 2.0]);
    check_op(
        "dot_const",
        |d| vec![d(4, 1, -1.0, 1.0)],
        move |g, ids| g.dot_const(ids[0], Arc::clone(&w)).unwrap(),
    );
}

#[test]
fn grad_fused_linear_ops() {
    for act in [Activation::Identity, Activation::Tanh, Activation::Sigmoid] {
        check_op(
            "linear",
            |d| {
                vec![
                    d(4, 3, -1.0, 1.0),
                    d(3, 5, -1.0, 1.0),
                    d(1, 5, -0.5, 0.5),
                    d(4, 5, -1.0, 1.0),
                ]
            },
            move |g, ids| {
                let out = g.linear(ids[0], ids[1], ids[2], act).unwrap();
                contract(g, out, ids[3])
            },
        );
        check_op(
            "linear2",
            |d| {
                vec![
                    d(4, 3, -1.0, 1.0),
                    d(3, 5, -1.0, 1.0),
                    d(4, 2, -1.0, 1.0),
                    d(2, 5, -1.0, 1.0),
                    d(1, 5, -0.5, 0.5),
                    d(4, 5, -1.0, 1.0),
                ]
            },
            move |g, ids| {
                let out = g
                    .linear2(ids[0], ids[1], ids[2], ids[3], ids[4], act)
                    .unwrap();
                contract(g, out, ids[5])
            },
        );
    }
}

#[test]
fn grad_causal_attention_fused() {
    let (batch, heads, t, dh) = (2usize, 2usize, 4usize, 3usize);
    let e = heads * dh;
    let scale = 1.0 / (dh as f64).sqrt();
    check_op(
        "causal_attention",
        |d| {
            vec![
                d(batch * t, e, -1.0, 1.0),
                d(batch * t, e, -1.0, 1.0),
                d(batch * t, e, -1.0, 1.0),
                d(batch * t, e, -1.0, 1.0),
            ]
        },
        move |g, ids| {
            let out = g.causal_attention(ids[0], ids[1], ids[2], heads, t, scale).unwrap();
            contract(g, out, ids[3])
        },
    );
}

#[test]
fn fused_attention_matches_composed_ops() {
    let (batch, heads, t, dh) = (2usize, 2usize, 5usize, 4usize);
    let e = heads * dh;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut rng = seeded(321);
    let q0 = rand_tensor(batch * t, e, -1.0, 1.0, &mut rng);
    let k0 = rand_tensor(batch * t, e, -1.0, 1.0, &mut rng);
    let v0 = rand_tensor(batch * t, e, -1.0, 1.0, &mut rng);
    let w0 = rand_tensor(batch * t, e, -1.0, 1.0, &mut rng);

    let run = |fused: bool| {
        let mut g = Graph::new();
        let q = g.leaf(q0.clone());
        let k = g.leaf(k0.clone());
        let v = g.leaf(v0.clone());
        let w = g.leaf(w0.clone());
        let ctx = if fused {
            g.causal_attention(q, k, v, heads, t, scale).unwrap()
        } else {
            let scores = g.attn_scores(q, k, heads, t, scale).unwrap();
            let masked = g
                .masked_fill(scores, Arc::new(Mask::causal(t)), f64::NEG_INFINITY)
                .unwrap();
            let probs = g.softmax_rows(masked);
            g.attn_apply(probs, v, heads, t).unwrap()
        };
        let prod = g.hadamard(ctx, w).unwrap();
        let root = g.mean_all(prod);
        g.backward(root).unwrap();
        (
            g.value(ctx).data().to_vec(),
            g.grad(q).unwrap().data().to_vec(),
            g.grad(k).unwrap().data().to_vec(),
            g.grad(v).unwrap().data().to_vec(),
        )
    };
    let (cv_f, gq_f, gk_f, gv_f) = run(true);
    let (cv_u, gq_u, gk_u, gv_u) = run(false);
    for (a, b) in [(&cv_f, &cv_u), (&gq_f, &gq_u), (&gk_f, &gk_u), (&gv_f, &gv_u)] {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12, "fused {x} vs composed {y}");
        }
    }
}

fn check_model_nll_gradient(make: impl Fn(u64) -> ArModel, batch: usize, label: &str) {
    for instance in 0..INSTANCES {
        let model = make(2000 + instance as u64);
        let n = model.seq_len();
        let mut rng = seeded(50 + instance as u64);
        let tokens: Vec<u8> = (0..batch * n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let x0 = model.params().snapshot();
        let eval = |flat: &[f64]| -> f64 {
            let mut m = model.clone();
            m.params_mut().restore(flat);
            let mut g = Graph::new();
            let (_, per_seq) = m.seq_logprob_graph(&mut g, &tokens, batch).unwrap();
            let neg = g.scale(per_seq, -1.0);
            let root = g.mean_all(neg);
            g.value(root).at(0, 0)
        };
        let numeric = central_difference(eval, &x0, FD_STEP);
        let analytic = {
            let mut g = Graph::new();
            let (bound, per_seq) = model.seq_logprob_graph(&mut g, &tokens, batch).unwrap();
            let neg = g.scale(per_seq, -1.0);
            let root = g.mean_all(neg);
            g.backward(root).unwrap();
            model.params().collect_grads(&g, &bound)
        };
        let err = max_relative_error(&analytic, &numeric);
        assert!(
            err < FD_TOL,
            "{label} instance {instance}: max relative error {err:e}"
        );
    }
}

#[test]
fn grad_rnn_nll_end_to_end() {
    check_model_nll_gradient(
        |seed| ArModel::Rnn(RnnModel::new(RnnConfig { seq_len: 6, hidden: 5 }, seed)),
        2,
        "rnn nll",
    );
}

#[test]
fn grad_transformer_nll_end_to_end() {
    check_model_nll_gradient(
        |seed| {
            ArModel::Transformer(TransformerModel::new(
                TransformerConfig {
                    seq_len: 4,
                    embed: 8,
                    heads: 2,
                    ff: 12,
                    blocks: 2,
                },
                seed,
            ))
        },
        2,
        "transformer nll",
    );
}

#[test]
fn grad_full_size_models_single_instance() {
    // One spot check at the reported hyperparameters; the small-config
    // suites above cover the op compositions at volume.
    let model = ArModel::new(ModelKind::Rnn, 16, 77);
    let mut rng = seeded(78);
    let tokens: Vec<u8> = (0..16).map(|_| u8::from(rng.gen_bool(0.5))).collect();
    let x0 = model.params().snapshot();
    let eval = |flat: &[f64]| -> f64 {
        let mut m = model.clone();
        m.params_mut().restore(flat);
        m.eval_nll(&tokens, 1).unwrap()
    };
    // Probe a subset of coordinates; the full vector would be slow.
    let mut g_full = Graph::new();
    let (bound, per_seq) = model.seq_logprob_graph(&mut g_full, &tokens, 1).unwrap();
    let neg = g_full.scale(per_seq, -1.0);
    let root = g_full.mean_all(neg);
    g_full.backward(root).unwrap();
    let analytic = model.params().collect_grads(&g_full, &bound);
    let mut point = x0.clone();
    for idx in (0..x0.len()).step_by(97) {
        let orig = point[idx];
        point[idx] = orig + FD_STEP;
        let plus = eval(&point);
        point[idx] = orig - FD_STEP;
        let minus = eval(&point);
        point[idx] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = (analytic[idx] - numeric).abs() / analytic[idx].abs().max(numeric.abs()).max(1.0);
        assert!(err < FD_TOL, "coordinate {idx}: error {err:e}");
    }
}
