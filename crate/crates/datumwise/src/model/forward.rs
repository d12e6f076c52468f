//! Tape-graph construction for both architectures.
//!
//! The datum-wise pipeline: character embedding -> datum-local
//! positional encoding -> datum transformer (attention restricted
//! within each datum) -> CLS-Datum pooling -> row transformer over the
//! pooled datum set (no positional encoding, giving column-permutation
//! invariance) -> CLS-Target state -> batch-norm + linear heads. The
//! domain head sits behind a gradient-reversal node.
//!
//! The flat-text baseline embeds the whole serialized row as one
//! character sequence with a GLOBAL positional encoding and the same
//! encoder/head shapes.

use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{NodeId, Tape};

use super::{positional_encoding, ModelConfig, ModelKind, ParamStore};
use crate::error::Result;
use crate::ingest::RowRecord;
use crate::tokenizer::{
    collate, collate_flat, encode_flat_precursor, encode_row_precursor, CharVocab, EncodeStats,
    TokenizedRow,
};

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

/// Fixed evaluation batch size, shared by validation, test, and
/// command-line scoring so persisted metrics are reproducible bit for
/// bit from the saved model.
pub const EVAL_BATCH_SIZE: usize = 64;

/// Parameter tensors registered on a tape for one forward/backward.
pub struct TapeBind {
    ids: IndexMap<String, NodeId>,
}

impl TapeBind {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {} not bound", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Registers every stored tensor on the tape: differentiable leaves in
/// train mode (for trainable entries), constants otherwise.
pub fn bind_params(tape: &mut Tape, store: &ParamStore, train_mode: bool) -> TapeBind {
    let mut ids = IndexMap::new();
    for (name, entry) in store.iter() {
        let node = if train_mode && entry.trainable {
            tape.param(entry.value.clone())
        } else {
            tape.constant(entry.value.clone())
        };
        ids.insert(name.clone(), node);
    }
    TapeBind { ids }
}

/// Batch statistics produced by a train-mode batch-norm, for folding
/// into the running statistics after the optimizer step.
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n: usize,
}

/// Domain-head wiring. `reverse: false` bypasses the gradient-reversal
/// node entirely (used to verify the reversal algebra).
#[derive(Debug, Clone, Copy)]
pub struct DomainPath {
    pub lambda: f64,
    pub reverse: bool,
}

/// Handles into the built graph.
pub struct RowForward {
    /// [B] pre-sigmoid classification logits.
    pub logit: NodeId,
    /// [B] synthetic-row probabilities.
    pub p: NodeId,
    /// [B, d_model] CLS-Target states (exposed for tests).
    pub cls_state: NodeId,
    /// [B, num_domains] domain logits, when the domain path is built.
    pub domain_logits: Option<NodeId>,
    pub bn_updates: Vec<BnUpdate>,
}

/// A collated datum-wise batch in tensor-ready form.
pub struct DatumBatch {
    pub b: usize,
    pub d: usize,
    pub l: usize,
    /// Flattened [B*D*L] token ids.
    pub ids: Vec<usize>,
    /// [B*D, L] true where a real token (or CLS) sits.
    pub char_mask: Array2<bool>,
    /// Flattened [B*D] real-datum flags.
    pub datum_mask: Vec<bool>,
    /// Flattened [B*D] CLS positions (0 for dummy datums).
    pub cls_positions: Vec<usize>,
}

pub fn assemble_datum_batch(rows: &[TokenizedRow]) -> DatumBatch {
    assert!(!rows.is_empty());
    let d = rows[0].token_ids.shape()[0];
    let l = rows[0].token_ids.shape()[1];
    let b = rows.len();
    let mut ids = Vec::with_capacity(b * d * l);
    let mut char_mask = Array2::<bool>::from_elem((b * d, l), false);
    let mut datum_mask = Vec::with_capacity(b * d);
    let mut cls_positions = Vec::with_capacity(b * d);
    for (bi, row) in rows.iter().enumerate() {
        assert_eq!(row.token_ids.shape(), [d, l], "collated rows must share shape");
        for di in 0..d {
            for li in 0..l {
                ids.push(row.token_ids[[di, li]] as usize);
                char_mask[[bi * d + di, li]] = row.char_mask[[di, li]];
            }
            datum_mask.push(row.datum_mask[di]);
            cls_positions.push(row.cls_positions[di]);
        }
    }
    DatumBatch {
        b,
        d,
        l,
        ids,
        char_mask,
        datum_mask,
        cls_positions,
    }
}

/// A collated flat-text batch.
pub struct FlatBatch {
    pub b: usize,
    pub t: usize,
    /// Flattened [B*T] token ids.
    pub ids: Vec<usize>,
    /// [B, T] true where a real token sits.
    pub mask: Array2<bool>,
}

pub fn assemble_flat_batch(ids: &Array2<u32>, mask: &Array2<bool>) -> FlatBatch {
    let b = ids.shape()[0];
    let t = ids.shape()[1];
    FlatBatch {
        b,
        t,
        ids: ids.iter().map(|&v| v as usize).collect(),
        mask: mask.clone(),
    }
}

/// Additive attention mask [S*H, L, L]: 0 where key `k` is a real token
/// or the query's own position, -inf otherwise. Allowing self-attention
/// for masked queries keeps every softmax row finite (dummy datums are
/// all-PAD sequences) without letting PAD leak into real positions.
fn attention_mask(allowed: &Array2<bool>, heads: usize) -> ArrayD<f64> {
    let s = allowed.shape()[0];
    let l = allowed.shape()[1];
    let mut mask = Array3::<f64>::zeros((s * heads, l, l));
    let mut block = Array2::<f64>::zeros((l, l));
    for si in 0..s {
        for q in 0..l {
            for k in 0..l {
                block[[q, k]] = if allowed[[si, k]] || k == q {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
            }
        }
        for h in 0..heads {
            mask.index_axis_mut(ndarray::Axis(0), si * heads + h)
                .assign(&block);
        }
    }
    mask.into_dyn()
}

/// Inverted dropout via a seeded 0/(1/keep) mask; identity in eval mode.
fn dropout(
    tape: &mut Tape,
    x: NodeId,
    p: f64,
    train_mode: bool,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> NodeId {
    if !train_mode || p == 0.0 {
        return x;
    }
    let rng = rng
        .as_mut()
        .expect("train-mode dropout requires an rng");
    let keep = 1.0 - p;
    let dim = tape.value(x).raw_dim();
    let n = tape.value(x).len();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.constant(ArrayD::from_shape_vec(dim, data).unwrap());
    tape.mul(x, mask)
}

/// `x [S,L,din] -> x W + b [S,L,dout]` through a flattened matmul.
fn linear_seq(
    tape: &mut Tape,
    bind: &TapeBind,
    w: &str,
    b: &str,
    x: NodeId,
    s: usize,
    l: usize,
    din: usize,
    dout: usize,
) -> NodeId {
    let flat = tape.reshape(x, &[s * l, din]);
    let y = tape.matmul(flat, bind.id(w));
    let y = tape.add_broadcast(y, bind.id(b));
    tape.reshape(y, &[s, l, dout])
}

fn split_heads(tape: &mut Tape, x: NodeId, s: usize, l: usize, h: usize, dh: usize) -> NodeId {
    let x4 = tape.reshape(x, &[s, l, h, dh]);
    let xt = tape.swap_axes_12(x4);
    tape.reshape(xt, &[s * h, l, dh])
}

fn merge_heads(tape: &mut Tape, x: NodeId, s: usize, l: usize, h: usize, dh: usize) -> NodeId {
    let x4 = tape.reshape(x, &[s, h, l, dh]);
    let xt = tape.swap_axes_12(x4);
    tape.reshape(xt, &[s, l, h * dh])
}

/// One pre-norm encoder layer: masked multi-head self-attention and a
/// GELU feed-forward block, each behind layer norm with a residual.
#[allow(clippy::too_many_arguments)]
fn encoder_layer(
    tape: &mut Tape,
    bind: &TapeBind,
    prefix: &str,
    x: NodeId,
    mask: NodeId,
    cfg: &ModelConfig,
    train_mode: bool,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let (s, l, d) = (shape[0], shape[1], shape[2]);
    let h = cfg.heads;
    let dh = cfg.head_dim();

    let ln1g = bind.id(&format!("{}.ln1.gamma", prefix));
    let ln1b = bind.id(&format!("{}.ln1.beta", prefix));
    let hx = tape.layer_norm(x, ln1g, ln1b, LN_EPS);

    let q = linear_seq(
        tape,
        bind,
        &format!("{}.attn.wq", prefix),
        &format!("{}.attn.bq", prefix),
        hx,
        s,
        l,
        d,
        d,
    );
    let k = linear_seq(
        tape,
        bind,
        &format!("{}.attn.wk", prefix),
        &format!("{}.attn.bk", prefix),
        hx,
        s,
        l,
        d,
        d,
    );
    let v = linear_seq(
        tape,
        bind,
        &format!("{}.attn.wv", prefix),
        &format!("{}.attn.bv", prefix),
        hx,
        s,
        l,
        d,
        d,
    );
    let qh = split_heads(tape, q, s, l, h, dh);
    let kh = split_heads(tape, k, s, l, h, dh);
    let vh = split_heads(tape, v, s, l, h, dh);

    let scores = tape.bmm(qh, kh, true);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = tape.add(scores, mask);
    let attn = tape.softmax_last(scores);
    let attn = dropout(tape, attn, cfg.dropout, train_mode, rng);
    let ctx = tape.bmm(attn, vh, false);
    let merged = merge_heads(tape, ctx, s, l, h, dh);
    let out = linear_seq(
        tape,
        bind,
        &format!("{}.attn.wo", prefix),
        &format!("{}.attn.bo", prefix),
        merged,
        s,
        l,
        d,
        d,
    );
    let out = dropout(tape, out, cfg.dropout, train_mode, rng);
    let x1 = tape.add(x, out);

    let ln2g = bind.id(&format!("{}.ln2.gamma", prefix));
    let ln2b = bind.id(&format!("{}.ln2.beta", prefix));
    let h2 = tape.layer_norm(x1, ln2g, ln2b, LN_EPS);
    let f = linear_seq(
        tape,
        bind,
        &format!("{}.ffn.w1", prefix),
        &format!("{}.ffn.b1", prefix),
        h2,
        s,
        l,
        d,
        cfg.ffn_dim,
    );
    let f = tape.gelu(f);
    let f = linear_seq(
        tape,
        bind,
        &format!("{}.ffn.w2", prefix),
        &format!("{}.ffn.b2", prefix),
        f,
        s,
        l,
        cfg.ffn_dim,
        d,
    );
    let f = dropout(tape, f, cfg.dropout, train_mode, rng);
    tape.add(x1, f)
}

/// Batch norm selecting train (batch statistics, recorded for the
/// running update) or eval (stored running statistics) behavior.
fn batch_norm(
    tape: &mut Tape,
    bind: &TapeBind,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    train_mode: bool,
    updates: &mut Vec<BnUpdate>,
) -> NodeId {
    let gamma = bind.id(&format!("{}.bn.gamma", prefix));
    let beta = bind.id(&format!("{}.bn.beta", prefix));
    if train_mode {
        let n = tape.value(x).shape()[0];
        let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, BN_EPS);
        updates.push(BnUpdate {
            prefix: prefix.to_string(),
            mean,
            var,
            n,
        });
        y
    } else {
        let rm = store.get(&format!("{}.bn.running_mean", prefix));
        let rv = store.get(&format!("{}.bn.running_var", prefix));
        tape.batch_norm_eval(
            x,
            gamma,
            beta,
            rm.as_slice().unwrap(),
            rv.as_slice().unwrap(),
            BN_EPS,
        )
    }
}

fn bn_linear_head(
    tape: &mut Tape,
    bind: &TapeBind,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    train_mode: bool,
    updates: &mut Vec<BnUpdate>,
) -> NodeId {
    let h = batch_norm(tape, bind, store, prefix, x, train_mode, updates);
    let z = tape.matmul(h, bind.id(&format!("{}.linear.w", prefix)));
    tape.add_broadcast(z, bind.id(&format!("{}.linear.b", prefix)))
}

/// Builds the full datum-wise graph for one batch.
#[allow(clippy::too_many_arguments)]
pub fn forward_datum_wise(
    tape: &mut Tape,
    bind: &TapeBind,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &DatumBatch,
    train_mode: bool,
    domain: Option<DomainPath>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> RowForward {
    let (b, d, l) = (batch.b, batch.d, batch.l);
    let dm = cfg.d_model;

    // Embeddings are scaled by sqrt(d_model) (and initialized at
    // 1/sqrt(d_model)) so character identity and the unit-amplitude
    // sinusoidal positional encoding enter the encoder at the same
    // magnitude; without the scale the position signal drowns out the
    // characters.
    let emb = tape.gather(bind.id("char_embedding"), &batch.ids);
    let emb = tape.scale(emb, (dm as f64).sqrt());
    let mut x = tape.reshape(emb, &[b * d, l, dm]);
    if cfg.use_positional_encoding {
        let pe = tape.constant(positional_encoding(l, dm).into_dyn());
        x = tape.add_broadcast(x, pe);
    }
    let dmask = tape.constant(attention_mask(&batch.char_mask, cfg.heads));
    for layer in 0..cfg.datum_layers {
        x = encoder_layer(
            tape,
            bind,
            &format!("datum.{}", layer),
            x,
            dmask,
            cfg,
            train_mode,
            &mut rng,
        );
    }

    let pooled_flat = tape.pool_at(x, &batch.cls_positions);
    let pooled = tape.reshape(pooled_flat, &[b, d, dm]);
    // Zero the dummy-datum slots so extra-datum padding carries no
    // signal anywhere downstream.
    let mut keep = Array3::<f64>::zeros((b, d, dm));
    for bi in 0..b {
        for di in 0..d {
            if batch.datum_mask[bi * d + di] {
                keep.index_axis_mut(ndarray::Axis(0), bi)
                    .row_mut(di)
                    .fill(1.0);
            }
        }
    }
    let keep = tape.constant(keep.into_dyn());
    let pooled = tape.mul(pooled, keep);

    let cls = tape.broadcast_rows(bind.id("cls_target"), b);
    let mut xr = tape.concat_axis1(cls, pooled);
    let mut row_allowed = Array2::<bool>::from_elem((b, d + 1), false);
    for bi in 0..b {
        row_allowed[[bi, 0]] = true;
        for di in 0..d {
            row_allowed[[bi, 1 + di]] = batch.datum_mask[bi * d + di];
        }
    }
    let rmask = tape.constant(attention_mask(&row_allowed, cfg.heads));
    for layer in 0..cfg.row_layers {
        xr = encoder_layer(
            tape,
            bind,
            &format!("row.{}", layer),
            xr,
            rmask,
            cfg,
            train_mode,
            &mut rng,
        );
    }
    let cls_state = tape.select_axis1(xr, 0);

    let mut bn_updates = Vec::new();
    let z = bn_linear_head(tape, bind, store, "clf", cls_state, train_mode, &mut bn_updates);
    let logit = tape.reshape(z, &[b]);
    let p = tape.sigmoid(logit);

    let domain_logits = domain.map(|dp| {
        let input = if dp.reverse {
            tape.grad_reverse(cls_state, dp.lambda)
        } else {
            cls_state
        };
        bn_linear_head(tape, bind, store, "dom", input, train_mode, &mut bn_updates)
    });

    RowForward {
        logit,
        p,
        cls_state,
        domain_logits,
        bn_updates,
    }
}

/// Builds the flat-text baseline graph: one global sequence per row
/// with positional encoding over the WHOLE string (hence no column
/// permutation invariance), same encoder and head shapes.
#[allow(clippy::too_many_arguments)]
pub fn forward_flat_text(
    tape: &mut Tape,
    bind: &TapeBind,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &FlatBatch,
    train_mode: bool,
    domain: Option<DomainPath>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> RowForward {
    let (b, t) = (batch.b, batch.t);
    let dm = cfg.d_model;

    let emb = tape.gather(bind.id("char_embedding"), &batch.ids);
    let emb = tape.scale(emb, (dm as f64).sqrt());
    let mut x = tape.reshape(emb, &[b, t, dm]);
    let pe = tape.constant(positional_encoding(t, dm).into_dyn());
    x = tape.add_broadcast(x, pe);

    let mask = tape.constant(attention_mask(&batch.mask, cfg.heads));
    for layer in 0..cfg.datum_layers {
        x = encoder_layer(
            tape,
            bind,
            &format!("flat.{}", layer),
            x,
            mask,
            cfg,
            train_mode,
            &mut rng,
        );
    }
    let cls_state = tape.select_axis1(x, 0);

    let mut bn_updates = Vec::new();
    let z = bn_linear_head(tape, bind, store, "clf", cls_state, train_mode, &mut bn_updates);
    let logit = tape.reshape(z, &[b]);
    let p = tape.sigmoid(logit);

    let domain_logits = domain.map(|dp| {
        let input = if dp.reverse {
            tape.grad_reverse(cls_state, dp.lambda)
        } else {
            cls_state
        };
        bn_linear_head(tape, bind, store, "dom", input, train_mode, &mut bn_updates)
    });

    RowForward {
        logit,
        p,
        cls_state,
        domain_logits,
        bn_updates,
    }
}

/// Eval-mode scoring of rows in fixed-size batches. Returns one
/// synthetic-probability per row, in input order.
pub fn score_rows(
    kind: ModelKind,
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &CharVocab,
    rows: &[RowRecord],
    stats: &mut EncodeStats,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_BATCH_SIZE) {
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, store, false);
        match kind {
            ModelKind::DatumWise => {
                let precursors: Vec<_> = chunk
                    .iter()
                    .map(|r| {
                        encode_row_precursor(r, vocab, cfg.max_datum_len, cfg.max_datums, stats)
                    })
                    .collect();
                let toks = collate(&precursors)?;
                let batch = assemble_datum_batch(&toks);
                let fwd =
                    forward_datum_wise(&mut tape, &bind, store, cfg, &batch, false, None, None);
                scores.extend(tape.value(fwd.p).iter().copied());
            }
            ModelKind::FlatText => {
                let encoded: Vec<_> = chunk
                    .iter()
                    .map(|r| encode_flat_precursor(r, vocab, cfg.max_row_chars, stats))
                    .collect();
                let (ids, mask) = collate_flat(&encoded)?;
                let batch = assemble_flat_batch(&ids, &mask);
                let fwd =
                    forward_flat_text(&mut tape, &bind, store, cfg, &batch, false, None, None);
                scores.extend(tape.value(fwd.p).iter().copied());
            }
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Datum;
    use crate::model::{init_datum_wise_params, init_flat_text_params};
    use crate::tokenizer::build_vocab;
    use rand::SeedableRng;

    fn tiny_cfg(vocab_size: usize) -> ModelConfig {
        let mut cfg = ModelConfig::with_vocab(vocab_size);
        cfg.d_model = 16;
        cfg.datum_layers = 2;
        cfg.row_layers = 2;
        cfg.heads = 2;
        cfg.ffn_dim = 32;
        cfg.dropout = 0.0;
        cfg
    }

    fn row(datums: &[(&str, &str)]) -> RowRecord {
        RowRecord {
            domain: "t".to_string(),
            domain_id: -1,
            datums: datums
                .iter()
                .map(|(c, v)| Datum {
                    column: c.to_string(),
                    value: v.to_string(),
                })
                .collect(),
            label: 0,
        }
    }

    fn sample_rows() -> Vec<RowRecord> {
        vec![
            row(&[("age", "39"), ("job", "clerk"), ("city", "Lyon")]),
            row(&[("age", "4"), ("job", "chef"), ("city", "Pau")]),
            row(&[("age", "71"), ("job", "none"), ("city", "Nice")]),
        ]
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let rows = sample_rows();
        let vocab = build_vocab(&rows, 1).unwrap();
        let cfg = tiny_cfg(vocab.size());
        let store = init_datum_wise_params(&cfg, 3);
        let run = || {
            let mut stats = EncodeStats::default();
            score_rows(ModelKind::DatumWise, &store, &cfg, &vocab, &rows, &mut stats).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn permutation_of_datums_leaves_score_nearly_unchanged() {
        let rows = sample_rows();
        let vocab = build_vocab(&rows, 1).unwrap();
        let cfg = tiny_cfg(vocab.size());
        let store = init_datum_wise_params(&cfg, 3);
        let mut stats = EncodeStats::default();
        let base = score_rows(ModelKind::DatumWise, &store, &cfg, &vocab, &rows, &mut stats)
            .unwrap();
        let mut permuted = rows.clone();
        for r in &mut permuted {
            r.datums.reverse();
        }
        let swapped =
            score_rows(ModelKind::DatumWise, &store, &cfg, &vocab, &permuted, &mut stats)
                .unwrap();
        for (a, b) in base.iter().zip(&swapped) {
            assert!((a - b).abs() < 1e-5, "permutation moved {} -> {}", a, b);
        }
    }

    #[test]
    fn flat_text_scores_change_under_permutation() {
        // Not a guarantee of inequality, but at random init, reversing
        // the string virtually always moves the output.
        let rows = sample_rows();
        let vocab = build_vocab(&rows, 1).unwrap();
        let cfg = tiny_cfg(vocab.size());
        let store = init_flat_text_params(&cfg, 3);
        let mut stats = EncodeStats::default();
        let base =
            score_rows(ModelKind::FlatText, &store, &cfg, &vocab, &rows, &mut stats).unwrap();
        let mut permuted = rows.clone();
        for r in &mut permuted {
            r.datums.reverse();
        }
        let swapped =
            score_rows(ModelKind::FlatText, &store, &cfg, &vocab, &permuted, &mut stats).unwrap();
        assert!(base
            .iter()
            .zip(&swapped)
            .any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn datum_outputs_are_bitwise_isolated() {
        // Changing one datum's text must not move any other datum's
        // pooled state by a single bit.
        let r1 = row(&[("a", "11"), ("b", "22"), ("c", "33")]);
        let r2 = row(&[("a", "11"), ("b", "99"), ("c", "33")]);
        let vocab = build_vocab(&[r1.clone(), r2.clone()], 1).unwrap();
        let cfg = tiny_cfg(vocab.size());
        let store = init_datum_wise_params(&cfg, 5);
        let pooled_for = |r: &RowRecord| {
            let mut stats = EncodeStats::default();
            let pre =
                encode_row_precursor(r, &vocab, cfg.max_datum_len, cfg.max_datums, &mut stats);
            let toks = collate(&[pre]).unwrap();
            let batch = assemble_datum_batch(&toks);
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &store, false);
            let mut x = {
                let emb = tape.gather(bind.id("char_embedding"), &batch.ids);
                tape.reshape(emb, &[batch.b * batch.d, batch.l, cfg.d_model])
            };
            let pe = tape.constant(positional_encoding(batch.l, cfg.d_model).into_dyn());
            x = tape.add_broadcast(x, pe);
            let mask = tape.constant(attention_mask(&batch.char_mask, cfg.heads));
            for layer in 0..cfg.datum_layers {
                x = encoder_layer(
                    &mut tape,
                    &bind,
                    &format!("datum.{}", layer),
                    x,
                    mask,
                    &cfg,
                    false,
                    &mut None,
                );
            }
            let pooled = tape.pool_at(x, &batch.cls_positions);
            tape.value(pooled).clone()
        };
        let p1 = pooled_for(&r1);
        let p2 = pooled_for(&r2);
        for d in [0usize, 2] {
            for j in 0..cfg.d_model {
                assert_eq!(
                    p1[[d, j]].to_bits(),
                    p2[[d, j]].to_bits(),
                    "datum {} leaked into datum {}",
                    1,
                    d
                );
            }
        }
        assert!((0..cfg.d_model).any(|j| p1[[1, j]] != p2[[1, j]]));
    }

    #[test]
    fn dummy_datum_padding_leaves_scores_nearly_unchanged() {
        let rows = sample_rows();
        let vocab = build_vocab(&rows, 1).unwrap();
        let cfg = tiny_cfg(vocab.size());
        let store = init_datum_wise_params(&cfg, 7);
        let mut stats = EncodeStats::default();
        let score_padded = |extra_datums: usize, extra_len: usize| {
            let mut stats = EncodeStats::default();
            let pres: Vec<_> = rows
                .iter()
                .map(|r| {
                    encode_row_precursor(r, &vocab, cfg.max_datum_len, cfg.max_datums, &mut stats)
                })
                .collect();
            let d = pres.iter().map(|p| p.datums.len()).max().unwrap() + extra_datums;
            let l = pres.iter().map(|p| p.max_datum_len()).max().unwrap() + extra_len;
            let toks: Vec<_> = pres
                .iter()
                .map(|p| crate::tokenizer::pad_encoded_row(p, d, l).unwrap())
                .collect();
            let batch = assemble_datum_batch(&toks);
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &store, false);
            let fwd = forward_datum_wise(&mut tape, &bind, &store, &cfg, &batch, false, None, None);
            tape.value(fwd.p).iter().copied().collect::<Vec<f64>>()
        };
        let base = score_rows(ModelKind::DatumWise, &store, &cfg, &vocab, &rows, &mut stats)
            .unwrap();
        let padded = score_padded(5, 7);
        for (a, b) in base.iter().zip(&padded) {
            assert!((a - b).abs() < 1e-6, "padding moved {} -> {}", a, b);
        }
    }

    #[test]
    fn zero_head_weights_give_half_probability() {
        let rows = sample_rows();
        let vocab = build_vocab(&rows, 1).unwrap();
        let cfg = tiny_cfg(vocab.size());
        let mut store = init_datum_wise_params(&cfg, 9);
        store.get_mut("clf.linear.w").fill(0.0);
        store.get_mut("clf.linear.b").fill(0.0);
        let mut stats = EncodeStats::default();
        let scores =
            score_rows(ModelKind::DatumWise, &store, &cfg, &vocab, &rows, &mut stats).unwrap();
        assert!(scores.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn domain_forward_is_lambda_independent() {
        let rows = sample_rows();
        let vocab = build_vocab(&rows, 1).unwrap();
        let mut cfg = tiny_cfg(vocab.size());
        cfg.num_domains = 3;
        let store = init_datum_wise_params(&cfg, 11);
        let logits_for = |lambda: f64| {
            let mut stats = EncodeStats::default();
            let pres: Vec<_> = rows
                .iter()
                .map(|r| {
                    encode_row_precursor(r, &vocab, cfg.max_datum_len, cfg.max_datums, &mut stats)
                })
                .collect();
            let toks = collate(&pres).unwrap();
            let batch = assemble_datum_batch(&toks);
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &store, false);
            let fwd = forward_datum_wise(
                &mut tape,
                &bind,
                &store,
                &cfg,
                &batch,
                false,
                Some(DomainPath {
                    lambda,
                    reverse: true,
                }),
                None,
            );
            tape.value(fwd.domain_logits.unwrap()).clone()
        };
        let a = logits_for(0.0);
        let b = logits_for(1.0);
        assert_eq!(a.shape(), [3, 3]);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        // Softmax over the logits normalizes to 1.
        for row in a.rows() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - m).exp() / s).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn train_mode_batch_norm_reports_updates() {
        let rows = sample_rows();
        let vocab = build_vocab(&rows, 1).unwrap();
        let mut cfg = tiny_cfg(vocab.size());
        cfg.num_domains = 2;
        let store = init_datum_wise_params(&cfg, 13);
        let mut stats = EncodeStats::default();
        let pres: Vec<_> = rows
            .iter()
            .map(|r| encode_row_precursor(r, &vocab, cfg.max_datum_len, cfg.max_datums, &mut stats))
            .collect();
        let toks = collate(&pres).unwrap();
        let batch = assemble_datum_batch(&toks);
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &store, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = forward_datum_wise(
            &mut tape,
            &bind,
            &store,
            &cfg,
            &batch,
            true,
            Some(DomainPath {
                lambda: 0.5,
                reverse: true,
            }),
            Some(&mut rng),
        );
        let prefixes: Vec<&str> = fwd.bn_updates.iter().map(|u| u.prefix.as_str()).collect();
        assert_eq!(prefixes, vec!["clf", "dom"]);
        assert!(fwd.bn_updates.iter().all(|u| u.n == 3));
        assert!(fwd.bn_updates[0].mean.iter().any(|&m| m != 0.0));
    }
}
