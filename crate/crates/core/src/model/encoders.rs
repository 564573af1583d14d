//! Hierarchical encoders: the gated process encoder (cross-attention with
//! video tokens as queries and audio tokens as keys/values, then pooling) and
//! the result encoder (per-angle generalized-mean pooling, gated aggregation
//! across angles, MLP to the shared latent width).

use std::collections::BTreeMap;

use crate::autodiff::{forward, GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Activations below this floor are clamped before generalized-mean pooling,
/// which needs strictly positive inputs.
pub const GEM_CLAMP_EPS: f64 = 1e-6;

/// Row-wise softmax over a 2-D score matrix, numerically shifted by the row
/// maximum. Rows sum to one by construction.
pub(crate) fn softmax_rows(b: &mut GraphBuilder, scores: NodeId) -> Result<NodeId> {
    let shape = b.shape(scores).to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    let row_max = b.max_reduce(scores, Some(1))?;
    let row_max = b.reshape(row_max, &[rows, 1])?;
    let row_max = b.broadcast(row_max, &[rows, cols])?;
    let shifted = b.sub(scores, row_max)?;
    let e = b.exp(shifted);
    let denom = b.sum(e, Some(1))?;
    let denom = b.reshape(denom, &[rows, 1])?;
    let inv = b.pow_scalar(denom, -1.0);
    let inv = b.broadcast(inv, &[rows, cols])?;
    b.mul(e, inv)
}

/// Multi-head scaled-dot-product cross-attention with a sigmoid-gated
/// residual: `out = Q_tokens + sigmoid(g) ⊙ (Attn(Q, K, V) W_o)`.
///
/// Queries come from `q_tokens` (`N_q x D`), keys and values from
/// `kv_tokens` (`N_kv x D`). Self-attention is the `q_tokens == kv_tokens`
/// case.
pub fn cross_attention_fragment(
    b: &mut GraphBuilder,
    q_tokens: NodeId,
    kv_tokens: NodeId,
    heads: usize,
    prefix: &str,
) -> Result<NodeId> {
    let d = b.shape(q_tokens)[1];
    if b.shape(kv_tokens)[1] != d {
        return Err(Error::ShapeMismatch(format!(
            "attention widths differ: {:?} vs {:?}",
            b.shape(q_tokens),
            b.shape(kv_tokens)
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "head count {heads} must divide width {d}"
        )));
    }
    let dh = d / heads;
    let n_q = b.shape(q_tokens)[0];

    let w_q = b.param(&format!("{prefix}.w_q"), &[d, d])?;
    let w_k = b.param(&format!("{prefix}.w_k"), &[d, d])?;
    let w_v = b.param(&format!("{prefix}.w_v"), &[d, d])?;
    let w_o = b.param(&format!("{prefix}.w_o"), &[d, d])?;
    let gate = b.param(&format!("{prefix}.gate"), &[d])?;

    let q = b.matmul(q_tokens, w_q)?;
    let k = b.matmul(kv_tokens, w_k)?;
    let v = b.matmul(kv_tokens, w_v)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = b.slice(q, 1, h * dh, dh)?;
        let kh = b.slice(k, 1, h * dh, dh)?;
        let vh = b.slice(v, 1, h * dh, dh)?;
        let kt = b.transpose(kh)?;
        let scores = b.matmul(qh, kt)?;
        let scores = b.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let weights = softmax_rows(b, scores)?;
        head_outs.push(b.matmul(weights, vh)?);
    }
    let attn = b.concat(1, &head_outs)?;
    let attn = b.matmul(attn, w_o)?;

    let g = b.reshape(gate, &[1, d])?;
    let g = b.sigmoid(g);
    let g = b.broadcast(g, &[n_q, d])?;
    let gated = b.mul(g, attn)?;
    b.add(q_tokens, gated)
}

/// Generalized-mean pooling over the token axis with a learnable exponent
/// `p = 1 + softplus(p_raw)` (so `p >= 1` holds by construction). Tokens are
/// clamped to [`GEM_CLAMP_EPS`] first. Returns a `1 x D` node.
pub fn gem_fragment(b: &mut GraphBuilder, tokens: NodeId, p_raw: NodeId) -> Result<NodeId> {
    let d = b.shape(tokens)[1];
    let sp = b.softplus(p_raw);
    let p = b.add_scalar(sp, 1.0);
    let clamped = b.clamp_min(tokens, GEM_CLAMP_EPS);
    let xp = b.pow(clamped, p)?;
    let mp = b.mean(xp, Some(0))?;
    // Large exponents can underflow eps^p to zero in f32; keep the root's
    // base strictly positive (the floor passes no gradient when active).
    let mp = b.clamp_min(mp, 1e-30);
    let inv_p = b.pow_scalar(p, -1.0);
    let pooled = b.pow(mp, inv_p)?;
    b.reshape(pooled, &[1, d])
}

/// Per-angle GeM pooling followed by a gated blend of GeM and max pooling
/// across the angle axis: `sigmoid(w) ⊙ GeM({v_m}) + (1 - sigmoid(w)) ⊙ max_m v_m`
/// with a per-feature learnable gate. Input `M x N x D`; returns the blended
/// `1 x D` aggregate together with the `M x D` matrix of per-angle vectors
/// (the result-side token sequence for reverse decoding).
pub fn gated_angle_fragment(
    b: &mut GraphBuilder,
    f_i: NodeId,
    prefix: &str,
) -> Result<(NodeId, NodeId)> {
    let shape = b.shape(f_i).to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "gated angle aggregation expects M x N x D, got {shape:?}"
        )));
    }
    let (m, n, d) = (shape[0], shape[1], shape[2]);
    let p_raw = b.param(&format!("{prefix}.p_raw"), &[])?;
    let gate = b.param(&format!("{prefix}.gate"), &[d])?;

    let mut per_angle = Vec::with_capacity(m);
    for angle in 0..m {
        let t = b.slice(f_i, 0, angle, 1)?;
        let t = b.reshape(t, &[n, d])?;
        per_angle.push(gem_fragment(b, t, p_raw)?);
    }
    let v = b.concat(0, &per_angle)?; // M x D
    let gem_angles = gem_fragment(b, v, p_raw)?; // 1 x D
    let max_angles = b.max_reduce(v, Some(0))?; // D
    let max_angles = b.reshape(max_angles, &[1, d])?;

    let g = b.reshape(gate, &[1, d])?;
    let g = b.sigmoid(g);
    let neg = b.mul_scalar(g, -1.0);
    let one_minus = b.add_scalar(neg, 1.0);
    let a = b.mul(g, gem_angles)?;
    let c = b.mul(one_minus, max_angles)?;
    Ok((b.add(a, c)?, v))
}

/// Two-layer MLP `linear -> elu -> linear` mapping a `1 x in` row to
/// `1 x out`.
pub fn mlp_fragment(
    b: &mut GraphBuilder,
    x: NodeId,
    hidden: usize,
    out: usize,
    prefix: &str,
) -> Result<NodeId> {
    let d = b.shape(x)[1];
    let w1 = b.param(&format!("{prefix}.w1"), &[d, hidden])?;
    let b1 = b.param(&format!("{prefix}.b1"), &[hidden])?;
    let w2 = b.param(&format!("{prefix}.w2"), &[hidden, out])?;
    let b2 = b.param(&format!("{prefix}.b2"), &[out])?;
    let h = b.linear(x, w1, Some(b1))?;
    let h = b.elu(h);
    b.linear(h, w2, Some(b2))
}

/// Pools process tokens (mean over tokens, then MLP) into the unified latent.
/// Returns `1 x out`.
pub fn pool_process_fragment(
    b: &mut GraphBuilder,
    tokens: NodeId,
    hidden: usize,
    out: usize,
    prefix: &str,
) -> Result<NodeId> {
    let d = b.shape(tokens)[1];
    let mean = b.mean(tokens, Some(0))?;
    let mean = b.reshape(mean, &[1, d])?;
    mlp_fragment(b, mean, hidden, out, prefix)
}

/// Result encoder: gated angle aggregation then MLP. Returns `1 x out`.
pub fn result_encoder_fragment(
    b: &mut GraphBuilder,
    f_i: NodeId,
    hidden: usize,
    out: usize,
    prefix: &str,
) -> Result<NodeId> {
    let (agg, _angles) = gated_angle_fragment(b, f_i, prefix)?;
    mlp_fragment(b, agg, hidden, out, &format!("{prefix}.mlp"))
}

// ---- standalone operation API ----

/// Gated process encoder parameters.
#[derive(Debug, Clone)]
pub struct ProcessEncoderParams<E: Element> {
    pub heads: usize,
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
    pub gate: Tensor<E>,
}

/// Cross-attention with video tokens as queries and audio tokens as
/// keys/values, sigmoid-gated residual output.
pub fn cross_attention<E: Element>(
    f_v: &Tensor<E>,
    f_a: &Tensor<E>,
    p: &ProcessEncoderParams<E>,
) -> Result<Tensor<E>> {
    let mut b = GraphBuilder::new();
    let q = b.input("q", f_v.shape())?;
    let kv = b.input("kv", f_a.shape())?;
    let out = cross_attention_fragment(&mut b, q, kv, p.heads, "p")?;
    b.mark_output("out", out);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("q".into(), f_v.clone());
    bindings.insert("kv".into(), f_a.clone());
    bindings.insert("p.w_q".into(), p.w_q.clone());
    bindings.insert("p.w_k".into(), p.w_k.clone());
    bindings.insert("p.w_v".into(), p.w_v.clone());
    bindings.insert("p.w_o".into(), p.w_o.clone());
    bindings.insert("p.gate".into(), p.gate.clone());
    Ok(forward(&graph, &bindings)?["out"].clone())
}

/// Generalized-mean pooling with a fixed exponent `p >= 1` over the token
/// axis of an `N x D` matrix; returns a length-`D` vector.
pub fn gem_pool<E: Element>(tokens: &Tensor<E>, p: f64) -> Result<Tensor<E>> {
    if p < 1.0 {
        return Err(Error::Data(format!("GeM exponent must be >= 1, got {p}")));
    }
    if tokens.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "gem_pool expects N x D, got {:?}",
            tokens.shape()
        )));
    }
    let d = tokens.shape()[1];
    let mut b = GraphBuilder::new();
    let t = b.input("t", tokens.shape())?;
    let clamped = b.clamp_min(t, GEM_CLAMP_EPS);
    let xp = b.pow_scalar(clamped, p);
    let mp = b.mean(xp, Some(0))?;
    let out = b.pow_scalar(mp, 1.0 / p);
    b.mark_output("out", out);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("t".into(), tokens.clone());
    forward(&graph, &bindings)?["out"].clone().reshaped(vec![d])
}

/// Result encoder parameters for the standalone API.
#[derive(Debug, Clone)]
pub struct ResultEncoderParams<E: Element> {
    /// Raw gate logits, one per feature.
    pub gate: Tensor<E>,
    /// Raw GeM exponent (`p = 1 + softplus(p_raw)`).
    pub p_raw: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

fn bind_result_params<E: Element>(
    bindings: &mut BTreeMap<String, Tensor<E>>,
    p: &ResultEncoderParams<E>,
) {
    bindings.insert("p.gate".into(), p.gate.clone());
    bindings.insert("p.p_raw".into(), p.p_raw.clone());
    bindings.insert("p.mlp.w1".into(), p.w1.clone());
    bindings.insert("p.mlp.b1".into(), p.b1.clone());
    bindings.insert("p.mlp.w2".into(), p.w2.clone());
    bindings.insert("p.mlp.b2".into(), p.b2.clone());
}

/// Gated GeM/max aggregation across angles; returns a length-`D` vector.
pub fn gated_angle_aggregate<E: Element>(
    f_i: &Tensor<E>,
    p: &ResultEncoderParams<E>,
) -> Result<Tensor<E>> {
    let d = *f_i
        .shape()
        .last()
        .ok_or_else(|| Error::ShapeMismatch("empty shape".into()))?;
    let mut b = GraphBuilder::new();
    let f = b.input("f", f_i.shape())?;
    let (out, _angles) = gated_angle_fragment(&mut b, f, "p")?;
    b.mark_output("out", out);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("f".into(), f_i.clone());
    bindings.insert("p.gate".into(), p.gate.clone());
    bindings.insert("p.p_raw".into(), p.p_raw.clone());
    forward(&graph, &bindings)?["out"].clone().reshaped(vec![d])
}

/// Full result encoding `MLP(GatedAngleAggregation(F_i))`; returns the
/// unified latent as a vector.
pub fn result_encode<E: Element>(
    f_i: &Tensor<E>,
    p: &ResultEncoderParams<E>,
) -> Result<Tensor<E>> {
    let hidden = p.w1.shape()[1];
    let out_dim = p.w2.shape()[1];
    let mut b = GraphBuilder::new();
    let f = b.input("f", f_i.shape())?;
    let z = result_encoder_fragment(&mut b, f, hidden, out_dim, "p")?;
    b.mark_output("z", z);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("f".into(), f_i.clone());
    bind_result_params(&mut bindings, p);
    forward(&graph, &bindings)?["z"].clone().reshaped(vec![out_dim])
}

/// Mean-pools process tokens through an MLP to the unified latent, returning
/// both the pooled latent and the unpooled token sequence (the decoder
/// consumes the sequence).
pub fn pool_process<E: Element>(
    tokens: &Tensor<E>,
    w1: &Tensor<E>,
    b1: &Tensor<E>,
    w2: &Tensor<E>,
    b2: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let hidden = w1.shape()[1];
    let out_dim = w2.shape()[1];
    let mut b = GraphBuilder::new();
    let t = b.input("t", tokens.shape())?;
    let z = pool_process_fragment(&mut b, t, hidden, out_dim, "p")?;
    b.mark_output("z", z);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("t".into(), tokens.clone());
    bindings.insert("p.w1".into(), w1.clone());
    bindings.insert("p.b1".into(), b1.clone());
    bindings.insert("p.w2".into(), w2.clone());
    bindings.insert("p.b2".into(), b2.clone());
    let z = forward(&graph, &bindings)?["z"].clone().reshaped(vec![out_dim])?;
    Ok((z, tokens.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::softmax_attention_reference;
    use crate::rng::Stream;

    fn rt(s: &mut Stream, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| s.normal() * scale).collect()).unwrap()
    }

    fn identity_attention_params(d: usize) -> ProcessEncoderParams<f64> {
        let mut eye = Tensor::<f64>::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        ProcessEncoderParams {
            heads: 1,
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            // Large gate: sigmoid saturates to 1, pure attention + residual.
            gate: Tensor::filled(&[d], 40.0),
        }
    }

    #[test]
    fn single_key_attention_returns_the_value_row() {
        let d = 4usize;
        let p = identity_attention_params(d);
        let mut s = Stream::derive(1, "attn", 0);
        let f_v = rt(&mut s, &[3, d], 1.0);
        let f_a = rt(&mut s, &[1, d], 1.0);
        let out = cross_attention(&f_v, &f_a, &p).unwrap();
        // With one key the attention weight is 1: out = f_v + v_row.
        for i in 0..3 {
            for j in 0..d {
                let expect = f_v.at2(i, j) + f_a.at2(0, j);
                assert!((out.at2(i, j) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn closed_gate_suppresses_the_attention_path() {
        let d = 4usize;
        let mut p = identity_attention_params(d);
        p.gate = Tensor::filled(&[d], -40.0);
        let mut s = Stream::derive(2, "attn", 0);
        let f_v = rt(&mut s, &[3, d], 1.0);
        let f_a = rt(&mut s, &[5, d], 1.0);
        let out = cross_attention(&f_v, &f_a, &p).unwrap();
        for (o, f) in out.data().iter().zip(f_v.data()) {
            assert!((o - f).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_naive_softmax_oracle() {
        let d = 6usize;
        let mut s = Stream::derive(3, "attn-oracle", 0);
        let p = ProcessEncoderParams {
            heads: 1,
            w_q: rt(&mut s, &[d, d], 0.5),
            w_k: rt(&mut s, &[d, d], 0.5),
            w_v: rt(&mut s, &[d, d], 0.5),
            w_o: rt(&mut s, &[d, d], 0.5),
            gate: rt(&mut s, &[d], 1.0),
        };
        let f_v = rt(&mut s, &[4, d], 1.0);
        let f_a = rt(&mut s, &[5, d], 1.0);
        let out = cross_attention(&f_v, &f_a, &p).unwrap();

        // Oracle: project, run naive single-head attention, project out,
        // gate, residual.
        let proj = |x: &Tensor<f64>, w: &Tensor<f64>| -> Vec<f64> {
            let (n, dd) = (x.shape()[0], d);
            let mut out = vec![0.0; n * dd];
            for i in 0..n {
                for j in 0..dd {
                    for k in 0..dd {
                        out[i * dd + j] += x.at2(i, k) * w.at2(k, j);
                    }
                }
            }
            out
        };
        let q = proj(&f_v, &p.w_q);
        let k = proj(&f_a, &p.w_k);
        let v = proj(&f_a, &p.w_v);
        let attn = softmax_attention_reference(&q, &k, &v, 4, 5, d);
        let attn_t = Tensor::<f64>::new(vec![4, d], attn).unwrap();
        let ao = proj(&attn_t, &p.w_o);
        for i in 0..4 {
            for j in 0..d {
                let gate = 1.0 / (1.0 + (-p.gate.data()[j]).exp());
                let expect = f_v.at2(i, j) + gate * ao[i * d + j];
                assert!(
                    (out.at2(i, j) - expect).abs() < 1e-6,
                    "({i},{j}): {} vs {expect}",
                    out.at2(i, j)
                );
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut b = GraphBuilder::new();
        let scores = b.input("s", &[3, 5]).unwrap();
        let w = softmax_rows(&mut b, scores).unwrap();
        let sums = b.sum(w, Some(1)).unwrap();
        b.mark_output("sums", sums);
        let graph = b.finish();
        let mut s = Stream::derive(4, "softmax", 0);
        let mut bindings: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        bindings.insert("s".into(), rt(&mut s, &[3, 5], 3.0));
        let out = forward(&graph, &bindings).unwrap();
        for &v in out["sums"].data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gem_pool_limits() {
        // p = 1 reduces to the arithmetic mean.
        let t = Tensor::<f64>::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let m = gem_pool(&t, 1.0).unwrap();
        assert!((m.data()[0] - 2.0).abs() < 1e-12);

        // p = 2 on {1, 3}: sqrt((1 + 9) / 2) = sqrt(5).
        let g2 = gem_pool(&t, 2.0).unwrap();
        assert!((g2.data()[0] - 5.0f64.sqrt()).abs() < 1e-12);

        // Large p approaches the max.
        let g64 = gem_pool(&t, 64.0).unwrap();
        assert!((g64.data()[0] - 3.0).abs() / 3.0 < 0.03, "{}", g64.data()[0]);

        assert!(gem_pool(&t, 0.5).is_err());
    }

    fn result_params(d: usize, hidden: usize, out: usize, seed: u64) -> ResultEncoderParams<f64> {
        let mut s = Stream::derive(seed, "result", 0);
        ResultEncoderParams {
            gate: Tensor::zeros(&[d]),
            // softplus(p_raw) = 2 => p = 3.
            p_raw: Tensor::scalar((2.0f64.exp() - 1.0).ln()),
            w1: rt(&mut s, &[d, hidden], 0.3),
            b1: Tensor::zeros(&[hidden]),
            w2: rt(&mut s, &[hidden, out], 0.3),
            b2: Tensor::zeros(&[out]),
        }
    }

    #[test]
    fn identical_angles_collapse_the_gate_blend() {
        let (m, n, d) = (5usize, 4usize, 3usize);
        let mut s = Stream::derive(5, "angles", 0);
        let one = rt(&mut s, &[n, d], 1.0);
        let mut data = Vec::new();
        for _ in 0..m {
            data.extend_from_slice(one.data());
        }
        let f_i = Tensor::<f64>::new(vec![m, n, d], data).unwrap();
        let p = result_params(d, 4, 6, 6);
        let agg = gated_angle_aggregate(&f_i, &p).unwrap();
        // All angles identical: GeM across angles == max across angles == v,
        // so the blend equals v for any gate.
        let v = gem_pool(&one, 3.0).unwrap();
        for (a, e) in agg.data().iter().zip(v.data()) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn gate_limit_selects_max_and_hand_blend_checks() {
        // M = 2 angles pooling to [1] and [3] with p = 1 and a half-open
        // gate: 0.5 * mean + 0.5 * max = 0.5 * 2 + 0.5 * 3 = 2.5.
        let f_i = Tensor::<f64>::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap();
        let p = ResultEncoderParams {
            gate: Tensor::zeros(&[1]), // sigmoid(0) = 0.5
            p_raw: Tensor::scalar(-40.0), // softplus(-40) ~ 0 => p ~ 1
            w1: Tensor::zeros(&[1, 1]),
            b1: Tensor::zeros(&[1]),
            w2: Tensor::zeros(&[1, 1]),
            b2: Tensor::zeros(&[1]),
        };
        let agg = gated_angle_aggregate(&f_i, &p).unwrap();
        assert!((agg.data()[0] - 2.5).abs() < 1e-6, "{}", agg.data()[0]);

        // Gate forced to the max path is sensitive to a single viewpoint.
        let p_max = ResultEncoderParams {
            gate: Tensor::filled(&[1], -1e9),
            ..p
        };
        let agg_max = gated_angle_aggregate(&f_i, &p_max).unwrap();
        assert!((agg_max.data()[0] - 3.0).abs() < 1e-6);
        let mut bumped = f_i.clone();
        bumped.data_mut()[1] = 4.0;
        let agg_bumped = gated_angle_aggregate(&bumped, &p_max).unwrap();
        assert!((agg_bumped.data()[0] - agg_max.data()[0]).abs() > 0.5);
    }

    #[test]
    fn result_encode_width_and_permutation_invariance() {
        let (m, n, d, out) = (5usize, 4usize, 3usize, 8usize);
        let mut s = Stream::derive(7, "perm", 0);
        let f_i = rt(&mut s, &[m, n, d], 1.0);
        let p = result_params(d, 4, out, 8);
        let z = result_encode(&f_i, &p).unwrap();
        assert_eq!(z.shape(), &[out]);

        // Permute tokens within one angle: pooling is permutation-invariant.
        let mut permuted = f_i.clone();
        for j in 0..d {
            let a = 1 * n * d + 0 * d + j;
            let b = 1 * n * d + 3 * d + j;
            permuted.data_mut().swap(a, b);
        }
        let z2 = result_encode(&permuted, &p).unwrap();
        for (u, v) in z.data().iter().zip(z2.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn near_zero_input_stays_near_zero_through_zero_bias_encoder() {
        // With clamped GeM the aggregate sits at the clamp floor, so a
        // zero-bias MLP output is bounded by eps times the weight norms.
        let (m, n, d, out) = (5usize, 4usize, 3usize, 8usize);
        let f_i = Tensor::<f64>::zeros(&[m, n, d]);
        let p = result_params(d, 4, out, 9);
        let z = result_encode(&f_i, &p).unwrap();
        for &v in z.data() {
            assert!(v.abs() < 1e-4, "expected near-zero, got {v}");
        }
    }

    #[test]
    fn pool_process_means_and_shapes() {
        let d = 3usize;
        let tokens = Tensor::<f64>::new(vec![2, d], vec![0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        // Identity-ish MLP: w1 = I (d x d), w2 = ones column block to width 4.
        let mut w1 = Tensor::<f64>::zeros(&[d, d]);
        for i in 0..d {
            w1.data_mut()[i * d + i] = 1.0;
        }
        let w2 = Tensor::<f64>::filled(&[d, 4], 1.0);
        let (z, toks) = pool_process(
            &tokens,
            &w1,
            &Tensor::zeros(&[d]),
            &w2,
            &Tensor::zeros(&[4]),
        )
        .unwrap();
        assert_eq!(z.shape(), &[4]);
        assert_eq!(toks, tokens);
        // mean token = [1,1,1]; elu(1) = 1; each output = sum = 3.
        for &v in z.data() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }
}
