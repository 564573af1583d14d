//! Noisy bottleneck and the linear-attention decoder realizing the
//! process-to-result mapping.
//!
//! The bottleneck applies an inverted-scaled Bernoulli mask plus additive
//! Gaussian noise during training and is the exact identity at evaluation
//! time. Inside a pipeline graph the mask and noise enter as input bindings,
//! so the graph itself stays deterministic and gradient checks can freeze the
//! draws.
//!
//! Decoder attention uses the positive kernel feature map `phi(x) = elu(x)+1`
//! with the associativity-reordered product, linear in the key count.

use std::collections::BTreeMap;

use crate::autodiff::{forward, GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::model::encoders::{gem_fragment, softmax_rows};
use crate::rng::Stream;
use crate::tensor::{Element, Tensor};

/// Bottleneck behavior: Bernoulli drop probability, additive noise scale, and
/// whether the stochastic path is active.
#[derive(Debug, Clone, Copy)]
pub struct BottleneckConfig {
    pub mask_prob: f64,
    pub noise_std: f64,
    pub training: bool,
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask_prob must be in [0, 1), got {}",
                self.mask_prob
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Draws one `(mask, noise)` pair for a bottleneck application. The mask is
/// pre-scaled by `1 / (1 - mask_prob)` (inverted dropout), so the graph-side
/// operation is just `z * mask + noise` and the expectation equals `z`.
pub fn sample_bottleneck<E: Element>(
    shape: &[usize],
    cfg: &BottleneckConfig,
    seed: u64,
) -> Result<(Tensor<E>, Tensor<E>)> {
    cfg.validate()?;
    let n: usize = shape.iter().product();
    let keep_scale = 1.0 / (1.0 - cfg.mask_prob);
    let mut s = Stream::derive(seed, "bottleneck", 0);
    let mut mask = Vec::with_capacity(n);
    for _ in 0..n {
        let keep = s.uniform() >= cfg.mask_prob;
        mask.push(E::from_f64(if keep { keep_scale } else { 0.0 }));
    }
    let mut noise = Vec::with_capacity(n);
    for _ in 0..n {
        noise.push(E::from_f64(cfg.noise_std * s.normal()));
    }
    Ok((Tensor::new(shape.to_vec(), mask)?, Tensor::new(shape.to_vec(), noise)?))
}

/// Identity bindings for evaluation: an all-ones mask and all-zero noise.
pub fn identity_bottleneck<E: Element>(shape: &[usize]) -> (Tensor<E>, Tensor<E>) {
    (Tensor::filled(shape, E::ONE), Tensor::zeros(shape))
}

/// Standalone bottleneck: stochastic in training mode, bit-exact passthrough
/// in evaluation mode.
pub fn noisy_bottleneck<E: Element>(
    z: &Tensor<E>,
    cfg: &BottleneckConfig,
    seed: u64,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    if !cfg.training {
        return Ok(z.clone());
    }
    let (mask, noise) = sample_bottleneck::<E>(z.shape(), cfg, seed)?;
    let mut out = z.clone();
    for ((o, &m), &n) in out
        .data_mut()
        .iter_mut()
        .zip(mask.data())
        .zip(noise.data())
    {
        *o = *o * m + n;
    }
    Ok(out)
}

/// Graph-side bottleneck over externally bound mask/noise inputs.
pub fn bottleneck_fragment(
    b: &mut GraphBuilder,
    tokens: NodeId,
    mask: NodeId,
    noise: NodeId,
) -> Result<NodeId> {
    let masked = b.mul(tokens, mask)?;
    b.add(masked, noise)
}

/// Kernelized attention `phi(Q) (phi(K)^T V) / (phi(Q) sum_j phi(K_j)^T)`
/// with `phi(x) = elu(x) + 1`, computed in the reordered form (linear in the
/// key count).
pub fn linear_attention_fragment(
    b: &mut GraphBuilder,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let n = b.shape(q)[0];
    let d = b.shape(q)[1];
    let pq = b.elu(q);
    let pq = b.add_scalar(pq, 1.0);
    let pk = b.elu(k);
    let pk = b.add_scalar(pk, 1.0);
    let pkt = b.transpose(pk)?;
    let kv = b.matmul(pkt, v)?; // d x d
    let num = b.matmul(pq, kv)?; // n x d
    let ksum = b.sum(pk, Some(0))?; // d
    let ksum = b.reshape(ksum, &[d, 1])?;
    let den = b.matmul(pq, ksum)?; // n x 1, strictly positive since phi > 0
    let inv = b.pow_scalar(den, -1.0);
    let inv = b.broadcast(inv, &[n, d])?;
    b.mul(num, inv)
}

/// Which attention the decoder blocks use. The plain-decoder ablation swaps
/// the kernelized form for standard softmax attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderAttention {
    Linear,
    Softmax,
}

/// One decoder block: self-attention with residual, then a feed-forward
/// sublayer with residual.
pub fn decoder_block_fragment(
    b: &mut GraphBuilder,
    tokens: NodeId,
    hidden: usize,
    attention: DecoderAttention,
    prefix: &str,
) -> Result<NodeId> {
    let d = b.shape(tokens)[1];
    let w_q = b.param(&format!("{prefix}.w_q"), &[d, d])?;
    let w_k = b.param(&format!("{prefix}.w_k"), &[d, d])?;
    let w_v = b.param(&format!("{prefix}.w_v"), &[d, d])?;
    let w_o = b.param(&format!("{prefix}.w_o"), &[d, d])?;
    let q = b.matmul(tokens, w_q)?;
    let k = b.matmul(tokens, w_k)?;
    let v = b.matmul(tokens, w_v)?;
    let attn = match attention {
        DecoderAttention::Linear => linear_attention_fragment(b, q, k, v)?,
        DecoderAttention::Softmax => {
            let kt = b.transpose(k)?;
            let scores = b.matmul(q, kt)?;
            let scores = b.mul_scalar(scores, 1.0 / (d as f64).sqrt());
            let weights = softmax_rows(b, scores)?;
            b.matmul(weights, v)?
        }
    };
    let attn = b.matmul(attn, w_o)?;
    let t1 = b.add(tokens, attn)?;

    let ff_w1 = b.param(&format!("{prefix}.ff_w1"), &[d, hidden])?;
    let ff_b1 = b.param(&format!("{prefix}.ff_b1"), &[hidden])?;
    let ff_w2 = b.param(&format!("{prefix}.ff_w2"), &[hidden, d])?;
    let ff_b2 = b.param(&format!("{prefix}.ff_b2"), &[d])?;
    let h = b.linear(t1, ff_w1, Some(ff_b1))?;
    let h = b.elu(h);
    let ff = b.linear(h, ff_w2, Some(ff_b2))?;
    b.add(t1, ff)
}

/// Decoder stack plus output head: `blocks` blocks over the token sequence,
/// then GeM pooling and a linear map to the unified latent width. Returns a
/// `1 x out` node.
pub fn decoder_fragment(
    b: &mut GraphBuilder,
    tokens: NodeId,
    blocks: usize,
    hidden: usize,
    out: usize,
    attention: DecoderAttention,
    prefix: &str,
) -> Result<NodeId> {
    let d = b.shape(tokens)[1];
    let mut t = tokens;
    for i in 0..blocks {
        t = decoder_block_fragment(b, t, hidden, attention, &format!("{prefix}.{i}"))?;
    }
    let p_raw = b.param(&format!("{prefix}.head.p_raw"), &[])?;
    let pooled = gem_fragment(b, t, p_raw)?; // 1 x d
    let head_w = b.param(&format!("{prefix}.head.w"), &[d, out])?;
    let head_b = b.param(&format!("{prefix}.head.b"), &[out])?;
    b.linear(pooled, head_w, Some(head_b))
}

// ---- standalone operation API ----

/// Kernelized attention over explicit `Q`, `K`, `V` matrices. Asserts the
/// (structurally positive) normalizer stays above 1e-12.
pub fn linear_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::ShapeMismatch("attention expects 2-D inputs".into()));
    }
    if q.shape()[1] != k.shape()[1] || k.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "attention shapes: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut b = GraphBuilder::new();
    let qi = b.input("q", q.shape())?;
    let ki = b.input("k", k.shape())?;
    let vi = b.input("v", v.shape())?;
    // Expose the normalizer so the defensive bound can be asserted.
    let pk = b.elu(ki);
    let pk = b.add_scalar(pk, 1.0);
    let pq = b.elu(qi);
    let pq = b.add_scalar(pq, 1.0);
    let ksum = b.sum(pk, Some(0))?;
    let ksum = b.reshape(ksum, &[k.shape()[1], 1])?;
    let den = b.matmul(pq, ksum)?;
    b.mark_output("den", den);
    let out = linear_attention_fragment(&mut b, qi, ki, vi)?;
    b.mark_output("out", out);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("q".into(), q.clone());
    bindings.insert("k".into(), k.clone());
    bindings.insert("v".into(), v.clone());
    let outs = forward(&graph, &bindings)?;
    if outs["den"].data().iter().any(|d| d.to_f64() < 1e-12) {
        return Err(Error::Data(
            "linear attention normalizer below 1e-12".into(),
        ));
    }
    Ok(outs["out"].clone())
}

/// Decoder parameters for the standalone API.
#[derive(Debug, Clone)]
pub struct DecoderBlockParams<E: Element> {
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
    pub ff_w1: Tensor<E>,
    pub ff_b1: Tensor<E>,
    pub ff_w2: Tensor<E>,
    pub ff_b2: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams<E: Element> {
    pub blocks: Vec<DecoderBlockParams<E>>,
    pub attention: DecoderAttention,
    pub head_p_raw: Tensor<E>,
    pub head_w: Tensor<E>,
    pub head_b: Tensor<E>,
}

/// Decodes a (bottlenecked) token sequence into the predicted result latent.
pub fn decode<E: Element>(tokens: &Tensor<E>, p: &DecoderParams<E>) -> Result<Tensor<E>> {
    if tokens.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "decode expects N x D tokens, got {:?}",
            tokens.shape()
        )));
    }
    let hidden = p
        .blocks
        .first()
        .map(|bl| bl.ff_w1.shape()[1])
        .unwrap_or(1);
    let out_dim = p.head_w.shape()[1];
    let mut b = GraphBuilder::new();
    let t = b.input("t", tokens.shape())?;
    let z = decoder_fragment(&mut b, t, p.blocks.len(), hidden, out_dim, p.attention, "p")?;
    b.mark_output("z", z);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("t".into(), tokens.clone());
    for (i, bl) in p.blocks.iter().enumerate() {
        bindings.insert(format!("p.{i}.w_q"), bl.w_q.clone());
        bindings.insert(format!("p.{i}.w_k"), bl.w_k.clone());
        bindings.insert(format!("p.{i}.w_v"), bl.w_v.clone());
        bindings.insert(format!("p.{i}.w_o"), bl.w_o.clone());
        bindings.insert(format!("p.{i}.ff_w1"), bl.ff_w1.clone());
        bindings.insert(format!("p.{i}.ff_b1"), bl.ff_b1.clone());
        bindings.insert(format!("p.{i}.ff_w2"), bl.ff_w2.clone());
        bindings.insert(format!("p.{i}.ff_b2"), bl.ff_b2.clone());
    }
    bindings.insert("p.head.p_raw".into(), p.head_p_raw.clone());
    bindings.insert("p.head.w".into(), p.head_w.clone());
    bindings.insert("p.head.b".into(), p.head_b.clone());
    forward(&graph, &bindings)?["z"].clone().reshaped(vec![out_dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::linear_attention_reference;
    use crate::rng::Stream;

    fn rt(s: &mut Stream, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| s.normal() * scale).collect()).unwrap()
    }

    #[test]
    fn kernel_feature_map_is_strictly_positive() {
        // phi(x) = elu(x) + 1 > 0 over a wide grid.
        let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
        let mut x = -100.0;
        while x <= 100.0 {
            assert!(phi(x) > 0.0, "phi({x}) = {}", phi(x));
            x += 0.25;
        }
    }

    #[test]
    fn single_key_returns_the_value_row() {
        let mut s = Stream::derive(1, "la", 0);
        let q = rt(&mut s, &[4, 3], 1.0);
        let k = rt(&mut s, &[1, 3], 1.0);
        let v = rt(&mut s, &[1, 3], 1.0);
        let out = linear_attention(&q, &k, &v).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!((out.at2(i, j) - v.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut s = Stream::derive(2, "la", 0);
        let q = rt(&mut s, &[3, 4], 1.0);
        let key_row = rt(&mut s, &[1, 4], 1.0);
        let mut k_data = Vec::new();
        for _ in 0..5 {
            k_data.extend_from_slice(key_row.data());
        }
        let k = Tensor::<f64>::new(vec![5, 4], k_data).unwrap();
        let v = rt(&mut s, &[5, 4], 1.0);
        let out = linear_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mean: f64 = (0..5).map(|r| v.at2(r, j)).sum::<f64>() / 5.0;
                assert!((out.at2(i, j) - mean).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reordered_form_matches_quadratic_oracle() {
        let mut s = Stream::derive(3, "la-oracle", 0);
        for case in 0..100 {
            let (n, m, d) = (6usize, 6usize, 4usize);
            let q = rt(&mut s, &[n, d], 1.5);
            let k = rt(&mut s, &[m, d], 1.5);
            let v = rt(&mut s, &[m, d], 1.5);
            let fast = linear_attention(&q, &k, &v).unwrap();
            let slow = linear_attention_reference(q.data(), k.data(), v.data(), n, m, d);
            for (a, b) in fast.data().iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-10, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn bottleneck_identity_cases() {
        let mut s = Stream::derive(4, "bn", 0);
        let z = rt(&mut s, &[4, 3], 1.0);
        // Evaluation mode: bit-identical passthrough.
        let eval = BottleneckConfig { mask_prob: 0.5, noise_std: 0.3, training: false };
        assert_eq!(noisy_bottleneck(&z, &eval, 7).unwrap(), z);
        // Degenerate training config: also the identity.
        let degen = BottleneckConfig { mask_prob: 0.0, noise_std: 0.0, training: true };
        assert_eq!(noisy_bottleneck(&z, &degen, 7).unwrap(), z);
        // Invalid drop probability is rejected.
        let bad = BottleneckConfig { mask_prob: 1.0, noise_std: 0.0, training: true };
        assert!(noisy_bottleneck(&z, &bad, 7).is_err());
    }

    #[test]
    fn bottleneck_is_unbiased() {
        // Empirical mean of masked-scaled outputs converges to the input.
        let z = Tensor::<f64>::new(vec![1, 4], vec![0.8, 1.2, -0.9, 1.5]).unwrap();
        let cfg = BottleneckConfig { mask_prob: 0.5, noise_std: 0.0, training: true };
        let draws = 100_000u64;
        let mut sums = vec![0.0f64; 4];
        for seed in 0..draws {
            let out = noisy_bottleneck(&z, &cfg, seed).unwrap();
            for (s, &v) in sums.iter_mut().zip(out.data()) {
                *s += v;
            }
        }
        for (i, s) in sums.iter().enumerate() {
            let mean = s / draws as f64;
            let rel = ((mean - z.data()[i]) / z.data()[i]).abs();
            assert!(rel < 0.02, "dim {i}: mean {mean} vs {}", z.data()[i]);
        }
    }

    fn tiny_decoder(seed: u64, blocks: usize, attention: DecoderAttention) -> DecoderParams<f64> {
        let mut s = Stream::derive(seed, "dec", 0);
        let d = 4usize;
        let blocks = (0..blocks)
            .map(|_| DecoderBlockParams {
                w_q: rt(&mut s, &[d, d], 0.3),
                w_k: rt(&mut s, &[d, d], 0.3),
                w_v: rt(&mut s, &[d, d], 0.3),
                w_o: rt(&mut s, &[d, d], 0.3),
                ff_w1: rt(&mut s, &[d, 6], 0.3),
                ff_b1: Tensor::zeros(&[6]),
                ff_w2: rt(&mut s, &[6, d], 0.3),
                ff_b2: Tensor::zeros(&[d]),
            })
            .collect();
        DecoderParams {
            blocks,
            attention,
            head_p_raw: Tensor::scalar((2.0f64.exp() - 1.0).ln()),
            head_w: rt(&mut s, &[d, 8], 0.3),
            head_b: Tensor::zeros(&[8]),
        }
    }

    #[test]
    fn decode_output_width_and_determinism() {
        let mut s = Stream::derive(5, "dec-io", 0);
        for n in [1usize, 3, 7] {
            let tokens = rt(&mut s, &[n, 4], 1.0);
            let p = tiny_decoder(6, 2, DecoderAttention::Linear);
            let z1 = decode(&tokens, &p).unwrap();
            let z2 = decode(&tokens, &p).unwrap();
            assert_eq!(z1.shape(), &[8]);
            assert_eq!(z1, z2);
        }
    }

    #[test]
    fn empty_block_stack_is_head_of_gem() {
        let mut s = Stream::derive(7, "dec-empty", 0);
        let tokens = rt(&mut s, &[5, 4], 1.0);
        let p = tiny_decoder(8, 0, DecoderAttention::Linear);
        let z = decode(&tokens, &p).unwrap();
        // Direct computation: gem(p=3) over clamped tokens, then linear head.
        let clamped = tokens.map(|v| v.max(1e-6));
        let gem = crate::model::encoders::gem_pool(&clamped, 3.0).unwrap();
        let mut expect = vec![0.0f64; 8];
        for j in 0..8 {
            expect[j] = p.head_b.data()[j];
            for i in 0..4 {
                expect[j] += gem.data()[i] * p.head_w.data()[i * 8 + j];
            }
        }
        for (a, e) in z.data().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }
}
