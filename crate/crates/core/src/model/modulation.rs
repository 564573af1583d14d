//! Sensor-governed feature modulation.
//!
//! A selective state-space encoder turns the z-scored sensor series into a
//! latent state `h_s`; an affine head projects `h_s` to per-feature scale and
//! shift `(gamma, beta)`; modulation applies `F * (1 + gamma) + beta` to a
//! token matrix. The scan uses input-dependent step sizes and projections
//! (`dt`, `B`, `C` all derive from the projected input), with strictly
//! negative real decay so the recurrence stays bounded for any positive step.

use std::collections::BTreeMap;

use crate::autodiff::{forward, GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Width configuration of the selective scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmDims {
    /// Sensor channels.
    pub c_in: usize,
    /// Model (channel) width of the scan.
    pub d_model: usize,
    /// State width per channel.
    pub d_state: usize,
}

/// Builds the selective-scan encoder over `x` (`T x C`), returning `h_s` as a
/// `1 x d_model` node. Parameters are declared under `prefix`.
///
/// Per step: `x_t = W_in s_t + b_in`; `dt_t = softplus(W_dt x_t + b_dt)`;
/// `B_t = W_b x_t`; `C_t = W_c x_t`; state update
/// `h_t = exp(dt_t * A) ⊙ h_{t-1} + (dt_t ⊙ x_t) ⊗ B_t` with `A = -exp(A_log)`;
/// readout `h_s = W_out (h_T · C_T) + b_out` from the final step.
pub fn ssm_fragment(
    b: &mut GraphBuilder,
    x: NodeId,
    dims: &SsmDims,
    prefix: &str,
) -> Result<NodeId> {
    let t = b.shape(x)[0];
    let c = b.shape(x)[1];
    if c != dims.c_in {
        return Err(Error::ShapeMismatch(format!(
            "ssm expects {} channels, got {c}",
            dims.c_in
        )));
    }
    let (d, n) = (dims.d_model, dims.d_state);

    let w_in = b.param(&format!("{prefix}.w_in"), &[c, d])?;
    let b_in = b.param(&format!("{prefix}.b_in"), &[d])?;
    let w_dt = b.param(&format!("{prefix}.w_dt"), &[d, d])?;
    let b_dt = b.param(&format!("{prefix}.b_dt"), &[d])?;
    let w_b = b.param(&format!("{prefix}.w_b"), &[d, n])?;
    let w_c = b.param(&format!("{prefix}.w_c"), &[d, n])?;
    let a_log = b.param(&format!("{prefix}.a_log"), &[d, n])?;
    let w_out = b.param(&format!("{prefix}.w_out"), &[d, d])?;
    let b_out = b.param(&format!("{prefix}.b_out"), &[d])?;

    let xp = b.linear(x, w_in, Some(b_in))?; // T x d
    let dt_pre = b.linear(xp, w_dt, Some(b_dt))?;
    let dt = b.softplus(dt_pre); // T x d, strictly positive
    let b_mat = b.matmul(xp, w_b)?; // T x n
    let c_mat = b.matmul(xp, w_c)?; // T x n

    // A = -exp(A_log) is strictly negative real, so exp(dt * A) is in (0, 1).
    let a_exp = b.exp(a_log);
    let a = b.mul_scalar(a_exp, -1.0); // d x n

    let dt3 = b.reshape(dt, &[t, d, 1])?;
    let dt3 = b.broadcast(dt3, &[t, d, n])?;
    let a3 = b.reshape(a, &[1, d, n])?;
    let a3 = b.broadcast(a3, &[t, d, n])?;
    let da = b.mul(dt3, a3)?;
    let decay = b.exp(da); // T x d x n

    let dx = b.mul(dt, xp)?; // T x d
    let dx3 = b.reshape(dx, &[t, d, 1])?;
    let dx3 = b.broadcast(dx3, &[t, d, n])?;
    let b3 = b.reshape(b_mat, &[t, 1, n])?;
    let b3 = b.broadcast(b3, &[t, d, n])?;
    let update = b.mul(dx3, b3)?;

    let h = b.scan_linear(decay, update)?; // T x d x n

    // Final-step readout: y_T[ch] = sum_s C_T[s] * h_T[ch][s].
    let h_t = b.slice(h, 0, t - 1, 1)?;
    let h_t = b.reshape(h_t, &[d, n])?;
    let c_t = b.slice(c_mat, 0, t - 1, 1)?; // 1 x n
    let c_t = b.broadcast(c_t, &[d, n])?;
    let hc = b.mul(h_t, c_t)?;
    let y = b.sum(hc, Some(1))?; // d
    let y = b.reshape(y, &[1, d])?;
    b.linear(y, w_out, Some(b_out))
}

/// Projects `h_s` (`1 x d_model`) to `(gamma, beta)`, both `1 x feat_dim`.
/// No activation: gamma may be negative.
pub fn affine_head_fragment(
    b: &mut GraphBuilder,
    h_s: NodeId,
    feat_dim: usize,
    prefix: &str,
) -> Result<(NodeId, NodeId)> {
    let d = b.shape(h_s)[1];
    let w_gamma = b.param(&format!("{prefix}.w_gamma"), &[d, feat_dim])?;
    let b_gamma = b.param(&format!("{prefix}.b_gamma"), &[feat_dim])?;
    let w_beta = b.param(&format!("{prefix}.w_beta"), &[d, feat_dim])?;
    let b_beta = b.param(&format!("{prefix}.b_beta"), &[feat_dim])?;
    let gamma = b.linear(h_s, w_gamma, Some(b_gamma))?;
    let beta = b.linear(h_s, w_beta, Some(b_beta))?;
    Ok((gamma, beta))
}

/// Feature-wise affine modulation `F ⊙ (1 + gamma) + beta`, with `gamma` and
/// `beta` (`1 x D`) broadcast over the token axis of `F` (`N x D`).
pub fn film_fragment(
    b: &mut GraphBuilder,
    f: NodeId,
    gamma: NodeId,
    beta: NodeId,
) -> Result<NodeId> {
    let shape = b.shape(f).to_vec();
    if b.shape(gamma)[1] != shape[1] || b.shape(beta)[1] != shape[1] {
        return Err(Error::ShapeMismatch(format!(
            "modulation width mismatch: F {:?}, gamma {:?}, beta {:?}",
            shape,
            b.shape(gamma),
            b.shape(beta)
        )));
    }
    let scale = b.add_scalar(gamma, 1.0);
    let scale = b.broadcast(scale, &shape)?;
    let beta_bc = b.broadcast(beta, &shape)?;
    let scaled = b.mul(f, scale)?;
    b.add(scaled, beta_bc)
}

/// Selective-scan parameters for the standalone encoder API.
#[derive(Debug, Clone)]
pub struct SsmParams<E: Element> {
    pub dims: SsmDims,
    pub w_in: Tensor<E>,
    pub b_in: Tensor<E>,
    pub w_dt: Tensor<E>,
    pub b_dt: Tensor<E>,
    pub w_b: Tensor<E>,
    pub w_c: Tensor<E>,
    /// Log-magnitudes of the negative real decay (`A = -exp(A_log)`).
    pub a_log: Tensor<E>,
    pub w_out: Tensor<E>,
    pub b_out: Tensor<E>,
}

impl<E: Element> SsmParams<E> {
    fn entries(&self) -> Vec<(&'static str, &Tensor<E>)> {
        vec![
            ("p.w_in", &self.w_in),
            ("p.b_in", &self.b_in),
            ("p.w_dt", &self.w_dt),
            ("p.b_dt", &self.b_dt),
            ("p.w_b", &self.w_b),
            ("p.w_c", &self.w_c),
            ("p.a_log", &self.a_log),
            ("p.w_out", &self.w_out),
            ("p.b_out", &self.b_out),
        ]
    }
}

/// Standalone selective-scan encoding of a sensor series: returns `h_s` as a
/// `d_model` vector. `x_s` is expected z-scored per channel.
pub fn ssm_encode<E: Element>(x_s: &Tensor<E>, p: &SsmParams<E>) -> Result<Tensor<E>> {
    let mut b = GraphBuilder::new();
    let x = b.input("x", x_s.shape())?;
    let h = ssm_fragment(&mut b, x, &p.dims, "p")?;
    b.mark_output("h_s", h);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("x".into(), x_s.clone());
    for (name, t) in p.entries() {
        bindings.insert(name.into(), t.clone());
    }
    let out = forward(&graph, &bindings)?;
    out["h_s"].clone().reshaped(vec![p.dims.d_model])
}

/// Affine projection head over `h_s`.
#[derive(Debug, Clone)]
pub struct ModulationHead<E: Element> {
    pub w_gamma: Tensor<E>,
    pub b_gamma: Tensor<E>,
    pub w_beta: Tensor<E>,
    pub b_beta: Tensor<E>,
}

/// Projects `h_s` (length-`d` vector) to `(gamma, beta)` vectors of the
/// modulated feature width.
pub fn project_affine<E: Element>(
    h_s: &Tensor<E>,
    head: &ModulationHead<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let d = h_s.numel();
    let feat_dim = head.w_gamma.shape()[1];
    let mut b = GraphBuilder::new();
    let h = b.input("h", &[1, d])?;
    let (g, bt) = affine_head_fragment(&mut b, h, feat_dim, "p")?;
    b.mark_output("gamma", g);
    b.mark_output("beta", bt);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("h".into(), h_s.clone().reshaped(vec![1, d])?);
    bindings.insert("p.w_gamma".into(), head.w_gamma.clone());
    bindings.insert("p.b_gamma".into(), head.b_gamma.clone());
    bindings.insert("p.w_beta".into(), head.w_beta.clone());
    bindings.insert("p.b_beta".into(), head.b_beta.clone());
    let out = forward(&graph, &bindings)?;
    Ok((
        out["gamma"].clone().reshaped(vec![feat_dim])?,
        out["beta"].clone().reshaped(vec![feat_dim])?,
    ))
}

/// Standalone modulation `F ⊙ (1 + gamma) + beta` over a token matrix.
pub fn film_modulate<E: Element>(
    f: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<Tensor<E>> {
    let d = f
        .shape()
        .last()
        .copied()
        .ok_or_else(|| Error::ShapeMismatch("modulation needs a token matrix".into()))?;
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::ShapeMismatch(format!(
            "modulation width mismatch: F {:?}, gamma {}, beta {}",
            f.shape(),
            gamma.numel(),
            beta.numel()
        )));
    }
    let mut b = GraphBuilder::new();
    let fi = b.input("f", f.shape())?;
    let g = b.input("gamma", &[1, d])?;
    let bt = b.input("beta", &[1, d])?;
    let out = film_fragment(&mut b, fi, g, bt)?;
    b.mark_output("out", out);
    let graph = b.finish();
    let mut bindings: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    bindings.insert("f".into(), f.clone());
    bindings.insert("gamma".into(), gamma.clone().reshaped(vec![1, d])?);
    bindings.insert("beta".into(), beta.clone().reshaped(vec![1, d])?);
    Ok(forward(&graph, &bindings)?["out"].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::scan_reference;
    use crate::rng::Stream;

    fn random_params(dims: SsmDims, seed: u64) -> SsmParams<f64> {
        let mut s = Stream::derive(seed, "ssm-test", 0);
        let mut t = |shape: &[usize], scale: f64| {
            let n: usize = shape.iter().product();
            Tensor::<f64>::new(shape.to_vec(), (0..n).map(|_| s.normal() * scale).collect())
                .unwrap()
        };
        let (c, d, n) = (dims.c_in, dims.d_model, dims.d_state);
        SsmParams {
            dims,
            w_in: t(&[c, d], 0.5),
            b_in: t(&[d], 0.1),
            w_dt: t(&[d, d], 0.3),
            b_dt: Tensor::filled(&[d], -1.5),
            w_b: t(&[d, n], 0.4),
            w_c: t(&[d, n], 0.4),
            a_log: t(&[d, n], 0.3),
            w_out: t(&[d, d], 0.4),
            b_out: t(&[d], 0.1),
        }
    }

    fn zero_bias(mut p: SsmParams<f64>) -> SsmParams<f64> {
        p.b_in = Tensor::zeros(&[p.dims.d_model]);
        p.b_out = Tensor::zeros(&[p.dims.d_model]);
        p
    }

    #[test]
    fn zero_input_with_zero_biases_annihilates() {
        let dims = SsmDims { c_in: 3, d_model: 4, d_state: 2 };
        let p = zero_bias(random_params(dims, 1));
        let x = Tensor::<f64>::zeros(&[6, 3]);
        let h = ssm_encode(&x, &p).unwrap();
        for &v in h.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn single_step_recurrence_by_hand() {
        // With T = 1 the state is exactly dt_1 ⊙ B_1 ⊙ x_1 (h_0 = 0); verify
        // through the readout against a direct computation.
        let dims = SsmDims { c_in: 2, d_model: 3, d_state: 2 };
        let p = random_params(dims, 2);
        let x = Tensor::<f64>::new(vec![1, 2], vec![0.7, -0.4]).unwrap();

        // Direct: xp = x W_in + b_in, dt = softplus(xp W_dt + b_dt), etc.
        let (c, d, n) = (2usize, 3usize, 2usize);
        let mut xp = vec![0.0f64; d];
        for j in 0..d {
            xp[j] = p.b_in.data()[j];
            for i in 0..c {
                xp[j] += x.data()[i] * p.w_in.data()[i * d + j];
            }
        }
        let mut dt = vec![0.0f64; d];
        for j in 0..d {
            let mut v = p.b_dt.data()[j];
            for i in 0..d {
                v += xp[i] * p.w_dt.data()[i * d + j];
            }
            dt[j] = if v > 0.0 {
                v + (-v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            };
        }
        let mut bv = vec![0.0f64; n];
        let mut cv = vec![0.0f64; n];
        for s in 0..n {
            for i in 0..d {
                bv[s] += xp[i] * p.w_b.data()[i * n + s];
                cv[s] += xp[i] * p.w_c.data()[i * n + s];
            }
        }
        // h_1[ch][s] = dt[ch] * x[ch] * B[s]; y[ch] = sum_s C[s] h_1[ch][s].
        let mut y = vec![0.0f64; d];
        for ch in 0..d {
            for s in 0..n {
                y[ch] += cv[s] * dt[ch] * xp[ch] * bv[s];
            }
        }
        let mut expect = vec![0.0f64; d];
        for j in 0..d {
            expect[j] = p.b_out.data()[j];
            for i in 0..d {
                expect[j] += y[i] * p.w_out.data()[i * d + j];
            }
        }

        let h = ssm_encode(&x, &p).unwrap();
        for (a, e) in h.data().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn scan_matches_naive_recurrence_oracle() {
        let dims = SsmDims { c_in: 3, d_model: 4, d_state: 3 };
        let p = random_params(dims, 3);
        for steps in [2usize, 5, 8, 33, 64] {
            let mut s = Stream::derive(10 + steps as u64, "ssm-x", 0);
            let x = Tensor::<f64>::new(
                vec![steps, 3],
                (0..steps * 3).map(|_| s.normal()).collect(),
            )
            .unwrap();

            // Feed the oracle the same projected quantities.
            let (c, d, n) = (3usize, 4usize, 3usize);
            let mut xp = vec![0.0f64; steps * d];
            for t in 0..steps {
                for j in 0..d {
                    let mut v = p.b_in.data()[j];
                    for i in 0..c {
                        v += x.data()[t * c + i] * p.w_in.data()[i * d + j];
                    }
                    xp[t * d + j] = v;
                }
            }
            let softplus = |v: f64| {
                if v > 0.0 {
                    v + (-v).exp().ln_1p()
                } else {
                    v.exp().ln_1p()
                }
            };
            let mut dt = vec![0.0f64; steps * d];
            for t in 0..steps {
                for j in 0..d {
                    let mut v = p.b_dt.data()[j];
                    for i in 0..d {
                        v += xp[t * d + i] * p.w_dt.data()[i * d + j];
                    }
                    dt[t * d + j] = softplus(v);
                }
            }
            let mut bm = vec![0.0f64; steps * n];
            let mut cm = vec![0.0f64; steps * n];
            for t in 0..steps {
                for s_i in 0..n {
                    for i in 0..d {
                        bm[t * n + s_i] += xp[t * d + i] * p.w_b.data()[i * n + s_i];
                        cm[t * n + s_i] += xp[t * d + i] * p.w_c.data()[i * n + s_i];
                    }
                }
            }
            let a: Vec<f64> = p.a_log.data().iter().map(|v| -v.exp()).collect();
            let (_h, y) = scan_reference(steps, d, n, &xp, &dt, &bm, &cm, &a);
            let y_last = &y[(steps - 1) * d..];
            let mut expect = vec![0.0f64; d];
            for j in 0..d {
                expect[j] = p.b_out.data()[j];
                for i in 0..d {
                    expect[j] += y_last[i] * p.w_out.data()[i * d + j];
                }
            }

            let h = ssm_encode(&x, &p).unwrap();
            for (idx, (av, ev)) in h.data().iter().zip(expect.iter()).enumerate() {
                assert!(
                    (av - ev).abs() < 1e-10,
                    "steps {steps} dim {idx}: {av} vs {ev}"
                );
            }
        }
    }

    #[test]
    fn scan_state_stays_bounded_for_bounded_inputs() {
        // A is strictly negative, so the recurrence is a contraction: no
        // element may blow up over long bounded inputs.
        let dims = SsmDims { c_in: 2, d_model: 4, d_state: 4 };
        let p = random_params(dims, 4);
        let mut s = Stream::derive(99, "bounded", 0);
        for trial in 0..50 {
            let steps = 64;
            let x = Tensor::<f64>::new(
                vec![steps, 2],
                (0..steps * 2)
                    .map(|_| s.uniform_in(-10.0, 10.0))
                    .collect(),
            )
            .unwrap();
            let h = ssm_encode(&x, &p).unwrap();
            for &v in h.data() {
                assert!(v.abs() < 1e6, "trial {trial}: {v}");
            }
        }
    }

    #[test]
    fn affine_projection_matches_matvec_oracle() {
        let mut s = Stream::derive(5, "head", 0);
        let d = 4usize;
        let feat = 3usize;
        let head = ModulationHead {
            w_gamma: Tensor::<f64>::new(vec![d, feat], (0..d * feat).map(|_| s.normal()).collect())
                .unwrap(),
            b_gamma: Tensor::<f64>::new(vec![feat], (0..feat).map(|_| s.normal()).collect())
                .unwrap(),
            w_beta: Tensor::<f64>::new(vec![d, feat], (0..d * feat).map(|_| s.normal()).collect())
                .unwrap(),
            b_beta: Tensor::<f64>::new(vec![feat], (0..feat).map(|_| s.normal()).collect())
                .unwrap(),
        };
        let h = Tensor::<f64>::new(vec![d], (0..d).map(|_| s.normal()).collect()).unwrap();
        let (gamma, beta) = project_affine(&h, &head).unwrap();
        for j in 0..feat {
            let mut eg = head.b_gamma.data()[j];
            let mut eb = head.b_beta.data()[j];
            for i in 0..d {
                eg += h.data()[i] * head.w_gamma.data()[i * feat + j];
                eb += h.data()[i] * head.w_beta.data()[i * feat + j];
            }
            assert!((gamma.data()[j] - eg).abs() < 1e-6);
            assert!((beta.data()[j] - eb).abs() < 1e-6);
        }

        // Structural zeros: zero h with zero biases gives the identity
        // modulation parameters downstream.
        let zero_head = ModulationHead {
            b_gamma: Tensor::zeros(&[feat]),
            b_beta: Tensor::zeros(&[feat]),
            ..head
        };
        let (g0, b0) = project_affine(&Tensor::<f64>::zeros(&[d]), &zero_head).unwrap();
        assert!(g0.data().iter().all(|&v| v == 0.0));
        assert!(b0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn film_identity_and_hand_values() {
        let f = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zero = Tensor::<f64>::zeros(&[2]);
        let out = film_modulate(&f, &zero, &zero).unwrap();
        assert_eq!(out, f);

        // F = [[2]], gamma = [0.5], beta = [1] -> 2 * 1.5 + 1 = 4.
        let f = Tensor::<f64>::new(vec![1, 1], vec![2.0]).unwrap();
        let g = Tensor::<f64>::new(vec![1], vec![0.5]).unwrap();
        let bt = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(film_modulate(&f, &g, &bt).unwrap().data(), &[4.0]);

        // gamma = -1 annihilates the scale: output is beta everywhere.
        let f = Tensor::<f64>::new(vec![3, 1], vec![5.0, -2.0, 0.25]).unwrap();
        let g = Tensor::<f64>::new(vec![1], vec![-1.0]).unwrap();
        let bt = Tensor::<f64>::new(vec![1], vec![0.75]).unwrap();
        let out = film_modulate(&f, &g, &bt).unwrap();
        assert_eq!(out.data(), &[0.75, 0.75, 0.75]);
    }

    #[test]
    fn film_is_affine_in_the_features() {
        // film(a F1 + b F2) = a film(F1) + b film(F2) - (a + b - 1) beta.
        let mut s = Stream::derive(8, "affine", 0);
        let shape = [3usize, 4usize];
        let mk = |s: &mut Stream| {
            Tensor::<f64>::new(shape.to_vec(), (0..12).map(|_| s.normal()).collect()).unwrap()
        };
        let f1 = mk(&mut s);
        let f2 = mk(&mut s);
        let gamma = Tensor::<f64>::new(vec![4], s.normal_vec(4)).unwrap();
        let beta = Tensor::<f64>::new(vec![4], s.normal_vec(4)).unwrap();
        for _ in 0..5 {
            let a = s.uniform_in(-2.0, 2.0);
            let c = s.uniform_in(-2.0, 2.0);
            let mixed = Tensor::<f64>::new(
                shape.to_vec(),
                f1.data()
                    .iter()
                    .zip(f2.data())
                    .map(|(&x, &y)| a * x + c * y)
                    .collect(),
            )
            .unwrap();
            let lhs = film_modulate(&mixed, &gamma, &beta).unwrap();
            let m1 = film_modulate(&f1, &gamma, &beta).unwrap();
            let m2 = film_modulate(&f2, &gamma, &beta).unwrap();
            for i in 0..12 {
                let rhs = a * m1.data()[i] + c * m2.data()[i]
                    - (a + c - 1.0) * beta.data()[i % 4];
                assert!((lhs.data()[i] - rhs).abs() < 1e-9);
            }
        }
    }
}
