//! Selective state-space encoding of a sensor series, cross-checked against
//! the naive step-by-step recurrence.
//!
//! ```bash
//! cargo run --example selective_scan
//! ```

use procres::model::modulation::{ssm_encode, SsmDims, SsmParams};
use procres::rng::Stream;
use procres::tensor::Tensor;

fn main() {
    let dims = SsmDims { c_in: 4, d_model: 8, d_state: 4 };
    let mut s = Stream::derive(7, "example-ssm", 0);
    let mut t = |shape: &[usize], scale: f64| {
        let n: usize = shape.iter().product();
        Tensor::<f64>::new(shape.to_vec(), (0..n).map(|_| s.normal() * scale).collect()).unwrap()
    };
    let params = SsmParams {
        dims,
        w_in: t(&[4, 8], 0.4),
        b_in: Tensor::zeros(&[8]),
        w_dt: t(&[8, 8], 0.3),
        b_dt: Tensor::filled(&[8], -2.25),
        w_b: t(&[8, 4], 0.4),
        w_c: t(&[8, 4], 0.4),
        a_log: t(&[8, 4], 0.3),
        w_out: t(&[8, 8], 0.4),
        b_out: Tensor::zeros(&[8]),
    };

    let steps = 32;
    let x = Tensor::<f64>::new(vec![steps, 4], (0..steps * 4).map(|_| s.normal()).collect())
        .unwrap();
    let h_s = ssm_encode(&x, &params).unwrap();
    println!("h_s = {:?}", h_s.data());

    // The scan is a linear recurrence with input-dependent coefficients; a
    // plain loop over time steps must agree to near machine precision.
    let (c, d, n) = (4usize, 8usize, 4usize);
    let softplus = |v: f64| {
        if v > 0.0 {
            v + (-v).exp().ln_1p()
        } else {
            v.exp().ln_1p()
        }
    };
    let mut h = vec![0.0f64; d * n];
    let mut y_last = vec![0.0f64; d];
    for step in 0..steps {
        let mut xp = vec![0.0f64; d];
        for j in 0..d {
            for i in 0..c {
                xp[j] += x.data()[step * c + i] * params.w_in.data()[i * d + j];
            }
        }
        let mut dt = vec![0.0f64; d];
        for j in 0..d {
            let mut v = params.b_dt.data()[j];
            for i in 0..d {
                v += xp[i] * params.w_dt.data()[i * d + j];
            }
            dt[j] = softplus(v);
        }
        let mut bv = vec![0.0f64; n];
        let mut cv = vec![0.0f64; n];
        for s_i in 0..n {
            for i in 0..d {
                bv[s_i] += xp[i] * params.w_b.data()[i * n + s_i];
                cv[s_i] += xp[i] * params.w_c.data()[i * n + s_i];
            }
        }
        for ch in 0..d {
            for s_i in 0..n {
                let a = -params.a_log.data()[ch * n + s_i].exp();
                h[ch * n + s_i] =
                    (dt[ch] * a).exp() * h[ch * n + s_i] + dt[ch] * bv[s_i] * xp[ch];
            }
        }
        if step == steps - 1 {
            for ch in 0..d {
                y_last[ch] = (0..n).map(|s_i| cv[s_i] * h[ch * n + s_i]).sum();
            }
        }
    }
    let mut expect = vec![0.0f64; d];
    for j in 0..d {
        expect[j] = params.b_out.data()[j];
        for i in 0..d {
            expect[j] += y_last[i] * params.w_out.data()[i * d + j];
        }
    }
    let max_err = h_s
        .data()
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("max |scan - naive recurrence| = {max_err:.3e}");
    assert!(max_err < 1e-10);
}
