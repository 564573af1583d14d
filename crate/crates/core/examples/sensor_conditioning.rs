//! Sensor-driven feature-wise modulation: encode a sensor series, project the
//! latent state to (gamma, beta), and apply the affine modulation to a token
//! matrix.
//!
//! ```bash
//! cargo run --example sensor_conditioning
//! ```

use procres::model::modulation::{
    film_modulate, project_affine, ssm_encode, ModulationHead, SsmDims, SsmParams,
};
use procres::rng::Stream;
use procres::tensor::Tensor;

fn main() {
    let dims = SsmDims { c_in: 3, d_model: 6, d_state: 4 };
    let mut s = Stream::derive(11, "example-film", 0);
    let mut t = |shape: &[usize], scale: f64| {
        let n: usize = shape.iter().product();
        Tensor::<f64>::new(shape.to_vec(), (0..n).map(|_| s.normal() * scale).collect()).unwrap()
    };
    let ssm = SsmParams {
        dims,
        w_in: t(&[3, 6], 0.4),
        b_in: Tensor::zeros(&[6]),
        w_dt: t(&[6, 6], 0.3),
        b_dt: Tensor::filled(&[6], -2.0),
        w_b: t(&[6, 4], 0.4),
        w_c: t(&[6, 4], 0.4),
        a_log: t(&[6, 4], 0.3),
        w_out: t(&[6, 6], 0.4),
        b_out: Tensor::zeros(&[6]),
    };
    let head = ModulationHead {
        w_gamma: t(&[6, 5], 0.2),
        b_gamma: Tensor::zeros(&[5]),
        w_beta: t(&[6, 5], 0.2),
        b_beta: Tensor::zeros(&[5]),
    };

    // A calm series and one with a transient dip in channel 0.
    let steps = 24;
    let calm = t(&[steps, 3], 0.1);
    let tokens = t(&[4, 5], 1.0);
    drop(t);
    let mut dipped = calm.clone();
    for step in 10..16 {
        dipped.data_mut()[step * 3] -= 3.0;
    }
    for (name, series) in [("calm", &calm), ("dipped", &dipped)] {
        let h_s = ssm_encode(series, &ssm).unwrap();
        let (gamma, beta) = project_affine(&h_s, &head).unwrap();
        let modulated = film_modulate(&tokens, &gamma, &beta).unwrap();
        let shift: f64 = modulated
            .data()
            .iter()
            .zip(tokens.data())
            .map(|(m, t)| (m - t).abs())
            .sum::<f64>()
            / tokens.numel() as f64;
        println!(
            "{name:>6}: gamma[0] {:+.4} beta[0] {:+.4} mean |token shift| {:.4}",
            gamma.data()[0],
            beta.data()[0],
            shift
        );
    }
    // Identity check: zero modulation leaves tokens untouched.
    let zero = Tensor::<f64>::zeros(&[5]);
    assert_eq!(film_modulate(&tokens, &zero, &zero).unwrap(), tokens);
    println!("gamma = beta = 0 reproduces the tokens exactly");
}
