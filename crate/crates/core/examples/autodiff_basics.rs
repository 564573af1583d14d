//! Build a computation graph, run forward and reverse passes, and verify the
//! gradients against central finite differences.
//!
//! ```bash
//! cargo run --example autodiff_basics
//! ```

use std::collections::BTreeMap;

use procres::autodiff::{backward, forward, grad_check, GradCheckSetup, GraphBuilder};
use procres::tensor::Tensor;

fn main() {
    // loss = mean((x W + b)^2) over a 3x2 input.
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[3, 2]).unwrap();
    let w = b.param("w", &[2, 4]).unwrap();
    let bias = b.param("bias", &[4]).unwrap();
    let y = b.linear(x, w, Some(bias)).unwrap();
    let sq = b.pow_scalar(y, 2.0);
    let loss = b.mean(sq, None).unwrap();
    b.mark_output("y", y);
    b.mark_output("loss", loss);
    let graph = b.finish();

    let mut bindings: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    bindings.insert(
        "x".into(),
        Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap(),
    );
    bindings.insert(
        "w".into(),
        Tensor::new(vec![2, 4], (0..8).map(|i| 0.1 * i as f64 - 0.35).collect()).unwrap(),
    );
    bindings.insert("bias".into(), Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.3]).unwrap());

    let out = forward(&graph, &bindings).unwrap();
    println!("loss = {}", out["loss"].data()[0]);

    let grads = backward(&graph, &bindings, loss, &["x"]).unwrap();
    println!("dL/dw row 0   = {:?}", &grads["w"].data()[..4]);
    println!("dL/dbias      = {:?}", grads["bias"].data());
    println!("dL/dx row 0   = {:?}", &grads["x"].data()[..2]);

    // Central finite differences agree with the reverse pass.
    let mut setup = GradCheckSetup::new(&graph, loss);
    for (name, t) in &bindings {
        setup = setup.bind(name, t.clone());
    }
    for leaf in ["w", "bias"] {
        let err = grad_check(&setup, leaf, 1e-5).unwrap();
        println!("grad check {leaf}: max relative error {err:.2e}");
        assert!(err < 1e-7);
    }
}
