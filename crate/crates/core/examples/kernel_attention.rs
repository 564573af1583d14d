//! Kernelized linear attention: the reordered linear-time form against the
//! direct quadratic computation with explicit normalized weights.
//!
//! ```bash
//! cargo run --example kernel_attention
//! ```

use procres::model::decoder::linear_attention;
use procres::oracle::linear_attention_reference;
use procres::rng::Stream;
use procres::tensor::Tensor;

fn main() {
    let mut s = Stream::derive(3, "example-attn", 0);
    let (n, m, d) = (8usize, 12usize, 6usize);
    let mut t = |rows: usize| {
        Tensor::<f64>::new(vec![rows, d], (0..rows * d).map(|_| s.normal()).collect()).unwrap()
    };
    let q = t(n);
    let k = t(m);
    let v = t(m);

    let fast = linear_attention(&q, &k, &v).unwrap();
    let slow = linear_attention_reference(q.data(), k.data(), v.data(), n, m, d);
    let max_err = fast
        .data()
        .iter()
        .zip(&slow)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("reordered vs quadratic oracle: max |diff| = {max_err:.3e}");
    assert!(max_err < 1e-10);

    // One key: every query returns that key's value row.
    let k1 = Tensor::<f64>::new(vec![1, d], (0..d).map(|i| 0.3 * i as f64 - 0.7).collect())
        .unwrap();
    let v1 = Tensor::<f64>::new(vec![1, d], (0..d).map(|i| 1.0 - 0.2 * i as f64).collect())
        .unwrap();
    let single = linear_attention(&q, &k1, &v1).unwrap();
    for row in 0..n {
        for col in 0..d {
            assert!((single.at2(row, col) - v1.at2(0, col)).abs() < 1e-12);
        }
    }
    println!("single-key attention returns the value row for every query");
}
