//! Gradient saliency maps over the result tokens.
//!
//! The cosine-distance term of the anomaly score is backpropagated to the
//! result feature tokens; each token's gradient L2 norm becomes one cell of a
//! per-angle saliency grid, which is bilinearly upsampled, Gaussian-smoothed,
//! and min-max normalized into [0, 1]. Because the predicted latent is built
//! from the process side only, high responses mark where the observed result
//! deviates from the process-implied expectation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::autodiff::Exec;
use crate::data::synth::SampleRecord;
use crate::error::{Error, Result};
use crate::imageops::{bilinear_resize, gaussian_blur, minmax_normalize};
use crate::model::{bind_sample, bind_state, build_pipeline, ModelState, PassMode};
use crate::tensor::Tensor;

/// Per-angle saliency maps for one sample, each `res x res` in [0, 1].
pub fn heatmap(state: &ModelState, record: &SampleRecord) -> Result<Vec<Tensor<f32>>> {
    let shapes = &state.cfg.shapes;
    let n_i = shapes.n_image;
    let grid = (n_i as f64).sqrt() as usize;
    if grid * grid != n_i {
        return Err(Error::Data(format!(
            "saliency maps need a square token grid; {n_i} image tokens per angle \
             do not form one"
        )));
    }
    let res = state.cfg.loss.heatmap_res;
    let sigma = state.cfg.loss.heatmap_sigma;

    let pl = build_pipeline(&state.cfg, 1)?;
    let mut exec = Exec::<f64>::new(&pl.graph);
    bind_state(&mut exec, &pl, state)?;
    bind_sample(&mut exec, &pl, state, 0, record, PassMode::Eval)?;
    exec.forward(&pl.graph)?;
    exec.backward(&pl.graph, pl.samples[0].cos_dist)?;
    let f_i = pl
        .graph
        .leaf("feat_image/0")
        .expect("pipeline always has result features");
    let grad = exec.grad(&pl.graph, f_i); // M x N_i x D

    let d = shapes.feat_dim;
    let mut maps = Vec::with_capacity(shapes.m_angles);
    for m in 0..shapes.m_angles {
        let mut cells = vec![0.0f64; n_i];
        for (token, cell) in cells.iter_mut().enumerate() {
            let base = (m * n_i + token) * d;
            let norm2: f64 = grad.data()[base..base + d].iter().map(|g| g * g).sum();
            *cell = norm2.sqrt();
        }
        let mut up = bilinear_resize(&cells, grid, grid, res, res);
        up = gaussian_blur(&up, res, res, sigma);
        minmax_normalize(&mut up);
        maps.push(Tensor::new(
            vec![res, res],
            up.into_iter().map(|v| v as f32).collect(),
        )?);
    }
    Ok(maps)
}

/// Writes a [0, 1] map as an 8-bit binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    if map.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "PGM writer expects a 2-D map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}
