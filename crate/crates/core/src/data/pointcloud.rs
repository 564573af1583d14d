//! Pseudo-point-cloud mapping of sensor time-series.
//!
//! Turns a `T x C` sensor grid into a `3 x res x res` tensor in which channel
//! X is the normalized time-index meshgrid, channel Y the normalized channel
//! index, and channel Z the per-channel min-max-normalized magnitude, each
//! bilinearly upsampled from the native `T x C` grid. Geometry-oriented
//! detectors consume this as a structured depth surface.

use crate::error::{Error, Result};
use crate::imageops::bilinear_resize;
use crate::tensor::Tensor;

/// Maps a `T x C` sensor tensor to `3 x out_res x out_res`.
///
/// A constant channel (min == max) gets depth 0.5 everywhere by convention.
pub fn sensors_to_pseudo_pointcloud(x: &Tensor<f32>, out_res: usize) -> Result<Tensor<f32>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected T x C sensor tensor, got {shape:?}"
        )));
    }
    let (t, c) = (shape[0], shape[1]);
    if t < 2 || c < 2 {
        return Err(Error::Data(format!(
            "pseudo-point-cloud needs T, C >= 2, got {t} x {c}"
        )));
    }
    if out_res < 2 {
        return Err(Error::Data(format!(
            "pseudo-point-cloud needs out_res >= 2, got {out_res}"
        )));
    }

    let mut grid_x = vec![0.0f64; t * c];
    let mut grid_y = vec![0.0f64; t * c];
    let mut grid_z = vec![0.0f64; t * c];
    for ti in 0..t {
        for ci in 0..c {
            grid_x[ti * c + ci] = ti as f64 / (t - 1) as f64;
            grid_y[ti * c + ci] = ci as f64 / (c - 1) as f64;
        }
    }
    for ci in 0..c {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for ti in 0..t {
            let v = x.data()[ti * c + ci] as f64;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for ti in 0..t {
            let v = x.data()[ti * c + ci] as f64;
            grid_z[ti * c + ci] = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        }
    }

    let mut out = Vec::with_capacity(3 * out_res * out_res);
    for grid in [&grid_x, &grid_y, &grid_z] {
        let up = bilinear_resize(grid, t, c, out_res, out_res);
        out.extend(up.into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![3, out_res, out_res], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn native_resolution_matches_direct_normalization() {
        let x = Tensor::<f32>::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let pc = sensors_to_pseudo_pointcloud(&x, 2).unwrap();
        assert_eq!(pc.shape(), &[3, 2, 2]);
        let d = pc.data();
        // X varies along time (rows), Y along channels (cols).
        assert_eq!(&d[0..4], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&d[4..8], &[0.0, 1.0, 0.0, 1.0]);
        // Z: each channel min-max normalized over time.
        assert_eq!(&d[8..12], &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn output_resolution_is_respected() {
        let x = Tensor::<f32>::new(vec![4, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let pc = sensors_to_pseudo_pointcloud(&x, 224).unwrap();
        assert_eq!(pc.shape(), &[3, 224, 224]);
    }

    #[test]
    fn constant_sensor_gives_half_depth_plane() {
        let x = Tensor::<f32>::filled(&[8, 4], 3.25);
        let pc = sensors_to_pseudo_pointcloud(&x, 16).unwrap();
        let z = &pc.data()[2 * 16 * 16..];
        for &v in z {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let x = Tensor::<f32>::filled(&[1, 6], 0.0);
        assert!(sensors_to_pseudo_pointcloud(&x, 8).is_err());
        let x = Tensor::<f32>::filled(&[6, 6], 0.0);
        assert!(sensors_to_pseudo_pointcloud(&x, 1).is_err());
    }
}
