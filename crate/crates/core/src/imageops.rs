//! Small 2-D grid operations shared by the pseudo-point-cloud mapping and the
//! saliency heatmaps: bilinear resampling, Gaussian smoothing, min-max
//! normalization.

/// Bilinear resize of a row-major `h x w` grid to `out_h x out_w`, with
/// corner-aligned sampling (the four corners map exactly onto each other, so
/// resizing to the native resolution is the identity).
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    assert!(h >= 1 && w >= 1 && out_h >= 1 && out_w >= 1);
    let mut out = vec![0.0f64; out_h * out_w];
    let scale_r = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let scale_c = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    for r in 0..out_h {
        let fr = r as f64 * scale_r;
        let r0 = fr.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let ar = fr - r0 as f64;
        for c in 0..out_w {
            let fc = c as f64 * scale_c;
            let c0 = fc.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let ac = fc - c0 as f64;
            let v00 = src[r0 * w + c0];
            let v01 = src[r0 * w + c1];
            let v10 = src[r1 * w + c0];
            let v11 = src[r1 * w + c1];
            out[r * out_w + c] = v00 * (1.0 - ar) * (1.0 - ac)
                + v01 * (1.0 - ar) * ac
                + v10 * ar * (1.0 - ac)
                + v11 * ar * ac;
        }
    }
    out
}

/// Separable Gaussian blur with standard deviation `sigma` (pixels) and
/// replicated edges. `sigma <= 0` is the identity.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut norm = 0.0;
    for i in -radius..=radius {
        let x = i as f64;
        let v = (-0.5 * x * x / (sigma * sigma)).exp();
        kernel.push(v);
        norm += v;
    }
    for v in kernel.iter_mut() {
        *v /= norm;
    }
    let clamp = |v: isize, max: usize| v.clamp(0, max as isize - 1) as usize;
    // Horizontal then vertical pass.
    let mut tmp = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = clamp(c as isize + ki as isize - radius, w);
                acc += kv * src[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = clamp(r as isize + ki as isize - radius, h);
                acc += kv * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Rescales values into [0, 1]; a constant grid maps to all zeros.
pub fn minmax_normalize(values: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        for v in values.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        for v in values.iter_mut() {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn native_resolution_resize_is_identity() {
        let src = vec![0.0, 1.0, 1.0, 0.0];
        assert_eq!(bilinear_resize(&src, 2, 2, 2, 2), src);
    }

    #[test]
    fn upsample_interpolates_midpoints() {
        let src = vec![0.0, 1.0];
        let out = bilinear_resize(&src, 1, 2, 1, 3);
        assert_eq!(out, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn blur_preserves_constant_grids() {
        let src = vec![0.7; 25];
        let out = gaussian_blur(&src, 5, 5, 1.5);
        for v in out {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_keeps_single_peak_at_its_cell() {
        let mut src = vec![0.0; 49];
        src[3 * 7 + 4] = 1.0;
        let out = gaussian_blur(&src, 7, 7, 1.0);
        let argmax = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 3 * 7 + 4);
    }

    #[test]
    fn minmax_maps_constant_to_zero() {
        let mut v = vec![2.0, 2.0];
        minmax_normalize(&mut v);
        assert_eq!(v, vec![0.0, 0.0]);
        let mut w = vec![1.0, 3.0, 2.0];
        minmax_normalize(&mut w);
        assert_eq!(w, vec![0.0, 1.0, 0.5]);
    }
}
