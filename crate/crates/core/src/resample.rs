//! Plain bilinear and nearest-neighbour resampling on row-major planes.
//!
//! Bilinear sampling uses half-pixel centres (`align_corners = false`):
//! destination pixel `j` reads source coordinate `(j + 0.5) * in / out - 0.5`,
//! clamped at the borders.

/// Per-axis interpolation taps: `(lo, hi, weight_of_hi)`.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            (lo, hi, if hi == lo { 0.0 } else { frac })
        })
        .collect()
}

/// Bilinearly resample one `in_h × in_w` plane to `out_h × out_w`.
pub fn bilinear(plane: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(plane.len(), in_h * in_w, "plane size does not match dimensions");
    if in_h == out_h && in_w == out_w {
        return plane.to_vec();
    }
    let ys = bilinear_taps(in_h, out_h);
    let xs = bilinear_taps(in_w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        let r0 = &plane[y0 * in_w..(y0 + 1) * in_w];
        let r1 = &plane[y1 * in_w..(y1 + 1) * in_w];
        for &(x0, x1, fx) in &xs {
            let lerp = |a: f32, b: f32, t: f64| a as f64 + (b as f64 - a as f64) * t;
            let top = lerp(r0[x0], r0[x1], fx);
            let bottom = lerp(r1[x0], r1[x1], fx);
            out.push((top + (bottom - top) * fy) as f32);
        }
    }
    out
}

/// Nearest-neighbour resample; keeps binary masks binary.
pub fn nearest<T: Copy>(plane: &[T], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    assert_eq!(plane.len(), in_h * in_w, "plane size does not match dimensions");
    let pick = |j: usize, in_len: usize, out_len: usize| {
        (((j as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, in_h, out_h);
        for x in 0..out_w {
            out.push(plane[sy * in_w + pick(x, in_w, out_w)]);
        }
    }
    out
}

/// Copy the `size × size` window centred in an `h × w` plane.
pub fn center_crop<T: Copy>(plane: &[T], h: usize, w: usize, size_h: usize, size_w: usize) -> Vec<T> {
    let top = (h - size_h) / 2;
    let left = (w - size_w) / 2;
    crop(plane, w, top, left, size_h, size_w)
}

pub fn crop<T: Copy>(plane: &[T], w: usize, top: usize, left: usize, size_h: usize, size_w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size_h * size_w);
    for y in top..top + size_h {
        out.extend_from_slice(&plane[y * w + left..y * w + left + size_w]);
    }
    out
}
