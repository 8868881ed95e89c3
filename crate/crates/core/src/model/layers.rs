//! Layer forward/backward primitives on `f64` tensors.
//!
//! All loops run in a fixed order, so repeated evaluation is bit-reproducible;
//! every backward returns the exact analytic adjoint of its forward.

use ndarray::{Array1, Array3, Array4};

/// 2-d convolution over `[C_in, H, W]` with kernel `[C_out, C_in, k, k]`,
/// implicit zero padding of `k/2`, and the given stride.
pub fn conv2d(x: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>, stride: usize) -> Array3<f64> {
    let (cin, h, wd) = x.dim();
    let (cout, cin_w, k, _) = w.dim();
    assert_eq!(cin, cin_w, "input channels {cin} vs kernel {cin_w}");
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let xs = x.as_slice().expect("contiguous input");
    let ws = w.as_slice().expect("contiguous kernel");
    let mut out = vec![0.0f64; cout * oh * ow];
    for o in 0..cout {
        for i in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let wv = ws[((o * cin + i) * k + dy) * k + dx];
                    for oy in 0..oh {
                        let y = oy * stride + dy;
                        if y < pad || y - pad >= h {
                            continue;
                        }
                        let xrow = &xs[(i * h + y - pad) * wd..(i * h + y - pad + 1) * wd];
                        let orow = &mut out[(o * oh + oy) * ow..(o * oh + oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let xcol = ox * stride + dx;
                            if xcol >= pad && xcol - pad < wd {
                                *ov += wv * xrow[xcol - pad];
                            }
                        }
                    }
                }
            }
        }
        let orow = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for v in orow.iter_mut() {
            *v += b[o];
        }
    }
    Array3::from_shape_vec((cout, oh, ow), out).expect("conv output shape")
}

/// Gradients of a scalar objective through [`conv2d`]: returns
/// `(d_x, d_w, d_b)` given the objective's gradient w.r.t. the output.
pub fn conv2d_backward(
    x: &Array3<f64>,
    w: &Array4<f64>,
    stride: usize,
    d_out: &Array3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (cin, h, wd) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (_, oh, ow) = d_out.dim();
    let pad = k / 2;
    let xs = x.as_slice().expect("contiguous input");
    let ws = w.as_slice().expect("contiguous kernel");
    let gs = d_out.as_slice().expect("contiguous gradient");

    let mut d_x = vec![0.0f64; cin * h * wd];
    let mut d_w = vec![0.0f64; cout * cin * k * k];
    let mut d_b = Array1::zeros(cout);
    for o in 0..cout {
        let mut acc = 0.0;
        for &g in &gs[o * oh * ow..(o + 1) * oh * ow] {
            acc += g;
        }
        d_b[o] = acc;
        for i in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let wv = ws[((o * cin + i) * k + dy) * k + dx];
                    let mut wacc = 0.0;
                    for oy in 0..oh {
                        let y = oy * stride + dy;
                        if y < pad || y - pad >= h {
                            continue;
                        }
                        let xrow = &xs[(i * h + y - pad) * wd..(i * h + y - pad + 1) * wd];
                        let dxrow =
                            &mut d_x[(i * h + y - pad) * wd..(i * h + y - pad + 1) * wd];
                        let grow = &gs[(o * oh + oy) * ow..(o * oh + oy + 1) * ow];
                        for (ox, &g) in grow.iter().enumerate() {
                            let xcol = ox * stride + dx;
                            if xcol >= pad && xcol - pad < wd {
                                wacc += g * xrow[xcol - pad];
                                dxrow[xcol - pad] += g * wv;
                            }
                        }
                    }
                    d_w[((o * cin + i) * k + dy) * k + dx] = wacc;
                }
            }
        }
    }
    (
        Array3::from_shape_vec((cin, h, wd), d_x).expect("d_x shape"),
        Array4::from_shape_vec((cout, cin, k, k), d_w).expect("d_w shape"),
        d_b,
    )
}

/// Per-channel affine `scale[c] * x + shift[c]` — normalization without batch
/// statistics, so eval and train behave identically.
pub fn affine(x: &Array3<f64>, scale: &Array1<f64>, shift: &Array1<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| scale[ci] * x[(ci, i, j)] + shift[ci])
}

/// Returns `(d_x, d_scale, d_shift)`.
pub fn affine_backward(
    x: &Array3<f64>,
    scale: &Array1<f64>,
    d_out: &Array3<f64>,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (c, h, w) = x.dim();
    let mut d_scale = Array1::zeros(c);
    let mut d_shift = Array1::zeros(c);
    let mut d_x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let g = d_out[(ci, i, j)];
                d_scale[ci] += g * x[(ci, i, j)];
                d_shift[ci] += g;
                d_x[(ci, i, j)] = g * scale[ci];
            }
        }
    }
    (d_x, d_scale, d_shift)
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `pre` is the pre-activation the forward saw; gradient passes where it was
/// strictly positive.
pub fn relu_backward(pre: &Array3<f64>, d_out: &Array3<f64>) -> Array3<f64> {
    let mut d_x = d_out.clone();
    d_x.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    d_x
}

/// Per-axis sampling table for half-pixel-centered bilinear interpolation:
/// each output index reads `(lo, hi, t)` with value `(1-t)*in[lo] + t*in[hi]`.
fn lerp_table(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let last = n_in as isize - 1;
    (0..n_in * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let lo = (floor as isize).clamp(0, last) as usize;
            let hi = (floor as isize + 1).clamp(0, last) as usize;
            (lo, hi, t)
        })
        .collect()
}

/// Bilinear upsampling of `[C, h, w]` by an integer factor (half-pixel
/// alignment, edge-clamped). Factor 1 is the exact identity.
pub fn upsample_bilinear(x: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let rows = lerp_table(h, factor);
    let cols = lerp_table(w, factor);
    let mut out = Array3::zeros((c, h * factor, w * factor));
    for ci in 0..c {
        for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
                let top = (1.0 - tx) * x[(ci, y0, x0)] + tx * x[(ci, y0, x1)];
                let bot = (1.0 - tx) * x[(ci, y1, x0)] + tx * x[(ci, y1, x1)];
                out[(ci, oy, ox)] = (1.0 - ty) * top + ty * bot;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`]: scatter the output gradient back through
/// the same interpolation weights.
pub fn upsample_bilinear_backward(d_out: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, oh, ow) = d_out.dim();
    let (h, w) = (oh / factor, ow / factor);
    let rows = lerp_table(h, factor);
    let cols = lerp_table(w, factor);
    let mut d_x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
                let g = d_out[(ci, oy, ox)];
                d_x[(ci, y0, x0)] += g * (1.0 - ty) * (1.0 - tx);
                d_x[(ci, y0, x1)] += g * (1.0 - ty) * tx;
                d_x[(ci, y1, x0)] += g * ty * (1.0 - tx);
                d_x[(ci, y1, x1)] += g * ty * tx;
            }
        }
    }
    d_x
}
