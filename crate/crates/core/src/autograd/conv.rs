//! Direct convolution and nearest upsampling kernels (NHWC).

use ndarray::{Array2, ArrayD, IxDyn};

use super::{Conv2dSpec, Tensor};

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

struct Geometry {
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
}

fn geometry(x_shape: &[usize], w_shape: &[usize], spec: Conv2dSpec) -> Geometry {
    assert_eq!(x_shape.len(), 4, "conv2d input must be [B, H, W, C]");
    assert_eq!(w_shape.len(), 4, "conv2d kernel must be [kh, kw, Ci, Co]");
    let [b, h, w, ci] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3]];
    let [kh, kw, wci, co] = [w_shape[0], w_shape[1], w_shape[2], w_shape[3]];
    assert_eq!(ci, wci, "conv2d channel mismatch");
    assert!(h + 2 * spec.pad.0 >= kh && w + 2 * spec.pad.1 >= kw, "kernel larger than input");
    Geometry {
        b,
        h,
        w,
        ci,
        kh,
        kw,
        co,
        ho: conv_output_len(h, kh, spec.stride, spec.pad.0),
        wo: conv_output_len(w, kw, spec.stride, spec.pad.1),
    }
}

/// Calls `f(out_index, in_index, tap)` for every valid (output pixel,
/// kernel tap) pair, with flat pixel indices into `[B, Ho, Wo]` and
/// `[B, H, W]` and the tap index `ky * kw + kx`.
fn for_each_tap(g: &Geometry, spec: Conv2dSpec, mut f: impl FnMut(usize, usize, usize)) {
    for bi in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = (bi * g.ho + oy) * g.wo + ox;
                for ky in 0..g.kh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad.0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad.1 as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let i = (bi * g.h + iy as usize) * g.w + ix as usize;
                        f(o, i, ky * g.kw + kx);
                    }
                }
            }
        }
    }
}

pub(super) fn forward(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Tensor {
    let g = geometry(x.shape(), w.shape(), spec);
    let xs = x.as_standard_layout();
    let cols = im2col(&g, spec, xs.as_slice().expect("standard layout"));
    let w2 = w
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((g.kh * g.kw * g.ci, g.co))
        .expect("kernel reshape");
    cols.dot(&w2)
        .into_shape_with_order(IxDyn(&[g.b, g.ho, g.wo, g.co]))
        .expect("output reshape")
}

/// Unfolds input patches into rows `[B * Ho * Wo, kh * kw * Ci]`.
fn im2col(g: &Geometry, spec: Conv2dSpec, xd: &[f64]) -> Array2<f64> {
    let k = g.kh * g.kw * g.ci;
    let mut cols = Array2::<f64>::zeros((g.b * g.ho * g.wo, k));
    let cd = cols.as_slice_mut().expect("fresh array");
    for_each_tap(g, spec, |o, i, tap| {
        let dst = o * k + tap * g.ci;
        cd[dst..dst + g.ci].copy_from_slice(&xd[i * g.ci..(i + 1) * g.ci]);
    });
    cols
}

/// Gradients with respect to the input and the kernel.
pub(super) fn backward(grad: &Tensor, x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> (Tensor, Tensor) {
    let g = geometry(x.shape(), w.shape(), spec);
    let xs = x.as_standard_layout();
    let xd = xs.as_slice().expect("standard layout");
    let k = g.kh * g.kw * g.ci;
    let g2 = grad
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((g.b * g.ho * g.wo, g.co))
        .expect("grad reshape");
    let w2 = w
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((k, g.co))
        .expect("kernel reshape");
    let cols = im2col(&g, spec, xd);
    let gw = cols
        .t()
        .dot(&g2)
        .into_shape_with_order(IxDyn(w.shape()))
        .expect("kernel grad reshape");
    let gcols = g2.dot(&w2.t());
    let gc = gcols.as_slice().expect("standard layout");
    let mut gx = vec![0.0; xd.len()];
    for_each_tap(&g, spec, |o, i, tap| {
        let src = o * k + tap * g.ci;
        for (a, b) in gx[i * g.ci..(i + 1) * g.ci].iter_mut().zip(&gc[src..src + g.ci]) {
            *a += b;
        }
    });
    (ArrayD::from_shape_vec(IxDyn(x.shape()), gx).expect("input grad shape"), gw)
}

pub(super) fn upsample2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "upsample expects [B, H, W, C]");
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let xs = x.as_standard_layout();
    let xd = xs.as_slice().expect("standard layout");
    let mut out = vec![0.0; b * 4 * h * w * c];
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((bi * h + y / 2) * w + xx / 2) * c;
                let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, 2 * h, 2 * w, c]), out).expect("shape")
}

pub(super) fn upsample2x_backward(grad: &Tensor) -> Tensor {
    let s = grad.shape();
    let (b, h2, w2, c) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let gs = grad.as_standard_layout();
    let gd = gs.as_slice().expect("standard layout");
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((bi * h2 + y) * w2 + xx) * c;
                let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                for k in 0..c {
                    out[dst + k] += gd[src + k];
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, h, w, c]), out).expect("shape")
}
