//! Direct-loop convolution kernels (forward plus both adjoints).
//!
//! Layouts: activations NCHW, conv weights [co][ci][kh][kw], transposed-conv
//! weights [ci][co][kh][kw]. Cross-correlation throughout, no kernel flip.

use crate::num::Scalar;

pub fn conv_out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = inp + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn convt_out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (inp - 1) * stride + k;
    if grown < 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (co, _ci, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let y_base = (b * co + o) * oh * ow;
            for c in 0..ci {
                let x_base = (b * ci + c) * h * w;
                let w_base = (o * ci + c) * kh * kw;
                for p in 0..kh {
                    for q in 0..kw {
                        let wv = wt[w_base + p * kw + q];
                        if wv == T::zero() {
                            continue;
                        }
                        for i in 0..oh {
                            let ih = (i * stride + p).wrapping_sub(pad);
                            if ih >= h {
                                continue;
                            }
                            let xr = x_base + ih * w;
                            let yr = y_base + i * ow;
                            for j in 0..ow {
                                let iw = (j * stride + q).wrapping_sub(pad);
                                if iw < w {
                                    out[yr + j] = out[yr + j] + x[xr + iw] * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of conv2d w.r.t. its input: scatter of dy through the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_dx<T: Scalar>(
    dy: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (co, _ci, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * ci * h * w];
    for b in 0..n {
        for o in 0..co {
            let y_base = (b * co + o) * oh * ow;
            for c in 0..ci {
                let x_base = (b * ci + c) * h * w;
                let w_base = (o * ci + c) * kh * kw;
                for p in 0..kh {
                    for q in 0..kw {
                        let wv = wt[w_base + p * kw + q];
                        if wv == T::zero() {
                            continue;
                        }
                        for i in 0..oh {
                            let ih = (i * stride + p).wrapping_sub(pad);
                            if ih >= h {
                                continue;
                            }
                            let xr = x_base + ih * w;
                            let yr = y_base + i * ow;
                            for j in 0..ow {
                                let iw = (j * stride + q).wrapping_sub(pad);
                                if iw < w {
                                    dx[xr + iw] = dx[xr + iw] + dy[yr + j] * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of conv2d w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_dw<T: Scalar>(
    dy: &[T],
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    (co, _ci, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut dw = vec![T::zero(); co * ci * kh * kw];
    for b in 0..n {
        for o in 0..co {
            let y_base = (b * co + o) * oh * ow;
            for c in 0..ci {
                let x_base = (b * ci + c) * h * w;
                let w_base = (o * ci + c) * kh * kw;
                for p in 0..kh {
                    for q in 0..kw {
                        let mut acc = T::zero();
                        for i in 0..oh {
                            let ih = (i * stride + p).wrapping_sub(pad);
                            if ih >= h {
                                continue;
                            }
                            let xr = x_base + ih * w;
                            let yr = y_base + i * ow;
                            for j in 0..ow {
                                let iw = (j * stride + q).wrapping_sub(pad);
                                if iw < w {
                                    acc = acc + x[xr + iw] * dy[yr + j];
                                }
                            }
                        }
                        dw[w_base + p * kw + q] = dw[w_base + p * kw + q] + acc;
                    }
                }
            }
        }
    }
    dw
}

/// Transposed convolution forward: scatter each input pixel through the kernel.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_fwd<T: Scalar>(
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (_ci, co, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); n * co * oh * ow];
    for b in 0..n {
        for c in 0..ci {
            let x_base = (b * ci + c) * h * w;
            for o in 0..co {
                let y_base = (b * co + o) * oh * ow;
                let w_base = (c * co + o) * kh * kw;
                for p in 0..kh {
                    for q in 0..kw {
                        let wv = wt[w_base + p * kw + q];
                        if wv == T::zero() {
                            continue;
                        }
                        for i in 0..h {
                            let out_i = (i * stride + p).wrapping_sub(pad);
                            if out_i >= oh {
                                continue;
                            }
                            let xr = x_base + i * w;
                            let yr = y_base + out_i * ow;
                            for j in 0..w {
                                let out_j = (j * stride + q).wrapping_sub(pad);
                                if out_j < ow {
                                    out[yr + out_j] = out[yr + out_j] + x[xr + j] * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of convt2d w.r.t. its input: a gather, mirror of `convt2d_fwd`.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_dx<T: Scalar>(
    dy: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (_ci, co, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * ci * h * w];
    for b in 0..n {
        for c in 0..ci {
            let x_base = (b * ci + c) * h * w;
            for o in 0..co {
                let y_base = (b * co + o) * oh * ow;
                let w_base = (c * co + o) * kh * kw;
                for p in 0..kh {
                    for q in 0..kw {
                        let wv = wt[w_base + p * kw + q];
                        if wv == T::zero() {
                            continue;
                        }
                        for i in 0..h {
                            let out_i = (i * stride + p).wrapping_sub(pad);
                            if out_i >= oh {
                                continue;
                            }
                            let xr = x_base + i * w;
                            let yr = y_base + out_i * ow;
                            for j in 0..w {
                                let out_j = (j * stride + q).wrapping_sub(pad);
                                if out_j < ow {
                                    dx[xr + j] = dx[xr + j] + dy[yr + out_j] * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of convt2d w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_dw<T: Scalar>(
    dy: &[T],
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    (_ci, co, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut dw = vec![T::zero(); ci * co * kh * kw];
    for b in 0..n {
        for c in 0..ci {
            let x_base = (b * ci + c) * h * w;
            for o in 0..co {
                let y_base = (b * co + o) * oh * ow;
                let w_base = (c * co + o) * kh * kw;
                for p in 0..kh {
                    for q in 0..kw {
                        let mut acc = T::zero();
                        for i in 0..h {
                            let out_i = (i * stride + p).wrapping_sub(pad);
                            if out_i >= oh {
                                continue;
                            }
                            let xr = x_base + i * w;
                            let yr = y_base + out_i * ow;
                            for j in 0..w {
                                let out_j = (j * stride + q).wrapping_sub(pad);
                                if out_j < ow {
                                    acc = acc + x[xr + j] * dy[yr + out_j];
                                }
                            }
                        }
                        dw[w_base + p * kw + q] = dw[w_base + p * kw + q] + acc;
                    }
                }
            }
        }
    }
    dw
}
