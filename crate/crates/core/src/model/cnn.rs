//! Acoustic front-end: three 3x3 convolutions (valid in time, padded in
//! frequency), two frequency max-pools, dropout, and a fully connected
//! projection with ReLU everywhere.
//!
//! Time is never padded inside the stack, so three 3x3 layers consume
//! exactly three frames of context on each side: a 7-frame receptive
//! field. Sequence-level calls pad the input with three zero frames per
//! side instead, which keeps output length equal to input length and
//! bounds lookahead at three frames.
//!
//! Convolution is im2col + matrix multiply; the naive six-loop form only
//! appears in tests as the oracle.

use crate::scalar::{fr, Scalar};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Scalar> {
    /// out_channels x in_channels x 3 x 3
    pub w: Array4<T>,
    pub b: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar> {
    /// out x in
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(out_ch: usize, in_ch: usize) -> Self {
        Conv2d {
            w: Array4::zeros((out_ch, in_ch, 3, 3)),
            b: Array1::zeros(out_ch),
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(out: usize, input: usize) -> Self {
        Dense {
            w: Array2::zeros((out, input)),
            b: Array1::zeros(out),
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Gather 3x3 patches: rows are `in_ch * 9` kernel positions, columns are
/// `(t_out, f)` output cells. Frequency is zero-padded by one, time is
/// valid (`t_out = t_in - 2`).
fn im2col<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let (c_in, t_in, f) = x.dim();
    let t_out = t_in - 2;
    let mut cols = Array2::<T>::zeros((c_in * 9, t_out * f));
    for c in 0..c_in {
        for dt in 0..3 {
            for df in 0..3 {
                let row = c * 9 + dt * 3 + df;
                for to in 0..t_out {
                    let ti = to + dt;
                    for fo in 0..f {
                        let fi = fo as isize + df as isize - 1;
                        if fi >= 0 && (fi as usize) < f {
                            cols[[row, to * f + fo]] = x[[c, ti, fi as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn weights_as_matrix<T: Scalar>(conv: &Conv2d<T>) -> Array2<T> {
    let (c_out, c_in, _, _) = conv.w.dim();
    let mut w2 = Array2::<T>::zeros((c_out, c_in * 9));
    for co in 0..c_out {
        for ci in 0..c_in {
            for dt in 0..3 {
                for df in 0..3 {
                    w2[[co, ci * 9 + dt * 3 + df]] = conv.w[[co, ci, dt, df]];
                }
            }
        }
    }
    w2
}

pub(crate) struct ConvCache<T: Scalar> {
    cols: Array2<T>,
    /// post-ReLU output, used both as the next layer's input and as the
    /// ReLU mask
    pub out: Array3<T>,
}

/// conv + ReLU. Output shape `(c_out, t_in - 2, f)`.
pub(crate) fn conv_relu_forward<T: Scalar>(x: &Array3<T>, conv: &Conv2d<T>) -> ConvCache<T> {
    let (_, t_in, f) = x.dim();
    let t_out = t_in - 2;
    let c_out = conv.w.dim().0;
    let cols = im2col(x);
    let w2 = weights_as_matrix(conv);
    let out_mat = w2.dot(&cols);
    let mut out = Array3::<T>::zeros((c_out, t_out, f));
    for co in 0..c_out {
        for to in 0..t_out {
            for fo in 0..f {
                let v = out_mat[[co, to * f + fo]] + conv.b[co];
                out[[co, to, fo]] = if v > T::zero() { v } else { T::zero() };
            }
        }
    }
    ConvCache { cols, out }
}

/// Backprop through conv + ReLU. `d_out` matches `cache.out`; returns
/// gradient w.r.t. the layer input and accumulates parameter gradients.
pub(crate) fn conv_relu_backward<T: Scalar>(
    conv: &Conv2d<T>,
    cache: &ConvCache<T>,
    d_out: &Array3<T>,
    in_shape: (usize, usize, usize),
    d_w: &mut Array4<T>,
    d_b: &mut Array1<T>,
) -> Array3<T> {
    let (c_out, t_out, f) = cache.out.dim();
    // ReLU gate, then flatten to the GEMM layout
    let mut d_mat = Array2::<T>::zeros((c_out, t_out * f));
    for co in 0..c_out {
        for to in 0..t_out {
            for fo in 0..f {
                if cache.out[[co, to, fo]] > T::zero() {
                    d_mat[[co, to * f + fo]] = d_out[[co, to, fo]];
                }
            }
        }
    }
    for co in 0..c_out {
        let mut s = T::zero();
        for n in 0..t_out * f {
            s += d_mat[[co, n]];
        }
        d_b[co] += s;
    }
    let d_w2 = d_mat.dot(&cache.cols.t());
    let (_, c_in, _, _) = conv.w.dim();
    for co in 0..c_out {
        for ci in 0..c_in {
            for dt in 0..3 {
                for df in 0..3 {
                    d_w[[co, ci, dt, df]] += d_w2[[co, ci * 9 + dt * 3 + df]];
                }
            }
        }
    }
    // scatter column gradients back to the input (reverse of im2col)
    let w2 = weights_as_matrix(conv);
    let d_cols = w2.t().dot(&d_mat);
    let (ci_n, t_in, f_in) = in_shape;
    debug_assert_eq!(f_in, f);
    let mut dx = Array3::<T>::zeros(in_shape);
    for c in 0..ci_n {
        for dt in 0..3 {
            for df in 0..3 {
                let row = c * 9 + dt * 3 + df;
                for to in 0..t_out {
                    let ti = to + dt;
                    debug_assert!(ti < t_in);
                    for fo in 0..f {
                        let fi = fo as isize + df as isize - 1;
                        if fi >= 0 && (fi as usize) < f {
                            dx[[c, ti, fi as usize]] += d_cols[[row, to * f + fo]];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) struct PoolCache {
    /// winning offset (0 or 1) per output cell
    pub argmax: Array3<u8>,
    pub in_f: usize,
}

/// Max-pool along frequency with width 2, stride 2; an odd trailing bin
/// is dropped.
pub(crate) fn pool_freq2_forward<T: Scalar>(x: &Array3<T>) -> (Array3<T>, PoolCache) {
    let (c, t, f) = x.dim();
    let f_out = f / 2;
    let mut out = Array3::<T>::zeros((c, t, f_out));
    let mut argmax = Array3::<u8>::zeros((c, t, f_out));
    for ci in 0..c {
        for ti in 0..t {
            for fo in 0..f_out {
                let a = x[[ci, ti, 2 * fo]];
                let b = x[[ci, ti, 2 * fo + 1]];
                if b > a {
                    out[[ci, ti, fo]] = b;
                    argmax[[ci, ti, fo]] = 1;
                } else {
                    out[[ci, ti, fo]] = a;
                }
            }
        }
    }
    (out, PoolCache { argmax, in_f: f })
}

pub(crate) fn pool_freq2_backward<T: Scalar>(d_out: &Array3<T>, cache: &PoolCache) -> Array3<T> {
    let (c, t, f_out) = d_out.dim();
    let mut dx = Array3::<T>::zeros((c, t, cache.in_f));
    for ci in 0..c {
        for ti in 0..t {
            for fo in 0..f_out {
                let win = 2 * fo + cache.argmax[[ci, ti, fo]] as usize;
                dx[[ci, ti, win]] = d_out[[ci, ti, fo]];
            }
        }
    }
    dx
}

pub(crate) struct AcousticCache<T: Scalar> {
    in_shape: (usize, usize, usize),
    conv1: ConvCache<T>,
    conv2: ConvCache<T>,
    pool1: PoolCache,
    conv3: ConvCache<T>,
    pool2: PoolCache,
    /// flattened pooled features per output frame, after dropout
    flat: Array2<T>,
    dropout_mask: Option<Array2<T>>,
    /// post-ReLU FC output
    pub h_a: Array2<T>,
}

fn flatten_frames<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let (c, t, f) = x.dim();
    let mut flat = Array2::<T>::zeros((t, c * f));
    for ti in 0..t {
        for ci in 0..c {
            for fi in 0..f {
                flat[[ti, ci * f + fi]] = x[[ci, ti, fi]];
            }
        }
    }
    flat
}

fn unflatten_frames<T: Scalar>(flat: &Array2<T>, c: usize, f: usize) -> Array3<T> {
    let t = flat.nrows();
    let mut x = Array3::<T>::zeros((c, t, f));
    for ti in 0..t {
        for ci in 0..c {
            for fi in 0..f {
                x[[ci, ti, fi]] = flat[[ti, ci * f + fi]];
            }
        }
    }
    x
}

pub(crate) struct ConvStack<'a, T: Scalar> {
    pub convs: &'a [Conv2d<T>],
    pub fc: &'a Dense<T>,
}

/// Run the full acoustic stack on a `(1, t_in, F)` tensor whose time axis
/// is already extended by 3 frames per side; output has `t_in - 6` rows.
pub(crate) fn acoustic_forward_padded<T: Scalar>(
    stack: &ConvStack<T>,
    x: &Array3<T>,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> AcousticCache<T> {
    let in_shape = x.dim();
    let conv1 = conv_relu_forward(x, &stack.convs[0]);
    let conv2 = conv_relu_forward(&conv1.out, &stack.convs[1]);
    let (pooled1, pool1) = pool_freq2_forward(&conv2.out);
    let conv3 = conv_relu_forward(&pooled1, &stack.convs[2]);
    let (pooled2, pool2) = pool_freq2_forward(&conv3.out);
    let mut flat = flatten_frames(&pooled2);
    let dropout_mask = match dropout {
        Some((rng, rate)) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let scale = fr::<T>(1.0 / keep);
            let mask = Array2::from_shape_fn(flat.dim(), |_| {
                if rng.gen_bool(keep) {
                    scale
                } else {
                    T::zero()
                }
            });
            flat = &flat * &mask;
            Some(mask)
        }
        _ => None,
    };
    let mut h_a = flat.dot(&stack.fc.w.t());
    for mut row in h_a.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let pre = *v + stack.fc.b[j];
            *v = if pre > T::zero() { pre } else { T::zero() };
        }
    }
    AcousticCache {
        in_shape,
        conv1,
        conv2,
        pool1,
        conv3,
        pool2,
        flat,
        dropout_mask,
        h_a,
    }
}

pub(crate) struct AcousticGrads<'a, T: Scalar> {
    pub convs: &'a mut [Conv2d<T>],
    pub fc: &'a mut Dense<T>,
}

/// Backprop `d_h_a` through the acoustic stack, accumulating parameter
/// gradients. The gradient w.r.t. the (padded) input is not needed by any
/// caller and is dropped.
pub(crate) fn acoustic_backward_padded<T: Scalar>(
    stack: &ConvStack<T>,
    cache: &AcousticCache<T>,
    d_h_a: &Array2<T>,
    grads: &mut AcousticGrads<T>,
) {
    // FC + ReLU
    let mut d_pre = d_h_a.clone();
    for (mut row, out_row) in d_pre.rows_mut().into_iter().zip(cache.h_a.rows()) {
        for (v, &o) in row.iter_mut().zip(out_row.iter()) {
            if o <= T::zero() {
                *v = T::zero();
            }
        }
    }
    for j in 0..stack.fc.b.len() {
        let mut s = T::zero();
        for t in 0..d_pre.nrows() {
            s += d_pre[[t, j]];
        }
        grads.fc.b[j] += s;
    }
    let dw = d_pre.t().dot(&cache.flat);
    grads.fc.w += &dw;
    let mut d_flat = d_pre.dot(&stack.fc.w);
    if let Some(mask) = &cache.dropout_mask {
        d_flat = &d_flat * mask;
    }
    let (c3, _, f3) = cache.pool2.argmax.dim();
    let d_pooled2 = unflatten_frames(&d_flat, c3, f3);
    let d_conv3 = pool_freq2_backward(&d_pooled2, &cache.pool2);
    // conv3's input was pool1's output: same channels as conv2, time axis
    // two frames longer than conv3's output, half of conv2's bins
    let pooled1_dims = (
        cache.conv2.out.dim().0,
        cache.conv3.out.dim().1 + 2,
        cache.pool1.in_f / 2,
    );
    let d_pooled1 = conv_relu_backward(
        &stack.convs[2],
        &cache.conv3,
        &d_conv3,
        pooled1_dims,
        &mut grads.convs[2].w,
        &mut grads.convs[2].b,
    );
    let d_conv2 = pool_freq2_backward(&d_pooled1, &cache.pool1);
    let d_conv1 = conv_relu_backward(
        &stack.convs[1],
        &cache.conv2,
        &d_conv2,
        cache.conv1.out.dim(),
        &mut grads.convs[1].w,
        &mut grads.convs[1].b,
    );
    let _ = conv_relu_backward(
        &stack.convs[0],
        &cache.conv1,
        &d_conv1,
        cache.in_shape,
        &mut grads.convs[0].w,
        &mut grads.convs[0].b,
    );
}

/// Zero-pad a `T x F` feature block with three frames per side and shape
/// it as a one-channel image.
pub(crate) fn pad_time3<T: Scalar>(x: ndarray::ArrayView2<T>) -> Array3<T> {
    let (t, f) = x.dim();
    let mut padded = Array3::<T>::zeros((1, t + 6, f));
    for ti in 0..t {
        for fi in 0..f {
            padded[[0, ti + 3, fi]] = x[[ti, fi]];
        }
    }
    padded
}
