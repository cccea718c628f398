//! Stock LSTM cell used by the recurrent trunk.
//!
//! Gate order inside the stacked weight matrices and bias is input,
//! forget, cell candidate, output. One bias vector per gate block (no
//! separate input/hidden biases). Both the cached training step and the
//! plain inference step route through the same gate computation, so an
//! incremental forward pass reproduces the batched one bit for bit.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T: Scalar> {
    /// 4H x In
    pub w_input: Array2<T>,
    /// 4H x H
    pub w_hidden: Array2<T>,
    /// 4H, ordered i, f, g, o
    pub bias: Array1<T>,
}

impl<T: Scalar> LstmLayer<T> {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        LstmLayer {
            w_input: Array2::zeros((4 * hidden, input)),
            w_hidden: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.ncols()
    }

    pub fn input_size(&self) -> usize {
        self.w_input.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.w_input.len() + self.w_hidden.len() + self.bias.len()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) struct Gates<T: Scalar> {
    pub i: Array1<T>,
    pub f: Array1<T>,
    pub g: Array1<T>,
    pub o: Array1<T>,
}

fn gate_activations<T: Scalar>(
    layer: &LstmLayer<T>,
    x: &Array1<T>,
    h_prev: &Array1<T>,
) -> Gates<T> {
    let h = layer.hidden_size();
    let mut pre = layer.w_input.dot(x);
    pre += &layer.w_hidden.dot(h_prev);
    pre += &layer.bias;
    let mut i = Array1::zeros(h);
    let mut f = Array1::zeros(h);
    let mut g = Array1::zeros(h);
    let mut o = Array1::zeros(h);
    for j in 0..h {
        i[j] = sigmoid(pre[j]);
        f[j] = sigmoid(pre[h + j]);
        g[j] = pre[2 * h + j].tanh();
        o[j] = sigmoid(pre[3 * h + j]);
    }
    Gates { i, f, g, o }
}

fn cell_update<T: Scalar>(
    gates: &Gates<T>,
    c_prev: &Array1<T>,
) -> (Array1<T>, Array1<T>) {
    let h_dim = c_prev.len();
    let mut c = Array1::zeros(h_dim);
    let mut h = Array1::zeros(h_dim);
    for j in 0..h_dim {
        c[j] = gates.f[j] * c_prev[j] + gates.i[j] * gates.g[j];
        h[j] = gates.o[j] * c[j].tanh();
    }
    (c, h)
}

/// One step without bookkeeping, for inference. Returns `(h, c)`.
pub(crate) fn step<T: Scalar>(
    layer: &LstmLayer<T>,
    x: &Array1<T>,
    h_prev: &Array1<T>,
    c_prev: &Array1<T>,
) -> (Array1<T>, Array1<T>) {
    let gates = gate_activations(layer, x, h_prev);
    let (c, h) = cell_update(&gates, c_prev);
    (h, c)
}

pub(crate) struct StepCache<T: Scalar> {
    pub x: Array1<T>,
    pub h_prev: Array1<T>,
    pub c_prev: Array1<T>,
    pub gates: Gates<T>,
    pub c: Array1<T>,
    pub h: Array1<T>,
}

/// One step retaining everything the backward pass needs.
pub(crate) fn step_cached<T: Scalar>(
    layer: &LstmLayer<T>,
    x: Array1<T>,
    h_prev: Array1<T>,
    c_prev: Array1<T>,
) -> StepCache<T> {
    let gates = gate_activations(layer, &x, &h_prev);
    let (c, h) = cell_update(&gates, &c_prev);
    StepCache {
        x,
        h_prev,
        c_prev,
        gates,
        c,
        h,
    }
}

/// Backprop one step. `d_h` is the loss gradient w.r.t. this step's
/// hidden output (from the layer above plus the next step), `d_c_next`
/// the gradient flowing back through the next step's cell state.
/// Returns gradients w.r.t. the input, previous hidden, and previous
/// cell; parameter gradients accumulate into `grads`.
pub(crate) fn step_backward<T: Scalar>(
    layer: &LstmLayer<T>,
    cache: &StepCache<T>,
    d_h: &Array1<T>,
    d_c_next: &Array1<T>,
    grads: &mut LstmLayer<T>,
) -> (Array1<T>, Array1<T>, Array1<T>) {
    let h_dim = layer.hidden_size();
    let g = &cache.gates;
    let mut d_pre = Array1::<T>::zeros(4 * h_dim);
    let mut d_c_prev = Array1::<T>::zeros(h_dim);
    for j in 0..h_dim {
        let tc = cache.c[j].tanh();
        let d_o = d_h[j] * tc;
        let d_c = d_c_next[j] + d_h[j] * g.o[j] * (T::one() - tc * tc);
        let d_i = d_c * g.g[j];
        let d_f = d_c * cache.c_prev[j];
        let d_g = d_c * g.i[j];
        d_c_prev[j] = d_c * g.f[j];
        d_pre[j] = d_i * g.i[j] * (T::one() - g.i[j]);
        d_pre[h_dim + j] = d_f * g.f[j] * (T::one() - g.f[j]);
        d_pre[2 * h_dim + j] = d_g * (T::one() - g.g[j] * g.g[j]);
        d_pre[3 * h_dim + j] = d_o * g.o[j] * (T::one() - g.o[j]);
    }
    for j in 0..4 * h_dim {
        let dj = d_pre[j];
        if dj == T::zero() {
            continue;
        }
        for k in 0..cache.x.len() {
            grads.w_input[[j, k]] += dj * cache.x[k];
        }
        for k in 0..h_dim {
            grads.w_hidden[[j, k]] += dj * cache.h_prev[k];
        }
        grads.bias[j] += dj;
    }
    let d_x = layer.w_input.t().dot(&d_pre);
    let d_h_prev = layer.w_hidden.t().dot(&d_pre);
    (d_x, d_h_prev, d_c_prev)
}
