//! Stacked LSTM with exact backpropagation through time.
//!
//! Each layer keeps its four gate blocks stacked row-wise in the order
//! input, forget, output, candidate:
//!
//! ```text
//! z_t = W_x x_t + W_h h_{t-1} + b          (4H)
//! i, f, o = sigmoid(z[0..H]), sigmoid(z[H..2H]), sigmoid(z[2H..3H])
//! g = tanh(z[3H..4H])
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! ```
//!
//! Layer 1 reads the input sequence; layer l > 1 reads the hidden outputs of
//! layer l-1 at the same step. Initial hidden and cell states are zero.

use std::ops::Range;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor_file::TensorFile;

/// Gate blocks in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

/// A model whose parameters are a fixed list of dense f64 tensors. Gradients
/// and optimizer moments use the same type, so they share the shape tree.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(&src) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn contiguous(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are standard layout")
}

fn contiguous_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are standard layout")
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// 4H × I
    pub w_input: Array2<f64>,
    /// 4H × H
    pub w_recurrent: Array2<f64>,
    /// 4H
    pub bias: Array1<f64>,
}

impl LstmLayer {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmLayer {
            w_input: Array2::zeros((4 * hidden_dim, input_dim)),
            w_recurrent: Array2::zeros((4 * hidden_dim, hidden_dim)),
            bias: Array1::zeros(4 * hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_recurrent.ncols()
    }

    pub fn gate_rows(&self, gate: Gate) -> Range<usize> {
        let h = self.hidden_dim();
        let g = gate as usize;
        g * h..(g + 1) * h
    }

    fn check_shapes(&self) -> bool {
        let h = self.hidden_dim();
        h > 0
            && self.input_dim() > 0
            && self.w_input.nrows() == 4 * h
            && self.w_recurrent.nrows() == 4 * h
            && self.bias.len() == 4 * h
    }

    fn forward(&self, x: ArrayView2<f64>) -> LayerCache {
        let t_len = x.nrows();
        let h = self.hidden_dim();
        let mut gates = x.dot(&self.w_input.t());
        gates += &self.bias;
        let mut hidden = Array2::<f64>::zeros((t_len + 1, h));
        let mut cells = Array2::<f64>::zeros((t_len + 1, h));
        let mut cell_tanh = Array2::<f64>::zeros((t_len, h));
        let w_rec = contiguous(&self.w_recurrent);
        {
            let gates_s = gates.as_slice_mut().expect("fresh array");
            let hidden_s = hidden.as_slice_mut().expect("fresh array");
            let cells_s = cells.as_slice_mut().expect("fresh array");
            let tanh_s = cell_tanh.as_slice_mut().expect("fresh array");
            for t in 0..t_len {
                let z = &mut gates_s[t * 4 * h..(t + 1) * 4 * h];
                let (h_done, h_rest) = hidden_s.split_at_mut((t + 1) * h);
                let h_prev = &h_done[t * h..];
                let h_next = &mut h_rest[..h];
                for (r, zr) in z.iter_mut().enumerate() {
                    *zr += dot(&w_rec[r * h..(r + 1) * h], h_prev);
                }
                let (c_done, c_rest) = cells_s.split_at_mut((t + 1) * h);
                let c_prev = &c_done[t * h..];
                let c_next = &mut c_rest[..h];
                let tc = &mut tanh_s[t * h..(t + 1) * h];
                for j in 0..h {
                    let i = sigmoid(z[j]);
                    let f = sigmoid(z[h + j]);
                    let o = sigmoid(z[2 * h + j]);
                    let g = z[3 * h + j].tanh();
                    z[j] = i;
                    z[h + j] = f;
                    z[2 * h + j] = o;
                    z[3 * h + j] = g;
                    let c = f * c_prev[j] + i * g;
                    c_next[j] = c;
                    tc[j] = c.tanh();
                    h_next[j] = o * tc[j];
                }
            }
        }
        LayerCache {
            input: x.to_owned(),
            gates,
            hidden,
            cells,
            cell_tanh,
        }
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to this layer's inputs.
    fn backward(&self, cache: &LayerCache, d_out: ArrayView2<f64>, grad: &mut LstmLayer) -> Array2<f64> {
        let t_len = cache.gates.nrows();
        let h = self.hidden_dim();
        let mut dz = Array2::<f64>::zeros((t_len, 4 * h));
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dh = vec![0.0; h];
        let w_rec = contiguous(&self.w_recurrent);
        let gates = cache.gates.as_slice().expect("standard layout");
        let cells = cache.cells.as_slice().expect("standard layout");
        let tanh_c = cache.cell_tanh.as_slice().expect("standard layout");
        {
            let dz_s = dz.as_slice_mut().expect("fresh array");
            for t in (0..t_len).rev() {
                let d_row = d_out.row(t);
                for j in 0..h {
                    dh[j] = d_row[j] + dh_next[j];
                }
                let gt = &gates[t * 4 * h..(t + 1) * 4 * h];
                let dzt = &mut dz_s[t * 4 * h..(t + 1) * 4 * h];
                let c_prev = &cells[t * h..(t + 1) * h];
                let tc = &tanh_c[t * h..(t + 1) * h];
                for j in 0..h {
                    let (i, f, o, g) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                    let d_o = dh[j] * tc[j];
                    let dc = dh[j] * o * (1.0 - tc[j] * tc[j]) + dc_next[j];
                    dzt[j] = dc * g * i * (1.0 - i);
                    dzt[h + j] = dc * c_prev[j] * f * (1.0 - f);
                    dzt[2 * h + j] = d_o * o * (1.0 - o);
                    dzt[3 * h + j] = dc * i * (1.0 - g * g);
                    dc_next[j] = dc * f;
                }
                dh_next.fill(0.0);
                for (r, &d) in dzt.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, &w_rec[r * h..(r + 1) * h], &mut dh_next);
                    }
                }
            }
        }
        general_mat_mul(1.0, &dz.t(), &cache.input, 1.0, &mut grad.w_input);
        general_mat_mul(
            1.0,
            &dz.t(),
            &cache.hidden.slice(s![..t_len, ..]),
            1.0,
            &mut grad.w_recurrent,
        );
        grad.bias += &dz.sum_axis(Axis(0));
        dz.dot(&self.w_input)
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    /// Post-activation gate values, T × 4H.
    gates: Array2<f64>,
    /// (T+1) × H, row 0 is the zero initial state.
    hidden: Array2<f64>,
    /// (T+1) × H, row 0 is the zero initial state.
    cells: Array2<f64>,
    cell_tanh: Array2<f64>,
}

/// Everything the backward pass needs from one forward run.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.layers[0].gates.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Hidden outputs h_1..h_T of layer `l` (0-based), T × H.
    pub fn hidden(&self, layer: usize) -> ArrayView2<'_, f64> {
        self.layers[layer].hidden.slice(s![1.., ..])
    }

    pub fn top_hidden(&self) -> ArrayView2<'_, f64> {
        self.hidden(self.layers.len() - 1)
    }

    /// h_T of the top layer.
    pub fn last_output(&self) -> ArrayView1<'_, f64> {
        let top = &self.layers[self.layers.len() - 1].hidden;
        top.row(top.nrows() - 1)
    }

    /// Post-activation values of `gate` in layer `l`, T × H.
    pub fn gate(&self, layer: usize, gate: Gate) -> ArrayView2<'_, f64> {
        let h = self.layers[layer].hidden.ncols();
        let g = gate as usize;
        self.layers[layer].gates.slice(s![.., g * h..(g + 1) * h])
    }

    pub fn final_state(&self) -> LstmState {
        let last = |a: &Array2<f64>| a.row(a.nrows() - 1).to_owned();
        LstmState {
            h: self.layers.iter().map(|l| last(&l.hidden)).collect(),
            c: self.layers.iter().map(|l| last(&l.cells)).collect(),
        }
    }
}

/// Per-layer hidden and cell vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Array1<f64>>,
    pub c: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedLstm {
    pub layers: Vec<LstmLayer>,
}

impl StackedLstm {
    pub fn new(layers: Vec<LstmLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("stacked LSTM needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if !layer.check_shapes() {
                return Err(Error::Invalid(format!("layer {l} has inconsistent gate shapes")));
            }
            if l > 0 && layer.input_dim() != layers[l - 1].hidden_dim() {
                return Err(Error::dim(
                    format!("layer {l} input"),
                    layers[l - 1].hidden_dim(),
                    layer.input_dim(),
                ));
            }
        }
        Ok(StackedLstm { layers })
    }

    pub fn zeros(input_dim: usize, hidden_dims: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden_dims.len());
        let mut prev = input_dim;
        for &h in hidden_dims {
            layers.push(LstmLayer::zeros(prev, h));
            prev = h;
        }
        Self::new(layers)
    }

    /// Weights uniform in [-1/sqrt(H), 1/sqrt(H)], forget-gate bias 1, other
    /// biases 0.
    pub fn init(input_dim: usize, hidden_dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(input_dim, hidden_dims)?;
        for layer in &mut net.layers {
            let r = 1.0 / (layer.hidden_dim() as f64).sqrt();
            layer.w_input.mapv_inplace(|_| rng.random_range(-r..=r));
            layer.w_recurrent.mapv_inplace(|_| rng.random_range(-r..=r));
            let forget = layer.gate_rows(Gate::Forget);
            layer.bias.slice_mut(s![forget]).fill(1.0);
        }
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].hidden_dim()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers.iter().map(LstmLayer::hidden_dim).collect()
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        if inputs.nrows() == 0 {
            return Err(Error::Invalid("LSTM input sequence is empty".into()));
        }
        if inputs.ncols() != self.input_dim() {
            return Err(Error::dim("LSTM input", self.input_dim(), inputs.ncols()));
        }
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.depth());
        for (l, layer) in self.layers.iter().enumerate() {
            let cache = if l == 0 {
                layer.forward(inputs)
            } else {
                let below = &caches[l - 1].hidden;
                layer.forward(below.slice(s![1.., ..]))
            };
            caches.push(cache);
        }
        Ok(ForwardCache { layers: caches })
    }

    /// Backpropagates an upstream gradient on the top layer's hidden outputs
    /// (T × H). Parameter gradients are added into `grads`; the gradient
    /// with respect to the input sequence is returned.
    pub fn backward(&self, cache: &ForwardCache, d_top: ArrayView2<f64>, grads: &mut StackedLstm) -> Result<Array2<f64>> {
        let mut upstream: Vec<Option<ArrayView2<f64>>> = vec![None; self.depth()];
        upstream[self.depth() - 1] = Some(d_top);
        self.backward_layers(cache, &upstream, grads)
    }

    /// Like [`backward`](Self::backward) but with an optional upstream
    /// gradient on every layer's hidden outputs.
    pub fn backward_layers(
        &self,
        cache: &ForwardCache,
        upstream: &[Option<ArrayView2<f64>>],
        grads: &mut StackedLstm,
    ) -> Result<Array2<f64>> {
        if cache.depth() != self.depth() || upstream.len() != self.depth() {
            return Err(Error::dim("backward layer count", self.depth(), cache.depth().min(upstream.len())));
        }
        if grads.hidden_dims() != self.hidden_dims() || grads.input_dim() != self.input_dim() {
            return Err(Error::Invalid("gradient buffer does not match network shape".into()));
        }
        let t_len = cache.len();
        for (l, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate() {
            if lc.gates.ncols() != 4 * layer.hidden_dim() || lc.input.ncols() != layer.input_dim() {
                return Err(Error::Invalid(format!("forward cache does not match layer {l}")));
            }
            if let Some(u) = upstream[l] {
                if u.dim() != (t_len, layer.hidden_dim()) {
                    return Err(Error::dim(format!("upstream gradient rows for layer {l}"), t_len, u.nrows()));
                }
            }
        }
        let mut carried: Option<Array2<f64>> = None;
        for l in (0..self.depth()).rev() {
            let d_out = match (carried.take(), upstream[l]) {
                (Some(mut c), Some(u)) => {
                    c += &u;
                    c
                }
                (Some(c), None) => c,
                (None, Some(u)) => u.to_owned(),
                (None, None) => Array2::zeros((t_len, self.layers[l].hidden_dim())),
            };
            carried = Some(self.layers[l].backward(&cache.layers[l], d_out.view(), &mut grads.layers[l]));
        }
        Ok(carried.expect("depth >= 1"))
    }

    pub fn write_tensors(&self, file: &mut TensorFile, prefix: &str) {
        for (l, layer) in self.layers.iter().enumerate() {
            file.push_matrix(format!("{prefix}layer{l}.w_input"), &layer.w_input);
            file.push_matrix(format!("{prefix}layer{l}.w_recurrent"), &layer.w_recurrent);
            file.push_vector(format!("{prefix}layer{l}.bias"), &layer.bias);
        }
    }

    pub fn read_tensors(file: &TensorFile, prefix: &str, path: &Path) -> Result<Self> {
        let mut layers = Vec::new();
        loop {
            let l = layers.len();
            let name = format!("{prefix}layer{l}.w_input");
            if !file.tensors.iter().any(|(n, _)| *n == name) {
                break;
            }
            layers.push(LstmLayer {
                w_input: file.matrix(&name, path)?,
                w_recurrent: file.matrix(&format!("{prefix}layer{l}.w_recurrent"), path)?,
                bias: file.vector(&format!("{prefix}layer{l}.bias"), path)?,
            });
        }
        Self::new(layers).map_err(|e| Error::format(path, e.to_string()))
    }
}

impl Parameters for StackedLstm {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(3 * self.depth());
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.w_input"), contiguous(&layer.w_input)));
            out.push((format!("layer{l}.w_recurrent"), contiguous(&layer.w_recurrent)));
            out.push((format!("layer{l}.bias"), layer.bias.as_slice().expect("contiguous")));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.depth());
        for layer in &mut self.layers {
            out.push(contiguous_mut(&mut layer.w_input));
            out.push(contiguous_mut(&mut layer.w_recurrent));
            out.push(layer.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

/// Mutation hook for verifying the gradient checker: scales the forget-gate
/// rows of one layer's gradient.
pub fn scale_forget_gate_grad(grads: &mut StackedLstm, layer: usize, factor: f64) {
    let l = &mut grads.layers[layer];
    let rows = l.gate_rows(Gate::Forget);
    l.w_input.slice_mut(s![rows.clone(), ..]).mapv_inplace(|v| v * factor);
    l.w_recurrent.slice_mut(s![rows.clone(), ..]).mapv_inplace(|v| v * factor);
    l.bias.slice_mut(s![rows]).mapv_inplace(|v| v * factor);
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let ok = |v: f64| v.is_finite();
        if !(ok(self.lr) && self.lr > 0.0) {
            return Err(Error::config(format!("{section}.lr"), "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(format!("{section}.beta1"), "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!("{section}.beta2"), "must be in [0, 1)"));
        }
        if !(ok(self.eps) && self.eps > 0.0) {
            return Err(Error::config(format!("{section}.eps"), "must be finite and > 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(format!("{section}.clip_norm"), "must be > 0"));
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `clip_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients<P: Parameters>(grads: &mut P, clip_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > clip_norm && norm.is_finite() {
        grads.scale(clip_norm / norm);
    }
    norm
}

/// Adam with bias correction; gradients are norm-clipped before each step.
#[derive(Debug, Clone)]
pub struct Adam<P> {
    pub config: AdamConfig,
    m: P,
    v: P,
    steps: i32,
}

impl<P: Parameters> Adam<P> {
    pub fn new(params: &P, config: AdamConfig) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Clips `grads` in place, then updates `params`. Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut P, grads: &mut P) -> Result<f64> {
        let norm = clip_gradients(grads, self.config.clip_norm);
        if !grads.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at optimizer step {} (norm {norm})",
                self.steps + 1
            )));
        }
        self.steps += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps);
        let bc2 = 1.0 - beta2.powi(self.steps);
        let g_all = grads.tensors();
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g_all)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

/// Coordinates where analytic and numeric gradients disagree most.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub pass: bool,
    pub worst: Vec<GradMismatch>,
}

/// Magnitudes below this are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the analytic gradient returned by `objective` with central
/// differences `(L(p + eps) - L(p - eps)) / 2eps` for every parameter.
pub fn grad_check<P, F>(params: &P, objective: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    P: Parameters,
    F: Fn(&P) -> Result<(f64, P)>,
{
    let (_, analytic) = objective(params)?;
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();
    let mut probe = params.clone();
    let mut worst: Vec<GradMismatch> = Vec::new();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let original = probe.tensors_mut()[ti][k];
            probe.tensors_mut()[ti][k] = original + eps;
            let (plus, _) = objective(&probe)?;
            probe.tensors_mut()[ti][k] = original - eps;
            let (minus, _) = objective(&probe)?;
            probe.tensors_mut()[ti][k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = relative_error(grad[k], numeric);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max((grad[k] - numeric).abs());
            checked += 1;
            worst.push(GradMismatch {
                tensor: name.clone(),
                index: k,
                analytic: grad[k],
                numeric,
                rel_err: rel,
            });
            if worst.len() > 16 {
                worst.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
                worst.truncate(5);
            }
        }
    }
    worst.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    worst.truncate(5);
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked,
        pass: max_rel.is_finite() && max_rel <= tol,
        worst,
    })
}
