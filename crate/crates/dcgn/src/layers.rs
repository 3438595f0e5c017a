//! A single graph-network layer — windowed pooling (average or learned
//! self-attention), node convolution over flattened windows, and degree-
//! normalized feature propagation — plus the L-layer stack that reduces a
//! frame sequence to one flat video-level vector.
//!
//! Every forward op has a `_cached` twin whose cache feeds a pure backward
//! function; backwards return gradients by value so callers decide how to
//! accumulate them (the trainer sums per-example grads in example order to
//! keep runs bit-reproducible).

use serde::{Deserialize, Serialize};

use crate::error::{DcgnError, Result};
use crate::graph::{
    affinity_backward, build_affinity_cached, normalize, normalize_backward, zero_diagonal,
    AffinityCache, AffinityMatrix, GraphNorm,
};
use crate::rng::SplitMix64;
use crate::tensor::{matmul, Activation, ParamTensor, Tensor2};

/// Pooling variant used to shrink the node sequence between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Average,
    Attention,
}

/// How the per-layer adjacency is built and normalized.
#[derive(Debug, Clone, Copy)]
pub struct GraphSettings {
    /// Clamp negative cosines to zero (keeps degrees positive).
    pub clamp_negative: bool,
    pub norm: GraphNorm,
}

impl Default for GraphSettings {
    fn default() -> Self {
        GraphSettings { clamp_negative: true, norm: GraphNorm::Symmetric }
    }
}

/// Learnable parameters of one layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// Pooling kernel size: k consecutive nodes per window.
    pub k: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Convolution weights over a flattened k-row window, (k*d_in) x d_out.
    pub w_conv: ParamTensor,
    /// Attention projection, d_in x 1 (unused under average pooling).
    pub w_att: ParamTensor,
    /// Attention bias, 1 x 1.
    pub b_att: ParamTensor,
    /// Propagation weights, d_out x d_out.
    pub w_prop: ParamTensor,
}

impl LayerParams {
    pub fn new(k: usize, d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Self {
        assert!(k >= 1, "pooling kernel must be at least 1");
        LayerParams {
            k,
            d_in,
            d_out,
            w_conv: ParamTensor::new(Tensor2::glorot_uniform(k * d_in, d_out, rng)),
            w_att: ParamTensor::new(Tensor2::glorot_uniform(d_in, 1, rng)),
            b_att: ParamTensor::new(Tensor2::zeros(1, 1)),
            w_prop: ParamTensor::new(Tensor2::glorot_uniform(d_out, d_out, rng)),
        }
    }
}

/// Everything a layer produces; `hidden` feeds the next layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub pooled: Tensor2,
    pub convolved: Tensor2,
    pub hidden: Tensor2,
}

/// Gradients for one layer's parameters, in `LayerParams` field order.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w_conv: Tensor2,
    pub w_att: Tensor2,
    pub b_att: Tensor2,
    pub w_prop: Tensor2,
}

impl LayerGrads {
    pub fn zeros(params: &LayerParams) -> Self {
        LayerGrads {
            w_conv: Tensor2::zeros(params.w_conv.value.rows(), params.w_conv.value.cols()),
            w_att: Tensor2::zeros(params.w_att.value.rows(), params.w_att.value.cols()),
            b_att: Tensor2::zeros(1, 1),
            w_prop: Tensor2::zeros(params.w_prop.value.rows(), params.w_prop.value.cols()),
        }
    }

    pub fn add(&mut self, other: &LayerGrads) {
        self.w_conv.add_scaled(&other.w_conv, 1.0);
        self.w_att.add_scaled(&other.w_att, 1.0);
        self.b_att.add_scaled(&other.b_att, 1.0);
        self.w_prop.add_scaled(&other.w_prop, 1.0);
    }
}

/// Number of windows covering `n` rows with kernel `k`.
pub fn window_count(n: usize, k: usize) -> usize {
    n.div_ceil(k)
}

fn window_bounds(i: usize, n: usize, k: usize) -> (usize, usize) {
    (i * k, ((i + 1) * k).min(n))
}

/// Mean of each window of `k` consecutive rows; a short final window is
/// averaged over its true length.
pub fn average_pool(h: &Tensor2, k: usize) -> Tensor2 {
    let n = h.rows();
    let m = window_count(n, k);
    let mut out = Tensor2::zeros(m, h.cols());
    for i in 0..m {
        let (lo, hi) = window_bounds(i, n, k);
        let len = (hi - lo) as f64;
        for t in lo..hi {
            for (o, x) in out.row_mut(i).iter_mut().zip(h.row(t)) {
                *o += x / len;
            }
        }
    }
    out
}

/// Scatter pooled-row gradients back to input rows (each input row received
/// weight 1/window_len in the forward mean).
pub fn average_pool_backward(d_pooled: &Tensor2, n: usize, k: usize) -> Tensor2 {
    let mut d_h = Tensor2::zeros(n, d_pooled.cols());
    for i in 0..d_pooled.rows() {
        let (lo, hi) = window_bounds(i, n, k);
        let len = (hi - lo) as f64;
        for t in lo..hi {
            for (o, g) in d_h.row_mut(t).iter_mut().zip(d_pooled.row(i)) {
                *o += g / len;
            }
        }
    }
    d_h
}

/// Per-window softmax weights from the attention forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub alphas: Vec<Vec<f64>>,
}

/// Per-window self-attention: scores = slice * w_att + b_att, weights =
/// softmax(scores), output row = weighted sum of the window's rows. With
/// zero parameters the weights are uniform and this is exactly
/// `average_pool`.
pub fn attention_pool(h: &Tensor2, k: usize, w_att: &Tensor2, b_att: f64) -> Tensor2 {
    attention_pool_cached(h, k, w_att, b_att).0
}

pub fn attention_pool_cached(
    h: &Tensor2,
    k: usize,
    w_att: &Tensor2,
    b_att: f64,
) -> (Tensor2, AttentionCache) {
    assert_eq!(w_att.rows(), h.cols(), "attention weights must match feature width");
    assert_eq!(w_att.cols(), 1);
    let n = h.rows();
    let m = window_count(n, k);
    let mut out = Tensor2::zeros(m, h.cols());
    let mut alphas = Vec::with_capacity(m);
    for i in 0..m {
        let (lo, hi) = window_bounds(i, n, k);
        let mut scores: Vec<f64> = (lo..hi)
            .map(|t| {
                h.row(t)
                    .iter()
                    .zip(w_att.data())
                    .map(|(x, w)| x * w)
                    .sum::<f64>()
                    + b_att
            })
            .collect();
        crate::tensor::softmax_in_place(&mut scores);
        for (t, alpha) in (lo..hi).zip(&scores) {
            for (o, x) in out.row_mut(i).iter_mut().zip(h.row(t)) {
                *o += alpha * x;
            }
        }
        alphas.push(scores);
    }
    (out, AttentionCache { alphas })
}

/// Gradients for the attention pool: returns (d_h, d_w_att, d_b_att).
///
/// Per window with rows X, weights a, upstream row g: the softmax-input
/// gradient is dz_t = a_t * (<g, X_t> - sum_s a_s <g, X_s>); rows get
/// a_t * g plus dz_t * w_att^T, and the parameters accumulate X^T dz and
/// sum(dz).
pub fn attention_pool_backward(
    h: &Tensor2,
    k: usize,
    w_att: &Tensor2,
    cache: &AttentionCache,
    d_pooled: &Tensor2,
) -> (Tensor2, Tensor2, f64) {
    let n = h.rows();
    let d = h.cols();
    let mut d_h = Tensor2::zeros(n, d);
    let mut d_w = Tensor2::zeros(d, 1);
    let mut d_b = 0.0;
    for i in 0..d_pooled.rows() {
        let (lo, hi) = window_bounds(i, n, k);
        let alphas = &cache.alphas[i];
        let g = d_pooled.row(i);
        let u: Vec<f64> = (lo..hi)
            .map(|t| g.iter().zip(h.row(t)).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mean_u: f64 = alphas.iter().zip(&u).map(|(a, v)| a * v).sum();
        for (w, t) in (lo..hi).enumerate() {
            let dz = alphas[w] * (u[w] - mean_u);
            for (col, (dh, gv)) in d_h.row_mut(t).iter_mut().zip(g).enumerate() {
                *dh += alphas[w] * gv + dz * w_att.get(col, 0);
            }
            for (col, x) in h.row(t).iter().enumerate() {
                d_w.set(col, 0, d_w.get(col, 0) + dz * x);
            }
            d_b += dz;
        }
    }
    (d_h, d_w, d_b)
}

/// Flatten each k-row window (short tail zero-padded) and multiply by
/// `w_conv`, giving one output row per window.
pub fn node_convolve(h: &Tensor2, k: usize, w_conv: &Tensor2) -> Result<Tensor2> {
    if w_conv.rows() != k * h.cols() {
        return Err(DcgnError::ShapeMismatch {
            op: "node_convolve",
            left_rows: h.rows(),
            left_cols: k * h.cols(),
            right_rows: w_conv.rows(),
            right_cols: w_conv.cols(),
        });
    }
    let n = h.rows();
    let d = h.cols();
    let m = window_count(n, k);
    let d_out = w_conv.cols();
    let mut out = Tensor2::zeros(m, d_out);
    for i in 0..m {
        let (lo, hi) = window_bounds(i, n, k);
        for t in lo..hi {
            let base = (t - lo) * d;
            for (col, x) in h.row(t).iter().enumerate() {
                if *x == 0.0 {
                    continue;
                }
                let w_row = w_conv.row(base + col);
                for (o, w) in out.row_mut(i).iter_mut().zip(w_row) {
                    *o += x * w;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients for the window convolution: returns (d_h, d_w_conv). Rows that
/// were zero padding in the forward pass receive no gradient.
pub fn node_convolve_backward(
    h: &Tensor2,
    k: usize,
    w_conv: &Tensor2,
    d_convolved: &Tensor2,
) -> (Tensor2, Tensor2) {
    let n = h.rows();
    let d = h.cols();
    let mut d_h = Tensor2::zeros(n, d);
    let mut d_w = Tensor2::zeros(w_conv.rows(), w_conv.cols());
    for i in 0..d_convolved.rows() {
        let (lo, hi) = window_bounds(i, n, k);
        let g = d_convolved.row(i);
        for t in lo..hi {
            let base = (t - lo) * d;
            for col in 0..d {
                let flat = base + col;
                // d_w[flat][:] += x * g ; d_x = <g, w_conv[flat][:]>
                let x = h.get(t, col);
                let mut dx = 0.0;
                for (out_col, gv) in g.iter().enumerate() {
                    d_w.set(flat, out_col, d_w.get(flat, out_col) + x * gv);
                    dx += gv * w_conv.get(flat, out_col);
                }
                d_h.set(t, col, d_h.get(t, col) + dx);
            }
        }
    }
    (d_h, d_w)
}

/// Intermediates of `propagate` needed by its backward pass.
#[derive(Debug, Clone)]
pub struct PropagateCache {
    pub affinity: AffinityMatrix,
    pub affinity_cache: AffinityCache,
    pub normalized: Tensor2,
    /// normalized * convolved, before the weight multiply.
    pub mixed: Tensor2,
    pub hidden: Tensor2,
}

/// Message passing: adjacency is rebuilt from the pooled features, degree-
/// normalized, and applied to the convolved features before the linear map
/// and nonlinearity: activation(normalize(A(pooled)) * convolved * w_prop).
pub fn propagate(
    pooled: &Tensor2,
    convolved: &Tensor2,
    w_prop: &Tensor2,
    activation: Activation,
) -> Result<Tensor2> {
    propagate_cached(pooled, convolved, w_prop, activation, GraphSettings::default())
        .map(|cache| cache.hidden)
}

pub fn propagate_cached(
    pooled: &Tensor2,
    convolved: &Tensor2,
    w_prop: &Tensor2,
    activation: Activation,
    settings: GraphSettings,
) -> Result<PropagateCache> {
    let (affinity, affinity_cache) = build_affinity_cached(pooled, settings.clamp_negative);
    let normalized = normalize(&affinity, settings.norm);
    let mixed = matmul(&normalized, convolved)?;
    let pre = matmul(&mixed, w_prop)?;
    let hidden = pre.map(|x| activation.apply(x));
    Ok(PropagateCache { affinity, affinity_cache, normalized, mixed, hidden })
}

/// Gradients flowing out of `propagate`: (d_pooled, d_convolved, d_w_prop).
pub fn propagate_backward(
    pooled: &Tensor2,
    convolved: &Tensor2,
    w_prop: &Tensor2,
    cache: &PropagateCache,
    d_hidden: &Tensor2,
    activation: Activation,
    settings: GraphSettings,
) -> (Tensor2, Tensor2, Tensor2) {
    // Through the nonlinearity, using the stored outputs.
    let mut d_pre = d_hidden.clone();
    for (dp, y) in d_pre.data_mut().iter_mut().zip(cache.hidden.data()) {
        *dp *= activation.derivative_from_output(*y);
    }
    // pre = mixed * w_prop
    let d_w_prop = matmul(&cache.mixed.transpose(), &d_pre).expect("cached shapes agree");
    let d_mixed = matmul(&d_pre, &w_prop.transpose()).expect("cached shapes agree");
    // mixed = normalized * convolved
    let d_convolved =
        matmul(&cache.normalized.transpose(), &d_mixed).expect("cached shapes agree");
    let d_normalized = matmul(&d_mixed, &convolved.transpose()).expect("cached shapes agree");
    // Through degree normalization and the cosine graph back to the pooled
    // features. The unit diagonal is constant, so its gradient is dropped.
    let d_affinity =
        normalize_backward(&cache.affinity, &cache.normalized, &d_normalized, settings.norm);
    let d_affinity = zero_diagonal(d_affinity);
    let d_pooled = affinity_backward(
        pooled,
        &cache.affinity_cache,
        &d_affinity,
        settings.clamp_negative,
    );
    (d_pooled, d_convolved, d_w_prop)
}

/// Cached intermediates for one full layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub pooled: Tensor2,
    pub convolved: Tensor2,
    pub attention: Option<AttentionCache>,
    pub prop: PropagateCache,
}

impl LayerCache {
    pub fn output(&self) -> LayerOutput {
        LayerOutput {
            pooled: self.pooled.clone(),
            convolved: self.convolved.clone(),
            hidden: self.prop.hidden.clone(),
        }
    }
}

/// One layer: pool, convolve, propagate.
pub fn layer_forward(
    h_prev: &Tensor2,
    params: &LayerParams,
    pooling: Pooling,
    activation: Activation,
) -> Result<LayerOutput> {
    layer_forward_cached(h_prev, params, pooling, activation, GraphSettings::default())
        .map(|cache| cache.output())
}

pub fn layer_forward_cached(
    h_prev: &Tensor2,
    params: &LayerParams,
    pooling: Pooling,
    activation: Activation,
    settings: GraphSettings,
) -> Result<LayerCache> {
    if h_prev.cols() != params.d_in {
        return Err(DcgnError::ShapeMismatch {
            op: "layer_forward",
            left_rows: h_prev.rows(),
            left_cols: h_prev.cols(),
            right_rows: params.k * params.d_in,
            right_cols: params.d_out,
        });
    }
    let (pooled, attention) = match pooling {
        Pooling::Average => (average_pool(h_prev, params.k), None),
        Pooling::Attention => {
            let (pooled, cache) = attention_pool_cached(
                h_prev,
                params.k,
                &params.w_att.value,
                params.b_att.value.get(0, 0),
            );
            (pooled, Some(cache))
        }
    };
    let convolved = node_convolve(h_prev, params.k, &params.w_conv.value)?;
    let prop = propagate_cached(&pooled, &convolved, &params.w_prop.value, activation, settings)?;
    Ok(LayerCache { pooled, convolved, attention, prop })
}

/// Backward through one layer. Returns the gradient w.r.t. the layer input
/// alongside the parameter gradients.
pub fn layer_backward(
    h_prev: &Tensor2,
    params: &LayerParams,
    cache: &LayerCache,
    d_hidden: &Tensor2,
    activation: Activation,
    settings: GraphSettings,
) -> (Tensor2, LayerGrads) {
    let (d_pooled, d_convolved, d_w_prop) = propagate_backward(
        &cache.pooled,
        &cache.convolved,
        &params.w_prop.value,
        &cache.prop,
        d_hidden,
        activation,
        settings,
    );
    let (d_h_conv, d_w_conv) =
        node_convolve_backward(h_prev, params.k, &params.w_conv.value, &d_convolved);
    let mut grads = LayerGrads::zeros(params);
    grads.w_conv = d_w_conv;
    grads.w_prop = d_w_prop;
    let d_h_pool = match &cache.attention {
        None => average_pool_backward(&d_pooled, h_prev.rows(), params.k),
        Some(att) => {
            let (d_h, d_w_att, d_b_att) =
                attention_pool_backward(h_prev, params.k, &params.w_att.value, att, &d_pooled);
            grads.w_att = d_w_att;
            grads.b_att.set(0, 0, d_b_att);
            d_h
        }
    };
    let mut d_input = d_h_conv;
    d_input.add_scaled(&d_h_pool, 1.0);
    (d_input, grads)
}

/// Caches for a whole stack plus the flattened video-level feature.
#[derive(Debug, Clone)]
pub struct StackCache {
    pub layer_caches: Vec<LayerCache>,
    /// 1 x (final_nodes * d_out), final hidden rows laid end to end.
    pub flat: Tensor2,
}

/// Apply the layers in order and concatenate the last layer's hidden rows
/// into a single flat row vector.
pub fn stack_forward(
    h0: &Tensor2,
    layers: &[LayerParams],
    pooling: Pooling,
    activation: Activation,
) -> Result<Tensor2> {
    stack_forward_cached(h0, layers, pooling, activation, GraphSettings::default())
        .map(|cache| cache.flat)
}

pub fn stack_forward_cached(
    h0: &Tensor2,
    layers: &[LayerParams],
    pooling: Pooling,
    activation: Activation,
    settings: GraphSettings,
) -> Result<StackCache> {
    assert!(!layers.is_empty(), "stack needs at least one layer");
    let mut layer_caches = Vec::with_capacity(layers.len());
    let mut current = h0.clone();
    for params in layers {
        let cache = layer_forward_cached(&current, params, pooling, activation, settings)?;
        current = cache.prop.hidden.clone();
        layer_caches.push(cache);
    }
    let flat = current.flatten_rows();
    Ok(StackCache { layer_caches, flat })
}

/// Backward through the whole stack from the gradient of the flat video
/// feature. Returns the gradient w.r.t. `h0` and per-layer parameter grads
/// (same order as `layers`).
pub fn stack_backward(
    h0: &Tensor2,
    layers: &[LayerParams],
    cache: &StackCache,
    d_flat: &Tensor2,
    pooling: Pooling,
    activation: Activation,
    settings: GraphSettings,
) -> (Tensor2, Vec<LayerGrads>) {
    let _ = pooling; // variant is implied by each cache's attention field
    let last_hidden = &cache.layer_caches.last().expect("non-empty stack").prop.hidden;
    let mut d_hidden = d_flat
        .clone()
        .reshape(last_hidden.rows(), last_hidden.cols());
    let mut grads: Vec<LayerGrads> = Vec::with_capacity(layers.len());
    for idx in (0..layers.len()).rev() {
        let input = if idx == 0 { h0 } else { &cache.layer_caches[idx - 1].prop.hidden };
        let (d_input, layer_grads) = layer_backward(
            input,
            &layers[idx],
            &cache.layer_caches[idx],
            &d_hidden,
            activation,
            settings,
        );
        grads.push(layer_grads);
        d_hidden = d_input;
    }
    grads.reverse();
    (d_hidden, grads)
}
