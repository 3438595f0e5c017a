//! Mixture-of-experts multi-label head: every class owns an E-way softmax
//! gate over sigmoid experts, all reading the flat video-level feature.
//! Includes the cross-entropy training loss (per-class binary by default,
//! categorical behind a config switch) and analytic gradients for both.

use serde::{Deserialize, Serialize};

use crate::error::{DcgnError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{sigmoid, softmax_in_place, ParamTensor, Tensor2};

/// Scores are clipped into [CLIP, 1-CLIP] before any logarithm.
pub const SCORE_CLIP: f64 = 1e-6;

/// Which cross-entropy form the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// -sum_c [y_c log p_c + (1-y_c) log(1-p_c)]
    Binary,
    /// -sum_{c in labels} log p_c
    Categorical,
}

/// Parameters of the per-class expert mixture. Gate and expert blocks for
/// class c occupy columns [c*E, (c+1)*E).
#[derive(Debug, Clone)]
pub struct MoEParams {
    pub num_classes: usize,
    pub num_experts: usize,
    pub w_gate: ParamTensor,
    pub b_gate: ParamTensor,
    pub w_expert: ParamTensor,
    pub b_expert: ParamTensor,
}

impl MoEParams {
    pub fn new(d_h: usize, num_classes: usize, num_experts: usize, rng: &mut SplitMix64) -> Self {
        assert!(num_experts >= 1, "need at least one expert");
        let width = num_classes * num_experts;
        MoEParams {
            num_classes,
            num_experts,
            w_gate: ParamTensor::new(Tensor2::glorot_uniform(d_h, width, rng)),
            b_gate: ParamTensor::new(Tensor2::zeros(1, width)),
            w_expert: ParamTensor::new(Tensor2::glorot_uniform(d_h, width, rng)),
            b_expert: ParamTensor::new(Tensor2::zeros(1, width)),
        }
    }

    pub fn d_h(&self) -> usize {
        self.w_gate.value.rows()
    }
}

/// Per-class scores in [0, 1]; multi-label, so they need not sum to 1.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub scores: Vec<f64>,
}

/// Softmax gate weights and expert scores kept for the backward pass,
/// both num_classes x num_experts.
#[derive(Debug, Clone)]
pub struct MoECache {
    pub gate_weights: Tensor2,
    pub expert_scores: Tensor2,
}

/// Parameter gradients, matching `MoEParams` field shapes.
#[derive(Debug, Clone)]
pub struct MoEGrads {
    pub w_gate: Tensor2,
    pub b_gate: Tensor2,
    pub w_expert: Tensor2,
    pub b_expert: Tensor2,
}

impl MoEGrads {
    pub fn zeros(params: &MoEParams) -> Self {
        let width = params.num_classes * params.num_experts;
        MoEGrads {
            w_gate: Tensor2::zeros(params.d_h(), width),
            b_gate: Tensor2::zeros(1, width),
            w_expert: Tensor2::zeros(params.d_h(), width),
            b_expert: Tensor2::zeros(1, width),
        }
    }

    pub fn add(&mut self, other: &MoEGrads) {
        self.w_gate.add_scaled(&other.w_gate, 1.0);
        self.b_gate.add_scaled(&other.b_gate, 1.0);
        self.w_expert.add_scaled(&other.w_expert, 1.0);
        self.b_expert.add_scaled(&other.b_expert, 1.0);
    }
}

/// Classify one flat feature row: per class, softmax-gate the sigmoid
/// expert scores and mix.
pub fn moe_forward(h: &Tensor2, params: &MoEParams) -> Result<Prediction> {
    moe_forward_cached(h, params).map(|(pred, _)| pred)
}

pub fn moe_forward_cached(h: &Tensor2, params: &MoEParams) -> Result<(Prediction, MoECache)> {
    if h.rows() != 1 || h.cols() != params.d_h() {
        return Err(DcgnError::ShapeMismatch {
            op: "moe_forward",
            left_rows: h.rows(),
            left_cols: h.cols(),
            right_rows: params.d_h(),
            right_cols: params.num_classes * params.num_experts,
        });
    }
    let c = params.num_classes;
    let e = params.num_experts;
    let mut gate_weights = Tensor2::zeros(c, e);
    let mut expert_scores = Tensor2::zeros(c, e);
    let mut scores = Vec::with_capacity(c);
    let hv = h.row(0);
    for class in 0..c {
        let mut gate_logits = vec![0.0; e];
        for (expert, logit) in gate_logits.iter_mut().enumerate() {
            let col = class * e + expert;
            let mut acc = params.b_gate.value.get(0, col);
            for (d, x) in hv.iter().enumerate() {
                acc += x * params.w_gate.value.get(d, col);
            }
            *logit = acc;
        }
        softmax_in_place(&mut gate_logits);

        let mut p = 0.0;
        for expert in 0..e {
            let col = class * e + expert;
            let mut logit = params.b_expert.value.get(0, col);
            for (d, x) in hv.iter().enumerate() {
                logit += x * params.w_expert.value.get(d, col);
            }
            let s = sigmoid(logit);
            expert_scores.set(class, expert, s);
            gate_weights.set(class, expert, gate_logits[expert]);
            p += gate_logits[expert] * s;
        }
        scores.push(p);
    }
    Ok((Prediction { scores }, MoECache { gate_weights, expert_scores }))
}

/// Gradients of a scalar loss w.r.t. the input feature and all parameters,
/// given dL/dp_c per class.
pub fn moe_backward(
    h: &Tensor2,
    params: &MoEParams,
    cache: &MoECache,
    d_scores: &[f64],
) -> (Tensor2, MoEGrads) {
    let c = params.num_classes;
    let e = params.num_experts;
    assert_eq!(d_scores.len(), c);
    let hv = h.row(0);
    let mut grads = MoEGrads::zeros(params);
    let mut d_h = Tensor2::zeros(1, h.cols());
    for class in 0..c {
        let g = d_scores[class];
        if g == 0.0 {
            continue;
        }
        let alphas = cache.gate_weights.row(class);
        let scores = cache.expert_scores.row(class);
        let p: f64 = alphas.iter().zip(scores).map(|(a, s)| a * s).sum();
        for expert in 0..e {
            let col = class * e + expert;
            let s = scores[expert];
            // expert path: p depends on s via alpha_e; s = sigmoid(z)
            let dz = g * alphas[expert] * s * (1.0 - s);
            // gate path: softmax backward with upstream g * s_e
            let da = g * alphas[expert] * (s - p);
            grads.b_expert.set(0, col, dz);
            grads.b_gate.set(0, col, da);
            for (d, x) in hv.iter().enumerate() {
                grads.w_expert.set(d, col, x * dz);
                grads.w_gate.set(d, col, x * da);
                let acc = d_h.get(0, d)
                    + dz * params.w_expert.value.get(d, col)
                    + da * params.w_gate.value.get(d, col);
                d_h.set(0, d, acc);
            }
        }
    }
    (d_h, grads)
}

fn clip(p: f64) -> f64 {
    p.clamp(SCORE_CLIP, 1.0 - SCORE_CLIP)
}

/// Cross-entropy against a set of positive class indices.
pub fn multilabel_loss(pred: &Prediction, labels: &[usize], variant: LossVariant) -> f64 {
    let mut positive = vec![false; pred.scores.len()];
    for &l in labels {
        positive[l] = true;
    }
    match variant {
        LossVariant::Binary => pred
            .scores
            .iter()
            .zip(&positive)
            .map(|(&p, &y)| {
                let p = clip(p);
                if y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum(),
        LossVariant::Categorical => labels.iter().map(|&l| -clip(pred.scores[l]).ln()).sum(),
    }
}

/// dLoss/dp_c. Scores pushed past the clipping bounds sit on a flat part of
/// the clipped loss, so their gradient is zero.
pub fn multilabel_loss_grad(pred: &Prediction, labels: &[usize], variant: LossVariant) -> Vec<f64> {
    let mut positive = vec![false; pred.scores.len()];
    for &l in labels {
        positive[l] = true;
    }
    pred.scores
        .iter()
        .zip(&positive)
        .map(|(&p, &y)| {
            if !(SCORE_CLIP..=1.0 - SCORE_CLIP).contains(&p) {
                return 0.0;
            }
            match variant {
                LossVariant::Binary => {
                    if y {
                        -1.0 / p
                    } else {
                        1.0 / (1.0 - p)
                    }
                }
                LossVariant::Categorical => {
                    if y {
                        -1.0 / p
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect()
}
