//! The full classification model: shot-aware first layer, stacked graph
//! layers, and the mixture-of-experts head — plus the frame-averaging
//! baseline, behind one type so the trainer and the checkpoint code treat
//! both uniformly.

use serde::{Deserialize, Serialize};

use crate::classifier::{
    moe_backward, moe_forward_cached, LossVariant, MoECache, MoEGrads, MoEParams, Prediction,
};
use crate::error::{DcgnError, Result};
use crate::graph::GraphNorm;
use crate::layers::{
    stack_backward, stack_forward_cached, GraphSettings, LayerGrads, LayerParams, Pooling,
    StackCache,
};
use crate::rng::SplitMix64;
use crate::shots::{
    kts_fixed, segment_costs, shot_layer_backward, shot_layer_forward_cached, ShotBoundaries,
    ShotGrads, ShotLayerCache,
};
use crate::tensor::{Activation, ParamSet, ParamTensor, Tensor2};

/// Which architecture a run trains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dcgn,
    /// Mean of all frames, straight into the classifier head.
    AverageBaseline,
}

/// Everything needed to rebuild a model's shapes. `num_layers` counts all
/// graph layers including the shot layer, so `num_layers - 1` stacked
/// layers follow it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_layers: usize,
    pub k: usize,
    pub filter_size: usize,
    pub moe_mixtures: usize,
    pub shots_m: usize,
    /// Shot slices are padded/truncated to this many frames for convolution.
    pub shot_k_max: usize,
    pub pooling: Pooling,
    pub activation: Activation,
    pub affinity_clamp_negative: bool,
    pub graph_norm: GraphNorm,
    pub loss: LossVariant,
}

impl ModelArch {
    pub fn graph_settings(&self) -> GraphSettings {
        GraphSettings { clamp_negative: self.affinity_clamp_negative, norm: self.graph_norm }
    }

    /// Node count after the shot layer and all stacked layers.
    pub fn final_nodes(&self) -> usize {
        let mut m = self.shots_m;
        for _ in 1..self.num_layers {
            m = m.div_ceil(self.k);
        }
        m
    }

    /// Width of the flat video-level feature the classifier reads.
    pub fn classifier_input_dim(&self) -> usize {
        match self.kind {
            ModelKind::Dcgn => self.final_nodes() * self.filter_size,
            ModelKind::AverageBaseline => self.input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("num_layers", self.num_layers),
            ("k", self.k),
            ("filter_size", self.filter_size),
            ("moe_mixtures", self.moe_mixtures),
            ("shots_m", self.shots_m),
            ("shot_k_max", self.shot_k_max),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(DcgnError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Parameters of the graph part of the model (absent in the baseline).
#[derive(Debug, Clone)]
pub struct GraphParams {
    /// Shot convolution, (shot_k_max * input_dim) x filter_size.
    pub shot_w_conv: ParamTensor,
    /// Shot-level propagation, filter_size x filter_size.
    pub shot_w_prop: ParamTensor,
    pub layers: Vec<LayerParams>,
}

/// Model parameters plus the architecture snapshot they were built for.
#[derive(Debug, Clone)]
pub struct DcgnModel {
    pub arch: ModelArch,
    pub graph: Option<GraphParams>,
    pub moe: MoEParams,
}

impl DcgnModel {
    /// Deterministic initialization: weights are Glorot-uniform draws in a
    /// fixed traversal order (shot conv, shot prop, each layer, classifier),
    /// biases start at zero.
    pub fn new(arch: ModelArch, rng: &mut SplitMix64) -> Result<Self> {
        arch.validate()?;
        let graph = match arch.kind {
            ModelKind::AverageBaseline => None,
            ModelKind::Dcgn => {
                let shot_w_conv = ParamTensor::new(Tensor2::glorot_uniform(
                    arch.shot_k_max * arch.input_dim,
                    arch.filter_size,
                    rng,
                ));
                let shot_w_prop = ParamTensor::new(Tensor2::glorot_uniform(
                    arch.filter_size,
                    arch.filter_size,
                    rng,
                ));
                let layers = (1..arch.num_layers)
                    .map(|_| LayerParams::new(arch.k, arch.filter_size, arch.filter_size, rng))
                    .collect();
                Some(GraphParams { shot_w_conv, shot_w_prop, layers })
            }
        };
        let moe = MoEParams::new(
            arch.classifier_input_dim(),
            arch.num_classes,
            arch.moe_mixtures,
            rng,
        );
        Ok(DcgnModel { arch, graph, moe })
    }
}

/// Forward intermediates for one example.
#[derive(Debug, Clone)]
pub struct ModelCache {
    /// None for the baseline.
    pub shot: Option<ShotForward>,
    pub stack: Option<StackCache>,
    /// The classifier input (1 x d_h).
    pub flat: Tensor2,
    pub moe: MoECache,
    pub prediction: Prediction,
}

#[derive(Debug, Clone)]
pub struct ShotForward {
    pub boundaries: ShotBoundaries,
    pub cache: ShotLayerCache,
    /// Shots actually present; rows beyond this in `padded` are zeros.
    pub m_eff: usize,
    /// Shot-layer output padded with zero rows up to arch.shots_m.
    pub padded: Tensor2,
}

/// Per-example parameter gradients, mirroring the model structure.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub shot: Option<ShotGrads>,
    pub layers: Vec<LayerGrads>,
    pub moe: MoEGrads,
}

impl ModelGrads {
    pub fn zeros(model: &DcgnModel) -> Self {
        match &model.graph {
            None => ModelGrads { shot: None, layers: Vec::new(), moe: MoEGrads::zeros(&model.moe) },
            Some(graph) => ModelGrads {
                shot: Some(ShotGrads::zeros_like(
                    &graph.shot_w_conv.value,
                    &graph.shot_w_prop.value,
                )),
                layers: graph.layers.iter().map(LayerGrads::zeros).collect(),
                moe: MoEGrads::zeros(&model.moe),
            },
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        match (&mut self.shot, &other.shot) {
            (Some(a), Some(b)) => a.add(b),
            (None, None) => {}
            _ => panic!("gradient structure mismatch"),
        }
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add(b);
        }
        self.moe.add(&other.moe);
    }
}

/// Mean of all frame rows, straight into the classifier: the Table-style
/// frame-averaging baseline.
pub fn baseline_average_forward(frames: &Tensor2, moe: &MoEParams) -> Result<Prediction> {
    let mean = mean_row(frames);
    moe_forward_cached(&mean, moe).map(|(pred, _)| pred)
}

fn mean_row(frames: &Tensor2) -> Tensor2 {
    let n = frames.rows();
    let d = frames.cols();
    let mut mean = Tensor2::zeros(1, d);
    for t in 0..n {
        for (o, x) in mean.row_mut(0).iter_mut().zip(frames.row(t)) {
            *o += x / n as f64;
        }
    }
    mean
}

impl DcgnModel {
    /// Full forward pass over one example's frames.
    pub fn forward(&self, frames: &Tensor2) -> Result<(Prediction, ModelCache)> {
        if frames.rows() == 0 {
            return Err(DcgnError::InvalidParameter("example has no frames".into()));
        }
        if frames.cols() != self.arch.input_dim {
            return Err(DcgnError::ShapeMismatch {
                op: "model_forward",
                left_rows: frames.rows(),
                left_cols: frames.cols(),
                right_rows: frames.rows(),
                right_cols: self.arch.input_dim,
            });
        }
        let settings = self.arch.graph_settings();
        match &self.graph {
            None => {
                let flat = mean_row(frames);
                let (prediction, moe) = moe_forward_cached(&flat, &self.moe)?;
                Ok((
                    prediction.clone(),
                    ModelCache { shot: None, stack: None, flat, moe, prediction },
                ))
            }
            Some(graph) => {
                // Segment into at most shots_m shots (fewer frames mean fewer
                // shots; the hidden rows are then zero-padded so the video
                // feature width never varies).
                let m_eff = self.arch.shots_m.min(frames.rows());
                let boundaries = kts_fixed(&segment_costs(frames), m_eff)?;
                let shot_cache = shot_layer_forward_cached(
                    frames,
                    &boundaries,
                    &graph.shot_w_conv.value,
                    &graph.shot_w_prop.value,
                    self.arch.activation,
                    settings,
                )?;
                let hidden = &shot_cache.prop.hidden;
                let mut padded = Tensor2::zeros(self.arch.shots_m, self.arch.filter_size);
                for r in 0..m_eff {
                    padded.row_mut(r).copy_from_slice(hidden.row(r));
                }
                let (flat, stack) = if graph.layers.is_empty() {
                    (padded.flatten_rows(), None)
                } else {
                    let stack = stack_forward_cached(
                        &padded,
                        &graph.layers,
                        self.arch.pooling,
                        self.arch.activation,
                        settings,
                    )?;
                    (stack.flat.clone(), Some(stack))
                };
                let (prediction, moe) = moe_forward_cached(&flat, &self.moe)?;
                Ok((
                    prediction.clone(),
                    ModelCache {
                        shot: Some(ShotForward { boundaries, cache: shot_cache, m_eff, padded }),
                        stack,
                        flat,
                        moe,
                        prediction,
                    },
                ))
            }
        }
    }

    /// Backward pass from the per-class loss gradient; pure, so batches can
    /// run examples in parallel and reduce in a fixed order.
    pub fn backward(
        &self,
        frames: &Tensor2,
        cache: &ModelCache,
        d_scores: &[f64],
    ) -> ModelGrads {
        let settings = self.arch.graph_settings();
        let (d_flat, moe_grads) = moe_backward(&cache.flat, &self.moe, &cache.moe, d_scores);
        let Some(graph) = &self.graph else {
            return ModelGrads { shot: None, layers: Vec::new(), moe: moe_grads };
        };
        let shot = cache.shot.as_ref().expect("graph model cache has shot output");
        let (d_padded, layer_grads) = match &cache.stack {
            None => (
                d_flat.reshape(self.arch.shots_m, self.arch.filter_size),
                Vec::new(),
            ),
            Some(stack) => stack_backward(
                &shot.padded,
                &graph.layers,
                stack,
                &d_flat,
                self.arch.pooling,
                self.arch.activation,
                settings,
            ),
        };
        // Zero-padded rows do not exist in the shot layer; drop their grads.
        let mut d_hidden = Tensor2::zeros(shot.m_eff, self.arch.filter_size);
        for r in 0..shot.m_eff {
            d_hidden.row_mut(r).copy_from_slice(d_padded.row(r));
        }
        let (_, shot_grads) = shot_layer_backward(
            frames,
            &shot.boundaries,
            &graph.shot_w_conv.value,
            &graph.shot_w_prop.value,
            &shot.cache,
            &d_hidden,
            self.arch.activation,
            settings,
        );
        ModelGrads { shot: Some(shot_grads), layers: layer_grads, moe: moe_grads }
    }

    /// Add `weight * grads` into the parameters' `.grad` accumulators
    /// (weight 1/B turns a summed batch bundle into the batch mean).
    pub fn accumulate_grads(&mut self, grads: &ModelGrads, weight: f64) {
        if let Some(graph) = &mut self.graph {
            let shot = grads.shot.as_ref().expect("gradient structure matches model");
            graph.shot_w_conv.grad.add_scaled(&shot.w_conv, weight);
            graph.shot_w_prop.grad.add_scaled(&shot.w_prop, weight);
            for (params, g) in graph.layers.iter_mut().zip(&grads.layers) {
                params.w_conv.grad.add_scaled(&g.w_conv, weight);
                params.w_att.grad.add_scaled(&g.w_att, weight);
                params.b_att.grad.add_scaled(&g.b_att, weight);
                params.w_prop.grad.add_scaled(&g.w_prop, weight);
            }
        }
        self.moe.w_gate.grad.add_scaled(&grads.moe.w_gate, weight);
        self.moe.b_gate.grad.add_scaled(&grads.moe.b_gate, weight);
        self.moe.w_expert.grad.add_scaled(&grads.moe.w_expert, weight);
        self.moe.b_expert.grad.add_scaled(&grads.moe.b_expert, weight);
    }

    /// True when every parameter value is finite.
    pub fn params_finite(&self) -> bool {
        self.param_names()
            .iter()
            .all(|name| self.param(name).is_some_and(|p| p.value.is_finite()))
    }
}

impl ParamSet for DcgnModel {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(graph) = &self.graph {
            names.push("shot.w_conv".to_string());
            names.push("shot.w_prop".to_string());
            for i in 0..graph.layers.len() {
                for field in ["w_conv", "w_att", "b_att", "w_prop"] {
                    names.push(format!("layer{i}.{field}"));
                }
            }
        }
        for field in ["w_gate", "b_gate", "w_expert", "b_expert"] {
            names.push(format!("moe.{field}"));
        }
        names
    }

    fn param(&self, name: &str) -> Option<&ParamTensor> {
        match name {
            "shot.w_conv" => return self.graph.as_ref().map(|g| &g.shot_w_conv),
            "shot.w_prop" => return self.graph.as_ref().map(|g| &g.shot_w_prop),
            "moe.w_gate" => return Some(&self.moe.w_gate),
            "moe.b_gate" => return Some(&self.moe.b_gate),
            "moe.w_expert" => return Some(&self.moe.w_expert),
            "moe.b_expert" => return Some(&self.moe.b_expert),
            _ => {}
        }
        let (layer, field) = name.split_once('.')?;
        let idx: usize = layer.strip_prefix("layer")?.parse().ok()?;
        let params = self.graph.as_ref()?.layers.get(idx)?;
        match field {
            "w_conv" => Some(&params.w_conv),
            "w_att" => Some(&params.w_att),
            "b_att" => Some(&params.b_att),
            "w_prop" => Some(&params.w_prop),
            _ => None,
        }
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        match name {
            "shot.w_conv" => return self.graph.as_mut().map(|g| &mut g.shot_w_conv),
            "shot.w_prop" => return self.graph.as_mut().map(|g| &mut g.shot_w_prop),
            "moe.w_gate" => return Some(&mut self.moe.w_gate),
            "moe.b_gate" => return Some(&mut self.moe.b_gate),
            "moe.w_expert" => return Some(&mut self.moe.w_expert),
            "moe.b_expert" => return Some(&mut self.moe.b_expert),
            _ => {}
        }
        let (layer, field) = name.split_once('.')?;
        let idx: usize = layer.strip_prefix("layer")?.parse().ok()?;
        let params = self.graph.as_mut()?.layers.get_mut(idx)?;
        match field {
            "w_conv" => Some(&mut params.w_conv),
            "w_att" => Some(&mut params.w_att),
            "b_att" => Some(&mut params.b_att),
            "w_prop" => Some(&mut params.w_prop),
            _ => None,
        }
    }
}
