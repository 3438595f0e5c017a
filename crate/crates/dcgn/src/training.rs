//! The optimization loop: learning-rate schedule, Adam/SGD updates, batched
//! parallel gradients with a deterministic reduction, per-epoch evaluation
//! reports, and binary checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{multilabel_loss, multilabel_loss_grad};
use crate::data_io::{load_manifest, manifest_dir, read_features};
use crate::error::{DcgnError, Result};
use crate::layers::Pooling;
use crate::metrics::{gap, hit_at_1, PredictionSet};
use crate::model::{DcgnModel, ModelGrads};
use crate::rng::SplitMix64;
use crate::tensor::{ParamSet, Tensor2};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Knobs of one training run. Defaults are desk-scale: batch 32 instead of
/// 1024, filter width 64 instead of 1024, and a 4000-example decay horizon
/// instead of 4M, keeping the published ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_decay: f64,
    /// Examples between learning-rate decays.
    pub lr_decay_examples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Total graph layers, counting the shot layer.
    pub layers: usize,
    pub filter_size: usize,
    pub moe_mixtures: usize,
    pub pooling: Pooling,
    /// Shots per video for the first layer (fewer frames mean fewer shots).
    pub shots_m: usize,
    /// Pooling/convolution window in the stacked layers.
    pub k: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            lr_decay: 0.8,
            lr_decay_examples: 4000,
            batch_size: 32,
            epochs: 5,
            layers: 5,
            filter_size: 64,
            moe_mixtures: 2,
            pooling: Pooling::Attention,
            shots_m: 16,
            k: 3,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(DcgnError::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(DcgnError::Config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        let positive = [
            ("lr_decay_examples", self.lr_decay_examples),
            ("batch_size", self.batch_size),
            ("layers", self.layers),
            ("filter_size", self.filter_size),
            ("moe_mixtures", self.moe_mixtures),
            ("shots_m", self.shots_m),
            ("k", self.k),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(DcgnError::Config(format!("{name} must be positive")));
            }
        }
        // epochs may be zero: evaluation still runs on the fresh model.
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

/// Piecewise-constant decay: the rate after `step_examples` processed
/// examples is the base rate decayed once per completed horizon. The decay
/// is folded in left to right (repeated multiplication, not `powi`) so the
/// milestone values land exactly in f64: 0.001, 0.0008, 0.00064, ... under
/// the defaults.
pub fn lr_schedule(step_examples: usize, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.base_lr;
    for _ in 0..(step_examples / cfg.lr_decay_examples) {
        lr *= cfg.lr_decay;
        if lr == 0.0 {
            break;
        }
    }
    lr
}

/// First/second-moment state for Adam (empty and inert under SGD).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    t: u64,
    moments: BTreeMap<String, (Tensor2, Tensor2)>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer) -> Self {
        OptimizerState { kind, t: 0, moments: BTreeMap::new() }
    }

    /// Apply one update from the parameters' accumulated `.grad` fields.
    pub fn step(&mut self, model: &mut DcgnModel, lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for name in model.param_names() {
                    let p = model.param_mut(&name).expect("own parameter name");
                    let g = p.grad.clone();
                    p.value.add_scaled(&g, -lr);
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let bias1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bias2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for name in model.param_names() {
                    let p = model.param_mut(&name).expect("own parameter name");
                    let (m, v) = self.moments.entry(name).or_insert_with(|| {
                        (
                            Tensor2::zeros(p.grad.rows(), p.grad.cols()),
                            Tensor2::zeros(p.grad.rows(), p.grad.cols()),
                        )
                    });
                    let values = p.value.data_mut();
                    for (idx, &g) in p.grad.data().iter().enumerate() {
                        let mi = ADAM_BETA1 * m.data()[idx] + (1.0 - ADAM_BETA1) * g;
                        let vi = ADAM_BETA2 * v.data()[idx] + (1.0 - ADAM_BETA2) * g * g;
                        m.data_mut()[idx] = mi;
                        v.data_mut()[idx] = vi;
                        values[idx] -= lr * (mi / bias1) / ((vi / bias2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }

    pub fn moments_finite(&self) -> bool {
        self.moments.values().all(|(m, v)| m.is_finite() && v.is_finite())
    }
}

/// One example held in memory: id, frame features, positive class indices.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub frames: Tensor2,
    pub labels: Vec<usize>,
}

/// Load a manifest and every referenced feature file into memory. Desk-scale
/// corpora fit comfortably; nothing is streamed.
pub fn load_examples(manifest: &Path, num_classes: usize) -> Result<Vec<TrainExample>> {
    let entries = load_manifest(manifest, num_classes)?;
    let dir = manifest_dir(manifest);
    entries
        .iter()
        .map(|entry| {
            let frames = read_features(&dir.join(&entry.path))?;
            Ok(TrainExample {
                id: entry.id.clone(),
                frames,
                labels: entry.labels.clone(),
            })
        })
        .collect()
}

/// One optimizer update from one batch. Per-example losses and gradients are
/// computed in parallel, then reduced in example-index order so the result
/// never depends on thread scheduling. Returns the pre-update mean loss.
pub fn train_step(
    model: &mut DcgnModel,
    batch: &[&TrainExample],
    lr: f64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DcgnError::InvalidParameter("empty training batch".into()));
    }
    let shared: &DcgnModel = model;
    let per_example: Vec<(f64, ModelGrads)> = batch
        .par_iter()
        .map(|ex| -> Result<(f64, ModelGrads)> {
            let (pred, cache) = shared.forward(&ex.frames)?;
            let loss = multilabel_loss(&pred, &ex.labels, shared.arch.loss);
            let d_scores = multilabel_loss_grad(&pred, &ex.labels, shared.arch.loss);
            Ok((loss, shared.backward(&ex.frames, &cache, &d_scores)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_loss = per_example.iter().map(|(l, _)| l).sum::<f64>() / batch.len() as f64;
    if !mean_loss.is_finite() {
        return Err(DcgnError::NonFinite {
            context: format!("batch loss over examples [{}]", batch_ids(batch)),
        });
    }
    let mut total = ModelGrads::zeros(model);
    for (_, grads) in &per_example {
        total.add(grads);
    }
    model.zero_grads();
    model.accumulate_grads(&total, 1.0 / batch.len() as f64);
    opt.step(model, lr);
    if !model.params_finite() {
        return Err(DcgnError::NonFinite {
            context: format!("parameters after update on examples [{}]", batch_ids(batch)),
        });
    }
    Ok(mean_loss)
}

fn batch_ids(batch: &[&TrainExample]) -> String {
    batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(", ")
}

/// Metrics over one split, as emitted in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gap: f64,
    pub hit_at_1: f64,
    pub loss: f64,
    pub examples: usize,
    /// Fixed to "global": all examples' top-N lists pool into one ranking.
    pub gap_variant: String,
}

/// Score every example and compute GAP / Hit@1 / mean loss.
pub fn evaluate(model: &DcgnModel, examples: &[TrainExample]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(DcgnError::UndefinedMetric(
            "evaluation over zero examples".into(),
        ));
    }
    let scored: Vec<(Vec<f64>, f64)> = examples
        .par_iter()
        .map(|ex| -> Result<(Vec<f64>, f64)> {
            let (pred, _) = model.forward(&ex.frames)?;
            let loss = multilabel_loss(&pred, &ex.labels, model.arch.loss);
            Ok((pred.scores, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = PredictionSet::new();
    for (ex, (scores, _)) in examples.iter().zip(&scored) {
        set.push(ex.id.clone(), ex.labels.iter().copied(), scores);
    }
    let loss = scored.iter().map(|(_, l)| l).sum::<f64>() / examples.len() as f64;
    Ok(EvalReport {
        gap: gap(&set)?,
        hit_at_1: hit_at_1(&set)?,
        loss,
        examples: examples.len(),
        gap_variant: "global".to_string(),
    })
}

/// One line of the run log: training state plus validation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub examples_seen: usize,
    /// Rate the next step would use.
    pub lr: f64,
    /// Mean training loss across the epoch; absent when no step ran.
    pub train_loss: Option<f64>,
    pub val: EvalReport,
}

/// A finished run: final model plus everything reported along the way.
#[derive(Debug)]
pub struct RunOutcome {
    pub model: DcgnModel,
    pub reports: Vec<EpochReport>,
}

/// Feature width shared by every example, or an error naming the offender.
pub fn consistent_dim(splits: &[&[TrainExample]]) -> Result<usize> {
    let mut dim: Option<(usize, &str)> = None;
    for example in splits.iter().copied().flatten() {
        match dim {
            None => dim = Some((example.frames.cols(), &example.id)),
            Some((d, first)) if d != example.frames.cols() => {
                return Err(DcgnError::InvalidParameter(format!(
                    "feature width mismatch: {first} has {d} dims, {} has {}",
                    example.id,
                    example.frames.cols()
                )));
            }
            Some(_) => {}
        }
    }
    dim.map(|(d, _)| d)
        .ok_or_else(|| DcgnError::InvalidParameter("no examples to infer feature width".into()))
}

/// Train `model` in place per the config, evaluating on `val` after every
/// epoch. Deterministic: epoch shuffles derive from (seed, epoch) and batch
/// gradients reduce in index order, so identical inputs give bit-identical
/// reports and checkpoints. With `out_dir` set, appends each report to
/// `epoch_reports.jsonl` and writes per-epoch plus final checkpoints.
pub fn run_training(
    cfg: &TrainConfig,
    mut model: DcgnModel,
    train: &[TrainExample],
    val: &[TrainExample],
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DcgnError::InvalidParameter("training split is empty".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| DcgnError::io(dir, e))?;
        let log = dir.join("epoch_reports.jsonl");
        fs::write(&log, "").map_err(|e| DcgnError::io(&log, e))?;
    }
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut reports = Vec::new();
    let mut examples_seen = 0usize;
    let mut global_step = 0usize;

    if cfg.epochs == 0 {
        let report = EpochReport {
            epoch: 0,
            examples_seen: 0,
            lr: lr_schedule(0, cfg),
            train_loss: None,
            val: evaluate(&model, val)?,
        };
        emit_report(out_dir, &report)?;
        reports.push(report);
    }

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        SplitMix64::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = lr_schedule(examples_seen, cfg);
            global_step += 1;
            let loss = train_step(&mut model, &batch, lr, &mut opt).map_err(|e| match e {
                DcgnError::NonFinite { context } => DcgnError::NonFinite {
                    context: format!("step {global_step}: {context}"),
                },
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
            examples_seen += batch.len();
        }
        let report = EpochReport {
            epoch,
            examples_seen,
            lr: lr_schedule(examples_seen, cfg),
            train_loss: Some(loss_sum / train.len() as f64),
            val: evaluate(&model, val)?,
        };
        emit_report(out_dir, &report)?;
        if let Some(dir) = out_dir {
            save_checkpoint(&model, &dir.join(format!("checkpoint_epoch_{epoch}.bin")))?;
        }
        reports.push(report);
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&model, &dir.join("checkpoint.bin"))?;
    }
    Ok(RunOutcome { model, reports })
}

fn emit_report(out_dir: Option<&Path>, report: &EpochReport) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    let path = dir.join("epoch_reports.jsonl");
    let mut file = fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| DcgnError::io(&path, e))?;
    let line = serde_json::to_string(report).expect("report serializes");
    writeln!(file, "{line}").map_err(|e| DcgnError::io(&path, e))
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCGM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write every parameter tensor as a named block: magic, version, then per
/// block (name length u32, name bytes, rows u32, cols u32, f64 values
/// row-major), all little-endian.
pub fn save_checkpoint(model: &DcgnModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for name in model.param_names() {
        let tensor = &model.param(&name).expect("own parameter name").value;
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| DcgnError::io(path, e))
}

/// Load parameter blocks into an already-shaped model. Every model parameter
/// must appear with its exact shape, and no extra blocks may remain.
pub fn load_checkpoint(model: &mut DcgnModel, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| DcgnError::io(path, e))?;
    let mut blocks = parse_checkpoint(&bytes)?;
    for name in model.param_names() {
        let tensor = blocks
            .remove(&name)
            .ok_or_else(|| DcgnError::Checkpoint(format!("missing parameter block {name:?}")))?;
        let param = model.param_mut(&name).expect("own parameter name");
        if tensor.rows() != param.value.rows() || tensor.cols() != param.value.cols() {
            return Err(DcgnError::Checkpoint(format!(
                "parameter {name:?}: checkpoint holds {}x{}, model expects {}x{}",
                tensor.rows(),
                tensor.cols(),
                param.value.rows(),
                param.value.cols()
            )));
        }
        param.value = tensor;
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(DcgnError::Checkpoint(format!(
            "unexpected parameter block {extra:?}"
        )));
    }
    Ok(())
}

fn parse_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor2>> {
    let fail = |reason: &str| DcgnError::Checkpoint(reason.to_string());
    if bytes.len() < 8 {
        return Err(fail("file shorter than header"));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic, expected \"DCGM\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DcgnError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut blocks = BTreeMap::new();
    let mut pos = 8usize;
    let take = |pos: &mut usize, len: usize| -> Result<&[u8]> {
        let end = pos.checked_add(len).filter(|&e| e <= bytes.len());
        let end = end.ok_or_else(|| fail("truncated block"))?;
        let slice = &bytes[*pos..end];
        *pos = end;
        Ok(slice)
    };
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| fail("block name is not UTF-8"))?;
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| fail("block size overflow"))?;
        let payload = take(&mut pos, count * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if blocks.insert(name.clone(), Tensor2::from_vec(rows, cols, data)).is_some() {
            return Err(DcgnError::Checkpoint(format!("duplicate block {name:?}")));
        }
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::LossVariant;
    use crate::graph::GraphNorm;
    use crate::model::{ModelArch, ModelKind};
    use crate::tensor::Activation;
    use tempfile::tempdir;

    fn tiny_arch() -> ModelArch {
        ModelArch {
            kind: ModelKind::Dcgn,
            input_dim: 6,
            num_classes: 3,
            num_layers: 3,
            k: 2,
            filter_size: 5,
            moe_mixtures: 2,
            shots_m: 8,
            shot_k_max: 2,
            pooling: Pooling::Attention,
            activation: Activation::Sigmoid,
            affinity_clamp_negative: true,
            graph_norm: GraphNorm::Symmetric,
            loss: LossVariant::Binary,
        }
    }

    fn tiny_model(seed: u64) -> DcgnModel {
        DcgnModel::new(tiny_arch(), &mut SplitMix64::new(seed)).unwrap()
    }

    fn synthetic_examples(count: usize, dim: usize, num_classes: usize, seed: u64) -> Vec<TrainExample> {
        // Frames cluster around a per-class direction so the task is
        // learnable; one label per example keeps the oracle simple.
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = SplitMix64::derive(seed, i as u64);
            let class = rng.uniform_usize(0, num_classes - 1);
            let n = rng.uniform_usize(4, 10);
            let mut frames = Tensor2::zeros(n, dim);
            for r in 0..n {
                for c in 0..dim {
                    let base = if c % num_classes == class { 1.0 } else { 0.0 };
                    frames.set(r, c, base + 0.1 * rng.next_normal());
                }
            }
            out.push(TrainExample {
                id: format!("ex_{i:03}"),
                frames,
                labels: vec![class],
            });
        }
        out
    }

    #[test]
    fn schedule_hits_published_milestones_exactly() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.001);
        assert_eq!(lr_schedule(3999, &cfg), 0.001);
        assert_eq!(lr_schedule(4000, &cfg), 0.0008);
        assert_eq!(lr_schedule(8000, &cfg), 0.00064);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let cfg = TrainConfig::default();
        let mut last = f64::INFINITY;
        for step in (0..40_000).step_by(997) {
            let lr = lr_schedule(step, &cfg);
            assert!(lr <= last && lr > 0.0);
            last = lr;
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        for kind in [Optimizer::Adam, Optimizer::Sgd] {
            let mut model = tiny_model(3);
            let before: Vec<Vec<f64>> = model
                .param_names()
                .iter()
                .map(|n| model.param(n).unwrap().value.data().to_vec())
                .collect();
            let examples = synthetic_examples(4, 6, 3, 40);
            let batch: Vec<&TrainExample> = examples.iter().collect();
            let mut opt = OptimizerState::new(kind);
            train_step(&mut model, &batch, 0.0, &mut opt).unwrap();
            for (name, old) in model.param_names().iter().zip(&before) {
                assert_eq!(model.param(name).unwrap().value.data(), &old[..], "{name}");
            }
        }
    }

    #[test]
    fn consecutive_steps_descend_on_fixed_batch() {
        let mut model = tiny_model(5);
        let examples = synthetic_examples(4, 6, 3, 41);
        let batch: Vec<&TrainExample> = examples.iter().collect();
        let mut opt = OptimizerState::new(Optimizer::Adam);
        let first = train_step(&mut model, &batch, 0.01, &mut opt).unwrap();
        let second = train_step(&mut model, &batch, 0.01, &mut opt).unwrap();
        assert!(second < first, "{second} !< {first}");
    }

    #[test]
    fn repeated_steps_overfit_a_small_batch() {
        let mut model = tiny_model(6);
        let examples = synthetic_examples(4, 6, 3, 42);
        let batch: Vec<&TrainExample> = examples.iter().collect();
        let mut opt = OptimizerState::new(Optimizer::Adam);
        let initial = train_step(&mut model, &batch, 0.01, &mut opt).unwrap();
        let mut last = initial;
        for _ in 0..199 {
            last = train_step(&mut model, &batch, 0.01, &mut opt).unwrap();
            assert!(last.is_finite());
        }
        assert!(
            last < 0.1 * initial,
            "loss {last} did not drop below 10% of {initial}"
        );
        assert!(opt.moments_finite());
    }

    #[test]
    fn poisoned_parameters_abort_with_example_ids() {
        let mut model = tiny_model(7);
        model.param_mut("moe.b_gate").unwrap().value.set(0, 0, f64::NAN);
        let examples = synthetic_examples(2, 6, 3, 43);
        let batch: Vec<&TrainExample> = examples.iter().collect();
        let mut opt = OptimizerState::new(Optimizer::Adam);
        let err = train_step(&mut model, &batch, 0.01, &mut opt).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "{msg}");
        assert!(msg.contains("ex_000") && msg.contains("ex_001"), "{msg}");
    }

    #[test]
    fn zero_epochs_still_evaluates() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let model = tiny_model(8);
        let init_weight = model.param("moe.w_expert").unwrap().value.clone();
        let examples = synthetic_examples(6, 6, 3, 44);
        let outcome = run_training(&cfg, model, &examples, &examples, None).unwrap();
        assert_eq!(outcome.reports.len(), 1);
        let report = &outcome.reports[0];
        assert_eq!(report.epoch, 0);
        assert_eq!(report.train_loss, None);
        assert_eq!(report.lr, 0.001);
        assert_eq!(report.val.examples, 6);
        assert_eq!(
            outcome.model.param("moe.w_expert").unwrap().value.data(),
            init_weight.data()
        );
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            filter_size: 5,
            layers: 3,
            k: 2,
            shots_m: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let examples = synthetic_examples(12, 6, 3, 45);
        let val = synthetic_examples(6, 6, 3, 46);
        let run = || {
            let model = DcgnModel::new(tiny_arch(), &mut SplitMix64::new(cfg.seed)).unwrap();
            run_training(&cfg, model, &examples, &val, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.reports, b.reports);
        for name in a.model.param_names() {
            assert_eq!(
                a.model.param(&name).unwrap().value.data(),
                b.model.param(&name).unwrap().value.data(),
                "{name}"
            );
        }
    }

    #[test]
    fn run_writes_reports_and_checkpoints() {
        let dir = tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            filter_size: 5,
            layers: 3,
            k: 2,
            shots_m: 8,
            ..TrainConfig::default()
        };
        let examples = synthetic_examples(8, 6, 3, 47);
        let model = tiny_model(9);
        let outcome = run_training(&cfg, model, &examples, &examples, Some(dir.path())).unwrap();
        let log = std::fs::read_to_string(dir.path().join("epoch_reports.jsonl")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 2);
        let parsed: EpochReport = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(&parsed, &outcome.reports[1]);
        assert!(dir.path().join("checkpoint_epoch_1.bin").is_file());
        assert!(dir.path().join("checkpoint_epoch_2.bin").is_file());
        assert!(dir.path().join("checkpoint.bin").is_file());
    }

    #[test]
    fn checkpoint_round_trips_parameters() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = tiny_model(10);
        save_checkpoint(&model, &path).unwrap();
        let mut restored = tiny_model(999); // different init, same shapes
        load_checkpoint(&mut restored, &path).unwrap();
        for name in model.param_names() {
            assert_eq!(
                model.param(&name).unwrap().value.data(),
                restored.param(&name).unwrap().value.data(),
                "{name}"
            );
        }
        let frames = synthetic_examples(1, 6, 3, 48).remove(0).frames;
        let (a, _) = model.forward(&frames).unwrap();
        let (b, _) = restored.forward(&frames).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn checkpoint_rejects_shape_and_name_mismatches() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&tiny_model(12), &path).unwrap();

        let mut wider = tiny_arch();
        wider.input_dim = 8;
        let mut mismatched = DcgnModel::new(wider, &mut SplitMix64::new(1)).unwrap();
        let err = load_checkpoint(&mut mismatched, &path).unwrap_err();
        assert!(matches!(err, DcgnError::Checkpoint(_)), "{err}");
        assert!(err.to_string().contains("shot.w_conv"), "{err}");

        let mut baseline_arch = tiny_arch();
        baseline_arch.kind = ModelKind::AverageBaseline;
        let mut baseline = DcgnModel::new(baseline_arch, &mut SplitMix64::new(1)).unwrap();
        let err = load_checkpoint(&mut baseline, &path).unwrap_err();
        assert!(matches!(err, DcgnError::Checkpoint(_)), "{err}");
    }

    #[test]
    fn checkpoint_rejects_corrupt_headers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let mut model = tiny_model(13);
        let err = load_checkpoint(&mut model, &path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn evaluation_on_empty_split_is_undefined() {
        let model = tiny_model(14);
        let err = evaluate(&model, &[]).unwrap_err();
        assert!(matches!(err, DcgnError::UndefinedMetric(_)), "{err}");
    }

    #[test]
    fn consistent_dim_flags_the_offending_example() {
        let a = synthetic_examples(2, 6, 3, 49);
        let b = synthetic_examples(1, 4, 3, 50);
        let err = consistent_dim(&[&a, &b]).unwrap_err();
        assert!(err.to_string().contains("ex_000"), "{err}");
        assert_eq!(consistent_dim(&[&a]).unwrap(), 6);
    }
}
