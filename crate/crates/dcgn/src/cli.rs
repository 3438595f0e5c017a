//! Command-line surface: `synth`, `segment`, `train`, `eval`, `gradcheck`.
//!
//! Conventions: stdout carries machine-readable JSON only, diagnostics and
//! resolved-setting echoes go to stderr, and exit codes are stable — 0
//! success, 2 configuration/parameter problems, 3 I/O failures, 4 feature
//! file format errors, 5 non-finite loss aborts, 6 checkpoint mismatches
//! (gradcheck additionally exits 1 when the check itself fails).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::classifier::{multilabel_loss, multilabel_loss_grad};
use crate::config::{
    load_resolved_config, load_run_config, write_resolved_config, RunConfig,
};
use crate::data_io::{read_features, synth_corpus};
use crate::error::{DcgnError, Result};
use crate::graph::build_affinity_cached;
use crate::model::{DcgnModel, ModelArch, ModelKind};
use crate::rng::SplitMix64;
use crate::shots::{kts_auto, kts_fixed, segment_costs, segmentation_cost};
use crate::tensor::{finite_diff_check, ParamSet, Tensor2};
use crate::training::{
    consistent_dim, evaluate, load_examples, run_training,
};

#[derive(Parser)]
#[command(
    name = "dcgn",
    about = "Video classification over frame-feature graphs: synthetic corpora, shot segmentation, training, evaluation, gradient checking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with a manifest.
    Synth(SynthArgs),
    /// Segment one feature file into shots (fixed count or automatic).
    Segment(SegmentArgs),
    /// Train per a config and write checkpoints plus epoch reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a manifest.
    Eval(EvalArgs),
    /// Finite-difference-check every parameter gradient on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Run config JSON (the `synth` section drives generation).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for feature files and `manifest.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Number of videos to generate.
    #[arg(long)]
    count: usize,
}

#[derive(Args)]
struct SegmentArgs {
    /// Feature file to segment.
    #[arg(long)]
    features: PathBuf,
    /// Exact number of shots.
    #[arg(long, conflicts_with = "auto", required_unless_present = "auto")]
    m: Option<usize>,
    /// Choose the shot count automatically via the penalized objective.
    #[arg(long)]
    auto: bool,
    /// Penalty weight for --auto.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Include the raw frame cosine-similarity matrix in the output.
    #[arg(long)]
    dump_similarity: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Training manifest.
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest.
    #[arg(long)]
    val: PathBuf,
    /// Output directory for checkpoints, reports, and the resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of examples to score.
    #[arg(long)]
    manifest: PathBuf,
    /// Resolved config describing the checkpoint's architecture; defaults
    /// to `resolved_config.json` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional run config whose model toggles (pooling, activation, loss,
    /// graph settings) the check should exercise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Entry point behind `main`: parses arguments, sizes the worker pool, runs
/// the subcommand, and converts errors into stable exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    if let Err(err) = init_thread_pool() {
        eprintln!("error: {err}");
        return 2;
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &DcgnError) -> i32 {
    match err {
        DcgnError::Io { .. } => 3,
        DcgnError::Format { .. } => 4,
        DcgnError::NonFinite { .. } => 5,
        DcgnError::Checkpoint(_) | DcgnError::ShapeMismatch { .. } => 6,
        _ => 2,
    }
}

/// DCGN_THREADS caps worker parallelism; unset means one worker per core.
fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("DCGN_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            DcgnError::Config(format!(
                "DCGN_THREADS must be a positive integer, got {raw:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| DcgnError::Config(format!("worker pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Segment(args) => cmd_segment(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    }
}

fn emit(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("output serializes"));
}

fn cmd_synth(args: &SynthArgs) -> Result<i32> {
    let cfg = load_run_config(&args.config)?;
    let entries = synth_corpus(&cfg.synth, args.count, &args.out)?;
    let resolved = write_resolved_config(&args.out, &cfg, None)?;
    eprintln!(
        "wrote {} videos under {}",
        entries.len(),
        args.out.display()
    );
    emit(&serde_json::json!({
        "manifest": args.out.join("manifest.jsonl"),
        "count": entries.len(),
        "resolved_config": resolved,
    }));
    Ok(0)
}

#[derive(Serialize)]
struct SegmentOutput {
    cuts: Vec<usize>,
    cost: f64,
    m: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    similarity: Option<Vec<Vec<f64>>>,
}

fn cmd_segment(args: &SegmentArgs) -> Result<i32> {
    let frames = read_features(&args.features)?;
    let costs = segment_costs(&frames);
    let boundaries = match args.m {
        Some(m) => kts_fixed(&costs, m)?,
        None => kts_auto(&costs, args.c, frames.rows())?,
    };
    // The echoed settings double as the resolved config for this command.
    eprintln!(
        "{}",
        serde_json::json!({
            "resolved": {
                "features": args.features,
                "mode": if args.auto { "auto" } else { "fixed" },
                "m": boundaries.m(),
                "c_penalty": if args.auto { Some(args.c) } else { None },
                "kts_log": "natural",
            }
        })
    );
    let similarity = args.dump_similarity.then(|| {
        // Raw cosine values (no clamping): this dump is a diagnostic view
        // of frame relatedness, not the training-time adjacency.
        let affinity = build_affinity_cached(&frames, false).0;
        let entries = affinity.entries();
        (0..entries.rows()).map(|i| entries.row(i).to_vec()).collect()
    });
    emit(&SegmentOutput {
        cuts: boundaries.cuts.clone(),
        cost: segmentation_cost(&costs, &boundaries),
        m: boundaries.m(),
        similarity,
    });
    Ok(0)
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let cfg = load_run_config(&args.config)?;
    let train_examples = load_examples(&args.train, cfg.synth.num_classes)?;
    let val_examples = load_examples(&args.val, cfg.synth.num_classes)?;
    let input_dim = consistent_dim(&[&train_examples, &val_examples])?;
    if input_dim != cfg.synth.dim {
        return Err(DcgnError::Config(format!(
            "features are {input_dim}-dimensional but the config declares synth.dim = {}",
            cfg.synth.dim
        )));
    }
    let arch = cfg.arch(input_dim);
    arch.validate()?;
    let model = DcgnModel::new(arch, &mut SplitMix64::new(cfg.train.seed))?;
    std::fs::create_dir_all(&args.out).map_err(|e| DcgnError::io(&args.out, e))?;
    let resolved = write_resolved_config(&args.out, &cfg, Some(arch))?;
    let outcome = run_training(
        &cfg.train,
        model,
        &train_examples,
        &val_examples,
        Some(&args.out),
    )?;
    for report in &outcome.reports {
        eprintln!(
            "epoch {}: val gap {:.4}, hit@1 {:.4}, loss {:.4}",
            report.epoch, report.val.gap, report.val.hit_at_1, report.val.loss
        );
    }
    let last = outcome.reports.last().expect("at least one report");
    emit(&serde_json::json!({
        "checkpoint": args.out.join("checkpoint.bin"),
        "epoch_reports": args.out.join("epoch_reports.jsonl"),
        "resolved_config": resolved,
        "final": last,
    }));
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let config_path = match &args.config {
        Some(path) => path.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("resolved_config.json"),
    };
    let resolved = load_resolved_config(&config_path)?;
    let arch = resolved.arch.ok_or_else(|| {
        DcgnError::Config(format!(
            "{}: no arch section; evaluation needs a config written by train",
            config_path.display()
        ))
    })?;
    let mut model = DcgnModel::new(arch, &mut SplitMix64::new(0))?;
    crate::training::load_checkpoint(&mut model, &args.checkpoint)?;
    let examples = load_examples(&args.manifest, arch.num_classes)?;
    let report = evaluate(&model, &examples)?;
    // Echo the settings in effect (the resolved-config contract for a
    // command with no output directory).
    eprintln!(
        "{}",
        serde_json::to_string(&resolved.run_config().resolved(Some(arch)))
            .expect("config serializes")
    );
    emit(&report);
    Ok(0)
}

#[derive(Serialize)]
struct GradcheckOutput {
    pass: bool,
    seed: u64,
    params: usize,
    max_rel_err: f64,
    tolerance: f64,
    failures: Vec<String>,
}

/// Architecture for the gradient check: big enough that every parameter
/// kind exists and matters (two stacked layers whose final width stays
/// above one node, so attention weights receive real gradients), small
/// enough that central differences over all parameters stay fast.
pub fn gradcheck_arch(run: Option<&RunConfig>) -> ModelArch {
    let defaults;
    let run = match run {
        Some(cfg) => cfg,
        None => {
            defaults = RunConfig {
                synth: crate::data_io::SynthSpec {
                    num_classes: 3,
                    dim: 6,
                    shots_per_video: (1, 2),
                    frames_per_shot: (2, 6),
                    noise_std: 0.1,
                    seed: 0,
                },
                train: Default::default(),
                model: Default::default(),
            };
            &defaults
        }
    };
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
        pooling: run.train.pooling,
        activation: run.model.activation,
        affinity_clamp_negative: run.model.affinity_clamp_negative,
        graph_norm: run.model.graph_norm,
        loss: run.model.loss,
    }
}

const GRADCHECK_FRAMES: usize = 12;
const GRADCHECK_EPSILON: f64 = 1e-5;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Run the finite-difference sweep; shared by the subcommand and the test
/// suites.
pub fn gradcheck(seed: u64, run: Option<&RunConfig>) -> Result<GradcheckReportSummary> {
    let arch = gradcheck_arch(run);
    let mut model = DcgnModel::new(arch, &mut SplitMix64::new(seed))?;
    let mut frame_rng = SplitMix64::derive(seed, 1);
    let frames = Tensor2::from_vec(
        GRADCHECK_FRAMES,
        arch.input_dim,
        (0..GRADCHECK_FRAMES * arch.input_dim)
            .map(|_| frame_rng.uniform(-1.0, 1.0))
            .collect(),
    );
    let labels = vec![0, 2];
    let (pred, cache) = model.forward(&frames)?;
    let d_scores = multilabel_loss_grad(&pred, &labels, arch.loss);
    let grads = model.backward(&frames, &cache, &d_scores);
    model.zero_grads();
    model.accumulate_grads(&grads, 1.0);
    let report = finite_diff_check(
        &mut model,
        |m| {
            let (pred, _) = m.forward(&frames).expect("probe forward succeeds");
            multilabel_loss(&pred, &labels, m.arch.loss)
        },
        GRADCHECK_EPSILON,
        GRADCHECK_TOLERANCE,
    )?;
    Ok(GradcheckReportSummary {
        pass: report.all_pass(),
        seed,
        params: report.entries.len(),
        max_rel_err: report.max_rel_err(),
        tolerance: GRADCHECK_TOLERANCE,
        failures: report.failures().iter().map(|e| e.name.clone()).collect(),
    })
}

/// Outcome of one gradcheck sweep in reporting-friendly form.
#[derive(Debug, Serialize)]
pub struct GradcheckReportSummary {
    pub pass: bool,
    pub seed: u64,
    pub params: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let run = args.config.as_deref().map(load_run_config).transpose()?;
    let summary = gradcheck(args.seed, run.as_ref())?;
    eprintln!(
        "gradcheck seed {}: {} parameter tensors, max relative error {:.3e}",
        summary.seed, summary.params, summary.max_rel_err
    );
    emit(&GradcheckOutput {
        pass: summary.pass,
        seed: summary.seed,
        params: summary.params,
        max_rel_err: summary.max_rel_err,
        tolerance: summary.tolerance,
        failures: summary.failures.clone(),
    });
    Ok(if summary.pass { 0 } else { 1 })
}
