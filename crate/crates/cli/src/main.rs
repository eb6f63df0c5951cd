//! `iaa`: data generation, training, ablation, inference, benchmarking and
//! invariant checks for the inner-adaptor toy.
//!
//! Exit codes: 0 success, 1 failed verification or training, 2 usage or
//! config error, 3 I/O or format error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use iaa_core::accounting::{flops_report, memory_report};
use iaa_core::backbone::{build_backbone, TokenId};
use iaa_core::checkpoint::{load_checkpoint, save_checkpoint, Header, Provenance};
use iaa_core::config::ExperimentConfig;
use iaa_core::data::{image_from_json, read_jsonl, write_jsonl, Datasets, SampleKind};
use iaa_core::error::Error;
use iaa_core::model::Model;
use iaa_core::runtime::{bench_latency, generate, route, BenchWorkload, WorkflowRequest};
use iaa_core::trainer::{
    run_ablation_matrix, run_pipeline, run_stage, train_text_lm, unfrozen_pipeline, write_records, MetricRecord,
    Stage, TrainStageConfig,
};
use iaa_core::verify::run_all;
use serde_json::json;

#[derive(Parser)]
#[command(name = "iaa", version, about = "Frozen-backbone multimodal adaptation with inner insertion layers")]
struct Cli {
    /// Experiment config (JSON); defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the four synthetic datasets as JSONL.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the text backbone and save a text-only checkpoint.
    PretrainLm {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run one training stage from a checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run the configured multimodal stages from a text-only checkpoint,
    /// checkpointing after each stage.
    Pipeline {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Train the backbone too in every stage after Stage1.
        #[arg(long)]
        unfrozen: bool,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the ablation matrix from a text-only checkpoint.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One JSON line per cell.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Greedy decoding through either workflow.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Text)]
        mode: ModeArg,
        /// Whitespace-separated token ids.
        #[arg(long)]
        prompt: String,
        /// Image JSON file `{"bytes", "width", "height"}`.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
        #[arg(long)]
        stop_at: Option<TokenId>,
    },
    /// Wall-clock latency of both workflows plus exact cost accounting.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        requests: Option<usize>,
    },
    /// Run every invariant check against a checkpoint.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the effective config.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    TextPretrain,
    Stage1Pt,
    Stage2Pt,
    InstructionFt,
    GroundingFt,
    UnfrozenBaseline,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::TextPretrain => Stage::TextPretrain,
            StageArg::Stage1Pt => Stage::Stage1Pt,
            StageArg::Stage2Pt => Stage::Stage2Pt,
            StageArg::InstructionFt => Stage::InstructionFt,
            StageArg::GroundingFt => Stage::GroundingFt,
            StageArg::UnfrozenBaseline => Stage::UnfrozenBaseline,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Text,
    Multimodal,
}

/// Raised when a check ran to completion and failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::Request(_)
            | Error::DepthOutOfRange { .. }
            | Error::DepthOrder(_)
            | Error::SequenceOverflow { .. } => 2,
            Error::Io(_)
            | Error::Json(_)
            | Error::Truncated(_)
            | Error::Version { .. }
            | Error::HashMismatch
            | Error::Format(_) => 3,
            _ => 1,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return 3;
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> anyhow::Result<Datasets> {
    let Some(dir) = dir else {
        return Ok(Datasets::generate(&cfg.data)?);
    };
    let read = |name: &str| -> anyhow::Result<_> {
        let path = dir.join(format!("{name}.jsonl"));
        let file = File::open(&path).map_err(Error::from).with_context(|| path.display().to_string())?;
        Ok(read_jsonl(BufReader::new(file))?)
    };
    let data = Datasets {
        text: read("text")?,
        caption: read("caption")?,
        instruction: read("instruction")?,
        grounding: read("grounding")?,
    };
    for kind in [SampleKind::Text, SampleKind::Caption, SampleKind::Instruction, SampleKind::Grounding] {
        if data.get(kind).iter().any(|s| s.kind != kind) {
            return Err(Error::Format(format!("{kind:?} file holds samples of another kind")).into());
        }
    }
    Ok(data)
}

fn load(path: &Path) -> anyhow::Result<(Model, Header)> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn write_metrics(path: Option<&Path>, records: &[MetricRecord]) -> anyhow::Result<()> {
    if let Some(p) = path {
        let file = File::create(p).map_err(Error::from)?;
        write_records(BufWriter::new(file), records)?;
    }
    Ok(())
}

fn print_json(value: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_prompt(text: &str) -> anyhow::Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<TokenId>()
                .map_err(|_| Error::InvalidArgument(format!("prompt token `{t}` is not an id")).into())
        })
        .collect()
}

fn stage_config(cfg: &ExperimentConfig, stage: Stage, steps: Option<usize>) -> TrainStageConfig {
    let base = match stage {
        Stage::TextPretrain => cfg.pretrain.clone(),
        Stage::UnfrozenBaseline => cfg
            .stage(Stage::Stage2Pt)
            .map(TrainStageConfig::unfrozen)
            .unwrap_or_else(|| TrainStageConfig::default_for(stage)),
        other => cfg.stage(other).cloned().unwrap_or_else(|| TrainStageConfig::default_for(other)),
    };
    TrainStageConfig {
        steps: steps.unwrap_or(base.steps),
        ..base
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::ShowConfig => println!("{}", cfg.to_json()?),
        Command::GenData { out } => {
            let data = Datasets::generate(&cfg.data)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            for kind in [SampleKind::Text, SampleKind::Caption, SampleKind::Instruction, SampleKind::Grounding] {
                let name = serde_json::to_value(kind)?;
                let path = out.join(format!("{}.jsonl", name.as_str().unwrap_or("data")));
                let mut w = BufWriter::new(File::create(&path).map_err(Error::from)?);
                write_jsonl(&mut w, data.get(kind))?;
                w.flush().map_err(Error::from)?;
                eprintln!("wrote {} samples to {}", data.get(kind).len(), path.display());
            }
        }
        Command::PretrainLm {
            out,
            steps,
            data,
            metrics,
        } => {
            let data = load_data(&cfg, data.as_deref())?;
            let stage = stage_config(&cfg, Stage::TextPretrain, steps);
            let (backbone, report) = train_text_lm(build_backbone(&cfg.backbone)?, &data.text, &stage, cfg.eval.loss_samples)?;
            let hash = backbone.freeze_hash();
            let prov = Provenance {
                stage: Stage::TextPretrain.name().into(),
                seed: stage.seed,
                step: stage.steps as u64,
                backbone_hash: hash.clone(),
            };
            save_checkpoint(&Model::text_only(backbone), &prov, &out)?;
            write_metrics(metrics.as_deref(), &report.stage.records())?;
            print_json(&json!({
                "stage": "text_pretrain",
                "steps": stage.steps,
                "final_train_loss": report.stage.losses.last(),
                "heldout_loss": report.stage.heldout_loss,
                "uniform_loss": report.uniform_loss,
                "backbone_hash": hash,
            }))?;
        }
        Command::Train {
            stage,
            checkpoint,
            out,
            steps,
            data,
            metrics,
        } => {
            let stage: Stage = stage.into();
            let data = load_data(&cfg, data.as_deref())?;
            let (mut model, header) = load(&checkpoint)?;
            let stage_cfg = stage_config(&cfg, stage, steps);
            let report = if stage == Stage::TextPretrain {
                if model.adaptor.is_some() {
                    return Err(Error::Config("text pretraining takes a text-only checkpoint".into()).into());
                }
                let (backbone, rep) = train_text_lm(model.backbone, &data.text, &stage_cfg, cfg.eval.loss_samples)?;
                model = Model::text_only(backbone);
                rep.stage
            } else {
                if model.adaptor.is_none() {
                    model = Model::with_adaptor(model.backbone, &cfg.adaptor)?;
                }
                run_stage(&mut model, &stage_cfg, &data, cfg.eval.loss_samples)?
            };
            let backbone_hash = if stage.required_modules().contains(&iaa_core::model::Module::Backbone) {
                model.backbone.freeze_hash()
            } else {
                header.provenance.backbone_hash.clone()
            };
            let prov = Provenance {
                stage: stage.name().into(),
                seed: stage_cfg.seed,
                step: stage_cfg.steps as u64,
                backbone_hash,
            };
            save_checkpoint(&model, &prov, &out)?;
            write_metrics(metrics.as_deref(), &report.records())?;
            print_json(&json!({
                "stage": stage.name(),
                "steps": stage_cfg.steps,
                "final_train_loss": report.losses.last(),
                "heldout_loss": report.heldout_loss,
                "frozen_unchanged": report.frozen_unchanged,
            }))?;
        }
        Command::Pipeline {
            checkpoint,
            out_dir,
            unfrozen,
            data,
        } => {
            let data = load_data(&cfg, data.as_deref())?;
            let (text, _) = load(&checkpoint)?;
            if text.adaptor.is_some() {
                return Err(Error::Config("pipeline starts from a text-only checkpoint".into()).into());
            }
            let mut model = Model::with_adaptor(text.backbone, &cfg.adaptor)?;
            let stages = if unfrozen { unfrozen_pipeline(&cfg.stages) } else { cfg.stages.clone() };
            std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
            let report = run_pipeline(&mut model, &stages, &data, &cfg.eval, Some(&out_dir))?;
            write_metrics(Some(&out_dir.join("metrics.jsonl")), &report.records())?;
            let summary = json!({
                "stages": report.stages.iter().map(|s| json!({
                    "stage": s.stage.name(),
                    "final_train_loss": s.losses.last(),
                    "heldout_loss": s.heldout_loss,
                    "frozen_unchanged": s.frozen_unchanged,
                })).collect::<Vec<_>>(),
                "metrics": report.metrics,
                "backbone_hash_before": report.backbone_hash_before,
                "backbone_hash_after": report.backbone_hash_after,
                "text_loss_before": report.text_loss_before,
                "text_loss_after": report.text_loss_after,
                "text_loss_delta": report.text_loss_delta,
                "nlp_preserved": report.nlp_preserved,
                "checkpoints": report.checkpoints,
            });
            std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&summary)?).map_err(Error::from)?;
            print_json(&summary)?;
        }
        Command::Ablate { checkpoint, out, data } => {
            let data = load_data(&cfg, data.as_deref())?;
            let (text, _) = load(&checkpoint)?;
            let mut w = BufWriter::new(File::create(&out).map_err(Error::from)?);
            let total = cfg.ablation.cells();
            let mut done = 0;
            let mut io_err = None;
            let report = run_ablation_matrix(&text.backbone, &cfg.adaptor, &cfg.stages, &data, &cfg.eval, &cfg.ablation, |cell| {
                done += 1;
                eprintln!(
                    "[{done}/{total}] {:?} dup={} n={} {:?} seed={} caption_loss={:.4}",
                    cell.variant, cell.duplicate_embeddings, cell.n_insertions, cell.schedule, cell.seed, cell.caption_loss
                );
                let line = serde_json::to_string(cell).map(|s| s + "\n");
                if let Err(e) = line.map_err(Error::from).and_then(|l| w.write_all(l.as_bytes()).map_err(Error::from)) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            w.flush().map_err(Error::from)?;
            print_json(&json!({ "rows": report.rows, "verdicts": report.verdicts }))?;
        }
        Command::Infer {
            checkpoint,
            mode,
            prompt,
            image,
            max_new_tokens,
            stop_at,
        } => {
            let (model, _) = load(&checkpoint)?;
            let prompt = parse_prompt(&prompt)?;
            let mut req = match (mode, image) {
                (ModeArg::Text, None) => WorkflowRequest::text(prompt, max_new_tokens),
                (ModeArg::Multimodal, Some(path)) => {
                    let text = std::fs::read_to_string(&path).map_err(Error::from)?;
                    WorkflowRequest::multimodal(image_from_json(&text)?, prompt, max_new_tokens)
                }
                (ModeArg::Text, Some(_)) => bail!(Error::Request("text requests take no image".into())),
                (ModeArg::Multimodal, None) => bail!(Error::Request("multimodal requests need --image".into())),
            };
            if let Some(t) = stop_at {
                req = req.stop_at(t);
            }
            let plan = route(&model, &req)?;
            let out = generate(&model, &req)?;
            print_json(&json!({
                "mode": if mode == ModeArg::Text { "text" } else { "multimodal" },
                "components": plan.components.iter().map(|c| format!("{c:?}")).collect::<Vec<_>>(),
                "tokens": out.tokens,
            }))?;
        }
        Command::Bench { checkpoint, requests } => {
            let (model, _) = load(&checkpoint)?;
            let workload = BenchWorkload {
                requests: requests.unwrap_or(BenchWorkload::default().requests),
                ..BenchWorkload::default()
            };
            let latency = bench_latency(&model, &workload)?;
            let ac = &model.adaptor()?.config;
            print_json(&json!({
                "latency": latency,
                "flops": flops_report(&model.backbone.config, ac, workload.prompt_len + workload.max_new_tokens),
                "memory": memory_report(&model),
            }))?;
        }
        Command::Verify { checkpoint } => {
            let (model, header) = load(&checkpoint)?;
            let data = Datasets::generate(&cfg.data)?;
            let report = run_all(&model, Some(&header.provenance.backbone_hash), &cfg.adaptor, &data, &cfg.verify)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !report.passed() {
                let failed = report.checks.iter().filter(|c| !c.passed).count();
                return Err(CheckFailed(format!("{failed} checks failed")).into());
            }
        }
    }
    Ok(())
}
