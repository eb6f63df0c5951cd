//! Staged training: text pretraining of the backbone, the four multimodal
//! stages, the unfrozen contrast baseline, full pipelines and ablation
//! matrices.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptor::{AdaptorConfig, Variant};
use crate::autograd::Graph;
use crate::backbone::{Backbone, TokenId};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Provenance};
use crate::data::{heldout_split, train_split, Datasets, Sample, SampleKind};
use crate::error::{Error, Result};
use crate::eval::{exact_match, grounding_iou, heldout_loss, text_outputs};
use crate::model::{Model, Module};
use crate::optim::{adamw_step, clip_grad_norm, lr_at, AdamWConfig, OptimizerState};
use crate::tensor::Parameters;

/// Peak learning rate of the stages that train the inner adaptor.
pub const ADAPTOR_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TextPretrain,
    Stage1Pt,
    Stage2Pt,
    InstructionFt,
    GroundingFt,
    UnfrozenBaseline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TextPretrain => "text_pretrain",
            Stage::Stage1Pt => "stage1_pt",
            Stage::Stage2Pt => "stage2_pt",
            Stage::InstructionFt => "instruction_ft",
            Stage::GroundingFt => "grounding_ft",
            Stage::UnfrozenBaseline => "unfrozen_baseline",
        }
    }

    /// Modules each stage must train. The unfrozen baseline adds the backbone.
    pub fn required_modules(self) -> Vec<Module> {
        match self {
            Stage::TextPretrain => vec![Module::Backbone],
            Stage::Stage1Pt => vec![Module::Projector],
            Stage::Stage2Pt | Stage::InstructionFt | Stage::GroundingFt => {
                vec![Module::Projector, Module::InnerAdaptor]
            }
            Stage::UnfrozenBaseline => vec![Module::Projector, Module::InnerAdaptor, Module::Backbone],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStageConfig {
    pub stage: Stage,
    pub trainable_modules: Vec<Module>,
    pub data: SampleKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm cap; off for every stage but the unfrozen baseline.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl TrainStageConfig {
    pub fn default_for(stage: Stage) -> Self {
        let (data, learning_rate, steps) = match stage {
            Stage::TextPretrain => (SampleKind::Text, 1e-3, 2000),
            Stage::Stage1Pt => (SampleKind::Caption, 1e-3, 500),
            Stage::Stage2Pt => (SampleKind::Caption, ADAPTOR_LR, 500),
            Stage::InstructionFt => (SampleKind::Instruction, ADAPTOR_LR, 1000),
            Stage::GroundingFt => (SampleKind::Grounding, ADAPTOR_LR, 1500),
            Stage::UnfrozenBaseline => (SampleKind::Caption, ADAPTOR_LR, 500),
        };
        TrainStageConfig {
            stage,
            trainable_modules: stage.required_modules(),
            data,
            learning_rate,
            batch_size: 32,
            warmup_ratio: 0.03,
            steps,
            optimizer: AdamWConfig::default(),
            grad_clip: (stage == Stage::UnfrozenBaseline).then_some(1.0),
            seed: 0,
        }
    }

    /// The four multimodal stages in order.
    pub fn default_pipeline() -> Vec<Self> {
        [Stage::Stage1Pt, Stage::Stage2Pt, Stage::InstructionFt, Stage::GroundingFt]
            .into_iter()
            .map(Self::default_for)
            .collect()
    }

    /// Same data, budget and learning rate with the backbone also trainable.
    pub fn unfrozen(&self) -> Self {
        TrainStageConfig {
            stage: Stage::UnfrozenBaseline,
            trainable_modules: Stage::UnfrozenBaseline.required_modules(),
            grad_clip: Some(1.0),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut have = self.trainable_modules.clone();
        have.sort();
        have.dedup();
        let mut want = self.stage.required_modules();
        want.sort();
        if have != want {
            return Err(Error::Config(format!(
                "stage {} trains {want:?}, config lists {:?}",
                self.stage.name(),
                self.trainable_modules
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        let text_stage = self.stage == Stage::TextPretrain;
        if text_stage != (self.data == SampleKind::Text) {
            return Err(Error::Config("only text pretraining uses the text corpus".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_at(self.learning_rate, self.warmup_ratio, self.steps, step)
    }
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
    pub seed: u64,
}

pub fn write_records<W: Write>(mut w: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub seed: u64,
    pub losses: Vec<f32>,
    pub lrs: Vec<f64>,
    pub heldout_loss: f64,
    /// Tensors outside the trainable set hashed equal before and after.
    pub frozen_unchanged: bool,
}

impl StageReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let stage = self.stage.name().to_string();
        let mut out: Vec<MetricRecord> = self
            .losses
            .iter()
            .zip(&self.lrs)
            .enumerate()
            .map(|(i, (&loss, &lr))| MetricRecord {
                stage: stage.clone(),
                step: i + 1,
                lr,
                loss: loss as f64,
                split: "train".into(),
                metric_name: "loss".into(),
                value: loss as f64,
                seed: self.seed,
            })
            .collect();
        out.push(MetricRecord {
            stage,
            step: self.losses.len(),
            lr: self.lrs.last().copied().unwrap_or(0.0),
            loss: self.losses.last().copied().unwrap_or(f32::NAN) as f64,
            split: "heldout".into(),
            metric_name: "loss".into(),
            value: self.heldout_loss,
            seed: self.seed,
        });
        out
    }
}

fn frozen_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    model.visit(&mut |name, t| {
        if !t.trainable() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
    });
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Optimizes the masked next-token loss of `cfg.data` with exactly
/// `cfg.trainable_modules` unfrozen, then scores the held-out split.
pub fn run_stage(model: &mut Model, cfg: &TrainStageConfig, data: &Datasets, eval_samples: usize) -> Result<StageReport> {
    cfg.validate()?;
    if cfg.data != SampleKind::Text && model.adaptor.is_none() {
        return Err(Error::Config(format!("stage {} needs an adaptor", cfg.stage.name())));
    }
    model.set_trainable_modules(&cfg.trainable_modules);
    let before = frozen_hash(model);
    let samples = data.get(cfg.data);
    let train = train_split(samples);
    if train.is_empty() {
        return Err(Error::Config(format!("no training samples of kind {:?}", cfg.data)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut state = OptimizerState::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut lrs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<&Sample> = order.drain(..cfg.batch_size.min(order.len())).map(|i| train[i]).collect();
        model.zero_grads();
        let grads = {
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &batch)?;
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::LossOverflow {
                    stage: cfg.stage.name().into(),
                    step,
                });
            }
            losses.push(value);
            g.backward(loss)?
        };
        grads.accumulate_into(model)?;
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(model, max);
        }
        let lr = cfg.lr_at(step + 1)?;
        lrs.push(lr);
        adamw_step(model, &mut state, lr, &cfg.optimizer)?;
    }
    model.zero_grads();
    let frozen_unchanged = frozen_hash(model) == before;
    let held = heldout_split(samples);
    let held = &held[..held.len().min(eval_samples.max(1))];
    let heldout_loss = heldout_loss(model, held, cfg.batch_size)?;
    Ok(StageReport {
        stage: cfg.stage,
        seed: cfg.seed,
        losses,
        lrs,
        heldout_loss,
        frozen_unchanged,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TextLmReport {
    pub stage: StageReport,
    /// `ln(vocab_size)`, the loss of a uniform predictor.
    pub uniform_loss: f64,
}

/// Language-model pretraining of a trainable backbone on the text corpus.
pub fn train_text_lm(backbone: Backbone, corpus: &[Sample], cfg: &TrainStageConfig, eval_samples: usize) -> Result<(Backbone, TextLmReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let uniform_loss = (backbone.config.vocab_size as f64).ln();
    let mut model = Model::text_only(backbone);
    let data = Datasets {
        text: corpus.to_vec(),
        caption: Vec::new(),
        instruction: Vec::new(),
        grounding: Vec::new(),
    };
    let stage = run_stage(&mut model, cfg, &data, eval_samples)?;
    model.backbone.set_trainable(false);
    Ok((model.backbone, TextLmReport { stage, uniform_loss }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out samples scored for loss after each stage.
    pub loss_samples: usize,
    /// Held-out samples decoded for caption exact match.
    pub caption_samples: usize,
    /// Held-out grounding samples decoded for IoU.
    pub grounding_samples: usize,
    /// Held-out text prompts decoded for the preservation check.
    pub text_prompts: usize,
    pub text_decode_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            loss_samples: 512,
            caption_samples: 200,
            grounding_samples: 300,
            text_prompts: 16,
            text_decode_tokens: 24,
        }
    }
}

/// Caption and grounding scores taken after a multimodal stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageMetrics {
    pub stage: Stage,
    pub caption_exact_match: f64,
    pub grounding_iou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    pub metrics: Vec<StageMetrics>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub text_loss_before: f64,
    pub text_loss_after: f64,
    pub text_loss_delta: f64,
    pub text_outputs_before: Vec<Vec<TokenId>>,
    pub text_outputs_after: Vec<Vec<TokenId>>,
    /// Hash equal, held-out text loss bit-equal and greedy outputs equal.
    pub nlp_preserved: bool,
    pub checkpoints: Vec<PathBuf>,
}

impl PipelineReport {
    pub fn metrics_after(&self, stage: Stage) -> Option<&StageMetrics> {
        self.metrics.iter().rev().find(|m| m.stage == stage)
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out: Vec<MetricRecord> = self.stages.iter().flat_map(StageReport::records).collect();
        let seed = self.stages.first().map_or(0, |s| s.seed);
        for m in &self.metrics {
            for (name, value) in [("caption_exact_match", m.caption_exact_match), ("grounding_iou", m.grounding_iou)] {
                out.push(MetricRecord {
                    stage: m.stage.name().into(),
                    step: 0,
                    lr: 0.0,
                    loss: f64::NAN,
                    split: "heldout".into(),
                    metric_name: name.into(),
                    value,
                    seed,
                });
            }
        }
        for (name, value) in [
            ("text_loss_before", self.text_loss_before),
            ("text_loss_after", self.text_loss_after),
            ("text_loss_delta", self.text_loss_delta),
            ("nlp_preserved", if self.nlp_preserved { 1.0 } else { 0.0 }),
        ] {
            out.push(MetricRecord {
                stage: "pipeline".into(),
                step: 0,
                lr: 0.0,
                loss: f64::NAN,
                split: "heldout".into(),
                metric_name: name.into(),
                value,
                seed,
            });
        }
        out
    }
}

fn stage_rank(stage: Stage) -> Option<usize> {
    match stage {
        Stage::Stage1Pt => Some(0),
        Stage::Stage2Pt => Some(1),
        Stage::InstructionFt => Some(2),
        Stage::GroundingFt => Some(3),
        _ => None,
    }
}

/// Reference point for the text workflow: held-out loss and greedy outputs.
pub fn text_reference(model: &Model, data: &Datasets, eval: &EvalConfig) -> Result<(f64, Vec<Vec<TokenId>>)> {
    let text_model = Model::text_only(model.backbone.clone());
    let held = heldout_split(&data.text);
    let held = &held[..held.len().min(eval.loss_samples.max(1))];
    let loss = heldout_loss(&text_model, held, 32)?;
    let prompts: Vec<Vec<TokenId>> = held.iter().take(eval.text_prompts).map(|s| s.prompt.clone()).collect();
    let outputs = text_outputs(&text_model, &prompts, eval.text_decode_tokens)?;
    Ok((loss, outputs))
}

fn multimodal_metrics(model: &Model, stage: Stage, data: &Datasets, eval: &EvalConfig) -> Result<StageMetrics> {
    let captions = heldout_split(&data.caption);
    let grounding = heldout_split(&data.grounding);
    Ok(StageMetrics {
        stage,
        caption_exact_match: exact_match(model, &captions[..captions.len().min(eval.caption_samples.max(1))])?,
        grounding_iou: grounding_iou(model, &grounding[..grounding.len().min(eval.grounding_samples.max(1))])?,
    })
}

/// Runs `stages` in order on `model`. With `checkpoint_dir`, every stage
/// ends by writing a checkpoint and the next stage starts from that file.
pub fn run_pipeline(
    model: &mut Model,
    stages: &[TrainStageConfig],
    data: &Datasets,
    eval: &EvalConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PipelineReport> {
    let ranks: Vec<usize> = stages.iter().filter_map(|s| stage_rank(s.stage)).collect();
    if ranks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("pipeline stages out of order".into()));
    }
    if stages.iter().any(|s| s.stage == Stage::TextPretrain) {
        return Err(Error::Config("text pretraining is not a pipeline stage".into()));
    }
    for s in stages {
        s.validate()?;
    }
    let backbone_hash_before = model.backbone.freeze_hash();
    let (text_loss_before, text_outputs_before) = text_reference(model, data, eval)?;
    let mut reports = Vec::new();
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    for (i, cfg) in stages.iter().enumerate() {
        let report = run_stage(model, cfg, data, eval.loss_samples)?;
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("{i}_{}.ckpt", cfg.stage.name()));
            let prov = Provenance {
                stage: cfg.stage.name().into(),
                seed: cfg.seed,
                step: cfg.steps as u64,
                backbone_hash: backbone_hash_before.clone(),
            };
            save_checkpoint(model, &prov, &path)?;
            *model = load_checkpoint(&path)?.0;
            checkpoints.push(path);
        }
        if cfg.stage != Stage::Stage1Pt || stages.len() == 1 {
            metrics.push(multimodal_metrics(model, cfg.stage, data, eval)?);
        }
        reports.push(report);
    }
    model.set_trainable_modules(&[]);
    let backbone_hash_after = model.backbone.freeze_hash();
    let (text_loss_after, text_outputs_after) = text_reference(model, data, eval)?;
    let nlp_preserved = backbone_hash_before == backbone_hash_after
        && text_loss_before.to_bits() == text_loss_after.to_bits()
        && text_outputs_before == text_outputs_after;
    Ok(PipelineReport {
        stages: reports,
        metrics,
        backbone_hash_before,
        backbone_hash_after,
        text_loss_before,
        text_loss_after,
        text_loss_delta: text_loss_after - text_loss_before,
        text_outputs_before,
        text_outputs_after,
        nlp_preserved,
        checkpoints,
    })
}

/// The stages after Stage1 swapped for the unfrozen contrast baseline.
pub fn unfrozen_pipeline(stages: &[TrainStageConfig]) -> Vec<TrainStageConfig> {
    stages
        .iter()
        .map(|s| if s.stage == Stage::Stage1Pt { s.clone() } else { s.unfrozen() })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Full,
    SkipStage1,
    SkipStage2,
}

impl Schedule {
    pub fn apply(self, stages: &[TrainStageConfig]) -> Vec<TrainStageConfig> {
        let skip = match self {
            Schedule::Full => None,
            Schedule::SkipStage1 => Some(Stage::Stage1Pt),
            Schedule::SkipStage2 => Some(Stage::Stage2Pt),
        };
        stages.iter().filter(|s| Some(s.stage) != skip).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationAxes {
    pub variants: Vec<Variant>,
    pub duplicate_embeddings: Vec<bool>,
    pub n_insertions: Vec<usize>,
    pub schedules: Vec<Schedule>,
    pub seeds: Vec<u64>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        AblationAxes {
            variants: Variant::ALL.to_vec(),
            duplicate_embeddings: vec![true, false],
            n_insertions: vec![1, 2, 4],
            schedules: vec![Schedule::SkipStage1, Schedule::SkipStage2, Schedule::Full],
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationAxes {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.variants.is_empty()
            || self.duplicate_embeddings.is_empty()
            || self.n_insertions.is_empty()
            || self.schedules.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::Config("every ablation axis needs at least one value".into()));
        }
        if let Some(&n) = self.n_insertions.iter().find(|&&n| n == 0 || n > n_layers) {
            return Err(Error::Config(format!("cannot place {n} insertions in {n_layers} layers")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.variants.len() * self.duplicate_embeddings.len() * self.n_insertions.len() * self.schedules.len() * self.seeds.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub duplicate_embeddings: bool,
    pub n_insertions: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub caption_loss: f64,
    pub caption_exact_match: f64,
    pub grounding_iou: f64,
    pub final_train_loss: f64,
    pub finite: bool,
}

/// Median over seeds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub duplicate_embeddings: bool,
    pub n_insertions: usize,
    pub schedule: Schedule,
    pub caption_loss: f64,
    pub caption_exact_match: f64,
    pub grounding_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendVerdict {
    pub trend: String,
    /// Median held-out caption loss of each side, better side first.
    pub expected_better: f64,
    pub expected_worse: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub rows: Vec<AblationRow>,
    pub verdicts: Vec<TrendVerdict>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One training run of an ablation cell from the frozen `backbone`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_cell(
    backbone: &Backbone,
    base: &AdaptorConfig,
    stages: &[TrainStageConfig],
    data: &Datasets,
    eval: &EvalConfig,
    variant: Variant,
    duplicate: bool,
    n: usize,
    schedule: Schedule,
    seed: u64,
) -> Result<AblationCell> {
    let ac = AdaptorConfig {
        variant,
        depths: crate::adaptor::even_depths(n, backbone.config.n_layers)?,
        gate_mode: variant.is_gated().then(|| base.gate_mode.unwrap_or(crate::adaptor::GateMode::PerChannel)),
        duplicate_embeddings: duplicate,
        seed: base.seed.wrapping_add(seed),
        ..base.clone()
    };
    let mut model = Model::with_adaptor(backbone.clone(), &ac)?;
    let mut final_train_loss = f64::NAN;
    for cfg in schedule.apply(stages) {
        let cfg = TrainStageConfig {
            seed: cfg.seed.wrapping_add(seed),
            ..cfg
        };
        let rep = run_stage(&mut model, &cfg, data, eval.loss_samples)?;
        final_train_loss = rep.losses.last().copied().unwrap_or(f32::NAN) as f64;
    }
    let captions = heldout_split(&data.caption);
    let captions = &captions[..captions.len().min(eval.loss_samples.max(1))];
    let caption_loss = heldout_loss(&model, captions, 32)?;
    let m = multimodal_metrics(&model, Stage::Stage2Pt, data, eval)?;
    Ok(AblationCell {
        variant,
        duplicate_embeddings: duplicate,
        n_insertions: n,
        schedule,
        seed,
        caption_loss,
        caption_exact_match: m.caption_exact_match,
        grounding_iou: m.grounding_iou,
        final_train_loss,
        finite: caption_loss.is_finite() && final_train_loss.is_finite(),
    })
}

/// Runs every cell of `axes` with shared seeds and data, calling `on_cell`
/// as each finishes, then aggregates medians and trend verdicts.
pub fn run_ablation_matrix(
    backbone: &Backbone,
    base: &AdaptorConfig,
    stages: &[TrainStageConfig],
    data: &Datasets,
    eval: &EvalConfig,
    axes: &AblationAxes,
    mut on_cell: impl FnMut(&AblationCell),
) -> Result<AblationReport> {
    axes.validate(backbone.config.n_layers)?;
    let mut cells = Vec::with_capacity(axes.cells());
    for &variant in &axes.variants {
        for &dup in &axes.duplicate_embeddings {
            for &n in &axes.n_insertions {
                for &schedule in &axes.schedules {
                    for &seed in &axes.seeds {
                        let cell = run_ablation_cell(backbone, base, stages, data, eval, variant, dup, n, schedule, seed)?;
                        on_cell(&cell);
                        cells.push(cell);
                    }
                }
            }
        }
    }
    Ok(summarize_ablation(cells))
}

pub fn summarize_ablation(cells: Vec<AblationCell>) -> AblationReport {
    let mut rows: Vec<AblationRow> = Vec::new();
    for c in &cells {
        let key = (c.variant, c.duplicate_embeddings, c.n_insertions, c.schedule);
        if rows.iter().any(|r| (r.variant, r.duplicate_embeddings, r.n_insertions, r.schedule) == key) {
            continue;
        }
        let same: Vec<&AblationCell> = cells
            .iter()
            .filter(|o| (o.variant, o.duplicate_embeddings, o.n_insertions, o.schedule) == key)
            .collect();
        let pick = |f: fn(&AblationCell) -> f64| median(&same.iter().map(|c| f(c)).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: c.variant,
            duplicate_embeddings: c.duplicate_embeddings,
            n_insertions: c.n_insertions,
            schedule: c.schedule,
            caption_loss: pick(|c| c.caption_loss),
            caption_exact_match: pick(|c| c.caption_exact_match),
            grounding_iou: pick(|c| c.grounding_iou),
        });
    }

    let loss_where = |f: &dyn Fn(&AblationCell) -> bool| -> f64 {
        median(&cells.iter().filter(|c| f(c)).map(|c| c.caption_loss).collect::<Vec<_>>())
    };
    let mut verdicts = Vec::new();
    let mut compare = |trend: String, better: f64, worse: f64| {
        if better.is_finite() && worse.is_finite() {
            verdicts.push(TrendVerdict {
                trend,
                expected_better: better,
                expected_worse: worse,
                holds: better <= worse,
            });
        }
    };
    let reference = |c: &AblationCell| c.duplicate_embeddings && c.schedule == Schedule::Full;
    let by_variant = |v: Variant| loss_where(&|c| reference(c) && c.variant == v);
    compare("variant C >= variant B".into(), by_variant(Variant::C), by_variant(Variant::B));
    compare("variant B >= variant A".into(), by_variant(Variant::B), by_variant(Variant::A));
    compare(
        "duplication on >= off".into(),
        loss_where(&|c| c.duplicate_embeddings && c.schedule == Schedule::Full),
        loss_where(&|c| !c.duplicate_embeddings && c.schedule == Schedule::Full),
    );
    for (skip, name) in [(Schedule::SkipStage1, "skip stage1"), (Schedule::SkipStage2, "skip stage2")] {
        compare(
            format!("full schedule >= {name}"),
            loss_where(&|c| c.duplicate_embeddings && c.schedule == Schedule::Full),
            loss_where(&|c| c.duplicate_embeddings && c.schedule == skip),
        );
    }
    AblationReport { cells, rows, verdicts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};
    use crate::data::DataConfig;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 512,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 32,
            max_seq_len: 64,
            seed: 4,
        }
    }

    fn data() -> Datasets {
        Datasets::generate(&DataConfig {
            seed: 2,
            n_text: 64,
            n_caption: 64,
            n_instruction: 64,
            n_grounding: 64,
        })
        .unwrap()
    }

    fn short(stage: Stage, steps: usize) -> TrainStageConfig {
        TrainStageConfig {
            steps,
            batch_size: 8,
            ..TrainStageConfig::default_for(stage)
        }
    }

    fn model() -> Model {
        let bb = build_backbone(&tiny()).unwrap();
        Model::with_adaptor(bb, &AdaptorConfig::with_variant(Variant::C, 1, 2).unwrap()).unwrap()
    }

    #[test]
    fn stage_sets_are_enforced() {
        let mut cfg = TrainStageConfig::default_for(Stage::Stage1Pt);
        cfg.validate().unwrap();
        cfg.trainable_modules.push(Module::InnerAdaptor);
        assert!(cfg.validate().is_err());
        let cfg = TrainStageConfig::default_for(Stage::GroundingFt).unfrozen();
        assert!(cfg.trainable_modules.contains(&Module::Backbone));
        cfg.validate().unwrap();
    }

    #[test]
    fn stage1_changes_only_the_projector() {
        let mut m = model();
        let before = m.snapshot();
        run_stage(&mut m, &short(Stage::Stage1Pt, 3), &data(), 8).unwrap();
        for ((name, a), (_, b)) in before.iter().zip(m.snapshot()) {
            let changed = *a != b;
            assert_eq!(changed, name.starts_with("adaptor.projector."), "{name}");
        }
    }

    #[test]
    fn stage_runs_are_deterministic() {
        let d = data();
        let mut a = model();
        let mut b = model();
        let ra = run_stage(&mut a, &short(Stage::Stage2Pt, 3), &d, 8).unwrap();
        let rb = run_stage(&mut b, &short(Stage::Stage2Pt, 3), &d, 8).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(ra.heldout_loss.to_bits(), rb.heldout_loss.to_bits());
        assert!(ra.frozen_unchanged);
    }

    #[test]
    fn zero_step_pretraining_is_a_no_op() {
        let bb = build_backbone(&tiny()).unwrap();
        let hash = bb.freeze_hash();
        let (bb, rep) = train_text_lm(bb, &data().text, &short(Stage::TextPretrain, 0), 8).unwrap();
        assert_eq!(bb.freeze_hash(), hash);
        assert!(rep.stage.losses.is_empty());
    }

    #[test]
    fn pipeline_preserves_text_workflow_and_chains_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        let stages: Vec<_> = [Stage::Stage1Pt, Stage::Stage2Pt, Stage::InstructionFt, Stage::GroundingFt]
            .into_iter()
            .map(|s| short(s, 2))
            .collect();
        let eval = EvalConfig {
            loss_samples: 8,
            caption_samples: 2,
            grounding_samples: 4,
            text_prompts: 2,
            text_decode_tokens: 4,
        };
        let rep = run_pipeline(&mut m, &stages, &data(), &eval, Some(dir.path())).unwrap();
        assert!(rep.nlp_preserved);
        assert_eq!(rep.text_loss_delta, 0.0);
        assert_eq!(rep.checkpoints.len(), 4);
        assert!(rep.checkpoints.iter().all(|p| p.exists()));

        let mut m = model();
        let rep = run_pipeline(&mut m, &unfrozen_pipeline(&stages), &data(), &eval, None).unwrap();
        assert_ne!(rep.backbone_hash_before, rep.backbone_hash_after);
        assert!(!rep.nlp_preserved);
    }

    #[test]
    fn out_of_order_pipeline_rejected() {
        let mut m = model();
        let stages = vec![short(Stage::Stage2Pt, 1), short(Stage::Stage1Pt, 1)];
        assert!(run_pipeline(&mut m, &stages, &data(), &EvalConfig::default(), None).is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
