//! Invariant suite shared by the `verify` command and the acceptance run:
//! analytic gradients against finite differences, zero-gate and copy-init
//! identities, cached against recomputed decoding, and the freeze hash.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::{init_adaptor, AdaptorConfig, AdaptorStack, Variant};
use crate::autograd::{Graph, SeqLayout, Var};
use crate::backbone::{layer_forward, Backbone, TokenId};
use crate::data::{describe_prompt, heldout_split, Datasets, GridImage, Sample, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, sample_coordinates, GradCheckReport, DEFAULT_EPSILON};
use crate::model::Model;
use crate::runtime::{generate, generate_uncached, max_logit_diff, WorkflowRequest};
use crate::tensor::Parameters;
use crate::trainer::{Stage, TrainStageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub grad_coordinates: usize,
    pub grad_tolerance: f64,
    pub grad_epsilon: f64,
    pub grad_batch: usize,
    pub identity_inputs: usize,
    pub identity_tolerance: f64,
    pub decode_tokens: usize,
    pub cache_tolerance: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            grad_coordinates: 100,
            grad_tolerance: 1e-4,
            grad_epsilon: DEFAULT_EPSILON,
            grad_batch: 2,
            identity_inputs: 50,
            identity_tolerance: 1e-6,
            decode_tokens: 64,
            cache_tolerance: 1e-5,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Gradient check of one stage's trainable set.
#[derive(Debug, Clone, Serialize)]
pub struct StageGradCheck {
    pub stage: Stage,
    pub report: GradCheckReport,
    /// Frozen tensors that received a gradient in the backward pass.
    pub frozen_with_grad: Vec<String>,
    /// Trainable tensors the backward pass reached.
    pub tensors_with_grad: usize,
}

impl StageGradCheck {
    pub fn passes(&self, cfg: &VerifyConfig) -> bool {
        self.report.checks.len() >= cfg.grad_coordinates
            && self.report.passes(cfg.grad_tolerance)
            && self.frozen_with_grad.is_empty()
    }

    fn result(&self, cfg: &VerifyConfig) -> CheckResult {
        CheckResult::new(
            format!("gradients/{}", self.stage.name()),
            self.passes(cfg),
            format!(
                "{} coordinates, max rel error {:.3e}, {} trainable tensors reached, {} frozen with gradient",
                self.report.checks.len(),
                self.report.max_rel_error(),
                self.tensors_with_grad,
                self.frozen_with_grad.len()
            ),
        )
    }
}

fn batch_loss_fn<'s>(
    batch: &'s [&'s Sample],
) -> impl for<'a> Fn(&mut Graph<'a, f64>, &'a Model<f64>) -> Result<Var> + 's {
    move |g, m| m.batch_loss(g, batch)
}

/// Checks a 64-bit copy of `model` with `stage`'s modules unfrozen on a
/// held-out batch of that stage's data. The adaptor is rebuilt fresh at the
/// model's layout and its gates are drawn away from zero: a fitted adaptor
/// or a small gate pushes gradients down to the finite-difference noise
/// floor, and the check is about the gradient code, not the weights.
pub fn check_stage_gradients(model: &Model, stage: Stage, data: &Datasets, cfg: &VerifyConfig) -> Result<StageGradCheck> {
    let stage_cfg = TrainStageConfig::default_for(stage);
    let pool = heldout_split(data.get(stage_cfg.data));
    if pool.len() < cfg.grad_batch || cfg.grad_batch == 0 {
        return Err(Error::InvalidArgument(format!(
            "gradient check needs {} {:?} samples",
            cfg.grad_batch, stage_cfg.data
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stage as u64);
    let start = rng.random_range(0..=pool.len() - cfg.grad_batch);
    let batch: Vec<&Sample> = pool[start..start + cfg.grad_batch].to_vec();

    let mut m = match &model.adaptor {
        Some(a) => Model::with_adaptor(model.backbone.clone(), &a.config)?.cast::<f64>(),
        None => model.cast::<f64>(),
    };
    if let Some(a) = &mut m.adaptor {
        for gate in a.insertions.iter_mut().filter_map(|ins| ins.gate.as_mut()) {
            gate.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.25..0.75));
        }
    }
    m.set_trainable_modules(&stage_cfg.trainable_modules);

    let (frozen_with_grad, tensors_with_grad) = {
        let mut g = Graph::new();
        let loss = m.batch_loss(&mut g, &batch)?;
        let grads = g.backward(loss)?;
        let mut frozen = Vec::new();
        let mut reached = 0;
        m.visit(&mut |name, t| match (t.trainable(), grads.get(t.id()).is_some()) {
            (false, true) => frozen.push(name.to_string()),
            (true, true) => reached += 1,
            _ => {}
        });
        (frozen, reached)
    };

    let coords = sample_coordinates(&m, cfg.grad_coordinates, &mut rng);
    let report = check_gradients(&mut m, batch_loss_fn(&batch), &coords, cfg.grad_epsilon)?;
    Ok(StageGradCheck {
        stage,
        report,
        frozen_with_grad,
        tensors_with_grad,
    })
}

/// Stages whose trainable sets the gradient check covers.
pub const GRAD_STAGES: [Stage; 6] = [
    Stage::TextPretrain,
    Stage::Stage1Pt,
    Stage::Stage2Pt,
    Stage::InstructionFt,
    Stage::GroundingFt,
    Stage::UnfrozenBaseline,
];

fn random_image(rng: &mut ChaCha8Rng) -> GridImage {
    let mut img = GridImage::blank(IMAGE_SIDE, IMAGE_SIDE);
    img.pixels.iter_mut().for_each(|p| *p = rng.random());
    img
}

fn random_text(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Multimodal logits through the plain backbone stack with no insertion
/// layers, optionally applying layer `twice` a second time.
fn reference_logits(bb: &Backbone, stack: &AdaptorStack, image: &GridImage, text: &[usize], twice: Option<usize>) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let im = stack.image_tokens(&mut g, image)?;
    let table = g.param(stack.embed_table(bb));
    let t = g.embedding(table, text)?;
    let mut x = g.concat_rows(&[im, t])?;
    let layout = SeqLayout::single(g.shape(x).0, 0);
    for (i, layer) in bb.layers.iter().enumerate() {
        x = layer_forward(&mut g, layer, x, layout, bb.config.n_heads, None)?;
        if twice == Some(i + 1) {
            x = layer_forward(&mut g, layer, x, layout, bb.config.n_heads, None)?;
        }
    }
    let out = bb.project_logits(&mut g, x, stack.head_table(bb))?;
    Ok(g.value(out).to_vec())
}

fn adaptor_logits(bb: &Backbone, stack: &AdaptorStack, image: &GridImage, text: &[usize]) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let out = stack.forward(bb, &mut g, &[image], text, 1, 0, None)?;
    Ok(g.value(out).to_vec())
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    if a.len() != b.len() {
        return f32::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Text lengths leave room for the image inside `max_seq_len`.
fn identity_text_len(bb: &Backbone, stack: &AdaptorStack) -> usize {
    let n_img = stack.encoder.num_patches(&GridImage::blank(IMAGE_SIDE, IMAGE_SIDE));
    bb.config.max_seq_len.saturating_sub(n_img).clamp(1, 24)
}

/// Freshly initialized variants A and B against the insertion-free path.
pub fn check_zero_gate_identity(bb: &Backbone, base: &AdaptorConfig, cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut worst = 0.0f32;
    for variant in [Variant::A, Variant::B] {
        let ac = AdaptorConfig::with_variant(variant, base.depths.len().max(1), bb.config.n_layers)?;
        let ac = AdaptorConfig {
            depths: if base.depths.is_empty() { ac.depths } else { base.depths.clone() },
            ..ac
        };
        let stack = init_adaptor(bb, &ac)?;
        let max_len = identity_text_len(bb, &stack);
        for _ in 0..cfg.identity_inputs {
            let image = random_image(&mut rng);
            let text = random_text(&mut rng, bb.config.vocab_size, max_len);
            let d = max_abs_diff(
                &adaptor_logits(bb, &stack, &image, &text)?,
                &reference_logits(bb, &stack, &image, &text, None)?,
            );
            worst = worst.max(d);
        }
    }
    Ok(CheckResult::new(
        "zero_gate_identity",
        worst <= cfg.identity_tolerance as f32,
        format!("variants A and B, {} inputs each, max abs diff {worst:.3e}", cfg.identity_inputs),
    ))
}

/// Variant C with one insertion at depth k against layer k applied twice,
/// cycling k over every backbone depth.
pub fn check_copy_init_identity(bb: &Backbone, cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let stacks = (1..=bb.config.n_layers)
        .map(|k| {
            init_adaptor(
                bb,
                &AdaptorConfig {
                    variant: Variant::C,
                    depths: vec![k],
                    gate_mode: None,
                    ..AdaptorConfig::default()
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut worst = 0.0f32;
    for i in 0..cfg.identity_inputs {
        let k = i % stacks.len() + 1;
        let stack = &stacks[k - 1];
        let image = random_image(&mut rng);
        let text = random_text(&mut rng, bb.config.vocab_size, identity_text_len(bb, stack));
        let d = max_abs_diff(
            &adaptor_logits(bb, stack, &image, &text)?,
            &reference_logits(bb, stack, &image, &text, Some(k))?,
        );
        worst = worst.max(d);
    }
    Ok(CheckResult::new(
        "copy_init_identity",
        worst <= cfg.identity_tolerance as f32,
        format!("{} inputs over depths 1..={}, max abs diff {worst:.3e}", cfg.identity_inputs, stacks.len()),
    ))
}

/// Greedy decodes of `decode_tokens` tokens in both workflows, cached
/// against full recompute.
pub fn check_kv_cache(model: &Model, label: &str, cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let vocab = model.backbone.config.vocab_size;
    let text_prompt: Vec<TokenId> = (0..8).map(|_| rng.random_range(0..vocab) as TokenId).collect();
    let mut requests = vec![("text", WorkflowRequest::text(text_prompt, cfg.decode_tokens))];
    if model.adaptor.is_some() {
        requests.push((
            "multimodal",
            WorkflowRequest::multimodal(random_image(&mut rng), describe_prompt(), cfg.decode_tokens),
        ));
    }
    let mut passed = true;
    let mut parts = Vec::new();
    for (mode, req) in &requests {
        let cached = generate(model, req)?;
        let full = generate_uncached(model, req)?;
        let diff = max_logit_diff(&cached, &full);
        let same = cached.tokens == full.tokens && cached.tokens.len() == cfg.decode_tokens;
        passed &= same && diff < cfg.cache_tolerance as f32;
        parts.push(format!("{mode}: {} tokens, identical {same}, max diff {diff:.3e}", cached.tokens.len()));
    }
    Ok(CheckResult::new(format!("kv_cache/{label}"), passed, parts.join("; ")))
}

/// A copy of `model`'s backbone with a fresh adaptor of `variant`, laid
/// out like `base`, whose insertion weights and gates are moved off their
/// initial values.
pub fn perturbed_variant(model: &Model, base: &AdaptorConfig, variant: Variant, seed: u64) -> Result<Model> {
    let base = base.clone();
    let ac = AdaptorConfig::with_variant(variant, base.depths.len().max(1), model.backbone.config.n_layers)?;
    let ac = AdaptorConfig {
        depths: if base.depths.is_empty() { ac.depths } else { base.depths },
        duplicate_embeddings: base.duplicate_embeddings,
        ..ac
    };
    let mut m = Model::with_adaptor(model.backbone.clone(), &ac)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(a) = &mut m.adaptor {
        for ins in &mut a.insertions {
            if let Some(gate) = &mut ins.gate {
                gate.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.25..0.75));
            }
            ins.weights.wq.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.02..0.02));
        }
    }
    Ok(m)
}

pub fn check_freeze_hash(model: &Model, expected: &str) -> CheckResult {
    let found = model.backbone.freeze_hash();
    CheckResult::new(
        "freeze_hash",
        found == expected,
        format!("expected {expected}, found {found}"),
    )
}

/// Every check against `model`. The freeze hash is compared when
/// `expected_hash` is given. A text-only model is checked with a fresh `fallback` adaptor attached.
pub fn run_all(
    model: &Model,
    expected_hash: Option<&str>,
    fallback: &AdaptorConfig,
    data: &Datasets,
    cfg: &VerifyConfig,
) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    if let Some(h) = expected_hash {
        report.checks.push(check_freeze_hash(model, h));
    }
    let with_adaptor = match &model.adaptor {
        Some(_) => model.clone(),
        None => Model::with_adaptor(model.backbone.clone(), fallback)?,
    };
    for stage in GRAD_STAGES {
        report.checks.push(check_stage_gradients(&with_adaptor, stage, data, cfg)?.result(cfg));
    }
    let base = with_adaptor.adaptor()?.config.clone();
    report.checks.push(check_zero_gate_identity(&model.backbone, &base, cfg)?);
    report.checks.push(check_copy_init_identity(&model.backbone, cfg)?);
    report.checks.push(check_kv_cache(&with_adaptor, "model", cfg)?);
    for variant in Variant::ALL {
        let m = perturbed_variant(model, &base, variant, cfg.seed ^ variant as u64)?;
        report.checks.push(check_kv_cache(&m, &format!("{variant:?}"), cfg)?);
    }
    Ok(report)
}

/// A few samples of every kind, enough for the gradient checks.
pub fn small_datasets(seed: u64) -> Result<Datasets> {
    Datasets::generate(&crate::data::DataConfig {
        seed,
        n_text: 16,
        n_caption: 16,
        n_instruction: 16,
        n_grounding: 16,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};

    fn small() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 512,
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            ffn_hidden: 32,
            max_seq_len: 100,
            seed: 5,
        }
    }

    fn quick() -> VerifyConfig {
        VerifyConfig {
            grad_coordinates: 30,
            identity_inputs: 6,
            decode_tokens: 12,
            ..VerifyConfig::default()
        }
    }

    #[test]
    fn fresh_model_passes_every_check() {
        let bb = build_backbone(&small()).unwrap();
        let model = Model::with_adaptor(bb, &AdaptorConfig::with_variant(Variant::B, 2, 4).unwrap()).unwrap();
        let hash = model.backbone.freeze_hash();
        let ac = model.adaptor.as_ref().unwrap().config.clone();
        let rep = run_all(&model, Some(&hash), &ac, &small_datasets(3).unwrap(), &quick()).unwrap();
        for c in &rep.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(rep.checks.len(), 1 + GRAD_STAGES.len() + 2 + 4);
    }

    #[test]
    fn stage1_reaches_only_projector() {
        let bb = build_backbone(&small()).unwrap();
        let model = Model::with_adaptor(bb, &AdaptorConfig::with_variant(Variant::A, 2, 4).unwrap()).unwrap();
        let chk = check_stage_gradients(&model, Stage::Stage1Pt, &small_datasets(3).unwrap(), &quick()).unwrap();
        assert_eq!(chk.tensors_with_grad, 4);
        assert!(chk.frozen_with_grad.is_empty());
        assert!(chk.report.checks.iter().all(|c| c.coordinate.tensor.starts_with("adaptor.projector.")));
    }

    #[test]
    fn moved_backbone_fails_freeze_hash() {
        let bb = build_backbone(&small()).unwrap();
        let mut model = Model::text_only(bb);
        let hash = model.backbone.freeze_hash();
        model.backbone.layers[1].w_up.data_mut()[0] += 1e-3;
        assert!(!check_freeze_hash(&model, &hash).passed);
    }

    #[test]
    fn nonzero_gate_breaks_zero_gate_oracle() {
        // the oracle must be able to tell gated output from the plain stack
        let bb = build_backbone(&small()).unwrap();
        let mut stack = init_adaptor(&bb, &AdaptorConfig::with_variant(Variant::B, 2, 4).unwrap()).unwrap();
        stack.insertions[1].gate.as_mut().unwrap().data_mut()[2] = 0.5;
        stack.insertions[1].weights.w_down.data_mut()[0] += 0.5;
        let image = GridImage::blank(IMAGE_SIDE, IMAGE_SIDE);
        let text = [1usize, 288, 3];
        let d = max_abs_diff(
            &adaptor_logits(&bb, &stack, &image, &text).unwrap(),
            &reference_logits(&bb, &stack, &image, &text, None).unwrap(),
        );
        assert!(d > 1e-4);
    }
}
