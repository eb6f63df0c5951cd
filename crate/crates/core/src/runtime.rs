//! Dual-workflow inference: request routing, greedy decoding with a cache
//! spanning backbone and insertion layers, and latency measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accounting::layer_stack_ratio;
use crate::autograd::Graph;
use crate::backbone::TokenId;
use crate::data::GridImage;
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Text,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowRequest {
    pub mode: Mode,
    pub prompt: Vec<TokenId>,
    /// Present exactly when `mode` is multimodal.
    pub image: Option<GridImage>,
    pub max_new_tokens: usize,
    /// Decoding ends after emitting this token.
    pub stop_at: Option<TokenId>,
}

impl WorkflowRequest {
    pub fn text(prompt: Vec<TokenId>, max_new_tokens: usize) -> Self {
        WorkflowRequest {
            mode: Mode::Text,
            prompt,
            image: None,
            max_new_tokens,
            stop_at: None,
        }
    }

    pub fn multimodal(image: GridImage, prompt: Vec<TokenId>, max_new_tokens: usize) -> Self {
        WorkflowRequest {
            mode: Mode::Multimodal,
            prompt,
            image: Some(image),
            max_new_tokens,
            stop_at: None,
        }
    }

    pub fn stop_at(mut self, token: TokenId) -> Self {
        self.stop_at = Some(token);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TextEmbedding,
    Backbone,
    TextHead,
    Encoder,
    Projector,
    MmEmbedding,
    InsertionLayers,
    MmHead,
}

impl Component {
    pub fn in_adaptor(self) -> bool {
        !matches!(self, Component::TextEmbedding | Component::Backbone | Component::TextHead)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkflowPlan {
    pub mode: Mode,
    pub components: Vec<Component>,
}

/// Validates `req` against `model` and lists the components it will touch.
pub fn route(model: &Model, req: &WorkflowRequest) -> Result<WorkflowPlan> {
    if req.prompt.is_empty() {
        return Err(Error::Request("empty prompt".into()));
    }
    let vocab = model.backbone.config.vocab_size;
    if let Some(&t) = req.prompt.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Request(format!("token {t} outside vocabulary of {vocab}")));
    }
    let components = match req.mode {
        Mode::Text => {
            if req.image.is_some() {
                return Err(Error::Request("text-only request carries an image".into()));
            }
            vec![Component::TextEmbedding, Component::Backbone, Component::TextHead]
        }
        Mode::Multimodal => {
            if req.image.is_none() {
                return Err(Error::Request("multimodal request without an image".into()));
            }
            let stack = model.adaptor()?;
            let mut c = vec![Component::Encoder, Component::Projector];
            c.push(if stack.mm_embed.is_some() {
                Component::MmEmbedding
            } else {
                Component::TextEmbedding
            });
            c.push(Component::Backbone);
            if !stack.insertions.is_empty() {
                c.push(Component::InsertionLayers);
            }
            c.push(if stack.mm_head.is_some() {
                Component::MmHead
            } else {
                Component::TextHead
            });
            c
        }
    };
    Ok(WorkflowPlan {
        mode: req.mode,
        components,
    })
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    /// Logits over the whole prompt (image rows included).
    pub prompt_logits: Tensor,
    /// Logits each generated token was chosen from.
    pub step_logits: Vec<Vec<f32>>,
}

fn argmax(row: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn prefix_len(model: &Model, req: &WorkflowRequest) -> Result<usize> {
    let n_img = match (&req.image, req.mode) {
        (Some(im), Mode::Multimodal) => model.adaptor()?.encoder.num_patches(im),
        _ => 0,
    };
    let len = n_img + req.prompt.len() + req.max_new_tokens;
    let max = model.backbone.config.max_seq_len;
    if len > max {
        return Err(Error::SequenceOverflow { len, max });
    }
    Ok(n_img)
}

/// Runs `tokens` through the requested workflow, appending to `cache`.
/// The image is only fed on the first call.
fn step(
    model: &Model,
    req: &WorkflowRequest,
    tokens: &[TokenId],
    with_image: bool,
    pos_offset: usize,
    cache: Option<&mut KvCache>,
) -> Result<Tensor> {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    match req.mode {
        Mode::Text => model.backbone.text_forward(tokens, cache),
        Mode::Multimodal => {
            let stack = model.adaptor()?;
            let mut g = Graph::new();
            let image = req.image.as_ref().filter(|_| with_image);
            let images: Vec<&GridImage> = image.into_iter().collect();
            let out = stack.forward(&model.backbone, &mut g, &images, &ids, 1, pos_offset, cache)?;
            Ok(g.to_tensor(out))
        }
    }
}

fn last_row(t: &Tensor) -> Vec<f32> {
    let c = t.cols();
    t.data()[t.len() - c..].to_vec()
}

fn done(req: &WorkflowRequest, tokens: &[TokenId]) -> bool {
    tokens.len() >= req.max_new_tokens || (req.stop_at.is_some() && tokens.last() == req.stop_at.as_ref())
}

/// Greedy decoding. The prompt fills the cache once; every later step feeds
/// one token through every backbone and insertion layer.
pub fn generate(model: &Model, req: &WorkflowRequest) -> Result<Generation> {
    route(model, req)?;
    let n_img = prefix_len(model, req)?;
    let mut cache = model.new_cache(req.mode == Mode::Multimodal)?;
    let prompt_logits = step(model, req, &req.prompt, true, 0, Some(&mut cache))?;
    let mut tokens = Vec::new();
    let mut step_logits = Vec::new();
    let mut row = last_row(&prompt_logits);
    while !done(req, &tokens) {
        let next = argmax(&row);
        tokens.push(next);
        step_logits.push(row);
        if done(req, &tokens) {
            break;
        }
        let pos = n_img + req.prompt.len() + tokens.len() - 1;
        let out = step(model, req, &[next], false, pos, Some(&mut cache))?;
        debug_assert!(cache.is_coherent());
        row = out.into_data();
    }
    Ok(Generation {
        tokens,
        prompt_logits,
        step_logits,
    })
}

/// Greedy decoding that recomputes the full sequence at every step.
pub fn generate_uncached(model: &Model, req: &WorkflowRequest) -> Result<Generation> {
    route(model, req)?;
    prefix_len(model, req)?;
    let prompt_logits = step(model, req, &req.prompt, true, 0, None)?;
    let mut tokens = Vec::new();
    let mut step_logits = Vec::new();
    let mut row = last_row(&prompt_logits);
    while !done(req, &tokens) {
        let next = argmax(&row);
        tokens.push(next);
        step_logits.push(row);
        if done(req, &tokens) {
            break;
        }
        let mut seq = req.prompt.clone();
        seq.extend_from_slice(&tokens);
        row = last_row(&step(model, req, &seq, true, 0, None)?);
    }
    Ok(Generation {
        tokens,
        prompt_logits,
        step_logits,
    })
}

/// Largest absolute difference across prompt and step logits; infinite when
/// the two generations differ in length.
pub fn max_logit_diff(a: &Generation, b: &Generation) -> f32 {
    if a.step_logits.len() != b.step_logits.len() || a.prompt_logits.len() != b.prompt_logits.len() {
        return f32::INFINITY;
    }
    let rows = a
        .step_logits
        .iter()
        .zip(&b.step_logits)
        .flat_map(|(x, y)| x.iter().zip(y));
    a.prompt_logits
        .data()
        .iter()
        .zip(b.prompt_logits.data())
        .chain(rows)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchWorkload {
    pub requests: usize,
    pub warmup: usize,
    /// Total prompt positions; the multimodal prompt gives up room for the image.
    pub prompt_len: usize,
    pub max_new_tokens: usize,
}

impl Default for BenchWorkload {
    fn default() -> Self {
        BenchWorkload {
            requests: 20,
            warmup: 3,
            prompt_len: 40,
            max_new_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub text_seconds: f64,
    pub multimodal_seconds: f64,
    pub measured_ratio: f64,
    pub analytic_ratio: f64,
    pub n_layers: usize,
    pub n_insertions: usize,
    /// Same layer-stack ratio for a 32-layer model with 8 insertions.
    pub reference_analytic_ratio: f64,
    /// Published wall-clock ratio for that reference model (0.124 s / 0.103 s).
    pub reference_measured_ratio: f64,
}

/// Mean wall time per request of each workflow at equal sequence length.
pub fn bench_latency(model: &Model, workload: &BenchWorkload) -> Result<LatencyReport> {
    let stack = model.adaptor()?;
    let image = GridImage::blank(16, 16);
    let n_img = stack.encoder.num_patches(&image);
    if workload.prompt_len <= n_img || workload.requests == 0 {
        return Err(Error::InvalidArgument(format!(
            "prompt_len must exceed the {n_img} image positions and requests must be positive"
        )));
    }
    let vocab = model.backbone.config.vocab_size as u32;
    let prompt = |len: usize| -> Vec<TokenId> { (0..len as u32).map(|i| 16 + (i * 7) % (vocab - 16)).collect() };
    let text = WorkflowRequest::text(prompt(workload.prompt_len), workload.max_new_tokens);
    let mm = WorkflowRequest::multimodal(image, prompt(workload.prompt_len - n_img), workload.max_new_tokens);
    let time = |req: &WorkflowRequest| -> Result<f64> {
        for _ in 0..workload.warmup {
            generate(model, req)?;
        }
        let start = Instant::now();
        for _ in 0..workload.requests {
            generate(model, req)?;
        }
        Ok(start.elapsed().as_secs_f64() / workload.requests as f64)
    };
    let text_seconds = time(&text)?;
    let multimodal_seconds = time(&mm)?;
    let m = model.backbone.config.n_layers;
    let n = stack.insertions.len();
    Ok(LatencyReport {
        text_seconds,
        multimodal_seconds,
        measured_ratio: multimodal_seconds / text_seconds,
        analytic_ratio: layer_stack_ratio(m, n),
        n_layers: m,
        n_insertions: n,
        reference_analytic_ratio: layer_stack_ratio(32, 8),
        reference_measured_ratio: 0.124 / 0.103,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptor::{AdaptorConfig, Variant};
    use crate::backbone::{build_backbone, BackboneConfig};

    fn model(variant: Variant) -> Model {
        let cfg = BackboneConfig {
            vocab_size: 512,
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            ffn_hidden: 32,
            max_seq_len: 64,
            seed: 5,
        };
        let bb = build_backbone(&cfg).unwrap();
        Model::with_adaptor(bb, &AdaptorConfig::with_variant(variant, 2, 4).unwrap()).unwrap()
    }

    fn image() -> GridImage {
        let mut img = GridImage::blank(16, 16);
        img.pixels[17] = 0.9;
        img
    }

    #[test]
    fn text_plan_touches_no_adaptor_component() {
        let m = model(Variant::C);
        let plan = route(&m, &WorkflowRequest::text(vec![1, 2], 4)).unwrap();
        assert!(plan.components.iter().all(|c| !c.in_adaptor()));
        let plan = route(&m, &WorkflowRequest::multimodal(image(), vec![1], 4)).unwrap();
        assert!(plan.components.contains(&Component::Projector));
        assert!(plan.components.contains(&Component::MmEmbedding));
    }

    #[test]
    fn malformed_requests_rejected() {
        let m = model(Variant::C);
        let mut req = WorkflowRequest::multimodal(image(), vec![1], 4);
        req.image = None;
        assert!(matches!(route(&m, &req), Err(Error::Request(_))));
        let mut req = WorkflowRequest::text(vec![1], 4);
        req.image = Some(image());
        assert!(generate(&m, &req).is_err());
        assert!(generate(&m, &WorkflowRequest::text(vec![], 4)).is_err());
        assert!(matches!(
            generate(&m, &WorkflowRequest::multimodal(image(), vec![1; 40], 10)),
            Err(Error::SequenceOverflow { .. })
        ));
    }

    #[test]
    fn zero_new_tokens_returns_prompt_logits_only() {
        let m = model(Variant::B);
        let g = generate(&m, &WorkflowRequest::multimodal(image(), vec![1, 288, 3], 0)).unwrap();
        assert!(g.tokens.is_empty());
        assert_eq!(g.prompt_logits.rows(), 19);
    }

    #[test]
    fn cached_and_recomputed_decodes_agree() {
        for variant in Variant::ALL {
            let m = model(variant);
            for req in [
                WorkflowRequest::text(vec![1, 8, 20], 30),
                WorkflowRequest::multimodal(image(), vec![1, 288, 3], 30),
            ] {
                let a = generate(&m, &req).unwrap();
                let b = generate_uncached(&m, &req).unwrap();
                assert_eq!(a.tokens, b.tokens);
                assert!(max_logit_diff(&a, &b) < 1e-5);
                assert_eq!(a.tokens, generate(&m, &req).unwrap().tokens);
            }
        }
    }

    #[test]
    fn stop_token_ends_decoding() {
        let m = model(Variant::C);
        let free = generate(&m, &WorkflowRequest::text(vec![1, 8], 12)).unwrap();
        let stop = free.tokens[2];
        let g = generate(&m, &WorkflowRequest::text(vec![1, 8], 12).stop_at(stop)).unwrap();
        let first = free.tokens.iter().position(|&t| t == stop).unwrap();
        assert_eq!(g.tokens, free.tokens[..=first]);
    }
}
