//! Held-out metrics: masked loss, caption exact match, grounding IoU and
//! greedy text outputs.

use crate::autograd::Graph;
use crate::backbone::TokenId;
use crate::data::{decode_boxes, iou, is_single_locate, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::runtime::{generate, WorkflowRequest};
use crate::vocab::EOS;

/// Mean next-token loss over every response position of `samples`,
/// evaluated in batches of `batch_size`.
pub fn heldout_loss(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size) {
        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, chunk)?;
        let n: usize = chunk.iter().map(|s| s.response.len()).sum();
        total += g.value(loss)[0] as f64 * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn request(s: &Sample) -> Result<WorkflowRequest> {
    let image = s
        .image
        .clone()
        .ok_or_else(|| Error::InvalidArgument("metric needs image samples".into()))?;
    Ok(WorkflowRequest::multimodal(image, s.prompt.clone(), s.response.len() + 2).stop_at(EOS))
}

/// Fraction of samples whose greedy response equals the reference exactly.
pub fn exact_match(model: &Model, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut hits = 0;
    for s in samples {
        if generate(model, &request(s)?)?.tokens == s.response {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mean IoU of the first decoded box against the target over single-object
/// grounding samples; an undecodable answer scores 0.
pub fn grounding_iou(model: &Model, samples: &[&Sample]) -> Result<f64> {
    let single: Vec<&&Sample> = samples.iter().filter(|s| is_single_locate(s)).collect();
    if single.is_empty() {
        return Err(Error::InvalidArgument("no single-object grounding samples".into()));
    }
    let mut total = 0.0f64;
    for s in &single {
        let target = s.boxes.as_ref().and_then(|b| b.first()).copied().unwrap_or_default();
        let out = generate(model, &request(s)?)?;
        if let Some(b) = decode_boxes(&out.tokens).first() {
            total += iou(b, &target) as f64;
        }
    }
    Ok(total / single.len() as f64)
}

/// Greedy text-workflow continuations of each prompt.
pub fn text_outputs(model: &Model, prompts: &[Vec<TokenId>], max_new_tokens: usize) -> Result<Vec<Vec<TokenId>>> {
    prompts
        .iter()
        .map(|p| Ok(generate(model, &WorkflowRequest::text(p.clone(), max_new_tokens))?.tokens))
        .collect()
}
