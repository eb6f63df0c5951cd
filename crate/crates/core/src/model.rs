//! A frozen-capable backbone paired with an optional adaptor, plus batch
//! loss construction for both workflows.

use serde::{Deserialize, Serialize};

use crate::adaptor::{init_adaptor, AdaptorConfig, AdaptorStack};
use crate::autograd::{Graph, SeqLayout, Var};
use crate::backbone::{Backbone, TokenId};
use crate::data::{GridImage, Sample};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::tensor::{Parameters, Scalar, Tensor};
use crate::vocab::PAD;

/// Groups of tensors that a training stage can unfreeze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Projector,
    /// Insertion layers, gates, multimodal embedding and multimodal head.
    InnerAdaptor,
    /// Text embedding, decoder layers, final norm and text head.
    Backbone,
}

impl Module {
    /// Owning module of a parameter name; `None` for the image encoder.
    pub fn of(name: &str) -> Option<Module> {
        if name.starts_with("backbone.") {
            Some(Module::Backbone)
        } else if name.starts_with("adaptor.projector.") {
            Some(Module::Projector)
        } else if name.starts_with("adaptor.encoder.") {
            None
        } else if name.starts_with("adaptor.") {
            Some(Module::InnerAdaptor)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar = f32> {
    pub backbone: Backbone<S>,
    pub adaptor: Option<AdaptorStack<S>>,
}

impl<S: Scalar> Model<S> {
    pub fn text_only(backbone: Backbone<S>) -> Self {
        Model {
            backbone,
            adaptor: None,
        }
    }

    /// Attaches a fresh adaptor and freezes the backbone.
    pub fn with_adaptor(mut backbone: Backbone<S>, config: &AdaptorConfig) -> Result<Self> {
        backbone.set_trainable(false);
        let adaptor = init_adaptor(&backbone, config)?;
        Ok(Model {
            backbone,
            adaptor: Some(adaptor),
        })
    }

    pub fn adaptor(&self) -> Result<&AdaptorStack<S>> {
        self.adaptor
            .as_ref()
            .ok_or_else(|| Error::Request("model has no adaptor".into()))
    }

    /// Unfreezes exactly the tensors of `modules`; the encoder stays frozen.
    pub fn set_trainable_modules(&mut self, modules: &[Module]) {
        self.visit_mut(&mut |name, t| {
            t.set_trainable(Module::of(name).is_some_and(|m| modules.contains(&m)));
        });
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            backbone: self.backbone.cast(),
            adaptor: self.adaptor.as_ref().map(AdaptorStack::cast),
        }
    }

    /// Names of trainable tensors in visiting order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| {
            if t.trainable() {
                out.push(name.to_string());
            }
        });
        out
    }

    /// Snapshot of every tensor's bytes, keyed by name.
    pub fn snapshot(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.to_le_bytes())));
        out
    }

    pub fn new_cache(&self, multimodal: bool) -> Result<KvCache<S>> {
        if multimodal {
            Ok(self.adaptor()?.new_cache(&self.backbone))
        } else {
            Ok(self.backbone.new_cache())
        }
    }

    /// Mean next-token cross-entropy over response positions of a batch.
    /// Batches are homogeneous: all samples carry an image or none does.
    pub fn batch_loss<'a>(&'a self, g: &mut Graph<'a, S>, batch: &[&Sample]) -> Result<Var> {
        let n_img = match (&self.adaptor, batch.first().and_then(|s| s.image.as_ref())) {
            (Some(a), Some(im)) => a.encoder.num_patches(im),
            _ => 0,
        };
        let packed = PackedBatch::new(batch, n_img)?;
        let logits = if packed.images.is_empty() {
            let layout = SeqLayout {
                batch: batch.len(),
                seq: packed.text_len,
                pos_offset: 0,
            };
            self.backbone.text_logits(g, &packed.inputs, layout, None)?
        } else {
            self.adaptor()?
                .forward(&self.backbone, g, &packed.images, &packed.inputs, batch.len(), 0, None)?
        };
        g.cross_entropy(logits, &packed.targets, &packed.mask)
    }
}

/// Right-padded inputs and shifted targets for a batch. Image rows are
/// never scored.
struct PackedBatch<'s> {
    images: Vec<&'s GridImage>,
    text_len: usize,
    inputs: Vec<usize>,
    /// One target per output row, image rows included.
    targets: Vec<usize>,
    mask: Vec<bool>,
}

impl<'s> PackedBatch<'s> {
    fn new(batch: &[&'s Sample], n_img: usize) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let with_image = batch[0].image.is_some();
        if batch.iter().any(|s| s.image.is_some() != with_image) {
            return Err(Error::InvalidArgument("batch mixes text-only and image samples".into()));
        }
        if batch.iter().any(|s| s.prompt.is_empty() || s.response.is_empty()) {
            return Err(Error::InvalidArgument("sample needs a prompt and a response".into()));
        }
        let images: Vec<_> = batch.iter().filter_map(|s| s.image.as_ref()).collect();
        let text_len = batch
            .iter()
            .map(|s| s.prompt.len() + s.response.len() - 1)
            .max()
            .unwrap_or(0);
        let mut inputs = Vec::with_capacity(batch.len() * text_len);
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for s in batch {
            let tokens: Vec<TokenId> = s.tokens();
            let lm = s.loss_mask();
            let n = tokens.len() - 1;
            inputs.extend(tokens[..n].iter().map(|&t| t as usize));
            inputs.extend(std::iter::repeat_n(PAD as usize, text_len - n));
            if with_image {
                targets.extend(std::iter::repeat_n(0, n_img));
                mask.extend(std::iter::repeat_n(false, n_img));
            }
            targets.extend(tokens[1..].iter().map(|&t| t as usize));
            targets.extend(std::iter::repeat_n(0, text_len - n));
            mask.extend_from_slice(&lm[1..]);
            mask.extend(std::iter::repeat_n(false, text_len - n));
        }
        Ok(PackedBatch {
            images,
            text_len,
            inputs,
            targets,
            mask,
        })
    }
}

impl<S: Scalar> Parameters<S> for Model<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.backbone.visit(f);
        if let Some(a) = &self.adaptor {
            a.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.backbone.visit_mut(f);
        if let Some(a) = &mut self.adaptor {
            a.visit_mut(f);
        }
    }
}
