//! The frozen decoder-only language model and its text-only forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, SeqLayout, Var};
use crate::error::{Error, Result};
use crate::kv_cache::{CacheKey, KvCache, KvEntry};
use crate::tensor::{Parameters, Scalar, Tensor};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 512,
            d_model: 128,
            n_layers: 8,
            n_heads: 4,
            ffn_hidden: 512,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad("head width must be even for rotary encoding".into());
        }
        if self.vocab_size == 0 || self.ffn_hidden == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, ffn_hidden and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters in one decoder layer.
    pub fn layer_params(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 3 * d * self.ffn_hidden + 2 * d
    }

    /// Parameters in the whole backbone: embedding, layers, final norm, head.
    pub fn backbone_params(&self) -> usize {
        2 * self.vocab_size * self.d_model + self.n_layers * self.layer_params() + self.d_model
    }
}

/// One pre-norm decoder layer: causal self-attention then a SiLU-gated
/// feed-forward block, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct LayerWeights<S: Scalar = f32> {
    pub attn_norm: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ffn_norm: Tensor<S>,
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

macro_rules! layer_fields {
    ($self:ident, $f:ident, $prefix:ident, $($field:ident),*) => {
        $( $f(&format!("{}.{}", $prefix, stringify!($field)), &$self.$field); )*
    };
}

macro_rules! layer_fields_mut {
    ($self:ident, $f:ident, $prefix:ident, $($field:ident),*) => {
        $( $f(&format!("{}.{}", $prefix, stringify!($field)), &mut $self.$field); )*
    };
}

impl<S: Scalar> LayerWeights<S> {
    pub fn init(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let h = cfg.ffn_hidden;
        let in_std = 1.0 / (d as f64).sqrt();
        let out_std = in_std / (2.0 * cfg.n_layers as f64).sqrt();
        let down_std = 1.0 / (h as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt();
        LayerWeights {
            attn_norm: Tensor::full(&[d], S::one()),
            wq: Tensor::randn(&[d, d], in_std, rng),
            wk: Tensor::randn(&[d, d], in_std, rng),
            wv: Tensor::randn(&[d, d], in_std, rng),
            wo: Tensor::randn(&[d, d], out_std, rng),
            ffn_norm: Tensor::full(&[d], S::one()),
            w_gate: Tensor::randn(&[d, h], in_std, rng),
            w_up: Tensor::randn(&[d, h], in_std, rng),
            w_down: Tensor::randn(&[h, d], down_std, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        layer_fields!(self, f, prefix, attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        layer_fields_mut!(self, f, prefix, attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.visit_mut("", &mut |_, t| t.set_trainable(on));
    }

    pub fn bytes_eq(&self, other: &LayerWeights<S>) -> bool {
        let mut mine = Vec::new();
        self.visit("", &mut |_, t| mine.push(t.clone()));
        let mut i = 0;
        let mut eq = true;
        other.visit("", &mut |_, t| {
            eq &= mine[i].bytes_eq(t);
            i += 1;
        });
        eq
    }

    pub fn cast<T: Scalar>(&self) -> LayerWeights<T> {
        LayerWeights {
            attn_norm: self.attn_norm.cast(),
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            ffn_norm: self.ffn_norm.cast(),
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
        }
    }
}

/// Applies one decoder layer to `hidden` (`[batch*seq x d]`).
pub fn layer_forward<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    layer: &'a LayerWeights<S>,
    hidden: Var,
    layout: SeqLayout,
    heads: usize,
    cache: Option<&mut KvEntry<S>>,
) -> Result<Var> {
    let (_, d) = g.shape(hidden);
    if d != layer.wq.rows() {
        return Err(Error::shape("layer_forward", &[d], &[layer.wq.rows()]));
    }
    let attn_norm = g.param(&layer.attn_norm);
    let wq = g.param(&layer.wq);
    let wk = g.param(&layer.wk);
    let wv = g.param(&layer.wv);
    let wo = g.param(&layer.wo);
    let normed = g.rms_norm(hidden, attn_norm)?;
    let q = g.matmul(normed, wq)?;
    let k = g.matmul(normed, wk)?;
    let v = g.matmul(normed, wv)?;
    let attn = g.attention(q, k, v, layout, heads, cache)?;
    let attn_out = g.matmul(attn, wo)?;
    let h = g.add(hidden, attn_out)?;

    let ffn_norm = g.param(&layer.ffn_norm);
    let w_gate = g.param(&layer.w_gate);
    let w_up = g.param(&layer.w_up);
    let w_down = g.param(&layer.w_down);
    let normed = g.rms_norm(h, ffn_norm)?;
    let gate = g.matmul(normed, w_gate)?;
    let gate = g.silu(gate);
    let up = g.matmul(normed, w_up)?;
    let act = g.mul(gate, up)?;
    let down = g.matmul(act, w_down)?;
    g.add(h, down)
}

#[derive(Debug, Clone)]
pub struct Backbone<S: Scalar = f32> {
    pub config: BackboneConfig,
    /// Text embedding table `[vocab x d]`.
    pub embed: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_norm: Tensor<S>,
    /// Text head `[d x vocab]`.
    pub head: Tensor<S>,
}

/// Seeded scaled-normal initialization; deterministic for a given config.
pub fn build_backbone(config: &BackboneConfig) -> Result<Backbone<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let embed = Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights::init(config, &mut rng))
        .collect();
    let head = Tensor::randn(&[d, config.vocab_size], 1.0 / (d as f64).sqrt(), &mut rng);
    Ok(Backbone {
        config: config.clone(),
        embed,
        layers,
        final_norm: Tensor::full(&[d], 1.0),
        head,
    })
}

impl<S: Scalar> Backbone<S> {
    pub fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |_, t| t.set_trainable(on));
    }

    pub fn cast<T: Scalar>(&self) -> Backbone<T> {
        Backbone {
            config: self.config.clone(),
            embed: self.embed.cast(),
            layers: self.layers.iter().map(LayerWeights::cast).collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }

    pub fn new_cache(&self) -> KvCache<S> {
        KvCache::new(
            self.config.n_layers,
            0,
            self.config.d_model,
            self.config.max_seq_len,
        )
    }

    /// SHA-256 over the names and bytes of every backbone tensor, including
    /// the text embedding and text head.
    pub fn freeze_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, t| {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Runs the decoder stack over already-embedded rows.
    pub fn run_layers<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        mut x: Var,
        layout: SeqLayout,
        mut cache: Option<&mut KvCache<S>>,
    ) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            let entry = match cache.as_deref_mut() {
                Some(c) => Some(c.entry_mut(CacheKey::Backbone(i))?),
                None => None,
            };
            x = layer_forward(g, layer, x, layout, self.config.n_heads, entry)?;
        }
        Ok(x)
    }

    /// Final norm followed by `head` (`[d x vocab]`).
    pub fn project_logits<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        x: Var,
        head: &'a Tensor<S>,
    ) -> Result<Var> {
        let norm = g.param(&self.final_norm);
        let head = g.param(head);
        let x = g.rms_norm(x, norm)?;
        g.matmul(x, head)
    }

    /// Text-only workflow on a padded batch: `ids` holds `layout.rows()` ids.
    /// Touches only the text embedding, the decoder layers and the text head.
    pub fn text_logits<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        ids: &[usize],
        layout: SeqLayout,
        cache: Option<&mut KvCache<S>>,
    ) -> Result<Var> {
        if ids.len() != layout.rows() {
            return Err(Error::shape("text_logits", &[ids.len()], &[layout.batch, layout.seq]));
        }
        let end = layout.pos_offset + layout.seq;
        if end > self.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                len: end,
                max: self.config.max_seq_len,
            });
        }
        let table = g.param(&self.embed);
        let x = g.embedding(table, ids)?;
        let x = self.run_layers(g, x, layout, cache)?;
        self.project_logits(g, x, &self.head)
    }

    /// Single-sequence text forward returning `[T x vocab]` logits. With a
    /// cache, `tokens` are appended after the cached positions.
    pub fn text_forward(
        &self,
        tokens: &[TokenId],
        cache: Option<&mut KvCache<S>>,
    ) -> Result<Tensor<S>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let offset = cache.as_ref().map_or(0, |c| c.len());
        if let Some(c) = cache.as_ref() {
            c.check_room(tokens.len())?;
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut g = Graph::new();
        let logits = self.text_logits(&mut g, &ids, SeqLayout::single(ids.len(), offset), cache)?;
        Ok(g.to_tensor(logits))
    }
}

impl<S: Scalar> Parameters<S> for Backbone<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f("backbone.embed", &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("backbone.layers.{i}"), f);
        }
        f("backbone.final_norm", &self.final_norm);
        f("backbone.head", &self.head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f("backbone.embed", &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("backbone.layers.{i}"), f);
        }
        f("backbone.final_norm", &mut self.final_norm);
        f("backbone.head", &mut self.head);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 64,
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            ffn_hidden: 32,
            max_seq_len: 32,
            seed: 11,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_backbone(&small()).unwrap();
        let b = build_backbone(&small()).unwrap();
        assert_eq!(a.freeze_hash(), b.freeze_hash());
        let mut other = small();
        other.seed = 12;
        assert_ne!(a.freeze_hash(), build_backbone(&other).unwrap().freeze_hash());
    }

    #[test]
    fn layer_counts_match_closed_form() {
        let cfg = BackboneConfig {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            ..BackboneConfig::default()
        };
        let bb = build_backbone(&cfg).unwrap();
        assert_eq!(bb.layers.len(), 8);
        // 4*128^2 + 3*128*512 + 2*128, written out independently
        let per_layer = 65_536 + 196_608 + 256;
        for l in &bb.layers {
            assert_eq!(l.param_count(), per_layer);
        }
        let total = 512 * 128 * 2 + 8 * per_layer + 128;
        assert_eq!(bb.param_count(), total);
        assert_eq!(cfg.backbone_params(), total);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small();
        c.n_layers = 0;
        assert!(build_backbone(&c).is_err());
    }

    #[test]
    fn empty_prompt_is_error() {
        let bb = build_backbone(&small()).unwrap();
        assert!(bb.text_forward(&[], None).is_err());
    }

    #[test]
    fn overflow_is_error() {
        let bb = build_backbone(&small()).unwrap();
        let long = vec![1u32; 33];
        assert!(matches!(
            bb.text_forward(&long, None),
            Err(Error::SequenceOverflow { .. })
        ));
    }

    #[test]
    fn causal_prefix_unchanged_by_later_tokens() {
        let bb = build_backbone(&small()).unwrap();
        let a = bb.text_forward(&[3, 4, 5, 6, 7, 8], None).unwrap();
        let b = bb.text_forward(&[3, 4, 5, 60, 1, 2], None).unwrap();
        let v = 64;
        assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
        assert_ne!(&a.data()[3 * v..4 * v], &b.data()[3 * v..4 * v]);
    }

    #[test]
    fn single_token_with_empty_cache_matches_full() {
        let bb = build_backbone(&small()).unwrap();
        let full = bb.text_forward(&[9], None).unwrap();
        let mut cache = bb.new_cache();
        let cached = bb.text_forward(&[9], Some(&mut cache)).unwrap();
        assert_eq!(full.data(), cached.data());
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn incremental_matches_full_recompute() {
        let bb = build_backbone(&small()).unwrap();
        let tokens: Vec<u32> = (0..20).map(|i| (i * 7 % 64) as u32).collect();
        let full = bb.text_forward(&tokens, None).unwrap();
        let mut cache = bb.new_cache();
        let mut max_diff = 0.0f32;
        for (t, &tok) in tokens.iter().enumerate() {
            let step = bb.text_forward(&[tok], Some(&mut cache)).unwrap();
            for (a, b) in step.data().iter().zip(&full.data()[t * 64..(t + 1) * 64]) {
                max_diff = max_diff.max((a - b).abs());
            }
        }
        assert!(max_diff < 1e-5, "max diff {max_diff}");
        assert!(cache.is_coherent());
    }
}
