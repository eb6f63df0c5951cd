//! Inner adaptor: insertion layers copied from backbone layers, optional
//! zero-initialized gates, duplicated multimodal embedding and head, a
//! two-layer projector and a frozen toy image encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SeqLayout, Var};
use crate::backbone::{layer_forward, Backbone, BackboneConfig, LayerWeights};
use crate::data::GridImage;
use crate::error::{Error, Result};
use crate::kv_cache::{CacheKey, KvCache};
use crate::tensor::{Parameters, Scalar, Tensor};

/// How an insertion layer combines with the frozen layer at its depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// `X = fl(X) + G * il(Z)`; `Z` is the previous insertion's output, or
    /// the input of the shallowest insertion's depth.
    A,
    /// `X = fl(X) + G * il(fl(X))`.
    B,
    /// `X = il(fl(X))`, ungated.
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::A, Variant::B, Variant::C];

    pub fn is_gated(self) -> bool {
        self != Variant::C
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Scalar,
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptorConfig {
    pub variant: Variant,
    /// 1-based backbone depths, strictly increasing.
    pub depths: Vec<usize>,
    /// Required for variants A and B, forbidden for C.
    pub gate_mode: Option<GateMode>,
    /// When false the multimodal path reuses the frozen text embedding and head.
    pub duplicate_embeddings: bool,
    pub patch: usize,
    pub feature_width: usize,
    pub encoder_seed: u64,
    pub seed: u64,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        AdaptorConfig {
            variant: Variant::C,
            depths: vec![4, 8],
            gate_mode: None,
            duplicate_embeddings: true,
            patch: 4,
            feature_width: 64,
            encoder_seed: 0x5EED_1A6E,
            seed: 1,
        }
    }
}

impl AdaptorConfig {
    /// Config for `variant` with `n` evenly spaced insertions over `n_layers`
    /// and the default gate mode for gated variants.
    pub fn with_variant(variant: Variant, n: usize, n_layers: usize) -> Result<Self> {
        Ok(AdaptorConfig {
            variant,
            depths: even_depths(n, n_layers)?,
            gate_mode: variant.is_gated().then_some(GateMode::PerChannel),
            ..AdaptorConfig::default()
        })
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        for &d in &self.depths {
            if d == 0 || d > n_layers {
                return Err(Error::DepthOutOfRange {
                    depth: d,
                    max: n_layers,
                });
            }
        }
        if self.depths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DepthOrder(self.depths.clone()));
        }
        match (self.variant.is_gated(), self.gate_mode) {
            (false, Some(_)) => Err(Error::Config("variant C takes no gate".into())),
            (true, None) => Err(Error::Config(format!(
                "variant {:?} requires a gate mode",
                self.variant
            ))),
            _ if self.patch == 0 || self.feature_width == 0 => {
                Err(Error::Config("patch and feature_width must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `n` depths evenly spaced over `1..=n_layers`, the last one at `n_layers`.
pub fn even_depths(n: usize, n_layers: usize) -> Result<Vec<usize>> {
    if n > n_layers {
        return Err(Error::DepthOutOfRange {
            depth: n,
            max: n_layers,
        });
    }
    Ok((1..=n).map(|i| i * n_layers / n).collect())
}

#[derive(Debug, Clone)]
pub struct InsertionLayer<S: Scalar = f32> {
    /// 1-based backbone depth this layer operates at.
    pub depth: usize,
    pub weights: LayerWeights<S>,
    pub gate: Option<Tensor<S>>,
}

#[derive(Debug, Clone)]
pub struct Projector<S: Scalar = f32> {
    /// `[feature_width x d]`
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    /// `[d x d]`
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> Projector<S> {
    /// Biases start nonzero so a blank patch never yields an all-zero
    /// hidden row, where every RMS norm is at its steepest.
    fn init(f: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Projector {
            w1: Tensor::randn(&[f, d], 1.0 / (f as f64).sqrt(), rng),
            b1: Tensor::randn(&[d], std, rng),
            w2: Tensor::randn(&[d, d], std, rng),
            b2: Tensor::randn(&[d], std, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    /// `silu(x W1 + b1) W2 + b2`, one output row per feature row.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, features: Var) -> Result<Var> {
        let (_, f) = g.shape(features);
        if f != self.input_width() {
            return Err(Error::shape("projector", &[f], &[self.input_width()]));
        }
        let w1 = g.param(&self.w1);
        let b1 = g.param(&self.b1);
        let w2 = g.param(&self.w2);
        let b2 = g.param(&self.b2);
        let h = g.matmul(features, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.silu(h);
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f("adaptor.projector.w1", &self.w1);
        f("adaptor.projector.b1", &self.b1);
        f("adaptor.projector.w2", &self.w2);
        f("adaptor.projector.b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f("adaptor.projector.w1", &mut self.w1);
        f("adaptor.projector.b1", &mut self.b1);
        f("adaptor.projector.w2", &mut self.w2);
        f("adaptor.projector.b2", &mut self.b2);
    }

    fn cast<T: Scalar>(&self) -> Projector<T> {
        Projector {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

/// Feature `j` of the position code for grid cell `(row, col)`: the first
/// half of the features encodes the row, the second half the column, each
/// as sin/cos pairs over geometric frequencies.
pub fn position_code(row: usize, col: usize, j: usize, width: usize) -> f64 {
    let half = (width / 2).max(1);
    let (pos, k) = if j < half { (row, j) } else { (col, j - half) };
    let pairs = (half / 2).max(1);
    let freq = 1.0 / 100f64.powf((k / 2) as f64 / pairs as f64);
    let angle = pos as f64 * freq;
    if k % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Fixed random linear map from non-overlapping square patches to features,
/// plus a fixed 2D sinusoidal code of each patch's grid position. Never
/// trainable.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder<S: Scalar = f32> {
    pub patch: usize,
    /// `[patch*patch x feature_width]`
    pub proj: Tensor<S>,
}

impl<S: Scalar> ToyImageEncoder<S> {
    pub fn new(patch: usize, feature_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = patch * patch;
        ToyImageEncoder {
            patch,
            proj: Tensor::randn(&[pixels, feature_width], 1.0 / (pixels as f64).sqrt(), &mut rng),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.proj.cols()
    }

    pub fn num_patches(&self, image: &GridImage) -> usize {
        (image.width / self.patch) * (image.height / self.patch)
    }

    /// Patches in raster order, each flattened row-major, then projected.
    /// Returns `[P x feature_width]`.
    pub fn encode(&self, image: &GridImage) -> Result<Tensor<S>> {
        let p = self.patch;
        if !image.width.is_multiple_of(p) || !image.height.is_multiple_of(p) || image.pixels.len() != image.width * image.height {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} not divisible into {p}x{p} patches",
                image.width, image.height
            )));
        }
        let (pw, ph) = (image.width / p, image.height / p);
        let mut patches = Vec::with_capacity(pw * ph * p * p);
        for py in 0..ph {
            for px in 0..pw {
                for y in 0..p {
                    for x in 0..p {
                        patches.push(S::from_f64(image.get(px * p + x, py * p + y) as f64));
                    }
                }
            }
        }
        let f = self.feature_width();
        let mut out = vec![S::zero(); pw * ph * f];
        S::gemm(pw * ph, p * p, f, &patches, false, self.proj.data(), false, &mut out, S::zero());
        for (i, row) in out.chunks_mut(f).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += S::from_f64(position_code(i / pw, i % pw, j, f));
            }
        }
        Tensor::from_vec(&[pw * ph, f], out)
    }
}

#[derive(Debug, Clone)]
pub struct AdaptorStack<S: Scalar = f32> {
    pub config: AdaptorConfig,
    /// Sorted by depth.
    pub insertions: Vec<InsertionLayer<S>>,
    /// Multimodal embedding `[vocab x d]`; `None` reuses the text embedding.
    pub mm_embed: Option<Tensor<S>>,
    /// Multimodal head `[d x vocab]`; `None` reuses the text head.
    pub mm_head: Option<Tensor<S>>,
    pub projector: Projector<S>,
    pub encoder: ToyImageEncoder<S>,
}

/// Builds an adaptor over `backbone`. Insertion layers, the multimodal
/// embedding and the multimodal head start as exact copies; gates start at
/// zero. Every adaptor tensor except the encoder is marked trainable.
pub fn init_adaptor<S: Scalar>(backbone: &Backbone<S>, config: &AdaptorConfig) -> Result<AdaptorStack<S>> {
    let bc = &backbone.config;
    config.validate(bc.n_layers)?;
    let d = bc.d_model;
    let insertions = config
        .depths
        .iter()
        .map(|&depth| {
            let mut weights = backbone.layers[depth - 1].clone();
            weights.set_trainable(true);
            let gate = config.gate_mode.map(|mode| {
                let width = match mode {
                    GateMode::Scalar => 1,
                    GateMode::PerChannel => d,
                };
                let mut t = Tensor::zeros(&[width]);
                t.set_trainable(true);
                t
            });
            InsertionLayer { depth, weights, gate }
        })
        .collect();
    let copy = |t: &Tensor<S>| {
        let mut c = t.clone();
        c.zero_grad();
        c.set_trainable(true);
        c
    };
    let (mm_embed, mm_head) = if config.duplicate_embeddings {
        (Some(copy(&backbone.embed)), Some(copy(&backbone.head)))
    } else {
        (None, None)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut projector = Projector::init(config.feature_width, d, &mut rng);
    projector.visit_mut(&mut |_, t| t.set_trainable(true));
    Ok(AdaptorStack {
        config: config.clone(),
        insertions,
        mm_embed,
        mm_head,
        projector,
        encoder: ToyImageEncoder::new(config.patch, config.feature_width, config.encoder_seed),
    })
}

impl<S: Scalar> AdaptorStack<S> {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn depths(&self) -> Vec<usize> {
        self.insertions.iter().map(|i| i.depth).collect()
    }

    pub fn cast<T: Scalar>(&self) -> AdaptorStack<T> {
        AdaptorStack {
            config: self.config.clone(),
            insertions: self
                .insertions
                .iter()
                .map(|i| InsertionLayer {
                    depth: i.depth,
                    weights: i.weights.cast(),
                    gate: i.gate.as_ref().map(Tensor::cast),
                })
                .collect(),
            mm_embed: self.mm_embed.as_ref().map(Tensor::cast),
            mm_head: self.mm_head.as_ref().map(Tensor::cast),
            projector: self.projector.cast(),
            encoder: ToyImageEncoder {
                patch: self.encoder.patch,
                proj: self.encoder.proj.cast(),
            },
        }
    }

    pub fn embed_table<'a>(&'a self, backbone: &'a Backbone<S>) -> &'a Tensor<S> {
        self.mm_embed.as_ref().unwrap_or(&backbone.embed)
    }

    pub fn head_table<'a>(&'a self, backbone: &'a Backbone<S>) -> &'a Tensor<S> {
        self.mm_head.as_ref().unwrap_or(&backbone.head)
    }

    /// Cache with one entry per backbone layer and per insertion layer.
    pub fn new_cache(&self, backbone: &Backbone<S>) -> KvCache<S> {
        let c = &backbone.config;
        KvCache::new(c.n_layers, self.insertions.len(), c.d_model, c.max_seq_len)
    }

    /// Image tokens `[P x d]` for one image.
    pub fn image_tokens<'a>(&'a self, g: &mut Graph<'a, S>, image: &GridImage) -> Result<Var> {
        let feats = self.encoder.encode(image)?;
        let (r, c) = (feats.rows(), feats.cols());
        let x = g.constant(feats.into_data(), r, c)?;
        self.projector.forward(g, x)
    }

    /// Multimodal logits for a right-padded batch. Each sequence is the
    /// image's tokens followed by its `text.len() / batch` text ids. Pass no
    /// images to continue a cached decode with text only.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &'a self,
        backbone: &'a Backbone<S>,
        g: &mut Graph<'a, S>,
        images: &[&GridImage],
        text: &[usize],
        batch: usize,
        pos_offset: usize,
        mut cache: Option<&mut KvCache<S>>,
    ) -> Result<Var> {
        if batch == 0 || !text.len().is_multiple_of(batch) {
            return Err(Error::InvalidArgument(format!(
                "{} text ids do not split into {batch} sequences",
                text.len()
            )));
        }
        if !images.is_empty() && images.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "{} images for a batch of {batch}",
                images.len()
            )));
        }
        let text_len = text.len() / batch;
        let n_img = images.first().map_or(0, |im| self.encoder.num_patches(im));
        let seq = n_img + text_len;
        if seq == 0 {
            return Err(Error::InvalidArgument("empty multimodal input".into()));
        }
        let end = pos_offset + seq;
        if end > backbone.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                len: end,
                max: backbone.config.max_seq_len,
            });
        }
        if let Some(c) = cache.as_deref() {
            if c.len() != pos_offset || c.n_insertions() != self.insertions.len() {
                return Err(Error::InvalidArgument("cache does not match this request".into()));
            }
        }

        let table = g.param(self.embed_table(backbone));
        let text_rows = if text_len > 0 { Some(g.embedding(table, text)?) } else { None };
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            if let Some(im) = images.get(b) {
                if self.encoder.num_patches(im) != n_img {
                    return Err(Error::InvalidArgument("images in a batch must share a size".into()));
                }
                parts.push(self.image_tokens(g, im)?);
            }
            if let Some(t) = text_rows {
                parts.push(if batch == 1 { t } else { g.slice_rows(t, b * text_len, text_len)? });
            }
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };

        let layout = SeqLayout {
            batch,
            seq,
            pos_offset,
        };
        let heads = backbone.config.n_heads;
        let variant = self.variant();
        let mut next = 0;
        let mut stream: Option<Var> = None;
        for (i, layer) in backbone.layers.iter().enumerate() {
            let x_in = x;
            let entry = match cache.as_deref_mut() {
                Some(c) => Some(c.entry_mut(CacheKey::Backbone(i))?),
                None => None,
            };
            let frozen = layer_forward(g, layer, x_in, layout, heads, entry)?;
            x = frozen;
            let Some(ins) = self.insertions.get(next).filter(|ins| ins.depth == i + 1) else {
                continue;
            };
            let entry = match cache.as_deref_mut() {
                Some(c) => Some(c.entry_mut(CacheKey::Insertion(next))?),
                None => None,
            };
            let input = match variant {
                Variant::A => stream.unwrap_or(x_in),
                Variant::B | Variant::C => frozen,
            };
            let out = layer_forward(g, &ins.weights, input, layout, heads, entry)?;
            x = match (&ins.gate, variant) {
                (_, Variant::C) => out,
                (Some(gate), _) => {
                    let gv = g.param(gate);
                    let gated = g.mul_broadcast(out, gv)?;
                    g.add(frozen, gated)?
                }
                (None, _) => return Err(Error::Config("gated variant without a gate".into())),
            };
            stream = Some(out);
            next += 1;
        }
        backbone.project_logits(g, x, self.head_table(backbone))
    }
}

impl<S: Scalar> Parameters<S> for AdaptorStack<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        for (j, ins) in self.insertions.iter().enumerate() {
            let prefix = format!("adaptor.insertions.{j}");
            ins.weights.visit(&prefix, f);
            if let Some(gate) = &ins.gate {
                f(&format!("{prefix}.gate"), gate);
            }
        }
        if let Some(t) = &self.mm_embed {
            f("adaptor.mm_embed", t);
        }
        if let Some(t) = &self.mm_head {
            f("adaptor.mm_head", t);
        }
        self.projector.visit(f);
        f("adaptor.encoder.proj", &self.encoder.proj);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for (j, ins) in self.insertions.iter_mut().enumerate() {
            let prefix = format!("adaptor.insertions.{j}");
            ins.weights.visit_mut(&prefix, f);
            if let Some(gate) = &mut ins.gate {
                f(&format!("{prefix}.gate"), gate);
            }
        }
        if let Some(t) = &mut self.mm_embed {
            f("adaptor.mm_embed", t);
        }
        if let Some(t) = &mut self.mm_head {
            f("adaptor.mm_head", t);
        }
        self.projector.visit_mut(f);
        f("adaptor.encoder.proj", &mut self.encoder.proj);
    }
}

/// Closed-form trainable parameter count of an adaptor over `bc`.
pub fn adaptor_trainable_params(bc: &BackboneConfig, ac: &AdaptorConfig) -> usize {
    let d = bc.d_model;
    let gate = match ac.gate_mode {
        None => 0,
        Some(GateMode::Scalar) => 1,
        Some(GateMode::PerChannel) => d,
    };
    let dup = if ac.duplicate_embeddings { 2 * bc.vocab_size * d } else { 0 };
    let projector = ac.feature_width * d + d + d * d + d;
    ac.depths.len() * (bc.layer_params() + gate) + dup + projector
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_backbone;

    fn small() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 512,
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            ffn_hidden: 32,
            max_seq_len: 48,
            seed: 3,
        }
    }

    fn image() -> GridImage {
        let mut img = GridImage::blank(16, 16);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = ((i * 37) % 101) as f32 / 100.0;
        }
        img
    }

    #[test]
    fn even_depths_end_at_top() {
        assert_eq!(even_depths(2, 8).unwrap(), vec![4, 8]);
        assert_eq!(even_depths(1, 8).unwrap(), vec![8]);
        assert_eq!(even_depths(4, 8).unwrap(), vec![2, 4, 6, 8]);
        assert!(even_depths(0, 8).unwrap().is_empty());
        assert!(even_depths(9, 8).is_err());
    }

    #[test]
    fn insertions_copy_their_depth() {
        let cfg = BackboneConfig::default();
        let bb = build_backbone(&cfg).unwrap();
        let stack = init_adaptor(&bb, &AdaptorConfig::default()).unwrap();
        assert!(stack.insertions[0].weights.bytes_eq(&bb.layers[3]));
        assert!(stack.insertions[1].weights.bytes_eq(&bb.layers[7]));
        assert!(!stack.insertions[0].weights.bytes_eq(&bb.layers[4]));
        assert!(stack.mm_embed.as_ref().unwrap().bytes_eq(&bb.embed));
        assert!(stack.mm_head.as_ref().unwrap().bytes_eq(&bb.head));
        for ins in &stack.insertions {
            assert_eq!(ins.weights.param_count(), bb.layers[0].param_count());
        }
    }

    #[test]
    fn bad_depths_and_gate_modes_rejected() {
        let bb = build_backbone(&small()).unwrap();
        let mk = |depths: Vec<usize>, variant, gate_mode| AdaptorConfig {
            variant,
            depths,
            gate_mode,
            ..AdaptorConfig::default()
        };
        assert!(matches!(
            init_adaptor(&bb, &mk(vec![5], Variant::C, None)),
            Err(Error::DepthOutOfRange { .. })
        ));
        assert!(matches!(
            init_adaptor(&bb, &mk(vec![2, 2], Variant::C, None)),
            Err(Error::DepthOrder(_))
        ));
        assert!(init_adaptor(&bb, &mk(vec![2], Variant::C, Some(GateMode::Scalar))).is_err());
        assert!(init_adaptor(&bb, &mk(vec![2], Variant::A, None)).is_err());
    }

    #[test]
    fn trainable_count_matches_closed_form() {
        let bc = BackboneConfig::default();
        let bb = build_backbone(&bc).unwrap();
        for (variant, mode, dup) in [
            (Variant::C, None, true),
            (Variant::A, Some(GateMode::PerChannel), true),
            (Variant::B, Some(GateMode::Scalar), false),
        ] {
            let ac = AdaptorConfig {
                variant,
                gate_mode: mode,
                duplicate_embeddings: dup,
                ..AdaptorConfig::default()
            };
            let stack = init_adaptor(&bb, &ac).unwrap();
            // 2 * 262_400 layer params, gates, 2 * 512 * 128 tables, 64*128 + 128 + 128*128 + 128
            let gates = match mode {
                None => 0,
                Some(GateMode::Scalar) => 2,
                Some(GateMode::PerChannel) => 256,
            };
            let tables = if dup { 131_072 } else { 0 };
            let expected = 524_800 + gates + tables + 24_832;
            assert_eq!(stack.trainable_count(), expected);
            assert_eq!(adaptor_trainable_params(&bc, &ac), expected);
        }
    }

    #[test]
    fn encoder_shapes_and_position_code() {
        let enc = ToyImageEncoder::<f32>::new(4, 64, 1);
        let f = enc.encode(&image()).unwrap();
        assert_eq!(f.shape(), &[16, 64]);
        assert_eq!(f.data(), enc.encode(&image()).unwrap().data());
        // a blank image encodes to the position code alone
        let blank = enc.encode(&GridImage::blank(16, 16)).unwrap();
        for (i, row) in blank.data().chunks(64).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, position_code(i / 4, i % 4, j, 64) as f32);
            }
        }
        // every cell gets its own code
        let rows: Vec<&[f32]> = blank.data().chunks(64).collect();
        for a in 0..16 {
            for b in a + 1..16 {
                assert!(rows[a].iter().zip(rows[b]).any(|(x, y)| (x - y).abs() > 0.1), "{a} {b}");
            }
        }
        // the pixel part stays linear
        let img = image();
        let mut doubled = img.clone();
        doubled.pixels.iter_mut().for_each(|p| *p *= 2.0);
        let d = enc.encode(&doubled).unwrap();
        for ((&x2, &x), &b) in d.data().iter().zip(f.data()).zip(blank.data()) {
            assert!((x2 - b - 2.0 * (x - b)).abs() < 1e-5);
        }
        assert!(enc.encode(&GridImage::blank(15, 16)).is_err());
    }

    #[test]
    fn projector_zero_features_give_bias_path() {
        let bb = build_backbone(&small()).unwrap();
        let mut stack = init_adaptor(&bb, &AdaptorConfig::with_variant(Variant::C, 2, 4).unwrap()).unwrap();
        stack.projector.b1.data_mut().iter_mut().for_each(|v| *v = 0.3);
        stack.projector.b2.data_mut().iter_mut().for_each(|v| *v = -0.1);
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 16 * 64], 16, 64).unwrap();
        let out = stack.projector.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out), (16, 16));
        // every row equals silu(b1) W2 + b2
        let silu = 0.3f32 / (1.0 + (-0.3f32).exp());
        let w2 = stack.projector.w2.data();
        let vals = g.value(out);
        for r in 0..16 {
            for c in 0..16 {
                let expect: f32 = (0..16).map(|k| silu * w2[k * 16 + c]).sum::<f32>() - 0.1;
                assert!((vals[r * 16 + c] - expect).abs() < 1e-5);
            }
        }
        let bad = g.constant(vec![0.0; 16 * 8], 16, 8).unwrap();
        assert!(stack.projector.forward(&mut g, bad).is_err());
    }

    fn logits(bb: &Backbone, stack: &AdaptorStack, text: &[usize]) -> Vec<f32> {
        let img = image();
        let mut g = Graph::new();
        let out = stack.forward(bb, &mut g, &[&img], text, 1, 0, None).unwrap();
        g.value(out).to_vec()
    }

    /// Same sequence through the plain backbone stack.
    fn plain(bb: &Backbone, stack: &AdaptorStack, text: &[usize], twice: Option<usize>) -> Vec<f32> {
        let img = image();
        let mut g = Graph::new();
        let im = stack.image_tokens(&mut g, &img).unwrap();
        let table = g.param(stack.embed_table(bb));
        let t = g.embedding(table, text).unwrap();
        let mut x = g.concat_rows(&[im, t]).unwrap();
        let layout = SeqLayout::single(16 + text.len(), 0);
        for (i, l) in bb.layers.iter().enumerate() {
            x = layer_forward(&mut g, l, x, layout, bb.config.n_heads, None).unwrap();
            if twice == Some(i + 1) {
                x = layer_forward(&mut g, l, x, layout, bb.config.n_heads, None).unwrap();
            }
        }
        let out = bb.project_logits(&mut g, x, stack.head_table(bb)).unwrap();
        g.value(out).to_vec()
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn zero_gates_reduce_to_backbone() {
        let bb = build_backbone(&small()).unwrap();
        let text = [1usize, 288, 3, 256, 260];
        for variant in [Variant::A, Variant::B] {
            let stack = init_adaptor(&bb, &AdaptorConfig::with_variant(variant, 2, 4).unwrap()).unwrap();
            assert!(max_diff(&logits(&bb, &stack, &text), &plain(&bb, &stack, &text, None)) < 1e-6);
        }
    }

    #[test]
    fn copied_insertion_equals_layer_applied_twice() {
        let bb = build_backbone(&small()).unwrap();
        let text = [1usize, 288, 3];
        for k in 1..=4 {
            let ac = AdaptorConfig {
                depths: vec![k],
                ..AdaptorConfig::default()
            };
            let stack = init_adaptor(&bb, &ac).unwrap();
            assert!(max_diff(&logits(&bb, &stack, &text), &plain(&bb, &stack, &text, Some(k))) < 1e-6);
        }
    }

    #[test]
    fn nonzero_gate_changes_output() {
        let bb = build_backbone(&small()).unwrap();
        let mut stack = init_adaptor(&bb, &AdaptorConfig::with_variant(Variant::A, 2, 4).unwrap()).unwrap();
        let text = [1usize, 288, 3];
        let before = logits(&bb, &stack, &text);
        stack.insertions[0].gate.as_mut().unwrap().data_mut()[0] = 0.5;
        assert!(max_diff(&before, &logits(&bb, &stack, &text)) > 1e-4);
    }

    #[test]
    fn batched_rows_match_single_sequences() {
        let bb = build_backbone(&small()).unwrap();
        let stack = init_adaptor(&bb, &AdaptorConfig::with_variant(Variant::B, 2, 4).unwrap()).unwrap();
        let img = image();
        let blank = GridImage::blank(16, 16);
        let a = [1usize, 288, 3];
        let b = [1usize, 289, 3];
        let mut g = Graph::new();
        let out = stack.forward(&bb, &mut g, &[&img, &blank], &[a, b].concat(), 2, 0, None).unwrap();
        let v = bb.config.vocab_size;
        let rows = 19 * v;
        let batched = g.value(out).to_vec();
        let single_a = logits(&bb, &stack, &a);
        assert!(max_diff(&batched[..rows], &single_a) < 1e-5);
        let mut g2 = Graph::new();
        let out_b = stack.forward(&bb, &mut g2, &[&blank], &b, 1, 0, None).unwrap();
        assert!(max_diff(&batched[rows..], g2.value(out_b)) < 1e-5);
    }

    #[test]
    fn cached_decode_matches_full_for_every_variant() {
        let bb = build_backbone(&small()).unwrap();
        let img = image();
        let text: Vec<usize> = vec![1, 288, 3, 256, 260, 264, 2, 7];
        for variant in Variant::ALL {
            let mut stack = init_adaptor(&bb, &AdaptorConfig::with_variant(variant, 2, 4).unwrap()).unwrap();
            for ins in &mut stack.insertions {
                if let Some(gt) = &mut ins.gate {
                    gt.data_mut().iter_mut().for_each(|v| *v = 0.7);
                }
                ins.weights.wq.data_mut()[0] += 0.5;
            }
            let full = logits(&bb, &stack, &text);
            let mut cache = stack.new_cache(&bb);
            let mut g = Graph::new();
            let first = stack.forward(&bb, &mut g, &[&img], &text[..3], 1, 0, Some(&mut cache)).unwrap();
            let mut got = g.value(first).to_vec();
            for (t, &tok) in text.iter().enumerate().skip(3) {
                let mut g = Graph::new();
                let out = stack.forward(&bb, &mut g, &[], &[tok], 1, 16 + t, Some(&mut cache)).unwrap();
                got.extend_from_slice(g.value(out));
                assert!(cache.is_coherent());
            }
            assert_eq!(got.len(), full.len());
            assert!(max_diff(&got, &full) < 1e-5, "{variant:?}");
            assert_eq!(cache.len(), 16 + text.len());
        }
    }
}
