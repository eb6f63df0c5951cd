//! Exact multiply-accumulate and parameter-byte accounting.
//!
//! MAC counts cover matrix products only (projections, attention scores,
//! attention-weighted values, feed-forward, encoder, projector, head).
//! Norms, activations and softmax are not counted.

use serde::Serialize;

use crate::adaptor::AdaptorConfig;
use crate::backbone::BackboneConfig;
use crate::data::IMAGE_SIDE;
use crate::model::Model;
use crate::tensor::{Parameters, Scalar};

/// `(M + N) / M`.
pub fn layer_stack_ratio(n_layers: usize, n_insertions: usize) -> f64 {
    (n_layers + n_insertions) as f64 / n_layers as f64
}

/// MACs of one decoder layer over a causal sequence of `seq_len` positions.
pub fn layer_macs(cfg: &BackboneConfig, seq_len: usize) -> u64 {
    let (t, d, f) = (seq_len as u64, cfg.d_model as u64, cfg.ffn_hidden as u64);
    // position i attends to i + 1 keys, once for scores and once for values
    let attention = d * t * (t + 1);
    4 * t * d * d + 3 * t * d * f + attention
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub seq_len: usize,
    pub n_layers: usize,
    pub n_insertions: usize,
    pub backbone_stack_macs: u64,
    pub insertion_macs: u64,
    pub encoder_macs: u64,
    pub projector_macs: u64,
    pub head_macs: u64,
    /// `(backbone + insertions) / backbone` over the layer stack.
    pub layer_stack_ratio: f64,
}

/// Multimodal forward cost over `seq_len` positions, the first of which are
/// the image's patch tokens.
pub fn flops_report(cfg: &BackboneConfig, adaptor: &AdaptorConfig, seq_len: usize) -> FlopsReport {
    let per_layer = layer_macs(cfg, seq_len);
    let m = cfg.n_layers as u64;
    let n = adaptor.depths.len() as u64;
    let patches = ((IMAGE_SIDE / adaptor.patch.max(1)) as u64).pow(2);
    let (d, f) = (cfg.d_model as u64, adaptor.feature_width as u64);
    let backbone = m * per_layer;
    let insertions = n * per_layer;
    FlopsReport {
        seq_len,
        n_layers: cfg.n_layers,
        n_insertions: adaptor.depths.len(),
        backbone_stack_macs: backbone,
        insertion_macs: insertions,
        encoder_macs: patches * (adaptor.patch as u64).pow(2) * f,
        projector_macs: patches * (f * d + d * d),
        head_macs: seq_len as u64 * d * cfg.vocab_size as u64,
        layer_stack_ratio: (backbone + insertions) as f64 / backbone as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub bytes_per_param: usize,
    pub backbone_bytes: usize,
    pub stack_bytes: usize,
    /// One backbone serving both workflows plus the adaptor.
    pub shared_bytes: usize,
    /// A text model plus a standalone multimodal model that carries its own
    /// backbone copy and the adaptor.
    pub naive_bytes: usize,
    pub savings_bytes: usize,
}

pub fn memory_report<S: Scalar>(model: &Model<S>) -> MemoryReport {
    let width = std::mem::size_of::<S>();
    let backbone = model.backbone.param_count() * width;
    let stack = model.adaptor.as_ref().map_or(0, |a| a.param_count()) * width;
    let shared = backbone + stack;
    let naive = 2 * backbone + stack;
    MemoryReport {
        bytes_per_param: width,
        backbone_bytes: backbone,
        stack_bytes: stack,
        shared_bytes: shared,
        naive_bytes: naive,
        savings_bytes: naive - shared,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_backbone;

    #[test]
    fn ratio_for_two_of_eight() {
        let cfg = BackboneConfig::default();
        let r = flops_report(&cfg, &AdaptorConfig::default(), 40);
        assert_eq!(r.layer_stack_ratio, 1.25);
        assert_eq!(r.insertion_macs * 4, r.backbone_stack_macs);
        let none = AdaptorConfig {
            depths: vec![],
            ..AdaptorConfig::default()
        };
        assert_eq!(flops_report(&cfg, &none, 40).layer_stack_ratio, 1.0);
        assert_eq!(layer_stack_ratio(32, 8), 1.25);
    }

    #[test]
    fn layer_macs_by_hand() {
        let cfg = BackboneConfig {
            d_model: 2,
            ffn_hidden: 3,
            ..BackboneConfig::default()
        };
        // T=2: projections 4*2*4, ffn 3*2*2*3, scores and values (1+2)*2 each
        assert_eq!(layer_macs(&cfg, 2), 32 + 36 + 6 + 6);
    }

    #[test]
    fn default_memory_matches_hand_count() {
        let bb = build_backbone(&BackboneConfig::default()).unwrap();
        let model = Model::with_adaptor(bb, &AdaptorConfig::default()).unwrap();
        let rep = memory_report(&model);
        // backbone: 2*512*128 + 8*262_400 + 128
        let backbone = 131_072 + 2_099_200 + 128;
        // stack: 2 layers, 2 tables, projector, encoder 16*64
        let stack = 524_800 + 131_072 + 24_832 + 1_024;
        assert_eq!(rep.backbone_bytes, backbone * 4);
        assert_eq!(rep.stack_bytes, stack * 4);
        assert_eq!(rep.shared_bytes, rep.backbone_bytes + rep.stack_bytes);
        assert_eq!(rep.savings_bytes, rep.backbone_bytes);
    }
}
