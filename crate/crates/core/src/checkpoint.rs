//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "IAACKPT\0"
//! version    u32 LE
//! header_len u32 LE, then header_len bytes of JSON
//! count      u32 LE, then per tensor:
//!     name_len u32 LE, UTF-8 name
//!     dtype    u8 (0 = f32)
//!     rank     u8, then rank x u32 LE dims
//!     data     row-major little-endian values
//! trailer    32-byte SHA-256 of everything between magic and trailer
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptor::AdaptorConfig;
use crate::backbone::{build_backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Parameters, Scalar};

pub const MAGIC: &[u8; 8] = b"IAACKPT\0";
pub const VERSION: u32 = 1;
const TRAILER: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub step: u64,
    /// Freeze hash of the backbone as it left text pretraining.
    pub backbone_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub backbone: BackboneConfig,
    pub adaptor: Option<AdaptorConfig>,
    pub provenance: Provenance,
}

pub fn to_bytes(model: &Model, provenance: &Provenance) -> Result<Vec<u8>> {
    let header = Header {
        backbone: model.backbone.config.clone(),
        adaptor: model.adaptor.as_ref().map(|a| a.config.clone()),
        provenance: provenance.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let mut tensors = Vec::new();
    model.visit(&mut |name, t| tensors.push((name.to_string(), t.shape().to_vec(), t.to_le_bytes())));
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(f32::DTYPE);
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&data);
    }
    let digest = Sha256::digest(&out[MAGIC.len()..]);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(model: &Model, provenance: &Provenance, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, provenance)?)?;
    Ok(())
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

struct RawTensor<'b> {
    dtype: u8,
    shape: Vec<usize>,
    data: &'b [u8],
}

/// Reads the header and verifies the trailer without touching a model.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    Ok(parse(bytes)?.0)
}

fn parse(bytes: &[u8]) -> Result<(Header, Vec<(String, RawTensor<'_>)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header = r.take(header_len, "header")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = r.take(name_len, "tensor name")?;
        let dtype = r.u8("dtype")?;
        let width = match dtype {
            0 => 4,
            1 => 8,
            other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.take(n * width, "tensor data")?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        tensors.push((name, RawTensor { dtype, shape, data }));
    }
    let body_end = r.pos;
    let trailer = r.take(TRAILER, "trailer")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if Sha256::digest(&bytes[MAGIC.len()..body_end]).as_slice() != trailer {
        return Err(Error::HashMismatch);
    }
    let header: Header = serde_json::from_slice(header).map_err(|e| Error::Format(format!("header: {e}")))?;
    Ok((header, tensors))
}

/// Rebuilds the model described by the header and fills every tensor from
/// the body. All tensors come back frozen.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Header)> {
    let (header, tensors) = parse(bytes)?;
    let backbone = build_backbone(&header.backbone)?;
    let mut model = match &header.adaptor {
        Some(ac) => Model::with_adaptor(backbone, ac)?,
        None => Model::text_only(backbone),
    };
    let mut by_name: HashMap<String, RawTensor> = HashMap::with_capacity(tensors.len());
    for (name, t) in tensors {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    let mut err = None;
    model.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some(raw) = by_name.remove(name) else {
            err = Some(Error::Format(format!("missing tensor `{name}`")));
            return;
        };
        if raw.dtype != f32::DTYPE || raw.shape != t.shape() {
            err = Some(Error::Format(format!(
                "tensor `{name}`: expected f32 {:?}, found dtype {} {:?}",
                t.shape(),
                raw.dtype,
                raw.shape
            )));
            return;
        }
        for (dst, src) in t.data_mut().iter_mut().zip(raw.data.chunks_exact(4)) {
            *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
        }
        t.set_trainable(false);
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{name}`")));
    }
    Ok((model, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Header)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let cfg = BackboneConfig {
            vocab_size: 512,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 32,
            max_seq_len: 40,
            seed: 8,
        };
        let bb = build_backbone(&cfg).unwrap();
        let mut m = Model::with_adaptor(bb, &AdaptorConfig::with_variant(crate::adaptor::Variant::A, 2, 2).unwrap()).unwrap();
        // make the adaptor differ from a fresh init
        m.adaptor.as_mut().unwrap().insertions[0].gate.as_mut().unwrap().data_mut()[3] = 0.25;
        m
    }

    fn prov() -> Provenance {
        Provenance {
            stage: "stage1_pt".into(),
            seed: 3,
            step: 500,
            backbone_hash: "ab".into(),
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let m = model();
        let bytes = to_bytes(&m, &prov()).unwrap();
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(header.provenance, prov());
        assert_eq!(back.snapshot(), m.snapshot());
        assert_eq!(to_bytes(&back, &prov()).unwrap(), bytes);
    }

    #[test]
    fn truncation_detected() {
        let bytes = to_bytes(&model(), &prov()).unwrap();
        for cut in [1, 33, bytes.len() / 2, bytes.len() - 12] {
            assert!(
                matches!(from_bytes(&bytes[..bytes.len() - cut]), Err(Error::Truncated(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn edited_header_fails_hash() {
        let mut bytes = to_bytes(&model(), &prov()).unwrap();
        let text = String::from_utf8_lossy(&bytes).to_string();
        let at = text.find("\"seed\":3").unwrap() + 7;
        bytes[at] = b'4';
        assert!(matches!(from_bytes(&bytes), Err(Error::HashMismatch)));
    }

    #[test]
    fn edited_body_fails_hash() {
        let mut bytes = to_bytes(&model(), &prov()).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::HashMismatch)));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = to_bytes(&model(), &prov()).unwrap();
        bytes[8] = 9;
        assert!(matches!(from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }
}
