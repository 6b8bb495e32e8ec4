//! `DNEBMD01` model checkpoint.
//!
//! Framing follows [`crate::container`]. The JSON header is
//!
//! ```json
//! {
//!   "version": 1, "input_dim": D, "class_count": C,
//!   "layers": [
//!     {"in_dim": …, "out_dim": …, "activation": "relu",
//!      "weight": {"offset": …, "len": 4·in·out},   // f32 LE, row-major (in, out)
//!      "bias":   {"offset": …, "len": 4·out}}      // f32 LE
//!   ],
//!   "meta": { … }                                   // free-form run metadata
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, BlobRef, PayloadWriter};
use crate::error::{Error, Result};
use crate::nnkit::{Activation, Dense, Mlp};

pub const MODEL_MAGIC: &[u8; 8] = b"DNEBMD01";

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weight: BlobRef,
    bias: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    input_dim: usize,
    class_count: usize,
    layers: Vec<LayerEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode_model(model: &Mlp, meta: &serde_json::Value) -> Vec<u8> {
    let mut payload = PayloadWriter::default();
    let layers = model
        .layers()
        .iter()
        .map(|l| LayerEntry {
            in_dim: l.in_dim(),
            out_dim: l.out_dim(),
            activation: l.activation(),
            weight: payload.push_f32(l.weight()),
            bias: payload.push_f32(l.bias()),
        })
        .collect();
    let header = Header {
        version: container::FORMAT_VERSION,
        input_dim: model.input_dim(),
        class_count: model.class_count(),
        layers,
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    container::encode(MODEL_MAGIC, &header, &payload.into_bytes())
}

pub fn decode_model(bytes: &[u8]) -> Result<(Mlp, serde_json::Value)> {
    let (header_bytes, payload) = container::decode(bytes, MODEL_MAGIC)?;
    let base = container::payload_base(header_bytes.len());
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Parse {
        offset: 12,
        message: format!("invalid header: {e}"),
    })?;
    container::check_version(header.version)?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for l in header.layers {
        let weight = container::read_f32(container::blob(payload, l.weight, base, 4)?);
        let bias = container::read_f32(container::blob(payload, l.bias, base, 4)?);
        layers.push(Dense::new(l.in_dim, l.out_dim, weight, bias, l.activation)?);
    }
    let model = Mlp::from_layers(layers)?;
    if model.input_dim() != header.input_dim || model.class_count() != header.class_count {
        return Err(Error::Parse {
            offset: 12,
            message: "layer shapes disagree with input_dim/class_count".into(),
        });
    }
    Ok((model, header.meta))
}

pub fn save_model(model: &Mlp, meta: &serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model, meta)).map_err(|e| Error::file(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Mlp, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_model(&bytes)
}
