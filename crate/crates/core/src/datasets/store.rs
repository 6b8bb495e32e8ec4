//! `DNEBDS01` dataset container.
//!
//! Framing follows [`crate::container`]. The JSON header is
//!
//! ```json
//! {
//!   "version": 1, "n": N, "feature_dim": D, "class_count": C,
//!   "eta": 0.1, "alpha": 0.01, "provenance": { ... },
//!   "fields": {
//!     "features":   {"offset": 0, "len": 4·N·D},   // f32 LE, row-major (N, D)
//!     "y_true":     {"offset": …, "len": 4·N},     // i32 LE
//!     "y_given":    {"offset": …, "len": 4·N},     // i32 LE
//!     "bias_index": {"offset": …, "len": 4·N},     // i32 LE, -1 = none
//!     "flags":      {"offset": …, "len": 4·N}      // i32 LE, bit0 aligned, bit1 clean
//!   },
//!   "side_channels": {"name": {"offset": …, "len": 8·k}}   // f64 LE
//! }
//! ```
//!
//! Offsets are relative to the first payload byte. `alpha` is the realized
//! conflict ratio.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Provenance, Sample};
use crate::container::{self, BlobRef, PayloadWriter};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"DNEBDS01";

/// Named per-run vectors stored next to a dataset (sampling distribution,
/// entropy scores, …).
pub type SideChannels = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
struct Fields {
    features: BlobRef,
    y_true: BlobRef,
    y_given: BlobRef,
    bias_index: BlobRef,
    flags: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    n: usize,
    feature_dim: usize,
    class_count: usize,
    eta: f64,
    alpha: f64,
    provenance: Provenance,
    fields: Fields,
    #[serde(default)]
    side_channels: BTreeMap<String, BlobRef>,
}

const FLAG_ALIGNED: i32 = 1;
const FLAG_CLEAN: i32 = 2;

fn flags_of(s: &Sample) -> i32 {
    (if s.aligned() { FLAG_ALIGNED } else { 0 }) | (if s.clean() { FLAG_CLEAN } else { 0 })
}

pub fn encode_container(dataset: &LabeledDataset, side: &SideChannels) -> Vec<u8> {
    let samples = dataset.samples();
    let mut payload = PayloadWriter::default();
    let fields = Fields {
        features: payload.push_f32(dataset.feature_matrix()),
        y_true: payload.push_i32(samples.iter().map(|s| s.y_true as i32)),
        y_given: payload.push_i32(samples.iter().map(|s| s.y_given as i32)),
        bias_index: payload.push_i32(samples.iter().map(|s| s.bias_index.map_or(-1, |b| b as i32))),
        flags: payload.push_i32(samples.iter().map(flags_of)),
    };
    let side_channels = side
        .iter()
        .map(|(k, v)| (k.clone(), payload.push_f64(v)))
        .collect();
    let header = Header {
        version: container::FORMAT_VERSION,
        n: dataset.len(),
        feature_dim: dataset.feature_dim(),
        class_count: dataset.class_count(),
        eta: dataset.eta(),
        alpha: dataset.conflict_ratio(),
        provenance: dataset.provenance().clone(),
        fields,
        side_channels,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    container::encode(DATASET_MAGIC, &header, &payload.into_bytes())
}

pub fn decode_container(bytes: &[u8]) -> Result<(LabeledDataset, SideChannels)> {
    let (header_bytes, payload) = container::decode(bytes, DATASET_MAGIC)?;
    let base = container::payload_base(header_bytes.len());
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Parse {
        offset: 12,
        message: format!("invalid header: {e}"),
    })?;
    container::check_version(header.version)?;

    let n = header.n;
    let i32_field = |r: BlobRef, name: &str| -> Result<Vec<i32>> {
        let v = container::read_i32(container::blob(payload, r, base, 4)?);
        if v.len() != n {
            return Err(Error::Parse {
                offset: base + r.offset,
                message: format!("field {name} holds {} entries, expected {n}", v.len()),
            });
        }
        Ok(v)
    };
    let features = container::read_f32(container::blob(payload, header.fields.features, base, 4)?);
    let y_true = i32_field(header.fields.y_true, "y_true")?;
    let y_given = i32_field(header.fields.y_given, "y_given")?;
    let bias = i32_field(header.fields.bias_index, "bias_index")?;
    let flags = i32_field(header.fields.flags, "flags")?;

    let label = |v: i32, offset: usize| -> Result<usize> {
        usize::try_from(v).map_err(|_| Error::Parse {
            offset,
            message: format!("negative label {v}"),
        })
    };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let off = |r: BlobRef| base + r.offset + 4 * i;
        let s = Sample {
            y_true: label(y_true[i], off(header.fields.y_true))?,
            y_given: label(y_given[i], off(header.fields.y_given))?,
            bias_index: if bias[i] < 0 { None } else { Some(bias[i] as usize) },
        };
        if flags_of(&s) != flags[i] {
            return Err(Error::Parse {
                offset: off(header.fields.flags),
                message: format!("stored flags {} disagree with labels of sample {i}", flags[i]),
            });
        }
        samples.push(s);
    }

    let mut side = SideChannels::new();
    for (name, r) in header.side_channels {
        side.insert(name, container::read_f64(container::blob(payload, r, base, 8)?));
    }
    let ds = LabeledDataset::new(
        header.class_count,
        header.feature_dim,
        features,
        samples,
        header.eta,
        header.provenance,
    )?;
    Ok((ds, side))
}

pub fn save_container(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    save_container_with_side(dataset, &SideChannels::new(), path)
}

pub fn save_container_with_side(dataset: &LabeledDataset, side: &SideChannels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_container(dataset, side)).map_err(|e| Error::file(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    Ok(load_container_with_side(path)?.0)
}

pub fn load_container_with_side(path: impl AsRef<Path>) -> Result<(LabeledDataset, SideChannels)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_container(&bytes)
}
