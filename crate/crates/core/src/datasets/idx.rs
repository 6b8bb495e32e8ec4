//! MNIST IDX ingestion.
//!
//! Images: magic `0x00000803`, then `count`, `rows`, `cols` as big-endian
//! `u32`, then `count·rows·cols` pixel bytes. Labels: magic `0x00000801`,
//! `count`, then one byte per label.

use std::path::{Path, PathBuf};

use super::{LabeledDataset, Provenance, Sample};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse {
            offset: offset.min(bytes.len()),
            message: format!("truncated header: missing {what}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    if bytes.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            message: format!("empty {what} file"),
        });
    }
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad {what} magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image/label pair into a grayscale dataset with pixels scaled
/// by `1/255`, `y_given = y_true` and no bias attribute.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    check_magic(images, IMAGES_MAGIC, "images")?;
    let count = be_u32(images, 4, "image count")? as usize;
    let rows = be_u32(images, 8, "row count")? as usize;
    let cols = be_u32(images, 12, "column count")? as usize;
    let pixels = count * rows * cols;
    let body = &images[16..];
    if body.len() < pixels {
        return Err(Error::Parse {
            offset: images.len(),
            message: format!("truncated image payload: need {pixels} bytes after offset 16, found {}", body.len()),
        });
    }

    check_magic(labels, LABELS_MAGIC, "labels")?;
    let label_count = be_u32(labels, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!("label count {label_count} does not match image count {count}"),
        });
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < count {
        return Err(Error::Parse {
            offset: labels.len(),
            message: format!("truncated label payload: need {count} bytes after offset 8, found {}", label_bytes.len()),
        });
    }

    let features = body[..pixels].iter().map(|&p| p as f32 / 255.0).collect();
    let mut samples = Vec::with_capacity(count);
    for (i, &l) in label_bytes[..count].iter().enumerate() {
        let y = l as usize;
        if y >= MNIST_CLASSES {
            return Err(Error::Parse {
                offset: 8 + i,
                message: format!("label {y} outside 0..{MNIST_CLASSES}"),
            });
        }
        samples.push(Sample {
            y_true: y,
            y_given: y,
            bias_index: None,
        });
    }
    LabeledDataset::new(
        MNIST_CLASSES,
        rows * cols,
        features,
        samples,
        0.0,
        Provenance {
            source: "mnist".into(),
            ..Provenance::default()
        },
    )
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::file(p, e));
    parse_idx(&read(images.as_ref())?, &read(labels.as_ref())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn prefix(self) -> &'static str {
        match self {
            MnistSplit::Train => "train",
            MnistSplit::Test => "t10k",
        }
    }
}

/// Loads the standard uncompressed MNIST files from `dir` (or `dir/mnist`).
pub fn load_mnist(dir: impl AsRef<Path>, split: MnistSplit) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let names = |base: &Path| -> (PathBuf, PathBuf) {
        let p = split.prefix();
        (
            base.join(format!("{p}-images-idx3-ubyte")),
            base.join(format!("{p}-labels-idx1-ubyte")),
        )
    };
    let (mut images, mut labels) = names(dir);
    if !images.exists() {
        (images, labels) = names(&dir.join("mnist"));
    }
    let mut ds = load_idx(&images, &labels)?;
    ds.provenance_mut().source = format!("mnist-{}", split.prefix());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    fn pair(n: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = header(IMAGES_MAGIC, &[n, 2, 2]);
        img.extend((0..n * 4).map(|i| (i * 17 % 256) as u8));
        let mut lab = header(LABELS_MAGIC, &[n]);
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn parses_synthetic_pair() {
        let (img, lab) = pair(3);
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.feature_dim(), 4);
        assert_eq!(d.features(1)[0], (4 * 17) as f32 / 255.0);
        assert_eq!(d.sample(2).y_true, 2);
        assert!(d.samples().iter().all(|s| s.clean() && s.bias_index.is_none()));
    }

    #[test]
    fn empty_file_fails_at_offset_zero() {
        let (_, lab) = pair(1);
        assert!(matches!(parse_idx(&[], &lab), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn bad_magic() {
        let (mut img, lab) = pair(1);
        img[3] = 0x01;
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_reports_file_end() {
        let (img, lab) = pair(2);
        let cut = &img[..img.len() - 1];
        match parse_idx(cut, &lab) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_idx(&img[..10], &lab), Err(Error::Parse { offset: 8, .. })));
    }

    #[test]
    fn count_mismatch() {
        let (img, _) = pair(2);
        let (_, lab) = pair(3);
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Parse { offset: 4, .. })));
    }
}
