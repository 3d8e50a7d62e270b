//! MNIST (IDX) and CIFAR-10 (binary batch) readers.
//!
//! Pixels are kept as raw bytes; the only place they are ever transformed is
//! [`crate::quant::quantise_inputs`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bigtensor::IntTensor;
use crate::error::{Error, Result};
use crate::quant::quantise_inputs;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    /// `[channels, height, width]` of every image.
    pub shape: [usize; 3],
    /// One channel-major byte buffer per image.
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
    pub split: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<u8, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Inputs reduced to `b_in` bits, ready for integer inference.
    pub fn int_inputs(&self, b_in: u32) -> Result<Vec<IntTensor>> {
        self.images
            .iter()
            .map(|img| quantise_inputs(img, self.shape.to_vec(), b_in))
            .collect()
    }

    /// Append the samples of `other`, which must have the same image shape.
    pub fn concat(mut self, other: LabeledDataset) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_vec(),
                actual: other.shape.to_vec(),
            });
        }
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        Ok(self)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            reason: format!("header ends before byte {}", offset + 4),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn check_label(index: usize, label: u8) -> Result<u8> {
    if label > 9 {
        return Err(Error::BadLabel { index, label });
    }
    Ok(label)
}

/// Parse an IDX image file and its label file.
pub fn load_mnist(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read(ip)?;
    let lab = read(lp)?;

    check_magic(&img, IDX_IMAGES_MAGIC, ip)?;
    let count = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let pixels = rows * cols;
    let needed = 16 + count * pixels;
    if img.len() < needed {
        return Err(Error::Truncated {
            path: ip.to_path_buf(),
            reason: format!("{} bytes, header promises {needed}", img.len()),
        });
    }

    check_magic(&lab, IDX_LABELS_MAGIC, lp)?;
    let label_count = be_u32(&lab, 4, lp)? as usize;
    if lab.len() < 8 + label_count {
        return Err(Error::Truncated {
            path: lp.to_path_buf(),
            reason: format!("{} bytes, header promises {}", lab.len(), 8 + label_count),
        });
    }
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let images = img[16..needed]
        .chunks_exact(pixels)
        .map(<[u8]>::to_vec)
        .collect();
    let labels = lab[8..8 + count]
        .iter()
        .enumerate()
        .map(|(i, &l)| check_label(i, l))
        .collect::<Result<_>>()?;
    Ok(LabeledDataset {
        shape: [1, rows, cols],
        images,
        labels,
        split: ip.display().to_string(),
    })
}

/// Parse one CIFAR-10 binary batch: records of one label byte followed by
/// 3072 pixel bytes (R plane, G plane, B plane, each 32x32 row-major).
pub fn load_cifar10(batch_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = batch_path.as_ref();
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        labels.push(check_label(i, rec[0])?);
        images.push(rec[1..].to_vec());
    }
    Ok(LabeledDataset {
        shape: [3, 32, 32],
        images,
        labels,
        split: path.display().to_string(),
    })
}

/// Deterministic shuffled prefix of `n` samples.
pub fn subset(ds: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Degenerate("subset of size 0".into()));
    }
    if n > ds.len() {
        return Err(Error::Degenerate(format!(
            "subset of {n} requested from {} samples",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if n < ds.len() {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n);
    }
    let out = LabeledDataset {
        shape: ds.shape,
        images: order.iter().map(|&i| ds.images[i].clone()).collect(),
        labels: order.iter().map(|&i| ds.labels[i]).collect(),
        split: format!("{}[{n}@{seed}]", ds.split),
    };
    log::info!(
        "subset {}: class counts {:?}",
        out.split,
        out.class_counts()
    );
    Ok(out)
}

/// Serialise images in IDX format (inverse of the image half of [`load_mnist`]).
pub fn write_idx_images(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let [_, rows, cols] = ds.shape;
    let mut out = Vec::with_capacity(16 + ds.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in &ds.images {
        out.extend_from_slice(img);
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend_from_slice(&ds.labels);
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_cifar10(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        out.push(l);
        out.extend_from_slice(img);
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_images() -> LabeledDataset {
        LabeledDataset {
            shape: [1, 2, 3],
            images: vec![vec![0, 1, 2, 3, 4, 5], vec![255, 254, 253, 128, 7, 0]],
            labels: vec![3, 9],
            split: "fixture".into(),
        }
    }

    #[test]
    fn subset_is_deterministic() {
        let ds = LabeledDataset {
            shape: [1, 1, 1],
            images: (0..50u8).map(|i| vec![i]).collect(),
            labels: (0..50u8).map(|i| i % 10).collect(),
            split: "s".into(),
        };
        let a = subset(&ds, 10, 7).unwrap();
        let b = subset(&ds, 10, 7).unwrap();
        assert_eq!(a.images, b.images);
        let c = subset(&ds, 10, 8).unwrap();
        assert_ne!(a.images, c.images);
        let all = subset(&ds, 50, 1).unwrap();
        assert_eq!(all.images, ds.images);
        assert!(subset(&ds, 0, 1).is_err());
        assert!(subset(&ds, 51, 1).is_err());
    }

    #[test]
    fn writer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = two_images();
        write_idx_images(dir.path().join("i"), &ds).unwrap();
        write_idx_labels(dir.path().join("l"), &ds).unwrap();
        let back = load_mnist(dir.path().join("i"), dir.path().join("l")).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.shape, ds.shape);
    }

    #[test]
    fn concat_checks_shape() {
        let a = two_images();
        let mut b = two_images();
        b.shape = [1, 3, 2];
        assert!(a.clone().concat(b).is_err());
        assert_eq!(a.clone().concat(a).unwrap().len(), 4);
    }
}
