//! MNIST in the IDX container: big-endian header, then raw bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{QcnnError, Result};
use crate::net::Normalization;
use crate::tensor::{Dims3, Tensor3};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }

    pub fn expected_len(self) -> usize {
        match self {
            Split::Train => 60_000,
            Split::Test => 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, k: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[k * n..(k + 1) * n]
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(QcnnError::Parse {
            offset: bytes.len() as u64,
            message: format!("file ends before the {what} field at byte {offset}"),
        }),
    }
}

fn check_magic(bytes: &[u8], expect: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != expect {
        return Err(QcnnError::Parse { offset: 0, message: format!("magic {magic:#010x}, expected {expect:#010x}") });
    }
    Ok(())
}

fn take_body<'a>(bytes: &'a [u8], header: usize, len: usize) -> Result<&'a [u8]> {
    let end = header + len;
    if bytes.len() < end {
        return Err(QcnnError::Parse {
            offset: bytes.len() as u64,
            message: format!(
                "truncated: {len} data bytes expected after the header, file ends at byte {}",
                bytes.len()
            ),
        });
    }
    if bytes.len() > end {
        return Err(QcnnError::Parse { offset: end as u64, message: "trailing bytes after the data".into() });
    }
    Ok(&bytes[header..end])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(QcnnError::Parse { offset: 8, message: format!("degenerate image size {rows}x{cols}") });
    }
    let body = take_body(bytes, 16, count * rows * cols)?;
    Ok(IdxImages { rows, cols, pixels: body.to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4, "label count")? as usize;
    Ok(take_body(bytes, 8, count)?.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor3>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` items (all of them if `n` is larger).
    pub fn truncate(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }
}

/// Mean and standard deviation of `byte / 255` over every pixel.
pub fn pixel_statistics(images: &IdxImages) -> Normalization {
    let n = images.pixels.len() as f64;
    let mean = images.pixels.iter().map(|&b| b as f64 / 255.0).sum::<f64>() / n;
    let var = images.pixels.iter().map(|&b| (b as f64 / 255.0 - mean).powi(2)).sum::<f64>() / n;
    Normalization { mean, std: var.sqrt() }
}

pub fn build_dataset(images: &IdxImages, labels: &[u8], norm: Normalization) -> Result<Dataset> {
    if images.len() != labels.len() {
        return Err(QcnnError::Parse {
            offset: 4,
            message: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    if let Some((k, l)) = labels.iter().enumerate().find(|(_, l)| **l > 9) {
        return Err(QcnnError::Parse { offset: 8 + k as u64, message: format!("label {l} outside 0..=9") });
    }
    if !(norm.std > 0.0) || !norm.mean.is_finite() {
        return Err(QcnnError::InvalidParameter(format!("unusable normalization {norm:?}")));
    }
    let dims = Dims3::new(images.rows, images.cols, 1);
    let tensors = (0..images.len())
        .map(|k| {
            let px = images.image(k);
            Tensor3::from_fn(dims, |i, j, _| norm.apply(px[i * images.cols + j]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { images: tensors, labels: labels.iter().map(|&l| l as usize).collect() })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| QcnnError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Loads one image/label file pair. `norm` of `None` standardizes with the
/// statistics of these images.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    norm: Option<Normalization>,
) -> Result<(Dataset, Normalization)> {
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    let norm = norm.unwrap_or_else(|| pixel_statistics(&images));
    Ok((build_dataset(&images, &labels, norm)?, norm))
}

pub fn split_paths(dir: impl AsRef<Path>, split: Split) -> (PathBuf, PathBuf) {
    let (i, l) = split.file_names();
    (dir.as_ref().join(i), dir.as_ref().join(l))
}

/// Both splits, normalized with the training-set statistics unless `norm`
/// is given (as when evaluating a saved model).
pub fn load_mnist(dir: impl AsRef<Path>, norm: Option<Normalization>) -> Result<(Dataset, Dataset, Normalization)> {
    let (ti, tl) = split_paths(&dir, Split::Train);
    let (train, norm) = load_idx(ti, tl, norm)?;
    let (ei, el) = split_paths(&dir, Split::Test);
    let (test, _) = load_idx(ei, el, Some(norm))?;
    Ok((train, test, norm))
}
