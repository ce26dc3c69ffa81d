//! IDX files, the big-endian container of the MNIST distribution.
//!
//! Images: magic `0x00000803`, then `N`, rows, cols as `u32`, then
//! `N * rows * cols` unsigned bytes. Labels: magic `0x00000801`, `N`, then
//! `N` bytes. Gzip-compressed files are detected by their header and
//! decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use vae_core::data::Dataset;

use crate::error::{Error, IoContext, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, image after image.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Length {
            what,
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &'static str) -> Result<()> {
    let actual = be_u32(bytes, 0, what)?;
    if actual != expected {
        return Err(Error::Format {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    const WHAT: &str = "idx images";
    check_magic(bytes, IMAGES_MAGIC, WHAT)?;
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Length {
            what: WHAT,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    const WHAT: &str = "idx labels";
    check_magic(bytes, LABELS_MAGIC, WHAT)?;
    let n = be_u32(bytes, 4, WHAT)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Length {
            what: WHAT,
            expected: 8 + n,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// File contents, gunzipped when they start with the gzip header.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).at(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).at(path)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn dataset_from_idx(images: &IdxImages, labels: Vec<u8>) -> Result<Dataset<f32>> {
    if images.count() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.count(),
            labels.len()
        )));
    }
    Ok(Dataset::from_bytes(images.rows, images.cols, &images.pixels, labels)?)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset<f32>> {
    let images = parse_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_labels(&read_maybe_gz(labels_path)?)?;
    dataset_from_idx(&images, labels)
}

/// Serializes a dataset back to `(images, labels)` IDX bytes.
pub fn dataset_to_idx(ds: &Dataset<f32>) -> (Vec<u8>, Vec<u8>) {
    let (rows, cols) = ds.image_size();
    (encode_images(rows, cols, &ds.to_bytes()), encode_labels(ds.labels()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    /// Canonical file names `(images, labels)`, without compression suffix.
    pub fn file_names(self) -> [String; 2] {
        let p = self.prefix();
        [format!("{p}-images-idx3-ubyte"), format!("{p}-labels-idx1-ubyte")]
    }
}

fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    [plain.clone(), gz]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Io {
            path: plain,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (also tried .gz)"),
        })
}

/// Loads a split from the standard MNIST file names in `dir`, plain or
/// gzipped.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset<f32>> {
    let [images, labels] = split.file_names();
    load_idx(&locate(dir, &images)?, &locate(dir, &labels)?)
}
