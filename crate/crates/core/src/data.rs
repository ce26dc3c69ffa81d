//! In-memory labelled image sets and epoch batching.

use alloc::vec::Vec;
use core::ops::Range;


use rand::seq::SliceRandom;

use crate::{Error, Real, Result, SeededRng, Tensor};

/// Images `[N, H, W, 1]` with pixels in `[0, 1]` and digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f32> {
    images: Tensor<T>,
    labels: Vec<u8>,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<u8>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[3] != 1 {
            return Err(Error::InvalidArgument(alloc::format!(
                "images must be [N, H, W, 1], got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::InvalidArgument(alloc::format!("label {bad} outside 0..=9")));
        }
        if images.data().iter().any(|&p| p < T::zero() || p > T::one()) {
            return Err(Error::InvalidArgument("pixel outside [0, 1]".into()));
        }
        Ok(Self { images, labels })
    }

    /// Raw 8-bit pixels (row-major, image after image) scaled by 1/255.
    pub fn from_bytes(rows: usize, cols: usize, pixels: &[u8], labels: Vec<u8>) -> Result<Self> {
        let n = labels.len();
        if pixels.len() != n * rows * cols {
            return Err(Error::ElementCount {
                expected: n * rows * cols,
                actual: pixels.len(),
            });
        }
        let scale = T::lit(255.0);
        let images = Tensor::new(
            [n, rows, cols, 1],
            pixels.iter().map(|&b| T::lit(b as f64) / scale).collect(),
        )?;
        Self::new(images, labels)
    }

    /// Pixels mapped back to bytes; exact for data built by `from_bytes`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.images
            .data()
            .iter()
            .map(|&p| (p.as_f64() * 255.0).round() as u8)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(rows, cols)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        Ok(Self {
            images: self.images.slice_batch(range.start, range.end)?,
            labels: self.labels[range].to_vec(),
        })
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Visiting order for one epoch: identity, or a Fisher-Yates permutation
/// drawn from `rng`.
pub fn epoch_order(n: usize, rng: &mut SeededRng, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// Splits one epoch into batches of `batch_size` indices, keeping the short
/// final batch.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    rng: &mut SeededRng,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    Ok(epoch_order(n, rng, shuffle)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// One epoch of image batches.
pub fn batches<'a, T: Real>(
    ds: &'a Dataset<T>,
    batch_size: usize,
    rng: &mut SeededRng,
    shuffle: bool,
) -> Result<impl Iterator<Item = Tensor<T>> + 'a> {
    let plan = batch_indices(ds.len(), batch_size, rng, shuffle)?;
    Ok(plan.into_iter().map(move |idx| {
        ds.images
            .gather_batch(&idx)
            .expect("indices come from 0..len")
    }))
}
