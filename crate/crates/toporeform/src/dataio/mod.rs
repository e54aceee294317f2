//! Dataset ingestion, seeded batching, and synthetic fixtures.

mod export;
mod idx;
mod synthetic;

pub use export::export_latents;
pub use idx::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, RawImages};
pub use synthetic::{synthetic_clouds, synthetic_digits, CloudKind, BLOB_CENTERS};

use rand::seq::SliceRandom;

use crate::autodiff::Tensor;
use crate::rng::stream_rng;

/// Images are fixed 28x28 single-channel maps.
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic 0x{got:08x}, want 0x{want:08x}")]
    BadMagic { got: u32, want: u32 },
    #[error("file has {got} bytes, want {want}")]
    TruncatedFile { got: usize, want: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// An immutable labeled image set with pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        if images.len() != labels.len() * IMAGE_PIXELS {
            return Err(DataError::DimMismatch(format!(
                "{} labels need {} pixel values, got {}",
                labels.len(),
                labels.len() * IMAGE_PIXELS,
                images.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::LabelOutOfRange { label, classes: class_count });
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::DimMismatch("pixel outside [0,1]".into()));
        }
        Ok(Dataset { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The first `limit` samples (all of them if `limit` is larger).
    pub fn take(&self, limit: usize) -> Dataset {
        let n = limit.min(self.len());
        Dataset {
            images: self.images[..n * IMAGE_PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
        }
    }

    /// Gathers `indices` into a `[b, 1, 28, 28]` tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.label(i));
        }
        let t = Tensor::from_vec(vec![indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data).expect("batch shape");
        (t, labels)
    }

    /// The whole dataset as one batch tensor.
    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.gather(&idx)
    }
}

/// Options applied while converting raw IDX bytes into a dataset.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// The official EMNIST distribution stores transposed glyphs; this flag
    /// flips each image across the main diagonal at load time.
    pub transpose: bool,
}

/// Loads an IDX image/label pair from disk. Pixels are scaled by 1/255 and
/// labels are shifted to the contiguous range `[0, C)` (EMNIST letters
/// 1..=26 become 0..=25; MNIST 0..=9 is untouched).
pub fn load_idx(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Dataset> {
    load_idx_with(images_path, labels_path, LoadOptions::default())
}

pub fn load_idx_with(
    images_path: &std::path::Path,
    labels_path: &std::path::Path,
    options: LoadOptions,
) -> Result<Dataset> {
    let raw_images = parse_idx_images(&std::fs::read(images_path)?)?;
    let raw_labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    dataset_from_raw(raw_images, raw_labels, options)
}

/// Combines parsed image and label payloads into a dataset.
pub fn dataset_from_raw(images: RawImages, labels: Vec<u8>, options: LoadOptions) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(DataError::DimMismatch(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut pixels: Vec<f64> = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    if options.transpose {
        for img in pixels.chunks_mut(IMAGE_PIXELS) {
            for r in 0..IMAGE_SIDE {
                for c in (r + 1)..IMAGE_SIDE {
                    img.swap(r * IMAGE_SIDE + c, c * IMAGE_SIDE + r);
                }
            }
        }
    }
    let min = *labels.iter().min().expect("nonempty") as usize;
    let max = *labels.iter().max().expect("nonempty") as usize;
    let class_count = max - min + 1;
    let shifted: Vec<usize> = labels.iter().map(|&l| l as usize - min).collect();
    Dataset::new(pixels, shifted, class_count)
}

/// Deterministic epoch shuffling derived from `(seed, epoch)`.
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

/// Batch index sets for one epoch: every index exactly once, deterministic
/// order, final batch dropped when it holds fewer than two samples.
pub fn epoch_batches(n: usize, plan: &BatchPlan, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(plan.seed, 0x6261_0000 + epoch as u64));
    order
        .chunks(plan.batch_size.max(1))
        .filter(|chunk| chunk.len() >= 2)
        .map(|chunk| chunk.to_vec())
        .collect()
}

/// Iterator over `(images, labels)` batches of one epoch.
pub fn batches<'d>(
    dataset: &'d Dataset,
    plan: &BatchPlan,
    epoch: usize,
) -> impl Iterator<Item = (Tensor, Vec<usize>)> + 'd {
    epoch_batches(dataset.len(), plan, epoch)
        .into_iter()
        .map(move |idx| dataset.gather(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tiny_dataset(n: usize) -> Dataset {
        synthetic_digits(n, 0)
    }

    #[test]
    fn batch_sizes_partition_the_epoch() {
        let sizes: Vec<usize> = epoch_batches(10, &BatchPlan { seed: 1, batch_size: 4 }, 0)
            .iter()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn short_tail_batch_is_dropped() {
        let sizes: Vec<usize> = epoch_batches(9, &BatchPlan { seed: 1, batch_size: 4 }, 0)
            .iter()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4]);
    }

    #[test]
    fn same_seed_and_epoch_give_identical_order() {
        let plan = BatchPlan { seed: 9, batch_size: 3 };
        assert_eq!(epoch_batches(20, &plan, 5), epoch_batches(20, &plan, 5));
        assert_ne!(epoch_batches(20, &plan, 5), epoch_batches(20, &plan, 6));
    }

    #[test]
    fn epoch_covers_every_index_exactly_once() {
        for epoch in 0..5 {
            let batches = epoch_batches(97, &BatchPlan { seed: 3, batch_size: 16 }, epoch);
            let flat: Vec<usize> = batches.concat();
            let unique: BTreeSet<usize> = flat.iter().copied().collect();
            assert_eq!(unique.len(), flat.len());
            // 97 = 6*16 + 1: the singleton tail is dropped.
            assert_eq!(flat.len(), 96);
            assert!(unique.iter().all(|&i| i < 97));
        }
    }

    #[test]
    fn gather_produces_batch_tensors() {
        let d = tiny_dataset(6);
        let (t, labels) = d.gather(&[1, 4]);
        assert_eq!(t.shape(), &[2, 1, IMAGE_SIDE, IMAGE_SIDE]);
        assert_eq!(labels, vec![1, 4]);
        assert_eq!(&t.data()[..IMAGE_PIXELS], d.image(1));
    }

    #[test]
    fn raw_to_dataset_scales_and_remaps() {
        let mut img = [0u8; IMAGE_PIXELS];
        img[5] = 255;
        img[6] = 51;
        let raw = RawImages { count: 2, pixels: [img, img].concat() };
        // EMNIST-letters style labels 1..=26.
        let ds = dataset_from_raw(raw, vec![1, 26], LoadOptions::default()).unwrap();
        assert_eq!(ds.class_count(), 26);
        assert_eq!(ds.label(0), 0);
        assert_eq!(ds.label(1), 25);
        assert_eq!(ds.image(0)[5], 1.0);
        assert!((ds.image(0)[6] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn count_mismatch_is_a_dim_error() {
        let raw = RawImages { count: 1, pixels: vec![0; IMAGE_PIXELS] };
        assert!(matches!(
            dataset_from_raw(raw, vec![1, 2], LoadOptions::default()),
            Err(DataError::DimMismatch(_))
        ));
    }

    #[test]
    fn transpose_flips_rows_and_columns() {
        let mut img = [0u8; IMAGE_PIXELS];
        img[2 * IMAGE_SIDE + 7] = 255;
        let raw = RawImages { count: 1, pixels: img.to_vec() };
        let ds = dataset_from_raw(raw, vec![0], LoadOptions { transpose: true }).unwrap();
        assert_eq!(ds.image(0)[7 * IMAGE_SIDE + 2], 1.0);
        assert_eq!(ds.image(0)[2 * IMAGE_SIDE + 7], 0.0);
    }
}
