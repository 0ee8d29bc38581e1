//! Datasets: seeded two-moons generation and an IDX (MNIST-style) reader/writer.
//!
//! Every feature produced here lies in the unit box `[0, 1]^d`, which is the
//! valid input region the attacks clamp to.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("two-moons needs an even, positive sample count (got {0})")]
    OddCount(usize),
    #[error("noise must be finite and non-negative (got {0})")]
    BadNoise(f64),
    #[error("empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labelled samples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Tensor,
    y: Vec<usize>,
    classes: usize,
    split: Vec<Split>,
}

/// A minibatch; `x` has shape `(batch, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize, split: Vec<Split>) -> Result<Self> {
        if y.is_empty() {
            return Err(DataError::Empty.into());
        }
        if x.shape().len() != 2 || x.rows() != y.len() || split.len() != y.len() {
            return Err(Error::Length(format!(
                "features {:?}, {} labels, {} split tags",
                x.shape(),
                y.len(),
                split.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Length(format!("label {bad} >= {classes} classes")));
        }
        debug_assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(Self {
            x,
            y,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn split_tags(&self) -> &[Split] {
        &self.split
    }

    /// Samples tagged with `split`, in dataset order.
    pub fn subset(&self, split: Split) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.split[i] == split).collect();
        let batch = self.gather(&idx);
        Dataset::new(batch.x, batch.y, self.classes, vec![split; idx.len()])
    }

    /// First `n` samples (or all of them if fewer).
    pub fn head(&self, n: usize) -> Batch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&idx)
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        Batch {
            x: Tensor::new(vec![indices.len(), d], data).expect("gathered shape"),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.gather(&idx)
    }

    /// One epoch of minibatches in a shuffled order drawn from `rng`.
    pub fn shuffled_batches<R: rand::Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }
}

/// Points on the two interleaved half-circles before any noise or rescaling.
fn two_moons_raw(n: usize) -> Vec<([f64; 2], usize)> {
    let half = n / 2;
    let angle = |i: usize| {
        if half <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (half - 1) as f64
        }
    };
    let outer = (0..half).map(|i| ([angle(i).cos(), angle(i).sin()], 0));
    let inner = (0..half).map(|i| ([1.0 - angle(i).cos(), 0.5 - angle(i).sin()], 1));
    outer.chain(inner).collect()
}

/// Two interleaved half-circles, min-max rescaled into `[0, 1]^2`, with an
/// 80/20 train/test split drawn by a seeded shuffle.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(DataError::OddCount(n).into());
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(DataError::BadNoise(noise).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = two_moons_raw(n);
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("valid normal");
        for (p, _) in points.iter_mut() {
            p[0] += normal.sample(&mut rng);
            p[1] += normal.sample(&mut rng);
        }
    }
    for axis in 0..2 {
        let lo = points.iter().map(|(p, _)| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|(p, _)| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (p, _) in points.iter_mut() {
            p[axis] = if span > 0.0 {
                ((p[axis] - lo) / span).clamp(0.0, 1.0)
            } else {
                0.5
            };
        }
    }
    points.shuffle(&mut rng);
    let n_train = (0.8 * n as f64).round() as usize;
    let split = (0..n)
        .map(|i| if i < n_train { Split::Train } else { Split::Test })
        .collect();
    let data = points.iter().flat_map(|(p, _)| *p).collect();
    let labels = points.iter().map(|(_, l)| *l).collect();
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2, split)
}

fn read_u32(bytes: &[u8], offset: usize) -> std::result::Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Parsed IDX image file: `count` images of `rows x cols` unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<IdxImages, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from decoded IDX contents; pixels are scaled by 1/255.
pub fn idx_to_dataset(images: &IdxImages, labels: &[u8], split: Split) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        }
        .into());
    }
    if images.count == 0 {
        return Err(DataError::Empty.into());
    }
    let d = images.rows * images.cols;
    let data = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Dataset::new(
        Tensor::new(vec![images.count, d], data)?,
        labels.iter().map(|&l| l as usize).collect(),
        classes,
        vec![split; images.count],
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    idx_to_dataset(&images, &labels, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_half_circles() {
        let raw = two_moons_raw(4);
        for ([x, y], label) in raw {
            let r2 = if label == 0 {
                x * x + y * y
            } else {
                (x - 1.0).powi(2) + (y - 0.5).powi(2)
            };
            assert!((r2 - 1.0).abs() < 1e-12, "point ({x},{y}) off circle");
        }
        let ds = gen_two_moons(4, 0.0, 3).unwrap();
        // raw x spans [-1, 2], y spans [0, 0.5]; rescaled extremes hit the box edges
        let xs: Vec<f64> = (0..4).map(|i| ds.features().row(i)[0]).collect();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in sorted.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moons_are_deterministic_and_balanced() {
        let a = gen_two_moons(200, 0.1, 11).unwrap();
        let b = gen_two_moons(200, 0.1, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels().iter().filter(|&&l| l == 0).count(), 100);
        assert!(a.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.subset(Split::Train).unwrap().len(), 160);
        assert_eq!(a.subset(Split::Test).unwrap().len(), 40);
        let c = gen_two_moons(200, 0.1, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn odd_count_rejected() {
        assert!(matches!(
            gen_two_moons(5, 0.1, 0),
            Err(Error::Data(DataError::OddCount(5)))
        ));
    }

    #[test]
    fn header_decode() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend_from_slice(&[0, 255, 128, 1, 2, 3, 4, 5]);
        let images = parse_idx_images(&bytes).unwrap();
        assert_eq!((images.count, images.rows, images.cols), (2, 2, 2));
        let ds = idx_to_dataset(&images, &[0, 1], Split::Train).unwrap();
        assert_eq!(ds.features().shape(), &[2, 4]);
        assert_eq!(ds.features().data()[1], 1.0);
    }

    #[test]
    fn labels_with_image_magic_rejected() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 7];
        assert_eq!(
            parse_idx_labels(&bytes).unwrap_err(),
            DataError::BadMagic {
                expected: IDX_LABELS_MAGIC,
                found: IDX_IMAGES_MAGIC
            }
        );
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2];
        assert_eq!(
            parse_idx_images(&bytes).unwrap_err(),
            DataError::Truncated {
                expected: 24,
                found: 18
            }
        );
        assert!(matches!(
            parse_idx_labels(&[0, 0, 8]),
            Err(DataError::Truncated { .. })
        ));
        let images = IdxImages {
            count: 2,
            rows: 1,
            cols: 1,
            pixels: vec![1, 2],
        };
        assert!(matches!(
            idx_to_dataset(&images, &[0], Split::Train),
            Err(Error::Data(DataError::CountMismatch {
                images: 2,
                labels: 1
            }))
        ));
    }
}
