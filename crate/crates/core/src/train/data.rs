//! IDX (MNIST family) and CIFAR-10 binary readers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Idx,
    Cifar10Bin,
}

/// Where the data lives and how to normalize it.
///
/// For `idx`, `train_files` and `test_files` are `[images, labels]`; for
/// `cifar10_bin` they are lists of batch files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    /// Per-channel mean and std applied after scaling bytes to `[0, 1]`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Keep only the first `n` samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

/// Images `(n, c, h, w)` and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if n >= self.len() {
            return Ok(());
        }
        if n == 0 {
            return Err(Error::Data("dataset limit of 0 samples".into()));
        }
        let idx: Vec<usize> = (0..n).collect();
        self.images = self.images.gather_samples(&idx)?;
        self.labels.truncate(n);
        Ok(())
    }

    /// `(v - mean[c]) / std[c]` per channel.
    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let s = self.images.shape();
        if mean.len() != s.c || std.len() != s.c {
            return Err(Error::Config(format!(
                "normalization has {} means and {} stds for {} channels",
                mean.len(),
                std.len(),
                s.c
            )));
        }
        if let Some(bad) = std.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!("normalization std must be positive, got {bad}")));
        }
        let plane = s.plane();
        for (i, v) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let c = i % s.c;
            let (m, sd) = (mean[c], std[c]);
            v.iter_mut().for_each(|p| *p = (*p - m) / sd);
        }
        Ok(())
    }

    pub fn max_label(&self) -> Option<usize> {
        self.labels.iter().copied().max()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_samples(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::Format(format!("{}: truncated IDX header", path.display())));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::Format(format!(
            "{}: IDX magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let sizes: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let body = sizes.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
    if body.and_then(|b| b.checked_add(header)) != Some(bytes.len()) {
        return Err(Error::Format(format!(
            "{}: {} bytes does not match IDX dimensions {sizes:?}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(sizes)
}

/// Images as `(n, 1, rows, cols)` scaled to `[0, 1]`, with labels.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    let dims = idx_header(&img, images_path, IDX_IMAGES, 3)?;
    let ldims = idx_header(&lab, labels_path, IDX_LABELS, 1)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::Data(format!(
            "{} has {n} images but {} has {} labels",
            images_path.display(),
            labels_path.display(),
            ldims[0]
        )));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Data(format!("{}: empty IDX file", images_path.display())));
    }
    let data = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels = lab[8..].iter().map(|&b| b as usize).collect();
    Ok((Tensor::from_vec((n, 1, rows, cols), data)?, labels))
}

/// Concatenation of CIFAR-10 batch files as `(n, 3, 32, 32)` in `[0, 1]`.
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a positive multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("no CIFAR-10 batch files given".into()));
    }
    let n = labels.len();
    Ok((Tensor::from_vec((n, 3, CIFAR_SIDE, CIFAR_SIDE), data)?, labels))
}

impl DatasetSpec {
    fn load_split(&self, files: &[PathBuf], limit: Option<usize>, split: &str) -> Result<Dataset> {
        let (images, labels) = match self.format {
            DatasetFormat::Idx => match files {
                [images, labels] => load_idx(images, labels)?,
                _ => {
                    return Err(Error::Config(format!(
                        "idx {split}_files must be [images, labels], got {} paths",
                        files.len()
                    )))
                }
            },
            DatasetFormat::Cifar10Bin => load_cifar10_bin(files)?,
        };
        let mut ds = Dataset::new(images, labels)?;
        if let Some(n) = limit {
            ds.truncate(n)?;
        }
        ds.normalize(&self.mean, &self.std)?;
        Ok(ds)
    }

    pub fn load_train(&self) -> Result<Dataset> {
        self.load_split(&self.train_files, self.train_limit, "train")
    }

    pub fn load_test(&self) -> Result<Dataset> {
        self.load_split(&self.test_files, self.test_limit, "test")
    }
}

/// Random crop from a zero-padded image (pad 4) plus horizontal flip.
pub fn augment_crop_flip(x: &Tensor, rng: &mut Rng) -> Tensor {
    const PAD: isize = 4;
    let s: Shape = x.shape();
    let (h, w) = (s.h as isize, s.w as isize);
    let mut out = vec![0.0; x.len()];
    for n in 0..s.n {
        let dy = rng.below(2 * PAD as usize + 1) as isize - PAD;
        let dx = rng.below(2 * PAD as usize + 1) as isize - PAD;
        let flip = rng.coin();
        for c in 0..s.c {
            let src = x.plane(n, c);
            let base = (n * s.c + c) * s.plane();
            for y in 0..h {
                let sy = y + dy;
                if !(0..h).contains(&sy) {
                    continue;
                }
                for xx in 0..w {
                    let col = if flip { w - 1 - xx } else { xx };
                    let sx = col + dx;
                    if (0..w).contains(&sx) {
                        out[base + (y * w + xx) as usize] = src[(sy * w + sx) as usize];
                    }
                }
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape as input")
}
