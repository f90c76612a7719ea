//! Labeled image datasets: MNIST IDX files, CIFAR-10 binary batches and a
//! seeded synthetic coarse/fine generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images stored contiguously as `C×H×W` floats in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    num_classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], num_classes: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::invalid(format!(
                "{} pixels do not hold {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            shape,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let per: usize = self.shape.iter().product();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Image `i` as a `1×C×H×W` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.shape;
        Tensor::new(vec![1, c, h, w], self.pixels(i).to_vec()).expect("dataset shape")
    }

    pub fn images(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    /// First `n` samples (all of them if `n >= len`).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per: usize = self.shape.iter().product();
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Horizontal flip and zero-padded random crop of a `1×C×H×W` image.
pub fn augment(img: &Tensor, flip: bool, crop_pad: usize, rng: &mut impl Rng) -> Tensor {
    let s = img.shape();
    let (h, w) = (s[2], s[3]);
    let do_flip = flip && rng.random_bool(0.5);
    let (dy, dx) = if crop_pad > 0 {
        (
            rng.random_range(0..=2 * crop_pad) as isize - crop_pad as isize,
            rng.random_range(0..=2 * crop_pad) as isize - crop_pad as isize,
        )
    } else {
        (0, 0)
    };
    let src = img.data();
    Tensor::from_fn(s, |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = i / (w * h);
        let sx = if do_flip { w - 1 - x } else { x } as isize + dx;
        let sy = y as isize + dy;
        if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
            0.0
        } else {
            src[(ch * h + sy as usize) * w + sx as usize]
        }
    })
}

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Parses an IDX3 image file. Returns `(count, rows, cols, pixels/255)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0803 {
        return Err(format_err(path, 0, format!("bad magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated: {n} images of {rows}x{cols} need {need} bytes"),
        ));
    }
    let pixels = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX1 label file, checking every label is below `num_classes`.
pub fn parse_idx_labels(bytes: &[u8], path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0801 {
        return Err(format_err(path, 0, format!("bad magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(format_err(path, bytes.len(), format!("truncated: {n} labels need {} bytes", 8 + n)));
    }
    bytes[8..8 + n]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < num_classes {
                Ok(b as usize)
            } else {
                Err(format_err(path, 8 + i, format!("label {b} out of range")))
            }
        })
        .collect()
}

fn load_idx_pair(dir: &Path, images: &str, labels: &str, limit: Option<usize>) -> Result<Dataset> {
    let ipath = dir.join(images);
    let lpath = dir.join(labels);
    let (n, rows, cols, pixels) = parse_idx_images(&read(&ipath)?, &ipath)?;
    let labels = parse_idx_labels(&read(&lpath)?, &lpath, 10)?;
    if labels.len() != n {
        return Err(format_err(&lpath, 4, format!("{} labels for {n} images", labels.len())));
    }
    let ds = Dataset::new([1, rows, cols], 10, pixels, labels)?;
    Ok(match limit {
        Some(l) => ds.truncated(l),
        None => ds,
    })
}

/// Reads the four standard MNIST files from `dir`.
pub fn load_mnist(dir: &Path, train_limit: Option<usize>, eval_limit: Option<usize>) -> Result<Splits> {
    Ok(Splits {
        train: load_idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", train_limit)?,
        eval: load_idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", eval_limit)?,
    })
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses one CIFAR-10 binary batch (`<label byte><3072 pixel bytes>` records).
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(format_err(path, offset, "truncated record"));
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(format_err(path, r * CIFAR_RECORD, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_cifar_files(files: &[PathBuf], limit: Option<usize>) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = parse_cifar_batch(&read(f)?, f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let ds = Dataset::new([3, 32, 32], 10, pixels, labels)?;
    Ok(match limit {
        Some(l) => ds.truncated(l),
        None => ds,
    })
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, train_limit: Option<usize>, eval_limit: Option<usize>) -> Result<Splits> {
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    Ok(Splits {
        train: load_cifar_files(&train, train_limit)?,
        eval: load_cifar_files(&[dir.join("test_batch.bin")], eval_limit)?,
    })
}

// ---------------------------------------------------------------------------
// Synthetic coarse/fine images
// ---------------------------------------------------------------------------

/// Seeded generator of single-channel images with a two-level class structure.
///
/// Every coarse group is an elongated blob at its own orientation, clearly
/// visible at low resolution. The first `fine_groups` groups hold two classes
/// each, told apart only by the orientation of a period-2 stripe texture
/// inside the blob; a 2× average-pool erases that texture. Remaining classes
/// are singleton groups and are easy from the coarse shape alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_fine_groups")]
    pub fine_groups: usize,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
}

fn default_fine_groups() -> usize {
    2
}

fn default_train_size() -> usize {
    1200
}

fn default_eval_size() -> usize {
    600
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 6,
            clusters_per_class: 2,
            image_size: 12,
            noise: 0.1,
            seed: 0,
            fine_groups: default_fine_groups(),
            train_size: default_train_size(),
            eval_size: default_eval_size(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Cluster {
    angle: f64,
    cy: f64,
    cx: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.clusters_per_class == 0 || self.image_size < 4 || !self.image_size.is_multiple_of(2) {
            return Err(Error::Config(
                "synthetic: need >= 2 classes, >= 1 cluster, even image_size >= 4".into(),
            ));
        }
        if 2 * self.fine_groups > self.num_classes {
            return Err(Error::Config(format!(
                "synthetic: {} fine groups need {} classes",
                self.fine_groups,
                2 * self.fine_groups
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("synthetic: noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn num_coarse_groups(&self) -> usize {
        self.num_classes - self.fine_groups
    }

    /// `(coarse group, fine index)` of a class.
    pub fn class_structure(&self, class: usize) -> (usize, Option<usize>) {
        if class < 2 * self.fine_groups {
            (class / 2, Some(class % 2))
        } else {
            (class - self.fine_groups, None)
        }
    }

    /// Train and eval splits; deterministic in `seed`.
    pub fn generate(&self) -> Result<Splits> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let groups = self.num_coarse_groups();
        let s = self.image_size as f64;
        // clusters are per coarse group so fine siblings share the same shapes
        let clusters: Vec<Vec<Cluster>> = (0..groups)
            .map(|g| {
                let base = std::f64::consts::PI * g as f64 / groups as f64;
                (0..self.clusters_per_class)
                    .map(|_| Cluster {
                        angle: base + rng.random_range(-0.08..0.08),
                        cy: (s - 1.0) / 2.0 + rng.random_range(-0.1 * s..0.1 * s),
                        cx: (s - 1.0) / 2.0 + rng.random_range(-0.1 * s..0.1 * s),
                    })
                    .collect()
            })
            .collect();
        let train = self.sample(&clusters, self.train_size, &mut rng)?;
        let eval = self.sample(&clusters, self.eval_size, &mut rng)?;
        Ok(Splits { train, eval })
    }

    fn sample(&self, clusters: &[Vec<Cluster>], count: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let n = self.image_size;
        let s = n as f64;
        let noise = Normal::new(0.0, self.noise.max(1e-12)).expect("valid std");
        let mut pixels = Vec::with_capacity(count * n * n);
        let mut labels = Vec::with_capacity(count);
        let (major, minor) = (0.32 * s, 0.12 * s);
        for i in 0..count {
            let class = i % self.num_classes;
            let (group, fine) = self.class_structure(class);
            let c = clusters[group][rng.random_range(0..self.clusters_per_class)];
            let angle = c.angle + rng.random_range(-0.05..0.05);
            let (cy, cx) = (c.cy + rng.random_range(-0.5..0.5), c.cx + rng.random_range(-0.5..0.5));
            let (sin, cos) = angle.sin_cos();
            let amp = rng.random_range(0.2..0.35);
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let u = dx * cos + dy * sin;
                    let v = -dx * sin + dy * cos;
                    let shape = (-0.5 * ((u / major).powi(2) + (v / minor).powi(2))).exp();
                    let stripe = match fine {
                        Some(0) => if y % 2 == 0 { 1.0 } else { -1.0 },
                        Some(_) => if x % 2 == 0 { 1.0 } else { -1.0 },
                        None => 0.0,
                    };
                    let mut p = shape * (0.6 + amp * stripe);
                    if self.noise > 0.0 {
                        p += noise.sample(rng);
                    }
                    pixels.push(p.clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
        Dataset::new([1, n, n], self.num_classes, pixels, labels)
    }
}
