use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FopError, Result};
use crate::tensor::{Mat, Rng};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × d`, values in `[0, 1]`.
    pub inputs: Mat,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Mat, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(FopError::Config("dataset is empty".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(FopError::CountMismatch { images: inputs.rows(), labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(FopError::LabelOutOfRange { label, classes });
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Gathers the rows `idx` into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Mat, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Mat::from_parts(idx.len(), d, data), labels)
    }

    /// The first `n` examples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (inputs, labels) = self.batch(&idx);
        Dataset { inputs, labels, classes: self.classes }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_idx(path: &Path, magic: u32, header_len: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(FopError::IdxTruncated { path: path.into(), expected: header_len, found: bytes.len() });
    }
    let found = read_u32(&bytes, 0);
    if found != magic {
        return Err(FopError::IdxFormat {
            path: path.into(),
            msg: format!("magic number {found}, expected {magic}"),
        });
    }
    if bytes.len() < header_len {
        return Err(FopError::IdxTruncated { path: path.into(), expected: header_len, found: bytes.len() });
    }
    Ok(bytes)
}

/// Reads an IDX image/label pair; pixels are scaled by `1/255`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images, IMAGES_MAGIC, 16)?;
    let (n, rows, cols) = (read_u32(&img, 4) as usize, read_u32(&img, 8) as usize, read_u32(&img, 12) as usize);
    let d = rows * cols;
    let need = 16 + n * d;
    if img.len() < need {
        return Err(FopError::IdxTruncated { path: images.into(), expected: need, found: img.len() });
    }
    let lab = read_idx(labels, LABELS_MAGIC, 8)?;
    let m = read_u32(&lab, 4) as usize;
    if lab.len() < 8 + m {
        return Err(FopError::IdxTruncated { path: labels.into(), expected: 8 + m, found: lab.len() });
    }
    if n != m {
        return Err(FopError::CountMismatch { images: n, labels: m });
    }
    let data = img[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels = lab[8..8 + m].iter().map(|&b| usize::from(b)).collect();
    Dataset::new(Mat::from_parts(n, d, data), labels, MNIST_CLASSES)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let d = rows * cols;
    if d == 0 || pixels.len() % d != 0 {
        return Err(FopError::Contract(format!("{} pixels do not split into {rows}x{cols} images", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, (pixels.len() / d) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Directory holding the four MNIST IDX files, taken from `FOP_DATA_DIR`.
pub fn mnist_dir_from_env() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("FOP_DATA_DIR")?);
    MNIST_FILES.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

/// `(train, test)` from a directory with the standard MNIST file names.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let f = |i: usize| dir.join(MNIST_FILES[i]);
    Ok((load_idx(&f(0), &f(1))?, load_idx(&f(2), &f(3))?))
}

/// Parameters of the offline stand-in for MNIST.
///
/// Each class is a mixture of Gaussian blobs in a low-dimensional latent
/// space, so class boundaries are not linear. Latent points are mapped into
/// pixel space by a fixed random linear embedding, perturbed with pixel noise
/// and clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub dim: usize,
    pub classes: usize,
    pub latent: usize,
    /// Blobs per class.
    pub modes: usize,
    /// Spread of class centres relative to the within-class spread.
    pub separation: f64,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 10_000,
            test: 2_000,
            dim: 784,
            classes: 10,
            latent: 16,
            modes: 4,
            separation: 2.0,
            pixel_noise: 0.1,
            seed: 0,
        }
    }
}

/// `(train, test)` drawn from the same class-conditional distribution.
pub fn synthetic_blobs(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.dim == 0 || spec.latent == 0 || spec.modes == 0 || spec.train == 0 || spec.test == 0 {
        return Err(FopError::Config(format!("invalid synthetic dataset spec {spec:?}")));
    }
    let mut rng = Rng::new(spec.seed);
    let mut shape_rng = rng.fork(0);
    let q = spec.latent;
    let centres: Vec<f64> = (0..spec.classes * spec.modes * q).map(|_| spec.separation * shape_rng.normal()).collect();
    let embed_scale = 0.25 / (q as f64).sqrt();
    let embed: Vec<f64> = (0..spec.dim * q).map(|_| embed_scale * shape_rng.normal()).collect();
    let bias: Vec<f64> = (0..spec.dim).map(|_| shape_rng.uniform_range(0.3, 0.7)).collect();

    let draw = |n: usize, rng: &mut Rng| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        let mut z = vec![0.0; q];
        for _ in 0..n {
            let c = rng.below(spec.classes);
            let blob = c * spec.modes + rng.below(spec.modes);
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = centres[blob * q + j] + rng.normal();
            }
            for (p, b) in bias.iter().enumerate() {
                let e = &embed[p * q..(p + 1) * q];
                let v = b + e.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + spec.pixel_noise * rng.normal();
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(c);
        }
        Dataset::new(Mat::from_parts(n, spec.dim, data), labels, spec.classes)
    };
    let train = draw(spec.train, &mut rng.fork(1))?;
    let test = draw(spec.test, &mut rng.fork(2))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let spec = SyntheticSpec { train: 50, test: 10, dim: 20, ..Default::default() };
        let (a, ta) = synthetic_blobs(&spec).unwrap();
        let (b, _) = synthetic_blobs(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.len(), ta.len(), a.dim()), (50, 10, 20));
        assert!(a.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            Dataset::new(Mat::zeros(2, 3), vec![0], 2),
            Err(FopError::CountMismatch { .. })
        ));
        assert!(matches!(
            Dataset::new(Mat::zeros(1, 3), vec![5], 2),
            Err(FopError::LabelOutOfRange { .. })
        ));
        assert!(Dataset::new(Mat::zeros(0, 3), vec![], 2).is_err());
    }

    #[test]
    fn batch_gathers_rows() {
        let d = Dataset::new(Mat::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), vec![0, 1, 2], 3)
            .unwrap();
        let (x, y) = d.batch(&[2, 0]);
        assert_eq!(x.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(y, vec![2, 0]);
        assert_eq!(d.take(10).len(), 3);
    }
}
