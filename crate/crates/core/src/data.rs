//! Datasets: IDX (MNIST distribution format) reading and writing, stratified
//! subsets, and small synthetic problems that need no download.
//!
//! IDX files are big-endian: a magic word `0x0000_08DD` where `DD` is the
//! number of dimensions, one `u32` per dimension, then unsigned bytes.
//! Paths ending in `.gz` are transparently (de)compressed.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

/// Environment variable naming the directory that holds the MNIST files.
pub const DATA_DIR_ENV: &str = "ROTDROP_DATA_DIR";

pub const FETCH_INSTRUCTIONS: &str = "\
download the four MNIST files (train-images-idx3-ubyte, train-labels-idx1-ubyte,
t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte; optionally .gz compressed) from
a MNIST mirror into one directory and point ROTDROP_DATA_DIR (or the config's
dataset.dir) at it; data/mnist-5k in the repository holds a bundled 5,000-image
sample in the same layout";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside 0..{num_classes}")]
    LabelOutOfRange { label: u8, index: usize, num_classes: usize },
    #[error("subset size {k} outside 1..={len}")]
    SubsetOutOfRange { k: usize, len: usize },
    #[error("feature value {0} cannot be stored as an IDX byte")]
    NotByteRepresentable(f32),
    #[error("MNIST file {file} not found in {dir}; {FETCH_INSTRUCTIONS}")]
    MissingDataset { dir: PathBuf, file: String },
    #[error("synthetic dataset needs at least one sample")]
    EmptySynthetic,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labeled feature rows. Rows of `features` and entries of `labels` pair up;
/// every label is below `num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f32>,
    labels: Vec<u8>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Array2<f32>,
        labels: Vec<u8>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        if features.nrows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: features.nrows(),
                labels: labels.len(),
            });
        }
        check_labels(&labels, num_classes)?;
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    pub fn row(&self, index: usize) -> ArrayView1<'_, f32> {
        self.features.row(index)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// First `k` rows (or all, if shorter).
    pub fn head(&self, k: usize) -> Dataset {
        let indices: Vec<usize> = (0..k.min(self.len())).collect();
        self.select(&indices)
    }
}

fn check_labels(labels: &[u8], num_classes: usize) -> Result<(), DataError> {
    match labels.iter().position(|&l| l as usize >= num_classes) {
        Some(index) => Err(DataError::LabelOutOfRange {
            label: labels[index],
            index,
            num_classes,
        }),
        None => Ok(()),
    }
}

/// Raw contents of an IDX image file, normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// One flattened image per row.
    pub pixels: Array2<f32>,
}

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut bytes)
            .map_err(io_err(path))?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes).map_err(io_err(path))?;
    }
    Ok(bytes)
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

// Returns dims and the payload after the header.
fn parse_header(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8]), DataError> {
    let word = |i: usize| -> Result<u32, DataError> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(DataError::Truncated {
                expected: 4 * i + 4,
                found: bytes.len(),
            })
    };
    let found = word(0)?;
    if found != magic {
        return Err(DataError::BadMagic { expected: magic, found });
    }
    let ndims = (magic & 0xFF) as usize;
    let dims = (1..=ndims)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let payload = &bytes[4 * (ndims + 1)..];
    let expected: usize = dims.iter().product();
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected: expected + 4 * (ndims + 1),
            found: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(DataError::DimMismatch(format!(
            "header dims {dims:?} describe {expected} bytes but the payload has {}",
            payload.len()
        )));
    }
    Ok((dims, payload))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    let (dims, payload) = parse_header(bytes, IMAGES_MAGIC)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    if count > 0 && rows * cols == 0 {
        return Err(DataError::DimMismatch(format!("zero-sized {rows}x{cols} images")));
    }
    let pixels = Array2::from_shape_vec(
        (count, rows * cols),
        payload.iter().map(|&b| f32::from(b) / 255.0).collect(),
    )
    .expect("payload length checked against header");
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let (_, payload) = parse_header(bytes, LABELS_MAGIC)?;
    Ok(payload.to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages, DataError> {
    parse_idx_images(&read_all(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>, DataError> {
    parse_idx_labels(&read_all(path.as_ref())?)
}

/// Loads an image file and its label file as one dataset.
pub fn load_idx_pair(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
    split: Split,
) -> Result<Dataset, DataError> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    Dataset::new(images.pixels, labels, num_classes, split)
}

fn encode_idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (dims.len() + 1) + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn to_byte(v: f32) -> Result<u8, DataError> {
    let scaled = v * 255.0;
    let byte = scaled.round();
    if !(0.0..=255.0).contains(&byte) || (scaled - byte).abs() > 1e-3 {
        return Err(DataError::NotByteRepresentable(v));
    }
    Ok(byte as u8)
}

/// IDX image bytes for `dataset`; features must be multiples of 1/255.
pub fn encode_idx_images(dataset: &Dataset, rows: usize, cols: usize) -> Result<Vec<u8>, DataError> {
    if rows * cols != dataset.feature_dim() {
        return Err(DataError::DimMismatch(format!(
            "{rows}x{cols} images but {} features per row",
            dataset.feature_dim()
        )));
    }
    let payload = dataset
        .features
        .iter()
        .map(|&v| to_byte(v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(encode_idx(IMAGES_MAGIC, &[dataset.len(), rows, cols], &payload))
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    encode_idx(LABELS_MAGIC, &[labels.len()], labels)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let result = if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish()).and_then(|mut w| w.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    result.map_err(io_err(path))
}

pub fn write_idx_pair(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<(), DataError> {
    write_bytes(images.as_ref(), &encode_idx_images(dataset, rows, cols)?)?;
    write_bytes(labels.as_ref(), &encode_idx_labels(&dataset.labels))
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| DataError::MissingDataset {
            dir: dir.to_path_buf(),
            file: stem.to_string(),
        })
}

/// Loads the standard MNIST quartet from `dir` as (train, test).
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset), DataError> {
    let dir = dir.as_ref();
    let train = load_idx_pair(
        find_file(dir, "train-images-idx3-ubyte")?,
        find_file(dir, "train-labels-idx1-ubyte")?,
        MNIST_CLASSES,
        Split::Train,
    )?;
    let test = load_idx_pair(
        find_file(dir, "t10k-images-idx3-ubyte")?,
        find_file(dir, "t10k-labels-idx1-ubyte")?,
        MNIST_CLASSES,
        Split::Test,
    )?;
    if train.feature_dim() != test.feature_dim() {
        return Err(DataError::DimMismatch(format!(
            "train images have {} pixels, test images {}",
            train.feature_dim(),
            test.feature_dim()
        )));
    }
    Ok((train, test))
}

/// Seeded class-stratified sample of `k` rows. Classes are filled round-robin
/// so per-class counts differ by at most one unless a class runs out.
pub fn subset(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset, DataError> {
    if k == 0 || k > dataset.len() {
        return Err(DataError::SubsetOutOfRange { k, len: dataset.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    for group in &mut by_class {
        group.shuffle(&mut rng);
    }
    let mut class_order: Vec<usize> = (0..dataset.num_classes).collect();
    class_order.shuffle(&mut rng);

    let mut chosen = Vec::with_capacity(k);
    let mut depth = 0;
    while chosen.len() < k {
        for &c in &class_order {
            if let Some(&i) = by_class[c].get(depth) {
                chosen.push(i);
                if chosen.len() == k {
                    break;
                }
            }
        }
        depth += 1;
    }
    chosen.shuffle(&mut rng);
    Ok(dataset.select(&chosen))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// The four corners of the unit square labeled by XOR, repeated.
    Xor,
    /// Class centers drawn on a sphere of `radius`, plus isotropic Gaussian
    /// noise of standard deviation `noise`.
    GaussianBlobs {
        classes: usize,
        dim: usize,
        noise: f64,
        #[serde(default = "default_radius")]
        radius: f64,
    },
}

fn default_radius() -> f64 {
    1.0
}

pub fn make_synthetic(kind: &SyntheticKind, n: usize, seed: u64, split: Split) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::EmptySynthetic);
    }
    match *kind {
        SyntheticKind::Xor => {
            const CORNERS: [([f32; 2], u8); 4] = [([0.0, 0.0], 0), ([0.0, 1.0], 1), ([1.0, 0.0], 1), ([1.0, 1.0], 0)];
            let features = Array2::from_shape_fn((n, 2), |(i, j)| CORNERS[i % 4].0[j]);
            let labels = (0..n).map(|i| CORNERS[i % 4].1).collect();
            Dataset::new(features, labels, 2, split)
        }
        SyntheticKind::GaussianBlobs {
            classes,
            dim,
            noise,
            radius,
        } => {
            let classes = classes.clamp(1, 256);
            // noise stream per split: same centers, independent samples
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(split as u64);
            let centers = blob_centers(classes, dim, radius, seed);
            let mut features = Array2::<f32>::zeros((n, dim));
            let mut labels = Vec::with_capacity(n);
            for (i, mut row) in features.rows_mut().into_iter().enumerate() {
                let class = i % classes;
                for (j, v) in row.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = (centers[class][j] + noise * z) as f32;
                }
                labels.push(class as u8);
            }
            Dataset::new(features, labels, classes, split)
        }
    }
}

// Centers depend only on the seed, so train and test sets generated with the
// same seed share them.
fn blob_centers(classes: usize, dim: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC3A5_C85C_97CB_3127);
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| radius * x / norm).collect()
        })
        .collect()
}
