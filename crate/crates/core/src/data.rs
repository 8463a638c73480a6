//! Datasets, IDX file I/O and class-incremental task streams.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Read a file, transparently inflating it if it starts with the gzip magic.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], words: usize, path: &Path) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::Truncated { path: path.into(), expected: 4 * words, found: bytes.len() });
    }
    Ok(bytes[..4 * words].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Raw IDX image tensor flattened to one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Array2<u8>,
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = header(bytes, 1, path)?[0];
    if magic != IMAGES_MAGIC {
        return Err(Error::Magic { path: path.into(), found: magic, expected: IMAGES_MAGIC });
    }
    let h = header(bytes, 4, path)?;
    let (n, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let payload = &bytes[16..];
    let expected = n * rows * cols;
    if payload.len() < expected {
        return Err(Error::Truncated { path: path.into(), expected, found: payload.len() });
    }
    let pixels = Array2::from_shape_vec((n, rows * cols), payload[..expected].to_vec()).expect("payload length checked");
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = header(bytes, 1, path)?[0];
    if magic != LABELS_MAGIC {
        return Err(Error::Magic { path: path.into(), found: magic, expected: LABELS_MAGIC });
    }
    let n = header(bytes, 2, path)?[1] as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Truncated { path: path.into(), expected: n, found: payload.len() });
    }
    Ok(payload[..n].to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    parse_idx_images(&read_maybe_gzip(path)?, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_idx_labels(&read_maybe_gzip(path)?, path)
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [IMAGES_MAGIC, images.pixels.nrows() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend(images.pixels.iter());
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(|e| Error::io(path, e))
}

/// Scale raw bytes into [0, 1].
pub fn normalize(raw: &Array2<u8>) -> Array2<f64> {
    raw.mapv(|b| f64::from(b) / 255.0)
}

/// Labeled examples with inputs in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if inputs.nrows() != labels.len() {
            return Err(Error::Dataset(format!("{name}: {} input rows but {} labels", inputs.nrows(), labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Dataset(format!("{name}: example {i} has label {l}, outside 0..{num_classes}")));
        }
        if inputs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!("{name}: input values must lie in [0, 1]")));
        }
        Ok(Dataset { inputs, labels, num_classes, name })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn from_idx(images: &IdxImages, labels: &[u8], num_classes: usize, name: impl Into<String>) -> Result<Self> {
        let labels = labels.iter().map(|&l| usize::from(l)).collect();
        Self::new(normalize(&images.pixels), labels, num_classes, name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Synthetic,
}

impl DatasetKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion_mnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

fn find_idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    [plain.clone(), gz]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::io(plain, std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (also tried .gz)")))
}

/// Load the standard train/test IDX files of MNIST or FashionMNIST from
/// `<data_dir>/<mnist|fashion_mnist>/`.
pub fn load_benchmark(kind: DatasetKind, data_dir: &Path) -> Result<(Dataset, Dataset)> {
    if kind == DatasetKind::Synthetic {
        return Err(Error::Dataset("synthetic data is generated, not loaded".into()));
    }
    let dir = data_dir.join(kind.dir_name());
    let load = |split: &str| -> Result<Dataset> {
        let images = load_idx_images(find_idx_file(&dir, &format!("{split}-images-idx3-ubyte"))?)?;
        let labels = load_idx_labels(find_idx_file(&dir, &format!("{split}-labels-idx1-ubyte"))?)?;
        if images.pixels.nrows() != labels.len() {
            return Err(Error::Dataset(format!("{}/{split}: {} images but {} labels", dir.display(), images.pixels.nrows(), labels.len())));
        }
        Dataset::from_idx(&images, &labels, 10, format!("{}-{split}", kind.dir_name()))
    };
    Ok((load("train")?, load("t10k")?))
}

/// Gaussian blobs around class centers `0.25 + e_k / sqrt(2)`, which are at
/// distance 1 from each other. Values are clamped into [0, 1].
pub fn make_synthetic(num_classes: usize, per_class: usize, input_dim: usize, blob_spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 {
        return Err(Error::Dataset("synthetic data needs at least one class and one example".into()));
    }
    if input_dim < num_classes {
        return Err(Error::Dataset(format!("synthetic input_dim {input_dim} must be at least num_classes {num_classes}")));
    }
    let noise = Normal::new(0.0, blob_spread).map_err(|e| Error::Dataset(e.to_string()))?;
    let mut rng = rng::stream(seed, &[rng::tag::SYNTHETIC]);
    let n = num_classes * per_class;
    let mut inputs = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in inputs.rows_mut().into_iter().enumerate() {
        let class = i / per_class;
        for (j, v) in row.iter_mut().enumerate() {
            let center = 0.25 + if j == class { std::f64::consts::FRAC_1_SQRT_2 } else { 0.0 };
            *v = (center + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        labels.push(class);
    }
    Dataset::new(inputs, labels, num_classes, format!("synthetic-{num_classes}x{per_class}"))
}

/// Center of class `class` in a [`make_synthetic`] dataset.
pub fn synthetic_center(class: usize, input_dim: usize) -> Vec<f64> {
    (0..input_dim).map(|j| 0.25 + if j == class { std::f64::consts::FRAC_1_SQRT_2 } else { 0.0 }).collect()
}

/// A subset of a shared dataset, in a fixed order.
#[derive(Clone, Debug)]
pub struct DataView {
    pub data: Arc<Dataset>,
    pub indices: Vec<usize>,
}

impl DataView {
    pub fn all(data: Arc<Dataset>) -> Self {
        let indices = (0..data.len()).collect();
        DataView { data, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.data.input_dim()
    }

    pub fn label(&self, i: usize) -> usize {
        self.data.labels[self.indices[i]]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.indices.iter().map(|&i| self.data.labels[i]).collect()
    }

    /// Inputs of the view positions `positions`.
    pub fn inputs_at(&self, positions: &[usize]) -> Array2<f64> {
        let rows: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        self.data.inputs.select(Axis(0), &rows)
    }

    pub fn batch(&self, positions: &[usize]) -> Batch {
        let labels = positions.iter().map(|&p| self.label(p)).collect();
        Batch { inputs: self.inputs_at(positions), labels: Some(labels) }
    }

    pub fn to_batch(&self) -> Batch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    /// Concatenate views over the same dataset.
    pub fn concat<'a>(views: impl IntoIterator<Item = &'a DataView>) -> Result<DataView> {
        let mut iter = views.into_iter();
        let first = iter.next().ok_or_else(|| Error::Empty("no views to concatenate".into()))?;
        let mut out = first.clone();
        for v in iter {
            if !Arc::ptr_eq(&v.data, &out.data) {
                return Err(Error::Dataset("cannot concatenate views of different datasets".into()));
            }
            out.indices.extend_from_slice(&v.indices);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: DataView,
    pub test: DataView,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub class_order: Vec<usize>,
    pub num_classes: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Identity order, or a seeded shuffle of it.
pub fn class_order(num_classes: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_classes).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, &[rng::tag::CLASS_ORDER]));
    }
    order
}

/// Sizes of `tasks` contiguous class groups; earlier tasks absorb the remainder.
pub fn task_sizes(num_classes: usize, tasks: usize) -> Vec<usize> {
    let (base, rem) = (num_classes / tasks, num_classes % tasks);
    (0..tasks).map(|t| base + usize::from(t < rem)).collect()
}

/// Split train and test data into `tasks` class-disjoint tasks following
/// `class_order`. Examples keep their dataset order before a seeded shuffle
/// inside each task.
pub fn split_tasks(train: Arc<Dataset>, test: Arc<Dataset>, tasks: usize, class_order: &[usize], seed: u64) -> Result<TaskStream> {
    let k = train.num_classes;
    if test.num_classes != k {
        return Err(Error::Dataset(format!("train has {k} classes, test has {}", test.num_classes)));
    }
    if tasks == 0 || tasks > k {
        return Err(Error::Config(format!("number of tasks must be in 1..={k}, got {tasks}")));
    }
    let mut seen = vec![false; k];
    for &c in class_order {
        if c >= k || std::mem::replace(&mut seen[c], true) {
            return Err(Error::Config(format!("class order {class_order:?} is not a permutation of 0..{k}")));
        }
    }
    if class_order.len() != k {
        return Err(Error::Config(format!("class order {class_order:?} is not a permutation of 0..{k}")));
    }

    let mut task_of = vec![0; k];
    let mut groups = Vec::with_capacity(tasks);
    let mut offset = 0;
    for (t, size) in task_sizes(k, tasks).into_iter().enumerate() {
        let group = class_order[offset..offset + size].to_vec();
        for &c in &group {
            task_of[c] = t;
        }
        groups.push(group);
        offset += size;
    }

    let route = |data: &Arc<Dataset>, split: u64| -> Vec<DataView> {
        let mut buckets = vec![Vec::new(); tasks];
        for (i, &l) in data.labels.iter().enumerate() {
            buckets[task_of[l]].push(i);
        }
        buckets
            .into_iter()
            .enumerate()
            .map(|(t, mut indices)| {
                indices.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT, split, t as u64]));
                DataView { data: Arc::clone(data), indices }
            })
            .collect()
    };
    let train_views = route(&train, 0);
    let test_views = route(&test, 1);
    let tasks = groups
        .into_iter()
        .zip(train_views.into_iter().zip(test_views))
        .map(|(classes, (train, test))| Task { classes, train, test })
        .collect();
    Ok(TaskStream { tasks, class_order: class_order.to_vec(), num_classes: k })
}
