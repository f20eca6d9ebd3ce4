//! Labeled image data: IDX ingestion, a synthetic fixture, and Dirichlet
//! non-IID partitioning across clients.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, Normal};
use thiserror::Error;

use crate::rng::Stream;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Attempts at a partition in which every client is non-empty before
/// falling back to moving examples.
const PARTITION_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic number at byte 0: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: needed {needed} bytes at byte offset {offset}, found {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at byte offset {offset} is not below {classes}")]
    LabelOutOfRange {
        offset: usize,
        label: u8,
        classes: usize,
    },
    #[error("cannot split {examples} examples across {clients} clients")]
    TooManyClients { clients: usize, examples: usize },
    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),
}

/// A set of labeled examples with features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f32>, labels: Vec<u8>) -> Self {
        assert_eq!(features.len(), dim * labels.len(), "feature buffer size");
        assert!(
            labels.iter().all(|&l| (l as usize) < classes),
            "label range"
        );
        Dataset {
            dim,
            classes,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.classes];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels,
        }
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features: self.features[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Header of an IDX file: the magic word followed by one big-endian `u32`
/// per dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn parse(bytes: &[u8], expected_magic: u32) -> Result<Self, DataError> {
        let magic = read_u32(bytes, 0)?;
        if magic != expected_magic {
            return Err(DataError::BadMagic {
                expected: expected_magic,
                found: magic,
            });
        }
        let ndims = (magic & 0xFF) as usize;
        let dims = (0..ndims)
            .map(|d| read_u32(bytes, 4 + 4 * d))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(IdxHeader { magic, dims })
    }

    pub fn len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.magic.to_be_bytes().to_vec();
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }

    fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let slice = bytes.get(offset..offset + 4).ok_or(DataError::Truncated {
        offset,
        needed: 4,
        available: bytes.len().saturating_sub(offset),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4-byte slice")))
}

fn payload<'a>(bytes: &'a [u8], header: &IdxHeader) -> Result<&'a [u8], DataError> {
    let offset = header.len();
    let needed = header.payload_len();
    bytes
        .get(offset..offset + needed)
        .ok_or(DataError::Truncated {
            offset,
            needed,
            available: bytes.len().saturating_sub(offset),
        })
}

/// Parse an image IDX buffer and a label IDX buffer into a dataset with
/// features scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<Dataset, DataError> {
    let img_header = IdxHeader::parse(images, IDX_IMAGES_MAGIC)?;
    let lbl_header = IdxHeader::parse(labels, IDX_LABELS_MAGIC)?;
    let n_images = img_header.dims[0] as usize;
    let n_labels = lbl_header.dims[0] as usize;
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = payload(images, &img_header)?;
    let label_bytes = payload(labels, &lbl_header)?;
    if let Some(pos) = label_bytes.iter().position(|&l| l as usize >= classes) {
        return Err(DataError::LabelOutOfRange {
            offset: lbl_header.len() + pos,
            label: label_bytes[pos],
            classes,
        });
    }
    let dim = img_header.dims[1] as usize * img_header.dims[2] as usize;
    let features = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Dataset::new(dim, classes, features, label_bytes.to_vec()))
}

/// Load an MNIST-style image/label IDX pair with 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|source| DataError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    parse_idx(&read(images_path)?, &read(labels_path)?, 10)
}

/// Serialize images as an IDX buffer. Features are mapped back to bytes by
/// rounding `255·x`.
pub fn images_to_idx(data: &Dataset, rows: u32, cols: u32) -> Vec<u8> {
    assert_eq!((rows * cols) as usize, data.dim(), "image shape");
    let header = IdxHeader {
        magic: IDX_IMAGES_MAGIC,
        dims: vec![data.len() as u32, rows, cols],
    };
    let mut out = header.to_bytes();
    out.extend(data.features.iter().map(|&x| (x * 255.0).round() as u8));
    out
}

pub fn labels_to_idx(data: &Dataset) -> Vec<u8> {
    let header = IdxHeader {
        magic: IDX_LABELS_MAGIC,
        dims: vec![data.len() as u32],
    };
    let mut out = header.to_bytes();
    out.extend_from_slice(&data.labels);
    out
}

/// Class-conditional Gaussian blobs in `[0, 1]^dim`.
///
/// Class `c` has mean 0.8 on coordinates `j ≡ c (mod classes)` and 0.2
/// elsewhere, so distinct class means are at least `0.6·√2` apart. Noise has
/// standard deviation 0.1 per coordinate before clamping.
pub fn synthetic_gaussian(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_per_class == 0 || classes == 0 || dim == 0 {
        return Err(DataError::InvalidSynthetic(
            "all sizes must be positive".into(),
        ));
    }
    if dim < classes {
        return Err(DataError::InvalidSynthetic(format!(
            "dim {dim} must be at least the number of classes {classes}"
        )));
    }
    if classes > u8::MAX as usize + 1 {
        return Err(DataError::InvalidSynthetic("too many classes".into()));
    }
    let mut rng = Stream::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut features = Vec::with_capacity(n_per_class * classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for c in 0..classes {
            for j in 0..dim {
                let mean = if j % classes == c { 0.8 } else { 0.2 };
                let x: f64 = mean + noise.sample(&mut rng);
                features.push(x.clamp(0.0, 1.0) as f32);
            }
            labels.push(c as u8);
        }
    }
    Ok(Dataset::new(dim, classes, features, labels))
}

/// How to split a dataset across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub n_clients: usize,
    /// Dirichlet concentration; small values give highly skewed clients.
    pub alpha: f64,
    pub seed: u64,
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub data: Dataset,
    /// Positions of this client's examples in the partitioned dataset.
    pub source_indices: Vec<usize>,
    pub class_histogram: Vec<usize>,
}

impl ClientDataset {
    pub fn from_indices(parent: &Dataset, indices: Vec<usize>) -> Self {
        let data = parent.select(&indices);
        let class_histogram = data.class_histogram();
        ClientDataset {
            data,
            source_indices: indices,
            class_histogram,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Draw from a symmetric Dirichlet(`alpha`) over `n` categories.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Integer counts summing to `total` that follow `proportions` by the
/// largest-remainder rule. Ties go to the lower index.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn partition_once(
    by_class: &[Vec<usize>],
    spec: &PartitionSpec,
    rng: &mut Stream,
) -> Vec<Vec<usize>> {
    let mut clients = vec![Vec::new(); spec.n_clients];
    for members in by_class {
        let mut members = members.clone();
        members.shuffle(rng);
        let shares = sample_dirichlet(spec.alpha, spec.n_clients, rng);
        let counts = largest_remainder(&shares, members.len());
        let mut start = 0;
        for (client, count) in clients.iter_mut().zip(counts) {
            client.extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    clients
}

/// Split `data` across clients: for every class, client shares are drawn
/// from Dirichlet(α·1) and rounded with the largest-remainder rule.
///
/// Whole partitions are redrawn up to 100 times until every client holds an
/// example; after that, each empty client takes one example from the
/// currently largest client.
pub fn dirichlet_partition(
    data: &Dataset,
    spec: &PartitionSpec,
) -> Result<Vec<ClientDataset>, DataError> {
    if spec.n_clients == 0 {
        return Err(DataError::InvalidSpec("n_clients must be positive".into()));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(DataError::InvalidSpec(format!(
            "alpha must be positive, got {}",
            spec.alpha
        )));
    }
    if spec.n_clients > data.len() {
        return Err(DataError::TooManyClients {
            clients: spec.n_clients,
            examples: data.len(),
        });
    }
    let mut by_class = vec![Vec::new(); data.classes()];
    for i in 0..data.len() {
        by_class[data.label(i)].push(i);
    }
    let mut rng = Stream::seed_from_u64(spec.seed);
    let mut assignment = Vec::new();
    for _ in 0..PARTITION_ATTEMPTS {
        assignment = partition_once(&by_class, spec, &mut rng);
        if assignment.iter().all(|c| !c.is_empty()) {
            break;
        }
    }
    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..assignment.len())
            .max_by(|&a, &b| {
                assignment[a]
                    .len()
                    .cmp(&assignment[b].len())
                    .then(b.cmp(&a))
            })
            .expect("at least one client");
        let moved = assignment[largest]
            .pop()
            .expect("largest client is non-empty");
        assignment[empty].push(moved);
    }
    Ok(assignment
        .into_iter()
        .map(|indices| ClientDataset::from_indices(data, indices))
        .collect())
}
