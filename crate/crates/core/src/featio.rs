//! Activation dump I/O, spatial pooling and per-class mean features.
//!
//! Binary formats (all integers and floats little-endian):
//!
//! * tensor: `"ATNS"`, `u16` version = 1, `u16` rank (2 or 4), `rank x u32`
//!   dims, then `prod(dims)` `f32` values;
//! * labels: `"ATLB"`, `u16` version = 1, `u32` N, then `N x u32` class
//!   indices;
//! * multi-hot truth: `"ATMH"`, `u16` version = 1, `u32` N, `u32` M, then
//!   `N x M` bytes, each 0 or 1.
//!
//! Statistics are computed in `f64` regardless of the `f32` storage.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::matrix::Matrix;
use crate::netir::NetworkIR;

pub const TENSOR_MAGIC: &[u8; 4] = b"ATNS";
pub const LABELS_MAGIC: &[u8; 4] = b"ATLB";
pub const MULTIHOT_MAGIC: &[u8; 4] = b"ATMH";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("unsupported tensor rank {0}; expected 2 or 4")]
    Rank(u16),
    #[error("truncated file: need {expected} bytes, have {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("multi-hot entry at flat index {index} is {value}; expected 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} at image {index} is out of range for {num_classes} classes")]
    LabelOutOfRange { index: usize, label: u32, num_classes: usize },
    #[error("layer `{layer}`: class {class} has no images")]
    EmptyClass { layer: String, class: usize },
    #[error("layer `{layer}`: {features} feature rows but {labels} labels")]
    CountMismatch { layer: String, features: usize, labels: usize },
    #[error("manifest line {line}: {message}")]
    ManifestSyntax { line: usize, message: String },
    #[error("manifest lists no layers")]
    EmptyManifest,
    #[error("layer `{0}` is not a block of the network")]
    UnknownLayer(String),
    #[error("layer `{layer}`: feature width {found} does not match out_channels {expected}")]
    WidthMismatch { layer: String, expected: u32, found: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatError + '_ {
    move |source| FeatError::Io { path: path.to_path_buf(), source }
}

/// Rank-2 (`N x C`) or rank-4 (`N x C x H x W`) dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, FeatError> {
        if dims.len() != 2 && dims.len() != 4 {
            return Err(FeatError::Rank(dims.len() as u16));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(FeatError::Shape(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Rank-2 tensor from a matrix, narrowed to `f32`.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self { dims: vec![m.rows(), m.cols()], data: m.as_slice().iter().map(|&v| v as f32).collect() }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FeatError::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FeatError> {
        let found = self.take(4)?;
        if found != expected {
            return Err(FeatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(FeatError::Version(version));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16, FeatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FeatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Checks that exactly `n` bytes remain.
    fn expect_remaining(&self, n: usize) -> Result<(), FeatError> {
        let have = self.bytes.len() - self.pos;
        match have.cmp(&n) {
            std::cmp::Ordering::Less => Err(FeatError::Truncated { expected: self.pos + n, found: self.bytes.len() }),
            std::cmp::Ordering::Greater => Err(FeatError::TrailingBytes(have - n)),
            std::cmp::Ordering::Equal => Ok(()),
        }
    }
}

fn checked_product(dims: &[usize]) -> Result<usize, FeatError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FeatError::Shape(format!("dims {dims:?} overflow")))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FeatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u16()?;
    if rank != 2 && rank != 4 {
        return Err(FeatError::Rank(rank));
    }
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let count = checked_product(&dims)?;
    r.expect_remaining(count.checked_mul(4).ok_or_else(|| FeatError::Shape("payload size overflow".into()))?)?;
    let payload = r.take(count * 4)?;
    let mut data = Vec::with_capacity(count);
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FeatError::NonFinite { index });
        }
        data.push(v);
    }
    Ok(Tensor { dims, data })
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u16).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor, FeatError> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<(), FeatError> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(io_err(path))
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>, FeatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABELS_MAGIC)?;
    let n = r.u32()? as usize;
    r.expect_remaining(n * 4)?;
    (0..n).map(|_| r.u32()).collect()
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * labels.len());
    out.extend_from_slice(LABELS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn read_labels_file(path: impl AsRef<Path>) -> Result<Vec<u32>, FeatError> {
    let path = path.as_ref();
    decode_labels(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_labels_file(path: impl AsRef<Path>, labels: &[u32]) -> Result<(), FeatError> {
    let path = path.as_ref();
    fs::write(path, encode_labels(labels)).map_err(io_err(path))
}

/// `N x M` binary indicator matrix (ground-truth label sets).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHot {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl MultiHot {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self, FeatError> {
        if data.len() != rows * cols {
            return Err(FeatError::Shape(format!("{rows}x{cols} multi-hot needs {} entries, got {}", rows * cols, data.len())));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(FeatError::NotBinary { index, value });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, FeatError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FeatError::Shape("ragged multi-hot rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }
}

pub fn decode_multihot(bytes: &[u8]) -> Result<MultiHot, FeatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(MULTIHOT_MAGIC)?;
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let count = n.checked_mul(m).ok_or_else(|| FeatError::Shape("multi-hot size overflow".into()))?;
    r.expect_remaining(count)?;
    MultiHot::new(n, m, r.take(count)?.to_vec())
}

pub fn encode_multihot(t: &MultiHot) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + t.data.len());
    out.extend_from_slice(MULTIHOT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rows as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols as u32).to_le_bytes());
    out.extend_from_slice(&t.data);
    out
}

pub fn read_multihot_file(path: impl AsRef<Path>) -> Result<MultiHot, FeatError> {
    let path = path.as_ref();
    decode_multihot(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_multihot_file(path: impl AsRef<Path>, t: &MultiHot) -> Result<(), FeatError> {
    let path = path.as_ref();
    fs::write(path, encode_multihot(t)).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Pooling and class means
// ---------------------------------------------------------------------------

/// Averages each `H x W` map of a rank-4 tensor, giving `N x C`.
pub fn spatial_average_pool(t: &Tensor) -> Result<Matrix, FeatError> {
    let &[n, c, h, w] = t.dims() else {
        return Err(FeatError::Shape(format!("spatial pooling needs a rank-4 tensor, got dims {:?}", t.dims())));
    };
    if h == 0 || w == 0 {
        return Err(FeatError::Shape(format!("empty spatial extent {h}x{w}")));
    }
    let area = h * w;
    let mut out = Matrix::zeros(n, c);
    for (idx, map) in t.data().chunks_exact(area).enumerate() {
        let sum: f64 = map.iter().map(|&v| f64::from(v)).sum();
        out[(idx / c, idx % c)] = sum / area as f64;
    }
    Ok(out)
}

/// Pooled per-image features of one layer together with image labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub layer_name: String,
    /// `N x h` matrix; row `i` is the pooled feature vector of image `i`.
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl ActivationSet {
    pub fn new(layer_name: impl Into<String>, features: Matrix, labels: Vec<u32>, num_classes: usize) -> Result<Self, FeatError> {
        let layer_name = layer_name.into();
        if features.rows() != labels.len() {
            return Err(FeatError::CountMismatch { layer: layer_name, features: features.rows(), labels: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(FeatError::LabelOutOfRange { index, label, num_classes });
        }
        Ok(Self { layer_name, features, labels, num_classes })
    }

    /// Pools rank-4 dumps; rank-2 dumps are taken as already pooled.
    pub fn from_tensor(layer_name: impl Into<String>, t: &Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self, FeatError> {
        let features = match t.rank() {
            4 => spatial_average_pool(t)?,
            _ => Matrix::new(t.dims()[0], t.dims()[1], t.data().iter().map(|&v| f64::from(v)).collect()),
        };
        Self::new(layer_name, features, labels, num_classes)
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// Per-class mean feature vectors of one layer (`M x h`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub layer_name: String,
    pub means: Matrix,
}

pub fn class_means(set: &ActivationSet) -> Result<ClassMeans, FeatError> {
    let h = set.features.cols();
    let mut sums = Matrix::zeros(set.num_classes, h);
    let mut counts = vec![0usize; set.num_classes];
    for (i, &label) in set.labels.iter().enumerate() {
        let m = label as usize;
        counts[m] += 1;
        for (acc, &v) in sums.row_mut(m).iter_mut().zip(set.features.row(i)) {
            *acc += v;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(FeatError::EmptyClass { layer: set.layer_name.clone(), class });
    }
    for (m, &c) in counts.iter().enumerate() {
        for v in sums.row_mut(m) {
            *v /= c as f64;
        }
    }
    Ok(ClassMeans { layer_name: set.layer_name.clone(), means: sums })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Parsed manifest: `layer <name> <path>` lines, one `labels <path>` line
/// and an optional `classes <M>` line. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub layers: Vec<(String, PathBuf)>,
    pub labels: PathBuf,
    pub num_classes: Option<usize>,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, FeatError> {
        let mut layers: Vec<(String, PathBuf)> = Vec::new();
        let mut labels = None;
        let mut num_classes = None;
        let err = |line: usize, message: String| FeatError::ManifestSyntax { line, message };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let tokens: Vec<&str> = trimmed.split_whitespace().collect();
            match tokens.as_slice() {
                ["layer", name, path] => {
                    if layers.iter().any(|(n, _)| n == name) {
                        return Err(err(line, format!("duplicate layer `{name}`")));
                    }
                    layers.push((name.to_string(), base_dir.join(path)));
                }
                ["labels", path] => {
                    if labels.replace(base_dir.join(path)).is_some() {
                        return Err(err(line, "more than one `labels` line".into()));
                    }
                }
                ["classes", m] => {
                    let m: usize = m.parse().ok().filter(|m| *m > 0).ok_or_else(|| err(line, format!("bad class count `{m}`")))?;
                    num_classes = Some(m);
                }
                _ => return Err(err(line, format!("unrecognised line `{trimmed}`"))),
            }
        }
        if layers.is_empty() {
            return Err(FeatError::EmptyManifest);
        }
        let labels = labels.ok_or_else(|| err(0, "missing `labels` line".into()))?;
        Ok(Self { layers, labels, num_classes })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, FeatError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Reads every listed dump. All layers share the label vector, so a
    /// layer whose image count differs from the labels is an error.
    pub fn load_sets(&self) -> Result<Vec<ActivationSet>, FeatError> {
        let labels = read_labels_file(&self.labels)?;
        let num_classes = match self.num_classes {
            Some(m) => m,
            None => labels.iter().max().map_or(0, |&m| m as usize + 1),
        };
        self.layers
            .iter()
            .map(|(name, path)| {
                let t = read_tensor_file(path)?;
                if t.dims()[0] != labels.len() {
                    return Err(FeatError::CountMismatch { layer: name.clone(), features: t.dims()[0], labels: labels.len() });
                }
                ActivationSet::from_tensor(name.clone(), &t, labels.clone(), num_classes)
            })
            .collect()
    }
}

/// Reads a manifest and all of the activation dumps it lists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ActivationSet>, FeatError> {
    Manifest::read(path)?.load_sets()
}

/// Checks that every set names a block of `ir` and has that block's width.
pub fn cross_validate(sets: &[ActivationSet], ir: &NetworkIR) -> Result<(), FeatError> {
    for s in sets {
        let block = ir.block(&s.layer_name).ok_or_else(|| FeatError::UnknownLayer(s.layer_name.clone()))?;
        if block.out_channels as usize != s.width() {
            return Err(FeatError::WidthMismatch { layer: s.layer_name.clone(), expected: block.out_channels, found: s.width() });
        }
    }
    Ok(())
}
