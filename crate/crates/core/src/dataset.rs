//! Dataset loading, normalization, and coreset manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;

/// CIFAR-10 image geometry (32x32 RGB, channel-planar).
pub const CIFAR_DIMS: [usize; 3] = [32, 32, 3];
const CIFAR_PIXELS: usize = 32 * 32 * 3;

/// Dense `N x D` sample matrix, row-major, with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMatrix {
    data: Vec<f64>,
    n: usize,
    d: usize,
    labels: Option<Vec<i32>>,
    dims: Vec<usize>,
    source_id: String,
}

impl DatasetMatrix {
    pub fn new(
        data: Vec<f64>,
        n: usize,
        d: usize,
        labels: Option<Vec<i32>>,
        dims: Vec<usize>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 samples, got {n}")));
        }
        if d < 1 {
            return Err(Error::Data("samples must have at least one feature".into()));
        }
        if data.len() != n * d {
            return Err(Error::Data(format!(
                "matrix payload has {} values, expected {n} x {d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at sample {}, feature {}",
                pos / d,
                pos % d
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Data(format!("{} labels for {n} samples", l.len())));
            }
        }
        let dims = if dims.is_empty() { vec![d] } else { dims };
        if dims.iter().product::<usize>() != d {
            return Err(Error::Data(format!(
                "dims {dims:?} do not multiply to D={d}"
            )));
        }
        Ok(Self {
            data,
            n,
            d,
            labels,
            dims,
            source_id: source_id.into(),
        })
    }

    /// Tabular matrix without labels.
    pub fn from_rows(rows: &[Vec<f64>], source_id: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Data("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(data, rows.len(), d, None, vec![d], source_id)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    /// Label of sample `i`, or -1 when the dataset is unlabeled.
    pub fn label(&self, i: usize) -> i32 {
        self.labels.as_ref().map_or(-1, |l| l[i])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Rows `indices` (in the given order) as a new matrix.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::Data(format!("row {i} out of range (N={})", self.n)));
            }
            data.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(
            data,
            indices.len(),
            self.d,
            labels,
            self.dims.clone(),
            self.source_id.clone(),
        )
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        Self {
            data,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    CifarBinary,
    RawF32,
    Csv,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::CifarBinary => "cifar-binary",
            DatasetFormat::RawF32 => "raw-f32",
            DatasetFormat::Csv => "csv",
        })
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar-binary" => Ok(Self::CifarBinary),
            "raw-f32" => Ok(Self::RawF32),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

fn source_id_of(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<DatasetMatrix> {
    match format {
        DatasetFormat::CifarBinary => load_cifar(path),
        DatasetFormat::RawF32 => load_raw_f32(path),
        DatasetFormat::Csv => load_csv(path),
    }
}

/// CIFAR binary: each record is one label byte followed by 3072 pixel bytes.
fn load_cifar(path: &Path) -> Result<DatasetMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let record = CIFAR_PIXELS + 1;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Data(format!(
            "{}: {} bytes is not a whole number of {record}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record) {
        labels.push(i32::from(rec[0]));
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    DatasetMatrix::new(
        data,
        n,
        CIFAR_PIXELS,
        Some(labels),
        CIFAR_DIMS.to_vec(),
        source_id_of(path),
    )
}

/// Sidecar header for raw little-endian `f32` payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub dims: Vec<usize>,
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<i32>>,
}

/// `data.f32` -> `data.f32.json`.
pub fn raw_header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn load_raw_f32(path: &Path) -> Result<DatasetMatrix> {
    let header_path = raw_header_path(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: RawHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", header_path.display())))?;
    let big = match header.endianness.as_str() {
        "little" => false,
        "big" => true,
        other => return Err(Error::Data(format!("unsupported endianness {other:?}"))),
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = header.n * header.d * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: header declares {} x {} f32 ({expected} bytes) but payload has {} bytes",
            path.display(),
            header.n,
            header.d,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            f64::from(if big {
                f32::from_be_bytes(b)
            } else {
                f32::from_le_bytes(b)
            })
        })
        .collect();
    DatasetMatrix::new(
        data,
        header.n,
        header.d,
        header.labels,
        header.dims,
        source_id_of(path),
    )
}

/// Write a matrix as little-endian `f32` plus its JSON sidecar header.
///
/// Values are narrowed to `f32`; a matrix that was itself loaded from raw-f32
/// round-trips bit-exactly.
pub fn write_raw_f32(m: &DatasetMatrix, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.data.len() * 4);
    for &v in &m.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header = RawHeader {
        n: m.n,
        d: m.d,
        dims: m.dims.clone(),
        endianness: "little".into(),
        labels: m.labels.clone(),
    };
    let header_path = raw_header_path(path);
    fs::write(&header_path, json::to_canonical_string(&header)?)
        .map_err(|e| Error::io(&header_path, e))
}

/// CSV with one sample per row. A first line with no numeric cell is a
/// header; if its last cell is `label`, the last column holds integer labels.
fn load_csv(path: &Path) -> Result<DatasetMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, &source_id_of(path))
}

pub fn parse_csv(text: &str, source_id: &str) -> Result<DatasetMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();
    let mut labeled = false;
    if let Some((_, first)) = lines.peek() {
        let cells: Vec<&str> = first.split(',').map(str::trim).collect();
        if cells.iter().all(|c| c.parse::<f64>().is_err()) {
            labeled = cells
                .last()
                .is_some_and(|c| c.eq_ignore_ascii_case("label"));
            lines.next();
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (lineno, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if *width.get_or_insert(cells.len()) != cells.len() {
            return Err(Error::Data(format!(
                "line {}: expected {} cells, found {}",
                lineno + 1,
                width.unwrap_or(0),
                cells.len()
            )));
        }
        let (features, label) = if labeled {
            let (l, f) = cells.split_last().expect("width >= 1");
            (f, Some(*l))
        } else {
            (&cells[..], None)
        };
        for cell in features {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("line {}: non-numeric cell {cell:?}", lineno + 1))
            })?;
            data.push(v);
        }
        if let Some(l) = label {
            labels.push(l.parse::<i32>().map_err(|_| {
                Error::Data(format!("line {}: non-integer label {l:?}", lineno + 1))
            })?);
        }
        n += 1;
    }
    let d = width.unwrap_or(0) - usize::from(labeled);
    DatasetMatrix::new(data, n, d, labeled.then_some(labels), vec![d], source_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    UnitRange,
    PerFeatureStandardize,
    None,
}

impl fmt::Display for NormalizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizeMode::UnitRange => "unit-range",
            NormalizeMode::PerFeatureStandardize => "per-feature-standardize",
            NormalizeMode::None => "none",
        })
    }
}

impl FromStr for NormalizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit-range" => Ok(Self::UnitRange),
            "per-feature-standardize" | "standardize" => Ok(Self::PerFeatureStandardize),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

pub fn normalize(m: &DatasetMatrix, mode: NormalizeMode) -> DatasetMatrix {
    match mode {
        NormalizeMode::None => m.clone(),
        NormalizeMode::UnitRange => {
            let (lo, hi) = m
                .data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if hi == lo {
                return m.clone();
            }
            let span = hi - lo;
            m.with_data(
                m.data
                    .iter()
                    .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
                    .collect(),
            )
        }
        NormalizeMode::PerFeatureStandardize => {
            let (n, d) = (m.n, m.d);
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= n as f64);
            let mut var = vec![0.0; d];
            for i in 0..n {
                for ((acc, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
            let mut data = m.data.clone();
            for row in data.chunks_exact_mut(d) {
                for ((v, mu), s) in row.iter_mut().zip(&mean).zip(&std) {
                    *v = if *s > 0.0 { (*v - mu) / s } else { 0.0 };
                }
            }
            m.with_data(data)
        }
    }
}

/// Selected coreset: sorted sample indices with their grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetSelection {
    /// Strictly increasing indices into the source dataset.
    pub indices: Vec<usize>,
    /// Grid cell of each selected index (parallel to `indices`).
    pub cells: Vec<usize>,
    /// Label of each selected index, -1 when unlabeled.
    pub labels: Vec<i32>,
    pub keeping_ratio: f64,
    /// Size of the dataset the selection was drawn from.
    pub n: usize,
    pub seed: u64,
    pub source_id: String,
    /// Effective run configuration echoed into the manifest.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
    #[serde(default)]
    pub config_hash: String,
}

/// Number of samples kept for ratio `kr` out of `n`.
pub fn target_count(keeping_ratio: f64, n: usize) -> usize {
    (keeping_ratio * n as f64).round() as usize
}

impl CoresetSelection {
    pub fn validate(&self) -> Result<()> {
        if !(self.keeping_ratio > 0.0 && self.keeping_ratio <= 1.0) {
            return Err(Error::Data(format!(
                "keeping ratio {} outside (0, 1]",
                self.keeping_ratio
            )));
        }
        if self.cells.len() != self.indices.len() || self.labels.len() != self.indices.len() {
            return Err(Error::Data("cells/labels must parallel indices".into()));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("indices must be strictly increasing".into()));
        }
        if self.indices.last().is_some_and(|&i| i >= self.n) {
            return Err(Error::Data(format!("index out of range for N={}", self.n)));
        }
        let t = target_count(self.keeping_ratio, self.n);
        if self.indices.len() != t {
            return Err(Error::Data(format!(
                "{} indices but round({} * {}) = {t}",
                self.indices.len(),
                self.keeping_ratio,
                self.n
            )));
        }
        Ok(())
    }

    /// Fill `labels` from the source dataset.
    pub fn attach_labels(&mut self, m: &DatasetMatrix) {
        self.labels = self.indices.iter().map(|&i| m.label(i)).collect();
    }

    /// Map from selected index to its cell id.
    pub fn cell_of(&self) -> BTreeMap<usize, usize> {
        self.indices
            .iter()
            .copied()
            .zip(self.cells.iter().copied())
            .collect()
    }
}

/// Write the manifest as canonical JSON (sorted keys, 17-digit floats).
pub fn write_selection(sel: &CoresetSelection, path: &Path) -> Result<()> {
    let text = selection_to_string(sel)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Validated canonical JSON text of a manifest.
pub fn selection_to_string(sel: &CoresetSelection) -> Result<String> {
    sel.validate()?;
    json::to_canonical_string(sel)
}

pub fn read_selection(path: &Path) -> Result<CoresetSelection> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sel: CoresetSelection =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    sel.validate()?;
    Ok(sel)
}
