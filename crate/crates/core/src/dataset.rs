//! Pre-extracted multimodal feature datasets.
//!
//! On disk a dataset directory holds a `manifest.json` declaring the fixed
//! per-modality `(length, dim)` shapes and one JSON-lines file per split:
//!
//! ```text
//! manifest.json   {"dims": {"text": [L, d], "visual": [L, d], "acoustic": [L, d]},
//!                  "splits": {"train": "train.jsonl", ...}}
//! train.jsonl     {"id": "...", "label": 1.5, "text": [[...], ...], "visual": ..., "acoustic": ...}
//! ```
//!
//! Sequences shorter than the declared length are zero-padded at load time and
//! longer ones keep their prefix. Feature dimensions must match exactly.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::modality::{Modality, PerModality};

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Width of the label band around zero that synthetic data never samples.
pub const SYNTHETIC_DEAD_ZONE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

/// Fixed `(length, dim)` of one modality's sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct SeqShape {
    pub len: usize,
    pub dim: usize,
}

impl SeqShape {
    pub fn new(len: usize, dim: usize) -> Self {
        SeqShape { len, dim }
    }
}

impl From<[usize; 2]> for SeqShape {
    fn from([len, dim]: [usize; 2]) -> Self {
        SeqShape { len, dim }
    }
}

impl From<SeqShape> for [usize; 2] {
    fn from(s: SeqShape) -> Self {
        [s.len, s.dim]
    }
}

impl fmt::Display for SeqShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.len, self.dim)
    }
}

pub type Dims = PerModality<SeqShape>;

/// Parses `text=4x12,visual=4x8,acoustic=4x6` (short names `t`, `v`, `a`
/// accepted), or three positional `LxD` entries in text, visual, acoustic
/// order.
pub fn parse_dims(spec: &str) -> Result<Dims> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Input(format!(
            "expected three per-modality dims, got {spec:?}"
        )));
    }
    let parse_shape = |s: &str| -> Result<SeqShape> {
        let (l, d) = s
            .split_once('x')
            .ok_or_else(|| Error::Input(format!("expected LxD, got {s:?}")))?;
        let len = l.trim().parse().map_err(|_| Error::Input(format!("bad length in {s:?}")))?;
        let dim = d.trim().parse().map_err(|_| Error::Input(format!("bad dim in {s:?}")))?;
        Ok(SeqShape { len, dim })
    };
    let mut out: PerModality<Option<SeqShape>> = PerModality::default();
    for (i, part) in parts.iter().enumerate() {
        let (modality, shape) = match part.split_once('=') {
            Some((name, shape)) => (name.trim().parse::<Modality>()?, shape),
            None => (Modality::ALL[i], *part),
        };
        if out[modality].is_some() {
            return Err(Error::Input(format!("{modality} dims given twice")));
        }
        out[modality] = Some(parse_shape(shape)?);
    }
    let dims = PerModality::try_from_fn(|m| {
        out[m].ok_or_else(|| Error::Input(format!("missing dims for {m}")))
    })?;
    validate_dims(&dims)?;
    Ok(dims)
}

fn validate_dims(dims: &Dims) -> Result<()> {
    for (m, s) in dims.iter() {
        if s.len == 0 || s.dim == 0 {
            return Err(Error::Config(format!("{m} dims must be positive, got {s}")));
        }
    }
    Ok(())
}

/// One modality's `L x d` features, one row per sequence position.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub data: Mat,
}

impl FeatureSequence {
    pub fn new(modality: Modality, data: Mat) -> Self {
        FeatureSequence { modality, data }
    }

    pub fn shape(&self) -> SeqShape {
        SeqShape::new(self.data.nrows(), self.data.ncols())
    }

    /// Mean over sequence positions.
    pub fn mean_pool(&self) -> Array1<f64> {
        self.data
            .mean_axis(ndarray::Axis(0))
            .expect("sequences have at least one row")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: f64,
    pub features: PerModality<FeatureSequence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub dims: Dims,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Checks every sample against the dataset invariants.
    pub fn validate(&self) -> Result<()> {
        validate_dims(&self.dims)?;
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(validation(&s.id, None, "duplicate sample id"));
            }
            check_label(&s.id, s.label)?;
            for (m, seq) in s.features.iter() {
                if seq.modality != m {
                    return Err(validation(&s.id, Some(m), "feature tagged with wrong modality"));
                }
                if seq.shape() != self.dims[m] {
                    return Err(validation(
                        &s.id,
                        Some(m),
                        format!("{m} shape {} differs from declared {}", seq.shape(), self.dims[m]),
                    ));
                }
                if seq.data.iter().any(|v| !v.is_finite()) {
                    return Err(validation(&s.id, Some(m), format!("non-finite value in {m}")));
                }
            }
        }
        Ok(())
    }
}

fn validation(id: &str, modality: Option<Modality>, reason: impl Into<String>) -> Error {
    Error::Validation {
        sample_id: id.to_string(),
        modality,
        reason: reason.into(),
    }
}

fn check_label(id: &str, label: f64) -> Result<()> {
    if !label.is_finite() || !(LABEL_MIN..=LABEL_MAX).contains(&label) {
        return Err(validation(id, None, format!("label {label} outside [-3, 3]")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dims: Dims,
    splits: BTreeMap<Split, String>,
}

/// One data-file line. Read with `Option<f64>` entries so that `null` and
/// bare `NaN`/`Infinity` tokens surface as validation errors, not parse errors.
#[derive(Serialize, Deserialize)]
struct RawSample<T> {
    id: String,
    label: f64,
    text: Vec<Vec<T>>,
    visual: Vec<Vec<T>>,
    acoustic: Vec<Vec<T>>,
}

/// Replaces `NaN`, `Infinity` and `-Infinity` outside string literals with
/// `null`.
fn non_finite_as_null(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let (mut in_string, mut escaped) = (false, false);
    let mut rest = line;
    while let Some(c) = rest.chars().next() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
        } else if c == '"' {
            in_string = true;
        } else if let Some(token) = ["-Infinity", "Infinity", "NaN"].into_iter().find(|t| rest.starts_with(t)) {
            out.push_str("null");
            rest = &rest[token.len()..];
            continue;
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path,
        line: 1,
        source,
    })
}

/// Reads only the declared dims of a dataset directory.
pub fn read_dims(dir: impl AsRef<Path>) -> Result<Dims> {
    Ok(read_manifest(dir.as_ref())?.dims)
}

/// Whether the manifest in `dir` lists `split`.
pub fn has_split(dir: impl AsRef<Path>, split: Split) -> Result<bool> {
    Ok(read_manifest(dir.as_ref())?.splits.contains_key(&split))
}

pub fn load_dataset(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    validate_dims(&manifest.dims)?;
    let file = manifest.splits.get(&split).ok_or_else(|| {
        Error::Input(format!("{} lists no {split} split", dir.join(MANIFEST_FILE).display()))
    })?;
    let path = dir.join(file);
    let reader = BufReader::new(fs::File::open(&path).map_err(|e| Error::io(&path, e))?);

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample<Option<f64>> = serde_json::from_str(&line)
            .or_else(|e| serde_json::from_str(&non_finite_as_null(&line)).map_err(|_| e))
            .map_err(|source| Error::Json {
                path: path.clone(),
                line: lineno + 1,
                source,
            })?;
        if !seen.insert(raw.id.clone()) {
            return Err(validation(&raw.id, None, "duplicate sample id"));
        }
        check_label(&raw.id, raw.label)?;
        let RawSample {
            id,
            label,
            text,
            visual,
            acoustic,
        } = raw;
        let mut rows = PerModality {
            text,
            visual,
            acoustic,
        };
        let features = PerModality::try_from_fn(|m| {
            let values = std::mem::take(&mut rows[m])
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
                .collect();
            fit_sequence(&id, m, values, manifest.dims[m])
        })?;
        samples.push(Sample {
            id,
            label,
            features,
        });
    }
    Ok(Dataset {
        split,
        dims: manifest.dims,
        samples,
    })
}

fn fit_sequence(id: &str, m: Modality, rows: Vec<Vec<f64>>, shape: SeqShape) -> Result<FeatureSequence> {
    let mut data = Mat::zeros((shape.len, shape.dim));
    for (r, row) in rows.iter().enumerate() {
        if row.len() != shape.dim {
            return Err(validation(
                id,
                Some(m),
                format!("{m} row {r} has {} features, manifest declares {}", row.len(), shape.dim),
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(validation(id, Some(m), format!("non-finite value in {m}")));
        }
        if r < shape.len {
            for (c, &v) in row.iter().enumerate() {
                data[[r, c]] = v;
            }
        }
    }
    Ok(FeatureSequence::new(m, data))
}

/// Writes `dataset` as `<split>.jsonl` under `dir` and records it in the
/// manifest. An existing manifest must declare the same dims.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        let existing = read_manifest(dir)?;
        if existing.dims != dataset.dims {
            return Err(Error::Config(format!(
                "{} declares different dims than the dataset being written",
                manifest_path.display()
            )));
        }
        existing
    } else {
        Manifest {
            dims: dataset.dims.clone(),
            splits: BTreeMap::new(),
        }
    };
    let file_name = format!("{}.jsonl", dataset.split);
    manifest.splits.insert(dataset.split, file_name.clone());

    let data_path = dir.join(&file_name);
    let file = fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        let rows = |m: Modality| -> Vec<Vec<f64>> {
            s.features[m].data.rows().into_iter().map(|r| r.to_vec()).collect()
        };
        let raw = RawSample::<f64> {
            id: s.id.clone(),
            label: s.label,
            text: rows(Modality::Text),
            visual: rows(Modality::Visual),
            acoustic: rows(Modality::Acoustic),
        };
        let line = serde_json::to_string(&raw).expect("plain data serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&data_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&data_path, e))?;

    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Fixed unit direction carrying the label signal in synthetic data. It
/// depends only on the modality and its dimension, so splits generated with
/// different seeds share it.
pub fn synthetic_direction(modality: Modality, dim: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5151_0000 + 1_000_003 * modality.index() as u64 + dim as u64);
    let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Deterministic synthetic dataset: labels uniform on `[-3, 3]` minus the
/// dead zone, features `N(0, 1)` noise plus `signal · label · direction` on
/// every row.
pub fn generate_synthetic(n: usize, dims: &Dims, signal_strength: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions = dims.map(|m, s| synthetic_direction(m, s.dim));
    let half_gap = SYNTHETIC_DEAD_ZONE / 2.0;
    let samples = (0..n)
        .map(|i| {
            let magnitude = rng.random_range(half_gap..=LABEL_MAX);
            let label = if rng.random_bool(0.5) { magnitude } else { -magnitude };
            let features = PerModality::from_fn(|m| {
                let shape = dims[m];
                let dir = &directions[m];
                let data = Mat::from_shape_fn((shape.len, shape.dim), |(_, c)| {
                    let noise: f64 = rng.sample(StandardNormal);
                    noise + signal_strength * label * dir[c]
                });
                FeatureSequence::new(m, data)
            });
            Sample {
                id: format!("syn{seed}-{i:05}"),
                label,
                features,
            }
        })
        .collect();
    Dataset {
        split: Split::Train,
        dims: dims.clone(),
        samples,
    }
}

/// Indices of one mini-batch; the batch doubles as its own retrieval pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Partitions the dataset into batches of `batch_size`. A trailing singleton
/// is merged into the previous batch so every batch has at least two samples.
pub fn make_batches(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    partition_indices(dataset.len(), batch_size, shuffle_seed)
}

pub(crate) fn partition_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples to batch, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|c| Batch { indices: c.to_vec() })
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("at least one batch").indices.extend(tail.indices);
    }
    Ok(batches)
}

/// Path of the data file a manifest assigns to `split`.
pub fn split_path(dir: impl AsRef<Path>, split: Split) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest
        .splits
        .get(&split)
        .map(|f| dir.join(f))
        .ok_or_else(|| Error::Input(format!("no {split} split in {}", dir.display())))
}
