//! Dataset ingestion: seeded Gaussian blobs, CSV files and IDX files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled samples stored as an `n × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != labels.len() {
            return Err(Error::Dataset(format!(
                "{} feature rows but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!(
                "label {} outside [0, {})",
                bad, classes
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Gather the given sample indices into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::matrix(indices.len(), d, data).expect("batch shape"),
            labels,
        )
    }

    /// Split off the trailing `test_fraction` of samples as a held-out set.
    pub fn split(&self, test_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test fraction {} outside [0, 1)",
                test_fraction
            )));
        }
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let n_train = self.len() - n_test;
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..self.len()).collect();
        let (tf, tl) = self.batch(&train);
        let (ef, el) = self.batch(&test);
        Ok((
            Dataset::new(tf, tl, self.classes)?,
            Dataset::new(ef, el, self.classes)?,
        ))
    }
}

/// Parameters of the Gaussian-blob classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dims: usize,
    pub samples: usize,
    /// Standard deviation of the per-sample noise around each class centre.
    pub noise: f64,
    pub seed: u64,
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic(BlobSpec),
    Csv { path: PathBuf },
    Idx { images: PathBuf, labels: PathBuf },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(spec) => gaussian_blobs(spec),
            DatasetSpec::Csv { path } => load_csv(path),
            DatasetSpec::Idx { images, labels } => load_idx(images, labels),
        }
    }
}

/// Class centres are standard normal; samples are centre + `noise`·N(0, I).
/// Labels cycle `0, 1, .., classes-1` so any trailing split stays balanced.
pub fn gaussian_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dims == 0 || spec.samples == 0 {
        return Err(Error::Config(format!(
            "blobs need >= 2 classes, >= 1 dim and >= 1 sample: {:?}",
            spec
        )));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::Config(format!(
            "blob noise must be >= 0, got {}",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centres: Vec<f64> = (0..spec.classes * spec.dims)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut data = Vec::with_capacity(spec.samples * spec.dims);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let centre = &centres[label * spec.dims..(label + 1) * spec.dims];
        for &c in centre {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(c + spec.noise * z);
        }
        labels.push(label);
    }
    Dataset::new(
        Tensor::matrix(spec.samples, spec.dims, data)?,
        labels,
        spec.classes,
    )
}

/// Numeric CSV, label in the last column. A non-numeric first line is
/// treated as a header.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {}", path.display(), e)))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("{}: {}", path.display(), e)))?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(e) => {
                return Err(Error::Dataset(format!(
                    "{}:{}: {}",
                    path.display(),
                    line + 1,
                    e
                )))
            }
        };
        if values.len() < 2 {
            return Err(Error::Dataset(format!(
                "{}:{}: need at least one feature and a label",
                path.display(),
                line + 1
            )));
        }
        let d = values.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(Error::Dataset(format!(
                "{}:{}: expected {} features, found {}",
                path.display(),
                line + 1,
                dim.unwrap(),
                d
            )));
        }
        let label = values[d];
        if label < 0.0 || label.fract() != 0.0 || !label.is_finite() {
            return Err(Error::Dataset(format!(
                "{}:{}: label {} is not a class index",
                path.display(),
                line + 1,
                label
            )));
        }
        if values[..d].iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!(
                "{}:{}: non-finite feature",
                path.display(),
                line + 1
            )));
        }
        data.extend_from_slice(&values[..d]);
        labels.push(label as usize);
    }
    let dim = dim.ok_or_else(|| Error::Dataset(format!("{}: no samples", path.display())))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::matrix(labels.len(), dim, data)?, labels, classes)
}

fn read_idx(path: &Path) -> Result<(u8, Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Dataset(format!("{}: {}", path.display(), msg));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("not an IDX file"));
    }
    let kind = bytes[2];
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    let values: Vec<f64> = match kind {
        0x08 => body
            .iter()
            .take(count)
            .map(|&b| f64::from(b) / 255.0)
            .collect(),
        0x0D => body
            .chunks_exact(4)
            .take(count)
            .map(|c| f64::from(f32::from_be_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        0x0E => body
            .chunks_exact(8)
            .take(count)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect(),
        other => return Err(bad(&format!("unsupported element type {:#04x}", other))),
    };
    if values.len() != count {
        return Err(bad("truncated body"));
    }
    Ok((kind, dims, values))
}

/// IDX image/label pair (MNIST layout). Unsigned-byte images are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (_, idims, pixels) = read_idx(images)?;
    let (lkind, ldims, raw_labels) = read_idx(labels)?;
    if lkind != 0x08 || ldims.len() != 1 {
        return Err(Error::Dataset(format!(
            "{}: labels must be a 1-D unsigned byte array",
            labels.display()
        )));
    }
    let n = *idims.first().unwrap_or(&0);
    if n != ldims[0] {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            n, ldims[0]
        )));
    }
    let dim: usize = idims[1..].iter().product();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|v| (v * 255.0).round() as usize)
        .collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::matrix(n, dim, pixels)?, labels, classes)
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn blobs() -> BlobSpec {
        BlobSpec {
            classes: 3,
            dims: 4,
            samples: 30,
            noise: 0.5,
            seed: 1,
        }
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = gaussian_blobs(&blobs()).unwrap();
        let b = gaussian_blobs(&blobs()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        for c in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 10);
        }
        let (train, test) = a.split(0.2).unwrap();
        assert_eq!((train.len(), test.len()), (24, 6));
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let f = Tensor::zeros(vec![2, 1]);
        assert!(Dataset::new(f, vec![0, 3], 3).is_err());
    }

    #[test]
    fn csv_with_header() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "a,b,label\n0.5,1.0,1\n-1,2,0\n3,4,2").unwrap();
        let ds = load_csv(file.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.classes(), 3);
        assert_eq!(ds.labels(), &[1, 0, 2]);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "1,2,0\n1,1").unwrap();
        let err = load_csv(file.path()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{}", err);
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let mut bytes = vec![0, 0, 0x08, 3];
        for d in [2u32, 2, 2] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(&[0, 255, 51, 0, 0, 0, 0, 255]);
        fs::write(&img, bytes).unwrap();
        let mut lbytes = vec![0, 0, 0x08, 1];
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[1, 0]);
        fs::write(&lab, lbytes).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels(), &[1, 0]);
        assert!((ds.features().at(0, 2) - 0.2).abs() < 1e-12);
    }
}
