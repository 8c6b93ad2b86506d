//! Datasets: synthetic hypersphere clusters, IDX image files, CSV
//! persistence, stratified splitting and per-epoch batching.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{NptError, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot, norm, Scalar};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Largest cosine allowed between two synthetic class directions.
const MAX_DIRECTION_COSINE: f64 = 0.95;
const DIRECTION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Matrix<T>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl<T: Scalar> Dataset<T> {
    /// Checks labels are in range and every class has a sample.
    pub fn new(
        inputs: Matrix<T>,
        labels: Vec<usize>,
        class_count: usize,
        name: &str,
    ) -> Result<Self> {
        let ds = Self::unchecked(inputs, labels, class_count, name)?;
        let counts = ds.class_counts();
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(NptError::InvalidDataset(format!(
                "class {empty} has no samples"
            )));
        }
        Ok(ds)
    }

    /// Like [`Dataset::new`] but allows classes without samples, as in a
    /// held-out split.
    fn unchecked(
        inputs: Matrix<T>,
        labels: Vec<usize>,
        class_count: usize,
        name: &str,
    ) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(NptError::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(NptError::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
            name: name.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Inputs and labels for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Matrix<T>, Vec<usize>) {
        (
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Shuffled mini-batches for one epoch; see [`batch_indices`].
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: usize,
    ) -> Result<Vec<(Matrix<T>, Vec<usize>)>> {
        Ok(batch_indices(self.len(), batch_size, seed, epoch)?
            .iter()
            .map(|idx| self.gather(idx))
            .collect())
    }

    /// Writes `label,x0,...,x{d-1}` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.input_dim()).map(|i| format!("x{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (row, label) in self.inputs.iter_rows().zip(&self.labels) {
            write!(w, "{label}")?;
            for v in row {
                // shortest representation that parses back to the same value
                write!(w, ",{:?}", v.as_f64())?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]. The class count is one
    /// past the largest label.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| NptError::Parse("empty CSV".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"label") || cols.len() < 2 {
            return Err(NptError::Parse(format!("unexpected CSV header '{header}'")));
        }
        let dim = cols.len() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(NptError::Parse(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 2,
                    dim + 1,
                    fields.len()
                )));
            }
            labels.push(
                fields[0]
                    .parse::<usize>()
                    .map_err(|e| NptError::Parse(format!("line {}: {e}", lineno + 2)))?,
            );
            for f in &fields[1..] {
                let v: f64 = f
                    .parse()
                    .map_err(|e| NptError::Parse(format!("line {}: {e}", lineno + 2)))?;
                data.push(T::lit(v));
            }
        }
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(
            Matrix::from_vec(labels.len(), dim, data)?,
            labels,
            classes,
            &name,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(NptError::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.class_count
            )));
        }
        if self.input_dim < 2 {
            return Err(NptError::InvalidArgument(format!(
                "input dimension must be at least 2, got {}",
                self.input_dim
            )));
        }
        if self.samples_per_class < 1 {
            return Err(NptError::InvalidArgument(
                "samples per class must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(NptError::InvalidArgument(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v = gaussian_vec(dim, rng);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Clusters of unit vectors around random, pairwise well-separated class
/// directions. Samples are `normalize(mu_c + sigma * N(0, I))`, class-major.
pub fn gen_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(spec.class_count);
    for _ in 0..spec.class_count {
        let accepted = (0..DIRECTION_ATTEMPTS).find_map(|_| {
            let mu = unit_vec(spec.input_dim, &mut rng);
            directions
                .iter()
                .all(|d| dot(d, &mu) <= MAX_DIRECTION_COSINE)
                .then_some(mu)
        });
        match accepted {
            Some(mu) => directions.push(mu),
            None => {
                return Err(NptError::UnseparableSpec {
                    classes: spec.class_count,
                    dim: spec.input_dim,
                })
            }
        }
    }

    let n = spec.class_count * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mu) in directions.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let sample: Vec<f64> = if spec.noise_sigma == 0.0 {
                mu.clone()
            } else {
                let noisy: Vec<f64> = mu
                    .iter()
                    .zip(gaussian_vec(spec.input_dim, &mut rng))
                    .map(|(m, g)| m + spec.noise_sigma * g)
                    .collect();
                let nn = norm(&noisy);
                noisy.into_iter().map(|x| x / nn).collect()
            };
            data.extend(sample.into_iter().map(T::lit));
            labels.push(c);
        }
    }
    Dataset::new(
        Matrix::from_vec(n, spec.input_dim, data)?,
        labels,
        spec.class_count,
        "synthetic",
    )
}

/// `count` points drawn uniformly on the unit sphere in `dim` dimensions.
pub fn random_unit_inputs<T: Scalar>(count: usize, dim: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..count)
        .flat_map(|_| unit_vec(dim, &mut rng))
        .map(T::lit)
        .collect();
    Matrix::from_vec(count, dim, data).expect("shape is consistent by construction")
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(NptError::TruncatedFile(format!(
                "{}: wanted {n} bytes at offset {}, file has {}",
                self.what,
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes an IDX image file: big-endian magic, count, rows, cols, then
/// one unsigned byte per pixel. Pixels are scaled to `[0, 1]`, row-major.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Matrix<T>> {
    let mut r = ByteReader {
        bytes,
        pos: 0,
        what: "images",
    };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(NptError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(count * rows * cols)?;
    let scale = T::lit(255.0);
    let data = pixels.iter().map(|&p| T::lit(p as f64) / scale).collect();
    Matrix::from_vec(count, rows * cols, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = ByteReader {
        bytes,
        pos: 0,
        what: "labels",
    };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(NptError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = r.u32_be()? as usize;
    Ok(r.take(count)?.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair. The class count is one past the
/// largest label.
pub fn load_idx_pair<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let images = parse_idx_images::<T>(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.rows() != labels.len() {
        return Err(NptError::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels, classes, &name)
}

/// Per-class stratified split. Each class sends `floor(n * test_fraction)`
/// samples to the test side; the rest stay in train, keeping original order.
pub fn split<T: Scalar>(
    ds: &Dataset<T>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(NptError::InvalidArgument(format!(
            "test fraction must lie in [0, 1], got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_mask = vec![false; ds.len()];
    for c in 0..ds.class_count {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        let n = members.len();
        // guard against 0.3 * 10 landing just below 3
        let n_test = ((n as f64) * test_fraction + 1e-9).floor() as usize;
        if n > 0 && n_test >= n {
            return Err(NptError::EmptyClass(c));
        }
        members.shuffle(&mut rng);
        for &i in &members[..n_test] {
            test_mask[i] = true;
        }
    }
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| test_mask[i]);
    let make = |idx: &[usize], suffix: &str| {
        let (inputs, labels) = ds.gather(idx);
        Dataset::unchecked(
            inputs,
            labels,
            ds.class_count,
            &format!("{}-{suffix}", ds.name),
        )
    };
    Ok((make(&train_idx, "train")?, make(&test_idx, "test")?))
}

/// Index batches covering `0..n` exactly once, shuffled with seed `seed ^ epoch`.
/// The last batch may be short.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(NptError::InvalidArgument(
            "batch size must be positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
