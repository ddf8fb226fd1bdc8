//! Long-tailed partially-labeled datasets: synthesis, corruption, file I/O.
//!
//! A dataset couples an `N x d` feature table with an `N x L` candidate-label
//! bitmask and the hidden true labels. True labels are reachable only through
//! the full [`PllDataset`]; training code receives a [`TrainView`] that
//! cannot see them.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"GBPLL1\n";

/// Splits one master seed into independent sub-seeds (splitmix64 step).
pub(crate) fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub(crate) fn rng_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Packed per-sample candidate-label bitmask, one bit per (sample, label).
///
/// Rows are `ceil(L/8)` bytes; bit `j` of a row lives in byte `j / 8` at bit
/// position `j % 8` (little-endian bit order), matching the on-disk layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateMask {
    rows: usize,
    labels: usize,
    row_bytes: usize,
    bits: Vec<u8>,
}

impl CandidateMask {
    pub fn new(rows: usize, labels: usize) -> Self {
        let row_bytes = labels.div_ceil(8);
        CandidateMask {
            rows,
            labels,
            row_bytes,
            bits: vec![0u8; rows * row_bytes],
        }
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }

    pub fn label_count(&self) -> usize {
        self.labels
    }

    pub fn get(&self, row: usize, label: usize) -> bool {
        debug_assert!(row < self.rows && label < self.labels);
        let byte = self.bits[row * self.row_bytes + label / 8];
        byte & (1 << (label % 8)) != 0
    }

    pub fn set(&mut self, row: usize, label: usize) {
        debug_assert!(row < self.rows && label < self.labels);
        self.bits[row * self.row_bytes + label / 8] |= 1 << (label % 8);
    }

    /// Candidate labels of one row, ascending.
    pub fn row_candidates(&self, row: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels).filter(move |&j| self.get(row, j))
    }

    pub fn row_cardinality(&self, row: usize) -> usize {
        self.row_candidates(row).count()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    /// Rebuilds a mask from its packed byte form, rejecting stray padding bits.
    pub fn from_bytes(rows: usize, labels: usize, bytes: Vec<u8>) -> Result<Self> {
        let row_bytes = labels.div_ceil(8);
        if bytes.len() != rows * row_bytes {
            return Err(Error::shape(format!(
                "candidate mask needs {} bytes for {} rows, got {}",
                rows * row_bytes,
                rows,
                bytes.len()
            )));
        }
        let mask = CandidateMask {
            rows,
            labels,
            row_bytes,
            bits: bytes,
        };
        if !labels.is_multiple_of(8) {
            let pad = !((1u8 << (labels % 8)) - 1);
            for row in 0..rows {
                if mask.bits[row * row_bytes + row_bytes - 1] & pad != 0 {
                    return Err(Error::shape(format!(
                        "stray bits beyond label count at row {row}"
                    )));
                }
            }
        }
        Ok(mask)
    }
}

/// Generation metadata carried through dataset files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub gamma: f64,
    pub psi: f64,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            seed: 0,
            gamma: 1.0,
            psi: 0.0,
        }
    }
}

/// A partially-labeled dataset with hidden ground truth.
///
/// `true_labels` are evaluation-only; training operations go through
/// [`PllDataset::train_view`], which does not expose them.
#[derive(Debug, Clone, PartialEq)]
pub struct PllDataset {
    pub features: Array2<f64>,
    pub candidates: CandidateMask,
    pub true_labels: Vec<u32>,
    pub meta: DatasetMeta,
}

/// Label-free view handed to training operations.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub features: &'a Array2<f64>,
    pub candidates: &'a CandidateMask,
}

impl<'a> TrainView<'a> {
    pub fn sample_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.candidates.label_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

impl PllDataset {
    pub fn new(
        features: Array2<f64>,
        candidates: CandidateMask,
        true_labels: Vec<u32>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let ds = PllDataset {
            features,
            candidates,
            true_labels,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn sample_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.candidates.label_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            features: &self.features,
            candidates: &self.candidates,
        }
    }

    /// Per-class sample counts from the hidden labels.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count()];
        for &y in &self.true_labels {
            counts[y as usize] += 1;
        }
        counts
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.candidates.row_count() != n || self.true_labels.len() != n {
            return Err(Error::shape(format!(
                "feature rows {}, candidate rows {}, labels {}",
                n,
                self.candidates.row_count(),
                self.true_labels.len()
            )));
        }
        let l = self.candidates.label_count();
        for (i, &y) in self.true_labels.iter().enumerate() {
            if (y as usize) >= l {
                return Err(Error::shape(format!(
                    "label {y} out of range for {l} classes at row {i}"
                )));
            }
            if self.candidates.row_cardinality(i) == 0 {
                return Err(Error::invalid(format!("empty candidate set at row {i}")));
            }
            if !self.candidates.get(i, y as usize) {
                return Err(Error::invalid(format!(
                    "true label missing from candidate set at row {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of a long-tailed candidate-label corruption run.
#[derive(Debug, Clone, Copy)]
pub struct LongTailSpec {
    pub class_count: usize,
    pub max_count: usize,
    pub imbalance_ratio: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid("class_count must be at least 2"));
        }
        if self.imbalance_ratio < 1.0 || !self.imbalance_ratio.is_finite() {
            return Err(Error::invalid("imbalance_ratio must be >= 1"));
        }
        if self.max_count < self.class_count {
            return Err(Error::invalid("max_count must be >= class_count"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Geometric class-size profile: `n_j = round(n_1 * gamma^(-(j-1)/(L-1)))`,
/// floored at 1 so no class is empty.
pub fn longtail_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let l = spec.class_count;
    let n1 = spec.max_count as f64;
    let counts = (0..l)
        .map(|j| {
            let exponent = -(j as f64) / (l as f64 - 1.0);
            let c = (n1 * spec.imbalance_ratio.powf(exponent)).round() as usize;
            c.max(1)
        })
        .collect();
    Ok(counts)
}

/// Builds candidate sets: the true label always, each negative label
/// independently with probability `flip_prob`.
pub fn corrupt_labels(
    true_labels: &[u32],
    class_count: usize,
    flip_prob: f64,
    seed: u64,
) -> Result<CandidateMask> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::invalid("flip_prob must lie in [0, 1]"));
    }
    let mut rng = rng_from(seed);
    let mut mask = CandidateMask::new(true_labels.len(), class_count);
    for (i, &y) in true_labels.iter().enumerate() {
        if (y as usize) >= class_count {
            return Err(Error::invalid(format!(
                "label {y} out of range for {class_count} classes at row {i}"
            )));
        }
        mask.set(i, y as usize);
        for j in 0..class_count {
            if j != y as usize && rng.random::<f64>() < flip_prob {
                mask.set(i, j);
            }
        }
    }
    Ok(mask)
}

/// Class centers used by [`synth_blobs`]: evenly spaced on a circle in the
/// first two dimensions, scaled so adjacent centers sit exactly `separation`
/// apart (the pairwise minimum).
pub fn blob_centers(class_count: usize, dim: usize, separation: f64) -> Result<Array2<f64>> {
    if dim < 2 {
        return Err(Error::invalid("dim must be at least 2"));
    }
    if separation <= 0.0 {
        return Err(Error::invalid("separation must be positive"));
    }
    let mut centers = Array2::zeros((class_count, dim));
    if class_count > 1 {
        let radius = separation / (2.0 * (std::f64::consts::PI / class_count as f64).sin());
        for k in 0..class_count {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / class_count as f64;
            centers[[k, 0]] = radius * angle.cos();
            centers[[k, 1]] = radius * angle.sin();
        }
    }
    Ok(centers)
}

/// Draws `counts[k]` samples around center `k` with isotropic Gaussian noise.
pub fn synth_blobs(
    class_counts: &[usize],
    dim: usize,
    separation: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<(Array2<f64>, Vec<u32>)> {
    if class_counts.is_empty() || class_counts.contains(&0) {
        return Err(Error::invalid("every class count must be positive"));
    }
    let centers = blob_centers(class_counts.len(), dim, separation)?;
    let total: usize = class_counts.iter().sum();
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut rng = rng_from(seed);
    let normal = StandardNormal;
    let mut row = 0;
    for (k, &count) in class_counts.iter().enumerate() {
        for _ in 0..count {
            for j in 0..dim {
                let z: f64 = normal.sample(&mut rng);
                features[[row, j]] = centers[[k, j]] + noise_scale * z;
            }
            labels.push(k as u32);
            row += 1;
        }
    }
    Ok((features, labels))
}

/// Full synthetic pipeline: long-tail counts, blobs, candidate corruption.
pub fn synth_longtail(
    spec: &LongTailSpec,
    dim: usize,
    separation: f64,
    noise_scale: f64,
) -> Result<PllDataset> {
    let counts = longtail_counts(spec)?;
    let (features, labels) = synth_blobs(
        &counts,
        dim,
        separation,
        noise_scale,
        derive_seed(spec.seed, 1),
    )?;
    let mask = corrupt_labels(
        &labels,
        spec.class_count,
        spec.flip_prob,
        derive_seed(spec.seed, 2),
    )?;
    PllDataset::new(
        features,
        mask,
        labels,
        DatasetMeta {
            seed: spec.seed,
            gamma: spec.imbalance_ratio,
            psi: spec.flip_prob,
        },
    )
}

/// Writes the self-describing binary dataset format (see README).
pub fn save_dataset(ds: &PllDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::new();
    let _ = write!(
        header,
        "n={}\nl={}\nd={}\nseed={}\ngamma={}\npsi={}\n\n",
        ds.sample_count(),
        ds.class_count(),
        ds.feature_dim(),
        ds.meta.seed,
        ds.meta.gamma,
        ds.meta.psi
    );
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(header.as_bytes()).map_err(io)?;
    for &v in ds.features.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.write_all(ds.candidates.as_bytes()).map_err(io)?;
    for &y in &ds.true_labels {
        w.write_all(&y.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a dataset file back; `load(save(ds))` is bit-exact.
pub fn load_dataset(path: &Path) -> Result<PllDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;

    if !buf.starts_with(MAGIC) {
        return Err(Error::format(path, "missing GBPLL1 magic"));
    }
    let mut pos = MAGIC.len();
    let mut fields: Vec<(String, String)> = Vec::new();
    loop {
        let end = buf[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|o| pos + o)
            .ok_or_else(|| Error::format(path, "unterminated header"))?;
        let line = std::str::from_utf8(&buf[pos..end])
            .map_err(|_| Error::format(path, "header is not UTF-8"))?;
        pos = end + 1;
        if line.is_empty() {
            break;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("malformed header line `{line}`")))?;
        fields.push((key.to_string(), value.to_string()));
    }
    let lookup = |key: &str| -> Result<&str> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(path, format!("missing header key `{key}`")))
    };
    fn parse<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::format(path, format!("bad value for `{key}`: `{value}`")))
    }
    let n: usize = parse(path, "n", lookup("n")?)?;
    let l: usize = parse(path, "l", lookup("l")?)?;
    let d: usize = parse(path, "d", lookup("d")?)?;
    let seed: u64 = parse(path, "seed", lookup("seed")?)?;
    let gamma: f64 = parse(path, "gamma", lookup("gamma")?)?;
    let psi: f64 = parse(path, "psi", lookup("psi")?)?;
    if l == 0 {
        return Err(Error::format(path, "class count must be positive"));
    }

    let body = &buf[pos..];
    let feat_bytes = n * d * 8;
    let mask_bytes = n * l.div_ceil(8);
    let label_bytes = n * 4;
    if body.len() != feat_bytes + mask_bytes + label_bytes {
        // Name the row where the feature block would run short.
        let detail = if body.len() < feat_bytes {
            let full_rows = if d == 0 { 0 } else { body.len() / (d * 8) };
            format!("feature block ends at row {full_rows} of {n}")
        } else {
            format!(
                "body has {} bytes, header implies {}",
                body.len(),
                feat_bytes + mask_bytes + label_bytes
            )
        };
        return Err(Error::format(path, detail));
    }

    let mut features = Array2::zeros((n, d));
    for (idx, chunk) in body[..feat_bytes].chunks_exact(8).enumerate() {
        features[[idx / d.max(1), idx % d.max(1)]] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    let mask = CandidateMask::from_bytes(n, l, body[feat_bytes..feat_bytes + mask_bytes].to_vec())
        .map_err(|e| Error::format(path, e.to_string()))?;
    let labels: Vec<u32> = body[feat_bytes + mask_bytes..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    PllDataset::new(features, mask, labels, DatasetMeta { seed, gamma, psi }).map_err(|e| match e {
        Error::InvalidParam(msg) | Error::Shape(msg) => Error::format(path, msg),
        other => other,
    })
}

/// Empirical class frequencies of a label list.
pub fn class_frequencies(labels: &[u32], class_count: usize) -> Array1<f64> {
    let mut freq = Array1::zeros(class_count);
    for &y in labels {
        freq[y as usize] += 1.0;
    }
    if !labels.is_empty() {
        freq /= labels.len() as f64;
    }
    freq
}
