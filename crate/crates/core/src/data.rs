//! Labeled sample sets, synthetic generators and raw tensor files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Array;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    /// `[N × ...]`, one sample per leading index.
    pub features: Array,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl LabeledSet {
    pub fn new(features: Array, labels: Vec<usize>, k: usize) -> Result<Self> {
        if features.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Input(format!("label {y} is outside [0, {k})")));
        }
        Ok(Self { features, labels, k })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features as an `N × d` matrix.
    pub fn flattened(&self) -> Array {
        let n = self.len();
        self.features.reshape(&[n, self.features.len() / n]).expect("same element count")
    }
}

/// `K` Gaussian clusters in `d` dimensions. Class means are drawn once per
/// seed from `N(0, separation²·I)`; samples add unit-variance noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub dim: usize,
    pub k: usize,
    pub separation: f64,
    pub seed: u64,
}

impl BlobSpec {
    fn means(&self) -> Vec<f64> {
        let mut r = rng::stream(self.seed, 0);
        (0..self.k * self.dim).map(|_| self.separation * rng::normal(&mut r)).collect()
    }

    /// `n` samples with balanced labels `i mod K`, drawn from sample stream `stream`.
    pub fn sample(&self, n: usize, stream: u64) -> Result<LabeledSet> {
        if self.dim == 0 || self.k < 2 || n == 0 {
            return Err(Error::Config(format!(
                "blobs need dim ≥ 1, k ≥ 2 and n ≥ 1 (got dim {}, k {}, n {n})",
                self.dim, self.k
            )));
        }
        let means = self.means();
        let mut r = rng::stream(self.seed, stream + 1);
        let labels: Vec<usize> = (0..n).map(|i| i % self.k).collect();
        let mut data = Vec::with_capacity(n * self.dim);
        for &y in &labels {
            for f in 0..self.dim {
                data.push(means[y * self.dim + f] + rng::normal(&mut r));
            }
        }
        LabeledSet::new(Array::new(vec![n, self.dim], data)?, labels, self.k)
    }
}

/// Single-channel `H×W` images. Each class owns a prototype made of a few
/// plane waves with class-specific frequencies and phases; a sample is its
/// prototype, circularly shifted by up to `max_shift` pixels, scaled by a
/// random contrast in `[1 − contrast_jitter, 1 + contrast_jitter]`, plus
/// i.i.d. pixel noise of standard deviation `pixel_noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyImageSpec {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub waves_per_class: usize,
    pub max_shift: usize,
    pub contrast_jitter: f64,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl TinyImageSpec {
    pub fn new(height: usize, width: usize, k: usize, seed: u64) -> Self {
        Self { height, width, k, waves_per_class: 2, max_shift: 1, contrast_jitter: 0.3, pixel_noise: 0.6, seed }
    }

    fn prototypes(&self) -> Vec<f64> {
        use std::f64::consts::PI;
        let (h, w) = (self.height, self.width);
        let mut r = rng::stream(self.seed, 0);
        let mut out = vec![0.0; self.k * h * w];
        for c in 0..self.k {
            for _ in 0..self.waves_per_class {
                let (u, v) = loop {
                    let u = rng::below(&mut r, h.div_ceil(2).max(1));
                    let v = rng::below(&mut r, w.div_ceil(2).max(1));
                    if u + v > 0 {
                        break (u, v);
                    }
                };
                let phi = rng::uniform_range(&mut r, -PI, PI);
                for y in 0..h {
                    for x in 0..w {
                        let t = 2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        out[(c * h + y) * w + x] += (t + phi).cos();
                    }
                }
            }
        }
        out
    }

    pub fn sample(&self, n: usize, stream: u64) -> Result<LabeledSet> {
        if self.height == 0 || self.width == 0 || self.k < 2 || n == 0 || self.waves_per_class == 0 {
            return Err(Error::Config(format!(
                "tiny images need positive extents, k ≥ 2, n ≥ 1 and at least one wave (got {}×{}, k {}, n {n})",
                self.height, self.width, self.k
            )));
        }
        if self.height.max(self.width) < 2 {
            return Err(Error::Config("tiny images need at least two pixels along one axis".into()));
        }
        let (h, w) = (self.height, self.width);
        let protos = self.prototypes();
        let mut r = rng::stream(self.seed, stream + 1);
        let labels: Vec<usize> = (0..n).map(|i| i % self.k).collect();
        let span = 2 * self.max_shift + 1;
        let mut data = Vec::with_capacity(n * h * w);
        for &y in &labels {
            let dy = rng::below(&mut r, span) as isize - self.max_shift as isize;
            let dx = rng::below(&mut r, span) as isize - self.max_shift as isize;
            let contrast = rng::uniform_range(&mut r, 1.0 - self.contrast_jitter, 1.0 + self.contrast_jitter);
            for py in 0..h {
                for px in 0..w {
                    let sy = (py as isize - dy).rem_euclid(h as isize) as usize;
                    let sx = (px as isize - dx).rem_euclid(w as isize) as usize;
                    let clean = protos[(y * h + sy) * w + sx];
                    data.push(contrast * clean + self.pixel_noise * rng::normal(&mut r));
                }
            }
        }
        LabeledSet::new(Array::new(vec![n, 1, h, w], data)?, labels, self.k)
    }
}

pub const TENSOR_MAGIC: &str = "PADDLES-TENSOR";
pub const TENSOR_DTYPE: &str = "float64-le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    magic: String,
    dtype: String,
    shape: Vec<usize>,
}

/// Writes `<stem>.hdr` (JSON: magic, dtype, shape) and `<stem>.bin`
/// (raw little-endian `f64`).
pub fn write_tensor(dir: &Path, stem: &str, a: &Array) -> Result<()> {
    let header = TensorHeader { magic: TENSOR_MAGIC.into(), dtype: TENSOR_DTYPE.into(), shape: a.shape().to_vec() };
    fs::write(dir.join(format!("{stem}.hdr")), serde_json::to_string(&header)?)?;
    fs::write(dir.join(format!("{stem}.bin")), f64_to_le_bytes(a.data()))?;
    Ok(())
}

pub fn read_tensor(dir: &Path, stem: &str) -> Result<Array> {
    let header: TensorHeader = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.hdr")))?)?;
    if header.magic != TENSOR_MAGIC || header.dtype != TENSOR_DTYPE {
        return Err(Error::Input(format!(
            "{stem}.hdr: unexpected magic {:?} / dtype {:?}",
            header.magic, header.dtype
        )));
    }
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    Array::new(header.shape, f64_from_le_bytes(&bytes)?)
}

pub fn f64_to_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_le_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Input(format!("binary blob of {} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic_and_balanced() {
        let spec = TinyImageSpec::new(8, 8, 10, 4);
        let a = spec.sample(50, 0).unwrap();
        let b = spec.sample(50, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.features.shape(), &[50, 1, 8, 8]);
        assert_eq!(a.labels.iter().filter(|&&y| y == 3).count(), 5);
        assert_ne!(spec.sample(50, 1).unwrap().features, a.features);

        let blobs = BlobSpec { dim: 5, k: 3, separation: 2.0, seed: 1 };
        let x = blobs.sample(9, 0).unwrap();
        assert_eq!(x.features.shape(), &[9, 5]);
        assert_eq!(x, blobs.sample(9, 0).unwrap());
    }

    #[test]
    fn tensor_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array::new(vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 1.0 / 3.0]).unwrap();
        write_tensor(dir.path(), "t", &a).unwrap();
        let b = read_tensor(dir.path(), "t").unwrap();
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t.hdr"), r#"{"magic":"NOPE","dtype":"float64-le","shape":[1]}"#).unwrap();
        fs::write(dir.path().join("t.bin"), 1.0f64.to_le_bytes()).unwrap();
        assert!(read_tensor(dir.path(), "t").is_err());
    }
}
