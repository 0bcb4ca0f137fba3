//! Synthetic label corruption with known ground truth.
//!
//! Three generators are provided:
//!
//! * symmetric: with probability `ε` a label moves to one of the other `K−1`
//!   classes, chosen uniformly, so the expected disagreement rate is `ε`;
//! * pairflip: with probability `ε` a label moves to its successor class
//!   `(y+1) mod K`;
//! * instance-dependent: each sample draws its own flip rate `q_i` from a
//!   normal around `ε` (std 0.1) truncated to `[0, 1]`; the wrong-class
//!   distribution is the softmax of a random projection of the sample's
//!   features with the clean class masked out.
//!
//! All draws come from [`crate::rng`] so a `(input, seed)` pair always maps to
//! the same labels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Array;
use crate::data::{read_tensor, write_tensor, LabeledSet};
use crate::error::{Error, Result};
use crate::rng;

pub const INSTANCE_RATE_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Symmetric,
    Pairflip,
    Instance,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Pairflip => "pairflip",
            NoiseKind::Instance => "instance",
        }
    }
}

/// Output of a noise generator.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLabels {
    pub kind: NoiseKind,
    pub epsilon: f64,
    pub seed: u64,
    pub labels: Vec<usize>,
    /// Per-sample flip rates (instance-dependent noise only).
    pub q: Option<Vec<f64>>,
}

/// Per-sample noise record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleNoise {
    pub kind: NoiseKind,
    pub q: Option<f64>,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub features: Array,
    /// Ground truth; only metrics may look at it.
    pub clean_labels: Vec<usize>,
    pub noisy_labels: Vec<usize>,
    pub k: usize,
    pub kind: NoiseKind,
    pub epsilon: f64,
    pub seed: u64,
    pub q: Option<Vec<f64>>,
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {k}")));
    }
    if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::Input(format!("label {y} at index {i} is outside [0, {k})")));
    }
    Ok(())
}

fn check_rate(epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Input(format!("noise rate {epsilon} is outside [0, 1]")));
    }
    Ok(())
}

pub fn symmetric_noise(clean: &[usize], k: usize, epsilon: f64, seed: u64) -> Result<NoisyLabels> {
    check_labels(clean, k)?;
    check_rate(epsilon)?;
    let mut r = rng::stream(seed, 0);
    let labels = clean
        .iter()
        .map(|&y| {
            if rng::uniform(&mut r) < epsilon {
                let other = rng::below(&mut r, k - 1);
                if other >= y {
                    other + 1
                } else {
                    other
                }
            } else {
                y
            }
        })
        .collect();
    Ok(NoisyLabels { kind: NoiseKind::Symmetric, epsilon, seed, labels, q: None })
}

pub fn pairflip_noise(clean: &[usize], k: usize, epsilon: f64, seed: u64) -> Result<NoisyLabels> {
    check_labels(clean, k)?;
    check_rate(epsilon)?;
    if epsilon > 0.5 {
        return Err(Error::Input(format!(
            "pairflip rate {epsilon} exceeds 0.5; above that the successor class becomes the majority and the clean label is no longer identifiable"
        )));
    }
    let mut r = rng::stream(seed, 0);
    let labels = clean
        .iter()
        .map(|&y| if rng::uniform(&mut r) < epsilon { (y + 1) % k } else { y })
        .collect();
    Ok(NoisyLabels { kind: NoiseKind::Pairflip, epsilon, seed, labels, q: None })
}

/// Draws from `Normal(mean, std²)` restricted to `[0, 1]` by rejection.
fn truncated_rate(r: &mut rng::StreamRng, mean: f64, std: f64) -> f64 {
    loop {
        let z = mean + std * rng::normal(r);
        if (0.0..=1.0).contains(&z) {
            return z;
        }
    }
}

/// Flip distribution for one sample: `1 − q` on the clean class and
/// `q · softmax(x·W)` over the others.
pub fn instance_flip_distribution(x: &[f64], projection: &[f64], k: usize, clean: usize, q: f64) -> Vec<f64> {
    let mut scores = vec![0.0; k];
    for (f, &xf) in x.iter().enumerate() {
        for (c, s) in scores.iter_mut().enumerate() {
            *s += xf * projection[f * k + c];
        }
    }
    let m = scores
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != clean)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(c, &s)| if c == clean { 0.0 } else { (s - m).exp() })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p *= q / total;
    }
    probs[clean] = 1.0 - q;
    probs
}

fn sample_categorical(r: &mut rng::StreamRng, probs: &[f64]) -> usize {
    let u = rng::uniform(r);
    let mut acc = 0.0;
    for (c, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // rounding left u above the final partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Instance-dependent noise.
///
/// Draw order: the `d×K` projection (row-major, standard normal), then per
/// sample its rate `q_i` followed by one categorical draw.
pub fn instance_noise(features: &Array, clean: &[usize], k: usize, epsilon: f64, seed: u64) -> Result<NoisyLabels> {
    check_labels(clean, k)?;
    check_rate(epsilon)?;
    if features.shape()[0] != clean.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} labels",
            features.shape()[0],
            clean.len()
        )));
    }
    let d = features.len() / clean.len().max(1);
    if d == 0 || clean.is_empty() {
        return Err(Error::Input("instance noise needs at least one feature per sample".into()));
    }
    let mut r = rng::stream(seed, 0);
    let projection: Vec<f64> = (0..d * k).map(|_| rng::normal(&mut r)).collect();
    let mut labels = Vec::with_capacity(clean.len());
    let mut q = Vec::with_capacity(clean.len());
    for (i, &y) in clean.iter().enumerate() {
        let qi = truncated_rate(&mut r, epsilon, INSTANCE_RATE_STD);
        let probs = instance_flip_distribution(features.row(i), &projection, k, y, qi);
        labels.push(sample_categorical(&mut r, &probs));
        q.push(qi);
    }
    Ok(NoisyLabels { kind: NoiseKind::Instance, epsilon, seed, labels, q: Some(q) })
}

impl NoisyDataset {
    pub fn new(set: LabeledSet, noise: NoisyLabels) -> Result<Self> {
        check_labels(&set.labels, set.k)?;
        check_labels(&noise.labels, set.k)?;
        if noise.labels.len() != set.labels.len() {
            return Err(Error::Dimension(format!(
                "{} noisy labels for {} samples",
                noise.labels.len(),
                set.labels.len()
            )));
        }
        Ok(Self {
            features: set.features,
            clean_labels: set.labels,
            noisy_labels: noise.labels,
            k: set.k,
            kind: noise.kind,
            epsilon: noise.epsilon,
            seed: noise.seed,
            q: noise.q,
        })
    }

    /// A dataset whose observed labels are the clean ones.
    pub fn clean(set: LabeledSet) -> Result<Self> {
        let labels = set.labels.clone();
        Self::new(set, NoisyLabels { kind: NoiseKind::None, epsilon: 0.0, seed: 0, labels, q: None })
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn is_flipped(&self, i: usize) -> bool {
        self.clean_labels[i] != self.noisy_labels[i]
    }

    pub fn sample_noise(&self, i: usize) -> SampleNoise {
        SampleNoise { kind: self.kind, q: self.q.as_ref().map(|q| q[i]), flipped: self.is_flipped(i) }
    }

    /// The observed (noisy) view as a plain labeled set.
    pub fn observed(&self) -> LabeledSet {
        LabeledSet { features: self.features.clone(), labels: self.noisy_labels.clone(), k: self.k }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_tensor(dir, "features", &self.features)?;
        let labels = LabelFile {
            k: self.k,
            noise_kind: self.kind,
            epsilon: self.epsilon,
            seed: self.seed,
            clean_labels: self.clean_labels.clone(),
            noisy_labels: self.noisy_labels.clone(),
            q: self.q.clone(),
        };
        fs::write(dir.join(LABEL_FILE), serde_json::to_string_pretty(&labels)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let features = read_tensor(dir, "features")?;
        let labels: LabelFile = serde_json::from_str(&fs::read_to_string(dir.join(LABEL_FILE))?)?;
        if let Some(q) = &labels.q {
            if q.len() != labels.clean_labels.len() {
                return Err(Error::Input(format!("{} flip rates for {} samples", q.len(), labels.clean_labels.len())));
            }
        }
        let set = LabeledSet::new(features, labels.clean_labels, labels.k)?;
        Self::new(
            set,
            NoisyLabels {
                kind: labels.noise_kind,
                epsilon: labels.epsilon,
                seed: labels.seed,
                labels: labels.noisy_labels,
                q: labels.q,
            },
        )
    }
}

pub const LABEL_FILE: &str = "labels.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelFile {
    k: usize,
    noise_kind: NoiseKind,
    epsilon: f64,
    seed: u64,
    clean_labels: Vec<usize>,
    noisy_labels: Vec<usize>,
    q: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseReport {
    pub disagreement: f64,
    /// `counts[clean][noisy]`.
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized `counts`; rows of absent classes are zero.
    pub transition: Vec<Vec<f64>>,
    /// Number of flipped samples per clean class.
    pub flips_per_class: Vec<usize>,
}

pub fn noise_report(ds: &NoisyDataset) -> NoiseReport {
    let k = ds.k;
    let mut counts = vec![vec![0usize; k]; k];
    for (&y, &z) in ds.clean_labels.iter().zip(&ds.noisy_labels) {
        counts[y][z] += 1;
    }
    let transition = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
        })
        .collect();
    let flips_per_class: Vec<usize> =
        counts.iter().enumerate().map(|(y, row)| row.iter().sum::<usize>() - row[y]).collect();
    let flipped: usize = flips_per_class.iter().sum();
    let disagreement = if ds.is_empty() { 0.0 } else { flipped as f64 / ds.len() as f64 };
    NoiseReport { disagreement, counts, transition, flips_per_class }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|i| i % k).collect()
    }

    #[test]
    fn zero_rate_is_identity() {
        let clean = labels(1000, 10);
        assert_eq!(symmetric_noise(&clean, 10, 0.0, 3).unwrap().labels, clean);
        assert_eq!(pairflip_noise(&clean, 10, 0.0, 3).unwrap().labels, clean);
    }

    #[test]
    fn forced_symmetric_flip_with_two_classes() {
        let clean = labels(200, 2);
        let noisy = symmetric_noise(&clean, 2, 1.0, 11).unwrap().labels;
        assert!(clean.iter().zip(&noisy).all(|(a, b)| *b == 1 - *a));
    }

    #[test]
    fn pairflip_wraps_around() {
        let noisy = pairflip_noise(&[4], 5, 0.5, 0).unwrap();
        // find a seed that flips the single sample
        let flipped = (0..64)
            .map(|s| pairflip_noise(&[4], 5, 0.5, s).unwrap().labels[0])
            .find(|&z| z != 4)
            .unwrap();
        assert_eq!(flipped, 0);
        assert!(noisy.labels[0] == 4 || noisy.labels[0] == 0);
    }

    #[test]
    fn rate_validation() {
        let clean = labels(10, 3);
        assert!(matches!(symmetric_noise(&clean, 3, 1.2, 0), Err(Error::Input(_))));
        assert!(matches!(symmetric_noise(&clean, 3, -0.1, 0), Err(Error::Input(_))));
        let err = pairflip_noise(&clean, 3, 0.6, 0).unwrap_err();
        assert!(err.to_string().contains("identifiable"));
        assert!(symmetric_noise(&clean, 1, 0.1, 0).is_err());
        assert!(symmetric_noise(&[0, 3], 3, 0.1, 0).is_err());
    }

    #[test]
    fn instance_noise_rejects_empty_features() {
        let features = Array::zeros(&[0usize.max(1), 1]);
        assert!(instance_noise(&features, &[], 3, 0.2, 0).is_err());
    }

    #[test]
    fn instance_distribution_is_a_pure_function() {
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = [0.3, -1.0, 2.0];
        let a = instance_flip_distribution(&x, &w, 4, 2, 0.35);
        let b = instance_flip_distribution(&x, &w, 4, 2, 0.35);
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((a[2] - 0.65).abs() < 1e-15);
    }

    #[test]
    fn instance_zero_rate_records_small_rates() {
        let mut r = rng::stream(0, 0);
        let features = Array::new(vec![500, 4], (0..2000).map(|_| rng::normal(&mut r)).collect()).unwrap();
        let clean = labels(500, 5);
        let a = instance_noise(&features, &clean, 5, 0.0, 9).unwrap();
        let b = instance_noise(&features, &clean, 5, 0.0, 9).unwrap();
        let qa = a.q.as_ref().unwrap();
        assert!(qa.iter().all(|&q| q >= 0.0));
        let mean = qa.iter().sum::<f64>() / qa.len() as f64;
        assert!(mean < 0.12, "mean rate {mean}");
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(qa), bits(b.q.as_ref().unwrap()));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn report_on_clean_data() {
        let set = LabeledSet::new(Array::zeros(&[6, 1]), labels(6, 3), 3).unwrap();
        let ds = NoisyDataset::clean(set).unwrap();
        let rep = noise_report(&ds);
        assert_eq!(rep.disagreement, 0.0);
        for (y, row) in rep.transition.iter().enumerate() {
            for (z, &v) in row.iter().enumerate() {
                assert_eq!(v, if y == z { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(rep.flips_per_class, vec![0, 0, 0]);
    }
}
