//! Confident-sample selection and its quality metrics.

use serde::{Deserialize, Serialize};

use super::{argmax, test_accuracy, Phase, Session};
use crate::autograd::{Array, OptimizerState};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::SegmentedModel;
use crate::noise::NoisyDataset;
use crate::rng;

/// Deterministic input perturbation used when averaging predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Augmentation {
    Identity,
    /// Adds `N(0, (sigma · std_f)²)` to feature `f`, where `std_f` is the
    /// feature's standard deviation over the set being augmented. Sample `i`
    /// draws from stream `i` of `seed`.
    GaussianJitter { sigma: f64, seed: u64 },
}

impl Augmentation {
    pub fn apply(&self, features: &Array) -> Array {
        match *self {
            Augmentation::Identity => features.clone(),
            Augmentation::GaussianJitter { sigma, seed } => {
                let n = features.shape()[0];
                let d = features.len() / n;
                let x = features.data();
                let mut std = vec![0.0; d];
                for f in 0..d {
                    let mean = (0..n).map(|i| x[i * d + f]).sum::<f64>() / n as f64;
                    let var = (0..n).map(|i| (x[i * d + f] - mean).powi(2)).sum::<f64>() / n as f64;
                    std[f] = var.sqrt();
                }
                let mut out = features.clone();
                let data = out.data_mut();
                for i in 0..n {
                    let mut r = rng::stream(seed, i as u64);
                    for f in 0..d {
                        data[i * d + f] += sigma * std[f] * rng::normal(&mut r);
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPair {
    pub first: Augmentation,
    pub second: Augmentation,
}

impl AugmentPair {
    /// Identity plus Gaussian jitter at `sigma` of each feature's std.
    pub fn jitter(sigma: f64, seed: u64) -> Self {
        Self { first: Augmentation::Identity, second: Augmentation::GaussianJitter { sigma, seed } }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidentSplit {
    /// `(index, observed label)` of samples whose label agrees with the prediction.
    pub labeled: Vec<(usize, usize)>,
    /// Indices of the remaining samples.
    pub unlabeled: Vec<usize>,
    /// Augmentation-averaged prediction for every sample.
    pub predicted: Vec<usize>,
}

impl ConfidentSplit {
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(i, _)| i).collect()
    }
}

fn softmax_rows(logits: &Array) -> Array {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Splits samples by whether `argmax ½(p_a + p_b)` equals the observed label.
pub fn split_from_probabilities(probs_a: &Array, probs_b: &Array, noisy: &[usize]) -> Result<ConfidentSplit> {
    if probs_a.shape() != probs_b.shape() || probs_a.rank() != 2 || probs_a.shape()[0] != noisy.len() {
        return Err(Error::Dimension(format!(
            "probability tables {:?} / {:?} for {} labels",
            probs_a.shape(),
            probs_b.shape(),
            noisy.len()
        )));
    }
    let mut split = ConfidentSplit { labeled: Vec::new(), unlabeled: Vec::new(), predicted: Vec::with_capacity(noisy.len()) };
    for (i, &y) in noisy.iter().enumerate() {
        let mean: Vec<f64> = probs_a.row(i).iter().zip(probs_b.row(i)).map(|(a, b)| 0.5 * (a + b)).collect();
        let pred = argmax(&mean);
        split.predicted.push(pred);
        if pred == y {
            split.labeled.push((i, y));
        } else {
            split.unlabeled.push(i);
        }
    }
    Ok(split)
}

pub fn select_confident(model: &SegmentedModel, data: &NoisyDataset, augment: &AugmentPair) -> Result<ConfidentSplit> {
    let pa = softmax_rows(&model.predict_logits(&augment.first.apply(&data.features))?);
    let pb = softmax_rows(&model.predict_logits(&augment.second.apply(&data.features))?);
    split_from_probabilities(&pa, &pb, &data.noisy_labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub test_accuracy: Option<f64>,
    /// Correct confident samples over all correctly labeled samples.
    pub label_recall: f64,
    /// Correct confident samples over all confident samples.
    pub label_precision: f64,
    /// False when no sample is correctly labeled (recall reported as 0).
    pub recall_defined: bool,
    /// False when the confident set is empty (precision reported as 0).
    pub precision_defined: bool,
    pub confident: usize,
    pub confident_correct: usize,
    pub correct_total: usize,
}

pub fn label_metrics(split: &ConfidentSplit, clean: &[usize], noisy: &[usize]) -> SelectionMetrics {
    let correct_total = clean.iter().zip(noisy).filter(|(c, n)| c == n).count();
    let confident = split.labeled.len();
    let confident_correct = split.labeled.iter().filter(|&&(i, _)| clean[i] == noisy[i]).count();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    SelectionMetrics {
        test_accuracy: None,
        label_recall: ratio(confident_correct, correct_total),
        label_precision: ratio(confident_correct, confident),
        recall_defined: correct_total > 0,
        precision_defined: confident > 0,
        confident,
        confident_correct,
        correct_total,
    }
}

/// Label recall/precision of `split` against the hidden clean labels, plus
/// test accuracy of `model` when a test set is given.
pub fn evaluate(
    split: &ConfidentSplit,
    ds: &NoisyDataset,
    model: &SegmentedModel,
    test: Option<&LabeledSet>,
) -> Result<SelectionMetrics> {
    let mut m = label_metrics(split, &ds.clean_labels, &ds.noisy_labels);
    if let Some(t) = test {
        m.test_accuracy = Some(test_accuracy(model, t)?);
    }
    Ok(m)
}

/// `|D| / (K · count_c)` per class present in `labels`, 0 for absent classes.
pub fn class_weights(labels: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y] += 1;
    }
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { labels.len() as f64 / (k * c) as f64 })
        .collect()
}

/// Trains on the confident samples only, with class-balancing weights.
pub fn weighted_ce_fit(
    model: &mut SegmentedModel,
    session: &mut Session<'_>,
    split: &ConfidentSplit,
    epochs: usize,
    opt: &mut OptimizerState,
) -> Result<()> {
    if split.labeled.is_empty() {
        return Err(Error::Input("confident set is empty".into()));
    }
    let labels: Vec<usize> = split.labeled.iter().map(|&(_, y)| y).collect();
    let weights = class_weights(&labels, session.train().k);
    let subset = split.labeled_indices();
    model.gate = None;
    session.run_epochs(model, &subset, Some(&weights), epochs, opt, Phase::Refit)
}
