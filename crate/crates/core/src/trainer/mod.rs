//! Staged training: plain epochs, gated epochs and progressive suffix
//! training, plus per-epoch bookkeeping.
//!
//! A full run goes through four phases on one model:
//!
//! 1. `t_a` epochs of ordinary training, gate out of the graph;
//! 2. `t_p` epochs with the amplitude spectrum detached at the gate, so the
//!    prefix learns only through the phase spectrum;
//! 3. `t_0` epochs with the phase spectrum detached;
//! 4. both spectra re-attached, the stages after the gate re-initialized
//!    once, then for each suffix stage `l` everything before `l` is frozen
//!    and the rest trains for `suffix_epochs[l − j − 1]` epochs with Adam.

mod select;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{opt_step, Array, Graph, OptimizerState};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::SegmentedModel;
use crate::noise::NoisyDataset;
use crate::rng;
use crate::spectral::GateMode;

pub use select::{
    class_weights, evaluate, label_metrics, select_confident, split_from_probabilities, weighted_ce_fit,
    AugmentPair, Augmentation, ConfidentSplit, SelectionMetrics,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn state(&self) -> Result<OptimizerState> {
        OptimizerState::sgd(self.lr, self.momentum, self.weight_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn state(&self) -> Result<OptimizerState> {
        OptimizerState::adam(self.lr, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaddlesSchedule {
    /// Gate position; must equal the model's gate index.
    pub j: usize,
    pub t_a: usize,
    pub t_p: usize,
    pub t_0: usize,
    /// Epochs per stage after the gate, or empty to skip progressive training.
    pub suffix_epochs: Vec<usize>,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl PaddlesSchedule {
    pub fn validate(&self, model: &SegmentedModel) -> Result<()> {
        if self.t_a + self.t_p + self.t_0 == 0 {
            return Err(Error::Config("t_a + t_p + t_0 must be at least 1".into()));
        }
        if self.j != model.gate_index() {
            return Err(Error::Config(format!(
                "schedule gate index {} does not match the model's {}",
                self.j,
                model.gate_index()
            )));
        }
        let after = model.num_stages() - self.j - 1;
        if !self.suffix_epochs.is_empty() && self.suffix_epochs.len() != after {
            return Err(Error::Config(format!(
                "{} suffix epoch counts for {after} stages after the gate",
                self.suffix_epochs.len()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.t_a + self.t_p + self.t_0 + self.suffix_epochs.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Full,
    DetachAmplitude,
    DetachPhase,
    Progressive(usize),
    Refit,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Full => f.write_str("full"),
            Phase::DetachAmplitude => f.write_str("detach_amplitude"),
            Phase::DetachPhase => f.write_str("detach_phase"),
            Phase::Progressive(l) => write!(f, "progressive_stage{l}"),
            Phase::Refit => f.write_str("refit"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across all phases of a run.
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    /// Accuracy on training samples whose observed label is correct.
    pub acc_clean_subset: Option<f64>,
    /// Agreement with the observed (wrong) label on mislabeled samples.
    pub acc_noisy_subset: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schedule: Option<PaddlesSchedule>,
    pub rows: Vec<EpochRecord>,
    pub selection: Option<SelectionMetrics>,
}

pub const REPORT_CSV_HEADER: &str = "epoch,phase,train_loss,acc_clean_subset,acc_noisy_subset,test_acc";

impl RunReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.phase,
                r.train_loss,
                opt(r.acc_clean_subset),
                opt(r.acc_noisy_subset),
                opt(r.test_acc)
            ));
        }
        out
    }

    pub fn epochs_in_phase(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.rows.iter().filter(|r| pred(&r.phase)).count()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits` whose argmax equals `labels[i]`, over `subset`.
fn accuracy_on(logits: &Array, labels: &[usize], subset: impl Iterator<Item = usize>) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for i in subset {
        total += 1;
        if argmax(logits.row(i)) == labels[i] {
            hit += 1;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

pub fn test_accuracy(model: &SegmentedModel, test: &LabeledSet) -> Result<f64> {
    let logits = model.predict_logits(&test.features)?;
    Ok(accuracy_on(&logits, &test.labels, 0..test.len()).unwrap_or(0.0))
}

/// Training state shared by the phases of one run: the data, the batch
/// size, the shuffle seed and the running epoch counter.
pub struct Session<'a> {
    train: &'a NoisyDataset,
    test: Option<&'a LabeledSet>,
    batch_size: usize,
    seed: u64,
    epochs_done: usize,
    rows: Vec<EpochRecord>,
}

impl<'a> Session<'a> {
    pub fn new(train: &'a NoisyDataset, test: Option<&'a LabeledSet>, batch_size: usize, seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self { train, test, batch_size, seed, epochs_done: 0, rows: Vec::new() })
    }

    /// Continues the epoch count of an earlier session, so its rows and
    /// shuffles pick up where that one stopped.
    pub fn starting_at(mut self, epochs_done: usize) -> Self {
        self.epochs_done = epochs_done;
        self
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn train(&self) -> &NoisyDataset {
        self.train
    }

    pub fn test(&self) -> Option<&LabeledSet> {
        self.test
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> &[EpochRecord] {
        &self.rows
    }

    pub fn into_report(self, schedule: Option<PaddlesSchedule>) -> RunReport {
        RunReport { schedule, rows: self.rows, selection: None }
    }

    /// Visiting order for global epoch `epoch` over `n` samples.
    pub fn shuffle(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        rng::permutation(&mut rng::stream(seed, epoch as u64), n)
    }

    /// `epochs` epochs of mini-batch training on every sample's observed
    /// label with the model's gate set to `gate` (`None` takes the gate out
    /// of the graph).
    pub fn train_phase(
        &mut self,
        model: &mut SegmentedModel,
        epochs: usize,
        gate: Option<GateMode>,
        opt: &mut OptimizerState,
        phase: Phase,
    ) -> Result<()> {
        let all: Vec<usize> = (0..self.train.len()).collect();
        model.gate = gate;
        self.run_epochs(model, &all, None, epochs, opt, phase)
    }

    /// Trains on `subset` (indices into the training set) with optional
    /// class weights, keeping the model's current gate.
    pub fn run_epochs(
        &mut self,
        model: &mut SegmentedModel,
        subset: &[usize],
        weights: Option<&[f64]>,
        epochs: usize,
        opt: &mut OptimizerState,
        phase: Phase,
    ) -> Result<()> {
        if subset.is_empty() {
            return Err(Error::Input("cannot train on an empty subset".into()));
        }
        for _ in 0..epochs {
            let order = Self::shuffle(self.seed, self.epochs_done, subset.len());
            let mut loss_sum = 0.0;
            for batch in order.chunks(self.batch_size) {
                let rows: Vec<usize> = batch.iter().map(|&p| subset[p]).collect();
                let loss = train_step(model, self.train, &rows, weights, opt)?;
                loss_sum += loss * rows.len() as f64;
            }
            self.epochs_done += 1;
            let record = self.record(model, phase, loss_sum / subset.len() as f64)?;
            self.rows.push(record);
        }
        Ok(())
    }

    fn record(&self, model: &SegmentedModel, phase: Phase, train_loss: f64) -> Result<EpochRecord> {
        let ds = self.train;
        let logits = model.predict_logits(&ds.features)?;
        let n = ds.len();
        let acc_clean_subset = accuracy_on(&logits, &ds.noisy_labels, (0..n).filter(|&i| !ds.is_flipped(i)));
        let acc_noisy_subset = accuracy_on(&logits, &ds.noisy_labels, (0..n).filter(|&i| ds.is_flipped(i)));
        let test_acc = match self.test {
            Some(t) => Some(test_accuracy(model, t)?),
            None => None,
        };
        Ok(EpochRecord {
            epoch: self.epochs_done,
            phase: phase.to_string(),
            train_loss,
            acc_clean_subset,
            acc_noisy_subset,
            test_acc,
        })
    }
}

/// One forward/backward/update on the given training rows. Returns the loss.
pub fn train_step(
    model: &mut SegmentedModel,
    data: &NoisyDataset,
    rows: &[usize],
    weights: Option<&[f64]>,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(data.features.gather_rows(rows));
    let labels: Vec<usize> = rows.iter().map(|&i| data.noisy_labels[i]).collect();
    let pass = model.forward(&mut g, x)?;
    let loss = g.cross_entropy(pass.logits, &labels, weights)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NumericalIntegrity(format!("training loss became {value}")));
    }
    g.backward(loss)?;
    model.accumulate_grads(&g, &pass);
    opt_step(&mut model.params_mut(), opt)?;
    Ok(value)
}

/// Ordinary training for `epochs` epochs; the baseline every schedule is
/// compared against.
pub fn train_plain(
    model: &mut SegmentedModel,
    train: &NoisyDataset,
    test: Option<&LabeledSet>,
    epochs: usize,
    sgd: &SgdConfig,
    batch_size: usize,
    seed: u64,
) -> Result<RunReport> {
    let mut session = Session::new(train, test, batch_size, seed)?;
    let mut opt = sgd.state()?;
    session.train_phase(model, epochs, None, &mut opt, Phase::Full)?;
    Ok(session.into_report(None))
}

/// Progressive training of the stages after the gate. Re-initializes them
/// once, then for each stage `l` freezes `0..l` and trains `l..` with a fresh
/// Adam state. All stages are unfrozen again on return.
pub fn pes_suffix(
    model: &mut SegmentedModel,
    session: &mut Session<'_>,
    suffix_epochs: &[usize],
    adam: &AdamConfig,
    reinit_seed: u64,
) -> Result<()> {
    let j = model.gate_index();
    let after = model.num_stages() - j - 1;
    if suffix_epochs.len() != after {
        return Err(Error::Config(format!(
            "{} suffix epoch counts for {after} stages after the gate",
            suffix_epochs.len()
        )));
    }
    if after == 0 {
        return Ok(());
    }
    model.reinit_suffix(j + 1, reinit_seed)?;
    let result = (|| {
        for (offset, &epochs) in suffix_epochs.iter().enumerate() {
            let l = j + 1 + offset;
            model.unfreeze_all();
            model.freeze_prefix(l - 1)?;
            let mut opt = adam.state()?;
            session.train_phase(model, epochs, Some(GateMode::PassBoth), &mut opt, Phase::Progressive(l))?;
        }
        Ok(())
    })();
    model.unfreeze_all();
    result
}

/// Runs the whole schedule on `model` and returns the per-epoch report.
pub fn run_paddles(
    model: &mut SegmentedModel,
    train: &NoisyDataset,
    test: Option<&LabeledSet>,
    schedule: &PaddlesSchedule,
) -> Result<RunReport> {
    schedule.validate(model)?;
    let mut session = Session::new(train, test, schedule.batch_size, schedule.seed)?;
    let mut sgd = schedule.sgd.state()?;
    session.train_phase(model, schedule.t_a, None, &mut sgd, Phase::Full)?;
    session.train_phase(model, schedule.t_p, Some(GateMode::DetachAmplitude), &mut sgd, Phase::DetachAmplitude)?;
    session.train_phase(model, schedule.t_0, Some(GateMode::DetachPhase), &mut sgd, Phase::DetachPhase)?;
    if !schedule.suffix_epochs.is_empty() {
        let reinit_seed = rng::derive_seed(schedule.seed, "progressive-reinit");
        pes_suffix(model, &mut session, &schedule.suffix_epochs, &schedule.adam, reinit_seed)?;
    }
    model.gate = None;
    Ok(session.into_report(Some(schedule.clone())))
}
