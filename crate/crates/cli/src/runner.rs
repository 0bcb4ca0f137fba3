//! Study execution and artifact writing.
//!
//! Every command writes into a staging directory next to the requested
//! output and renames it into place when it finishes. A failed run is
//! still moved into place, but with a `QUARANTINE` marker, a failure
//! summary and its report renamed to `report.csv.partial`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use paddles_core::autograd::Array;
use paddles_core::data::{BlobSpec, LabeledSet, TinyImageSpec};
use paddles_core::model::SegmentedModel;
use paddles_core::noise::{instance_noise, noise_report, pairflip_noise, symmetric_noise, NoiseKind, NoiseReport, NoisyDataset};
use paddles_core::rng::derive_seed;
use paddles_core::spectral::GateMode;
use paddles_core::trainer::{
    evaluate, run_paddles, select_confident, train_plain, weighted_ce_fit, AugmentPair, EpochRecord, PaddlesSchedule,
    Phase, RunReport, SelectionMetrics, Session,
};
use paddles_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{parse_config, DatasetConfig, ExperimentConfig, ModelConfig, Seeds, StudyConfig};
use crate::figure::{emit_figure_data, Crossing};

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const REPLAY_FILE: &str = "replay.json";
pub const QUARANTINE_FILE: &str = "QUARANTINE";
pub const REPLAY_FORMAT: &str = "paddles-replay-v1";

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub quiet: bool,
}

impl Options {
    fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

/// Training and test data for one experiment.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: NoisyDataset,
    pub test: Option<LabeledSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    pub format: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub k: usize,
    pub noise_kind: NoiseKind,
    pub epsilon: f64,
    pub realized_disagreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub name: String,
    pub epochs_logged: usize,
    pub final_epoch: Option<EpochRecord>,
    pub selection: Option<SelectionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub t_a: usize,
    pub t_p: usize,
    pub dir: String,
    pub label_precision: f64,
    pub label_recall: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "study", rename_all = "snake_case")]
pub enum StudySummary {
    Single {
        schedule: PaddlesSchedule,
        #[serde(flatten)]
        arm: ArmSummary,
    },
    Figure1 { epochs: usize, arms: Vec<ArmSummary>, crossings: Vec<Crossing> },
    Ablation { arms: Vec<ArmSummary> },
    /// `best` indexes `runs`: highest label precision, earliest on ties.
    Sweep { runs: Vec<SweepEntry>, best: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub status: String,
    pub seeds: Seeds,
    pub data: DataSummary,
    #[serde(flatten)]
    pub study: StudySummary,
}

#[derive(Debug, Serialize)]
struct FailureSummary<'a> {
    status: &'static str,
    error_kind: &'static str,
    error: String,
    seeds: Option<&'a Seeds>,
}

#[derive(Debug, Serialize)]
struct Timing {
    wall_seconds: f64,
}

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Usage(_) => "usage",
        Error::Input(_) => "input",
        Error::Dimension(_) => "dimension",
        Error::NumericalIntegrity(_) => "numerical_integrity",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn input_shape(features: &Array) -> Vec<usize> {
    features.shape()[1..].to_vec()
}

/// Generates or loads the data the config describes. Seeds must be resolved.
pub fn build_data(cfg: &ExperimentConfig) -> Result<Data> {
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Blobs { n, n_test, dim, k, separation, seed } => {
            let spec = BlobSpec { dim: *dim, k: *k, separation: *separation, seed: seed.expect("seeds resolved") };
            (spec.sample(*n, 0)?, (*n_test > 0).then(|| spec.sample(*n_test, 1)).transpose()?)
        }
        DatasetConfig::TinyImages {
            n, n_test, height, width, k, waves_per_class, max_shift, contrast_jitter, pixel_noise, seed,
        } => {
            let spec = TinyImageSpec {
                height: *height,
                width: *width,
                k: *k,
                waves_per_class: *waves_per_class,
                max_shift: *max_shift,
                contrast_jitter: *contrast_jitter,
                pixel_noise: *pixel_noise,
                seed: seed.expect("seeds resolved"),
            };
            (spec.sample(*n, 0)?, (*n_test > 0).then(|| spec.sample(*n_test, 1)).transpose()?)
        }
        DatasetConfig::File { path } => {
            let train = NoisyDataset::load(&path.join("train"))?;
            let test_dir = path.join("test");
            let test = if test_dir.join(paddles_core::noise::LABEL_FILE).exists() {
                let t = NoisyDataset::load(&test_dir)?;
                Some(LabeledSet::new(t.features, t.clean_labels, t.k)?)
            } else {
                None
            };
            let mut data = Data { train, test };
            flatten_for_mlp(cfg, &mut data)?;
            cfg.check_against_model(&input_shape(&data.train.features), data.train.k)?;
            return Ok(data);
        }
    };
    let train = match &cfg.noise {
        None => NoisyDataset::clean(train)?,
        Some(noise) => {
            let seed = noise.seed.expect("seeds resolved");
            let labels = match noise.kind {
                NoiseKind::None => {
                    return finish(cfg, Data { train: NoisyDataset::clean(train)?, test });
                }
                NoiseKind::Symmetric => symmetric_noise(&train.labels, train.k, noise.epsilon, seed)?,
                NoiseKind::Pairflip => pairflip_noise(&train.labels, train.k, noise.epsilon, seed)?,
                NoiseKind::Instance => instance_noise(&train.flattened(), &train.labels, train.k, noise.epsilon, seed)?,
            };
            NoisyDataset::new(train, labels)?
        }
    };
    finish(cfg, Data { train, test })
}

fn finish(cfg: &ExperimentConfig, mut data: Data) -> Result<Data> {
    flatten_for_mlp(cfg, &mut data)?;
    Ok(data)
}

/// MLPs see image data as flat vectors.
fn flatten_for_mlp(cfg: &ExperimentConfig, data: &mut Data) -> Result<()> {
    if matches!(cfg.model, ModelConfig::Mlp { .. }) && data.train.features.rank() > 2 {
        let n = data.train.len();
        data.train.features = data.train.features.reshape(&[n, data.train.features.len() / n])?;
        if let Some(t) = data.test.as_mut() {
            t.features = t.flattened();
        }
    }
    Ok(())
}

fn build_model(cfg: &ExperimentConfig, data: &Data) -> Result<SegmentedModel> {
    let arch = cfg.architecture(&input_shape(&data.train.features), data.train.k)?;
    let seed = match &cfg.model {
        ModelConfig::Mlp { seed, .. } | ModelConfig::SmallCnn { seed, .. } => seed.expect("seeds resolved"),
    };
    let mut model = SegmentedModel::build(arch, seed)?;
    if let Some(j) = cfg.gate_index() {
        model.set_gate_index(j)?;
    }
    Ok(model)
}

fn data_summary(data: &Data) -> DataSummary {
    let NoiseReport { disagreement, .. } = noise_report(&data.train);
    DataSummary {
        n_train: data.train.len(),
        n_test: data.test.as_ref().map_or(0, LabeledSet::len),
        k: data.train.k,
        noise_kind: data.train.kind,
        epsilon: data.train.epsilon,
        realized_disagreement: disagreement,
    }
}

fn write_data(dir: &Path, data: &Data) -> Result<()> {
    data.train.save(&dir.join("train"))?;
    if let Some(t) = &data.test {
        NoisyDataset::clean(t.clone())?.save(&dir.join("test"))?;
    }
    fs::write(dir.join("noise_report.json"), to_json(&noise_report(&data.train))?)?;
    Ok(())
}

/// Selects confident samples, optionally refits on them, and scores the split.
fn select_and_refit(
    cfg: &ExperimentConfig,
    seeds: &Seeds,
    data: &Data,
    model: &mut SegmentedModel,
    init: &SegmentedModel,
    report: &mut RunReport,
) -> Result<SelectionMetrics> {
    let augment = AugmentPair::jitter(cfg.selection.augment_sigma, seeds.augment);
    let split = select_confident(model, &data.train, &augment)?;
    if cfg.selection.refit_epochs > 0 {
        if cfg.selection.fresh_start {
            *model = init.clone();
        }
        let seed = derive_seed(seeds.schedule, "refit");
        let mut session = Session::new(&data.train, data.test.as_ref(), cfg.schedule.batch_size, seed)?
            .starting_at(report.rows.len());
        let mut opt = cfg.schedule.sgd.state()?;
        weighted_ce_fit(model, &mut session, &split, cfg.selection.refit_epochs, &mut opt)?;
        report.rows.extend(session.into_report(None).rows);
    }
    let metrics = evaluate(&split, &data.train, model, data.test.as_ref())?;
    report.selection = Some(metrics.clone());
    Ok(metrics)
}

fn write_arm(dir: &Path, model: &SegmentedModel, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    model.save(&dir.join("model"))?;
    fs::write(dir.join(REPORT_FILE), report.to_csv())?;
    Ok(())
}

fn arm_summary(name: &str, report: &RunReport) -> ArmSummary {
    ArmSummary {
        name: name.into(),
        epochs_logged: report.rows.len(),
        final_epoch: report.last().cloned(),
        selection: report.selection.clone(),
    }
}

/// Moves `staging` to `out`, replacing an earlier run's output only.
fn publish(staging: &Path, out: &Path) -> Result<()> {
    if out.exists() {
        let replaceable = out.join(REPLAY_FILE).exists()
            || out.join(QUARANTINE_FILE).exists()
            || fs::read_dir(out)?.next().is_none();
        if !replaceable {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} exists and is not an earlier run's output", out.display()),
            )));
        }
        fs::remove_dir_all(out)?;
    }
    fs::rename(staging, out)?;
    Ok(())
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no final component", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    Ok(parent.join(format!(".{}.staging", name.to_string_lossy())))
}

/// Runs `body` in a staging directory and publishes the result to `out`.
fn staged<T>(out: &Path, seeds: Option<&Seeds>, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let staging = staging_dir(out)?;
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let started = Instant::now();
    match body(&staging) {
        Ok(v) => {
            fs::write(staging.join(TIMING_FILE), to_json(&Timing { wall_seconds: started.elapsed().as_secs_f64() })?)?;
            publish(&staging, out)?;
            Ok(v)
        }
        Err(e) => {
            quarantine(&staging, &e, seeds)?;
            publish(&staging, out)?;
            Err(e)
        }
    }
}

fn quarantine(dir: &Path, e: &Error, seeds: Option<&Seeds>) -> Result<()> {
    for entry in walk(dir)? {
        if entry.file_name().is_some_and(|n| n == REPORT_FILE) {
            fs::rename(&entry, entry.with_extension("csv.partial"))?;
        }
    }
    let failure = FailureSummary { status: "failed", error_kind: error_kind(e), error: e.to_string(), seeds };
    fs::write(dir.join(SUMMARY_FILE), to_json(&failure)?)?;
    fs::write(dir.join(QUARANTINE_FILE), format!("run failed; outputs here are incomplete\n{e}\n"))?;
    Ok(())
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            out.extend(walk(&path)?);
        } else {
            out.push(path);
        }
    }
    Ok(out)
}

/// Resolves seeds and applies a root-seed override.
pub fn prepare(mut cfg: ExperimentConfig, seed: Option<u64>) -> Result<(ExperimentConfig, Seeds)> {
    if let Some(s) = seed {
        cfg.resolve_seeds();
        cfg.override_seed(s);
    }
    let seeds = cfg.resolve_seeds();
    cfg.output_dir = None;
    cfg.validate()?;
    Ok((cfg, seeds))
}

/// Writes the training and test data the config describes.
pub fn synth_data(cfg: ExperimentConfig, seed: Option<u64>, out: &Path, opts: &Options) -> Result<DataSummary> {
    let (cfg, seeds) = prepare(cfg, seed)?;
    staged(out, Some(&seeds), |dir| {
        let data = build_data(&cfg)?;
        write_data(dir, &data)?;
        fs::write(dir.join(REPLAY_FILE), to_json(&Replay { format: REPLAY_FORMAT.into(), config: cfg.clone(), seeds })?)?;
        let summary = data_summary(&data);
        fs::write(dir.join(SUMMARY_FILE), to_json(&summary)?)?;
        opts.note(&format!("wrote {} training samples to {}", summary.n_train, out.display()));
        Ok(summary)
    })
}

/// Runs the study in `cfg` and writes all artifacts under `out`.
pub fn run_experiment(cfg: ExperimentConfig, seed: Option<u64>, out: &Path, opts: &Options) -> Result<Summary> {
    let (cfg, seeds) = prepare(cfg, seed)?;
    staged(out, Some(&seeds), |dir| {
        fs::write(dir.join(REPLAY_FILE), to_json(&Replay { format: REPLAY_FORMAT.into(), config: cfg.clone(), seeds })?)?;
        let data = build_data(&cfg)?;
        match &cfg.dataset {
            DatasetConfig::File { path } => {
                fs::write(dir.join("dataset.json"), to_json(&serde_json::json!({ "source": path }))?)?;
            }
            _ => write_data(&dir.join("dataset"), &data)?,
        }
        let study = match &cfg.study {
            StudyConfig::Single => single(&cfg, &seeds, &data, dir, opts)?,
            StudyConfig::Figure1 { epochs } => figure1(&cfg, &seeds, &data, *epochs, dir, opts)?,
            StudyConfig::Ablation { plain_epochs } => ablation(&cfg, &seeds, &data, *plain_epochs, dir, opts)?,
            StudyConfig::Sweep { t_a, t_p } => sweep(&cfg, &seeds, &data, t_a, t_p.as_deref(), dir, opts)?,
        };
        let summary = Summary { status: "ok".into(), seeds, data: data_summary(&data), study };
        fs::write(dir.join(SUMMARY_FILE), to_json(&summary)?)?;
        Ok(summary)
    })
}

/// Re-executes the run recorded in `dir` into `out`.
pub fn replay(dir: &Path, out: &Path, opts: &Options) -> Result<Summary> {
    let text = fs::read_to_string(dir.join(REPLAY_FILE))?;
    let replay: Replay = serde_json::from_str(&text)?;
    if replay.format != REPLAY_FORMAT {
        return Err(Error::Config(format!("{REPLAY_FILE}: unknown format {:?}", replay.format)));
    }
    replay.config.validate()?;
    run_experiment(replay.config, None, out, opts)
}

fn single(cfg: &ExperimentConfig, seeds: &Seeds, data: &Data, dir: &Path, opts: &Options) -> Result<StudySummary> {
    let init = build_model(cfg, data)?;
    let schedule = cfg.paddles_schedule(init.gate_index());
    let mut model = init.clone();
    let mut report = run_paddles(&mut model, &data.train, data.test.as_ref(), &schedule)?;
    opts.note(&format!("trained {} epochs", report.rows.len()));
    select_and_refit(cfg, seeds, data, &mut model, &init, &mut report)?;
    write_arm(dir, &model, &report)?;
    Ok(StudySummary::Single { schedule, arm: arm_summary("paddles", &report) })
}

fn figure1(
    cfg: &ExperimentConfig,
    seeds: &Seeds,
    data: &Data,
    epochs: usize,
    dir: &Path,
    opts: &Options,
) -> Result<StudySummary> {
    let init = build_model(cfg, data)?;
    let arms = [
        ("full", None, Phase::Full),
        ("detach_amplitude", Some(GateMode::DetachAmplitude), Phase::DetachAmplitude),
        ("detach_phase", Some(GateMode::DetachPhase), Phase::DetachPhase),
    ];
    let mut reports = Vec::new();
    for (name, gate, phase) in arms {
        let mut model = init.clone();
        let mut session = Session::new(&data.train, data.test.as_ref(), cfg.schedule.batch_size, seeds.schedule)?;
        let mut opt = cfg.schedule.sgd.state()?;
        session.train_phase(&mut model, epochs, gate, &mut opt, phase)?;
        model.gate = None;
        let report = session.into_report(None);
        fs::write(dir.join(format!("{name}.csv")), report.to_csv())?;
        opts.note(&format!("{name}: {epochs} epochs"));
        reports.push((name, report));
    }
    let series: Vec<(&str, &RunReport)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    let fig = emit_figure_data(&series)?;
    fs::write(dir.join("figure_data.csv"), &fig.csv)?;
    fs::write(dir.join("crossings.csv"), fig.crossings_csv())?;
    Ok(StudySummary::Figure1 {
        epochs,
        arms: reports.iter().map(|(n, r)| arm_summary(n, r)).collect(),
        crossings: fig.crossings,
    })
}

fn ablation(
    cfg: &ExperimentConfig,
    seeds: &Seeds,
    data: &Data,
    plain_epochs: Option<usize>,
    dir: &Path,
    opts: &Options,
) -> Result<StudySummary> {
    let init = build_model(cfg, data)?;
    let full = cfg.paddles_schedule(init.gate_index());
    let base = PaddlesSchedule { suffix_epochs: Vec::new(), ..full.clone() };
    let mut arms = Vec::new();

    let epochs = plain_epochs.unwrap_or(full.total_epochs());
    let mut model = init.clone();
    let mut report = train_plain(&mut model, &data.train, data.test.as_ref(), epochs, &full.sgd, full.batch_size, full.seed)?;
    select_and_refit(cfg, seeds, data, &mut model, &init, &mut report)?;
    write_arm(&dir.join("plain"), &model, &report)?;
    arms.push(arm_summary("plain", &report));
    opts.note("plain: done");

    for (name, schedule) in [("paddles_base", &base), ("paddles", &full)] {
        let mut model = init.clone();
        let mut report = run_paddles(&mut model, &data.train, data.test.as_ref(), schedule)?;
        select_and_refit(cfg, seeds, data, &mut model, &init, &mut report)?;
        write_arm(&dir.join(name), &model, &report)?;
        arms.push(arm_summary(name, &report));
        opts.note(&format!("{name}: done"));
    }
    Ok(StudySummary::Ablation { arms })
}

/// Index of the largest label precision, earliest on ties.
pub fn best_by_precision(runs: &[SweepEntry]) -> usize {
    let mut best = 0;
    for (i, r) in runs.iter().enumerate().skip(1) {
        if r.label_precision > runs[best].label_precision {
            best = i;
        }
    }
    best
}

fn sweep(
    cfg: &ExperimentConfig,
    seeds: &Seeds,
    data: &Data,
    t_a: &[usize],
    t_p: Option<&[usize]>,
    dir: &Path,
    opts: &Options,
) -> Result<StudySummary> {
    let fixed = [cfg.schedule.t_p];
    let t_p = t_p.unwrap_or(&fixed);
    let mut runs = Vec::new();
    for &a in t_a {
        for &p in t_p {
            let mut child = cfg.clone();
            child.schedule.t_a = a;
            child.schedule.t_p = p;
            child.study = StudyConfig::Single;
            child.validate()?;
            let name = format!("t_a{a}_t_p{p}");
            let sub = dir.join(&name);
            fs::create_dir_all(&sub)?;
            let study = single(&child, seeds, data, &sub, opts)?;
            let summary = Summary { status: "ok".into(), seeds: *seeds, data: data_summary(data), study };
            fs::write(sub.join(SUMMARY_FILE), to_json(&summary)?)?;
            let StudySummary::Single { arm, .. } = &summary.study else { unreachable!("single study") };
            let sel = arm.selection.as_ref().expect("single runs select");
            runs.push(SweepEntry {
                t_a: a,
                t_p: p,
                dir: name,
                label_precision: sel.label_precision,
                label_recall: sel.label_recall,
                test_accuracy: sel.test_accuracy,
            });
        }
    }
    let best = best_by_precision(&runs);
    opts.note(&format!("sweep: best is {}", runs[best].dir));
    Ok(StudySummary::Sweep { runs, best })
}
