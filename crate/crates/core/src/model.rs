//! Segmented toy backbones `f = f_T ∘ … ∘ f_0` with one spectral gate slot.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Graph, Param, Tensor};
use crate::data::{f64_from_le_bytes, f64_to_le_bytes};
use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::{gated_forward, GateMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// `widths[0]` is the input dimension; every further width is a dense+ReLU stage.
    Mlp { widths: Vec<usize>, classes: usize },
    /// 3×3 conv (pad 1) + ReLU stages, 2×2 average pooling between them.
    SmallCnn { in_channels: usize, height: usize, width: usize, channels: Vec<usize>, classes: usize },
}

impl Architecture {
    pub fn classes(&self) -> usize {
        match self {
            Architecture::Mlp { classes, .. } | Architecture::SmallCnn { classes, .. } => *classes,
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Architecture::Mlp { widths, .. } => vec![widths[0]],
            Architecture::SmallCnn { in_channels, height, width, .. } => vec![*in_channels, *height, *width],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// `relu(x·W + b)`
    Dense,
    /// `pool(relu(conv3x3(x) + b))`, pooling only when `pool` is set.
    Conv { pool: bool },
    /// `flatten(x)·W + b`
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub kind: StageKind,
    pub weight: Param,
    pub bias: Param,
    fan_in: usize,
}

impl Stage {
    fn new(index: usize, kind: StageKind, weight_shape: Vec<usize>, fan_in: usize) -> Self {
        let out = match kind {
            StageKind::Conv { .. } => weight_shape[0],
            _ => weight_shape[1],
        };
        Self {
            kind,
            weight: Param::new(format!("stage{index}.weight"), Array::zeros(&weight_shape)),
            bias: Param::new(format!("stage{index}.bias"), Array::zeros(&[out])),
            fan_in,
        }
    }

    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero bias.
    fn initialize(&mut self, seed: u64, index: usize) {
        let bound = (6.0 / self.fan_in as f64).sqrt();
        let mut r = rng::stream(seed, index as u64);
        for w in self.weight.value.data_mut() {
            *w = rng::uniform_range(&mut r, -bound, bound);
        }
        self.bias.value.data_mut().iter_mut().for_each(|b| *b = 0.0);
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    pub fn is_frozen(&self) -> bool {
        self.weight.frozen && self.bias.frozen
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        self.bias.frozen = frozen;
    }
}

/// Graph tensors a stage's parameters were bound to.
#[derive(Debug, Clone, Copy)]
pub struct BoundStage {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    /// The feature entering the gate, when the gate is active.
    pub chi: Option<Tensor>,
    /// The gate output, when the gate is active.
    pub chi_restored: Option<Tensor>,
    pub bound: Vec<BoundStage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinitEvent {
    pub from: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedModel {
    arch: Architecture,
    stages: Vec<Stage>,
    gate_index: usize,
    /// `None` runs the model without the spectral gate in the graph.
    pub gate: Option<GateMode>,
    seed: u64,
    reinits: Vec<ReinitEvent>,
}

impl SegmentedModel {
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        let stages = match &arch {
            Architecture::Mlp { widths, classes } => mlp_stages(widths, *classes)?,
            Architecture::SmallCnn { in_channels, height, width, channels, classes } => {
                cnn_stages(*in_channels, *height, *width, channels, *classes)?
            }
        };
        let gate_index = stages.len() - 2;
        let mut model = Self { arch, stages, gate_index, gate: None, seed, reinits: Vec::new() };
        for i in 0..model.stages.len() {
            model.stages[i].initialize(seed, i);
        }
        Ok(model)
    }

    /// Dense+ReLU stack over `widths` (input first) with a linear head.
    pub fn build_mlp(widths: &[usize], classes: usize, seed: u64) -> Result<Self> {
        Self::build(Architecture::Mlp { widths: widths.to_vec(), classes }, seed)
    }

    pub fn build_smallcnn(
        in_channels: usize,
        (height, width): (usize, usize),
        channels: &[usize],
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build(
            Architecture::SmallCnn { in_channels, height, width, channels: channels.to_vec(), classes },
            seed,
        )
    }

    pub fn with_gate_index(mut self, j: usize) -> Result<Self> {
        self.set_gate_index(j)?;
        Ok(self)
    }

    pub fn set_gate_index(&mut self, j: usize) -> Result<()> {
        if j >= self.stages.len() {
            return Err(Error::Config(format!(
                "gate index {j} out of range for {} stages",
                self.stages.len()
            )));
        }
        self.gate_index = j;
        Ok(())
    }

    pub fn with_gate(mut self, gate: Option<GateMode>) -> Self {
        self.gate = gate;
        self
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn gate_index(&self) -> usize {
        self.gate_index
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn reinit_events(&self) -> &[ReinitEvent] {
        &self.reinits
    }

    pub fn params(&self) -> Vec<&Param> {
        self.stages.iter().flat_map(|s| [&s.weight, &s.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages.iter_mut().flat_map(|s| [&mut s.weight, &mut s.bias]).collect()
    }

    pub fn stage_params(&self, stage: usize) -> [&Param; 2] {
        [&self.stages[stage].weight, &self.stages[stage].bias]
    }

    pub fn is_frozen(&self, stage: usize) -> bool {
        self.stages[stage].is_frozen()
    }

    /// Freezes stages `0..=upto`.
    pub fn freeze_prefix(&mut self, upto: usize) -> Result<()> {
        if upto >= self.stages.len() {
            return Err(Error::Usage(format!("freeze_prefix: stage {upto} out of range for {} stages", self.stages.len())));
        }
        for s in &mut self.stages[..=upto] {
            s.set_frozen(true);
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for s in &mut self.stages {
            s.set_frozen(false);
        }
    }

    /// Redraws stages `from..` from the initial distribution. Stage `i` uses
    /// stream `i` of `seed`, so a stage's draw does not depend on `from`.
    pub fn reinit_suffix(&mut self, from: usize, seed: u64) -> Result<()> {
        if from >= self.stages.len() {
            return Err(Error::Usage(format!("reinit_suffix: stage {from} out of range for {} stages", self.stages.len())));
        }
        for i in from..self.stages.len() {
            self.stages[i].initialize(seed, i);
        }
        self.reinits.push(ReinitEvent { from, seed });
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.arch.input_shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            return Err(Error::Dimension(format!(
                "input {shape:?} does not match model input [N, {}]",
                want.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    /// Binds every parameter into `g`; frozen ones become constants.
    pub fn bind(&self, g: &mut Graph) -> Vec<BoundStage> {
        let mut bind = |p: &Param| {
            if p.frozen {
                g.constant(p.value.clone())
            } else {
                g.variable(p.value.clone())
            }
        };
        self.stages.iter().map(|s| BoundStage { weight: bind(&s.weight), bias: bind(&s.bias) }).collect()
    }

    /// Applies stage `i` alone.
    pub fn stage_forward(&self, g: &mut Graph, i: usize, x: Tensor, bound: &BoundStage) -> Result<Tensor> {
        match self.stages[i].kind {
            StageKind::Dense => {
                let h = g.matmul(x, bound.weight)?;
                let h = g.add_bias(h, bound.bias)?;
                Ok(g.relu(h))
            }
            StageKind::Conv { pool } => {
                let h = g.conv2d(x, bound.weight, 1, 1)?;
                let h = g.add_bias(h, bound.bias)?;
                let h = g.relu(h);
                if pool {
                    g.avg_pool2d(h, 2)
                } else {
                    Ok(h)
                }
            }
            StageKind::Head => {
                let shape = g.shape(x).to_vec();
                let flat = if shape.len() > 2 {
                    let n = shape[0];
                    let rest = shape[1..].iter().product();
                    g.reshape(x, &[n, rest])?
                } else {
                    x
                };
                let h = g.matmul(flat, bound.weight)?;
                g.add_bias(h, bound.bias)
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<ForwardPass> {
        self.check_input(g.shape(x))?;
        let bound = self.bind(g);
        let mut h = x;
        let (mut chi, mut chi_restored) = (None, None);
        for i in 0..self.stages.len() {
            h = self.stage_forward(g, i, h, &bound[i])?;
            if i == self.gate_index {
                if let Some(mode) = self.gate {
                    chi = Some(h);
                    h = gated_forward(g, h, mode)?;
                    chi_restored = Some(h);
                }
            }
        }
        Ok(ForwardPass { logits: h, chi, chi_restored, bound })
    }

    /// Adds the graph gradients of every bound, trainable parameter into
    /// `Param::grad`. Trainable parameters the loss does not reach get zeros.
    pub fn accumulate_grads(&mut self, g: &Graph, pass: &ForwardPass) {
        for (stage, b) in self.stages.iter_mut().zip(&pass.bound) {
            for (p, t) in [(&mut stage.weight, b.weight), (&mut stage.bias, b.bias)] {
                if !g.requires_grad(t) {
                    continue;
                }
                match g.grad(t) {
                    Some(gr) => p.accumulate(gr),
                    None => p.accumulate(&Array::zeros(p.value.shape())),
                }
            }
        }
    }

    /// Logits for a batch of inputs, evaluated without the gate and without
    /// gradient tracking.
    pub fn predict_logits(&self, x: &Array) -> Result<Array> {
        self.check_input(x.shape())?;
        let n = x.shape()[0];
        let k = self.arch.classes();
        let mut out = Vec::with_capacity(n * k);
        let bypass = Self { gate: None, ..self.clone_frozen_view() };
        const CHUNK: usize = 512;
        let mut start = 0;
        while start < n {
            let rows: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let xt = g.constant(x.gather_rows(&rows));
            let pass = bypass.forward(&mut g, xt)?;
            out.extend_from_slice(g.value(pass.logits).data());
            start += CHUNK;
        }
        Array::new(vec![n, k], out)
    }

    /// A copy with every parameter frozen, so forward passes track nothing.
    fn clone_frozen_view(&self) -> Self {
        let mut m = self.clone();
        for s in &mut m.stages {
            s.set_frozen(true);
            s.weight.grad = None;
            s.bias.grad = None;
        }
        m
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: MODEL_FORMAT.into(),
            architecture: self.arch.clone(),
            gate_index: self.gate_index,
            gate_mode: self.gate,
            seed: self.seed,
            reinit: self.reinits.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| StageEntry {
                    kind: s.kind,
                    params: [&s.weight, &s.bias]
                        .iter()
                        .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), frozen: p.frozen })
                        .collect(),
                })
                .collect(),
            blob: PARAM_BLOB.into(),
        };
        let blob: Vec<f64> = self.params().iter().flat_map(|p| p.value.data().iter().copied()).collect();
        fs::write(dir.join(MODEL_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(PARAM_BLOB), f64_to_le_bytes(&blob))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MODEL_MANIFEST))?)?;
        if manifest.format != MODEL_FORMAT {
            return Err(Error::Input(format!("unknown model format {:?}", manifest.format)));
        }
        let mut model = Self::build(manifest.architecture, manifest.seed)?;
        model.set_gate_index(manifest.gate_index)?;
        model.gate = manifest.gate_mode;
        model.reinits = manifest.reinit;
        if manifest.stages.len() != model.stages.len() {
            return Err(Error::Input("checkpoint stage list does not match its architecture".into()));
        }
        let blob = f64_from_le_bytes(&fs::read(dir.join(&manifest.blob))?)?;
        let mut offset = 0;
        for (stage, entry) in model.stages.iter_mut().zip(&manifest.stages) {
            if stage.kind != entry.kind || entry.params.len() != 2 {
                return Err(Error::Input(format!("checkpoint stage {:?} does not match architecture", entry.kind)));
            }
            for (p, e) in [&mut stage.weight, &mut stage.bias].into_iter().zip(&entry.params) {
                if p.value.shape() != e.shape.as_slice() || p.name != e.name {
                    return Err(Error::Input(format!("checkpoint parameter {} {:?} does not match", e.name, e.shape)));
                }
                let n = p.value.len();
                let chunk = blob
                    .get(offset..offset + n)
                    .ok_or_else(|| Error::Input("checkpoint parameter blob is truncated".into()))?;
                p.value.data_mut().copy_from_slice(chunk);
                p.frozen = e.frozen;
                offset += n;
            }
        }
        if offset != blob.len() {
            return Err(Error::Input("checkpoint parameter blob has trailing data".into()));
        }
        Ok(model)
    }
}

pub const MODEL_FORMAT: &str = "paddles-model-v1";
pub const MODEL_MANIFEST: &str = "model.json";
pub const PARAM_BLOB: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    architecture: Architecture,
    gate_index: usize,
    gate_mode: Option<GateMode>,
    seed: u64,
    reinit: Vec<ReinitEvent>,
    stages: Vec<StageEntry>,
    blob: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageEntry {
    kind: StageKind,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

fn mlp_stages(widths: &[usize], classes: usize) -> Result<Vec<Stage>> {
    if widths.len() < 2 {
        return Err(Error::Config(format!("an MLP needs at least 2 widths, got {widths:?}")));
    }
    if widths.contains(&0) || classes == 0 {
        return Err(Error::Config(format!("MLP widths {widths:?} and classes {classes} must be positive")));
    }
    let mut stages: Vec<Stage> = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Stage::new(i, StageKind::Dense, vec![w[0], w[1]], w[0]))
        .collect();
    let last = *widths.last().expect("non-empty");
    stages.push(Stage::new(stages.len(), StageKind::Head, vec![last, classes], last));
    Ok(stages)
}

fn cnn_stages(in_channels: usize, height: usize, width: usize, channels: &[usize], classes: usize) -> Result<Vec<Stage>> {
    if !(2..=4).contains(&channels.len()) {
        return Err(Error::Config(format!("a small CNN needs 2 to 4 conv stages, got {}", channels.len())));
    }
    if height < 4 || width < 4 {
        return Err(Error::Config(format!("input {height}×{width} is smaller than 4×4")));
    }
    if in_channels == 0 || classes == 0 || channels.contains(&0) {
        return Err(Error::Config("channel and class counts must be positive".into()));
    }
    let pools = channels.len() - 1;
    let (mut h, mut w) = (height, width);
    let mut c_prev = in_channels;
    let mut stages = Vec::new();
    for (i, &c) in channels.iter().enumerate() {
        let pool = i < pools;
        stages.push(Stage::new(i, StageKind::Conv { pool }, vec![c, c_prev, 3, 3], c_prev * 9));
        if pool {
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!(
                    "input {height}×{width} collapses below 1 pixel after {} poolings",
                    i + 1
                )));
            }
        }
        c_prev = c;
    }
    let flat = c_prev * h * w;
    stages.push(Stage::new(stages.len(), StageKind::Head, vec![flat, classes], flat));
    Ok(stages)
}
