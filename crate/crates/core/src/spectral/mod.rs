//! Amplitude/phase disentanglement of intermediate features.
//!
//! A feature `χ` is lifted to the frequency domain with a DFT over its
//! trailing spatial axes, split into an amplitude spectrum `|F|` and a phase
//! spectrum `atan2(Im F, Re F)`, recombined as `|F|·e^{i·phase}` and brought
//! back with the inverse DFT. The round trip is the identity on values, so
//! the only observable effect of the gate is on gradients: either spectrum
//! can be cut out of the backward pass with [`GateMode`].

pub(crate) mod kernel;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Graph, Tensor};
use crate::error::{Error, Result};

/// Largest tolerated imaginary residue when a real output is demanded.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-6;

/// Which spectral branches carry gradient back to the feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    PassBoth,
    /// Only the phase branch trains the layers below the gate.
    DetachAmplitude,
    /// Only the amplitude branch trains the layers below the gate.
    DetachPhase,
    DetachBoth,
}

impl GateMode {
    pub const ALL: [GateMode; 4] =
        [GateMode::PassBoth, GateMode::DetachAmplitude, GateMode::DetachPhase, GateMode::DetachBoth];

    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::PassBoth => "pass_both",
            GateMode::DetachAmplitude => "detach_amplitude",
            GateMode::DetachPhase => "detach_phase",
            GateMode::DetachBoth => "detach_both",
        }
    }

    fn detaches_amplitude(self) -> bool {
        matches!(self, GateMode::DetachAmplitude | GateMode::DetachBoth)
    }

    fn detaches_phase(self) -> bool {
        matches!(self, GateMode::DetachPhase | GateMode::DetachBoth)
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown gate mode {s:?}")))
    }
}

/// Real and imaginary parts of a spectrum, tracked jointly in one graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexSpectrum {
    pub real: Tensor,
    pub imag: Tensor,
    pub axes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpectralPair {
    /// Non-negative magnitudes.
    pub amplitude: Tensor,
    /// Angles in `(−π, π]`.
    pub phase: Tensor,
    pub axes: Vec<usize>,
}

/// Default transform axes for a feature of the given rank: the feature axis
/// of `[d]` or `[N×d]` activations, the two spatial axes otherwise.
pub fn spatial_axes(rank: usize) -> Vec<usize> {
    match rank {
        0 => Vec::new(),
        1 => vec![0],
        2 => vec![1],
        r => vec![r - 2, r - 1],
    }
}

fn check_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    if axes.is_empty() {
        return Err(Error::Usage("empty transform axis list".into()));
    }
    let r = shape.len();
    let trailing: Vec<usize> = (r.saturating_sub(axes.len())..r).collect();
    if axes.len() > 2 || axes != trailing.as_slice() {
        return Err(Error::Usage(format!(
            "transform axes {axes:?} must be the last one or two axes of {shape:?}"
        )));
    }
    Ok(())
}

/// Unnormalized forward DFT of a real tensor along `axes`.
pub fn dft(g: &mut Graph, x: Tensor, axes: &[usize]) -> Result<ComplexSpectrum> {
    check_axes(g.shape(x), axes)?;
    let zeros = g.constant(Array::zeros(g.shape(x)));
    let stacked = g.stack(x, zeros)?;
    let spec = g.dft(stacked, axes, false)?;
    Ok(ComplexSpectrum { real: g.select(spec, 0)?, imag: g.select(spec, 1)?, axes: axes.to_vec() })
}

/// Forward DFT of a complex tensor given as real and imaginary parts.
pub fn dft_complex(g: &mut Graph, real: Tensor, imag: Tensor, axes: &[usize]) -> Result<ComplexSpectrum> {
    check_axes(g.shape(real), axes)?;
    let stacked = g.stack(real, imag)?;
    let spec = g.dft(stacked, axes, false)?;
    Ok(ComplexSpectrum { real: g.select(spec, 0)?, imag: g.select(spec, 1)?, axes: axes.to_vec() })
}

/// Normalized inverse DFT without the real-output requirement.
pub fn idft_complex(g: &mut Graph, s: &ComplexSpectrum) -> Result<(Tensor, Tensor)> {
    check_axes(g.shape(s.real), &s.axes)?;
    let stacked = g.stack(s.real, s.imag)?;
    let out = g.dft(stacked, &s.axes, true)?;
    Ok((g.select(out, 0)?, g.select(out, 1)?))
}

/// Normalized inverse DFT returning the real part. Fails with a
/// numerical-integrity error if any imaginary residue reaches
/// [`IMAG_RESIDUE_LIMIT`].
pub fn idft(g: &mut Graph, s: &ComplexSpectrum) -> Result<Tensor> {
    let (re, im) = idft_complex(g, s)?;
    let residue = g.value(im).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(residue < IMAG_RESIDUE_LIMIT) {
        return Err(Error::NumericalIntegrity(format!(
            "inverse transform left an imaginary residue of {residue:e} (real part up to {:e})", g.value(re).data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        )));
    }
    Ok(re)
}

pub fn disentangle(g: &mut Graph, s: &ComplexSpectrum) -> Result<SpectralPair> {
    Ok(SpectralPair {
        amplitude: g.magnitude(s.real, s.imag)?,
        phase: g.angle(s.real, s.imag)?,
        axes: s.axes.clone(),
    })
}

pub fn recombine(g: &mut Graph, p: &SpectralPair) -> Result<ComplexSpectrum> {
    Ok(ComplexSpectrum {
        real: g.polar_re(p.amplitude, p.phase)?,
        imag: g.polar_im(p.amplitude, p.phase)?,
        axes: p.axes.clone(),
    })
}

/// Applies the detach rule of `mode` to a spectral pair.
pub fn gate(g: &mut Graph, p: &SpectralPair, mode: GateMode) -> SpectralPair {
    let amplitude = if mode.detaches_amplitude() { g.stop_gradient(p.amplitude) } else { p.amplitude };
    let phase = if mode.detaches_phase() { g.stop_gradient(p.phase) } else { p.phase };
    SpectralPair { amplitude, phase, axes: p.axes.clone() }
}

/// `χ′ = idft(recombine(gate(disentangle(dft(χ)))))` over the default axes
/// for `χ`'s rank.
pub fn gated_forward(g: &mut Graph, chi: Tensor, mode: GateMode) -> Result<Tensor> {
    let axes = spatial_axes(g.shape(chi).len());
    gated_forward_axes(g, chi, mode, &axes)
}

pub fn gated_forward_axes(g: &mut Graph, chi: Tensor, mode: GateMode, axes: &[usize]) -> Result<Tensor> {
    let spectrum = dft(g, chi, axes)?;
    let pair = disentangle(g, &spectrum)?;
    let gated = gate(g, &pair, mode);
    let restored = recombine(g, &gated)?;
    idft(g, &restored)
}

#[cfg(test)]
mod tests;
