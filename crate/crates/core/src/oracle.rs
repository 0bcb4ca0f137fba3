//! Reference routines used to check the fast paths: direct O(M²) DFT
//! summation, central finite differences and brute-force label counting.
//! Nothing here touches the autograd graph or the FFT kernel.

use std::collections::HashSet;
use std::f64::consts::PI;

/// Direct-summation DFT along one axis of `shape`.
/// Forward uses `e^{-i2πpu/M}`; inverse uses `e^{+i2πpu/M}` and `1/M`.
pub fn dft_axis_direct(re: &[f64], im: &[f64], shape: &[usize], axis: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let m = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = if inverse { 1.0 / m as f64 } else { 1.0 };
    let mut out_re = vec![0.0; re.len()];
    let mut out_im = vec![0.0; im.len()];
    for o in 0..outer {
        for t in 0..inner {
            let base = o * m * inner + t;
            for u in 0..m {
                let (mut sr, mut si) = (0.0, 0.0);
                for p in 0..m {
                    // reduce p·u mod M before scaling to keep the angle small
                    let theta = sign * 2.0 * PI * ((p * u) % m) as f64 / m as f64;
                    let (s, c) = theta.sin_cos();
                    let (xr, xi) = (re[base + p * inner], im[base + p * inner]);
                    sr += xr * c - xi * s;
                    si += xr * s + xi * c;
                }
                out_re[base + u * inner] = sr * scale;
                out_im[base + u * inner] = si * scale;
            }
        }
    }
    (out_re, out_im)
}

/// Direct DFT along each of `axes` in sequence.
pub fn dft_direct(re: &[f64], im: &[f64], shape: &[usize], axes: &[usize], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let (mut r, mut i) = (re.to_vec(), im.to_vec());
    for &a in axes {
        let (nr, ni) = dft_axis_direct(&r, &i, shape, a, inverse);
        r = nr;
        i = ni;
    }
    (r, i)
}

/// Amplitude and phase of a real signal's spectrum, by direct summation.
pub fn amplitude_phase(x: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (re, im) = dft_direct(x, &vec![0.0; x.len()], shape, axes, false);
    let amp = re.iter().zip(&im).map(|(r, i)| r.hypot(*i)).collect();
    let phase = re
        .iter()
        .zip(&im)
        .map(|(r, i)| if r.hypot(*i) < 1e-12 { 0.0 } else { i.atan2(*r) })
        .collect();
    (amp, phase)
}

/// Real part of `idft(amplitude · e^{i·phase})` by direct summation.
pub fn polar_inverse(amp: &[f64], phase: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let re: Vec<f64> = amp.iter().zip(phase).map(|(a, p)| a * p.cos()).collect();
    let im: Vec<f64> = amp.iter().zip(phase).map(|(a, p)| a * p.sin()).collect();
    dft_direct(&re, &im, shape, axes, true).0
}

/// Which spectral component to hold fixed in [`held_gate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Held {
    Amplitude,
    Phase,
}

/// Gate output with one component frozen at the spectrum of `anchor`:
/// `idft(polar(A, P))` where the held component comes from `anchor` and the
/// live one from `x`.
pub fn held_gate(x: &[f64], anchor: &[f64], held: Held, shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let (a_live, p_live) = amplitude_phase(x, shape, axes);
    let (a_anchor, p_anchor) = amplitude_phase(anchor, shape, axes);
    match held {
        Held::Amplitude => polar_inverse(&a_anchor, &p_live, shape, axes),
        Held::Phase => polar_inverse(&a_live, &p_anchor, shape, axes),
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|)` over coordinates where either side
/// reaches `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs() >= floor || n.abs() >= floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

/// Label recall and precision by explicit set construction.
/// Returns `(recall, precision)`, each 0 when its denominator is empty.
pub fn label_metrics_by_sets(confident: &[usize], clean: &[usize], noisy: &[usize]) -> (f64, f64) {
    let correct: HashSet<usize> = (0..clean.len()).filter(|&i| clean[i] == noisy[i]).collect();
    let chosen: HashSet<usize> = confident.iter().copied().collect();
    let hit = chosen.intersection(&correct).count();
    let recall = if correct.is_empty() { 0.0 } else { hit as f64 / correct.len() as f64 };
    let precision = if chosen.is_empty() { 0.0 } else { hit as f64 / chosen.len() as f64 };
    (recall, precision)
}
