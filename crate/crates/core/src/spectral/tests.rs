use std::f64::consts::PI;

use proptest::prelude::*;

use super::*;
use crate::oracle::{self, Held};
use crate::rng;

fn random(shape: &[usize], seed: u64) -> Array {
    let mut r = rng::stream(seed, 0);
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng::uniform_range(&mut r, -1.0, 1.0)).collect()).unwrap()
}

fn spectrum_values(x: &Array, axes: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let t = g.constant(x.clone());
    let s = dft(&mut g, t, axes).unwrap();
    (g.value(s.real).data().to_vec(), g.value(s.imag).data().to_vec())
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `L(y) = Σ ½·c·y² + d·y`, built in the graph.
fn quadratic_loss(g: &mut Graph, y: Tensor, c: &Array, d: &Array) -> Tensor {
    let ct = g.constant(c.clone());
    let dt = g.constant(d.clone());
    let sq = g.mul(y, y).unwrap();
    let a = g.mul(sq, ct).unwrap();
    let a = g.scale(a, 0.5);
    let b = g.mul(y, dt).unwrap();
    let s = g.add(a, b).unwrap();
    g.sum(s)
}

fn quadratic_value(y: &[f64], c: &Array, d: &Array) -> f64 {
    y.iter().zip(c.data()).zip(d.data()).map(|((y, c), d)| 0.5 * c * y * y + d * y).sum()
}

fn gate_grad(x: &Array, mode: GateMode, c: &Array, d: &Array) -> Vec<f64> {
    let mut g = Graph::new();
    let chi = g.variable(x.clone());
    let out = gated_forward(&mut g, chi, mode).unwrap();
    let loss = quadratic_loss(&mut g, out, c, d);
    g.backward(loss).unwrap();
    g.grad(chi).map(|a| a.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()])
}

#[test]
fn constant_signal_is_dc_only() {
    let (re, im) = spectrum_values(&Array::from_vec(vec![1.0; 4]), &[0]);
    assert!(max_abs(&re, &[4.0, 0.0, 0.0, 0.0]) < 1e-12);
    assert!(im.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn delta_has_flat_spectrum() {
    let (re, im) = spectrum_values(&Array::from_vec(vec![1.0, 0.0, 0.0, 0.0]), &[0]);
    assert!(max_abs(&re, &[1.0; 4]) < 1e-12);
    assert!(im.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn dft_matches_direct_summation_and_parseval() {
    let x = random(&[16], 1);
    let (re, im) = spectrum_values(&x, &[0]);
    let (ore, oim) = oracle::dft_direct(x.data(), &[0.0; 16], &[16], &[0], false);
    assert!(max_abs(&re, &ore) < 1e-9);
    assert!(max_abs(&im, &oim) < 1e-9);
    let energy: f64 = x.data().iter().map(|v| v * v).sum();
    let spec: f64 = re.iter().zip(&im).map(|(r, i)| r * r + i * i).sum::<f64>() / 16.0;
    assert!((energy - spec).abs() / energy < 1e-9);
}

#[test]
fn empty_or_leading_axes_are_rejected() {
    let mut g = Graph::new();
    let t = g.constant(random(&[2, 4, 4], 3));
    assert!(matches!(dft(&mut g, t, &[]), Err(Error::Usage(_))));
    assert!(matches!(dft(&mut g, t, &[0]), Err(Error::Usage(_))));
    assert!(dft(&mut g, t, &[1, 2]).is_ok());
}

#[test]
fn inverse_of_dc_spectrum() {
    let mut g = Graph::new();
    let re = g.constant(Array::from_vec(vec![4.0, 0.0, 0.0, 0.0]));
    let im = g.constant(Array::zeros(&[4]));
    let out = idft(&mut g, &ComplexSpectrum { real: re, imag: im, axes: vec![0] }).unwrap();
    assert!(max_abs(g.value(out).data(), &[1.0; 4]) < 1e-12);
}

#[test]
fn inverse_round_trip_on_images() {
    let x = random(&[2, 3, 16, 16], 4);
    let mut g = Graph::new();
    let t = g.constant(x.clone());
    let s = dft(&mut g, t, &[2, 3]).unwrap();
    let back = idft(&mut g, &s).unwrap();
    assert!(g.value(back).max_abs_diff(&x) < 1e-9);
}

#[test]
fn inverse_matches_direct_summation() {
    let re = random(&[4, 8], 5);
    let im = random(&[4, 8], 6);
    let mut g = Graph::new();
    let (tr, ti) = (g.constant(re.clone()), g.constant(im.clone()));
    let (or, oi) = idft_complex(&mut g, &ComplexSpectrum { real: tr, imag: ti, axes: vec![0, 1] }).unwrap();
    let (wr, wi) = oracle::dft_direct(re.data(), im.data(), &[4, 8], &[0, 1], true);
    assert!(max_abs(g.value(or).data(), &wr) < 1e-9);
    assert!(max_abs(g.value(oi).data(), &wi) < 1e-9);
}

#[test]
fn imaginary_residue_is_an_integrity_error() {
    let mut g = Graph::new();
    let re = g.constant(Array::from_vec(vec![0.0, 1.0, 0.0, 0.0]));
    let im = g.constant(Array::zeros(&[4]));
    let err = idft(&mut g, &ComplexSpectrum { real: re, imag: im, axes: vec![0] }).unwrap_err();
    assert!(matches!(err, Error::NumericalIntegrity(_)));
}

fn polar_of(re: f64, im: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let r = g.constant(Array::from_vec(vec![re]));
    let i = g.constant(Array::from_vec(vec![im]));
    let p = disentangle(&mut g, &ComplexSpectrum { real: r, imag: i, axes: vec![0] }).unwrap();
    (g.value(p.amplitude).data()[0], g.value(p.phase).data()[0])
}

#[test]
fn disentangle_examples() {
    let (a, p) = polar_of(3.0, 4.0);
    assert!((a - 5.0).abs() < 1e-15);
    assert!((p - 4f64.atan2(3.0)).abs() < 1e-15);
    let (a, p) = polar_of(-2.0, 0.0);
    assert_eq!(a, 2.0);
    assert_eq!(p, PI);
    // negative zero imaginary part still maps into (−π, π]
    assert_eq!(polar_of(-2.0, -0.0).1, PI);
    assert_eq!(polar_of(0.0, 1e-13), (1e-13, 0.0));
}

#[test]
fn disentangle_gradients_match_finite_differences() {
    let re = random(&[12], 7);
    let im = random(&[12], 8);
    let keep: Vec<bool> = re.data().iter().zip(im.data()).map(|(r, i)| r.hypot(*i) > 1e-3).collect();
    for which in 0..2 {
        let mut g = Graph::new();
        let (tr, ti) = (g.variable(re.clone()), g.variable(im.clone()));
        let p = disentangle(&mut g, &ComplexSpectrum { real: tr, imag: ti, axes: vec![0] }).unwrap();
        let loss = if which == 0 { g.sum(p.amplitude) } else { g.sum(p.phase) };
        g.backward(loss).unwrap();
        let f = |r: &[f64], i: &[f64]| -> f64 {
            r.iter()
                .zip(i)
                .map(|(r, i)| if which == 0 { r.hypot(*i) } else { i.atan2(*r) })
                .sum()
        };
        let nr = oracle::central_difference(|v| f(v, im.data()), re.data(), 1e-5);
        let ni = oracle::central_difference(|v| f(re.data(), v), im.data(), 1e-5);
        let mask = |v: &[f64]| v.iter().zip(&keep).map(|(x, k)| if *k { *x } else { 0.0 }).collect::<Vec<_>>();
        let ar = mask(g.grad(tr).unwrap().data());
        let ai = mask(g.grad(ti).unwrap().data());
        assert!(oracle::max_relative_error(&ar, &mask(&nr), 1e-8) < 1e-4);
        assert!(oracle::max_relative_error(&ai, &mask(&ni), 1e-8) < 1e-4);
    }
}

#[test]
fn recombine_examples() {
    let mut g = Graph::new();
    let a = g.constant(Array::from_vec(vec![5.0, 0.0]));
    let p = g.constant(Array::from_vec(vec![4f64.atan2(3.0), 1.234]));
    let s = recombine(&mut g, &SpectralPair { amplitude: a, phase: p, axes: vec![0] }).unwrap();
    assert!(max_abs(g.value(s.real).data(), &[3.0, 0.0]) < 1e-12);
    assert!(max_abs(g.value(s.imag).data(), &[4.0, 0.0]) < 1e-12);

    let bad = g.constant(Array::zeros(&[3]));
    assert!(matches!(
        recombine(&mut g, &SpectralPair { amplitude: a, phase: bad, axes: vec![0] }),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn gate_is_forward_identity_for_every_mode() {
    for (seed, shape) in [(10u64, vec![8]), (11, vec![5, 16]), (12, vec![1, 2, 8, 8]), (13, vec![2, 3, 16, 16])] {
        let x = random(&shape, seed);
        for mode in GateMode::ALL {
            let mut g = Graph::new();
            let t = g.variable(x.clone());
            let out = gated_forward(&mut g, t, mode).unwrap();
            assert!(g.value(out).max_abs_diff(&x) < 1e-9, "{mode} {shape:?}");
        }
    }
}

#[test]
fn detach_both_severs_the_feature() {
    let x = random(&[1, 2, 8, 8], 14);
    let mut g = Graph::new();
    let chi = g.variable(x.clone());
    let out = gated_forward(&mut g, chi, GateMode::DetachBoth).unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert!(g.grad(chi).is_none());
}

#[test]
fn pass_both_matches_direct_gradient() {
    let x = random(&[1, 2, 8, 8], 15);
    let c = random(&[1, 2, 8, 8], 16);
    let d = random(&[1, 2, 8, 8], 17);
    let got = gate_grad(&x, GateMode::PassBoth, &c, &d);
    let want: Vec<f64> = x.data().iter().zip(c.data()).zip(d.data()).map(|((x, c), d)| c * x + d).collect();
    assert!(max_abs(&got, &want) < 1e-8);
}

#[test]
fn held_component_gradients_match_finite_differences() {
    let shape = [1, 2, 8, 8];
    let x = random(&shape, 18);
    let c = random(&shape, 19);
    let d = random(&shape, 20);
    for (mode, held) in [(GateMode::DetachAmplitude, Held::Amplitude), (GateMode::DetachPhase, Held::Phase)] {
        let analytic = gate_grad(&x, mode, &c, &d);
        let numeric = oracle::central_difference(
            |v| quadratic_value(&oracle::held_gate(v, x.data(), held, &shape, &[2, 3]), &c, &d),
            x.data(),
            1e-5,
        );
        let err = oracle::max_relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-4, "{mode}: {err}");
    }
}

#[test]
fn branch_gradients_partition_the_total() {
    let x = random(&[3, 16], 21);
    let c = random(&[3, 16], 22);
    let d = random(&[3, 16], 23);
    let full = gate_grad(&x, GateMode::PassBoth, &c, &d);
    let amp = gate_grad(&x, GateMode::DetachPhase, &c, &d);
    let phase = gate_grad(&x, GateMode::DetachAmplitude, &c, &d);
    let sum: Vec<f64> = amp.iter().zip(&phase).map(|(a, b)| a + b).collect();
    assert!(max_abs(&full, &sum) < 1e-8);
}

#[test]
fn gate_mode_parses_its_own_names() {
    for m in GateMode::ALL {
        assert_eq!(m.as_str().parse::<GateMode>().unwrap(), m);
    }
    assert!("sideways".parse::<GateMode>().is_err());
}

fn signal() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop_oneof![
        (1usize..24).prop_map(|m| vec![m]),
        (1usize..4, 1usize..10, 1usize..10).prop_map(|(c, h, w)| vec![c, h, w]),
    ]
    .prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        (Just(shape), prop::collection::vec(-1.0f64..1.0, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_identity((shape, data) in signal()) {
        let x = Array::new(shape.clone(), data).unwrap();
        for mode in GateMode::ALL {
            let mut g = Graph::new();
            let t = g.constant(x.clone());
            let out = gated_forward(&mut g, t, mode).unwrap();
            prop_assert!(g.value(out).max_abs_diff(&x) < 1e-9);
        }
    }

    #[test]
    fn parseval_and_conjugate_symmetry((shape, data) in signal()) {
        let x = Array::new(shape.clone(), data).unwrap();
        let axes = spatial_axes(shape.len());
        let (re, im) = spectrum_values(&x, &axes);
        let m: usize = axes.iter().map(|&a| shape[a]).product();
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spec: f64 = re.iter().zip(&im).map(|(r, i)| r * r + i * i).sum::<f64>() / m as f64;
        prop_assert!((energy - spec).abs() <= 1e-9 * energy.max(1e-300));

        // F(u) = conj(F(−u mod M)) along every transform axis at once
        let idx = |c: &[usize]| c.iter().zip(&shape).fold(0, |acc, (ci, si)| acc * si + ci);
        let n = x.len();
        for flat in 0..n {
            let mut coord = vec![0; shape.len()];
            let mut rem = flat;
            for a in (0..shape.len()).rev() {
                coord[a] = rem % shape[a];
                rem /= shape[a];
            }
            let mut mirror = coord.clone();
            for &a in &axes {
                mirror[a] = (shape[a] - coord[a]) % shape[a];
            }
            let j = idx(&mirror);
            prop_assert!((re[flat] - re[j]).abs() < 1e-9);
            prop_assert!((im[flat] + im[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn dft_is_linear((shape, data) in signal(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let x1 = Array::new(shape.clone(), data).unwrap();
        let x2 = random(&shape, seed);
        let mix = Array::new(shape.clone(), x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let axes = spatial_axes(shape.len());
        let (r1, i1) = spectrum_values(&x1, &axes);
        let (r2, i2) = spectrum_values(&x2, &axes);
        let (rm, im) = spectrum_values(&mix, &axes);
        let scale = rm.iter().chain(&im).fold(1.0f64, |m, v| m.max(v.abs()));
        for k in 0..rm.len() {
            prop_assert!((rm[k] - (a * r1[k] + b * r2[k])).abs() <= 1e-9 * scale);
            prop_assert!((im[k] - (a * i1[k] + b * i2[k])).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn recombine_inverts_disentangle(re in prop::collection::vec(-2.0f64..2.0, 1..40), seed in 0u64..1000) {
        let im = random(&[re.len()], seed);
        prop_assume!(re.iter().zip(im.data()).all(|(r, i)| r.hypot(*i) > 1e-6));
        let mut g = Graph::new();
        let tr = g.constant(Array::from_vec(re.clone()));
        let ti = g.constant(im.clone());
        let p = disentangle(&mut g, &ComplexSpectrum { real: tr, imag: ti, axes: vec![0] }).unwrap();
        prop_assert!(g.value(p.amplitude).data().iter().all(|&a| a >= 0.0));
        prop_assert!(g.value(p.phase).data().iter().all(|&v| v > -PI && v <= PI));
        let s = recombine(&mut g, &p).unwrap();
        prop_assert!(max_abs(g.value(s.real).data(), &re) < 1e-9);
        prop_assert!(max_abs(g.value(s.imag).data(), im.data()) < 1e-9);
    }
}
