use paddles_core::autograd::{opt_step, Array, Graph, OptimizerState, Param, Tensor};
use paddles_core::oracle::{central_difference, max_relative_error};
use paddles_core::{rng, Error};
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64) -> Array {
    let mut r = rng::stream(seed, 0);
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng::uniform_range(&mut r, -1.0, 1.0)).collect()).unwrap()
}

/// `Σ c ⊙ y` for a fixed random `c`: a generic scalar functional of `y`.
fn weighted_sum(g: &mut Graph, y: Tensor, seed: u64) -> Tensor {
    let c = g.constant(random(g.shape(y).to_vec().as_slice(), seed));
    let p = g.mul(y, c).unwrap();
    g.sum(p)
}

/// Analytic gradient of `f` at `x` next to its central-difference estimate.
fn check_fd(x: &Array, f: impl Fn(&mut Graph, Tensor) -> Tensor) -> f64 {
    let mut g = Graph::new();
    let t = g.variable(x.clone());
    let loss = f(&mut g, t);
    g.backward(loss).unwrap();
    let analytic = g.grad(t).unwrap().data().to_vec();
    let numeric = central_difference(
        |v| {
            let mut g = Graph::new();
            let t = g.constant(Array::new(x.shape().to_vec(), v.to_vec()).unwrap());
            let l = f(&mut g, t);
            g.value(l).data()[0]
        },
        x.data(),
        1e-5,
    );
    max_relative_error(&analytic, &numeric, 1e-8)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.constant(Array::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let zero = g.constant(Array::zeros(&[2, 2]));
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let z = g.matmul(m, zero).unwrap();
    assert_eq!(g.value(z).data(), &[0.0; 4]);

    let bad = g.constant(Array::zeros(&[3, 2]));
    let err = g.matmul(m, bad).unwrap_err();
    assert!(matches!(&err, Error::Dimension(msg) if msg.contains("[2, 2]") && msg.contains("[3, 2]")));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let err = check_fd(&a, |g, t| {
        let bt = g.constant(b.clone());
        let p = g.matmul(t, bt).unwrap();
        g.sum(p)
    });
    assert!(err < 1e-4, "{err}");
    let err = check_fd(&b, |g, t| {
        let at = g.constant(a.clone());
        let p = g.matmul(at, t).unwrap();
        weighted_sum(g, p, 3)
    });
    assert!(err < 1e-4, "{err}");
}

/// Reference convolution over an explicitly zero-padded copy of the input.
fn conv_reference(x: &Array, w: &Array, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let mut padded = vec![0.0; n * c * ph * pw];
    for i in 0..n * c {
        for y in 0..h {
            for xx in 0..wd {
                padded[(i * ph + y + pad) * pw + xx + pad] = x.data()[(i * h + y) * wd + xx];
            }
        }
    }
    let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ch in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                s += padded[((b * c + ch) * ph + y * stride + dy) * pw + xx * stride + dx]
                                    * w.data()[((o * c + ch) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * f + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

#[test]
fn conv_identity_and_zero_cases() {
    let x = random(&[2, 1, 5, 5], 4);
    let mut g = Graph::new();
    let xt = g.constant(x.clone());
    let one = g.constant(Array::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv2d(xt, one, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let mut g = Graph::new();
    let zx = g.constant(Array::zeros(&[1, 2, 4, 4]));
    let w = g.variable(random(&[3, 2, 3, 3], 5));
    let y = g.conv2d(zx, w, 1, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_rejects_untileable_geometry() {
    let mut g = Graph::new();
    let x = g.constant(Array::zeros(&[1, 1, 6, 6]));
    let w = g.constant(Array::zeros(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, w, 2, 0), Err(Error::Config(_))));
    let big = g.constant(Array::zeros(&[1, 1, 9, 9]));
    assert!(matches!(g.conv2d(x, big, 1, 1), Err(Error::Config(_))));
}

#[test]
fn conv_matches_naive_reference_in_value_and_gradient() {
    let x = random(&[2, 3, 8, 8], 6);
    let w = random(&[4, 3, 3, 3], 7);
    let c = random(&[2, 4, 8, 8], 8);
    for (stride, pad) in [(1, 1), (1, 0)] {
        let mut g = Graph::new();
        let xt = g.variable(x.clone());
        let wt = g.variable(w.clone());
        let y = g.conv2d(xt, wt, stride, pad).unwrap();
        let (shape, want) = conv_reference(&x, &w, stride, pad);
        assert_eq!(g.shape(y), &shape[..]);
        let got = g.value(y).data().to_vec();
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-6));

        // L = Σ c ⊙ y, so dL/dx and dL/dw are adjoint sums over the reference
        let ct = g.constant(Array::new(shape.clone(), c.data()[..shape.iter().product()].to_vec()).unwrap());
        let p = g.mul(y, ct).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let cw = &c.data()[..shape.iter().product()];
        let lin = |xs: &Array, ws: &Array| -> f64 {
            conv_reference(xs, ws, stride, pad).1.iter().zip(cw).map(|(a, b)| a * b).sum()
        };
        // exact for a bilinear map: unit perturbations of one coordinate
        let basis_grad = |len: usize, eval: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..len).map(eval).collect() };
        let gx = basis_grad(x.len(), &|i| {
            let mut e = Array::zeros(x.shape());
            e.data_mut()[i] = 1.0;
            lin(&e, &w)
        });
        let gw = basis_grad(w.len(), &|i| {
            let mut e = Array::zeros(w.shape());
            e.data_mut()[i] = 1.0;
            lin(&x, &e)
        });
        assert!(g.grad(xt).unwrap().data().iter().zip(&gx).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(g.grad(wt).unwrap().data().iter().zip(&gw).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}

#[test]
fn relu_examples_and_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Array::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.variable(Array::from_vec(vec![0.5, 1.0, 3.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.5, 1.0, 3.0]);
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 3]);

    let mut v = random(&[40], 9);
    v.data_mut().iter_mut().for_each(|a| {
        if a.abs() < 1e-3 {
            *a = 0.5
        }
    });
    let err = check_fd(&v, |g, t| {
        let r = g.relu(t);
        weighted_sum(g, r, 10)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let z = g.constant(Array::zeros(&[3, 4]));
    let l = g.cross_entropy(z, &[0, 1, 3], None).unwrap();
    assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

    let z = g.constant(Array::new(vec![1, 3], vec![0.0, 30.0, 0.0]).unwrap());
    let l = g.cross_entropy(z, &[1], None).unwrap();
    let v = g.value(l).data()[0];
    assert!((0.0..1e-12).contains(&v));

    let z = g.constant(Array::zeros(&[2, 3]));
    let err = g.cross_entropy(z, &[0, 3], None).unwrap_err();
    assert!(matches!(&err, Error::Input(msg) if msg.contains("index 1")));
}

#[test]
fn cross_entropy_gradient_and_weight_scaling() {
    let z = random(&[5, 3], 11).data().iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let z = Array::new(vec![5, 3], z).unwrap();
    let labels = [0, 2, 1, 1, 0];
    let w = [0.5, 2.0, 1.5];
    for weights in [None, Some(&w[..])] {
        let err = check_fd(&z, |g, t| g.cross_entropy(t, &labels, weights).unwrap());
        assert!(err < 1e-4, "{err}");
    }
    let mut g = Graph::new();
    let t = g.constant(z);
    let a = g.cross_entropy(t, &labels, Some(&w)).unwrap();
    let doubled: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let b = g.cross_entropy(t, &labels, Some(&doubled)).unwrap();
    assert_eq!(g.value(b).data()[0], 2.0 * g.value(a).data()[0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.variable(Array::from_vec(vec![1.0, -2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);

    let mut g = Graph::new();
    let x = g.variable(Array::from_vec(vec![1.0, -2.0, 3.0]));
    let a = g.sum(x);
    let b = g.sum(x);
    let loss = g.add(a, b).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0; 3]);

    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn stop_gradient_examples() {
    let mut g = Graph::new();
    let x = g.variable(Array::from_vec(vec![2.0]));
    let s = g.stop_gradient(x);
    let p = g.mul(s, x).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0]);

    let mut g = Graph::new();
    let x = g.variable(Array::from_vec(vec![2.0, 5.0]));
    let s = g.stop_gradient(x);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert!(g.grad(x).is_none_or(|a| a.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn pooling_reshape_and_bias_gradients_match_finite_differences() {
    let x = random(&[2, 3, 4, 6], 12);
    let err = check_fd(&x, |g, t| {
        let p = g.avg_pool2d(t, 2).unwrap();
        let r = g.reshape(p, &[2, 18]).unwrap();
        weighted_sum(g, r, 13)
    });
    assert!(err < 1e-4, "{err}");
    let b = random(&[3], 14);
    let err = check_fd(&b, |g, t| {
        let xt = g.constant(x.clone());
        let y = g.add_bias(xt, t).unwrap();
        let sq = g.mul(y, y).unwrap();
        weighted_sum(g, sq, 15)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    let x = random(&[6, 4], 16);
    let labels = [0, 1, 2, 2, 1, 0];
    let w0 = random(&[4, 5], 17);
    let b0 = random(&[5], 18);
    let w1 = random(&[5, 3], 19);
    let b1 = random(&[3], 20);
    let params = [w0, b0, w1, b1];
    let loss_of = |g: &mut Graph, ts: &[Tensor]| {
        let xt = g.constant(x.clone());
        let h = g.matmul(xt, ts[0]).unwrap();
        let h = g.add_bias(h, ts[1]).unwrap();
        let h = g.relu(h);
        let z = g.matmul(h, ts[2]).unwrap();
        let z = g.add_bias(z, ts[3]).unwrap();
        g.cross_entropy(z, &labels, None).unwrap()
    };
    let mut g = Graph::new();
    let ts: Vec<Tensor> = params.iter().map(|p| g.variable(p.clone())).collect();
    let loss = loss_of(&mut g, &ts);
    g.backward(loss).unwrap();
    for which in 0..4 {
        let numeric = central_difference(
            |v| {
                let mut g = Graph::new();
                let ts: Vec<Tensor> = params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        if i == which {
                            g.constant(Array::new(p.shape().to_vec(), v.to_vec()).unwrap())
                        } else {
                            g.constant(p.clone())
                        }
                    })
                    .collect();
                let l = loss_of(&mut g, &ts);
                g.value(l).data()[0]
            },
            params[which].data(),
            1e-5,
        );
        let err = max_relative_error(g.grad(ts[which]).unwrap().data(), &numeric, 1e-8);
        assert!(err < 1e-4, "param {which}: {err}");
    }
}

#[test]
fn adam_on_a_parabola_converges() {
    let mut p = Param::new("theta", Array::from_vec(vec![3.0]));
    let mut state = OptimizerState::adam(0.1, 0.0).unwrap();
    let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 3.0f64);
    for t in 1..=100 {
        let g = 2.0 * p.value.data()[0];
        p.accumulate(&Array::from_vec(vec![g]));
        opt_step(&mut [&mut p], &mut state).unwrap();
        let gr = 2.0 * theta;
        m = 0.9 * m + (1.0 - 0.9) * gr;
        v = 0.999 * v + (1.0 - 0.999) * gr * gr;
        theta -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert_eq!(p.value.data()[0].to_bits(), theta.to_bits());
    }
    assert!(p.value.data()[0].abs() < 0.5);
}

#[test]
fn repeated_steps_are_deterministic() {
    let run = || {
        let mut p = Param::new("w", random(&[4, 3], 21));
        let mut state = OptimizerState::sgd(0.05, 0.9, 1e-4).unwrap();
        for s in 0..25 {
            p.accumulate(&random(&[4, 3], 100 + s));
            opt_step(&mut [&mut p], &mut state).unwrap();
        }
        p.value
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stop_gradient_is_forward_transparent(shape in prop::collection::vec(1usize..5, 1..4), seed in 0u64..10_000) {
        let x = random(&shape, seed);
        let mut g = Graph::new();
        let t = g.variable(x.clone());
        let s = g.stop_gradient(t);
        prop_assert!(g.value(s).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(!g.requires_grad(s));
    }

    #[test]
    fn elementwise_chain_matches_finite_differences(n in 1usize..20, seed in 0u64..10_000) {
        let x = random(&[n], seed);
        let err = check_fd(&x, |g, t| {
            let c = g.constant(random(&[n], seed + 1));
            let a = g.mul(t, c).unwrap();
            let b = g.sub(a, t).unwrap();
            let sq = g.mul(b, t).unwrap();
            let s = g.scale(sq, 0.7);
            let u = g.add(s, t).unwrap();
            weighted_sum(g, u, seed + 2)
        });
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn accumulation_order_is_irrelevant(seed in 0u64..10_000, uses in 2usize..6) {
        let x = random(&[7], seed);
        let grad_with = |order: &[usize]| {
            let mut g = Graph::new();
            let t = g.variable(x.clone());
            let terms: Vec<Tensor> = (0..uses).map(|i| {
                let c = g.constant(random(&[7], seed + 10 + i as u64));
                let p = g.mul(t, c).unwrap();
                g.sum(p)
            }).collect();
            let mut acc = terms[order[0]];
            for &i in &order[1..] {
                acc = g.add(acc, terms[i]).unwrap();
            }
            g.backward(acc).unwrap();
            g.grad(t).unwrap().data().to_vec()
        };
        let fwd: Vec<usize> = (0..uses).collect();
        let rev: Vec<usize> = (0..uses).rev().collect();
        let (a, b) = (grad_with(&fwd), grad_with(&rev));
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(q.abs()).max(1e-300));
        }
    }
}
