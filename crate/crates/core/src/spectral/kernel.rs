//! Fast per-axis complex transforms backed by `rustfft`.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

/// Transforms every line of `(re, im)` along `axis` of `shape` in place.
fn apply(re: &mut [f64], im: &mut [f64], shape: &[usize], axis: usize, direction: FftDirection, scale: f64) {
    let m = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let fft = plan(m, direction);
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for o in 0..outer {
        for t in 0..inner {
            let base = o * m * inner + t;
            for (u, b) in buf.iter_mut().enumerate() {
                let idx = base + u * inner;
                *b = Complex64::new(re[idx], im[idx]);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (u, b) in buf.iter().enumerate() {
                let idx = base + u * inner;
                re[idx] = b.re * scale;
                im[idx] = b.im * scale;
            }
        }
    }
}

/// Forward (`e^{-i2πpu/M}`, unnormalized) or inverse (`e^{+i2πpu/M}`, `1/M`) transform.
pub(crate) fn transform_axis(re: &mut [f64], im: &mut [f64], shape: &[usize], axis: usize, inverse: bool) {
    if inverse {
        apply(re, im, shape, axis, FftDirection::Inverse, 1.0 / shape[axis] as f64);
    } else {
        apply(re, im, shape, axis, FftDirection::Forward, 1.0);
    }
}

/// Adjoint (conjugate transpose) of [`transform_axis`] with the same flag.
pub(crate) fn adjoint_axis(re: &mut [f64], im: &mut [f64], shape: &[usize], axis: usize, inverse: bool) {
    if inverse {
        apply(re, im, shape, axis, FftDirection::Forward, 1.0 / shape[axis] as f64);
    } else {
        apply(re, im, shape, axis, FftDirection::Inverse, 1.0);
    }
}
