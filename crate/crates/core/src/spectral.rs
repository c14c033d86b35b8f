//! Multi-dimensional FFT helpers over ndarray, built on 1-D rustfft plans.

use ndarray::{Array, Axis, Dimension};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place unnormalized DFT along every axis. The inverse divides by the element count.
pub fn fftn<D: Dimension>(data: &mut Array<Complex64, D>, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    for ax in 0..data.ndim() {
        let n = data.len_of(Axis(ax));
        if n < 2 {
            continue;
        }
        let plan = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        for mut lane in data.lanes_mut(Axis(ax)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            plan.process_with_scratch(&mut buf, &mut scratch);
            for (v, b) in lane.iter_mut().zip(buf.iter()) {
                *v = *b;
            }
        }
    }
    if inverse {
        let scale = 1.0 / data.len() as f64;
        data.mapv_inplace(|v| v * scale);
    }
}

/// Signed frequency index of DFT bin `k` for a length-`n` axis.
pub fn signed_index(k: usize, n: usize) -> f64 {
    if k <= n / 2 && !(n % 2 == 0 && k == n / 2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}
