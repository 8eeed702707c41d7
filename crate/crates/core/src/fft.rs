//! Unitary n-dimensional FFT over selected axes.
//!
//! Both directions are scaled by `1/sqrt(n)` per transformed axis, so the
//! forward transform is unitary and its adjoint is the inverse transform.
//! Lengths need not be powers of two; the planner picks mixed-radix
//! butterflies and falls back to Bluestein for large prime factors.
//!
//! The centered variants apply `ifftshift` before and `fftshift` after the
//! transform, which puts the zero frequency in the middle of each axis as
//! is usual for k-space.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::array::CArray;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place unitary transform of a row-major buffer along `axes`.
pub fn fft_axes_inplace(data: &mut [Complex64], shape: &[usize], axes: &[usize], inverse: bool) {
    let total: usize = shape.iter().product();
    assert_eq!(total, data.len());
    if total == 0 {
        return;
    }
    for &axis in axes {
        let n = shape[axis];
        if n <= 1 {
            continue;
        }
        let fft = plan(n, inverse);
        let scale = 1.0 / (n as f64).sqrt();
        let stride: usize = shape[axis + 1..].iter().product();
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        if stride == 1 {
            fft.process_with_scratch(data, &mut scratch);
            data.iter_mut().for_each(|v| *v *= scale);
            continue;
        }
        let outer = total / (n * stride);
        // gather a tile of `stride` lines so the inner copy stays contiguous
        let mut buf = vec![Complex64::default(); n * stride];
        for o in 0..outer {
            let base = o * n * stride;
            for k in 0..n {
                for j in 0..stride {
                    buf[j * n + k] = data[base + k * stride + j];
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n {
                for j in 0..stride {
                    data[base + k * stride + j] = buf[j * n + k] * scale;
                }
            }
        }
    }
}

/// Circularly shifts each listed axis by `floor(n/2)` (fftshift) or by
/// `-floor(n/2)` (ifftshift).
pub fn shift_axes(data: &mut [Complex64], shape: &[usize], axes: &[usize], inverse: bool) {
    for &axis in axes {
        let n = shape[axis];
        if n <= 1 {
            continue;
        }
        let k = if inverse { n - n / 2 } else { n / 2 };
        if k % n == 0 {
            continue;
        }
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            let block = &mut data[o * n * stride..(o + 1) * n * stride];
            block.rotate_right(k * stride);
        }
    }
}

/// Shift helper for real planar data.
pub fn shift_axes_real(data: &mut [f64], shape: &[usize], axes: &[usize], inverse: bool) {
    for &axis in axes {
        let n = shape[axis];
        if n <= 1 {
            continue;
        }
        let k = if inverse { n - n / 2 } else { n / 2 };
        if k % n == 0 {
            continue;
        }
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            data[o * n * stride..(o + 1) * n * stride].rotate_right(k * stride);
        }
    }
}

pub fn fft_nd(x: &CArray, axes: &[usize]) -> CArray {
    let mut out = x.clone();
    let shape = out.shape().to_vec();
    fft_axes_inplace(out.data_mut(), &shape, axes, false);
    out
}

pub fn ifft_nd(x: &CArray, axes: &[usize]) -> CArray {
    let mut out = x.clone();
    let shape = out.shape().to_vec();
    fft_axes_inplace(out.data_mut(), &shape, axes, true);
    out
}

/// Centered forward transform: `fftshift ∘ fft ∘ ifftshift`.
pub fn fft_c(x: &CArray, axes: &[usize]) -> CArray {
    centered(x, axes, false)
}

/// Centered inverse transform: `fftshift ∘ ifft ∘ ifftshift`.
pub fn ifft_c(x: &CArray, axes: &[usize]) -> CArray {
    centered(x, axes, true)
}

fn centered(x: &CArray, axes: &[usize], inverse: bool) -> CArray {
    let mut out = x.clone();
    let shape = out.shape().to_vec();
    shift_axes(out.data_mut(), &shape, axes, true);
    fft_axes_inplace(out.data_mut(), &shape, axes, inverse);
    shift_axes(out.data_mut(), &shape, axes, false);
    out
}

/// The trailing `n` axes of a rank-`rank` array.
pub fn trailing_axes(rank: usize, n: usize) -> Vec<usize> {
    (rank - n..rank).collect()
}
