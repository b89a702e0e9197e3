//! Batched 2-D FFT over the last two axes of a row-major buffer.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_rows(buf: &mut [Complex64], len: usize, inverse: bool) {
    if len == 1 {
        return;
    }
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    });
    plan.process(buf);
}

fn transpose_planes(buf: &[Complex64], out: &mut [Complex64], h: usize, w: usize) {
    let plane = h * w;
    for (src, dst) in buf.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for i in 0..h {
            for j in 0..w {
                dst[j * h + i] = src[i * w + j];
            }
        }
    }
}

/// Unnormalized 2-D DFT of every `h x w` plane in `buf`, in place.
/// `inverse` flips the exponent sign without applying `1/(h*w)`.
pub fn dft2_unnormalized(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(buf.len() % (h * w), 0, "buffer is not a stack of planes");
    fft_rows(buf, w, inverse);
    if h > 1 {
        let mut t = vec![Complex64::new(0.0, 0.0); buf.len()];
        transpose_planes(buf, &mut t, h, w);
        fft_rows(&mut t, h, inverse);
        transpose_planes(&t, buf, w, h);
    }
}

/// Forward 2-D FFT of a real stack of planes.
pub fn fft2_real(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft2_unnormalized(&mut buf, h, w, false);
    buf
}

pub fn fft2(z: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf = z.to_vec();
    dft2_unnormalized(&mut buf, h, w, false);
    buf
}

/// Inverse 2-D FFT including the `1/(h*w)` factor.
pub fn ifft2(z: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf = z.to_vec();
    dft2_unnormalized(&mut buf, h, w, true);
    let s = 1.0 / (h * w) as f64;
    buf.iter_mut().for_each(|v| *v *= s);
    buf
}

/// Index of the frequency bin `(-u mod h, -v mod w)`.
pub fn mirror_bin(u: usize, v: usize, h: usize, w: usize) -> usize {
    ((h - u) % h) * w + (w - v) % w
}
