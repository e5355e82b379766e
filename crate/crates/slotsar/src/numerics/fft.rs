//! 2-d FFT helpers on interleaved complex planes.
//!
//! A complex H×W field is stored as a real tensor of shape [2, H, W]
//! (plane 0 real, plane 1 imaginary). Planners are cached per thread.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// In-place 2-d FFT over a row-major complex buffer.
///
/// Forward is the unnormalized DFT; inverse divides by H*W so that
/// `ifft2d(fft2d(x)) == x` up to rounding.
pub fn fft2d(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    let row_plan = plan(w, inverse);
    for r in 0..h {
        row_plan.process(&mut buf[r * w..(r + 1) * w]);
    }
    let col_plan = plan(h, inverse);
    let mut col = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_plan.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// Split [2,H,W] plane data into a complex buffer.
pub fn planes_to_complex(data: &[f64], hw: usize) -> Vec<Complex64> {
    let (re, im) = data.split_at(hw);
    re.iter()
        .zip(im)
        .map(|(&r, &i)| Complex64::new(r, i))
        .collect()
}

/// Pack a complex buffer back into [2,H,W] plane data.
pub fn complex_to_planes(buf: &[Complex64]) -> Vec<f64> {
    let hw = buf.len();
    let mut out = vec![0.0; 2 * hw];
    for (k, v) in buf.iter().enumerate() {
        out[k] = v.re;
        out[hw + k] = v.im;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let h = 6;
        let w = 7; // non power of two on purpose
        let mut buf: Vec<Complex64> = (0..h * w)
            .map(|k| Complex64::new((k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()))
            .collect();
        let orig = buf.clone();
        fft2d(&mut buf, h, w, false);
        fft2d(&mut buf, h, w, true);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft_on_small_grid() {
        let h = 3;
        let w = 4;
        let input: Vec<Complex64> = (0..h * w)
            .map(|k| Complex64::new(k as f64 + 0.5, -(k as f64) * 0.25))
            .collect();
        let mut buf = input.clone();
        fft2d(&mut buf, h, w, false);
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::default();
                for y in 0..h {
                    for x in 0..w {
                        let ph = -2.0
                            * std::f64::consts::PI
                            * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                        acc += input[y * w + x] * Complex64::new(ph.cos(), ph.sin());
                    }
                }
                assert!((buf[ky * w + kx] - acc).norm() < 1e-9);
            }
        }
    }
}
