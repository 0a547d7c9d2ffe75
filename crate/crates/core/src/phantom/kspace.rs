//! Centered, unitary 2D DFT and the k-space truncation degradation.
//!
//! Spectra are stored with the DC coefficient at index `N/2` along each axis.
//! A truncation window of even size `n` covers indices `N/2 - n/2 .. N/2 + n/2`,
//! i.e. frequencies `-n/2 ..= n/2 - 1`. The `-n/2` edge has no partner inside
//! the window, so reconstructions complete it with its Hermitian mirror at
//! `+n/2` before inverting. That keeps every reconstruction real and makes
//! truncate-then-reconstruct an orthogonal projection.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{arg_err, shape_err, Result};
use crate::Field;

#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceGrid {
    pub values: Array2<Complex64>,
    pub dc_centered: bool,
}

impl KSpaceGrid {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// Sum of squared coefficient magnitudes.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn fft_axis(data: &mut Array2<Complex64>, axis: usize, inverse: bool) {
    let len = data.len_of(Axis(axis));
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    };
    let mut buf = vec![Complex64::default(); len];
    for mut lane in data.lanes_mut(Axis(axis)) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
}

/// Index permutation that moves frequency 0 to `N/2`.
fn shift_index(i: usize, n: usize) -> usize {
    (i + n / 2) % n
}

fn unshift_index(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}

fn check_square(rows: usize, cols: usize) -> Result<usize> {
    if rows != cols || rows == 0 {
        return Err(shape_err(format!("expected a non-empty square field, got {rows}x{cols}")));
    }
    Ok(rows)
}

/// Unitary centered 2D DFT of a real image.
pub fn forward_dft(image: &Field) -> Result<KSpaceGrid> {
    let n = check_square(image.nrows(), image.ncols())?;
    let mut spec = image.mapv(|v| Complex64::new(v, 0.0));
    fft_axis(&mut spec, 0, false);
    fft_axis(&mut spec, 1, false);
    let scale = 1.0 / n as f64;
    let mut out = Array2::<Complex64>::zeros((n, n));
    for ((r, c), v) in spec.indexed_iter() {
        out[[shift_index(r, n), shift_index(c, n)]] = *v * scale;
    }
    Ok(KSpaceGrid { values: out, dc_centered: true })
}

/// Complex inverse of [`forward_dft`].
pub fn inverse_dft_complex(k: &KSpaceGrid) -> Result<Array2<Complex64>> {
    let n = check_square(k.values.nrows(), k.values.ncols())?;
    let mut spec = Array2::<Complex64>::zeros((n, n));
    for ((r, c), v) in k.values.indexed_iter() {
        let (r, c) = if k.dc_centered {
            (unshift_index(r, n), unshift_index(c, n))
        } else {
            (r, c)
        };
        spec[[r, c]] = *v;
    }
    fft_axis(&mut spec, 0, true);
    fft_axis(&mut spec, 1, true);
    let scale = 1.0 / n as f64;
    spec.mapv_inplace(|v| v * scale);
    Ok(spec)
}

/// Real part of the inverse transform.
pub fn inverse_dft(k: &KSpaceGrid) -> Result<Field> {
    Ok(inverse_dft_complex(k)?.mapv(|c| c.re))
}

/// First index of the centered window of side `n` inside a grid of side `big`.
pub fn window_start(big: usize, n: usize) -> usize {
    big / 2 - n / 2
}

fn check_window(n: usize, big: usize) -> Result<()> {
    if n < 2 || n % 2 != 0 {
        return Err(arg_err(format!("window size must be an even integer >= 2, got {n}")));
    }
    if n > big {
        return Err(arg_err(format!("window size {n} exceeds grid size {big}")));
    }
    Ok(())
}

/// Keep the centered `n x n` block of the image's spectrum.
pub fn kspace_truncate(image: &Field, n: usize) -> Result<KSpaceGrid> {
    let full = forward_dft(image)?;
    check_window(n, full.size())?;
    let s = window_start(full.size(), n);
    let values = full.values.slice(ndarray::s![s..s + n, s..s + n]).to_owned();
    Ok(KSpaceGrid { values, dc_centered: true })
}

/// Embed an `n x n` centered spectrum in an `N x N` zero grid (no completion).
pub fn zero_pad(k: &KSpaceGrid, big: usize) -> Result<KSpaceGrid> {
    let n = check_square(k.values.nrows(), k.values.ncols())?;
    if n > big {
        return Err(arg_err(format!("cannot zero-fill {n}x{n} into {big}x{big}")));
    }
    let s = window_start(big, n);
    let mut out = Array2::<Complex64>::zeros((big, big));
    out.slice_mut(ndarray::s![s..s + n, s..s + n]).assign(&k.values);
    Ok(KSpaceGrid { values: out, dc_centered: true })
}

/// Zero-pad and fill the mirror positions of the unpaired `-n/2` edge with
/// conjugates, so the grid is Hermitian whenever the window came from a real image.
pub fn hermitian_complete(k: &KSpaceGrid, big: usize) -> Result<KSpaceGrid> {
    let n = k.size();
    let mut out = zero_pad(k, big)?;
    let s = window_start(big, n);
    let inside = |i: usize| i >= s && i < s + n;
    for r in s..s + n {
        for c in s..s + n {
            let (mr, mc) = ((big - r) % big, (big - c) % big);
            if !(inside(mr) && inside(mc)) {
                out.values[[mr, mc]] = out.values[[r, c]].conj();
            }
        }
    }
    Ok(out)
}

/// Standard zero-filling reconstruction at the target size `big`.
pub fn zero_fill_upsample(k: &KSpaceGrid, big: usize) -> Result<Field> {
    inverse_dft(&hermitian_complete(k, big)?)
}

/// Hard data consistency: replace the measured window of `raw`'s spectrum.
pub fn data_consistency(raw: &Field, measured: &KSpaceGrid) -> Result<Field> {
    let mut spec = forward_dft(raw)?;
    let big = spec.size();
    let n = measured.size();
    check_window(n, big)?;
    let completed = hermitian_complete(measured, big)?;
    let s = window_start(big, n);
    let inside = |i: usize| i >= s && i < s + n;
    for r in 0..big {
        for c in 0..big {
            let (mr, mc) = ((big - r) % big, (big - c) % big);
            let in_window = inside(r) && inside(c);
            let mirror_in_window = inside(mr) && inside(mc);
            if in_window || mirror_in_window {
                spec.values[[r, c]] = completed.values[[r, c]];
            }
        }
    }
    inverse_dft(&spec)
}

/// Low-resolution degradation followed by zero-filling back to the same size.
pub fn degrade(image: &Field, n: usize) -> Result<Field> {
    zero_fill_upsample(&kspace_truncate(image, n)?, image.nrows())
}
