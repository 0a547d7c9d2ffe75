//! Differentiable hard data consistency.
//!
//! For a window of even size `n`, let `A` be the complex `N x N` matrix that
//! keeps frequencies `-n/2 ..= n/2 - 1` along one axis and `A_I` the real matrix
//! keeping `-n/2 + 1 ..= n/2 - 1`. The projection of a real image `X` onto
//! the measured window together with its Hermitian mirror is
//!
//! `P(X) = 2 Re(A X A^T) - A_I X A_I^T`,
//!
//! which equals `zero_fill_upsample(kspace_truncate(X, n))` and needs only
//! real matrix products. Hard replacement of the measured window is then
//! `raw - P(raw) + P(ground truth)`, where `P(ground truth)` is exactly the
//! zero-filled low-resolution input.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{arg_err, shape_err, Result};

#[derive(Debug, Clone)]
struct BandMatrices {
    re: Tensor,
    im: Tensor,
    interior: Tensor,
}

#[derive(Debug, Clone)]
pub struct BandProjector {
    grid_size: usize,
    /// Indexed by `n / 2 - 1`.
    bands: Vec<BandMatrices>,
}

fn band_matrix(big: usize, lo: i64, hi: i64) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; big * big];
    let mut im = vec![0.0; big * big];
    for p in 0..big {
        for q in 0..big {
            let d = p as f64 - q as f64;
            let (mut sr, mut si) = (0.0, 0.0);
            for k in lo..=hi {
                let phase = 2.0 * PI * k as f64 * d / big as f64;
                sr += phase.cos();
                si += phase.sin();
            }
            re[p * big + q] = sr / big as f64;
            im[p * big + q] = si / big as f64;
        }
    }
    (re, im)
}

impl BandProjector {
    pub fn new(grid_size: usize, dtype: DType) -> Result<Self> {
        if grid_size < 2 || grid_size % 2 != 0 {
            return Err(arg_err(format!("grid size must be even, got {grid_size}")));
        }
        let dev = Device::Cpu;
        let mut bands = Vec::with_capacity(grid_size / 2);
        for half in 1..=grid_size / 2 {
            let h = half as i64;
            // The full window is its own mirror image, so the projection is the identity.
            let (re, im, interior) = if half == grid_size / 2 {
                let eye: Vec<f64> = (0..grid_size * grid_size).map(|p| f64::from(p % (grid_size + 1) == 0)).collect();
                (eye.clone(), vec![0.0; grid_size * grid_size], eye)
            } else {
                let (re, im) = band_matrix(grid_size, -h, h - 1);
                (re, im, band_matrix(grid_size, -h + 1, h - 1).0)
            };
            let mk = |v: Vec<f64>| -> Result<Tensor> {
                Ok(Tensor::from_vec(v, (grid_size, grid_size), &dev)?.to_dtype(dtype)?)
            };
            bands.push(BandMatrices { re: mk(re)?, im: mk(im)?, interior: mk(interior)? });
        }
        Ok(BandProjector { grid_size, bands })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    fn band(&self, n: usize) -> Result<&BandMatrices> {
        if n < 2 || n % 2 != 0 || n > self.grid_size {
            return Err(arg_err(format!("window {n} must be even and within [2, {}]", self.grid_size)));
        }
        Ok(&self.bands[n / 2 - 1])
    }

    fn stacked(&self, ns: &[usize], pick: impl Fn(&BandMatrices) -> &Tensor) -> Result<Tensor> {
        let mats = ns
            .iter()
            .map(|&n| Ok(pick(self.band(n)?).clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&mats, 0)?)
    }

    /// Project a batch `(B, 1, N, N)` onto each sample's measured band.
    pub fn project(&self, x: &Tensor, ns: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != 1 || h != self.grid_size || w != self.grid_size || b != ns.len() {
            return Err(shape_err(format!(
                "expected ({}, 1, {g}, {g}), got {:?}",
                ns.len(),
                x.dims(),
                g = self.grid_size
            )));
        }
        let x3 = x.reshape((b, h, w))?;
        let re = self.stacked(ns, |m| &m.re)?.to_dtype(x.dtype())?;
        let im = self.stacked(ns, |m| &m.im)?.to_dtype(x.dtype())?;
        let inner = self.stacked(ns, |m| &m.interior)?.to_dtype(x.dtype())?;
        let sandwich = |m: &Tensor| -> Result<Tensor> { Ok(m.matmul(&x3)?.matmul(&m.transpose(1, 2)?)?) };
        let real_part = (sandwich(&re)? - sandwich(&im)?)?;
        let out = ((real_part * 2.0)? - sandwich(&inner)?)?;
        Ok(out.reshape((b, 1, h, w))?)
    }

    /// Replace the measured band of `raw` with that of the zero-filled measurement.
    pub fn data_consistency(&self, raw: &Tensor, measured_lowres: &Tensor, ns: &[usize]) -> Result<Tensor> {
        let projected = self.project(raw, ns)?;
        Ok(((raw - projected)? + measured_lowres)?)
    }
}
