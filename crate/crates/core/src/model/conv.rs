//! 3x3 "same" convolution where every sample in the batch may carry its own
//! filter bank. Filter Scaling and the hypernetwork baseline both produce
//! per-sample weights, which the stock convolution cannot consume without a
//! per-sample loop.
//!
//! Shapes: input `(B, C_in, H, W)`, weights `(B, C_out, C_in, 3, 3)` or
//! `(1, C_out, C_in, 3, 3)` (shared across the batch), output `(B, C_out, H, W)`.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use crate::error::{shape_err, Result};

trait Real: Copy + Default + Send + Sync + 'static
where
    Self: std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign,
{
}
impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    weight_batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
}

impl Dims {
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * 9
    }
    fn weight_offset(&self, b: usize) -> usize {
        if self.weight_batch == 1 {
            0
        } else {
            b * self.kernel_len()
        }
    }
}

/// acc[x] += w0 * row[x-1] + w1 * row[x] + w2 * row[x+1], zero outside the row.
#[inline]
fn row_taps<T: Real>(acc: &mut [T], row: &[T], w: [T; 3]) {
    let n = acc.len();
    if n == 1 {
        acc[0] += w[1] * row[0];
        return;
    }
    acc[0] += w[1] * row[0] + w[2] * row[1];
    for x in 1..n - 1 {
        acc[x] += w[0] * row[x - 1] + w[1] * row[x] + w[2] * row[x + 1];
    }
    acc[n - 1] += w[0] * row[n - 2] + w[1] * row[n - 1];
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::default(); 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (ca, cb) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut acc = T::default();
    for l in lanes {
        acc += l;
    }
    for k in chunks * 8..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

fn forward_kernel<T: Real>(inp: &[T], wts: &[T], d: Dims) -> Vec<T> {
    let hw = d.hw();
    let mut out = vec![T::default(); d.batch * d.c_out * hw];
    for b in 0..d.batch {
        let wb = &wts[d.weight_offset(b)..];
        let xb = &inp[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        for o in 0..d.c_out {
            let ob = &mut out[(b * d.c_out + o) * hw..(b * d.c_out + o + 1) * hw];
            for y in 0..d.h {
                let acc = &mut ob[y * d.w..(y + 1) * d.w];
                for i in 0..d.c_in {
                    let k = &wb[(o * d.c_in + i) * 9..(o * d.c_in + i) * 9 + 9];
                    let plane = &xb[i * hw..(i + 1) * hw];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= d.h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        row_taps(acc, &plane[sy * d.w..(sy + 1) * d.w], [k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]]);
                    }
                }
            }
        }
    }
    out
}

fn input_grad_kernel<T: Real>(grad: &[T], wts: &[T], d: Dims) -> Vec<T> {
    let hw = d.hw();
    let mut gin = vec![T::default(); d.batch * d.c_in * hw];
    for b in 0..d.batch {
        let wb = &wts[d.weight_offset(b)..];
        let gb = &grad[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        for i in 0..d.c_in {
            let ib = &mut gin[(b * d.c_in + i) * hw..(b * d.c_in + i + 1) * hw];
            for y in 0..d.h {
                let acc = &mut ib[y * d.w..(y + 1) * d.w];
                for o in 0..d.c_out {
                    let k = &wb[(o * d.c_in + i) * 9..(o * d.c_in + i) * 9 + 9];
                    let plane = &gb[o * hw..(o + 1) * hw];
                    for ky in 0..3 {
                        // output row oy = y - ky + 1 read input row y through tap ky
                        let oy = y as isize - ky as isize + 1;
                        if oy < 0 || oy >= d.h as isize {
                            continue;
                        }
                        let oy = oy as usize;
                        row_taps(acc, &plane[oy * d.w..(oy + 1) * d.w], [k[ky * 3 + 2], k[ky * 3 + 1], k[ky * 3]]);
                    }
                }
            }
        }
    }
    gin
}

fn weight_grad_kernel<T: Real>(inp: &[T], grad: &[T], d: Dims) -> Vec<T> {
    let hw = d.hw();
    let mut gw = vec![T::default(); d.weight_batch * d.kernel_len()];
    for b in 0..d.batch {
        let off = d.weight_offset(b);
        let xb = &inp[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        let gb = &grad[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        for o in 0..d.c_out {
            let gplane = &gb[o * hw..(o + 1) * hw];
            for i in 0..d.c_in {
                let xplane = &xb[i * hw..(i + 1) * hw];
                let k = &mut gw[off + (o * d.c_in + i) * 9..off + (o * d.c_in + i) * 9 + 9];
                for y in 0..d.h {
                    let grow = &gplane[y * d.w..(y + 1) * d.w];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= d.h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let xrow = &xplane[sy * d.w..(sy + 1) * d.w];
                        let w = d.w;
                        // tap kx reads x + kx - 1
                        if w > 1 {
                            k[ky * 3] += dot(&grow[1..], &xrow[..w - 1]);
                            k[ky * 3 + 2] += dot(&grow[..w - 1], &xrow[1..]);
                        }
                        k[ky * 3 + 1] += dot(grow, xrow);
                    }
                }
            }
        }
    }
    gw
}

fn contiguous_slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&s.as_slice::<T>()?[start..end]),
        None => candle_core::bail!("per-sample conv expects contiguous operands"),
    }
}

fn dims_of(x: &Shape, w: &Shape) -> candle_core::Result<Dims> {
    let (batch, c_in, h, wd) = x.dims4()?;
    let wdims = w.dims();
    if wdims.len() != 5 || wdims[3] != 3 || wdims[4] != 3 || wdims[2] != c_in {
        candle_core::bail!("weights {wdims:?} incompatible with input {:?}", x.dims());
    }
    if wdims[0] != 1 && wdims[0] != batch {
        candle_core::bail!("weight batch {} must be 1 or {batch}", wdims[0]);
    }
    Ok(Dims { batch, weight_batch: wdims[0], c_in, c_out: wdims[1], h, w: wd })
}

fn dims_from_grad(g: &Shape, w: &Shape) -> candle_core::Result<Dims> {
    let (batch, c_out, h, wd) = g.dims4()?;
    let wdims = w.dims();
    Ok(Dims { batch, weight_batch: wdims[0], c_in: wdims[2], c_out, h, w: wd })
}

struct PerSampleConv3x3;
struct InputGrad;
struct WeightGrad {
    weight_shape: Shape,
}

impl CustomOp2 for PerSampleConv3x3 {
    fn name(&self) -> &'static str {
        "per-sample-conv3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims_of(l1.shape(), l2.shape())?;
        let out_shape = Shape::from((d.batch, d.c_out, d.h, d.w));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(forward_kernel(contiguous_slice::<f32>(s1, l1)?, contiguous_slice::<f32>(s2, l2)?, d))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(forward_kernel(contiguous_slice::<f64>(s1, l1)?, contiguous_slice::<f64>(s2, l2)?, d))
            }
            _ => candle_core::bail!("per-sample conv supports matching f32 or f64 operands"),
        };
        Ok((out, out_shape))
    }

    fn bwd(&self, arg1: &Tensor, arg2: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad_res.contiguous()?;
        let x = arg1.contiguous()?;
        let w = arg2.contiguous()?;
        let gx = grad.apply_op2_no_bwd(&w, &InputGrad)?;
        let gw = x.apply_op2_no_bwd(&grad, &WeightGrad { weight_shape: w.shape().clone() })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "per-sample-conv3x3-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims_from_grad(l1.shape(), l2.shape())?;
        let shape = Shape::from((d.batch, d.c_in, d.h, d.w));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(input_grad_kernel(contiguous_slice::<f32>(s1, l1)?, contiguous_slice::<f32>(s2, l2)?, d))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(input_grad_kernel(contiguous_slice::<f64>(s1, l1)?, contiguous_slice::<f64>(s2, l2)?, d))
            }
            _ => candle_core::bail!("dtype mismatch in conv input gradient"),
        };
        Ok((out, shape))
    }
}

impl CustomOp2 for WeightGrad {
    fn name(&self) -> &'static str {
        "per-sample-conv3x3-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims_of(l1.shape(), &self.weight_shape)?;
        if l2.shape().dims4()? != (d.batch, d.c_out, d.h, d.w) {
            candle_core::bail!("gradient shape {:?} does not match conv output", l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(weight_grad_kernel(contiguous_slice::<f32>(s1, l1)?, contiguous_slice::<f32>(s2, l2)?, d))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(weight_grad_kernel(contiguous_slice::<f64>(s1, l1)?, contiguous_slice::<f64>(s2, l2)?, d))
            }
            _ => candle_core::bail!("dtype mismatch in conv weight gradient"),
        };
        Ok((out, self.weight_shape.clone()))
    }
}

/// Convolve each sample with its own (or a shared) 3x3 filter bank; bias is not applied.
pub fn per_sample_conv3x3(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 || weights.rank() != 5 {
        return Err(shape_err(format!(
            "per-sample conv needs a rank-4 input and rank-5 weights, got {:?} and {:?}",
            x.dims(),
            weights.dims()
        )));
    }
    dims_of(x.shape(), weights.shape()).map_err(|e| shape_err(e.to_string()))?;
    Ok(x.contiguous()?.apply_op2(&weights.contiguous()?, PerSampleConv3x3)?)
}

/// Convolution with filters `weight * scale`, one scalar per `(C_out, C_in)` filter.
///
/// `weight` is `(C_out, C_in, 3, 3)`; `scale` is `(C_out, C_in)` shared by the
/// batch or `(B, C_out, C_in)` per sample; the bias is added unscaled.
pub fn filter_scaled_conv(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, scale: Option<&Tensor>) -> Result<Tensor> {
    let (c_out, c_in, kh, kw) = weight.dims4()?;
    if (kh, kw) != (3, 3) {
        return Err(shape_err(format!("expected 3x3 kernels, got {kh}x{kw}")));
    }
    let base = weight.unsqueeze(0)?;
    let filters = match scale {
        None => base,
        Some(s) => {
            let s = match s.rank() {
                2 => s.unsqueeze(0)?,
                3 => s.clone(),
                _ => return Err(shape_err(format!("scale must be (C_out, C_in) or (B, C_out, C_in), got {:?}", s.dims()))),
            };
            let (sb, so, si) = s.dims3()?;
            if (so, si) != (c_out, c_in) {
                return Err(shape_err(format!("scale {:?} does not fit filters {:?}", s.dims(), weight.dims())));
            }
            base.broadcast_mul(&s.reshape((sb, c_out, c_in, 1, 1))?)?
        }
    };
    let y = per_sample_conv3x3(x, &filters)?;
    match bias {
        None => Ok(y),
        Some(b) => {
            if b.dims() != [c_out] {
                return Err(shape_err(format!("bias must have {c_out} entries, got {:?}", b.dims())));
            }
            Ok(y.broadcast_add(&b.reshape((1, c_out, 1, 1))?)?)
        }
    }
}
