//! 2D convolution lowered to im2col + a single matmul.
//!
//! candle's stock CPU convolution backward goes through a transposed
//! convolution that is several times slower than the forward pass on small
//! feature maps. Here the whole batch is laid out as one column matrix
//! `(Ci*k*k + 1, B*Ho*Wo)` whose last row is ones, so the bias rides along
//! with the weights and every gradient is one gemm plus a col2im scatter.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Output columns `[lo, hi)` whose input index `o*stride + kk - pad` is in `[0, n)`.
    fn valid(&self, kk: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kk).div_ceil(s);
        let hi = if n + self.pad > kk { (n + self.pad - kk - 1) / s + 1 } else { 0 };
        (lo.min(n_out), hi.min(n_out).max(lo.min(n_out)))
    }
}

/// `(B, C, H, W)` -> `(C*k*k + 1, B*Ho*Wo)` with a trailing row of ones.
fn im2col<T: Copy + Default>(src: &[T], batch: usize, g: &Geometry, one: T) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (h, w, k) = (g.height, g.width, g.kernel);
    let rows = g.rows();
    let hw_out = ho * wo;
    let ncol = batch * hw_out;
    let mut out = vec![T::default(); (rows + 1) * ncol];
    for c in 0..g.channels {
        for ky in 0..k {
            let (oy0, oy1) = g.valid(ky, h, ho);
            for kx in 0..k {
                let (ox0, ox1) = g.valid(kx, w, wo);
                let row = (c * k + ky) * k + kx;
                for b in 0..batch {
                    let plane = &src[(b * g.channels + c) * h * w..][..h * w];
                    let dst = &mut out[row * ncol + b * hw_out..][..hw_out];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &plane[iy * w..][..w];
                        let dst_row = &mut dst[oy * wo..][..wo];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            dst_row[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out[rows * ncol..].fill(one);
    out
}

/// Adjoint of [`im2col`]; the ones row is ignored.
fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (h, w, k) = (g.height, g.width, g.kernel);
    let hw_out = ho * wo;
    let ncol = batch * hw_out;
    let mut out = vec![T::default(); batch * g.channels * h * w];
    for c in 0..g.channels {
        for ky in 0..k {
            let (oy0, oy1) = g.valid(ky, h, ho);
            for kx in 0..k {
                let (ox0, ox1) = g.valid(kx, w, wo);
                let row = (c * k + ky) * k + kx;
                for b in 0..batch {
                    let plane = &mut out[(b * g.channels + c) * h * w..][..h * w];
                    let col = &src[row * ncol + b * hw_out..][..hw_out];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst_row = &mut plane[iy * w..][..w];
                        let col_row = &col[oy * wo..][..wo];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, v) in dst_row[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&col_row[ox0..ox1]) {
                                *d += *v;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst_row[ox * g.stride + kx - g.pad] += col_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} expects a contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry, usize);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let dims = layout.shape().dims();
        if dims.len() != 4 || dims[1] != g.channels || dims[2] != g.height || dims[3] != g.width {
            candle_core::bail!("im2col: input shape {dims:?} does not match {g:?}");
        }
        let batch = dims[0];
        let (ho, wo) = g.out_hw();
        let shape = Shape::from((g.rows() + 1, batch * ho * wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout, "im2col")?, batch, g, 1.0)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout, "im2col")?, batch, g, 1.0)),
            _ => candle_core::bail!("im2col: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(storage)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0, arg.dim(0)?))?;
        Ok(Some(grad))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = self.1;
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout, "col2im")?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout, "col2im")?, batch, g)),
            _ => candle_core::bail!("col2im: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(storage)),
        };
        Ok((out, shape))
    }
}

/// `x`: (B, Ci, H, W); `weight`: (Co, Ci, k, k); `bias`: (Co).
pub(crate) fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    let (batch, ci, h, w) = x.dims4()?;
    let (co, wci, k, _) = weight.dims4()?;
    if ci != wci {
        candle_core::bail!("conv2d: input has {ci} channels, weight expects {wci}");
    }
    let g = Geometry {
        channels: ci,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let w2 = weight.reshape((co, g.rows()))?;
    let bias_col = match bias {
        Some(b) => b.reshape((co, 1))?,
        None => Tensor::zeros((co, 1), weight.dtype(), weight.device())?,
    };
    let w_aug = Tensor::cat(&[&w2, &bias_col], 1)?;
    w_aug
        .matmul(&cols)?
        .reshape((co, batch, ho * wo))?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((batch, co, ho, wo))
}

struct Upsample2x;
struct SumPool2x;

fn upsample2x<T: Copy + Default>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); planes * 4 * h * w];
    for (p, plane) in src.chunks_exact(h * w).enumerate().take(planes) {
        let dst = &mut out[p * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            let row = &mut dst[2 * y * 2 * w..][..2 * w];
            for (x, v) in plane[y * w..][..w].iter().enumerate() {
                row[2 * x] = *v;
                row[2 * x + 1] = *v;
            }
            let (a, b) = dst[2 * y * 2 * w..][..4 * w].split_at_mut(2 * w);
            b.copy_from_slice(a);
        }
    }
    out
}

fn sum_pool2x<T: Copy + Default + std::ops::Add<Output = T>>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * h * w);
    for plane in src.chunks_exact(4 * h * w).take(planes) {
        for y in 0..h {
            let (r0, r1) = (&plane[2 * y * 2 * w..][..2 * w], &plane[(2 * y + 1) * 2 * w..][..2 * w]);
            for x in 0..w {
                out.push(r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(upsample2x(contiguous(v, layout, "upsample2x")?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample2x(contiguous(v, layout, "upsample2x")?, b * c, h, w)),
            _ => candle_core::bail!("upsample2x: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&SumPool2x)?))
    }
}

impl CustomOp1 for SumPool2x {
    fn name(&self) -> &'static str {
        "sum_pool2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = layout.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(sum_pool2x(contiguous(v, layout, "sum_pool2x")?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(sum_pool2x(contiguous(v, layout, "sum_pool2x")?, b * c, h, w)),
            _ => candle_core::bail!("sum_pool2x: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
pub(crate) fn upsample2x_nearest(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn direct_conv(x: &[f64], w: &[f64], b: usize, ci: usize, co: usize, hw: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let ho = (hw + 2 * p - k) / s + 1;
        let mut out = vec![0.0; b * co * ho * ho];
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..ho {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= hw as isize || ix >= hw as isize {
                                        continue;
                                    }
                                    acc += x[((bi * ci + c) * hw + iy as usize) * hw + ix as usize]
                                        * w[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * co + o) * ho + oy) * ho + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let dev = Device::Cpu;
        for &(s, p, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x: Vec<f64> = (0..2 * 3 * 7 * 7).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let xt = Tensor::from_vec(x.clone(), (2, 3, 7, 7), &dev).unwrap();
            let wt = Tensor::from_vec(w.clone(), (4, 3, k, k), &dev).unwrap();
            let y = conv2d(&xt, &wt, None, s, p).unwrap();
            let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let want = direct_conv(&x, &w, 2, 3, 4, 7, k, s, p);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {s} pad {p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_candle_reference() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::arange(0f64, 2. * 2. * 6. * 6., &dev).unwrap().reshape((2, 2, 6, 6)).unwrap().affine(0.01, -0.3).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::arange(0f64, 3. * 2. * 9., &dev).unwrap().reshape((3, 2, 3, 3)).unwrap().affine(0.02, -0.4).unwrap()).unwrap();
        let ours = conv2d(x.as_tensor(), w.as_tensor(), None, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let reference = x.as_tensor().conv2d(w.as_tensor(), 1, 2, 1, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let g1 = ours.backward().unwrap();
        let g2 = reference.backward().unwrap();
        for v in [&x, &w] {
            let a = g1.get(v).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = g2.get(v).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-9);
            }
        }
        assert_eq!(x.dtype(), DType::F64);
    }

    #[test]
    fn bias_and_rectangular_input_match_candle() {
        let dev = Device::Cpu;
        for &(s, p) in &[(1, 1), (2, 1), (2, 0), (1, 2)] {
            let x = Var::from_tensor(&Tensor::arange(0f64, 3. * 2. * 5. * 8., &dev).unwrap().reshape((3, 2, 5, 8)).unwrap().sin().unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::arange(0f64, 4. * 2. * 9., &dev).unwrap().reshape((4, 2, 3, 3)).unwrap().cos().unwrap()).unwrap();
            let b = Var::from_tensor(&Tensor::new(&[0.5f64, -1.0, 2.0, 0.25], &dev).unwrap()).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), Some(b.as_tensor()), s, p).unwrap();
            let reference = x
                .as_tensor()
                .conv2d(w.as_tensor(), p, s, 1, 1)
                .unwrap()
                .broadcast_add(&b.as_tensor().reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let diff = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12);
            // candle's own backward mis-sizes some strided cases, so compare
            // against central differences instead.
            let loss = |xv: &Tensor, wv: &Tensor, bv: &Tensor| {
                conv2d(xv, wv, Some(bv), s, p).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let grads = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            for which in 0..3 {
                let v = [&x, &w, &b][which];
                let analytic = grads.get(v).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let base = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for i in (0..base.len()).step_by(7) {
                    let mut fd = 0.0;
                    for sign in [1.0, -1.0] {
                        let mut pert = base.clone();
                        pert[i] += sign * 1e-6;
                        let t = Tensor::from_vec(pert, v.dims(), &dev).unwrap();
                        let l = match which {
                            0 => loss(&t, w.as_tensor(), b.as_tensor()),
                            1 => loss(x.as_tensor(), &t, b.as_tensor()),
                            _ => loss(x.as_tensor(), w.as_tensor(), &t),
                        };
                        fd += sign * l / 2e-6;
                    }
                    assert!((fd - analytic[i]).abs() < 1e-5 * (1.0 + fd.abs()), "stride {s} pad {p} arg {which}");
                }
            }
        }
    }

    #[test]
    fn upsample_matches_candle_and_backward_sums_blocks() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::arange(0f64, 2. * 3. * 4. * 5., &dev).unwrap().reshape((2, 3, 4, 5)).unwrap()).unwrap();
        let ours = upsample2x_nearest(x.as_tensor()).unwrap();
        let reference = x.as_tensor().upsample_nearest2d(8, 10).unwrap();
        let diff = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
        let weights = Tensor::arange(0f64, 2. * 3. * 8. * 10., &dev).unwrap().reshape((2, 3, 8, 10)).unwrap();
        let g1 = (&ours * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (&reference * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        let a = g1.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = g2.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }
}
