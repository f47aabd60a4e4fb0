//! im2col / col2im and ×2 upsampling as candle custom ops, so a k×k
//! convolution becomes one matmul whose backward stays cheap on the CPU.
//! candle reduces over non-trailing dimensions element by element, which makes
//! broadcast-based bias adds and upsampling slow to differentiate.

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

fn f32_slice<'a>(storage: &'a CpuStorage, layout: &Layout, op: &str) -> Result<&'a [f32]> {
    let CpuStorage::F32(data) = storage else {
        candle_core::bail!("{op} expects f32 input")
    };
    let Some((start, end)) = layout.contiguous_offsets() else {
        candle_core::bail!("{op} expects a contiguous input")
    };
    Ok(&data[start..end])
}

/// Offsets along one axis: for kernel tap `d` and output position range,
/// the valid output interval `[lo, hi)` and the source offset.
fn valid_range(d: usize, r: usize, len: usize) -> (usize, usize) {
    // source index = out + d - r must lie in [0, len)
    let lo = r.saturating_sub(d);
    let hi = (len + r).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

/// `(B, C, H, W)` → `(B, k·k·C + 1, H·W)`, zero padded by `k / 2`.
/// Row index is `(dy·k + dx)·C + c`; the last row is all ones and carries
/// the bias through the matmul.
struct Im2Col {
    k: usize,
}

/// Adjoint of [`Im2Col`]: sums column entries back onto the image grid.
struct Col2Im {
    k: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let src = f32_slice(storage, layout, "im2col")?;
        let k = self.k;
        let r = k / 2;
        let hw = h * w;
        let rows = k * k * c + 1;
        let mut out = vec![0f32; b * rows * hw];
        for bi in 0..b {
            out[(bi * rows + rows - 1) * hw..][..hw].fill(1.0);
            for dy in 0..k {
                let (ylo, yhi) = valid_range(dy, r, h);
                for dx in 0..k {
                    let (xlo, xhi) = valid_range(dx, r, w);
                    for ci in 0..c {
                        let row = (dy * k + dx) * c + ci;
                        let dst = &mut out[(bi * rows + row) * hw..][..hw];
                        let plane = &src[(bi * c + ci) * hw..][..hw];
                        for y in ylo..yhi {
                            let sy = y + dy - r;
                            let s = sy * w + xlo + dx - r;
                            dst[y * w + xlo..y * w + xhi].copy_from_slice(&plane[s..s + (xhi - xlo)]);
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, rows, hw))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let g = grad_res
            .contiguous()?
            .apply_op1_no_bwd(&Col2Im { k: self.k, c, h, w })?;
        Ok(Some(g))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, _, _) = layout.shape().dims3()?;
        let src = f32_slice(storage, layout, "col2im")?;
        let Col2Im { k, c, h, w } = *self;
        let r = k / 2;
        let hw = h * w;
        let rows = k * k * c + 1;
        let mut out = vec![0f32; b * c * hw];
        for bi in 0..b {
            for dy in 0..k {
                let (ylo, yhi) = valid_range(dy, r, h);
                for dx in 0..k {
                    let (xlo, xhi) = valid_range(dx, r, w);
                    for ci in 0..c {
                        let row = (dy * k + dx) * c + ci;
                        let col = &src[(bi * rows + row) * hw..][..hw];
                        let plane = &mut out[(bi * c + ci) * hw..][..hw];
                        for y in ylo..yhi {
                            let sy = y + dy - r;
                            let s = sy * w + xlo + dx - r;
                            for (d, v) in plane[s..s + (xhi - xlo)].iter_mut().zip(&col[y * w + xlo..y * w + xhi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, h, w))))
    }
}

/// Columns for a "same"-padded k×k convolution of a `(B, C, H, W)` tensor,
/// with a trailing ones row.
pub fn im2col(x: &Tensor, k: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col { k })
}

/// Nearest-neighbour ×2 upsampling of `(B, C, H, W)`.
struct Upsample2;

/// Adjoint of [`Upsample2`]: 2×2 sum pooling.
struct SumPool2;

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let src = f32_slice(storage, layout, "upsample2")?;
        let mut out = vec![0f32; b * c * 4 * h * w];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                let (top, bottom) = dst[2 * y * 2 * w..(2 * y + 2) * 2 * w].split_at_mut(2 * w);
                for (x, v) in row.iter().enumerate() {
                    top[2 * x] = *v;
                    top[2 * x + 1] = *v;
                }
                bottom.copy_from_slice(top);
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&SumPool2)?))
    }
}

impl CustomOp1 for SumPool2 {
    fn name(&self) -> &'static str {
        "sumpool2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = layout.shape().dims4()?;
        let src = f32_slice(storage, layout, "sumpool2")?;
        let (h, w) = (h2 / 2, w2 / 2);
        let mut out = vec![0f32; b * c * h * w];
        for (plane, dst) in src.chunks_exact(h2 * w2).zip(out.chunks_exact_mut(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    let i = 2 * y * w2 + 2 * x;
                    dst[y * w + x] = plane[i] + plane[i + 1] + plane[i + w2] + plane[i + w2 + 1];
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, h, w))))
    }
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2)
}
