//! Channels-last strided convolutions built from im2col + matmul.
//!
//! [`Im2Col`] and [`Col2Im`] are exact adjoints of each other, so each one
//! serves as the other's backward pass. A convolution is `im2col` followed
//! by a matmul with a `(k·k·c_in, c_out)` weight; a transposed convolution is
//! a matmul with a `(c_in, k·k·c_out)` weight followed by `col2im`.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::params::{Builder, Init};
use crate::Result;

/// Geometry of a valid (unpadded) strided patch extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub n: usize,
    /// Image height, width, channels.
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PatchGeometry {
    pub fn out_h(&self) -> usize {
        (self.h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c
    }

    pub fn rows(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }

    fn image_len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    fn gather<T: Copy + Default>(&self, img: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.rows() * self.patch_len()];
        self.gather_into(img, &mut out);
        out
    }

    fn gather_into<T: Copy>(&self, img: &[T], out: &mut [T]) {
        let (oh, ow, k, s, c) = (self.out_h(), self.out_w(), self.kernel, self.stride, self.c);
        let run = k * c;
        let plen = self.patch_len();
        for b in 0..self.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    let dst = &mut out[row * plen..(row + 1) * plen];
                    for ky in 0..k {
                        let src = ((b * self.h + oy * s + ky) * self.w + ox * s) * c;
                        dst[ky * run..(ky + 1) * run].copy_from_slice(&img[src..src + run]);
                    }
                }
            }
        }
    }

    fn scatter_add<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut img = vec![T::default(); self.image_len()];
        self.scatter_add_into(cols, &mut img);
        img
    }

    fn scatter_add_into<T: Copy + std::ops::AddAssign>(&self, cols: &[T], img: &mut [T]) {
        let (oh, ow, k, s, c) = (self.out_h(), self.out_w(), self.kernel, self.stride, self.c);
        let run = k * c;
        let plen = self.patch_len();
        for b in 0..self.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    let src = &cols[row * plen..(row + 1) * plen];
                    for ky in 0..k {
                        let dst = ((b * self.h + oy * s + ky) * self.w + ox * s) * c;
                        for (d, v) in img[dst..dst + run].iter_mut().zip(&src[ky * run..(ky + 1) * run]) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }

    /// The first `n` images of this batch.
    fn head(&self, n: usize) -> Self {
        Self { n, ..*self }
    }

    fn per_image_rows(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn per_image_len(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Images per block holding at most `elems` patch entries.
    fn block(&self, elems: usize) -> usize {
        (elems / (self.per_image_rows() * self.patch_len()).max(1)).clamp(1, self.n.max(1))
    }
}

/// Forward blocks stay cache-sized; the weight gradient wants long inner products.
const FWD_BLOCK_ELEMS: usize = 1 << 18;
const BWD_BLOCK_ELEMS: usize = 1 << 22;

trait Elem: candle_core::WithDType {}
impl Elem for f32 {}
impl Elem for f64 {}

/// `c (+)= a · b` for an `m×k` and a `k×n` operand given by (row, column)
/// strides; `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Elem>(
    (m, n, k): (usize, usize, usize),
    a: &[T],
    (a_rs, a_cs): (usize, usize),
    b: &[T],
    (b_rs, b_cs): (usize, usize),
    c: &mut [T],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::from_f64(0.0));
        }
        return;
    }
    assert!((m - 1) * a_rs + (k - 1) * a_cs < a.len());
    assert!((k - 1) * b_rs + (n - 1) * b_cs < b.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs as isize,
            a_rs as isize,
            b.as_ptr(),
            b_cs as isize,
            b_rs as isize,
            T::from_f64(1.0),
            T::from_f64(1.0),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, expected: usize, op: &str) -> candle_core::Result<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{op}: input must be contiguous")))?;
    if end - start != expected {
        return Err(candle_core::Error::Msg(format!(
            "{op}: expected {expected} elements, got {}",
            end - start
        )));
    }
    Ok(&data[start..end])
}

/// `(n, h, w, c)` image batch to `(rows, k·k·c)` patch matrix.
pub struct Im2Col(pub PatchGeometry);

/// `(rows, k·k·c)` patch matrix to `(n, h, w, c)` image batch, summing
/// overlapping contributions.
pub struct Col2Im(pub PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.rows(), g.patch_len()));
        let n = g.image_len();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.gather(contiguous(v, layout, n, "im2col")?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.gather(contiguous(v, layout, n, "im2col")?)),
            _ => return Err(candle_core::Error::Msg("im2col: unsupported dtype".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.n, g.h, g.w, g.c));
        let n = g.rows() * g.patch_len();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.scatter_add(contiguous(v, layout, n, "col2im")?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.scatter_add(contiguous(v, layout, n, "col2im")?)),
            _ => return Err(candle_core::Error::Msg("col2im: unsupported dtype".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Convolution `(n, h, w, c_in) · (k·k·c_in, c_out)` evaluated one block of
/// images at a time; patches are recomputed in the backward pass.
struct ConvOp(PatchGeometry);

/// Transposed convolution `(n, h', w', c_in) · (c_in, k·k·c_out)` with the
/// output geometry `.0`, blocked like [`ConvOp`].
struct ConvTransposeOp(PatchGeometry);

fn zeros<T: Elem>(n: usize) -> Vec<T> {
    vec![T::from_f64(0.0); n]
}

impl PatchGeometry {
    fn conv_fwd<T: Elem>(&self, x: &[T], w: &[T], out_c: usize) -> Vec<T> {
        let (per, plen, img) = (self.per_image_rows(), self.patch_len(), self.per_image_len());
        let step = self.block(FWD_BLOCK_ELEMS);
        let mut cols = zeros(step * per * plen);
        let mut y = zeros(self.rows() * out_c);
        for b0 in (0..self.n).step_by(step) {
            let g = self.head(step.min(self.n - b0));
            let rows = g.rows();
            g.gather_into(&x[b0 * img..], &mut cols);
            let dst = &mut y[b0 * per * out_c..(b0 * per + rows) * out_c];
            gemm_into((rows, out_c, plen), &cols, (plen, 1), w, (out_c, 1), dst, false);
        }
        y
    }

    /// Gradients of [`Self::conv_fwd`] for the input (when wanted) and weight.
    fn conv_bwd<T: Elem>(&self, x: &[T], w: &[T], gy: &[T], out_c: usize, want_x: bool) -> (Option<Vec<T>>, Vec<T>) {
        let (per, plen, img) = (self.per_image_rows(), self.patch_len(), self.per_image_len());
        let step = self.block(BWD_BLOCK_ELEMS);
        let mut cols = zeros(step * per * plen);
        let mut gw = zeros(plen * out_c);
        let mut gx = want_x.then(|| zeros(self.image_len()));
        for b0 in (0..self.n).step_by(step) {
            let g = self.head(step.min(self.n - b0));
            let rows = g.rows();
            let gy = &gy[b0 * per * out_c..];
            g.gather_into(&x[b0 * img..], &mut cols);
            gemm_into((plen, out_c, rows), &cols, (1, plen), gy, (out_c, 1), &mut gw, true);
            if let Some(gx) = gx.as_mut() {
                gemm_into((rows, plen, out_c), gy, (out_c, 1), w, (1, out_c), &mut cols, false);
                g.scatter_add_into(&cols, &mut gx[b0 * img..(b0 + g.n) * img]);
            }
        }
        (gx, gw)
    }

    fn deconv_fwd<T: Elem>(&self, x: &[T], w: &[T], in_c: usize) -> Vec<T> {
        let (per, plen, img) = (self.per_image_rows(), self.patch_len(), self.per_image_len());
        let step = self.block(FWD_BLOCK_ELEMS);
        let mut cols = zeros(step * per * plen);
        let mut y = zeros(self.image_len());
        for b0 in (0..self.n).step_by(step) {
            let g = self.head(step.min(self.n - b0));
            let rows = g.rows();
            gemm_into((rows, plen, in_c), &x[b0 * per * in_c..], (in_c, 1), w, (plen, 1), &mut cols, false);
            g.scatter_add_into(&cols, &mut y[b0 * img..(b0 + g.n) * img]);
        }
        y
    }

    fn deconv_bwd<T: Elem>(&self, x: &[T], w: &[T], gy: &[T], in_c: usize, want_x: bool) -> (Option<Vec<T>>, Vec<T>) {
        let (per, plen, img) = (self.per_image_rows(), self.patch_len(), self.per_image_len());
        let step = self.block(BWD_BLOCK_ELEMS);
        let mut cols = zeros(step * per * plen);
        let mut gw = zeros(in_c * plen);
        let mut gx = want_x.then(|| zeros(self.rows() * in_c));
        for b0 in (0..self.n).step_by(step) {
            let g = self.head(step.min(self.n - b0));
            let rows = g.rows();
            let xb = &x[b0 * per * in_c..];
            g.gather_into(&gy[b0 * img..], &mut cols);
            gemm_into((in_c, plen, rows), xb, (1, in_c), &cols, (plen, 1), &mut gw, true);
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[b0 * per * in_c..(b0 * per + rows) * in_c];
                gemm_into((rows, in_c, plen), &cols, (plen, 1), w, (1, plen), dst, false);
            }
        }
        (gx, gw)
    }
}

fn as_cpu<'a, T: Elem>(storage: &'a candle_core::Storage, layout: &Layout, len: usize, op: &str) -> candle_core::Result<&'a [T]> {
    match storage {
        candle_core::Storage::Cpu(s) => contiguous(T::cpu_storage_as_slice(s)?, layout, len, op),
        _ => Err(candle_core::Error::Msg(format!("{op}: only the cpu backend is supported"))),
    }
}

/// Runs a blocked backward pass on the CPU slices of its operands.
#[allow(clippy::type_complexity)]
fn blocked_bwd(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    op: &str,
    f32_bwd: impl Fn(&[f32], &[f32], &[f32], bool) -> (Option<Vec<f32>>, Vec<f32>),
    f64_bwd: impl Fn(&[f64], &[f64], &[f64], bool) -> (Option<Vec<f64>>, Vec<f64>),
) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
    let want_x = x.track_op() || x.is_variable();
    let (x, w, grad) = (x.contiguous()?, w.contiguous()?, grad.contiguous()?);
    let (xs, xl) = x.storage_and_layout();
    let (ws, wl) = w.storage_and_layout();
    let (gs, gl) = grad.storage_and_layout();
    let (nx, nw, ng) = (x.elem_count(), w.elem_count(), grad.elem_count());
    let (gx, gw) = match x.dtype() {
        candle_core::DType::F32 => {
            let (gx, gw) = f32_bwd(
                as_cpu(&xs, xl, nx, op)?,
                as_cpu(&ws, wl, nw, op)?,
                as_cpu(&gs, gl, ng, op)?,
                want_x,
            );
            (gx.map(|v| Tensor::from_vec(v, x.shape(), x.device())).transpose()?, Tensor::from_vec(gw, w.shape(), w.device())?)
        }
        candle_core::DType::F64 => {
            let (gx, gw) = f64_bwd(
                as_cpu(&xs, xl, nx, op)?,
                as_cpu(&ws, wl, nw, op)?,
                as_cpu(&gs, gl, ng, op)?,
                want_x,
            );
            (gx.map(|v| Tensor::from_vec(v, x.shape(), x.device())).transpose()?, Tensor::from_vec(gw, w.shape(), w.device())?)
        }
        dt => return Err(candle_core::Error::Msg(format!("{op}: unsupported dtype {dt:?}"))),
    };
    Ok((gx, Some(gw)))
}

macro_rules! dispatch2 {
    ($op:expr, $s1:expr, $l1:expr, $n1:expr, $s2:expr, $l2:expr, $n2:expr, |$x:ident, $w:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($x, $w) = (contiguous(a, $l1, $n1, $op)?, contiguous(b, $l2, $n2, $op)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($x, $w) = (contiguous(a, $l1, $n1, $op)?, contiguous(b, $l2, $n2, $op)?);
                CpuStorage::F64($body)
            }
            _ => return Err(candle_core::Error::Msg(format!("{}: unsupported or mixed dtypes", $op))),
        }
    };
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out_c = l2.shape().elem_count() / g.patch_len();
        let out = dispatch2!("conv2d", s1, l1, g.image_len(), s2, l2, g.patch_len() * out_c, |x, w| g.conv_fwd(x, w, out_c));
        Ok((out, Shape::from((g.n, g.out_h(), g.out_w(), out_c))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.0;
        let out_c = w.dims()[1];
        blocked_bwd(
            x,
            w,
            grad,
            "conv2d",
            |x, w, gy, want| g.conv_bwd(x, w, gy, out_c, want),
            |x, w, gy, want| g.conv_bwd(x, w, gy, out_c, want),
        )
    }
}

impl CustomOp2 for ConvTransposeOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let in_c = l2.shape().elem_count() / g.patch_len();
        let out = dispatch2!("conv_transpose2d", s1, l1, g.rows() * in_c, s2, l2, in_c * g.patch_len(), |x, w| g
            .deconv_fwd(x, w, in_c));
        Ok((out, Shape::from((g.n, g.h, g.w, g.c))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.0;
        let in_c = w.dims()[0];
        blocked_bwd(
            x,
            w,
            grad,
            "conv_transpose2d",
            |x, w, gy, want| g.deconv_bwd(x, w, gy, in_c, want),
            |x, w, gy, want| g.deconv_bwd(x, w, gy, in_c, want),
        )
    }
}

/// Valid strided convolution on channels-last input.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = kernel * kernel * in_c;
        let fan_out = kernel * kernel * out_c;
        let weight = b.get("weight", &[fan_in, out_c], Init::Glorot { fan_in, fan_out })?;
        let bias = b.get("bias", &[out_c], Init::Zeros)?;
        Ok(Self { weight, bias, in_c, out_c, kernel, stride })
    }

    /// `(n, h, w, in_c)` to `(n, h', w', out_c)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        debug_assert_eq!(c, self.in_c);
        let g = PatchGeometry { n, h, w, c, kernel: self.kernel, stride: self.stride };
        let y = x.contiguous()?.apply_op2(&self.weight, ConvOp(g))?;
        debug_assert_eq!(y.dim(3)?, self.out_c);
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Strided transposed convolution on channels-last input.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(b: &mut Builder, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = kernel * kernel * in_c;
        let fan_out = kernel * kernel * out_c;
        let weight = b.get("weight", &[in_c, kernel * kernel * out_c], Init::Glorot { fan_in, fan_out })?;
        let bias = b.get("bias", &[out_c], Init::Zeros)?;
        Ok(Self { weight, bias, in_c, out_c, kernel, stride })
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel
    }

    /// `(n, h, w, in_c)` to `(n, (h-1)·s+k, (w-1)·s+k, out_c)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        debug_assert_eq!(c, self.in_c);
        let g = PatchGeometry {
            n,
            h: self.output_size(h),
            w: self.output_size(w),
            c: self.out_c,
            kernel: self.kernel,
            stride: self.stride,
        };
        let img = x.contiguous()?.apply_op2(&self.weight, ConvTransposeOp(g))?;
        Ok(img.broadcast_add(&self.bias)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{InitSource, ParamStore};
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Direct nested-loop convolution used as the oracle.
    fn naive_conv(x: &[f64], (n, h, w, c): (usize, usize, usize, usize), wt: &[f64], oc: usize, k: usize, s: usize) -> Vec<f64> {
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let mut out = vec![0.0; n * oh * ow * oc];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..oc {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                for ci in 0..c {
                                    let xi = ((b * h + oy * s + ky) * w + ox * s + kx) * c + ci;
                                    let wi = ((ky * k + kx) * c + ci) * oc + o;
                                    acc += x[xi] * wt[wi];
                                }
                            }
                        }
                        out[((b * oh + oy) * ow + ox) * oc + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut src = InitSource { store: &mut store, rng: &mut rng };
        let mut b = Builder::new(&mut src);
        let conv = Conv2d::new(&mut b.sub("c"), 3, 5, 4, 2).unwrap();
        let x = random(&[2, 11, 9, 3], 1);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 4, 3, 5]);
        let wt = store.get("c.weight").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect = naive_conv(&x.flatten_all().unwrap().to_vec1().unwrap(), (2, 11, 9, 3), &wt, 5, 4, 2);
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = PatchGeometry { n: 2, h: 9, w: 8, c: 3, kernel: 3, stride: 2 };
        let x = random(&[2, 9, 8, 3], 2);
        let y = random(&[g.rows(), g.patch_len()], 3);
        let lhs = (x.apply_op1(Im2Col(g)).unwrap() * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x * y.apply_op1(Col2Im(g)).unwrap()).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_conv_shapes() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut src = InitSource { store: &mut store, rng: &mut rng };
        let mut b = Builder::new(&mut src);
        let sizes = [(1, 5), (5, 13), (13, 30), (30, 64)];
        for (i, (k, (inp, out))) in [5, 5, 6, 6].into_iter().zip(sizes).enumerate() {
            let d = ConvTranspose2d::new(&mut b.sub(&format!("d{i}")), 2, 2, k, 2).unwrap();
            assert_eq!(d.output_size(inp), out);
        }
        let d = ConvTranspose2d::new(&mut b.sub("x"), 4, 3, 6, 2).unwrap();
        let x = Tensor::zeros((2, 30, 30, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[2, 64, 64, 3]);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut src = InitSource { store: &mut store, rng: &mut rng };
        let mut b = Builder::new(&mut src);
        let conv = Conv2d::new(&mut b.sub("c"), 2, 3, 3, 2).unwrap();
        let deconv = ConvTranspose2d::new(&mut b.sub("d"), 3, 2, 3, 2).unwrap();
        let x = candle_core::Var::from_tensor(&random(&[1, 7, 7, 2], 5)).unwrap();
        let loss = |x: &Tensor| -> Tensor {
            deconv.forward(&conv.forward(x).unwrap().tanh().unwrap()).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        let grads = loss(x.as_tensor()).backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in (0..base.len()).step_by(7) {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let f = |v: Vec<f64>| loss(&Tensor::from_vec(v, (1, 7, 7, 2), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (f(plus) - f(minus)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", gx[i]);
        }
    }

    /// Gradients of `sum(f(x, w) * probe)` for a variable input and weight.
    fn grads_of(f: impl Fn(&Tensor, &Tensor) -> Tensor, x: &Tensor, w: &Tensor, probe: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let (xv, wv) = (candle_core::Var::from_tensor(x).unwrap(), candle_core::Var::from_tensor(w).unwrap());
        let y = f(xv.as_tensor(), wv.as_tensor());
        let grads = (&y * probe).unwrap().sum_all().unwrap().backward().unwrap();
        let flat = |t: &Tensor| grads.get(t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        (y, flat(xv.as_tensor()), flat(wv.as_tensor()))
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn blocked_ops_match_unfused_matmuls_across_blocks() {
        // 361 patches of length 128 per image: several images per block, several blocks.
        let g = PatchGeometry { n: 13, h: 40, w: 40, c: 8, kernel: 4, stride: 2 };
        assert!(g.block(FWD_BLOCK_ELEMS) > 1 && g.block(FWD_BLOCK_ELEMS) < g.n);
        let x = random(&[13, 40, 40, 8], 10);
        let w = random(&[g.patch_len(), 5], 11);
        let probe = random(&[13, 19, 19, 5], 12);
        let fused = grads_of(|x, w| x.apply_op2(w, ConvOp(g)).unwrap(), &x, &w, &probe);
        let plain = grads_of(
            |x, w| x.apply_op1(Im2Col(g)).unwrap().matmul(w).unwrap().reshape((13, 19, 19, 5)).unwrap(),
            &x,
            &w,
            &probe,
        );
        assert_close(&fused.0.flatten_all().unwrap().to_vec1().unwrap(), &plain.0.flatten_all().unwrap().to_vec1().unwrap());
        assert_close(&fused.1, &plain.1);
        assert_close(&fused.2, &plain.2);

        // The same geometry read as the output of a transposed convolution.
        let x = random(&[g.rows(), 6], 13);
        let w = random(&[6, g.patch_len()], 14);
        let probe = random(&[13, 40, 40, 8], 15);
        let xs = x.reshape((13, 19, 19, 6)).unwrap();
        let fused = grads_of(|x, w| x.apply_op2(w, ConvTransposeOp(g)).unwrap(), &xs, &w, &probe);
        let plain = grads_of(
            |x, w| x.reshape((g.rows(), 6)).unwrap().matmul(w).unwrap().apply_op1(Col2Im(g)).unwrap(),
            &xs,
            &w,
            &probe,
        );
        assert_close(&fused.0.flatten_all().unwrap().to_vec1().unwrap(), &plain.0.flatten_all().unwrap().to_vec1().unwrap());
        assert_close(&fused.1, &plain.1);
        assert_close(&fused.2, &plain.2);
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let g = PatchGeometry { n: 2, h: 9, w: 9, c: 3, kernel: 3, stride: 2 };
        let x = random(&[2, 9, 9, 3], 16);
        let w = candle_core::Var::from_tensor(&random(&[g.patch_len(), 4], 17)).unwrap();
        let grads = x.apply_op2(w.as_tensor(), ConvOp(g)).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(&x).is_none());
        assert!(grads.get(w.as_tensor()).is_some());
    }

    #[test]
    fn f32_and_f64_agree() {
        let g = PatchGeometry { n: 3, h: 12, w: 10, c: 2, kernel: 4, stride: 2 };
        let x = random(&[3, 12, 10, 2], 18);
        let w = random(&[g.patch_len(), 3], 19);
        let hi = x.apply_op2(&w, ConvOp(g)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let (x32, w32) = (x.to_dtype(DType::F32).unwrap(), w.to_dtype(DType::F32).unwrap());
        let lo = x32.apply_op2(&w32, ConvOp(g)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in hi.iter().zip(&lo) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
