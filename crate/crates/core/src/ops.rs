//! Forward and adjoint kernels on plain tensors.
//!
//! These are pure functions; [`Tape`](crate::Tape) records which of them ran
//! and calls the matching adjoint during the reverse sweep.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Reduction used by [`pool2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Avg,
}

const POOL_FACTORS: [usize; 4] = [1, 2, 4, 8];

/// `C += A · B` for row-major `A: m×k`, `B: k×n`, `C: m×n`.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    // Four output rows share each streamed row of B.
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        let [cout, cin, k_h, k_w] = weight.0;
        let [_, c, h, w] = input.0;
        if stride == 0 {
            return Err(arg_err("conv2d", "stride must be at least 1"));
        }
        if c != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels but weight {weight} expects {cin}"),
            ));
        }
        if cout == 0 || k_h == 0 || k_w == 0 {
            return Err(shape_err("conv2d", format!("degenerate weight {weight}")));
        }
        if h + 2 * pad < k_h || w + 2 * pad < k_w {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k_h}x{k_w} larger than padded input {h}x{w} (pad {pad}); zero-sized output"),
            ));
        }
        let out_h = (h + 2 * pad - k_h) / stride + 1;
        let out_w = (w + 2 * pad - k_w) / stride + 1;
        Ok(Self {
            cin,
            h,
            w,
            k_h,
            k_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k_h * self.k_w
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output index range along one axis for kernel tap `k`.
    fn valid(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // in = out * stride + k - pad must lie in [0, in_len)
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if in_len + pad > k {
            ((in_len + pad - k - 1) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, plane: &[T], col: &mut [T]) {
        let n = self.cols();
        col.fill(T::zero());
        for c in 0..self.cin {
            let src = &plane[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k_h {
                let (y0, y1) = Self::valid(self.out_h, self.h, ky, self.stride, self.pad);
                for kx in 0..self.k_w {
                    let (x0, x1) = Self::valid(self.out_w, self.w, kx, self.stride, self.pad);
                    let row = ((c * self.k_h + ky) * self.k_w + kx) * n;
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let dst = &mut col[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        let srow = &src[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            let ix0 = x0 + kx - self.pad;
                            dst[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                dst[ox] = srow[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_acc<T: Scalar>(&self, col: &[T], plane: &mut [T]) {
        let n = self.cols();
        for c in 0..self.cin {
            let dst = &mut plane[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k_h {
                let (y0, y1) = Self::valid(self.out_h, self.h, ky, self.stride, self.pad);
                for kx in 0..self.k_w {
                    let (x0, x1) = Self::valid(self.out_w, self.w, kx, self.stride, self.pad);
                    let row = ((c * self.k_h + ky) * self.k_w + kx) * n;
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &col[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        let drow = &mut dst[iy * self.w..(iy + 1) * self.w];
                        for ox in x0..x1 {
                            drow[ox * self.stride + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output shape of [`conv2d`] without running it.
pub fn conv2d_output_shape(input: Shape, weight: Shape, stride: usize, padding: usize) -> Result<Shape> {
    let g = ConvGeom::new(input, weight, stride, padding)?;
    Ok(Shape::new(input.batch(), weight.0[0], g.out_h, g.out_w))
}

/// 2-D cross-correlation, weight layout `(C_out, C_in, kH, kW)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    let cout = weight.shape().0[0];
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(shape_err(
                "conv2d",
                format!("bias has {} values, expected {cout}", b.numel()),
            ));
        }
    }
    let batch = input.shape().batch();
    let (k, n) = (g.rows(), g.cols());
    let in_per = input.shape().numel() / batch.max(1);
    let mut out = Tensor::zeros(Shape::new(batch, cout, g.out_h, g.out_w));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..batch {
        let plane = &input.data()[b * in_per..(b + 1) * in_per];
        let dst = &mut out.data_mut()[b * cout * n..(b + 1) * cout * n];
        if let Some(bias) = bias {
            for (row, &bv) in dst.chunks_mut(n).zip(bias.data()) {
                row.fill(bv);
            }
        }
        if g.is_pointwise() {
            gemm_acc(weight.data(), plane, dst, cout, k, n);
        } else {
            g.im2col(plane, &mut col);
            gemm_acc(weight.data(), &col, dst, cout, k, n);
        }
    }
    Ok(out)
}

/// Adjoints of [`conv2d`]: `(d_input, d_weight, d_bias)`; `d_input` only when
/// `need_input` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    let cout = weight.shape().0[0];
    let batch = input.shape().batch();
    let (k, n) = (g.rows(), g.cols());
    let in_per = input.shape().numel() / batch.max(1);

    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(Shape::new(1, cout, 1, 1));
    let mut d_input = need_input.then(|| Tensor::zeros(input.shape()));

    // Transposed weight (k × cout) for the input adjoint.
    let mut w_t = vec![T::zero(); k * cout];
    if need_input {
        for co in 0..cout {
            for r in 0..k {
                w_t[r * cout + co] = weight.data()[co * k + r];
            }
        }
    }
    let mut col = vec![T::zero(); k * n];
    let mut d_col = vec![T::zero(); k * n];
    for b in 0..batch {
        let plane = &input.data()[b * in_per..(b + 1) * in_per];
        let gout = &grad_out.data()[b * cout * n..(b + 1) * cout * n];
        let col_ref: &[T] = if g.is_pointwise() {
            plane
        } else {
            g.im2col(plane, &mut col);
            &col
        };
        let dw = d_weight.data_mut();
        for co in 0..cout {
            let grow = &gout[co * n..(co + 1) * n];
            d_bias.data_mut()[co] += grow.iter().copied().sum();
            for r in 0..k {
                let crow = &col_ref[r * n..(r + 1) * n];
                let mut acc = T::zero();
                for (&gv, &cv) in grow.iter().zip(crow) {
                    acc += gv * cv;
                }
                dw[co * k + r] += acc;
            }
        }
        if let Some(d_in) = d_input.as_mut() {
            let dst = &mut d_in.data_mut()[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                gemm_acc(&w_t, gout, dst, k, cout, n);
            } else {
                d_col.fill(T::zero());
                gemm_acc(&w_t, gout, &mut d_col, k, cout, n);
                g.col2im_acc(&d_col, dst);
            }
        }
    }
    Ok((d_input, d_weight, d_bias))
}

fn check_pool(shape: Shape, factor: usize) -> Result<()> {
    if !POOL_FACTORS.contains(&factor) {
        return Err(arg_err("pool2d", format!("factor {factor} not in {{1, 2, 4, 8}}")));
    }
    if shape.height() % factor != 0 || shape.width() % factor != 0 {
        return Err(shape_err(
            "pool2d",
            format!(
                "spatial dims {}x{} not divisible by factor {factor}",
                shape.height(),
                shape.width()
            ),
        ));
    }
    Ok(())
}

/// Non-overlapping `factor × factor` pooling. Returns the pooled tensor and,
/// for max pooling, the flat input index of each output's argmax (first in
/// row-major order on ties).
pub fn pool2d<T: Scalar>(input: &Tensor<T>, factor: usize, mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    check_pool(input.shape(), factor)?;
    if factor == 1 {
        return Ok((input.clone(), Vec::new()));
    }
    let [nb, nc, h, w] = input.shape().0;
    let (oh, ow) = (h / factor, w / factor);
    let out_shape = Shape::new(nb, nc, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax.reserve(out_shape.numel());
    }
    let inv = T::one() / T::lit((factor * factor) as f64);
    let src = input.data();
    for p in 0..nb * nc {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * factor * w + ox * factor;
                let mut best = src[best_i];
                let mut acc = T::zero();
                for dy in 0..factor {
                    let row = base + (oy * factor + dy) * w + ox * factor;
                    for (dx, &v) in src[row..row + factor].iter().enumerate() {
                        acc += v;
                        if v > best {
                            best = v;
                            best_i = row + dx;
                        }
                    }
                }
                match mode {
                    PoolMode::Max => {
                        out.push(best);
                        argmax.push(best_i);
                    }
                    PoolMode::Avg => out.push(acc * inv),
                }
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

pub fn pool2d_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
    factor: usize,
    mode: PoolMode,
    argmax: &[usize],
) -> Tensor<T> {
    if factor == 1 {
        return grad_out.clone();
    }
    let mut d_in = Tensor::zeros(input_shape);
    let dst = d_in.data_mut();
    match mode {
        PoolMode::Max => {
            for (&i, &g) in argmax.iter().zip(grad_out.data()) {
                dst[i] += g;
            }
        }
        PoolMode::Avg => {
            let [_, _, h, w] = input_shape.0;
            let (oh, ow) = (h / factor, w / factor);
            let inv = T::one() / T::lit((factor * factor) as f64);
            for (o, &g) in grad_out.data().iter().enumerate() {
                let p = o / (oh * ow);
                let (oy, ox) = ((o % (oh * ow)) / ow, o % ow);
                let gv = g * inv;
                for dy in 0..factor {
                    let row = p * h * w + (oy * factor + dy) * w + ox * factor;
                    dst[row..row + factor].iter_mut().for_each(|d| *d += gv);
                }
            }
        }
    }
    d_in
}

/// Per-output-index interpolation taps `(i0, i1, w0, w1)` along one axis for a
/// half-pixel-center bilinear resize from `in_len` to `out_len`.
pub(crate) fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, T::lit(1.0 - frac), T::lit(frac))
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (`align_corners = false`), source
/// coordinates clamped at the borders.
pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [nb, nc, h, w] = input.shape().0;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(shape_err(
            "resize_bilinear",
            format!("cannot resize {} to {out_h}x{out_w}", input.shape()),
        ));
    }
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let src = input.data();
    let mut out = Vec::with_capacity(nb * nc * out_h * out_w);
    for p in 0..nb * nc {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ty {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, wx0, wx1) in &tx {
                let top = wx0 * r0[x0] + wx1 * r0[x1];
                let bot = wx0 * r1[x0] + wx1 * r1[x1];
                out.push(wy0 * top + wy1 * bot);
            }
        }
    }
    Tensor::from_vec(Shape::new(nb, nc, out_h, out_w), out)
}

pub fn resize_bilinear_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let [nb, nc, h, w] = input_shape.0;
    let (out_h, out_w) = (grad_out.shape().height(), grad_out.shape().width());
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut d_in = Tensor::zeros(input_shape);
    let dst = d_in.data_mut();
    let g = grad_out.data();
    for p in 0..nb * nc {
        let plane = &mut dst[p * h * w..(p + 1) * h * w];
        let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = gp[oy * out_w + ox];
                plane[y0 * w + x0] += gv * wy0 * wx0;
                plane[y0 * w + x1] += gv * wy0 * wx1;
                plane[y1 * w + x0] += gv * wy1 * wx0;
                plane[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    }
    d_in
}

/// Bilinear upsampling by an integer factor in `{1, 2, 4, 8}`.
pub fn upsample_bilinear<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if !POOL_FACTORS.contains(&factor) {
        return Err(arg_err(
            "upsample_bilinear",
            format!("factor {factor} not in {{1, 2, 4, 8}}"),
        ));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let s = input.shape();
    resize_bilinear(input, s.height() * factor, s.width() * factor)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", format!("{} vs {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", format!("{} vs {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn relu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Channel-axis concatenation.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| arg_err("concat_channels", "nothing to concatenate"))?;
    let [nb, _, h, w] = first.shape().0;
    let mut total = 0;
    for p in parts {
        let [b2, c2, h2, w2] = p.shape().0;
        if (b2, h2, w2) != (nb, h, w) {
            return Err(shape_err(
                "concat_channels",
                format!("{} incompatible with {}", p.shape(), first.shape()),
            ));
        }
        total += c2;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(nb * total * plane);
    for b in 0..nb {
        for p in parts {
            let c = p.shape().channels();
            data.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::from_vec(Shape::new(nb, total, h, w), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape(shape), data).unwrap()
    }

    /// Nested-loop cross-correlation, independent of the im2col path.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, s: usize, p: usize) -> Tensor<f64> {
        let [nb, cin, h, wd] = x.shape().0;
        let [cout, _, kh, kw] = w.shape().0;
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        Tensor::from_fn(Shape::new(nb, cout, oh, ow), |b, co, oy, ox| {
            let mut acc = bias.map_or(0.0, |bv| bv[co]);
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.get(b, ci, iy as usize, ix as usize) * w.get(co, ci, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_scalar_kernel() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = t([1, 1, 1, 1], vec![2.0]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, Tensor::full(Shape::new(1, 1, 3, 3), 2.0));
    }

    #[test]
    fn conv_strided_box_filter() {
        let x = t([1, 1, 4, 4], (0..16).map(f64::from).collect());
        let w = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let y = conv2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.data(), &[10.0, 18.0, 42.0, 50.0]);
    }

    #[test]
    fn conv_zero_weight_zero_bias() {
        let x = Tensor::from_fn(Shape::new(2, 3, 5, 5), |b, c, y, x| (b + c * y) as f64 - x as f64);
        let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
        let bias = Tensor::zeros(Shape::new(1, 4, 1, 1));
        let y = conv2d(&x, &w, Some(&bias), 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut seed = 1u64;
        let mut rnd = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for &(k, s, p, h, w) in &[(3, 1, 1, 5, 7), (3, 2, 1, 8, 8), (1, 1, 0, 4, 3), (2, 2, 0, 5, 5), (3, 2, 0, 7, 6)] {
            let x = Tensor::from_fn(Shape::new(2, 3, h, w), |_, _, _, _| rnd());
            let wt = Tensor::from_fn(Shape::new(5, 3, k, k), |_, _, _, _| rnd());
            let bias: Vec<f64> = (0..5).map(|_| rnd()).collect();
            let bt = t([1, 5, 1, 1], bias.clone());
            let fast = conv2d(&x, &wt, Some(&bt), s, p).unwrap();
            let slow = conv_naive(&x, &wt, Some(&bias), s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        assert!(conv2d(&x, &Tensor::zeros(Shape::new(1, 3, 3, 3)), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(Shape::new(1, 2, 5, 5)), None, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(Shape::new(1, 2, 3, 3)), None, 0, 1).is_err());
    }

    #[test]
    fn pool_examples() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool2d(&x, 2, PoolMode::Max).unwrap().0.data(), &[4.0]);
        assert_eq!(pool2d(&x, 2, PoolMode::Avg).unwrap().0.data(), &[2.5]);
        let c = Tensor::full(Shape::new(1, 2, 8, 8), 0.3f64);
        for f in [1, 2, 4, 8] {
            for mode in [PoolMode::Max, PoolMode::Avg] {
                let (y, _) = pool2d(&c, f, mode).unwrap();
                assert_eq!(y.shape(), Shape::new(1, 2, 8 / f, 8 / f));
                assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn pool_rejects_indivisible() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 6, 6));
        assert!(pool2d(&x, 4, PoolMode::Max).is_err());
        assert!(pool2d(&x, 3, PoolMode::Max).is_err());
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let (_, arg) = pool2d(&x, 2, PoolMode::Max).unwrap();
        assert_eq!(arg, vec![0]);
        let g = pool2d_backward(x.shape(), &Tensor::scalar(1.0), 2, PoolMode::Max, &arg);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_examples() {
        let one = t([1, 1, 1, 1], vec![5.0]);
        assert_eq!(upsample_bilinear(&one, 2).unwrap().data(), &[5.0; 4]);
        let row = t([1, 1, 1, 2], vec![0.0, 2.0]);
        let up = upsample_bilinear(&row, 2).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(up.data(), &[0.0, 0.5, 1.5, 2.0, 0.0, 0.5, 1.5, 2.0]);
        assert!(upsample_bilinear(&row, 3).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let x = t([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(Shape::new(1, 1, 3, 1))).is_err());
        let a = Tensor::<f64>::zeros(Shape::new(2, 3, 4, 4));
        let b = Tensor::<f64>::zeros(Shape::new(2, 5, 4, 4));
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), Shape::new(2, 8, 4, 4));
        let c = Tensor::<f64>::zeros(Shape::new(2, 5, 2, 4));
        assert!(concat_channels(&[&a, &c]).is_err());
    }
}
