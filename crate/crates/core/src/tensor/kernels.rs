//! Raw slice kernels used by the tape. No shape validation here; callers
//! check shapes before dispatching.

use crate::scalar::Scalar;

/// Geometry of a square-kernel, zero-padded 2-D convolution over NCHW data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.ksize) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.ksize) / self.stride + 1
    }

    /// Range of output columns whose input column `ox*stride + kx - pad`
    /// falls inside the image.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // ox*s + off >= 0  and  ox*s + off <= w-1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_num = self.w as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(self.out_w() as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.ksize * g.ksize;
    let mut out = vec![T::zero(); g.n * g.k * oh * ow];
    for n in 0..g.n {
        for k in 0..g.k {
            let plane = &mut out[(n * g.k + k) * oh * ow..(n * g.k + k + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bias[k]);
            for c in 0..g.c {
                let src = &input[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                let wk = &kernel[(k * g.c + c) * kk..(k * g.c + c + 1) * kk];
                for ky in 0..g.ksize {
                    for kx in 0..g.ksize {
                        let wv = wk[ky * g.ksize + kx];
                        let (lo, hi) = g.ox_range(kx);
                        for oy in 0..oh {
                            let Some(iy) = g.iy(oy, ky) else { continue };
                            let dst = &mut plane[oy * ow + lo..oy * ow + hi];
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let base = lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                for (d, &s) in dst.iter_mut().zip(&row[base..base + (hi - lo)]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * row[base + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)` for upstream gradient `gout`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    gout: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.ksize * g.ksize;
    let mut d_in = if need_input {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let mut d_ker = if need_kernel {
        vec![T::zero(); kernel.len()]
    } else {
        Vec::new()
    };
    let mut d_bias = vec![T::zero(); g.k];
    for n in 0..g.n {
        for k in 0..g.k {
            let go = &gout[(n * g.k + k) * oh * ow..(n * g.k + k + 1) * oh * ow];
            d_bias[k] += go.iter().copied().sum::<T>();
            for c in 0..g.c {
                let in_off = (n * g.c + c) * g.h * g.w;
                let wk_off = (k * g.c + c) * kk;
                for ky in 0..g.ksize {
                    for kx in 0..g.ksize {
                        let (lo, hi) = g.ox_range(kx);
                        if hi <= lo {
                            continue;
                        }
                        let base = lo * g.stride + kx - g.pad;
                        let wv = kernel[wk_off + ky * g.ksize + kx];
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let Some(iy) = g.iy(oy, ky) else { continue };
                            let grow = &go[oy * ow + lo..oy * ow + hi];
                            let row_off = in_off + iy * g.w + base;
                            if need_kernel {
                                let row = &input[row_off..];
                                if g.stride == 1 {
                                    for (&gv, &x) in grow.iter().zip(row) {
                                        acc += gv * x;
                                    }
                                } else {
                                    for (j, &gv) in grow.iter().enumerate() {
                                        acc += gv * row[j * g.stride];
                                    }
                                }
                            }
                            if need_input {
                                let drow = &mut d_in[row_off..];
                                if g.stride == 1 {
                                    for (d, &gv) in drow.iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for (j, &gv) in grow.iter().enumerate() {
                                        drow[j * g.stride] += wv * gv;
                                    }
                                }
                            }
                        }
                        if need_kernel {
                            d_ker[wk_off + ky * g.ksize + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    (d_in, d_ker, d_bias)
}

/// Nearest-neighbour 2x upsampling over the last two axes of `planes`
/// planes of size `h x w`.
pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            let src = &x[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
            let dst = &mut out[p * oh * ow + y * ow..p * oh * ow + (y + 1) * ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_adjoint<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                out[p * h * w + (y / 2) * w + x / 2] += g[p * oh * ow + y * ow + x];
            }
        }
    }
    out
}

/// 2x2 stride-2 average pooling; `h` and `w` must be even.
pub fn avgpool2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xo in 0..ow {
                let b = p * h * w + 2 * y * w + 2 * xo;
                out[p * oh * ow + y * ow + xo] =
                    (x[b] + x[b + 1] + x[b + w] + x[b + w + 1]) * quarter;
            }
        }
    }
    out
}

/// `c[m,n] = sum_k a[m,k] b[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Splits a shape into `(outer, len, inner)` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn log_softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[base + j * inner + i]);
            }
            let mut s = T::zero();
            for j in 0..len {
                s += (x[base + j * inner + i] - m).exp();
            }
            let lse = m + s.ln();
            for j in 0..len {
                y[base + j * inner + i] = x[base + j * inner + i] - lse;
            }
        }
    }
    y
}

/// Per-lane L2 normalisation along an axis; lanes with norm `<= eps` map to
/// zero. Returns the output and the lane norms.
pub fn l2_normalize<T: Scalar>(
    x: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut norms = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut s = T::zero();
            for j in 0..len {
                let v = x[base + j * inner + i];
                s += v * v;
            }
            let n = s.sqrt();
            norms[o * inner + i] = n;
            if n > eps {
                for j in 0..len {
                    y[base + j * inner + i] = x[base + j * inner + i] / n;
                }
            }
        }
    }
    (y, norms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.n * g.k * oh * ow];
        for n in 0..g.n {
            for ko in 0..g.k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[ko];
                        for c in 0..g.c {
                            for ky in 0..g.ksize {
                                for kx in 0..g.ksize {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    acc += k[((ko * g.c + c) * g.ksize + ky) * g.ksize + kx]
                                        * x[((n * g.c + c) * g.h + iy as usize) * g.w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((n * g.k + ko) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn strided_conv_matches_loops_on_odd_sizes() {
        for (h, w, stride) in [(5, 7, 2), (6, 6, 2), (3, 4, 1), (1, 1, 2)] {
            let g = ConvGeom {
                n: 2,
                c: 2,
                h,
                w,
                k: 3,
                ksize: 3,
                stride,
                pad: 1,
            };
            let x: Vec<f64> = (0..g.n * g.c * h * w)
                .map(|i| (i as f64 * 0.37).sin())
                .collect();
            let k: Vec<f64> = (0..g.k * g.c * 9)
                .map(|i| (i as f64 * 0.11).cos())
                .collect();
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv2d_forward(&g, &x, &k, &b);
            let slow = naive_conv(&g, &x, &k, &b);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(g.out_h(), h.div_ceil(stride));
        }
    }

    #[test]
    fn pooled_upsample_is_identity() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let up = upsample2x(&x, 1, 3, 4);
        assert_eq!(avgpool2x(&up, 1, 6, 8), x);
    }
}
