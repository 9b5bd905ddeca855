//! NCHW convolution kernels (im2col + row-major GEMM).
//!
//! Three primitives cover conv2d, its transpose, and both of their gradients:
//!
//! * [`gather`]: `out[n,o,oh,ow] = Σ k[o,c,i,j] · x[n,c,oh·s+i−p, ow·s+j−p]`
//! * [`scatter`]: the adjoint of `gather` with respect to `x`
//! * [`weight_grad`]: the adjoint of `gather` with respect to `k`

use std::ops::Range;

use crate::tensor::{Result, Tensor, TensorError};

/// Geometry shared by a convolution and its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Spatial output length of a forward convolution.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    /// Spatial output length of a transposed convolution.
    pub fn transpose_out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let full = (input - 1) * self.stride + kernel;
        if self.stride == 0 || full <= 2 * self.pad {
            return None;
        }
        Some(full - 2 * self.pad)
    }
}

/// Output positions `o` in `0..out_len` whose tap `o·s + offset − p` lands inside `0..in_len`.
fn valid(out_len: usize, in_len: usize, g: ConvGeom, offset: usize) -> Range<usize> {
    let lo = if g.pad > offset {
        (g.pad - offset).div_ceil(g.stride)
    } else {
        0
    };
    // o·s + offset − p ≤ in_len − 1
    let limit = in_len + g.pad;
    let hi = if limit > offset {
        ((limit - offset - 1) / g.stride + 1).min(out_len)
    } else {
        0
    };
    lo..hi.max(lo)
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::shape(op, "4-d tensor", t.shape())),
    }
}

/// Images unfolded side by side per GEMM call; keeps GEMM rows long when the
/// output plane is small.
const MIN_GEMM_COLS: usize = 256;

/// Geometry of one unfolding: kernel size plus output plane size.
#[derive(Clone, Copy)]
struct Unfold {
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    g: ConvGeom,
}

/// Unfold one image `x: [C,H,W]` into columns `off..off + OH·OW` of
/// `cols: [C·KH·KW, ld]`. Taps in the padding are left untouched, so the
/// caller zeroes `cols` first.
fn im2col(x: &[f64], dims: [usize; 3], u: Unfold, cols: &mut [f64], ld: usize, off: usize) {
    let [c, h, w] = dims;
    let Unfold { kh, kw, oh, ow, g } = u;
    let p = oh * ow;
    for ci in 0..c {
        let xplane = &x[ci * h * w..][..h * w];
        for i in 0..kh {
            let rows = valid(oh, h, g, i);
            for j in 0..kw {
                let dst = &mut cols[((ci * kh + i) * kw + j) * ld + off..][..p];
                let cs = valid(ow, w, g, j);
                for r in rows.clone() {
                    let xrow = &xplane[(r * g.stride + i - g.pad) * w..][..w];
                    let drow = &mut dst[r * ow..][..ow];
                    for col in cs.clone() {
                        drow[col] = xrow[col * g.stride + j - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns `off..off + OH·OW` back into
/// `x: [C,H,W]`.
fn col2im(cols: &[f64], dims: [usize; 3], u: Unfold, ld: usize, off: usize, x: &mut [f64]) {
    let [c, h, w] = dims;
    let Unfold { kh, kw, oh, ow, g } = u;
    let p = oh * ow;
    for ci in 0..c {
        let xplane = &mut x[ci * h * w..][..h * w];
        for i in 0..kh {
            let rows = valid(oh, h, g, i);
            for j in 0..kw {
                let src = &cols[((ci * kh + i) * kw + j) * ld + off..][..p];
                let cs = valid(ow, w, g, j);
                for r in rows.clone() {
                    let xrow = &mut xplane[(r * g.stride + i - g.pad) * w..][..w];
                    let srow = &src[r * ow..][..ow];
                    for col in cs.clone() {
                        xrow[col * g.stride + j - g.pad] += srow[col];
                    }
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..][..n]) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored `[k×m]` and `b` `[k×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..][..n];
        for (i, &av) in a[p * m..][..m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in c[i * n..][..n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a` stored `[m×k]` and `b` `[n×k]`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        for (j, cv) in c[i * n..][..n].iter_mut().enumerate() {
            *cv += dot(arow, &b[j * k..][..k]);
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Forward convolution. `x: [N,C,H,W]`, `k: [O,C,KH,KW]` → `[N,O,OH,OW]`.
pub fn gather(x: &Tensor, k: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let [n, c, h, w] = dims4("conv2d", x)?;
    let [o, kc, kh, kw] = dims4("conv2d", k)?;
    if kc != c {
        return Err(TensorError::shape("conv2d", [o, c, kh, kw], k.shape()));
    }
    let (oh, ow) = match (g.out_len(h, kh), g.out_len(w, kw)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} stride {} pad {} does not fit input {h}x{w}",
                    g.stride, g.pad
                ),
            ))
        }
    };
    let (p, ckk, chw) = (oh * ow, c * kh * kw, c * h * w);
    let u = Unfold { kh, kw, oh, ow, g };
    let group = MIN_GEMM_COLS.div_ceil(p).clamp(1, n);
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let mut cols = vec![0.0; ckk * group * p];
    let mut prod = vec![0.0; o * group * p];
    let (xd, kd) = (x.data(), k.data());
    let od = out.data_mut();
    for n0 in (0..n).step_by(group) {
        let gn = group.min(n - n0);
        let ld = gn * p;
        cols[..ckk * ld].fill(0.0);
        for gi in 0..gn {
            im2col(
                &xd[(n0 + gi) * chw..][..chw],
                [c, h, w],
                u,
                &mut cols,
                ld,
                gi * p,
            );
        }
        prod[..o * ld].fill(0.0);
        gemm_nn(kd, &cols[..ckk * ld], &mut prod[..o * ld], o, ckk, ld);
        for gi in 0..gn {
            for oi in 0..o {
                od[((n0 + gi) * o + oi) * p..][..p].copy_from_slice(&prod[oi * ld + gi * p..][..p]);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`gather`] in `x`. `y: [N,O,OH,OW]`, `k: [O,C,KH,KW]` → `[N,C,H,W]`.
pub fn scatter(y: &Tensor, k: &Tensor, g: ConvGeom, h: usize, w: usize) -> Result<Tensor> {
    let [n, o, oh, ow] = dims4("conv2d_transpose", y)?;
    let [ko, c, kh, kw] = dims4("conv2d_transpose", k)?;
    if ko != o {
        return Err(TensorError::shape(
            "conv2d_transpose",
            [o, c, kh, kw],
            k.shape(),
        ));
    }
    let (p, ckk, chw) = (oh * ow, c * kh * kw, c * h * w);
    let u = Unfold { kh, kw, oh, ow, g };
    let group = MIN_GEMM_COLS.div_ceil(p).clamp(1, n.max(1));
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut ys = vec![0.0; o * group * p];
    let mut cols = vec![0.0; ckk * group * p];
    let (yd, kd) = (y.data(), k.data());
    let od = out.data_mut();
    for n0 in (0..n).step_by(group) {
        let gn = group.min(n - n0);
        let ld = gn * p;
        for gi in 0..gn {
            for oi in 0..o {
                ys[oi * ld + gi * p..][..p].copy_from_slice(&yd[((n0 + gi) * o + oi) * p..][..p]);
            }
        }
        cols[..ckk * ld].fill(0.0);
        gemm_tn(kd, &ys[..o * ld], &mut cols[..ckk * ld], ckk, o, ld);
        for gi in 0..gn {
            col2im(
                &cols,
                [c, h, w],
                u,
                ld,
                gi * p,
                &mut od[(n0 + gi) * chw..][..chw],
            );
        }
    }
    Ok(out)
}

/// Adjoint of [`gather`] in `k`.
///
/// `low: [N,L,OH,OW]` is the strided (output) side, `high: [N,C,H,W]` the
/// dense (input) side; returns `[L,C,KH,KW]`.
pub fn weight_grad(
    low: &Tensor,
    high: &Tensor,
    g: ConvGeom,
    kh: usize,
    kw: usize,
) -> Result<Tensor> {
    let [n, l, oh, ow] = dims4("conv2d weight grad", low)?;
    let [hn, c, h, w] = dims4("conv2d weight grad", high)?;
    if hn != n {
        return Err(TensorError::shape("conv2d weight grad", n, hn));
    }
    let (p, ckk, chw) = (oh * ow, c * kh * kw, c * h * w);
    let u = Unfold { kh, kw, oh, ow, g };
    let group = MIN_GEMM_COLS.div_ceil(p).clamp(1, n.max(1));
    let mut out = Tensor::zeros(&[l, c, kh, kw]);
    let mut lows = vec![0.0; l * group * p];
    let mut cols = vec![0.0; ckk * group * p];
    let (lowd, hd) = (low.data(), high.data());
    let od = out.data_mut();
    for n0 in (0..n).step_by(group) {
        let gn = group.min(n - n0);
        let ld = gn * p;
        cols[..ckk * ld].fill(0.0);
        for gi in 0..gn {
            im2col(
                &hd[(n0 + gi) * chw..][..chw],
                [c, h, w],
                u,
                &mut cols,
                ld,
                gi * p,
            );
            for li in 0..l {
                lows[li * ld + gi * p..][..p]
                    .copy_from_slice(&lowd[((n0 + gi) * l + li) * p..][..p]);
            }
        }
        gemm_nt(&lows[..l * ld], &cols[..ckk * ld], od, l, ld, ckk);
    }
    Ok(out)
}
