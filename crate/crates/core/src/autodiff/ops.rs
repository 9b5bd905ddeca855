//! Forward and vector-Jacobian rules for every differentiable operation.

use super::conv::{self, ConvGeom};
use crate::tensor::{split_axis, strides, Result, Tensor, TensorError};

/// A differentiable operation. Inputs are passed positionally; see each
/// variant for the expected order and shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `[m,k] × [k,n] → [m,n]`
    MatMul,
    /// `x: [N,C,H,W]`, `k: [O,C,KH,KW]` → `[N,O,OH,OW]`
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// `x: [N,Ci,H,W]`, `k: [Ci,Co,KH,KW]` → `[N,Co,(H−1)s−2p+KH, ...]`
    ConvTranspose2d {
        stride: usize,
        pad: usize,
    },
    Add,
    Sub,
    Mul,
    /// `x: [N,C,...]`, `b: [C]`; `b` broadcast over every axis but 1.
    BiasAdd,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    /// `ln(1 + e^x)`
    Softplus,
    Square,
    /// `scale · x + shift`
    Affine {
        scale: f64,
        shift: f64,
    },
    /// `max(x, c)`
    MaxScalar(f64),
    Softmax {
        axis: usize,
    },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    /// Any number of inputs agreeing on every axis except `axis`.
    Concat {
        axis: usize,
    },
    /// `sqrt(Σ_axis x² + eps)`; the axis is removed.
    VectorNorm {
        axis: usize,
        eps: f64,
    },
    /// Sum over one axis (removed) or over everything (scalar result).
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    /// Capsule squash along `axis`: `x · q / ((1 + q) · sqrt(q + eps))`, `q = Σ x²`.
    Squash {
        axis: usize,
        eps: f64,
    },
    /// `u: [B,I,Din]`, `w: [I,J,Dout,Din]` → predictions `[B,I,J,Dout]`.
    CapsulePredict,
    /// `c: [B,I,J]`, `u_hat: [B,I,J,D]` → `Σ_i c·u_hat : [B,J,D]`.
    RouteCombine,
    /// `u_hat: [B,I,J,D]`, `v: [B,J,D]` → `[B,I,J]` dot products, or cosine
    /// similarity with `eps` inside each norm.
    Agreement {
        cosine: bool,
        eps: f64,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::BiasAdd => "bias_add",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Square => "square",
            Op::Affine { .. } => "affine",
            Op::MaxScalar(_) => "max_with_scalar",
            Op::Softmax { .. } => "softmax",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat { .. } => "concat",
            Op::VectorNorm { .. } => "vector_norm",
            Op::Sum { .. } => "reduce_sum",
            Op::Mean { .. } => "reduce_mean",
            Op::Squash { .. } => "squash",
            Op::CapsulePredict => "capsule_predict",
            Op::RouteCombine => "route_combine",
            Op::Agreement { .. } => "agreement",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul
            | Op::Conv2d { .. }
            | Op::ConvTranspose2d { .. }
            | Op::Add
            | Op::Sub
            | Op::Mul
            | Op::BiasAdd
            | Op::CapsulePredict
            | Op::RouteCombine
            | Op::Agreement { .. } => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn same_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op.name(), a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis(op: &Op, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(TensorError::invalid(
            op.name(),
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn squash_factor(q: f64, eps: f64) -> f64 {
    q / ((1.0 + q) * (q + eps).sqrt())
}

/// Evaluates `op` on concrete inputs. Pure: no graph is touched.
pub fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(TensorError::invalid(
                op.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
    } else if inputs.is_empty() {
        return Err(TensorError::invalid(
            op.name(),
            "expected at least one input",
        ));
    }
    let x = inputs[0];
    match op {
        Op::MatMul => {
            let b = inputs[1];
            let (m, k, n) = match (x.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
                _ => {
                    return Err(TensorError::shape(
                        "matmul",
                        "[m,k] x [k,n]",
                        (x.shape(), b.shape()),
                    ))
                }
            };
            Ok(matmul(x.data(), b.data(), m, k, n))
        }
        Op::Conv2d { stride, pad } => conv::gather(
            x,
            inputs[1],
            ConvGeom {
                stride: *stride,
                pad: *pad,
            },
        ),
        Op::ConvTranspose2d { stride, pad } => {
            let k = inputs[1];
            let g = ConvGeom {
                stride: *stride,
                pad: *pad,
            };
            let (&[_, _, h, w], &[_, _, kh, kw]) = (x.shape(), k.shape()) else {
                return Err(TensorError::shape(
                    "conv2d_transpose",
                    "4-d input and kernel",
                    (x.shape(), k.shape()),
                ));
            };
            match (g.transpose_out_len(h, kh), g.transpose_out_len(w, kw)) {
                (Some(oh), Some(ow)) => conv::scatter(x, k, g, oh, ow),
                _ => Err(TensorError::invalid(
                    "conv2d_transpose",
                    "padding consumes the whole output",
                )),
            }
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            same_shape(op, x, b)?;
            Ok(match op {
                Op::Add => zip_map(x, b, |p, q| p + q),
                Op::Sub => zip_map(x, b, |p, q| p - q),
                _ => zip_map(x, b, |p, q| p * q),
            })
        }
        Op::BiasAdd => {
            let b = inputs[1];
            if x.ndim() < 2 || b.shape() != [x.shape()[1]] {
                let want = x.shape().get(1).map(|&c| vec![c]);
                return Err(TensorError::shape("bias_add", want, b.shape()));
            }
            let (outer, c, inner) = split_axis(x.shape(), 1);
            let mut out = x.clone();
            let od = out.data_mut();
            for o in 0..outer {
                for (ci, &bv) in b.data().iter().enumerate() {
                    od[(o * c + ci) * inner..][..inner]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
            Ok(out)
        }
        Op::Relu => Ok(x.map(|v| v.max(0.0))),
        Op::LeakyRelu(slope) => Ok(x.map(|v| if v > 0.0 { v } else { slope * v })),
        Op::Sigmoid => Ok(x.map(sigmoid)),
        Op::Tanh => Ok(x.map(f64::tanh)),
        Op::Softplus => Ok(x.map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p())),
        Op::Square => Ok(x.map(|v| v * v)),
        Op::Affine { scale, shift } => Ok(x.map(|v| scale * v + shift)),
        Op::MaxScalar(c) => Ok(x.map(|v| v.max(*c))),
        Op::Softmax { axis } => {
            check_axis(op, x, *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = x.clone();
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let max = (0..len)
                        .map(|k| od[idx(k)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..len {
                        let e = (od[idx(k)] - max).exp();
                        od[idx(k)] = e;
                        z += e;
                    }
                    for k in 0..len {
                        od[idx(k)] /= z;
                    }
                }
            }
            Ok(out)
        }
        Op::Reshape(shape) => x.clone().reshape(shape),
        Op::Permute(axes) => permute(x, axes),
        Op::Concat { axis } => concat(inputs, *axis),
        Op::VectorNorm { axis, eps } => {
            check_axis(op, x, *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let q: f64 = (0..len)
                        .map(|k| x.data()[(o * len + k) * inner + i].powi(2))
                        .sum();
                    out[o * inner + i] = (q + eps).sqrt();
                }
            }
            Tensor::new(removed_axis(x.shape(), *axis), out)
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let s = x.sum();
                    Ok(Tensor::scalar(if mean { s / x.len() as f64 } else { s }))
                }
                Some(axis) => {
                    check_axis(op, x, *axis)?;
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for k in 0..len {
                            let src = &x.data()[(o * len + k) * inner..][..inner];
                            out[o * inner..][..inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    Tensor::new(removed_axis(x.shape(), *axis), out)
                }
            }
        }
        Op::Squash { axis, eps } => {
            check_axis(op, x, *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = x.clone();
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let q: f64 = (0..len).map(|k| od[idx(k)].powi(2)).sum();
                    let f = squash_factor(q, *eps);
                    (0..len).for_each(|k| od[idx(k)] *= f);
                }
            }
            Ok(out)
        }
        Op::CapsulePredict => {
            let w = inputs[1];
            let (&[b, i, din], &[wi, j, dout, wdin]) = (x.shape(), w.shape()) else {
                return Err(TensorError::shape(
                    "capsule_predict",
                    "u [B,I,Din] and W [I,J,Dout,Din]",
                    (x.shape(), w.shape()),
                ));
            };
            if wi != i || wdin != din {
                return Err(TensorError::shape(
                    "capsule_predict",
                    [i, j, dout, din],
                    w.shape(),
                ));
            }
            let mut out = vec![0.0; b * i * j * dout];
            for bi in 0..b {
                for ii in 0..i {
                    let u = &x.data()[(bi * i + ii) * din..][..din];
                    let wblock = &w.data()[ii * j * dout * din..][..j * dout * din];
                    let oblock = &mut out[(bi * i + ii) * j * dout..][..j * dout];
                    for (row, o) in wblock.chunks_exact(din).zip(oblock.iter_mut()) {
                        *o = row.iter().zip(u).map(|(a, b)| a * b).sum();
                    }
                }
            }
            Tensor::new(vec![b, i, j, dout], out)
        }
        Op::RouteCombine => {
            let uh = inputs[1];
            let (&[b, i, j], &[ub, ui, uj, d]) = (x.shape(), uh.shape()) else {
                return Err(TensorError::shape(
                    "route_combine",
                    "c [B,I,J] and u_hat [B,I,J,D]",
                    (x.shape(), uh.shape()),
                ));
            };
            if (ub, ui, uj) != (b, i, j) {
                return Err(TensorError::shape("route_combine", [b, i, j], [ub, ui, uj]));
            }
            let mut out = vec![0.0; b * j * d];
            for bi in 0..b {
                for ii in 0..i {
                    for ji in 0..j {
                        let c = x.data()[(bi * i + ii) * j + ji];
                        let src = &uh.data()[((bi * i + ii) * j + ji) * d..][..d];
                        let dst = &mut out[(bi * j + ji) * d..][..d];
                        dst.iter_mut().zip(src).for_each(|(o, u)| *o += c * u);
                    }
                }
            }
            Tensor::new(vec![b, j, d], out)
        }
        Op::Agreement { cosine, eps } => {
            let v = inputs[1];
            let (&[b, i, j, d], &[vb, vj, vd]) = (x.shape(), v.shape()) else {
                return Err(TensorError::shape(
                    "agreement",
                    "u_hat [B,I,J,D] and v [B,J,D]",
                    (x.shape(), v.shape()),
                ));
            };
            if (vb, vj, vd) != (b, j, d) {
                return Err(TensorError::shape("agreement", [b, j, d], v.shape()));
            }
            let mut out = vec![0.0; b * i * j];
            for bi in 0..b {
                for ii in 0..i {
                    for ji in 0..j {
                        let u = &x.data()[((bi * i + ii) * j + ji) * d..][..d];
                        let vv = &v.data()[(bi * j + ji) * d..][..d];
                        let p: f64 = u.iter().zip(vv).map(|(a, b)| a * b).sum();
                        out[(bi * i + ii) * j + ji] = if *cosine {
                            let nu = (u.iter().map(|a| a * a).sum::<f64>() + eps).sqrt();
                            let nv = (vv.iter().map(|a| a * a).sum::<f64>() + eps).sqrt();
                            p / (nu * nv)
                        } else {
                            p
                        };
                    }
                }
            }
            Tensor::new(vec![b, i, j], out)
        }
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..][..n];
        for (kk, &av) in a[r * k..][..k].iter().enumerate() {
            orow.iter_mut()
                .zip(&b[kk * n..][..n])
                .for_each(|(o, &bv)| *o += av * bv);
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul output")
}

fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd
        || axes
            .iter()
            .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
    {
        return Err(TensorError::invalid(
            "permute",
            format!("{axes:?} is not a permutation of 0..{nd}"),
        ));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    if nd == 0 {
        return Ok(x.clone());
    }
    let (inner, step) = (out_shape[nd - 1], src_strides[nd - 1]);
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    // odometer over every axis but the last, tracking the source offset
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    for _ in 0..x.len() / inner {
        out.extend((0..inner).map(|i| xd[base + i * step]));
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= idx[d] * src_strides[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    check_axis(&Op::Concat { axis }, first, axis)?;
    let mut total = 0;
    for t in inputs {
        let ok = t.ndim() == first.ndim()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(TensorError::shape("concat", first.shape(), t.shape()));
        }
        total += t.shape()[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..][..chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Vector-Jacobian product: gradients for each input whose `needs` flag is
/// set, given the upstream gradient `g` of the output `y`.
pub fn backward(
    op: &Op,
    inputs: &[&Tensor],
    y: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let x = inputs[0];
    let want = |k: usize| needs.get(k).copied().unwrap_or(false);
    let unary = |t: Tensor| vec![Some(t)];
    let out = match op {
        Op::MatMul => {
            let b = inputs[1];
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let n = b.shape()[1];
            let ga = want(0).then(|| matmul(g.data(), &transpose2(b.data(), k, n), m, n, k));
            let gb = want(1).then(|| matmul(&transpose2(x.data(), m, k), g.data(), k, m, n));
            vec![ga, gb]
        }
        Op::Conv2d { stride, pad } => {
            let k = inputs[1];
            let geom = ConvGeom {
                stride: *stride,
                pad: *pad,
            };
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let gx = if want(0) {
                Some(conv::scatter(g, k, geom, h, w)?)
            } else {
                None
            };
            let gk = if want(1) {
                Some(conv::weight_grad(g, x, geom, k.shape()[2], k.shape()[3])?)
            } else {
                None
            };
            vec![gx, gk]
        }
        Op::ConvTranspose2d { stride, pad } => {
            let k = inputs[1];
            let geom = ConvGeom {
                stride: *stride,
                pad: *pad,
            };
            let gx = if want(0) {
                Some(conv::gather(g, k, geom)?)
            } else {
                None
            };
            let gk = if want(1) {
                Some(conv::weight_grad(x, g, geom, k.shape()[2], k.shape()[3])?)
            } else {
                None
            };
            vec![gx, gk]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Op::Mul => {
            let b = inputs[1];
            vec![
                want(0).then(|| zip_map(g, b, |p, q| p * q)),
                want(1).then(|| zip_map(g, x, |p, q| p * q)),
            ]
        }
        Op::BiasAdd => {
            let (outer, c, inner) = split_axis(x.shape(), 1);
            let mut gb = vec![0.0; c];
            for o in 0..outer {
                for (ci, acc) in gb.iter_mut().enumerate() {
                    *acc += g.data()[(o * c + ci) * inner..][..inner]
                        .iter()
                        .sum::<f64>();
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(vec![c], gb)?)]
        }
        Op::Relu => unary(zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
        Op::LeakyRelu(slope) => unary(zip_map(
            g,
            x,
            |gv, xv| if xv > 0.0 { gv } else { slope * gv },
        )),
        Op::Sigmoid => unary(zip_map(g, y, |gv, s| gv * s * (1.0 - s))),
        Op::Tanh => unary(zip_map(g, y, |gv, t| gv * (1.0 - t * t))),
        Op::Softplus => unary(zip_map(g, x, |gv, xv| gv * sigmoid(xv))),
        Op::Square => unary(zip_map(g, x, |gv, xv| 2.0 * xv * gv)),
        Op::Affine { scale, .. } => unary(g.map(|v| scale * v)),
        Op::MaxScalar(c) => unary(zip_map(g, x, |gv, xv| if xv > *c { gv } else { 0.0 })),
        Op::Softmax { axis } => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut gx = g.clone();
            let gd = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                    for k in 0..len {
                        gd[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                    }
                }
            }
            unary(gx)
        }
        Op::Reshape(_) => unary(g.clone().reshape(x.shape())?),
        Op::Permute(axes) => unary(permute(g, &inverse_permutation(axes))?),
        Op::Concat { axis } => {
            let (outer, _, inner) = split_axis(y.shape(), *axis);
            let mut parts: Vec<Vec<f64>> =
                inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (t, part) in inputs.iter().zip(parts.iter_mut()) {
                    let chunk = t.shape()[*axis] * inner;
                    part.extend_from_slice(&g.data()[off..off + chunk]);
                    off += chunk;
                }
            }
            inputs
                .iter()
                .zip(parts)
                .enumerate()
                .map(|(k, (t, p))| {
                    if want(k) {
                        Tensor::new(t.shape().to_vec(), p).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<_>>()?
        }
        Op::VectorNorm { axis, .. } => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut gx = Tensor::zeros(x.shape());
            let gd = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let scale = g.data()[o * inner + i] / y.data()[o * inner + i];
                    for k in 0..len {
                        let idx = (o * len + k) * inner + i;
                        gd[idx] = scale * x.data()[idx];
                    }
                }
            }
            unary(gx)
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let v = g.item() / if mean { x.len() as f64 } else { 1.0 };
                    unary(Tensor::full(x.shape(), v))
                }
                Some(axis) => {
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let div = if mean { len as f64 } else { 1.0 };
                    let mut gx = Tensor::zeros(x.shape());
                    let gd = gx.data_mut();
                    for o in 0..outer {
                        let src = &g.data()[o * inner..][..inner];
                        for k in 0..len {
                            gd[(o * len + k) * inner..][..inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d = s / div);
                        }
                    }
                    unary(gx)
                }
            }
        }
        Op::Squash { axis, eps } => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut gx = Tensor::zeros(x.shape());
            let gd = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let q: f64 = (0..len).map(|k| x.data()[idx(k)].powi(2)).sum();
                    let r = (q + eps).sqrt();
                    let h = squash_factor(q, *eps);
                    // dh/dq for h(q) = q / ((1+q) r)
                    let dh = 1.0 / ((1.0 + q) * r)
                        - q / ((1.0 + q).powi(2) * r)
                        - 0.5 * q / ((1.0 + q) * r * r * r);
                    let gdotx: f64 = (0..len).map(|k| g.data()[idx(k)] * x.data()[idx(k)]).sum();
                    for k in 0..len {
                        gd[idx(k)] = g.data()[idx(k)] * h + 2.0 * x.data()[idx(k)] * dh * gdotx;
                    }
                }
            }
            unary(gx)
        }
        Op::CapsulePredict => {
            let w = inputs[1];
            let (b, i, din) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (j, dout) = (w.shape()[1], w.shape()[2]);
            let mut gu = want(0).then(|| vec![0.0; x.len()]);
            let mut gw = want(1).then(|| vec![0.0; w.len()]);
            for bi in 0..b {
                for ii in 0..i {
                    let u = &x.data()[(bi * i + ii) * din..][..din];
                    let gblock = &g.data()[(bi * i + ii) * j * dout..][..j * dout];
                    let wblock = &w.data()[ii * j * dout * din..][..j * dout * din];
                    if let Some(gu) = gu.as_mut() {
                        let dst = &mut gu[(bi * i + ii) * din..][..din];
                        for (row, &gv) in wblock.chunks_exact(din).zip(gblock) {
                            dst.iter_mut().zip(row).for_each(|(d, wv)| *d += gv * wv);
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let dst = &mut gw[ii * j * dout * din..][..j * dout * din];
                        for (row, &gv) in dst.chunks_exact_mut(din).zip(gblock) {
                            row.iter_mut().zip(u).for_each(|(d, uv)| *d += gv * uv);
                        }
                    }
                }
            }
            vec![
                gu.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
                gw.map(|v| Tensor::new(w.shape().to_vec(), v)).transpose()?,
            ]
        }
        Op::RouteCombine => {
            let uh = inputs[1];
            let (b, i, j) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let d = uh.shape()[3];
            let mut gc = vec![0.0; x.len()];
            let mut gu = vec![0.0; uh.len()];
            for bi in 0..b {
                for ii in 0..i {
                    for ji in 0..j {
                        let ci = (bi * i + ii) * j + ji;
                        let gs = &g.data()[(bi * j + ji) * d..][..d];
                        let u = &uh.data()[ci * d..][..d];
                        gc[ci] = gs.iter().zip(u).map(|(a, b)| a * b).sum();
                        let c = x.data()[ci];
                        gu[ci * d..][..d]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(o, gv)| *o = c * gv);
                    }
                }
            }
            vec![
                Some(Tensor::new(x.shape().to_vec(), gc)?),
                Some(Tensor::new(uh.shape().to_vec(), gu)?),
            ]
        }
        Op::Agreement { cosine, eps } => {
            let v = inputs[1];
            let (b, i, j, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let mut gu = vec![0.0; x.len()];
            let mut gv = vec![0.0; v.len()];
            for bi in 0..b {
                for ii in 0..i {
                    for ji in 0..j {
                        let ai = (bi * i + ii) * j + ji;
                        let ga = g.data()[ai];
                        let u = &x.data()[ai * d..][..d];
                        let vv = &v.data()[(bi * j + ji) * d..][..d];
                        let gu_dst = &mut gu[ai * d..][..d];
                        let gv_dst = &mut gv[(bi * j + ji) * d..][..d];
                        if *cosine {
                            let p: f64 = u.iter().zip(vv).map(|(a, b)| a * b).sum();
                            let nu = (u.iter().map(|a| a * a).sum::<f64>() + eps).sqrt();
                            let nv = (vv.iter().map(|a| a * a).sum::<f64>() + eps).sqrt();
                            let inv = 1.0 / (nu * nv);
                            for k in 0..d {
                                gu_dst[k] = ga * (vv[k] * inv - p * u[k] * inv / (nu * nu));
                                gv_dst[k] += ga * (u[k] * inv - p * vv[k] * inv / (nv * nv));
                            }
                        } else {
                            for k in 0..d {
                                gu_dst[k] = ga * vv[k];
                                gv_dst[k] += ga * u[k];
                            }
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(x.shape().to_vec(), gu)?),
                Some(Tensor::new(v.shape().to_vec(), gv)?),
            ]
        }
    };
    Ok(out)
}
