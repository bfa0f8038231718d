//! Differentiable tensor operations recorded on a [`Graph`].
//!
//! Shapes are never broadcast implicitly. The `*_bcast` variants accept a
//! right operand of equal rank whose dimensions each equal the left
//! operand's or are 1.

use std::sync::Arc;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{invalid, Result};
use crate::scan::{self, DirectionSet};

/// `(outer, dim, inner)` sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, what: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(format!("{what}: axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: shape mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}

/// For every flat index of `a_shape`, the flat index into `b_shape` under
/// size-1 broadcasting of `b`.
fn bcast_map(a_shape: &[usize], b_shape: &[usize], what: &str) -> Result<Vec<usize>> {
    if a_shape.len() != b_shape.len()
        || a_shape
            .iter()
            .zip(b_shape)
            .any(|(&a, &b)| b != a && b != 1)
    {
        return Err(invalid(format!(
            "{what}: cannot broadcast {b_shape:?} onto {a_shape:?}"
        )));
    }
    let rank = a_shape.len();
    let b_strides = super::tensor::strides(b_shape);
    let eff: Vec<usize> = (0..rank)
        .map(|i| if b_shape[i] == 1 { 0 } else { b_strides[i] })
        .collect();
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < a_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(map)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'g, T: Real> Var<'g, T> {
    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let out = self.value().map(f);
        self.graph().op(out, &[self], move |a| {
            let x = a.inputs[0].data();
            let y = a.output.data();
            let g = a.grad.data();
            let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
            vec![Some(Tensor::new(a.grad.shape(), data).expect("shape"))]
        })
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Var<'g, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        self.unary(move |x| x + s, |_, _| T::one())
    }

    fn binary(
        self,
        other: Var<'g, T>,
        what: &str,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Var<'g, T>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape(a.shape(), b.shape(), what)?;
            a.zip_map(&b, f)
        };
        Ok(self.graph().op(out, &[self, other], move |args| {
            let (a, b, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for i in 0..g.len() {
                let (x, y) = grads(a[i], b[i], g[i]);
                ga.push(x);
                gb.push(y);
            }
            let shape = args.grad.shape();
            vec![
                Some(Tensor::new(shape, ga).expect("shape")),
                Some(Tensor::new(shape, gb).expect("shape")),
            ]
        }))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    /// `self + other` with `other` broadcast along its size-1 dimensions.
    pub fn add_bcast(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (out, map) = {
            let (a, b) = (self.value(), other.value());
            let map = bcast_map(a.shape(), b.shape(), "add_bcast")?;
            let bd = b.data();
            let data = a.data().iter().zip(&map).map(|(&x, &j)| x + bd[j]).collect();
            (Tensor::new(a.shape(), data)?, map)
        };
        Ok(self.graph().op(out, &[self, other], move |args| {
            let mut gb = Tensor::zeros(args.inputs[1].shape());
            let gbd = gb.data_mut();
            for (&g, &j) in args.grad.data().iter().zip(&map) {
                gbd[j] += g;
            }
            vec![Some(args.grad.clone()), Some(gb)]
        }))
    }

    /// `self * other` with `other` broadcast along its size-1 dimensions.
    pub fn mul_bcast(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (out, map) = {
            let (a, b) = (self.value(), other.value());
            let map = bcast_map(a.shape(), b.shape(), "mul_bcast")?;
            let bd = b.data();
            let data = a.data().iter().zip(&map).map(|(&x, &j)| x * bd[j]).collect();
            (Tensor::new(a.shape(), data)?, map)
        };
        Ok(self.graph().op(out, &[self, other], move |args| {
            let (a, b) = (args.inputs[0].data(), args.inputs[1].data());
            let g = args.grad.data();
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Tensor::zeros(args.inputs[1].shape());
            let gbd = gb.data_mut();
            for i in 0..g.len() {
                ga.push(g[i] * b[map[i]]);
                gbd[map[i]] += g[i] * a[i];
            }
            vec![Some(Tensor::new(args.grad.shape(), ga).expect("shape")), Some(gb)]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.tensor().reshape(shape)?;
        Ok(self.graph().op(out, &[self], |a| {
            vec![Some(a.grad.clone().reshape(a.inputs[0].shape()).expect("shape"))]
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let out = {
            let x = self.value();
            let mut seen = vec![false; x.rank()];
            if axes.len() != x.rank() || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
                return Err(invalid(format!("permute: bad axes {axes:?} for {:?}", x.shape())));
            }
            permute_tensor(&x, axes)
        };
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.graph().op(out, &[self], move |a| {
            vec![Some(permute_tensor(a.grad, &inverse))]
        }))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let out = {
            let x = self.value();
            check_axis(x.shape(), axis, "narrow")?;
            if len == 0 || start + len > x.shape()[axis] {
                return Err(invalid(format!(
                    "narrow: range {start}..{} outside axis of size {}",
                    start + len,
                    x.shape()[axis]
                )));
            }
            let (outer, dim, inner) = split_axis(x.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[(o * dim + start) * inner..(o * dim + start + len) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        Ok(self.graph().op(out, &[self], move |a| {
            let mut gx = Tensor::zeros(a.inputs[0].shape());
            let (outer, dim, inner) = split_axis(a.inputs[0].shape(), axis);
            let g = a.grad.data();
            for o in 0..outer {
                gx.data_mut()[(o * dim + start) * inner..(o * dim + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let graph = first.graph();
        let (out, sizes) = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let base = values[0].shape().to_vec();
            check_axis(&base, axis, "concat")?;
            for v in &values[1..] {
                let s = v.shape();
                if s.len() != base.len()
                    || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(invalid(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
                }
            }
            let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
            let total: usize = sizes.iter().sum();
            let (outer, _, inner) = split_axis(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (v, &s) in values.iter().zip(&sizes) {
                    data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            (Tensor::new(&shape, data)?, sizes)
        };
        Ok(graph.op(out, parts, move |a| {
            let (outer, total, inner) = split_axis(a.grad.shape(), axis);
            let g = a.grad.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (input, &s) in a.inputs.iter().zip(&sizes) {
                let mut data = Vec::with_capacity(outer * s * inner);
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    data.extend_from_slice(&g[base..base + s * inner]);
                }
                offset += s;
                grads.push(Some(Tensor::new(input.shape(), data).expect("shape")));
            }
            grads
        }))
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.graph().op(out, &[self], |a| {
            vec![Some(Tensor::full(a.inputs[0].shape(), a.grad.data()[0]))]
        })
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = T::c(self.value().len() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Maximum along `axis`, keeping it with size 1. Ties route the gradient
    /// to the first maximal entry.
    pub fn max_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let (out, argmax) = {
            let x = self.value();
            check_axis(x.shape(), axis, "max_axis")?;
            let (outer, dim, inner) = split_axis(x.shape(), axis);
            let xd = x.data();
            let mut data = Vec::with_capacity(outer * inner);
            let mut argmax = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = o * dim * inner + i;
                    for k in 1..dim {
                        let j = (o * dim + k) * inner + i;
                        if xd[j] > xd[best] {
                            best = j;
                        }
                    }
                    data.push(xd[best]);
                    argmax.push(best);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = 1;
            (Tensor::new(&shape, data)?, argmax)
        };
        Ok(self.graph().op(out, &[self], move |a| {
            let mut gx = Tensor::zeros(a.inputs[0].shape());
            for (&j, &g) in argmax.iter().zip(a.grad.data()) {
                gx.data_mut()[j] += g;
            }
            vec![Some(gx)]
        }))
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let out = {
            let x = self.value();
            check_axis(x.shape(), axis, "mean_axis")?;
            let (outer, dim, inner) = split_axis(x.shape(), axis);
            let scale = T::one() / T::c(dim as f64);
            let xd = x.data();
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..dim {
                    let row = &xd[(o * dim + k) * inner..][..inner];
                    for (acc, &v) in data[o * inner..][..inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            data.iter_mut().for_each(|v| *v *= scale);
            let mut shape = x.shape().to_vec();
            shape[axis] = 1;
            Tensor::new(&shape, data)?
        };
        Ok(self.graph().op(out, &[self], move |a| {
            let shape = a.inputs[0].shape();
            let (outer, dim, inner) = split_axis(shape, axis);
            let scale = T::one() / T::c(dim as f64);
            let g = a.grad.data();
            let mut data = Vec::with_capacity(outer * dim * inner);
            for o in 0..outer {
                for _ in 0..dim {
                    data.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                }
            }
            vec![Some(Tensor::new(shape, data).expect("shape"))]
        }))
    }

    fn check_nchw(&self, what: &str) -> Result<[usize; 4]> {
        match self.shape()[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(invalid(format!("{what} expects [N,C,H,W], got {s:?}"))),
        }
    }

    /// `[N,C,H,W] → [N,C,1,1]`
    pub fn global_max_pool(self) -> Result<Var<'g, T>> {
        let [n, c, h, w] = self.check_nchw("global_max_pool")?;
        self.reshape(&[n, c, h * w])?.max_axis(2)?.reshape(&[n, c, 1, 1])
    }

    /// `[N,C,H,W] → [N,C,1,1]`
    pub fn global_avg_pool(self) -> Result<Var<'g, T>> {
        let [n, c, h, w] = self.check_nchw("global_avg_pool")?;
        self.reshape(&[n, c, h * w])?.mean_axis(2)?.reshape(&[n, c, 1, 1])
    }

    /// `[N,C,H,W] → [N,1,H,W]`
    pub fn channel_max(self) -> Result<Var<'g, T>> {
        self.check_nchw("channel_max")?;
        self.max_axis(1)
    }

    /// `[N,C,H,W] → [N,1,H,W]`
    pub fn channel_mean(self) -> Result<Var<'g, T>> {
        self.check_nchw("channel_mean")?;
        self.mean_axis(1)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let out = {
            let x = self.value();
            check_axis(x.shape(), axis, "softmax")?;
            softmax_tensor(&x, axis)
        };
        Ok(self.graph().op(out, &[self], move |a| {
            let (outer, dim, inner) = split_axis(a.output.shape(), axis);
            let (y, g) = (a.output.data(), a.grad.data());
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * dim + k) * inner + i;
                    let dot: T = (0..dim).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..dim {
                        gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(a.output.shape(), gx).expect("shape"))]
        }))
    }

    /// `x[..., in] · Wᵀ + b` with `weight: [out, in]`, `bias: [out]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let (out, rows, fan_in, fan_out) = {
            let (x, w) = (self.value(), weight.value());
            let &[fan_out, fan_in] = w.shape() else {
                return Err(invalid(format!("linear weight must be [out,in], got {:?}", w.shape())));
            };
            if x.shape().last() != Some(&fan_in) {
                return Err(invalid(format!("linear: input {:?} does not end in {fan_in}", x.shape())));
            }
            let rows = x.len() / fan_in;
            let mut y = vec![T::zero(); rows * fan_out];
            if let Some(b) = bias {
                let b = b.value();
                if b.shape() != [fan_out] {
                    return Err(invalid(format!("linear bias must be [{fan_out}], got {:?}", b.shape())));
                }
                for row in y.chunks_mut(fan_out) {
                    row.copy_from_slice(b.data());
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                rows, fan_in, fan_out, T::one(),
                x.data(), fan_in as isize, 1,
                w.data(), 1, fan_in as isize,
                beta, &mut y, fan_out as isize, 1,
            );
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = fan_out;
            (Tensor::new(&shape, y)?, rows, fan_in, fan_out)
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.graph().op(out, &inputs, move |a| {
            let (x, w, g) = (a.inputs[0], a.inputs[1], a.grad.data());
            let mut gx = vec![T::zero(); rows * fan_in];
            T::gemm(
                rows, fan_out, fan_in, T::one(),
                g, fan_out as isize, 1,
                w.data(), fan_in as isize, 1,
                T::zero(), &mut gx, fan_in as isize, 1,
            );
            let mut gw = vec![T::zero(); fan_out * fan_in];
            T::gemm(
                fan_out, rows, fan_in, T::one(),
                g, 1, fan_out as isize,
                x.data(), fan_in as isize, 1,
                T::zero(), &mut gw, fan_in as isize, 1,
            );
            let mut grads = vec![
                Some(Tensor::new(x.shape(), gx).expect("shape")),
                Some(Tensor::new(w.shape(), gw).expect("shape")),
            ];
            if a.inputs.len() == 3 {
                let mut gb = vec![T::zero(); fan_out];
                for row in g.chunks(fan_out) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads.push(Some(Tensor::new(&[fan_out], gb).expect("shape")));
            }
            grads
        }))
    }

    /// Normalizes to zero mean and unit variance along `axis`, then applies
    /// per-entry `gain` and `offset` (both of shape `[dim]`).
    pub fn layer_norm(self, gain: Var<'g, T>, offset: Var<'g, T>, eps: T, axis: usize) -> Result<Var<'g, T>> {
        let out = {
            let (x, gn, of) = (self.value(), gain.value(), offset.value());
            check_axis(x.shape(), axis, "layer_norm")?;
            let (outer, dim, inner) = split_axis(x.shape(), axis);
            if gn.shape() != [dim] || of.shape() != [dim] {
                return Err(invalid(format!(
                    "layer_norm: gain/offset must be [{dim}], got {:?}/{:?}",
                    gn.shape(),
                    of.shape()
                )));
            }
            let mut y = vec![T::zero(); x.len()];
            for_each_lane(outer, dim, inner, |lane| {
                let (mean, rstd) = lane_moments(x.data(), lane, eps);
                for (k, &j) in lane.iter().enumerate() {
                    y[j] = (x.data()[j] - mean) * rstd * gn.data()[k] + of.data()[k];
                }
            });
            Tensor::new(x.shape(), y)?
        };
        Ok(self.graph().op(out, &[self, gain, offset], move |a| {
            let (x, gn, g) = (a.inputs[0].data(), a.inputs[1].data(), a.grad.data());
            let (outer, dim, inner) = split_axis(a.inputs[0].shape(), axis);
            let mut gx = vec![T::zero(); x.len()];
            let mut ggain = vec![T::zero(); dim];
            let mut goff = vec![T::zero(); dim];
            let inv_dim = T::one() / T::c(dim as f64);
            for_each_lane(outer, dim, inner, |lane| {
                let (mean, rstd) = lane_moments(x, lane, eps);
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for (k, &j) in lane.iter().enumerate() {
                    let xhat = (x[j] - mean) * rstd;
                    let d = g[j] * gn[k];
                    ggain[k] += g[j] * xhat;
                    goff[k] += g[j];
                    sum_d += d;
                    sum_dx += d * xhat;
                }
                for (k, &j) in lane.iter().enumerate() {
                    let xhat = (x[j] - mean) * rstd;
                    let d = g[j] * gn[k];
                    gx[j] = rstd * (d - sum_d * inv_dim - xhat * sum_dx * inv_dim);
                }
            });
            vec![
                Some(Tensor::new(a.inputs[0].shape(), gx).expect("shape")),
                Some(Tensor::new(&[dim], ggain).expect("shape")),
                Some(Tensor::new(&[dim], goff).expect("shape")),
            ]
        }))
    }

    /// Bilinear ×2 upsampling of `[N,C,H,W]` with half-pixel centers
    /// (`align_corners = false`).
    pub fn upsample_bilinear2x(self) -> Result<Var<'g, T>> {
        let [n, c, h, w] = self.check_nchw("upsample_bilinear2x")?;
        let rows = bilinear_taps::<T>(h);
        let cols = bilinear_taps::<T>(w);
        let out = {
            let x = self.value();
            let xd = x.data();
            let mut y = Vec::with_capacity(n * c * 4 * h * w);
            for plane in xd.chunks(h * w) {
                for &(r0, r1, lr) in &rows {
                    for &(c0, c1, lc) in &cols {
                        let top = plane[r0 * w + c0] * (T::one() - lc) + plane[r0 * w + c1] * lc;
                        let bot = plane[r1 * w + c0] * (T::one() - lc) + plane[r1 * w + c1] * lc;
                        y.push(top * (T::one() - lr) + bot * lr);
                    }
                }
            }
            Tensor::new(&[n, c, 2 * h, 2 * w], y)?
        };
        Ok(self.graph().op(out, &[self], move |a| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (plane, gplane) in gx.data_mut().chunks_mut(h * w).zip(a.grad.data().chunks(4 * h * w)) {
                let mut it = gplane.iter();
                for &(r0, r1, lr) in &rows {
                    for &(c0, c1, lc) in &cols {
                        let g = *it.next().expect("grad length");
                        let (gt, gb) = (g * (T::one() - lr), g * lr);
                        plane[r0 * w + c0] += gt * (T::one() - lc);
                        plane[r0 * w + c1] += gt * lc;
                        plane[r1 * w + c0] += gb * (T::one() - lc);
                        plane[r1 * w + c1] += gb * lc;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour ×2 upsampling of `[N,C,H,W]`.
    pub fn upsample_nearest2x(self) -> Result<Var<'g, T>> {
        let [n, c, h, w] = self.check_nchw("upsample_nearest2x")?;
        let out = {
            let x = self.value();
            let mut y = Vec::with_capacity(n * c * 4 * h * w);
            for plane in x.data().chunks(h * w) {
                for r in 0..2 * h {
                    y.extend((0..2 * w).map(|col| plane[(r / 2) * w + col / 2]));
                }
            }
            Tensor::new(&[n, c, 2 * h, 2 * w], y)?
        };
        Ok(self.graph().op(out, &[self], move |a| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (plane, gplane) in gx.data_mut().chunks_mut(h * w).zip(a.grad.data().chunks(4 * h * w)) {
                for r in 0..2 * h {
                    for col in 0..2 * w {
                        plane[(r / 2) * w + col / 2] += gplane[r * 2 * w + col];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `[N,C,H,W] → [N,4,C,L]` along the four orders of `dirs`.
    pub fn scan_expand(self, dirs: &Arc<DirectionSet>) -> Result<Var<'g, T>> {
        let out = scan::expand(&self.value(), dirs)?;
        let dirs = Arc::clone(dirs);
        Ok(self.graph().op(out, &[self], move |a| {
            vec![Some(scan::merge(a.grad, &dirs).expect("shape"))]
        }))
    }

    /// `[N,4,C,L] → [N,C,H,W]`, summing the four inverse-permuted sequences.
    pub fn scan_merge(self, dirs: &Arc<DirectionSet>) -> Result<Var<'g, T>> {
        let out = scan::merge(&self.value(), dirs)?;
        let dirs = Arc::clone(dirs);
        Ok(self.graph().op(out, &[self], move |a| {
            vec![Some(scan::expand(a.grad, &dirs).expect("shape"))]
        }))
    }
}

/// Source taps for one axis of ×2 bilinear upsampling.
fn bilinear_taps<T: Real>(size: usize) -> Vec<(usize, usize, T)> {
    (0..2 * size)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, T::c(src - i0 as f64))
        })
        .collect()
}

fn for_each_lane(outer: usize, dim: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut lane = vec![0; dim];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = (o * dim + k) * inner + i;
            }
            f(&lane);
        }
    }
}

fn lane_moments<T: Real>(x: &[T], lane: &[usize], eps: T) -> (T, T) {
    let n = T::c(lane.len() as f64);
    let mean = lane.iter().map(|&j| x[j]).sum::<T>() / n;
    let var = lane.iter().map(|&j| (x[j] - mean) * (x[j] - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let in_strides = super::tensor::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let n = x.len();
    let xd = x.data();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(xd[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, data).expect("permuted shape")
}

pub(crate) fn softmax_tensor<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * dim + k) * inner + i;
            let m = (0..dim).map(|k| xd[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..dim {
                let e = (xd[idx(k)] - m).exp();
                y[idx(k)] = e;
                z += e;
            }
            for k in 0..dim {
                y[idx(k)] /= z;
            }
        }
    }
    Tensor::new(x.shape(), y).expect("shape")
}

impl<T: Real> Graph<T> {
    /// Convenience: constant from raw values.
    pub fn constant_from(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }
}
