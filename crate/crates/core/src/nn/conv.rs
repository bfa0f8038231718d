use std::borrow::Cow;

use super::graph::Var;
use super::tensor::{Real, Tensor};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec::new(1, 0, 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Input rows/cols sampled by output position `o` and kernel tap `k`.
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }

    /// `[Kg, P]` patch matrix of sample `n`, group `g`.
    fn im2col<'a, T: Real>(&self, x: &'a [T], n: usize, g: usize) -> Cow<'a, [T]> {
        let plane = self.h * self.w;
        let base = (n * self.cin + g * self.cin_g()) * plane;
        if self.is_pointwise() {
            return Cow::Borrowed(&x[base..base + self.cin_g() * plane]);
        }
        let mut cols = vec![T::zero(); self.k() * self.p()];
        let mut row = 0;
        for ci in 0..self.cin_g() {
            let src = &x[base + ci * plane..base + (ci + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * self.p()..(row + 1) * self.p()];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                dst[oy * self.wo + ox] = src[iy * self.w + ix];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        Cow::Owned(cols)
    }

    fn col2im<T: Real>(&self, cols: &[T], gx: &mut [T], n: usize, g: usize) {
        let plane = self.h * self.w;
        let base = (n * self.cin + g * self.cin_g()) * plane;
        if self.is_pointwise() {
            for (d, &s) in gx[base..base + self.cin_g() * plane].iter_mut().zip(cols) {
                *d += s;
            }
            return;
        }
        let mut row = 0;
        for ci in 0..self.cin_g() {
            let dst = &mut gx[base + ci * plane..base + (ci + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * self.p()..(row + 1) * self.p()];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                dst[iy * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Geometry> {
    let (&[n, cin, h, wd], &[cout, cin_g, kh, kw]) = (x, w) else {
        return Err(invalid(format!(
            "conv2d expects input [N,C,H,W] and weight [O,I/g,kh,kw], got {x:?} and {w:?}"
        )));
    };
    if spec.groups == 0 || spec.stride == 0 {
        return Err(invalid("conv2d: groups and stride must be positive"));
    }
    if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
        return Err(invalid(format!(
            "conv2d: {cin} input / {cout} output channels incompatible with groups={} and weight {w:?}",
            spec.groups
        )));
    }
    if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
        return Err(invalid(format!(
            "conv2d: {kh}x{kw} kernel does not fit {h}x{wd} input with padding {}",
            spec.padding
        )));
    }
    Ok(Geometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
        wo: (wd + 2 * spec.padding - kw) / spec.stride + 1,
        spec,
    })
}

impl<'g, T: Real> Var<'g, T> {
    /// 2D cross-correlation. `weight: [Cout, Cin/groups, kh, kw]`,
    /// `bias: [Cout]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, spec: Conv2dSpec) -> Result<Var<'g, T>> {
        let (out, geo) = {
            let (x, w) = (self.value(), weight.value());
            let geo = geometry(x.shape(), w.shape(), spec)?;
            let bias = bias.map(|b| b.value());
            if let Some(b) = &bias {
                if b.shape() != [geo.cout] {
                    return Err(invalid(format!("conv2d bias must be [{}], got {:?}", geo.cout, b.shape())));
                }
            }
            let (k, p, cout_g) = (geo.k(), geo.p(), geo.cout_g());
            let mut y = vec![T::zero(); geo.n * geo.cout * p];
            for n in 0..geo.n {
                for g in 0..spec.groups {
                    let cols = geo.im2col(x.data(), n, g);
                    let out = &mut y[(n * geo.cout + g * cout_g) * p..][..cout_g * p];
                    T::gemm(
                        cout_g, k, p, T::one(),
                        &w.data()[g * cout_g * k..], k as isize, 1,
                        &cols, p as isize, 1,
                        T::zero(), out, p as isize, 1,
                    );
                }
                if let Some(b) = &bias {
                    for (co, &bv) in b.data().iter().enumerate() {
                        for v in &mut y[(n * geo.cout + co) * p..][..p] {
                            *v += bv;
                        }
                    }
                }
            }
            (Tensor::new(&[geo.n, geo.cout, geo.ho, geo.wo], y)?, geo)
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.graph().op(out, &inputs, move |a| {
            let (x, w, gy) = (a.inputs[0].data(), a.inputs[1].data(), a.grad.data());
            let (k, p, cout_g) = (geo.k(), geo.p(), geo.cout_g());
            let mut gx = vec![T::zero(); x.len()];
            let mut gw = vec![T::zero(); w.len()];
            let mut gcols = vec![T::zero(); k * p];
            for n in 0..geo.n {
                for g in 0..geo.spec.groups {
                    let cols = geo.im2col(x, n, g);
                    let gout = &gy[(n * geo.cout + g * cout_g) * p..][..cout_g * p];
                    T::gemm(
                        cout_g, p, k, T::one(),
                        gout, p as isize, 1,
                        &cols, 1, p as isize,
                        T::one(), &mut gw[g * cout_g * k..][..cout_g * k], k as isize, 1,
                    );
                    T::gemm(
                        k, cout_g, p, T::one(),
                        &w[g * cout_g * k..], 1, k as isize,
                        gout, p as isize, 1,
                        T::zero(), &mut gcols, p as isize, 1,
                    );
                    geo.col2im(&gcols, &mut gx, n, g);
                }
            }
            let mut grads = vec![
                Some(Tensor::new(a.inputs[0].shape(), gx).expect("shape")),
                Some(Tensor::new(a.inputs[1].shape(), gw).expect("shape")),
            ];
            if a.inputs.len() == 3 {
                let mut gb = vec![T::zero(); geo.cout];
                for n in 0..geo.n {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        *acc += gy[(n * geo.cout + co) * p..][..p].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(Tensor::new(&[geo.cout], gb).expect("shape")));
            }
            grads
        }))
    }
}
