//! Parameter-holding wrappers around the raw tape ops.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{fan_in_uniform, Bound, Conv2dSpec, ParamId, ParamStore, Real, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[fan_out, fan_in], fan_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Linear { weight, bias }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>, p: &Bound<'g, T>) -> Result<Var<'g, T>> {
        x.linear(p.get(self.weight), self.bias.map(|b| p.get(b)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cin_g = cin / spec.groups;
        let fan_in = cin_g * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[cout, cin_g, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv { weight, bias, spec }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>, p: &Bound<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.spec)
    }
}

/// Layer normalization with learnable gain and offset.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one())),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[dim])),
        }
    }

    /// Normalizes along `axis` (1 for `[N,C,H,W]` maps, the last axis for
    /// token-form tensors).
    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>, p: &Bound<'g, T>, axis: usize) -> Result<Var<'g, T>> {
        x.layer_norm(p.get(self.gain), p.get(self.offset), T::c(NORM_EPS), axis)
    }
}

/// `[N,C,H,W] → [N,H,W,C]`
pub fn to_tokens<T: Real>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    x.permute(&[0, 2, 3, 1])
}

/// `[N,H,W,C] → [N,C,H,W]`
pub fn to_map<T: Real>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    x.permute(&[0, 3, 1, 2])
}
