//! Spatial-and-channel attention.
//!
//! Two sigmoid gates applied in sequence:
//!
//! 1. a per-channel gate from the globally max- and average-pooled vectors,
//!    each passed through the same two-layer `FC → ReLU → FC` bottleneck and
//!    summed before the sigmoid;
//! 2. a per-pixel gate from a `k×k` convolution over the channel-wise max
//!    and mean of the first gate's output.
//!
//! Both gates lie in `(0, 1)`, so `|SCA(x)| ≤ |x|` elementwise.

use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, Linear};
use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv2dSpec, ParamStore, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaConfig {
    /// Squeeze ratio of the pooled-vector bottleneck.
    pub ratio: usize,
    /// Kernel size of the map-gate convolution (padding `kernel / 2`).
    pub kernel: usize,
}

impl Default for ScaConfig {
    fn default() -> Self {
        ScaConfig { ratio: 4, kernel: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct ScaWeights {
    pub fc1: Linear,
    pub fc2: Linear,
    pub conv: Conv,
    pub channels: usize,
}

impl ScaWeights {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: ScaConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = (channels / cfg.ratio).max(1);
        ScaWeights {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng),
            conv: Conv::new(
                store,
                &format!("{name}.conv"),
                2,
                1,
                cfg.kernel,
                Conv2dSpec::new(1, cfg.kernel / 2, 1),
                true,
                rng,
            ),
            channels,
        }
    }
}

pub fn sca_forward<'g, T: Real>(x: Var<'g, T>, w: &ScaWeights, p: &Bound<'g, T>) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let &[n, c, _, _] = shape.as_slice() else {
        return Err(invalid(format!("SCA expects [N,C,H,W], got {shape:?}")));
    };
    if c != w.channels {
        return Err(invalid(format!("SCA built for {} channels, got {c}", w.channels)));
    }
    let bottleneck = |v: Var<'g, T>| -> Result<Var<'g, T>> {
        let v = v.reshape(&[n, c])?;
        w.fc2.forward(w.fc1.forward(v, p)?.relu(), p)
    };
    let from_max = bottleneck(x.global_max_pool()?)?;
    let from_avg = bottleneck(x.global_avg_pool()?)?;
    let channel_gate = from_max.add(from_avg)?.sigmoid().reshape(&[n, c, 1, 1])?;
    let xs = x.mul_bcast(channel_gate)?;

    let stats = Var::concat(&[xs.channel_max()?, xs.channel_mean()?], 1)?;
    let map_gate = w.conv.forward(stats, p)?.sigmoid();
    xs.mul_bcast(map_gate)
}
