use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, Norm};
use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv2dSpec, ParamStore, Real, Var};

/// How decoder features are brought to the next scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

impl Upsample {
    pub fn apply<'g, T: Real>(self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            Upsample::Bilinear => x.upsample_bilinear2x(),
            Upsample::Nearest => x.upsample_nearest2x(),
        }
    }
}

/// `3×3 conv → channel norm → ReLU`
#[derive(Debug, Clone)]
pub struct ConvNormRelu {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvNormRelu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvNormRelu {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, 3, Conv2dSpec::new(1, 1, 1), true, rng),
            norm: Norm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>, p: &Bound<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.norm.forward(self.conv.forward(x, p)?, p, 1)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderWeights {
    /// 1×1 channel adjustment after upsampling.
    pub adjust: Conv,
    pub fuse1: ConvNormRelu,
    pub fuse2: ConvNormRelu,
    pub upsample: Upsample,
    pub channels: usize,
    pub skip_channels: usize,
}

impl DecoderWeights {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        skip_channels: usize,
        out_channels: usize,
        upsample: Upsample,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DecoderWeights {
            adjust: Conv::new(
                store,
                &format!("{name}.adjust"),
                channels,
                out_channels,
                1,
                Conv2dSpec::default(),
                true,
                rng,
            ),
            fuse1: ConvNormRelu::new(store, &format!("{name}.fuse1"), out_channels + skip_channels, out_channels, rng),
            fuse2: ConvNormRelu::new(store, &format!("{name}.fuse2"), out_channels, out_channels, rng),
            upsample,
            channels,
            skip_channels,
        }
    }
}

/// Upsample ×2, adjust channels, concatenate the skip, fuse with two
/// conv-norm-ReLU layers.
pub fn decoder_block<'g, T: Real>(
    x: Var<'g, T>,
    skip: Var<'g, T>,
    w: &DecoderWeights,
    p: &Bound<'g, T>,
) -> Result<Var<'g, T>> {
    let (xs, ss) = (x.shape(), skip.shape());
    let (&[n, c, h, wd], &[sn, sc, sh, sw]) = (xs.as_slice(), ss.as_slice()) else {
        return Err(invalid(format!("decoder expects [N,C,H,W] inputs, got {xs:?} and {ss:?}")));
    };
    if sn != n || sh != 2 * h || sw != 2 * wd {
        return Err(invalid(format!(
            "decoder skip must be [{n},*,{},{}], got {ss:?}",
            2 * h,
            2 * wd
        )));
    }
    if c != w.channels || sc != w.skip_channels {
        return Err(invalid(format!(
            "decoder built for {}+{} channels, got {c}+{sc}",
            w.channels, w.skip_channels
        )));
    }
    let up = w.adjust.forward(w.upsample.apply(x)?, p)?;
    let fused = Var::concat(&[up, skip], 1)?;
    w.fuse2.forward(w.fuse1.forward(fused, p)?, p)
}

/// Two conv-norm-ReLU layers then a 1×1 convolution to class logits.
#[derive(Debug, Clone)]
pub struct SegHeadWeights {
    pub layer1: ConvNormRelu,
    pub layer2: ConvNormRelu,
    pub classify: Conv,
}

impl SegHeadWeights {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SegHeadWeights {
            layer1: ConvNormRelu::new(store, &format!("{name}.layer1"), channels, channels, rng),
            layer2: ConvNormRelu::new(store, &format!("{name}.layer2"), channels, channels, rng),
            classify: Conv::new(store, &format!("{name}.classify"), channels, classes, 1, Conv2dSpec::default(), true, rng),
        }
    }
}

pub fn seg_head<'g, T: Real>(x: Var<'g, T>, w: &SegHeadWeights, p: &Bound<'g, T>) -> Result<Var<'g, T>> {
    let y = w.layer2.forward(w.layer1.forward(x, p)?, p)?;
    w.classify.forward(y, p)
}

/// Deep-supervision head: a single 1×1 convolution.
pub fn aux_head<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Conv {
    Conv::new(store, name, channels, classes, 1, Conv2dSpec::default(), true, rng)
}
