//! Three-branch block: a convolutional branch, a cross-scan VSS branch and a
//! snake-scan VSS branch, each gated by its own SCA, summed, added to the
//! input through stochastic depth and followed by a residual MLP.
//!
//! ```text
//! y   = x + DropPath(SCA(conv(Norm(x))) + SCA(SnakeVSS(x)) + SCA(VSS(x)))
//! out = y + MLP(Norm(y))
//! ```

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{to_map, to_tokens, Conv, Linear, Norm};
use super::sca::{sca_forward, ScaConfig, ScaWeights};
use super::vss::{vss_forward, VssConfig, VssWeights};
use crate::error::{invalid, Result};
use crate::nn::{drop_path, Bound, Conv2dSpec, ParamStore, Real, Var};
use crate::scan::DirectionSet;

/// Which branches a block carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchToggles {
    pub cross: bool,
    pub snake: bool,
    pub conv: bool,
    pub sca: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        BranchToggles {
            cross: true,
            snake: true,
            conv: true,
            sca: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScvssConfig {
    pub branches: BranchToggles,
    pub vss: VssConfig,
    pub sca: ScaConfig,
    /// MLP hidden width is `mlp_ratio · C`.
    pub mlp_ratio: usize,
    pub drop_path: f64,
}

impl Default for ScvssConfig {
    fn default() -> Self {
        ScvssConfig {
            branches: BranchToggles::default(),
            vss: VssConfig::default(),
            sca: ScaConfig::default(),
            mlp_ratio: 4,
            drop_path: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvBranch {
    pub norm: Norm,
    pub conv1: Conv,
    pub conv2: Conv,
}

/// A branch output paired with its optional attention.
#[derive(Debug, Clone)]
pub struct Branch<W> {
    pub weights: W,
    pub sca: Option<ScaWeights>,
}

#[derive(Debug, Clone)]
pub struct ScvssWeights {
    pub conv: Option<Branch<ConvBranch>>,
    pub snake: Option<Branch<VssWeights>>,
    pub cross: Option<Branch<VssWeights>>,
    pub mlp_norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub drop_path: f64,
    pub channels: usize,
}

impl ScvssWeights {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &ScvssConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let b = cfg.branches;
        if !(b.cross || b.snake || b.conv) {
            return Err(invalid("a block needs at least one of the cross, snake or conv branches"));
        }
        let c = channels;
        let sca = |store: &mut ParamStore<T>, branch: &str, rng: &mut ChaCha8Rng| {
            b.sca
                .then(|| ScaWeights::new(store, &format!("{name}.{branch}.sca"), c, cfg.sca, rng))
        };
        let conv = if b.conv {
            let weights = ConvBranch {
                norm: Norm::new(store, &format!("{name}.conv.norm"), c),
                conv1: Conv::new(store, &format!("{name}.conv.conv1"), c, c, 3, Conv2dSpec::new(1, 1, 1), true, rng),
                conv2: Conv::new(store, &format!("{name}.conv.conv2"), c, c, 3, Conv2dSpec::new(1, 1, 1), true, rng),
            };
            Some(Branch { weights, sca: sca(store, "conv", rng) })
        } else {
            None
        };
        let snake = if b.snake {
            let weights = VssWeights::new(store, &format!("{name}.snake"), c, cfg.vss, rng);
            Some(Branch { weights, sca: sca(store, "snake", rng) })
        } else {
            None
        };
        let cross = if b.cross {
            let weights = VssWeights::new(store, &format!("{name}.cross"), c, cfg.vss, rng);
            Some(Branch { weights, sca: sca(store, "cross", rng) })
        } else {
            None
        };
        let hidden = cfg.mlp_ratio * c;
        Ok(ScvssWeights {
            conv,
            snake,
            cross,
            mlp_norm: Norm::new(store, &format!("{name}.mlp.norm"), c),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), c, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, c, true, rng),
            drop_path: cfg.drop_path,
            channels: c,
        })
    }
}

fn gated<'g, T: Real>(x: Var<'g, T>, sca: &Option<ScaWeights>, p: &Bound<'g, T>) -> Result<Var<'g, T>> {
    match sca {
        Some(w) => sca_forward(x, w, p),
        None => Ok(x),
    }
}

pub fn conv_branch_forward<'g, T: Real>(x: Var<'g, T>, w: &ConvBranch, p: &Bound<'g, T>) -> Result<Var<'g, T>> {
    let y = w.norm.forward(x, p, 1)?;
    let y = w.conv1.forward(y, p)?.silu();
    w.conv2.forward(y, p)
}

/// Scan directions for the two VSS branches of a block.
#[derive(Debug, Clone)]
pub struct BlockDirections {
    pub cross: Arc<DirectionSet>,
    pub snake: Arc<DirectionSet>,
}

impl BlockDirections {
    pub fn standard(height: usize, width: usize) -> Result<Self> {
        Ok(BlockDirections {
            cross: Arc::new(DirectionSet::cross(height, width)?),
            snake: Arc::new(DirectionSet::snake(height, width)?),
        })
    }
}

pub fn scvss_forward<'g, T: Real>(
    x: Var<'g, T>,
    w: &ScvssWeights,
    dirs: &BlockDirections,
    p: &Bound<'g, T>,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var<'g, T>> {
    let mut branches = Vec::with_capacity(3);
    if let Some(b) = &w.conv {
        branches.push(gated(conv_branch_forward(x, &b.weights, p)?, &b.sca, p)?);
    }
    if let Some(b) = &w.snake {
        branches.push(gated(vss_forward(x, &b.weights, &dirs.snake, p)?, &b.sca, p)?);
    }
    if let Some(b) = &w.cross {
        branches.push(gated(vss_forward(x, &b.weights, &dirs.cross, p)?, &b.sca, p)?);
    }
    let mut sum = branches[0];
    for &b in &branches[1..] {
        sum = sum.add(b)?;
    }
    let y = x.add(drop_path(sum, w.drop_path, training, rng)?)?;

    let tokens = to_tokens(y)?;
    let hidden = w.fc1.forward(w.mlp_norm.forward(tokens, p, 3)?, p)?.silu();
    let mlp = to_map(w.fc2.forward(hidden, p)?)?;
    y.add(mlp)
}
