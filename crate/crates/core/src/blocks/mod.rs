//! Composite blocks assembled from the tape primitives.

mod decoder;
mod layers;
mod sca;
mod scvss;
mod vss;

pub use decoder::{aux_head, decoder_block, seg_head, ConvNormRelu, DecoderWeights, SegHeadWeights, Upsample};
pub use layers::{to_map, to_tokens, Conv, Linear, Norm, NORM_EPS};
pub use sca::{sca_forward, ScaConfig, ScaWeights};
pub use scvss::{
    conv_branch_forward, scvss_forward, BlockDirections, Branch, BranchToggles, ConvBranch, ScvssConfig,
    ScvssWeights,
};
pub use vss::{vss_forward, VssConfig, VssWeights};
