//! Visual state-space block, shared by the cross-scan (VSS) and snake-scan
//! (SnakeVSS) branches. The two differ only in the [`DirectionSet`] passed
//! at call time.
//!
//! ```text
//! x ─ in_proj ─ dwconv3×3 ─ SiLU ─ expand ─ 4× selective scan ─ merge ─ norm ─┐
//!  └ gate_proj ─ SiLU ──────────────────────────────────────────────────── × ─ out_proj
//! ```

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::layers::{to_map, to_tokens, Conv, Linear, Norm};
use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv2dSpec, ParamStore, Real, Var};
use crate::scan::DirectionSet;
use crate::ssm::{selective_scan, Discretization, SsmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VssConfig {
    /// Inner width is `expand · C`.
    pub expand: usize,
    pub state_dim: usize,
    /// Rank of the Δ projection; `0` picks `ceil(C / 16)`.
    pub dt_rank: usize,
    pub mode: Discretization,
}

impl Default for VssConfig {
    fn default() -> Self {
        VssConfig {
            expand: 2,
            state_dim: 8,
            dt_rank: 0,
            mode: Discretization::Zoh,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VssWeights {
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub dw_conv: Conv,
    /// One independent parameter set per scan direction.
    pub ssm: [SsmParams; 4],
    pub out_norm: Norm,
    pub out_proj: Linear,
    pub channels: usize,
    pub inner: usize,
}

impl VssWeights {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: VssConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let inner = cfg.expand * channels;
        let dt_rank = if cfg.dt_rank == 0 {
            channels.div_ceil(16)
        } else {
            cfg.dt_rank
        };
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), channels, inner, false, rng);
        let gate_proj = Linear::new(store, &format!("{name}.gate_proj"), channels, inner, false, rng);
        let dw_conv = Conv::new(
            store,
            &format!("{name}.dw_conv"),
            inner,
            inner,
            3,
            Conv2dSpec::new(1, 1, inner),
            true,
            rng,
        );
        let ssm = [0, 1, 2, 3].map(|k| {
            SsmParams::new(
                store,
                &format!("{name}.ssm{k}"),
                inner,
                cfg.state_dim,
                dt_rank,
                cfg.mode,
                rng,
            )
        });
        VssWeights {
            in_proj,
            gate_proj,
            dw_conv,
            ssm,
            out_norm: Norm::new(store, &format!("{name}.out_norm"), inner),
            out_proj: Linear::new(store, &format!("{name}.out_proj"), inner, channels, true, rng),
            channels,
            inner,
        }
    }
}

pub fn vss_forward<'g, T: Real>(
    x: Var<'g, T>,
    w: &VssWeights,
    dirs: &Arc<DirectionSet>,
    p: &Bound<'g, T>,
) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let &[n, c, h, wd] = shape.as_slice() else {
        return Err(invalid(format!("VSS expects [N,C,H,W], got {shape:?}")));
    };
    if c != w.channels {
        return Err(invalid(format!("VSS built for {} channels, got {c}", w.channels)));
    }
    if (h, wd) != (dirs.height(), dirs.width()) {
        return Err(invalid(format!(
            "VSS input is {h}x{wd} but scan directions are {}x{}",
            dirs.height(),
            dirs.width()
        )));
    }
    let (d, l) = (w.inner, h * wd);
    let tokens = to_tokens(x)?;
    let inner = to_map(w.in_proj.forward(tokens, p)?)?;
    let inner = w.dw_conv.forward(inner, p)?.silu();

    let seqs = inner.scan_expand(dirs)?;
    let scanned = w
        .ssm
        .iter()
        .enumerate()
        .map(|(k, params)| {
            let seq = seqs.narrow(1, k, 1)?.reshape(&[n, d, l])?.permute(&[0, 2, 1])?;
            selective_scan(seq, params, p)?
                .permute(&[0, 2, 1])?
                .reshape(&[n, 1, d, l])
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = Var::concat(&scanned, 1)?.scan_merge(dirs)?;

    let y = w.out_norm.forward(to_tokens(merged)?, p, 3)?;
    let gate = w.gate_proj.forward(tokens, p)?.silu();
    to_map(w.out_proj.forward(y.mul(gate)?, p)?)
}
