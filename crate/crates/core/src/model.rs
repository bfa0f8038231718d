//! Encoder–decoder segmentation network.
//!
//! ```text
//! image ─ stem 4×4/4 ─ stage0 ─ down ─ stage1 ─ down ─ stage2 ─ down ─ stage3
//!   │                    │               │               │              │
//!   └ shallow 3×3/2      │               │               └──── dec0 ◄───┘
//!          │             │               └──────────────────── dec1 ◄ (aux H/8)
//!          │             └──────────────────────────────────── dec2 ◄ (aux H/4)
//!          └────────────────────────────────────────────────── dec3 ◄ (aux H/2)
//!                                                   upsample ─ seg head (H)
//! ```
//!
//! Every encoder stage is a stack of three-branch blocks; downsampling is a
//! pre-normalized 2×2 stride-2 convolution.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    aux_head, decoder_block, scvss_forward, seg_head, BlockDirections, BranchToggles, Conv, DecoderWeights,
    Norm, ScaConfig, ScvssConfig, ScvssWeights, SegHeadWeights, Upsample, VssConfig,
};
use crate::error::{config_err, Error, Result};
use crate::nn::{Bound, Conv2dSpec, Graph, ParamStore, Real, Tensor, Var};
use crate::scan::random_orders;
use crate::ssm::Discretization;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub state_dim: usize,
    /// Square input side; must be divisible by 32.
    pub input_size: usize,
    pub in_channels: usize,
    /// Stochastic depth rate of the last block; earlier blocks ramp up
    /// linearly from 0.
    pub drop_path_rate: f64,
    pub class_count: usize,
    pub use_cross_branch: bool,
    pub use_snake_branch: bool,
    pub use_conv_branch: bool,
    pub use_sca: bool,
    /// Replace the cross orders with seeded random orders.
    pub random_scan: bool,
    pub scan_seed: u64,
    pub mlp_ratio: usize,
    pub ssm_expand: usize,
    pub sca_ratio: usize,
    pub sca_kernel: usize,
    pub discretization: Discretization,
    pub upsample: Upsample,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_dims: [16, 32, 64, 128],
            stage_depths: [1, 1, 2, 1],
            state_dim: 8,
            input_size: 64,
            in_channels: 3,
            drop_path_rate: 0.1,
            class_count: 2,
            use_cross_branch: true,
            use_snake_branch: true,
            use_conv_branch: true,
            use_sca: true,
            random_scan: false,
            scan_seed: 0,
            mlp_ratio: 4,
            ssm_expand: 2,
            sca_ratio: 4,
            sca_kernel: 7,
            discretization: Discretization::Zoh,
            upsample: Upsample::Bilinear,
        }
    }
}

fn parse_list<const N: usize>(field: &str, value: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = value
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| config_err(field, e.to_string()))?;
    items
        .try_into()
        .map_err(|_| config_err(field, format!("expected {N} comma-separated integers")))
}

fn parse_value<V: std::str::FromStr>(field: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: V::Err| config_err(field, e.to_string()))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(config_err("input_size", "must be a positive multiple of 32"));
        }
        if self.stage_dims.iter().any(|&d| d == 0) {
            return Err(config_err("stage_dims", "widths must be positive"));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(config_err("stage_depths", "every stage needs at least one block"));
        }
        if self.state_dim == 0 {
            return Err(config_err("state_dim", "must be positive"));
        }
        if self.class_count != 2 {
            return Err(config_err("class_count", "only background/crack segmentation is supported"));
        }
        if self.in_channels == 0 {
            return Err(config_err("in_channels", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(config_err("drop_path_rate", "must be in [0, 1)"));
        }
        if !(self.use_cross_branch || self.use_snake_branch || self.use_conv_branch) {
            return Err(config_err("use_cross_branch", "at least one branch must be enabled"));
        }
        if self.mlp_ratio == 0 || self.ssm_expand == 0 || self.sca_ratio == 0 {
            return Err(config_err("mlp_ratio", "ratios must be positive"));
        }
        if self.sca_kernel % 2 == 0 {
            return Err(config_err("sca_kernel", "must be odd"));
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` when the key is
    /// not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "stage_dims" => self.stage_dims = parse_list(key, value)?,
            "stage_depths" => self.stage_depths = parse_list(key, value)?,
            "state_dim" => self.state_dim = parse_value(key, value)?,
            "input_size" => self.input_size = parse_value(key, value)?,
            "in_channels" => self.in_channels = parse_value(key, value)?,
            "drop_path_rate" => self.drop_path_rate = parse_value(key, value)?,
            "class_count" => self.class_count = parse_value(key, value)?,
            "use_cross_branch" => self.use_cross_branch = parse_value(key, value)?,
            "use_snake_branch" => self.use_snake_branch = parse_value(key, value)?,
            "use_conv_branch" => self.use_conv_branch = parse_value(key, value)?,
            "use_sca" => self.use_sca = parse_value(key, value)?,
            "random_scan" => self.random_scan = parse_value(key, value)?,
            "scan_seed" => self.scan_seed = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "ssm_expand" => self.ssm_expand = parse_value(key, value)?,
            "sca_ratio" => self.sca_ratio = parse_value(key, value)?,
            "sca_kernel" => self.sca_kernel = parse_value(key, value)?,
            "discretization" => {
                self.discretization = match value.trim() {
                    "zoh" => Discretization::Zoh,
                    "euler" => Discretization::Euler,
                    other => return Err(config_err(key, format!("expected zoh or euler, got `{other}`"))),
                }
            }
            "upsample" => {
                self.upsample = match value.trim() {
                    "bilinear" => Upsample::Bilinear,
                    "nearest" => Upsample::Nearest,
                    other => return Err(config_err(key, format!("expected bilinear or nearest, got `{other}`"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every setting as `(key, value)` in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("stage_dims".into(), list(&self.stage_dims)),
            ("stage_depths".into(), list(&self.stage_depths)),
            ("state_dim".into(), self.state_dim.to_string()),
            ("input_size".into(), self.input_size.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("drop_path_rate".into(), self.drop_path_rate.to_string()),
            ("class_count".into(), self.class_count.to_string()),
            ("use_cross_branch".into(), self.use_cross_branch.to_string()),
            ("use_snake_branch".into(), self.use_snake_branch.to_string()),
            ("use_conv_branch".into(), self.use_conv_branch.to_string()),
            ("use_sca".into(), self.use_sca.to_string()),
            ("random_scan".into(), self.random_scan.to_string()),
            ("scan_seed".into(), self.scan_seed.to_string()),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
            ("ssm_expand".into(), self.ssm_expand.to_string()),
            ("sca_ratio".into(), self.sca_ratio.to_string()),
            ("sca_kernel".into(), self.sca_kernel.to_string()),
            (
                "discretization".into(),
                match self.discretization {
                    Discretization::Zoh => "zoh",
                    Discretization::Euler => "euler",
                }
                .into(),
            ),
            (
                "upsample".into(),
                match self.upsample {
                    Upsample::Bilinear => "bilinear",
                    Upsample::Nearest => "nearest",
                }
                .into(),
            ),
        ]
    }

    fn block_config(&self, drop_path: f64) -> ScvssConfig {
        ScvssConfig {
            branches: BranchToggles {
                cross: self.use_cross_branch,
                snake: self.use_snake_branch,
                conv: self.use_conv_branch,
                sca: self.use_sca,
            },
            vss: VssConfig {
                expand: self.ssm_expand,
                state_dim: self.state_dim,
                dt_rank: 0,
                mode: self.discretization,
            },
            sca: ScaConfig {
                ratio: self.sca_ratio,
                kernel: self.sca_kernel,
            },
            mlp_ratio: self.mlp_ratio,
            drop_path,
        }
    }
}

#[derive(Debug, Clone)]
struct Downsample {
    norm: Norm,
    conv: Conv,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Option<Downsample>,
    blocks: Vec<ScvssWeights>,
    dirs: BlockDirections,
}

/// Network structure plus its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    stem: Conv,
    stem_norm: Norm,
    shallow: Conv,
    shallow_norm: Norm,
    stages: Vec<Stage>,
    decoders: Vec<DecoderWeights>,
    aux_heads: Vec<Conv>,
    head: SegHeadWeights,
}

/// Forward results: the full-resolution logits and the auxiliary
/// deep-supervision logits ordered coarse → fine (`H/8, H/4, H/2`).
pub struct ModelOutput<'g, T: Real> {
    pub logits_full: Var<'g, T>,
    pub aux_logits: Vec<Var<'g, T>>,
}

fn check_finite<'g, T: Real>(x: Var<'g, T>, layer: &str) -> Result<Var<'g, T>> {
    if x.value().is_finite() {
        Ok(x)
    } else {
        Err(Error::NumericFault {
            location: layer.to_string(),
            step: None,
        })
    }
}

/// Name prefix of parameters treated as pretrained (the encoder's cross-scan
/// VSS branches).
pub fn is_pretrained_analog(name: &str) -> bool {
    name.starts_with("encoder.") && name.contains(".cross.") && !name.contains(".cross.sca.")
}

impl<T: Real> Model<T> {
    /// Deterministic construction from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = config.stage_dims;
        let c_in = config.in_channels;
        let classes = config.class_count;

        let stem = Conv::new(&mut store, "stem.conv", c_in, dims[0], 4, Conv2dSpec::new(4, 0, 1), true, &mut rng);
        let stem_norm = Norm::new(&mut store, "stem.norm", dims[0]);
        let shallow = Conv::new(&mut store, "shallow.conv", c_in, dims[0], 3, Conv2dSpec::new(2, 1, 1), true, &mut rng);
        let shallow_norm = Norm::new(&mut store, "shallow.norm", dims[0]);

        let total_blocks: usize = config.stage_depths.iter().sum();
        let mut block_index = 0;
        let mut stages = Vec::with_capacity(4);
        for (i, (&dim, &depth)) in dims.iter().zip(&config.stage_depths).enumerate() {
            let side = config.input_size / (4 << i);
            let down = (i > 0).then(|| Downsample {
                norm: Norm::new(&mut store, &format!("encoder.down{i}.norm"), dims[i - 1]),
                conv: Conv::new(
                    &mut store,
                    &format!("encoder.down{i}.conv"),
                    dims[i - 1],
                    dim,
                    2,
                    Conv2dSpec::new(2, 0, 1),
                    true,
                    &mut rng,
                ),
            });
            let mut blocks = Vec::with_capacity(depth);
            for j in 0..depth {
                let rate = if total_blocks > 1 {
                    config.drop_path_rate * block_index as f64 / (total_blocks - 1) as f64
                } else {
                    config.drop_path_rate
                };
                block_index += 1;
                blocks.push(ScvssWeights::new(
                    &mut store,
                    &format!("encoder.stage{i}.block{j}"),
                    dim,
                    &config.block_config(rate),
                    &mut rng,
                )?);
            }
            let mut dirs = BlockDirections::standard(side, side)?;
            if config.random_scan {
                dirs.cross = Arc::new(random_orders(side, side, config.scan_seed)?);
            }
            stages.push(Stage { down, blocks, dirs });
        }

        // dec0..dec2 consume the encoder skips in reverse, dec3 the shallow skip.
        let mut decoders = Vec::with_capacity(4);
        for k in 0..4 {
            let (cin, skip, cout) = if k < 3 {
                (dims[3 - k], dims[2 - k], dims[2 - k])
            } else {
                (dims[0], dims[0], dims[0])
            };
            decoders.push(DecoderWeights::new(
                &mut store,
                &format!("decoder.block{k}"),
                cin,
                skip,
                cout,
                config.upsample,
                &mut rng,
            ));
        }
        let aux_heads = [(1, dims[1]), (2, dims[0]), (3, dims[0])]
            .iter()
            .map(|&(k, c)| aux_head(&mut store, &format!("decoder.aux{k}"), c, classes, &mut rng))
            .collect();
        let head = SegHeadWeights::new(&mut store, "head", dims[0], classes, &mut rng);

        for p in store.params_mut() {
            p.pretrained_analog = is_pretrained_analog(&p.name);
        }

        Ok(Model {
            config,
            params: store,
            stem,
            stem_norm,
            shallow,
            shallow_norm,
            stages,
            decoders,
            aux_heads,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Scan directions used by stage `i`.
    pub fn stage_directions(&self, i: usize) -> &BlockDirections {
        &self.stages[i].dirs
    }

    /// Runs the network on `images: [N, in_channels, S, S]`.
    pub fn forward<'g>(
        &self,
        images: Var<'g, T>,
        p: &Bound<'g, T>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutput<'g, T>> {
        let shape = images.shape();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != s || shape[3] != s {
            return Err(Error::InvalidArgument(format!(
                "model expects [N,{},{s},{s}] images, got {shape:?}",
                self.config.in_channels
            )));
        }
        let shallow = self.shallow_norm.forward(self.shallow.forward(images, p)?, p, 1)?.relu();
        let shallow = check_finite(shallow, "shallow")?;
        let mut x = self.stem_norm.forward(self.stem.forward(images, p)?, p, 1)?;
        x = check_finite(x, "stem")?;

        let mut skips = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(down) = &stage.down {
                x = down.conv.forward(down.norm.forward(x, p, 1)?, p)?;
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                x = scvss_forward(x, block, &stage.dirs, p, training, rng)?;
                x = check_finite(x, &format!("encoder.stage{i}.block{j}"))?;
            }
            skips.push(x);
        }

        let mut aux_logits = Vec::with_capacity(3);
        let mut y = skips[3];
        for (k, dec) in self.decoders.iter().enumerate() {
            let skip = if k < 3 { skips[2 - k] } else { shallow };
            y = check_finite(decoder_block(y, skip, dec, p)?, &format!("decoder.block{k}"))?;
            if k >= 1 {
                aux_logits.push(self.aux_heads[k - 1].forward(y, p)?);
            }
        }
        let full = seg_head(self.config.upsample.apply(y)?, &self.head, p)?;
        let logits_full = check_finite(full, "head")?;
        Ok(ModelOutput {
            logits_full,
            aux_logits,
        })
    }

    /// Full-resolution logits in evaluation mode, without recording
    /// gradients for parameters.
    pub fn predict_logits(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = bind_constants(&self.params, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(g.constant(images), &p, false, &mut rng)?;
        Ok(out.logits_full.tensor())
    }

    /// Writes the little-endian checkpoint format.
    pub fn save(&self, out: &mut impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config: String = self
            .config
            .entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(config.as_bytes());
        let ordered: BTreeMap<&str, &Tensor<T>> = self
            .params
            .params()
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        buf.extend_from_slice(&(ordered.len() as u32).to_le_bytes());
        for (name, value) in ordered {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(T::DTYPE_TAG);
            buf.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &d in value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in value.data() {
                v.to_le(&mut buf);
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Model::save`] with the same element
    /// type.
    pub fn load(input: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(4, format!("unsupported checkpoint version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config_at = r.pos;
        let text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| r.err(config_at, "config block is not UTF-8"))?;
        let mut config = ModelConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.err(config_at, format!("config line `{line}` lacks `=`")))?;
            if !config.set(k.trim(), v)? {
                return Err(r.err(config_at, format!("unknown config key `{k}`")));
            }
        }
        let mut model = Model::<T>::build(config, 0)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(r.err(r.pos, format!("checkpoint has {count} tensors, model needs {}", model.params.len())));
        }
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err(at, "parameter name is not UTF-8"))?
                .to_string();
            let tag = r.take(1)?[0];
            if tag != T::DTYPE_TAG {
                return Err(r.err(at, format!("`{name}` has dtype tag {tag}, expected {} ({})", T::DTYPE_TAG, T::NAME)));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| r.err(at, format!("unknown parameter `{name}`")))?;
            if model.params.get(id).value.shape() != shape.as_slice() {
                return Err(r.err(at, format!("`{name}` has shape {shape:?}, model expects {:?}", model.params.get(id).value.shape())));
            }
            let n: usize = shape.iter().product();
            let width = std::mem::size_of::<T>();
            let raw = r.take(n * width)?;
            let data = raw.chunks(width).map(T::from_le).collect();
            model.params.get_mut(id).value = Tensor::new(&shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after parameter table"));
        }
        Ok(model)
    }
}

/// Binds every parameter as a constant (inference only).
pub fn bind_constants<'g, T: Real>(store: &ParamStore<T>, g: &'g Graph<T>) -> Bound<'g, T> {
    let mut frozen = store.clone();
    for p in frozen.params_mut() {
        p.frozen = true;
    }
    frozen.bind(g)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMSS";
pub const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Directions for an arbitrary grid, mirroring what a stage would build.
pub fn directions_for(side: usize, config: &ModelConfig) -> Result<BlockDirections> {
    let mut dirs = BlockDirections::standard(side, side)?;
    if config.random_scan {
        dirs.cross = Arc::new(random_orders(side, side, config.scan_seed)?);
    }
    Ok(dirs)
}
