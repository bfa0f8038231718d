//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or malformed
//! input file, 3 numeric fault.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::data::{self, GenSpec, PnmImage, Split};
use crate::error::{config_err, invalid, io_at, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scan::{order_for, ScanKind, ScanOrder};
use crate::train::{self, predict_masks, stack_batch, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "crackmamba", version, about = "Crack segmentation with state-space scan blocks")]
pub struct Cli {
    /// Threads used to evaluate images in parallel (training stays single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic crack dataset.
    GenData {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Side length of the square images.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Dataset seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of samples without cracks.
        #[arg(long, default_value_t = 0.0)]
        crack_free_frac: f64,
        /// Fraction of samples held out for testing.
        #[arg(long, default_value_t = 0.05)]
        test_ratio: f64,
    },
    /// Train a model; writes a checkpoint and a per-epoch log.
    Train {
        /// Config file of `key = value` lines (model, training and path keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides as `--key value` pairs, applied after the config file.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Which split to score: train, test or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Predict the crack mask of one image.
    Infer {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input P6 or P5 image matching the model's input size.
        #[arg(long)]
        image: PathBuf,
        /// Output P5 mask with values 0 and 255.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a grayscale image whose intensity is the visit time of each cell.
    ScanViz {
        /// Order kind: v1..v4, s1..s4 or r1..r4.
        #[arg(long)]
        kind: String,
        /// Grid height.
        #[arg(long)]
        height: usize,
        /// Grid width.
        #[arg(long)]
        width: usize,
        /// Output P5 image.
        #[arg(long)]
        out: PathBuf,
        /// Seed of the random orders.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the five branch variants and print a comparison table.
    Ablate {
        /// Config file of `key = value` lines, shared by every variant.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides as `--key value` pairs, applied after the config file.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset directory; its test split is used for validation.
    pub data: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            checkpoint: PathBuf::from("model.ckpt"),
            log: PathBuf::from("train.log"),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value.trim())),
            "checkpoint" => self.checkpoint = PathBuf::from(value.trim()),
            "log" => self.log = PathBuf::from(value.trim()),
            _ => {
                if !self.model.set(key, value)? && !self.train.set(key, value)? {
                    return Err(config_err(key, "unknown key"));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(&format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies `--key value` pairs; hyphens in keys read as underscores.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| invalid(format!("expected `--key value`, got `{flag}`")))?
                .replace('-', "_");
            let value = it
                .next()
                .ok_or_else(|| config_err(&key, "missing value"))?;
            self.set(&key, value)?;
        }
        Ok(())
    }

    pub fn load(config: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut rc = RunConfig::default();
        if let Some(path) = config {
            rc.apply_text(&fs::read_to_string(path).map_err(io_at(path))?)?;
        }
        rc.apply_overrides(overrides)?;
        rc.model.validate()?;
        rc.train.validate()?;
        Ok(rc)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = self.model.entries();
        out.extend(self.train.entries());
        out.push((
            "data".into(),
            self.data.as_ref().map_or(String::new(), |p| p.display().to_string()),
        ));
        out.push(("checkpoint".into(), self.checkpoint.display().to_string()));
        out.push(("log".into(), self.log.display().to_string()));
        out
    }
}

/// P5 image of visit times, scaled so the last visited cell is 255.
pub fn visit_time_image(order: &ScanOrder) -> PnmImage {
    let last = (order.len() - 1).max(1) as f64;
    let data = order
        .inv()
        .iter()
        .map(|&t| (t as f64 * 255.0 / last).round() as u8)
        .collect();
    PnmImage {
        width: order.width(),
        height: order.height(),
        channels: 1,
        data,
    }
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Parse { .. } => 2,
        Error::NumericFault { .. } => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing normal output to `out` and diagnostics to standard error.
pub fn run_with<I, S>(args: I, out: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenData {
            out: dir,
            count,
            size,
            seed,
            crack_free_frac,
            test_ratio,
        } => {
            let spec = GenSpec {
                count: *count,
                size: *size,
                seed: *seed,
                crack_free_frac: *crack_free_frac,
                test_ratio: *test_ratio,
            };
            let items = data::generate(&spec)?;
            data::write_dataset(dir, &items)?;
            let tests = items.iter().filter(|(e, _)| e.split == Split::Test).count();
            writeln!(out, "wrote {} samples ({} test) to {}", items.len(), tests, dir.display())?;
        }
        Command::Train { config, overrides } => {
            let rc = RunConfig::load(config.as_deref(), overrides)?;
            cmd_train(&rc, cli.threads, out)?;
        }
        Command::Eval { checkpoint, data, split } => {
            let model = load_checkpoint(checkpoint)?;
            let split = match split.as_str() {
                "train" => Some(Split::Train),
                "test" => Some(Split::Test),
                "all" => None,
                other => return Err(config_err("split", format!("expected train, test or all, got `{other}`"))),
            };
            let samples = data::load_dataset(data, split)?;
            let m = train::evaluate(&model, &samples, cli.threads)?;
            let [bg, crack] = m.iou();
            writeln!(out, "images\tpixels\tmiou\tiou_background\tiou_crack\tf1\tsensitivity")?;
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                samples.len(),
                m.pixel_count(),
                m.miou(),
                bg,
                crack,
                m.f1(),
                m.sensitivity()
            )?;
        }
        Command::Infer {
            checkpoint,
            image,
            out: path,
        } => {
            let model = load_checkpoint(checkpoint)?;
            let img = data::read_image(image)?;
            let s = model.config.input_size;
            if img.shape()[1..] != [s, s] {
                return Err(invalid(format!(
                    "image is {}x{}, the model expects {s}x{s}",
                    img.shape()[2],
                    img.shape()[1]
                )));
            }
            let sample = data::Sample {
                id: String::new(),
                image: img,
                mask: crate::nn::Tensor::zeros(&[s, s]),
            };
            let (batch, _) = stack_batch::<f32>(&[&sample])?;
            let mask = predict_masks(&model, batch)?.reshape(&[s, s])?;
            data::write_mask(path, &mask)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::ScanViz {
            kind,
            height,
            width,
            out: path,
            seed,
        } => {
            let kind: ScanKind = kind.parse()?;
            let order = order_for(kind, *height, *width, *seed)?;
            fs::write(path, data::encode_pnm(&visit_time_image(&order))).map_err(io_at(path))?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Ablate {
            config,
            out: path,
            overrides,
        } => {
            let rc = RunConfig::load(config.as_deref(), overrides)?;
            let table = cmd_ablate(&rc, cli.threads)?;
            out.write_all(table.as_bytes())?;
            if let Some(p) = path {
                fs::write(p, &table).map_err(io_at(p))?;
            }
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    Model::load(&mut fs::File::open(path).map_err(io_at(path))?)
}

fn load_training_data(rc: &RunConfig) -> Result<(Vec<data::Sample>, Vec<data::Sample>)> {
    let dir = rc
        .data
        .as_ref()
        .ok_or_else(|| config_err("data", "a dataset directory is required"))?;
    let train_set = data::load_dataset(dir, Some(Split::Train))?;
    let val = data::load_dataset(dir, Some(Split::Test))?;
    let s = rc.model.input_size;
    if let Some(bad) = train_set.iter().chain(&val).find(|x| x.mask.shape() != [s, s]) {
        return Err(config_err(
            "input_size",
            format!("is {s} but sample `{}` is {:?}", bad.id, bad.mask.shape()),
        ));
    }
    Ok((train_set, val))
}

/// Trains per `rc`, echoing the effective configuration and every epoch
/// line to both `out` and the log file, and saves the best-epoch checkpoint.
pub fn cmd_train(rc: &RunConfig, threads: usize, out: &mut dyn Write) -> Result<()> {
    let (train_set, val) = load_training_data(rc)?;
    let mut log = Vec::new();
    for (k, v) in rc.entries() {
        writeln!(log, "# {k} = {v}")?;
    }
    out.write_all(&log)?;
    let mut tee = Tee {
        a: out,
        b: &mut log,
    };
    let mut model = Model::<f32>::build(rc.model.clone(), rc.train.seed)?;
    let outcome = train::train(&mut model, &train_set, &val, &rc.train, threads, &mut tee)?;
    writeln!(tee, "# best_epoch = {}", outcome.best_epoch)?;
    fs::write(&rc.log, &log).map_err(io_at(&rc.log))?;
    model.params = outcome.best_params;
    let mut file = fs::File::create(&rc.checkpoint).map_err(io_at(&rc.checkpoint))?;
    model.save(&mut file)?;
    Ok(())
}

struct Tee<'a> {
    a: &'a mut dyn Write,
    b: &'a mut Vec<u8>,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.a.write_all(buf)?;
        self.b.extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.a.flush()
    }
}

/// Branch toggles `(cross, snake, conv, sca)` of the ablation variants.
pub const ABLATION_VARIANTS: [(&str, [bool; 4]); 5] = [
    ("cross-only", [true, false, false, false]),
    ("snake-only", [false, true, false, false]),
    ("both", [true, true, false, false]),
    ("+conv", [true, true, true, false]),
    ("+sca", [true, true, true, true]),
];

pub fn ablation_config(base: &ModelConfig, toggles: [bool; 4]) -> ModelConfig {
    let [cross, snake, conv, sca] = toggles;
    ModelConfig {
        use_cross_branch: cross,
        use_snake_branch: snake,
        use_conv_branch: conv,
        use_sca: sca,
        ..base.clone()
    }
}

/// Trains every variant with the same data, schedule and seed. Returns a
/// tab-separated table `variant, params, val_miou, val_f1`, scored at each
/// variant's best epoch.
pub fn cmd_ablate(rc: &RunConfig, threads: usize) -> Result<String> {
    let (train_set, val) = load_training_data(rc)?;
    let mut table = String::from("variant\tparams\tval_miou\tval_f1\n");
    for (name, toggles) in ABLATION_VARIANTS {
        let cfg = ablation_config(&rc.model, toggles);
        let mut model = Model::<f32>::build(cfg, rc.train.seed)?;
        let outcome = train::train(&mut model, &train_set, &val, &rc.train, threads, &mut std::io::sink())?;
        let best = outcome.history[outcome.best_epoch];
        table.push_str(&format!(
            "{name}\t{}\t{:.6}\t{:.6}\n",
            model.parameter_count(),
            best.val_miou,
            best.val_f1
        ));
    }
    Ok(table)
}
