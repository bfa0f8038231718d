//! Synthetic crack images, the interval-sampling split and PNM file I/O.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, io_at, Error, Result};
use crate::nn::Tensor;

/// An RGB image in `[0, 1]` with its binary crack mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`
    pub image: Tensor<f32>,
    /// `[H, W]`, values 0 or 1.
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Morphology {
    Linear,
    Branching,
    Reticulated,
}

impl Morphology {
    pub const ALL: [Morphology; 3] = [Morphology::Linear, Morphology::Branching, Morphology::Reticulated];
}

impl fmt::Display for Morphology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Morphology::Linear => "linear",
            Morphology::Branching => "branching",
            Morphology::Reticulated => "reticulated",
        })
    }
}

impl FromStr for Morphology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Morphology::Linear),
            "branching" => Ok(Morphology::Branching),
            "reticulated" => Ok(Morphology::Reticulated),
            _ => Err(invalid(format!("unknown morphology `{s}`"))),
        }
    }
}

/// The pieces a sample is composed from.
#[derive(Debug, Clone)]
pub struct CrackLayers {
    /// Smooth background, `[3, H, W]`.
    pub texture: Tensor<f32>,
    /// Texture with the crack pixels darkened.
    pub darkened: Tensor<f32>,
    /// Per-pixel noise added last, `[3, H, W]`.
    pub noise: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl CrackLayers {
    pub fn compose(&self) -> Tensor<f32> {
        self.darkened.zip_map(&self.noise, |a, b| (a + b).clamp(0.0, 1.0))
    }
}

const TEXTURE_CELL: usize = 8;
const NOISE_AMPLITUDE: f32 = 0.04;
const BRANCH_PROBABILITY: f64 = 0.04;
const MAX_CHILDREN: usize = 3;

/// 8-connected walk with a slowly drifting heading.
struct Walker<'a> {
    rng: &'a mut ChaCha8Rng,
    height: usize,
    width: usize,
}

impl Walker<'_> {
    /// Visits cells from `(r, c)` until leaving the grid or `steps` run out.
    fn walk(&mut self, r: usize, c: usize, mut heading: f64, steps: usize) -> Vec<(usize, usize)> {
        let (mut r, mut c) = (r as isize, c as isize);
        let mut curvature = 0.0f64;
        let mut path = vec![(r as usize, c as usize)];
        for _ in 0..steps {
            curvature = (curvature + self.rng.gen_range(-0.12..0.12)).clamp(-0.3, 0.3);
            heading += curvature;
            let octant = (heading / std::f64::consts::FRAC_PI_4).round() as i64;
            let (dr, dc) = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]
                [octant.rem_euclid(8) as usize];
            r += dr;
            c += dc;
            if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
                break;
            }
            path.push((r as usize, c as usize));
        }
        path
    }
}

fn stamp(mask: &mut [f32], height: usize, width: usize, path: &[(usize, usize)], thickness: usize) {
    for &(r, c) in path {
        for dr in 0..thickness {
            for dc in 0..thickness {
                let (rr, cc) = (r + dr, c + dc);
                if rr < height && cc < width {
                    mask[rr * width + cc] = 1.0;
                }
            }
        }
    }
}

/// Bilinear interpolation of a coarse random grid, one per channel, around a
/// random base tone.
fn smooth_texture(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<f32> {
    let gh = height.div_ceil(TEXTURE_CELL) + 1;
    let gw = width.div_ceil(TEXTURE_CELL) + 1;
    let base: f32 = rng.gen_range(0.5..0.75);
    let mut out = vec![0.0f32; 3 * height * width];
    let shared: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-0.08..0.08)).collect();
    for ch in 0..3 {
        let tint: f32 = rng.gen_range(-0.04..0.04);
        for y in 0..height {
            let fy = y as f32 / TEXTURE_CELL as f32;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..width {
                let fx = x as f32 / TEXTURE_CELL as f32;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let g = |yy: usize, xx: usize| shared[yy * gw + xx];
                let v = g(y0, x0) * (1.0 - ty) * (1.0 - tx)
                    + g(y0, x0 + 1) * (1.0 - ty) * tx
                    + g(y0 + 1, x0) * ty * (1.0 - tx)
                    + g(y0 + 1, x0 + 1) * ty * tx;
                out[ch * height * width + y * width + x] = base + tint + v;
            }
        }
    }
    out
}

/// Builds every layer of a synthetic sample; fully determined by its
/// arguments.
pub fn gen_crack_layers(
    seed: u64,
    height: usize,
    width: usize,
    morphology: Morphology,
    crack_free: bool,
) -> Result<CrackLayers> {
    if height < 16 || width < 16 {
        return Err(invalid(format!("samples must be at least 16x16, got {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = smooth_texture(&mut rng, height, width);
    let mut mask = vec![0.0f32; height * width];
    if !crack_free {
        let span = height.max(width);
        let walks = match morphology {
            Morphology::Reticulated => rng.gen_range(3..=6),
            _ => 1,
        };
        for _ in 0..walks {
            let thickness = rng.gen_range(1..=3);
            let r = rng.gen_range(height / 4..height - height / 4);
            let c = rng.gen_range(width / 4..width - width / 4);
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            let steps = rng.gen_range(span..2 * span);
            let mut walker = Walker {
                rng: &mut rng,
                height,
                width,
            };
            // Grow both ways from the seed point so the crack crosses it.
            let mut path = walker.walk(r, c, heading, steps / 2);
            path.extend(walker.walk(r, c, heading + std::f64::consts::PI, steps / 2));
            stamp(&mut mask, height, width, &path, thickness);
            if morphology == Morphology::Branching {
                let mut children = 0;
                for &(pr, pc) in &path {
                    if children == MAX_CHILDREN || !rng.gen_bool(BRANCH_PROBABILITY) {
                        continue;
                    }
                    children += 1;
                    let turn = rng.gen_range(std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_2);
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let child_steps = rng.gen_range(span / 4..span / 2 + 1);
                    let child_thickness = rng.gen_range(1..=thickness);
                    let child = Walker {
                        rng: &mut rng,
                        height,
                        width,
                    }
                    .walk(pr, pc, heading + side * turn, child_steps);
                    stamp(&mut mask, height, width, &child, child_thickness);
                }
            }
        }
    }
    let tone: f32 = rng.gen_range(0.2..0.4);
    let plane = height * width;
    let darkened: Vec<f32> = texture
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask[i % plane] == 1.0 { v * tone } else { v })
        .collect();
    let noise: Vec<f32> = (0..3 * plane)
        .map(|_| rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE))
        .collect();
    let shape = [3, height, width];
    Ok(CrackLayers {
        texture: Tensor::new(&shape, texture)?,
        darkened: Tensor::new(&shape, darkened)?,
        noise: Tensor::new(&shape, noise)?,
        mask: Tensor::new(&[height, width], mask)?,
    })
}

pub fn gen_crack_sample(
    seed: u64,
    height: usize,
    width: usize,
    morphology: Morphology,
    crack_free: bool,
) -> Result<Sample> {
    let layers = gen_crack_layers(seed, height, width, morphology, crack_free)?;
    Ok(Sample {
        id: format!("{morphology}-{seed}"),
        image: layers.compose(),
        mask: layers.mask,
    })
}

/// Test-set selection by fixed-interval sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub total: usize,
    pub test_count: usize,
    /// Selection interval `total / test_count`.
    pub interval: f64,
    pub test_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
}

/// `n = round_half_up(total · ratio)` clamped to at least 1, then test
/// indices `floor(k · total / n)` for `k < n`.
pub fn split_dataset(total: usize, ratio: f64) -> Result<SplitSpec> {
    if total == 0 {
        return Err(invalid("cannot split an empty dataset"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid(format!("split ratio must be in (0, 1], got {ratio}")));
    }
    // The small nudge keeps exact halves such as 10 · 0.05 from rounding
    // down through binary representation error.
    let test_count = ((total as f64 * ratio + 0.5 + 1e-9).floor() as usize).clamp(1, total);
    let test_indices: Vec<usize> = (0..test_count).map(|k| k * total / test_count).collect();
    let mut is_test = vec![false; total];
    for &i in &test_indices {
        is_test[i] = true;
    }
    Ok(SplitSpec {
        total,
        test_count,
        interval: total as f64 / test_count as f64,
        train_indices: (0..total).filter(|&i| !is_test[i]).collect(),
        test_indices,
    })
}

/// Decoded binary PNM (P5 or P6, maxval 255).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| self.err(start, format!("{what} out of range")))
    }
}

pub fn parse_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let mut r = HeaderReader { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(r.err(0, "expected magic P5 or P6")),
    };
    r.pos = 2;
    let width = r.number("width")?;
    let height = r.number("height")?;
    r.skip_space_and_comments();
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(r.err(maxval_at, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(r.err(3, "zero image dimension"));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(r.err(r.pos, "expected a single whitespace byte after maxval")),
    }
    let need = width * height * channels;
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(r.err(
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        data: payload[..need].to_vec(),
    })
}

pub fn encode_pnm(img: &PnmImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3,H,W]` (or `[1,H,W]`) image in `[0,1]` to PNM.
pub fn image_to_pnm(image: &Tensor<f32>) -> Result<PnmImage> {
    let &[c, h, w] = image.shape() else {
        return Err(invalid(format!("expected [C,H,W] image, got {:?}", image.shape())));
    };
    if c != 1 && c != 3 {
        return Err(invalid(format!("images need 1 or 3 channels, got {c}")));
    }
    let d = image.data();
    let mut data = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            data.push(quantize(d[ch * h * w + i]));
        }
    }
    Ok(PnmImage {
        width: w,
        height: h,
        channels: c,
        data,
    })
}

/// PNM to a `[3,H,W]` image in `[0,1]`; grayscale is replicated to three
/// channels.
pub fn pnm_to_image(img: &PnmImage) -> Result<Tensor<f32>> {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            let src = if c == 3 { img.data[i * 3 + ch] } else { img.data[i] };
            data[ch * h * w + i] = src as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Any nonzero byte is crack.
pub fn pnm_to_mask(img: &PnmImage) -> Result<Tensor<f32>> {
    if img.channels != 1 {
        return Err(invalid("masks must be grayscale (P5)"));
    }
    let data = img.data.iter().map(|&b| if b > 0 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[img.height, img.width], data)
}

/// `[H,W]` binary mask to a P5 image with values 0 and 255.
pub fn mask_to_pnm(mask: &Tensor<f32>) -> Result<PnmImage> {
    let &[h, w] = mask.shape() else {
        return Err(invalid(format!("expected [H,W] mask, got {:?}", mask.shape())));
    };
    let data = mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    Ok(PnmImage {
        width: w,
        height: h,
        channels: 1,
        data,
    })
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    pnm_to_image(&parse_pnm(&fs::read(path).map_err(io_at(path))?)?)
}

pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    pnm_to_mask(&parse_pnm(&fs::read(path).map_err(io_at(path))?)?)
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pnm(&image_to_pnm(image)?)).map_err(io_at(path))?;
    Ok(())
}

pub fn write_mask(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pnm(&mask_to_pnm(mask)?)).map_err(io_at(path))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One `manifest.tsv` row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// `None` for crack-free samples.
    pub morphology: Option<Morphology>,
    pub seed: u64,
    pub split: Split,
}

impl ManifestEntry {
    fn morphology_label(&self) -> String {
        self.morphology.map_or_else(|| "crack-free".to_string(), |m| m.to_string())
    }
}

pub const MANIFEST_HEADER: &str = "id\tmorphology\tseed\tsplit";

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.morphology_label(), e.seed, e.split));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    let mut offset = 0;
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => offset += h.len() + 1,
        _ => {
            return Err(Error::Parse {
                offset: 0,
                message: format!("manifest must start with `{MANIFEST_HEADER}`"),
            })
        }
    }
    let mut entries = Vec::new();
    for line in lines {
        let bad = |message: String| Error::Parse { offset, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, morph, seed, split] = fields[..] else {
            return Err(bad(format!("expected 4 tab-separated fields in `{line}`")));
        };
        entries.push(ManifestEntry {
            id: id.to_string(),
            morphology: match morph {
                "crack-free" => None,
                m => Some(m.parse().map_err(|_| bad(format!("unknown morphology `{m}`")))?),
            },
            seed: seed.parse().map_err(|_| bad(format!("bad seed `{seed}`")))?,
            split: match split {
                "train" => Split::Train,
                "test" => Split::Test,
                s => return Err(bad(format!("unknown split `{s}`"))),
            },
        });
        offset += line.len() + 1;
    }
    Ok(entries)
}

/// Settings of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub crack_free_frac: f64,
    pub test_ratio: f64,
}

/// Per-sample seed derived from the dataset seed.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Manifest rows of a dataset: `round_half_up(count · crack_free_frac)`
/// crack-free samples, the rest cycling through the three morphologies, in
/// a seeded shuffled order, split by [`split_dataset`].
pub fn plan_dataset(spec: &GenSpec) -> Result<Vec<ManifestEntry>> {
    if spec.count == 0 {
        return Err(invalid("count must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.crack_free_frac) {
        return Err(invalid("crack-free fraction must lie in [0, 1]"));
    }
    let crack_free = ((spec.count as f64 * spec.crack_free_frac + 0.5 + 1e-9).floor() as usize).min(spec.count);
    let mut kinds: Vec<Option<Morphology>> = (0..spec.count - crack_free)
        .map(|i| Some(Morphology::ALL[i % 3]))
        .chain(std::iter::repeat(None).take(crack_free))
        .collect();
    kinds.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let split = split_dataset(spec.count, spec.test_ratio)?;
    let mut is_test = vec![false; spec.count];
    for &i in &split.test_indices {
        is_test[i] = true;
    }
    let width = spec.count.to_string().len().max(4);
    Ok(kinds
        .into_iter()
        .enumerate()
        .map(|(i, morphology)| ManifestEntry {
            id: format!("s{i:0width$}"),
            morphology,
            seed: sample_seed(spec.seed, i),
            split: if is_test[i] { Split::Test } else { Split::Train },
        })
        .collect())
}

pub fn sample_for(entry: &ManifestEntry, size: usize) -> Result<Sample> {
    let morph = entry.morphology.unwrap_or(Morphology::Linear);
    let mut s = gen_crack_sample(entry.seed, size, size, morph, entry.morphology.is_none())?;
    s.id = entry.id.clone();
    Ok(s)
}

/// Generates samples in memory without touching disk.
pub fn generate(spec: &GenSpec) -> Result<Vec<(ManifestEntry, Sample)>> {
    plan_dataset(spec)?
        .into_iter()
        .map(|e| {
            let s = sample_for(&e, spec.size)?;
            Ok((e, s))
        })
        .collect()
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and `manifest.tsv` under `dir`.
pub fn write_dataset(dir: &Path, items: &[(ManifestEntry, Sample)]) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io_at(&d))?;
    }
    for (e, s) in items {
        write_image(&dir.join("images").join(format!("{}.ppm", e.id)), &s.image)?;
        write_mask(&dir.join("masks").join(format!("{}.pgm", e.id)), &s.mask)?;
    }
    let entries: Vec<ManifestEntry> = items.iter().map(|(e, _)| e.clone()).collect();
    let manifest = dir.join("manifest.tsv");
    fs::write(&manifest, format_manifest(&entries)).map_err(io_at(&manifest))?;
    Ok(())
}

/// Loads the samples of one split (or all, with `None`) in manifest order.
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<Sample>> {
    let path = dir.join("manifest.tsv");
    let manifest = fs::read_to_string(&path).map_err(io_at(&path))?;
    parse_manifest(&manifest)?
        .into_iter()
        .filter(|e| split.map_or(true, |s| s == e.split))
        .map(|e| {
            Ok(Sample {
                image: read_image(&dir.join("images").join(format!("{}.ppm", e.id)))?,
                mask: read_mask(&dir.join("masks").join(format!("{}.pgm", e.id)))?,
                id: e.id,
            })
        })
        .collect()
}
