//! 2D → 1D scan orderings.
//!
//! A [`ScanOrder`] serializes an `H × W` grid into a sequence of `L = H·W`
//! tokens: `perm[t]` is the row-major flat index `r·W + c` of the cell
//! visited at step `t`. Three families are provided, four directions each:
//!
//! * **Cross** (`v1..v4`): row-major, column-major and their reversals.
//! * **Snake** (`s1..s4`): serpentine walks along the anti-diagonals (`s1`)
//!   and along the main diagonals (`s2`, the column mirror of `s1`), plus
//!   their reversals. Consecutive snake tokens are always 8-neighbours.
//! * **Random** (`r1..r4`): two seeded uniform permutations and their
//!   reversals.
//!
//! [`expand`] turns a feature map into four sequences and [`merge`] folds
//! four sequences back onto the grid, summing them.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanFamily {
    Cross,
    Snake,
    Random,
}

/// One of the twelve order kinds, e.g. `s1` or `v4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScanKind {
    pub family: ScanFamily,
    /// Direction index in `1..=4`; 3 and 4 are the reversals of 1 and 2.
    pub direction: u8,
}

impl ScanKind {
    pub const ALL: [ScanKind; 12] = [
        ScanKind::new(ScanFamily::Cross, 1),
        ScanKind::new(ScanFamily::Cross, 2),
        ScanKind::new(ScanFamily::Cross, 3),
        ScanKind::new(ScanFamily::Cross, 4),
        ScanKind::new(ScanFamily::Snake, 1),
        ScanKind::new(ScanFamily::Snake, 2),
        ScanKind::new(ScanFamily::Snake, 3),
        ScanKind::new(ScanFamily::Snake, 4),
        ScanKind::new(ScanFamily::Random, 1),
        ScanKind::new(ScanFamily::Random, 2),
        ScanKind::new(ScanFamily::Random, 3),
        ScanKind::new(ScanFamily::Random, 4),
    ];

    pub const fn new(family: ScanFamily, direction: u8) -> Self {
        ScanKind { family, direction }
    }

    pub fn is_reversed(self) -> bool {
        self.direction >= 3
    }

    /// The forward kind this one reverses (itself for directions 1 and 2).
    pub fn base(self) -> Self {
        if self.is_reversed() {
            ScanKind::new(self.family, self.direction - 2)
        } else {
            self
        }
    }
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.family {
            ScanFamily::Cross => 'v',
            ScanFamily::Snake => 's',
            ScanFamily::Random => 'r',
        };
        write!(f, "{prefix}{}", self.direction)
    }
}

impl FromStr for ScanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid(format!("unknown scan kind `{s}` (expected v1..v4, s1..s4, r1..r4)"));
        let mut chars = s.chars();
        let family = match chars.next() {
            Some('v') => ScanFamily::Cross,
            Some('s') => ScanFamily::Snake,
            Some('r') => ScanFamily::Random,
            _ => return Err(bad()),
        };
        let direction: u8 = chars.as_str().parse().map_err(|_| bad())?;
        if !(1..=4).contains(&direction) {
            return Err(bad());
        }
        Ok(ScanKind::new(family, direction))
    }
}

/// A permutation of the `H·W` grid cells together with its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    height: usize,
    width: usize,
    kind: ScanKind,
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl ScanOrder {
    fn from_perm(height: usize, width: usize, kind: ScanKind, perm: Vec<usize>) -> Self {
        let mut inv = vec![usize::MAX; perm.len()];
        for (t, &p) in perm.iter().enumerate() {
            inv[p] = t;
        }
        debug_assert!(inv.iter().all(|&i| i != usize::MAX), "not a permutation");
        ScanOrder {
            height,
            width,
            kind,
            perm,
            inv,
        }
    }

    fn reversed(&self, kind: ScanKind) -> Self {
        let perm = self.perm.iter().rev().copied().collect();
        Self::from_perm(self.height, self.width, kind, perm)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    /// `perm[t]` is the flat index visited at step `t`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// `inv[i]` is the step at which flat index `i` is visited.
    pub fn inv(&self) -> &[usize] {
        &self.inv
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(invalid(format!("grid must be non-empty, got {height}x{width}")));
    }
    Ok(())
}

fn check_direction(direction: u8) -> Result<()> {
    if !(1..=4).contains(&direction) {
        return Err(invalid(format!("scan direction must be 1..=4, got {direction}")));
    }
    Ok(())
}

/// Row-major (`v1`), column-major (`v2`) and their reversals (`v3`, `v4`).
pub fn cross_order(height: usize, width: usize, direction: u8) -> Result<ScanOrder> {
    check_dims(height, width)?;
    check_direction(direction)?;
    let kind = ScanKind::new(ScanFamily::Cross, direction);
    let base = match kind.base().direction {
        1 => (0..height * width).collect(),
        _ => (0..width)
            .flat_map(|c| (0..height).map(move |r| r * width + c))
            .collect(),
    };
    let order = ScanOrder::from_perm(height, width, kind.base(), base);
    Ok(if kind.is_reversed() {
        order.reversed(kind)
    } else {
        order
    })
}

/// Anti-diagonal zigzag starting at `(0, 0)`: diagonal `d = r + c` is walked
/// with `r` ascending when `d` is odd and descending when `d` is even.
fn antidiagonal_zigzag(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(height * width);
    for d in 0..height + width - 1 {
        let r_lo = d.saturating_sub(width - 1);
        let r_hi = d.min(height - 1);
        if d % 2 == 1 {
            cells.extend((r_lo..=r_hi).map(|r| (r, d - r)));
        } else {
            cells.extend((r_lo..=r_hi).rev().map(|r| (r, d - r)));
        }
    }
    cells
}

/// Serpentine orders. `s1` zigzags over the anti-diagonals, `s2` is `s1` on
/// the column-mirrored grid (so it follows the main diagonals), `s3`/`s4` are
/// their reversals.
pub fn snake_order(height: usize, width: usize, direction: u8) -> Result<ScanOrder> {
    check_dims(height, width)?;
    check_direction(direction)?;
    let kind = ScanKind::new(ScanFamily::Snake, direction);
    let mirror = kind.base().direction == 2;
    let perm = antidiagonal_zigzag(height, width)
        .into_iter()
        .map(|(r, c)| {
            let c = if mirror { width - 1 - c } else { c };
            r * width + c
        })
        .collect();
    let order = ScanOrder::from_perm(height, width, kind.base(), perm);
    Ok(if kind.is_reversed() {
        order.reversed(kind)
    } else {
        order
    })
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for random branch `branch` (1 or 2): SplitMix64 folded over
/// `(seed, height, width, branch)`.
pub fn random_branch_seed(seed: u64, height: usize, width: usize, branch: u8) -> u64 {
    [height as u64, width as u64, branch as u64]
        .into_iter()
        .fold(splitmix64(seed), |acc, v| splitmix64(acc ^ v))
}

/// Uniform integer in `0..n` by rejection on 64-bit draws.
fn uniform_below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % n;
        }
    }
}

/// Uniform random permutation of `0..len`.
///
/// Generator: ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`) seeded with
/// [`random_branch_seed`], driving a descending Fisher–Yates shuffle whose
/// index draws use [`uniform_below`]-style rejection sampling.
fn random_perm(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = uniform_below(&mut rng, i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

/// A single random order (`r1`..`r4`).
pub fn random_order(height: usize, width: usize, seed: u64, direction: u8) -> Result<ScanOrder> {
    check_dims(height, width)?;
    check_direction(direction)?;
    let kind = ScanKind::new(ScanFamily::Random, direction);
    let branch = kind.base().direction;
    let perm = random_perm(height * width, random_branch_seed(seed, height, width, branch));
    let order = ScanOrder::from_perm(height, width, kind.base(), perm);
    Ok(if kind.is_reversed() {
        order.reversed(kind)
    } else {
        order
    })
}

/// Builds any of the twelve kinds. `seed` only matters for random kinds.
pub fn order_for(kind: ScanKind, height: usize, width: usize, seed: u64) -> Result<ScanOrder> {
    match kind.family {
        ScanFamily::Cross => cross_order(height, width, kind.direction),
        ScanFamily::Snake => snake_order(height, width, kind.direction),
        ScanFamily::Random => random_order(height, width, seed, kind.direction),
    }
}

/// Four orders over the same grid, consumed together by [`expand`] and
/// [`merge`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionSet {
    orders: [ScanOrder; 4],
}

impl DirectionSet {
    pub fn new(orders: [ScanOrder; 4]) -> Result<Self> {
        let (h, w) = (orders[0].height, orders[0].width);
        if orders.iter().any(|o| o.height != h || o.width != w) {
            return Err(invalid("direction set orders disagree on grid size"));
        }
        Ok(DirectionSet { orders })
    }

    fn family(height: usize, width: usize, f: impl Fn(u8) -> Result<ScanOrder>) -> Result<Self> {
        check_dims(height, width)?;
        Self::new([f(1)?, f(2)?, f(3)?, f(4)?])
    }

    pub fn cross(height: usize, width: usize) -> Result<Self> {
        Self::family(height, width, |d| cross_order(height, width, d))
    }

    pub fn snake(height: usize, width: usize) -> Result<Self> {
        Self::family(height, width, |d| snake_order(height, width, d))
    }

    pub fn orders(&self) -> &[ScanOrder; 4] {
        &self.orders
    }

    pub fn height(&self) -> usize {
        self.orders[0].height
    }

    pub fn width(&self) -> usize {
        self.orders[0].width
    }

    pub fn len(&self) -> usize {
        self.orders[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `r1`, `r2` drawn independently, `r3`/`r4` their reversals.
pub fn random_orders(height: usize, width: usize, seed: u64) -> Result<DirectionSet> {
    DirectionSet::family(height, width, |d| random_order(height, width, seed, d))
}

/// `[N,C,H,W] → [N,4,C,L]` with `out[n,k,c,t] = x[n,c,perm_k[t]]`.
pub fn expand<T: Real>(x: &Tensor<T>, dirs: &DirectionSet) -> Result<Tensor<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(invalid(format!("expand expects [N,C,H,W], got {:?}", x.shape())));
    };
    if h != dirs.height() || w != dirs.width() {
        return Err(invalid(format!(
            "expand: map is {h}x{w} but directions are {}x{}",
            dirs.height(),
            dirs.width()
        )));
    }
    let l = h * w;
    let src = x.data();
    let mut out = Vec::with_capacity(n * 4 * c * l);
    for ni in 0..n {
        for order in dirs.orders() {
            for ci in 0..c {
                let plane = &src[(ni * c + ci) * l..(ni * c + ci + 1) * l];
                out.extend(order.perm().iter().map(|&p| plane[p]));
            }
        }
    }
    Tensor::new(&[n, 4, c, l], out)
}

/// `[N,4,C,L] → [N,C,H,W]`: inverse-permute each sequence back to the grid
/// and sum the four grids.
pub fn merge<T: Real>(seqs: &Tensor<T>, dirs: &DirectionSet) -> Result<Tensor<T>> {
    let &[n, k, c, l] = seqs.shape() else {
        return Err(invalid(format!("merge expects [N,4,C,L], got {:?}", seqs.shape())));
    };
    if k != 4 || l != dirs.len() {
        return Err(invalid(format!(
            "merge: sequences {:?} do not match {}x{} directions",
            seqs.shape(),
            dirs.height(),
            dirs.width()
        )));
    }
    let src = seqs.data();
    let mut out = vec![T::zero(); n * c * l];
    for ni in 0..n {
        for (ki, order) in dirs.orders().iter().enumerate() {
            for ci in 0..c {
                let seq = &src[((ni * 4 + ki) * c + ci) * l..][..l];
                let plane = &mut out[(ni * c + ci) * l..][..l];
                for (t, &p) in order.perm().iter().enumerate() {
                    plane[p] += seq[t];
                }
            }
        }
    }
    Tensor::new(&[n, c, dirs.height(), dirs.width()], out)
}

/// Chebyshev step statistics along a scan order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjacencyProfile {
    pub max_step: usize,
    pub mean_step: f64,
}

pub fn adjacency_profile(order: &ScanOrder) -> Result<AdjacencyProfile> {
    if order.len() < 2 {
        return Err(Error::EmptyProfile);
    }
    let w = order.width;
    let steps: Vec<usize> = order
        .perm
        .windows(2)
        .map(|p| {
            let (r0, c0) = (p[0] / w, p[0] % w);
            let (r1, c1) = (p[1] / w, p[1] % w);
            r0.abs_diff(r1).max(c0.abs_diff(c1))
        })
        .collect();
    Ok(AdjacencyProfile {
        max_step: steps.iter().copied().max().unwrap_or(0),
        mean_step: steps.iter().sum::<usize>() as f64 / steps.len() as f64,
    })
}
