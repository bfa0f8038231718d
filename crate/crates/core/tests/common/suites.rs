//! Suites shared by the per-module integration tests and the acceptance
//! runner. Each returns the number of checks made and a description of
//! every failure.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crackmamba::blocks::{
    decoder_block, sca_forward, scvss_forward, seg_head, vss_forward, BlockDirections, DecoderWeights, ScaConfig,
    ScaWeights, ScvssConfig, ScvssWeights, SegHeadWeights, Upsample, VssConfig, VssWeights,
};
use crackmamba::cli::{cmd_ablate, RunConfig};
use crackmamba::data::{generate, write_dataset, GenSpec, Sample};
use crackmamba::model::{Model, ModelConfig};
use crackmamba::nn::{drop_path, Conv2dSpec, Graph, ParamStore, Tensor, Var};
use crackmamba::scan::{
    adjacency_profile, expand, merge, order_for, random_orders, DirectionSet, ScanFamily, ScanKind,
};
use crackmamba::ssm::{
    scan_core, selective_scan, ssm_conv_apply, ssm_kernel, ssm_recurrence, zoh_discretize, DiscreteSsm,
    Discretization, SsmParams, SERIES_THRESHOLD,
};
use crackmamba::train::{
    adamw_step, compute_metrics, deep_supervision_loss, dice_ce_loss, loss_terms, train, AdamState, EpochRecord,
    TrainConfig,
};
use crackmamba::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, check_inputs, GradReport};
use super::oracle::{self, rand_tensor, ScanParams};

#[derive(Debug, Default)]
pub struct Suite {
    pub checks: usize,
    pub failures: Vec<String>,
}

impl Suite {
    pub fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    pub fn passed(&self) -> bool {
        self.checks > 0 && self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        if self.failures.is_empty() {
            format!("{} checks", self.checks)
        } else {
            format!(
                "{} of {} checks failed; first: {}",
                self.failures.len(),
                self.checks,
                self.failures[0]
            )
        }
    }

    pub fn assert_ok(&self) {
        assert!(self.passed(), "{}\n{}", self.summary(), self.failures.join("\n"));
    }
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Rows of a tab-separated fixture, skipping `#` lines.
pub fn fixture_rows(name: &str) -> Vec<Vec<String>> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        stage_dims: [4, 4, 8, 8],
        stage_depths: [1, 1, 1, 1],
        state_dim: 2,
        input_size: 32,
        ..ModelConfig::default()
    }
}

/// Adds small noise to every parameter so checks do not run at the
/// special points of the initialization (zero biases, unit gains).
pub fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

// ---------------------------------------------------------------- scan

pub fn scan_suite(max_side: usize) -> Suite {
    let mut s = Suite::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for h in 1..=max_side {
        for w in 1..=max_side {
            let l = h * w;
            for kind in ScanKind::ALL {
                let seed = (h * 31 + w) as u64;
                let order = match order_for(kind, h, w, seed) {
                    Ok(o) => o,
                    Err(e) => {
                        s.check(false, || format!("{kind} {h}x{w}: {e}"));
                        continue;
                    }
                };
                let mut seen = vec![false; l];
                let mut bijective = order.perm().len() == l;
                for &p in order.perm() {
                    bijective &= p < l && !std::mem::replace(&mut seen[p], true);
                }
                s.check(bijective, || format!("{kind} {h}x{w}: not a permutation"));
                let inverse = (0..l).all(|t| order.inv()[order.perm()[t]] == t)
                    && (0..l).all(|i| order.perm()[order.inv()[i]] == i);
                s.check(inverse, || format!("{kind} {h}x{w}: inverse law"));
                if kind.is_reversed() {
                    let base = order_for(kind.base(), h, w, seed).unwrap();
                    let rev: Vec<usize> = base.perm().iter().rev().copied().collect();
                    s.check(order.perm() == rev.as_slice(), || format!("{kind} {h}x{w}: reversal law"));
                }
                if kind.family == ScanFamily::Snake && l > 1 {
                    let prof = adjacency_profile(&order).unwrap();
                    s.check(prof.max_step == 1, || {
                        format!("{kind} {h}x{w}: max Chebyshev step {}", prof.max_step)
                    });
                }
            }
            let sets = [
                DirectionSet::cross(h, w).unwrap(),
                DirectionSet::snake(h, w).unwrap(),
                random_orders(h, w, 5).unwrap(),
            ];
            for (si, dirs) in sets.iter().enumerate() {
                // Dyadic values make the four-term sums exact.
                let x = Tensor::new(
                    &[2, 3, h, w],
                    (0..6 * l).map(|_| rng.gen_range(-512i32..512) as f64 / 64.0).collect(),
                )
                .unwrap();
                let back = merge(&expand(&x, dirs).unwrap(), dirs).unwrap();
                let four: Vec<f64> = x.data().iter().map(|v| 4.0 * v).collect();
                s.check(back.data() == four.as_slice(), || {
                    format!("set {si} {h}x{w}: merge(expand(x)) != 4x")
                });
                let y = rand_tensor(&[1, 2, h, w], &mut rng, -1.0, 1.0);
                let back = merge(&expand(&y, dirs).unwrap(), dirs).unwrap();
                let summed: Vec<f64> = y.data().iter().map(|&v| v + v + v + v).collect();
                s.check(back.data() == summed.as_slice(), || {
                    format!("set {si} {h}x{w}: merge(expand(y)) != y+y+y+y")
                });
            }
        }
    }
    s
}

// ---------------------------------------------------------------- ssm

pub fn lti_equivalence(s: &mut Suite, trials: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let n = rng.gen_range(1..=8);
        let len = rng.gen_range(1..=64);
        let (mut a_bar, mut b_bar, mut c) = (vec![], vec![], vec![]);
        for _ in 0..n {
            let (a, b) = zoh_discretize(
                rng.gen_range(0.01..1.0),
                rng.gen_range(-3.0..-0.05),
                rng.gen_range(-1.0..1.0),
            )
            .unwrap();
            a_bar.push(a);
            b_bar.push(b);
            c.push(rng.gen_range(-1.0..1.0));
        }
        let ssm = DiscreteSsm::lti(a_bar, b_bar, c);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rec = ssm_recurrence(&ssm, &x).unwrap();
        let conv = ssm_conv_apply(&x, &ssm_kernel(&ssm, len).unwrap()).unwrap();
        let scale = rec.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let rel = oracle::max_abs_diff(&rec, &conv) / scale;
        s.check(rel < 1e-10, || format!("LTI trial {trial} (N={n}, L={len}): relative error {rel:e}"));
    }
}

pub fn zoh_fixture(s: &mut Suite) {
    let rows = fixture_rows("zoh_reference.tsv");
    let mut series_rows = 0;
    for row in &rows {
        let v: Vec<f64> = row.iter().map(|x| x.parse().unwrap()).collect();
        let (delta, a, b, a_ref, b_ref) = (v[0], v[1], v[2], v[3], v[4]);
        if (delta * a).abs() < SERIES_THRESHOLD {
            series_rows += 1;
        }
        let (a_bar, b_bar) = zoh_discretize(delta, a, b).unwrap();
        let rel = |x: f64, r: f64| if r == 0.0 { x.abs() } else { ((x - r) / r).abs() };
        s.check(rel(a_bar, a_ref) < 1e-12 && rel(b_bar, b_ref) < 1e-12, || {
            format!(
                "zoh({delta}, {a}, {b}) = ({a_bar:e}, {b_bar:e}), reference ({a_ref:e}, {b_ref:e})"
            )
        });
    }
    s.check(series_rows >= 5, || format!("only {series_rows} fixture rows exercise the series branch"));
}

/// Random selective-scan parameters registered in a fresh store.
pub fn random_scan_params(
    rng: &mut ChaCha8Rng,
    inner: usize,
    state: usize,
    rank: usize,
    dt_bias: (f64, f64),
) -> (ParamStore<f64>, SsmParams) {
    let mut store = ParamStore::new();
    let x_proj = store.add("x_proj", rand_tensor(&[rank + 2 * state, inner], rng, -1.0, 1.0));
    let dt_proj = store.add("dt_proj", rand_tensor(&[inner, rank], rng, -0.5, 0.5));
    let dt_b = store.add("dt_bias", rand_tensor(&[inner], rng, dt_bias.0, dt_bias.1));
    let a_log = store.add("a_log", rand_tensor(&[inner, state], rng, -1.0, 1.0));
    let skip = store.add("skip", rand_tensor(&[inner], rng, -1.0, 1.0));
    let params = SsmParams {
        x_proj,
        dt_proj,
        dt_bias: dt_b,
        a_log,
        skip,
        inner,
        state_dim: state,
        dt_rank: rank,
        mode: Discretization::Zoh,
    };
    (store, params)
}

pub fn oracle_params(store: &ParamStore<f64>, p: &SsmParams) -> ScanParams {
    let t = |id| &store.get(id).value;
    ScanParams::from_tensors(t(p.x_proj), t(p.dt_proj), t(p.dt_bias), t(p.a_log), t(p.skip))
}

pub fn selective_vs_unrolled(s: &mut Suite, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..40 {
        let len = 1 + trial % 4;
        let (d, n, r) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=2));
        // Every fourth trial pushes Δ into the series regime.
        let bias = if trial % 4 == 3 { (-13.0, -12.0) } else { (-2.0, 0.5) };
        let (store, params) = random_scan_params(&mut rng, d, n, r, bias);
        let batch = 2;
        let x = rand_tensor(&[batch, len, d], &mut rng, -1.0, 1.0);
        let g = Graph::new();
        let bound = store.bind(&g);
        let y = selective_scan(g.constant(x.clone()), &params, &bound).unwrap().tensor();
        let op = oracle_params(&store, &params);
        for b in 0..batch {
            let tokens: Vec<Vec<f64>> = (0..len).map(|t| (0..d).map(|c| x.at(&[b, t, c])).collect()).collect();
            let want: Vec<f64> = oracle::selective_scan_unrolled(&tokens, &op).concat();
            let got = &y.data()[b * len * d..(b + 1) * len * d];
            let err = oracle::max_abs_diff(got, &want);
            s.check(err < 1e-12, || format!("selective trial {trial} batch {b} (L={len}): error {err:e}"));
        }
    }
}

pub fn ssm_suite() -> Suite {
    let mut s = Suite::default();
    lti_equivalence(&mut s, 100, 2024);
    zoh_fixture(&mut s);
    selective_vs_unrolled(&mut s, 99);
    s
}

// ---------------------------------------------------------------- gradients

pub type GradCase = (&'static str, fn(u64) -> Result<GradReport>);

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    rand_tensor(shape, rng, -1.0, 1.0).map(|v| v.signum() * (0.05 + v.abs()))
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(2..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)]
}

fn unary(seed: u64, f: for<'g> fn(Var<'g, f64>) -> Result<Var<'g, f64>>) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let x = away_from_zero(&small_shape(&mut rng), &mut rng);
    check_inputs(&[x], seed, |_, xs| f(xs[0]))
}

fn binary(
    seed: u64,
    other_shape: fn(&[usize]) -> Vec<usize>,
    f: for<'g> fn(Var<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let shape = small_shape(&mut rng);
    let a = rand_tensor(&shape, &mut rng, -1.0, 1.0);
    let b = rand_tensor(&other_shape(&shape), &mut rng, -1.0, 1.0);
    check_inputs(&[a, b], seed, |_, xs| f(xs[0], xs[1]))
}

fn conv_case(seed: u64, cin: usize, cout: usize, k: usize, spec: Conv2dSpec, side: usize) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let n = rng.gen_range(1..=2);
    let x = rand_tensor(&[n, cin, side, side + 1], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[cout, cin / spec.groups, k, k], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[cout], &mut rng, -1.0, 1.0);
    check_inputs(&[x, w, b], seed, move |_, xs| xs[0].conv2d(xs[1], Some(xs[2]), spec))
}

/// Inputs of `scan_core`: u, raw Δ (mapped through `Δ = exp(raw)`), A, B, C, skip.
fn scan_core_case(seed: u64, mode: Discretization, log_delta: (f64, f64)) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let (b, l, d, n) = (rng.gen_range(1..=2), rng.gen_range(1..=5), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let inputs = [
        rand_tensor(&[b, l, d], &mut rng, -1.0, 1.0),
        rand_tensor(&[b, l, d], &mut rng, log_delta.0, log_delta.1),
        rand_tensor(&[d, n], &mut rng, -2.0, -0.5),
        rand_tensor(&[b, l, n], &mut rng, -1.0, 1.0),
        rand_tensor(&[b, l, n], &mut rng, -1.0, 1.0),
        rand_tensor(&[d], &mut rng, -1.0, 1.0),
    ];
    check_inputs(&inputs, seed, move |_, xs| {
        scan_core(xs[0], xs[1].exp(), xs[2], xs[3], xs[4], xs[5], mode)
    })
}

fn block_input(rng: &mut ChaCha8Rng, c: usize) -> Tensor<f64> {
    let (h, w) = (rng.gen_range(2..=3), rng.gen_range(2..=4));
    rand_tensor(&[2, c, h, w], rng, -1.0, 1.0)
}

fn vss_case(seed: u64, snake: bool) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let x = block_input(&mut rng, 4);
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut store = ParamStore::new();
    let cfg = VssConfig { state_dim: 2, ..VssConfig::default() };
    let weights = VssWeights::new(&mut store, "vss", 4, cfg, &mut rng);
    jitter(&mut store, &mut rng, 0.1);
    let dirs = Arc::new(if snake { DirectionSet::snake(h, w)? } else { DirectionSet::cross(h, w)? });
    check(&[x], &store, seed, move |_, xs, p| vss_forward(xs[0], &weights, &dirs, p))
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        ("relu", |s| unary(s, |x| Ok(x.relu()))),
        ("sigmoid", |s| unary(s, |x| Ok(x.sigmoid()))),
        ("silu", |s| unary(s, |x| Ok(x.silu()))),
        ("softplus", |s| unary(s, |x| Ok(x.scale(3.0).softplus()))),
        ("exp", |s| unary(s, |x| Ok(x.exp()))),
        ("neg", |s| unary(s, |x| Ok(x.neg()))),
        ("scale", |s| unary(s, |x| Ok(x.scale(-1.7)))),
        ("add_scalar", |s| unary(s, |x| Ok(x.add_scalar(0.3).mul(x)?))),
        ("add", |s| binary(s, |sh| sh.to_vec(), |a, b| a.add(b))),
        ("sub", |s| binary(s, |sh| sh.to_vec(), |a, b| a.sub(b))),
        ("mul", |s| binary(s, |sh| sh.to_vec(), |a, b| a.mul(b))),
        ("add_bcast", |s| binary(s, |sh| vec![sh[0], sh[1], 1, 1], |a, b| a.add_bcast(b))),
        ("mul_bcast", |s| binary(s, |sh| vec![1, sh[1], sh[2], 1], |a, b| a.mul_bcast(b))),
        ("reshape", |s| unary(s, |x| { let n = x.shape().iter().product(); x.reshape(&[n])?.mul(x.reshape(&[n])?) })),
        ("permute", |s| unary(s, |x| x.permute(&[2, 0, 3, 1])?.exp().permute(&[1, 3, 0, 2]))),
        ("narrow", |s| unary(s, |x| x.narrow(1, 1, 1))),
        ("concat", |s| binary(s, |sh| vec![sh[0], 1, sh[2], sh[3]], |a, b| Var::concat(&[b, a, b], 1))),
        ("sum_all", |s| unary(s, |x| Ok(x.mul(x)?.sum_all()))),
        ("mean_all", |s| unary(s, |x| Ok(x.exp().mean_all()))),
        ("max_axis", |s| unary(s, |x| x.max_axis(2))),
        ("mean_axis", |s| unary(s, |x| x.mean_axis(3))),
        ("global_max_pool", |s| unary(s, |x| x.global_max_pool())),
        ("global_avg_pool", |s| unary(s, |x| x.global_avg_pool())),
        ("channel_max", |s| unary(s, |x| x.channel_max())),
        ("channel_mean", |s| unary(s, |x| x.channel_mean())),
        ("softmax", |s| unary(s, |x| x.softmax(1))),
        ("linear", |s| {
            let mut rng = rng_for(s);
            let (fi, fo) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
            let x = rand_tensor(&[2, 3, fi], &mut rng, -1.0, 1.0);
            let w = rand_tensor(&[fo, fi], &mut rng, -1.0, 1.0);
            let b = rand_tensor(&[fo], &mut rng, -1.0, 1.0);
            check_inputs(&[x, w, b], s, |_, xs| {
                xs[0].linear(xs[1], Some(xs[2]))?.add(xs[0].linear(xs[1], None)?)
            })
        }),
        ("layer_norm_channels", |s| {
            let mut rng = rng_for(s);
            let x = rand_tensor(&[2, 4, 2, 3], &mut rng, -1.0, 1.0);
            let g = rand_tensor(&[4], &mut rng, 0.5, 1.5);
            let o = rand_tensor(&[4], &mut rng, -0.5, 0.5);
            check_inputs(&[x, g, o], s, |_, xs| xs[0].layer_norm(xs[1], xs[2], 1e-6, 1))
        }),
        ("layer_norm_last", |s| {
            let mut rng = rng_for(s);
            let x = rand_tensor(&[2, 3, 5], &mut rng, -1.0, 1.0);
            let g = rand_tensor(&[5], &mut rng, 0.5, 1.5);
            let o = rand_tensor(&[5], &mut rng, -0.5, 0.5);
            check_inputs(&[x, g, o], s, |_, xs| xs[0].layer_norm(xs[1], xs[2], 1e-6, 2))
        }),
        ("upsample_bilinear2x", |s| unary(s, |x| x.upsample_bilinear2x())),
        ("upsample_nearest2x", |s| unary(s, |x| x.upsample_nearest2x())),
        ("scan_expand", |s| {
            unary(s, |x| {
                let sh = x.shape();
                let dirs = Arc::new(DirectionSet::snake(sh[2], sh[3])?);
                Ok(x.scan_expand(&dirs)?.exp())
            })
        }),
        ("scan_merge", |s| {
            let mut rng = rng_for(s);
            let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let x = rand_tensor(&[2, 4, 3, h * w], &mut rng, -1.0, 1.0);
            check_inputs(&[x], s, move |_, xs| {
                let dirs = Arc::new(random_orders(h, w, s)?);
                xs[0].scan_merge(&dirs)
            })
        }),
        ("conv2d_3x3", |s| conv_case(s, 3, 2, 3, Conv2dSpec::new(1, 1, 1), 4)),
        ("conv2d_strided", |s| conv_case(s, 2, 3, 2, Conv2dSpec::new(2, 0, 1), 4)),
        ("conv2d_stem", |s| conv_case(s, 3, 2, 4, Conv2dSpec::new(4, 0, 1), 8)),
        ("conv2d_depthwise", |s| conv_case(s, 4, 4, 3, Conv2dSpec::new(1, 1, 4), 3)),
        ("conv2d_grouped_1x1", |s| conv_case(s, 4, 6, 1, Conv2dSpec::new(1, 0, 2), 3)),
        ("conv2d_7x7", |s| conv_case(s, 2, 1, 7, Conv2dSpec::new(1, 3, 1), 4)),
        ("drop_path", |s| {
            let mut rng = rng_for(s);
            let x = rand_tensor(&[4, 2, 2, 2], &mut rng, -1.0, 1.0);
            check_inputs(&[x], s, move |_, xs| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                drop_path(xs[0], 0.5, true, &mut rng)
            })
        }),
        ("scan_core_zoh", |s| scan_core_case(s, Discretization::Zoh, (-3.0, 0.5))),
        ("scan_core_series", |s| scan_core_case(s, Discretization::Zoh, (-14.0, -11.5))),
        ("scan_core_euler", |s| scan_core_case(s, Discretization::Euler, (-3.0, 0.5))),
        ("selective_scan", |s| {
            let mut rng = rng_for(s);
            let (d, n, r, l) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=2), rng.gen_range(1..=5));
            let (store, params) = random_scan_params(&mut rng, d, n, r, (-2.0, 0.5));
            let x = rand_tensor(&[2, l, d], &mut rng, -1.0, 1.0);
            check(&[x], &store, s, move |_, xs, p| selective_scan(xs[0], &params, p))
        }),
        ("dice_ce_loss", |s| {
            let mut rng = rng_for(s);
            let sh = small_shape(&mut rng);
            let z = rand_tensor(&[sh[0], 2, sh[2], sh[3]], &mut rng, -2.0, 2.0);
            let t = Tensor::new(
                &[sh[0], sh[2], sh[3]],
                (0..sh[0] * sh[2] * sh[3]).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect(),
            )?;
            check_inputs(&[z], s, move |_, xs| dice_ce_loss(xs[0], &t))
        }),
        ("sca", |s| {
            let mut rng = rng_for(s);
            let x = block_input(&mut rng, 4);
            let mut store = ParamStore::new();
            let w = ScaWeights::new(&mut store, "sca", 4, ScaConfig { ratio: 2, kernel: 3 }, &mut rng);
            jitter(&mut store, &mut rng, 0.2);
            check(&[x], &store, s, move |_, xs, p| sca_forward(xs[0], &w, p))
        }),
        ("vss", |s| vss_case(s, false)),
        ("snake_vss", |s| vss_case(s, true)),
        ("scvss", |s| {
            let mut rng = rng_for(s);
            let x = block_input(&mut rng, 4);
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let mut store = ParamStore::new();
            let cfg = ScvssConfig {
                vss: VssConfig { state_dim: 2, ..VssConfig::default() },
                sca: ScaConfig { ratio: 2, kernel: 3 },
                mlp_ratio: 2,
                drop_path: 0.3,
                ..ScvssConfig::default()
            };
            let weights = ScvssWeights::new(&mut store, "blk", 4, &cfg, &mut rng)?;
            jitter(&mut store, &mut rng, 0.1);
            let dirs = BlockDirections::standard(h, w)?;
            check(&[x], &store, s, move |_, xs, p| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                scvss_forward(xs[0], &weights, &dirs, p, true, &mut rng)
            })
        }),
        ("decoder_block", |s| {
            let mut rng = rng_for(s);
            let x = rand_tensor(&[2, 4, 2, 3], &mut rng, -1.0, 1.0);
            let skip = rand_tensor(&[2, 3, 4, 6], &mut rng, -1.0, 1.0);
            let mut store = ParamStore::new();
            let up = if s % 2 == 0 { Upsample::Bilinear } else { Upsample::Nearest };
            let w = DecoderWeights::new(&mut store, "dec", 4, 3, 3, up, &mut rng);
            jitter(&mut store, &mut rng, 0.1);
            check(&[x, skip], &store, s, move |_, xs, p| decoder_block(xs[0], xs[1], &w, p))
        }),
        ("seg_head", |s| {
            let mut rng = rng_for(s);
            let x = rand_tensor(&[2, 3, 3, 4], &mut rng, -1.0, 1.0);
            let mut store = ParamStore::new();
            let w = SegHeadWeights::new(&mut store, "head", 3, 2, &mut rng);
            jitter(&mut store, &mut rng, 0.1);
            check(&[x], &store, s, move |_, xs, p| seg_head(xs[0], &w, p))
        }),
        ("tiny_model", |s| {
            let mut rng = rng_for(s);
            let mut model = Model::<f64>::build(tiny_config(), s)?;
            jitter(&mut model.params, &mut rng, 0.05);
            let x = rand_tensor(&[2, 3, 32, 32], &mut rng, 0.0, 1.0);
            let t = Tensor::new(&[2, 32, 32], (0..2048).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect())?;
            let weights = TrainConfig::default().ds_weights;
            let store = model.params.clone();
            check(&[x], &store, s, move |_, xs, p| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let out = model.forward(xs[0], p, true, &mut rng)?;
                deep_supervision_loss(&out, &t, &weights)
            })
        }),
    ]
}

pub const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn run_gradient_case(s: &mut Suite, name: &str, case: fn(u64) -> Result<GradReport>) {
    for seed in GRAD_SEEDS {
        match case(seed) {
            Ok(r) => s.check(r.passed(), || {
                format!("{name} seed {seed}: relative error {:e} at {}", r.worst, r.worst_at)
            }),
            Err(e) => s.check(false, || format!("{name} seed {seed}: {e}")),
        }
    }
}

pub fn gradient_suite() -> Suite {
    let mut s = Suite::default();
    for (name, case) in gradient_cases() {
        run_gradient_case(&mut s, name, case);
    }
    s
}

// ---------------------------------------------------------------- loss / metrics

pub fn loss_metric_suite() -> Suite {
    let mut s = Suite::default();

    // Uniform logits on a balanced target.
    let z = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let t = Tensor::new(&[1, 4, 4], (0..16).map(|i| f64::from((i % 2) as u8)).collect()).unwrap();
    let (ce, dice) = loss_terms(&z, &t).unwrap();
    s.check((ce - std::f64::consts::LN_2).abs() <= 1e-9, || format!("uniform CE = {ce}"));
    let g = Graph::new();
    let total = dice_ce_loss(g.constant(z), &t).unwrap().tensor().data()[0];
    s.check((total - (ce + dice)).abs() < 1e-15, || format!("loss {total} != CE + Dice {}", ce + dice));

    // Hand confusion matrix.
    let pred = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let gt = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let m = compute_metrics(&pred, &gt).unwrap();
    s.check(m.miou() == 1.0 / 3.0, || format!("2x2 mIoU = {}", m.miou()));
    s.check(m.iou() == [1.0 / 3.0, 1.0 / 3.0] && m.f1() == 0.5, || {
        format!("2x2 IoU {:?}, F1 {}", m.iou(), m.f1())
    });

    // 1×2×2×2 reference evaluated in extended precision.
    let row = &fixture_rows("loss_case.tsv")[0];
    let want: Vec<f64> = row.iter().map(|v| v.parse().unwrap()).collect();
    let z = Tensor::new(&[1, 2, 2, 2], vec![0.3, -1.1, 2.0, 0.25, -0.4, 0.9, 1.5, -2.2]).unwrap();
    let t = Tensor::new(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let (ce, dice) = loss_terms(&z, &t).unwrap();
    s.check((ce - want[0]).abs() < 1e-12 && (dice - want[1]).abs() < 1e-12, || {
        format!("1x2x2x2 case: CE {ce}, Dice {dice}; reference {}, {}", want[0], want[1])
    });

    // Scripted AdamW trace.
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(0.5));
    let mut state = AdamState::new(&store);
    let cfg = TrainConfig::default();
    for row in fixture_rows("adamw_trace.tsv") {
        let (grad, want): (f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
        store.get_mut(id).grad = Tensor::scalar(grad);
        adamw_step(&mut store, &mut state, 0.01, &cfg);
        let got = store.get(id).value.data()[0];
        s.check((got - want).abs() < 1e-12, || format!("AdamW step {}: {got} vs {want}", row[0]));
    }
    s
}

// ---------------------------------------------------------------- training runs

pub const OVERFIT_EPOCHS: usize = 300;

pub struct OverfitRun {
    pub log: String,
    pub last: EpochRecord,
    pub elapsed: Duration,
}

pub fn overfit_samples() -> Vec<Sample> {
    let spec = GenSpec {
        count: 8,
        size: 64,
        seed: 7,
        crack_free_frac: 0.0,
        test_ratio: 0.05,
    };
    generate(&spec).unwrap().into_iter().map(|(_, s)| s).collect()
}

/// Default model, eight 64×64 samples, default schedule, single thread.
/// With no validation set the logged mIoU is the training-set mIoU.
pub fn overfit_run() -> Result<OverfitRun> {
    let samples = overfit_samples();
    let start = Instant::now();
    let cfg = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::build(ModelConfig::default(), cfg.seed)?;
    let mut log = Vec::new();
    let outcome = train(&mut model, &samples, &[], &cfg, 1, &mut log)?;
    Ok(OverfitRun {
        log: String::from_utf8(log).unwrap(),
        last: *outcome.history.last().unwrap(),
        elapsed: start.elapsed(),
    })
}

pub const ABLATION_EPOCHS: usize = 3;

/// Runs `cmd_ablate` on a fresh 64-sample dataset. Returns the table.
pub fn ablation_run() -> Result<String> {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenSpec {
        count: 64,
        size: 64,
        seed: 3,
        crack_free_frac: 0.0,
        test_ratio: 0.05,
    };
    write_dataset(dir.path(), &generate(&spec)?)?;
    let rc = RunConfig {
        data: Some(dir.path().to_path_buf()),
        train: TrainConfig {
            epochs: ABLATION_EPOCHS,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    cmd_ablate(&rc, 1)
}

/// Checks the table shape and the parameter ordering.
pub fn check_ablation_table(table: &str) -> Suite {
    let mut s = Suite::default();
    let lines: Vec<&str> = table.lines().collect();
    s.check(lines.first() == Some(&"variant\tparams\tval_miou\tval_f1"), || {
        format!("bad header {:?}", lines.first())
    });
    let rows: Vec<Vec<&str>> = lines.iter().skip(1).map(|l| l.split('\t').collect()).collect();
    s.check(rows.len() == 5, || format!("{} rows", rows.len()));
    let mut params = std::collections::HashMap::new();
    for row in &rows {
        let ok = row.len() == 4
            && row[1].parse::<usize>().is_ok()
            && row[2..].iter().all(|v| v.parse::<f64>().is_ok_and(|x| (0.0..=1.0).contains(&x)));
        s.check(ok, || format!("malformed row {row:?}"));
        if ok {
            params.insert(row[0], row[1].parse::<usize>().unwrap());
        }
    }
    let chain = ["cross-only", "both", "+conv", "+sca"];
    let counts: Vec<Option<&usize>> = chain.iter().map(|v| params.get(v)).collect();
    s.check(
        counts.iter().all(Option::is_some) && counts.windows(2).all(|w| w[0] < w[1]),
        || format!("parameter counts not strictly increasing along {chain:?}: {counts:?}"),
    );
    s
}
