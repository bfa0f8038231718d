//! State-space sequence core.
//!
//! A diagonal continuous system `h' = A h + B x`, `y = C h` is discretized
//! with the zero-order hold
//!
//! ```text
//! Ā = exp(ΔA)
//! B̄ = (ΔA)⁻¹ (exp(ΔA) − 1) · ΔB = ((exp(ΔA) − 1) / A) · B
//! ```
//!
//! and run either as the recurrence `h(t) = Ā h(t−1) + B̄ x(t)`,
//! `y(t) = C h(t)`, or (time-invariant case only) as a causal convolution
//! with the kernel `K̄ = (C B̄, C Ā B̄, …, C Ā^{L−1} B̄)`.
//!
//! The selective variant derives `Δ`, `B` and `C` from each token and is
//! recorded on the differentiation tape as a single fused operation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::{fan_in_uniform, Bound, ParamId, ParamStore, Real, Tensor, Var};

/// Below this `|ΔA|` the input gain falls back to its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// How `B̄` is formed from `Δ`, `A` and `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// Exact zero-order hold, `B̄ = ((exp(ΔA) − 1)/A)·B`.
    #[default]
    Zoh,
    /// First-order shortcut `B̄ = Δ·B` (Ā is still `exp(ΔA)`).
    Euler,
}

/// `(exp(z) − 1)/z`, continuous at 0.
fn expm1_ratio<T: Real>(z: T) -> T {
    if z.abs() < T::c(SERIES_THRESHOLD) {
        T::one() + z * (T::c(0.5) + z * (T::c(1.0 / 6.0) + z * T::c(1.0 / 24.0)))
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`expm1_ratio`].
fn expm1_ratio_deriv<T: Real>(z: T) -> T {
    if z.abs() < T::c(0.1) {
        // Σ_{k≥1} k z^{k−1} / (k+1)!
        let mut acc = T::zero();
        let mut fact = 1.0f64; // (k+1)!
        let mut coeffs = [0.0f64; 10];
        for (k, c) in coeffs.iter_mut().enumerate() {
            let k = k + 1;
            fact *= (k + 1) as f64;
            *c = k as f64 / fact;
        }
        for &c in coeffs.iter().rev() {
            acc = acc * z + T::c(c);
        }
        acc
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Input gain `B̄/B` for one `(Δ, A)` pair.
fn input_gain<T: Real>(delta: T, a: T, mode: Discretization) -> T {
    match mode {
        Discretization::Zoh => delta * expm1_ratio(delta * a),
        Discretization::Euler => delta,
    }
}

/// Zero-order-hold discretization of one `(Δ, A, B)` triple.
pub fn zoh_discretize<T: Real>(delta: T, a: T, b: T) -> Result<(T, T)> {
    discretize(delta, a, b, Discretization::Zoh)
}

pub fn discretize<T: Real>(delta: T, a: T, b: T, mode: Discretization) -> Result<(T, T)> {
    if !(delta > T::zero()) {
        return Err(invalid(format!("step size must be positive, got {delta}")));
    }
    Ok(((delta * a).exp(), input_gain(delta, a, mode) * b))
}

/// Discretized parameters, one entry per state dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum DiscreteSsm<T> {
    /// Time-invariant: `a_bar[n]`, `b_bar[n]`, `c[n]`.
    Lti {
        a_bar: Vec<T>,
        b_bar: Vec<T>,
        c: Vec<T>,
        skip: Option<T>,
    },
    /// Per step: `a_bar[t][n]`, `b_bar[t][n]`, `c[t][n]`.
    Selective {
        a_bar: Vec<Vec<T>>,
        b_bar: Vec<Vec<T>>,
        c: Vec<Vec<T>>,
        skip: Option<T>,
    },
}

impl<T: Real> DiscreteSsm<T> {
    pub fn lti(a_bar: Vec<T>, b_bar: Vec<T>, c: Vec<T>) -> Self {
        DiscreteSsm::Lti {
            a_bar,
            b_bar,
            c,
            skip: None,
        }
    }

    pub fn with_skip(mut self, d: T) -> Self {
        match &mut self {
            DiscreteSsm::Lti { skip, .. } | DiscreteSsm::Selective { skip, .. } => *skip = Some(d),
        }
        self
    }

    fn state_dim(&self) -> usize {
        match self {
            DiscreteSsm::Lti { a_bar, .. } => a_bar.len(),
            DiscreteSsm::Selective { a_bar, .. } => a_bar.first().map_or(0, Vec::len),
        }
    }

    fn validate(&self, len: usize) -> Result<()> {
        let n = self.state_dim();
        match self {
            DiscreteSsm::Lti { a_bar, b_bar, c, .. } => {
                if b_bar.len() != n || c.len() != n || a_bar.len() != n {
                    return Err(invalid("LTI parameters disagree on state size"));
                }
            }
            DiscreteSsm::Selective { a_bar, b_bar, c, .. } => {
                if a_bar.len() != len || b_bar.len() != len || c.len() != len {
                    return Err(invalid(format!(
                        "selective parameters cover {}/{}/{} steps, input has {len}",
                        a_bar.len(),
                        b_bar.len(),
                        c.len()
                    )));
                }
                let ragged = |v: &Vec<Vec<T>>| v.iter().any(|s| s.len() != n);
                if ragged(a_bar) || ragged(b_bar) || ragged(c) {
                    return Err(invalid("selective parameters disagree on state size"));
                }
            }
        }
        Ok(())
    }
}

/// Runs `h(t) = Ā(t) h(t−1) + B̄(t) x(t)`, `y(t) = C(t) h(t) [+ D x(t)]`
/// from `h(0) = 0`.
pub fn ssm_recurrence<T: Real>(ssm: &DiscreteSsm<T>, x: &[T]) -> Result<Vec<T>> {
    ssm.validate(x.len())?;
    let mut h = vec![T::zero(); ssm.state_dim()];
    let mut y = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        let (a_bar, b_bar, c, skip) = match ssm {
            DiscreteSsm::Lti { a_bar, b_bar, c, skip } => (a_bar, b_bar, c, skip),
            DiscreteSsm::Selective { a_bar, b_bar, c, skip } => (&a_bar[t], &b_bar[t], &c[t], skip),
        };
        let mut yt = skip.map_or(T::zero(), |d| d * xt);
        for n in 0..h.len() {
            h[n] = a_bar[n] * h[n] + b_bar[n] * xt;
            yt += c[n] * h[n];
        }
        y.push(yt);
    }
    Ok(y)
}

/// Convolution kernel of a time-invariant system, summed over state
/// dimensions. The skip term is not part of the kernel.
pub fn ssm_kernel<T: Real>(ssm: &DiscreteSsm<T>, len: usize) -> Result<Vec<T>> {
    let DiscreteSsm::Lti { a_bar, b_bar, c, .. } = ssm else {
        return Err(Error::InvalidMode(
            "convolution kernel needs time-invariant parameters".into(),
        ));
    };
    ssm.validate(len)?;
    let mut power: Vec<T> = b_bar.clone();
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        kernel.push(c.iter().zip(&power).map(|(&ci, &p)| ci * p).sum());
        for (p, &a) in power.iter_mut().zip(a_bar) {
            *p *= a;
        }
    }
    Ok(kernel)
}

/// Causal convolution `y(t) = Σ_{τ≤t} K̄(τ) x(t−τ)`.
pub fn ssm_conv_apply<T: Real>(x: &[T], kernel: &[T]) -> Result<Vec<T>> {
    if x.len() != kernel.len() {
        return Err(invalid(format!(
            "input has {} steps but kernel has {}",
            x.len(),
            kernel.len()
        )));
    }
    Ok((0..x.len())
        .map(|t| (0..=t).map(|tau| kernel[tau] * x[t - tau]).sum())
        .collect())
}

/// Trainable parameters of one selective scan direction.
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// `[dt_rank + 2·state_dim, inner]`, produces the Δ input, `B(t)` and `C(t)`.
    pub x_proj: ParamId,
    /// `[inner, dt_rank]`
    pub dt_proj: ParamId,
    /// `[inner]`
    pub dt_bias: ParamId,
    /// `[inner, state_dim]`, `A = −exp(a_log)`.
    pub a_log: ParamId,
    /// `[inner]` skip gain.
    pub skip: ParamId,
    pub inner: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    pub mode: Discretization,
}

/// `log(exp(y) − 1)`, the inverse of softplus.
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    /// Registers parameters under `prefix`. `A[n] = −(n+1)`, `D = 1`, and the
    /// Δ bias is chosen so that the initial step sizes are log-uniform in
    /// `[0.01, 0.1]`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inner: usize,
        state_dim: usize,
        dt_rank: usize,
        mode: Discretization,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let x_proj = store.add(
            format!("{prefix}.x_proj"),
            fan_in_uniform(&[dt_rank + 2 * state_dim, inner], inner, rng),
        );
        let dt_proj = store.add(
            format!("{prefix}.dt_proj"),
            fan_in_uniform(&[inner, dt_rank], dt_rank, rng),
        );
        let bias: Vec<T> = (0..inner)
            .map(|_| {
                let dt = rng.gen_range(0.01f64.ln()..0.1f64.ln()).exp();
                T::c(inverse_softplus(dt))
            })
            .collect();
        let dt_bias = store.add(format!("{prefix}.dt_bias"), Tensor::new(&[inner], bias).expect("shape"));
        let a_log: Vec<T> = (0..inner)
            .flat_map(|_| (0..state_dim).map(|n| T::c(((n + 1) as f64).ln())))
            .collect();
        let a_log = store.add(format!("{prefix}.a_log"), Tensor::new(&[inner, state_dim], a_log).expect("shape"));
        let skip = store.add(format!("{prefix}.skip"), Tensor::full(&[inner], T::one()));
        SsmParams {
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            skip,
            inner,
            state_dim,
            dt_rank,
            mode,
        }
    }
}

/// Selective scan over token-form input `[B, L, inner]`.
///
/// Per token: `[δ_in | B(t) | C(t)] = x_proj · x(t)`,
/// `Δ(t) = softplus(dt_proj · δ_in + dt_bias)`, then the discretized
/// recurrence runs independently per inner channel.
pub fn selective_scan<'g, T: Real>(
    tokens: Var<'g, T>,
    params: &SsmParams,
    bound: &Bound<'g, T>,
) -> Result<Var<'g, T>> {
    let shape = tokens.shape();
    if shape.len() != 3 || shape[2] != params.inner {
        return Err(invalid(format!(
            "selective_scan expects [B, L, {}], got {shape:?}",
            params.inner
        )));
    }
    let (r, n) = (params.dt_rank, params.state_dim);
    let proj = tokens.linear(bound.get(params.x_proj), None)?;
    let dt_in = proj.narrow(2, 0, r)?;
    let b = proj.narrow(2, r, n)?;
    let c = proj.narrow(2, r + n, n)?;
    let delta = dt_in
        .linear(bound.get(params.dt_proj), Some(bound.get(params.dt_bias)))?
        .softplus();
    let a = bound.get(params.a_log).exp().neg();
    scan_core(tokens, delta, a, b, c, bound.get(params.skip), params.mode)
}

/// Fused discretize-and-scan.
///
/// Shapes: `u, delta: [B,L,D]`, `a: [D,N]`, `b, c: [B,L,N]`, `skip: [D]`.
pub fn scan_core<'g, T: Real>(
    u: Var<'g, T>,
    delta: Var<'g, T>,
    a: Var<'g, T>,
    b: Var<'g, T>,
    c: Var<'g, T>,
    skip: Var<'g, T>,
    mode: Discretization,
) -> Result<Var<'g, T>> {
    let (out, states, dims) = {
        let (uv, dv, av, bv, cv, sv) = (u.value(), delta.value(), a.value(), b.value(), c.value(), skip.value());
        let &[bs, len, d] = uv.shape() else {
            return Err(invalid(format!("scan_core: u must be [B,L,D], got {:?}", uv.shape())));
        };
        let &[_, n] = av.shape() else {
            return Err(invalid(format!("scan_core: A must be [D,N], got {:?}", av.shape())));
        };
        if dv.shape() != uv.shape()
            || av.shape() != [d, n]
            || bv.shape() != [bs, len, n]
            || cv.shape() != [bs, len, n]
            || sv.shape() != [d]
        {
            return Err(invalid(format!(
                "scan_core: inconsistent shapes u{:?} delta{:?} A{:?} B{:?} C{:?} D{:?}",
                uv.shape(),
                dv.shape(),
                av.shape(),
                bv.shape(),
                cv.shape(),
                sv.shape()
            )));
        }
        let (ud, dd, ad, bd, cd, sd) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data(), sv.data());
        let mut y = vec![T::zero(); bs * len * d];
        // h_t for every (batch, channel, step, state): needed by the reverse pass.
        let mut states = vec![T::zero(); bs * d * len * n];
        let mut h = vec![T::zero(); n];
        for bi in 0..bs {
            for di in 0..d {
                h.iter_mut().for_each(|v| *v = T::zero());
                let arow = &ad[di * n..(di + 1) * n];
                for t in 0..len {
                    let tok = (bi * len + t) * d + di;
                    let (xt, dt) = (ud[tok], dd[tok]);
                    let brow = &bd[(bi * len + t) * n..][..n];
                    let crow = &cd[(bi * len + t) * n..][..n];
                    let mut yt = sd[di] * xt;
                    for k in 0..n {
                        let abar = (dt * arow[k]).exp();
                        h[k] = abar * h[k] + input_gain(dt, arow[k], mode) * brow[k] * xt;
                        yt += crow[k] * h[k];
                    }
                    if !yt.is_finite() {
                        return Err(Error::NumericFault {
                            location: "selective_scan".into(),
                            step: Some(t),
                        });
                    }
                    y[tok] = yt;
                    states[((bi * d + di) * len + t) * n..][..n].copy_from_slice(&h);
                }
            }
        }
        (Tensor::new(&[bs, len, d], y)?, states, (bs, len, d, n))
    };
    Ok(u.graph().op(out, &[u, delta, a, b, c, skip], move |args| {
        let (bs, len, d, n) = dims;
        let [uv, dv, av, bv, cv, sv] = args.inputs else {
            unreachable!("six inputs")
        };
        let (ud, dd, ad, bd, cd, sd) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data(), sv.data());
        let g = args.grad.data();
        let mut gu = vec![T::zero(); ud.len()];
        let mut gdelta = vec![T::zero(); dd.len()];
        let mut ga = vec![T::zero(); ad.len()];
        let mut gb = vec![T::zero(); bd.len()];
        let mut gc = vec![T::zero(); cd.len()];
        let mut gskip = vec![T::zero(); sd.len()];
        let mut gh = vec![T::zero(); n];
        for bi in 0..bs {
            for di in 0..d {
                gh.iter_mut().for_each(|v| *v = T::zero());
                let arow = &ad[di * n..(di + 1) * n];
                for t in (0..len).rev() {
                    let tok = (bi * len + t) * d + di;
                    let (xt, dt, gy) = (ud[tok], dd[tok], g[tok]);
                    let row = (bi * len + t) * n;
                    let hs = &states[((bi * d + di) * len + t) * n..][..n];
                    let hprev = (t > 0).then(|| &states[((bi * d + di) * len + t - 1) * n..][..n]);
                    gskip[di] += gy * xt;
                    let mut gx = gy * sd[di];
                    let mut gdt = T::zero();
                    for k in 0..n {
                        let ak = arow[k];
                        let bk = bd[row + k];
                        gc[row + k] += gy * hs[k];
                        gh[k] += cd[row + k] * gy;
                        let abar = (dt * ak).exp();
                        let gain = input_gain(dt, ak, mode);
                        let g_abar = hprev.map_or(T::zero(), |hp| gh[k] * hp[k]);
                        let g_bbar = gh[k] * xt;
                        gx += gh[k] * gain * bk;
                        gdt += g_abar * ak * abar;
                        let mut g_ak = g_abar * dt * abar;
                        match mode {
                            Discretization::Zoh => {
                                gdt += g_bbar * bk * abar;
                                g_ak += g_bbar * bk * dt * dt * expm1_ratio_deriv(dt * ak);
                            }
                            Discretization::Euler => gdt += g_bbar * bk,
                        }
                        ga[di * n + k] += g_ak;
                        gb[row + k] += g_bbar * gain;
                        gh[k] *= abar;
                    }
                    gu[tok] += gx;
                    gdelta[tok] += gdt;
                }
            }
        }
        let t = |s: &Tensor<T>, v: Vec<T>| Some(Tensor::new(s.shape(), v).expect("shape"));
        vec![
            t(uv, gu),
            t(dv, gdelta),
            t(av, ga),
            t(bv, gb),
            t(cv, gc),
            t(sv, gskip),
        ]
    }))
}
