//! Naive reference implementations used as test oracles. They share no
//! code with the library beyond the `Tensor` container.

use crackmamba::nn::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Direct cross-correlation, one output value at a time.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let &[n, cin, h, wd] = x.shape() else { panic!() };
    let &[cout, cin_g, kh, kw] = w.shape() else { panic!() };
    assert_eq!(cin_g * groups, cin);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = x.at(&[bi, g * cin_g + ci, iy as usize, ix as usize]);
                                acc += xi * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// Layer norm over `axis` with `(x − mean) / sqrt(var + eps) · gain + offset`.
pub fn layer_norm(x: &Tensor<f64>, gain: &[f64], offset: &[f64], eps: f64, axis: usize) -> Tensor<f64> {
    let shape = x.shape().to_vec();
    let c = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * c + k) * inner + i;
            let mean = (0..c).map(|k| x.data()[idx(k)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|k| (x.data()[idx(k)] - mean).powi(2)).sum::<f64>() / c as f64;
            for k in 0..c {
                out[idx(k)] = (x.data()[idx(k)] - mean) / (var + eps).sqrt() * gain[k] + offset[k];
            }
        }
    }
    Tensor::new(&shape, out).unwrap()
}

/// Bilinear 2× upsampling with half-pixel centres (`align_corners = false`).
pub fn upsample_bilinear2x(x: &Tensor<f64>) -> Tensor<f64> {
    let &[n, c, h, w] = x.shape() else { panic!() };
    let src = |o: usize, len: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..2 * h {
                let (y0, y1, fy) = src(oy, h);
                for ox in 0..2 * w {
                    let (x0, x1, fx) = src(ox, w);
                    let v = |y, xx| x.at(&[b, ch, y, xx]);
                    out.push(
                        v(y0, x0) * (1.0 - fy) * (1.0 - fx)
                            + v(y0, x1) * (1.0 - fy) * fx
                            + v(y1, x0) * fy * (1.0 - fx)
                            + v(y1, x1) * fy * fx,
                    );
                }
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out).unwrap()
}

/// `y[.., o] = Σ_i x[.., i] w[o, i] + b[o]` over the last axis.
pub fn linear(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let &[out_f, in_f] = w.shape() else { panic!() };
    let rows = x.len() / in_f;
    let mut out = Vec::with_capacity(rows * out_f);
    for r in 0..rows {
        for o in 0..out_f {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..in_f {
                acc += x.data()[r * in_f + i] * w.data()[o * in_f + i];
            }
            out.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(&shape, out).unwrap()
}

pub fn concat_channels(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let &[n, ca, h, w] = a.shape() else { panic!() };
    let cb = b.shape()[1];
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for bi in 0..n {
        out.extend_from_slice(&a.data()[bi * ca * h * w..(bi + 1) * ca * h * w]);
        out.extend_from_slice(&b.data()[bi * cb * h * w..(bi + 1) * cb * h * w]);
    }
    Tensor::new(&[n, ca + cb, h, w], out).unwrap()
}

/// `[N,C,H,W] ↔ [N,H,W,C]` by explicit index arithmetic.
pub fn to_tokens(x: &Tensor<f64>) -> Tensor<f64> {
    let &[n, c, h, w] = x.shape() else { panic!() };
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[((b * h + y) * w + xx) * c + ch] = x.at(&[b, ch, y, xx]);
                }
            }
        }
    }
    Tensor::new(&[n, h, w, c], out).unwrap()
}

pub fn to_map(x: &Tensor<f64>) -> Tensor<f64> {
    let &[n, h, w, c] = x.shape() else { panic!() };
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    out[((b * c + ch) * h + y) * w + xx] = x.at(&[b, y, xx, ch]);
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out).unwrap()
}

/// Parameters of one selective scan direction in plain arrays.
pub struct ScanParams {
    /// `[R + 2N][D]`
    pub x_proj: Vec<Vec<f64>>,
    /// `[D][R]`
    pub dt_proj: Vec<Vec<f64>>,
    pub dt_bias: Vec<f64>,
    /// `[D][N]`
    pub a_log: Vec<Vec<f64>>,
    pub skip: Vec<f64>,
    pub rank: usize,
    pub state: usize,
}

impl ScanParams {
    pub fn from_tensors(
        x_proj: &Tensor<f64>,
        dt_proj: &Tensor<f64>,
        dt_bias: &Tensor<f64>,
        a_log: &Tensor<f64>,
        skip: &Tensor<f64>,
    ) -> Self {
        let rows = |t: &Tensor<f64>| -> Vec<Vec<f64>> {
            let cols = t.shape()[1];
            t.data().chunks(cols).map(<[f64]>::to_vec).collect()
        };
        let rank = dt_proj.shape()[1];
        let state = a_log.shape()[1];
        ScanParams {
            x_proj: rows(x_proj),
            dt_proj: rows(dt_proj),
            dt_bias: dt_bias.data().to_vec(),
            a_log: rows(a_log),
            skip: skip.data().to_vec(),
            rank,
            state,
        }
    }
}

/// Δ, B and C of one token.
fn step_inputs(p: &ScanParams, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let proj: Vec<f64> = p
        .x_proj
        .iter()
        .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
        .collect();
    let (dt_in, rest) = proj.split_at(p.rank);
    let (b, c) = rest.split_at(p.state);
    let delta = p
        .dt_proj
        .iter()
        .zip(&p.dt_bias)
        .map(|(row, bias)| softplus(row.iter().zip(dt_in).map(|(w, v)| w * v).sum::<f64>() + bias))
        .collect();
    (delta, b.to_vec(), c.to_vec())
}

/// Exact zero-order hold without any series shortcut.
fn zoh(delta: f64, a: f64, b: f64) -> (f64, f64) {
    let a_bar = (delta * a).exp();
    (a_bar, (a_bar - 1.0) / a * b)
}

/// Selective scan over at most four tokens written out step by step.
/// `tokens[t][d]`; returns `y[t][d]`.
pub fn selective_scan_unrolled(tokens: &[Vec<f64>], p: &ScanParams) -> Vec<Vec<f64>> {
    assert!(!tokens.is_empty() && tokens.len() <= 4);
    let d = tokens[0].len();
    let mut y = vec![vec![0.0; d]; tokens.len()];
    let inputs: Vec<_> = tokens.iter().map(|x| step_inputs(p, x)).collect();
    for ch in 0..d {
        for n in 0..p.state {
            let a = -p.a_log[ch][n].exp();
            let coef = |t: usize| {
                let (delta, b, _) = &inputs[t];
                zoh(delta[ch], a, b[n])
            };
            let c = |t: usize| inputs[t].2[n];
            let x = |t: usize| tokens[t][ch];
            // h1 = B̄1 x1; h2 = Ā2 h1 + B̄2 x2; ...
            let (_, b1) = coef(0);
            let h1 = b1 * x(0);
            y[0][ch] += c(0) * h1;
            if tokens.len() > 1 {
                let (a2, b2) = coef(1);
                let h2 = a2 * h1 + b2 * x(1);
                y[1][ch] += c(1) * h2;
                if tokens.len() > 2 {
                    let (a3, b3) = coef(2);
                    let h3 = a3 * h2 + b3 * x(2);
                    y[2][ch] += c(2) * h3;
                    if tokens.len() > 3 {
                        let (a4, b4) = coef(3);
                        let h4 = a4 * h3 + b4 * x(3);
                        y[3][ch] += c(3) * h4;
                    }
                }
            }
        }
        for t in 0..tokens.len() {
            y[t][ch] += p.skip[ch] * tokens[t][ch];
        }
    }
    y
}

/// Selective scan of any length by the plain recurrence (for shapes beyond
/// the unrolled oracle).
pub fn selective_scan_loop(tokens: &[Vec<f64>], p: &ScanParams) -> Vec<Vec<f64>> {
    let d = tokens[0].len();
    let mut y = vec![vec![0.0; d]; tokens.len()];
    let mut h = vec![vec![0.0; p.state]; d];
    for (t, x) in tokens.iter().enumerate() {
        let (delta, b, c) = step_inputs(p, x);
        for ch in 0..d {
            let mut acc = p.skip[ch] * x[ch];
            for n in 0..p.state {
                let (a_bar, b_bar) = zoh(delta[ch], -p.a_log[ch][n].exp(), b[n]);
                h[ch][n] = a_bar * h[ch][n] + b_bar * x[ch];
                acc += c[n] * h[ch][n];
            }
            y[t][ch] = acc;
        }
    }
    y
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}
