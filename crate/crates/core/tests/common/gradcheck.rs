//! Central finite-difference gradient checks at 64-bit.
//!
//! The analytic side is one seeded reverse pass with a random output
//! cotangent `R`. The numeric side differentiates `⟨f(x), R⟩` along random
//! directions and along individual coordinates of every input and every
//! trainable parameter.
//!
//! ReLU and max reductions have kinks. When a probe's interval straddles
//! one, the difference quotient is wrong at that step but becomes right
//! once the step is small enough, so each probe walks down [`STEPS`] and
//! passes at the first step that agrees. A wrong analytic gradient
//! disagrees at every step.
//!
//! Near-zero derivatives are compared against an absolute floor set by the
//! rounding noise of the difference quotient (`~eps·|f|/h`).

use crackmamba::nn::{Bound, Graph, ParamStore, Tensor, Var};
use crackmamba::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::rand_tensor;

pub const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
pub const REL_TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-5;
const DIRECTIONS: usize = 2;
const COORDINATES: usize = 4;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub worst: f64,
    pub worst_at: String,
    pub checks: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checks > 0 && self.worst < REL_TOL
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Checks `f(inputs, params)`. Inputs and unfrozen parameters are all
/// differentiated; frozen parameters are left alone.
pub fn check<F>(inputs: &[Tensor<f64>], store: &ParamStore<f64>, seed: u64, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>], &Bound<'g, f64>) -> Result<Var<'g, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let bound = store.bind(&g);
    let out = f(&g, &vars, &bound)?;
    let cotangent = rand_tensor(&out.shape(), &mut rng, -1.0, 1.0);
    let grads = g.backward_seeded(out, cotangent.clone())?;

    let objective = |xs: &[Tensor<f64>], ps: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let bound = ps.bind(&g);
        let out = f(&g, &vars, &bound)?;
        let v = out.value();
        Ok(v.data().iter().zip(cotangent.data()).map(|(a, b)| a * b).sum())
    };

    let mut report = GradReport {
        worst: 0.0,
        worst_at: String::new(),
        checks: 0,
    };
    let record = |report: &mut GradReport, a: f64, n: f64, at: String| {
        let e = rel_err(a, n);
        report.checks += 1;
        if e > report.worst || e.is_nan() {
            report.worst = if e.is_nan() { f64::INFINITY } else { e };
            report.worst_at = format!("{at}: analytic {a:e} numeric {n:e}");
        }
    };

    // Directions over inputs.
    for (i, var) in vars.iter().enumerate() {
        let grad = grads.get_or_zeros(*var);
        for k in 0..DIRECTIONS + COORDINATES {
            let dir = direction(grad.shape(), k, &mut rng);
            let analytic = dot(&grad, &dir);
            let shifted = |s: f64| {
                let mut xs = inputs.to_vec();
                xs[i] = axpy(&inputs[i], s, &dir);
                objective(&xs, store)
            };
            let numeric = settle(analytic, shifted)?;
            record(&mut report, analytic, numeric, format!("input {i} probe {k}"));
        }
    }

    // Directions over parameters.
    for (pi, param) in store.params().iter().enumerate() {
        if param.frozen {
            continue;
        }
        let grad = grads.get_or_zeros(bound.vars()[pi]);
        for k in 0..DIRECTIONS + COORDINATES {
            let dir = direction(grad.shape(), k, &mut rng);
            let analytic = dot(&grad, &dir);
            let shifted = |s: f64| {
                let mut ps = store.clone();
                ps.params_mut()[pi].value = axpy(&param.value, s, &dir);
                objective(inputs, &ps)
            };
            let numeric = settle(analytic, shifted)?;
            record(&mut report, analytic, numeric, format!("{} probe {k}", param.name));
        }
    }
    Ok(report)
}

/// Central difference at the first step of [`STEPS`] that agrees with
/// `analytic`, or at the largest step when none does.
fn settle(analytic: f64, shifted: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let mut first = None;
    for h in STEPS {
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        if rel_err(analytic, numeric) < REL_TOL {
            return Ok(numeric);
        }
        first.get_or_insert(numeric);
    }
    Ok(first.expect("at least one step"))
}

/// Random dense direction for the first probes, a random basis vector after.
fn direction(shape: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    if k < DIRECTIONS {
        rand_tensor(shape, rng, -1.0, 1.0)
    } else {
        let mut t = Tensor::zeros(shape);
        let j = rng.gen_range(0..t.len());
        t.data_mut()[j] = 1.0;
        t
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn axpy(x: &Tensor<f64>, s: f64, d: &Tensor<f64>) -> Tensor<f64> {
    x.zip_map(d, |a, b| a + s * b)
}

/// Checks a function of inputs only.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    check(inputs, &ParamStore::new(), seed, |g, xs, _| f(g, xs))
}
