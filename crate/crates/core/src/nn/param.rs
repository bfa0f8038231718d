use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Frozen parameters are bound as constants and never updated.
    pub frozen: bool,
    /// Member of the set that would be initialized from pretrained weights
    /// (and is therefore frozen during the warm-up window).
    pub pretrained_analog: bool,
}

/// Flat, insertion-ordered collection of every parameter of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            frozen: false,
            pretrained_analog: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binds every parameter onto `graph`: trainable ones as leaves, frozen
    /// ones as constants.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| {
                    if p.frozen {
                        graph.constant(p.value.clone())
                    } else {
                        graph.leaf(p.value.clone())
                    }
                })
                .collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients of a backward pass into each parameter's buffer.
    pub fn accumulate(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>) {
        for (p, &var) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(var) {
                p.grad.add_assign(g);
            }
        }
    }

    /// All values concatenated in insertion order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

/// Parameters of one [`ParamStore`] bound to a graph.
pub struct Bound<'g, T: Real> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

/// Fan-in scaled uniform initialization, `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(shape, -bound, bound, rng)
}

pub fn uniform<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Stochastic depth: in training, each sample's whole branch is zeroed with
/// probability `rate` and survivors are scaled by `1/(1-rate)`. Identity in
/// evaluation or when `rate == 0`.
pub fn drop_path<'g, T: Real>(
    x: Var<'g, T>,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var<'g, T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("drop_path rate must be in [0,1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let mut mask_shape = vec![1; shape.len()];
    mask_shape[0] = shape[0];
    let keep = 1.0 - rate;
    let mask = (0..shape[0])
        .map(|_| {
            if rng.gen::<f64>() < keep {
                T::c(1.0 / keep)
            } else {
                T::zero()
            }
        })
        .collect();
    let mask = x.graph().constant(Tensor::new(&mask_shape, mask)?);
    x.mul_bcast(mask)
}
