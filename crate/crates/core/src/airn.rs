//! Adaptive instance revaluing network.
//!
//! Each support instance of a class is summarised by the mean of its
//! representation's coordinates; a two-layer perceptron over the `K`
//! summaries produces one sigmoid weight per instance, and the class
//! representation is the weighted sum of the instances.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamGroup, ParamStore, Scalar, Tensor, Var};

pub const HIDDEN_WEIGHT: &str = "airn.hidden.weight";
pub const HIDDEN_BIAS: &str = "airn.hidden.bias";
pub const OUT_WEIGHT: &str = "airn.out.weight";
pub const OUT_BIAS: &str = "airn.out.bias";

/// Hidden width used when none is configured: `4·K`, at least 4.
pub fn default_hidden(shots: usize) -> usize {
    (4 * shots).max(4)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AirnInit {
    /// Uniform in ±1/√fan_in, zero biases.
    #[default]
    Random,
    /// All weights and biases zero: every instance gets weight 0.5.
    Zero,
}

pub fn init_airn(store: &mut ParamStore, shots: usize, hidden: usize, init: AirnInit, rng: &mut impl Rng) {
    let mut uniform = |shape: [usize; 2], fan_in: usize| -> Tensor<f32> {
        match init {
            AirnInit::Zero => Tensor::zeros(shape),
            AirnInit::Random => {
                let b = 1.0 / (fan_in as f32).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-b..b))
            }
        }
    };
    let first = uniform([hidden, shots], shots);
    let second = uniform([shots, hidden], hidden);
    store.insert(HIDDEN_WEIGHT, ParamGroup::Module, first);
    store.insert(HIDDEN_BIAS, ParamGroup::Module, Tensor::zeros([hidden]));
    store.insert(OUT_WEIGHT, ParamGroup::Module, second);
    store.insert(OUT_BIAS, ParamGroup::Module, Tensor::zeros([shots]));
}

/// Per-instance significance weights of one class, each strictly in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceVector(pub Vec<f32>);

impl SignificanceVector {
    pub fn weights(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A class representation with the class slot it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRepresentation {
    pub class: usize,
    pub vector: Vec<f32>,
}

fn support_shape<T: Scalar>(g: &Graph<T>, support: Var) -> Result<(usize, usize)> {
    match *g.shape(support) {
        [k, d] if k > 0 && d > 0 => Ok((k, d)),
        [0, _] => Err(Error::Contract("empty support set".into())),
        ref s => Err(Error::Shape(format!("support set must be K×d, got {:?}", s))),
    }
}

/// Mean of each instance representation's coordinates: `K×d → K`.
pub fn summarize<T: Scalar>(g: &mut Graph<T>, support: Var) -> Result<Var> {
    support_shape(g, support)?;
    Ok(g.reduce_mean(support, 1))
}

/// `sigmoid(W_out · relu(W_hidden · v + b_hidden) + b_out)` over the `K` summaries `v`.
pub fn weigh<T: Scalar>(g: &mut Graph<T>, params: &Bound, summary: Var) -> Result<Var> {
    let k = g.shape(summary)[0];
    let w_hidden = params.var(HIDDEN_WEIGHT);
    let trained = g.shape(w_hidden)[1];
    if trained != k {
        return Err(Error::ShotMismatch { trained, requested: k });
    }
    let hidden = g.shape(w_hidden)[0];
    let v = g.reshape(summary, &[k, 1]);
    let z = g.matmul(w_hidden, v);
    let b_hidden = g.reshape(params.var(HIDDEN_BIAS), &[hidden, 1]);
    let z = g.add(z, b_hidden);
    let z = g.relu(z);
    let z = g.matmul(params.var(OUT_WEIGHT), z);
    let b_out = g.reshape(params.var(OUT_BIAS), &[k, 1]);
    let z = g.add(z, b_out);
    let a = g.sigmoid(z);
    Ok(g.reshape(a, &[k]))
}

/// Weighted sum of the support rows, no renormalisation.
pub fn combine<T: Scalar>(g: &mut Graph<T>, weights: Var, support: Var) -> Result<Var> {
    let (k, d) = support_shape(g, support)?;
    if g.shape(weights) != [k] {
        return Err(Error::Shape(format!(
            "{} weights for {} support instances",
            g.shape(weights).first().copied().unwrap_or(0),
            k
        )));
    }
    let row = g.reshape(weights, &[1, k]);
    let c = g.matmul(row, support);
    Ok(g.reshape(c, &[d]))
}

/// Class representation and its significance weights for one class's
/// `K×d` support block.
pub fn class_representation<T: Scalar>(g: &mut Graph<T>, params: &Bound, support: Var) -> Result<(Var, Var)> {
    let v = summarize(g, support)?;
    let a = weigh(g, params, v)?;
    let c = combine(g, a, support)?;
    Ok((c, a))
}

/// Averaging baseline: the plain mean of the support representations.
pub fn mean_prototype<T: Scalar>(g: &mut Graph<T>, support: Var) -> Result<Var> {
    support_shape(g, support)?;
    Ok(g.reduce_mean(support, 0))
}
