//! Cosine classifier and the three terms of the joint loss.

use serde::{Deserialize, Serialize};

use crate::abfe::NORM_EPS;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const TAU: &str = "head.tau";

/// Scale applied to cosine similarities before the softmax.
#[derive(Clone, Copy, Debug)]
pub enum Temperature {
    Fixed(f64),
    /// One-element parameter in the graph.
    Learned(Var),
}

/// Fails with the offending class slot when a row of `class_reps` has no direction.
fn check_class_norms<T: Scalar>(g: &Graph<T>, class_reps: Var) -> Result<()> {
    let v = g.value(class_reps);
    let d = *v.shape().last().unwrap_or(&0);
    if v.shape().len() != 2 || d == 0 {
        return Err(Error::Shape(format!(
            "class representations must be N×d, got {:?}",
            v.shape()
        )));
    }
    for (class, row) in v.data().chunks(d).enumerate() {
        let n: f64 = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if n.is_nan() || n <= NORM_EPS {
            return Err(Error::ZeroClassRep { class });
        }
    }
    Ok(())
}

/// `τ · ĉ_nᵀ F_m` for every query row `m` and class row `n`.
pub fn cosine_logits<T: Scalar>(g: &mut Graph<T>, queries: Var, class_reps: Var, tau: Temperature) -> Result<Var> {
    check_class_norms(g, class_reps)?;
    if g.shape(queries).len() != 2 || g.shape(queries)[1] != g.shape(class_reps)[1] {
        return Err(Error::Shape(format!(
            "queries {:?} do not match class representations {:?}",
            g.shape(queries),
            g.shape(class_reps)
        )));
    }
    let unit = g.l2_normalize(class_reps, T::lit(NORM_EPS));
    let unit_t = g.transpose(unit);
    let cos = g.matmul(queries, unit_t);
    Ok(match tau {
        Temperature::Fixed(t) => g.scale(cos, T::lit(t)),
        Temperature::Learned(v) => g.mul_scalar(cos, v),
    })
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Query classification loss: mean negative log-likelihood of the true class.
pub fn loss_cls<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Var {
    g.softmax_cross_entropy(logits, labels)
}

/// Support instances classified against the class representations of the
/// same episode, with the classifier's temperature.
pub fn loss_intra<T: Scalar>(
    g: &mut Graph<T>,
    support_reps: Var,
    class_reps: Var,
    support_labels: &[usize],
    tau: Temperature,
) -> Result<Var> {
    let logits = cosine_logits(g, support_reps, class_reps, tau)?;
    Ok(g.softmax_cross_entropy(logits, support_labels))
}

/// `Σ_{i≠j} ĉ_iᵀ ĉ_j` over ordered pairs.
pub fn loss_inter<T: Scalar>(g: &mut Graph<T>, class_reps: Var) -> Result<Var> {
    check_class_norms(g, class_reps)?;
    let n = g.shape(class_reps)[0];
    let unit = g.l2_normalize(class_reps, T::lit(NORM_EPS));
    let unit_t = g.transpose(unit);
    let gram = g.matmul(unit, unit_t);
    let mask = g.constant(Tensor::from_fn([n, n], |i| {
        if i / n == i % n {
            T::zero()
        } else {
            T::one()
        }
    }));
    let off = g.hadamard(gram, mask);
    Ok(g.sum(off))
}

/// Trade-off coefficients of the joint loss. `cls` is 1 except in loss-term
/// ablations that drop the query classification term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        LossWeights {
            cls: 1.0,
            lambda1,
            lambda2,
        }
    }
}

/// `cls·l_cls + lambda1·l_intra + lambda2·l_inter`.
pub fn loss_joint<T: Scalar>(g: &mut Graph<T>, cls: Var, intra: Var, inter: Var, w: LossWeights) -> Result<Var> {
    if !(w.cls >= 0.0 && w.lambda1 >= 0.0 && w.lambda2 >= 0.0) {
        return Err(Error::Config(format!("loss weights must be non-negative, got {:?}", w)));
    }
    let c = if w.cls == 1.0 { cls } else { g.scale(cls, T::lit(w.cls)) };
    let a = g.scale(intra, T::lit(w.lambda1));
    let b = g.scale(inter, T::lit(w.lambda2));
    let s = g.add(c, a);
    Ok(g.add(s, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_joint: f64,
    pub w_cls: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    /// `|l_joint − (cls·l_cls + lambda1·l_intra + lambda2·l_inter)|`.
    pub fn identity_residual(&self) -> f64 {
        (self.l_joint - (self.w_cls * self.l_cls + self.lambda1 * self.l_intra + self.lambda2 * self.l_inter)).abs()
    }
}
