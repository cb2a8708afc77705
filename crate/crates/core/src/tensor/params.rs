use std::collections::{BTreeMap, HashMap};

use super::{Gradients, Graph, Scalar, Tensor, Var};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Convolutional backbone (fine-tuned at the smaller rate).
    Backbone,
    /// Everything built on top of the backbone.
    Module,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Module => "module",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<f32>,
    /// `None` until a backward pass reaches this parameter after the last
    /// [`ParamStore::zero_grad`].
    pub grad: Option<Tensor<f32>>,
}

/// Named `f32` parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<f32>) {
        let name = name.into();
        let p = Parameter {
            name: name.clone(),
            group,
            value,
            grad: None,
        };
        match self.index.get(&name) {
            Some(&i) => self.params[i] = p,
            None => {
                self.index.insert(name, self.params.len());
                self.params.push(p);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<f32>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Register every parameter as a gradient-carrying leaf of `g`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Bound {
        let values: Vec<Tensor<T>> = self.params.iter().map(|p| p.value.cast()).collect();
        self.bind_values(g, &values)
    }

    /// Like [`ParamStore::bind`] but with caller-supplied values, one per
    /// parameter in store order (used for perturbed or 64-bit replays).
    pub fn bind_values<T: Scalar>(&self, g: &mut Graph<T>, values: &[Tensor<T>]) -> Bound {
        assert_eq!(
            values.len(),
            self.params.len(),
            "bind_values needs one tensor per parameter"
        );
        let mut vars = HashMap::with_capacity(values.len());
        let mut order = Vec::with_capacity(values.len());
        for (p, v) in self.params.iter().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "bind_values shape mismatch for {}", p.name);
            let var = g.param(v.clone());
            vars.insert(p.name.clone(), var);
            order.push(var);
        }
        Bound { vars, order }
    }

    /// Add the gradients of a backward pass into the parameter grad buffers.
    pub fn accumulate<T: Scalar>(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (p, &var) in self.params.iter_mut().zip(&bound.order) {
            if let Some(g) = grads.get(var) {
                let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
                for (d, &v) in buf.data_mut().iter_mut().zip(g) {
                    *d += v.as_f64() as f32;
                }
            }
        }
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    /// Panics when `name` was not part of the bound store.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{}` is not bound", name),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Vars in store order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}
