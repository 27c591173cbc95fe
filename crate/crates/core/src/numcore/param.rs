use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimization group. `Theta` holds the router activation coefficients
/// (architectural parameters), `Omega` everything else that trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Omega,
    Theta,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Omega => "omega",
            Group::Theta => "theta",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        match s {
            "omega" => Some(Group::Omega),
            "theta" => Some(Group::Theta),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    grad: Tensor,
    group: Group,
    pub trainable: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// Owns every parameter of a model, addressed by [`ParamId`] in
/// registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: Group,
        trainable: bool,
    ) -> ParamId {
        let grad = Tensor::new(value.shape().to_vec(), vec![0.0; value.numel()])
            .expect("value shape is valid");
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            group,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replace a value, keeping shape. Used by checkpoint loading and tests.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.value.same_shape(&value) {
            return Err(Error::dim(format!(
                "{}: expected shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: Gradients) {
        for (id, g) in grads.entries {
            self.params[id.0].grad.add_assign(&g);
        }
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&Parameter) -> bool, trainable: bool) {
        for p in &mut self.params {
            if pred(p) {
                p.trainable = trainable;
            }
        }
    }

    pub fn count(&self, pred: impl Fn(&Parameter) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Snapshot of all values in id order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    pub(crate) entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Tensor)> {
        self.entries.iter()
    }
}
