use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Learning-rate group. Refinement networks train their preprocessing
/// branches and their combination weights at separate rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Branch,
    Combination,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named parameter with its gradient buffer and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    /// `None` until a backward pass writes into it.
    pub grad: Option<Vec<f64>>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    branch_lr_scale: f64,
    combination_lr_scale: f64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            branch_lr_scale: 1.0,
            combination_lr_scale: 1.0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let len = value.len();
        self.params.push(Param {
            name: name.into(),
            group,
            value,
            grad: None,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Adds `grad` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.len() {
            return Err(Error::shape("ParamStore::accumulate_grad", p.value.len(), grad.len()));
        }
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Learning-rate multipliers applied by [`super::adam_step`] per group.
    pub fn set_lr_scales(&mut self, branch: f64, combination: f64) {
        self.branch_lr_scale = branch;
        self.combination_lr_scale = combination;
    }

    pub fn lr_scale(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Branch => self.branch_lr_scale,
            ParamGroup::Combination => self.combination_lr_scale,
        }
    }

    /// Copies of all parameter values, e.g. to keep the best epoch.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape("ParamStore::restore", self.params.len(), values.len()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("ParamStore::restore", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}
