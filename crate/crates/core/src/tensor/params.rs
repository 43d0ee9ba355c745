use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.frozen.push(false);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Replaces a tensor; the shape must not change.
    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape("ParamStore::set", self.tensors[id.0].shape(), t.shape()));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        self.frozen.iter_mut().for_each(|f| *f = frozen);
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Number of scalars that are not frozen.
    pub fn num_trainable(&self) -> usize {
        self.ids()
            .filter(|id| !self.is_frozen(*id))
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Adds every tensor to `g` as a leaf. Frozen tensors become constants.
    /// The returned vector is indexed by [`ParamId::index`].
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.frozen)
            .map(|(t, f)| g.leaf(t.clone(), !f))
            .collect();
        Bound { vars }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Graph handles for every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(2.0));
        let b = s.add("b", Tensor::scalar(3.0));
        s.frozen[b.0] = true;
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let y = g.mul(bound[a], bound[b]).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(bound[a]).unwrap(), &[3.0]);
        assert!(grads.get(bound[b]).is_none());
        assert_eq!(s.num_trainable(), 1);
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2, 2]));
        assert!(s.set(a, Tensor::zeros(&[4])).is_err());
        assert!(s.set(a, Tensor::full(&[2, 2], 1.0)).is_ok());
    }
}
