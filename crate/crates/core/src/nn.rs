//! Named parameter storage and small layer helpers.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors. Order is insertion order and is what
/// checkpoints serialise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters registered on one tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Binding from explicit vars, one per parameter in set order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id_of(&name).is_none(), "duplicate parameter {name}");
        t.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Adds the gradients found for `bound` into each tensor's grad buffer.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn has_grads(&self) -> bool {
        self.tensors.iter().any(|t| t.grad().is_some())
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Overwrites values of every parameter whose name also exists in `src`
    /// with matching shape. Returns how many were copied.
    pub fn copy_matching(&mut self, src: &ParamSet) -> usize {
        let mut n = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if let Some(s) = src.by_name(name) {
                if s.shape() == t.shape() {
                    t.data_mut().copy_from_slice(s.data());
                    n += 1;
                }
            }
        }
        n
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<(), TensorError> {
        let id = self.id_of(name).ok_or(TensorError::Index {
            index: self.len(),
            extent: self.len(),
        })?;
        let cur = &mut self.tensors[id.0];
        if cur.shape() != t.shape() {
            return Err(TensorError::Shape {
                op: "ParamSet::set",
                lhs: cur.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        cur.data_mut().copy_from_slice(t.data());
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Dense layer `y = x·W (+ b)` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Normal init with std `1/sqrt(in)` scaled by `gain`; `gain == 0` gives
    /// an all-zero weight.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        dims: (usize, usize),
        bias: bool,
        gain: f64,
    ) -> Self {
        let (fan_in, fan_out) = dims;
        let w = if gain == 0.0 {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            Tensor::randn(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt())
        };
        let w = ps.add(format!("{name}.w"), w);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => tape.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_adds_across_backward_calls() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::ones(&[2]));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let b = ps.bind(&mut tape);
            let l = tape.sum(b[id]);
            let g = tape.backward(l).unwrap();
            ps.accumulate(&b, &g);
        }
        assert_eq!(ps.get(id).grad(), Some(&[2.0, 2.0][..]));
        ps.zero_grads();
        assert!(!ps.has_grads());
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::ones(&[1]));
        ps.add("a", Tensor::ones(&[1]));
    }
}
