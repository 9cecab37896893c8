//! Dense double-precision tensors with a reverse-mode tape.
//!
//! Everything the transformer needs lives here: the [`Tensor`] container,
//! a named [`ParamStore`], the [`Graph`] tape with its differentiable ops,
//! the Adam optimizer and a central-difference gradient checker.

mod gradcheck;
mod graph;
mod optim;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionLayout, Graph, NodeId, ParamGrads};
pub use optim::{adam_step, adam_update, AdamConfig, AdamState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Rows (along the first axis) that never receive updates.
    pub frozen_rows: Vec<usize>,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            frozen_rows: Vec::new(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn freeze_rows(&mut self, id: ParamId, rows: Vec<usize>) {
        self.params[id.0].frozen_rows = rows;
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// All parameter values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.tensor.data.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, store holds {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Copies `grads` into each tensor's gradient buffer (zeroing rows that are frozen).
    pub fn accumulate_grads(&mut self, grads: &ParamGrads) -> Result<()> {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(g) = grads.get(ParamId(i)) {
                p.tensor.accumulate_grad(g)?;
                if !p.frozen_rows.is_empty() {
                    let w = row_width(&p.tensor);
                    let buf = p.tensor.grad.as_mut().expect("just accumulated");
                    for &r in &p.frozen_rows {
                        buf[r * w..(r + 1) * w].fill(0.0);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Gradients flattened in store order, zeros where absent.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| match &p.tensor.grad {
                Some(g) => g.clone(),
                None => vec![0.0; p.tensor.len()],
            })
            .collect()
    }
}

fn row_width(t: &Tensor) -> usize {
    t.shape[1..].iter().product::<usize>().max(1)
}

/// Serializable description of a parameter's shape, used by checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        s.add("b", Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap());
        let flat = s.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut t = s.clone();
        t.load_flat(&[0.0; 5]).unwrap();
        t.load_flat(&flat).unwrap();
        assert_eq!(s, t);
        assert!(t.load_flat(&[0.0; 4]).is_err());
    }
}
