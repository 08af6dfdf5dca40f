use std::sync::atomic::{AtomicU64, Ordering};

use super::{Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Returns one entry per input in input order; `None` means the input
/// receives no gradient from this op.
pub trait Backward<T: Scalar>: Send + Sync {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<Box<dyn Backward<T>>>,
}

/// Append-only record of executed operations.
///
/// Node indices are assigned in execution order, so every node's inputs have
/// smaller indices and reverse iteration is a valid reverse-topological walk.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        let i = self.resolve(var)?;
        Ok(&self.nodes[i].value)
    }

    fn resolve(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(var.index)
    }

    /// Record the result of an operation together with its backward rule.
    pub fn push_op(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Backward<T> + 'static,
    ) -> Result<Var> {
        let inputs = inputs
            .iter()
            .map(|&v| self.resolve(v))
            .collect::<Result<Vec<_>>>()?;
        self.nodes.push(Node {
            value,
            inputs,
            backward: Some(Box::new(backward)),
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Reverse-mode sweep from a scalar `loss`, consuming the tape.
    ///
    /// Gradients from multiple consumers of a value are summed.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let root = self.resolve(loss)?;
        let root_value = &self.nodes[root].value;
        if root_value.len() != 1 {
            return Err(TensorError::NotScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(root_value.ones_like());

        for i in (0..=root).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.backward {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let input_grads = rule.backward(&grad, &inputs, &node.value)?;
                if input_grads.len() != node.inputs.len() {
                    return Err(TensorError::Invalid(format!(
                        "backward produced {} gradients for {} inputs",
                        input_grads.len(),
                        node.inputs.len()
                    )));
                }
                for (&j, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if g.shape() != self.nodes[j].value.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "backward",
                            left: self.nodes[j].value.shape().to_vec(),
                            right: g.shape().to_vec(),
                        });
                    }
                    match &mut grads[j] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(grad);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

/// Result of [`Tape::backward`]: gradient of the loss w.r.t. every recorded value.
pub struct Gradients<T: Scalar = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; values the loss does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> Result<Tensor<T>> {
        if var.tape != self.tape || var.index >= self.grads.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => Tensor::from_parts(
                self.shapes[var.index].clone(),
                vec![T::zero(); self.shapes[var.index].iter().product()],
            ),
        })
    }
}
