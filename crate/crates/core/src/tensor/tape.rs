use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Backward rule of one recorded primitive: maps the output gradient to one
/// optional gradient per input (`None` for inputs that do not need one).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended as operations execute, so every node's inputs precede
/// it and the reverse sweep is a single pass over the vector.
pub struct Tape<T: Element = f32> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Registers `value` as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor<T>) -> Tensor<T> {
        let id = self.push(Node {
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
            backward: None,
        });
        Tensor::with_var(value.shape().to_vec(), value.shared_data(), self.clone(), id)
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: &Tensor<T>) -> Result<Gradients<T>> {
        if output.numel() != 1 {
            return Err(Error::NonScalarBackward(output.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let Some((tape, root)) = output.var() else {
            return Ok(Gradients { grads });
        };
        if !tape.same(self) {
            return Err(Error::TapeMismatch);
        }
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let input_grads = backward(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(ig)) = (input, ig) else {
                    continue;
                };
                debug_assert_eq!(ig.len(), nodes[*input].shape.iter().product::<usize>());
                match &mut grads[*input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Appends a primitive application producing `data` with `shape`.
    ///
    /// `backward` receives the output gradient and a mask of which inputs are
    /// on the tape; it returns one gradient per input. When no input is on a
    /// tape the result is a constant and nothing is recorded.
    pub(crate) fn record<F>(
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: F,
    ) -> Result<Tensor<T>>
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut tape: Option<&Tape<T>> = None;
        for t in inputs {
            if let Some((tp, _)) = t.var() {
                match tape {
                    Some(existing) if !existing.same(tp) => return Err(Error::TapeMismatch),
                    _ => tape = Some(tp),
                }
            }
        }
        let Some(tape) = tape.cloned() else {
            return Ok(Tensor::from_shared(shape, Rc::new(data)));
        };
        let needs: Vec<bool> = inputs.iter().map(|t| t.var().is_some()).collect();
        let ids = inputs.iter().map(|t| t.var().map(|(_, id)| id)).collect();
        let id = tape.push(Node {
            inputs: ids,
            shape: shape.clone(),
            backward: Some(Box::new(move |g: &[T]| backward(g, &needs))),
        });
        Ok(Tensor::with_var(shape, Rc::new(data), tape, id))
    }
}

/// Gradients of a scalar with respect to every leaf on the tape.
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient buffer for `t`, or `None` when `t` is off the tape or did not
    /// influence the output.
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        let (_, id) = t.var()?;
        self.grads.get(id)?.as_deref()
    }

    /// Like [`get`](Self::get) but returns zeros when the leaf is unreachable.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        self.get(t)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); t.numel()])
    }

    pub fn tensor(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        self.get(t)
            .map(|g| Tensor::from_vec(t.shape().to_vec(), g.to_vec()).expect("grad matches leaf shape"))
    }
}
