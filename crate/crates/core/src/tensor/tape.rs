use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T]) -> Vec<Option<Vec<T>>> + Send>;

struct Entry<T> {
    kind: &'static str,
    inputs: Vec<Option<usize>>,
    output: usize,
    backward: BackwardFn<T>,
}

struct Inner<T> {
    entries: Vec<Entry<T>>,
    next_id: usize,
    leaves: HashMap<usize, usize>,
    grads: HashMap<usize, Arc<Vec<T>>>,
    consumed: bool,
}

/// Ordered record of differentiable ops.
///
/// Ids are handed out in execution order, so every entry's inputs are
/// leaves or outputs of earlier entries and a reverse sweep visits each
/// entry once. A tape is consumed by its first backward pass.
pub struct Tape<T: Element = f64> {
    inner: Arc<Mutex<Inner<T>>>,
}

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Arc::clone(&self.inner),
        }
    }
}

#[derive(Clone)]
pub(crate) struct Node<T: Element> {
    pub tape: Tape<T>,
    pub id: usize,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Arc::new(Mutex::new(Inner {
                entries: Vec::new(),
                next_id: 0,
                leaves: HashMap::new(),
                grads: HashMap::new(),
                consumed: false,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner<T>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn same_as(&self, other: &Tape<T>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Register `value` as a leaf that will receive a gradient.
    pub fn leaf(&self, value: &Tensor<T>) -> Tensor<T> {
        let mut inner = self.lock();
        let id = inner.next_id;
        inner.next_id += 1;
        inner.leaves.insert(id, value.numel());
        Tensor {
            shape: value.shape.clone(),
            data: value.data_arc(),
            node: Some(Node {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub(crate) fn push(
        &self,
        kind: &'static str,
        inputs: Vec<Option<usize>>,
        backward: BackwardFn<T>,
    ) -> Result<Node<T>> {
        let mut inner = self.lock();
        if inner.consumed {
            return Err(Error::Usage(format!("{kind}: recording onto a consumed tape")));
        }
        let output = inner.next_id;
        inner.next_id += 1;
        inner.entries.push(Entry {
            kind,
            inputs,
            output,
            backward,
        });
        Ok(Node {
            tape: self.clone(),
            id: output,
        })
    }

    /// Number of recorded (not yet consumed) ops.
    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op kinds in recording order.
    pub fn kinds(&self) -> Vec<&'static str> {
        self.lock().entries.iter().map(|e| e.kind).collect()
    }

    pub fn is_consumed(&self) -> bool {
        self.lock().consumed
    }

    pub(crate) fn grad_of(&self, id: usize) -> Option<Arc<Vec<T>>> {
        self.lock().grads.get(&id).cloned()
    }

    pub(crate) fn run_backward(&self, output: usize, seed: Vec<T>) -> Result<()> {
        let (entries, leaves) = {
            let mut inner = self.lock();
            if inner.consumed {
                return Err(Error::Usage("backward on a consumed tape".into()));
            }
            inner.consumed = true;
            (std::mem::take(&mut inner.entries), inner.leaves.clone())
        };

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(output, seed);
        for entry in entries.into_iter().rev() {
            let Some(g) = grads.remove(&entry.output) else {
                continue;
            };
            let input_grads = (entry.backward)(&g);
            debug_assert_eq!(input_grads.len(), entry.inputs.len(), "{}", entry.kind);
            for (id, grad) in entry.inputs.iter().zip(input_grads) {
                let (Some(id), Some(grad)) = (id, grad) else {
                    continue;
                };
                match grads.get_mut(id) {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), grad.len(), "{}", entry.kind);
                        acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += *b);
                    }
                    None => {
                        grads.insert(*id, grad);
                    }
                }
            }
        }

        let mut inner = self.lock();
        for (id, numel) in leaves {
            let g = grads.remove(&id).unwrap_or_else(|| vec![T::zero(); numel]);
            inner.grads.insert(id, Arc::new(g));
        }
        Ok(())
    }
}
