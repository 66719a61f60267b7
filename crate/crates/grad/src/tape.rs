//! The autodiff tape: a flat record of one forward computation.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::ArrayD;

use crate::nn::Params;

/// Backward function of one node: receives all forward values, the incoming
/// gradient of this node, and a sink to accumulate parent gradients into.
pub(crate) type BackFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut GradSink)>;

pub(crate) struct Node {
    pub back: Option<BackFn>,
    pub requires_grad: bool,
}

struct Inner {
    values: Vec<ArrayD<f64>>,
    nodes: Vec<Node>,
    /// parameter name -> node id, so one name loaded twice shares a node
    param_ids: HashMap<String, usize>,
}

/// Records one forward pass. Build a fresh tape per training step.
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a tape. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                nodes: Vec::new(),
                param_ids: HashMap::new(),
            }),
        }
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        requires_grad: bool,
        back: Option<BackFn>,
    ) -> Tensor<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(value);
        inner.nodes.push(Node {
            back: if requires_grad { back } else { None },
            requires_grad,
        });
        Tensor { tape: self, id }
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: ArrayD<f64>) -> Tensor<'_> {
        self.push(value, false, None)
    }

    /// A differentiable leaf that is not a named parameter (used in tests and
    /// for probing input gradients).
    pub fn leaf(&self, value: ArrayD<f64>) -> Tensor<'_> {
        self.push(value, true, None)
    }

    /// Load a named parameter from the store. Loading the same name twice on
    /// one tape returns the same node, so shared weights accumulate correctly.
    pub fn param(&self, params: &Params, name: &str) -> Tensor<'_> {
        if let Some(&id) = self.inner.borrow().param_ids.get(name) {
            return Tensor { tape: self, id };
        }
        let value = params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let t = self.push(value, true, None);
        self.inner.borrow_mut().param_ids.insert(name.to_string(), t.id);
        t
    }

    pub fn value(&self, t: Tensor<'_>) -> ArrayD<f64> {
        self.inner.borrow().values[t.id].clone()
    }

    pub(crate) fn node_requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    pub fn shape(&self, t: Tensor<'_>) -> Vec<usize> {
        self.inner.borrow().values[t.id].shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node that
    /// received one; parameter gradients are retrievable by name.
    pub fn backward(&self, loss: Tensor<'_>) -> Grads {
        let mut inner = self.inner.borrow_mut();
        let Inner {
            values,
            nodes,
            param_ids,
        } = &mut *inner;
        assert_eq!(
            values[loss.id].len(),
            1,
            "backward expects a scalar loss, got shape {:?}",
            values[loss.id].shape()
        );

        let mut slots: Vec<Option<ArrayD<f64>>> = vec![None; values.len()];
        slots[loss.id] = Some(ArrayD::ones(values[loss.id].raw_dim()));

        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                slots[id] = None;
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            if let Some(back) = &nodes[id].back {
                let mut sink = GradSink { slots: &mut slots };
                back(values, &g, &mut sink);
            }
            slots[id] = Some(g);
        }

        Grads {
            slots,
            param_ids: param_ids.clone(),
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn value(&self) -> ArrayD<f64> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(*self)
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on shape {:?}", v.shape());
        v.iter().copied().next().unwrap()
    }
}

/// Gradient accumulator handed to backward functions.
pub struct GradSink<'a> {
    slots: &'a mut Vec<Option<ArrayD<f64>>>,
}

impl GradSink<'_> {
    pub fn add(&mut self, id: usize, g: ArrayD<f64>) {
        match &mut self.slots[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Result of a backward pass.
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
    param_ids: HashMap<String, usize>,
}

impl Grads {
    pub fn get(&self, t: Tensor<'_>) -> Option<&ArrayD<f64>> {
        self.slots.get(t.id).and_then(|s| s.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.param_ids
            .get(name)
            .and_then(|&id| self.slots[id].as_ref())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.param_ids.keys().map(|s| s.as_str())
    }
}
