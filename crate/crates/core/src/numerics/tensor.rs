use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Maps the gradient of an op's output to one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense row-major `f64` tensor that is also a node of a reverse-mode graph.
///
/// Cloning is cheap (reference counted). A tensor and everything reachable from
/// it belong to one thread; the type is deliberately `!Send`.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl Tensor {
    /// A tensor that does not participate in differentiation.
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, values, false)
    }

    /// A leaf whose gradient is recorded by [`Tensor::backward`].
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, values, true)
    }

    pub fn leaf(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        check_shape(shape, values.len())?;
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            value: values,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        })))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(&[1], vec![v]).expect("scalar shape")
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            value,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.value
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Identity of this node within its graph.
    pub fn graph_id(&self) -> u64 {
        self.0.id
    }

    /// Accumulated gradient; `None` until a backward pass reaches this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::with_capacity(order.len());
        pending.insert(self.0.id, vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            if let Some(bw) = &node.0.backward {
                for (parent, pg) in node.0.parents.iter().zip(bw(&g)) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.len());
                    match pending.get_mut(&parent.0.id) {
                        Some(acc) => add_into(acc, &pg),
                        None => {
                            pending.insert(parent.0.id, pg);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => add_into(acc, &g),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Nodes reachable through differentiable edges, parents before children.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut visited = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    /// Detached copy of the values.
    pub fn to_array(&self) -> Array {
        Array {
            shape: self.shape().to_vec(),
            data: self.values().to_vec(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Contract(format!(
            "shape {shape:?} must be non-empty with positive dimensions"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Contract(format!(
            "shape {shape:?} holds {n} values but {len} were given"
        )));
    }
    Ok(())
}

pub(crate) fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Plain owned tensor data, detached from any graph. Used for parameters,
/// gradients and optimizer buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bind as a graph leaf.
    pub fn to_tensor(&self, requires_grad: bool) -> Tensor {
        Tensor::leaf(&self.shape, self.data.clone(), requires_grad)
            .expect("Array invariants guarantee a valid shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[1..].iter().product::<usize>();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
