use std::collections::BTreeMap;

use super::{Real, Result, TensorError};

/// Dense row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::BadLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64_slice(shape: &[usize], vals: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), vals.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub(crate) fn reshaped(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// Max elementwise |a - b|.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Context handed to a backward rule: parent values, own value, incoming grad.
pub(crate) struct BackCtx<'a, T> {
    pub parents: Vec<&'a TensorData<T>>,
    pub value: &'a TensorData<T>,
    pub grad: &'a TensorData<T>,
}

pub(crate) type BackFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<TensorData<T>> + Send + Sync>;

pub(crate) struct Node<T> {
    pub value: TensorData<T>,
    pub parents: Vec<Var>,
    pub backward: Option<BackFn<T>>,
    pub needs_grad: bool,
    pub name: Option<String>,
}

/// Append-only computation record. Node order is the topological order, so a
/// single reverse sweep visits each node exactly once.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: TensorData<T>, needs_grad: bool, name: Option<&str>) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad,
            name: name.map(str::to_owned),
        })
    }

    pub fn constant(&mut self, value: TensorData<T>) -> Var {
        self.leaf(value, false, None)
    }

    pub(crate) fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn emit(
        &mut self,
        value: TensorData<T>,
        parents: Vec<Var>,
        backward: BackFn<T>,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Node {
            value,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
            name: None,
        })
    }

    pub fn value(&self, v: Var) -> &TensorData<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Reverse sweep from a scalar loss. Gradients are produced for every
    /// node on a path from a `needs_grad` leaf to the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(TensorError::NotScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<TensorData<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(TensorData::filled(loss_val.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let (Some(grad), Some(back)) = (&grads[id], &node.backward) else {
                continue;
            };
            let ctx = BackCtx {
                parents: node.parents.iter().map(|p| self.value(*p)).collect(),
                value: &node.value,
                grad,
            };
            let parent_grads = back(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *g;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { by_node: grads })
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    by_node: Vec<Option<TensorData<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&TensorData<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of named leaves that required grad, keyed by name.
    /// Frozen parameters (registered with `needs_grad = false`) never appear.
    pub fn named(&self, graph: &Graph<T>) -> BTreeMap<String, TensorData<T>> {
        let mut out = BTreeMap::new();
        for (id, node) in graph.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.name, node.needs_grad) {
                if let Some(g) = &self.by_node[id] {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}
