//! Reverse-mode autodiff over a recorded list of operations.

use std::cell::RefCell;
use std::sync::Arc;

use super::ops;
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;

/// A value flowing through the tape. Untracked vars (constants, or anything
/// produced while not recording) carry no node id.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.value.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var },
    ConvTranspose { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    MaxPool { x: Var, arg: Vec<u32> },
    Concat { parts: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
}

/// Records operations against a parameter store. A tape created with
/// [`Tape::inference`] records nothing, so intermediate activations are freed as
/// soon as they go out of scope.
pub struct Tape<'p> {
    store: &'p ParamStore,
    recording: bool,
    nodes: RefCell<Vec<Node>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            store,
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, tracked: bool) -> Var {
        let value = Arc::new(value);
        if !(self.recording && tracked) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Arc::clone(&value),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            id: None,
            value: Arc::new(value),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        let value = self.store.shared(id);
        if !self.recording {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Param(id),
            value: Arc::clone(&value),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Same-padded convolution with per-channel bias (`w`: `Co×Ci×k×k`, `b`: `1×Co×1×1`).
    pub fn conv2d(&self, x: &Var, w: &Var, b: &Var) -> Var {
        let y = ops::conv2d(x.value(), w.value(), b.value());
        let tracked = x.is_tracked() || w.is_tracked() || b.is_tracked();
        self.push(
            Op::Conv2d {
                x: x.clone(),
                w: w.clone(),
                b: b.clone(),
            },
            y,
            tracked,
        )
    }

    /// 2×2 stride-2 upsampling convolution (`w`: `Ci×Co×2×2`, `b`: `1×Co×1×1`).
    pub fn conv_transpose2x2(&self, x: &Var, w: &Var, b: &Var) -> Var {
        let y = ops::conv_transpose2x2(x.value(), w.value(), b.value());
        let tracked = x.is_tracked() || w.is_tracked() || b.is_tracked();
        self.push(
            Op::ConvTranspose {
                x: x.clone(),
                w: w.clone(),
                b: b.clone(),
            },
            y,
            tracked,
        )
    }

    pub fn relu(&self, x: &Var) -> Var {
        let y = ops::relu(x.value());
        self.push(Op::Relu { x: x.clone() }, y, x.is_tracked())
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        let y = ops::sigmoid(x.value());
        self.push(Op::Sigmoid { x: x.clone() }, y, x.is_tracked())
    }

    pub fn max_pool2x2(&self, x: &Var) -> Var {
        let (y, arg) = ops::max_pool2x2(x.value());
        self.push(Op::MaxPool { x: x.clone(), arg }, y, x.is_tracked())
    }

    pub fn concat(&self, parts: &[&Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let y = ops::concat_channels(&values);
        let tracked = parts.iter().any(|p| p.is_tracked());
        self.push(
            Op::Concat {
                parts: parts.iter().map(|&p| p.clone()).collect(),
            },
            y,
            tracked,
        )
    }

    /// Back-propagates the given output gradients and returns the parameter gradients.
    pub fn backward(&self, seeds: Vec<(&Var, Tensor)>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for (var, g) in seeds {
            if let Some(id) = var.id {
                accumulate(&mut grads, id, g);
            }
        }
        let mut out = Gradients::new(self.store.len());
        for idx in (0..nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &nodes[idx].op {
                Op::Param(pid) => out.accumulate(*pid, g),
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(x.value(), w.value(), &g, x.is_tracked());
                    route(&mut grads, x, dx);
                    route(&mut grads, w, Some(dw));
                    route(&mut grads, b, Some(db));
                }
                Op::ConvTranspose { x, w, b } => {
                    let (dx, dw, db) =
                        ops::conv_transpose2x2_backward(x.value(), w.value(), &g, x.is_tracked());
                    route(&mut grads, x, dx);
                    route(&mut grads, w, Some(dw));
                    route(&mut grads, b, Some(db));
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(&nodes[idx].value, &g);
                    route(&mut grads, x, Some(dx));
                }
                Op::Sigmoid { x } => {
                    let dx = ops::sigmoid_backward(&nodes[idx].value, &g);
                    route(&mut grads, x, Some(dx));
                }
                Op::MaxPool { x, arg } => {
                    if let Some(id) = x.id {
                        let dx = ops::max_pool2x2_backward(x.value().shape(), arg, &g);
                        accumulate(&mut grads, id, dx);
                    }
                }
                Op::Concat { parts } => {
                    let mut c0 = 0;
                    for p in parts {
                        let c = p.shape()[1];
                        if let Some(id) = p.id {
                            accumulate(&mut grads, id, ops::channel_slice(&g, c0, c));
                        }
                        c0 += c;
                    }
                }
            }
        }
        out
    }
}

fn route(grads: &mut [Option<Tensor>], var: &Var, g: Option<Tensor>) {
    if let (Some(id), Some(g)) = (var.id, g) {
        accumulate(grads, id, g);
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}
