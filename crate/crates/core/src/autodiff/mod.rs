//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so the node list
//! is already topologically sorted. Leaves created with [`Graph::param`]
//! require gradients; [`Graph::constant`] leaves do not, and any primitive
//! whose inputs are all constant is recorded without a backward rule ever
//! running for it.

mod backward;
mod gradcheck;
mod ops;

pub use gradcheck::{finite_difference_check, finite_difference_check_at, relative_error, GradCheckReport};
pub use ops::BatchStats;

use crate::error::{Error, Result};
use crate::kernels::{BilinearPlan, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        /// Unfolded input per sample; empty for pointwise convolutions.
        cols: Vec<f64>,
    },
    /// Channel normalization over `[batch, channel, spatial...]`.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    GlobalAvgPool(Var),
    AvgPool2d {
        x: Var,
        k: usize,
    },
    MaxPool2d {
        x: Var,
        /// Flat input offset of the winning element per output.
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
        plan: BilinearPlan,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::LogSigmoid(x)
            | Op::GlobalAvgPool(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::AvgPool2d { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::Resize { x, .. }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::MeanAxis { x, .. } => vec![*x],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Recording,
    Consumed,
}

/// Ordered record of executed primitives plus their gradient buffers.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    state: State,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            state: State::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.dims(), g.clone()).expect("grad extent"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.is_finite() || matches!(op, Op::Leaf) || op.inputs().iter().any(|v| !self.nodes[v.0].value.is_finite()),
            "non-finite output from finite inputs in {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn ensure_recording(&self) -> Result<()> {
        match self.state {
            State::Recording => Ok(()),
            State::Consumed => Err(Error::State(
                "graph already differentiated; record a fresh forward pass".into(),
            )),
        }
    }

    /// Runs reverse accumulation from a single-element `root`.
    ///
    /// Every node that requires gradients receives the sum of its
    /// contributions over all use sites. A graph supports one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.ensure_recording()?;
        let node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Contract("root does not belong to this graph".into()))?;
        if node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got dims {:?}",
                node.value.dims()
            )));
        }
        self.state = State::Consumed;
        if !node.requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        backward::run(&self.nodes, &mut self.grads, root.0);
        Ok(())
    }
}
